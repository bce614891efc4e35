//! Small self-contained PNG chart renderer: line charts with optional SEM
//! bands, scatter plots, axis ticks, and a built-in 5x7 bitmap font.

use crate::error::Result;
use image::{Rgb, RgbImage};
use std::path::Path;

const WIDTH: u32 = 720;
const HEIGHT: u32 = 440;
const MARGIN_L: u32 = 64;
const MARGIN_R: u32 = 16;
const MARGIN_T: u32 = 28;
const MARGIN_B: u32 = 44;

pub const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

/// One plotted series: a polyline or scatter, with an optional (lo, hi) band.
pub struct Series {
    pub label: String,
    pub color: [u8; 3],
    /// (x, y) points in data coordinates.
    pub points: Vec<(f64, f64)>,
    /// Optional (x, lo, hi) band, drawn beneath the line.
    pub band: Vec<(f64, f64, f64)>,
    pub scatter: bool,
}

impl Series {
    pub fn line(label: &str, color: [u8; 3], points: Vec<(f64, f64)>) -> Series {
        Series {
            label: label.to_string(),
            color,
            points,
            band: Vec::new(),
            scatter: false,
        }
    }

    pub fn scatter(label: &str, color: [u8; 3], points: Vec<(f64, f64)>) -> Series {
        Series {
            label: label.to_string(),
            color,
            points,
            band: Vec::new(),
            scatter: true,
        }
    }
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn from_series(series: &[Series]) -> Frame {
        let mut x_min = f64::INFINITY;
        let mut x_max = f64::NEG_INFINITY;
        let mut y_min = f64::INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        for s in series {
            for &(x, y) in &s.points {
                if x.is_finite() && y.is_finite() {
                    x_min = x_min.min(x);
                    x_max = x_max.max(x);
                    y_min = y_min.min(y);
                    y_max = y_max.max(y);
                }
            }
            for &(x, lo, hi) in &s.band {
                if x.is_finite() && lo.is_finite() && hi.is_finite() {
                    x_min = x_min.min(x);
                    x_max = x_max.max(x);
                    y_min = y_min.min(lo);
                    y_max = y_max.max(hi);
                }
            }
        }
        if !x_min.is_finite() || !y_min.is_finite() {
            x_min = 0.0;
            x_max = 1.0;
            y_min = 0.0;
            y_max = 1.0;
        }
        if (x_max - x_min).abs() < 1e-12 {
            x_min -= 0.5;
            x_max += 0.5;
        }
        if (y_max - y_min).abs() < 1e-12 {
            y_min -= 0.5;
            y_max += 0.5;
        }
        let ypad = (y_max - y_min) * 0.06;
        Frame {
            x_min,
            x_max,
            y_min: y_min - ypad,
            y_max: y_max + ypad,
        }
    }

    fn px(&self, x: f64) -> i64 {
        let w = (WIDTH - MARGIN_L - MARGIN_R) as f64;
        MARGIN_L as i64 + ((x - self.x_min) / (self.x_max - self.x_min) * w).round() as i64
    }

    fn py(&self, y: f64) -> i64 {
        let h = (HEIGHT - MARGIN_T - MARGIN_B) as f64;
        (HEIGHT - MARGIN_B) as i64
            - ((y - self.y_min) / (self.y_max - self.y_min) * h).round() as i64
    }
}

/// Render a chart to a PNG file.
pub fn render_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    let frame = Frame::from_series(series);
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));

    for s in series {
        if s.band.len() >= 2 {
            draw_band(&mut img, &frame, &s.band, s.color);
        }
    }
    draw_axes(&mut img, &frame);
    for s in series {
        if s.scatter {
            for &(x, y) in &s.points {
                fill_rect(&mut img, frame.px(x) - 2, frame.py(y) - 2, 5, 5, s.color);
            }
        } else {
            let mut last: Option<(i64, i64)> = None;
            for &(x, y) in &s.points {
                let p = (frame.px(x), frame.py(y));
                if let Some(l) = last {
                    draw_line(&mut img, l, p, s.color);
                }
                fill_rect(&mut img, p.0 - 1, p.1 - 1, 3, 3, s.color);
                last = Some(p);
            }
        }
    }

    draw_text(&mut img, MARGIN_L as i64, 8, title, [0, 0, 0]);
    draw_text(
        &mut img,
        (WIDTH / 2) as i64 - 3 * x_label.len() as i64,
        (HEIGHT - 14) as i64,
        x_label,
        [0, 0, 0],
    );
    draw_text_vertical(&mut img, 6, (HEIGHT / 2) as i64 - 3 * y_label.len() as i64, y_label);

    let mut ly = MARGIN_T as i64 + 4;
    for s in series {
        if s.label.is_empty() {
            continue;
        }
        let lx = (WIDTH - MARGIN_R) as i64 - 10 - 6 * s.label.len() as i64 - 14;
        fill_rect(&mut img, lx, ly, 10, 7, s.color);
        draw_text(&mut img, lx + 14, ly, &s.label, [0, 0, 0]);
        ly += 12;
    }

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path)
        .map_err(|e| crate::error::SdError::Format(format!("png write: {e}")))?;
    Ok(())
}

fn draw_axes(img: &mut RgbImage, frame: &Frame) {
    let axis = [60, 60, 60];
    let grid = [225, 225, 225];
    let (x0, x1) = (MARGIN_L as i64, (WIDTH - MARGIN_R) as i64);
    let (y0, y1) = (MARGIN_T as i64, (HEIGHT - MARGIN_B) as i64);
    for i in 0..=4 {
        let fx = frame.x_min + (frame.x_max - frame.x_min) * i as f64 / 4.0;
        let px = frame.px(fx);
        draw_line(img, (px, y0), (px, y1), grid);
        let label = fmt_tick(fx);
        draw_text(img, px - 3 * label.len() as i64, y1 + 6, &label, axis);

        let fy = frame.y_min + (frame.y_max - frame.y_min) * i as f64 / 4.0;
        let py = frame.py(fy);
        draw_line(img, (x0, py), (x1, py), grid);
        let label = fmt_tick(fy);
        draw_text(img, x0 - 6 * label.len() as i64 - 4, py - 3, &label, axis);
    }
    draw_line(img, (x0, y0), (x0, y1), axis);
    draw_line(img, (x0, y1), (x1, y1), axis);
}

fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if a >= 10_000.0 {
        format!("{:.0}K", v / 1000.0)
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

fn draw_band(img: &mut RgbImage, frame: &Frame, band: &[(f64, f64, f64)], color: [u8; 3]) {
    for w in band.windows(2) {
        let (xa, la, ha) = w[0];
        let (xb, lb, hb) = w[1];
        let pxa = frame.px(xa);
        let pxb = frame.px(xb);
        if pxb == pxa {
            continue;
        }
        for px in pxa..=pxb {
            let t = (px - pxa) as f64 / (pxb - pxa) as f64;
            let lo = la + (lb - la) * t;
            let hi = ha + (hb - ha) * t;
            let mut y_top = frame.py(hi);
            let mut y_bot = frame.py(lo);
            y_top = y_top.clamp(MARGIN_T as i64, (HEIGHT - MARGIN_B) as i64);
            y_bot = y_bot.clamp(MARGIN_T as i64, (HEIGHT - MARGIN_B) as i64);
            for py in y_top..=y_bot {
                blend(img, px, py, color, 0.22);
            }
        }
    }
}

fn blend(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3], alpha: f64) {
    if x < 0 || y < 0 || x >= WIDTH as i64 || y >= HEIGHT as i64 {
        return;
    }
    let p = img.get_pixel_mut(x as u32, y as u32);
    for c in 0..3 {
        p.0[c] = ((1.0 - alpha) * p.0[c] as f64 + alpha * color[c] as f64).round() as u8;
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && x < WIDTH as i64 && y < HEIGHT as i64 {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

fn fill_rect(img: &mut RgbImage, x: i64, y: i64, w: i64, h: i64, color: [u8; 3]) {
    for dy in 0..h {
        for dx in 0..w {
            put(img, x + dx, y + dy, color);
        }
    }
}

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: [u8; 3]) {
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, color);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// 5x7 column-major glyphs, bit 0 at the top row.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        '0' => [0x3E, 0x51, 0x49, 0x45, 0x3E],
        '1' => [0x00, 0x42, 0x7F, 0x40, 0x00],
        '2' => [0x42, 0x61, 0x51, 0x49, 0x46],
        '3' => [0x21, 0x41, 0x45, 0x4B, 0x31],
        '4' => [0x18, 0x14, 0x12, 0x7F, 0x10],
        '5' => [0x27, 0x45, 0x45, 0x45, 0x39],
        '6' => [0x3C, 0x4A, 0x49, 0x49, 0x30],
        '7' => [0x01, 0x71, 0x09, 0x05, 0x03],
        '8' => [0x36, 0x49, 0x49, 0x49, 0x36],
        '9' => [0x06, 0x49, 0x49, 0x29, 0x1E],
        'A' => [0x7E, 0x11, 0x11, 0x11, 0x7E],
        'B' => [0x7F, 0x49, 0x49, 0x49, 0x36],
        'C' => [0x3E, 0x41, 0x41, 0x41, 0x22],
        'D' => [0x7F, 0x41, 0x41, 0x22, 0x1C],
        'E' => [0x7F, 0x49, 0x49, 0x49, 0x41],
        'F' => [0x7F, 0x09, 0x09, 0x09, 0x01],
        'G' => [0x3E, 0x41, 0x49, 0x49, 0x7A],
        'H' => [0x7F, 0x08, 0x08, 0x08, 0x7F],
        'I' => [0x00, 0x41, 0x7F, 0x41, 0x00],
        'J' => [0x20, 0x40, 0x41, 0x3F, 0x01],
        'K' => [0x7F, 0x08, 0x14, 0x22, 0x41],
        'L' => [0x7F, 0x40, 0x40, 0x40, 0x40],
        'M' => [0x7F, 0x02, 0x0C, 0x02, 0x7F],
        'N' => [0x7F, 0x04, 0x08, 0x10, 0x7F],
        'O' => [0x3E, 0x41, 0x41, 0x41, 0x3E],
        'P' => [0x7F, 0x09, 0x09, 0x09, 0x06],
        'Q' => [0x3E, 0x41, 0x51, 0x21, 0x5E],
        'R' => [0x7F, 0x09, 0x19, 0x29, 0x46],
        'S' => [0x46, 0x49, 0x49, 0x49, 0x31],
        'T' => [0x01, 0x01, 0x7F, 0x01, 0x01],
        'U' => [0x3F, 0x40, 0x40, 0x40, 0x3F],
        'V' => [0x1F, 0x20, 0x40, 0x20, 0x1F],
        'W' => [0x3F, 0x40, 0x38, 0x40, 0x3F],
        'X' => [0x63, 0x14, 0x08, 0x14, 0x63],
        'Y' => [0x07, 0x08, 0x70, 0x08, 0x07],
        'Z' => [0x61, 0x51, 0x49, 0x45, 0x43],
        '-' => [0x08, 0x08, 0x08, 0x08, 0x08],
        '+' => [0x08, 0x08, 0x3E, 0x08, 0x08],
        '.' => [0x00, 0x60, 0x60, 0x00, 0x00],
        ':' => [0x00, 0x36, 0x36, 0x00, 0x00],
        '/' => [0x20, 0x10, 0x08, 0x04, 0x02],
        '_' => [0x40, 0x40, 0x40, 0x40, 0x40],
        '=' => [0x14, 0x14, 0x14, 0x14, 0x14],
        '[' => [0x00, 0x7F, 0x41, 0x41, 0x00],
        ']' => [0x00, 0x41, 0x41, 0x7F, 0x00],
        '*' => [0x14, 0x08, 0x3E, 0x08, 0x14],
        '%' => [0x23, 0x13, 0x08, 0x64, 0x62],
        ',' => [0x00, 0x50, 0x30, 0x00, 0x00],
        _ => [0x00, 0x00, 0x00, 0x00, 0x00],
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        let cols = glyph(ch);
        for (ci, col) in cols.iter().enumerate() {
            for row in 0..7 {
                if col >> row & 1 == 1 {
                    put(img, cx + ci as i64, y + row, color);
                }
            }
        }
        cx += 6;
    }
}

fn draw_text_vertical(img: &mut RgbImage, x: i64, y: i64, text: &str) {
    let mut cy = y;
    for ch in text.chars() {
        let cols = glyph(ch);
        for (ci, col) in cols.iter().enumerate() {
            for row in 0..7 {
                if col >> row & 1 == 1 {
                    put(img, x + row, cy + 4 - ci as i64, [0, 0, 0]);
                }
            }
        }
        cy += 6;
    }
}
