//! Procedural moving-background distractors: bouncing colored rectangles or
//! a scrolling random texture. Temporally correlated, high-variance, and
//! independent of the task-relevant state.

use crate::config::{DistractorMode, EnvConfig};
use ndarray::Array3;
use rand::Rng;

pub const PATCH_COUNT: usize = 6;
/// Horizontal scroll speed in pixels per decision step.
pub const SCROLL_SPEED: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Center in pixel coordinates.
    pub cx: f64,
    pub cy: f64,
    /// Velocity in pixels per substep.
    pub vx: f64,
    pub vy: f64,
    /// Half extents in pixels.
    pub hw: f64,
    pub hh: f64,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub enum DistractorState {
    None,
    Patches(Vec<Patch>),
    Scroll {
        /// Fixed per-episode RGB texture.
        texture: Array3<u8>,
        /// Horizontal phase in pixels.
        phase: f64,
    },
}

impl DistractorState {
    pub fn init<R: Rng>(cfg: &EnvConfig, rng: &mut R) -> DistractorState {
        let side = cfg.image_size as f64;
        let scale = side / 32.0;
        match cfg.distractor_mode {
            DistractorMode::None => DistractorState::None,
            DistractorMode::MovingPatches => {
                let patches = (0..PATCH_COUNT)
                    .map(|_| {
                        let hw = rng.random_range(2.5..5.0) * scale;
                        let hh = rng.random_range(2.5..5.0) * scale;
                        let speed = rng.random_range(0.4..1.2) * scale;
                        let angle = rng.random_range(0.0..std::f64::consts::TAU);
                        Patch {
                            cx: rng.random_range(hw..side - hw),
                            cy: rng.random_range(hh..side - hh),
                            vx: speed * angle.cos(),
                            vy: speed * angle.sin(),
                            hw,
                            hh,
                            color: [
                                rng.random_range(80..=255),
                                rng.random_range(80..=255),
                                rng.random_range(80..=255),
                            ],
                        }
                    })
                    .collect();
                DistractorState::Patches(patches)
            }
            DistractorMode::ScrollingNoise => {
                let n = cfg.image_size;
                let mut texture = Array3::<u8>::zeros((n, n, 3));
                for v in texture.iter_mut() {
                    *v = rng.random_range(0..=255);
                }
                DistractorState::Scroll {
                    texture,
                    phase: 0.0,
                }
            }
        }
    }

    /// Advance by one decision step (`action_repeat` substeps).
    pub fn advance(&mut self, cfg: &EnvConfig) {
        let side = cfg.image_size as f64;
        for _ in 0..cfg.action_repeat {
            match self {
                DistractorState::None => {}
                DistractorState::Patches(patches) => {
                    for p in patches.iter_mut() {
                        p.cx += p.vx;
                        p.cy += p.vy;
                        if p.cx - p.hw < 0.0 {
                            p.cx = 2.0 * p.hw - p.cx;
                            p.vx = -p.vx;
                        } else if p.cx + p.hw > side {
                            p.cx = 2.0 * (side - p.hw) - p.cx;
                            p.vx = -p.vx;
                        }
                        if p.cy - p.hh < 0.0 {
                            p.cy = 2.0 * p.hh - p.cy;
                            p.vy = -p.vy;
                        } else if p.cy + p.hh > side {
                            p.cy = 2.0 * (side - p.hh) - p.cy;
                            p.vy = -p.vy;
                        }
                    }
                }
                DistractorState::Scroll { phase, .. } => {
                    *phase = (*phase + SCROLL_SPEED / cfg.action_repeat as f64) % side;
                }
            }
        }
    }

    /// Paint the distractor layer (beneath relevant sprites).
    pub fn draw(&self, img: &mut Array3<u8>) {
        match self {
            DistractorState::None => {}
            DistractorState::Patches(patches) => {
                let (h, w) = (img.shape()[0], img.shape()[1]);
                for p in patches {
                    for y in 0..h {
                        let py = y as f64 + 0.5;
                        if (py - p.cy).abs() > p.hh {
                            continue;
                        }
                        for x in 0..w {
                            let px = x as f64 + 0.5;
                            if (px - p.cx).abs() <= p.hw {
                                for c in 0..3 {
                                    img[(y, x, c)] = p.color[c];
                                }
                            }
                        }
                    }
                }
            }
            DistractorState::Scroll { texture, phase } => {
                let (h, w) = (img.shape()[0], img.shape()[1]);
                let shift = phase.floor() as usize % w;
                for y in 0..h {
                    for x in 0..w {
                        let sx = (x + shift) % w;
                        for c in 0..3 {
                            img[(y, x, c)] = texture[(y, sx, c)];
                        }
                    }
                }
            }
        }
    }
}
