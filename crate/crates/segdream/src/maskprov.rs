//! Task-relevance mask providers: ground-truth pass-through, a simulated
//! foundation-model corruptor with per-frame independent errors (flicker by
//! construction), or an external predictor registered through an adapter.
//!
//! Corruption order is component drop, then per-pixel drop, then random
//! erosion/dilation, then a spurious blob. Every stage consumes a fixed
//! number of draws from the per-frame stream, so runs with different
//! corruption strengths share the same underlying randomness.

use crate::config::{MaskKind, MaskProviderConfig};
use crate::error::{Result, SdError};
use ndarray::{Array2, Array3, ArrayD};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Where a mask came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Gt,
    Fm,
    External,
}

/// A boolean task-relevance mask with provenance.
#[derive(Debug, Clone)]
pub struct MaskFrame {
    pub mask: Array2<bool>,
    pub provenance: Provenance,
}

/// External segmenter hook: observation in, boolean mask out. The dynamic
/// return shape is validated against the observation's spatial shape.
pub type MaskAdapter = Box<dyn FnMut(&Array3<f32>) -> ArrayD<bool> + Send>;

pub struct MaskProvider {
    cfg: MaskProviderConfig,
    rng: ChaCha8Rng,
    adapter: Option<MaskAdapter>,
}

impl MaskProvider {
    pub fn new(cfg: MaskProviderConfig) -> Result<MaskProvider> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(MaskProvider {
            cfg,
            rng,
            adapter: None,
        })
    }

    pub fn config(&self) -> &MaskProviderConfig {
        &self.cfg
    }

    /// Register the predictor used by `kind = external`.
    pub fn register_adapter(&mut self, predict: MaskAdapter) {
        self.adapter = Some(predict);
    }

    /// Produce the mask for one frame.
    pub fn provide(
        &mut self,
        observation: &Array3<f32>,
        gt_mask: &Array2<bool>,
    ) -> Result<MaskFrame> {
        match self.cfg.kind {
            MaskKind::GroundTruth => Ok(MaskFrame {
                mask: gt_mask.clone(),
                provenance: Provenance::Gt,
            }),
            MaskKind::SimulatedFm => {
                let frame_seed = self.rng.next_u64();
                let mask = corrupt_mask(gt_mask, &self.cfg, frame_seed);
                Ok(MaskFrame {
                    mask,
                    provenance: Provenance::Fm,
                })
            }
            MaskKind::External => {
                let adapter = self.adapter.as_mut().ok_or_else(|| {
                    SdError::Config("mask kind is external but no adapter is registered".into())
                })?;
                let raw = adapter(observation);
                let (h, w) = (observation.shape()[0], observation.shape()[1]);
                if raw.shape() != [h, w] {
                    return Err(SdError::Shape(format!(
                        "adapter returned shape {:?}, expected [{h}, {w}]",
                        raw.shape()
                    )));
                }
                let mask = raw
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("shape checked above");
                Ok(MaskFrame {
                    mask,
                    provenance: Provenance::External,
                })
            }
        }
    }
}

/// Apply the full corruption pipeline to one ground-truth mask. Deterministic
/// in `(gt_mask, frame_seed)` and independent of any other frame.
pub fn corrupt_mask(gt: &Array2<bool>, cfg: &MaskProviderConfig, frame_seed: u64) -> Array2<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed);
    let (h, w) = gt.dim();
    let mut mask = gt.clone();

    // 1. whole-component drops (4-connectivity)
    let labels = label_components(gt);
    let n_comp = labels.count;
    let mut dropped = vec![false; n_comp];
    for d in dropped.iter_mut() {
        let u: f64 = rng.random();
        *d = u < cfg.p_fn_component;
    }
    if n_comp > 0 {
        for ((y, x), m) in mask.indexed_iter_mut() {
            if *m && dropped[labels.map[(y, x)] as usize - 1] {
                *m = false;
            }
        }
    }

    // 2. per-pixel drops; one draw per pixel position keeps streams aligned
    // across different drop probabilities
    for y in 0..h {
        for x in 0..w {
            let u: f64 = rng.random();
            if mask[(y, x)] && u < cfg.p_fn_pixel {
                mask[(y, x)] = false;
            }
        }
    }

    // 3. random morphology: radius in [0, morph_radius], erode or dilate
    let u_radius: f64 = rng.random();
    let u_kind: f64 = rng.random();
    let radius = (u_radius * (cfg.morph_radius as f64 + 1.0)).floor() as usize;
    let radius = radius.min(cfg.morph_radius);
    if radius > 0 {
        mask = if u_kind < 0.5 {
            erode(&mask, radius)
        } else {
            dilate(&mask, radius)
        };
    }

    // 4. spurious blob
    let u_blob: f64 = rng.random();
    let u_cx: f64 = rng.random();
    let u_cy: f64 = rng.random();
    if u_blob < cfg.p_fp_blob {
        let side = (cfg.blob_size as f64).sqrt().ceil() as usize;
        let cx = (u_cx * w as f64).floor() as usize;
        let cy = (u_cy * h as f64).floor() as usize;
        let mut painted = 0usize;
        'outer: for dy in 0..side {
            for dx in 0..side {
                if painted == cfg.blob_size {
                    break 'outer;
                }
                let y = cy + dy;
                let x = cx + dx;
                if y < h && x < w {
                    mask[(y, x)] = true;
                }
                painted += 1;
            }
        }
    }

    mask
}

struct Labels {
    map: Array2<u32>,
    count: usize,
}

/// 4-connected component labeling; label 0 is background, components are 1-based.
fn label_components(mask: &Array2<bool>) -> Labels {
    let (h, w) = mask.dim();
    let mut map = Array2::<u32>::zeros((h, w));
    let mut count = 0u32;
    let mut queue = std::collections::VecDeque::new();
    for sy in 0..h {
        for sx in 0..w {
            if !mask[(sy, sx)] || map[(sy, sx)] != 0 {
                continue;
            }
            count += 1;
            map[(sy, sx)] = count;
            queue.push_back((sy, sx));
            while let Some((y, x)) = queue.pop_front() {
                let mut visit = |ny: usize, nx: usize, map: &mut Array2<u32>| {
                    if mask[(ny, nx)] && map[(ny, nx)] == 0 {
                        map[(ny, nx)] = count;
                        queue.push_back((ny, nx));
                    }
                };
                if y > 0 {
                    visit(y - 1, x, &mut map);
                }
                if y + 1 < h {
                    visit(y + 1, x, &mut map);
                }
                if x > 0 {
                    visit(y, x - 1, &mut map);
                }
                if x + 1 < w {
                    visit(y, x + 1, &mut map);
                }
            }
        }
    }
    Labels {
        map,
        count: count as usize,
    }
}

/// Binary erosion with a square structuring element of Chebyshev radius `r`;
/// pixels outside the image count as false.
pub fn erode(mask: &Array2<bool>, r: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let ri = r as isize;
    Array2::from_shape_fn((h, w), |(y, x)| {
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    return false;
                }
                if !mask[(ny as usize, nx as usize)] {
                    return false;
                }
            }
        }
        true
    })
}

/// Binary dilation with a square structuring element of Chebyshev radius `r`.
pub fn dilate(mask: &Array2<bool>, r: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let ri = r as isize;
    Array2::from_shape_fn((h, w), |(y, x)| {
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize
                    && mask[(ny as usize, nx as usize)]
                {
                    return true;
                }
            }
        }
        false
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk_mask(n: usize, cx: f64, cy: f64, r: f64) -> Array2<bool> {
        Array2::from_shape_fn((n, n), |(y, x)| {
            (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2) <= r * r
        })
    }

    fn obs_like(n: usize) -> Array3<f32> {
        Array3::zeros((n, n, 3))
    }

    fn fm_cfg(p_comp: f64, p_pix: f64, morph: usize, p_blob: f64) -> MaskProviderConfig {
        MaskProviderConfig {
            kind: MaskKind::SimulatedFm,
            p_fn_component: p_comp,
            p_fn_pixel: p_pix,
            morph_radius: morph,
            p_fp_blob: p_blob,
            blob_size: 9,
            seed: 42,
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let gt = disk_mask(16, 8.0, 8.0, 3.0);
        let mut p = MaskProvider::new(fm_cfg(0.0, 0.0, 0, 0.0)).unwrap();
        let out = p.provide(&obs_like(16), &gt).unwrap();
        assert_eq!(out.mask, gt);
        assert_eq!(out.provenance, Provenance::Fm);
    }

    #[test]
    fn certain_component_drop_gives_empty_mask() {
        let gt = disk_mask(16, 8.0, 8.0, 3.0);
        let mut p = MaskProvider::new(fm_cfg(1.0, 0.0, 0, 0.0)).unwrap();
        let out = p.provide(&obs_like(16), &gt).unwrap();
        assert!(out.mask.iter().all(|&m| !m));
    }

    #[test]
    fn ground_truth_kind_is_identity_with_gt_provenance() {
        let gt = disk_mask(16, 5.0, 11.0, 2.5);
        let mut p = MaskProvider::new(MaskProviderConfig::default()).unwrap();
        let out = p.provide(&obs_like(16), &gt).unwrap();
        assert_eq!(out.mask, gt);
        assert_eq!(out.provenance, Provenance::Gt);
    }

    #[test]
    fn pixel_drop_mean_iou_matches_monte_carlo_oracle() {
        let gt = disk_mask(32, 16.0, 16.0, 6.0);
        let size = gt.iter().filter(|&&m| m).count();
        assert!(size > 50);

        let mut p = MaskProvider::new(fm_cfg(0.0, 0.3, 0, 0.0)).unwrap();
        let mut mean_iou = 0.0;
        let frames = 1000;
        for _ in 0..frames {
            let out = p.provide(&obs_like(32), &gt).unwrap();
            let kept = out.mask.iter().filter(|&&m| m).count();
            mean_iou += kept as f64 / size as f64;
        }
        mean_iou /= frames as f64;

        // independent Monte-Carlo oracle over the same corruption process
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        let mut oracle = 0.0;
        for _ in 0..frames {
            let mut kept = 0usize;
            for _ in 0..size {
                let u: f64 = rng.random();
                if u >= 0.3 {
                    kept += 1;
                }
            }
            oracle += kept as f64 / size as f64;
        }
        oracle /= frames as f64;
        assert!(
            (mean_iou - oracle).abs() <= 0.02,
            "mean IoU {mean_iou} vs oracle {oracle}"
        );
    }

    #[test]
    fn deterministic_under_seed() {
        let gt = disk_mask(16, 8.0, 8.0, 3.0);
        let run = || {
            let mut p = MaskProvider::new(fm_cfg(0.3, 0.2, 1, 0.5)).unwrap();
            (0..5)
                .map(|_| p.provide(&obs_like(16), &gt).unwrap().mask)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn raising_pixel_drop_never_adds_pixels() {
        let gt = disk_mask(16, 8.0, 8.0, 4.0);
        for seed in 0..20 {
            let lo = corrupt_mask(&gt, &MaskProviderConfig { seed: 0, ..fm_cfg(0.2, 0.1, 1, 0.0) }, seed);
            let hi = corrupt_mask(&gt, &MaskProviderConfig { seed: 0, ..fm_cfg(0.2, 0.5, 1, 0.0) }, seed);
            for (a, b) in lo.iter().zip(hi.iter()) {
                assert!(!(*b && !*a), "raising p_fn_pixel added a pixel (seed {seed})");
            }
        }
    }

    #[test]
    fn adapter_output_and_shape_contract() {
        let gt = disk_mask(8, 4.0, 4.0, 2.0);
        let cfg = MaskProviderConfig {
            kind: MaskKind::External,
            ..MaskProviderConfig::default()
        };
        let mut p = MaskProvider::new(cfg.clone()).unwrap();
        let err = p.provide(&obs_like(8), &gt).unwrap_err();
        assert!(matches!(err, SdError::Config(_)));

        p.register_adapter(Box::new(|_obs| ArrayD::from_elem(ndarray::IxDyn(&[8, 8]), true)));
        let out = p.provide(&obs_like(8), &gt).unwrap();
        assert!(out.mask.iter().all(|&m| m));
        assert_eq!(out.provenance, Provenance::External);

        let gt_clone = gt.clone();
        let mut p2 = MaskProvider::new(cfg.clone()).unwrap();
        p2.register_adapter(Box::new(move |_obs| gt_clone.clone().into_dyn()));
        let out2 = p2.provide(&obs_like(8), &gt).unwrap();
        assert_eq!(out2.mask, gt);

        let mut p3 = MaskProvider::new(cfg).unwrap();
        p3.register_adapter(Box::new(|_obs| {
            ArrayD::from_elem(ndarray::IxDyn(&[8, 8, 2]), true)
        }));
        let err = p3.provide(&obs_like(8), &gt).unwrap_err();
        assert!(matches!(err, SdError::Shape(_)));
    }

    #[test]
    fn components_are_dropped_independently() {
        // two disks; with p = 0.5 both patterns (kept/dropped) must occur
        let mut gt = disk_mask(24, 6.0, 6.0, 3.0);
        let second = disk_mask(24, 18.0, 18.0, 3.0);
        ndarray::Zip::from(&mut gt).and(&second).for_each(|a, &b| *a = *a || b);
        let mut p = MaskProvider::new(fm_cfg(0.5, 0.0, 0, 0.0)).unwrap();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..64 {
            let out = p.provide(&obs_like(24), &gt).unwrap();
            let a_kept = out.mask[(6, 6)];
            let b_kept = out.mask[(18, 18)];
            seen.insert((a_kept, b_kept));
        }
        assert_eq!(seen.len(), 4, "all four keep/drop patterns should appear");
    }
}
