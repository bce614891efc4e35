//! Episode replay storage and fixed-length sequence sampling.
//!
//! Observations are stored as lossless u8 (the renderer only emits 8-bit
//! colors), masks as booleans. Masks are produced by the provider once, when
//! frames are collected, so retraining from the same buffer is deterministic.

use crate::error::{Result, SdError};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;

/// One stored frame: observation plus the transition that produced it.
#[derive(Debug, Clone)]
pub struct Frame {
    /// Quantized RGB observation, `(H, W, 3)`.
    pub obs: Array3<u8>,
    /// Action that led to this observation (zeros on episode start).
    pub prev_action: Vec<f32>,
    /// Reward received on the transition into this frame.
    pub reward: f32,
    pub cont: bool,
    pub is_first: bool,
    /// Provider mask for this frame (already corrupted if simulated).
    pub mask_fm: Array2<bool>,
    /// Ground-truth mask (kept for evaluation metrics).
    pub mask_gt: Array2<bool>,
}

/// A completed episode: `episode_length + 1` frames including the reset frame.
#[derive(Debug, Clone, Default)]
pub struct Episode {
    pub frames: Vec<Frame>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.frames.iter().map(|f| f.reward as f64).sum()
    }
}

/// Quantize a rendered observation; exact for the 8-bit palette the
/// environments emit.
pub fn quantize_obs(obs: &Array3<f32>) -> Array3<u8> {
    obs.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
}

pub fn dequantize_obs(obs: &Array3<u8>) -> Array3<f32> {
    obs.mapv(|v| v as f32 / 255.0)
}

/// A batch of fixed-length trajectory segments, each array `batch x time x ...`.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    /// `(B, T, H, W, 3)` in [0,1].
    pub observations: ArrayD<f32>,
    /// `(B, T, A)`; the action that led into each frame.
    pub actions: ArrayD<f32>,
    /// `(B, T)`.
    pub rewards: Array2<f32>,
    /// `(B, T)` in {0,1}.
    pub continues: Array2<f32>,
    /// `(B, T)` in {0,1}; marks episode joins inside a segment.
    pub is_first: Array2<f32>,
    /// `(B, T, H, W)` provider masks in {0,1}.
    pub masks_fm: ArrayD<f32>,
    /// `(B, T, H, W)` ground-truth masks in {0,1}.
    pub masks_gt: ArrayD<f32>,
}

impl SequenceBatch {
    pub fn batch(&self) -> usize {
        self.observations.shape()[0]
    }

    pub fn time(&self) -> usize {
        self.observations.shape()[1]
    }
}

/// FIFO episode buffer with uniform segment sampling.
pub struct ReplayBuffer {
    episodes: std::collections::VecDeque<Episode>,
    capacity_frames: usize,
    stored_frames: usize,
    seq_len: usize,
}

impl ReplayBuffer {
    pub fn new(capacity_frames: usize, seq_len: usize) -> ReplayBuffer {
        ReplayBuffer {
            episodes: std::collections::VecDeque::new(),
            capacity_frames,
            stored_frames: 0,
            seq_len,
        }
    }

    pub fn stored_frames(&self) -> usize {
        self.stored_frames
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    /// Number of distinct segment start positions across the buffer.
    pub fn segment_count(&self) -> usize {
        self.episodes
            .iter()
            .map(|e| e.len().saturating_sub(self.seq_len - 1))
            .sum()
    }

    /// Add a completed episode; evicts oldest episodes when over capacity.
    pub fn add(&mut self, episode: Episode) {
        assert!(!episode.is_empty(), "cannot add an empty episode");
        self.stored_frames += episode.len();
        self.episodes.push_back(episode);
        while self.stored_frames > self.capacity_frames && self.episodes.len() > 1 {
            if let Some(old) = self.episodes.pop_front() {
                self.stored_frames -= old.len();
            }
        }
    }

    /// Sample `batch_size` segments of `seq_len` frames uniformly over all
    /// valid (episode, start) positions.
    pub fn sample<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Result<SequenceBatch> {
        let total = self.segment_count();
        if total == 0 {
            return Err(SdError::Usage(
                "replay buffer has no segment of the requested length".into(),
            ));
        }
        let first = &self.episodes[0].frames[0];
        let (h, w) = first.mask_fm.dim();
        let adim = first.prev_action.len();
        let t = self.seq_len;

        let mut obs = ArrayD::<f32>::zeros(IxDyn(&[batch_size, t, h, w, 3]));
        let mut actions = ArrayD::<f32>::zeros(IxDyn(&[batch_size, t, adim]));
        let mut rewards = Array2::<f32>::zeros((batch_size, t));
        let mut continues = Array2::<f32>::zeros((batch_size, t));
        let mut is_first = Array2::<f32>::zeros((batch_size, t));
        let mut masks_fm = ArrayD::<f32>::zeros(IxDyn(&[batch_size, t, h, w]));
        let mut masks_gt = ArrayD::<f32>::zeros(IxDyn(&[batch_size, t, h, w]));

        for b in 0..batch_size {
            let pick = rng.random_range(0..total);
            let (ep, start) = self.locate(pick);
            for (ti, frame) in self.episodes[ep].frames[start..start + t].iter().enumerate() {
                for y in 0..h {
                    for x in 0..w {
                        for c in 0..3 {
                            obs[[b, ti, y, x, c]] = frame.obs[(y, x, c)] as f32 / 255.0;
                        }
                        masks_fm[[b, ti, y, x]] = if frame.mask_fm[(y, x)] { 1.0 } else { 0.0 };
                        masks_gt[[b, ti, y, x]] = if frame.mask_gt[(y, x)] { 1.0 } else { 0.0 };
                    }
                }
                for a in 0..adim {
                    actions[[b, ti, a]] = frame.prev_action[a];
                }
                rewards[(b, ti)] = frame.reward;
                continues[(b, ti)] = if frame.cont { 1.0 } else { 0.0 };
                is_first[(b, ti)] = if frame.is_first { 1.0 } else { 0.0 };
            }
        }
        Ok(SequenceBatch {
            observations: obs,
            actions,
            rewards,
            continues,
            is_first,
            masks_fm,
            masks_gt,
        })
    }

    /// Map a flat segment index to (episode index, start offset).
    fn locate(&self, mut pick: usize) -> (usize, usize) {
        for (i, e) in self.episodes.iter().enumerate() {
            let starts = e.len().saturating_sub(self.seq_len - 1);
            if pick < starts {
                return (i, pick);
            }
            pick -= starts;
        }
        unreachable!("segment index out of range")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frame(v: u8, reward: f32, is_first: bool) -> Frame {
        Frame {
            obs: Array3::from_elem((4, 4, 3), v),
            prev_action: vec![0.0, 0.0],
            reward,
            cont: true,
            is_first,
            mask_fm: Array2::from_elem((4, 4), false),
            mask_gt: Array2::from_elem((4, 4), false),
        }
    }

    fn episode(len: usize, tag: u8) -> Episode {
        Episode {
            frames: (0..len).map(|i| frame(tag, i as f32, i == 0)).collect(),
        }
    }

    #[test]
    fn exact_episode_returned_when_lengths_match() {
        let mut buf = ReplayBuffer::new(1000, 10);
        buf.add(episode(10, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = buf.sample(2, &mut rng).unwrap();
        assert_eq!(batch.batch(), 2);
        assert_eq!(batch.time(), 10);
        for b in 0..2 {
            assert_eq!(batch.is_first[(b, 0)], 1.0);
            for t in 0..10 {
                assert_eq!(batch.rewards[(b, t)], t as f32);
                assert_eq!(batch.observations[[b, t, 0, 0, 0]], 3.0 / 255.0);
            }
        }
    }

    #[test]
    fn fifo_eviction_drops_oldest() {
        let mut buf = ReplayBuffer::new(25, 5);
        buf.add(episode(10, 1));
        buf.add(episode(10, 2));
        buf.add(episode(10, 3)); // 30 frames > 25: first episode evicted
        assert_eq!(buf.episode_count(), 2);
        assert_eq!(buf.stored_frames(), 20);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let batch = buf.sample(1, &mut rng).unwrap();
            let v = batch.observations[[0, 0, 0, 0, 0]];
            assert!(v > 1.5 / 255.0, "evicted episode was sampled");
        }
    }

    #[test]
    fn empty_buffer_sampling_is_usage_error() {
        let buf = ReplayBuffer::new(100, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            buf.sample(1, &mut rng),
            Err(SdError::Usage(_))
        ));
    }

    #[test]
    fn segment_sampling_is_uniform_chi_squared() {
        // Two episodes of different lengths: 8 and 5 frames with seq_len 4
        // give 5 + 2 = 7 distinct segments.
        let mut buf = ReplayBuffer::new(1000, 4);
        buf.add(episode(8, 1));
        buf.add(episode(5, 2));
        assert_eq!(buf.segment_count(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = 10_000;
        let mut counts = vec![0usize; 7];
        for _ in 0..draws {
            let batch = buf.sample(1, &mut rng).unwrap();
            let tag = batch.observations[[0, 0, 0, 0, 0]] * 255.0;
            let start = batch.rewards[(0, 0)] as usize;
            let idx = if (tag - 1.0).abs() < 0.5 { start } else { 5 + start };
            counts[idx] += 1;
        }
        let expected = draws as f64 / 7.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 6 dof, p > 0.01 requires chi2 < 16.81
        assert!(chi2 < 16.81, "chi-squared {chi2} with counts {counts:?}");
    }

    #[test]
    fn quantize_round_trips_palette_colors() {
        let obs = Array3::from_shape_fn((2, 2, 3), |(y, x, c)| {
            ((y * 31 + x * 97 + c * 11) % 256) as f32 / 255.0
        });
        let q = quantize_obs(&obs);
        let back = dequantize_obs(&q);
        assert_eq!(obs, back);
    }
}
