//! World-model training loss: masked-RGB reconstruction (naive or selective
//! L2), reward and continuation likelihoods, and KL terms with a free-bits
//! floor and one-sided stop-gradients.

use super::{LatentMode, WorldModel};
use crate::config::Variant;
use crate::error::{Result, SdError};
use crate::math::graph::{Graph, NodeId};
use crate::math::params::Binding;
use crate::math::Elem;
use crate::replay::SequenceBatch;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;

/// Positive-class weight for the mask head's BCE. Foreground pixels are a
/// few percent of the image; the weight keeps confident foreground
/// predictions above the 0.9 binarization threshold under moderate label
/// flicker, which the selective loss depends on.
pub const MASK_POS_WEIGHT: f64 = 5.0;

/// Masked reconstruction target: observation with the mask applied across
/// channels; masked-out pixels are exactly zero.
pub fn build_target(obs: &Array3<f32>, mask: &Array2<bool>) -> Result<Array3<f32>> {
    let (h, w, c) = obs.dim();
    if mask.dim() != (h, w) {
        return Err(SdError::Shape(format!(
            "mask shape {:?} does not match observation {:?}",
            mask.dim(),
            obs.dim()
        )));
    }
    let mut out = obs.clone();
    for ((y, x), &m) in mask.indexed_iter() {
        if !m {
            for ch in 0..c {
                out[(y, x, ch)] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Selective L2 loss for one frame: per-pixel squared error summed over
/// channels, zeroed where the model marks a pixel relevant (`mask_prob >=
/// threshold`) but the provider does not, then averaged over all H*W pixels.
pub fn selective_l2(
    pred: &Array3<f32>,
    target: &Array3<f32>,
    mask_fm: &Array2<bool>,
    mask_prob: &Array2<f32>,
    threshold: f32,
) -> Result<f64> {
    let (h, w, c) = pred.dim();
    if target.dim() != (h, w, c) || mask_fm.dim() != (h, w) || mask_prob.dim() != (h, w) {
        return Err(SdError::Shape(
            "selective_l2 arguments must share spatial shape".into(),
        ));
    }
    let mut total = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let mask_sd = mask_prob[(y, x)] >= threshold;
            let maskout = mask_sd && !mask_fm[(y, x)];
            if maskout {
                continue;
            }
            for ch in 0..c {
                let d = (pred[(y, x, ch)] - target[(y, x, ch)]) as f64;
                total += d * d;
            }
        }
    }
    Ok(total / (h * w) as f64)
}

/// Naive per-pixel L2: squared error summed over channels, averaged over
/// pixels.
pub fn naive_l2(pred: &Array3<f32>, target: &Array3<f32>) -> Result<f64> {
    let (h, w, _) = pred.dim();
    if target.dim() != pred.dim() {
        return Err(SdError::Shape("naive_l2 shape mismatch".into()));
    }
    let total: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| ((p - t) as f64).powi(2))
        .sum();
    Ok(total / (h * w) as f64)
}

/// Scalar loss values extracted from one loss graph.
#[derive(Debug, Clone)]
pub struct WmLossValues {
    pub total: f64,
    pub pred: f64,
    pub rgb: f64,
    pub reward: f64,
    pub cont: f64,
    pub dyn_: f64,
    pub rep: f64,
    pub mask_bce: f64,
    /// Mean KL before the free-bits floor (diagnostic).
    pub kl_raw: f64,
}

impl WmLossValues {
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("rgb", self.rgb),
            ("reward", self.reward),
            ("cont", self.cont),
            ("dyn", self.dyn_),
            ("rep", self.rep),
            ("mask_bce", self.mask_bce),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(SdError::Numerical(format!(
                    "world-model loss component {name} is not finite ({v})"
                )));
            }
        }
        Ok(())
    }
}

/// A built loss graph plus handles needed for optimization and probing.
pub struct WmLoss<E: Elem> {
    pub graph: Graph<E>,
    pub binding: Binding,
    pub total: NodeId,
    pub mask_bce: Option<NodeId>,
    pub values: WmLossValues,
    /// Posterior deterministic states, time-major `(B*T, det)`.
    pub start_h: ArrayD<E>,
    /// Posterior stochastic samples, time-major `(B*T, C*K)`.
    pub start_z: ArrayD<E>,
    /// Selective keep-mask `(B*T, H, W)` in {0,1}; 0 marks nullified pixels.
    /// Present only when the variant applies the selective loss.
    pub selective_keep: Option<ArrayD<E>>,
}

/// Reorder `(B, T, ...)` to time-major `(T*B, ...)` rows.
fn stack_tmajor<E: Elem>(src: &ArrayD<f32>) -> ArrayD<E> {
    let shape = src.shape();
    let (b, t) = (shape[0], shape[1]);
    let rest: usize = shape[2..].iter().product();
    let mut out_shape = vec![t * b];
    out_shape.extend_from_slice(&shape[2..]);
    let src_flat = src.as_slice().expect("contiguous batch array");
    let mut out = ArrayD::<E>::zeros(IxDyn(&out_shape));
    {
        let out_flat = out.as_slice_mut().unwrap();
        for ti in 0..t {
            for bi in 0..b {
                let dst = (ti * b + bi) * rest;
                let sof = (bi * t + ti) * rest;
                for r in 0..rest {
                    out_flat[dst + r] = E::from_f64(src_flat[sof + r] as f64);
                }
            }
        }
    }
    out
}

fn col_2d<E: Elem>(src: &Array2<f32>, col_major_t: bool) -> Vec<Vec<E>> {
    // per-time-step vectors of length B
    let (b, t) = src.dim();
    let _ = col_major_t;
    (0..t)
        .map(|ti| (0..b).map(|bi| E::from_f64(src[(bi, ti)] as f64)).collect())
        .collect()
}

/// Build the full world-model loss over a sequence batch.
///
/// The stochastic latent uses `mode` (sampled one-hot in training, soft
/// probabilities for gradient checks). Loss component values are validated
/// to be finite before returning.
pub fn world_model_loss<E: Elem, R: Rng>(
    wm: &WorldModel<E>,
    batch: &SequenceBatch,
    mode: LatentMode,
    rng: &mut R,
) -> Result<WmLoss<E>> {
    let b = batch.batch();
    let t = batch.time();
    let hw = wm.image_size;
    let n = b * t;
    let variant = wm.cfg.variant;
    if batch.observations.shape() != [b, t, hw, hw, 3] {
        return Err(SdError::Shape(format!(
            "batch observations shape {:?}, expected [{b}, {t}, {hw}, {hw}, 3]",
            batch.observations.shape()
        )));
    }
    if batch.actions.shape() != [b, t, wm.action_dim] {
        return Err(SdError::Shape(format!(
            "batch actions shape {:?}, expected [{b}, {t}, {}]",
            batch.actions.shape(),
            wm.action_dim
        )));
    }
    if batch
        .observations
        .iter()
        .any(|&v| !(0.0..=1.0).contains(&v))
    {
        return Err(SdError::Input("observation pixels must lie in [0,1]".into()));
    }

    // host-side target assembly, time-major
    let obs_tm: ArrayD<E> = stack_tmajor(&batch.observations);
    let fm_tm: ArrayD<E> = stack_tmajor(&batch.masks_fm);
    let enc_input = if variant.masks_input() {
        apply_mask_channels(&obs_tm, &fm_tm, hw)
    } else {
        obs_tm.clone()
    };
    let target = match variant {
        Variant::Dreamer => obs_tm.clone(),
        _ => apply_mask_channels(&obs_tm, &fm_tm, hw),
    };
    let actions_tm: ArrayD<E> = stack_tmajor(&batch.actions);
    let rewards_t: Vec<Vec<E>> = col_2d(&batch.rewards, true);
    let conts_t: Vec<Vec<E>> = col_2d(&batch.continues, true);
    let firsts_t: Vec<Vec<E>> = col_2d(&batch.is_first, true);

    let mut g = Graph::<E>::new();
    let binding = wm.bind(&mut g, true);

    let enc_node = g.constant(enc_input);
    let feat_all = wm.encode(&mut g, &binding, enc_node);

    let det = wm.cfg.det_dim;
    let stoch = wm.cfg.stoch_dim();
    let adim = wm.action_dim;

    let mut h = g.constant(ArrayD::zeros(IxDyn(&[b, det])));
    let mut z = g.constant(ArrayD::zeros(IxDyn(&[b, stoch])));
    let mut xs: Vec<NodeId> = Vec::with_capacity(t);
    let mut kl_dyn_steps: Vec<NodeId> = Vec::with_capacity(t);
    let mut kl_rep_steps: Vec<NodeId> = Vec::with_capacity(t);
    let mut h_values: Vec<ArrayD<E>> = Vec::with_capacity(t);
    let mut z_values: Vec<ArrayD<E>> = Vec::with_capacity(t);

    for ti in 0..t {
        // zero the carried state and action at episode starts
        let keep: Vec<E> = firsts_t[ti].iter().map(|&f| E::one() - f).collect();
        let keep_h = g.constant(expand_cols(&keep, det));
        let keep_z = g.constant(expand_cols(&keep, stoch));
        let keep_a = g.constant(expand_cols(&keep, adim));
        let h_in = g.mul(h, keep_h);
        let z_in = g.mul(z, keep_z);
        let a_t = {
            let rows = actions_tm
                .slice_axis(ndarray::Axis(0), ndarray::Slice::from(ti * b..(ti + 1) * b))
                .to_owned();
            g.constant(rows)
        };
        let a_in = g.mul(a_t, keep_a);

        let h_t = wm.sequence_step(&mut g, &binding, h_in, z_in, a_in);
        let feat_t = g.slice_rows(feat_all, ti * b, b);
        let post_logits = wm.posterior_logits(&mut g, &binding, feat_t, h_t);
        let prior_logits = wm.prior_logits(&mut g, &binding, h_t);
        let (kl_dyn, kl_rep) = wm.kl_nodes(&mut g, post_logits, prior_logits);
        kl_dyn_steps.push(kl_dyn);
        kl_rep_steps.push(kl_rep);

        let post_p = wm.dist_probs(&mut g, post_logits);
        let z_t = wm.sample_latent(&mut g, post_p, mode, rng);
        let x_t = g.concat_last(&[h_t, z_t]);
        xs.push(x_t);
        h_values.push(g.value(h_t).clone());
        z_values.push(g.value(z_t).clone());
        h = h_t;
        z = z_t;
    }

    let xs_all = g.concat_rows(&xs);

    // KL losses with the per-sample free-bits floor
    let free = E::from_f64(wm.cfg.free_bits);
    let kl_dyn_all = g.concat_rows(&kl_dyn_steps);
    let kl_rep_all = g.concat_rows(&kl_rep_steps);
    let kl_raw = g.value(kl_dyn_all).iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
    let dyn_clipped = g.max_scalar(kl_dyn_all, free);
    let rep_clipped = g.max_scalar(kl_rep_all, free);
    let loss_dyn = g.mean_all(dyn_clipped);
    let loss_rep = g.mean_all(rep_clipped);

    // mask head (before the RGB loss so selective keep-masks can read it)
    let mut mask_bce_node: Option<NodeId> = None;
    let mut keep_mask: Option<ArrayD<E>> = None;
    if wm.has_mask_head() {
        let mask_in = if variant == Variant::NoStopgrad {
            xs_all
        } else {
            g.stop_grad(xs_all)
        };
        let logits = wm
            .decode_mask_logits(&mut g, &binding, mask_in)
            .expect("mask head present");
        if variant == Variant::SdSelective || variant == Variant::NoStopgrad {
            let threshold = E::from_f64(wm.cfg.mask_threshold);
            let probs = g.value(logits).mapv(|l| sigmoid_e(l));
            let mut keep = ArrayD::<E>::zeros(probs.raw_dim());
            ndarray::Zip::from(&mut keep)
                .and(&probs)
                .and(&fm_tm)
                .for_each(|kv, &p, &fm| {
                    let mask_sd = p >= threshold;
                    let maskout = mask_sd && fm == E::zero();
                    *kv = if maskout { E::zero() } else { E::one() };
                });
            keep_mask = Some(keep);
        }
        let bce = g.bce_logits(logits, fm_tm.clone(), E::from_f64(MASK_POS_WEIGHT));
        // pixel-summed per frame, averaged over frames
        let s = g.sum_all(bce);
        let scaled = g.mul_scalar(s, E::from_f64(1.0 / n as f64));
        mask_bce_node = Some(scaled);
    }

    // RGB reconstruction: Gaussian NLL up to constants (pixel-summed per
    // frame), with selective nullification when a keep-mask exists
    let rgb_mean = wm.decode_rgb(&mut g, &binding, xs_all);
    let target_node = g.constant(target);
    let diff = g.sub(rgb_mean, target_node);
    let sq = g.mul(diff, diff);
    let sq_pix = g.sum_last(sq);
    let selective_keep = keep_mask.clone();
    let sq_kept = match keep_mask {
        Some(keep) => {
            let keep_node = g.constant(keep);
            g.mul(sq_pix, keep_node)
        }
        None => sq_pix,
    };
    let sq_sum = g.sum_all(sq_kept);
    let loss_rgb = g.mul_scalar(sq_sum, E::from_f64(0.5 / n as f64));

    // reward and continuation likelihoods
    let reward_hat = wm.reward_pred(&mut g, &binding, xs_all);
    let reward_target: Vec<E> = rewards_t.iter().flatten().copied().collect();
    let reward_const = g.constant(ArrayD::from_shape_vec(IxDyn(&[n]), reward_target).unwrap());
    let rdiff = g.sub(reward_hat, reward_const);
    let rsq = g.mul(rdiff, rdiff);
    let rmean = g.mean_all(rsq);
    let half = g.mul_scalar(rmean, E::from_f64(0.5));
    let loss_reward = g.add_scalar(half, E::from_f64(0.5 * (2.0 * std::f64::consts::PI).ln()));

    let cont_logit = wm.cont_logit(&mut g, &binding, xs_all);
    let cont_target: Vec<E> = conts_t.iter().flatten().copied().collect();
    let cont_bce = g.bce_logits(
        cont_logit,
        ArrayD::from_shape_vec(IxDyn(&[n]), cont_target).unwrap(),
        E::one(),
    );
    let loss_cont = g.mean_all(cont_bce);

    let pred_a = g.add(loss_rgb, loss_reward);
    let loss_pred = g.add(pred_a, loss_cont);

    let bp = g.mul_scalar(loss_pred, E::from_f64(wm.cfg.beta_pred));
    let bd = g.mul_scalar(loss_dyn, E::from_f64(wm.cfg.beta_dyn));
    let br = g.mul_scalar(loss_rep, E::from_f64(wm.cfg.beta_rep));
    let weighted = {
        let s = g.add(bp, bd);
        g.add(s, br)
    };
    let total = match mask_bce_node {
        Some(bce) => g.add(weighted, bce),
        None => weighted,
    };

    let values = WmLossValues {
        total: g.value(total)[[0]].as_f64(),
        pred: g.value(loss_pred)[[0]].as_f64(),
        rgb: g.value(loss_rgb)[[0]].as_f64(),
        reward: g.value(loss_reward)[[0]].as_f64(),
        cont: g.value(loss_cont)[[0]].as_f64(),
        dyn_: g.value(loss_dyn)[[0]].as_f64(),
        rep: g.value(loss_rep)[[0]].as_f64(),
        mask_bce: mask_bce_node.map(|m| g.value(m)[[0]].as_f64()).unwrap_or(0.0),
        kl_raw,
    };
    values.check_finite()?;

    let start_h = concat_rows_values(&h_values);
    let start_z = concat_rows_values(&z_values);

    Ok(WmLoss {
        graph: g,
        binding,
        total,
        mask_bce: mask_bce_node,
        values,
        start_h,
        start_z,
        selective_keep,
    })
}

fn sigmoid_e<E: Elem>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

fn expand_cols<E: Elem>(col: &[E], width: usize) -> ArrayD<E> {
    let mut out = ArrayD::<E>::zeros(IxDyn(&[col.len(), width]));
    for (i, &v) in col.iter().enumerate() {
        for j in 0..width {
            out[[i, j]] = v;
        }
    }
    out
}

/// Multiply RGB channels by a `(N, H, W)` mask.
fn apply_mask_channels<E: Elem>(obs: &ArrayD<E>, mask: &ArrayD<E>, hw: usize) -> ArrayD<E> {
    let n = obs.shape()[0];
    let mut out = obs.clone();
    for i in 0..n {
        for y in 0..hw {
            for x in 0..hw {
                let m = mask[[i, y, x]];
                if m == E::zero() {
                    for c in 0..3 {
                        out[[i, y, x, c]] = E::zero();
                    }
                }
            }
        }
    }
    out
}

fn concat_rows_values<E: Elem>(parts: &[ArrayD<E>]) -> ArrayD<E> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("stackable rows")
}
