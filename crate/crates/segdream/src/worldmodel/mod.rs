//! Recurrent latent world model: a deterministic GRU path, categorical
//! stochastic latents with straight-through gradients, a convolutional
//! encoder, and decoders for masked RGB targets, binary masks, reward, and
//! continuation.

pub mod layers;
pub mod loss;

use crate::config::WorldModelConfig;
use crate::error::{Result, SdError};
use crate::math::graph::{Graph, NodeId};
use crate::math::params::{Binding, ParamSet};
use crate::math::Elem;
use layers::{Conv, ConvT, GruCell, Linear, Mlp, Norm};
use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform-mixture weight for categorical latents; avoids infinite KL.
pub const UNIMIX: f64 = 0.01;

/// How stochastic latents are realized during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    /// One-hot sample with straight-through gradients (training, exploration).
    Sample,
    /// One-hot argmax with straight-through gradients (deterministic eval).
    Mode,
    /// Mixed probabilities passed through directly; fully differentiable,
    /// used by finite-difference gradient checks.
    Soft,
}

/// Convolution stages for a square image: down to 4x4 for 64-pixel inputs,
/// 2x2 for 32-pixel inputs, at least one stage for toy sizes.
fn conv_stages(image_size: usize) -> usize {
    let log2 = image_size.trailing_zeros() as usize;
    (log2 - 1).min(4)
}

// Transposed-conv stack without normalization: channelwise layer norm at
// coarse spatial resolutions suppresses the per-position magnitude patterns
// that carry object positions, which stalls reconstruction at small scale.
struct Decoder {
    lin: Linear,
    stages: Vec<ConvT>,
    out: ConvT,
    start_hw: usize,
    start_ch: usize,
}

impl Decoder {
    fn new<E: Elem, R: Rng>(
        params: &mut ParamSet<E>,
        rng: &mut R,
        name: &str,
        state_dim: usize,
        image_size: usize,
        depth: usize,
        out_ch: usize,
    ) -> Decoder {
        let n_stages = conv_stages(image_size);
        let start_hw = image_size >> n_stages;
        let chans: Vec<usize> = (0..n_stages).map(|i| depth << i).collect();
        let start_ch = *chans.last().unwrap();
        let lin = Linear::new(
            params,
            rng,
            &format!("{name}/in"),
            state_dim,
            start_hw * start_hw * start_ch,
            false,
        );
        let mut stages = Vec::new();
        // mirror the encoder: e.g. 8d -> 4d -> 2d -> d, then output channels
        for i in (1..n_stages).rev() {
            let cin = chans[i];
            let cout = chans[i - 1];
            stages.push(ConvT::new(params, rng, &format!("{name}/t{i}"), cin, cout, false));
        }
        let out = ConvT::new(params, rng, &format!("{name}/out"), chans[0], out_ch, false);
        Decoder {
            lin,
            stages,
            out,
            start_hw,
            start_ch,
        }
    }

    fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        params: &ParamSet<E>,
        bind: &Binding,
        x: NodeId,
    ) -> NodeId {
        let n = g.shape(x)[0];
        let flat = self.lin.forward(g, params, bind, x);
        let mut y = g.reshape(flat, &[n, self.start_hw, self.start_hw, self.start_ch]);
        for conv in &self.stages {
            y = conv.forward(g, params, bind, y);
            y = g.silu(y);
        }
        self.out.forward(g, params, bind, y)
    }
}

pub struct WorldModel<E: Elem> {
    pub cfg: WorldModelConfig,
    pub image_size: usize,
    pub action_dim: usize,
    pub params: ParamSet<E>,
    encoder: Vec<(Conv, Norm)>,
    pub feat_dim: usize,
    gru: GruCell,
    posterior_head: Mlp,
    prior_head: Mlp,
    rgb_dec: Decoder,
    mask_dec: Option<Decoder>,
    reward_head: Mlp,
    cont_head: Mlp,
}

impl<E: Elem> WorldModel<E> {
    pub fn build(
        cfg: &WorldModelConfig,
        image_size: usize,
        action_dim: usize,
        seed: u64,
    ) -> Result<WorldModel<E>> {
        cfg.validate()?;
        if !image_size.is_power_of_two() || image_size < 4 {
            return Err(SdError::Config(format!(
                "world model image size must be a power of two >= 4, got {image_size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let n_stages = conv_stages(image_size);
        let depth = cfg.cnn_depth;
        let chans: Vec<usize> = (0..n_stages).map(|i| depth << i).collect();

        let mut encoder = Vec::new();
        let mut cin = 3;
        for (i, &cout) in chans.iter().enumerate() {
            let conv = Conv::new(&mut params, &mut rng, &format!("enc/c{i}"), cin, cout);
            let norm = Norm::new(&mut params, &format!("enc/n{i}"), cout);
            encoder.push((conv, norm));
            cin = cout;
        }
        let final_hw = image_size >> n_stages;
        let feat_dim = final_hw * final_hw * chans[n_stages - 1];

        let det = cfg.det_dim;
        let stoch = cfg.stoch_dim();
        let state_dim = cfg.state_dim();
        let hidden = det;

        let gru = GruCell::new(&mut params, &mut rng, "gru", stoch + action_dim, det);
        let posterior_head = Mlp::new(
            &mut params,
            &mut rng,
            "post",
            feat_dim + det,
            hidden,
            1,
            stoch,
            false,
        );
        let prior_head = Mlp::new(&mut params, &mut rng, "prior", det, hidden, 1, stoch, false);
        let rgb_dec = Decoder::new(&mut params, &mut rng, "dec_rgb", state_dim, image_size, depth, 3);
        let mask_dec = if cfg.variant.has_mask_head() {
            Some(Decoder::new(
                &mut params,
                &mut rng,
                "dec_mask",
                state_dim,
                image_size,
                depth,
                1,
            ))
        } else {
            None
        };
        let reward_head = Mlp::new(&mut params, &mut rng, "reward", state_dim, hidden, 2, 1, true);
        let cont_head = Mlp::new(&mut params, &mut rng, "cont", state_dim, hidden, 2, 1, true);

        Ok(WorldModel {
            cfg: cfg.clone(),
            image_size,
            action_dim,
            params,
            encoder,
            feat_dim,
            gru,
            posterior_head,
            prior_head,
            rgb_dec,
            mask_dec,
            reward_head,
            cont_head,
        })
    }

    pub fn has_mask_head(&self) -> bool {
        self.mask_dec.is_some()
    }

    pub fn bind(&self, g: &mut Graph<E>, trainable: bool) -> Binding {
        self.params.bind(g, trainable)
    }

    /// Convolutional features from observations `(N, H, W, 3)` in [0,1];
    /// input is centered before the first convolution.
    pub fn encode(&self, g: &mut Graph<E>, bind: &Binding, obs: NodeId) -> NodeId {
        let mut y = g.add_scalar(obs, E::from_f64(-0.5));
        for (conv, norm) in &self.encoder {
            y = conv.forward(g, &self.params, bind, y);
            y = norm.forward(g, &self.params, bind, y);
            y = g.silu(y);
        }
        let n = g.shape(y)[0];
        g.reshape(y, &[n, self.feat_dim])
    }

    /// Deterministic recurrent update `h' = f(h, z, a)`.
    pub fn sequence_step(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        h: NodeId,
        z: NodeId,
        action: NodeId,
    ) -> NodeId {
        let input = g.concat_last(&[z, action]);
        self.gru.forward(g, &self.params, bind, input, h)
    }

    /// Posterior logits `(N, C*K)` from features and the deterministic state.
    pub fn posterior_logits(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        feat: NodeId,
        h: NodeId,
    ) -> NodeId {
        let joined = g.concat_last(&[feat, h]);
        self.posterior_head.forward(g, &self.params, bind, joined)
    }

    /// Prior logits `(N, C*K)` from the deterministic state alone.
    pub fn prior_logits(&self, g: &mut Graph<E>, bind: &Binding, h: NodeId) -> NodeId {
        self.prior_head.forward(g, &self.params, bind, h)
    }

    /// Mixed categorical probabilities `(N, C*K)`: softmax per group blended
    /// with 1% uniform.
    pub fn dist_probs(&self, g: &mut Graph<E>, logits: NodeId) -> NodeId {
        let n = g.shape(logits)[0];
        let (c, k) = (self.cfg.stoch_groups, self.cfg.stoch_classes);
        let grouped = g.reshape(logits, &[n * c, k]);
        let sm = g.softmax_last(grouped);
        let scaled = g.mul_scalar(sm, E::from_f64(1.0 - UNIMIX));
        let mixed = g.add_scalar(scaled, E::from_f64(UNIMIX / k as f64));
        g.reshape(mixed, &[n, c * k])
    }

    /// Per-sample KL terms used by the dynamics and representation losses:
    /// `KL(sg(post) || prior)` and `KL(post || sg(prior))`, each `(N,)`,
    /// summed over the C categorical groups.
    pub fn kl_nodes(
        &self,
        g: &mut Graph<E>,
        post_logits: NodeId,
        prior_logits: NodeId,
    ) -> (NodeId, NodeId) {
        let post_p = self.dist_probs(g, post_logits);
        let prior_p = self.dist_probs(g, prior_logits);
        let post_lp = g.ln(post_p);
        let prior_lp = g.ln(prior_p);
        let kl_dyn = {
            let pp = g.stop_grad(post_p);
            let plp = g.stop_grad(post_lp);
            let diff = g.sub(plp, prior_lp);
            let elem = g.mul(pp, diff);
            g.sum_last(elem)
        };
        let kl_rep = {
            let qlp = g.stop_grad(prior_lp);
            let diff = g.sub(post_lp, qlp);
            let elem = g.mul(post_p, diff);
            g.sum_last(elem)
        };
        (kl_dyn, kl_rep)
    }

    /// Realize the stochastic latent from mixed probabilities according to
    /// `mode`; sampled modes produce exact one-hot rows with straight-through
    /// gradients.
    pub fn sample_latent<R: Rng>(
        &self,
        g: &mut Graph<E>,
        probs: NodeId,
        mode: LatentMode,
        rng: &mut R,
    ) -> NodeId {
        if mode == LatentMode::Soft {
            return probs;
        }
        let n = g.shape(probs)[0];
        let (c, k) = (self.cfg.stoch_groups, self.cfg.stoch_classes);
        let sample = {
            let p = g.value(probs);
            let mut out = ArrayD::<E>::zeros(IxDyn(&[n, c * k]));
            for row in 0..n {
                for grp in 0..c {
                    let base = grp * k;
                    let idx = match mode {
                        LatentMode::Mode => {
                            let mut best = 0;
                            let mut best_v = E::neg_infinity();
                            for j in 0..k {
                                let v = p[[row, base + j]];
                                if v > best_v {
                                    best_v = v;
                                    best = j;
                                }
                            }
                            best
                        }
                        LatentMode::Sample => {
                            let u: f64 = rng.random();
                            let mut acc = 0.0;
                            let mut chosen = k - 1;
                            for j in 0..k {
                                acc += p[[row, base + j]].as_f64();
                                if u < acc {
                                    chosen = j;
                                    break;
                                }
                            }
                            chosen
                        }
                        LatentMode::Soft => unreachable!(),
                    };
                    out[[row, base + idx]] = E::one();
                }
            }
            out
        };
        g.straight_through(probs, sample)
    }

    /// RGB decoder: mean of a unit-variance Gaussian over pixels `(N, H, W, 3)`.
    pub fn decode_rgb(&self, g: &mut Graph<E>, bind: &Binding, x: NodeId) -> NodeId {
        self.rgb_dec.forward(g, &self.params, bind, x)
    }

    /// Mask head logits `(N, H, W)`; `None` when the variant has no mask head.
    /// The caller chooses whether `x` is gradient-blocked.
    pub fn decode_mask_logits(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        x: NodeId,
    ) -> Option<NodeId> {
        let dec = self.mask_dec.as_ref()?;
        let y = dec.forward(g, &self.params, bind, x);
        let shape = g.shape(y).to_vec();
        Some(g.reshape(y, &[shape[0], shape[1], shape[2]]))
    }

    /// Reward prediction `(N,)`.
    pub fn reward_pred(&self, g: &mut Graph<E>, bind: &Binding, x: NodeId) -> NodeId {
        let y = self.reward_head.forward(g, &self.params, bind, x);
        let n = g.shape(y)[0];
        g.reshape(y, &[n])
    }

    /// Continuation logit `(N,)`.
    pub fn cont_logit(&self, g: &mut Graph<E>, bind: &Binding, x: NodeId) -> NodeId {
        let y = self.cont_head.forward(g, &self.params, bind, x);
        let n = g.shape(y)[0];
        g.reshape(y, &[n])
    }

    /// Copy all parameters into an f64 model with identical architecture
    /// (finite-difference harness).
    pub fn cast<F: Elem>(&self) -> WorldModel<F> {
        WorldModel {
            cfg: self.cfg.clone(),
            image_size: self.image_size,
            action_dim: self.action_dim,
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            feat_dim: self.feat_dim,
            gru: self.gru.clone(),
            posterior_head: self.posterior_head.clone(),
            prior_head: self.prior_head.clone(),
            rgb_dec: Decoder {
                lin: self.rgb_dec.lin.clone(),
                stages: self.rgb_dec.stages.clone(),
                out: self.rgb_dec.out.clone(),
                start_hw: self.rgb_dec.start_hw,
                start_ch: self.rgb_dec.start_ch,
            },
            mask_dec: self.mask_dec.as_ref().map(|d| Decoder {
                lin: d.lin.clone(),
                stages: d.stages.clone(),
                out: d.out.clone(),
                start_hw: d.start_hw,
                start_ch: d.start_ch,
            }),
            reward_head: self.reward_head.clone(),
            cont_head: self.cont_head.clone(),
        }
    }
}

/// Deterministic plus stochastic latent with zero-initialized episode starts.
#[derive(Debug, Clone)]
pub struct LatentState {
    /// `(det_dim,)`
    pub h: Array1<f32>,
    /// Flattened one-hot sample `(C*K,)`; zeros before the first observation.
    pub z: Array1<f32>,
}

impl LatentState {
    pub fn zeros(cfg: &WorldModelConfig) -> LatentState {
        LatentState {
            h: Array1::zeros(cfg.det_dim),
            z: Array1::zeros(cfg.stoch_dim()),
        }
    }

    /// Concatenated model state `x = [h; z]`.
    pub fn x(&self) -> Array1<f32> {
        let mut out = Array1::zeros(self.h.len() + self.z.len());
        out.slice_mut(ndarray::s![..self.h.len()]).assign(&self.h);
        out.slice_mut(ndarray::s![self.h.len()..]).assign(&self.z);
        out
    }
}

/// Per-step model outputs for evaluation and probing.
#[derive(Debug, Clone)]
pub struct WorldModelOutputs {
    pub rgb_mean: Array3<f32>,
    pub mask_prob: Option<Array2<f32>>,
    pub reward_pred: f32,
    pub cont_prob: f32,
    /// Posterior logits `(C, K)`.
    pub posterior: Array2<f32>,
    /// Prior logits `(C, K)`.
    pub prior: Array2<f32>,
}

impl WorldModel<f32> {
    /// Advance the latent state with one real observation. For `as_input`
    /// variants the caller pre-masks the observation. Returns the model state
    /// `x` used by the policy.
    pub fn observe<R: Rng>(
        &self,
        state: &mut LatentState,
        obs: &Array3<f32>,
        prev_action: &[f32],
        is_first: bool,
        mode: LatentMode,
        rng: &mut R,
    ) -> Result<Array1<f32>> {
        validate_obs(obs, self.image_size)?;
        if prev_action.len() != self.action_dim {
            return Err(SdError::Shape(format!(
                "prev_action has {} dims, expected {}",
                prev_action.len(),
                self.action_dim
            )));
        }
        if is_first {
            *state = LatentState::zeros(&self.cfg);
        }
        let action: Vec<f32> = if is_first {
            vec![0.0; self.action_dim]
        } else {
            prev_action.to_vec()
        };

        let mut g = Graph::<f32>::new();
        let bind = self.bind(&mut g, false);
        let h0 = g.constant(state.h.clone().insert_axis(ndarray::Axis(0)).into_dyn());
        let z0 = g.constant(state.z.clone().insert_axis(ndarray::Axis(0)).into_dyn());
        let a0 = g.constant(
            Array1::from_vec(action)
                .insert_axis(ndarray::Axis(0))
                .into_dyn(),
        );
        let h1 = self.sequence_step(&mut g, &bind, h0, z0, a0);
        let obs_node = g.constant(
            obs.clone()
                .into_shape_with_order(IxDyn(&[1, self.image_size, self.image_size, 3]))
                .unwrap(),
        );
        let feat = self.encode(&mut g, &bind, obs_node);
        let logits = self.posterior_logits(&mut g, &bind, feat, h1);
        let probs = self.dist_probs(&mut g, logits);
        let z1 = self.sample_latent(&mut g, probs, mode, rng);

        state.h = g
            .value(h1)
            .view()
            .into_shape_with_order(self.cfg.det_dim)
            .unwrap()
            .to_owned();
        state.z = g
            .value(z1)
            .view()
            .into_shape_with_order(self.cfg.stoch_dim())
            .unwrap()
            .to_owned();
        Ok(state.x())
    }

    /// Decode every head at the current latent state; the posterior is
    /// re-evaluated against `obs` for probing.
    pub fn outputs(&self, state: &LatentState, obs: &Array3<f32>) -> Result<WorldModelOutputs> {
        validate_obs(obs, self.image_size)?;
        let mut g = Graph::<f32>::new();
        let bind = self.bind(&mut g, false);
        let x = g.constant(state.x().insert_axis(ndarray::Axis(0)).into_dyn());
        let rgb = self.decode_rgb(&mut g, &bind, x);
        let mask = self.decode_mask_logits(&mut g, &bind, x);
        let reward = self.reward_pred(&mut g, &bind, x);
        let cont = self.cont_logit(&mut g, &bind, x);
        let h = g.constant(state.h.clone().insert_axis(ndarray::Axis(0)).into_dyn());
        let prior = self.prior_logits(&mut g, &bind, h);
        let obs_node = g.constant(
            obs.clone()
                .into_shape_with_order(IxDyn(&[1, self.image_size, self.image_size, 3]))
                .unwrap(),
        );
        let feat = self.encode(&mut g, &bind, obs_node);
        let post = self.posterior_logits(&mut g, &bind, feat, h);

        let n = self.image_size;
        let rgb_mean = g
            .value(rgb)
            .to_owned()
            .into_shape_with_order((n, n, 3))
            .unwrap();
        let mask_prob = mask.map(|m| {
            g.value(m)
                .mapv(sigmoid_f32)
                .into_shape_with_order((n, n))
                .unwrap()
        });
        let (c, k) = (self.cfg.stoch_groups, self.cfg.stoch_classes);
        let to_ck = |id: NodeId, g: &Graph<f32>| {
            g.value(id)
                .to_owned()
                .into_shape_with_order((c, k))
                .unwrap()
        };
        Ok(WorldModelOutputs {
            rgb_mean,
            mask_prob,
            reward_pred: g.value(reward)[[0]],
            cont_prob: sigmoid_f32(g.value(cont)[[0]]),
            posterior: to_ck(post, &g),
            prior: to_ck(prior, &g),
        })
    }

    /// Posterior logits `(C, K)` for a given deterministic state and
    /// observation; pixels must lie in [0,1].
    pub fn posterior_dist(&self, h: &Array1<f32>, obs: &Array3<f32>) -> Result<Array2<f32>> {
        validate_obs(obs, self.image_size)?;
        let mut g = Graph::<f32>::new();
        let bind = self.bind(&mut g, false);
        let hn = g.constant(h.clone().insert_axis(ndarray::Axis(0)).into_dyn());
        let obs_node = g.constant(
            obs.clone()
                .into_shape_with_order(IxDyn(&[1, self.image_size, self.image_size, 3]))
                .unwrap(),
        );
        let feat = self.encode(&mut g, &bind, obs_node);
        let logits = self.posterior_logits(&mut g, &bind, feat, hn);
        Ok(g
            .value(logits)
            .view()
            .into_shape_with_order((self.cfg.stoch_groups, self.cfg.stoch_classes))
            .unwrap()
            .to_owned())
    }
}

fn sigmoid_f32(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn validate_obs(obs: &Array3<f32>, image_size: usize) -> Result<()> {
    if obs.shape() != [image_size, image_size, 3] {
        return Err(SdError::Shape(format!(
            "observation shape {:?}, expected [{image_size}, {image_size}, 3]",
            obs.shape()
        )));
    }
    if obs.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(SdError::Input(
            "observation pixels must lie in [0,1]".into(),
        ));
    }
    Ok(())
}
