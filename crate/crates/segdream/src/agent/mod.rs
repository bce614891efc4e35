//! Actor-critic trained on imagined latent rollouts. The actor is a
//! tanh-squashed Gaussian updated with score-function gradients on
//! percentile-normalized lambda-returns plus an entropy bonus; the critic
//! regresses lambda-returns bootstrapped with a slow EMA critic.

use crate::config::AgentConfig;
use crate::error::{Result, SdError};
use crate::math::adam::Adam;
use crate::math::graph::{Graph, NodeId};
use crate::math::params::{Binding, ParamSet};
use crate::math::Elem;
use crate::worldmodel::layers::Mlp;
use crate::worldmodel::{LatentMode, WorldModel};
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const STD_FLOOR: f64 = 0.1;
/// Shift on the raw std head so a fresh policy explores broadly.
const STD_INIT_SHIFT: f64 = 1.0;
const MEAN_SCALE: f64 = 5.0;
const TANH_EPS: f64 = 1e-6;
/// Exponential decay of the running return-percentile statistic.
const SCALE_DECAY: f64 = 0.99;

/// Running 5th-95th percentile range of lambda-returns.
#[derive(Debug, Clone)]
pub struct RunningScale {
    value: f64,
    initialized: bool,
}

impl Default for RunningScale {
    fn default() -> Self {
        RunningScale {
            value: 0.0,
            initialized: false,
        }
    }
}

impl RunningScale {
    /// Fold one batch of returns into the statistic; returns the divisor
    /// `max(1, scale)` to apply to advantages.
    pub fn update(&mut self, returns: &[f64]) -> f64 {
        if !returns.is_empty() {
            let range = percentile(returns, 0.95) - percentile(returns, 0.05);
            if self.initialized {
                self.value = SCALE_DECAY * self.value + (1.0 - SCALE_DECAY) * range;
            } else {
                self.value = range;
                self.initialized = true;
            }
        }
        self.normalizer()
    }

    pub fn normalizer(&self) -> f64 {
        self.value.max(1.0)
    }

    pub fn raw(&self) -> f64 {
        self.value
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn load(value: f64, initialized: bool) -> RunningScale {
        RunningScale { value, initialized }
    }
}

/// Linear-interpolation percentile of an unsorted slice, `q` in [0,1].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let f = pos - lo as f64;
        sorted[lo] * (1.0 - f) + sorted[hi] * f
    }
}

/// Imagined latent trajectories; rewards and continues come from world-model
/// heads, never from the real environment.
#[derive(Debug, Clone)]
pub struct ImaginedRollout {
    /// Model states `x_i`, length `horizon + 1`, each `(N, X)`.
    pub states: Vec<Array2<f32>>,
    /// Actions taken at `x_i`, length `horizon`.
    pub actions: Vec<Array2<f32>>,
    /// Reparameterization noise used for each action, length `horizon`.
    pub eps: Vec<Array2<f32>>,
    /// Predicted rewards for each transition, length `horizon`.
    pub rewards: Vec<Array1<f32>>,
    /// Predicted continuation probabilities, length `horizon`.
    pub continues: Vec<Array1<f32>>,
    /// EMA-critic values at every state, length `horizon + 1`.
    pub values: Vec<Array1<f32>>,
}

/// Lambda-returns: `R_t = r_t + gamma * c_t * ((1 - lambda) * v_{t+1} +
/// lambda * R_{t+1})`, bootstrapped with `R_H = v_H`. Returns `horizon`
/// sequences aligned with `rewards`.
pub fn lambda_returns(
    rewards: &[Array1<f32>],
    continues: &[Array1<f32>],
    values: &[Array1<f32>],
    gamma: f64,
    lambda_: f64,
) -> Result<Vec<Array1<f64>>> {
    let h = rewards.len();
    if continues.len() != h || values.len() != h + 1 {
        return Err(SdError::Shape(format!(
            "lambda_returns lengths: rewards {h}, continues {}, values {} (need horizon+1)",
            continues.len(),
            values.len()
        )));
    }
    let n = values[h].len();
    let mut next: Array1<f64> = values[h].mapv(|v| v as f64);
    let mut out: Vec<Array1<f64>> = Vec::with_capacity(h);
    for t in (0..h).rev() {
        if rewards[t].len() != n || continues[t].len() != n || values[t].len() != n {
            return Err(SdError::Shape("lambda_returns batch size mismatch".into()));
        }
        let mut r = Array1::<f64>::zeros(n);
        for i in 0..n {
            let blend = (1.0 - lambda_) * values[t + 1][i] as f64 + lambda_ * next[i];
            r[i] = rewards[t][i] as f64 + gamma * continues[t][i] as f64 * blend;
        }
        next = r.clone();
        out.push(r);
    }
    out.reverse();
    Ok(out)
}

/// Loss scalars from one actor-critic update.
#[derive(Debug, Clone)]
pub struct AcLosses {
    pub actor: f64,
    pub critic: f64,
    /// Sample estimate of policy entropy (nats per action vector).
    pub entropy: f64,
    /// Current return normalizer `max(1, scale)`.
    pub scale: f64,
}

pub struct Agent<E: Elem> {
    pub cfg: AgentConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    pub actor_params: ParamSet<E>,
    pub critic_params: ParamSet<E>,
    pub critic_ema: ParamSet<E>,
    actor_net: Mlp,
    critic_net: Mlp,
    actor_opt: Adam<E>,
    critic_opt: Adam<E>,
    pub scale: RunningScale,
}

impl<E: Elem> Agent<E> {
    pub fn build(
        cfg: &AgentConfig,
        state_dim: usize,
        action_dim: usize,
        hidden: usize,
        learn_rate: f64,
        seed: u64,
    ) -> Result<Agent<E>> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut actor_params = ParamSet::new();
        let actor_net = Mlp::new(
            &mut actor_params,
            &mut rng,
            "actor",
            state_dim,
            hidden,
            2,
            2 * action_dim,
            true,
        );
        let mut critic_params = ParamSet::new();
        let critic_net = Mlp::new(
            &mut critic_params,
            &mut rng,
            "critic",
            state_dim,
            hidden,
            2,
            1,
            true,
        );
        let critic_ema = critic_params.clone();
        let actor_opt = Adam::new(&actor_params, learn_rate);
        let critic_opt = Adam::new(&critic_params, learn_rate);
        Ok(Agent {
            cfg: cfg.clone(),
            state_dim,
            action_dim,
            actor_params,
            critic_params,
            critic_ema,
            actor_net,
            critic_net,
            actor_opt,
            critic_opt,
            scale: RunningScale::default(),
        })
    }

    /// Policy heads: squashed mean and positive std, each `(N, A)`.
    fn policy_heads(
        &self,
        g: &mut Graph<E>,
        params: &ParamSet<E>,
        bind: &Binding,
        states: NodeId,
    ) -> (NodeId, NodeId) {
        let raw = self.actor_net.forward(g, params, bind, states);
        let mean_raw = g.slice_last(raw, 0, self.action_dim);
        let std_raw = g.slice_last(raw, self.action_dim, self.action_dim);
        let scaled = g.mul_scalar(mean_raw, E::from_f64(1.0 / MEAN_SCALE));
        let squashed = g.tanh(scaled);
        let mean = g.mul_scalar(squashed, E::from_f64(MEAN_SCALE));
        let shifted = g.add_scalar(std_raw, E::from_f64(STD_INIT_SHIFT));
        let sp = g.softplus(shifted);
        let std = g.add_scalar(sp, E::from_f64(STD_FLOOR));
        (mean, std)
    }

    fn critic_value(
        &self,
        g: &mut Graph<E>,
        params: &ParamSet<E>,
        bind: &Binding,
        states: NodeId,
    ) -> NodeId {
        let v = self.critic_net.forward(g, params, bind, states);
        let n = g.shape(v)[0];
        g.reshape(v, &[n])
    }
}

impl Agent<f32> {
    /// Sample (or take the mean of) the policy at one state.
    pub fn act<R: Rng>(&self, x: &Array1<f32>, explore: bool, rng: &mut R) -> Vec<f32> {
        let (action, _eps) = self.act_with_noise(x, explore, rng);
        action
    }

    fn act_with_noise<R: Rng>(
        &self,
        x: &Array1<f32>,
        explore: bool,
        rng: &mut R,
    ) -> (Vec<f32>, Vec<f32>) {
        let mut g = Graph::<f32>::new();
        let bind = self.actor_params.bind(&mut g, false);
        let states = g.constant(x.clone().insert_axis(Axis(0)).into_dyn());
        let (mean, std) = self.policy_heads(&mut g, &self.actor_params, &bind, states);
        let mv = g.value(mean);
        let sv = g.value(std);
        let mut action = Vec::with_capacity(self.action_dim);
        let mut eps = Vec::with_capacity(self.action_dim);
        for a in 0..self.action_dim {
            let e: f64 = if explore {
                StandardNormal.sample(rng)
            } else {
                0.0
            };
            eps.push(e as f32);
            let pre = mv[[0, a]] + sv[[0, a]] * e as f32;
            action.push(pre.tanh());
        }
        (action, eps)
    }

    /// EMA-critic values for a batch of states (used for bootstrapping).
    pub fn ema_values(&self, states: &Array2<f32>) -> Array1<f32> {
        let mut g = Graph::<f32>::new();
        let bind = self.critic_ema.bind(&mut g, false);
        let s = g.constant(states.clone().into_dyn());
        let v = self.critic_value(&mut g, &self.critic_ema, &bind, s);
        g.value(v)
            .to_owned()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
    }

    /// Online-critic values (evaluation/diagnostics).
    pub fn online_values(&self, states: &Array2<f32>) -> Array1<f32> {
        let mut g = Graph::<f32>::new();
        let bind = self.critic_params.bind(&mut g, false);
        let s = g.constant(states.clone().into_dyn());
        let v = self.critic_value(&mut g, &self.critic_params, &bind, s);
        g.value(v)
            .to_owned()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
    }

    /// Roll out the actor inside the world model from posterior start states.
    /// No environment interaction happens here.
    pub fn imagine<R: Rng>(
        &self,
        wm: &WorldModel<f32>,
        start_h: &Array2<f32>,
        start_z: &Array2<f32>,
        horizon: usize,
        rng: &mut R,
    ) -> Result<ImaginedRollout> {
        if horizon < 1 {
            return Err(SdError::Config(format!(
                "imagination horizon must be >= 1, got {horizon}"
            )));
        }
        let n = start_h.nrows();
        let mut states = Vec::with_capacity(horizon + 1);
        let mut actions = Vec::with_capacity(horizon);
        let mut eps_all = Vec::with_capacity(horizon);
        let mut rewards = Vec::with_capacity(horizon);
        let mut continues = Vec::with_capacity(horizon);

        let mut h = start_h.clone();
        let mut z = start_z.clone();
        let x0 = concat_cols(&h, &z);
        states.push(x0);

        for _ in 0..horizon {
            let x = states.last().unwrap().clone();

            // sample actions from the policy (reparameterized)
            let (action, eps) = {
                let mut g = Graph::<f32>::new();
                let bind = self.actor_params.bind(&mut g, false);
                let s = g.constant(x.clone().into_dyn());
                let (mean, std) = self.policy_heads(&mut g, &self.actor_params, &bind, s);
                let mv = g.value(mean);
                let sv = g.value(std);
                let mut a = Array2::<f32>::zeros((n, self.action_dim));
                let mut e = Array2::<f32>::zeros((n, self.action_dim));
                for i in 0..n {
                    for j in 0..self.action_dim {
                        let noise: f64 = StandardNormal.sample(rng);
                        e[(i, j)] = noise as f32;
                        a[(i, j)] = (mv[[i, j]] + sv[[i, j]] * noise as f32).tanh();
                    }
                }
                (a, e)
            };

            // latent dynamics under the prior
            let mut g = Graph::<f32>::new();
            let bind = wm.bind(&mut g, false);
            let hn = g.constant(h.clone().into_dyn());
            let zn = g.constant(z.clone().into_dyn());
            let an = g.constant(action.clone().into_dyn());
            let h1 = wm.sequence_step(&mut g, &bind, hn, zn, an);
            let prior_logits = wm.prior_logits(&mut g, &bind, h1);
            let probs = wm.dist_probs(&mut g, prior_logits);
            let z1 = wm.sample_latent(&mut g, probs, LatentMode::Sample, rng);
            let x1 = g.concat_last(&[h1, z1]);
            let reward = wm.reward_pred(&mut g, &bind, x1);
            let cont_logit = wm.cont_logit(&mut g, &bind, x1);

            h = to2(g.value(h1));
            z = to2(g.value(z1));
            let x1v = to2(g.value(x1));
            rewards.push(to1(g.value(reward)));
            continues.push(g.value(cont_logit).mapv(|l| 1.0 / (1.0 + (-l).exp())).into_dimensionality::<ndarray::Ix1>().unwrap());
            states.push(x1v);
            actions.push(action);
            eps_all.push(eps);
        }

        let values = states.iter().map(|x| self.ema_values(x)).collect();
        Ok(ImaginedRollout {
            states,
            actions,
            eps: eps_all,
            rewards,
            continues,
            values,
        })
    }

    /// One actor and critic update from an imagined rollout. World-model
    /// parameters are untouched: rollout states enter as constants.
    pub fn actor_critic_update(&mut self, rollout: &ImaginedRollout) -> Result<AcLosses> {
        let horizon = rollout.actions.len();
        let n = rollout.states[0].nrows();
        let returns = lambda_returns(
            &rollout.rewards,
            &rollout.continues,
            &rollout.values,
            self.cfg.gamma,
            self.cfg.lambda_,
        )?;

        // discount weights: w_0 = 1, w_{t+1} = w_t * gamma * c_t
        let mut weights: Vec<Array1<f64>> = Vec::with_capacity(horizon);
        let mut w = Array1::<f64>::ones(n);
        for t in 0..horizon {
            weights.push(w.clone());
            if t + 1 < horizon {
                for i in 0..n {
                    w[i] *= self.cfg.gamma * rollout.continues[t][i] as f64;
                }
            }
        }

        // running percentile scale over all lambda-returns in this batch
        let pool: Vec<f64> = returns.iter().flat_map(|r| r.iter().copied()).collect();
        let norm = self.scale.update(&pool);

        // flatten time-major
        let m = horizon * n;
        let mut states_flat = Array2::<f32>::zeros((m, self.state_dim));
        let mut actions_flat = Array2::<f32>::zeros((m, self.action_dim));
        let mut eps_flat = Array2::<f32>::zeros((m, self.action_dim));
        let mut adv_flat = Array1::<f64>::zeros(m);
        let mut ret_flat = Array1::<f64>::zeros(m);
        let mut w_flat = Array1::<f64>::zeros(m);
        for t in 0..horizon {
            for i in 0..n {
                let row = t * n + i;
                states_flat
                    .row_mut(row)
                    .assign(&rollout.states[t].row(i));
                actions_flat
                    .row_mut(row)
                    .assign(&rollout.actions[t].row(i));
                eps_flat.row_mut(row).assign(&rollout.eps[t].row(i));
                let value = rollout.values[t][i] as f64;
                adv_flat[row] = (returns[t][i] - value) / norm;
                ret_flat[row] = returns[t][i];
                w_flat[row] = weights[t][i];
            }
        }

        let critic_loss = self.critic_step(&states_flat, &ret_flat, &w_flat)?;
        let (actor_loss, entropy) =
            self.actor_step(&states_flat, &eps_flat, &adv_flat, &w_flat)?;

        // slow critic tracks the online critic
        self.critic_ema
            .ema_from(&self.critic_params, self.cfg.critic_ema_decay);

        Ok(AcLosses {
            actor: actor_loss,
            critic: critic_loss,
            entropy,
            scale: norm,
        })
    }

    fn critic_step(
        &mut self,
        states: &Array2<f32>,
        targets: &Array1<f64>,
        weights: &Array1<f64>,
    ) -> Result<f64> {
        let m = states.nrows();
        let mut g = Graph::<f32>::new();
        let bind = self.critic_params.bind(&mut g, true);
        let s = g.constant(states.clone().into_dyn());
        let v = self.critic_value(&mut g, &self.critic_params, &bind, s);
        let t = g.constant(ArrayD::from_shape_vec(IxDyn(&[m]), targets.iter().map(|&x| x as f32).collect()).unwrap());
        let wn = g.constant(ArrayD::from_shape_vec(IxDyn(&[m]), weights.iter().map(|&x| x as f32).collect()).unwrap());
        let d = g.sub(v, t);
        let sq = g.mul(d, d);
        let wsq = g.mul(sq, wn);
        let mean = g.mean_all(wsq);
        let loss = g.mul_scalar(mean, 0.5);
        let value = g.value(loss)[[0]] as f64;
        if !value.is_finite() {
            return Err(SdError::Numerical("critic loss is not finite".into()));
        }
        let mut grads = g.backward(loss);
        let collected = self.critic_params.collect_grads(&bind, &mut grads);
        self.critic_opt.step(&mut self.critic_params, &collected);
        Ok(value)
    }

    fn actor_step(
        &mut self,
        states: &Array2<f32>,
        eps: &Array2<f32>,
        advantages: &Array1<f64>,
        weights: &Array1<f64>,
    ) -> Result<(f64, f64)> {
        let m = states.nrows();
        let a_dim = self.action_dim;
        let mut g = Graph::<f32>::new();
        let bind = self.actor_params.bind(&mut g, true);
        let s = g.constant(states.clone().into_dyn());
        let (mean, std) = self.policy_heads(&mut g, &self.actor_params, &bind, s);
        let eps_node = g.constant(eps.clone().into_dyn());

        // pre-squash sample, reparameterized: pre = mean + std * eps
        let noise = g.mul(std, eps_node);
        let pre = g.add(mean, noise);
        let pre_const = g.stop_grad(pre);

        // score-function log-density of the taken action:
        //   sum_a [ -0.5 ((pre_c - mean)/std)^2 - ln std ]  (+ constants)
        let diff = g.sub(pre_const, mean);
        let ln_std = g.ln(std);
        let z2 = {
            let frac = {
                let inv = reciprocal(&mut g, std);
                g.mul(diff, inv)
            };
            g.mul(frac, frac)
        };
        let half_z2 = g.mul_scalar(z2, -0.5);
        let per_a = g.sub(half_z2, ln_std);
        let logp_score = g.sum_last(per_a);

        // pathwise log-density (entropy estimate): tanh correction included,
        // gradient flows through pre
        let tanh_pre = g.tanh(pre);
        let tanh_sq = g.mul(tanh_pre, tanh_pre);
        let neg = g.mul_scalar(tanh_sq, -1.0);
        let one_minus = g.add_scalar(neg, 1.0 + TANH_EPS as f32);
        let ln_corr = g.ln(one_minus);
        let corr_sum = g.sum_last(ln_corr);
        let eps_sq_const: f32 = eps
            .iter()
            .map(|&e| -0.5 * e * e)
            .sum::<f32>()
            / m as f32;
        let gauss_const = -0.5 * (2.0 * std::f64::consts::PI).ln() as f32 * a_dim as f32;
        let ln_std_sum = g.sum_last(ln_std);
        // logp_rep per sample (without the eps^2 and 2pi constants, added to
        // the reported value afterwards)
        let neg_ln_std = g.mul_scalar(ln_std_sum, -1.0);
        let logp_rep = g.sub(neg_ln_std, corr_sum);

        let adv = g.constant(ArrayD::from_shape_vec(IxDyn(&[m]), advantages.iter().map(|&x| x as f32).collect()).unwrap());
        let wn = g.constant(ArrayD::from_shape_vec(IxDyn(&[m]), weights.iter().map(|&x| x as f32).collect()).unwrap());

        // loss = -mean(w * adv * logp_score) - eta * mean(w * (-logp_rep))
        let pg = {
            let x = g.mul(adv, logp_score);
            g.mul(x, wn)
        };
        let pg_mean = g.mean_all(pg);
        let pg_loss = g.mul_scalar(pg_mean, -1.0);
        let ent = {
            let x = g.mul(logp_rep, wn);
            g.mean_all(x)
        };
        let ent_loss = g.mul_scalar(ent, self.cfg.entropy_scale as f32);
        let loss = g.add(pg_loss, ent_loss);

        let loss_value = g.value(loss)[[0]] as f64;
        if !loss_value.is_finite() {
            return Err(SdError::Numerical("actor loss is not finite".into()));
        }
        // entropy estimate = -E[logp_rep] plus the constants dropped above
        let entropy = -(g.value(ent)[[0]] as f64) + eps_sq_const as f64 + gauss_const as f64;

        let mut grads = g.backward(loss);
        let collected = self.actor_params.collect_grads(&bind, &mut grads);
        self.actor_opt.step(&mut self.actor_params, &collected);
        Ok((loss_value, entropy))
    }
}

fn reciprocal(g: &mut Graph<f32>, x: NodeId) -> NodeId {
    let ln = g.ln(x);
    let neg = g.mul_scalar(ln, -1.0);
    g.exp(neg)
}

fn concat_cols(a: &Array2<f32>, b: &Array2<f32>) -> Array2<f32> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).unwrap()
}

fn to2(a: &ArrayD<f32>) -> Array2<f32> {
    a.to_owned().into_dimensionality::<ndarray::Ix2>().unwrap()
}

fn to1(a: &ArrayD<f32>) -> Array1<f32> {
    a.to_owned().into_dimensionality::<ndarray::Ix1>().unwrap()
}
