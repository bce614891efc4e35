//! Actor-critic contracts: lambda-returns against an independent recursion,
//! percentile normalization, imagination bookkeeping, and world-model
//! isolation.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segdream::agent::{lambda_returns, percentile, Agent, ImaginedRollout, RunningScale};
use segdream::config::{AgentConfig, Variant, WorldModelConfig};
use segdream::worldmodel::WorldModel;

fn tiny_wm() -> WorldModel<f32> {
    let cfg = WorldModelConfig {
        det_dim: 16,
        stoch_groups: 4,
        stoch_classes: 4,
        cnn_depth: 4,
        variant: Variant::Dreamer,
        ..WorldModelConfig::default()
    };
    WorldModel::build(&cfg, 8, 2, 0).unwrap()
}

fn tiny_agent(seed: u64) -> Agent<f32> {
    Agent::build(&AgentConfig::default(), 32, 2, 16, 1e-3, seed).unwrap()
}

#[test]
fn lambda_returns_base_cases() {
    let n = 3;
    let zeros = |_: usize| Array1::<f32>::zeros(n);
    let rewards = vec![zeros(0)];
    let continues = vec![Array1::from_elem(n, 1.0f32)];
    let values = vec![zeros(0), zeros(0)];
    let r = lambda_returns(&rewards, &continues, &values, 0.99, 0.95).unwrap();
    assert!(r[0].iter().all(|&v| v == 0.0), "zero rewards, zero values");

    // horizon 1: R_0 = r_0 + gamma * c_0 * v_1 for any lambda
    let rewards = vec![Array1::from_vec(vec![1.0f32, 2.0, 3.0])];
    let continues = vec![Array1::from_vec(vec![1.0f32, 0.5, 0.0])];
    let values = vec![zeros(0), Array1::from_vec(vec![10.0f32, 10.0, 10.0])];
    for lambda_ in [0.0, 0.5, 0.95, 1.0] {
        let r = lambda_returns(&rewards, &continues, &values, 0.9, lambda_).unwrap();
        for i in 0..n {
            let expect = rewards[0][i] as f64 + 0.9 * continues[0][i] as f64 * 10.0;
            assert!((r[0][i] - expect).abs() < 1e-9);
        }
    }
}

#[test]
fn lambda_returns_match_independent_recursion_on_random_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 5;
    let n = 4;
    let rewards: Vec<Array1<f32>> = (0..h)
        .map(|_| Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0)))
        .collect();
    let continues: Vec<Array1<f32>> = (0..h)
        .map(|_| Array1::from_shape_fn(n, |_| rng.random_range(0.0..1.0)))
        .collect();
    let values: Vec<Array1<f32>> = (0..=h)
        .map(|_| Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0)))
        .collect();
    let (gamma, lambda_) = (0.997, 0.95);
    let got = lambda_returns(&rewards, &continues, &values, gamma, lambda_).unwrap();

    // independent oracle: unroll the recursion by hand, scalar at a time
    for i in 0..n {
        let mut expected = vec![0.0f64; h + 1];
        expected[h] = values[h][i] as f64;
        for t in (0..h).rev() {
            expected[t] = rewards[t][i] as f64
                + gamma
                    * continues[t][i] as f64
                    * ((1.0 - lambda_) * values[t + 1][i] as f64 + lambda_ * expected[t + 1]);
        }
        for t in 0..h {
            assert!(
                (got[t][i] - expected[t]).abs() < 1e-9,
                "t={t} i={i}: {} vs {}",
                got[t][i],
                expected[t]
            );
        }
    }
}

#[test]
fn lambda_returns_rejects_misaligned_lengths() {
    let n = 2;
    let z = Array1::<f32>::zeros(n);
    let err = lambda_returns(
        &[z.clone(), z.clone()],
        &[z.clone()],
        &[z.clone(), z.clone(), z.clone()],
        0.99,
        0.95,
    );
    assert!(err.is_err());
}

#[test]
fn percentile_scale_matches_uniform_sampling_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let samples: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..10.0)).collect();
    let range = percentile(&samples, 0.95) - percentile(&samples, 0.05);
    assert!(
        (range - 9.0).abs() <= 0.2,
        "95th-5th percentile of U(0,10) should be about 9.0, got {range}"
    );
}

#[test]
fn running_scale_converges_and_normalizes_consistently() {
    let mut scale = RunningScale::default();
    let returns: Vec<f64> = (0..1000).map(|i| (i % 100) as f64 / 10.0).collect();
    for _ in 0..400 {
        scale.update(&returns);
    }
    let base = scale.normalizer();

    // after adaptation to k-scaled returns the normalized advantage
    // direction is unchanged
    let k = 3.0;
    let scaled: Vec<f64> = returns.iter().map(|r| r * k).collect();
    let mut scale_k = RunningScale::default();
    for _ in 0..400 {
        scale_k.update(&scaled);
    }
    let values: Vec<f64> = vec![1.0, 2.0, 5.0];
    let baseline = 2.5f64;
    let adv: Vec<f64> = values.iter().map(|v| (v - baseline) / base).collect();
    let adv_k: Vec<f64> = values
        .iter()
        .map(|v| (v * k - baseline * k) / scale_k.normalizer())
        .collect();
    for (a, b) in adv.iter().zip(adv_k.iter()) {
        assert!((a - b).abs() < 0.05, "direction changed: {a} vs {b}");
    }
}

#[test]
fn imagine_produces_aligned_sequences_and_is_deterministic() {
    let wm = tiny_wm();
    let agent = tiny_agent(1);
    let n = 4;
    let start_h = Array2::<f32>::zeros((n, 16));
    let start_z = Array2::<f32>::zeros((n, 16));

    let run = |seed: u64, horizon: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        agent
            .imagine(&wm, &start_h, &start_z, horizon, &mut rng)
            .unwrap()
    };
    let r1 = run(9, 5);
    assert_eq!(r1.states.len(), 6);
    assert_eq!(r1.actions.len(), 5);
    assert_eq!(r1.rewards.len(), 5);
    assert_eq!(r1.continues.len(), 5);
    assert_eq!(r1.values.len(), 6);
    let r2 = run(9, 5);
    for (a, b) in r1.states.iter().zip(r2.states.iter()) {
        assert_eq!(a, b, "imagination must be deterministic under a fixed rng");
    }

    // horizon 1 appends exactly one transition
    let r3 = run(1, 1);
    assert_eq!(r3.states.len(), 2);
    assert_eq!(r3.actions.len(), 1);

    // horizon 0 is a configuration error
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(agent.imagine(&wm, &start_h, &start_z, 0, &mut rng).is_err());
}

#[test]
fn continues_near_zero_truncate_discount_weights() {
    // hand-built rollout: continues drop to zero after step 1
    let n = 2;
    let h = 4;
    let mk1 = |v: f32| Array1::from_elem(n, v);
    let rollout = ImaginedRollout {
        states: (0..=h).map(|_| Array2::zeros((n, 32))).collect(),
        actions: (0..h).map(|_| Array2::zeros((n, 2))).collect(),
        eps: (0..h).map(|_| Array2::zeros((n, 2))).collect(),
        rewards: (0..h).map(|_| mk1(1.0)).collect(),
        continues: vec![mk1(1.0), mk1(0.0), mk1(0.0), mk1(0.0)],
        values: (0..=h).map(|_| mk1(0.0)).collect(),
    };
    let returns = lambda_returns(
        &rollout.rewards,
        &rollout.continues,
        &rollout.values,
        0.997,
        0.95,
    )
    .unwrap();
    // with c = 0 from step 1 on, R_1 = r_1 exactly and R_0 = r_0 + gamma * R_1-ish blend
    assert!((returns[1][0] - 1.0).abs() < 1e-9);
    assert!((returns[3][0] - 1.0).abs() < 1e-9);
    assert!(returns[0][0] > returns[1][0]);
}

#[test]
fn actor_critic_update_leaves_world_model_bit_identical() {
    let wm = tiny_wm();
    let mut agent = tiny_agent(3);
    let before: Vec<_> = wm
        .params
        .iter()
        .map(|(n, v)| (n.to_string(), v.clone()))
        .collect();
    let n = 6;
    let start_h = Array2::<f32>::zeros((n, 16));
    let start_z = Array2::<f32>::zeros((n, 16));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rollout = agent.imagine(&wm, &start_h, &start_z, 5, &mut rng).unwrap();
    agent.actor_critic_update(&rollout).unwrap();
    for ((name, old), (name2, new)) in before.iter().zip(wm.params.iter()) {
        assert_eq!(name, name2);
        assert_eq!(
            old.as_slice().unwrap(),
            new.as_slice().unwrap(),
            "world-model parameter {name} changed"
        );
    }
}

#[test]
fn critic_regresses_constant_returns() {
    let mut agent = tiny_agent(5);
    let n = 8;
    let h = 3;
    let target = 4.0f32;
    let states: Vec<Array2<f32>> = (0..=h)
        .map(|t| Array2::from_shape_fn((n, 32), |(i, j)| ((i + j + t) % 5) as f32 / 5.0))
        .collect();
    let rollout = ImaginedRollout {
        states: states.clone(),
        actions: (0..h).map(|_| Array2::zeros((n, 2))).collect(),
        eps: (0..h).map(|_| Array2::zeros((n, 2))).collect(),
        // rewards chosen so lambda-returns equal `target` everywhere:
        // r + gamma * c * target = target with c = 1 requires r = target*(1-gamma)
        rewards: (0..h)
            .map(|_| Array1::from_elem(n, target * (1.0 - 0.997f32)))
            .collect(),
        continues: (0..h).map(|_| Array1::from_elem(n, 1.0f32)).collect(),
        values: (0..=h).map(|_| Array1::from_elem(n, target)).collect(),
    };
    for _ in 0..500 {
        agent.actor_critic_update(&rollout).unwrap();
    }
    let v = agent.online_values(&states[0]);
    for &vi in v.iter() {
        assert!(
            (vi - target).abs() < 0.3,
            "critic should approach {target}, got {vi}"
        );
    }
}

#[test]
fn zero_advantage_actor_gradient_is_entropy_only() {
    // returns == values everywhere makes advantages exactly zero; with
    // entropy_scale = 0 the actor parameters must not move at all
    let cfg = AgentConfig {
        entropy_scale: 0.0,
        ..AgentConfig::default()
    };
    let mut agent = Agent::<f32>::build(&cfg, 32, 2, 16, 1e-3, 7).unwrap();
    let n = 4;
    let h = 2;
    let rollout = ImaginedRollout {
        states: (0..=h)
            .map(|_| Array2::from_shape_fn((n, 32), |(i, j)| ((i * j) % 3) as f32 / 3.0))
            .collect(),
        actions: (0..h).map(|_| Array2::from_elem((n, 2), 0.3f32)).collect(),
        eps: (0..h).map(|_| Array2::from_elem((n, 2), 0.1f32)).collect(),
        rewards: (0..h).map(|_| Array1::zeros(n)).collect(),
        continues: (0..h).map(|_| Array1::from_elem(n, 1.0f32)).collect(),
        values: (0..=h).map(|_| Array1::zeros(n)).collect(),
    };
    let before: Vec<_> = agent
        .actor_params
        .iter()
        .map(|(n, v)| (n.to_string(), v.clone()))
        .collect();
    agent.actor_critic_update(&rollout).unwrap();
    for ((name, old), (_, new)) in before.iter().zip(agent.actor_params.iter()) {
        assert_eq!(
            old.as_slice().unwrap(),
            new.as_slice().unwrap(),
            "actor parameter {name} moved despite zero advantage and zero entropy bonus"
        );
    }

    // with entropy enabled the parameters do move
    let cfg = AgentConfig {
        entropy_scale: 1e-2,
        ..AgentConfig::default()
    };
    let mut agent2 = Agent::<f32>::build(&cfg, 32, 2, 16, 1e-3, 7).unwrap();
    let before: Vec<_> = agent2
        .actor_params
        .iter()
        .map(|(n, v)| (n.to_string(), v.clone()))
        .collect();
    agent2.actor_critic_update(&rollout).unwrap();
    let moved = before
        .iter()
        .zip(agent2.actor_params.iter())
        .any(|((_, old), (_, new))| old.as_slice().unwrap() != new.as_slice().unwrap());
    assert!(moved, "entropy bonus should produce a gradient");
}

#[test]
fn entropy_scale_weights_the_entropy_term_linearly() {
    // actor loss difference between two entropy scales equals the scale
    // difference times the same entropy term
    let n = 4;
    let h = 2;
    let rollout = ImaginedRollout {
        states: (0..=h)
            .map(|_| Array2::from_shape_fn((n, 32), |(i, j)| ((i + 2 * j) % 7) as f32 / 7.0))
            .collect(),
        actions: (0..h).map(|_| Array2::from_elem((n, 2), -0.2f32)).collect(),
        eps: (0..h).map(|_| Array2::from_elem((n, 2), 0.4f32)).collect(),
        rewards: (0..h).map(|_| Array1::from_elem(n, 0.5f32)).collect(),
        continues: (0..h).map(|_| Array1::from_elem(n, 1.0f32)).collect(),
        values: (0..=h).map(|_| Array1::from_elem(n, 0.1f32)).collect(),
    };
    let loss_at = |eta: f64| {
        let cfg = AgentConfig {
            entropy_scale: eta,
            ..AgentConfig::default()
        };
        let mut agent = Agent::<f32>::build(&cfg, 32, 2, 16, 1e-9, 13).unwrap();
        agent.actor_critic_update(&rollout).unwrap().actor
    };
    let l0 = loss_at(0.0);
    let l1 = loss_at(0.1);
    let l2 = loss_at(0.2);
    let term1 = l1 - l0;
    let term2 = l2 - l1;
    assert!(term1.abs() > 1e-9, "entropy term should be nonzero");
    assert!(
        (term2 - term1).abs() < 1e-6 + term1.abs() * 1e-3,
        "entropy term must scale linearly: {term1} vs {term2}"
    );
}
