// scratch diagnostic: full world-model overfit after decoder-norm removal
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segdream::config::{Variant, WorldModelConfig};
use segdream::math::adam::Adam;
use segdream::replay::SequenceBatch;
use segdream::worldmodel::loss::world_model_loss;
use segdream::worldmodel::{LatentMode, WorldModel};

fn main() {
    let lr: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let cfg = WorldModelConfig {
        det_dim: 96,
        stoch_groups: 12,
        stoch_classes: 12,
        cnn_depth: 12,
        variant: Variant::Dreamer,
        learn_rate: lr,
        ..Default::default()
    };
    let hw = 32;
    let (b, t) = (6, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut obs = ArrayD::<f32>::zeros(IxDyn(&[b, t, hw, hw, 3]));
    let mut actions = ArrayD::<f32>::zeros(IxDyn(&[b, t, 2]));
    let mut rewards = Array2::<f32>::zeros((b, t));
    let continues = Array2::<f32>::ones((b, t));
    let mut is_first = Array2::<f32>::zeros((b, t));
    for bi in 0..b {
        is_first[(bi, 0)] = 1.0;
        let mut cx = rng.random_range(4.0..28.0f64);
        let mut cy = rng.random_range(4.0..28.0f64);
        for ti in 0..t {
            let ax: f32 = rng.random_range(-1.0..1.0);
            let ay: f32 = rng.random_range(-1.0..1.0);
            actions[[bi, ti, 0]] = ax;
            actions[[bi, ti, 1]] = ay;
            cx = (cx + 1.6 * ax as f64).clamp(3.0, 29.0);
            cy = (cy + 1.6 * ay as f64).clamp(3.0, 29.0);
            for y in 0..hw {
                for x in 0..hw {
                    let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                    if d2 <= 2.6f64.powi(2) {
                        obs[[bi, ti, y, x, 0]] = 1.0;
                        obs[[bi, ti, y, x, 1]] = 0.25;
                    }
                }
            }
            rewards[(bi, ti)] = (cx / 32.0) as f32;
        }
    }
    let masks = ArrayD::<f32>::ones(IxDyn(&[b, t, hw, hw]));
    let batch = SequenceBatch {
        observations: obs, actions, rewards, continues, is_first,
        masks_fm: masks.clone(), masks_gt: masks,
    };
    let mut wm = WorldModel::<f32>::build(&cfg, hw, 2, 1).unwrap();
    let mut opt = Adam::new(&wm.params, cfg.learn_rate);
    for step in 0..1201 {
        let loss = world_model_loss(&wm, &batch, LatentMode::Sample, &mut rng).unwrap();
        let mut grads = loss.graph.backward(loss.total);
        let collected = wm.params.collect_grads(&loss.binding, &mut grads);
        opt.step(&mut wm.params, &collected);
        if step % 150 == 0 {
            println!("step {step}: rgb {:.3} reward {:.4} kl {:.3}", loss.values.rgb, loss.values.reward, loss.values.kl_raw);
        }
    }
}
