//! Hard-coverage sprite rasterizer. A pixel belongs to a sprite iff its
//! center lies inside the shape; no anti-aliasing, so sprite coverage and the
//! ground-truth mask agree exactly. All colors are 8-bit so observations
//! quantize losslessly to u8 containers.

use super::{EnvState, TaskState};
use crate::config::{EnvConfig, MaskScope, Task};
use ndarray::{Array2, Array3};

pub const AGENT_COLOR: [u8; 3] = [255, 64, 64];
pub const GOAL_COLOR: [u8; 3] = [64, 255, 64];
pub const ROD_COLOR: [u8; 3] = [255, 200, 64];
pub const BACKGROUND: [u8; 3] = [0, 0, 0];

/// Sprite colors in draw order for the given task (bottom to top).
pub fn sprite_colors(task: Task) -> &'static [[u8; 3]] {
    match task {
        Task::DotReacher => &[GOAL_COLOR, AGENT_COLOR],
        Task::PixelPendulum => &[ROD_COLOR],
    }
}

const DOT_RADIUS: f64 = 2.6;
const ROD_LENGTH: f64 = 12.0;
const ROD_HALF_WIDTH: f64 = 1.4;

enum Sprite {
    Disk { cx: f64, cy: f64, r: f64, color: [u8; 3] },
    Capsule { x0: f64, y0: f64, x1: f64, y1: f64, hw: f64, color: [u8; 3] },
}

impl Sprite {
    fn covers(&self, px: f64, py: f64) -> bool {
        match self {
            Sprite::Disk { cx, cy, r, .. } => {
                (px - cx).powi(2) + (py - cy).powi(2) <= r * r
            }
            Sprite::Capsule { x0, y0, x1, y1, hw, .. } => {
                let (dx, dy) = (x1 - x0, y1 - y0);
                let len2 = dx * dx + dy * dy;
                let t = if len2 > 0.0 {
                    (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (qx, qy) = (x0 + t * dx, y0 + t * dy);
                (px - qx).powi(2) + (py - qy).powi(2) <= hw * hw
            }
        }
    }

    fn color(&self) -> [u8; 3] {
        match self {
            Sprite::Disk { color, .. } | Sprite::Capsule { color, .. } => *color,
        }
    }
}

/// Relevant sprites in draw order (bottom to top) with their mask-scope flag.
fn relevant_sprites(cfg: &EnvConfig, relevant: &TaskState) -> Vec<(Sprite, bool)> {
    let side = cfg.image_size as f64;
    let scale = side / 32.0;
    match relevant {
        TaskState::Dot { agent, goal } => {
            let goal_in_mask = cfg.mask_scope == MaskScope::AllRelevant;
            vec![
                (
                    Sprite::Disk {
                        cx: goal[0] * side,
                        cy: goal[1] * side,
                        r: DOT_RADIUS * scale,
                        color: GOAL_COLOR,
                    },
                    goal_in_mask,
                ),
                (
                    Sprite::Disk {
                        cx: agent[0] * side,
                        cy: agent[1] * side,
                        r: DOT_RADIUS * scale,
                        color: AGENT_COLOR,
                    },
                    true,
                ),
            ]
        }
        TaskState::Pendulum { theta, .. } => {
            let (cx, cy) = (0.5 * side, 0.5 * side);
            let tip_x = cx + ROD_LENGTH * scale * theta.sin();
            let tip_y = cy - ROD_LENGTH * scale * theta.cos();
            vec![(
                Sprite::Capsule {
                    x0: cx,
                    y0: cy,
                    x1: tip_x,
                    y1: tip_y,
                    hw: ROD_HALF_WIDTH * scale,
                    color: ROD_COLOR,
                },
                true,
            )]
        }
    }
}

fn to_f32(img: &Array3<u8>) -> Array3<f32> {
    img.mapv(|v| v as f32 / 255.0)
}

/// Render the full observation (distractors beneath relevant sprites) and
/// the exact ground-truth mask under the configured scope.
pub fn render_observation(cfg: &EnvConfig, state: &EnvState) -> (Array3<f32>, Array2<bool>) {
    let n = cfg.image_size;
    let mut img = Array3::<u8>::zeros((n, n, 3));
    for c in 0..3 {
        if BACKGROUND[c] != 0 {
            img.slice_mut(ndarray::s![.., .., c]).fill(BACKGROUND[c]);
        }
    }
    state.distractor.draw(&mut img);

    let sprites = relevant_sprites(cfg, &state.relevant);
    let mut mask = Array2::<bool>::from_elem((n, n), false);
    for y in 0..n {
        let py = y as f64 + 0.5;
        for x in 0..n {
            let px = x as f64 + 0.5;
            for (sprite, in_mask) in &sprites {
                if sprite.covers(px, py) {
                    let col = sprite.color();
                    for c in 0..3 {
                        img[(y, x, c)] = col[c];
                    }
                    mask[(y, x)] = *in_mask;
                }
            }
        }
    }
    (to_f32(&img), mask)
}

/// Render only the in-scope task-relevant sprites on black (test oracle).
pub fn render_clean(cfg: &EnvConfig, state: &EnvState) -> Array3<f32> {
    let n = cfg.image_size;
    let mut img = Array3::<u8>::zeros((n, n, 3));
    let sprites = relevant_sprites(cfg, &state.relevant);
    for y in 0..n {
        let py = y as f64 + 0.5;
        for x in 0..n {
            let px = x as f64 + 0.5;
            for (sprite, in_mask) in &sprites {
                if *in_mask && sprite.covers(px, py) {
                    let col = sprite.color();
                    for c in 0..3 {
                        img[(y, x, c)] = col[c];
                    }
                }
            }
        }
    }
    to_f32(&img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DistractorMode;
    use crate::envsim::{DistractorState, Env};

    #[test]
    fn mask_matches_clean_render_under_distractors() {
        for mode in [
            DistractorMode::None,
            DistractorMode::MovingPatches,
            DistractorMode::ScrollingNoise,
        ] {
            for task in [Task::DotReacher, Task::PixelPendulum] {
                let cfg = EnvConfig {
                    task,
                    distractor_mode: mode,
                    episode_length: 5,
                    ..EnvConfig::default()
                };
                let mut env = Env::new(cfg.clone()).unwrap();
                let mut r = env.reset(17);
                for step in 0..5 {
                    let clean = render_clean(&cfg, env.state());
                    for ((y, x), &m) in r.gt_mask.indexed_iter() {
                        for c in 0..3 {
                            let masked = if m { r.observation[(y, x, c)] } else { 0.0 };
                            assert_eq!(
                                masked,
                                clean[(y, x, c)],
                                "mismatch at ({y},{x},{c}) step {step}"
                            );
                        }
                    }
                    let action = vec![0.4_f32; cfg.action_dim()];
                    r = env.step(&action).unwrap();
                }
            }
        }
    }

    #[test]
    fn agent_only_scope_excludes_goal_pixels() {
        let all = EnvConfig {
            task: Task::DotReacher,
            distractor_mode: DistractorMode::None,
            ..EnvConfig::default()
        };
        let agent_only = EnvConfig {
            mask_scope: MaskScope::AgentOnly,
            ..all.clone()
        };
        let mut env_all = Env::new(all).unwrap();
        let mut env_agent = Env::new(agent_only).unwrap();
        let ra = env_all.reset(5);
        let rb = env_agent.reset(5);
        // identical observations, strictly smaller mask
        assert_eq!(ra.observation, rb.observation);
        let count_all = ra.gt_mask.iter().filter(|&&m| m).count();
        let count_agent = rb.gt_mask.iter().filter(|&&m| m).count();
        assert!(count_agent < count_all);
        assert!(count_agent > 0);
    }

    #[test]
    fn empty_scope_renders_black_clean_image() {
        // A pendulum state whose sprite set is forced empty by scope is not
        // constructible; emulate with a dot whose agent leaves the frame
        // entirely: not possible either (clamped). Instead check the
        // degenerate path directly: no sprites -> all black.
        let cfg = EnvConfig {
            task: Task::DotReacher,
            mask_scope: MaskScope::AgentOnly,
            ..EnvConfig::default()
        };
        let state = EnvState {
            relevant: TaskState::Dot {
                agent: [2.0, 2.0], // off-canvas center: covers no pixel centers
                goal: [0.5, 0.5],
            },
            distractor: DistractorState::None,
            step_index: 0,
        };
        let clean = render_clean(&cfg, &state);
        assert!(clean.iter().all(|&v| v == 0.0));
    }
}
