//! Experiment configuration: environment, mask provider, model, agent, and run
//! settings, with TOML file loading and dotted-path command-line overrides.

use crate::error::{Result, SdError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    DotReacher,
    PixelPendulum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorMode {
    None,
    MovingPatches,
    ScrollingNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    AllRelevant,
    AgentOnly,
}

/// Synthetic environment settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub task: Task,
    pub reward_mode: RewardMode,
    pub distractor_mode: DistractorMode,
    /// Pixels per side; 32 or 64.
    pub image_size: usize,
    pub action_repeat: usize,
    /// Episode length in decision steps.
    pub episode_length: usize,
    pub mask_scope: MaskScope,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            task: Task::DotReacher,
            reward_mode: RewardMode::Dense,
            distractor_mode: DistractorMode::MovingPatches,
            image_size: 32,
            action_repeat: 2,
            episode_length: 250,
            mask_scope: MaskScope::AllRelevant,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size != 32 && self.image_size != 64 {
            return Err(SdError::Config(format!(
                "env.image_size must be 32 or 64, got {}",
                self.image_size
            )));
        }
        if self.action_repeat < 1 {
            return Err(SdError::Config("env.action_repeat must be >= 1".into()));
        }
        if self.episode_length < 1 {
            return Err(SdError::Config("env.episode_length must be >= 1".into()));
        }
        Ok(())
    }

    pub fn action_dim(&self) -> usize {
        match self.task {
            Task::DotReacher => 2,
            Task::PixelPendulum => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    GroundTruth,
    SimulatedFm,
    External,
}

/// Mask provider settings; corruption parameters apply to `simulated_fm` only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskProviderConfig {
    pub kind: MaskKind,
    /// Probability per frame of dropping an entire relevant connected component.
    pub p_fn_component: f64,
    /// Per-pixel independent drop probability within kept components.
    pub p_fn_pixel: f64,
    /// Random erosion/dilation radius drawn uniformly from [0, morph_radius].
    pub morph_radius: usize,
    /// Probability per frame of adding a spurious blob.
    pub p_fp_blob: f64,
    /// Spurious blob area in pixels.
    pub blob_size: usize,
    pub seed: u64,
}

impl Default for MaskProviderConfig {
    fn default() -> Self {
        Self {
            kind: MaskKind::GroundTruth,
            p_fn_component: 0.0,
            p_fn_pixel: 0.0,
            morph_radius: 0,
            p_fp_blob: 0.0,
            blob_size: 9,
            seed: 0,
        }
    }
}

impl MaskProviderConfig {
    /// Moderate simulated-FM profile: train-time IoU lands broadly in the 0.6-0.9 band.
    pub fn moderate_fm(seed: u64) -> Self {
        Self {
            kind: MaskKind::SimulatedFm,
            p_fn_component: 0.1,
            p_fn_pixel: 0.05,
            morph_radius: 1,
            p_fp_blob: 0.05,
            blob_size: 9,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("masks.p_fn_component", self.p_fn_component),
            ("masks.p_fn_pixel", self.p_fn_pixel),
            ("masks.p_fp_blob", self.p_fp_blob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SdError::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if self.blob_size < 1 {
            return Err(SdError::Config("masks.blob_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// World-model training variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Masked targets from ground-truth masks, naive L2, no mask head.
    SdGt,
    /// Masked targets from the provider, selective L2, stop-gradient mask head.
    SdSelective,
    /// Masked targets from the provider, naive L2, stop-gradient mask head.
    SdNaive,
    /// Provider-masked observations as both encoder input and target, naive L2.
    AsInput,
    /// `SdSelective` with mask-head gradients flowing into the world model.
    NoStopgrad,
    /// Raw-observation reconstruction, no mask machinery.
    Dreamer,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::SdGt,
        Variant::SdSelective,
        Variant::SdNaive,
        Variant::AsInput,
        Variant::NoStopgrad,
        Variant::Dreamer,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::SdGt => "sd_gt",
            Variant::SdSelective => "sd_selective",
            Variant::SdNaive => "sd_naive",
            Variant::AsInput => "as_input",
            Variant::NoStopgrad => "no_stopgrad",
            Variant::Dreamer => "dreamer",
        }
    }

    pub fn parse(name: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| {
                let valid: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                SdError::Usage(format!(
                    "unknown variant {name:?}; valid variants: {}",
                    valid.join(", ")
                ))
            })
    }

    /// Whether this variant trains a binary mask decoder head.
    pub fn has_mask_head(&self) -> bool {
        matches!(
            self,
            Variant::SdSelective | Variant::SdNaive | Variant::NoStopgrad
        )
    }

    /// Whether the encoder consumes provider-masked observations.
    pub fn masks_input(&self) -> bool {
        matches!(self, Variant::AsInput)
    }
}

/// World-model sizes and loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldModelConfig {
    /// Deterministic state size.
    pub det_dim: usize,
    /// Number of categorical latent variables.
    pub stoch_groups: usize,
    /// Classes per categorical variable.
    pub stoch_classes: usize,
    /// Base CNN channel count.
    pub cnn_depth: usize,
    pub beta_pred: f64,
    pub beta_dyn: f64,
    pub beta_rep: f64,
    /// KL clip floor in nats.
    pub free_bits: f64,
    /// Binarization threshold for the mask head.
    pub mask_threshold: f64,
    pub variant: Variant,
    pub learn_rate: f64,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            det_dim: 256,
            stoch_groups: 16,
            stoch_classes: 16,
            cnn_depth: 24,
            beta_pred: 1.0,
            beta_dyn: 0.5,
            beta_rep: 0.1,
            free_bits: 1.0,
            mask_threshold: 0.9,
            variant: Variant::SdSelective,
            learn_rate: 1e-4,
        }
    }
}

impl WorldModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("model.beta_pred", self.beta_pred),
            ("model.beta_dyn", self.beta_dyn),
            ("model.beta_rep", self.beta_rep),
        ] {
            if v <= 0.0 {
                return Err(SdError::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(0.0 < self.mask_threshold && self.mask_threshold < 1.0) {
            return Err(SdError::Config(format!(
                "model.mask_threshold must be in (0,1), got {}",
                self.mask_threshold
            )));
        }
        if self.free_bits != 1.0 {
            return Err(SdError::Config(format!(
                "model.free_bits is fixed at 1.0, got {}",
                self.free_bits
            )));
        }
        for (name, v) in [
            ("model.det_dim", self.det_dim),
            ("model.stoch_groups", self.stoch_groups),
            ("model.stoch_classes", self.stoch_classes),
            ("model.cnn_depth", self.cnn_depth),
        ] {
            if v < 1 {
                return Err(SdError::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Flattened stochastic state width.
    pub fn stoch_dim(&self) -> usize {
        self.stoch_groups * self.stoch_classes
    }

    /// Model state width: deterministic plus flattened stochastic.
    pub fn state_dim(&self) -> usize {
        self.det_dim + self.stoch_dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorDist {
    TanhGaussian,
}

/// Actor-critic settings for latent imagination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    /// Imagination rollout length.
    pub horizon: usize,
    pub gamma: f64,
    pub lambda_: f64,
    pub entropy_scale: f64,
    pub critic_ema_decay: f64,
    pub actor_dist: ActorDist,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            gamma: 0.997,
            lambda_: 0.95,
            entropy_scale: 3e-4,
            critic_ema_decay: 0.98,
            actor_dist: ActorDist::TanhGaussian,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.gamma && self.gamma < 1.0) {
            return Err(SdError::Config(format!(
                "agent.gamma must be in (0,1), got {}",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda_) {
            return Err(SdError::Config(format!(
                "agent.lambda_ must be in [0,1], got {}",
                self.lambda_
            )));
        }
        if self.horizon < 1 {
            return Err(SdError::Config("agent.horizon must be >= 1".into()));
        }
        Ok(())
    }
}

/// Full experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub total_env_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Training updates per environment step.
    pub train_ratio: f64,
    /// Evaluation cadence in environment steps.
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    pub env: EnvConfig,
    pub masks: MaskProviderConfig,
    pub model: WorldModelConfig,
    pub agent: AgentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            total_env_steps: 50_000,
            batch_size: 16,
            seq_len: 64,
            train_ratio: 0.5,
            eval_every: 5_000,
            eval_episodes: 10,
            seed: 0,
            env: EnvConfig::default(),
            masks: MaskProviderConfig::default(),
            model: WorldModelConfig::default(),
            agent: AgentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.masks.validate()?;
        self.model.validate()?;
        self.agent.validate()?;
        if self.seq_len < 2 {
            return Err(SdError::Config(format!(
                "seq_len must be >= 2, got {}",
                self.seq_len
            )));
        }
        if self.eval_episodes < 1 {
            return Err(SdError::Config("eval_episodes must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(SdError::Config("batch_size must be >= 1".into()));
        }
        if self.train_ratio < 0.0 {
            return Err(SdError::Config("train_ratio must be >= 0".into()));
        }
        if self.env.episode_length + 1 < self.seq_len {
            return Err(SdError::Config(format!(
                "seq_len {} exceeds episode frame count {} (episode_length + 1)",
                self.seq_len,
                self.env.episode_length + 1
            )));
        }
        Ok(())
    }

    /// Parse a TOML document, starting from defaults, rejecting unknown fields.
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| SdError::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("RunConfig serializes to TOML")
    }

    /// Apply `key=value` overrides with dotted paths (e.g. `model.variant=sd_naive`),
    /// then re-validate. Paths must name existing fields.
    pub fn apply_overrides(&self, overrides: &[String]) -> Result<RunConfig> {
        let mut tree: toml::Value = toml::Value::try_from(self)
            .map_err(|e| SdError::Config(format!("config serialization error: {e}")))?;
        for item in overrides {
            let (path, raw) = item.split_once('=').ok_or_else(|| {
                SdError::Usage(format!("override {item:?} is not of the form key=value"))
            })?;
            set_dotted(&mut tree, path.trim(), raw.trim())?;
        }
        let cfg: RunConfig = tree
            .try_into()
            .map_err(|e| SdError::Usage(format!("override produced invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Apply `masks.*` overrides to a provider configuration alone (offline mask
/// generation does not carry a full run configuration).
pub fn apply_mask_overrides(
    masks: &MaskProviderConfig,
    overrides: &[String],
) -> Result<MaskProviderConfig> {
    #[derive(Serialize, Deserialize)]
    struct Wrapper {
        masks: MaskProviderConfig,
    }
    let mut tree: toml::Value = toml::Value::try_from(Wrapper {
        masks: masks.clone(),
    })
    .map_err(|e| SdError::Config(format!("provider serialization error: {e}")))?;
    for item in overrides {
        let (path, raw) = item.split_once('=').ok_or_else(|| {
            SdError::Usage(format!("override {item:?} is not of the form key=value"))
        })?;
        set_dotted(&mut tree, path.trim(), raw.trim())?;
    }
    let wrapper: Wrapper = tree
        .try_into()
        .map_err(|e| SdError::Usage(format!("override produced invalid provider config: {e}")))?;
    wrapper.masks.validate()?;
    Ok(wrapper.masks)
}

/// Set a dotted-path key in a TOML tree to a parsed literal. The full path
/// must already exist so typos are rejected by name.
fn set_dotted(tree: &mut toml::Value, path: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(SdError::Usage(format!("invalid override path {path:?}")));
    }
    let mut node = tree;
    for part in &parts[..parts.len() - 1] {
        node = node
            .get_mut(*part)
            .ok_or_else(|| SdError::Usage(format!("unknown config path {path:?} at {part:?}")))?;
    }
    let last = parts[parts.len() - 1];
    let slot = node
        .get_mut(last)
        .ok_or_else(|| SdError::Usage(format!("unknown config path {path:?} at {last:?}")))?;
    *slot = parse_literal(raw);
    Ok(())
}

/// Parse an override value: bool, integer, float, then bare string.
fn parse_literal(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.trim_matches('"').to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn override_applies_and_persists() {
        let cfg = RunConfig::default();
        let out = cfg
            .apply_overrides(&[
                "model.variant=sd_naive".into(),
                "total_env_steps=0".into(),
                "env.distractor_mode=none".into(),
            ])
            .unwrap();
        assert_eq!(out.model.variant, Variant::SdNaive);
        assert_eq!(out.total_env_steps, 0);
        assert_eq!(out.env.distractor_mode, DistractorMode::None);
        let text = out.to_toml_string();
        assert!(text.contains("sd_naive"));
    }

    #[test]
    fn override_rejects_unknown_path() {
        let cfg = RunConfig::default();
        let err = cfg.apply_overrides(&["model.nonsense=3".into()]).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("model.nonsense"), "message was {msg}");
    }

    #[test]
    fn unknown_field_in_file_rejected() {
        let err = RunConfig::from_toml_str("bogus_field = 1\n").unwrap_err();
        assert!(format!("{err}").contains("parse"));
    }

    #[test]
    fn invalid_image_size_names_field() {
        let mut cfg = RunConfig::default();
        cfg.env.image_size = 48;
        let err = cfg.validate().unwrap_err();
        assert!(format!("{err}").contains("image_size"));
    }

    #[test]
    fn variant_parse_lists_valid_names() {
        let err = Variant::parse("sd_bogus").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("sd_selective") && msg.contains("dreamer"));
    }
}
