//! Experiment configuration: a flat key-value TOML file with one section per
//! concern. Parse -> serialize -> parse is the identity.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use glance_core::glm::{GlancingConfig, InputMode, SelectionStrategy};
use glance_core::model::{CopyMode, ModelConfig, PositionalEncoding};
use glance_core::data::{SynthTaskSpec, Transformation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Glm,
    Nat,
    MlmAblation,
    GlatCtc,
    Ctc,
    At,
}

impl Objective {
    pub fn uses_glancing(self) -> bool {
        matches!(self, Objective::Glm | Objective::MlmAblation | Objective::GlatCtc)
    }

    pub fn is_ctc(self) -> bool {
        matches!(self, Objective::GlatCtc | Objective::Ctc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Toy,
    IwsltSmall,
}

/// Model section: a preset plus optional field overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ffn_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub enc_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dec_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub at_dec_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_src_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_max: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positional: Option<PositionalEncoding>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub copy_mode: Option<CopyMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soft_copy_tau: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: Preset::Toy,
            d_model: None,
            n_heads: None,
            ffn_dim: None,
            enc_layers: None,
            dec_layers: None,
            at_dec_layers: None,
            max_src_len: None,
            l_max: None,
            dropout: None,
            positional: None,
            copy_mode: None,
            soft_copy_tau: None,
        }
    }
}

impl ModelSection {
    pub fn build(&self, vocab_size: usize) -> ModelConfig {
        let mut cfg = match self.preset {
            Preset::Toy => ModelConfig::toy(vocab_size),
            Preset::IwsltSmall => ModelConfig::iwslt_small(vocab_size),
        };
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(d_model, n_heads, ffn_dim, enc_layers, dec_layers, at_dec_layers, max_src_len, l_max, dropout, positional, copy_mode, soft_copy_tau);
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub transformation: Transformation,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    pub train_pairs: usize,
    #[serde(default = "default_valid_pairs")]
    pub valid_pairs: usize,
    #[serde(default = "default_test_pairs")]
    pub test_pairs: usize,
    /// Load the training corpus from `<prefix>.src/.tgt` instead of
    /// generating it (validation/test splits are still generated).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
}

fn default_valid_pairs() -> usize {
    200
}

fn default_test_pairs() -> usize {
    500
}

impl TaskSection {
    pub fn spec(&self) -> SynthTaskSpec {
        SynthTaskSpec {
            vocab_size: self.vocab_size,
            min_len: self.min_len,
            max_len: self.max_len,
            transformation: self.transformation,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrPolicy {
    /// Linear warmup to `lr`, then inverse-square-root decay.
    InvSqrt,
    /// Linear interpolation from `lr` to `lr_end` over the whole run.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_lr_policy")]
    pub lr_policy: LrPolicy,
    #[serde(default = "default_lr_end")]
    pub lr_end: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
    #[serde(default = "default_total_steps")]
    pub total_steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_lr() -> f64 {
    5e-4
}
fn default_lr_policy() -> LrPolicy {
    LrPolicy::InvSqrt
}
fn default_total_steps() -> u64 {
    3000
}
fn default_lr_end() -> f64 {
    1e-5
}
fn default_warmup() -> u64 {
    200
}
fn default_batch() -> usize {
    16
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default = "default_validate_every")]
    pub validate_every: u64,
    #[serde(default = "default_keep_best")]
    pub keep_best: usize,
    pub out_dir: PathBuf,
    /// Record parameter/optimizer digests around the measurement phase of
    /// every step (used by the verification suite).
    #[serde(default)]
    pub verify_two_pass: bool,
}

fn default_log_every() -> u64 {
    50
}
fn default_validate_every() -> u64 {
    250
}
fn default_keep_best() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub objective: Objective,
    #[serde(default)]
    pub model: ModelSection,
    pub task: TaskSection,
    #[serde(default = "default_glancing")]
    pub glancing: GlancingConfig,
    pub optim: OptimSection,
    pub run: RunSection,
}

fn default_glancing() -> GlancingConfig {
    GlancingConfig::default()
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.build(self.task.vocab_size)
    }

    /// The effective glancing configuration: the masked-LM ablation pins its
    /// own sampling strategy and input convention.
    pub fn effective_glancing(&self) -> GlancingConfig {
        let mut g = self.glancing.clone();
        if self.objective == Objective::MlmAblation {
            g.strategy = SelectionStrategy::UniformMlm;
            g.input_mode = InputMode::MaskToken;
        }
        g
    }

    pub fn validate(&self) -> Result<()> {
        self.task.spec().validate()?;
        let model = self.model_config();
        model.validate()?;
        self.glancing.validate()?;
        if self.task.max_len > model.max_src_len {
            bail!(
                "task max_len {} exceeds model max_src_len {}",
                self.task.max_len,
                model.max_src_len
            );
        }
        if !self.objective.is_ctc() {
            // teacher-forced target lengths must fit the length head
            let longest_target = 2 * self.task.max_len; // expand_contract doubles
            if longest_target > model.l_max {
                bail!(
                    "targets up to {} exceed l_max {}; raise model.l_max",
                    longest_target,
                    model.l_max
                );
            }
        }
        if self.optim.total_steps == 0 {
            bail!("optim.total_steps must be positive");
        }
        if self.optim.lr <= 0.0 {
            bail!("optim.lr must be positive");
        }
        if self.optim.batch_size == 0 {
            bail!("optim.batch_size must be positive");
        }
        if self.run.keep_best == 0 {
            bail!("run.keep_best must be positive");
        }
        Ok(())
    }
}
