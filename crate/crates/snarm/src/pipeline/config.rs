//! Run configuration: TOML sections mirroring the module layout, validation,
//! and a canonical hash for checkpoint compatibility checks.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::ScoreReduction;
use crate::error::{Result, SnarmError};
use crate::metrics::{ProConfig, ThresholdMode};
use crate::model::{ResidualMode, StageConfig};
use crate::train::LossConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Single,
    Multi,
    Cross,
    Fewshot,
}

impl std::str::FromStr for Regime {
    type Err = SnarmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Regime::Single),
            "multi" => Ok(Regime::Multi),
            "cross" => Ok(Regime::Cross),
            "fewshot" => Ok(Regime::Fewshot),
            other => Err(SnarmError::config(format!(
                "unknown regime `{other}` (expected single|multi|cross|fewshot)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub seed: u64,
    pub regime: Regime,
    pub fewshot_k: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            regime: Regime::Multi,
            fewshot_k: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub categories: usize,
    pub train_per_category: usize,
    pub test_per_category: usize,
    pub image_size: usize,
    pub defect_min_frac: f64,
    pub defect_max_frac: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            categories: 2,
            train_per_category: 40,
            test_per_category: 20,
            image_size: 64,
            defect_min_frac: 0.02,
            defect_max_frac: 0.10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSection {
    pub backend: String,
    pub layers: usize,
    pub channels: usize,
    pub resize: usize,
    pub crop: usize,
    pub patch_size: usize,
    /// Optional upsample of the fused grid before flattening.
    pub flatten_h: Option<usize>,
    pub flatten_w: Option<usize>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            backend: "synthetic".to_string(),
            layers: 8,
            channels: 32,
            resize: 448,
            crop: 392,
            patch_size: 14,
            flatten_h: None,
            flatten_w: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BankSection {
    /// T; clamped to the pool size at build time.
    pub coreset_size: usize,
    pub theta: u8,
    pub topk: usize,
    pub per_category: bool,
}

impl Default for BankSection {
    fn default() -> Self {
        BankSection {
            coreset_size: 10_000,
            theta: 2,
            topk: 3,
            per_category: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NavigatorSection {
    pub trusted_percent: f64,
    pub intra_topk: usize,
}

impl Default for NavigatorSection {
    fn default() -> Self {
        NavigatorSection {
            trusted_percent: 75.0,
            intra_topk: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SnmmSection {
    pub dim: usize,
    pub state_dim: usize,
    /// Fixed at 2; validated.
    pub blocks: usize,
    pub keep_ratio: f64,
}

impl Default for SnmmSection {
    fn default() -> Self {
        SnmmSection {
            dim: 256,
            state_dim: 16,
            blocks: 2,
            keep_ratio: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderSection {
    /// "top_q_mean" or "max"
    pub image_score: String,
    pub top_q: f64,
}

impl Default for DecoderSection {
    fn default() -> Self {
        DecoderSection {
            image_score: "top_q_mean".to_string(),
            top_q: 0.001,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub alpha_nav: f64,
    pub gamma_nav: f64,
    pub alpha_branch: f64,
    pub gamma_branch: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub cycle_length: usize,
    pub jitter_lambda: f64,
    pub cycles: usize,
    pub snmm_cyclic: bool,
    pub synth_per_image: usize,
    /// "hybrid" or "inter_only"
    pub residual_mode: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let loss = LossConfig::default();
        TrainSection {
            alpha_nav: loss.alpha_nav,
            gamma_nav: loss.gamma_nav,
            alpha_branch: loss.alpha_branch,
            gamma_branch: loss.gamma_branch,
            lr: loss.lr,
            weight_decay: loss.weight_decay,
            cycle_length: loss.cycle_length,
            jitter_lambda: loss.jitter_lambda,
            cycles: 1,
            snmm_cyclic: false,
            synth_per_image: 1,
            residual_mode: "hybrid".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsSection {
    pub pro_fpr_limit: f64,
    pub connectivity: u8,
    /// "exact" or a threshold count for the approximate mode.
    pub thresholds: String,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            pro_fpr_limit: 0.3,
            connectivity: 8,
            thresholds: "exact".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    pub run: RunSection,
    pub synth: SynthSection,
    pub encoder: EncoderSection,
    pub bank: BankSection,
    pub navigator: NavigatorSection,
    pub snmm: SnmmSection,
    pub decoder: DecoderSection,
    pub train: TrainSection,
    pub metrics: MetricsSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SnarmError::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Config = toml::from_str(&text)
            .map_err(|e| SnarmError::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| SnarmError::config(format!("serialize config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.layers < 2 || self.encoder.layers % 2 != 0 {
            return Err(SnarmError::config("encoder.layers must be even and >= 2"));
        }
        if self.encoder.crop == 0 || self.encoder.resize < self.encoder.crop {
            return Err(SnarmError::config("encoder requires resize >= crop > 0"));
        }
        if self.encoder.crop % self.encoder.patch_size != 0 {
            return Err(SnarmError::config(
                "encoder.crop must be divisible by encoder.patch_size",
            ));
        }
        if !matches!(self.bank.theta, 1 | 2) {
            return Err(SnarmError::config("bank.theta must be 1 or 2"));
        }
        if self.bank.topk == 0 || self.bank.coreset_size == 0 {
            return Err(SnarmError::config("bank.topk and bank.coreset_size must be >= 1"));
        }
        if !(0.0 < self.navigator.trusted_percent && self.navigator.trusted_percent < 100.0) {
            return Err(SnarmError::config("navigator.trusted_percent must lie in (0,100)"));
        }
        if self.navigator.intra_topk == 0 {
            return Err(SnarmError::config("navigator.intra_topk must be >= 1"));
        }
        if self.snmm.blocks != 2 {
            return Err(SnarmError::config("snmm.blocks is fixed at 2"));
        }
        if !(self.snmm.keep_ratio > 0.0 && self.snmm.keep_ratio <= 1.0) {
            return Err(SnarmError::config("snmm.keep_ratio must lie in (0,1]"));
        }
        if self.snmm.dim == 0 || self.snmm.state_dim == 0 {
            return Err(SnarmError::config("snmm dims must be >= 1"));
        }
        match self.decoder.image_score.as_str() {
            "max" => {}
            "top_q_mean" => {
                if !(self.decoder.top_q > 0.0 && self.decoder.top_q <= 1.0) {
                    return Err(SnarmError::config("decoder.top_q must lie in (0,1]"));
                }
            }
            other => {
                return Err(SnarmError::config(format!(
                    "decoder.image_score must be max|top_q_mean, got `{other}`"
                )))
            }
        }
        match self.train.residual_mode.as_str() {
            "hybrid" | "inter_only" => {}
            other => {
                return Err(SnarmError::config(format!(
                    "train.residual_mode must be hybrid|inter_only, got `{other}`"
                )))
            }
        }
        if self.run.fewshot_k == 0 {
            return Err(SnarmError::config("run.fewshot_k must be >= 1"));
        }
        if !(self.metrics.pro_fpr_limit > 0.0 && self.metrics.pro_fpr_limit <= 1.0) {
            return Err(SnarmError::config("metrics.pro_fpr_limit must lie in (0,1]"));
        }
        if !matches!(self.metrics.connectivity, 4 | 8) {
            return Err(SnarmError::config("metrics.connectivity must be 4 or 8"));
        }
        if self.metrics.thresholds != "exact" && self.metrics.thresholds.parse::<usize>().is_err()
        {
            return Err(SnarmError::config(
                "metrics.thresholds must be `exact` or a threshold count",
            ));
        }
        if !(self.synth.defect_min_frac > 0.0
            && self.synth.defect_min_frac <= self.synth.defect_max_frac
            && self.synth.defect_max_frac < 1.0)
        {
            return Err(SnarmError::config("synth defect fractions out of order"));
        }
        self.loss_config().validate()?;
        Ok(())
    }

    /// Canonical hash of the full configuration.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha_nav: self.train.alpha_nav,
            gamma_nav: self.train.gamma_nav,
            alpha_branch: self.train.alpha_branch,
            gamma_branch: self.train.gamma_branch,
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            cycle_length: self.train.cycle_length,
            jitter_lambda: self.train.jitter_lambda,
        }
    }

    pub fn stage_config(&self) -> StageConfig {
        StageConfig {
            theta: self.bank.theta,
            topk: self.bank.topk,
            intra_topk: self.navigator.intra_topk,
            trusted_percent: self.navigator.trusted_percent,
            keep_ratio: self.snmm.keep_ratio,
            residual_mode: if self.train.residual_mode == "inter_only" {
                ResidualMode::InterOnly
            } else {
                ResidualMode::Hybrid
            },
        }
    }

    pub fn score_reduction(&self) -> ScoreReduction {
        match self.decoder.image_score.as_str() {
            "max" => ScoreReduction::Max,
            _ => ScoreReduction::TopQMean(self.decoder.top_q),
        }
    }

    pub fn pro_config(&self) -> ProConfig {
        ProConfig {
            fpr_limit: self.metrics.pro_fpr_limit,
            connectivity: self.metrics.connectivity,
            thresholds: match self.metrics.thresholds.as_str() {
                "exact" => ThresholdMode::Exact,
                n => ThresholdMode::Subsampled(n.parse().unwrap_or(256)),
            },
        }
    }
}
