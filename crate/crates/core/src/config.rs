//! Declarative run configuration.
//!
//! One TOML document per run, with namespaced sections for every subsystem.
//! Unknown keys are rejected, validation is total before any work starts,
//! and the resolved document (defaults filled in) is written next to every
//! output so a run can be reproduced from its artifacts alone.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, AttackMode, PgdAttack};
use crate::codec::{CheckpointCodec, IdentityCodec, LatentCodec};
use crate::conditioning::{
    CaptionProvider, ConstantProvider, HashTextEncoder, LabelTemplateProvider,
    SubprocessCaptionProvider, TextEncoder,
};
use crate::dataset::{DatasetFormat, DatasetSource, SyntheticSpec};
use crate::diffusion::{Denoiser, Purifier, StubDenoiser, ToyDenoiser, ToyTrainConfig};
use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, OptimizerKind};
use crate::schedules::{make_linear_schedule, VarianceSchedule, DEFAULT_STEPS};

/// Environment variable naming the cache/checkpoint root. Relative
/// checkpoint paths resolve against it when set.
pub const CACHE_ENV: &str = "LANGPURE_CACHE";

fn resolve_artifact_path(raw: &str) -> PathBuf {
    let path = PathBuf::from(raw);
    if path.is_relative() {
        if let Ok(root) = std::env::var(CACHE_ENV) {
            if !root.is_empty() {
                return PathBuf::from(root).join(path);
            }
        }
    }
    path
}

/// Epsilon accepting either a float or the paper-style "k/255" fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Epsilon(pub f64);

/// Parse "8/255", "0.03", or similar into a pixel-unit budget.
pub fn parse_epsilon(text: &str) -> Result<f64> {
    let text = text.trim();
    if let Some((num, den)) = text.split_once('/') {
        let n: f64 = num
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad epsilon numerator in {text:?}")))?;
        let d: f64 = den
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad epsilon denominator in {text:?}")))?;
        if d == 0.0 {
            return Err(Error::Config("epsilon denominator is zero".into()));
        }
        Ok(n / d)
    } else {
        text.parse()
            .map_err(|_| Error::Config(format!("bad epsilon {text:?}")))
    }
}

impl Serialize for Epsilon {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.0)
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) => Ok(Epsilon(v)),
            Raw::Text(t) => parse_epsilon(&t)
                .map(Epsilon)
                .map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    #[serde(rename = "type")]
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: DEFAULT_STEPS,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    #[default]
    Identity,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSection {
    #[serde(rename = "type")]
    pub kind: CodecKind,
    pub model_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CaptionProviderKind {
    Pretrained,
    #[default]
    Constant,
    LabelTemplate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptionSection {
    pub provider: CaptionProviderKind,
    /// Fixed string for the constant provider (empty selects the
    /// unconditional path) or the `{label}` template.
    pub template: String,
    pub max_tokens: usize,
    /// Width of the hash-encoder embedding.
    pub embed_dim: usize,
    /// External captioner executable for the pretrained provider.
    pub model_id: String,
    /// Label names for the label-template provider.
    pub labels: Vec<String>,
}

impl Default for CaptionSection {
    fn default() -> Self {
        Self {
            provider: CaptionProviderKind::Constant,
            template: String::new(),
            max_tokens: 8,
            embed_dim: 16,
            model_id: String::new(),
            labels: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub t_frac: f64,
    /// Pass-through for pretrained samplers; the toy path ignores it.
    pub guidance_scale: f64,
    /// Pass-through sampler step override; 0 means the adapter default.
    pub sampler_steps: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            t_frac: 0.5,
            guidance_scale: 1.0,
            sampler_steps: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    Pretrained,
    Toy,
    #[default]
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSection {
    #[serde(rename = "type")]
    pub kind: DenoiserKind,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub mode: AttackMode,
    pub epsilon: Epsilon,
    pub steps: usize,
    /// Absent or zero resolves to epsilon / 4.
    pub step_size: f64,
    pub eot_samples: usize,
    /// Absent resolves to the global seed.
    pub seed: Option<u64>,
    pub random_start: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            mode: AttackMode::PreprocessorBlind,
            epsilon: Epsilon(8.0 / 255.0),
            steps: 40,
            step_size: 0.0,
            eot_samples: 15,
            seed: None,
            random_start: true,
        }
    }
}

impl AttackSection {
    pub fn resolve(&self, global_seed: u64) -> Result<AttackConfig> {
        let epsilon = self.epsilon.0;
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Config(format!(
                "attack.epsilon {epsilon} outside [0, 1] pixel units"
            )));
        }
        let step_size = if self.step_size > 0.0 {
            self.step_size
        } else if epsilon > 0.0 {
            epsilon / 4.0
        } else {
            1e-3
        };
        let config = AttackConfig {
            epsilon,
            steps: self.steps,
            step_size,
            eot_samples: if self.mode == AttackMode::BpdaEot {
                self.eot_samples
            } else {
                1
            },
            mode: self.mode,
            seed: self.seed.unwrap_or(global_seed),
            random_start: self.random_start,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub augment: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            epochs: 15,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: 128,
            augment: false,
        }
    }
}

impl FinetuneSection {
    pub fn resolve(&self, global_seed: u64) -> Result<FinetuneConfig> {
        let config = FinetuneConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            batch_size: self.batch_size,
            augment: self.augment,
            seed: global_seed,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySection {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    pub condition_dropout: f64,
}

impl Default for ToySection {
    fn default() -> Self {
        let d = ToyTrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            hidden: d.hidden,
            learning_rate: d.learning_rate,
            holdout_fraction: d.holdout_fraction,
            condition_dropout: d.condition_dropout,
        }
    }
}

impl ToySection {
    pub fn resolve(&self, global_seed: u64) -> ToyTrainConfig {
        ToyTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            hidden: self.hidden,
            learning_rate: self.learning_rate,
            holdout_fraction: self.holdout_fraction,
            condition_dropout: self.condition_dropout,
            seed: global_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub path: String,
    pub format: DatasetFormat,
    pub split: String,
    /// Sample count for the synthetic generator.
    pub synthetic_count: usize,
    /// Generator seed; absent resolves to the global seed.
    pub synthetic_seed: Option<u64>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            path: String::new(),
            format: DatasetFormat::Synthetic,
            split: "test".into(),
            synthetic_count: 512,
            synthetic_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessSection {
    pub subset_size: usize,
    pub dataset: DatasetSection,
}

impl Default for HarnessSection {
    fn default() -> Self {
        Self {
            subset_size: 2048,
            dataset: DatasetSection::default(),
        }
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    pub schedule: ScheduleSection,
    pub codec: CodecSection,
    pub caption: CaptionSection,
    pub diffusion: DiffusionSection,
    pub denoiser: DenoiserSection,
    pub attack: Option<AttackSection>,
    pub finetune: FinetuneSection,
    pub toy: ToySection,
    pub harness: HarnessSection,
}

impl RunConfig {
    /// Full validation with no filesystem access; heavy work only starts
    /// after this passes.
    pub fn validate(&self) -> Result<()> {
        self.build_schedule()?;
        if !(0.0..=1.0).contains(&self.diffusion.t_frac) {
            return Err(Error::Config(format!(
                "diffusion.t_frac {} outside [0, 1]",
                self.diffusion.t_frac
            )));
        }
        if self.caption.max_tokens == 0 || self.caption.embed_dim == 0 {
            return Err(Error::Config(
                "caption.max_tokens and caption.embed_dim must be positive".into(),
            ));
        }
        match self.caption.provider {
            CaptionProviderKind::LabelTemplate => {
                if self.caption.labels.is_empty() {
                    return Err(Error::Config(
                        "caption.labels must name every class for the label template".into(),
                    ));
                }
                if !self.caption.template.contains("{label}") {
                    return Err(Error::Config(
                        "caption.template must contain {label}".into(),
                    ));
                }
            }
            CaptionProviderKind::Pretrained => {
                if self.caption.model_id.is_empty() {
                    return Err(Error::Config(
                        "caption.model_id must point at the captioner executable".into(),
                    ));
                }
            }
            CaptionProviderKind::Constant => {}
        }
        if self.codec.kind == CodecKind::Pretrained && self.codec.model_id.is_empty() {
            return Err(Error::Config("codec.model_id required for pretrained codec".into()));
        }
        if self.denoiser.kind == DenoiserKind::Toy && self.denoiser.checkpoint.is_empty() {
            return Err(Error::Config(
                "denoiser.checkpoint required for the toy denoiser".into(),
            ));
        }
        if let Some(attack) = &self.attack {
            attack.resolve(self.seed)?;
        }
        self.finetune.resolve(self.seed)?;
        if self.harness.subset_size == 0 {
            return Err(Error::Config("harness.subset_size must be positive".into()));
        }
        if self.harness.dataset.format == DatasetFormat::Synthetic
            && self.harness.dataset.synthetic_count == 0
        {
            return Err(Error::Config("harness.dataset.synthetic_count must be positive".into()));
        }
        Ok(())
    }

    pub fn build_schedule(&self) -> Result<VarianceSchedule> {
        match self.schedule.kind {
            ScheduleKind::Linear => make_linear_schedule(
                self.schedule.steps,
                self.schedule.beta_start,
                self.schedule.beta_end,
            ),
        }
    }

    pub fn build_codec(&self) -> Result<Arc<dyn LatentCodec>> {
        match self.codec.kind {
            CodecKind::Identity => Ok(Arc::new(IdentityCodec)),
            CodecKind::Pretrained => {
                let path = resolve_artifact_path(&self.codec.model_id);
                Ok(Arc::new(CheckpointCodec::load(&path)?))
            }
        }
    }

    pub fn build_captioner(&self) -> Result<Arc<dyn CaptionProvider>> {
        match self.caption.provider {
            CaptionProviderKind::Constant => {
                Ok(Arc::new(ConstantProvider::new(self.caption.template.clone())))
            }
            CaptionProviderKind::LabelTemplate => Ok(Arc::new(LabelTemplateProvider::new(
                self.caption.template.clone(),
                self.caption.labels.clone(),
            )?)),
            CaptionProviderKind::Pretrained => Ok(Arc::new(SubprocessCaptionProvider::new(
                resolve_artifact_path(&self.caption.model_id),
            ))),
        }
    }

    pub fn build_encoder(&self) -> Result<Arc<dyn TextEncoder>> {
        Ok(Arc::new(HashTextEncoder::new(
            self.caption.max_tokens,
            self.caption.embed_dim,
        )?))
    }

    pub fn build_denoiser(&self) -> Result<Arc<dyn Denoiser>> {
        match self.denoiser.kind {
            DenoiserKind::Stub => Ok(Arc::new(StubDenoiser)),
            DenoiserKind::Toy => {
                let path = resolve_artifact_path(&self.denoiser.checkpoint);
                Ok(Arc::new(ToyDenoiser::load(&path)?))
            }
            DenoiserKind::Pretrained => Err(Error::AdapterFailure(
                "no external diffusion backend is wired in; \
                 implement the Denoiser trait or use denoiser.type = \"toy\""
                    .into(),
            )),
        }
    }

    /// Assemble the purifier. When the denoiser embeds its own schedule
    /// (the toy checkpoint does), it must match the configured one.
    pub fn build_purifier(&self) -> Result<Purifier> {
        let schedule = self.build_schedule()?;
        let denoiser = self.build_denoiser()?;
        Purifier::new(
            self.build_codec()?,
            self.build_captioner()?,
            self.build_encoder()?,
            denoiser,
            schedule,
            self.diffusion.t_frac,
        )
    }

    pub fn build_attack(&self) -> Result<Option<PgdAttack>> {
        match &self.attack {
            None => Ok(None),
            Some(section) => Ok(Some(PgdAttack {
                config: section.resolve(self.seed)?,
            })),
        }
    }

    pub fn open_dataset(&self) -> Result<DatasetSource> {
        let section = &self.harness.dataset;
        let synthetic = if section.format == DatasetFormat::Synthetic {
            Some(SyntheticSpec {
                count: section.synthetic_count,
                seed: section.synthetic_seed.unwrap_or(self.seed),
            })
        } else {
            None
        };
        DatasetSource::open(&section.path, section.format, &section.split, synthetic)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

fn parse_toml_value(raw: &str) -> toml::Value {
    if let Ok(v) = raw.parse::<i64>() {
        return toml::Value::Integer(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        return toml::Value::Float(v);
    }
    if let Ok(v) = raw.parse::<bool>() {
        return toml::Value::Boolean(v);
    }
    toml::Value::String(raw.to_string())
}

fn set_path(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        current = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?} crosses a non-table")))?;
    }
    current.insert(parts[parts.len() - 1].to_string(), parse_toml_value(raw));
    Ok(())
}

/// Parse a TOML document, apply `key=value` overrides (flags win), then
/// validate. Unknown keys anywhere are rejected.
pub fn load_run_config(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    for (key, value) in overrides {
        set_path(&mut table, key, value)?;
    }
    let config: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("config error: {e}")))?;
    config.validate()?;
    Ok(config)
}

/// Load from a file path.
pub fn load_run_config_file(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    load_run_config(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let config = load_run_config("", &[]).unwrap();
        assert_eq!(config.schedule.steps, 1000);
        assert_eq!(config.harness.subset_size, 2048);
        assert!(config.attack.is_none());
    }

    #[test]
    fn epsilon_fraction_syntax() {
        assert!((parse_epsilon("8/255").unwrap() - 8.0 / 255.0).abs() < 1e-15);
        assert!((parse_epsilon("0.03").unwrap() - 0.03).abs() < 1e-15);
        assert!(parse_epsilon("8over255").is_err());
        assert!(parse_epsilon("1/0").is_err());

        let config = load_run_config(
            "[attack]\nmode = \"preprocessor_blind\"\nepsilon = \"4/255\"\n",
            &[],
        )
        .unwrap();
        let attack = config.build_attack().unwrap().unwrap();
        assert!((attack.config.epsilon - 4.0 / 255.0).abs() < 1e-15);
        // default step size is eps/4
        assert!((attack.config.step_size - 1.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_epsilon_is_config_error_before_any_work() {
        let err = load_run_config("[attack]\nepsilon = \"8//255\"\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = load_run_config("[attack]\nepsilon = 1.5\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(load_run_config("unknown_key = 1\n", &[]).is_err());
        assert!(load_run_config("[schedule]\nbogus = 2\n", &[]).is_err());
    }

    #[test]
    fn overrides_win_over_file_values() {
        let config = load_run_config(
            "seed = 1\n[diffusion]\nt_frac = 0.5\n",
            &[
                ("seed".into(), "9".into()),
                ("diffusion.t_frac".into(), "0.25".into()),
                ("attack.epsilon".into(), "8/255".into()),
            ],
        )
        .unwrap();
        assert_eq!(config.seed, 9);
        assert!((config.diffusion.t_frac - 0.25).abs() < 1e-15);
        assert!(config.attack.is_some());
    }

    #[test]
    fn label_template_requires_labels() {
        let err = load_run_config(
            "[caption]\nprovider = \"label_template\"\ntemplate = \"a {label}\"\n",
            &[],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let config = load_run_config(
            "[attack]\nepsilon = \"8/255\"\nmode = \"bpda_eot\"\n[caption]\nprovider = \"constant\"\ntemplate = \"hi\"\n",
            &[],
        )
        .unwrap();
        let text = config.to_toml().unwrap();
        let back = load_run_config(&text, &[]).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn pretrained_denoiser_is_an_explicit_adapter_failure() {
        let config = load_run_config("[denoiser]\ntype = \"pretrained\"\n", &[]).unwrap();
        match config.build_denoiser() {
            Err(Error::AdapterFailure(_)) => {}
            Err(other) => panic!("expected adapter failure, got {other}"),
            Ok(_) => panic!("expected adapter failure, got a denoiser"),
        }
    }

    #[test]
    fn cache_env_resolves_relative_checkpoints() {
        // set/unset is process-global; keep this test self-contained
        std::env::set_var(CACHE_ENV, "/tmp/langpure-cache-test");
        let resolved = resolve_artifact_path("models/toy.json");
        assert_eq!(
            resolved,
            PathBuf::from("/tmp/langpure-cache-test/models/toy.json")
        );
        std::env::remove_var(CACHE_ENV);
        let resolved = resolve_artifact_path("models/toy.json");
        assert_eq!(resolved, PathBuf::from("models/toy.json"));
    }
}
