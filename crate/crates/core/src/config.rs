//! Plain-text `key=value` run configuration.
//!
//! Keys are grouped by section prefix (`model.`, `data.`, `alse.`,
//! `train.`, `sampler.`). Blank lines and lines starting with `#` are
//! ignored; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::alse::{PretrainConfig, SyncExpertConfig};
use crate::conditioning::ConditionKind;
use crate::data_synth::OracleSpec;
use crate::dit::ModelConfig;
use crate::error::{config_err, Result};
use crate::flow::{CfgScales, SamplerConfig, TimestepSampler};
use crate::runtime::TrainConfig;

/// A configuration section addressable by flat keys.
pub trait KeyValue {
    fn pairs(&self) -> Vec<(&'static str, String)>;
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e| config_err(format!("{key}: cannot parse `{value}`: {e}")))
}

pub(crate) fn unknown(key: &str) -> crate::Error {
    config_err(format!("unknown key `{key}`"))
}

/// Parses `a,b,c` or `a..b` (half-open) index lists.
pub(crate) fn parse_indices(key: &str, value: &str) -> Result<Vec<usize>> {
    let v = value.trim();
    if let Some((a, b)) = v.split_once("..") {
        let (a, b): (usize, usize) = (parse(key, a)?, parse(key, b)?);
        return Ok((a..b).collect());
    }
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s)).collect()
}

pub(crate) fn format_indices(v: &[usize]) -> String {
    if v.len() > 1 && v.windows(2).all(|w| w[1] == w[0] + 1) {
        return format!("{}..{}", v[0], v[v.len() - 1] + 1);
    }
    v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

impl KeyValue for ModelConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_four_stream", self.n_four_stream.to_string()),
            ("n_two_stream", self.n_two_stream.to_string()),
            ("n_single_stream", self.n_single_stream.to_string()),
            ("rope_base", self.rope_base.to_string()),
            ("keypoints", self.keypoints.to_string()),
            ("audio_dim", self.audio_dim.to_string()),
            ("n_emotions", self.n_emotions.to_string()),
            ("time_freq_dim", self.time_freq_dim.to_string()),
            ("ffn_ratio", self.ffn_ratio.to_string()),
            ("variant", self.variant.to_string()),
            ("init_seed", self.init_seed.to_string()),
            ("qk_bias_init", self.qk_bias_init.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "d_model" => self.d_model = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "n_four_stream" => self.n_four_stream = parse(key, value)?,
            "n_two_stream" => self.n_two_stream = parse(key, value)?,
            "n_single_stream" => self.n_single_stream = parse(key, value)?,
            "rope_base" => self.rope_base = parse(key, value)?,
            "keypoints" => self.keypoints = parse(key, value)?,
            "audio_dim" => self.audio_dim = parse(key, value)?,
            "n_emotions" => self.n_emotions = parse(key, value)?,
            "time_freq_dim" => self.time_freq_dim = parse(key, value)?,
            "ffn_ratio" => self.ffn_ratio = parse(key, value)?,
            "variant" => self.variant = value.trim().parse()?,
            "init_seed" => self.init_seed = parse(key, value)?,
            "qk_bias_init" => self.qk_bias_init = parse(key, value)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }
}

/// Sampling and streaming settings as they appear in a run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerSettings {
    pub steps: usize,
    pub seed: u64,
    pub cfg_audio: f64,
    pub cfg_emotion: f64,
    pub cfg_identity: f64,
    pub cfg_guide: f64,
    pub chunk_frames: usize,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            steps: 10,
            seed: 0,
            cfg_audio: 0.0,
            cfg_emotion: 0.0,
            cfg_identity: 0.0,
            cfg_guide: 0.0,
            chunk_frames: 100,
        }
    }
}

impl SamplerSettings {
    pub fn to_sampler(&self) -> Result<SamplerConfig> {
        let scales = CfgScales::from_pairs([
            (ConditionKind::Audio.as_str(), self.cfg_audio),
            (ConditionKind::Emotion.as_str(), self.cfg_emotion),
            (ConditionKind::Identity.as_str(), self.cfg_identity),
            (ConditionKind::Guide.as_str(), self.cfg_guide),
        ])?;
        if self.steps == 0 {
            return Err(config_err("sampler.steps must be >= 1"));
        }
        Ok(SamplerConfig { n_steps: self.steps, scales, seed: self.seed })
    }
}

impl KeyValue for SamplerSettings {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("cfg_audio", self.cfg_audio.to_string()),
            ("cfg_emotion", self.cfg_emotion.to_string()),
            ("cfg_identity", self.cfg_identity.to_string()),
            ("cfg_guide", self.cfg_guide.to_string()),
            ("chunk_frames", self.chunk_frames.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "steps" => self.steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "cfg_audio" => self.cfg_audio = parse(key, value)?,
            "cfg_emotion" => self.cfg_emotion = parse(key, value)?,
            "cfg_identity" => self.cfg_identity = parse(key, value)?,
            "cfg_guide" => self.cfg_guide = parse(key, value)?,
            "chunk_frames" => self.chunk_frames = parse(key, value)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }
}

pub(crate) fn format_t_sampler(s: &TimestepSampler) -> String {
    match s {
        TimestepSampler::Uniform => "uniform".into(),
        TimestepSampler::LogitNormal { mean, std } => format!("logit_normal:{mean}:{std}"),
        TimestepSampler::Fixed(t) => format!("fixed:{t}"),
    }
}

pub(crate) fn parse_t_sampler(key: &str, value: &str) -> Result<TimestepSampler> {
    let parts: Vec<&str> = value.trim().split(':').collect();
    match parts.as_slice() {
        ["uniform"] => Ok(TimestepSampler::Uniform),
        ["logit_normal"] => Ok(TimestepSampler::LogitNormal { mean: 0.0, std: 1.0 }),
        ["logit_normal", m, s] => Ok(TimestepSampler::LogitNormal { mean: parse(key, m)?, std: parse(key, s)? }),
        ["fixed", t] => Ok(TimestepSampler::Fixed(parse(key, t)?)),
        _ => Err(config_err(format!("{key}: expected uniform, logit_normal[:mean:std] or fixed:<t>"))),
    }
}

pub(crate) fn format_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

pub(crate) fn parse_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// Every tunable setting of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: OracleSpec,
    pub alse: SyncExpertConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub sampler: SamplerSettings,
}

const SECTIONS: [&str; 6] = ["model", "data", "alse", "pretrain", "train", "sampler"];

impl RunConfig {
    fn section(&mut self, name: &str) -> Option<&mut dyn KeyValue> {
        Some(match name {
            "model" => &mut self.model,
            "data" => &mut self.data,
            "alse" => &mut self.alse,
            "pretrain" => &mut self.pretrain,
            "train" => &mut self.train,
            "sampler" => &mut self.sampler,
            _ => return None,
        })
    }

    fn section_ref(&self, name: &str) -> &dyn KeyValue {
        match name {
            "model" => &self.model,
            "data" => &self.data,
            "alse" => &self.alse,
            "pretrain" => &self.pretrain,
            "train" => &self.train,
            _ => &self.sampler,
        }
    }

    /// Sets one `section.key`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key.trim().split_once('.').ok_or_else(|| unknown(key))?;
        let sec = self.section(section).ok_or_else(|| unknown(key))?;
        sec.set(field, value).map_err(|e| match e {
            crate::Error::Config(msg) if msg.starts_with("unknown key") => unknown(key),
            other => other,
        })
    }

    /// Applies a `key=value` assignment string.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) =
            assignment.split_once('=').ok_or_else(|| config_err(format!("expected key=value, got `{assignment}`")))?;
        self.set(k, v)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.apply(line).map_err(|e| config_err(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Flat `section.key → value` view.
    pub fn pairs(&self) -> BTreeMap<String, String> {
        section_pairs(self, &SECTIONS)
    }

    /// Full effective configuration, one `key=value` per line, sections in
    /// a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for name in SECTIONS {
            for (k, v) in self.section_ref(name).pairs() {
                s.push_str(&format!("{name}.{k}={v}\n"));
            }
        }
        s
    }
}

fn section_pairs(cfg: &RunConfig, names: &[&str]) -> BTreeMap<String, String> {
    names
        .iter()
        .flat_map(|name| cfg.section_ref(name).pairs().into_iter().map(move |(k, v)| (format!("{name}.{k}"), v)))
        .collect()
}

/// `model.*` pairs for a checkpoint manifest.
pub fn model_pairs(model: &ModelConfig) -> BTreeMap<String, String> {
    model.pairs().into_iter().map(|(k, v)| (format!("model.{k}"), v)).collect()
}

/// Rebuilds a model configuration from manifest pairs.
pub fn model_from_pairs(pairs: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    for (k, v) in pairs {
        if let Some(field) = k.strip_prefix("model.") {
            cfg.set(field, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
