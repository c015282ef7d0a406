//! Flat `key = value` run configuration.
//!
//! Resolution order: profile defaults, then the config file, then
//! `--set` overrides. Unknown keys are rejected. The resolved snapshot
//! lists every key, so replaying it reproduces the run.

use std::path::Path;

use crate::data::SynthMode;
use crate::decoder::Decoding;
use crate::encoders::MissingNote;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, NoteFusion};
use crate::objectives::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    PaperScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoteSource {
    BuiltIn,
    File,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Input JSONL; empty means the run directory's synthetic cohort.
    pub path: String,
    pub synth_admissions: usize,
    pub synth_mode: SynthMode,
    pub vocab_top_k: usize,
    pub n_buckets: usize,
    pub split: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoteConfig {
    pub source: NoteSource,
    pub file: String,
    pub missing: MissingNote,
}

/// Optimiser, schedule, batching and unfreezing settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub micro_batch: usize,
    pub accum_steps: usize,
    pub pretrain_epochs: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub lr_backbone: f64,
    pub lr_scratch: f64,
    pub pretrain_patience: usize,
    pub finetune_batch: usize,
    pub finetune_epochs: usize,
    pub finetune_warmup_steps: usize,
    pub ft_lr_backbone: f64,
    pub ft_lr_scratch: f64,
    pub finetune_patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub freeze_decoder_epochs: usize,
    pub unfreeze_top_layers: usize,
    pub unfreeze_all_epoch: usize,
    pub text_encoder_unfreeze_epoch: usize,
    /// Batch norm normalises with batch statistics while training.
    pub bn_batch_stats: bool,
    /// Checkpoint to start from; empty for a fresh initialisation.
    pub init_checkpoint: String,
    pub init_heads_fresh: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub bootstrap: usize,
    pub generate: bool,
    /// Admissions to generate for (0 = all).
    pub generate_limit: usize,
    pub max_gen_len: usize,
    pub decoding: Decoding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub note: NoteConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            seed: 7,
            model: ModelConfig::desk(),
            data: DataConfig {
                path: String::new(),
                synth_admissions: 2000,
                synth_mode: SynthMode::Standard,
                vocab_top_k: 1000,
                n_buckets: 8,
                split: [0.70, 0.15, 0.15],
            },
            note: NoteConfig {
                source: NoteSource::BuiltIn,
                file: String::new(),
                missing: MissingNote::Zero,
            },
            train: TrainConfig {
                micro_batch: 2,
                accum_steps: 4,
                pretrain_epochs: 5,
                total_steps: 2000,
                warmup_steps: 50,
                lr_backbone: 2e-4,
                lr_scratch: 1e-3,
                pretrain_patience: 2,
                finetune_batch: 16,
                finetune_epochs: 10,
                finetune_warmup_steps: 20,
                ft_lr_backbone: 1e-4,
                ft_lr_scratch: 5e-4,
                finetune_patience: 3,
                beta1: 0.9,
                beta2: 0.999,
                adam_eps: 1e-8,
                weight_decay: 0.01,
                weights: LossWeights::default(),
                freeze_decoder_epochs: 2,
                unfreeze_top_layers: 6,
                unfreeze_all_epoch: 6,
                text_encoder_unfreeze_epoch: 3,
                bn_batch_stats: true,
                init_checkpoint: String::new(),
                init_heads_fresh: true,
            },
            eval: EvalConfig {
                bootstrap: 1000,
                generate: true,
                generate_limit: 50,
                max_gen_len: 128,
                decoding: Decoding::Greedy,
            },
        }
    }

    /// Hyperparameters at the published scale.
    pub fn paper_scale() -> Self {
        let mut c = Self::desk();
        c.profile = Profile::PaperScale;
        c.model = ModelConfig::paper_scale();
        c.data.vocab_top_k = 10_000;
        c.train.total_steps = 50_000;
        c.train.warmup_steps = 1000;
        c.train.ft_lr_backbone = 1e-5;
        c.train.ft_lr_scratch = 5e-5;
        c.eval.max_gen_len = 256;
        c.eval.generate_limit = 0;
        c
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::PaperScale => Self::paper_scale(),
        }
    }

    /// Defaults ← `text` ← `overrides` (each `key=value`).
    pub fn resolve(text: &str, overrides: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, found `{line}`"),
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override `{o}` is not key=value")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let profile = match pairs.iter().rev().find(|(k, _)| k == "profile") {
            Some((_, v)) => parse_profile(v)?,
            None => Profile::Desk,
        };
        let mut cfg = Self::for_profile(profile);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::resolve(&text, overrides)
    }

    /// Every key with its resolved value, one per line.
    pub fn snapshot(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.train.weights
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        let pos = |key: &str, v: usize| if v == 0 { Err(Error::config(key, "must be positive")) } else { Ok(()) };
        pos("train.micro_batch", t.micro_batch)?;
        pos("train.accum_steps", t.accum_steps)?;
        pos("train.finetune_batch", t.finetune_batch)?;
        pos("train.finetune_epochs", t.finetune_epochs)?;
        pos("data.vocab_top_k", self.data.vocab_top_k)?;
        pos("data.n_buckets", self.data.n_buckets)?;
        pos("data.synth_admissions", self.data.synth_admissions)?;
        pos("eval.bootstrap", self.eval.bootstrap)?;
        if t.total_steps <= t.warmup_steps {
            return Err(Error::config("train.total_steps", "must exceed train.warmup_steps"));
        }
        for (key, v) in [("train.beta1", t.beta1), ("train.beta2", t.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        let nonneg = [
            ("train.lr_backbone", t.lr_backbone),
            ("train.lr_scratch", t.lr_scratch),
            ("train.ft_lr_backbone", t.ft_lr_backbone),
            ("train.ft_lr_scratch", t.ft_lr_scratch),
            ("train.weight_decay", t.weight_decay),
            ("train.lambda_mfp", t.weights.lambda_mfp),
            ("train.lambda_ntp", t.weights.lambda_ntp),
            ("train.focal_gamma", t.weights.focal_gamma),
        ];
        for (key, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a finite nonnegative number"));
            }
        }
        if t.adam_eps <= 0.0 {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        for (key, w) in ["train.w_hf", "train.w_t2dm", "train.w_readmit"].iter().zip(t.weights.task) {
            if w <= 0.0 {
                return Err(Error::config(*key, "task weights must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&t.weights.focal_alpha) {
            return Err(Error::config("train.focal_alpha", "must lie in [0, 1]"));
        }
        let s = self.data.split;
        if s.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("data.split_train", "split fractions must lie in [0, 1] and sum to 1"));
        }
        if t.unfreeze_all_epoch <= t.freeze_decoder_epochs {
            return Err(Error::config("train.unfreeze_all_epoch", "must come after the frozen epochs"));
        }
        if self.note.source == NoteSource::File && self.note.file.is_empty() {
            return Err(Error::config("note.file", "required when note.source = file"));
        }
        Ok(())
    }
}

fn parse_profile(v: &str) -> Result<Profile> {
    match v {
        "desk" => Ok(Profile::Desk),
        "paper-scale" => Ok(Profile::PaperScale),
        _ => Err(Error::config("profile", format!("expected desk or paper-scale, found `{v}`"))),
    }
}

/// Text form of one configuration value.
trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

impl ConfigValue for usize {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for bool {
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "true" | "on" | "1" => Some(true),
            "false" | "off" | "0" => Some(false),
            _ => None,
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse_value(s: &str) -> Option<Self> {
        Some(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for Profile {
    fn parse_value(s: &str) -> Option<Self> {
        parse_profile(s).ok()
    }
    fn render(&self) -> String {
        match self {
            Profile::Desk => "desk",
            Profile::PaperScale => "paper-scale",
        }
        .into()
    }
}

impl ConfigValue for NoteFusion {
    fn parse_value(s: &str) -> Option<Self> {
        NoteFusion::parse(s)
    }
    fn render(&self) -> String {
        self.as_str().into()
    }
}

impl ConfigValue for SynthMode {
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "standard" => Some(SynthMode::Standard),
            "final_event" => Some(SynthMode::FinalEvent),
            _ => None,
        }
    }
    fn render(&self) -> String {
        match self {
            SynthMode::Standard => "standard",
            SynthMode::FinalEvent => "final_event",
        }
        .into()
    }
}

impl ConfigValue for NoteSource {
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "builtin" => Some(NoteSource::BuiltIn),
            "file" => Some(NoteSource::File),
            _ => None,
        }
    }
    fn render(&self) -> String {
        match self {
            NoteSource::BuiltIn => "builtin",
            NoteSource::File => "file",
        }
        .into()
    }
}

impl ConfigValue for MissingNote {
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "error" => Some(MissingNote::Error),
            "zero" => Some(MissingNote::Zero),
            _ => None,
        }
    }
    fn render(&self) -> String {
        match self {
            MissingNote::Error => "error",
            MissingNote::Zero => "zero",
        }
        .into()
    }
}

impl ConfigValue for Decoding {
    fn parse_value(s: &str) -> Option<Self> {
        if s == "greedy" {
            return Some(Decoding::Greedy);
        }
        s.strip_prefix("topk:").and_then(|k| k.parse().ok()).filter(|&k| k > 0).map(Decoding::TopK)
    }
    fn render(&self) -> String {
        match self {
            Decoding::Greedy => "greedy".into(),
            Decoding::TopK(k) => format!("topk:{k}"),
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => [$($path:tt)+];)*) => {
        impl RunConfig {
            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$($path)+ = ConfigValue::parse_value(value)
                            .ok_or_else(|| Error::config(key, format!("cannot parse `{value}`")))?;
                    })*
                    _ => return Err(Error::config(key, "unknown key")),
                }
                Ok(())
            }

            /// All keys in a fixed order with rendered values.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($path)+.render()),)*]
            }

            pub fn keys() -> &'static [&'static str] {
                &[$($key,)*]
            }
        }
    };
}

config_keys! {
    "profile" => [profile];
    "seed" => [seed];
    "model.seq_len" => [model.seq_len];
    "model.conv1_channels" => [model.conv1_channels];
    "model.d_model" => [model.d_model];
    "model.enc_layers" => [model.enc_layers];
    "model.enc_heads" => [model.enc_heads];
    "model.enc_ffn" => [model.enc_ffn];
    "model.note_dim" => [model.note_dim];
    "model.note_max_tokens" => [model.note_max_tokens];
    "model.note_fusion" => [model.note_fusion];
    "model.dec_layers" => [model.dec_layers];
    "model.self_heads" => [model.self_heads];
    "model.cross_heads" => [model.cross_heads];
    "model.dec_ffn" => [model.dec_ffn];
    "model.vocab" => [model.vocab];
    "model.max_len" => [model.max_len];
    "model.dropout" => [model.dropout];
    "data.path" => [data.path];
    "data.synth_admissions" => [data.synth_admissions];
    "data.synth_mode" => [data.synth_mode];
    "data.vocab_top_k" => [data.vocab_top_k];
    "data.n_buckets" => [data.n_buckets];
    "data.split_train" => [data.split[0]];
    "data.split_val" => [data.split[1]];
    "data.split_test" => [data.split[2]];
    "note.source" => [note.source];
    "note.file" => [note.file];
    "note.missing" => [note.missing];
    "train.micro_batch" => [train.micro_batch];
    "train.accum_steps" => [train.accum_steps];
    "train.pretrain_epochs" => [train.pretrain_epochs];
    "train.total_steps" => [train.total_steps];
    "train.warmup_steps" => [train.warmup_steps];
    "train.lr_backbone" => [train.lr_backbone];
    "train.lr_scratch" => [train.lr_scratch];
    "train.pretrain_patience" => [train.pretrain_patience];
    "train.finetune_batch" => [train.finetune_batch];
    "train.finetune_epochs" => [train.finetune_epochs];
    "train.finetune_warmup_steps" => [train.finetune_warmup_steps];
    "train.ft_lr_backbone" => [train.ft_lr_backbone];
    "train.ft_lr_scratch" => [train.ft_lr_scratch];
    "train.finetune_patience" => [train.finetune_patience];
    "train.beta1" => [train.beta1];
    "train.beta2" => [train.beta2];
    "train.adam_eps" => [train.adam_eps];
    "train.weight_decay" => [train.weight_decay];
    "train.lambda_mfp" => [train.weights.lambda_mfp];
    "train.lambda_ntp" => [train.weights.lambda_ntp];
    "train.w_hf" => [train.weights.task[0]];
    "train.w_t2dm" => [train.weights.task[1]];
    "train.w_readmit" => [train.weights.task[2]];
    "train.focal_gamma" => [train.weights.focal_gamma];
    "train.focal_alpha" => [train.weights.focal_alpha];
    "train.freeze_decoder_epochs" => [train.freeze_decoder_epochs];
    "train.unfreeze_top_layers" => [train.unfreeze_top_layers];
    "train.unfreeze_all_epoch" => [train.unfreeze_all_epoch];
    "train.text_encoder_unfreeze_epoch" => [train.text_encoder_unfreeze_epoch];
    "train.bn_batch_stats" => [train.bn_batch_stats];
    "train.init_checkpoint" => [train.init_checkpoint];
    "train.init_heads_fresh" => [train.init_heads_fresh];
    "eval.bootstrap" => [eval.bootstrap];
    "eval.generate" => [eval.generate];
    "eval.generate_limit" => [eval.generate_limit];
    "eval.max_gen_len" => [eval.max_gen_len];
    "eval.decoding" => [eval.decoding];
}
