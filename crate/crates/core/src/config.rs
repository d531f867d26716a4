//! Flat `key = value` configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Lists are comma separated. Every key has a default; unknown and repeated
//! keys are errors. [`Config::to_text`] writes every key in a fixed order, so
//! `parse(to_text(c)) == c`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;
use core::str::FromStr;

use crate::data::{AugmentParams, SyntheticConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::prototypes::DEFAULT_TEMPLATE;
use crate::ram::Fusion;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    /// Learnable context vectors trained in the prompt stage.
    Learned,
    /// Fixed template, no prompt stage.
    Template,
    /// Prototypes loaded from a container file.
    Imported,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionMode {
    /// Prototype similarity masks.
    Rgm,
    /// Fixed horizontal stripes.
    Stripe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub regions: usize,
    pub class_names: Vec<String>,
    pub gamma: f64,
    pub context_len: usize,
    pub momentum: f64,
    pub tau: f64,
    pub margin: f64,
    pub ids_per_batch: usize,
    pub instances_per_id: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub feature_dim: usize,
    pub patch_size: usize,
    pub mixing_blocks: usize,
    pub token_mixing: bool,
    pub token_dim: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub epochs: usize,
    pub prompt_epochs: usize,
    pub prompt_lr: f64,
    /// Multiplies `epochs`, `prompt_epochs`, and the milestones.
    pub epoch_scale: f64,
    pub seed: u64,
    pub fusion: Fusion,
    pub prompt_mode: PromptMode,
    pub prompt_template: String,
    pub prototype_file: Option<String>,
    pub region_mode: RegionMode,
    pub use_dai: bool,
    pub use_iai: bool,
    /// Let the region loss reach `W_a` through the confidence weights.
    pub dai_grad: bool,
    /// Weight of the segmentation term during the joint stage.
    pub seg_weight: f64,
    pub augment: bool,
    pub aug_pad: usize,
    pub flip_prob: f64,
    pub erase_prob: f64,
    pub synthetic: SyntheticConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            regions: 4,
            class_names: ["head", "upper body", "lower body", "foot"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            gamma: 20.0,
            context_len: 8,
            momentum: 0.3,
            tau: 0.85,
            margin: 0.3,
            ids_per_batch: 16,
            instances_per_id: 4,
            image_height: 64,
            image_width: 32,
            feature_dim: 64,
            patch_size: 8,
            mixing_blocks: 2,
            token_mixing: true,
            token_dim: 32,
            lr: 5e-5,
            weight_decay: 5e-4,
            lr_milestones: alloc::vec![40, 70],
            lr_gamma: 0.1,
            epochs: 120,
            prompt_epochs: 30,
            prompt_lr: 5e-5,
            epoch_scale: 1.0,
            seed: 0,
            fusion: Fusion::Sum,
            prompt_mode: PromptMode::Learned,
            prompt_template: DEFAULT_TEMPLATE.to_string(),
            prototype_file: None,
            region_mode: RegionMode::Rgm,
            use_dai: true,
            use_iai: true,
            dai_grad: true,
            seg_weight: 1.0,
            augment: true,
            aug_pad: 10,
            flip_prob: 0.5,
            erase_prob: 0.5,
            synthetic: SyntheticConfig::default(),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

fn join<T: core::fmt::Display>(items: &[T]) -> String {
    let mut s = String::new();
    for (i, v) in items.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{v}");
    }
    s
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            let key = key.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("line {}: key `{key}` given twice", lineno + 1)));
            }
            cfg.set(key, value.trim())?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assigns one key; used by the parser and by sweeps.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let syn = &mut self.synthetic;
        match key {
            "regions" => self.regions = parse_num(key, value)?,
            "class_names" => {
                self.class_names = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "gamma" => self.gamma = parse_num(key, value)?,
            "context_len" => self.context_len = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "margin" => self.margin = parse_num(key, value)?,
            "ids_per_batch" => self.ids_per_batch = parse_num(key, value)?,
            "instances_per_id" => self.instances_per_id = parse_num(key, value)?,
            "image_height" => self.image_height = parse_num(key, value)?,
            "image_width" => self.image_width = parse_num(key, value)?,
            "feature_dim" => self.feature_dim = parse_num(key, value)?,
            "patch_size" => self.patch_size = parse_num(key, value)?,
            "mixing_blocks" => self.mixing_blocks = parse_num(key, value)?,
            "token_mixing" => self.token_mixing = parse_bool(key, value)?,
            "token_dim" => self.token_dim = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "lr_milestones" => self.lr_milestones = parse_list(key, value)?,
            "lr_gamma" => self.lr_gamma = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "prompt_epochs" => self.prompt_epochs = parse_num(key, value)?,
            "prompt_lr" => self.prompt_lr = parse_num(key, value)?,
            "epoch_scale" => self.epoch_scale = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "fusion" => {
                self.fusion = match value {
                    "sum" => Fusion::Sum,
                    "mean" => Fusion::Mean,
                    _ => return Err(Error::Config(format!("`fusion`: expected sum|mean, got `{value}`"))),
                }
            }
            "prompt_mode" => {
                self.prompt_mode = match value {
                    "learned" => PromptMode::Learned,
                    "template" => PromptMode::Template,
                    "imported" => PromptMode::Imported,
                    _ => {
                        return Err(Error::Config(format!(
                            "`prompt_mode`: expected learned|template|imported, got `{value}`"
                        )))
                    }
                }
            }
            "prompt_template" => self.prompt_template = value.to_string(),
            "prototype_file" => {
                self.prototype_file = (!value.is_empty()).then(|| value.to_string());
            }
            "region_mode" => {
                self.region_mode = match value {
                    "rgm" => RegionMode::Rgm,
                    "stripe" => RegionMode::Stripe,
                    _ => return Err(Error::Config(format!("`region_mode`: expected rgm|stripe, got `{value}`"))),
                }
            }
            "use_dai" => self.use_dai = parse_bool(key, value)?,
            "use_iai" => self.use_iai = parse_bool(key, value)?,
            "dai_grad" => self.dai_grad = parse_bool(key, value)?,
            "seg_weight" => self.seg_weight = parse_num(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "aug_pad" => self.aug_pad = parse_num(key, value)?,
            "flip_prob" => self.flip_prob = parse_num(key, value)?,
            "erase_prob" => self.erase_prob = parse_num(key, value)?,
            "syn_id_count" => syn.id_count = parse_num(key, value)?,
            "syn_images_per_id" => syn.images_per_id = parse_num(key, value)?,
            "syn_query_per_id" => syn.query_per_id = parse_num(key, value)?,
            "syn_gallery_per_id" => syn.gallery_per_id = parse_num(key, value)?,
            "syn_band_fractions" => syn.band_fractions = parse_list(key, value)?,
            "syn_occlusion_rate" => syn.occlusion_rate = parse_num(key, value)?,
            "syn_occluder_min" => syn.occluder_color_range.0 = parse_num(key, value)?,
            "syn_occluder_max" => syn.occluder_color_range.1 = parse_num(key, value)?,
            "syn_noise_std" => syn.noise_std = parse_num(key, value)?,
            "syn_cameras" => syn.cameras = parse_num(key, value)?,
            "syn_force_band" => {
                let b: usize = parse_num(key, value)?;
                syn.force_occluded_band = (b > 0).then_some(b);
            }
            "syn_seed" => syn.seed = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.regions != self.class_names.len() {
            return bad(format!(
                "regions = {} but {} class names given",
                self.regions,
                self.class_names.len()
            ));
        }
        if self.regions == 0 && self.region_mode == RegionMode::Rgm {
            return bad("the region generator needs at least one class".into());
        }
        if !(self.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.prompt_mode == PromptMode::Learned && self.context_len == 0 {
            return bad("learned prompts need context_len >= 1".into());
        }
        if self.prompt_mode == PromptMode::Imported && self.prototype_file.is_none() {
            return bad("prompt_mode = imported requires prototype_file".into());
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1]", self.momentum));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau {} outside (0, 1)", self.tau));
        }
        if !(self.epoch_scale > 0.0) {
            return bad("epoch_scale must be positive".into());
        }
        for p in [self.flip_prob, self.erase_prob, self.synthetic.occlusion_rate] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("probability {p} outside [0, 1]"));
            }
        }
        if self.synthetic.band_fractions.len() != self.regions && self.regions > 0 {
            return bad(format!(
                "{} synthetic band fractions for {} regions",
                self.synthetic.band_fractions.len(),
                self.regions
            ));
        }
        self.encoder().validate()
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: (self.image_height, self.image_width),
            patch: self.patch_size,
            dim: self.feature_dim,
            blocks: self.mixing_blocks,
            token_mixing: self.token_mixing,
        }
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.image_height, self.image_width)
    }

    fn scaled(&self, epochs: usize) -> usize {
        libm::round(epochs as f64 * self.epoch_scale) as usize
    }

    pub fn scaled_epochs(&self) -> usize {
        self.scaled(self.epochs)
    }

    pub fn scaled_prompt_epochs(&self) -> usize {
        self.scaled(self.prompt_epochs)
    }

    pub fn scaled_milestones(&self) -> Vec<usize> {
        self.lr_milestones.iter().map(|&m| self.scaled(m)).collect()
    }

    /// Augmentation parameters; `fill` is supplied by the caller from the
    /// dataset mean.
    pub fn augment_params(&self, fill: [f64; 3]) -> AugmentParams {
        AugmentParams {
            pad: self.aug_pad,
            flip_prob: self.flip_prob,
            erase_prob: self.erase_prob,
            fill,
            ..AugmentParams::default()
        }
    }

    /// Synthetic settings with the generator image size tied to the model's.
    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            image_size: self.image_size(),
            ..self.synthetic.clone()
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let syn = &self.synthetic;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("regions", self.regions.to_string());
        kv("class_names", self.class_names.join(","));
        kv("gamma", format!("{:?}", self.gamma));
        kv("context_len", self.context_len.to_string());
        kv("momentum", format!("{:?}", self.momentum));
        kv("tau", format!("{:?}", self.tau));
        kv("margin", format!("{:?}", self.margin));
        kv("ids_per_batch", self.ids_per_batch.to_string());
        kv("instances_per_id", self.instances_per_id.to_string());
        kv("image_height", self.image_height.to_string());
        kv("image_width", self.image_width.to_string());
        kv("feature_dim", self.feature_dim.to_string());
        kv("patch_size", self.patch_size.to_string());
        kv("mixing_blocks", self.mixing_blocks.to_string());
        kv("token_mixing", self.token_mixing.to_string());
        kv("token_dim", self.token_dim.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("lr_milestones", join(&self.lr_milestones));
        kv("lr_gamma", format!("{:?}", self.lr_gamma));
        kv("epochs", self.epochs.to_string());
        kv("prompt_epochs", self.prompt_epochs.to_string());
        kv("prompt_lr", format!("{:?}", self.prompt_lr));
        kv("epoch_scale", format!("{:?}", self.epoch_scale));
        kv("seed", self.seed.to_string());
        kv(
            "fusion",
            match self.fusion {
                Fusion::Sum => "sum",
                Fusion::Mean => "mean",
            }
            .into(),
        );
        kv(
            "prompt_mode",
            match self.prompt_mode {
                PromptMode::Learned => "learned",
                PromptMode::Template => "template",
                PromptMode::Imported => "imported",
            }
            .into(),
        );
        kv("prompt_template", self.prompt_template.clone());
        kv("prototype_file", self.prototype_file.clone().unwrap_or_default());
        kv(
            "region_mode",
            match self.region_mode {
                RegionMode::Rgm => "rgm",
                RegionMode::Stripe => "stripe",
            }
            .into(),
        );
        kv("use_dai", self.use_dai.to_string());
        kv("use_iai", self.use_iai.to_string());
        kv("dai_grad", self.dai_grad.to_string());
        kv("seg_weight", format!("{:?}", self.seg_weight));
        kv("augment", self.augment.to_string());
        kv("aug_pad", self.aug_pad.to_string());
        kv("flip_prob", format!("{:?}", self.flip_prob));
        kv("erase_prob", format!("{:?}", self.erase_prob));
        kv("syn_id_count", syn.id_count.to_string());
        kv("syn_images_per_id", syn.images_per_id.to_string());
        kv("syn_query_per_id", syn.query_per_id.to_string());
        kv("syn_gallery_per_id", syn.gallery_per_id.to_string());
        let fr: Vec<String> = syn.band_fractions.iter().map(|v| format!("{v:?}")).collect();
        kv("syn_band_fractions", fr.join(","));
        kv("syn_occlusion_rate", format!("{:?}", syn.occlusion_rate));
        kv("syn_occluder_min", format!("{:?}", syn.occluder_color_range.0));
        kv("syn_occluder_max", format!("{:?}", syn.occluder_color_range.1));
        kv("syn_noise_std", format!("{:?}", syn.noise_std));
        kv("syn_cameras", syn.cameras.to_string());
        kv("syn_force_band", syn.force_occluded_band.unwrap_or(0).to_string());
        kv("syn_seed", syn.seed.to_string());
        s
    }
}

/// Region vocabularies used when sweeping the number of classes.
pub fn vocabulary_for(regions: usize) -> Option<(Vec<String>, Vec<f64>)> {
    let (names, fractions): (&[&str], &[f64]) = match regions {
        2 => (&["upper body", "lower body"], &[0.5, 0.5]),
        3 => (&["head", "upper body", "lower body"], &[0.2, 0.4, 0.4]),
        4 => (&["head", "upper body", "lower body", "foot"], &[0.2, 0.35, 0.35, 0.1]),
        5 => (
            &["head", "upper body", "lower body", "foot", "bags"],
            &[0.15, 0.3, 0.3, 0.1, 0.15],
        ),
        _ => return None,
    };
    Some((
        names.iter().map(|s| s.to_string()).collect(),
        fractions.to_vec(),
    ))
}
