//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` and blank lines are ignored. `backbone.variant`
//! selects a preset first; the other `backbone.*` keys then override it
//! wherever they appear in the file. `skge.route` sets both encoders.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use skge_core::backbone::BackboneConfig;
use skge_core::model::{ModelConfig, SdcSource};
use skge_core::skge::SkipRoute;
use skge_core::training::TrainConfig;

use crate::error::{CliError, Result};

pub const KEYS: &[&str] = &[
    "backbone.variant",
    "backbone.input_size",
    "backbone.patch",
    "backbone.window",
    "backbone.embed_dim",
    "backbone.depths",
    "backbone.heads",
    "backbone.mlp_ratio",
    "skge.route",
    "skge.route_a",
    "skge.route_b",
    "bev.size",
    "bev.resolution_m",
    "model.lidar",
    "model.hidden",
    "train.lr",
    "train.weight_decay",
    "train.batch_size",
    "train.patience_lr",
    "train.patience_stop",
    "train.max_epochs",
    "train.seed",
    "train.mgn",
    "train.sdc_source",
    "train.val_fraction",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// share of the dataset held out for validation
    pub val_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            val_fraction: 0.1,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CliError::usage(format!("config key {key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(CliError::usage(format!("config key {key}: expected true or false, got {v:?}"))),
    }
}

fn parse_list4(key: &str, v: &str) -> Result<[usize; 4]> {
    let items: Vec<usize> = v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| CliError::usage(format!("config key {key}: expected four comma-separated values")))
}

fn parse_route(key: &str, v: &str) -> Result<SkipRoute> {
    v.parse()
        .map_err(|e| CliError::usage(format!("config key {key}: {e}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("config line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(CliError::usage(format!("unknown config key {k}")));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(CliError::usage(format!("config key {k} given twice")));
            }
        }

        let mut cfg = RunConfig::default();
        if let Some(v) = entries.remove("backbone.variant") {
            cfg.model.backbone = BackboneConfig::variant(&v)?;
        }
        if let Some(v) = entries.remove("skge.route") {
            let r = parse_route("skge.route", &v)?;
            cfg.model.route_a = r.clone();
            cfg.model.route_b = r;
        }
        for (k, v) in &entries {
            let (k, v) = (k.as_str(), v.as_str());
            let m = &mut cfg.model;
            let t = &mut cfg.train;
            match k {
                "backbone.input_size" => m.backbone.input_size = parse(k, v)?,
                "backbone.patch" => m.backbone.patch_size = parse(k, v)?,
                "backbone.window" => m.backbone.window_size = parse(k, v)?,
                "backbone.embed_dim" => m.backbone.embed_dim = parse(k, v)?,
                "backbone.depths" => m.backbone.depths = parse_list4(k, v)?,
                "backbone.heads" => m.backbone.heads = parse_list4(k, v)?,
                "backbone.mlp_ratio" => m.backbone.mlp_ratio = parse(k, v)?,
                "skge.route_a" => m.route_a = parse_route(k, v)?,
                "skge.route_b" => m.route_b = parse_route(k, v)?,
                "bev.size" => m.bev.size = parse(k, v)?,
                "bev.resolution_m" => m.bev.resolution_m = parse(k, v)?,
                "model.lidar" => m.lidar = parse_bool(k, v)?,
                "model.hidden" => m.hidden = parse(k, v)?,
                "train.lr" => t.lr = parse(k, v)?,
                "train.weight_decay" => t.weight_decay = parse(k, v)?,
                "train.batch_size" => t.batch_size = parse(k, v)?,
                "train.patience_lr" => t.patience_lr = parse(k, v)?,
                "train.patience_stop" => t.patience_stop = parse(k, v)?,
                "train.max_epochs" => t.max_epochs = parse(k, v)?,
                "train.seed" => t.seed = parse(k, v)?,
                "train.mgn" => t.mgn = parse_bool(k, v)?,
                "train.sdc_source" => t.sdc_source = v.parse::<SdcSource>()?,
                "train.val_fraction" => cfg.val_fraction = parse(k, v)?,
                _ => unreachable!("key list and match arms disagree on {k}"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// `path` when given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(CliError::usage("train.lr must be positive"));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(CliError::usage("train.weight_decay must be non-negative"));
        }
        if t.batch_size == 0 {
            return Err(CliError::usage("train.batch_size must be positive"));
        }
        if t.patience_lr == 0 || t.patience_stop == 0 {
            return Err(CliError::usage("patience values must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(CliError::usage("train.val_fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    /// The configuration as it would be written back to a file.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let b = &m.backbone;
        let t = &self.train;
        let list = |v: &[usize; 4]| v.map(|x| x.to_string()).join(",");
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("backbone.variant", b.variant.clone());
        put("backbone.input_size", b.input_size.to_string());
        put("backbone.patch", b.patch_size.to_string());
        put("backbone.window", b.window_size.to_string());
        put("backbone.embed_dim", b.embed_dim.to_string());
        put("backbone.depths", list(&b.depths));
        put("backbone.heads", list(&b.heads));
        put("backbone.mlp_ratio", b.mlp_ratio.to_string());
        put("skge.route_a", m.route_a.to_string());
        put("skge.route_b", m.route_b.to_string());
        put("bev.size", m.bev.size.to_string());
        put("bev.resolution_m", m.bev.resolution_m.to_string());
        put("model.lidar", m.lidar.to_string());
        put("model.hidden", m.hidden.to_string());
        put("train.lr", t.lr.to_string());
        put("train.weight_decay", t.weight_decay.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.patience_lr", t.patience_lr.to_string());
        put("train.patience_stop", t.patience_stop.to_string());
        put("train.max_epochs", t.max_epochs.to_string());
        put("train.seed", t.seed.to_string());
        put("train.mgn", t.mgn.to_string());
        let src = match t.sdc_source {
            SdcSource::GroundTruth => "gt",
            SdcSource::Predicted => "pred",
        };
        put("train.sdc_source", src.to_string());
        put("train.val_fraction", self.val_fraction.to_string());
        s
    }
}

/// `SKGE_SEED` when set, `flag` otherwise.
pub fn effective_seed(flag: u64) -> Result<u64> {
    match std::env::var("SKGE_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("SKGE_SEED: cannot parse {v:?} as a seed"))),
        Err(std::env::VarError::NotPresent) => Ok(flag),
        Err(e) => Err(CliError::usage(format!("SKGE_SEED: {e}"))),
    }
}
