//! Flat `key = value` configuration files. Lines are `key = value`, blank,
//! or `#` comments; flags override file values by re-setting keys.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use crate::grpo::RLConfig;
use crate::model::{DecoderConfig, EncoderConfig};
use crate::scenegen::{default_priors, GenConfig};
use crate::tokenizer::{AttrSpec, NumericAttr, OrderingStrategy, TokenOrder, VocabLayout};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn new() -> Self {
        FlatConfig::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got {line:?}", idx + 1))?;
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(FlatConfig { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().with_context(|| format!("key {key}: bad float {v:?}")),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().with_context(|| format!("key {key}: bad integer {v:?}")),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().with_context(|| format!("key {key}: bad integer {v:?}")),
        }
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }
}

pub fn gen_config(cfg: &FlatConfig) -> Result<GenConfig> {
    let d = GenConfig::default();
    let out = GenConfig {
        half_extent: cfg.f64_or("half_extent", d.half_extent)?,
        kmin: cfg.usize_or("kmin", d.kmin)?,
        kmax: cfg.usize_or("kmax", d.kmax)?,
        categories: cfg.usize_or("categories", d.categories)?,
        priors: default_priors(),
        point_budget: cfg.usize_or("point_budget", d.point_budget)?,
        density_decay: cfg.f64_or("density_decay", d.density_decay)?,
        clutter_fraction: cfg.f64_or("clutter_fraction", d.clutter_fraction)?,
        velocity_sigma: cfg.f64_or("velocity_sigma", d.velocity_sigma)?,
    };
    out.validate()?;
    Ok(out)
}

fn attr_key(a: NumericAttr, field: &str) -> String {
    format!("vocab.{}.{}", a.name(), field)
}

pub fn vocab_layout(cfg: &FlatConfig) -> Result<VocabLayout> {
    let categories = cfg.usize_or("categories", 10)?;
    let token_order = match cfg.str_or("token_order", "class_first") {
        "class_first" => TokenOrder::ClassFirst,
        "class_middle" => TokenOrder::ClassMiddle,
        "class_last" => TokenOrder::ClassLast,
        other => bail!("token_order must be class_first|class_middle|class_last, got {other:?}"),
    };
    let standard = VocabLayout::standard(categories.max(1));
    let mut attrs = [AttrSpec { min: 0.0, width: 1.0, bins: 1 }; 9];
    for a in NumericAttr::ALL {
        let base = *standard.attr(a);
        attrs[a.index()] = AttrSpec {
            min: cfg.f64_or(&attr_key(a, "min"), base.min)?,
            width: cfg.f64_or(&attr_key(a, "width"), base.width)?,
            bins: cfg.usize_or(&attr_key(a, "bins"), base.bins)?,
        };
    }
    Ok(VocabLayout::new(categories, attrs, token_order))
}

pub fn layout_to_config(layout: &VocabLayout) -> FlatConfig {
    let mut cfg = FlatConfig::new();
    cfg.set("categories", layout.categories);
    cfg.set(
        "token_order",
        match layout.token_order {
            TokenOrder::ClassFirst => "class_first",
            TokenOrder::ClassMiddle => "class_middle",
            TokenOrder::ClassLast => "class_last",
        },
    );
    for a in NumericAttr::ALL {
        let spec = layout.attr(a);
        // 17 significant digits round-trip f64 exactly.
        cfg.set(&attr_key(a, "min"), format!("{:.17e}", spec.min));
        cfg.set(&attr_key(a, "width"), format!("{:.17e}", spec.width));
        cfg.set(&attr_key(a, "bins"), spec.bins);
    }
    cfg
}

pub fn encoder_config(cfg: &FlatConfig) -> Result<EncoderConfig> {
    let d = EncoderConfig::default();
    let out = EncoderConfig {
        bev_extent: cfg.f64_or("bev_extent", d.bev_extent)?,
        cell_size: cfg.f64_or("cell_size", d.cell_size)?,
        pillar_dim: cfg.usize_or("pillar_dim", d.pillar_dim)?,
        feature_dim: cfg.usize_or("feature_dim", d.feature_dim)?,
        mlp_depth: cfg.usize_or("mlp_depth", d.mlp_depth)?,
    };
    let _ = out.grid_side();
    Ok(out)
}

pub fn decoder_config(cfg: &FlatConfig, vocab_size: u32) -> Result<DecoderConfig> {
    let d = DecoderConfig::desk_scale(vocab_size);
    let out = DecoderConfig {
        layers: cfg.usize_or("layers", d.layers)?,
        heads: cfg.usize_or("heads", d.heads)?,
        model_dim: cfg.usize_or("model_dim", d.model_dim)?,
        ffn_dim: cfg.usize_or("ffn_dim", d.ffn_dim)?,
        vocab_size,
        t_max: cfg.usize_or("t_max", d.t_max)?,
        dropout: cfg.f64_or("dropout", d.dropout)?,
    };
    let _ = out.head_dim();
    Ok(out)
}

pub fn model_to_config(enc: &EncoderConfig, dec: &DecoderConfig) -> FlatConfig {
    let mut cfg = FlatConfig::new();
    cfg.set("bev_extent", format!("{:.17e}", enc.bev_extent));
    cfg.set("cell_size", format!("{:.17e}", enc.cell_size));
    cfg.set("pillar_dim", enc.pillar_dim);
    cfg.set("feature_dim", enc.feature_dim);
    cfg.set("mlp_depth", enc.mlp_depth);
    cfg.set("layers", dec.layers);
    cfg.set("heads", dec.heads);
    cfg.set("model_dim", dec.model_dim);
    cfg.set("ffn_dim", dec.ffn_dim);
    cfg.set("t_max", dec.t_max);
    cfg.set("dropout", format!("{:.17e}", dec.dropout));
    cfg
}

pub fn ordering_strategy(cfg: &FlatConfig) -> Result<OrderingStrategy> {
    let seed = cfg.u64_or("ordering_seed", 0)?;
    match cfg.str_or("ordering", "near_to_far") {
        "near_to_far" => Ok(OrderingStrategy::NearToFar),
        "random" => Ok(OrderingStrategy::Random(seed)),
        "point_count" => Ok(OrderingStrategy::PointCountDescending),
        other => bail!("ordering must be near_to_far|random|point_count, got {other:?}"),
    }
}

pub fn ordering_to_keys(cfg: &mut FlatConfig, ordering: OrderingStrategy) {
    match ordering {
        OrderingStrategy::NearToFar => cfg.set("ordering", "near_to_far"),
        OrderingStrategy::Random(seed) => {
            cfg.set("ordering", "random");
            cfg.set("ordering_seed", seed);
        }
        OrderingStrategy::PointCountDescending => cfg.set("ordering", "point_count"),
    }
}

pub fn train_config(cfg: &FlatConfig, seed: u64) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        epochs: cfg.usize_or("epochs", d.epochs)?,
        batch_size: cfg.usize_or("batch_size", d.batch_size)?,
        base_lr: cfg.f64_or("lr", d.base_lr)?,
        weight_decay: cfg.f64_or("weight_decay", d.weight_decay)?,
        warmup_fraction: cfg.f64_or("warmup_fraction", d.warmup_fraction)?,
        seed,
        ordering: ordering_strategy(cfg)?,
        freeze_encoder_steps: cfg.usize_or("freeze_encoder_steps", d.freeze_encoder_steps)?,
        checkpoint_every: cfg.usize_or("checkpoint_every", d.checkpoint_every)?,
        metrics_path: cfg.get("metrics").map(Into::into),
    })
}

pub fn rl_config(cfg: &FlatConfig, seed: u64) -> Result<RLConfig> {
    let d = RLConfig::default();
    let out = RLConfig {
        group_size: cfg.usize_or("group_size", d.group_size)?,
        clip_eps: cfg.f64_or("clip_eps", d.clip_eps)?,
        kl_beta: cfg.f64_or("kl_beta", d.kl_beta)?,
        temperature: cfg.f64_or("temperature", d.temperature)?,
        lr: cfg.f64_or("lr", d.lr)?,
        batch_scenes: cfg.usize_or("batch_scenes", d.batch_scenes)?,
        steps: cfg.usize_or("steps", d.steps)?,
        seed,
        metrics_path: cfg.get("metrics").map(Into::into),
    };
    out.validate()?;
    Ok(out)
}

/// Layouts must round-trip through config text exactly, including the
/// full-circle yaw width.
pub fn standard_layout_roundtrips() -> bool {
    let layout = VocabLayout::standard(10);
    let text = layout_to_config(&layout).to_text();
    match FlatConfig::parse(&text).and_then(|c| vocab_layout(&c)) {
        Ok(back) => back == layout && (back.attr(NumericAttr::Yaw).width - 2.0 * PI / 125.0).abs() == 0.0,
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let cfg = FlatConfig::parse("# comment\nepochs = 5\n\nlr = 0.002\n").unwrap();
        assert_eq!(cfg.usize_or("epochs", 1).unwrap(), 5);
        assert_eq!(cfg.f64_or("lr", 0.0).unwrap(), 0.002);
        assert_eq!(cfg.usize_or("missing", 7).unwrap(), 7);
        let mut cfg = cfg;
        cfg.set("epochs", 9);
        assert_eq!(cfg.usize_or("epochs", 1).unwrap(), 9);
        assert!(FlatConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn layout_round_trips_through_text() {
        assert!(standard_layout_roundtrips());
        let mut layout = VocabLayout::standard(7);
        layout.token_order = TokenOrder::ClassMiddle;
        let text = layout_to_config(&layout).to_text();
        let back = vocab_layout(&FlatConfig::parse(&text).unwrap()).unwrap();
        assert_eq!(back, layout);
    }

    #[test]
    fn model_configs_round_trip() {
        let enc = EncoderConfig::default();
        let dec = DecoderConfig::desk_scale(6818);
        let text = model_to_config(&enc, &dec).to_text();
        let cfg = FlatConfig::parse(&text).unwrap();
        assert_eq!(encoder_config(&cfg).unwrap(), enc);
        assert_eq!(decoder_config(&cfg, 6818).unwrap(), dec);
    }

    #[test]
    fn ordering_keys_round_trip() {
        for ordering in [
            OrderingStrategy::NearToFar,
            OrderingStrategy::Random(42),
            OrderingStrategy::PointCountDescending,
        ] {
            let mut cfg = FlatConfig::new();
            ordering_to_keys(&mut cfg, ordering);
            assert_eq!(ordering_strategy(&cfg).unwrap(), ordering);
        }
    }
}
