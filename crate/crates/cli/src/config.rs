//! Plain-text `key=value` configuration files.
//!
//! Lines are `key = value` with optional whitespace; `#` starts a comment
//! line and blank lines are skipped. Keys must belong to the command's
//! schema, appear at most once, and parse to the field's type. Values from
//! a file override built-in defaults and are themselves overridden by
//! command-line flags.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

use addrloc_core::align::GeoTarget;
use addrloc_core::synthcity::CityConfig;
use addrloc_core::trainer::TrainConfig;

#[derive(Debug)]
pub struct KvEntry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Parses a key=value file into ordered entries, rejecting malformed lines
/// and duplicate keys.
pub fn parse_kv(path: &Path) -> Result<Vec<KvEntry>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let mut entries: Vec<KvEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            bail!("{}:{line}: expected key=value, got {trimmed:?}", path.display());
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            bail!("{}:{line}: empty key or value", path.display());
        }
        if entries.iter().any(|e| e.key == key) {
            bail!("{}:{line}: duplicate key {key:?}", path.display());
        }
        entries.push(KvEntry { line, key, value });
    }
    Ok(entries)
}

fn parse_val<T: FromStr>(path: &Path, e: &KvEntry) -> Result<T>
where
    T::Err: Display,
{
    e.value.parse().map_err(|err| {
        anyhow::anyhow!(
            "{}:{}: bad value for {}: {err}",
            path.display(),
            e.line,
            e.key
        )
    })
}

/// Applies a city config file on top of `cfg`.
pub fn apply_city_config(cfg: &mut CityConfig, path: &Path) -> Result<()> {
    for e in parse_kv(path)? {
        match e.key.as_str() {
            "rows" => cfg.rows = parse_val(path, &e)?,
            "cols" => cfg.cols = parse_val(path, &e)?,
            "spacing_m" => cfg.spacing_m = parse_val(path, &e)?,
            "locations_per_segment" => cfg.locations_per_segment = parse_val(path, &e)?,
            "views_per_location" => cfg.views_per_location = parse_val(path, &e)?,
            "feature_dim" => cfg.feature_dim = parse_val(path, &e)?,
            "noise_sigma" => cfg.noise_sigma = parse_val(path, &e)?,
            "signature_scale" => cfg.signature_scale = parse_val(path, &e)?,
            "seed" => cfg.seed = parse_val(path, &e)?,
            "city_tag" => cfg.city_tag = e.value.clone(),
            other => bail!(
                "{}:{}: unknown city config key {other:?}",
                path.display(),
                e.line
            ),
        }
    }
    Ok(())
}

/// Applies a training config file on top of `cfg`.
pub fn apply_train_config(cfg: &mut TrainConfig, path: &Path) -> Result<()> {
    for e in parse_kv(path)? {
        match e.key.as_str() {
            "epochs" => cfg.epochs = parse_val(path, &e)?,
            "batch_size" => cfg.batch_size = parse_val(path, &e)?,
            "lr_start" => cfg.lr_start = parse_val(path, &e)?,
            "lr_end" => cfg.lr_end = parse_val(path, &e)?,
            "lr_scale" => cfg.lr_scale = parse_val(path, &e)?,
            "adam_beta1" => cfg.adam_beta1 = parse_val(path, &e)?,
            "adam_beta2" => cfg.adam_beta2 = parse_val(path, &e)?,
            "adam_eps" => cfg.adam_eps = parse_val(path, &e)?,
            "alpha" => cfg.weights.alpha = parse_val(path, &e)?,
            "beta" => cfg.weights.beta = parse_val(path, &e)?,
            "gamma" => cfg.weights.gamma = parse_val(path, &e)?,
            "use_address" => cfg.toggles.address = parse_val(path, &e)?,
            "use_caption" => cfg.toggles.caption = parse_val(path, &e)?,
            "use_geography" => cfg.toggles.geography = parse_val(path, &e)?,
            "geo_target" => {
                cfg.geo_target = GeoTarget::from_str(&e.value).map_err(|err| {
                    anyhow::anyhow!("{}:{}: {err}", path.display(), e.line)
                })?
            }
            "freeze_image" => cfg.freeze_image = parse_val(path, &e)?,
            "freeze_text" => cfg.freeze_text = parse_val(path, &e)?,
            "embed_dim" => cfg.embed_dim = parse_val(path, &e)?,
            "token_dim" => cfg.token_dim = parse_val(path, &e)?,
            "seed" => cfg.seed = parse_val(path, &e)?,
            other => bail!(
                "{}:{}: unknown train config key {other:?}",
                path.display(),
                e.line
            ),
        }
    }
    Ok(())
}
