//! Flat `key = value` run configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are the run
//! settings listed in [`KEYS`]; unknown or repeated keys are errors. `levels`
//! sets the depth of both networks.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::training::RunConfig;

pub const KEYS: &[&str] = &[
    "scale",
    "iterations",
    "alpha",
    "seed",
    "lambda",
    "log_every",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "levels",
    "channels",
    "skip_channels",
    "kernel",
    "noise_channels",
    "ref_channels",
    "loc_channels",
];

/// Ordered `(key, value)` pairs.
pub type Settings = Vec<(String, String)>;

pub fn parse_config(text: &str) -> Result<Settings> {
    let mut out: Settings = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("line {}: expected `key = value`, got `{line}`", n + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(Error::InvalidConfig(format!("line {}: unknown key `{key}`", n + 1)));
        }
        if out.iter().any(|(k, _)| k == key) {
            return Err(Error::InvalidConfig(format!("line {}: duplicate key `{key}`", n + 1)));
        }
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}

pub fn load_config_file(path: impl AsRef<Path>) -> Result<Settings> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value `{value}` for `{key}`")))
}

pub fn apply_setting(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "scale" => cfg.scale = parse(key, value)?,
        "iterations" => cfg.iterations = parse(key, value)?,
        "alpha" => cfg.alpha = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "lambda" => cfg.lambda = parse(key, value)?,
        "log_every" => cfg.log_every = parse(key, value)?,
        "lr" => cfg.adam.lr = parse(key, value)?,
        "beta1" => cfg.adam.beta1 = parse(key, value)?,
        "beta2" => cfg.adam.beta2 = parse(key, value)?,
        "eps" => cfg.adam.eps = parse(key, value)?,
        "levels" => {
            let levels = parse(key, value)?;
            cfg.generator.levels = levels;
            cfg.reference.levels = levels;
        }
        "channels" => cfg.generator.channels = parse(key, value)?,
        "skip_channels" => cfg.generator.skip_channels = parse(key, value)?,
        "kernel" => cfg.generator.kernel = parse(key, value)?,
        "noise_channels" => cfg.generator.noise_channels = parse(key, value)?,
        "ref_channels" => cfg.reference.channels = parse(key, value)?,
        "loc_channels" => cfg.reference.loc_channels = parse(key, value)?,
        _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
    }
    Ok(())
}

/// Defaults, then file settings, then overrides; the result is validated.
pub fn resolve(file: &[(String, String)], overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (k, v) in file.iter().chain(overrides) {
        apply_setting(&mut cfg, k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Renders every key in config-file syntax; [`parse_config`] reads it back.
pub fn render_config(cfg: &RunConfig) -> String {
    let g = &cfg.generator;
    let r = &cfg.reference;
    let a = &cfg.adam;
    let values: [String; 17] = [
        cfg.scale.to_string(),
        cfg.iterations.to_string(),
        format!("{:?}", cfg.alpha),
        cfg.seed.to_string(),
        format!("{:?}", cfg.lambda),
        cfg.log_every.to_string(),
        format!("{:?}", a.lr),
        format!("{:?}", a.beta1),
        format!("{:?}", a.beta2),
        format!("{:?}", a.eps),
        g.levels.to_string(),
        g.channels.to_string(),
        g.skip_channels.to_string(),
        g.kernel.to_string(),
        g.noise_channels.to_string(),
        r.channels.to_string(),
        r.loc_channels.to_string(),
    ];
    KEYS.iter()
        .zip(values)
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> Settings {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn parses_comments_and_whitespace() {
        let s = parse_config("# run\n\n  scale=2\nlr = 1e-3  \n").unwrap();
        assert_eq!(s, kv(&[("scale", "2"), ("lr", "1e-3")]));
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(parse_config("learning_rate = 1").is_err());
        assert!(parse_config("seed = 1\nseed = 2").is_err());
        assert!(parse_config("seed 1").is_err());
        assert!(resolve(&kv(&[("seed", "x")]), &[]).is_err());
        assert!(resolve(&kv(&[("scale", "1")]), &[]).is_err());
    }

    #[test]
    fn three_layer_precedence() {
        let file = kv(&[("iterations", "500"), ("alpha", "0.05")]);
        let flags = kv(&[("iterations", "20")]);
        let cfg = resolve(&file, &flags).unwrap();
        assert_eq!(cfg.iterations, 20);
        assert_eq!(cfg.alpha, 0.05);
        assert_eq!(cfg.scale, 4);
        assert_eq!(resolve(&[], &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn levels_sets_both_networks() {
        let cfg = resolve(&kv(&[("levels", "2")]), &[]).unwrap();
        assert_eq!((cfg.generator.levels, cfg.reference.levels), (2, 2));
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::default();
        for (k, v) in [("lr", "0.00123"), ("seed", "18446744073709551615"), ("levels", "3"), ("alpha", "0")] {
            apply_setting(&mut cfg, k, v).unwrap();
        }
        let text = render_config(&cfg);
        assert_eq!(text.lines().count(), KEYS.len());
        assert_eq!(resolve(&parse_config(&text).unwrap(), &[]).unwrap(), cfg);
    }
}
