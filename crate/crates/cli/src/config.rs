//! `key = value` run configuration; `#` starts a comment.

use std::collections::BTreeMap;

use unimp::train::TrainConfig;

use crate::CliError;

pub fn parse(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Usage(format!("config `{key}`: cannot parse `{v}`")))
}

fn size(key: &str, v: &str) -> Result<Option<usize>, CliError> {
    if v == "auto" {
        Ok(None)
    } else {
        value(key, v).map(Some)
    }
}

/// Applies every entry of `map` to `cfg`; unknown keys are errors.
pub fn apply(cfg: &mut TrainConfig, map: &BTreeMap<String, String>) -> Result<(), CliError> {
    for (k, v) in map {
        match k.as_str() {
            "chunk_size" => cfg.chunk_size = size(k, v)?,
            "batch_size" => cfg.batch_size = size(k, v)?,
            "epochs" => cfg.epochs = value(k, v)?,
            "lr" => cfg.lr = value(k, v)?,
            "kappa" => cfg.kappa = value(k, v)?,
            "delta" => cfg.delta = value(k, v)?,
            "seed" => cfg.seed = value(k, v)?,
            "layers" => cfg.layers = value(k, v)?,
            "dim" => cfg.dim = value(k, v)?,
            other => return Err(CliError::Usage(format!("unknown config key `{other}`"))),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines() {
        let m = parse("# run\nepochs = 3  # short\n\nlr=0.01\n").unwrap();
        assert_eq!(m["epochs"], "3");
        assert_eq!(m["lr"], "0.01");
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn apply_known_keys() {
        let mut cfg = TrainConfig::default();
        apply(&mut cfg, &parse("chunk_size = 16\nbatch_size = auto\nseed = 9").unwrap()).unwrap();
        assert_eq!(cfg.chunk_size, Some(16));
        assert_eq!(cfg.batch_size, None);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(parse("epochs 3").is_err());
        let mut cfg = TrainConfig::default();
        assert!(apply(&mut cfg, &parse("colour = red").unwrap()).is_err());
        assert!(apply(&mut cfg, &parse("epochs = many").unwrap()).is_err());
    }
}
