//! Flat `key = value` configuration files.
//!
//! `#` starts a comment. Every [`FitConfig`] field has a key; unknown or
//! repeated keys are errors and absent keys keep their defaults.

use crate::error::{Error, Result};
use crate::fit::FitConfig;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

pub const CONFIG_KEYS: [&str; 21] = [
    "iterations",
    "step",
    "optimizer",
    "seed",
    "k",
    "sh_degree",
    "lambda",
    "cutoff",
    "grid",
    "tolerance",
    "channels",
    "noise",
    "sim_mode",
    "empty_bias",
    "scale_min",
    "scale_max",
    "beta1",
    "beta2",
    "epsilon",
    "weight_decay",
    "upsample",
];

fn value<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::invalid(format!("config line {line}: bad value `{raw}` for `{key}`")))
}

fn parse_grid(raw: &str, line: usize) -> Result<Option<[usize; 3]>> {
    if raw == "auto" {
        return Ok(None);
    }
    let parts: Vec<&str> = raw.split('x').collect();
    if parts.len() != 3 {
        return Err(Error::invalid(format!(
            "config line {line}: grid must be `auto` or XxYxZ, got `{raw}`"
        )));
    }
    let mut dims = [0; 3];
    for (d, p) in dims.iter_mut().zip(parts) {
        *d = value("grid", p.trim(), line)?;
    }
    Ok(Some(dims))
}

pub fn parse_config(text: &str) -> Result<FitConfig> {
    let mut c = FitConfig::default();
    let mut seen: Vec<&str> = Vec::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, raw)) = content.split_once('=') else {
            return Err(Error::invalid(format!("config line {line}: expected `key = value`")));
        };
        let (key, raw) = (key.trim(), raw.trim());
        let Some(&key) = CONFIG_KEYS.iter().find(|&&k| k == key) else {
            return Err(Error::invalid(format!("config line {line}: unknown key `{key}`")));
        };
        if seen.contains(&key) {
            return Err(Error::invalid(format!("config line {line}: duplicate key `{key}`")));
        }
        seen.push(key);
        match key {
            "iterations" => c.iterations = value(key, raw, line)?,
            "step" => c.step = value(key, raw, line)?,
            "optimizer" => {
                c.optimizer = raw
                    .parse()
                    .map_err(|e| Error::invalid(format!("config line {line}: {e}")))?
            }
            "seed" => c.seed = value(key, raw, line)?,
            "k" => {
                c.k = if raw == "auto" {
                    None
                } else {
                    Some(value(key, raw, line)?)
                }
            }
            "sh_degree" => c.sh_degree = value(key, raw, line)?,
            "lambda" => c.lambda = value(key, raw, line)?,
            "cutoff" => c.cutoff = value(key, raw, line)?,
            "grid" => c.grid = parse_grid(raw, line)?,
            "tolerance" => c.tolerance = value(key, raw, line)?,
            "channels" => c.channels = value(key, raw, line)?,
            "noise" => c.noise = value(key, raw, line)?,
            "sim_mode" => {
                c.sim_mode = raw
                    .parse()
                    .map_err(|e| Error::invalid(format!("config line {line}: {e}")))?
            }
            "empty_bias" => c.empty_bias = value(key, raw, line)?,
            "scale_min" => c.scale_min = value(key, raw, line)?,
            "scale_max" => c.scale_max = value(key, raw, line)?,
            "beta1" => c.beta1 = value(key, raw, line)?,
            "beta2" => c.beta2 = value(key, raw, line)?,
            "epsilon" => c.epsilon = value(key, raw, line)?,
            "weight_decay" => c.weight_decay = value(key, raw, line)?,
            "upsample" => c.upsample = value(key, raw, line)?,
            _ => unreachable!("key list and match arms agree"),
        }
    }
    c.validate()?;
    Ok(c)
}

/// Every key in canonical order. Floats use the shortest representation
/// that parses back to the same value.
pub fn render_config(c: &FitConfig) -> String {
    let mut out = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    put("iterations", c.iterations.to_string());
    put("step", c.step.to_string());
    put("optimizer", c.optimizer.to_string());
    put("seed", c.seed.to_string());
    put("k", c.k.map_or("auto".into(), |k| k.to_string()));
    put("sh_degree", c.sh_degree.to_string());
    put("lambda", c.lambda.to_string());
    put("cutoff", c.cutoff.to_string());
    put("grid", c.grid.map_or("auto".into(), |[x, y, z]| format!("{x}x{y}x{z}")));
    put("tolerance", c.tolerance.to_string());
    put("channels", c.channels.to_string());
    put("noise", c.noise.to_string());
    put("sim_mode", c.sim_mode.to_string());
    put("empty_bias", c.empty_bias.to_string());
    put("scale_min", c.scale_min.to_string());
    put("scale_max", c.scale_max.to_string());
    put("beta1", c.beta1.to_string());
    put("beta2", c.beta2.to_string());
    put("epsilon", c.epsilon.to_string());
    put("weight_decay", c.weight_decay.to_string());
    put("upsample", c.upsample.to_string());
    out
}

pub fn load_config(path: impl AsRef<Path>) -> Result<FitConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}
