//! Flat key-value run configuration.
//!
//! Settings resolve in three tiers: built-in defaults, then the `--config`
//! file, then explicit command-line flags (flags always win). The file is
//! one `key = value` pair per line with `#` comments; keys use the same
//! kebab-case spelling as the flags, so any invocation can be frozen into a
//! file verbatim.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use curlib::model::WeightTarget;
use curlib::pipeline::ArchSpec;
use curlib::selection::Strategy;

use crate::error::{CliError, CliResult};

/// Every key a config file may contain, across all subcommands. A shared
/// file can carry settings for a whole pipeline; each command reads only the
/// keys it understands, but unknown keys are rejected everywhere so typos
/// never pass silently.
const KNOWN_KEYS: &[&str] = &[
    // paths
    "model-dir",
    "compressed-dir",
    "out-dir",
    "stats",
    // shared pipeline settings
    "seed",
    "calib-size",
    "context-len",
    "eval-size",
    "layers",
    "auto-layers",
    "targets",
    "r-max",
    "rank-override",
    "strategy",
    // toy architecture (gen-model; size-report reads d-model/d-inter/n-layers/vocab)
    "n-layers",
    "d-model",
    "n-heads",
    "d-k",
    "n-kv-heads",
    "d-inter",
    "vocab",
    "max-seq",
    "d-kv",
    // teacher training
    "train-size",
    "train-steps",
    "train-lr",
    "train-batch",
    "train-warmup",
    // healing
    "heal-steps",
    "heal-batch",
    "heal-lr",
    "heal-warmup",
    "heal-alpha",
    "heal-temperature",
    // ablation
    "axis",
    "seeds",
    "rows",
    "cols",
    "rank",
    "caps",
    "sizes",
    "pick",
    // size report
    "preset",
];

/// Parsed config file (or an empty stand-in when no file was given).
#[derive(Debug)]
pub struct FileConfig {
    map: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn empty() -> Self {
        FileConfig {
            map: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "{}:{}: expected `key = value`, got `{raw}`",
                    path.display(),
                    idx + 1
                )));
            };
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CliError::Config(format!(
                    "{}:{}: unknown key `{key}`",
                    path.display(),
                    idx + 1
                )));
            }
            let mut value = value.trim();
            if value.len() >= 2 && value.starts_with('"') && value.ends_with('"') {
                value = &value[1..value.len() - 1];
            }
            if map.insert(key.clone(), value.to_string()).is_some() {
                return Err(CliError::Config(format!(
                    "{}:{}: duplicate key `{key}`",
                    path.display(),
                    idx + 1
                )));
            }
        }
        Ok(FileConfig { map })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        debug_assert!(KNOWN_KEYS.contains(&key), "unregistered key {key}");
        self.map.get(key).map(String::as_str)
    }

    pub fn usize_key(&self, key: &str) -> CliResult<Option<usize>> {
        self.raw(key).map(|v| parse_usize(key, v)).transpose()
    }

    pub fn u64_key(&self, key: &str) -> CliResult<Option<u64>> {
        self.raw(key).map(|v| parse_u64(key, v)).transpose()
    }

    pub fn f64_key(&self, key: &str) -> CliResult<Option<f64>> {
        self.raw(key).map(|v| parse_f64(key, v)).transpose()
    }

    pub fn path_key(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }

    pub fn string_key(&self, key: &str) -> Option<String> {
        self.raw(key).map(str::to_string)
    }

    pub fn list_key(&self, key: &str) -> CliResult<Option<Vec<usize>>> {
        self.raw(key).map(|v| parse_usize_list(key, v)).transpose()
    }

    pub fn strategy_key(&self, key: &str) -> CliResult<Option<Strategy>> {
        self.raw(key).map(parse_strategy).transpose()
    }

    pub fn targets_key(&self, key: &str) -> CliResult<Option<Vec<WeightTarget>>> {
        self.raw(key).map(parse_targets).transpose()
    }
}

pub fn parse_usize(key: &str, v: &str) -> CliResult<usize> {
    v.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: expected a non-negative integer, got `{v}`")))
}

pub fn parse_u64(key: &str, v: &str) -> CliResult<u64> {
    v.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: expected a non-negative integer, got `{v}`")))
}

pub fn parse_f64(key: &str, v: &str) -> CliResult<f64> {
    v.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: expected a number, got `{v}`")))
}

/// Comma-separated non-negative integers, e.g. `2,4,8`.
pub fn parse_usize_list(key: &str, v: &str) -> CliResult<Vec<usize>> {
    v.split(',')
        .map(|part| parse_usize(key, part))
        .collect()
}

pub fn parse_strategy(v: &str) -> CliResult<Strategy> {
    let v = v.trim();
    Strategy::ALL
        .iter()
        .copied()
        .find(|s| s.name() == v)
        .ok_or_else(|| {
            let known: Vec<&str> = Strategy::ALL.iter().map(|s| s.name()).collect();
            CliError::Config(format!(
                "unknown strategy `{v}` (known: {})",
                known.join(", ")
            ))
        })
}

/// Comma-separated subset of `query,key,gate`.
pub fn parse_targets(v: &str) -> CliResult<Vec<WeightTarget>> {
    let targets: Vec<WeightTarget> = v
        .split(',')
        .map(|part| match part.trim() {
            "query" => Ok(WeightTarget::Query),
            "key" => Ok(WeightTarget::Key),
            "gate" => Ok(WeightTarget::Gate),
            other => Err(CliError::Config(format!(
                "unknown target `{other}` (known: query, key, gate)"
            ))),
        })
        .collect::<CliResult<_>>()?;
    let mut seen = targets.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != targets.len() {
        return Err(CliError::Config(format!("targets list `{v}` repeats a target")));
    }
    Ok(targets)
}

pub const PRESET_NAMES: [&str; 4] = ["llama3.1-8b", "llama2-7b", "mistral-7b", "orca2-7b"];

/// Published dense dimensions of the architectures the size report knows.
/// No weights are involved; these exist purely for parameter arithmetic.
pub fn preset_arch(name: &str) -> CliResult<ArchSpec> {
    Ok(match name {
        "llama3.1-8b" => ArchSpec {
            d_model: 4096,
            d_kv: 1024,
            d_inter: 14336,
            n_layers: 32,
            vocab: 128_256,
        },
        // Orca 2 is a Llama 2 fine-tune, so the dimensions coincide.
        "llama2-7b" | "orca2-7b" => ArchSpec {
            d_model: 4096,
            d_kv: 4096,
            d_inter: 11008,
            n_layers: 32,
            vocab: 32_000,
        },
        "mistral-7b" => ArchSpec {
            d_model: 4096,
            d_kv: 1024,
            d_inter: 14336,
            n_layers: 32,
            vocab: 32_000,
        },
        _ => {
            return Err(CliError::UnknownPreset {
                name: name.to_string(),
            })
        }
    })
}
