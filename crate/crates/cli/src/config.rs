//! Run configuration for `train` and `sweep`: defaults, then a flat
//! `key = value` config file, then command-line flags, with the later
//! sources winning. `TTLM_SEED` supplies the default seed.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ttlm_core::trainer::TrainConfig;

#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub train_ids: Option<PathBuf>,
    pub valid_ids: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub dataset: Option<String>,
    pub bptt: Option<usize>,
    pub batch: Option<usize>,
    pub clip: Option<f64>,
    pub hidden: Option<usize>,
    pub embed: Option<usize>,
    pub layers: Option<usize>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub asgd_nonmono: Option<usize>,
    pub asgd_start_epoch: Option<usize>,
    pub thinking_n: Option<usize>,
    pub train_mask_thinking: Option<bool>,
    pub tie_weights: Option<bool>,
}

/// Fully resolved configuration for one training run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train_ids: PathBuf,
    pub valid_ids: PathBuf,
    pub vocab: PathBuf,
    pub out_dir: PathBuf,
    pub dataset: String,
    pub train: TrainConfig,
}

pub fn parse_config_file(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected `key = value`", path.display(), lineno + 1);
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn take<T: std::str::FromStr>(map: &mut HashMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match map.remove(key) {
        None => Ok(None),
        Some(raw) => match raw.parse() {
            Ok(v) => Ok(Some(v)),
            Err(e) => bail!("config key {key} has invalid value {raw:?}: {e}"),
        },
    }
}

/// Merge precedence: flags > config file > TTLM_SEED (seed only) > defaults.
/// The embedding size defaults to the hidden size when not set anywhere.
pub fn resolve(config_file: Option<&Path>, flags: &TrainOverrides) -> Result<RunConfig> {
    let mut file = match config_file {
        Some(path) => parse_config_file(path)?,
        None => HashMap::new(),
    };

    let f_train_ids: Option<PathBuf> = take(&mut file, "train_ids")?;
    let f_valid_ids: Option<PathBuf> = take(&mut file, "valid_ids")?;
    let f_vocab: Option<PathBuf> = take(&mut file, "vocab")?;
    let f_out_dir: Option<PathBuf> = take(&mut file, "out_dir")?;
    let f_dataset: Option<String> = take(&mut file, "dataset")?;
    let f_bptt: Option<usize> = take(&mut file, "bptt")?;
    let f_batch: Option<usize> = take(&mut file, "batch")?;
    let f_clip: Option<f64> = take(&mut file, "clip")?;
    let f_hidden: Option<usize> = take(&mut file, "hidden")?;
    let f_embed: Option<usize> = take(&mut file, "embed")?;
    let f_layers: Option<usize> = take(&mut file, "layers")?;
    let f_lr: Option<f64> = take(&mut file, "lr")?;
    let f_epochs: Option<usize> = take(&mut file, "epochs")?;
    let f_seed: Option<u64> = take(&mut file, "seed")?;
    let f_nonmono: Option<usize> = take(&mut file, "asgd_nonmono")?;
    let f_asgd_start: Option<usize> = take(&mut file, "asgd_start_epoch")?;
    let f_thinking: Option<usize> = take(&mut file, "thinking_n")?;
    let f_train_mask: Option<bool> = take(&mut file, "train_mask_thinking")?;
    let f_tie: Option<bool> = take(&mut file, "tie_weights")?;
    if let Some(key) = file.keys().next() {
        bail!("unknown config key {key:?}");
    }

    let env_seed = match std::env::var("TTLM_SEED") {
        Ok(raw) => Some(raw.parse::<u64>().context("TTLM_SEED must be an integer")?),
        Err(_) => None,
    };

    let defaults = TrainConfig::default();
    let hidden = flags.hidden.or(f_hidden).unwrap_or(defaults.hidden);
    let train = TrainConfig {
        bptt_len: flags.bptt.or(f_bptt).unwrap_or(defaults.bptt_len),
        batch_lanes: flags.batch.or(f_batch).unwrap_or(defaults.batch_lanes),
        clip_norm: flags.clip.or(f_clip).unwrap_or(defaults.clip_norm),
        hidden,
        embed: flags.embed.or(f_embed).unwrap_or(hidden),
        layers: flags.layers.or(f_layers).unwrap_or(defaults.layers),
        learn_rate: flags.lr.or(f_lr).unwrap_or(defaults.learn_rate),
        max_epochs: flags.epochs.or(f_epochs).unwrap_or(defaults.max_epochs),
        seed: flags.seed.or(f_seed).or(env_seed).unwrap_or(defaults.seed),
        asgd_nonmono: flags.asgd_nonmono.or(f_nonmono).unwrap_or(defaults.asgd_nonmono),
        asgd_start_epoch: flags.asgd_start_epoch.or(f_asgd_start),
        thinking_n: flags.thinking_n.or(f_thinking).unwrap_or(0),
        train_mask_thinking: flags.train_mask_thinking.or(f_train_mask).unwrap_or(false),
        tie_weights: flags.tie_weights.or(f_tie).unwrap_or(false),
    };

    let train_ids = flags
        .train_ids
        .clone()
        .or(f_train_ids)
        .context("missing train_ids (set --train-ids or the config file)")?;
    let valid_ids = flags
        .valid_ids
        .clone()
        .or(f_valid_ids)
        .context("missing valid_ids (set --valid-ids or the config file)")?;
    let vocab = flags
        .vocab
        .clone()
        .or(f_vocab)
        .context("missing vocab (set --vocab or the config file)")?;
    let dataset = flags.dataset.clone().or(f_dataset).unwrap_or_else(|| {
        train_ids
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".to_string())
    });

    Ok(RunConfig {
        train_ids,
        valid_ids,
        vocab,
        out_dir: flags.out_dir.clone().or(f_out_dir).unwrap_or_else(|| PathBuf::from(".")),
        dataset,
        train,
    })
}
