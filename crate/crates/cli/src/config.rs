use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable supplying the seed when neither flag nor file does.
pub const SEED_ENV: &str = "STK_SEED";

/// Every setting a subcommand can take. Flags override the `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Checkpoint path (read by every command except `plant`).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// `byte`, or a word-file path.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokenizer: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l2: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f32>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_new_tokens: Option<usize>,

    /// Pairs JSONL.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<PathBuf>,
    /// Judge-label JSONL merged over computed labels.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge: Option<PathBuf>,
    /// Benchmark JSON.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bench: Option<PathBuf>,
    /// Paraphrase-group JSONL for similarity evaluation.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub groups: Option<PathBuf>,
    /// Probe report JSON.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    /// Edit plan JSON.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<PathBuf>,

    /// Primary output file.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heatmap: Option<PathBuf>,
    /// Test-set JSONL written by `build-bench`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_out: Option<PathBuf>,
    /// Synthetic pairs written by `plant`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs_out: Option<PathBuf>,
    /// Synthetic benchmark written by `plant`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bench_out: Option<PathBuf>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class: Option<usize>,
    /// Per-instance limit on enumerated training pairs.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cap: Option<usize>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_layers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    /// `LAYER:HEAD:TRIGGER:ANSWER`, layer counted from 1.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plant: Option<Vec<String>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_pairs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_instances: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_test: Option<usize>,

    /// `real`, `random_components` or `random_direction`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<String>,
    /// `k`, `alpha` or `ablation`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ks: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f32>>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($field:ident),* $(,)?) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field.clone(); } )*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config file {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config file {}: {e}", path.display())))
    }

    /// `self` with every field set in `flags` replaced.
    pub fn overlay(mut self, flags: &RunConfig) -> Self {
        overlay!(
            self,
            flags,
            model,
            tokenizer,
            seed,
            lr,
            epochs,
            l2,
            k,
            alpha,
            max_new_tokens,
            pairs,
            judge,
            bench,
            groups,
            report,
            plan,
            out,
            heatmap,
            test_out,
            pairs_out,
            bench_out,
            per_class,
            cap,
            n_layers,
            n_heads,
            d_model,
            plant,
            n_pairs,
            n_instances,
            n_test,
            ablation,
            mode,
            ks,
            alphas,
        );
        self
    }

    /// Fills the seed from the environment if still unset, then requires it.
    pub fn resolve_seed(&mut self) -> Result<u64, CliError> {
        if self.seed.is_none() {
            if let Ok(v) = std::env::var(SEED_ENV) {
                let seed = v.trim().parse().map_err(|_| {
                    CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
                })?;
                self.seed = Some(seed);
            }
        }
        self.seed.ok_or_else(|| {
            CliError::Usage(format!("a seed is required: pass --seed or set {SEED_ENV}"))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// The value of a required setting.
pub fn need<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
    value
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("missing required setting --{flag}")))
}

/// A required input path that must exist.
pub fn need_input<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf, CliError> {
    let p = need(value, flag)?;
    check_exists(p)?;
    Ok(p)
}

pub fn check_exists(p: &Path) -> Result<(), CliError> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "input file not found: {}",
            p.display()
        )))
    }
}
