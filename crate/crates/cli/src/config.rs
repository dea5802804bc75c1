use std::path::{Path, PathBuf};

use agrifuse::models::{GbdtParams, LstmParams, ModelKind};
use agrifuse::pipeline::PipelineConfig;
use agrifuse::synth::SynthConfig;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Declarative run configuration. Every key has a default, so an empty JSON
/// object (or no file at all) is the reference setup.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub k: usize,
    pub model: ModelKind,
    pub modalities: String,
    pub crop: String,
    pub country: String,
    pub pipeline: PipelineConfig,
    pub gbdt: GbdtParams,
    pub lstm: LstmParams,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            k: 10,
            model: ModelKind::Gbdt,
            modalities: "s2,weather,soil,dem".into(),
            crop: "wheat".into(),
            country: "synthetic".into(),
            pipeline: PipelineConfig::default(),
            gbdt: GbdtParams::default(),
            lstm: LstmParams::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let bytes = std::fs::read(path).with_context(|| format!("cli: reading config {}", path.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("cli: parsing config {}", path.display()))
    }

    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Written next to every output so a run directory describes itself.
#[derive(Debug, Serialize, Deserialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: Vec<PathBuf>,
    pub decisions: serde_json::Value,
    pub config: RunConfig,
}

impl Metadata {
    pub fn new(command: &str, cfg: &RunConfig, inputs: Vec<PathBuf>) -> Self {
        let p = &cfg.pipeline;
        let decisions = serde_json::json!({
            "grid_cells": "half_open_both_axes",
            "cleaning_3sigma": "population_sd_single_pass",
            "cell_aggregation": p.aggregation,
            "composite_min_score": p.composite.min_score,
            "composite_tie_break": "score_then_midpoint_then_earlier",
            "weather_aggregation": p.weather,
            "weather_interval": "previous_selected_exclusive_to_selected_inclusive",
            "terrain_outlets": "border_and_nodata_adjacent",
            "bicubic_kernel": "keys_a_-0.5_edge_clamped",
            "static_nodata": "zero_fill",
            "gbdt_split": "exact_greedy_leaf_wise",
            "lstm_loss": "mse",
            "lstm_readout": "last_unmasked_timestep",
            "lstm_head_order": cfg.lstm.head_order,
            "lstm_clip_norm": cfg.lstm.clip_norm,
            "lstm_output_bias_init": "training_target_mean",
            "early_stopping_fold": "lowest_index_training_fold",
            "field_r2_undefined": "excluded_from_fold_average",
        });
        Metadata {
            tool: "agrifuse".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: cfg.seed,
            config_sha256: cfg.sha256(),
            inputs,
            decisions,
            config: cfg.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("cli: creating {}", dir.display()))?;
        let path = dir.join("metadata.json");
        std::fs::write(&path, serde_json::to_vec_pretty(self)?).with_context(|| format!("cli: writing {}", path.display()))
    }
}
