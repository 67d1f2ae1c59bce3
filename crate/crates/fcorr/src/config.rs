//! Pipeline configuration: one JSON file, every field defaulted.

use crate::cluster::AqcConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineMode {
    /// Shared-pyramid single feed-forward pipeline.
    Onepass,
    /// Re-crops the image and re-runs the backbone per query per stage;
    /// kept as a cost baseline for the benchmark harness.
    Recursive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    Aqc,
    Grid,
}

/// Per-stage uncertainty thresholds in the loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossThresholds {
    pub coarse: f64,
    pub middle: f64,
    pub fine: f64,
}

impl Default for LossThresholds {
    fn default() -> Self {
        LossThresholds { coarse: 0.1, middle: 0.05, fine: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AqcSettings {
    pub t: usize,
    pub k_num: usize,
    /// Distance threshold (fraction of patch side) used while training.
    pub th_train: f64,
    /// Threshold used at inference time.
    pub th_infer: f64,
}

impl Default for AqcSettings {
    fn default() -> Self {
        AqcSettings { t: 1, k_num: 128, th_train: 0.8, th_infer: 0.6 }
    }
}

impl AqcSettings {
    pub fn config(&self, th: f64, seed: u64) -> AqcConfig {
        AqcConfig { t: self.t, k_num: self.k_num, th, seed }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSettings {
    /// Cycle-consistency rejection radius in pixels.
    pub tau_cycle_px: f64,
    /// Uncertainty rejection threshold in (0, 1).
    pub tau_u: f64,
}

impl Default for FilterSettings {
    fn default() -> Self {
        FilterSettings { tau_cycle_px: 2.0, tau_u: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub lr: f64,
    pub steps: usize,
    pub batch_pairs: usize,
    pub queries_per_pair: usize,
    /// Fraction of sampled queries whose true match falls outside image B.
    pub invalid_fraction: f64,
    /// Surrogate error magnitude supervising the uncertainty of queries
    /// without a valid correspondence.
    pub invalid_err: f64,
    /// Homography corner perturbation as a fraction of the image side.
    pub warp_magnitude: f64,
    pub noise_octaves: usize,
    pub eval_interval: usize,
    pub eval_pairs: usize,
    pub eval_queries: usize,
    /// Detach middle/fine branches so only the coarse loss reaches the
    /// backbone (ablation mode).
    pub detach_branches: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            lr: 1e-4,
            steps: 2000,
            batch_pairs: 4,
            queries_per_pair: 128,
            invalid_fraction: 0.25,
            invalid_err: 0.5,
            warp_magnitude: 0.2,
            noise_octaves: 4,
            eval_interval: 200,
            eval_pairs: 4,
            eval_queries: 64,
            detach_branches: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub counts: Vec<usize>,
    /// Timed repetitions per point; the median is reported.
    pub reps: usize,
    pub warmup: usize,
    /// Image-crop side in pixels for the recursive baseline's re-crops.
    pub recursive_crop_px: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings { counts: vec![100, 1000, 10000], reps: 5, warmup: 1, recursive_crop_px: 32 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Square input resolution; both images are resized to it.
    pub image_size: usize,
    /// Channel widths of the four backbone stages.
    pub backbone_channels: [usize; 4],
    /// Channel width of the integrated pyramid levels.
    pub feat_dim: usize,
    /// Transformer model width.
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Crop window (cells) on the middle-stage feature map.
    pub window_mid: usize,
    /// Crop window (cells) on the fine-stage feature map.
    pub window_fine: usize,
    pub lambda: LossThresholds,
    pub aqc: AqcSettings,
    pub cluster: ClusterMethod,
    pub filter: FilterSettings,
    pub train: TrainSettings,
    pub engine: EngineMode,
    pub seed: u64,
    pub threads: usize,
    pub bench: BenchSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            image_size: 256,
            backbone_channels: [32, 64, 128, 256],
            feat_dim: 128,
            model_dim: 128,
            num_heads: 4,
            ffn_dim: 256,
            window_mid: 17,
            window_fine: 13,
            lambda: LossThresholds::default(),
            aqc: AqcSettings::default(),
            cluster: ClusterMethod::Aqc,
            filter: FilterSettings::default(),
            train: TrainSettings::default(),
            engine: EngineMode::Onepass,
            seed: 0,
            threads: 1,
            bench: BenchSettings::default(),
        }
    }
}

impl PipelineConfig {
    /// Small setup for fast CPU training runs on 64 px synthetic pairs.
    /// The loss thresholds scale with the resolution: at 64 px the paper
    /// defaults sit far below what any stage can reach, which drives every
    /// uncertainty to 1 and starves the coordinate branch.
    pub fn train_preset() -> PipelineConfig {
        PipelineConfig {
            image_size: 64,
            backbone_channels: [16, 32, 64, 128],
            feat_dim: 32,
            model_dim: 32,
            num_heads: 2,
            ffn_dim: 64,
            window_mid: 5,
            window_fine: 7,
            lambda: LossThresholds { coarse: 0.4, middle: 0.25, fine: 0.15 },
            aqc: AqcSettings { k_num: 8, ..AqcSettings::default() },
            train: TrainSettings {
                lr: 1e-3,
                steps: 600,
                batch_pairs: 2,
                queries_per_pair: 48,
                noise_octaves: 5,
                eval_interval: 150,
                eval_pairs: 6,
                eval_queries: 64,
                ..TrainSettings::default()
            },
            ..PipelineConfig::default()
        }
    }

    /// Small setup for the scaling benchmark.
    pub fn bench_preset() -> PipelineConfig {
        PipelineConfig {
            image_size: 128,
            backbone_channels: [16, 32, 64, 128],
            feat_dim: 64,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            window_mid: 9,
            window_fine: 9,
            ..PipelineConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dump(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Side length (cells) of the middle-stage feature map.
    pub fn mid_cells(&self) -> usize {
        self.image_size / 16
    }

    /// Side length (cells) of the fine-stage feature map.
    pub fn fine_cells(&self) -> usize {
        self.image_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return fail(format!("image_size must be a positive multiple of 32, got {}", self.image_size));
        }
        if self.backbone_channels.iter().any(|&c| c == 0) || self.feat_dim == 0 {
            return fail("backbone_channels and feat_dim must be positive".to_string());
        }
        if self.model_dim % 4 != 0 {
            return fail(format!("model_dim must be divisible by 4, got {}", self.model_dim));
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return fail(format!(
                "num_heads must divide model_dim ({} / {})",
                self.model_dim, self.num_heads
            ));
        }
        if self.ffn_dim == 0 {
            return fail("ffn_dim must be positive".to_string());
        }
        for (name, w, cells) in [
            ("window_mid", self.window_mid, self.mid_cells()),
            ("window_fine", self.window_fine, self.fine_cells()),
        ] {
            if w % 2 == 0 {
                return fail(format!("{} must be odd, got {}", name, w));
            }
            if w > 2 * cells {
                return fail(format!("{} = {} exceeds 2x the {}-cell feature map", name, w, cells));
            }
        }
        for (name, v) in [
            ("lambda.coarse", self.lambda.coarse),
            ("lambda.middle", self.lambda.middle),
            ("lambda.fine", self.lambda.fine),
        ] {
            if v <= 0.0 {
                return fail(format!("{} must be > 0, got {}", name, v));
            }
        }
        if self.aqc.t < 1 || self.aqc.k_num < 1 {
            return fail("aqc.t and aqc.k_num must be >= 1".to_string());
        }
        for (name, th) in [("aqc.th_train", self.aqc.th_train), ("aqc.th_infer", self.aqc.th_infer)] {
            if !(th > 0.0 && th <= 1.0) {
                return fail(format!("{} must be in (0,1], got {}", name, th));
            }
        }
        if !(self.filter.tau_u > 0.0 && self.filter.tau_u < 1.0) {
            return fail(format!("filter.tau_u must be in (0,1), got {}", self.filter.tau_u));
        }
        if self.filter.tau_cycle_px <= 0.0 {
            return fail("filter.tau_cycle_px must be > 0".to_string());
        }
        if self.train.lr <= 0.0
            || self.train.batch_pairs == 0
            || self.train.queries_per_pair == 0
            || !(0.0..1.0).contains(&self.train.invalid_fraction)
            || self.train.invalid_err <= 0.0
            || !(self.train.warp_magnitude >= 0.0 && self.train.warp_magnitude < 0.5)
            || self.train.noise_octaves == 0
        {
            return fail("invalid train settings".to_string());
        }
        if self.threads == 0 {
            return fail("threads must be >= 1".to_string());
        }
        if self.bench.reps == 0 || self.bench.counts.is_empty() || self.bench.recursive_crop_px < 32 {
            return fail("bench needs reps >= 1, nonempty counts, recursive_crop_px >= 32".to_string());
        }
        Ok(())
    }
}
