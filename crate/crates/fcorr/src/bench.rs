//! Scaling benchmark: wall-time component breakdown per query count, for
//! the one-pass engine and the recursive re-crop baseline.
//!
//! Timing methodology: a fixed synthetic pair and seeded query sets, a
//! warm-up pass, then the median-total run of `reps` repetitions is
//! reported with its full component breakdown. Ratios across query
//! counts, not absolute seconds, are the quantities of interest.

use crate::config::{EngineMode, PipelineConfig};
use crate::error::{Error, Result};
use crate::matcher::{Matcher, QuerySet, StageTimings};
use crate::matchio::parse_queries;
use crate::synth::SyntheticPair;
use serde::Serialize;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BenchRow {
    pub count: usize,
    pub prepost: f64,
    pub backbone: f64,
    pub tr_c: f64,
    pub tr_m: f64,
    pub tr_f: f64,
    pub total: f64,
}

impl From<(usize, StageTimings)> for BenchRow {
    fn from((count, t): (usize, StageTimings)) -> BenchRow {
        BenchRow {
            count,
            prepost: t.prepost,
            backbone: t.backbone,
            tr_c: t.tr_c,
            tr_m: t.tr_m,
            tr_f: t.tr_f,
            total: t.total,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchEnv {
    pub image_size: usize,
    pub model_dim: usize,
    pub threads: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub engine: String,
    pub env: BenchEnv,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, count: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.count == count)
    }

    /// Every row's components must sum to its total within 5%.
    pub fn check_consistency(&self) -> Result<()> {
        for r in &self.rows {
            let sum = r.prepost + r.backbone + r.tr_c + r.tr_m + r.tr_f;
            if (sum - r.total).abs() > 0.05 * r.total {
                return Err(Error::Invalid(format!(
                    "bench row {}: components sum to {:.6}s but total is {:.6}s",
                    r.count, sum, r.total
                )));
            }
        }
        Ok(())
    }

    pub fn format_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("engine: {}\n", self.engine));
        out.push_str("#points  pre/post  backbone     TR_C     TR_M     TR_F    total\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:7} {:9.3} {:9.3} {:8.3} {:8.3} {:8.3} {:8.3}\n",
                r.count, r.prepost, r.backbone, r.tr_c, r.tr_m, r.tr_f, r.total
            ));
        }
        out
    }
}

/// Benchmark one engine over the configured query counts.
pub fn run_bench(matcher: &Matcher, counts: &[usize]) -> Result<BenchReport> {
    let cfg = matcher.config();
    let pair = SyntheticPair::generate(
        cfg.seed.wrapping_add(0xBE9C),
        cfg.image_size,
        cfg.train.noise_octaves,
        cfg.train.warp_magnitude,
    )?
    .pair;
    let mut rows = Vec::with_capacity(counts.len());
    for &count in counts {
        let queries = QuerySet::new(parse_queries(&format!("random:{}", count), cfg.seed)?)?;
        let mut reps = cfg.bench.reps;
        let timing = loop {
            for _ in 0..cfg.bench.warmup {
                matcher.match_pair_timed(&pair, &queries)?;
            }
            let mut runs: Vec<StageTimings> = Vec::with_capacity(reps);
            for _ in 0..reps {
                let (_, t) = matcher.match_pair_timed(&pair, &queries)?;
                runs.push(t);
            }
            runs.sort_by(|a, b| a.total.partial_cmp(&b.total).unwrap());
            let median = runs[runs.len() / 2];
            if median.total > 1e-6 {
                break median;
            }
            // Timer resolution too coarse for this workload; repeat more.
            reps *= 2;
            if reps > 1024 {
                return Err(Error::Invalid("benchmark workload too small to time".to_string()));
            }
        };
        rows.push(BenchRow::from((count, timing)));
    }
    let report = BenchReport {
        engine: match cfg.engine {
            EngineMode::Onepass => "onepass".to_string(),
            EngineMode::Recursive => "recursive".to_string(),
        },
        env: BenchEnv {
            image_size: cfg.image_size,
            model_dim: cfg.model_dim,
            threads: cfg.threads,
            reps: cfg.bench.reps,
            warmup: cfg.bench.warmup,
            seed: cfg.seed,
        },
        rows,
    };
    report.check_consistency()?;
    Ok(report)
}

/// Run both engines with identical weights and query sets.
pub fn run_scaling_bench(cfg: &PipelineConfig) -> Result<(BenchReport, BenchReport)> {
    let counts = cfg.bench.counts.clone();
    let mut one_cfg = cfg.clone();
    one_cfg.engine = EngineMode::Onepass;
    let onepass_matcher = Matcher::with_random_weights(&one_cfg, cfg.seed);
    let onepass = run_bench(&onepass_matcher, &counts)?;
    drop(onepass_matcher);
    let mut rec_cfg = cfg.clone();
    rec_cfg.engine = EngineMode::Recursive;
    let recursive_matcher = Matcher::with_random_weights(&rec_cfg, cfg.seed);
    let recursive = run_bench(&recursive_matcher, &counts)?;
    Ok((onepass, recursive))
}
