//! Training on synthetic homography pairs with deep supervision of all
//! three stages.

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::loss::{masked_stage_loss, total_loss};
use crate::matcher::{forward_pipeline, ForwardOptions, Matcher, QuerySet, StagePreds};
use crate::metrics::aepe;
use crate::model::Model;
use crate::optim::{cosine_scale, Adam};
use crate::synth::{QuerySample, SyntheticPair};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

const TAG_TRAIN_PAIR: u64 = 1;
const TAG_QUERIES: u64 = 2;
const TAG_EVAL_PAIR: u64 = 3;
const TAG_CLUSTER: u64 = 4;

/// Deterministic seed derivation keyed by purpose; keeps training data,
/// evaluation data, and clustering streams independent.
pub fn derive_seed(base: u64, tag: u64, k: u64) -> u64 {
    let mut x = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = x.wrapping_add(k.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    x ^= x >> 31;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 29;
    x
}

#[derive(Debug, Clone, Serialize)]
pub struct LogRecord {
    pub step: usize,
    pub l_c: f64,
    pub l_m: f64,
    pub l_f: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_aepe: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<LogRecord>,
    /// Held-out per-stage AEPE (coarse, middle, fine) in pixels after the
    /// final step.
    pub final_eval: Option<[f64; 3]>,
}

impl TrainReport {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut buf = String::new();
        for rec in &self.log {
            buf.push_str(&serde_json::to_string(rec).expect("log record serializes"));
            buf.push('\n');
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(buf.as_bytes())?;
        Ok(())
    }
}

fn stage_targets(samples: &[QuerySample], preds: &StagePreds) -> (Tensor, Tensor, Vec<bool>) {
    let mut gt = Vec::with_capacity(preds.order.len() * 2);
    let mut valid = Vec::with_capacity(preds.order.len());
    for &qi in &preds.order {
        let s = &samples[qi];
        if s.valid {
            gt.push(s.gt.0);
            gt.push(s.gt.1);
        } else {
            // keeps the (masked-out) coordinate term finite
            gt.push(0.5);
            gt.push(0.5);
        }
        valid.push(s.valid);
    }
    let n = preds.order.len();
    (
        Tensor::from_vec(&[n, 2], gt).expect("gt shape"),
        preds.unc.clone(),
        valid,
    )
}

/// Train a fresh model; returns it with the step log.
pub fn train(cfg: &PipelineConfig, seed: u64) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let mut model = Model::init(cfg, seed, true);
    let report = train_model(&mut model, cfg, seed)?;
    Ok((model, report))
}

/// Run the training loop on an existing trainable model.
pub fn train_model(model: &mut Model, cfg: &PipelineConfig, seed: u64) -> Result<TrainReport> {
    if !model.trainable() {
        return Err(Error::Invalid("train: model is not trainable".to_string()));
    }
    let tc = &cfg.train;
    let mut adam = Adam::new(tc.lr);
    let mut log = Vec::with_capacity(tc.steps);
    let lambdas = [cfg.lambda.coarse, cfg.lambda.middle, cfg.lambda.fine];
    for step in 0..tc.steps {
        let mut acc: [Option<Tensor>; 3] = [None, None, None];
        for p in 0..tc.batch_pairs {
            let k = (step * tc.batch_pairs + p) as u64;
            let sp = SyntheticPair::generate(
                derive_seed(seed, TAG_TRAIN_PAIR, k),
                cfg.image_size,
                tc.noise_octaves,
                tc.warp_magnitude,
            )?;
            let mut qrng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_QUERIES, k));
            let samples = sp.sample_queries(&mut qrng, tc.queries_per_pair, tc.invalid_fraction);
            if samples.is_empty() {
                return Err(Error::Invalid(format!("no queries sampled at step {}", step)));
            }
            let queries: Vec<(f64, f64)> = samples.iter().map(|s| s.query).collect();
            let opts = ForwardOptions {
                th: cfg.aqc.th_train,
                detach_features: tc.detach_branches,
                cluster: cfg.cluster,
                cluster_seed: derive_seed(seed, TAG_CLUSTER, k),
            };
            let preds = forward_pipeline(model, cfg, &sp.pair, &queries, &opts, None)
                .map_err(|e| Error::Invalid(format!("forward failed at step {}: {}", step, e)))?;
            for (si, sp_preds) in preds.iter().enumerate() {
                let (gt, unc, valid) = stage_targets(&samples, sp_preds);
                let l = masked_stage_loss(&sp_preds.coords, &unc, &gt, &valid, lambdas[si], tc.invalid_err)?;
                acc[si] = Some(match acc[si].take() {
                    Some(prev) => prev.add(&l)?,
                    None => l,
                });
            }
        }
        let scale = 1.0 / tc.batch_pairs as f64;
        let l_c = acc[0].take().unwrap().scale(scale)?;
        let l_m = acc[1].take().unwrap().scale(scale)?;
        let l_f = acc[2].take().unwrap().scale(scale)?;
        let total = total_loss(&l_c, &l_m, &l_f)
            .map_err(|e| Error::Invalid(format!("loss diverged at step {}: {}", step, e)))?;
        model.zero_grads();
        total
            .backward()
            .map_err(|e| Error::Invalid(format!("backward failed at step {}: {}", step, e)))?;
        adam.step(model, cosine_scale(step, tc.steps))?;

        let mut rec = LogRecord {
            step,
            l_c: l_c.scalar()?,
            l_m: l_m.scalar()?,
            l_f: l_f.scalar()?,
            eval_aepe: None,
        };
        if tc.eval_interval > 0 && (step + 1) % tc.eval_interval == 0 {
            let evals = eval_stage_aepes_of(model, cfg, seed, tc.eval_pairs, tc.eval_queries)?;
            rec.eval_aepe = Some(evals[2]);
        }
        log.push(rec);
    }
    let final_eval = if tc.eval_pairs > 0 {
        Some(eval_stage_aepes_of(model, cfg, seed, tc.eval_pairs, tc.eval_queries)?)
    } else {
        None
    };
    Ok(TrainReport { log, final_eval })
}

/// Per-stage AEPE (pixels) on held-out synthetic pairs, averaged over
/// pairs; only queries with a valid correspondence count.
pub fn eval_stage_aepes_of(
    model: &mut Model,
    cfg: &PipelineConfig,
    seed: u64,
    pairs: usize,
    queries_per_pair: usize,
) -> Result<[f64; 3]> {
    let state = model.state_dict();
    let infer = Model::from_state(cfg, &state, false)?;
    let matcher = Matcher::new(infer, cfg.clone());
    eval_stage_aepes(&matcher, seed, pairs, queries_per_pair)
}

pub fn eval_stage_aepes(
    matcher: &Matcher,
    seed: u64,
    pairs: usize,
    queries_per_pair: usize,
) -> Result<[f64; 3]> {
    let cfg = matcher.config();
    let mut sums = [0.0f64; 3];
    let mut count = 0usize;
    for i in 0..pairs {
        let sp = SyntheticPair::generate(
            derive_seed(seed, TAG_EVAL_PAIR, i as u64),
            cfg.image_size,
            cfg.train.noise_octaves,
            cfg.train.warp_magnitude,
        )?;
        let mut qrng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_EVAL_PAIR, 1000 + i as u64));
        let samples = sp.sample_queries(&mut qrng, queries_per_pair, 0.0);
        if samples.len() < 3 {
            continue;
        }
        let queries = QuerySet::new(samples.iter().map(|s| s.query).collect())?;
        let out = matcher.match_pair(&sp.pair, &queries)?;
        let px = cfg.image_size as f64;
        let gt_flow: Vec<(f64, f64)> = samples
            .iter()
            .map(|s| ((s.gt.0 - s.query.0) * px, (s.gt.1 - s.query.1) * px))
            .collect();
        let mask: Vec<bool> = samples.iter().map(|s| s.valid).collect();
        for (si, stage) in [&out.coarse, &out.middle, &out.fine].iter().enumerate() {
            let pred_flow: Vec<(f64, f64)> = stage
                .corrs
                .iter()
                .zip(samples.iter())
                .map(|(r, s)| ((r.0 - s.query.0) * px, (r.1 - s.query.1) * px))
                .collect();
            sums[si] += aepe(&pred_flow, &gt_flow, &mask)?;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::Invalid("eval produced no usable pairs".to_string()));
    }
    Ok([sums[0] / count as f64, sums[1] / count as f64, sums[2] / count as f64])
}
