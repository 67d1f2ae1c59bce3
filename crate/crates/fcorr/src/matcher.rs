//! The coarse-to-fine matching driver.
//!
//! One call runs: backbone once per image -> coarse stage over the
//! stitched full coarse maps -> query clustering -> middle stage over
//! cropped mid-level patch pairs -> clustering again -> fine stage over
//! fine-level patches. Every stage emits correspondences plus
//! uncertainties for every query; outputs are keyed by query index, so
//! parallel patch processing cannot reorder anything.
//!
//! The same forward pipeline serves training (graph-recording tensors,
//! patch-grouped output order, no clamping) and inference (plain values,
//! query order, clamped into [0,1]^2).

use crate::cluster::{aqc_assign, grid_assign, ClusterAssignment};
use crate::config::{ClusterMethod, EngineMode, PipelineConfig};
use crate::error::{Error, Result};
use crate::image::{Image, ImagePair};
use crate::model::Model;
use crate::pe;
use crate::pyramid::{crop_feature_patch, FeaturePatch};
use crate::tensor::checkpoint::StateDict;
use crate::tensor::{concat, Tensor};
use crate::transformer::RefinerStage;
use std::sync::Arc;
use std::time::Instant;

/// Query coordinates, normalized to [0,1]^2 in the image A frame.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub coords: Vec<(f64, f64)>,
}

impl QuerySet {
    pub fn new(coords: Vec<(f64, f64)>) -> Result<QuerySet> {
        for &(x, y) in &coords {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(Error::Invalid(format!("query ({}, {}) outside [0,1]^2", x, y)));
            }
        }
        Ok(QuerySet { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Per-stage predictions in image B frame plus uncertainties in [0,1].
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub corrs: Vec<(f64, f64)>,
    pub uncertainty: Vec<f64>,
}

/// Predictions of all three stages, each covering every query.
#[derive(Debug, Clone)]
pub struct MatchOutput {
    pub coarse: StageOutput,
    pub middle: StageOutput,
    pub fine: StageOutput,
}

/// Wall-clock component breakdown of one match call, in seconds.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimings {
    pub prepost: f64,
    pub backbone: f64,
    pub tr_c: f64,
    pub tr_m: f64,
    pub tr_f: f64,
    pub total: f64,
}

impl StageTimings {
    pub fn component_sum(&self) -> f64 {
        self.prepost + self.backbone + self.tr_c + self.tr_m + self.tr_f
    }
}

/// Stage predictions still inside the autodiff graph, for training.
pub struct StagePreds {
    /// (N, 2) predicted coordinates in the global B frame, unclamped.
    pub coords: Tensor,
    /// (N,) uncertainties.
    pub unc: Tensor,
    /// Original query index of each row.
    pub order: Vec<usize>,
}

pub struct ForwardOptions {
    /// Clustering distance threshold (fraction of patch side).
    pub th: f64,
    /// Detach pyramid features before the middle/fine crops, so only the
    /// coarse loss reaches the backbone.
    pub detach_features: bool,
    pub cluster: ClusterMethod,
    pub cluster_seed: u64,
}

/// Stitch an A|B patch pair into encoder tokens and run one stage.
/// Returns coordinates local to the B patch and uncertainties, as graph
/// tensors with rows in `locals` order.
pub fn run_stage_on_patches(
    stage: &RefinerStage,
    model_dim: usize,
    patch_a: &Tensor,
    patch_b: &Tensor,
    locals: &[(f64, f64)],
) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = (patch_a.shape()[1], patch_a.shape()[2], patch_a.shape()[3]);
    let stitched = concat(&[patch_a, patch_b], 3)?;
    let tokens = stitched.reshape(&[c, h * 2 * w])?.permute(&[1, 0])?;
    let token_pe = pe::encode_grid(h, 2 * w, model_dim)?;
    // Query positions live on the A half of the stitched grid.
    let scaled: Vec<(f64, f64)> = locals.iter().map(|&(x, y)| (x * w as f64, y * h as f64)).collect();
    let query_pe = pe::encode_points(&scaled, model_dim)?;
    // Each query token also carries the A-side appearance at its position.
    let query_feat = patch_a.sample_points(&scaled)?;
    stage.forward(&tokens, &token_pe, &query_pe, &query_feat)
}

fn empty_stage_preds() -> StagePreds {
    StagePreds {
        coords: Tensor::from_vec(&[0, 2], Vec::new()).unwrap(),
        unc: Tensor::from_vec(&[0], Vec::new()).unwrap(),
        order: Vec::new(),
    }
}

/// Map stage-local sigmoid outputs to the global B frame, inside the graph.
fn locals_to_global(coords_local: &Tensor, patch_b: &FeaturePatch) -> Result<Tensor> {
    let n = coords_local.shape()[0];
    let (ex, ey) = patch_b.extent;
    let (ox, oy) = patch_b.origin;
    let scale = Tensor::from_vec(&[n, 2], (0..n).flat_map(|_| [ex, ey]).collect())?;
    let offset = Tensor::from_vec(&[n, 2], (0..n).flat_map(|_| [ox, oy]).collect())?;
    coords_local.mul(&scale)?.add(&offset)
}

fn assignment_for(
    method: ClusterMethod,
    queries: &[(f64, f64)],
    matches: &[(f64, f64)],
    cfg: &PipelineConfig,
    th: f64,
    seed: u64,
    patch_side: f64,
) -> Result<ClusterAssignment> {
    match method {
        ClusterMethod::Aqc => aqc_assign(queries, matches, &cfg.aqc.config(th, seed), patch_side),
        ClusterMethod::Grid => grid_assign(queries, matches, patch_side),
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// One refinement round over cropped patch pairs (serial; graph-capable).
#[allow(clippy::too_many_arguments)]
fn refine_round(
    stage: &RefinerStage,
    model_dim: usize,
    level_a: &Tensor,
    level_b: &Tensor,
    window: usize,
    queries: &[(f64, f64)],
    prev: &[(f64, f64)],
    assignment: &ClusterAssignment,
) -> Result<StagePreds> {
    let mut coord_parts: Vec<Tensor> = Vec::new();
    let mut unc_parts: Vec<Tensor> = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    for patch in assignment.materialize(queries, prev) {
        let center_q = (clamp01(patch.center_q.0), clamp01(patch.center_q.1));
        let center_r = (clamp01(patch.center_r.0), clamp01(patch.center_r.1));
        let patch_a = crop_feature_patch(level_a, center_q, window)?;
        let patch_b = crop_feature_patch(level_b, center_r, window)?;
        let locals: Vec<(f64, f64)> = patch
            .members
            .iter()
            .map(|&i| patch_a.global_to_local(queries[i]))
            .collect::<Result<_>>()?;
        let (coords_local, unc) = run_stage_on_patches(stage, model_dim, &patch_a.data, &patch_b.data, &locals)?;
        coord_parts.push(locals_to_global(&coords_local, &patch_b)?);
        unc_parts.push(unc);
        order.extend_from_slice(&patch.members);
    }
    if coord_parts.is_empty() {
        return Ok(empty_stage_preds());
    }
    let coord_refs: Vec<&Tensor> = coord_parts.iter().collect();
    let unc_refs: Vec<&Tensor> = unc_parts.iter().collect();
    Ok(StagePreds { coords: concat(&coord_refs, 0)?, unc: concat(&unc_refs, 0)?, order })
}

fn preds_to_output(preds: &StagePreds, n: usize) -> StageOutput {
    let mut corrs = vec![(0.0, 0.0); n];
    let mut uncertainty = vec![0.0; n];
    let cd = preds.coords.data();
    let ud = preds.unc.data();
    for (row, &qi) in preds.order.iter().enumerate() {
        corrs[qi] = (clamp01(cd[row * 2]), clamp01(cd[row * 2 + 1]));
        uncertainty[qi] = ud[row];
    }
    StageOutput { corrs, uncertainty }
}

/// Full three-stage forward pass. Used directly by training; the
/// [`Matcher`] wraps it for inference.
pub fn forward_pipeline(
    model: &Model,
    cfg: &PipelineConfig,
    pair: &ImagePair,
    queries: &[(f64, f64)],
    opts: &ForwardOptions,
    timings: Option<&mut StageTimings>,
) -> Result<[StagePreds; 3]> {
    let mut tm = StageTimings::default();
    let t_total = Instant::now();

    let t = Instant::now();
    let (pyr_a, pyr_b) = model.backbone.extract_pyramid(pair)?;
    tm.backbone = t.elapsed().as_secs_f64();

    let n = queries.len();
    if n == 0 {
        if let Some(out) = timings {
            tm.total = t_total.elapsed().as_secs_f64();
            *out = tm;
        }
        return Ok([empty_stage_preds(), empty_stage_preds(), empty_stage_preds()]);
    }

    // Coarse: the full maps act as one patch pair covering both images.
    let t = Instant::now();
    let full_a = FeaturePatch::full(&pyr_a.coarse);
    let full_b = FeaturePatch::full(&pyr_b.coarse);
    let (coarse_local, coarse_unc) =
        run_stage_on_patches(&model.coarse, cfg.model_dim, &full_a.data, &full_b.data, queries)?;
    let coarse_coords = locals_to_global(&coarse_local, &full_b)?;
    let coarse = StagePreds { coords: coarse_coords, unc: coarse_unc, order: (0..n).collect() };
    tm.tr_c = t.elapsed().as_secs_f64();

    // Patch centers come from the clamped value predictions; gradients
    // flow through features and coordinates, not through crop indices.
    let t = Instant::now();
    let r_c: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let d = coarse.coords.data();
            (clamp01(d[i * 2]), clamp01(d[i * 2 + 1]))
        })
        .collect();
    let mid_cells = cfg.mid_cells();
    let side_m = cfg.window_mid as f64 / mid_cells as f64;
    let asg_m = assignment_for(opts.cluster, queries, &r_c, cfg, opts.th, opts.cluster_seed, side_m)?;
    tm.prepost += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (mid_a, mid_b) = if opts.detach_features {
        (pyr_a.mid.detach(), pyr_b.mid.detach())
    } else {
        (pyr_a.mid.clone(), pyr_b.mid.clone())
    };
    let middle = refine_round(
        &model.middle,
        cfg.model_dim,
        &mid_a,
        &mid_b,
        cfg.window_mid,
        queries,
        &r_c,
        &asg_m,
    )?;
    tm.tr_m = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut r_m = vec![(0.0, 0.0); n];
    {
        let d = middle.coords.data();
        for (row, &qi) in middle.order.iter().enumerate() {
            r_m[qi] = (clamp01(d[row * 2]), clamp01(d[row * 2 + 1]));
        }
    }
    let fine_cells = cfg.fine_cells();
    let side_f = cfg.window_fine as f64 / fine_cells as f64;
    let asg_f = assignment_for(
        opts.cluster,
        queries,
        &r_m,
        cfg,
        opts.th,
        opts.cluster_seed.wrapping_add(0x9e37),
        side_f,
    )?;
    tm.prepost += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (fine_a, fine_b) = if opts.detach_features {
        (pyr_a.fine.detach(), pyr_b.fine.detach())
    } else {
        (pyr_a.fine.clone(), pyr_b.fine.clone())
    };
    let fine = refine_round(
        &model.fine,
        cfg.model_dim,
        &fine_a,
        &fine_b,
        cfg.window_fine,
        queries,
        &r_m,
        &asg_f,
    )?;
    tm.tr_f = t.elapsed().as_secs_f64();

    if let Some(out) = timings {
        tm.total = t_total.elapsed().as_secs_f64();
        *out = tm;
    }
    Ok([coarse, middle, fine])
}

/// Inference front end over a fixed model.
pub struct Matcher {
    model: Model,
    state: StateDict,
    cfg: PipelineConfig,
}

impl Matcher {
    pub fn new(mut model: Model, cfg: PipelineConfig) -> Matcher {
        let state = model.state_dict();
        Matcher { model, state, cfg }
    }

    /// Random-weight matcher (timing and structural tests).
    pub fn with_random_weights(cfg: &PipelineConfig, seed: u64) -> Matcher {
        Matcher::new(Model::init(cfg, seed, false), cfg.clone())
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn backbone_evals(&self) -> u64 {
        self.model.backbone.evals()
    }

    pub fn reset_backbone_evals(&self) {
        self.model.backbone.reset_evals()
    }

    pub fn match_pair(&self, pair: &ImagePair, queries: &QuerySet) -> Result<MatchOutput> {
        self.match_pair_timed(pair, queries).map(|(out, _)| out)
    }

    pub fn match_pair_timed(&self, pair: &ImagePair, queries: &QuerySet) -> Result<(MatchOutput, StageTimings)> {
        match self.cfg.engine {
            EngineMode::Onepass => self.match_onepass(pair, queries),
            EngineMode::Recursive => self.match_recursive(pair, queries),
        }
    }

    fn match_onepass(&self, pair: &ImagePair, queries: &QuerySet) -> Result<(MatchOutput, StageTimings)> {
        let n = queries.len();
        let opts = ForwardOptions {
            th: self.cfg.aqc.th_infer,
            detach_features: false,
            cluster: self.cfg.cluster,
            cluster_seed: self.cfg.seed,
        };
        if self.cfg.threads > 1 && n > 0 {
            return self.match_onepass_parallel(pair, queries, &opts);
        }
        let mut tm = StageTimings::default();
        let preds = forward_pipeline(&self.model, &self.cfg, pair, &queries.coords, &opts, Some(&mut tm))?;
        let out = MatchOutput {
            coarse: preds_to_output(&preds[0], n),
            middle: preds_to_output(&preds[1], n),
            fine: preds_to_output(&preds[2], n),
        };
        Ok((out, tm))
    }

    /// Same pipeline with the middle/fine patches fanned out to worker
    /// threads. Results are keyed by patch and query index, so the output
    /// is byte-identical to the serial path.
    fn match_onepass_parallel(
        &self,
        pair: &ImagePair,
        queries: &QuerySet,
        opts: &ForwardOptions,
    ) -> Result<(MatchOutput, StageTimings)> {
        let mut tm = StageTimings::default();
        let t_total = Instant::now();
        let n = queries.len();

        let t = Instant::now();
        let (pyr_a, pyr_b) = self.model.backbone.extract_pyramid(pair)?;
        tm.backbone = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let full_a = FeaturePatch::full(&pyr_a.coarse);
        let full_b = FeaturePatch::full(&pyr_b.coarse);
        let (coarse_local, coarse_unc) = run_stage_on_patches(
            &self.model.coarse,
            self.cfg.model_dim,
            &full_a.data,
            &full_b.data,
            &queries.coords,
        )?;
        let coarse_global = locals_to_global(&coarse_local, &full_b)?;
        let coarse = StageOutput {
            corrs: (0..n)
                .map(|i| {
                    let d = coarse_global.data();
                    (clamp01(d[i * 2]), clamp01(d[i * 2 + 1]))
                })
                .collect(),
            uncertainty: coarse_unc.data().to_vec(),
        };
        tm.tr_c = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let side_m = self.cfg.window_mid as f64 / self.cfg.mid_cells() as f64;
        let asg_m = assignment_for(
            opts.cluster,
            &queries.coords,
            &coarse.corrs,
            &self.cfg,
            opts.th,
            opts.cluster_seed,
            side_m,
        )?;
        tm.prepost += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let middle = self.parallel_round(
            StageSel::Middle,
            &pyr_a.mid,
            &pyr_b.mid,
            self.cfg.window_mid,
            &queries.coords,
            &coarse.corrs,
            &asg_m,
            n,
        )?;
        tm.tr_m = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let side_f = self.cfg.window_fine as f64 / self.cfg.fine_cells() as f64;
        let asg_f = assignment_for(
            opts.cluster,
            &queries.coords,
            &middle.corrs,
            &self.cfg,
            opts.th,
            opts.cluster_seed.wrapping_add(0x9e37),
            side_f,
        )?;
        tm.prepost += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let fine = self.parallel_round(
            StageSel::Fine,
            &pyr_a.fine,
            &pyr_b.fine,
            self.cfg.window_fine,
            &queries.coords,
            &middle.corrs,
            &asg_f,
            n,
        )?;
        tm.tr_f = t.elapsed().as_secs_f64();

        tm.total = t_total.elapsed().as_secs_f64();
        Ok((MatchOutput { coarse, middle, fine }, tm))
    }

    #[allow(clippy::too_many_arguments)]
    fn parallel_round(
        &self,
        sel: StageSel,
        level_a: &Tensor,
        level_b: &Tensor,
        window: usize,
        queries: &[(f64, f64)],
        prev: &[(f64, f64)],
        assignment: &ClusterAssignment,
        n: usize,
    ) -> Result<StageOutput> {
        // Crop on the main thread (pure slicing), ship raw buffers to
        // workers, merge by query index.
        struct Job {
            a: (Vec<usize>, Arc<Vec<f64>>),
            b: (Vec<usize>, Arc<Vec<f64>>),
            b_origin: (f64, f64),
            b_extent: (f64, f64),
            locals: Vec<(f64, f64)>,
            members: Vec<usize>,
        }
        let mut jobs = Vec::new();
        for patch in assignment.materialize(queries, prev) {
            let center_q = (clamp01(patch.center_q.0), clamp01(patch.center_q.1));
            let center_r = (clamp01(patch.center_r.0), clamp01(patch.center_r.1));
            let patch_a = crop_feature_patch(level_a, center_q, window)?;
            let patch_b = crop_feature_patch(level_b, center_r, window)?;
            let locals: Vec<(f64, f64)> = patch
                .members
                .iter()
                .map(|&i| patch_a.global_to_local(queries[i]))
                .collect::<Result<_>>()?;
            jobs.push(Job {
                a: (patch_a.data.shape().to_vec(), patch_a.data.data_arc()),
                b: (patch_b.data.shape().to_vec(), patch_b.data.data_arc()),
                b_origin: patch_b.origin,
                b_extent: patch_b.extent,
                locals,
                members: patch.members.clone(),
            });
        }
        let workers = self.cfg.threads.min(jobs.len().max(1));
        let mut results: Vec<Option<Vec<(usize, (f64, f64), f64)>>> = vec![None; jobs.len()];
        let run_job = |stage: &RefinerStage, job: &Job| -> Result<Vec<(usize, (f64, f64), f64)>> {
            let a = Tensor::from_shared(&job.a.0, job.a.1.clone(), false)?;
            let b = Tensor::from_shared(&job.b.0, job.b.1.clone(), false)?;
            let (local, unc) = run_stage_on_patches(stage, self.cfg.model_dim, &a, &b, &job.locals)?;
            let ld = local.data();
            let ud = unc.data();
            Ok(job
                .members
                .iter()
                .enumerate()
                .map(|(row, &qi)| {
                    let g = (
                        clamp01(job.b_origin.0 + ld[row * 2] * job.b_extent.0),
                        clamp01(job.b_origin.1 + ld[row * 2 + 1] * job.b_extent.1),
                    );
                    (qi, g, ud[row])
                })
                .collect())
        };
        if workers <= 1 {
            let stage = sel.pick(&self.model);
            for (i, job) in jobs.iter().enumerate() {
                results[i] = Some(run_job(stage, job)?);
            }
        } else {
            let state = &self.state;
            let cfg = &self.cfg;
            let jobs_ref = &jobs;
            let chunk = jobs.len().div_ceil(workers);
            let mut errors: Vec<Option<Error>> = Vec::new();
            let mut slots: Vec<&mut [Option<Vec<(usize, (f64, f64), f64)>>]> = Vec::new();
            let mut rest = results.as_mut_slice();
            for _ in 0..workers {
                let take = chunk.min(rest.len());
                let (head, tail) = rest.split_at_mut(take);
                slots.push(head);
                rest = tail;
            }
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for (w, slot) in slots.into_iter().enumerate() {
                    let handle = scope.spawn(move || -> Result<()> {
                        let model = Model::from_state(cfg, state, false)?;
                        let stage = sel.pick(&model);
                        for (k, out) in slot.iter_mut().enumerate() {
                            let job = &jobs_ref[w * chunk + k];
                            let a = Tensor::from_shared(&job.a.0, job.a.1.clone(), false)?;
                            let b = Tensor::from_shared(&job.b.0, job.b.1.clone(), false)?;
                            let (local, unc) =
                                run_stage_on_patches(stage, cfg.model_dim, &a, &b, &job.locals)?;
                            let ld = local.data();
                            let ud = unc.data();
                            *out = Some(
                                job.members
                                    .iter()
                                    .enumerate()
                                    .map(|(row, &qi)| {
                                        let g = (
                                            clamp01(job.b_origin.0 + ld[row * 2] * job.b_extent.0),
                                            clamp01(job.b_origin.1 + ld[row * 2 + 1] * job.b_extent.1),
                                        );
                                        (qi, g, ud[row])
                                    })
                                    .collect(),
                            );
                        }
                        Ok(())
                    });
                    handles.push(handle);
                }
                for handle in handles {
                    if let Err(e) = handle.join().expect("worker panicked") {
                        errors.push(Some(e));
                    }
                }
            });
            if let Some(Some(e)) = errors.into_iter().next() {
                return Err(e);
            }
        }
        let mut out = StageOutput { corrs: vec![(0.0, 0.0); n], uncertainty: vec![0.0; n] };
        for r in results.into_iter().flatten() {
            for (qi, g, u) in r {
                out.corrs[qi] = g;
                out.uncertainty[qi] = u;
            }
        }
        Ok(out)
    }

    /// Cost baseline: per query and per refinement stage, re-crop the
    /// *images*, re-run the backbone on the stitched crop, and run the
    /// stage on the crop's features. Numerically it is a coarse emulation;
    /// the point is the per-query cost structure.
    fn match_recursive(&self, pair: &ImagePair, queries: &QuerySet) -> Result<(MatchOutput, StageTimings)> {
        let mut tm = StageTimings::default();
        let t_total = Instant::now();
        let n = queries.len();

        // Global first pass, like the one-pass coarse stage.
        let t = Instant::now();
        let (pyr_a, pyr_b) = self.model.backbone.extract_pyramid(pair)?;
        tm.backbone = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let full_a = FeaturePatch::full(&pyr_a.coarse);
        let full_b = FeaturePatch::full(&pyr_b.coarse);
        let coarse = if n == 0 {
            StageOutput { corrs: Vec::new(), uncertainty: Vec::new() }
        } else {
            let (local, unc) = run_stage_on_patches(
                &self.model.coarse,
                self.cfg.model_dim,
                &full_a.data,
                &full_b.data,
                &queries.coords,
            )?;
            let g = locals_to_global(&local, &full_b)?;
            StageOutput {
                corrs: (0..n)
                    .map(|i| (clamp01(g.data()[i * 2]), clamp01(g.data()[i * 2 + 1])))
                    .collect(),
                uncertainty: unc.data().to_vec(),
            }
        };
        tm.tr_c = t.elapsed().as_secs_f64();

        let crop_px = self.cfg.bench.recursive_crop_px;
        let size = pair.a.width;
        let mut run_level = |stage: &RefinerStage,
                             level: RecursiveLevel,
                             prev: &StageOutput,
                             tr_bucket: &mut f64|
         -> Result<StageOutput> {
            let mut out = StageOutput { corrs: vec![(0.0, 0.0); n], uncertainty: vec![0.0; n] };
            for i in 0..n {
                let q = queries.coords[i];
                let r = prev.corrs[i];
                // Re-crop the image pair around the current estimate.
                let t = Instant::now();
                let half = (crop_px / 2) as isize;
                let ax = (q.0 * size as f64).round() as isize - half;
                let ay = (q.1 * size as f64).round() as isize - half;
                let bx = (r.0 * size as f64).round() as isize - half;
                let by = (r.1 * size as f64).round() as isize - half;
                let crop_a = pair.a.crop(ax, ay, crop_px);
                let crop_b = pair.b.crop(bx, by, crop_px);
                let mut stitched = Image::new(2 * crop_px, crop_px);
                for c in 0..3 {
                    for y in 0..crop_px {
                        for x in 0..crop_px {
                            stitched.set(c, y, x, crop_a.get(c, y, x));
                            stitched.set(c, y, x + crop_px, crop_b.get(c, y, x));
                        }
                    }
                }
                tm.prepost += t.elapsed().as_secs_f64();

                // The whole backbone runs again for this one query.
                let t = Instant::now();
                let pyr = self.model.backbone.forward(&stitched.to_tensor())?;
                tm.backbone += t.elapsed().as_secs_f64();

                let t = Instant::now();
                let fmap = match level {
                    RecursiveLevel::Mid => &pyr.mid,
                    RecursiveLevel::Fine => &pyr.fine,
                };
                let (c, h, w2) = (fmap.shape()[1], fmap.shape()[2], fmap.shape()[3]);
                let w = w2 / 2;
                let left = fmap.crop2d(0, 0, h.min(w))?;
                let right = fmap.crop2d(0, w as isize, h.min(w))?;
                let _ = c;
                let (local, unc) =
                    run_stage_on_patches(stage, self.cfg.model_dim, &left, &right, &[(0.5, 0.5)])?;
                *tr_bucket += t.elapsed().as_secs_f64();

                let t = Instant::now();
                // Map the crop-local prediction back into image B.
                let ox = bx as f64 / size as f64;
                let oy = by as f64 / size as f64;
                let extent = crop_px as f64 / size as f64;
                out.corrs[i] = (
                    clamp01(ox + local.data()[0] * extent),
                    clamp01(oy + local.data()[1] * extent),
                );
                out.uncertainty[i] = unc.data()[0];
                tm.prepost += t.elapsed().as_secs_f64();
            }
            Ok(out)
        };

        let mut tr_m = 0.0;
        let middle = run_level(&self.model.middle, RecursiveLevel::Mid, &coarse, &mut tr_m)?;
        let mut tr_f = 0.0;
        let fine = run_level(&self.model.fine, RecursiveLevel::Fine, &middle, &mut tr_f)?;
        tm.tr_m = tr_m;
        tm.tr_f = tr_f;
        tm.total = t_total.elapsed().as_secs_f64();
        Ok((MatchOutput { coarse, middle, fine }, tm))
    }
}

#[derive(Clone, Copy)]
enum StageSel {
    Middle,
    Fine,
}

impl StageSel {
    fn pick(self, model: &Model) -> &RefinerStage {
        match self {
            StageSel::Middle => &model.middle,
            StageSel::Fine => &model.fine,
        }
    }
}

#[derive(Clone, Copy)]
enum RecursiveLevel {
    Mid,
    Fine,
}
