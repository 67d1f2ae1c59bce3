//! Outlier filters over match outputs.
//!
//! Uncertainty filtering reads the scores the model already produced, so
//! it costs nothing extra. Cycle-consistency matching runs the whole
//! pipeline a second time in the reverse direction, doubling the backbone
//! work; the round-trip distance then gates each query.

use crate::error::Result;
use crate::image::ImagePair;
use crate::matcher::{MatchOutput, Matcher, QuerySet, StageOutput};

/// Keep mask from the model's own uncertainty scores: keep iff u < tau_u.
pub fn uncertainty_filter(output: &StageOutput, tau_u: f64) -> Vec<bool> {
    output.uncertainty.iter().map(|&u| u < tau_u).collect()
}

/// Result of a cycle-consistency pass.
pub struct CycleCheck {
    pub keep: Vec<bool>,
    /// Forward pass output (A -> B).
    pub forward: MatchOutput,
    /// Round-trip distance per query, in pixels.
    pub roundtrip_px: Vec<f64>,
}

/// Match A->B, then B->A from the predicted points, and keep queries whose
/// round trip lands within `tau_px` of where they started. Costs a second
/// full matching pass (the backbone counter doubles).
pub fn cycle_filter(
    matcher: &Matcher,
    pair: &ImagePair,
    queries: &QuerySet,
    tau_px: f64,
) -> Result<CycleCheck> {
    let forward = matcher.match_pair(pair, queries)?;
    let back_queries = QuerySet::new(forward.fine.corrs.clone())?;
    let reversed = ImagePair { a: pair.b.clone(), b: pair.a.clone() };
    let backward = matcher.match_pair(&reversed, &back_queries)?;
    let size = pair.a.width as f64;
    let mut keep = Vec::with_capacity(queries.len());
    let mut roundtrip_px = Vec::with_capacity(queries.len());
    for (q, rt) in queries.coords.iter().zip(backward.fine.corrs.iter()) {
        let d = (((rt.0 - q.0) * size).powi(2) + ((rt.1 - q.1) * size).powi(2)).sqrt();
        roundtrip_px.push(d);
        keep.push(d < tau_px);
    }
    Ok(CycleCheck { keep, forward, roundtrip_px })
}
