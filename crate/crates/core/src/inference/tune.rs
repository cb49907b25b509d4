use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{beam_decode, DecodeOptions, Decoder, TagBias};
use crate::corpus::vocab::is_tag_id;
use crate::error::ModelError;
use crate::eval::Metrics;

/// Uniform offsets tried on all four tags, then optional per-tag deltas
/// explored one tag at a time around the best uniform point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub uniform: Vec<f64>,
    pub refine: Vec<f64>,
}

impl GridSpec {
    /// `lo, lo + step, …, hi`.
    pub fn range(lo: f64, hi: f64, step: f64) -> Result<GridSpec, ModelError> {
        if !(step > 0.0 && lo <= hi && lo.is_finite() && hi.is_finite()) {
            return Err(ModelError::Config(format!("bad grid {lo}..{hi} step {step}")));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        Ok(GridSpec { uniform: (0..=n).map(|k| lo + k as f64 * step).collect(), refine: vec![] })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub bias: TagBias,
    pub metrics: Metrics,
    pub positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: TagBias,
    pub best_metrics: Metrics,
    /// Every evaluated point, uniform grid first.
    pub sweep: Vec<SweepRow>,
}

/// Tab-separated sweep table with a header line.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("ins_open\tins_close\tdel_open\tdel_close\tprecision\trecall\tf1\tpositives\n");
    for r in rows {
        let b = r.bias.0;
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}\n",
            b[0], b[1], b[2], b[3], r.metrics.precision, r.metrics.recall, r.metrics.f1, r.positives
        ));
    }
    s
}

/// Predicted labels (any tag in the best hypothesis) for every sentence.
pub fn predict_labels<D: Decoder>(
    model: &D,
    sources: &[(D::Context, usize)],
    opts: &DecodeOptions,
) -> Result<Vec<bool>, ModelError> {
    sources
        .par_iter()
        .map(|(ctx, len)| {
            let h = beam_decode(model, ctx, opts.beam, &opts.bias, opts.max_len(*len), opts.length_norm)?;
            Ok(h.tokens.iter().any(|&t| is_tag_id(t)))
        })
        .collect()
}

fn evaluate<D: Decoder>(
    model: &D,
    sources: &[(D::Context, usize)],
    gold: &[bool],
    opts: &DecodeOptions,
    bias: TagBias,
) -> Result<SweepRow, ModelError> {
    let pred = predict_labels(model, sources, &DecodeOptions { bias, ..*opts })?;
    Ok(SweepRow { bias, metrics: Metrics::from_labels(&pred, gold), positives: pred.iter().filter(|&&p| p).count() })
}

/// Higher F1 wins; equal F1 goes to the smaller total offset.
fn better(a: &SweepRow, b: &SweepRow) -> bool {
    a.metrics.f1 > b.metrics.f1 || (a.metrics.f1 == b.metrics.f1 && a.bias.magnitude() < b.bias.magnitude())
}

/// Grid search for the tag bias maximizing F1 on a labeled tuning set of
/// pre-encoded sources `(context, source length)`.
pub fn tune_bias<D: Decoder>(
    model: &D,
    sources: &[(D::Context, usize)],
    gold: &[bool],
    grid: &GridSpec,
    opts: &DecodeOptions,
) -> Result<TuneResult, ModelError> {
    if sources.is_empty() {
        return Err(ModelError::Empty("tuning set"));
    }
    if sources.len() != gold.len() {
        return Err(ModelError::Config(format!("{} sources but {} labels", sources.len(), gold.len())));
    }
    if grid.uniform.is_empty() {
        return Err(ModelError::Empty("bias grid"));
    }
    let mut sweep = Vec::new();
    for &x in &grid.uniform {
        sweep.push(evaluate(model, sources, gold, opts, TagBias::uniform(x))?);
    }
    let mut best = sweep[0];
    for r in &sweep[1..] {
        if better(r, &best) {
            best = *r;
        }
    }
    for k in 0..4 {
        let base = best.bias;
        for &d in &grid.refine {
            if d == 0.0 {
                continue;
            }
            let mut b = base;
            b.0[k] += d;
            let r = evaluate(model, sources, gold, opts, b)?;
            sweep.push(r);
            if better(&r, &best) {
                best = r;
            }
        }
    }
    Ok(TuneResult { best: best.bias, best_metrics: best.metrics, sweep })
}
