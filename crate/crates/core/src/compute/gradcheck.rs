//! Central-difference gradient verification.
//!
//! Each sampled coordinate is scored as
//! `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
//! A coordinate that fails because the loss is not differentiable there
//! (a relu kink) is detected by comparing the two one-sided slopes; the
//! coordinate is then nudged by `kink_nudge · ε` and rechecked. If the
//! nudged point is still at a kink the coordinate is reported as skipped
//! rather than failed.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ComputeError, Gradients, NodeId, ParamId, ParameterStore, Tape};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Coordinates checked per parameter; `None` checks all of them.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
    pub report_worst: usize,
    pub kink_nudge: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            tolerance: 1e-4,
            max_coords_per_param: None,
            seed: 0,
            report_worst: 5,
            kink_nudge: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Offender {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub nudged: usize,
    pub kinks_skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Worst coordinates by relative error, descending.
    pub worst: Vec<Offender>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

fn eval<F, E>(store: &ParameterStore, f: &F) -> Result<f64, E>
where
    F: Fn(&mut Tape<'_>) -> Result<NodeId, E>,
{
    let mut tape = Tape::new(store);
    let loss = f(&mut tape)?;
    Ok(tape.value(loss).data()[0])
}

fn analytic<F, E>(store: &ParameterStore, f: &F) -> Result<Gradients, E>
where
    F: Fn(&mut Tape<'_>) -> Result<NodeId, E>,
    E: From<ComputeError>,
{
    let mut tape = Tape::new(store);
    let loss = f(&mut tape)?;
    Ok(tape.backward(loss)?)
}

struct Probe {
    analytic: f64,
    numeric: f64,
    kink: bool,
}

fn probe<F, E>(store: &mut ParameterStore, f: &F, id: ParamId, k: usize, eps: f64, grads: &Gradients) -> Result<Probe, E>
where
    F: Fn(&mut Tape<'_>) -> Result<NodeId, E>,
{
    let a = grads.get(id).map_or(0.0, |g| g.data()[k]);
    let orig = store.value(id).data()[k];
    let f0 = eval(store, f)?;
    store.value_mut(id).data_mut()[k] = orig + eps;
    let fp = eval(store, f)?;
    store.value_mut(id).data_mut()[k] = orig - eps;
    let fm = eval(store, f)?;
    store.value_mut(id).data_mut()[k] = orig;
    let numeric = (fp - fm) / (2.0 * eps);
    let (sp, sm) = ((fp - f0) / eps, (f0 - fm) / eps);
    let kink = (sp - sm).abs() > 1e-2 * 1f64.max(sp.abs()).max(sm.abs());
    Ok(Probe { analytic: a, numeric, kink })
}

/// Compares tape gradients of `loss_fn` with central differences. Failures
/// are reported, not returned as errors.
pub fn grad_check<F, E>(store: &mut ParameterStore, loss_fn: F, opts: &GradCheckOptions) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<'_>) -> Result<NodeId, E>,
    E: From<ComputeError>,
{
    let grads = analytic(store, &loss_fn)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        nudged: 0,
        kinks_skipped: 0,
        max_rel_error: 0.0,
        tolerance: opts.tolerance,
        worst: Vec::new(),
    };
    let mut all = Vec::new();
    let ids: Vec<ParamId> = store.ids_by_name().collect();
    for id in ids {
        let len = store.value(id).len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < len => {
                let mut v = sample(&mut rng, len, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        for k in coords {
            let mut p = probe(store, &loss_fn, id, k, opts.epsilon, &grads)?;
            let mut err = rel_error(p.analytic, p.numeric);
            if err > opts.tolerance && p.kink {
                let orig = store.value(id).data()[k];
                store.value_mut(id).data_mut()[k] = orig + opts.kink_nudge * opts.epsilon;
                let g2 = analytic(store, &loss_fn)?;
                let p2 = probe(store, &loss_fn, id, k, opts.epsilon, &g2);
                store.value_mut(id).data_mut()[k] = orig;
                p = p2?;
                err = rel_error(p.analytic, p.numeric);
                report.nudged += 1;
                if err > opts.tolerance && p.kink {
                    report.kinks_skipped += 1;
                    report.checked += 1;
                    continue;
                }
            }
            report.checked += 1;
            if err > opts.tolerance {
                report.failures += 1;
            }
            report.max_rel_error = report.max_rel_error.max(err);
            all.push(Offender {
                param: store.name(id).to_string(),
                index: k,
                analytic: p.analytic,
                numeric: p.numeric,
                rel_error: err,
            });
        }
    }
    all.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    all.truncate(opts.report_worst);
    report.worst = all;
    Ok(report)
}
