//! Central finite-difference verification of tape gradients.
//!
//! Decoders with ReLUs are only piecewise smooth, so a stencil that
//! straddles a kink measures a chord, not a derivative. The step of each
//! probe is reduced until all three stencil points share the ReLU pattern.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::params::ParamSet;
use super::tape::{Tape, Var};
use super::gradient;
use crate::error::Result;
use crate::exec::ExecMode;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step (the largest one tried).
    pub step: f64,
    /// How many tenfold step reductions a probe may use to avoid a kink.
    pub kink_shrinks: usize,
    /// Coordinates probed per leaf (all of them when the leaf is smaller).
    pub coords_per_leaf: usize,
    /// Random unit directions probed across all leaves jointly.
    pub directions: usize,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            kink_shrinks: 0,
            coords_per_leaf: 4,
            directions: 2,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_error: f64,
    /// Description of the probe with the largest error.
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, label: String, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        self.probes += 1;
        if rel > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = format!("{label}: analytic {analytic:.9e}, numeric {numeric:.9e}");
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.probes += other.probes;
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Central difference of the one-dimensional `f` at 0. `f` also reports
/// its ReLU pattern; while either side of the stencil sits on a different
/// smooth piece than the centre, the step shrinks tenfold (at most
/// `shrinks` times).
pub fn piecewise_central<F>(f: F, h: f64, shrinks: usize) -> Result<f64>
where
    F: Fn(f64) -> Result<(f64, Vec<bool>)>,
{
    let (_, centre) = f(0.0)?;
    let mut h = h;
    for attempt in 0..=shrinks {
        let (fp, pp) = f(h)?;
        let (fm, pm) = f(-h)?;
        if attempt == shrinks || (pp == centre && pm == centre) {
            return Ok((fp - fm) / (2.0 * h));
        }
        h /= 10.0;
    }
    unreachable!("the last attempt always returns")
}

/// Compares analytic gradients of `objective` at `params` against central
/// differences, per sampled coordinate and along random directions.
pub fn check_gradient<F>(params: &ParamSet<f64>, opts: &GradCheckOptions, objective: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mode = ExecMode::Sequential;
    let (_, grads) = gradient(params, mode, &objective)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let h = opts.step;
    let eval_at = |p: &ParamSet<f64>| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new(mode);
        let vars: Vec<Var> = p
            .leaves()
            .iter()
            .map(|l| tape.constant(l.tensor.clone()))
            .collect::<Result<_>>()?;
        let root = objective(&mut tape, &vars)?;
        Ok((tape.value(root).item(), tape.relu_pattern()))
    };

    for (li, leaf) in params.leaves().iter().enumerate() {
        let Some(g) = grads.get(li) else { continue };
        let n = leaf.tensor.len();
        let picks: Vec<usize> = if n <= opts.coords_per_leaf {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.coords_per_leaf).into_vec()
        };
        for i in picks {
            let at = |t: f64| {
                let mut p = params.clone();
                p.leaves_mut()[li].tensor.data_mut()[i] += t;
                eval_at(&p)
            };
            let numeric = piecewise_central(at, h, opts.kink_shrinks)?;
            report.record(format!("{}[{i}]", leaf.name), g.data()[i], numeric, opts.abs_floor);
        }
    }

    for d in 0..opts.directions {
        let mut dir: Vec<Vec<f64>> = params
            .leaves()
            .iter()
            .map(|l| {
                if l.requires_grad {
                    (0..l.tensor.len()).map(|_| rng.sample(StandardNormal)).collect()
                } else {
                    vec![0.0; l.tensor.len()]
                }
            })
            .collect();
        let norm = dir.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        dir.iter_mut().flatten().for_each(|v| *v /= norm);
        let analytic: f64 = dir
            .iter()
            .enumerate()
            .filter_map(|(li, dv)| grads.get(li).map(|g| g.data().iter().zip(dv).map(|(a, b)| a * b).sum::<f64>()))
            .sum();
        let at = |t: f64| {
            let mut p = params.clone();
            for (leaf, dv) in p.leaves_mut().iter_mut().zip(&dir) {
                for (x, v) in leaf.tensor.data_mut().iter_mut().zip(dv) {
                    *x += t * v;
                }
            }
            eval_at(&p)
        };
        let numeric = piecewise_central(at, h, opts.kink_shrinks)?;
        report.record(format!("direction {d}"), analytic, numeric, opts.abs_floor);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stencil_shrinks_away_from_a_kink() {
        // |t − 0.003| + t²: slope −1 at 0, kink just inside the first stencil.
        let f = |t: f64| Ok(((t - 0.003).abs() + t * t, vec![t > 0.003]));
        assert!((piecewise_central(f, 0.01, 0).unwrap() - (-1.0)).abs() > 0.5);
        assert!((piecewise_central(f, 0.01, 2).unwrap() - (-1.0)).abs() < 1e-9);
    }
}
