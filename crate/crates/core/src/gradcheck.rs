//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;

/// A scalar objective over named parameter groups, evaluated at 64-bit
/// precision.
pub trait Objective {
    /// `(name, element count)` for every parameter group.
    fn groups(&self) -> Vec<(String, usize)>;

    fn get(&self, group: usize, index: usize) -> f64;

    fn set(&mut self, group: usize, index: usize, value: f64);

    fn loss(&self) -> Result<f64>;

    /// Analytic gradient, one vector per group.
    fn gradient(&self) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    pub step: f64,
    /// Coordinates sampled per group; groups at or below this size are
    /// checked exhaustively.
    pub coordinates_per_group: usize,
    /// Random sign directions per group, scaled to unit length. Each one
    /// perturbs every element of the group at once.
    pub directions_per_group: usize,
    /// Errors are relative to `max(|analytic|, |numeric|, floor * max(1, |loss|))`,
    /// so coordinates the loss is invariant to compare against rounding noise
    /// at the loss's own scale.
    pub floor: f64,
    /// A failing check is repeated this many times, each at a tenth of the
    /// previous step, and the smallest error is kept. A piecewise-linear kink
    /// within the step corrupts the difference quotient; a wrong gradient
    /// stays wrong at every step.
    pub retries: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-5,
            coordinates_per_group: 8,
            directions_per_group: 2,
            floor: 1e-6,
            retries: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub checks: usize,
    pub worst_relative_error: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub max_relative_error: f64,
    pub passed: bool,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    /// Groups sorted by descending error, truncated to `n`.
    pub fn worst(&self, n: usize) -> Vec<&GroupReport> {
        let mut groups: Vec<_> = self.groups.iter().collect();
        groups.sort_by(|a, b| b.worst_relative_error.total_cmp(&a.worst_relative_error));
        groups.truncate(n);
        groups
    }
}

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference at `options.step`, retried at shrinking steps while
/// it disagrees with `analytic`. Returns the closest estimate and its error.
fn settle(
    analytic: f64,
    floor: f64,
    options: &GradCheckOptions,
    mut difference: impl FnMut(f64) -> Result<f64>,
) -> Result<(f64, f64)> {
    let mut h = options.step;
    let mut best = (f64::NAN, f64::INFINITY);
    for _ in 0..=options.retries {
        let n = difference(h)?;
        let err = relative_error(analytic, n, floor);
        if err < best.1 || best.0.is_nan() {
            best = (n, err);
        }
        if best.1 <= options.tolerance {
            break;
        }
        h /= 10.0;
    }
    Ok(best)
}

pub fn grad_check<O: Objective>(objective: &mut O, options: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let analytic = objective.gradient()?;
    let floor = options.floor * objective.loss()?.abs().max(1.0);
    let mut groups = Vec::new();
    for (g, (name, len)) in objective.groups().into_iter().enumerate() {
        let mut report = GroupReport {
            name,
            checks: 0,
            worst_relative_error: 0.0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        let record = |a: f64, n: f64, report: &mut GroupReport| {
            let err = relative_error(a, n, floor);
            report.checks += 1;
            if err > report.worst_relative_error || err.is_nan() {
                report.worst_relative_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst_analytic = a;
                report.worst_numeric = n;
            }
        };

        let coords: Vec<usize> = if len <= options.coordinates_per_group {
            (0..len).collect()
        } else {
            sample(&mut rng, len, options.coordinates_per_group).into_vec()
        };
        for i in coords {
            let original = objective.get(g, i);
            let a = analytic[g][i];
            let (n, _) = settle(a, floor, options, |h| {
                objective.set(g, i, original + h);
                let plus = objective.loss()?;
                objective.set(g, i, original - h);
                let minus = objective.loss()?;
                objective.set(g, i, original);
                Ok((plus - minus) / (2.0 * h))
            })?;
            record(a, n, &mut report);
        }

        for _ in 0..options.directions_per_group {
            let unit = 1.0 / (len as f64).sqrt();
            let direction: Vec<f64> = (0..len).map(|_| if rng.random::<bool>() { unit } else { -unit }).collect();
            let original: Vec<f64> = (0..len).map(|i| objective.get(g, i)).collect();
            let shift = |objective: &mut O, offset: f64| {
                for (i, (&o, &d)) in original.iter().zip(&direction).enumerate() {
                    objective.set(g, i, o + offset * d);
                }
            };
            let a: f64 = analytic[g].iter().zip(&direction).map(|(x, d)| x * d).sum();
            let (n, _) = settle(a, floor, options, |h| {
                shift(objective, h);
                let plus = objective.loss()?;
                shift(objective, -h);
                let minus = objective.loss()?;
                shift(objective, 0.0);
                Ok((plus - minus) / (2.0 * h))
            })?;
            record(a, n, &mut report);
        }
        groups.push(report);
    }
    let max_relative_error = groups.iter().map(|g| g.worst_relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        tolerance: options.tolerance,
        max_relative_error,
        passed: max_relative_error <= options.tolerance,
        groups,
    })
}

type LossFn = Box<dyn Fn(&[Vec<f64>]) -> Result<f64>>;
type GradFn = Box<dyn Fn(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>>;

/// An [`Objective`] assembled from closures over plain parameter vectors.
pub struct FnObjective {
    names: Vec<String>,
    params: Vec<Vec<f64>>,
    loss: LossFn,
    grad: GradFn,
}

impl FnObjective {
    pub fn new(
        groups: Vec<(String, Vec<f64>)>,
        loss: impl Fn(&[Vec<f64>]) -> Result<f64> + 'static,
        grad: impl Fn(&[Vec<f64>]) -> Result<Vec<Vec<f64>>> + 'static,
    ) -> Self {
        let (names, params) = groups.into_iter().unzip();
        Self {
            names,
            params,
            loss: Box::new(loss),
            grad: Box::new(grad),
        }
    }
}

impl Objective for FnObjective {
    fn groups(&self) -> Vec<(String, usize)> {
        self.names.iter().cloned().zip(self.params.iter().map(Vec::len)).collect()
    }

    fn get(&self, group: usize, index: usize) -> f64 {
        self.params[group][index]
    }

    fn set(&mut self, group: usize, index: usize, value: f64) {
        self.params[group][index] = value;
    }

    fn loss(&self) -> Result<f64> {
        (self.loss)(&self.params)
    }

    fn gradient(&self) -> Result<Vec<Vec<f64>>> {
        (self.grad)(&self.params)
    }
}
