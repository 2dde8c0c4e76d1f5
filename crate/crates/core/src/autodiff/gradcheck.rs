//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference half step.
    pub step: f64,
    /// Coordinates to compare (all of them when fewer exist).
    pub samples: usize,
    pub seed: u64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            samples: 64,
            seed: 0,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coordinate {
    pub param: usize,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    /// `(analytic, numeric)` at `worst`.
    pub worst_values: (f64, f64),
    /// Coordinates actually compared.
    pub checked: usize,
    /// Coordinates whose perturbation crossed an activation or loss kink.
    pub skipped_kinks: usize,
    /// Coordinates rejected by the caller's exclusion mask.
    pub excluded: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare backpropagated gradients of the scalar built by `f` against
/// central differences, one parameter coordinate at a time.
///
/// `f` receives the graph and the leaf ids of `params` (in order) and must
/// return a single-element node. Perturbations that change the graph's
/// [`Graph::kink_signature`] are skipped; `exclude` can reject further
/// coordinates by `(param, index)`.
pub fn grad_check<F>(
    params: &[Tensor<f64>],
    f: F,
    opts: &GradCheckOptions,
    exclude: Option<&dyn Fn(Coordinate) -> bool>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    if opts.step.is_nan() || opts.step <= 0.0 {
        return Err(Error::InvalidArgument("grad_check: step must be positive".into()));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &ids)?;
        Ok((g.scalar(loss)?, g.kink_signature()))
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(g);

    let mut coords: Vec<Coordinate> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.shape().len()).map(move |index| Coordinate { param: p, index }))
        .collect();
    coords.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
        skipped_kinks: 0,
        excluded: 0,
        tolerance: opts.tolerance,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for c in coords {
        if report.checked >= opts.samples {
            break;
        }
        if exclude.is_some_and(|ex| ex(c)) {
            report.excluded += 1;
            continue;
        }
        let orig = work[c.param].data()[c.index];
        work[c.param].data_mut()[c.index] = orig + opts.step;
        let (plus, sig_plus) = eval(&work)?;
        work[c.param].data_mut()[c.index] = orig - opts.step;
        let (minus, sig_minus) = eval(&work)?;
        work[c.param].data_mut()[c.index] = orig;

        let a = analytic[c.param].data()[c.index];
        let n = (plus - minus) / (2.0 * opts.step);
        if a.is_nan() || n.is_nan() {
            return Err(Error::Numeric(format!(
                "grad_check: NaN at param {} index {} (analytic {a}, numeric {n})",
                c.param, c.index
            )));
        }
        if sig_plus != sig_minus {
            report.skipped_kinks += 1;
            continue;
        }
        let err = relative_error(a, n);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(c);
            report.worst_values = (a, n);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn linear_function_has_zero_error() {
        // f(x) = sum(2x) written as 2 * N * mean|x - (-100)|.
        let x = Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, y, x| (y * 3 + x) as f64 * 0.1);
        let report = grad_check(
            &[x],
            |g, p| {
                let t = g.input(Tensor::full(Shape::new(1, 1, 3, 3), -100.0));
                let l = g.l1_loss(p[0], t)?;
                Ok(g.scalar_mul(l, 18.0))
            },
            &GradCheckOptions::default(),
            None,
        )
        .unwrap();
        assert_eq!(report.checked, 9);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn exclusion_mask_is_honoured() {
        let x = Tensor::full(Shape::new(1, 1, 1, 4), 1.0);
        let report = grad_check(
            &[x],
            |g, p| {
                let t = g.input(Tensor::zeros(Shape::new(1, 1, 1, 4)));
                g.l1_loss(p[0], t)
            },
            &GradCheckOptions::default(),
            Some(&|c: Coordinate| c.index.is_multiple_of(2)),
        )
        .unwrap();
        assert_eq!(report.excluded, 2);
        assert_eq!(report.checked, 2);
    }

    #[test]
    fn kink_crossings_are_skipped() {
        // |x| at x = 0 straddles the L1 kink for any step.
        let x = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let report = grad_check(
            &[x],
            |g, p| {
                let t = g.input(Tensor::zeros(Shape::new(1, 1, 1, 1)));
                g.l1_loss(p[0], t)
            },
            &GradCheckOptions::default(),
            None,
        )
        .unwrap();
        assert_eq!(report.skipped_kinks, 1);
        assert_eq!(report.checked, 0);
        assert!(!report.passed());
    }

    #[test]
    fn rejects_non_positive_step() {
        let opts = GradCheckOptions {
            step: 0.0,
            ..Default::default()
        };
        let r = grad_check(&[], |g, _| Ok(g.input(Tensor::zeros(Shape::new(1, 1, 1, 1)))), &opts, None);
        assert!(r.is_err());
    }
}
