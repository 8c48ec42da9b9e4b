//! Finite-difference gradient verification.

use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradEntry {
    pub input_index: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Checks the analytic gradient of a scalar-valued function against
/// central differences, coordinate by coordinate.
///
/// Relative error uses denominator max(|analytic|, |numeric|, 1e-2),
/// so for near-zero gradients the comparison is absolute at scale
/// 1e-2 * tol — above the cancellation noise of central differences at
/// h = 1e-5 but far below any real gradient bug. The report passes iff
/// the max over all coordinates is <= tol.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> GradReport
where
    F: Fn(&[Tensor]) -> Tensor,
{
    assert!(h > 0.0 && h <= 1e-3, "h must be in (0, 1e-3]");
    for t in inputs {
        t.zero_grad();
    }
    let loss = f(inputs);
    loss.backward().expect("grad_check requires a scalar loss");
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut entries = Vec::new();
    let mut max_rel = 0.0_f64;
    for (ii, t) in inputs.iter().enumerate() {
        let base = t.data();
        for coord in 0..base.len() {
            let mut plus = base.clone();
            plus[coord] += h;
            t.set_data(plus);
            let fp = f(inputs).item();

            let mut minus = base.clone();
            minus[coord] -= h;
            t.set_data(minus);
            let fm = f(inputs).item();

            t.set_data(base.clone());

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ii][coord];
            let denom = a.abs().max(numeric.abs()).max(1e-2);
            let rel_err = (a - numeric).abs() / denom;
            max_rel = max_rel.max(rel_err);
            entries.push(GradEntry {
                input_index: ii,
                coord,
                analytic: a,
                numeric,
                rel_err,
            });
        }
    }
    GradReport {
        entries,
        max_rel_err: max_rel,
        tol,
        pass: max_rel <= tol,
    }
}
