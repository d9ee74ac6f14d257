//! Welch's unequal-variance two-sample t-test with Welch-Satterthwaite
//! degrees of freedom and a two-sided p-value.
//!
//! Welch rather than pooled-variance Student is the default here because
//! the cohorts being compared are routinely unbalanced.

use super::special::student_t_two_sided_p;
use super::StatsError;

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Returns `(t, two-sided p)`. Requires at least two observations per
/// sample and a nonzero variance in at least one of them.
pub fn t_test(x: &[f64], y: &[f64]) -> Result<(f64, f64), StatsError> {
    if x.len() < 2 || y.len() < 2 {
        return Err(StatsError::DegenerateSample(format!(
            "need >= 2 observations per group, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::DegenerateSample("non-finite observation".into()));
    }
    let (mx, vx) = mean_var(x);
    let (my, vy) = mean_var(y);
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let se2 = vx / nx + vy / ny;
    if se2 == 0.0 {
        return Err(StatsError::DegenerateSample(
            "both samples have zero variance".into(),
        ));
    }
    let t = (mx - my) / se2.sqrt();
    let dof = se2 * se2 / ((vx / nx).powi(2) / (nx - 1.0) + (vy / ny).powi(2) / (ny - 1.0));
    Ok((t, student_t_two_sided_p(t, dof)))
}
