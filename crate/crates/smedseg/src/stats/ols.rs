//! Ordinary least squares with inference: coefficients via Householder QR,
//! standard errors from the unscaled covariance `(X'X)^-1`, two-sided
//! p-values from the t distribution with `n - p` degrees of freedom.

use serde::{Deserialize, Serialize};

use super::special::student_t_two_sided_p;
use super::StatsError;

/// Row-major design matrix with named columns. The intercept is an explicit
/// first column.
#[derive(Clone, Debug)]
pub struct DesignMatrix {
    names: Vec<String>,
    data: Vec<f64>,
    rows: usize,
}

impl DesignMatrix {
    /// Starts a design with an all-ones intercept column.
    pub fn with_intercept(rows: usize) -> Self {
        DesignMatrix {
            names: vec!["intercept".to_string()],
            data: vec![1.0; rows],
            rows,
        }
    }

    pub fn push_column(&mut self, name: &str, values: &[f64]) -> Result<(), StatsError> {
        if values.len() != self.rows {
            return Err(StatsError::DegenerateSample(format!(
                "column {name} has {} rows, design has {}",
                values.len(),
                self.rows
            )));
        }
        self.names.push(name.to_string());
        self.data.extend_from_slice(values);
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn at(&self, row: usize, col: usize) -> f64 {
        self.data[col * self.rows + row]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegressionResult {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_statistics: Vec<f64>,
    pub p_values: Vec<f64>,
    pub r_squared: f64,
    pub n: usize,
    pub dof: usize,
}

/// Least squares of `y` on the design. Rank deficiency is reported with the
/// offending column's name. When the fit is numerically exact (residual
/// variance at rounding level), t statistics degenerate; coefficients that
/// are themselves at rounding level get p = 1 and all others p = 0.
pub fn ols_regression(y: &[f64], design: &DesignMatrix) -> Result<RegressionResult, StatsError> {
    let n = design.rows();
    let p = design.cols();
    if y.len() != n {
        return Err(StatsError::DegenerateSample(format!(
            "y has {} rows, design has {n}",
            y.len()
        )));
    }
    if n <= p {
        return Err(StatsError::DegenerateSample(format!(
            "need n > p for inference, got n = {n}, p = {p}"
        )));
    }

    // Householder QR on [X | y], column-major working copy.
    let mut a = vec![0.0; n * p];
    for c in 0..p {
        for r in 0..n {
            a[c * n + r] = design.at(r, c);
        }
    }
    let mut z: Vec<f64> = y.to_vec();
    let col_scale: Vec<f64> = (0..p)
        .map(|c| (0..n).map(|r| a[c * n + r] * a[c * n + r]).sum::<f64>().sqrt())
        .collect();
    let overall_scale = col_scale.iter().cloned().fold(0.0f64, f64::max).max(1e-300);

    for j in 0..p {
        // Householder vector for column j, rows j..n.
        let norm: f64 = (j..n).map(|r| a[j * n + r] * a[j * n + r]).sum::<f64>().sqrt();
        if norm <= 1e-12 * overall_scale {
            return Err(StatsError::RankDeficient {
                column: design.names()[j].clone(),
            });
        }
        let alpha = if a[j * n + j] >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..n).map(|r| a[j * n + r]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            // Apply H = I - 2 v v^T / |v|^2 to remaining columns and to z.
            for c in j..p {
                let dot: f64 = (0..v.len()).map(|k| v[k] * a[c * n + j + k]).sum();
                let f = 2.0 * dot / vnorm2;
                for k in 0..v.len() {
                    a[c * n + j + k] -= f * v[k];
                }
            }
            let dot: f64 = (0..v.len()).map(|k| v[k] * z[j + k]).sum();
            let f = 2.0 * dot / vnorm2;
            for k in 0..v.len() {
                z[j + k] -= f * v[k];
            }
        }
        a[j * n + j] = alpha;
        for r in j + 1..n {
            a[j * n + r] = 0.0;
        }
        // Rank check on the pivot after reflection.
        if a[j * n + j].abs() <= 1e-12 * overall_scale {
            return Err(StatsError::RankDeficient {
                column: design.names()[j].clone(),
            });
        }
    }

    // Back substitution: R beta = z[0..p].
    let r_at = |row: usize, col: usize| a[col * n + row];
    let mut beta = vec![0.0; p];
    for i in (0..p).rev() {
        let mut acc = z[i];
        for k in i + 1..p {
            acc -= r_at(i, k) * beta[k];
        }
        beta[i] = acc / r_at(i, i);
    }

    let rss: f64 = z[p..].iter().map(|v| v * v).sum();
    let dof = n - p;
    let sigma2 = rss / dof as f64;

    // (X'X)^-1 = R^-1 R^-T; std error of beta_i is sigma * ||row i of R^-1||.
    let mut rinv = vec![0.0; p * p]; // row-major p x p
    for col in 0..p {
        // Solve R x = e_col.
        let mut x = vec![0.0; p];
        for i in (0..=col).rev() {
            let mut acc = if i == col { 1.0 } else { 0.0 };
            for k in i + 1..=col {
                acc -= r_at(i, k) * x[k];
            }
            x[i] = acc / r_at(i, i);
        }
        for i in 0..p {
            rinv[i * p + col] = x[i];
        }
    }
    let y_rms = (y.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let exact_fit = sigma2.sqrt() <= 1e-12 * y_rms.max(1.0);
    let mut std_errors = vec![0.0; p];
    let mut t_stats = vec![0.0; p];
    let mut p_values = vec![0.0; p];
    for i in 0..p {
        let row_norm2: f64 = (i..p).map(|k| rinv[i * p + k] * rinv[i * p + k]).sum();
        std_errors[i] = (sigma2 * row_norm2).sqrt();
        if exact_fit {
            let negligible = beta[i].abs() <= 1e-8 * y_rms.max(1.0);
            t_stats[i] = if negligible { 0.0 } else { f64::INFINITY };
            p_values[i] = if negligible { 1.0 } else { 0.0 };
        } else {
            t_stats[i] = beta[i] / std_errors[i];
            p_values[i] = student_t_two_sided_p(t_stats[i], dof as f64);
        }
    }

    let y_mean = y.iter().sum::<f64>() / n as f64;
    let tss: f64 = y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum();
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };

    Ok(RegressionResult {
        names: design.names().to_vec(),
        coefficients: beta,
        std_errors,
        t_statistics: t_stats,
        p_values,
        r_squared,
        n,
        dof,
    })
}
