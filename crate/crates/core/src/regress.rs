//! Least-squares regression with column standardization and rank
//! reduction, used for conditional expectations in the backward sweeps.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const RANK_TOL: f64 = 1e-10;

/// Fitted linear model `E[y | x] ≈ φ(x)ᵀ c` for several targets at once.
#[derive(Debug, Clone)]
pub struct LinearFit {
    centers: Vec<f64>,
    scales: Vec<f64>,
    /// Columns kept after dropping constant or collinear features.
    pub kept: Vec<usize>,
    gram_pinv: DMatrix<f64>,
    coef: DMatrix<f64>,
    /// Residual variance per target.
    pub residual_var: Vec<f64>,
    pub rank: usize,
    pub samples: usize,
}

/// Fits every column of `targets` (`samples × T`) on `design`
/// (`samples × basis`). Column 0 of `design` must be the intercept.
pub fn fit(design: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<LinearFit> {
    let (ns, nb) = design.shape();
    if ns != targets.nrows() {
        return Err(Error::Regression(format!("{ns} design rows but {} target rows", targets.nrows())));
    }
    if ns == 0 || nb == 0 {
        return Err(Error::Regression("empty design".into()));
    }
    let mut centers = vec![0.0; nb];
    let mut scales = vec![1.0; nb];
    let mut kept = vec![0];
    for j in 1..nb {
        let col = design.column(j);
        let mean = col.mean();
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ns as f64).sqrt();
        if sd > 1e-12 * (1.0 + mean.abs()) {
            centers[j] = mean;
            scales[j] = sd;
            kept.push(j);
        }
    }
    let z = standardized(design, &centers, &scales, &kept);
    let gram = z.transpose() * &z;
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::Regression("degenerate design".into()));
    }
    let mut rank = 0;
    let mut inv_vals = DVector::zeros(kept.len());
    for (i, l) in eig.eigenvalues.iter().enumerate() {
        if *l > RANK_TOL * max {
            inv_vals[i] = 1.0 / l;
            rank += 1;
        }
    }
    let v = &eig.eigenvectors;
    let gram_pinv = v * DMatrix::from_diagonal(&inv_vals) * v.transpose();
    let coef = &gram_pinv * (z.transpose() * targets);
    let resid = targets - &z * &coef;
    let dof = (ns as f64 - rank as f64).max(1.0);
    let residual_var = (0..targets.ncols()).map(|c| resid.column(c).norm_squared() / dof).collect();
    Ok(LinearFit { centers, scales, kept, gram_pinv, coef, residual_var, rank, samples: ns })
}

fn standardized(design: &DMatrix<f64>, centers: &[f64], scales: &[f64], kept: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(design.nrows(), kept.len(), |i, c| {
        let j = kept[c];
        if j == 0 {
            design[(i, 0)]
        } else {
            (design[(i, j)] - centers[j]) / scales[j]
        }
    })
}

impl LinearFit {
    /// Fitted values at the design rows used for the fit (or any rows with
    /// the same basis).
    pub fn predict(&self, design: &DMatrix<f64>) -> DMatrix<f64> {
        standardized(design, &self.centers, &self.scales, &self.kept) * &self.coef
    }

    /// Prediction and its standard error for one basis row and target.
    pub fn predict_one(&self, row: &[f64], target: usize) -> (f64, f64) {
        let z = DVector::from_iterator(
            self.kept.len(),
            self.kept.iter().map(|&j| if j == 0 { row[0] } else { (row[j] - self.centers[j]) / self.scales[j] }),
        );
        let value = z.dot(&self.coef.column(target));
        let var = self.residual_var[target] * (z.transpose() * &self.gram_pinv * &z)[(0, 0)];
        (value, var.max(0.0).sqrt())
    }

    pub fn residual_rms(&self) -> f64 {
        (self.residual_var.iter().sum::<f64>() / self.residual_var.len().max(1) as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_linear_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 500;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let design = DMatrix::from_fn(n, 3, |i, j| x[i].powi(j as i32));
        let targets = DMatrix::from_fn(n, 1, |i, _| 1.0 - 2.0 * x[i] + 0.5 * x[i] * x[i]);
        let f = fit(&design, &targets).unwrap();
        let pred = f.predict(&design);
        assert!((pred - &targets).amax() < 1e-10);
        let (v, se) = f.predict_one(&[1.0, 0.3, 0.09], 0);
        assert!((v - (1.0 - 0.6 + 0.045)).abs() < 1e-10 && se < 1e-8);
    }

    #[test]
    fn drops_constant_and_collinear_columns() {
        let n = 50;
        let design = DMatrix::from_fn(n, 4, |i, j| match j {
            0 => 1.0,
            1 => 3.0,
            2 => i as f64,
            _ => 2.0 * i as f64,
        });
        let targets = DMatrix::from_fn(n, 1, |i, _| i as f64 + 1.0);
        let f = fit(&design, &targets).unwrap();
        assert_eq!(f.kept, vec![0, 2, 3]);
        assert_eq!(f.rank, 2);
        assert!((f.predict(&design) - &targets).amax() < 1e-9);
    }

    #[test]
    fn mean_standard_error_for_intercept_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 400;
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let design = DMatrix::from_element(n, 1, 1.0);
        let f = fit(&design, &DMatrix::from_column_slice(n, 1, &y)).unwrap();
        let (m, se) = f.predict_one(&[1.0], 0);
        let (mm, sse) = crate::util::mean_se(&y);
        assert!((m - mm).abs() < 1e-12);
        assert!((se - sse).abs() < 1e-12);
    }
}
