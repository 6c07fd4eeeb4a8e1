use crate::error::{LabError, Result};

/// Solves `a x = b` for square `a` (row-major, `n x n`) by Gaussian
/// elimination with partial pivoting. Pivots below `tol * max|a|` are
/// treated as rank deficiency.
pub fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize, tol: f64) -> Result<Vec<f64>> {
    if a.len() != n * n || b.len() != n {
        return Err(LabError::dim("solve", &[a.len(), b.len()], &[n * n, n]));
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(LabError::DegenerateFit("all-zero system".into()));
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .expect("non-empty range");
        if a[pivot * n + col].abs() <= tol * scale {
            return Err(LabError::DegenerateFit(format!("column {col} is linearly dependent")));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[row * n + k] -= f * a[col * n + k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row * n + row];
    }
    Ok(x)
}

/// Least squares `y ~ c + x w` through centered and scaled normal
/// equations. `x` is `rows x k`, row-major. Returns `(c, w)`.
pub fn least_squares(x: &[f64], y: &[f64], k: usize) -> Result<(f64, Vec<f64>)> {
    let rows = y.len();
    if x.len() != rows * k || rows <= k {
        return Err(LabError::DegenerateFit(format!(
            "{rows} samples cannot determine {k} coefficients and an intercept"
        )));
    }
    let n = rows as f64;
    let mean: Vec<f64> = (0..k)
        .map(|j| (0..rows).map(|r| x[r * k + j]).sum::<f64>() / n)
        .collect();
    let y_mean = y.iter().sum::<f64>() / n;
    let spread: Vec<f64> = (0..k)
        .map(|j| {
            ((0..rows).map(|r| (x[r * k + j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect();
    if let Some(j) = spread.iter().position(|&s| s == 0.0) {
        return Err(LabError::DegenerateFit(format!("regressor {j} is constant")));
    }
    let z = |r: usize, j: usize| (x[r * k + j] - mean[j]) / spread[j];
    let mut ata = vec![0.0; k * k];
    let mut aty = vec![0.0; k];
    for (r, &yr) in y.iter().enumerate() {
        let dy = yr - y_mean;
        for i in 0..k {
            let zi = z(r, i);
            aty[i] += zi * dy;
            for j in 0..k {
                ata[i * k + j] += zi * z(r, j);
            }
        }
    }
    let scaled = solve(ata, aty, k, 1e-12)?;
    let w: Vec<f64> = scaled.iter().zip(&spread).map(|(v, s)| v / s).collect();
    let c = y_mean - w.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>();
    Ok((c, w))
}
