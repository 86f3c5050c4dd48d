#![allow(dead_code)]

use sparsefeat::data::{grayscale, resize_bilinear};
use sparsefeat::linalg::{dot, Matrix};
use sparsefeat::Tensor3;

/// `‖x − Dz‖² + λ‖z‖₁`
pub fn lasso_objective(d: &Matrix, x: &[f64], z: &[f64], lambda: f64) -> f64 {
    let r: Vec<f64> = d.matvec(z).iter().zip(x).map(|(a, b)| a - b).collect();
    dot(&r, &r) + lambda * z.iter().map(|v| v.abs()).sum::<f64>()
}

/// Cyclic coordinate descent on the same objective, run to a fixed point.
pub fn lasso_cd(d: &Matrix, x: &[f64], lambda: f64) -> Vec<f64> {
    let n = d.cols();
    let cols: Vec<Vec<f64>> = (0..n).map(|j| d.column(j)).collect();
    let sq: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
    let mut z = vec![0.0; n];
    let mut resid = x.to_vec();
    for _ in 0..100_000 {
        let mut delta: f64 = 0.0;
        for j in 0..n {
            if sq[j] == 0.0 {
                continue;
            }
            // minimize over z_j: sq·z² − 2·z·(cᵀr + sq·z_j) + λ|z|
            let rho = dot(&cols[j], &resid) + sq[j] * z[j];
            let new = rho.signum() * (rho.abs() - lambda / 2.0).max(0.0) / sq[j];
            let step = new - z[j];
            if step != 0.0 {
                for (r, c) in resid.iter_mut().zip(&cols[j]) {
                    *r -= step * c;
                }
                z[j] = new;
                delta = delta.max(step.abs());
            }
        }
        if delta < 1e-15 {
            break;
        }
    }
    z
}

/// Grayscale, resized, zero mean, unit variance.
pub fn standardized_gray(img: &Tensor3, side: usize) -> Tensor3 {
    let mut x = resize_bilinear(&grayscale(img).unwrap(), side, side).unwrap();
    let m = x.mean();
    x.data_mut().iter_mut().for_each(|v| *v -= m);
    let sd = (x.norm_sq() / x.len() as f64).sqrt();
    x.scale(1.0 / sd);
    x
}
