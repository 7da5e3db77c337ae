//! Coefficients of the reduced (limit) equation
//!
//! ```text
//! dX = (F + C)(t, X) dt + sigma(t, X) dW + G dB
//! ```
//!
//! where `C` is the Stratonovich correction of the smooth-noise driving term
//! and `G G^T = sum_{l,m} b_{l,m} b_{l,m}^T` is the covariance of the extra
//! noise generated by the quadratic coupling. `B` is a standard
//! d-dimensional Wiener process independent of `W`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{shape_err, Error, Result};
use crate::models::{validate_zero_mean, AbstractModel, ClimateModel};
use crate::spectral::{Bilinear, LinearMap};

/// `C^i = 1/2 sum_m q_m sum_j D_j sigma^{i,m} sigma^{j,m}` from a diffusion
/// matrix and its derivative `[i][j][m]`.
pub fn correction_from(sigma: &LinearMap, dsigma: &Bilinear, q: &[f64]) -> Vec<f64> {
    let (d, _, m) = dsigma.shape();
    (0..d)
        .map(|i| {
            let mut acc = 0.0;
            for (k, qk) in q.iter().enumerate().take(m) {
                if *qk == 0.0 {
                    continue;
                }
                let inner: f64 = (0..d).map(|j| dsigma.get(i, j, k) * sigma.get(j, k)).sum();
                acc += qk * inner;
            }
            0.5 * acc
        })
        .collect()
}

/// Stratonovich correction of `model` at `(t, x)`.
pub fn stratonovich_correction(model: &AbstractModel, t: f64, x: &[f64]) -> Vec<f64> {
    let sigma = model.eval_sigma(t, x);
    let ds = model.dsigma(t, x);
    correction_from(&sigma, &ds, model.space().q())
}

/// `b^i_{l,m} = beta^i_{l,m} sqrt(q_l q_m / 2)`.
pub fn diffusion_b(beta: &Bilinear, q: &[f64]) -> Result<Bilinear> {
    let (d, a, b) = beta.shape();
    if a != q.len() || b != q.len() {
        return Err(shape_err("diffusion_b", format!("({d}, {0}, {0})", q.len()), format!("{:?}", beta.shape())));
    }
    Ok(Bilinear::from_fn(d, a, b, |i, l, m| beta.get(i, l, m) * (q[l] * q[m] / 2.0).sqrt()))
}

/// `sum_{l,m} b^i_{l,m} b^j_{l,m}`.
pub fn extra_covariance(b: &Bilinear) -> LinearMap {
    let (d, a, c) = b.shape();
    let slab = a * c;
    LinearMap::from_fn(d, d, |i, j| {
        b.data()[i * slab..(i + 1) * slab]
            .iter()
            .zip(&b.data()[j * slab..(j + 1) * slab])
            .map(|(x, y)| x * y)
            .sum()
    })
}

/// Factor `G` with `G G^T = cov` from the symmetric eigendecomposition,
/// clipping eigenvalues in `[-1e-12 scale, 0)` to zero.
pub fn psd_factor(cov: &LinearMap) -> Result<LinearMap> {
    let d = cov.rows();
    if cov.cols() != d {
        return Err(shape_err("covariance", "square", format!("{}x{}", d, cov.cols())));
    }
    let mat = DMatrix::from_fn(d, d, |i, j| 0.5 * (cov.get(i, j) + cov.get(j, i)));
    let scale = cov.max_abs().max(1e-300);
    let eig = SymmetricEigen::new(mat);
    if let Some(bad) = eig.eigenvalues.iter().find(|l| **l < -1e-12 * scale) {
        return Err(Error::InvalidParam {
            name: "extra_cov",
            reason: format!("not positive semidefinite (eigenvalue {bad:.3e})"),
        });
    }
    let roots: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
    Ok(LinearMap::from_fn(d, d, |i, k| eig.eigenvectors[(i, k)] * roots[k]))
}

/// Coefficients of the limit equation.
#[derive(Clone, Debug)]
pub struct ReducedModel {
    model: AbstractModel,
    b: Bilinear,
    extra_cov: LinearMap,
    extra_chol: LinearMap,
}

impl ReducedModel {
    pub fn model(&self) -> &AbstractModel {
        &self.model
    }

    pub fn d(&self) -> usize {
        self.model.d()
    }

    pub fn m(&self) -> usize {
        self.model.m()
    }

    pub fn b(&self) -> &Bilinear {
        &self.b
    }

    pub fn extra_cov(&self) -> &LinearMap {
        &self.extra_cov
    }

    pub fn extra_chol(&self) -> &LinearMap {
        &self.extra_chol
    }

    pub fn has_extra_noise(&self) -> bool {
        self.extra_cov.max_abs() > 0.0
    }

    /// `F + C` at `(t, x)`.
    pub fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64], sigma_buf: &mut LinearMap) {
        self.model.drift().eval(t, x, out);
        if self.model.has_constant_sigma() {
            return;
        }
        self.model.diffusion().eval(t, x, sigma_buf);
        let ds = self.model.dsigma(t, x);
        let c = correction_from(sigma_buf, &ds, self.model.space().q());
        for (o, ci) in out.iter_mut().zip(&c) {
            *o += ci;
        }
    }

    pub fn drift(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d()];
        let mut buf = LinearMap::zeros(self.d(), self.m());
        self.drift_into(t, x, &mut out, &mut buf);
        out
    }
}

/// Builds the limit equation; refuses models violating the zero-mean
/// condition, for which no limit exists at this scaling.
pub fn build_reduced(model: AbstractModel) -> Result<ReducedModel> {
    let q = model.space().q().to_vec();
    let zm = validate_zero_mean(model.beta(), &q)?;
    if !zm.pass {
        return Err(Error::Assumption {
            condition: "zero-mean condition (A5)",
            max_residual: zm.max_abs,
            residuals: zm.residual,
        });
    }
    let b = diffusion_b(model.beta(), &q)?;
    let extra_cov = extra_covariance(&b);
    let extra_chol = psd_factor(&extra_cov)?;
    Ok(ReducedModel {
        model,
        b,
        extra_cov,
        extra_chol,
    })
}

/// Correction of the lowered climate model in the simplified form that
/// keeps only the `B112 . B112` contraction:
/// `1/2 sum_m q_m sum_j B112[i][j][m] (B112(x, f_m))_j`.
pub fn climate_simplified_correction(cm: &ClimateModel, x: &[f64]) -> Vec<f64> {
    let (d, m) = (cm.d(), cm.m());
    let q = cm.space.q();
    (0..d)
        .map(|i| {
            let mut acc = 0.0;
            for k in 0..m {
                let mut inner = 0.0;
                for j in 0..d {
                    let bx: f64 = (0..d).map(|l| cm.b112.get(j, l, k) * x[l]).sum();
                    inner += cm.b112.get(i, j, k) * bx;
                }
                acc += q[k] * inner;
            }
            0.5 * acc
        })
        .collect()
}

/// Constant vector by which the generic correction of the lowered climate
/// model exceeds [`climate_simplified_correction`]:
/// `1/2 sum_m q_m sum_j B112[i][j][m] A12[j][m]`.
pub fn climate_correction_discrepancy(cm: &ClimateModel) -> Vec<f64> {
    let (d, m) = (cm.d(), cm.m());
    let q = cm.space.q();
    (0..d)
        .map(|i| {
            0.5 * (0..m)
                .map(|k| q[k] * (0..d).map(|j| cm.b112.get(i, j, k) * cm.a12.get(j, k)).sum::<f64>())
                .sum::<f64>()
        })
        .collect()
}
