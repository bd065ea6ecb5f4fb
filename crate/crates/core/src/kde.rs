//! Gaussian-kernel smoothing of the parametric integrands.
//!
//! With a Gaussian kernel of width `δ` centred at a sample `μ`, the smoothed
//! positive part has the closed form
//! `M(θ; μ, δ) = (μ - θ) Φ_N((μ - θ)/δ) + δ φ_N((μ - θ)/δ)`.
//! Sensitivity kernels integrate out to the sample value, so every smoothed
//! expectation reduces to sums of `M` and `g_k M` over the samples.

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::stats::{normal_cdf, normal_pdf, std_dev};

/// Smallest admissible bandwidth; guards batches whose samples all coincide.
pub const MIN_BANDWIDTH: f64 = 1e-12;

/// `∫ (q - θ)⁺ K_δ(q - μ) dq` for a Gaussian kernel.
pub fn gaussian_partial_moment(theta: f64, mu: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::param(format!("kernel bandwidth must be positive, got {delta}")));
    }
    Ok(partial_moment(theta, mu, delta))
}

#[inline]
pub(crate) fn partial_moment(theta: f64, mu: f64, delta: f64) -> f64 {
    let d = mu - theta;
    let x = d / delta;
    d * normal_cdf(x) + delta * normal_pdf(x)
}

/// Scott's rule `σ̂ N^{-1/5}`, floored at [`MIN_BANDWIDTH`].
pub fn scott_bandwidth(xs: &[f64]) -> f64 {
    (std_dev(xs) * (xs.len() as f64).powf(-0.2)).max(MIN_BANDWIDTH)
}

/// Per-marginal Scott bandwidths of one batch: `q` for the QoI and `sens[k]`
/// for each sensitivity.
#[derive(Debug, Clone, PartialEq)]
pub struct Bandwidths {
    pub q: f64,
    pub sens: Vec<f64>,
}

impl Bandwidths {
    pub fn scott(q: &[f64], grads: &[Vec<f64>]) -> Self {
        Bandwidths { q: scott_bandwidth(q), sens: grads.iter().map(|g| scott_bandwidth(g)).collect() }
    }
}

fn check_samples(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InsufficientSamples(format!("kernel smoothing needs at least 2 samples, got {n}")));
    }
    Ok(())
}

/// Column-major view of one level's samples: `q[i]` and `grads[k][i]`.
#[derive(Debug, Clone, Copy)]
pub struct Columns<'a> {
    pub q: &'a [f64],
    pub grads: &'a [Vec<f64>],
}

/// Sample means of `M(θ_r; Q_i, δ)` and `g_{k,i} M(θ_r; Q_i, δ)` at every θ.
/// Row `r` holds `[mean M, mean g_1 M, ..., mean g_d M]`.
pub fn smoothed_moments(thetas: &[f64], cols: Columns<'_>, delta: f64, exec: Execution) -> Result<Vec<Vec<f64>>> {
    check_samples(cols.q.len())?;
    if !(delta > 0.0) {
        return Err(Error::param(format!("kernel bandwidth must be positive, got {delta}")));
    }
    let n = cols.q.len() as f64;
    let d = cols.grads.len();
    Ok(exec.map(thetas.len(), |r| {
        let theta = thetas[r];
        let mut acc = vec![0.0; d + 1];
        for (i, &q) in cols.q.iter().enumerate() {
            let m = partial_moment(theta, q, delta);
            acc[0] += m;
            for k in 0..d {
                acc[k + 1] += cols.grads[k][i] * m;
            }
        }
        acc.iter().map(|a| a / n).collect()
    }))
}

/// Smoothed `Φ_l(θ) = θ + E[(Q - θ)⁺]/(1 - τ)`.
pub fn kde_phi(thetas: &[f64], q: &[f64], delta: f64, tau: f64) -> Result<Vec<f64>> {
    let rows = smoothed_moments(thetas, Columns { q, grads: &[] }, delta, Execution::Sequential)?;
    Ok(thetas.iter().zip(rows).map(|(t, row)| t + row[0] / (1.0 - tau)).collect())
}

/// Smoothed `Ψ_{l,k}(θ) = -E[(Q - θ)⁺ Q_{z^k}]/(1 - τ)`.
pub fn kde_psi(thetas: &[f64], q: &[f64], qz: &[f64], delta: f64, tau: f64) -> Result<Vec<f64>> {
    if qz.len() != q.len() {
        return Err(Error::param("QoI and sensitivity columns differ in length"));
    }
    let grads = [qz.to_vec()];
    let rows = smoothed_moments(thetas, Columns { q, grads: &grads }, delta, Execution::Sequential)?;
    Ok(rows.into_iter().map(|row| -row[1] / (1.0 - tau)).collect())
}

/// Smoothed level difference of `ψ` for one sensitivity:
/// `(1/N) Σ [Q_{z,l-1} M(θ; Q_{l-1}, δ_{l-1}) - Q_{z,l} M(θ; Q_l, δ_l)] / (1 - τ)`.
pub fn kde_level_difference(
    thetas: &[f64],
    fine: (&[f64], &[f64]),
    coarse: (&[f64], &[f64]),
    delta_fine: f64,
    delta_coarse: f64,
    tau: f64,
) -> Result<Vec<f64>> {
    let n = fine.0.len();
    if fine.1.len() != n || coarse.0.len() != n || coarse.1.len() != n {
        return Err(Error::param("paired columns differ in length"));
    }
    let gf = [fine.1.to_vec()];
    let gc = [coarse.1.to_vec()];
    let f = smoothed_moments(thetas, Columns { q: fine.0, grads: &gf }, delta_fine, Execution::Sequential)?;
    let c = smoothed_moments(thetas, Columns { q: coarse.0, grads: &gc }, delta_coarse, Execution::Sequential)?;
    Ok(f.iter().zip(&c).map(|(f, c)| (c[1] - f[1]) / (1.0 - tau)).collect())
}

/// `max |δ⁴ f / h⁴|` over the interior of a uniformly sampled function.
pub fn fourth_derivative_sup_norm(values: &[f64], h: f64) -> Result<f64> {
    if values.len() < 9 {
        return Err(Error::param(format!("fourth differences need at least 9 points, got {}", values.len())));
    }
    if !(h > 0.0) {
        return Err(Error::param("grid spacing must be positive"));
    }
    let h4 = h.powi(4);
    Ok(values
        .windows(5)
        .map(|w| ((w[0] - 4.0 * w[1] + 6.0 * w[2] - 4.0 * w[3] + w[4]) / h4).abs())
        .fold(0.0, f64::max))
}
