//! MLMC estimator of the parametric expectations `Φ(θ)` and `Ψ_k(θ)`.
//!
//! Each level contributes the sample mean of `g(θ, Q_l) - g(θ, Q_{l-1})` over
//! its coupled pairs, evaluated at every node of a [`ThetaGrid`] in one pass.
//! The summed pointwise values are then interpolated by cubic splines whose
//! θ-derivatives give `Φ̂'` and `Ψ̂'_k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{sample_level, Design, LevelBatch, Model};
use crate::spline::{argmin_on_interval, fit, SplineFunction, ThetaGrid};

/// Sample counts per level and θ-grid size of one MLMC configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    /// `N_l` for `l = 0..=L`.
    pub samples: Vec<usize>,
    /// Number of θ nodes.
    pub n: usize,
    /// Mesh refinement factor between consecutive levels.
    pub refinement: f64,
}

impl Hierarchy {
    pub fn new(samples: Vec<usize>, n: usize, refinement: f64) -> Result<Self> {
        let h = Hierarchy { samples, n, refinement };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::param("hierarchy needs at least one level"));
        }
        if let Some(l) = self.samples.iter().position(|&n| n < 2) {
            return Err(Error::param(format!("hierarchy level {l} has fewer than 2 samples")));
        }
        if self.n < 4 {
            return Err(Error::param(format!("hierarchy grid size must be >= 4, got {}", self.n)));
        }
        if !(self.refinement > 1.0) {
            return Err(Error::param("refinement factor must exceed 1"));
        }
        Ok(())
    }

    /// Finest level `L`.
    pub fn levels(&self) -> usize {
        self.samples.len() - 1
    }
}

/// `φ(θ, Q) = θ + (Q - θ)⁺/(1 - τ)`.
#[inline]
pub fn phi(theta: f64, q: f64, tau: f64) -> f64 {
    theta + (q - theta).max(0.0) / (1.0 - tau)
}

/// `ψ(θ, Q, Q_z) = -(Q - θ)⁺ Q_z/(1 - τ)`.
#[inline]
pub fn psi(theta: f64, q: f64, qz: f64, tau: f64) -> f64 {
    -(q - theta).max(0.0) * qz / (1.0 - tau)
}

/// Pointwise estimates at the grid nodes. Target 0 is `Φ̂`, target `k` is `Ψ̂_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiPsiPointwise {
    pub phi: Vec<f64>,
    /// `psi[k][r]` is `Ψ̂_{k+1}(θ_r)`.
    pub psi: Vec<Vec<f64>>,
}

impl PhiPsiPointwise {
    pub fn target(&self, t: usize) -> &[f64] {
        if t == 0 {
            &self.phi
        } else {
            &self.psi[t - 1]
        }
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::param(format!("τ must lie in (0, 1), got {tau}")));
    }
    Ok(())
}

/// Draw `counts[l]` coupled samples per level with indices `0..counts[l]`.
pub fn sample_hierarchy(
    model: &dyn Model,
    z: &Design,
    counts: &[usize],
    master_seed: u64,
    replica_tag: u64,
    exec: Execution,
) -> Result<Vec<LevelBatch>> {
    counts
        .iter()
        .enumerate()
        .map(|(l, &n)| Ok(LevelBatch::new(l, sample_level(model, z, l, 0, n, master_seed, replica_tag, exec)?)))
        .collect()
}

/// Grow `batches` to `counts`, appending the missing sample indices and new
/// levels. Existing samples are kept, so counts never shrink.
pub fn extend_hierarchy(
    model: &dyn Model,
    z: &Design,
    batches: &mut Vec<LevelBatch>,
    counts: &[usize],
    master_seed: u64,
    replica_tag: u64,
    exec: Execution,
) -> Result<()> {
    for (l, &target) in counts.iter().enumerate() {
        if l == batches.len() {
            batches.push(LevelBatch::new(l, Vec::new()));
        }
        let have = batches[l].len();
        if target > have {
            let more = sample_level(model, z, l, have as u64, target - have, master_seed, replica_tag, exec)?;
            batches[l].extend(more);
        }
    }
    Ok(())
}

/// Telescoping sums over all levels at every grid node, computed by direct
/// summation over samples in index order.
pub fn pointwise_from_batches(batches: &[LevelBatch], grid: &ThetaGrid, tau: f64, exec: Execution) -> Result<PhiPsiPointwise> {
    check_tau(tau)?;
    if batches.is_empty() {
        return Err(Error::param("no level batches to estimate from"));
    }
    for (l, b) in batches.iter().enumerate() {
        if b.level != l {
            return Err(Error::param(format!("batch at position {l} holds level {}", b.level)));
        }
        if b.is_empty() {
            return Err(Error::InsufficientSamples(format!("level {l} has no samples")));
        }
    }
    let d = batches[0].samples[0].grad_fine.len();
    let thetas = grid.points();
    let n = grid.n;
    let values = exec.map((d + 1) * n, |job| {
        let (t, r) = (job / n, job % n);
        let theta = thetas[r];
        let mut total = 0.0;
        for b in batches {
            let mut sum = 0.0;
            for s in &b.samples {
                let g = |q: f64, grad: &[f64]| if t == 0 { phi(theta, q, tau) } else { psi(theta, q, grad[t - 1], tau) };
                let fine = g(s.q_fine, &s.grad_fine);
                sum += match s.member(true) {
                    Some((qc, gc)) => fine - g(qc, gc),
                    None => fine,
                };
            }
            total += sum / b.len() as f64;
        }
        total
    });
    let mut chunks = values.chunks(n).map(<[f64]>::to_vec);
    let phi = chunks.next().unwrap_or_default();
    Ok(PhiPsiPointwise { phi, psi: chunks.collect() })
}

/// Sample the hierarchy and return the pointwise estimates with the batches.
#[allow(clippy::too_many_arguments)]
pub fn estimate_pointwise(
    model: &dyn Model,
    z: &Design,
    hierarchy: &Hierarchy,
    grid: &ThetaGrid,
    tau: f64,
    master_seed: u64,
    replica_tag: u64,
    exec: Execution,
) -> Result<(PhiPsiPointwise, Vec<LevelBatch>)> {
    hierarchy.validate()?;
    check_tau(tau)?;
    let batches = sample_hierarchy(model, z, &hierarchy.samples, master_seed, replica_tag, exec)?;
    let pw = pointwise_from_batches(&batches, grid, tau, exec)?;
    Ok((pw, batches))
}

/// Spline functionals `Φ̂`, `Ψ̂_k` for one design, with the batches they came from.
#[derive(Debug, Clone)]
pub struct ParametricEstimates {
    pub grid: ThetaGrid,
    pub design: Design,
    pub tau: f64,
    pub pointwise: PhiPsiPointwise,
    pub phi: SplineFunction,
    pub psi: Vec<SplineFunction>,
    pub batches: Vec<LevelBatch>,
    pub total_cost: f64,
}

pub fn build_functionals(
    pointwise: PhiPsiPointwise,
    grid: &ThetaGrid,
    z: &Design,
    tau: f64,
    batches: Vec<LevelBatch>,
) -> Result<ParametricEstimates> {
    let phi = fit(grid, &pointwise.phi)?;
    let psi = pointwise.psi.iter().map(|v| fit(grid, v)).collect::<Result<Vec<_>>>()?;
    let total_cost = batches.iter().map(|b| b.total_cost).sum();
    Ok(ParametricEstimates { grid: *grid, design: z.clone(), tau, pointwise, phi, psi, batches, total_cost })
}

/// Both steps at once: estimate on `grid` from existing batches.
pub fn functionals_from_batches(
    batches: Vec<LevelBatch>,
    grid: &ThetaGrid,
    z: &Design,
    tau: f64,
    exec: Execution,
) -> Result<ParametricEstimates> {
    let pw = pointwise_from_batches(&batches, grid, tau, exec)?;
    build_functionals(pw, grid, z, tau, batches)
}

/// `q̂_τ = argmin Φ̂` and `ĉ_τ = Φ̂(q̂_τ)`; `on_boundary` flags a minimiser at
/// an end of Θ, in which case Θ has to grow before the values mean anything.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarCvar {
    pub var: f64,
    pub cvar: f64,
    pub on_boundary: bool,
}

impl ParametricEstimates {
    pub fn dim(&self) -> usize {
        self.psi.len()
    }

    /// Number of gradient targets: `Φ'` plus one per design component.
    pub fn n_targets(&self) -> usize {
        self.psi.len() + 1
    }

    pub fn target_spline(&self, t: usize) -> &SplineFunction {
        if t == 0 {
            &self.phi
        } else {
            &self.psi[t - 1]
        }
    }

    pub fn phi_prime(&self, theta: f64) -> Result<f64> {
        self.phi.eval(theta, 1)
    }

    pub fn psi_prime(&self, theta: f64) -> Result<Vec<f64>> {
        self.psi.iter().map(|s| s.eval(theta, 1)).collect()
    }

    pub fn levels(&self) -> usize {
        self.batches.len() - 1
    }

    pub fn counts(&self) -> Vec<usize> {
        self.batches.iter().map(LevelBatch::len).collect()
    }

    pub fn extract_var_cvar(&self) -> Result<VarCvar> {
        extract_var_cvar(self, self.grid.lo, self.grid.hi)
    }
}

pub fn extract_var_cvar(estimates: &ParametricEstimates, lo: f64, hi: f64) -> Result<VarCvar> {
    let (var, cvar) = argmin_on_interval(&estimates.phi, lo, hi)?;
    Ok(VarCvar { var, cvar, on_boundary: var <= lo || var >= hi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConstantModel, LinearGaussian, ShiftedUniform};
    use crate::rng::{derive_stream, Variate};
    use crate::stats::{normal_pdf, normal_quantile};

    fn design(z: &[f64]) -> Design {
        Design::new(z.to_vec()).unwrap()
    }

    #[test]
    fn constant_model_is_exact() {
        let m = ConstantModel::new(0.4, 2);
        let grid = ThetaGrid::new(0.0, 1.0, 9).unwrap();
        let h = Hierarchy::new(vec![5, 3, 2], 9, 2.0).unwrap();
        let (pw, _) = estimate_pointwise(&m, &design(&[0.0, 0.0]), &h, &grid, 0.7, 1, 0, Execution::Sequential).unwrap();
        for (r, t) in grid.points().into_iter().enumerate() {
            assert_eq!(pw.phi[r], t + (0.4 - t).max(0.0) / (1.0 - 0.7));
            assert_eq!(pw.psi[0][r], 0.0);
        }
    }

    #[test]
    fn single_level_matches_brute_force_loop() {
        let m = LinearGaussian::default();
        let z = design(&[0.3]);
        let tau = 0.7;
        let grid = ThetaGrid::new(0.2, 0.5, 17).unwrap();
        let h = Hierarchy::new(vec![500], 17, 2.0).unwrap();
        let (pw, _) = estimate_pointwise(&m, &z, &h, &grid, tau, 9, 0, Execution::Parallel).unwrap();
        let qs: Vec<f64> = (0..500u64)
            .map(|i| 0.3 + 0.1 * derive_stream(9, 0, i, 0).draw(Variate::StandardNormal, 1).unwrap()[0])
            .collect();
        for (r, theta) in grid.points().into_iter().enumerate() {
            let mut sum = 0.0;
            let mut sum_psi = 0.0;
            for &q in &qs {
                sum += theta + (q - theta).max(0.0) / (1.0 - tau);
                sum_psi += -(q - theta).max(0.0) * 1.0 / (1.0 - tau);
            }
            assert_eq!(pw.phi[r], sum / 500.0);
            assert_eq!(pw.psi[0][r], sum_psi / 500.0);
        }
    }

    #[test]
    fn exact_levels_contribute_nothing() {
        let m = LinearGaussian::default();
        let grid = ThetaGrid::new(0.0, 0.4, 9).unwrap();
        let z = design(&[0.2]);
        let batches = sample_hierarchy(&m, &z, &[50, 20, 10], 3, 0, Execution::Sequential).unwrap();
        let all = pointwise_from_batches(&batches, &grid, 0.7, Execution::Sequential).unwrap();
        let base = pointwise_from_batches(&batches[..1], &grid, 0.7, Execution::Sequential).unwrap();
        assert_eq!(all, base);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let m = LinearGaussian::default();
        let grid = ThetaGrid::new(-0.2, 0.3, 17).unwrap();
        let z = design(&[0.0]);
        let h = Hierarchy::new(vec![400, 100], 17, 2.0).unwrap();
        let a = estimate_pointwise(&m, &z, &h, &grid, 0.7, 5, 0, Execution::Sequential).unwrap().0;
        let b = estimate_pointwise(&m, &z, &h, &grid, 0.7, 5, 0, Execution::Parallel).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn extension_reuses_samples() {
        let m = LinearGaussian::default();
        let z = design(&[0.0]);
        let mut batches = sample_hierarchy(&m, &z, &[10, 4], 2, 0, Execution::Sequential).unwrap();
        extend_hierarchy(&m, &z, &mut batches, &[30, 8, 4], 2, 0, Execution::Sequential).unwrap();
        let fresh = sample_hierarchy(&m, &z, &[30, 8, 4], 2, 0, Execution::Sequential).unwrap();
        assert_eq!(batches, fresh);
    }

    #[test]
    fn single_level_phi_is_convex_in_theta() {
        let m = LinearGaussian::default();
        let grid = ThetaGrid::new(-0.3, 0.3, 33).unwrap();
        let h = Hierarchy::new(vec![300], 33, 2.0).unwrap();
        let (pw, _) = estimate_pointwise(&m, &design(&[0.0]), &h, &grid, 0.6, 4, 0, Execution::Sequential).unwrap();
        for w in pw.phi.windows(3) {
            assert!(w[0] + w[2] - 2.0 * w[1] >= -1e-12);
        }
    }

    #[test]
    fn functional_reproduces_cubic() {
        let grid = ThetaGrid::new(0.0, 1.0, 9).unwrap();
        let vals: Vec<f64> = grid.points().iter().map(|t| t * t * t).collect();
        let pw = PhiPsiPointwise { phi: vals.clone(), psi: vec![vals] };
        let est = build_functionals(pw, &grid, &design(&[0.0]), 0.7, vec![]).unwrap();
        assert!((est.phi_prime(0.55).unwrap() - 3.0 * 0.55 * 0.55).abs() < 1e-12);
    }

    #[test]
    fn psi_prime_is_indicator_average() {
        let m = LinearGaussian::default();
        let tau = 0.7;
        let z = design(&[0.0]);
        let grid = ThetaGrid::new(-0.1, 0.2, 33).unwrap();
        let h = Hierarchy::new(vec![10_000], 33, 2.0).unwrap();
        let (pw, batches) = estimate_pointwise(&m, &z, &h, &grid, tau, 11, 0, Execution::Parallel).unwrap();
        let est = build_functionals(pw, &grid, &z, tau, batches).unwrap();
        for theta in [-0.05, 0.0, 0.05, 0.1, 0.15] {
            let brute = est.batches[0].samples.iter().filter(|s| s.q_fine >= theta).count() as f64 / 10_000.0 / (1.0 - tau);
            let got = est.psi_prime(theta).unwrap()[0];
            assert!((got - brute).abs() <= 0.02 * brute, "θ={theta}: {got} vs {brute}");
        }
        for k in 0..=300 {
            let theta = -0.1 + 0.3 * k as f64 / 300.0;
            let d = est.phi_prime(theta).unwrap();
            assert!(d >= 1.0 - 1.0 / (1.0 - tau) - 0.05 && d <= 1.05, "Φ̂'({theta}) = {d}");
        }
    }

    #[test]
    fn degenerate_distribution_var_and_cvar() {
        let m = ConstantModel::new(0.5, 1);
        let z = design(&[0.0]);
        let grid = ThetaGrid::new(0.0, 1.0, 17).unwrap();
        let est =
            functionals_from_batches(sample_hierarchy(&m, &z, &[4], 0, 0, Execution::Sequential).unwrap(), &grid, &z, 0.7, Execution::Sequential)
                .unwrap();
        let vc = est.extract_var_cvar().unwrap();
        // Φ has a kink at c, so the spline resolves the minimiser only to O(h).
        let h = grid.h();
        assert!((vc.var - 0.5).abs() <= h && (vc.cvar - 0.5).abs() <= 0.1 * h, "{vc:?}");
        assert!(!vc.on_boundary);
    }

    #[test]
    fn uniform_and_normal_cvar() {
        let tau = 0.7;
        let m = ShiftedUniform { lo: 0.0, hi: 1.0 };
        let z = design(&[0.0]);
        let grid = ThetaGrid::new(0.5, 0.9, 33).unwrap();
        let batches = sample_hierarchy(&m, &z, &[100_000], 1, 0, Execution::Parallel).unwrap();
        let vc = functionals_from_batches(batches, &grid, &z, tau, Execution::Parallel).unwrap().extract_var_cvar().unwrap();
        assert!((vc.var - 0.7).abs() < 0.01 && (vc.cvar - 0.85).abs() < 0.01, "{vc:?}");

        let m = LinearGaussian { sigma: 1.0, max_level: 0 };
        let grid = ThetaGrid::new(0.0, 1.0, 33).unwrap();
        let batches = sample_hierarchy(&m, &z, &[100_000], 2, 0, Execution::Parallel).unwrap();
        let vc = functionals_from_batches(batches, &grid, &z, tau, Execution::Parallel).unwrap().extract_var_cvar().unwrap();
        let exact = normal_pdf(normal_quantile(tau)) / (1.0 - tau);
        assert!((vc.cvar - exact).abs() < 0.02, "{vc:?} vs {exact}");
    }

    #[test]
    fn boundary_minimiser_is_flagged() {
        let m = ConstantModel::new(2.0, 1);
        let z = design(&[0.0]);
        let grid = ThetaGrid::new(0.0, 1.0, 9).unwrap();
        let batches = sample_hierarchy(&m, &z, &[4], 0, 0, Execution::Sequential).unwrap();
        let vc = functionals_from_batches(batches, &grid, &z, 0.7, Execution::Sequential).unwrap().extract_var_cvar().unwrap();
        assert!(vc.on_boundary);
        assert_eq!(vc.var, 1.0);
    }

    #[test]
    fn hierarchy_validation() {
        assert!(Hierarchy::new(vec![], 9, 2.0).is_err());
        assert!(Hierarchy::new(vec![4, 1], 9, 2.0).is_err());
        assert!(Hierarchy::new(vec![4], 3, 2.0).is_err());
        assert_eq!(Hierarchy::new(vec![4, 2, 2], 9, 2.0).unwrap().levels(), 2);
    }
}
