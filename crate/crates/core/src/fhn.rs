//! Forced FitzHugh–Nagumo oscillator with additive noise.
//!
//! Euler–Maruyama forward solve on `N_{T,l} = N_{T,0} 2^l` steps, a discrete
//! adjoint of the trapezoidal time average `Q_l = Σ (v_n² + v_{n+1}²)/2 · Δt/T`,
//! and the resulting design sensitivities for `z = [a, b, ζ, I]`.
//!
//! The adjoint is the exact derivative of the discrete QoI, so sensitivities
//! agree with finite differences of `Q_l` up to round-off. The indicator factor
//! `1{Q ≥ θ} / ((1 - τ) T)` of the risk functional is left out; estimators
//! apply it per θ.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_request, sample_error, CorrelatedSample, Design, Model};
use crate::rng::SeedStream;

/// Index of each design component in `z`.
pub const A: usize = 0;
pub const B: usize = 1;
pub const ZETA: usize = 2;
pub const I: usize = 3;

/// Noise level, horizon and discretisation of the oscillator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FhnParams {
    pub sigma: f64,
    #[serde(rename = "T")]
    pub t_final: f64,
    #[serde(rename = "N_T0")]
    pub n_t0: usize,
    pub v0: f64,
    pub w0: f64,
    pub max_level: usize,
}

impl Default for FhnParams {
    fn default() -> Self {
        FhnParams { sigma: 0.01, t_final: 10.0, n_t0: 20, v0: 0.0, w0: 0.0, max_level: 10 }
    }
}

impl FhnParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_final > 0.0) || self.n_t0 == 0 || !(self.sigma >= 0.0) {
            return Err(Error::param("fhn requires T > 0, N_T0 >= 1 and sigma >= 0"));
        }
        if !self.v0.is_finite() || !self.w0.is_finite() {
            return Err(Error::param("fhn initial state must be finite"));
        }
        Ok(())
    }

    pub fn steps(&self, level: usize) -> usize {
        self.n_t0 << level
    }

    pub fn dt(&self, level: usize) -> f64 {
        self.t_final / self.steps(level) as f64
    }
}

/// Reference design `[a, b, ζ, I]` used by the optimisation experiments.
pub const Z_REF: [f64; 4] = [0.7, 0.8, 0.08, 1.0];
/// The alternative ordering of `a` and `b` that also appears in the literature.
pub const Z_REF_SWAPPED: [f64; 4] = [0.8, 0.7, 0.08, 1.0];

/// Forward states at one level together with the noise that drove them.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub level: usize,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    /// Interleaved increments `ξ_{1,n}, ξ_{2,n}` for `n = 0..N`.
    pub noise: Vec<f64>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.v.len() - 1
    }
}

/// Adjoint states `(λ_n, ν_n)`; index 0 is unused and left at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjoint {
    pub lambda: Vec<f64>,
    pub nu: Vec<f64>,
}

fn check_design(z: &[f64]) -> Result<()> {
    if z.len() != 4 {
        return Err(Error::param(format!("fhn design has 4 components, got {}", z.len())));
    }
    Ok(())
}

/// Trapezoidal time average of `v²`.
pub fn time_average_qoi(v: &[f64], dt: f64, t_final: f64) -> f64 {
    v.windows(2).map(|p| 0.5 * (p[0] * p[0] + p[1] * p[1])).sum::<f64>() * dt / t_final
}

/// Euler–Maruyama solve at `level` driven by `noise` (length `2 N_{T,l}`).
pub fn simulate_forward(params: &FhnParams, z: &[f64], level: usize, noise: &[f64]) -> Result<(Trajectory, f64)> {
    check_design(z)?;
    let n_steps = params.steps(level);
    if noise.len() != 2 * n_steps {
        return Err(Error::param(format!(
            "level {level} needs {} noise increments, got {}",
            2 * n_steps,
            noise.len()
        )));
    }
    let (a, b, zeta, forcing) = (z[A], z[B], z[ZETA], z[I]);
    let dt = params.dt(level);
    let kick = params.sigma * dt.sqrt();
    let mut v = Vec::with_capacity(n_steps + 1);
    let mut w = Vec::with_capacity(n_steps + 1);
    v.push(params.v0);
    w.push(params.w0);
    for n in 0..n_steps {
        let (vn, wn) = (v[n], w[n]);
        let vn1 = vn + dt * (vn - vn * vn * vn / 3.0 - wn + forcing) + kick * noise[2 * n];
        let wn1 = wn + dt * zeta * (vn + a - b * wn) + kick * noise[2 * n + 1];
        if !vn1.is_finite() || !wn1.is_finite() {
            return Err(Error::Diverged { level, reason: format!("non-finite state at step {}", n + 1) });
        }
        v.push(vn1);
        w.push(wn1);
    }
    let q = time_average_qoi(&v, dt, params.t_final);
    Ok((Trajectory { level, v, w, noise: noise.to_vec() }, q))
}

/// Coarse-level increments from fine-level ones: `(ξ_{2k} + ξ_{2k+1}) / √2`
/// per component, which reproduces the Brownian increment over the coarse step.
pub fn couple_levels(fine_noise: &[f64]) -> Vec<f64> {
    let coarse_steps = fine_noise.len() / 4;
    let mut coarse = Vec::with_capacity(2 * coarse_steps);
    for k in 0..coarse_steps {
        let f = &fine_noise[4 * k..4 * k + 4];
        coarse.push((f[0] + f[2]) * std::f64::consts::FRAC_1_SQRT_2);
        coarse.push((f[1] + f[3]) * std::f64::consts::FRAC_1_SQRT_2);
    }
    coarse
}

/// Backward sweep of the discrete adjoint of `Q_l`.
pub fn solve_adjoint(traj: &Trajectory, params: &FhnParams, z: &[f64], level: usize) -> Result<Adjoint> {
    let dt = params.dt(level);
    let v_end = *traj.v.last().unwrap_or(&0.0);
    solve_adjoint_with(traj, params, z, level, (dt * v_end / params.t_final, 0.0), 1.0)
}

/// Backward sweep from an arbitrary terminal state, with the running source
/// `2 v_n Δt / T` scaled by `source_scale`. The map is linear in
/// `(terminal, source_scale)`.
pub fn solve_adjoint_with(
    traj: &Trajectory,
    params: &FhnParams,
    z: &[f64],
    level: usize,
    terminal: (f64, f64),
    source_scale: f64,
) -> Result<Adjoint> {
    check_design(z)?;
    let n_steps = params.steps(level);
    if traj.level != level || traj.steps() != n_steps {
        return Err(Error::param(format!(
            "trajectory of level {} ({} steps) does not match level {level}",
            traj.level,
            traj.steps()
        )));
    }
    let (b, zeta) = (z[B], z[ZETA]);
    let dt = params.dt(level);
    let mut lambda = vec![0.0; n_steps + 1];
    let mut nu = vec![0.0; n_steps + 1];
    lambda[n_steps] = terminal.0;
    nu[n_steps] = terminal.1;
    for n in (1..n_steps).rev() {
        let vn = traj.v[n];
        let (l1, n1) = (lambda[n + 1], nu[n + 1]);
        lambda[n] = l1 + dt * ((1.0 - vn * vn) * l1 + zeta * n1 + source_scale * 2.0 * vn / params.t_final);
        nu[n] = n1 + dt * (-l1 - zeta * b * n1);
    }
    Ok(Adjoint { lambda, nu })
}

/// Design sensitivities `[Q_a, Q_b, Q_ζ, Q_I]` from forward and adjoint states.
pub fn sensitivities(traj: &Trajectory, adjoint: &Adjoint, params: &FhnParams, z: &[f64], level: usize) -> Result<[f64; 4]> {
    check_design(z)?;
    let n_steps = params.steps(level);
    if traj.steps() != n_steps || adjoint.lambda.len() != n_steps + 1 || adjoint.nu.len() != n_steps + 1 {
        return Err(Error::param("forward and adjoint states do not match the level"));
    }
    let (a, b, zeta) = (z[A], z[B], z[ZETA]);
    let dt = params.dt(level);
    let mut g = [0.0; 4];
    for n in 0..n_steps {
        let (l1, n1) = (adjoint.lambda[n + 1], adjoint.nu[n + 1]);
        let (vn, wn) = (traj.v[n], traj.w[n]);
        g[A] += zeta * n1;
        g[B] -= zeta * wn * n1;
        g[ZETA] += (vn + a - b * wn) * n1;
        g[I] += l1;
    }
    Ok(g.map(|x| x * dt))
}

/// QoI and sensitivities at one level for a given noise record.
pub fn solve_with_gradient(params: &FhnParams, z: &[f64], level: usize, noise: &[f64]) -> Result<(f64, [f64; 4])> {
    let (traj, q) = simulate_forward(params, z, level, noise)?;
    let adj = solve_adjoint(&traj, params, z, level)?;
    let g = sensitivities(&traj, &adj, params, z, level)?;
    Ok((q, g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FhnModel {
    pub params: FhnParams,
}

impl FhnModel {
    pub fn new(params: FhnParams) -> Result<Self> {
        params.validate()?;
        Ok(FhnModel { params })
    }
}

impl Model for FhnModel {
    fn name(&self) -> &'static str {
        "fhn"
    }

    fn dim(&self) -> usize {
        4
    }

    fn max_level(&self) -> usize {
        self.params.max_level
    }

    fn solve_cost(&self, level: usize) -> f64 {
        self.params.steps(level) as f64
    }

    fn sample_pair(&self, z: &Design, level: usize, stream: &mut SeedStream) -> Result<CorrelatedSample> {
        check_request(self, z, level)?;
        let z = z.as_slice();
        let mut noise = vec![0.0; 2 * self.params.steps(level)];
        stream.fill_normal(&mut noise);
        let lift = |e: Error| match e {
            Error::Diverged { reason, .. } => sample_error(stream, reason),
            other => other,
        };
        let (q_fine, g_fine) = solve_with_gradient(&self.params, z, level, &noise).map_err(lift)?;
        let (q_coarse, grad_coarse) = if level > 0 {
            let coarse_noise = couple_levels(&noise);
            let (q, g) = solve_with_gradient(&self.params, z, level - 1, &coarse_noise).map_err(lift)?;
            (Some(q), Some(g.to_vec()))
        } else {
            (None, None)
        };
        Ok(CorrelatedSample {
            q_fine,
            q_coarse,
            grad_fine: g_fine.to_vec(),
            grad_coarse,
            cost: self.pair_cost(level),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_stream, Variate};

    fn quiet() -> FhnParams {
        FhnParams { sigma: 0.0, ..FhnParams::default() }
    }

    #[test]
    fn first_step_by_hand() {
        // v1 = 0 + 0.5 (0 - 0 - 0 + 1) = 0.5; w1 = 0 + 0.5 * 0.08 * (0 + 0.7 - 0) = 0.028
        let p = quiet();
        let noise = vec![0.0; 2 * p.steps(0)];
        let (traj, _) = simulate_forward(&p, &Z_REF, 0, &noise).unwrap();
        assert_eq!(p.dt(0), 0.5);
        assert!((traj.v[1] - 0.5).abs() < 1e-15);
        assert!((traj.w[1] - 0.028).abs() < 1e-15);
    }

    #[test]
    fn constant_states_give_square() {
        let c = 0.37;
        let v = vec![c; 41];
        let q = time_average_qoi(&v, 0.25, 10.0);
        assert!((q - c * c).abs() < 1e-14);
    }

    #[test]
    fn forward_is_deterministic() {
        let p = FhnParams::default();
        let noise = derive_stream(2, 1, 0, 0).draw(Variate::StandardNormal, 2 * p.steps(1)).unwrap();
        let a = simulate_forward(&p, &Z_REF, 1, &noise).unwrap();
        let b = simulate_forward(&p, &Z_REF, 1, &noise).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_noise_length_rejected() {
        let p = FhnParams::default();
        assert!(simulate_forward(&p, &Z_REF, 0, &[0.0; 3]).is_err());
    }

    #[test]
    fn coupling_of_increments() {
        assert_eq!(couple_levels(&[0.0; 8]), vec![0.0; 4]);
        let c = couple_levels(&[1.0, 0.0, 1.0, 0.0]);
        assert!((c[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(c[1], 0.0);
    }

    #[test]
    fn coupled_increments_are_standard_normal() {
        let fine = derive_stream(8, 0, 0, 0).draw(Variate::StandardNormal, 400_000).unwrap();
        let coarse = couple_levels(&fine);
        let n = coarse.len() as f64;
        let mean = coarse.iter().sum::<f64>() / n;
        let var = coarse.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 4.0 / n.sqrt());
        assert!((var - 1.0).abs() < 0.015);
    }

    #[test]
    fn zero_trajectory_zero_adjoint() {
        let p = quiet();
        let n = p.steps(0);
        let traj = Trajectory { level: 0, v: vec![0.0; n + 1], w: vec![0.0; n + 1], noise: vec![0.0; 2 * n] };
        let adj = solve_adjoint(&traj, &p, &Z_REF, 0).unwrap();
        assert!(adj.lambda.iter().chain(&adj.nu).all(|&x| x == 0.0));
    }

    #[test]
    fn one_backward_step_by_hand() {
        let p = quiet();
        let n = p.steps(0);
        let dt = p.dt(0);
        let traj = Trajectory { level: 0, v: vec![0.0; n + 1], w: vec![0.0; n + 1], noise: vec![0.0; 2 * n] };
        let adj = solve_adjoint_with(&traj, &p, &Z_REF, 0, (1.0, 0.0), 1.0).unwrap();
        assert!((adj.lambda[n - 1] - (1.0 + dt)).abs() < 1e-15);
        assert!((adj.nu[n - 1] + dt).abs() < 1e-15);
    }

    #[test]
    fn sensitivities_vanish_with_nu() {
        let p = quiet();
        let n = p.steps(0);
        let (traj, _) = simulate_forward(&p, &Z_REF, 0, &vec![0.0; 2 * n]).unwrap();
        let adj = Adjoint { lambda: vec![0.3; n + 1], nu: vec![0.0; n + 1] };
        let g = sensitivities(&traj, &adj, &p, &Z_REF, 0).unwrap();
        assert_eq!(&g[..3], &[0.0, 0.0, 0.0]);
        // λ ≡ c: Q_I = c Σ Δt = c T.
        assert!((g[I] - 0.3 * 10.0).abs() < 1e-12);
    }

    #[test]
    fn adjoint_is_linear() {
        let p = FhnParams::default();
        let level = 2;
        let noise = derive_stream(4, level, 0, 0).draw(Variate::StandardNormal, 2 * p.steps(level)).unwrap();
        let (traj, _) = simulate_forward(&p, &Z_REF, level, &noise).unwrap();
        let base = solve_adjoint_with(&traj, &p, &Z_REF, level, (0.2, -0.1), 1.0).unwrap();
        let scaled = solve_adjoint_with(&traj, &p, &Z_REF, level, (0.6, -0.3), 3.0).unwrap();
        let g0 = sensitivities(&traj, &base, &p, &Z_REF, level).unwrap();
        let g1 = sensitivities(&traj, &scaled, &p, &Z_REF, level).unwrap();
        for k in 0..4 {
            assert!((g1[k] - 3.0 * g0[k]).abs() <= 1e-12 * g1[k].abs().max(1.0));
        }
    }

    fn fd_check(p: &FhnParams, level: usize, noise: &[f64], tol: f64) {
        let (_, g) = solve_with_gradient(p, &Z_REF, level, noise).unwrap();
        let h = 1e-5;
        for k in 0..4 {
            let mut zp = Z_REF;
            let mut zm = Z_REF;
            zp[k] += h;
            zm[k] -= h;
            let qp = simulate_forward(p, &zp, level, noise).unwrap().1;
            let qm = simulate_forward(p, &zm, level, noise).unwrap().1;
            let fd = (qp - qm) / (2.0 * h);
            let rel = (fd - g[k]).abs() / g[k].abs().max(1e-12);
            assert!(rel <= tol, "component {k}: adjoint {} fd {fd} rel {rel}", g[k]);
        }
    }

    #[test]
    fn adjoint_matches_finite_differences_deterministic() {
        let p = quiet();
        for level in [0, 2, 4] {
            fd_check(&p, level, &vec![0.0; 2 * p.steps(level)], 1e-4);
        }
    }

    #[test]
    fn adjoint_matches_finite_differences_with_noise() {
        let p = FhnParams::default();
        for (i, level) in [1usize, 3].into_iter().enumerate() {
            let noise = derive_stream(17, level, i as u64, 0)
                .draw(Variate::StandardNormal, 2 * p.steps(level))
                .unwrap();
            fd_check(&p, level, &noise, 1e-3);
        }
    }

    #[test]
    fn deterministic_limit_is_first_order() {
        let p = quiet();
        let q_ref = simulate_forward(&p, &Z_REF, 12, &vec![0.0; 2 * p.steps(12)]).unwrap().1;
        let levels = [3usize, 4, 5, 6, 7];
        let xs: Vec<f64> = levels.iter().map(|&l| p.dt(l).ln()).collect();
        let ys: Vec<f64> = levels
            .iter()
            .map(|&l| (simulate_forward(&p, &Z_REF, l, &vec![0.0; 2 * p.steps(l)]).unwrap().1 - q_ref).abs().ln())
            .collect();
        let (_, slope) = crate::stats::linear_fit(&xs, &ys).unwrap();
        assert!((0.8..=1.2).contains(&slope), "slope {slope}");
    }

    #[test]
    fn pair_variance_decays_with_level() {
        let m = FhnModel::new(FhnParams::default()).unwrap();
        let z = Design::new(Z_REF.to_vec()).unwrap();
        let rows = crate::model::coupling_report(&m, &z, 4, 1000, 3, crate::exec::Execution::Parallel).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].var_diff < w[0].var_diff, "{rows:?}");
        }
        for r in &rows {
            let nt = 20.0 * 2f64.powi(r.level as i32);
            assert_eq!(r.cost, nt + nt / 2.0);
        }
    }

    #[test]
    fn quiet_refinement_shrinks_level_gap() {
        let m = FhnModel::new(quiet()).unwrap();
        let z = Design::new(Z_REF.to_vec()).unwrap();
        let gaps: Vec<f64> = (1..=6)
            .map(|l| {
                let s = m.sample_pair(&z, l, &mut derive_stream(0, l, 0, 0)).unwrap();
                (s.q_fine - s.q_coarse.unwrap()).abs()
            })
            .collect();
        assert!(gaps[0] > 0.0);
        for w in gaps.windows(2) {
            assert!(w[1] < w[0], "{gaps:?}");
        }
    }
}
