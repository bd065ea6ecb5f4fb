//! Steady advection–diffusion pollutant model on the unit square.
//!
//! `-ε Δu + V·∇u = f - B(·, z)` with `V = [b - a x₁, a x₂]`, `u = 0` on
//! `x₁ = 0` and homogeneous Neumann conditions elsewhere. The discretisation
//! uses the 5-point Laplacian and first-order upwind advection on a uniform
//! `M × M` cell grid, with Neumann boundaries closed by mirror ghost nodes. The
//! resulting matrix is an M-matrix, factorised once by banded LU and reused for
//! the adjoint solve that yields all nine sink sensitivities of
//! `Q = (κ_s/2) ∫ u²`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_request, sample_error, CorrelatedSample, Design, Model};
use crate::rng::{SeedStream, Variate};

/// Gaussian source `(s_i, μ_i, σ_i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Source {
    pub strength: f64,
    pub centre: [f64; 2],
    pub width: f64,
}

pub const SOURCES: [Source; 5] = [
    Source { strength: 2.3220339, centre: [0.55205319, 0.65571641], width: 0.0229487 },
    Source { strength: 1.7931427, centre: [0.49379544, 0.10950509], width: 0.0205321 },
    Source { strength: 2.3522452, centre: [0.13032797, 0.57569277], width: 0.0196891 },
    Source { strength: 2.2850373, centre: [0.33868732, 0.37971428], width: 0.0212297 },
    Source { strength: 2.3194400, centre: [0.27670822, 0.15833522], width: 0.0227373 },
];

/// Number of controllable sinks.
pub const SINKS: usize = 9;

/// Centre of sink `k` (0-based) on the lattice `(0.25 i, 0.25 j)`, `k = 3(i-1) + (j-1)`.
pub fn sink_centre(k: usize) -> [f64; 2] {
    [0.25 * (k / 3 + 1) as f64, 0.25 * (k % 3 + 1) as f64]
}

fn gaussian(x: [f64; 2], c: [f64; 2], width: f64) -> f64 {
    let r2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
    (-r2 / (2.0 * width * width)).exp()
}

pub fn source_field(x: [f64; 2]) -> f64 {
    SOURCES.iter().map(|s| s.strength * gaussian(x, s.centre, s.width)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PollutantParams {
    pub eps_visc: f64,
    pub kappa_s: f64,
    pub max_level: usize,
    pub sink_width: f64,
    /// Support of `a ~ U[lo, hi]`.
    pub a_range: [f64; 2],
    /// Support of `b ~ U[lo, hi]`.
    pub b_range: [f64; 2],
    /// Cells per side on level 0.
    pub base_cells: usize,
}

impl Default for PollutantParams {
    fn default() -> Self {
        PollutantParams {
            eps_visc: 0.1,
            kappa_s: 1e4,
            max_level: 6,
            sink_width: 0.05,
            a_range: [4.95, 5.05],
            b_range: [3.95, 4.05],
            base_cells: 32,
        }
    }
}

impl PollutantParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_visc > 0.0) || !(self.kappa_s > 0.0) || !(self.sink_width > 0.0) || self.base_cells < 2 {
            return Err(Error::param("pollutant requires eps_visc > 0, kappa_s > 0, sink_width > 0, base_cells >= 2"));
        }
        for (name, r) in [("a_range", self.a_range), ("b_range", self.b_range)] {
            if !(r[0] < r[1]) {
                return Err(Error::param(format!("pollutant {name} must satisfy lo < hi, got {r:?}")));
            }
        }
        Ok(())
    }

    /// `M_l = round(M_0 2^{l/2})`.
    pub fn cells(&self, level: usize) -> usize {
        (self.base_cells as f64 * 2f64.powf(level as f64 / 2.0)).round() as usize
    }

    pub fn sink(&self, k: usize, x: [f64; 2]) -> f64 {
        gaussian(x, sink_centre(k), self.sink_width)
    }
}

/// Nodal values on the `(M+1)²` grid, `x₁`-major: `u[i (M+1) + j]` at `(i h, j h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub level: usize,
    pub cells: usize,
    pub u: Vec<f64>,
}

impl GridField {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.u[i * (self.cells + 1) + j]
    }

    /// Composite trapezoid `∫ w u²`.
    pub fn integral_of_square(&self) -> f64 {
        let m = self.cells;
        let h = 1.0 / m as f64;
        let mut s = 0.0;
        for i in 0..=m {
            for j in 0..=m {
                s += trapezoid_weight(i, j, m) * self.at(i, j).powi(2);
            }
        }
        s * h * h
    }
}

fn trapezoid_weight(i: usize, j: usize, m: usize) -> f64 {
    let wi = if i == 0 || i == m { 0.5 } else { 1.0 };
    let wj = if j == 0 || j == m { 0.5 } else { 1.0 };
    wi * wj
}

/// Square band matrix with `bw` sub- and super-diagonals, stored by rows.
#[derive(Debug, Clone)]
struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    fn zeros(n: usize, bw: usize) -> Self {
        BandMatrix { n, bw, data: vec![0.0; n * (2 * bw + 1)] }
    }

    #[inline]
    fn slot(&self, r: usize, c: usize) -> usize {
        r * (2 * self.bw + 1) + (c + self.bw - r)
    }

    #[inline]
    fn get(&self, r: usize, c: usize) -> f64 {
        self.data[self.slot(r, c)]
    }

    #[inline]
    fn add(&mut self, r: usize, c: usize, v: f64) {
        let s = self.slot(r, c);
        self.data[s] += v;
    }

    fn cols(&self, r: usize) -> std::ops::Range<usize> {
        r.saturating_sub(self.bw)..(r + self.bw + 1).min(self.n)
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|r| self.cols(r).map(|c| self.get(r, c) * x[c]).sum()).collect()
    }

    #[allow(clippy::needless_range_loop)]
    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for r in 0..self.n {
            for c in self.cols(r) {
                out[c] += self.get(r, c) * y[r];
            }
        }
        out
    }
}

/// In-place `A = L U` without pivoting (unit lower `L`).
#[derive(Debug, Clone)]
struct BandLu(BandMatrix);

impl BandLu {
    fn factor(mut a: BandMatrix) -> std::result::Result<Self, String> {
        let (n, bw) = (a.n, a.bw);
        for k in 0..n {
            let pivot = a.get(k, k);
            if !(pivot.abs() > 0.0) || !pivot.is_finite() {
                return Err(format!("zero pivot at row {k}"));
            }
            let end = (k + bw + 1).min(n);
            for i in k + 1..end {
                let l = a.get(i, k) / pivot;
                if l == 0.0 {
                    continue;
                }
                let s = a.slot(i, k);
                a.data[s] = l;
                for j in k + 1..end {
                    let ukj = a.get(k, j);
                    if ukj != 0.0 {
                        let s = a.slot(i, j);
                        a.data[s] -= l * ukj;
                    }
                }
            }
        }
        Ok(BandLu(a))
    }

    #[allow(clippy::needless_range_loop)]
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let a = &self.0;
        let mut y = rhs.to_vec();
        for i in 0..a.n {
            let mut s = y[i];
            for k in i.saturating_sub(a.bw)..i {
                s -= a.get(i, k) * y[k];
            }
            y[i] = s;
        }
        for i in (0..a.n).rev() {
            let mut s = y[i];
            for j in i + 1..(i + a.bw + 1).min(a.n) {
                s -= a.get(i, j) * y[j];
            }
            y[i] = s / a.get(i, i);
        }
        y
    }

    /// Solve `Aᵀ y = rhs` as `Uᵀ (Lᵀ y) = rhs`.
    #[allow(clippy::needless_range_loop)]
    fn solve_transpose(&self, rhs: &[f64]) -> Vec<f64> {
        let a = &self.0;
        let mut w = rhs.to_vec();
        for i in 0..a.n {
            let mut s = w[i];
            for k in i.saturating_sub(a.bw)..i {
                s -= a.get(k, i) * w[k];
            }
            w[i] = s / a.get(i, i);
        }
        for i in (0..a.n).rev() {
            let mut s = w[i];
            for k in i + 1..(i + a.bw + 1).min(a.n) {
                s -= a.get(k, i) * w[k];
            }
            w[i] = s;
        }
        w
    }
}

/// Discrete operator at one mesh size for one velocity field.
#[derive(Debug, Clone)]
pub struct Operator {
    cells: usize,
    matrix: BandMatrix,
}

impl Operator {
    /// Assemble for `V = [b - a x₁, a x₂]`; `a = b = 0` gives pure diffusion.
    pub fn assemble(cells: usize, eps: f64, a: f64, b: f64) -> Self {
        let m = cells;
        let h = 1.0 / m as f64;
        let stride = m + 1;
        let n = m * stride;
        let mut mat = BandMatrix::zeros(n, stride);
        let idx = |i: usize, j: usize| (i - 1) * stride + j;
        let diff = eps / (h * h);
        for i in 1..=m {
            for j in 0..=m {
                let r = idx(i, j);
                let x = [i as f64 * h, j as f64 * h];
                // Neighbour coefficients in the order west, east, south, north.
                let mut nb = [-diff, -diff, -diff, -diff];
                let mut diag = 4.0 * diff;
                let v1 = b - a * x[0];
                let v2 = a * x[1];
                if v1 > 0.0 {
                    diag += v1 / h;
                    nb[0] -= v1 / h;
                } else {
                    diag -= v1 / h;
                    nb[1] += v1 / h;
                }
                if v2 > 0.0 {
                    diag += v2 / h;
                    nb[2] -= v2 / h;
                } else {
                    diag -= v2 / h;
                    nb[3] += v2 / h;
                }
                // Mirror ghosts on the Neumann sides.
                if i == m {
                    nb[0] += nb[1];
                    nb[1] = 0.0;
                }
                if j == 0 {
                    nb[3] += nb[2];
                    nb[2] = 0.0;
                }
                if j == m {
                    nb[2] += nb[3];
                    nb[3] = 0.0;
                }
                mat.add(r, r, diag);
                if i > 1 {
                    mat.add(r, idx(i - 1, j), nb[0]);
                }
                if i < m {
                    mat.add(r, idx(i + 1, j), nb[1]);
                }
                if j > 0 {
                    mat.add(r, idx(i, j - 1), nb[2]);
                }
                if j < m {
                    mat.add(r, idx(i, j + 1), nb[3]);
                }
            }
        }
        Operator { cells, matrix: mat }
    }

    pub fn unknowns(&self) -> usize {
        self.matrix.n
    }

    /// Coordinates of unknown `r`.
    pub fn node(&self, r: usize) -> [f64; 2] {
        let stride = self.cells + 1;
        let h = 1.0 / self.cells as f64;
        [(r / stride + 1) as f64 * h, (r % stride) as f64 * h]
    }

    /// Evaluate a field at every unknown.
    pub fn sample<F: Fn([f64; 2]) -> f64>(&self, f: F) -> Vec<f64> {
        (0..self.unknowns()).map(|r| f(self.node(r))).collect()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix.apply(x)
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        self.matrix.apply_transpose(y)
    }

    fn factor(&self) -> std::result::Result<BandLu, String> {
        BandLu::factor(self.matrix.clone())
    }

    /// Solve `A u = rhs` for the unknowns and return the full nodal field.
    pub fn solve(&self, rhs: &[f64], level: usize) -> Result<GridField> {
        let lu = self.factor().map_err(|reason| Error::Diverged { level, reason })?;
        Ok(self.to_field(&lu.solve(rhs), level))
    }

    fn to_field(&self, unknowns: &[f64], level: usize) -> GridField {
        let mut u = vec![0.0; (self.cells + 1) * (self.cells + 1)];
        u[self.cells + 1..].copy_from_slice(unknowns);
        GridField { level, cells: self.cells, u }
    }
}

fn check_design(z: &[f64]) -> Result<()> {
    if z.len() != SINKS {
        return Err(Error::param(format!("pollutant design has {SINKS} components, got {}", z.len())));
    }
    Ok(())
}

fn rhs(params: &PollutantParams, op: &Operator, z: &[f64]) -> Vec<f64> {
    op.sample(|x| source_field(x) - (0..SINKS).map(|k| z[k] * params.sink(k, x)).sum::<f64>())
}

/// Forward solve for one velocity sample `ω = (a, b)`.
pub fn solve_forward(params: &PollutantParams, z: &[f64], omega: (f64, f64), level: usize) -> Result<(GridField, f64)> {
    check_design(z)?;
    let op = Operator::assemble(params.cells(level), params.eps_visc, omega.0, omega.1);
    let u = op.solve(&rhs(params, &op, z), level)?;
    let q = 0.5 * params.kappa_s * u.integral_of_square();
    Ok((u, q))
}

/// Adjoint sensitivities `∂Q/∂z_k` for a forward field at the same `(ω, level)`.
pub fn sensitivities(params: &PollutantParams, omega: (f64, f64), level: usize, forward: &GridField) -> Result<Vec<f64>> {
    let op = Operator::assemble(params.cells(level), params.eps_visc, omega.0, omega.1);
    if forward.cells != op.cells || forward.level != level {
        return Err(Error::param("forward field does not match the requested level"));
    }
    let lu = op.factor().map_err(|reason| Error::Diverged { level, reason })?;
    Ok(adjoint_gradient(params, &op, &lu, forward))
}

fn adjoint_gradient(params: &PollutantParams, op: &Operator, lu: &BandLu, forward: &GridField) -> Vec<f64> {
    let m = op.cells;
    let h2 = (1.0 / m as f64).powi(2);
    let stride = m + 1;
    let source: Vec<f64> = (0..op.unknowns())
        .map(|r| {
            let (i, j) = (r / stride + 1, r % stride);
            params.kappa_s * trapezoid_weight(i, j, m) * h2 * forward.u[r + stride]
        })
        .collect();
    let lambda = lu.solve_transpose(&source);
    (0..SINKS)
        .map(|k| -(0..op.unknowns()).map(|r| lambda[r] * params.sink(k, op.node(r))).sum::<f64>())
        .collect()
}

/// QoI and gradient at one level, sharing the factorisation.
pub fn solve_with_gradient(params: &PollutantParams, z: &[f64], omega: (f64, f64), level: usize) -> Result<(f64, Vec<f64>)> {
    check_design(z)?;
    let op = Operator::assemble(params.cells(level), params.eps_visc, omega.0, omega.1);
    let lu = op.factor().map_err(|reason| Error::Diverged { level, reason })?;
    let u = op.to_field(&lu.solve(&rhs(params, &op, z)), level);
    let q = 0.5 * params.kappa_s * u.integral_of_square();
    if !q.is_finite() {
        return Err(Error::Diverged { level, reason: "non-finite QoI".into() });
    }
    Ok((q, adjoint_gradient(params, &op, &lu, &u)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PollutantModel {
    pub params: PollutantParams,
}

impl PollutantModel {
    pub fn new(params: PollutantParams) -> Result<Self> {
        params.validate()?;
        Ok(PollutantModel { params })
    }

    /// Velocity parameters `(a, b)` drawn from a stream.
    pub fn draw_omega(&self, stream: &mut SeedStream) -> Result<(f64, f64)> {
        let [alo, ahi] = self.params.a_range;
        let [blo, bhi] = self.params.b_range;
        let a = stream.draw(Variate::Uniform { lo: alo, hi: ahi }, 1)?[0];
        let b = stream.draw(Variate::Uniform { lo: blo, hi: bhi }, 1)?[0];
        Ok((a, b))
    }
}

impl Model for PollutantModel {
    fn name(&self) -> &'static str {
        "pollutant"
    }

    fn dim(&self) -> usize {
        SINKS
    }

    fn max_level(&self) -> usize {
        self.params.max_level
    }

    fn refinement_factor(&self) -> f64 {
        std::f64::consts::SQRT_2
    }

    fn solve_cost(&self, level: usize) -> f64 {
        (self.params.cells(level) as f64).powi(2)
    }

    fn sample_pair(&self, z: &Design, level: usize, stream: &mut SeedStream) -> Result<CorrelatedSample> {
        check_request(self, z, level)?;
        let omega = self.draw_omega(stream)?;
        let lift = |e: Error| match e {
            Error::Diverged { reason, .. } => sample_error(stream, reason),
            other => other,
        };
        let (q_fine, grad_fine) = solve_with_gradient(&self.params, z.as_slice(), omega, level).map_err(lift)?;
        let coarse = if level > 0 {
            Some(solve_with_gradient(&self.params, z.as_slice(), omega, level - 1).map_err(lift)?)
        } else {
            None
        };
        let (q_coarse, grad_coarse) = coarse.map_or((None, None), |(q, g)| (Some(q), Some(g)));
        Ok(CorrelatedSample { q_fine, q_coarse, grad_fine, grad_coarse, cost: self.pair_cost(level) })
    }
}
