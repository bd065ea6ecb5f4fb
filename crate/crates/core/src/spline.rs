//! Uniform not-a-knot cubic splines on an equidistant θ grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `n` equidistant points spanning `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl ThetaGrid {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 4 {
            return Err(Error::param(format!("a θ grid needs n >= 4 points, got {n}")));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::param(format!("invalid θ interval [{lo}, {hi}]")));
        }
        Ok(ThetaGrid { lo, hi, n })
    }

    pub fn h(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn point(&self, r: usize) -> f64 {
        if r + 1 == self.n {
            self.hi
        } else {
            self.lo + r as f64 * self.h()
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|r| self.point(r)).collect()
    }

    /// The same interval resolved with `n_dense` points.
    pub fn refined(&self, n_dense: usize) -> Self {
        ThetaGrid { n: n_dense.max(4), ..*self }
    }

    /// Probe grid used for sup norms and fourth differences: `max(10 n, 1000)` points.
    pub fn probe(&self) -> Self {
        self.refined((10 * self.n).max(1000))
    }

    pub fn contains(&self, theta: f64) -> bool {
        theta >= self.lo && theta <= self.hi
    }
}

/// Piecewise cubic `a + b t + c t² + d t³` with `t = θ - θ_i` on each interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineFunction {
    grid: ThetaGrid,
    coeffs: Vec<[f64; 4]>,
}

/// Fit the not-a-knot interpolating spline through `values` at the grid points.
pub fn fit(grid: &ThetaGrid, values: &[f64]) -> Result<SplineFunction> {
    let n = grid.n;
    if n < 4 {
        return Err(Error::param(format!("spline fit needs n >= 4, got {n}")));
    }
    if values.len() != n {
        return Err(Error::param(format!("expected {n} spline values, got {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("spline values must be finite"));
    }
    let h = grid.h();
    let y = values;
    // Second derivatives m_i. Interior rows m_{i-1} + 4 m_i + m_{i+1} = r_i;
    // the not-a-knot rows m_0 - 2 m_1 + m_2 = 0 (and mirrored) collapse rows
    // 1 and n-2 to 6 m_i = r_i, leaving a tridiagonal system in between.
    let r = |i: usize| 6.0 * (y[i - 1] - 2.0 * y[i] + y[i + 1]) / (h * h);
    let mut m = vec![0.0; n];
    m[1] = r(1) / 6.0;
    m[n - 2] = r(n - 2) / 6.0;
    let inner = n.saturating_sub(4);
    if inner > 0 {
        // Thomas sweep over i = 2..=n-3.
        let mut cp = vec![0.0; inner];
        let mut dp = vec![0.0; inner];
        for k in 0..inner {
            let i = k + 2;
            let mut rhs = r(i);
            if i == 2 {
                rhs -= m[1];
            }
            if i == n - 3 {
                rhs -= m[n - 2];
            }
            let (lower, prev_c, prev_d) = if k == 0 { (0.0, 0.0, 0.0) } else { (1.0, cp[k - 1], dp[k - 1]) };
            let denom = 4.0 - lower * prev_c;
            cp[k] = 1.0 / denom;
            dp[k] = (rhs - lower * prev_d) / denom;
        }
        for k in (0..inner).rev() {
            let next = if k + 1 < inner { m[k + 3] } else { 0.0 };
            m[k + 2] = dp[k] - cp[k] * next;
        }
    }
    m[0] = 2.0 * m[1] - m[2];
    m[n - 1] = 2.0 * m[n - 2] - m[n - 3];

    let coeffs = (0..n - 1)
        .map(|i| {
            let b = (y[i + 1] - y[i]) / h - h * (2.0 * m[i] + m[i + 1]) / 6.0;
            [y[i], b, 0.5 * m[i], (m[i + 1] - m[i]) / (6.0 * h)]
        })
        .collect();
    Ok(SplineFunction { grid: *grid, coeffs })
}

impl SplineFunction {
    pub fn grid(&self) -> &ThetaGrid {
        &self.grid
    }

    fn locate(&self, theta: f64) -> Result<(usize, f64)> {
        let g = &self.grid;
        let slack = 1e-12 * g.width();
        if !(theta >= g.lo - slack && theta <= g.hi + slack) {
            return Err(Error::Domain { theta, lo: g.lo, hi: g.hi });
        }
        let h = g.h();
        let i = (((theta - g.lo) / h).floor().max(0.0) as usize).min(g.n - 2);
        Ok((i, theta - g.point(i)))
    }

    /// Value (`order = 0`) or derivative of the given order at `theta`.
    pub fn eval(&self, theta: f64, order: usize) -> Result<f64> {
        let (i, t) = self.locate(theta)?;
        let [a, b, c, d] = self.coeffs[i];
        Ok(match order {
            0 => a + t * (b + t * (c + t * d)),
            1 => b + t * (2.0 * c + 3.0 * t * d),
            2 => 2.0 * c + 6.0 * t * d,
            3 => 6.0 * d,
            _ => return Err(Error::param(format!("derivative order {order} is not supported"))),
        })
    }

    /// Evaluate over many points, failing on the first point outside the grid.
    pub fn eval_many(&self, thetas: &[f64], order: usize) -> Result<Vec<f64>> {
        thetas.iter().map(|&t| self.eval(t, order)).collect()
    }

    /// `max |S^{(order)}|` over the points of `probe`.
    pub fn sup_norm(&self, probe: &ThetaGrid, order: usize) -> Result<f64> {
        let mut sup = 0.0f64;
        for r in 0..probe.n {
            sup = sup.max(self.eval(probe.point(r), order)?.abs());
        }
        Ok(sup)
    }
}

/// Global minimiser over `[lo, hi]` from the stationary points of every piece
/// plus the endpoints; ties go to the smallest θ.
pub fn argmin_on_interval(spline: &SplineFunction, lo: f64, hi: f64) -> Result<(f64, f64)> {
    let g = spline.grid;
    if !(lo <= hi) || lo < g.lo - 1e-12 * g.width() || hi > g.hi + 1e-12 * g.width() {
        return Err(Error::Domain { theta: if lo < g.lo { lo } else { hi }, lo: g.lo, hi: g.hi });
    }
    let h = g.h();
    let mut candidates = vec![lo, hi];
    for (i, &[_, b, c, d]) in spline.coeffs.iter().enumerate() {
        let left = g.point(i);
        candidates.push(left);
        for t in quadratic_roots(3.0 * d, 2.0 * c, b) {
            if (0.0..=h).contains(&t) {
                candidates.push(left + t);
            }
        }
    }
    candidates.retain(|&t| t >= lo && t <= hi);
    candidates.sort_by(f64::total_cmp);
    let mut best = (f64::NAN, f64::INFINITY);
    for t in candidates {
        let v = spline.eval(t, 0)?;
        if v < best.1 {
            best = (t, v);
        }
    }
    Ok(best)
}

/// Real roots of `a t² + b t + c`, degrading to the linear case when `a`
/// is negligible.
fn quadratic_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    let scale = a.abs().max(b.abs()).max(c.abs());
    if scale == 0.0 {
        return Vec::new();
    }
    if a.abs() <= 1e-14 * scale {
        return if b != 0.0 { vec![-c / b] } else { Vec::new() };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Vec::new();
    }
    let sq = disc.sqrt();
    let q = -0.5 * (b + b.signum() * sq);
    let mut roots = vec![q / a];
    if q != 0.0 {
        roots.push(c / q);
    }
    roots
}
