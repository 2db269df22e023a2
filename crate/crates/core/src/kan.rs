//! Learnable-basis nonlinear operator built from univariate B-spline functions.
//!
//! A layer maps `x ∈ R^P` to `y ∈ R^{P_out}` through two stages of univariate
//! functions plus a linear bypass:
//!
//! ```text
//! h_q = Σ_p ψ_{q,p}(x_p)                     q = 1..Q
//! y_o = Σ_q φ_{o,q}(h_q) + Σ_p W_{o,p} b(x_p)
//! ```
//!
//! Each `ψ` and `φ` is a linear combination of B-spline basis functions on a
//! shared knot grid. There is no activation between the two stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{join, normal, Module};
use crate::tensor::Tensor;

const MAX_ORDER: usize = 5;

/// Knot vector of a B-spline basis over `[lo, hi]`, extended by `order` knots
/// on each side so that every point of the interval has full support.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineGrid {
    knots: Vec<f64>,
    order: usize,
}

impl SplineGrid {
    /// `points` are the interval breakpoints (at least two, strictly increasing).
    /// The extension knots repeat the first/last interval width.
    pub fn new(points: &[f64], order: usize) -> Result<Self> {
        if order > MAX_ORDER {
            return Err(Error::InvalidSpec(format!("spline order {order} exceeds {MAX_ORDER}")));
        }
        if points.len() < 2 {
            return Err(Error::InvalidSpec("grid needs at least two breakpoints".into()));
        }
        if points.iter().any(|v| !v.is_finite()) || points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSpec(format!("grid {points:?} is not strictly increasing")));
        }
        let n = points.len();
        let (h_lo, h_hi) = (points[1] - points[0], points[n - 1] - points[n - 2]);
        let mut knots = Vec::with_capacity(n + 2 * order);
        knots.extend((1..=order).rev().map(|i| points[0] - i as f64 * h_lo));
        knots.extend_from_slice(points);
        knots.extend((1..=order).map(|i| points[n - 1] + i as f64 * h_hi));
        Ok(SplineGrid { knots, order })
    }

    pub fn uniform(lo: f64, hi: f64, intervals: usize, order: usize) -> Result<Self> {
        if intervals == 0 || hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::InvalidSpec(format!("bad uniform grid [{lo}, {hi}] / {intervals}")));
        }
        let step = (hi - lo) / intervals as f64;
        let pts: Vec<f64> = (0..=intervals).map(|i| lo + i as f64 * step).collect();
        Self::new(&pts, order)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn num_basis(&self) -> usize {
        self.knots.len() - self.order - 1
    }

    pub fn lo(&self) -> f64 {
        self.knots[self.order]
    }

    pub fn hi(&self) -> f64 {
        self.knots[self.num_basis()]
    }

    /// Greville abscissae: coefficients that make the spline reproduce `f(x) = x`.
    pub fn greville(&self) -> Vec<f64> {
        let k = self.order;
        (0..self.num_basis())
            .map(|j| {
                if k == 0 {
                    0.5 * (self.knots[j] + self.knots[j + 1])
                } else {
                    self.knots[j + 1..=j + k].iter().sum::<f64>() / k as f64
                }
            })
            .collect()
    }

    /// Values and x-derivatives of the `order + 1` basis functions that can be
    /// nonzero at `x`, written to `vals`/`dvals`; returns the index of the first.
    /// Outside `[lo, hi]` the basis is extended linearly from the boundary.
    pub fn basis(&self, x: f64, vals: &mut [f64], dvals: &mut [f64]) -> usize {
        let (lo, hi) = (self.lo(), self.hi());
        let k1 = self.order + 1;
        if x < lo || x > hi {
            let edge = if x < lo { lo } else { hi };
            let start = self.basis_inside(edge, vals, dvals);
            let dx = x - edge;
            for j in 0..k1 {
                vals[j] += dvals[j] * dx;
            }
            start
        } else {
            self.basis_inside(x, vals, dvals)
        }
    }

    fn basis_inside(&self, x: f64, vals: &mut [f64], dvals: &mut [f64]) -> usize {
        let k = self.order;
        let t = &self.knots;
        let nb = self.num_basis();
        let span = (t.partition_point(|&v| v <= x).saturating_sub(1)).clamp(k, nb - 1);

        let mut n = [0.0; MAX_ORDER + 1];
        let mut prev = [0.0; MAX_ORDER + 1];
        let mut left = [0.0; MAX_ORDER + 1];
        let mut right = [0.0; MAX_ORDER + 1];
        n[0] = 1.0;
        for j in 1..=k {
            if j == k {
                prev[..k].copy_from_slice(&n[..k]);
            }
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        vals[..=k].copy_from_slice(&n[..=k]);
        for r in 0..=k {
            dvals[r] = if k == 0 {
                0.0
            } else {
                let a = if r > 0 {
                    prev[r - 1] / (t[span + r] - t[span - k + r])
                } else {
                    0.0
                };
                let b = if r < k {
                    prev[r] / (t[span + r + 1] - t[span - k + r + 1])
                } else {
                    0.0
                };
                k as f64 * (a - b)
            };
        }
        span - k
    }
}

/// Value of the spline `Σ_j coeffs[j] B_j(x)`.
pub fn eval_univariate(x: f64, coeffs: &[f64], grid: &SplineGrid) -> Result<f64> {
    if coeffs.len() != grid.num_basis() {
        return Err(Error::Shape(format!(
            "{} coefficients for {} basis functions",
            coeffs.len(),
            grid.num_basis()
        )));
    }
    let (mut v, mut d) = ([0.0; MAX_ORDER + 1], [0.0; MAX_ORDER + 1]);
    let start = grid.basis(x, &mut v, &mut d);
    Ok((0..=grid.order()).map(|j| coeffs[start + j] * v[j]).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseActivation {
    /// x·σ(x)
    Silu,
    Linear,
}

impl BaseActivation {
    fn apply(self, x: f64) -> (f64, f64) {
        match self {
            BaseActivation::Linear => (x, 1.0),
            BaseActivation::Silu => {
                let s = crate::tensor::sigmoid(x);
                (x * s, s * (1.0 + x * (1.0 - s)))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct KanConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub intervals: usize,
    pub order: usize,
    pub base_activation: BaseActivation,
}

impl KanConfig {
    /// Cubic splines on 8 uniform intervals over [-3, 3] with a SiLU bypass.
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        KanConfig {
            in_dim,
            hidden,
            out_dim,
            grid_lo: -3.0,
            grid_hi: 3.0,
            intervals: 8,
            order: 3,
            base_activation: BaseActivation::Silu,
        }
    }
}

#[derive(Debug)]
pub struct KanLayer {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub grid: SplineGrid,
    /// ψ coefficients, `[Q, P, num_basis]`
    pub inner: Tensor,
    /// φ coefficients, `[P_out, Q, num_basis]`
    pub outer: Tensor,
    /// `[P_out, P]`
    pub base_weight: Tensor,
    pub base_activation: BaseActivation,
}

impl KanLayer {
    /// ψ ~ N(0, 0.1/√P) per coefficient; each φ starts as a straight line with
    /// slope ~ N(0, 1/Q); bypass weights ~ N(0, 0.1/√P).
    pub fn new(cfg: &KanConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.in_dim == 0 || cfg.hidden == 0 || cfg.out_dim == 0 {
            return Err(Error::Config(format!("KAN dims must be positive: {cfg:?}")));
        }
        let grid = SplineGrid::uniform(cfg.grid_lo, cfg.grid_hi, cfg.intervals, cfg.order)?;
        let nb = grid.num_basis();
        let (p, q, po) = (cfg.in_dim, cfg.hidden, cfg.out_dim);
        let inner = normal(&[q, p, nb], 0.1 / (p as f64).sqrt(), rng);
        let slopes = normal(&[po, q], 1.0 / (q as f64).sqrt(), rng).to_vec();
        let gr = grid.greville();
        let outer: Vec<f64> = slopes
            .iter()
            .flat_map(|&a| gr.iter().map(move |g| a * g))
            .collect();
        Ok(KanLayer {
            in_dim: p,
            hidden: q,
            out_dim: po,
            grid,
            inner,
            outer: Tensor::from_vec(outer, &[po, q, nb]).into_param(),
            base_weight: normal(&[po, p], 0.1 / (p as f64).sqrt(), rng),
            base_activation: cfg.base_activation,
        })
    }

    pub fn seeded(cfg: &KanConfig, seed: u64) -> Result<Self> {
        Self::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Applies the layer along the trailing axis; leading axes are preserved.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.in_dim;
        if x.shape().last() != Some(&p) {
            return Err(Error::Shape(format!(
                "KAN expects trailing dim {p}, got {:?}",
                x.shape()
            )));
        }
        let rows = x.numel() / p;
        let (q, po, nb, k1) = (self.hidden, self.out_dim, self.grid.num_basis(), self.grid.order() + 1);
        let y = {
            let (xd, ci, co, w) = (x.data(), self.inner.data(), self.outer.data(), self.base_weight.data());
            let mut y = vec![0.0; rows * po];
            let mut h = vec![0.0; q];
            let (mut v, mut d) = ([0.0; MAX_ORDER + 1], [0.0; MAX_ORDER + 1]);
            for r in 0..rows {
                let xr = &xd[r * p..][..p];
                let yr = &mut y[r * po..][..po];
                h.fill(0.0);
                for (pi, &xv) in xr.iter().enumerate() {
                    let s = self.grid.basis(xv, &mut v, &mut d);
                    for (qi, hq) in h.iter_mut().enumerate() {
                        let c = &ci[(qi * p + pi) * nb + s..][..k1];
                        *hq += c.iter().zip(&v[..k1]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                for (qi, &hq) in h.iter().enumerate() {
                    let s = self.grid.basis(hq, &mut v, &mut d);
                    for (o, yo) in yr.iter_mut().enumerate() {
                        let c = &co[(o * q + qi) * nb + s..][..k1];
                        *yo += c.iter().zip(&v[..k1]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                for (pi, &xv) in xr.iter().enumerate() {
                    let (a, _) = self.base_activation.apply(xv);
                    for (o, yo) in yr.iter_mut().enumerate() {
                        *yo += w[o * p + pi] * a;
                    }
                }
            }
            y
        };
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().expect("rank >= 1") = po;

        let (xt, it, ot, wt) = (x.clone(), self.inner.clone(), self.outer.clone(), self.base_weight.clone());
        let grid = self.grid.clone();
        let act = self.base_activation;
        Ok(Tensor::from_op(
            y,
            out_shape,
            vec![x.clone(), self.inner.clone(), self.outer.clone(), self.base_weight.clone()],
            "kan",
            move |g| {
                let (xd, ci, co, w) = (xt.data(), it.data(), ot.data(), wt.data());
                let mut gx = vec![0.0; rows * p];
                let mut gi = vec![0.0; ci.len()];
                let mut go = vec![0.0; co.len()];
                let mut gw = vec![0.0; w.len()];
                let mut h = vec![0.0; q];
                let mut gh = vec![0.0; q];
                let (mut v, mut d) = ([0.0; MAX_ORDER + 1], [0.0; MAX_ORDER + 1]);
                let mut starts = vec![0usize; p];
                let mut xv_basis = vec![0.0; p * 2 * k1];
                for r in 0..rows {
                    let xr = &xd[r * p..][..p];
                    let gr = &g[r * po..][..po];
                    h.fill(0.0);
                    for (pi, &xv) in xr.iter().enumerate() {
                        let s = grid.basis(xv, &mut v, &mut d);
                        starts[pi] = s;
                        xv_basis[pi * 2 * k1..][..k1].copy_from_slice(&v[..k1]);
                        xv_basis[pi * 2 * k1 + k1..][..k1].copy_from_slice(&d[..k1]);
                        for (qi, hq) in h.iter_mut().enumerate() {
                            let c = &ci[(qi * p + pi) * nb + s..][..k1];
                            *hq += c.iter().zip(&v[..k1]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    for (qi, &hq) in h.iter().enumerate() {
                        let s = grid.basis(hq, &mut v, &mut d);
                        let mut acc = 0.0;
                        for (o, &gy) in gr.iter().enumerate() {
                            let base = (o * q + qi) * nb + s;
                            for j in 0..k1 {
                                go[base + j] += gy * v[j];
                                acc += gy * co[base + j] * d[j];
                            }
                        }
                        gh[qi] = acc;
                    }
                    let gxr = &mut gx[r * p..][..p];
                    for (pi, &xv) in xr.iter().enumerate() {
                        let s = starts[pi];
                        let vb = &xv_basis[pi * 2 * k1..][..k1];
                        let db = &xv_basis[pi * 2 * k1 + k1..][..k1];
                        let mut acc = 0.0;
                        for (qi, &ghq) in gh.iter().enumerate() {
                            let base = (qi * p + pi) * nb + s;
                            for j in 0..k1 {
                                gi[base + j] += ghq * vb[j];
                                acc += ghq * ci[base + j] * db[j];
                            }
                        }
                        let (a, da) = act.apply(xv);
                        for (o, &gy) in gr.iter().enumerate() {
                            gw[o * p + pi] += gy * a;
                            acc += gy * w[o * p + pi] * da;
                        }
                        gxr[pi] = acc;
                    }
                }
                vec![Some(gx), Some(gi), Some(go), Some(gw)]
            },
        ))
    }
}

impl Module for KanLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "inner"), &self.inner);
        f(join(prefix, "outer"), &self.outer);
        f(join(prefix, "base_weight"), &self.base_weight);
    }
}
