use std::rc::Rc;

use super::{numel_of, Tensor};
use crate::error::{Error, Result};

/// Per-element source offsets of two operands broadcast to a common shape.
struct Broadcast {
    shape: Vec<usize>,
    a_idx: Rc<Vec<usize>>,
    b_idx: Rc<Vec<usize>>,
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}")));
    }
    let mut shape = Vec::with_capacity(a.len());
    for (&da, &db) in a.iter().zip(b) {
        if da == db || db == 1 {
            shape.push(da);
        } else if da == 1 {
            shape.push(db);
        } else {
            return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}")));
        }
    }
    let sa = strides_of(a);
    let sb = strides_of(b);
    let n = numel_of(&shape);
    let mut a_idx = Vec::with_capacity(n);
    let mut b_idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; shape.len()];
    for _ in 0..n {
        let (mut ia, mut ib) = (0, 0);
        for (axis, &c) in counter.iter().enumerate() {
            if a[axis] != 1 {
                ia += c * sa[axis];
            }
            if b[axis] != 1 {
                ib += c * sb[axis];
            }
        }
        a_idx.push(ia);
        b_idx.push(ib);
        for axis in (0..shape.len()).rev() {
            counter[axis] += 1;
            if counter[axis] < shape[axis] {
                break;
            }
            counter[axis] = 0;
        }
    }
    Ok(Broadcast {
        shape,
        a_idx: Rc::new(a_idx),
        b_idx: Rc::new(b_idx),
    })
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    /// (d/da, d/db)
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinOp::Add => (1.0, 1.0),
            BinOp::Sub => (1.0, -1.0),
            BinOp::Mul => (b, a),
            BinOp::Div => (1.0 / b, -a / (b * b)),
        }
    }

    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }
}

impl Tensor {
    fn binary(&self, other: &Tensor, op: BinOp) -> Result<Tensor> {
        if self.shape() == other.shape() {
            let out: Vec<f64> = {
                let (a, b) = (self.data(), other.data());
                a.iter().zip(b.iter()).map(|(&x, &y)| op.apply(x, y)).collect()
            };
            let (ta, tb) = (self.clone(), other.clone());
            return Ok(Tensor::from_op(
                out,
                self.shape().to_vec(),
                vec![self.clone(), other.clone()],
                op.name(),
                move |g| {
                    let (a, b) = (ta.data(), tb.data());
                    let (mut ga, mut gb) = (
                        ta.requires_grad().then(|| vec![0.0; g.len()]),
                        tb.requires_grad().then(|| vec![0.0; g.len()]),
                    );
                    for i in 0..g.len() {
                        let (da, db) = op.partials(a[i], b[i]);
                        if let Some(ga) = ga.as_mut() {
                            ga[i] = g[i] * da;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[i] = g[i] * db;
                        }
                    }
                    vec![ga, gb]
                },
            ));
        }

        let bc = broadcast_shapes(self.shape(), other.shape())?;
        let out: Vec<f64> = {
            let (a, b) = (self.data(), other.data());
            bc.a_idx
                .iter()
                .zip(bc.b_idx.iter())
                .map(|(&i, &j)| op.apply(a[i], b[j]))
                .collect()
        };
        let (ta, tb) = (self.clone(), other.clone());
        let (ai, bi) = (bc.a_idx.clone(), bc.b_idx.clone());
        Ok(Tensor::from_op(
            out,
            bc.shape,
            vec![self.clone(), other.clone()],
            op.name(),
            move |g| {
                let (a, b) = (ta.data(), tb.data());
                let mut ga = ta.requires_grad().then(|| vec![0.0; a.len()]);
                let mut gb = tb.requires_grad().then(|| vec![0.0; b.len()]);
                for (k, (&i, &j)) in ai.iter().zip(bi.iter()).enumerate() {
                    let (da, db) = op.partials(a[i], b[j]);
                    if let Some(ga) = ga.as_mut() {
                        ga[i] += g[k] * da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[j] += g[k] * db;
                    }
                }
                vec![ga, gb]
            },
        ))
    }

    /// Elementwise sum with size-1 broadcasting along any axis (ranks must match).
    /// Panics on incompatible shapes; see [`Tensor::try_add`].
    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary(other, BinOp::Add).expect("add")
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary(other, BinOp::Sub).expect("sub")
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary(other, BinOp::Mul).expect("mul")
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.binary(other, BinOp::Div).expect("div")
    }

    pub fn try_add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Add)
    }

    pub fn try_mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Mul)
    }

    /// Elementwise map with derivative `df(x, f(x))`.
    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64,
    ) -> Tensor {
        let x = self.data();
        let y: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let deriv: Vec<f64> = if Tensor::tracks(&[self]) {
            x.iter().zip(&y).map(|(&a, &b)| df(a, b)).collect()
        } else {
            Vec::new()
        };
        drop(x);
        Tensor::from_op(y, self.shape().to_vec(), vec![self.clone()], name, move |g| {
            vec![Some(g.iter().zip(&deriv).map(|(a, b)| a * b).collect())]
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.unary("scale", |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.unary("add_scalar", |x| x + s, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Tensor {
        if super::tracing_branches() {
            super::record_branches(self.data().iter().map(|&x| (x > 0.0) as u64));
        }
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// x·σ(x)
    pub fn silu(&self) -> Tensor {
        self.unary("silu", |x| x * sigmoid(x), |x, _| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    /// ln(x + eps)
    pub fn ln_eps(&self, eps: f64) -> Tensor {
        self.unary("ln_eps", move |x| (x + eps).ln(), move |x, _| 1.0 / (x + eps))
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![total], vec![1], vec![self.clone()], "sum", move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Copy with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape()
            )));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            "reshape",
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// out[i] = self[indices[i]]; the backward pass scatter-adds.
    pub fn gather(&self, indices: Rc<Vec<usize>>, shape: &[usize]) -> Result<Tensor> {
        if indices.len() != numel_of(shape) {
            return Err(Error::Shape(format!(
                "{} indices for output shape {shape:?}",
                indices.len()
            )));
        }
        let n = self.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("gather index {bad} out of range {n}")));
        }
        let out: Vec<f64> = {
            let x = self.data();
            indices.iter().map(|&i| x[i]).collect()
        };
        Ok(Tensor::from_op(
            out,
            shape.to_vec(),
            vec![self.clone()],
            "gather",
            move |g| {
                let mut gx = vec![0.0; n];
                for (&i, &gi) in indices.iter().zip(g) {
                    gx[i] += gi;
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Concatenate along axis 0. All trailing dimensions must agree.
    pub fn cat(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cat of zero tensors".into()))?;
        let tail = &first.shape()[1..];
        let mut lead = 0;
        for p in parts {
            if &p.shape()[1..] != tail {
                return Err(Error::Shape(format!(
                    "cat: {:?} vs {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
            lead += p.shape()[0];
        }
        let mut data = Vec::with_capacity(lead * numel_of(tail));
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        Ok(Tensor::from_op(
            data,
            shape,
            parts.iter().map(|&p| p.clone()).collect(),
            "cat",
            move |g| {
                let mut off = 0;
                sizes
                    .iter()
                    .map(|&s| {
                        let piece = g[off..off + s].to_vec();
                        off += s;
                        Some(piece)
                    })
                    .collect()
            },
        ))
    }

    /// Rows `start..end` of axis 0.
    pub fn narrow0(&self, start: usize, end: usize) -> Result<Tensor> {
        let lead = self.shape()[0];
        if start >= end || end > lead {
            return Err(Error::Shape(format!(
                "narrow {start}..{end} of axis with size {lead}"
            )));
        }
        let inner = self.numel() / lead;
        let data = self.data()[start * inner..end * inner].to_vec();
        let mut shape = self.shape().to_vec();
        shape[0] = end - start;
        let n = self.numel();
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            "narrow0",
            move |g| {
                let mut gx = vec![0.0; n];
                gx[start * inner..end * inner].copy_from_slice(g);
                vec![Some(gx)]
            },
        ))
    }

    fn lead_and_inner(&self) -> (usize, usize) {
        let c = self.shape()[0];
        (c, self.numel() / c)
    }

    fn keep_lead_shape(&self) -> Vec<usize> {
        let mut s = self.shape().to_vec();
        s[0] = 1;
        s
    }

    /// Sum over axis 0, keeping it with size 1.
    pub fn sum_channels(&self) -> Tensor {
        let (c, v) = self.lead_and_inner();
        let x = self.data();
        let mut out = vec![0.0; v];
        for ch in 0..c {
            out.iter_mut()
                .zip(&x[ch * v..(ch + 1) * v])
                .for_each(|(o, a)| *o += a);
        }
        drop(x);
        Tensor::from_op(out, self.keep_lead_shape(), vec![self.clone()], "sum_channels", move |g| {
            let mut gx = Vec::with_capacity(c * v);
            for _ in 0..c {
                gx.extend_from_slice(g);
            }
            vec![Some(gx)]
        })
    }

    pub fn mean_channels(&self) -> Tensor {
        let c = self.shape()[0] as f64;
        self.sum_channels().scale(1.0 / c)
    }

    /// Max over axis 0, keeping it with size 1. Gradient goes to the first maximiser.
    pub fn max_channels(&self) -> Tensor {
        let (c, v) = self.lead_and_inner();
        let x = self.data();
        let mut out = x[..v].to_vec();
        let mut arg = vec![0usize; v];
        for ch in 1..c {
            for i in 0..v {
                let val = x[ch * v + i];
                if val > out[i] {
                    out[i] = val;
                    arg[i] = ch;
                }
            }
        }
        drop(x);
        super::record_branches(arg.iter().map(|&a| a as u64));
        Tensor::from_op(out, self.keep_lead_shape(), vec![self.clone()], "max_channels", move |g| {
            let mut gx = vec![0.0; c * v];
            for i in 0..v {
                gx[arg[i] * v + i] = g[i];
            }
            vec![Some(gx)]
        })
    }

    /// Mean over every axis but the first: [C, ...] -> [C, 1, ...].
    pub fn mean_spatial(&self) -> Tensor {
        let (c, v) = self.lead_and_inner();
        let x = self.data();
        let out: Vec<f64> = (0..c)
            .map(|ch| x[ch * v..(ch + 1) * v].iter().sum::<f64>() / v as f64)
            .collect();
        drop(x);
        let mut shape = vec![1; self.rank()];
        shape[0] = c;
        Tensor::from_op(out, shape, vec![self.clone()], "mean_spatial", move |g| {
            let mut gx = Vec::with_capacity(c * v);
            for &gc in g {
                gx.extend(std::iter::repeat_n(gc / v as f64, v));
            }
            vec![Some(gx)]
        })
    }

    /// Softmax over axis 0 (channels) at every position, max-shifted.
    pub fn softmax_channels(&self) -> Tensor {
        let (c, v) = self.lead_and_inner();
        let x = self.data();
        let mut out = vec![0.0; c * v];
        for i in 0..v {
            let m = (0..c).map(|ch| x[ch * v + i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for ch in 0..c {
                let e = (x[ch * v + i] - m).exp();
                out[ch * v + i] = e;
                z += e;
            }
            for ch in 0..c {
                out[ch * v + i] /= z;
            }
        }
        drop(x);
        let y = out.clone();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], "softmax_channels", move |g| {
            let mut gx = vec![0.0; c * v];
            for i in 0..v {
                let dot: f64 = (0..c).map(|ch| g[ch * v + i] * y[ch * v + i]).sum();
                for ch in 0..c {
                    gx[ch * v + i] = y[ch * v + i] * (g[ch * v + i] - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Log-softmax over axis 0.
    pub fn log_softmax_channels(&self) -> Tensor {
        let (c, v) = self.lead_and_inner();
        let x = self.data();
        let mut out = vec![0.0; c * v];
        for i in 0..v {
            let m = (0..c).map(|ch| x[ch * v + i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..c).map(|ch| (x[ch * v + i] - m).exp()).sum::<f64>().ln();
            for ch in 0..c {
                out[ch * v + i] = x[ch * v + i] - lse;
            }
        }
        drop(x);
        let y = out.clone();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], "log_softmax_channels", move |g| {
            let mut gx = vec![0.0; c * v];
            for i in 0..v {
                let gsum: f64 = (0..c).map(|ch| g[ch * v + i]).sum();
                for ch in 0..c {
                    gx[ch * v + i] = g[ch * v + i] - y[ch * v + i].exp() * gsum;
                }
            }
            vec![Some(gx)]
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_for_zero_logits() {
        let x = Tensor::zeros(&[4, 2, 2, 2]);
        assert!(x.softmax_channels().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn softmax_closed_form() {
        let x = Tensor::from_vec(vec![0.0, 3f64.ln()], &[2, 1, 1, 1]);
        let y = x.softmax_channels().to_vec();
        assert!((y[0] - 0.25).abs() < 1e-15 && (y[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn broadcast_channel_gate() {
        let x = Tensor::from_vec((0..8).map(f64::from).collect(), &[2, 2, 2, 1]);
        let w = Tensor::from_vec(vec![1.0, 10.0], &[2, 1, 1, 1]);
        assert_eq!(
            x.mul(&w).to_vec(),
            vec![0.0, 1.0, 2.0, 3.0, 40.0, 50.0, 60.0, 70.0]
        );
        let s = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2, 1]);
        assert_eq!(x.add(&s).to_vec()[4..], [5.0, 7.0, 9.0, 11.0]);
    }

    #[test]
    fn broadcast_backward_reduces() {
        let x = Tensor::ones(&[3, 2, 1, 1]).into_param();
        let b = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3, 1, 1, 1]).into_param();
        x.mul(&b).sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn incompatible_broadcast_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 3]);
        assert!(a.try_add(&b).is_err());
    }

    #[test]
    fn channel_reductions() {
        let x = Tensor::from_vec(vec![1.0, 5.0, 3.0, 2.0], &[2, 2]);
        assert_eq!(x.sum_channels().to_vec(), vec![4.0, 7.0]);
        assert_eq!(x.max_channels().to_vec(), vec![3.0, 5.0]);
        assert_eq!(x.sum_channels().shape(), &[1, 2]);
        assert_eq!(x.mean_spatial().to_vec(), vec![3.0, 2.5]);
    }

    #[test]
    fn cat_and_narrow_roundtrip() {
        let a = Tensor::from_vec(vec![1.0, 2.0], &[1, 2]);
        let b = Tensor::from_vec(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]);
        let c = Tensor::cat(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.narrow0(1, 3).unwrap().to_vec(), b.to_vec());
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.1, 0.7, -0.4], &[3, 2]);
        let a = x.log_softmax_channels().to_vec();
        let b = x.softmax_channels().to_vec();
        for (l, p) in a.iter().zip(&b) {
            assert!((l - p.ln()).abs() < 1e-14);
        }
    }
}
