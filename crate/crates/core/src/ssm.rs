//! Diagonal linear state-space recurrence over flattened volumes.
//!
//! For an input sequence `u_t ∈ R^{D_in}` the scan computes
//!
//! ```text
//! s_t = Λ s_{t-1} + Γ u_t,    s_0 = 0
//! w_t = τ s_t
//! ```
//!
//! with `Λ = diag(λ)`, `λ_i = exp(-softplus(r_i)) ∈ (0, 1)`. A backward scan runs
//! the same recurrence from the last position to the first; outputs are always
//! indexed by the original sequence position.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{join, normal, Module};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Learnable `(Λ, Γ, τ)` of one scan branch.
#[derive(Debug)]
pub struct SsmParameters {
    /// `[D_state]`, mapped through `exp(-softplus(·))` to the diagonal of Λ.
    pub lambda_raw: Tensor,
    /// `[D_state, D_in]`
    pub gamma: Tensor,
    /// `[D_out, D_state]`
    pub tau: Tensor,
    pub direction: Direction,
    /// Forces every λ to this value (and blocks its gradient). Used to probe the
    /// memoryless (λ = 0) and integrating (λ = 1) limits.
    pub lambda_override: Option<f64>,
}

/// `exp(-softplus(r))`, written as the logistic function of `-r`.
pub fn stable_lambda(raw: f64) -> f64 {
    crate::tensor::sigmoid(-raw)
}

fn inverse_stable_lambda(lambda: f64) -> f64 {
    (1.0 / lambda - 1.0).ln()
}

impl SsmParameters {
    /// Decay rates spread over [0.5, 0.95]; Γ ~ N(0, 1/D_in), τ ~ N(0, 0.25/D_state).
    pub fn new(d_in: usize, d_state: usize, d_out: usize, direction: Direction, rng: &mut ChaCha8Rng) -> Self {
        let raw: Vec<f64> = (0..d_state)
            .map(|i| {
                let frac = if d_state > 1 { i as f64 / (d_state - 1) as f64 } else { 0.5 };
                inverse_stable_lambda(0.5 + 0.45 * frac)
            })
            .collect();
        SsmParameters {
            lambda_raw: Tensor::from_vec(raw, &[d_state]).into_param(),
            gamma: normal(&[d_state, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            tau: normal(&[d_out, d_state], 0.5 / (d_state as f64).sqrt(), rng),
            direction,
            lambda_override: None,
        }
    }

    pub fn seeded(d_in: usize, d_state: usize, d_out: usize, direction: Direction, seed: u64) -> Self {
        Self::new(d_in, d_state, d_out, direction, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_tensors(lambda_raw: Tensor, gamma: Tensor, tau: Tensor, direction: Direction) -> Result<Self> {
        let p = SsmParameters {
            lambda_raw,
            gamma,
            tau,
            direction,
            lambda_override: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_lambda_override(mut self, lambda: f64) -> Self {
        self.lambda_override = Some(lambda);
        self
    }

    pub fn d_state(&self) -> usize {
        self.lambda_raw.numel()
    }

    pub fn d_in(&self) -> usize {
        self.gamma.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.tau.shape()[0]
    }

    pub fn lambdas(&self) -> Vec<f64> {
        match self.lambda_override {
            Some(l) => vec![l; self.d_state()],
            None => self.lambda_raw.data().iter().map(|&r| stable_lambda(r)).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.lambda_raw.numel();
        if self.lambda_raw.rank() != 1
            || self.gamma.rank() != 2
            || self.tau.rank() != 2
            || self.gamma.shape()[0] != n
            || self.tau.shape()[1] != n
        {
            return Err(Error::Shape(format!(
                "ssm parameters disagree on D_state: lambda {:?}, gamma {:?}, tau {:?}",
                self.lambda_raw.shape(),
                self.gamma.shape(),
                self.tau.shape()
            )));
        }
        Ok(())
    }
}

impl Module for SsmParameters {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "lambda_raw"), &self.lambda_raw);
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "tau"), &self.tau);
    }
}

/// Visiting order of the voxels of a `[C, H, W, D]` volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanOrder {
    /// Spatial axes from slowest to fastest varying.
    pub perm: [usize; 3],
    /// Per spatial axis (in original numbering): traverse high-to-low.
    pub reverse: [bool; 3],
}

impl Default for ScanOrder {
    fn default() -> Self {
        Self::row_major()
    }
}

impl ScanOrder {
    pub fn row_major() -> Self {
        ScanOrder {
            perm: [0, 1, 2],
            reverse: [false; 3],
        }
    }

    /// Row-major order traversed back to front.
    pub fn reversed() -> Self {
        ScanOrder {
            perm: [0, 1, 2],
            reverse: [true; 3],
        }
    }

    pub fn new(perm: [usize; 3], reverse: [bool; 3]) -> Result<Self> {
        let mut seen = [false; 3];
        for &a in &perm {
            if a > 2 || seen[a] {
                return Err(Error::InvalidSpec(format!("{perm:?} is not a permutation of the spatial axes")));
            }
            seen[a] = true;
        }
        Ok(ScanOrder { perm, reverse })
    }

    fn validate(&self) -> Result<()> {
        Self::new(self.perm, self.reverse).map(|_| ())
    }

    /// Spatial flat index (row-major in H, W, D) visited at each sequence step.
    pub fn indices(&self, dims: [usize; 3]) -> Vec<usize> {
        let [a0, a1, a2] = self.perm;
        let strides = [dims[1] * dims[2], dims[2], 1];
        let coord = |axis: usize, i: usize| {
            if self.reverse[axis] {
                dims[axis] - 1 - i
            } else {
                i
            }
        };
        let mut out = Vec::with_capacity(dims.iter().product());
        for i in 0..dims[a0] {
            for j in 0..dims[a1] {
                for k in 0..dims[a2] {
                    out.push(
                        coord(a0, i) * strides[a0] + coord(a1, j) * strides[a1] + coord(a2, k) * strides[a2],
                    );
                }
            }
        }
        out
    }
}

fn volume_dims(x: &Tensor) -> Result<(usize, [usize; 3])> {
    match x.shape() {
        [c, h, w, d] => Ok((*c, [*h, *w, *d])),
        s => Err(Error::Shape(format!("expected [C, H, W, D], got {s:?}"))),
    }
}

/// `[C, H, W, D]` → `[T, C]` with `T = H·W·D` in the given visiting order.
pub fn flatten_volume(x: &Tensor, order: &ScanOrder) -> Result<Tensor> {
    order.validate()?;
    let (c, dims) = volume_dims(x)?;
    let spatial = order.indices(dims);
    let v = spatial.len();
    let mut idx = Vec::with_capacity(v * c);
    for &s in &spatial {
        for ch in 0..c {
            idx.push(ch * v + s);
        }
    }
    x.gather(Rc::new(idx), &[v, c])
}

/// Inverse of [`flatten_volume`].
pub fn unflatten_volume(seq: &Tensor, order: &ScanOrder, dims: [usize; 3]) -> Result<Tensor> {
    order.validate()?;
    let &[t, c] = seq.shape() else {
        return Err(Error::Shape(format!("sequence must be [T, C], got {:?}", seq.shape())));
    };
    let v: usize = dims.iter().product();
    if t != v {
        return Err(Error::Shape(format!("sequence length {t} does not fill {dims:?}")));
    }
    let spatial = order.indices(dims);
    let mut idx = vec![0; v * c];
    for (step, &s) in spatial.iter().enumerate() {
        for ch in 0..c {
            idx[ch * v + s] = step * c + ch;
        }
    }
    seq.gather(Rc::new(idx), &[c, dims[0], dims[1], dims[2]])
}

/// Dense snapshot of the parameters used by the numeric kernels.
struct Snapshot {
    lambda: Vec<f64>,
    gamma: Vec<f64>,
    tau: Vec<f64>,
    n: usize,
    d_in: usize,
    d_out: usize,
}

impl Snapshot {
    fn of(p: &SsmParameters) -> Self {
        Snapshot {
            lambda: p.lambdas(),
            gamma: p.gamma.to_vec(),
            tau: p.tau.to_vec(),
            n: p.d_state(),
            d_in: p.d_in(),
            d_out: p.d_out(),
        }
    }

    /// state ← λ ⊙ state + Γ u
    #[inline]
    fn step(&self, state: &mut [f64], u: &[f64]) {
        for (i, s) in state.iter_mut().enumerate() {
            let row = &self.gamma[i * self.d_in..][..self.d_in];
            let drive: f64 = row.iter().zip(u).map(|(g, x)| g * x).sum();
            *s = self.lambda[i] * *s + drive;
        }
    }

    /// out ← τ state
    #[inline]
    fn read(&self, state: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.tau.chunks(self.n)) {
            *o = row.iter().zip(state).map(|(a, b)| a * b).sum();
        }
    }
}

fn positions(t: usize, dir: Direction) -> Box<dyn Iterator<Item = usize>> {
    match dir {
        Direction::Forward => Box::new(0..t),
        Direction::Backward => Box::new((0..t).rev()),
    }
}

fn check_input(u: &Tensor, p: &SsmParameters) -> Result<usize> {
    p.validate()?;
    match u.shape() {
        &[t, d] if d == p.d_in() => Ok(t),
        s => Err(Error::Shape(format!(
            "scan input {s:?} does not match Γ input width {}",
            p.d_in()
        ))),
    }
}

/// One state update and readout per step, in sequence order.
pub fn scan_naive(u: &Tensor, p: &SsmParameters) -> Result<Tensor> {
    let t_len = check_input(u, p)?;
    let snap = Snapshot::of(p);
    let keep = Tensor::tracks(&[u, &p.lambda_raw, &p.gamma, &p.tau]);
    let x = u.data();
    let mut out = vec![0.0; t_len * snap.d_out];
    let mut states = if keep { vec![0.0; t_len * snap.n] } else { Vec::new() };
    let mut state = vec![0.0; snap.n];
    for t in positions(t_len, p.direction) {
        snap.step(&mut state, &x[t * snap.d_in..][..snap.d_in]);
        snap.read(&state, &mut out[t * snap.d_out..][..snap.d_out]);
        if keep {
            states[t * snap.n..][..snap.n].copy_from_slice(&state);
        }
    }
    drop(x);
    Ok(finish(u, p, snap, out, states, t_len))
}

/// Same contract as [`scan_naive`], but the input drive `Γu` and readout are
/// computed a chunk at a time with the state handed across chunk boundaries, so
/// scratch memory is `O(chunk · D_state)`.
pub fn scan_chunked(u: &Tensor, p: &SsmParameters, chunk: usize) -> Result<Tensor> {
    if chunk == 0 {
        return Err(Error::InvalidSpec("chunk length must be positive".into()));
    }
    let t_len = check_input(u, p)?;
    let snap = Snapshot::of(p);
    let keep = Tensor::tracks(&[u, &p.lambda_raw, &p.gamma, &p.tau]);
    let x = u.data();
    let (n, d_in, d_out) = (snap.n, snap.d_in, snap.d_out);
    let mut out = vec![0.0; t_len * d_out];
    let mut states = if keep { vec![0.0; t_len * n] } else { Vec::new() };
    let mut carry = vec![0.0; n];
    let mut drive = vec![0.0; chunk.min(t_len) * n];
    let mut chunk_states = vec![0.0; chunk.min(t_len) * n];
    let order: Vec<usize> = positions(t_len, p.direction).collect();
    for steps in order.chunks(chunk) {
        for (j, &t) in steps.iter().enumerate() {
            let xt = &x[t * d_in..][..d_in];
            for i in 0..n {
                drive[j * n + i] = snap.gamma[i * d_in..][..d_in]
                    .iter()
                    .zip(xt)
                    .map(|(g, v)| g * v)
                    .sum();
            }
        }
        for j in 0..steps.len() {
            for i in 0..n {
                carry[i] = snap.lambda[i] * carry[i] + drive[j * n + i];
            }
            chunk_states[j * n..][..n].copy_from_slice(&carry);
        }
        for (j, &t) in steps.iter().enumerate() {
            let s = &chunk_states[j * n..][..n];
            snap.read(s, &mut out[t * d_out..][..d_out]);
            if keep {
                states[t * n..][..n].copy_from_slice(s);
            }
        }
    }
    drop(x);
    Ok(finish(u, p, snap, out, states, t_len))
}

/// Wraps the scan output in a graph node whose backward pass runs the adjoint
/// recurrence in the opposite direction.
fn finish(u: &Tensor, p: &SsmParameters, snap: Snapshot, out: Vec<f64>, states: Vec<f64>, t_len: usize) -> Tensor {
    let parents = vec![u.clone(), p.lambda_raw.clone(), p.gamma.clone(), p.tau.clone()];
    let u_t = u.clone();
    let dir = p.direction;
    let overridden = p.lambda_override.is_some();
    let d_out = snap.d_out;
    Tensor::from_op(out, vec![t_len, d_out], parents, "ssm_scan", move |g| {
        let Snapshot {
            lambda,
            gamma,
            tau,
            n,
            d_in,
            d_out,
        } = &snap;
        let (n, d_in, d_out) = (*n, *d_in, *d_out);
        let x = u_t.data();
        let mut gu = vec![0.0; t_len * d_in];
        let mut g_lambda = vec![0.0; n];
        let mut g_gamma = vec![0.0; n * d_in];
        let mut g_tau = vec![0.0; d_out * n];
        let mut carry = vec![0.0; n];
        let mut gs = vec![0.0; n];
        let order: Vec<usize> = positions(t_len, dir).collect();
        for (k, &t) in order.iter().enumerate().rev() {
            let gt = &g[t * d_out..][..d_out];
            let st = &states[t * n..][..n];
            for i in 0..n {
                let mut acc = lambda[i] * carry[i];
                for o in 0..d_out {
                    acc += tau[o * n + i] * gt[o];
                }
                gs[i] = acc;
            }
            for o in 0..d_out {
                for i in 0..n {
                    g_tau[o * n + i] += gt[o] * st[i];
                }
            }
            let xt = &x[t * d_in..][..d_in];
            let gut = &mut gu[t * d_in..][..d_in];
            for i in 0..n {
                for j in 0..d_in {
                    g_gamma[i * d_in + j] += gs[i] * xt[j];
                    gut[j] += gamma[i * d_in + j] * gs[i];
                }
            }
            if k > 0 {
                let prev = &states[order[k - 1] * n..][..n];
                for i in 0..n {
                    g_lambda[i] += gs[i] * prev[i];
                }
            }
            carry.copy_from_slice(&gs);
        }
        // dλ/dr = -λ(1 - λ)
        let g_raw = (!overridden).then(|| {
            g_lambda
                .iter()
                .zip(lambda)
                .map(|(gl, l)| -gl * l * (1.0 - l))
                .collect()
        });
        vec![Some(gu), g_raw, Some(g_gamma), Some(g_tau)]
    })
}
