//! Multi-scale aggregation bridge and the self-distillation loss.
//!
//! ```text
//! η      = concat_k D_k(X_k)                    k = 1..4, at X_5's spatial size
//! ν      = A_s(P(A_c(η))) + A_s(A_c'(X_5))
//! X_i^out = ReLU(U_i(P_i(ν)) + X_i)              i = 1..4
//! ```
//!
//! `D_k` is average pooling followed by a pointwise map; `A_c` is a
//! squeeze-excitation gate; `A_s` gates every voxel by a 7³ convolution over the
//! channel mean and max. Per-scale class heads read `X_i` (teacher) and
//! `X_i^out` (student).

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Conv3d, Module};
use crate::tensor::{avg_pool3d, no_grad, resample_trilinear, ConvSpec, Tensor};

fn spatial(t: &Tensor) -> [usize; 3] {
    [t.shape()[1], t.shape()[2], t.shape()[3]]
}

/// The five encoder levels and, after redistribution, the four refined maps.
#[derive(Clone, Debug)]
pub struct ScaleFeatureSet {
    features: Vec<Tensor>,
    pub refined: Vec<Tensor>,
}

impl ScaleFeatureSet {
    /// Requires five rank-4 maps whose spatial dims strictly shrink level by level.
    pub fn new(features: Vec<Tensor>) -> Result<Self> {
        if features.len() != 5 {
            return Err(Error::Shape(format!("expected 5 scales, got {}", features.len())));
        }
        for f in &features {
            if f.rank() != 4 {
                return Err(Error::Shape(format!("scale feature of shape {:?}", f.shape())));
            }
        }
        for k in 0..4 {
            let (a, b) = (spatial(&features[k]), spatial(&features[k + 1]));
            if (0..3).any(|i| a[i] <= b[i]) {
                return Err(Error::Shape(format!(
                    "scale {} dims {a:?} do not strictly exceed scale {} dims {b:?}",
                    k + 1,
                    k + 2
                )));
            }
        }
        Ok(ScaleFeatureSet {
            features,
            refined: Vec::new(),
        })
    }

    /// Level `k` in 1..=5.
    pub fn level(&self, k: usize) -> &Tensor {
        &self.features[k - 1]
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.features
    }

    pub fn channels(&self) -> [usize; 5] {
        std::array::from_fn(|k| self.features[k].shape()[0])
    }
}

/// Squeeze-excitation gate: `x ⊙ σ(W2 ReLU(W1 GAP(x)))`.
#[derive(Debug)]
pub struct ChannelGate {
    pub fc1: Conv3d,
    pub fc2: Conv3d,
}

impl ChannelGate {
    pub fn new(c: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = (c / reduction.max(1)).max(1);
        ChannelGate {
            fc1: Conv3d::pointwise(c, hidden, true, rng),
            fc2: Conv3d::pointwise(hidden, c, true, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.fc2.forward(&self.fc1.forward(&x.mean_spatial())?.relu())?;
        Ok(x.mul(&s.sigmoid()))
    }
}

impl Module for ChannelGate {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }
}

/// Spatial gate: `x ⊙ σ(conv7([mean_c x, max_c x]))`.
#[derive(Debug)]
pub struct SpatialGate {
    pub conv: Conv3d,
}

impl SpatialGate {
    pub fn new(kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        SpatialGate {
            conv: Conv3d::new(2, 1, ConvSpec::same(kernel), true, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let stats = Tensor::cat(&[&x.mean_channels(), &x.max_channels()])?;
        Ok(x.mul(&self.conv.forward(&stats)?.sigmoid()))
    }
}

impl Module for SpatialGate {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
    }
}

#[derive(Clone, Debug)]
pub struct MdaConfig {
    pub channels: [usize; 5],
    pub num_classes: usize,
    /// Squeeze ratio of the channel gates.
    pub reduction: usize,
    pub spatial_kernel: usize,
}

impl MdaConfig {
    pub fn new(channels: [usize; 5], num_classes: usize) -> Self {
        MdaConfig {
            channels,
            num_classes,
            reduction: 4,
            spatial_kernel: 7,
        }
    }
}

#[derive(Debug)]
pub struct MdaModule {
    pub down: Vec<Conv3d>,
    pub gate_eta: ChannelGate,
    pub gate_deep: ChannelGate,
    pub spatial_gate: SpatialGate,
    pub projection: Conv3d,
    pub redistribute: Vec<Conv3d>,
    pub teacher_heads: Vec<Conv3d>,
    pub student_heads: Vec<Conv3d>,
    identity_attention: Cell<bool>,
}

impl MdaModule {
    pub fn new(cfg: &MdaConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let ch = cfg.channels;
        if ch.contains(&0) || cfg.num_classes < 2 {
            return Err(Error::Config(format!("invalid MDA config {cfg:?}")));
        }
        let total: usize = ch[..4].iter().sum();
        let c5 = ch[4];
        Ok(MdaModule {
            down: (0..4).map(|k| Conv3d::pointwise(ch[k], ch[k], true, rng)).collect(),
            gate_eta: ChannelGate::new(total, cfg.reduction, rng),
            gate_deep: ChannelGate::new(c5, cfg.reduction, rng),
            spatial_gate: SpatialGate::new(cfg.spatial_kernel, rng),
            projection: Conv3d::pointwise(total, c5, true, rng),
            redistribute: (0..4).map(|k| Conv3d::pointwise(c5, ch[k], true, rng)).collect(),
            teacher_heads: (0..4)
                .map(|k| Conv3d::pointwise(ch[k], cfg.num_classes, true, rng))
                .collect(),
            student_heads: (0..4)
                .map(|k| Conv3d::pointwise(ch[k], cfg.num_classes, true, rng))
                .collect(),
            identity_attention: Cell::new(false),
        })
    }

    pub fn seeded(cfg: &MdaConfig, seed: u64) -> Result<Self> {
        Self::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Test hook: replace both attention maps by the identity.
    pub fn set_identity_attention(&self, on: bool) {
        self.identity_attention.set(on);
    }

    fn channel_gate(&self, gate: &ChannelGate, x: &Tensor) -> Result<Tensor> {
        if self.identity_attention.get() {
            Ok(x.clone())
        } else {
            gate.forward(x)
        }
    }

    fn spatial_gate(&self, x: &Tensor) -> Result<Tensor> {
        if self.identity_attention.get() {
            Ok(x.clone())
        } else {
            self.spatial_gate.forward(x)
        }
    }

    fn check(&self, s: &ScaleFeatureSet) -> Result<()> {
        let expect: [usize; 5] = std::array::from_fn(|k| {
            if k < 4 {
                self.down[k].in_channels()
            } else {
                self.projection.out_channels()
            }
        });
        if s.channels() != expect {
            return Err(Error::Shape(format!(
                "MDA expects channels {expect:?}, got {:?}",
                s.channels()
            )));
        }
        Ok(())
    }

    /// `η`: every level pooled to the deepest level's grid, then concatenated.
    pub fn aggregate(&self, s: &ScaleFeatureSet) -> Result<Tensor> {
        self.check(s)?;
        let deep = spatial(s.level(5));
        let mut parts = Vec::with_capacity(4);
        for k in 0..4 {
            let d = spatial(s.level(k + 1));
            let f = d[0] / deep[0];
            if (0..3).any(|i| d[i] != f * deep[i]) {
                return Err(Error::Shape(format!(
                    "scale {} dims {d:?} are not an isotropic multiple of {deep:?}",
                    k + 1
                )));
            }
            parts.push(self.down[k].forward(&avg_pool3d(s.level(k + 1), f)?)?);
        }
        Tensor::cat(&parts.iter().collect::<Vec<_>>())
    }

    /// `ν`, with the deepest level's channel count and spatial dims.
    pub fn fuse(&self, s: &ScaleFeatureSet) -> Result<Tensor> {
        let eta = self.aggregate(s)?;
        let a = self.spatial_gate(&self.projection.forward(&self.channel_gate(&self.gate_eta, &eta)?)?)?;
        let b = self.spatial_gate(&self.channel_gate(&self.gate_deep, s.level(5))?)?;
        Ok(a.add(&b))
    }

    /// `X_i^out = ReLU(U_i(P_i(ν)) + X_i)` for i = 1..4.
    pub fn redistribute(&self, nu: &Tensor, s: &ScaleFeatureSet) -> Result<Vec<Tensor>> {
        (0..4)
            .map(|k| {
                let x = s.level(k + 1);
                let up = resample_trilinear(&self.redistribute[k].forward(nu)?, spatial(x))?;
                Ok(up.add(x).relu())
            })
            .collect()
    }

    /// Fuses, redistributes and stores the refined maps in `s`.
    pub fn forward(&self, s: &mut ScaleFeatureSet) -> Result<Tensor> {
        let nu = self.fuse(s)?;
        s.refined = self.redistribute(&nu, s)?;
        Ok(nu)
    }

    /// Teacher logits from `X_i`, student logits from `X_i^out`.
    pub fn head_logits(&self, s: &ScaleFeatureSet) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        if s.refined.len() != 4 {
            return Err(Error::Contract("refined maps missing; run forward first".into()));
        }
        let teacher = (0..4)
            .map(|k| self.teacher_heads[k].forward(s.level(k + 1)))
            .collect::<Result<Vec<_>>>()?;
        let student = (0..4)
            .map(|k| self.student_heads[k].forward(&s.refined[k]))
            .collect::<Result<Vec<_>>>()?;
        Ok((teacher, student))
    }
}

impl Module for MdaModule {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (k, d) in self.down.iter().enumerate() {
            d.visit_params(&join(prefix, &format!("down{}", k + 1)), f);
        }
        self.gate_eta.visit_params(&join(prefix, "gate_eta"), f);
        self.gate_deep.visit_params(&join(prefix, "gate_deep"), f);
        self.spatial_gate.visit_params(&join(prefix, "spatial_gate"), f);
        self.projection.visit_params(&join(prefix, "projection"), f);
        for (k, p) in self.redistribute.iter().enumerate() {
            p.visit_params(&join(prefix, &format!("redistribute{}", k + 1)), f);
        }
        for (k, h) in self.teacher_heads.iter().enumerate() {
            h.visit_params(&join(prefix, &format!("teacher_head{}", k + 1)), f);
        }
        for (k, h) in self.student_heads.iter().enumerate() {
            h.visit_params(&join(prefix, &format!("student_head{}", k + 1)), f);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub alpha: f64,
    pub stop_gradient_teacher: bool,
    pub epsilon: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 0.5,
            stop_gradient_teacher: true,
            epsilon: 1e-7,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "distillation needs alpha in [0, 1] and epsilon > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct DistillOutput {
    pub loss: Tensor,
    /// Voxel-mean structural term per scale.
    pub structural: Vec<f64>,
    /// Voxel-mean distributional (cross-entropy) term per scale.
    pub distribution: Vec<f64>,
}

/// Voxel mean of `1 − 2 Σ_c p q / (Σ_c p + Σ_c q + ε)`.
pub fn structural_term(p: &Tensor, q: &Tensor, eps: f64) -> Tensor {
    let num = p.mul(q).sum_channels().scale(2.0);
    let den = p.sum_channels().add(&q.sum_channels()).add_scalar(eps);
    num.div(&den).mean().neg().add_scalar(1.0)
}

/// Voxel mean of `−Σ_c p log(q + ε)`.
pub fn distribution_term(p: &Tensor, q: &Tensor, eps: f64) -> Tensor {
    p.mul(&q.ln_eps(eps)).sum_channels().mean().neg()
}

/// Voxel mean of the ε-smoothed entropy `−Σ_c p log(p + ε)`; the value
/// `distribution_term` takes when student and teacher coincide.
pub fn smoothed_entropy(p: &Tensor, eps: f64) -> f64 {
    no_grad(|| distribution_term(p, p, eps).item())
}

/// `Σ_i α L_struct_i + (1 − α) L_dist_i` over paired per-scale logits.
/// The teacher distribution weights the student's log-probabilities.
pub fn distill_loss(teacher_logits: &[Tensor], student_logits: &[Tensor], cfg: &DistillConfig) -> Result<DistillOutput> {
    cfg.validate()?;
    if teacher_logits.len() != student_logits.len() || teacher_logits.is_empty() {
        return Err(Error::Shape(format!(
            "{} teacher vs {} student scales",
            teacher_logits.len(),
            student_logits.len()
        )));
    }
    let mut terms = Vec::new();
    let (mut structural, mut distribution) = (Vec::new(), Vec::new());
    for (t, s) in teacher_logits.iter().zip(student_logits) {
        if t.shape() != s.shape() {
            return Err(Error::Shape(format!("teacher {:?} vs student {:?}", t.shape(), s.shape())));
        }
        if t.shape()[0] < 2 {
            return Err(Error::Config(format!("distillation needs at least 2 classes, got {}", t.shape()[0])));
        }
        let t = if cfg.stop_gradient_teacher { t.detach() } else { t.clone() };
        let (pt, ps) = (t.softmax_channels(), s.softmax_channels());
        let st = (cfg.alpha > 0.0).then(|| structural_term(&pt, &ps, cfg.epsilon));
        let di = (cfg.alpha < 1.0).then(|| distribution_term(&pt, &ps, cfg.epsilon));
        structural.push(match &st {
            Some(v) => v.item(),
            None => no_grad(|| structural_term(&pt, &ps, cfg.epsilon).item()),
        });
        distribution.push(match &di {
            Some(v) => v.item(),
            None => no_grad(|| distribution_term(&pt, &ps, cfg.epsilon).item()),
        });
        terms.push(match (st, di) {
            (Some(a), Some(b)) => a.scale(cfg.alpha).add(&b.scale(1.0 - cfg.alpha)),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => unreachable!("alpha is either > 0 or < 1"),
        });
    }
    let loss = terms[1..].iter().fold(terms[0].clone(), |acc, t| acc.add(t));
    loss.check_finite("distillation loss")?;
    Ok(DistillOutput {
        loss,
        structural,
        distribution,
    })
}
