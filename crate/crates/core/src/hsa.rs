//! Hierarchical semantic alignment block.
//!
//! ```text
//! ζ     = ReLU(BN(W_pw * F))
//! [b | i] = P(ζ)                       b: w channels, i: 3w channels
//! [e0 | e1 | e2] = D(i)                depthwise 3³ then pointwise
//! A     = M_out(M_2(M_1(b + e0) + e1) + e2)
//! X2    = GAP(F),  B = X2 ⊙ σ(conv1d_channels(X2))
//! Z     = M_SRF(A + B) + F,    M_SRF(x) = pw(dw5(x) + dw7(x))
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm3d, Conv3d, Module};
use crate::tensor::{ConvSpec, Tensor};

#[derive(Clone, Debug)]
pub struct HsaConfig {
    pub channels: usize,
    /// Width multiplier of the projection `P`.
    pub expand: usize,
}

impl HsaConfig {
    pub fn new(channels: usize) -> Self {
        HsaConfig { channels, expand: 2 }
    }

    /// Channels per part: `ceil(C · expand / 4)`.
    pub fn part_width(&self) -> usize {
        (self.channels * self.expand).div_ceil(4)
    }
}

#[derive(Debug)]
pub struct HsaBlock {
    pub pw: Conv3d,
    pub bn: BatchNorm3d,
    pub projection: Conv3d,
    pub dw: Conv3d,
    pub dw_pw: Conv3d,
    pub m1: Conv3d,
    pub m2: Conv3d,
    pub m_out: Conv3d,
    /// 1-D kernel of 3 taps over the channel axis, stored as a `[1, 1, 3, 1, 1]` conv weight.
    pub channel_conv: Tensor,
    pub srf5: Conv3d,
    pub srf7: Conv3d,
    pub srf_merge: Conv3d,
    part: usize,
}

impl HsaBlock {
    pub fn new(cfg: &HsaConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.channels;
        if c == 0 || cfg.expand == 0 {
            return Err(Error::Config(format!("invalid HSA config {cfg:?}")));
        }
        let w = cfg.part_width();
        let bound = 1.0 / 3f64.sqrt();
        Ok(HsaBlock {
            pw: Conv3d::pointwise(c, c, false, rng),
            bn: BatchNorm3d::new(c),
            projection: Conv3d::pointwise(c, 4 * w, true, rng),
            dw: Conv3d::depthwise(3 * w, 3, rng),
            dw_pw: Conv3d::pointwise(3 * w, 3 * w, true, rng),
            m1: Conv3d::pointwise(w, w, true, rng),
            m2: Conv3d::pointwise(w, w, true, rng),
            m_out: Conv3d::pointwise(w, c, true, rng),
            channel_conv: crate::nn::uniform(&[1, 1, 3, 1, 1], bound, rng),
            srf5: Conv3d::depthwise(c, 5, rng),
            srf7: Conv3d::depthwise(c, 7, rng),
            srf_merge: Conv3d::pointwise(c, c, true, rng),
            part: w,
        })
    }

    pub fn seeded(cfg: &HsaConfig, seed: u64) -> Result<Self> {
        Self::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn channels(&self) -> usize {
        self.pw.in_channels()
    }

    pub fn part_width(&self) -> usize {
        self.part
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 4 || x.shape()[0] != self.channels() {
            return Err(Error::Shape(format!(
                "HSA over {} channels got {:?}",
                self.channels(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// `P(ReLU(BN(W_pw * F)))`, `[4w, H, W, D]`.
    pub fn project(&self, f_in: &Tensor) -> Result<Tensor> {
        self.check(f_in)?;
        let zeta = self.bn.forward(&self.pw.forward(f_in)?)?.relu();
        self.projection.forward(&zeta)
    }

    /// The cross-scale branch `A^(1)`, `[C, H, W, D]`.
    pub fn csc_branch(&self, f_in: &Tensor) -> Result<Tensor> {
        let w = self.part;
        let proj = self.project(f_in)?;
        let b = proj.narrow0(0, w)?;
        let inc = self.dw_pw.forward(&self.dw.forward(&proj.narrow0(w, 4 * w)?)?)?;
        let e = |k: usize| inc.narrow0(k * w, (k + 1) * w);
        let a = self.m1.forward(&b.add(&e(0)?))?;
        let a = self.m2.forward(&a.add(&e(1)?))?;
        self.m_out.forward(&a.add(&e(2)?))
    }

    /// Global descriptor `X2 = GAP(F)`, `[C, 1, 1, 1]`.
    pub fn descriptor(&self, f_in: &Tensor) -> Result<Tensor> {
        self.check(f_in)?;
        Ok(f_in.mean_spatial())
    }

    /// Per-channel attention weights `σ(conv1d(X2))`, `[C, 1, 1, 1]`.
    pub fn attention_weights(&self, descriptor: &Tensor) -> Result<Tensor> {
        let c = descriptor.shape()[0];
        let spec = ConvSpec {
            kernel: [3, 1, 1],
            stride: [1, 1, 1],
            padding: [1, 0, 0],
            dilation: [1, 1, 1],
            groups: 1,
        };
        let row = descriptor.reshape(&[1, c, 1, 1])?;
        let z = crate::tensor::conv3d(&row, &self.channel_conv, &spec)?;
        z.sigmoid().reshape(&[c, 1, 1, 1])
    }

    /// `B^(2) = X2 ⊙ σ(conv1d(X2))`, `[C, 1, 1, 1]` (broadcast over space).
    pub fn channel_attention(&self, f_in: &Tensor) -> Result<Tensor> {
        let x2 = self.descriptor(f_in)?;
        Ok(x2.mul(&self.attention_weights(&x2)?))
    }

    pub fn srf(&self, x: &Tensor) -> Result<Tensor> {
        self.srf_merge
            .forward(&self.srf5.forward(x)?.add(&self.srf7.forward(x)?))
    }

    pub fn forward(&self, f_in: &Tensor) -> Result<Tensor> {
        let a = self.csc_branch(f_in)?;
        let b = self.channel_attention(f_in)?;
        let z = self.srf(&a.add(&b))?.add(f_in);
        z.check_finite("HSA output")?;
        Ok(z)
    }
}

impl Module for HsaBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        let convs: [(&str, &Conv3d); 7] = [
            ("pw", &self.pw),
            ("projection", &self.projection),
            ("dw", &self.dw),
            ("dw_pw", &self.dw_pw),
            ("m1", &self.m1),
            ("m2", &self.m2),
            ("m_out", &self.m_out),
        ];
        for (name, conv) in convs {
            conv.visit_params(&join(prefix, name), f);
            if name == "pw" {
                self.bn.visit_params(&join(prefix, "bn"), f);
            }
        }
        f(join(prefix, "channel_conv"), &self.channel_conv);
        self.srf5.visit_params(&join(prefix, "srf5"), f);
        self.srf7.visit_params(&join(prefix, "srf7"), f);
        self.srf_merge.visit_params(&join(prefix, "srf_merge"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.bn.visit_buffers(&join(prefix, "bn"), f);
    }

    fn set_training(&self, training: bool) {
        self.bn.set_training(training);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{fill_params, param_count};
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape)
    }

    fn set_delta(conv: &Conv3d) {
        let k = conv.spec.kernel_volume();
        let mut w = conv.weight.data_mut();
        w.fill(0.0);
        for c in 0..w.len() / k {
            w[c * k + k / 2] = 1.0;
        }
    }

    fn set_identity(conv: &Conv3d) {
        let n = conv.out_channels();
        let mut w = conv.weight.data_mut();
        w.fill(0.0);
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
    }

    #[test]
    fn zero_parameters_are_identity() {
        let block = HsaBlock::seeded(&HsaConfig::new(4), 0).unwrap();
        fill_params(&block, 0.0);
        let x = random(&[4, 3, 4, 5], 1);
        assert_eq!(block.forward(&x).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn zero_csc_weights_give_zero() {
        let block = HsaBlock::seeded(&HsaConfig::new(3), 0).unwrap();
        fill_params(&block, 0.0);
        let a = block.csc_branch(&random(&[3, 2, 2, 2], 2)).unwrap();
        assert!(a.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_kernels_sum_parts() {
        let cfg = HsaConfig {
            channels: 1,
            expand: 4,
        };
        let block = HsaBlock::seeded(&cfg, 3).unwrap();
        assert_eq!(block.part_width(), 1);
        fill_params(&block, 0.0);
        block.bn.gamma.data_mut().fill(1.0);
        block.pw.weight.data_mut()[0] = 1.0;
        for (i, v) in block.projection.weight.data_mut().iter_mut().enumerate() {
            *v = 0.5 + i as f64;
        }
        set_delta(&block.dw);
        set_identity(&block.dw_pw);
        set_identity(&block.m1);
        set_identity(&block.m2);
        set_identity(&block.m_out);
        let x = random(&[1, 2, 2, 2], 4);
        let proj = block.project(&x).unwrap().to_vec();
        let a = block.csc_branch(&x).unwrap().to_vec();
        for v in 0..8 {
            let expect: f64 = (0..4).map(|k| proj[k * 8 + v]).sum();
            assert!((a[v] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_attention_matches_oracle() {
        let block = HsaBlock::seeded(&HsaConfig::new(6), 5).unwrap();
        let x = random(&[6, 4, 4, 4], 6);
        let b = block.channel_attention(&x).unwrap().to_vec();
        let xs = x.to_vec();
        let desc: Vec<f64> = (0..6).map(|c| xs[c * 64..(c + 1) * 64].iter().sum::<f64>() / 64.0).collect();
        let k = block.channel_conv.to_vec();
        for c in 0..6 {
            let mut z = 0.0;
            for (t, kt) in k.iter().enumerate() {
                let src = c as isize + t as isize - 1;
                if (0..6).contains(&src) {
                    z += kt * desc[src as usize];
                }
            }
            let expect = desc[c] / (1.0 + (-z).exp());
            assert!((b[c] - expect).abs() < 1e-12);
            assert!(b[c].abs() <= desc[c].abs());
        }
    }

    #[test]
    fn constant_input_descriptor_and_zero_input() {
        let block = HsaBlock::seeded(&HsaConfig::new(2), 7).unwrap();
        let x = Tensor::from_vec([vec![1.5; 8], vec![-2.0; 8]].concat(), &[2, 2, 2, 2]);
        assert_eq!(block.descriptor(&x).unwrap().to_vec(), vec![1.5, -2.0]);
        let b = block.channel_attention(&Tensor::zeros(&[2, 2, 2, 2])).unwrap();
        assert!(b.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_only_hand_case() {
        let block = HsaBlock::seeded(&HsaConfig::new(1), 8).unwrap();
        fill_params(&block, 0.0);
        let (wc, a, b, m, c, v) = (0.7, 0.02, -0.01, 1.5, 0.3, 2.0);
        block.channel_conv.data_mut()[1] = wc;
        block.srf5.weight.data_mut().fill(a);
        block.srf7.weight.data_mut().fill(b);
        block.srf_merge.weight.data_mut()[0] = m;
        block.srf_merge.bias.as_ref().unwrap().data_mut()[0] = c;
        let z = block.forward(&Tensor::full(&[1, 2, 2, 2], v)).unwrap();
        let b2 = v / (1.0 + (-wc * v).exp());
        let expect = v + m * 8.0 * (a + b) * b2 + c;
        for zi in z.to_vec() {
            assert!((zi - expect).abs() < 1e-12, "{zi} vs {expect}");
        }
    }

    #[test]
    fn srf_depthwise_is_cheaper_than_dense() {
        for c in 2..6 {
            let block = HsaBlock::seeded(&HsaConfig::new(c), 0).unwrap();
            assert_eq!(param_count(&block.srf7), c * 343);
            assert!(param_count(&block.srf7) < c * c * 343);
        }
    }

    #[test]
    fn projection_width_and_shape() {
        let block = HsaBlock::seeded(&HsaConfig::new(8), 9).unwrap();
        let x = random(&[8, 8, 8, 8], 10);
        assert_eq!(block.project(&x).unwrap().shape(), &[16, 8, 8, 8]);
        assert_eq!(block.forward(&x).unwrap().shape(), &[8, 8, 8, 8]);
        assert!(block.forward(&random(&[4, 8, 8, 8], 0)).is_err());
    }
}
