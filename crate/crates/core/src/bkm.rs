//! Bidirectional state-space block with a spline-operator fusion term.
//!
//! ```text
//! F_0 = W_in * X                           (pointwise, C → C)
//! F_f = scan_fwd(F_0),  F_b = scan_bwd(F_0)
//! Y   = P'(F_f + ς(N(F_b)) + F_b) + X
//! ```
//!
//! Both scans visit the voxels in the same row-major order; the backward
//! branch runs its recurrence from the last voxel to the first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kan::{KanConfig, KanLayer};
use crate::nn::{join, Conv3d, LayerNorm, Module};
use crate::ssm::{flatten_volume, scan_chunked, unflatten_volume, Direction, ScanOrder, SsmParameters};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct BkmConfig {
    pub channels: usize,
    pub d_state: usize,
    pub kan_hidden: usize,
    /// Sequence chunk length for the scans.
    pub chunk: usize,
}

impl BkmConfig {
    pub fn new(channels: usize) -> Self {
        BkmConfig {
            channels,
            d_state: 16,
            kan_hidden: 64,
            chunk: 1024,
        }
    }
}

#[derive(Debug)]
pub struct BkmBlock {
    pub input_projection: Conv3d,
    pub forward_branch: SsmParameters,
    pub forward_order: ScanOrder,
    pub backward_branch: SsmParameters,
    pub backward_order: ScanOrder,
    pub norm: LayerNorm,
    pub kan: KanLayer,
    pub output_projection: Conv3d,
    pub chunk: usize,
}

/// Intermediate maps of one forward pass, all `[C, H, W, D]`.
#[derive(Debug)]
pub struct BkmTrace {
    pub f0: Tensor,
    pub f_forward: Tensor,
    pub f_backward: Tensor,
    pub fused: Tensor,
    pub output: Tensor,
}

impl BkmBlock {
    pub fn new(cfg: &BkmConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.channels;
        if c == 0 || cfg.d_state == 0 || cfg.chunk == 0 {
            return Err(Error::Config(format!("invalid BKM config {cfg:?}")));
        }
        Ok(BkmBlock {
            input_projection: Conv3d::pointwise(c, c, true, rng),
            forward_branch: SsmParameters::new(c, cfg.d_state, c, Direction::Forward, rng),
            forward_order: ScanOrder::row_major(),
            backward_branch: SsmParameters::new(c, cfg.d_state, c, Direction::Backward, rng),
            backward_order: ScanOrder::row_major(),
            norm: LayerNorm::new(c),
            kan: KanLayer::new(&KanConfig::new(c, cfg.kan_hidden, c), rng)?,
            output_projection: Conv3d::pointwise(c, c, true, rng),
            chunk: cfg.chunk,
        })
    }

    pub fn seeded(cfg: &BkmConfig, seed: u64) -> Result<Self> {
        Self::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn channels(&self) -> usize {
        self.input_projection.out_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(x)?.output)
    }

    pub fn forward_trace(&self, x: &Tensor) -> Result<BkmTrace> {
        let c = self.channels();
        if x.rank() != 4 || x.shape()[0] != c {
            return Err(Error::Shape(format!("BKM over {c} channels got {:?}", x.shape())));
        }
        let dims = [x.shape()[1], x.shape()[2], x.shape()[3]];
        let f0 = self.input_projection.forward(x)?;
        let branch = |p: &SsmParameters, order: &ScanOrder| -> Result<(Tensor, Tensor)> {
            let seq = scan_chunked(&flatten_volume(&f0, order)?, p, self.chunk)?;
            let vol = unflatten_volume(&seq, order, dims)?;
            Ok((seq, vol))
        };
        let (seq_f, f_forward) = branch(&self.forward_branch, &self.forward_order)?;
        let (seq_b, f_backward) = branch(&self.backward_branch, &self.backward_order)?;
        // the fusion is computed per voxel, so any common order works; use the forward one
        let seq_b = if self.backward_order == self.forward_order {
            seq_b
        } else {
            flatten_volume(&f_backward, &self.forward_order)?
        };
        let fused_seq = seq_f.add(&self.kan.forward(&self.norm.forward(&seq_b)?)?).add(&seq_b);
        let fused = unflatten_volume(&fused_seq, &self.forward_order, dims)?;
        let output = self.output_projection.forward(&fused)?.add(x);
        output.check_finite("BKM output")?;
        Ok(BkmTrace {
            f0,
            f_forward,
            f_backward,
            fused,
            output,
        })
    }
}

impl Module for BkmBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.input_projection.visit_params(&join(prefix, "input_projection"), f);
        self.forward_branch.visit_params(&join(prefix, "forward_branch"), f);
        self.backward_branch.visit_params(&join(prefix, "backward_branch"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.kan.visit_params(&join(prefix, "kan"), f);
        self.output_projection.visit_params(&join(prefix, "output_projection"), f);
    }
}
