//! Named finite-difference suites covering every differentiable building block.
//!
//! Each suite reduces its block's output to a scalar with a fixed random
//! weighting so that every output coordinate contributes to the check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bkm::{BkmBlock, BkmConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{GradCheck, GradCheckReport};
use crate::hsa::{HsaBlock, HsaConfig};
use crate::kan::{KanConfig, KanLayer};
use crate::losses::{origin_loss, total_loss, LossWeights};
use crate::mda::{distill_loss, DistillConfig, MdaConfig, MdaModule, ScaleFeatureSet};
use crate::metrics::LabelVolume;
use crate::model::{Model, ModelConfig};
use crate::nn::{named_params, Conv3d, ConvTranspose3d, Module};
use crate::ssm::{scan_chunked, scan_naive, Direction, SsmParameters};
use crate::tensor::{ConvSpec, Tensor};

pub const SUITES: &[&str] = &["conv3d", "softmax", "kan", "ssm", "bkm", "hsa", "mda", "losses", "model"];

/// Tolerance of the whole-network check; block suites use the default 1e-4.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape)
}

fn param(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    random(shape, rng).into_param()
}

/// `Σ w ⊙ y` with `w` drawn once per shape.
fn weighted_sum(y: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(y.try_mul(w)?.sum())
}

fn prefixed(prefix: &str, m: &dyn Module) -> Vec<(String, Tensor)> {
    named_params(m).into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

pub fn run_suite(name: &str) -> Result<Vec<GradCheckReport>> {
    match name {
        "conv3d" => conv3d_suite(),
        "softmax" => softmax_suite(),
        "kan" => kan_suite(),
        "ssm" => ssm_suite(),
        "bkm" => bkm_suite(),
        "hsa" => hsa_suite(),
        "mda" => mda_suite(),
        "losses" => losses_suite(),
        "model" => model_suite(),
        other => Err(Error::Config(format!("unknown gradcheck suite {other:?}; known: {}", SUITES.join(", ")))),
    }
}

pub fn run_all() -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for s in SUITES {
        out.extend(run_suite(s)?);
    }
    Ok(out)
}

fn conv3d_suite() -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gc = GradCheck::default();
    let mut reports = Vec::new();
    let cases = [
        ("conv3d same 3^3", 2, 3, ConvSpec::same(3), [5, 4, 5]),
        ("conv3d stride 2", 2, 3, ConvSpec::cubic(2, 2, 0), [4, 4, 6]),
        ("conv3d depthwise", 3, 3, ConvSpec::same(3).with_groups(3), [4, 4, 4]),
    ];
    for (name, cin, cout, spec, dims) in cases {
        let out_dims = spec.output_dims(dims)?;
        let conv = Conv3d::new(cin, cout, spec, true, &mut rng);
        let x = param(&[cin, dims[0], dims[1], dims[2]], &mut rng);
        let w = random(&[cout, out_dims[0], out_dims[1], out_dims[2]], &mut rng);
        let mut inputs = vec![("x".to_string(), x.clone())];
        inputs.extend(prefixed("conv", &conv));
        reports.push(gc.run(name, &inputs, || weighted_sum(&conv.forward(&x)?, &w))?);
    }
    let up = ConvTranspose3d::new(3, 2, ConvSpec::cubic(2, 2, 0), &mut rng);
    let x = param(&[3, 2, 3, 2], &mut rng);
    let w = random(&[2, 4, 6, 4], &mut rng);
    let mut inputs = vec![("x".to_string(), x.clone())];
    inputs.extend(prefixed("up", &up));
    reports.push(gc.run("conv_transpose3d", &inputs, || weighted_sum(&up.forward(&x)?, &w))?);
    Ok(reports)
}

fn softmax_suite() -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gc = GradCheck::default();
    let x = param(&[4, 2, 3, 2], &mut rng);
    let w = random(&[4, 2, 3, 2], &mut rng);
    let inputs = [("x".to_string(), x.clone())];
    Ok(vec![
        gc.run("softmax", &inputs, || weighted_sum(&x.scale(2.0).softmax_channels(), &w))?,
        gc.run("log_softmax", &inputs, || weighted_sum(&x.scale(2.0).log_softmax_channels(), &w))?,
    ])
}

fn kan_suite() -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layer = KanLayer::seeded(&KanConfig::new(3, 5, 2), 3)?;
    // Spread across the grid and past both ends, where the splines extrapolate.
    let x = Tensor::from_vec((0..18).map(|_| rng.random_range(-4.0..4.0)).collect(), &[6, 3]).into_param();
    let w = random(&[6, 2], &mut rng);
    let mut inputs = vec![("x".to_string(), x.clone())];
    inputs.extend(prefixed("kan", &layer));
    Ok(vec![GradCheck::default().run("kan", &inputs, || weighted_sum(&layer.forward(&x)?, &w))?])
}

fn ssm_suite() -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut reports = Vec::new();
    for direction in [Direction::Forward, Direction::Backward] {
        let p = SsmParameters::seeded(3, 4, 2, direction, 4);
        let u = param(&[24, 3], &mut rng);
        let w = random(&[24, 2], &mut rng);
        let inputs = vec![
            ("u".to_string(), u.clone()),
            ("lambda_raw".to_string(), p.lambda_raw.clone()),
            ("gamma".to_string(), p.gamma.clone()),
            ("tau".to_string(), p.tau.clone()),
        ];
        let tag = match direction {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        };
        reports.push(GradCheck::default().run(&format!("ssm naive {tag}"), &inputs, || {
            weighted_sum(&scan_naive(&u, &p)?, &w)
        })?);
        reports.push(GradCheck::default().run(&format!("ssm chunked {tag}"), &inputs, || {
            weighted_sum(&scan_chunked(&u, &p, 5)?, &w)
        })?);
    }
    Ok(reports)
}

fn bkm_suite() -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut reports = Vec::new();
    for c in [2, 4] {
        let cfg = BkmConfig {
            d_state: 4,
            kan_hidden: 6,
            chunk: 7,
            ..BkmConfig::new(c)
        };
        let block = BkmBlock::seeded(&cfg, 5)?;
        let x = param(&[c, 4, 4, 4], &mut rng);
        let w = random(&[c, 4, 4, 4], &mut rng);
        let f = || weighted_sum(&block.forward(&x)?, &w);
        let gc = GradCheck::default();
        reports.push(gc.run(&format!("bkm {c}x4x4x4 input"), &[("x".to_string(), x.clone())], f)?);
        reports.push(gc.run(&format!("bkm {c}x4x4x4 parameters"), &prefixed("bkm", &block), f)?);
    }
    Ok(reports)
}

fn hsa_suite() -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let block = HsaBlock::seeded(&HsaConfig::new(8), 6)?;
    let x = param(&[8, 8, 8, 8], &mut rng);
    let w = random(&[8, 8, 8, 8], &mut rng);
    let f = || weighted_sum(&block.forward(&x)?, &w);
    let gc = GradCheck::sampled(12);
    Ok(vec![
        gc.run("hsa input", &[("x".to_string(), x.clone())], f)?,
        gc.run("hsa parameters", &prefixed("hsa", &block), f)?,
    ])
}

fn pyramid(channels: [usize; 5], size: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    (0..5)
        .map(|k| {
            let s = size >> k;
            param(&[channels[k], s, s, s], rng)
        })
        .collect()
}

fn mda_suite() -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let channels = [2, 3, 3, 4, 4];
    let module = MdaModule::seeded(&MdaConfig::new(channels, 3), 7)?;
    let feats = pyramid(channels, 16, &mut rng);
    let w: Vec<Tensor> = feats.iter().take(4).map(|t| random(t.shape(), &mut rng)).collect();
    let cfg = DistillConfig {
        stop_gradient_teacher: false,
        ..DistillConfig::default()
    };
    let refined = || -> Result<Tensor> {
        let mut s = ScaleFeatureSet::new(feats.clone())?;
        module.forward(&mut s)?;
        let mut acc = Tensor::scalar(0.0);
        for (r, w) in s.refined.iter().zip(&w) {
            acc = acc.add(&weighted_sum(r, w)?);
        }
        Ok(acc)
    };
    let distill = || -> Result<Tensor> {
        let mut s = ScaleFeatureSet::new(feats.clone())?;
        module.forward(&mut s)?;
        let (t, st) = module.head_logits(&s)?;
        Ok(distill_loss(&t, &st, &cfg)?.loss)
    };
    let feat_inputs: Vec<(String, Tensor)> =
        feats.iter().enumerate().map(|(k, t)| (format!("x{}", k + 1), t.clone())).collect();
    let gc = GradCheck::sampled(8);
    Ok(vec![
        gc.run("mda refined maps / inputs", &feat_inputs, refined)?,
        gc.run("mda refined maps / params", &prefixed("mda", &module), refined)?,
        gc.run("mda distillation / inputs", &feat_inputs, distill)?,
        gc.run("mda distillation / params", &prefixed("mda", &module), distill)?,
    ])
}

fn random_labels(dims: [usize; 3], classes: u8, rng: &mut ChaCha8Rng) -> Result<LabelVolume> {
    let n = dims.iter().product();
    LabelVolume::new(dims, (0..n).map(|_| rng.random_range(0..classes)).collect())
}

fn losses_suite() -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = param(&[3, 3, 2, 2], &mut rng);
    let target = random_labels([3, 2, 2], 3, &mut rng)?;
    let w = LossWeights::default();
    let teacher: Vec<Tensor> = (0..2).map(|_| param(&[3, 2, 2, 2], &mut rng)).collect();
    let student: Vec<Tensor> = (0..2).map(|_| param(&[3, 2, 2, 2], &mut rng)).collect();
    let cfg = DistillConfig {
        stop_gradient_teacher: false,
        ..DistillConfig::default()
    };
    let sd = || -> Result<Tensor> { Ok(distill_loss(&teacher, &student, &cfg)?.loss) };
    let mut all = vec![("logits".to_string(), logits.clone())];
    for (k, (t, s)) in teacher.iter().zip(&student).enumerate() {
        all.push((format!("teacher{k}"), t.clone()));
        all.push((format!("student{k}"), s.clone()));
    }
    let gc = GradCheck::default();
    let mut reports = Vec::new();
    for (name, beta) in [("origin loss", 0.5), ("cross-entropy", 1.0), ("soft dice", 0.0)] {
        let wb = LossWeights { beta, ..w };
        reports.push(gc.run(name, &all[..1], || origin_loss(&logits, &target, &wb))?);
    }
    for alpha in [0.0, 0.5, 1.0] {
        let c = DistillConfig { alpha, ..cfg };
        reports.push(gc.run(&format!("distillation alpha={alpha}"), &all[1..], || {
            Ok(distill_loss(&teacher, &student, &c)?.loss)
        })?);
    }
    reports.push(gc.run("total loss", &all, || Ok(total_loss(&origin_loss(&logits, &target, &w)?, &sd()?, &w)))?);
    Ok(reports)
}

/// Tiny network on a 16³ input: total loss against 50 sampled coordinates
/// spread over the input and 24 evenly spaced parameter tensors.
fn model_suite() -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = ModelConfig {
        num_classes: 3,
        seed: 9,
        ..ModelConfig::tiny()
    };
    let model = Model::new(&cfg)?;
    model.set_training(true);
    let x = param(&[4, 16, 16, 16], &mut rng);
    let target = random_labels([16; 3], 3, &mut rng)?;
    let w = LossWeights::default();
    let dcfg = DistillConfig {
        stop_gradient_teacher: false,
        ..DistillConfig::default()
    };
    let params = named_params(&model);
    let mut inputs = vec![("input".to_string(), x.clone())];
    inputs.extend((0..24).map(|k| params[k * params.len() / 24].clone()));
    let f = || -> Result<Tensor> {
        let out = model.forward(&x)?;
        let sd = distill_loss(&out.teacher_logits, &out.student_logits, &dcfg)?.loss;
        Ok(total_loss(&origin_loss(&out.logits, &target, &w)?, &sd, &w))
    };
    let gc = GradCheck::sampled(2).with_tolerance(END_TO_END_TOLERANCE).with_seed(9);
    Ok(vec![gc.run("model end-to-end", &inputs, f)?])
}
