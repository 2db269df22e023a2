//! Training and evaluation loops, run configuration, and the ablation grid.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::losses::{origin_loss, total_loss, LossWeights};
use crate::mda::{distill_loss, DistillConfig};
use crate::metrics::{dice, hd95, iou, LabelVolume, Region};
use crate::model::{save_checkpoint, Model, ModelConfig};
use crate::nn::{named_params, Module};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub lr: f64,
    /// Drives case order and augmentation draws.
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 500,
            lr: 1e-3,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub distill: DistillConfig,
    pub train: TrainSettings,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.distill.validate()?;
        if self.train.steps == 0 || !(self.train.lr > 0.0) {
            return Err(Error::Config(format!("train needs steps > 0 and lr > 0, got {:?}", self.train)));
        }
        if let Some(c) = self.augment.crop {
            if c.iter().any(|&d| d == 0 || d % 16 != 0) {
                return Err(Error::Config(format!("augment.crop {c:?} must be positive multiples of 16")));
            }
        }
        if !(self.augment.noise_sigma >= 0.0) {
            return Err(Error::Config("augment.noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Losses and per-scale distillation diagnostics of one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub l_origin: f64,
    pub l_sd: f64,
    pub l_total: f64,
    /// Empty when the bridge is ablated.
    pub structural: Vec<f64>,
    pub distribution: Vec<f64>,
}

pub const STEP_CSV_HEADER: &str =
    "step,l_origin,l_sd,l_total,struct_1,struct_2,struct_3,struct_4,dist_1,dist_2,dist_3,dist_4";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let mut row = format!("{},{:e},{:e},{:e}", self.step, self.l_origin, self.l_sd, self.l_total);
        for series in [&self.structural, &self.distribution] {
            for k in 0..4 {
                row.push(',');
                if let Some(v) = series.get(k) {
                    write!(row, "{v:e}").expect("string write");
                }
            }
        }
        row
    }
}

/// Runs `cfg.train.steps` Adam steps over `cases`, one case per step.
/// Cases are visited in a fresh seeded permutation each pass.
pub fn train(
    model: &Model,
    cases: &[(Tensor, LabelVolume)],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord, &Model) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::Config("no training cases".into()));
    }
    let mut opt = Adam::new(
        named_params(model),
        AdamConfig {
            lr: cfg.train.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::with_capacity(cfg.train.steps);
    for step in 1..=cfg.train.steps {
        if order.is_empty() {
            order = (0..cases.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let (image, labels) = &cases[order.pop().expect("refilled")];
        let (x, y) = augment(image, labels, &cfg.augment, rng.next_u64())?;
        // Re-armed every step: `on_step` may evaluate the model.
        model.set_training(true);
        let rec = train_step(model, &mut opt, &x, &y, cfg, step)?;
        log::debug!("step {step}: total {:.6}", rec.l_total);
        on_step(&rec, model)?;
        records.push(rec);
    }
    model.set_training(false);
    Ok(records)
}

fn train_step(model: &Model, opt: &mut Adam, x: &Tensor, y: &LabelVolume, cfg: &TrainConfig, step: usize) -> Result<StepRecord> {
    opt.zero_grad();
    let out = model.forward(x)?;
    let origin = origin_loss(&out.logits, y, &cfg.loss)?;
    let (sd, structural, distribution) = if out.teacher_logits.is_empty() {
        (Tensor::scalar(0.0), Vec::new(), Vec::new())
    } else if cfg.loss.lambda2 == 0.0 {
        let d = no_grad(|| distill_loss(&out.teacher_logits, &out.student_logits, &cfg.distill))?;
        (Tensor::scalar(d.loss.item()), d.structural, d.distribution)
    } else {
        let d = distill_loss(&out.teacher_logits, &out.student_logits, &cfg.distill)?;
        (d.loss, d.structural, d.distribution)
    };
    let total = total_loss(&origin, &sd, &cfg.loss);
    total.check_finite(&format!("total loss at step {step}"))?;
    total.backward()?;
    opt.step()?;
    Ok(StepRecord {
        step,
        l_origin: origin.item(),
        l_sd: sd.item(),
        l_total: total.item(),
        structural,
        distribution,
    })
}

/// Voxel-wise argmax over the class axis of `[C, H, W, D]` logits.
pub fn predict_labels(logits: &Tensor) -> Result<LabelVolume> {
    let s = logits.shape();
    if s.len() != 4 || s[0] == 0 || s[0] > 256 {
        return Err(Error::Shape(format!("logits must be [C, H, W, D] with 1..=256 classes, got {s:?}")));
    }
    let v = s[1] * s[2] * s[3];
    let data = logits.data();
    let labels = (0..v)
        .map(|i| {
            let mut best = 0;
            for c in 1..s[0] {
                if data[c * v + i] > data[best * v + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume::new([s[1], s[2], s[3]], labels)
}

/// Prediction of a model in evaluation mode.
pub fn infer(model: &Model, image: &Tensor) -> Result<LabelVolume> {
    predict_labels(&infer_logits(model, image)?)
}

/// Tile origins along one axis: half-overlapping windows, the last one flush
/// with the end. An axis no longer than the window is covered by one tile.
fn tile_starts(len: usize, window: usize) -> Vec<usize> {
    if len <= window {
        return vec![0];
    }
    let stride = (window / 2).max(1);
    let mut starts: Vec<usize> = (0..=len - window).step_by(stride).collect();
    if *starts.last().expect("nonempty") != len - window {
        starts.push(len - window);
    }
    starts
}

/// Evaluation-mode logits. Volumes larger than `patch_size` along some axis
/// are processed in overlapping patches whose logits are averaged, so the
/// network always sees inputs the size it was trained on.
pub fn infer_logits(model: &Model, image: &Tensor) -> Result<Tensor> {
    model.set_training(false);
    let dims: [usize; 3] = match image.shape() {
        [_, h, w, d] => [*h, *w, *d],
        s => return Err(Error::Shape(format!("image must be [C, H, W, D], got {s:?}"))),
    };
    let p = model.config.patch_size;
    if dims.iter().all(|&n| n <= p) {
        return no_grad(|| Ok(model.forward(image)?.logits));
    }
    let window: [usize; 3] = std::array::from_fn(|i| dims[i].min(p));
    let starts: [Vec<usize>; 3] = std::array::from_fn(|i| tile_starts(dims[i], window[i]));
    let (c_in, n) = (image.shape()[0], dims.iter().product::<usize>());
    let classes = model.config.num_classes;
    let mut sum = vec![0.0; classes * n];
    let mut count = vec![0u32; n];
    let src = &image.to_vec();
    no_grad(|| -> Result<()> {
        for &x0 in &starts[0] {
            for &y0 in &starts[1] {
                for &z0 in &starts[2] {
                    let index = |x: usize, y: usize, z: usize| ((x0 + x) * dims[1] + y0 + y) * dims[2] + z0 + z;
                    let voxels: Vec<usize> = (0..window[0])
                        .flat_map(|x| (0..window[1]).flat_map(move |y| (0..window[2]).map(move |z| (x, y, z))))
                        .map(|(x, y, z)| index(x, y, z))
                        .collect();
                    let patch: Vec<f64> = (0..c_in).flat_map(|c| voxels.iter().map(move |&v| src[c * n + v])).collect();
                    let logits = model
                        .forward(&Tensor::from_vec(patch, &[c_in, window[0], window[1], window[2]]))?
                        .logits
                        .to_vec();
                    let m = voxels.len();
                    for (j, &v) in voxels.iter().enumerate() {
                        count[v] += 1;
                        for c in 0..classes {
                            sum[c * n + v] += logits[c * m + j];
                        }
                    }
                }
            }
        }
        Ok(())
    })?;
    for c in 0..classes {
        for v in 0..n {
            sum[c * n + v] /= count[v] as f64;
        }
    }
    Ok(Tensor::from_vec(sum, &[classes, dims[0], dims[1], dims[2]]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub case_id: String,
    pub class: String,
    pub dice: f64,
    /// `None` when either surface is empty.
    pub hd95: Option<f64>,
    pub iou: f64,
}

pub const EVAL_CSV_HEADER: &str = "case_id,class,dice,hd95,iou";

impl EvalRow {
    pub fn csv_row(&self) -> String {
        let hd = self.hd95.map(|h| format!("{h}")).unwrap_or_default();
        format!("{},{},{},{},{}", self.case_id, self.class, self.dice, hd, self.iou)
    }
}

/// Metrics of one prediction: one row per foreground label, then the union.
pub fn evaluate_case(case_id: &str, pred: &LabelVolume, truth: &LabelVolume, classes: usize) -> Result<Vec<EvalRow>> {
    let regions = (1..classes as u8).map(Region::Label).chain([Region::Foreground]);
    regions
        .map(|r| {
            let hd = match hd95(pred, truth, r) {
                Ok(h) => Some(h),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(EvalRow {
                case_id: case_id.to_string(),
                class: r.name(),
                dice: dice(pred, truth, r)?,
                hd95: hd,
                iou: iou(pred, truth, r)?,
            })
        })
        .collect()
}

/// Mean foreground Dice of the model over labelled cases.
pub fn mean_foreground_dice(model: &Model, cases: &[(Tensor, LabelVolume)]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::Config("no evaluation cases".into()));
    }
    let mut sum = 0.0;
    for (x, y) in cases {
        sum += dice(&infer(model, x)?, y, Region::Foreground)?;
    }
    Ok(sum / cases.len() as f64)
}

pub fn write_lines(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "model_final.kmck";

/// Trains into `out`: the resolved config, the per-step CSV, and checkpoints.
pub fn train_run(cases: &[(Tensor, LabelVolume)], cfg: &TrainConfig, out: &Path) -> Result<(Model, Vec<StepRecord>)> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let model = Model::new(&cfg.model)?;
    log::info!("training {} parameters for {} steps", model.param_count(), cfg.train.steps);
    let every = cfg.train.checkpoint_every;
    let records = train(&model, cases, cfg, |rec, m| {
        if every > 0 && rec.step % every == 0 && rec.step < cfg.train.steps {
            save_checkpoint(m, &out.join(format!("model_step{:06}.kmck", rec.step)))?;
        }
        if rec.step % 50 == 0 {
            log::info!("step {}: origin {:.4} sd {:.4} total {:.4}", rec.step, rec.l_origin, rec.l_sd, rec.l_total);
        }
        Ok(())
    })?;
    write_lines(&out.join(TRAIN_LOG_FILE), STEP_CSV_HEADER, records.iter().map(StepRecord::csv_row))?;
    save_checkpoint(&model, &out.join(FINAL_CHECKPOINT))?;
    Ok((model, records))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub hsa: bool,
    pub bkm: bool,
    pub mda: bool,
    pub params: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub val_dice: f64,
    pub seconds: f64,
}

pub const ABLATION_CSV_HEADER: &str = "hsa,bkm,mda,params,steps,final_loss,val_dice,seconds";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:e},{},{:.3}",
            self.hsa as u8, self.bkm as u8, self.mda as u8, self.params, self.steps, self.final_loss, self.val_dice, self.seconds
        )
    }
}

/// Trains every on/off combination of the toggled blocks from the same seed;
/// untoggled blocks keep their setting in `base`. Rows run from the plain
/// baseline to the full model.
pub fn ablation_grid(
    train_cases: &[(Tensor, LabelVolume)],
    val_cases: &[(Tensor, LabelVolume)],
    base: &TrainConfig,
    grid: [bool; 3],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for mask in 0..8u8 {
        let on = [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0];
        if (0..3).any(|i| !grid[i] && on[i]) {
            continue;
        }
        let mut cfg = base.clone();
        cfg.model.use_hsa = if grid[0] { on[0] } else { base.model.use_hsa };
        cfg.model.use_bkm = if grid[1] { on[1] } else { base.model.use_bkm };
        cfg.model.use_mda = if grid[2] { on[2] } else { base.model.use_mda };
        let start = Instant::now();
        let model = Model::new(&cfg.model)?;
        let records = train(&model, train_cases, &cfg, |_, _| Ok(()))?;
        let eval = if val_cases.is_empty() { train_cases } else { val_cases };
        let row = AblationRow {
            hsa: cfg.model.use_hsa,
            bkm: cfg.model.use_bkm,
            mda: cfg.model.use_mda,
            params: model.param_count(),
            steps: cfg.train.steps,
            final_loss: records.last().map_or(f64::NAN, |r| r.l_total),
            val_dice: mean_foreground_dice(&model, eval)?,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("ablation {}", row.csv_row());
        rows.push(row);
    }
    Ok(rows)
}

/// Small configuration for tests and desk runs on 16³ patches.
pub fn tiny_config(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            seed,
            ..ModelConfig::tiny()
        },
        train: TrainSettings {
            steps,
            seed,
            ..TrainSettings::default()
        },
        augment: AugmentConfig::none(),
        ..TrainConfig::default()
    }
}
