//! The full encoder / bridge / decoder segmentation network and its
//! checkpoint container.
//!
//! Encoder level 1 runs at input resolution; every further level halves the
//! grid with a stride-2 convolution. High-resolution levels use HSA blocks,
//! the deepest levels BKM blocks. The MDA bridge refines levels 1–4 before they
//! feed the decoder skips.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bkm::{BkmBlock, BkmConfig};
use crate::error::{Error, Result};
use crate::hsa::{HsaBlock, HsaConfig};
use crate::mda::{MdaConfig, MdaModule, ScaleFeatureSet};
use crate::nn::{self, join, BatchNorm3d, Conv3d, ConvTranspose3d, Module};
use crate::tensor::{ConvSpec, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub stage_channels: [usize; 5],
    /// 1-based levels that use BKM blocks; the rest use HSA blocks.
    pub bkm_stages: Vec<usize>,
    pub kan_hidden: usize,
    pub d_state: usize,
    pub hsa_expand: usize,
    pub patch_size: usize,
    pub use_hsa: bool,
    pub use_bkm: bool,
    pub use_mda: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 4,
            num_classes: 4,
            stage_channels: [8, 16, 32, 64, 128],
            bkm_stages: vec![4, 5],
            kan_hidden: 64,
            d_state: 16,
            hsa_expand: 2,
            patch_size: 64,
            use_hsa: true,
            use_bkm: true,
            use_mda: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Widths 4, 8, 16, 32, 64 on 16³ patches.
    pub fn tiny() -> Self {
        ModelConfig {
            stage_channels: [4, 8, 16, 32, 64],
            patch_size: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.stage_channels;
        if c[0] == 0 || c.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("stage_channels {c:?} must be positive and strictly increasing")));
        }
        if self.patch_size == 0 || self.patch_size % 16 != 0 {
            return Err(Error::Config(format!("patch_size {} is not a multiple of 16", self.patch_size)));
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need in_channels >= 1 and num_classes >= 2, got {} / {}",
                self.in_channels, self.num_classes
            )));
        }
        if self.bkm_stages.iter().any(|&s| !(1..=5).contains(&s)) {
            return Err(Error::Config(format!("bkm_stages {:?} outside 1..=5", self.bkm_stages)));
        }
        if self.kan_hidden == 0 || self.d_state == 0 || self.hsa_expand == 0 {
            return Err(Error::Config("kan_hidden, d_state and hsa_expand must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One encoder level's feature block.
#[derive(Debug)]
pub enum StageBlock {
    Hsa(HsaBlock),
    Bkm(BkmBlock),
    /// Stand-in when a block family is ablated: `ReLU(conv3(x) + b)`.
    Plain(Conv3d),
}

impl StageBlock {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            StageBlock::Hsa(b) => b.forward(x),
            StageBlock::Bkm(b) => b.forward(x),
            StageBlock::Plain(c) => Ok(c.forward(x)?.relu()),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            StageBlock::Hsa(_) => "hsa",
            StageBlock::Bkm(_) => "bkm",
            StageBlock::Plain(_) => "plain",
        }
    }

    fn module(&self) -> &dyn Module {
        match self {
            StageBlock::Hsa(b) => b,
            StageBlock::Bkm(b) => b,
            StageBlock::Plain(c) => c,
        }
    }
}

/// `ReLU(BN(conv3(x)))`
#[derive(Debug)]
pub struct ConvBnRelu {
    pub conv: Conv3d,
    pub bn: BatchNorm3d,
}

impl ConvBnRelu {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBnRelu {
            conv: Conv3d::new(cin, cout, ConvSpec::same(3), false, rng),
            bn: BatchNorm3d::new(cout),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?)?.relu())
    }
}

impl Module for ConvBnRelu {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.bn.visit_buffers(&join(prefix, "bn"), f);
    }

    fn set_training(&self, training: bool) {
        self.bn.set_training(training);
    }
}

#[derive(Debug)]
pub struct DecoderLevel {
    pub up: ConvTranspose3d,
    pub block1: ConvBnRelu,
    pub block2: ConvBnRelu,
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub stem: Conv3d,
    /// Stride-2 convolutions entering levels 2..=5.
    pub downsample: Vec<Conv3d>,
    pub blocks: Vec<StageBlock>,
    pub mda: Option<MdaModule>,
    /// Decoder levels 4, 3, 2, 1 (deepest first).
    pub decoder: Vec<DecoderLevel>,
    pub head: Conv3d,
}

#[derive(Debug)]
pub struct ModelOutput {
    /// `[classes, S, S, S]`
    pub logits: Tensor,
    /// Per-level logits from the raw encoder maps (empty without the bridge).
    pub teacher_logits: Vec<Tensor>,
    /// Per-level logits from the refined maps (empty without the bridge).
    pub student_logits: Vec<Tensor>,
    pub scales: ScaleFeatureSet,
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let ch = config.stage_channels;
        let stem = Conv3d::new(config.in_channels, ch[0], ConvSpec::same(3), true, &mut rng);
        let downsample = (1..5)
            .map(|k| Conv3d::new(ch[k - 1], ch[k], ConvSpec::cubic(2, 2, 0), true, &mut rng))
            .collect();
        let mut blocks = Vec::with_capacity(5);
        for (k, &c) in ch.iter().enumerate() {
            let bkm = config.bkm_stages.contains(&(k + 1));
            let block = match (bkm, config.use_bkm, config.use_hsa) {
                (true, true, _) => {
                    let cfg = BkmConfig {
                        d_state: config.d_state,
                        kan_hidden: config.kan_hidden,
                        ..BkmConfig::new(c)
                    };
                    StageBlock::Bkm(BkmBlock::new(&cfg, &mut rng)?)
                }
                (false, _, true) => {
                    let cfg = HsaConfig {
                        channels: c,
                        expand: config.hsa_expand,
                    };
                    StageBlock::Hsa(HsaBlock::new(&cfg, &mut rng)?)
                }
                _ => StageBlock::Plain(Conv3d::new(c, c, ConvSpec::same(3), true, &mut rng)),
            };
            blocks.push(block);
        }
        let mda = if config.use_mda {
            Some(MdaModule::new(&MdaConfig::new(ch, config.num_classes), &mut rng)?)
        } else {
            None
        };
        let decoder = (0..4)
            .rev()
            .map(|k| DecoderLevel {
                up: ConvTranspose3d::new(ch[k + 1], ch[k], ConvSpec::cubic(2, 2, 0), &mut rng),
                block1: ConvBnRelu::new(2 * ch[k], ch[k], &mut rng),
                block2: ConvBnRelu::new(ch[k], ch[k], &mut rng),
            })
            .collect();
        let head = Conv3d::pointwise(ch[0], config.num_classes, true, &mut rng);
        Ok(Model {
            config: config.clone(),
            stem,
            downsample,
            blocks,
            mda,
            decoder,
            head,
        })
    }

    /// Encoder maps `X^(1..5)`.
    pub fn encode(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let s = x.shape();
        if s.len() != 4 || s[0] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model expects [{}, S, S, S], got {s:?}",
                self.config.in_channels
            )));
        }
        if s[1..].iter().any(|&d| d == 0 || d % 16 != 0) {
            return Err(Error::Shape(format!("spatial dims {:?} must be multiples of 16", &s[1..])));
        }
        let mut feats = Vec::with_capacity(5);
        let mut h = self.blocks[0].forward(&self.stem.forward(x)?.relu())?;
        feats.push(h.clone());
        for k in 1..5 {
            h = self.blocks[k].forward(&self.downsample[k - 1].forward(&h)?.relu())?;
            feats.push(h.clone());
        }
        Ok(feats)
    }

    pub fn forward(&self, x: &Tensor) -> Result<ModelOutput> {
        let mut scales = ScaleFeatureSet::new(self.encode(x)?)?;
        let (teacher_logits, student_logits) = match &self.mda {
            Some(m) => {
                m.forward(&mut scales)?;
                m.head_logits(&scales)?
            }
            None => (Vec::new(), Vec::new()),
        };
        let skips: Vec<Tensor> = if scales.refined.is_empty() {
            scales.levels()[..4].to_vec()
        } else {
            scales.refined.clone()
        };
        let mut h = scales.level(5).clone();
        for (level, k) in self.decoder.iter().zip((0..4).rev()) {
            let up = level.up.forward(&h)?;
            let merged = Tensor::cat(&[&up, &skips[k]])?;
            h = level.block2.forward(&level.block1.forward(&merged)?)?;
        }
        let logits = self.head.forward(&h)?;
        logits.check_finite("model logits")?;
        Ok(ModelOutput {
            logits,
            teacher_logits,
            student_logits,
            scales,
        })
    }

    pub fn param_count(&self) -> usize {
        nn::param_count(self)
    }
}

impl Module for Model {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        for (k, d) in self.downsample.iter().enumerate() {
            d.visit_params(&join(prefix, &format!("down{}", k + 2)), f);
        }
        for (k, b) in self.blocks.iter().enumerate() {
            b.module().visit_params(&join(prefix, &format!("stage{}.{}", k + 1, b.kind())), f);
        }
        if let Some(m) = &self.mda {
            m.visit_params(&join(prefix, "mda"), f);
        }
        for (level, k) in self.decoder.iter().zip((1..5).rev()) {
            let p = join(prefix, &format!("dec{k}"));
            level.up.visit_params(&join(&p, "up"), f);
            level.block1.visit_params(&join(&p, "block1"), f);
            level.block2.visit_params(&join(&p, "block2"), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (k, b) in self.blocks.iter().enumerate() {
            b.module().visit_buffers(&join(prefix, &format!("stage{}.{}", k + 1, b.kind())), f);
        }
        for (level, k) in self.decoder.iter().zip((1..5).rev()) {
            let p = join(prefix, &format!("dec{k}"));
            level.block1.visit_buffers(&join(&p, "block1"), f);
            level.block2.visit_buffers(&join(&p, "block2"), f);
        }
    }

    fn set_training(&self, training: bool) {
        for b in &self.blocks {
            b.module().set_training(training);
        }
        for level in &self.decoder {
            level.block1.set_training(training);
            level.block2.set_training(training);
        }
    }
}

/// Number of learnable scalars of the network described by `cfg`.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(Model::new(cfg)?.param_count())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"KMCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes the model config and every parameter and buffer tensor.
///
/// Layout (little-endian): magic `KMCK`, u32 version, u32 config length, config
/// TOML, u32 tensor count, then per tensor: u32 name length, name, u32 rank,
/// u64 per dim, f64 per element.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = model.config.to_toml();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    let mut tensors = nn::named_params(model);
    tensors.extend(nn::named_buffers(model));
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Truncated {
            expected: self.pos.saturating_add(n),
            found: self.buf.len(),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Header(e.to_string()))
    }
}

/// Rebuilds the model from its stored config and restores every tensor.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| Error::BadMagic {
        expected: "KMCK".into(),
        found: String::from_utf8_lossy(&bytes).into_owned(),
    })?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: "KMCK".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Header(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    let cfg = ModelConfig::from_toml(&r.string(n)?)?;
    let model = Model::new(&cfg)?;
    let mut slots = nn::named_params(&model);
    slots.extend(nn::named_buffers(&model));
    let count = r.u32()? as usize;
    if count != slots.len() {
        return Err(Error::Header(format!("{count} tensors stored, model has {}", slots.len())));
    }
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = r.string(n)?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let (_, t) = slots
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Header(format!("unknown tensor {name}")))?;
        if t.shape() != shape.as_slice() || !seen.insert(name.clone()) {
            return Err(Error::Header(format!(
                "tensor {name}: stored shape {shape:?}, model shape {:?}",
                t.shape()
            )));
        }
        let raw = r.take(t.numel() * 8)?;
        let mut data = t.data_mut();
        for (v, chunk) in data.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Header(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fill_params;

    fn tiny_input(seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec((0..4 * 4096).map(|_| rng.random_range(-1.0..1.0)).collect(), &[4, 16, 16, 16])
    }

    fn tiny3() -> ModelConfig {
        ModelConfig {
            num_classes: 3,
            kan_hidden: 8,
            d_state: 4,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn shape_trace() {
        let model = Model::new(&tiny3()).unwrap();
        let out = model.forward(&tiny_input(0)).unwrap();
        assert_eq!(out.logits.shape(), &[3, 16, 16, 16]);
        let sizes: Vec<usize> = out.student_logits.iter().map(|t| t.shape()[1]).collect();
        assert_eq!(sizes, vec![16, 8, 4, 2]);
        assert_eq!(out.teacher_logits[3].shape(), &[3, 2, 2, 2]);
        assert_eq!(out.scales.level(5).shape(), &[64, 1, 1, 1]);
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let model = Model::new(&tiny3()).unwrap();
        fill_params(&model.head, 0.0);
        let p = model.forward(&Tensor::zeros(&[4, 16, 16, 16])).unwrap().logits.softmax_channels();
        assert!(p.to_vec().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn deterministic_for_seed() {
        let a = Model::new(&tiny3()).unwrap().forward(&tiny_input(1)).unwrap().logits.to_vec();
        let b = Model::new(&tiny3()).unwrap().forward(&tiny_input(1)).unwrap().logits.to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_inputs_and_configs() {
        let model = Model::new(&tiny3()).unwrap();
        assert!(model.forward(&Tensor::zeros(&[4, 8, 8, 8])).is_err());
        assert!(model.forward(&Tensor::zeros(&[3, 16, 16, 16])).is_err());
        let bad = ModelConfig {
            patch_size: 24,
            ..tiny3()
        };
        assert!(Model::new(&bad).is_err());
        let bad = ModelConfig {
            stage_channels: [4, 4, 8, 16, 32],
            ..tiny3()
        };
        assert!(Model::new(&bad).is_err());
    }

    #[test]
    fn ablations_build_expected_blocks() {
        for (hsa, bkm, mda) in [(false, false, false), (true, false, true), (false, true, false)] {
            let cfg = ModelConfig {
                use_hsa: hsa,
                use_bkm: bkm,
                use_mda: mda,
                ..tiny3()
            };
            let m = Model::new(&cfg).unwrap();
            let kinds: Vec<_> = m.blocks.iter().map(|b| b.kind()).collect();
            let lo = if hsa { "hsa" } else { "plain" };
            let hi = if bkm { "bkm" } else { "plain" };
            assert_eq!(kinds, vec![lo, lo, lo, hi, hi]);
            assert_eq!(m.mda.is_some(), mda);
            let out = m.forward(&tiny_input(2)).unwrap();
            assert_eq!(out.student_logits.len(), if mda { 4 } else { 0 });
        }
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = tiny3();
        assert_eq!(ModelConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(ModelConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.kmck");
        let model = Model::new(&tiny3()).unwrap();
        // perturb running statistics so buffers are exercised too
        model.set_training(true);
        let x = tiny_input(4);
        model.forward(&x).unwrap();
        model.set_training(false);
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        let a: Vec<_> = nn::named_params(&model).into_iter().chain(nn::named_buffers(&model)).collect();
        let b: Vec<_> = nn::named_params(&loaded).into_iter().chain(nn::named_buffers(&loaded)).collect();
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec(), "{na}");
        }
        loaded.set_training(false);
        let ya = crate::no_grad(|| model.forward(&x).unwrap().logits.to_vec());
        let yb = crate::no_grad(|| loaded.forward(&x).unwrap().logits.to_vec());
        assert_eq!(ya, yb);

        let bytes = std::fs::read(&path).unwrap();
        let bad = dir.path().join("bad.kmck");
        std::fs::write(&bad, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(&bad).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        std::fs::write(&bad, &wrong).unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
