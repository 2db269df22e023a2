//! Synthetic phantoms, augmentation, and the on-disk volume container.
//!
//! A `.vvol` file is a short text header followed by a little-endian payload:
//!
//! ```text
//! VVOL1
//! dims H W D
//! spacing sx sy sz
//! dtype f32|u8
//! modalities M
//! end
//! <M·H·W·D values, modality-major, row-major within a modality>
//! ```

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const WHOLE: u8 = 1;
pub const CORE: u8 = 2;
pub const ENHANCING: u8 = 3;

/// Mean intensity of (background, whole, core, enhancing) per modality.
const CONTRAST: [[f64; 4]; 4] = [
    [0.20, 0.35, 0.50, 0.90],
    [0.25, 0.45, 0.30, 1.00],
    [0.30, 0.85, 0.70, 0.55],
    [0.20, 0.90, 0.60, 0.45],
];

#[derive(Clone, Debug)]
pub struct Phantom {
    /// `[modalities, S, S, S]`
    pub image: Tensor,
    pub labels: LabelVolume,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Four-modality phantom with nested whole ⊇ core ⊇ enhancing regions.
pub fn generate_phantom(seed: u64, size: usize, noise_sigma: f64) -> Result<Phantom> {
    generate_phantom_with(seed, size, 4, noise_sigma)
}

pub fn generate_phantom_with(seed: u64, size: usize, modalities: usize, noise_sigma: f64) -> Result<Phantom> {
    if size < 16 || modalities == 0 || !(noise_sigma >= 0.0) {
        return Err(Error::Config(format!(
            "phantom needs size >= 16, modalities >= 1, sigma >= 0; got {size}, {modalities}, {noise_sigma}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let whole = Ellipsoid {
        center: std::array::from_fn(|_| s / 2.0 + rng.random_range(-s / 8.0..s / 8.0)),
        radii: std::array::from_fn(|_| s * rng.random_range(0.14..0.22)),
    };
    let core = Ellipsoid {
        center: std::array::from_fn(|i| whole.center[i] + whole.radii[i] * rng.random_range(-0.15..0.15)),
        radii: std::array::from_fn(|i| whole.radii[i] * rng.random_range(0.45..0.6)),
    };
    let r_enh = core.radii.iter().cloned().fold(f64::INFINITY, f64::min) * rng.random_range(0.4..0.55);
    let enhancing = Ellipsoid {
        center: std::array::from_fn(|i| core.center[i] + core.radii[i] * rng.random_range(-0.2..0.2)),
        radii: [r_enh; 3],
    };
    let phase: Vec<[f64; 3]> = (0..modalities)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();

    let n = size * size * size;
    let mut labels = vec![BACKGROUND; n];
    for x in 0..size {
        for y in 0..size {
            for z in 0..size {
                let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                // nesting by intersection: each region lies inside its parent
                let l = if !whole.contains(p) {
                    BACKGROUND
                } else if !core.contains(p) {
                    WHOLE
                } else if !enhancing.contains(p) {
                    CORE
                } else {
                    ENHANCING
                };
                labels[(x * size + y) * size + z] = l;
            }
        }
    }
    let noise = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut image = vec![0.0; modalities * n];
    for m in 0..modalities {
        let profile = CONTRAST[m % 4];
        let ph = phase[m];
        for (i, &l) in labels.iter().enumerate() {
            let (x, y, z) = (i / (size * size), (i / size) % size, i % size);
            let k = std::f64::consts::TAU / s;
            let shading = 0.04
                * ((k * x as f64 + ph[0]).sin() + (k * y as f64 + ph[1]).sin() + (k * z as f64 + ph[2]).sin());
            let eps = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            image[m * n + i] = profile[l as usize] + shading + eps;
        }
    }
    Ok(Phantom {
        image: Tensor::from_vec(image, &[modalities, size, size, size]),
        labels: LabelVolume::new([size; 3], labels)?,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Flip each axis with probability 1/2.
    pub flip: bool,
    /// Random crop to this size; `None` keeps the full volume.
    pub crop: Option<[usize; 3]>,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip: true,
            crop: None,
            noise_sigma: 0.02,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flip: false,
            crop: None,
            noise_sigma: 0.0,
        }
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, [usize; 3])> {
    match image.shape() {
        [c, h, w, d] => Ok((*c, [*h, *w, *d])),
        s => Err(Error::Shape(format!("image must be [C, H, W, D], got {s:?}"))),
    }
}

/// Mirrors image and labels along the flagged axes.
pub fn flip(image: &Tensor, labels: &LabelVolume, axes: [bool; 3]) -> Result<(Tensor, LabelVolume)> {
    let (c, dims) = image_dims(image)?;
    if dims != labels.dims {
        return Err(Error::Shape(format!("image {dims:?} vs labels {:?}", labels.dims)));
    }
    let [h, w, d] = dims;
    let n = h * w * d;
    let src = |x: usize, y: usize, z: usize| {
        let x = if axes[0] { h - 1 - x } else { x };
        let y = if axes[1] { w - 1 - y } else { y };
        let z = if axes[2] { d - 1 - z } else { z };
        (x * w + y) * d + z
    };
    let map: Vec<usize> = (0..n).map(|i| src(i / (w * d), (i / d) % w, i % d)).collect();
    let img = image.data();
    let out: Vec<f64> = (0..c).flat_map(|ch| map.iter().map(move |&j| (ch, j))).map(|(ch, j)| img[ch * n + j]).collect();
    let lab: Vec<u8> = map.iter().map(|&j| labels.labels[j]).collect();
    Ok((
        Tensor::from_vec(out, image.shape()),
        LabelVolume::new(dims, lab)?.with_spacing(labels.spacing),
    ))
}

/// Sub-volume of size `size` starting at `origin`.
pub fn crop(image: &Tensor, labels: &LabelVolume, origin: [usize; 3], size: [usize; 3]) -> Result<(Tensor, LabelVolume)> {
    let (c, dims) = image_dims(image)?;
    if (0..3).any(|i| size[i] == 0 || origin[i] + size[i] > dims[i]) || dims != labels.dims {
        return Err(Error::InvalidSpec(format!(
            "crop {size:?} at {origin:?} does not fit {dims:?}"
        )));
    }
    let [_, w, d] = dims;
    let n = dims.iter().product::<usize>();
    let idx: Vec<usize> = (0..size[0])
        .flat_map(|x| (0..size[1]).flat_map(move |y| (0..size[2]).map(move |z| (x, y, z))))
        .map(|(x, y, z)| ((x + origin[0]) * w + y + origin[1]) * d + z + origin[2])
        .collect();
    let img = image.data();
    let out: Vec<f64> = (0..c).flat_map(|ch| idx.iter().map(move |&j| ch * n + j)).map(|j| img[j]).collect();
    let lab: Vec<u8> = idx.iter().map(|&j| labels.labels[j]).collect();
    Ok((
        Tensor::from_vec(out, &[c, size[0], size[1], size[2]]),
        LabelVolume::new(size, lab)?.with_spacing(labels.spacing),
    ))
}

/// Random flip, random crop and Gaussian intensity noise, all drawn from `seed`.
pub fn augment(image: &Tensor, labels: &LabelVolume, cfg: &AugmentConfig, seed: u64) -> Result<(Tensor, LabelVolume)> {
    let (_, dims) = image_dims(image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axes: [bool; 3] = std::array::from_fn(|_| cfg.flip && rng.random_bool(0.5));
    let (mut img, mut lab) = flip(image, labels, axes)?;
    if let Some(size) = cfg.crop {
        if (0..3).any(|i| size[i] == 0 || size[i] > dims[i]) {
            return Err(Error::InvalidSpec(format!("crop {size:?} larger than {dims:?}")));
        }
        let origin = std::array::from_fn(|i| rng.random_range(0..=dims[i] - size[i]));
        (img, lab) = crop(&img, &lab, origin, size)?;
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        img.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    Ok((img, lab))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::U8 => "u8",
        })
    }
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub modalities: usize,
    pub data: VolumeData,
}

pub const VOLUME_MAGIC: &str = "VVOL1";

impl Volume {
    pub fn dtype(&self) -> Dtype {
        match self.data {
            VolumeData::F32(_) => Dtype::F32,
            VolumeData::U8(_) => Dtype::U8,
        }
    }

    fn expected_len(&self) -> usize {
        self.modalities * self.dims.iter().product::<usize>()
    }

    /// Intensities stored in single precision.
    pub fn from_image(image: &Tensor, spacing: [f64; 3]) -> Result<Self> {
        let (c, dims) = image_dims(image)?;
        Ok(Volume {
            dims,
            spacing,
            modalities: c,
            data: VolumeData::F32(image.data().iter().map(|&v| v as f32).collect()),
        })
    }

    pub fn from_labels(labels: &LabelVolume) -> Self {
        Volume {
            dims: labels.dims,
            spacing: labels.spacing,
            modalities: 1,
            data: VolumeData::U8(labels.labels.clone()),
        }
    }

    pub fn to_image(&self) -> Result<Tensor> {
        match &self.data {
            VolumeData::F32(v) => {
                let [h, w, d] = self.dims;
                Ok(Tensor::from_vec(v.iter().map(|&x| x as f64).collect(), &[self.modalities, h, w, d]))
            }
            VolumeData::U8(_) => Err(Error::DtypeMismatch {
                expected: "f32".into(),
                found: "u8".into(),
            }),
        }
    }

    pub fn to_labels(&self) -> Result<LabelVolume> {
        match &self.data {
            VolumeData::U8(v) if self.modalities == 1 => Ok(LabelVolume::new(self.dims, v.clone())?.with_spacing(self.spacing)),
            VolumeData::U8(_) => Err(Error::Header(format!("label volume with {} modalities", self.modalities))),
            VolumeData::F32(_) => Err(Error::DtypeMismatch {
                expected: "u8".into(),
                found: "f32".into(),
            }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let [h, w, d] = self.dims;
        let [sx, sy, sz] = self.spacing;
        let mut out = format!(
            "{VOLUME_MAGIC}\ndims {h} {w} {d}\nspacing {sx:?} {sy:?} {sz:?}\ndtype {}\nmodalities {}\nend\n",
            self.dtype(),
            self.modalities
        )
        .into_bytes();
        match &self.data {
            VolumeData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            VolumeData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut line = |what: &str| -> Result<String> {
            let rest = &bytes[pos.min(bytes.len())..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Header(format!("missing {what} line")))?;
            pos += end + 1;
            String::from_utf8(rest[..end].to_vec()).map_err(|_| Error::Header(format!("{what} line is not text")))
        };
        let magic = line("magic").map_err(|_| Error::BadMagic {
            expected: VOLUME_MAGIC.into(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned(),
        })?;
        if magic != VOLUME_MAGIC {
            return Err(Error::BadMagic {
                expected: VOLUME_MAGIC.into(),
                found: magic,
            });
        }
        fn fields<'a>(l: &'a str, key: &str, n: usize) -> Result<Vec<&'a str>> {
            let mut it = l.split_whitespace();
            if it.next() != Some(key) {
                return Err(Error::Header(format!("expected '{key}' line, got {l:?}")));
            }
            let v: Vec<&str> = it.collect();
            if v.len() != n {
                return Err(Error::Header(format!("'{key}' needs {n} values, got {l:?}")));
            }
            Ok(v)
        }
        let parse_err = |l: &str| Error::Header(format!("unparsable value in {l:?}"));
        let l = line("dims")?;
        let dims_v = fields(&l, "dims", 3)?
            .iter()
            .map(|s| s.parse::<usize>().map_err(|_| parse_err(&l)))
            .collect::<Result<Vec<_>>>()?;
        let l = line("spacing")?;
        let spacing_v = fields(&l, "spacing", 3)?
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| parse_err(&l)))
            .collect::<Result<Vec<_>>>()?;
        let l = line("dtype")?;
        let dtype = match fields(&l, "dtype", 1)?[0] {
            "f32" => Dtype::F32,
            "u8" => Dtype::U8,
            other => return Err(Error::Header(format!("unknown dtype {other}"))),
        };
        let l = line("modalities")?;
        let modalities = fields(&l, "modalities", 1)?[0].parse::<usize>().map_err(|_| parse_err(&l))?;
        if line("end")? != "end" {
            return Err(Error::Header("missing 'end' line".into()));
        }
        let dims = [dims_v[0], dims_v[1], dims_v[2]];
        if dims.contains(&0) || modalities == 0 {
            return Err(Error::Header(format!("empty volume dims {dims:?} x {modalities}")));
        }
        let count = modalities * dims.iter().product::<usize>();
        let payload = &bytes[pos..];
        let expected = count * dtype.size();
        if payload.len() != expected {
            return Err(Error::Truncated {
                expected,
                found: payload.len(),
            });
        }
        let data = match dtype {
            Dtype::F32 => VolumeData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            Dtype::U8 => VolumeData::U8(payload.to_vec()),
        };
        let v = Volume {
            dims,
            spacing: [spacing_v[0], spacing_v[1], spacing_v[2]],
            modalities,
            data,
        };
        debug_assert_eq!(v.expected_len(), count);
        Ok(v)
    }
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&v.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    Volume::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Reads a volume and requires the given payload type.
pub fn read_volume_as(path: &Path, dtype: Dtype) -> Result<Volume> {
    let v = read_volume(path)?;
    if v.dtype() != dtype {
        return Err(Error::DtypeMismatch {
            expected: dtype.to_string(),
            found: v.dtype().to_string(),
        });
    }
    Ok(v)
}

/// Binary greyscale (P5) image of slice `z` of one modality, min–max scaled.
pub fn pgm_slice(v: &Volume, modality: usize, z: usize) -> Result<Vec<u8>> {
    let [h, w, d] = v.dims;
    if modality >= v.modalities || z >= d {
        return Err(Error::InvalidSpec(format!("slice {z} of modality {modality} out of range")));
    }
    let n = h * w * d;
    let vals: Vec<f64> = (0..h * w)
        .map(|i| {
            let j = modality * n + i * d + z;
            match &v.data {
                VolumeData::F32(x) => x[j] as f64,
                VolumeData::U8(x) => x[j] as f64,
            }
        })
        .collect();
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(vals.iter().map(|&x| ((x - lo) * scale).round() as u8));
    Ok(out)
}

pub fn write_pgm_slice(path: &Path, v: &Volume, modality: usize, z: usize) -> Result<()> {
    std::fs::write(path, pgm_slice(v, modality, z)?).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Header(format!("unknown split {other:?}"))),
        }
    }
}

/// One case: files `<path>_image.vvol` and `<path>_label.vvol` relative to the
/// dataset directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub split: Split,
    pub seed: u64,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

impl ManifestEntry {
    pub fn image_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}_image.vvol", self.path))
    }

    pub fn label_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}_label.vvol", self.path))
    }
}

/// Tab-separated `path  split  seed`, one case per line.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text: String = entries
        .iter()
        .map(|e| format!("{}\t{}\t{}\n", e.path, e.split, e.seed))
        .collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::Header(format!("manifest line {}: expected 3 fields", i + 1)));
            }
            Ok(ManifestEntry {
                path: f[0].to_string(),
                split: f[1].parse()?,
                seed: f[2]
                    .parse()
                    .map_err(|_| Error::Header(format!("manifest line {}: bad seed", i + 1)))?,
            })
        })
        .collect()
}

/// Writes `n` phantoms and the manifest into `dir`; every fifth case is
/// held out for validation.
pub fn generate_dataset(dir: &Path, n: usize, size: usize, seed: u64, noise_sigma: f64) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let case_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let p = generate_phantom(case_seed, size, noise_sigma)?;
        let entry = ManifestEntry {
            path: format!("case_{i:04}"),
            split: if i % 5 == 4 { Split::Val } else { Split::Train },
            seed: case_seed,
        };
        write_volume(&entry.image_path(dir), &Volume::from_image(&p.image, [1.0; 3])?)?;
        write_volume(&entry.label_path(dir), &Volume::from_labels(&p.labels))?;
        entries.push(entry);
    }
    write_manifest(&dir.join(MANIFEST_FILE), &entries)?;
    Ok(entries)
}

pub fn load_case(dir: &Path, entry: &ManifestEntry) -> Result<(Tensor, LabelVolume)> {
    let image = read_volume_as(&entry.image_path(dir), Dtype::F32)?.to_image()?;
    let labels = read_volume_as(&entry.label_path(dir), Dtype::U8)?.to_labels()?;
    if image.shape()[1..] != labels.dims {
        return Err(Error::Shape(format!(
            "case {}: image {:?} vs labels {:?}",
            entry.path,
            image.shape(),
            labels.dims
        )));
    }
    Ok((image, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_deterministic() {
        let a = generate_phantom(5, 16, 0.0).unwrap();
        let b = generate_phantom(5, 16, 0.0).unwrap();
        assert_eq!(a.image.to_vec(), b.image.to_vec());
        assert_eq!(a.labels, b.labels);
        let c = generate_phantom(5, 16, 0.1).unwrap();
        let d = generate_phantom(5, 16, 0.1).unwrap();
        assert_eq!(c.image.to_vec(), d.image.to_vec());
        assert!(generate_phantom(0, 15, 0.0).is_err());
    }

    #[test]
    fn nesting_and_foreground_fraction() {
        for seed in 0..100 {
            let p = generate_phantom(seed, 24, 0.05).unwrap();
            let fg = p.labels.labels.iter().filter(|&&l| l > 0).count() as f64 / p.labels.len() as f64;
            assert!((0.005..=0.2).contains(&fg), "seed {seed}: {fg}");
            assert!(p.labels.labels.iter().any(|&l| l == CORE || l == ENHANCING));
        }
    }

    #[test]
    fn modalities_differ() {
        let p = generate_phantom(1, 16, 0.0).unwrap();
        let v = p.image.to_vec();
        let n = 4096;
        for m in 1..4 {
            assert_ne!(v[..n], v[m * n..(m + 1) * n]);
        }
    }

    #[test]
    fn flip_is_involution_and_identity_augment() {
        let p = generate_phantom(2, 16, 0.1).unwrap();
        let (a, la) = flip(&p.image, &p.labels, [true, false, true]).unwrap();
        let (b, lb) = flip(&a, &la, [true, false, true]).unwrap();
        assert_eq!(b.to_vec(), p.image.to_vec());
        assert_eq!(lb, p.labels);
        let (c, lc) = augment(&p.image, &p.labels, &AugmentConfig::none(), 9).unwrap();
        assert_eq!(c.to_vec(), p.image.to_vec());
        assert_eq!(lc, p.labels);
    }

    #[test]
    fn augment_preserves_histogram_on_full_crop() {
        let p = generate_phantom(3, 16, 0.0).unwrap();
        let cfg = AugmentConfig {
            flip: true,
            crop: Some([16, 16, 16]),
            noise_sigma: 0.1,
        };
        let hist = |l: &LabelVolume| {
            let mut h = [0usize; 4];
            l.labels.iter().for_each(|&x| h[x as usize] += 1);
            h
        };
        for seed in 0..8 {
            let (_, l) = augment(&p.image, &p.labels, &cfg, seed).unwrap();
            assert_eq!(hist(&l), hist(&p.labels));
        }
        let small = AugmentConfig {
            crop: Some([8, 12, 16]),
            ..cfg
        };
        let (img, l) = augment(&p.image, &p.labels, &small, 1).unwrap();
        assert_eq!(img.shape(), &[4, 8, 12, 16]);
        assert_eq!(l.dims, [8, 12, 16]);
        let too_big = AugmentConfig {
            crop: Some([17, 16, 16]),
            ..cfg
        };
        assert!(augment(&p.image, &p.labels, &too_big, 1).is_err());
    }

    #[test]
    fn volume_round_trip_and_errors() {
        let p = generate_phantom(4, 16, 0.1).unwrap();
        let v = Volume::from_image(&p.image, [1.0, 0.5, 2.25]).unwrap();
        assert_eq!(Volume::from_bytes(&v.to_bytes()).unwrap(), v);
        let l = Volume::from_labels(&p.labels);
        assert_eq!(Volume::from_bytes(&l.to_bytes()).unwrap().to_labels().unwrap(), p.labels);

        let mut bad = v.to_bytes();
        bad[0] = b'X';
        assert!(matches!(Volume::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let short = &l.to_bytes()[..l.to_bytes().len() - 1];
        assert!(matches!(Volume::from_bytes(short), Err(Error::Truncated { .. })));
        assert!(matches!(l.to_image(), Err(Error::DtypeMismatch { .. })));
    }

    #[test]
    fn label_payload_size() {
        let l = LabelVolume::new([64; 3], vec![0; 262144]).unwrap();
        let bytes = Volume::from_labels(&l).to_bytes();
        let header = bytes.iter().position(|_| false).unwrap_or(0);
        let text_len = bytes.len() - 262144;
        assert!(std::str::from_utf8(&bytes[header..text_len]).unwrap().ends_with("end\n"));
    }

    #[test]
    fn pgm_header() {
        let p = generate_phantom(6, 16, 0.0).unwrap();
        let img = pgm_slice(&Volume::from_image(&p.image, [1.0; 3]).unwrap(), 0, 8).unwrap();
        assert!(img.starts_with(b"P5\n16 16\n255\n"));
        assert_eq!(img.len(), 13 + 256);
    }
}
