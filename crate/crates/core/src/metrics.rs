//! Overlap and boundary-distance scores on label volumes.

use crate::error::{Error, Result};

/// A grid of small integer labels, row-major over `(H, W, D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub labels: Vec<u8>,
    pub spacing: [f64; 3],
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        if dims.contains(&0) || labels.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} labels for dims {dims:?}",
                labels.len()
            )));
        }
        Ok(LabelVolume {
            dims,
            labels,
            spacing: [1.0; 3],
        })
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Errors if any label is `>= classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= classes) {
            Some(&l) => Err(Error::LabelOutOfRange { label: l as usize, classes }),
            None => Ok(()),
        }
    }

    pub fn mask(&self, region: Region) -> Vec<bool> {
        self.labels.iter().map(|&l| region.contains(l)).collect()
    }
}

/// Which labels count as "inside" when scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    /// Exactly this label.
    Label(u8),
    /// Every nonzero label.
    Foreground,
}

impl Region {
    pub fn contains(self, label: u8) -> bool {
        match self {
            Region::Label(c) => label == c,
            Region::Foreground => label != 0,
        }
    }

    pub fn name(self) -> String {
        match self {
            Region::Label(c) => c.to_string(),
            Region::Foreground => "fg".to_string(),
        }
    }
}

fn masks(a: &LabelVolume, b: &LabelVolume, region: Region) -> Result<(Vec<bool>, Vec<bool>)> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!("volumes {:?} vs {:?}", a.dims, b.dims)));
    }
    Ok((a.mask(region), b.mask(region)))
}

fn counts(a: &[bool], b: &[bool]) -> (usize, usize, usize) {
    let mut n = (0, 0, 0);
    for (&x, &y) in a.iter().zip(b) {
        n.0 += x as usize;
        n.1 += y as usize;
        n.2 += (x && y) as usize;
    }
    n
}

/// `2|A∩B| / (|A| + |B|)`, 1 when both are empty.
pub fn dice_mask(a: &[bool], b: &[bool]) -> f64 {
    let (na, nb, i) = counts(a, b);
    if na + nb == 0 {
        1.0
    } else {
        2.0 * i as f64 / (na + nb) as f64
    }
}

/// `|A∩B| / |A∪B|`, 1 when both are empty.
pub fn iou_mask(a: &[bool], b: &[bool]) -> f64 {
    let (na, nb, i) = counts(a, b);
    let u = na + nb - i;
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

pub fn dice(a: &LabelVolume, b: &LabelVolume, region: Region) -> Result<f64> {
    let (ma, mb) = masks(a, b, region)?;
    Ok(dice_mask(&ma, &mb))
}

pub fn iou(a: &LabelVolume, b: &LabelVolume, region: Region) -> Result<f64> {
    let (ma, mb) = masks(a, b, region)?;
    Ok(iou_mask(&ma, &mb))
}

/// Mask voxels with a 6-neighbour outside the mask or on the volume border.
pub fn surface(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [h, w, d] = dims;
    let at = |x: usize, y: usize, z: usize| mask[(x * w + y) * d + z];
    let mut out = vec![false; mask.len()];
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                if !at(x, y, z) {
                    continue;
                }
                let border = x == 0 || y == 0 || z == 0 || x + 1 == h || y + 1 == w || z + 1 == d;
                out[(x * w + y) * d + z] = border
                    || !at(x - 1, y, z)
                    || !at(x + 1, y, z)
                    || !at(x, y - 1, z)
                    || !at(x, y + 1, z)
                    || !at(x, y, z - 1)
                    || !at(x, y, z + 1);
            }
        }
    }
    out
}

fn coords(i: usize, dims: [usize; 3]) -> [usize; 3] {
    [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]]
}

/// Squared physical distance with a fixed summation order shared by both
/// distance paths, so that they agree bit for bit.
fn sq_dist(da: f64, db: f64, dc: f64, spacing: [f64; 3]) -> f64 {
    let (a, b, c) = (da * spacing[0], db * spacing[1], dc * spacing[2]);
    c * c + (b * b + a * a)
}

/// Volumes with at most this many voxels use the all-pairs path.
pub const BRUTE_FORCE_LIMIT: usize = 24 * 24 * 24;

/// Directed distances from each surface voxel of `from` to the nearest
/// surface voxel of `to`, by exhaustive search.
fn directed_brute(from: &[bool], to: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let targets: Vec<[usize; 3]> = (0..to.len()).filter(|&i| to[i]).map(|i| coords(i, dims)).collect();
    (0..from.len())
        .filter(|&i| from[i])
        .map(|i| {
            let p = coords(i, dims);
            targets
                .iter()
                .map(|q| {
                    let d = |k: usize| p[k] as f64 - q[k] as f64;
                    sq_dist(d(0), d(1), d(2), spacing)
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Exact squared distance to the nearest `true` voxel, by separable minimisation
/// along each axis in turn (`O(N·n)` for an `n`-wide grid).
fn distance_field(to: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [h, w, d] = dims;
    let mut f: Vec<f64> = to.iter().map(|&t| if t { 0.0 } else { f64::INFINITY }).collect();
    let axes = [(h, w * d), (w, d), (d, 1)];
    let mut line = Vec::new();
    for (axis, &(n, stride)) in axes.iter().enumerate() {
        let s = spacing[axis];
        for start in 0..f.len() {
            // the first element of every line along this axis
            if (start / stride) % n != 0 {
                continue;
            }
            line.clear();
            line.extend((0..n).map(|k| f[start + k * stride]));
            for q in 0..n {
                let mut best = f64::INFINITY;
                for (p, &g) in line.iter().enumerate() {
                    if g.is_finite() {
                        let a = (q as f64 - p as f64) * s;
                        best = best.min(a * a + g);
                    }
                }
                f[start + q * stride] = best;
            }
        }
    }
    f
}

fn directed_fast(from: &[bool], to: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let field = distance_field(to, dims, spacing);
    (0..from.len()).filter(|&i| from[i]).map(|i| field[i].sqrt()).collect()
}

/// Nearest-rank 95th percentile: the `ceil(0.95 n)`-th smallest value.
pub fn percentile95(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = (95 * values.len()).div_ceil(100);
    values[rank.max(1) - 1]
}

fn hd95_with(a: &LabelVolume, b: &LabelVolume, region: Region, brute: bool) -> Result<f64> {
    let (ma, mb) = masks(a, b, region)?;
    let (sa, sb) = (surface(&ma, a.dims), surface(&mb, b.dims));
    if !sa.contains(&true) || !sb.contains(&true) {
        return Err(Error::UndefinedMetric(format!(
            "HD95 of region {} with an empty set",
            region.name()
        )));
    }
    let f = if brute { directed_brute } else { directed_fast };
    let mut pooled = f(&sa, &sb, a.dims, a.spacing);
    pooled.extend(f(&sb, &sa, a.dims, a.spacing));
    Ok(percentile95(pooled))
}

/// Symmetric 95th-percentile surface distance, in spacing units.
pub fn hd95(a: &LabelVolume, b: &LabelVolume, region: Region) -> Result<f64> {
    hd95_with(a, b, region, a.len() <= BRUTE_FORCE_LIMIT)
}

/// All-pairs reference path, at any size.
pub fn hd95_brute_force(a: &LabelVolume, b: &LabelVolume, region: Region) -> Result<f64> {
    hd95_with(a, b, region, true)
}

/// Distance-field path, at any size.
pub fn hd95_distance_transform(a: &LabelVolume, b: &LabelVolume, region: Region) -> Result<f64> {
    hd95_with(a, b, region, false)
}
