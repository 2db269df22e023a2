use super::Tensor;
use crate::error::{Error, Result};

/// Source taps `(i0, i1, w0, w1)` for each target index along one axis
/// (half-pixel centres, no corner alignment).
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i0 == i1 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

fn dims4(x: &Tensor, what: &str) -> Result<[usize; 4]> {
    match x.shape() {
        [c, h, w, d] => Ok([*c, *h, *w, *d]),
        s => Err(Error::Shape(format!("{what} expects [C, H, W, D], got {s:?}"))),
    }
}

/// Trilinear resampling of every channel to `target` spatial dims.
pub fn resample_trilinear(x: &Tensor, target: [usize; 3]) -> Result<Tensor> {
    let [c, h, w, d] = dims4(x, "resample_trilinear")?;
    if target.contains(&0) {
        return Err(Error::InvalidSpec(format!("zero target dimension in {target:?}")));
    }
    if target == [h, w, d] {
        return x.reshape(x.shape());
    }
    let (tx, ty, tz) = (
        axis_taps(h, target[0]),
        axis_taps(w, target[1]),
        axis_taps(d, target[2]),
    );
    let [oh, ow, od] = target;
    let (ispat, ospat) = (h * w * d, oh * ow * od);
    let src = x.data();
    let mut out = vec![0.0; c * ospat];
    for ch in 0..c {
        let xs = &src[ch * ispat..][..ispat];
        let os = &mut out[ch * ospat..][..ospat];
        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (oz, &(z0, z1, wz0, wz1)) in tz.iter().enumerate() {
                    let at = |i: usize, j: usize, k: usize| xs[(i * w + j) * d + k];
                    let v = wx0 * (wy0 * (wz0 * at(x0, y0, z0) + wz1 * at(x0, y0, z1))
                        + wy1 * (wz0 * at(x0, y1, z0) + wz1 * at(x0, y1, z1)))
                        + wx1
                            * (wy0 * (wz0 * at(x1, y0, z0) + wz1 * at(x1, y0, z1))
                                + wy1 * (wz0 * at(x1, y1, z0) + wz1 * at(x1, y1, z1)));
                    os[(ox * ow + oy) * od + oz] = v;
                }
            }
        }
    }
    drop(src);
    Ok(Tensor::from_op(
        out,
        vec![c, oh, ow, od],
        vec![x.clone()],
        "resample_trilinear",
        move |g| {
            let mut gx = vec![0.0; c * ispat];
            for ch in 0..c {
                let gs = &g[ch * ospat..][..ospat];
                let gi = &mut gx[ch * ispat..][..ispat];
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (oz, &(z0, z1, wz0, wz1)) in tz.iter().enumerate() {
                            let gv = gs[(ox * ow + oy) * od + oz];
                            for (i, wi) in [(x0, wx0), (x1, wx1)] {
                                for (j, wj) in [(y0, wy0), (y1, wy1)] {
                                    for (k, wk) in [(z0, wz0), (z1, wz1)] {
                                        gi[(i * w + j) * d + k] += gv * wi * wj * wk;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        },
    ))
}

/// Non-overlapping average pooling with cubic window `k` (stride `k`).
pub fn avg_pool3d(x: &Tensor, k: usize) -> Result<Tensor> {
    let [c, h, w, d] = dims4(x, "avg_pool3d")?;
    if k == 0 || h % k != 0 || w % k != 0 || d % k != 0 {
        return Err(Error::InvalidSpec(format!(
            "pool window {k} must divide spatial dims {:?}",
            [h, w, d]
        )));
    }
    if k == 1 {
        return x.reshape(x.shape());
    }
    let (oh, ow, od) = (h / k, w / k, d / k);
    let norm = 1.0 / (k * k * k) as f64;
    let src = x.data();
    let mut out = vec![0.0; c * oh * ow * od];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                for l in 0..d {
                    out[((ch * oh + i / k) * ow + j / k) * od + l / k] +=
                        src[((ch * h + i) * w + j) * d + l] * norm;
                }
            }
        }
    }
    drop(src);
    Ok(Tensor::from_op(
        out,
        vec![c, oh, ow, od],
        vec![x.clone()],
        "avg_pool3d",
        move |g| {
            let mut gx = vec![0.0; c * h * w * d];
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        for l in 0..d {
                            gx[((ch * h + i) * w + j) * d + l] =
                                g[((ch * oh + i / k) * ow + j / k) * od + l / k] * norm;
                        }
                    }
                }
            }
            vec![Some(gx)]
        },
    ))
}
