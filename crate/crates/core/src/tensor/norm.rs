use super::Tensor;
use crate::error::{Error, Result};

/// Normalises each contiguous row of length `len` to zero mean and unit variance.
/// Returns the result plus per-row mean and biased variance.
fn normalize_rows(x: &Tensor, len: usize, eps: f64, name: &'static str) -> (Tensor, Vec<f64>, Vec<f64>) {
    let rows = x.numel() / len;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let mut means = Vec::with_capacity(rows);
    let mut vars = Vec::with_capacity(rows);
    let mut inv_std = Vec::with_capacity(rows);
    for (row, orow) in src.chunks(len).zip(out.chunks_mut(len)) {
        let mean = row.iter().sum::<f64>() / len as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        let is = 1.0 / (var + eps).sqrt();
        for (o, v) in orow.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        means.push(mean);
        vars.push(var);
        inv_std.push(is);
    }
    drop(src);
    let xhat = out.clone();
    let y = Tensor::from_op(out, x.shape().to_vec(), vec![x.clone()], name, move |g| {
        let mut gx = vec![0.0; g.len()];
        let n = len as f64;
        for (r, ((grow, xrow), gxrow)) in g
            .chunks(len)
            .zip(xhat.chunks(len))
            .zip(gx.chunks_mut(len))
            .enumerate()
        {
            let gm = grow.iter().sum::<f64>() / n;
            let gxm = grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / n;
            for ((o, gv), xv) in gxrow.iter_mut().zip(grow).zip(xrow) {
                *o = inv_std[r] * (gv - gm - xv * gxm);
            }
        }
        vec![Some(gx)]
    });
    (y, means, vars)
}

/// Per-channel normalisation over all spatial positions of a `[C, ...]` tensor.
/// Returns the normalised tensor plus the batch mean and (biased) variance per channel.
pub fn batch_norm_normalize(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    if x.rank() < 2 {
        return Err(Error::Shape(format!("batch norm needs [C, ...], got {:?}", x.shape())));
    }
    let v = x.numel() / x.shape()[0];
    Ok(normalize_rows(x, v, eps, "batch_norm"))
}

/// Normalisation over the trailing axis of a `[N, C]` tensor (one run per row).
pub fn layer_norm_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    let &[_, c] = x.shape() else {
        return Err(Error::Shape(format!("layer norm expects [N, C], got {:?}", x.shape())));
    };
    Ok(normalize_rows(x, c, eps, "layer_norm").0)
}
