use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

/// Geometry of a 3D convolution over a channels-first `[C, H, W, D]` volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    pub fn pointwise() -> Self {
        Self::cubic(1, 1, 0)
    }

    /// Cubic kernel `k` with the given stride and symmetric padding.
    pub fn cubic(k: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            kernel: [k; 3],
            stride: [stride; 3],
            padding: [padding; 3],
            dilation: [1; 3],
            groups: 1,
        }
    }

    /// Odd cubic kernel, stride 1, padded so spatial size is preserved.
    pub fn same(k: usize) -> Self {
        Self::cubic(k, 1, k / 2)
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if self.kernel[a] == 0 || self.stride[a] == 0 || self.dilation[a] == 0 {
                return Err(Error::InvalidSpec(format!("zero kernel/stride/dilation in {self:?}")));
            }
            let span = self.dilation[a] * (self.kernel[a] - 1) + 1;
            let padded = input[a] + 2 * self.padding[a];
            if padded < span {
                return Err(Error::InvalidSpec(format!(
                    "axis {a}: padded input {padded} smaller than kernel span {span}"
                )));
            }
            out[a] = (padded - span) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Spatial size produced by the transposed convolution with this spec.
    pub fn transposed_output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = self.dilation[a] * (self.kernel[a] - 1) + 1;
            let full = (input[a] - 1) * self.stride[a] + span;
            if full <= 2 * self.padding[a] {
                return Err(Error::InvalidSpec(format!(
                    "axis {a}: transposed output would be empty"
                )));
            }
            out[a] = full - 2 * self.padding[a];
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    cin: usize,
    cout: usize,
    groups: usize,
    idims: [usize; 3],
    odims: [usize; 3],
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
    d: [usize; 3],
}

/// Output indices `o` along one axis for which `o*s + koff - p` lands inside the input.
fn valid_range(o_len: usize, i_len: usize, koff: usize, s: usize, p: usize) -> (usize, usize) {
    let lo_num = p as i64 - koff as i64;
    let lo = if lo_num <= 0 {
        0
    } else {
        ((lo_num + s as i64 - 1) / s as i64) as usize
    };
    let hi_num = i_len as i64 - 1 + p as i64 - koff as i64;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = o_len.min((hi_num / s as i64) as usize + 1);
    (lo, hi.max(lo))
}

// Work below this many multiply-adds stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

fn for_each_chunk<F>(buf: &mut [f64], chunk: usize, parallel: bool, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if parallel {
        buf.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        buf.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

impl Geom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn kvol(&self) -> usize {
        self.k.iter().product()
    }
    fn ispat(&self) -> usize {
        self.idims.iter().product()
    }
    fn ospat(&self) -> usize {
        self.odims.iter().product()
    }
    fn work(&self) -> usize {
        self.cout * self.cin_g() * self.kvol() * self.ospat()
    }

    /// Calls `f(kflat, ranges, kz_in_offset)` for every kernel tap with a non-empty footprint.
    fn taps(&self, mut f: impl FnMut(usize, [usize; 3], [(usize, usize); 3])) {
        for kx in 0..self.k[0] {
            let rx = valid_range(self.odims[0], self.idims[0], kx * self.d[0], self.s[0], self.p[0]);
            if rx.0 >= rx.1 {
                continue;
            }
            for ky in 0..self.k[1] {
                let ry =
                    valid_range(self.odims[1], self.idims[1], ky * self.d[1], self.s[1], self.p[1]);
                if ry.0 >= ry.1 {
                    continue;
                }
                for kz in 0..self.k[2] {
                    let rz = valid_range(
                        self.odims[2],
                        self.idims[2],
                        kz * self.d[2],
                        self.s[2],
                        self.p[2],
                    );
                    if rz.0 >= rz.1 {
                        continue;
                    }
                    let kflat = (kx * self.k[1] + ky) * self.k[2] + kz;
                    f(kflat, [kx, ky, kz], [rx, ry, rz]);
                }
            }
        }
    }

    /// Input coordinate hit by output `o` through tap `k` on axis `a`.
    #[inline]
    fn src(&self, a: usize, o: usize, k: usize) -> usize {
        o * self.s[a] + k * self.d[a] - self.p[a]
    }

    fn forward(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (ospat, ispat) = (self.ospat(), self.ispat());
        let (cin_g, cout_g, kvol) = (self.cin_g(), self.cout_g(), self.kvol());
        let [_, o1, o2] = self.odims;
        let [_, i1, i2] = self.idims;
        let mut out = vec![0.0; self.cout * ospat];
        for_each_chunk(&mut out, ospat, self.work() > PAR_THRESHOLD, |oc, out_c| {
            let g = oc / cout_g;
            for icl in 0..cin_g {
                let xin = &x[(g * cin_g + icl) * ispat..][..ispat];
                let wbase = (oc * cin_g + icl) * kvol;
                self.taps(|kf, k, [rx, ry, rz]| {
                    let wv = w[wbase + kf];
                    if wv == 0.0 {
                        return;
                    }
                    for ox in rx.0..rx.1 {
                        let ix = self.src(0, ox, k[0]);
                        for oy in ry.0..ry.1 {
                            let iy = self.src(1, oy, k[1]);
                            let orow = &mut out_c[(ox * o1 + oy) * o2..][..o2];
                            let irow = &xin[(ix * i1 + iy) * i2..][..i2];
                            if self.s[2] == 1 {
                                let iz0 = self.src(2, rz.0, k[2]);
                                orow[rz.0..rz.1]
                                    .iter_mut()
                                    .zip(&irow[iz0..])
                                    .for_each(|(o, &v)| *o += wv * v);
                            } else {
                                for oz in rz.0..rz.1 {
                                    orow[oz] += wv * irow[self.src(2, oz, k[2])];
                                }
                            }
                        }
                    }
                });
            }
        });
        out
    }

    fn backward_input(&self, gout: &[f64], w: &[f64]) -> Vec<f64> {
        let (ospat, ispat) = (self.ospat(), self.ispat());
        let (cin_g, cout_g, kvol) = (self.cin_g(), self.cout_g(), self.kvol());
        let [_, o1, o2] = self.odims;
        let [_, i1, i2] = self.idims;
        let mut gin = vec![0.0; self.cin * ispat];
        for_each_chunk(&mut gin, ispat, self.work() > PAR_THRESHOLD, |ic, gin_c| {
            let (g, icl) = (ic / cin_g, ic % cin_g);
            for ocl in 0..cout_g {
                let oc = g * cout_g + ocl;
                let go = &gout[oc * ospat..][..ospat];
                let wbase = (oc * cin_g + icl) * kvol;
                self.taps(|kf, k, [rx, ry, rz]| {
                    let wv = w[wbase + kf];
                    if wv == 0.0 {
                        return;
                    }
                    for ox in rx.0..rx.1 {
                        let ix = self.src(0, ox, k[0]);
                        for oy in ry.0..ry.1 {
                            let iy = self.src(1, oy, k[1]);
                            let orow = &go[(ox * o1 + oy) * o2..][..o2];
                            let irow = &mut gin_c[(ix * i1 + iy) * i2..][..i2];
                            if self.s[2] == 1 {
                                let iz0 = self.src(2, rz.0, k[2]);
                                irow[iz0..]
                                    .iter_mut()
                                    .zip(&orow[rz.0..rz.1])
                                    .for_each(|(i, &v)| *i += wv * v);
                            } else {
                                for oz in rz.0..rz.1 {
                                    irow[self.src(2, oz, k[2])] += wv * orow[oz];
                                }
                            }
                        }
                    }
                });
            }
        });
        gin
    }

    fn backward_weight(&self, gout: &[f64], x: &[f64]) -> Vec<f64> {
        let (ospat, ispat) = (self.ospat(), self.ispat());
        let (cin_g, cout_g, kvol) = (self.cin_g(), self.cout_g(), self.kvol());
        let [_, o1, o2] = self.odims;
        let [_, i1, i2] = self.idims;
        let mut gw = vec![0.0; self.cout * cin_g * kvol];
        for_each_chunk(&mut gw, cin_g * kvol, self.work() > PAR_THRESHOLD, |oc, gw_c| {
            let g = oc / cout_g;
            let go = &gout[oc * ospat..][..ospat];
            for icl in 0..cin_g {
                let xin = &x[(g * cin_g + icl) * ispat..][..ispat];
                self.taps(|kf, k, [rx, ry, rz]| {
                    let mut acc = 0.0;
                    for ox in rx.0..rx.1 {
                        let ix = self.src(0, ox, k[0]);
                        for oy in ry.0..ry.1 {
                            let iy = self.src(1, oy, k[1]);
                            let orow = &go[(ox * o1 + oy) * o2..][..o2];
                            let irow = &xin[(ix * i1 + iy) * i2..][..i2];
                            if self.s[2] == 1 {
                                let iz0 = self.src(2, rz.0, k[2]);
                                acc += orow[rz.0..rz.1]
                                    .iter()
                                    .zip(&irow[iz0..])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                for oz in rz.0..rz.1 {
                                    acc += orow[oz] * irow[self.src(2, oz, k[2])];
                                }
                            }
                        }
                    }
                    gw_c[icl * kvol + kf] += acc;
                });
            }
        });
        gw
    }
}

fn spatial(t: &Tensor, what: &str) -> Result<[usize; 3]> {
    match t.shape() {
        [_, h, w, d] => Ok([*h, *w, *d]),
        s => Err(Error::Shape(format!("{what} must be [C, H, W, D], got {s:?}"))),
    }
}

fn check_kernel(weight: &Tensor, spec: &ConvSpec) -> Result<()> {
    let ws = weight.shape();
    if ws.len() != 5 {
        return Err(Error::Shape(format!("conv weight must be rank 5, got {ws:?}")));
    }
    if ws[2..] != spec.kernel {
        return Err(Error::Shape(format!(
            "weight kernel {:?} disagrees with spec kernel {:?}",
            &ws[2..],
            spec.kernel
        )));
    }
    if spec.groups == 0 {
        return Err(Error::InvalidSpec("groups must be positive".into()));
    }
    Ok(())
}

/// Direct 3D convolution. `weight` is `[C_out, C_in / groups, kh, kw, kd]`.
pub fn conv3d(input: &Tensor, weight: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let idims = spatial(input, "conv3d input")?;
    check_kernel(weight, spec)?;
    let cin = input.shape()[0];
    let ws = weight.shape();
    let (cout, cin_g) = (ws[0], ws[1]);
    if cin % spec.groups != 0 || cout % spec.groups != 0 {
        return Err(Error::Shape(format!(
            "groups {} must divide C_in {cin} and C_out {cout}",
            spec.groups
        )));
    }
    if cin_g * spec.groups != cin {
        return Err(Error::Shape(format!(
            "weight expects {} input channels per group, input has {cin} channels over {} groups",
            cin_g, spec.groups
        )));
    }
    let odims = spec.output_dims(idims)?;
    let geom = Geom {
        cin,
        cout,
        groups: spec.groups,
        idims,
        odims,
        k: spec.kernel,
        s: spec.stride,
        p: spec.padding,
        d: spec.dilation,
    };
    let out = geom.forward(&input.data(), &weight.data());
    let (x, w) = (input.clone(), weight.clone());
    Ok(Tensor::from_op(
        out,
        vec![cout, odims[0], odims[1], odims[2]],
        vec![input.clone(), weight.clone()],
        "conv3d",
        move |g| {
            let gx = x.requires_grad().then(|| geom.backward_input(g, &w.data()));
            let gw = w.requires_grad().then(|| geom.backward_weight(g, &x.data()));
            vec![gx, gw]
        },
    ))
}

/// Transposed 3D convolution (the adjoint of [`conv3d`] with the same spec).
/// `weight` is `[C_in, C_out, kh, kw, kd]`; only `groups == 1` is supported.
pub fn conv_transpose3d(input: &Tensor, weight: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let idims = spatial(input, "conv_transpose3d input")?;
    check_kernel(weight, spec)?;
    if spec.groups != 1 {
        return Err(Error::InvalidSpec("transposed convolution supports groups = 1 only".into()));
    }
    let ws = weight.shape();
    let cin = input.shape()[0];
    if ws[0] != cin {
        return Err(Error::Shape(format!(
            "transposed weight expects {} input channels, got {cin}",
            ws[0]
        )));
    }
    let cout = ws[1];
    let odims = spec.transposed_output_dims(idims)?;
    // The equivalent forward convolution maps the (larger) output space back
    // onto the input space.
    let geom = Geom {
        cin: cout,
        cout: cin,
        groups: 1,
        idims: odims,
        odims: idims,
        k: spec.kernel,
        s: spec.stride,
        p: spec.padding,
        d: spec.dilation,
    };
    if geom_forward_dims(&geom)? != idims {
        return Err(Error::InvalidSpec(format!(
            "transposed geometry does not invert: {idims:?} -> {odims:?}"
        )));
    }
    let out = geom.backward_input(&input.data(), &weight.data());
    let (x, w) = (input.clone(), weight.clone());
    Ok(Tensor::from_op(
        out,
        vec![cout, odims[0], odims[1], odims[2]],
        vec![input.clone(), weight.clone()],
        "conv_transpose3d",
        move |g| {
            let gx = x.requires_grad().then(|| geom.forward(g, &w.data()));
            let gw = w.requires_grad().then(|| geom.backward_weight(&x.data(), g));
            vec![gx, gw]
        },
    ))
}

fn geom_forward_dims(g: &Geom) -> Result<[usize; 3]> {
    ConvSpec {
        kernel: g.k,
        stride: g.s,
        padding: g.p,
        dilation: g.d,
        groups: 1,
    }
    .output_dims(g.idims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape)
    }

    /// Seven nested loops over (oc, ox, oy, oz, ic, kx, ky, kz) with explicit bounds checks.
    fn naive_conv(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Vec<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let (cin, cout, cin_g) = (xs[0], ws[0], ws[1]);
        let cout_g = cout / spec.groups;
        let od = spec.output_dims([xs[1], xs[2], xs[3]]).unwrap();
        let (xd, wd) = (x.data(), w.data());
        let mut out = vec![0.0; cout * od.iter().product::<usize>()];
        for oc in 0..cout {
            let g = oc / cout_g;
            for ox in 0..od[0] {
                for oy in 0..od[1] {
                    for oz in 0..od[2] {
                        let mut acc = 0.0;
                        for icl in 0..cin_g {
                            let ic = g * cin_g + icl;
                            assert!(ic < cin);
                            for kx in 0..spec.kernel[0] {
                                for ky in 0..spec.kernel[1] {
                                    for kz in 0..spec.kernel[2] {
                                        let ix = (ox * spec.stride[0] + kx * spec.dilation[0]) as i64
                                            - spec.padding[0] as i64;
                                        let iy = (oy * spec.stride[1] + ky * spec.dilation[1]) as i64
                                            - spec.padding[1] as i64;
                                        let iz = (oz * spec.stride[2] + kz * spec.dilation[2]) as i64
                                            - spec.padding[2] as i64;
                                        if ix < 0
                                            || iy < 0
                                            || iz < 0
                                            || ix >= xs[1] as i64
                                            || iy >= xs[2] as i64
                                            || iz >= xs[3] as i64
                                        {
                                            continue;
                                        }
                                        let xi = ((ic * xs[1] + ix as usize) * xs[2] + iy as usize)
                                            * xs[3]
                                            + iz as usize;
                                        let wi = (((oc * cin_g + icl) * spec.kernel[0] + kx)
                                            * spec.kernel[1]
                                            + ky)
                                            * spec.kernel[2]
                                            + kz;
                                        acc += xd[xi] * wd[wi];
                                    }
                                }
                            }
                        }
                        out[((oc * od[0] + ox) * od[1] + oy) * od[2] + oz] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn pointwise_scaling() {
        let x = Tensor::ones(&[1, 2, 2, 2]);
        let w = Tensor::full(&[1, 1, 1, 1, 1], 2.0);
        let y = conv3d(&x, &w, &ConvSpec::pointwise()).unwrap();
        assert_eq!(y.to_vec(), vec![2.0; 8]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 4, 5, 3], &mut rng);
        let mut w = vec![0.0; 27];
        w[13] = 1.0;
        let w = Tensor::from_vec(w, &[1, 1, 3, 3, 3]);
        let y = conv3d(&x, &w, &ConvSpec::same(3)).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn depthwise_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 4, 4, 4], &mut rng);
        let w = random(&[2, 1, 3, 3, 3], &mut rng);
        let spec = ConvSpec::same(3).with_groups(2);
        let y = conv3d(&x, &w, &spec).unwrap().to_vec();
        let r = naive_conv(&x, &w, &spec);
        for (a, b) in y.iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_dilated_grouped_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[4, 7, 6, 9], &mut rng);
        let w = random(&[6, 2, 3, 2, 3], &mut rng);
        let spec = ConvSpec {
            kernel: [3, 2, 3],
            stride: [2, 1, 3],
            padding: [1, 0, 2],
            dilation: [1, 2, 2],
            groups: 2,
        };
        let y = conv3d(&x, &w, &spec).unwrap().to_vec();
        let r = naive_conv(&x, &w, &spec);
        assert_eq!(y.len(), r.len());
        for (a, b) in y.iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn depthwise_delta_kernels_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 2, 3, 4], &mut rng);
        let w = Tensor::ones(&[3, 1, 1, 1, 1]);
        let y = conv3d(&x, &w, &ConvSpec::pointwise().with_groups(3)).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn errors_are_descriptive() {
        let x = Tensor::ones(&[3, 2, 2, 2]);
        let w = Tensor::ones(&[2, 2, 1, 1, 1]);
        assert!(matches!(conv3d(&x, &w, &ConvSpec::pointwise()), Err(Error::Shape(_))));
        let w = Tensor::ones(&[1, 3, 5, 5, 5]);
        assert!(matches!(
            conv3d(&x, &w, &ConvSpec::cubic(5, 1, 0)),
            Err(Error::InvalidSpec(_))
        ));
        let x4 = Tensor::ones(&[4, 2, 2, 2]);
        let w = Tensor::ones(&[3, 2, 1, 1, 1]);
        assert!(conv3d(&x4, &w, &ConvSpec::pointwise().with_groups(2)).is_err());
    }

    #[test]
    fn transposed_is_adjoint() {
        // <conv(x), y> == <x, conv_t(y)>
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ConvSpec::cubic(2, 2, 0);
        let x = random(&[3, 8, 6, 4], &mut rng);
        let w = random(&[5, 3, 2, 2, 2], &mut rng);
        let y = random(&[5, 4, 3, 2], &mut rng);
        let cx = conv3d(&x, &w, &spec).unwrap().to_vec();
        let lhs: f64 = cx.iter().zip(y.data().iter()).map(|(a, b)| a * b).sum();
        let ty = conv_transpose3d(&y, &w, &spec).unwrap();
        assert_eq!(ty.shape(), &[3, 8, 6, 4]);
        let rhs: f64 = ty.data().iter().zip(x.data().iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
