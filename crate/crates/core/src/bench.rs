//! Runtime scaling of the linear scan against a quadratic attention reference.

use std::hint::black_box;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bkm::{BkmBlock, BkmConfig};
use crate::error::{Error, Result};
use crate::ssm::{scan_chunked, Direction, SsmParameters};
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchKind {
    /// Chunked state-space scan over a `[T, 4]` sequence.
    Scan,
    /// Single-head softmax attention over `[T, 8]` queries, keys and values.
    Attention,
    /// Full BKM block forward over a volume of `T` voxels.
    Bkm,
}

impl FromStr for BenchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scan" => Ok(BenchKind::Scan),
            "attention" => Ok(BenchKind::Attention),
            "bkm" => Ok(BenchKind::Bkm),
            other => Err(Error::Config(format!("unknown bench kind {other:?} (scan, attention, bkm)"))),
        }
    }
}

impl BenchKind {
    pub fn name(self) -> &'static str {
        match self {
            BenchKind::Scan => "scan",
            BenchKind::Attention => "attention",
            BenchKind::Bkm => "bkm",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BenchSettings {
    /// Timed samples per size.
    pub samples: usize,
    /// Each sample repeats the workload until it spans at least this long.
    pub min_sample: Duration,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            samples: 7,
            min_sample: Duration::from_millis(5),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub t: usize,
    pub mean_ns: f64,
    pub std_ns: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub kind: BenchKind,
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of `ln mean_ns` against `ln T`.
    pub slope: f64,
}

pub const BENCH_CSV_HEADER: &str = "T,mean_ns,std_ns,slope_fit";

impl BenchReport {
    pub fn csv_lines(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| format!("{},{:.1},{:.1},{:.4}", r.t, r.mean_ns, r.std_ns, self.slope))
            .collect()
    }
}

/// Parses `"1024,2048"` or exponent ranges such as `"2^10..2^18"`.
pub fn parse_sizes(spec: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("cannot parse sizes {spec:?}"));
    let pow = |s: &str| -> Result<u32> { s.trim().strip_prefix("2^").ok_or_else(bad)?.parse().map_err(|_| bad()) };
    let sizes: Vec<usize> = if let Some((a, b)) = spec.split_once("..") {
        let (a, b) = (pow(a)?, pow(b)?);
        if a > b || b > 40 {
            return Err(bad());
        }
        (a..=b).map(|e| 1usize << e).collect()
    } else {
        spec.split(',')
            .map(|s| {
                let s = s.trim();
                if s.starts_with("2^") {
                    pow(s).map(|e| 1usize << e)
                } else {
                    s.parse().map_err(|_| bad())
                }
            })
            .collect::<Result<_>>()?
    };
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::Config(format!("need at least two positive sizes, got {spec:?}")));
    }
    Ok(sizes)
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Softmax attention computed pair by pair; the quadratic reference.
pub fn reference_attention(q: &[f64], k: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    let t = q.len() / d;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; t * d];
    let mut scores = vec![0.0; t];
    for i in 0..t {
        let qi = &q[i * d..][..d];
        let mut max = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            *s = qi.iter().zip(&k[j * d..][..d]).map(|(a, b)| a * b).sum::<f64>() * scale;
            max = max.max(*s);
        }
        let oi = &mut out[i * d..][..d];
        let mut z = 0.0;
        for (j, s) in scores.iter().enumerate() {
            let w = (s - max).exp();
            z += w;
            for (o, vj) in oi.iter_mut().zip(&v[j * d..][..d]) {
                *o += w * vj;
            }
        }
        oi.iter_mut().for_each(|o| *o /= z);
    }
    out
}

/// Volume dims whose product is `t` (a power of two), as close to cubic as possible.
fn volume_dims(t: usize) -> Result<[usize; 3]> {
    if !t.is_power_of_two() {
        return Err(Error::Config(format!("bkm bench sizes must be powers of two, got {t}")));
    }
    let e = t.trailing_zeros() as usize;
    Ok([1 << e.div_ceil(3), 1 << (e - e.div_ceil(3)).div_ceil(2), 1 << (e - e.div_ceil(3) - (e - e.div_ceil(3)).div_ceil(2))])
}

fn time_workload(settings: &BenchSettings, mut f: impl FnMut()) -> (f64, f64) {
    f();
    let start = Instant::now();
    f();
    let once = start.elapsed().max(Duration::from_nanos(1));
    let reps = (settings.min_sample.as_nanos() / once.as_nanos()).max(1) as u32;
    let samples: Vec<f64> = (0..settings.samples)
        .map(|_| {
            let start = Instant::now();
            for _ in 0..reps {
                f();
            }
            start.elapsed().as_nanos() as f64 / reps as f64
        })
        .collect();
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

pub fn run_bench(kind: BenchKind, sizes: &[usize], settings: &BenchSettings) -> Result<BenchReport> {
    if sizes.len() < 2 || settings.samples == 0 {
        return Err(Error::Config("bench needs at least two sizes and one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut rows = Vec::with_capacity(sizes.len());
    for &t in sizes {
        let (mean_ns, std_ns) = match kind {
            BenchKind::Scan => {
                let p = SsmParameters::seeded(4, 16, 4, Direction::Forward, settings.seed);
                let u = Tensor::from_vec(random_vec(t * 4, &mut rng), &[t, 4]);
                no_grad(|| {
                    let mut err = None;
                    let r = time_workload(settings, || match scan_chunked(&u, &p, 1024) {
                        Ok(y) => {
                            black_box(y);
                        }
                        Err(e) => err = Some(e),
                    });
                    err.map_or(Ok(r), Err)
                })?
            }
            BenchKind::Attention => {
                let d = 8;
                let (q, k, v) = (
                    random_vec(t * d, &mut rng),
                    random_vec(t * d, &mut rng),
                    random_vec(t * d, &mut rng),
                );
                time_workload(settings, || {
                    black_box(reference_attention(black_box(&q), &k, &v, d));
                })
            }
            BenchKind::Bkm => {
                let cfg = BkmConfig {
                    kan_hidden: 8,
                    ..BkmConfig::new(4)
                };
                let block = BkmBlock::seeded(&cfg, settings.seed)?;
                let [h, w, dd] = volume_dims(t)?;
                let x = Tensor::from_vec(random_vec(t * 4, &mut rng), &[4, h, w, dd]);
                no_grad(|| {
                    let mut err = None;
                    let r = time_workload(settings, || match block.forward(&x) {
                        Ok(y) => {
                            black_box(y);
                        }
                        Err(e) => err = Some(e),
                    });
                    err.map_or(Ok(r), Err)
                })?
            }
        };
        log::info!("bench {} T={t}: {mean_ns:.0} ns", kind.name());
        rows.push(BenchRow { t, mean_ns, std_ns });
    }
    let lx: Vec<f64> = rows.iter().map(|r| (r.t as f64).ln()).collect();
    let ly: Vec<f64> = rows.iter().map(|r| r.mean_ns.ln()).collect();
    Ok(BenchReport {
        kind,
        slope: fit_slope(&lx, &ly),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_law() {
        let x: Vec<f64> = (10..18).map(|e| (e as f64) * 2f64.ln()).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.7 * v + 3.0).collect();
        assert!((fit_slope(&x, &y) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn size_parsing() {
        assert_eq!(parse_sizes("2^3..2^5").unwrap(), vec![8, 16, 32]);
        assert_eq!(parse_sizes("100, 2^8").unwrap(), vec![100, 256]);
        assert!(parse_sizes("7").is_err());
        assert!(parse_sizes("a,b").is_err());
        assert!(parse_sizes("2^5..2^3").is_err());
    }

    #[test]
    fn attention_matches_direct_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (t, d) = (5, 3);
        let (q, k, v) = (random_vec(t * d, &mut rng), random_vec(t * d, &mut rng), random_vec(t * d, &mut rng));
        let out = reference_attention(&q, &k, &v, d);
        for i in 0..t {
            let s: Vec<f64> = (0..t)
                .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for c in 0..d {
                let expect: f64 = (0..t).map(|j| s[j].exp() / z * v[j * d + c]).sum();
                assert!((out[i * d + c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn volume_dims_cover_size() {
        for e in 0..20 {
            let d = volume_dims(1 << e).unwrap();
            assert_eq!(d.iter().product::<usize>(), 1 << e);
        }
        assert!(volume_dims(12).is_err());
    }

    #[test]
    fn small_bench_runs() {
        let s = BenchSettings {
            samples: 2,
            min_sample: Duration::from_micros(50),
            seed: 0,
        };
        for kind in [BenchKind::Scan, BenchKind::Attention, BenchKind::Bkm] {
            let r = run_bench(kind, &[64, 128], &s).unwrap();
            assert_eq!(r.rows.len(), 2);
            assert!(r.slope.is_finite());
            assert_eq!(r.csv_lines()[0].split(',').count(), 4);
        }
    }
}
