//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{no_grad, trace_branches, Tensor};

/// Central difference formula used for the numeric derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, truncation error O(h²).
    ThreePoint,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, truncation error O(h⁴).
    /// Needed where the function is sharply curved at the step scale, e.g. a
    /// layer norm over two channels whose inputs nearly coincide.
    FivePoint,
}

/// Settings for a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub stencil: Stencil,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Denominator floor: coordinates whose gradients are both smaller than this
    /// are compared in absolute terms scaled by it.
    pub floor: f64,
    /// Probe at most this many coordinates per tensor (all when `None`).
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
    /// When a stencil point lands on a different side of a ReLU or argmax
    /// switch than the base point, or the estimate misses tolerance, retry with
    /// the step divided by 10 up to this many times. A coordinate where every
    /// stencil straddles a switch point is excluded.
    pub refinements: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-4,
            stencil: Stencil::FivePoint,
            tolerance: 1e-4,
            floor: 1e-3,
            max_per_tensor: None,
            seed: 0,
            refinements: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates re-estimated with a reduced step.
    pub refined: usize,
    /// Coordinates left out because every tried stencil straddled a switch point.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
    pub tolerance: f64,
}

impl GradCheckReport {
    /// Every compared coordinate is within tolerance, and at most a tenth of
    /// the probed coordinates had to be excluded.
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance && self.skipped * 10 <= self.checked + self.skipped
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} {} coords ({} refined, {} skipped)  max rel err {:.3e} (tol {:.0e}) {}",
            self.name,
            self.checked,
            self.refined,
            self.skipped,
            self.max_rel_err,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        if let (false, Some(w)) = (self.passed(), &self.worst) {
            write!(
                f,
                " [worst {}[{}]: analytic {:.6e} numeric {:.6e}]",
                w.tensor, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

impl GradCheck {
    pub fn sampled(max_per_tensor: usize) -> Self {
        GradCheck {
            max_per_tensor: Some(max_per_tensor),
            ..Self::default()
        }
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn relative_error(&self, analytic: f64, numeric: f64) -> f64 {
        let denom = analytic.abs().max(numeric.abs()).max(self.floor);
        (analytic - numeric).abs() / denom
    }

    /// Compares the backward-pass gradient of the scalar `f()` against central
    /// differences for every (or a seeded sample of every) coordinate of `inputs`.
    pub fn run<F>(&self, name: &str, inputs: &[(String, Tensor)], f: F) -> Result<GradCheckReport>
    where
        F: Fn() -> Result<Tensor>,
    {
        for (n, t) in inputs {
            if !t.is_leaf() || !t.requires_grad() {
                return Err(Error::Contract(format!("{n} is not a gradient-tracking leaf")));
            }
            t.zero_grad();
        }
        f()?.backward()?;
        let analytic: Vec<Vec<f64>> = inputs
            .iter()
            .map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradCheckReport {
            name: name.to_string(),
            checked: 0,
            refined: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst: None,
            tolerance: self.tolerance,
        };
        let eval = || -> Result<(f64, u64)> {
            let (v, branches) = trace_branches(|| no_grad(&f).map(|t| t.item()));
            Ok((v?, branches))
        };
        for ((tname, t), grads) in inputs.iter().zip(&analytic) {
            let n = t.numel();
            let indices: Vec<usize> = match self.max_per_tensor {
                Some(k) if k < n => {
                    let mut v = sample(&mut rng, n, k).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..n).collect(),
            };
            for i in indices {
                let orig = t.data()[i];
                let (_, base) = eval()?;
                // A smaller step is tried when a stencil point crosses a switch
                // point, or when the estimate misses tolerance: truncation error
                // shrinks with the step, while a wrong analytic gradient stays
                // wrong at every step.
                let mut numeric = None;
                let mut h = self.step;
                for attempt in 0..=self.refinements {
                    if let Some(d) = self.difference(&eval, t, i, orig, h, base)? {
                        numeric = Some(d);
                        report.refined += (attempt == 1) as usize;
                        if self.relative_error(grads[i], d) < self.tolerance {
                            break;
                        }
                    }
                    h /= 10.0;
                }
                let Some(numeric) = numeric else {
                    report.skipped += 1;
                    continue;
                };
                let rel = self.relative_error(grads[i], numeric);
                report.checked += 1;
                if rel > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = report.max_rel_err.max(rel);
                    report.worst = Some(Mismatch {
                        tensor: tname.clone(),
                        index: i,
                        analytic: grads[i],
                        numeric,
                        rel_err: rel,
                    });
                }
            }
        }
        for (_, t) in inputs {
            t.zero_grad();
        }
        Ok(report)
    }

    /// Numeric derivative at step `h`, or `None` if a stencil point sits on a
    /// different smooth piece than the base point.
    fn difference(
        &self,
        eval: &dyn Fn() -> Result<(f64, u64)>,
        t: &Tensor,
        i: usize,
        orig: f64,
        h: f64,
        base: u64,
    ) -> Result<Option<f64>> {
        let offsets: &[f64] = match self.stencil {
            Stencil::ThreePoint => &[1.0, -1.0],
            Stencil::FivePoint => &[1.0, -1.0, 2.0, -2.0],
        };
        let mut f = [0.0; 4];
        for (k, &o) in offsets.iter().enumerate() {
            t.data_mut()[i] = orig + o * h;
            let r = eval();
            t.data_mut()[i] = orig;
            let (v, branches) = r?;
            if branches != base {
                return Ok(None);
            }
            f[k] = v;
        }
        Ok(Some(match self.stencil {
            Stencil::ThreePoint => (f[0] - f[1]) / (2.0 * h),
            Stencil::FivePoint => (8.0 * (f[0] - f[1]) - (f[2] - f[3])) / (12.0 * h),
        }))
    }
}
