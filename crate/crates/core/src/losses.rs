//! Segmentation training objectives.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::tensor::Tensor;

/// Smoothing added to the soft Dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of cross-entropy against soft Dice.
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 0.5,
            lambda1: 1.0,
            lambda2: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) || !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights need beta in [0, 1] and nonnegative lambdas, got {self:?}"
            )));
        }
        Ok(())
    }
}

fn check_target(logits: &Tensor, target: &LabelVolume) -> Result<usize> {
    let s = logits.shape();
    if s.len() != 4 || s[1..] != target.dims {
        return Err(Error::Shape(format!(
            "logits {s:?} vs target dims {:?}",
            target.dims
        )));
    }
    target.check_classes(s[0])?;
    Ok(s[0])
}

/// `[C, H, W, D]` indicator of each class.
pub fn one_hot(target: &LabelVolume, classes: usize) -> Result<Tensor> {
    target.check_classes(classes)?;
    let v = target.len();
    let mut data = vec![0.0; classes * v];
    for (i, &l) in target.labels.iter().enumerate() {
        data[l as usize * v + i] = 1.0;
    }
    let [h, w, d] = target.dims;
    Ok(Tensor::from_vec(data, &[classes, h, w, d]))
}

/// Voxel mean of `−log softmax(logits)[true class]`.
pub fn cross_entropy(logits: &Tensor, target: &LabelVolume) -> Result<Tensor> {
    check_target(logits, target)?;
    let v = target.len();
    let idx: Vec<usize> = target.labels.iter().enumerate().map(|(i, &l)| l as usize * v + i).collect();
    Ok(logits.log_softmax_channels().gather(Rc::new(idx), &[v])?.mean().neg())
}

/// `1 − mean_c (2 Σ p g + ε) / (Σ p + Σ g + ε)` over the classes present in the target.
pub fn soft_dice_loss(logits: &Tensor, target: &LabelVolume) -> Result<Tensor> {
    let c = check_target(logits, target)?;
    let g = one_hot(target, c)?;
    let p = logits.softmax_channels();
    let v = target.len() as f64;
    let inter = p.mul(&g).mean_spatial().scale(2.0 * v).add_scalar(DICE_EPS);
    let den = p.mean_spatial().scale(v).add(&g.mean_spatial().scale(v)).add_scalar(DICE_EPS);
    let mut present = vec![0.0; c];
    for &l in &target.labels {
        present[l as usize] = 1.0;
    }
    let n = present.iter().sum::<f64>();
    let w = Tensor::from_vec(present.iter().map(|p| p / n).collect(), &[c, 1, 1, 1]);
    Ok(inter.div(&den).mul(&w).sum().neg().add_scalar(1.0))
}

/// `β·CE + (1 − β)·Dice`; a term with zero weight is left out of the graph.
pub fn origin_loss(logits: &Tensor, target: &LabelVolume, w: &LossWeights) -> Result<Tensor> {
    w.validate()?;
    let loss = match w.beta {
        b if b == 1.0 => cross_entropy(logits, target)?,
        b if b == 0.0 => soft_dice_loss(logits, target)?,
        b => cross_entropy(logits, target)?
            .scale(b)
            .add(&soft_dice_loss(logits, target)?.scale(1.0 - b)),
    };
    loss.check_finite("origin loss")?;
    Ok(loss)
}

/// `λ1·origin + λ2·sd`.
pub fn total_loss(origin: &Tensor, sd: &Tensor, w: &LossWeights) -> Tensor {
    origin.scale(w.lambda1).add(&sd.scale(w.lambda2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(labels: Vec<u8>, dims: [usize; 3]) -> LabelVolume {
        LabelVolume::new(dims, labels).unwrap()
    }

    #[test]
    fn hand_worked_example() {
        let logits = Tensor::zeros(&[2, 1, 1, 1]);
        let t = vol(vec![0], [1, 1, 1]);
        let ce = cross_entropy(&logits, &t).unwrap().item();
        assert!((ce - 2f64.ln()).abs() < 1e-12);
        let d = soft_dice_loss(&logits, &t).unwrap().item();
        assert!((d - 1.0 / 3.0).abs() < 1e-5);
        let o = origin_loss(&logits, &t, &LossWeights::default()).unwrap().item();
        assert!((o - 0.5132).abs() < 1e-4, "{o}");
    }

    #[test]
    fn confident_correct_logits() {
        let labels = vec![0, 1, 2, 1, 0, 2, 2, 1];
        let t = vol(labels.clone(), [2, 2, 2]);
        let mut data = vec![0.0; 24];
        for (i, &l) in labels.iter().enumerate() {
            data[l as usize * 8 + i] = 50.0;
        }
        let o = origin_loss(&Tensor::from_vec(data, &[3, 2, 2, 2]), &t, &LossWeights::default()).unwrap();
        assert!(o.item() < 1e-6 && o.item() >= 0.0, "{}", o.item());
    }

    #[test]
    fn beta_endpoints() {
        let logits = Tensor::from_vec((0..24).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.6).collect(), &[3, 2, 2, 2]);
        let t = vol(vec![0, 1, 2, 1, 0, 0, 2, 1], [2, 2, 2]);
        let ce_only = LossWeights {
            beta: 1.0,
            ..LossWeights::default()
        };
        let dice_only = LossWeights {
            beta: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(
            origin_loss(&logits, &t, &ce_only).unwrap().item(),
            cross_entropy(&logits, &t).unwrap().item()
        );
        assert_eq!(
            origin_loss(&logits, &t, &dice_only).unwrap().item(),
            soft_dice_loss(&logits, &t).unwrap().item()
        );
    }

    #[test]
    fn total_is_linear() {
        let w = LossWeights {
            beta: 0.5,
            lambda1: 1.0,
            lambda2: 1.0,
        };
        let t = total_loss(&Tensor::scalar(0.3), &Tensor::scalar(0.2), &w);
        assert!((t.item() - 0.5).abs() < 1e-15);
        let w0 = LossWeights { lambda2: 0.0, ..w };
        assert_eq!(total_loss(&Tensor::scalar(0.3), &Tensor::scalar(7.0), &w0).item(), 0.3);
    }

    #[test]
    fn errors() {
        let logits = Tensor::zeros(&[2, 1, 1, 2]);
        assert!(matches!(
            cross_entropy(&logits, &vol(vec![0, 2], [1, 1, 2])),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
        assert!(cross_entropy(&logits, &vol(vec![0], [1, 1, 1])).is_err());
        let bad = LossWeights {
            beta: 1.2,
            ..LossWeights::default()
        };
        assert!(origin_loss(&logits, &vol(vec![0, 1], [1, 1, 2]), &bad).is_err());
    }
}
