use kmamba::kan::{KanConfig, KanLayer};
use kmamba::nn::named_params;
use kmamba::optim::{Adam, AdamConfig};
use kmamba::Tensor;

#[test]
fn fits_sine_on_unit_interval() {
    let cfg = KanConfig {
        grid_lo: -1.0,
        grid_hi: 1.0,
        intervals: 16,
        ..KanConfig::new(1, 8, 1)
    };
    let layer = KanLayer::seeded(&cfg, 0).unwrap();
    let n = 101;
    let xs: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
    let target: Vec<f64> = xs.iter().map(|x| (std::f64::consts::PI * x).sin()).collect();
    let x = Tensor::from_vec(xs, &[n, 1]);
    let y = Tensor::from_vec(target.clone(), &[n, 1]);
    let mut opt = Adam::new(
        named_params(&layer),
        AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
    );
    for _ in 0..2000 {
        opt.zero_grad();
        layer.forward(&x).unwrap().sub(&y).square().mean().backward().unwrap();
        opt.step().unwrap();
    }
    let pred = kmamba::no_grad(|| layer.forward(&x).unwrap()).to_vec();
    let worst = pred.iter().zip(&target).map(|(p, t)| (p - t).abs()).fold(0.0, f64::max);
    assert!(worst < 0.02, "max error {worst}");
}
