use kmamba::gradcheck::GradCheck;
use kmamba::nn::named_params;
use kmamba::ssm::{scan_chunked, scan_naive, Direction, SsmParameters};
use kmamba::{no_grad, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape)
}

#[test]
fn scan_is_linear_in_its_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (case, dir) in [Direction::Forward, Direction::Backward].into_iter().enumerate() {
        let p = SsmParameters::seeded(3, 8, 2, dir, case as u64);
        let (u1, u2) = (random(&[200, 3], &mut rng), random(&[200, 3], &mut rng));
        let (a, b) = (1.7, -0.4);
        no_grad(|| {
            let lhs = scan_chunked(&u1.scale(a).add(&u2.scale(b)), &p, 64).unwrap().to_vec();
            let rhs = scan_chunked(&u1, &p, 64)
                .unwrap()
                .scale(a)
                .add(&scan_chunked(&u2, &p, 64).unwrap().scale(b))
                .to_vec();
            for (l, r) in lhs.iter().zip(&rhs) {
                assert!((l - r).abs() < 1e-10, "{l} vs {r}");
            }
        });
    }
}

#[test]
fn chunk_size_does_not_change_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p = SsmParameters::seeded(2, 16, 3, Direction::Backward, 5);
    let u = random(&[333, 2], &mut rng);
    let reference = no_grad(|| scan_naive(&u, &p).unwrap()).to_vec();
    for chunk in [1, 7, 64, 333, 1000] {
        let y = no_grad(|| scan_chunked(&u, &p, chunk).unwrap()).to_vec();
        let worst = y.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-10, "chunk {chunk}: {worst}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (t, dir, chunk) in [(1, Direction::Forward, 1), (17, Direction::Forward, 4), (32, Direction::Backward, 5)] {
        let p = SsmParameters::seeded(2, 4, 3, dir, t as u64);
        let u = random(&[t, 2], &mut rng).into_param();
        let w = random(&[t, 3], &mut rng);
        let mut inputs = named_params(&p);
        inputs.push(("u".into(), u.clone()));
        for (name, f) in [("naive", false), ("chunked", true)] {
            let report = GradCheck::default()
                .run(name, &inputs, || {
                    let y = if f { scan_chunked(&u, &p, chunk)? } else { scan_naive(&u, &p)? };
                    Ok(y.mul(&w).sum())
                })
                .unwrap();
            assert!(report.passed(), "T={t} {report}");
        }
    }
}
