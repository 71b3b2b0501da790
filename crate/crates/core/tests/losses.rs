mod common;

use candle_core::{DType, Device, Tensor, Var};
use common::*;
use derain_core::losses::{
    cycle_loss, disc_loss, gen_adv_loss, perceptual_loss, ssim, ssim_loss, supervised_loss, total_loss, tv_loss,
    unsupervised_loss, LossWeights, SupervisedTerms, UnsupervisedTerms, SCORE_EPS,
};
use derain_core::nn::{DiscScores, FeatureExtractor};
use proptest::prelude::*;
use rand::Rng;

const SHAPE: (usize, usize, usize, usize) = (4, 3, 8, 8);

fn idx(s: (usize, usize, usize, usize), b: usize, c: usize, i: usize, j: usize) -> usize {
    ((b * s.1 + c) * s.2 + i) * s.3 + j
}

#[test]
fn cycle_matches_loop_oracle() {
    let mut r = rng(1);
    let a = random_tensor(&mut r, SHAPE, 0.0, 1.0);
    let b = random_tensor(&mut r, SHAPE, 0.0, 1.0);
    let (va, vb) = (values(&a), values(&b));
    let mut sum = 0.0;
    for k in 0..va.len() {
        sum += (va[k] - vb[k]).abs();
    }
    let oracle = sum / va.len() as f64;
    assert!((value(&cycle_loss(&a, &b).unwrap()) - oracle).abs() < 1e-9);
}

#[test]
fn tv_matches_loop_oracle() {
    let mut r = rng(2);
    let y = random_tensor(&mut r, SHAPE, 0.0, 1.0);
    let v = values(&y);
    let mut sum = 0.0;
    for b in 0..SHAPE.0 {
        for c in 0..SHAPE.1 {
            for i in 0..SHAPE.2 {
                for j in 0..SHAPE.3 {
                    if i + 1 < SHAPE.2 {
                        sum += (v[idx(SHAPE, b, c, i + 1, j)] - v[idx(SHAPE, b, c, i, j)]).abs();
                    }
                    if j + 1 < SHAPE.3 {
                        sum += (v[idx(SHAPE, b, c, i, j + 1)] - v[idx(SHAPE, b, c, i, j)]).abs();
                    }
                }
            }
        }
    }
    let oracle = sum / v.len() as f64;
    assert!((value(&tv_loss(&y).unwrap()) - oracle).abs() < 1e-9);
}

#[test]
fn tv_ignores_constant_offsets() {
    let mut r = rng(3);
    let y = random_tensor(&mut r, SHAPE, 0.2, 0.7);
    let shifted = (&y + 0.25).unwrap();
    assert!((value(&tv_loss(&y).unwrap()) - value(&tv_loss(&shifted).unwrap())).abs() < 1e-12);
}

#[test]
fn tv_of_unit_step_image() {
    let y = Tensor::new(&[[[[0.0f64, 1.0], [0.0, 1.0]]]], &Device::Cpu).unwrap();
    assert_eq!(value(&tv_loss(&y).unwrap()), 0.5);
}

#[test]
fn perceptual_matches_feature_oracle() {
    let mut r = rng(4);
    let a = random_tensor(&mut r, SHAPE, 0.0, 1.0);
    let b = random_tensor(&mut r, SHAPE, 0.0, 1.0);
    let net = FeatureExtractor::surrogate(0x5eed, 8, &Device::Cpu, DType::F64).unwrap();
    let (fa, fb) = (values(&net.forward(&a).unwrap()), values(&net.forward(&b).unwrap()));
    let mut sum = 0.0;
    for k in 0..fa.len() {
        sum += (fa[k] - fb[k]).powi(2);
    }
    let oracle = sum / fa.len() as f64;
    assert!(rel_err(value(&perceptual_loss(&net, &a, &b).unwrap()), oracle) < 1e-6);
    assert_eq!(value(&perceptual_loss(&net, &a, &a).unwrap()), 0.0);
}

#[test]
fn perceptual_with_identity_backbone_is_pixel_mse() {
    let mut r = rng(5);
    let a = random_tensor(&mut r, SHAPE, 0.0, 1.0);
    let b = random_tensor(&mut r, SHAPE, 0.0, 1.0);
    let (va, vb) = (values(&a), values(&b));
    let mse = va.iter().zip(&vb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / va.len() as f64;
    let got = value(&perceptual_loss(&FeatureExtractor::identity(), &a, &b).unwrap());
    assert!((got - mse).abs() < 1e-12);
}

fn random_scores(r: &mut rand_chacha::ChaCha8Rng, sizes: &[usize], lo: f64, hi: f64) -> DiscScores {
    DiscScores(sizes.iter().map(|&n| random_tensor(r, (4, 1, n, n), lo, hi)).collect())
}

fn clamp(v: f64) -> f64 {
    v.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

#[test]
fn adversarial_losses_match_loop_oracle() {
    let mut r = rng(6);
    let sizes = [4, 2, 1];
    let real = random_scores(&mut r, &sizes, 0.0, 1.0);
    let fake = random_scores(&mut r, &sizes, 0.0, 1.0);
    let mut d = 0.0;
    let mut g = 0.0;
    for s in 0..sizes.len() {
        let (vr, vf) = (values(&real.0[s]), values(&fake.0[s]));
        let n = vr.len() as f64;
        d += vr.iter().map(|&v| -clamp(v).ln()).sum::<f64>() / n
            + vf.iter().map(|&v| -(1.0 - clamp(v)).ln()).sum::<f64>() / n;
        g += vf.iter().map(|&v| -clamp(v).ln()).sum::<f64>() / n;
    }
    d /= sizes.len() as f64;
    g /= sizes.len() as f64;
    assert!((value(&disc_loss(&real, &fake).unwrap()) - d).abs() < 1e-7);
    assert!((value(&gen_adv_loss(&fake).unwrap()) - g).abs() < 1e-7);
}

#[test]
fn ssim_matches_loop_oracle_and_is_symmetric() {
    let mut r = rng(7);
    for _ in 0..5 {
        let x = random_tensor(&mut r, (1, 3, 16, 16), 0.0, 1.0);
        let y = random_tensor(&mut r, (1, 3, 16, 16), 0.0, 1.0);
        let s = value(&ssim(&x, &y).unwrap());
        assert!((s - ssim_oracle(&values(&x), &values(&y), 3, 16, 16)).abs() < 1e-9);
        assert!((s - value(&ssim(&y, &x).unwrap())).abs() < 1e-12);
        let l = value(&ssim_loss(&x, &y).unwrap());
        assert!((-1.0..=1.0).contains(&l));
    }
}

#[test]
fn ssim_of_half_and_quarter_constants() {
    let a = Tensor::full(0.5f64, (2, 3, 8, 8), &Device::Cpu).unwrap();
    let b = Tensor::full(0.25f64, (2, 3, 8, 8), &Device::Cpu).unwrap();
    let closed = (2.0 * 0.5 * 0.25 + 1e-4) / (0.25 + 0.0625 + 1e-4);
    assert!((value(&ssim(&a, &b).unwrap()) - closed).abs() < 1e-12);
    assert!((value(&ssim_loss(&a, &b).unwrap()) + 0.80006).abs() < 1e-5);
}

/// Central differences of `f` at `x` compared against autodiff.
fn check_gradient(x: &Tensor, f: impl Fn(&Tensor) -> Tensor) {
    let var = Var::from_tensor(x).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let analytic = values(grads.get(var.as_tensor()).expect("input gradient"));
    let base = values(x);
    let h = 1e-5;
    let mut numeric = Vec::with_capacity(base.len());
    for k in 0..base.len() {
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[k] += delta;
            value(&f(&Tensor::from_vec(v, x.dims(), &Device::Cpu).unwrap()))
        };
        numeric.push((eval(h) - eval(-h)) / (2.0 * h));
    }
    let diff: f64 = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    assert!(scale > 0.0, "zero gradient");
    assert!(diff / scale < 1e-4, "relative gradient error {}", diff / scale);
}

/// Random input whose entries stay at least `gap` away from every entry of `other`.
fn apart_from(r: &mut rand_chacha::ChaCha8Rng, other: &[f64], gap: f64) -> Vec<f64> {
    other
        .iter()
        .map(|&o| loop {
            let v: f64 = r.random_range(0.0..1.0);
            if (v - o).abs() > gap {
                break v;
            }
        })
        .collect()
}

const SMALL: (usize, usize, usize, usize) = (1, 3, 4, 4);

#[test]
fn ssim_gradient_matches_finite_differences() {
    let mut r = rng(8);
    let y = random_tensor(&mut r, SMALL, 0.0, 1.0);
    let x = random_tensor(&mut r, SMALL, 0.05, 0.95);
    check_gradient(&x, |x| ssim_loss(&y, x).unwrap());
}

#[test]
fn cycle_gradient_matches_finite_differences() {
    let mut r = rng(9);
    let a = random_tensor(&mut r, SMALL, 0.0, 1.0);
    let b = Tensor::from_vec(apart_from(&mut r, &values(&a), 1e-3), SMALL, &Device::Cpu).unwrap();
    check_gradient(&b, |b| cycle_loss(&a, b).unwrap());
}

#[test]
fn tv_gradient_matches_finite_differences() {
    let mut r = rng(10);
    // strictly increasing values keep every neighbour difference away from the kink
    let mut v = random_values(&mut r, 48, 0.0, 1.0);
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let v: Vec<f64> = v.iter().enumerate().map(|(i, x)| x * 0.5 + i as f64 * 0.01).collect();
    let y = Tensor::from_vec(v, SMALL, &Device::Cpu).unwrap();
    check_gradient(&y, |y| tv_loss(y).unwrap());
}

#[test]
fn perceptual_gradient_matches_finite_differences() {
    let mut r = rng(11);
    let net = FeatureExtractor::surrogate(0x5eed, 8, &Device::Cpu, DType::F64).unwrap();
    let a = random_tensor(&mut r, SMALL, 0.0, 1.0);
    let b = random_tensor(&mut r, SMALL, 0.0, 1.0);
    check_gradient(&b, |b| perceptual_loss(&net, &a, b).unwrap());
}

#[test]
fn adversarial_gradients_match_finite_differences() {
    let mut r = rng(12);
    let real = random_tensor(&mut r, (2, 1, 3, 3), 0.05, 0.95);
    let fake = random_tensor(&mut r, (2, 1, 3, 3), 0.05, 0.95);
    check_gradient(&fake, |f| {
        disc_loss(&DiscScores::single(real.clone()), &DiscScores::single(f.clone())).unwrap()
    });
    check_gradient(&real, |rl| {
        disc_loss(&DiscScores::single(rl.clone()), &DiscScores::single(fake.clone())).unwrap()
    });
    check_gradient(&fake, |f| gen_adv_loss(&DiscScores::single(f.clone())).unwrap());
}

#[test]
fn composite_losses_match_dot_products() {
    let mut r = rng(13);
    for _ in 0..100 {
        let t = random_values(&mut r, 7, -2.0, 2.0);
        let wv = random_values(&mut r, 8, 0.0, 5.0);
        let w = LossWeights {
            adv_super: wv[0],
            per_super: wv[1],
            ssim: wv[2],
            adv_unsup: wv[3],
            cc: wv[4],
            per_unsup: wv[5],
            tv: wv[6],
            unsup: wv[7],
        };
        let s = SupervisedTerms {
            adv: t[0],
            per: t[1],
            ssim: t[2],
        };
        let u = UnsupervisedTerms {
            adv: t[3],
            cc: t[4],
            per: t[5],
            tv: t[6],
        };
        let so = wv[0] * t[0] + wv[1] * t[1] + wv[2] * t[2];
        let uo = wv[3] * t[3] + wv[4] * t[4] + wv[5] * t[5] + wv[6] * t[6];
        assert!((supervised_loss(&s, &w).unwrap() - so).abs() < 1e-12);
        assert!((unsupervised_loss(&u, &w).unwrap() - uo).abs() < 1e-12);
        assert!((total_loss(so, uo, &w) - (so + wv[7] * uo)).abs() < 1e-12);
    }
}

#[test]
fn published_weights_reproduce_hand_sums() {
    let w = LossWeights::default();
    assert_eq!((w.adv_super, w.per_super, w.ssim, w.unsup), (1.0, 1.0, 1.0, 1.0));
    assert_eq!((w.adv_unsup, w.cc, w.per_unsup, w.tv), (1.5e-5, 10.0, 1.0, 100.0));
    let s = supervised_loss(
        &SupervisedTerms {
            adv: 0.5,
            per: 0.2,
            ssim: -0.9,
        },
        &w,
    )
    .unwrap();
    assert!((s + 0.2).abs() < 1e-12);
    let u = unsupervised_loss(
        &UnsupervisedTerms {
            adv: 1.0,
            cc: 0.1,
            per: 0.2,
            tv: 0.005,
        },
        &w,
    )
    .unwrap();
    assert!((u - 1.700015).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composite_losses_are_linear(
        a in prop::array::uniform7(-3.0f64..3.0),
        b in prop::array::uniform7(-3.0f64..3.0),
        k in -4.0f64..4.0,
    ) {
        let w = LossWeights::default();
        let sup = |t: &[f64; 7]| supervised_loss(&SupervisedTerms { adv: t[0], per: t[1], ssim: t[2] }, &w).unwrap();
        let uns = |t: &[f64; 7]| unsupervised_loss(&UnsupervisedTerms { adv: t[3], cc: t[4], per: t[5], tv: t[6] }, &w).unwrap();
        let sum: [f64; 7] = std::array::from_fn(|i| a[i] + b[i]);
        let scaled: [f64; 7] = std::array::from_fn(|i| k * a[i]);
        prop_assert!((sup(&sum) - sup(&a) - sup(&b)).abs() < 1e-9);
        prop_assert!((uns(&sum) - uns(&a) - uns(&b)).abs() < 1e-9);
        prop_assert!((sup(&scaled) - k * sup(&a)).abs() < 1e-9);
        prop_assert!((uns(&scaled) - k * uns(&a)).abs() < 1e-9);
    }

    #[test]
    fn distance_losses_are_nonnegative(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_tensor(&mut r, (2, 3, 6, 6), 0.0, 1.0);
        let b = random_tensor(&mut r, (2, 3, 6, 6), 0.0, 1.0);
        prop_assert!(value(&cycle_loss(&a, &b).unwrap()) >= 0.0);
        prop_assert!(value(&tv_loss(&a).unwrap()) >= 0.0);
        prop_assert!(value(&perceptual_loss(&FeatureExtractor::identity(), &a, &b).unwrap()) >= 0.0);
        let s = DiscScores::single(random_tensor(&mut r, (2, 1, 2, 2), 0.0, 1.0));
        let f = DiscScores::single(random_tensor(&mut r, (2, 1, 2, 2), 0.0, 1.0));
        prop_assert!(value(&disc_loss(&s, &f).unwrap()) >= 0.0);
        prop_assert!(value(&gen_adv_loss(&f).unwrap()) >= 0.0);
    }

    #[test]
    fn losses_are_pure(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_tensor(&mut r, (1, 3, 5, 5), 0.0, 1.0);
        let b = random_tensor(&mut r, (1, 3, 5, 5), 0.0, 1.0);
        prop_assert_eq!(value(&ssim(&a, &b).unwrap()).to_bits(), value(&ssim(&a, &b).unwrap()).to_bits());
        prop_assert_eq!(value(&tv_loss(&a).unwrap()).to_bits(), value(&tv_loss(&a).unwrap()).to_bits());
    }
}
