//! Joint loss: hand-computed oracle, algebraic identities, sampling
//! statistics, transforms and end-to-end gradients.

mod common;

use common::{max_grad_error, random_tensor, rng};
use ddmseg::ddmloss::{
    batch_loss, sample_without_replacement, supervised_term, BatchSampler, LabeledSet, LossConfig,
    ProbabilityModel, Transform, UnlabeledSet,
};
use ddmseg::discrepancy::{DiscrepancyParams, DiscrepancyRegistry, SquaredEuclidean};
use ddmseg::nn::{UNet, UNetConfig};
use ddmseg::tensor::{Graph, Padding, Tensor, Var};
use ddmseg::Result;

/// Per-pixel linear classifier followed by softmax.
struct PixelNet;

impl ProbabilityModel for PixelNet {
    fn probabilities(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let z = g.conv2d(x, p[0], Some(p[1]), 1, Padding::Valid)?;
        g.softmax(z, 1)
    }
}

fn img(values: &[f64], h: usize, w: usize) -> Tensor {
    Tensor::new(vec![1, h, w], values.to_vec()).unwrap()
}

fn softmax2(z0: f64, z1: f64) -> [f64; 2] {
    let m = z0.max(z1);
    let (a, b) = ((z0 - m).exp(), (z1 - m).exp());
    [a / (a + b), b / (a + b)]
}

#[test]
fn one_pixel_loss_matches_hand_computation() {
    let (w, b) = ([0.7, -1.3], [0.2, 0.1]);
    let (x0, xs, xt) = (0.4, 0.9, 0.15);
    let labeled = LabeledSet::new(vec![img(&[x0], 1, 1)], vec![vec![1]], 2).unwrap();
    let unlabeled = UnlabeledSet::new(vec![img(&[xs], 1, 1)], vec![img(&[xt], 1, 1)]).unwrap();
    let reg = DiscrepancyRegistry::default();
    for name in ["sqeuclid", "kl", "bhattacharyya"] {
        let d = reg.build(name, &DiscrepancyParams::default()).unwrap();
        let cfg = LossConfig {
            lambda: 0.1,
            discrepancy: d.as_ref(),
            transform: Transform::Identity,
            permutation: vec![0],
            batch_size: 1,
        };
        let mut g = Graph::new();
        let p = vec![
            g.param(Tensor::new(vec![2, 1, 1, 1], w.to_vec()).unwrap()),
            g.param(Tensor::new(vec![2], b.to_vec()).unwrap()),
        ];
        let loss = batch_loss(&mut g, &PixelNet, &p, &labeled, &unlabeled, &cfg, &mut BatchSampler::new(3)).unwrap();

        let s = |x: f64| softmax2(w[0] * x + b[0], w[1] * x + b[1]);
        let h = -s(x0)[1].ln();
        let (a, c) = (s(xs), s(xt));
        let dval = match name {
            "sqeuclid" => (a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2),
            "kl" => a[0] * (a[0] / c[0]).ln() + a[1] * (a[1] / c[1]).ln(),
            _ => -((a[0] * c[0]).sqrt() + (a[1] * c[1]).sqrt()),
        };
        let expected = h + 0.1 * dval;
        let got = g.value(loss.total).item().unwrap();
        assert!((got - expected).abs() < 1e-13, "{name}: {got} vs {expected}");
    }
}

fn toy_sets(seed: u64, n: usize, m: usize, size: usize) -> (LabeledSet, UnlabeledSet) {
    let mut r = rng(seed);
    let images = (0..n).map(|_| random_tensor(&mut r, &[1, size, size], 0.0, 1.0)).collect();
    let labels = (0..n)
        .map(|i| (0..size * size).map(|p| ((p * 7 + i * 3) % 3) as u8).collect())
        .collect();
    let source = (0..m).map(|_| random_tensor(&mut r, &[1, size, size], 0.0, 1.0)).collect();
    let target = (0..m).map(|_| random_tensor(&mut r, &[1, size, size], 0.0, 1.0)).collect();
    (
        LabeledSet::new(images, labels, 3).unwrap(),
        UnlabeledSet::new(source, target).unwrap(),
    )
}

fn tiny_unet() -> UNet {
    UNet::new(UNetConfig::desk(3, 2, 8), 5).unwrap()
}

#[test]
fn zero_lambda_reduces_to_supervised_bitwise() {
    let net = tiny_unet();
    let (labeled, unlabeled) = toy_sets(1, 4, 4, 8);
    let d = SquaredEuclidean;
    let cfg = LossConfig {
        lambda: 0.0,
        discrepancy: &d,
        transform: Transform::Identity,
        permutation: vec![2, 0, 3, 1],
        batch_size: 2,
    };

    let mut g1 = Graph::new();
    let p1 = net.params().bind(&mut g1, true);
    let loss = batch_loss(&mut g1, &net, &p1, &labeled, &unlabeled, &cfg, &mut BatchSampler::new(9)).unwrap();
    assert!(g1.value(loss.disc).item().unwrap() > 0.0);
    g1.backward(loss.total).unwrap();

    let mut g2 = Graph::new();
    let p2 = net.params().bind(&mut g2, true);
    let idx = BatchSampler::new(9).labeled(labeled.len(), 2).unwrap();
    let ce = supervised_term(&mut g2, &net, &p2, &labeled, &idx).unwrap();
    g2.backward(ce).unwrap();

    assert_eq!(
        g1.value(loss.total).item().unwrap().to_bits(),
        g2.value(ce).item().unwrap().to_bits()
    );
    let (a, b) = (net.params().grads(&g1, &p1), net.params().grads(&g2, &p2));
    for (x, y) in a.iter().zip(&b) {
        assert!(x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}

#[test]
fn identical_aligned_pairs_give_zero_discrepancy() {
    let net = tiny_unet();
    let (labeled, unlabeled) = toy_sets(2, 3, 3, 8);
    let same = UnlabeledSet::new(unlabeled.source().to_vec(), unlabeled.source().to_vec()).unwrap();
    let d = SquaredEuclidean;
    let cfg = LossConfig {
        lambda: 0.1,
        discrepancy: &d,
        transform: Transform::Identity,
        permutation: vec![0, 1, 2],
        batch_size: 3,
    };
    let mut g = Graph::new();
    let p = net.params().bind(&mut g, true);
    let loss = batch_loss(&mut g, &net, &p, &labeled, &same, &cfg, &mut BatchSampler::new(4)).unwrap();
    assert_eq!(g.value(loss.disc).item().unwrap(), 0.0);
}

#[test]
fn unsupervised_term_respects_bounds() {
    let net = tiny_unet();
    let (labeled, unlabeled) = toy_sets(3, 3, 3, 8);
    let reg = DiscrepancyRegistry::default();
    let pixels = (3 * 8 * 8) as f64;
    for name in ["sqeuclid", "kl", "bhattacharyya", "rbf", "product"] {
        let d = reg.build(name, &DiscrepancyParams::default()).unwrap();
        let cfg = LossConfig {
            lambda: 0.1,
            discrepancy: d.as_ref(),
            transform: Transform::Identity,
            permutation: vec![1, 2, 0],
            batch_size: 3,
        };
        let mut g = Graph::new();
        let p = net.params().bind(&mut g, false);
        let loss = batch_loss(&mut g, &net, &p, &labeled, &unlabeled, &cfg, &mut BatchSampler::new(1)).unwrap();
        let v = g.value(loss.disc).item().unwrap();
        if name == "sqeuclid" || name == "kl" {
            assert!(v >= 0.0, "{name}: {v}");
        } else {
            assert!(v >= -pixels && v < 0.0, "{name}: {v}");
        }
    }
}

#[test]
fn relabeling_unlabeled_storage_leaves_loss_unchanged() {
    let net = tiny_unet();
    let (labeled, unlabeled) = toy_sets(4, 5, 5, 8);
    let pi = vec![3, 0, 4, 1, 2];
    // New storage slot k holds old pair rho[k].
    let rho = [2, 4, 0, 1, 3];
    let mut rho_inv = [0; 5];
    for (k, &r) in rho.iter().enumerate() {
        rho_inv[r] = k;
    }
    let relabeled = UnlabeledSet::new(
        rho.iter().map(|&r| unlabeled.source()[r].clone()).collect(),
        rho.iter().map(|&r| unlabeled.target()[r].clone()).collect(),
    )
    .unwrap();
    let pi_new: Vec<usize> = rho.iter().map(|&r| rho_inv[pi[r]]).collect();

    let d = SquaredEuclidean;
    let eval = |set: &UnlabeledSet, perm: Vec<usize>| {
        let cfg = LossConfig {
            lambda: 0.1,
            discrepancy: &d,
            transform: Transform::Identity,
            permutation: perm,
            batch_size: 5,
        };
        let mut g = Graph::new();
        let p = net.params().bind(&mut g, false);
        let loss = batch_loss(&mut g, &net, &p, &labeled, set, &cfg, &mut BatchSampler::new(6)).unwrap();
        (g.value(loss.ce).item().unwrap(), g.value(loss.disc).item().unwrap())
    };
    let (ce_a, d_a) = eval(&unlabeled, pi);
    let (ce_b, d_b) = eval(&relabeled, pi_new);
    assert_eq!(ce_a, ce_b);
    assert!((d_a - d_b).abs() <= 1e-12 * d_a.abs().max(1.0), "{d_a} vs {d_b}");
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let net = tiny_unet();
    let (labeled, unlabeled) = toy_sets(5, 2, 2, 8);
    let reg = DiscrepancyRegistry::default();
    for name in ["sqeuclid", "kl"] {
        let d = reg.build(name, &DiscrepancyParams::default()).unwrap();
        let cfg = LossConfig {
            lambda: 0.1,
            discrepancy: d.as_ref(),
            transform: Transform::Identity,
            permutation: vec![1, 0],
            batch_size: 2,
        };
        let err = max_grad_error(
            &|g, p| {
                batch_loss(g, &net, p, &labeled, &unlabeled, &cfg, &mut BatchSampler::new(8))
                    .unwrap()
                    .total
            },
            net.params().values(),
        );
        assert!(err <= 1e-3, "{name}: {err:e}");
    }
}

#[test]
fn sampling_is_uniform_over_indices() {
    let mut r = rng(99);
    let mut hits = [0usize; 4];
    let draws = 10_000;
    for _ in 0..draws {
        let s = sample_without_replacement(&mut r, 4, 2).unwrap();
        assert_ne!(s[0], s[1]);
        for i in s {
            hits[i] += 1;
        }
    }
    for h in hits {
        let f = h as f64 / draws as f64;
        assert!((f - 0.5).abs() <= 0.02, "frequency {f}");
    }
}

#[test]
fn translation_round_trip_is_exact_inside_border() {
    let mut r = rng(7);
    let x = random_tensor(&mut r, &[1, 9, 7], 0.0, 1.0);
    let there = Transform::translation(2.0, 0.0).apply_image(&x).unwrap();
    let back = Transform::translation(-2.0, 0.0).apply_image(&there).unwrap();
    for row in 2..7 {
        for col in 0..7 {
            let k = row * 7 + col;
            assert!((back.data()[k] - x.data()[k]).abs() < 1e-15);
        }
    }
    // Content moves down by two rows.
    assert_eq!(there.data()[4 * 7 + 3], x.data()[2 * 7 + 3]);
    assert_eq!(Transform::Identity.apply_image(&x).unwrap(), x);
}

#[test]
fn quarter_turn_permutes_indices() {
    let n = 5;
    let x = img(&(0..n * n).map(|i| i as f64 / 24.0).collect::<Vec<_>>(), n, n);
    let rot = Transform::Affine {
        matrix: [[0.0, -1.0], [1.0, 0.0]],
        translation: [0.0, 0.0],
    };
    let y = rot.apply_image(&x).unwrap();
    for r in 0..n {
        for c in 0..n {
            assert_eq!(y.data()[r * n + c], x.data()[c * n + (n - 1 - r)]);
        }
    }
}
