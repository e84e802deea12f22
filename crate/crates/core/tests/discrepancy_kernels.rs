//! Discrepancy kernels: minimum at identity, monotone separation, and the
//! pixel-summed graph form against both the scalar form and finite
//! differences.

mod common;

use common::{max_grad_error, random_tensor, rng};
use ddmseg::discrepancy::{Discrepancy, DiscrepancyParams, DiscrepancyRegistry};
use ddmseg::tensor::Graph;

fn kernel(name: &str) -> Box<dyn Discrepancy> {
    DiscrepancyRegistry::default()
        .build(name, &DiscrepancyParams::default())
        .unwrap()
}

fn mesh(step_count: usize) -> Vec<[f64; 3]> {
    let mut pts = Vec::new();
    for i in 0..=step_count {
        for j in 0..=step_count - i {
            let k = step_count - i - j;
            let n = step_count as f64;
            pts.push([i as f64 / n, j as f64 / n, k as f64 / n]);
        }
    }
    pts
}

#[test]
fn identity_is_the_grid_minimum() {
    let pts = mesh(20);
    for name in ["sqeuclid", "kl", "bhattacharyya", "rbf", "product"] {
        let d = kernel(name);
        for s in &pts {
            let at_self = d.eval(s, s).unwrap();
            for t in &pts {
                let v = d.eval(s, t).unwrap();
                assert!(v >= at_self - 1e-12, "{name}: D({s:?},{t:?}) = {v} < D(s,s) = {at_self}");
            }
        }
    }
}

#[test]
fn identity_values() {
    for s in mesh(20) {
        assert!(kernel("sqeuclid").eval(&s, &s).unwrap().abs() < 1e-15);
        assert!(kernel("kl").eval(&s, &s).unwrap().abs() < 1e-15);
        assert!((kernel("bhattacharyya").eval(&s, &s).unwrap() + 1.0).abs() < 1e-12);
        assert!((kernel("rbf").eval(&s, &s).unwrap() + 1.0).abs() < 1e-15);
    }
}

#[test]
fn separation_is_monotone_along_rays() {
    let s = [0.3, 0.5, 0.2];
    let vertices = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for name in ["sqeuclid", "rbf"] {
        let d = kernel(name);
        for v in &vertices {
            let mut prev = f64::NEG_INFINITY;
            for step in 0..=50 {
                let a = step as f64 / 50.0;
                let t: Vec<f64> = s.iter().zip(v).map(|(x, y)| x + a * (y - x)).collect();
                let val = d.eval(&s, &t).unwrap();
                assert!(val >= prev, "{name} decreased at alpha {a}");
                prev = val;
            }
        }
    }
}

#[test]
fn graph_form_matches_scalar_form() {
    let mut r = rng(5);
    let shape = [2, 3, 2, 2];
    let a = random_tensor(&mut r, &shape, -2.0, 2.0);
    let b = random_tensor(&mut r, &shape, -2.0, 2.0);
    for name in ["sqeuclid", "kl", "bhattacharyya", "rbf", "product"] {
        let d = kernel(name);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let (sa, sb) = (g.softmax(va, 1).unwrap(), g.softmax(vb, 1).unwrap());
        let total = d.pixel_sum(&mut g, sa, sb).unwrap();
        let (pa, pb) = (g.value(sa).clone(), g.value(sb).clone());
        let mut expected = 0.0;
        for n in 0..2 {
            for p in 0..4 {
                let pick = |t: &ddmseg::tensor::Tensor| -> Vec<f64> {
                    (0..3).map(|l| t.data()[n * 12 + l * 4 + p]).collect()
                };
                expected += d.eval(&pick(&pa), &pick(&pb)).unwrap();
            }
        }
        let got = g.value(total).item().unwrap();
        assert!((got - expected).abs() < 1e-12, "{name}: {got} vs {expected}");
    }
}

#[test]
fn graph_form_gradients_match_finite_differences() {
    let mut r = rng(17);
    let shape = [2, 3, 2, 2];
    let inputs = vec![
        random_tensor(&mut r, &shape, -2.0, 2.0),
        random_tensor(&mut r, &shape, -2.0, 2.0),
    ];
    for name in ["sqeuclid", "kl", "bhattacharyya", "rbf", "product"] {
        let d = kernel(name);
        let err = max_grad_error(
            &|g, v| {
                let sa = g.softmax(v[0], 1).unwrap();
                let sb = g.softmax(v[1], 1).unwrap();
                d.pixel_sum(g, sa, sb).unwrap()
            },
            &inputs,
        );
        assert!(err <= 1e-4, "{name}: {err:e}");
    }
}

#[test]
fn product_kernel_exponent_one_is_the_inner_product() {
    let reg = DiscrepancyRegistry::default();
    let params = DiscrepancyParams {
        rho: 1.0,
        ..Default::default()
    };
    let d = reg.build("product", &params).unwrap();
    let (s, t) = ([0.2, 0.3, 0.5], [0.1, 0.6, 0.3]);
    let dot: f64 = s.iter().zip(&t).map(|(a, b)| a * b).sum();
    assert!((d.eval(&s, &t).unwrap() + dot).abs() < 1e-15);
}
