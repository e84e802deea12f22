//! Pairwise discrepancy functions on probability-simplex vectors.
//!
//! Kernel-based choices are expressed as `D = -K`, so every implementation
//! is something to minimise. Each kernel provides a scalar evaluation with
//! a closed-form gradient and a graph form that sums `D` over every pixel
//! of two `[N, L, H, W]` probability maps (class axis 1).
//!
//! Kernels are looked up by name through [`DiscrepancyRegistry`].

use std::collections::BTreeMap;
use std::fmt::Debug;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Tolerance for accepting a vector as a point on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Numeric parameters shared by the kernel family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscrepancyParams {
    /// RBF width.
    pub sigma: f64,
    /// Probability-product exponent in `(0, 1]`.
    pub rho: f64,
    /// Clamp floor inside logarithms.
    pub epsilon: f64,
}

impl Default for DiscrepancyParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            rho: 0.5,
            epsilon: 1e-8,
        }
    }
}

impl DiscrepancyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// A pairwise discrepancy `D(s, s')`.
pub trait Discrepancy: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether `D(s, s') = D(s', s)`.
    fn is_symmetric(&self) -> bool;

    /// `D(s, s')` without input validation.
    fn value(&self, s: &[f64], t: &[f64]) -> f64;

    /// Closed-form `(dD/ds, dD/ds')`.
    fn gradient(&self, s: &[f64], t: &[f64]) -> (Vec<f64>, Vec<f64>);

    /// `sum over pixels of D(s(p), t(p))` for maps `[N, L, H, W]`.
    fn pixel_sum(&self, g: &mut Graph, s: Var, t: Var) -> Result<Var>;

    /// Validated evaluation on two simplex vectors.
    fn eval(&self, s: &[f64], t: &[f64]) -> Result<f64> {
        check_simplex(s)?;
        check_simplex(t)?;
        if s.len() != t.len() {
            return Err(Error::Shape(format!("simplex sizes {} vs {}", s.len(), t.len())));
        }
        let v = self.value(s, t);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: self.name(),
                index: 0,
            });
        }
        Ok(v)
    }
}

pub fn check_simplex(s: &[f64]) -> Result<()> {
    let total: f64 = s.iter().sum();
    if s.is_empty() || s.iter().any(|&v| v < -SIMPLEX_TOL || !v.is_finite()) || (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Invalid(format!("not a probability vector: {s:?}")));
    }
    Ok(())
}

fn same_shape(g: &Graph, s: Var, t: Var) -> Result<()> {
    if g.shape(s) != g.shape(t) || g.shape(s).len() < 2 {
        return Err(Error::Shape(format!(
            "discrepancy needs equal [N, L, ...] maps, got {:?} and {:?}",
            g.shape(s),
            g.shape(t)
        )));
    }
    Ok(())
}

/// `||s - s'||^2`.
#[derive(Clone, Debug, Default)]
pub struct SquaredEuclidean;

impl Discrepancy for SquaredEuclidean {
    fn name(&self) -> &'static str {
        "sqeuclid"
    }

    fn is_symmetric(&self) -> bool {
        true
    }

    fn value(&self, s: &[f64], t: &[f64]) -> f64 {
        s.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    fn gradient(&self, s: &[f64], t: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let ds: Vec<f64> = s.iter().zip(t).map(|(a, b)| 2.0 * (a - b)).collect();
        let dt = ds.iter().map(|v| -v).collect();
        (ds, dt)
    }

    fn pixel_sum(&self, g: &mut Graph, s: Var, t: Var) -> Result<Var> {
        same_shape(g, s, t)?;
        let d = g.sub(s, t)?;
        let sq = g.mul(d, d)?;
        g.sum(sq)
    }
}

/// `-sum_l sqrt(s_l s'_l)`: the negated Bhattacharyya coefficient.
#[derive(Clone, Debug, Default)]
pub struct Bhattacharyya;

impl Discrepancy for Bhattacharyya {
    fn name(&self) -> &'static str {
        "bhattacharyya"
    }

    fn is_symmetric(&self) -> bool {
        true
    }

    fn value(&self, s: &[f64], t: &[f64]) -> f64 {
        -s.iter().zip(t).map(|(a, b)| (a * b).sqrt()).sum::<f64>()
    }

    fn gradient(&self, s: &[f64], t: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let ds = s.iter().zip(t).map(|(a, b)| -0.5 * (b / a).sqrt()).collect();
        let dt = s.iter().zip(t).map(|(a, b)| -0.5 * (a / b).sqrt()).collect();
        (ds, dt)
    }

    fn pixel_sum(&self, g: &mut Graph, s: Var, t: Var) -> Result<Var> {
        same_shape(g, s, t)?;
        let p = g.mul(s, t)?;
        let r = g.sqrt(p)?;
        let k = g.sum(r)?;
        g.neg(k)
    }
}

/// `s^t ln(s / s')` with both ratio arguments clamped at `epsilon`.
#[derive(Clone, Debug)]
pub struct KlDivergence {
    pub epsilon: f64,
}

impl Discrepancy for KlDivergence {
    fn name(&self) -> &'static str {
        "kl"
    }

    fn is_symmetric(&self) -> bool {
        false
    }

    fn value(&self, s: &[f64], t: &[f64]) -> f64 {
        let e = self.epsilon;
        s.iter()
            .zip(t)
            .map(|(a, b)| a * (a.max(e) / b.max(e)).ln())
            .sum()
    }

    fn gradient(&self, s: &[f64], t: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let e = self.epsilon;
        let ds = s
            .iter()
            .zip(t)
            .map(|(&a, &b)| {
                let inner = if a > e { a / a.max(e) } else { 0.0 };
                (a.max(e) / b.max(e)).ln() + inner
            })
            .collect();
        let dt = s
            .iter()
            .zip(t)
            .map(|(&a, &b)| if b > e { -a / b } else { 0.0 })
            .collect();
        (ds, dt)
    }

    fn pixel_sum(&self, g: &mut Graph, s: Var, t: Var) -> Result<Var> {
        same_shape(g, s, t)?;
        let cs = g.clamp_min(s, self.epsilon)?;
        let ct = g.clamp_min(t, self.epsilon)?;
        let ratio = g.div(cs, ct)?;
        let log_ratio = g.log(ratio)?;
        let weighted = g.mul(s, log_ratio)?;
        g.sum(weighted)
    }
}

/// `-exp(-||s - s'||^2 / sigma)`.
#[derive(Clone, Debug)]
pub struct Rbf {
    pub sigma: f64,
}

impl Discrepancy for Rbf {
    fn name(&self) -> &'static str {
        "rbf"
    }

    fn is_symmetric(&self) -> bool {
        true
    }

    fn value(&self, s: &[f64], t: &[f64]) -> f64 {
        -(-SquaredEuclidean.value(s, t) / self.sigma).exp()
    }

    fn gradient(&self, s: &[f64], t: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = (-SquaredEuclidean.value(s, t) / self.sigma).exp();
        let ds: Vec<f64> = s
            .iter()
            .zip(t)
            .map(|(a, b)| k * 2.0 * (a - b) / self.sigma)
            .collect();
        let dt = ds.iter().map(|v| -v).collect();
        (ds, dt)
    }

    fn pixel_sum(&self, g: &mut Graph, s: Var, t: Var) -> Result<Var> {
        same_shape(g, s, t)?;
        let d = g.sub(s, t)?;
        let sq = g.mul(d, d)?;
        let per_pixel = g.sum_axis(sq, 1)?;
        let scaled = g.mul_scalar(per_pixel, -1.0 / self.sigma)?;
        let k = g.exp(scaled)?;
        let total = g.sum(k)?;
        g.neg(total)
    }
}

/// `-sum_l s_l^rho s'_l^rho`.
#[derive(Clone, Debug)]
pub struct ProbabilityProduct {
    pub rho: f64,
}

impl Discrepancy for ProbabilityProduct {
    fn name(&self) -> &'static str {
        "product"
    }

    fn is_symmetric(&self) -> bool {
        true
    }

    fn value(&self, s: &[f64], t: &[f64]) -> f64 {
        -s.iter()
            .zip(t)
            .map(|(a, b)| a.powf(self.rho) * b.powf(self.rho))
            .sum::<f64>()
    }

    fn gradient(&self, s: &[f64], t: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let r = self.rho;
        let ds = s
            .iter()
            .zip(t)
            .map(|(a, b)| -r * a.powf(r - 1.0) * b.powf(r))
            .collect();
        let dt = s
            .iter()
            .zip(t)
            .map(|(a, b)| -r * b.powf(r - 1.0) * a.powf(r))
            .collect();
        (ds, dt)
    }

    fn pixel_sum(&self, g: &mut Graph, s: Var, t: Var) -> Result<Var> {
        same_shape(g, s, t)?;
        let ps = g.pow(s, self.rho)?;
        let pt = g.pow(t, self.rho)?;
        let p = g.mul(ps, pt)?;
        let k = g.sum(p)?;
        g.neg(k)
    }
}

type Constructor = fn(&DiscrepancyParams) -> Box<dyn Discrepancy>;

/// Name-keyed table of discrepancy constructors.
pub struct DiscrepancyRegistry {
    entries: BTreeMap<&'static str, Constructor>,
}

impl Default for DiscrepancyRegistry {
    fn default() -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        r.register("sqeuclid", |_| Box::new(SquaredEuclidean));
        r.register("bhattacharyya", |_| Box::new(Bhattacharyya));
        r.register("kl", |p| Box::new(KlDivergence { epsilon: p.epsilon }));
        r.register("rbf", |p| Box::new(Rbf { sigma: p.sigma }));
        r.register("product", |p| Box::new(ProbabilityProduct { rho: p.rho }));
        r
    }
}

impl DiscrepancyRegistry {
    pub fn register(&mut self, name: &'static str, ctor: Constructor) {
        self.entries.insert(name, ctor);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }

    pub fn build(&self, name: &str, params: &DiscrepancyParams) -> Result<Box<dyn Discrepancy>> {
        params.validate()?;
        let ctor = self.entries.get(canonical_name(name)).ok_or_else(|| {
            Error::Config(format!(
                "unknown kernel '{name}' (known: {})",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        Ok(ctor(params))
    }
}

fn canonical_name(name: &str) -> &str {
    match name {
        "squared_euclidean" | "sq_euclidean" => "sqeuclid",
        "kl_divergence" => "kl",
        "probability_product" => "product",
        other => other,
    }
}

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub kernel: &'static str,
    pub pairs: usize,
    pub max_rel_err: f64,
    pub failures: usize,
}

/// Compares [`Discrepancy::gradient`] against central differences of
/// [`Discrepancy::value`] on seeded random simplex pairs whose entries are
/// kept at least `0.02` away from zero.
pub fn grad_check(d: &dyn Discrepancy, classes: usize, pairs: usize, tol: f64, seed: u64) -> GradCheckReport {
    const STEP: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..pairs {
        let s = random_simplex(&mut rng, classes, 0.02);
        let t = random_simplex(&mut rng, classes, 0.02);
        let (ds, dt) = d.gradient(&s, &t);
        let mut pair_worst: f64 = 0.0;
        for l in 0..classes {
            let fd = |which: usize| {
                let (mut sp, mut tp, mut sm, mut tm) = (s.clone(), t.clone(), s.clone(), t.clone());
                if which == 0 {
                    sp[l] += STEP;
                    sm[l] -= STEP;
                } else {
                    tp[l] += STEP;
                    tm[l] -= STEP;
                }
                (d.value(&sp, &tp) - d.value(&sm, &tm)) / (2.0 * STEP)
            };
            for (ana, num) in [(ds[l], fd(0)), (dt[l], fd(1))] {
                let err = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-3);
                pair_worst = pair_worst.max(err);
            }
        }
        if pair_worst > tol {
            failures += 1;
        }
        worst = worst.max(pair_worst);
    }
    GradCheckReport {
        kernel: d.name(),
        pairs,
        max_rel_err: worst,
        failures,
    }
}

/// Uniform-ish random point on the simplex with every entry at least
/// `floor / classes`-ish away from zero.
pub fn random_simplex(rng: &mut ChaCha8Rng, classes: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(floor..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}
