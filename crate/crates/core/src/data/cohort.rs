//! Seeded two-modality phantom cohorts.
//!
//! Each subject is a stack of nested blobs: a WM core inside a GM band
//! inside a CSF ring. Every boundary is a circle deformed by random angular
//! harmonics whose phases drift with depth, and the whole shape is jittered
//! and rescaled per subject. Both modalities render the same label volume
//! through their own class-to-intensity table, so they are voxel-aligned
//! unless `misalignment` shifts the B rendering.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabelVolume, Modality, Volume, BACKGROUND, CSF, GM, NUM_CLASSES, WM};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CohortSpec {
    pub subjects: usize,
    /// `(D, H, W)`.
    pub dims: [usize; 3],
    /// Mean intensity per class index (bg, GM, WM, CSF) for modality A.
    pub table_a: [f64; NUM_CLASSES],
    pub table_b: [f64; NUM_CLASSES],
    pub noise_std: f64,
    /// Relative amplitude of the boundary harmonics.
    pub deformation: f64,
    /// Highest angular harmonic; lower values give smoother shapes.
    pub max_harmonic: usize,
    /// Per-subject centre jitter as a fraction of the image side.
    pub center_jitter: f64,
    /// Maximum in-plane shift in pixels of the B rendering.
    pub misalignment: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            subjects: 8,
            dims: [16, 64, 64],
            table_a: [0.05, 0.45, 0.7, 0.9],
            table_b: [0.05, 0.75, 0.25, 0.35],
            noise_std: 0.05,
            deformation: 0.35,
            max_harmonic: 4,
            center_jitter: 0.12,
            misalignment: 0.0,
            seed: 2019,
        }
    }
}

fn tissue_order(table: &[f64; NUM_CLASSES]) -> Vec<u8> {
    let mut order = vec![GM, WM, CSF];
    order.sort_by(|a, b| table[*a as usize].total_cmp(&table[*b as usize]));
    order
}

impl CohortSpec {
    pub fn table(&self, m: Modality) -> &[f64; NUM_CLASSES] {
        match m {
            Modality::A => &self.table_a,
            Modality::B => &self.table_b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [d, h, w] = self.dims;
        if self.subjects == 0 || d == 0 || h < 8 || w < 8 {
            return Err(Error::Config(format!(
                "cohort needs at least one subject and 1x8x8 volumes, got {} subjects of {:?}",
                self.subjects, self.dims
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        if !(0.0..0.5).contains(&self.deformation) || self.max_harmonic < 2 {
            return Err(Error::Config(
                "deformation must lie in [0, 0.5) and max_harmonic be at least 2".into(),
            ));
        }
        if !(0.0..0.25).contains(&self.center_jitter) || !(self.misalignment >= 0.0) {
            return Err(Error::Config("center_jitter must lie in [0, 0.25), misalignment >= 0".into()));
        }
        for m in [Modality::A, Modality::B] {
            let t = self.table(m);
            if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config(format!("modality {} table outside [0, 1]", m.name())));
            }
            for i in 0..NUM_CLASSES {
                for j in i + 1..NUM_CLASSES {
                    // Small slack so that a gap of exactly twice the noise passes.
                    if (t[i] - t[j]).abs() < 2.0 * self.noise_std - 1e-12 {
                        return Err(Error::Config(format!(
                            "modality {} classes {i} and {j} closer than twice the noise std",
                            m.name()
                        )));
                    }
                }
            }
        }
        if tissue_order(&self.table_a) == tissue_order(&self.table_b) {
            return Err(Error::Config(
                "tissue intensity order must differ between modalities".into(),
            ));
        }
        Ok(())
    }
}

/// One subject: two renderings and the label volume behind each.
#[derive(Clone, Debug)]
pub struct Subject {
    pub id: usize,
    pub a: Volume,
    pub b: Volume,
    pub labels_a: LabelVolume,
    pub labels_b: LabelVolume,
}

impl Subject {
    pub fn image(&self, m: Modality) -> &Volume {
        match m {
            Modality::A => &self.a,
            Modality::B => &self.b,
        }
    }

    pub fn truth(&self, m: Modality) -> &LabelVolume {
        match m {
            Modality::A => &self.labels_a,
            Modality::B => &self.labels_b,
        }
    }
}

/// Closed boundary `r(theta, z) = base * (1 + sum_k a_k cos(k theta + phi_k + omega_k z))`.
struct Boundary {
    terms: Vec<(f64, f64, f64, f64)>,
}

impl Boundary {
    fn draw(rng: &mut ChaCha8Rng, spec: &CohortSpec) -> Self {
        let terms = (2..=spec.max_harmonic)
            .map(|k| {
                let amp = rng.random_range(0.0..=1.0) * spec.deformation / (k - 1) as f64;
                let phase = rng.random_range(0.0..2.0 * PI);
                let drift = rng.random_range(-1.5..1.5);
                (k as f64, amp, phase, drift)
            })
            .collect();
        Self { terms }
    }

    fn factor(&self, theta: f64, zrel: f64) -> f64 {
        1.0 + self
            .terms
            .iter()
            .map(|&(k, a, p, o)| a * (k * theta + p + o * zrel).cos())
            .sum::<f64>()
    }
}

struct Geometry {
    center: (f64, f64),
    scale: f64,
    core: Boundary,
    band: Boundary,
    ring: Boundary,
}

impl Geometry {
    fn draw(rng: &mut ChaCha8Rng, spec: &CohortSpec) -> Self {
        let [_, h, w] = spec.dims;
        let j = spec.center_jitter;
        let cy = (h as f64 - 1.0) / 2.0 + rng.random_range(-j..=j) * h as f64;
        let cx = (w as f64 - 1.0) / 2.0 + rng.random_range(-j..=j) * w as f64;
        Self {
            center: (cy, cx),
            scale: rng.random_range(0.85..1.15),
            core: Boundary::draw(rng, spec),
            band: Boundary::draw(rng, spec),
            ring: Boundary::draw(rng, spec),
        }
    }

    fn render(&self, dims: [usize; 3], shift: (f64, f64)) -> Vec<u8> {
        let [d, h, w] = dims;
        let radius = h.min(w) as f64 / 2.0 * self.scale;
        let mut out = Vec::with_capacity(d * h * w);
        for z in 0..d {
            let zrel = (z as f64 - (d as f64 - 1.0) / 2.0) / d as f64;
            let zfac = (1.0 - (1.2 * zrel).powi(2)).max(0.1).sqrt();
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 - self.center.0 - shift.0;
                    let dx = x as f64 - self.center.1 - shift.1;
                    let r = (dy * dy + dx * dx).sqrt();
                    let theta = dy.atan2(dx);
                    let r_core = 0.36 * radius * zfac * self.core.factor(theta, zrel);
                    let r_band = r_core + 0.22 * radius * zfac * self.band.factor(theta, zrel);
                    let r_ring = r_band + 0.16 * radius * self.ring.factor(theta, zrel);
                    out.push(if r < r_core {
                        WM
                    } else if r < r_band {
                        GM
                    } else if r < r_ring {
                        CSF
                    } else {
                        BACKGROUND
                    });
                }
            }
        }
        out
    }
}

fn render_intensity(
    labels: &LabelVolume,
    table: &[f64; NUM_CLASSES],
    noise: Option<&Normal<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<Volume> {
    let data = labels
        .labels()
        .iter()
        .map(|&l| {
            let base = table[l as usize];
            match noise {
                Some(n) => (base + n.sample(rng)).clamp(0.0, 1.0),
                None => base,
            }
        })
        .collect();
    Volume::new(labels.dims(), data)
}

fn generate_subject(spec: &CohortSpec, id: usize) -> Result<Subject> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(id as u64 + 1);
    let geom = Geometry::draw(&mut rng, spec);
    let labels_a = LabelVolume::new(spec.dims, geom.render(spec.dims, (0.0, 0.0)), NUM_CLASSES)?;
    let labels_b = if spec.misalignment > 0.0 {
        let m = spec.misalignment;
        let shift = (
            rng.random_range(-m..=m).round(),
            rng.random_range(-m..=m).round(),
        );
        LabelVolume::new(spec.dims, geom.render(spec.dims, shift), NUM_CLASSES)?
    } else {
        labels_a.clone()
    };
    let noise = if spec.noise_std > 0.0 {
        Some(Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let a = render_intensity(&labels_a, &spec.table_a, noise.as_ref(), &mut rng)?;
    let b = render_intensity(&labels_b, &spec.table_b, noise.as_ref(), &mut rng)?;
    Ok(Subject {
        id,
        a,
        b,
        labels_a,
        labels_b,
    })
}

/// Renders every subject of the cohort. Subject `i` draws from its own
/// stream of the master seed, so subjects are independent of each other
/// and of the subject count.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<Subject>> {
    spec.validate()?;
    (0..spec.subjects).map(|i| generate_subject(spec, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CohortSpec {
        CohortSpec {
            subjects: 3,
            dims: [4, 24, 24],
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_rendering_is_piecewise_constant() {
        let spec = CohortSpec {
            noise_std: 0.0,
            ..small()
        };
        for s in generate_cohort(&spec).unwrap() {
            for (m, vol) in [(Modality::A, &s.a), (Modality::B, &s.b)] {
                for (v, &l) in vol.data().iter().zip(s.labels_a.labels()) {
                    assert_eq!(*v, spec.table(m)[l as usize]);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_all_classes_appear() {
        let a = generate_cohort(&small()).unwrap();
        let b = generate_cohort(&small()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.a, y.a);
            assert_eq!(x.b, y.b);
            assert_eq!(x.labels_a, y.labels_a);
            for c in 0..NUM_CLASSES as u8 {
                assert!(x.labels_a.count(c) > 0, "class {c} missing");
            }
            assert!(x.a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn misalignment_shifts_only_modality_b() {
        let spec = CohortSpec {
            misalignment: 3.0,
            ..small()
        };
        let subjects = generate_cohort(&spec).unwrap();
        assert!(subjects.iter().any(|s| s.labels_a != s.labels_b));
        let plain = generate_cohort(&small()).unwrap();
        assert_eq!(plain[0].labels_a, subjects[0].labels_a);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small();
        spec.noise_std = 0.2;
        assert!(generate_cohort(&spec).is_err());
        let mut spec = small();
        spec.table_b = spec.table_a;
        assert!(generate_cohort(&spec).is_err());
        let mut spec = small();
        spec.subjects = 0;
        assert!(generate_cohort(&spec).is_err());
    }
}
