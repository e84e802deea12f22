//! Volumes, label volumes, synthetic cohorts and slice-level plumbing.

mod cohort;
mod ddmv;

pub use cohort::{generate_cohort, CohortSpec, Subject};
pub use ddmv::{read_labels, read_volume, write_labels, write_volume, DDMV_HEADER_LEN};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class indices used throughout. The tissue order matches the CSV columns.
pub const BACKGROUND: u8 = 0;
pub const GM: u8 = 1;
pub const WM: u8 = 2;
pub const CSF: u8 = 3;
pub const NUM_CLASSES: usize = 4;

/// The two imaging modalities of the synthetic cohort.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    A,
    B,
}

impl Modality {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Modality::A),
            "B" | "b" => Ok(Modality::B),
            other => Err(Error::Config(format!("unknown modality '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::A => "A",
            Modality::B => "B",
        }
    }

    pub fn other(self) -> Self {
        match self {
            Modality::A => Modality::B,
            Modality::B => Modality::A,
        }
    }
}

fn check_dims(dims: [usize; 3], len: usize) -> Result<()> {
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| if d == 0 { None } else { acc.checked_mul(d) });
    match n {
        Some(n) if n == len => Ok(()),
        _ => Err(Error::Shape(format!("volume dims {dims:?} do not match {len} voxels"))),
    }
}

/// Intensity volume `(D, H, W)`, row-major with W fastest, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        check_dims(dims, data.len())?;
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid(format!(
                "intensity {} at voxel {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, z: usize) -> &[f64] {
        let n = self.dims[1] * self.dims[2];
        &self.data[z * n..(z + 1) * n]
    }
}

/// Per-voxel class labels with the same layout as [`Volume`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: [usize; 3],
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], labels: Vec<u8>, classes: usize) -> Result<Self> {
        check_dims(dims, labels.len())?;
        if let Some(i) = labels.iter().position(|&l| l as usize >= classes) {
            return Err(Error::Invalid(format!(
                "label {} at voxel {i} is not below {classes}",
                labels[i]
            )));
        }
        Ok(Self { dims, labels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn plane(&self, z: usize) -> &[u8] {
        let n = self.dims[1] * self.dims[2];
        &self.labels[z * n..(z + 1) * n]
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

/// Splits a volume into its `D` axial slices, each a `[1, H, W]` image.
pub fn slice_z(v: &Volume) -> Vec<Tensor> {
    let [d, h, w] = v.dims;
    (0..d)
        .map(|z| Tensor::new(vec![1, h, w], v.plane(z).to_vec()).expect("slice shape"))
        .collect()
}

/// Inverse of [`slice_z`].
pub fn stack(slices: &[Tensor]) -> Result<Volume> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Shape("stack of zero slices".into()))?;
    let (h, w) = match first.shape() {
        [1, h, w] => (*h, *w),
        other => return Err(Error::Shape(format!("slices must be [1, H, W], got {other:?}"))),
    };
    let mut data = Vec::with_capacity(slices.len() * h * w);
    for s in slices {
        if s.shape() != first.shape() {
            return Err(Error::Shape(format!("slice {:?} vs {:?}", s.shape(), first.shape())));
        }
        data.extend_from_slice(s.data());
    }
    Volume::new([slices.len(), h, w], data)
}

/// Pairing between unlabeled source and target images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alignment {
    Aligned,
    Shuffled,
}

impl Alignment {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "aligned" | "identity" => Ok(Alignment::Aligned),
            "shuffled" => Ok(Alignment::Shuffled),
            other => Err(Error::Config(format!("unknown alignment '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Alignment::Aligned => "aligned",
            Alignment::Shuffled => "shuffled",
        }
    }
}

/// Zero-based permutation of `0..m`. Shuffled mode never returns the
/// identity when `m >= 2`.
pub fn make_permutation(mode: Alignment, m: usize, seed: u64) -> Vec<usize> {
    let mut pi: Vec<usize> = (0..m).collect();
    if mode == Alignment::Shuffled && m >= 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            pi.shuffle(&mut rng);
            if pi.iter().enumerate().any(|(i, &p)| i != p) {
                break;
            }
        }
    }
    pi
}
