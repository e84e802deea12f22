//! The joint objective: summed cross-entropy on a labeled batch plus `λ`
//! times a pixel-summed discrepancy between the network's outputs on paired
//! source and target images.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{slice_z, LabelVolume, Volume};
use crate::discrepancy::Discrepancy;
use crate::error::{Error, Result};
use crate::nn::UNet;
use crate::tensor::{Graph, Tensor, Var};

/// Floor applied to probabilities inside the cross-entropy logarithm.
pub const CE_EPSILON: f64 = 1e-12;

/// A network mapping `[N, C, H, W]` images to `[N, L, h, w]` probabilities.
pub trait ProbabilityModel {
    fn probabilities(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var>;
}

impl ProbabilityModel for UNet {
    fn probabilities(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        self.forward(g, params, x)
    }
}

/// `H(y, s) = -y^t ln s` for a one-hot `y`.
pub fn cross_entropy(y: &[f64], s: &[f64]) -> Result<f64> {
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    if y.len() != s.len() || ones != 1 || y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Invalid(format!("not a one-hot target of length {}: {y:?}", s.len())));
    }
    let class = y.iter().position(|&v| v == 1.0).expect("one entry set");
    Ok(-s[class].max(CE_EPSILON).ln())
}

/// Labeled images `[C, H, W]` with per-pixel classes of size `H × W`.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    images: Vec<Tensor>,
    labels: Vec<Vec<u8>>,
    classes: usize,
}

impl LabeledSet {
    pub fn new(images: Vec<Tensor>, labels: Vec<Vec<u8>>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::Invalid(format!(
                "labeled set needs matching non-empty lists, got {} images and {} label maps",
                images.len(),
                labels.len()
            )));
        }
        let shape = images[0].shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("labeled images must be [C, H, W], got {shape:?}")));
        }
        for (img, lab) in images.iter().zip(&labels) {
            if img.shape() != shape.as_slice() || lab.len() != shape[1] * shape[2] {
                return Err(Error::Shape("labeled images and label maps differ in size".into()));
            }
            if lab.iter().any(|&l| l as usize >= classes) {
                return Err(Error::Invalid(format!("label outside 0..{classes}")));
            }
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    /// Every axial slice of every `(image, labels)` pair.
    pub fn from_volumes(pairs: &[(&Volume, &LabelVolume)], classes: usize) -> Result<Self> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (v, l) in pairs {
            if v.dims() != l.dims() {
                return Err(Error::Shape(format!("volume {:?} vs labels {:?}", v.dims(), l.dims())));
            }
            images.extend(slice_z(v));
            labels.extend((0..l.dims()[0]).map(|z| l.plane(z).to_vec()));
        }
        Self::new(images, labels, classes)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> &[Vec<u8>] {
        &self.labels
    }
}

/// Paired source-modality and target-modality images.
#[derive(Clone, Debug)]
pub struct UnlabeledSet {
    source: Vec<Tensor>,
    target: Vec<Tensor>,
}

impl UnlabeledSet {
    pub fn new(source: Vec<Tensor>, target: Vec<Tensor>) -> Result<Self> {
        if source.len() != target.len() || source.is_empty() {
            return Err(Error::Invalid(format!(
                "unlabeled set needs equally long non-empty halves, got {} and {}",
                source.len(),
                target.len()
            )));
        }
        Ok(Self { source, target })
    }

    pub fn from_volumes(pairs: &[(&Volume, &Volume)]) -> Result<Self> {
        let mut source = Vec::new();
        let mut target = Vec::new();
        for (s, t) in pairs {
            source.extend(slice_z(s));
            target.extend(slice_z(t));
        }
        Self::new(source, target)
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn source(&self) -> &[Tensor] {
        &self.source
    }

    pub fn target(&self) -> &[Tensor] {
        &self.target
    }
}

/// In-plane geometric transform applied to target images before pairing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    Identity,
    /// Maps position `y` to `matrix · (y - c) + c + translation` with `c`
    /// the slice centre; coordinates are `(row, col)`.
    Affine {
        matrix: [[f64; 2]; 2],
        translation: [f64; 2],
    },
}

impl Transform {
    pub fn translation(dy: f64, dx: f64) -> Self {
        Transform::Affine {
            matrix: [[1.0, 0.0], [0.0, 1.0]],
            translation: [dy, dx],
        }
    }

    fn inverse_matrix(matrix: &[[f64; 2]; 2]) -> Result<[[f64; 2]; 2]> {
        let det = matrix[0][0] * matrix[1][1] - matrix[0][1] * matrix[1][0];
        if !(det.abs() > 1e-12) {
            return Err(Error::Invalid(format!("singular affine transform (det {det})")));
        }
        Ok([
            [matrix[1][1] / det, -matrix[0][1] / det],
            [-matrix[1][0] / det, matrix[0][0] / det],
        ])
    }

    /// Resamples a `[C, H, W]` image with bilinear interpolation and border
    /// replication.
    pub fn apply_image(&self, img: &Tensor) -> Result<Tensor> {
        let (matrix, translation) = match self {
            Transform::Identity => return Ok(img.clone()),
            Transform::Affine { matrix, translation } => (matrix, translation),
        };
        let inv = Self::inverse_matrix(matrix)?;
        let [c, h, w]: [usize; 3] = img
            .shape()
            .try_into()
            .map_err(|_| Error::Shape(format!("transform expects [C, H, W], got {:?}", img.shape())))?;
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let mut out = Vec::with_capacity(c * h * w);
        for plane in img.data().chunks(h * w) {
            let at = |r: usize, col: usize| plane[r * w + col];
            for r in 0..h {
                for col in 0..w {
                    let oy = r as f64 - cy - translation[0];
                    let ox = col as f64 - cx - translation[1];
                    let sy = (inv[0][0] * oy + inv[0][1] * ox + cy).clamp(0.0, (h - 1) as f64);
                    let sx = (inv[1][0] * oy + inv[1][1] * ox + cx).clamp(0.0, (w - 1) as f64);
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    out.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        Tensor::new(img.shape().to_vec(), out)
    }
}

/// Applies `t` to every axial slice of `v`.
pub fn apply_transform(t: &Transform, v: &Volume) -> Result<Volume> {
    if *t == Transform::Identity {
        return Ok(v.clone());
    }
    let slices = slice_z(v)
        .iter()
        .map(|s| t.apply_image(s))
        .collect::<Result<Vec<_>>>()?;
    crate::data::stack(&slices)
}

/// Uniformly random `count`-subset of `0..k_max`, in random order.
pub fn sample_without_replacement(rng: &mut ChaCha8Rng, k_max: usize, count: usize) -> Result<Vec<usize>> {
    if count > k_max || count == 0 {
        return Err(Error::Invalid(format!(
            "cannot draw {count} distinct indices from {k_max}"
        )));
    }
    Ok(index::sample(rng, k_max, count).into_vec())
}

/// Independent index streams for the labeled and unlabeled batches, so that
/// the labeled draws do not depend on whether an unlabeled batch is drawn.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    labeled: ChaCha8Rng,
    unlabeled: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(seed: u64) -> Self {
        let mut labeled = ChaCha8Rng::seed_from_u64(seed);
        labeled.set_stream(1);
        let mut unlabeled = ChaCha8Rng::seed_from_u64(seed);
        unlabeled.set_stream(2);
        Self { labeled, unlabeled }
    }

    pub fn labeled(&mut self, n: usize, t: usize) -> Result<Vec<usize>> {
        sample_without_replacement(&mut self.labeled, n, t)
    }

    pub fn unlabeled(&mut self, m: usize, t: usize) -> Result<Vec<usize>> {
        sample_without_replacement(&mut self.unlabeled, m, t)
    }
}

pub struct LossConfig<'a> {
    pub lambda: f64,
    pub discrepancy: &'a dyn Discrepancy,
    pub transform: Transform,
    /// Zero-based pairing `π` of unlabeled source index to target index.
    pub permutation: Vec<usize>,
    pub batch_size: usize,
}

impl LossConfig<'_> {
    pub fn validate(&self, m: usize) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        let mut seen = vec![false; m];
        let bijective = self.permutation.len() == m
            && self
                .permutation
                .iter()
                .all(|&p| p < m && !std::mem::replace(&mut seen[p], true));
        if !bijective {
            return Err(Error::Config(format!("permutation is not a bijection on 0..{m}")));
        }
        Ok(())
    }
}

/// Graph nodes of one batch loss.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    /// Summed cross-entropy over the labeled batch.
    pub ce: Var,
    /// Unweighted pixel-summed discrepancy over the unlabeled batch.
    pub disc: Var,
}

/// Centre crop of a row-major `h × w` label map.
fn crop_plane(labels: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Result<Vec<u8>> {
    if oh > h || ow > w {
        return Err(Error::Shape(format!("prediction grid {oh}x{ow} exceeds labels {h}x{w}")));
    }
    let (top, left) = ((h - oh) / 2, (w - ow) / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for r in top..top + oh {
        out.extend_from_slice(&labels[r * w + left..r * w + left + ow]);
    }
    Ok(out)
}

/// Summed cross-entropy of probabilities `[N, L, h, w]` against label maps
/// of the labeled images, centre-cropped to the prediction grid.
pub fn cross_entropy_sum(g: &mut Graph, probs: Var, labels: &[&[u8]], label_hw: (usize, usize)) -> Result<Var> {
    let [n, l, oh, ow]: [usize; 4] = g
        .shape(probs)
        .try_into()
        .map_err(|_| Error::Shape("probabilities must be rank 4".into()))?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} label maps for a batch of {n}", labels.len())));
    }
    let mut onehot = vec![0.0; n * l * oh * ow];
    for (i, lab) in labels.iter().enumerate() {
        let cropped = crop_plane(lab, label_hw.0, label_hw.1, oh, ow)?;
        for (p, &c) in cropped.iter().enumerate() {
            if c as usize >= l {
                return Err(Error::Invalid(format!("label {c} outside 0..{l}")));
            }
            onehot[(i * l + c as usize) * oh * ow + p] = 1.0;
        }
    }
    let y = g.constant(Tensor::new(vec![n, l, oh, ow], onehot)?);
    let clamped = g.clamp_min(probs, CE_EPSILON)?;
    let logs = g.log(clamped)?;
    let picked = g.mul(y, logs)?;
    let total = g.sum(picked)?;
    g.neg(total)
}

/// Cross-entropy over the labeled images at `indices`.
pub fn supervised_term(
    g: &mut Graph,
    net: &dyn ProbabilityModel,
    params: &[Var],
    labeled: &LabeledSet,
    indices: &[usize],
) -> Result<Var> {
    let imgs: Vec<&Tensor> = indices.iter().map(|&i| &labeled.images[i]).collect();
    let x = g.constant(Tensor::stack(&imgs)?);
    let probs = net.probabilities(g, params, x)?;
    let labels: Vec<&[u8]> = indices.iter().map(|&i| labeled.labels[i].as_slice()).collect();
    let shape = labeled.images[0].shape();
    cross_entropy_sum(g, probs, &labels, (shape[1], shape[2]))
}

/// Network outputs on the unlabeled pairs at `indices`: source images as
/// stored, target images `T(X'_{π(i)})`.
pub fn paired_outputs(
    g: &mut Graph,
    net: &dyn ProbabilityModel,
    params: &[Var],
    unlabeled: &UnlabeledSet,
    cfg: &LossConfig<'_>,
    indices: &[usize],
) -> Result<(Var, Var)> {
    let src: Vec<&Tensor> = indices.iter().map(|&i| &unlabeled.source[i]).collect();
    let tgt = indices
        .iter()
        .map(|&i| cfg.transform.apply_image(&unlabeled.target[cfg.permutation[i]]))
        .collect::<Result<Vec<_>>>()?;
    let src = Tensor::stack(&src)?;
    let tgt = Tensor::stack(&tgt.iter().collect::<Vec<_>>())?;
    if src.shape() != tgt.shape() {
        return Err(Error::Shape(format!(
            "source batch {:?} vs transformed target batch {:?}",
            src.shape(),
            tgt.shape()
        )));
    }
    let xs = g.constant(src);
    let xt = g.constant(tgt);
    let s_src = net.probabilities(g, params, xs)?;
    let s_tgt = net.probabilities(g, params, xt)?;
    Ok((s_src, s_tgt))
}

/// One stochastic estimate of the joint loss over a random labeled batch
/// and a random batch of unlabeled pairs, both of size `t`.
pub fn batch_loss(
    g: &mut Graph,
    net: &dyn ProbabilityModel,
    params: &[Var],
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    cfg: &LossConfig<'_>,
    sampler: &mut BatchSampler,
) -> Result<BatchLoss> {
    cfg.validate(unlabeled.len())?;
    let i0 = sampler.labeled(labeled.len(), cfg.batch_size)?;
    let i1 = sampler.unlabeled(unlabeled.len(), cfg.batch_size)?;
    let ce = supervised_term(g, net, params, labeled, &i0)?;
    let (s_src, s_tgt) = paired_outputs(g, net, params, unlabeled, cfg, &i1)?;
    let disc = cfg.discrepancy.pixel_sum(g, s_src, s_tgt)?;
    let weighted = g.mul_scalar(disc, cfg.lambda)?;
    let total = g.add(ce, weighted)?;
    Ok(BatchLoss { total, ce, disc })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_examples() {
        let v = cross_entropy(&[1.0, 0.0, 0.0], &[0.5, 0.25, 0.25]).unwrap();
        assert!((v - 0.5f64.ln().abs()).abs() < 1e-15);
        let v = cross_entropy(&[0.0, 1.0, 0.0], &[1.0 / 3.0; 3]).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[0.0, 1.0], &[1.0 - 1e-15, 1e-15]).unwrap() == -CE_EPSILON.ln());
        assert!(cross_entropy(&[1.0, 0.0], &[1.0, 0.0]).unwrap().abs() < 1e-15);
        assert!(cross_entropy(&[0.5, 0.5], &[0.5, 0.5]).is_err());
        assert!(cross_entropy(&[1.0, 1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn sampling_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut all = sample_without_replacement(&mut rng, 5, 5).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert_eq!(sample_without_replacement(&mut rng, 1, 1).unwrap(), vec![0]);
        assert!(sample_without_replacement(&mut rng, 2, 3).is_err());
    }

    #[test]
    fn singular_affine_is_rejected() {
        let t = Transform::Affine {
            matrix: [[1.0, 2.0], [2.0, 4.0]],
            translation: [0.0, 0.0],
        };
        assert!(t.apply_image(&Tensor::zeros(&[1, 3, 3])).is_err());
    }

    #[test]
    fn permutation_must_be_bijective() {
        let d = crate::discrepancy::SquaredEuclidean;
        let mut cfg = LossConfig {
            lambda: 0.1,
            discrepancy: &d,
            transform: Transform::Identity,
            permutation: vec![0, 0, 2],
            batch_size: 1,
        };
        assert!(cfg.validate(3).is_err());
        cfg.permutation = vec![2, 0, 1];
        assert!(cfg.validate(3).is_ok());
        cfg.lambda = -1.0;
        assert!(cfg.validate(3).is_err());
    }
}
