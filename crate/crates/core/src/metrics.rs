//! Volumetric Dice scores.

use crate::data::{slice_z, LabelVolume, Volume};
use crate::error::{Error, Result};
use crate::nn::UNet;
use crate::tensor::Tensor;

/// `2|P ∩ T| / (|P| + |T|)` for one class over flat label arrays. Two empty
/// sets score 1.
pub fn dice_counts(pred: &[u8], truth: &[u8], class: u8) -> (f64, usize, usize) {
    let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let (ip, it) = (p == class, t == class);
        np += ip as usize;
        nt += it as usize;
        inter += (ip && it) as usize;
    }
    let d = if np + nt == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + nt) as f64
    };
    (d, np, nt)
}

pub fn dice(pred: &LabelVolume, truth: &LabelVolume, class: u8) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape(format!(
            "dice: prediction {:?} vs truth {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    Ok(dice_counts(pred.labels(), truth.labels(), class).0)
}

/// Dice per foreground class `1..L` and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    /// Entry `i` is class `i + 1`.
    pub per_class: Vec<f64>,
    pub mean: f64,
    pub predicted_voxels: Vec<usize>,
    pub truth_voxels: Vec<usize>,
}

impl DiceReport {
    pub fn compute(pred: &LabelVolume, truth: &LabelVolume, classes: usize) -> Result<Self> {
        if pred.dims() != truth.dims() {
            return Err(Error::Shape(format!(
                "dice: prediction {:?} vs truth {:?}",
                pred.dims(),
                truth.dims()
            )));
        }
        if classes < 2 {
            return Err(Error::Invalid("a dice report needs at least one foreground class".into()));
        }
        let mut per_class = Vec::with_capacity(classes - 1);
        let mut predicted_voxels = Vec::with_capacity(classes - 1);
        let mut truth_voxels = Vec::with_capacity(classes - 1);
        for c in 1..classes as u8 {
            let (d, np, nt) = dice_counts(pred.labels(), truth.labels(), c);
            per_class.push(d);
            predicted_voxels.push(np);
            truth_voxels.push(nt);
        }
        let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
        Ok(Self {
            per_class,
            mean,
            predicted_voxels,
            truth_voxels,
        })
    }
}

/// Anything that labels a stack of `[1, H, W]` slices.
pub trait Segmenter {
    /// Returns the per-slice argmax labels as a `(D, h, w)` volume where
    /// `(h, w)` is the prediction grid.
    fn segment(&self, slices: &[Tensor]) -> Result<LabelVolume>;

    fn num_classes(&self) -> usize;
}

/// Slices processed per inference graph.
const INFERENCE_CHUNK: usize = 8;

impl Segmenter for UNet {
    fn segment(&self, slices: &[Tensor]) -> Result<LabelVolume> {
        let (oh, ow) = self.output_size();
        let classes = self.config().num_classes;
        let mut labels = Vec::with_capacity(slices.len() * oh * ow);
        for chunk in slices.chunks(INFERENCE_CHUNK) {
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let probs = self.predict(&Tensor::stack(&refs)?)?;
            labels.extend(argmax_classes(&probs));
        }
        LabelVolume::new([slices.len(), oh, ow], labels, classes)
    }

    fn num_classes(&self) -> usize {
        self.config().num_classes
    }
}

/// Per-pixel argmax over axis 1 of `[N, L, H, W]`; ties go to the lower class.
pub fn argmax_classes(probs: &Tensor) -> Vec<u8> {
    let [n, l, h, w]: [usize; 4] = probs.shape().try_into().expect("rank-4 probabilities");
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for item in probs.data().chunks(l * hw) {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..l {
                if item[c * hw + p] > item[best * hw + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Center-crops every plane of `v` to `h × w`, using the same offsets as
/// the network's crop.
pub fn crop_labels(v: &LabelVolume, h: usize, w: usize) -> Result<LabelVolume> {
    let [d, ih, iw] = v.dims();
    if h > ih || w > iw {
        return Err(Error::Shape(format!("cannot crop {ih}x{iw} labels to {h}x{w}")));
    }
    if (h, w) == (ih, iw) {
        return Ok(v.clone());
    }
    let (top, left) = ((ih - h) / 2, (iw - w) / 2);
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        let plane = v.plane(z);
        for r in top..top + h {
            out.extend_from_slice(&plane[r * iw + left..r * iw + left + w]);
        }
    }
    LabelVolume::new([d, h, w], out, u8::MAX as usize + 1)
}

/// Segments every slice, stacks the predictions and scores them against
/// `truth`, cropped to the prediction grid when the network shrinks it.
pub fn evaluate_volume(net: &dyn Segmenter, volume: &Volume, truth: &LabelVolume) -> Result<DiceReport> {
    if volume.dims() != truth.dims() {
        return Err(Error::Shape(format!(
            "volume {:?} vs truth {:?}",
            volume.dims(),
            truth.dims()
        )));
    }
    let pred = net.segment(&slice_z(volume))?;
    let [_, h, w] = pred.dims();
    let truth = crop_labels(truth, h, w)?;
    DiceReport::compute(&pred, &truth, net.num_classes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(dims: [usize; 3], labels: Vec<u8>) -> LabelVolume {
        LabelVolume::new(dims, labels, 4).unwrap()
    }

    #[test]
    fn named_cases() {
        let a = lv([1, 2, 4], vec![1, 1, 1, 1, 0, 0, 0, 0]);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        let b = lv([1, 2, 4], vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
        let c = lv([1, 2, 4], vec![1, 1, 0, 0, 1, 1, 0, 0]);
        assert_eq!(dice(&a, &c, 1).unwrap(), 0.5);
        assert_eq!(dice(&a, &c, 3).unwrap(), 1.0);
        assert!(dice(&a, &lv([1, 1, 8], vec![0; 8]), 1).is_err());
    }

    #[test]
    fn report_means_foreground_classes() {
        let t = lv([1, 1, 4], vec![1, 2, 3, 0]);
        let p = lv([1, 1, 4], vec![1, 2, 0, 0]);
        let r = DiceReport::compute(&p, &t, 4).unwrap();
        assert_eq!(r.per_class, vec![1.0, 1.0, 0.0]);
        assert!((r.mean - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.truth_voxels, vec![1, 1, 1]);
        assert_eq!(r.predicted_voxels, vec![1, 1, 0]);
    }

    #[test]
    fn argmax_prefers_lower_class_on_ties() {
        let probs = Tensor::new(vec![1, 3, 1, 2], vec![0.4, 0.2, 0.4, 0.3, 0.2, 0.5]).unwrap();
        assert_eq!(argmax_classes(&probs), vec![0, 2]);
    }

    #[test]
    fn crop_matches_center_offsets() {
        let v = lv([1, 4, 4], (0..16).map(|i| (i % 4) as u8).collect());
        let c = crop_labels(&v, 2, 2).unwrap();
        assert_eq!(c.labels(), &[1, 2, 1, 2]);
    }
}
