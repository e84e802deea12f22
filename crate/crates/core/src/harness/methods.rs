//! Training methods, each selectable by name through [`MethodRegistry`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::time::Instant;

use crate::data::{slice_z, Modality, Subject, NUM_CLASSES};
use crate::ddmloss::{
    batch_loss, cross_entropy_sum, supervised_term, BatchSampler, LabeledSet, LossConfig, UnlabeledSet,
};
use crate::discrepancy::DiscrepancyRegistry;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_volume, DiceReport};
use crate::nn::{Adam, Discriminator, DiscriminatorConfig, UNet, UNetConfig};
use crate::tensor::{Graph, Tensor};

use super::config::ExperimentConfig;
use super::records::RunRecord;

/// Probability within which a discriminator output counts as saturated.
pub const COLLAPSE_TOL: f64 = 1e-6;
/// Consecutive saturated evaluations that raise a collapse warning.
pub const COLLAPSE_PATIENCE: usize = 3;

/// SplitMix64 over `base` and `parts`, used to derive independent seeds.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x = x.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

/// One training run on one leave-one-out fold.
pub struct Job<'a> {
    pub cfg: &'a ExperimentConfig,
    pub subjects: &'a [Subject],
    pub run: usize,
    /// Index of the held-out subject.
    pub fold: usize,
}

impl Job<'_> {
    pub fn unet_config(&self) -> UNetConfig {
        unet_config(self.cfg)
    }

    /// Segmenter initialisation shared by every method for this run and fold.
    pub fn init_seed(&self) -> u64 {
        derive_seed(self.cfg.seed, &[self.run as u64, self.fold as u64, 0])
    }

    pub fn sampler(&self) -> BatchSampler {
        BatchSampler::new(derive_seed(self.cfg.seed, &[self.run as u64, self.fold as u64, 1]))
    }

    pub fn permutation_seed(&self) -> u64 {
        derive_seed(self.cfg.seed, &[self.run as u64, 2])
    }

    fn discriminator_seed(&self) -> u64 {
        derive_seed(self.cfg.seed, &[self.run as u64, self.fold as u64, 3])
    }

    fn train_subjects(&self) -> impl Iterator<Item = &Subject> {
        self.subjects.iter().filter(move |s| s.id != self.fold)
    }

    fn held_out(&self) -> Result<&Subject> {
        self.subjects
            .iter()
            .find(|s| s.id == self.fold)
            .ok_or_else(|| Error::Config(format!("no subject {} to hold out", self.fold)))
    }

    /// Every slice of the training subjects in modality `m`, with labels.
    pub fn labeled(&self, m: Modality) -> Result<LabeledSet> {
        let pairs: Vec<_> = self.train_subjects().map(|s| (s.image(m), s.truth(m))).collect();
        if pairs.is_empty() {
            return Err(Error::Config("fold leaves no training subjects".into()));
        }
        LabeledSet::from_volumes(&pairs, NUM_CLASSES)
    }

    /// Source/target slice pairs of every subject, the held-out one included.
    pub fn unlabeled(&self) -> Result<UnlabeledSet> {
        let (s, t) = (self.cfg.direction.source(), self.cfg.direction.target());
        let pairs: Vec<_> = self.subjects.iter().map(|x| (x.image(s), x.image(t))).collect();
        UnlabeledSet::from_volumes(&pairs)
    }

    /// Dice of `net` on the held-out subject in modality `m`.
    pub fn evaluate(&self, net: &UNet, m: Modality) -> Result<DiceReport> {
        let s = self.held_out()?;
        evaluate_volume(net, s.image(m), s.truth(m))
    }
}

pub fn unet_config(cfg: &ExperimentConfig) -> UNetConfig {
    UNetConfig {
        in_channels: 1,
        num_classes: NUM_CLASSES,
        depth: cfg.depth,
        base_filters: cfg.base_filters,
        padding_mode: cfg.padding_mode,
        input_size: (cfg.cohort.dims[1], cfg.cohort.dims[2]),
    }
}

/// Records, warnings and the final network of one job.
pub struct TrainOutput {
    pub records: Vec<RunRecord>,
    pub warnings: Vec<String>,
    pub net: UNet,
}

pub trait TrainingMethod: Send + Sync {
    fn name(&self) -> &'static str;

    fn train(&self, job: &Job<'_>) -> Result<TrainOutput>;
}

/// Name-keyed table of training methods.
pub struct MethodRegistry {
    entries: BTreeMap<&'static str, Box<dyn TrainingMethod>>,
}

impl Default for MethodRegistry {
    fn default() -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        r.register(Box::new(Supervised::no_adaptation()));
        r.register(Box::new(Supervised::oracle()));
        r.register(Box::new(Ddm));
        r.register(Box::new(Adversarial));
        r
    }
}

impl MethodRegistry {
    pub fn register(&mut self, m: Box<dyn TrainingMethod>) {
        self.entries.insert(m.name(), m);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }

    pub fn get(&self, name: &str) -> Result<&dyn TrainingMethod> {
        self.entries.get(name).map(|b| b.as_ref()).ok_or_else(|| {
            Error::Config(format!(
                "unknown method '{name}' (known: {})",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct StepLosses {
    ce: f64,
    disc: f64,
    discriminator: Option<f64>,
}

/// Column labels identifying the run in the CSV.
struct Labels {
    method: &'static str,
    kernel: String,
    alignment: String,
}

/// Drives `epochs × ceil(n / t)` optimisation steps and evaluates on the
/// held-out target volume at epoch 0 and every `eval_every` epochs.
fn run_schedule(
    job: &Job<'_>,
    net: &mut UNet,
    labeled_len: usize,
    labels: Labels,
    step: &mut dyn FnMut(&mut UNet) -> Result<StepLosses>,
    probe: &mut dyn FnMut(&UNet, usize) -> Result<()>,
) -> Result<Vec<RunRecord>> {
    let cfg = job.cfg;
    let steps_per_epoch = labeled_len.div_ceil(cfg.batch_size);
    let start = Instant::now();
    let mut records = Vec::new();
    let mut window: Vec<StepLosses> = Vec::new();
    for epoch in 0..=cfg.epochs {
        if epoch > 0 {
            for _ in 0..steps_per_epoch {
                window.push(step(net)?);
            }
        }
        if epoch % cfg.eval_every != 0 {
            continue;
        }
        let report = job.evaluate(net, cfg.direction.target())?;
        probe(net, epoch)?;
        let mean = |f: &dyn Fn(&StepLosses) -> f64| {
            if window.is_empty() {
                0.0
            } else {
                window.iter().map(f).sum::<f64>() / window.len() as f64
            }
        };
        let discriminator = window
            .iter()
            .map(|w| w.discriminator)
            .collect::<Option<Vec<f64>>>()
            .filter(|v| !v.is_empty())
            .map(|v| v.iter().sum::<f64>() / v.len() as f64);
        records.push(RunRecord {
            method: labels.method.into(),
            direction: cfg.direction.name().into(),
            kernel: labels.kernel.clone(),
            alignment: labels.alignment.clone(),
            run: job.run,
            fold: job.fold,
            epoch,
            dice: [report.per_class[0], report.per_class[1], report.per_class[2]],
            dice_mean: report.mean,
            loss_ce: mean(&|w| w.ce),
            loss_disc: mean(&|w| w.disc),
            loss_discriminator: discriminator,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        window.clear();
    }
    Ok(records)
}

fn no_probe(_: &UNet, _: usize) -> Result<()> {
    Ok(())
}

/// Cross-entropy-only training. `no_adaptation` learns from source labels,
/// `oracle` from target labels; both are scored on the held-out target.
pub struct Supervised {
    name: &'static str,
    use_target_labels: bool,
}

impl Supervised {
    pub fn no_adaptation() -> Self {
        Self {
            name: "no_adaptation",
            use_target_labels: false,
        }
    }

    pub fn oracle() -> Self {
        Self {
            name: "oracle",
            use_target_labels: true,
        }
    }
}

impl TrainingMethod for Supervised {
    fn name(&self) -> &'static str {
        self.name
    }

    fn train(&self, job: &Job<'_>) -> Result<TrainOutput> {
        let cfg = job.cfg;
        let m = if self.use_target_labels {
            cfg.direction.target()
        } else {
            cfg.direction.source()
        };
        let labeled = job.labeled(m)?;
        let mut net = UNet::new(job.unet_config(), job.init_seed())?;
        let mut adam = Adam::new(cfg.lr);
        let mut sampler = job.sampler();
        let t = cfg.batch_size;
        let mut step = |net: &mut UNet| -> Result<StepLosses> {
            let idx = sampler.labeled(labeled.len(), t)?;
            let mut g = Graph::new();
            let p = net.params().bind(&mut g, true);
            let ce = supervised_term(&mut g, &*net, &p, &labeled, &idx)?;
            g.backward(ce)?;
            let grads = net.params().grads(&g, &p);
            adam.step(net.params_mut(), &grads)?;
            Ok(StepLosses {
                ce: g.value(ce).item()?,
                ..Default::default()
            })
        };
        let labels = Labels {
            method: self.name,
            kernel: "none".into(),
            alignment: "none".into(),
        };
        let records = run_schedule(job, &mut net, labeled.len(), labels, &mut step, &mut no_probe)?;
        Ok(TrainOutput {
            records,
            warnings: Vec::new(),
            net,
        })
    }
}

/// The joint loss: source cross-entropy plus `λ` times the discrepancy
/// between outputs on paired source and target slices.
pub struct Ddm;

impl TrainingMethod for Ddm {
    fn name(&self) -> &'static str {
        "ddm"
    }

    fn train(&self, job: &Job<'_>) -> Result<TrainOutput> {
        let cfg = job.cfg;
        let kernel = DiscrepancyRegistry::default().build(&cfg.kernel, &cfg.kernel_params)?;
        let labeled = job.labeled(cfg.direction.source())?;
        let unlabeled = job.unlabeled()?;
        let loss_cfg = LossConfig {
            lambda: cfg.lambda,
            discrepancy: kernel.as_ref(),
            transform: cfg.transform,
            permutation: crate::data::make_permutation(cfg.alignment, unlabeled.len(), job.permutation_seed()),
            batch_size: cfg.batch_size,
        };
        let mut net = UNet::new(job.unet_config(), job.init_seed())?;
        let mut adam = Adam::new(cfg.lr);
        let mut sampler = job.sampler();
        let mut step = |net: &mut UNet| -> Result<StepLosses> {
            let mut g = Graph::new();
            let p = net.params().bind(&mut g, true);
            let loss = batch_loss(&mut g, &*net, &p, &labeled, &unlabeled, &loss_cfg, &mut sampler)?;
            g.backward(loss.total)?;
            let grads = net.params().grads(&g, &p);
            adam.step(net.params_mut(), &grads)?;
            Ok(StepLosses {
                ce: g.value(loss.ce).item()?,
                disc: cfg.lambda * g.value(loss.disc).item()?,
                discriminator: None,
            })
        };
        let labels = Labels {
            method: "ddm",
            kernel: kernel.name().into(),
            alignment: cfg.alignment.name().into(),
        };
        let records = run_schedule(job, &mut net, labeled.len(), labels, &mut step, &mut no_probe)?;
        Ok(TrainOutput {
            records,
            warnings: Vec::new(),
            net,
        })
    }
}

/// Output-space adversarial baseline: a discriminator learns to tell source
/// from target probability maps while the segmenter is trained to fool it.
pub struct Adversarial;

/// Sigmoid of every discriminator logit for a batch of probability maps.
fn discriminator_probs(disc: &Discriminator, probs: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let dp = disc.params().bind(&mut g, false);
    let x = g.constant(probs.clone());
    let logits = disc.forward(&mut g, &dp, x)?;
    Ok(g.value(logits).data().iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect())
}

impl TrainingMethod for Adversarial {
    fn name(&self) -> &'static str {
        "adversarial"
    }

    fn train(&self, job: &Job<'_>) -> Result<TrainOutput> {
        let cfg = job.cfg;
        let labeled = job.labeled(cfg.direction.source())?;
        let unlabeled = job.unlabeled()?;
        let mut net = UNet::new(job.unet_config(), job.init_seed())?;
        let (oh, ow) = net.output_size();
        let dcfg = DiscriminatorConfig::with_width(NUM_CLASSES, cfg.disc_width);
        dcfg.output_size(oh, ow)?;
        let disc = RefCell::new(Discriminator::new(dcfg, job.discriminator_seed())?);
        let mut adam = Adam::new(cfg.lr);
        let mut adam_d = Adam::new(cfg.lr_disc);
        let mut sampler = job.sampler();
        let t = cfg.batch_size;
        let label_hw = (cfg.cohort.dims[1], cfg.cohort.dims[2]);

        let mut step = |net: &mut UNet| -> Result<StepLosses> {
            let i0 = sampler.labeled(labeled.len(), t)?;
            let i1 = sampler.unlabeled(unlabeled.len(), t)?;
            let mut disc = disc.borrow_mut();

            // Segmenter update with the discriminator frozen.
            let mut g = Graph::new();
            let p = net.params().bind(&mut g, true);
            let dp = disc.params().bind(&mut g, false);
            let xs: Vec<&Tensor> = i0.iter().map(|&i| &labeled.images()[i]).collect();
            let xs = g.constant(Tensor::stack(&xs)?);
            let s_src = net.forward(&mut g, &p, xs)?;
            let maps: Vec<&[u8]> = i0.iter().map(|&i| labeled.labels()[i].as_slice()).collect();
            let ce = cross_entropy_sum(&mut g, s_src, &maps, label_hw)?;
            let xt: Vec<&Tensor> = i1.iter().map(|&i| &unlabeled.target()[i]).collect();
            let xt = g.constant(Tensor::stack(&xt)?);
            let s_tgt = net.forward(&mut g, &p, xt)?;
            let d_tgt = disc.forward(&mut g, &dp, s_tgt)?;
            // Target maps labelled as source (0). Scaled from a per-location
            // mean to the pixel-summed scale of the cross-entropy.
            let fool = g.bce_with_logits(d_tgt, 0.0)?;
            let pixels = g.value(s_tgt).numel() / NUM_CLASSES;
            let scale = cfg.lambda_adv * pixels as f64 / g.value(d_tgt).numel() as f64;
            let weighted = g.mul_scalar(fool, scale)?;
            let total = g.add(ce, weighted)?;
            g.backward(total)?;
            let grads = net.params().grads(&g, &p);
            adam.step(net.params_mut(), &grads)?;

            // Discriminator update on the same (detached) maps.
            let mut gd = Graph::new();
            let dp = disc.params().bind(&mut gd, true);
            let a = gd.constant(g.value(s_src).clone());
            let b = gd.constant(g.value(s_tgt).clone());
            let da = disc.forward(&mut gd, &dp, a)?;
            let db = disc.forward(&mut gd, &dp, b)?;
            let la = gd.bce_with_logits(da, 0.0)?;
            let lb = gd.bce_with_logits(db, 1.0)?;
            let sum = gd.add(la, lb)?;
            let ld = gd.mul_scalar(sum, 1.0 / gd.value(da).numel() as f64)?;
            gd.backward(ld)?;
            let dgrads = disc.params().grads(&gd, &dp);
            adam_d.step(disc.params_mut(), &dgrads)?;

            Ok(StepLosses {
                ce: g.value(ce).item()?,
                disc: g.value(weighted).item()?,
                discriminator: Some(gd.value(ld).item()?),
            })
        };

        let held_out = job.held_out()?;
        let probe_slices = slice_z(held_out.image(cfg.direction.target()));
        let mut streak = 0;
        let mut warnings = Vec::new();
        let mut probe = |net: &UNet, epoch: usize| -> Result<()> {
            let refs: Vec<&Tensor> = probe_slices.iter().collect();
            let probs = net.predict(&Tensor::stack(&refs)?)?;
            let out = discriminator_probs(&disc.borrow(), &probs)?;
            let saturated = out
                .iter()
                .all(|&q| q < COLLAPSE_TOL || q > 1.0 - COLLAPSE_TOL);
            streak = if saturated { streak + 1 } else { 0 };
            if streak == COLLAPSE_PATIENCE {
                warnings.push(format!(
                    "run {} fold {}: discriminator output saturated for {COLLAPSE_PATIENCE} evaluations (epoch {epoch})",
                    job.run, job.fold
                ));
            }
            Ok(())
        };
        let labels = Labels {
            method: "adversarial",
            kernel: "none".into(),
            alignment: "none".into(),
        };
        let records = run_schedule(job, &mut net, labeled.len(), labels, &mut step, &mut probe)?;
        Ok(TrainOutput {
            records,
            warnings,
            net,
        })
    }
}
