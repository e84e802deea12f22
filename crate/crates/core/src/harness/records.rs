//! Per-evaluation records, their CSV form, and cross-run aggregation.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "method,direction,kernel,alignment,run,fold,epoch,dice_gm,dice_wm,dice_csf,dice_mean,loss_ce,loss_disc";

/// Metrics written to the aggregated files.
pub const METRICS: [&str; 6] = ["dice_gm", "dice_wm", "dice_csf", "dice_mean", "loss_ce", "loss_disc"];

/// One evaluation point of one training run.
///
/// `loss_ce` and `loss_disc` are means over the optimisation steps since the
/// previous record (zero for the epoch-0 record). `loss_disc` holds the
/// weighted unsupervised term: `λ·D` for DDM, `λ_adv` times the fooling loss
/// for the adversarial baseline. Wall time is kept out of the CSV so that
/// output is reproducible byte for byte.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub method: String,
    pub direction: String,
    pub kernel: String,
    pub alignment: String,
    pub run: usize,
    pub fold: usize,
    pub epoch: usize,
    /// Dice for GM, WM, CSF.
    pub dice: [f64; 3],
    pub dice_mean: f64,
    pub loss_ce: f64,
    pub loss_disc: f64,
    /// Mean discriminator loss over the window (adversarial runs only).
    pub loss_discriminator: Option<f64>,
    pub wall_seconds: f64,
}

impl RunRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "dice_gm" => self.dice[0],
            "dice_wm" => self.dice[1],
            "dice_csf" => self.dice[2],
            "dice_mean" => self.dice_mean,
            "loss_ce" => self.loss_ce,
            "loss_disc" => self.loss_disc,
            _ => return None,
        })
    }

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.method,
            self.direction,
            self.kernel,
            self.alignment,
            self.run,
            self.fold,
            self.epoch,
            self.dice[0],
            self.dice[1],
            self.dice[2],
            self.dice_mean,
            self.loss_ce,
            self.loss_disc
        )
    }
}

/// Sorts by `(run, fold, epoch)` and renders the per-evaluation CSV.
pub fn to_csv(records: &[RunRecord]) -> String {
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.run, r.fold, r.epoch));
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in sorted {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn write_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    std::fs::write(path, to_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn parse_csv(text: &str, origin: &Path) -> Result<Vec<RunRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::format(origin, "missing or unexpected CSV header"));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 13 {
            return Err(Error::format(origin, format!("row {}: expected 13 fields", n + 2)));
        }
        let int = |i: usize| -> Result<usize> {
            f[i].parse()
                .map_err(|_| Error::format(origin, format!("row {}: bad integer '{}'", n + 2, f[i])))
        };
        let real = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::format(origin, format!("row {}: bad number '{}'", n + 2, f[i])))
        };
        out.push(RunRecord {
            method: f[0].into(),
            direction: f[1].into(),
            kernel: f[2].into(),
            alignment: f[3].into(),
            run: int(4)?,
            fold: int(5)?,
            epoch: int(6)?,
            dice: [real(7)?, real(8)?, real(9)?],
            dice_mean: real(10)?,
            loss_ce: real(11)?,
            loss_disc: real(12)?,
            loss_discriminator: None,
            wall_seconds: 0.0,
        });
    }
    Ok(out)
}

pub fn read_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path)
}

/// Min, max, mean and sample standard deviation (`n - 1` denominator,
/// zero for a single value).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub amin: f64,
    pub amax: f64,
    pub mean: f64,
    pub std: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("statistics of an empty set".into()));
        }
        let amin = values.iter().copied().fold(f64::INFINITY, f64::min);
        let amax = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if amin == amax {
            // Avoid rounding noise in the mean of identical values.
            return Ok(Self {
                amin,
                amax,
                mean: amin,
                std: 0.0,
            });
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        Ok(Self { amin, amax, mean, std })
    }
}

/// Per-epoch statistics across all `(run, fold)` series of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub epochs: Vec<usize>,
    /// `per_metric[m][e]` for metric `METRICS[m]` at `epochs[e]`.
    pub per_metric: Vec<Vec<Stats>>,
    /// Final-epoch mean dice across series.
    pub final_dice: Stats,
    /// Maximum over epochs of the across-series mean dice, and its epoch.
    pub best_dice: (usize, f64),
    pub series: usize,
}

impl Summary {
    pub fn metric(&self, name: &str) -> Option<&[Stats]> {
        METRICS
            .iter()
            .position(|m| *m == name)
            .map(|i| self.per_metric[i].as_slice())
    }
}

/// Groups records into `(run, fold)` series that must share one epoch grid.
pub fn series(records: &[RunRecord]) -> Vec<Vec<&RunRecord>> {
    let mut keys: Vec<(usize, usize)> = records.iter().map(|r| (r.run, r.fold)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.iter()
        .map(|&(run, fold)| {
            let mut s: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.run == run && r.fold == fold)
                .collect();
            s.sort_by_key(|r| r.epoch);
            s
        })
        .collect()
}

pub fn aggregate(records: &[RunRecord]) -> Result<Summary> {
    let groups = series(records);
    let first = groups
        .first()
        .ok_or_else(|| Error::Invalid("aggregate needs at least one run".into()))?;
    let epochs: Vec<usize> = first.iter().map(|r| r.epoch).collect();
    for g in &groups {
        if g.iter().map(|r| r.epoch).ne(epochs.iter().copied()) {
            return Err(Error::Invalid(format!(
                "run {} fold {} has a different epoch grid",
                g[0].run, g[0].fold
            )));
        }
    }
    let mut per_metric = Vec::with_capacity(METRICS.len());
    for m in METRICS {
        let col = (0..epochs.len())
            .map(|e| {
                let vals: Vec<f64> = groups.iter().map(|g| g[e].metric(m).expect("known metric")).collect();
                Stats::of(&vals)
            })
            .collect::<Result<Vec<_>>>()?;
        per_metric.push(col);
    }
    let mean_idx = METRICS.iter().position(|m| *m == "dice_mean").expect("dice_mean");
    let final_dice = *per_metric[mean_idx].last().expect("non-empty grid");
    let best_dice = per_metric[mean_idx]
        .iter()
        .zip(&epochs)
        .fold((epochs[0], f64::NEG_INFINITY), |best, (s, &e)| {
            if s.mean > best.1 {
                (e, s.mean)
            } else {
                best
            }
        });
    Ok(Summary {
        epochs,
        per_metric,
        final_dice,
        best_dice,
        series: groups.len(),
    })
}

/// `epoch,amin,amax,mean` rows for one metric.
pub fn aggregated_csv(summary: &Summary, metric: &str) -> Result<String> {
    let stats = summary
        .metric(metric)
        .ok_or_else(|| Error::Invalid(format!("unknown metric '{metric}'")))?;
    let mut s = String::from("epoch,amin,amax,mean\n");
    for (e, st) in summary.epochs.iter().zip(stats) {
        let _ = writeln!(s, "{e},{},{},{}", st.amin, st.amax, st.mean);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(run: usize, epoch: usize, dice: f64) -> RunRecord {
        RunRecord {
            method: "ddm".into(),
            direction: "A->B".into(),
            kernel: "sqeuclid".into(),
            alignment: "aligned".into(),
            run,
            fold: run,
            epoch,
            dice: [dice; 3],
            dice_mean: dice,
            loss_ce: 1.5,
            loss_disc: 0.25,
            loss_discriminator: None,
            wall_seconds: 3.0,
        }
    }

    #[test]
    fn stats_examples() {
        let s = Stats::of(&[0.5, 0.7]).unwrap();
        assert!((s.mean - 0.6).abs() < 1e-15);
        assert_eq!((s.amin, s.amax), (0.5, 0.7));
        assert!((s.std - 0.141_421_356_237_309_5).abs() < 1e-12);
        let one = Stats::of(&[0.3]).unwrap();
        assert_eq!((one.amin, one.amax, one.mean, one.std), (0.3, 0.3, 0.3, 0.0));
        assert_eq!(Stats::of(&[0.4; 3]).unwrap().std, 0.0);
    }

    #[test]
    fn csv_round_trip_sorted() {
        let recs = vec![rec(1, 5, 0.25), rec(0, 5, 0.5), rec(0, 0, 0.125)];
        let text = to_csv(&recs);
        let back = parse_csv(&text, Path::new("mem")).unwrap();
        assert_eq!(back.iter().map(|r| (r.run, r.epoch)).collect::<Vec<_>>(), vec![(0, 0), (0, 5), (1, 5)]);
        assert_eq!(to_csv(&back), text);
        assert!(parse_csv("bogus\n", Path::new("mem")).is_err());
    }

    #[test]
    fn aggregate_checks_grids() {
        let recs = vec![rec(0, 0, 0.5), rec(0, 5, 0.5), rec(1, 0, 0.7), rec(1, 5, 0.9)];
        let s = aggregate(&recs).unwrap();
        assert_eq!(s.epochs, vec![0, 5]);
        assert_eq!(s.series, 2);
        assert!((s.final_dice.mean - 0.7).abs() < 1e-15);
        assert_eq!(s.best_dice.0, 5);
        let csv = aggregated_csv(&s, "dice_mean").unwrap();
        assert_eq!(csv, "epoch,amin,amax,mean\n0,0.5,0.7,0.6\n5,0.5,0.9,0.7\n");
        let bad = vec![rec(0, 0, 0.5), rec(1, 5, 0.5)];
        assert!(aggregate(&bad).is_err());
        assert!(aggregate(&[]).is_err());
    }
}
