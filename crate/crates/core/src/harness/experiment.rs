//! Folds, job expansion, cohort files, and whole-experiment drivers.

use std::path::{Path, PathBuf};

use crate::data::{
    generate_cohort, read_labels, read_volume, write_labels, write_volume, Subject, NUM_CLASSES,
};
use crate::error::{Error, Result};

use super::config::{ExperimentConfig, Protocol};
use super::methods::{Job, MethodRegistry, TrainOutput};
use super::records::{aggregate, RunRecord, Summary};

/// One leave-one-out split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub held_out: usize,
    pub train: Vec<usize>,
}

pub fn folds(subjects: usize) -> Result<Vec<Fold>> {
    if subjects < 2 {
        return Err(Error::Config(format!(
            "leave-one-out needs at least two subjects, got {subjects}"
        )));
    }
    Ok((0..subjects)
        .map(|h| Fold {
            held_out: h,
            train: (0..subjects).filter(|&i| i != h).collect(),
        })
        .collect())
}

/// `(run, fold)` pairs in execution order.
pub fn job_grid(cfg: &ExperimentConfig, subjects: usize) -> Result<Vec<(usize, usize)>> {
    let folds = folds(subjects)?;
    Ok(match cfg.protocol {
        Protocol::PerRun => (0..cfg.runs).map(|r| (r, folds[r % subjects].held_out)).collect(),
        Protocol::LeaveOneOut => (0..cfg.runs)
            .flat_map(|r| folds.iter().map(move |f| (r, f.held_out)))
            .collect(),
    })
}

/// Records and warnings of every job of one experiment.
#[derive(Clone, Debug, Default)]
pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    pub warnings: Vec<String>,
}

impl ExperimentOutput {
    pub fn summary(&self) -> Result<Summary> {
        aggregate(&self.records)
    }
}

/// Runs `cfg.method` on every job. `on_job` sees each finished job, e.g. to
/// save its checkpoint.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    subjects: &[Subject],
    on_job: &mut dyn FnMut(&Job<'_>, &TrainOutput) -> Result<()>,
) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let registry = MethodRegistry::default();
    let method = registry.get(&cfg.method)?;
    let mut out = ExperimentOutput::default();
    for (run, fold) in job_grid(cfg, subjects.len())? {
        let job = Job {
            cfg,
            subjects,
            run,
            fold,
        };
        let result = method.train(&job)?;
        on_job(&job, &result)?;
        out.records.extend(result.records);
        out.warnings.extend(result.warnings);
    }
    Ok(out)
}

/// Kernels compared by [`compare_kernels`].
pub const COMPARED_KERNELS: [&str; 3] = ["sqeuclid", "bhattacharyya", "kl"];

/// Runs DDM once per kernel with otherwise identical settings.
pub fn compare_kernels(cfg: &ExperimentConfig, subjects: &[Subject]) -> Result<Vec<(String, ExperimentOutput)>> {
    COMPARED_KERNELS
        .iter()
        .map(|k| {
            let mut c = cfg.clone();
            c.method = "ddm".into();
            c.kernel = (*k).into();
            run_experiment(&c, subjects, &mut |_, _| Ok(())).map(|o| (k.to_string(), o))
        })
        .collect()
}

/// Generates the cohort described by `cfg`.
pub fn cohort(cfg: &ExperimentConfig) -> Result<Vec<Subject>> {
    generate_cohort(&cfg.cohort)
}

fn subject_path(dir: &Path, id: usize, what: &str) -> PathBuf {
    dir.join(format!("sub{id:02}_{what}.ddmv"))
}

/// Writes `subXX_A.ddmv`, `subXX_B.ddmv` and `subXX_labels.ddmv`, plus
/// `subXX_labels_B.ddmv` when the B rendering has its own labels.
pub fn write_cohort(dir: &Path, subjects: &[Subject]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for s in subjects {
        let mut put = |what: &str| -> PathBuf {
            let p = subject_path(dir, s.id, what);
            written.push(p.clone());
            p
        };
        write_volume(&put("A"), &s.a)?;
        write_volume(&put("B"), &s.b)?;
        write_labels(&put("labels"), &s.labels_a)?;
        if s.labels_b != s.labels_a {
            write_labels(&put("labels_B"), &s.labels_b)?;
        }
    }
    Ok(written)
}

/// Reads consecutive subjects `sub00`, `sub01`, ... from `dir`.
pub fn load_cohort(dir: &Path) -> Result<Vec<Subject>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
        ));
    }
    let mut subjects = Vec::new();
    loop {
        let id = subjects.len();
        let a_path = subject_path(dir, id, "A");
        if !a_path.exists() {
            break;
        }
        let labels_a = read_labels(&subject_path(dir, id, "labels"), NUM_CLASSES)?;
        let b_labels_path = subject_path(dir, id, "labels_B");
        let labels_b = if b_labels_path.exists() {
            read_labels(&b_labels_path, NUM_CLASSES)?
        } else {
            labels_a.clone()
        };
        subjects.push(Subject {
            id,
            a: read_volume(&a_path)?,
            b: read_volume(&subject_path(dir, id, "B"))?,
            labels_a,
            labels_b,
        });
    }
    if subjects.is_empty() {
        return Err(Error::format(dir, "no subject files (expected sub00_A.ddmv)"));
    }
    Ok(subjects)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_run_protocol_holds_out_one_subject_per_run() {
        let cfg = ExperimentConfig::default();
        assert_eq!(job_grid(&cfg, 8).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);
        let loo = ExperimentConfig {
            protocol: Protocol::LeaveOneOut,
            runs: 2,
            ..Default::default()
        };
        assert_eq!(job_grid(&loo, 3).unwrap().len(), 6);
        assert!(folds(1).is_err());
    }

    #[test]
    fn cohort_files_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.cohort.subjects = 2;
        cfg.cohort.dims = [2, 12, 12];
        cfg.cohort.misalignment = 2.0;
        let subjects = cohort(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_cohort(dir.path(), &subjects).unwrap();
        let back = load_cohort(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (x, y) in subjects.iter().zip(&back) {
            assert_eq!(x.a, y.a);
            assert_eq!(x.b, y.b);
            assert_eq!(x.labels_a, y.labels_a);
            assert_eq!(x.labels_b, y.labels_b);
        }
        let missing = dir.path().join("nope");
        assert!(load_cohort(&missing).unwrap_err().to_string().contains("nope"));
    }
}
