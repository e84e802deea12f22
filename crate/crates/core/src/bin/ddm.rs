//! `ddm` command-line experiment runner.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ddmseg::data::{Modality, Subject};
use ddmseg::harness::{
    aggregate, aggregated_csv, cohort, compare_kernels, load_cohort, read_csv, run_experiment, unet_config,
    write_cohort, write_csv, ExperimentConfig, Summary, METRICS,
};
use ddmseg::metrics::evaluate_volume;
use ddmseg::nn::{ParamSet, UNet};

#[derive(Parser)]
#[command(name = "ddm", version, about = "Direct distribution matching experiments on synthetic cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort as `subXX_{A,B,labels}.ddmv` files.
    GenerateData {
        /// Config file; only the cohort keys are used.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method and write `<method>_<direction>.csv` plus checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides the config's method.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one subject.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        subject: usize,
        /// Defaults to the target modality of the configured direction.
        #[arg(long)]
        modality: Option<String>,
    },
    /// Run DDM with each of sqeuclid, bhattacharyya and kl.
    CompareKernels {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate per-evaluation CSVs into `epoch,amin,amax,mean` files.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// `key = value` config file. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Cohort directory written by `generate-data`; generated in memory when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("override '{o}' is not key=value"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    /// Config and subjects, with the cohort shape taken from disk when `--data` is given.
    fn load(&self) -> Result<(ExperimentConfig, Vec<Subject>)> {
        let mut cfg = self.config()?;
        let subjects = match &self.data {
            Some(dir) => {
                let subjects = load_cohort(dir)?;
                cfg.cohort.subjects = subjects.len();
                cfg.cohort.dims = subjects[0].a.dims();
                subjects
            }
            None => cohort(&cfg)?,
        };
        cfg.validate()?;
        Ok((cfg, subjects))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn summary_line(label: &str, s: &Summary) -> String {
    format!(
        "{label},{},{},{},{}",
        s.final_dice.mean, s.final_dice.std, s.best_dice.0, s.best_dice.1
    )
}

const SUMMARY_HEADER: &str = "name,final_mean,final_std,best_epoch,best_mean";

fn train(common: &Common, method: Option<String>, out: &Path) -> Result<()> {
    let (mut cfg, subjects) = common.load()?;
    if let Some(m) = method {
        cfg.method = m;
    }
    create_dir(out)?;
    let stem = format!("{}_{}", cfg.method, cfg.direction.slug());
    let result = run_experiment(&cfg, &subjects, &mut |job, res| {
        let last = res.records.last().map_or(f64::NAN, |r| r.dice_mean);
        eprintln!("run {} fold {}: final mean dice {last:.4}", job.run, job.fold);
        let ckpt = out.join(format!("{stem}_run{}_fold{}.ddmc", job.run, job.fold));
        res.net.params().save(&ckpt)?;
        Ok(())
    })?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    let csv = out.join(format!("{stem}.csv"));
    write_csv(&csv, &result.records)?;
    println!("{SUMMARY_HEADER}");
    println!("{}", summary_line(&stem, &result.summary()?));
    eprintln!("wrote {}", csv.display());
    Ok(())
}

fn evaluate(common: &Common, checkpoint: &Path, subject: usize, modality: Option<String>) -> Result<()> {
    let (cfg, subjects) = common.load()?;
    let s = subjects
        .get(subject)
        .with_context(|| format!("subject {subject} not in cohort of {}", subjects.len()))?;
    let m = match modality {
        Some(m) => Modality::parse(&m)?,
        None => cfg.direction.target(),
    };
    let mut net = UNet::new(unet_config(&cfg), cfg.seed)?;
    net.params_mut().load_from(&ParamSet::load(checkpoint)?)?;
    let r = evaluate_volume(&net, s.image(m), s.truth(m))?;
    println!("subject,modality,dice_gm,dice_wm,dice_csf,dice_mean");
    println!(
        "{subject},{},{},{},{},{}",
        m.name(),
        r.per_class[0],
        r.per_class[1],
        r.per_class[2],
        r.mean
    );
    Ok(())
}

fn kernels(common: &Common, out: &Path) -> Result<()> {
    let (cfg, subjects) = common.load()?;
    create_dir(out)?;
    let mut table = format!("{SUMMARY_HEADER}\n");
    for (kernel, result) in compare_kernels(&cfg, &subjects)? {
        let csv = out.join(format!("ddm_{}_{kernel}.csv", cfg.direction.slug()));
        write_csv(&csv, &result.records)?;
        table.push_str(&summary_line(&kernel, &result.summary()?));
        table.push('\n');
    }
    let path = out.join(format!("kernels_{}.csv", cfg.direction.slug()));
    std::fs::write(&path, &table).with_context(|| format!("cannot write {}", path.display()))?;
    print!("{table}");
    Ok(())
}

fn report(out: &Path, inputs: &[PathBuf]) -> Result<()> {
    create_dir(out)?;
    let mut table = format!("{SUMMARY_HEADER}\n");
    for input in inputs {
        let stem = input
            .file_stem()
            .and_then(|s| s.to_str())
            .with_context(|| format!("cannot name output for {}", input.display()))?;
        let summary = aggregate(&read_csv(input)?).with_context(|| format!("aggregating {}", input.display()))?;
        for metric in METRICS {
            let path = out.join(format!("{stem}_{metric}.csv"));
            std::fs::write(&path, aggregated_csv(&summary, metric)?)
                .with_context(|| format!("cannot write {}", path.display()))?;
        }
        table.push_str(&summary_line(stem, &summary));
        table.push('\n');
    }
    let path = out.join("summary.csv");
    std::fs::write(&path, &table).with_context(|| format!("cannot write {}", path.display()))?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { spec, out } => {
            let cfg = ExperimentConfig::load(&spec)?;
            let files = write_cohort(&out, &cohort(&cfg)?)?;
            eprintln!("wrote {} files to {}", files.len(), out.display());
        }
        Command::Train { common, method, out } => train(&common, method, &out)?,
        Command::Evaluate {
            common,
            checkpoint,
            subject,
            modality,
        } => evaluate(&common, &checkpoint, subject, modality)?,
        Command::CompareKernels { common, out } => kernels(&common, &out)?,
        Command::Report { out, inputs } => report(&out, &inputs)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
