//! Command-line entry point.

use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use super::{
    denoise_export, global_features, linear_probe, load_checkpoint, pretrain_run, read_log, zeroshot_classify,
    HarnessError, ProbeOptions, RunConfig, CSV_HEADER,
};
use crate::data::{gen_dataset, DataError, Dataset, GenOptions, Split};

#[derive(Parser, Debug)]
#[command(name = "pointdico", version, about = "Point cloud pretraining with diffusion and cross-modal distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Export {
    Losses,
    Features,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic shape dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training samples per class.
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        /// Test samples per class (default: a quarter of `--per-class`).
        #[arg(long)]
        test_per_class: Option<usize>,
        #[arg(long, default_value_t = 2048)]
        points: usize,
    },
    /// Pretrain from a config file.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total steps.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Generate a cloud conditioned on a masked dataset sample.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        every: usize,
        /// Dataset directory (default: the one in the checkpoint config).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Linear probe accuracy on frozen features.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Zero-shot accuracy against text teacher features.
    Zeroshot {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Average the text features of every template.
        #[arg(long)]
        ensemble: bool,
        /// Template used without `--ensemble`.
        #[arg(long, default_value_t = 0)]
        template: usize,
    },
    /// Print the loss log or global features as CSV.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        what: Export,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

fn test_mode_env() -> bool {
    std::env::var("PDCO_TEST_MODE").is_ok_and(|v| v == "1")
}

fn data_dir(explicit: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, HarnessError> {
    explicit
        .or_else(|| cfg.data_dir.clone())
        .ok_or_else(|| HarnessError::Config("no dataset directory: pass --data".into()))
}

fn execute(cmd: Command) -> Result<String, HarnessError> {
    match cmd {
        Command::GenData { out, seed, per_class, test_per_class, points } => {
            let opts = GenOptions {
                seed,
                train_per_class: per_class,
                test_per_class: test_per_class.unwrap_or((per_class / 4).max(1)),
                points,
                ..GenOptions::default()
            };
            let records = gen_dataset(&out, &opts)?;
            Ok(format!("wrote {} samples to {}", records.len(), out.display()))
        }
        Command::Pretrain { config, out, resume, until } => {
            let text = fs::read_to_string(&config).map_err(|e| HarnessError::io(&config, e))?;
            let mut cfg = RunConfig::parse(&text)?;
            cfg.test_mode |= test_mode_env();
            if let (Some(dir), Some(base)) = (&cfg.data_dir, config.parent()) {
                if dir.is_relative() && !dir.exists() {
                    cfg.data_dir = Some(base.join(dir));
                }
            }
            let trainer = pretrain_run(&cfg, &out, resume, until)?;
            let last = trainer.log.last().cloned().unwrap_or_default();
            Ok(format!("step {} of {}; last row: {last}", trainer.step, trainer.total_steps()))
        }
        Command::Sample { ckpt, id, out, every, data, seed } => {
            let ck = load_checkpoint(&ckpt)?;
            let ds = Dataset::open(&data_dir(data, &ck.config)?)?;
            let record = ds.find(&id).ok_or_else(|| DataError::Invalid(format!("no sample with id `{id}`")))?;
            let sample = ds.load(record)?;
            let report = denoise_export(&ck.params, &ck.config, &sample, &out, every, seed)?;
            Ok(format!(
                "wrote {} files to {}\nchamfer(final, input) = {:e}\nchamfer(gaussian, input) = {:e}",
                report.files.len(),
                out.display(),
                report.chamfer,
                report.baseline_chamfer
            ))
        }
        Command::Probe { ckpt, data } => {
            let ck = load_checkpoint(&ckpt)?;
            let ds = Dataset::open(&data)?;
            let train = ds.load_split(Split::Train)?;
            let test = ds.load_split(Split::Test)?;
            let m = &ck.config.model;
            let labels = |s: &[crate::data::Sample]| s.iter().map(|x| x.label).collect::<Vec<_>>();
            let acc = linear_probe(
                &global_features(&ck.params, m, &train)?,
                &labels(&train),
                &global_features(&ck.params, m, &test)?,
                &labels(&test),
                m.classes,
                &ProbeOptions::default(),
            )?;
            Ok(format!("probe accuracy {acc:.4}"))
        }
        Command::Zeroshot { ckpt, data, ensemble, template } => {
            let ck = load_checkpoint(&ckpt)?;
            let test = Dataset::open(&data)?.load_split(Split::Test)?;
            let m = &ck.config.model;
            let templates: Vec<usize> = if ensemble { (0..m.templates).collect() } else { vec![template] };
            let acc = zeroshot_classify(&ck.params, m, &test, &templates)?;
            Ok(format!("zero-shot accuracy {acc:.4}"))
        }
        Command::Export { ckpt, what, data, split } => match what {
            Export::Losses => {
                let rows = read_log(&ckpt)?;
                Ok(std::iter::once(CSV_HEADER.to_string()).chain(rows).collect::<Vec<_>>().join("\n"))
            }
            Export::Features => {
                let ck = load_checkpoint(&ckpt)?;
                let split = match split {
                    SplitArg::Train => Split::Train,
                    SplitArg::Test => Split::Test,
                };
                let samples = Dataset::open(&data_dir(data, &ck.config)?)?.load_split(split)?;
                let h = global_features(&ck.params, &ck.config.model, &samples)?;
                let header = std::iter::once("id,label".to_string())
                    .chain((0..h.cols()).map(|j| format!("f{j}")))
                    .collect::<Vec<_>>()
                    .join(",");
                let mut lines = vec![header];
                for (i, s) in samples.iter().enumerate() {
                    let vals: Vec<String> = h.row(i).iter().map(|v| format!("{v:?}")).collect();
                    lines.push(format!("{},{},{}", s.id, s.label, vals.join(",")));
                }
                Ok(lines.join("\n"))
            }
        },
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(text) => {
            println!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
