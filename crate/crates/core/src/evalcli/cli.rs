//! Command-line front end: `degrade`, `train`, `infer`, `eval`.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::RunConfig;
use super::metrics::MetricReport;
use crate::nets::checkpoint::Checkpoint;
use crate::nets::pretrain::pretrain_generator;
use crate::nets::Generator;
use crate::nn::Fwd;
use crate::probe::Probe;
use crate::sjd::{Trainer, LOG_HEADER};
use crate::tai::{make_plan, tai_forward_with, ExecMode};
use crate::videodata::pairs::PairSource;
use crate::videodata::{degrade, load_frames, save_frames, DegradationRecipe, VideoTensor};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "onestep-vsr", about = "One-step diffusion video super-resolution at toy scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Apply a degradation recipe to a frame directory.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `key=value` recipe file.
        #[arg(long)]
        recipe: PathBuf,
        /// Overrides the recipe's noise seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain (or load `pretrain.init`) and run distillation training.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: u64,
        /// Per-step loss log; defaults to `<out>.log`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Super-resolve a frame directory in one step.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Frames per sub-batch; 0 processes the whole clip. Defaults to the checkpoint's `tai.b`.
        #[arg(long = "tai-batch")]
        tai_batch: Option<usize>,
        /// `sequential` or `parallel`; defaults to the checkpoint's `tai.mode`.
        #[arg(long)]
        mode: Option<String>,
        /// Write peak activation counts as `phase,peak_elements` lines.
        #[arg(long = "memory-report")]
        memory_report: Option<PathBuf>,
    },
    /// Full-reference metrics of a prediction against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

/// Failures split by exit code.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownKey(_) | Error::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand, and returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.cmd) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_mode(v: &str) -> Result<ExecMode> {
    match v {
        "sequential" => Ok(ExecMode::Sequential),
        "parallel" => Ok(ExecMode::Parallel),
        _ => Err(Error::Config(format!("unknown mode `{v}`, expected sequential or parallel"))),
    }
}

fn run(cmd: Cmd) -> std::result::Result<(), Failure> {
    match cmd {
        Cmd::Degrade { input, out, recipe, seed } => {
            let text = fs::read_to_string(&recipe).map_err(|e| Error::io(&recipe, e))?;
            let mut r = DegradationRecipe::parse(&text)?;
            if let Some(s) = seed {
                r.seed = s;
            }
            let v = load_frames(&input)?;
            save_frames(&degrade(&v, &r)?, &out)?;
        }
        Cmd::Train { config, out, steps, log } => {
            let text = fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let rc = RunConfig::parse(&text)?;
            train(&rc, &out, steps, &log.unwrap_or_else(|| with_suffix(&out, ".log")))?;
        }
        Cmd::Infer { ckpt, input, out, tai_batch, mode, memory_report } => {
            let ck = Checkpoint::load(&ckpt)?;
            let b = match tai_batch {
                Some(b) => b,
                None => ck.meta_parse("run.tai_b").unwrap_or(0),
            };
            let mode = match mode {
                Some(m) => parse_mode(&m)?,
                None => ck.meta("run.tai_mode").map_or(Ok(ExecMode::Sequential), parse_mode)?,
            };
            let g = Generator::from_checkpoint(&ck)?;
            let v = load_frames(&input)?;
            let plan = make_plan(v.frames(), if b == 0 { v.frames() } else { b })?;
            let probe = Probe::new();
            let fwd = Fwd { probe: Some(&probe), ..Fwd::default() };
            let (y, mem) = tai_forward_with(&g, &v, &plan, &fwd, mode)?;
            save_frames(&VideoTensor::from_signed_tensor(&y)?, &out)?;
            println!("frames,{}\nsub_batches,{}\nunet_calls,{}", plan.frames(), plan.sub_batches(), probe.unet_calls());
            if let Some(p) = memory_report {
                write_file(&p, &mem.to_text())?;
            }
        }
        Cmd::Eval { pred, gt, report } => {
            let r = MetricReport::compute(&load_frames(&pred)?, &load_frames(&gt)?)?;
            write_file(&report, &r.to_text())?;
            print!("{}", r.to_text());
        }
    }
    Ok(())
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Builds the starting generator, trains for `steps`, and writes the checkpoint and log.
pub fn train(rc: &RunConfig, out: &Path, steps: u64, log_path: &Path) -> Result<Trainer> {
    let gcfg = rc.generator_config();
    let g = match &rc.init {
        Some(p) => Generator::load(p)?.variant(rc.seed, gcfg)?,
        None => {
            let mut g = Generator::new(rc.seed, gcfg)?;
            pretrain_generator(&mut g, &PairSource::new(rc.data.clone()), &rc.pretrain)?;
            g
        }
    };
    let mut tr = Trainer::new(g, rc.sjd_config())?;
    let mut src = PairSource::new(rc.data.clone());
    let file = fs::File::create(log_path).map_err(|e| Error::io(log_path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(log_path, e))?;
    tr.run(&mut src, steps, Some(&mut w))?;
    w.flush().map_err(|e| Error::io(log_path, e))?;
    let mut ck = tr.to_checkpoint();
    ck.set_meta("run.tai_b", rc.tai_b);
    ck.set_meta(
        "run.tai_mode",
        match rc.tai_mode {
            ExecMode::Sequential => "sequential",
            ExecMode::Parallel => "parallel",
        },
    );
    ck.save(out)?;
    Ok(tr)
}
