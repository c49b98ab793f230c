//! Building executors from command-line flags.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::Command;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};

use shelfpipe::dataset::{load_dataset, Dataset};
use shelfpipe::detector::{
    simulated_executor, ColorExecutor, DeclaredCost, Executor, ExecutorProfile, NoiseParams, OracleExecutor,
    Precision, SimulatedExecutor, SubprocessExecutor,
};
use shelfpipe::raster::Rgb;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExecKind {
    /// Ground-truth boxes, optionally perturbed.
    Oracle,
    /// Color-threshold scan for the empty-shelf color.
    Color,
    /// Declared cost only; wraps --inner when given.
    Simulated,
    /// External process speaking the JSON-lines adapter protocol.
    Subprocess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InnerKind {
    Oracle,
    Color,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Fp32,
    Fp16,
}

#[derive(Debug, Args)]
pub struct ExecArgs {
    #[arg(long = "executor", value_enum, default_value_t = ExecKind::Color)]
    pub kind: ExecKind,
    /// Executor name in reports; defaults to the kind.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value_t = 640)]
    pub input_size: u32,
    #[arg(long, value_enum, default_value_t = PrecisionArg::Fp32)]
    pub precision: PrecisionArg,
    /// Model size in millions of parameters (informational).
    #[arg(long, default_value_t = 0.0)]
    pub params_m: f64,
    /// Dataset manifest supplying ground truth for the oracle.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub jitter_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub drop_prob: f64,
    #[arg(long, default_value_t = 0.0)]
    pub fp_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    /// Simulated cost per call, ms.
    #[arg(long)]
    pub base_ms: Option<f64>,
    /// Simulated cost per image, ms.
    #[arg(long)]
    pub per_image_ms: Option<f64>,
    #[arg(long, value_enum)]
    pub inner: Option<InnerKind>,
    /// R,G,B of empty shelf space.
    #[arg(long, default_value = "16,16,20", value_parser = parse_rgb)]
    pub empty_color: Rgb,
    /// Per-channel tolerance of the color scan.
    #[arg(long, default_value_t = 8)]
    pub color_tol: u8,
    /// Program and arguments, whitespace separated.
    #[arg(long)]
    pub command: Option<String>,
}

fn parse_rgb(s: &str) -> Result<Rgb, String> {
    let parts: Vec<u8> = s
        .split(',')
        .map(|p| p.trim().parse::<u8>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [r, g, b] => Ok([r, g, b]),
        _ => Err(format!("expected R,G,B, got {s:?}")),
    }
}

impl ExecArgs {
    fn profile(&self) -> ExecutorProfile {
        let default_name = match self.kind {
            ExecKind::Oracle => "oracle",
            ExecKind::Color => "color",
            ExecKind::Simulated => "simulated",
            ExecKind::Subprocess => "subprocess",
        };
        let mut p = ExecutorProfile::new(self.name.clone().unwrap_or_else(|| default_name.into()), self.input_size);
        p.params_m = self.params_m;
        p.precision = match self.precision {
            PrecisionArg::Fp32 => Precision::Fp32,
            PrecisionArg::Fp16 => Precision::Fp16,
        };
        if self.base_ms.is_some() || self.per_image_ms.is_some() {
            p.declared_cost = Some(DeclaredCost {
                base_ms: self.base_ms.unwrap_or(0.0),
                per_image_ms: self.per_image_ms.unwrap_or(0.0),
            });
        }
        p
    }

    fn noise(&self) -> NoiseParams {
        NoiseParams {
            jitter_sigma: self.jitter_sigma,
            drop_prob: self.drop_prob,
            fp_rate: self.fp_rate,
            seed: self.noise_seed,
            ..NoiseParams::zero()
        }
    }
}

fn oracle(args: &ExecArgs, profile: ExecutorProfile, dataset: Option<&Dataset>) -> Result<OracleExecutor> {
    let loaded;
    let d = match (dataset, &args.gt) {
        (Some(d), _) => d,
        (None, Some(p)) => {
            loaded = load_dataset(p).with_context(|| format!("cannot load {}", p.display()))?;
            &loaded
        }
        (None, None) => bail!("the oracle executor needs ground truth (--gt DATASET_JSON)"),
    };
    let gt: HashMap<_, _> = d.images.iter().map(|r| (r.id.clone(), r.boxes.clone())).collect();
    Ok(OracleExecutor::new(profile, gt, args.noise())?)
}

/// `dataset` is used for oracle ground truth when given; `--gt` otherwise.
pub fn build_executor(args: &ExecArgs, dataset: Option<&Dataset>) -> Result<Box<dyn Executor>> {
    let profile = args.profile();
    Ok(match args.kind {
        ExecKind::Oracle => Box::new(oracle(args, profile, dataset)?),
        ExecKind::Color => Box::new(ColorExecutor::new(profile, args.empty_color, args.color_tol)),
        ExecKind::Simulated => {
            if profile.declared_cost.is_none() {
                bail!("the simulated executor needs --base-ms and/or --per-image-ms");
            }
            match args.inner {
                None => Box::new(simulated_executor(profile)?),
                Some(kind) => {
                    let inner_profile = ExecutorProfile::new("inner", args.input_size);
                    let inner: Box<dyn Executor> = match kind {
                        InnerKind::Oracle => Box::new(oracle(args, inner_profile, dataset)?),
                        InnerKind::Color => Box::new(ColorExecutor::new(inner_profile, args.empty_color, args.color_tol)),
                    };
                    Box::new(SimulatedExecutor::wrapping(profile, inner)?)
                }
            }
        }
        ExecKind::Subprocess => {
            let Some(line) = &args.command else {
                bail!("the subprocess executor needs --command");
            };
            let mut words = line.split_whitespace();
            let Some(program) = words.next() else {
                bail!("--command is empty");
            };
            let mut cmd = Command::new(program);
            cmd.args(words);
            Box::new(SubprocessExecutor::spawn(profile, cmd).with_context(|| format!("cannot start {program}"))?)
        }
    })
}
