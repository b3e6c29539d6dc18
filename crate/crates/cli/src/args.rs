//! Command-line surface.

use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};

use crate::config::Layer;

#[derive(Debug, Parser)]
#[command(name = "macd", version, about = "Model-aware counterfactual contrastive decoding")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode one video with a counterfactual view.
    #[command(allow_negative_numbers = true)]
    Decode(DecodeArgs),
    /// Score one method on a synthetic suite.
    #[command(allow_negative_numbers = true)]
    Eval(EvalArgs),
    /// Run ablation variants over several suite seeds.
    #[command(allow_negative_numbers = true)]
    Ablate(AblateArgs),
    /// Sweep alpha at fixed beta, then beta at fixed alpha.
    #[command(allow_negative_numbers = true)]
    Grid(GridArgs),
    /// Pass counts and latency against optimization steps.
    #[command(allow_negative_numbers = true)]
    Profile(ProfileArgs),
    /// Write a synthetic suite to disk.
    #[command(allow_negative_numbers = true)]
    GenSuite(GenSuiteArgs),
    /// Serve a model over the line protocol (stdio, or TCP with --listen).
    #[command(hide = true)]
    Serve(ServeArgs),
}

/// Options shared by every command that resolves a run configuration.
#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// JSON file of flat dotted keys, e.g. {"optimizer.eta": 0.01}.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. --set tracker.iou_gate=0.4 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// toy:<seed> | toy-biased:<seed> | proto:stdio | proto:<host:port>
    #[arg(long)]
    pub backend: Option<String>,
    /// eventhallusion | mvbench | perception, presets alpha and beta.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// greedy | nucleus:<p> | sc:<n>
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub max_tokens: Option<u64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Decoding seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// max | confnorm | avg
    #[arg(long)]
    pub fusion: Option<String>,
    /// blend | addclamp
    #[arg(long)]
    pub render: Option<String>,
    /// trainable | fixed-subset | none | frame-extraction
    #[arg(long)]
    pub frame_mode: Option<String>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub r_init: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Worker threads; reports do not depend on it.
    #[arg(long)]
    pub jobs: Option<u64>,
    /// json | csv
    #[arg(long)]
    pub format: Option<String>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Strategy selection for single-method commands.
#[derive(Debug, Args, Default)]
pub struct MethodArgs {
    /// baseline | vcd | macd | fixed | noframe | noframe-extract | noise | objnoise | framenoise | random
    #[arg(long, visible_alias = "strategy")]
    pub method: Option<String>,
    /// Gradient ascent steps for the mask strengths.
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct SuiteArgs {
    /// Number of synthetic cases.
    #[arg(long)]
    pub n: Option<u64>,
    /// Share of absent-object cases built to trigger the prior.
    #[arg(long)]
    pub bias_mix: Option<f64>,
    #[arg(long)]
    pub suite_seed: Option<u64>,
    /// Read a suite written by gen-suite instead of generating one.
    #[arg(long)]
    pub suite_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Video tensor (VTNS).
    #[arg(long)]
    pub video: Option<PathBuf>,
    /// Detections, one JSON record per line.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Comma-separated token ids, or @file holding them.
    #[arg(long)]
    pub query: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    #[command(flatten)]
    pub suite: SuiteArgs,
    /// Skip the paired McNemar comparison against the baseline.
    #[arg(long)]
    pub no_compare: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub suite: SuiteArgs,
    /// Methods to compare; defaults to the seven ablation variants.
    #[arg(long, value_delimiter = ',')]
    pub strategies: Vec<String>,
    /// Suite seeds; defaults to five consecutive seeds from the suite seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    #[command(flatten)]
    pub suite: SuiteArgs,
    /// Part I: alphas swept at the configured beta.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub alphas: Vec<f64>,
    /// Part II: betas swept at the configured alpha.
    #[arg(long, value_delimiter = ',')]
    pub betas: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub suite: SuiteArgs,
    /// Optimization step counts, one MACD row each.
    #[arg(long, value_delimiter = ',', default_value = "1,3")]
    pub steps: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct GenSuiteArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub suite: SuiteArgs,
    /// Directory receiving the VTNS/JSONL files and manifest.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "toy-biased:0")]
    pub backend: String,
    /// Accept TCP connections here instead of serving stdio.
    #[arg(long)]
    pub listen: Option<String>,
}

impl CommonArgs {
    /// Explicit flags as a config layer.
    pub fn layer(&self) -> Result<Layer, crate::CliError> {
        let mut l = Layer::default();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| crate::CliError::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            l.set_text(k.trim(), v.trim());
        }
        let mut text = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                l.set_text(key, v);
            }
        };
        text("backend", self.backend.clone());
        text("profile", self.profile.clone());
        text("decode.alpha", self.alpha.map(|v| v.to_string()));
        text("decode.beta", self.beta.map(|v| v.to_string()));
        text("decode.lambda", self.lambda.map(|v| v.to_string()));
        text("decode.mode", self.mode.clone());
        text("decode.max_tokens", self.max_tokens.map(|v| v.to_string()));
        text("decode.temperature", self.temperature.map(|v| v.to_string()));
        text("decode.seed", self.seed.map(|v| v.to_string()));
        text("compose.fusion", self.fusion.clone());
        text("compose.render", self.render.clone());
        text("compose.policy.mode", self.frame_mode.clone());
        text("optimizer.eta", self.eta.map(|v| v.to_string()));
        text("optimizer.r_init", self.r_init.map(|v| v.to_string()));
        text("noise_sigma", self.noise_sigma.map(|v| v.to_string()));
        text("jobs", self.jobs.map(|v| v.to_string()));
        text("output.format", self.format.clone());
        if let Some(p) = &self.out {
            l.set("output.path", serde_json::Value::String(p.display().to_string()));
        }
        Ok(l)
    }
}

impl MethodArgs {
    pub fn extend(&self, l: &mut Layer) {
        if let Some(m) = &self.method {
            l.set_text("method", m.clone());
        }
        if let Some(s) = self.steps {
            l.set_text("optimizer.steps", s.to_string());
        }
    }
}

impl SuiteArgs {
    pub fn extend(&self, l: &mut Layer) {
        if let Some(n) = self.n {
            l.set_text("suite.n", n.to_string());
        }
        if let Some(b) = self.bias_mix {
            l.set_text("suite.bias_mix", b.to_string());
        }
        if let Some(s) = self.suite_seed {
            l.set_text("suite.seed", s.to_string());
        }
    }
}
