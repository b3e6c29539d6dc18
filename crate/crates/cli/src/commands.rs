//! Subcommand implementations.

use std::fs;
use std::io::{self, BufReader};
use std::net::TcpListener;
use std::path::Path;

use macd_core::backend::proto::serve as serve_protocol;
use macd_core::backend::{BackendSpec, ModelBackend};
use macd_core::decode::{decode as decode_tokens, Contrast, DecodeConfig};
use macd_core::eval::experiment::{AblationReport, GridReport, MeanSe, ProfileReport};
use macd_core::eval::report::DECODE_SCHEMA;
use macd_core::eval::suite::{load_suite, materialize_suite};
use macd_core::eval::{run_ablation, run_experiment, run_grid, run_profile, ExperimentReport, Method, SyntheticCase};
use macd_core::optimize::{build_counterfactual, noise_view, CounterfactualStrategy};
use macd_core::track::{link_tracks, normalize_overlaps, parse_detections, rasterize_soft_masks};
use macd_core::video::{read_video_tensor, Seed, TokenSequence};
use serde::Serialize;
use serde_json::json;

use crate::args::{
    AblateArgs, Command, CommonArgs, DecodeArgs, EvalArgs, GenSuiteArgs, GridArgs, ProfileArgs, ServeArgs, SuiteArgs,
};
use crate::config::{self, Layer, RunConfig};
use crate::output::emit;
use crate::CliError;

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Grid(a) => grid(a),
        Command::Profile(a) => profile(a),
        Command::GenSuite(a) => gen_suite(a),
        Command::Serve(a) => serve(a),
    }
}

fn resolve(common: &CommonArgs, extend: impl FnOnce(&mut Layer)) -> Result<RunConfig, CliError> {
    let file = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            Some(Layer::from_json(&text)?)
        }
        None => None,
    };
    let mut cli = common.layer()?;
    extend(&mut cli);
    config::resolve(config::env_seed()?, file.as_ref(), &cli)
}

fn input_err(what: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", what.display()))
}

fn parse_query(text: &str) -> Result<Vec<u32>, CliError> {
    let body = match text.strip_prefix('@') {
        Some(path) => fs::read_to_string(path).map_err(|e| input_err(Path::new(path), e))?,
        None => text.to_string(),
    };
    let ids: Result<Vec<u32>, _> =
        body.split([',', ' ', '\n']).filter(|s| !s.trim().is_empty()).map(|s| s.trim().parse()).collect();
    match ids {
        Ok(ids) if !ids.is_empty() => Ok(ids),
        Ok(_) => Err(CliError::Input("--query holds no token ids".into())),
        Err(e) => Err(CliError::Input(format!("--query: {e}"))),
    }
}

fn decode(a: DecodeArgs) -> Result<(), CliError> {
    let cfg = resolve(&a.common, |l| a.method.extend(l))?;
    let missing = |flag: &str| CliError::Input(format!("missing required input {flag}"));
    let video_path = a.video.ok_or_else(|| missing("--video"))?;
    let det_path = a.detections.ok_or_else(|| missing("--detections"))?;
    let query_text = a.query.ok_or_else(|| missing("--query"))?;

    let video = read_video_tensor(&video_path).map_err(|e| input_err(&video_path, e))?;
    let dims = video.dims();
    let dets = parse_detections(&det_path, &cfg.tracker, Some(dims.t)).map_err(|e| input_err(&det_path, e))?;
    let ids = parse_query(&query_text)?;
    let backend = cfg.backend.connect()?;
    let query = TokenSequence::new(ids, backend.capabilities().vocab_size)
        .map_err(|e| CliError::Input(format!("--query: {e}")))?;

    let cf_seed = cfg.decode.seed.derive(1);
    let mut decode_cfg = cfg.decode.clone();
    let mut tracks = Vec::new();
    let (view, provenance) = match cfg.method {
        Method::Baseline => (None, None),
        Method::Vcd => {
            decode_cfg = DecodeConfig { contrast: Contrast::GenericCd, ..decode_cfg };
            (Some(noise_view(&video, cfg.noise_sigma, cf_seed)?), None)
        }
        Method::Counterfactual(kind) => {
            tracks = normalize_overlaps(&rasterize_soft_masks(
                &link_tracks(&dets, &cfg.tracker),
                (dims.h, dims.w),
                &cfg.tracker,
            ));
            let strategy =
                CounterfactualStrategy { noise_sigma: cfg.noise_sigma, ..CounterfactualStrategy::new(kind, cf_seed) };
            let (view, prov) = build_counterfactual(
                &strategy,
                &video,
                &tracks,
                &query,
                backend.as_ref(),
                &cfg.optimizer,
                &cfg.compose,
            )?;
            (Some(view), Some(prov))
        }
    };
    let (tokens, mut record) = decode_tokens(&video, view.as_ref(), &query, backend.as_ref(), &decode_cfg)?;
    record.grad_passes = provenance.as_ref().map_or(0, |p| p.grad_passes);

    let report = json!({
        "schema": DECODE_SCHEMA,
        "config": cfg,
        "inputs": {"video": video_path, "detections": det_path, "query": query.ids()},
        "tracks": tracks.len(),
        "tokens": tokens.ids(),
        "provenance": provenance,
        "record": record,
    });
    #[derive(Serialize)]
    struct Row {
        tokens: String,
        base_forwards: usize,
        cf_forwards: usize,
        grad_passes: usize,
        wall_time_ms: f64,
    }
    let row = Row {
        tokens: tokens.ids().iter().map(u32::to_string).collect::<Vec<_>>().join(" "),
        base_forwards: record.base_forwards,
        cf_forwards: record.cf_forwards,
        grad_passes: record.grad_passes,
        wall_time_ms: record.wall_time_ms,
    };
    emit(&report, &[row], &cfg.output)
}

fn suite_for(args: &SuiteArgs, cfg: &RunConfig) -> Result<(Vec<SyntheticCase>, bool), CliError> {
    match &args.suite_dir {
        Some(dir) => Ok((load_suite(dir).map_err(|e| input_err(dir, e))?, false)),
        None => Ok((cfg.suite.generate()?, true)),
    }
}

#[derive(Serialize)]
struct RunRow {
    method: String,
    cases: usize,
    failed: usize,
    accuracy: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
    precision: Option<f64>,
    recall: Option<f64>,
    f1: Option<f64>,
    false_yes_rate_absent: Option<f64>,
    mcnemar_p: Option<f64>,
    base_forwards: usize,
    cf_forwards: usize,
    grad_passes: usize,
    latency_mean_ms: f64,
}

impl From<&ExperimentReport> for RunRow {
    fn from(r: &ExperimentReport) -> Self {
        let m = &r.metrics;
        Self {
            method: r.config.method.to_string(),
            cases: m.cases,
            failed: m.failed,
            accuracy: m.accuracy,
            ci_low: m.ci_low,
            ci_high: m.ci_high,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            false_yes_rate_absent: m.false_yes_rate_absent,
            mcnemar_p: m.mcnemar_p,
            base_forwards: m.pass_counters.base_forwards,
            cf_forwards: m.pass_counters.cf_forwards,
            grad_passes: m.pass_counters.grad_passes,
            latency_mean_ms: m.latency_ms.mean,
        }
    }
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let cfg = resolve(&a.common, |l| {
        a.method.extend(l);
        a.suite.extend(l);
    })?;
    let (suite, generated) = suite_for(&a.suite, &cfg)?;
    let exp = cfg.experiment();
    let mut report = run_experiment(&suite, &exp)?;
    if exp.method != Method::Baseline && !a.no_compare {
        let baseline = run_experiment(&suite, &macd_core::eval::ExperimentConfig { method: Method::Baseline, ..exp })?;
        report.compare_with(&baseline);
    }
    if generated {
        report.suite = Some(cfg.suite.clone());
    }
    let value = serde_json::to_value(&report).map_err(|e| CliError::Other(e.to_string()))?;
    emit(&value, &[RunRow::from(&report)], &cfg.output)
}

#[derive(Serialize)]
struct AblationCsvRow {
    variant: String,
    method: String,
    precision_mean: Option<f64>,
    precision_se: Option<f64>,
    recall_mean: Option<f64>,
    recall_se: Option<f64>,
    f1_mean: Option<f64>,
    f1_se: Option<f64>,
    accuracy_mean: Option<f64>,
    accuracy_se: Option<f64>,
    false_yes_rate_mean: Option<f64>,
    false_yes_rate_se: Option<f64>,
}

fn ablation_rows(r: &AblationReport) -> Vec<AblationCsvRow> {
    let split = |m: &MeanSe| (m.mean, m.se);
    r.rows
        .iter()
        .map(|row| {
            let (precision_mean, precision_se) = split(&row.precision);
            let (recall_mean, recall_se) = split(&row.recall);
            let (f1_mean, f1_se) = split(&row.f1);
            let (accuracy_mean, accuracy_se) = split(&row.accuracy);
            let (false_yes_rate_mean, false_yes_rate_se) = split(&row.false_yes_rate_absent);
            AblationCsvRow {
                variant: row.variant.clone(),
                method: row.method.to_string(),
                precision_mean,
                precision_se,
                recall_mean,
                recall_se,
                f1_mean,
                f1_se,
                accuracy_mean,
                accuracy_se,
                false_yes_rate_mean,
                false_yes_rate_se,
            }
        })
        .collect()
}

fn ablate(a: AblateArgs) -> Result<(), CliError> {
    let cfg = resolve(&a.common, |l| {
        a.suite.extend(l);
        if let Some(s) = a.steps {
            l.set_text("optimizer.steps", s.to_string());
        }
    })?;
    if a.suite.suite_dir.is_some() {
        return Err(CliError::Config("ablate generates one suite per seed; --suite-dir is not supported".into()));
    }
    let methods: Vec<Method> = if a.strategies.is_empty() {
        Method::ABLATION.to_vec()
    } else {
        a.strategies.iter().map(|s| s.trim().parse().map_err(CliError::Config)).collect::<Result<_, _>>()?
    };
    let seeds: Vec<Seed> = if a.seeds.is_empty() {
        (0..5).map(|i| Seed(cfg.suite.seed.0.wrapping_add(i))).collect()
    } else {
        a.seeds.iter().copied().map(Seed).collect()
    };
    let report = run_ablation(cfg.suite.n, cfg.suite.bias_mix, &seeds, &methods, &cfg.experiment())?;
    eprint!("{}", report.table());
    let value = serde_json::to_value(&report).map_err(|e| CliError::Other(e.to_string()))?;
    emit(&value, &ablation_rows(&report), &cfg.output)
}

fn grid(a: GridArgs) -> Result<(), CliError> {
    let cfg = resolve(&a.common, |l| {
        a.method.extend(l);
        a.suite.extend(l);
    })?;
    if a.alphas.is_empty() && a.betas.is_empty() {
        return Err(CliError::Config("grid needs --alphas and/or --betas".into()));
    }
    let (suite, _) = suite_for(&a.suite, &cfg)?;
    let report: GridReport =
        run_grid(&suite, &cfg.experiment(), (&a.alphas, cfg.decode.beta), (&a.betas, cfg.decode.alpha))?;
    let value = serde_json::to_value(&report).map_err(|e| CliError::Other(e.to_string()))?;
    emit(&value, &report.rows, &cfg.output)
}

#[derive(Serialize)]
struct ProfileCsvRow {
    method: String,
    steps: Option<usize>,
    accuracy: Option<f64>,
    latency_mean_ms: f64,
    latency_p95_ms: f64,
    latency_ratio: Option<f64>,
    base_forwards_per_case: f64,
    cf_forwards_per_case: f64,
    grad_passes_per_case: f64,
}

fn profile(a: ProfileArgs) -> Result<(), CliError> {
    let cfg = resolve(&a.common, |l| a.suite.extend(l))?;
    let (suite, _) = suite_for(&a.suite, &cfg)?;
    let steps: Vec<usize> = a.steps.iter().map(|&s| s as usize).collect();
    let report: ProfileReport = run_profile(&suite, &cfg.experiment(), &steps)?;
    let rows: Vec<ProfileCsvRow> = report
        .rows
        .iter()
        .map(|r| ProfileCsvRow {
            method: r.method.to_string(),
            steps: r.steps,
            accuracy: r.accuracy,
            latency_mean_ms: r.latency_ms.mean,
            latency_p95_ms: r.latency_ms.p95,
            latency_ratio: r.latency_ratio,
            base_forwards_per_case: r.base_forwards_per_case,
            cf_forwards_per_case: r.cf_forwards_per_case,
            grad_passes_per_case: r.grad_passes_per_case,
        })
        .collect();
    let value = serde_json::to_value(&report).map_err(|e| CliError::Other(e.to_string()))?;
    emit(&value, &rows, &cfg.output)
}

fn gen_suite(a: GenSuiteArgs) -> Result<(), CliError> {
    let cfg = resolve(&a.common, |l| a.suite.extend(l))?;
    let suite = cfg.suite.generate()?;
    let files = materialize_suite(&suite, &a.out_dir).map_err(|e| input_err(&a.out_dir, e))?;
    eprintln!("wrote {} cases to {}", files.len(), a.out_dir.display());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let spec: BackendSpec = a.backend.parse()?;
    let backend = spec.connect()?;
    match a.listen {
        None => serve_protocol(backend.as_ref(), io::stdin().lock(), io::stdout().lock())
            .map_err(|e| CliError::Backend(e.to_string())),
        Some(addr) => {
            let listener =
                TcpListener::bind(&addr).map_err(|e| CliError::Config(format!("cannot listen on {addr}: {e}")))?;
            eprintln!("listening on {}", listener.local_addr().map_err(|e| CliError::Other(e.to_string()))?);
            for stream in listener.incoming() {
                let stream = stream.map_err(|e| CliError::Backend(e.to_string()))?;
                let reader = BufReader::new(stream.try_clone().map_err(|e| CliError::Backend(e.to_string()))?);
                if let Err(e) = serve_protocol(backend.as_ref(), reader, stream) {
                    log::warn!("connection ended: {e}");
                }
            }
            Ok(())
        }
    }
}
