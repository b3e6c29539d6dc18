//! Case pipeline, runs, ablations, grids and step profiles.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{paired_mcnemar, score_run, BootstrapConfig, LatencySummary, MetricsReport, PassCounters};
use super::stats::mean_se;
use super::suite::{generate_suite, CaseKind, Label, SyntheticCase};
use super::EvalError;
use crate::backend::{BackendSpec, ModelBackend};
use crate::compose::{ComposeConfig, StrengthVector};
use crate::decode::{decode, Contrast, DecodeConfig};
use crate::optimize::{build_counterfactual, noise_view, CounterfactualStrategy, OptimizerConfig, StrategyKind};
use crate::track::{
    link_tracks, normalize_overlaps, rasterize_soft_masks, read_detections, write_detections, TrackerConfig,
};
use crate::video::Seed;

pub const RUN_SCHEMA: &str = "macd.run/1";
pub const ABLATION_SCHEMA: &str = "macd.ablation/1";
pub const GRID_SCHEMA: &str = "macd.grid/1";
pub const PROFILE_SCHEMA: &str = "macd.profile/1";

/// How the answer is decoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    /// Plain decoding on the original video.
    Baseline,
    /// Log-probability contrast against an untrained noise view.
    Vcd,
    /// Logit contrast against a counterfactual built by the strategy.
    Counterfactual(StrategyKind),
}

impl Method {
    /// The seven variants in the order of the ablation table.
    pub const ABLATION: [Method; 7] = [
        Self::Counterfactual(StrategyKind::Macd),
        Self::Counterfactual(StrategyKind::NoMaskTraining),
        Self::Counterfactual(StrategyKind::NoFrameMask),
        Self::Counterfactual(StrategyKind::NoFrameMaskFrameExtraction),
        Self::Counterfactual(StrategyKind::TrainableNoiseOnly),
        Self::Counterfactual(StrategyKind::ObjectNoise),
        Self::Counterfactual(StrategyKind::FrameNoise),
    ];

    pub const MACD: Method = Self::Counterfactual(StrategyKind::Macd);

    /// Row label used in ablation tables.
    pub fn variant(self) -> &'static str {
        match self {
            Self::Baseline => "Baseline",
            Self::Vcd => "VCD",
            Self::Counterfactual(kind) => match kind {
                StrategyKind::Macd => "MACD",
                StrategyKind::NoMaskTraining => "No Mask Training",
                StrategyKind::NoFrameMask => "No Frame-level Mask",
                StrategyKind::NoFrameMaskFrameExtraction => "No Frame-level Mask + Frame Extraction",
                StrategyKind::TrainableNoiseOnly => "Trainable Noise Only",
                StrategyKind::ObjectNoise => "Object-level Trainable Noise",
                StrategyKind::FrameNoise => "Frame-level Trainable Noise",
                StrategyKind::RandomMask => "Random Mask",
            },
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Baseline => f.write_str("baseline"),
            Self::Vcd => f.write_str("vcd"),
            Self::Counterfactual(kind) => f.write_str(kind.name()),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "vcd" => Ok(Self::Vcd),
            other => {
                other.parse::<StrategyKind>().map(Self::Counterfactual).map_err(|e| format!("{e} | baseline | vcd"))
            }
        }
    }
}

impl TryFrom<String> for Method {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub backend: BackendSpec,
    pub decode: DecodeConfig,
    pub tracker: TrackerConfig,
    pub optimizer: OptimizerConfig,
    pub compose: ComposeConfig,
    /// Standard deviation of the noise used by noise strategies and VCD.
    pub noise_sigma: f64,
    pub bootstrap: BootstrapConfig,
    /// Worker threads; results never depend on this.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::MACD,
            backend: BackendSpec::Toy { seed: Seed(0), biased: true },
            decode: DecodeConfig::default(),
            tracker: TrackerConfig::default(),
            optimizer: OptimizerConfig::default(),
            compose: ComposeConfig::default(),
            noise_sigma: 0.5,
            bootstrap: BootstrapConfig::default(),
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        self.decode.validate()?;
        self.optimizer.validate()?;
        self.tracker.validate()?;
        self.compose.policy.validate(None)?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(EvalError::InvalidParameter(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.jobs == 0 {
            return Err(EvalError::InvalidParameter("jobs must be at least 1".into()));
        }
        Ok(())
    }

    fn with_method(&self, method: Method) -> Self {
        Self { method, ..self.clone() }
    }
}

/// Parameters a suite was generated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub n: usize,
    pub bias_mix: f64,
    pub seed: Seed,
}

impl SuiteSpec {
    pub fn generate(&self) -> Result<Vec<SyntheticCase>, EvalError> {
        generate_suite(self.n, self.bias_mix, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub index: usize,
    pub kind: CaseKind,
    pub label: Label,
    pub answer: Option<Label>,
    pub tokens: Vec<u32>,
    pub counters: PassCounters,
    pub tracks: usize,
    /// Strategy actually applied, which differs from the request after a fallback.
    pub strategy: Option<StrategyKind>,
    pub fallback: Option<String>,
    pub final_strengths: Option<StrengthVector>,
    pub latency_ms: f64,
    pub error: Option<String>,
}

impl CaseResult {
    pub fn correct(&self) -> Option<bool> {
        self.answer.map(|a| a == self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema: String,
    pub config: ExperimentConfig,
    pub suite: Option<SuiteSpec>,
    pub metrics: MetricsReport,
    pub cases: Vec<CaseResult>,
}

impl ExperimentReport {
    pub fn correctness(&self) -> Vec<Option<bool>> {
        self.cases.iter().map(CaseResult::correct).collect()
    }

    /// Fills the McNemar fields against `reference` run on the same suite.
    pub fn compare_with(&mut self, reference: &ExperimentReport) {
        let (p, method) = paired_mcnemar(&self.correctness(), &reference.correctness());
        self.metrics.mcnemar_p = Some(p);
        self.metrics.mcnemar_method = Some(method);
    }
}

struct Outcome {
    tokens: Vec<u32>,
    counters: PassCounters,
    tracks: usize,
    strategy: Option<StrategyKind>,
    fallback: Option<String>,
    final_strengths: Option<StrengthVector>,
}

fn run_case(case: &SyntheticCase, backend: &dyn ModelBackend, cfg: &ExperimentConfig) -> Result<Outcome, EvalError> {
    let cf_seed = case.case_seed.derive(1);
    let (cf, decode_cfg, provenance, tracks) = match cfg.method {
        Method::Baseline => (None, cfg.decode.clone(), None, 0),
        Method::Vcd => {
            let view = noise_view(&case.video, cfg.noise_sigma, cf_seed)?;
            (Some(view), DecodeConfig { contrast: Contrast::GenericCd, ..cfg.decode.clone() }, None, 0)
        }
        Method::Counterfactual(kind) => {
            let dims = case.video.dims();
            let mut jsonl = Vec::new();
            write_detections(&case.detections, &mut jsonl)?;
            let dets = read_detections(jsonl.as_slice(), &cfg.tracker, Some(dims.t))?;
            let tracks = link_tracks(&dets, &cfg.tracker);
            let tracks = normalize_overlaps(&rasterize_soft_masks(&tracks, (dims.h, dims.w), &cfg.tracker));
            let strategy =
                CounterfactualStrategy { noise_sigma: cfg.noise_sigma, ..CounterfactualStrategy::new(kind, cf_seed) };
            let (view, prov) = build_counterfactual(
                &strategy,
                &case.video,
                &tracks,
                &case.query,
                backend,
                &cfg.optimizer,
                &cfg.compose,
            )?;
            (Some(view), cfg.decode.clone(), Some(prov), tracks.len())
        }
    };
    let (tokens, record) = decode(&case.video, cf.as_ref(), &case.query, backend, &decode_cfg)?;
    Ok(Outcome {
        tokens: tokens.ids().to_vec(),
        counters: PassCounters {
            base_forwards: record.base_forwards,
            cf_forwards: record.cf_forwards,
            grad_passes: provenance.as_ref().map_or(0, |p| p.grad_passes),
        },
        tracks,
        strategy: provenance.as_ref().map(|p| p.strategy),
        fallback: provenance.as_ref().and_then(|p| p.fallback.clone()),
        final_strengths: provenance.map(|p| p.final_strengths),
    })
}

fn case_result(case: &SyntheticCase, backend: Result<&dyn ModelBackend, String>, cfg: &ExperimentConfig) -> CaseResult {
    let start = Instant::now();
    let outcome = backend.and_then(|b| run_case(case, b, cfg).map_err(|e| e.to_string()));
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut result = CaseResult {
        index: case.index,
        kind: case.kind,
        label: case.label,
        answer: None,
        tokens: Vec::new(),
        counters: PassCounters::default(),
        tracks: 0,
        strategy: None,
        fallback: None,
        final_strengths: None,
        latency_ms,
        error: None,
    };
    match outcome {
        Ok(o) => {
            result.answer = Some(Label::from_tokens(&o.tokens));
            result.tokens = o.tokens;
            result.counters = o.counters;
            result.tracks = o.tracks;
            result.strategy = o.strategy;
            result.fallback = o.fallback;
            result.final_strengths = o.final_strengths;
        }
        Err(e) => {
            log::warn!("case {} failed: {e}", case.index);
            result.error = Some(e);
        }
    }
    result
}

/// Runs every case through parse, track, counterfactual and decode.
///
/// Failed cases are recorded and excluded from the metrics. Results are
/// folded in case order, so `jobs` never changes the report.
pub fn run_experiment(suite: &[SyntheticCase], cfg: &ExperimentConfig) -> Result<ExperimentReport, EvalError> {
    cfg.validate()?;
    // connecting up front surfaces an unusable backend as a run error
    let backend = cfg.backend.connect()?;
    let cases: Vec<CaseResult> = if cfg.jobs == 1 {
        suite.iter().map(|c| case_result(c, Ok(backend.as_ref()), cfg)).collect()
    } else {
        drop(backend);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| EvalError::InvalidParameter(format!("worker pool: {e}")))?;
        pool.install(|| {
            suite
                .par_iter()
                .map_init(
                    || cfg.backend.connect().map_err(|e| e.to_string()),
                    |backend, case| {
                        let b = backend.as_ref().map(|b| b.as_ref()).map_err(Clone::clone);
                        case_result(case, b, cfg)
                    },
                )
                .collect()
        })
    };

    let ok: Vec<&CaseResult> = cases.iter().filter(|c| c.answer.is_some()).collect();
    let mut metrics = score_run(&ok.iter().map(|c| (c.label, c.answer)).collect::<Vec<_>>(), &cfg.bootstrap)?;
    metrics.failed = cases.len() - ok.len();
    metrics.cases = cases.len();
    metrics.latency_ms = LatencySummary::of(&ok.iter().map(|c| c.latency_ms).collect::<Vec<_>>());
    for c in &ok {
        metrics.pass_counters += c.counters;
    }
    Ok(ExperimentReport { schema: RUN_SCHEMA.into(), config: cfg.clone(), suite: None, metrics, cases })
}

/// Mean and standard error of a metric across seeds; undefined values are skipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: Option<f64>,
    pub se: Option<f64>,
    pub n: usize,
}

impl MeanSe {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        if v.is_empty() {
            return Self { mean: None, se: None, n: 0 };
        }
        let (mean, se) = mean_se(&v);
        Self { mean: Some(mean), se: Some(se), n: v.len() }
    }
}

impl fmt::Display for MeanSe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.mean, self.se) {
            (Some(m), Some(se)) => write!(f, "{m:.3} ± {se:.3}"),
            _ => f.write_str("n/a"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub method: Method,
    pub precision: MeanSe,
    pub recall: MeanSe,
    pub f1: MeanSe,
    pub accuracy: MeanSe,
    pub false_yes_rate_absent: MeanSe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: Seed,
    pub method: Method,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema: String,
    pub config: ExperimentConfig,
    pub suite_n: usize,
    pub bias_mix: f64,
    pub seeds: Vec<Seed>,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<SeedRun>,
}

impl AblationReport {
    pub fn row(&self, method: Method) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Plain-text table with one row per variant.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<40} {:>15} {:>15} {:>15} {:>15} {:>15}\n",
            "Variant", "Precision", "Recall", "F1", "Accuracy", "FalseYes(abs)"
        );
        for r in &self.rows {
            let name = if r.method == Method::MACD { r.variant.clone() } else { format!("- {}", r.variant) };
            out += &format!(
                "{:<40} {:>15} {:>15} {:>15} {:>15} {:>15}\n",
                name,
                r.precision.to_string(),
                r.recall.to_string(),
                r.f1.to_string(),
                r.accuracy.to_string(),
                r.false_yes_rate_absent.to_string()
            );
        }
        out
    }
}

/// Runs each method on one suite per seed. When the baseline is among the
/// methods, every other run carries a McNemar p-value against it.
pub fn run_ablation(
    n: usize,
    bias_mix: f64,
    seeds: &[Seed],
    methods: &[Method],
    cfg: &ExperimentConfig,
) -> Result<AblationReport, EvalError> {
    if seeds.is_empty() || methods.is_empty() {
        return Err(EvalError::InvalidParameter("ablation needs at least one seed and one method".into()));
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        let suite = generate_suite(n, bias_mix, seed)?;
        let reports: Vec<ExperimentReport> =
            methods.iter().map(|&m| run_experiment(&suite, &cfg.with_method(m))).collect::<Result<_, _>>()?;
        let baseline = methods.iter().position(|&m| m == Method::Baseline).map(|i| reports[i].clone());
        for (mut report, &method) in reports.into_iter().zip(methods) {
            if let (Some(base), true) = (&baseline, method != Method::Baseline) {
                report.compare_with(base);
            }
            runs.push(SeedRun { seed, method, metrics: report.metrics });
        }
    }
    let rows = methods
        .iter()
        .map(|&method| {
            let ms: Vec<&MetricsReport> = runs.iter().filter(|r| r.method == method).map(|r| &r.metrics).collect();
            let col = |f: fn(&MetricsReport) -> Option<f64>| MeanSe::of(ms.iter().map(|m| f(m)));
            AblationRow {
                variant: method.variant().into(),
                method,
                precision: col(|m| m.precision),
                recall: col(|m| m.recall),
                f1: col(|m| m.f1),
                accuracy: col(|m| m.accuracy),
                false_yes_rate_absent: col(|m| m.false_yes_rate_absent),
            }
        })
        .collect();
    Ok(AblationReport {
        schema: ABLATION_SCHEMA.into(),
        config: cfg.clone(),
        suite_n: n,
        bias_mix,
        seeds: seeds.to_vec(),
        rows,
        runs,
    })
}

/// Part I varies alpha at fixed beta, part II varies beta at fixed alpha.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridPart {
    I,
    II,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub part: GridPart,
    pub alpha: f64,
    pub beta: f64,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub false_yes_rate_absent: Option<f64>,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub schema: String,
    pub config: ExperimentConfig,
    pub rows: Vec<GridRow>,
}

/// Sweeps `alphas` at `beta` (part I), then `betas` at `alpha` (part II).
pub fn run_grid(
    suite: &[SyntheticCase],
    cfg: &ExperimentConfig,
    (alphas, beta): (&[f64], f64),
    (betas, alpha): (&[f64], f64),
) -> Result<GridReport, EvalError> {
    let points = alphas.iter().map(|&a| (GridPart::I, a, beta)).chain(betas.iter().map(|&b| (GridPart::II, alpha, b)));
    let mut rows = Vec::new();
    for (part, alpha, beta) in points {
        let point = ExperimentConfig { decode: DecodeConfig { alpha, beta, ..cfg.decode.clone() }, ..cfg.clone() };
        let m = run_experiment(suite, &point)?.metrics;
        rows.push(GridRow {
            part,
            alpha,
            beta,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            false_yes_rate_absent: m.false_yes_rate_absent,
            failed: m.failed,
        });
    }
    Ok(GridReport { schema: GRID_SCHEMA.into(), config: cfg.clone(), rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub method: Method,
    /// Optimization steps; `None` for the baseline.
    pub steps: Option<usize>,
    pub accuracy: Option<f64>,
    pub latency_ms: LatencySummary,
    /// Mean latency relative to the baseline row.
    pub latency_ratio: Option<f64>,
    pub base_forwards_per_case: f64,
    pub cf_forwards_per_case: f64,
    pub grad_passes_per_case: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub schema: String,
    pub config: ExperimentConfig,
    pub rows: Vec<ProfileRow>,
}

/// Baseline row followed by one MACD row per step count.
pub fn run_profile(
    suite: &[SyntheticCase],
    cfg: &ExperimentConfig,
    steps: &[usize],
) -> Result<ProfileReport, EvalError> {
    let mut points = vec![(Method::Baseline, None, cfg.clone())];
    for &s in steps {
        let optimizer = OptimizerConfig { steps: s, ..cfg.optimizer.clone() };
        points.push((Method::MACD, Some(s), ExperimentConfig { method: Method::MACD, optimizer, ..cfg.clone() }));
    }
    let mut rows: Vec<ProfileRow> = Vec::new();
    for (method, steps, point) in points {
        let m = run_experiment(suite, &point.with_method(method))?.metrics;
        let ok = (m.cases - m.failed).max(1) as f64;
        let baseline_mean = rows.first().map(|r| r.latency_ms.mean);
        rows.push(ProfileRow {
            method,
            steps,
            accuracy: m.accuracy,
            latency_ms: m.latency_ms,
            latency_ratio: baseline_mean.filter(|&b| b > 0.0).map(|b| m.latency_ms.mean / b),
            base_forwards_per_case: m.pass_counters.base_forwards as f64 / ok,
            cf_forwards_per_case: m.pass_counters.cf_forwards as f64 / ok,
            grad_passes_per_case: m.pass_counters.grad_passes as f64 / ok,
        });
    }
    if let Some(first) = rows.first_mut() {
        first.latency_ratio = Some(1.0);
    }
    Ok(ProfileReport { schema: PROFILE_SCHEMA.into(), config: cfg.clone(), rows })
}
