use macd_core::backend::toy::tokens::YES;
use macd_core::backend::BackendSpec;
use macd_core::compose::{ComposeConfig, Fusion};
use macd_core::decode::{decode, DecodeConfig};
use macd_core::eval::report::{strip_wall_clock, validate_report};
use macd_core::eval::suite::materialize_suite;
use macd_core::eval::{generate_suite, run_experiment, run_profile, CaseKind, ExperimentConfig, Method};
use macd_core::optimize::{build_counterfactual, CounterfactualStrategy, OptimizerConfig, StrategyKind};
use macd_core::track::{link_tracks, normalize_overlaps, parse_detections, rasterize_soft_masks, TrackerConfig};
use macd_core::video::{read_video_tensor, Seed, TokenSequence};

fn with(method: Method) -> ExperimentConfig {
    ExperimentConfig { method, ..Default::default() }
}

#[test]
fn files_on_disk_reproduce_the_in_memory_run() {
    let dir = tempfile::tempdir().unwrap();
    let suite = generate_suite(8, 0.5, Seed(21)).unwrap();
    let files = materialize_suite(&suite, dir.path()).unwrap();
    let cfg = with(Method::MACD);
    let report = run_experiment(&suite, &cfg).unwrap();
    let backend = cfg.backend.connect().unwrap();
    let tracker = TrackerConfig::default();
    for (f, result) in files.iter().zip(&report.cases) {
        let video = read_video_tensor(&f.video).unwrap();
        let dets = parse_detections(&f.detections, &tracker, Some(video.dims().t)).unwrap();
        let d = video.dims();
        let tracks = normalize_overlaps(&rasterize_soft_masks(&link_tracks(&dets, &tracker), (d.h, d.w), &tracker));
        let query = TokenSequence::new(f.query.clone(), 32).unwrap();
        let strategy = CounterfactualStrategy::new(StrategyKind::Macd, f.case_seed.derive(1));
        let (view, _) = build_counterfactual(
            &strategy,
            &video,
            &tracks,
            &query,
            backend.as_ref(),
            &OptimizerConfig::default(),
            &ComposeConfig::default(),
        )
        .unwrap();
        let (tokens, _) = decode(&video, Some(&view), &query, backend.as_ref(), &DecodeConfig::default()).unwrap();
        assert_eq!(tokens.ids(), result.tokens.as_slice());
    }
}

#[test]
fn fully_biased_suite_makes_the_baseline_say_yes() {
    let suite = generate_suite(40, 1.0, Seed(8)).unwrap();
    let report = run_experiment(&suite, &with(Method::Baseline)).unwrap();
    assert!(report.cases.iter().all(|c| c.tokens.first() == Some(&YES)));
    assert_eq!(report.metrics.false_yes_rate_absent, Some(1.0));
}

#[test]
fn unbiased_model_separates_the_suite() {
    // without the prior boost only the contra family fools the plain decoder
    let suite = generate_suite(60, 1.0, Seed(2)).unwrap();
    let cfg = ExperimentConfig { backend: BackendSpec::Toy { seed: Seed(0), biased: false }, ..with(Method::Baseline) };
    let report = run_experiment(&suite, &cfg).unwrap();
    for (c, case) in report.cases.iter().zip(&suite) {
        if case.margin.abs() > 0.2 {
            assert_eq!(c.correct(), Some(c.kind != CaseKind::Contra), "case {} ({:?})", c.index, c.kind);
        }
    }
}

#[test]
fn every_fusion_runs() {
    let suite = generate_suite(40, 0.5, Seed(3)).unwrap();
    for fusion in [Fusion::PixelwiseMax, Fusion::ConfidenceNormalized, Fusion::SimpleAverage] {
        let cfg = ExperimentConfig { compose: ComposeConfig { fusion, ..Default::default() }, ..with(Method::MACD) };
        let report = run_experiment(&suite, &cfg).unwrap();
        assert_eq!(report.metrics.failed, 0);
        let fyr = report.metrics.false_yes_rate_absent.unwrap();
        eprintln!("fusion {fusion}: false-yes rate {fyr:.3}");
    }
}

#[test]
fn step_profile_counts_passes() {
    let suite = generate_suite(20, 0.5, Seed(4)).unwrap();
    let profile = run_profile(&suite, &ExperimentConfig::default(), &[0, 1, 3]).unwrap();
    let passes: Vec<f64> = profile.rows.iter().map(|r| r.grad_passes_per_case).collect();
    assert_eq!(passes, vec![0.0, 0.0, 1.0, 3.0]);
    assert_eq!(profile.rows[0].cf_forwards_per_case, 0.0);
    assert!(profile.rows[1..].iter().all(|r| r.cf_forwards_per_case == r.base_forwards_per_case));
    let (one, three) = (profile.rows[2].accuracy.unwrap(), profile.rows[3].accuracy.unwrap());
    assert!((one - three).abs() <= 0.1, "steps 1 vs 3: {one} vs {three}");
    validate_report(&serde_json::to_value(&profile).unwrap()).unwrap();
}

#[test]
fn worker_count_does_not_change_the_report() {
    let suite = generate_suite(24, 0.5, Seed(6)).unwrap();
    for method in [Method::MACD, Method::Vcd, "noise".parse().unwrap()] {
        let one = run_experiment(&suite, &with(method)).unwrap();
        let four = run_experiment(&suite, &ExperimentConfig { jobs: 4, ..with(method) }).unwrap();
        let strip = |r: &macd_core::eval::ExperimentReport| {
            let mut v = serde_json::to_value(r).unwrap();
            v["config"]["jobs"] = serde_json::Value::Null;
            serde_json::to_string(&strip_wall_clock(&v)).unwrap()
        };
        assert_eq!(strip(&one), strip(&four));
        validate_report(&serde_json::to_value(&one).unwrap()).unwrap();
    }
}

#[test]
fn unreachable_backend_fails_the_run() {
    let cfg = ExperimentConfig { backend: "proto:127.0.0.1:1".parse().unwrap(), ..Default::default() };
    assert!(run_experiment(&generate_suite(2, 0.5, Seed(1)).unwrap(), &cfg).is_err());
}
