//! Strength optimization and the family of counterfactual builders.
//!
//! MACD starts every strength at `r_init`, takes `steps` gradient-ascent steps
//! on the mean query loss (re-rendering the view each step), snaps the result
//! onto `{0, r0, 1}` and renders. The other strategies are the ablations:
//! fixed strengths, object masks only, noise in place of masks, and an
//! area-matched random mask.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{fd_gradient_with, BackendError, GradRequest, LossGrad, ModelBackend};
use crate::compose::{
    render_counterfactual, render_with_field, union_object_mask, ComposeConfig, ComposeError, CounterfactualView,
    FrameMaskPolicy, FrameMode, Fusion, Render, StrengthVector,
};
use crate::track::ObjectTrack;
use crate::video::{Seed, TokenSequence, VideoTensor};

/// Step used for finite-difference gradients of the noise strategies.
const NOISE_FD_STEP: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Video(#[from] crate::video::VideoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub r_init: f64,
    pub eta: f64,
    pub steps: usize,
    pub r0: f64,
    pub tie_eps: f64,
    /// Keep frame strengths at `r_init` while objects are optimized.
    pub freeze_frames: bool,
    /// Evaluate the loss once more after the last step.
    pub track_final_loss: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            r_init: 0.75,
            eta: 0.01,
            steps: 1,
            r0: 0.75,
            tie_eps: 1e-9,
            freeze_frames: false,
            track_final_loss: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        let bad = |m: String| Err(OptimizeError::InvalidConfig(m));
        if !(self.r0 > 0.0 && self.r0 < 1.0) {
            return bad(format!("r0 must be in (0,1), got {}", self.r0));
        }
        if !(0.0..=1.0).contains(&self.r_init) {
            return bad(format!("r_init must be in [0,1], got {}", self.r_init));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.tie_eps >= 0.0 && self.tie_eps.is_finite()) {
            return bad(format!("tie_eps must be non-negative, got {}", self.tie_eps));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum StrategyKind {
    Macd,
    NoMaskTraining,
    NoFrameMask,
    NoFrameMaskFrameExtraction,
    TrainableNoiseOnly,
    ObjectNoise,
    FrameNoise,
    RandomMask,
}

cli_names!(StrategyKind,
    StrategyKind::Macd => "macd",
    StrategyKind::NoMaskTraining => "fixed",
    StrategyKind::NoFrameMask => "noframe",
    StrategyKind::NoFrameMaskFrameExtraction => "noframe-extract",
    StrategyKind::TrainableNoiseOnly => "noise",
    StrategyKind::ObjectNoise => "objnoise",
    StrategyKind::FrameNoise => "framenoise",
    StrategyKind::RandomMask => "random",
);

impl TryFrom<String> for StrategyKind {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<StrategyKind> for String {
    fn from(k: StrategyKind) -> String {
        k.name().to_string()
    }
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        Self::Macd,
        Self::NoMaskTraining,
        Self::NoFrameMask,
        Self::NoFrameMaskFrameExtraction,
        Self::TrainableNoiseOnly,
        Self::ObjectNoise,
        Self::FrameNoise,
        Self::RandomMask,
    ];

    /// Strategies whose perturbation comes only from object tracks.
    pub fn needs_tracks(self) -> bool {
        matches!(self, Self::NoFrameMask | Self::ObjectNoise)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualStrategy {
    pub kind: StrategyKind,
    pub noise_seed: Seed,
    /// Scale of the Gaussian noise for the noise strategies, per unit strength.
    pub noise_sigma: f64,
}

impl CounterfactualStrategy {
    pub fn new(kind: StrategyKind, noise_seed: Seed) -> Self {
        Self { kind, noise_seed, noise_sigma: 0.5 }
    }
}

/// What a builder actually did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub requested: StrategyKind,
    pub strategy: StrategyKind,
    pub steps_used: usize,
    pub grad_passes: usize,
    /// Continuous strengths before discretization.
    pub continuous: StrengthVector,
    pub final_strengths: StrengthVector,
    pub losses: Vec<f64>,
    pub fallback: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimized {
    pub strengths: StrengthVector,
    /// Loss before each step, plus the final loss when tracked.
    pub losses: Vec<f64>,
    pub grad_passes: usize,
}

/// Snaps each strength onto `{0, r0, 1}` with a tie band of `tie_eps` around `r0`.
pub fn discretize(r: &StrengthVector, cfg: &OptimizerConfig) -> StrengthVector {
    r.map(|v| {
        if v > cfg.r0 + cfg.tie_eps {
            1.0
        } else if v < cfg.r0 - cfg.tie_eps {
            0.0
        } else {
            cfg.r0
        }
    })
}

fn ascend(
    mut r: StrengthVector,
    cfg: &OptimizerConfig,
    frames_free: bool,
    mut loss_grad: impl FnMut(&StrengthVector) -> Result<LossGrad, OptimizeError>,
    mut loss: impl FnMut(&StrengthVector) -> Result<f64, OptimizeError>,
) -> Result<Optimized, OptimizeError> {
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let lg = loss_grad(&r)?;
        losses.push(lg.loss);
        for (v, g) in r.object.iter_mut().zip(&lg.grad.object) {
            *v = (*v + cfg.eta * g).clamp(0.0, 1.0);
        }
        if frames_free {
            for (v, g) in r.frame.iter_mut().zip(&lg.grad.frame) {
                *v = (*v + cfg.eta * g).clamp(0.0, 1.0);
            }
        }
    }
    if cfg.track_final_loss {
        losses.push(loss(&r)?);
    }
    Ok(Optimized { strengths: r, losses, grad_passes: cfg.steps })
}

/// Gradient ascent on the mean query loss from all strengths at `r_init`.
pub fn optimize_strengths(
    base: &VideoTensor,
    tracks: &[ObjectTrack],
    query: &TokenSequence,
    backend: &dyn ModelBackend,
    cfg: &OptimizerConfig,
    compose: &ComposeConfig,
) -> Result<Optimized, OptimizeError> {
    cfg.validate()?;
    let init = StrengthVector::uniform(tracks.len(), base.dims().t, cfg.r_init);
    let frames_free = compose.policy.frames_trainable() && !cfg.freeze_frames;
    ascend(
        init,
        cfg,
        frames_free,
        |r| Ok(backend.loss_grad(&GradRequest { base_video: base, tracks, strengths: r, query, compose })?),
        |r| Ok(backend.strength_loss(&GradRequest { base_video: base, tracks, strengths: r, query, compose })?),
    )
}

/// Seeded standard-normal field with one value per video element.
fn noise_field(video: &VideoTensor, seed: Seed) -> Vec<f64> {
    let mut rng = seed.rng();
    (0..video.dims().len()).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `clamp(V + a * sigma * eps)` with per-pixel amplitude `a` (`T x H x W`).
fn render_noise(
    video: &VideoTensor,
    amplitude: Vec<f64>,
    eps: &[f64],
    sigma: f64,
    strengths: StrengthVector,
) -> Result<CounterfactualView, OptimizeError> {
    let c = video.dims().c;
    let values: Vec<f64> = video
        .data()
        .iter()
        .zip(eps)
        .enumerate()
        .map(|(i, (&v, &e))| (v as f64 + amplitude[i / c] * sigma * e).clamp(0.0, 1.0))
        .collect();
    Ok(CounterfactualView {
        video: VideoTensor::from_f64(video.dims(), &values)?,
        perturbation: amplitude,
        strengths,
        fusion: Fusion::PixelwiseMax,
        render: Render::AdditiveClamp,
    })
}

/// Untrained full-frame noise view, `clamp(V + sigma * eps)`.
pub fn noise_view(video: &VideoTensor, sigma: f64, seed: Seed) -> Result<CounterfactualView, OptimizeError> {
    let d = video.dims();
    let eps = noise_field(video, seed);
    render_noise(video, vec![1.0; d.t * d.frame_pixels()], &eps, sigma, StrengthVector::uniform(0, 0, 0.0))
}

/// Noise amplitude field for a noise strategy and its strengths.
fn noise_amplitude(
    kind: StrategyKind,
    video: &VideoTensor,
    tracks: &[ObjectTrack],
    r: &StrengthVector,
) -> Result<Vec<f64>, OptimizeError> {
    let d = video.dims();
    let hw = d.frame_pixels();
    Ok(match kind {
        StrategyKind::TrainableNoiseOnly => vec![r.object[0]; d.t * hw],
        StrategyKind::FrameNoise => (0..d.t).flat_map(|t| std::iter::repeat_n(r.frame[t], hw)).collect(),
        StrategyKind::ObjectNoise => {
            let mut a = Vec::with_capacity(d.t * hw);
            for t in 0..d.t {
                a.extend(union_object_mask(tracks, &r.object, Fusion::PixelwiseMax, t, (d.h, d.w))?);
            }
            a
        }
        other => unreachable!("{other} is not a noise strategy"),
    })
}

/// Cyclically shifts every frame of `z` by a random offset; per-frame sums are unchanged.
fn shuffle_field(z: &[f64], t: usize, h: usize, w: usize, seed: Seed) -> Vec<f64> {
    let mut rng = seed.rng();
    let mut out = vec![0.0; z.len()];
    for f in 0..t {
        let (dy, dx) = (rng.random_range(0..h), rng.random_range(0..w));
        for y in 0..h {
            for x in 0..w {
                out[(f * h + (y + dy) % h) * w + (x + dx) % w] = z[(f * h + y) * w + x];
            }
        }
    }
    out
}

/// Builds the counterfactual view for `strategy` and records how it was made.
pub fn build_counterfactual(
    strategy: &CounterfactualStrategy,
    base: &VideoTensor,
    tracks: &[ObjectTrack],
    query: &TokenSequence,
    backend: &dyn ModelBackend,
    cfg: &OptimizerConfig,
    compose: &ComposeConfig,
) -> Result<(CounterfactualView, Provenance), OptimizeError> {
    cfg.validate()?;
    let requested = strategy.kind;
    let mut fallback = None;
    let kind = if tracks.is_empty() && requested.needs_tracks() {
        log::warn!("strategy {requested} needs object tracks but none were found, using framenoise");
        fallback = Some(format!("no tracks: {requested} replaced by framenoise"));
        StrategyKind::FrameNoise
    } else {
        requested
    };
    let dims = base.dims();

    let masked = |policy: FrameMaskPolicy, optimize: bool| -> Result<_, OptimizeError> {
        let compose = ComposeConfig { policy, ..compose.clone() };
        let run = OptimizerConfig { steps: if optimize { cfg.steps } else { 0 }, ..cfg.clone() };
        let opt = optimize_strengths(base, tracks, query, backend, &run, &compose)?;
        let hat = discretize(&opt.strengths, cfg);
        let view = render_counterfactual(base, tracks, &hat, &compose)?;
        Ok((view, opt, hat))
    };

    let (view, opt, hat) = match kind {
        StrategyKind::Macd => masked(compose.policy.clone(), true)?,
        StrategyKind::NoMaskTraining => masked(compose.policy.clone(), false)?,
        StrategyKind::NoFrameMask => masked(FrameMaskPolicy::with_mode(FrameMode::None), true)?,
        StrategyKind::NoFrameMaskFrameExtraction => {
            masked(FrameMaskPolicy { mode: FrameMode::FrameExtraction, ..compose.policy.clone() }, true)?
        }
        StrategyKind::RandomMask => {
            let (view, opt, hat) = masked(compose.policy.clone(), true)?;
            let z = shuffle_field(&view.perturbation, dims.t, dims.h, dims.w, strategy.noise_seed);
            let compose = ComposeConfig { render: Render::OcclusionBlend, ..compose.clone() };
            (render_with_field(base, z, hat.clone(), &compose)?, opt, hat)
        }
        StrategyKind::TrainableNoiseOnly | StrategyKind::ObjectNoise | StrategyKind::FrameNoise => {
            let eps = noise_field(base, strategy.noise_seed);
            let init = match kind {
                StrategyKind::TrainableNoiseOnly => StrengthVector::uniform(1, 0, cfg.r_init),
                StrategyKind::ObjectNoise => StrengthVector::uniform(tracks.len(), 0, cfg.r_init),
                _ => StrengthVector::uniform(0, dims.t, cfg.r_init),
            };
            let loss = |r: &StrengthVector| -> Result<f64, OptimizeError> {
                let a = noise_amplitude(kind, base, tracks, r)?;
                let view = render_noise(base, a, &eps, strategy.noise_sigma, r.clone())?;
                Ok(backend.query_loss(&view.video, query)?)
            };
            let loss_grad = |r: &StrengthVector| -> Result<LossGrad, OptimizeError> {
                let fd = fd_gradient_with(r, NOISE_FD_STEP, loss)?;
                Ok(LossGrad { loss: loss(r)?, grad: fd.grad })
            };
            let opt = ascend(init, cfg, true, loss_grad, loss)?;
            let hat = discretize(&opt.strengths, cfg);
            let a = noise_amplitude(kind, base, tracks, &hat)?;
            (render_noise(base, a, &eps, strategy.noise_sigma, hat.clone())?, opt, hat)
        }
    };

    let provenance = Provenance {
        requested,
        strategy: kind,
        steps_used: opt.grad_passes,
        grad_passes: opt.grad_passes,
        continuous: opt.strengths,
        final_strengths: hat,
        losses: opt.losses,
        fallback,
    };
    Ok((view, provenance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::toy::tokens::{QUERY, VOCAB};
    use crate::backend::{ToyBackend, ToySurrogateParams};
    use crate::track::SoftMask;
    use crate::video::{BoundingBox, Dims};
    use proptest::prelude::*;

    fn sv(object: &[f64]) -> StrengthVector {
        StrengthVector::new(object.to_vec(), vec![]).unwrap()
    }

    #[test]
    fn discretize_examples() {
        let cfg = OptimizerConfig::default();
        assert_eq!(discretize(&sv(&[0.9, 0.75, 0.2]), &cfg).object, vec![1.0, 0.75, 0.0]);
        assert_eq!(discretize(&sv(&[0.75, 0.75]), &cfg), sv(&[0.75, 0.75]));
        assert_eq!(discretize(&sv(&[0.7499999999, 0.7500000001]), &cfg).object, vec![0.75, 0.75]);
    }

    proptest! {
        #[test]
        fn discretize_properties(a in proptest::collection::vec(0.0f64..=1.0, 1..8), shift in 0.0f64..0.5) {
            let cfg = OptimizerConfig::default();
            let ra = sv(&a);
            let rb = ra.map(|v| (v + shift).min(1.0));
            let (ha, hb) = (discretize(&ra, &cfg), discretize(&rb, &cfg));
            prop_assert_eq!(discretize(&ha, &cfg), ha.clone());
            prop_assert!(ha.iter().zip(hb.iter()).all(|(x, y)| x <= y));
            prop_assert!(ha.iter().all(|v| [0.0, 0.75, 1.0].contains(v)));
        }
    }

    /// Linear backend whose gradient is a fixed vector.
    struct Linear(Vec<f64>);

    impl ModelBackend for Linear {
        fn capabilities(&self) -> crate::backend::BackendCapabilities {
            crate::backend::BackendCapabilities { vocab_size: 2, supports_analytic_grad: true, max_frames: 8 }
        }

        fn logits(&self, _: &VideoTensor, _: &TokenSequence, _: &[u32]) -> Result<Vec<f64>, BackendError> {
            Ok(vec![0.0, 0.0])
        }

        fn loss_grad(&self, req: &GradRequest) -> Result<LossGrad, BackendError> {
            let loss = req.strengths.iter().zip(&self.0).map(|(r, a)| r * a).sum();
            let mut grad = req.strengths.map(|_| 0.0);
            (0..grad.len()).for_each(|i| grad.set(i, self.0[i]));
            Ok(LossGrad { loss, grad })
        }
    }

    fn tiny_video() -> VideoTensor {
        VideoTensor::filled(Dims::new(1, 2, 2, 1), 0.5).unwrap()
    }

    fn tiny_track() -> ObjectTrack {
        ObjectTrack {
            track_id: 0,
            class_id: 0,
            confidence: 0.9,
            first_frame: 0,
            boxes: vec![BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap()],
            observed: vec![true],
            detections: vec![0],
            masks: vec![SoftMask { h: 2, w: 2, data: vec![1.0, 0.0, 0.0, 0.0] }],
        }
    }

    #[test]
    fn zero_steps_returns_initial_strengths() {
        let q = TokenSequence::new(vec![1], 2).unwrap();
        let cfg = OptimizerConfig { steps: 0, ..Default::default() };
        let out = optimize_strengths(
            &tiny_video(),
            &[tiny_track()],
            &q,
            &Linear(vec![1.0, 1.0]),
            &cfg,
            &ComposeConfig::default(),
        )
        .unwrap();
        assert_eq!(out.strengths, StrengthVector::uniform(1, 1, 0.75));
        assert_eq!(out.grad_passes, 0);
    }

    #[test]
    fn one_step_is_linear_update() {
        let q = TokenSequence::new(vec![1], 2).unwrap();
        let out = optimize_strengths(
            &tiny_video(),
            &[tiny_track()],
            &q,
            &Linear(vec![0.1, -0.2]),
            &OptimizerConfig::default(),
            &ComposeConfig::default(),
        )
        .unwrap();
        assert!((out.strengths.object[0] - 0.751).abs() < 1e-12);
        assert!((out.strengths.frame[0] - 0.748).abs() < 1e-12);
        assert_eq!(out.grad_passes, 1);
    }

    #[test]
    fn frozen_frames_and_clamping() {
        let q = TokenSequence::new(vec![1], 2).unwrap();
        let cfg = OptimizerConfig { eta: 10.0, steps: 3, freeze_frames: true, ..Default::default() };
        let out = optimize_strengths(
            &tiny_video(),
            &[tiny_track()],
            &q,
            &Linear(vec![1.0, 1.0]),
            &cfg,
            &ComposeConfig::default(),
        )
        .unwrap();
        assert_eq!(out.strengths.object, vec![1.0]);
        assert_eq!(out.strengths.frame, vec![0.75]);
    }

    fn toy_case(seed: u64) -> (VideoTensor, Vec<ObjectTrack>) {
        let mut rng = Seed(seed).rng();
        let d = Dims::new(2, 8, 8, 3);
        let pixels: Vec<f32> = (0..d.len()).map(|_| rand::Rng::random::<f32>(&mut rng)).collect();
        let video = VideoTensor::new(d, pixels).unwrap();
        let mask = |x0: usize| SoftMask {
            h: 8,
            w: 8,
            data: (0..64).map(|i| f64::from(u8::from(i % 8 >= x0 && i % 8 < x0 + 3))).collect(),
        };
        let tracks = (0..2)
            .map(|k| ObjectTrack {
                track_id: k as u32,
                class_id: 0,
                confidence: 0.8,
                first_frame: 0,
                boxes: vec![BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(); 2],
                observed: vec![true; 2],
                detections: vec![],
                masks: vec![mask(4 * k), mask(4 * k)],
            })
            .collect();
        (video, tracks)
    }

    #[test]
    fn macd_without_steps_equals_fixed() {
        let (video, tracks) = toy_case(1);
        let toy = ToyBackend::new(ToySurrogateParams::task(Seed(1), true));
        let q = TokenSequence::new(QUERY.to_vec(), VOCAB).unwrap();
        let cfg = OptimizerConfig { steps: 0, ..Default::default() };
        let compose = ComposeConfig::default();
        let build = |kind| {
            build_counterfactual(&CounterfactualStrategy::new(kind, Seed(3)), &video, &tracks, &q, &toy, &cfg, &compose)
                .unwrap()
                .0
        };
        assert_eq!(build(StrategyKind::Macd), build(StrategyKind::NoMaskTraining));
    }

    #[test]
    fn zero_noise_scalar_is_identity() {
        let (video, _) = toy_case(2);
        let eps = noise_field(&video, Seed(4));
        let a = vec![0.0; 2 * 64];
        let view = render_noise(&video, a, &eps, 0.5, sv(&[0.0])).unwrap();
        assert_eq!(view.video, video);
    }

    #[test]
    fn random_mask_matches_area() {
        let (video, tracks) = toy_case(3);
        let toy = ToyBackend::new(ToySurrogateParams::task(Seed(3), true));
        let q = TokenSequence::new(QUERY.to_vec(), VOCAB).unwrap();
        let cfg = OptimizerConfig::default();
        let compose = ComposeConfig::default();
        let build = |kind| {
            build_counterfactual(&CounterfactualStrategy::new(kind, Seed(8)), &video, &tracks, &q, &toy, &cfg, &compose)
                .unwrap()
                .0
        };
        let (macd, random) = (build(StrategyKind::Macd), build(StrategyKind::RandomMask));
        let (a, b) = (macd.occluded_area(), random.occluded_area());
        assert!((a - b).abs() <= 0.01 * a.max(1e-12));
        assert_ne!(macd.perturbation, random.perturbation);
    }

    #[test]
    fn object_strategies_fall_back_without_tracks() {
        let (video, _) = toy_case(4);
        let toy = ToyBackend::new(ToySurrogateParams::task(Seed(4), true));
        let q = TokenSequence::new(QUERY.to_vec(), VOCAB).unwrap();
        let (_, prov) = build_counterfactual(
            &CounterfactualStrategy::new(StrategyKind::ObjectNoise, Seed(1)),
            &video,
            &[],
            &q,
            &toy,
            &OptimizerConfig::default(),
            &ComposeConfig::default(),
        )
        .unwrap();
        assert_eq!(prov.strategy, StrategyKind::FrameNoise);
        assert!(prov.fallback.is_some());
    }

    #[test]
    fn ascent_raises_loss() {
        let mut rising = 0;
        for seed in 0..10 {
            let (video, tracks) = toy_case(100 + seed);
            let toy = ToyBackend::new(ToySurrogateParams::random(Seed(seed), 12, 6, (2, 2)));
            let q = TokenSequence::new(vec![3, 5], 12).unwrap();
            let cfg = OptimizerConfig { steps: 5, track_final_loss: true, ..Default::default() };
            let out = optimize_strengths(&video, &tracks, &q, &toy, &cfg, &ComposeConfig::default()).unwrap();
            if out.losses.windows(2).all(|w| w[1] >= w[0]) {
                rising += 1;
            }
        }
        assert!(rising >= 9, "{rising}/10");
    }

    #[test]
    fn strategy_names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.name().parse::<StrategyKind>().unwrap(), k);
        }
    }
}
