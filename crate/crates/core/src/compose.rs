//! Counterfactual view composition.
//!
//! Object masks are fused into one union mask per frame, combined with a
//! whole-frame mask into the perturbation field `Z`, and rendered onto the
//! base video. Strengths live inside both masks, so `Z` is the only thing the
//! renderer needs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::track::ObjectTrack;
use crate::video::{Dims, VideoError, VideoTensor};

/// Mid-gray fill used by the occlusion blend.
pub const DEFAULT_FILL: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("strength vector has {found} {what} entries, expected {expected}")]
    LengthMismatch { what: &'static str, expected: usize, found: usize },
    #[error("strength {value} outside [0,1]")]
    StrengthOutOfRange { value: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid frame policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Video(#[from] VideoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthVector {
    pub object: Vec<f64>,
    pub frame: Vec<f64>,
}

impl StrengthVector {
    pub fn new(object: Vec<f64>, frame: Vec<f64>) -> Result<Self, ComposeError> {
        if let Some(&value) = object.iter().chain(&frame).find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ComposeError::StrengthOutOfRange { value });
        }
        Ok(Self { object, frame })
    }

    pub fn uniform(k: usize, t: usize, value: f64) -> Self {
        Self { object: vec![value; k], frame: vec![value; t] }
    }

    pub fn len(&self) -> usize {
        self.object.len() + self.frame.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Objects first, then frames.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.object.iter().chain(&self.frame)
    }

    pub fn get(&self, i: usize) -> f64 {
        if i < self.object.len() {
            self.object[i]
        } else {
            self.frame[i - self.object.len()]
        }
    }

    pub fn set(&mut self, i: usize, v: f64) {
        let k = self.object.len();
        if i < k {
            self.object[i] = v
        } else {
            self.frame[i - k] = v
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { object: self.object.iter().map(|&v| f(v)).collect(), frame: self.frame.iter().map(|&v| f(v)).collect() }
    }

    fn check(&self, k: usize, t: usize) -> Result<(), ComposeError> {
        if self.object.len() != k {
            return Err(ComposeError::LengthMismatch { what: "object", expected: k, found: self.object.len() });
        }
        if self.frame.len() != t {
            return Err(ComposeError::LengthMismatch { what: "frame", expected: t, found: self.frame.len() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Fusion {
    #[default]
    #[serde(rename = "max")]
    PixelwiseMax,
    #[serde(rename = "confnorm")]
    ConfidenceNormalized,
    #[serde(rename = "avg")]
    SimpleAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Render {
    #[default]
    #[serde(rename = "blend")]
    OcclusionBlend,
    #[serde(rename = "addclamp")]
    AdditiveClamp,
}

cli_names!(Fusion,
    Fusion::PixelwiseMax => "max",
    Fusion::ConfidenceNormalized => "confnorm",
    Fusion::SimpleAverage => "avg",
);
cli_names!(Render, Render::OcclusionBlend => "blend", Render::AdditiveClamp => "addclamp");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameMode {
    #[default]
    Trainable,
    FixedSubset,
    None,
    FrameExtraction,
}

cli_names!(FrameMode,
    FrameMode::Trainable => "trainable",
    FrameMode::FixedSubset => "fixed-subset",
    FrameMode::None => "none",
    FrameMode::FrameExtraction => "frame-extraction",
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMaskPolicy {
    pub mode: FrameMode,
    #[serde(default)]
    pub subset: Vec<usize>,
    pub keep_stride: usize,
}

impl Default for FrameMaskPolicy {
    fn default() -> Self {
        Self { mode: FrameMode::Trainable, subset: Vec::new(), keep_stride: 2 }
    }
}

impl FrameMaskPolicy {
    pub fn with_mode(mode: FrameMode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn validate(&self, frames: Option<usize>) -> Result<(), ComposeError> {
        if self.keep_stride == 0 {
            return Err(ComposeError::InvalidPolicy("keep_stride must be positive".into()));
        }
        if let (Some(t), Some(&bad)) = (frames, self.subset.iter().find(|&&i| Some(i) >= frames)) {
            return Err(ComposeError::InvalidPolicy(format!("subset frame {bad} outside [0,{t})")));
        }
        Ok(())
    }

    /// Uniform mask value for frame `t`.
    pub fn level(&self, frame_r: &[f64], t: usize) -> f64 {
        match self.mode {
            FrameMode::Trainable => frame_r.get(t).copied().unwrap_or(0.0),
            FrameMode::FixedSubset => f64::from(u8::from(self.subset.contains(&t))),
            FrameMode::None => 0.0,
            FrameMode::FrameExtraction => f64::from(u8::from(!t.is_multiple_of(self.keep_stride))),
        }
    }

    /// Whether frame strengths influence the view under this policy.
    pub fn frames_trainable(&self) -> bool {
        self.mode == FrameMode::Trainable
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposeConfig {
    pub fusion: Fusion,
    pub render: Render,
    pub policy: FrameMaskPolicy,
    pub fill: f64,
}

impl Default for ComposeConfig {
    fn default() -> Self {
        Self {
            fusion: Fusion::default(),
            render: Render::default(),
            policy: FrameMaskPolicy::default(),
            fill: DEFAULT_FILL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualView {
    pub video: VideoTensor,
    /// `T x H x W` field in `[0, 1]`.
    pub perturbation: Vec<f64>,
    pub strengths: StrengthVector,
    pub fusion: Fusion,
    pub render: Render,
}

impl CounterfactualView {
    pub fn occluded_area(&self) -> f64 {
        self.perturbation.iter().sum()
    }
}

/// Fused object mask for frame `t`, `H x W`.
pub fn union_object_mask(
    tracks: &[ObjectTrack],
    object_r: &[f64],
    fusion: Fusion,
    t: usize,
    shape: (usize, usize),
) -> Result<Vec<f64>, ComposeError> {
    Ok(union_with_partials(tracks, object_r, fusion, t, shape, false)?.0)
}

/// Fused object mask plus, when requested, `dM/dr_k` for every track (`K x H x W`).
pub(crate) fn union_with_partials(
    tracks: &[ObjectTrack],
    object_r: &[f64],
    fusion: Fusion,
    t: usize,
    (h, w): (usize, usize),
    partials: bool,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), ComposeError> {
    if object_r.len() != tracks.len() {
        return Err(ComposeError::LengthMismatch { what: "object", expected: tracks.len(), found: object_r.len() });
    }
    let present: Vec<(usize, &[f64])> =
        tracks.iter().enumerate().filter_map(|(k, tr)| tr.mask_at(t).map(|m| (k, m.data.as_slice()))).collect();
    for (_, m) in &present {
        if m.len() != h * w {
            return Err(ComposeError::ShapeMismatch(format!("mask has {} pixels, frame has {}", m.len(), h * w)));
        }
    }
    let mut out = vec![0.0; h * w];
    let mut grads = if partials { vec![vec![0.0; h * w]; tracks.len()] } else { Vec::new() };
    for p in 0..h * w {
        match fusion {
            Fusion::PixelwiseMax => {
                let mut best: Option<(usize, f64)> = None;
                for &(k, m) in &present {
                    let v = object_r[k] * m[p];
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((k, v));
                    }
                }
                if let Some((k, v)) = best {
                    out[p] = v;
                    if partials {
                        grads[k][p] = tracks[k].mask_at(t).unwrap().data[p];
                    }
                }
            }
            Fusion::ConfidenceNormalized | Fusion::SimpleAverage => {
                let covering: Vec<(usize, f64)> =
                    present.iter().filter(|(_, m)| m[p] > 0.0).map(|&(k, m)| (k, m[p])).collect();
                if covering.is_empty() {
                    continue;
                }
                let conf_total: f64 = covering.iter().map(|&(k, _)| tracks[k].confidence).sum();
                let weight = |k: usize| match fusion {
                    Fusion::ConfidenceNormalized if conf_total > 0.0 => tracks[k].confidence / conf_total,
                    _ => 1.0 / covering.len() as f64,
                };
                let v: f64 = covering.iter().map(|&(k, m)| weight(k) * object_r[k] * m).sum();
                out[p] = v.clamp(0.0, 1.0);
                if partials && (0.0..1.0).contains(&v) {
                    for &(k, m) in &covering {
                        grads[k][p] = weight(k) * m;
                    }
                }
            }
        }
    }
    Ok((out, grads))
}

/// Whole-frame mask `M^f_t` as an `H x W` field.
pub fn frame_mask(policy: &FrameMaskPolicy, frame_r: &[f64], t: usize, shape: (usize, usize)) -> Vec<f64> {
    vec![policy.level(frame_r, t); shape.0 * shape.1]
}

/// Combines frame and object masks: `Z = Mf + Mo - Mf*Mo`.
///
/// Equal to the plain sum wherever either mask is zero, never exceeds 1, and
/// keeps `dZ/dMo = 1 - Mf` nonzero where the sum would otherwise saturate.
#[inline]
pub fn combine(mf: f64, mo: f64) -> f64 {
    mf + mo - mf * mo
}

/// Perturbation field `Z` for the whole video, `T x H x W`.
pub fn perturbation_field(
    dims: Dims,
    tracks: &[ObjectTrack],
    r: &StrengthVector,
    cfg: &ComposeConfig,
) -> Result<Vec<f64>, ComposeError> {
    r.check(tracks.len(), dims.t)?;
    cfg.policy.validate(Some(dims.t))?;
    let mut z = Vec::with_capacity(dims.t * dims.frame_pixels());
    for t in 0..dims.t {
        let mo = union_object_mask(tracks, &r.object, cfg.fusion, t, (dims.h, dims.w))?;
        let mf = cfg.policy.level(&r.frame, t);
        z.extend(mo.into_iter().map(|o| combine(mf, o)));
    }
    Ok(z)
}

/// Renders `V_d` in `f64` from a perturbation field.
pub fn render_values(video: &VideoTensor, z: &[f64], render: Render, fill: f64) -> Vec<f64> {
    let c = video.dims().c;
    video
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let v = v as f64;
            let zi = z[i / c];
            match render {
                Render::OcclusionBlend => v * (1.0 - zi) + fill * zi,
                Render::AdditiveClamp => (v + zi).clamp(0.0, 1.0),
            }
        })
        .collect()
}

/// Renders a view from an explicit perturbation field.
pub fn render_with_field(
    video: &VideoTensor,
    z: Vec<f64>,
    strengths: StrengthVector,
    cfg: &ComposeConfig,
) -> Result<CounterfactualView, ComposeError> {
    let dims = video.dims();
    if z.len() != dims.t * dims.frame_pixels() {
        return Err(ComposeError::ShapeMismatch(format!(
            "perturbation has {} entries, video has {} pixels",
            z.len(),
            dims.t * dims.frame_pixels()
        )));
    }
    let values = render_values(video, &z, cfg.render, cfg.fill);
    Ok(CounterfactualView {
        video: VideoTensor::from_f64(dims, &values)?,
        perturbation: z,
        strengths,
        fusion: cfg.fusion,
        render: cfg.render,
    })
}

pub fn render_counterfactual(
    video: &VideoTensor,
    tracks: &[ObjectTrack],
    r: &StrengthVector,
    cfg: &ComposeConfig,
) -> Result<CounterfactualView, ComposeError> {
    let z = perturbation_field(video.dims(), tracks, r, cfg)?;
    render_with_field(video, z, r.clone(), cfg)
}
