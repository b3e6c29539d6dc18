//! Seeded yes/no object-presence cases for the planted toy model.
//!
//! Scenes are gray frames with colored blocks: red is the queried object,
//! green a look-alike foil and blue a distractor (see the planted weights in
//! [`crate::backend::toy`]). Every case is drawn from one of four families
//! and rejection-sampled until its margin under the unjittered, unbiased
//! planted model falls in the family's band:
//!
//! * `present`: red shown, evidence clearly favors YES.
//! * `contra`: red shown next to heavy blue clutter, so the raw margin leans
//!   NO while the red evidence itself is strong.
//! * `trap`: no red, a green foil keeps the margin only mildly negative, so
//!   the biased model's YES prior wins.
//! * `clear`: no red and strongly negative margin.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::backend::toy::tokens::{NO, QUERY, VOCAB, YES};
use crate::backend::{ModelBackend, ToyBackend, ToySurrogateParams};
use crate::track::{parse_detections, write_detections, Detection, TrackerConfig};
use crate::video::{read_video_tensor, write_video_tensor, BoundingBox, Dims, Seed, TokenSequence, VideoTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Yes,
    No,
}

impl Label {
    /// Reads the answer from the first emitted token; anything but YES is a no.
    pub fn from_tokens(tokens: &[u32]) -> Self {
        if tokens.first() == Some(&YES) {
            Self::Yes
        } else {
            Self::No
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseKind {
    Present,
    Contra,
    Trap,
    Clear,
}

impl CaseKind {
    pub fn label(self) -> Label {
        match self {
            Self::Present | Self::Contra => Label::Yes,
            Self::Trap | Self::Clear => Label::No,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    fn channel(self) -> usize {
        self as usize
    }

    pub fn class_id(self) -> i64 {
        self as i64
    }
}

/// A block moving at constant integer velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub color: Color,
    /// Offset above the 0.5 gray level in the object's channel.
    pub amplitude: f64,
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
    pub vx: i64,
    pub vy: i64,
}

impl SceneObject {
    fn origin_at(&self, t: usize) -> (i64, i64) {
        (self.x + self.vx * t as i64, self.y + self.vy * t as i64)
    }

    pub fn box_at(&self, t: usize) -> BoundingBox {
        let (x, y) = self.origin_at(t);
        BoundingBox::new(x as f64, y as f64, (x + self.w) as f64, (y + self.h) as f64).expect("positive size")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteParams {
    pub frames: usize,
    pub size: usize,
    /// Share of yes-labeled cases drawn from the `contra` family.
    pub contra_frac: f64,
    pub background_sd: f64,
    /// Detection box padding around the true block, in pixels.
    pub det_pad: f64,
    pub det_jitter_sd: f64,
    pub det_drop_prob: f64,
    pub spurious_prob: f64,
}

impl Default for SuiteParams {
    fn default() -> Self {
        Self {
            frames: 4,
            size: 32,
            contra_frac: 0.2,
            background_sd: 0.02,
            det_pad: 1.5,
            det_jitter_sd: 0.4,
            det_drop_prob: 0.1,
            spurious_prob: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCase {
    pub index: usize,
    pub kind: CaseKind,
    pub label: Label,
    pub video: VideoTensor,
    pub detections: Vec<Detection>,
    pub query: TokenSequence,
    pub case_seed: Seed,
    pub objects: Vec<SceneObject>,
    /// YES minus NO logit under the unbiased planted model.
    pub margin: f64,
}

/// Scene statistics under the unbiased planted model.
#[derive(Debug, Clone, Copy)]
struct SceneStats {
    margin: f64,
    /// Margin lost when red and green blocks are removed.
    red_green: f64,
    /// Sum of red + green - blue pooled evidence, which drives the OBJ logit.
    obj_evidence: f64,
}

struct Planted(ToyBackend);

impl Planted {
    fn new() -> Self {
        Self(ToyBackend::new(ToySurrogateParams::planted(false)))
    }

    fn margin(&self, dims: Dims, data: &[f64]) -> f64 {
        let video = VideoTensor::from_f64(dims, data).expect("scene dims");
        let query = TokenSequence::new(QUERY.to_vec(), VOCAB).expect("query in vocabulary");
        let logits = self.0.logits(&video, &query, &[]).expect("planted model accepts the query");
        logits[YES as usize] - logits[NO as usize]
    }

    fn obj_evidence(&self, dims: Dims, data: &[f64]) -> f64 {
        self.0.pool_features(dims, data).chunks(3).map(|p| p[0] + p[1] - p[2]).sum()
    }
}

fn render(dims: Dims, background: &[f64], objects: &[SceneObject], keep: impl Fn(&SceneObject) -> bool) -> Vec<f64> {
    let mut data = background.to_vec();
    for obj in objects.iter().filter(|o| keep(o)) {
        for t in 0..dims.t {
            let (x0, y0) = obj.origin_at(t);
            for y in y0..y0 + obj.h {
                for x in x0..x0 + obj.w {
                    let i = dims.index(t, y as usize, x as usize, obj.color.channel());
                    data[i] = (0.5 + obj.amplitude).min(1.0);
                }
            }
        }
    }
    data
}

fn scene_stats(planted: &Planted, dims: Dims, background: &[f64], objects: &[SceneObject]) -> SceneStats {
    let full = render(dims, background, objects, |_| true);
    let blue_only = render(dims, background, objects, |o| o.color == Color::Blue);
    let margin = planted.margin(dims, &full);
    SceneStats {
        margin,
        red_green: margin - planted.margin(dims, &blue_only),
        obj_evidence: planted.obj_evidence(dims, &full),
    }
}

/// Size range and count range per color for a family.
fn family_layout(kind: CaseKind) -> &'static [(Color, (i64, i64), (usize, usize))] {
    match kind {
        CaseKind::Present => {
            &[(Color::Red, (8, 13), (1, 1)), (Color::Green, (4, 7), (0, 1)), (Color::Blue, (4, 7), (0, 1))]
        }
        CaseKind::Contra => {
            &[(Color::Red, (9, 13), (1, 1)), (Color::Green, (3, 5), (0, 1)), (Color::Blue, (9, 14), (1, 2))]
        }
        CaseKind::Trap => &[(Color::Green, (6, 11), (1, 1)), (Color::Blue, (4, 7), (0, 1))],
        CaseKind::Clear => &[(Color::Green, (9, 14), (1, 1)), (Color::Blue, (8, 13), (1, 1))],
    }
}

fn accepts(kind: CaseKind, s: &SceneStats) -> bool {
    match kind {
        CaseKind::Present => s.margin >= -0.5 && s.obj_evidence >= 0.15,
        CaseKind::Contra => (-3.2..=-1.6).contains(&s.margin) && s.red_green >= 1.5 && s.obj_evidence <= -0.15,
        CaseKind::Trap => (-3.5..=-1.3).contains(&s.margin) && s.obj_evidence >= 0.15,
        CaseKind::Clear => s.margin <= -4.5,
    }
}

fn separated(a: &SceneObject, b: &SceneObject, frames: usize, gap: i64) -> bool {
    (0..frames).all(|t| {
        let ((ax, ay), (bx, by)) = (a.origin_at(t), b.origin_at(t));
        ax + a.w + gap <= bx || bx + b.w + gap <= ax || ay + a.h + gap <= by || by + b.h + gap <= ay
    })
}

/// Places one object fully inside every frame and clear of `placed`.
fn place(
    rng: &mut ChaCha8Rng,
    color: Color,
    (lo, hi): (i64, i64),
    placed: &[SceneObject],
    p: &SuiteParams,
) -> Option<SceneObject> {
    let size = p.size as i64;
    let span = p.frames as i64 - 1;
    for _ in 0..50 {
        let (w, h) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
        let (vx, vy) = (rng.random_range(-1..=1), rng.random_range(-1..=1));
        let x_min = 0.max(-vx * span);
        let x_max = (size - w).min(size - w - vx * span);
        let y_min = 0.max(-vy * span);
        let y_max = (size - h).min(size - h - vy * span);
        if x_min > x_max || y_min > y_max {
            continue;
        }
        let obj = SceneObject {
            color,
            amplitude: rng.random_range(0.3..=0.5),
            x: rng.random_range(x_min..=x_max),
            y: rng.random_range(y_min..=y_max),
            w,
            h,
            vx,
            vy,
        };
        // leave room for padded, blurred masks between blocks
        if placed.iter().all(|o| separated(o, &obj, p.frames, 4)) {
            return Some(obj);
        }
    }
    None
}

fn draw_objects(rng: &mut ChaCha8Rng, kind: CaseKind, p: &SuiteParams) -> Option<Vec<SceneObject>> {
    let mut objects = Vec::new();
    for &(color, sizes, (min_n, max_n)) in family_layout(kind) {
        for _ in 0..rng.random_range(min_n..=max_n) {
            objects.push(place(rng, color, sizes, &objects, p)?);
        }
    }
    Some(objects)
}

fn detections_for(rng: &mut ChaCha8Rng, objects: &[SceneObject], p: &SuiteParams) -> Vec<Detection> {
    let jitter = Normal::new(0.0, p.det_jitter_sd).expect("valid sd");
    let size = p.size as f64;
    let mut dets = Vec::new();
    for t in 0..p.frames {
        for obj in objects {
            // interior frames may be missed; the tracker bridges them
            let interior = t > 0 && t + 1 < p.frames;
            if interior && rng.random_bool(p.det_drop_prob) {
                continue;
            }
            let b = obj.box_at(t);
            let mut c = || p.det_pad + jitter.sample(rng).abs();
            let padded =
                BoundingBox::new(b.x1 - c(), b.y1 - c(), b.x2 + c(), b.y2 + c()).expect("padding grows the box");
            dets.push(Detection {
                frame: t,
                bbox: padded.clamp_to(size, size).expect("object lies inside the frame"),
                class_id: obj.color.class_id(),
                confidence: rng.random_range(0.55..0.95),
            });
        }
        if rng.random_bool(p.spurious_prob / p.frames as f64) {
            let (w, h) = (rng.random_range(3.0..8.0), rng.random_range(3.0..8.0));
            let (x, y) = (rng.random_range(0.0..size - w), rng.random_range(0.0..size - h));
            dets.push(Detection {
                frame: t,
                bbox: BoundingBox::new(x, y, x + w, y + h).expect("positive size"),
                class_id: 3,
                confidence: rng.random_range(0.3..0.58),
            });
        }
    }
    dets
}

fn generate_case(index: usize, kind: CaseKind, case_seed: Seed, p: &SuiteParams, planted: &Planted) -> SyntheticCase {
    let dims = Dims::new(p.frames, p.size, p.size, 3);
    let mut rng = case_seed.rng();
    let noise = Normal::new(0.0, p.background_sd).expect("valid sd");
    loop {
        let background: Vec<f64> = (0..dims.len()).map(|_| (0.5 + noise.sample(&mut rng)).clamp(0.0, 1.0)).collect();
        let Some(objects) = draw_objects(&mut rng, kind, p) else { continue };
        let stats = scene_stats(planted, dims, &background, &objects);
        if !accepts(kind, &stats) {
            continue;
        }
        let data = render(dims, &background, &objects, |_| true);
        let detections = detections_for(&mut rng, &objects, p);
        return SyntheticCase {
            index,
            kind,
            label: kind.label(),
            video: VideoTensor::from_f64(dims, &data).expect("scene dims"),
            detections,
            query: TokenSequence::new(QUERY.to_vec(), VOCAB).expect("query in vocabulary"),
            case_seed,
            objects,
            margin: stats.margin,
        };
    }
}

/// `n` cases, half labeled yes (rounded up). `bias_mix` is the share of
/// no-labeled cases drawn from the `trap` family.
pub fn generate_suite(n: usize, bias_mix: f64, seed: Seed) -> Result<Vec<SyntheticCase>, EvalError> {
    generate_suite_with(&SuiteParams::default(), n, bias_mix, seed)
}

pub fn generate_suite_with(
    p: &SuiteParams,
    n: usize,
    bias_mix: f64,
    seed: Seed,
) -> Result<Vec<SyntheticCase>, EvalError> {
    if n == 0 {
        return Err(EvalError::InvalidParameter("suite size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&bias_mix) {
        return Err(EvalError::InvalidParameter(format!("bias_mix must be in [0,1], got {bias_mix}")));
    }
    if !(0.0..=1.0).contains(&p.contra_frac) || p.frames == 0 || p.size < 24 {
        return Err(EvalError::InvalidParameter("suite needs contra_frac in [0,1], frames >= 1, size >= 24".into()));
    }
    let n_yes = n.div_ceil(2);
    let n_no = n - n_yes;
    let n_contra = (n_yes as f64 * p.contra_frac).round() as usize;
    let n_trap = (n_no as f64 * bias_mix).round() as usize;
    let mut kinds: Vec<CaseKind> = std::iter::repeat_n(CaseKind::Contra, n_contra)
        .chain(std::iter::repeat_n(CaseKind::Present, n_yes - n_contra))
        .chain(std::iter::repeat_n(CaseKind::Trap, n_trap))
        .chain(std::iter::repeat_n(CaseKind::Clear, n_no - n_trap))
        .collect();
    kinds.shuffle(&mut seed.derive(u64::MAX).rng());
    let planted = Planted::new();
    Ok(kinds
        .into_iter()
        .enumerate()
        .map(|(i, kind)| generate_case(i, kind, seed.derive(i as u64), p, &planted))
        .collect())
}

/// File locations of a materialized case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFiles {
    pub index: usize,
    pub kind: CaseKind,
    pub label: Label,
    pub video: PathBuf,
    pub detections: PathBuf,
    pub query: Vec<u32>,
    pub case_seed: Seed,
    pub margin: f64,
}

/// Writes `case_NNNN.vtns` and `case_NNNN.jsonl` into `dir`.
pub fn materialize_case(case: &SyntheticCase, dir: &Path) -> Result<CaseFiles, EvalError> {
    fs::create_dir_all(dir)?;
    let stem = format!("case_{:04}", case.index);
    let video = dir.join(format!("{stem}.vtns"));
    let detections = dir.join(format!("{stem}.jsonl"));
    write_video_tensor(&case.video, &video)?;
    let mut out = BufWriter::new(File::create(&detections)?);
    write_detections(&case.detections, &mut out)?;
    out.flush()?;
    Ok(CaseFiles {
        index: case.index,
        kind: case.kind,
        label: case.label,
        video,
        detections,
        query: case.query.ids().to_vec(),
        case_seed: case.case_seed,
        margin: case.margin,
    })
}

/// Materializes every case plus a `manifest.jsonl` listing them by file name.
pub fn materialize_suite(cases: &[SyntheticCase], dir: &Path) -> Result<Vec<CaseFiles>, EvalError> {
    let files = cases.iter().map(|c| materialize_case(c, dir)).collect::<Result<Vec<_>, _>>()?;
    let mut manifest = BufWriter::new(File::create(dir.join("manifest.jsonl"))?);
    for f in &files {
        let relative = |p: &Path| p.file_name().map(PathBuf::from).unwrap_or_else(|| p.to_path_buf());
        let entry = CaseFiles { video: relative(&f.video), detections: relative(&f.detections), ..f.clone() };
        writeln!(manifest, "{}", serde_json::to_string(&entry)?)?;
    }
    manifest.flush()?;
    Ok(files)
}

/// Reads a suite written by [`materialize_suite`]. Relative paths in the
/// manifest resolve against `dir`; all detections are kept regardless of
/// confidence, since the pipeline applies its own threshold.
pub fn load_suite(dir: &Path) -> Result<Vec<SyntheticCase>, EvalError> {
    let manifest = fs::read_to_string(dir.join("manifest.jsonl"))?;
    let keep_all = TrackerConfig { det_threshold: 0.0, ..TrackerConfig::default() };
    let mut cases = Vec::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let f: CaseFiles = serde_json::from_str(line)?;
        let video = read_video_tensor(dir.join(&f.video))?;
        let detections = parse_detections(dir.join(&f.detections), &keep_all, Some(video.dims().t))?;
        let query = TokenSequence::new(f.query, VOCAB)
            .map_err(|e| EvalError::InvalidParameter(format!("case {}: {e}", f.index)))?;
        cases.push(SyntheticCase {
            index: f.index,
            kind: f.kind,
            label: f.label,
            video,
            detections,
            query,
            case_seed: f.case_seed,
            objects: Vec::new(),
            margin: f.margin,
        });
    }
    if cases.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = generate_suite(40, 0.5, Seed(3)).unwrap();
        let b = generate_suite(40, 0.5, Seed(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|c| c.label == Label::Yes).count(), 20);
        assert_eq!(a.iter().filter(|c| c.kind == CaseKind::Trap).count(), 10);
        assert_ne!(a, generate_suite(40, 0.5, Seed(4)).unwrap());
    }

    #[test]
    fn odd_sizes_round_yes_up() {
        let s = generate_suite(5, 0.0, Seed(1)).unwrap();
        assert_eq!(s.iter().filter(|c| c.label == Label::Yes).count(), 3);
        assert!(s.iter().all(|c| c.kind != CaseKind::Trap));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(generate_suite(0, 0.5, Seed(1)).is_err());
        assert!(generate_suite(4, 1.5, Seed(1)).is_err());
    }

    #[test]
    fn detections_cover_objects() {
        for case in generate_suite(20, 0.5, Seed(9)).unwrap() {
            for obj in &case.objects {
                for t in [0, case.video.dims().t - 1] {
                    let b = obj.box_at(t);
                    assert!(case.detections.iter().any(|d| d.frame == t
                        && d.bbox.x1 <= b.x1
                        && d.bbox.y1 <= b.y1
                        && d.bbox.x2 >= b.x2
                        && d.bbox.y2 >= b.y2));
                }
            }
        }
    }

    #[test]
    fn materialized_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cases = generate_suite(3, 0.5, Seed(2)).unwrap();
        let files = materialize_suite(&cases, dir.path()).unwrap();
        for (case, f) in cases.iter().zip(&files) {
            assert_eq!(crate::video::read_video_tensor(&f.video).unwrap(), case.video);
            let cfg = crate::track::TrackerConfig { det_threshold: 0.0, ..Default::default() };
            let dets = crate::track::parse_detections(&f.detections, &cfg, Some(case.video.dims().t)).unwrap();
            assert_eq!(dets, case.detections);
        }
        let loaded = load_suite(dir.path()).unwrap();
        for (a, b) in loaded.iter().zip(&cases) {
            assert_eq!(
                (&a.video, &a.detections, a.label, a.case_seed),
                (&b.video, &b.detections, b.label, b.case_seed)
            );
        }
    }
}
