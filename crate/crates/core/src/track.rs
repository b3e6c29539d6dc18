//! Detection ingest and temporal linking into soft-masked object tracks.
//!
//! Linking is greedy: at every frame all (track, detection) pairs of the same
//! class are scored by IoU against the track's constant-velocity prediction,
//! and pairs are accepted best-first. Short gaps are bridged by interpolating
//! box corners. Tracks are then rasterized into Gaussian-edged soft masks and
//! overlapping masks are rescaled by confidence so coverage never exceeds 1.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::video::BoundingBox;

/// Tracks shorter than `min_length` survive when their mean confidence reaches this.
pub const RETAIN_CONFIDENCE: f64 = 0.6;

/// Gaussian tails are cut this many sigmas outside the box.
const TAIL_SIGMAS: f64 = 4.0;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("malformed detection record on line {line_no}: {reason}")]
    MalformedRecord { line_no: usize, reason: String },
    #[error("detection on line {line_no} references frame {frame} outside the video")]
    FrameOutOfRange { line_no: usize, frame: i64 },
    #[error("invalid tracker config: {0}")]
    InvalidConfig(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub iou_gate: f64,
    pub motion_gate: f64,
    pub max_gap: usize,
    pub min_length: usize,
    pub min_mean_conf: f64,
    pub blur_sigma: f64,
    pub det_threshold: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            iou_gate: 0.3,
            motion_gate: 0.2,
            max_gap: 3,
            min_length: 2,
            min_mean_conf: 0.2,
            blur_sigma: 2.0,
            det_threshold: 0.5,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(TrackError::InvalidConfig(format!("{name} must be in [0,1], got {v}")))
            }
        };
        unit("iou_gate", self.iou_gate)?;
        unit("motion_gate", self.motion_gate)?;
        unit("min_mean_conf", self.min_mean_conf)?;
        unit("det_threshold", self.det_threshold)?;
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(TrackError::InvalidConfig(format!(
                "blur_sigma must be a finite non-negative number, got {}",
                self.blur_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: usize,
    pub bbox: BoundingBox,
    pub class_id: i64,
    pub confidence: f64,
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    frame: i64,
    bbox: Vec<f64>,
    class: i64,
    conf: f64,
}

/// Per-frame soft mask with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl SoftMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0.0; h * w] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub track_id: u32,
    pub class_id: i64,
    /// Mean confidence of the observed detections.
    pub confidence: f64,
    pub first_frame: usize,
    /// One box per frame of the span, interpolated across gaps.
    pub boxes: Vec<BoundingBox>,
    /// `false` where the box was interpolated.
    pub observed: Vec<bool>,
    /// Indices into the detection list this track was linked from.
    pub detections: Vec<usize>,
    /// One mask per frame of the span; empty until rasterized.
    pub masks: Vec<SoftMask>,
}

impl ObjectTrack {
    pub fn last_frame(&self) -> usize {
        self.first_frame + self.boxes.len() - 1
    }

    pub fn span_len(&self) -> usize {
        self.boxes.len()
    }

    pub fn covers(&self, t: usize) -> bool {
        t >= self.first_frame && t <= self.last_frame()
    }

    pub fn mask_at(&self, t: usize) -> Option<&SoftMask> {
        if self.covers(t) {
            self.masks.get(t - self.first_frame)
        } else {
            None
        }
    }

    pub fn box_at(&self, t: usize) -> Option<&BoundingBox> {
        self.covers(t).then(|| &self.boxes[t - self.first_frame])
    }
}

pub fn parse_detections(
    path: impl AsRef<Path>,
    cfg: &TrackerConfig,
    frame_count: Option<usize>,
) -> Result<Vec<Detection>, TrackError> {
    read_detections(File::open(path)?, cfg, frame_count)
}

/// Parses newline-delimited detection records, keeping those at or above
/// `cfg.det_threshold`. The result is sorted by frame; records within a frame
/// keep their file order.
pub fn read_detections(
    input: impl Read,
    cfg: &TrackerConfig,
    frame_count: Option<usize>,
) -> Result<Vec<Detection>, TrackError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| TrackError::MalformedRecord { line_no, reason };
        let rec: DetectionRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if rec.bbox.len() != 4 {
            return Err(malformed(format!("bbox needs 4 coordinates, got {}", rec.bbox.len())));
        }
        let bbox = BoundingBox::new(rec.bbox[0], rec.bbox[1], rec.bbox[2], rec.bbox[3])
            .ok_or_else(|| malformed(format!("degenerate bbox {:?}", rec.bbox)))?;
        if !(0.0..=1.0).contains(&rec.conf) {
            return Err(malformed(format!("confidence {} outside [0,1]", rec.conf)));
        }
        let in_range = rec.frame >= 0 && frame_count.is_none_or(|t| (rec.frame as usize) < t);
        if !in_range {
            return Err(TrackError::FrameOutOfRange { line_no, frame: rec.frame });
        }
        if rec.conf >= cfg.det_threshold {
            out.push(Detection { frame: rec.frame as usize, bbox, class_id: rec.class, confidence: rec.conf });
        }
    }
    out.sort_by_key(|d| d.frame);
    Ok(out)
}

/// Writes detections as newline-delimited records readable by [`read_detections`].
pub fn write_detections(dets: &[Detection], mut out: impl Write) -> Result<(), TrackError> {
    for d in dets {
        let b = &d.bbox;
        let rec = DetectionRecord {
            frame: d.frame as i64,
            bbox: vec![b.x1, b.y1, b.x2, b.y2],
            class: d.class_id,
            conf: d.confidence,
        };
        let line = serde_json::to_string(&rec).expect("detection records always serialize");
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Intersection-over-union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

struct Builder {
    id: u32,
    class_id: i64,
    first_frame: usize,
    boxes: Vec<BoundingBox>,
    observed: Vec<bool>,
    detections: Vec<usize>,
    confs: Vec<f64>,
}

impl Builder {
    fn last_frame(&self) -> usize {
        self.first_frame + self.boxes.len() - 1
    }

    fn observations(&self) -> impl DoubleEndedIterator<Item = (usize, &BoundingBox)> {
        self.boxes.iter().enumerate().filter(|(i, _)| self.observed[*i]).map(|(i, b)| (self.first_frame + i, b))
    }

    /// Constant-velocity prediction from the last two observed boxes.
    fn predict(&self, frame: usize) -> (BoundingBox, bool) {
        let mut obs = self.observations().rev();
        let (f2, last) = obs.next().expect("track has an observation");
        match obs.next() {
            Some((f1, prev)) => {
                let (cx2, cy2) = last.center();
                let (cx1, cy1) = prev.center();
                let dt = (f2 - f1) as f64;
                let ahead = (frame - f2) as f64;
                let pred = last.translate((cx2 - cx1) / dt * ahead, (cy2 - cy1) / dt * ahead);
                (pred, true)
            }
            None => (*last, false),
        }
    }

    fn push(&mut self, frame: usize, det_index: usize, det: &Detection) {
        let last_frame = self.last_frame();
        let last = *self.boxes.last().expect("non-empty");
        let gap = frame - last_frame;
        for step in 1..gap {
            self.boxes.push(last.lerp(&det.bbox, step as f64 / gap as f64));
            self.observed.push(false);
        }
        self.boxes.push(det.bbox);
        self.observed.push(true);
        self.detections.push(det_index);
        self.confs.push(det.confidence);
    }
}

/// Links frame-sorted detections into tracks (masks left empty).
pub fn link_tracks(dets: &[Detection], cfg: &TrackerConfig) -> Vec<ObjectTrack> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by_key(|&i| dets[i].frame);

    let mut by_frame: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in order {
        by_frame.entry(dets[i].frame).or_default().push(i);
    }

    let mut builders: Vec<Builder> = Vec::new();
    let mut active: Vec<usize> = Vec::new();
    for (&frame, frame_dets) in &by_frame {
        active.retain(|&b| frame - builders[b].last_frame() <= cfg.max_gap + 1);

        let mut pairs: Vec<(f64, u32, usize, usize)> = Vec::new();
        for &b in &active {
            let builder = &builders[b];
            let (pred, has_motion) = builder.predict(frame);
            let gate = if has_motion { cfg.motion_gate } else { cfg.iou_gate };
            for (pos, &d) in frame_dets.iter().enumerate() {
                if dets[d].class_id != builder.class_id {
                    continue;
                }
                let score = iou(&dets[d].bbox, &pred);
                if score > 0.0 && score >= gate {
                    pairs.push((score, builder.id, pos, b));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut det_taken = vec![false; frame_dets.len()];
        let mut track_taken: Vec<usize> = Vec::new();
        for (_, _, pos, b) in pairs {
            if det_taken[pos] || track_taken.contains(&b) {
                continue;
            }
            det_taken[pos] = true;
            track_taken.push(b);
            let d = frame_dets[pos];
            builders[b].push(frame, d, &dets[d]);
        }
        for (pos, &d) in frame_dets.iter().enumerate() {
            if det_taken[pos] {
                continue;
            }
            let id = builders.len() as u32;
            builders.push(Builder {
                id,
                class_id: dets[d].class_id,
                first_frame: frame,
                boxes: vec![dets[d].bbox],
                observed: vec![true],
                detections: vec![d],
                confs: vec![dets[d].confidence],
            });
            active.push(builders.len() - 1);
        }
    }

    builders
        .into_iter()
        .filter_map(|b| {
            let mean_conf = b.confs.iter().sum::<f64>() / b.confs.len() as f64;
            let long_enough = b.boxes.len() >= cfg.min_length || mean_conf >= RETAIN_CONFIDENCE;
            (long_enough && mean_conf >= cfg.min_mean_conf).then(|| ObjectTrack {
                track_id: b.id,
                class_id: b.class_id,
                confidence: mean_conf,
                first_frame: b.first_frame,
                boxes: b.boxes,
                observed: b.observed,
                detections: b.detections,
                masks: Vec::new(),
            })
        })
        .collect()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Box indicator along one axis blurred by a Gaussian, evaluated at pixel centers
/// and scaled so the value at the box center is 1.
fn axis_profile(lo: f64, hi: f64, n: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return (0..n)
            .map(|i| {
                let c = i as f64 + 0.5;
                if c >= lo && c < hi {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
    }
    let blur = |c: f64| normal_cdf((c - lo) / sigma) - normal_cdf((c - hi) / sigma);
    let peak = blur(0.5 * (lo + hi));
    (0..n)
        .map(|i| {
            let c = i as f64 + 0.5;
            if c < lo - TAIL_SIGMAS * sigma || c > hi + TAIL_SIGMAS * sigma {
                0.0
            } else {
                (blur(c) / peak).clamp(0.0, 1.0)
            }
        })
        .collect()
}

/// Renders one soft mask per frame of each track's span.
pub fn rasterize_soft_masks(tracks: &[ObjectTrack], shape: (usize, usize), cfg: &TrackerConfig) -> Vec<ObjectTrack> {
    let (h, w) = shape;
    tracks
        .iter()
        .map(|track| {
            let masks = track
                .boxes
                .iter()
                .map(|b| match b.clamp_to(w as f64, h as f64) {
                    Some(b) => {
                        let px = axis_profile(b.x1, b.x2, w, cfg.blur_sigma);
                        let py = axis_profile(b.y1, b.y2, h, cfg.blur_sigma);
                        let mut data = Vec::with_capacity(h * w);
                        for fy in &py {
                            data.extend(px.iter().map(|fx| fy * fx));
                        }
                        SoftMask { h, w, data }
                    }
                    None => SoftMask::zeros(h, w),
                })
                .collect();
            ObjectTrack { masks, ..track.clone() }
        })
        .collect()
}

/// Rescales masks wherever their sum exceeds 1: each mask is multiplied by
/// `min(1, c_k / sum_j c_j m_j)`, so the per-pixel sum is at most 1 and no
/// mask ever grows. Pixels with sum <= 1 are left untouched.
pub fn normalize_overlaps(tracks: &[ObjectTrack]) -> Vec<ObjectTrack> {
    let mut out = tracks.to_vec();
    let Some(last) = tracks.iter().filter(|t| !t.masks.is_empty()).map(|t| t.last_frame()).max() else {
        return out;
    };
    for t in 0..=last {
        let present: Vec<usize> = (0..tracks.len()).filter(|&k| tracks[k].mask_at(t).is_some()).collect();
        if present.len() < 2 {
            continue;
        }
        let (h, w) = {
            let m = tracks[present[0]].mask_at(t).unwrap();
            (m.h, m.w)
        };
        for p in 0..h * w {
            let vals: Vec<f64> = present.iter().map(|&k| tracks[k].mask_at(t).unwrap().data[p]).collect();
            let sum: f64 = vals.iter().sum();
            if sum <= 1.0 {
                continue;
            }
            let weighted: f64 = present.iter().zip(&vals).map(|(&k, m)| tracks[k].confidence * m).sum();
            for (&k, &m) in present.iter().zip(&vals) {
                let scale = if weighted > 0.0 { (tracks[k].confidence / weighted).min(1.0) } else { 1.0 / sum };
                let local = t - out[k].first_frame;
                out[k].masks[local].data[p] = m * scale;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(frame: usize, b: BoundingBox, class_id: i64, confidence: f64) -> Detection {
        Detection { frame, bbox: b, class_id, confidence }
    }

    fn track_with_mask(conf: f64, value: f64) -> ObjectTrack {
        ObjectTrack {
            track_id: 0,
            class_id: 0,
            confidence: conf,
            first_frame: 0,
            boxes: vec![bb(0.0, 0.0, 1.0, 1.0)],
            observed: vec![true],
            detections: vec![0],
            masks: vec![SoftMask { h: 1, w: 1, data: vec![value] }],
        }
    }

    #[test]
    fn threshold_filters_records() {
        let src = r#"{"frame":0,"bbox":[0,0,4,4],"class":1,"conf":0.3}
{"frame":0,"bbox":[0,0,4,4],"class":1,"conf":0.5,"extra":"ignored"}
{"frame":1,"bbox":[0,0,4,4],"class":1,"conf":0.7}
"#;
        let cfg = TrackerConfig::default();
        assert_eq!(read_detections(src.as_bytes(), &cfg, None).unwrap().len(), 2);
        let strict = TrackerConfig { det_threshold: 0.7, ..cfg };
        assert_eq!(read_detections(src.as_bytes(), &strict, None).unwrap().len(), 1);
    }

    #[test]
    fn malformed_and_out_of_range_records() {
        let cfg = TrackerConfig::default();
        let missing = r#"{"frame":0,"bbox":[0,0,4],"class":1,"conf":0.9}"#;
        assert!(matches!(
            read_detections(missing.as_bytes(), &cfg, None),
            Err(TrackError::MalformedRecord { line_no: 1, .. })
        ));
        let no_conf = "\n{\"frame\":0,\"bbox\":[0,0,4,4],\"class\":1}";
        assert!(matches!(
            read_detections(no_conf.as_bytes(), &cfg, None),
            Err(TrackError::MalformedRecord { line_no: 2, .. })
        ));
        let late = r#"{"frame":5,"bbox":[0,0,4,4],"class":1,"conf":0.9}"#;
        assert!(matches!(
            read_detections(late.as_bytes(), &cfg, Some(5)),
            Err(TrackError::FrameOutOfRange { frame: 5, .. })
        ));
        let negative = r#"{"frame":-1,"bbox":[0,0,4,4],"class":1,"conf":0.9}"#;
        assert!(matches!(read_detections(negative.as_bytes(), &cfg, None), Err(TrackError::FrameOutOfRange { .. })));
    }

    #[test]
    fn parsed_detections_sorted_stably() {
        let src = r#"{"frame":2,"bbox":[0,0,4,4],"class":1,"conf":0.9}
{"frame":0,"bbox":[1,0,4,4],"class":1,"conf":0.9}
{"frame":0,"bbox":[2,0,4,4],"class":1,"conf":0.9}
"#;
        let d = read_detections(src.as_bytes(), &TrackerConfig::default(), None).unwrap();
        let xs: Vec<f64> = d.iter().map(|d| d.bbox.x1).collect();
        assert_eq!(xs, vec![1.0, 2.0, 0.0]);
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((iou(&a, &bb(5.0, 5.0, 15.0, 15.0)) - 25.0 / 175.0).abs() < 1e-12);
    }

    #[test]
    fn steady_chain_is_one_track() {
        let dets: Vec<_> = (0..5).map(|t| det(t, bb(0.0, 0.0, 10.0, 10.0), 0, 0.9)).collect();
        let tracks = link_tracks(&dets, &TrackerConfig::default());
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].span_len(), 5);
    }

    #[test]
    fn gap_is_bridged_by_interpolation() {
        let dets = vec![det(0, bb(0.0, 0.0, 10.0, 10.0), 0, 0.9), det(2, bb(4.0, 0.0, 14.0, 10.0), 0, 0.9)];
        let tracks = link_tracks(&dets, &TrackerConfig::default());
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].boxes[1], bb(2.0, 0.0, 12.0, 10.0));
        assert_eq!(tracks[0].observed, vec![true, false, true]);
    }

    #[test]
    fn gap_longer_than_max_gap_splits_tracks() {
        let cfg = TrackerConfig { max_gap: 1, ..TrackerConfig::default() };
        let dets = vec![
            det(0, bb(0.0, 0.0, 10.0, 10.0), 0, 0.9),
            det(1, bb(0.0, 0.0, 10.0, 10.0), 0, 0.9),
            det(4, bb(0.0, 0.0, 10.0, 10.0), 0, 0.9),
            det(5, bb(0.0, 0.0, 10.0, 10.0), 0, 0.9),
        ];
        assert_eq!(link_tracks(&dets, &cfg).len(), 2);
    }

    #[test]
    fn motion_prediction_follows_fast_object() {
        // 6 px/frame on a 10 px box: IoU with the last box is only 0.25,
        // but the constant-velocity prediction overlaps exactly.
        let dets: Vec<_> =
            (0..4).map(|t| det(t, bb(6.0 * t as f64, 0.0, 6.0 * t as f64 + 10.0, 10.0), 0, 0.9)).collect();
        let cfg = TrackerConfig { iou_gate: 0.2, ..TrackerConfig::default() };
        let tracks = link_tracks(&dets, &cfg);
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].span_len(), 4);
    }

    #[test]
    fn classes_never_mix() {
        let dets = vec![det(0, bb(0.0, 0.0, 10.0, 10.0), 0, 0.9), det(1, bb(0.0, 0.0, 10.0, 10.0), 1, 0.9)];
        let tracks = link_tracks(&dets, &TrackerConfig::default());
        assert_eq!(tracks.len(), 2);
    }

    #[test]
    fn two_parallel_objects_match_brute_force() {
        let left = |t: usize| bb(t as f64, 0.0, t as f64 + 8.0, 8.0);
        let right = |t: usize| bb(20.0 + t as f64, 0.0, 28.0 + t as f64, 8.0);
        let mut dets = Vec::new();
        for t in 0..4 {
            // alternate file order so the greedy pass cannot lean on it
            if t % 2 == 0 {
                dets.push(det(t, left(t), 0, 0.9));
                dets.push(det(t, right(t), 0, 0.9));
            } else {
                dets.push(det(t, right(t), 0, 0.9));
                dets.push(det(t, left(t), 0, 0.9));
            }
        }
        let tracks = link_tracks(&dets, &TrackerConfig::default());
        assert_eq!(tracks.len(), 2);
        for t in 1..4 {
            // brute force over both assignments of frame t's boxes to the two tracks
            let prev = [left(t - 1), right(t - 1)];
            let cur = [left(t), right(t)];
            let identity = iou(&prev[0], &cur[0]) + iou(&prev[1], &cur[1]);
            let swapped = iou(&prev[0], &cur[1]) + iou(&prev[1], &cur[0]);
            assert!(identity > swapped);
        }
        for tr in &tracks {
            let x0 = tr.boxes[0].x1;
            assert!(tr.boxes.iter().all(|b| (b.x1 - x0).abs() < 5.0));
        }
    }

    #[test]
    fn short_tracks_need_high_confidence() {
        let cfg = TrackerConfig::default();
        let weak = vec![det(0, bb(0.0, 0.0, 5.0, 5.0), 0, 0.55)];
        assert!(link_tracks(&weak, &cfg).is_empty());
        let strong = vec![det(0, bb(0.0, 0.0, 5.0, 5.0), 0, 0.65)];
        assert_eq!(link_tracks(&strong, &cfg).len(), 1);
        let low = TrackerConfig { min_mean_conf: 0.7, ..cfg };
        let long_low: Vec<_> = (0..4).map(|t| det(t, bb(0.0, 0.0, 5.0, 5.0), 0, 0.65)).collect();
        assert!(link_tracks(&long_low, &low).is_empty());
    }

    #[test]
    fn rasterize_without_blur_is_indicator() {
        let cfg = TrackerConfig { blur_sigma: 0.0, ..TrackerConfig::default() };
        let dets = vec![det(0, bb(1.0, 1.0, 3.0, 4.0), 0, 0.9)];
        let tracks = rasterize_soft_masks(&link_tracks(&dets, &cfg), (5, 5), &cfg);
        let m = &tracks[0].masks[0];
        for y in 0..5 {
            for x in 0..5 {
                let inside = (1..3).contains(&x) && (1..4).contains(&y);
                assert_eq!(m.get(y, x), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn blurred_mask_plateau_and_edge() {
        let cfg = TrackerConfig::default();
        // long box: x in [2.5, 60.5], y in [2, 62]; pixel x=2 has its center on the left edge.
        let dets = vec![det(0, bb(2.5, 2.0, 60.5, 62.0), 0, 0.9)];
        let tracks = rasterize_soft_masks(&link_tracks(&dets, &cfg), (64, 64), &cfg);
        let m = &tracks[0].masks[0];
        assert!((m.get(32, 32) - 1.0).abs() < 1e-9);
        assert!((m.get(32, 2) - 0.5).abs() <= 0.05);
        assert!(m.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn normalize_examples() {
        let single = vec![track_with_mask(0.9, 0.8)];
        assert_eq!(normalize_overlaps(&single), single);

        let both = vec![track_with_mask(0.8, 1.0), track_with_mask(0.4, 1.0)];
        let n = normalize_overlaps(&both);
        assert!((n[0].masks[0].data[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((n[1].masks[0].data[0] - 1.0 / 3.0).abs() < 1e-12);

        let light = vec![track_with_mask(0.8, 0.3), track_with_mask(0.4, 0.4)];
        assert_eq!(normalize_overlaps(&light), light);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0f64..50.0, 0.0f64..50.0, 0.1f64..30.0, 0.1f64..30.0).prop_map(|(x, y, w, h)| bb(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_properties(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert_eq!(iou(&a, &a), 1.0);
            if a != b {
                prop_assert!(ab < 1.0);
            }
        }

        #[test]
        fn overlaps_never_exceed_full_coverage(
            boxes in proptest::collection::vec((arb_box(), 0.05f64..1.0), 1..5),
        ) {
            let cfg = TrackerConfig::default();
            let tracks: Vec<ObjectTrack> = boxes
                .iter()
                .enumerate()
                .map(|(i, (b, c))| ObjectTrack {
                    track_id: i as u32,
                    class_id: 0,
                    confidence: *c,
                    first_frame: 0,
                    boxes: vec![*b],
                    observed: vec![true],
                    detections: vec![i],
                    masks: vec![],
                })
                .collect();
            let norm = normalize_overlaps(&rasterize_soft_masks(&tracks, (24, 24), &cfg));
            for p in 0..24 * 24 {
                let s: f64 = norm.iter().map(|t| t.masks[0].data[p]).sum();
                prop_assert!(s <= 1.0 + 1e-6);
            }
        }

        #[test]
        fn linking_partitions_detections(
            raw in proptest::collection::vec((0usize..6, arb_box(), 0i64..2, 0.5f64..1.0), 0..30),
        ) {
            let mut dets: Vec<Detection> = raw.into_iter().map(|(f, b, c, p)| det(f, b, c, p)).collect();
            dets.sort_by_key(|d| d.frame);
            // keep every track so the partition covers all detections
            let cfg = TrackerConfig { min_length: 1, min_mean_conf: 0.0, ..TrackerConfig::default() };
            let tracks = link_tracks(&dets, &cfg);
            let mut seen = vec![0usize; dets.len()];
            for t in &tracks {
                for &d in &t.detections {
                    seen[d] += 1;
                    prop_assert_eq!(dets[d].class_id, t.class_id);
                }
            }
            prop_assert!(seen.iter().all(|&n| n == 1));
            let again = link_tracks(&dets, &cfg);
            prop_assert_eq!(serde_json::to_string(&tracks).unwrap(), serde_json::to_string(&again).unwrap());
        }
    }
}
