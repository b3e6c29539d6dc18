//! Contrastive token selection.
//!
//! Each step runs the model on the base view and, when a counterfactual is
//! present, on the counterfactual view. Candidates are restricted to the
//! plausibility head of the base distribution, scored by the contrast rule
//! and then picked greedily or sampled.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{log_softmax, softmax, BackendError, ModelBackend};
use crate::compose::CounterfactualView;
use crate::video::{Seed, TokenSequence, VideoTensor};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("score inputs differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("query must contain at least one token")]
    EmptyQuery,
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// `(1 + alpha) * base - alpha * cf`, elementwise.
pub fn macd_score(base_logits: &[f64], cf_logits: &[f64], alpha: f64) -> Result<Vec<f64>, DecodeError> {
    if base_logits.len() != cf_logits.len() {
        return Err(DecodeError::LengthMismatch(base_logits.len(), cf_logits.len()));
    }
    Ok(base_logits.iter().zip(cf_logits).map(|(b, c)| (1.0 + alpha) * b - alpha * c).collect())
}

/// `log p_base - lambda * log p_ref`, elementwise.
pub fn generic_cd_score(base_logp: &[f64], ref_logp: &[f64], lambda: f64) -> Result<Vec<f64>, DecodeError> {
    if base_logp.len() != ref_logp.len() {
        return Err(DecodeError::LengthMismatch(base_logp.len(), ref_logp.len()));
    }
    Ok(base_logp.iter().zip(ref_logp).map(|(b, r)| b - lambda * r).collect())
}

/// Token ids with `p >= beta * max p` (and `p > 0`), ascending.
pub fn plausibility_head(base_probs: &[f64], beta: f64) -> Vec<usize> {
    let max = base_probs.iter().copied().fold(0.0, f64::max);
    base_probs.iter().enumerate().filter(|&(_, &p)| p > 0.0 && p >= beta * max).map(|(i, _)| i).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Nucleus(f64),
    SelfConsistency { samples: usize, inner: Box<DecodeMode> },
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Greedy => f.write_str("greedy"),
            Self::Nucleus(p) => write!(f, "nucleus:{p}"),
            Self::SelfConsistency { samples, inner } => match **inner {
                Self::Nucleus(p) if p == 1.0 => write!(f, "sc:{samples}"),
                ref other => write!(f, "sc:{samples}:{other}"),
            },
        }
    }
}

impl FromStr for DecodeMode {
    type Err = String;

    /// `greedy`, `nucleus:<p>`, `sc:<n>` (full-softmax samples) or `sc:<n>:<inner mode>`.
    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("invalid mode '{s}', expected greedy | nucleus:<p> | sc:<n>");
        match s.split_once(':') {
            None if s == "greedy" => Ok(Self::Greedy),
            Some(("nucleus", p)) => p.parse().map(Self::Nucleus).map_err(|_| bad()),
            Some(("sc", rest)) => {
                let (n, inner) = match rest.split_once(':') {
                    Some((n, inner)) => (n, inner.parse()?),
                    None => (rest, Self::Nucleus(1.0)),
                };
                let samples = n.parse().map_err(|_| bad())?;
                Ok(Self::SelfConsistency { samples, inner: Box::new(inner) })
            }
            _ => Err(bad()),
        }
    }
}

impl Serialize for DecodeMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DecodeMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// How base and counterfactual are contrasted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Contrast {
    /// Logit contrast weighted by `alpha`.
    #[default]
    Macd,
    /// Log-probability contrast weighted by `lambda`.
    GenericCd,
}

/// Preset `(alpha, beta)` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    EventHallusion,
    MvBench,
    Perception,
}

cli_names!(Profile,
    Profile::EventHallusion => "eventhallusion",
    Profile::MvBench => "mvbench",
    Profile::Perception => "perception",
);

impl Profile {
    pub fn alpha_beta(self) -> (f64, f64) {
        match self {
            Self::EventHallusion => (2.6, 0.0036),
            Self::MvBench => (1.0, 0.5),
            Self::Perception => (1.5, 0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub contrast: Contrast,
    pub mode: DecodeMode,
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: Seed,
    /// Decoding stops after emitting this token.
    pub eos: Option<u32>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self::from_profile(Profile::default())
    }
}

impl DecodeConfig {
    pub fn from_profile(profile: Profile) -> Self {
        let (alpha, beta) = profile.alpha_beta();
        Self {
            alpha,
            beta,
            lambda: 1.0,
            contrast: Contrast::Macd,
            mode: DecodeMode::Greedy,
            max_tokens: 8,
            temperature: 1.0,
            seed: Seed(0),
            eos: Some(crate::backend::toy::tokens::EOS),
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        let bad = |m: String| Err(DecodeError::InvalidConfig(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must be in [0,1], got {}", self.beta));
        }
        if !self.lambda.is_finite() {
            return bad(format!("lambda must be finite, got {}", self.lambda));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive".into());
        }
        check_mode(&self.mode)
    }
}

fn check_mode(mode: &DecodeMode) -> Result<(), DecodeError> {
    match mode {
        DecodeMode::Greedy => Ok(()),
        DecodeMode::Nucleus(p) if *p > 0.0 && *p <= 1.0 => Ok(()),
        DecodeMode::Nucleus(p) => Err(DecodeError::InvalidConfig(format!("nucleus p must be in (0,1], got {p}"))),
        DecodeMode::SelfConsistency { samples: 0, .. } => {
            Err(DecodeError::InvalidConfig("self-consistency needs at least one sample".into()))
        }
        DecodeMode::SelfConsistency { inner, .. } => check_mode(inner),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitSummary {
    pub max: f64,
    pub mean: f64,
    pub argmax: usize,
}

impl LogitSummary {
    fn of(logits: &[f64]) -> Self {
        let argmax = argmax(logits);
        Self { max: logits[argmax], mean: logits.iter().sum::<f64>() / logits.len() as f64, argmax }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub base: LogitSummary,
    pub cf: Option<LogitSummary>,
    pub head_size: usize,
    pub score: f64,
    pub token: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub steps: Vec<StepRecord>,
    pub base_forwards: usize,
    pub cf_forwards: usize,
    pub grad_passes: usize,
    pub wall_time_ms: f64,
}

/// Lowest index among the maxima.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Samples from the smallest high-probability prefix with mass `>= p`.
fn sample_nucleus(scores: &[f64], p: f64, temperature: f64, rng: &mut impl Rng) -> usize {
    let probs = softmax(&scores.iter().map(|s| s / temperature).collect::<Vec<_>>());
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut cut = order.len();
    for (i, &tok) in order.iter().enumerate() {
        mass += probs[tok];
        if mass >= p {
            cut = i + 1;
            break;
        }
    }
    let kept = &order[..cut];
    let total: f64 = kept.iter().map(|&t| probs[t]).sum();
    let mut u = rng.random::<f64>() * total;
    for &tok in kept {
        u -= probs[tok];
        if u < 0.0 {
            return tok;
        }
    }
    *kept.last().expect("nucleus is never empty")
}

fn decode_once(
    base: &VideoTensor,
    cf: Option<&VideoTensor>,
    query: &TokenSequence,
    backend: &dyn ModelBackend,
    cfg: &DecodeConfig,
    mode: &DecodeMode,
    seed: Seed,
    record: &mut DecodeRecord,
) -> Result<Vec<u32>, DecodeError> {
    let mut rng = seed.rng();
    let mut out = Vec::new();
    for _ in 0..cfg.max_tokens {
        let base_logits = backend.logits(base, query, &out)?;
        record.base_forwards += 1;
        let head = plausibility_head(&softmax(&base_logits), cfg.beta);
        let (raw, cf_summary) = match cf {
            None => (base_logits.clone(), None),
            Some(view) => {
                let cf_logits = backend.logits(view, query, &out)?;
                record.cf_forwards += 1;
                let summary = LogitSummary::of(&cf_logits);
                let raw = match cfg.contrast {
                    Contrast::Macd => macd_score(&base_logits, &cf_logits, cfg.alpha)?,
                    Contrast::GenericCd => {
                        generic_cd_score(&log_softmax(&base_logits), &log_softmax(&cf_logits), cfg.lambda)?
                    }
                };
                (raw, Some(summary))
            }
        };
        let mut scores = vec![f64::NEG_INFINITY; raw.len()];
        for &t in &head {
            scores[t] = raw[t];
        }
        let token = match mode {
            DecodeMode::Greedy => argmax(&scores),
            DecodeMode::Nucleus(p) => sample_nucleus(&scores, *p, cfg.temperature, &mut rng),
            DecodeMode::SelfConsistency { .. } => unreachable!("handled by decode"),
        };
        record.steps.push(StepRecord {
            base: LogitSummary::of(&base_logits),
            cf: cf_summary,
            head_size: head.len(),
            score: scores[token],
            token: token as u32,
        });
        out.push(token as u32);
        if cfg.eos == Some(token as u32) {
            break;
        }
    }
    Ok(out)
}

/// Most frequent answer, ties broken toward the lexicographically smallest.
pub fn majority<'a>(answers: impl IntoIterator<Item = &'a [u32]>) -> Option<Vec<u32>> {
    let mut counts: BTreeMap<&[u32], usize> = BTreeMap::new();
    for a in answers {
        *counts.entry(a).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|&(_, c)| c == best).map(|(a, _)| a.to_vec())
}

/// Decodes an answer. Without a counterfactual this is plain decoding on `base`.
pub fn decode(
    base: &VideoTensor,
    cf: Option<&CounterfactualView>,
    query: &TokenSequence,
    backend: &dyn ModelBackend,
    cfg: &DecodeConfig,
) -> Result<(TokenSequence, DecodeRecord), DecodeError> {
    cfg.validate()?;
    if query.is_empty() {
        return Err(DecodeError::EmptyQuery);
    }
    let started = Instant::now();
    let cf_video = cf.map(|v| &v.video);
    let mut record = DecodeRecord::default();
    let tokens = match &cfg.mode {
        DecodeMode::SelfConsistency { samples, inner } => {
            let mut answers = Vec::with_capacity(*samples);
            for i in 0..*samples {
                let seed = cfg.seed.derive(i as u64);
                let mut sample = decode_once(base, cf_video, query, backend, cfg, inner, seed, &mut record)?;
                if let (Some(eos), Some(&last)) = (cfg.eos, sample.last()) {
                    if last == eos {
                        sample.pop();
                    }
                }
                answers.push(sample);
            }
            let mut best = majority(answers.iter().map(Vec::as_slice)).unwrap_or_default();
            best.extend(cfg.eos);
            best
        }
        mode => decode_once(base, cf_video, query, backend, cfg, mode, cfg.seed, &mut record)?,
    };
    record.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
    let vocab = backend.capabilities().vocab_size;
    let seq = TokenSequence::new(tokens, vocab)
        .map_err(|e| BackendError::VocabMismatch { id: e.id, vocab_size: e.vocab_size })?;
    Ok((seq, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::toy::tokens::{QUERY, VOCAB};
    use crate::backend::{ToyBackend, ToySurrogateParams};
    use crate::compose::{Fusion, Render, StrengthVector};
    use crate::video::Dims;
    use proptest::prelude::*;

    #[test]
    fn macd_score_examples() {
        assert_eq!(macd_score(&[2.0, -1.0], &[5.0, 3.0], 0.0).unwrap(), vec![2.0, -1.0]);
        assert!((macd_score(&[2.0], &[1.0], 1.0).unwrap()[0] - 3.0).abs() < 1e-12);
        assert!((macd_score(&[2.0], &[1.0], 2.6).unwrap()[0] - 4.6).abs() < 1e-12);
        assert!(matches!(macd_score(&[1.0], &[1.0, 2.0], 1.0), Err(DecodeError::LengthMismatch(1, 2))));
    }

    #[test]
    fn generic_cd_examples() {
        let base = [0.5f64.ln(), 0.3f64.ln()];
        assert_eq!(generic_cd_score(&base, &[0.1, 0.2], 0.0).unwrap(), base.to_vec());
        assert!((generic_cd_score(&[0.5f64.ln()], &[0.25f64.ln()], 1.0).unwrap()[0] - 2f64.ln()).abs() < 1e-12);
        assert!(generic_cd_score(&base, &base, 1.0).unwrap().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn head_examples() {
        assert_eq!(plausibility_head(&[0.5, 0.3, 0.2], 0.5), vec![0, 1]);
        assert_eq!(plausibility_head(&[0.5, 0.3, 0.2], 0.0), vec![0, 1, 2]);
        assert_eq!(plausibility_head(&[0.4, 0.2, 0.4], 1.0), vec![0, 2]);
        assert_eq!(plausibility_head(&[1.0, 0.0], 0.0), vec![0]);
    }

    #[test]
    fn modes_parse() {
        assert_eq!("greedy".parse::<DecodeMode>().unwrap(), DecodeMode::Greedy);
        assert_eq!("nucleus:0.9".parse::<DecodeMode>().unwrap(), DecodeMode::Nucleus(0.9));
        let sc = "sc:5".parse::<DecodeMode>().unwrap();
        assert_eq!(sc.to_string(), "sc:5");
        assert_eq!("sc:3:nucleus:0.8".parse::<DecodeMode>().unwrap().to_string(), "sc:3:nucleus:0.8");
        assert!("beam:4".parse::<DecodeMode>().is_err());
    }

    #[test]
    fn majority_votes() {
        let yes = [3u32];
        let no = [4u32];
        let answers: Vec<&[u32]> = vec![&yes, &no, &yes, &no, &yes];
        assert_eq!(majority(answers), Some(vec![3]));
        assert_eq!(majority(vec![&no[..], &yes[..]]), Some(vec![3]));
    }

    #[test]
    fn config_validation() {
        let mut cfg = DecodeConfig::default();
        assert_eq!((cfg.alpha, cfg.beta), (2.6, 0.0036));
        cfg.alpha = -1.0;
        assert!(cfg.validate().is_err());
        cfg = DecodeConfig { mode: DecodeMode::Nucleus(0.0), ..DecodeConfig::default() };
        assert!(cfg.validate().is_err());
        assert_eq!(Profile::MvBench.alpha_beta(), (1.0, 0.5));
        assert_eq!(Profile::Perception.alpha_beta(), (1.5, 0.5));
    }

    fn random_view(seed: u64) -> VideoTensor {
        let mut rng = Seed(seed).rng();
        let d = Dims::new(2, 8, 8, 3);
        VideoTensor::new(d, (0..d.len()).map(|_| rand::Rng::random::<f32>(&mut rng)).collect()).unwrap()
    }

    fn as_cf(video: VideoTensor) -> CounterfactualView {
        let d = video.dims();
        CounterfactualView {
            video,
            perturbation: vec![0.0; d.t * d.h * d.w],
            strengths: StrengthVector::uniform(0, d.t, 0.0),
            fusion: Fusion::PixelwiseMax,
            render: Render::OcclusionBlend,
        }
    }

    #[test]
    fn identical_views_reduce_to_plain_greedy() {
        let toy = ToyBackend::new(ToySurrogateParams::random(Seed(5), VOCAB, 8, (2, 2)));
        let q = TokenSequence::new(QUERY.to_vec(), VOCAB).unwrap();
        for seed in 0..10 {
            let v = random_view(seed);
            let cf = as_cf(v.clone());
            let plain = decode(&v, None, &q, &toy, &DecodeConfig { beta: 0.0, ..Default::default() }).unwrap().0;
            for alpha in [0.0, 1.0, 2.6, 10.0] {
                let cfg = DecodeConfig { alpha, beta: 0.0, ..Default::default() };
                assert_eq!(decode(&v, Some(&cf), &q, &toy, &cfg).unwrap().0, plain);
            }
        }
    }

    #[test]
    fn counters_are_exact() {
        let toy = ToyBackend::new(ToySurrogateParams::task(Seed(2), true));
        let q = TokenSequence::new(QUERY.to_vec(), VOCAB).unwrap();
        let v = random_view(1);
        let cf = as_cf(random_view(2));
        let cfg = DecodeConfig::default();
        let (tokens, rec) = decode(&v, Some(&cf), &q, &toy, &cfg).unwrap();
        assert_eq!((rec.base_forwards, rec.cf_forwards, rec.grad_passes), (tokens.len(), tokens.len(), 0));
        let (tokens, rec) = decode(&v, None, &q, &toy, &cfg).unwrap();
        assert_eq!((rec.base_forwards, rec.cf_forwards), (tokens.len(), 0));
    }

    #[test]
    fn sampling_is_seeded() {
        let toy = ToyBackend::new(ToySurrogateParams::random(Seed(8), VOCAB, 8, (2, 2)));
        let q = TokenSequence::new(QUERY.to_vec(), VOCAB).unwrap();
        let v = random_view(3);
        let cf = as_cf(random_view(4));
        for mode in ["nucleus:0.9", "sc:5"] {
            let cfg = DecodeConfig { mode: mode.parse().unwrap(), seed: Seed(11), beta: 0.0, ..Default::default() };
            let a = decode(&v, Some(&cf), &q, &toy, &cfg).unwrap().0;
            let b = decode(&v, Some(&cf), &q, &toy, &cfg).unwrap().0;
            assert_eq!(a, b);
        }
    }

    proptest! {
        #[test]
        fn shift_invariance(
            logits in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..10),
            shift in -50.0f64..50.0,
            alpha in 0.0f64..5.0,
        ) {
            let (b, c): (Vec<f64>, Vec<f64>) = logits.into_iter().unzip();
            let bs: Vec<f64> = b.iter().map(|x| x + shift).collect();
            let cs: Vec<f64> = c.iter().map(|x| x + shift).collect();
            let s1 = macd_score(&b, &c, alpha).unwrap();
            let s2 = macd_score(&bs, &cs, alpha).unwrap();
            // the shift cancels exactly in exact arithmetic; allow for rounding when comparing maxima
            let (a1, a2) = (argmax(&s1), argmax(&s2));
            prop_assert!(a1 == a2 || (s1[a1] - s1[a2]).abs() < 1e-9);
        }

        #[test]
        fn head_nests_in_beta(probs in proptest::collection::vec(0.0f64..1.0, 1..10), beta in 0.0f64..=1.0) {
            let total: f64 = probs.iter().sum::<f64>() + 1e-12;
            let p: Vec<f64> = probs.iter().map(|x| (x + 1e-12 / probs.len() as f64) / total).collect();
            let top = plausibility_head(&p, 1.0);
            let wide = plausibility_head(&p, beta);
            prop_assert!(!top.is_empty());
            prop_assert!(top.iter().all(|t| wide.contains(t)));
        }
    }
}
