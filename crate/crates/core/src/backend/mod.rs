//! Autoregressive scorers.
//!
//! A backend returns next-token logits for a view, a query and a decoded
//! prefix, plus the mean query-reconstruction loss and its gradient with
//! respect to mask strengths. Both decoding branches share one backend; the
//! counterfactual branch just passes a different view.

pub mod proto;
pub mod toy;

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compose::{render_counterfactual, ComposeConfig, ComposeError, StrengthVector};
use crate::track::ObjectTrack;
use crate::video::{Seed, TokenSequence, VideoTensor};

pub use proto::ProtoBackend;
pub use toy::{ToyBackend, ToySurrogateParams};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("token {id} outside vocabulary of size {vocab_size}")]
    VocabMismatch { id: u32, vocab_size: usize },
    #[error("query must contain at least one token")]
    EmptyQuery,
    #[error("backend cannot handle this configuration: {0}")]
    NonDifferentiableConfig(String),
    #[error("invalid backend selector '{0}', expected toy:<seed> | toy-biased:<seed> | proto:<host:port|stdio>")]
    InvalidSelector(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("remote error [{code}]: {message}")]
    Remote { code: String, message: String },
    #[error("transport failure: {0}")]
    Transport(#[from] std::io::Error),
    #[error(transparent)]
    Compose(#[from] ComposeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    pub vocab_size: usize,
    pub supports_analytic_grad: bool,
    pub max_frames: usize,
}

/// Everything needed to differentiate the query loss with respect to strengths.
#[derive(Debug, Clone, Copy)]
pub struct GradRequest<'a> {
    pub base_video: &'a VideoTensor,
    pub tracks: &'a [ObjectTrack],
    pub strengths: &'a StrengthVector,
    pub query: &'a TokenSequence,
    pub compose: &'a ComposeConfig,
}

impl<'a> GradRequest<'a> {
    pub fn with_strengths(self, strengths: &'a StrengthVector) -> Self {
        Self { strengths, ..self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: StrengthVector,
}

pub trait ModelBackend: Send + Sync {
    fn capabilities(&self) -> BackendCapabilities;

    /// Next-token logits given the view, the query and the tokens decoded so far.
    fn logits(&self, view: &VideoTensor, query: &TokenSequence, prefix: &[u32]) -> Result<Vec<f64>, BackendError>;

    /// Mean over `n` of `-log p(q_n | view, q_<n)`.
    fn query_loss(&self, view: &VideoTensor, query: &TokenSequence) -> Result<f64, BackendError> {
        if query.is_empty() {
            return Err(BackendError::EmptyQuery);
        }
        let ids = query.ids();
        let mut total = 0.0;
        for n in 0..ids.len() {
            let context =
                TokenSequence::new(ids[..n].to_vec(), query.vocab_size()).expect("sub-sequence of a valid query");
            let logits = self.logits(view, &context, &[])?;
            total -= log_softmax(&logits)[ids[n] as usize];
        }
        Ok(total / ids.len() as f64)
    }

    /// Query loss of the counterfactual view rendered from `req`.
    fn strength_loss(&self, req: &GradRequest) -> Result<f64, BackendError> {
        let view = render_counterfactual(req.base_video, req.tracks, req.strengths, req.compose)?;
        self.query_loss(&view.video, req.query)
    }

    fn loss_grad(&self, req: &GradRequest) -> Result<LossGrad, BackendError>;
}

impl<B: ModelBackend + ?Sized> ModelBackend for Box<B> {
    fn capabilities(&self) -> BackendCapabilities {
        (**self).capabilities()
    }

    fn logits(&self, view: &VideoTensor, query: &TokenSequence, prefix: &[u32]) -> Result<Vec<f64>, BackendError> {
        (**self).logits(view, query, prefix)
    }

    fn query_loss(&self, view: &VideoTensor, query: &TokenSequence) -> Result<f64, BackendError> {
        (**self).query_loss(view, query)
    }

    fn strength_loss(&self, req: &GradRequest) -> Result<f64, BackendError> {
        (**self).strength_loss(req)
    }

    fn loss_grad(&self, req: &GradRequest) -> Result<LossGrad, BackendError> {
        (**self).loss_grad(req)
    }
}

/// Numerically stable `log softmax`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Central-difference gradient with per-component step bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct FdGradient {
    pub grad: StrengthVector,
    /// `r+ - r-` actually used for each component (objects first).
    pub effective_step: Vec<f64>,
    /// Set where the `[0,1]` domain forced a one-sided difference.
    pub one_sided: Vec<bool>,
}

/// Central finite differences of `loss` around `r`, with `r +- h` clamped to `[0,1]`.
pub fn fd_gradient_with<E>(
    r: &StrengthVector,
    h: f64,
    mut loss: impl FnMut(&StrengthVector) -> Result<f64, E>,
) -> Result<FdGradient, E> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut grad = r.map(|_| 0.0);
    let mut effective_step = Vec::with_capacity(r.len());
    let mut one_sided = Vec::with_capacity(r.len());
    for i in 0..r.len() {
        let ri = r.get(i);
        let (lo, hi) = ((ri - h).max(0.0), (ri + h).min(1.0));
        let mut probe = r.clone();
        probe.set(i, hi);
        let up = loss(&probe)?;
        probe.set(i, lo);
        let down = loss(&probe)?;
        grad.set(i, (up - down) / (hi - lo));
        effective_step.push(hi - lo);
        one_sided.push(hi - ri < h || ri - lo < h);
    }
    Ok(FdGradient { grad, effective_step, one_sided })
}

/// Finite-difference gradient of the backend's strength loss.
pub fn fd_gradient(backend: &dyn ModelBackend, req: &GradRequest, h: f64) -> Result<FdGradient, BackendError> {
    fd_gradient_with(req.strengths, h, |r| backend.strength_loss(&req.with_strengths(r)))
}

/// Parsed backend selector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackendSpec {
    Toy { seed: Seed, biased: bool },
    Proto { target: String },
}

impl FromStr for BackendSpec {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, BackendError> {
        let bad = || BackendError::InvalidSelector(s.to_string());
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        let seed = || arg.parse::<u64>().map(Seed).map_err(|_| bad());
        match kind {
            "toy" => Ok(Self::Toy { seed: seed()?, biased: false }),
            "toy-biased" => Ok(Self::Toy { seed: seed()?, biased: true }),
            "proto" if !arg.is_empty() => Ok(Self::Proto { target: arg.to_string() }),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Toy { seed, biased: false } => write!(f, "toy:{}", seed.0),
            Self::Toy { seed, biased: true } => write!(f, "toy-biased:{}", seed.0),
            Self::Proto { target } => write!(f, "proto:{target}"),
        }
    }
}

impl TryFrom<String> for BackendSpec {
    type Error = BackendError;

    fn try_from(s: String) -> Result<Self, BackendError> {
        s.parse()
    }
}

impl From<BackendSpec> for String {
    fn from(spec: BackendSpec) -> String {
        spec.to_string()
    }
}

impl BackendSpec {
    /// Instantiates the backend. Protocol backends open a fresh connection.
    pub fn connect(&self) -> Result<Box<dyn ModelBackend>, BackendError> {
        match self {
            Self::Toy { seed, biased } => Ok(Box::new(ToyBackend::new(ToySurrogateParams::task(*seed, *biased)))),
            Self::Proto { target } => Ok(Box::new(ProtoBackend::connect(target)?)),
        }
    }
}
