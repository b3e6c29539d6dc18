//! Seeded linear surrogate with hand-derived gradients.
//!
//! Features are per-pool, per-channel mean intensities (centered at 0.5) over
//! all frames; the text context is the sum of embeddings of the query and
//! prefix tokens. One linear layer maps both to vocabulary logits:
//!
//! ```text
//! logits = W_vis * phi(V) + W_tok * e(q, y_<n) + b + boost
//! ```
//!
//! `task` parameters plant a yes/no object-presence model over a fixed token
//! layout (see [`tokens`]); `random` parameters are dense noise for gradient
//! checks.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{log_softmax, softmax, BackendCapabilities, BackendError, GradRequest, LossGrad, ModelBackend};
use crate::compose::{perturbation_field, render_values, union_with_partials, Render, StrengthVector};
use crate::video::{Dims, Seed, TokenSequence, VideoTensor};

/// Channels seen by the model; grayscale input is broadcast to all three.
const MODEL_CHANNELS: usize = 3;

/// Token layout shared by the planted model and the synthetic suite.
pub mod tokens {
    pub const EOS: u32 = 0;
    pub const ASK: u32 = 1;
    pub const OBJ: u32 = 2;
    pub const YES: u32 = 3;
    pub const NO: u32 = 4;
    pub const VOCAB: usize = 32;
    pub const EMBED_DIM: usize = 16;
    pub const GRID: (usize, usize) = (4, 4);
    /// The yes/no probe: "is the target object in the video?"
    pub const QUERY: [u32; 2] = [ASK, OBJ];
}

/// Per-feature weight tying object-like color (red or green, not blue) to `OBJ`.
pub const OBJ_GAIN: f64 = 4.0;
/// Per-feature weight of the YES-minus-NO margin on `r - g - b`.
pub const MARGIN_GAIN: f64 = 3.0;
/// Logit added to YES in the biased variant.
pub const DEFAULT_BIAS_BOOST: f64 = 4.0;
/// Standard deviation of the seeded perturbation applied to planted weights.
pub const TASK_JITTER: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySurrogateParams {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Pools along (height, width).
    pub pool_grid: (usize, usize),
    /// `vocab x (pools * 3)`, feature index `pool * 3 + channel`.
    pub w_vis: Vec<f64>,
    /// `vocab x embed_dim`.
    pub w_tok: Vec<f64>,
    /// Token embeddings, `vocab x embed_dim`.
    pub embedding: Vec<f64>,
    pub b: Vec<f64>,
    pub bias_boost: f64,
    pub hallucination_tokens: Vec<u32>,
}

impl ToySurrogateParams {
    pub fn features(&self) -> usize {
        self.pool_grid.0 * self.pool_grid.1 * MODEL_CHANNELS
    }

    pub fn zeros(vocab_size: usize, embed_dim: usize, pool_grid: (usize, usize)) -> Self {
        let f = pool_grid.0 * pool_grid.1 * MODEL_CHANNELS;
        Self {
            vocab_size,
            embed_dim,
            pool_grid,
            w_vis: vec![0.0; vocab_size * f],
            w_tok: vec![0.0; vocab_size * embed_dim],
            embedding: vec![0.0; vocab_size * embed_dim],
            b: vec![0.0; vocab_size],
            bias_boost: 0.0,
            hallucination_tokens: Vec::new(),
        }
    }

    /// Dense Gaussian parameters.
    pub fn random(seed: Seed, vocab_size: usize, embed_dim: usize, pool_grid: (usize, usize)) -> Self {
        let mut p = Self::zeros(vocab_size, embed_dim, pool_grid);
        let mut rng = seed.rng();
        let mut fill = |xs: &mut [f64], sd: f64| {
            let normal = Normal::new(0.0, sd).expect("valid sd");
            xs.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        };
        fill(&mut p.w_vis, 2.0);
        fill(&mut p.w_tok, 1.0);
        fill(&mut p.embedding, 1.0);
        fill(&mut p.b, 0.5);
        p
    }

    /// The planted yes/no model without jitter.
    ///
    /// Query-reconstruction of `OBJ` rises with red and green evidence and
    /// falls with blue; the answer margin rises with red and falls with green
    /// and blue. The biased variant adds `DEFAULT_BIAS_BOOST` to YES.
    pub fn planted(biased: bool) -> Self {
        use tokens::*;
        let mut p = Self::zeros(VOCAB, EMBED_DIM, GRID);
        let f = p.features();
        let d = p.embed_dim;
        for (tok, axis) in [(ASK, 0), (OBJ, 1), (YES, 2), (NO, 3)] {
            p.embedding[tok as usize * d + axis] = 1.0;
        }
        let mut tok_w = |tok: u32, axis: usize, w: f64| p.w_tok[tok as usize * d + axis] = w;
        tok_w(ASK, 0, -10.0);
        tok_w(OBJ, 0, 3.3);
        tok_w(OBJ, 1, -10.0);
        for answer in [YES, NO] {
            tok_w(answer, 0, -10.0);
            tok_w(answer, 1, 34.0);
            tok_w(answer, 2, -30.0);
            tok_w(answer, 3, -30.0);
        }
        tok_w(EOS, 2, 10.0);
        tok_w(EOS, 3, 10.0);
        p.b[ASK as usize] = 3.0;
        p.b[YES as usize] = -16.0;
        p.b[NO as usize] = -16.0;
        for i in 0..f {
            let (obj, margin) = match i % MODEL_CHANNELS {
                0 => (OBJ_GAIN, MARGIN_GAIN),
                1 => (OBJ_GAIN, -MARGIN_GAIN),
                _ => (-OBJ_GAIN, -MARGIN_GAIN),
            };
            p.w_vis[OBJ as usize * f + i] = obj;
            p.w_vis[YES as usize * f + i] = margin / 2.0;
            p.w_vis[NO as usize * f + i] = -margin / 2.0;
        }
        p.hallucination_tokens = vec![YES];
        p.bias_boost = if biased { DEFAULT_BIAS_BOOST } else { 0.0 };
        p
    }

    /// Planted model plus seeded Gaussian jitter on every weight.
    pub fn task(seed: Seed, biased: bool) -> Self {
        let mut p = Self::planted(biased);
        let mut rng = seed.rng();
        let normal = Normal::new(0.0, TASK_JITTER).expect("valid sd");
        for x in p.w_vis.iter_mut().chain(&mut p.w_tok).chain(&mut p.embedding).chain(&mut p.b) {
            *x += normal.sample(&mut rng);
        }
        p
    }
}

/// Pool index of every pixel plus pixel counts per pool.
struct PoolMap {
    index: Vec<usize>,
    counts: Vec<usize>,
}

impl PoolMap {
    fn new(h: usize, w: usize, (gh, gw): (usize, usize)) -> Self {
        let mut index = Vec::with_capacity(h * w);
        let mut counts = vec![0; gh * gw];
        for y in 0..h {
            for x in 0..w {
                let p = (y * gh / h) * gw + x * gw / w;
                index.push(p);
                counts[p] += 1;
            }
        }
        Self { index, counts }
    }
}

#[derive(Debug, Clone)]
pub struct ToyBackend {
    params: ToySurrogateParams,
}

impl ToyBackend {
    pub fn new(params: ToySurrogateParams) -> Self {
        assert!(params.vocab_size >= 2, "vocabulary needs at least two tokens");
        Self { params }
    }

    pub fn params(&self) -> &ToySurrogateParams {
        &self.params
    }

    /// Centered pool means over all frames, from `f64` pixel data.
    pub fn pool_features(&self, dims: Dims, data: &[f64]) -> Vec<f64> {
        let pools = PoolMap::new(dims.h, dims.w, self.params.pool_grid);
        let mut phi = vec![0.0; self.params.features()];
        for t in 0..dims.t {
            for (pix, &pool) in pools.index.iter().enumerate() {
                let base = (t * dims.frame_pixels() + pix) * dims.c;
                for ch in 0..MODEL_CHANNELS {
                    let v = data[base + if dims.c == 1 { 0 } else { ch }];
                    phi[pool * MODEL_CHANNELS + ch] += v - 0.5;
                }
            }
        }
        for (i, f) in phi.iter_mut().enumerate() {
            let n = pools.counts[i / MODEL_CHANNELS] * dims.t;
            *f = if n == 0 { 0.0 } else { *f / n as f64 };
        }
        phi
    }

    fn check_tokens(&self, ids: &[u32]) -> Result<(), BackendError> {
        let vocab_size = self.params.vocab_size;
        match ids.iter().find(|&&id| id as usize >= vocab_size) {
            Some(&id) => Err(BackendError::VocabMismatch { id, vocab_size }),
            None => Ok(()),
        }
    }

    fn context(&self, tokens: impl IntoIterator<Item = u32>) -> Vec<f64> {
        let d = self.params.embed_dim;
        let mut e = vec![0.0; d];
        for tok in tokens {
            let row = &self.params.embedding[tok as usize * d..(tok as usize + 1) * d];
            e.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        e
    }

    fn logits_from(&self, phi: &[f64], e: &[f64]) -> Vec<f64> {
        let p = &self.params;
        let (f, d) = (p.features(), p.embed_dim);
        (0..p.vocab_size)
            .map(|v| {
                let vis: f64 = p.w_vis[v * f..(v + 1) * f].iter().zip(phi).map(|(w, x)| w * x).sum();
                let tok: f64 = p.w_tok[v * d..(v + 1) * d].iter().zip(e).map(|(w, x)| w * x).sum();
                let boost = if p.hallucination_tokens.contains(&(v as u32)) { p.bias_boost } else { 0.0 };
                vis + tok + p.b[v] + boost
            })
            .collect()
    }

    /// Mean query loss and `dL/dphi` for pooled features `phi`.
    fn loss_and_feature_grad(&self, phi: &[f64], query: &[u32]) -> (f64, Vec<f64>) {
        let f = self.params.features();
        let mut u = vec![0.0; f];
        let mut loss = 0.0;
        let n = query.len() as f64;
        for (i, &target) in query.iter().enumerate() {
            let logits = self.logits_from(phi, &self.context(query[..i].iter().copied()));
            loss -= log_softmax(&logits)[target as usize];
            for (v, pv) in softmax(&logits).into_iter().enumerate() {
                let delta = (pv - f64::from(u8::from(v as u32 == target))) / n;
                let row = &self.params.w_vis[v * f..(v + 1) * f];
                u.iter_mut().zip(row).for_each(|(a, w)| *a += delta * w);
            }
        }
        (loss / n, u)
    }

    fn analytic_grad(&self, req: &GradRequest) -> Result<LossGrad, BackendError> {
        let video = req.base_video;
        let dims = video.dims();
        let (k, hw) = (req.tracks.len(), dims.frame_pixels());
        let z = perturbation_field(dims, req.tracks, req.strengths, req.compose)?;
        let base = video.to_f64();
        let rendered = render_values(video, &z, Render::OcclusionBlend, req.compose.fill);
        let phi = self.pool_features(dims, &rendered);
        let (loss, u) = self.loss_and_feature_grad(&phi, req.query.ids());

        let pools = PoolMap::new(dims.h, dims.w, self.params.pool_grid);
        let fill = req.compose.fill;
        let mut grad = StrengthVector::uniform(k, dims.t, 0.0);
        for t in 0..dims.t {
            let (mo, partials) =
                union_with_partials(req.tracks, &req.strengths.object, req.compose.fusion, t, (dims.h, dims.w), true)?;
            let mf = req.compose.policy.level(&req.strengths.frame, t);
            let mut d_frame = 0.0;
            for pix in 0..hw {
                let pool = pools.index[pix];
                let scale = 1.0 / (pools.counts[pool] * dims.t) as f64;
                let at = (t * hw + pix) * dims.c;
                // dL/dZ = sum over channels of dL/dV_d * (fill - V)
                let dz: f64 = if dims.c == 1 {
                    let du: f64 = (0..MODEL_CHANNELS).map(|ch| u[pool * MODEL_CHANNELS + ch]).sum();
                    du * scale * (fill - base[at])
                } else {
                    (0..MODEL_CHANNELS).map(|ch| u[pool * MODEL_CHANNELS + ch] * scale * (fill - base[at + ch])).sum()
                };
                if dz == 0.0 {
                    continue;
                }
                for (kk, part) in partials.iter().enumerate() {
                    if part[pix] != 0.0 {
                        grad.object[kk] += dz * (1.0 - mf) * part[pix];
                    }
                }
                d_frame += dz * (1.0 - mo[pix]);
            }
            if req.compose.policy.frames_trainable() {
                grad.frame[t] = d_frame;
            }
        }
        Ok(LossGrad { loss, grad })
    }
}

impl ModelBackend for ToyBackend {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities { vocab_size: self.params.vocab_size, supports_analytic_grad: true, max_frames: 1024 }
    }

    fn logits(&self, view: &VideoTensor, query: &TokenSequence, prefix: &[u32]) -> Result<Vec<f64>, BackendError> {
        self.check_tokens(query.ids())?;
        self.check_tokens(prefix)?;
        let phi = self.pool_features(view.dims(), &view.to_f64());
        let e = self.context(query.ids().iter().chain(prefix).copied());
        Ok(self.logits_from(&phi, &e))
    }

    fn query_loss(&self, view: &VideoTensor, query: &TokenSequence) -> Result<f64, BackendError> {
        if query.is_empty() {
            return Err(BackendError::EmptyQuery);
        }
        self.check_tokens(query.ids())?;
        let phi = self.pool_features(view.dims(), &view.to_f64());
        Ok(self.loss_and_feature_grad(&phi, query.ids()).0)
    }

    /// Renders in `f64` so finite differences see no `f32` rounding.
    fn strength_loss(&self, req: &GradRequest) -> Result<f64, BackendError> {
        if req.query.is_empty() {
            return Err(BackendError::EmptyQuery);
        }
        self.check_tokens(req.query.ids())?;
        let z = perturbation_field(req.base_video.dims(), req.tracks, req.strengths, req.compose)?;
        let rendered = render_values(req.base_video, &z, req.compose.render, req.compose.fill);
        let phi = self.pool_features(req.base_video.dims(), &rendered);
        Ok(self.loss_and_feature_grad(&phi, req.query.ids()).0)
    }

    fn loss_grad(&self, req: &GradRequest) -> Result<LossGrad, BackendError> {
        if req.query.is_empty() {
            return Err(BackendError::EmptyQuery);
        }
        self.check_tokens(req.query.ids())?;
        if req.compose.render == Render::AdditiveClamp {
            log::warn!("additive-clamp render is not differentiable everywhere, using finite differences");
            let loss = self.strength_loss(req)?;
            let fd = super::fd_gradient(self, req, 1e-3)?;
            return Ok(LossGrad { loss, grad: fd.grad });
        }
        self.analytic_grad(req)
    }
}
