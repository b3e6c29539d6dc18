//! Newline-delimited JSON protocol for out-of-process backends.
//!
//! Every request is one JSON object per line carrying an `id` and an `op`;
//! every response echoes the `id` with either a `result` or an `error`.
//! Tensors travel as `{"shape": [..], "data": <base64 of LE f32, row-major>}`.
//! Scalars and logits stay plain JSON numbers so they round-trip exactly.
//!
//! [`ProtoBackend`] is the client. [`serve`] answers the same protocol from any
//! in-process [`ModelBackend`] and is what the conformance tests talk to.

use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{BackendCapabilities, BackendError, GradRequest, LossGrad, ModelBackend};
use crate::compose::{ComposeConfig, StrengthVector};
use crate::track::{ObjectTrack, SoftMask};
use crate::video::{BoundingBox, Dims, TokenSequence, VideoTensor};

/// Shell command spawned for `proto:stdio`.
pub const BRIDGE_CMD_ENV: &str = "MACD_BRIDGE_CMD";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

impl WireTensor {
    pub fn encode(shape: &[usize], values: &[f32]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self { shape: shape.to_vec(), data: STANDARD.encode(bytes) }
    }

    pub fn decode(&self) -> Result<Vec<f32>, BackendError> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| BackendError::Protocol(format!("tensor payload is not base64: {e}")))?;
        let expected = self.shape.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(BackendError::Protocol(format!(
                "tensor payload has {} bytes, shape {:?} needs {expected}",
                bytes.len(),
                self.shape
            )));
        }
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    fn from_video(v: &VideoTensor) -> Self {
        let d = v.dims();
        Self::encode(&[d.t, d.h, d.w, d.c], v.data())
    }

    fn to_video(&self) -> Result<VideoTensor, BackendError> {
        let [t, h, w, c] = self.shape[..] else {
            return Err(BackendError::Protocol(format!("video tensor needs 4 dims, got {:?}", self.shape)));
        };
        VideoTensor::new(Dims::new(t, h, w, c), self.decode()?)
            .map_err(|e| BackendError::Protocol(format!("invalid video tensor: {e}")))
    }
}

/// The parts of a track the renderer needs: confidence, span start and masks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireTrack {
    pub confidence: f64,
    pub first_frame: usize,
    /// `frames x H x W`.
    pub masks: WireTensor,
}

impl WireTrack {
    fn from_track(track: &ObjectTrack) -> Self {
        let (h, w) = track.masks.first().map_or((0, 0), |m| (m.h, m.w));
        let values: Vec<f32> = track.masks.iter().flat_map(|m| m.data.iter().map(|&v| v as f32)).collect();
        Self {
            confidence: track.confidence,
            first_frame: track.first_frame,
            masks: WireTensor::encode(&[track.masks.len(), h, w], &values),
        }
    }

    fn to_track(&self, track_id: u32) -> Result<ObjectTrack, BackendError> {
        let [n, h, w] = self.masks.shape[..] else {
            return Err(BackendError::Protocol(format!("mask tensor needs 3 dims, got {:?}", self.masks.shape)));
        };
        if n == 0 {
            return Err(BackendError::Protocol("track without masks".into()));
        }
        let values = self.masks.decode()?;
        let masks = values
            .chunks_exact(h * w)
            .map(|c| SoftMask { h, w, data: c.iter().map(|&v| v as f64).collect() })
            .collect();
        let placeholder = BoundingBox::new(0.0, 0.0, 1.0, 1.0).expect("unit box");
        Ok(ObjectTrack {
            track_id,
            class_id: 0,
            confidence: self.confidence,
            first_frame: self.first_frame,
            boxes: vec![placeholder; n],
            observed: vec![true; n],
            detections: Vec::new(),
            masks,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Caps,
    Logits {
        view: WireTensor,
        query: Vec<u32>,
        prefix: Vec<u32>,
    },
    QueryLoss {
        view: WireTensor,
        query: Vec<u32>,
    },
    LossGrad {
        video: WireTensor,
        tracks: Vec<WireTrack>,
        strengths: StrengthVector,
        query: Vec<u32>,
        compose: ComposeConfig,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    #[serde(flatten)]
    pub op: Op,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Response {
    pub id: Option<u64>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

#[derive(Deserialize)]
struct LogitsResult {
    logits: Vec<f64>,
}

#[derive(Deserialize)]
struct LossResult {
    loss: f64,
}

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    next_id: u64,
    child: Option<Child>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Protocol client. One request is in flight per connection at a time.
pub struct ProtoBackend {
    conn: Mutex<Connection>,
    caps: BackendCapabilities,
}

impl std::fmt::Debug for ProtoBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProtoBackend").field("caps", &self.caps).finish_non_exhaustive()
    }
}

impl ProtoBackend {
    /// Connects to `host:port`, or spawns `$MACD_BRIDGE_CMD` for `stdio`.
    pub fn connect(target: &str) -> Result<Self, BackendError> {
        if target == "stdio" {
            let cmd = std::env::var(BRIDGE_CMD_ENV).map_err(|_| {
                BackendError::Protocol(format!("proto:stdio needs the server command in {BRIDGE_CMD_ENV}"))
            })?;
            let mut child =
                Command::new("sh").arg("-c").arg(&cmd).stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            return Self::handshake(Connection {
                reader: Box::new(BufReader::new(stdout)),
                writer: Box::new(stdin),
                next_id: 0,
                child: Some(child),
            });
        }
        let stream = TcpStream::connect(target)?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Self::from_streams(reader, stream)
    }

    pub fn from_streams(
        reader: impl BufRead + Send + 'static,
        writer: impl Write + Send + 'static,
    ) -> Result<Self, BackendError> {
        Self::handshake(Connection { reader: Box::new(reader), writer: Box::new(writer), next_id: 0, child: None })
    }

    fn handshake(conn: Connection) -> Result<Self, BackendError> {
        let placeholder = BackendCapabilities { vocab_size: 2, supports_analytic_grad: false, max_frames: 0 };
        let mut backend = Self { conn: Mutex::new(conn), caps: placeholder };
        let caps: BackendCapabilities = parse_result(backend.call(Op::Caps)?)?;
        if caps.vocab_size < 2 {
            return Err(BackendError::Protocol(format!("server reports vocab_size {}", caps.vocab_size)));
        }
        backend.caps = caps;
        Ok(backend)
    }

    fn call(&self, op: Op) -> Result<Value, BackendError> {
        let mut conn = self.conn.lock().unwrap_or_else(|e| e.into_inner());
        let id = conn.next_id;
        conn.next_id += 1;
        let mut line = serde_json::to_string(&Request { id, op }).expect("requests serialize");
        line.push('\n');
        conn.writer.write_all(line.as_bytes())?;
        conn.writer.flush()?;

        let mut reply = String::new();
        if conn.reader.read_line(&mut reply)? == 0 {
            return Err(BackendError::Protocol("server closed the connection".into()));
        }
        let resp: Response =
            serde_json::from_str(&reply).map_err(|e| BackendError::Protocol(format!("unparseable response: {e}")))?;
        if resp.id != Some(id) {
            return Err(BackendError::Protocol(format!("response id {:?} does not match request {id}", resp.id)));
        }
        match (resp.ok, resp.result, resp.error) {
            (true, Some(result), _) => Ok(result),
            (false, _, Some(err)) => Err(BackendError::Remote { code: err.code, message: err.message }),
            _ => Err(BackendError::Protocol("response carries neither result nor error".into())),
        }
    }
}

fn parse_result<T: for<'de> Deserialize<'de>>(value: Value) -> Result<T, BackendError> {
    serde_json::from_value(value).map_err(|e| BackendError::Protocol(format!("unexpected result shape: {e}")))
}

impl ModelBackend for ProtoBackend {
    fn capabilities(&self) -> BackendCapabilities {
        self.caps
    }

    fn logits(&self, view: &VideoTensor, query: &TokenSequence, prefix: &[u32]) -> Result<Vec<f64>, BackendError> {
        let op =
            Op::Logits { view: WireTensor::from_video(view), query: query.ids().to_vec(), prefix: prefix.to_vec() };
        let out: LogitsResult = parse_result(self.call(op)?)?;
        if out.logits.len() != self.caps.vocab_size {
            return Err(BackendError::Protocol(format!(
                "got {} logits for vocabulary of {}",
                out.logits.len(),
                self.caps.vocab_size
            )));
        }
        Ok(out.logits)
    }

    fn query_loss(&self, view: &VideoTensor, query: &TokenSequence) -> Result<f64, BackendError> {
        if query.is_empty() {
            return Err(BackendError::EmptyQuery);
        }
        let op = Op::QueryLoss { view: WireTensor::from_video(view), query: query.ids().to_vec() };
        Ok(parse_result::<LossResult>(self.call(op)?)?.loss)
    }

    fn loss_grad(&self, req: &GradRequest) -> Result<LossGrad, BackendError> {
        let op = Op::LossGrad {
            video: WireTensor::from_video(req.base_video),
            tracks: req.tracks.iter().map(WireTrack::from_track).collect(),
            strengths: req.strengths.clone(),
            query: req.query.ids().to_vec(),
            compose: req.compose.clone(),
        };
        parse_result(self.call(op)?)
    }
}

fn error_code(err: &BackendError) -> &'static str {
    match err {
        BackendError::VocabMismatch { .. }
        | BackendError::EmptyQuery
        | BackendError::Protocol(_)
        | BackendError::Compose(_) => "bad_request",
        _ => "model_error",
    }
}

fn dispatch(backend: &dyn ModelBackend, op: Op) -> Result<Value, BackendError> {
    let vocab = backend.capabilities().vocab_size;
    let tokens = |ids: Vec<u32>| {
        TokenSequence::new(ids, vocab).map_err(|e| BackendError::VocabMismatch { id: e.id, vocab_size: e.vocab_size })
    };
    let value = match op {
        Op::Caps => serde_json::to_value(backend.capabilities()),
        Op::Logits { view, query, prefix } => {
            let logits = backend.logits(&view.to_video()?, &tokens(query)?, &prefix)?;
            Ok(serde_json::json!({ "logits": logits }))
        }
        Op::QueryLoss { view, query } => {
            let loss = backend.query_loss(&view.to_video()?, &tokens(query)?)?;
            Ok(serde_json::json!({ "loss": loss }))
        }
        Op::LossGrad { video, tracks, strengths, query, compose } => {
            let video = video.to_video()?;
            let tracks = tracks.iter().enumerate().map(|(i, t)| t.to_track(i as u32)).collect::<Result<Vec<_>, _>>()?;
            let query = tokens(query)?;
            let req = GradRequest {
                base_video: &video,
                tracks: &tracks,
                strengths: &strengths,
                query: &query,
                compose: &compose,
            };
            serde_json::to_value(backend.loss_grad(&req)?)
        }
    };
    Ok(value.expect("results serialize"))
}

/// Answers protocol requests from `input` until end of stream, in order.
///
/// Malformed lines get a `bad_request` error response and the connection stays open.
pub fn serve(backend: &dyn ModelBackend, input: impl BufRead, mut output: impl Write) -> io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |id, code: &str, message: String| Response {
            id,
            ok: false,
            result: None,
            error: Some(WireError { code: code.into(), message }),
        };
        let resp = match serde_json::from_str::<Value>(&line) {
            Err(e) => fail(None, "bad_request", format!("invalid JSON: {e}")),
            Ok(value) => {
                let id = value.get("id").and_then(Value::as_u64);
                match serde_json::from_value::<Request>(value) {
                    Err(e) => fail(id, "bad_request", e.to_string()),
                    Ok(req) => match dispatch(backend, req.op) {
                        Ok(result) => Response { id: Some(req.id), ok: true, result: Some(result), error: None },
                        Err(e) => fail(Some(req.id), error_code(&e), e.to_string()),
                    },
                }
            }
        };
        let mut text = serde_json::to_string(&resp).expect("responses serialize");
        text.push('\n');
        output.write_all(text.as_bytes())?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn tensor_codec_round_trips(
            (shape, values) in proptest::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
                let n = shape.iter().product::<usize>();
                (Just(shape), proptest::collection::vec(any::<f32>(), n))
            }),
        ) {
            let back = WireTensor::encode(&shape, &values).decode().unwrap();
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&values));
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut wire = WireTensor::encode(&[2], &[1.0, 2.0]);
        wire.shape = vec![3];
        assert!(matches!(wire.decode(), Err(BackendError::Protocol(_))));
    }

    #[test]
    fn request_wire_shape() {
        let line = serde_json::to_string(&Request { id: 7, op: Op::Caps }).unwrap();
        assert_eq!(line, r#"{"id":7,"op":"caps"}"#);
        let req: Request =
            serde_json::from_str(r#"{"id":3,"op":"query_loss","view":{"shape":[1],"data":"AAAAAA=="},"query":[1]}"#)
                .unwrap();
        assert!(matches!(req.op, Op::QueryLoss { .. }));
    }
}
