//! HTTP clients for externally hosted tracker, segmenter and flow models.
//!
//! Every call carries a timeout. A transport failure or a 5xx answer is retried
//! once; any other failure is reported as [`Error::Remote`]. Frames travel as
//! base64 of packed RGB bytes.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::codec::VideoFrames;
use crate::error::{Error, Result};
use crate::instruction::{Mask, Point, PointTracker, Segmenter, Tracks};
use crate::metrics::{FlowEstimator, FlowField};

/// Where a model lives and how long to wait for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub url: String,
    pub timeout_ms: u64,
}

impl Endpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout_ms: 30_000,
        }
    }

    fn post<T: DeserializeOwned>(&self, path: &str, body: &serde_json::Value) -> Result<T> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(self.timeout_ms))
            .build()
            .map_err(|e| Error::Remote(e.to_string()))?;
        let url = format!("{}/{}", self.url.trim_end_matches('/'), path);
        let mut last = String::new();
        for attempt in 0..2 {
            match client.post(&url).json(body).send() {
                Ok(resp) if resp.status().is_success() => {
                    return resp
                        .json::<T>()
                        .map_err(|e| Error::Remote(format!("{url}: malformed reply: {e}")));
                }
                Ok(resp) if resp.status().is_server_error() => {
                    last = format!("{url}: HTTP {}", resp.status());
                }
                Ok(resp) => return Err(Error::Remote(format!("{url}: HTTP {}", resp.status()))),
                Err(e) => last = format!("{url}: {e}"),
            }
            log::warn!("remote call failed (attempt {}): {last}", attempt + 1);
        }
        Err(Error::Remote(last))
    }
}

fn encode_frame(video: &VideoFrames, i: usize) -> String {
    B64.encode(video.frame(i))
}

#[derive(Deserialize)]
struct TrackReply {
    positions: Vec<Vec<Point>>,
    valid: Vec<Vec<bool>>,
}

/// Point tracker served at `POST {url}/track`.
#[derive(Debug, Clone)]
pub struct RemotePointTracker(pub Endpoint);

impl PointTracker for RemotePointTracker {
    fn track(&self, video: &VideoFrames, points: &[Point]) -> Result<Tracks> {
        let frames: Vec<String> = (0..video.frames()).map(|i| encode_frame(video, i)).collect();
        let body = json!({"width": video.width(), "height": video.height(), "frames": frames, "points": points});
        let reply: TrackReply = self.0.post("track", &body)?;
        let shape_ok = reply.positions.len() == video.frames()
            && reply.valid.len() == video.frames()
            && reply
                .positions
                .iter()
                .zip(&reply.valid)
                .all(|(p, v)| p.len() == points.len() && v.len() == points.len());
        if !shape_ok {
            return Err(Error::Remote("tracker reply does not match the request shape".into()));
        }
        Ok(Tracks {
            positions: reply.positions,
            valid: reply.valid,
        })
    }
}

#[derive(Deserialize)]
struct MaskReply {
    /// base64 of one byte per pixel, nonzero = inside.
    mask: String,
}

/// Promptable segmenter served at `POST {url}/segment`.
#[derive(Debug, Clone)]
pub struct RemoteSegmenter(pub Endpoint);

impl Segmenter for RemoteSegmenter {
    fn segment(&self, video: &VideoFrames, frame: usize, positive: &[Point], negative: &[Point]) -> Result<Mask> {
        let body = json!({
            "width": video.width(),
            "height": video.height(),
            "frame": encode_frame(video, frame),
            "positive": positive,
            "negative": negative,
        });
        let reply: MaskReply = self.0.post("segment", &body)?;
        let bytes = B64
            .decode(reply.mask)
            .map_err(|e| Error::Remote(format!("segmenter mask is not base64: {e}")))?;
        let (h, w) = (video.height(), video.width());
        if bytes.len() != h * w {
            return Err(Error::Remote(format!(
                "segmenter mask has {} pixels, expected {}",
                bytes.len(),
                h * w
            )));
        }
        Ok(Mask::from_fn(h, w, |y, x| bytes[y * w + x] != 0))
    }
}

#[derive(Deserialize)]
struct FlowReply {
    dx: Vec<f64>,
    dy: Vec<f64>,
}

/// Optical flow served at `POST {url}/flow`.
#[derive(Debug, Clone)]
pub struct RemoteFlow(pub Endpoint);

impl FlowEstimator for RemoteFlow {
    fn estimate(&self, video: &VideoFrames, i: usize) -> Result<FlowField> {
        let body = json!({
            "width": video.width(),
            "height": video.height(),
            "frame_a": encode_frame(video, i),
            "frame_b": encode_frame(video, i + 1),
        });
        let reply: FlowReply = self.0.post("flow", &body)?;
        let field = FlowField {
            height: video.height(),
            width: video.width(),
            dx: reply.dx,
            dy: reply.dy,
        };
        field.validate(video.height(), video.width())?;
        Ok(field)
    }
}
