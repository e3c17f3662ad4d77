use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{GuidanceOracle, GuidanceRequest, GuidanceResponse, ResponseKind};
use crate::camera::CameraPose;
use crate::error::OracleError;
use crate::image::Image;

pub const PREDICT_PATH: &str = "/v1/predict";

/// Angles travel in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WirePose {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub fov_y: f64,
}

impl From<&CameraPose> for WirePose {
    fn from(p: &CameraPose) -> Self {
        Self {
            azimuth: p.azimuth.to_degrees(),
            elevation: p.elevation.to_degrees(),
            radius: p.radius,
            fov_y: p.fov_y.to_degrees(),
        }
    }
}

/// JSON body of a prediction request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRequest {
    pub kind: String,
    pub prompt: String,
    pub negative_prompt: String,
    pub cfg_scale: f64,
    pub timestep: f64,
    pub noise_seed: u64,
    pub width: usize,
    pub height: usize,
    pub batch: usize,
    pub poses: Vec<WirePose>,
    pub images_b64: String,
}

impl WireRequest {
    pub fn from_request(request: &GuidanceRequest) -> Self {
        let (width, height) = request
            .images
            .first()
            .map_or((0, 0), |im| (im.width(), im.height()));
        Self {
            kind: request.kind.wire_name().to_owned(),
            prompt: request.prompt.clone(),
            negative_prompt: request.negative_prompt.clone(),
            cfg_scale: request.cfg_scale,
            timestep: request.timestep,
            noise_seed: request.noise_seed,
            width,
            height,
            batch: request.images.len(),
            poses: request.poses.iter().map(WirePose::from).collect(),
            images_b64: encode_tensors(&request.images),
        }
    }
}

/// JSON body of a prediction response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub kind: String,
    pub tensors_b64: String,
    #[serde(default)]
    pub alpha_bar: Option<f64>,
}

impl WireResponse {
    pub fn from_response(response: &GuidanceResponse) -> Self {
        Self {
            kind: response.kind.wire_name().to_owned(),
            tensors_b64: encode_tensors(&response.tensors),
            alpha_bar: response.alpha_bar,
        }
    }
}

/// Base64 of little-endian `f32`, batch-major then row-major `H×W×3`.
pub fn encode_tensors(images: &[Image]) -> String {
    let mut bytes = Vec::with_capacity(images.iter().map(|im| im.data().len() * 4).sum());
    for im in images {
        for &v in im.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    STANDARD.encode(bytes)
}

pub fn decode_tensors(
    b64: &str,
    batch: usize,
    width: usize,
    height: usize,
) -> Result<Vec<Image>, OracleError> {
    let bytes = STANDARD
        .decode(b64)
        .map_err(|e| OracleError::Protocol(format!("bad base64 payload: {e}")))?;
    let per = width * height * 3;
    if bytes.len() != batch * per * 4 {
        return Err(OracleError::Protocol(format!(
            "payload holds {} bytes, expected {} for {batch}x{height}x{width}x3 f32",
            bytes.len(),
            batch * per * 4
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(values
        .chunks(per.max(1))
        .take(batch)
        .map(|c| Image::from_vec(width, height, c.to_vec()).expect("sized by chunking"))
        .collect())
}

/// HTTP client for a guidance service.
///
/// Transport failures and `503` answers are retried with exponential
/// backoff; a `400` or an unreadable body fails immediately.
pub struct RemoteOracle {
    base_url: String,
    kind: ResponseKind,
    agent: ureq::Agent,
    max_attempts: u32,
    backoff: Duration,
    connect_timeout: Duration,
}

impl RemoteOracle {
    pub fn new(base_url: impl Into<String>, kind: ResponseKind) -> Self {
        let timeout = Duration::from_secs(300);
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            kind,
            agent,
            max_attempts: 4,
            backoff: Duration::from_millis(200),
            connect_timeout: Duration::from_secs(3),
        }
    }

    pub fn with_retries(mut self, max_attempts: u32, backoff: Duration) -> Self {
        self.max_attempts = max_attempts.max(1);
        self.backoff = backoff;
        self
    }

    pub fn endpoint(&self) -> String {
        format!("{}{PREDICT_PATH}", self.base_url)
    }

    fn transport(&self, attempts: u32, message: String) -> OracleError {
        OracleError::Transport {
            endpoint: self.endpoint(),
            attempts,
            message,
        }
    }

    /// One POST; `Ok(None)` means the service asked us to come back later.
    fn post_once(&self, body: &str) -> Result<Option<String>, Result<String, OracleError>> {
        let mut response = self
            .agent
            .post(self.endpoint())
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| Ok(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_to_string()
            .map_err(|e| Ok(e.to_string()))?;
        match status {
            200 => Ok(Some(text)),
            503 => Ok(None),
            400 => Err(Err(OracleError::Protocol(format!(
                "service rejected request: {}",
                text.trim()
            )))),
            other => Err(Ok(format!("HTTP {other}: {}", text.trim()))),
        }
    }

    fn parse(&self, text: &str, request: &GuidanceRequest) -> Result<GuidanceResponse, OracleError> {
        let wire: WireResponse = serde_json::from_str(text)
            .map_err(|e| OracleError::Protocol(format!("malformed response: {e}")))?;
        let kind = ResponseKind::from_wire(&wire.kind)
            .ok_or_else(|| OracleError::Protocol(format!("unknown response kind {:?}", wire.kind)))?;
        let first = &request.images[0];
        let tensors = decode_tensors(
            &wire.tensors_b64,
            request.images.len(),
            first.width(),
            first.height(),
        )?;
        let response = GuidanceResponse {
            kind,
            tensors,
            alpha_bar: wire.alpha_bar,
        };
        response.validate_against(request)?;
        Ok(response)
    }
}

impl GuidanceOracle for RemoteOracle {
    fn kind(&self) -> ResponseKind {
        self.kind
    }

    fn predict(&mut self, request: &GuidanceRequest) -> Result<GuidanceResponse, OracleError> {
        request.validate()?;
        let body = serde_json::to_string(&WireRequest::from_request(request))
            .map_err(|e| OracleError::Protocol(e.to_string()))?;
        let mut last = String::new();
        for attempt in 1..=self.max_attempts {
            match self.post_once(&body) {
                Ok(Some(text)) => return self.parse(&text, request),
                Ok(None) => last = "service busy (HTTP 503)".into(),
                Err(Ok(message)) => last = message,
                Err(Err(fatal)) => return Err(fatal),
            }
            if attempt < self.max_attempts {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
        }
        Err(self.transport(self.max_attempts, last))
    }

    fn check_ready(&self) -> Result<(), OracleError> {
        let uri: ureq::http::Uri = self
            .base_url
            .parse()
            .map_err(|e| OracleError::Misconfigured(format!("bad oracle URL {}: {e}", self.base_url)))?;
        let host = uri
            .host()
            .ok_or_else(|| OracleError::Misconfigured(format!("oracle URL {} has no host", self.base_url)))?;
        let port = uri
            .port_u16()
            .unwrap_or(if uri.scheme_str() == Some("https") { 443 } else { 80 });
        let addrs = (host, port)
            .to_socket_addrs()
            .map_err(|e| self.transport(1, e.to_string()))?;
        let mut last = format!("{host}:{port} resolved to no address");
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, self.connect_timeout) {
                Ok(_) => return Ok(()),
                Err(e) => last = e.to_string(),
            }
        }
        Err(self.transport(1, last))
    }
}
