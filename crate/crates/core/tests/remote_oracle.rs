use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use gad_core::camera::CameraPose;
use gad_core::guidance::{
    decode_tensors, encode_tensors, GuidanceOracle, GuidanceRequest, RemoteOracle, ResponseKind,
    WireRequest, WireResponse, PREDICT_PATH,
};
use gad_core::image::Image;
use gad_core::OracleError;
use proptest::prelude::*;

/// In-process guidance service; `handler` maps a parsed request to (status, body).
struct Stub {
    url: String,
    hits: Arc<AtomicUsize>,
}

impl Stub {
    fn start<F>(handler: F) -> Stub
    where
        F: Fn(usize, &WireRequest) -> (u16, String) + Send + 'static,
    {
        let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
        let url = format!("http://{}", server.server_addr().to_ip().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        thread::spawn(move || {
            for mut req in server.incoming_requests() {
                let n = counter.fetch_add(1, Ordering::SeqCst);
                let mut body = String::new();
                req.as_reader().read_to_string(&mut body).unwrap();
                let (status, out) = if req.url() != PREDICT_PATH {
                    (404, String::new())
                } else {
                    match serde_json::from_str::<WireRequest>(&body) {
                        Ok(w) => handler(n, &w),
                        Err(e) => (400, e.to_string()),
                    }
                };
                let _ = req.respond(tiny_http::Response::from_string(out).with_status_code(status));
            }
        });
        Stub { url, hits }
    }
}

fn zeros_like(w: &WireRequest, kind: &str) -> String {
    let images: Vec<Image> = (0..w.batch).map(|_| Image::zeros(w.width, w.height)).collect();
    serde_json::to_string(&WireResponse {
        kind: kind.into(),
        tensors_b64: encode_tensors(&images),
        alpha_bar: Some(0.5),
    })
    .unwrap()
}

fn request(batch: usize, width: usize, height: usize, t: f64) -> GuidanceRequest {
    let images = (0..batch)
        .map(|b| {
            let data = (0..width * height * 3).map(|i| ((i + b) % 5) as f64 / 4.0).collect();
            Image::from_vec(width, height, data).unwrap()
        })
        .collect();
    let poses = (0..batch)
        .map(|b| CameraPose::new(b as f64 * 0.5, 0.2, 2.5).with_resolution(width, height))
        .collect();
    GuidanceRequest {
        kind: ResponseKind::NoisePrediction,
        images,
        timestep: t,
        prompt: "a hamburger".into(),
        negative_prompt: String::new(),
        poses,
        cfg_scale: 100.0,
        noise_seed: 7,
    }
}

fn oracle(url: &str) -> RemoteOracle {
    RemoteOracle::new(url, ResponseKind::NoisePrediction).with_retries(3, Duration::from_millis(10))
}

#[test]
fn zeros_echo_preserves_shapes() {
    let stub = Stub::start(|_, w| (200, zeros_like(w, "noise")));
    let req = request(4, 9, 7, 0.5);
    let resp = oracle(&stub.url).predict(&req).unwrap();
    assert_eq!(resp.kind, ResponseKind::NoisePrediction);
    assert_eq!(resp.tensors.len(), 4);
    for t in &resp.tensors {
        assert_eq!((t.width(), t.height()), (9, 7));
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
    assert_eq!(resp.alpha_bar, Some(0.5));
}

#[test]
fn request_body_follows_the_wire_format() {
    let stub = Stub::start(|_, w| {
        let images = decode_tensors(&w.images_b64, w.batch, w.width, w.height).unwrap();
        let ok = w.kind == "noise"
            && w.prompt == "a hamburger"
            && w.cfg_scale == 100.0
            && w.noise_seed == 7
            && w.poses.len() == 2
            && (w.poses[1].azimuth - 0.5f64.to_degrees()).abs() < 1e-9
            && (w.poses[0].fov_y - 49.1).abs() < 1e-9
            && images[1].data()[0] == 0.25;
        if ok {
            (200, zeros_like(w, "noise"))
        } else {
            (400, "unexpected body".into())
        }
    });
    oracle(&stub.url).predict(&request(2, 3, 2, 0.25)).unwrap();
}

#[test]
fn wrong_shape_is_a_protocol_error() {
    let stub = Stub::start(|_, w| {
        let images = vec![Image::zeros(w.width + 1, w.height); w.batch];
        let body = WireResponse {
            kind: "noise".into(),
            tensors_b64: encode_tensors(&images),
            alpha_bar: None,
        };
        (200, serde_json::to_string(&body).unwrap())
    });
    let err = oracle(&stub.url).predict(&request(1, 4, 4, 0.5)).unwrap_err();
    assert!(matches!(err, OracleError::Protocol(_)), "{err}");
}

#[test]
fn latency_keeps_responses_in_order() {
    let stub = Stub::start(|_, w| {
        thread::sleep(Duration::from_millis(100));
        let fill = w.timestep;
        let images = vec![Image::filled(w.width, w.height, [fill; 3]); w.batch];
        let body = WireResponse {
            kind: "noise".into(),
            tensors_b64: encode_tensors(&images),
            alpha_bar: None,
        };
        (200, serde_json::to_string(&body).unwrap())
    });
    let mut o = oracle(&stub.url);
    for t in [0.25, 0.5, 0.75] {
        let resp = o.predict(&request(1, 5, 5, t)).unwrap();
        assert!(resp.tensors[0].data().iter().all(|&v| v == t));
    }
    assert_eq!(stub.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn busy_service_is_retried() {
    let stub = Stub::start(|n, w| if n < 2 { (503, "busy".into()) } else { (200, zeros_like(w, "noise")) });
    oracle(&stub.url).predict(&request(1, 2, 2, 0.5)).unwrap();
    assert_eq!(stub.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn persistent_busy_reports_attempts() {
    let stub = Stub::start(|_, _| (503, "busy".into()));
    let err = oracle(&stub.url).predict(&request(1, 2, 2, 0.5)).unwrap_err();
    match &err {
        OracleError::Transport { attempts, endpoint, .. } => {
            assert_eq!(*attempts, 3);
            assert!(endpoint.ends_with(PREDICT_PATH));
        }
        other => panic!("{other}"),
    }
    assert!(err.is_retryable());
}

#[test]
fn rejected_request_is_not_retried() {
    let stub = Stub::start(|_, _| (400, "bad cfg".into()));
    let err = oracle(&stub.url).predict(&request(1, 2, 2, 0.5)).unwrap_err();
    assert!(matches!(err, OracleError::Protocol(_)));
    assert_eq!(stub.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn malformed_json_is_a_protocol_error() {
    let stub = Stub::start(|_, _| (200, "{\"kind\": 3}".into()));
    let err = oracle(&stub.url).predict(&request(1, 2, 2, 0.5)).unwrap_err();
    assert!(matches!(err, OracleError::Protocol(_)));
}

#[test]
fn non_finite_values_are_rejected() {
    let stub = Stub::start(|_, w| {
        let mut im = Image::zeros(w.width, w.height);
        im.data_mut()[5] = f64::NAN;
        let body = WireResponse {
            kind: "noise".into(),
            tensors_b64: encode_tensors(&[im]),
            alpha_bar: None,
        };
        (200, serde_json::to_string(&body).unwrap())
    });
    let err = oracle(&stub.url).predict(&request(1, 2, 2, 0.5)).unwrap_err();
    assert!(matches!(err, OracleError::NonFinite { index: 5 }), "{err}");
}

#[test]
fn unreachable_endpoint_fails_readiness() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}");
    let o = oracle(&url);
    let err = o.check_ready().unwrap_err();
    assert!(err.to_string().contains(&port.to_string()), "{err}");
    let err = oracle(&url).predict(&request(1, 2, 2, 0.5)).unwrap_err();
    assert!(matches!(err, OracleError::Transport { attempts: 3, .. }));
}

#[test]
fn reachable_endpoint_passes_readiness() {
    let stub = Stub::start(|_, w| (200, zeros_like(w, "noise")));
    oracle(&stub.url).check_ready().unwrap();
}

#[test]
fn encoding_is_little_endian_f32() {
    let im = Image::from_vec(1, 1, vec![1.0, -2.0, 0.5]).unwrap();
    let b64 = encode_tensors(std::slice::from_ref(&im));
    use base64::Engine as _;
    let bytes = base64::engine::general_purpose::STANDARD.decode(&b64).unwrap();
    assert_eq!(&bytes[..4], &1.0f32.to_le_bytes());
    assert_eq!(&bytes[4..8], &(-2.0f32).to_le_bytes());
    assert_eq!(decode_tensors(&b64, 1, 1, 1).unwrap()[0], im);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn responses_are_accepted_only_with_matching_shape(
        batch in 1usize..4, w in 1usize..6, h in 1usize..6,
        rb in 0usize..5, rw in 1usize..7, rh in 1usize..7,
    ) {
        let stub = Stub::start(move |_, _| {
            let images = vec![Image::zeros(rw, rh); rb];
            let body = WireResponse { kind: "noise".into(), tensors_b64: encode_tensors(&images), alpha_bar: None };
            (200, serde_json::to_string(&body).unwrap())
        });
        let result = oracle(&stub.url).predict(&request(batch, w, h, 0.5));
        // Responses carry no dimensions: the payload must hold exactly the request's element count.
        if rb * rw * rh == batch * w * h {
            let resp = result.unwrap();
            prop_assert_eq!(resp.tensors.len(), batch);
            prop_assert!(resp.tensors.iter().all(|t| t.width() == w && t.height() == h));
        } else {
            prop_assert!(matches!(result, Err(OracleError::Protocol(_))));
        }
    }
}
