use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use controlpipe_core::backend::{
    generate_batch, Backend, BackendConfig, BackendError, GenRequest, GenResult, HttpBackend,
    Usage,
};
use serde_json::{json, Value};

async fn serve(app: Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}/v1")
}

fn config(base_url: String) -> BackendConfig {
    BackendConfig {
        base_url,
        backoff_base_ms: 1,
        backoff_max_ms: 5,
        max_retries: 4,
        ..Default::default()
    }
}

fn completion(text: &str) -> Value {
    json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 3, "completion_tokens": 2}
    })
}

#[tokio::test]
async fn retries_through_rate_limits() {
    let hits = Arc::new(AtomicUsize::new(0));
    let app = Router::new()
        .route(
            "/v1/chat/completions",
            post(|State(hits): State<Arc<AtomicUsize>>, Json(body): Json<Value>| async move {
                assert_eq!(body["messages"][0]["role"], "user");
                if hits.fetch_add(1, Ordering::SeqCst) < 2 {
                    (StatusCode::TOO_MANY_REQUESTS, Json(json!({"error": "slow down"})))
                } else {
                    (StatusCode::OK, Json(completion("hello")))
                }
            }),
        )
        .with_state(hits.clone());
    let backend = HttpBackend::new(config(serve(app).await)).unwrap();
    let out = backend.generate(&GenRequest::new("hi")).await.unwrap();
    assert_eq!(out.text, "hello");
    assert_eq!(out.retries, 2);
    assert_eq!(out.usage.prompt_tokens, 3);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let hits = Arc::new(AtomicUsize::new(0));
    let app = Router::new()
        .route(
            "/v1/chat/completions",
            post(|State(hits): State<Arc<AtomicUsize>>| async move {
                hits.fetch_add(1, Ordering::SeqCst);
                (StatusCode::UNAUTHORIZED, "bad key")
            }),
        )
        .with_state(hits.clone());
    let backend = HttpBackend::new(config(serve(app).await)).unwrap();
    let err = backend.generate(&GenRequest::new("hi")).await.unwrap_err();
    match err {
        BackendError::BackendRejected { status, body } => {
            assert_eq!(status, 401);
            assert_eq!(body, "bad key");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn persistent_server_errors_exhaust_retries() {
    let app = Router::new().route(
        "/v1/chat/completions",
        post(|| async { StatusCode::SERVICE_UNAVAILABLE }),
    );
    let backend = HttpBackend::new(config(serve(app).await)).unwrap();
    let err = backend.generate(&GenRequest::new("hi")).await.unwrap_err();
    assert!(
        matches!(err, BackendError::BackendUnavailable { attempts: 5, .. }),
        "{err:?}"
    );
}

#[tokio::test]
async fn unreachable_host_is_unavailable() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let mut cfg = config(format!("http://127.0.0.1:{port}/v1"));
    cfg.max_retries = 1;
    let backend = HttpBackend::new(cfg).unwrap();
    let err = backend.generate(&GenRequest::new("hi")).await.unwrap_err();
    assert!(matches!(err, BackendError::BackendUnavailable { attempts: 2, .. }), "{err:?}");
}

#[tokio::test]
async fn malformed_body_is_reported() {
    let app = Router::new().route(
        "/v1/chat/completions",
        post(|| async { Json(json!({"choices": []})) }),
    );
    let backend = HttpBackend::new(config(serve(app).await)).unwrap();
    let err = backend.generate(&GenRequest::new("hi")).await.unwrap_err();
    assert!(matches!(err, BackendError::MalformedResponse(_)), "{err:?}");
}

struct Instrumented {
    current: AtomicUsize,
    peak: AtomicUsize,
}

#[async_trait]
impl Backend for Instrumented {
    fn id(&self) -> &str {
        "instrumented"
    }

    async fn generate(&self, req: &GenRequest) -> Result<GenResult, BackendError> {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        tokio::time::sleep(Duration::from_millis(5)).await;
        self.current.fetch_sub(1, Ordering::SeqCst);
        Ok(GenResult {
            text: req.user.clone(),
            usage: Usage::default(),
            backend: "instrumented".into(),
            retries: 0,
        })
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn batch_respects_in_flight_limit_and_order() {
    let backend = Instrumented {
        current: AtomicUsize::new(0),
        peak: AtomicUsize::new(0),
    };
    let reqs: Vec<GenRequest> = (0..30).map(|i| GenRequest::new(format!("q{i}"))).collect();
    let out = generate_batch(&backend, &reqs, 3).await;
    assert!(backend.peak.load(Ordering::SeqCst) <= 3);
    assert!(backend.peak.load(Ordering::SeqCst) >= 2);
    for (i, r) in out.iter().enumerate() {
        assert_eq!(r.as_ref().unwrap().text, format!("q{i}"));
    }
}
