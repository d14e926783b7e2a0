use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use tiny_http::{Header, Response, Server};

use vmoe::backend::{
    predict_all, BackendConfig, BackendKind, Context, ExpertBackend, ExpertPool, HttpBackend,
};
use vmoe::{Error, TokenId};

struct Reply {
    status: u16,
    body: String,
    delay: Duration,
}

/// Serves `/v1/completions` on an ephemeral port, one thread per request.
/// The handler sees the request body and the 0-based request index.
fn serve<F>(handler: F) -> (String, Arc<AtomicUsize>)
where
    F: Fn(&Value, usize) -> Reply + Send + Sync + 'static,
{
    let server = Server::http("127.0.0.1:0").unwrap();
    let port = server.server_addr().to_ip().unwrap().port();
    let hits = Arc::new(AtomicUsize::new(0));
    let handler = Arc::new(handler);
    let counter = hits.clone();
    thread::spawn(move || {
        for mut request in server.incoming_requests() {
            let n = counter.fetch_add(1, Ordering::SeqCst);
            let handler = handler.clone();
            thread::spawn(move || {
                let mut text = String::new();
                request.as_reader().read_to_string(&mut text).unwrap();
                let body: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
                let reply = handler(&body, n);
                thread::sleep(reply.delay);
                let header = Header::from_bytes("Content-Type", "application/json").unwrap();
                let _ = request.respond(
                    Response::from_string(reply.body)
                        .with_status_code(reply.status)
                        .with_header(header),
                );
            });
        }
    });
    (format!("http://127.0.0.1:{port}"), hits)
}

fn completion(token: &str, logprob: f64) -> String {
    json!({"choices": [{"text": token, "logprobs": {"top_logprobs": [{token: logprob, "63": -9.0}]}}]}).to_string()
}

fn ok(body: String) -> Reply {
    Reply {
        status: 200,
        body,
        delay: Duration::ZERO,
    }
}

fn backend(url: &str, retries: u32, timeout_ms: u64) -> HttpBackend<f64> {
    HttpBackend::new(&BackendConfig {
        kind: BackendKind::Http,
        base_url: url.to_string(),
        max_retries: retries,
        request_timeout_ms: timeout_ms,
        max_concurrent_requests: 4,
        ..Default::default()
    })
    .unwrap()
}

fn one_expert() -> ExpertPool {
    ExpertPool::default_with(1).unwrap()
}

#[test]
fn logprob_becomes_probability() {
    let (url, _) = serve(|body, _| {
        assert_eq!(body["max_tokens"], 1);
        assert_eq!(body["logprobs"], 5);
        ok(completion("42", -0.10536))
    });
    let b = backend(&url, 0, 5_000);
    let p = b
        .fetch_prediction(&one_expert().experts()[0], &Context::new("Tell a story"))
        .unwrap();
    assert_eq!(p.token, TokenId(42));
    assert!((p.probability - 0.9).abs() < 1e-4, "{}", p.probability);
    assert_eq!(&p.embedding, b.embeddings().get(TokenId(42)).unwrap());
}

#[test]
fn retries_transient_server_errors() {
    let handler = |_: &Value, n: usize| {
        if n < 2 {
            Reply {
                status: 503,
                body: "busy".into(),
                delay: Duration::ZERO,
            }
        } else {
            ok(completion("7", -0.5))
        }
    };
    let (url, hits) = serve(handler);
    let preds = predict_all(&one_expert(), &Context::new("q"), &backend(&url, 2, 5_000)).unwrap();
    assert_eq!(preds[0].token, TokenId(7));
    assert_eq!(hits.load(Ordering::SeqCst), 3);

    let (url, hits) = serve(handler);
    match predict_all(&one_expert(), &Context::new("q"), &backend(&url, 1, 5_000)) {
        Err(e @ Error::Step { .. }) => assert_eq!(e.exit_code(), 2),
        other => panic!("{other:?}"),
    }
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn missing_logprobs_is_a_protocol_error() {
    let (url, hits) = serve(|_, _| ok(json!({"choices": [{"text": "hi"}]}).to_string()));
    let b = backend(&url, 3, 5_000);
    let err = b
        .fetch_prediction(&one_expert().experts()[0], &Context::new("q"))
        .unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err:?}");
    // protocol errors are not retried
    let pool = ExpertPool::default_with(3).unwrap();
    match predict_all(&pool, &Context::new("q"), &b) {
        Err(Error::Step { expert_ids, .. }) => assert_eq!(expert_ids, vec![0, 1, 2]),
        other => panic!("{other:?}"),
    }
    assert_eq!(hits.load(Ordering::SeqCst), 4);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, hits) = serve(|_, _| Reply {
        status: 400,
        body: "{}".into(),
        delay: Duration::ZERO,
    });
    let err = backend(&url, 3, 5_000)
        .fetch_prediction(&one_expert().experts()[0], &Context::new("q"))
        .unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn timeout_is_retryable() {
    let (url, _) = serve(|_, _| Reply {
        delay: Duration::from_millis(1_500),
        ..ok(completion("1", -0.1))
    });
    let err = backend(&url, 0, 100)
        .fetch_prediction(&one_expert().experts()[0], &Context::new("q"))
        .unwrap_err();
    assert!(err.is_retryable(), "{err:?}");
}

#[test]
fn refused_connection_is_retryable() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let err = backend(&format!("http://127.0.0.1:{port}"), 0, 1_000)
        .fetch_prediction(&one_expert().experts()[0], &Context::new("q"))
        .unwrap_err();
    assert!(err.is_retryable(), "{err:?}");
}

/// Answers depend only on the prompt, responses arrive in random order, and
/// the merged step must not depend on that order.
#[test]
fn merge_order_is_independent_of_arrival_order() {
    let (url, _) = serve(|body, n| {
        let prompt = body["prompt"].as_str().unwrap_or("");
        let token = prompt.bytes().map(u64::from).sum::<u64>() % 64;
        let logprob = -((prompt.len() % 7) as f64 + 1.0) / 10.0;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(n as u64);
        Reply {
            delay: Duration::from_micros(rng.random_range(0..3_000)),
            ..ok(completion(&token.to_string(), logprob))
        }
    });
    let b = backend(&url, 0, 5_000);
    let pool = ExpertPool::default_with(6).unwrap();
    let ctx = Context::new("Predict the 2025 world economic outlook");
    let reference = serde_json::to_string(&predict_all(&pool, &ctx, &b).unwrap()).unwrap();
    for _ in 0..100 {
        let again = serde_json::to_string(&predict_all(&pool, &ctx, &b).unwrap()).unwrap();
        assert_eq!(again, reference);
    }
}
