//! HTTP chat/embedding wire contract against a local mock server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use cuebias::backends::{
    BackendError, ChatBackend, ChatReply, ChatRequest, ContentPart, Embedder, FinishReason, HttpChatBackend,
    HttpEmbedder, RetryPolicy, TrialContext,
};
use serde::Deserialize;
use serde_json::Value;

#[derive(Debug, Clone)]
struct Captured {
    path: String,
    auth: Option<String>,
    body: Value,
}

struct Canned {
    status: u16,
    headers: Vec<(&'static str, String)>,
    body: String,
}

impl Canned {
    fn ok(body: &Value) -> Self {
        Self {
            status: 200,
            headers: vec![],
            body: body.to_string(),
        }
    }

    fn status(status: u16, body: &str) -> Self {
        Self {
            status,
            headers: vec![],
            body: body.to_string(),
        }
    }
}

/// Serves one canned response per connection, in order, and records each request.
struct MockServer {
    base: String,
    seen: Arc<Mutex<Vec<Captured>>>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    fn start(responses: Vec<Canned>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = format!("http://{}/v1", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        let handle = std::thread::spawn(move || {
            for canned in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let path = request_line.split_whitespace().nth(1).unwrap_or_default().to_string();
                let (mut len, mut auth) = (0usize, None);
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    let (k, v) = line.split_once(':').unwrap();
                    match k.to_ascii_lowercase().as_str() {
                        "content-length" => len = v.trim().parse().unwrap(),
                        "authorization" => auth = Some(v.trim().to_string()),
                        _ => {}
                    }
                }
                let mut body = vec![0u8; len];
                reader.read_exact(&mut body).unwrap();
                log.lock().unwrap().push(Captured {
                    path,
                    auth,
                    body: serde_json::from_slice(&body).unwrap_or(Value::Null),
                });
                let mut out = stream;
                let mut head = format!(
                    "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n",
                    canned.status,
                    canned.body.len()
                );
                for (k, v) in &canned.headers {
                    head.push_str(&format!("{k}: {v}\r\n"));
                }
                head.push_str("\r\n");
                out.write_all(head.as_bytes()).unwrap();
                out.write_all(canned.body.as_bytes()).unwrap();
                out.flush().unwrap();
            }
        });
        Self {
            base,
            seen,
            handle: Some(handle),
        }
    }

    fn finish(mut self) -> Vec<Captured> {
        self.handle.take().unwrap().join().unwrap();
        self.seen.lock().unwrap().clone()
    }
}

fn fast_retry(attempts: u32) -> RetryPolicy {
    RetryPolicy {
        max_attempts: attempts,
        initial_delay_ms: 1,
        max_delay_ms: 5,
        multiplier: 2.0,
        jitter: false,
    }
}

#[derive(Deserialize)]
struct WireCase {
    name: String,
    model: String,
    request: ChatRequest,
    expected_body: Value,
    response_body: Value,
    expected_reply: Value,
}

fn wire_cases() -> Vec<WireCase> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/wire_cases.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn golden_wire_cases_round_trip() {
    for case in wire_cases() {
        let server = MockServer::start(vec![Canned::ok(&case.response_body)]);
        let backend = HttpChatBackend::new("http", &server.base, &case.model, Some("sk-test".into()))
            .unwrap()
            .with_logprobs(true)
            .with_retry(RetryPolicy::none());
        let reply = backend.chat(&case.request, &TrialContext::bare("item1-cat1")).unwrap();
        let seen = server.finish();
        assert_eq!(seen.len(), 1, "{}", case.name);
        assert_eq!(seen[0].path, "/v1/chat/completions", "{}", case.name);
        assert_eq!(seen[0].auth.as_deref(), Some("Bearer sk-test"), "{}", case.name);
        assert_eq!(seen[0].body, case.expected_body, "{}: request body", case.name);
        let expected: ChatReply = serde_json::from_value({
            let mut v = case.expected_reply.clone();
            v["latency_ms"] = Value::from(0);
            v
        })
        .unwrap();
        assert_eq!(
            ChatReply {
                latency_ms: 0,
                ..reply
            },
            expected,
            "{}: reply",
            case.name
        );
    }
}

#[test]
fn no_api_key_sends_no_authorization() {
    let case = &wire_cases()[1];
    let server = MockServer::start(vec![Canned::ok(&case.response_body)]);
    let backend = HttpChatBackend::new("http", &server.base, "m", None).unwrap();
    backend.chat(&case.request, &TrialContext::bare("x")).unwrap();
    assert_eq!(server.finish()[0].auth, None);
}

#[test]
fn rate_limit_then_success_is_retried() {
    let ok = serde_json::json!({"choices": [{"message": {"content": "H"}, "finish_reason": "stop"}]});
    let mut limited = Canned::status(429, "slow down");
    limited.headers.push(("Retry-After", "0".into()));
    let server = MockServer::start(vec![limited, Canned::status(502, "bad gateway"), Canned::ok(&ok)]);
    let backend = HttpChatBackend::new("http", &server.base, "m", None)
        .unwrap()
        .with_retry(fast_retry(3));
    let req = ChatRequest::single_turn(vec![ContentPart::Text { text: "q".into() }]);
    let reply = backend.chat(&req, &TrialContext::bare("x")).unwrap();
    assert_eq!(reply.text, "H");
    assert_eq!(reply.finish_reason, FinishReason::Stop);
    let seen = server.finish();
    assert_eq!(seen.len(), 3);
    assert!(seen.windows(2).all(|w| w[0].body == w[1].body));
}

#[test]
fn client_errors_are_not_retried() {
    let server = MockServer::start(vec![Canned::status(400, "bad request")]);
    let backend = HttpChatBackend::new("http", &server.base, "m", None)
        .unwrap()
        .with_retry(fast_retry(4));
    let req = ChatRequest::single_turn(vec![ContentPart::Text { text: "q".into() }]);
    let err = backend.chat(&req, &TrialContext::bare("x")).unwrap_err();
    assert_eq!(
        err,
        BackendError::Http {
            status: 400,
            body: "bad request".into()
        }
    );
    assert_eq!(server.finish().len(), 1);
}

#[test]
fn persistent_server_errors_exhaust_attempts() {
    let server = MockServer::start((0..3).map(|_| Canned::status(500, "boom")).collect());
    let backend = HttpChatBackend::new("http", &server.base, "m", None)
        .unwrap()
        .with_retry(fast_retry(3));
    let req = ChatRequest::single_turn(vec![ContentPart::Text { text: "q".into() }]);
    assert!(matches!(
        backend.chat(&req, &TrialContext::bare("x")),
        Err(BackendError::Http { status: 500, .. })
    ));
    assert_eq!(server.finish().len(), 3);
}

#[test]
fn logprobs_on_unsupported_backend_fail_before_sending() {
    let backend = HttpChatBackend::new("http", "http://127.0.0.1:9", "m", None).unwrap();
    let mut req = ChatRequest::single_turn(vec![ContentPart::Text { text: "q".into() }]);
    req.logprob_k = Some(5);
    assert!(matches!(
        backend.chat(&req, &TrialContext::bare("x")),
        Err(BackendError::Unsupported(_))
    ));
}

#[test]
fn unencoded_images_are_rejected() {
    let backend = HttpChatBackend::new("http", "http://127.0.0.1:9", "m", None).unwrap();
    let req = ChatRequest::single_turn(vec![ContentPart::ImageRef {
        item_id: "cat1-dog1".into(),
        perturbation: "none".into(),
    }]);
    assert!(matches!(
        backend.chat(&req, &TrialContext::bare("cat1-dog1")),
        Err(BackendError::InvalidRequest(_))
    ));
}

#[test]
fn embeddings_are_reordered_and_normalized() {
    let body = serde_json::json!({"data": [
        {"index": 1, "embedding": [0.0, 2.0]},
        {"index": 0, "embedding": [3.0, 4.0]}
    ]});
    let server = MockServer::start(vec![Canned::ok(&body)]);
    let e = HttpEmbedder::new("emb", &server.base, "text-embed", None).unwrap();
    let vs = e.embed(&["first".into(), "second".into()]).unwrap();
    assert_eq!(vs, vec![vec![0.6, 0.8], vec![0.0, 1.0]]);
    let seen = server.finish();
    assert_eq!(seen[0].path, "/v1/embeddings");
    assert_eq!(seen[0].body, serde_json::json!({"model": "text-embed", "input": ["first", "second"]}));
}

#[test]
fn embedding_count_mismatch_is_a_protocol_error() {
    let body = serde_json::json!({"data": [{"index": 0, "embedding": [1.0]}]});
    let server = MockServer::start(vec![Canned::ok(&body)]);
    let e = HttpEmbedder::new("emb", &server.base, "m", None)
        .unwrap()
        .with_retry(RetryPolicy::none());
    assert!(matches!(
        e.embed(&["a".into(), "b".into()]),
        Err(BackendError::Protocol(_))
    ));
    server.finish();
}

#[test]
fn simulator_honours_the_wire_contract() {
    use cuebias::dataset::CueConflictItem;
    use cuebias::simulator::{SimulatorBackend, SimulatorConfig};
    use cuebias::steering::PerturbationSpec;

    let sim = SimulatorBackend::new(SimulatorConfig::default()).unwrap();
    let item = CueConflictItem::from_stem("cat1-dog1").unwrap();
    let ctx = TrialContext::for_item(&item, PerturbationSpec::None, 0);
    for case in wire_cases() {
        let mut req = case.request.clone();
        if req.messages[0].content.iter().any(|p| matches!(p, ContentPart::ImagePng { .. })) {
            let prompt = cuebias::prompts::PromptVariant::VqaDefault.spec().render().unwrap();
            req.messages[0].content = vec![
                ContentPart::ImageRef {
                    item_id: item.item_id.clone(),
                    perturbation: "none".into(),
                },
                ContentPart::Text { text: prompt },
            ];
        }
        match sim.chat(&req, &ctx) {
            Ok(reply) => {
                assert!(!reply.text.is_empty(), "{}", case.name);
                match (req.logprob_k, &reply.first_token_top_logprobs) {
                    (Some(k), Some(lp)) => {
                        assert!(!lp.is_empty() && lp.len() <= k as usize, "{}", case.name);
                        assert!(lp.windows(2).all(|w| w[0].logprob >= w[1].logprob), "{}", case.name);
                    }
                    (None, None) => {}
                    (k, lp) => panic!("{}: logprob_k {k:?} but got {lp:?}", case.name),
                }
                if req.decode == cuebias::backends::DecodeMode::Greedy {
                    assert_eq!(sim.chat(&req, &ctx).unwrap(), reply, "{}: greedy replies repeat", case.name);
                }
            }
            Err(e) => assert!(matches!(e, BackendError::UnknownTemplate(_)), "{}: {e}", case.name),
        }
    }
}
