//! HttpBackend against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use drllm_core::backend::{
    BackendConfig, BackendError, BackendKind, ChatBackend, ChatMessage, HttpBackend, HttpSettings, Role,
};

#[derive(Debug, Clone)]
struct Seen {
    headers: Vec<String>,
    body: serde_json::Value,
}

/// Serves one scripted `(status, body)` per connection, then stops.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                headers,
                body: serde_json::from_slice(&buf).unwrap(),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn ok_body(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn backend(url: &str, env: &str, max_retries: u32, temperature: Option<f64>) -> HttpBackend {
    std::env::set_var(env, "sk-test");
    let mut settings = HttpSettings::new(url, env);
    settings.max_retries = max_retries;
    settings.retry_base_delay = Duration::from_millis(5);
    settings.requests_per_second = 1000.0;
    settings.timeout = Duration::from_secs(10);
    HttpBackend::new(BackendConfig {
        id: "stub".into(),
        model_name: "stub-model".into(),
        temperature,
        max_output_tokens: None,
        kind: BackendKind::Http(settings),
    })
    .unwrap()
}

fn messages() -> Vec<ChatMessage> {
    vec![
        ChatMessage::new(Role::System, "You are an expert."),
        ChatMessage::new(Role::User, "Data: A: 1"),
    ]
}

#[test]
fn success_sends_openai_shaped_request() {
    let (url, seen) = serve(vec![(200, ok_body("Attack: 0.7, Benign: 0.3"))]);
    let b = backend(&url, "DRLLM_TEST_KEY_OK", 0, None);
    let r = b.complete(&messages()).unwrap();
    assert_eq!(r.text, "Attack: 0.7, Benign: 0.3");
    assert_eq!(r.request_fingerprint, b.fingerprint(&messages()));

    let seen = seen.lock().unwrap();
    let body = &seen[0].body;
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["stream"], false);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "Data: A: 1");
    assert!(body.get("temperature").is_none());
    assert!(body.get("max_tokens").is_none());
    assert!(seen[0]
        .headers
        .iter()
        .any(|h| h.eq_ignore_ascii_case("authorization: Bearer sk-test")));
}

#[test]
fn temperature_is_sent_when_set() {
    let (url, seen) = serve(vec![(200, ok_body("x"))]);
    backend(&url, "DRLLM_TEST_KEY_TEMP", 0, Some(0.0))
        .complete(&messages())
        .unwrap();
    assert_eq!(seen.lock().unwrap()[0].body["temperature"], 0.0);
}

#[test]
fn server_errors_are_retried_until_exhausted() {
    let script = vec![(500, "{}".to_string()); 3];
    let (url, seen) = serve(script);
    let err = backend(&url, "DRLLM_TEST_KEY_500", 2, None)
        .complete(&messages())
        .unwrap_err();
    match err {
        BackendError::RetriesExhausted { attempts, status, .. } => {
            assert_eq!(attempts, 3);
            assert_eq!(status, Some(500));
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn rate_limit_then_success() {
    let (url, seen) = serve(vec![(429, "{}".into()), (503, "{}".into()), (200, ok_body("fine"))]);
    let r = backend(&url, "DRLLM_TEST_KEY_429", 3, None)
        .complete(&messages())
        .unwrap();
    assert_eq!(r.text, "fine");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(401, "{\"error\":\"bad key\"}".into()), (200, ok_body("unused"))]);
    let err = backend(&url, "DRLLM_TEST_KEY_401", 3, None)
        .complete(&messages())
        .unwrap_err();
    match err {
        BackendError::Rejected { status, body } => {
            assert_eq!(status, 401);
            assert!(body.contains("bad key"));
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_envelopes() {
    let (url, _) = serve(vec![(200, "not json".into()), (200, "{\"choices\": []}".into())]);
    let b = backend(&url, "DRLLM_TEST_KEY_BAD", 0, None);
    assert!(matches!(
        b.complete(&messages()),
        Err(BackendError::MalformedResponse { status: 200, .. })
    ));
    assert!(matches!(
        b.complete(&messages()),
        Err(BackendError::MalformedResponse { .. })
    ));
}

#[test]
fn missing_key_fails_at_construction() {
    std::env::remove_var("DRLLM_TEST_KEY_ABSENT");
    let err = HttpBackend::new(BackendConfig {
        id: "x".into(),
        model_name: "m".into(),
        temperature: None,
        max_output_tokens: None,
        kind: BackendKind::Http(HttpSettings::new("http://127.0.0.1:9/", "DRLLM_TEST_KEY_ABSENT")),
    })
    .unwrap_err();
    assert!(err.to_string().contains("DRLLM_TEST_KEY_ABSENT"));
}

#[test]
fn empty_messages_are_rejected_locally() {
    let b = backend("http://127.0.0.1:9/", "DRLLM_TEST_KEY_EMPTY", 0, None);
    assert!(matches!(b.complete(&[]), Err(BackendError::InvalidRequest(_))));
}
