//! HTTP transport against a local stub server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use vthinker_core::gateway::{
    ChatClient, Decoding, EndpointConfig, GatewayError, HttpChatClient, Message, RetryPolicy, TokenBucket,
};

struct Captured {
    path: String,
    auth: String,
    body: serde_json::Value,
}

/// Serves one scripted `(status, body)` per connection, then exits.
fn stub(script: Vec<(u16, String)>) -> (String, JoinHandle<()>, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = std::thread::spawn(move || {
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let (mut len, mut auth) = (0usize, String::new());
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (k, v) = line.split_once(':').unwrap_or((line, ""));
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "authorization" => auth = v.trim().to_string(),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Captured {
                path: request_line.split_whitespace().nth(1).unwrap_or_default().to_string(),
                auth,
                body: serde_json::from_slice(&buf).unwrap_or(serde_json::Value::Null),
            });
            let reason = match status {
                200 => "OK",
                401 => "Unauthorized",
                429 => "Too Many Requests",
                _ => "Status",
            };
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            stream.flush().unwrap();
        }
    });
    (format!("http://{addr}"), handle, seen)
}

fn completion(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn client(base: String, retry: RetryPolicy) -> HttpChatClient {
    let endpoint = EndpointConfig {
        base,
        api_key: "sk-test".into(),
        model: "stub-model".into(),
        timeout: Duration::from_secs(10),
    };
    HttpChatClient::new(endpoint, retry, Arc::new(TokenBucket::new(8, 100.0)))
}

fn decoding() -> Decoding {
    Decoding {
        temperature: 0.3,
        max_tokens: 64,
    }
}

#[test]
fn rate_limits_back_off_then_succeed() {
    let (base, server, seen) = stub(vec![
        (429, "{}".into()),
        (429, "{}".into()),
        (200, completion("hello there")),
    ]);
    let c = client(base, RetryPolicy::default());
    let start = Instant::now();
    let out = c.complete(&[Message::text("user", "hi")], &decoding()).unwrap();
    let took = start.elapsed();
    server.join().unwrap();
    assert_eq!(out, "hello there");
    assert_eq!(c.attempts(), 3);
    // 1 s then 2 s of backoff.
    assert!(took >= Duration::from_secs(3), "{took:?}");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].auth, "Bearer sk-test");
    assert_eq!(seen[2].body["model"], "stub-model");
    assert_eq!(seen[2].body["max_tokens"], 64);
    assert_eq!(seen[2].body["messages"][0]["role"], "user");
}

#[test]
fn auth_failure_is_not_retried() {
    let (base, server, _) = stub(vec![(401, "{\"error\": \"bad key\"}".into())]);
    let c = client(base, RetryPolicy::default());
    let err = c.complete(&[Message::text("user", "hi")], &decoding()).unwrap_err();
    server.join().unwrap();
    assert!(matches!(err, GatewayError::Auth(_)), "{err:?}");
    assert_eq!(c.attempts(), 1);
}

#[test]
fn retries_are_capped() {
    let retry = RetryPolicy {
        base: Duration::from_millis(10),
        factor: 2.0,
        max_attempts: 3,
    };
    let (base, server, _) = stub(vec![(503, "{}".into()), (503, "{}".into()), (503, "{}".into())]);
    let c = client(base, retry);
    let err = c.complete(&[Message::text("user", "hi")], &decoding()).unwrap_err();
    server.join().unwrap();
    match err {
        GatewayError::RetriesExhausted { attempts, last } => {
            assert_eq!(attempts, 3);
            assert!(matches!(*last, GatewayError::Transport(_)));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn body_without_content_is_malformed_and_retried() {
    let retry = RetryPolicy {
        base: Duration::from_millis(10),
        factor: 1.0,
        max_attempts: 2,
    };
    let (base, server, _) = stub(vec![(200, "{\"choices\": []}".into()), (200, completion("ok"))]);
    let c = client(base, retry);
    let out = c.complete(&[Message::text("user", "hi")], &decoding()).unwrap();
    server.join().unwrap();
    assert_eq!(out, "ok");
    assert_eq!(c.attempts(), 2);
}

#[test]
fn refused_connection_is_a_transport_error() {
    let addr = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let retry = RetryPolicy {
        base: Duration::from_millis(5),
        factor: 1.0,
        max_attempts: 2,
    };
    let c = client(format!("http://{addr}"), retry);
    let err = c.complete(&[Message::text("user", "hi")], &decoding()).unwrap_err();
    assert!(matches!(err, GatewayError::RetriesExhausted { attempts: 2, .. }), "{err:?}");
}
