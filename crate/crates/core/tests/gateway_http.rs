use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use gmner::gateway::{
    ChatRequest, ContentPart, Gateway, GatewayConfig, GatewayMode, HttpTransport, Message, Role, TranscriptCache,
};
use gmner::Error;

/// Serves one scripted `(status, body)` per connection and keeps the request bodies.
fn stub(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>, JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = std::thread::spawn(move || {
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        length = v.trim().parse().unwrap();
                    }
                }
            }
            let mut buf = vec![0u8; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(String::from_utf8(buf).unwrap());
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen, handle)
}

fn completion(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn gateway(url: &str, mode: GatewayMode, cache: TranscriptCache) -> Gateway {
    let config = GatewayConfig {
        mode,
        endpoint: Some(url.to_string()),
        backoff_ms: 1,
        max_retries: 3,
        timeout_secs: 10,
        ..GatewayConfig::default()
    };
    let transport = HttpTransport::new(&config, ".").unwrap();
    Gateway::new(config, cache, Some(Box::new(transport))).unwrap()
}

fn request(text: &str) -> ChatRequest {
    GatewayConfig::default().text_request(vec![Message {
        role: Role::User,
        content: vec![ContentPart::text(text)],
    }])
}

#[test]
fn rate_limits_are_retried_until_success() {
    let (url, seen, server) = stub(vec![
        (429, "{\"error\":\"slow down\"}".into()),
        (429, "{\"error\":\"slow down\"}".into()),
        (200, completion("{\"ok\": true}")),
    ]);
    let gw = gateway(&url, GatewayMode::Live, TranscriptCache::in_memory());
    assert_eq!(gw.complete(&request("hello")).unwrap(), "{\"ok\": true}");
    server.join().unwrap();
    let m = gw.metrics();
    assert_eq!((m.retries, m.live_calls), (2, 3));
    let bodies = seen.lock().unwrap();
    assert_eq!(bodies.len(), 3);
    let wire: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(wire["messages"][0]["content"][0]["text"], "hello");
    assert_eq!(wire["stream"], false);
}

#[test]
fn server_errors_exhaust_the_retry_budget() {
    let (url, _, server) = stub((0..4).map(|_| (503, "unavailable".to_string())).collect());
    let gw = gateway(&url, GatewayMode::Live, TranscriptCache::in_memory());
    match gw.complete(&request("hello")) {
        Err(Error::Http { attempts, message }) => {
            assert_eq!(attempts, 4);
            assert!(message.contains("503"), "{message}");
        }
        r => panic!("expected an HTTP failure, got {r:?}"),
    }
    server.join().unwrap();
    assert_eq!(gw.metrics().retries, 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, _, server) = stub(vec![(400, "bad request".into())]);
    let gw = gateway(&url, GatewayMode::Live, TranscriptCache::in_memory());
    assert!(matches!(
        gw.complete(&request("hello")),
        Err(Error::Http { attempts: 1, .. })
    ));
    server.join().unwrap();
}

#[test]
fn recorded_calls_replay_without_the_network() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let (url, _, server) = stub(vec![(200, completion("first"))]);
    let rec = gateway(&url, GatewayMode::Record, TranscriptCache::open(&path).unwrap());
    assert_eq!(rec.complete(&request("q")).unwrap(), "first");
    assert_eq!(rec.complete(&request("q")).unwrap(), "first");
    assert_eq!(rec.metrics().live_calls, 1);
    server.join().unwrap();

    let replay = Gateway::replay(TranscriptCache::open(&path).unwrap());
    assert_eq!(replay.complete(&request("q")).unwrap(), "first");
    assert_eq!(replay.metrics().live_calls, 0);
    assert!(matches!(replay.complete(&request("other")), Err(Error::CacheMiss(_))));
}
