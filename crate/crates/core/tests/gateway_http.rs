//! The OpenAI-compatible client against a raw TCP mock server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use tidyhome_core::gateway::{BackendConfig, ChatBackend, ChatMessage, Embedder, GatewayError, OpenAiBackend};

struct Captured {
    request_line: String,
    body: String,
}

enum Reply {
    Http(u16, &'static str),
    Hang,
    Hangup,
}

fn read_request(stream: &mut TcpStream) -> Captured {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    reader.read_line(&mut request_line).unwrap();
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        if line == "\r\n" || line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    Captured {
        request_line: request_line.trim().to_string(),
        body: String::from_utf8(body).unwrap(),
    }
}

/// Serves one scripted reply per connection, in order.
fn serve(replies: Vec<Reply>) -> (String, mpsc::Receiver<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut held = Vec::new();
        for reply in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let captured = read_request(&mut stream);
            let _ = tx.send(captured);
            match reply {
                Reply::Http(status, body) => {
                    let _ = write!(
                        stream,
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                        body.len()
                    );
                }
                Reply::Hang => held.push(stream),
                Reply::Hangup => drop(stream),
            }
        }
        thread::sleep(Duration::from_secs(3));
    });
    (url, rx)
}

fn backend(url: &str, timeout_secs: f64) -> OpenAiBackend {
    let mut config = BackendConfig::new(url, "mock-model");
    config.timeout_secs = timeout_secs;
    OpenAiBackend::new(config).unwrap()
}

fn msgs() -> [ChatMessage; 2] {
    [ChatMessage::system("be brief"), ChatMessage::user("hi")]
}

const OK_CHAT: &str = r#"{"choices":[{"message":{"role":"assistant","content":"hello"}}]}"#;

#[test]
fn successful_chat_posts_to_v1_with_zero_temperature() {
    let (url, rx) = serve(vec![Reply::Http(200, OK_CHAT)]);
    let reply = backend(&url, 5.0).chat(&msgs(), &[]).unwrap();
    assert_eq!(reply.content, "hello");
    let req = rx.recv().unwrap();
    assert_eq!(req.request_line, "POST /v1/chat/completions HTTP/1.1");
    let body: serde_json::Value = serde_json::from_str(&req.body).unwrap();
    assert_eq!(body["model"], "mock-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][1]["content"], "hi");
}

#[test]
fn non_success_status_is_a_refusal() {
    let (url, _rx) = serve(vec![Reply::Http(503, r#"{"error":"overloaded"}"#)]);
    let err = backend(&url, 5.0).chat(&msgs(), &[]).unwrap_err();
    match err {
        GatewayError::BackendRefusal { status, body } => {
            assert_eq!(status, 503);
            assert!(body.contains("overloaded"));
        }
        other => panic!("expected refusal, got {other:?}"),
    }
}

#[test]
fn garbage_body_is_a_protocol_error() {
    let (url, _rx) = serve(vec![Reply::Http(200, "<html>not json</html>")]);
    let err = backend(&url, 5.0).chat(&msgs(), &[]).unwrap_err();
    assert!(matches!(err, GatewayError::Protocol(_)), "{err:?}");

    let (url, _rx) = serve(vec![Reply::Http(200, r#"{"choices":[]}"#)]);
    let err = backend(&url, 5.0).chat(&msgs(), &[]).unwrap_err();
    assert!(matches!(err, GatewayError::Protocol(_)), "{err:?}");
}

#[test]
fn silent_server_times_out_as_transport_error() {
    let (url, rx) = serve(vec![Reply::Hang, Reply::Hang]);
    let err = backend(&url, 0.3).chat(&msgs(), &[]).unwrap_err();
    assert!(err.is_transport(), "{err:?}");
    // One retry after the first transport failure.
    assert_eq!(rx.iter().take(2).count(), 2);
}

#[test]
fn dropped_connection_is_retried_once() {
    let (url, rx) = serve(vec![Reply::Hangup, Reply::Http(200, OK_CHAT)]);
    let reply = backend(&url, 5.0).chat(&msgs(), &[]).unwrap();
    assert_eq!(reply.content, "hello");
    assert_eq!(rx.iter().take(2).count(), 2);
}

#[test]
fn refused_connection_is_transport_error() {
    let url = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}", l.local_addr().unwrap())
    };
    let err = backend(&url, 2.0).chat(&msgs(), &[]).unwrap_err();
    assert!(err.is_transport(), "{err:?}");
}

#[test]
fn embeddings_are_parsed_in_order() {
    let body = r#"{"data":[{"index":1,"embedding":[0.0,1.0]},{"index":0,"embedding":[1.0,0.0]}]}"#;
    let (url, rx) = serve(vec![Reply::Http(200, body)]);
    let out = backend(&url, 5.0).embed(&["a".into(), "b".into()]).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].values, vec![1.0, 0.0]);
    assert_eq!(out[1].values, vec![0.0, 1.0]);
    assert_eq!(rx.recv().unwrap().request_line, "POST /v1/embeddings HTTP/1.1");
}
