#![cfg(feature = "chat-policy")]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;

use kernrl::chat::{parse_completion, ChatPolicy};
use kernrl::context::Prompt;
use kernrl::rollout::{Policy, PolicyError, PolicyRequest};
use serde_json::{json, Value};

struct Captured {
    head: String,
    body: Value,
}

/// Serves one request with `status` and `reply`, reporting what it received.
fn serve_once(status: &str, reply: String) -> (String, mpsc::Receiver<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!(
        "http://{}/v1/chat/completions",
        listener.local_addr().unwrap()
    );
    let (tx, rx) = mpsc::channel();
    let status = status.to_owned();
    std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut head = String::new();
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
            head.push_str(&line);
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body).unwrap();
        let mut stream = stream;
        write!(
            stream,
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
            reply.len()
        )
        .unwrap();
        tx.send(Captured {
            head,
            body: serde_json::from_slice(&body).unwrap(),
        })
        .unwrap();
    });
    (url, rx)
}

fn request(prompt: &Prompt) -> PolicyRequest<'_> {
    PolicyRequest {
        task_id: "t",
        prompt,
        visible_turns: &[],
        seed: 99,
        temperature: 0.9,
        max_response_tokens: 64,
    }
}

#[test]
fn posts_the_prompt_and_reads_the_completion() {
    let reply = json!({
        "choices": [{"message": {"role": "assistant", "content": "Okay, here.\n```\nopt: a\n```\nDone."}, "finish_reason": "stop"}],
        "usage": {"completion_tokens": 12}
    });
    let (url, rx) = serve_once("200 OK", reply.to_string());
    let policy = ChatPolicy::new(url, Some("sekret".into()), "tiny-model");
    assert_eq!(policy.id(), "chat:tiny-model");
    let prompt = Prompt {
        text: "You are given the following architecture:\nx".into(),
        included_turns: vec![],
    };
    let raw = policy.generate(&request(&prompt)).unwrap();
    assert_eq!(raw.text, "Okay, here.\n```\nopt: a\n```\nDone.");
    assert_eq!(raw.response_tokens, 12);
    assert!(!raw.truncated);
    let got = rx.recv().unwrap();
    assert!(
        got.head.starts_with("POST /v1/chat/completions "),
        "{}",
        got.head
    );
    assert!(got
        .head
        .to_ascii_lowercase()
        .contains("authorization: bearer sekret"));
    assert_eq!(got.body["model"], "tiny-model");
    assert_eq!(got.body["messages"][0]["content"], prompt.text);
    assert_eq!(got.body["max_tokens"], 64);
    assert_eq!(got.body["seed"], 99);
}

#[test]
fn server_errors_are_transport_errors() {
    let (url, _rx) = serve_once("500 Internal Server Error", "{}".into());
    let policy = ChatPolicy::new(url, None, "m");
    let prompt = Prompt {
        text: "p".into(),
        included_turns: vec![],
    };
    assert!(matches!(
        policy.generate(&request(&prompt)),
        Err(PolicyError::Transport(_))
    ));
}

#[test]
fn completion_parsing_flags_length_stops() {
    let body = json!({"choices": [{"message": {"content": "abc"}, "finish_reason": "length"}], "usage": {"completion_tokens": 10}});
    let r = parse_completion(&body, 10).unwrap();
    assert!(r.truncated);
    assert_eq!(r.response_tokens, 10);
    let body = json!({"choices": [{"message": {"content": "abc"}, "finish_reason": "stop"}]});
    assert!(!parse_completion(&body, 10).unwrap().truncated);
    assert!(matches!(
        parse_completion(&json!({"choices": []}), 10),
        Err(PolicyError::BadResponse(_))
    ));
}
