use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use synthex::chat::{ChatClient, EndpointConfig, HttpTransport};
use synthex::experience::{RemoteModel, RemoteModelConfig};
use synthex::replay::ReplayBuffer;
use synthex::rollout::{run_episode, EpisodeConfig, Outcome, UniformPolicy};
use synthex::Error;

/// A received request: lowercase header lines and the body.
type Seen = Arc<Mutex<Vec<(Vec<String>, String)>>>;

/// Serves `replies` (status, body) one per connection, then stops.
fn serve(replies: Vec<(u16, String)>) -> (String, Seen) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen: Seen = Arc::default();
    let log = seen.clone();
    std::thread::spawn(move || {
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                headers.push(lower);
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push((headers, String::from_utf8(buf).unwrap()));
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn completion(content: &str) -> String {
    serde_json::json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]}).to_string()
}

#[test]
fn remote_model_over_http_retries_then_parses() {
    let ok = completion(
        "```json\n{\"reasoning\": \"the purchase completes\", \"next_state\": \"[done] bought\", \"reward\": 1, \"done\": true}\n```",
    );
    let (url, seen) = serve(vec![(500, "{\"error\": \"overloaded\"}".into()), (200, ok)]);
    let endpoint = EndpointConfig {
        endpoint: Some(url.clone()),
        model: Some("sim-1".into()),
        max_retries: 2,
        ..Default::default()
    };
    let transport = HttpTransport::new(url, Some("secret".into()), Duration::from_secs(5));
    let client = ChatClient::new(Box::new(transport), &endpoint);
    let cfg = RemoteModelConfig {
        endpoint,
        initial_state: "[home] search box".into(),
        actions: vec!["buy".into()],
        ..Default::default()
    };
    let model = RemoteModel::new(client, cfg);
    let mut buffer = ReplayBuffer::new(16);
    let ep = EpisodeConfig { max_turns: 3, k: 2, append_failed: true };
    let traj = run_episode(&UniformPolicy, &model, &mut buffer, "buy a mug", &ep, 1).unwrap();
    assert_eq!(traj.outcome, Outcome::Success);
    assert_eq!(traj.steps[0].reasoning, "the purchase completes");
    assert_eq!(buffer.len(), 1);

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    let (headers, body) = &seen[1];
    assert!(headers.iter().any(|h| h == "authorization: bearer secret"));
    let req: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(req["model"], "sim-1");
    assert_eq!(req["messages"][0]["role"], "system");
    assert!(req["messages"][1]["content"].as_str().unwrap().contains("Task: buy a mug"));
}

#[test]
fn exhausted_retries_surface_status_and_payload() {
    let (url, _) = serve(vec![(503, "busy".into()), (503, "still busy".into())]);
    let endpoint = EndpointConfig { endpoint: Some(url.clone()), max_retries: 1, ..Default::default() };
    let client = ChatClient::new(Box::new(HttpTransport::new(url, None, Duration::from_secs(5))), &endpoint);
    let err = client.complete_with(vec![], |c| Ok::<_, String>(c.to_string())).unwrap_err();
    match err {
        Error::Backend { message, raw, .. } => {
            assert!(message.contains("503"), "{message}");
            assert_eq!(raw.as_deref(), Some("still busy"));
        }
        other => panic!("unexpected {other:?}"),
    }
}
