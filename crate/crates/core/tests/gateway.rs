mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::time::Duration;

use navidrive::gateway::mock::{
    EchoBackend, FlakyBackend, FnBackend, Instrumented, RecordingBackend, ReplayBackend, ScriptedOracle,
};
use navidrive::gateway::{
    BackendReply, ChatRequest, Driver, Gateway, GatewayError, HttpBackend, HttpConfig, Navigator, ReasonCache,
    RetryPolicy, Sampling, Usage,
};
use navidrive::kinematics::{self, KinematicState};
use navidrive::prompting::{
    serialize_waypoints, AblationFlags, ChatMessage, OutputMode, ParseError, PromptTemplates, Role,
};

fn fast_retry(max_attempts: u32) -> RetryPolicy {
    RetryPolicy {
        max_attempts,
        initial_backoff: Duration::from_millis(1),
        max_backoff: Duration::from_millis(4),
        multiplier: 2.0,
    }
}

fn request(k: usize) -> ChatRequest {
    ChatRequest {
        model_id: "test-model".into(),
        messages: vec![ChatMessage::text(Role::User, "hello")],
        temperature: 0.8,
        num_candidates: k,
        max_tokens: 32,
        seed: None,
    }
}

fn navigator(backend: impl navidrive::gateway::ChatBackend + 'static, root: &std::path::Path) -> Navigator {
    let gateway = Arc::new(Gateway::new(backend, fast_retry(3), 8));
    Navigator::new(gateway, Sampling::navigator_default(), ReasonCache::new(root))
}

const REASONING: &str = "Scene Description: a crossing\nRecommended Action: slow down\nReasoning: pedestrians";

#[test]
fn echo_returns_k_identical_texts() {
    let gw = Gateway::new(EchoBackend::new("canned"), RetryPolicy::default(), 4);
    let set = gw.complete(&request(3)).unwrap();
    assert_eq!(set.texts, vec!["canned"; 3]);
    assert_eq!(set.attempts, 1);
}

#[test]
fn invalid_requests_are_rejected_before_sending() {
    let backend = Arc::new(Instrumented::new(EchoBackend::new("x")));
    let gw = Gateway::new(backend.clone(), RetryPolicy::default(), 1);
    assert!(matches!(gw.complete(&request(0)), Err(GatewayError::InvalidRequest(_))));
    let mut r = request(1);
    r.temperature = -0.1;
    assert!(matches!(gw.complete(&r), Err(GatewayError::InvalidRequest(_))));
    assert_eq!(backend.calls(), 0);
}

#[test]
fn retries_transient_failures() {
    let gw = Gateway::new(FlakyBackend::new(EchoBackend::new("ok"), vec![500, 500]), fast_retry(5), 1);
    let set = gw.complete(&request(1)).unwrap();
    assert_eq!(set.attempts, 3);
    assert_eq!(set.texts, vec!["ok"]);
}

#[test]
fn gives_up_after_attempt_limit() {
    let gw = Gateway::new(FlakyBackend::new(EchoBackend::new("ok"), vec![503; 10]), fast_retry(4), 1);
    match gw.complete(&request(1)) {
        Err(GatewayError::ExhaustedRetries {
            attempts, last_status, ..
        }) => {
            assert_eq!(attempts, 4);
            assert_eq!(last_status, Some(503));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn wrong_candidate_count_is_invalid_response() {
    let gw = Gateway::new(
        FnBackend(|_: &ChatRequest| {
            Ok(BackendReply {
                texts: vec!["only one".into()],
                usage: Usage::default(),
            })
        }),
        fast_retry(1),
        1,
    );
    assert!(matches!(gw.complete(&request(2)), Err(GatewayError::InvalidResponse(_))));
}

#[test]
fn backoff_grows_and_saturates() {
    let p = RetryPolicy::default();
    assert_eq!(p.backoff(1), Duration::from_millis(500));
    assert_eq!(p.backoff(2), Duration::from_millis(1000));
    assert_eq!(p.backoff(3), Duration::from_millis(2000));
    assert_eq!(p.backoff(20), Duration::from_secs(10));
}

#[test]
fn in_flight_requests_are_bounded() {
    let backend = Arc::new(Instrumented::with_delay(EchoBackend::new("x"), Duration::from_millis(15)));
    let gw = Arc::new(Gateway::new(backend.clone(), RetryPolicy::default(), 3));
    std::thread::scope(|s| {
        for _ in 0..12 {
            let gw = gw.clone();
            s.spawn(move || gw.complete(&request(1)).unwrap());
        }
    });
    assert_eq!(backend.calls(), 12);
    assert!(backend.peak_in_flight() <= 3, "peak {}", backend.peak_in_flight());
    assert!(backend.peak_in_flight() >= 2, "requests never overlapped");
}

#[test]
fn replay_serves_recorded_answers_and_rejects_unknown() {
    let dir = tempfile::tempdir().unwrap();
    let transcript = dir.path().join("transcript.jsonl");
    let recorder = RecordingBackend::new(EchoBackend::new("recorded"), &transcript).unwrap();
    Gateway::new(recorder, fast_retry(1), 1).complete(&request(2)).unwrap();

    let replay = ReplayBackend::load(&transcript).unwrap();
    assert_eq!(replay.len(), 1);
    let gw = Gateway::new(replay, fast_retry(3), 1);
    assert_eq!(gw.complete(&request(2)).unwrap().texts, vec!["recorded"; 2]);
    assert!(matches!(gw.complete(&request(3)), Err(GatewayError::UnknownRequest(_))));
}

#[test]
fn cache_hit_makes_no_backend_call() {
    let dir = tempfile::tempdir().unwrap();
    let clip = common::clip_in(dir.path(), "scene-0001_000");
    let backend = Arc::new(Instrumented::new(EchoBackend::new(REASONING)));
    let nav = navigator(backend.clone(), &dir.path().join("cache"));

    let first = nav.get_or_generate_reasoning(&clip).unwrap();
    let second = nav.get_or_generate_reasoning(&clip).unwrap();
    assert_eq!(first, second);
    assert_eq!(first.recommended_action, "slow down");
    assert_eq!(backend.calls(), 1);
    assert_eq!(nav.cache.len(), 1);

    // A fresh process over the same directory also hits.
    let backend2 = Arc::new(Instrumented::new(EchoBackend::new("other")));
    let nav2 = navigator(backend2.clone(), &dir.path().join("cache"));
    assert_eq!(nav2.get_or_generate_reasoning(&clip).unwrap(), first);
    assert_eq!(backend2.calls(), 0);
}

#[test]
fn cache_key_is_content_addressed() {
    let dir = tempfile::tempdir().unwrap();
    let nav = navigator(EchoBackend::new(REASONING), dir.path());
    let a = common::clip_in(dir.path(), "scene-0001_000");
    let b = common::clip_in(dir.path(), "scene-0002_006");
    assert_ne!(a.images, b.images);
    let key = nav.cache_key(&a).unwrap();
    assert_eq!(key, nav.cache_key(&b).unwrap());
    assert_eq!(key.len(), 64);

    let other_pixels = common::clip_with_images(dir.path(), "scene-0003_000", b"different");
    assert_ne!(key, nav.cache_key(&other_pixels).unwrap());

    let mut moved = a.clone();
    moved.ego_state.speed += 0.1;
    assert_ne!(key, nav.cache_key(&moved).unwrap());

    let mut command = a.clone();
    command.command = navidrive::scene_log::Command::HardLeft;
    assert_ne!(key, nav.cache_key(&command).unwrap());

    let mut other_model = navigator(EchoBackend::new(REASONING), dir.path());
    other_model.sampling.model_id = "another".into();
    assert_ne!(key, other_model.cache_key(&a).unwrap());
}

#[test]
fn missing_image_fails_key_derivation() {
    let dir = tempfile::tempdir().unwrap();
    let mut clip = common::clip_in(dir.path(), "c");
    clip.images.insert(navidrive::scene_log::Camera::Back, dir.path().join("absent.jpg"));
    let nav = navigator(EchoBackend::new(REASONING), dir.path());
    assert!(matches!(nav.cache_key(&clip), Err(GatewayError::ImageUnreadable(_))));
}

#[test]
fn corrupt_entry_is_quarantined_and_regenerated() {
    let dir = tempfile::tempdir().unwrap();
    let clip = common::clip_in(dir.path(), "c");
    let backend = Arc::new(Instrumented::new(EchoBackend::new(REASONING)));
    let nav = navigator(backend.clone(), &dir.path().join("cache"));
    let key = nav.cache_key(&clip).unwrap();
    let path = nav.cache.entry_path(&key);
    assert!(path.starts_with(dir.path().join("cache").join(&key[..2]).join(&key[2..4])));

    nav.get_or_generate_reasoning(&clip).unwrap();
    std::fs::write(&path, b"{ truncated").unwrap();
    let again = nav.get_or_generate_reasoning(&clip).unwrap();
    assert_eq!(again.scene_description, "a crossing");
    assert_eq!(backend.calls(), 2);
    assert!(path.with_extension("json.corrupt").exists());
    assert_eq!(nav.cache.get(&key).unwrap().unwrap().reasoning, again);
}

#[test]
fn concurrent_requests_share_one_generation() {
    let dir = tempfile::tempdir().unwrap();
    let clip = common::clip_in(dir.path(), "c");
    let backend = Arc::new(Instrumented::with_delay(EchoBackend::new(REASONING), Duration::from_millis(20)));
    let nav = navigator(backend.clone(), &dir.path().join("cache"));
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..16).map(|_| s.spawn(|| nav.get_or_generate_reasoning(&clip).unwrap())).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(results.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(backend.calls(), 1);
    assert_eq!(nav.cache.len(), 1);
}

fn driver(backend: impl navidrive::gateway::ChatBackend + 'static) -> Driver {
    Driver::new(Arc::new(Gateway::new(backend, fast_retry(2), 4)), Sampling::driver_default())
}

#[test]
fn oracle_without_noise_returns_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let clip = common::clip_in(dir.path(), "scene-0001_000");
    let oracle = ScriptedOracle::new(std::slice::from_ref(&clip), OutputMode::Waypoint, 0.0, 7).unwrap();
    assert_eq!(oracle.answer(&clip.clip_id, 0).unwrap(), serialize_waypoints(&clip.future));

    let candidates = driver(oracle)
        .predict_candidates(&clip, AblationFlags::ALL, 6, OutputMode::Waypoint)
        .unwrap();
    assert_eq!(candidates.len(), 6);
    for c in &candidates {
        assert_eq!(c.trajectory.as_ref().unwrap(), &clip.future);
    }
}

#[test]
fn noisy_oracle_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let clip = common::clip_in(dir.path(), "scene-0001_000");
    let clips = std::slice::from_ref(&clip);
    let a = ScriptedOracle::new(clips, OutputMode::Waypoint, 0.1, 42).unwrap();
    let b = ScriptedOracle::new(clips, OutputMode::Waypoint, 0.1, 42).unwrap();
    let c = ScriptedOracle::new(clips, OutputMode::Waypoint, 0.1, 43).unwrap();
    let texts = |o: &ScriptedOracle| (0..6).map(|i| o.answer(&clip.clip_id, i).unwrap()).collect::<Vec<_>>();
    assert_eq!(texts(&a), texts(&b));
    assert_ne!(texts(&a), texts(&c));
    assert_ne!(texts(&a)[0], texts(&a)[1]);
    assert_ne!(texts(&a)[0], serialize_waypoints(&clip.future));
}

#[test]
fn oracle_rejects_unknown_clip_and_answers_navigator() {
    let dir = tempfile::tempdir().unwrap();
    let clip = common::clip_in(dir.path(), "known");
    let mut stranger = clip.clone();
    stranger.clip_id = "stranger".into();
    let oracle = Arc::new(ScriptedOracle::new(std::slice::from_ref(&clip), OutputMode::Waypoint, 0.0, 0).unwrap());
    let err = driver(oracle.clone())
        .predict_candidates(&stranger, AblationFlags::ALL, 2, OutputMode::Waypoint)
        .unwrap_err();
    assert!(matches!(err, GatewayError::UnknownRequest(_)));

    let nav = navigator(oracle, &dir.path().join("cache"));
    let reasoning = nav.get_or_generate_reasoning(&clip).unwrap();
    assert!(!reasoning.degraded);
}

#[test]
fn garbage_candidate_is_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let clip = common::clip_in(dir.path(), "c");
    let good = serialize_waypoints(&clip.future);
    let backend = FnBackend(move |r: &ChatRequest| {
        let mut texts = vec![good.clone(); r.num_candidates];
        texts[1] = "I cannot comply with that request.".into();
        Ok(BackendReply {
            texts,
            usage: Usage::default(),
        })
    });
    let candidates = driver(backend)
        .predict_candidates(&clip, AblationFlags::ALL, 6, OutputMode::Waypoint)
        .unwrap();
    assert_eq!(candidates.len(), 6);
    assert_eq!(candidates.iter().filter(|c| c.is_valid()).count(), 5);
    assert!(matches!(candidates[1].trajectory, Err(ParseError::MalformedNumber { .. })));
}

#[test]
fn action_mode_oracle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let clip = common::clip_in(dir.path(), "c");
    let oracle = ScriptedOracle::new(std::slice::from_ref(&clip), OutputMode::Action, 0.0, 0).unwrap();
    let candidates = driver(oracle)
        .predict_candidates(&clip, AblationFlags::ALL, 3, OutputMode::Action)
        .unwrap();
    for c in &candidates {
        let traj = c.trajectory.as_ref().unwrap();
        assert!(c.controls.is_some());
        let rmse = (traj.points.iter().zip(&clip.future.points).map(|(a, b)| a.distance(b).powi(2)).sum::<f64>()
            / traj.len() as f64)
            .sqrt();
        // Fit residual plus 2- and 3-decimal quantization of the controls.
        assert!(rmse < 0.05, "rmse {rmse}");
    }
}

#[test]
fn absurd_action_values_are_out_of_range() {
    let dir = tempfile::tempdir().unwrap();
    let clip = common::clip_in(dir.path(), "c");
    let text = format!("[{}]", ["(1e308, 0.0)"; 12].join(", "));
    let c = &driver(EchoBackend::new(text))
        .predict_candidates(&clip, AblationFlags::ALL, 1, OutputMode::Action)
        .unwrap()[0];
    assert!(matches!(c.trajectory, Err(ParseError::OutOfRange { .. })));
    assert!(c.controls.is_none());
    // Sanity: a finite rollout from the same initial state works.
    assert!(kinematics::rollout(&kinematics::ControlSequence::zeros(12, 0.5), &KinematicState::at_origin(5.0)).is_ok());
}

/// Serves canned HTTP responses in order, recording each request.
struct TestServer {
    url: String,
    handle: std::thread::JoinHandle<Vec<(String, String)>>,
}

fn serve(responses: Vec<(u16, String)>) -> TestServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                head.push_str(&line);
            }
            let mut payload = vec![0; length];
            reader.read_exact(&mut payload).unwrap();
            seen.push((head, String::from_utf8(payload).unwrap()));
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
        seen
    });
    TestServer { url, handle }
}

fn completion(texts: &[&str]) -> String {
    let choices: Vec<_> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| serde_json::json!({"index": i, "message": {"role": "assistant", "content": t}}))
        .collect();
    serde_json::json!({"choices": choices, "usage": {"prompt_tokens": 10, "completion_tokens": 5}}).to_string()
}

#[test]
fn http_backend_speaks_chat_completions() {
    let dir = tempfile::tempdir().unwrap();
    let clip = common::clip_in(dir.path(), "scene-0001_000");
    let server = serve(vec![
        (503, "busy".into()),
        (200, completion(&["[(1, 2)]"])),
        (200, completion(&["second"])),
    ]);
    std::env::set_var("NAVIDRIVE_TEST_KEY", "sk-test");
    let backend = HttpBackend::new(&HttpConfig {
        url: server.url.clone(),
        api_key_env: Some("NAVIDRIVE_TEST_KEY".into()),
        timeout_secs: 5,
    })
    .unwrap();
    assert!(backend.url().ends_with("/v1/chat/completions"));
    let gw = Gateway::new(backend, fast_retry(3), 2);
    let bundle = PromptTemplates::builtin()
        .build_driver_prompt(&clip, AblationFlags::ALL, OutputMode::Waypoint)
        .unwrap();
    let mut req = request(2);
    req.messages = bundle.to_messages();
    req.seed = Some(11);

    let set = gw.complete(&req).unwrap();
    assert_eq!(set.texts, vec!["[(1, 2)]", "second"]);
    assert_eq!(set.attempts, 2);
    assert_eq!(set.usage.prompt_tokens, 20);

    let seen = server.handle.join().unwrap();
    assert_eq!(seen.len(), 3);
    let (head, body) = &seen[1];
    assert!(head.starts_with("POST /v1/chat/completions"));
    assert!(head.to_ascii_lowercase().contains("authorization: bearer sk-test"));
    let v: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(v["model"], "test-model");
    assert_eq!(v["n"], 2);
    assert_eq!(v["seed"], 11);
    assert_eq!(v["messages"][0]["role"], "system");
    let user = &v["messages"][1]["content"];
    assert_eq!(user[0]["type"], "image_url");
    assert_eq!(user[0]["image_url"]["url"], "data:image/jpeg;base64,cGl4ZWxz");
    assert!(user[1]["text"].as_str().unwrap().starts_with("[clip-id: scene-0001_000]"));
    // The top-up request asks only for the missing candidate.
    let v: serde_json::Value = serde_json::from_str(&seen[2].1).unwrap();
    assert_eq!(v["n"], 1);
}

#[test]
fn http_client_errors_are_not_retried() {
    let server = serve(vec![(400, r#"{"error":"bad"}"#.into())]);
    let backend = HttpBackend::new(&HttpConfig {
        url: format!("{}/chat/completions", server.url),
        api_key_env: None,
        timeout_secs: 5,
    })
    .unwrap();
    let gw = Gateway::new(backend, fast_retry(3), 1);
    assert!(matches!(gw.complete(&request(1)), Err(GatewayError::Rejected { status: 400, .. })));
    assert_eq!(server.handle.join().unwrap().len(), 1);
}

#[test]
fn unreachable_endpoint_exhausts_retries() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = HttpBackend::new(&HttpConfig {
        url: format!("http://127.0.0.1:{port}/v1"),
        api_key_env: None,
        timeout_secs: 2,
    })
    .unwrap();
    let gw = Gateway::new(backend, fast_retry(2), 1);
    assert!(matches!(
        gw.complete(&request(1)),
        Err(GatewayError::ExhaustedRetries { attempts: 2, .. })
    ));
}
