//! Rewrite pipeline against a local mock chat-completion server.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde_json::Value;
use stylegap::data::{
    EssayRecord, FeatureManifest, FeatureVector, GroupLabel, PanelDataset, RewriteKind, VersionRecord,
};
use stylegap::error::Error;
use stylegap::rewrite::*;

type Handler = dyn Fn(&Value) -> (u16, String) + Send + Sync;

struct Mock {
    url: String,
    hits: Arc<AtomicUsize>,
    seen: Arc<Mutex<Vec<(Option<String>, Value)>>>,
}

/// Serves one request per connection until the process exits.
fn serve(handler: Arc<Handler>) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let seen = Arc::new(Mutex::new(Vec::new()));
    let (h2, s2) = (hits.clone(), seen.clone());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let (handler, hits, seen) = (handler.clone(), h2.clone(), s2.clone());
            std::thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                let mut auth = None;
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                assert!(line.starts_with("POST /v1/chat/completions "), "{line}");
                loop {
                    line.clear();
                    reader.read_line(&mut line).unwrap();
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    let (k, v) = l.split_once(':').unwrap();
                    match k.to_ascii_lowercase().as_str() {
                        "content-length" => len = v.trim().parse().unwrap(),
                        "authorization" => auth = Some(v.trim().to_string()),
                        _ => {}
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let body: Value = serde_json::from_slice(&body).unwrap();
                hits.fetch_add(1, Ordering::SeqCst);
                let (status, text) = handler(&body);
                seen.lock().unwrap().push((auth, body));
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
                let _ = stream.write_all(resp.as_bytes());
            });
        }
    });
    Mock { url, hits, seen }
}

fn completion(content: &str) -> (u16, String) {
    let body = serde_json::json!({
        "model": "mock-1",
        "choices": [{"message": {"role": "assistant", "content": content}}],
        "usage": {"prompt_tokens": 10, "completion_tokens": 5},
    });
    (200, body.to_string())
}

fn user_text(body: &Value) -> &str {
    body["messages"].as_array().unwrap().last().unwrap()["content"].as_str().unwrap()
}

/// Rewritten texts listed in a verification prompt.
fn listed_texts(user: &str) -> Vec<String> {
    let block = user.split("2) Rewritten text(s):\n\"\"\"\n").nth(1).unwrap();
    let block = block.split("\n\"\"\"").next().unwrap();
    block
        .split("\n\n")
        .map(|t| t.split_once(":\n").unwrap().1.to_string())
        .collect()
}

fn is_verify(user: &str) -> bool {
    user.starts_with("You are a text evaluation specialist")
}

fn is_corrective(user: &str) -> bool {
    user.starts_with("The previous rewrite attempt")
}

/// Drafts are "draft-<essay>", corrections "fixed"; `accept` decides verdicts.
fn scripted(accept: fn(&str) -> bool) -> Arc<Handler> {
    Arc::new(move |body: &Value| {
        let user = user_text(body);
        if is_verify(user) {
            let v: Vec<String> = listed_texts(user)
                .iter()
                .map(|t| format!("'{}'", if accept(t) { "YES" } else { "NO" }))
                .collect();
            completion(&format!("[{}]", v.join(", ")))
        } else if is_corrective(user) {
            completion("fixed")
        } else {
            let essay = user.rsplit('\n').next().unwrap();
            completion(&format!("draft-{essay}"))
        }
    })
}

fn cfg(url: &str) -> EndpointConfig {
    EndpointConfig {
        base_url: url.into(),
        max_retries: 2,
        backoff_ms: 1,
        timeout_secs: 10,
        ..EndpointConfig::default()
    }
}

fn sat(levels: &[u8]) -> Vec<RewriteRequest> {
    levels
        .iter()
        .map(|&l| RewriteRequest {
            kind: RewriteKind::Sat(l),
            slot: l as u32,
        })
        .collect()
}

#[test]
fn server_errors_give_failed_result_and_pipeline_continues() {
    let inner = scripted(|_| true);
    let mock = serve(Arc::new(move |body: &Value| {
        if user_text(body).contains("BROKEN") {
            (500, "{}".into())
        } else {
            inner(body)
        }
    }));
    let backend = HttpBackend::new(cfg(&mock.url)).unwrap();
    let essays = vec![("bad".to_string(), "BROKEN".to_string()), ("ok".to_string(), "fine".to_string())];
    let out = run_rewrites(&backend, &Archive::in_memory(), &essays, &sat(&[2]), &cfg(&mock.url)).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].verdict, Verdict::Failed);
    assert!(out[0].error.as_deref().unwrap().contains("giving up after 3 attempts"));
    assert_eq!(out[1].verdict, Verdict::Accepted);
    // 3 attempts for the broken essay; draft and verification for the other
    assert_eq!(mock.hits.load(Ordering::SeqCst), 5);
}

#[test]
fn client_error_is_not_retried() {
    let mock = serve(Arc::new(|_: &Value| (400, "{\"error\": \"bad\"}".into())));
    let backend = HttpBackend::new(cfg(&mock.url)).unwrap();
    let err = backend
        .complete(&ChatRequest {
            system: None,
            user: "x".into(),
            temperature: 1.0,
            max_tokens: 10,
        })
        .unwrap_err();
    assert!(matches!(err, Error::Endpoint(m) if m.contains("HTTP 400")));
    assert_eq!(mock.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn malformed_body() {
    let mock = serve(Arc::new(|_: &Value| (200, "{\"choices\": []}".into())));
    let backend = HttpBackend::new(cfg(&mock.url)).unwrap();
    let r = request_rewrites(&backend, &Archive::in_memory(), "e", "t", &sat(&[1]), &cfg(&mock.url)).unwrap();
    assert_eq!(r[0].verdict, Verdict::Failed);
    assert!(r[0].error.as_deref().unwrap().contains("malformed"));
}

#[test]
fn wire_format() {
    std::env::set_var("STYLEGAP_TEST_TOKEN", "sekret");
    let mock = serve(scripted(|_| true));
    let c = EndpointConfig {
        api_key_env: Some("STYLEGAP_TEST_TOKEN".into()),
        ..cfg(&mock.url)
    };
    let backend = HttpBackend::new(c.clone()).unwrap();
    let r = process_essay(&backend, &Archive::in_memory(), "e", "essay", &sat(&[6]), &c).unwrap();
    let meta = r[0].endpoint.as_ref().unwrap();
    assert_eq!((meta.model.as_str(), meta.prompt_tokens, meta.completion_tokens), ("mock-1", Some(10), Some(5)));
    let seen = mock.seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    let (auth, gen) = &seen[0];
    assert_eq!(auth.as_deref(), Some("Bearer sekret"));
    assert_eq!(gen["model"], "gpt-4o");
    assert_eq!(gen["temperature"], 1.0);
    assert_eq!(gen["max_tokens"], 2048);
    let msgs = gen["messages"].as_array().unwrap();
    assert_eq!(msgs.len(), 2);
    assert_eq!(msgs[0]["role"], "system");
    assert_eq!(msgs[1]["role"], "user");
    let (_, ver) = &seen[1];
    assert_eq!(ver["temperature"], 0.0);
    assert_eq!(ver["messages"].as_array().unwrap().len(), 1);
}

#[test]
fn verdict_list_over_http() {
    let mock = serve(Arc::new(|_: &Value| completion("['YES', 'NO', 'NO']")));
    let backend = HttpBackend::new(cfg(&mock.url)).unwrap();
    let v = verify_rewrites(&backend, &Archive::in_memory(), "e", 1, "orig", &["a", "b", "c"], &cfg(&mock.url)).unwrap();
    assert_eq!(v, vec![Verdict::Accepted, Verdict::Rejected, Verdict::Rejected]);
}

#[test]
fn identical_rewrite_accepted() {
    let mock = serve(Arc::new(|body: &Value| {
        let user = user_text(body);
        let orig = user.split("1) Original text:\n\"\"\"\n").nth(1).unwrap().split("\n\"\"\"").next().unwrap();
        let v: Vec<&str> = listed_texts(user).iter().map(|t| if t == orig { "'YES'" } else { "'NO'" }).collect();
        completion(&format!("[{}]", v.join(", ")))
    }));
    let backend = HttpBackend::new(cfg(&mock.url)).unwrap();
    let v = verify_rewrites(&backend, &Archive::in_memory(), "e", 1, "same", &["same", "other"], &cfg(&mock.url)).unwrap();
    assert_eq!(v, vec![Verdict::Accepted, Verdict::Rejected]);
}

#[test]
fn corrective_round() {
    let mock = serve(scripted(|t| t == "fixed"));
    let backend = HttpBackend::new(cfg(&mock.url)).unwrap();
    let r = process_essay(&backend, &Archive::in_memory(), "e", "essay", &sat(&[4]), &cfg(&mock.url)).unwrap();
    assert_eq!((r[0].verdict, r[0].attempt, r[0].output_text.as_str()), (Verdict::Accepted, 2, "fixed"));
    let seen = mock.seen.lock().unwrap();
    let corr = seen.iter().map(|(_, b)| b).find(|b| is_corrective(user_text(b))).unwrap();
    let u = user_text(corr);
    assert!(u.contains("Rewrite the following essay by changing only its style"));
    assert!(u.contains("(incorrect) output:\ndraft-essay\n"));
    assert_eq!(corr["messages"][0]["role"], "system");

    let mock = serve(scripted(|_| false));
    let backend = HttpBackend::new(cfg(&mock.url)).unwrap();
    let r = process_essay(&backend, &Archive::in_memory(), "e", "essay", &sat(&[4]), &cfg(&mock.url)).unwrap();
    assert_eq!((r[0].verdict, r[0].attempt), (Verdict::Rejected, 2));
}

#[test]
fn neutral_replicates() {
    let n = Arc::new(AtomicUsize::new(0));
    let n2 = n.clone();
    let mock = serve(Arc::new(move |body: &Value| {
        let user = user_text(body);
        if is_verify(user) {
            completion(&format!("[{}]", vec!["'YES'"; listed_texts(user).len()].join(", ")))
        } else {
            completion(&format!("variant {}", n2.fetch_add(1, Ordering::SeqCst)))
        }
    }));
    let backend = HttpBackend::new(cfg(&mock.url)).unwrap();
    let reqs: Vec<RewriteRequest> = RewriteRequest::standard(6).into_iter().filter(|r| r.kind == RewriteKind::Neutral).collect();
    let r = process_essay(&backend, &Archive::in_memory(), "e", "essay", &reqs, &cfg(&mock.url)).unwrap();
    assert_eq!(r.len(), 6);
    let texts: std::collections::HashSet<_> = r.iter().map(|x| x.output_text.clone()).collect();
    assert_eq!(texts.len(), 6);
    assert_eq!(r.iter().map(|x| x.slot).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6]);
    assert!(r.iter().all(|x| x.verdict == Verdict::Accepted));
}

#[test]
fn rerun_with_archive_issues_no_calls() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("calls.jsonl");
    let essays: Vec<(String, String)> = (0..5).map(|i| (format!("e{i}"), format!("text {i}"))).collect();
    let mock = serve(scripted(|_| true));
    let c = EndpointConfig {
        max_in_flight: 3,
        ..cfg(&mock.url)
    };
    let backend = HttpBackend::new(c.clone()).unwrap();
    let first = run_rewrites(&backend, &Archive::open(&path).unwrap(), &essays, &RewriteRequest::standard(2), &c).unwrap();
    let calls = mock.hits.load(Ordering::SeqCst);
    assert_eq!(calls, 5 * 9);
    let second = run_rewrites(&backend, &Archive::open(&path).unwrap(), &essays, &RewriteRequest::standard(2), &c).unwrap();
    assert_eq!(mock.hits.load(Ordering::SeqCst), calls);
    assert_eq!(first, second);

    // an interrupted run: keep only the first half of the log
    let log = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    let keep = lines.len() / 2;
    std::fs::write(&path, format!("{}\n{}", lines[..keep].join("\n"), &lines[keep][..10])).unwrap();
    let third = run_rewrites(&backend, &Archive::open(&path).unwrap(), &essays, &RewriteRequest::standard(2), &c).unwrap();
    assert_eq!(mock.hits.load(Ordering::SeqCst), calls + (lines.len() - keep));
    assert_eq!(third.len(), first.len());
}

#[test]
fn corrective_calls_are_archived() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("calls.jsonl");
    let mock = serve(scripted(|t| t == "fixed"));
    let c = cfg(&mock.url);
    let backend = HttpBackend::new(c.clone()).unwrap();
    let essays = vec![("e".to_string(), "t".to_string())];
    run_rewrites(&backend, &Archive::open(&path).unwrap(), &essays, &sat(&[1, 2]), &c).unwrap();
    // 2 drafts, verify, 2 corrections, verify
    assert_eq!(mock.hits.load(Ordering::SeqCst), 6);
    let archive = Archive::open(&path).unwrap();
    assert_eq!(archive.len(), 6);
    let r = run_rewrites(&backend, &archive, &essays, &sat(&[1, 2]), &c).unwrap();
    assert_eq!(mock.hits.load(Ordering::SeqCst), 6);
    assert!(r.iter().all(|x| x.verdict == Verdict::Accepted && x.attempt == 2));
}

fn manifest() -> FeatureManifest {
    FeatureManifest {
        embedding_dim: 1,
        style_columns: vec!["s".into()],
        prompts: vec!["p".into()],
        ..FeatureManifest::default()
    }
}

fn fv(x: f64) -> FeatureVector {
    FeatureVector {
        embedding: vec![x],
        style: vec![x],
        extras: vec![],
    }
}

/// Accepted-share summary for a panel with fixed rejection counts.
#[test]
fn acceptance_summary() {
    let n = 10_000;
    let rejected = [27, 19, 19, 338, 54, 396];
    let neutral_rejected = 159;
    let mut essays = Vec::new();
    let mut versions = Vec::new();
    let mut results = Vec::new();
    let mut features = HashMap::new();
    for i in 0..n {
        let id = format!("e{i}");
        essays.push(EssayRecord {
            essay_id: id.clone(),
            group: if i % 2 == 0 { GroupLabel::High } else { GroupLabel::Low },
            human_score: Some(3.0),
            prompt_name: "p".into(),
            covariates: Default::default(),
            text: None,
        });
        versions.push(VersionRecord {
            essay_id: id.clone(),
            version_k: 0,
            kind: RewriteKind::Original,
            features: fv(0.0),
            accepted: true,
        });
        let mut push = |kind: RewriteKind, slot: u32, reject: bool| {
            let verdict = if reject { Verdict::Rejected } else { Verdict::Accepted };
            if !reject {
                features.insert(stylegap::data::VersionKey::new(id.clone(), slot, kind), fv(slot as f64));
            }
            results.push(RewriteResult {
                essay_id: id.clone(),
                rewrite_kind: kind,
                slot,
                output_text: String::new(),
                attempt: if reject { 2 } else { 1 },
                verdict,
                endpoint: None,
                error: None,
            });
        };
        for (l, &r) in rejected.iter().enumerate() {
            push(RewriteKind::Sat(l as u8 + 1), l as u32 + 1, i < r);
        }
        push(RewriteKind::Neutral, 7, i >= n - neutral_rejected);
    }
    let ds = PanelDataset::new(essays, versions, manifest()).unwrap();
    let (out, acc) = build_versions(&ds, &results, &KeyedFeatures(features)).unwrap();
    assert_eq!(out.versions().len(), n * 8);
    let rate = |k: RewriteKind| acc.iter().find(|a| a.kind == k).unwrap().rate;
    for (l, expect) in [0.9973, 0.9981, 0.9981, 0.9662, 0.9946, 0.9604].iter().enumerate() {
        assert!((rate(RewriteKind::Sat(l as u8 + 1)) - expect).abs() < 1e-12, "SAT_{}", l + 1);
    }
    assert_eq!(format!("{:.4}", rate(RewriteKind::Neutral)), "0.9841");
    // every essay keeps at least one accepted rewrite
    assert!(stylegap::data::validate_panel(&out).no_panel.is_empty());
}

#[test]
fn essay_without_accepted_rewrites_has_no_panel() {
    let essays = vec![EssayRecord {
        essay_id: "x".into(),
        group: GroupLabel::High,
        human_score: Some(2.0),
        prompt_name: "p".into(),
        covariates: Default::default(),
        text: None,
    }];
    let versions = vec![VersionRecord {
        essay_id: "x".into(),
        version_k: 0,
        kind: RewriteKind::Original,
        features: fv(0.0),
        accepted: true,
    }];
    let ds = PanelDataset::new(essays, versions, manifest()).unwrap();
    let results = vec![RewriteResult {
        essay_id: "x".into(),
        rewrite_kind: RewriteKind::Sat(3),
        slot: 3,
        output_text: "r".into(),
        attempt: 2,
        verdict: Verdict::Rejected,
        endpoint: None,
        error: None,
    }];
    let (out, _) = build_versions(&ds, &results, &KeyedFeatures(HashMap::new())).unwrap();
    assert_eq!(stylegap::data::validate_panel(&out).no_panel, vec!["x".to_string()]);
}
