//! Rewrite-panel generation against a chat-completion endpoint.
//!
//! Per essay: generate every requested rewrite, verify them in one call,
//! give each rejected rewrite one corrective attempt, verify the corrected
//! outputs, and discard what is still rejected.

mod archive;
mod endpoint;
mod templates;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use archive::{Archive, ArchiveRecord, CallKey};
pub use endpoint::{ChatBackend, ChatRequest, ChatResponse, EndpointConfig, EndpointMeta, HttpBackend};
pub use templates::{
    format_rewritten_texts, render_corrective, render_rewrite, render_verify, PromptTemplate, RenderedPrompt,
    TemplateKind,
};

use crate::data::{validate_panel, FeatureVector, KindAcceptance, PanelDataset, RewriteKind, VersionKey, VersionRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Accepted,
    Rejected,
    Pending,
    /// Generation or verification failed at the endpoint.
    Failed,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Accepted => "ACCEPTED",
            Verdict::Rejected => "REJECTED",
            Verdict::Pending => "PENDING",
            Verdict::Failed => "FAILED",
        })
    }
}

/// One rewrite to produce: its kind and the version slot it fills.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RewriteRequest {
    pub kind: RewriteKind,
    pub slot: u32,
}

impl RewriteRequest {
    /// SAT levels 1..=6 in slots 1..=6 plus `neutral` neutral replicates.
    pub fn standard(neutral: u32) -> Vec<RewriteRequest> {
        let mut out: Vec<RewriteRequest> = (1..=6u8)
            .map(|l| RewriteRequest {
                kind: RewriteKind::Sat(l),
                slot: l as u32,
            })
            .collect();
        out.extend((1..=neutral).map(|slot| RewriteRequest {
            kind: RewriteKind::Neutral,
            slot,
        }));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteResult {
    pub essay_id: String,
    pub rewrite_kind: RewriteKind,
    pub slot: u32,
    pub output_text: String,
    pub attempt: u32,
    pub verdict: Verdict,
    pub endpoint: Option<EndpointMeta>,
    pub error: Option<String>,
}

fn call(backend: &dyn ChatBackend, archive: &Archive, key: CallKey, req: &ChatRequest) -> Result<ChatResponse> {
    if let Some(r) = archive.get(&key) {
        return Ok(r);
    }
    let r = backend.complete(req)?;
    archive.record(key, req, &r)?;
    Ok(r)
}

fn request(prompt: &RenderedPrompt, temperature: f64, cfg: &EndpointConfig) -> ChatRequest {
    ChatRequest {
        system: prompt.system.clone(),
        user: prompt.user.clone(),
        temperature,
        max_tokens: cfg.max_tokens,
    }
}

fn generate(
    backend: &dyn ChatBackend,
    archive: &Archive,
    essay_id: &str,
    req: RewriteRequest,
    attempt: u32,
    prompt: &RenderedPrompt,
    cfg: &EndpointConfig,
) -> RewriteResult {
    let key = CallKey {
        essay_id: essay_id.into(),
        call: req.kind.to_string(),
        slot: req.slot,
        attempt,
        ask: 1,
    };
    let base = RewriteResult {
        essay_id: essay_id.into(),
        rewrite_kind: req.kind,
        slot: req.slot,
        output_text: String::new(),
        attempt,
        verdict: Verdict::Pending,
        endpoint: None,
        error: None,
    };
    match call(backend, archive, key, &request(prompt, cfg.temperature, cfg)) {
        Ok(r) => RewriteResult {
            output_text: r.text,
            endpoint: Some(r.meta),
            ..base
        },
        Err(e) => {
            log::warn!("{essay_id} {} slot {}: {e}", req.kind, req.slot);
            RewriteResult {
                verdict: Verdict::Failed,
                error: Some(e.to_string()),
                ..base
            }
        }
    }
}

/// First-attempt rewrites of one essay, each PENDING or FAILED.
pub fn request_rewrites(
    backend: &dyn ChatBackend,
    archive: &Archive,
    essay_id: &str,
    text: &str,
    requests: &[RewriteRequest],
    cfg: &EndpointConfig,
) -> Result<Vec<RewriteResult>> {
    requests
        .iter()
        .map(|&r| Ok(generate(backend, archive, essay_id, r, 1, &render_rewrite(r.kind, text)?, cfg)))
        .collect()
}

/// Parse the first bracketed list of YES/NO tokens, e.g. `['YES', 'NO']`.
pub fn parse_verdicts(text: &str) -> Result<Vec<bool>> {
    let open = text.find('[').ok_or_else(|| Error::VerdictParse(format!("no list in {text:?}")))?;
    let close = text[open..]
        .find(']')
        .ok_or_else(|| Error::VerdictParse(format!("unterminated list in {text:?}")))?;
    let inner = text[open + 1..open + close].trim();
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|tok| {
            let t = tok.trim().trim_matches(|c| c == '\'' || c == '"').trim();
            match t.to_ascii_uppercase().as_str() {
                "YES" => Ok(true),
                "NO" => Ok(false),
                _ => Err(Error::VerdictParse(format!("unexpected token {t:?}"))),
            }
        })
        .collect()
}

/// Verdicts for `rewrites` of `original` from one verification call, with a
/// single re-ask when the reply does not parse or has the wrong length.
#[allow(clippy::too_many_arguments)]
pub fn verify_rewrites(
    backend: &dyn ChatBackend,
    archive: &Archive,
    essay_id: &str,
    attempt: u32,
    original: &str,
    rewrites: &[&str],
    cfg: &EndpointConfig,
) -> Result<Vec<Verdict>> {
    if rewrites.is_empty() {
        return Err(Error::Config("verification needs at least one rewrite".into()));
    }
    let req = request(&render_verify(original, rewrites)?, cfg.verify_temperature, cfg);
    let mut last = None;
    for ask in 1..=2 {
        let key = CallKey {
            essay_id: essay_id.into(),
            call: "VERIFY".into(),
            slot: 0,
            attempt,
            ask,
        };
        let resp = call(backend, archive, key, &req)?;
        match parse_verdicts(&resp.text) {
            Ok(v) if v.len() == rewrites.len() => {
                return Ok(v
                    .into_iter()
                    .map(|ok| if ok { Verdict::Accepted } else { Verdict::Rejected })
                    .collect())
            }
            Ok(v) => {
                last = Some(Error::LengthMismatch {
                    expected: rewrites.len(),
                    got: v.len(),
                })
            }
            Err(e) => last = Some(e),
        }
        log::warn!("{essay_id}: verification reply unusable (ask {ask})");
    }
    Err(last.expect("two asks made"))
}

/// Second attempt for a rejected rewrite.
#[allow(clippy::too_many_arguments)]
pub fn corrective_rewrite(
    backend: &dyn ChatBackend,
    archive: &Archive,
    essay_id: &str,
    req: RewriteRequest,
    original_instruction: &RenderedPrompt,
    failed_output: &str,
    cfg: &EndpointConfig,
) -> Result<RewriteResult> {
    let prompt = render_corrective(original_instruction, failed_output)?;
    Ok(generate(backend, archive, essay_id, req, 2, &prompt, cfg))
}

fn apply_verdicts(
    backend: &dyn ChatBackend,
    archive: &Archive,
    essay_id: &str,
    attempt: u32,
    text: &str,
    results: &mut [RewriteResult],
    idx: &[usize],
    cfg: &EndpointConfig,
) {
    if idx.is_empty() {
        return;
    }
    let outs: Vec<&str> = idx.iter().map(|&i| results[i].output_text.as_str()).collect();
    match verify_rewrites(backend, archive, essay_id, attempt, text, &outs, cfg) {
        Ok(v) => {
            for (&i, verdict) in idx.iter().zip(v) {
                results[i].verdict = verdict;
            }
        }
        Err(e) => {
            log::warn!("{essay_id}: verification failed: {e}");
            for &i in idx {
                results[i].verdict = Verdict::Failed;
                results[i].error = Some(e.to_string());
            }
        }
    }
}

/// Full generate, verify, correct, re-verify cycle for one essay. Returns
/// the final result for every request.
pub fn process_essay(
    backend: &dyn ChatBackend,
    archive: &Archive,
    essay_id: &str,
    text: &str,
    requests: &[RewriteRequest],
    cfg: &EndpointConfig,
) -> Result<Vec<RewriteResult>> {
    let mut results = request_rewrites(backend, archive, essay_id, text, requests, cfg)?;
    let pending: Vec<usize> = (0..results.len()).filter(|&i| results[i].verdict == Verdict::Pending).collect();
    apply_verdicts(backend, archive, essay_id, 1, text, &mut results, &pending, cfg);

    let rejected: Vec<usize> = (0..results.len()).filter(|&i| results[i].verdict == Verdict::Rejected).collect();
    let mut retried = Vec::new();
    for &i in &rejected {
        let r = requests[i];
        let instruction = render_rewrite(r.kind, text)?;
        let c = corrective_rewrite(backend, archive, essay_id, r, &instruction, &results[i].output_text, cfg)?;
        if c.verdict == Verdict::Pending {
            retried.push(i);
        }
        results[i] = c;
    }
    apply_verdicts(backend, archive, essay_id, 2, text, &mut results, &retried, cfg);
    for &i in &retried {
        if results[i].verdict == Verdict::Rejected {
            log::info!("{essay_id} {} slot {}: rejected after corrective attempt", results[i].rewrite_kind, results[i].slot);
        }
    }
    Ok(results)
}

/// Run [`process_essay`] over `essays` (id, text) with at most
/// `cfg.max_in_flight` essays in progress. Output follows input order.
pub fn run_rewrites(
    backend: &dyn ChatBackend,
    archive: &Archive,
    essays: &[(String, String)],
    requests: &[RewriteRequest],
    cfg: &EndpointConfig,
) -> Result<Vec<RewriteResult>> {
    cfg.validate()?;
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Vec<RewriteResult>>>>> = essays.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..cfg.max_in_flight.min(essays.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((id, text)) = essays.get(i) else { break };
                let r = process_essay(backend, archive, id, text, requests, cfg);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    let mut out = Vec::new();
    for s in slots {
        out.extend(s.into_inner().expect("slot lock").expect("every essay processed")?);
    }
    Ok(out)
}

/// Supplies feature vectors for generated rewrites.
pub trait FeatureSource {
    fn features(&self, key: &VersionKey, text: &str) -> Option<FeatureVector>;
}

/// Features looked up by version key, e.g. from an externally computed
/// versions file.
pub struct KeyedFeatures(pub HashMap<VersionKey, FeatureVector>);

impl FeatureSource for KeyedFeatures {
    fn features(&self, key: &VersionKey, _text: &str) -> Option<FeatureVector> {
        self.0.get(key).cloned()
    }
}

/// Add verdicted rewrites to `ds` as versions. Accepted rewrites need
/// features; rejected ones get zeros when none are supplied, since only
/// their acceptance flag is used. FAILED results are left out.
pub fn build_versions(
    ds: &PanelDataset,
    results: &[RewriteResult],
    source: &dyn FeatureSource,
) -> Result<(PanelDataset, Vec<KindAcceptance>)> {
    let m = ds.manifest();
    let zeros = || FeatureVector {
        embedding: vec![0.0; m.embedding_dim],
        style: vec![0.0; m.style_columns.len()],
        extras: vec![0.0; m.extra_columns.len()],
    };
    let mut versions: Vec<VersionRecord> = ds.versions().to_vec();
    let mut failed = 0;
    for r in results {
        let accepted = match r.verdict {
            Verdict::Accepted => true,
            Verdict::Rejected => false,
            Verdict::Failed | Verdict::Pending => {
                failed += 1;
                continue;
            }
        };
        let key = VersionKey::new(r.essay_id.clone(), r.slot, r.rewrite_kind);
        let features = match source.features(&key, &r.output_text) {
            Some(f) => f,
            None if !accepted => zeros(),
            None => return Err(Error::MissingFeatures(key.to_string())),
        };
        versions.push(VersionRecord {
            essay_id: r.essay_id.clone(),
            version_k: r.slot,
            kind: r.rewrite_kind,
            features,
            accepted,
        });
    }
    if failed > 0 {
        log::warn!("{failed} rewrites without a final verdict left out of the panel");
    }
    let out = PanelDataset::new(ds.essays().to_vec(), versions, m.clone())?;
    let out = ds
        .seed_registry()
        .iter()
        .fold(out, |acc, (stage, seed)| acc.with_seed(stage, *seed));
    let report = validate_panel(&out);
    if !report.no_panel.is_empty() {
        log::info!("{} essays have no accepted rewrites", report.no_panel.len());
    }
    Ok((out, report.acceptance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    /// Scripted backend: rewrites echo a tag, verification answers from a
    /// closure over the rewritten texts.
    struct Script<F: Fn(&[&str]) -> String + Sync> {
        verify: F,
        calls: AtomicU32,
    }

    impl<F: Fn(&[&str]) -> String + Sync> ChatBackend for Script<F> {
        fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let meta = EndpointMeta {
                model: "mock".into(),
                latency_ms: 0,
                prompt_tokens: None,
                completion_tokens: None,
            };
            let text = if req.user.starts_with("You are a text evaluation specialist") {
                let block = req.user.split("2) Rewritten text(s):\n\"\"\"\n").nth(1).unwrap();
                let block = block.split("\n\"\"\"").next().unwrap();
                let texts: Vec<&str> = block.split("\n\n").map(|t| t.split_once(":\n").unwrap().1).collect();
                (self.verify)(&texts)
            } else if req.user.starts_with("The previous rewrite attempt") {
                "fixed".to_string()
            } else {
                "draft".to_string()
            };
            Ok(ChatResponse { text, meta })
        }
    }

    fn script<F: Fn(&[&str]) -> String + Sync>(f: F) -> Script<F> {
        Script {
            verify: f,
            calls: AtomicU32::new(0),
        }
    }

    fn yes_no(texts: &[&str], ok: impl Fn(&str) -> bool) -> String {
        let v: Vec<String> = texts.iter().map(|t| format!("'{}'", if ok(t) { "YES" } else { "NO" })).collect();
        format!("[{}]", v.join(", "))
    }

    fn reqs(kinds: &[u8]) -> Vec<RewriteRequest> {
        kinds
            .iter()
            .map(|&k| RewriteRequest {
                kind: RewriteKind::Sat(k),
                slot: k as u32,
            })
            .collect()
    }

    #[test]
    fn verdict_examples() {
        assert_eq!(parse_verdicts("['YES', 'NO', 'NO']").unwrap(), vec![true, false, false]);
        assert_eq!(parse_verdicts("Sure: [\"YES\"] trailing").unwrap(), vec![true]);
        assert!(parse_verdicts("YES, NO").is_err());
        assert!(parse_verdicts("['MAYBE']").is_err());
    }

    #[test]
    fn all_accepted() {
        let b = script(|t| yes_no(t, |_| true));
        let a = Archive::in_memory();
        let r = process_essay(&b, &a, "e1", "essay", &reqs(&[1, 2, 3, 4, 5, 6]), &EndpointConfig::default()).unwrap();
        assert_eq!(r.len(), 6);
        assert!(r.iter().all(|x| x.verdict == Verdict::Accepted && x.attempt == 1));
        assert_eq!(b.calls.load(Ordering::SeqCst), 7);
    }

    #[test]
    fn corrective_pass_and_fail() {
        // first drafts rejected; corrected output accepted
        let b = script(|t| yes_no(t, |x| x == "fixed"));
        let a = Archive::in_memory();
        let r = process_essay(&b, &a, "e1", "essay", &reqs(&[4]), &EndpointConfig::default()).unwrap();
        assert_eq!(r[0].verdict, Verdict::Accepted);
        assert_eq!(r[0].attempt, 2);
        assert_eq!(r[0].output_text, "fixed");

        let b = script(|t| yes_no(t, |_| false));
        let r = process_essay(&b, &Archive::in_memory(), "e1", "essay", &reqs(&[4, 5]), &EndpointConfig::default()).unwrap();
        assert!(r.iter().all(|x| x.verdict == Verdict::Rejected && x.attempt == 2));
        // 2 drafts, 1 verify, 2 corrections, 1 verify
        assert_eq!(b.calls.load(Ordering::SeqCst), 6);
    }

    #[test]
    fn length_mismatch_after_reask() {
        let b = script(|_| "['YES']".to_string());
        let a = Archive::in_memory();
        let err = verify_rewrites(&b, &a, "e", 1, "o", &["x", "y"], &EndpointConfig::default()).unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { expected: 2, got: 1 }));
        assert_eq!(b.calls.load(Ordering::SeqCst), 2);
        let r = process_essay(&b, &a, "e", "o", &reqs(&[1, 2]), &EndpointConfig::default()).unwrap();
        assert!(r.iter().all(|x| x.verdict == Verdict::Failed));
    }

    #[test]
    fn archive_makes_reruns_free() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calls.jsonl");
        let essays = vec![("a".to_string(), "ta".to_string()), ("b".to_string(), "tb".to_string())];
        let cfg = EndpointConfig::default();
        let b1 = script(|t| yes_no(t, |x| x == "fixed" || x == "draft"));
        let first = run_rewrites(&b1, &Archive::open(&path).unwrap(), &essays, &reqs(&[1, 2, 3]), &cfg).unwrap();
        assert!(b1.calls.load(Ordering::SeqCst) > 0);
        let b2 = script(|_| panic!("no calls expected"));
        let second = run_rewrites(&b2, &Archive::open(&path).unwrap(), &essays, &reqs(&[1, 2, 3]), &cfg).unwrap();
        assert_eq!(b2.calls.load(Ordering::SeqCst), 0);
        assert_eq!(first.len(), 6);
        for (x, y) in first.iter().zip(&second) {
            assert_eq!(x.verdict, y.verdict);
            assert_eq!(x.output_text, y.output_text);
        }
    }

    #[test]
    fn versions_and_acceptance() {
        use crate::data::fixtures;
        let ds = fixtures::tiny();
        let mk = |id: &str, k: u8, v: Verdict| RewriteResult {
            essay_id: id.into(),
            rewrite_kind: RewriteKind::Sat(k),
            slot: k as u32,
            output_text: "t".into(),
            attempt: 1,
            verdict: v,
            endpoint: None,
            error: None,
        };
        let results = vec![
            mk("a", 3, Verdict::Accepted),
            mk("b", 3, Verdict::Rejected),
            mk("b", 4, Verdict::Failed),
        ];
        let feats = KeyedFeatures(HashMap::from([(
            VersionKey::new("a", 3, RewriteKind::Sat(3)),
            ds.versions()[0].features.clone(),
        )]));
        let (out, acc) = build_versions(&ds, &results, &feats).unwrap();
        assert_eq!(out.versions().len(), ds.versions().len() + 2);
        let sat3 = acc.iter().find(|a| a.kind == RewriteKind::Sat(3)).unwrap();
        assert_eq!((sat3.total, sat3.accepted), (2, 1));
        let missing = build_versions(&ds, &[mk("b", 5, Verdict::Accepted)], &feats).unwrap_err();
        assert!(matches!(missing, Error::MissingFeatures(_)));
    }
}
