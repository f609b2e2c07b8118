#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use stagefix::backend::{MockEntry, MockScript};
use stagefix::corpus::BugInstance;
use stagefix::prompting::Stage;

pub const ACCEPT: &str = "VERDICT: CORRECT\nThe patch addresses the defect.";
pub const REJECT: &str = "VERDICT: INCORRECT\nThe condition is still wrong.";

const VARS: &[&str] = &["count", "index", "total", "size", "limit", "offset", "value", "result"];
const CALLS: &[&str] = &["length", "size", "get", "put", "add", "remove", "contains", "trim"];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items[(rng.next_u64() % items.len() as u64) as usize]
}

pub fn below(rng: &mut ChaCha8Rng, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}

fn statement(rng: &mut ChaCha8Rng) -> (String, String) {
    let a = pick(rng, VARS);
    let b = loop {
        let b = pick(rng, VARS);
        if b != a {
            break b;
        }
    };
    let call = pick(rng, CALLS);
    match below(rng, 4) {
        0 => (
            format!("    if ({a} < {b}) return {a};"),
            format!("if ({a} <= {b}) return {a};"),
        ),
        1 => (
            format!("    int {a} = items.{call}() - 1;"),
            format!("int {a} = items.{call}();"),
        ),
        2 => (
            format!("    {a} = {b} + 1;"),
            format!("{a} = {b} - 1;"),
        ),
        _ => (
            format!("    return {a}.{call}({b});"),
            format!("return {b}.{call}({a});"),
        ),
    }
}

/// A small Java-like method with one injected single-line bug.
pub fn synth_instance(rng: &mut ChaCha8Rng, id: &str, repo: &str) -> BugInstance {
    let body = 2 + below(rng, 4);
    let mut lines = vec![format!("int {}(int {}) {{", pick(rng, CALLS), pick(rng, VARS))];
    let mut fixes = Vec::new();
    for _ in 0..body {
        let (line, fix) = statement(rng);
        lines.push(line);
        fixes.push(fix);
    }
    lines.push("}".into());
    let bug = below(rng, body);
    BugInstance {
        id: id.into(),
        repo: repo.into(),
        buggy_method: lines.join("\n"),
        buggy_line_index: bug + 1,
        buggy_line: lines[bug + 1].clone(),
        fixed_line: fixes[bug].clone(),
        context: None,
    }
}

/// `n` instances spread over `repos` repositories named `{prefix}{r}`.
pub fn synth_corpus(n: usize, repos: usize, prefix: &str, seed: u64) -> Vec<BugInstance> {
    let mut rng = rng(seed);
    (0..n)
        .map(|i| {
            let repo = format!("{prefix}{}", below(&mut rng, repos));
            synth_instance(&mut rng, &format!("{prefix}{i:05}"), &repo)
        })
        .collect()
}

fn fenced(line: &str) -> String {
    format!("```java\n{line}\n```")
}

/// Instance-independent replies for every stage; reviews answer per turn.
pub fn generic_script(reviews: &[(u32, &str)]) -> MockScript {
    let mut entries = vec![
        MockScript::entry(Stage::Report, None, "The method returns the wrong value on the boundary."),
        MockScript::entry(Stage::Pattern, None, "Off-by-one comparisons are fixed by relaxing the bound."),
        MockScript::entry(Stage::Explain, None, "Line 1 declares the method. Line 2 compares the values."),
        MockScript::entry(Stage::Generate, None, fenced("return count;")),
    ];
    for t in 1..=3 {
        entries.push(MockScript::entry(
            Stage::Regenerate,
            Some(t),
            fenced(&format!("return count + {t};")),
        ));
    }
    for &(t, text) in reviews {
        entries.push(MockScript::entry(Stage::Review, Some(t), text));
    }
    MockScript::stage_table(entries)
}

/// Generic replies plus per-instance patches and verdicts, so runs mix
/// correct and wrong patches and every review path.
pub fn varied_script(instances: &[BugInstance]) -> MockScript {
    let mut script = generic_script(&[(1, REJECT), (2, REJECT), (3, REJECT)]);
    for (i, x) in instances.iter().enumerate() {
        let entry = |stage, turn, text: String| MockEntry {
            instance: Some(x.id.clone()),
            stage,
            turn,
            text,
        };
        let first = if i % 5 == 0 { x.fixed_line.clone() } else { x.buggy_line.trim().to_string() };
        script.responses.push(entry(Stage::Generate, None, fenced(&first)));
        match i % 3 {
            0 => script.responses.push(entry(Stage::Review, Some(1), ACCEPT.into())),
            1 => {
                script.responses.push(entry(Stage::Review, Some(2), ACCEPT.into()));
                script.responses.push(entry(Stage::Regenerate, Some(1), fenced(&x.fixed_line)));
            }
            _ => {}
        }
    }
    script
}

pub fn write_script(path: &Path, script: &MockScript) {
    fs::write(path, serde_json::to_string_pretty(script).unwrap()).unwrap();
}

/// Every file under `dir`, keyed by relative path.
pub fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Runs the CLI in-process and returns (exit code, stdout, stderr).
pub fn cli<I: IntoIterator<Item = S>, S: AsRef<std::ffi::OsStr>>(args: I) -> (i32, String, String) {
    let mut argv: Vec<std::ffi::OsString> = vec!["stagefix".into()];
    argv.extend(args.into_iter().map(|a| a.as_ref().to_os_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = stagefix::cli::main_entry(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

pub type Handler = dyn Fn(usize, &serde_json::Value) -> (u16, String) + Send + Sync;

/// A minimal chat-completions server on localhost. `handler` receives the
/// 0-based request number and the JSON body.
pub struct FakeServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<(serde_json::Value, Option<String>)>>>,
}

impl FakeServer {
    pub fn start(handler: Box<Handler>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        let handler: Arc<Handler> = Arc::from(handler);
        let counter = Arc::new(AtomicUsize::new(0));
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let (log, handler, counter) = (Arc::clone(&log), Arc::clone(&handler), Arc::clone(&counter));
                thread::spawn(move || {
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut len = 0;
                    let mut auth = None;
                    loop {
                        let mut line = String::new();
                        if reader.read_line(&mut line).unwrap_or(0) == 0 {
                            return;
                        }
                        let line = line.trim_end();
                        if line.is_empty() {
                            break;
                        }
                        if let Some((k, v)) = line.split_once(':') {
                            match k.to_ascii_lowercase().as_str() {
                                "content-length" => len = v.trim().parse().unwrap_or(0),
                                "authorization" => auth = Some(v.trim().to_string()),
                                _ => {}
                            }
                        }
                    }
                    let mut body = vec![0; len];
                    reader.read_exact(&mut body).unwrap();
                    let json: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
                    let n = counter.fetch_add(1, Ordering::SeqCst);
                    log.lock().unwrap().push((json.clone(), auth));
                    let (status, reply) = handler(n, &json);
                    let head = format!(
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                        reply.len()
                    );
                    let _ = stream.write_all(head.as_bytes());
                    let _ = stream.write_all(reply.as_bytes());
                });
            }
        });
        FakeServer { url, requests }
    }
}

/// A chat-completions response body carrying `text`.
pub fn completion_body(text: &str) -> String {
    serde_json::json!({
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 10, "completion_tokens": 5, "total_tokens": 15}
    })
    .to_string()
}

/// Replies that make sense for every stage: the reviewer accepts and the
/// developer's fenced patch is the line after the verdict.
pub fn universal_reply(body: &serde_json::Value) -> String {
    let is_review = body["messages"]
        .as_array()
        .into_iter()
        .flatten()
        .any(|m| m["content"].as_str().unwrap_or("").contains("<<<CANDIDATE_PATCH>>>"));
    if is_review {
        ACCEPT.to_string()
    } else {
        "Proposed fix:\n```java\nreturn count;\n```".to_string()
    }
}
