//! Acceptance gate. Runs every criterion in sequence and prints one
//! PASS/FAIL line for each; exits nonzero if any criterion fails.

mod common;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use stagefix::backend::{Audited, AuditRecord, BackendConfig, BackendKind, HttpBackend, MockBackend, MockScript};
use stagefix::cli::EvalArgs;
use stagefix::corpus::{split_dataset, write_jsonl, BugInstance, SplitDataset, DEFAULT_RATIOS};
use stagefix::metrics::{bleu4, levenshtein, EvalReport, InstanceScore};
use stagefix::orchestrator::{
    read_results, run_benchmark, BenchmarkOptions, ClockKind, PipelineConfig, PipelineResult,
    ResultSummary, RESULTS_FILE, TRANSCRIPT_DIR,
};
use stagefix::prompting::{parse_verdict, Stage, TemplateSet};
use stagefix::retrieval::{Bm25Index, Bm25Params};
use stagefix::token::token_texts;

use common::*;

type Outcome = Result<String, String>;

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("metric oracles", metric_oracles),
        ("BM25 oracle", bm25_oracle),
        ("split safety", split_safety),
        ("pipeline determinism and budget", pipeline_determinism),
        ("ablation ladder", ablation_ladder),
        ("report reproduction", report_reproduction),
        ("end-to-end offline benchmark", offline_benchmark),
        ("backend smoke", backend_smoke),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} ({name}): PASS [{secs:.2}s] {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL [{secs:.2}s] {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn within(limit: Duration, start: Instant, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    if took > limit {
        return Err(format!("{what} took {took:?}, limit {limit:?}"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn lev_oracle(a: &[String], b: &[String]) -> usize {
    fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&d) = memo.get(&(i, j)) {
            return d;
        }
        let d = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j, memo)
                .min(go(a, b, i, j + 1, memo))
                .min(go(a, b, i + 1, j + 1, memo))
        };
        memo.insert((i, j), d);
        d
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

/// Hand-computed sentence BLEU-4 values: brevity penalty times the fourth
/// root of the product of the (smoothed) 1- to 4-gram precisions.
fn bleu_fixtures() -> Vec<(&'static str, &'static str, f64)> {
    let q = |p: f64| p.powf(0.25);
    vec![
        ("a b c d", "a b c d", 1.0),
        ("a b c d e f", "a b c d e f", 1.0),
        ("x y z", "a b c", 0.0),
        ("", "a b", 0.0),
        // c=3 < r=4: BP = e^(1-4/3), all precisions 1
        ("a b c", "a b c d", (-1.0f64 / 3.0).exp()),
        // 3/4 * 2/3 * 1/2 * (0+1)/(1+1)
        ("a b c d", "a b c", q(3.0 / 4.0 * 2.0 / 3.0 * 1.0 / 2.0 * 1.0 / 2.0)),
        // 3/4 * 1/3 * 1/3 * 1/2
        ("a b x d", "a b c d", q(3.0 / 4.0 * 1.0 / 3.0 * 1.0 / 3.0 * 1.0 / 2.0)),
        // clipped unigrams 1/4, then 1/4, 1/3, 1/2 smoothed
        ("a a a a", "a b c d", q(1.0 / 4.0 * 1.0 / 4.0 * 1.0 / 3.0 * 1.0 / 2.0)),
        ("a", "a b", (-1.0f64).exp()),
        ("a", "a", 1.0),
        ("a b", "a b", 1.0),
        ("b a", "a b", q(1.0 * 1.0 / 2.0)),
        ("a b c d e", "a b c d f", q(4.0 / 5.0 * 3.0 / 4.0 * 2.0 / 3.0 * 1.0 / 2.0)),
        ("the the the", "the cat", q(1.0 / 3.0 * 1.0 / 3.0 * 1.0 / 2.0)),
        ("a b c d a b", "a b c d", q(4.0 / 6.0 * 3.0 / 5.0 * 2.0 / 4.0 * 1.0 / 3.0)),
        ("d c b a", "a b c d", q(1.0 * 1.0 / 4.0 * 1.0 / 3.0 * 1.0 / 2.0)),
        (
            "a b c e f g",
            "a b c d e f g",
            (1.0f64 - 7.0 / 6.0).exp() * q(1.0 * 4.0 / 5.0 * 2.0 / 4.0 * 1.0 / 4.0),
        ),
        ("a x b x c", "a b c", q(3.0 / 5.0 * 1.0 / 5.0 * 1.0 / 4.0 * 1.0 / 3.0)),
        ("a b a b a b", "a b a b", q(4.0 / 6.0 * 3.0 / 5.0 * 2.0 / 4.0 * 1.0 / 3.0)),
        ("q a b c d", "a b c d", q(4.0 / 5.0 * 3.0 / 4.0 * 2.0 / 3.0 * 1.0 / 2.0)),
        ("a b c d q", "a b c d", q(4.0 / 5.0 * 3.0 / 4.0 * 2.0 / 3.0 * 1.0 / 2.0)),
        ("a b q c d", "a b c d", q(4.0 / 5.0 * 2.0 / 4.0 * 1.0 / 4.0 * 1.0 / 3.0)),
        ("a b c", "c b a d e f", (-1.0f64).exp() * q(1.0 * 1.0 / 3.0 * 1.0 / 2.0)),
        ("return a + b ;", "return a - b ;", q(4.0 / 5.0 * 2.0 / 4.0 * 1.0 / 4.0 * 1.0 / 3.0)),
    ]
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let fixtures = bleu_fixtures();
    for (cand, reference, expected) in &fixtures {
        let got = bleu4(cand, reference);
        if (got - expected).abs() > 1e-9 {
            return Err(format!("bleu4({cand:?}, {reference:?}) = {got}, expected {expected}"));
        }
    }

    let alphabet = ["a", "b", "c", "x", "(", ")", "+", ";", "return", "1"];
    let mut rng = rng(11);
    let seq = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<String> {
        let n = below(rng, 18);
        (0..n).map(|_| pick(rng, &alphabet).to_string()).collect()
    };
    let pairs = 1500;
    for _ in 0..pairs {
        let (a, b) = (seq(&mut rng), seq(&mut rng));
        let (sa, sb) = (a.join(" "), b.join(" "));
        let got = levenshtein(&sa, &sb);
        let want = lev_oracle(&a, &b);
        if got != want {
            return Err(format!("levenshtein({sa:?}, {sb:?}) = {got}, oracle {want}"));
        }
        let id = InstanceScore::score("x", Some(&sa), &sa);
        if !a.is_empty() && !(id.exact && id.bleu4 == 1.0 && id.lev == 0) {
            return Err(format!("identity case failed for {sa:?}: {id:?}"));
        }
    }
    within(Duration::from_secs(10), start, "metric checks")?;
    Ok(format!("{} BLEU fixtures, {pairs} Levenshtein pairs", fixtures.len()))
}

// ---------------------------------------------------------------------------

/// Full-scan BM25 over raw token lists, no postings.
fn brute_force_rank(corpus: &[BugInstance], query: &BugInstance) -> Vec<(String, f64)> {
    let (k1, b) = (1.2f64, 0.75f64);
    let terms = |x: &BugInstance| -> Vec<String> {
        token_texts(&format!("{}\n{}", x.buggy_method, x.buggy_line))
            .into_iter()
            .map(|t| t.to_lowercase())
            .collect()
    };
    let docs: Vec<Vec<String>> = corpus.iter().map(terms).collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut query_terms: Vec<String> = Vec::new();
    for t in terms(query) {
        if !query_terms.contains(&t) {
            query_terms.push(t);
        }
    }
    let mut scored: Vec<(String, f64)> = corpus
        .iter()
        .zip(&docs)
        .filter(|(x, _)| x.id != query.id)
        .map(|(x, d)| {
            let mut s = 0.0;
            for t in &query_terms {
                let tf = d.iter().filter(|u| *u == t).count();
                if tf == 0 {
                    continue;
                }
                let df = docs.iter().filter(|e| e.contains(t)).count() as f64;
                let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                let tf = tf as f64;
                let norm = 1.0 - b + b * d.len() as f64 / avgdl;
                s += idf * (tf * (k1 + 1.0)) / (tf + k1 * norm);
            }
            (x.id.clone(), s)
        })
        .collect();
    scored.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then_with(|| x.0.cmp(&y.0)));
    scored
}

fn bm25_oracle() -> Outcome {
    let start = Instant::now();
    let mut corpus = synth_corpus(90, 30, "d", 21);
    // exact duplicates under new ids force score ties
    for i in 0..10 {
        let mut dup = corpus[i].clone();
        dup.id = format!("z{i:02}");
        corpus.push(dup);
    }
    let index = Bm25Index::build(&corpus, Bm25Params::default()).map_err(|e| e.to_string())?;

    let mut queries: Vec<BugInstance> = corpus[..10].to_vec();
    for i in 50..55 {
        let mut copy = corpus[i].clone();
        copy.id = format!("copy-of-{}", corpus[i].id);
        queries.push(copy);
    }
    queries.extend(synth_corpus(5, 5, "fresh", 22));
    let mut ties = 0;
    let mut copies_first = 0;
    for q in &queries {
        let want = brute_force_rank(&corpus, q);
        for k in [3, want.len()] {
            let got: Vec<(String, f64)> = index
                .top_k(q, k)
                .into_iter()
                .map(|d| (d.instance_id, d.score))
                .collect();
            if got[..] != want[..k] {
                return Err(format!("query {} k={k}: index {got:?} vs brute force {:?}", q.id, &want[..k]));
            }
        }
        ties += want.windows(2).filter(|w| w[0].1 == w[1].1 && w[0].1 > 0.0).count();
        if let Some(orig) = q.id.strip_prefix("copy-of-") {
            copies_first += (want[0].0 == orig) as usize;
        }
    }
    if ties == 0 {
        return Err("fixture produced no ties; tie-breaking untested".into());
    }
    within(Duration::from_secs(5), start, "BM25 checks")?;
    Ok(format!(
        "100 docs, {} queries, {ties} tied neighbours, {copies_first}/5 copies rank their source first",
        queries.len()
    ))
}

// ---------------------------------------------------------------------------

fn grouped_corpus(sizes: &[usize]) -> Vec<BugInstance> {
    let mut out = Vec::new();
    for (r, &n) in sizes.iter().enumerate() {
        for j in 0..n {
            out.push(BugInstance {
                id: format!("r{r}-{j}"),
                repo: format!("repo{r}"),
                buggy_method: "x;".into(),
                buggy_line_index: 0,
                buggy_line: "x;".into(),
                fixed_line: "y;".into(),
                context: None,
            });
        }
    }
    out
}

fn split_bytes(split: &SplitDataset) -> Vec<Vec<u8>> {
    let dir = tempfile::tempdir().unwrap();
    split
        .parts()
        .iter()
        .enumerate()
        .map(|(i, part)| {
            let p = dir.path().join(format!("{i}.jsonl"));
            write_jsonl(&p, part).unwrap();
            fs::read(p).unwrap()
        })
        .collect()
}

fn split_safety() -> Outcome {
    let start = Instant::now();
    let mut runner = TestRunner::new(Config {
        cases: 48,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (prop::collection::vec(1usize..16, 200..320), any::<u64>());
    runner
        .run(&strategy, |(sizes, seed)| {
            let corpus = grouped_corpus(&sizes);
            let split = split_dataset(&corpus, DEFAULT_RATIOS, seed).unwrap();
            let repos = split.parts().map(SplitDataset::repos);
            for i in 0..3 {
                for j in i + 1..3 {
                    prop_assert!(repos[i].is_disjoint(&repos[j]));
                }
            }
            let total = corpus.len() as f64;
            let max_group = *sizes.iter().max().unwrap() as f64;
            for (part, ratio) in split.parts().iter().zip(DEFAULT_RATIOS) {
                prop_assert!((part.len() as f64 - ratio * total).abs() <= max_group);
            }
            let again = split_dataset(&corpus, DEFAULT_RATIOS, seed).unwrap();
            prop_assert_eq!(split_bytes(&split), split_bytes(&again));
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    // the CLI path too: same seed, identical files
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("all.jsonl");
    write_jsonl(&data, &synth_corpus(3000, 250, "s", 31)).unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let (code, _, err) = cli(["prepare", "--dataset", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "9"]);
        if code != 0 {
            return Err(format!("prepare failed: {err}"));
        }
        outputs.push(dir_bytes(&out));
    }
    if outputs[0] != outputs[1] {
        return Err("prepare output differs between identical runs".into());
    }
    within(Duration::from_secs(10), start, "split checks")?;
    Ok("48 randomized corpora with 200+ repos, CLI reruns identical".into())
}

// ---------------------------------------------------------------------------

fn bench(
    instances: &[BugInstance],
    script: MockScript,
    index: &Bm25Index,
    cfg: &PipelineConfig,
    dir: &Path,
) -> Vec<PipelineResult> {
    let backend = MockBackend::new(script).unwrap();
    let opts = BenchmarkOptions {
        workers: 4,
        run_dir: Some(dir.to_path_buf()),
        resume: false,
        clock: ClockKind::Logical,
    };
    run_benchmark(instances, cfg, &TemplateSet::default(), &backend, Some(index), &opts)
        .unwrap()
        .results
}

fn pipeline_determinism() -> Outcome {
    let cfg = PipelineConfig::default();
    if cfg.max_turns != 3 {
        return Err(format!("default turn budget is {}, expected 3", cfg.max_turns));
    }
    let train = synth_corpus(200, 40, "train", 41);
    let test = synth_corpus(50, 20, "test", 42);
    let index = Bm25Index::build(&train, Bm25Params::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let mut runs = Vec::new();
    for name in ["one", "two"] {
        let d = dir.path().join(name);
        let results = bench(&test, varied_script(&test), &index, &cfg, &d);
        runs.push(dir_bytes(&d));
        let budget = 4 + 2 * cfg.max_turns as usize;
        if let Some(r) = results.iter().find(|r| r.records.len() > budget) {
            return Err(format!("{} used {} calls, budget {budget}", r.instance_id, r.records.len()));
        }
        if let Some(r) = results.iter().find(|r| !r.is_completed()) {
            return Err(format!("{} failed: {:?}", r.instance_id, r.status));
        }
    }
    if runs[0] != runs[1] {
        return Err("two identical runs wrote different transcripts or results".into());
    }

    use Stage::*;
    let head = [Report, Pattern, Explain, Generate];
    let cases: [(&str, Vec<(u32, &str)>, Vec<(Stage, u32)>); 3] = [
        ("accept-at-turn-1", vec![(1, ACCEPT)], vec![(Review, 1)]),
        (
            "accept-at-turn-2",
            vec![(1, REJECT), (2, ACCEPT)],
            vec![(Review, 1), (Regenerate, 1), (Review, 2)],
        ),
        (
            "reject-always",
            vec![(1, REJECT), (2, REJECT), (3, REJECT)],
            vec![(Review, 1), (Regenerate, 1), (Review, 2), (Regenerate, 2), (Review, 3), (Regenerate, 3)],
        ),
    ];
    for (name, reviews, tail) in cases {
        let d = dir.path().join(name);
        let results = bench(&test, generic_script(&reviews), &index, &cfg, &d);
        let expected: Vec<(Stage, u32)> = head.iter().map(|&s| (s, 0)).chain(tail).collect();
        for r in &results {
            let got: Vec<(Stage, u32)> = r.records.iter().map(|x| (x.stage, x.turn)).collect();
            if got != expected {
                return Err(format!("{name}: {} ran {got:?}, expected {expected:?}", r.instance_id));
            }
        }
    }
    Ok("50 instances, byte-identical reruns, 3 scripted paths".into())
}

// ---------------------------------------------------------------------------

fn results_by_id(path: &Path) -> BTreeMap<String, ResultSummary> {
    read_results(path)
        .unwrap()
        .into_iter()
        .map(|r| (r.instance_id.clone(), r))
        .collect()
}

fn ablation_ladder() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = (synth_corpus(150, 30, "train", 51), synth_corpus(30, 10, "test", 52));
    let (train_p, test_p, script_p) = (dir.path().join("train.jsonl"), dir.path().join("test.jsonl"), dir.path().join("script.json"));
    write_jsonl(&train_p, &train).unwrap();
    write_jsonl(&test_p, &test).unwrap();
    write_script(&script_p, &varied_script(&test));
    let out = dir.path().join("ablate");
    let (code, stdout, err) = cli([
        "ablate", "--test", test_p.to_str().unwrap(), "--train", train_p.to_str().unwrap(),
        "--out", out.to_str().unwrap(), "--backend", "mock", "--script", script_p.to_str().unwrap(),
        "--workers", "4",
    ]);
    if code != 0 {
        return Err(format!("ablate exited {code}: {err}"));
    }
    let names = [
        "components-none", "components-tester", "components-tester-diagnosis", "components-all",
        "turns-0", "turns-1", "turns-2", "turns-3",
    ];
    for n in names {
        let results = results_by_id(&out.join(n).join(RESULTS_FILE));
        if results.len() != test.len() || results.values().any(|r| r.status != stagefix::orchestrator::PipelineStatus::Completed) {
            return Err(format!("{n}: incomplete results"));
        }
        if !stdout.lines().any(|l| l.starts_with(&format!("{n}\t"))) {
            return Err(format!("{n}: no row in the printed table"));
        }
    }
    let same = |a: &str, b: &str| {
        let (x, y) = (out.join(a), out.join(b));
        fs::read(x.join(RESULTS_FILE)).unwrap() == fs::read(y.join(RESULTS_FILE)).unwrap()
            && dir_bytes(&x.join(TRANSCRIPT_DIR)) == dir_bytes(&y.join(TRANSCRIPT_DIR))
    };
    if !same("components-tester-diagnosis", "turns-0") {
        return Err("reviewer-disabled run differs from the zero-turn run".into());
    }
    let tester = results_by_id(&out.join("components-tester").join(RESULTS_FILE));
    let diag = results_by_id(&out.join("components-tester-diagnosis").join(RESULTS_FILE));
    for (id, r) in &tester {
        if diag[id].backend_calls != r.backend_calls + 2 {
            return Err(format!("{id}: diagnosis added {} calls", diag[id].backend_calls as i64 - r.backend_calls as i64));
        }
    }
    Ok("4 component rows + 4 turn rows; reviewer-off == T=0; diagnosis = +2 calls".into())
}

// ---------------------------------------------------------------------------

fn write_results(path: &Path, rows: &[(String, String)]) {
    let mut text = String::new();
    for (id, patch) in rows {
        let r = ResultSummary {
            instance_id: id.clone(),
            final_patch: patch.clone(),
            candidates: vec![patch.clone()],
            passed_review: true,
            turns_used: 1,
            backend_calls: 5,
            stages: vec![],
            status: stagefix::orchestrator::PipelineStatus::Completed,
        };
        text.push_str(&serde_json::to_string(&r).unwrap());
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

fn report_reproduction() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let test = synth_corpus(2292, 300, "e", 61);
    let test_p = dir.path().join("test.jsonl");
    write_jsonl(&test_p, &test).unwrap();

    let run = dir.path().join("run");
    fs::create_dir_all(&run).unwrap();
    let rows: Vec<(String, String)> = test
        .iter()
        .enumerate()
        .map(|(i, x)| (x.id.clone(), if i < 501 { x.fixed_line.clone() } else { "return null;".into() }))
        .collect();
    write_results(&run.join(RESULTS_FILE), &rows);
    let (code, stdout, err) = cli(["eval", "--run", run.to_str().unwrap(), "--test", test_p.to_str().unwrap()]);
    if code != 0 {
        return Err(format!("eval exited {code}: {err}"));
    }
    let mut lines = stdout.lines();
    let header = lines.next().unwrap_or("");
    let row = lines.next().unwrap_or("");
    if !header.starts_with("Fix@1 (%)") || !row.starts_with("21.86\t") {
        return Err(format!("unexpected eval output {stdout:?}"));
    }

    let mut runs = Vec::new();
    for (name, fixed) in [
        ("A", (0..32).chain(1000..1256).collect::<HashSet<usize>>()),
        ("B", (0..100).collect::<HashSet<usize>>()),
    ] {
        let d = dir.path().join(name);
        fs::create_dir_all(&d).unwrap();
        let rows: Vec<(String, String)> = test
            .iter()
            .enumerate()
            .map(|(i, x)| (x.id.clone(), if fixed.contains(&i) { x.fixed_line.clone() } else { "return null;".into() }))
            .collect();
        write_results(&d.join(RESULTS_FILE), &rows);
        runs.push(d);
    }
    let csv_p = dir.path().join("overlap.csv");
    let (code, stdout, err) = cli([
        "overlap", "--run", runs[0].to_str().unwrap(), "--run", runs[1].to_str().unwrap(),
        "--names", "A,B", "--test", test_p.to_str().unwrap(), "--out", csv_p.to_str().unwrap(),
    ]);
    if code != 0 {
        return Err(format!("overlap exited {code}: {err}"));
    }
    let csv = fs::read_to_string(&csv_p).unwrap();
    if csv != "model,A,B\nA,256,0.32\nB,0.11,68\n" || stdout != csv {
        return Err(format!("unexpected overlap matrix {csv:?}"));
    }
    Ok("Fix@1 21.86 on 501/2292; rate(A,B)=0.32, unique(A)=256".into())
}

// ---------------------------------------------------------------------------

fn offline_benchmark() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let train = synth_corpus(1500, 300, "t", 71);
    let test = synth_corpus(2292, 400, "p", 72);
    let (train_p, test_p, script_p) = (dir.path().join("train.jsonl"), dir.path().join("test.jsonl"), dir.path().join("script.json"));
    write_jsonl(&train_p, &train).unwrap();
    write_jsonl(&test_p, &test).unwrap();
    write_script(&script_p, &varied_script(&test));
    let run = dir.path().join("run");
    let args = [
        "run", "--test", test_p.to_str().unwrap(), "--train", train_p.to_str().unwrap(),
        "--out", run.to_str().unwrap(), "--backend", "mock", "--script", script_p.to_str().unwrap(),
        "--workers", "8", "--resume",
    ];
    let (code, _, err) = cli(args);
    if code != 0 {
        return Err(format!("run exited {code}: {err}"));
    }
    within(Duration::from_secs(300), start, "2292-instance run")?;
    let first_results = fs::read(run.join(RESULTS_FILE)).unwrap();
    let first_transcripts = dir_bytes(&run.join(TRANSCRIPT_DIR));

    // drop a random tenth of the transcripts and resume
    let mut r = rng(73);
    let mut victims = HashSet::new();
    while victims.len() < test.len() / 10 {
        victims.insert(below(&mut r, test.len()));
    }
    for &v in &victims {
        fs::remove_file(stagefix::transcript::transcript_path(&run.join(TRANSCRIPT_DIR), &test[v].id)).unwrap();
    }
    let (code, _, err) = cli(args);
    if code != 0 {
        return Err(format!("resumed run exited {code}: {err}"));
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    if manifest["executed"] != victims.len() || manifest["resumed"] != test.len() - victims.len() {
        return Err(format!("resume executed {} and restored {}", manifest["executed"], manifest["resumed"]));
    }
    if fs::read(run.join(RESULTS_FILE)).unwrap() != first_results || dir_bytes(&run.join(TRANSCRIPT_DIR)) != first_transcripts {
        return Err("resumed run differs from the original".into());
    }

    let mut sink = Vec::new();
    let report = stagefix::cli::cmd_eval(
        &EvalArgs { run: run.clone(), test: test_p.clone(), k: 1, out: None },
        &mut sink,
    )
    .map_err(|e| e.to_string())?;
    let saved: EvalReport = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    if saved != report || !report.is_consistent() {
        return Err("report aggregates disagree with per-instance scores".into());
    }
    let results = results_by_id(&run.join(RESULTS_FILE));
    let n = test.len();
    let (mut exact, mut bleu, mut lev) = (0usize, 0.0f64, 0usize);
    for (x, s) in test.iter().zip(&report.per_instance) {
        let patch = &results[&x.id].final_patch;
        let e = token_texts(patch) == token_texts(&x.fixed_line);
        let (b, l) = (bleu4(patch, &x.fixed_line), levenshtein(patch, &x.fixed_line));
        if s.instance_id != x.id || s.exact != e || s.bleu4 != b || s.lev != l {
            return Err(format!("per-instance score mismatch for {}", x.id));
        }
        exact += e as usize;
        bleu += b;
        lev += l;
    }
    let fix = ((exact as f64 / n as f64) * 10000.0).round() / 100.0;
    if report.fix_at_k != fix
        || (report.mean_bleu4 - 100.0 * bleu / n as f64).abs() > 1e-9
        || (report.mean_lev - lev as f64 / n as f64).abs() > 1e-12
    {
        return Err(format!("aggregates {report:?} vs recomputed {fix}/{bleu}/{lev}", report = (report.fix_at_k, report.mean_bleu4, report.mean_lev)));
    }
    // fixed when the instance is accepted at turn 2 after the scripted
    // correct regeneration (i % 3 == 1), or accepted at turn 1 with a
    // correct first patch (i % 15 == 0): 764 + 153 of 2292
    if exact != 917 || report.fix_at_k != 40.01 {
        return Err(format!("expected 917 fixes (40.01%), got {exact} ({})", report.fix_at_k));
    }
    within(Duration::from_secs(300), start, "benchmark, resume and scoring")?;
    Ok(format!("2292 instances, 8 workers, {} transcripts resumed, Fix@1 {:.2}", victims.len(), report.fix_at_k))
}

// ---------------------------------------------------------------------------

fn http_config(endpoint: &str, model: &str) -> BackendConfig {
    BackendConfig {
        kind: BackendKind::Http,
        endpoint: Some(endpoint.into()),
        model_name: Some(model.into()),
        api_key_env: "STAGEFIX_ACCEPTANCE_UNSET_KEY".into(),
        timeout_secs: 30.0,
        max_retries: 3,
        retry_base_delay_ms: 5,
        min_interval_ms: 0,
        script: None,
    }
}

fn smoke_run(cfg: BackendConfig, clock: ClockKind) -> Result<(Vec<PipelineResult>, Vec<AuditRecord>), String> {
    let dir = tempfile::tempdir().unwrap();
    let train = synth_corpus(60, 12, "train", 81);
    let test = synth_corpus(5, 5, "test", 82);
    let index = Bm25Index::build(&train, Bm25Params::default()).unwrap();
    let http = HttpBackend::new(cfg).map_err(|e| e.to_string())?;
    let audit_p = dir.path().join("audit.jsonl");
    let backend = Audited::to_file(http, &audit_p).unwrap();
    let opts = BenchmarkOptions { workers: 1, run_dir: Some(dir.path().to_path_buf()), resume: false, clock };
    let results = run_benchmark(&test, &PipelineConfig::default(), &TemplateSet::default(), &backend, Some(&index), &opts)
        .map_err(|e| e.to_string())?
        .results;
    drop(backend);
    let audit = fs::read_to_string(&audit_p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    Ok((results, audit))
}

fn verdicts(results: &[PipelineResult]) -> (usize, usize) {
    let mut parsed = 0;
    let mut failsafe = 0;
    for r in results {
        if let Some(reply) = r.records.iter().rev().find(|x| x.stage == Stage::Review).and_then(|x| x.reply()) {
            let first = reply.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim().to_ascii_uppercase();
            if first == "VERDICT: CORRECT" || first == "VERDICT: INCORRECT" {
                parsed += 1;
            } else if !parse_verdict(reply).passed {
                failsafe += 1;
            }
        }
    }
    (parsed, failsafe)
}

fn backend_smoke() -> Outcome {
    let server = FakeServer::start(Box::new(|n, body| {
        if n < 2 {
            (503, r#"{"error":"overloaded"}"#.into())
        } else {
            (200, completion_body(&universal_reply(body)))
        }
    }));
    let (results, audit) = smoke_run(http_config(&server.url, "fake-model"), ClockKind::Logical)?;
    if let Some(r) = results.iter().find(|r| !r.is_completed()) {
        return Err(format!("{} failed: {:?}", r.instance_id, r.status));
    }
    let requests = server.requests.lock().unwrap().clone();
    if requests.len() != audit.len() + 2 {
        return Err(format!("{} HTTP requests for {} completions; expected 2 retries", requests.len(), audit.len()));
    }
    let caps = PipelineConfig::default().caps;
    for a in &audit {
        if a.max_tokens != caps.for_stage(a.stage) || a.error.is_some() {
            return Err(format!("bad audit record {a:?}"));
        }
    }
    let mut sent: BTreeMap<u64, usize> = BTreeMap::new();
    for (body, auth) in &requests {
        if body["temperature"] != 0.0 || body["model"] != "fake-model" || auth.is_some() {
            return Err(format!("unexpected request {body}"));
        }
        *sent.entry(body["max_tokens"].as_u64().unwrap_or(0)).or_default() += 1;
    }
    let mut expected: BTreeMap<u64, usize> = BTreeMap::new();
    for a in &audit {
        *expected.entry(a.max_tokens as u64).or_default() += 1;
    }
    *expected.entry(caps.for_stage(audit[0].stage) as u64).or_default() += 2;
    if sent != expected {
        return Err(format!("max_tokens sent {sent:?}, expected {expected:?}"));
    }
    let (parsed, failsafe) = verdicts(&results);
    if parsed + failsafe < 3 {
        return Err(format!("only {parsed} parseable verdicts"));
    }
    let mut detail = format!("local endpoint: {} completions, 2 retried 503s, {parsed}/5 verdicts", audit.len());

    match (std::env::var("STAGEFIX_LIVE_ENDPOINT"), std::env::var("STAGEFIX_LIVE_MODEL")) {
        (Ok(endpoint), Ok(model)) => {
            let mut cfg = http_config(&endpoint, &model);
            cfg.api_key_env = std::env::var("STAGEFIX_LIVE_KEY_ENV").unwrap_or_else(|_| "OPENAI_API_KEY".into());
            cfg.retry_base_delay_ms = 1000;
            let (results, _) = smoke_run(cfg, ClockKind::Wall)?;
            let done = results.iter().filter(|r| r.is_completed()).count();
            let (parsed, failsafe) = verdicts(&results);
            if done < 5 || parsed + failsafe < 3 {
                return Err(format!("live endpoint: {done}/5 completed, {parsed} parsed verdicts, {failsafe} fail-safe"));
            }
            detail.push_str(&format!("; live endpoint: {parsed} parsed, {failsafe} fail-safe"));
        }
        _ => {
            println!("criterion 8 (live endpoint): SKIP (set STAGEFIX_LIVE_ENDPOINT and STAGEFIX_LIVE_MODEL to run)");
        }
    }
    Ok(detail)
}
