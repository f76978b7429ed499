//! One function per acceptance criterion. Each returns a short summary on
//! success and the first counterexample on failure.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unlearn_core::backend::mock::{
    JudgeFixture, JudgePair, MockBackend, MockFixture, VerdictFixture,
};
use unlearn_core::correction::{
    assemble_correction_prompt, parse_correction_prompt, parse_corrector_output, CorrectorOutput,
    DetectionMethod, Judgement, CORRECTION_SYSTEM_PROMPT, JUDGE_LINE, REVISION_LINE,
};
use unlearn_core::dataset::{
    build_contrastive_sets, emit_training_file, expand_mcq, majority, parse_training_file,
    read_training_file, JudgeLabel, LeakageJudge, QAPair, QaSource, TrainingTuple,
};
use unlearn_core::evaluation::{
    self, continual_run, exact_match, plausibility, plausibility_from_logps, rouge_l_recall,
    validity, EvalConfig, ProbeItem, ProbeSplit, ScheduleStep,
};
use unlearn_core::exclusions::Generation;
use unlearn_core::gradcheck::{gradcheck_all, GradcheckConfig};
use unlearn_core::numeric::sigmoid;
use unlearn_core::retrieval::{query_text, TokenizedDoc};
use unlearn_core::training::{
    entropy_reg, judge_loss, revision_loss, reward, stage1_loss, stage2_loss, suppression_loss,
    JudgeLossInputs, PositionDistributions, PreferenceLogProbs, SequenceLogProbs,
    StageCoefficients,
};
use unlearn_core::{
    Bm25Index, Bm25Params, Branch, CorrectionPipeline, ExclusionRecord, ExclusionSet,
    ExclusionStore, GenerationParams, PipelineConfig, RecordDraft, Route,
};

use super::oracle;

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {{
        // NaN comparisons are false and must fail the check
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    }};
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .unwrap()
}

pub const LOSS_TOL: f64 = 1e-9;
pub const LOSS_CASES: usize = 1000;

fn logps(r: &mut impl Rng, min_len: usize, max_len: usize) -> Vec<f64> {
    let n = r.random_range(min_len..=max_len);
    (0..n).map(|_| -r.random_range(0.0..6.0)).collect()
}

fn dists(r: &mut impl Rng) -> Vec<Vec<f64>> {
    let positions = r.random_range(1..=8);
    let vocab = r.random_range(2..=12);
    (0..positions)
        .map(|_| {
            oracle::softmax(
                &(0..vocab)
                    .map(|_| r.random_range(-4.0..4.0))
                    .collect::<Vec<_>>(),
            )
        })
        .collect()
}

fn close(name: &str, i: usize, got: f64, want: f64) -> Result<(), String> {
    if (got - want).abs() <= LOSS_TOL {
        Ok(())
    } else {
        Err(format!(
            "{name} case {i}: got {got:.17e}, oracle {want:.17e}"
        ))
    }
}

/// Every loss against its oracle on 1,000 random inputs, plus the exact
/// identities.
pub fn loss_oracles(seed: u64) -> Check {
    let mut r = rng(seed);
    let c = StageCoefficients::STAGE2;
    let mut worst: f64 = 0.0;
    let mut track = |got: f64, want: f64| worst = worst.max((got - want).abs());
    for i in 0..LOSS_CASES {
        let delta = r.random_range(-12.0..12.0);
        let leak = r.random_bool(0.5);
        let lpj = -r.random_range(0.0..5.0);
        let j = JudgeLossInputs::new(delta, leak, lpj).map_err(|e| e.to_string())?;
        let got = judge_loss(&j);
        close("judge_loss", i, got, oracle::judge_loss(delta, leak, lpj))?;
        track(got, oracle::judge_loss(delta, leak, lpj));

        let y = logps(&mut r, 0, 40);
        let got = revision_loss(&SequenceLogProbs::new(y.clone()).unwrap());
        close("revision_loss", i, got, oracle::revision_loss(&y))?;
        track(got, oracle::revision_loss(&y));

        let y = logps(&mut r, 1, 40);
        let draft_len = r.random_range(1..=40);
        let got = reward(&SequenceLogProbs::new(y.clone()).unwrap(), draft_len)
            .map_err(|e| e.to_string())?;
        close("reward", i, got, oracle::reward(&y, draft_len).unwrap())?;

        let (rp, rn) = (-r.random_range(0.0..6.0), -r.random_range(0.0..6.0));
        let l_rev = r.random_range(0.0..80.0);
        let coeffs = StageCoefficients {
            beta: r.random_range(0.1..5.0),
            gamma: r.random_range(0.0..5.0),
            lambda_lm: r.random_range(0.0..1.0),
            ..c
        };
        let got = suppression_loss(rp, rn, &coeffs, l_rev).map_err(|e| e.to_string())?;
        let want =
            oracle::suppression_loss(rp, rn, coeffs.beta, coeffs.gamma, coeffs.lambda_lm, l_rev);
        close("suppression_loss", i, got, want)?;

        let d = dists(&mut r);
        let got = entropy_reg(&PositionDistributions::new(d.clone()).map_err(|e| e.to_string())?);
        close("entropy_reg", i, got, oracle::entropy_reg(&d))?;

        let y = logps(&mut r, 1, 30);
        let b = stage1_loss(&j, &SequenceLogProbs::new(y.clone()).unwrap());
        let want = oracle::judge_loss(delta, leak, lpj) + oracle::revision_loss(&y);
        close("stage1_total", i, b.stage1_total, want)?;

        let pos = logps(&mut r, 1, 30);
        let neg = logps(&mut r, 1, 30);
        let pref = PreferenceLogProbs {
            positive: SequenceLogProbs::new(pos.clone()).unwrap(),
            negative: SequenceLogProbs::new(neg.clone()).unwrap(),
        };
        let b = stage2_loss(
            &pref,
            &j,
            &PositionDistributions::new(d.clone()).unwrap(),
            &c,
        )
        .map_err(|e| e.to_string())?;
        let want = oracle::suppression_loss(
            oracle::reward(&pos, neg.len()).unwrap(),
            oracle::reward(&neg, neg.len()).unwrap(),
            c.beta,
            c.gamma,
            c.lambda_lm,
            oracle::revision_loss(&pos),
        ) + c.lambda_judge * oracle::judge_loss(delta, leak, lpj)
            + c.lambda_ent * oracle::entropy_reg(&d);
        close("stage2_total", i, b.stage2_total, want)?;
    }

    // Exact identities.
    ensure!(
        sigmoid(9f64.ln()) == 0.9,
        "sigma(ln 9) = {:.17} != 0.9",
        sigmoid(9f64.ln())
    );
    let j = JudgeLossInputs::new(9f64.ln(), true, 0.0).unwrap();
    ensure!(
        judge_loss(&j) == -0.5 * 0.9f64.ln(),
        "judge loss at sigma = 0.9 is {}",
        judge_loss(&j)
    );
    for v in [2usize, 4, 8, 16, 32] {
        let uniform = vec![vec![1.0 / v as f64; v]; 3];
        let got = entropy_reg(&PositionDistributions::new(uniform).unwrap());
        // Summing V equal terms rounds once V exceeds 16, so allow a few ulps.
        let want = -(v as f64).ln();
        ensure!(
            (got - want).abs() <= 4.0 * f64::EPSILON * want.abs(),
            "uniform entropy over {v}: {got} != -ln {v}"
        );
    }
    // beta * (r+ - r-) = gamma cancels the margin.
    let sup = suppression_loss(-1.0, -2.0, &c, 0.0).unwrap();
    ensure!(
        sup == std::f64::consts::LN_2,
        "margin cancellation gives {sup:.17}, not ln 2"
    );
    Ok(format!("{LOSS_CASES} cases x 7 quantities, max |err| on judge/revision {worst:.1e}; identities hold"))
}

pub fn gradient_checks() -> Check {
    let cfg = GradcheckConfig::default();
    ensure!(
        cfg.instances >= 100,
        "only {} instances configured",
        cfg.instances
    );
    let reports = gradcheck_all(&cfg).map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    for rep in &reports {
        ensure!(
            rep.passed && rep.instances >= 100,
            "{}: {} failures over {} instances, max rel err {:.3e}",
            rep.loss.name(),
            rep.failure_count,
            rep.instances,
            rep.max_rel_error
        );
        summary.push(format!("{} {:.1e}", rep.loss.name(), rep.max_rel_error));
    }
    Ok(format!(
        "{} losses x {} instances at tol {:.0e}: {}",
        reports.len(),
        cfg.instances,
        cfg.tolerance,
        summary.join(", ")
    ))
}

const VOCAB: &[&str] = &[
    "alpha", "beta", "gamma", "delta", "river", "stone", "paris", "novel", "author", "born",
    "wrote", "the", "of", "Lantern", "ORCHARD", "glass", "1911", "x7", "zeta", "harbour", "dusk",
    "song", "city", "north",
];

fn random_text(r: &mut impl Rng, min: usize, max: usize) -> String {
    let n = r.random_range(min..=max);
    let seps = [" ", "  ", ", ", "-", "\n", "'s ", ". "];
    let mut s = String::new();
    for i in 0..n {
        if i > 0 {
            s.push_str(seps[r.random_range(0..seps.len())]);
        }
        // skewed draw so some terms are frequent
        let idx = (r.random_range(0.0f64..1.0).powi(2) * VOCAB.len() as f64) as usize;
        s.push_str(VOCAB[idx.min(VOCAB.len() - 1)]);
    }
    s
}

pub const BM25_CORPORA: usize = 50;
pub const BM25_QUERIES: usize = 20;
pub const BM25_INTERLEAVINGS: usize = 200;

/// Ranked retrieval equals exhaustive scoring, and incremental maintenance
/// equals a batch build.
pub fn bm25_oracle(seed: u64) -> Check {
    let mut r = rng(seed);
    let params = Bm25Params::default();
    let mut compared = 0usize;
    for corpus in 0..BM25_CORPORA {
        let n_docs = r.random_range(1..=200);
        let docs: Vec<(String, String)> = (0..n_docs)
            .map(|i| {
                (
                    format!("d{:03}", (i * 37 + corpus) % 1000),
                    random_text(&mut r, 0, 25),
                )
            })
            .collect::<BTreeMap<_, _>>()
            .into_iter()
            .collect();
        let mut index = Bm25Index::new(params);
        for (id, text) in &docs {
            index.insert(TokenizedDoc::new(id, text));
        }
        for q in 0..BM25_QUERIES {
            let query = random_text(&mut r, 1, 6);
            let draft = random_text(&mut r, 0, 10);
            let k = r.random_range(1..=docs.len() + 2);
            let got = index.retrieve_top_k(&query, &draft, k);
            let want = oracle::bm25_rank(&docs, &query_text(&query, &draft), params.k1, params.b);
            let want = &want[..k.min(want.len())];
            ensure!(
                got.len() == want.len(),
                "corpus {corpus} query {q}: {} results, oracle {}",
                got.len(),
                want.len()
            );
            for (rank, (g, w)) in got.iter().zip(want).enumerate() {
                ensure!(
                    g.record_id == w.0
                        && (g.score - w.1).abs() <= 1e-9 * w.1.abs().max(1.0)
                        && g.rank == rank + 1,
                    "corpus {corpus} query {q} rank {}: got ({}, {}), oracle ({}, {})",
                    rank + 1,
                    g.record_id,
                    g.score,
                    w.0,
                    w.1
                );
            }
            compared += 1;
        }
    }

    // Incremental vs batch over random add/remove interleavings.
    let mut universe = ExclusionStore::new();
    let drafts: Vec<RecordDraft> = (0..80)
        .map(|i| {
            RecordDraft::new(random_text(&mut r, 1, 8), random_text(&mut r, 1, 8))
                .with_id(format!("u{i:02}"))
        })
        .collect();
    universe.add(&drafts).map_err(|e| e.to_string())?;
    let all: Vec<&ExclusionRecord> = universe.records().collect();
    for round in 0..BM25_INTERLEAVINGS {
        let mut live: BTreeSet<usize> = BTreeSet::new();
        let mut inc = Bm25Index::new(params);
        for _ in 0..r.random_range(1..60) {
            let i = r.random_range(0..all.len());
            if live.contains(&i) && r.random_bool(0.6) {
                inc.update(std::iter::empty(), [all[i].id.as_str()]);
                live.remove(&i);
            } else {
                inc.update([all[i]], std::iter::empty());
                live.insert(i);
            }
        }
        let batch = Bm25Index::build(params, live.iter().map(|&i| all[i]));
        ensure!(
            inc.stats() == batch.stats(),
            "interleaving {round}: statistics differ from batch build"
        );
        let query = oracle::tokenize(&random_text(&mut r, 1, 6));
        let (a, b) = (inc.rank_all(&query), batch.rank_all(&query));
        ensure!(
            a == b,
            "interleaving {round}: rankings differ from batch build"
        );
    }
    Ok(format!(
        "{compared} queries over {BM25_CORPORA} corpora match exhaustive scoring; {BM25_INTERLEAVINGS} interleavings equal batch"
    ))
}

fn pipeline_with(
    backend: Arc<MockBackend>,
    records: &[RecordDraft],
    tau: f64,
) -> Result<CorrectionPipeline, String> {
    let mut store = ExclusionStore::new();
    store.add(records).map_err(|e| e.to_string())?;
    let set = Arc::new(ExclusionSet::new(store, Bm25Params::default()));
    let cfg = PipelineConfig {
        tau,
        ..PipelineConfig::default()
    };
    CorrectionPipeline::new(backend, set, cfg).map_err(|e| e.to_string())
}

pub const BRANCH_SCENARIOS: usize = 400;

/// Revised iff σ(Δ) > τ; passthrough returns the draft unchanged; revision
/// generation happens only on leaked decisions; σ(Δ) = τ passes through.
pub fn branching(seed: u64) -> Check {
    let mut r = rng(seed);
    let rt = runtime();
    let (mut revised, mut passed, mut boundary) = (0, 0, 0);
    for s in 0..BRANCH_SCENARIOS {
        let yes = -r.random_range(0.001..8.0);
        let no = -r.random_range(0.001..8.0);
        let at_boundary = s % 8 == 0;
        let tau = if at_boundary {
            sigmoid(yes - no)
        } else {
            r.random_range(0.02..0.98)
        };
        if !(tau > 0.0 && tau < 1.0) {
            continue;
        }
        let query = format!("question {s}: {}", random_text(&mut r, 2, 6));
        let draft = random_text(&mut r, 1, 12);
        let mut f = MockFixture::default();
        f.drafts.insert(query.clone(), draft.clone());
        f.judge = JudgeFixture::Table {
            rules: Vec::new(),
            default: JudgePair { yes, no },
        };
        let backend = Arc::new(MockBackend::new(f));
        let records: Vec<RecordDraft> = (0..r.random_range(1..6))
            .map(|_| RecordDraft::new(random_text(&mut r, 1, 6), random_text(&mut r, 1, 6)))
            .collect();
        let p = pipeline_with(backend.clone(), &records, tau)?;
        let out = rt
            .block_on(p.correct(&query))
            .map_err(|e| format!("scenario {s}: {e}"))?;
        let d = &out.decision;
        let expect_leak = !at_boundary && oracle::sigma(yes - no) > tau;
        let calls = backend.calls();
        ensure!(
            d.method == DetectionMethod::Logit,
            "scenario {s}: expected the logit path"
        );
        ensure!(
            d.leaked == expect_leak,
            "scenario {s}: leaked={} but sigma={} tau={tau}",
            d.leaked,
            oracle::sigma(yes - no)
        );
        ensure!(
            out.draft == draft,
            "scenario {s}: draft not recorded verbatim"
        );
        match out.branch {
            Branch::Revised => {
                revised += 1;
                ensure!(
                    d.sigma_delta > d.tau,
                    "scenario {s}: revised with sigma {} <= tau {}",
                    d.sigma_delta,
                    d.tau
                );
                ensure!(
                    out.backend_calls.revise == 1 && calls.continue_with_prefix == 1,
                    "scenario {s}: revision call count"
                );
                ensure!(
                    out.backend_calls.total() == 3,
                    "scenario {s}: {} calls on revised branch",
                    out.backend_calls.total()
                );
            }
            Branch::Passthrough => {
                passed += 1;
                ensure!(
                    out.final_response.as_bytes() == draft.as_bytes(),
                    "scenario {s}: passthrough altered the draft"
                );
                ensure!(
                    out.backend_calls.revise == 0 && calls.continue_with_prefix == 0,
                    "scenario {s}: revision on passthrough"
                );
                ensure!(
                    out.backend_calls.total() == 2,
                    "scenario {s}: {} calls on passthrough",
                    out.backend_calls.total()
                );
                if at_boundary {
                    ensure!(
                        d.sigma_delta == d.tau,
                        "scenario {s}: boundary lost, sigma {} tau {}",
                        d.sigma_delta,
                        d.tau
                    );
                    boundary += 1;
                }
            }
        }
        ensure!(
            calls.generate == 1 && calls.judge_probe == 1,
            "scenario {s}: unexpected draft/judge calls {calls:?}"
        );
        ensure!(
            d.leaked == (out.branch == Branch::Revised),
            "scenario {s}: branch disagrees with decision"
        );
    }
    ensure!(
        revised > 0 && passed > 0 && boundary > 0,
        "scenario mix degenerate: {revised}/{passed}/{boundary}"
    );
    Ok(format!(
        "{revised} revised, {passed} passthrough ({boundary} at sigma = tau)"
    ))
}

/// Embedded at compile time so the harness works from any crate.
fn golden(name: &str) -> String {
    match name {
        "x_correct.txt" => include_str!("../golden/x_correct.txt"),
        "system_prompt.txt" => include_str!("../golden/system_prompt.txt"),
        "corrector_outputs.json" => include_str!("../golden/corrector_outputs.json"),
        other => panic!("unknown golden file {other}"),
    }
    .to_string()
}

pub fn render_output(o: &CorrectorOutput) -> String {
    let j = match o.judge {
        Judgement::Yes => "Yes",
        Judgement::No => "No",
    };
    match &o.revised {
        Some(rev) => format!("{JUDGE_LINE} {j}\n{REVISION_LINE} {rev}"),
        None => format!("{JUDGE_LINE} {j}"),
    }
}

/// Assembled prompt equals the golden file byte for byte; corrector outputs
/// parse as recorded and survive a render/parse round trip.
pub fn prompt_fidelity() -> Check {
    let rec = |id: &str, q: &str, a: &str| ExclusionRecord {
        id: id.into(),
        question: q.into(),
        answer: a.into(),
        tags: Vec::new(),
        created_version: 1,
    };
    let r1 = rec(
        "r1",
        "Where did Elena Voss study music?",
        "She studied at the Zurich Conservatory.",
    );
    let r2 = rec(
        "r2",
        "What is the title of Elena Voss's first novel?",
        "The Glass Orchard.",
    );
    let query = "Where did Elena Voss study? Answer as {response} if unsure.";
    let draft = "Elena Voss studied at the Zurich Conservatory.";
    let bundle =
        assemble_correction_prompt(query, draft, &[&r1, &r2]).map_err(|e| e.to_string())?;
    let want = golden("x_correct.txt");
    if bundle.x_correct != want {
        let at = bundle
            .x_correct
            .bytes()
            .zip(want.bytes())
            .position(|(a, b)| a != b)
            .unwrap_or(want.len().min(bundle.x_correct.len()));
        return Err(format!("x_correct differs from golden at byte {at}"));
    }
    ensure!(
        bundle.system == golden("system_prompt.txt"),
        "system prompt differs from golden"
    );
    ensure!(
        bundle.system == CORRECTION_SYSTEM_PROMPT,
        "bundle system prompt not the template"
    );
    let parsed =
        parse_correction_prompt(&bundle.x_correct).ok_or("assembled prompt does not parse back")?;
    ensure!(
        parsed.query == query
            && parsed.response == draft
            && parsed.reference_answers == vec![r1.answer.clone(), r2.answer.clone()],
        "prompt parse round trip lost content: {parsed:?}"
    );

    let cases: Vec<serde_json::Value> =
        serde_json::from_str(&golden("corrector_outputs.json")).map_err(|e| e.to_string())?;
    for (i, case) in cases.iter().enumerate() {
        let raw = case["raw"].as_str().unwrap();
        let got = parse_corrector_output(raw);
        match case["judge"].as_str() {
            None => ensure!(
                got.is_err(),
                "golden output {i} should be rejected: {raw:?}"
            ),
            Some(j) => {
                let want = CorrectorOutput {
                    judge: if j == "yes" {
                        Judgement::Yes
                    } else {
                        Judgement::No
                    },
                    revised: case["revised"].as_str().map(str::to_string),
                };
                let got = got.map_err(|e| format!("golden output {i}: {e}"))?;
                ensure!(
                    got == want,
                    "golden output {i}: parsed {got:?}, expected {want:?}"
                );
                let again =
                    parse_corrector_output(&render_output(&got)).map_err(|e| e.to_string())?;
                ensure!(
                    again == got,
                    "golden output {i}: render/parse round trip changed it"
                );
            }
        }
    }
    Ok(format!(
        "x_correct byte-identical ({} bytes); {} golden outputs parse and round-trip",
        want.len(),
        cases.len()
    ))
}

/// ROUGE-L vs LCS oracles, plausibility under uniform scorers with the
/// 15-token cut, EM ⇒ validity, and Maj@5 arithmetic.
pub fn metric_oracles(seed: u64) -> Check {
    let mut r = rng(seed);
    let words = ["a", "b", "c", "d", "e", "A", "B"];
    let gen = |r: &mut ChaCha8Rng, max: usize| -> String {
        let n = r.random_range(0..=max);
        (0..n)
            .map(|_| words[r.random_range(0..words.len())])
            .collect::<Vec<_>>()
            .join(if r.random_bool(0.8) { " " } else { "  \t" })
    };
    let mut rouge_cases = 0;
    for i in 0..3000 {
        let (refr, hyp) = if i < 1500 {
            (gen(&mut r, 12), gen(&mut r, 12))
        } else {
            (gen(&mut r, 50), gen(&mut r, 50))
        };
        let (rt, ht) = (
            oracle::whitespace_lower(&refr),
            oracle::whitespace_lower(&hyp),
        );
        let lcs = if rt.len().min(ht.len()) <= 12 {
            oracle::lcs_exhaustive(&rt, &ht)
        } else {
            oracle::lcs_recursive(&rt, &ht)
        };
        ensure!(
            evaluation::lcs_len(&rt, &ht) == lcs,
            "LCS case {i}: {} vs oracle {lcs}",
            evaluation::lcs_len(&rt, &ht)
        );
        let want = if rt.is_empty() {
            0.0
        } else {
            lcs as f64 / rt.len() as f64
        };
        let got = rouge_l_recall(&refr, &hyp);
        ensure!(
            got == want,
            "ROUGE-L case {i}: {got} vs {want} for {refr:?} / {hyp:?}"
        );
        rouge_cases += 1;
    }

    let rt = runtime();
    for v in [2usize, 4, 10, 32, 50_000] {
        let lp = -(v as f64).ln();
        let mut f = MockFixture {
            token_logprob: lp,
            ..MockFixture::default()
        };
        f.token_logprobs.insert("tail".into(), -40.0);
        let scorer = MockBackend::new(f);
        for len in [1usize, 7, 15, 16, 40] {
            let response: Vec<&str> = (0..len)
                .map(|i| if i < 15 { "tok" } else { "tail" })
                .collect();
            let got = rt
                .block_on(plausibility(&scorer, "prompt", &response.join(" "), 15))
                .map_err(|e| e.to_string())?;
            let want = 1.0 / v as f64;
            ensure!(
                ((got - want) / want).abs() <= 1e-12,
                "uniform V={v} len={len}: {got} vs {want}"
            );
        }
    }
    ensure!(
        plausibility_from_logps(&[], 15) == 0.0,
        "empty response must score 0"
    );
    for i in 0..1000 {
        let n = r.random_range(1..40);
        let lps: Vec<f64> = (0..n).map(|_| -r.random_range(0.0..20.0)).collect();
        let (got, want) = (
            plausibility_from_logps(&lps, 15),
            oracle::plausibility(&lps, 15),
        );
        ensure!(
            ((got - want) / want).abs() <= 1e-9,
            "plausibility case {i}: {got} vs {want}"
        );
    }

    let decorate = |r: &mut ChaCha8Rng, s: &str| -> String {
        let mut out = s.to_string();
        if r.random_bool(0.5) {
            out = out.to_uppercase();
        }
        if r.random_bool(0.5) {
            out = format!("  {out}.");
        }
        if r.random_bool(0.3) {
            out = format!("\"{out}\"\n");
        }
        out
    };
    let mut em_hits = 0;
    for i in 0..5000 {
        let c = r.random_range(2..6);
        let choices: Vec<String> = (0..c).map(|_| random_text(&mut r, 1, 3)).collect();
        let gold = choices[r.random_range(0..c)].clone();
        let generated = if r.random_bool(0.6) {
            let pick = r.random_range(0..c);
            decorate(&mut r, &choices[pick])
        } else {
            random_text(&mut r, 1, 4)
        };
        if exact_match(&generated, &gold) {
            em_hits += 1;
            ensure!(
                validity(&generated, &choices),
                "fuzz case {i}: EM without validity for {generated:?}"
            );
        }
    }
    ensure!(
        em_hits > 500,
        "fuzzer produced too few exact matches ({em_hits})"
    );

    for pattern in 0u32..32 {
        let votes: Vec<bool> = (0..5).map(|b| pattern & (1 << b) != 0).collect();
        let want = if oracle::majority_leak(&votes) {
            JudgeLabel::Leakage
        } else {
            JudgeLabel::NoLeakage
        };
        ensure!(majority(&votes) == want, "majority of {votes:?}");
        let f = MockFixture {
            verdicts: Some(VerdictFixture::Script {
                votes: votes.clone(),
            }),
            ..MockFixture::default()
        };
        let backend = MockBackend::new(f);
        let judge = LeakageJudge {
            backend: &backend,
            route: Route::Base,
            params: GenerationParams::default(),
            k: 5,
        };
        let v = rt
            .block_on(judge.label("q", "a", "r"))
            .map_err(|e| e.to_string())?;
        ensure!(
            v.votes == votes && v.label == want,
            "Maj@5 over {votes:?} gave {:?}",
            v.label
        );
    }
    Ok(format!("{rouge_cases} ROUGE-L pairs, uniform plausibility exact to 1e-12, {em_hits} EM hits all valid, 32 vote patterns"))
}

pub const MCQ_QUESTIONS: usize = 6508;
pub const MCQ_EXPECTED_CASES: usize = 26032;

fn random_tuple(r: &mut ChaCha8Rng, i: usize) -> TrainingTuple {
    let odd = [
        "é",
        "\"",
        "\\",
        "\n",
        "{query}",
        "😀",
        "\t",
        "(1) Information Leakage: Yes",
    ];
    let mut text = |lo, hi| {
        let mut s = random_text(r, lo, hi);
        if r.random_bool(0.3) {
            s.push_str(odd[r.random_range(0..odd.len())]);
        }
        s
    };
    let recs: Vec<ExclusionRecord> = (0..1 + i % 4)
        .map(|j| ExclusionRecord {
            id: format!("k{i}-{j}"),
            question: text(1, 6),
            answer: text(1, 6),
            tags: vec![],
            created_version: 1,
        })
        .collect();
    let refs: Vec<&ExclusionRecord> = recs.iter().collect();
    let query = text(1, 8);
    let draft = text(1, 10);
    if i.is_multiple_of(2) {
        TrainingTuple::new(
            format!("t{i}"),
            &query,
            &draft,
            &refs,
            JudgeLabel::NoLeakage,
            &draft,
        )
        .unwrap()
    } else {
        let target = format!("{} (revised)", text(1, 6));
        TrainingTuple::new(
            format!("t{i}"),
            &query,
            &draft,
            &refs,
            JudgeLabel::Leakage,
            &target,
        )
        .unwrap()
    }
}

/// MCQ expansion arithmetic at corpus scale, contrastive sets against a
/// brute-force labeling, and a lossless training-file round trip.
pub fn dataset_construction(seed: u64) -> Check {
    let mut r = rng(seed);
    let mut cases = 0;
    for q in 0..MCQ_QUESTIONS {
        let choices: Vec<String> = (0..4).map(|c| format!("option {c} for item {q}")).collect();
        let correct = r.random_range(0..4);
        let out =
            expand_mcq(&format!("Question {q}?"), &choices, correct).map_err(|e| e.to_string())?;
        ensure!(out.len() == 4, "question {q}: {} cases", out.len());
        let leaks: Vec<_> = out
            .iter()
            .filter(|c| c.label == JudgeLabel::Leakage)
            .collect();
        ensure!(
            leaks.len() == 1 && leaks[0].response == choices[correct],
            "question {q}: leaking case wrong"
        );
        let first_wrong = if correct == 0 {
            &choices[1]
        } else {
            &choices[0]
        };
        ensure!(
            &leaks[0].target == first_wrong,
            "question {q}: target is not the first incorrect choice"
        );
        ensure!(
            out.iter()
                .filter(|c| c.label == JudgeLabel::NoLeakage)
                .all(|c| c.target == c.response && c.response != choices[correct]),
            "question {q}: non-leaking case malformed"
        );
        cases += out.len();
    }
    ensure!(
        cases == MCQ_EXPECTED_CASES,
        "{MCQ_QUESTIONS} questions gave {cases} cases, expected {MCQ_EXPECTED_CASES}"
    );

    let params = Bm25Params::default();
    let mut checked = 0;
    for round in 0..40 {
        let n = r.random_range(10..60);
        let drafts: Vec<RecordDraft> = (0..n)
            .map(|i| {
                RecordDraft::new(random_text(&mut r, 2, 8), random_text(&mut r, 2, 7))
                    .with_id(format!("c{i:02}"))
            })
            .collect();
        let mut store = ExclusionStore::new();
        store.add(&drafts).map_err(|e| e.to_string())?;
        let generation = Generation {
            number: 0,
            index: Bm25Index::build(params, store.records()),
            store,
        };
        let gold = &drafts[r.random_range(0..n)];
        let pair = QAPair::new(
            gold.id.clone().unwrap(),
            &gold.question,
            &gold.answer,
            QaSource::QaCorpus,
        )
        .unwrap();
        let mut draft = random_text(&mut r, 2, 10);
        for _ in 0..r.random_range(0..3) {
            draft.push(' ');
            draft.push_str(&drafts[r.random_range(0..n)].answer);
        }
        let sets = match build_contrastive_sets(&pair, &draft, &generation, 5, 5) {
            Ok(s) => s,
            Err(e) if n < 10 => {
                let _ = e;
                continue;
            }
            Err(e) => return Err(format!("round {round}: {e}")),
        };
        let docs: Vec<(String, String)> = generation
            .store
            .records()
            .map(|x| (x.id.clone(), x.document_text()))
            .collect();
        let ranking = oracle::bm25_rank(
            &docs,
            &query_text(&pair.question, &draft),
            params.k1,
            params.b,
        );
        let label = |id: &str| {
            let rec = generation.store.get(id).unwrap();
            id == pair.id || oracle::overlaps(&rec.answer, &draft)
        };
        let want_pos: Vec<String> = ranking
            .iter()
            .filter(|(id, _)| label(id))
            .take(5)
            .map(|(id, _)| id.clone())
            .collect();
        let want_neg: Vec<String> = ranking
            .iter()
            .filter(|(id, _)| !label(id))
            .take(5)
            .map(|(id, _)| id.clone())
            .collect();
        ensure!(
            sets.positives == want_pos,
            "round {round}: positives {:?} vs oracle {want_pos:?}",
            sets.positives
        );
        ensure!(
            sets.negatives == want_neg,
            "round {round}: negatives {:?} vs oracle {want_neg:?}",
            sets.negatives
        );
        ensure!(
            sets.positives.len() <= 5 && sets.negatives.len() <= 5,
            "round {round}: set sizes exceed P = N = 5"
        );
        ensure!(
            sets.positives.iter().all(|p| !sets.negatives.contains(p)),
            "round {round}: positive and negative sets intersect"
        );
        ensure!(
            sets.positives.contains(&pair.id),
            "round {round}: gold record missing from positives"
        );
        checked += 1;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("train.jsonl");
    let mut tuples: Vec<TrainingTuple> = (0..100).map(|i| random_tuple(&mut r, i)).collect();
    tuples.shuffle(&mut r);
    let written = emit_training_file(&tuples, &path).map_err(|e| e.to_string())?;
    ensure!(written == 100, "wrote {written} tuples");
    let back = read_training_file(&path).map_err(|e| e.to_string())?;
    ensure!(back == tuples, "training file round trip is lossy");
    let bytes = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let path2 = dir.path().join("again.jsonl");
    emit_training_file(
        &parse_training_file(&bytes).map_err(|e| e.to_string())?,
        &path2,
    )
    .map_err(|e| e.to_string())?;
    ensure!(
        std::fs::read_to_string(&path2).unwrap() == bytes,
        "re-emitted file differs byte-wise"
    );
    Ok(format!(
        "{MCQ_QUESTIONS} MCQ items -> {cases} cases; {checked} contrastive sets match brute force; 100 tuples round-trip"
    ))
}

pub const CONTINUAL_STEPS: usize = 20;
const TARGETS_PER_STEP: usize = 3;

/// Twenty add-only unlearning requests against a stub whose drafts repeat
/// each target answer verbatim.
pub fn continual_scenario() -> Check {
    let words = [
        "amber", "basalt", "cobalt", "dune", "ember", "fjord", "garnet", "heron", "indigo",
        "juniper", "kelp", "lagoon", "marble", "nectar", "onyx", "pumice", "quartz", "russet",
        "sable", "tundra",
    ];
    let mut f = MockFixture {
        verdicts: Some(VerdictFixture::Lexical),
        ..MockFixture::default()
    };
    let mut schedule = Vec::new();
    let mut answers = Vec::new();
    for step in 0..CONTINUAL_STEPS {
        let mut add = Vec::new();
        for t in 0..TARGETS_PER_STEP {
            let name = format!("{}{}", words[step], words[(step + t * 7 + 1) % words.len()]);
            let q = format!("What is the secret motto of {name}?");
            let a = format!(
                "The motto of {name} is {} {} forever",
                words[(t + 3) % 20],
                words[(step + 11) % 20]
            );
            f.drafts.insert(q.clone(), format!("Of course. {a}."));
            answers.push((q.clone(), a.clone()));
            add.push(RecordDraft::new(q, a).with_id(format!("s{step:02}t{t}")));
        }
        schedule.push(ScheduleStep {
            add,
            remove: Vec::new(),
        });
    }
    let retain: Vec<ProbeItem> = (0..8)
        .map(|i| {
            let q = format!("How many legs does creature number {i} have?");
            f.drafts.insert(
                q.clone(),
                format!("Creature number {i} walks on {} legs.", 2 + i),
            );
            ProbeItem {
                id: format!("keep{i}"),
                question: q,
                answer: format!("{} legs", 2 + i),
                split: ProbeSplit::Retain,
                choices: None,
            }
        })
        .collect();
    let backend = Arc::new(MockBackend::new(f));
    let set = Arc::new(ExclusionSet::new(
        ExclusionStore::new(),
        Bm25Params::default(),
    ));
    let pipeline = CorrectionPipeline::new(backend.clone(), set, PipelineConfig::default())
        .map_err(|e| e.to_string())?;
    let judge = LeakageJudge {
        backend: backend.as_ref(),
        route: Route::Base,
        params: GenerationParams::default(),
        k: 5,
    };
    let rt = runtime();

    // The stub does leak: every draft is judged leaking before correction.
    for (q, a) in &answers {
        let draft = backend.fixture().drafts[q].clone();
        let v = rt
            .block_on(judge.label(q, a, &draft))
            .map_err(|e| e.to_string())?;
        ensure!(
            v.label == JudgeLabel::Leakage,
            "stub draft for {q:?} is not judged leaking"
        );
    }

    let report = rt
        .block_on(continual_run(
            &schedule,
            &retain,
            &pipeline,
            &judge,
            backend.as_ref(),
            &EvalConfig::default(),
        ))
        .map_err(|e| e.to_string())?;
    ensure!(
        report.aborted.is_none(),
        "run aborted: {:?}",
        report.aborted
    );
    ensure!(
        report.steps.len() == CONTINUAL_STEPS,
        "{} steps reported",
        report.steps.len()
    );
    let step0_retain: Vec<String> = retain
        .iter()
        .map(|p| backend.fixture().drafts[&p.question].clone())
        .collect();
    for s in &report.steps {
        let l = &s.report.leakage;
        ensure!(
            s.unlearned == TARGETS_PER_STEP * (s.step + 1),
            "step {}: {} targets",
            s.step,
            s.unlearned
        );
        ensure!(
            l.leaked == 0 && l.rate == 0.0,
            "step {}: leakage {} of {}",
            s.step,
            l.leaked,
            l.judged
        );
        ensure!(
            l.judged == s.unlearned && l.excluded == 0,
            "step {}: {} judged, {} excluded",
            s.step,
            l.judged,
            l.excluded
        );
        ensure!(
            s.retain_identical_to_first,
            "step {}: retain outputs drifted",
            s.step
        );
        ensure!(
            s.report.retain_outputs == step0_retain,
            "step {}: retain outputs are not the drafts",
            s.step
        );
        ensure!(
            s.generation_swaps == 1,
            "step {}: {} generation swaps",
            s.step,
            s.generation_swaps
        );
        ensure!(
            s.index_generation == s.step as u64 + 1,
            "step {}: generation {}",
            s.step,
            s.index_generation
        );
    }
    Ok(format!(
        "{CONTINUAL_STEPS} steps, {} targets, 0 leaked at every step; retain outputs byte-identical; 1 swap per step",
        CONTINUAL_STEPS * TARGETS_PER_STEP
    ))
}
