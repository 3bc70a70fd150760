//! Release acceptance suite: one test per criterion, each ending in a
//! single `ACCEPTANCE Cn (...): PASS` line. Together they pin down the
//! generator round-trip, tree indexing, the labeling protocol, scoring,
//! onset localization, corpus filtering, error histograms, and the
//! end-to-end binary workflow.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::Command;

use tracer_core::diagnosis::{
    heuristic_diagnose, run_diagnosis, ProtocolConfig, ScriptedClient, Termination,
    OUTPUT_TRUNCATION_LIMIT,
};
use tracer_core::evaluation::{error_stage_distribution, score_against_gold, step_prf};
use tracer_core::extraction::{
    apply_filters, extract_run, FilterVerdict, ParserRegistry, RejectReason,
};
use tracer_core::model::{Outcome, StageLabel, StepKind, StepRecord, Trajectory};
use tracer_core::synth::{generate, read_gold, write_synth_run, Archetype, SynthConfig};
use tracer_core::tree::{
    build_tree, classify_steps, parse_tree_md, rebuild_tree, render_tree_md, segment_stages,
    Parent, StageSegmentation, StageSpan,
};

/// Minimal deterministic PRNG so the randomized criteria need no extra
/// dependencies and reproduce exactly across runs.
struct XorShift(u64);

impl XorShift {
    fn new(seed: u64) -> Self {
        XorShift(seed.max(1))
    }

    fn next(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }
}

fn all_archetypes() -> [Archetype; 6] {
    [
        Archetype::FailingCascade,
        Archetype::CleanSolved,
        Archetype::Timeout,
        Archetype::TruncatedGeneration,
        Archetype::EnvCorrupt,
        Archetype::ShortCorrect,
    ]
}

/// Criterion 1: synthetic runs written to disk extract back to the exact
/// same trajectory, and rewriting the same run produces byte-identical
/// artifacts.
#[test]
fn criterion_1_synthetic_runs_round_trip_and_rewrite_identically() {
    let registry = ParserRegistry::builtin();
    let root = tempfile::tempdir().unwrap();

    for i in 0..50usize {
        let config = SynthConfig {
            archetype: all_archetypes()[i % 6],
            onset_stage: if i % 3 == 0 {
                StageLabel::DependencyInstallation
            } else {
                StageLabel::Patching
            },
            cascade_len: i % 4 + 1,
            noise_duplicates: i % 3,
            pre_onset_edits: i % 5,
            ..SynthConfig::default()
        };
        let run = generate(40_000 + i as u64, &config).expect("feasible configuration");

        let dir_a = root.path().join(format!("a-{i:02}"));
        let dir_b = root.path().join(format!("b-{i:02}"));
        write_synth_run(&dir_a, &run).unwrap();
        write_synth_run(&dir_b, &run).unwrap();

        let (_, extracted) = extract_run(&dir_a, &registry).expect("canonical layout extracts");
        assert_eq!(extracted, run.trajectory, "run {i}: extraction must invert writing");
        assert_eq!(read_gold(&dir_a).unwrap().as_ref(), Some(&run.gold), "run {i}: gold labels");

        let names = |dir: &Path| -> BTreeSet<String> {
            fs::read_dir(dir)
                .unwrap()
                .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
                .collect()
        };
        let files = names(&dir_a);
        assert_eq!(files, names(&dir_b), "run {i}: both writes produce the same files");
        assert!(files.contains("steps.json") && files.contains("task.md"), "run {i}");
        for name in &files {
            assert_eq!(
                fs::read(dir_a.join(name)).unwrap(),
                fs::read(dir_b.join(name)).unwrap(),
                "run {i}: {name} must be byte-identical across writes"
            );
        }
    }
    println!("ACCEPTANCE C1 (extraction round-trip & deterministic rewrite): PASS");
}

/// Criterion 2: over a thousand random command sequences, the trace tree
/// obeys its structural invariants and the markdown index reparses to the
/// identical tree and stage spans.
#[test]
fn criterion_2_random_runs_index_into_sound_trees() {
    let pool = [
        "ls src",
        "cat README.md",
        "grep -rn connect src",
        "python --version",
        "pytest tests/",
        "git diff",
        "pip list",
        "cat src/app (copy).py",
        "sed -i 's/a/b/' src/x.py",
        "git apply fix.patch",
        "echo done > notes.txt",
        "pip install requests",
        "rm stale.txt",
        "python -m pytest tests/test_auth.py",
    ];
    let mut rng = XorShift::new(0xACCE_55ED);

    for case in 0..1_000usize {
        let len = (rng.next() % 60 + 1) as usize;
        let steps: Vec<StepRecord> = (1..=len as u32)
            .map(|id| {
                let command = pool[(rng.next() % pool.len() as u64) as usize];
                StepRecord::new(id, command, format!("out {id}"), (rng.next() % 2) as i32)
            })
            .collect();
        let t = Trajectory {
            task_id: format!("case-{case}"),
            framework_id: "acc".into(),
            backbone_id: "acc".into(),
            outcome: Outcome::Unsolved,
            run_flags: BTreeSet::new(),
            total_tokens: None,
            steps,
        };

        let kinds = classify_steps(&t);
        let tree = build_tree(&t, &kinds);
        assert_eq!(tree.len(), t.steps.len());
        let mut changes_before = 0u32;
        let mut cursor = Parent::Root;
        for (i, node) in tree.nodes.iter().enumerate() {
            assert_eq!(node.step_id, i as u32 + 1, "case {case}: ids stay contiguous");
            assert_eq!(node.depth, 1 + changes_before, "case {case}: depth counts changes");
            assert_eq!(node.parent, cursor, "case {case}: parent is the latest change");
            if kinds[i] == StepKind::Change {
                changes_before += 1;
                cursor = Parent::Step(node.step_id);
            }
        }
        for node in &tree.nodes {
            if node.kind == StepKind::Explore {
                assert!(
                    tree.children(Parent::Step(node.step_id)).is_empty(),
                    "case {case}: exploration steps are leaves"
                );
            }
        }

        let seg = segment_stages(&t, &kinds);
        assert!(seg.covers(t.steps.len() as u32), "case {case}: spans tile the run");
        let md = render_tree_md(&tree, &seg);
        let parsed = parse_tree_md(&md).expect("rendered markdown reparses");
        assert_eq!(parsed.spans, seg.spans, "case {case}: spans survive the round trip");
        assert_eq!(rebuild_tree(&parsed.lines), tree, "case {case}: tree survives the round trip");
    }
    println!("ACCEPTANCE C2 (tree invariants & markdown round-trip): PASS");
}

fn protocol_trajectory(big_observation: Option<(usize, String)>) -> Trajectory {
    let mut steps: Vec<StepRecord> =
        (1..=6).map(|i| StepRecord::new(i, format!("cmd {i}"), format!("out {i}"), 0)).collect();
    if let Some((index, content)) = big_observation {
        steps[index].observation.as_mut().unwrap().content = content;
    }
    Trajectory {
        task_id: "protocol".into(),
        framework_id: "acc".into(),
        backbone_id: "acc".into(),
        outcome: Outcome::Unsolved,
        run_flags: BTreeSet::new(),
        total_tokens: None,
        steps,
    }
}

fn protocol_segmentation() -> StageSegmentation {
    StageSegmentation {
        spans: vec![
            StageSpan {
                stage: StageLabel::EnvironmentVerification,
                start_step_id: 1,
                end_step_id: 2,
            },
            StageSpan { stage: StageLabel::InspectionDebugging, start_step_id: 3, end_step_id: 4 },
            StageSpan { stage: StageLabel::Patching, start_step_id: 5, end_step_id: 6 },
        ],
    }
}

const INIT: &str = "```bash\necho '[]' > mini_tracer_labels.json\n```";
const FINALIZE: &str = "```bash\necho TRACER_FINAL_OUTPUT\n```";

fn inspect(idx: i64) -> String {
    format!(
        "```bash\npython -c 'import json; print(json.dumps(json.load(open(\"steps.json\"))[{idx}], indent=2))'\n```"
    )
}

fn append(span: (u32, u32), incorrect: &str, reasoning: &str) -> String {
    format!(
        "```bash\npython -c 'import json; p=\"mini_tracer_labels.json\"; d=json.load(open(p)); d.append({{\"stage_id\": [{}, {}], \"incorrect_step_ids\": [{incorrect}], \"unuseful_step_ids\": [], \"reasoning\": \"{reasoning}\"}}); json.dump(d, open(p,\"w\"))'\n```",
        span.0, span.1
    )
}

fn drive(
    t: &Trajectory,
    responses: Vec<String>,
    max_turns: usize,
) -> tracer_core::diagnosis::DiagnosisRun {
    let mut client = ScriptedClient::new(responses);
    run_diagnosis(t, &protocol_segmentation(), "fix the failing suite", &mut client, &ProtocolConfig {
        max_turns,
    })
}

fn transcript_has(run: &tracer_core::diagnosis::DiagnosisRun, needle: &str) -> bool {
    run.transcript.iter().any(|m| m.content.contains(needle))
}

/// Criterion 3: the labeling protocol enforces every rule of its command
/// discipline — exact-one-action replies, the forbidden-command ladder,
/// init-first, the format-error strike limit, the finalize coverage gate,
/// label validation feedback with recovery, the turn budget, and
/// middle-truncation of oversized observations.
#[test]
fn criterion_3_the_labeling_protocol_enforces_its_discipline() {
    let t = protocol_trajectory(None);

    // A malformed reply earns the corrective feedback and the session
    // recovers to a clean finalization.
    let run = drive(
        &t,
        vec![
            INIT.into(),
            "```bash\nls src\n```\n```bash\npwd\n```".into(),
            inspect(0),
            inspect(2),
            inspect(4),
            FINALIZE.into(),
        ],
        50,
    );
    assert_eq!(run.termination, Termination::Finalized);
    assert_eq!(run.turns_used, 6);
    assert!(transcript_has(
        &run,
        "Please always provide EXACTLY ONE action in triple backticks, found 2 actions."
    ));
    assert!(run.result.is_empty(), "no labels were written");
    assert!(run.validation.is_valid(), "empty labels are valid once steps were inspected");

    // Every forbidden command class is rejected with its own message, and
    // none of them end the session.
    let forbidden: [(&str, &str); 7] = [
        ("ls src\ncat README.md", "commands must be a single line"),
        ("ls src && pwd", "shell chaining operators (&& or ||) are not allowed"),
        ("cat << EOF", "heredocs (<<) are not allowed"),
        ("python -c 'for s in range(3): print(s)'", "python block statements"),
        ("cat steps.json", "dumping the step log in bulk is not allowed"),
        (
            "python -c 'import json; json.dump(json.load(open(\"steps.json\"))[2], open(\"mini_tracer_labels.json\",\"w\"))'",
            "reading the step log and writing labels in one command is not allowed",
        ),
        ("echo hello", "command is outside the allowed set"),
    ];
    let mut responses = vec![INIT.to_string()];
    responses.extend(forbidden.iter().map(|(cmd, _)| format!("```bash\n{cmd}\n```")));
    responses.extend([inspect(0), inspect(2), inspect(4), FINALIZE.into()]);
    let run = drive(&t, responses, 50);
    assert_eq!(run.termination, Termination::Finalized);
    assert_eq!(run.turns_used, 12);
    for (cmd, fragment) in forbidden {
        assert!(
            transcript_has(&run, &format!("Command rejected: {fragment}")),
            "no rejection for {cmd:?}"
        );
    }

    // Anything but the initialization command as the first reply is fatal,
    // whether it parses or not.
    let run = drive(&t, vec!["```bash\nls src\n```".into()], 50);
    assert_eq!(run.termination, Termination::InitViolation);
    assert_eq!(run.turns_used, 1);
    let run = drive(&t, vec!["I would rather chat than act.".into()], 50);
    assert_eq!(run.termination, Termination::InitViolation);

    // Three malformed replies in a row exhaust the strike limit.
    let run = drive(
        &t,
        vec![INIT.into(), "nope".into(), "still nope".into(), "nope again".into()],
        50,
    );
    assert_eq!(run.termination, Termination::RepeatedFormatErrors);
    assert_eq!(run.turns_used, 4);
    assert!(transcript_has(
        &run,
        "Please always provide EXACTLY ONE action in triple backticks, found 0 actions."
    ));

    // Finalizing before covering enough stages is refused with the exact
    // coverage count, then succeeds once coverage is met.
    let run = drive(
        &t,
        vec![INIT.into(), inspect(0), FINALIZE.into(), inspect(2), inspect(4), FINALIZE.into()],
        50,
    );
    assert_eq!(run.termination, Termination::Finalized);
    assert_eq!(run.turns_used, 6);
    assert!(transcript_has(
        &run,
        "Cannot finalize yet: inspected steps cover 1 of 3 stages; inspect steps in at least 3 \
         distinct stages first."
    ));

    // Invalid labels bounce back as bullet feedback; re-initializing and
    // writing a correct label recovers the session.
    let run = drive(
        &t,
        vec![
            INIT.into(),
            inspect(0),
            inspect(2),
            inspect(4),
            append((2, 5), "", "span drawn freehand"),
            FINALIZE.into(),
            INIT.into(),
            append((5, 6), "5", "the edit broke the suite"),
            FINALIZE.into(),
        ],
        50,
    );
    assert_eq!(run.termination, Termination::Finalized);
    assert_eq!(run.turns_used, 9);
    assert!(transcript_has(&run, "Labels failed validation:"));
    assert!(transcript_has(&run, "- stage [2,5] does not match any provided span"));
    assert!(transcript_has(&run, "Fix the labels, then finalize again."));
    assert!(run.validation.is_valid());
    assert_eq!(run.result.stages.len(), 1);
    assert_eq!(run.result.stages[0].stage_id, (5, 6));
    assert_eq!(run.result.incorrect_steps(), BTreeSet::from([5]));

    // Running out of turns keeps the labels written so far.
    let run = drive(
        &t,
        vec![
            INIT.into(),
            inspect(0),
            inspect(2),
            inspect(4),
            append((5, 6), "5", "kept across exhaustion"),
            inspect(0),
        ],
        6,
    );
    assert_eq!(run.termination, Termination::BudgetExhausted);
    assert_eq!(run.turns_used, 6);
    assert_eq!(run.result.stages.len(), 1, "partial labels survive budget exhaustion");

    // An oversized observation is middle-truncated: head and tail survive
    // verbatim and the elided count is exact.
    let payload = format!("{}{}{}", "H".repeat(5_000), "M".repeat(2_000), "T".repeat(5_000));
    let big = protocol_trajectory(Some((1, payload)));
    let pretty = serde_json::to_string_pretty(&big.steps[1]).unwrap();
    let total = pretty.chars().count();
    assert!(total > OUTPUT_TRUNCATION_LIMIT, "fixture must overflow the limit");
    let elided = total - OUTPUT_TRUNCATION_LIMIT;
    let run = drive(
        &big,
        vec![INIT.into(), inspect(1), inspect(2), inspect(4), FINALIZE.into()],
        50,
    );
    assert_eq!(run.termination, Termination::Finalized);
    let observation = run
        .transcript
        .iter()
        .find(|m| m.content.contains("characters elided"))
        .expect("the oversized inspect output is truncated");
    assert!(observation.content.contains(&format!("... {elided} characters elided ...")));
    let head: String = pretty.chars().take(4_000).collect();
    let tail: String = pretty.chars().skip(total - 4_000).collect();
    assert!(observation.content.contains(&head), "head survives verbatim");
    assert!(observation.content.contains(&tail), "tail survives verbatim");
    assert!(observation.content.starts_with("<returncode>0</returncode>\n<output>\n"));

    println!("ACCEPTANCE C3 (protocol discipline suite): PASS");
}

/// Criterion 4: precision/recall/F1 agree with a brute-force reimplementation
/// on five hundred random set pairs plus the empty-set corners.
#[test]
fn criterion_4_step_scores_match_a_brute_force_oracle() {
    let mut rng = XorShift::new(0x5C0_9E5);
    let mut cases: Vec<(BTreeSet<u32>, BTreeSet<u32>)> = vec![
        (BTreeSet::new(), BTreeSet::new()),
        (BTreeSet::new(), BTreeSet::from([1, 2])),
        (BTreeSet::from([3]), BTreeSet::new()),
    ];
    for _ in 0..500 {
        let p_size = (rng.next() % 13) as usize;
        let g_size = (rng.next() % 13) as usize;
        let pred: BTreeSet<u32> = (0..p_size).map(|_| (rng.next() % 40) as u32).collect();
        let gold: BTreeSet<u32> = (0..g_size).map(|_| (rng.next() % 40) as u32).collect();
        cases.push((pred, gold));
    }

    for (pred, gold) in &cases {
        let scores = step_prf(pred, gold);
        let hits = pred.iter().filter(|id| gold.contains(id)).count() as f64;
        let precision = if pred.is_empty() { 0.0 } else { hits / pred.len() as f64 };
        let recall = if gold.is_empty() { 0.0 } else { hits / gold.len() as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        assert!(
            (scores.precision - precision).abs() < 1e-9
                && (scores.recall - recall).abs() < 1e-9
                && (scores.f1 - f1).abs() < 1e-9,
            "mismatch for pred {pred:?} gold {gold:?}: got {scores:?}"
        );
    }
    println!("ACCEPTANCE C4 (scoring vs brute-force oracle): PASS");
}

/// Criterion 5: across two hundred planted patching cascades the fallback
/// localizer names the onset stage and the onset step, scoring perfectly
/// when the cascade carries no extra edits or noise; across two hundred
/// clean runs it stays silent.
#[test]
fn criterion_5_the_fallback_localizer_finds_planted_onsets() {
    for seed in 0..200u64 {
        let config = SynthConfig {
            cascade_len: (seed % 4) as usize + 1,
            noise_duplicates: (seed % 3) as usize,
            pre_onset_edits: (seed % 4) as usize,
            ..SynthConfig::default()
        };
        let run = generate(seed, &config).unwrap();
        let onset = run.gold.error_critical_step.expect("failing archetype plants an onset");
        let (_, onset_span) = run.segmentation.span_of(onset).unwrap();

        let predicted = heuristic_diagnose(&run.trajectory, &run.segmentation);
        assert_eq!(predicted.stages.len(), 1, "seed {seed}: exactly one stage is named");
        assert_eq!(
            predicted.stages[0].stage_id,
            onset_span.bounds(),
            "seed {seed}: the onset stage wins"
        );
        assert!(
            predicted.incorrect_steps().contains(&onset),
            "seed {seed}: the onset step is flagged incorrect"
        );
        if seed % 12 == 0 {
            // Single-step cascade, no planted noise: the prediction must
            // match the gold labels exactly.
            let views = score_against_gold(&predicted, &run.gold);
            assert_eq!(views.union.f1, 1.0, "seed {seed}");
            assert_eq!(views.incorrect.f1, 1.0, "seed {seed}");
        }
    }

    for seed in 0..200u64 {
        let config = SynthConfig { archetype: Archetype::CleanSolved, ..SynthConfig::default() };
        let run = generate(seed, &config).unwrap();
        let predicted = heuristic_diagnose(&run.trajectory, &run.segmentation);
        assert!(predicted.is_empty(), "seed {seed}: clean runs yield no findings");
    }
    println!("ACCEPTANCE C5 (heuristic onset localization): PASS");
}

/// Criterion 6: a forty-run corpus of mixed archetypes written to disk is
/// filtered with the exact expected verdict for every single run.
#[test]
fn criterion_6_corpus_filters_sort_archetypes_exactly() {
    let registry = ParserRegistry::builtin();
    let root = tempfile::tempdir().unwrap();
    let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();

    for i in 0..40usize {
        let archetype = all_archetypes()[i % 6];
        let run = generate(1_000 + i as u64, &SynthConfig { archetype, ..SynthConfig::default() })
            .unwrap();
        let dir = root.path().join(format!("run-{i:02}"));
        write_synth_run(&dir, &run).unwrap();

        let (_, trajectory) = extract_run(&dir, &registry).unwrap();
        let verdict = apply_filters(&trajectory);
        let expected = match archetype {
            Archetype::FailingCascade | Archetype::CleanSolved => FilterVerdict::Retained,
            Archetype::Timeout => FilterVerdict::Rejected { reason: RejectReason::Timeout },
            Archetype::TruncatedGeneration => {
                FilterVerdict::Rejected { reason: RejectReason::TruncatedGeneration }
            }
            Archetype::EnvCorrupt => FilterVerdict::Rejected { reason: RejectReason::EnvCorrupt },
            Archetype::ShortCorrect => {
                FilterVerdict::Rejected { reason: RejectReason::ShortCorrect }
            }
        };
        assert_eq!(verdict, expected, "run {i} ({archetype:?})");
        let key = match verdict {
            FilterVerdict::Retained => "retained",
            FilterVerdict::Rejected { reason: RejectReason::Timeout } => "timeout",
            FilterVerdict::Rejected { reason: RejectReason::TruncatedGeneration } => "truncated",
            FilterVerdict::Rejected { reason: RejectReason::EnvCorrupt } => "env_corrupt",
            FilterVerdict::Rejected { reason: RejectReason::ShortCorrect } => "short_correct",
        };
        *counts.entry(key).or_default() += 1;
    }

    let expected: BTreeMap<&'static str, usize> = BTreeMap::from([
        ("retained", 14),
        ("timeout", 7),
        ("truncated", 7),
        ("env_corrupt", 6),
        ("short_correct", 6),
    ]);
    assert_eq!(counts, expected);
    println!("ACCEPTANCE C6 (corpus filter decisions): PASS");
}

/// Criterion 7: over five hundred annotated failures with a 30% dependency
/// onset allocation, the stage-by-outcome histogram reports the exact
/// planted counts and fractions.
#[test]
fn criterion_7_error_histograms_match_the_planted_allocation() {
    let golds: Vec<_> = (0..500usize)
        .map(|i| {
            let config = SynthConfig {
                onset_stage: if i % 10 < 3 {
                    StageLabel::DependencyInstallation
                } else {
                    StageLabel::Patching
                },
                cascade_len: 1,
                noise_duplicates: 0,
                ..SynthConfig::default()
            };
            generate(5_000 + i as u64, &config).unwrap().gold
        })
        .collect();

    let dist = error_stage_distribution(golds.iter());
    assert_eq!(dist.total, 500);
    assert_eq!(dist.cells.len(), 2);

    let deps = &dist.cells[0];
    assert_eq!(deps.stage, StageLabel::DependencyInstallation);
    assert_eq!(deps.outcome, Outcome::Unsolved);
    assert_eq!(deps.count, 150);
    assert!((deps.fraction - 0.30).abs() < 1e-12);

    let patching = &dist.cells[1];
    assert_eq!(patching.stage, StageLabel::Patching);
    assert_eq!(patching.outcome, Outcome::Unsolved);
    assert_eq!(patching.count, 350);
    assert!((patching.fraction - 0.70).abs() < 1e-12);

    println!("ACCEPTANCE C7 (error-stage histogram): PASS");
}

fn tracer(cwd: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tracer"));
    cmd.current_dir(cwd)
        .env_remove("TRACER_MODEL_URL")
        .env_remove("TRACER_MODEL_KEY")
        .env_remove("TRACER_CONFIG");
    cmd
}

/// Criterion 8: the installed binary generates a corpus, pipelines it with
/// the heuristic localizer, and scores its own predictions at F1 1.0 —
/// with the documented exit codes on usage and operational errors and no
/// key material echoed into reports.
#[test]
fn criterion_8_the_binary_drives_the_full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let analysis = tmp.path().join("analysis");
    let scores_dir = tmp.path().join("scores");

    let status = tracer(tmp.path())
        .args(["synth", "--out"])
        .arg(&corpus)
        .args([
            "--count",
            "6",
            "--seed-base",
            "11",
            "--archetype",
            "failing_cascade",
            "--onset-stage",
            "patching",
            "--cascade-len",
            "1",
            "--noise",
            "0",
        ])
        .status()
        .unwrap();
    assert!(status.success(), "synth must exit 0");
    let run_names: Vec<String> = (11u64..17).map(|seed| format!("run-{seed:08x}")).collect();
    for name in &run_names {
        assert!(corpus.join(name).join("steps.json").is_file(), "{name} generated");
        assert!(corpus.join(name).join("gold_labels.json").is_file(), "{name} has gold");
    }

    let status = tracer(tmp.path())
        .arg("pipeline")
        .arg(&corpus)
        .arg("--out")
        .arg(&analysis)
        .args(["--jobs", "2", "--heuristic"])
        .status()
        .unwrap();
    assert!(status.success(), "pipeline must exit 0");
    for name in &run_names {
        let run_out = analysis.join(name);
        assert!(run_out.join("tree.md").is_file(), "{name} indexed");
        assert!(run_out.join("trace_report.json").is_file(), "{name} diagnosed");
        assert!(run_out.join("replay_hint.txt").is_file(), "{name} has a replay hint");
        assert!(run_out.join("replay_budget.json").is_file(), "{name} has a replay budget");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(analysis.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["summary"]["total"], 6);
    assert_eq!(report["summary"]["retained"], 6);
    assert_eq!(report["summary"]["diagnosed"], 6);
    assert_eq!(report["config"]["model_key_present"], false);
    assert!(
        report["config"].get("model_key").is_none(),
        "key material must never be echoed into reports"
    );
    let stream = fs::read_to_string(analysis.join("report.jsonl")).unwrap();
    assert_eq!(stream.lines().count(), 6);

    let status = tracer(tmp.path())
        .arg("evaluate")
        .arg(&corpus)
        .arg("--pred")
        .arg(&analysis)
        .arg("--out")
        .arg(&scores_dir)
        .status()
        .unwrap();
    assert!(status.success(), "evaluate must exit 0");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(scores_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["scores"]["scored"], 6);
    assert_eq!(report["scores"]["union"]["f1"], 1.0);
    assert_eq!(report["scores"]["incorrect"]["f1"], 1.0);

    let usage = tracer(tmp.path()).arg("frobnicate").output().unwrap();
    assert_eq!(usage.status.code(), Some(2), "usage errors exit 2");
    let missing = tracer(tmp.path())
        .args(["extract", "definitely-not-a-run-directory"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1), "operational errors exit 1");

    println!("ACCEPTANCE C8 (end-to-end binary workflow): PASS");
}
