//! Implementations behind the CLI subcommands, shared by the single-run
//! commands and the parallel corpus pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use tracer_core::diagnosis::{
    heuristic_diagnose, run_diagnosis, ModelClient, ProtocolConfig, Termination,
};
use tracer_core::evaluation::{
    evaluate_instance, macro_aggregate, InstanceEvaluation, MacroReport,
};
use tracer_core::extraction::{
    apply_filters, extract_run, write_run_dir, FilterVerdict, ParserRegistry, RunMeta,
};
use tracer_core::model::{DiagnosisResult, Outcome, StageLabel, Trajectory, ValidationReport};
use tracer_core::replay::{render_hint, replay_budget, write_package};
use tracer_core::synth::{generate, write_synth_run, Archetype, SynthConfig};
use tracer_core::tree::{
    build_tree, classify_steps, segment_stages, segmentation_from_gold, StageSegmentation,
};

use crate::config::Settings;
use crate::http_client::HttpModelClient;

/// Filename of the per-run diagnosis report.
pub const TRACE_REPORT_FILENAME: &str = "trace_report.json";

/// Filename of the corpus-level report.
pub const REPORT_FILENAME: &str = "report.json";

/// Filename of the per-run report stream.
pub const REPORT_STREAM_FILENAME: &str = "report.jsonl";

/// Load the builtin registry, merged with extra parser descriptors when a
/// file is given.
pub fn load_registry(parsers: Option<&Path>) -> Result<ParserRegistry> {
    let mut registry = ParserRegistry::builtin();
    if let Some(path) = parsers {
        registry
            .merge_from_file(path)
            .with_context(|| format!("loading parser registry {}", path.display()))?;
    }
    Ok(registry)
}

/// Where a run's stage segmentation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentationSource {
    /// Reference spans shipped with the run override everything.
    Gold,
    /// Spans inferred from the commands themselves.
    Derived,
}

/// Segment a run, preferring reference spans shipped next to it.
pub fn segmentation_for(
    run_dir: &Path,
    t: &Trajectory,
) -> Result<(StageSegmentation, SegmentationSource)> {
    if let Some(gold) = tracer_core::synth::read_gold(run_dir)? {
        if !gold.stages.is_empty() {
            return Ok((segmentation_from_gold(&gold), SegmentationSource::Gold));
        }
    }
    let kinds = classify_steps(t);
    Ok((segment_stages(t, &kinds), SegmentationSource::Derived))
}

/// Per-run diagnosis report written by `diagnose` and by the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceReport {
    pub config: crate::config::ResolvedConfig,
    pub task_id: String,
    pub mode: SegmentationMode,
    pub filter: FilterVerdict,
    pub segmentation_source: SegmentationSource,
    pub segmentation: StageSegmentation,
    pub termination: Option<Termination>,
    pub turns_used: Option<usize>,
    pub validation: Option<ValidationReport>,
    /// Estimated token spend of the diagnosis session itself.
    pub diagnosis_cost: Option<u64>,
    pub result: DiagnosisResult,
    pub evaluation: Option<InstanceEvaluation>,
}

/// Which engine produced the labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentationMode {
    Heuristic,
    Model,
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports always serialize");
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Extract one run and echo the filter verdict; optionally re-write it as a
/// canonical run directory.
pub fn cmd_extract(run_dir: &Path, out: Option<&Path>, parsers: Option<&Path>) -> Result<()> {
    let registry = load_registry(parsers)?;
    let (layout, trajectory) = extract_run(run_dir, &registry)?;
    let verdict = apply_filters(&trajectory);
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        write_run_dir(out, &trajectory, &RunMeta::from_trajectory(&trajectory))?;
    }
    let echo = serde_json::json!({
        "task_id": trajectory.task_id,
        "steps": trajectory.steps.len(),
        "outcome": trajectory.outcome,
        "run_flags": trajectory.run_flags,
        "fingerprint": layout.format_fingerprint,
        "filter": verdict,
    });
    println!("{}", serde_json::to_string_pretty(&echo).expect("echo serializes"));
    Ok(())
}

/// Build the hierarchical index artifacts for one run.
pub fn cmd_index(run_dir: &Path, out: Option<&Path>, parsers: Option<&Path>) -> Result<()> {
    let registry = load_registry(parsers)?;
    let (_, trajectory) = extract_run(run_dir, &registry)?;
    let (seg, source) = segmentation_for(run_dir, &trajectory)?;
    let kinds = classify_steps(&trajectory);
    let tree = build_tree(&trajectory, &kinds);
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("index"));
    tracer_core::tree::emit_artifacts(&trajectory.steps, &tree, &seg, &out_dir)?;
    println!(
        "indexed {} steps into {} ({} spans, {:?} segmentation)",
        trajectory.steps.len(),
        out_dir.display(),
        seg.spans.len(),
        source,
    );
    Ok(())
}

struct DiagnosisProduct {
    mode: SegmentationMode,
    termination: Option<Termination>,
    turns_used: Option<usize>,
    validation: Option<ValidationReport>,
    diagnosis_cost: Option<u64>,
    result: DiagnosisResult,
}

fn diagnose_trajectory(
    t: &Trajectory,
    seg: &StageSegmentation,
    task_text: &str,
    settings: &Settings,
) -> Result<DiagnosisProduct> {
    if settings.heuristic {
        return Ok(DiagnosisProduct {
            mode: SegmentationMode::Heuristic,
            termination: None,
            turns_used: None,
            validation: None,
            diagnosis_cost: None,
            result: heuristic_diagnose(t, seg),
        });
    }
    let Some(url) = &settings.model_url else {
        bail!(
            "no model endpoint configured; pass --heuristic, or set {} (or model_url in \
             tracer.toml)",
            crate::config::MODEL_URL_VAR
        );
    };
    let mut client: Box<dyn ModelClient> =
        Box::new(HttpModelClient::new(url.clone(), settings.model_key.clone()));
    let protocol = ProtocolConfig { max_turns: settings.max_turns };
    let outcome = run_diagnosis(t, seg, task_text, client.as_mut(), &protocol);
    let response_chars: usize =
        outcome.transcript.iter().map(|m| m.content.chars().count()).sum();
    Ok(DiagnosisProduct {
        mode: SegmentationMode::Model,
        termination: Some(outcome.termination),
        turns_used: Some(outcome.turns_used),
        validation: Some(outcome.validation),
        diagnosis_cost: Some((response_chars as u64).div_ceil(4)),
        result: outcome.result,
    })
}

fn task_text_for(run_dir: &Path) -> String {
    for name in ["task.md", "task.txt", "issue.md", "problem.md"] {
        if let Ok(text) = fs::read_to_string(run_dir.join(name)) {
            return text;
        }
    }
    "No task description was packaged with this run.".to_string()
}

fn build_trace_report(
    run_dir: &Path,
    trajectory: &Trajectory,
    settings: &Settings,
) -> Result<TraceReport> {
    let verdict = apply_filters(trajectory);
    let (seg, source) = segmentation_for(run_dir, trajectory)?;
    let product = diagnose_trajectory(trajectory, &seg, &task_text_for(run_dir), settings)?;
    let evaluation = tracer_core::synth::read_gold(run_dir)?
        .map(|gold| evaluate_instance(&trajectory.task_id, &product.result, &gold));
    Ok(TraceReport {
        config: settings.resolved(),
        task_id: trajectory.task_id.clone(),
        mode: product.mode,
        filter: verdict,
        segmentation_source: source,
        segmentation: seg,
        termination: product.termination,
        turns_used: product.turns_used,
        validation: product.validation,
        diagnosis_cost: product.diagnosis_cost,
        result: product.result,
        evaluation,
    })
}

/// Diagnose one run and write its `trace_report.json`.
pub fn cmd_diagnose(
    run_dir: &Path,
    out: Option<&Path>,
    parsers: Option<&Path>,
    settings: &Settings,
) -> Result<()> {
    let registry = load_registry(parsers)?;
    let (_, trajectory) = extract_run(run_dir, &registry)?;
    let report = build_trace_report(run_dir, &trajectory, settings)?;
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("index"));
    fs::create_dir_all(&out_dir)?;
    write_json_pretty(&out_dir.join(TRACE_REPORT_FILENAME), &report)?;
    println!(
        "diagnosed {}: {} stage label(s), report at {}",
        report.task_id,
        report.result.stages.len(),
        out_dir.join(TRACE_REPORT_FILENAME).display(),
    );
    Ok(())
}

/// Render the replay package for a diagnosed run.
pub fn cmd_replay_hint(
    run_dir: &Path,
    report_path: Option<&Path>,
    out: Option<&Path>,
    parsers: Option<&Path>,
    settings: &Settings,
) -> Result<()> {
    let registry = load_registry(parsers)?;
    let (_, trajectory) = extract_run(run_dir, &registry)?;

    let (result, diagnosis_cost) = match report_path {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading report {}", path.display()))?;
            let report: TraceReport = serde_json::from_str(&text)
                .with_context(|| format!("parsing report {}", path.display()))?;
            (report.result, report.diagnosis_cost)
        }
        None => {
            let (seg, _) = segmentation_for(run_dir, &trajectory)?;
            let product =
                diagnose_trajectory(&trajectory, &seg, &task_text_for(run_dir), settings)?;
            (product.result, product.diagnosis_cost)
        }
    };

    let task = task_text_for(run_dir);
    let hint = render_hint(&trajectory, Some(&task), &result, diagnosis_cost);
    let budget = replay_budget(&trajectory);
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("index"));
    fs::create_dir_all(&out_dir)?;
    write_package(&out_dir, &hint, &budget)?;
    println!(
        "replay package for {} written to {} ({} chars, budget {} steps / {} tokens)",
        trajectory.task_id,
        out_dir.display(),
        hint.chars().count(),
        budget.max_steps,
        budget.max_tokens,
    );
    Ok(())
}

fn parse_archetype(name: &str) -> Result<Archetype> {
    Ok(match name {
        "failing_cascade" => Archetype::FailingCascade,
        "clean_solved" => Archetype::CleanSolved,
        "timeout" => Archetype::Timeout,
        "truncated_generation" => Archetype::TruncatedGeneration,
        "env_corrupt" => Archetype::EnvCorrupt,
        "short_correct" => Archetype::ShortCorrect,
        other => bail!(
            "unknown archetype {other:?}; expected one of failing_cascade, clean_solved, \
             timeout, truncated_generation, env_corrupt, short_correct"
        ),
    })
}

/// How onset stages are assigned across a generated corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnsetAssignment {
    Fixed(StageLabel),
    /// Three of every ten runs get a dependency onset; the rest patch.
    Mixed,
}

fn parse_onset(name: &str) -> Result<OnsetAssignment> {
    Ok(match name {
        "patching" => OnsetAssignment::Fixed(StageLabel::Patching),
        "dependency_installation" => {
            OnsetAssignment::Fixed(StageLabel::DependencyInstallation)
        }
        "mixed" => OnsetAssignment::Mixed,
        other => bail!(
            "unknown onset stage {other:?}; expected patching, dependency_installation, or mixed"
        ),
    })
}

/// Knobs for `cmd_synth`.
pub struct SynthRequest<'a> {
    pub out: &'a Path,
    pub count: usize,
    pub seed_base: u64,
    pub archetype: &'a str,
    pub onset_stage: &'a str,
    pub cascade_len: usize,
    pub noise: usize,
    pub pre_onset_edits: usize,
}

/// Generate a corpus of synthetic run directories under `out`.
pub fn cmd_synth(request: &SynthRequest) -> Result<()> {
    let archetype = parse_archetype(request.archetype)?;
    let onset = parse_onset(request.onset_stage)?;
    fs::create_dir_all(request.out)?;
    for i in 0..request.count {
        let seed = request.seed_base.wrapping_add(i as u64);
        let onset_stage = match onset {
            OnsetAssignment::Fixed(stage) => stage,
            OnsetAssignment::Mixed => {
                if i % 10 < 3 {
                    StageLabel::DependencyInstallation
                } else {
                    StageLabel::Patching
                }
            }
        };
        let config = SynthConfig {
            archetype,
            onset_stage,
            cascade_len: request.cascade_len,
            noise_duplicates: request.noise,
            pre_onset_edits: request.pre_onset_edits,
            ..SynthConfig::default()
        };
        let run = generate(seed, &config)?;
        let dir = request.out.join(format!("run-{seed:08x}"));
        write_synth_run(&dir, &run)?;
    }
    println!(
        "generated {} run(s) under {} (seeds {}..{})",
        request.count,
        request.out.display(),
        request.seed_base,
        request.seed_base.wrapping_add(request.count as u64),
    );
    Ok(())
}

/// One line of `report.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterVerdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub termination: Option<Termination>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labeled_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<InstanceEvaluation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Corpus-level counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub total: usize,
    pub retained: usize,
    pub rejected: BTreeMap<String, usize>,
    pub diagnosed: usize,
    pub evaluated: usize,
    pub errors: usize,
}

/// The corpus report written by `pipeline` and `evaluate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusReport {
    pub config: crate::config::ResolvedConfig,
    pub summary: CorpusSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<MacroReport>,
    pub runs: Vec<RunRecord>,
}

/// Immediate subdirectories of a corpus root, sorted by name.
pub fn corpus_run_dirs(corpus: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(corpus)
        .with_context(|| format!("reading corpus directory {}", corpus.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("corpus {} contains no run directories", corpus.display());
    }
    Ok(dirs)
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

fn process_run(
    run_dir: &Path,
    out_root: &Path,
    registry: &ParserRegistry,
    settings: &Settings,
) -> RunRecord {
    let name = run_name(run_dir);
    let mut record = RunRecord {
        run: name.clone(),
        task_id: None,
        filter: None,
        termination: None,
        labeled_steps: None,
        evaluation: None,
        error: None,
    };

    let trajectory = match extract_run(run_dir, registry) {
        Ok((_, t)) => t,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    record.task_id = Some(trajectory.task_id.clone());
    let verdict = apply_filters(&trajectory);
    record.filter = Some(verdict);
    if !verdict.is_retained() {
        return record;
    }

    let out_dir = out_root.join(&name);
    let step = (|| -> Result<()> {
        fs::create_dir_all(&out_dir)?;
        let (seg, _) = segmentation_for(run_dir, &trajectory)?;
        let kinds = classify_steps(&trajectory);
        let tree = build_tree(&trajectory, &kinds);
        tracer_core::tree::emit_artifacts(&trajectory.steps, &tree, &seg, &out_dir)?;

        let report = build_trace_report(run_dir, &trajectory, settings)?;
        write_json_pretty(&out_dir.join(TRACE_REPORT_FILENAME), &report)?;
        record.termination = report.termination.clone();
        record.labeled_steps = Some(report.result.labeled_steps().len());
        record.evaluation = report.evaluation.clone();

        if trajectory.outcome != Outcome::Solved {
            let task = task_text_for(run_dir);
            let hint =
                render_hint(&trajectory, Some(&task), &report.result, report.diagnosis_cost);
            write_package(&out_dir, &hint, &replay_budget(&trajectory))?;
        }
        Ok(())
    })();
    if let Err(e) = step {
        record.error = Some(e.to_string());
    }
    record
}

fn summarize(records: &[RunRecord]) -> (CorpusSummary, Vec<InstanceEvaluation>) {
    let mut summary = CorpusSummary { total: records.len(), ..CorpusSummary::default() };
    let mut instances = Vec::new();
    for record in records {
        if record.error.is_some() {
            summary.errors += 1;
        }
        match record.filter {
            Some(FilterVerdict::Retained) => {
                summary.retained += 1;
                if record.error.is_none() {
                    summary.diagnosed += 1;
                }
            }
            Some(FilterVerdict::Rejected { reason }) => {
                *summary.rejected.entry(reason.to_string()).or_default() += 1;
            }
            None => {}
        }
        if let Some(eval) = &record.evaluation {
            summary.evaluated += 1;
            instances.push(eval.clone());
        }
    }
    (summary, instances)
}

fn write_corpus_report(out: &Path, report: &CorpusReport) -> Result<()> {
    fs::create_dir_all(out)?;
    write_json_pretty(&out.join(REPORT_FILENAME), report)?;
    let mut stream = String::new();
    for record in &report.runs {
        stream.push_str(&serde_json::to_string(record).expect("records serialize"));
        stream.push('\n');
    }
    let stream_path = out.join(REPORT_STREAM_FILENAME);
    fs::write(&stream_path, stream)
        .with_context(|| format!("writing {}", stream_path.display()))?;
    Ok(())
}

/// Run the full pipeline over a corpus: extract, filter, index, diagnose,
/// score against shipped gold labels, and emit replay packages.
pub fn cmd_pipeline(
    corpus: &Path,
    out: &Path,
    parsers: Option<&Path>,
    settings: &Settings,
) -> Result<()> {
    let registry = load_registry(parsers)?;
    let dirs = corpus_run_dirs(corpus)?;

    let workers = settings.jobs.clamp(1, dirs.len());
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<RunRecord>>> = Mutex::new(vec![None; dirs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= dirs.len() {
                    break;
                }
                let record = process_run(&dirs[i], out, &registry, settings);
                slots.lock().expect("no panics hold this lock")[i] = Some(record);
            });
        }
    });
    let records: Vec<RunRecord> = slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every run produced a record"))
        .collect();

    let (summary, instances) = summarize(&records);
    if summary.total > 0 && summary.retained + summary.rejected.values().sum::<usize>() == 0 {
        bail!("no run in {} could be extracted", corpus.display());
    }
    let scores = (!instances.is_empty()).then(|| macro_aggregate(&instances));
    let report = CorpusReport { config: settings.resolved(), summary, scores, runs: records };
    write_corpus_report(out, &report)?;
    println!(
        "pipeline over {} run(s): {} retained, {} diagnosed, {} evaluated, {} error(s); \
         reports at {}",
        report.summary.total,
        report.summary.retained,
        report.summary.diagnosed,
        report.summary.evaluated,
        report.summary.errors,
        out.display(),
    );
    Ok(())
}

/// Score existing predictions against the gold labels shipped with a corpus.
pub fn cmd_evaluate(
    corpus: &Path,
    pred: &Path,
    out: Option<&Path>,
    parsers: Option<&Path>,
    settings: &Settings,
) -> Result<()> {
    let registry = load_registry(parsers)?;
    let dirs = corpus_run_dirs(corpus)?;
    let mut records = Vec::new();

    for run_dir in &dirs {
        let name = run_name(run_dir);
        let mut record = RunRecord {
            run: name.clone(),
            task_id: None,
            filter: None,
            termination: None,
            labeled_steps: None,
            evaluation: None,
            error: None,
        };
        let gold = match tracer_core::synth::read_gold(run_dir) {
            Ok(Some(gold)) => gold,
            Ok(None) => {
                records.push(record);
                continue;
            }
            Err(e) => {
                record.error = Some(e.to_string());
                records.push(record);
                continue;
            }
        };
        let step = (|| -> Result<()> {
            let (_, trajectory) = extract_run(run_dir, &registry)?;
            record.task_id = Some(trajectory.task_id.clone());
            record.filter = Some(apply_filters(&trajectory));
            let report_path = pred.join(&name).join(TRACE_REPORT_FILENAME);
            let text = fs::read_to_string(&report_path)
                .with_context(|| format!("reading prediction {}", report_path.display()))?;
            let report: TraceReport = serde_json::from_str(&text)
                .with_context(|| format!("parsing prediction {}", report_path.display()))?;
            record.termination = report.termination.clone();
            record.labeled_steps = Some(report.result.labeled_steps().len());
            record.evaluation =
                Some(evaluate_instance(&trajectory.task_id, &report.result, &gold));
            Ok(())
        })();
        if let Err(e) = step {
            record.error = Some(format!("{e:#}"));
        }
        records.push(record);
    }

    let (summary, instances) = summarize(&records);
    if instances.is_empty() {
        bail!("no run under {} had both gold labels and a prediction", corpus.display());
    }
    let report = CorpusReport {
        config: settings.resolved(),
        summary,
        scores: Some(macro_aggregate(&instances)),
        runs: records,
    };
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| pred.to_path_buf());
    write_corpus_report(&out_dir, &report)?;
    let scores = report.scores.as_ref().expect("just set");
    println!(
        "evaluated {} instance(s) ({} excluded for empty gold): union F1 {:.4}, \
         incorrect F1 {:.4}, unuseful F1 {:.4}; reports at {}",
        scores.scored,
        scores.excluded_empty_gold,
        scores.union.f1,
        scores.incorrect.f1,
        scores.unuseful.f1,
        out_dir.display(),
    );
    Ok(())
}
