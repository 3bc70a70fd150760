//! Deterministic synthetic run generator with planted failure cascades.
//!
//! Every generated run is a complete, extraction-compatible run directory:
//! a canonical step log, metadata, a task description, and gold labels
//! whose planted step ids are known by construction. A failing run carries
//! a failure onset — one bad state change — followed by a cascade of
//! failing verifications and recovery attempts; everything before the onset
//! is green, and every pre-onset change is vouched for by an immediately
//! following passing test. Archetype knobs produce the degenerate shapes
//! the corpus filters must reject (timeouts, truncated dumps, corrupt
//! environments, trivially short solved runs).

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::{write_run_dir, ExtractError, RunMeta};
use crate::model::{
    ErrorType, GoldAnnotation, GoldStage, Outcome, RunFlag, StepRecord, Trajectory,
};
use crate::tree::{classify_steps, segment_stages, StageSegmentation};
use crate::model::{StageLabel, StepKind};

/// Filename for the generated task description.
pub const TASK_FILENAME: &str = "task.md";

/// Filename for the generated gold labels.
pub const GOLD_FILENAME: &str = "gold_labels.json";

/// Shape of the generated run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    /// Unsolved run with a planted onset and failure cascade.
    FailingCascade,
    /// Solved run, all green, at least ten steps.
    CleanSolved,
    /// Failing cascade whose metadata carries the timed-out marker.
    Timeout,
    /// Failing cascade whose metadata carries the truncated marker.
    TruncatedGeneration,
    /// Failing cascade flagged corrupt via the `run_flags.json` sidecar.
    EnvCorrupt,
    /// Solved run shorter than the short-correct threshold.
    ShortCorrect,
}

/// Knobs for one generated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub archetype: Archetype,
    /// Stage the onset lands in: dependency installation or patching.
    pub onset_stage: StageLabel,
    /// Steps in the failure cascade after the onset (>= 1 when failing).
    pub cascade_len: usize,
    /// Duplicated exploration steps planted as unuseful gold labels.
    pub noise_duplicates: usize,
    /// Passing edit+test pairs before the onset (at most 4).
    pub pre_onset_edits: usize,
    pub difficulty: Option<String>,
    pub category: Option<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            archetype: Archetype::FailingCascade,
            onset_stage: StageLabel::Patching,
            cascade_len: 2,
            noise_duplicates: 1,
            pre_onset_edits: 1,
            difficulty: None,
            category: None,
        }
    }
}

/// Configuration that cannot produce a well-formed run.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum SynthError {
    #[error("infeasible configuration: {0}")]
    Infeasible(String),
}

impl SynthConfig {
    fn is_failing(&self) -> bool {
        !matches!(self.archetype, Archetype::CleanSolved | Archetype::ShortCorrect)
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.is_failing() {
            if self.cascade_len == 0 {
                return Err(SynthError::Infeasible(
                    "a failing run needs a cascade of at least 1 step".into(),
                ));
            }
            if !matches!(
                self.onset_stage,
                StageLabel::DependencyInstallation | StageLabel::Patching
            ) {
                return Err(SynthError::Infeasible(format!(
                    "onset stage {} is not plantable; use dependency_installation or patching",
                    self.onset_stage
                )));
            }
        }
        if self.pre_onset_edits > 4 {
            return Err(SynthError::Infeasible("at most 4 pre-onset edits are supported".into()));
        }
        Ok(())
    }
}

/// A generated run with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRun {
    pub trajectory: Trajectory,
    pub gold: GoldAnnotation,
    pub segmentation: StageSegmentation,
    pub task_text: String,
    pub meta: RunMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Normal,
    Onset,
    CascadeEdit,
}

#[derive(Debug, Clone)]
struct Planned {
    command: String,
    output: String,
    rc: i32,
    tag: Tag,
}

impl Planned {
    fn ok(command: impl Into<String>, output: impl Into<String>) -> Self {
        Planned { command: command.into(), output: output.into(), rc: 0, tag: Tag::Normal }
    }

    fn failing(command: impl Into<String>, output: impl Into<String>, tag: Tag) -> Self {
        Planned { command: command.into(), output: output.into(), rc: 1, tag }
    }
}

const MODULE_POOL: [&str; 6] = ["auth", "parser", "core", "utils", "router", "cache"];
const PACKAGE_POOL: [&str; 4] = ["leftpad", "fastjson", "tinyorm", "webkit2"];
const DIFFICULTIES: [&str; 3] = ["easy", "medium", "hard"];
const CATEGORIES: [&str; 3] = ["bugfix", "feature", "refactor"];

fn env_phase(rng: &mut ChaCha8Rng, plan: &mut Vec<Planned>) {
    plan.push(Planned::ok(
        "python --version",
        format!("Python 3.11.{}", rng.random_range(0..9)),
    ));
    if rng.random_bool(0.5) {
        plan.push(Planned::ok("uname -a", "Linux builder 6.1.0-x86_64 GNU/Linux"));
    }
}

fn inspection_phase(rng: &mut ChaCha8Rng, plan: &mut Vec<Planned>, modules: &[&str]) {
    plan.push(Planned::ok("ls src", modules.join(".py ") + ".py"));
    for m in modules.iter().take(rng.random_range(2..=modules.len().min(3))) {
        plan.push(Planned::ok(
            format!("cat src/{m}.py"),
            format!("def {m}_main(args):\n    return run_{m}(args)"),
        ));
    }
}

fn passing_test(total: u32) -> Planned {
    Planned::ok("pytest tests/", format!("{total} passed"))
}

fn failing_test(total: u32, failed: u32) -> Planned {
    Planned::failing(
        "pytest tests/",
        format!("{failed} failed, {} passed", total.saturating_sub(failed)),
        Tag::Normal,
    )
}

/// Plan a failing run with the onset inside the patching stage.
fn plan_patching_cascade(rng: &mut ChaCha8Rng, config: &SynthConfig) -> Vec<Planned> {
    let mut plan = Vec::new();
    let total_tests = rng.random_range(3..=9);
    let mut modules: Vec<&str> = MODULE_POOL.to_vec();
    // reserve distinct modules: pre-onset edits first, onset target last
    let target = modules.remove(rng.random_range(0..modules.len()));

    env_phase(rng, &mut plan);
    plan.push(Planned::ok(
        "pip install -r requirements.txt",
        format!("Successfully installed fastjson-1.{}.0", rng.random_range(0..9)),
    ));
    inspection_phase(rng, &mut plan, &modules);
    plan.push(passing_test(total_tests));

    for j in 0..config.pre_onset_edits {
        let m = modules[j % modules.len()];
        plan.push(Planned::ok(
            format!("sed -i 's/legacy_{m}/clean_{m}/' src/{m}.py"),
            "1 insertion(+), 1 deletion(-)",
        ));
        plan.push(passing_test(total_tests));
    }

    plan.push(Planned::failing(
        format!("sed -i 's/{target}_main/{target}_run/' src/{target}.py"),
        format!(
            "patch applied with conflicts; {} insertions(+), {} deletions(-)",
            rng.random_range(2..=6),
            rng.random_range(1..=4)
        ),
        Tag::Onset,
    ));

    let failed = rng.random_range(1..=total_tests.min(3));
    for k in 1..=config.cascade_len {
        if k == config.cascade_len || k % 2 == 1 {
            plan.push(failing_test(total_tests, failed));
        } else {
            plan.push(Planned::failing(
                format!("sed -i 's/{target}_run/{target}_main{k}/' src/{target}.py"),
                "error: cannot reapply hunk; 2 insertions(+), 2 deletions(-)",
                Tag::CascadeEdit,
            ));
        }
    }
    plan
}

/// Plan a failing run with the onset inside dependency installation.
fn plan_dependency_cascade(rng: &mut ChaCha8Rng, config: &SynthConfig) -> Vec<Planned> {
    let mut plan = Vec::new();
    let package = PACKAGE_POOL[rng.random_range(0..PACKAGE_POOL.len())];
    let version = format!("{}.{}.{}", rng.random_range(2..9), rng.random_range(0..9), 0);

    env_phase(rng, &mut plan);
    plan.push(Planned::ok("pip --version", "pip 24.0"));
    plan.push(Planned::failing(
        "pip install -r requirements.txt",
        format!("ERROR: No matching distribution found for {package}=={version}"),
        Tag::Onset,
    ));
    for k in 1..=config.cascade_len {
        if k == config.cascade_len || k % 2 == 1 {
            plan.push(Planned::failing(
                "pytest tests/",
                format!("ImportError: No module named {package}"),
                Tag::Normal,
            ));
        } else {
            plan.push(Planned::failing(
                format!("pip install {package}=={version}"),
                format!("ERROR: No matching distribution found for {package}=={version}"),
                Tag::CascadeEdit,
            ));
        }
    }
    plan
}

/// Plan a solved, all-green run of at least `min_steps` steps.
fn plan_clean(rng: &mut ChaCha8Rng, config: &SynthConfig, min_steps: usize) -> Vec<Planned> {
    let mut plan = Vec::new();
    let total_tests = rng.random_range(3..=9);
    let mut modules: Vec<&str> = MODULE_POOL.to_vec();
    let target = modules.remove(rng.random_range(0..modules.len()));

    env_phase(rng, &mut plan);
    plan.push(Planned::ok(
        "pip install -r requirements.txt",
        "Successfully installed fastjson-1.2.0",
    ));
    inspection_phase(rng, &mut plan, &modules);
    plan.push(passing_test(total_tests));
    for j in 0..config.pre_onset_edits.max(1) {
        let m = if j == 0 { target } else { modules[j % modules.len()] };
        plan.push(Planned::ok(
            format!("sed -i 's/broken_{m}/fixed_{m}/' src/{m}.py"),
            "2 insertions(+), 2 deletions(-)",
        ));
        plan.push(passing_test(total_tests));
    }
    let mut pad = 1usize;
    while plan.len() + 1 < min_steps {
        plan.push(Planned::ok(format!("git log --oneline -{pad}"), "abc123 tidy up"));
        pad += 1;
    }
    plan.push(passing_test(total_tests));
    plan
}

/// Plan a solved run strictly shorter than `max_steps`.
fn plan_short(rng: &mut ChaCha8Rng, max_steps: usize) -> Vec<Planned> {
    let total_tests = rng.random_range(2..=5);
    let m = MODULE_POOL[rng.random_range(0..MODULE_POOL.len())];
    let plan = vec![
        Planned::ok("python --version", "Python 3.11.2"),
        Planned::ok("pip install -r requirements.txt", "Successfully installed fastjson-1.2.0"),
        Planned::ok(format!("cat src/{m}.py"), format!("def {m}_main(): ...")),
        Planned::ok(format!("sed -i 's/broken_{m}/fixed_{m}/' src/{m}.py"), "1 insertion(+), 1 deletion(-)"),
        passing_test(total_tests),
    ];
    assert!(plan.len() < max_steps);
    plan
}

fn steps_from_plan(plan: &[Planned]) -> Vec<StepRecord> {
    plan.iter()
        .enumerate()
        .map(|(i, p)| StepRecord::new(i as u32 + 1, p.command.clone(), p.output.clone(), p.rc))
        .collect()
}

/// Duplicate `count` randomly chosen exploration steps, inserting each copy
/// immediately after its original so it lands in the same stage span at a
/// later position. Returns the noisy plan and the duplicate indexes.
fn plant_noise_in_plan(
    rng: &mut ChaCha8Rng,
    plan: Vec<Planned>,
    count: usize,
) -> (Vec<Planned>, BTreeSet<usize>) {
    let mut plan = plan;
    let mut dup_indexes = BTreeSet::new();
    for _ in 0..count {
        let explore_positions: Vec<usize> = plan
            .iter()
            .enumerate()
            .filter(|(i, p)| {
                crate::commands::classify_kind(&p.command) == StepKind::Explore
                    && !crate::commands::is_test_command(&p.command)
                    && !dup_indexes.contains(i)
            })
            .map(|(i, _)| i)
            .collect();
        if explore_positions.is_empty() {
            break;
        }
        let original = explore_positions[rng.random_range(0..explore_positions.len())];
        let copy = Planned { tag: Tag::Normal, ..plan[original].clone() };
        plan.insert(original + 1, copy);
        // shift previously recorded duplicate indexes that moved
        dup_indexes = dup_indexes
            .into_iter()
            .map(|i| if i > original { i + 1 } else { i })
            .collect();
        dup_indexes.insert(original + 1);
    }
    (plan, dup_indexes)
}

/// Insert duplicated exploration steps into an existing trajectory; each
/// copy goes immediately after its original (same stage, later position).
/// Step ids are re-indexed; returns the noisy trajectory and the ids of the
/// inserted duplicates.
pub fn plant_noise(t: &Trajectory, seed: u64, count: usize) -> (Trajectory, BTreeSet<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan: Vec<Planned> = t
        .steps
        .iter()
        .map(|s| Planned {
            command: s.action.content.clone(),
            output: s.observation.as_ref().map(|o| o.content.clone()).unwrap_or_default(),
            rc: s.returncode().unwrap_or(0),
            tag: Tag::Normal,
        })
        .collect();
    let (noisy, dup_indexes) = plant_noise_in_plan(&mut rng, plan, count);
    let mut out = t.clone();
    out.steps = steps_from_plan(&noisy);
    let dup_ids = dup_indexes.into_iter().map(|i| i as u32 + 1).collect();
    (out, dup_ids)
}

fn stage_reasoning(
    has_onset: bool,
    has_cascade_edit: bool,
    has_dup: bool,
    stage: StageLabel,
) -> String {
    if has_onset {
        "the defect was introduced here and the run never recovered from it".into()
    } else if has_cascade_edit {
        "failed recovery attempts kept reworking the broken change".into()
    } else if has_dup {
        "repeated exploration re-read what was already known".into()
    } else {
        format!("routine {stage} work with no failure signals")
    }
}

/// Generate one synthetic run. The same seed and configuration always
/// produce byte-identical artifacts.
pub fn generate(seed: u64, config: &SynthConfig) -> Result<SynthRun, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let base_plan = match config.archetype {
        Archetype::CleanSolved => plan_clean(&mut rng, config, 10),
        Archetype::ShortCorrect => plan_short(&mut rng, 10),
        _ => match config.onset_stage {
            StageLabel::DependencyInstallation => plan_dependency_cascade(&mut rng, config),
            _ => plan_patching_cascade(&mut rng, config),
        },
    };
    let (plan, dup_indexes) = plant_noise_in_plan(&mut rng, base_plan, config.noise_duplicates);

    let steps = steps_from_plan(&plan);
    let onset_id = plan
        .iter()
        .position(|p| p.tag == Tag::Onset)
        .map(|i| i as u32 + 1);
    let incorrect_ids: BTreeSet<u32> = plan
        .iter()
        .enumerate()
        .filter(|(_, p)| matches!(p.tag, Tag::Onset | Tag::CascadeEdit))
        .map(|(i, _)| i as u32 + 1)
        .collect();
    let unuseful_ids: BTreeSet<u32> = dup_indexes.iter().map(|i| *i as u32 + 1).collect();

    let outcome = if config.is_failing() { Outcome::Unsolved } else { Outcome::Solved };
    let mut run_flags = BTreeSet::new();
    match config.archetype {
        Archetype::Timeout => {
            run_flags.insert(RunFlag::TimedOut);
        }
        Archetype::TruncatedGeneration => {
            run_flags.insert(RunFlag::TruncatedGeneration);
        }
        Archetype::EnvCorrupt => {
            run_flags.insert(RunFlag::EnvCorrupt);
        }
        _ => {}
    }

    let task_id = format!("synth-{seed:08x}");
    let trajectory = Trajectory {
        task_id: task_id.clone(),
        framework_id: "synthlab".into(),
        backbone_id: "synthetic-v1".into(),
        outcome,
        run_flags,
        total_tokens: Some(rng.random_range(6_000..20_000)),
        steps,
    };

    let kinds = classify_steps(&trajectory);
    let segmentation = segment_stages(&trajectory, &kinds);
    let stages: Vec<GoldStage> = segmentation
        .spans
        .iter()
        .map(|span| {
            let incorrect: BTreeSet<u32> =
                incorrect_ids.iter().copied().filter(|id| span.contains(*id)).collect();
            let unuseful: BTreeSet<u32> =
                unuseful_ids.iter().copied().filter(|id| span.contains(*id)).collect();
            let has_onset = onset_id.is_some_and(|id| span.contains(id));
            let reasoning = stage_reasoning(
                has_onset,
                !incorrect.is_empty() && !has_onset,
                !unuseful.is_empty(),
                span.stage,
            );
            GoldStage {
                stage: span.stage,
                stage_id: span.bounds(),
                incorrect_step_ids: incorrect,
                unuseful_step_ids: unuseful,
                reasoning,
            }
        })
        .collect();

    let error_type = if config.is_failing() {
        Some(match config.onset_stage {
            StageLabel::DependencyInstallation => ErrorType::DependencyResolution,
            _ => ErrorType::MislocalizedEdit,
        })
    } else {
        None
    };
    let gold = GoldAnnotation {
        stages,
        error_critical_step: onset_id,
        error_type: if onset_id.is_some() { error_type } else { None },
        outcome: Some(outcome),
    };

    let difficulty = config
        .difficulty
        .clone()
        .unwrap_or_else(|| DIFFICULTIES[rng.random_range(0..DIFFICULTIES.len())].to_string());
    let category = config
        .category
        .clone()
        .unwrap_or_else(|| CATEGORIES[rng.random_range(0..CATEGORIES.len())].to_string());
    let mut meta = RunMeta::from_trajectory(&trajectory);
    meta.difficulty = Some(difficulty.clone());
    meta.category = Some(category.clone());

    let task_text = format!(
        "# Task {task_id}\n\nFix the failing behavior reported in the {category} ticket. \
         Difficulty: {difficulty}. Make the project's test suite pass without breaking \
         existing functionality.\n"
    );

    Ok(SynthRun { trajectory, gold, segmentation, task_text, meta })
}

/// Write a generated run as a complete run directory.
pub fn write_synth_run(dir: &Path, run: &SynthRun) -> Result<(), ExtractError> {
    write_run_dir(dir, &run.trajectory, &run.meta)?;
    let io_err = |e: std::io::Error, p: &Path| ExtractError::Io { path: p.into(), source: e };
    let task_path = dir.join(TASK_FILENAME);
    fs::write(&task_path, &run.task_text).map_err(|e| io_err(e, &task_path))?;
    let gold_path = dir.join(GOLD_FILENAME);
    let mut gold = serde_json::to_string_pretty(&run.gold).expect("gold always serializes");
    gold.push('\n');
    fs::write(&gold_path, gold).map_err(|e| io_err(e, &gold_path))?;
    Ok(())
}

/// Read gold labels from a run directory, when present.
pub fn read_gold(dir: &Path) -> Result<Option<GoldAnnotation>, ExtractError> {
    let path = dir.join(GOLD_FILENAME);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)
        .map_err(|e| ExtractError::Io { path: path.clone(), source: e })?;
    let gold = serde_json::from_str(&text)
        .map_err(|_| ExtractError::MalformedArtifact { path: path.clone(), offset: 0 })?;
    Ok(Some(gold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnosis::heuristic_diagnose;
    use crate::extraction::{apply_filters, FilterVerdict, RejectReason};
    use crate::model::validate_trajectory;

    #[test]
    fn generation_is_deterministic_per_seed() {
        let config = SynthConfig::default();
        let a = generate(7, &config).unwrap();
        let b = generate(7, &config).unwrap();
        assert_eq!(a, b);
        let c = generate(8, &config).unwrap();
        assert_ne!(a.trajectory, c.trajectory);
    }

    #[test]
    fn failing_cascade_has_green_prefix_onset_and_failing_tail() {
        for seed in 0..20 {
            let run = generate(seed, &SynthConfig::default()).unwrap();
            let t = &run.trajectory;
            assert!(validate_trajectory(t).is_valid());
            assert!(run.segmentation.covers(t.steps.len() as u32));

            let onset = run.gold.error_critical_step.expect("failing runs have an onset");
            let onset_step = t.step(onset).unwrap();
            assert!(onset_step.failed(), "the onset reports a failing observation");
            for step in t.steps.iter().filter(|s| s.step_id < onset) {
                assert_eq!(step.returncode(), Some(0), "everything before the onset is green");
            }
            let last = t.steps.last().unwrap();
            assert!(last.failed(), "the cascade ends on a failure");
            assert!(crate::commands::is_test_command(&last.action.content));
            assert_eq!(t.outcome, Outcome::Unsolved);
            assert!(run.gold.incorrect_step_ids().contains(&onset));
        }
    }

    #[test]
    fn gold_spans_equal_the_computed_segmentation() {
        let run = generate(11, &SynthConfig::default()).unwrap();
        let spans: Vec<(StageLabel, (u32, u32))> =
            run.segmentation.spans.iter().map(|s| (s.stage, s.bounds())).collect();
        assert_eq!(run.gold.stage_spans(), spans);
        for stage in &run.gold.stages {
            assert!(!stage.reasoning.trim().is_empty());
        }
    }

    #[test]
    fn heuristic_recovers_the_onset_stage_on_planted_cascades() {
        for seed in 0..25 {
            let run = generate(seed, &SynthConfig::default()).unwrap();
            let predicted = heuristic_diagnose(&run.trajectory, &run.segmentation);
            assert_eq!(predicted.stages.len(), 1, "seed {seed}");
            let onset = run.gold.error_critical_step.unwrap();
            let (_, onset_span) = run.segmentation.span_of(onset).unwrap();
            assert_eq!(
                predicted.stages[0].stage_id,
                onset_span.bounds(),
                "seed {seed}: winner must be the onset span"
            );
        }
    }

    #[test]
    fn minimal_cascade_prediction_matches_gold_exactly() {
        let config = SynthConfig {
            cascade_len: 1,
            noise_duplicates: 0,
            ..SynthConfig::default()
        };
        for seed in 0..25 {
            let run = generate(seed, &config).unwrap();
            let predicted = heuristic_diagnose(&run.trajectory, &run.segmentation);
            assert_eq!(predicted.incorrect_steps(), run.gold.incorrect_step_ids(), "seed {seed}");
            assert_eq!(predicted.unuseful_steps(), run.gold.unuseful_step_ids(), "seed {seed}");
        }
    }

    #[test]
    fn noise_duplicates_earlier_exploration_in_the_same_stage() {
        let config = SynthConfig { noise_duplicates: 2, ..SynthConfig::default() };
        let run = generate(3, &config).unwrap();
        let dups = run.gold.unuseful_step_ids();
        assert_eq!(dups.len(), 2);
        for id in &dups {
            let dup = run.trajectory.step(*id).unwrap();
            let original = run.trajectory.step(*id - 1).expect("copies sit after originals");
            assert_eq!(dup.action.content, original.action.content);
            let (dup_span, _) = run.segmentation.span_of(*id).unwrap();
            let (orig_span, _) = run.segmentation.span_of(original.step_id).unwrap();
            assert_eq!(dup_span, orig_span, "duplicate stays in its original's stage");
        }
    }

    #[test]
    fn dependency_onset_lands_in_the_dependency_stage() {
        let config = SynthConfig {
            onset_stage: StageLabel::DependencyInstallation,
            ..SynthConfig::default()
        };
        let run = generate(5, &config).unwrap();
        let onset = run.gold.error_critical_step.unwrap();
        let stage = run.gold.enclosing_stage(onset).unwrap();
        assert_eq!(stage.stage, StageLabel::DependencyInstallation);
        assert_eq!(run.gold.error_type, Some(ErrorType::DependencyResolution));

        let patching = generate(5, &SynthConfig::default()).unwrap();
        let onset = patching.gold.error_critical_step.unwrap();
        assert_eq!(patching.gold.enclosing_stage(onset).unwrap().stage, StageLabel::Patching);
        assert_eq!(patching.gold.error_type, Some(ErrorType::MislocalizedEdit));
    }

    #[test]
    fn clean_runs_are_green_solved_and_retained() {
        let config = SynthConfig {
            archetype: Archetype::CleanSolved,
            noise_duplicates: 0,
            ..SynthConfig::default()
        };
        for seed in 0..10 {
            let run = generate(seed, &config).unwrap();
            assert!(run.trajectory.steps.len() >= 10);
            assert_eq!(run.trajectory.outcome, Outcome::Solved);
            assert!(run.trajectory.steps.iter().all(|s| !s.failed()));
            assert!(run.gold.labeled_steps().is_empty());
            assert_eq!(run.gold.error_critical_step, None);
            assert_eq!(apply_filters(&run.trajectory), FilterVerdict::Retained);
            assert!(heuristic_diagnose(&run.trajectory, &run.segmentation).is_empty());
        }
    }

    #[test]
    fn degenerate_archetypes_are_rejected_by_the_filters() {
        let case = |archetype| {
            let run = generate(9, &SynthConfig { archetype, ..SynthConfig::default() }).unwrap();
            apply_filters(&run.trajectory)
        };
        assert_eq!(
            case(Archetype::Timeout),
            FilterVerdict::Rejected { reason: RejectReason::Timeout }
        );
        assert_eq!(
            case(Archetype::TruncatedGeneration),
            FilterVerdict::Rejected { reason: RejectReason::TruncatedGeneration }
        );
        assert_eq!(
            case(Archetype::EnvCorrupt),
            FilterVerdict::Rejected { reason: RejectReason::EnvCorrupt }
        );
        assert_eq!(
            case(Archetype::ShortCorrect),
            FilterVerdict::Rejected { reason: RejectReason::ShortCorrect }
        );
    }

    #[test]
    fn infeasible_configurations_are_refused() {
        let zero_cascade = SynthConfig { cascade_len: 0, ..SynthConfig::default() };
        assert!(matches!(generate(1, &zero_cascade), Err(SynthError::Infeasible(_))));

        let bad_stage = SynthConfig {
            onset_stage: StageLabel::Verification,
            ..SynthConfig::default()
        };
        assert!(matches!(generate(1, &bad_stage), Err(SynthError::Infeasible(_))));

        let too_many_edits = SynthConfig { pre_onset_edits: 5, ..SynthConfig::default() };
        assert!(matches!(generate(1, &too_many_edits), Err(SynthError::Infeasible(_))));
    }

    #[test]
    fn plant_noise_reindexes_and_reports_duplicate_ids() {
        let base = generate(2, &SynthConfig { noise_duplicates: 0, ..SynthConfig::default() })
            .unwrap()
            .trajectory;
        let (noisy, dup_ids) = plant_noise(&base, 42, 2);
        assert_eq!(noisy.steps.len(), base.steps.len() + 2);
        assert!(validate_trajectory(&noisy).is_valid());
        assert_eq!(dup_ids.len(), 2);
        for id in dup_ids {
            let dup = noisy.step(id).unwrap();
            let prev = noisy.step(id - 1).unwrap();
            assert_eq!(dup.action.content, prev.action.content);
        }
    }

    #[test]
    fn written_run_dirs_carry_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let run = generate(4, &SynthConfig::default()).unwrap();
        write_synth_run(dir.path(), &run).unwrap();
        assert!(dir.path().join("steps.json").is_file());
        assert!(dir.path().join("run_meta.json").is_file());
        assert!(dir.path().join(TASK_FILENAME).is_file());
        assert!(dir.path().join(GOLD_FILENAME).is_file());
        assert!(!dir.path().join("run_flags.json").exists(), "no sidecar without corruption");

        let gold = read_gold(dir.path()).unwrap().expect("gold labels readable");
        assert_eq!(gold, run.gold);

        let corrupt = generate(4, &SynthConfig {
            archetype: Archetype::EnvCorrupt,
            ..SynthConfig::default()
        })
        .unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        write_synth_run(dir2.path(), &corrupt).unwrap();
        assert!(dir2.path().join("run_flags.json").is_file());
    }
}
