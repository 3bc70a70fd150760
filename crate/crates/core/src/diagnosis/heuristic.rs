//! Deterministic fallback analyst: scores each stage span on observable
//! failure signals and labels the highest-scoring one.
//!
//! The four signals per span are (a) a verification regression — the
//! nearest test before the span passed while the nearest test after the
//! span's last state change failed; (b) the total diff magnitude reported
//! by the span's change steps; (c) how many later spans returned to files
//! this span touched; and (d) the span's change-to-step ratio. The
//! regression signal dominates by construction: its weight exceeds the
//! sum of the bounded remaining terms, so any regression span outranks
//! every non-regression span.

use std::collections::BTreeSet;

use crate::commands::{command_paths, is_test_command};
use crate::model::{DiagnosisResult, StageDiagnosis, StepKind, Trajectory};
use crate::tree::{classify_steps, StageSegmentation, StageSpan};

use super::collect_evidence;

/// Weight of the regression signal; larger than the sum of all other terms.
pub const REGRESSION_WEIGHT: f64 = 4.0;

/// Observable failure signals for one stage span.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageFeatures {
    /// Tests passed before the span and failed after its last change.
    pub verification_regression: bool,
    /// Total changed lines reported by diff-style outputs in the span.
    pub diff_magnitude: u64,
    /// Later spans whose commands touch paths this span changed.
    pub backtrack_frequency: u32,
    /// Fraction of the span's steps that changed state.
    pub change_ratio: f64,
}

impl StageFeatures {
    /// Weighted score. Every non-regression term is normalized below 1, so
    /// the total without a regression stays under [`REGRESSION_WEIGHT`].
    pub fn composite(&self) -> f64 {
        let regression = if self.verification_regression { REGRESSION_WEIGHT } else { 0.0 };
        let diff = self.diff_magnitude as f64;
        let backtrack = self.backtrack_frequency as f64;
        regression
            + diff / (diff + 10.0)
            + 2.0 * (backtrack / (backtrack + 3.0))
            + 0.5 * (1.0 - self.change_ratio)
    }
}

fn diff_magnitude_of(output: &str) -> u64 {
    use regex::Regex;
    use std::sync::OnceLock;
    static RES: OnceLock<[Regex; 3]> = OnceLock::new();
    let patterns = RES.get_or_init(|| {
        [
            Regex::new(r"(\d+) insertions?\(\+\)").expect("pattern compiles"),
            Regex::new(r"(\d+) deletions?\(-\)").expect("pattern compiles"),
            Regex::new(r"(\d+) lines? changed").expect("pattern compiles"),
        ]
    });
    patterns
        .iter()
        .flat_map(|re| re.captures_iter(output))
        .filter_map(|c| c[1].parse::<u64>().ok())
        .sum()
}

fn span_steps<'t>(
    t: &'t Trajectory,
    span: &StageSpan,
) -> impl Iterator<Item = &'t crate::model::StepRecord> {
    let (a, b) = span.bounds();
    t.steps.iter().filter(move |s| a <= s.step_id && s.step_id <= b)
}

/// Compute the failure signals for every span of the segmentation.
pub fn stage_features(
    t: &Trajectory,
    kinds: &[StepKind],
    seg: &StageSegmentation,
) -> Vec<StageFeatures> {
    let kind_of = |step_id: u32| kinds[(step_id - 1) as usize];
    let change_paths_per_span: Vec<BTreeSet<String>> = seg
        .spans
        .iter()
        .map(|span| {
            span_steps(t, span)
                .filter(|s| kind_of(s.step_id) == StepKind::Change)
                .flat_map(|s| command_paths(&s.action.content))
                .collect()
        })
        .collect();
    let all_paths_per_span: Vec<BTreeSet<String>> = seg
        .spans
        .iter()
        .map(|span| span_steps(t, span).flat_map(|s| command_paths(&s.action.content)).collect())
        .collect();

    seg.spans
        .iter()
        .enumerate()
        .map(|(i, span)| {
            let last_change = span_steps(t, span)
                .filter(|s| kind_of(s.step_id) == StepKind::Change)
                .map(|s| s.step_id)
                .max();

            let verification_regression = match last_change {
                None => false,
                Some(change_id) => {
                    let before_passes = t
                        .steps
                        .iter()
                        .filter(|s| s.step_id < span.start_step_id)
                        .rfind(|s| is_test_command(&s.action.content))
                        .is_some_and(|s| s.returncode() == Some(0));
                    let after_fails = t
                        .steps
                        .iter()
                        .filter(|s| s.step_id > change_id)
                        .find(|s| is_test_command(&s.action.content))
                        .is_some_and(|s| s.failed());
                    before_passes && after_fails
                }
            };

            let diff_magnitude = span_steps(t, span)
                .filter(|s| kind_of(s.step_id) == StepKind::Change)
                .filter_map(|s| s.observation.as_ref())
                .map(|o| diff_magnitude_of(&o.content))
                .sum();

            let changed = &change_paths_per_span[i];
            let backtrack_frequency = if changed.is_empty() {
                0
            } else {
                all_paths_per_span[i + 1..]
                    .iter()
                    .filter(|later| later.intersection(changed).next().is_some())
                    .count() as u32
            };

            let total = span_steps(t, span).count();
            let changes =
                span_steps(t, span).filter(|s| kind_of(s.step_id) == StepKind::Change).count();
            let change_ratio = if total == 0 { 0.0 } else { changes as f64 / total as f64 };

            StageFeatures {
                verification_regression,
                diff_magnitude,
                backtrack_frequency,
                change_ratio,
            }
        })
        .collect()
}

/// Deterministic diagnosis: label the highest-scoring span, marking failing
/// change steps incorrect and repeated exploration steps unuseful. Returns
/// the empty result when nothing in the run ever failed.
pub fn heuristic_diagnose(t: &Trajectory, seg: &StageSegmentation) -> DiagnosisResult {
    if t.steps.is_empty() || seg.spans.is_empty() || !t.steps.iter().any(|s| s.failed()) {
        return DiagnosisResult::empty();
    }
    let kinds = classify_steps(t);
    let features = stage_features(t, &kinds, seg);

    let mut winner = 0usize;
    let mut best = f64::NEG_INFINITY;
    for (i, f) in features.iter().enumerate() {
        let score = f.composite();
        if score > best {
            best = score;
            winner = i;
        }
    }
    let span = &seg.spans[winner];
    let kind_of = |step_id: u32| kinds[(step_id - 1) as usize];

    let incorrect_step_ids: BTreeSet<u32> = span_steps(t, span)
        .filter(|s| kind_of(s.step_id) == StepKind::Change && s.failed())
        .map(|s| s.step_id)
        .collect();
    let unuseful_step_ids: BTreeSet<u32> = span_steps(t, span)
        .filter(|s| kind_of(s.step_id) == StepKind::Explore)
        .filter(|s| {
            t.steps
                .iter()
                .take_while(|earlier| earlier.step_id < s.step_id)
                .any(|earlier| earlier.action.content == s.action.content)
        })
        .map(|s| s.step_id)
        .collect();

    let f = &features[winner];
    let reasoning = format!(
        "{} stage selected by failure signals (score {:.3}): regression={}, changed_lines={}, \
         revisited_by_later_stages={}, change_ratio={:.2}",
        span.stage,
        f.composite(),
        f.verification_regression,
        f.diff_magnitude,
        f.backtrack_frequency,
        f.change_ratio,
    );

    let evidence_ids: Vec<u32> =
        incorrect_step_ids.iter().chain(unuseful_step_ids.iter()).copied().collect();
    DiagnosisResult {
        stages: vec![StageDiagnosis {
            stage_id: span.bounds(),
            incorrect_step_ids,
            unuseful_step_ids,
            reasoning,
        }],
        evidence: collect_evidence(t, evidence_ids, 5),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Outcome, StepRecord};
    use crate::tree::segment_stages;

    fn step(id: u32, cmd: &str, out: &str, rc: i32) -> StepRecord {
        StepRecord::new(id, cmd, out, rc)
    }

    fn trajectory(steps: Vec<StepRecord>) -> Trajectory {
        Trajectory {
            task_id: "t".into(),
            framework_id: "f".into(),
            backbone_id: "b".into(),
            outcome: Outcome::Unsolved,
            run_flags: Default::default(),
            total_tokens: None,
            steps,
        }
    }

    /// env probe, install, inspect, baseline test (pass), good edit, test
    /// (pass), bad edit, test (fail), revert attempt, test (fail).
    fn cascade() -> Trajectory {
        trajectory(vec![
            step(1, "python --version", "Python 3.11", 0),
            step(2, "pip install -r requirements.txt", "installed", 0),
            step(3, "cat src/core.py", "def f(): ...", 0),
            step(4, "pytest tests/", "5 passed", 0),
            step(5, "sed -i 's/a/b/' src/utils.py", "1 insertion(+), 1 deletion(-)", 0),
            step(6, "pytest tests/", "5 passed", 0),
            step(7, "sed -i 's/x/y/' src/core.py", "applied with conflicts; 3 insertions(+), 2 deletions(-)", 1),
            step(8, "pytest tests/", "2 failed, 3 passed", 1),
            step(9, "sed -i 's/y/x/' src/core.py", "2 insertions(+), 3 deletions(-)", 1),
            step(10, "pytest tests/", "2 failed, 3 passed", 1),
        ])
    }

    #[test]
    fn diff_magnitude_parses_all_three_shapes() {
        assert_eq!(diff_magnitude_of("3 insertions(+), 2 deletions(-)"), 5);
        assert_eq!(diff_magnitude_of("1 insertion(+)"), 1);
        assert_eq!(diff_magnitude_of("12 lines changed"), 12);
        assert_eq!(diff_magnitude_of("nothing here"), 0);
    }

    #[test]
    fn composite_without_regression_stays_below_the_regression_weight() {
        let f = StageFeatures {
            verification_regression: false,
            diff_magnitude: u64::MAX / 2,
            backtrack_frequency: u32::MAX,
            change_ratio: 0.0,
        };
        assert!(f.composite() < REGRESSION_WEIGHT);
        let g = StageFeatures {
            verification_regression: true,
            diff_magnitude: 0,
            backtrack_frequency: 0,
            change_ratio: 1.0,
        };
        assert!(g.composite() >= REGRESSION_WEIGHT);
    }

    #[test]
    fn regression_span_wins_and_failing_change_is_incorrect() {
        let t = cascade();
        let kinds = classify_steps(&t);
        let seg = segment_stages(&t, &kinds);
        let result = heuristic_diagnose(&t, &seg);
        assert_eq!(result.stages.len(), 1);
        let stage = &result.stages[0];
        let (_, winner) = seg.span_of(7).expect("step 7 has a span");
        assert_eq!(stage.stage_id, winner.bounds(), "the bad-edit span is selected");
        assert!(stage.incorrect_step_ids.contains(&7));
        assert!(!stage.reasoning.is_empty());
        assert!(!result.evidence.is_empty());
    }

    #[test]
    fn features_isolate_the_regression_to_the_bad_edit_span() {
        let t = cascade();
        let kinds = classify_steps(&t);
        let seg = segment_stages(&t, &kinds);
        let features = stage_features(&t, &kinds, &seg);
        let regressed: Vec<usize> = features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.verification_regression)
            .map(|(i, _)| i)
            .collect();
        let (bad_span_idx, _) = seg.span_of(7).unwrap();
        assert_eq!(regressed, vec![bad_span_idx]);
    }

    #[test]
    fn all_green_run_yields_the_empty_result() {
        let t = trajectory(vec![
            step(1, "ls", "src", 0),
            step(2, "pytest", "3 passed", 0),
            step(3, "sed -i 's/a/b/' src/m.py", "done", 0),
            step(4, "pytest", "3 passed", 0),
        ]);
        let kinds = classify_steps(&t);
        let seg = segment_stages(&t, &kinds);
        assert_eq!(heuristic_diagnose(&t, &seg), DiagnosisResult::empty());
    }

    #[test]
    fn repeated_exploration_in_the_winning_span_is_unuseful() {
        let t = trajectory(vec![
            step(1, "pytest tests/", "1 passed", 0),
            step(2, "cat src/core.py", "def f(): ...", 0),
            step(3, "cat src/core.py", "def f(): ...", 0),
            step(4, "sed -i 's/x/y/' src/core.py", "1 insertion(+)", 0),
            step(5, "pytest tests/", "1 failed", 1),
        ]);
        let kinds = classify_steps(&t);
        let seg = segment_stages(&t, &kinds);
        let result = heuristic_diagnose(&t, &seg);
        let stage = &result.stages[0];
        let (_, winner) = seg.span_of(4).unwrap();
        assert_eq!(stage.stage_id, winner.bounds());
        // step 3 repeats step 2's command; it is unuseful only if it falls
        // inside the winning span
        if winner.contains(3) {
            assert!(stage.unuseful_step_ids.contains(&3));
        }
        assert!(stage.incorrect_step_ids.is_empty(), "the edit itself exited 0");
    }

    #[test]
    fn backtracking_counts_later_spans_touching_changed_paths() {
        let t = cascade();
        let kinds = classify_steps(&t);
        let seg = segment_stages(&t, &kinds);
        let features = stage_features(&t, &kinds, &seg);
        let (bad_idx, _) = seg.span_of(7).unwrap();
        // step 9 (a later span) touches src/core.py again
        assert!(features[bad_idx].backtrack_frequency >= 1);
    }
}
