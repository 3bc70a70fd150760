//! Toolkit for turning heterogeneous code-agent run directories into
//! standardized hierarchical trace trees, localizing where a failed run
//! first went wrong, scoring predictions against gold step labels, and
//! emitting compact hints for a reflective second attempt.
//!
//! The pipeline runs in four layers:
//!
//! 1. [`extraction`] discovers a run directory's layout, fingerprints the
//!    step-bearing artifact, and normalizes it into a [`model::Trajectory`]
//!    (one record per executed command), then applies the corpus filters.
//! 2. [`tree`] classifies each step as exploration or state change, builds
//!    the hierarchical trace tree, segments the run into canonical stages,
//!    and emits the on-disk index artifacts.
//! 3. [`diagnosis`] runs the strict inspect/write/finalize labeling
//!    protocol against a model client (or the deterministic heuristic)
//!    to produce failure-relevant step labels with evidence.
//! 4. [`evaluation`] scores predicted labels against gold annotations and
//!    computes token/step budget analytics; [`replay`] packages the result
//!    as a budget-matched hint for a fresh attempt.
//!
//! [`synth`] generates seed-deterministic trajectories with planted failure
//! cascades and gold labels so every layer is testable offline.

pub mod commands;
pub mod diagnosis;
pub mod evaluation;
pub mod extraction;
pub mod model;
pub mod replay;
pub mod synth;
pub mod tree;
