//! Training data for the experience model: supervised records built from
//! trajectories, and reasoning-trace annotation through a chat endpoint.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chat::{extract_json_block, ChatClient, ChatMessage};
use crate::error::{Error, Result};
use crate::experience::HistoryItem;
use crate::jsonl;
use crate::prompts::{render, REASONING_ANNOTATION};
use crate::replay::{ReplayBuffer, Transition};
use crate::rollout::Trajectory;

/// One supervised example: the conditioning set of a transition and the
/// targets the experience model should produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftRecord {
    pub task: String,
    pub state: String,
    pub action: String,
    /// Earlier `(state, action)` pairs of the episode, oldest first.
    pub history: Vec<HistoryItem>,
    /// Retrieved transitions from other episodes.
    pub demos: Vec<Transition>,
    /// Target reasoning trace.
    pub reasoning: String,
    /// Target next state.
    pub next_state: String,
    /// Target reward.
    pub reward: f64,
    pub done: bool,
    /// Seed of the source episode.
    pub episode: u64,
    /// Turn index within the source episode.
    pub step: usize,
}

impl SftRecord {
    /// Exported records need non-empty textual targets.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.reasoning.trim().is_empty() {
            return Err("empty reasoning target".into());
        }
        if self.next_state.trim().is_empty() {
            return Err("empty next_state target".into());
        }
        if !self.reward.is_finite() {
            return Err(format!("non-finite reward {}", self.reward));
        }
        Ok(())
    }
}

/// One record per transition. Demos are the top-`k` buffer entries outside
/// the record's own episode (same task and episode seed).
pub fn build_sft_records(trajectories: &[Trajectory], buffer: &ReplayBuffer, k: usize) -> Vec<SftRecord> {
    trajectories
        .par_iter()
        .flat_map_iter(|traj| {
            traj.steps.iter().enumerate().map(move |(i, step)| {
                let demos = buffer
                    .retrieve_scored(&step.state, &step.action, k, |t| {
                        !(t.episode == traj.seed && t.task == traj.task)
                    })
                    .into_iter()
                    .map(|s| s.transition.clone())
                    .collect();
                SftRecord {
                    task: traj.task.clone(),
                    state: step.state.clone(),
                    action: step.action.clone(),
                    history: traj.history_before(i),
                    demos,
                    reasoning: step.reasoning.clone(),
                    next_state: step.next_state.clone(),
                    reward: step.reward,
                    done: step.done,
                    episode: traj.seed,
                    step: i,
                }
            })
        })
        .collect()
}

fn check_all(records: &[SftRecord], path: &Path, line_offset: usize) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        r.validate().map_err(|e| {
            Error::InvalidArgument(format!("{}:{}: {e}", path.display(), i + 1 + line_offset))
        })?;
    }
    Ok(())
}

/// Writes one record per line; refuses records with empty targets.
pub fn export_jsonl(path: &Path, records: &[SftRecord]) -> Result<()> {
    check_all(records, path, 0)?;
    jsonl::write(path, records)
}

pub fn import_jsonl(path: &Path) -> Result<Vec<SftRecord>> {
    let records: Vec<SftRecord> = jsonl::read(path)?;
    check_all(&records, path, 0)?;
    Ok(records)
}

/// `Step: i, Environment State: s, Action: a` for every step, space-joined.
pub fn render_steps(traj: &Trajectory) -> String {
    traj.steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("Step: {i}, Environment State: {}, Action: {}", s.state, s.action))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn annotation_messages(traj: &Trajectory) -> Result<Vec<ChatMessage>> {
    let flag = if traj.is_success() { "true" } else { "false" };
    let n = traj.steps.len().to_string();
    let steps = render_steps(traj);
    let user = render(
        REASONING_ANNOTATION.user,
        &[("instruction", &traj.task), ("flag", flag), ("steps", &steps), ("n_steps", &n)],
    )?;
    Ok(vec![ChatMessage::system(REASONING_ANNOTATION.system), ChatMessage::user(user)])
}

#[derive(Deserialize)]
struct AnnotationReply {
    state_transitions: Vec<PlanEntry>,
}

#[derive(Deserialize)]
struct PlanEntry {
    step_id: usize,
    transition_plan: String,
}

/// Transition plans in step order; exactly one per step, ids `0..n_steps`.
pub fn parse_annotation(content: &str, n_steps: usize) -> std::result::Result<Vec<String>, String> {
    let block = extract_json_block(content).ok_or("reply contains no JSON object")?;
    let reply: AnnotationReply = serde_json::from_str(block).map_err(|e| format!("malformed reply: {e}"))?;
    if reply.state_transitions.len() != n_steps {
        return Err(format!(
            "expected {n_steps} transition plans, got {}",
            reply.state_transitions.len()
        ));
    }
    let mut plans: Vec<Option<String>> = vec![None; n_steps];
    for e in reply.state_transitions {
        if e.transition_plan.trim().is_empty() {
            return Err(format!("empty transition plan for step {}", e.step_id));
        }
        match plans.get_mut(e.step_id) {
            Some(slot @ None) => *slot = Some(e.transition_plan),
            Some(Some(_)) => return Err(format!("duplicate step_id {}", e.step_id)),
            None => return Err(format!("step_id {} out of range", e.step_id)),
        }
    }
    Ok(plans.into_iter().map(|p| p.expect("every slot filled")).collect())
}

/// A trajectory the annotator could not handle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationError {
    /// Position in the input list.
    pub index: usize,
    pub task: String,
    pub episode: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotated {
    /// Successfully annotated trajectories, in input order.
    pub trajectories: Vec<Trajectory>,
    pub errors: Vec<AnnotationError>,
}

/// Replaces every step's reasoning with the annotator's transition plan.
/// At most `parallelism` requests are in flight; failures are collected per
/// trajectory and the rest of the batch continues.
pub fn annotate_reasoning(trajectories: &[Trajectory], client: &ChatClient, parallelism: usize) -> Result<Annotated> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build annotation pool: {e}")))?;
    let results: Vec<Result<Trajectory>> = pool.install(|| {
        trajectories
            .par_iter()
            .map(|traj| {
                let n = traj.steps.len();
                let plans = client.complete_with(annotation_messages(traj)?, |c| parse_annotation(c, n))?;
                let mut out = traj.clone();
                for (step, plan) in out.steps.iter_mut().zip(plans) {
                    step.reasoning = plan;
                }
                Ok(out)
            })
            .collect()
    });
    let mut out = Annotated::default();
    for (index, (r, traj)) in results.into_iter().zip(trajectories).enumerate() {
        match r {
            Ok(t) => out.trajectories.push(t),
            Err(e) => out.errors.push(AnnotationError {
                index,
                task: traj.task.clone(),
                episode: traj.seed,
                message: e.to_string(),
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::{Outcome, Step};

    pub(crate) fn traj(task: &str, seed: u64, n: usize) -> Trajectory {
        Trajectory {
            task: task.into(),
            steps: (0..n)
                .map(|i| Step {
                    state: format!("state {i} of {task}"),
                    actions: vec!["go".into(), "stop".into()],
                    action: "go".into(),
                    action_index: 0,
                    action_log_prob: (0.5f64).ln(),
                    reasoning: format!("because {i}"),
                    next_state: format!("state {} of {task}", i + 1),
                    reward: if i + 1 == n { 1.0 } else { 0.0 },
                    done: i + 1 == n,
                })
                .collect(),
            outcome: Outcome::Success,
            seed,
        }
    }

    #[test]
    fn records_follow_steps_and_skip_own_episode() {
        let a = traj("buy a mug", 1, 5);
        let b = traj("buy a mug", 2, 3);
        let mut buf = ReplayBuffer::new(100);
        buf.seed([a.transitions(), b.transitions()]);
        let recs = build_sft_records(std::slice::from_ref(&a), &buf, 3);
        assert_eq!(recs.len(), 5);
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(r.history.len(), i);
            assert_eq!(r.step, i);
            assert_eq!(r.demos.len(), 3);
            assert!(r.demos.iter().all(|d| d.episode == 2));
        }
        let empty = build_sft_records(&[a], &ReplayBuffer::new(4), 3);
        assert!(empty.iter().all(|r| r.demos.is_empty()));
    }

    #[test]
    fn parse_annotation_contract() {
        let ok = r#"```json
{"task_tutorial": {}, "state_transitions": [{"step_id": 1, "transition_plan": "b"}, {"step_id": 0, "transition_plan": "a"}]}
```"#;
        assert_eq!(parse_annotation(ok, 2).unwrap(), vec!["a", "b"]);
        assert!(parse_annotation(ok, 3).unwrap_err().contains("expected 3"));
        let dup = r#"{"state_transitions": [{"step_id": 0, "transition_plan": "a"}, {"step_id": 0, "transition_plan": "b"}]}"#;
        assert!(parse_annotation(dup, 2).unwrap_err().contains("duplicate"));
        assert!(parse_annotation("nothing", 1).is_err());
    }

    #[test]
    fn export_rejects_empty_targets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sft.jsonl");
        let mut recs = build_sft_records(&[traj("t", 0, 2)], &ReplayBuffer::new(4), 0);
        export_jsonl(&path, &recs).unwrap();
        assert_eq!(import_jsonl(&path).unwrap(), recs);
        recs[1].reasoning.clear();
        let err = export_jsonl(&path, &recs).unwrap_err().to_string();
        assert!(err.contains(":2: empty reasoning"), "{err}");
    }
}
