//! The local agent: one concrete action per sub-goal.

use std::collections::BTreeMap;

use crate::action::{action_catalog, validate_action, Action};
use crate::backend::{DecisionRequest, DecisionResponse, Role};
use crate::device::AppResolver;
use crate::memory::{cosine, ActionMemoryItem, ActionRecord, Corpus, MemoryStore, NodeId};
use crate::vh::ScreenObservation;

use super::{AgentError, Engine, Phase};

/// Picks the known app whose description is closest to `description`.
/// Ties go to the lexicographically smallest app id.
pub fn select_app(description: &str, memory: &MemoryStore) -> Result<String, AgentError> {
    let query = memory.embed(description)?;
    let mut best: Option<(f64, &str)> = None;
    for app in memory.apps() {
        let key = match &app.key {
            Some(k) => k.clone(),
            None => memory.embed(&app.description)?,
        };
        let score = cosine(&query, &key)?;
        // apps() iterates in app-id order, so a strict comparison keeps the
        // smallest id among equals.
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, &app.app_id));
        }
    }
    best.map(|(_, id)| id.to_string()).ok_or(AgentError::NoAppsKnown)
}

/// [`AppResolver`] backed by App Memory.
pub struct MemoryResolver<'a>(pub &'a MemoryStore);

impl AppResolver for MemoryResolver<'_> {
    fn resolve_app(&self, description: &str) -> Option<String> {
        select_app(description, self.0).ok()
    }
}

/// What happened when the local agent took on a sub-goal.
#[derive(Debug, Clone, PartialEq)]
pub enum ExecOutcome {
    Executed {
        action: Action,
        node: NodeId,
        pre: ScreenObservation,
        post: ScreenObservation,
        /// False when validation or the device rejected the action.
        accepted: bool,
    },
    NeedsDecomposition { thought: String },
    Unrecoverable { reason: String },
}

impl Engine<'_> {
    /// Snippets for an Act request: relational context, the episode's
    /// action memory, then weighted content hits.
    fn act_memory(&self, node: NodeId, goal: &str) -> Result<Vec<String>, AgentError> {
        if !self.config.memory {
            return Ok(Vec::new());
        }
        let mut out = self.memory.retrieve_relational(node)?.snippets();
        out.extend(self.memory.action_memory().iter().map(|m| format!("action memory: {}", m.describe())));
        let corpora = [Corpus::SuccessHistory, Corpus::FailureHistory, Corpus::Page, Corpus::User];
        for hit in self.memory.retrieve_weighted(goal, node, &corpora, self.config.weights, self.config.retrieve_k)? {
            if !out.contains(&hit.entry.snippet) {
                out.push(hit.entry.snippet);
            }
        }
        Ok(out)
    }

    /// Runs the Act role for `node` and applies at most one action.
    pub fn exec_task(&mut self, node: NodeId) -> Result<ExecOutcome, AgentError> {
        let goal = self.goal_of(node)?;
        let pre = self.device.observe()?;
        let mut request = DecisionRequest::new(Role::Act, &goal, &pre.screen, &pre.to_prompt_text());
        request.retrieved_memory = self.act_memory(node, &goal)?;
        request.action_catalog = action_catalog();
        let response = self.backend.decide(&request);
        self.record(node, Phase::Act, match &response {
            Ok(r) => r.to_json(),
            Err(e) => serde_json::json!({ "error": e.to_string() }),
        });
        let (action, observation, thought, message, extracted_info) = match response {
            Err(e) => return Ok(ExecOutcome::Unrecoverable { reason: e.to_string() }),
            Ok(DecisionResponse::Act { can_complete: false, thought, .. }) => {
                self.memory.set_plan_reflection(node, &thought)?;
                return Ok(ExecOutcome::NeedsDecomposition { thought });
            }
            Ok(DecisionResponse::Act { action: Some(a), observation, thought, message, extracted_info, .. }) => {
                (a, observation, thought, message, extracted_info)
            }
            Ok(other) => {
                return Ok(ExecOutcome::Unrecoverable { reason: format!("unexpected {} response", other.role()) })
            }
        };
        if action == Action::Failed {
            return Ok(ExecOutcome::Unrecoverable { reason: "agent reported failure".into() });
        }
        let error = match validate_action(&action, &pre) {
            Err(e) => Some(e.to_string()),
            Ok(()) => {
                let resolver = MemoryResolver(&*self.memory);
                let result = self.device.apply(&action, &resolver);
                self.flush_device_log(node);
                result.err().map(|e| e.to_string())
            }
        };
        let post = self.device.observe()?;
        let accepted = error.is_none();
        let action_node = self.memory.append_action(
            node,
            ActionRecord {
                action: action.clone(),
                observation: if observation.is_empty() { pre.screen.clone() } else { observation },
                thought,
                response: message,
                reflection: None,
                success: accepted,
                step_index: 0,
                error,
            },
        )?;
        self.memory.append_action_memory(ActionMemoryItem {
            action: action.clone(),
            subgoal: goal,
            extracted_info: extracted_info.into_iter().collect::<BTreeMap<_, _>>(),
        })?;
        Ok(ExecOutcome::Executed { action, node: action_node, pre, post, accepted })
    }
}
