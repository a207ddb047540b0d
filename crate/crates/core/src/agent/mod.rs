//! The global agent: a task stack driven by plan reflection, execution
//! reflection and decomposition, with one memory update per iteration.

mod local;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::action::Action;
use crate::backend::{BackendError, DecisionBackend, DecisionRequest, DecisionResponse, Role};
use crate::device::{Device, DeviceError};
use crate::memory::{Corpus, MemoryError, MemoryStore, NodeId, NodeKind, RetrievalWeights, TaskNode, TaskStatus};
use crate::vh::ScreenObservation;

pub use local::{select_app, ExecOutcome, MemoryResolver};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("app memory is empty")]
    NoAppsKnown,
    #[error("plan budget exhausted: {0}")]
    PlanBudgetExhausted(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    pub max_steps: u32,
    pub max_depth: u32,
    pub max_plan_calls: u32,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets { max_steps: 40, max_depth: 4, max_plan_calls: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub budgets: Budgets,
    /// When false, every request goes out with empty retrieved memory.
    pub memory: bool,
    /// When false, the root goal is handed straight to the local agent.
    pub plan: bool,
    pub weights: RetrievalWeights,
    pub retrieve_k: usize,
    /// Attempts of one (goal, screen) pair before the node is failed; 0 disables.
    pub loop_limit: u32,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            budgets: Budgets::default(),
            memory: true,
            plan: true,
            weights: RetrievalWeights::default(),
            retrieve_k: 4,
            loop_limit: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Running,
    Complete,
    FailedBudget,
    FailedUnrecoverable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Plan,
    PlanReflect,
    Act,
    ExecReflect,
    MemoryUpdate,
    /// A device log entry, merged in as it happens.
    Device,
}

/// One line of the episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineEvent {
    /// Device steps applied so far (the entry's own step for device records).
    pub step: u64,
    pub node_id: Option<NodeId>,
    pub phase: Phase,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoppedGoal {
    pub node: NodeId,
    pub goal: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub goal: String,
    pub root: NodeId,
    pub status: EpisodeStatus,
    pub steps_executed: u64,
    pub iterations: u64,
    pub plan_calls: u32,
    pub popped: Vec<PoppedGoal>,
    pub tree: Vec<TaskNode>,
    pub outcomes: BTreeMap<NodeId, TaskStatus>,
    pub events: Vec<EngineEvent>,
}

impl EpisodeReport {
    /// The merged log as line-delimited JSON.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events serialize"));
            out.push('\n');
        }
        out
    }

    /// Device log entries in step order.
    pub fn device_log(&self) -> Vec<crate::device::LogEntry> {
        self.events
            .iter()
            .filter(|e| e.phase == Phase::Device)
            .filter_map(|e| serde_json::from_value(e.payload.clone()).ok())
            .collect()
    }
}

/// Execution reflection verdict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecJudgement {
    pub subgoal_status: bool,
    pub goal_status: bool,
    pub reflection: Option<String>,
}

/// State of one running episode.
pub struct Engine<'a> {
    device: &'a mut Device,
    backend: &'a mut dyn DecisionBackend,
    memory: &'a mut MemoryStore,
    config: &'a EngineConfig,
    events: Vec<EngineEvent>,
    device_logged: usize,
    start_step: u64,
    plan_calls: u32,
    iterations: u64,
    attempts: HashMap<(String, String), u32>,
    popped: Vec<PoppedGoal>,
}

/// Runs one goal to completion or budget exhaustion.
pub fn run_episode(
    goal: &str,
    device: &mut Device,
    backend: &mut dyn DecisionBackend,
    memory: &mut MemoryStore,
    config: &EngineConfig,
) -> Result<EpisodeReport, AgentError> {
    // Installed apps are external knowledge for app selection, so they are
    // seeded even when retrieval is disabled.
    let missing: Vec<(String, String)> = device
        .apps()
        .filter(|a| memory.apps().all(|m| m.app_id != a.app_id))
        .map(|a| (a.app_id.clone(), a.description.clone()))
        .collect();
    for (id, description) in missing {
        memory.upsert_app_entry(&id, &description)?;
    }
    let root = memory.begin_episode(goal);
    let mut engine = Engine {
        device_logged: device.log().len(),
        start_step: device.state().step,
        device,
        backend,
        memory,
        config,
        events: Vec::new(),
        plan_calls: 0,
        iterations: 0,
        attempts: HashMap::new(),
        popped: Vec::new(),
    };
    let status = if config.plan { engine.adaptive_loop(root)? } else { engine.flat_loop(root)? };
    Ok(engine.finish(goal, root, status))
}

impl<'a> Engine<'a> {
    fn goal_of(&self, node: NodeId) -> Result<String, AgentError> {
        Ok(self.memory.node(node).ok_or(MemoryError::UnknownNode(node))?.goal.clone())
    }

    fn steps(&self) -> u64 {
        self.device.state().step - self.start_step
    }

    fn record(&mut self, node: NodeId, phase: Phase, payload: Value) {
        self.events.push(EngineEvent { step: self.device.state().step, node_id: Some(node), phase, payload });
    }

    fn flush_device_log(&mut self, node: NodeId) {
        let fresh: Vec<_> = self.device.log()[self.device_logged..].to_vec();
        self.device_logged += fresh.len();
        for entry in fresh {
            self.events.push(EngineEvent {
                step: entry.step,
                node_id: Some(node),
                phase: Phase::Device,
                payload: serde_json::to_value(&entry).expect("log entries serialize"),
            });
        }
    }

    /// Relational context plus weighted hits over routes and histories.
    fn plan_memory(&self, node: NodeId, goal: &str) -> Result<Vec<String>, AgentError> {
        if !self.config.memory {
            return Ok(Vec::new());
        }
        let mut out = self.memory.retrieve_relational(node)?.snippets();
        let corpora = [Corpus::RouteHistory, Corpus::FailureHistory, Corpus::SuccessHistory];
        for hit in self.memory.retrieve_weighted(goal, node, &corpora, self.config.weights, self.config.retrieve_k)? {
            if !out.contains(&hit.entry.snippet) {
                out.push(hit.entry.snippet);
            }
        }
        Ok(out)
    }

    /// Feasibility check before execution; backend failures count as "no".
    pub fn reflect_plan(&mut self, node: NodeId) -> Result<bool, AgentError> {
        let goal = self.goal_of(node)?;
        let obs = self.device.observe()?;
        let mut request = DecisionRequest::new(Role::PlanReflect, &goal, &obs.screen, &obs.to_prompt_text());
        request.retrieved_memory = self.plan_memory(node, &goal)?;
        let (can_do, reflection, error) = match self.backend.decide(&request) {
            Ok(DecisionResponse::PlanReflect { can_do, reflection }) => (can_do, reflection, None),
            Ok(other) => (false, String::new(), Some(format!("unexpected {} response", other.role()))),
            Err(BackendError::Timeout) => (false, "backend timeout".to_string(), Some("timeout".to_string())),
            Err(e) => (false, e.to_string(), Some(e.to_string())),
        };
        self.memory.set_plan_reflection(node, &reflection)?;
        let mut payload = json!({ "goal": goal, "screen": obs.screen, "can_do": can_do, "reflection": reflection });
        if let Some(e) = error {
            payload["error"] = json!(e);
        }
        self.record(node, Phase::PlanReflect, payload);
        Ok(can_do)
    }

    /// Judges an executed action from the screens before and after it.
    pub fn reflect_exec(
        &mut self,
        node: NodeId,
        action_node: NodeId,
        action: &Action,
        pre: &ScreenObservation,
        post: &ScreenObservation,
    ) -> Result<ExecJudgement, AgentError> {
        let goal = self.goal_of(node)?;
        let mut request = DecisionRequest::new(Role::ExecReflect, &goal, &post.screen, &pre.to_prompt_text());
        request.post_observation = Some(post.to_prompt_text());
        request.prior_action = Some(action.clone());
        if self.config.memory {
            request.retrieved_memory = self.memory.retrieve_relational(node)?.snippets();
        }
        let judgement = match self.backend.decide(&request) {
            Ok(DecisionResponse::ExecReflect { subgoal_status, goal_status, reflection }) => {
                ExecJudgement { subgoal_status, goal_status, reflection }
            }
            Ok(other) => ExecJudgement {
                subgoal_status: false,
                goal_status: false,
                reflection: Some(format!("unexpected {} response", other.role())),
            },
            Err(e) => ExecJudgement { subgoal_status: false, goal_status: false, reflection: Some(e.to_string()) },
        };
        if !judgement.subgoal_status && !judgement.goal_status {
            let text = judgement.reflection.clone().unwrap_or_else(|| "sub-goal not completed".to_string());
            self.memory.set_action_success(action_node, false)?;
            self.memory.append_reflection(action_node, &text)?;
            self.memory
                .append_page_note(&pre.screen_key, &format!("{action} did not achieve {goal:?}: {text}"))?;
        } else if let Some(text) = &judgement.reflection {
            self.memory.append_reflection(action_node, text)?;
        }
        self.record(
            node,
            Phase::ExecReflect,
            json!({
                "action": action.to_string(),
                "screen": post.screen,
                "subgoal_status": judgement.subgoal_status,
                "goal_status": judgement.goal_status,
                "reflection": judgement.reflection,
            }),
        );
        Ok(judgement)
    }

    /// Asks for sub-goals of `node` and adds them as its children.
    pub fn plan_decompose(&mut self, node: NodeId) -> Result<Vec<NodeId>, AgentError> {
        let goal = self.goal_of(node)?;
        let depth = self.memory.node(node).map_or(0, |n| n.depth);
        let refuse = |reason: &str| AgentError::PlanBudgetExhausted(reason.to_string());
        let refusal = if depth + 1 > self.config.budgets.max_depth {
            Some(refuse("max_depth"))
        } else if self.plan_calls >= self.config.budgets.max_plan_calls {
            Some(refuse("max_plan_calls"))
        } else {
            None
        };
        if let Some(err) = refusal {
            self.record(node, Phase::Plan, json!({ "goal": goal, "error": err.to_string() }));
            return Err(err);
        }
        self.plan_calls += 1;
        let obs = self.device.observe()?;
        let mut request = DecisionRequest::new(Role::Plan, &goal, &obs.screen, &obs.to_prompt_text());
        request.retrieved_memory = self.plan_memory(node, &goal)?;
        let subgoals = match self.backend.decide(&request) {
            Ok(DecisionResponse::Plan { subgoals }) => subgoals,
            Ok(other) => {
                let e = BackendError::SchemaViolation(format!("unexpected {} response", other.role()));
                self.record(node, Phase::Plan, json!({ "goal": goal, "error": e.to_string() }));
                return Err(e.into());
            }
            Err(e) => {
                self.record(node, Phase::Plan, json!({ "goal": goal, "error": e.to_string() }));
                return Err(e.into());
            }
        };
        let children = subgoals
            .iter()
            .map(|g| self.memory.insert_task_node(node, g))
            .collect::<Result<Vec<_>, _>>()?;
        self.record(node, Phase::Plan, json!({ "goal": goal, "subgoals": subgoals, "children": children }));
        Ok(children)
    }

    /// Marks `node` and infers the status of ancestors whose sub-goals
    /// have all resolved.
    fn resolve(&mut self, node: NodeId, status: TaskStatus) -> Result<(), AgentError> {
        self.memory.mark_status(node, status)?;
        let mut cur = node;
        while let Some(parent) = self.memory.node(cur).and_then(|n| n.parent) {
            let p = self.memory.node(parent).ok_or(MemoryError::UnknownNode(parent))?;
            let subtasks: Vec<TaskStatus> = p
                .children
                .iter()
                .filter_map(|c| self.memory.node(*c))
                .filter(|c| c.kind == NodeKind::Task)
                .map(|c| c.status)
                .collect();
            if subtasks.iter().any(|s| matches!(s, TaskStatus::Pending | TaskStatus::InProgress)) {
                break;
            }
            let all_ok = subtasks.iter().all(|s| *s == TaskStatus::Success);
            self.memory.mark_status(parent, if all_ok { TaskStatus::Success } else { TaskStatus::Failure })?;
            cur = parent;
        }
        Ok(())
    }

    fn update_memory(&mut self, node: NodeId, root: NodeId, note: Option<(String, String)>) -> Result<(), AgentError> {
        if let Some((key, text)) = &note {
            self.memory.append_page_note(key, text)?;
        }
        let root_done = self.memory.node(root).is_some_and(|n| n.status == TaskStatus::Success);
        let routes = if root_done { self.memory.finalize_route(root)?.len() } else { 0 };
        let status = self.memory.node(node).map(|n| n.status);
        self.record(
            node,
            Phase::MemoryUpdate,
            json!({ "status": status, "page_note": note.map(|n| n.1), "routes": routes }),
        );
        Ok(())
    }

    fn adaptive_loop(&mut self, root: NodeId) -> Result<EpisodeStatus, AgentError> {
        let mut stack = vec![root];
        while let Some(&cur) = stack.last() {
            if self.steps() >= u64::from(self.config.budgets.max_steps) {
                return Ok(EpisodeStatus::FailedBudget);
            }
            stack.pop();
            self.iterations += 1;
            let goal = self.goal_of(cur)?;
            self.popped.push(PoppedGoal { node: cur, goal: goal.clone() });
            self.memory.mark_status(cur, TaskStatus::InProgress)?;

            let tries = self.attempts.entry((goal.clone(), self.device.screen_key())).or_insert(0);
            *tries += 1;
            if self.config.loop_limit > 0 && *tries >= self.config.loop_limit {
                self.resolve(cur, TaskStatus::Failure)?;
                self.record(cur, Phase::MemoryUpdate, json!({ "loop_detected": goal }));
                continue;
            }

            let mut complete = false;
            let mut note = None;
            if self.reflect_plan(cur)? {
                if let ExecOutcome::Executed { action, node, pre, post, accepted } = self.exec_task(cur)? {
                    let verdict = self.reflect_exec(cur, node, &action, &pre, &post)?;
                    if verdict.goal_status {
                        self.resolve(cur, TaskStatus::Success)?;
                        self.memory.mark_status(root, TaskStatus::Success)?;
                        self.update_memory(cur, root, None)?;
                        return Ok(EpisodeStatus::Complete);
                    }
                    complete = verdict.subgoal_status;
                    if complete && accepted {
                        note = Some((pre.screen_key.clone(), format!("{action} achieved {goal:?}")));
                    }
                }
            }
            if complete {
                self.resolve(cur, TaskStatus::Success)?;
            } else {
                match self.plan_decompose(cur) {
                    Ok(children) => stack.extend(children.into_iter().rev()),
                    Err(AgentError::PlanBudgetExhausted(reason)) if reason == "max_plan_calls" => {
                        self.resolve(cur, TaskStatus::Failure)?;
                        self.update_memory(cur, root, note)?;
                        return Ok(EpisodeStatus::FailedBudget);
                    }
                    Err(AgentError::PlanBudgetExhausted(_) | AgentError::Backend(_)) => {
                        self.resolve(cur, TaskStatus::Failure)?;
                    }
                    Err(other) => return Err(other),
                }
            }
            self.update_memory(cur, root, note)?;
        }
        let root_ok = self.memory.node(root).is_some_and(|n| n.status == TaskStatus::Success);
        Ok(if root_ok { EpisodeStatus::Complete } else { EpisodeStatus::FailedUnrecoverable })
    }

    /// Single-level loop used when planning is disabled: Act and
    /// ExecReflect on the root goal until it is judged complete.
    fn flat_loop(&mut self, root: NodeId) -> Result<EpisodeStatus, AgentError> {
        let goal = self.goal_of(root)?;
        self.popped.push(PoppedGoal { node: root, goal: goal.clone() });
        self.memory.mark_status(root, TaskStatus::InProgress)?;
        let max = u64::from(self.config.budgets.max_steps);
        loop {
            if self.steps() >= max || self.iterations >= max {
                return Ok(EpisodeStatus::FailedBudget);
            }
            self.iterations += 1;
            match self.exec_task(root)? {
                ExecOutcome::Executed { action, node, pre, post, accepted } => {
                    let verdict = self.reflect_exec(root, node, &action, &pre, &post)?;
                    let note = accepted.then(|| (pre.screen_key.clone(), format!("{action} worked toward {goal:?}")));
                    if verdict.goal_status || verdict.subgoal_status {
                        self.resolve(root, TaskStatus::Success)?;
                        self.update_memory(root, root, note)?;
                        return Ok(EpisodeStatus::Complete);
                    }
                    self.update_memory(root, root, None)?;
                }
                ExecOutcome::NeedsDecomposition { .. } | ExecOutcome::Unrecoverable { .. } => {
                    self.resolve(root, TaskStatus::Failure)?;
                    self.update_memory(root, root, None)?;
                    return Ok(EpisodeStatus::FailedUnrecoverable);
                }
            }
        }
    }

    fn finish(self, goal: &str, root: NodeId, status: EpisodeStatus) -> EpisodeReport {
        let episode = self.memory.node(root).map_or(0, |n| n.episode);
        let tree: Vec<TaskNode> = self.memory.nodes().filter(|n| n.episode == episode).cloned().collect();
        let outcomes = tree.iter().map(|n| (n.id, n.status)).collect();
        EpisodeReport {
            goal: goal.to_string(),
            root,
            status,
            steps_executed: self.steps(),
            iterations: self.iterations,
            plan_calls: self.plan_calls,
            popped: self.popped,
            tree,
            outcomes,
            events: self.events,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedOracle;

    fn clock() -> crate::device::AppSpec {
        serde_json::from_str(
            r#"{"app_id":"com.sim.clock","label":"Clock","description":"alarm clock and timers",
                "initial_screen":"alarms",
                "screens":{
                  "alarms":{"elements":[{"key":"add","bounds":[880,2100,1040,2260],"clickable":true,"text":"Add",
                     "transitions":[{"on":"click","effects":[{"goto_screen":"edit"}]}]}]},
                  "edit":{"elements":[{"key":"back","bounds":[0,100,200,200],"clickable":true,"text":"Cancel",
                     "transitions":[{"on":"click","effects":[{"goto_screen":"alarms"}]}]}]}}}"#,
        )
        .unwrap()
    }

    fn run(script: &str, config: &EngineConfig) -> (EpisodeReport, Device) {
        let mut device = Device::new(vec![clock()], 0).unwrap();
        let mut oracle = ScriptedOracle::from_json(script).unwrap();
        let mut memory = MemoryStore::default();
        let report = run_episode("open the clock", &mut device, &mut oracle, &mut memory, config).unwrap();
        (report, device)
    }

    #[test]
    fn one_action_goal() {
        let (r, d) = run(
            r#"[{"role":"PlanReflect","response":{"can_do":true}},
                {"role":"Act","response":{"can_complete":true,"action":"Click(0)"}},
                {"role":"ExecReflect","response":{"subgoal_status":true,"goal_status":true}}]"#,
            &EngineConfig::default(),
        );
        assert_eq!(r.status, EpisodeStatus::Complete);
        assert_eq!(r.steps_executed, 1);
        assert_eq!(d.screen_label(), "com.sim.clock/alarms");
        let phases: Vec<Phase> = r.events.iter().map(|e| e.phase).collect();
        assert_eq!(
            phases,
            vec![Phase::PlanReflect, Phase::Act, Phase::Device, Phase::ExecReflect, Phase::MemoryUpdate]
        );
    }

    #[test]
    fn decomposition_runs_children_in_order() {
        let (r, _) = run(
            r#"[{"role":"PlanReflect","goal_glob":"open the clock","response":{"can_do":false}},
                {"role":"PlanReflect","response":{"can_do":true}},
                {"role":"Plan","response":{"subgoals":["s1","s2"]}},
                {"role":"Act","goal_glob":"s1","response":{"can_complete":true,"action":"Click(0)"}},
                {"role":"Act","goal_glob":"s2","response":{"can_complete":true,"action":"Click(0)"}},
                {"role":"ExecReflect","response":{"subgoal_status":true,"goal_status":false}}]"#,
            &EngineConfig::default(),
        );
        let goals: Vec<&str> = r.popped.iter().map(|p| p.goal.as_str()).collect();
        assert_eq!(goals, vec!["open the clock", "s1", "s2"]);
        assert_eq!(r.plan_calls, 1);
        assert_eq!(r.status, EpisodeStatus::Complete);
        assert_eq!(r.outcomes[&r.root], TaskStatus::Success);
    }

    #[test]
    fn zero_step_budget() {
        let config = EngineConfig { budgets: Budgets { max_steps: 0, ..Budgets::default() }, ..EngineConfig::default() };
        let (r, d) = run("[]", &config);
        assert_eq!(r.status, EpisodeStatus::FailedBudget);
        assert!(d.log().is_empty());
        assert!(r.events.is_empty());
    }

    #[test]
    fn plan_reflect_no_leaves_device_alone() {
        let (r, d) = run(
            r#"[{"role":"PlanReflect","response":{"can_do":false}},
                {"role":"Plan","response":{"subgoals":["again"]}}]"#,
            &EngineConfig::default(),
        );
        assert!(d.log().is_empty());
        // The third "again" on the same screen is cut off as a loop.
        assert_eq!(r.status, EpisodeStatus::FailedUnrecoverable);
        assert_eq!(r.plan_calls, 3);
        assert!(r.events.iter().any(|e| e.payload.get("loop_detected").is_some()));

        let no_loop_check = EngineConfig { loop_limit: 0, ..EngineConfig::default() };
        let (r, _) = run(
            r#"[{"role":"PlanReflect","response":{"can_do":false}},
                {"role":"Plan","response":{"subgoals":["again"]}}]"#,
            &no_loop_check,
        );
        // Without it, nested single-child plans stop at the depth limit.
        assert_eq!(r.status, EpisodeStatus::FailedUnrecoverable);
        assert_eq!(r.plan_calls, 4);
        assert!(r.tree.iter().all(|n| n.depth <= 4));

        let tight = EngineConfig {
            budgets: Budgets { max_plan_calls: 2, ..Budgets::default() },
            loop_limit: 0,
            ..EngineConfig::default()
        };
        let (r, _) = run(
            r#"[{"role":"PlanReflect","response":{"can_do":false}},
                {"role":"Plan","response":{"subgoals":["again"]}}]"#,
            &tight,
        );
        assert_eq!(r.status, EpisodeStatus::FailedBudget);
        assert_eq!(r.plan_calls, 2);
    }

    #[test]
    fn failed_root_without_plan_is_unrecoverable() {
        let (r, d) = run(
            r#"[{"role":"PlanReflect","response":{"can_do":true}},
                {"role":"Act","response":{"can_complete":true,"action":"Failed()"}}]"#,
            &EngineConfig::default(),
        );
        assert_eq!(r.status, EpisodeStatus::FailedUnrecoverable);
        assert!(d.log().is_empty());
    }

    #[test]
    fn needs_decomposition_keeps_thought() {
        let (r, d) = run(
            r#"[{"role":"PlanReflect","response":{"can_do":true}},
                {"role":"Act","goal_glob":"open the clock","response":{"can_complete":false,"thought":"needs two steps"}},
                {"role":"Plan","response":{"subgoals":["tap clock"]}},
                {"role":"Act","response":{"can_complete":true,"action":"Click(0)"}},
                {"role":"ExecReflect","response":{"subgoal_status":true,"goal_status":false}}]"#,
            &EngineConfig::default(),
        );
        assert_eq!(r.status, EpisodeStatus::Complete);
        assert_eq!(d.log().len(), 1);
        let root = r.tree.iter().find(|n| n.id == r.root).unwrap();
        assert_eq!(root.plan_reflection.as_deref(), Some("needs two steps"));
    }

    #[test]
    fn invalid_index_is_a_failed_action() {
        let (r, d) = run(
            r#"[{"role":"PlanReflect","response":{"can_do":true}},
                {"role":"Act","response":{"can_complete":true,"action":"Click(99)"}},
                {"role":"ExecReflect","response":{"subgoal_status":false,"goal_status":false}},
                {"role":"Plan","response":{"subgoals":["x"]}, "max_uses": 1}]"#,
            &EngineConfig { budgets: Budgets { max_plan_calls: 0, ..Budgets::default() }, ..EngineConfig::default() },
        );
        assert!(d.log().is_empty());
        let action = r.tree.iter().find(|n| n.is_action()).unwrap().action.clone().unwrap();
        assert!(!action.success);
        assert!(action.error.unwrap().contains("out of range"));
        assert_eq!(r.status, EpisodeStatus::FailedBudget);
    }

    #[test]
    fn flat_mode_never_plans() {
        let script = r#"[{"role":"Act","response":{"can_complete":false,"thought":"too big"}},
                         {"role":"Plan","response":{"subgoals":["x"]}}]"#;
        let config = EngineConfig { plan: false, ..EngineConfig::default() };
        let (r, _) = run(script, &config);
        assert_eq!(r.status, EpisodeStatus::FailedUnrecoverable);
        assert_eq!(r.plan_calls, 0);
        assert!(r.events.iter().all(|e| e.phase != Phase::Plan && e.phase != Phase::PlanReflect));
    }
}
