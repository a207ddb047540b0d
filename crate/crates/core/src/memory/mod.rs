//! Multifaceted agent memory.
//!
//! The store keeps the hierarchical task memory (goal tree plus action
//! nodes), route history, app/page/user memories and the episode-scoped
//! action memory. Every retrievable record is mirrored into a flat entry
//! list carrying a precomputed [`MemoryKey`], which is what the content and
//! weighted retrievers rank.

mod embed;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;

pub use embed::{
    cosine, normalize_text, Embedder, MemoryKey, RemoteEmbedder, TrigramEmbedder, DEFAULT_DIM,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("duplicate node id {0}")]
    DuplicateId(NodeId),
    #[error("unknown corpus {0:?}")]
    UnknownCorpus(String),
    #[error("key dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding backend unavailable: {0}")]
    EmbedBackendUnavailable(String),
    #[error("root goal of node {0} is not complete")]
    RootNotComplete(NodeId),
    #[error("retrieval weights must be non-negative and not both zero")]
    InvalidWeights,
    #[error("memory file format error: {0}")]
    FileFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    InProgress,
    Success,
    Failure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Task,
    Action,
}

/// Payload of an action node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub action: Action,
    pub observation: String,
    pub thought: String,
    pub response: Option<String>,
    pub reflection: Option<String>,
    pub success: bool,
    pub step_index: u64,
    /// Validation or device error, when the action never took effect.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskNode {
    pub id: NodeId,
    pub episode: u64,
    pub goal: String,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub status: TaskStatus,
    pub kind: NodeKind,
    pub depth: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_reflection: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<ActionRecord>,
}

impl TaskNode {
    pub fn is_action(&self) -> bool {
        self.kind == NodeKind::Action
    }

    /// Task-kind children, i.e. sub-goals from decomposition.
    pub fn has_subtasks(&self, store: &MemoryStore) -> bool {
        self.children
            .iter()
            .any(|c| store.node(*c).is_some_and(|n| n.kind == NodeKind::Task))
    }
}

/// Ordered successful actions beneath one task node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub for_node: NodeId,
    pub actions: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub goal: String,
    pub for_node: NodeId,
    pub actions: Vec<Action>,
    #[serde(default)]
    pub action_nodes: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<MemoryKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppMemoryEntry {
    pub app_id: String,
    pub description: String,
    #[serde(default)]
    pub page_notes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<MemoryKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageMemoryEntry {
    pub screen_key: String,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionMemoryItem {
    pub action: Action,
    pub subgoal: String,
    #[serde(default)]
    pub extracted_info: BTreeMap<String, String>,
}

impl ActionMemoryItem {
    pub fn describe(&self) -> String {
        let mut s = format!("subgoal {:?} action {}", self.subgoal, self.action);
        if !self.extracted_info.is_empty() {
            let info: Vec<String> =
                self.extracted_info.iter().map(|(k, v)| format!("{k}={v}")).collect();
            s.push_str(" info: ");
            s.push_str(&info.join("; "));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMemoryEntry {
    pub text: String,
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<MemoryKey>,
}

/// Named entry collections available to content retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corpus {
    SuccessHistory,
    FailureHistory,
    RouteHistory,
    App,
    Page,
    User,
    Action,
}

impl Corpus {
    pub const ALL: [Corpus; 7] = [
        Corpus::SuccessHistory,
        Corpus::FailureHistory,
        Corpus::RouteHistory,
        Corpus::App,
        Corpus::Page,
        Corpus::User,
        Corpus::Action,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Corpus::SuccessHistory => "success_history",
            Corpus::FailureHistory => "failure_history",
            Corpus::RouteHistory => "route_history",
            Corpus::App => "app",
            Corpus::Page => "page",
            Corpus::User => "user",
            Corpus::Action => "action",
        }
    }
}

impl FromStr for Corpus {
    type Err = MemoryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Corpus::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| MemoryError::UnknownCorpus(s.to_string()))
    }
}

/// One retrievable record.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub seq: u64,
    pub corpus: Corpus,
    /// The text the key was computed from.
    pub text: String,
    /// What gets shown to the decision backend.
    pub snippet: String,
    pub key: MemoryKey,
    pub origin: Option<NodeId>,
    /// Upsert handle (app id, screen key), empty when unused.
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub entry: MemoryEntry,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalWeights {
    pub relation: f64,
    pub content: f64,
}

impl Default for RetrievalWeights {
    fn default() -> Self {
        RetrievalWeights { relation: 1.0, content: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RelationalContext {
    pub parent_goal: Option<String>,
    pub last_success: Option<TaskNode>,
    pub last_failure_with_reflection: Option<TaskNode>,
}

impl RelationalContext {
    pub fn snippets(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(p) = &self.parent_goal {
            out.push(format!("parent goal: {p}"));
        }
        if let Some(n) = &self.last_success {
            if let Some(a) = &n.action {
                out.push(format!("last success: {} for {:?}", a.action, n.goal));
            }
        }
        if let Some(n) = &self.last_failure_with_reflection {
            if let Some(a) = &n.action {
                out.push(format!(
                    "last failure: {} for {:?}, reflection: {}",
                    a.action,
                    n.goal,
                    a.reflection.as_deref().unwrap_or_default()
                ));
            }
        }
        out
    }
}

/// Serialized form of a store, also used for warm-start files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub schema_version: u32,
    #[serde(default)]
    pub task_history: Vec<TaskNode>,
    #[serde(default)]
    pub route_history: Vec<RouteRecord>,
    #[serde(default)]
    pub app: Vec<AppMemoryEntry>,
    #[serde(default)]
    pub page: Vec<PageMemoryEntry>,
    #[serde(default)]
    pub user: Vec<UserMemoryEntry>,
}

impl Default for MemorySnapshot {
    fn default() -> Self {
        MemorySnapshot {
            schema_version: SCHEMA_VERSION,
            task_history: Vec::new(),
            route_history: Vec::new(),
            app: Vec::new(),
            page: Vec::new(),
            user: Vec::new(),
        }
    }
}

impl MemorySnapshot {
    pub fn from_json(text: &str) -> Result<Self, MemoryError> {
        let snap: MemorySnapshot =
            serde_json::from_str(text).map_err(|e| MemoryError::FileFormat(e.to_string()))?;
        if snap.schema_version != SCHEMA_VERSION {
            return Err(MemoryError::FileFormat(format!(
                "unsupported schema_version {}",
                snap.schema_version
            )));
        }
        Ok(snap)
    }

    pub fn load(path: &Path) -> Result<Option<Self>, MemoryError> {
        let text = std::fs::read_to_string(path)?;
        if text.trim().is_empty() {
            return Ok(None);
        }
        Self::from_json(&text).map(Some)
    }
}

pub struct MemoryStore {
    embedder: Arc<dyn Embedder>,
    nodes: BTreeMap<NodeId, TaskNode>,
    next_id: u64,
    next_step: u64,
    next_seq: u64,
    episode: u64,
    routes: Vec<RouteRecord>,
    apps: BTreeMap<String, AppMemoryEntry>,
    pages: BTreeMap<String, PageMemoryEntry>,
    users: Vec<UserMemoryEntry>,
    action_memory: Vec<ActionMemoryItem>,
    entries: Vec<MemoryEntry>,
}

impl fmt::Debug for MemoryStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemoryStore")
            .field("nodes", &self.nodes.len())
            .field("entries", &self.entries.len())
            .field("episode", &self.episode)
            .finish()
    }
}

impl Default for MemoryStore {
    fn default() -> Self {
        MemoryStore::new(Arc::new(TrigramEmbedder::default()))
    }
}

impl MemoryStore {
    pub fn new(embedder: Arc<dyn Embedder>) -> Self {
        MemoryStore {
            embedder,
            nodes: BTreeMap::new(),
            next_id: 1,
            next_step: 0,
            next_seq: 0,
            episode: 0,
            routes: Vec::new(),
            apps: BTreeMap::new(),
            pages: BTreeMap::new(),
            users: Vec::new(),
            action_memory: Vec::new(),
            entries: Vec::new(),
        }
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn embed(&self, text: &str) -> Result<MemoryKey, MemoryError> {
        self.embedder.embed(text)
    }

    // ---- task memory -------------------------------------------------

    pub fn node(&self, id: NodeId) -> Option<&TaskNode> {
        self.nodes.get(&id)
    }

    fn node_mut(&mut self, id: NodeId) -> Result<&mut TaskNode, MemoryError> {
        self.nodes.get_mut(&id).ok_or(MemoryError::UnknownNode(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TaskNode> {
        self.nodes.values()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn current_episode(&self) -> u64 {
        self.episode
    }

    fn alloc_id(&mut self) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        id
    }

    /// Starts a new episode rooted at `goal` and clears the action memory.
    pub fn begin_episode(&mut self, goal: &str) -> NodeId {
        self.episode += 1;
        self.action_memory.clear();
        self.entries.retain(|e| e.corpus != Corpus::Action);
        let id = self.alloc_id();
        self.nodes.insert(
            id,
            TaskNode {
                id,
                episode: self.episode,
                goal: goal.to_string(),
                parent: None,
                children: Vec::new(),
                status: TaskStatus::Pending,
                kind: NodeKind::Task,
                depth: 0,
                plan_reflection: None,
                action: None,
            },
        );
        id
    }

    /// Adds a sub-goal under `parent`.
    pub fn insert_task_node(&mut self, parent: NodeId, goal: &str) -> Result<NodeId, MemoryError> {
        let (episode, depth) = {
            let p = self.nodes.get(&parent).ok_or(MemoryError::UnknownNode(parent))?;
            (p.episode, p.depth + 1)
        };
        let id = self.alloc_id();
        self.nodes.insert(
            id,
            TaskNode {
                id,
                episode,
                goal: goal.to_string(),
                parent: Some(parent),
                children: Vec::new(),
                status: TaskStatus::Pending,
                kind: NodeKind::Task,
                depth,
                plan_reflection: None,
                action: None,
            },
        );
        self.node_mut(parent)?.children.push(id);
        Ok(id)
    }

    pub fn mark_status(&mut self, id: NodeId, status: TaskStatus) -> Result<(), MemoryError> {
        self.node_mut(id)?.status = status;
        Ok(())
    }

    pub fn set_plan_reflection(&mut self, id: NodeId, text: &str) -> Result<(), MemoryError> {
        self.node_mut(id)?.plan_reflection = Some(text.to_string());
        Ok(())
    }

    /// Records an executed (or attempted) action under task `parent`.
    /// The step index is assigned from the store's execution counter.
    pub fn append_action(
        &mut self,
        parent: NodeId,
        mut record: ActionRecord,
    ) -> Result<NodeId, MemoryError> {
        let (episode, depth, goal) = {
            let p = self.nodes.get(&parent).ok_or(MemoryError::UnknownNode(parent))?;
            (p.episode, p.depth + 1, p.goal.clone())
        };
        record.step_index = self.next_step;
        self.next_step += 1;
        let id = self.alloc_id();
        let success = record.success;
        let snippet = format!("success: {} for {:?}", record.action, goal);
        self.nodes.insert(
            id,
            TaskNode {
                id,
                episode,
                goal: goal.clone(),
                parent: Some(parent),
                children: Vec::new(),
                status: if success { TaskStatus::Success } else { TaskStatus::Failure },
                kind: NodeKind::Action,
                depth,
                plan_reflection: None,
                action: Some(record),
            },
        );
        self.node_mut(parent)?.children.push(id);
        if success {
            self.push_entry(Corpus::SuccessHistory, &goal, snippet, Some(id), "")?;
        }
        Ok(id)
    }

    /// Attaches a reflection to an action node; failed nodes with a
    /// reflection join the failure history.
    pub fn append_reflection(&mut self, id: NodeId, reflection: &str) -> Result<(), MemoryError> {
        let node = self.node_mut(id)?;
        let Some(record) = node.action.as_mut() else {
            node.plan_reflection = Some(reflection.to_string());
            return Ok(());
        };
        record.reflection = Some(reflection.to_string());
        if !record.success {
            let goal = node.goal.clone();
            let snippet =
                format!("failure: {} for {:?}, reflection: {}", record.action, goal, reflection);
            let text = format!("{goal} {reflection}");
            self.push_entry(Corpus::FailureHistory, &text, snippet, Some(id), "")?;
        }
        Ok(())
    }

    /// Overrides the success flag of an action node, e.g. after execution
    /// reflection judged a device-accepted action ineffective.
    pub fn set_action_success(&mut self, id: NodeId, success: bool) -> Result<(), MemoryError> {
        let node = self.node_mut(id)?;
        let Some(record) = node.action.as_mut() else {
            return Err(MemoryError::UnknownNode(id));
        };
        if record.success == success {
            return Ok(());
        }
        record.success = success;
        node.status = if success { TaskStatus::Success } else { TaskStatus::Failure };
        let snippet = format!("success: {} for {:?}", record.action, node.goal);
        let goal = node.goal.clone();
        if success {
            self.push_entry(Corpus::SuccessHistory, &goal, snippet, Some(id), "")?;
        } else {
            self.entries.retain(|e| !(e.corpus == Corpus::SuccessHistory && e.origin == Some(id)));
        }
        Ok(())
    }

    /// Action nodes of an episode in execution order.
    pub fn episode_actions(&self, episode: u64) -> Vec<&TaskNode> {
        let mut v: Vec<&TaskNode> = self
            .nodes
            .values()
            .filter(|n| n.episode == episode && n.is_action())
            .collect();
        v.sort_by_key(|n| n.action.as_ref().map(|a| a.step_index));
        v
    }

    pub fn retrieve_relational(&self, id: NodeId) -> Result<RelationalContext, MemoryError> {
        let node = self.node(id).ok_or(MemoryError::UnknownNode(id))?;
        let parent_goal = node.parent.and_then(|p| self.node(p)).map(|p| p.goal.clone());
        let actions = self.episode_actions(node.episode);
        let last_success = actions
            .iter()
            .rev()
            .find(|n| n.action.as_ref().is_some_and(|a| a.success))
            .map(|n| (*n).clone());
        let last_failure_with_reflection = actions
            .iter()
            .rev()
            .find(|n| {
                n.action
                    .as_ref()
                    .is_some_and(|a| !a.success && a.reflection.as_deref().is_some_and(|r| !r.is_empty()))
            })
            .map(|n| (*n).clone());
        Ok(RelationalContext { parent_goal, last_success, last_failure_with_reflection })
    }

    fn ancestors(&self, id: NodeId) -> Vec<NodeId> {
        let mut chain = vec![id];
        let mut cur = id;
        while let Some(p) = self.node(cur).and_then(|n| n.parent) {
            chain.push(p);
            cur = p;
        }
        chain
    }

    /// Undirected path length in the task tree; `None` across trees.
    pub fn tree_distance(&self, a: NodeId, b: NodeId) -> Option<u32> {
        if self.node(a).is_none() || self.node(b).is_none() {
            return None;
        }
        let up_a = self.ancestors(a);
        let depth_in_a: HashMap<NodeId, usize> =
            up_a.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        self.ancestors(b)
            .iter()
            .enumerate()
            .find_map(|(j, n)| depth_in_a.get(n).map(|i| (i + j) as u32))
    }

    fn descendants(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack: Vec<NodeId> = self.node(id).map(|n| n.children.clone()).unwrap_or_default();
        while let Some(c) = stack.pop() {
            out.push(c);
            if let Some(n) = self.node(c) {
                stack.extend(n.children.iter().copied());
            }
        }
        out
    }

    /// Builds a route for every non-leaf node under a completed root and
    /// files the non-empty ones into route history.
    pub fn finalize_route(&mut self, root: NodeId) -> Result<BTreeMap<NodeId, Route>, MemoryError> {
        let root_node = self.node(root).ok_or(MemoryError::UnknownNode(root))?;
        if root_node.status != TaskStatus::Success {
            return Err(MemoryError::RootNotComplete(root));
        }
        let mut subtree = vec![root];
        subtree.extend(self.descendants(root));
        let mut routes = BTreeMap::new();
        for id in subtree {
            let node = &self.nodes[&id];
            if node.children.is_empty() {
                continue;
            }
            let mut successes: Vec<(u64, NodeId)> = self
                .descendants(id)
                .into_iter()
                .filter_map(|d| {
                    let a = self.nodes[&d].action.as_ref()?;
                    a.success.then_some((a.step_index, d))
                })
                .collect();
            successes.sort_unstable();
            routes.insert(
                id,
                Route { for_node: id, actions: successes.into_iter().map(|(_, d)| d).collect() },
            );
        }
        for route in routes.values() {
            if route.actions.is_empty() {
                continue;
            }
            let goal = self.nodes[&route.for_node].goal.clone();
            let actions: Vec<Action> = route
                .actions
                .iter()
                .filter_map(|a| self.nodes[a].action.as_ref().map(|r| r.action.clone()))
                .collect();
            let key = self.embed(&goal)?;
            self.add_route(RouteRecord {
                goal,
                for_node: route.for_node,
                actions,
                action_nodes: route.actions.clone(),
                key: Some(key),
            })?;
        }
        Ok(routes)
    }

    fn add_route(&mut self, record: RouteRecord) -> Result<(), MemoryError> {
        let steps: Vec<String> = record.actions.iter().map(|a| a.to_string()).collect();
        let snippet = format!("route for {:?}: {}", record.goal, steps.join(" -> "));
        let key = match &record.key {
            Some(k) => self.check_key(k)?,
            None => self.embed(&record.goal)?,
        };
        self.push_keyed(Corpus::RouteHistory, &record.goal, snippet, key, Some(record.for_node), "");
        self.routes.push(record);
        Ok(())
    }

    pub fn routes(&self) -> &[RouteRecord] {
        &self.routes
    }

    // ---- app / page / user / action memory ---------------------------

    pub fn upsert_app_entry(&mut self, app_id: &str, description: &str) -> Result<(), MemoryError> {
        let key = self.embed(description)?;
        self.upsert_app(AppMemoryEntry {
            app_id: app_id.to_string(),
            description: description.to_string(),
            page_notes: BTreeMap::new(),
            key: Some(key),
        })
    }

    fn upsert_app(&mut self, mut entry: AppMemoryEntry) -> Result<(), MemoryError> {
        let key = match &entry.key {
            Some(k) => self.check_key(k)?,
            None => self.embed(&entry.description)?,
        };
        entry.key = Some(key.clone());
        let snippet = format!("app {}: {}", entry.app_id, entry.description);
        if let Some(e) = self
            .entries
            .iter_mut()
            .find(|e| e.corpus == Corpus::App && e.tag == entry.app_id)
        {
            e.text = entry.description.clone();
            e.snippet = snippet;
            e.key = key;
        } else {
            let tag = entry.app_id.clone();
            self.push_keyed(Corpus::App, &entry.description.clone(), snippet, key, None, &tag);
        }
        match self.apps.get_mut(&entry.app_id) {
            Some(existing) => {
                existing.description = entry.description;
                existing.key = entry.key;
                existing.page_notes.extend(entry.page_notes);
            }
            None => {
                self.apps.insert(entry.app_id.clone(), entry);
            }
        }
        Ok(())
    }

    pub fn set_app_page_note(&mut self, app_id: &str, screen_key: &str, note: &str) -> Result<(), MemoryError> {
        let app = self
            .apps
            .get_mut(app_id)
            .ok_or_else(|| MemoryError::FileFormat(format!("unknown app {app_id}")))?;
        app.page_notes.insert(screen_key.to_string(), note.to_string());
        Ok(())
    }

    pub fn apps(&self) -> impl Iterator<Item = &AppMemoryEntry> {
        self.apps.values()
    }

    pub fn append_page_note(&mut self, screen_key: &str, note: &str) -> Result<(), MemoryError> {
        self.pages
            .entry(screen_key.to_string())
            .or_insert_with(|| PageMemoryEntry { screen_key: screen_key.to_string(), notes: Vec::new() })
            .notes
            .push(note.to_string());
        self.push_entry(Corpus::Page, note, format!("page note: {note}"), None, screen_key)
    }

    pub fn page(&self, screen_key: &str) -> Option<&PageMemoryEntry> {
        self.pages.get(screen_key)
    }

    pub fn append_action_memory(&mut self, item: ActionMemoryItem) -> Result<(), MemoryError> {
        let text = item.describe();
        self.push_entry(Corpus::Action, &text, format!("action memory: {text}"), None, "")?;
        self.action_memory.push(item);
        Ok(())
    }

    pub fn action_memory(&self) -> &[ActionMemoryItem] {
        &self.action_memory
    }

    pub fn append_user_memory(&mut self, text: &str, timestamp: i64) -> Result<(), MemoryError> {
        self.add_user(UserMemoryEntry { text: text.to_string(), timestamp, key: None })
    }

    fn add_user(&mut self, mut entry: UserMemoryEntry) -> Result<(), MemoryError> {
        let key = match &entry.key {
            Some(k) => self.check_key(k)?,
            None => self.embed(&entry.text)?,
        };
        entry.key = Some(key.clone());
        self.push_keyed(Corpus::User, &entry.text.clone(), format!("user: {}", entry.text), key, None, "");
        self.users.push(entry);
        Ok(())
    }

    pub fn users(&self) -> &[UserMemoryEntry] {
        &self.users
    }

    /// Adds a free-standing entry to a corpus, e.g. for fixtures or
    /// externally curated experience.
    pub fn insert_entry(
        &mut self,
        corpus: Corpus,
        text: &str,
        origin: Option<NodeId>,
    ) -> Result<u64, MemoryError> {
        if let Some(o) = origin {
            self.node(o).ok_or(MemoryError::UnknownNode(o))?;
        }
        self.push_entry(corpus, text, text.to_string(), origin, "")?;
        Ok(self.next_seq - 1)
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    fn check_key(&self, key: &MemoryKey) -> Result<MemoryKey, MemoryError> {
        if key.dim() != self.embedder.dim() {
            return Err(MemoryError::DimensionMismatch { left: self.embedder.dim(), right: key.dim() });
        }
        Ok(key.clone())
    }

    fn push_entry(
        &mut self,
        corpus: Corpus,
        text: &str,
        snippet: String,
        origin: Option<NodeId>,
        tag: &str,
    ) -> Result<(), MemoryError> {
        let key = self.embed(text)?;
        self.push_keyed(corpus, text, snippet, key, origin, tag);
        Ok(())
    }

    fn push_keyed(
        &mut self,
        corpus: Corpus,
        text: &str,
        snippet: String,
        key: MemoryKey,
        origin: Option<NodeId>,
        tag: &str,
    ) {
        self.entries.push(MemoryEntry {
            seq: self.next_seq,
            corpus,
            text: text.to_string(),
            snippet,
            key,
            origin,
            tag: tag.to_string(),
        });
        self.next_seq += 1;
    }

    // ---- retrieval ---------------------------------------------------

    fn rank(mut scored: Vec<Retrieved>, k: usize) -> Vec<Retrieved> {
        scored.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.entry.seq.cmp(&b.entry.seq))
        });
        scored.truncate(k);
        scored
    }

    /// Top-`k` entries of one corpus by cosine similarity to `query`.
    pub fn retrieve_content(
        &self,
        query: &str,
        corpus: Corpus,
        k: usize,
    ) -> Result<Vec<Retrieved>, MemoryError> {
        self.retrieve_content_in(query, &[corpus], k)
    }

    pub fn retrieve_content_in(
        &self,
        query: &str,
        corpora: &[Corpus],
        k: usize,
    ) -> Result<Vec<Retrieved>, MemoryError> {
        let q = self.embed(query)?;
        let scored = self
            .entries
            .iter()
            .filter(|e| corpora.contains(&e.corpus))
            .map(|e| Ok(Retrieved { score: cosine(&q, &e.key)?, entry: e.clone() }))
            .collect::<Result<Vec<_>, MemoryError>>()?;
        Ok(Self::rank(scored, k))
    }

    /// Blends content similarity with closeness in the task tree:
    /// `w_content * cos + w_relation / (1 + distance)`.
    pub fn retrieve_weighted(
        &self,
        query: &str,
        node: NodeId,
        corpora: &[Corpus],
        weights: RetrievalWeights,
        k: usize,
    ) -> Result<Vec<Retrieved>, MemoryError> {
        let valid = |w: f64| w.is_finite() && w >= 0.0;
        if !valid(weights.relation) || !valid(weights.content) || weights.relation + weights.content == 0.0 {
            return Err(MemoryError::InvalidWeights);
        }
        self.node(node).ok_or(MemoryError::UnknownNode(node))?;
        let q = self.embed(query)?;
        let scored = self
            .entries
            .iter()
            .filter(|e| corpora.contains(&e.corpus))
            .map(|e| {
                let relation = e
                    .origin
                    .and_then(|o| self.tree_distance(node, o))
                    .map_or(0.0, |d| 1.0 / (1.0 + f64::from(d)));
                let score = weights.content * cosine(&q, &e.key)? + weights.relation * relation;
                Ok(Retrieved { score, entry: e.clone() })
            })
            .collect::<Result<Vec<_>, MemoryError>>()?;
        Ok(Self::rank(scored, k))
    }

    // ---- persistence -------------------------------------------------

    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot {
            schema_version: SCHEMA_VERSION,
            task_history: self.nodes.values().cloned().collect(),
            route_history: self.routes.clone(),
            app: self.apps.values().cloned().collect(),
            page: self.pages.values().cloned().collect(),
            user: self.users.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        let json = serde_json::to_string_pretty(&self.snapshot())
            .map_err(|e| MemoryError::FileFormat(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Merges a snapshot into the store. Node ids must not collide with
    /// existing ones.
    pub fn merge_snapshot(&mut self, snap: MemorySnapshot) -> Result<(), MemoryError> {
        if let Some(dup) = snap.task_history.iter().find(|n| self.nodes.contains_key(&n.id)) {
            return Err(MemoryError::DuplicateId(dup.id));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = snap.task_history.iter().find(|n| !seen.insert(n.id)) {
            return Err(MemoryError::DuplicateId(dup.id));
        }
        for node in &snap.task_history {
            for id in node.parent.iter().chain(&node.children) {
                if !self.nodes.contains_key(id) && !snap.task_history.iter().any(|n| n.id == *id) {
                    return Err(MemoryError::FileFormat(format!("node {} references missing {}", node.id, id)));
                }
            }
        }
        for node in snap.task_history {
            self.next_id = self.next_id.max(node.id.0 + 1);
            self.episode = self.episode.max(node.episode);
            if let Some(a) = &node.action {
                self.next_step = self.next_step.max(a.step_index + 1);
            }
            self.nodes.insert(node.id, node);
        }
        // Re-index history entries in id order.
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        for id in ids {
            let node = &self.nodes[&id];
            let Some(a) = &node.action else { continue };
            if self.entries.iter().any(|e| e.origin == Some(id) && e.corpus != Corpus::RouteHistory) {
                continue;
            }
            let goal = node.goal.clone();
            if a.success {
                let snippet = format!("success: {} for {:?}", a.action, goal);
                self.push_entry(Corpus::SuccessHistory, &goal, snippet, Some(id), "")?;
            } else if let Some(r) = a.reflection.clone().filter(|r| !r.is_empty()) {
                let snippet = format!("failure: {} for {:?}, reflection: {}", a.action, goal, r);
                self.push_entry(Corpus::FailureHistory, &format!("{goal} {r}"), snippet, Some(id), "")?;
            }
        }
        for route in snap.route_history {
            self.add_route(route)?;
        }
        for app in snap.app {
            self.upsert_app(app)?;
        }
        for page in snap.page {
            for note in page.notes {
                self.append_page_note(&page.screen_key, &note)?;
            }
        }
        for user in snap.user {
            self.add_user(user)?;
        }
        Ok(())
    }

    /// Loads expert entries from a JSON file; an empty file is a no-op.
    pub fn warm_start(&mut self, path: &Path) -> Result<(), MemoryError> {
        match MemorySnapshot::load(path)? {
            Some(snap) => self.merge_snapshot(snap),
            None => Ok(()),
        }
    }
}
