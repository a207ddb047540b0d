//! Decision backends: the four request roles, their response schemas, and
//! two implementations (a scripted oracle and a remote chat-completion client).

mod remote;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::action::{parse_action_call, Action};

pub use remote::{extract_json_object, PromptTemplates, RemoteClient, RemoteConfig};
pub use scripted::{ScriptRule, ScriptedOracle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Plan,
    PlanReflect,
    Act,
    ExecReflect,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Plan, Role::PlanReflect, Role::Act, Role::ExecReflect];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Plan => "Plan",
            Role::PlanReflect => "PlanReflect",
            Role::Act => "Act",
            Role::ExecReflect => "ExecReflect",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub role: Role,
    pub goal: String,
    /// Screen label (`package/screen`) the observation was taken on.
    pub screen: String,
    pub observation: String,
    pub post_observation: Option<String>,
    pub retrieved_memory: Vec<String>,
    pub action_catalog: Vec<String>,
    pub prior_action: Option<Action>,
}

impl DecisionRequest {
    pub fn new(role: Role, goal: &str, screen: &str, observation: &str) -> Self {
        DecisionRequest {
            role,
            goal: goal.to_string(),
            screen: screen.to_string(),
            observation: observation.to_string(),
            post_observation: None,
            retrieved_memory: Vec::new(),
            action_catalog: Vec::new(),
            prior_action: None,
        }
    }

    pub fn check(&self) -> Result<(), BackendError> {
        let is_exec = self.role == Role::ExecReflect;
        if self.post_observation.is_some() != is_exec {
            return Err(BackendError::InvalidRequest(
                "post_observation must be present exactly for ExecReflect".into(),
            ));
        }
        if self.prior_action.is_some() && !is_exec {
            return Err(BackendError::InvalidRequest("prior_action is ExecReflect-only".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecisionResponse {
    Plan {
        subgoals: Vec<String>,
    },
    PlanReflect {
        can_do: bool,
        reflection: String,
    },
    Act {
        can_complete: bool,
        action: Option<Action>,
        observation: String,
        thought: String,
        message: Option<String>,
        extracted_info: BTreeMap<String, String>,
    },
    ExecReflect {
        subgoal_status: bool,
        goal_status: bool,
        reflection: Option<String>,
    },
}

fn violation(msg: impl Into<String>) -> BackendError {
    BackendError::SchemaViolation(msg.into())
}

fn req_bool(obj: &Map<String, Value>, key: &str) -> Result<bool, BackendError> {
    match obj.get(key) {
        Some(Value::Bool(b)) => Ok(*b),
        Some(other) => Err(violation(format!("{key} must be a boolean, got {other}"))),
        None => Err(violation(format!("missing {key}"))),
    }
}

fn opt_str(obj: &Map<String, Value>, key: &str) -> Result<Option<String>, BackendError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(other) => Err(violation(format!("{key} must be a string, got {other}"))),
    }
}

impl DecisionResponse {
    pub fn role(&self) -> Role {
        match self {
            DecisionResponse::Plan { .. } => Role::Plan,
            DecisionResponse::PlanReflect { .. } => Role::PlanReflect,
            DecisionResponse::Act { .. } => Role::Act,
            DecisionResponse::ExecReflect { .. } => Role::ExecReflect,
        }
    }

    /// Validates a JSON reply against the schema of `role`.
    pub fn from_json(role: Role, value: &Value) -> Result<Self, BackendError> {
        let obj = value
            .as_object()
            .ok_or_else(|| violation(format!("{role} response must be a JSON object")))?;
        match role {
            Role::Plan => {
                let list = obj
                    .get("subgoals")
                    .and_then(Value::as_array)
                    .ok_or_else(|| violation("subgoals must be an array"))?;
                if list.is_empty() {
                    return Err(violation("subgoals must not be empty"));
                }
                let subgoals = list
                    .iter()
                    .map(|v| match v.as_str() {
                        Some(s) if !s.trim().is_empty() => Ok(s.to_string()),
                        _ => Err(violation(format!("subgoal {v} is not a non-empty string"))),
                    })
                    .collect::<Result<_, _>>()?;
                Ok(DecisionResponse::Plan { subgoals })
            }
            Role::PlanReflect => Ok(DecisionResponse::PlanReflect {
                can_do: req_bool(obj, "can_do")?,
                reflection: opt_str(obj, "reflection")?.unwrap_or_default(),
            }),
            Role::Act => {
                let can_complete = req_bool(obj, "can_complete")?;
                let action = match opt_str(obj, "action")? {
                    Some(text) if can_complete => Some(
                        parse_action_call(&text)
                            .map_err(|e| violation(format!("unparseable action {text:?}: {e}")))?,
                    ),
                    None if can_complete => {
                        return Err(violation("action is required when can_complete is true"))
                    }
                    _ => None,
                };
                let extracted_info = match obj.get("extracted_info") {
                    None | Some(Value::Null) => BTreeMap::new(),
                    Some(Value::Object(m)) => m
                        .iter()
                        .map(|(k, v)| match v {
                            Value::String(s) => Ok((k.clone(), s.clone())),
                            other => Err(violation(format!("extracted_info.{k} must be a string, got {other}"))),
                        })
                        .collect::<Result<_, BackendError>>()?,
                    Some(other) => {
                        return Err(violation(format!("extracted_info must be an object, got {other}")))
                    }
                };
                Ok(DecisionResponse::Act {
                    can_complete,
                    action,
                    observation: opt_str(obj, "observation")?.unwrap_or_default(),
                    thought: opt_str(obj, "thought")?.unwrap_or_default(),
                    message: opt_str(obj, "message")?,
                    extracted_info,
                })
            }
            Role::ExecReflect => Ok(DecisionResponse::ExecReflect {
                subgoal_status: req_bool(obj, "subgoal_status")?,
                goal_status: req_bool(obj, "goal_status")?,
                reflection: opt_str(obj, "reflection")?,
            }),
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            DecisionResponse::Plan { subgoals } => json!({ "subgoals": subgoals }),
            DecisionResponse::PlanReflect { can_do, reflection } => {
                json!({ "can_do": can_do, "reflection": reflection })
            }
            DecisionResponse::Act { can_complete, action, observation, thought, message, extracted_info } => {
                let mut v = json!({
                    "can_complete": can_complete,
                    "observation": observation,
                    "thought": thought,
                });
                if let Some(a) = action {
                    v["action"] = json!(a.to_string());
                }
                if let Some(m) = message {
                    v["message"] = json!(m);
                }
                if !extracted_info.is_empty() {
                    v["extracted_info"] = json!(extracted_info);
                }
                v
            }
            DecisionResponse::ExecReflect { subgoal_status, goal_status, reflection } => {
                let mut v = json!({ "subgoal_status": subgoal_status, "goal_status": goal_status });
                if let Some(r) = reflection {
                    v["reflection"] = json!(r);
                }
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend timeout")]
    Timeout,
    #[error("no scripted rule for {role} on screen {screen:?} with goal {goal:?}")]
    NoMatchingRule { role: Role, screen: String, goal: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("script file error: {0}")]
    FileFormat(String),
}

/// Anything that can answer decision requests.
pub trait DecisionBackend: Send {
    fn decide(&mut self, request: &DecisionRequest) -> Result<DecisionResponse, BackendError>;
}
