use std::path::Path;

use glob::Pattern;
use serde::Deserialize;
use serde_json::Value;

use super::{BackendError, DecisionBackend, DecisionRequest, DecisionResponse, Role};

fn any() -> String {
    "*".to_string()
}

/// One entry of a script file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    pub role: Role,
    #[serde(default = "any")]
    pub screen_glob: String,
    #[serde(default = "any")]
    pub goal_glob: String,
    /// ExecReflect only: matched against the canonical form of the prior action.
    #[serde(default)]
    pub action_glob: Option<String>,
    /// Matches when at least one retrieved memory snippet fits the glob.
    #[serde(default)]
    pub memory_glob: Option<String>,
    pub response: Value,
    #[serde(default)]
    pub max_uses: Option<u32>,
}

#[derive(Debug, Clone)]
struct CompiledRule {
    rule: ScriptRule,
    screen: Pattern,
    goal: Pattern,
    action: Option<Pattern>,
    memory: Option<Pattern>,
    remaining: Option<u32>,
}

impl CompiledRule {
    fn matches(&self, req: &DecisionRequest) -> bool {
        if self.rule.role != req.role || self.remaining == Some(0) {
            return false;
        }
        if !self.screen.matches(&req.screen) || !self.goal.matches(&req.goal) {
            return false;
        }
        if let Some(p) = &self.action {
            match &req.prior_action {
                Some(a) if p.matches(&a.to_string()) => {}
                _ => return false,
            }
        }
        if let Some(p) = &self.memory {
            if !req.retrieved_memory.iter().any(|m| p.matches(m)) {
                return false;
            }
        }
        true
    }

    fn same_matcher(&self, other: &CompiledRule) -> bool {
        self.rule.role == other.rule.role
            && self.rule.screen_glob == other.rule.screen_glob
            && self.rule.goal_glob == other.rule.goal_glob
            && self.rule.action_glob == other.rule.action_glob
            && self.rule.memory_glob == other.rule.memory_glob
    }
}

/// Deterministic backend answering from an ordered rule list; the first
/// matching rule with uses left wins.
#[derive(Debug, Clone, Default)]
pub struct ScriptedOracle {
    rules: Vec<CompiledRule>,
    warnings: Vec<String>,
}

fn compile(glob: &str) -> Result<Pattern, BackendError> {
    Pattern::new(glob).map_err(|e| BackendError::FileFormat(format!("bad glob {glob:?}: {e}")))
}

impl ScriptedOracle {
    pub fn from_rules(rules: Vec<ScriptRule>) -> Result<Self, BackendError> {
        let mut compiled: Vec<CompiledRule> = Vec::with_capacity(rules.len());
        let mut warnings = Vec::new();
        for (i, rule) in rules.into_iter().enumerate() {
            DecisionResponse::from_json(rule.role, &rule.response)
                .map_err(|e| BackendError::FileFormat(format!("rule {i}: {e}")))?;
            let c = CompiledRule {
                screen: compile(&rule.screen_glob)?,
                goal: compile(&rule.goal_glob)?,
                action: rule.action_glob.as_deref().map(compile).transpose()?,
                memory: rule.memory_glob.as_deref().map(compile).transpose()?,
                remaining: rule.max_uses,
                rule,
            };
            if let Some(j) = compiled
                .iter()
                .position(|earlier| earlier.rule.max_uses.is_none() && earlier.same_matcher(&c))
            {
                let msg = format!("rule {i} is unreachable: shadowed by rule {j} with the same matcher");
                tracing::warn!("{msg}");
                warnings.push(msg);
            }
            compiled.push(c);
        }
        Ok(ScriptedOracle { rules: compiled, warnings })
    }

    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        let rules: Vec<ScriptRule> =
            serde_json::from_str(text).map_err(|e| BackendError::FileFormat(e.to_string()))?;
        Self::from_rules(rules)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::FileFormat(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Unreachable-rule diagnostics collected at load time.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

impl DecisionBackend for ScriptedOracle {
    fn decide(&mut self, request: &DecisionRequest) -> Result<DecisionResponse, BackendError> {
        request.check()?;
        let rule = self
            .rules
            .iter_mut()
            .find(|r| r.matches(request))
            .ok_or_else(|| BackendError::NoMatchingRule {
                role: request.role,
                screen: request.screen.clone(),
                goal: request.goal.clone(),
            })?;
        if let Some(n) = rule.remaining.as_mut() {
            *n -= 1;
        }
        DecisionResponse::from_json(request.role, &rule.rule.response)
    }
}
