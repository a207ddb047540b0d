//! App specification files for the simulated device.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{DeviceError, LAUNCHER_ID, SCREEN_HEIGHT, SCREEN_WIDTH};
use crate::vh::Rect;

pub const APP_SCHEMA_VERSION: u32 = 1;

fn schema_v1() -> u32 {
    APP_SCHEMA_VERSION
}

/// Rectangles are written as `[left, top, right, bottom]` in spec files.
mod rect_array {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::vh::Rect;

    pub fn serialize<S: Serializer>(r: &Rect, s: S) -> Result<S::Ok, S::Error> {
        [r.left, r.top, r.right, r.bottom].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rect, D::Error> {
        let [left, top, right, bottom] = <[i32; 4]>::deserialize(d)?;
        Ok(Rect { left, top, right, bottom })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppSpec {
    #[serde(default = "schema_v1")]
    pub schema_version: u32,
    pub app_id: String,
    pub label: String,
    pub description: String,
    pub initial_screen: String,
    /// Declared variables and their defaults.
    #[serde(default)]
    pub vars: BTreeMap<String, String>,
    pub screens: BTreeMap<String, ScreenSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreenSpec {
    #[serde(default)]
    pub elements: Vec<ElementSpec>,
    #[serde(default)]
    pub scroll_window: Option<ScrollWindow>,
    #[serde(default)]
    pub popups: Vec<PopupSpec>,
}

/// A vertical list; elements with a `row` are laid out inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScrollWindow {
    pub key: String,
    #[serde(with = "rect_array")]
    pub bounds: Rect,
    pub row_height: i32,
    pub total_rows: u32,
    pub visible_rows: u32,
}

impl ScrollWindow {
    pub fn max_offset(&self) -> u32 {
        self.total_rows.saturating_sub(self.visible_rows)
    }

    pub fn row_bounds(&self, row: u32, offset: u32) -> Rect {
        let top = self.bounds.top + (row as i32 - offset as i32) * self.row_height;
        Rect::new(self.bounds.left, top, self.bounds.right, top + self.row_height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopupSpec {
    pub popup_id: String,
    /// Chance of appearing when its screen is entered, drawn from the
    /// device seed and step index.
    pub probability: f64,
    pub text: String,
    #[serde(default = "default_dismiss")]
    pub dismiss_text: String,
}

fn default_dismiss() -> String {
    "Close".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElementSpec {
    pub key: String,
    /// Ignored for list rows, whose bounds come from the scroll window.
    #[serde(with = "rect_array", default)]
    pub bounds: Rect,
    #[serde(default)]
    pub clickable: bool,
    #[serde(default)]
    pub scrollable: bool,
    #[serde(default)]
    pub editable: bool,
    /// Displayed text; `{{var}}` is replaced by the app variable's value.
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub content_desc: String,
    /// Variable an editable element writes to; defaults to the key.
    #[serde(default)]
    pub var: Option<String>,
    #[serde(default)]
    pub row: Option<u32>,
    #[serde(default)]
    pub class: Option<String>,
    #[serde(default)]
    pub transitions: Vec<TransitionRule>,
}

impl ElementSpec {
    pub fn var_name(&self) -> &str {
        self.var.as_deref().unwrap_or(&self.key)
    }

    pub fn class_name(&self) -> &str {
        if let Some(c) = &self.class {
            return c;
        }
        if self.editable {
            "android.widget.EditText"
        } else if self.scrollable {
            "androidx.recyclerview.widget.RecyclerView"
        } else if self.clickable {
            "android.widget.Button"
        } else {
            "android.widget.TextView"
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Click,
    LongPress,
    DoubleClick,
    BoxInput,
    TypeCommit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionRule {
    pub on: Trigger,
    #[serde(default)]
    pub guard: Option<Guard>,
    #[serde(default)]
    pub effects: Vec<Effect>,
}

/// Equality test over one app variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Guard {
    pub var: String,
    #[serde(default)]
    pub equals: Option<String>,
    #[serde(default)]
    pub not_equals: Option<String>,
}

impl Guard {
    pub fn holds(&self, vars: &BTreeMap<String, String>) -> bool {
        let value = vars.get(&self.var).map(String::as_str).unwrap_or("");
        self.equals.as_deref().is_none_or(|e| e == value)
            && self.not_equals.as_deref().is_none_or(|n| n != value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Effect {
    GotoScreen(String),
    SetVar { name: String, value: String },
    PushEvent {
        name: String,
        #[serde(default)]
        payload: Value,
    },
    OpenApp(String),
    CloseApp(Option<String>),
}

/// Replaces `{{name}}` with the value of `name` in `vars`.
pub fn interpolate(template: &str, vars: &BTreeMap<String, String>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                let name = after[..end].trim();
                out.push_str(vars.get(name).map(String::as_str).unwrap_or(""));
                rest = &after[end + 2..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

fn err(path: String, message: impl Into<String>) -> DeviceError {
    DeviceError::SpecValidation { path, message: message.into() }
}

fn check_rect(path: &str, r: &Rect) -> Result<(), DeviceError> {
    let inside = r.left >= 0
        && r.top >= 0
        && r.right <= SCREEN_WIDTH as i32
        && r.bottom <= SCREEN_HEIGHT as i32
        && r.left <= r.right
        && r.top <= r.bottom;
    if inside {
        Ok(())
    } else {
        Err(err(path.to_string(), format!("bounds {r:?} outside the {SCREEN_WIDTH}x{SCREEN_HEIGHT} device")))
    }
}

/// Checks one app against the set of all known app ids.
pub fn validate_app(app: &AppSpec, known_apps: &BTreeSet<String>) -> Result<(), DeviceError> {
    let base = format!("apps[{}]", app.app_id);
    if app.schema_version != APP_SCHEMA_VERSION {
        return Err(err(format!("{base}.schema_version"), format!("unsupported version {}", app.schema_version)));
    }
    if app.app_id.is_empty() {
        return Err(err("apps[].app_id".into(), "app_id must not be empty"));
    }
    if !app.screens.contains_key(&app.initial_screen) {
        return Err(err(format!("{base}.initial_screen"), format!("unknown screen {:?}", app.initial_screen)));
    }
    for (screen_id, screen) in &app.screens {
        let spath = format!("{base}.screens.{screen_id}");
        if let Some(w) = &screen.scroll_window {
            check_rect(&format!("{spath}.scroll_window.bounds"), &w.bounds)?;
            if w.row_height <= 0 || w.visible_rows == 0 {
                return Err(err(format!("{spath}.scroll_window"), "row_height and visible_rows must be positive"));
            }
        }
        let mut keys = BTreeSet::new();
        for (i, el) in screen.elements.iter().enumerate() {
            let epath = format!("{spath}.elements[{i}]");
            if !keys.insert(el.key.as_str()) {
                return Err(err(format!("{epath}.key"), format!("duplicate element key {:?}", el.key)));
            }
            match (el.row, &screen.scroll_window) {
                (Some(row), Some(w)) if row >= w.total_rows => {
                    return Err(err(format!("{epath}.row"), format!("row {row} >= total_rows {}", w.total_rows)))
                }
                (Some(_), None) => {
                    return Err(err(format!("{epath}.row"), "row given but the screen has no scroll_window"))
                }
                (None, _) => check_rect(&format!("{epath}.bounds"), &el.bounds)?,
                _ => {}
            }
            for (j, rule) in el.transitions.iter().enumerate() {
                for (k, effect) in rule.effects.iter().enumerate() {
                    let fpath = format!("{epath}.transitions[{j}].effects[{k}]");
                    match effect {
                        Effect::GotoScreen(s) if !app.screens.contains_key(s) => {
                            return Err(err(format!("{fpath}.goto_screen"), format!("unknown screen {s:?}")))
                        }
                        Effect::OpenApp(a) if !known_apps.contains(a) => {
                            return Err(err(format!("{fpath}.open_app"), format!("unknown app {a:?}")))
                        }
                        Effect::CloseApp(Some(a)) if !known_apps.contains(a) => {
                            return Err(err(format!("{fpath}.close_app"), format!("unknown app {a:?}")))
                        }
                        _ => {}
                    }
                }
            }
        }
        for (i, p) in screen.popups.iter().enumerate() {
            if !(0.0..=1.0).contains(&p.probability) {
                return Err(err(format!("{spath}.popups[{i}].probability"), "probability must be in [0, 1]"));
            }
        }
    }
    Ok(())
}

/// Home screen listing every installed app as an icon, four per row.
pub fn launcher_for(apps: &[&AppSpec]) -> AppSpec {
    let elements = apps
        .iter()
        .enumerate()
        .map(|(i, app)| {
            let (col, row) = ((i % 4) as i32, (i / 4) as i32);
            let left = 40 + col * 250;
            let top = 300 + row * 320;
            ElementSpec {
                key: format!("icon_{}", app.app_id),
                bounds: Rect::new(left, top, left + 230, top + 280),
                clickable: true,
                scrollable: false,
                editable: false,
                text: app.label.clone(),
                content_desc: String::new(),
                var: None,
                row: None,
                class: Some("android.widget.FrameLayout".into()),
                transitions: vec![TransitionRule {
                    on: Trigger::Click,
                    guard: None,
                    effects: vec![Effect::OpenApp(app.app_id.clone())],
                }],
            }
        })
        .collect();
    AppSpec {
        schema_version: APP_SCHEMA_VERSION,
        app_id: LAUNCHER_ID.to_string(),
        label: "Home".into(),
        description: "device home screen".into(),
        initial_screen: "home".into(),
        vars: BTreeMap::new(),
        screens: BTreeMap::from([(
            "home".to_string(),
            ScreenSpec { elements, scroll_window: None, popups: Vec::new() },
        )]),
    }
}
