//! A deterministic simulated phone: apps are declared as screen graphs in
//! JSON, rendered to UIAutomator-style XML, and driven by [`Action`]s.

pub mod spec;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::action::{validate_action, Action, Direction, ValidationError};
use crate::vh::{distill_traced, parse_vh, DistillConfig, Rect, ScreenObservation, VhError};

pub use spec::{
    interpolate, AppSpec, Effect, ElementSpec, Guard, PopupSpec, ScreenSpec, ScrollWindow, TransitionRule,
    Trigger,
};

pub const SCREEN_WIDTH: u32 = 1080;
pub const SCREEN_HEIGHT: u32 = 2400;
pub const LAUNCHER_ID: &str = "com.sim.launcher";
const HOME_SCREEN: &str = "home";
const POPUP_DISMISS_KEY: &str = "popup_dismiss";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeviceError {
    #[error("invalid app spec at {path}: {message}")]
    SpecValidation { path: String, message: String },
    #[error(transparent)]
    Invalid(#[from] ValidationError),
    #[error("element {index} is not editable")]
    NotEditable { index: i64 },
    #[error("element {index} is not scrollable")]
    NotScrollable { index: i64 },
    #[error("no installed app matches {0:?}")]
    UnknownApp(String),
    #[error("unknown screen {screen:?} in {app}")]
    UnknownScreen { app: String, screen: String },
    #[error("rendered hierarchy failed to parse: {0}")]
    Render(#[from] VhError),
}

/// Maps a free-text app description to an installed package.
pub trait AppResolver {
    fn resolve_app(&self, description: &str) -> Option<String>;
}

/// Resolves only exact (case-insensitive) package names or labels.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactResolver;

impl ExactResolver {
    pub fn resolve_in(device: &Device, description: &str) -> Option<String> {
        let wanted = description.trim();
        device
            .apps()
            .find(|a| a.app_id.eq_ignore_ascii_case(wanted) || a.label.eq_ignore_ascii_case(wanted))
            .map(|a| a.app_id.clone())
    }
}

/// Something observable that happened while applying an action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceEvent {
    pub kind: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub detail: BTreeMap<String, String>,
}

impl DeviceEvent {
    pub fn new(kind: &str) -> Self {
        DeviceEvent { kind: kind.to_string(), detail: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        self.detail.insert(key.to_string(), value.into());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.detail.get(key).map(String::as_str)
    }
}

/// Result of one successful [`Device::apply`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionOutcome {
    pub events: Vec<DeviceEvent>,
    pub screen_changed: bool,
}

/// One applied action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    /// 1-based action counter.
    pub step: u64,
    pub action: String,
    pub events: Vec<DeviceEvent>,
    pub screen_before: String,
    pub screen_after: String,
    pub screen_key_after: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceState {
    pub foreground_app: String,
    pub screen: String,
    pub back_stack: Vec<(String, String)>,
    pub vars: BTreeMap<String, BTreeMap<String, String>>,
    pub focused: Option<String>,
    pub scroll_offset: u32,
    pub popup: Option<String>,
    pub step: u64,
}

/// Setup step applied before an episode; not logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Directive {
    SetVar { app: String, name: String, value: String },
    OpenApp { app: String },
    Goto { app: String, screen: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Element(usize),
    Window,
    PopupDismiss,
}

/// What the agent sees, plus the element behind every interactive index.
#[derive(Debug, Clone)]
pub struct View {
    pub xml: String,
    pub observation: ScreenObservation,
    targets: Vec<Target>,
}

enum Fired {
    NoRule,
    Blocked,
    Ran,
}

#[derive(Debug, Clone)]
pub struct Device {
    apps: Arc<BTreeMap<String, AppSpec>>,
    seed: u64,
    distill: DistillConfig,
    state: DeviceState,
    log: Vec<LogEntry>,
}

/// Parses one app spec file.
pub fn load_app_spec(path: &Path) -> Result<AppSpec, DeviceError> {
    let text = std::fs::read_to_string(path).map_err(|e| DeviceError::SpecValidation {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| DeviceError::SpecValidation {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Loads and validates a set of app spec files into a fresh device.
pub fn load_device<P: AsRef<Path>>(paths: &[P], seed: u64) -> Result<Device, DeviceError> {
    let apps = paths.iter().map(|p| load_app_spec(p.as_ref())).collect::<Result<Vec<_>, _>>()?;
    Device::new(apps, seed)
}

fn screen_key_of(app: &str, screen: &str, offset: u32, popup: Option<&str>) -> String {
    let mut h = Sha256::new();
    h.update(app.as_bytes());
    h.update([0]);
    h.update(screen.as_bytes());
    h.update([0]);
    h.update(offset.to_le_bytes());
    h.update([0]);
    h.update(popup.unwrap_or("").as_bytes());
    h.finalize()[..8].iter().fold(String::with_capacity(16), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            '\n' => out.push_str("&#10;"),
            c => out.push(c),
        }
    }
    out
}

struct NodeXml<'a> {
    class: &'a str,
    package: &'a str,
    resource_id: String,
    text: &'a str,
    content_desc: &'a str,
    bounds: Rect,
    clickable: bool,
    scrollable: bool,
    editable: bool,
    focused: bool,
}

impl NodeXml<'_> {
    fn open(&self, out: &mut String, depth: usize, self_closing: bool) {
        let pad = "  ".repeat(depth);
        let _ = writeln!(
            out,
            "{pad}<node text=\"{}\" resource-id=\"{}\" class=\"{}\" package=\"{}\" content-desc=\"{}\" \
             clickable=\"{}\" scrollable=\"{}\" editable=\"{}\" focused=\"{}\" bounds=\"{}\"{}>",
            xml_escape(self.text),
            xml_escape(&self.resource_id),
            xml_escape(self.class),
            xml_escape(self.package),
            xml_escape(self.content_desc),
            self.clickable,
            self.scrollable,
            self.editable,
            self.focused,
            self.bounds.to_bounds_string(),
            if self_closing { " /" } else { "" },
        );
    }
}

fn inset(r: Rect, by: i32) -> Rect {
    if r.right - r.left > 2 * by && r.bottom - r.top > 2 * by {
        Rect::new(r.left + by, r.top + by, r.right - by, r.bottom - by)
    } else {
        r
    }
}

impl Device {
    pub fn new(apps: Vec<AppSpec>, seed: u64) -> Result<Device, DeviceError> {
        let mut known = BTreeSet::new();
        for app in &apps {
            if app.app_id == LAUNCHER_ID {
                return Err(DeviceError::SpecValidation {
                    path: format!("apps[{}].app_id", app.app_id),
                    message: "reserved package name".into(),
                });
            }
            if !known.insert(app.app_id.clone()) {
                return Err(DeviceError::SpecValidation {
                    path: format!("apps[{}].app_id", app.app_id),
                    message: "duplicate app_id".into(),
                });
            }
        }
        for app in &apps {
            spec::validate_app(app, &known)?;
        }
        let mut map: BTreeMap<String, AppSpec> = apps.into_iter().map(|a| (a.app_id.clone(), a)).collect();
        let launcher = spec::launcher_for(&map.values().collect::<Vec<_>>());
        map.insert(LAUNCHER_ID.to_string(), launcher);
        let vars = map.iter().map(|(id, a)| (id.clone(), a.vars.clone())).collect();
        Ok(Device {
            apps: Arc::new(map),
            seed,
            distill: DistillConfig::default(),
            state: DeviceState {
                foreground_app: LAUNCHER_ID.to_string(),
                screen: HOME_SCREEN.to_string(),
                back_stack: Vec::new(),
                vars,
                focused: None,
                scroll_offset: 0,
                popup: None,
                step: 0,
            },
            log: Vec::new(),
        })
    }

    /// A fresh device with the same apps and a new seed.
    pub fn fresh(&self, seed: u64) -> Device {
        let mut d = self.clone();
        d.seed = seed;
        d.log.clear();
        d.state = DeviceState {
            foreground_app: LAUNCHER_ID.to_string(),
            screen: HOME_SCREEN.to_string(),
            back_stack: Vec::new(),
            vars: self.apps.iter().map(|(id, a)| (id.clone(), a.vars.clone())).collect(),
            focused: None,
            scroll_offset: 0,
            popup: None,
            step: 0,
        };
        d
    }

    pub fn with_distill_config(mut self, config: DistillConfig) -> Self {
        self.distill = config;
        self
    }

    /// Installed apps, excluding the launcher.
    pub fn apps(&self) -> impl Iterator<Item = &AppSpec> {
        self.apps.values().filter(|a| a.app_id != LAUNCHER_ID)
    }

    pub fn state(&self) -> &DeviceState {
        &self.state
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn var(&self, app: &str, name: &str) -> Option<&str> {
        self.state.vars.get(app)?.get(name).map(String::as_str)
    }

    pub fn screen_label(&self) -> String {
        let s = &self.state;
        match &s.popup {
            Some(p) => format!("{}/{}!{}", s.foreground_app, s.screen, p),
            None => format!("{}/{}", s.foreground_app, s.screen),
        }
    }

    pub fn screen_key(&self) -> String {
        let s = &self.state;
        screen_key_of(&s.foreground_app, &s.screen, s.scroll_offset, s.popup.as_deref())
    }

    fn app(&self) -> &AppSpec {
        &self.apps[&self.state.foreground_app]
    }

    fn screen_spec(&self) -> &ScreenSpec {
        &self.app().screens[&self.state.screen]
    }

    fn popup_spec(&self) -> Option<&PopupSpec> {
        let id = self.state.popup.as_deref()?;
        self.screen_spec().popups.iter().find(|p| p.popup_id == id)
    }

    fn element_bounds(&self, el: &ElementSpec) -> Option<Rect> {
        match (el.row, &self.screen_spec().scroll_window) {
            (Some(row), Some(w)) => {
                let off = self.state.scroll_offset;
                (row >= off && row < off + w.visible_rows).then(|| w.row_bounds(row, off))
            }
            _ => Some(el.bounds),
        }
    }

    fn write_element(&self, out: &mut String, depth: usize, el: &ElementSpec, bounds: Rect, ids: &mut HashMap<String, Target>, i: usize) {
        let app = self.app();
        let vars = &self.state.vars[&app.app_id];
        let rid = format!("{}:id/{}", app.app_id, el.key);
        ids.insert(rid.clone(), Target::Element(i));
        let shown = interpolate(&el.text, vars);
        if el.editable {
            let value = vars.get(el.var_name()).filter(|v| !v.is_empty()).cloned().unwrap_or(shown);
            NodeXml {
                class: el.class_name(),
                package: &app.app_id,
                resource_id: rid,
                text: &value,
                content_desc: &el.content_desc,
                bounds,
                clickable: true,
                scrollable: el.scrollable,
                editable: true,
                focused: self.state.focused.as_deref() == Some(el.key.as_str()),
            }
            .open(out, depth, true);
            return;
        }
        let host = NodeXml {
            class: el.class_name(),
            package: &app.app_id,
            resource_id: rid,
            text: if el.clickable { "" } else { &shown },
            content_desc: &el.content_desc,
            bounds,
            clickable: el.clickable,
            scrollable: el.scrollable,
            editable: false,
            focused: false,
        };
        if el.clickable && !shown.is_empty() {
            host.open(out, depth, false);
            NodeXml {
                class: "android.widget.TextView",
                package: &app.app_id,
                resource_id: String::new(),
                text: &shown,
                content_desc: "",
                bounds: inset(bounds, 8),
                clickable: false,
                scrollable: false,
                editable: false,
                focused: false,
            }
            .open(out, depth + 1, true);
            let _ = writeln!(out, "{}</node>", "  ".repeat(depth));
        } else {
            host.open(out, depth, true);
        }
    }

    fn render(&self) -> (String, HashMap<String, Target>) {
        let app = self.app();
        let screen = self.screen_spec();
        let mut ids = HashMap::new();
        let mut out = String::from("<?xml version='1.0' encoding='UTF-8' standalone='yes' ?>\n<hierarchy rotation=\"0\">\n");
        let full = Rect::new(0, 0, SCREEN_WIDTH as i32, SCREEN_HEIGHT as i32);
        let frame = |rid: String, bounds: Rect, class: &'static str| NodeXml {
            class,
            package: &app.app_id,
            resource_id: rid,
            text: "",
            content_desc: "",
            bounds,
            clickable: false,
            scrollable: false,
            editable: false,
            focused: false,
        };
        frame(String::new(), full, "android.widget.FrameLayout").open(&mut out, 1, false);
        if let Some(popup) = self.popup_spec() {
            let dialog = Rect::new(90, 900, 990, 1500);
            frame(String::new(), dialog, "android.widget.LinearLayout").open(&mut out, 2, false);
            let mut msg = frame(String::new(), Rect::new(130, 940, 950, 1300), "android.widget.TextView");
            msg.text = &popup.text;
            msg.open(&mut out, 3, true);
            let rid = format!("{}:id/{}", app.app_id, POPUP_DISMISS_KEY);
            ids.insert(rid.clone(), Target::PopupDismiss);
            let button = Rect::new(600, 1350, 940, 1460);
            let mut b = frame(rid, button, "android.widget.Button");
            b.clickable = true;
            b.open(&mut out, 3, false);
            let mut label = frame(String::new(), inset(button, 8), "android.widget.TextView");
            label.text = &popup.dismiss_text;
            label.open(&mut out, 4, true);
            out.push_str("      </node>\n    </node>\n");
        } else {
            for (i, el) in screen.elements.iter().enumerate().filter(|(_, e)| e.row.is_none()) {
                self.write_element(&mut out, 2, el, el.bounds, &mut ids, i);
            }
            if let Some(w) = &screen.scroll_window {
                let rid = format!("{}:id/{}", app.app_id, w.key);
                ids.insert(rid.clone(), Target::Window);
                let mut list = frame(rid, w.bounds, "androidx.recyclerview.widget.RecyclerView");
                list.scrollable = true;
                list.open(&mut out, 2, false);
                for (i, el) in screen.elements.iter().enumerate().filter(|(_, e)| e.row.is_some()) {
                    if let Some(b) = self.element_bounds(el) {
                        self.write_element(&mut out, 3, el, b, &mut ids, i);
                    }
                }
                out.push_str("    </node>\n");
            }
        }
        out.push_str("  </node>\n</hierarchy>\n");
        (out, ids)
    }

    /// Renders, distills and indexes the current screen.
    pub fn view(&self) -> Result<View, DeviceError> {
        let (xml, ids) = self.render();
        let root = parse_vh(xml.as_bytes())?;
        let trace = distill_traced(&root, (SCREEN_WIDTH, SCREEN_HEIGHT), &self.distill);
        let flat = root.flatten();
        let mut targets = Vec::new();
        let mut elements = Vec::with_capacity(trace.elements.len());
        for d in trace.elements {
            if d.element.index >= 0 {
                let node = flat[d.source];
                // Every interactive node the device emits carries a resource id.
                let target = ids.get(&node.resource_id).copied().unwrap_or(Target::Window);
                targets.push(target);
            }
            elements.push(d.element);
        }
        let focused_input = flat.iter().any(|n| n.focused && n.editable);
        Ok(View {
            xml,
            observation: ScreenObservation {
                screen: self.screen_label(),
                screen_key: self.screen_key(),
                elements,
                focused_input,
            },
            targets,
        })
    }

    pub fn observe(&self) -> Result<ScreenObservation, DeviceError> {
        Ok(self.view()?.observation)
    }

    pub fn dump_xml(&self) -> String {
        self.render().0
    }

    fn set_var(&mut self, app: &str, name: &str, value: String, events: &mut Vec<DeviceEvent>) {
        events.push(DeviceEvent::new("var_set").with("app", app).with("var", name).with("value", value.clone()));
        self.state.vars.entry(app.to_string()).or_default().insert(name.to_string(), value);
    }

    fn enter(&mut self, app: &str, screen: &str, push: bool) {
        if push {
            let cur = (self.state.foreground_app.clone(), self.state.screen.clone());
            self.state.back_stack.push(cur);
        }
        self.state.foreground_app = app.to_string();
        self.state.screen = screen.to_string();
        self.state.focused = None;
        self.state.scroll_offset = 0;
        self.state.popup = None;
    }

    fn open_app(&mut self, app_id: &str, events: &mut Vec<DeviceEvent>) -> Result<(), DeviceError> {
        let initial = self
            .apps
            .get(app_id)
            .filter(|a| a.app_id != LAUNCHER_ID)
            .map(|a| a.initial_screen.clone())
            .ok_or_else(|| DeviceError::UnknownApp(app_id.to_string()))?;
        self.enter(app_id, &initial, true);
        events.push(DeviceEvent::new("app_opened").with("app", app_id));
        Ok(())
    }

    fn close_app(&mut self, app_id: Option<&str>, events: &mut Vec<DeviceEvent>) -> Result<(), DeviceError> {
        let target = app_id.unwrap_or(&self.state.foreground_app).to_string();
        if !self.apps.contains_key(&target) {
            return Err(DeviceError::UnknownApp(target));
        }
        if target == LAUNCHER_ID {
            events.push(DeviceEvent::new("close_ignored"));
            return Ok(());
        }
        self.state.back_stack.retain(|(a, _)| *a != target);
        if self.state.foreground_app == target {
            self.enter(LAUNCHER_ID, HOME_SCREEN, false);
            self.state.back_stack.clear();
        }
        events.push(DeviceEvent::new("app_closed").with("app", target));
        Ok(())
    }

    fn apply_effects(&mut self, effects: &[Effect], events: &mut Vec<DeviceEvent>) -> Result<(), DeviceError> {
        let app = self.state.foreground_app.clone();
        for effect in effects {
            match effect {
                Effect::GotoScreen(s) => {
                    self.enter(&app, s, true);
                    events.push(DeviceEvent::new("screen").with("app", &*app).with("screen", s.as_str()));
                }
                Effect::SetVar { name, value } => {
                    let v = interpolate(value, &self.state.vars[&app]);
                    self.set_var(&app, name, v, events);
                }
                Effect::PushEvent { name, payload } => {
                    let mut e = DeviceEvent::new(name).with("app", &*app);
                    if let Some(map) = payload.as_object() {
                        for (k, v) in map {
                            let raw = v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string());
                            e = e.with(k, interpolate(&raw, &self.state.vars[&app]));
                        }
                    }
                    events.push(e);
                }
                Effect::OpenApp(a) => self.open_app(a, events)?,
                Effect::CloseApp(a) => self.close_app(a.as_deref(), events)?,
            }
        }
        Ok(())
    }

    fn fire(&mut self, element: usize, trigger: Trigger, events: &mut Vec<DeviceEvent>) -> Result<Fired, DeviceError> {
        let el = &self.screen_spec().elements[element];
        let key = el.key.clone();
        let vars = &self.state.vars[&self.state.foreground_app];
        let mut any = false;
        let mut chosen = None;
        for rule in el.transitions.iter().filter(|r| r.on == trigger) {
            any = true;
            if rule.guard.as_ref().is_none_or(|g| g.holds(vars)) {
                chosen = Some(rule.effects.clone());
                break;
            }
        }
        match chosen {
            Some(effects) => {
                self.apply_effects(&effects, events)?;
                Ok(Fired::Ran)
            }
            None if any => {
                events.push(DeviceEvent::new("guard_blocked").with("element", key));
                Ok(Fired::Blocked)
            }
            None => Ok(Fired::NoRule),
        }
    }

    fn target(&self, view: &View, index: i64) -> Target {
        // Range was checked by validate_action.
        view.targets[index as usize]
    }

    fn tap(&mut self, target: Target, trigger: Trigger, events: &mut Vec<DeviceEvent>) -> Result<(), DeviceError> {
        match target {
            Target::PopupDismiss => {
                let id = self.state.popup.take().unwrap_or_default();
                events.push(DeviceEvent::new("popup_dismissed").with("popup", id));
            }
            Target::Window => events.push(DeviceEvent::new("ineffective_tap")),
            Target::Element(i) => {
                let el = &self.screen_spec().elements[i];
                let editable = el.editable;
                let key = el.key.clone();
                if editable && trigger == Trigger::Click {
                    self.state.focused = Some(key.clone());
                    events.push(DeviceEvent::new("focus").with("element", key));
                }
                if let Fired::NoRule = self.fire(i, trigger, events)? {
                    if !(editable && trigger == Trigger::Click) {
                        events.push(DeviceEvent::new("ineffective_tap"));
                    }
                }
            }
        }
        Ok(())
    }

    fn scroll_window(&mut self, direction: Direction, rows: u32, events: &mut Vec<DeviceEvent>) {
        let Some(w) = self.screen_spec().scroll_window.clone() else {
            events.push(DeviceEvent::new("ineffective_scroll"));
            return;
        };
        let before = self.state.scroll_offset;
        let after = match direction {
            Direction::Down => before.saturating_add(rows).min(w.max_offset()),
            Direction::Up => before.saturating_sub(rows),
            Direction::Left | Direction::Right => before,
        };
        self.state.scroll_offset = after;
        if after == before {
            events.push(DeviceEvent::new("ineffective_scroll"));
        } else {
            events.push(DeviceEvent::new("scrolled").with("offset", after.to_string()));
        }
    }

    fn step_inner(
        &mut self,
        action: &Action,
        resolver: &dyn AppResolver,
        events: &mut Vec<DeviceEvent>,
    ) -> Result<(), DeviceError> {
        let view = self.view()?;
        validate_action(action, &view.observation)?;
        match action {
            Action::Click { index } => self.tap(self.target(&view, *index), Trigger::Click, events)?,
            Action::DoubleClick { index } => self.tap(self.target(&view, *index), Trigger::DoubleClick, events)?,
            Action::LongPress { index } => self.tap(self.target(&view, *index), Trigger::LongPress, events)?,
            Action::ClickByCoordinate { x, y } => {
                let px = (x * f64::from(SCREEN_WIDTH)).round() as i32;
                let py = (y * f64::from(SCREEN_HEIGHT)).round() as i32;
                // Smallest interactive element under the point wins.
                let hit = view
                    .observation
                    .elements
                    .iter()
                    .filter(|e| e.index >= 0)
                    .filter(|e| e.bounds.left <= px && px < e.bounds.right && e.bounds.top <= py && py < e.bounds.bottom)
                    .min_by_key(|e| (e.bounds.area(), e.index));
                match hit {
                    Some(e) => self.tap(self.target(&view, e.index), Trigger::Click, events)?,
                    None => events.push(DeviceEvent::new("ineffective_tap")),
                }
            }
            Action::Scroll { index, direction, distance } => match self.target(&view, *index) {
                Target::Window => {
                    let visible = self.screen_spec().scroll_window.as_ref().map_or(0, |w| w.visible_rows);
                    self.scroll_window(*direction, distance.rows(visible), events);
                }
                Target::Element(i) if self.screen_spec().elements[i].scrollable => {
                    events.push(DeviceEvent::new("ineffective_scroll"))
                }
                _ => return Err(DeviceError::NotScrollable { index: *index }),
            },
            Action::Swipe { direction, distance } => {
                let visible = self.screen_spec().scroll_window.as_ref().map_or(0, |w| w.visible_rows);
                if self.state.popup.is_some() {
                    events.push(DeviceEvent::new("ineffective_scroll"));
                } else {
                    self.scroll_window(*direction, distance.rows(visible), events);
                }
            }
            Action::Type { text } => {
                let focused = self.state.focused.clone();
                let found = focused.as_deref().and_then(|k| {
                    self.screen_spec().elements.iter().position(|e| e.key == k && e.editable)
                });
                let Some(i) = found else {
                    return Err(ValidationError::NoFocusedInput.into());
                };
                let app = self.state.foreground_app.clone();
                let var = self.screen_spec().elements[i].var_name().to_string();
                let mut value = self.var(&app, &var).unwrap_or("").to_string();
                value.push_str(text);
                self.set_var(&app, &var, value, events);
                self.fire(i, Trigger::TypeCommit, events)?;
            }
            Action::BoxInput { index, text } => match self.target(&view, *index) {
                Target::Element(i) if self.screen_spec().elements[i].editable => {
                    let el = &self.screen_spec().elements[i];
                    let (key, var) = (el.key.clone(), el.var_name().to_string());
                    let app = self.state.foreground_app.clone();
                    self.state.focused = Some(key.clone());
                    events.push(DeviceEvent::new("focus").with("element", key));
                    self.set_var(&app, &var, text.clone(), events);
                    self.fire(i, Trigger::BoxInput, events)?;
                }
                _ => return Err(DeviceError::NotEditable { index: *index }),
            },
            Action::Back => {
                if let Some(p) = self.state.popup.take() {
                    events.push(DeviceEvent::new("popup_dismissed").with("popup", p));
                } else if let Some((app, screen)) = self.state.back_stack.pop() {
                    self.enter(&app, &screen, false);
                    events.push(DeviceEvent::new("back").with("app", app).with("screen", screen));
                } else if self.state.foreground_app != LAUNCHER_ID {
                    self.enter(LAUNCHER_ID, HOME_SCREEN, false);
                    events.push(DeviceEvent::new("back").with("app", LAUNCHER_ID).with("screen", HOME_SCREEN));
                } else {
                    events.push(DeviceEvent::new("back_at_root"));
                }
            }
            Action::OpenApp { description } => {
                let desc = description.clone().unwrap_or_default();
                let app = resolver.resolve_app(&desc).ok_or_else(|| DeviceError::UnknownApp(desc.clone()))?;
                self.open_app(&app, events)?;
            }
            Action::CloseApp { package } => self.close_app(package.as_deref(), events)?,
            Action::Failed => events.push(DeviceEvent::new("failed")),
            Action::Finish => events.push(DeviceEvent::new("finish")),
        }
        Ok(())
    }

    fn maybe_popup(&mut self, events: &mut Vec<DeviceEvent>) {
        let popups = self.screen_spec().popups.clone();
        if popups.is_empty() {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.state.step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for p in popups {
            if rng.random::<f64>() < p.probability {
                events.push(DeviceEvent::new("popup_shown").with("popup", p.popup_id.as_str()));
                self.state.popup = Some(p.popup_id);
                return;
            }
        }
    }

    /// Applies one action and appends a log entry, also when it fails.
    pub fn apply(&mut self, action: &Action, resolver: &dyn AppResolver) -> Result<ActionOutcome, DeviceError> {
        self.state.step += 1;
        let before = self.screen_label();
        let before_key = self.screen_key();
        let place = (self.state.foreground_app.clone(), self.state.screen.clone());
        let mut events = Vec::new();
        let result = self.step_inner(action, resolver, &mut events);
        let moved = place != (self.state.foreground_app.clone(), self.state.screen.clone());
        let went_back = events.iter().any(|e| e.kind == "back");
        if result.is_ok() && moved && !went_back {
            self.maybe_popup(&mut events);
        }
        self.log.push(LogEntry {
            step: self.state.step,
            action: action.to_string(),
            events: events.clone(),
            screen_before: before,
            screen_after: self.screen_label(),
            screen_key_after: self.screen_key(),
            error: result.as_ref().err().map(|e| e.to_string()),
        });
        let screen_changed = self.screen_key() != before_key;
        result.map(|()| ActionOutcome { events, screen_changed })
    }

    /// Applies a setup directive without logging it.
    pub fn prepare(&mut self, directive: &Directive) -> Result<(), DeviceError> {
        match directive {
            Directive::SetVar { app, name, value } => {
                if !self.apps.contains_key(app) {
                    return Err(DeviceError::UnknownApp(app.clone()));
                }
                self.state.vars.entry(app.clone()).or_default().insert(name.clone(), value.clone());
            }
            Directive::OpenApp { app } => {
                let mut sink = Vec::new();
                self.open_app(app, &mut sink)?;
            }
            Directive::Goto { app, screen } => {
                let spec = self.apps.get(app).ok_or_else(|| DeviceError::UnknownApp(app.clone()))?;
                if !spec.screens.contains_key(screen) {
                    return Err(DeviceError::UnknownScreen { app: app.clone(), screen: screen.clone() });
                }
                self.state.back_stack = vec![(LAUNCHER_ID.to_string(), HOME_SCREEN.to_string())];
                self.enter(app, screen, false);
            }
        }
        Ok(())
    }
}

impl AppResolver for Device {
    fn resolve_app(&self, description: &str) -> Option<String> {
        ExactResolver::resolve_in(self, description)
    }
}
