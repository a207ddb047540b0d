//! The function-call action space shared by the agent, the decision backend
//! and the simulated device.
//!
//! Actions travel as call expressions such as `Box_Input(3, "G104")`. The
//! canonical text form produced by [`format_action`] quotes every string
//! argument and never quotes integers, so it is stable enough to appear in
//! golden event logs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::vh::ScreenObservation;

/// Element index as it appears in an action call.
///
/// The parser admits `-1` so that a backend pointing at a plain-text element
/// gets a precise validation error instead of a type error.
pub type ElementIndex = i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }
}

impl FromStr for Direction {
    type Err = ActionParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "up" => Ok(Direction::Up),
            "down" => Ok(Direction::Down),
            "left" => Ok(Direction::Left),
            "right" => Ok(Direction::Right),
            other => Err(ActionParseError::Type(format!("unknown direction {other:?}"))),
        }
    }
}

/// How far a scroll or swipe travels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Distance {
    Short,
    Medium,
    Long,
    /// A positive number of list rows.
    Rows(u32),
}

impl Distance {
    /// Fraction of the scrollable extent covered by a named magnitude.
    pub fn fraction(self) -> Option<f64> {
        match self {
            Distance::Short => Some(0.25),
            Distance::Medium => Some(0.5),
            Distance::Long => Some(0.8),
            Distance::Rows(_) => None,
        }
    }

    /// Number of rows moved in a window showing `visible_rows` rows.
    pub fn rows(self, visible_rows: u32) -> u32 {
        match self {
            Distance::Rows(n) => n,
            named => {
                let frac = named.fraction().unwrap_or_default();
                (frac * f64::from(visible_rows)).round() as u32
            }
        }
    }
}

impl FromStr for Distance {
    type Err = ActionParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "short" => Ok(Distance::Short),
            "medium" => Ok(Distance::Medium),
            "long" => Ok(Distance::Long),
            other => match other.parse::<u32>() {
                Ok(n) if n > 0 => Ok(Distance::Rows(n)),
                _ => Err(ActionParseError::Type(format!("invalid distance {other:?}"))),
            },
        }
    }
}

/// Category column of the action table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Single,
    Combination,
    System,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Click { index: ElementIndex },
    /// Screen-fraction coordinates, both in `[0, 1]` when valid.
    ClickByCoordinate { x: f64, y: f64 },
    DoubleClick { index: ElementIndex },
    LongPress { index: ElementIndex },
    Scroll { index: ElementIndex, direction: Direction, distance: Distance },
    Swipe { direction: Direction, distance: Distance },
    Type { text: String },
    Back,
    BoxInput { index: ElementIndex, text: String },
    OpenApp { description: Option<String> },
    CloseApp { package: Option<String> },
    Failed,
    Finish,
}

/// Call names accepted by the parser, in table order.
pub const ACTION_NAMES: [&str; 13] = [
    "Click",
    "Click_by_Coordinate",
    "Double_Click",
    "Long_Press",
    "Scroll",
    "Swipe",
    "Type",
    "Back",
    "Box_Input",
    "Open_App",
    "Close_App",
    "Failed",
    "Finish",
];

/// Signatures handed to the decision backend as the action catalog.
pub const ACTION_SIGNATURES: [&str; 13] = [
    "Click(element_index: int)",
    "Click_by_Coordinate(x: float, y: float)",
    "Double_Click(element_index: int)",
    "Long_Press(element_index: int)",
    "Scroll(element_index: int, direction: str, distance: str or int)",
    "Swipe(direction: str, distance: str or int)",
    "Type(text: str)",
    "Back()",
    "Box_Input(element_index: int, text: str)",
    "Open_App(description: Optional[str])",
    "Close_App(package_name: Optional[str])",
    "Failed()",
    "Finish()",
];

pub fn action_catalog() -> Vec<String> {
    ACTION_SIGNATURES.iter().map(|s| s.to_string()).collect()
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Click { .. } => "Click",
            Action::ClickByCoordinate { .. } => "Click_by_Coordinate",
            Action::DoubleClick { .. } => "Double_Click",
            Action::LongPress { .. } => "Long_Press",
            Action::Scroll { .. } => "Scroll",
            Action::Swipe { .. } => "Swipe",
            Action::Type { .. } => "Type",
            Action::Back => "Back",
            Action::BoxInput { .. } => "Box_Input",
            Action::OpenApp { .. } => "Open_App",
            Action::CloseApp { .. } => "Close_App",
            Action::Failed => "Failed",
            Action::Finish => "Finish",
        }
    }

    pub fn kind(&self) -> ActionKind {
        match self {
            Action::BoxInput { .. } => ActionKind::Combination,
            Action::OpenApp { .. } | Action::CloseApp { .. } | Action::Failed | Action::Finish => {
                ActionKind::System
            }
            _ => ActionKind::Single,
        }
    }

    /// The element index this action targets, if any.
    pub fn element_index(&self) -> Option<ElementIndex> {
        match *self {
            Action::Click { index }
            | Action::DoubleClick { index }
            | Action::LongPress { index }
            | Action::Scroll { index, .. }
            | Action::BoxInput { index, .. } => Some(index),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActionParseError {
    #[error("unknown action {0:?}")]
    UnknownAction(String),
    #[error("{name} expects {expected} argument(s), got {got}")]
    Arity { name: String, expected: &'static str, got: usize },
    #[error("type error: {0}")]
    Type(String),
    #[error("syntax error: {0}")]
    Syntax(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Arg {
    Int(i64),
    Float(f64),
    Str(String),
}

impl Arg {
    fn describe(&self) -> &'static str {
        match self {
            Arg::Int(_) => "integer",
            Arg::Float(_) => "float",
            Arg::Str(_) => "string",
        }
    }
}

fn split_call(text: &str) -> Result<(&str, &str), ActionParseError> {
    let text = text.trim();
    let open = text
        .find('(')
        .ok_or_else(|| ActionParseError::Syntax(format!("missing '(' in {text:?}")))?;
    if !text.ends_with(')') {
        return Err(ActionParseError::Syntax(format!("missing ')' in {text:?}")));
    }
    let name = text[..open].trim();
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(ActionParseError::Syntax(format!("bad call name {name:?}")));
    }
    Ok((name, &text[open + 1..text.len() - 1]))
}

fn lex_args(body: &str) -> Result<Vec<Arg>, ActionParseError> {
    let mut args = Vec::new();
    let mut chars = body.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        let Some(&first) = chars.peek() else {
            if args.is_empty() {
                return Ok(args);
            }
            return Err(ActionParseError::Syntax("trailing comma".into()));
        };
        if first == '"' {
            chars.next();
            let mut s = String::new();
            let mut closed = false;
            while let Some(c) = chars.next() {
                match c {
                    '"' => {
                        closed = true;
                        break;
                    }
                    '\\' => match chars.next() {
                        Some('"') => s.push('"'),
                        Some('\\') => s.push('\\'),
                        Some('n') => s.push('\n'),
                        other => {
                            return Err(ActionParseError::Type(format!(
                                "bad escape sequence \\{}",
                                other.map(String::from).unwrap_or_default()
                            )))
                        }
                    },
                    c => s.push(c),
                }
            }
            if !closed {
                return Err(ActionParseError::Type("unterminated string literal".into()));
            }
            args.push(Arg::Str(s));
        } else {
            let mut tok = String::new();
            while let Some(&c) = chars.peek() {
                if c == ',' || c.is_whitespace() {
                    break;
                }
                tok.push(c);
                chars.next();
            }
            if let Ok(i) = tok.parse::<i64>() {
                args.push(Arg::Int(i));
            } else if let Some(f) = tok.parse::<f64>().ok().filter(|f| f.is_finite()) {
                args.push(Arg::Float(f));
            } else {
                return Err(ActionParseError::Type(format!("unquoted argument {tok:?}")));
            }
        }
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        match chars.next() {
            None => return Ok(args),
            Some(',') => continue,
            Some(c) => return Err(ActionParseError::Syntax(format!("unexpected {c:?}"))),
        }
    }
}

fn want_index(arg: &Arg) -> Result<ElementIndex, ActionParseError> {
    match arg {
        Arg::Int(i) if *i >= -1 => Ok(*i),
        Arg::Int(i) => Err(ActionParseError::Type(format!("element index {i} is negative"))),
        other => Err(ActionParseError::Type(format!(
            "element index must be an integer, got {}",
            other.describe()
        ))),
    }
}

fn want_str(arg: &Arg) -> Result<String, ActionParseError> {
    match arg {
        Arg::Str(s) => Ok(s.clone()),
        other => Err(ActionParseError::Type(format!("expected string, got {}", other.describe()))),
    }
}

fn want_coord(arg: &Arg) -> Result<f64, ActionParseError> {
    match arg {
        Arg::Int(i) => Ok(*i as f64),
        Arg::Float(f) => Ok(*f),
        Arg::Str(_) => Err(ActionParseError::Type("coordinate must be numeric".into())),
    }
}

fn want_distance(arg: &Arg) -> Result<Distance, ActionParseError> {
    match arg {
        Arg::Int(n) if *n > 0 && *n <= i64::from(u32::MAX) => Ok(Distance::Rows(*n as u32)),
        Arg::Int(n) => Err(ActionParseError::Type(format!("distance must be positive, got {n}"))),
        Arg::Str(s) => s.parse(),
        Arg::Float(_) => Err(ActionParseError::Type("distance must be a name or integer".into())),
    }
}

fn arity(name: &str, expected: &'static str, args: &[Arg], ok: bool) -> Result<(), ActionParseError> {
    if ok {
        Ok(())
    } else {
        Err(ActionParseError::Arity { name: name.to_string(), expected, got: args.len() })
    }
}

/// Parses a single call expression such as `Click(5)` or `Box_Input(3, "G104")`.
pub fn parse_action_call(text: &str) -> Result<Action, ActionParseError> {
    let (name, body) = split_call(text)?;
    if !ACTION_NAMES.contains(&name) {
        return Err(ActionParseError::UnknownAction(name.to_string()));
    }
    let args = lex_args(body)?;
    let n = args.len();
    let action = match name {
        "Click" | "Double_Click" | "Long_Press" => {
            arity(name, "1", &args, n == 1)?;
            let index = want_index(&args[0])?;
            match name {
                "Click" => Action::Click { index },
                "Double_Click" => Action::DoubleClick { index },
                _ => Action::LongPress { index },
            }
        }
        "Click_by_Coordinate" => {
            arity(name, "2", &args, n == 2)?;
            Action::ClickByCoordinate { x: want_coord(&args[0])?, y: want_coord(&args[1])? }
        }
        "Scroll" => {
            arity(name, "3", &args, n == 3)?;
            Action::Scroll {
                index: want_index(&args[0])?,
                direction: want_str(&args[1])?.parse()?,
                distance: want_distance(&args[2])?,
            }
        }
        "Swipe" => {
            arity(name, "2", &args, n == 2)?;
            Action::Swipe { direction: want_str(&args[0])?.parse()?, distance: want_distance(&args[1])? }
        }
        "Type" => {
            arity(name, "1", &args, n == 1)?;
            Action::Type { text: want_str(&args[0])? }
        }
        "Box_Input" => {
            arity(name, "2", &args, n == 2)?;
            Action::BoxInput { index: want_index(&args[0])?, text: want_str(&args[1])? }
        }
        "Open_App" => {
            arity(name, "0 or 1", &args, n <= 1)?;
            Action::OpenApp { description: args.first().map(want_str).transpose()? }
        }
        "Close_App" => {
            arity(name, "0 or 1", &args, n <= 1)?;
            Action::CloseApp { package: args.first().map(want_str).transpose()? }
        }
        "Back" | "Failed" | "Finish" => {
            arity(name, "0", &args, n == 0)?;
            match name {
                "Back" => Action::Back,
                "Failed" => Action::Failed,
                _ => Action::Finish,
            }
        }
        _ => unreachable!("name checked against ACTION_NAMES"),
    };
    Ok(action)
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn format_distance(d: Distance) -> String {
    match d {
        Distance::Short => quote("short"),
        Distance::Medium => quote("medium"),
        Distance::Long => quote("long"),
        Distance::Rows(n) => n.to_string(),
    }
}

/// Canonical call form of an action.
pub fn format_action(action: &Action) -> String {
    let args: Vec<String> = match action {
        Action::Click { index } | Action::DoubleClick { index } | Action::LongPress { index } => {
            vec![index.to_string()]
        }
        Action::ClickByCoordinate { x, y } => vec![format!("{x:?}"), format!("{y:?}")],
        Action::Scroll { index, direction, distance } => {
            vec![index.to_string(), quote(direction.as_str()), format_distance(*distance)]
        }
        Action::Swipe { direction, distance } => {
            vec![quote(direction.as_str()), format_distance(*distance)]
        }
        Action::Type { text } => vec![quote(text)],
        Action::BoxInput { index, text } => vec![index.to_string(), quote(text)],
        Action::OpenApp { description } => description.iter().map(|d| quote(d)).collect(),
        Action::CloseApp { package } => package.iter().map(|p| quote(p)).collect(),
        Action::Back | Action::Failed | Action::Finish => Vec::new(),
    };
    format!("{}({})", action.name(), args.join(", "))
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_action(self))
    }
}

impl FromStr for Action {
    type Err = ActionParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_action_call(s)
    }
}

// Actions serialize as their canonical call string.
impl Serialize for Action {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format_action(self))
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_action_call(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("element index {index} out of range ({available} interactive elements)")]
    IndexOutOfRange { index: ElementIndex, available: usize },
    #[error("element index -1 refers to plain text, not an interactive element")]
    TextTargetNotInteractive,
    #[error("no focused input box on screen")]
    NoFocusedInput,
    #[error("coordinate ({x}, {y}) outside the unit square")]
    CoordinateOutOfBounds { x: f64, y: f64 },
}

/// Checks that an action can be applied to the given screen.
pub fn validate_action(action: &Action, screen: &ScreenObservation) -> Result<(), ValidationError> {
    if let Some(index) = action.element_index() {
        if index == -1 {
            return Err(ValidationError::TextTargetNotInteractive);
        }
        let available = screen.interactive_count();
        if index < 0 || index as usize >= available {
            return Err(ValidationError::IndexOutOfRange { index, available });
        }
        return Ok(());
    }
    match action {
        Action::ClickByCoordinate { x, y } => {
            if (0.0..=1.0).contains(x) && (0.0..=1.0).contains(y) {
                Ok(())
            } else {
                Err(ValidationError::CoordinateOutOfBounds { x: *x, y: *y })
            }
        }
        Action::Type { .. } if !screen.focused_input => Err(ValidationError::NoFocusedInput),
        _ => Ok(()),
    }
}
