//! View-hierarchy parsing and distillation.
//!
//! A UIAutomator dump is parsed into a [`RawNode`] tree and then reduced to
//! an ordered list of [`UiElement`]s in four passes:
//!
//! 1. flatten, drop tiny nodes, order by area (ascending, document order on ties);
//! 2. accept interactive nodes whose IoU with every accepted node stays under the limit;
//! 3. fold text nodes into the first accepted element that mostly contains them;
//! 4. order elements row-major by center and number the interactive ones.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pixel rectangle `(left, top, right, bottom)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Rect {
    pub left: i32,
    pub top: i32,
    pub right: i32,
    pub bottom: i32,
}

impl Rect {
    pub const fn new(left: i32, top: i32, right: i32, bottom: i32) -> Self {
        Rect { left, top, right, bottom }
    }

    pub fn width(&self) -> i64 {
        i64::from(self.right) - i64::from(self.left)
    }

    pub fn height(&self) -> i64 {
        i64::from(self.bottom) - i64::from(self.top)
    }

    pub fn area(&self) -> i64 {
        self.width().max(0) * self.height().max(0)
    }

    pub fn intersection_area(&self, other: &Rect) -> i64 {
        let w = i64::from(self.right.min(other.right)) - i64::from(self.left.max(other.left));
        let h = i64::from(self.bottom.min(other.bottom)) - i64::from(self.top.max(other.top));
        w.max(0) * h.max(0)
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Twice the center, kept integral so row comparisons are exact.
    pub fn center2(&self) -> (i64, i64) {
        (
            i64::from(self.left) + i64::from(self.right),
            i64::from(self.top) + i64::from(self.bottom),
        )
    }

    pub fn center(&self) -> (f64, f64) {
        let (x2, y2) = self.center2();
        (x2 as f64 / 2.0, y2 as f64 / 2.0)
    }

    /// UIAutomator bounds string, `[l,t][r,b]`.
    pub fn to_bounds_string(&self) -> String {
        format!("[{},{}][{},{}]", self.left, self.top, self.right, self.bottom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RawNode {
    pub bounds: Rect,
    pub clickable: bool,
    pub scrollable: bool,
    pub editable: bool,
    pub focused: bool,
    pub text: String,
    pub content_desc: String,
    pub resource_id: String,
    pub class_name: String,
    pub package: String,
    pub children: Vec<RawNode>,
}

impl RawNode {
    pub fn is_interactive(&self) -> bool {
        self.clickable || self.scrollable || self.editable
    }

    /// Visible label: the text, falling back to the content description.
    pub fn label(&self) -> &str {
        if self.text.trim().is_empty() {
            self.content_desc.trim()
        } else {
            self.text.trim()
        }
    }

    /// Pre-order traversal; the position in the returned list is the
    /// node's document order.
    pub fn flatten(&self) -> Vec<&RawNode> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(node) = stack.pop() {
            out.push(node);
            stack.extend(node.children.iter().rev());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VhError {
    #[error("xml syntax error: {0}")]
    XmlSyntax(String),
    #[error("malformed bounds {0:?}")]
    MalformedBounds(String),
    #[error("invalid distill config: {0}")]
    InvalidConfig(String),
}

fn parse_bounds(s: &str) -> Result<Rect, VhError> {
    let bad = || VhError::MalformedBounds(s.to_string());
    let inner = s.trim().strip_prefix('[').and_then(|r| r.strip_suffix(']')).ok_or_else(bad)?;
    let (a, b) = inner.split_once("][").ok_or_else(bad)?;
    let pair = |p: &str| -> Result<(i32, i32), VhError> {
        let (x, y) = p.split_once(',').ok_or_else(bad)?;
        Ok((x.trim().parse().map_err(|_| bad())?, y.trim().parse().map_err(|_| bad())?))
    };
    let (left, top) = pair(a)?;
    let (right, bottom) = pair(b)?;
    if left > right || top > bottom {
        return Err(bad());
    }
    Ok(Rect { left, top, right, bottom })
}

fn convert(node: roxmltree::Node<'_, '_>) -> Result<RawNode, VhError> {
    let flag = |name: &str| node.attribute(name) == Some("true");
    let text = |name: &str| node.attribute(name).unwrap_or_default().to_string();
    let bounds = match node.attribute("bounds") {
        Some(b) => parse_bounds(b)?,
        // The dump's <hierarchy> wrapper carries no bounds of its own.
        None if node.tag_name().name() == "hierarchy" => Rect::default(),
        None => return Err(VhError::MalformedBounds(String::new())),
    };
    let class_name = node
        .attribute("class")
        .map(str::to_string)
        .unwrap_or_else(|| node.tag_name().name().to_string());
    let editable = flag("editable") || class_name.ends_with("EditText");
    let children = node
        .children()
        .filter(|c| c.is_element())
        .map(convert)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RawNode {
        bounds,
        clickable: flag("clickable"),
        scrollable: flag("scrollable"),
        editable,
        focused: flag("focused"),
        text: text("text"),
        content_desc: text("content-desc"),
        resource_id: text("resource-id"),
        class_name,
        package: text("package"),
        children,
    })
}

/// Parses a UIAutomator-style XML dump.
pub fn parse_vh(xml: &[u8]) -> Result<RawNode, VhError> {
    let text = std::str::from_utf8(xml).map_err(|e| VhError::XmlSyntax(e.to_string()))?;
    let doc = roxmltree::Document::parse(text).map_err(|e| VhError::XmlSyntax(e.to_string()))?;
    convert(doc.root_element())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub min_area_fraction: f64,
    pub max_overlap_iou: f64,
    pub text_containment_fraction: f64,
    pub row_tolerance_px: i32,
    /// Treat every leaf as interactive, for dumps that mark nothing clickable.
    pub treat_all_as_interactive: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            min_area_fraction: 0.0005,
            max_overlap_iou: 0.5,
            text_containment_fraction: 0.7,
            row_tolerance_px: 16,
            treat_all_as_interactive: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), VhError> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(VhError::InvalidConfig(format!("{name} = {v} is not in (0, 1)")))
            }
        };
        unit("min_area_fraction", self.min_area_fraction)?;
        unit("max_overlap_iou", self.max_overlap_iou)?;
        unit("text_containment_fraction", self.text_containment_fraction)?;
        if self.row_tolerance_px < 0 {
            return Err(VhError::InvalidConfig("row_tolerance_px must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SourceAttrs {
    pub clickable: bool,
    pub scrollable: bool,
    pub editable: bool,
    pub class_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UiElement {
    /// `-1` for plain text elements.
    pub index: i64,
    pub bounds: Rect,
    pub interactive: bool,
    pub merged_text: String,
    pub source_attrs: SourceAttrs,
}

/// A distilled element together with the document-order position of the raw
/// node it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Distilled {
    pub element: UiElement,
    pub source: usize,
}

/// Why an interactive node did not make it into the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    TooSmall,
    Overlap,
}

/// Full result of a distillation run, including per-node rejections.
#[derive(Debug, Clone, Default)]
pub struct DistillTrace {
    pub elements: Vec<Distilled>,
    /// `(document position, reason)` for every interactive node dropped.
    pub rejected: Vec<(usize, Rejection)>,
    /// `(text node position, host node position)` for every merged text node.
    pub merges: Vec<(usize, usize)>,
}

/// Runs the four passes and reports provenance for every output element.
pub fn distill_traced(root: &RawNode, screen: (u32, u32), config: &DistillConfig) -> DistillTrace {
    let nodes = root.flatten();
    let is_interactive = |n: &RawNode| {
        n.is_interactive() || (config.treat_all_as_interactive && n.children.is_empty())
    };
    let screen_area = f64::from(screen.0) * f64::from(screen.1);
    let min_area = config.min_area_fraction * screen_area;

    let mut trace = DistillTrace::default();

    // Pass 1: area filter, then ascending area with document order on ties.
    let mut kept: Vec<usize> = Vec::with_capacity(nodes.len());
    for (pos, node) in nodes.iter().enumerate() {
        if (node.bounds.area() as f64) < min_area {
            if is_interactive(node) {
                trace.rejected.push((pos, Rejection::TooSmall));
            }
        } else {
            kept.push(pos);
        }
    }
    kept.sort_by_key(|&pos| (nodes[pos].bounds.area(), pos));

    // Pass 2: overlap-limited acceptance of interactive nodes.
    let mut accepted: Vec<usize> = Vec::new();
    for &pos in &kept {
        let node = nodes[pos];
        if !is_interactive(node) {
            continue;
        }
        let clear = accepted
            .iter()
            .all(|&a| nodes[a].bounds.iou(&node.bounds) <= config.max_overlap_iou);
        if clear {
            accepted.push(pos);
        } else {
            trace.rejected.push((pos, Rejection::Overlap));
        }
    }

    // Pass 3: merge text into the first containing host, in acceptance order.
    let mut host_texts: Vec<Vec<(usize, &str)>> = accepted
        .iter()
        .map(|&pos| {
            let label = nodes[pos].label();
            if label.is_empty() {
                Vec::new()
            } else {
                vec![(pos, label)]
            }
        })
        .collect();
    let mut loose_text: Vec<usize> = Vec::new();
    let mut text_nodes: Vec<usize> = kept
        .iter()
        .copied()
        .filter(|pos| !nodes[*pos].label().is_empty() && !accepted.contains(pos))
        .collect();
    text_nodes.sort_unstable();
    for pos in text_nodes {
        let node = nodes[pos];
        let area = node.bounds.area();
        let host = accepted.iter().position(|&a| {
            let inside = nodes[a].bounds.intersection_area(&node.bounds);
            area > 0 && inside as f64 >= config.text_containment_fraction * area as f64
        });
        match host {
            Some(h) => {
                host_texts[h].push((pos, node.label()));
                trace.merges.push((pos, accepted[h]));
            }
            // Nodes that were rejected as overlapping duplicates but carry
            // text still survive as plain text.
            None => loose_text.push(pos),
        }
    }

    let make = |pos: usize, interactive: bool, texts: &mut Vec<(usize, &str)>| {
        texts.sort_by_key(|(p, _)| *p);
        let node = nodes[pos];
        Distilled {
            element: UiElement {
                index: -1,
                bounds: node.bounds,
                interactive,
                merged_text: texts.iter().map(|(_, t)| *t).collect::<Vec<_>>().join(" "),
                source_attrs: SourceAttrs {
                    clickable: node.clickable,
                    scrollable: node.scrollable,
                    editable: node.editable,
                    class_name: node.class_name.clone(),
                },
            },
            source: pos,
        }
    };

    let mut interactive: Vec<Distilled> = accepted
        .iter()
        .zip(host_texts.iter_mut())
        .map(|(&pos, texts)| make(pos, true, texts))
        .collect();
    let mut plain: Vec<Distilled> = loose_text
        .iter()
        .map(|&pos| make(pos, false, &mut vec![(pos, nodes[pos].label())]))
        .collect();

    // Pass 4: row-major order; only interactive elements are numbered.
    row_major(&mut interactive, config.row_tolerance_px);
    row_major(&mut plain, config.row_tolerance_px);
    for (i, d) in interactive.iter_mut().enumerate() {
        d.element.index = i as i64;
    }
    interactive.extend(plain);
    trace.elements = interactive;
    trace
}

/// Sorts by rows (centers within `tolerance` of the row's first element)
/// and left to right within a row; document order breaks ties.
fn row_major(items: &mut Vec<Distilled>, tolerance: i32) {
    let tol2 = 2 * i64::from(tolerance);
    items.sort_by_key(|d| (d.element.bounds.center2().1, d.source));
    let mut rows: Vec<Vec<Distilled>> = Vec::new();
    let mut anchor = i64::MIN;
    for d in items.drain(..) {
        let cy = d.element.bounds.center2().1;
        match rows.last_mut() {
            Some(row) if cy - anchor <= tol2 => row.push(d),
            _ => {
                anchor = cy;
                rows.push(vec![d]);
            }
        }
    }
    for mut row in rows {
        row.sort_by_key(|d| (d.element.bounds.center2().0, d.source));
        items.extend(row);
    }
}

/// Distills a parsed hierarchy into an ordered, indexed element list.
pub fn distill(root: &RawNode, screen: (u32, u32), config: &DistillConfig) -> Vec<UiElement> {
    distill_traced(root, screen, config)
        .elements
        .into_iter()
        .map(|d| d.element)
        .collect()
}

/// One labelled box to draw over a screenshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayInstruction {
    pub bounds: Rect,
    pub label: String,
}

pub fn annotate(elements: &[UiElement]) -> Vec<OverlayInstruction> {
    elements
        .iter()
        .filter(|e| e.index >= 0)
        .map(|e| OverlayInstruction { bounds: e.bounds, label: e.index.to_string() })
        .collect()
}

/// A distilled screen as handed to the agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenObservation {
    /// Human-readable screen label, `package/screen`.
    pub screen: String,
    pub screen_key: String,
    pub elements: Vec<UiElement>,
    pub focused_input: bool,
}

impl ScreenObservation {
    pub fn interactive_count(&self) -> usize {
        self.elements.iter().filter(|e| e.index >= 0).count()
    }

    pub fn element(&self, index: i64) -> Option<&UiElement> {
        self.elements.iter().find(|e| e.index == index && index >= 0)
    }

    /// Compact text form used in decision requests.
    pub fn to_prompt_text(&self) -> String {
        let mut out = format!("screen: {}\n", self.screen);
        if self.focused_input {
            out.push_str("focused input: yes\n");
        }
        for e in &self.elements {
            let mut flags = Vec::new();
            if e.source_attrs.clickable {
                flags.push("clickable");
            }
            if e.source_attrs.scrollable {
                flags.push("scrollable");
            }
            if e.source_attrs.editable {
                flags.push("editable");
            }
            let class = e.source_attrs.class_name.rsplit('.').next().unwrap_or_default();
            out.push_str(&format!(
                "[{}] {} {:?} {} {}\n",
                e.index,
                class,
                e.merged_text,
                flags.join(","),
                e.bounds.to_bounds_string()
            ));
        }
        out
    }
}

/// Builds a [`ScreenObservation`] from a raw dump.
pub fn observe_xml(
    xml: &[u8],
    screen: String,
    screen_key: String,
    size: (u32, u32),
    config: &DistillConfig,
) -> Result<ScreenObservation, VhError> {
    let root = parse_vh(xml)?;
    let focused_input = root.flatten().iter().any(|n| n.focused && n.editable);
    Ok(ScreenObservation {
        screen,
        screen_key,
        elements: distill(&root, size, config),
        focused_input,
    })
}
