//! Test-side oracles shared by the integration suites and the acceptance
//! target. Nothing here calls into the code under test to compute an
//! expected value, except where noted.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use moba_core::action::Action;
use moba_core::bench::{
    run_suite, BackendChoice, Milestone, MilestonePredicate, RunRecord, SuiteOptions, SuiteResult, TaskDef, TaskType,
};
use moba_core::agent::{run_episode, Budgets, EngineConfig, EpisodeStatus};
use moba_core::backend::{
    DecisionBackend, DecisionRequest, RemoteClient, RemoteConfig, Role, ScriptRule, ScriptedOracle,
};
use moba_core::device::Device;
use moba_core::memory::{
    ActionRecord, Corpus, MemoryStore, NodeId, RetrievalWeights, TaskStatus,
};
use moba_core::vh::{distill_traced, parse_vh, DistillConfig, Rect, Rejection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn suite_path() -> PathBuf {
    fixtures().join("suite.json")
}

const WORDS: [&str; 16] = [
    "ticket", "train", "alarm", "weather", "city", "send", "message", "open", "calendar", "event", "plane",
    "hotel", "search", "save", "clock", "trip",
];

fn words(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

// ---- view hierarchies ------------------------------------------------

pub const SCREEN: (u32, u32) = (1080, 2400);

fn random_rect(rng: &mut ChaCha8Rng, within: Rect) -> Rect {
    let w = (within.right - within.left).max(1);
    let h = (within.bottom - within.top).max(1);
    let l = within.left + rng.random_range(0..w);
    let t = within.top + rng.random_range(0..h);
    let r = (l + rng.random_range(1..=w)).min(within.right.max(l + 1));
    let b = (t + rng.random_range(1..=h)).min(within.bottom.max(t + 1));
    Rect::new(l, t, r, b)
}

/// A random UIAutomator-style dump with at most `max_nodes` nodes.
pub fn random_dump(seed: u64, max_nodes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.random_range(1..=max_nodes);
    let mut count = 0;
    let mut out = String::from("<hierarchy rotation=\"0\">");
    let screen = Rect::new(0, 0, SCREEN.0 as i32, SCREEN.1 as i32);
    // Emits nodes depth-first; each parent gets a random number of children.
    fn emit(
        rng: &mut ChaCha8Rng,
        out: &mut String,
        parent: Rect,
        depth: usize,
        count: &mut usize,
        target: usize,
    ) {
        while *count < target && rng.random_bool(if depth == 0 { 0.9 } else { 0.6 }) {
            *count += 1;
            // Some children copy the parent box, which exercises the overlap pass.
            let b = if rng.random_bool(0.15) { parent } else { random_rect(rng, parent) };
            let clickable = rng.random_bool(0.45);
            let scrollable = rng.random_bool(0.08);
            let editable = rng.random_bool(0.08);
            let n = rng.random_range(0..3);
            let text = if n > 0 { words(rng, n) } else { String::new() };
            out.push_str(&format!(
                "<node class=\"android.widget.View\" text=\"{text}\" bounds=\"{}\" clickable=\"{clickable}\" scrollable=\"{scrollable}\" editable=\"{editable}\">",
                b.to_bounds_string()
            ));
            if depth < 5 {
                emit(rng, out, b, depth + 1, count, target);
            }
            out.push_str("</node>");
        }
    }
    emit(&mut rng, &mut out, screen, 0, &mut count, target);
    out.push_str("</hierarchy>");
    out
}

/// Checks every distiller invariant on one dump and describes violations.
pub fn vh_violations(xml: &str) -> Vec<String> {
    let cfg = DistillConfig::default();
    let mut errs = Vec::new();
    let root = match parse_vh(xml.as_bytes()) {
        Ok(r) => r,
        Err(e) => return vec![format!("parse: {e}")],
    };
    let nodes = root.flatten();
    let trace = distill_traced(&root, SCREEN, &cfg);
    let again = distill_traced(&root, SCREEN, &cfg);
    if trace.elements != again.elements || trace.merges != again.merges {
        errs.push("non-deterministic output".into());
    }

    let inter: Vec<_> = trace.elements.iter().filter(|d| d.element.index >= 0).collect();
    // Contiguous indices, interactive first, text at -1.
    for (i, d) in trace.elements.iter().enumerate() {
        let expect = if i < inter.len() { i as i64 } else { -1 };
        if d.element.index != expect {
            errs.push(format!("element {i} has index {} (want {expect})", d.element.index));
        }
    }
    // Overlap bound.
    for (i, a) in inter.iter().enumerate() {
        for b in &inter[i + 1..] {
            let iou = iou(a.element.bounds, b.element.bounds);
            if iou > cfg.max_overlap_iou {
                errs.push(format!("iou {iou} between {} and {}", a.element.index, b.element.index));
            }
        }
    }
    // Row-major order: rebuild rows from sorted centers and compare.
    let tol2 = 2 * i64::from(cfg.row_tolerance_px);
    let c2 = |r: Rect| (i64::from(r.left + r.right), i64::from(r.top + r.bottom));
    let mut by_y: Vec<_> = inter.iter().map(|d| (c2(d.element.bounds), d.source)).collect();
    by_y.sort_by_key(|((_, y), src)| (*y, *src));
    let mut expected = Vec::new();
    let mut row: Vec<((i64, i64), usize)> = Vec::new();
    let mut anchor = None;
    for item in by_y {
        if anchor.is_some_and(|a| item.0 .1 - a > tol2) {
            row.sort_by_key(|((x, _), src)| (*x, *src));
            expected.append(&mut row);
            anchor = None;
        }
        anchor.get_or_insert(item.0 .1);
        row.push(item);
    }
    row.sort_by_key(|((x, _), src)| (*x, *src));
    expected.append(&mut row);
    let got: Vec<usize> = inter.iter().map(|d| d.source).collect();
    let want: Vec<usize> = expected.iter().map(|(_, s)| *s).collect();
    if got != want {
        errs.push(format!("row-major order {got:?}, want {want:?}"));
    }
    // Merge containment, each text consumed once.
    let mut seen = std::collections::HashSet::new();
    for &(text, host) in &trace.merges {
        let t = nodes[text].bounds;
        let inside = intersection(nodes[host].bounds, t) as f64;
        if inside < cfg.text_containment_fraction * area(t) as f64 {
            errs.push(format!("text {text} merged into {host} with too little overlap"));
        }
        if !seen.insert(text) {
            errs.push(format!("text {text} merged twice"));
        }
        if trace.elements.iter().any(|d| d.element.index < 0 && d.source == text) {
            errs.push(format!("merged text {text} also survives alone"));
        }
    }
    // Conservation of interactive nodes.
    let min_area = cfg.min_area_fraction * f64::from(SCREEN.0) * f64::from(SCREEN.1);
    for (pos, n) in nodes.iter().enumerate() {
        if !(n.clickable || n.scrollable || n.editable) {
            continue;
        }
        let kept = inter.iter().any(|d| d.source == pos);
        let why = trace.rejected.iter().find(|(p, _)| *p == pos).map(|(_, r)| *r);
        match (kept, why) {
            (true, None) => {}
            (false, Some(Rejection::TooSmall)) if (area(n.bounds) as f64) < min_area => {}
            (false, Some(Rejection::Overlap))
                if inter.iter().any(|d| {
                    iou(d.element.bounds, n.bounds) > cfg.max_overlap_iou && area(d.element.bounds) <= area(n.bounds)
                }) => {}
            other => errs.push(format!("interactive node {pos} unaccounted for: {other:?}")),
        }
    }
    errs
}

fn area(r: Rect) -> i64 {
    i64::from((r.right - r.left).max(0)) * i64::from((r.bottom - r.top).max(0))
}

fn intersection(a: Rect, b: Rect) -> i64 {
    let w = i64::from(a.right.min(b.right) - a.left.max(b.left)).max(0);
    let h = i64::from(a.bottom.min(b.bottom) - a.top.max(b.top)).max(0);
    w * h
}

fn iou(a: Rect, b: Rect) -> f64 {
    let i = intersection(a, b);
    let u = area(a) + area(b) - i;
    if u <= 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

// ---- memory ----------------------------------------------------------

fn action_record(action: Action, success: bool) -> ActionRecord {
    ActionRecord {
        action,
        observation: String::new(),
        thought: String::new(),
        response: None,
        reflection: None,
        success,
        step_index: 0,
        error: None,
    }
}

/// Random task tree of at most 20 nodes; compares `finalize_route` with a
/// brute-force walk over the tree the test built itself.
pub fn route_mismatch(seed: u64) -> Option<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = MemoryStore::default();
    let root = m.begin_episode("root goal");
    let mut tasks = vec![root];
    // node -> parent, and action -> (order, success), all test-side.
    let mut parent: HashMap<NodeId, NodeId> = HashMap::new();
    let mut actions: BTreeMap<NodeId, (usize, bool)> = BTreeMap::new();
    let total = rng.random_range(1..=19);
    for i in 0..total {
        let p = tasks[rng.random_range(0..tasks.len())];
        if rng.random_bool(0.4) {
            let id = m.insert_task_node(p, &format!("sub {i}")).ok()?;
            parent.insert(id, p);
            tasks.push(id);
        } else {
            let ok = rng.random_bool(0.7);
            let id = m.append_action(p, action_record(Action::Click { index: i as i64 }, ok)).ok()?;
            parent.insert(id, p);
            actions.insert(id, (i, ok));
        }
    }
    m.mark_status(root, TaskStatus::Success).ok()?;
    let got = match m.finalize_route(root) {
        Ok(r) => r,
        Err(e) => return Some(format!("seed {seed}: {e}")),
    };
    let is_under = |mut n: NodeId, anc: NodeId| {
        while let Some(&p) = parent.get(&n) {
            if p == anc {
                return true;
            }
            n = p;
        }
        false
    };
    let has_children = |t: NodeId| parent.values().any(|p| *p == t);
    let mut want: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for &t in tasks.iter().filter(|t| has_children(**t)) {
        // The store numbers steps in append order.
        let mut under: Vec<(usize, NodeId)> = actions
            .iter()
            .filter(|(a, (_, ok))| *ok && is_under(**a, t))
            .map(|(a, (order, _))| (*order, *a))
            .collect();
        under.sort();
        want.insert(t, under.into_iter().map(|(_, a)| a).collect());
    }
    let got: BTreeMap<NodeId, Vec<NodeId>> = got.into_iter().map(|(k, r)| (k, r.actions)).collect();
    (got != want).then(|| format!("seed {seed}: routes {got:?}, want {want:?}"))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Random corpus of at most 50 entries; compares `retrieve_weighted` with
/// brute-force scoring. Keys come from the store's embedder; cosine, tree
/// distance and ranking are recomputed here.
pub fn retrieval_mismatch(seed: u64) -> Option<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = MemoryStore::default();
    let root = m.begin_episode("root goal");
    let mut tasks = vec![root];
    let mut parent: HashMap<NodeId, NodeId> = HashMap::new();
    let entries = rng.random_range(1..=50);
    let mut i = 0;
    while m.entries().len() < entries && i < 400 {
        i += 1;
        let p = tasks[rng.random_range(0..tasks.len())];
        let text = words(&mut rng, 3);
        match rng.random_range(0..5) {
            0 => {
                let id = m.insert_task_node(p, &text).ok()?;
                parent.insert(id, p);
                tasks.push(id);
            }
            1 | 2 => {
                let ok = rng.random_bool(0.5);
                let id = m.append_action(p, action_record(Action::Back, ok)).ok()?;
                parent.insert(id, p);
                if !ok {
                    m.append_reflection(id, &words(&mut rng, 2)).ok()?;
                }
            }
            3 => m.append_page_note(&format!("screen{}", rng.random_range(0..5)), &text).ok()?,
            _ => m.append_user_memory(&text, i).ok()?,
        }
    }
    let mut all: Vec<NodeId> = vec![root];
    all.extend(parent.keys().copied());
    let at = all[rng.random_range(0..all.len())];
    let query = words(&mut rng, 2);
    let weights = RetrievalWeights { relation: rng.random_range(0.0..2.0), content: rng.random_range(0.01..2.0) };
    let k = rng.random_range(1..=10);
    let corpora = [Corpus::SuccessHistory, Corpus::FailureHistory, Corpus::Page, Corpus::User];

    let ancestors = |mut n: NodeId| {
        let mut out = vec![n];
        while let Some(&p) = parent.get(&n) {
            out.push(p);
            n = p;
        }
        out
    };
    let distance = |a: NodeId, b: NodeId| -> Option<usize> {
        let ua = ancestors(a);
        let ub = ancestors(b);
        ua.iter().enumerate().find_map(|(i, x)| ub.iter().position(|y| y == x).map(|j| i + j))
    };
    let q = m.embed(&query).ok()?;
    let qn = dot(q.as_slice(), q.as_slice()).sqrt();
    let mut want: Vec<(f64, u64)> = m
        .entries()
        .iter()
        .filter(|e| corpora.contains(&e.corpus))
        .map(|e| {
            let en = dot(e.key.as_slice(), e.key.as_slice()).sqrt();
            let cos = if qn == 0.0 || en == 0.0 { 0.0 } else { dot(q.as_slice(), e.key.as_slice()) / (qn * en) };
            let rel = e.origin.and_then(|o| distance(at, o)).map_or(0.0, |d| 1.0 / (1.0 + d as f64));
            (weights.content * cos + weights.relation * rel, e.seq)
        })
        .collect();
    want.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    want.truncate(k);

    let got = match m.retrieve_weighted(&query, at, &corpora, weights, k) {
        Ok(g) => g,
        Err(e) => return Some(format!("seed {seed}: {e}")),
    };
    if got.len() != want.len() {
        return Some(format!("seed {seed}: {} results, want {}", got.len(), want.len()));
    }
    for (i, (g, w)) in got.iter().zip(&want).enumerate() {
        if (g.score - w.0).abs() > 1e-9 {
            return Some(format!("seed {seed}: rank {i} score {} want {}", g.score, w.0));
        }
        // Identity only matters where the score is not a near-tie.
        let tied = want.iter().filter(|o| (o.0 - w.0).abs() <= 1e-9).count() > 1;
        if !tied && g.entry.seq != w.1 {
            return Some(format!("seed {seed}: rank {i} entry {} want {}", g.entry.seq, w.1));
        }
    }
    None
}

// ---- engine ----------------------------------------------------------

/// One goal of a generated decision script.
#[derive(Debug, Clone)]
pub struct GoalSpec {
    pub goal: String,
    pub can_do: bool,
    pub complete: bool,
    pub children: Vec<usize>,
}

pub const MAX_DEPTH: u32 = 4;

/// A random goal tree: every goal answers plan reflection and execution
/// reflection at random, decomposes into at most 3 children, and goals at
/// the depth limit always succeed directly.
pub fn random_goal_tree(seed: u64) -> Vec<GoalSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut goals: Vec<GoalSpec> = Vec::new();
    let mut queue = vec![(0usize, 0u32)];
    goals.push(GoalSpec { goal: "g0".into(), can_do: false, complete: false, children: vec![] });
    while let Some((i, depth)) = queue.pop() {
        let leaf = depth == MAX_DEPTH || goals.len() > 40;
        let can_do = leaf || rng.random_bool(0.5);
        let complete = leaf || (can_do && rng.random_bool(0.5));
        goals[i].can_do = can_do;
        goals[i].complete = complete;
        if !complete {
            for _ in 0..rng.random_range(1..=3) {
                let id = goals.len();
                goals.push(GoalSpec { goal: format!("g{id}"), can_do: true, complete: true, children: vec![] });
                goals[i].children.push(id);
                queue.push((id, depth + 1));
            }
        }
    }
    goals
}

/// Plain stack machine over the generated tree: pop, act when feasible,
/// push children in reverse when infeasible or incomplete.
pub fn reference_popped(goals: &[GoalSpec]) -> (Vec<String>, usize, usize) {
    let mut stack = vec![0];
    let (mut popped, mut actions, mut plans) = (Vec::new(), 0, 0);
    while let Some(i) = stack.pop() {
        let g = &goals[i];
        popped.push(g.goal.clone());
        if g.can_do {
            actions += 1;
        }
        if !(g.can_do && g.complete) {
            plans += 1;
            stack.extend(g.children.iter().rev());
        }
    }
    (popped, actions, plans)
}

pub fn goal_tree_script(goals: &[GoalSpec]) -> Vec<ScriptRule> {
    let rule = |v: serde_json::Value| serde_json::from_value::<ScriptRule>(v).expect("rule");
    let mut rules = Vec::new();
    for g in goals {
        rules.push(rule(json!({"role": "PlanReflect", "goal_glob": g.goal, "response": {"can_do": g.can_do}})));
        rules.push(rule(json!({"role": "Act", "goal_glob": g.goal, "response": {"can_complete": true, "action": "Back()"}})));
        rules.push(rule(json!({"role": "ExecReflect", "goal_glob": g.goal,
            "response": {"subgoal_status": g.complete, "goal_status": false}})));
        if !g.children.is_empty() {
            let subgoals: Vec<&str> = g.children.iter().map(|c| goals[*c].goal.as_str()).collect();
            rules.push(rule(json!({"role": "Plan", "goal_glob": g.goal, "response": {"subgoals": subgoals}})));
        }
    }
    rules
}

/// Runs the engine on one generated script and compares it with the
/// reference machine.
pub fn engine_disagreement(seed: u64) -> Option<String> {
    let goals = random_goal_tree(seed);
    let (want, actions, plans) = reference_popped(&goals);
    let mut oracle = ScriptedOracle::from_rules(goal_tree_script(&goals)).expect("script");
    let mut device = Device::new(Vec::new(), seed).expect("launcher-only device");
    let mut memory = MemoryStore::default();
    let config = EngineConfig {
        budgets: Budgets { max_steps: 1000, max_depth: MAX_DEPTH + 1, max_plan_calls: 1000 },
        ..EngineConfig::default()
    };
    let report = match run_episode("g0", &mut device, &mut oracle, &mut memory, &config) {
        Ok(r) => r,
        Err(e) => return Some(format!("seed {seed}: {e}")),
    };
    let got: Vec<String> = report.popped.iter().map(|p| p.goal.clone()).collect();
    if got != want {
        return Some(format!("seed {seed}: popped {got:?}, want {want:?}"));
    }
    if report.steps_executed != actions as u64 || report.plan_calls as usize != plans {
        return Some(format!(
            "seed {seed}: {} steps / {} plans, want {actions} / {plans}",
            report.steps_executed, report.plan_calls
        ));
    }
    (report.status != EpisodeStatus::Complete).then(|| format!("seed {seed}: status {:?}", report.status))
}

// ---- HTTP stub -------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Reply {
    Status(u16, String),
    /// Wait this long before answering 200 with the given content.
    Hang(Duration, String),
}

/// Minimal HTTP/1.1 server answering from a queue; the last reply repeats.
pub struct StubServer {
    pub addr: SocketAddr,
    pub requests: Arc<Mutex<Vec<serde_json::Value>>>,
}

pub fn chat_reply(content: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

impl StubServer {
    pub fn start(replies: Vec<Reply>) -> StubServer {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
        let addr = listener.local_addr().unwrap();
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        let queue = Arc::new(Mutex::new(replies));
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let log = Arc::clone(&log);
                let queue = Arc::clone(&queue);
                thread::spawn(move || serve(stream, &log, &queue));
            }
        });
        StubServer { addr, requests }
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

fn serve(stream: TcpStream, log: &Mutex<Vec<serde_json::Value>>, queue: &Mutex<Vec<Reply>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; len];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    log.lock().unwrap().push(serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null));
    let reply = {
        let mut q = queue.lock().unwrap();
        if q.len() > 1 {
            q.remove(0)
        } else {
            q[0].clone()
        }
    };
    let (code, text) = match reply {
        Reply::Status(code, text) => (code, text),
        Reply::Hang(wait, text) => {
            thread::sleep(wait);
            (200, text)
        }
    };
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {code} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
}

/// Client settings for the stub: short timeout, near-zero backoff.
pub fn stub_config(stub: &StubServer, timeout: Duration, attempts: u32) -> RemoteConfig {
    RemoteConfig {
        base_url: stub.base_url(),
        timeout,
        max_attempts: attempts,
        backoff_base: Duration::from_millis(5),
        ..RemoteConfig::default()
    }
}

pub fn request(role: Role) -> DecisionRequest {
    let mut r = DecisionRequest::new(role, "book train G104", "railway/timetable", "[0] train_box\n[1] Search");
    if role == Role::ExecReflect {
        r.post_observation = Some("[0] Book".into());
    }
    r
}

/// One valid reply object per role.
pub fn role_samples() -> Vec<(Role, serde_json::Value)> {
    vec![
        (Role::Plan, json!({"subgoals": ["open railway", "search G104"]})),
        (Role::PlanReflect, json!({"can_do": false, "reflection": "needs the timetable first"})),
        (
            Role::Act,
            json!({"can_complete": true, "action": "Box_Input(0, \"G104\")", "observation": "a search box",
                   "thought": "enter the train", "extracted_info": {"train": "G104"}}),
        ),
        (Role::ExecReflect, json!({"subgoal_status": true, "goal_status": false, "reflection": "searched"})),
    ]
}

/// Sends one request per role through the stub and checks every reply
/// decodes to the same value the schema parser yields locally.
pub fn remote_round_trip() -> Result<(), String> {
    let samples = role_samples();
    let replies = samples.iter().map(|(_, v)| Reply::Status(200, chat_reply(&v.to_string()))).collect();
    let stub = StubServer::start(replies);
    let mut client = RemoteClient::new(stub_config(&stub, Duration::from_secs(5), 1));
    for (role, value) in &samples {
        let want = moba_core::backend::DecisionResponse::from_json(*role, value).map_err(|e| e.to_string())?;
        let got = client.decide(&request(*role)).map_err(|e| format!("{role:?}: {e}"))?;
        if got != want || got.role() != *role {
            return Err(format!("{role:?}: got {got:?}, want {want:?}"));
        }
        let again = moba_core::backend::DecisionResponse::from_json(*role, &got.to_json()).map_err(|e| e.to_string())?;
        if again != got {
            return Err(format!("{role:?}: to_json does not round-trip"));
        }
    }
    let bodies = stub.requests.lock().unwrap();
    if bodies.len() != samples.len() || bodies.iter().any(|b| b["messages"].as_array().is_none_or(|m| m.len() != 2)) {
        return Err(format!("unexpected request bodies: {bodies:?}"));
    }
    Ok(())
}

/// Two 5xx replies then a 200: succeeds after exactly three requests.
pub fn remote_retry() -> Result<(), String> {
    let ok = chat_reply(&json!({"can_do": true}).to_string());
    let stub = StubServer::start(vec![
        Reply::Status(503, "busy".into()),
        Reply::Status(500, "oops".into()),
        Reply::Status(200, ok),
    ]);
    let mut client = RemoteClient::new(stub_config(&stub, Duration::from_secs(5), 3));
    client.decide(&request(Role::PlanReflect)).map_err(|e| e.to_string())?;
    match stub.count() {
        3 => Ok(()),
        n => Err(format!("{n} requests, want 3")),
    }
}

/// A reply that never arrives in time surfaces as a timeout.
pub fn remote_timeout() -> Result<(), String> {
    let stub = StubServer::start(vec![Reply::Hang(Duration::from_secs(3), chat_reply("{}"))]);
    let mut client = RemoteClient::new(stub_config(&stub, Duration::from_millis(250), 1));
    match client.decide(&request(Role::PlanReflect)) {
        Err(moba_core::backend::BackendError::Timeout) => Ok(()),
        other => Err(format!("got {other:?}, want Timeout")),
    }
}

// ---- metrics ---------------------------------------------------------

/// Expert aggregates per type: (type, tasks, milestones, mean steps).
pub const BASELINE: [(TaskType, usize, usize, f64); 5] = [
    (TaskType::Easy, 10, 10, 4.3),
    (TaskType::Medium, 10, 23, 7.3),
    (TaskType::Hard, 10, 41, 15.2),
    (TaskType::Indirect, 10, 28, 9.4),
    (TaskType::CrossApp, 10, 31, 10.8),
];

/// Published expert-efficiency column, two decimals, overall last.
pub const BASELINE_EE: [&str; 6] = ["4.30", "3.17", "3.71", "3.36", "3.48", "3.53"];

/// Spreads `total` over `n` slots as evenly as possible.
fn spread(total: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| total / n + usize::from(i < total % n)).collect()
}

/// Task definitions and fully achieved records matching the aggregates.
/// Each record's effective steps are integers summing to tasks x mean.
pub fn baseline_inputs() -> (Vec<TaskDef>, Vec<RunRecord>) {
    let (mut defs, mut records) = (Vec::new(), Vec::new());
    for (ty, tasks, milestones, mean) in BASELINE {
        let total_steps = (mean * tasks as f64).round() as usize;
        for (i, (m, steps)) in spread(milestones, tasks).into_iter().zip(spread(total_steps, tasks)).enumerate() {
            let id = format!("{}-{i:02}", ty.as_str());
            let def = TaskDef {
                task_id: id.clone(),
                task_type: ty,
                command: format!("expert task {id}"),
                preparation: Vec::new(),
                milestones: (0..m)
                    .map(|j| Milestone { label: format!("m{j}"), kind: MilestonePredicate::ScreenVisited(format!("s{j}")) })
                    .collect(),
                human_steps: Some(mean),
                ordered: false,
                device_specs: Vec::new(),
                script: None,
                budgets: None,
                seed: None,
                base_dir: PathBuf::new(),
            };
            records.push(RunRecord {
                task_id: id,
                task_type: ty,
                milestones_achieved: vec![true; m],
                step_of_milestone: BTreeMap::new(),
                total_steps: steps as u64,
                effective_steps: steps as u64,
                status: "complete".into(),
                error: None,
                wall_time_ms: 0,
            });
            defs.push(def);
        }
    }
    (defs, records)
}

// ---- golden suite ----------------------------------------------------

pub fn run_golden(memory: bool, plan: bool, jobs: usize) -> SuiteResult {
    let mut options = SuiteOptions { backend: BackendChoice::Scripted(None), jobs, ..SuiteOptions::default() };
    options.config.memory = memory;
    options.config.plan = plan;
    run_suite(&suite_path(), &options).expect("golden suite")
}

pub fn completed(r: &SuiteResult) -> usize {
    r.records.iter().filter(|x| x.complete()).count()
}

pub fn achieved(r: &SuiteResult) -> usize {
    r.records.iter().map(|x| x.achieved()).sum()
}

pub fn record<'a>(r: &'a SuiteResult, id: &str) -> &'a RunRecord {
    r.records.iter().find(|x| x.task_id == id).expect("task in suite")
}

pub fn log<'a>(r: &'a SuiteResult, id: &str) -> &'a str {
    &r.logs.iter().find(|(t, _)| t == id).expect("task in suite").1
}

fn events(log: &str) -> Vec<serde_json::Value> {
    log.lines().map(|l| serde_json::from_str(l).expect("log line is JSON")).collect()
}

/// Which control-flow cases one episode exercised:
/// [feasibility failure then decomposition, execution failure then
/// decomposition, single-child refinement, completed goal].
pub fn control_cases(log: &str, status: &str) -> [bool; 4] {
    let ev = events(log);
    let planned_after = |i: usize| {
        let node = &ev[i]["node_id"];
        ev[i + 1..].iter().take_while(|e| &e["node_id"] == node).any(|e| e["phase"] == "plan")
    };
    let mut cases = [false, false, false, status == "complete"];
    for (i, e) in ev.iter().enumerate() {
        match e["phase"].as_str() {
            Some("plan_reflect") if e["payload"]["can_do"] == false => cases[0] |= planned_after(i),
            Some("exec_reflect") if e["payload"]["subgoal_status"] == false => cases[1] |= planned_after(i),
            Some("plan") => {
                let subs = e["payload"]["subgoals"].as_array().map_or(0, Vec::len);
                cases[2] |= subs == 1 && e["payload"]["subgoals"][0] != e["payload"]["goal"];
            }
            _ => {}
        }
    }
    cases
}

pub fn suite_cases(r: &SuiteResult) -> [bool; 4] {
    let mut all = [false; 4];
    for rec in &r.records {
        let c = control_cases(log(r, &rec.task_id), &rec.status);
        for (a, b) in all.iter_mut().zip(c) {
            *a |= b;
        }
    }
    all
}

/// The typed-input recovery episode, run with a store the test keeps so
/// the stored reflection can be inspected. Returns a description of the
/// first unmet expectation.
pub fn recovery_check() -> Result<(), String> {
    let (_, defs) = moba_core::bench::load_suite(&suite_path()).map_err(|e| e.to_string())?;
    let def = defs.iter().find(|d| d.task_id == "hard-01").ok_or("hard-01 missing")?;
    let mut device = moba_core::device::load_device(&def.device_specs, 0).map_err(|e| e.to_string())?;
    let script = def.resolve(def.script.as_deref().ok_or("no script")?);
    let mut oracle = ScriptedOracle::load(&script).map_err(|e| e.to_string())?;
    let mut memory = MemoryStore::default();
    let report = run_episode(&def.command, &mut device, &mut oracle, &mut memory, &EngineConfig::default())
        .map_err(|e| e.to_string())?;
    let ev = events(&report.to_jsonl());

    let failed = ev
        .iter()
        .position(|e| {
            e["phase"] == "exec_reflect"
                && e["payload"]["subgoal_status"] == false
                && e["payload"]["action"].as_str().is_some_and(|a| a.starts_with("Box_Input("))
        })
        .ok_or("no failed box input")?;
    let reflection = ev[failed]["payload"]["reflection"].as_str().filter(|r| !r.is_empty()).ok_or("no reflection")?;
    if !memory.entries().iter().any(|e| e.corpus == Corpus::FailureHistory && e.text.contains(reflection)) {
        return Err("reflection not stored as a failure entry".into());
    }
    let typed = ev[failed..]
        .iter()
        .filter(|e| e["phase"] == "exec_reflect" && e["payload"]["subgoal_status"] == true)
        .filter(|e| e["payload"]["action"].as_str().is_some_and(|a| a.starts_with("Type(")))
        .count();
    if typed < 2 {
        return Err(format!("{typed} successful typed pieces after the failure"));
    }
    let score = moba_core::bench::score_run(&report.device_log(), &def.milestones, def.ordered);
    let want = MilestonePredicate::VarEquals {
        app: "com.sim.railway".into(),
        name: "train_no".into(),
        value: "G104".into(),
    };
    let i = def.milestones.iter().position(|m| m.kind == want).ok_or("train number milestone missing")?;
    let failed_step = ev[failed]["step"].as_u64().unwrap_or(0);
    match score.step_of[i] {
        Some(s) if score.achieved[i] && s > failed_step => Ok(()),
        other => Err(format!("train number milestone at {other:?}, box input failed at step {failed_step}")),
    }
}
