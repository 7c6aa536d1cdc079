//! Graph scripts: edge accumulation over decoded paths, low-frequency
//! pruning, relation labelling and DOT/JSON export.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::corpus::{StepId, StepLibrary};
use crate::error::{Error, Result};

pub const DEFAULT_PRUNE_THRESHOLD: f64 = 0.175;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Node {
    Start,
    Step(StepId),
    End,
}

impl Node {
    pub fn step(self) -> Option<StepId> {
        match self {
            Node::Step(id) => Some(id),
            _ => None,
        }
    }
}

impl Serialize for Node {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Node::Start => s.serialize_str("START"),
            Node::End => s.serialize_str("END"),
            Node::Step(id) => s.serialize_u32(id.0),
        }
    }
}

impl<'de> Deserialize<'de> for Node {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Id(u32),
            Marker(String),
        }
        match Repr::deserialize(d)? {
            Repr::Id(i) => Ok(Node::Step(StepId(i))),
            Repr::Marker(m) if m == "START" => Ok(Node::Start),
            Repr::Marker(m) if m == "END" => Ok(Node::End),
            Repr::Marker(m) => Err(de::Error::custom(format!("unknown node {m}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: Node,
    pub to: Node,
    pub weight: f64,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationKind {
    Sequential,
    Optional,
    Interchangeable,
}

/// A labelled relation. `steps` holds `[from, to]` for sequential edges,
/// the two steps of an interchangeable pair, and `[before, optional, after]`
/// for an optional step.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation {
    pub kind: RelationKind,
    pub steps: Vec<Node>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphScript {
    pub task_id: String,
    pub num_paths: usize,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    #[serde(default)]
    pub relations: Vec<Relation>,
    /// Step texts used when rendering.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<StepId, String>,
}

/// Pre-pruning edge counts over a set of paths, START and END included.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    pub num_paths: usize,
    pub counts: BTreeMap<(Node, Node), u64>,
}

impl Adjacency {
    pub fn accumulate<P: AsRef<[StepId]>>(paths: &[P]) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut counts = BTreeMap::new();
        for path in paths {
            let path = path.as_ref();
            let nodes: Vec<Node> = std::iter::once(Node::Start)
                .chain(path.iter().map(|&id| Node::Step(id)))
                .chain(std::iter::once(Node::End))
                .collect();
            for w in nodes.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
        Ok(Adjacency {
            num_paths: paths.len(),
            counts,
        })
    }

    pub fn weight(&self, from: Node, to: Node) -> f64 {
        self.counts.get(&(from, to)).copied().unwrap_or(0) as f64 / self.num_paths as f64
    }
}

/// Accumulates edges, drops those with weight `<= prune_threshold`, then
/// drops every step no longer on a START→END route.
pub fn induce_graph<P: AsRef<[StepId]>>(
    task_id: &str,
    paths: &[P],
    prune_threshold: f64,
) -> Result<GraphScript> {
    let adj = Adjacency::accumulate(paths)?;
    let n = adj.num_paths as f64;
    let surviving: Vec<Edge> = adj
        .counts
        .iter()
        .map(|(&(from, to), &count)| Edge {
            from,
            to,
            weight: count as f64 / n,
            count,
        })
        .filter(|e| e.weight > prune_threshold)
        .collect();

    let reach = |start: Node, forward: bool| -> BTreeSet<Node> {
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(node) = queue.pop_front() {
            for e in &surviving {
                let (a, b) = if forward {
                    (e.from, e.to)
                } else {
                    (e.to, e.from)
                };
                if a == node && seen.insert(b) {
                    queue.push_back(b);
                }
            }
        }
        seen
    };
    let from_start = reach(Node::Start, true);
    let to_end = reach(Node::End, false);
    let mut nodes: BTreeSet<Node> = from_start.intersection(&to_end).copied().collect();
    nodes.insert(Node::Start);
    nodes.insert(Node::End);
    let edges = surviving
        .into_iter()
        .filter(|e| nodes.contains(&e.from) && nodes.contains(&e.to))
        .collect();
    Ok(GraphScript {
        task_id: task_id.to_string(),
        num_paths: adj.num_paths,
        nodes: nodes.into_iter().collect(),
        edges,
        relations: Vec::new(),
        labels: BTreeMap::new(),
    })
}

impl GraphScript {
    pub fn has_edge(&self, from: Node, to: Node) -> bool {
        self.edges.iter().any(|e| e.from == from && e.to == to)
    }

    pub fn step_nodes(&self) -> impl Iterator<Item = StepId> + '_ {
        self.nodes.iter().filter_map(|n| n.step())
    }

    /// Attaches normalized step texts for rendering.
    pub fn with_labels(mut self, library: &StepLibrary) -> Self {
        self.labels = self
            .step_nodes()
            .filter_map(|id| library.text(id).ok().map(|t| (id, t.to_string())))
            .collect();
        self
    }

    /// Steps labelled optional somewhere in the graph.
    pub fn optional_steps(&self) -> BTreeSet<StepId> {
        self.relations
            .iter()
            .filter(|r| r.kind == RelationKind::Optional)
            .filter_map(|r| r.steps[1].step())
            .collect()
    }

    pub fn interchangeable_pairs(&self) -> BTreeSet<(StepId, StepId)> {
        self.relations
            .iter()
            .filter(|r| r.kind == RelationKind::Interchangeable)
            .filter_map(|r| Some((r.steps[0].step()?, r.steps[1].step()?)))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Json {
            context: "graph script".into(),
            source,
        })
    }
}

/// Labels interchangeable pairs, optional steps and sequential edges.
///
/// A pair is interchangeable when both directed edges survive. Step `j` is
/// optional between `i` and `k` when `i→j`, `j→k` and the skip `i→k` all
/// survive and none of the three is half of an interchangeable pair (two
/// swapped steps otherwise form such triangles on their own). Remaining
/// edges between distinct steps that are neither interchangeable nor an
/// optional skip are sequential.
pub fn classify_relations(mut graph: GraphScript) -> GraphScript {
    let edges: BTreeSet<(Node, Node)> = graph.edges.iter().map(|e| (e.from, e.to)).collect();
    let swapped = |a: Node, b: Node| edges.contains(&(b, a));
    let mut relations = BTreeSet::new();

    for &(a, b) in &edges {
        if let (Node::Step(x), Node::Step(y)) = (a, b) {
            if x < y && swapped(a, b) {
                relations.insert(Relation {
                    kind: RelationKind::Interchangeable,
                    steps: vec![a, b],
                });
            }
        }
    }

    let mut skip_edges = BTreeSet::new();
    for &(i, j) in &edges {
        if !matches!(j, Node::Step(_)) || i == j || swapped(i, j) {
            continue;
        }
        for &(j2, k) in edges.range((j, Node::Start)..=(j, Node::End)) {
            debug_assert_eq!(j2, j);
            if k == i || k == j || swapped(j, k) {
                continue;
            }
            if edges.contains(&(i, k)) && !swapped(i, k) {
                skip_edges.insert((i, k));
                relations.insert(Relation {
                    kind: RelationKind::Optional,
                    steps: vec![i, j, k],
                });
            }
        }
    }

    for &(a, b) in &edges {
        if let (Node::Step(x), Node::Step(y)) = (a, b) {
            if x != y && !swapped(a, b) && !skip_edges.contains(&(a, b)) {
                relations.insert(Relation {
                    kind: RelationKind::Sequential,
                    steps: vec![a, b],
                });
            }
        }
    }
    graph.relations = relations.into_iter().collect();
    graph
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    Dot,
    Json,
}

impl FromStr for GraphFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dot" | "gv" => Ok(GraphFormat::Dot),
            "json" => Ok(GraphFormat::Json),
            other => Err(Error::UnsupportedFormat(other.to_string())),
        }
    }
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

pub fn export_graph(graph: &GraphScript, format: GraphFormat) -> String {
    match format {
        GraphFormat::Json => graph.to_json(),
        GraphFormat::Dot => render_dot(graph),
    }
}

fn render_dot(graph: &GraphScript) -> String {
    let name = |n: Node| -> String {
        match n {
            Node::Start => quote("START"),
            Node::End => quote("END"),
            Node::Step(id) => match graph.labels.get(&id) {
                Some(text) => quote(text),
                None => quote(&format!("step {id}")),
            },
        }
    };
    let optional = graph.optional_steps();
    let skip_edges: BTreeSet<(Node, Node)> = graph
        .relations
        .iter()
        .filter(|r| r.kind == RelationKind::Optional)
        .map(|r| (r.steps[0], r.steps[2]))
        .collect();
    let edge_weight: BTreeMap<(Node, Node), &Edge> =
        graph.edges.iter().map(|e| ((e.from, e.to), e)).collect();

    let mut out = String::new();
    let _ = writeln!(out, "digraph {} {{", quote(&graph.task_id));
    out.push_str("  rankdir=LR;\n");
    for &node in &graph.nodes {
        let attrs = match node {
            Node::Start | Node::End => "shape=box, style=rounded".to_string(),
            Node::Step(id) if optional.contains(&id) => "style=dashed".to_string(),
            Node::Step(_) => String::new(),
        };
        if attrs.is_empty() {
            let _ = writeln!(out, "  {};", name(node));
        } else {
            let _ = writeln!(out, "  {} [{attrs}];", name(node));
        }
    }
    for e in &graph.edges {
        let reverse = edge_weight.get(&(e.to, e.from));
        let mut attrs = vec![
            format!("label=\"{:.3}\"", e.weight),
            format!("weight={}", e.count),
        ];
        if let Some(rev) = reverse {
            // One double-headed edge per interchangeable pair.
            if e.from > e.to {
                continue;
            }
            attrs[0] = format!("label=\"{:.3} / {:.3}\"", e.weight, rev.weight);
            attrs.push("dir=both".into());
        }
        if skip_edges.contains(&(e.from, e.to)) {
            attrs.push("style=dashed".into());
        }
        let _ = writeln!(
            out,
            "  {} -> {} [{}];",
            name(e.from),
            name(e.to),
            attrs.join(", ")
        );
    }
    out.push_str("}\n");
    out
}
