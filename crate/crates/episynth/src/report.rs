//! Graph introspection: render a model graph as a line-oriented text
//! document, and parse such documents back, so the structure wired up by a
//! builder can be reviewed, diffed, and counted without running anything.
//!
//! Node kinds follow the usual DAG conventions for evidence synthesis:
//! `founder` for a basic parameter with an autonomous prior, `param` for a
//! basic parameter whose prior is centered on another parameter (the
//! centering appears as a stochastic edge), `functional` for deterministic
//! quantities, and `data` for observation nodes. Edges into functionals are
//! deterministic; edges into data nodes and centered parameters are
//! stochastic. In a graph produced by a conflict cut, the severed copy shows
//! up as a founder feeding the data directly.

use crate::error::{Error, Result};
use crate::graph::{EtaRef, ModelGraph, NodeRef, ObsModel};
use serde::Serialize;
use std::collections::HashMap;
use std::fmt;

const HEADER: &str = "dag v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Founder,
    Param,
    Functional,
    Data,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeKind::Founder => "founder",
            NodeKind::Param => "param",
            NodeKind::Functional => "functional",
            NodeKind::Data => "data",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Deterministic,
    Stochastic,
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeKind::Deterministic => "deterministic",
            EdgeKind::Stochastic => "stochastic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DagNode {
    pub name: String,
    pub kind: NodeKind,
    pub plate: Option<String>,
    pub constant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DagEdge {
    pub from: String,
    pub to: String,
    pub kind: EdgeKind,
}

/// Parsed or exported graph description: nodes in topological order
/// (parameters, then functionals, then data, each in declaration order),
/// followed by the edges between them.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct DagDoc {
    pub nodes: Vec<DagNode>,
    pub edges: Vec<DagEdge>,
}

impl DagDoc {
    pub fn from_graph(graph: &ModelGraph) -> Self {
        let params = graph.params();
        let by_original: HashMap<usize, &str> =
            params.iter().map(|p| (p.original, p.name.as_str())).collect();
        let by_index: HashMap<usize, &str> = graph
            .functionals_indexed()
            .map(|(i, f)| (i, f.name.as_str()))
            .collect();
        let name_of = |r: NodeRef| -> Option<&str> {
            match r {
                NodeRef::Param(original) => by_original.get(&original).copied(),
                NodeRef::Functional(i) => by_index.get(&i).copied(),
            }
        };

        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for p in params {
            let kind = if p.prior.center().is_some() {
                NodeKind::Param
            } else {
                NodeKind::Founder
            };
            nodes.push(DagNode {
                name: p.name.clone(),
                kind,
                plate: p.plate.clone(),
                constant: false,
            });
            if let Some(c) = p.prior.center() {
                edges.push(DagEdge {
                    from: params[c].name.clone(),
                    to: p.name.clone(),
                    kind: EdgeKind::Stochastic,
                });
            }
        }
        for (i, f) in graph.functionals_indexed() {
            nodes.push(DagNode {
                name: f.name.clone(),
                kind: NodeKind::Functional,
                plate: f.plate.clone(),
                constant: f.constant,
            });
            for dep in graph.effective_deps(i) {
                if let Some(from) = name_of(dep) {
                    edges.push(DagEdge {
                        from: from.to_string(),
                        to: f.name.clone(),
                        kind: EdgeKind::Deterministic,
                    });
                }
            }
        }
        for d in graph.data_nodes() {
            nodes.push(DagNode {
                name: d.name.clone(),
                kind: NodeKind::Data,
                plate: d.plate.clone(),
                constant: false,
            });
            let parent = match graph.override_of(d.parent) {
                Some(slot) => params[slot].name.as_str(),
                None => by_index.get(&d.parent).copied().unwrap_or_default(),
            };
            edges.push(DagEdge {
                from: parent.to_string(),
                to: d.name.clone(),
                kind: EdgeKind::Stochastic,
            });
            if let ObsModel::NegBin {
                eta: EtaRef::Param(slot),
            } = &d.obs_model
            {
                edges.push(DagEdge {
                    from: params[*slot].name.clone(),
                    to: d.name.clone(),
                    kind: EdgeKind::Stochastic,
                });
            }
        }
        DagDoc { nodes, edges }
    }

    pub fn render(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for n in &self.nodes {
            out.push_str("node ");
            out.push_str(&quote(&n.name));
            out.push_str(" kind=");
            out.push_str(&n.kind.to_string());
            if let Some(p) = &n.plate {
                out.push_str(" plate=");
                out.push_str(&quote(p));
            }
            if n.constant {
                out.push_str(" constant");
            }
            out.push('\n');
        }
        for e in &self.edges {
            out.push_str("edge ");
            out.push_str(&quote(&e.from));
            out.push_str(" -> ");
            out.push_str(&quote(&e.to));
            out.push_str(" kind=");
            out.push_str(&e.kind.to_string());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = DagDoc::default();
        let mut saw_header = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let at = i + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !saw_header {
                if line != HEADER {
                    return Err(Error::Config(format!(
                        "line {at}: expected header '{HEADER}', got '{line}'"
                    )));
                }
                saw_header = true;
                continue;
            }
            if let Some(rest) = line.strip_prefix("node ") {
                doc.nodes.push(parse_node(rest, at)?);
            } else if let Some(rest) = line.strip_prefix("edge ") {
                doc.edges.push(parse_edge(rest, at)?);
            } else {
                return Err(Error::Config(format!(
                    "line {at}: expected a node or edge line, got '{line}'"
                )));
            }
        }
        if !saw_header {
            return Err(Error::Config(format!(
                "empty document: expected header '{HEADER}'"
            )));
        }
        Ok(doc)
    }

    pub fn node(&self, name: &str) -> Option<&DagNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    pub fn edges_into<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a DagEdge> {
        self.edges.iter().filter(move |e| e.to == name)
    }
}

/// Render a graph as its text document.
pub fn export_dag(graph: &ModelGraph) -> String {
    DagDoc::from_graph(graph).render()
}

/// Parse a graph-description document.
pub fn parse_dag(text: &str) -> Result<DagDoc> {
    DagDoc::parse(text)
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

/// Read a quoted token off the front of a line, returning it with the rest.
fn take_quoted(s: &str, at: usize) -> Result<(String, &str)> {
    let body = s.strip_prefix('"').ok_or_else(|| {
        Error::Config(format!("line {at}: expected a quoted name at '{s}'"))
    })?;
    let mut out = String::new();
    let mut chars = body.char_indices();
    while let Some((j, c)) = chars.next() {
        match c {
            '\\' => {
                let (_, next) = chars.next().ok_or_else(|| {
                    Error::Config(format!("line {at}: dangling escape in quoted name"))
                })?;
                out.push(next);
            }
            '"' => return Ok((out, &body[j + 1..])),
            _ => out.push(c),
        }
    }
    Err(Error::Config(format!(
        "line {at}: unterminated quoted name"
    )))
}

fn parse_node(rest: &str, at: usize) -> Result<DagNode> {
    let (name, mut rest) = take_quoted(rest, at)?;
    let mut kind = None;
    let mut plate = None;
    let mut constant = false;
    loop {
        rest = rest.trim_start();
        if rest.is_empty() {
            break;
        }
        if let Some(r) = rest.strip_prefix("kind=") {
            let word: String = r.chars().take_while(|c| !c.is_whitespace()).collect();
            kind = Some(match word.as_str() {
                "founder" => NodeKind::Founder,
                "param" => NodeKind::Param,
                "functional" => NodeKind::Functional,
                "data" => NodeKind::Data,
                other => {
                    return Err(Error::Config(format!(
                        "line {at}: unknown node kind '{other}'"
                    )))
                }
            });
            rest = &r[word.len()..];
        } else if let Some(r) = rest.strip_prefix("plate=") {
            let (p, r) = take_quoted(r, at)?;
            plate = Some(p);
            rest = r;
        } else if let Some(r) = rest.strip_prefix("constant") {
            constant = true;
            rest = r;
        } else {
            return Err(Error::Config(format!(
                "line {at}: unknown node attribute at '{rest}'"
            )));
        }
    }
    let kind = kind
        .ok_or_else(|| Error::Config(format!("line {at}: node '{name}' is missing kind=")))?;
    Ok(DagNode {
        name,
        kind,
        plate,
        constant,
    })
}

fn parse_edge(rest: &str, at: usize) -> Result<DagEdge> {
    let (from, rest) = take_quoted(rest, at)?;
    let rest = rest.trim_start().strip_prefix("->").ok_or_else(|| {
        Error::Config(format!("line {at}: expected '->' after the source node"))
    })?;
    let (to, rest) = take_quoted(rest.trim_start(), at)?;
    let rest = rest.trim_start().strip_prefix("kind=").ok_or_else(|| {
        Error::Config(format!("line {at}: edge is missing kind="))
    })?;
    let kind = match rest.trim_end() {
        "deterministic" => EdgeKind::Deterministic,
        "stochastic" => EdgeKind::Stochastic,
        other => {
            return Err(Error::Config(format!(
                "line {at}: unknown edge kind '{other}'"
            )))
        }
    };
    Ok(DagEdge { from, to, kind })
}
