//! File formats: graph JSON, Graphviz DOT, trace JSON lines.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{DiGraph, Edge, GraphError};
use crate::protocol::{ExecutionTrace, IterationRecord, SimulationConfig, TraceHeader, TraceSummary, TRACE_FORMAT};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{0}")]
    Format(String),
}

/// JSON with object keys sorted and shortest round-trip floats.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> String {
    serde_json::to_value(value)
        .and_then(|v| serde_json::to_string(&v))
        .expect("serialisable value")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn canonical_json_pretty<T: Serialize + ?Sized>(value: &T) -> String {
    serde_json::to_value(value)
        .and_then(|v| serde_json::to_string_pretty(&v))
        .expect("serialisable value")
}

/// `{"n": .., "edges": [[j, i], ..], "labels": [..]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphFile {
    pub n: usize,
    pub edges: Vec<Edge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl GraphFile {
    pub fn from_graph(g: &DiGraph, labels: Option<Vec<String>>) -> Self {
        GraphFile {
            n: g.n(),
            edges: g.edges().to_vec(),
            labels,
        }
    }

    pub fn graph(&self) -> Result<DiGraph, IoError> {
        if let Some(l) = &self.labels {
            if l.len() != self.n {
                return Err(IoError::Format(format!("{} labels for {} nodes", l.len(), self.n)));
            }
        }
        Ok(DiGraph::new(self.n, self.edges.iter().copied())?)
    }

    pub fn parse(text: &str) -> Result<(DiGraph, GraphFile), IoError> {
        let file: GraphFile = serde_json::from_str(text)?;
        let g = file.graph()?;
        Ok((g, file))
    }

    /// Canonical text: sorted keys, sorted edges.
    pub fn to_canonical(&self) -> Result<String, IoError> {
        let g = self.graph()?;
        Ok(canonical_json(&GraphFile::from_graph(&g, self.labels.clone())))
    }
}

pub fn to_dot(g: &DiGraph, labels: Option<&[String]>) -> String {
    let mut s = String::from("digraph G {\n");
    for i in g.nodes() {
        let name = labels.map(|l| l[i].clone()).unwrap_or_else(|| i.to_string());
        s.push_str(&format!("  {i} [label=\"{}\"];\n", name.replace('"', "\\\"")));
    }
    for &(j, i) in g.edges() {
        s.push_str(&format!("  {j} -> {i};\n"));
    }
    s.push_str("}\n");
    s
}

/// Parses a simulation config whose `graph` is either an inline graph object
/// or a path to a graph file, relative to `base_dir`.
pub fn parse_simulation_config(text: &str, base_dir: &Path) -> Result<SimulationConfig, IoError> {
    let mut v: serde_json::Value = serde_json::from_str(text)?;
    if let Some(serde_json::Value::String(path)) = v.get("graph") {
        let path = base_dir.join(path);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| IoError::Format(format!("cannot read graph {}: {e}", path.display())))?;
        let (g, _) = GraphFile::parse(&text)?;
        v["graph"] = serde_json::to_value(&g)?;
    }
    Ok(serde_json::from_value(v)?)
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: TraceHeader,
}

#[derive(Serialize, Deserialize)]
struct SummaryLine {
    summary: TraceSummary,
}

/// Header line, one line per iteration, summary line.
pub fn write_trace<W: Write>(trace: &ExecutionTrace, mut out: W) -> Result<(), IoError> {
    writeln!(out, "{}", canonical_json(&HeaderLine { header: trace.header.clone() }))?;
    for r in &trace.records {
        writeln!(out, "{}", canonical_json(r))?;
    }
    writeln!(out, "{}", canonical_json(&SummaryLine { summary: trace.summary.clone() }))?;
    Ok(())
}

pub fn trace_to_string(trace: &ExecutionTrace) -> String {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("utf-8 JSON")
}

pub fn read_trace<R: BufRead>(input: R) -> Result<ExecutionTrace, IoError> {
    let mut lines = input.lines().filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()));
    let first = lines.next().ok_or_else(|| IoError::Format("empty trace".into()))??;
    let header: HeaderLine = serde_json::from_str(&first)?;
    if header.header.format != TRACE_FORMAT {
        return Err(IoError::Format(format!("unknown trace format {:?}", header.header.format)));
    }
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut summary = None;
    for line in lines {
        let line = line?;
        if summary.is_some() {
            return Err(IoError::Format("data after the summary line".into()));
        }
        let v: serde_json::Value = serde_json::from_str(&line)?;
        if v.get("summary").is_some() {
            summary = Some(serde_json::from_value::<SummaryLine>(v)?.summary);
        } else {
            records.push(serde_json::from_value(v)?);
        }
    }
    let summary = summary.ok_or_else(|| IoError::Format("missing summary line".into()))?;
    Ok(ExecutionTrace {
        header: header.header,
        records,
        summary,
    })
}
