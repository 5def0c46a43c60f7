//! Sliding-window graph construction.
//!
//! Each window of `W` consecutive messages becomes one graph: the distinct
//! arbitration ids are the nodes (ascending id order), consecutive message
//! pairs become directed edges weighted by multiplicity (self edges
//! included), and the window is labelled 1 iff it holds any attack message.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Read, Write};

use serde::Serialize;
use thiserror::Error;

use crate::ingest::{CanMessage, Label, MAX_CAN_ID};

/// Width of the node feature vector: `[id_norm, frequency, mean_payload]`.
pub const NODE_FEATURES: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("window must hold at least 2 messages and stride at least 1 (window={window}, stride={stride})")]
    WindowTooSmall { window: usize, stride: usize },
    #[error("trace is empty")]
    EmptyTrace,
    #[error("CAN id {0:#05X} does not occur in the window")]
    IdNotInWindow(u16),
    #[error("graph file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowGraph {
    pub node_ids: Vec<u16>,
    /// One `[id/2047, n_j/W, mean scalar payload]` row per node.
    pub x: Vec<[f64; NODE_FEATURES]>,
    pub edges: Vec<Edge>,
    pub label: u8,
    pub window_start_index: usize,
}

impl WindowGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    /// Copy of the graph with nodes relabelled by `perm` (new index of old
    /// node `i` is `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> WindowGraph {
        let n = self.num_nodes();
        assert_eq!(perm.len(), n);
        let mut node_ids = vec![0; n];
        let mut x = vec![[0.0; NODE_FEATURES]; n];
        for i in 0..n {
            node_ids[perm[i]] = self.node_ids[i];
            x[perm[i]] = self.x[i];
        }
        let edges = self
            .edges
            .iter()
            .map(|e| Edge { src: perm[e.src], dst: perm[e.dst], weight: e.weight })
            .collect();
        WindowGraph { node_ids, x, edges, label: self.label, window_start_index: self.window_start_index }
    }
}

/// Bounded scalar view of a payload: byte sum over the full 8-byte capacity,
/// so short frames are not inflated.
pub fn payload_scalar(payload: &[u8]) -> f64 {
    payload.iter().map(|&b| b as f64).sum::<f64>() / (8.0 * 255.0)
}

/// Features of one id within a window.
pub fn node_features(window: &[CanMessage], id: u16) -> Result<[f64; NODE_FEATURES], GraphError> {
    let (count, total) = window
        .iter()
        .filter(|m| m.can_id == id)
        .fold((0usize, 0.0), |(n, s), m| (n + 1, s + payload_scalar(&m.payload)));
    if count == 0 {
        return Err(GraphError::IdNotInWindow(id));
    }
    Ok([
        id as f64 / MAX_CAN_ID as f64,
        count as f64 / window.len() as f64,
        total / count as f64,
    ])
}

/// 1 iff any message in the window is an attack. Unknown counts as benign.
pub fn label_window(window: &[CanMessage]) -> u8 {
    window.iter().any(|m| m.label == Label::Attack) as u8
}

/// Builds the graph of a single window.
pub fn build_graph(window: &[CanMessage], window_start_index: usize) -> WindowGraph {
    // id -> (node index placeholder, count, payload sum)
    let mut stats: BTreeMap<u16, (usize, f64)> = BTreeMap::new();
    for m in window {
        let entry = stats.entry(m.can_id).or_insert((0, 0.0));
        entry.0 += 1;
        entry.1 += payload_scalar(&m.payload);
    }
    let w = window.len() as f64;
    let node_ids: Vec<u16> = stats.keys().copied().collect();
    let x = stats
        .iter()
        .map(|(&id, &(n, sum))| [id as f64 / MAX_CAN_ID as f64, n as f64 / w, sum / n as f64])
        .collect();
    let index = |id: u16| node_ids.binary_search(&id).expect("id is a node");
    let mut counts: BTreeMap<(usize, usize), u32> = BTreeMap::new();
    for pair in window.windows(2) {
        *counts.entry((index(pair[0].can_id), index(pair[1].can_id))).or_default() += 1;
    }
    let edges = counts.into_iter().map(|((src, dst), weight)| Edge { src, dst, weight }).collect();
    WindowGraph { node_ids, x, edges, label: label_window(window), window_start_index }
}

/// One graph per complete window; a trailing partial window is dropped.
pub fn build_windows(messages: &[CanMessage], window: usize, stride: usize) -> Result<Vec<WindowGraph>, GraphError> {
    if window < 2 || stride < 1 {
        return Err(GraphError::WindowTooSmall { window, stride });
    }
    if messages.is_empty() {
        return Err(GraphError::EmptyTrace);
    }
    Ok(window_starts(messages.len(), window, stride)
        .map(|start| build_graph(&messages[start..start + window], start))
        .collect())
}

/// Start offsets of every complete window.
pub fn window_starts(len: usize, window: usize, stride: usize) -> impl Iterator<Item = usize> {
    let last = len.checked_sub(window);
    (0..).step_by(stride.max(1)).take_while(move |&s| last.is_some_and(|l| s <= l))
}

/// Graphs plus the parameters they were built with.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphDataset {
    pub window: usize,
    pub stride: usize,
    pub graphs: Vec<WindowGraph>,
    /// Windows containing at least one message with an unknown label.
    pub unknown_windows: usize,
}

impl GraphDataset {
    pub fn build(messages: &[CanMessage], window: usize, stride: usize) -> Result<Self, GraphError> {
        let graphs = build_windows(messages, window, stride)?;
        let unknown_windows = window_starts(messages.len(), window, stride)
            .filter(|&s| messages[s..s + window].iter().any(|m| m.label == Label::Unknown))
            .count();
        Ok(GraphDataset { window, stride, graphs, unknown_windows })
    }

    pub fn labels(&self) -> Vec<u8> {
        self.graphs.iter().map(|g| g.label).collect()
    }

    pub fn attack_count(&self) -> usize {
        self.graphs.iter().filter(|g| g.label == 1).count()
    }
}

const MAGIC: &[u8; 8] = b"KDGATGRF";
const VERSION: u32 = 1;

/// Writes the little-endian binary layout:
///
/// ```text
/// magic "KDGATGRF" | version u32 | window u32 | stride u32 | count u64
/// per graph: start u64 | label u8 | nodes u32 | ids u16 * n
///            | features f64 * 3n (row-major) | edges u32 | (src u32, dst u32, weight u32) * m
/// ```
pub fn write_dataset<W: Write>(mut out: W, ds: &GraphDataset) -> io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(ds.window as u32).to_le_bytes())?;
    out.write_all(&(ds.stride as u32).to_le_bytes())?;
    out.write_all(&(ds.graphs.len() as u64).to_le_bytes())?;
    for g in &ds.graphs {
        out.write_all(&(g.window_start_index as u64).to_le_bytes())?;
        out.write_all(&[g.label])?;
        out.write_all(&(g.num_nodes() as u32).to_le_bytes())?;
        for id in &g.node_ids {
            out.write_all(&id.to_le_bytes())?;
        }
        for row in &g.x {
            for v in row {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.write_all(&(g.edges.len() as u32).to_le_bytes())?;
        for e in &g.edges {
            out.write_all(&(e.src as u32).to_le_bytes())?;
            out.write_all(&(e.dst as u32).to_le_bytes())?;
            out.write_all(&e.weight.to_le_bytes())?;
        }
    }
    out.flush()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GraphError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| GraphError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, GraphError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, GraphError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, GraphError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, GraphError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, GraphError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_dataset<R: Read>(mut input: R) -> Result<GraphDataset, GraphError> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf).map_err(|e| GraphError::Format(e.to_string()))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(GraphError::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(GraphError::Format(format!("unsupported version {version}")));
    }
    let window = c.u32()? as usize;
    let stride = c.u32()? as usize;
    let count = c.u64()? as usize;
    let mut graphs = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let window_start_index = c.u64()? as usize;
        let label = c.u8()?;
        if label > 1 {
            return Err(GraphError::Format(format!("label {label} is not binary")));
        }
        let n = c.u32()? as usize;
        let node_ids = (0..n).map(|_| c.u16()).collect::<Result<Vec<_>, _>>()?;
        let mut x = Vec::with_capacity(n);
        for _ in 0..n {
            x.push([c.f64()?, c.f64()?, c.f64()?]);
        }
        let m = c.u32()? as usize;
        let mut edges = Vec::with_capacity(m);
        for _ in 0..m {
            let (src, dst, weight) = (c.u32()? as usize, c.u32()? as usize, c.u32()?);
            if src >= n || dst >= n {
                return Err(GraphError::Format(format!("edge ({src}, {dst}) outside {n} nodes")));
            }
            edges.push(Edge { src, dst, weight });
        }
        graphs.push(WindowGraph { node_ids, x, edges, label, window_start_index });
    }
    if c.pos != buf.len() {
        return Err(GraphError::Format("trailing bytes".into()));
    }
    Ok(GraphDataset { window, stride, graphs, unknown_windows: 0 })
}

/// Human-readable dump of a dataset, for debugging.
pub fn format_dataset_text(ds: &GraphDataset) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# kdgat graphs v{VERSION} window={} stride={} count={}", ds.window, ds.stride, ds.graphs.len());
    for (i, g) in ds.graphs.iter().enumerate() {
        let _ = writeln!(s, "graph {i} start={} label={} nodes={} edges={}", g.window_start_index, g.label, g.num_nodes(), g.edges.len());
        for (id, row) in g.node_ids.iter().zip(&g.x) {
            let _ = writeln!(s, "  node {id:03X} {:.6} {:.6} {:.6}", row[0], row[1], row[2]);
        }
        for e in &g.edges {
            let _ = writeln!(s, "  edge {} {} {}", e.src, e.dst, e.weight);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(id: u16, payload: Vec<u8>, label: Label) -> CanMessage {
        CanMessage { timestamp: 0.0, can_id: id, payload, label }
    }

    fn benign(ids: &[u16]) -> Vec<CanMessage> {
        ids.iter().map(|&id| msg(id, vec![0; 8], Label::Benign)).collect()
    }

    #[test]
    fn window_count() {
        let trace = benign(&[0x100; 100]);
        assert_eq!(build_windows(&trace, 50, 50).unwrap().len(), 2);
        assert_eq!(build_windows(&trace[..99], 50, 50).unwrap().len(), 1);
        assert_eq!(build_windows(&trace, 50, 10).unwrap().len(), 6);
        assert!(build_windows(&trace[..10], 50, 50).unwrap().is_empty());
    }

    #[test]
    fn single_id_window() {
        let g = &build_windows(&benign(&[0x1A0; 50]), 50, 50).unwrap()[0];
        assert_eq!(g.node_ids, vec![0x1A0]);
        assert_eq!(g.edges, vec![Edge { src: 0, dst: 0, weight: 49 }]);
    }

    #[test]
    fn alternating_window() {
        let ids: Vec<u16> = (0..50).map(|i| if i % 2 == 0 { 0x0A } else { 0x0B }).collect();
        let g = &build_windows(&benign(&ids), 50, 50).unwrap()[0];
        assert_eq!(g.node_ids, vec![0x0A, 0x0B]);
        assert_eq!(g.edges, vec![Edge { src: 0, dst: 1, weight: 25 }, Edge { src: 1, dst: 0, weight: 24 }]);
    }

    #[test]
    fn errors() {
        assert_eq!(build_windows(&[], 50, 50), Err(GraphError::EmptyTrace));
        assert!(matches!(build_windows(&benign(&[1; 5]), 1, 1), Err(GraphError::WindowTooSmall { .. })));
        assert!(matches!(build_windows(&benign(&[1; 5]), 2, 0), Err(GraphError::WindowTooSmall { .. })));
    }

    #[test]
    fn feature_examples() {
        let mut w = benign(&[0x316; 25]);
        w.extend(benign(&[0x100; 25]));
        assert_eq!(node_features(&w, 0x316).unwrap(), [790.0 / 2047.0, 0.5, 0.0]);

        let mut w = benign(&[0x100; 49]);
        w.push(msg(0x001, vec![0xFF; 8], Label::Benign));
        assert_eq!(node_features(&w, 0x001).unwrap(), [1.0 / 2047.0, 1.0 / 50.0, 1.0]);

        let w = vec![msg(0x100, vec![0; 8], Label::Benign), msg(0x100, vec![0xFF; 8], Label::Benign)];
        assert_eq!(node_features(&w, 0x100).unwrap()[2], 0.5);

        assert_eq!(node_features(&w, 0x200), Err(GraphError::IdNotInWindow(0x200)));
    }

    #[test]
    fn short_payloads_keep_full_denominator() {
        assert_eq!(payload_scalar(&[0xFF, 0xFF]), 0.25);
        assert_eq!(payload_scalar(&[]), 0.0);
    }

    #[test]
    fn labels() {
        assert_eq!(label_window(&benign(&[1; 50])), 0);
        let mut w = benign(&[1; 49]);
        w.push(msg(2, vec![], Label::Attack));
        assert_eq!(label_window(&w), 1);
        let all: Vec<_> = (0..50).map(|_| msg(2, vec![], Label::Attack)).collect();
        assert_eq!(label_window(&all), 1);
        let unknown: Vec<_> = (0..50).map(|_| msg(2, vec![], Label::Unknown)).collect();
        assert_eq!(label_window(&unknown), 0);
        let ds = GraphDataset::build(&unknown, 10, 10).unwrap();
        assert_eq!(ds.unknown_windows, 5);
    }

    #[test]
    fn binary_round_trip_and_corruption() {
        let ids: Vec<u16> = (0..120).map(|i| [0x10, 0x20, 0x7FF, 0x10][i % 4]).collect();
        let mut trace = benign(&ids);
        trace[70].label = Label::Attack;
        let ds = GraphDataset::build(&trace, 50, 25).unwrap();
        let mut bytes = Vec::new();
        write_dataset(&mut bytes, &ds).unwrap();
        let back = read_dataset(bytes.as_slice()).unwrap();
        assert_eq!(back.graphs, ds.graphs);
        assert_eq!((back.window, back.stride), (50, 25));

        assert!(read_dataset(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_dataset(bad.as_slice()).is_err());

        let text = format_dataset_text(&ds);
        assert!(text.starts_with("# kdgat graphs v1 window=50 stride=25 count=3"));
        assert!(text.contains("node 7FF"));
    }
}
