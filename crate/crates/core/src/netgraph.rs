//! Decoder layer-graph ingestion, chain extraction, and whole-graph
//! simulation.
//!
//! The graph file is line-oriented and diff-friendly:
//!
//! ```text
//! # comment
//! node in   kind=boundary cin=4 cout=4 h=32 w=32 boundary_bytes=0
//! node c1   kind=conv3x3s1 cin=4 cout=8 h=32 w=32
//! node up   kind=deconv4x4s2 cin=8 cout=4 h=32 w=32
//! edge in c1
//! edge c1 up
//! ```
//!
//! `conv3x3s1` and `deconv4x4s2` are the two layer shapes with fast
//! transforms; they default to padding 1 and the `fast-sparse` algorithm.
//! Generic `conv` / `deconv` nodes take explicit `k= s= pad=` fields and
//! default to `direct`. `boundary` nodes stand for stages the simulator
//! does not execute (attention, deformable alignment, entropy decoding,
//! elementwise fusion): they carry configured `boundary_bytes` /
//! `boundary_cycles` costs, charged identically in the chained and
//! baseline accountings, and may have any fan-in.
//!
//! [`extract_chains`] partitions the layer nodes into fusable chains —
//! runs of convolutions plus an optional trailing deconvolution, broken at
//! boundary nodes and at fan-out points (a multi-consumer feature cannot
//! have its rows freed early, so it must be materialized). Boundary nodes
//! form the residue; every node lands in exactly one place.
//! [`simulate_graph`] simulates each chain with [`chain::simulate_chain`],
//! charges the boundary costs, and aggregates per-module and whole-graph
//! traffic and cycle totals; [`frame_latency_estimate`] converts the cycle
//! total into seconds and frames per second.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use crate::chain::{self, BufferConfig, ChainSpec, SimConfig, TrafficCycleReport};
use crate::engine::{Activation, Algorithm, LayerSpec};
use crate::error::{Error, Result};
use crate::oracle::ConvGeometry;
use crate::transforms::OpKind;

/// Decoder sub-network a node belongs to, for per-module traffic tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModuleTag {
    MotionDecoder,
    ResidualDecoder,
    FeatureReconstruction,
    Boundary,
}

impl ModuleTag {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "motion-decoder" => Ok(ModuleTag::MotionDecoder),
            "residual-decoder" => Ok(ModuleTag::ResidualDecoder),
            "feature-reconstruction" => Ok(ModuleTag::FeatureReconstruction),
            "boundary" => Ok(ModuleTag::Boundary),
            other => Err(Error::Graph(format!("unknown module tag '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ModuleTag::MotionDecoder => "motion-decoder",
            ModuleTag::ResidualDecoder => "residual-decoder",
            ModuleTag::FeatureReconstruction => "feature-reconstruction",
            ModuleTag::Boundary => "boundary",
        }
    }
}

fn module_name(m: Option<ModuleTag>) -> &'static str {
    match m {
        Some(t) => t.as_str(),
        None => "untagged",
    }
}

/// What a graph node is: an executable layer, or an opaque boundary stage
/// with configured costs.
#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    Layer(LayerSpec),
    Boundary {
        cin: usize,
        cout: usize,
        in_rows: usize,
        in_cols: usize,
        out_rows: usize,
        out_cols: usize,
        /// Configured off-chip bytes; when absent, the simulator charges
        /// the node's input plus output feature bytes.
        bytes: Option<u64>,
        /// Configured cycle cost.
        cycles: u64,
    },
}

/// One node of a decoder graph.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub id: String,
    pub kind: NodeKind,
    pub module: Option<ModuleTag>,
}

impl GraphNode {
    /// `(channels, rows, cols)` of the node's input feature.
    pub fn in_dims(&self) -> (usize, usize, usize) {
        match &self.kind {
            NodeKind::Layer(s) => (s.cin, s.in_rows, s.in_cols),
            NodeKind::Boundary {
                cin,
                in_rows,
                in_cols,
                ..
            } => (*cin, *in_rows, *in_cols),
        }
    }

    /// `(channels, rows, cols)` of the node's output feature.
    pub fn out_dims(&self) -> Result<(usize, usize, usize)> {
        match &self.kind {
            NodeKind::Layer(s) => {
                let (r, c) = s.out_dims()?;
                Ok((s.cout, r, c))
            }
            NodeKind::Boundary {
                cout,
                out_rows,
                out_cols,
                ..
            } => Ok((*cout, *out_rows, *out_cols)),
        }
    }

    pub fn is_layer(&self) -> bool {
        matches!(self.kind, NodeKind::Layer(_))
    }
}

/// A validated decoder graph: an acyclic set of nodes and
/// producer→consumer edges with agreeing feature shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGraph {
    nodes: Vec<GraphNode>,
    edges: Vec<(usize, usize)>,
}

impl NetGraph {
    /// Builds and validates a graph. Rejects duplicate ids or edges,
    /// layers with more than one input, shape-inconsistent edges (naming
    /// the edge), fast algorithms on shapes without a fast transform, and
    /// cycles.
    pub fn new(nodes: Vec<GraphNode>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let mut ids = HashSet::new();
        for n in &nodes {
            if !ids.insert(n.id.as_str()) {
                return Err(Error::Graph(format!("duplicate node id '{}'", n.id)));
            }
            // Every node must have computable output dims, and fast
            // algorithms need a fast transform for the shape.
            n.out_dims()
                .map_err(|e| Error::Graph(format!("node '{}': {e}", n.id)))?;
            if let NodeKind::Layer(s) = &n.kind {
                if s.algorithm.is_fast() && !s.fast_shape_ok() {
                    return Err(Error::Graph(format!(
                        "node '{}': algorithm {} has no fast transform for {}{}x{}/s{}/p{}",
                        n.id,
                        s.algorithm.as_str(),
                        s.kind.as_str(),
                        s.geometry.kernel,
                        s.geometry.kernel,
                        s.geometry.stride,
                        s.geometry.pad
                    )));
                }
            }
        }

        let mut seen = HashSet::new();
        let mut indeg = vec![0usize; nodes.len()];
        for &(u, v) in &edges {
            if u >= nodes.len() || v >= nodes.len() {
                return Err(Error::Graph("edge endpoint out of range".into()));
            }
            if !seen.insert((u, v)) {
                return Err(Error::Graph(format!(
                    "duplicate edge '{}'→'{}'",
                    nodes[u].id, nodes[v].id
                )));
            }
            indeg[v] += 1;
            let out = nodes[u].out_dims().expect("checked above");
            let inn = nodes[v].in_dims();
            if out != inn {
                return Err(Error::Graph(format!(
                    "edge '{}'→'{}': producer emits ({}, {}, {}), consumer expects ({}, {}, {})",
                    nodes[u].id, nodes[v].id, out.0, out.1, out.2, inn.0, inn.1, inn.2
                )));
            }
        }
        for (i, n) in nodes.iter().enumerate() {
            if n.is_layer() && indeg[i] > 1 {
                return Err(Error::Graph(format!(
                    "node '{}' is a layer with {} inputs; layers take one input \
                     (fuse multiple features with a boundary node instead)",
                    n.id, indeg[i]
                )));
            }
        }

        let g = Self { nodes, edges };
        g.topo_order()?;
        Ok(g)
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Feature dims carried by edge `i` (producer output, which validation
    /// guarantees equals the consumer input).
    pub fn edge_dims(&self, i: usize) -> Result<(usize, usize, usize)> {
        let (u, _) = self.edges[i];
        self.nodes[u].out_dims()
    }

    /// Kahn topological order, deterministic for a given node/edge order.
    fn topo_order(&self) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut succ = vec![Vec::new(); n];
        for &(u, v) in &self.edges {
            indeg[v] += 1;
            succ[u].push(v);
        }
        let mut ready: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(u) = ready.pop_front() {
            order.push(u);
            for &v in &succ[u] {
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    ready.push_back(v);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| indeg[i] > 0).expect("some node is on a cycle");
            return Err(Error::Graph(format!(
                "graph has a cycle through node '{}'",
                self.nodes[stuck].id
            )));
        }
        Ok(order)
    }
}

/// Key=value fields of one graph line, with consumed-key tracking so
/// unknown keys are rejected.
struct Fields<'a> {
    lineno: usize,
    pairs: Vec<(&'a str, &'a str, bool)>,
}

impl<'a> Fields<'a> {
    fn new(tokens: &[&'a str], lineno: usize) -> Result<Self> {
        let mut pairs: Vec<(&'a str, &'a str, bool)> = Vec::with_capacity(tokens.len());
        for t in tokens {
            let (k, v) = t.split_once('=').ok_or_else(|| {
                Error::Graph(format!("line {lineno}: expected key=value, found '{t}'"))
            })?;
            if k.is_empty() || v.is_empty() {
                return Err(Error::Graph(format!(
                    "line {lineno}: empty key or value in '{t}'"
                )));
            }
            if pairs.iter().any(|&(pk, _, _)| pk == k) {
                return Err(Error::Graph(format!("line {lineno}: duplicate key '{k}'")));
            }
            pairs.push((k, v, false));
        }
        Ok(Self { lineno, pairs })
    }

    fn take(&mut self, key: &str) -> Option<&'a str> {
        for p in &mut self.pairs {
            if p.0 == key {
                p.2 = true;
                return Some(p.1);
            }
        }
        None
    }

    fn take_usize(&mut self, key: &str) -> Result<Option<usize>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                Error::Graph(format!(
                    "line {}: {key}='{v}' is not a whole number",
                    self.lineno
                ))
            }),
        }
    }

    fn take_u64(&mut self, key: &str) -> Result<Option<u64>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                Error::Graph(format!(
                    "line {}: {key}='{v}' is not a whole number",
                    self.lineno
                ))
            }),
        }
    }

    fn need_usize(&mut self, key: &str) -> Result<usize> {
        self.take_usize(key)?.ok_or_else(|| {
            Error::Graph(format!(
                "line {}: missing required key '{key}'",
                self.lineno
            ))
        })
    }

    fn finish(self) -> Result<()> {
        if let Some((k, _, _)) = self.pairs.iter().find(|p| !p.2) {
            return Err(Error::Graph(format!(
                "line {}: unknown key '{k}'",
                self.lineno
            )));
        }
        Ok(())
    }
}

fn parse_node(id: &str, kv: &[&str], lineno: usize) -> Result<GraphNode> {
    if id.contains('=') {
        return Err(Error::Graph(format!(
            "line {lineno}: node line needs an id before the key=value fields"
        )));
    }
    let mut f = Fields::new(kv, lineno)?;
    let kind_s = f
        .take("kind")
        .ok_or_else(|| Error::Graph(format!("line {lineno}: missing required key 'kind'")))?;
    let module = match f.take("module") {
        Some(m) => Some(
            ModuleTag::parse(m)
                .map_err(|_| Error::Graph(format!("line {lineno}: unknown module tag '{m}'")))?,
        ),
        None => None,
    };
    let cin = f.need_usize("cin")?;
    let cout = f.need_usize("cout")?;
    let h = f.need_usize("h")?;
    let w = f.need_usize("w")?;

    let kind = match kind_s {
        "boundary" => {
            let out_rows = f.take_usize("out_h")?.unwrap_or(h);
            let out_cols = f.take_usize("out_w")?.unwrap_or(w);
            let bytes = f.take_u64("boundary_bytes")?;
            let cycles = f.take_u64("boundary_cycles")?.unwrap_or(0);
            NodeKind::Boundary {
                cin,
                cout,
                in_rows: h,
                in_cols: w,
                out_rows,
                out_cols,
                bytes,
                cycles,
            }
        }
        "conv3x3s1" | "deconv4x4s2" | "conv" | "deconv" => {
            let (op, k, s, default_pad, default_alg) = match kind_s {
                "conv3x3s1" | "deconv4x4s2" => {
                    if f.take("k").is_some() || f.take("s").is_some() {
                        return Err(Error::Graph(format!(
                            "line {lineno}: kind '{kind_s}' fixes k and s; drop those keys"
                        )));
                    }
                    if kind_s == "conv3x3s1" {
                        (OpKind::Conv, 3, 1, 1, Algorithm::FastSparse)
                    } else {
                        (OpKind::Deconv, 4, 2, 1, Algorithm::FastSparse)
                    }
                }
                "conv" => (
                    OpKind::Conv,
                    f.need_usize("k")?,
                    f.need_usize("s")?,
                    0,
                    Algorithm::Direct,
                ),
                "deconv" => (
                    OpKind::Deconv,
                    f.need_usize("k")?,
                    f.need_usize("s")?,
                    0,
                    Algorithm::Direct,
                ),
                _ => unreachable!(),
            };
            let pad = f.take_usize("pad")?.unwrap_or(default_pad);
            let algorithm = match f.take("algorithm") {
                Some(a) => Algorithm::parse(a)
                    .map_err(|_| Error::Graph(format!("line {lineno}: unknown algorithm '{a}'")))?,
                None => default_alg,
            };
            let geometry = ConvGeometry::new(k, s, pad)
                .map_err(|e| Error::Graph(format!("line {lineno}: node '{id}': {e}")))?;
            NodeKind::Layer(LayerSpec {
                kind: op,
                geometry,
                cin,
                cout,
                in_rows: h,
                in_cols: w,
                algorithm,
                activation: Activation::None,
                out_format: None,
            })
        }
        unknown => {
            return Err(Error::Graph(format!(
                "line {lineno}: unknown node kind '{unknown}'"
            )))
        }
    };
    f.finish()?;
    Ok(GraphNode {
        id: id.to_string(),
        kind,
        module,
    })
}

/// Parses the line-oriented graph format. An empty file yields an empty
/// (and valid) graph.
pub fn parse_graph(text: &str) -> Result<NetGraph> {
    let mut nodes: Vec<GraphNode> = Vec::new();
    let mut raw_edges: Vec<(String, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "node" => {
                if tokens.len() < 2 {
                    return Err(Error::Graph(format!("line {lineno}: node line needs an id")));
                }
                nodes.push(parse_node(tokens[1], &tokens[2..], lineno)?);
            }
            "edge" => {
                if tokens.len() != 3 {
                    return Err(Error::Graph(format!(
                        "line {lineno}: expected 'edge <src> <dst>'"
                    )));
                }
                raw_edges.push((tokens[1].to_string(), tokens[2].to_string(), lineno));
            }
            other => {
                return Err(Error::Graph(format!(
                    "line {lineno}: unknown directive '{other}' (expected 'node' or 'edge')"
                )))
            }
        }
    }

    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, n) in nodes.iter().enumerate() {
        if index.insert(n.id.as_str(), i).is_some() {
            return Err(Error::Graph(format!("duplicate node id '{}'", n.id)));
        }
    }
    let mut edges = Vec::with_capacity(raw_edges.len());
    for (src, dst, lineno) in &raw_edges {
        let lookup = |id: &str| {
            index.get(id).copied().ok_or_else(|| {
                Error::Graph(format!("line {lineno}: edge references unknown node '{id}'"))
            })
        };
        edges.push((lookup(src)?, lookup(dst)?));
    }
    NetGraph::new(nodes, edges)
}

/// Loads and validates a graph file.
pub fn load_netgraph(path: &Path) -> Result<NetGraph> {
    let text = std::fs::read_to_string(path)?;
    parse_graph(&text)
}

/// Renders a graph back to the line format. `parse_graph(render_graph(g))`
/// reproduces `g` structurally.
pub fn render_graph(g: &NetGraph) -> String {
    let mut out = String::new();
    for n in g.nodes() {
        let _ = write!(out, "node {}", n.id);
        match &n.kind {
            NodeKind::Layer(s) => {
                match (s.kind, s.geometry.kernel, s.geometry.stride) {
                    (OpKind::Conv, 3, 1) => {
                        let _ = write!(out, " kind=conv3x3s1");
                    }
                    (OpKind::Deconv, 4, 2) => {
                        let _ = write!(out, " kind=deconv4x4s2");
                    }
                    (kind, k, stride) => {
                        let _ = write!(out, " kind={} k={k} s={stride}", kind.as_str());
                    }
                }
                let _ = write!(
                    out,
                    " pad={} cin={} cout={} h={} w={} algorithm={}",
                    s.geometry.pad,
                    s.cin,
                    s.cout,
                    s.in_rows,
                    s.in_cols,
                    s.algorithm.as_str()
                );
            }
            NodeKind::Boundary {
                cin,
                cout,
                in_rows,
                in_cols,
                out_rows,
                out_cols,
                bytes,
                cycles,
            } => {
                let _ = write!(
                    out,
                    " kind=boundary cin={cin} cout={cout} h={in_rows} w={in_cols}"
                );
                if (out_rows, out_cols) != (in_rows, in_cols) {
                    let _ = write!(out, " out_h={out_rows} out_w={out_cols}");
                }
                if let Some(b) = bytes {
                    let _ = write!(out, " boundary_bytes={b}");
                }
                if *cycles != 0 {
                    let _ = write!(out, " boundary_cycles={cycles}");
                }
            }
        }
        if let Some(m) = n.module {
            let _ = write!(out, " module={}", m.as_str());
        }
        out.push('\n');
    }
    for &(u, v) in g.edges() {
        let _ = writeln!(out, "edge {} {}", g.nodes()[u].id, g.nodes()[v].id);
    }
    out
}

/// Saves a graph in the line format.
pub fn save_netgraph(g: &NetGraph, path: &Path) -> Result<()> {
    std::fs::write(path, render_graph(g))?;
    Ok(())
}

/// One fusable chain pulled out of a graph.
#[derive(Clone, Debug)]
pub struct ExtractedChain {
    /// Graph node indices, in execution order.
    pub nodes: Vec<usize>,
    pub chain: ChainSpec,
}

/// Partition of a graph's nodes into fusable chains plus the boundary-node
/// residue. Every node appears exactly once.
#[derive(Clone, Debug)]
pub struct ChainExtraction {
    pub chains: Vec<ExtractedChain>,
    /// Boundary nodes, in topological order.
    pub residue: Vec<usize>,
}

/// Extracts maximal fusable chains: starting from each layer node in
/// topological order, a chain extends through convolutions whose single
/// successor is a layer fed only by it, and closes after a deconvolution.
/// Fan-out breaks a chain because a feature with several consumers cannot
/// have its rows freed early. Boundary nodes go to the residue.
pub fn extract_chains(g: &NetGraph) -> Result<ChainExtraction> {
    let order = g.topo_order()?;
    let n = g.nodes().len();
    let mut succ = vec![Vec::new(); n];
    for &(u, v) in g.edges() {
        succ[u].push(v);
    }
    let mut visited = vec![false; n];
    let mut chains = Vec::new();
    let mut residue = Vec::new();
    for &i in &order {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let spec = match &g.nodes()[i].kind {
            NodeKind::Boundary { .. } => {
                residue.push(i);
                continue;
            }
            NodeKind::Layer(s) => *s,
        };
        let mut ids = vec![i];
        let mut cur = spec;
        loop {
            // A deconvolution closes its chain; only a sole successor that
            // is an unvisited layer can extend it.
            if cur.kind != OpKind::Conv {
                break;
            }
            let outs = &succ[*ids.last().expect("chain is non-empty")];
            if outs.len() != 1 || visited[outs[0]] {
                break;
            }
            let NodeKind::Layer(next) = &g.nodes()[outs[0]].kind else {
                break;
            };
            visited[outs[0]] = true;
            ids.push(outs[0]);
            cur = *next;
        }
        let specs = ids
            .iter()
            .map(|&j| match &g.nodes()[j].kind {
                NodeKind::Layer(s) => *s,
                NodeKind::Boundary { .. } => unreachable!("chains hold only layer nodes"),
            })
            .collect();
        chains.push(ExtractedChain {
            nodes: ids,
            chain: ChainSpec::new(specs)?,
        });
    }
    debug_assert_eq!(
        chains.iter().map(|c| c.nodes.len()).sum::<usize>() + residue.len(),
        n,
        "extraction must cover every node exactly once"
    );
    Ok(ChainExtraction { chains, residue })
}

/// One simulated chain in a graph report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainEntry {
    /// Node ids, in execution order.
    pub nodes: Vec<String>,
    pub report: TrafficCycleReport,
}

/// One boundary node's configured costs in a graph report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundaryEntry {
    pub node: String,
    pub module: String,
    pub bytes: u64,
    pub cycles: u64,
}

/// Per-module traffic and cycle totals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleTraffic {
    pub module: String,
    pub chained_bytes: u64,
    pub baseline_bytes: u64,
    pub cycles: u64,
}

/// Frame-latency estimate derived from a graph's cycle total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyEstimate {
    pub cycles: u64,
    pub seconds: f64,
    pub frames_per_second: f64,
    pub caveat: String,
}

const LATENCY_CAVEAT: &str = "serialized-schedule cycle estimate; attention, alignment, and \
     entropy stages carry configured costs, so seconds and FPS are model estimates, not \
     measurements";

fn latency_from_cycles(cycles: u64, frequency_hz: u64) -> LatencyEstimate {
    let seconds = cycles as f64 / frequency_hz as f64;
    let frames_per_second = if seconds > 0.0 { 1.0 / seconds } else { 0.0 };
    LatencyEstimate {
        cycles,
        seconds,
        frames_per_second,
        caveat: LATENCY_CAVEAT.to_string(),
    }
}

/// Whole-graph simulation report: per-chain traffic/cycle reports, boundary
/// costs, per-module totals, overall reduction, and a latency estimate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphReport {
    pub chains: Vec<ChainEntry>,
    pub boundaries: Vec<BoundaryEntry>,
    pub modules: Vec<ModuleTraffic>,
    pub chained_bytes: u64,
    pub baseline_bytes: u64,
    pub reduction_pct: f64,
    pub latency: LatencyEstimate,
    pub notes: Vec<String>,
}

fn report_notes() -> Vec<String> {
    vec![
        "boundary nodes (attention, alignment, entropy, elementwise fusion) charge \
         configured byte and cycle costs, identical in the chained and baseline accountings"
            .to_string(),
        "activations are requantized to the layer output format at every layer boundary, \
         including between the layers of a chain"
            .to_string(),
    ]
}

/// Simulates every chain of a graph, charges boundary costs, and aggregates
/// totals. Chains are simulated independently and summed, so the report is
/// deterministic for a given graph and configuration.
pub fn simulate_graph(g: &NetGraph, cfg: &SimConfig) -> Result<GraphReport> {
    cfg.validate()?;
    let extraction = extract_chains(g)?;
    let mut modules: BTreeMap<&str, ModuleTraffic> = BTreeMap::new();
    let mut tally = |name: &'static str, chained: u64, baseline: u64, cycles: u64| {
        let e = modules.entry(name).or_insert_with(|| ModuleTraffic {
            module: name.to_string(),
            chained_bytes: 0,
            baseline_bytes: 0,
            cycles: 0,
        });
        e.chained_bytes += chained;
        e.baseline_bytes += baseline;
        e.cycles += cycles;
    };

    let mut chains = Vec::with_capacity(extraction.chains.len());
    for ec in &extraction.chains {
        let buf = BufferConfig::for_chain(&ec.chain, cfg);
        let report = chain::simulate_chain(&ec.chain, &buf, cfg)?;
        for (row, &ni) in report.layers.iter().zip(&ec.nodes) {
            tally(
                module_name(g.nodes()[ni].module),
                row.chained_reads + row.chained_writes,
                row.baseline_reads + row.baseline_writes,
                row.cycles,
            );
        }
        chains.push(ChainEntry {
            nodes: ec.nodes.iter().map(|&i| g.nodes()[i].id.clone()).collect(),
            report,
        });
    }

    let mut boundaries = Vec::with_capacity(extraction.residue.len());
    for &ni in &extraction.residue {
        let node = &g.nodes()[ni];
        let (bytes, cycles) = match &node.kind {
            NodeKind::Boundary { bytes, cycles, .. } => (*bytes, *cycles),
            NodeKind::Layer(_) => unreachable!("residue holds only boundary nodes"),
        };
        let bytes = match bytes {
            Some(b) => b,
            None => {
                chain::feature_bytes(node.in_dims(), cfg)
                    + chain::feature_bytes(node.out_dims()?, cfg)
            }
        };
        tally(module_name(node.module), bytes, bytes, cycles);
        boundaries.push(BoundaryEntry {
            node: node.id.clone(),
            module: module_name(node.module).to_string(),
            bytes,
            cycles,
        });
    }

    let boundary_bytes: u64 = boundaries.iter().map(|b| b.bytes).sum();
    let boundary_cycles: u64 = boundaries.iter().map(|b| b.cycles).sum();
    let chained_bytes =
        chains.iter().map(|c| c.report.chained_total()).sum::<u64>() + boundary_bytes;
    let baseline_bytes =
        chains.iter().map(|c| c.report.baseline_total()).sum::<u64>() + boundary_bytes;
    let total_cycles =
        chains.iter().map(|c| c.report.chained_cycles).sum::<u64>() + boundary_cycles;
    let reduction_pct = if baseline_bytes == 0 {
        0.0
    } else {
        100.0 * (1.0 - chained_bytes as f64 / baseline_bytes as f64)
    };
    Ok(GraphReport {
        chains,
        boundaries,
        modules: modules.into_values().collect(),
        chained_bytes,
        baseline_bytes,
        reduction_pct,
        latency: latency_from_cycles(total_cycles, cfg.scu.frequency_hz),
        notes: report_notes(),
    })
}

/// Frame latency of a whole graph: chain cycles plus configured boundary
/// cycles, divided by the clock frequency. A graph with no nodes costs 0 s.
pub fn frame_latency_estimate(g: &NetGraph, cfg: &SimConfig) -> Result<LatencyEstimate> {
    Ok(simulate_graph(g, cfg)?.latency)
}

/// Renders every chain's bank-occupancy trace as CSV with a leading chain
/// column (the chain's first node id). `feature` indexes features within
/// that chain.
pub fn graph_trace_csv(report: &GraphReport) -> String {
    let mut out = String::from("chain,cycle,bank,state,feature,row\n");
    for c in &report.chains {
        let label = c.nodes.first().map(String::as_str).unwrap_or("?");
        for e in &c.report.trace {
            let _ = writeln!(
                out,
                "{label},{},{},{},F{},{}",
                e.cycle,
                e.bank,
                e.state.as_str(),
                e.feature,
                e.row
            );
        }
    }
    out
}

/// Bundled decoder workload: the full dual-decoder 1080p graph, in the
/// line format (see the file's comments for the recorded assumptions).
pub const BUNDLED_DECODER_GRAPH: &str = include_str!("../assets/ctvc_decoder.graph");

/// Simulator configuration matching the bundled decoder workload.
pub const BUNDLED_DECODER_CONFIG: &str = include_str!("../assets/ctvc_decoder.sim");

/// Parses [`BUNDLED_DECODER_GRAPH`].
pub fn bundled_decoder_graph() -> NetGraph {
    parse_graph(BUNDLED_DECODER_GRAPH).expect("bundled decoder graph is valid")
}

/// Parses [`BUNDLED_DECODER_CONFIG`].
pub fn bundled_decoder_config() -> SimConfig {
    chain::parse_sim_config(BUNDLED_DECODER_CONFIG).expect("bundled simulator config is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_graph_file_loads_and_reports_zero() {
        let g = parse_graph("").unwrap();
        assert!(g.is_empty());
        let g = parse_graph("# only comments\n\n").unwrap();
        assert!(g.is_empty());

        let cfg = SimConfig::default();
        let ex = extract_chains(&g).unwrap();
        assert!(ex.chains.is_empty() && ex.residue.is_empty());
        let report = simulate_graph(&g, &cfg).unwrap();
        assert_eq!((report.chained_bytes, report.baseline_bytes), (0, 0));
        assert_eq!(report.reduction_pct, 0.0);
        let la = frame_latency_estimate(&g, &cfg).unwrap();
        assert_eq!(la.cycles, 0);
        assert_eq!(la.seconds, 0.0);
        assert_eq!(la.frames_per_second, 0.0);
    }

    #[test]
    fn parse_rejects_malformed_lines() {
        let cases = [
            "node a kind=warp cin=1 cout=1 h=4 w=4",            // unknown kind
            "node a kind=conv3x3s1 cin=1 cout=1 h=8",           // missing w
            "node a kind=conv3x3s1 cin=1 cout=1 h=8 w=8 cin=2", // duplicate key
            "node a kind=conv3x3s1 cin=x cout=1 h=8 w=8",       // bad number
            "node a kind=conv3x3s1 cin=1 cout=1 h=8 w=8 zap=1", // unknown key
            "node a kind=conv3x3s1 k=5 cin=1 cout=1 h=8 w=8",   // k on shorthand
            "node a kind=conv cin=1 cout=1 h=8 w=8",            // generic needs k/s
            "node kind=conv3x3s1 cin=1 cout=1 h=8 w=8",         // missing id
            "node a kind=conv3x3s1 cin=1 cout=1 h=8 w=8 module=mystery", // bad module
            "node a kind=conv k=5 s=1 pad=0 cin=1 cout=1 h=8 w=8 algorithm=fast-sparse", // no fast 5x5
            "squiggle a b", // unknown directive
            "edge a",       // short edge line
            "node a kind=conv3x3s1 cin=1 cout=1 h=8 w=8\nedge a ghost", // unknown endpoint
            "node a kind=conv3x3s1 cin=1 cout=1 h=8 w=8\nnode a kind=boundary cin=1 cout=1 h=8 w=8", // dup id
            "node a kind=conv3x3s1 cin=1 cout=1 h=8 w=8\nedge a a\nedge a a", // dup edge (and cycle)
        ];
        for text in cases {
            assert!(parse_graph(text).is_err(), "accepted: {text}");
        }
    }

    #[test]
    fn cyclic_graph_is_rejected_naming_a_node() {
        let text = "node a kind=conv3x3s1 cin=2 cout=2 h=8 w=8\n\
                    node b kind=conv3x3s1 cin=2 cout=2 h=8 w=8\n\
                    edge a b\nedge b a\n";
        match parse_graph(text) {
            Err(Error::Graph(msg)) => assert!(msg.contains("cycle"), "msg: {msg}"),
            other => panic!("expected graph error, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatched_edge_is_rejected_naming_the_edge() {
        let text = "node a kind=conv3x3s1 cin=2 cout=4 h=8 w=8\n\
                    node b kind=conv3x3s1 cin=3 cout=4 h=8 w=8\n\
                    edge a b\n";
        match parse_graph(text) {
            Err(Error::Graph(msg)) => {
                assert!(msg.contains("'a'→'b'"), "msg: {msg}");
                assert!(msg.contains("(4, 8, 8)") && msg.contains("(3, 8, 8)"), "msg: {msg}");
            }
            other => panic!("expected graph error, got {other:?}"),
        }
    }

    #[test]
    fn layer_fan_in_is_rejected_boundary_fan_in_allowed() {
        let pre = "node a kind=conv3x3s1 cin=2 cout=2 h=8 w=8\n\
                   node b kind=conv3x3s1 cin=2 cout=2 h=8 w=8\n";
        let layer_sink = format!("{pre}node c kind=conv3x3s1 cin=2 cout=2 h=8 w=8\nedge a c\nedge b c\n");
        match parse_graph(&layer_sink) {
            Err(Error::Graph(msg)) => assert!(msg.contains("'c'"), "msg: {msg}"),
            other => panic!("expected graph error, got {other:?}"),
        }
        let boundary_sink =
            format!("{pre}node c kind=boundary cin=2 cout=2 h=8 w=8\nedge a c\nedge b c\n");
        assert!(parse_graph(&boundary_sink).is_ok());
    }

    #[test]
    fn generic_kinds_parse_with_explicit_geometry() {
        let g = parse_graph("node a kind=conv k=5 s=2 pad=2 cin=3 cout=4 h=16 w=16\n").unwrap();
        let NodeKind::Layer(s) = &g.nodes()[0].kind else {
            panic!("expected a layer node")
        };
        assert_eq!(
            (s.geometry.kernel, s.geometry.stride, s.geometry.pad),
            (5, 2, 2)
        );
        assert_eq!(s.algorithm, Algorithm::Direct);
        // Shorthand defaults: pad 1, fast-sparse.
        let g = parse_graph("node a kind=deconv4x4s2 cin=3 cout=4 h=16 w=16\n").unwrap();
        let NodeKind::Layer(s) = &g.nodes()[0].kind else {
            panic!("expected a layer node")
        };
        assert_eq!((s.geometry.pad, s.algorithm), (1, Algorithm::FastSparse));
    }

    #[test]
    fn linear_conv_conv_deconv_extracts_one_chain() {
        let text = "node c1 kind=conv3x3s1 cin=2 cout=4 h=12 w=12\n\
                    node c2 kind=conv3x3s1 cin=4 cout=4 h=12 w=12\n\
                    node d1 kind=deconv4x4s2 cin=4 cout=2 h=12 w=12\n\
                    edge c1 c2\nedge c2 d1\n";
        let g = parse_graph(text).unwrap();
        let ex = extract_chains(&g).unwrap();
        assert_eq!(ex.chains.len(), 1);
        assert!(ex.residue.is_empty());
        assert_eq!(ex.chains[0].nodes, vec![0, 1, 2]);
        assert_eq!(ex.chains[0].chain.layers().len(), 3);
    }

    #[test]
    fn fan_out_breaks_the_chain() {
        let text = "node c1 kind=conv3x3s1 cin=2 cout=4 h=12 w=12\n\
                    node c2 kind=conv3x3s1 cin=4 cout=4 h=12 w=12\n\
                    node c3 kind=conv3x3s1 cin=4 cout=4 h=12 w=12\n\
                    edge c1 c2\nedge c1 c3\n";
        let g = parse_graph(text).unwrap();
        let ex = extract_chains(&g).unwrap();
        let lens: Vec<usize> = ex.chains.iter().map(|c| c.nodes.len()).collect();
        assert_eq!(lens, vec![1, 1, 1]);
        let covered: usize = lens.iter().sum();
        assert_eq!(covered + ex.residue.len(), g.nodes().len());
    }

    #[test]
    fn deconv_closes_its_chain_and_boundaries_split() {
        // deconv followed by conv: two chains.
        let text = "node d kind=deconv4x4s2 cin=2 cout=2 h=8 w=8\n\
                    node c kind=conv3x3s1 cin=2 cout=2 h=16 w=16\n\
                    edge d c\n";
        let ex = extract_chains(&parse_graph(text).unwrap()).unwrap();
        assert_eq!(ex.chains.len(), 2);
        // conv, boundary, conv: two one-layer chains plus one residue node.
        let text = "node c1 kind=conv3x3s1 cin=2 cout=2 h=8 w=8\n\
                    node att kind=boundary cin=2 cout=2 h=8 w=8 boundary_bytes=64 boundary_cycles=5\n\
                    node c2 kind=conv3x3s1 cin=2 cout=2 h=8 w=8\n\
                    edge c1 att\nedge att c2\n";
        let g = parse_graph(text).unwrap();
        let ex = extract_chains(&g).unwrap();
        assert_eq!(ex.chains.len(), 2);
        assert_eq!(ex.residue, vec![1]);
    }

    #[test]
    fn bundled_decoder_graph_loads_with_expected_vocabulary() {
        let g = bundled_decoder_graph();
        assert_eq!(g.nodes().len(), 29);
        let mut layers = 0;
        let mut boundaries = 0;
        for n in g.nodes() {
            match &n.kind {
                NodeKind::Layer(s) => {
                    layers += 1;
                    // Only the two fast shapes appear, and both qualify.
                    let shape = (s.kind, s.geometry.kernel, s.geometry.stride, s.geometry.pad);
                    assert!(
                        shape == (OpKind::Conv, 3, 1, 1) || shape == (OpKind::Deconv, 4, 2, 1),
                        "unexpected layer shape {shape:?} at node {}",
                        n.id
                    );
                    assert!(s.fast_shape_ok());
                    assert_eq!(s.algorithm, Algorithm::FastSparse);
                }
                NodeKind::Boundary { bytes, .. } => {
                    boundaries += 1;
                    assert!(bytes.is_some(), "boundary {} lacks a byte cost", n.id);
                }
            }
            assert!(n.module.is_some(), "node {} lacks a module tag", n.id);
        }
        assert_eq!((layers, boundaries), (21, 8));
        // Final node upsamples to the padded 1080p pixel plane.
        let fr = g.index_of("fr-d").unwrap();
        assert_eq!(g.nodes()[fr].out_dims().unwrap(), (3, 1088, 1920));
    }

    #[test]
    fn bundled_graph_round_trips_through_render() {
        let g = bundled_decoder_graph();
        let rendered = render_graph(&g);
        let reparsed = parse_graph(&rendered).unwrap();
        assert_eq!(g, reparsed);
    }

    #[test]
    fn bundled_partition_covers_every_node_exactly_once() {
        let g = bundled_decoder_graph();
        let ex = extract_chains(&g).unwrap();
        assert_eq!(ex.chains.len(), 7);
        assert!(ex.chains.iter().all(|c| c.nodes.len() == 3));
        assert_eq!(ex.residue.len(), 8);
        let mut seen = HashSet::new();
        for &i in ex.chains.iter().flat_map(|c| c.nodes.iter()).chain(&ex.residue) {
            assert!(seen.insert(i), "node index {i} covered twice");
        }
        assert_eq!(seen.len(), g.nodes().len());
    }

    #[test]
    fn bundled_decoder_traffic_reduction_is_in_band() {
        let g = bundled_decoder_graph();
        let cfg = bundled_decoder_config();
        assert_eq!(cfg.num_banks, 12);
        let report = simulate_graph(&g, &cfg).unwrap();

        assert!(report.chained_bytes < report.baseline_bytes);
        assert!(
            (30.0..=50.0).contains(&report.reduction_pct),
            "reduction {:.2}%",
            report.reduction_pct
        );
        // Hand-summed totals: per-chain features and weight/index bytes for
        // the seven chains plus the eight configured boundary costs.
        assert_eq!(report.chained_bytes, 340_813_440);
        assert_eq!(report.baseline_bytes, 531_169_920);

        // Accounting identities: chains plus boundaries make the totals,
        // and module rows partition them.
        let chain_chained: u64 = report.chains.iter().map(|c| c.report.chained_total()).sum();
        let chain_baseline: u64 = report
            .chains
            .iter()
            .map(|c| c.report.baseline_total())
            .sum();
        let boundary_bytes: u64 = report.boundaries.iter().map(|b| b.bytes).sum();
        assert_eq!(report.chained_bytes, chain_chained + boundary_bytes);
        assert_eq!(report.baseline_bytes, chain_baseline + boundary_bytes);
        let module_chained: u64 = report.modules.iter().map(|m| m.chained_bytes).sum();
        let module_baseline: u64 = report.modules.iter().map(|m| m.baseline_bytes).sum();
        let module_cycles: u64 = report.modules.iter().map(|m| m.cycles).sum();
        assert_eq!(module_chained, report.chained_bytes);
        assert_eq!(module_baseline, report.baseline_bytes);
        assert_eq!(module_cycles, report.latency.cycles);
    }

    #[test]
    fn bundled_latency_is_within_twice_the_target_frame_rate() {
        let g = bundled_decoder_graph();
        let cfg = bundled_decoder_config();
        let la = frame_latency_estimate(&g, &cfg).unwrap();
        assert_eq!(cfg.scu.frequency_hz, 400_000_000);
        assert!(
            (12.5..=50.0).contains(&la.frames_per_second),
            "fps {:.2}",
            la.frames_per_second
        );
        assert!(!la.caveat.is_empty());
        let report = simulate_graph(&g, &cfg).unwrap();
        assert_eq!(la, report.latency);
    }

    #[test]
    fn conv_cycles_scale_linearly_with_area() {
        let cfg = SimConfig::default();
        let cycles = |w: usize| {
            let text =
                format!("node c kind=conv3x3s1 cin=12 cout=12 h=16 w={w} algorithm=fast-dense\n");
            let g = parse_graph(&text).unwrap();
            frame_latency_estimate(&g, &cfg).unwrap().cycles
        };
        let fill = cfg.scu.preu_fill + cfg.scu.postu_fill;
        // Doubling the spatial area doubles compute cycles (net of the
        // constant pipeline fill).
        assert_eq!(cycles(64) - fill, 2 * (cycles(32) - fill));
    }

    #[test]
    fn graph_trace_csv_has_chain_column() {
        let text = "node c1 kind=conv3x3s1 cin=2 cout=4 h=12 w=12\n\
                    node c2 kind=conv3x3s1 cin=4 cout=4 h=12 w=12\n\
                    edge c1 c2\n";
        let g = parse_graph(text).unwrap();
        let report = simulate_graph(&g, &SimConfig::default()).unwrap();
        let csv = graph_trace_csv(&report);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("chain,cycle,bank,state,feature,row"));
        let first = lines.next().unwrap();
        assert!(first.starts_with("c1,"), "first row: {first}");
    }
}
