//! Network graphs: undirected links between nodes, per-node antenna counts and
//! a reference node whose oscillators define zero offset.
//!
//! Graphs produced by the generators and by the harness are always connected.
//! [`NetworkGraph::new`] accepts disconnected edge sets so that connectivity
//! itself can be inspected and tested.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed;

pub type NodeId = usize;

/// Resampling budget for [`NetworkGraph::random_geometric`].
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    antennas: Vec<usize>,
    /// Undirected edges `(a, b)` with `a < b`, ascending.
    edges: Vec<(NodeId, NodeId)>,
    adjacency: Vec<Vec<NodeId>>,
    reference: NodeId,
    positions: Option<Vec<[f64; 2]>>,
}

impl NetworkGraph {
    pub fn new<I>(antennas: Vec<usize>, edges: I, reference: NodeId) -> Result<Self>
    where
        I: IntoIterator<Item = (NodeId, NodeId)>,
    {
        let k = antennas.len();
        if k == 0 {
            return Err(Error::InvalidGraph("graph has no nodes".into()));
        }
        if let Some(i) = antennas.iter().position(|&n| n == 0) {
            return Err(Error::InvalidGraph(format!("node {} has no antennas", i + 1)));
        }
        if reference >= k {
            return Err(Error::UnknownNode(reference));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= k {
                return Err(Error::UnknownNode(a));
            }
            if b >= k {
                return Err(Error::UnknownNode(b));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop at node {}", a + 1)));
            }
            if !set.insert((a.min(b), a.max(b))) {
                return Err(Error::InvalidGraph(format!(
                    "duplicate edge {{{}, {}}}",
                    a + 1,
                    b + 1
                )));
            }
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut adjacency = vec![Vec::new(); k];
        for &(a, b) in &edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }
        Ok(Self {
            antennas,
            edges,
            adjacency,
            reference,
            positions: None,
        })
    }

    pub fn with_positions(mut self, positions: Vec<[f64; 2]>) -> Result<Self> {
        if positions.len() != self.num_nodes() {
            return Err(Error::DimensionMismatch {
                expected: self.num_nodes(),
                found: positions.len(),
            });
        }
        self.positions = Some(positions);
        Ok(self)
    }

    pub fn complete(antennas: Vec<usize>) -> Self {
        let k = antennas.len();
        let edges = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b)));
        Self::new(antennas, edges, 0).expect("complete graph is valid")
    }

    pub fn path(antennas: Vec<usize>) -> Self {
        let k = antennas.len();
        Self::new(antennas, (1..k).map(|b| (b - 1, b)), 0).expect("path graph is valid")
    }

    /// Star centred on node 0.
    pub fn star(antennas: Vec<usize>) -> Self {
        let k = antennas.len();
        Self::new(antennas, (1..k).map(|b| (0, b)), 0).expect("star graph is valid")
    }

    /// `K` nodes placed uniformly in `[0, side]²`, linked when within
    /// `comm_range`. Placements are redrawn from the same seeded stream until
    /// the graph is connected.
    pub fn random_geometric(
        antennas: Vec<usize>,
        side: f64,
        comm_range: f64,
        seed: u64,
    ) -> Result<Self> {
        let k = antennas.len();
        if k < 2 {
            return Err(Error::InvalidInput("random geometric graph needs K >= 2".into()));
        }
        if !(side > 0.0) || !(comm_range > 0.0) {
            return Err(Error::InvalidInput(
                "side and communication range must be positive".into(),
            ));
        }
        let mut rng = seed::rng_from(seed);
        let range_sq = comm_range * comm_range;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let positions: Vec<[f64; 2]> = (0..k)
                .map(|_| [rng.random::<f64>() * side, rng.random::<f64>() * side])
                .collect();
            let mut edges = Vec::new();
            for a in 0..k {
                for b in a + 1..k {
                    let dx = positions[a][0] - positions[b][0];
                    let dy = positions[a][1] - positions[b][1];
                    if dx * dx + dy * dy <= range_sq {
                        edges.push((a, b));
                    }
                }
            }
            let g = Self::new(antennas.clone(), edges, 0)?;
            if g.is_connected() {
                return g.with_positions(positions);
            }
        }
        Err(Error::GenerationFailed {
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })
    }

    /// Uniformly-labelled random recursive tree.
    pub fn random_tree(antennas: Vec<usize>, seed: u64) -> Result<Self> {
        let k = antennas.len();
        let mut rng = seed::rng_from(seed);
        let mut labels: Vec<NodeId> = (0..k).collect();
        for i in (1..k).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        let edges: Vec<_> = (1..k)
            .map(|i| (labels[rng.random_range(0..i)], labels[i]))
            .collect();
        Self::new(antennas, edges, 0)
    }

    pub fn num_nodes(&self) -> usize {
        self.antennas.len()
    }

    pub fn reference(&self) -> NodeId {
        self.reference
    }

    pub fn antennas(&self, node: NodeId) -> usize {
        self.antennas[node]
    }

    pub fn antenna_counts(&self) -> &[usize] {
        &self.antennas
    }

    pub fn max_antennas(&self) -> usize {
        self.antennas.iter().copied().max().unwrap_or(0)
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn positions(&self) -> Option<&[[f64; 2]]> {
        self.positions.as_deref()
    }

    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        self.edges.binary_search(&(a.min(b), a.max(b))).is_ok()
    }

    pub fn neighbors(&self, node: NodeId) -> Result<&[NodeId]> {
        self.adjacency
            .get(node)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownNode(node))
    }

    pub fn degree(&self, node: NodeId) -> usize {
        self.adjacency[node].len()
    }

    /// Breadth-first hop counts from `source`; `None` for unreachable nodes.
    pub fn hop_distances(&self, source: NodeId) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.num_nodes()];
        let mut queue = VecDeque::new();
        dist[source] = Some(0);
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for &v in &self.adjacency[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        self.hop_distances(0).iter().all(Option::is_some)
    }

    /// Longest shortest path; `None` when disconnected.
    pub fn diameter(&self) -> Option<usize> {
        (0..self.num_nodes())
            .map(|s| {
                self.hop_distances(s)
                    .into_iter()
                    .try_fold(0, |m, d| d.map(|d| m.max(d)))
            })
            .try_fold(0, |m, e| e.map(|e| m.max(e)))
    }

    /// Renders the edge-list text format (1-based ids).
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{} {}\n", self.num_nodes(), self.reference + 1);
        if let Some(pos) = &self.positions {
            for (i, p) in pos.iter().enumerate() {
                let _ = writeln!(out, "# pos {} {} {}", i + 1, p[0], p[1]);
            }
        }
        for &(a, b) in &self.edges {
            let _ = writeln!(out, "{} {}", a + 1, b + 1);
        }
        out
    }
}

/// Parsed edge-list file: first line `K R`, then one `i j` edge per line with
/// 1-based ids, optional `# pos i x y` lines, other `#` lines ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeList {
    pub num_nodes: usize,
    pub reference: NodeId,
    pub edges: Vec<(NodeId, NodeId)>,
    pub positions: Option<Vec<[f64; 2]>>,
}

impl EdgeList {
    pub fn parse(text: &str) -> Result<Self> {
        let parse_err = |line: usize, msg: &str| Error::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut header: Option<(usize, usize)> = None;
        let mut edges = Vec::new();
        let mut pos: Vec<(usize, [f64; 2])> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let f: Vec<&str> = comment.split_whitespace().collect();
                if f.first() == Some(&"pos") {
                    if f.len() != 4 {
                        return Err(parse_err(line_no, "expected '# pos i x y'"));
                    }
                    let i: usize = f[1].parse().map_err(|_| parse_err(line_no, "bad node id"))?;
                    let x: f64 = f[2].parse().map_err(|_| parse_err(line_no, "bad x"))?;
                    let y: f64 = f[3].parse().map_err(|_| parse_err(line_no, "bad y"))?;
                    pos.push((i, [x, y]));
                }
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 2 {
                return Err(parse_err(line_no, "expected two integers"));
            }
            let a: usize = f[0].parse().map_err(|_| parse_err(line_no, "bad integer"))?;
            let b: usize = f[1].parse().map_err(|_| parse_err(line_no, "bad integer"))?;
            match header {
                None => {
                    if a == 0 || b == 0 || b > a {
                        return Err(parse_err(line_no, "header must be 'K R' with 1 <= R <= K"));
                    }
                    header = Some((a, b));
                }
                Some((k, _)) => {
                    if a == 0 || b == 0 || a > k || b > k {
                        return Err(parse_err(line_no, "node id out of range"));
                    }
                    edges.push((a - 1, b - 1));
                }
            }
        }
        let (num_nodes, reference) = header.ok_or_else(|| parse_err(1, "missing 'K R' header"))?;
        let positions = if pos.is_empty() {
            None
        } else {
            let mut out = vec![None; num_nodes];
            for (i, p) in pos {
                if i == 0 || i > num_nodes {
                    return Err(Error::UnknownNode(i));
                }
                out[i - 1] = Some(p);
            }
            Some(
                out.into_iter()
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| Error::InvalidGraph("positions given for only some nodes".into()))?,
            )
        };
        Ok(Self {
            num_nodes,
            reference: reference - 1,
            edges,
            positions,
        })
    }

    /// Builds the graph with the given per-node antenna counts.
    pub fn into_graph(self, antennas: Vec<usize>) -> Result<NetworkGraph> {
        if antennas.len() != self.num_nodes {
            return Err(Error::DimensionMismatch {
                expected: self.num_nodes,
                found: antennas.len(),
            });
        }
        let g = NetworkGraph::new(antennas, self.edges, self.reference)?;
        match self.positions {
            Some(p) => g.with_positions(p),
            None => Ok(g),
        }
    }
}
