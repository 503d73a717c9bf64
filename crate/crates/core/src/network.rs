//! Time-varying undirected networks with opaque agent attributes.
//!
//! A [`NetworkTimeline`] is a list of [`Segment`]s, each holding a constant
//! graph over the potential node set `0..n_bar`. Node indices are zero-based
//! in the library; configs and CSV output use one-based agent ids.
//!
//! Every segment keeps exactly one component of interest: the connected
//! component that contains the leader. Nodes that drop out of it (orphans,
//! the far side of a split) are marked as left and their edges discarded.

use std::collections::{BTreeSet, HashMap, VecDeque};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finite attribute universe with a bijection onto `1..=len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeTable {
    universe: Vec<String>,
    index: HashMap<String, usize>,
}

impl AttributeTable {
    /// The position of each label in `universe` (plus one) defines the bijection.
    pub fn new(universe: Vec<String>) -> Result<Self> {
        if universe.is_empty() {
            return Err(Error::InvalidAttributes("empty universe".into()));
        }
        let mut index = HashMap::with_capacity(universe.len());
        for (i, label) in universe.iter().enumerate() {
            if index.insert(label.clone(), i + 1).is_some() {
                return Err(Error::InvalidAttributes(format!("duplicate label `{label}`")));
            }
        }
        Ok(Self { universe, index })
    }

    /// Universe made of the distinct labels in order of first appearance.
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut universe = Vec::new();
        for l in labels {
            if seen.insert(l.as_ref().to_string()) {
                universe.push(l.as_ref().to_string());
            }
        }
        Self::new(universe)
    }

    /// `{1, ..., n}` as decimal labels with the identity bijection.
    pub fn numeric(n: usize) -> Result<Self> {
        Self::new((1..=n).map(|i| i.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.universe.len()
    }

    pub fn is_empty(&self) -> bool {
        self.universe.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.universe
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index.contains_key(label)
    }

    /// l(a), one-based.
    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.index
            .get(label)
            .copied()
            .ok_or_else(|| Error::UnknownAttribute(label.to_string()))
    }

    /// l⁻¹(i) for one-based `i`.
    pub fn label_of(&self, index: usize) -> Result<&str> {
        if index == 0 || index > self.universe.len() {
            return Err(Error::UnknownAttribute(format!("#{index}")));
        }
        Ok(&self.universe[index - 1])
    }

    /// Same universe under a different bijection: `order[i]` is the old
    /// one-based index that becomes new index `i + 1`.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(Error::InvalidAttributes("permutation length mismatch".into()));
        }
        let universe = order
            .iter()
            .map(|&i| self.label_of(i).map(str::to_string))
            .collect::<Result<Vec<_>>>()?;
        Self::new(universe)
    }
}

/// What happens when the leader (the damped agent) leaves.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeaderPolicy {
    /// Leader departure is an inadmissible change.
    #[default]
    RequireActive,
    /// The lowest-indexed remaining active node takes over.
    LowestActiveId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EventKind {
    EdgeAdd { a: usize, b: usize },
    EdgeRemove { a: usize, b: usize },
    NodeJoin {
        node: usize,
        neighbors: Vec<usize>,
        attribute: String,
        init: Option<f64>,
    },
    NodeLeave { node: usize },
    AttributeChange { node: usize, attribute: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioEvent {
    pub time: f64,
    pub kind: EventKind,
    /// Admissible interval for a joining node's local initialization.
    pub init_box: Option<(f64, f64)>,
}

impl ScenarioEvent {
    pub fn new(time: f64, kind: EventKind) -> Self {
        Self {
            time,
            kind,
            init_box: None,
        }
    }

    pub fn with_init_box(mut self, lo: f64, hi: f64) -> Self {
        self.init_box = Some((lo, hi));
        self
    }
}

/// A constant-graph interval of the timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: f64,
    /// Nodes in the component of interest.
    pub active: BTreeSet<usize>,
    /// Undirected edges stored as `(min, max)`.
    pub edges: BTreeSet<(usize, usize)>,
    pub leader: usize,
    /// Attribute label per potential node; `None` for nodes never seen.
    pub attrs: Vec<Option<String>>,
    /// Nodes that joined at `start`, with their local initial value.
    pub joins: Vec<(usize, Option<f64>)>,
    /// Nodes that left at `start`.
    pub left: Vec<usize>,
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

impl Segment {
    pub fn n(&self) -> usize {
        self.active.len()
    }

    /// Active nodes in increasing order. Row `r` of [`Segment::laplacian`]
    /// corresponds to `nodes()[r]`.
    pub fn nodes(&self) -> Vec<usize> {
        self.active.iter().copied().collect()
    }

    pub fn neighbors(&self, node: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == node {
                    Some(b)
                } else if b == node {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == node || b == node).count()
    }

    pub fn max_degree(&self) -> usize {
        self.active.iter().map(|&i| self.degree(i)).max().unwrap_or(0)
    }

    /// Adjacency lists over the full potential node set.
    pub fn adjacency(&self, n_bar: usize) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); n_bar];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Laplacian of the component of interest in [`Segment::nodes`] order.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let nodes = self.nodes();
        let pos: HashMap<usize, usize> = nodes.iter().enumerate().map(|(r, &v)| (v, r)).collect();
        let mut l = DMatrix::zeros(nodes.len(), nodes.len());
        for &(a, b) in &self.edges {
            let (i, j) = (pos[&a], pos[&b]);
            l[(i, j)] -= 1.0;
            l[(j, i)] -= 1.0;
            l[(i, i)] += 1.0;
            l[(j, j)] += 1.0;
        }
        l
    }

    pub fn leader_row(&self) -> usize {
        self.active.iter().position(|&v| v == self.leader).unwrap_or(0)
    }

    pub fn attribute(&self, node: usize) -> Option<&str> {
        self.attrs.get(node).and_then(|a| a.as_deref())
    }

    /// Labels of the active nodes, in [`Segment::nodes`] order.
    pub fn active_labels(&self) -> Vec<&str> {
        self.active
            .iter()
            .map(|&i| self.attribute(i).unwrap_or_default())
            .collect()
    }

    /// Connected component of `root` using only edges among `active`.
    fn component_of(&self, root: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        if !self.active.contains(&root) {
            return seen;
        }
        let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
        for &(a, b) in &self.edges {
            adj.entry(a).or_default().push(b);
            adj.entry(b).or_default().push(a);
        }
        let mut queue = VecDeque::from([root]);
        seen.insert(root);
        while let Some(v) = queue.pop_front() {
            for &w in adj.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
                if self.active.contains(&w) && seen.insert(w) {
                    queue.push_back(w);
                }
            }
        }
        seen
    }

    /// True when the active set forms a single connected component.
    pub fn is_connected(&self) -> bool {
        self.component_of(self.leader).len() == self.active.len()
    }

    /// Drop everything outside the leader's component.
    fn retain_leader_component(&mut self) {
        let keep = self.component_of(self.leader);
        let gone: Vec<usize> = self.active.difference(&keep).copied().collect();
        for v in gone {
            self.active.remove(&v);
            self.left.push(v);
        }
        let active = &self.active;
        self.edges.retain(|(a, b)| active.contains(a) && active.contains(b));
    }
}

/// Piecewise-constant network over the potential node set `0..n_bar`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTimeline {
    pub n_bar: usize,
    pub segments: Vec<Segment>,
    pub events: Vec<ScenarioEvent>,
    pub leader_policy: LeaderPolicy,
}

impl NetworkTimeline {
    /// A single-segment timeline on nodes `0..n` from an explicit edge list.
    /// The leader is node 0 and the graph must be connected.
    pub fn from_edges<S: AsRef<str>>(
        n: usize,
        edges: &[(usize, usize)],
        attrs: &[S],
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidNetwork("network needs at least one node".into()));
        }
        if attrs.len() != n {
            return Err(Error::InvalidNetwork(format!(
                "{} attributes for {n} nodes",
                attrs.len()
            )));
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidNetwork(format!("edge ({a},{b}) outside 0..{n}")));
            }
            if a == b {
                return Err(Error::InvalidNetwork(format!("self-loop at node {a}")));
            }
            set.insert(edge_key(a, b));
        }
        let seg = Segment {
            start: 0.0,
            active: (0..n).collect(),
            edges: set,
            leader: 0,
            attrs: attrs.iter().map(|a| Some(a.as_ref().to_string())).collect(),
            joins: Vec::new(),
            left: Vec::new(),
        };
        if !seg.is_connected() {
            return Err(Error::InvalidNetwork("initial graph is not connected".into()));
        }
        Ok(Self {
            n_bar: n,
            segments: vec![seg],
            events: Vec::new(),
            leader_policy: LeaderPolicy::default(),
        })
    }

    pub fn ring<S: AsRef<str>>(n: usize, attrs: &[S]) -> Result<Self> {
        if n < 3 {
            return Err(Error::DegenerateRing(n));
        }
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Self::from_edges(n, &edges, attrs)
    }

    pub fn path<S: AsRef<str>>(n: usize, attrs: &[S]) -> Result<Self> {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::from_edges(n, &edges, attrs)
    }

    pub fn complete<S: AsRef<str>>(n: usize, attrs: &[S]) -> Result<Self> {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                edges.push((i, j));
            }
        }
        Self::from_edges(n, &edges, attrs)
    }

    /// Random spanning tree (each node attaches to a uniformly chosen earlier
    /// node) plus independent extra edges with probability `extra_edge_prob`.
    pub fn random_connected<S: AsRef<str>>(
        n: usize,
        extra_edge_prob: f64,
        seed: u64,
        attrs: &[S],
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let edges = random_connected_edges(n, extra_edge_prob, &mut rng);
        Self::from_edges(n, &edges, attrs)
    }

    /// Raise the potential node bound above the initial node count.
    pub fn with_n_bar(mut self, n_bar: usize) -> Result<Self> {
        let current = self.segments[0].n();
        if n_bar < current {
            return Err(Error::InvalidNetwork(format!(
                "n_bar = {n_bar} is below the node count {current}"
            )));
        }
        self.n_bar = n_bar;
        for seg in &mut self.segments {
            seg.attrs.resize(n_bar, None);
        }
        Ok(self)
    }

    pub fn with_leader_policy(mut self, policy: LeaderPolicy) -> Self {
        self.leader_policy = policy;
        self
    }

    pub fn initial(&self) -> &Segment {
        &self.segments[0]
    }

    pub fn last(&self) -> &Segment {
        self.segments.last().expect("timeline always has a segment")
    }

    /// End time of segment `i` (the next segment's start), if any.
    pub fn segment_end(&self, i: usize) -> Option<f64> {
        self.segments.get(i + 1).map(|s| s.start)
    }

    pub fn segment_at(&self, t: f64) -> &Segment {
        self.segments
            .iter()
            .rev()
            .find(|s| s.start <= t)
            .unwrap_or(&self.segments[0])
    }

    pub fn attribute_at(&self, node: usize, t: f64) -> Option<&str> {
        let seg = self.segment_at(t);
        if seg.active.contains(&node) {
            seg.attribute(node)
        } else {
            None
        }
    }

    /// Append the segment produced by `ev`. The timeline itself is not modified.
    pub fn apply_event(&self, ev: &ScenarioEvent, table: &AttributeTable) -> Result<Self> {
        let time = ev.time;
        let reject = |reason: String| Error::Inadmissible { time, reason };
        let prev = self.last();
        if !time.is_finite() || time <= prev.start {
            return Err(reject(format!(
                "event time must be after the last change at t={}",
                prev.start
            )));
        }
        let in_range = |v: usize| -> Result<()> {
            if v >= self.n_bar {
                Err(reject(format!("node {} exceeds n_bar = {}", v + 1, self.n_bar)))
            } else {
                Ok(())
            }
        };

        let mut seg = prev.clone();
        seg.start = time;
        seg.joins.clear();
        seg.left.clear();

        match &ev.kind {
            EventKind::EdgeAdd { a, b } => {
                in_range(*a)?;
                in_range(*b)?;
                if a == b {
                    return Err(reject(format!("self-loop at node {}", a + 1)));
                }
                for v in [a, b] {
                    if !seg.active.contains(v) {
                        return Err(reject(format!("edge incident to inactive node {}", v + 1)));
                    }
                }
                if !seg.edges.insert(edge_key(*a, *b)) {
                    return Err(reject(format!("edge ({},{}) already present", a + 1, b + 1)));
                }
            }
            EventKind::EdgeRemove { a, b } => {
                if !seg.edges.remove(&edge_key(*a, *b)) {
                    return Err(reject(format!("edge ({},{}) not present", a + 1, b + 1)));
                }
            }
            EventKind::NodeJoin {
                node,
                neighbors,
                attribute,
                init,
            } => {
                in_range(*node)?;
                if seg.active.contains(node) {
                    return Err(reject(format!("node {} is already active", node + 1)));
                }
                if neighbors.is_empty() {
                    return Err(reject(format!("joining node {} has no neighbors", node + 1)));
                }
                for v in neighbors {
                    if !seg.active.contains(v) {
                        return Err(reject(format!("edge incident to inactive node {}", v + 1)));
                    }
                }
                if !table.contains(attribute) {
                    return Err(Error::UnknownAttribute(attribute.clone()));
                }
                if let (Some(x), Some((lo, hi))) = (init, ev.init_box) {
                    if !(lo..=hi).contains(x) {
                        return Err(reject(format!(
                            "initial state {x} outside the local initialization box [{lo}, {hi}]"
                        )));
                    }
                }
                seg.active.insert(*node);
                for &v in neighbors {
                    seg.edges.insert(edge_key(*node, v));
                }
                seg.attrs[*node] = Some(attribute.clone());
                seg.joins.push((*node, *init));
            }
            EventKind::NodeLeave { node } => {
                if !seg.active.contains(node) {
                    return Err(reject(format!("node {} is not active", node + 1)));
                }
                seg.edges.retain(|&(a, b)| a != *node && b != *node);
            }
            EventKind::AttributeChange { node, attribute } => {
                if !seg.active.contains(node) {
                    return Err(reject(format!("node {} is not active", node + 1)));
                }
                if !table.contains(attribute) {
                    return Err(Error::UnknownAttribute(attribute.clone()));
                }
                seg.attrs[*node] = Some(attribute.clone());
            }
        }

        // An isolated leader has left the network, like any other orphan.
        let leader_gone = seg.degree(seg.leader) == 0 && seg.active.len() > 1
            || matches!(ev.kind, EventKind::NodeLeave { node } if node == seg.leader);
        if leader_gone {
            match self.leader_policy {
                LeaderPolicy::RequireActive => {
                    return Err(reject(format!("leader {} would leave the network", seg.leader + 1)));
                }
                LeaderPolicy::LowestActiveId => {
                    let old = seg.leader;
                    seg.active.remove(&old);
                    seg.left.push(old);
                    seg.leader = *seg
                        .active
                        .iter()
                        .next()
                        .ok_or_else(|| reject("no active node left".into()))?;
                }
            }
        }
        if let EventKind::NodeLeave { node } = ev.kind {
            if seg.active.remove(&node) {
                seg.left.push(node);
            }
        }
        seg.retain_leader_component();
        seg.left.sort_unstable();
        seg.left.dedup();

        let mut next = self.clone();
        next.segments.push(seg);
        next.events.push(ev.clone());
        Ok(next)
    }

    /// Apply events in order.
    pub fn apply_events(&self, events: &[ScenarioEvent], table: &AttributeTable) -> Result<Self> {
        let mut tl = self.clone();
        for ev in events {
            tl = tl.apply_event(ev, table)?;
        }
        Ok(tl)
    }

    pub fn check_dwell(&self, required_dwell: f64) -> DwellReport {
        check_dwell(&self.events, required_dwell)
    }
}

/// Ring on `n` nodes plus the attribute table of its labels.
pub fn build_ring<S: AsRef<str>>(n: usize, attrs: &[S]) -> Result<(NetworkTimeline, AttributeTable)> {
    let timeline = NetworkTimeline::ring(n, attrs)?;
    let table = AttributeTable::from_labels(attrs)?;
    Ok((timeline, table))
}

pub fn random_connected_edges<R: Rng>(n: usize, extra_edge_prob: f64, rng: &mut R) -> Vec<(usize, usize)> {
    let mut edges = BTreeSet::new();
    for v in 1..n {
        let u = rng.random_range(0..v);
        edges.insert((u, v));
    }
    for a in 0..n {
        for b in a + 1..n {
            if !edges.contains(&(a, b)) && rng.random_bool(extra_edge_prob.clamp(0.0, 1.0)) {
                edges.insert((a, b));
            }
        }
    }
    edges.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DwellGap {
    pub from: f64,
    pub to: f64,
    pub gap: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DwellReport {
    pub required: f64,
    pub gaps: Vec<DwellGap>,
}

impl DwellReport {
    pub fn pass(&self) -> bool {
        self.gaps.iter().all(|g| g.pass)
    }
}

/// Flag every consecutive pair of events closer than `required_dwell`.
pub fn check_dwell(events: &[ScenarioEvent], required_dwell: f64) -> DwellReport {
    let gaps = events
        .windows(2)
        .map(|w| {
            let gap = w[1].time - w[0].time;
            DwellGap {
                from: w[0].time,
                to: w[1].time,
                gap,
                pass: gap >= required_dwell,
            }
        })
        .collect();
    DwellReport {
        required: required_dwell,
        gaps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize, v: &str) -> Vec<String> {
        vec![v.to_string(); n]
    }

    #[test]
    fn ring_has_degree_two_everywhere() {
        let tl = NetworkTimeline::ring(40, &labels(40, "a")).unwrap();
        let seg = tl.initial();
        assert_eq!(seg.edges.len(), 40);
        assert!(seg.active.iter().all(|&i| seg.degree(i) == 2));
        assert_eq!(seg.leader, 0);
        let tri = NetworkTimeline::ring(3, &labels(3, "a")).unwrap();
        assert_eq!(tri.initial().edges.len(), 3);
    }

    #[test]
    fn small_ring_is_rejected() {
        assert!(matches!(
            NetworkTimeline::ring(2, &labels(2, "a")),
            Err(Error::DegenerateRing(2))
        ));
    }

    #[test]
    fn bijection_round_trips() {
        let t = AttributeTable::new(vec!["red".into(), "green".into(), "blue".into()]).unwrap();
        for l in t.labels() {
            assert_eq!(t.label_of(t.index_of(l).unwrap()).unwrap(), l);
        }
        assert!(AttributeTable::new(vec!["x".into(), "x".into()]).is_err());
        assert!(matches!(t.index_of("mauve"), Err(Error::UnknownAttribute(_))));
        let r = t.reordered(&[3, 1, 2]).unwrap();
        assert_eq!(r.index_of("blue").unwrap(), 1);
    }

    #[test]
    fn removing_both_ring_edges_orphans_the_node() {
        let table = AttributeTable::numeric(1).unwrap();
        let tl = NetworkTimeline::ring(6, &labels(6, "1")).unwrap();
        let tl = tl
            .apply_event(&ScenarioEvent::new(1.0, EventKind::EdgeRemove { a: 2, b: 3 }), &table)
            .unwrap();
        assert_eq!(tl.last().n(), 6);
        let tl = tl
            .apply_event(&ScenarioEvent::new(2.0, EventKind::EdgeRemove { a: 3, b: 4 }), &table)
            .unwrap();
        let seg = tl.last();
        assert_eq!(seg.n(), 5);
        assert!(!seg.active.contains(&3));
        assert_eq!(seg.left, vec![3]);
        assert!(seg.is_connected());
    }

    #[test]
    fn split_keeps_the_leader_side() {
        let table = AttributeTable::numeric(1).unwrap();
        let tl = NetworkTimeline::ring(8, &labels(8, "1")).unwrap();
        let evs = [
            ScenarioEvent::new(1.0, EventKind::EdgeRemove { a: 2, b: 3 }),
            ScenarioEvent::new(2.0, EventKind::EdgeRemove { a: 6, b: 7 }),
        ];
        let tl = tl.apply_events(&evs, &table).unwrap();
        let seg = tl.last();
        // leader 0 sits on the path 7-0-1-2; nodes 3..=6 left.
        assert_eq!(seg.nodes(), vec![0, 1, 2, 7]);
        assert_eq!(seg.left, vec![3, 4, 5, 6]);
    }

    #[test]
    fn join_outside_box_is_rejected() {
        let table = AttributeTable::numeric(2).unwrap();
        let tl = NetworkTimeline::ring(4, &labels(4, "1")).unwrap().with_n_bar(6).unwrap();
        let join = |init| {
            ScenarioEvent::new(
                1.0,
                EventKind::NodeJoin {
                    node: 4,
                    neighbors: vec![0],
                    attribute: "2".into(),
                    init: Some(init),
                },
            )
            .with_init_box(-0.5, 6.5)
        };
        assert!(matches!(
            tl.apply_event(&join(9.0), &table),
            Err(Error::Inadmissible { .. })
        ));
        let ok = tl.apply_event(&join(3.0), &table).unwrap();
        assert_eq!(ok.last().n(), 5);
        assert_eq!(ok.last().joins, vec![(4, Some(3.0))]);
        assert_eq!(ok.last().attribute(4), Some("2"));
    }

    #[test]
    fn edge_to_inactive_node_is_rejected() {
        let table = AttributeTable::numeric(1).unwrap();
        let tl = NetworkTimeline::ring(4, &labels(4, "1")).unwrap().with_n_bar(5).unwrap();
        let err = tl
            .apply_event(&ScenarioEvent::new(1.0, EventKind::EdgeAdd { a: 0, b: 4 }), &table)
            .unwrap_err();
        assert!(err.to_string().contains("inactive"));
    }

    #[test]
    fn leader_departure_follows_policy() {
        let table = AttributeTable::numeric(1).unwrap();
        let tl = NetworkTimeline::ring(5, &labels(5, "1")).unwrap();
        let ev = ScenarioEvent::new(1.0, EventKind::NodeLeave { node: 0 });
        assert!(tl.apply_event(&ev, &table).is_err());
        let tl = tl.with_leader_policy(LeaderPolicy::LowestActiveId);
        let next = tl.apply_event(&ev, &table).unwrap();
        assert_eq!(next.last().leader, 1);
        assert_eq!(next.last().nodes(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn events_must_move_forward() {
        let table = AttributeTable::numeric(1).unwrap();
        let tl = NetworkTimeline::ring(4, &labels(4, "1")).unwrap();
        let ev = ScenarioEvent::new(0.0, EventKind::EdgeAdd { a: 0, b: 2 });
        assert!(tl.apply_event(&ev, &table).is_err());
    }

    #[test]
    fn dwell_flags_close_events() {
        let mk = |t| ScenarioEvent::new(t, EventKind::NodeLeave { node: 1 });
        assert!(check_dwell(&[mk(0.0), mk(2.0)], 1.56).pass());
        let r = check_dwell(&[mk(0.0), mk(0.5)], 1.56);
        assert!(!r.pass());
        assert!(!r.gaps[0].pass);
        assert!(check_dwell(&[], 1.56).pass());
    }

    #[test]
    fn attribute_lookup_follows_segments() {
        let table = AttributeTable::numeric(3).unwrap();
        let tl = NetworkTimeline::ring(4, &labels(4, "1")).unwrap();
        let tl = tl
            .apply_event(
                &ScenarioEvent::new(
                    3.0,
                    EventKind::AttributeChange {
                        node: 2,
                        attribute: "3".into(),
                    },
                ),
                &table,
            )
            .unwrap();
        assert_eq!(tl.attribute_at(2, 1.0), Some("1"));
        assert_eq!(tl.attribute_at(2, 3.5), Some("3"));
    }
}
