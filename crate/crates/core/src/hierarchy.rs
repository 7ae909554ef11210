//! Class taxonomy as a rooted DAG.
//!
//! Edges are `(child, parent)` pairs where the parent is the more abstract
//! concept. After loading, the graph is immutable and every query is a table
//! lookup: depth (BFS distance from the root, root = 0), the shortest
//! ancestor path from the root, sibling sets and per-depth inventories.
//!
//! When several nodes have no parent and no root is declared, a synthetic
//! root named [`SYNTHETIC_ROOT`] is appended with an edge to each of them.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;

use log::warn;

use crate::error::{Error, Result};

pub const SYNTHETIC_ROOT: &str = "__root__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub declared_root: Option<String>,
    /// Drop nodes unreachable from the root instead of failing.
    pub prune_unreachable: bool,
    /// Assign ids from sorted names rather than first appearance.
    pub stable_ids: bool,
}

#[derive(Debug, Clone)]
pub struct HierarchyDag {
    names: Vec<String>,
    index: HashMap<String, NodeId>,
    root: NodeId,
    synthetic_root: bool,
    parents: Vec<Vec<NodeId>>,
    children: Vec<Vec<NodeId>>,
    depth: Vec<usize>,
    paths: Vec<Vec<NodeId>>,
    siblings: Vec<Vec<NodeId>>,
    by_depth: Vec<Vec<NodeId>>,
    pruned: Vec<String>,
}

impl HierarchyDag {
    /// Builds and validates a hierarchy from `(child, parent)` name pairs.
    pub fn load<S: AsRef<str>>(edges: &[(S, S)], opts: &LoadOptions) -> Result<Self> {
        let edges: Vec<(&str, &str)> = edges
            .iter()
            .map(|(c, p)| (c.as_ref(), p.as_ref()))
            .collect();
        validate_edges(&edges)?;

        let mut names: Vec<&str> = Vec::new();
        {
            let mut seen = HashSet::new();
            for &(c, p) in &edges {
                for n in [c, p] {
                    if seen.insert(n) {
                        names.push(n);
                    }
                }
            }
        }
        if opts.stable_ids {
            names.sort_unstable();
        }
        let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let n = names.len();
        let mut parents = vec![Vec::new(); n];
        for &(c, p) in &edges {
            parents[index[c]].push(index[p]);
        }
        for ps in &mut parents {
            ps.sort_unstable();
        }

        if let Some(cycle) = find_cycle(&parents) {
            let witness = cycle
                .into_iter()
                .map(|(c, p)| (names[c].to_string(), names[p].to_string()))
                .collect();
            return Err(Error::CycleDetected(witness));
        }

        let mut names: Vec<String> = names.into_iter().map(str::to_string).collect();
        let (root, synthetic_root) = match &opts.declared_root {
            Some(r) => {
                let id = *index
                    .get(r.as_str())
                    .ok_or_else(|| Error::UnknownNode(r.clone()))?;
                if !parents[id].is_empty() {
                    return Err(Error::RootHasParents(r.clone()));
                }
                (id, false)
            }
            None => {
                let sources: Vec<usize> = (0..n).filter(|&i| parents[i].is_empty()).collect();
                if sources.len() == 1 {
                    (sources[0], false)
                } else {
                    let mut root_name = SYNTHETIC_ROOT.to_string();
                    let mut k = 1;
                    while index.contains_key(root_name.as_str()) {
                        root_name = format!("{SYNTHETIC_ROOT}{k}");
                        k += 1;
                    }
                    names.push(root_name);
                    parents.push(Vec::new());
                    for s in sources {
                        parents[s].push(n);
                    }
                    (n, true)
                }
            }
        };

        let n = names.len();
        let mut children = vec![Vec::new(); n];
        for (c, ps) in parents.iter().enumerate() {
            for &p in ps {
                children[p].push(c);
            }
        }
        let depth = bfs_depths(root, &children);
        let unreachable: Vec<usize> = (0..n).filter(|&i| depth[i].is_none()).collect();
        if !unreachable.is_empty() {
            let dropped: Vec<String> = unreachable.iter().map(|&i| names[i].clone()).collect();
            if !opts.prune_unreachable {
                return Err(Error::UnreachableNodes(dropped));
            }
            warn!(
                "pruning {} node(s) unreachable from root: {}",
                dropped.len(),
                dropped.join(", ")
            );
            let drop: HashSet<&str> = dropped.iter().map(String::as_str).collect();
            let kept: Vec<(&str, &str)> = edges
                .iter()
                .copied()
                .filter(|(c, p)| !drop.contains(c) && !drop.contains(p))
                .collect();
            let mut inner = opts.clone();
            inner.prune_unreachable = false;
            let mut dag = Self::load(&kept, &inner)?;
            dag.pruned = dropped;
            return Ok(dag);
        }
        let depth: Vec<usize> = depth.into_iter().map(Option::unwrap).collect();

        // Shortest paths, processed in depth order so every parent is done first.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (depth[i], i));
        let mut paths: Vec<Vec<NodeId>> = vec![Vec::new(); n];
        for &c in &order {
            if c == root {
                continue;
            }
            let mut best: Option<Vec<NodeId>> = None;
            for &p in &parents[c] {
                if depth[p] + 1 != depth[c] {
                    continue;
                }
                let mut cand = paths[p].clone();
                cand.push(NodeId(p));
                if best.as_ref().is_none_or(|b| cand < *b) {
                    best = Some(cand);
                }
            }
            paths[c] = best.expect("reachable node has a parent one level up");
        }

        let mut siblings = vec![Vec::new(); n];
        for (c, sib) in siblings.iter_mut().enumerate() {
            let set: BTreeSet<usize> = parents[c]
                .iter()
                .flat_map(|&p| children[p].iter().copied())
                .filter(|&x| x != c)
                .collect();
            *sib = set.into_iter().map(NodeId).collect();
        }

        let max_depth = depth.iter().copied().max().unwrap_or(0);
        let mut by_depth = vec![Vec::new(); max_depth + 1];
        for &c in &order {
            by_depth[depth[c]].push(NodeId(c));
        }

        let to_ids = |v: Vec<Vec<usize>>| -> Vec<Vec<NodeId>> {
            v.into_iter()
                .map(|xs| xs.into_iter().map(NodeId).collect())
                .collect()
        };
        let index = names
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), NodeId(i)))
            .collect();
        Ok(Self {
            names,
            index,
            root: NodeId(root),
            synthetic_root,
            parents: to_ids(parents),
            children: to_ids(children),
            depth,
            paths,
            siblings,
            by_depth,
            pruned: Vec::new(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn edge_count(&self) -> usize {
        self.parents.iter().map(Vec::len).sum()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn has_synthetic_root(&self) -> bool {
        self.synthetic_root
    }

    /// Names of nodes removed by `prune_unreachable`.
    pub fn pruned(&self) -> &[String] {
        &self.pruned
    }

    pub fn max_depth(&self) -> usize {
        self.by_depth.len() - 1
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.names.len()).map(NodeId)
    }

    pub fn contains(&self, c: NodeId) -> bool {
        c.0 < self.names.len()
    }

    fn check(&self, c: NodeId) -> Result<usize> {
        if self.contains(c) {
            Ok(c.0)
        } else {
            Err(Error::UnknownNode(c.to_string()))
        }
    }

    pub fn name(&self, c: NodeId) -> &str {
        &self.names[c.0]
    }

    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    pub fn depth(&self, c: NodeId) -> usize {
        self.depth[c.0]
    }

    pub fn parents(&self, c: NodeId) -> &[NodeId] {
        &self.parents[c.0]
    }

    pub fn children(&self, c: NodeId) -> &[NodeId] {
        &self.children[c.0]
    }

    pub fn is_leaf(&self, c: NodeId) -> bool {
        self.children[c.0].is_empty()
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.nodes().filter(|&c| self.is_leaf(c)).collect()
    }

    /// Shortest path from the root to `c`: root included, `c` excluded.
    /// Equal-length paths are resolved to the lexicographically smallest id
    /// sequence.
    pub fn ancestor_path(&self, c: NodeId) -> Result<&[NodeId]> {
        Ok(&self.paths[self.check(c)?])
    }

    /// Root-first path ending at `c` itself; entry `i` sits at depth `i`.
    pub fn true_path(&self, c: NodeId) -> Result<Vec<NodeId>> {
        let mut p = self.ancestor_path(c)?.to_vec();
        p.push(c);
        Ok(p)
    }

    /// Nodes other than `c` that share at least one parent with it, ascending.
    pub fn siblings(&self, c: NodeId) -> Result<&[NodeId]> {
        Ok(&self.siblings[self.check(c)?])
    }

    /// Nodes at exactly depth `l`, ascending.
    pub fn nodes_at_depth(&self, l: usize) -> Result<&[NodeId]> {
        self.by_depth
            .get(l)
            .map(Vec::as_slice)
            .ok_or(Error::DepthOutOfRange {
                depth: l,
                max: self.max_depth(),
            })
    }

    /// Class count per depth `1..=max_depth`.
    pub fn class_counts(&self) -> Vec<usize> {
        self.by_depth[1..].iter().map(Vec::len).collect()
    }

    /// All `(child, parent)` edges by name, in id order.
    pub fn edges(&self) -> Vec<(&str, &str)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for c in self.nodes() {
            for &p in self.parents(c) {
                out.push((self.name(c), self.name(p)));
            }
        }
        out
    }
}

fn validate_edges(edges: &[(&str, &str)]) -> Result<()> {
    if edges.is_empty() {
        return Err(Error::EmptyEdgeList);
    }
    let mut seen = HashSet::with_capacity(edges.len());
    for (i, &(c, p)) in edges.iter().enumerate() {
        if c.is_empty() || p.is_empty() {
            return Err(Error::EmptyName { line: i + 1 });
        }
        if c == p {
            return Err(Error::SelfEdge(c.to_string()));
        }
        if !seen.insert((c, p)) {
            return Err(Error::DuplicateEdge {
                child: c.to_string(),
                parent: p.to_string(),
            });
        }
    }
    Ok(())
}

/// Iterative DFS along child → parent links. Returns the edges of the first
/// cycle found, starting from the lowest-id node on it.
fn find_cycle(parents: &[Vec<usize>]) -> Option<Vec<(usize, usize)>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        White,
        Grey,
        Black,
    }
    let n = parents.len();
    let mut mark = vec![Mark::White; n];
    for start in 0..n {
        if mark[start] != Mark::White {
            continue;
        }
        let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
        mark[start] = Mark::Grey;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if *next < parents[node].len() {
                let p = parents[node][*next];
                *next += 1;
                match mark[p] {
                    Mark::White => {
                        mark[p] = Mark::Grey;
                        stack.push((p, 0));
                    }
                    Mark::Grey => {
                        let pos = stack.iter().position(|&(x, _)| x == p).unwrap();
                        let cyc: Vec<usize> = stack[pos..].iter().map(|&(x, _)| x).collect();
                        let mut edges: Vec<(usize, usize)> = cyc
                            .iter()
                            .enumerate()
                            .map(|(i, &x)| (x, cyc[(i + 1) % cyc.len()]))
                            .collect();
                        let min = edges
                            .iter()
                            .enumerate()
                            .min_by_key(|(_, e)| e.0)
                            .map(|(i, _)| i)
                            .unwrap();
                        edges.rotate_left(min);
                        return Some(edges);
                    }
                    Mark::Black => {}
                }
            } else {
                mark[node] = Mark::Black;
                stack.pop();
            }
        }
    }
    None
}

fn bfs_depths(root: usize, children: &[Vec<usize>]) -> Vec<Option<usize>> {
    let mut depth = vec![None; children.len()];
    depth[root] = Some(0);
    let mut queue = VecDeque::from([root]);
    while let Some(x) = queue.pop_front() {
        let d = depth[x].unwrap();
        for &c in &children[x] {
            if depth[c].is_none() {
                depth[c] = Some(d + 1);
                queue.push_back(c);
            }
        }
    }
    depth
}

/// Disjoint seen / unseen class sets. Non-root nodes in neither set are
/// image-less concept nodes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassSplit {
    pub seen: BTreeSet<NodeId>,
    pub unseen: BTreeSet<NodeId>,
}

impl ClassSplit {
    pub fn new(
        dag: &HierarchyDag,
        seen: BTreeSet<NodeId>,
        unseen: BTreeSet<NodeId>,
    ) -> Result<Self> {
        if let Some(x) = seen.intersection(&unseen).next() {
            return Err(Error::InvalidSplit(format!(
                "'{}' is both seen and unseen",
                dag.name(*x)
            )));
        }
        for &c in seen.iter().chain(&unseen) {
            if !dag.contains(c) {
                return Err(Error::UnknownNode(c.to_string()));
            }
            if c == dag.root() {
                return Err(Error::InvalidSplit("root cannot be a class".into()));
            }
        }
        Ok(Self { seen, unseen })
    }

    /// Non-root nodes assigned to neither set.
    pub fn concepts(&self, dag: &HierarchyDag) -> BTreeSet<NodeId> {
        dag.nodes()
            .filter(|&c| c != dag.root() && !self.seen.contains(&c) && !self.unseen.contains(&c))
            .collect()
    }
}
