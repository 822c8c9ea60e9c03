//! Network structure: DAG validation, moralization and chromatic partitioning.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// A discrete Bayesian network structure.
///
/// Parents of every variable are kept in ascending index order. That order
/// fixes the CPT row convention used everywhere: the row of a parent
/// configuration is its mixed-radix value with the first (lowest-index)
/// parent as the most significant digit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Network {
    cardinalities: Vec<usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    topo_order: Vec<usize>,
}

impl Network {
    /// Validates `edges` (as `(parent, child)` pairs) and builds the network.
    pub fn build(cardinalities: &[usize], edges: &[(usize, usize)]) -> Result<Self> {
        let n = cardinalities.len();
        for (var, &card) in cardinalities.iter().enumerate() {
            if card < 2 {
                return Err(Error::CardinalityTooSmall { var, card });
            }
            if card > usize::from(u16::MAX) {
                return Err(Error::InvalidConfig(format!(
                    "variable {var} has {card} states; at most {} supported",
                    u16::MAX
                )));
            }
        }
        let mut parent_sets = vec![BTreeSet::new(); n];
        for &(p, c) in edges {
            for idx in [p, c] {
                if idx >= n {
                    return Err(Error::InvalidIndex { index: idx, bound: n });
                }
            }
            if p == c {
                return Err(Error::CycleDetected(p));
            }
            if !parent_sets[c].insert(p) {
                return Err(Error::DuplicateEdge { parent: p, child: c });
            }
        }
        let parents: Vec<Vec<usize>> = parent_sets.into_iter().map(|s| s.into_iter().collect()).collect();
        let mut children = vec![Vec::new(); n];
        for (c, ps) in parents.iter().enumerate() {
            for &p in ps {
                children[p].push(c);
            }
        }

        // Kahn's algorithm, always releasing the smallest ready index.
        let mut indegree: Vec<usize> = parents.iter().map(Vec::len).collect();
        let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&v| indegree[v] == 0).map(Reverse).collect();
        let mut topo_order = Vec::with_capacity(n);
        while let Some(Reverse(v)) = ready.pop() {
            topo_order.push(v);
            for &c in &children[v] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        if topo_order.len() < n {
            let stuck = (0..n).find(|&v| indegree[v] > 0).unwrap_or(0);
            return Err(Error::CycleDetected(stuck));
        }

        Ok(Network { cardinalities: cardinalities.to_vec(), parents, children, topo_order })
    }

    pub fn num_vars(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn cardinality(&self, v: usize) -> usize {
        self.cardinalities[v]
    }

    pub fn parents(&self, v: usize) -> &[usize] {
        &self.parents[v]
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    /// All variables having `v` as a parent, ascending.
    pub fn children_of(&self, v: usize) -> Result<&[usize]> {
        self.children.get(v).map(Vec::as_slice).ok_or(Error::InvalidIndex { index: v, bound: self.num_vars() })
    }

    /// Directed edges as `(parent, child)`, sorted by child then parent.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.parents.iter().enumerate().flat_map(|(c, ps)| ps.iter().map(move |&p| (p, c))).collect()
    }

    /// Number of parent configurations (CPT rows) of `v`.
    pub fn num_rows(&self, v: usize) -> usize {
        self.parents[v].iter().map(|&p| self.cardinalities[p]).product()
    }

    /// Mixed-radix weights of `v`'s parents, aligned with `parents(v)`.
    pub fn parent_strides(&self, v: usize) -> Vec<usize> {
        let ps = &self.parents[v];
        let mut strides = vec![1; ps.len()];
        for j in (0..ps.len().saturating_sub(1)).rev() {
            strides[j] = strides[j + 1] * self.cardinalities[ps[j + 1]];
        }
        strides
    }

    /// CPT row of `v` selected by a complete assignment.
    pub fn row_index(&self, v: usize, assignment: &[u16]) -> usize {
        let mut row = 0;
        for &p in &self.parents[v] {
            row = row * self.cardinalities[p] + usize::from(assignment[p]);
        }
        row
    }

    /// Total number of CPT cells across all variables.
    pub fn num_parameters(&self) -> usize {
        (0..self.num_vars()).map(|v| self.num_rows(v) * self.cardinalities[v]).sum()
    }
}

/// Undirected moral graph of a network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MoralGraph {
    adjacency: Vec<Vec<usize>>,
}

impl MoralGraph {
    /// Builds a graph from undirected edges. Self-loops are dropped and
    /// repeated edges merged.
    pub fn from_edges(num_vars: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut sets = vec![BTreeSet::new(); num_vars];
        for (u, v) in edges {
            for idx in [u, v] {
                if idx >= num_vars {
                    return Err(Error::InvalidIndex { index: idx, bound: num_vars });
                }
            }
            if u != v {
                sets[u].insert(v);
                sets[v].insert(u);
            }
        }
        Ok(MoralGraph { adjacency: sets.into_iter().map(|s| s.into_iter().collect()).collect() })
    }

    pub fn num_vars(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency.get(u).is_some_and(|a| a.binary_search(&v).is_ok())
    }

    /// Each undirected edge once, as `(lo, hi)`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(u, ns)| ns.iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
            .collect()
    }
}

/// Connects co-parents and drops edge orientation.
pub fn moralize(net: &Network) -> MoralGraph {
    let mut edges = net.edges();
    for v in 0..net.num_vars() {
        let ps = net.parents(v);
        for (i, &p) in ps.iter().enumerate() {
            for &q in &ps[i + 1..] {
                edges.push((p, q));
            }
        }
    }
    MoralGraph::from_edges(net.num_vars(), edges).expect("network indices are validated")
}

/// A proper coloring with its color classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Coloring {
    colors: Vec<usize>,
    groups: Vec<Vec<usize>>,
}

impl Coloring {
    pub fn from_colors(colors: Vec<usize>) -> Self {
        let k = colors.iter().map(|c| c + 1).max().unwrap_or(0);
        let mut groups = vec![Vec::new(); k];
        for (v, &c) in colors.iter().enumerate() {
            groups[c].push(v);
        }
        Coloring { colors, groups }
    }

    pub fn num_colors(&self) -> usize {
        self.groups.len()
    }

    pub fn colors(&self) -> &[usize] {
        &self.colors
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn is_proper(&self, g: &MoralGraph) -> bool {
        self.colors.len() == g.num_vars() && g.edges().iter().all(|&(u, v)| self.colors[u] != self.colors[v])
    }

    /// Visits every variable of every unit once, color group by color group.
    ///
    /// Groups run strictly in order; within a group, units are processed in
    /// parallel and each unit visits the group's variables. Variables sharing
    /// a color share no moral edge, so for a proper coloring this equals a
    /// sequential scan in group order.
    pub fn visit<U, F, E>(&self, units: &mut [U], f: F) -> std::result::Result<(), E>
    where
        U: Send,
        E: Send,
        F: Fn(usize, &mut U, usize) -> std::result::Result<(), E> + Sync,
    {
        for group in &self.groups {
            units.par_iter_mut().enumerate().try_for_each(|(i, unit)| group.iter().try_for_each(|&v| f(i, unit, v)))?;
        }
        Ok(())
    }
}

/// Balanced greedy coloring.
///
/// Vertices are taken by decreasing degree (ties by index). Each vertex joins
/// the smallest existing color class not used by a neighbour (ties by color
/// id) and opens a new class only when every existing one is blocked, so at
/// most `max_degree + 1` colors are used.
pub fn color_graph(g: &MoralGraph) -> Coloring {
    let n = g.num_vars();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&v| (Reverse(g.degree(v)), v));

    const UNSET: usize = usize::MAX;
    let mut colors = vec![UNSET; n];
    let mut class_sizes: Vec<usize> = Vec::new();
    let mut blocked: Vec<bool> = Vec::new();
    for v in order {
        blocked.clear();
        blocked.resize(class_sizes.len(), false);
        for &u in g.neighbors(v) {
            if colors[u] != UNSET {
                blocked[colors[u]] = true;
            }
        }
        let choice = (0..class_sizes.len()).filter(|&c| !blocked[c]).min_by_key(|&c| (class_sizes[c], c));
        let c = match choice {
            Some(c) => c,
            None => {
                class_sizes.push(0);
                class_sizes.len() - 1
            }
        };
        colors[v] = c;
        class_sizes[c] += 1;
    }
    Coloring::from_colors(colors)
}
