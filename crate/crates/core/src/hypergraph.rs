//! Cell-oriented hypergraph: one node per cell, one hyperedge per column and
//! per row. Membership is implicit in the index arithmetic.
//!
//! Node `i*d + j` is cell `(i, j)`. Column `j` is hyperedge `j`; row `i` is
//! hyperedge `i + d`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hypergraph {
    n: usize,
    d: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Column(usize),
    Row(usize),
}

impl Hypergraph {
    pub fn new(n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::param("shape", format!("{n}x{d} has a zero dimension")));
        }
        Ok(Hypergraph { n, d })
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.d
    }

    pub fn num_nodes(&self) -> usize {
        self.n * self.d
    }

    pub fn num_edges(&self) -> usize {
        self.n + self.d
    }

    pub fn node(&self, i: usize, j: usize) -> usize {
        i * self.d + j
    }

    pub fn coords(&self, node: usize) -> (usize, usize) {
        (node / self.d, node % self.d)
    }

    pub fn column_edge(&self, j: usize) -> usize {
        j
    }

    pub fn row_edge(&self, i: usize) -> usize {
        i + self.d
    }

    pub fn edge_kind(&self, edge: usize) -> Result<EdgeKind> {
        if edge < self.d {
            Ok(EdgeKind::Column(edge))
        } else if edge < self.num_edges() {
            Ok(EdgeKind::Row(edge - self.d))
        } else {
            Err(Error::Bounds {
                index: edge,
                limit: self.num_edges(),
            })
        }
    }

    /// `(column edge, row edge)` of a node.
    pub fn incident_edges(&self, node: usize) -> Result<(usize, usize)> {
        if node >= self.num_nodes() {
            return Err(Error::Bounds {
                index: node,
                limit: self.num_nodes(),
            });
        }
        let (i, j) = self.coords(node);
        Ok((self.column_edge(j), self.row_edge(i)))
    }

    pub fn members(&self, edge: usize) -> Result<Vec<usize>> {
        Ok(match self.edge_kind(edge)? {
            EdgeKind::Column(j) => (0..self.n).map(|i| self.node(i, j)).collect(),
            EdgeKind::Row(i) => (0..self.d).map(|j| self.node(i, j)).collect(),
        })
    }

    /// Member lists of every edge, in edge order.
    pub fn all_members(&self) -> Vec<Vec<usize>> {
        (0..self.num_edges())
            .map(|e| self.members(e).expect("edge in range"))
            .collect()
    }

    /// Column edge of every node, in node order.
    pub fn node_column_edges(&self) -> Vec<usize> {
        (0..self.num_nodes()).map(|v| v % self.d).collect()
    }

    /// Row edge of every node, in node order.
    pub fn node_row_edges(&self) -> Vec<usize> {
        (0..self.num_nodes()).map(|v| v / self.d + self.d).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    #[test]
    fn counts() {
        let hg = Hypergraph::new(3, 2).unwrap();
        assert_eq!((hg.num_nodes(), hg.num_edges()), (6, 5));
    }

    #[test]
    fn node_index_and_row_edge() {
        let hg = Hypergraph::new(5, 4).unwrap();
        assert_eq!(hg.node(2, 1), 9);
        assert_eq!(hg.row_edge(2), 6);
        assert_eq!(hg.members(6).unwrap(), vec![8, 9, 10, 11]);
    }

    #[test]
    fn incidence_lookups() {
        let hg = Hypergraph::new(3, 2).unwrap();
        assert_eq!(hg.incident_edges(0).unwrap(), (0, 2));
        assert_eq!(hg.members(1).unwrap(), vec![1, 3, 5]);
        assert!(hg.incident_edges(6).is_err());
        assert!(hg.members(5).is_err());
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Hypergraph::new(0, 3).is_err());
        assert!(Hypergraph::new(3, 0).is_err());
    }

    #[test]
    fn every_node_in_its_incident_edges() {
        let hg = Hypergraph::new(20, 7).unwrap();
        for v in 0..hg.num_nodes() {
            let (c, r) = hg.incident_edges(v).unwrap();
            assert!(hg.members(c).unwrap().contains(&v));
            assert!(hg.members(r).unwrap().contains(&v));
        }
        let total: usize = hg.all_members().iter().map(Vec::len).sum();
        assert_eq!(total, 2 * hg.num_nodes());
    }

    #[test]
    fn any_two_cells_within_two_hops() {
        let hg = Hypergraph::new(4, 3).unwrap();
        let members = hg.all_members();
        for start in 0..hg.num_nodes() {
            // hop = one traversal node -> shared hyperedge -> node
            let mut dist = vec![usize::MAX; hg.num_nodes()];
            dist[start] = 0;
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                let (c, r) = hg.incident_edges(v).unwrap();
                for &u in members[c].iter().chain(&members[r]) {
                    if dist[u] == usize::MAX {
                        dist[u] = dist[v] + 1;
                        queue.push_back(u);
                    }
                }
            }
            assert!(dist.iter().all(|&x| x <= 2));
        }
    }
}
