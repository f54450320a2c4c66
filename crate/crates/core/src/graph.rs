//! Fixed interaction graph over floes and walls.
//!
//! Nodes are ordered `[left wall, floe 0, .., floe N-1, right wall]`. Every
//! adjacent pair is joined by two directed edges, emitted left to right with
//! the forward (rightward) edge first. The graph never changes during a run.

use std::fmt;

use nalgebra::DMatrix;
use thiserror::Error;

/// First broken invariant found in a pair of relation matrices.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelationViolation {
    #[error("sender matrix is {sender:?} but receiver matrix is {receiver:?}")]
    ShapeMismatch {
        sender: (usize, usize),
        receiver: (usize, usize),
    },
    #[error("{matrix} entry ({row}, {col}) is {value}, expected 0 or 1")]
    NonBinary {
        matrix: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },
    #[error("{matrix} column {col} sums to {sum}, expected 1")]
    ColumnSum {
        matrix: &'static str,
        col: usize,
        sum: f64,
    },
    #[error("edge {edge} starts and ends at node {node}")]
    SelfLoop { edge: usize, node: usize },
    #[error("{matrix} row {row} sums to {sum}, expected {expected}")]
    RowSum {
        matrix: &'static str,
        row: usize,
        sum: f64,
        expected: f64,
    },
    #[error("edge {edge} ({from} -> {to}) has no reverse edge")]
    Unpaired { edge: usize, from: usize, to: usize },
}

/// Binary sender/receiver incidence matrices, `n_nodes x n_edges`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrices {
    sender: DMatrix<f64>,
    receiver: DMatrix<f64>,
    senders: Vec<usize>,
    receivers: Vec<usize>,
}

impl RelationMatrices {
    /// Builds the matrices from an edge list of `(sender, receiver)` pairs.
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut sender = DMatrix::zeros(n_nodes, edges.len());
        let mut receiver = DMatrix::zeros(n_nodes, edges.len());
        for (k, &(s, r)) in edges.iter().enumerate() {
            sender[(s, k)] = 1.0;
            receiver[(r, k)] = 1.0;
        }
        Self {
            sender,
            receiver,
            senders: edges.iter().map(|e| e.0).collect(),
            receivers: edges.iter().map(|e| e.1).collect(),
        }
    }

    /// Wraps dense matrices after checking them with [`validate_relations`].
    pub fn from_dense(sender: DMatrix<f64>, receiver: DMatrix<f64>) -> Result<Self, RelationViolation> {
        validate_relations(&sender, &receiver)?;
        let endpoint = |m: &DMatrix<f64>, k: usize| {
            m.column(k).iter().position(|&v| v == 1.0).expect("validated column")
        };
        let senders = (0..sender.ncols()).map(|k| endpoint(&sender, k)).collect();
        let receivers = (0..receiver.ncols()).map(|k| endpoint(&receiver, k)).collect();
        Ok(Self {
            sender,
            receiver,
            senders,
            receivers,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.sender.nrows()
    }

    pub fn n_edges(&self) -> usize {
        self.sender.ncols()
    }

    /// `R_s`: entry `(i, k)` is 1 when edge `k` leaves node `i`.
    pub fn sender_matrix(&self) -> &DMatrix<f64> {
        &self.sender
    }

    /// `R_r`: entry `(i, k)` is 1 when edge `k` enters node `i`.
    pub fn receiver_matrix(&self) -> &DMatrix<f64> {
        &self.receiver
    }

    pub fn sender_of(&self, edge: usize) -> usize {
        self.senders[edge]
    }

    pub fn receiver_of(&self, edge: usize) -> usize {
        self.receivers[edge]
    }

    pub fn senders(&self) -> &[usize] {
        &self.senders
    }

    pub fn receivers(&self) -> &[usize] {
        &self.receivers
    }

    /// Checks the chain-specific row sums: 1 for the two walls, 2 elsewhere.
    pub fn validate_chain(&self) -> Result<(), RelationViolation> {
        validate_relations(&self.sender, &self.receiver)?;
        let n = self.n_nodes();
        for (name, m) in [("sender", &self.sender), ("receiver", &self.receiver)] {
            for row in 0..n {
                let expected = if row == 0 || row == n - 1 { 1.0 } else { 2.0 };
                let sum = m.row(row).sum();
                if sum != expected {
                    return Err(RelationViolation::RowSum {
                        matrix: name,
                        row,
                        sum,
                        expected,
                    });
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for RelationMatrices {
    /// Prints both matrices with 1-based edge labels, one node per row.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.n_nodes();
        let label = |i: usize| -> String {
            if i == 0 {
                "left boundary".into()
            } else if i == n - 1 {
                "right boundary".into()
            } else {
                format!("x_{i}")
            }
        };
        for (name, m) in [("R_s", &self.sender), ("R_r", &self.receiver)] {
            write!(f, "{name}\n{:>15}", "")?;
            for k in 0..self.n_edges() {
                write!(f, " e{:<3}", k + 1)?;
            }
            writeln!(f)?;
            for i in 0..n {
                write!(f, "{:>15}", label(i))?;
                for k in 0..self.n_edges() {
                    write!(f, " {:<4}", m[(i, k)] as u8)?;
                }
                writeln!(f)?;
            }
        }
        Ok(())
    }
}

/// Involutive column permutation pairing every edge with its reverse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgePermutation {
    partner: Vec<usize>,
}

impl EdgePermutation {
    /// Pairs each edge with the edge running the opposite way.
    pub fn from_relations(rel: &RelationMatrices) -> Result<Self, RelationViolation> {
        let m = rel.n_edges();
        let mut partner = vec![usize::MAX; m];
        for k in 0..m {
            let (s, r) = (rel.sender_of(k), rel.receiver_of(k));
            let rev = (0..m)
                .find(|&j| rel.sender_of(j) == r && rel.receiver_of(j) == s)
                .ok_or(RelationViolation::Unpaired {
                    edge: k,
                    from: s,
                    to: r,
                })?;
            partner[k] = rev;
        }
        Ok(Self { partner })
    }

    pub fn partner(&self, edge: usize) -> usize {
        self.partner[edge]
    }

    pub fn len(&self) -> usize {
        self.partner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partner.is_empty()
    }

    /// Dense `P` with `P[j, i] = 1` when edge `j` reverses edge `i`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let m = self.partner.len();
        let mut p = DMatrix::zeros(m, m);
        for (i, &j) in self.partner.iter().enumerate() {
            p[(j, i)] = 1.0;
        }
        p
    }
}

/// Chain graph for `n_floes` floes between two walls.
pub fn build_chain_graph(n_floes: usize) -> (RelationMatrices, EdgePermutation) {
    let n_nodes = n_floes + 2;
    let mut edges = Vec::with_capacity(2 * (n_floes + 1));
    for i in 0..n_nodes - 1 {
        edges.push((i, i + 1));
        edges.push((i + 1, i));
    }
    let rel = RelationMatrices::from_edges(n_nodes, &edges);
    let perm = EdgePermutation::from_relations(&rel).expect("chain edges come in pairs");
    (rel, perm)
}

/// Checks binary entries, unit column sums and the absence of self loops.
pub fn validate_relations(sender: &DMatrix<f64>, receiver: &DMatrix<f64>) -> Result<(), RelationViolation> {
    if sender.shape() != receiver.shape() {
        return Err(RelationViolation::ShapeMismatch {
            sender: sender.shape(),
            receiver: receiver.shape(),
        });
    }
    for (name, m) in [("sender", sender), ("receiver", receiver)] {
        for col in 0..m.ncols() {
            for row in 0..m.nrows() {
                let value = m[(row, col)];
                if value != 0.0 && value != 1.0 {
                    return Err(RelationViolation::NonBinary {
                        matrix: name,
                        row,
                        col,
                        value,
                    });
                }
            }
            let sum = m.column(col).sum();
            if sum != 1.0 {
                return Err(RelationViolation::ColumnSum {
                    matrix: name,
                    col,
                    sum,
                });
            }
        }
    }
    for edge in 0..sender.ncols() {
        if let Some(node) = (0..sender.nrows()).find(|&i| sender[(i, edge)] == 1.0 && receiver[(i, edge)] == 1.0) {
            return Err(RelationViolation::SelfLoop { edge, node });
        }
    }
    Ok(())
}

/// Signed displacement along each directed edge, `x[receiver] - x[sender]`.
pub fn edge_features(x: &[f64], rel: &RelationMatrices) -> Vec<f64> {
    assert_eq!(x.len(), rel.n_nodes(), "one position per node");
    rel.senders
        .iter()
        .zip(&rel.receivers)
        .map(|(&s, &r)| x[r] - x[s])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_floe_chain_by_enumeration() {
        let (rel, perm) = build_chain_graph(1);
        assert_eq!((rel.n_nodes(), rel.n_edges()), (3, 4));
        let expected = [(0, 1), (1, 0), (1, 2), (2, 1)];
        for (k, &(s, r)) in expected.iter().enumerate() {
            assert_eq!((rel.sender_of(k), rel.receiver_of(k)), (s, r));
        }
        assert_eq!(rel.sender_matrix().row(0).sum(), 1.0);
        assert_eq!(rel.sender_matrix().row(2).sum(), 1.0);
        assert_eq!(rel.sender_matrix().row(1).sum(), 2.0);
        assert_eq!((0..4).map(|k| perm.partner(k)).collect::<Vec<_>>(), vec![1, 0, 3, 2]);
        rel.validate_chain().unwrap();
    }

    #[test]
    fn zero_column_is_reported() {
        let (rel, _) = build_chain_graph(2);
        let mut s = rel.sender_matrix().clone();
        s.column_mut(3).fill(0.0);
        assert_eq!(
            validate_relations(&s, rel.receiver_matrix()),
            Err(RelationViolation::ColumnSum {
                matrix: "sender",
                col: 3,
                sum: 0.0
            })
        );
    }

    #[test]
    fn self_loop_is_reported() {
        let rel = RelationMatrices::from_edges(2, &[(0, 1), (1, 1)]);
        assert_eq!(
            validate_relations(rel.sender_matrix(), rel.receiver_matrix()),
            Err(RelationViolation::SelfLoop { edge: 1, node: 1 })
        );
    }

    #[test]
    fn unpaired_edge_has_no_permutation() {
        let rel = RelationMatrices::from_edges(3, &[(0, 1), (1, 0), (1, 2)]);
        assert!(matches!(
            EdgePermutation::from_relations(&rel),
            Err(RelationViolation::Unpaired { edge: 2, .. })
        ));
    }

    #[test]
    fn two_node_displacements() {
        let rel = RelationMatrices::from_edges(2, &[(0, 1), (1, 0)]);
        assert_eq!(edge_features(&[0.0, 3.0], &rel), vec![3.0, -3.0]);
        assert_eq!(edge_features(&[4.0, 4.0], &rel), vec![0.0, 0.0]);
    }

    #[test]
    fn display_lists_every_node() {
        let (rel, _) = build_chain_graph(2);
        let text = rel.to_string();
        assert!(text.contains("left boundary") && text.contains("right boundary"));
        assert!(text.contains("e6"));
    }

    proptest! {
        #[test]
        fn chain_permutation_identities(n in 1usize..40) {
            let (rel, perm) = build_chain_graph(n);
            let p = perm.matrix();
            prop_assert_eq!(rel.n_edges(), 2 * (n + 1));
            prop_assert_eq!(&(rel.sender_matrix() * &p), rel.receiver_matrix());
            prop_assert_eq!(&(rel.receiver_matrix() * &p), rel.sender_matrix());
            prop_assert_eq!(&(&p * &p), &DMatrix::identity(p.nrows(), p.ncols()));
            prop_assert_eq!(&p.transpose(), &p);
            prop_assert!(rel.validate_chain().is_ok());
        }

        #[test]
        fn edge_features_are_antisymmetric(xs in proptest::collection::vec(-100.0f64..100.0, 3..20)) {
            let (rel, perm) = build_chain_graph(xs.len() - 2);
            let e = edge_features(&xs, &rel);
            for k in 0..e.len() {
                prop_assert_eq!(e[k], -e[perm.partner(k)]);
            }
        }
    }
}
