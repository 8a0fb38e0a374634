//! Discrete hypergraphs and their normalized spectral operators.
//!
//! For incidence `H`, hyperedge weights `W`, node degrees `D_v` and hyperedge
//! degrees `D_e`, the propagation matrix is
//! `N = D_v^{-1/2} H W D_e^{-1} H^T D_v^{-1/2}` and the normalized Laplacian is
//! `L = I - N`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypergraph {
    num_nodes: usize,
    hyperedges: Vec<Vec<usize>>,
    edge_weights: Vec<f64>,
}

impl Hypergraph {
    /// Unit-weight hypergraph. Member lists are sorted and deduplicated.
    pub fn new(num_nodes: usize, hyperedges: Vec<Vec<usize>>) -> Result<Self> {
        let weights = vec![1.0; hyperedges.len()];
        Self::with_weights(num_nodes, hyperedges, weights)
    }

    pub fn with_weights(
        num_nodes: usize,
        hyperedges: Vec<Vec<usize>>,
        edge_weights: Vec<f64>,
    ) -> Result<Self> {
        if hyperedges.len() != edge_weights.len() {
            return Err(Error::Validation(format!(
                "{} hyperedges but {} weights",
                hyperedges.len(),
                edge_weights.len()
            )));
        }
        let mut edges = Vec::with_capacity(hyperedges.len());
        for (j, mut members) in hyperedges.into_iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Validation(format!("hyperedge {j} is empty")));
            }
            if let Some(&bad) = members.iter().find(|&&v| v >= num_nodes) {
                return Err(Error::Validation(format!(
                    "hyperedge {j} references node {bad} but there are only {num_nodes} nodes"
                )));
            }
            members.sort_unstable();
            members.dedup();
            edges.push(members);
        }
        if let Some((j, w)) = edge_weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(**w > 0.0 && w.is_finite()))
        {
            return Err(Error::Validation(format!(
                "hyperedge {j} has non-positive weight {w}"
            )));
        }
        Ok(Hypergraph {
            num_nodes,
            hyperedges: edges,
            edge_weights,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.hyperedges.len()
    }

    pub fn hyperedges(&self) -> &[Vec<usize>] {
        &self.hyperedges
    }

    pub fn edge_weights(&self) -> &[f64] {
        &self.edge_weights
    }

    /// Nodes that belong to no hyperedge.
    pub fn isolated_nodes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.num_nodes];
        for e in &self.hyperedges {
            for &v in e {
                seen[v] = true;
            }
        }
        (0..self.num_nodes).filter(|&v| !seen[v]).collect()
    }

    /// Gives every isolated node a unit-weight singleton hyperedge so that
    /// `D_v` stays invertible. Returns the nodes that were patched.
    pub fn patch_isolated(&mut self) -> Vec<usize> {
        let isolated = self.isolated_nodes();
        for &v in &isolated {
            self.hyperedges.push(vec![v]);
            self.edge_weights.push(1.0);
        }
        isolated
    }

    /// Relabels node `v` as `perm[v]`; hyperedge order is kept.
    pub fn permuted(&self, perm: &[usize]) -> Result<Hypergraph> {
        if perm.len() != self.num_nodes {
            return Err(Error::Contract(format!(
                "permutation of length {} for {} nodes",
                perm.len(),
                self.num_nodes
            )));
        }
        let edges = self
            .hyperedges
            .iter()
            .map(|e| e.iter().map(|&v| perm[v]).collect())
            .collect();
        Hypergraph::with_weights(self.num_nodes, edges, self.edge_weights.clone())
    }

    /// Dense binary `|V| x |E|` incidence matrix.
    pub fn incidence(&self) -> IncidenceMatrix {
        let e = self.num_edges();
        let mut h = Tensor::zeros(&[self.num_nodes, e]);
        for (j, members) in self.hyperedges.iter().enumerate() {
            for &v in members {
                h.set(v, j, 1.0);
            }
        }
        IncidenceMatrix(h)
    }

    /// `d(v) = sum_e w(e) h(v, e)` and `delta(e) = |e|`.
    pub fn degrees(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut dv = vec![0.0; self.num_nodes];
        let mut de = Vec::with_capacity(self.num_edges());
        for (members, w) in self.hyperedges.iter().zip(&self.edge_weights) {
            for &v in members {
                dv[v] += w;
            }
            de.push(members.len() as f64);
        }
        if let Some(node) = dv.iter().position(|&d| d <= 0.0) {
            return Err(Error::DegenerateNode { node });
        }
        Ok((dv, de))
    }

    /// Propagation matrix `N`, accumulated directly from the member lists.
    pub fn propagation_matrix(&self) -> Result<Tensor> {
        let (dv, de) = self.degrees()?;
        let n = self.num_nodes;
        let mut out = Tensor::zeros(&[n, n]);
        let data = out.data_mut();
        for ((members, w), delta) in self.hyperedges.iter().zip(&self.edge_weights).zip(&de) {
            let c = w / delta;
            for &i in members {
                for &j in members {
                    data[i * n + j] += c;
                }
            }
        }
        scale_symmetric(&mut out, &dv);
        Ok(out)
    }

    pub fn laplacian(&self) -> Result<Tensor> {
        Ok(laplacian_from_propagation(&self.propagation_matrix()?))
    }

    /// The `|E| x |V|` matrix `D_e^{-1} H^T`, which averages node rows into
    /// hyperedge rows.
    pub fn averaging_matrix(&self) -> Tensor {
        let mut p = Tensor::zeros(&[self.num_edges(), self.num_nodes]);
        for (j, members) in self.hyperedges.iter().enumerate() {
            let inv = 1.0 / members.len() as f64;
            for &v in members {
                p.set(j, v, inv);
            }
        }
        p
    }

    pub fn spectral(&self) -> Result<SpectralOperators> {
        let (node_degrees, edge_degrees) = self.degrees()?;
        let propagation = self.propagation_matrix()?;
        let laplacian = laplacian_from_propagation(&propagation);
        Ok(SpectralOperators {
            node_degrees,
            edge_degrees,
            propagation,
            laplacian,
        })
    }
}

/// Dense incidence matrix: binary when built from a [`Hypergraph`], soft
/// (entries in `(0, 1]`) when produced by the adaptor.
#[derive(Clone, Debug, PartialEq)]
pub struct IncidenceMatrix(Tensor);

impl IncidenceMatrix {
    pub fn new(h: Tensor) -> Result<Self> {
        if !h.is_matrix() {
            return Err(Error::Validation(format!(
                "incidence must be a matrix, got {:?}",
                h.shape()
            )));
        }
        if let Some(bad) = h.data().iter().find(|&&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::Validation(format!(
                "incidence entry {bad} outside [0, 1]"
            )));
        }
        for j in 0..h.cols() {
            if (0..h.rows()).all(|i| h.get(i, j) == 0.0) {
                return Err(Error::Validation(format!("hyperedge column {j} is empty")));
            }
        }
        Ok(IncidenceMatrix(h))
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn num_nodes(&self) -> usize {
        self.0.rows()
    }

    pub fn num_edges(&self) -> usize {
        self.0.cols()
    }
}

#[derive(Clone, Debug)]
pub struct SpectralOperators {
    pub node_degrees: Vec<f64>,
    pub edge_degrees: Vec<f64>,
    pub propagation: Tensor,
    pub laplacian: Tensor,
}

fn check_weights(h: &IncidenceMatrix, weights: &[f64]) -> Result<()> {
    if weights.len() != h.num_edges() {
        return Err(Error::shape(
            "hyperedge weights",
            h.as_tensor().shape(),
            &[weights.len()],
        ));
    }
    if let Some(w) = weights.iter().find(|w| w.is_nan() || **w <= 0.0) {
        return Err(Error::Validation(format!(
            "non-positive hyperedge weight {w}"
        )));
    }
    Ok(())
}

/// Node degrees `d(v) = sum_e w(e) h(v, e)` and hyperedge degrees
/// `delta(e) = sum_v h(v, e)`.
pub fn degrees(h: &IncidenceMatrix, weights: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_weights(h, weights)?;
    let t = h.as_tensor();
    let (nv, ne) = (t.rows(), t.cols());
    let mut dv = vec![0.0; nv];
    let mut de = vec![0.0; ne];
    for v in 0..nv {
        for (e, w) in weights.iter().enumerate() {
            let x = t.get(v, e);
            dv[v] += w * x;
            de[e] += x;
        }
    }
    if let Some(node) = dv.iter().position(|&d| d <= 0.0) {
        return Err(Error::DegenerateNode { node });
    }
    Ok((dv, de))
}

/// `N = D_v^{-1/2} H W D_e^{-1} H^T D_v^{-1/2}` from a dense incidence matrix.
pub fn propagation_matrix(h: &IncidenceMatrix, weights: &[f64]) -> Result<Tensor> {
    let (dv, de) = degrees(h, weights)?;
    let t = h.as_tensor();
    let (nv, ne) = (t.rows(), t.cols());
    let coef: Vec<f64> = weights.iter().zip(&de).map(|(w, d)| w / d).collect();
    // H * diag(w / delta)
    let mut hw = t.clone();
    for v in 0..nv {
        for e in 0..ne {
            let x = hw.get(v, e) * coef[e];
            hw.set(v, e, x);
        }
    }
    let mut out = Tensor::zeros(&[nv, nv]);
    gemm(
        nv,
        ne,
        nv,
        1.0,
        MatRef::row_major(hw.data(), ne),
        MatRef::transposed(t.data(), ne),
        0.0,
        out.data_mut(),
    );
    symmetrize(&mut out);
    scale_symmetric(&mut out, &dv);
    Ok(out)
}

/// `L = I - N`.
pub fn laplacian(h: &IncidenceMatrix, weights: &[f64]) -> Result<Tensor> {
    Ok(laplacian_from_propagation(&propagation_matrix(h, weights)?))
}

pub fn laplacian_from_propagation(n: &Tensor) -> Tensor {
    let size = n.rows();
    let mut l = n.map(|x| -x);
    for i in 0..size {
        l.set(i, i, 1.0 - n.get(i, i));
    }
    l
}

/// Sorted eigenvalues of a symmetric matrix. Used only to verify spectral
/// invariants; the forward path never diagonalizes anything.
pub fn eigen_check(l: &Tensor) -> Result<Vec<f64>> {
    if !l.is_matrix() || l.rows() != l.cols() {
        return Err(Error::Contract(format!(
            "eigen_check needs a square matrix, got {:?}",
            l.shape()
        )));
    }
    let asym = l.asymmetry();
    if asym > 1e-8 {
        return Err(Error::Contract(format!(
            "matrix is not symmetric (max |a_ij - a_ji| = {asym:e})"
        )));
    }
    let n = l.rows();
    let m = nalgebra::DMatrix::from_row_slice(n, n, l.data());
    let mut eig: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(|a, b| a.total_cmp(b));
    Ok(eig)
}

/// Multiplies entry `(i, j)` by `1 / sqrt(d_i d_j)`. The product of the two
/// inverse roots is formed once per pair so the result stays exactly symmetric.
fn scale_symmetric(m: &mut Tensor, degrees: &[f64]) {
    let inv: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let n = inv.len();
    let data = m.data_mut();
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] *= inv[i] * inv[j];
        }
    }
}

fn symmetrize(m: &mut Tensor) {
    let n = m.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, avg);
            m.set(j, i, avg);
        }
    }
}
