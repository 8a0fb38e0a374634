//! Shared helpers for the integration tests: random tensors, a central
//! difference gradient oracle, and a loop-based reference implementation of
//! the network used to cross-check the tape.

#![allow(dead_code)]

use herald_core::hypergraph::Hypergraph;
use herald_core::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Uniform values with magnitude in `[gap, hi)` and random sign, keeping
/// inputs away from the kinks of ReLU and clamps.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random weighted hypergraph on `n` nodes with every node covered.
pub fn random_hypergraph(r: &mut ChaCha8Rng, n: usize) -> Hypergraph {
    let m = r.gen_range(1..=n + 2);
    let mut edges: Vec<Vec<usize>> = (0..m)
        .map(|_| {
            let size = r.gen_range(1..=n.min(4));
            (0..size).map(|_| r.gen_range(0..n)).collect()
        })
        .collect();
    // cover every node so degrees stay positive
    for v in 0..n {
        if !edges.iter().any(|e| e.contains(&v)) {
            let j = r.gen_range(0..edges.len());
            edges[j].push(v);
        }
    }
    let weights = (0..edges.len()).map(|_| r.gen_range(0.5..2.0)).collect();
    Hypergraph::with_weights(n, edges, weights).unwrap()
}

pub fn random_perm(r: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(r);
    p
}

/// Six nodes, four hyperedges, every node covered.
pub fn toy6() -> Hypergraph {
    Hypergraph::new(
        6,
        vec![vec![0, 1, 2], vec![2, 3], vec![3, 4, 5], vec![0, 5]],
    )
    .unwrap()
}

pub type Builder<'a> = dyn Fn(&mut Tape, &[Var]) -> herald_core::Result<Var> + 'a;

fn projected(tape: &mut Tape, out: Var) -> Var {
    // a fixed random projection turns any output into a scalar
    let shape = tape.shape(out).to_vec();
    let r = uniform(&mut rng(0xfd), &shape, -1.0, 1.0);
    let r = tape.constant(r).unwrap();
    let prod = tape.mul(out, r).unwrap();
    tape.sum(prod).unwrap()
}

fn evaluate(inputs: &[Tensor], f: &Builder<'_>) -> f64 {
    let mut tape = Tape::unchecked();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()).unwrap())
        .collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = projected(&mut tape, out);
    tape.value(loss).item()
}

/// Largest `|analytic - numeric| / max(1, |numeric|)` over every entry of
/// every input.
pub fn fd_max_error(inputs: &[Tensor], f: &Builder<'_>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()).unwrap())
        .collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = projected(&mut tape, out);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], input);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (evaluate(&plus, f) - evaluate(&minus, f)) / (2.0 * FD_STEP);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

/// Loop-based reference implementations, independent of the tape and of the
/// library's matrix kernels.
pub mod reference {
    use herald_core::hypergraph::Hypergraph;

    pub type M = Vec<Vec<f64>>;

    pub fn from(t: &herald_core::Tensor) -> M {
        (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
    }

    pub fn matmul(a: &M, b: &M) -> M {
        let (n, k, m) = (a.len(), b.len(), b[0].len());
        let mut out = vec![vec![0.0; m]; n];
        for i in 0..n {
            for j in 0..m {
                out[i][j] = (0..k).map(|t| a[i][t] * b[t][j]).sum();
            }
        }
        out
    }

    pub fn transpose(a: &M) -> M {
        (0..a[0].len())
            .map(|j| a.iter().map(|r| r[j]).collect())
            .collect()
    }

    pub fn softmax_rows(a: &M) -> M {
        a.iter()
            .map(|r| {
                let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = r.iter().map(|x| (x - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|x| x / s).collect()
            })
            .collect()
    }

    pub fn incidence(g: &Hypergraph) -> M {
        let mut h = vec![vec![0.0; g.num_edges()]; g.num_nodes()];
        for (j, e) in g.hyperedges().iter().enumerate() {
            for &v in e {
                h[v][j] = 1.0;
            }
        }
        h
    }

    /// `D_v^{-1/2} H W D_e^{-1} H^T D_v^{-1/2}` for any non-negative `h`.
    pub fn propagation(h: &M, w: &[f64]) -> M {
        let (n, m) = (h.len(), h[0].len());
        let dv: Vec<f64> = (0..n)
            .map(|i| (0..m).map(|j| w[j] * h[i][j]).sum())
            .collect();
        let de: Vec<f64> = (0..m).map(|j| (0..n).map(|i| h[i][j]).sum()).collect();
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for k in 0..n {
                let s: f64 = (0..m).map(|j| h[i][j] * w[j] * h[k][j] / de[j]).sum();
                out[i][k] = s / (dv[i].sqrt() * dv[k].sqrt());
            }
        }
        out
    }

    pub struct Adaptor<'a> {
        pub w_e: &'a M,
        pub w_v: &'a M,
        pub w_s: &'a [f64],
        pub sigma: f64,
    }

    /// Returns `(H~, N_res, N^)`.
    pub fn herald(x: &M, g: &Hypergraph, n: &M, p: &Adaptor<'_>, a: f64) -> (M, M, M) {
        let h = incidence(g);
        let de: Vec<f64> = (0..g.num_edges())
            .map(|j| h.iter().map(|r| r[j]).sum())
            .collect();
        let mut xe = matmul(&transpose(&h), x);
        for (j, row) in xe.iter_mut().enumerate() {
            row.iter_mut().for_each(|v| *v /= de[j]);
        }
        let xe = matmul(&xe, p.w_e);
        let z = matmul(x, p.w_v);
        let alpha = softmax_rows(&matmul(&z, &transpose(&z)));
        let xa = matmul(&alpha, &z);
        let soft: M = xa
            .iter()
            .map(|xi| {
                xe.iter()
                    .map(|ej| {
                        let d: f64 = (0..xi.len())
                            .map(|k| p.w_s[k] * (xi[k] - ej[k]).powi(2))
                            .sum();
                        (-(d.max(0.0)) / (2.0 * p.sigma * p.sigma)).exp()
                    })
                    .collect()
            })
            .collect();
        let n_res = propagation(&soft, &vec![1.0; g.num_edges()]);
        let n_hat = (0..n.len())
            .map(|i| {
                (0..n.len())
                    .map(|k| (1.0 - a) * n[i][k] + a * n_res[i][k])
                    .collect()
            })
            .collect();
        (soft, n_res, n_hat)
    }

    pub fn max_abs_diff(a: &M, b: &M) -> f64 {
        a.iter()
            .zip(b)
            .flat_map(|(r, s)| r.iter().zip(s).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}
