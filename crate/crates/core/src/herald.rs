//! The Laplacian adaptor: a learnable soft incidence matrix re-estimated from
//! node features, turned into a residual propagation matrix and blended with
//! the original one.
//!
//! One call runs, on a [`Tape`]:
//!
//! 1. hyperedge features as the mean of their member nodes (original binary
//!    membership), then a linear map `W_e`;
//! 2. self-attention over all nodes with `z_i = W_v^T x_i`,
//!    `alpha = softmax_rows(Z Z^T)` and attended features `alpha Z`;
//! 3. node-to-hyperedge distances `d_ij = W_s^T (x_i - x_{e_j})^{o2}`,
//!    clamped at zero;
//! 4. a Gaussian kernel `H~_ij = exp(-d_ij / 2 sigma^2)`;
//! 5. `N_res` from `H~` with unit hyperedge weights and degrees recomputed
//!    from `H~`;
//! 6. the blend `N^ = (1 - a) N + a N_res`.
//!
//! The zero clamp on `d_ij` is a deliberate departure from the bare kernel:
//! `W_s` is unconstrained, so without it a negative distance would push an
//! incidence entry above one. With the clamp every entry lies in `(0, 1]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::{laplacian_from_propagation, Hypergraph};
use crate::tensor::{Tape, Tensor, Var};

/// Gaussian bandwidth used unless overridden.
pub const DEFAULT_SIGMA: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeraldParams {
    /// `d x h` hyperedge feature transform.
    pub w_e: Tensor,
    /// `d x h` node transform shared by queries, keys and values.
    pub w_v: Tensor,
    /// `h x 1` distance projection.
    pub w_s: Tensor,
    pub sigma: f64,
}

impl HeraldParams {
    pub fn new(w_e: Tensor, w_v: Tensor, w_s: Tensor, sigma: f64) -> Result<Self> {
        if w_e.shape() != w_v.shape() || !w_e.is_matrix() {
            return Err(Error::shape("herald params", w_e.shape(), w_v.shape()));
        }
        if w_s.shape() != [w_e.cols(), 1] {
            return Err(Error::shape("herald params", w_e.shape(), w_s.shape()));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        Ok(HeraldParams {
            w_e,
            w_v,
            w_s,
            sigma,
        })
    }

    /// Glorot-uniform `W_e`, `W_v`; `W_s` drawn from the positive half of the
    /// same range so that initial distances are non-negative.
    pub fn init<R: Rng>(in_dim: usize, hidden: usize, sigma: f64, rng: &mut R) -> Result<Self> {
        let w_e = glorot(in_dim, hidden, rng);
        let w_v = glorot(in_dim, hidden, rng);
        let bound = (6.0 / (hidden + 1) as f64).sqrt();
        let w_s = Tensor::column((0..hidden).map(|_| rng.gen_range(0.0..bound)).collect());
        Self::new(w_e, w_v, w_s, sigma)
    }

    pub fn in_dim(&self) -> usize {
        self.w_e.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_e.cols()
    }

    /// `2 d h + h`, independent of the graph size.
    pub fn num_params(&self) -> usize {
        self.w_e.numel() + self.w_v.numel() + self.w_s.numel()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<HeraldVars> {
        Ok(HeraldVars {
            w_e: tape.leaf(self.w_e.clone())?,
            w_v: tape.leaf(self.w_v.clone())?,
            w_s: tape.leaf(self.w_s.clone())?,
        })
    }
}

pub(crate) fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape")
}

/// Tape handles of one adaptor's trainable matrices.
#[derive(Clone, Copy, Debug)]
pub struct HeraldVars {
    pub w_e: Var,
    pub w_v: Var,
    pub w_s: Var,
}

/// Per-hypergraph constants needed on every forward pass.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub hypergraph: Hypergraph,
    /// `N` of the original hypergraph.
    pub propagation: Tensor,
    /// `D_e^{-1} H^T`, the hyperedge mean operator.
    pub averaging: Tensor,
}

impl GraphContext {
    pub fn new(hypergraph: Hypergraph) -> Result<Self> {
        let propagation = hypergraph.propagation_matrix()?;
        let averaging = hypergraph.averaging_matrix();
        Ok(GraphContext {
            hypergraph,
            propagation,
            averaging,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.hypergraph.num_nodes()
    }
}

/// Tape handles of the intermediates of one adaptor call.
#[derive(Clone, Copy, Debug)]
pub struct HeraldTrace {
    pub attention: Var,
    pub distances: Var,
    pub h_soft: Var,
    pub n_res: Var,
    pub n_hat: Var,
}

/// Materialized result of one adaptor call.
#[derive(Clone, Debug)]
pub struct HeraldOutput {
    pub h_soft: Tensor,
    pub n_res: Tensor,
    pub n_hat: Tensor,
    pub l_tilde: Tensor,
}

impl HeraldOutput {
    pub fn from_trace(tape: &Tape, trace: &HeraldTrace) -> Self {
        let n_hat = tape.value(trace.n_hat).clone();
        HeraldOutput {
            h_soft: tape.value(trace.h_soft).clone(),
            n_res: tape.value(trace.n_res).clone(),
            l_tilde: laplacian_from_propagation(&n_hat),
            n_hat,
        }
    }
}

/// Mean of member-node features per hyperedge: `averaging * x`.
pub fn hyperedge_features(tape: &mut Tape, x: Var, averaging: Var) -> Result<Var> {
    tape.matmul(averaging, x)
}

/// `x_e <- W_e^T x_e` for every hyperedge row.
pub fn transform_hyperedges(tape: &mut Tape, edge_features: Var, w_e: Var) -> Result<Var> {
    tape.matmul(edge_features, w_e)
}

/// Self-attention over all nodes. Returns `(alpha Z, alpha)` with `Z = X W_v`.
pub fn attend_nodes(tape: &mut Tape, x: Var, w_v: Var) -> Result<(Var, Var)> {
    let z = tape.matmul(x, w_v)?;
    let zt = tape.transpose(z)?;
    let logits = tape.matmul(z, zt)?;
    let alpha = tape.softmax_rows(logits)?;
    let out = tape.matmul(alpha, z)?;
    Ok((out, alpha))
}

/// `d_ij = W_s^T (x_i - x_{e_j})^{o2}`, unclamped.
pub fn distance_matrix(tape: &mut Tape, nodes: Var, edges: Var, w_s: Var) -> Result<Var> {
    tape.pairwise_sq_dist(nodes, edges, w_s)
}

/// Exponents below this are floored so that no entry underflows to zero.
const MIN_EXPONENT: f64 = -700.0;

/// `exp(-max(d, 0) / 2 sigma^2)`, elementwise.
pub fn soft_incidence(tape: &mut Tape, distances: Var, sigma: f64) -> Result<Var> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Config(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let clamped = tape.clamp_min(distances, 0.0)?;
    let scaled = tape.scale(clamped, -1.0 / (2.0 * sigma * sigma))?;
    let floored = tape.clamp_min(scaled, MIN_EXPONENT)?;
    tape.exp(floored)
}

/// `D~_v^{-1/2} H~ D~_e^{-1} H~^T D~_v^{-1/2}` with unit soft-hyperedge weights.
pub fn soft_propagation(tape: &mut Tape, h_soft: Var) -> Result<Var> {
    let dv = tape.sum_rows(h_soft)?;
    let de = tape.sum_cols(h_soft)?;
    let dv_isqrt = tape.powf(dv, -0.5)?;
    let de_inv = tape.powf(de, -1.0)?;
    let a = tape.scale_rows(h_soft, dv_isqrt)?;
    let b = tape.scale_cols(a, de_inv)?;
    let at = tape.transpose(a)?;
    tape.matmul(b, at)
}

/// `(1 - a) N + a N_res`.
pub fn blend(tape: &mut Tape, n: Var, n_res: Var, a: f64) -> Result<Var> {
    check_strength(a)?;
    let keep = tape.scale(n, 1.0 - a)?;
    let shift = tape.scale(n_res, a)?;
    tape.add(keep, shift)
}

fn check_strength(a: f64) -> Result<()> {
    if (0.0..=1.0).contains(&a) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "update strength a must lie in [0, 1], got {a}"
        )))
    }
}

/// Full adaptor pass. `n` and `averaging` are the graph's constants already
/// placed on the tape.
pub fn herald_forward(
    tape: &mut Tape,
    x: Var,
    n: Var,
    averaging: Var,
    params: &HeraldVars,
    sigma: f64,
    a: f64,
) -> Result<HeraldTrace> {
    check_strength(a)?;
    let edge_mean = hyperedge_features(tape, x, averaging)?;
    let edge_feat = transform_hyperedges(tape, edge_mean, params.w_e)?;
    let (node_feat, attention) = attend_nodes(tape, x, params.w_v)?;
    let distances = distance_matrix(tape, node_feat, edge_feat, params.w_s)?;
    let h_soft = soft_incidence(tape, distances, sigma)?;
    let n_res = soft_propagation(tape, h_soft)?;
    let n_hat = blend(tape, n, n_res, a)?;
    Ok(HeraldTrace {
        attention,
        distances,
        h_soft,
        n_res,
        n_hat,
    })
}

/// Eager convenience wrapper around [`herald_forward`].
pub fn run_herald(
    x: &Tensor,
    ctx: &GraphContext,
    params: &HeraldParams,
    a: f64,
) -> Result<HeraldOutput> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let n = tape.constant(ctx.propagation.clone())?;
    let avg = tape.constant(ctx.averaging.clone())?;
    let vars = params.bind(&mut tape)?;
    let trace = herald_forward(&mut tape, xv, n, avg, &vars, params.sigma, a)?;
    Ok(HeraldOutput::from_trace(&tape, &trace))
}

/// Update strength for 1-based layer `l`: `1 - 0.9 (cos(pi (l - 1) / 10) + 1) / 2`.
pub fn a_schedule(layer: usize) -> f64 {
    assert!(layer >= 1, "layers are numbered from 1");
    let t = std::f64::consts::PI * (layer - 1) as f64 / 10.0;
    1.0 - 0.9 * (t.cos() + 1.0) / 2.0
}

/// Frobenius norm of `N - N_res`.
pub fn topology_regularizer(tape: &mut Tape, n: Var, n_res: Var) -> Result<Var> {
    if tape.shape(n) != tape.shape(n_res) {
        return Err(Error::shape(
            "topology_regularizer",
            tape.shape(n),
            tape.shape(n_res),
        ));
    }
    let diff = tape.sub(n, n_res)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    tape.sqrt(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_unary(x: Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Tensor {
        let mut tape = Tape::new();
        let v = tape.constant(x).unwrap();
        let out = f(&mut tape, v).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn hyperedge_mean_examples() {
        let g = Hypergraph::new(2, vec![vec![0, 1]]).unwrap();
        let x = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let avg = g.averaging_matrix();
        let out = run_unary(x, |t, x| {
            let a = t.constant(avg)?;
            hyperedge_features(t, x, a)
        });
        assert_eq!(out.data(), &[0.5, 0.5]);

        let g = Hypergraph::new(3, vec![vec![0, 2], vec![0, 1, 2], vec![1]]).unwrap();
        let c = [0.25, -4.0, 9.0];
        let x = Tensor::from_rows(&[c, c, c]).unwrap();
        let avg = g.averaging_matrix();
        let out = run_unary(x, |t, x| {
            let a = t.constant(avg)?;
            hyperedge_features(t, x, a)
        });
        for j in 0..3 {
            for (k, ck) in c.iter().enumerate() {
                assert!((out.get(j, k) - ck).abs() < 1e-15);
            }
        }

        let g = Hypergraph::new(1, vec![vec![0]]).unwrap();
        let avg = g.averaging_matrix();
        let out = run_unary(Tensor::from_rows(&[[3.0, 7.0]]).unwrap(), |t, x| {
            let a = t.constant(avg)?;
            hyperedge_features(t, x, a)
        });
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn transform_identity_and_zero() {
        let xe = Tensor::from_rows(&[[1.0, 2.0], [-3.0, 0.5]]).unwrap();
        let id = run_unary(xe.clone(), |t, x| {
            let w = t.constant(Tensor::eye(2))?;
            transform_hyperedges(t, x, w)
        });
        assert_eq!(id, xe);
        let zero = run_unary(xe, |t, x| {
            let w = t.constant(Tensor::zeros(&[2, 3]))?;
            transform_hyperedges(t, x, w)
        });
        assert_eq!(zero, Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn attention_on_identical_nodes_is_uniform() {
        let x = Tensor::from_rows(&[[0.3, -0.7], [0.3, -0.7]]).unwrap();
        let w = Tensor::from_rows(&[[1.0, 2.0], [0.5, -1.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let wv = tape.constant(w.clone()).unwrap();
        let (out, alpha) = attend_nodes(&mut tape, xv, wv).unwrap();
        assert_eq!(tape.value(alpha).data(), &[0.5; 4]);
        let z1 = x.matmul(&w).unwrap();
        assert!(tape.value(out).max_abs_diff(&z1) < 1e-15);
    }

    #[test]
    fn attention_on_single_node_returns_its_projection() {
        let x = Tensor::from_rows(&[[2.0, -1.0]]).unwrap();
        let w = Tensor::from_rows(&[[1.0], [3.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let wv = tape.constant(w.clone()).unwrap();
        let (out, alpha) = attend_nodes(&mut tape, xv, wv).unwrap();
        assert_eq!(tape.value(alpha).data(), &[1.0]);
        assert_eq!(tape.value(out), &x.matmul(&w).unwrap());
    }

    #[test]
    fn distance_examples() {
        let nodes = Tensor::from_rows(&[[1.0, 2.0], [0.0, -1.0]]).unwrap();
        let edges = Tensor::from_rows(&[[1.0, 2.0], [3.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(nodes).unwrap();
        let e = tape.constant(edges).unwrap();
        let ones = tape.constant(Tensor::ones(&[2, 1])).unwrap();
        let d = distance_matrix(&mut tape, x, e, ones).unwrap();
        // coincident pair, then plain squared Euclidean distances
        assert_eq!(tape.value(d).data(), &[0.0, 8.0, 10.0, 10.0]);

        let signed = tape.constant(Tensor::column(vec![-1.0, 0.25])).unwrap();
        let d = distance_matrix(&mut tape, x, e, signed).unwrap();
        // node 1 vs edge 1: -1 * 9 + 0.25 * 1 < 0
        let v = tape.value(d).get(1, 1);
        assert_eq!(v, -8.75);
        let h = soft_incidence(&mut tape, d, 1.0).unwrap();
        assert_eq!(tape.value(h).get(1, 1), 1.0);
        assert!(tape.value(h).data().iter().all(|&x| x > 0.0 && x <= 1.0));
    }

    #[test]
    fn kernel_values() {
        let sigma = DEFAULT_SIGMA;
        let d = Tensor::row(vec![0.0, 2.0 * sigma * sigma, 1e5, 1e300]);
        let h = run_unary(d, |t, d| soft_incidence(t, d, sigma));
        assert_eq!(h.data()[0], 1.0);
        assert!((h.data()[1] - (-1f64).exp()).abs() < 1e-15);
        assert!((h.data()[1] - 0.367879).abs() < 1e-6);
        assert!(h.data()[2] > 0.0 && h.data()[2] < 1e-50);
        assert!(h.data()[3] > 0.0);
    }

    #[test]
    fn schedule_values() {
        assert!((a_schedule(1) - 0.1).abs() < 1e-15);
        let a2 = 1.0 - 0.9 * ((std::f64::consts::PI / 10.0).cos() + 1.0) / 2.0;
        assert_eq!(a_schedule(2), a2);
        assert!((a_schedule(2) - 0.1220).abs() < 5e-5);
        // closed form evaluates to 0.185942...
        assert!((a_schedule(3) - 0.185942).abs() < 1e-6);
    }

    #[test]
    fn regularizer_values() {
        let mut tape = Tape::new();
        let n = tape.constant(Tensor::eye(2)).unwrap();
        let r = topology_regularizer(&mut tape, n, n).unwrap();
        assert_eq!(tape.value(r).item(), 0.0);

        let z = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let r = topology_regularizer(&mut tape, n, z).unwrap();
        assert!((tape.value(r).item() - 2f64.sqrt()).abs() < 1e-15);

        let base = Tensor::from_rows(&[[0.5, -1.0], [2.0, 0.25]]).unwrap();
        let scaled = base.map(|x| -3.0 * x);
        let b = tape.constant(base).unwrap();
        let s = tape.constant(scaled).unwrap();
        let r1 = topology_regularizer(&mut tape, b, z).unwrap();
        let r3 = topology_regularizer(&mut tape, s, z).unwrap();
        assert!((tape.value(r3).item() - 3.0 * tape.value(r1).item()).abs() < 1e-12);

        let wrong = tape.constant(Tensor::zeros(&[3, 3])).unwrap();
        assert!(topology_regularizer(&mut tape, n, wrong).is_err());
    }

    fn toy() -> (GraphContext, Tensor, HeraldParams) {
        let g = Hypergraph::new(5, vec![vec![0, 1, 2], vec![2, 3], vec![1, 3, 4]]).unwrap();
        let ctx = GraphContext::new(g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::new(
            vec![5, 4],
            (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let params = HeraldParams::init(4, 3, 1.0, &mut rng).unwrap();
        (ctx, x, params)
    }

    #[test]
    fn blend_endpoints() {
        let (ctx, x, params) = toy();
        let out = run_herald(&x, &ctx, &params, 0.0).unwrap();
        assert_eq!(out.n_hat, ctx.propagation);
        assert_eq!(out.l_tilde, laplacian_from_propagation(&ctx.propagation));
        let out = run_herald(&x, &ctx, &params, 1.0).unwrap();
        assert_eq!(out.n_hat, out.n_res);
    }

    #[test]
    fn out_of_range_strength_is_a_config_error() {
        let (ctx, x, params) = toy();
        assert!(matches!(
            run_herald(&x, &ctx, &params, 1.5),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            run_herald(&x, &ctx, &params, -0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn small_instance_is_symmetric_and_psd() {
        let (ctx, x, params) = toy();
        let out = run_herald(&x, &ctx, &params, a_schedule(3)).unwrap();
        assert!(out.n_hat.asymmetry() < 1e-10);
        assert!(out.n_res.asymmetry() < 1e-10);
        let eig = crate::hypergraph::eigen_check(&out.l_tilde).unwrap();
        assert!(eig[0] >= -1e-8, "{eig:?}");
        assert!(out.h_soft.data().iter().all(|&h| h > 0.0 && h <= 1.0));
    }

    #[test]
    fn params_validate_shapes() {
        let w = Tensor::zeros(&[4, 3]);
        assert!(HeraldParams::new(w.clone(), w.clone(), Tensor::zeros(&[3, 1]), 20.0).is_ok());
        assert!(HeraldParams::new(
            w.clone(),
            Tensor::zeros(&[4, 2]),
            Tensor::zeros(&[3, 1]),
            20.0
        )
        .is_err());
        assert!(HeraldParams::new(w.clone(), w.clone(), Tensor::zeros(&[2, 1]), 20.0).is_err());
        assert!(HeraldParams::new(w.clone(), w, Tensor::zeros(&[3, 1]), 0.0).is_err());
    }

    #[test]
    fn param_count_is_two_dh_plus_h() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = HeraldParams::init(4, 3, DEFAULT_SIGMA, &mut rng).unwrap();
        assert_eq!(p.num_params(), 27);
    }
}
