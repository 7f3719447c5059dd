//! Directed message passing encoder.
//!
//! Each undirected edge carries two directed hidden states. For an edge
//! `i → j`:
//!
//! ```text
//! h⁰_ij   = ReLU([X_i ‖ E_ij]·W_init + b_init)
//! m_ij    = Σ_{k ∈ N(i)∖j} h_ki
//! h_ij    = ReLU(h⁰_ij + dropout(m_ij·W_e))
//! m_i     = Σ_{j ∈ N(i)} h_ij
//! X_out,i = ReLU([X_i ‖ m_i]·W_n + b_n)
//! ```
//!
//! `W_e` has no bias, so an edge with no incoming messages keeps the state
//! `ReLU(h⁰)` for every step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph_data::Graph;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmpnnConfig {
    pub hidden: usize,
    /// Message-passing steps `T`.
    pub steps: usize,
    pub dropout: f64,
}

impl Default for DmpnnConfig {
    fn default() -> Self {
        Self {
            hidden: 200,
            steps: 4,
            dropout: 0.15,
        }
    }
}

impl DmpnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::InvalidArgument(
                "hidden size must be at least 1".into(),
            ));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument(
                "message passing needs at least one step".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Uniform `(-1/√fan_in, 1/√fan_in)` initialization, used for every layer.
pub fn init_uniform<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut R,
) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new([rows, cols], data).expect("shape matches data")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmpnnParams {
    /// `(d_n + d_e) × hidden`
    pub w_init: Tensor,
    pub b_init: Tensor,
    /// `hidden × hidden`
    pub w_e: Tensor,
    /// `(d_n + hidden) × hidden`
    pub w_n: Tensor,
    pub b_n: Tensor,
}

impl DmpnnParams {
    pub fn init<R: Rng + ?Sized>(d_n: usize, d_e: usize, cfg: &DmpnnConfig, rng: &mut R) -> Self {
        let h = cfg.hidden;
        Self {
            w_init: init_uniform(d_n + d_e, h, d_n + d_e, rng),
            b_init: init_uniform(1, h, d_n + d_e, rng),
            w_e: init_uniform(h, h, h, rng),
            w_n: init_uniform(d_n + h, h, d_n + h, rng),
            b_n: init_uniform(1, h, d_n + h, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_e.cols()
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 5] {
        [
            ("w_init", &self.w_init),
            ("b_init", &self.b_init),
            ("w_e", &self.w_e),
            ("w_n", &self.w_n),
            ("b_n", &self.b_n),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 5] {
        [
            ("w_init", &mut self.w_init),
            ("b_init", &mut self.b_init),
            ("w_e", &mut self.w_e),
            ("w_n", &mut self.w_n),
            ("b_n", &mut self.b_n),
        ]
    }

    /// Records the parameters on `tape`; `trainable` decides whether they collect gradients.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<DmpnnVars> {
        Ok(DmpnnVars {
            w_init: tape.leaf(self.w_init.clone(), trainable)?,
            b_init: tape.leaf(self.b_init.clone(), trainable)?,
            w_e: tape.leaf(self.w_e.clone(), trainable)?,
            w_n: tape.leaf(self.w_n.clone(), trainable)?,
            b_n: tape.leaf(self.b_n.clone(), trainable)?,
        })
    }

    fn check_dims(&self, g: &Graph) -> Result<()> {
        let h = self.hidden();
        let ok = self.w_init.shape() == [g.d_n() + g.d_e(), h]
            && self.w_n.shape() == [g.d_n() + h, h]
            && self.b_init.shape() == [1, h]
            && self.b_n.shape() == [1, h]
            && self.w_e.shape() == [h, h];
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "dmpnn",
                format!(
                    "parameters do not fit a graph with d_n={} d_e={}",
                    g.d_n(),
                    g.d_e()
                ),
            ))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DmpnnVars {
    pub w_init: Var,
    pub b_init: Var,
    pub w_e: Var,
    pub w_n: Var,
    pub b_n: Var,
}

/// Directed edges of a graph in lexicographic `(src, dst)` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectedEdges {
    pub n: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// `reverse[k]` is the index of edge `dst[k] → src[k]`.
    pub reverse: Vec<usize>,
}

impl DirectedEdges {
    pub fn of(g: &Graph) -> Self {
        let n = g.n();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if g.has_edge(i, j) {
                    src.push(i);
                    dst.push(j);
                }
            }
        }
        let pairs: Vec<(usize, usize)> = src.iter().copied().zip(dst.iter().copied()).collect();
        let reverse = pairs
            .iter()
            .map(|&(i, j)| {
                pairs
                    .binary_search(&(j, i))
                    .expect("adjacency is symmetric")
            })
            .collect();
        Self {
            n,
            src,
            dst,
            reverse,
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Row-major flat positions `src·n + dst` into an `n×n` grid.
    pub fn flat(&self) -> Vec<usize> {
        self.src
            .iter()
            .zip(&self.dst)
            .map(|(&i, &j)| i * self.n + j)
            .collect()
    }
}

/// Graph tensors recorded as constants on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GraphVars {
    pub x: Var,
    /// Directed edge features, one row per directed edge.
    pub e_dir: Var,
    pub a: Var,
}

pub fn graph_vars(tape: &mut Tape, g: &Graph, edges: &DirectedEdges) -> Result<GraphVars> {
    let d_e = g.d_e();
    let mut e = Vec::with_capacity(edges.len() * d_e);
    for (&i, &j) in edges.src.iter().zip(&edges.dst) {
        e.extend_from_slice(g.edge_feature(i, j));
    }
    Ok(GraphVars {
        x: tape.constant(g.node_features().clone())?,
        e_dir: tape.constant(Tensor::new([edges.len(), d_e], e)?)?,
        a: tape.constant(g.adjacency().clone())?,
    })
}

/// `h⁰ = ReLU([X_src ‖ E]·W_init + b_init)`, one row per directed edge.
pub fn init_edge_states(
    tape: &mut Tape,
    p: &DmpnnVars,
    gv: &GraphVars,
    edges: &DirectedEdges,
) -> Result<Var> {
    let x_src = tape.gather_rows(gv.x, edges.src.clone())?;
    let input = tape.concat(x_src, gv.e_dir)?;
    let lin = tape.matmul(input, p.w_init)?;
    let lin = add_bias(tape, lin, p.b_init)?;
    tape.relu(lin)
}

/// One step `h ← ReLU(h⁰ + dropout(m·W_e))` with the reverse edge excluded from `m`.
#[allow(clippy::too_many_arguments)]
pub fn message_step<R: Rng + ?Sized>(
    tape: &mut Tape,
    p: &DmpnnVars,
    edges: &DirectedEdges,
    h: Var,
    h0: Var,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let incoming = tape.scatter_add_rows(h, edges.dst.clone(), edges.n)?;
    let at_src = tape.gather_rows(incoming, edges.src.clone())?;
    let reverse = tape.gather_rows(h, edges.reverse.clone())?;
    let m = tape.sub(at_src, reverse)?;
    let lin = tape.matmul(m, p.w_e)?;
    let lin = tape.dropout(lin, dropout, training, rng)?;
    let pre = tape.add(h0, lin)?;
    tape.relu(pre)
}

/// `X_out = ReLU([X ‖ Σ_j h_ij]·W_n + b_n)`.
pub fn node_update(
    tape: &mut Tape,
    p: &DmpnnVars,
    gv: &GraphVars,
    edges: &DirectedEdges,
    h: Var,
) -> Result<Var> {
    let m = tape.scatter_add_rows(h, edges.src.clone(), edges.n)?;
    let input = tape.concat(gv.x, m)?;
    let lin = tape.matmul(input, p.w_n)?;
    let lin = add_bias(tape, lin, p.b_n)?;
    tape.relu(lin)
}

/// Adds a `1×c` bias row to every row of an `r×c` matrix.
pub fn add_bias(tape: &mut Tape, a: Var, bias: Var) -> Result<Var> {
    let r = tape.shape(a)[0];
    let tiled = tape.gather_rows(bias, vec![0; r])?;
    tape.add(a, tiled)
}

#[derive(Debug, Clone, Copy)]
pub struct DmpnnOutput {
    /// `n × hidden`
    pub x_out: Var,
    /// `n × n × hidden`, zero off the edge set.
    pub e_out: Var,
    /// Final directed edge states, one row per directed edge.
    pub edge_states: Var,
}

/// Runs the encoder on a graph already recorded on the tape.
#[allow(clippy::too_many_arguments)]
pub fn forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    p: &DmpnnVars,
    gv: &GraphVars,
    edges: &DirectedEdges,
    cfg: &DmpnnConfig,
    training: bool,
    rng: &mut R,
) -> Result<DmpnnOutput> {
    cfg.validate()?;
    let h0 = init_edge_states(tape, p, gv, edges)?;
    let mut h = h0;
    for _ in 0..cfg.steps {
        h = message_step(tape, p, edges, h, h0, cfg.dropout, training, rng)?;
    }
    let x_out = node_update(tape, p, gv, edges, h)?;
    let hidden = tape.shape(h)[1];
    let dense = tape.scatter_add_rows(h, edges.flat(), edges.n * edges.n)?;
    let e_out = tape.reshape(dense, [edges.n, edges.n, hidden])?;
    Ok(DmpnnOutput {
        x_out,
        e_out,
        edge_states: h,
    })
}

/// Evaluation-mode encoder on plain tensors: `(X_out, E_out)`.
pub fn encode(g: &Graph, params: &DmpnnParams, cfg: &DmpnnConfig) -> Result<(Tensor, Tensor)> {
    params.check_dims(g)?;
    let mut tape = Tape::new();
    let p = params.register(&mut tape, false)?;
    let edges = DirectedEdges::of(g);
    let gv = graph_vars(&mut tape, g, &edges)?;
    let out = forward(&mut tape, &p, &gv, &edges, cfg, false, &mut rand::rng())?;
    Ok((tape.value(out.x_out).clone(), tape.value(out.e_out).clone()))
}

/// Column means of an `n × h` matrix, as a `1 × h` row.
pub fn readout_mean(tape: &mut Tape, x: Var) -> Result<Var> {
    if tape.shape(x).first() == Some(&0) {
        return Err(Error::InvalidArgument(
            "readout of an empty node set".into(),
        ));
    }
    tape.mean_rows(x)
}

/// `Σ_a w_a X_a / Σ_a w_a` for node weights `w` of shape `r × 1`.
pub fn readout_weighted(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let total = weight_total(tape, w)?;
    let num = readout_weighted_sum(tape, x, w)?;
    tape.div(num, total)
}

/// `Σ_a w_a X_a` as a `1 × h` row.
pub fn readout_weighted_sum(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let wt = tape.transpose(w)?;
    tape.matmul(wt, x)
}

fn weight_total(tape: &mut Tape, w: Var) -> Result<Var> {
    let total = tape.sum_all(w)?;
    if tape.value(total).data()[0].abs() < 1e-12 {
        return Err(Error::InvalidArgument("readout weights sum to zero".into()));
    }
    Ok(total)
}
