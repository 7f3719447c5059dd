//! The full graph-level predictor:
//! encoder → grouping matrix → pooling → dense message passing on the
//! pooled graph → readout → linear head.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dmpnn::{
    self, add_bias, init_uniform, DirectedEdges, DmpnnConfig, DmpnnParams, DmpnnVars,
};
use crate::error::{Error, Result};
use crate::graph_data::{Graph, Task};
use crate::linalg::EigBackwardConfig;
use crate::pooling::{self, PairClassifier, PairClassifierVars};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "gmpool-checkpoint/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Gmpool,
    Ngmpool,
    None,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmpool" => Ok(Self::Gmpool),
            "ngmpool" => Ok(Self::Ngmpool),
            "none" => Ok(Self::None),
            other => Err(Error::InvalidArgument(format!("unknown pooling '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Message-passing steps before pooling.
    pub steps_pre: usize,
    /// Dense message-passing steps on the pooled graph.
    pub steps_post: usize,
    pub dropout: f64,
    pub pooling: Pooling,
    pub readout: Readout,
    pub clamp_diagonal: bool,
    pub eig: EigBackwardConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 200,
            steps_pre: 4,
            steps_post: 2,
            dropout: 0.15,
            pooling: Pooling::Gmpool,
            readout: Readout::Mean,
            clamp_diagonal: false,
            eig: EigBackwardConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> DmpnnConfig {
        DmpnnConfig {
            hidden: self.hidden,
            steps: self.steps_pre,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        self.eig.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: DmpnnParams,
    pub classifier: PairClassifier,
    pub post_w_e: Tensor,
    pub post_w_n: Tensor,
    pub post_b_n: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ModelParams {
    fn init<R: Rng + ?Sized>(d_n: usize, d_e: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        let h = cfg.hidden;
        let encoder = DmpnnParams::init(d_n, d_e, &cfg.encoder(), rng);
        // Non-positive weights: at initialization the grouping probability
        // decreases with feature distance.
        let classifier = PairClassifier {
            w: init_uniform(h, 1, h, rng).map(|v| -v.abs()),
            b: init_uniform(1, 1, h, rng),
        };
        Self {
            encoder,
            classifier,
            post_w_e: init_uniform(h, h, h, rng),
            post_w_n: init_uniform(2 * h, h, 2 * h, rng),
            post_b_n: init_uniform(1, h, 2 * h, rng),
            head_w: init_uniform(h, 1, h, rng),
            head_b: init_uniform(1, 1, h, rng),
        }
    }

    /// Parameters in a fixed order, with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .encoder
            .named()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), t))
            .collect();
        out.extend([
            ("classifier.w".to_string(), &self.classifier.w),
            ("classifier.b".to_string(), &self.classifier.b),
            ("post.w_e".to_string(), &self.post_w_e),
            ("post.w_n".to_string(), &self.post_w_n),
            ("post.b_n".to_string(), &self.post_b_n),
            ("head.w".to_string(), &self.head_w),
            ("head.b".to_string(), &self.head_b),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .encoder
            .named_mut()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        out.extend([
            &mut self.classifier.w,
            &mut self.classifier.b,
            &mut self.post_w_e,
            &mut self.post_w_n,
            &mut self.post_b_n,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<ModelVars> {
        Ok(ModelVars {
            encoder: self.encoder.register(tape, trainable)?,
            classifier: self.classifier.register(tape, trainable)?,
            post_w_e: tape.leaf(self.post_w_e.clone(), trainable)?,
            post_w_n: tape.leaf(self.post_w_n.clone(), trainable)?,
            post_b_n: tape.leaf(self.post_b_n.clone(), trainable)?,
            head_w: tape.leaf(self.head_w.clone(), trainable)?,
            head_b: tape.leaf(self.head_b.clone(), trainable)?,
        })
    }
}

/// Tape handles of [`ModelParams`].
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub encoder: DmpnnVars,
    pub classifier: PairClassifierVars,
    pub post_w_e: Var,
    pub post_w_n: Var,
    pub post_b_n: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl ModelVars {
    /// Same order as [`ModelParams::named`].
    pub fn all(&self) -> Vec<Var> {
        let e = &self.encoder;
        vec![
            e.w_init,
            e.b_init,
            e.w_e,
            e.w_n,
            e.b_n,
            self.classifier.w,
            self.classifier.b,
            self.post_w_e,
            self.post_w_n,
            self.post_b_n,
            self.head_w,
            self.head_b,
        ]
    }
}

/// Intermediate handles from one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardPass {
    /// `1 × 1` regression value or classification logit.
    pub output: Var,
    pub node_states: Var,
    pub grouping: Option<Var>,
    pub operator: Option<Var>,
    pub embedding: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub task: Task,
    pub d_n: usize,
    pub d_e: usize,
    pub params: ModelParams,
}

impl Model {
    pub fn new(d_n: usize, d_e: usize, task: Task, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if d_n == 0 || d_e == 0 {
            return Err(Error::InvalidArgument(
                "feature dimensions must be positive".into(),
            ));
        }
        let params = ModelParams::init(d_n, d_e, &config, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            config,
            task,
            d_n,
            d_e,
            params,
        })
    }

    fn check_graph(&self, g: &Graph) -> Result<()> {
        if g.d_n() != self.d_n || g.d_e() != self.d_e {
            return Err(Error::shape(
                "model",
                format!(
                    "graph has d_n={} d_e={}, model expects d_n={} d_e={}",
                    g.d_n(),
                    g.d_e(),
                    self.d_n,
                    self.d_e
                ),
            ));
        }
        Ok(())
    }

    /// Records one forward pass for `g` using already-registered parameters.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        g: &Graph,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        self.check_graph(g)?;
        let cfg = &self.config;
        let edges = DirectedEdges::of(g);
        let gv = dmpnn::graph_vars(tape, g, &edges)?;
        let enc = dmpnn::forward(
            tape,
            &vars.encoder,
            &gv,
            &edges,
            &cfg.encoder(),
            training,
            rng,
        )?;

        let (embedding, node_states, grouping, operator) = match cfg.pooling {
            Pooling::None => {
                let z = match cfg.readout {
                    Readout::Mean => dmpnn::readout_mean(tape, enc.x_out)?,
                    Readout::Sum => {
                        let ones = tape.constant(Tensor::ones([g.n(), 1]))?;
                        dmpnn::readout_weighted_sum(tape, enc.x_out, ones)?
                    }
                };
                (z, enc.x_out, None, None)
            }
            Pooling::Gmpool | Pooling::Ngmpool => {
                let t = pooling::pairwise_input(tape, enc.x_out)?;
                let m =
                    pooling::grouping_matrix(tape, t, &vars.classifier, g.n(), cfg.clamp_diagonal)?;
                let (coarse, op) = if cfg.pooling == Pooling::Gmpool {
                    let s = pooling::gmpool_operator(tape, m, cfg.eig)?;
                    (
                        pooling::gmpool_coarsen(tape, enc.x_out, enc.e_out, gv.a, s)?,
                        Some(s),
                    )
                } else {
                    (
                        pooling::ngmpool_coarsen(tape, enc.x_out, enc.e_out, gv.a, m)?,
                        None,
                    )
                };
                let x = self.post_steps(tape, vars, coarse.x, coarse.e, training, rng)?;
                let z = match cfg.readout {
                    Readout::Mean => dmpnn::readout_weighted(tape, x, coarse.ones)?,
                    Readout::Sum => dmpnn::readout_weighted_sum(tape, x, coarse.ones)?,
                };
                (z, x, Some(m), op)
            }
        };
        let out = tape.matmul(embedding, vars.head_w)?;
        let output = tape.add(out, vars.head_b)?;
        Ok(ForwardPass {
            output,
            node_states,
            grouping,
            operator,
            embedding,
        })
    }

    /// Dense message passing on a pooled graph where every pair is connected
    /// with edge state `Ẽ_ab`, followed by one node update.
    fn post_steps<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        x: Var,
        e: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let r = tape.shape(x)[0];
        let h = self.config.hidden;
        let h0 = tape.reshape(e, [r * r, h])?;
        let owner: Vec<usize> = (0..r * r).map(|k| k / r).collect();
        let mut state = h0;
        for _ in 0..self.config.steps_post {
            // Row a·r + b of `flipped` holds H_ba.
            let grid = tape.reshape(state, [r, r, h])?;
            let flipped = tape.swap_leading_axes(grid)?;
            let flipped = tape.reshape(flipped, [r * r, h])?;
            let incoming = tape.scatter_add_rows(flipped, owner.clone(), r)?;
            let at_src = tape.gather_rows(incoming, owner.clone())?;
            let m = tape.sub(at_src, flipped)?;
            let lin = tape.matmul(m, vars.post_w_e)?;
            let lin = tape.dropout(lin, self.config.dropout, training, rng)?;
            let pre = tape.add(h0, lin)?;
            state = tape.relu(pre)?;
        }
        let agg = tape.scatter_add_rows(state, owner, r)?;
        let input = tape.concat(x, agg)?;
        let lin = tape.matmul(input, vars.post_w_n)?;
        let lin = add_bias(tape, lin, vars.post_b_n)?;
        tape.relu(lin)
    }

    /// Evaluation-mode raw output: regression value or classification logit.
    pub fn predict_raw(&self, g: &Graph) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false)?;
        let pass = self.forward(&mut tape, &vars, g, false, &mut rand::rng())?;
        Ok(tape.value(pass.output).data()[0])
    }

    /// Regression value, or class-1 probability for classification.
    pub fn predict(&self, g: &Graph) -> Result<f64> {
        let raw = self.predict_raw(g)?;
        Ok(match self.task {
            Task::Regression => raw,
            Task::Classification => crate::autodiff::sigmoid(raw),
        })
    }

    /// Evaluation-mode grouping matrix of `g`.
    pub fn grouping_matrix(&self, g: &Graph) -> Result<Tensor> {
        self.check_graph(g)?;
        let (x_out, _) = dmpnn::encode(g, &self.params.encoder, &self.config.encoder())?;
        Ok(self
            .params
            .classifier
            .grouping_matrix(&x_out, self.config.clamp_diagonal)?
            .into_tensor())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config,
            task: self.task,
            d_n: self.d_n,
            d_e: self.d_e,
            optimizer: OptimizerMeta::default(),
            params: self
                .params
                .named()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    tensor: t.clone(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint format '{}', expected '{CHECKPOINT_FORMAT}'",
                ck.format
            )));
        }
        let mut model = Model::new(ck.d_n, ck.d_e, ck.task, ck.config, 0)?;
        let names: Vec<String> = model.params.named().into_iter().map(|(n, _)| n).collect();
        if ck.params.len() != names.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} tensors, expected {}",
                ck.params.len(),
                names.len()
            )));
        }
        for ((slot, name), stored) in model
            .params
            .tensors_mut()
            .into_iter()
            .zip(&names)
            .zip(ck.params)
        {
            if &stored.name != name {
                return Err(Error::InvalidArgument(format!(
                    "expected tensor '{name}', found '{}'",
                    stored.name
                )));
            }
            if stored.tensor.shape() != slot.shape() {
                return Err(Error::shape(
                    "checkpoint",
                    format!(
                        "'{name}' has shape {:?}, expected {:?}",
                        stored.tensor.shape(),
                        slot.shape()
                    ),
                ));
            }
            let t = Tensor::new(stored.tensor.shape().to_vec(), stored.tensor.into_data())?;
            if !t.all_finite() {
                return Err(Error::NonFinite { op: "checkpoint" });
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_checkpoint())?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub name: String,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerMeta {
    fn default() -> Self {
        Self {
            name: "adam".into(),
            beta1: crate::training::ADAM_BETA1,
            beta2: crate::training::ADAM_BETA2,
            eps: crate::training::ADAM_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    #[serde(flatten)]
    pub tensor: Tensor,
}

/// Serialized model: format tag, configuration and every parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub task: Task,
    pub d_n: usize,
    pub d_e: usize,
    pub optimizer: OptimizerMeta,
    pub params: Vec<NamedTensor>,
}
