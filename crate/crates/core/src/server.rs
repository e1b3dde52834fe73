//! Transformer-based prototype aggregation: token embedding, one pre-norm
//! encoder layer, class-embedding attention, global prototype emission, and
//! aggregator training on the consistency loss.

use crate::client::{ClientUpload, UploadEntry};
use crate::error::{Error, Result};
use crate::numerics::{
    cosine_sim, grad_check, softmax_scaled, DifferentiableParam, Tape, Tensor, Var,
};
use crate::rng::{derive_rng, stream};

const LN_EPS: f64 = 1e-5;
const COS_EPS: f64 = 1e-8;
const EMBED_STD: f64 = 0.02;

/// Stacked client uploads for one round: token (k, c) holds client row k's
/// mean for class c. Rows the client did not upload are exactly zero and
/// masked out of attention.
#[derive(Debug, Clone)]
pub struct PrototypeTensor {
    values: Tensor,
    mask: Vec<bool>,
    counts: Vec<usize>,
    client_ids: Vec<usize>,
    class_count: usize,
    dim: usize,
}

impl PrototypeTensor {
    /// Stacks uploads in the given order. Every upload must agree on the
    /// class count and feature width; duplicate client ids are a protocol
    /// violation, and a round with no present (client, class) pair is empty.
    pub fn assemble(uploads: &[ClientUpload], class_count: usize) -> Result<Self> {
        if uploads.is_empty() {
            return Err(Error::EmptyRound);
        }
        let dim = uploads
            .iter()
            .find_map(|u| u.feature_dim())
            .ok_or(Error::EmptyRound)?;
        let m = uploads.len();
        let mut values = Tensor::zeros(&[m * class_count, dim]);
        let mut mask = vec![false; m * class_count];
        let mut counts = vec![0usize; m * class_count];
        let mut client_ids = Vec::with_capacity(m);
        for (k, upload) in uploads.iter().enumerate() {
            if upload.class_count != class_count {
                return Err(Error::Protocol(format!(
                    "client {} uploaded {} classes, round expects {class_count}",
                    upload.client_id, upload.class_count
                )));
            }
            if client_ids.contains(&upload.client_id) {
                return Err(Error::Protocol(format!(
                    "duplicate upload from client {}",
                    upload.client_id
                )));
            }
            client_ids.push(upload.client_id);
            for entry in &upload.entries {
                if entry.class >= class_count {
                    return Err(Error::Protocol(format!(
                        "client {} uploaded class {} of {class_count}",
                        upload.client_id, entry.class
                    )));
                }
                if entry.mean.len() != dim {
                    return Err(Error::Shape {
                        op: "assemble",
                        expected: format!("mean of width {dim}"),
                        got: format!("{}", entry.mean.len()),
                    });
                }
                if entry.count == 0 {
                    return Err(Error::Protocol(format!(
                        "client {} uploaded class {} with count 0",
                        upload.client_id, entry.class
                    )));
                }
                if entry.mean.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!(
                            "upload mean from client {} class {}",
                            upload.client_id, entry.class
                        ),
                    });
                }
                let t = k * class_count + entry.class;
                if mask[t] {
                    return Err(Error::Protocol(format!(
                        "client {} uploaded class {} twice",
                        upload.client_id, entry.class
                    )));
                }
                values.row_mut(t).copy_from_slice(&entry.mean);
                mask[t] = true;
                counts[t] = entry.count;
            }
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyRound);
        }
        Ok(PrototypeTensor {
            values,
            mask,
            counts,
            client_ids,
            class_count,
            dim,
        })
    }

    pub fn clients(&self) -> usize {
        self.client_ids.len()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn client_ids(&self) -> &[usize] {
        &self.client_ids
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Token mask in (client-major, class-minor) order.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn token(&self, k: usize, c: usize) -> usize {
        k * self.class_count + c
    }

    pub fn is_present(&self, k: usize, c: usize) -> bool {
        self.mask[self.token(k, c)]
    }

    /// Upload-row indices of clients holding class `c`, ascending.
    pub fn present_rows(&self, c: usize) -> Vec<usize> {
        (0..self.clients())
            .filter(|&k| self.is_present(k, c))
            .collect()
    }

    pub fn present_pairs(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Inverse of `assemble`: recovers the uploads in row order.
    pub fn split(&self) -> Vec<ClientUpload> {
        self.client_ids
            .iter()
            .enumerate()
            .map(|(k, &client_id)| ClientUpload {
                client_id,
                class_count: self.class_count,
                entries: (0..self.class_count)
                    .filter(|&c| self.is_present(k, c))
                    .map(|c| {
                        let t = self.token(k, c);
                        UploadEntry {
                            class: c,
                            count: self.counts[t],
                            mean: self.values.row(t).to_vec(),
                        }
                    })
                    .collect(),
            })
            .collect()
    }
}

/// Server-side prototype table. Rows stay zero (and flagged uninitialized)
/// until some round aggregates that class; stale classes keep old values.
#[derive(Debug, Clone)]
pub struct GlobalPrototypes {
    values: Tensor,
    initialized: Vec<bool>,
}

impl GlobalPrototypes {
    pub fn new(class_count: usize, dim: usize) -> Self {
        GlobalPrototypes {
            values: Tensor::zeros(&[class_count, dim]),
            initialized: vec![false; class_count],
        }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn initialized(&self) -> &[bool] {
        &self.initialized
    }

    pub fn class_count(&self) -> usize {
        self.values.rows()
    }

    /// Writes the freshly aggregated classes; `None` entries are stale and
    /// keep their previous value.
    pub fn apply(&mut self, per_class: &[Option<Tensor>]) -> Result<()> {
        if per_class.len() != self.class_count() {
            return Err(Error::Shape {
                op: "GlobalPrototypes::apply",
                expected: format!("{} class entries", self.class_count()),
                got: format!("{}", per_class.len()),
            });
        }
        for (c, update) in per_class.iter().enumerate() {
            if let Some(p) = update {
                if !p.is_vector() || p.numel() != self.values.cols() {
                    return Err(Error::Shape {
                        op: "GlobalPrototypes::apply",
                        expected: format!("vector of length {}", self.values.cols()),
                        got: format!("{:?}", p.shape()),
                    });
                }
                self.values.row_mut(c).copy_from_slice(p.data());
                self.initialized[c] = true;
            }
        }
        Ok(())
    }
}

/// Per-class attention over the participating clients. `weights[c][k]` is
/// upload row k's weight for class c; absent pairs hold exactly zero.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub client_ids: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
}

/// Outcome of one round of aggregator training.
#[derive(Debug, Clone, Copy)]
pub struct TrainOutcome {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub accepted_steps: usize,
}

/// The learned aggregator: client/class embedding tables plus one pre-norm
/// transformer encoder layer (multi-head self-attention over all (k, c)
/// tokens with a presence key-mask, then a tanh feed-forward, both residual).
pub struct AggregatorState {
    heads: usize,
    dim: usize,
    /// The identity configuration skips the input normalization so tokens
    /// pass through the residual stream untouched.
    apply_input_ln: bool,
    e_client: DifferentiableParam,
    e_class: DifferentiableParam,
    ln_in_gain: DifferentiableParam,
    ln_in_bias: DifferentiableParam,
    wq: DifferentiableParam,
    wk: DifferentiableParam,
    wv: DifferentiableParam,
    wo: DifferentiableParam,
    ln1_gain: DifferentiableParam,
    ln1_bias: DifferentiableParam,
    ln2_gain: DifferentiableParam,
    ln2_bias: DifferentiableParam,
    w1: DifferentiableParam,
    b1: DifferentiableParam,
    w2: DifferentiableParam,
    b2: DifferentiableParam,
}

struct AggVars {
    e_client: Var,
    e_class: Var,
    ln_in_gain: Var,
    ln_in_bias: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln1_gain: Var,
    ln1_bias: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl AggregatorState {
    /// Trainable init. The attention output and second feed-forward weights
    /// start at zero, so the encoder layer is an exact identity on the
    /// residual stream; the input normalization still reshapes tokens.
    pub fn new(
        max_clients: usize,
        class_count: usize,
        dim: usize,
        heads: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::validate_dims(max_clients, class_count, dim, heads)?;
        let mut rng = derive_rng(seed, &[stream::AGG_INIT]);
        let proj_std = 1.0 / (dim as f64).sqrt();
        Ok(AggregatorState {
            heads,
            dim,
            apply_input_ln: true,
            e_client: DifferentiableParam::new(Tensor::randn(
                &[max_clients, dim],
                EMBED_STD,
                &mut rng,
            )),
            e_class: DifferentiableParam::new(Tensor::randn(
                &[class_count, dim],
                EMBED_STD,
                &mut rng,
            )),
            ln_in_gain: DifferentiableParam::new(Tensor::full(&[dim], 1.0)),
            ln_in_bias: DifferentiableParam::new(Tensor::zeros(&[dim])),
            wq: DifferentiableParam::new(Tensor::randn(&[dim, dim], proj_std, &mut rng)),
            wk: DifferentiableParam::new(Tensor::randn(&[dim, dim], proj_std, &mut rng)),
            wv: DifferentiableParam::new(Tensor::randn(&[dim, dim], proj_std, &mut rng)),
            wo: DifferentiableParam::new(Tensor::zeros(&[dim, dim])),
            ln1_gain: DifferentiableParam::new(Tensor::full(&[dim], 1.0)),
            ln1_bias: DifferentiableParam::new(Tensor::zeros(&[dim])),
            ln2_gain: DifferentiableParam::new(Tensor::full(&[dim], 1.0)),
            ln2_bias: DifferentiableParam::new(Tensor::zeros(&[dim])),
            w1: DifferentiableParam::new(Tensor::randn(&[dim, 4 * dim], proj_std, &mut rng)),
            b1: DifferentiableParam::new(Tensor::zeros(&[4 * dim])),
            w2: DifferentiableParam::new(Tensor::zeros(&[4 * dim, dim])),
            b2: DifferentiableParam::new(Tensor::zeros(&[dim])),
        })
    }

    /// Exact pass-through configuration: zero embeddings, no input
    /// normalization, zero projections. Z equals the stacked uploads and
    /// attention scores are all equal, so aggregation reduces to the
    /// uniform average over present clients.
    pub fn identity_init(
        max_clients: usize,
        class_count: usize,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Self::validate_dims(max_clients, class_count, dim, heads)?;
        Ok(AggregatorState {
            heads,
            dim,
            apply_input_ln: false,
            e_client: DifferentiableParam::new(Tensor::zeros(&[max_clients, dim])),
            e_class: DifferentiableParam::new(Tensor::zeros(&[class_count, dim])),
            ln_in_gain: DifferentiableParam::new(Tensor::full(&[dim], 1.0)),
            ln_in_bias: DifferentiableParam::new(Tensor::zeros(&[dim])),
            wq: DifferentiableParam::new(Tensor::zeros(&[dim, dim])),
            wk: DifferentiableParam::new(Tensor::zeros(&[dim, dim])),
            wv: DifferentiableParam::new(Tensor::zeros(&[dim, dim])),
            wo: DifferentiableParam::new(Tensor::zeros(&[dim, dim])),
            ln1_gain: DifferentiableParam::new(Tensor::full(&[dim], 1.0)),
            ln1_bias: DifferentiableParam::new(Tensor::zeros(&[dim])),
            ln2_gain: DifferentiableParam::new(Tensor::full(&[dim], 1.0)),
            ln2_bias: DifferentiableParam::new(Tensor::zeros(&[dim])),
            w1: DifferentiableParam::new(Tensor::zeros(&[dim, 4 * dim])),
            b1: DifferentiableParam::new(Tensor::zeros(&[4 * dim])),
            w2: DifferentiableParam::new(Tensor::zeros(&[4 * dim, dim])),
            b2: DifferentiableParam::new(Tensor::zeros(&[dim])),
        })
    }

    fn validate_dims(
        max_clients: usize,
        class_count: usize,
        dim: usize,
        heads: usize,
    ) -> Result<()> {
        if max_clients == 0 || class_count == 0 {
            return Err(Error::Config(
                "aggregator needs at least one client and one class".into(),
            ));
        }
        if heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "feature dim {dim} must be a positive multiple of {heads} heads"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.e_class.value.rows()
    }

    pub fn max_clients(&self) -> usize {
        self.e_client.value.rows()
    }

    fn validate_cp(&self, cp: &PrototypeTensor) -> Result<()> {
        if cp.dim() != self.dim {
            return Err(Error::Shape {
                op: "aggregator",
                expected: format!("uploads of width {}", self.dim),
                got: format!("{}", cp.dim()),
            });
        }
        if cp.class_count() != self.class_count() {
            return Err(Error::Shape {
                op: "aggregator",
                expected: format!("{} classes", self.class_count()),
                got: format!("{}", cp.class_count()),
            });
        }
        if let Some(&bad) = cp.client_ids().iter().find(|&&id| id >= self.max_clients()) {
            return Err(Error::Protocol(format!(
                "client id {bad} outside embedding table of {}",
                self.max_clients()
            )));
        }
        Ok(())
    }

    /// Contextualized prototypes for the whole token sequence, `[M*C, d]`.
    pub fn forward(&self, cp: &PrototypeTensor) -> Result<Tensor> {
        self.validate_cp(cp)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let z = self.forward_nodes(&mut tape, &vars, cp);
        Ok(tape.value(z).clone())
    }

    /// Eqs. for the full aggregation pass: encode all tokens, then for each
    /// class attend over the present clients with the class embedding as
    /// query. Classes nobody uploaded come back `None` (stale).
    pub fn aggregate(
        &self,
        cp: &PrototypeTensor,
    ) -> Result<(Vec<Option<Tensor>>, AttentionWeights, Tensor)> {
        let z = self.forward(cp)?;
        let c_total = self.class_count();
        let scale = (self.dim as f64).sqrt();
        let mut per_class: Vec<Option<Tensor>> = Vec::with_capacity(c_total);
        let mut weights = vec![vec![0.0; cp.clients()]; c_total];
        for c in 0..c_total {
            let rows = cp.present_rows(c);
            if rows.is_empty() {
                per_class.push(None);
                continue;
            }
            let e_c = self.e_class.value.row(c);
            let scores: Vec<f64> = rows
                .iter()
                .map(|&k| {
                    z.row(cp.token(k, c))
                        .iter()
                        .zip(e_c)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                })
                .collect();
            let alpha = softmax_scaled(&scores, scale)?;
            let mut p = vec![0.0; self.dim];
            for (&k, &a) in rows.iter().zip(&alpha) {
                weights[c][k] = a;
                for (acc, v) in p.iter_mut().zip(z.row(cp.token(k, c))) {
                    *acc += a * v;
                }
            }
            per_class.push(Some(Tensor::vector(p)));
        }
        Ok((
            per_class,
            AttentionWeights {
                client_ids: cp.client_ids().to_vec(),
                weights,
            },
            z,
        ))
    }

    /// `steps` SGD steps on the consistency loss with per-step rejection: a
    /// step that increases the loss is reverted and training stops for the
    /// round, so the returned state never scores worse than the input.
    pub fn train(&mut self, cp: &PrototypeTensor, steps: usize, lr: f64) -> Result<TrainOutcome> {
        if steps == 0 {
            return Err(Error::Domain {
                op: "train_aggregator",
                message: "steps must be >= 1".into(),
            });
        }
        self.validate_cp(cp)?;
        let initial_snapshot = self.snapshot();
        let initial_loss = self.eval_consistency(cp)?;
        if !initial_loss.is_finite() {
            return Err(Error::NonFinite {
                context: "server consistency loss".into(),
            });
        }
        let mut current_loss = initial_loss;
        let mut accepted = 0usize;
        for _ in 0..steps {
            let before = self.snapshot();
            let mut tape = Tape::new();
            let vars = self.register(&mut tape);
            let loss_node = self.consistency_nodes(&mut tape, &vars, cp);
            tape.backward(loss_node);
            self.apply_step(&tape, &vars, lr);
            let after = self.eval_consistency(cp)?;
            if !after.is_finite() {
                self.restore(&initial_snapshot);
                return Err(Error::NonFinite {
                    context: "server consistency loss after step".into(),
                });
            }
            if after > current_loss {
                self.restore(&before);
                break;
            }
            current_loss = after;
            accepted += 1;
        }
        Ok(TrainOutcome {
            initial_loss,
            final_loss: current_loss,
            accepted_steps: accepted,
        })
    }

    /// Consistency loss of this aggregator's Z on `cp`.
    pub fn eval_consistency(&self, cp: &PrototypeTensor) -> Result<f64> {
        let z = self.forward(cp)?;
        server_consistency_loss(&z, cp)
    }

    /// Finite-difference check of the consistency loss against the tape
    /// gradients over every server parameter; returns max relative error.
    pub fn consistency_grad_check(
        &self,
        cp: &PrototypeTensor,
        step: f64,
        coordinate_cap: Option<usize>,
    ) -> Result<f64> {
        self.validate_cp(cp)?;
        let inputs = self.param_tensors();
        grad_check(&inputs, step, coordinate_cap, |tape, vars| {
            let bound = self.bind_vars(vars);
            self.consistency_nodes(tape, &bound, cp)
        })
    }

    fn forward_nodes(&self, tape: &mut Tape, vars: &AggVars, cp: &PrototypeTensor) -> Var {
        let m = cp.clients();
        let c_total = cp.class_count();
        let mut client_rows = Vec::with_capacity(m * c_total);
        let mut class_rows = Vec::with_capacity(m * c_total);
        for k in 0..m {
            for c in 0..c_total {
                client_rows.push(cp.client_ids()[k]);
                class_rows.push(c);
            }
        }
        let x0 = tape.leaf(cp.values().clone());
        let ec = tape.gather_rows(vars.e_client, &client_rows);
        let ecl = tape.gather_rows(vars.e_class, &class_rows);
        let sum = tape.add(x0, ec);
        let tokens = tape.add(sum, ecl);
        let x = if self.apply_input_ln {
            tape.layer_norm_rows(tokens, vars.ln_in_gain, vars.ln_in_bias, LN_EPS)
        } else {
            tokens
        };

        // Pre-norm attention block with the presence key-mask.
        let xn = tape.layer_norm_rows(x, vars.ln1_gain, vars.ln1_bias, LN_EPS);
        let q = tape.matmul(xn, vars.wq);
        let k = tape.matmul(xn, vars.wk);
        let v = tape.matmul(xn, vars.wv);
        let dh = self.dim / self.heads;
        let inv_scale = 1.0 / (dh as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_bt(qh, kh);
            let scaled = tape.affine(scores, inv_scale, 0.0);
            let attn = tape.softmax_rows_masked(scaled, cp.mask());
            head_outputs.push(tape.matmul(attn, vh));
        }
        let concat = tape.concat_cols(&head_outputs);
        let projected = tape.matmul(concat, vars.wo);
        let x1 = tape.add(x, projected);

        // Pre-norm feed-forward block, tanh nonlinearity.
        let x1n = tape.layer_norm_rows(x1, vars.ln2_gain, vars.ln2_bias, LN_EPS);
        let f1 = tape.matmul(x1n, vars.w1);
        let f1b = tape.add_row(f1, vars.b1);
        let ft = tape.tanh(f1b);
        let f2 = tape.matmul(ft, vars.w2);
        let f2b = tape.add_row(f2, vars.b2);
        tape.add(x1, f2b)
    }

    /// Mean over present (k, c) pairs of 1 - cos(masked class mean of Z,
    /// uploaded prototype). Pair order is client-major to match the pure
    /// reference implementation bit for bit.
    fn consistency_nodes(&self, tape: &mut Tape, vars: &AggVars, cp: &PrototypeTensor) -> Var {
        let z = self.forward_nodes(tape, vars, cp);
        let c_total = cp.class_count();
        let mut groups = Vec::new();
        let mut group_of_class = vec![usize::MAX; c_total];
        for c in 0..c_total {
            let rows = cp.present_rows(c);
            if !rows.is_empty() {
                group_of_class[c] = groups.len();
                groups.push(rows.iter().map(|&k| cp.token(k, c)).collect::<Vec<usize>>());
            }
        }
        let zbar = tape.group_mean_rows(z, &groups);
        let mut pair_groups = Vec::new();
        let mut cp_rows: Vec<&[f64]> = Vec::new();
        for k in 0..cp.clients() {
            for c in 0..c_total {
                if cp.is_present(k, c) {
                    pair_groups.push(group_of_class[c]);
                    cp_rows.push(cp.values().row(cp.token(k, c)));
                }
            }
        }
        let zbar_rows = tape.gather_rows(zbar, &pair_groups);
        let cp_mat = tape.leaf(Tensor::from_rows(&cp_rows).expect("cp rows"));
        let cos = tape.row_cosine(zbar_rows, cp_mat, COS_EPS);
        let one_minus = tape.affine(cos, -1.0, 1.0);
        tape.mean(one_minus)
    }

    /// Canonical parameter order shared by `register`, `bind_vars`,
    /// `param_tensors`, `snapshot`, and `apply_step`.
    fn param_refs(&self) -> [&DifferentiableParam; 16] {
        [
            &self.e_client,
            &self.e_class,
            &self.ln_in_gain,
            &self.ln_in_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn param_refs_mut(&mut self) -> [&mut DifferentiableParam; 16] {
        [
            &mut self.e_client,
            &mut self.e_class,
            &mut self.ln_in_gain,
            &mut self.ln_in_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn param_tensors(&self) -> Vec<Tensor> {
        self.param_refs().iter().map(|p| p.value.clone()).collect()
    }

    fn register(&self, tape: &mut Tape) -> AggVars {
        let vars: Vec<Var> = self
            .param_refs()
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        Self::vars_from_slice(&vars)
    }

    fn bind_vars(&self, vars: &[Var]) -> AggVars {
        assert_eq!(vars.len(), 16, "aggregator expects 16 parameter vars");
        Self::vars_from_slice(vars)
    }

    fn vars_from_slice(v: &[Var]) -> AggVars {
        AggVars {
            e_client: v[0],
            e_class: v[1],
            ln_in_gain: v[2],
            ln_in_bias: v[3],
            wq: v[4],
            wk: v[5],
            wv: v[6],
            wo: v[7],
            ln1_gain: v[8],
            ln1_bias: v[9],
            ln2_gain: v[10],
            ln2_bias: v[11],
            w1: v[12],
            b1: v[13],
            w2: v[14],
            b2: v[15],
        }
    }

    fn vars_as_slice(vars: &AggVars) -> [Var; 16] {
        [
            vars.e_client,
            vars.e_class,
            vars.ln_in_gain,
            vars.ln_in_bias,
            vars.wq,
            vars.wk,
            vars.wv,
            vars.wo,
            vars.ln1_gain,
            vars.ln1_bias,
            vars.ln2_gain,
            vars.ln2_bias,
            vars.w1,
            vars.b1,
            vars.w2,
            vars.b2,
        ]
    }

    fn apply_step(&mut self, tape: &Tape, vars: &AggVars, lr: f64) {
        let var_list = Self::vars_as_slice(vars);
        for (param, var) in self.param_refs_mut().into_iter().zip(var_list) {
            param.accumulate(&tape.grad(var));
            param.sgd_step(lr);
            param.zero_grad();
        }
    }

    /// Copies all 16 trainable tensors in their canonical order: client
    /// embeddings, class embeddings, input LN gain and bias, Wq, Wk, Wv, Wo,
    /// attention LN gain and bias, feed-forward LN gain and bias, W1, b1,
    /// W2, b2. `restore` consumes the same order.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.param_tensors()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), 16, "aggregator snapshot has 16 tensors");
        for (param, value) in self.param_refs_mut().into_iter().zip(snapshot) {
            param.value = value.clone();
        }
    }
}

/// Reference consistency loss on a precomputed Z: mean over present (k, c)
/// pairs, client-major, of 1 - cos(masked class mean of Z, upload).
pub fn server_consistency_loss(z: &Tensor, cp: &PrototypeTensor) -> Result<f64> {
    let tokens = cp.clients() * cp.class_count();
    if !z.is_matrix() || z.rows() != tokens || z.cols() != cp.dim() {
        return Err(Error::Shape {
            op: "server_consistency_loss",
            expected: format!("[{tokens}, {}] contextualized prototypes", cp.dim()),
            got: format!("{:?}", z.shape()),
        });
    }
    let c_total = cp.class_count();
    let mut class_means: Vec<Option<Vec<f64>>> = vec![None; c_total];
    for c in 0..c_total {
        let rows = cp.present_rows(c);
        if rows.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; cp.dim()];
        for &k in &rows {
            for (m, v) in mean.iter_mut().zip(z.row(cp.token(k, c))) {
                *m += v;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        class_means[c] = Some(mean);
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for k in 0..cp.clients() {
        for c in 0..c_total {
            if !cp.is_present(k, c) {
                continue;
            }
            let mean = class_means[c].as_ref().expect("present class has a mean");
            total += 1.0 - cosine_sim(mean, cp.values().row(cp.token(k, c)), COS_EPS)?;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::EmptyRound);
    }
    Ok(total / pairs as f64)
}
