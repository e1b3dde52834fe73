//! Client-side learning: shared feature alignment, content-style
//! decomposition of personal prototypes, FiLM personalization, the gated
//! personalized-prototype reconstruction, and the local update loop.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::data::Dataset;
use crate::encoder::{EncoderParams, EncoderVars, FilmParams, FilmVars};
use crate::error::{Error, Result};
use crate::metrics::EvalResult;
use crate::numerics::{
    grad_check, proto_logits, softmax_scaled, stable_sigmoid, DifferentiableParam, Tape, Tensor,
    Var,
};
use crate::rng::{derive_rng, stream};

/// Residual norms at or below this fraction of `||u||` count as vanished,
/// and the style snaps to an exact zero vector instead of being normalized.
const STYLE_SNAP_REL: f64 = 1e-6;

/// Content-style split of a personal prototype against a global prototype.
#[derive(Debug, Clone)]
pub struct Decomposition {
    /// Projection coefficient; `content` is exactly `coef * p_global`.
    pub coef: f64,
    pub content: Tensor,
    /// Unit-normalized residual, or an exact zero vector when the residual
    /// vanished relative to `u`.
    pub style: Tensor,
    pub residual_norm: f64,
}

/// Splits `u` into a component aligned with the global prototype and a
/// unit-normalized residual style:
/// content = ((u.p)/(||p||^2 + eps)) p, style = (u - content)/(||u - content|| + eps).
pub fn decompose(u: &Tensor, p_global: &Tensor, eps: f64) -> Result<Decomposition> {
    if !u.is_vector() || !p_global.is_vector() || u.numel() != p_global.numel() {
        return Err(Error::Shape {
            op: "decompose",
            expected: "two vectors of equal length".into(),
            got: format!("{:?} and {:?}", u.shape(), p_global.shape()),
        });
    }
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Domain {
            op: "decompose",
            message: format!("eps must be positive and finite, got {eps}"),
        });
    }
    let coef = u.dot(p_global) / (p_global.sq_norm() + eps);
    let content: Vec<f64> = p_global.data().iter().map(|&v| coef * v).collect();
    let raw: Vec<f64> = u.data().iter().zip(&content).map(|(a, b)| a - b).collect();
    let residual_norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let style = if residual_norm <= STYLE_SNAP_REL * u.norm() {
        Tensor::zeros(&[u.numel()])
    } else {
        Tensor::vector(raw.iter().map(|v| v / (residual_norm + eps)).collect())
    };
    Ok(Decomposition {
        coef,
        content: Tensor::vector(content),
        style,
        residual_norm,
    })
}

/// Client hyperparameters. `batch_size: None` takes the whole shard per step.
#[derive(Debug, Clone)]
pub struct ClientHyper {
    pub lambda_pull: f64,
    pub lambda_shared: f64,
    pub learning_rate: f64,
    pub batch_size: Option<usize>,
    /// Off: no FiLM, gate, or pull loss; the local objective reduces to
    /// `(1 + lambda_shared)` times the shared cross-entropy.
    pub personalization: bool,
    /// Diagnostic switch pinning the gate to alpha = 1, which makes every
    /// personalized prototype equal the global one.
    pub force_alpha_one: bool,
    pub eps: f64,
}

impl Default for ClientHyper {
    fn default() -> Self {
        ClientHyper {
            lambda_pull: 0.7,
            lambda_shared: 1.0,
            learning_rate: 0.005,
            batch_size: None,
            personalization: true,
            force_alpha_one: false,
            eps: 1e-8,
        }
    }
}

/// One per-class shared mean carried by a [`ClientUpload`].
#[derive(Debug, Clone, Serialize)]
pub struct UploadEntry {
    pub class: usize,
    pub count: usize,
    pub mean: Vec<f64>,
}

/// The only message a client ever sends: shared per-class means with their
/// counts. Style vectors, personal prototypes, and gate/FiLM weights stay
/// local by construction.
#[derive(Debug, Clone, Serialize)]
pub struct ClientUpload {
    pub client_id: usize,
    pub class_count: usize,
    pub entries: Vec<UploadEntry>,
}

impl ClientUpload {
    pub fn feature_dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.mean.len())
    }

    /// Accounting size: 8 bytes per mean component and a 4-byte count per
    /// included class, plus one presence bit per class rounded up to bytes.
    pub fn wire_bytes(&self) -> usize {
        let payload: usize = self.entries.iter().map(|e| 8 * e.mean.len() + 4).sum();
        payload + self.class_count.div_ceil(8)
    }
}

/// Per-round training statistics, averaged over gradient steps.
#[derive(Debug, Clone, Copy)]
pub struct LocalStats {
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_pull: f64,
    pub loss_shared: f64,
    pub steps: usize,
}

/// Everything one client owns: encoder, FiLM heads, gate, per-class personal
/// prototypes (present classes only), and its train/test shards.
pub struct ClientState {
    pub id: usize,
    seed: u64,
    pub encoder: EncoderParams,
    pub film: FilmParams,
    pub gate: EncoderParams,
    personal: Vec<Option<DifferentiableParam>>,
    train: Dataset,
    test: Dataset,
    pub hyper: ClientHyper,
}

/// Tape bindings for every trainable tensor, in `param_tensors()` order.
struct ClientModelVars {
    encoder: EncoderVars,
    film: FilmVars,
    gate: EncoderVars,
    personal: Vec<Var>,
}

struct LossNodes {
    total: Var,
    ce: Var,
    pull: Option<Var>,
    shared: Var,
}

impl ClientState {
    /// FiLM and gate weights are drawn from this client's own stream; both
    /// have zero-initialized final layers, so personalization starts as an
    /// exact identity (gamma = beta = 0, alpha = 0.5). Personal prototypes
    /// start at zero for every class present in the train shard.
    pub fn new(
        id: usize,
        seed: u64,
        encoder: EncoderParams,
        train: Dataset,
        test: Dataset,
        hyper: ClientHyper,
    ) -> Result<Self> {
        if train.class_count() != test.class_count() {
            return Err(Error::Config(format!(
                "client {id}: train has {} classes, test has {}",
                train.class_count(),
                test.class_count()
            )));
        }
        if !train.is_empty() && encoder.input_dim() != train.input_dim() {
            return Err(Error::Config(format!(
                "client {id}: encoder expects {} inputs, shard has {}",
                encoder.input_dim(),
                train.input_dim()
            )));
        }
        let d = encoder.output_dim();
        let mut rng = derive_rng(seed, &[stream::CLIENT_INIT, id as u64]);
        let film = FilmParams::init(d, &mut rng)?;
        let gate = EncoderParams::init(4 * d, &[d], 1, true, &mut rng)?;
        let mut personal: Vec<Option<DifferentiableParam>> = vec![None; train.class_count()];
        for c in train.present_classes() {
            personal[c] = Some(DifferentiableParam::new(Tensor::zeros(&[d])));
        }
        Ok(ClientState {
            id,
            seed,
            encoder,
            film,
            gate,
            personal,
            train,
            test,
            hyper,
        })
    }

    pub fn train_shard(&self) -> &Dataset {
        &self.train
    }

    pub fn test_shard(&self) -> &Dataset {
        &self.test
    }

    pub fn class_count(&self) -> usize {
        self.train.class_count()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Classes this client holds a personal prototype for, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        self.personal
            .iter()
            .enumerate()
            .filter_map(|(c, p)| p.as_ref().map(|_| c))
            .collect()
    }

    pub fn personal_prototype(&self, class: usize) -> Option<&Tensor> {
        self.personal.get(class)?.as_ref().map(|p| &p.value)
    }

    pub fn set_personal(&mut self, class: usize, value: Tensor) -> Result<()> {
        let d = self.feature_dim();
        if !value.is_vector() || value.numel() != d {
            return Err(Error::Shape {
                op: "set_personal",
                expected: format!("vector of length {d}"),
                got: format!("{:?}", value.shape()),
            });
        }
        match self.personal.get_mut(class) {
            Some(Some(p)) => {
                p.value = value;
                Ok(())
            }
            _ => Err(Error::Domain {
                op: "set_personal",
                message: format!("class {class} not present on client {}", self.id),
            }),
        }
    }

    /// Per-class means of the current encoder's features over the train
    /// shard, ascending by class; absent classes are omitted.
    pub fn compute_shared_means(&self) -> Result<Vec<UploadEntry>> {
        if self.train.is_empty() {
            return Err(Error::Domain {
                op: "compute_shared_means",
                message: format!("client {} has an empty train shard", self.id),
            });
        }
        let h = self.encoder.encode(self.train.features())?;
        let d = h.cols();
        let mut entries = Vec::new();
        for c in self.train.present_classes() {
            let idx = self.train.class_indices(c);
            let mut mean = vec![0.0; d];
            for &i in &idx {
                for (m, v) in mean.iter_mut().zip(h.row(i)) {
                    *m += v;
                }
            }
            let inv = 1.0 / idx.len() as f64;
            mean.iter_mut().for_each(|m| *m *= inv);
            entries.push(UploadEntry {
                class: c,
                count: idx.len(),
                mean,
            });
        }
        Ok(entries)
    }

    /// Global prototypes as this client sees them: rows the server has not
    /// initialized yet are replaced by the client's own shared mean for
    /// locally present classes (uninitialized absent classes stay as given).
    fn effective_globals(&self, globals: &Tensor, initialized: &[bool]) -> Result<Tensor> {
        let c = self.class_count();
        let d = self.feature_dim();
        if !globals.is_matrix() || globals.rows() != c || globals.cols() != d {
            return Err(Error::Shape {
                op: "effective_globals",
                expected: format!("[{c}, {d}] global prototypes"),
                got: format!("{:?}", globals.shape()),
            });
        }
        if initialized.len() != c {
            return Err(Error::Shape {
                op: "effective_globals",
                expected: format!("{c} initialization flags"),
                got: format!("{}", initialized.len()),
            });
        }
        let mut out = globals.clone();
        if self.train.is_empty() {
            return Ok(out);
        }
        let fallback_needed = self
            .train
            .present_classes()
            .iter()
            .any(|&cl| !initialized[cl]);
        if fallback_needed {
            for entry in self.compute_shared_means()? {
                if !initialized[entry.class] {
                    out.row_mut(entry.class).copy_from_slice(&entry.mean);
                }
            }
        }
        Ok(out)
    }

    /// Gate pass on plain tensors: alpha = sigmoid(G([p, u, |p-u|, p.*u]))
    /// and p_personal = u + alpha (p - u), a componentwise convex mix.
    pub fn reconstruct_personal(&self, p_global_c: &Tensor, u_c: &Tensor) -> Result<(f64, Tensor)> {
        let d = self.feature_dim();
        if !p_global_c.is_vector()
            || !u_c.is_vector()
            || p_global_c.numel() != d
            || u_c.numel() != d
        {
            return Err(Error::Shape {
                op: "reconstruct_personal",
                expected: format!("two vectors of length {d}"),
                got: format!("{:?} and {:?}", p_global_c.shape(), u_c.shape()),
            });
        }
        let (p, u) = (p_global_c.data(), u_c.data());
        let mut feats = Vec::with_capacity(4 * d);
        feats.extend_from_slice(p);
        feats.extend_from_slice(u);
        feats.extend(p.iter().zip(u).map(|(a, b)| (a - b).abs()));
        feats.extend(p.iter().zip(u).map(|(a, b)| a * b));
        let score = self.gate.encode(&Tensor::matrix(1, 4 * d, feats)?)?;
        let alpha = stable_sigmoid(score.at2(0, 0));
        let personal: Vec<f64> = u
            .iter()
            .zip(p)
            .map(|(&uv, &pv)| uv + alpha * (pv - uv))
            .collect();
        Ok((alpha, Tensor::vector(personal)))
    }

    /// One communication round of local training: `epochs` passes of SGD on
    /// the combined objective, then fresh shared means for upload. Batch
    /// order comes from this client's (seed, id, round) stream, so parallel
    /// scheduling cannot change results.
    pub fn local_update(
        &mut self,
        globals: &Tensor,
        initialized: &[bool],
        epochs: usize,
        round: u64,
    ) -> Result<(ClientUpload, LocalStats)> {
        if self.train.is_empty() {
            return Err(Error::Domain {
                op: "local_update",
                message: format!("client {} has an empty train shard", self.id),
            });
        }
        if epochs == 0 {
            return Err(Error::Domain {
                op: "local_update",
                message: "epochs must be >= 1".into(),
            });
        }
        let geff = self.effective_globals(globals, initialized)?;
        let mut rng = derive_rng(self.seed, &[stream::LOCAL, self.id as u64, round]);
        let mut sums = [0.0; 4];
        let mut steps = 0usize;
        for _ in 0..epochs {
            let batches: Vec<(Tensor, Vec<usize>)> = match self.hyper.batch_size {
                None => vec![(self.train.features().clone(), self.train.labels().to_vec())],
                Some(bs) => {
                    let mut idx: Vec<usize> = (0..self.train.len()).collect();
                    idx.shuffle(&mut rng);
                    idx.chunks(bs.max(1))
                        .map(|chunk| {
                            let sub = self.train.subset(chunk);
                            (sub.features().clone(), sub.labels().to_vec())
                        })
                        .collect()
                }
            };
            for (features, labels) in &batches {
                let (total, ce, pull, shared) = self.train_step(features, labels, &geff)?;
                sums[0] += total;
                sums[1] += ce;
                sums[2] += pull;
                sums[3] += shared;
                steps += 1;
            }
        }
        let inv = 1.0 / steps as f64;
        let stats = LocalStats {
            loss_total: sums[0] * inv,
            loss_ce: sums[1] * inv,
            loss_pull: sums[2] * inv,
            loss_shared: sums[3] * inv,
            steps,
        };
        let upload = ClientUpload {
            client_id: self.id,
            class_count: self.class_count(),
            entries: self.compute_shared_means()?,
        };
        Ok((upload, stats))
    }

    fn train_step(
        &mut self,
        features: &Tensor,
        labels: &[usize],
        globals_eff: &Tensor,
    ) -> Result<(f64, f64, f64, f64)> {
        let mut tape = Tape::new();
        let vars = self.register_vars(&mut tape);
        let nodes = self.build_loss(&mut tape, &vars, features, labels, globals_eff);
        let total = tape.scalar_value(nodes.total);
        if !total.is_finite() {
            return Err(Error::NonFinite {
                context: format!("client {} local loss", self.id),
            });
        }
        let ce = tape.scalar_value(nodes.ce);
        let pull = nodes.pull.map(|v| tape.scalar_value(v)).unwrap_or(0.0);
        let shared = tape.scalar_value(nodes.shared);
        tape.backward(nodes.total);
        self.apply_step(&tape, &vars, self.hyper.learning_rate);
        Ok((total, ce, pull, shared))
    }

    /// Finite-difference check of the full local objective against the tape
    /// gradients, over every trainable tensor. Returns the max relative
    /// error. `coordinate_cap` bounds the checked coordinates per tensor.
    pub fn loss_grad_check(
        &self,
        globals: &Tensor,
        initialized: &[bool],
        step: f64,
        coordinate_cap: Option<usize>,
    ) -> Result<f64> {
        if self.train.is_empty() {
            return Err(Error::Domain {
                op: "loss_grad_check",
                message: "empty train shard".into(),
            });
        }
        let geff = self.effective_globals(globals, initialized)?;
        let features = self.train.features().clone();
        let labels = self.train.labels().to_vec();
        let inputs = self.param_tensors();
        grad_check(&inputs, step, coordinate_cap, |tape, vars| {
            let bound = self.bind_vars(vars);
            self.build_loss(tape, &bound, &features, &labels, &geff)
                .total
        })
    }

    /// Scores a shard with the personalized classifier. For each locally
    /// present class the features are FiLM-modulated with that class's
    /// style before the prototype logit; absent classes are scored with raw
    /// features against the global prototype. Returns the summary plus the
    /// per-sample probability rows.
    pub fn evaluate(
        &self,
        shard: &Dataset,
        globals: &Tensor,
        initialized: &[bool],
    ) -> Result<(EvalResult, Tensor)> {
        if shard.is_empty() {
            return Err(Error::Domain {
                op: "evaluate",
                message: format!("client {} given an empty evaluation shard", self.id),
            });
        }
        if shard.class_count() != self.class_count() {
            return Err(Error::Config(format!(
                "evaluate: shard has {} classes, client {} has {}",
                shard.class_count(),
                self.id,
                self.class_count()
            )));
        }
        let geff = self.effective_globals(globals, initialized)?;
        let h = self.encoder.encode(shard.features())?;
        let (n, c) = (h.rows(), self.class_count());
        let logits = if self.hyper.personalization {
            let mut cols = vec![0.0; n * c];
            for class in 0..c {
                let p_c = Tensor::vector(geff.row(class).to_vec());
                match self.personal_prototype(class) {
                    Some(u_c) => {
                        let u_c = u_c.clone();
                        let dec = decompose(&u_c, &p_c, self.hyper.eps)?;
                        let style = dec.style.reshaped(vec![1, h.cols()])?;
                        let gamma = self.film.gamma.encode(&style)?;
                        let beta = self.film.beta.encode(&style)?;
                        let pp = if self.hyper.force_alpha_one {
                            p_c
                        } else {
                            self.reconstruct_personal(&p_c, &u_c)?.1
                        };
                        let pp_sq = pp.sq_norm();
                        for i in 0..n {
                            let hp: Vec<f64> = h
                                .row(i)
                                .iter()
                                .zip(gamma.row(0))
                                .zip(beta.row(0))
                                .map(|((&hv, &g), &b)| hv * (1.0 + g) + b)
                                .collect();
                            let h_sq: f64 = hp.iter().map(|x| x * x).sum();
                            let dot: f64 = hp.iter().zip(pp.data()).map(|(a, b)| a * b).sum();
                            cols[i * c + class] = 2.0 * dot - h_sq - pp_sq;
                        }
                    }
                    None => {
                        let p_sq = p_c.sq_norm();
                        for i in 0..n {
                            let hi = h.row(i);
                            let h_sq: f64 = hi.iter().map(|x| x * x).sum();
                            let dot: f64 = hi.iter().zip(p_c.data()).map(|(a, b)| a * b).sum();
                            cols[i * c + class] = 2.0 * dot - h_sq - p_sq;
                        }
                    }
                }
            }
            Tensor::matrix(n, c, cols)?
        } else {
            proto_logits(&h, &geff)?
        };
        let mut probs = Vec::with_capacity(n * c);
        let mut preds = Vec::with_capacity(n);
        for i in 0..n {
            let row = logits.row(i);
            probs.extend(softmax_scaled(row, 1.0)?);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            preds.push(best);
        }
        let probs = Tensor::matrix(n, c, probs)?;
        let result = EvalResult::from_predictions(&preds, shard.labels(), &probs, c)?;
        Ok((result, probs))
    }

    /// Features a dump would call the client's view of a sample: the FiLM
    /// modulation for the sample's own class when personalization is on and
    /// the class is locally present, the raw encoding otherwise.
    pub fn personalized_features(
        &self,
        shard: &Dataset,
        globals: &Tensor,
        initialized: &[bool],
    ) -> Result<Tensor> {
        let geff = self.effective_globals(globals, initialized)?;
        let h = self.encoder.encode(shard.features())?;
        if !self.hyper.personalization {
            return Ok(h);
        }
        let d = h.cols();
        let mut heads: Vec<Option<(Tensor, Tensor)>> = vec![None; self.class_count()];
        for class in self.present_classes() {
            let u_c = self
                .personal_prototype(class)
                .expect("present class")
                .clone();
            let p_c = Tensor::vector(geff.row(class).to_vec());
            let dec = decompose(&u_c, &p_c, self.hyper.eps)?;
            let style = dec.style.reshaped(vec![1, d])?;
            heads[class] = Some((
                self.film.gamma.encode(&style)?,
                self.film.beta.encode(&style)?,
            ));
        }
        let mut out = Vec::with_capacity(h.numel());
        for (i, &label) in shard.labels().iter().enumerate() {
            match &heads[label] {
                Some((gamma, beta)) => out.extend(
                    h.row(i)
                        .iter()
                        .zip(gamma.row(0))
                        .zip(beta.row(0))
                        .map(|((&hv, &g), &b)| hv * (1.0 + g) + b),
                ),
                None => out.extend_from_slice(h.row(i)),
            }
        }
        Tensor::matrix(h.rows(), d, out)
    }

    /// Trainable tensors in a fixed order: encoder layers, FiLM gamma then
    /// beta, gate layers, personal prototypes ascending by class.
    fn param_tensors(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self.encoder.params().map(|p| p.value.clone()).collect();
        out.extend(self.film.params().map(|p| p.value.clone()));
        out.extend(self.gate.params().map(|p| p.value.clone()));
        out.extend(self.personal.iter().flatten().map(|p| p.value.clone()));
        out
    }

    fn register_vars(&self, tape: &mut Tape) -> ClientModelVars {
        ClientModelVars {
            encoder: self.encoder.register(tape),
            film: self.film.register(tape),
            gate: self.gate.register(tape),
            personal: self
                .personal
                .iter()
                .flatten()
                .map(|p| tape.leaf(p.value.clone()))
                .collect(),
        }
    }

    /// Rebinds `param_tensors()`-ordered leaves; used by the grad check.
    fn bind_vars(&self, vars: &[Var]) -> ClientModelVars {
        let mut it = vars.iter().copied();
        let encoder = self.encoder.vars_from(&mut it);
        let film = self.film.vars_from(&mut it);
        let gate = self.gate.vars_from(&mut it);
        let personal: Vec<Var> = self
            .personal
            .iter()
            .flatten()
            .map(|_| it.next().expect("bind_vars: missing personal var"))
            .collect();
        assert!(it.next().is_none(), "bind_vars: unconsumed vars");
        ClientModelVars {
            encoder,
            film,
            gate,
            personal,
        }
    }

    /// The combined local objective on one batch: `L = CE(personalized
    /// logits) + lambda_pull * (1 - cos(h_pers, p_personal_y)) +
    /// lambda_shared * CE(shared logits)`. With personalization off only the
    /// shared term remains, counted once as task loss and once with its
    /// weight.
    fn build_loss(
        &self,
        tape: &mut Tape,
        vars: &ClientModelVars,
        features: &Tensor,
        labels: &[usize],
        globals_eff: &Tensor,
    ) -> LossNodes {
        let hy = &self.hyper;
        let x = tape.leaf(features.clone());
        let h = self.encoder.forward(tape, &vars.encoder, x);
        let g_all = tape.leaf(globals_eff.clone());
        let logits_shared = tape.proto_logits(h, g_all);
        let shared = tape.cross_entropy(logits_shared, labels);
        if !hy.personalization {
            // Identity FiLM plus a gate pinned to 1 makes the task CE equal
            // the shared CE, so the whole objective is their weighted sum.
            let weighted = tape.affine(shared, hy.lambda_shared, 0.0);
            let total = tape.add(shared, weighted);
            return LossNodes {
                total,
                ce: shared,
                pull: None,
                shared,
            };
        }

        let classes = self.present_classes();
        let mut pos_of_class = vec![usize::MAX; self.class_count()];
        for (pos, &c) in classes.iter().enumerate() {
            pos_of_class[c] = pos;
        }
        let label_pos: Vec<usize> = labels
            .iter()
            .map(|&y| {
                let pos = pos_of_class[y];
                assert!(pos != usize::MAX, "label {y} has no personal prototype");
                pos
            })
            .collect();

        // Differentiable decomposition of every present-class u against the
        // (constant) global prototypes; gradients flow into u through both
        // the style path and the gate path.
        let u_mat = tape.stack_rows(&vars.personal);
        let p_present = tape.gather_rows(g_all, &classes);
        let denoms = Tensor::vector(
            classes
                .iter()
                .map(|&c| globals_eff.row(c).iter().map(|v| v * v).sum::<f64>() + hy.eps)
                .collect(),
        );
        let denom = tape.leaf(denoms);
        let num = tape.row_dot(u_mat, p_present);
        let num_col = tape.reshape(num, vec![classes.len(), 1]);
        let coef = tape.div_col(num_col, denom);
        let content = tape.mul_col(p_present, coef);
        let raw = tape.sub(u_mat, content);
        let rnorm = tape.row_norm(raw);
        let rnorm_eps = tape.affine(rnorm, 1.0, hy.eps);
        let style = tape.div_col(raw, rnorm_eps);

        // Per-sample FiLM with the sample's own class style.
        let style_rows = tape.gather_rows(style, &label_pos);
        let (gamma, beta) = self.film.heads(tape, &vars.film, style_rows);
        let h_pers = FilmParams::modulate(tape, h, gamma, beta);

        // Gated reconstruction of the personalized prototypes.
        let pp_present = if hy.force_alpha_one {
            p_present
        } else {
            let diff = tape.sub(p_present, u_mat);
            let adiff = tape.abs(diff);
            let prod = tape.mul(p_present, u_mat);
            let feats = tape.concat_cols(&[p_present, u_mat, adiff, prod]);
            let score = self.gate.forward(tape, &vars.gate, feats);
            let alpha = tape.sigmoid(score);
            let moved = tape.mul_col(diff, alpha);
            tape.add(u_mat, moved)
        };
        let pp_full = tape.scatter_rows(pp_present, &classes, globals_eff.clone());

        let logits = tape.proto_logits(h_pers, pp_full);
        let ce = tape.cross_entropy(logits, labels);
        let pp_rows = tape.gather_rows(pp_present, &label_pos);
        let cosines = tape.row_cosine(h_pers, pp_rows, hy.eps);
        let one_minus = tape.affine(cosines, -1.0, 1.0);
        let pull = tape.mean(one_minus);

        let weighted_pull = tape.affine(pull, hy.lambda_pull, 0.0);
        let weighted_shared = tape.affine(shared, hy.lambda_shared, 0.0);
        let partial = tape.add(ce, weighted_pull);
        let total = tape.add(partial, weighted_shared);
        LossNodes {
            total,
            ce,
            pull: Some(pull),
            shared,
        }
    }

    fn apply_step(&mut self, tape: &Tape, vars: &ClientModelVars, lr: f64) {
        self.encoder.accumulate_grads(tape, &vars.encoder);
        self.encoder.sgd_step(lr);
        self.encoder.zero_grads();
        self.film.accumulate_grads(tape, &vars.film);
        self.film.sgd_step(lr);
        self.film.zero_grads();
        self.gate.accumulate_grads(tape, &vars.gate);
        self.gate.sgd_step(lr);
        self.gate.zero_grads();
        for (slot, var) in self.personal.iter_mut().flatten().zip(&vars.personal) {
            slot.accumulate(&tape.grad(*var));
            slot.sgd_step(lr);
            slot.zero_grad();
        }
    }
}
