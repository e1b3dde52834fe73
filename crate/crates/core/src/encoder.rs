//! Feature encoder and FiLM conditioning networks.
//!
//! [`EncoderParams`] is a plain affine stack with tanh between layers and a
//! linear final layer. The same shape of network serves three roles: the
//! per-client feature encoder, the two FiLM heads (style -> gamma, style ->
//! beta), and the client's prototype gate, so initialization options cover
//! all of them (notably zero-init of the final layer, which makes FiLM an
//! exact identity and the gate exactly 0.5 at the start of training).

use crate::error::{Error, Result};
use crate::numerics::{DifferentiableParam, Tape, Tensor, Var};
use rand::Rng;

/// One affine layer: y = x W + b with W `[in, out]`, b `[out]`.
#[derive(Clone, Debug)]
pub struct AffineLayer {
    pub weight: DifferentiableParam,
    pub bias: DifferentiableParam,
}

/// Affine stack with tanh between layers; the final layer stays linear so
/// outputs live in an unbounded feature space.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    layers: Vec<AffineLayer>,
}

/// Tape handles for one registered [`EncoderParams`].
pub struct EncoderVars {
    pub layers: Vec<(Var, Var)>,
}

impl EncoderParams {
    /// Random init: W ~ N(0, 1/fan_in), b = 0. `zero_final` zeroes the last
    /// layer's weights so the whole stack outputs exactly 0 at init.
    pub fn init<R: Rng>(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        zero_final: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.contains(&0) {
            return Err(Error::Config("encoder widths must all be >= 1".into()));
        }
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(output_dim);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for w in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[w], widths[w + 1]);
            let last = w == widths.len() - 2;
            let weight = if zero_final && last {
                Tensor::zeros(&[fan_in, fan_out])
            } else {
                Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
            };
            layers.push(AffineLayer {
                weight: DifferentiableParam::new(weight),
                bias: DifferentiableParam::new(Tensor::zeros(&[fan_out])),
            });
        }
        Ok(EncoderParams { layers })
    }

    /// Builds a stack from explicit (weight, bias) pairs; widths must chain.
    pub fn from_layers(layers: Vec<(Tensor, Tensor)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        let mut out = Vec::with_capacity(layers.len());
        let mut prev_out: Option<usize> = None;
        for (w, b) in layers {
            if !w.is_matrix() || !b.is_vector() || b.numel() != w.cols() {
                return Err(Error::Shape {
                    op: "EncoderParams::from_layers",
                    expected: "weight [in, out] with bias [out]".into(),
                    got: format!("{:?} and {:?}", w.shape(), b.shape()),
                });
            }
            if let Some(p) = prev_out {
                if w.rows() != p {
                    return Err(Error::Shape {
                        op: "EncoderParams::from_layers",
                        expected: format!("layer input width {p}"),
                        got: format!("{}", w.rows()),
                    });
                }
            }
            prev_out = Some(w.cols());
            out.push(AffineLayer {
                weight: DifferentiableParam::new(w),
                bias: DifferentiableParam::new(b),
            });
        }
        Ok(EncoderParams { layers: out })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.value.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.value.cols()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.value.numel() + l.bias.value.numel())
            .sum()
    }

    /// Registers current parameter values as tape leaves.
    pub fn register(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.leaf(l.weight.value.clone()),
                        tape.leaf(l.bias.value.clone()),
                    )
                })
                .collect(),
        }
    }

    /// Forward through registered vars: x `[n, input_dim]` -> `[n, output_dim]`,
    /// tanh between layers, linear final layer.
    pub fn forward(&self, tape: &mut Tape, vars: &EncoderVars, x: Var) -> Var {
        let mut h = x;
        let last = vars.layers.len() - 1;
        for (i, (w, b)) in vars.layers.iter().enumerate() {
            let lin = tape.matmul(h, *w);
            h = tape.add_row(lin, *b);
            if i != last {
                h = tape.tanh(h);
            }
        }
        h
    }

    /// Forward-only convenience on plain tensors.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        if !x.is_matrix() || x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "encode",
                expected: format!("[n, {}]", self.input_dim()),
                got: format!("{:?}", x.shape()),
            });
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let xv = tape.leaf(x.clone());
        let h = self.forward(&mut tape, &vars, xv);
        Ok(tape.value(h).clone())
    }

    /// Accumulates tape gradients into the stored parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &EncoderVars) {
        for (layer, (wv, bv)) in self.layers.iter_mut().zip(&vars.layers) {
            layer.weight.accumulate(&tape.grad(*wv));
            layer.bias.accumulate(&tape.grad(*bv));
        }
    }

    pub fn sgd_step(&mut self, lr: f64) {
        for l in self.layers.iter_mut() {
            l.weight.sgd_step(lr);
            l.bias.sgd_step(lr);
        }
    }

    pub fn zero_grads(&mut self) {
        for l in self.layers.iter_mut() {
            l.weight.zero_grad();
            l.bias.zero_grad();
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &DifferentiableParam> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    /// Rebinds parameter slots to leaves created elsewhere, consuming one
    /// var per weight and bias in `params()` order.
    pub fn vars_from(&self, vars: &mut impl Iterator<Item = Var>) -> EncoderVars {
        EncoderVars {
            layers: self
                .layers
                .iter()
                .map(|_| {
                    let w = vars.next().expect("vars_from: missing weight var");
                    let b = vars.next().expect("vars_from: missing bias var");
                    (w, b)
                })
                .collect(),
        }
    }

    /// Current parameter values, for snapshot/restore.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.value.clone(), l.bias.value.clone()])
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.layers.len() * 2);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.weight.value = snapshot[2 * i].clone();
            l.bias.value = snapshot[2 * i + 1].clone();
        }
    }
}

/// FiLM conditioning: two heads mapping a style vector to per-feature
/// modulation, `h' = h .* (1 + gamma(s)) + beta(s)`. Both heads are
/// d -> d -> d tanh stacks with zero-initialized final layers, so FiLM is an
/// exact identity at init (gamma = beta = 0 for every style).
#[derive(Clone, Debug)]
pub struct FilmParams {
    pub gamma: EncoderParams,
    pub beta: EncoderParams,
}

pub struct FilmVars {
    pub gamma: EncoderVars,
    pub beta: EncoderVars,
}

impl FilmParams {
    pub fn init<R: Rng>(feature_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(FilmParams {
            gamma: EncoderParams::init(feature_dim, &[feature_dim], feature_dim, true, rng)?,
            beta: EncoderParams::init(feature_dim, &[feature_dim], feature_dim, true, rng)?,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.gamma.input_dim()
    }

    pub fn register(&self, tape: &mut Tape) -> FilmVars {
        FilmVars {
            gamma: self.gamma.register(tape),
            beta: self.beta.register(tape),
        }
    }

    /// gamma and beta rows for a batch of style vectors `[m, d]`.
    pub fn heads(&self, tape: &mut Tape, vars: &FilmVars, styles: Var) -> (Var, Var) {
        let g = self.gamma.forward(tape, &vars.gamma, styles);
        let b = self.beta.forward(tape, &vars.beta, styles);
        (g, b)
    }

    /// Applies FiLM rows to feature rows: `h .* (1 + gamma) + beta`,
    /// all three `[n, d]`.
    pub fn modulate(tape: &mut Tape, h: Var, gamma: Var, beta: Var) -> Var {
        let one_plus = tape.affine(gamma, 1.0, 1.0);
        let scaled = tape.mul(h, one_plus);
        tape.add(scaled, beta)
    }

    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &FilmVars) {
        self.gamma.accumulate_grads(tape, &vars.gamma);
        self.beta.accumulate_grads(tape, &vars.beta);
    }

    pub fn sgd_step(&mut self, lr: f64) {
        self.gamma.sgd_step(lr);
        self.beta.sgd_step(lr);
    }

    pub fn zero_grads(&mut self) {
        self.gamma.zero_grads();
        self.beta.zero_grads();
    }

    pub fn params(&self) -> impl Iterator<Item = &DifferentiableParam> {
        self.gamma.params().chain(self.beta.params())
    }

    /// Rebinds both heads to leaves created elsewhere, gamma first.
    pub fn vars_from(&self, vars: &mut impl Iterator<Item = Var>) -> FilmVars {
        FilmVars {
            gamma: self.gamma.vars_from(vars),
            beta: self.beta.vars_from(vars),
        }
    }
}

/// Pure single-vector FiLM application: `h .* (1 + gamma(s)) + beta(s)`.
pub fn film_modulate(film: &FilmParams, h: &Tensor, style: &Tensor) -> Result<Tensor> {
    let d = film.feature_dim();
    if !h.is_vector() || h.numel() != d || !style.is_vector() || style.numel() != d {
        return Err(Error::Shape {
            op: "film_modulate",
            expected: format!("feature and style vectors of length {d}"),
            got: format!("{:?} and {:?}", h.shape(), style.shape()),
        });
    }
    let mut tape = Tape::new();
    let vars = film.register(&mut tape);
    let s = tape.leaf(style.reshaped(vec![1, d])?);
    let hv = tape.leaf(h.reshaped(vec![1, d])?);
    let (g, b) = film.heads(&mut tape, &vars, s);
    let out = FilmParams::modulate(&mut tape, hv, g, b);
    Ok(Tensor::vector(tape.value(out).data().to_vec()))
}
