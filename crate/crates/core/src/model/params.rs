use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::tensor::{Real, Tensor};
use crate::error::{LabError, Result};
use crate::rng::{stream, Purpose};

pub const INIT_STD: f64 = 0.02;

/// Affine map `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: Tensor::zeros(&[d_out]),
        }
    }
}

/// Layer normalization gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Norm<T> {
    fn new(d: usize, gain: T) -> Self {
        Self {
            gain: Tensor::filled(&[d], gain),
            bias: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: Norm<T>,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub ln2: Norm<T>,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
}

/// Parameter groups used for per-group gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Embedding,
    Attention,
    FeedForward,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Embedding,
        ParamGroup::Attention,
        ParamGroup::FeedForward,
        ParamGroup::Head,
    ];

    /// Group of a registered parameter name.
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("tok_emb") || name.starts_with("pos_emb") {
            ParamGroup::Embedding
        } else if name.starts_with("layers.") {
            let field = name.splitn(3, '.').nth(2).unwrap_or("");
            if field.starts_with("ln1") || field.starts_with("attn") {
                ParamGroup::Attention
            } else {
                ParamGroup::FeedForward
            }
        } else {
            ParamGroup::Head
        }
    }
}

/// All trainable arrays of the model, addressable by name.
///
/// The same structure doubles as a gradient buffer and as optimizer
/// moment storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_f: Norm<T>,
    pub head: Linear<T>,
}

impl<T: Real> ModelParams<T> {
    /// Zero-valued arrays with the shapes implied by `cfg`; norm gains are zero too.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::with_gain(cfg, T::zero())
    }

    fn with_gain(cfg: &ModelConfig, gain: T) -> Self {
        let d = cfg.d_model;
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                ln1: Norm::new(d, gain),
                wq: Linear::zeros(d, d),
                wk: Linear::zeros(d, d),
                wv: Linear::zeros(d, d),
                wo: Linear::zeros(d, d),
                ln2: Norm::new(d, gain),
                ff_in: Linear::zeros(d, cfg.d_ff),
                ff_out: Linear::zeros(cfg.d_ff, d),
            })
            .collect();
        Self {
            tok_emb: Tensor::zeros(&[cfg.vocab_size, d]),
            pos_emb: Tensor::zeros(&[cfg.max_len, d]),
            blocks,
            ln_f: Norm::new(d, gain),
            head: Linear::zeros(d, cfg.vocab_size),
        }
    }

    /// Deterministic initialization: N(0, 0.02) for embeddings and projection
    /// weights, zero biases, unit norm gains. Each array draws from its own
    /// substream so the values do not depend on the element type.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut params = Self::with_gain(cfg, T::one());
        let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
        for (index, (name, tensor)) in params.named_mut().into_iter().enumerate() {
            if is_random_init(&name) {
                let mut rng = stream(seed, Purpose::Init, index as u64, 0);
                for x in tensor.data.iter_mut() {
                    // Draw in f32 so f32 and f64 models start from the same values.
                    *x = T::from_f64_lossy(normal.sample(&mut rng) as f32 as f64);
                }
            }
        }
        params
    }

    /// Every array with its registered name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.extend([
                (p("ln1.gain"), &b.ln1.gain),
                (p("ln1.bias"), &b.ln1.bias),
                (p("attn.q.weight"), &b.wq.weight),
                (p("attn.q.bias"), &b.wq.bias),
                (p("attn.k.weight"), &b.wk.weight),
                (p("attn.k.bias"), &b.wk.bias),
                (p("attn.v.weight"), &b.wv.weight),
                (p("attn.v.bias"), &b.wv.bias),
                (p("attn.o.weight"), &b.wo.weight),
                (p("attn.o.bias"), &b.wo.bias),
                (p("ln2.gain"), &b.ln2.gain),
                (p("ln2.bias"), &b.ln2.bias),
                (p("ffn.in.weight"), &b.ff_in.weight),
                (p("ffn.in.bias"), &b.ff_in.bias),
                (p("ffn.out.weight"), &b.ff_out.weight),
                (p("ffn.out.bias"), &b.ff_out.bias),
            ]);
        }
        out.extend([
            ("ln_f.gain".to_string(), &self.ln_f.gain),
            ("ln_f.bias".to_string(), &self.ln_f.bias),
            ("head.weight".to_string(), &self.head.weight),
            ("head.bias".to_string(), &self.head.bias),
        ]);
        out
    }

    /// Mutable counterpart of [`named`](Self::named), same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.extend([
                (p("ln1.gain"), &mut b.ln1.gain),
                (p("ln1.bias"), &mut b.ln1.bias),
                (p("attn.q.weight"), &mut b.wq.weight),
                (p("attn.q.bias"), &mut b.wq.bias),
                (p("attn.k.weight"), &mut b.wk.weight),
                (p("attn.k.bias"), &mut b.wk.bias),
                (p("attn.v.weight"), &mut b.wv.weight),
                (p("attn.v.bias"), &mut b.wv.bias),
                (p("attn.o.weight"), &mut b.wo.weight),
                (p("attn.o.bias"), &mut b.wo.bias),
                (p("ln2.gain"), &mut b.ln2.gain),
                (p("ln2.bias"), &mut b.ln2.bias),
                (p("ffn.in.weight"), &mut b.ff_in.weight),
                (p("ffn.in.bias"), &mut b.ff_in.bias),
                (p("ffn.out.weight"), &mut b.ff_out.weight),
                (p("ffn.out.bias"), &mut b.ff_out.bias),
            ]);
        }
        out.extend([
            ("ln_f.gain".to_string(), &mut self.ln_f.gain),
            ("ln_f.bias".to_string(), &mut self.ln_f.bias),
            ("head.weight".to_string(), &mut self.head.weight),
            ("head.bias".to_string(), &mut self.head.bias),
        ]);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.named_mut().into_iter().map(|(_, t)| t).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let cast_lin = |l: &Linear<T>| Linear { weight: l.weight.cast(), bias: l.bias.cast() };
        let cast_norm = |n: &Norm<T>| Norm { gain: n.gain.cast(), bias: n.bias.cast() };
        ModelParams {
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: cast_norm(&b.ln1),
                    wq: cast_lin(&b.wq),
                    wk: cast_lin(&b.wk),
                    wv: cast_lin(&b.wv),
                    wo: cast_lin(&b.wo),
                    ln2: cast_norm(&b.ln2),
                    ff_in: cast_lin(&b.ff_in),
                    ff_out: cast_lin(&b.ff_out),
                })
                .collect(),
            ln_f: cast_norm(&self.ln_f),
            head: cast_lin(&self.head),
        }
    }

    /// Set every element to zero, keeping shapes.
    pub fn zero_(&mut self) {
        for t in self.tensors_mut() {
            t.data.fill(T::zero());
        }
    }

    /// `self += scale * other`, array by array.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Sum of squares over every element, accumulated in f64.
    pub fn sum_squares(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|&x| {
                let x = x.as_f64();
                x * x
            })
            .sum()
    }

    /// Check that every array has the shape `cfg` implies.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expect = ModelParams::<T>::zeros(cfg);
        if self.blocks.len() != cfg.n_layers {
            return Err(LabError::InvalidInput(format!(
                "parameters have {} layers, config expects {}",
                self.blocks.len(),
                cfg.n_layers
            )));
        }
        for ((name, have), (_, want)) in self.named().into_iter().zip(expect.named()) {
            if have.shape != want.shape || have.data.len() != want.data.len() {
                return Err(LabError::InvalidInput(format!(
                    "array {name} has shape {:?}, expected {:?}",
                    have.shape, want.shape
                )));
            }
        }
        Ok(())
    }
}

fn is_random_init(name: &str) -> bool {
    name == "tok_emb" || name == "pos_emb" || name.ends_with(".weight")
}
