//! The decoder-only transformer: configuration, parameters and forward pass.
//!
//! Blocks are pre-norm (`x + attn(ln(x))`, `x + mlp(ln(x))`). The hidden
//! vector of layer `j` is the shared final layer norm applied to the output
//! of block `j`, so `φˡ` is exactly what the LM head sees and lower layers
//! live in the same normalised space for probing.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{windows, Corpus, SplitSpec, TokenId};
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, StreamRng};
use crate::tape::{GradTape, Var};
use crate::tensor::{softmax_in_place, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Parameters are rounded through `f32` after every training update.
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub context: usize,
    pub vocab_size: usize,
    pub mlp_ratio: usize,
    pub embedding_dropout: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    pub tie_weights: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 32,
            heads: 2,
            context: 32,
            vocab_size: 256,
            mlp_ratio: 4,
            embedding_dropout: 0.0,
            weight_decay: 0.01,
            seed: 0,
            precision: Precision::F64,
            tie_weights: false,
            init_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [self.layers, self.hidden, self.heads, self.context, self.vocab_size, self.mlp_ratio];
        if sizes.contains(&0) {
            return Err(Error::InvalidArgument("all model sizes must be >= 1".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.embedding_dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.embedding_dropout)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight decay must be >= 0".into()));
        }
        Ok(())
    }

    /// Canonical parameter order: names and shapes.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, c, m) = (self.vocab_size, self.hidden, self.context, self.hidden * self.mlp_ratio);
        let mut out = vec![("wte".to_string(), vec![v, d]), ("wpe".to_string(), vec![c, d])];
        for l in 0..self.layers {
            let p = |n: &str| format!("h{l}.{n}");
            out.extend([
                (p("ln1.g"), vec![d]),
                (p("ln1.b"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.bq"), vec![d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.bk"), vec![d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.bv"), vec![d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.g"), vec![d]),
                (p("ln2.b"), vec![d]),
                (p("mlp.w1"), vec![d, m]),
                (p("mlp.b1"), vec![m]),
                (p("mlp.w2"), vec![m, d]),
                (p("mlp.b2"), vec![d]),
            ]);
        }
        out.push(("lnf.g".to_string(), vec![d]));
        out.push(("lnf.b".to_string(), vec![d]));
        if !self.tie_weights {
            out.push(("head".to_string(), vec![v, d]));
        }
        out
    }
}

const PER_LAYER: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    tied: bool,
}

impl ModelParams {
    /// Seeded initialisation: Gaussian matrices, unit LN gains, zero biases.
    /// Residual output projections are scaled by `1/√(2l)`; an untied head
    /// starts at zero.
    pub fn init(config: &ModelConfig, rng: &mut StreamRng) -> Result<Self> {
        config.validate()?;
        let resid = 1.0 / ((2 * config.layers) as f64).sqrt();
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.layout() {
            let t = if name.ends_with(".g") {
                Tensor::new(shape.clone(), vec![1.0; shape.iter().product()])?
            } else if shape.len() == 1 || name == "head" {
                Tensor::zeros(&shape)
            } else if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                normal_tensor(rng, &shape, config.init_std * resid)
            } else {
                normal_tensor(rng, &shape, config.init_std)
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(ModelParams { names, tensors, tied: config.tie_weights })
    }

    pub fn from_parts(config: &ModelConfig, names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        let layout = config.layout();
        if layout.len() != names.len() || names.len() != tensors.len() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", layout.len(), names.len())));
        }
        for ((n, s), (name, t)) in layout.iter().zip(names.iter().zip(&tensors)) {
            if n != name || s.as_slice() != t.shape() {
                return Err(Error::Shape(format!("parameter {name} {:?} does not match {n} {s:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Invariant(format!("parameter {name} has non-finite values")));
            }
        }
        Ok(ModelParams { names, tensors, tied: config.tie_weights })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Slot of the LM head matrix (the token embedding when tied).
    pub fn head_slot(&self) -> usize {
        if self.tied {
            0
        } else {
            self.tensors.len() - 1
        }
    }

    pub fn is_tied(&self) -> bool {
        self.tied
    }

    pub fn head(&self) -> &Tensor {
        &self.tensors[self.head_slot()]
    }

    pub fn set_head(&mut self, head: Tensor) -> Result<()> {
        let slot = self.head_slot();
        if head.shape() != self.tensors[slot].shape() {
            return Err(Error::Shape(format!("head {:?} vs {:?}", head.shape(), self.tensors[slot].shape())));
        }
        self.tensors[slot] = head;
        Ok(())
    }

    pub fn register(&self, tape: &mut GradTape) -> Vec<Var> {
        self.tensors.iter().enumerate().map(|(i, t)| tape.param(i, t.clone())).collect()
    }

    /// SHA-256 over every parameter except an untied head.
    pub fn backbone_hash(&self) -> String {
        let skip = if self.tied { usize::MAX } else { self.head_slot() };
        self.hash_filtered(|i| i != skip)
    }

    pub fn hash(&self) -> String {
        self.hash_filtered(|_| true)
    }

    fn hash_filtered(&self, keep: impl Fn(usize) -> bool) -> String {
        let mut h = Sha256::new();
        for (i, (n, t)) in self.names.iter().zip(&self.tensors).enumerate() {
            if !keep(i) {
                continue;
            }
            h.update(n.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        crate::corpus::hex(&h.finalize())
    }

    /// All parameters flattened in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

/// Output handles of one forward pass recorded on a tape.
pub struct TapeForward {
    pub logits: Var,
    /// `φʲ` for `j = 1..=l` (empty unless requested).
    pub hiddens: Vec<Var>,
}

/// Records the forward pass for `tokens` on `tape`. `dropout` enables
/// embedding dropout with the configured rate.
pub fn forward_on_tape(
    tape: &mut GradTape,
    vars: &[Var],
    config: &ModelConfig,
    tokens: &[TokenId],
    dropout: Option<&mut StreamRng>,
    all_hiddens: bool,
) -> TapeForward {
    let t = tokens.len();
    let d = config.hidden;
    let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
    let pos: Vec<usize> = (0..t).collect();
    let te = tape.embed(vars[0], &ids);
    let pe = tape.embed(vars[1], &pos);
    let mut x = tape.add(te, pe);
    if let Some(rng) = dropout {
        let p = config.embedding_dropout;
        if p > 0.0 {
            let keep = 1.0 / (1.0 - p);
            let mask = (0..t * d).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
            x = tape.dropout(x, mask);
        }
    }
    let lnf = 2 + config.layers * PER_LAYER;
    let mut hiddens = Vec::new();
    for l in 0..config.layers {
        let w = &vars[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
        let h = tape.layer_norm(x, w[0], w[1]);
        let q = tape.matmul(h, w[2]);
        let q = tape.add_row(q, w[3]);
        let k = tape.matmul(h, w[4]);
        let k = tape.add_row(k, w[5]);
        let v = tape.matmul(h, w[6]);
        let v = tape.add_row(v, w[7]);
        let a = tape.causal_attention(q, k, v, config.heads);
        let a = tape.matmul(a, w[8]);
        let a = tape.add_row(a, w[9]);
        x = tape.add(x, a);
        let h = tape.layer_norm(x, w[10], w[11]);
        let m = tape.matmul(h, w[12]);
        let m = tape.add_row(m, w[13]);
        let m = tape.gelu(m);
        let m = tape.matmul(m, w[14]);
        let m = tape.add_row(m, w[15]);
        x = tape.add(x, m);
        if all_hiddens && l + 1 < config.layers {
            hiddens.push(tape.layer_norm(x, vars[lnf], vars[lnf + 1]));
        }
    }
    let phi = tape.layer_norm(x, vars[lnf], vars[lnf + 1]);
    if all_hiddens {
        hiddens.push(phi);
    }
    let head = if config.tie_weights { vars[0] } else { vars[lnf + 2] };
    let logits = tape.matmul_t(phi, head);
    TapeForward { logits, hiddens }
}

/// Facts recorded when a head was fit to a stationary point of the
/// L2-regularised loss over a fixed sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stationarity {
    pub lambda: f64,
    pub tolerance: f64,
    pub grad_max_norm: f64,
    pub samples: usize,
    /// Fingerprint of the fit sample set (corpus fingerprint + ids).
    pub sample_set: String,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub step: u64,
    pub val_loss: f64,
    pub split: Option<SplitSpec>,
    pub stationary: Option<Stationarity>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub probs: Vec<f64>,
    /// Final-position `φʲ` for `j = 1..=l`.
    pub hiddens: Vec<Vec<f64>>,
}

impl ModelSnapshot {
    pub fn init(config: ModelConfig) -> Result<Self> {
        let mut rng = crate::rng::stream(config.seed, "model-init");
        let params = ModelParams::init(&config, &mut rng)?;
        Ok(ModelSnapshot { config, params, step: 0, val_loss: f64::NAN, split: None, stationary: None })
    }

    /// Logits and (optionally) every layer's hidden rows for one window.
    pub fn window_forward(&self, tokens: &[TokenId], all_hiddens: bool) -> (Tensor, Vec<Tensor>) {
        let mut tape = GradTape::new();
        let vars = self.params.register(&mut tape);
        let out = forward_on_tape(&mut tape, &vars, &self.config, tokens, None, all_hiddens);
        let hiddens = out.hiddens.iter().map(|&h| tape.value(h).clone()).collect();
        (tape.value(out.logits).clone(), hiddens)
    }

    fn check_prefix(&self, prefix: &[TokenId]) -> Result<()> {
        if prefix.is_empty() {
            return Err(Error::InvalidArgument("empty prefix".into()));
        }
        if prefix.len() > self.config.context {
            return Err(Error::InvalidArgument(format!(
                "prefix length {} exceeds context {}",
                prefix.len(),
                self.config.context
            )));
        }
        if let Some((i, &t)) = prefix.iter().enumerate().find(|(_, &t)| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { token: t, vocab: self.config.vocab_size, index: i });
        }
        Ok(())
    }

    /// `p(·|x)` and the final-position hidden vector of every layer.
    pub fn forward_with_hiddens(&self, prefix: &[TokenId]) -> Result<Inference> {
        self.check_prefix(prefix)?;
        let (logits, hiddens) = self.window_forward(prefix, true);
        let last = prefix.len() - 1;
        let mut probs = logits.row(last).to_vec();
        softmax_in_place(&mut probs);
        Ok(Inference { probs, hiddens: hiddens.iter().map(|h| h.row(last).to_vec()).collect() })
    }

    /// Hidden vectors of the requested layers (1-based) for `ids`, one
    /// `ids.len() × d` matrix per layer with rows in `ids` order.
    pub fn representations(&self, corpus: &Corpus, ids: &[usize], layers: &[usize]) -> Result<Vec<Tensor>> {
        self.check_corpus(corpus)?;
        for &l in layers {
            if l == 0 || l > self.config.layers {
                return Err(Error::InvalidArgument(format!("layer {l} outside 1..={}", self.config.layers)));
            }
        }
        let d = self.config.hidden;
        let ws = windows(corpus, ids);
        let need_all = layers.iter().any(|&l| l != self.config.layers);
        let per_window: Vec<Vec<(usize, Vec<Vec<f64>>)>> = ws
            .par_iter()
            .map(|w| {
                let (_, hs) = self.window_forward(w.tokens(corpus), true);
                let _ = need_all;
                w.rows
                    .iter()
                    .map(|&(row, id)| (id, layers.iter().map(|&l| hs[l - 1].row(row).to_vec()).collect()))
                    .collect()
            })
            .collect();
        let position: std::collections::HashMap<usize, usize> = ids.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let mut out: Vec<Tensor> = layers.iter().map(|_| Tensor::zeros(&[ids.len(), d])).collect();
        for (id, vecs) in per_window.into_iter().flatten() {
            let k = position[&id];
            for (m, v) in out.iter_mut().zip(vecs) {
                m.row_mut(k).copy_from_slice(&v);
            }
        }
        // duplicate ids share the first row's values
        for (k, &i) in ids.iter().enumerate() {
            let first = position[&i];
            if first != k {
                for m in out.iter_mut() {
                    let row = m.row(first).to_vec();
                    m.row_mut(k).copy_from_slice(&row);
                }
            }
        }
        Ok(out)
    }

    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        if corpus.vocab_size() != self.config.vocab_size || corpus.context() != self.config.context {
            return Err(Error::InvalidArgument(format!(
                "corpus (vocab {}, context {}) does not match model (vocab {}, context {})",
                corpus.vocab_size(),
                corpus.context(),
                self.config.vocab_size,
                self.config.context
            )));
        }
        Ok(())
    }

    /// Mean NLL over `ids` by full forward passes.
    pub fn mean_nll(&self, corpus: &Corpus, ids: &[usize]) -> Result<f64> {
        self.check_corpus(corpus)?;
        if ids.is_empty() {
            return Ok(f64::NAN);
        }
        let ws = windows(corpus, ids);
        let sums: Vec<f64> = ws
            .par_iter()
            .map(|w| {
                let (logits, _) = self.window_forward(w.tokens(corpus), false);
                w.rows
                    .iter()
                    .map(|&(row, id)| {
                        let r = logits.row(row);
                        crate::tensor::log_sum_exp(r) - r[corpus.target(id) as usize]
                    })
                    .sum()
            })
            .collect();
        let n: usize = ws.iter().map(|w| w.rows.len()).sum();
        Ok(sums.iter().sum::<f64>() / n as f64)
    }
}
