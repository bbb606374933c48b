//! The encoder-decoder network.
//!
//! A pre-norm transformer in which each decoder input step is the sum of a
//! token embedding, a direction embedding (which side the *next* token
//! attaches on), and a decode-step position embedding. The encoder output
//! additionally feeds the starting-token prediction head: per-position
//! potentials over the target vocabulary, attention-pooled along source
//! time and squashed to per-token occurrence probabilities.
//!
//! Output logits are tied to the target embedding table.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{Codec, CorpusError, Vocab};
use crate::numerics::{
    read_checkpoint, write_checkpoint, Axis, CheckpointError, NumericsError, ParamSet, Scalar,
    Tape, Tensor, Var,
};
use crate::ordering::{Direction, DirectedToken};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("model input: {0}")]
    Input(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Layer count for the encoder and for the decoder.
    pub n_layers: usize,
    pub d_ff: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Longest source sentence and longest reformed decode prefix.
    pub max_steps: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            src_vocab: 0,
            tgt_vocab: 0,
            max_steps: 32,
            dropout: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} must be in [0,1)",
                self.dropout
            )));
        }
        if self.max_steps < 3 {
            return Err(ModelError::Config(
                "max_steps must be at least 3 (start plus two end markers)".into(),
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return Err(ModelError::Config("n_layers and d_ff must be positive".into()));
        }
        if self.src_vocab < 3 || self.tgt_vocab < 3 {
            return Err(ModelError::Config(
                "vocabularies must include the reserved pad/[EOL]/[EOR] rows".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every parameter name with its shape; the single source of truth for
    /// init, checkpoint validation, and binding.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let ff = self.d_ff;
        let mut out = vec![
            ("src_embed".to_string(), vec![self.src_vocab, d]),
            ("tgt_embed".to_string(), vec![self.tgt_vocab, d]),
            ("dir_embed".to_string(), vec![2, d]),
            ("enc_pos".to_string(), vec![self.max_steps, d]),
            ("dec_pos".to_string(), vec![self.max_steps, d]),
            ("enc_norm".to_string(), vec![d]),
            ("dec_norm".to_string(), vec![d]),
            ("start.w1".to_string(), vec![d, d]),
            ("start.b".to_string(), vec![d]),
            ("start.w2".to_string(), vec![d, self.tgt_vocab]),
        ];
        for i in 0..self.n_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("enc{i}.{w}"), vec![d, d]));
            }
            out.push((format!("enc{i}.norm1"), vec![d]));
            out.push((format!("enc{i}.norm2"), vec![d]));
            out.push((format!("enc{i}.ffn_w1"), vec![d, ff]));
            out.push((format!("enc{i}.ffn_w2"), vec![ff, d]));
            for w in ["wq", "wk", "wv", "wo", "cq", "ck", "cv", "co"] {
                out.push((format!("dec{i}.{w}"), vec![d, d]));
            }
            out.push((format!("dec{i}.norm1"), vec![d]));
            out.push((format!("dec{i}.norm2"), vec![d]));
            out.push((format!("dec{i}.norm3"), vec![d]));
            out.push((format!("dec{i}.ffn_w1"), vec![d, ff]));
            out.push((format!("dec{i}.ffn_w2"), vec![ff, d]));
        }
        out
    }
}

pub struct Model<F: Scalar> {
    cfg: ModelConfig,
    pub params: ParamSet<F>,
}

impl<F: Scalar> Model<F> {
    /// Fresh parameters: norms at one, the start-head bias at zero,
    /// everything else Xavier-uniform from a seeded generator.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in cfg.parameter_shapes() {
            let tensor = if name.ends_with("norm") || name.contains(".norm") {
                Tensor::filled(&shape, F::ONE)
            } else if name == "start.b" {
                Tensor::zeros(&shape)
            } else {
                let (fan_in, fan_out) = match shape.as_slice() {
                    [r, c] => (*r, *c),
                    [n] => (*n, *n),
                    _ => (1, 1),
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| F::from_f64(rng.random_range(-limit..limit)))
                    .collect();
                Tensor::from_vec(&shape, data).expect("sized data")
            };
            params.insert(name, tensor);
        }
        Ok(Model { cfg, params })
    }

    /// Rebuild from loaded tensors, checking the full shape manifest.
    pub fn from_params(cfg: ModelConfig, tensors: Vec<(String, Tensor<F>)>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut by_name: BTreeMap<String, Tensor<F>> = tensors.into_iter().collect();
        let mut params = ParamSet::new();
        for (name, shape) in cfg.parameter_shapes() {
            let tensor = by_name
                .remove(&name)
                .ok_or_else(|| ModelError::Config(format!("checkpoint missing parameter {name:?}")))?;
            if tensor.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "parameter {name:?} has shape {:?}, expected {shape:?}",
                    tensor.shape()
                )));
            }
            params.insert(name, tensor);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(ModelError::Config(format!(
                "checkpoint has unknown parameter {extra:?}"
            )));
        }
        Ok(Model { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Eq.-7 style tuple embedding, straight from the tables:
    /// token row + direction row + decode-step position row.
    pub fn embed_tuple(
        &self,
        token: usize,
        direction: Direction,
        step: usize,
    ) -> Result<Tensor<F>, ModelError> {
        if token >= self.cfg.tgt_vocab {
            return Err(ModelError::Input(format!(
                "token id {token} out of range ({})",
                self.cfg.tgt_vocab
            )));
        }
        if step >= self.cfg.max_steps {
            return Err(ModelError::Input(format!(
                "step {step} beyond max_steps {}",
                self.cfg.max_steps
            )));
        }
        let d = self.cfg.d_model;
        let tok = self.params.value("tgt_embed");
        let dir = self.params.value("dir_embed");
        let pos = self.params.value("dec_pos");
        let mut data = Vec::with_capacity(d);
        for c in 0..d {
            data.push(
                tok.at2(token, c) + dir.at2(direction.embedding_row(), c) + pos.at2(step, c),
            );
        }
        Ok(Tensor::from_vec(&[d], data)?)
    }

    /// Bind parameters onto a tape. With a dropout generator the graph is in
    /// training mode (differentiable leaves, dropout live); without one it
    /// is a frozen eval graph.
    pub fn bind<'a>(
        &'a self,
        tape: &'a Tape<F>,
        dropout_rng: Option<&'a mut ChaCha8Rng>,
    ) -> BoundModel<'a, F> {
        let trainable = dropout_rng.is_some();
        let mut vars = BTreeMap::new();
        for (name, entry) in self.params.iter() {
            let var = if trainable {
                tape.leaf(entry.value.clone())
            } else {
                tape.constant(entry.value.clone())
            };
            vars.insert(name.clone(), var);
        }
        BoundModel {
            model: self,
            tape,
            vars,
            dropout: std::cell::RefCell::new(dropout_rng),
        }
    }

    /// Reference-counted snapshot of the parameters; rebinding these for
    /// eval copies pointers, not buffers. Snapshots do not follow later
    /// optimizer updates.
    pub fn shared_params(&self) -> SharedParams<F> {
        SharedParams(
            self.params
                .iter()
                .map(|(name, entry)| (name.clone(), std::rc::Rc::new(entry.value.clone())))
                .collect(),
        )
    }

    /// Frozen eval bind from a [`Model::shared_params`] snapshot.
    pub fn bind_shared<'a>(
        &'a self,
        tape: &'a Tape<F>,
        shared: &SharedParams<F>,
    ) -> BoundModel<'a, F> {
        let vars = shared
            .0
            .iter()
            .map(|(name, rc)| (name.clone(), tape.constant_rc(std::rc::Rc::clone(rc))))
            .collect();
        BoundModel {
            model: self,
            tape,
            vars,
            dropout: std::cell::RefCell::new(None),
        }
    }

    // ---- eval-mode conveniences (fresh tape per call) ----

    pub fn encode_eval(&self, src_ids: &[usize]) -> Result<Tensor<F>, ModelError> {
        let tape = Tape::new();
        let bound = self.bind(&tape, None);
        let h = bound.encode(src_ids)?;
        Ok((*tape.value(h)).clone())
    }

    /// Start-head probabilities and the source-position attention map for an
    /// already encoded source.
    pub fn start_probs_eval(
        &self,
        h: &Tensor<F>,
    ) -> Result<(Vec<f64>, Tensor<F>), ModelError> {
        let tape = Tape::new();
        let bound = self.bind(&tape, None);
        let hv = tape.constant(h.clone());
        let v = bound.start_potentials(hv)?;
        let (vtilde, alpha) = bound.start_pooled(v)?;
        let probs = tape
            .value(vtilde)
            .data()
            .iter()
            .map(|&x| sigmoid_f64(x.to_f64()))
            .collect();
        Ok((probs, (*tape.value(alpha)).clone()))
    }

    /// Log-probabilities of the next token after `prefix`, given encoder
    /// states `h`.
    pub fn step_logprobs_eval(
        &self,
        h: &Tensor<F>,
        prefix: &[DirectedToken<usize>],
    ) -> Result<Vec<f64>, ModelError> {
        let shared = self.shared_params();
        self.step_logprobs_shared(&shared, &std::rc::Rc::new(h.clone()), prefix)
    }

    /// Same as [`Model::step_logprobs_eval`] but reusing a parameter
    /// snapshot; this is the beam search's hot path.
    pub fn step_logprobs_shared(
        &self,
        shared: &SharedParams<F>,
        h: &std::rc::Rc<Tensor<F>>,
        prefix: &[DirectedToken<usize>],
    ) -> Result<Vec<f64>, ModelError> {
        let tape = Tape::new();
        let bound = self.bind_shared(&tape, shared);
        let hv = tape.constant_rc(std::rc::Rc::clone(h));
        let logits = bound.decode_forward(prefix, hv)?;
        let n = tape.value(logits).rows();
        let last = tape.slice_rows(logits, n - 1, n)?;
        let lp = tape.log_softmax(last, Axis::Rows)?;
        Ok(tape.value(lp).data().iter().map(|v| v.to_f64()).collect())
    }
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cheaply rebindable parameter snapshot (see [`Model::shared_params`]).
pub struct SharedParams<F: Scalar>(std::collections::BTreeMap<String, std::rc::Rc<Tensor<F>>>);

/// A model bound to a tape; all forward passes happen here.
pub struct BoundModel<'a, F: Scalar> {
    model: &'a Model<F>,
    tape: &'a Tape<F>,
    vars: BTreeMap<String, Var>,
    dropout: std::cell::RefCell<Option<&'a mut ChaCha8Rng>>,
}

impl<'a, F: Scalar> BoundModel<'a, F> {
    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name:?}"))
    }

    fn cfg(&self) -> &ModelConfig {
        &self.model.cfg
    }

    fn drop(&self, x: Var) -> Result<Var, ModelError> {
        let mut guard = self.dropout.borrow_mut();
        match guard.as_deref_mut() {
            Some(rng) => Ok(self.tape.dropout(x, self.cfg().dropout, true, rng)?),
            None => Ok(x),
        }
    }

    /// Multi-head attention. `kv` supplies keys/values (self-attention when
    /// it equals the query input, cross-attention otherwise).
    fn attention(
        &self,
        prefix: &str,
        q_names: [&str; 4],
        x: Var,
        kv: Var,
        causal: bool,
    ) -> Result<Var, ModelError> {
        let t = self.tape;
        let cfg = self.cfg();
        let dh = cfg.head_dim();
        let q = t.matmul(x, self.var(&format!("{prefix}.{}", q_names[0])))?;
        let k = t.matmul(kv, self.var(&format!("{prefix}.{}", q_names[1])))?;
        let v = t.matmul(kv, self.var(&format!("{prefix}.{}", q_names[2])))?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = t.slice_cols(q, a, b)?;
            let kh = t.slice_cols(k, a, b)?;
            let vh = t.slice_cols(v, a, b)?;
            let scores = t.scale(t.matmul_nt(qh, kh)?, 1.0 / (dh as f64).sqrt())?;
            let attn = if causal {
                t.softmax_rows_causal(scores)?
            } else {
                t.softmax(scores, Axis::Rows)?
            };
            heads.push(t.matmul(attn, vh)?);
        }
        let cat = t.concat_cols(&heads)?;
        Ok(t.matmul(cat, self.var(&format!("{prefix}.{}", q_names[3])))?)
    }

    fn ffn(&self, prefix: &str, x: Var) -> Result<Var, ModelError> {
        let t = self.tape;
        let hidden = t.relu(t.matmul(x, self.var(&format!("{prefix}.ffn_w1")))?)?;
        Ok(t.matmul(hidden, self.var(&format!("{prefix}.ffn_w2")))?)
    }

    /// Encoder states, shaped source length × d_model.
    pub fn encode(&self, src_ids: &[usize]) -> Result<Var, ModelError> {
        let cfg = self.cfg();
        if src_ids.is_empty() {
            return Err(ModelError::Input("empty source".into()));
        }
        if src_ids.len() > cfg.max_steps {
            return Err(ModelError::Input(format!(
                "source length {} exceeds max_steps {}",
                src_ids.len(),
                cfg.max_steps
            )));
        }
        let t = self.tape;
        let tok = t.embedding_gather(self.var("src_embed"), src_ids)?;
        let pos_ids: Vec<usize> = (0..src_ids.len()).collect();
        let pos = t.embedding_gather(self.var("enc_pos"), &pos_ids)?;
        let mut x = t.add(tok, pos)?;
        x = self.drop(x)?;
        for i in 0..cfg.n_layers {
            let p = format!("enc{i}");
            let normed = t.rms_norm(x, self.var(&format!("{p}.norm1")))?;
            let attn = self.attention(&p, ["wq", "wk", "wv", "wo"], normed, normed, false)?;
            x = t.add(x, self.drop(attn)?)?;
            let normed = t.rms_norm(x, self.var(&format!("{p}.norm2")))?;
            let ff = self.ffn(&p, normed)?;
            x = t.add(x, self.drop(ff)?)?;
        }
        Ok(t.rms_norm(x, self.var("enc_norm"))?)
    }

    /// Per-step logits over the target vocabulary for a reformed prefix.
    /// Step `t` sees only tuples at steps `<= t` plus the encoder states.
    pub fn decode_forward(
        &self,
        prefix: &[DirectedToken<usize>],
        h: Var,
    ) -> Result<Var, ModelError> {
        let cfg = self.cfg();
        if prefix.is_empty() {
            return Err(ModelError::Input("empty decode prefix".into()));
        }
        if prefix.len() > cfg.max_steps {
            return Err(ModelError::Input(format!(
                "decode prefix length {} exceeds max_steps {}",
                prefix.len(),
                cfg.max_steps
            )));
        }
        let t = self.tape;
        let tok_ids: Vec<usize> = prefix.iter().map(|e| e.token).collect();
        if let Some(&bad) = tok_ids.iter().find(|&&id| id >= cfg.tgt_vocab) {
            return Err(ModelError::Input(format!(
                "target token id {bad} out of range ({})",
                cfg.tgt_vocab
            )));
        }
        let dir_ids: Vec<usize> = prefix.iter().map(|e| e.direction.embedding_row()).collect();
        let pos_ids: Vec<usize> = (0..prefix.len()).collect();
        let tok = t.embedding_gather(self.var("tgt_embed"), &tok_ids)?;
        let dir = t.embedding_gather(self.var("dir_embed"), &dir_ids)?;
        let pos = t.embedding_gather(self.var("dec_pos"), &pos_ids)?;
        let mut x = t.add(t.add(tok, dir)?, pos)?;
        x = self.drop(x)?;
        for i in 0..cfg.n_layers {
            let p = format!("dec{i}");
            let normed = t.rms_norm(x, self.var(&format!("{p}.norm1")))?;
            let self_attn = self.attention(&p, ["wq", "wk", "wv", "wo"], normed, normed, true)?;
            x = t.add(x, self.drop(self_attn)?)?;
            let normed = t.rms_norm(x, self.var(&format!("{p}.norm2")))?;
            let cross = self.attention(&p, ["cq", "ck", "cv", "co"], normed, h, false)?;
            x = t.add(x, self.drop(cross)?)?;
            let normed = t.rms_norm(x, self.var(&format!("{p}.norm3")))?;
            let ff = self.ffn(&p, normed)?;
            x = t.add(x, self.drop(ff)?)?;
        }
        let x = t.rms_norm(x, self.var("dec_norm"))?;
        // output projection tied to the target embedding
        Ok(t.matmul_nt(x, self.var("tgt_embed"))?)
    }

    /// Two-layer per-position potentials over the target vocabulary,
    /// shaped source length × tgt_vocab.
    pub fn start_potentials(&self, h: Var) -> Result<Var, ModelError> {
        let t = self.tape;
        let hidden = t.add_bias(t.matmul(h, self.var("start.w1"))?, self.var("start.b"))?;
        Ok(t.matmul(hidden, self.var("start.w2"))?)
    }

    /// Attention-pool potentials along source time: per vocab token `k`,
    /// `alpha[:, k]` is a softmax over source positions and the pooled logit
    /// is `sum_t alpha[t, k] * v[t, k]`. Returns `(pooled 1×V, alpha S×V)`.
    pub fn start_pooled(&self, v: Var) -> Result<(Var, Var), ModelError> {
        let t = self.tape;
        let alpha = t.softmax(v, Axis::Cols)?;
        let weighted = t.mul(alpha, v)?;
        let rows = t.value(weighted).rows();
        let ones = t.constant(Tensor::filled(&[1, rows], F::ONE));
        let pooled = t.matmul(ones, weighted)?;
        Ok((pooled, alpha))
    }
}

/// CSV dump of a start-head attention map: one row per (source position,
/// vocab token) pair with weight above `threshold`.
pub fn attention_csv(
    src_tokens: &[String],
    tgt_vocab: &Vocab,
    alpha: &Tensor<impl Scalar>,
    threshold: f64,
) -> String {
    let mut out = String::from("src_token,tgt_vocab_token,alpha\n");
    for (t, src_tok) in src_tokens.iter().enumerate() {
        for k in 0..alpha.cols() {
            let a = alpha.at2(t, k).to_f64();
            if a > threshold {
                out.push_str(&format!("{src_tok},{},{a:.6}\n", tgt_vocab.token(k)));
            }
        }
    }
    out
}

// ---- checkpoint glue ----

const BLOCK_KEYS: [&str; 11] = [
    "d-model",
    "n-heads",
    "n-layers",
    "d-ff",
    "src-vocab-size",
    "tgt-vocab-size",
    "max-steps",
    "dropout",
    "src-vocab",
    "tgt-vocab",
    "stopwords",
];

/// Flat `key = value` text stored inside the checkpoint so a saved model is
/// self-contained: architecture, both vocabularies, and the stop-word list.
pub fn config_block(cfg: &ModelConfig, codec: &Codec) -> String {
    let stop: Vec<&str> = codec.stopwords.iter().map(String::as_str).collect();
    format!(
        "d-model = {}\nn-heads = {}\nn-layers = {}\nd-ff = {}\nsrc-vocab-size = {}\ntgt-vocab-size = {}\nmax-steps = {}\ndropout = {}\nsrc-vocab = {}\ntgt-vocab = {}\nstopwords = {}\n",
        cfg.d_model,
        cfg.n_heads,
        cfg.n_layers,
        cfg.d_ff,
        cfg.src_vocab,
        cfg.tgt_vocab,
        cfg.max_steps,
        cfg.dropout,
        codec.src_vocab.to_listing(),
        codec.tgt_vocab.to_listing(),
        stop.join(" "),
    )
}

pub fn parse_config_block(text: &str) -> Result<(ModelConfig, Codec), ModelError> {
    let mut map: BTreeMap<&str, &str> = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ModelError::Config(format!("bad config line {line:?}")))?;
        let k = k.trim();
        if !BLOCK_KEYS.contains(&k) {
            return Err(ModelError::Config(format!("unknown config key {k:?}")));
        }
        map.insert(k, v.trim());
    }
    let get = |k: &str| {
        map.get(k)
            .copied()
            .ok_or_else(|| ModelError::Config(format!("missing config key {k:?}")))
    };
    let parse_usize = |k: &str| -> Result<usize, ModelError> {
        get(k)?
            .parse()
            .map_err(|_| ModelError::Config(format!("bad integer for {k:?}")))
    };
    let cfg = ModelConfig {
        d_model: parse_usize("d-model")?,
        n_heads: parse_usize("n-heads")?,
        n_layers: parse_usize("n-layers")?,
        d_ff: parse_usize("d-ff")?,
        src_vocab: parse_usize("src-vocab-size")?,
        tgt_vocab: parse_usize("tgt-vocab-size")?,
        max_steps: parse_usize("max-steps")?,
        dropout: get("dropout")?
            .parse()
            .map_err(|_| ModelError::Config("bad dropout".into()))?,
    };
    let src_vocab = Vocab::from_listing(get("src-vocab")?)?;
    let tgt_vocab = Vocab::from_listing(get("tgt-vocab")?)?;
    if src_vocab.len() != cfg.src_vocab || tgt_vocab.len() != cfg.tgt_vocab {
        return Err(ModelError::Config(
            "vocab listing length disagrees with declared sizes".into(),
        ));
    }
    let stopwords: BTreeSet<String> = map
        .get("stopwords")
        .unwrap_or(&"")
        .split_whitespace()
        .map(str::to_string)
        .collect();
    Ok((cfg, Codec::new(src_vocab, tgt_vocab, stopwords)))
}

pub fn save_model(path: &Path, model: &Model<f32>, codec: &Codec) -> Result<(), ModelError> {
    let block = config_block(model.config(), codec);
    write_checkpoint(path, &block, &model.params)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(Model<f32>, Codec), ModelError> {
    let (block, tensors) = read_checkpoint(path)?;
    let (cfg, codec) = parse_config_block(&block)?;
    let model = Model::from_params(cfg, tensors)?;
    Ok((model, codec))
}
