//! Miniature decoder-only transformer with hand-derived backpropagation.
//!
//! Architecture (pre-layer-norm GPT): token + learned positional embeddings,
//! `n_layers` blocks of causal multi-head attention and a GELU feed-forward,
//! a final layer norm and an LM head `d_model x vocab`. Everything is `f64`.

mod backward;
mod forward;
mod train;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{SplitMix64, Stream};

pub use backward::{loss_and_grads, BackwardResult};
pub use forward::{embed, forward, forward_from_embeddings, forward_tokens, ForwardTrace};
pub use train::{
    extract_epoch, extract_frozen, perplexity, sequence_loss, train, train_with_callback, Adam,
    ExtractMode, GradientBundle, TrainHyper,
};

/// Space in which the LM-head gradient is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmGradSpace {
    /// d loss / d logits, i.e. `(p - onehot) * weight`.
    #[default]
    Logits,
    /// d loss / d probabilities, i.e. `-weight / p[target]` at the target entry.
    Probs,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub init_seed: u64,
    #[serde(default)]
    pub tie_lm_head: bool,
    #[serde(default)]
    pub lm_grad_space: LmGradSpace,
    /// Also train on predicting the EOS that closes the response.
    #[serde(default = "default_true")]
    pub loss_on_eos: bool,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, d_model: usize, n_layers: usize, n_heads: usize) -> Self {
        Self {
            d_model,
            n_layers,
            n_heads,
            d_ff: 4 * d_model,
            vocab_size,
            max_seq_len: 16,
            init_seed: 42,
            tie_lm_head: false,
            lm_grad_space: LmGradSpace::Logits,
            loss_on_eos: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, f, v, s) = (self.d_model, self.d_ff, self.vocab_size, self.max_seq_len);
        let per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        let head = if self.tie_lm_head { 0 } else { d * v };
        v * d + s * d + self.n_layers * per_layer + 2 * d + head
    }

    /// 64-bit fingerprint of the configuration (including the init seed).
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        format!("{:016x}", u64::from_be_bytes(bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl LayerParams {
    fn zeros(d: usize, f: usize) -> Self {
        Self {
            ln1_g: vec![0.0; d],
            ln1_b: vec![0.0; d],
            wq: vec![0.0; d * d],
            bq: vec![0.0; d],
            wk: vec![0.0; d * d],
            bk: vec![0.0; d],
            wv: vec![0.0; d * d],
            bv: vec![0.0; d],
            wo: vec![0.0; d * d],
            bo: vec![0.0; d],
            ln2_g: vec![0.0; d],
            ln2_b: vec![0.0; d],
            w1: vec![0.0; d * f],
            b1: vec![0.0; f],
            w2: vec![0.0; f * d],
            b2: vec![0.0; d],
        }
    }

    fn tensors(&self) -> [(&'static str, &Vec<f64>); 16] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// All trainable tensors, row-major. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    /// `d_model x vocab`; empty when the head is tied to `tok_emb`.
    pub lm_head: Vec<f64>,
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        Self {
            tok_emb: vec![0.0; v * d],
            pos_emb: vec![0.0; cfg.max_seq_len * d],
            layers: (0..cfg.n_layers).map(|_| LayerParams::zeros(d, cfg.d_ff)).collect(),
            lnf_g: vec![0.0; d],
            lnf_b: vec![0.0; d],
            lm_head: if cfg.tie_lm_head { Vec::new() } else { vec![0.0; d * v] },
        }
    }

    /// Named tensors in declared (checkpoint) order.
    pub fn named_tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        if !self.lm_head.is_empty() {
            out.push(("lm_head".into(), &self.lm_head));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in self.layers.iter_mut() {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        if !self.lm_head.is_empty() {
            out.push(&mut self.lm_head);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (_, t) in self.named_tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        let src: Vec<&Vec<f64>> = other.named_tensors().into_iter().map(|(_, t)| t).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += scale * b;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

/// Scaled-normal initialisation: std 0.02, residual output projections
/// additionally scaled by `1/sqrt(2 n_layers)`; layer-norm gains 1, biases 0.
pub fn init_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut rng = SplitMix64::substream(cfg.init_seed, Stream::Init);
    let mut p = Params::zeros(cfg);
    let std = 0.02;
    let resid_std = std / (2.0 * cfg.n_layers as f64).sqrt();
    let mut fill = |t: &mut Vec<f64>, s: f64| t.iter_mut().for_each(|x| *x = s * rng.next_normal());
    fill(&mut p.tok_emb, std);
    fill(&mut p.pos_emb, std);
    for layer in p.layers.iter_mut() {
        layer.ln1_g.iter_mut().for_each(|x| *x = 1.0);
        layer.ln2_g.iter_mut().for_each(|x| *x = 1.0);
        fill(&mut layer.wq, std);
        fill(&mut layer.wk, std);
        fill(&mut layer.wv, std);
        fill(&mut layer.wo, resid_std);
        fill(&mut layer.w1, std);
        fill(&mut layer.w2, resid_std);
    }
    p.lnf_g.iter_mut().for_each(|x| *x = 1.0);
    fill(&mut p.lm_head, std);
    Ok(Model { config: cfg.clone(), params: p })
}

const CHECKPOINT_FORMAT: &str = "tinylm-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<CheckpointTensor>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    /// IEEE-754 bit patterns, so reloads are bit-exact.
    bits: Vec<u64>,
}

impl Model {
    pub fn to_checkpoint_json(&self) -> String {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: self
                .params
                .named_tensors()
                .into_iter()
                .map(|(name, t)| CheckpointTensor {
                    name,
                    bits: t.iter().map(|x| x.to_bits()).collect(),
                })
                .collect(),
        };
        serde_json::to_string(&ckpt).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        ckpt.config.validate()?;
        let mut params = Params::zeros(&ckpt.config);
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != ckpt.tensors.len() {
            return Err(Error::Config("checkpoint tensor count mismatch".into()));
        }
        for ((dst, name), src) in params.tensors_mut().into_iter().zip(names).zip(ckpt.tensors) {
            if src.name != name || src.bits.len() != dst.len() {
                return Err(Error::Config(format!("checkpoint tensor {} does not match {name}", src.name)));
            }
            for (d, b) in dst.iter_mut().zip(src.bits) {
                *d = f64::from_bits(b);
            }
        }
        Ok(Model { config: ckpt.config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&text)
    }
}
