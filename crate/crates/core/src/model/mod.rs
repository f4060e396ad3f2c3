//! Decoder-only transformer used for both the frozen prefill decoder and the
//! trainable decoder: rotary positions, causal multi-head attention that can
//! be prefixed with an external KV cache, gated (SiLU) MLP, RMS norms.

mod checkpoint;

pub use checkpoint::{load_model, load_model_file, save_model, save_model_file};
pub(crate) use checkpoint::{parse_container, write_container, RawTensor};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::rng::Rng;
use crate::tensor::{AttentionPrefix, Graph, NodeId, Tensor};
use crate::Result;

/// Architecture hyperparameters. The default is the desk-scale reference
/// configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub max_position: usize,
    pub eps: f64,
    /// When true the output head reuses the token embedding (transposed);
    /// when false it is a separate `[hidden, vocab]` matrix.
    pub tied_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk_scale()
    }
}

impl ModelConfig {
    /// The desk-scale configuration used by the reference runs.
    pub fn desk_scale() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            head_dim: 32,
            hidden_dim: 128,
            mlp_dim: 256,
            vocab_size: crate::data::VOCAB_SIZE,
            rope_base: 10_000.0,
            max_position: 1024,
            eps: 1e-5,
            tied_output: false,
        }
    }

    /// A two-layer model small enough for finite-difference sweeps.
    pub fn tiny() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            head_dim: 16,
            hidden_dim: 32,
            mlp_dim: 64,
            vocab_size: crate::data::VOCAB_SIZE,
            rope_base: 10_000.0,
            max_position: 256,
            eps: 1e-5,
            tied_output: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::Config("n_layers must be >= 1".into()));
        }
        if self.n_heads < 1 {
            return Err(Error::Config("n_heads must be >= 1".into()));
        }
        if self.head_dim < 2 || self.head_dim % 2 != 0 {
            return Err(Error::Config(
                "head_dim must be even (rotary pairs dimensions)".into(),
            ));
        }
        if self.hidden_dim != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "hidden_dim {} != n_heads {} * head_dim {}",
                self.hidden_dim, self.n_heads, self.head_dim
            )));
        }
        if self.mlp_dim < 1 {
            return Err(Error::Config("mlp_dim must be >= 1".into()));
        }
        if self.vocab_size < 260 {
            return Err(Error::Config(format!(
                "vocab_size {} < 260 (256 byte tokens plus specials)",
                self.vocab_size
            )));
        }
        if self.max_position < 2 {
            return Err(Error::Config("max_position must be >= 2".into()));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }

    /// Total parameter count:
    /// `V*h + L*(4*h^2 + 3*h*mlp + 2*h) + h`, plus `h*V` when untied.
    pub fn param_count(&self) -> usize {
        let h = self.hidden_dim;
        let per_layer = 4 * h * h + 3 * h * self.mlp_dim + 2 * h;
        let head = if self.tied_output { 0 } else { h * self.vocab_size };
        self.vocab_size * h + self.n_layers * per_layer + h + head
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerParams {
    pub attn_norm: Arc<Tensor>,
    pub wq: Arc<Tensor>,
    pub wk: Arc<Tensor>,
    pub wv: Arc<Tensor>,
    pub wo: Arc<Tensor>,
    pub mlp_norm: Arc<Tensor>,
    pub w_gate: Arc<Tensor>,
    pub w_up: Arc<Tensor>,
    pub w_down: Arc<Tensor>,
}

/// Parameter store plus config. Weight matrices are `[in, out]` so a
/// projection is a plain `x @ W`.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub(crate) token_embedding: Arc<Tensor>,
    pub(crate) layers: Vec<LayerParams>,
    pub(crate) final_norm: Arc<Tensor>,
    pub(crate) lm_head: Option<Arc<Tensor>>,
    frozen: bool,
}

/// Per-layer key/value tensors produced by a forward pass, `[H, T, D]` each,
/// with the positions they were rotated to and the padding mask.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub k: Arc<Tensor>,
    pub v: Arc<Tensor>,
    pub positions: Vec<usize>,
    pub valid: Vec<bool>,
}

/// One sequence presented to the decoder. `valid` marks padding slots
/// (`false`) that must never be attended; `None` means all slots valid.
#[derive(Debug, Clone, Copy)]
pub struct SeqInput<'a> {
    pub tokens: &'a [u32],
    pub positions: &'a [usize],
    pub valid: Option<&'a [bool]>,
}

impl<'a> SeqInput<'a> {
    pub fn dense(tokens: &'a [u32], positions: &'a [usize]) -> Self {
        SeqInput {
            tokens,
            positions,
            valid: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub compute_logits: bool,
    pub collect_attention: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            compute_logits: true,
            collect_attention: false,
        }
    }
}

/// Attention prefix for a forward pass: per-layer constant KV slots plus the
/// position ranges they reserve. Built from a fused cache and extended with
/// self entries during decoding.
#[derive(Debug, Clone)]
pub struct PrefixCache {
    pub(crate) layers: Vec<Arc<AttentionPrefix>>,
    /// Positions `0..reserved_positions` belong to the cache block; new
    /// tokens must sit at or above this.
    pub(crate) reserved_positions: usize,
    /// Highest position among appended self entries, if any.
    pub(crate) max_self_position: Option<usize>,
}

impl PrefixCache {
    pub fn empty(config: &ModelConfig) -> Self {
        PrefixCache {
            layers: (0..config.n_layers)
                .map(|_| Arc::new(AttentionPrefix::empty(config.n_heads, config.head_dim)))
                .collect(),
            reserved_positions: 0,
            max_self_position: None,
        }
    }

    pub(crate) fn from_layers(layers: Vec<AttentionPrefix>, reserved_positions: usize) -> Self {
        PrefixCache {
            layers: layers.into_iter().map(Arc::new).collect(),
            reserved_positions,
            max_self_position: None,
        }
    }

    /// Number of slots per layer.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Append the self entries of a completed forward step so the next step
    /// can attend to them.
    pub fn append(&mut self, caches: &[LayerCache]) {
        assert_eq!(caches.len(), self.layers.len(), "layer count mismatch");
        for (layer, cache) in self.layers.iter_mut().zip(caches) {
            Arc::make_mut(layer).append(&cache.k, &cache.v, &cache.valid);
        }
        if let Some(cache) = caches.first() {
            let new_max = cache.positions.iter().copied().max();
            self.max_self_position = match (self.max_self_position, new_max) {
                (a, None) => a,
                (None, b) => b,
                (Some(a), Some(b)) => Some(a.max(b)),
            };
        }
    }
}

/// Result of a forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    /// `[T, V]` next-token logits (absent when `compute_logits` was off).
    pub logits: Option<Tensor>,
    /// New self-KV entries per layer (the slots appended after any prefix).
    pub caches: Vec<LayerCache>,
    /// Per-layer attention probabilities `[H, T, S]` when collected.
    pub attention: Option<Vec<Tensor>>,
}

/// Forward pass recorded into a caller-owned graph; used by training.
pub struct BuiltForward {
    pub logits: Option<NodeId>,
    pub cache_nodes: Vec<(NodeId, NodeId)>,
    /// Parameter node ids aligned with [`Model::named_params`] order.
    pub param_ids: Vec<NodeId>,
    pub attention_nodes: Vec<NodeId>,
}

impl Model {
    /// Deterministic initialization: every weight matrix is Normal(0, 0.02)
    /// drawn in the documented parameter order, norm weights are ones. Same
    /// (config, seed) gives bit-identical parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let std = 0.02;
        let h = config.hidden_dim;
        let mat = |rng: &mut Rng, rows: usize, cols: usize| -> Arc<Tensor> {
            Arc::new(Tensor::randn(vec![rows, cols], std, rng).with_grad())
        };
        let token_embedding = mat(&mut rng, config.vocab_size, h);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                attn_norm: Arc::new(Tensor::ones(vec![h]).with_grad()),
                wq: mat(&mut rng, h, h),
                wk: mat(&mut rng, h, h),
                wv: mat(&mut rng, h, h),
                wo: mat(&mut rng, h, h),
                mlp_norm: Arc::new(Tensor::ones(vec![h]).with_grad()),
                w_gate: mat(&mut rng, h, config.mlp_dim),
                w_up: mat(&mut rng, h, config.mlp_dim),
                w_down: mat(&mut rng, config.mlp_dim, h),
            });
        }
        let final_norm = Arc::new(Tensor::ones(vec![h]).with_grad());
        let lm_head = if config.tied_output {
            None
        } else {
            Some(mat(&mut rng, h, config.vocab_size))
        };
        Ok(Model {
            config,
            token_embedding,
            layers,
            final_norm,
            lm_head,
            frozen: false,
        })
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Freeze: clears `requires_grad` on every parameter so no graph ever
    /// allocates gradients for them.
    pub fn freeze(&mut self) {
        self.frozen = true;
        for (_, p) in self.named_params_mut() {
            Arc::make_mut(p).requires_grad = false;
        }
    }

    /// Set the frozen flag either way (a loaded checkpoint may need to be
    /// thawed to keep training it).
    pub fn set_frozen_flag(&mut self, frozen: bool) {
        if frozen {
            self.freeze();
        } else {
            self.frozen = false;
            for (_, p) in self.named_params_mut() {
                Arc::make_mut(p).requires_grad = true;
            }
        }
    }

    /// Parameters in the fixed documented order (also the checkpoint
    /// manifest order and the optimizer order).
    pub fn named_params(&self) -> Vec<(String, &Arc<Tensor>)> {
        let mut out: Vec<(String, &Arc<Tensor>)> =
            vec![("token_embedding".into(), &self.token_embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layers.{i}.wq"), &l.wq));
            out.push((format!("layers.{i}.wk"), &l.wk));
            out.push((format!("layers.{i}.wv"), &l.wv));
            out.push((format!("layers.{i}.wo"), &l.wo));
            out.push((format!("layers.{i}.mlp_norm"), &l.mlp_norm));
            out.push((format!("layers.{i}.w_gate"), &l.w_gate));
            out.push((format!("layers.{i}.w_up"), &l.w_up));
            out.push((format!("layers.{i}.w_down"), &l.w_down));
        }
        out.push(("final_norm".into(), &self.final_norm));
        if let Some(head) = &self.lm_head {
            out.push(("lm_head".into(), head));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Arc<Tensor>)> {
        let mut out: Vec<(String, &mut Arc<Tensor>)> =
            vec![("token_embedding".into(), &mut self.token_embedding)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &mut l.attn_norm));
            out.push((format!("layers.{i}.wq"), &mut l.wq));
            out.push((format!("layers.{i}.wk"), &mut l.wk));
            out.push((format!("layers.{i}.wv"), &mut l.wv));
            out.push((format!("layers.{i}.wo"), &mut l.wo));
            out.push((format!("layers.{i}.mlp_norm"), &mut l.mlp_norm));
            out.push((format!("layers.{i}.w_gate"), &mut l.w_gate));
            out.push((format!("layers.{i}.w_up"), &mut l.w_up));
            out.push((format!("layers.{i}.w_down"), &mut l.w_down));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        if let Some(head) = &mut self.lm_head {
            out.push(("lm_head".into(), head));
        }
        out
    }

    /// Bitwise parameter equality.
    pub fn params_equal(&self, other: &Model) -> bool {
        let a = self.named_params();
        let b = other.named_params();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape() == tb.shape()
                    && ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    fn validate_input(&self, input: &SeqInput, prefix: Option<&PrefixCache>) -> Result<()> {
        let t = input.tokens.len();
        if t == 0 {
            return Err(Error::Contract("forward requires at least one token".into()));
        }
        if input.positions.len() != t {
            return Err(Error::Contract(format!(
                "{} positions for {} tokens",
                input.positions.len(),
                t
            )));
        }
        if let Some(v) = input.valid {
            if v.len() != t {
                return Err(Error::Contract(format!(
                    "valid mask length {} for {} tokens",
                    v.len(),
                    t
                )));
            }
        }
        for w in input.positions.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Position(format!(
                    "positions must be strictly increasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        let last = *input.positions.last().unwrap();
        if last >= self.config.max_position {
            return Err(Error::Position(format!(
                "position {last} >= max_position {}",
                self.config.max_position
            )));
        }
        if let Some(p) = prefix {
            if p.layers.len() != self.config.n_layers {
                return Err(Error::Contract(format!(
                    "prefix has {} layers, model has {}",
                    p.layers.len(),
                    self.config.n_layers
                )));
            }
            let first = input.positions[0];
            if first < p.reserved_positions {
                return Err(Error::Position(format!(
                    "position {first} overlaps the cache block reserved up to {}",
                    p.reserved_positions
                )));
            }
            if let Some(mp) = p.max_self_position {
                if first <= mp {
                    return Err(Error::Position(format!(
                        "position {first} not past already-decoded position {mp}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Record a forward pass into `graph`. Attention at step `t` covers all
    /// valid prefix slots plus causally-allowed self slots.
    pub fn build_forward(
        &self,
        graph: &mut Graph,
        input: &SeqInput,
        prefix: Option<&PrefixCache>,
        opts: ForwardOptions,
    ) -> Result<BuiltForward> {
        self.validate_input(input, prefix)?;
        let cfg = &self.config;
        let scale = 1.0 / (cfg.head_dim as f64).sqrt();
        let self_valid: Option<Vec<bool>> = input.valid.map(|v| v.to_vec());

        let mut param_ids = Vec::new();
        let embedding = graph.param(&self.token_embedding);
        param_ids.push(embedding);

        let mut x = graph.embed(embedding, input.tokens)?;
        let mut cache_nodes = Vec::with_capacity(cfg.n_layers);
        let mut attention_nodes = Vec::with_capacity(cfg.n_layers);
        let mut layer_param_ids = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let attn_norm = graph.param(&layer.attn_norm);
            let wq = graph.param(&layer.wq);
            let wk = graph.param(&layer.wk);
            let wv = graph.param(&layer.wv);
            let wo = graph.param(&layer.wo);
            let mlp_norm = graph.param(&layer.mlp_norm);
            let w_gate = graph.param(&layer.w_gate);
            let w_up = graph.param(&layer.w_up);
            let w_down = graph.param(&layer.w_down);
            layer_param_ids
                .extend([attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down]);

            let normed = graph.rms_norm(x, attn_norm, cfg.eps)?;
            let q = graph.matmul(normed, wq)?;
            let k = graph.matmul(normed, wk)?;
            let v = graph.matmul(normed, wv)?;
            let q = graph.split_heads(q, cfg.n_heads)?;
            let k = graph.split_heads(k, cfg.n_heads)?;
            let v = graph.split_heads(v, cfg.n_heads)?;
            let q = graph.rope(q, input.positions, cfg.rope_base)?;
            let k = graph.rope(k, input.positions, cfg.rope_base)?;
            cache_nodes.push((k, v));

            let layer_prefix = prefix.map(|p| p.layers[li].clone());
            let attn = graph.attention(q, k, v, layer_prefix, self_valid.clone(), scale)?;
            attention_nodes.push(attn);
            let merged = graph.merge_heads(attn)?;
            let o = graph.matmul(merged, wo)?;
            x = graph.add(x, o)?;

            let normed2 = graph.rms_norm(x, mlp_norm, cfg.eps)?;
            let gate = graph.matmul(normed2, w_gate)?;
            let up = graph.matmul(normed2, w_up)?;
            let act = graph.silu(gate)?;
            let gated = graph.mul(act, up)?;
            let down = graph.matmul(gated, w_down)?;
            x = graph.add(x, down)?;
        }
        param_ids.extend(layer_param_ids);

        let final_norm_id = graph.param(&self.final_norm);
        let logits = if opts.compute_logits {
            let normed = graph.rms_norm(x, final_norm_id, cfg.eps)?;
            let logits = match &self.lm_head {
                Some(head) => {
                    let head_id = graph.param(head);
                    param_ids.push(final_norm_id);
                    param_ids.push(head_id);
                    graph.matmul(normed, head_id)?
                }
                None => {
                    param_ids.push(final_norm_id);
                    let head = graph.transpose_2d(embedding)?;
                    graph.matmul(normed, head)?
                }
            };
            Some(logits)
        } else {
            param_ids.push(final_norm_id);
            if let Some(head) = &self.lm_head {
                param_ids.push(graph.param(head));
            }
            None
        };
        debug_assert_eq!(param_ids.len(), self.named_params().len());
        Ok(BuiltForward {
            logits,
            cache_nodes,
            param_ids,
            attention_nodes,
        })
    }

    /// Forward pass. Returns next-token logits at every input position and
    /// the new per-layer self-KV entries (to append after any prefix).
    pub fn forward(
        &self,
        input: &SeqInput,
        prefix: Option<&PrefixCache>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let mut graph = Graph::new();
        let built = self.build_forward(&mut graph, input, prefix, opts)?;
        let valid = input
            .valid
            .map(|v| v.to_vec())
            .unwrap_or_else(|| vec![true; input.tokens.len()]);
        let caches = built
            .cache_nodes
            .iter()
            .map(|&(k, v)| LayerCache {
                k: graph.value_arc(k),
                v: graph.value_arc(v),
                positions: input.positions.to_vec(),
                valid: valid.clone(),
            })
            .collect();
        let attention = if opts.collect_attention {
            Some(
                built
                    .attention_nodes
                    .iter()
                    .map(|&id| graph.attention_weights(id).expect("attention node"))
                    .collect(),
            )
        } else {
            None
        };
        Ok(ForwardOutput {
            logits: built
                .logits
                .map(|id| graph.value(id).clone()),
            caches,
            attention,
        })
    }
}

/// Rotate adjacent coordinate pairs of `x: [H, T, D]` by
/// `position / rope_base^(2i/D)` radians; position 0 is the identity.
pub fn apply_rope(x: &Tensor, positions: &[usize], rope_base: f64) -> Result<Tensor> {
    let mut graph = Graph::new();
    let id = graph.constant(x.clone());
    let rotated = graph.rope(id, positions, rope_base)?;
    Ok(graph.value(rotated).clone())
}
