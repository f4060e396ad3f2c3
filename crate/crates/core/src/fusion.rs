//! Parallel per-passage prefill, cache fusion by token-axis concatenation,
//! fused-cache decoding, greedy generation, and the concatenated-prompt
//! baseline.
//!
//! Every passage is encoded independently at local positions `0..n-1`, so a
//! passage's cache never depends on its neighbors or its slot in the batch.
//! Fusing is pure data movement: block `i` of the fused cache is the cache
//! of passage `order[i]`, bit for bit. Target tokens then run at positions
//! `n..n+m-1` attending to every valid fused slot, which is what makes the
//! logits invariant under block permutations.

use crate::data::{format_passage, Passage, Tokenizer};
use crate::error::Error;
use crate::model::{ForwardOptions, LayerCache, Model, PrefixCache, SeqInput};
use crate::tensor::{AttentionPrefix, Tensor};
use crate::Result;

/// Greedy steps whose top-1/top-2 logit gap falls below this are logged as
/// near-ties; order-invariance claims exclude them.
pub const NEAR_TIE_THRESHOLD: f32 = 1e-6;

/// N passages rendered to fixed-width token blocks of length `n`.
#[derive(Debug, Clone)]
pub struct PassageBatch {
    /// N sequences, each exactly `n` ids.
    pub tokens: Vec<Vec<u32>>,
    /// Matching padding masks.
    pub valid: Vec<Vec<bool>>,
    pub n: usize,
    pub n_passages: usize,
    /// Provenance: passage titles in batch order.
    pub source_ids: Vec<String>,
    /// How many passages lost tokens to left-truncation.
    pub truncated: usize,
}

impl PassageBatch {
    /// Render passages in the given order into `n`-slot blocks.
    pub fn from_passages(passages: &[&Passage], tokenizer: &Tokenizer, n: usize) -> Result<Self> {
        if passages.is_empty() {
            return Err(Error::Contract("passage batch cannot be empty".into()));
        }
        let mut tokens = Vec::with_capacity(passages.len());
        let mut valid = Vec::with_capacity(passages.len());
        let mut source_ids = Vec::with_capacity(passages.len());
        let mut truncated = 0;
        for p in passages {
            let f = format_passage(p, tokenizer, n)?;
            truncated += usize::from(f.truncated);
            tokens.push(f.tokens);
            valid.push(f.valid);
            source_ids.push(p.title.clone());
        }
        Ok(PassageBatch {
            n_passages: tokens.len(),
            tokens,
            valid,
            n,
            source_ids,
            truncated,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.n_passages || self.valid.len() != self.n_passages {
            return Err(Error::Contract("inconsistent passage batch".into()));
        }
        for (seq, valid) in self.tokens.iter().zip(&self.valid) {
            if seq.len() != self.n || valid.len() != self.n {
                return Err(Error::Contract(format!(
                    "passage block has {} slots, batch is fixed at {}",
                    seq.len(),
                    self.n
                )));
            }
            if !valid.iter().any(|&v| v) {
                return Err(Error::Contract(
                    "passage block with no valid token".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Per-layer fused key/value tensors `[H, N*n, D]` with the concatenated
/// validity mask. Block `i` (slots `i*n..(i+1)*n`) is one passage's cache at
/// local positions `0..n-1`.
#[derive(Debug, Clone)]
pub struct FusedCache {
    pub layers: Vec<FusedLayer>,
    pub valid: Vec<bool>,
    pub n: usize,
    pub n_passages: usize,
}

#[derive(Debug, Clone)]
pub struct FusedLayer {
    pub k: Tensor,
    pub v: Tensor,
}

impl FusedCache {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Total slot count, `N * n`.
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    /// Attention prefix view reserving positions `0..n`.
    pub fn to_prefix(&self) -> PrefixCache {
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let shape = layer.k.shape();
                let (h, s, d) = (shape[0], shape[1], shape[2]);
                let mut p = AttentionPrefix::empty(h, d);
                p.len = s;
                p.valid = self.valid.clone();
                for head in 0..h {
                    p.k[head] = layer.k.data()[head * s * d..(head + 1) * s * d].to_vec();
                    p.v[head] = layer.v.data()[head * s * d..(head + 1) * s * d].to_vec();
                }
                p
            })
            .collect();
        PrefixCache::from_layers(layers, self.n)
    }
}

/// Extract per-passage, per-layer KV caches. Passages are encoded
/// independently (no cross-passage attention) at positions `0..n-1`, so the
/// result does not depend on batch composition or evaluation order; the
/// encoding may run on several threads.
pub fn prefill(d_p: &Model, batch: &PassageBatch) -> Result<Vec<Vec<LayerCache>>> {
    if !d_p.frozen() {
        return Err(Error::Contract(
            "prefill decoder must be frozen".into(),
        ));
    }
    batch.validate()?;
    if batch.n > d_p.config.max_position {
        return Err(Error::Position(format!(
            "passage length {} exceeds max_position {}",
            batch.n, d_p.config.max_position
        )));
    }
    let positions: Vec<usize> = (0..batch.n).collect();
    let encode_one = |i: usize| -> Result<Vec<LayerCache>> {
        let out = d_p.forward(
            &SeqInput {
                tokens: &batch.tokens[i],
                positions: &positions,
                valid: Some(&batch.valid[i]),
            },
            None,
            ForwardOptions {
                compute_logits: false,
                collect_attention: false,
            },
        )?;
        Ok(out.caches)
    };

    let n = batch.n_passages;
    let workers = crate::max_threads().min(n).max(1);
    if workers <= 1 {
        return (0..n).map(encode_one).collect();
    }
    let chunk = n.div_ceil(workers);
    let parts: Vec<Result<Vec<Vec<LayerCache>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let lo = w * chunk;
                let hi = ((w + 1) * chunk).min(n);
                scope.spawn(move || (lo..hi).map(encode_one).collect())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("prefill worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

fn check_homogeneous(caches: &[Vec<LayerCache>]) -> Result<(usize, usize, usize, usize)> {
    let first = caches
        .first()
        .and_then(|c| c.first())
        .ok_or_else(|| Error::Contract("res_fuse needs at least one cache".into()))?;
    let shape = first.k.shape().to_vec();
    let (h, n, d) = (shape[0], shape[1], shape[2]);
    let layers = caches[0].len();
    for per_passage in caches {
        if per_passage.len() != layers {
            return Err(Error::Contract(format!(
                "cache with {} layers in a batch of {layers}-layer caches",
                per_passage.len()
            )));
        }
        for layer in per_passage {
            if layer.k.shape() != [h, n, d] || layer.v.shape() != [h, n, d] {
                return Err(Error::shapes("res_fuse", &[h, n, d], layer.k.shape()));
            }
            if layer.positions.iter().copied().ne(0..n) {
                return Err(Error::Contract(
                    "fused blocks must carry local positions 0..n-1".into(),
                ));
            }
        }
    }
    Ok((layers, h, n, d))
}

/// Fuse per-passage caches by concatenating along the token axis in the
/// given block order. Pure data movement: no arithmetic touches the values.
pub fn res_fuse(caches: &[Vec<LayerCache>], order: &[usize]) -> Result<FusedCache> {
    let (layers, h, n, d) = check_homogeneous(caches)?;
    let big_n = caches.len();
    if order.len() != big_n {
        return Err(Error::Contract(format!(
            "order has {} entries for {big_n} caches",
            order.len()
        )));
    }
    let mut seen = vec![false; big_n];
    for &idx in order {
        if idx >= big_n || seen[idx] {
            return Err(Error::Contract(format!(
                "order {order:?} is not a permutation of 0..{big_n}"
            )));
        }
        seen[idx] = true;
    }

    let total = big_n * n;
    let mut fused_layers = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut k = vec![0.0f32; h * total * d];
        let mut v = vec![0.0f32; h * total * d];
        for head in 0..h {
            for (block, &src) in order.iter().enumerate() {
                let cache = &caches[src][l];
                let src_off = head * n * d;
                let dst_off = head * total * d + block * n * d;
                k[dst_off..dst_off + n * d]
                    .copy_from_slice(&cache.k.data()[src_off..src_off + n * d]);
                v[dst_off..dst_off + n * d]
                    .copy_from_slice(&cache.v.data()[src_off..src_off + n * d]);
            }
        }
        fused_layers.push(FusedLayer {
            k: Tensor::new(vec![h, total, d], k)?,
            v: Tensor::new(vec![h, total, d], v)?,
        });
    }
    let mut valid = Vec::with_capacity(total);
    for &src in order {
        valid.extend_from_slice(&caches[src][0].valid);
    }
    Ok(FusedCache {
        layers: fused_layers,
        valid,
        n,
        n_passages: big_n,
    })
}

/// Inverse of [`res_fuse`] with the identity order: split the fused cache
/// back into per-passage blocks, bit for bit.
pub fn res_unfuse(fused: &FusedCache) -> Result<Vec<Vec<LayerCache>>> {
    let (big_n, n) = (fused.n_passages, fused.n);
    let mut out = Vec::with_capacity(big_n);
    for block in 0..big_n {
        let mut per_layer = Vec::with_capacity(fused.layers.len());
        let valid = fused.valid[block * n..(block + 1) * n].to_vec();
        for layer in &fused.layers {
            let shape = layer.k.shape();
            let (h, total, d) = (shape[0], shape[1], shape[2]);
            let mut k = vec![0.0f32; h * n * d];
            let mut v = vec![0.0f32; h * n * d];
            for head in 0..h {
                let src = head * total * d + block * n * d;
                k[head * n * d..(head + 1) * n * d]
                    .copy_from_slice(&layer.k.data()[src..src + n * d]);
                v[head * n * d..(head + 1) * n * d]
                    .copy_from_slice(&layer.v.data()[src..src + n * d]);
            }
            per_layer.push(LayerCache {
                k: std::sync::Arc::new(Tensor::new(vec![h, n, d], k)?),
                v: std::sync::Arc::new(Tensor::new(vec![h, n, d], v)?),
                positions: (0..n).collect(),
                valid: valid.clone(),
            });
        }
        out.push(per_layer);
    }
    Ok(out)
}

/// Decode target tokens conditioned on the fused cache: token `t` runs at
/// position `n + t` and attends to every valid fused slot plus its causal
/// self prefix. Returns `[m, V]` logits.
pub fn fused_forward(d_t: &Model, fused: &FusedCache, target_tokens: &[u32]) -> Result<Tensor> {
    if target_tokens.is_empty() {
        return Err(Error::Contract("fused_forward needs target tokens".into()));
    }
    let positions: Vec<usize> = (fused.n..fused.n + target_tokens.len()).collect();
    let prefix = fused.to_prefix();
    let out = d_t.forward(
        &SeqInput::dense(target_tokens, &positions),
        Some(&prefix),
        ForwardOptions::default(),
    )?;
    Ok(out.logits.expect("logits requested"))
}

/// Outcome of greedy decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationResult {
    /// Generated ids, stop token excluded.
    pub tokens: Vec<u32>,
    /// True when decoding stopped at the token limit instead of the stop id.
    pub hit_max_new: bool,
    /// Steps whose top-1/top-2 gap was below [`NEAR_TIE_THRESHOLD`].
    pub near_tie_steps: Vec<usize>,
}

impl GenerationResult {
    pub fn had_near_tie(&self) -> bool {
        !self.near_tie_steps.is_empty()
    }
}

/// Argmax with the lowest-id tie rule, plus the top-1/top-2 gap.
fn argmax_with_gap(logits: &[f32]) -> (u32, f32) {
    let mut best = 0usize;
    let mut best_v = f32::NEG_INFINITY;
    let mut second_v = f32::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if v > best_v {
            second_v = best_v;
            best_v = v;
            best = i;
        } else if v > second_v {
            second_v = v;
        }
    }
    (best as u32, best_v - second_v)
}

/// Greedy loop shared by fused and baseline generation. `seed_logits` is the
/// next-token distribution already computed for the last prompt position;
/// `position` is where the first generated token will sit.
pub(crate) fn decode_greedy(
    model: &Model,
    mut prefix: PrefixCache,
    seed_logits: Vec<f32>,
    mut position: usize,
    max_new: usize,
    stop_token: u32,
) -> Result<GenerationResult> {
    let mut tokens = Vec::new();
    let mut near_tie_steps = Vec::new();
    let mut logits = seed_logits;
    loop {
        let (tok, gap) = argmax_with_gap(&logits);
        if gap < NEAR_TIE_THRESHOLD {
            near_tie_steps.push(tokens.len());
        }
        if tok == stop_token {
            return Ok(GenerationResult {
                tokens,
                hit_max_new: false,
                near_tie_steps,
            });
        }
        tokens.push(tok);
        if tokens.len() >= max_new {
            return Ok(GenerationResult {
                tokens,
                hit_max_new: true,
                near_tie_steps,
            });
        }
        let out = model.forward(
            &SeqInput::dense(&[tok], &[position]),
            Some(&prefix),
            ForwardOptions::default(),
        )?;
        prefix.append(&out.caches);
        logits = out.logits.expect("logits requested").data().to_vec();
        position += 1;
    }
}

/// Prefill, fuse in batch order, feed the query at positions `n..`, then
/// greedy-decode until the stop token or `max_new` tokens. Deterministic.
pub fn generate_greedy(
    d_p: &Model,
    d_t: &Model,
    batch: &PassageBatch,
    query_tokens: &[u32],
    max_new: usize,
    stop_token: u32,
) -> Result<GenerationResult> {
    if max_new < 1 {
        return Err(Error::Contract("max_new must be >= 1".into()));
    }
    if query_tokens.is_empty() {
        return Err(Error::Contract("query cannot be empty".into()));
    }
    let caches = prefill(d_p, batch)?;
    let order: Vec<usize> = (0..batch.n_passages).collect();
    let fused = res_fuse(&caches, &order)?;
    generate_greedy_fused(d_t, &fused, query_tokens, max_new, stop_token)
}

/// Greedy decoding from an already-fused cache.
pub fn generate_greedy_fused(
    d_t: &Model,
    fused: &FusedCache,
    query_tokens: &[u32],
    max_new: usize,
    stop_token: u32,
) -> Result<GenerationResult> {
    let n = fused.n;
    let needed = n + query_tokens.len() + max_new;
    if needed > d_t.config.max_position {
        return Err(Error::Position(format!(
            "cache block {n} + query {} + max_new {max_new} exceeds max_position {}",
            query_tokens.len(),
            d_t.config.max_position
        )));
    }
    let mut prefix = fused.to_prefix();
    let positions: Vec<usize> = (n..n + query_tokens.len()).collect();
    let out = d_t.forward(
        &SeqInput::dense(query_tokens, &positions),
        Some(&prefix),
        ForwardOptions::default(),
    )?;
    prefix.append(&out.caches);
    let logits = out.logits.expect("logits requested");
    let vocab = d_t.config.vocab_size;
    let last = logits.data()[(query_tokens.len() - 1) * vocab..].to_vec();
    decode_greedy(
        d_t,
        prefix,
        last,
        n + query_tokens.len(),
        max_new,
        stop_token,
    )
}

/// Ordinary causal forward over a concatenated prompt at global positions
/// `0..T-1`.
pub fn baseline_forward(model: &Model, prompt_tokens: &[u32]) -> Result<Tensor> {
    let positions: Vec<usize> = (0..prompt_tokens.len()).collect();
    let out = model.forward(
        &SeqInput::dense(prompt_tokens, &positions),
        None,
        ForwardOptions::default(),
    )?;
    Ok(out.logits.expect("logits requested"))
}

/// Greedy decoding from a concatenated prompt; the conventional
/// global-position path, with no order-invariance contract.
pub fn baseline_generate(
    model: &Model,
    prompt_tokens: &[u32],
    max_new: usize,
    stop_token: u32,
) -> Result<GenerationResult> {
    if max_new < 1 {
        return Err(Error::Contract("max_new must be >= 1".into()));
    }
    if prompt_tokens.is_empty() {
        return Err(Error::Contract("prompt cannot be empty".into()));
    }
    let needed = prompt_tokens.len() + max_new;
    if needed > model.config.max_position {
        return Err(Error::Position(format!(
            "prompt {} + max_new {max_new} exceeds max_position {}",
            prompt_tokens.len(),
            model.config.max_position
        )));
    }
    let mut prefix = PrefixCache::empty(&model.config);
    let positions: Vec<usize> = (0..prompt_tokens.len()).collect();
    let out = model.forward(
        &SeqInput::dense(prompt_tokens, &positions),
        Some(&prefix),
        ForwardOptions::default(),
    )?;
    prefix.append(&out.caches);
    let logits = out.logits.expect("logits requested");
    let vocab = model.config.vocab_size;
    let last = logits.data()[(prompt_tokens.len() - 1) * vocab..].to_vec();
    decode_greedy(
        model,
        prefix,
        last,
        prompt_tokens.len(),
        max_new,
        stop_token,
    )
}
