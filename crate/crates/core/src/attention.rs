//! Patch–channel cross-attention with channel-specific key/value experts.
//!
//! For every active channel `k` the block gathers a source matrix `S_k` (all
//! tokens routed to `k`) and a target matrix `T_k` (all tokens of channel
//! `k`), computes `softmax(Q_k K_kᵀ / √d_h) V_k` per head with a shared query
//! projection and per-channel key/value projections, and scatters the
//! per-channel outputs back onto their source tokens, weighted according to
//! [`Aggregation`]. The aggregated rows go through a shared output projection.
//!
//! Queries are projected once per token and gathered per channel. Keys and
//! values are projected for every active channel on every call.
//!
//! The CLS row, when present, is a source for every active channel with
//! weight `1/C` and is never a target.
//!
//! Concurrency: the per-channel work (gather, projections, attention) is
//! independent across channels and could run on separate workers; the
//! scatter back into token rows must be serialized per destination row. The
//! implementation here is sequential and processes channels in ascending
//! slot order, so results are deterministic.

use std::fmt;
use std::str::FromStr;

use crate::error::{config, contract, Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::{normal_tensor, Rng};
use crate::router::RoutingTable;
use crate::tensor::{MacTerm, Tensor, Var};
use crate::tokenizer::TokenGrid;

/// How per-expert outputs are combined for a token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// `Σ_k R(h)_k · O_k[idx]` with the raw surviving gate values.
    #[default]
    GateWeighted,
    /// Weight `1/k` per selected expert.
    Uniform,
    /// Surviving gate values rescaled to sum to one per token.
    Renormalized,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::GateWeighted => "gate",
            Aggregation::Uniform => "uniform",
            Aggregation::Renormalized => "renorm",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gate" | "gate-weighted" => Ok(Aggregation::GateWeighted),
            "uniform" => Ok(Aggregation::Uniform),
            "renorm" | "renormalized" => Ok(Aggregation::Renormalized),
            other => config(format!(
                "unknown aggregation mode {other:?} (expected gate, uniform or renorm)"
            )),
        }
    }
}

/// Shared query/output projections plus one key and one value expert per channel.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: Vec<ParamId>,
    pub w_v: Vec<ParamId>,
    pub w_o: ParamId,
    pub heads: usize,
    pub dim: usize,
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return config(format!("embedding width {dim} not divisible by {heads} heads"));
    }
    Ok(())
}

impl AttentionParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        dim: usize,
        channels: usize,
        heads: usize,
    ) -> Result<Self> {
        check_heads(dim, heads)?;
        let std = 1.0 / (dim as f64).sqrt();
        let mut proj = |name: String| store.add(name, normal_tensor(rng, &[dim, dim], std));
        let w_q = proj(format!("{prefix}.w_q"));
        let w_k = (0..channels).map(|c| proj(format!("{prefix}.w_k.{c}"))).collect();
        let w_v = (0..channels).map(|c| proj(format!("{prefix}.w_v.{c}"))).collect();
        let w_o = proj(format!("{prefix}.w_o"));
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            heads,
            dim,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_k.len()
    }
}

/// Row provenance of the per-channel source and target matrices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelBatches {
    /// Per channel slot: flat token ids forming the rows of `S_k`. The CLS
    /// row, when included, has id `num_tokens` and comes last.
    pub sources: Vec<Vec<usize>>,
    /// Per channel slot: flat token ids forming the rows of `T_k`.
    pub targets: Vec<Vec<usize>>,
    pub num_tokens: usize,
    pub with_cls: bool,
}

impl ChannelBatches {
    pub fn cls_id(&self) -> usize {
        self.num_tokens
    }

    /// Materializes `S_k` from token rows (and a CLS row, if included).
    pub fn source_matrix(&self, tokens: &Tensor, cls: Option<&Tensor>, k: usize) -> Option<Tensor> {
        gather(tokens, cls, &self.sources[k])
    }

    pub fn target_matrix(&self, tokens: &Tensor, k: usize) -> Option<Tensor> {
        gather(tokens, None, &self.targets[k])
    }
}

fn gather(tokens: &Tensor, cls: Option<&Tensor>, ids: &[usize]) -> Option<Tensor> {
    if ids.is_empty() {
        return None;
    }
    let d = tokens.cols();
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id < tokens.rows() {
            data.extend_from_slice(tokens.row(id));
        } else {
            data.extend_from_slice(cls.expect("CLS id without CLS row").data());
        }
    }
    Some(Tensor::new(vec![ids.len(), d], data).expect("consistent rows"))
}

/// Groups tokens per channel according to `routing`.
pub fn build_batches(
    num_patches: usize,
    channels: usize,
    routing: &RoutingTable,
    with_cls: bool,
) -> Result<ChannelBatches> {
    let num_tokens = num_patches * channels;
    if routing.num_tokens() != num_tokens || routing.num_experts() != channels {
        return contract(format!(
            "routing covers {} tokens x {} experts but the grid has {num_tokens} tokens x {channels} channels",
            routing.num_tokens(),
            routing.num_experts()
        ));
    }
    let sources = routing
        .sources
        .iter()
        .map(|ids| {
            let mut ids = ids.clone();
            if with_cls {
                ids.push(num_tokens);
            }
            ids
        })
        .collect();
    let targets = (0..channels)
        .map(|k| (0..num_patches).map(|i| i * channels + k).collect())
        .collect();
    Ok(ChannelBatches {
        sources,
        targets,
        num_tokens,
        with_cls,
    })
}

/// Standard multi-head attention core: `concat_h softmax(q_h k_hᵀ/√d_h) v_h`.
/// Returns the output and the per-head attention matrices.
pub fn multi_head(
    s: &mut Session,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = s.value(q).cols();
    check_heads(d, heads)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                s.g.slice_cols(q, h * dh, dh)?,
                s.g.slice_cols(k, h * dh, dh)?,
                s.g.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = s.g.transpose(kh)?;
        let prev = s.g.set_mac_term(MacTerm::Score);
        let scores = s.g.matmul(qh, kt)?;
        s.g.set_mac_term(prev);
        let scores = s.g.scale(scores, scale);
        let a = s.g.softmax_rows(scores)?;
        let prev = s.g.set_mac_term(MacTerm::Value);
        let o = s.g.matmul(a, vh)?;
        s.g.set_mac_term(prev);
        outs.push(o);
        maps.push(a);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        s.g.concat_cols(&outs)?
    };
    Ok((out, maps))
}

fn matmul_as(s: &mut Session, term: MacTerm, a: Var, b: Var) -> Result<Var> {
    let prev = s.g.set_mac_term(term);
    let out = s.g.matmul(a, b);
    s.g.set_mac_term(prev);
    out
}

/// Per-channel attention results; `None` where a channel has no sources.
#[derive(Clone, Debug, Default)]
pub struct CrossAttention {
    pub outputs: Vec<Option<Var>>,
    /// `attention[k][h]` is `A_k` for head `h`.
    pub attention: Vec<Vec<Var>>,
}

/// Cross-attention for every channel slot. `pool` holds the token rows
/// followed by the CLS row when `batches.with_cls`; `active[k]` is the
/// original channel id of slot `k` and selects its key/value experts.
pub fn cross_attend(
    s: &mut Session,
    params: &AttentionParams,
    pool: Var,
    batches: &ChannelBatches,
    active: &[usize],
) -> Result<CrossAttention> {
    if active.len() != batches.targets.len() {
        return contract("active channel list does not match channel batches");
    }
    if let Some(&bad) = active.iter().find(|&&c| c >= params.channels()) {
        return config(format!("channel {bad} has no key/value expert"));
    }
    let w_q = s.p(params.w_q);
    let q_all = matmul_as(s, MacTerm::QProj, pool, w_q)?;

    let mut out = CrossAttention::default();
    for (k, &orig) in active.iter().enumerate() {
        let targets = &batches.targets[k];
        let sources = &batches.sources[k];
        if targets.is_empty() && !sources.is_empty() {
            return contract(format!("channel slot {k} has sources but no targets"));
        }
        let t = s.g.index_select(pool, targets)?;
        let (wk, wv) = (s.p(params.w_k[orig]), s.p(params.w_v[orig]));
        let keys = matmul_as(s, MacTerm::KvProj, t, wk)?;
        let values = matmul_as(s, MacTerm::KvProj, t, wv)?;
        if sources.is_empty() {
            out.outputs.push(None);
            out.attention.push(Vec::new());
            continue;
        }
        let q = s.g.index_select(q_all, sources)?;
        let (o, maps) = multi_head(s, q, keys, values, params.heads)?;
        out.outputs.push(Some(o));
        out.attention.push(maps);
    }
    Ok(out)
}

/// Per-source-row aggregation weights for one channel slot.
fn weights_for(
    s: &mut Session,
    k: usize,
    batches: &ChannelBatches,
    routing: &RoutingTable,
    gate_src: Option<Var>,
    renorm: Option<Var>,
    mode: Aggregation,
) -> Result<Var> {
    let ids = &batches.sources[k];
    let c = routing.num_experts() as f64;
    let cls_w = 1.0 / c;
    match (mode, gate_src) {
        (Aggregation::Uniform, _) | (_, None) => {
            let w = ids
                .iter()
                .map(|&t| {
                    if t == batches.cls_id() && batches.with_cls {
                        cls_w
                    } else {
                        match mode {
                            Aggregation::Uniform => 1.0 / routing.k as f64,
                            Aggregation::GateWeighted => routing.gates.at(t, k),
                            Aggregation::Renormalized => {
                                routing.gates.at(t, k) / routing.gates.row(t).iter().sum::<f64>()
                            }
                        }
                    }
                })
                .collect();
            Ok(s.constant(Tensor::vector(w)?))
        }
        (_, Some(src)) => {
            let pos: Vec<(usize, usize)> = ids.iter().map(|&t| (t, k)).collect();
            let w = s.g.gather_elems(src, &pos)?;
            match (mode, renorm) {
                (Aggregation::Renormalized, Some(inv)) => {
                    let inv = s.g.index_select(inv, ids)?;
                    s.g.mul(w, inv)
                }
                _ => Ok(w),
            }
        }
    }
}

/// Scatters weighted per-channel outputs onto their source rows and applies
/// the output projection. Returns `[(T (+1)) × D]` rows in pool order.
pub fn aggregate(
    s: &mut Session,
    params: &AttentionParams,
    attended: &CrossAttention,
    batches: &ChannelBatches,
    routing: &RoutingTable,
    probs: Option<Var>,
    mode: Aggregation,
) -> Result<Var> {
    if let Some(t) = routing.expert_sets.iter().position(Vec::is_empty) {
        return contract(format!("token {t} has an empty expert set"));
    }
    let rows = batches.num_tokens + usize::from(batches.with_cls);
    let c = routing.num_experts();

    // gate source: router probabilities, plus a constant 1/C row for CLS
    let gate_src = match probs {
        Some(p) if batches.with_cls => {
            let cls_row = s.constant(Tensor::full(&[1, c], 1.0 / c as f64));
            Some(s.g.concat_rows(&[p, cls_row])?)
        }
        other => other,
    };
    // per-row 1 / Σ(selected gates), for renormalized mode
    let renorm = match (mode, gate_src) {
        (Aggregation::Renormalized, Some(src)) => {
            let mut pos = Vec::new();
            let mut owner = Vec::new();
            for (t, set) in routing.expert_sets.iter().enumerate() {
                for &x in set {
                    pos.push((t, x));
                    owner.push(t);
                }
            }
            if batches.with_cls {
                for x in 0..c {
                    pos.push((batches.cls_id(), x));
                    owner.push(batches.cls_id());
                }
            }
            let sel = s.g.gather_elems(src, &pos)?;
            let zero = s.constant(Tensor::zeros(&[rows]));
            let sums = s.g.index_add(zero, &owner, sel)?;
            Some(s.g.recip(sums))
        }
        _ => None,
    };

    let d = params.dim;
    let mut acc = s.constant(Tensor::zeros(&[rows, d]));
    for (k, o) in attended.outputs.iter().enumerate() {
        let Some(o) = *o else { continue };
        let w = weights_for(s, k, batches, routing, gate_src, renorm, mode)?;
        let scaled = s.g.scale_rows(o, w)?;
        acc = s.g.index_add(acc, &batches.sources[k], scaled)?;
    }
    let w_o = s.p(params.w_o);
    matmul_as(s, MacTerm::OProj, acc, w_o)
}

/// Output of one channel-MoE block on a session.
#[derive(Clone, Debug)]
pub struct MoeOutput {
    /// `[T × D]` updated token rows.
    pub tokens: Var,
    pub cls: Option<Var>,
    pub attended: CrossAttention,
    pub batches: ChannelBatches,
}

/// Full block: batches → cross-attention → aggregation → output projection.
///
/// `probs` is the router probability node the gates were read from; with
/// `None` the gate values in `routing` enter as constants.
#[allow(clippy::too_many_arguments)]
pub fn channel_moe_graph(
    s: &mut Session,
    params: &AttentionParams,
    tokens: Var,
    cls: Option<Var>,
    num_patches: usize,
    active: &[usize],
    routing: &RoutingTable,
    probs: Option<Var>,
    mode: Aggregation,
) -> Result<MoeOutput> {
    let t = num_patches * active.len();
    if s.value(tokens).rows() != t {
        return contract(format!(
            "token rows {} do not match {num_patches} patches x {} channels",
            s.value(tokens).rows(),
            active.len()
        ));
    }
    let batches = build_batches(num_patches, active.len(), routing, cls.is_some())?;
    let pool = match cls {
        Some(c) => s.g.concat_rows(&[tokens, c])?,
        None => tokens,
    };
    let attended = cross_attend(s, params, pool, &batches, active)?;
    let out = aggregate(s, params, &attended, &batches, routing, probs, mode)?;
    let (tokens, cls) = if batches.with_cls {
        let ids: Vec<usize> = (0..t).collect();
        (
            s.g.index_select(out, &ids)?,
            Some(s.g.index_select(out, &[t])?),
        )
    } else {
        (out, None)
    };
    Ok(MoeOutput {
        tokens,
        cls,
        attended,
        batches,
    })
}

/// Evaluates the block on a token grid outside of training.
pub fn channel_moe(
    store: &ParamStore,
    params: &AttentionParams,
    grid: &TokenGrid,
    routing: &RoutingTable,
    mode: Aggregation,
) -> Result<(Tensor, Option<Tensor>)> {
    let mut s = Session::eval(store);
    let x = s.constant(grid.tokens.clone());
    let cls = grid.cls.clone().map(|c| s.constant(c));
    let out = channel_moe_graph(
        &mut s,
        params,
        x,
        cls,
        grid.num_patches,
        &grid.active_channels,
        routing,
        None,
        mode,
    )?;
    Ok((
        s.value(out.tokens).clone(),
        out.cls.map(|c| s.value(c).clone()),
    ))
}

fn vec_mat(v: &[f64], m: &Tensor) -> Vec<f64> {
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += v[r] * m.at(r, c);
        }
    }
    out
}

/// Reference transcription of the routing + cross-attention procedure with
/// explicit per-token loops: for each token and each selected channel, the
/// query attends over that channel's tokens head by head. No batching,
/// gathering or scattering; used to validate [`channel_moe`].
pub fn naive_oracle(
    store: &ParamStore,
    params: &AttentionParams,
    grid: &TokenGrid,
    routing: &RoutingTable,
    mode: Aggregation,
) -> Result<(Tensor, Option<Tensor>)> {
    let c = grid.channels();
    let n = grid.num_patches;
    let d = params.dim;
    check_heads(d, params.heads)?;
    if routing.num_tokens() != grid.num_tokens() || routing.num_experts() != c {
        return contract("routing does not match token grid");
    }
    let dh = d / params.heads;
    let w_q = store.get(params.w_q);
    let w_o = store.get(params.w_o);

    // attention of one query row over channel `k`'s tokens
    let attend = |h: &[f64], k: usize| -> Vec<f64> {
        let orig = grid.active_channels[k];
        let (wk, wv) = (store.get(params.w_k[orig]), store.get(params.w_v[orig]));
        let q = vec_mat(h, w_q);
        let keys: Vec<Vec<f64>> = (0..n).map(|i| vec_mat(grid.tokens.row(i * c + k), wk)).collect();
        let vals: Vec<Vec<f64>> = (0..n).map(|i| vec_mat(grid.tokens.row(i * c + k), wv)).collect();
        let mut o = vec![0.0; d];
        for head in 0..params.heads {
            let r = head * dh..(head + 1) * dh;
            let scores: Vec<f64> = keys
                .iter()
                .map(|key| {
                    q[r.clone()].iter().zip(&key[r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|x| (x - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for (i, val) in vals.iter().enumerate() {
                for col in r.clone() {
                    o[col] += e[i] / z * val[col];
                }
            }
        }
        o
    };

    let mut out = Vec::with_capacity(grid.num_tokens() * d);
    for t in 0..grid.num_tokens() {
        let set = &routing.expert_sets[t];
        if set.is_empty() {
            return contract(format!("token {t} has an empty expert set"));
        }
        let gate_sum: f64 = set.iter().map(|&k| routing.gates.at(t, k)).sum();
        let mut h_hat = vec![0.0; d];
        for &k in set {
            let w = match mode {
                Aggregation::GateWeighted => routing.gates.at(t, k),
                Aggregation::Uniform => 1.0 / routing.k as f64,
                Aggregation::Renormalized => routing.gates.at(t, k) / gate_sum,
            };
            let o = attend(grid.tokens.row(t), k);
            h_hat.iter_mut().zip(&o).for_each(|(a, b)| *a += w * b);
        }
        out.extend(vec_mat(&h_hat, w_o));
    }
    let tokens = Tensor::new(vec![grid.num_tokens(), d], out)?;

    let cls = grid.cls.as_ref().map(|cls| {
        let mut h_hat = vec![0.0; d];
        for k in 0..c {
            let o = attend(cls.data(), k);
            h_hat.iter_mut().zip(&o).for_each(|(a, b)| *a += b / c as f64);
        }
        Tensor::new(vec![1, d], vec_mat(&h_hat, w_o)).expect("1×D")
    });
    Ok((tokens, cls))
}

/// Single shared Q/K/V/O projection set for ordinary self-attention.
#[derive(Clone, Debug)]
pub struct DenseAttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
}

impl DenseAttentionParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        check_heads(dim, heads)?;
        let std = 1.0 / (dim as f64).sqrt();
        let mut proj = |name: &str| store.add(format!("{prefix}.{name}"), normal_tensor(rng, &[dim, dim], std));
        Ok(Self {
            w_q: proj("w_q"),
            w_k: proj("w_k"),
            w_v: proj("w_v"),
            w_o: proj("w_o"),
            heads,
        })
    }
}

/// Multi-head self-attention over all rows of `x`.
pub fn self_attention_graph(s: &mut Session, params: &DenseAttentionParams, x: Var) -> Result<Var> {
    let (wq, wk, wv, wo) = (s.p(params.w_q), s.p(params.w_k), s.p(params.w_v), s.p(params.w_o));
    let q = matmul_as(s, MacTerm::QProj, x, wq)?;
    let k = matmul_as(s, MacTerm::KvProj, x, wk)?;
    let v = matmul_as(s, MacTerm::KvProj, x, wv)?;
    let (o, _) = multi_head(s, q, k, v, params.heads)?;
    matmul_as(s, MacTerm::OProj, o, wo)
}

fn self_attention(store: &ParamStore, params: &DenseAttentionParams, x: &Tensor) -> Result<Tensor> {
    let mut s = Session::eval(store);
    let xv = s.constant(x.clone());
    let out = self_attention_graph(&mut s, params, xv)?;
    Ok(s.value(out).clone())
}

/// Channel-wise baseline: every one of the `N·C` tokens attends to all others.
pub fn dense_channelwise_attention(
    store: &ParamStore,
    params: &DenseAttentionParams,
    grid: &TokenGrid,
) -> Result<Tensor> {
    self_attention(store, params, &grid.tokens)
}

/// Plain ViT baseline over `N` tokens whose embedding consumed all channels
/// at once (see [`crate::tokenizer::patchify_concatenated`]).
pub fn vanilla_attention(
    store: &ParamStore,
    params: &DenseAttentionParams,
    tokens: &Tensor,
) -> Result<Tensor> {
    self_attention(store, params, tokens)
}
