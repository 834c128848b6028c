//! The MoE-ViT encoder: per-channel embedding, `L` pre-norm blocks of
//! channel-MoE attention plus MLP, and a linear head on the final CLS row.
//!
//! A batch is laid out as one graph: the first `B` rows are the CLS rows,
//! followed by each image's `N·C` patch tokens in flat-id order. Routing is
//! computed per layer on the normalized patch rows and applied image by image.

mod checkpoint;
mod config;
mod data;
mod stats;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{RunConfig, KEYS as CONFIG_KEYS};
pub use stats::{max_load_cv2, route_stats, ChannelStat, ROUTE_STATS_HEADER};
pub use data::{linear_probe_accuracy, Dataset, SyntheticTask};
pub use train::{
    accuracy, argmax, evaluate, metrics, router_mass, run, train, train_step, AdamW, MetricRow,
    StepLoss, TrainConfig, TrainState, METRICS_HEADER,
};

use crate::attention::{channel_moe_graph, Aggregation, AttentionParams};
use crate::error::{config, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::{normal_tensor, stream, Rng, STREAM_INIT};
use crate::router::{self, balance_loss_graph, router_probs, BalanceWeights, RouterParams, RoutingTable};
use crate::tensor::{Tensor, Var};
use crate::tokenizer::{embed_graph, patch_count, patchify_channels, EmbeddingParams, MultiChannelImage};

const LN_EPS: f64 = 1e-5;
const MLP_RATIO: usize = 4;

/// Architectural scalars of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub top_k: usize,
    pub num_classes: usize,
    pub aggregation: Aggregation,
    pub hcs: bool,
}

impl Default for ModelSpec {
    /// Desk-scale default: 32×32 images, 8×8 patches (N=16), 8 channels.
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            patch: 8,
            channels: 8,
            dim: 64,
            heads: 4,
            layers: 2,
            top_k: 2,
            num_classes: 4,
            aggregation: Aggregation::GateWeighted,
            hcs: false,
        }
    }
}

impl ModelSpec {
    /// The smallest configuration used for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            height: 8,
            width: 8,
            patch: 4,
            channels: 3,
            dim: 8,
            heads: 2,
            layers: 1,
            top_k: 2,
            num_classes: 3,
            aggregation: Aggregation::GateWeighted,
            hcs: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        patch_count(self.height, self.width, self.patch)?;
        if self.channels == 0 || self.dim == 0 || self.num_classes == 0 {
            return config("channels, dim and num_classes must be positive");
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return config(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.top_k == 0 || self.top_k > self.channels {
            return config(format!("top_k {} out of range 1..={}", self.top_k, self.channels));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[dim])),
        }
    }

    fn apply(&self, s: &mut Session, x: Var) -> Result<Var> {
        let z = s.g.layer_norm(x, LN_EPS)?;
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        let z = s.g.mul(z, g)?;
        s.g.add(z, b)
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub norm1: LayerNormParams,
    pub router: RouterParams,
    pub attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

/// Parameter ids of every model component; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Layout {
    pub embed: EmbeddingParams,
    pub blocks: Vec<BlockParams>,
    pub norm: LayerNormParams,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl Layout {
    fn init(spec: &ModelSpec, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let d = spec.dim;
        let embed = EmbeddingParams::init(store, rng, spec.patch, spec.num_patches(), spec.channels, d);
        let mut blocks = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let p = format!("block{l}");
            let hidden = MLP_RATIO * d;
            blocks.push(BlockParams {
                norm1: LayerNormParams::init(store, &format!("{p}.norm1"), d),
                router: RouterParams::init(store, rng, &format!("{p}.router"), d, spec.channels),
                attn: AttentionParams::init(store, rng, &format!("{p}.attn"), d, spec.channels, spec.heads)?,
                norm2: LayerNormParams::init(store, &format!("{p}.norm2"), d),
                mlp_w1: store.add(format!("{p}.mlp.w1"), normal_tensor(rng, &[d, hidden], 1.0 / (d as f64).sqrt())),
                mlp_b1: store.add(format!("{p}.mlp.b1"), Tensor::zeros(&[hidden])),
                mlp_w2: store.add(
                    format!("{p}.mlp.w2"),
                    normal_tensor(rng, &[hidden, d], 1.0 / (hidden as f64).sqrt()),
                ),
                mlp_b2: store.add(format!("{p}.mlp.b2"), Tensor::zeros(&[d])),
            });
        }
        Ok(Self {
            embed,
            blocks,
            norm: LayerNormParams::init(store, "norm", d),
            head_w: store.add("head.w", normal_tensor(rng, &[d, spec.num_classes], 0.02)),
            head_b: store.add("head.b", Tensor::zeros(&[spec.num_classes])),
        })
    }
}

/// Routing observed in one layer of a forward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Router probabilities for all patch rows of the batch, `[B·N·C × C]`.
    pub probs: Var,
    /// One table per image.
    pub routing: Vec<RoutingTable>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Balance loss averaged over layers (a zero constant when `L = 0`).
    pub balance: Var,
    pub layers: Vec<LayerTrace>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub layout: Layout,
    pub store: ParamStore,
}

impl Model {
    /// Fresh model with parameters drawn from the init stream of `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let layout = Layout::init(&spec, &mut store, &mut stream(seed, STREAM_INIT))?;
        Ok(Self { spec, layout, store })
    }

    /// Patch rows for a batch, image after image, restricted to `active`.
    pub fn patch_rows(&self, images: &[&MultiChannelImage], active: &[usize]) -> Result<Tensor> {
        let sp = &self.spec;
        let p2 = sp.patch * sp.patch;
        let mut data = Vec::with_capacity(images.len() * sp.num_patches() * active.len() * p2);
        for img in images {
            if (img.height, img.width, img.channels) != (sp.height, sp.width, sp.channels) {
                return config(format!(
                    "image is {}x{}x{} but the model expects {}x{}x{}",
                    img.channels, img.height, img.width, sp.channels, sp.height, sp.width
                ));
            }
            data.extend_from_slice(patchify_channels(img, sp.patch, active)?.data());
        }
        if images.is_empty() {
            return config("empty batch");
        }
        Tensor::new(vec![data.len() / p2, p2], data)
    }

    /// Records the forward pass for a batch on `s`.
    pub fn forward_graph(
        &self,
        s: &mut Session,
        images: &[&MultiChannelImage],
        active: &[usize],
        balance: BalanceWeights,
    ) -> Result<Forward> {
        let sp = &self.spec;
        let (b, n, c) = (images.len(), sp.num_patches(), active.len());
        if c == 0 {
            return config("no active channels");
        }
        // a channel subset smaller than k routes every token to all of it
        let k = sp.top_k.min(c);
        let patches = self.patch_rows(images, active)?;
        let patches = s.constant(patches);
        let e = embed_graph(s, &self.layout.embed, patches, b, active)?;
        let mut x = s.g.concat_rows(&[e.cls, e.tokens])?;

        let per_image = n * c;
        let patch_ids: Vec<usize> = (b..b + b * per_image).collect();
        let mut layers = Vec::with_capacity(sp.layers);
        let mut balance_terms = Vec::with_capacity(sp.layers);
        for blk in &self.layout.blocks {
            let xn = blk.norm1.apply(s, x)?;
            let xp = s.g.index_select(xn, &patch_ids)?;
            let probs = router_probs(s, &blk.router, xp, active)?;

            let mut cls_out = Vec::with_capacity(b);
            let mut tok_out = Vec::with_capacity(b);
            let mut tables = Vec::with_capacity(b);
            for img in 0..b {
                let rows: Vec<usize> = (img * per_image..(img + 1) * per_image).collect();
                let probs_i = s.g.index_select(probs, &rows)?;
                let table = RoutingTable::from_probs(s.value(probs_i).clone(), k)?;
                let toks = s.g.index_select(xp, &rows)?;
                let cls = s.g.index_select(xn, &[img])?;
                let out = channel_moe_graph(
                    s,
                    &blk.attn,
                    toks,
                    Some(cls),
                    n,
                    active,
                    &table,
                    Some(probs_i),
                    sp.aggregation,
                )?;
                cls_out.push(out.cls.expect("CLS row requested"));
                tok_out.push(out.tokens);
                tables.push(table);
            }
            cls_out.extend(tok_out);
            let attn = s.g.concat_rows(&cls_out)?;
            x = s.g.add(x, attn)?;

            let load = router::load(s.value(probs), k);
            balance_terms.push(balance_loss_graph(s, probs, &load, balance)?);
            layers.push(LayerTrace {
                probs,
                routing: tables,
            });

            let xn = blk.norm2.apply(s, x)?;
            let (w1, b1, w2, b2) = (s.p(blk.mlp_w1), s.p(blk.mlp_b1), s.p(blk.mlp_w2), s.p(blk.mlp_b2));
            let h = s.g.matmul(xn, w1)?;
            let h = s.g.add(h, b1)?;
            let h = s.g.gelu(h);
            let h = s.g.matmul(h, w2)?;
            let h = s.g.add(h, b2)?;
            x = s.g.add(x, h)?;
        }

        let cls_ids: Vec<usize> = (0..b).collect();
        let cls = s.g.index_select(x, &cls_ids)?;
        let cls = self.layout.norm.apply(s, cls)?;
        let (hw, hb) = (s.p(self.layout.head_w), s.p(self.layout.head_b));
        let logits = s.g.matmul(cls, hw)?;
        let logits = s.g.add(logits, hb)?;

        let balance = match balance_terms.len() {
            0 => s.constant(Tensor::scalar(0.0)),
            l => {
                let mut acc = balance_terms[0];
                for &t in &balance_terms[1..] {
                    acc = s.g.add(acc, t)?;
                }
                s.g.scale(acc, 1.0 / l as f64)
            }
        };
        Ok(Forward {
            logits,
            balance,
            layers,
        })
    }

    /// Logits for a batch using all channels.
    pub fn forward(&self, images: &[&MultiChannelImage]) -> Result<Tensor> {
        let active: Vec<usize> = (0..self.spec.channels).collect();
        let mut s = Session::eval(&self.store);
        let f = self.forward_graph(&mut s, images, &active, BalanceWeights::default())?;
        Ok(s.value(f.logits).clone())
    }

    /// Per-layer router probabilities `[B·N·C × C]` for a batch (all channels).
    pub fn router_probs(&self, images: &[&MultiChannelImage]) -> Result<Vec<Tensor>> {
        let active: Vec<usize> = (0..self.spec.channels).collect();
        let mut s = Session::eval(&self.store);
        let f = self.forward_graph(&mut s, images, &active, BalanceWeights::default())?;
        Ok(f.layers.iter().map(|l| s.value(l.probs).clone()).collect())
    }
}
