//! Per-channel patch tokenization.
//!
//! Every channel of a `C×H×W` image is cut into `N = HW/P²` non-overlapping
//! `P×P` patches. Token `(i, j)` (spatial position `i`, channel slot `j`) is
//! stored at flat row `i·C + j`, where `C` is the number of *active* channels
//! and `j` indexes into the active-channel list. Each token is
//! `FFN(patch·W_e + pos[i] + chan[c])` with `c` the original channel id.

use rand::seq::index::sample;
use rand::Rng as _;

use crate::error::{config, Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::{normal_tensor, Rng};
use crate::tensor::{Tensor, Var};

/// Pixels in channel-major `C×H×W` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl MultiChannelImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return config(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            ));
        }
        if pixels.len() != channels * height * width {
            return Err(Error::Shape {
                op: "MultiChannelImage::new",
                lhs: vec![channels, height, width],
                rhs: vec![pixels.len()],
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![0.0; channels * height * width],
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.pixels[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.height * self.width;
        &mut self.pixels[c * plane..(c + 1) * plane]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.pixels.clone(),
        )
        .expect("validated dimensions")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[c, h, w] => Self::new(h, w, c, t.data().to_vec()),
            other => Err(Error::Format(format!(
                "image tensor must be C×H×W, got {other:?}"
            ))),
        }
    }
}

/// Number of spatial patches, or a config error if `p` does not tile the image.
pub fn patch_count(height: usize, width: usize, p: usize) -> Result<usize> {
    if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
        return config(format!(
            "patch size {p} does not divide image size {height}x{width}"
        ));
    }
    Ok((height / p) * (width / p))
}

/// Patch rows for all channels: `[(N·C) × P²]`.
pub fn patchify(img: &MultiChannelImage, p: usize) -> Result<Tensor> {
    let all: Vec<usize> = (0..img.channels).collect();
    patchify_channels(img, p, &all)
}

/// Patch rows for a subset of channels: row `i·|active| + j` is the raster-order
/// `P×P` block of channel `active[j]` at spatial position `i`.
pub fn patchify_channels(img: &MultiChannelImage, p: usize, active: &[usize]) -> Result<Tensor> {
    let n = patch_count(img.height, img.width, p)?;
    if active.is_empty() {
        return config("no active channels");
    }
    if let Some(&c) = active.iter().find(|&&c| c >= img.channels) {
        return config(format!("channel {c} out of range for {} channels", img.channels));
    }
    let per_row = img.width / p;
    let mut data = Vec::with_capacity(n * active.len() * p * p);
    for i in 0..n {
        let (py, px) = (i / per_row, i % per_row);
        for &c in active {
            let plane = img.channel(c);
            for dy in 0..p {
                let start = (py * p + dy) * img.width + px * p;
                data.extend_from_slice(&plane[start..start + p]);
            }
        }
    }
    Tensor::new(vec![n * active.len(), p * p], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Tensor,
    height: usize,
    width: usize,
    channels: usize,
    p: usize,
) -> Result<MultiChannelImage> {
    let n = patch_count(height, width, p)?;
    if patches.shape() != [n * channels, p * p] {
        return Err(Error::Shape {
            op: "unpatchify",
            lhs: patches.shape().to_vec(),
            rhs: vec![n * channels, p * p],
        });
    }
    let mut img = MultiChannelImage::zeros(height, width, channels);
    let per_row = width / p;
    for i in 0..n {
        let (py, px) = (i / per_row, i % per_row);
        for c in 0..channels {
            let row = patches.row(i * channels + c);
            let plane = img.channel_mut(c);
            for dy in 0..p {
                let start = (py * p + dy) * width + px * p;
                plane[start..start + p].copy_from_slice(&row[dy * p..(dy + 1) * p]);
            }
        }
    }
    Ok(img)
}

/// Patches with all channels concatenated per position: `[N × (P²·C)]`.
/// This is the input layout of a plain ViT.
pub fn patchify_concatenated(img: &MultiChannelImage, p: usize) -> Result<Tensor> {
    let per_channel = patchify(img, p)?;
    let n = per_channel.rows() / img.channels;
    Tensor::new(vec![n, p * p * img.channels], per_channel.into_data())
}

/// Embedding weights. `chan` is indexed by original channel id so a channel
/// keeps its identity under channel subsampling.
#[derive(Clone, Debug)]
pub struct EmbeddingParams {
    pub patch_proj: ParamId,
    pub pos: ParamId,
    pub chan: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub cls: ParamId,
    pub num_patches: usize,
    pub max_channels: usize,
    pub dim: usize,
}

impl EmbeddingParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        patch_size: usize,
        num_patches: usize,
        max_channels: usize,
        dim: usize,
    ) -> Self {
        let p2 = patch_size * patch_size;
        let ffn_std = 1.0 / (dim as f64).sqrt();
        Self {
            patch_proj: store.add(
                "embed.patch_proj",
                normal_tensor(rng, &[p2, dim], 1.0 / (p2 as f64).sqrt()),
            ),
            pos: store.add("embed.pos", normal_tensor(rng, &[num_patches, dim], 0.02)),
            chan: store.add("embed.chan", normal_tensor(rng, &[max_channels, dim], 0.02)),
            ffn_w1: store.add("embed.ffn.w1", normal_tensor(rng, &[dim, dim], ffn_std)),
            ffn_b1: store.add("embed.ffn.b1", Tensor::zeros(&[dim])),
            ffn_w2: store.add("embed.ffn.w2", normal_tensor(rng, &[dim, dim], ffn_std)),
            ffn_b2: store.add("embed.ffn.b2", Tensor::zeros(&[dim])),
            cls: store.add("embed.cls", normal_tensor(rng, &[1, dim], 0.02)),
            num_patches,
            max_channels,
            dim,
        }
    }
}

/// Graph nodes produced by [`embed_graph`].
#[derive(Clone, Copy, Debug)]
pub struct Embedded {
    /// `patch·W_e + pos + chan`, before the FFN.
    pub pre_ffn: Var,
    pub tokens: Var,
    /// One CLS row per image.
    pub cls: Var,
}

/// Embeds `batch` images worth of patch rows laid out image after image,
/// each image contributing `N·|active|` rows in flat-id order.
pub fn embed_graph(
    s: &mut Session,
    params: &EmbeddingParams,
    patches: Var,
    batch: usize,
    active: &[usize],
) -> Result<Embedded> {
    let n = params.num_patches;
    let c = active.len();
    if let Some(&bad) = active.iter().find(|&&ch| ch >= params.max_channels) {
        return config(format!(
            "channel id {bad} exceeds embedding table size {}",
            params.max_channels
        ));
    }
    let rows = s.value(patches).rows();
    if rows != batch * n * c {
        return Err(Error::Shape {
            op: "embed",
            lhs: s.value(patches).shape().to_vec(),
            rhs: vec![batch * n * c],
        });
    }
    let pos_idx: Vec<usize> = (0..rows).map(|r| (r % (n * c)) / c).collect();
    let chan_idx: Vec<usize> = (0..rows).map(|r| active[r % c]).collect();

    let w_e = s.p(params.patch_proj);
    let proj = s.g.matmul(patches, w_e)?;
    let pos_table = s.p(params.pos);
    let pos = s.g.index_select(pos_table, &pos_idx)?;
    let chan_table = s.p(params.chan);
    let chan = s.g.index_select(chan_table, &chan_idx)?;
    let x = s.g.add(proj, pos)?;
    let pre_ffn = s.g.add(x, chan)?;

    let (w1, b1, w2, b2) = (
        s.p(params.ffn_w1),
        s.p(params.ffn_b1),
        s.p(params.ffn_w2),
        s.p(params.ffn_b2),
    );
    let h = s.g.matmul(pre_ffn, w1)?;
    let h = s.g.add(h, b1)?;
    let h = s.g.gelu(h);
    let h = s.g.matmul(h, w2)?;
    let tokens = s.g.add(h, b2)?;

    let seed = s.p(params.cls);
    let cls = s.g.index_select(seed, &vec![0; batch])?;
    Ok(Embedded {
        pre_ffn,
        tokens,
        cls,
    })
}

/// Embedded tokens of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub num_patches: usize,
    pub dim: usize,
    pub active_channels: Vec<usize>,
    /// `[(N·C) × D]`, row `i·C + j`.
    pub tokens: Tensor,
    pub cls: Option<Tensor>,
}

impl TokenGrid {
    pub fn new(
        num_patches: usize,
        active_channels: Vec<usize>,
        tokens: Tensor,
        cls: Option<Tensor>,
    ) -> Result<Self> {
        let c = active_channels.len();
        if tokens.rank() != 2 || tokens.rows() != num_patches * c {
            return Err(Error::Shape {
                op: "TokenGrid::new",
                lhs: tokens.shape().to_vec(),
                rhs: vec![num_patches * c],
            });
        }
        let dim = tokens.cols();
        if let Some(cls) = &cls {
            if cls.shape() != [1, dim] {
                return Err(Error::Shape {
                    op: "TokenGrid::new",
                    lhs: cls.shape().to_vec(),
                    rhs: vec![1, dim],
                });
            }
        }
        Ok(Self {
            num_patches,
            dim,
            active_channels,
            tokens,
            cls,
        })
    }

    pub fn channels(&self) -> usize {
        self.active_channels.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches * self.channels()
    }

    pub fn flat_id(&self, i: usize, j: usize) -> usize {
        i * self.channels() + j
    }

    /// `(spatial position, channel slot)` of a flat id.
    pub fn position(&self, id: usize) -> (usize, usize) {
        (id / self.channels(), id % self.channels())
    }
}

/// Embeds a single image's patch rows outside of any training graph.
pub fn embed(
    store: &ParamStore,
    params: &EmbeddingParams,
    patches: &Tensor,
    active: &[usize],
) -> Result<TokenGrid> {
    let mut s = Session::eval(store);
    let x = s.constant(patches.clone());
    let e = embed_graph(&mut s, params, x, 1, active)?;
    TokenGrid::new(
        params.num_patches,
        active.to_vec(),
        s.value(e.tokens).clone(),
        Some(s.value(e.cls).clone()),
    )
}

/// Two-stage uniform channel subsampling: draw `m ~ U{1..C}`, then a uniform
/// `m`-subset without replacement. Returned ids are ascending.
pub fn hcs_sample(channels: usize, rng: &mut Rng) -> Vec<usize> {
    assert!(channels >= 1);
    let m = rng.gen_range(1..=channels);
    let mut picked = sample(rng, channels, m).into_vec();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, c: usize) -> MultiChannelImage {
        MultiChannelImage::new(h, w, c, (0..h * w * c).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn single_patch_is_raster_order() {
        let img = ramp(4, 4, 1);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[1, 16]);
        assert_eq!(p.data(), img.pixels.as_slice());
    }

    #[test]
    fn preset_geometries() {
        let p = patchify(&MultiChannelImage::zeros(224, 224, 8), 16).unwrap();
        assert_eq!(p.shape(), &[1568, 256]);
        assert_eq!(patch_count(224, 224, 16).unwrap(), 196);
        let p = patchify(&MultiChannelImage::zeros(32, 32, 18), 8).unwrap();
        assert_eq!(p.shape(), &[288, 64]);
        assert_eq!(patch_count(32, 32, 8).unwrap(), 16);
    }

    #[test]
    fn indivisible_patch_is_config_error() {
        let img = MultiChannelImage::zeros(6, 8, 1);
        assert!(matches!(patchify(&img, 4), Err(Error::Config(_))));
    }

    #[test]
    fn row_layout_is_position_major() {
        // 4x4, P=2, 2 channels: row i*2 + j is channel j at position i
        let img = ramp(4, 4, 2);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.row(0), &[0., 1., 4., 5.]);
        assert_eq!(p.row(1), &[16., 17., 20., 21.]);
        assert_eq!(p.row(2), &[2., 3., 6., 7.]);
    }

    proptest! {
        #[test]
        fn unpatchify_inverts_patchify(py in 1usize..4, px in 1usize..4, p in 1usize..4, c in 1usize..4, seed in any::<u64>()) {
            let (h, w) = (py * p, px * p);
            let img = MultiChannelImage::new(h, w, c, normal_tensor(&mut stream(seed, 0), &[c * h * w], 1.0).into_data()).unwrap();
            let back = unpatchify(&patchify(&img, p).unwrap(), h, w, c, p).unwrap();
            prop_assert_eq!(back, img);
        }
    }

    fn params(d: usize, p: usize, n: usize, cmax: usize) -> (ParamStore, EmbeddingParams) {
        let mut store = ParamStore::new();
        let e = EmbeddingParams::init(&mut store, &mut stream(3, 1), p, n, cmax, d);
        (store, e)
    }

    #[test]
    fn zero_image_gives_identical_tokens() {
        let (mut store, e) = params(4, 2, 4, 3);
        store.set("embed.pos", Tensor::zeros(&[4, 4])).unwrap();
        store.set("embed.chan", Tensor::zeros(&[3, 4])).unwrap();
        store.set("embed.ffn.w1", Tensor::identity(4)).unwrap();
        store.set("embed.ffn.w2", Tensor::identity(4)).unwrap();
        let b2 = Tensor::vector(vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        store.set("embed.ffn.b2", b2.clone()).unwrap();
        let img = MultiChannelImage::zeros(4, 4, 3);
        let grid = embed(&store, &e, &patchify(&img, 2).unwrap(), &[0, 1, 2]).unwrap();
        assert_eq!(grid.num_tokens(), 12);
        for r in 0..12 {
            assert_eq!(grid.tokens.row(r), b2.data());
        }
    }

    fn pre_ffn(store: &ParamStore, e: &EmbeddingParams, img: &MultiChannelImage, active: &[usize]) -> Tensor {
        let mut s = Session::eval(store);
        let x = s.constant(patchify_channels(img, 2, active).unwrap());
        let out = embed_graph(&mut s, e, x, 1, active).unwrap();
        s.value(out.pre_ffn).clone()
    }

    #[test]
    fn position_embedding_enters_linearly() {
        let (store, e) = params(4, 2, 4, 1);
        // every patch identical
        let img = MultiChannelImage::new(4, 4, 1, vec![0.7; 16]).unwrap();
        let pre = pre_ffn(&store, &e, &img, &[0]);
        let pos = store.get(e.pos);
        for d in 0..4 {
            let got = pre.at(0, d) - pre.at(3, d);
            let want = pos.at(0, d) - pos.at(3, d);
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn permuting_active_channels_permutes_rows() {
        let (store, e) = params(5, 2, 1, 3);
        let img = MultiChannelImage::new(2, 2, 3, normal_tensor(&mut stream(8, 0), &[12], 1.0).into_data()).unwrap();
        let a = pre_ffn(&store, &e, &img, &[0, 1, 2]);
        let perm = [2, 0, 1];
        let b = pre_ffn(&store, &e, &img, &perm);
        for (j, &orig) in perm.iter().enumerate() {
            assert_eq!(b.row(j), a.row(orig));
        }
    }

    #[test]
    fn channel_identity_is_stable_under_subsetting() {
        let (store, e) = params(4, 2, 4, 8);
        let img = MultiChannelImage::new(4, 4, 8, normal_tensor(&mut stream(9, 0), &[128], 1.0).into_data()).unwrap();
        let full: Vec<usize> = (0..8).collect();
        let a = pre_ffn(&store, &e, &img, &full);
        let b = pre_ffn(&store, &e, &img, &[2, 5]);
        for i in 0..4 {
            assert_eq!(b.row(i * 2 + 1), a.row(i * 8 + 5));
        }
    }

    #[test]
    fn unknown_channel_id_is_config_error() {
        let (store, e) = params(4, 2, 1, 2);
        let mut s = Session::eval(&store);
        let x = s.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            embed_graph(&mut s, &e, x, 1, &[2]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hcs_single_channel_and_determinism() {
        let mut rng = stream(1, 4);
        for _ in 0..10 {
            assert_eq!(hcs_sample(1, &mut rng), vec![0]);
        }
        let a = hcs_sample(8, &mut stream(42, 4));
        let b = hcs_sample(8, &mut stream(42, 4));
        assert_eq!(a, b);
    }

    #[test]
    fn hcs_inclusion_probability_matches_two_stage_oracle() {
        // each channel is included with probability E[m]/C = (C+1)/(2C)
        let c = 8;
        let draws = 10_000;
        let mut counts = [0usize; 8];
        let mut rng = stream(2024, 4);
        for _ in 0..draws {
            for ch in hcs_sample(c, &mut rng) {
                counts[ch] += 1;
            }
        }
        let expected = (c as f64 + 1.0) / (2.0 * c as f64);
        for &k in &counts {
            let freq = k as f64 / draws as f64;
            assert!((freq - expected).abs() / expected < 0.02, "freq {freq} vs {expected}");
        }
    }
}
