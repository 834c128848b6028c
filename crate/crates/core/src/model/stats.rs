//! Routing statistics over a dataset.

use super::{Dataset, Model};
use crate::error::{config, Result};
use crate::router::{cv_squared, importance, load};

pub const ROUTE_STATS_HEADER: &str = "channel,importance,load,n_k";

/// Routing totals of one channel expert in one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStat {
    pub channel: usize,
    /// Summed pre-Top-K router probability over all tokens.
    pub importance: f64,
    /// Number of tokens whose Top-K set includes the channel.
    pub load: f64,
    /// Mean source-matrix rows per image, `load / images`.
    pub n_k: f64,
}

impl ChannelStat {
    pub fn to_csv(&self) -> String {
        format!("{},{:.6},{},{:.4}", self.channel, self.importance, self.load, self.n_k)
    }
}

/// Per-layer, per-channel routing totals with all channels active.
pub fn route_stats(model: &Model, data: &Dataset) -> Result<Vec<Vec<ChannelStat>>> {
    if data.is_empty() {
        return config("route statistics need a nonempty dataset");
    }
    let c = model.spec.channels;
    let mut imp = vec![vec![0.0; c]; model.spec.layers];
    let mut ld = vec![vec![0.0; c]; model.spec.layers];
    for start in (0..data.len()).step_by(32) {
        let ids: Vec<usize> = (start..(start + 32).min(data.len())).collect();
        let (images, _) = data.batch(&ids);
        for (l, probs) in model.router_probs(&images)?.iter().enumerate() {
            imp[l].iter_mut().zip(importance(probs)).for_each(|(a, b)| *a += b);
            ld[l].iter_mut().zip(load(probs, model.spec.top_k)).for_each(|(a, b)| *a += b);
        }
    }
    let images = data.len() as f64;
    Ok(imp
        .into_iter()
        .zip(ld)
        .map(|(imp, ld)| {
            (0..c)
                .map(|ch| ChannelStat {
                    channel: ch,
                    importance: imp[ch],
                    load: ld[ch],
                    n_k: ld[ch] / images,
                })
                .collect()
        })
        .collect())
}

/// Largest per-layer CV² of the load vector.
pub fn max_load_cv2(stats: &[Vec<ChannelStat>]) -> f64 {
    stats
        .iter()
        .map(|layer| cv_squared(&layer.iter().map(|s| s.load).collect::<Vec<_>>()))
        .fold(0.0, f64::max)
}
