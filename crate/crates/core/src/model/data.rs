//! Synthetic channel-dependent classification task.
//!
//! Every pixel of every channel carries Gaussian background noise. Each class
//! owns a fixed random ±1 spatial pattern on each of its signature channels,
//! added with a fixed amplitude. Channels outside the signatures are pure
//! noise, so only a model that reads the right channels can classify.

use rand::seq::SliceRandom;

use crate::error::{config, Result};
use crate::rng::{normal, stream, substream, Rng, STREAM_DATA, STREAM_TASK};
use crate::tokenizer::MultiChannelImage;

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Channels carrying class signal; shared by every class signature.
    pub signal_channels: Vec<usize>,
    pub amplitude: f64,
    pub noise: f64,
    /// `patterns[class][s]` is the ±1 pattern on `signal_channels[s]`.
    patterns: Vec<Vec<Vec<f64>>>,
}

impl SyntheticTask {
    pub fn new(
        seed: u64,
        height: usize,
        width: usize,
        channels: usize,
        num_classes: usize,
        signal_channels: Vec<usize>,
    ) -> Result<Self> {
        if num_classes == 0 || height == 0 || width == 0 {
            return config("synthetic task needs classes and pixels");
        }
        if signal_channels.is_empty() || signal_channels.iter().any(|&c| c >= channels) {
            return config(format!(
                "signal channels {signal_channels:?} must be a nonempty subset of 0..{channels}"
            ));
        }
        let mut rng = stream(seed, STREAM_TASK);
        let pixels = height * width;
        let patterns = (0..num_classes)
            .map(|_| {
                signal_channels
                    .iter()
                    .map(|_| {
                        (0..pixels)
                            .map(|_| if rand::Rng::gen_bool(&mut rng, 0.5) { 1.0 } else { -1.0 })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            seed,
            height,
            width,
            channels,
            num_classes,
            signal_channels,
            amplitude: 1.0,
            noise: 1.0,
            patterns,
        })
    }

    /// Channels carrying the pattern of `class`.
    pub fn signature(&self, class: usize) -> &[usize] {
        debug_assert!(class < self.num_classes);
        &self.signal_channels
    }

    /// `count` labelled images. Labels cycle through the classes and are
    /// shuffled, so per-class counts differ by at most one.
    pub fn generate(&self, count: usize, split_seed: u64) -> Dataset {
        self.sample(count, &mut substream(self.seed, STREAM_DATA, split_seed))
    }

    /// Like [`generate`](Self::generate) with an explicit generator.
    pub fn sample(&self, count: usize, rng: &mut Rng) -> Dataset {
        let mut labels: Vec<usize> = (0..count).map(|i| i % self.num_classes).collect();
        labels.shuffle(rng);
        let images = labels
            .iter()
            .map(|&y| {
                let mut img = MultiChannelImage::zeros(self.height, self.width, self.channels);
                img.pixels.iter_mut().for_each(|p| *p = self.noise * normal(rng));
                for (s, &c) in self.signal_channels.iter().enumerate() {
                    let pat = &self.patterns[y][s];
                    img.channel_mut(c).iter_mut().zip(pat).for_each(|(p, v)| *p += self.amplitude * v);
                }
                img
            })
            .collect();
        Dataset { images, labels }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<MultiChannelImage>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, ids: &[usize]) -> (Vec<&MultiChannelImage>, Vec<usize>) {
        (
            ids.iter().map(|&i| &self.images[i]).collect(),
            ids.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Nearest-class-mean probe on the given channels: class means are fitted on
/// `train`, and `test` images are assigned to the mean with the largest
/// `⟨x, μ⟩ − ‖μ‖²/2` score (a linear classifier). Returns test accuracy.
pub fn linear_probe_accuracy(
    train: &Dataset,
    test: &Dataset,
    channels: &[usize],
    num_classes: usize,
) -> f64 {
    let features = |img: &MultiChannelImage| -> Vec<f64> {
        channels.iter().flat_map(|&c| img.channel(c).iter().copied()).collect()
    };
    let dim = features(&train.images[0]).len();
    let mut means = vec![vec![0.0; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (img, &y) in train.images.iter().zip(&train.labels) {
        means[y].iter_mut().zip(features(img)).for_each(|(m, v)| *m += v);
        counts[y] += 1;
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let correct = test
        .images
        .iter()
        .zip(&test.labels)
        .filter(|(img, &y)| {
            let f = features(img);
            let scores: Vec<f64> = means
                .iter()
                .map(|m| {
                    let dot: f64 = m.iter().zip(&f).map(|(a, b)| a * b).sum();
                    dot - 0.5 * m.iter().map(|a| a * a).sum::<f64>()
                })
                .collect();
            super::train::argmax(&scores) == y
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}
