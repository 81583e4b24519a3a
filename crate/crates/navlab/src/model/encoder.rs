//! Shared view encoder: five stride-2 conv stages (64x64 -> 2x2), spectral
//! normalization on stages 1-4, leaky ReLU activations, mean pooling over
//! the final 2x2 map to a per-view feature vector.

use ndarray::{Array4, Axis};
use rand_chacha::ChaCha8Rng;

use crate::nn::{Conv2d, ConvCache, Mat, LEAKY_SLOPE};

#[derive(Debug, Clone)]
pub struct Encoder {
    pub convs: Vec<Conv2d>,
    feature_dim: usize,
}

pub struct EncoderCache {
    conv_caches: Vec<ConvCache>,
    /// Pre-activations of every stage (kept for the ReLU backward).
    pre: Vec<Array4<f64>>,
    batch: usize,
}

impl Encoder {
    pub fn new(rng: &mut ChaCha8Rng, channels: &[usize; 5]) -> Encoder {
        let mut convs = Vec::with_capacity(5);
        let mut cin = 1;
        for (stage, &cout) in channels.iter().enumerate() {
            convs.push(Conv2d::new(rng, cin, cout, stage < 4));
            cin = cout;
        }
        Encoder {
            convs,
            feature_dim: channels[4],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Encode a stack of (n, 1, 64, 64) normalized depth images into
    /// (n, feature_dim) features.
    pub fn forward(&self, images: &Array4<f64>) -> (Mat, EncoderCache) {
        let batch = images.dim().0;
        let mut conv_caches = Vec::with_capacity(5);
        let mut pre = Vec::with_capacity(5);
        let mut x = images.clone();
        for conv in &self.convs {
            let (y, cache) = conv.forward(&x);
            conv_caches.push(cache);
            x = y.mapv(|v| if v >= 0.0 { v } else { LEAKY_SLOPE * v });
            pre.push(y);
        }
        // x: (n, feature_dim, 2, 2) -> mean pool over the spatial 2x2.
        let pooled = x
            .mean_axis(Axis(3))
            .unwrap()
            .mean_axis(Axis(2))
            .unwrap();
        (
            pooled,
            EncoderCache {
                conv_caches,
                pre,
                batch,
            },
        )
    }

    /// Backpropagate feature gradients (n, feature_dim) and accumulate
    /// parameter gradients.
    pub fn backward(&mut self, cache: &EncoderCache, dfeat: &Mat) {
        let n = cache.batch;
        // Undo the 2x2 mean pool.
        let mut dy = Array4::<f64>::zeros((n, self.feature_dim, 2, 2));
        for b in 0..n {
            for c in 0..self.feature_dim {
                let g = dfeat[(b, c)] / 4.0;
                for s in 0..2 {
                    for t in 0..2 {
                        dy[(b, c, s, t)] = g;
                    }
                }
            }
        }
        let mut dy = dy;
        for stage in (0..5).rev() {
            // Through the activation of this stage.
            let pre = &cache.pre[stage];
            let mut dpre = dy;
            dpre.zip_mut_with(pre, |d, &p| {
                if p < 0.0 {
                    *d *= LEAKY_SLOPE;
                }
            });
            dy = self.convs[stage].backward(&cache.conv_caches[stage], &dpre);
        }
    }

    pub fn zero_grad(&mut self) {
        for c in &mut self.convs {
            c.zero_grad();
        }
    }

    pub fn power_iterate(&mut self) {
        for c in &mut self.convs {
            c.power_iterate();
        }
    }
}
