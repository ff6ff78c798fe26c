//! Frozen convolutional feature extractor for perceptual distances.
//!
//! VGG16-style layout: five conv blocks of (2, 2, 3, 3, 3) 3x3 convs with
//! ReLU, 2x mean-pooling between blocks, feature taps after each block.
//! Channel widths scale from `base_width` in the 1:2:4:8:8 pattern, so
//! `base_width = 64` reproduces the full-size extractor while the desk
//! default of 8 keeps slice sweeps cheap.
//!
//! Weights are either loaded from a checkpoint or drawn from a seeded
//! distribution, so every run (and CI) is reproducible offline with no
//! downloaded weights. The network is always frozen: it only ever enters
//! graphs as constants, and gradients flow through it, never into it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::nn::{Conv2dLayer, Ctx, ParamStore};
use crate::rng::SeedRng;
use crate::tensor::{Scalar, Tensor};
use crate::{checkpoint, Error, Result};

/// Convs per block and the width multiplier per block.
const BLOCKS: [usize; 5] = [2, 2, 3, 3, 3];
const WIDTH_MUL: [usize; 5] = [1, 2, 4, 8, 8];

/// Variance-preserving (He) initialization gain.
const INIT_GAIN: f64 = 1.0;

/// Inputs are normalized [-1, 1] slices; the extractor consumes them on
/// the 8-bit display scale, the input convention of the pretrained
/// networks this stands in for. With zero biases the stack is positively
/// homogeneous, so this fixes the absolute magnitude of raw feature
/// distances (a few orders above voxel-scale MSE, the balance the
/// default loss weights assume) without touching the normalized
/// perceptual *metric*, which is scale-invariant.
const INPUT_SCALE: f64 = 127.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub base_width: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            base_width: 8,
            seed: 0x76_67_67,
        }
    }
}

pub struct PerceptualBackbone<T: Scalar> {
    pub cfg: BackboneConfig,
    store: ParamStore<T>,
    convs: Vec<Conv2dLayer>,
}

impl<T: Scalar> PerceptualBackbone<T> {
    /// Seeded random-weight extractor with the standard topology.
    pub fn seeded(cfg: BackboneConfig) -> Result<Self> {
        if cfg.base_width == 0 {
            return Err(Error::Config("backbone base_width must be positive".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = SeedRng::new(cfg.seed).split(0x62_62);
        let mut convs = Vec::new();
        let mut cin = 3;
        for (b, (&n_convs, &mul)) in BLOCKS.iter().zip(&WIDTH_MUL).enumerate() {
            let cout = cfg.base_width * mul;
            for c in 0..n_convs {
                let std = INIT_GAIN * (2.0 / (cin * 9) as f64).sqrt();
                let name = format!("block{b}.conv{c}");
                let w = store.add(
                    format!("{name}.w"),
                    Tensor::rand_normal(&[cout, cin, 3, 3], 0.0, std, &mut rng),
                );
                let bias = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
                convs.push(Conv2dLayer {
                    w,
                    b: bias,
                    stride: 1,
                    pad: 1,
                });
                cin = cout;
            }
        }
        Ok(PerceptualBackbone { cfg, store, convs })
    }

    /// Load extractor weights from a checkpoint archive (e.g. converted
    /// pretrained weights). Tensor names must match the seeded layout.
    pub fn from_checkpoint(path: &Path) -> Result<PerceptualBackbone<f32>> {
        let (meta, tensors) = checkpoint::load(path)?;
        let cfg: BackboneConfig = serde_json::from_value(
            meta.get("backbone")
                .cloned()
                .ok_or_else(|| Error::corrupt(path, "missing backbone config in meta"))?,
        )?;
        let mut bb = PerceptualBackbone::<f32>::seeded(cfg)?;
        bb.store.load_values(&tensors)?;
        Ok(bb)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()>
    where
        T: Scalar,
    {
        let f32_store = self.store.to_f32_store();
        let tensors: Vec<(String, &Tensor<f32>)> =
            f32_store.iter().map(|(n, t)| (n.to_string(), t)).collect();
        let meta = serde_json::json!({ "backbone": self.cfg });
        checkpoint::save(path, &meta, &tensors)
    }

    /// Widths of the five tap feature maps.
    pub fn tap_channels(&self) -> Vec<usize> {
        WIDTH_MUL.iter().map(|m| m * self.cfg.base_width).collect()
    }

    /// Build the tap features of `x` (N, 1, H, W) in `graph`. The single
    /// input channel is replicated to the 3-channel input layer. Always
    /// frozen.
    pub fn features_graph(&self, graph: &mut Graph<T>, x: Var) -> Vec<Var> {
        let shape = graph.shape(x).to_vec();
        assert_eq!(shape.len(), 4, "backbone input must be (N, C, H, W)");
        assert_eq!(shape[1], 1, "backbone input must be single-channel");
        let scaled = graph.scale(x, INPUT_SCALE);
        let mut ctx = Ctx::new(graph, &self.store, false);
        let mut h = ctx.graph.concat_channels(&[scaled, scaled, scaled]);
        let mut taps = Vec::with_capacity(BLOCKS.len());
        let mut conv_idx = 0;
        for (b, &n_convs) in BLOCKS.iter().enumerate() {
            for _ in 0..n_convs {
                let c = self.convs[conv_idx].apply(&mut ctx, h);
                h = ctx.graph.relu(c);
                conv_idx += 1;
            }
            taps.push(h);
            if b + 1 < BLOCKS.len() {
                h = ctx.graph.avg_pool(h, 2, 2);
            }
        }
        taps
    }

    /// Value-level tap features of a batch of slices.
    pub fn features(&self, x: &Tensor<T>) -> Vec<Tensor<T>> {
        let mut graph = Graph::new();
        let xv = graph.constant(x.clone());
        let taps = self.features_graph(&mut graph, xv);
        taps.into_iter().map(|t| graph.value(t).clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_are_deterministic_and_seeded() {
        let bb1 = PerceptualBackbone::<f64>::seeded(BackboneConfig::default()).unwrap();
        let bb2 = PerceptualBackbone::<f64>::seeded(BackboneConfig::default()).unwrap();
        let mut rng = SeedRng::new(4);
        let x = Tensor::rand_uniform(&[2, 1, 16, 16], -1.0, 1.0, &mut rng);
        let fa = bb1.features(&x);
        let fb = bb2.features(&x);
        assert_eq!(fa.len(), 5);
        for (a, b) in fa.iter().zip(&fb) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn tap_shapes_halve_per_block() {
        let bb = PerceptualBackbone::<f64>::seeded(BackboneConfig {
            base_width: 4,
            seed: 1,
        })
        .unwrap();
        let x = Tensor::<f64>::zeros(&[1, 1, 32, 32]);
        let taps = bb.features(&x);
        assert_eq!(taps[0].shape(), &[1, 4, 32, 32]);
        assert_eq!(taps[1].shape(), &[1, 8, 16, 16]);
        assert_eq!(taps[2].shape(), &[1, 16, 8, 8]);
        assert_eq!(taps[3].shape(), &[1, 32, 4, 4]);
        assert_eq!(taps[4].shape(), &[1, 32, 2, 2]);
    }

    #[test]
    fn tiny_inputs_survive_pool_clamping() {
        let bb = PerceptualBackbone::<f64>::seeded(BackboneConfig {
            base_width: 2,
            seed: 2,
        })
        .unwrap();
        let x = Tensor::<f64>::full(&[1, 1, 4, 4], 0.3);
        let taps = bb.features(&x);
        assert_eq!(taps[4].shape(), &[1, 16, 1, 1]);
        assert!(taps.iter().all(|t| t.all_finite()));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_features() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.ckpt");
        let bb = PerceptualBackbone::<f32>::seeded(BackboneConfig {
            base_width: 4,
            seed: 9,
        })
        .unwrap();
        bb.save_checkpoint(&path).unwrap();
        let loaded = PerceptualBackbone::<f32>::from_checkpoint(&path).unwrap();
        let mut rng = SeedRng::new(10);
        let x = Tensor::rand_uniform(&[1, 1, 8, 8], -1.0, 1.0, &mut rng);
        assert_eq!(bb.features(&x), loaded.features(&x));
    }

    #[test]
    fn feature_distances_dominate_voxel_scale() {
        // the raw squared feature distance between clearly different
        // inputs should sit orders of magnitude above the voxel MSE
        let bb = PerceptualBackbone::<f64>::seeded(BackboneConfig::default()).unwrap();
        let mut rng = SeedRng::new(11);
        let a = Tensor::<f64>::rand_uniform(&[4, 1, 32, 32], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::full(&[4, 1, 32, 32], 0.0);
        let fa = bb.features(&a);
        let fb = bb.features(&b);
        let mut dist = 0.0;
        for (x, y) in fa.iter().zip(&fb) {
            let mut acc = 0.0;
            for (u, v) in x.data().iter().zip(y.data()) {
                acc += (u - v) * (u - v);
            }
            dist += acc / x.len() as f64;
        }
        let mut voxel = 0.0;
        for (u, v) in a.data().iter().zip(b.data()) {
            voxel += (u - v) * (u - v);
        }
        voxel /= a.len() as f64;
        let ratio = dist / voxel;
        assert!(
            (50.0..50_000.0).contains(&ratio),
            "feature/voxel magnitude ratio {ratio} out of expected band"
        );
    }
}
