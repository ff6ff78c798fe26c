//! Conditional realness discriminator with autoencoder regularization.
//!
//! The encoder consumes the CT volume concatenated channel-wise with its
//! conditioning X-rays (frontal replicated along depth, lateral along
//! width) and downsamples by 2 per stage. Two intermediate feature taps
//! are exposed: `f1` at 1/8 of the input extent and `f2` at 1/16 (so a
//! 128-cube input yields 16- and 8-cube taps), with the realness score
//! map produced one stage below `f2`.
//!
//! Two small decoders reconstruct image space from the taps on *real*
//! inputs only: `decode_part` lifts a random half-crop of `f1` to the
//! matching sub-volume and `decode_global` lifts `f2` to a downsampled
//! copy of the whole volume. Targets for both come from
//! [`make_targets`], which reuses the crop record so the decoded region
//! and the real region stay aligned.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::nn::{Conv3dLayer, Ctx, InstanceNormLayer, ParamStore};
use crate::rng::SeedRng;
use crate::tensor::{Scalar, Tensor};
use crate::volume::ViewMode;
use crate::{kernels, Error, Result};

use crate::generator::LEAKY_SLOPE;

/// Encoder stride product from input to the `f1` tap.
pub const F1_STRIDE: usize = 8;
/// Downsampling factor from the input to the decoder targets I / I_part.
pub const TARGET_FACTOR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TapSource {
    Real,
    Generated,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub channel_cap: usize,
    pub view_mode: ViewMode,
    /// The autoencoder head is only built when reconstruction losses are
    /// in play; without it this is a plain conditional critic.
    pub with_decoders: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            base_channels: 16,
            channel_cap: 512,
            view_mode: ViewMode::Dual,
            with_decoders: true,
        }
    }
}

impl DiscriminatorConfig {
    fn channels(&self, stage: usize) -> usize {
        (self.base_channels << stage).min(self.channel_cap)
    }

    fn in_channels(&self) -> usize {
        match self.view_mode {
            ViewMode::Single => 2,
            ViewMode::Dual => 3,
        }
    }
}

/// Realness score map plus the two feature taps of one forward pass.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput<T: Scalar> {
    pub score_map: Tensor<T>,
    pub f1: Tensor<T>,
    pub f2: Tensor<T>,
    pub source: TapSource,
}

impl<T: Scalar> DiscriminatorOutput<T> {
    fn new(score_map: Tensor<T>, f1: Tensor<T>, f2: Tensor<T>, source: TapSource) -> Result<Self> {
        for a in 0..3 {
            if f1.shape()[2 + a] != 2 * f2.shape()[2 + a] {
                return Err(Error::ShapeMismatch(format!(
                    "f1 {:?} must be exactly twice f2 {:?} per axis",
                    f1.shape(),
                    f2.shape()
                )));
            }
        }
        if !score_map.all_finite() {
            return Err(Error::Contract("non-finite score map".into()));
        }
        Ok(DiscriminatorOutput {
            score_map,
            f1,
            f2,
            source,
        })
    }
}

/// Crop location in `f1` coordinates; the same record must be used for
/// the decoded patch and the real-image target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub offsets: [usize; 3],
    pub extent: [usize; 3],
}

/// Uniform random crop of half the extent per axis.
pub fn random_half_crop<T: Scalar>(
    f1: &Tensor<T>,
    rng: &mut SeedRng,
) -> Result<(Tensor<T>, CropRecord)> {
    let s = f1.shape();
    if s.len() != 5 {
        return Err(Error::ShapeMismatch(format!("f1 must be 5D, got {s:?}")));
    }
    let sp = [s[2], s[3], s[4]];
    for &e in &sp {
        if e % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "f1 extent {e} is odd, cannot half-crop"
            )));
        }
    }
    let extent = [sp[0] / 2, sp[1] / 2, sp[2] / 2];
    let offsets = [
        rng.below(extent[0] as u64 + 1) as usize,
        rng.below(extent[1] as u64 + 1) as usize,
        rng.below(extent[2] as u64 + 1) as usize,
    ];
    let cropped = kernels::crop_spatial(f1, offsets, extent);
    Ok((cropped, CropRecord { offsets, extent }))
}

/// Crop-and-downsample the real volume to the decoder target pair:
/// `I_part` is the sub-volume matching `crop` (mapped through the
/// constant f1 stride), `I` is the whole volume; both are area-mean
/// downsampled by [`TARGET_FACTOR`].
pub fn make_targets<T: Scalar>(
    real: &Tensor<T>,
    crop: &CropRecord,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = real.shape();
    if s.len() != 5 {
        return Err(Error::ShapeMismatch(format!(
            "real volume must be 5D, got {s:?}"
        )));
    }
    let sp = [s[2], s[3], s[4]];
    let offsets = crop.offsets.map(|o| o * F1_STRIDE);
    let extent = crop.extent.map(|e| e * F1_STRIDE);
    for a in 0..3 {
        if extent[a] == 0 || offsets[a] + extent[a] > sp[a] {
            return Err(Error::Contract(format!(
                "stale crop record: region {:?}+{:?} outside volume {:?}",
                offsets, extent, sp
            )));
        }
        if extent[a] % TARGET_FACTOR != 0 {
            return Err(Error::Contract(format!(
                "crop extent {:?} not compatible with target factor {TARGET_FACTOR}",
                extent
            )));
        }
    }
    let region = kernels::crop_spatial(real, offsets, extent);
    let i_part = kernels::avg_pool(&region, 3, TARGET_FACTOR);
    let i_full = kernels::avg_pool(real, 3, TARGET_FACTOR);
    Ok((i_part, i_full))
}

struct EncStage {
    conv: Conv3dLayer,
    norm: Option<InstanceNormLayer>,
}

impl EncStage {
    fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let mut v = self.conv.apply(ctx, x);
        if let Some(norm) = &self.norm {
            v = norm.apply(ctx, v);
        }
        ctx.graph.leaky_relu(v, LEAKY_SLOPE)
    }
}

struct UpBlock {
    conv: Conv3dLayer,
    norm: InstanceNormLayer,
}

impl UpBlock {
    fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let up = ctx.graph.upsample2x_3d(x);
        let c = self.conv.apply(ctx, up);
        let n = self.norm.apply(ctx, c);
        ctx.graph.leaky_relu(n, LEAKY_SLOPE)
    }
}

struct SimpleDecoder {
    blocks: Vec<UpBlock>,
    head: Conv3dLayer,
}

impl SimpleDecoder {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        n_blocks: usize,
        rng: &mut SeedRng,
    ) -> Self {
        let mut blocks = Vec::with_capacity(n_blocks);
        let mut c = in_channels;
        for i in 0..n_blocks {
            let cout = (c / 2).max(1);
            blocks.push(UpBlock {
                conv: Conv3dLayer::new(store, &format!("{prefix}.up{i}"), c, cout, 3, 1, rng),
                norm: InstanceNormLayer::new(store, &format!("{prefix}.up{i}.norm"), cout),
            });
            c = cout;
        }
        let head = Conv3dLayer::new(store, &format!("{prefix}.head"), c, 1, 3, 1, rng);
        SimpleDecoder { blocks, head }
    }

    fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let mut v = x;
        for b in &self.blocks {
            v = b.apply(ctx, v);
        }
        let h = self.head.apply(ctx, v);
        ctx.graph.tanh(h)
    }
}

/// Graph handles for one discriminator pass.
pub struct DiscVars {
    pub score: Var,
    pub f1: Var,
    pub f2: Var,
}

pub struct Discriminator<T: Scalar> {
    pub cfg: DiscriminatorConfig,
    pub store: ParamStore<T>,
    stages: Vec<EncStage>,
    score_stage: EncStage,
    score_head: Conv3dLayer,
    dec_part: Option<SimpleDecoder>,
    dec_global: Option<SimpleDecoder>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if cfg.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = SeedRng::new(seed).split(0x64_69_73);
        let mut stages = Vec::new();
        let mut cin = cfg.in_channels();
        for i in 0..4 {
            let cout = cfg.channels(i);
            stages.push(EncStage {
                conv: Conv3dLayer::new(&mut store, &format!("enc{i}"), cin, cout, 3, 2, &mut rng),
                norm: (i > 0)
                    .then(|| InstanceNormLayer::new(&mut store, &format!("enc{i}.norm"), cout)),
            });
            cin = cout;
        }
        let c_score = cfg.channels(3);
        // no normalization this close to the score head: it would erase
        // the per-sample statistics the critic needs (and literally zeroes
        // a 1-cube score map)
        let score_stage = EncStage {
            conv: Conv3dLayer::new(&mut store, "score_stage", cin, c_score, 3, 2, &mut rng),
            norm: None,
        };
        let score_head = Conv3dLayer::new(&mut store, "score_head", c_score, 1, 1, 1, &mut rng);
        let (dec_part, dec_global) = if cfg.with_decoders {
            (
                Some(SimpleDecoder::new(
                    &mut store,
                    "dec_part",
                    cfg.channels(2),
                    1,
                    &mut rng,
                )),
                Some(SimpleDecoder::new(
                    &mut store,
                    "dec_global",
                    cfg.channels(3),
                    2,
                    &mut rng,
                )),
            )
        } else {
            (None, None)
        };
        Ok(Discriminator {
            cfg,
            store,
            stages,
            score_stage,
            score_head,
            dec_part,
            dec_global,
        })
    }

    /// Number of parameters belonging to the simple decoders.
    pub fn decoder_param_count(&self) -> usize {
        self.store
            .iter()
            .filter(|(name, _)| name.starts_with("dec_part") || name.starts_with("dec_global"))
            .map(|(_, t)| t.len())
            .sum()
    }

    fn check_shapes(
        &self,
        ct: &[usize],
        frontal: &Tensor<T>,
        lateral: Option<&Tensor<T>>,
    ) -> Result<()> {
        if ct.len() != 5 || ct[1] != 1 {
            return Err(Error::ShapeMismatch(format!(
                "ct must be (N,1,D,H,W), got {ct:?}"
            )));
        }
        let (n, d, h, w) = (ct[0], ct[2], ct[3], ct[4]);
        for &e in &[d, h, w] {
            if e % 16 != 0 {
                return Err(Error::ShapeMismatch(format!(
                    "ct extents must be divisible by 16 for the tap schedule, got {ct:?}"
                )));
            }
        }
        if frontal.shape() != [n, 1, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "frontal {:?} vs expected ({n},1,{h},{w})",
                frontal.shape()
            )));
        }
        match (self.cfg.view_mode, lateral) {
            (ViewMode::Single, Some(_)) => Err(Error::Contract(
                "single-view discriminator given a lateral image".into(),
            )),
            (ViewMode::Dual, None) => Err(Error::Contract(
                "dual-view discriminator missing the lateral image".into(),
            )),
            (_, Some(lat)) => {
                if lat.shape() != [n, 1, d, h] {
                    return Err(Error::ShapeMismatch(format!(
                        "lateral {:?} vs expected ({n},1,{d},{h})",
                        lat.shape()
                    )));
                }
                Ok(())
            }
            (_, None) => Ok(()),
        }
    }

    /// Build the conditioned forward pass; `ct` is already a graph var so
    /// generated volumes stay attached to their producing graph.
    pub fn forward_graph(
        &self,
        graph: &mut Graph<T>,
        ct: Var,
        frontal: &Tensor<T>,
        lateral: Option<&Tensor<T>>,
        trainable: bool,
    ) -> Result<DiscVars> {
        let ct_shape = graph.shape(ct).to_vec();
        self.check_shapes(&ct_shape, frontal, lateral)?;
        let depth = ct_shape[2];
        let width = ct_shape[4];
        let mut ctx = Ctx::new(graph, &self.store, trainable);
        // conditioning: broadcast each view along its projection axis
        let f2d = ctx.graph.constant(frontal.clone());
        let f3d = ctx.graph.replicate_spatial(f2d, 0, depth);
        let mut channels = vec![ct, f3d];
        if let Some(lat) = lateral {
            let l2d = ctx.graph.constant(lat.clone());
            let l3d = ctx.graph.replicate_spatial(l2d, 2, width);
            channels.push(l3d);
        }
        let mut x = ctx.graph.concat_channels(&channels);
        let mut taps = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.apply(&mut ctx, x);
            if i == 2 || i == 3 {
                taps.push(x);
            }
        }
        let s = self.score_stage.apply(&mut ctx, x);
        let score = self.score_head.apply(&mut ctx, s);
        Ok(DiscVars {
            score,
            f1: taps[0],
            f2: taps[1],
        })
    }

    /// Value-level conditional scoring with exposed taps.
    pub fn discriminate(
        &self,
        ct: &Tensor<T>,
        frontal: &Tensor<T>,
        lateral: Option<&Tensor<T>>,
        source: TapSource,
    ) -> Result<DiscriminatorOutput<T>> {
        let mut graph = Graph::new();
        let ct_var = graph.constant(ct.clone());
        let vars = self.forward_graph(&mut graph, ct_var, frontal, lateral, false)?;
        DiscriminatorOutput::new(
            graph.value(vars.score).clone(),
            graph.value(vars.f1).clone(),
            graph.value(vars.f2).clone(),
            source,
        )
    }

    fn decoder(&self, which: &str) -> Result<&SimpleDecoder> {
        let dec = if which == "part" {
            &self.dec_part
        } else {
            &self.dec_global
        };
        dec.as_ref().ok_or_else(|| {
            Error::Config("this discriminator was built without simple decoders".into())
        })
    }

    fn guard_real(source: TapSource) -> Result<()> {
        if source == TapSource::Generated {
            return Err(Error::Contract(
                "simple decoders only accept taps from real-image passes".into(),
            ));
        }
        Ok(())
    }

    /// Decode a cropped `f1` tap to the matching sub-volume (I'_part).
    pub fn decode_part(&self, cropped_f1: &Tensor<T>, source: TapSource) -> Result<Tensor<T>> {
        Self::guard_real(source)?;
        let dec = self.decoder("part")?;
        let mut graph = Graph::new();
        let mut ctx = Ctx::new(&mut graph, &self.store, false);
        let x = ctx.graph.constant(cropped_f1.clone());
        let out = dec.apply(&mut ctx, x);
        Ok(graph.value(out).clone())
    }

    /// Decode the `f2` tap to the downsampled whole volume (I').
    pub fn decode_global(&self, f2: &Tensor<T>, source: TapSource) -> Result<Tensor<T>> {
        Self::guard_real(source)?;
        let dec = self.decoder("global")?;
        let mut graph = Graph::new();
        let mut ctx = Ctx::new(&mut graph, &self.store, false);
        let x = ctx.graph.constant(f2.clone());
        let out = dec.apply(&mut ctx, x);
        Ok(graph.value(out).clone())
    }

    /// Graph path for the training step (real taps only by contract).
    pub fn decode_part_graph(
        &self,
        graph: &mut Graph<T>,
        cropped_f1: Var,
        trainable: bool,
    ) -> Result<Var> {
        let dec = self.decoder("part")?;
        let mut ctx = Ctx::new(graph, &self.store, trainable);
        Ok(dec.apply(&mut ctx, cropped_f1))
    }

    pub fn decode_global_graph(
        &self,
        graph: &mut Graph<T>,
        f2: Var,
        trainable: bool,
    ) -> Result<Var> {
        let dec = self.decoder("global")?;
        let mut ctx = Ctx::new(graph, &self.store, trainable);
        Ok(dec.apply(&mut ctx, f2))
    }
}
