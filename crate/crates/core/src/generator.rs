//! The 2D-to-3D reconstruction generator.
//!
//! One branch per X-ray view: a 2D convolutional encoder, a
//! channel-to-depth bridge at the bottleneck, and a 3D decoder with
//! per-level skip bridges (2D features replicated along the view's
//! projection axis, then 1x1x1-projected and added). Each branch works in
//! its own frame with the generated axis first; the lateral stream is
//! rotated into the frontal (D, H, W) frame before fusion, which averages
//! the two streams. Edge guidance runs the Sobel operator on each input
//! view, lifts the gradient magnitude through a per-pixel MLP, and adds
//! channel-projected copies into the two middle encoder levels.
//!
//! All activations are bounded by a final tanh so outputs live on the
//! normalized [-1, 1] intensity scale.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::nn::{Conv2dLayer, Conv3dLayer, Ctx, InstanceNormLayer, ParamStore};
use crate::rng::SeedRng;
use crate::tensor::{Scalar, Tensor};
use crate::volume::{ProjectionPair, ViewMode};
use crate::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Per-pixel gradient magnitude from the standard 3x3 Sobel kernels,
/// reflect-padded (mirror about the edge, edge sample excluded).
pub fn sobel_gradient<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "sobel expects a 2D image, got {s:?}"
        )));
    }
    let (h, w) = (s[0], s[1]);
    if h < 3 || w < 3 {
        return Err(Error::ShapeMismatch(format!(
            "image {h}x{w} smaller than 3x3 kernel"
        )));
    }
    let reflect = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= n {
            2 * (n - 1) - i as usize
        } else {
            i as usize
        }
    };
    let at = |y: isize, x: isize| img.data()[reflect(y, h) * w + reflect(x, w)].to_f64();
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out.data_mut()[y as usize * w + x as usize] = T::from_f64((gx * gx + gy * gy).sqrt());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    Instance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    /// Encoder/decoder depth (number of halvings); >= 3.
    pub n_levels: usize,
    pub view_mode: ViewMode,
    pub sgg_enabled: bool,
    /// Channel widths saturate at this cap.
    pub channel_cap: usize,
    pub norm: NormKind,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_channels: 16,
            n_levels: 4,
            view_mode: ViewMode::Dual,
            sgg_enabled: true,
            channel_cap: 512,
            norm: NormKind::Instance,
        }
    }
}

/// Encoder levels that receive edge-guidance features.
pub const SGG_MERGE_LEVELS: [usize; 2] = [1, 2];

impl GeneratorConfig {
    /// Channel width at encoder level `i` (bottleneck is level `n_levels`).
    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.channel_cap)
    }

    pub fn validate(&self, input_extent: usize) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.n_levels < 3 {
            return Err(Error::Config(format!(
                "n_levels must be >= 3, got {}",
                self.n_levels
            )));
        }
        let div = 1usize << self.n_levels;
        if input_extent % div != 0 || input_extent / div == 0 {
            return Err(Error::Config(format!(
                "input extent {input_extent} not divisible by 2^{}",
                self.n_levels
            )));
        }
        let s = input_extent / div;
        let c_bot = self.channels(self.n_levels);
        if c_bot % s != 0 {
            return Err(Error::Config(format!(
                "bottleneck channels {c_bot} not divisible by bottleneck extent {s}"
            )));
        }
        Ok(())
    }
}

/// Edge-guidance features for one view: the Sobel magnitude map and the
/// per-level embedded maps (the projection outputs that get added into
/// the encoder).
#[derive(Debug, Clone)]
pub struct SggFeatures<T: Scalar> {
    pub gradient_map: Tensor<T>,
    /// One (C_level, H/2^level, W/2^level) map per merge level.
    pub embedded: Vec<Tensor<T>>,
}

struct SggModule {
    mlp: Vec<Conv2dLayer>,
    projections: Vec<Conv2dLayer>,
}

impl SggModule {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &GeneratorConfig,
        rng: &mut SeedRng,
    ) -> Self {
        let m = cfg.base_channels;
        let mlp = vec![
            Conv2dLayer::new(store, &format!("{prefix}.sgg.mlp0"), 1, m, 1, 1, rng),
            Conv2dLayer::new(store, &format!("{prefix}.sgg.mlp1"), m, m, 1, 1, rng),
        ];
        let projections = SGG_MERGE_LEVELS
            .iter()
            .map(|&lvl| {
                Conv2dLayer::new(
                    store,
                    &format!("{prefix}.sgg.proj{lvl}"),
                    m,
                    cfg.channels(lvl),
                    1,
                    1,
                    rng,
                )
            })
            .collect();
        SggModule { mlp, projections }
    }

    /// Embedded feature map for each merge level, aligned to the encoder
    /// resolutions.
    fn embed<T: Scalar>(&self, ctx: &mut Ctx<T>, grad_map: Var) -> Vec<Var> {
        let mut feat = grad_map;
        for layer in &self.mlp {
            let c = layer.apply(ctx, feat);
            feat = ctx.graph.relu(c);
        }
        SGG_MERGE_LEVELS
            .iter()
            .zip(&self.projections)
            .map(|(&lvl, proj)| {
                let pooled = ctx.graph.avg_pool(feat, 2, 1 << lvl);
                proj.apply(ctx, pooled)
            })
            .collect()
    }
}

struct ConvBlock2d {
    conv: Conv2dLayer,
    norm: InstanceNormLayer,
}

impl ConvBlock2d {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut SeedRng,
    ) -> Self {
        ConvBlock2d {
            conv: Conv2dLayer::new(store, name, cin, cout, 3, stride, rng),
            norm: InstanceNormLayer::new(store, &format!("{name}.norm"), cout),
        }
    }

    fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let c = self.conv.apply(ctx, x);
        let n = self.norm.apply(ctx, c);
        ctx.graph.leaky_relu(n, LEAKY_SLOPE)
    }
}

struct DecLevel {
    conv: Conv3dLayer,
    skip_proj: Conv3dLayer,
    norm: InstanceNormLayer,
}

/// One view branch: 2D encoder, bridge, 3D decoder. Operates in the
/// branch frame (generated axis first).
struct Branch {
    encoder: Vec<ConvBlock2d>,
    sgg: Option<SggModule>,
    bridge_conv: Conv3dLayer,
    bridge_norm: InstanceNormLayer,
    decoder: Vec<DecLevel>,
}

impl Branch {
    fn new_with_extent<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &GeneratorConfig,
        input_extent: usize,
        rng: &mut SeedRng,
    ) -> Self {
        let levels = cfg.n_levels;
        let mut encoder = Vec::with_capacity(levels + 1);
        encoder.push(ConvBlock2d::new(
            store,
            &format!("{prefix}.enc0"),
            1,
            cfg.channels(0),
            1,
            rng,
        ));
        for i in 1..=levels {
            encoder.push(ConvBlock2d::new(
                store,
                &format!("{prefix}.enc{i}"),
                cfg.channels(i - 1),
                cfg.channels(i),
                2,
                rng,
            ));
        }
        let sgg = cfg
            .sgg_enabled
            .then(|| SggModule::new(store, prefix, cfg, rng));
        let s = input_extent >> levels;
        let c3 = cfg.channels(levels) / s;
        let bridge_conv = Conv3dLayer::new(
            store,
            &format!("{prefix}.bridge"),
            c3,
            cfg.channels(levels - 1),
            3,
            1,
            rng,
        );
        let bridge_norm = InstanceNormLayer::new(
            store,
            &format!("{prefix}.bridge.norm"),
            cfg.channels(levels - 1),
        );
        let mut decoder = Vec::with_capacity(levels);
        for i in (0..levels).rev() {
            let cin = cfg.channels((i + 1).min(levels - 1));
            let cout = cfg.channels(i);
            decoder.push(DecLevel {
                conv: Conv3dLayer::new(store, &format!("{prefix}.dec{i}"), cin, cout, 3, 1, rng),
                skip_proj: Conv3dLayer::new(
                    store,
                    &format!("{prefix}.skip{i}"),
                    cfg.channels(i),
                    cout,
                    1,
                    1,
                    rng,
                ),
                norm: InstanceNormLayer::new(store, &format!("{prefix}.dec{i}.norm"), cout),
            });
        }
        Branch {
            encoder,
            sgg,
            bridge_conv,
            bridge_norm,
            decoder,
        }
    }

    /// img: (N, 1, S, S) in the branch frame. Returns (N, C0, S, S, S)
    /// plus an optional shape trace.
    fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        cfg: &GeneratorConfig,
        img: Var,
        grad_map: Option<Var>,
        trace: Option<&mut Vec<(String, Vec<usize>)>>,
        prefix: &str,
    ) -> Var {
        let levels = cfg.n_levels;
        let mut tr = trace;
        let record =
            |ctx: &Ctx<T>, tr: &mut Option<&mut Vec<(String, Vec<usize>)>>, name: &str, v: Var| {
                if let Some(t) = tr.as_deref_mut() {
                    t.push((format!("{prefix}.{name}"), ctx.graph.shape(v).to_vec()));
                }
            };
        let sgg_embeds = match (&self.sgg, grad_map) {
            (Some(sgg), Some(gm)) => Some(sgg.embed(ctx, gm)),
            _ => None,
        };
        let mut enc_feats = Vec::with_capacity(levels);
        let mut x = self.encoder[0].apply(ctx, img);
        record(ctx, &mut tr, "enc0", x);
        enc_feats.push(x);
        for i in 1..=levels {
            x = self.encoder[i].apply(ctx, x);
            if let Some(embeds) = &sgg_embeds {
                if let Some(pos) = SGG_MERGE_LEVELS.iter().position(|&l| l == i) {
                    x = ctx.graph.add(x, embeds[pos]);
                }
            }
            record(ctx, &mut tr, &format!("enc{i}"), x);
            if i < levels {
                enc_feats.push(x);
            }
        }
        // channel-to-depth bridge
        let bshape = ctx.graph.shape(x).to_vec();
        let (n, c2d, s) = (bshape[0], bshape[1], bshape[2]);
        let c3 = c2d / s;
        let mut d = ctx.graph.reshape(x, &[n, c3, s, s, s]);
        record(ctx, &mut tr, "bridge.reshape", d);
        d = self.bridge_conv.apply(ctx, d);
        d = self.bridge_norm.apply(ctx, d);
        d = ctx.graph.leaky_relu(d, LEAKY_SLOPE);
        record(ctx, &mut tr, "bridge", d);
        for (step, lvl) in self.decoder.iter().zip((0..levels).rev()) {
            d = ctx.graph.upsample2x_3d(d);
            d = step.conv.apply(ctx, d);
            // skip bridge: 2D feature replicated along the generated axis
            let e = enc_feats[lvl];
            let copies = ctx.graph.shape(d)[2];
            let rep = ctx.graph.replicate_spatial(e, 0, copies);
            let proj = step.skip_proj.apply(ctx, rep);
            d = ctx.graph.add(d, proj);
            d = step.norm.apply(ctx, d);
            d = ctx.graph.leaky_relu(d, LEAKY_SLOPE);
            record(ctx, &mut tr, &format!("dec{lvl}"), d);
        }
        d
    }
}

/// Rotation taking the lateral branch frame (W, D, H) into the frontal
/// (D, H, W) frame.
pub const LATERAL_TO_FRONTAL: [usize; 3] = [1, 2, 0];

pub struct Generator<T: Scalar> {
    pub cfg: GeneratorConfig,
    pub store: ParamStore<T>,
    input_extent: usize,
    frontal: Branch,
    lateral: Option<Branch>,
    fusion_conv: Conv3dLayer,
    fusion_norm: InstanceNormLayer,
    head: Conv3dLayer,
    /// Test hook: route only the frontal stream through fusion.
    pub fusion_passthrough: bool,
}

impl<T: Scalar> Generator<T> {
    pub fn new(cfg: GeneratorConfig, input_extent: usize, seed: u64) -> Result<Self> {
        cfg.validate(input_extent)?;
        let mut store = ParamStore::new();
        let mut rng = SeedRng::new(seed).split(0x67_65_6e);
        let frontal = Branch::new_with_extent(&mut store, "frontal", &cfg, input_extent, &mut rng);
        let lateral = match cfg.view_mode {
            ViewMode::Dual => Some(Branch::new_with_extent(
                &mut store,
                "lateral",
                &cfg,
                input_extent,
                &mut rng,
            )),
            ViewMode::Single => None,
        };
        let c0 = cfg.channels(0);
        let fusion_conv = Conv3dLayer::new(&mut store, "fusion", c0, c0, 3, 1, &mut rng);
        let fusion_norm = InstanceNormLayer::new(&mut store, "fusion.norm", c0);
        let head = Conv3dLayer::new(&mut store, "head", c0, 1, 3, 1, &mut rng);
        Ok(Generator {
            cfg,
            store,
            input_extent,
            frontal,
            lateral,
            fusion_conv,
            fusion_norm,
            head,
            fusion_passthrough: false,
        })
    }

    pub fn input_extent(&self) -> usize {
        self.input_extent
    }

    fn check_inputs(&self, frontal: &Tensor<T>, lateral: Option<&Tensor<T>>) -> Result<usize> {
        let fs = frontal.shape();
        if fs.len() != 4 || fs[1] != 1 {
            return Err(Error::ShapeMismatch(format!(
                "frontal batch must be (N,1,H,W), got {fs:?}"
            )));
        }
        if fs[2] != self.input_extent || fs[3] != self.input_extent {
            return Err(Error::ShapeMismatch(format!(
                "frontal extent {:?} != configured {}",
                &fs[2..],
                self.input_extent
            )));
        }
        match (self.cfg.view_mode, lateral) {
            (ViewMode::Single, Some(_)) => Err(Error::Contract(
                "single-view generator given a lateral image".into(),
            )),
            (ViewMode::Dual, None) => Err(Error::Contract(
                "dual-view generator missing the lateral image".into(),
            )),
            (_, Some(lat)) => {
                if lat.shape() != fs {
                    return Err(Error::ShapeMismatch(format!(
                        "lateral {:?} != frontal {:?}",
                        lat.shape(),
                        fs
                    )));
                }
                Ok(fs[0])
            }
            (_, None) => Ok(fs[0]),
        }
    }

    /// Sobel maps for the branch inputs; `None` when edge guidance is off.
    fn gradient_maps(
        &self,
        frontal: &Tensor<T>,
        lateral: Option<&Tensor<T>>,
    ) -> Result<Option<(Tensor<T>, Option<Tensor<T>>)>> {
        if !self.cfg.sgg_enabled {
            return Ok(None);
        }
        let batch_sobel = |imgs: &Tensor<T>| -> Result<Tensor<T>> {
            let s = imgs.shape();
            let (n, h, w) = (s[0], s[2], s[3]);
            let mut out = Tensor::zeros(s);
            for i in 0..n {
                let img =
                    Tensor::from_vec(&[h, w], imgs.data()[i * h * w..(i + 1) * h * w].to_vec());
                let g = sobel_gradient(&img)?;
                out.data_mut()[i * h * w..(i + 1) * h * w].copy_from_slice(g.data());
            }
            Ok(out)
        };
        let f = batch_sobel(frontal)?;
        let l = lateral.map(batch_sobel).transpose()?;
        Ok(Some((f, l)))
    }

    /// Build the forward pass in `graph`. `trainable` controls whether
    /// generator parameters receive gradients. Inputs are (N,1,S,S).
    pub fn forward_graph(
        &self,
        graph: &mut Graph<T>,
        frontal: &Tensor<T>,
        lateral: Option<&Tensor<T>>,
        trainable: bool,
    ) -> Result<Var> {
        self.forward_internal(graph, frontal, lateral, trainable, None)
    }

    fn forward_internal(
        &self,
        graph: &mut Graph<T>,
        frontal: &Tensor<T>,
        lateral: Option<&Tensor<T>>,
        trainable: bool,
        mut trace: Option<&mut Vec<(String, Vec<usize>)>>,
    ) -> Result<Var> {
        self.check_inputs(frontal, lateral)?;
        let grads = self.gradient_maps(frontal, lateral)?;
        let mut ctx = Ctx::new(graph, &self.store, trainable);
        let f_in = ctx.graph.constant(frontal.clone());
        let f_grad = grads.as_ref().map(|(f, _)| ctx.graph.constant(f.clone()));
        let f_stream = self.frontal.forward(
            &mut ctx,
            &self.cfg,
            f_in,
            f_grad,
            trace.as_deref_mut(),
            "frontal",
        );
        let fused = match (&self.lateral, lateral) {
            (Some(branch), Some(lat)) => {
                let l_in = ctx.graph.constant(lat.clone());
                let l_grad = grads
                    .as_ref()
                    .and_then(|(_, l)| l.as_ref())
                    .map(|g| ctx.graph.constant(g.clone()));
                let l_stream = branch.forward(
                    &mut ctx,
                    &self.cfg,
                    l_in,
                    l_grad,
                    trace.as_deref_mut(),
                    "lateral",
                );
                let rotated = ctx.graph.permute_spatial(l_stream, LATERAL_TO_FRONTAL);
                if self.fusion_passthrough {
                    f_stream
                } else {
                    // arithmetic mean of the two aligned streams
                    let sum = ctx.graph.add(f_stream, rotated);
                    ctx.graph.scale(sum, 0.5)
                }
            }
            _ => f_stream,
        };
        let mut y = self.fusion_conv.apply(&mut ctx, fused);
        y = self.fusion_norm.apply(&mut ctx, y);
        y = ctx.graph.leaky_relu(y, LEAKY_SLOPE);
        y = self.head.apply(&mut ctx, y);
        y = ctx.graph.tanh(y);
        if let Some(t) = trace.as_deref_mut() {
            t.push(("output".into(), ctx.graph.shape(y).to_vec()));
        }
        Ok(y)
    }

    /// Inference on a batch; returns the (N, 1, S, S, S) reconstruction.
    pub fn forward_batch(
        &self,
        frontal: &Tensor<T>,
        lateral: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, frontal, lateral, false)?;
        Ok(g.value(out).clone())
    }

    /// Inference on one sample pair; returns the (D, H, W) reconstruction.
    pub fn forward_pair(&self, xrays: &ProjectionPair<T>) -> Result<Tensor<T>> {
        let fs = xrays.frontal.shape();
        let frontal = xrays.frontal.reshaped(&[1, 1, fs[0], fs[1]]);
        let lateral = xrays
            .lateral
            .as_ref()
            .map(|l| l.reshaped(&[1, 1, l.shape()[0], l.shape()[1]]));
        let out = self.forward_batch(&frontal, lateral.as_ref())?;
        let s = out.shape().to_vec();
        Ok(out.reshaped(&[s[2], s[3], s[4]]))
    }

    /// Forward pass recording every stage's output shape.
    pub fn forward_traced(
        &self,
        frontal: &Tensor<T>,
        lateral: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, Vec<(String, Vec<usize>)>)> {
        let mut trace = Vec::new();
        let mut g = Graph::new();
        let out = self.forward_internal(&mut g, frontal, lateral, false, Some(&mut trace))?;
        Ok((g.value(out).clone(), trace))
    }

    /// Edge-guidance features for one view's gradient map: the embedded
    /// per-level projections, shape-aligned with the encoder.
    pub fn sgg_embed(&self, grad_map: &Tensor<T>) -> Result<SggFeatures<T>> {
        let branch = &self.frontal;
        let Some(sgg) = &branch.sgg else {
            return Err(Error::Config(
                "edge guidance is disabled in this generator".into(),
            ));
        };
        let s = grad_map.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "gradient map must be 2D, got {s:?}"
            )));
        }
        if s[0] != self.input_extent || s[1] != self.input_extent {
            return Err(Error::ShapeMismatch(format!(
                "gradient map {s:?} does not match encoder input {}",
                self.input_extent
            )));
        }
        let mut graph = Graph::new();
        let mut ctx = Ctx::new(&mut graph, &self.store, false);
        let gm = ctx.graph.constant(grad_map.reshaped(&[1, 1, s[0], s[1]]));
        let vars = sgg.embed(&mut ctx, gm);
        let embedded = vars
            .iter()
            .map(|&v| {
                let t = graph.value(v);
                let sh = t.shape().to_vec();
                t.reshaped(&[sh[1], sh[2], sh[3]])
            })
            .collect();
        Ok(SggFeatures {
            gradient_map: grad_map.clone(),
            embedded,
        })
    }

    /// Zero the SGG projection layers (embedding becomes the additive
    /// identity). Test hook for the merge-is-identity contract.
    pub fn zero_sgg_projections(&mut self) {
        let mut ids = Vec::new();
        for branch in [Some(&self.frontal), self.lateral.as_ref()]
            .into_iter()
            .flatten()
        {
            if let Some(sgg) = &branch.sgg {
                for proj in &sgg.projections {
                    ids.push((proj.w, proj.b));
                }
            }
        }
        for (w, b) in ids {
            let wt = self.store.get_mut(w);
            *wt = Tensor::zeros(wt.shape().to_vec().as_slice());
            let bt = self.store.get_mut(b);
            *bt = Tensor::zeros(bt.shape().to_vec().as_slice());
        }
    }

    /// Zero every parameter of the lateral branch. Test hook for the
    /// dual-equals-single controlled equality.
    pub fn zero_lateral_branch(&mut self) {
        let ids: Vec<usize> = self
            .store
            .iter()
            .enumerate()
            .filter(|(_, (name, _))| name.starts_with("lateral."))
            .map(|(i, _)| i)
            .collect();
        for i in ids {
            let t = self.store.get_mut(crate::nn::ParamId(i));
            *t = Tensor::zeros(t.shape().to_vec().as_slice());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn imgs(n: usize, s: usize, seed: u64) -> Tensor<f64> {
        let mut rng = SeedRng::new(seed);
        Tensor::rand_uniform(&[n, 1, s, s], -1.0, 1.0, &mut rng)
    }

    #[test]
    fn sobel_constant_image_is_zero() {
        let img = Tensor::<f64>::full(&[8, 8], 0.7);
        let g = sobel_gradient(&img).unwrap();
        for &v in g.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn sobel_ramp_interior_is_eight() {
        // img(i, j) = j: Sobel x response is 8 per unit slope away from
        // the left/right borders, y response is 0
        let (h, w) = (7, 9);
        let data: Vec<f64> = (0..h * w).map(|i| (i % w) as f64).collect();
        let img = Tensor::from_vec(&[h, w], data);
        let g = sobel_gradient(&img).unwrap();
        for y in 0..h {
            for x in 1..w - 1 {
                let v = g.data()[y * w + x];
                assert!((v - 8.0).abs() < 1e-12, "({y},{x}): {v}");
            }
        }
    }

    #[test]
    fn sobel_transpose_commutes() {
        let mut rng = SeedRng::new(40);
        let img = Tensor::<f64>::rand_uniform(&[6, 11], -1.0, 1.0, &mut rng);
        let g = sobel_gradient(&img).unwrap();
        let mut t = Tensor::<f64>::zeros(&[11, 6]);
        for y in 0..6 {
            for x in 0..11 {
                t.data_mut()[x * 6 + y] = img.data()[y * 11 + x];
            }
        }
        let gt = sobel_gradient(&t).unwrap();
        for y in 0..6 {
            for x in 0..11 {
                assert!((g.data()[y * 11 + x] - gt.data()[x * 6 + y]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sobel_rejects_tiny_images() {
        assert!(sobel_gradient(&Tensor::<f64>::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn sobel_is_non_negative() {
        let mut rng = SeedRng::new(41);
        let img = Tensor::<f64>::rand_uniform(&[9, 9], -1.0, 1.0, &mut rng);
        let g = sobel_gradient(&img).unwrap();
        assert!(g.data().iter().all(|&v| v >= 0.0));
    }

    fn tiny_cfg(view: ViewMode) -> GeneratorConfig {
        GeneratorConfig {
            base_channels: 2,
            n_levels: 3,
            view_mode: view,
            sgg_enabled: true,
            channel_cap: 8,
            norm: NormKind::Instance,
        }
    }

    #[test]
    fn forward_shape_is_cubic_volume() {
        let gen = Generator::<f64>::new(tiny_cfg(ViewMode::Dual), 16, 1).unwrap();
        let f = imgs(2, 16, 2);
        let l = imgs(2, 16, 3);
        let out = gen.forward_batch(&f, Some(&l)).unwrap();
        assert_eq!(out.shape(), &[2, 1, 16, 16, 16]);
        assert!(out.all_finite());
        let (lo, hi) = out.min_max();
        assert!(lo >= -1.0 && hi <= 1.0, "tanh bound violated: {lo} {hi}");
    }

    #[test]
    fn forward_is_deterministic() {
        let gen = Generator::<f64>::new(tiny_cfg(ViewMode::Dual), 16, 7).unwrap();
        let f = imgs(1, 16, 4);
        let l = imgs(1, 16, 5);
        let a = gen.forward_batch(&f, Some(&l)).unwrap();
        let b = gen.forward_batch(&f, Some(&l)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn view_mode_mismatches_are_errors() {
        let single = Generator::<f64>::new(tiny_cfg(ViewMode::Single), 16, 1).unwrap();
        let f = imgs(1, 16, 2);
        let l = imgs(1, 16, 3);
        assert!(matches!(
            single.forward_batch(&f, Some(&l)),
            Err(Error::Contract(_))
        ));
        assert!(single.forward_batch(&f, None).is_ok());
        let dual = Generator::<f64>::new(tiny_cfg(ViewMode::Dual), 16, 1).unwrap();
        assert!(matches!(
            dual.forward_batch(&f, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn shape_trace_follows_halving_doubling_schedule() {
        let cfg = GeneratorConfig {
            base_channels: 2,
            n_levels: 4,
            view_mode: ViewMode::Single,
            sgg_enabled: false,
            channel_cap: 32,
            norm: NormKind::Instance,
        };
        let gen = Generator::<f64>::new(cfg, 64, 1).unwrap();
        let f = imgs(1, 64, 6);
        let (_, trace) = gen.forward_traced(&f, None).unwrap();
        let get = |name: &str| -> Vec<usize> {
            trace
                .iter()
                .find(|(n, _)| n == name)
                .unwrap_or_else(|| panic!("missing {name}"))
                .1
                .clone()
        };
        assert_eq!(get("frontal.enc0"), vec![1, 2, 64, 64]);
        assert_eq!(get("frontal.enc1"), vec![1, 4, 32, 32]);
        assert_eq!(get("frontal.enc2"), vec![1, 8, 16, 16]);
        assert_eq!(get("frontal.enc3"), vec![1, 16, 8, 8]);
        assert_eq!(get("frontal.enc4"), vec![1, 32, 4, 4]);
        assert_eq!(get("frontal.bridge.reshape"), vec![1, 8, 4, 4, 4]);
        assert_eq!(get("frontal.bridge"), vec![1, 16, 4, 4, 4]);
        assert_eq!(get("frontal.dec3"), vec![1, 16, 8, 8, 8]);
        assert_eq!(get("frontal.dec2"), vec![1, 8, 16, 16, 16]);
        assert_eq!(get("frontal.dec1"), vec![1, 4, 32, 32, 32]);
        assert_eq!(get("frontal.dec0"), vec![1, 2, 64, 64, 64]);
        assert_eq!(get("output"), vec![1, 1, 64, 64, 64]);
    }

    #[test]
    fn sgg_embedded_shapes_match_encoder_levels() {
        let cfg = GeneratorConfig {
            base_channels: 4,
            n_levels: 4,
            view_mode: ViewMode::Single,
            sgg_enabled: true,
            channel_cap: 64,
            norm: NormKind::Instance,
        };
        let gen = Generator::<f64>::new(cfg, 64, 3).unwrap();
        let img = Tensor::<f64>::rand_uniform(&[64, 64], -1.0, 1.0, &mut SeedRng::new(8));
        let gm = sobel_gradient(&img).unwrap();
        let feats = gen.sgg_embed(&gm).unwrap();
        assert_eq!(feats.embedded.len(), 2);
        assert_eq!(feats.embedded[0].shape(), &[8, 32, 32]); // level 1
        assert_eq!(feats.embedded[1].shape(), &[16, 16, 16]); // level 2
                                                              // resolution mismatch is an error
        let bad = Tensor::<f64>::zeros(&[32, 32]);
        assert!(gen.sgg_embed(&bad).is_err());
    }

    #[test]
    fn zeroed_projections_make_sgg_merge_the_identity() {
        let mut with_sgg = Generator::<f64>::new(tiny_cfg(ViewMode::Single), 16, 11).unwrap();
        let img = Tensor::<f64>::rand_uniform(&[16, 16], -1.0, 1.0, &mut SeedRng::new(9));
        let gm = sobel_gradient(&img).unwrap();
        with_sgg.zero_sgg_projections();
        let feats = with_sgg.sgg_embed(&gm).unwrap();
        for e in &feats.embedded {
            assert!(e.data().iter().all(|&v| v == 0.0), "embedding not identity");
        }
    }

    #[test]
    fn disabling_sgg_reproduces_the_no_sgg_pass_bit_exactly() {
        // same seed, sgg on vs off: shared layers get identical init draws
        // only if construction order matches, so instead verify the flag
        // gates the computation: with zeroed projections the sgg-on
        // forward equals itself after disabling the flag on a clone.
        let cfg_on = tiny_cfg(ViewMode::Single);
        let mut gen = Generator::<f64>::new(cfg_on, 16, 13).unwrap();
        gen.zero_sgg_projections();
        let f = imgs(1, 16, 14);
        let with_zeroed = gen.forward_batch(&f, None).unwrap();
        // rebuild an identical generator and strip the sgg module
        let mut gen_off = Generator::<f64>::new(tiny_cfg(ViewMode::Single), 16, 13).unwrap();
        gen_off.zero_sgg_projections();
        gen_off.cfg.sgg_enabled = false;
        gen_off.frontal.sgg = None;
        let without = gen_off.forward_batch(&f, None).unwrap();
        assert_eq!(with_zeroed, without);
    }

    #[test]
    fn dual_with_passthrough_fusion_equals_single() {
        // weights must agree across view modes: construct dual, then zero
        // the lateral branch and flip the passthrough hook
        let mut dual = Generator::<f64>::new(tiny_cfg(ViewMode::Dual), 16, 21).unwrap();
        dual.zero_lateral_branch();
        dual.fusion_passthrough = true;
        let f = imgs(2, 16, 22);
        let l = imgs(2, 16, 23);
        let dual_out = dual.forward_batch(&f, Some(&l)).unwrap();

        // single generator sharing the frontal/fusion/head weights
        let mut single = Generator::<f64>::new(tiny_cfg(ViewMode::Single), 16, 21).unwrap();
        for i in 0..single.store.len() {
            let id = crate::nn::ParamId(i);
            let name = single.store.name(id).to_string();
            let src = dual
                .store
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .unwrap();
            *single.store.get_mut(id) = src;
        }
        let single_out = single.forward_batch(&f, None).unwrap();
        assert_eq!(dual_out, single_out);
    }

    #[test]
    fn config_validation_catches_bad_extents() {
        let cfg = tiny_cfg(ViewMode::Single);
        assert!(Generator::<f64>::new(cfg.clone(), 20, 1).is_err()); // not divisible by 8
        let mut cfg2 = cfg;
        cfg2.n_levels = 2;
        assert!(Generator::<f64>::new(cfg2, 16, 1).is_err());
    }
}
