//! Alternating adversarial training, the epoch-0 loss-scale audit,
//! checkpointed evaluation, and ablation orchestration.
//!
//! Each step runs one discriminator update (adversarial + real-only
//! reconstruction) followed by one generator update (adversarial + voxel
//! + projection + optional slice-perceptual). The generator forward is
//! built once per step: its value feeds the discriminator update as a
//! constant and its graph carries the generator update.
//!
//! Determinism: all per-epoch randomness (shuffle order, crop positions)
//! is derived statelessly from `(seed, epoch, step)`, so a checkpoint
//! resume replays the exact run and two runs with one seed produce
//! identical logs.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::discriminator::{
    make_targets, random_half_crop, CropRecord, Discriminator, DiscriminatorConfig, TapSource,
};
use crate::generator::{Generator, GeneratorConfig};
use crate::graph::Graph;
use crate::losses::{self, voxel_loss, DaeVariant, GeneratorTerms, LossWeights, ReconstrTerms};
use crate::metrics::{evaluate_pair, MetricReport};
use crate::nn::Adam;
use crate::perceptual::{BackboneConfig, PerceptualBackbone};
use crate::phantom::{load_manifest, load_sample, ManifestEntry, Split};
use crate::rng::SeedRng;
use crate::tensor::Tensor;
use crate::volume::{SampleRecord, ViewMode};
use crate::{checkpoint, Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epoch at which the linear decay to zero begins.
    pub decay_start: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub generator: GeneratorConfig,
    pub discriminator_channels: usize,
    pub discriminator_cap: usize,
    pub backbone: BackboneConfig,
    pub manifest: PathBuf,
    /// 0 = final checkpoint only.
    pub checkpoint_every: usize,
    /// Batches per epoch; unset means one pass over the training split.
    pub steps_per_epoch: Option<usize>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            decay_start: 50,
            lr: 2e-4,
            batch_size: 2,
            seed: 0,
            weights: LossWeights::default(),
            generator: GeneratorConfig::default(),
            discriminator_channels: 16,
            discriminator_cap: 512,
            backbone: BackboneConfig::default(),
            manifest: PathBuf::from("manifest.json"),
            checkpoint_every: 0,
            steps_per_epoch: None,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.decay_start >= self.epochs {
            return Err(Error::Config(format!(
                "decay_start {} must be < epochs {}",
                self.decay_start, self.epochs
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.weights.validate()?;
        Ok(())
    }

    /// Learning rate at `epoch`: constant, then linear to zero.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.decay_start {
            self.lr
        } else {
            let k = (epoch - self.decay_start) as f64;
            self.lr * (1.0 - k / (self.epochs - self.decay_start) as f64)
        }
    }
}

/// One CSV row of the loss log: every raw term plus the weighted totals.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub d_adv: f64,
    pub d_voxel: f64,
    pub d_pcept: f64,
    pub d_total: f64,
    pub g_adv: f64,
    pub g_voxel: f64,
    pub g_pm: f64,
    pub g_pcept: f64,
    pub g_total: f64,
}

pub const LOG_HEADER: &str =
    "step,epoch,lr,d_adv,d_voxel,d_pcept,d_total,g_adv,g_voxel,g_pm,g_pcept,g_total";

impl StepLog {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
            self.step,
            self.epoch,
            self.lr,
            self.d_adv,
            self.d_voxel,
            self.d_pcept,
            self.d_total,
            self.g_adv,
            self.g_voxel,
            self.g_pm,
            self.g_pcept,
            self.g_total
        )
    }
}

/// Instrumentation record emitted after each full step.
#[derive(Debug, Clone)]
pub struct StepEvent {
    pub step: u64,
    /// Crop record used to slice the decoder input.
    pub crop_for_decoder: Option<CropRecord>,
    /// Crop record used to build the real-image targets.
    pub crop_for_targets: Option<CropRecord>,
    pub g_hash_after_d_update: u64,
    pub g_hash_after_g_update: u64,
    pub d_hash_after_d_update: u64,
    pub d_hash_after_g_update: u64,
}

pub struct TrainResult {
    pub final_checkpoint: PathBuf,
    pub loss_log_path: PathBuf,
    pub log: Vec<StepLog>,
    pub steps: u64,
}

struct BatchTensors {
    ids: Vec<String>,
    ct: Tensor<f32>,
    frontal: Tensor<f32>,
    lateral: Option<Tensor<f32>>,
}

fn assemble_batch(samples: &[&SampleRecord<f32>], view: ViewMode) -> BatchTensors {
    let n = samples.len();
    let [d, h, w] = samples[0].ct.dhw();
    let mut ct = Tensor::zeros(&[n, 1, d, h, w]);
    let mut frontal = Tensor::zeros(&[n, 1, h, w]);
    let mut lateral = (view == ViewMode::Dual).then(|| Tensor::zeros(&[n, 1, d, h]));
    for (i, s) in samples.iter().enumerate() {
        ct.data_mut()[i * d * h * w..(i + 1) * d * h * w].copy_from_slice(s.ct.data().data());
        frontal.data_mut()[i * h * w..(i + 1) * h * w].copy_from_slice(s.xrays.frontal.data());
        if let Some(lat) = &mut lateral {
            let src = s
                .xrays
                .lateral
                .as_ref()
                .expect("dataset samples are dual-view");
            lat.data_mut()[i * d * h..(i + 1) * d * h].copy_from_slice(src.data());
        }
    }
    BatchTensors {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        ct,
        frontal,
        lateral,
    }
}

fn load_split(manifest_path: &Path, split: Split) -> Result<Vec<SampleRecord<f32>>> {
    let entries = load_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let selected: Vec<&ManifestEntry> = entries.iter().filter(|e| e.split == split).collect();
    let mut out = Vec::with_capacity(selected.len());
    for e in selected {
        out.push(load_sample(dir, e)?);
    }
    Ok(out)
}

fn check_finite_terms(
    step: u64,
    terms: &[(&str, f64)],
    batch_ids: &[String],
    out_dir: &Path,
) -> Result<()> {
    for &(name, v) in terms {
        if !v.is_finite() {
            let diag = serde_json::json!({
                "step": step,
                "term": name,
                "value": format!("{v}"),
                "batch_ids": batch_ids,
            });
            let path = out_dir.join("diagnostic.json");
            let _ = std::fs::write(
                &path,
                serde_json::to_string_pretty(&diag).unwrap_or_default(),
            );
            return Err(Error::NonFinite {
                term: name.into(),
                step,
            });
        }
    }
    Ok(())
}

/// Stateless per-epoch/step randomness.
fn epoch_rng(seed: u64, purpose: u64, epoch: usize) -> SeedRng {
    SeedRng::new(seed).split(purpose).split(epoch as u64)
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub backbone: PerceptualBackbone<f32>,
    adam_g: Adam<f32>,
    adam_d: Adam<f32>,
    train_samples: Vec<SampleRecord<f32>>,
    /// Per-sample target-side backbone features; ground truth never
    /// changes, so these are computed once.
    feat_cache: std::collections::HashMap<String, Vec<Tensor<f32>>>,
    step: u64,
    start_epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let train_samples = load_split(&cfg.manifest, Split::Train)?;
        if train_samples.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let [d, h, w] = train_samples[0].ct.dhw();
        if d != h || h != w {
            return Err(Error::Config(format!(
                "generator requires cubic volumes, got {d}x{h}x{w}"
            )));
        }
        let generator = Generator::new(cfg.generator.clone(), w, cfg.seed)?;
        let disc_cfg = DiscriminatorConfig {
            base_channels: cfg.discriminator_channels,
            channel_cap: cfg.discriminator_cap,
            view_mode: cfg.generator.view_mode,
            with_decoders: cfg.weights.variant != DaeVariant::None,
        };
        let discriminator = Discriminator::new(disc_cfg, cfg.seed ^ 0xd15c)?;
        let backbone = PerceptualBackbone::seeded(cfg.backbone.clone())?;
        let adam_g = Adam::new(&generator.store, cfg.adam_beta1, cfg.adam_beta2);
        let adam_d = Adam::new(&discriminator.store, cfg.adam_beta1, cfg.adam_beta2);
        Ok(Trainer {
            cfg,
            generator,
            discriminator,
            backbone,
            adam_g,
            adam_d,
            train_samples,
            feat_cache: std::collections::HashMap::new(),
            step: 0,
            start_epoch: 0,
        })
    }

    /// Restore a trainer from a checkpoint written by [`Trainer::run`].
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let (meta, tensors) = checkpoint::load(path)?;
        let cfg: TrainConfig = serde_json::from_value(
            meta.get("config")
                .cloned()
                .ok_or_else(|| Error::corrupt(path, "missing config in checkpoint meta"))?,
        )?;
        let mut trainer = Trainer::new(cfg)?;
        let strip = |prefix: &str| -> BTreeMap<String, Tensor<f32>> {
            tensors
                .iter()
                .filter_map(|(k, v)| {
                    k.strip_prefix(prefix)
                        .map(|rest| (rest.to_string(), v.clone()))
                })
                .collect()
        };
        trainer.generator.store.load_values(&strip("g."))?;
        trainer.discriminator.store.load_values(&strip("d."))?;
        let adam_g_t = meta["adam_g_t"].as_u64().unwrap_or(0);
        let adam_d_t = meta["adam_d_t"].as_u64().unwrap_or(0);
        trainer.adam_g.load_state("adam_g", adam_g_t, &tensors)?;
        trainer.adam_d.load_state("adam_d", adam_d_t, &tensors)?;
        trainer.step = meta["step"].as_u64().unwrap_or(0);
        trainer.start_epoch = meta["epoch"].as_u64().unwrap_or(0) as usize;
        Ok(trainer)
    }

    fn save_checkpoint(&self, path: &Path, epoch: usize) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "train",
            "config": self.cfg,
            "epoch": epoch,
            "step": self.step,
            "adam_g_t": self.adam_g.t,
            "adam_d_t": self.adam_d.t,
            "rng_scheme": "per-epoch-derived",
            "input_extent": self.generator.input_extent(),
        });
        let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
        for (name, t) in self.generator.store.iter() {
            tensors.push((format!("g.{name}"), t.clone()));
        }
        for (name, t) in self.discriminator.store.iter() {
            tensors.push((format!("d.{name}"), t.clone()));
        }
        tensors.extend(self.adam_g.state_tensors("adam_g"));
        tensors.extend(self.adam_d.state_tensors("adam_d"));
        let refs: Vec<(String, &Tensor<f32>)> =
            tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        checkpoint::save(path, &meta, &refs)
    }

    /// Cached backbone tap features of `vol` (5D, N=1) under `key`.
    fn cached_features(&mut self, key: String, vol: &Tensor<f32>) -> Vec<Tensor<f32>> {
        if !self.feat_cache.contains_key(&key) {
            let feats = losses::perceptual_target_features(&self.backbone, vol);
            self.feat_cache.insert(key.clone(), feats);
        }
        self.feat_cache[&key].clone()
    }

    /// Target features for a batch, concatenated from the per-sample cache.
    fn batch_target_features(&mut self, batch: &BatchTensors) -> Vec<Tensor<f32>> {
        let s = batch.ct.shape().to_vec();
        let (n, d, h, w) = (s[0], s[2], s[3], s[4]);
        let per_sample: Vec<Vec<Tensor<f32>>> = batch
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let vol = Tensor::from_vec(
                    &[1, 1, d, h, w],
                    batch.ct.data()[i * d * h * w..(i + 1) * d * h * w].to_vec(),
                );
                self.cached_features(format!("ct:{id}"), &vol)
            })
            .collect();
        let n_taps = per_sample[0].len();
        (0..n_taps)
            .map(|t| {
                let tap0 = &per_sample[0][t];
                let mut shape = tap0.shape().to_vec();
                shape[0] *= n;
                let mut data = Vec::with_capacity(shape.iter().product());
                for feats in &per_sample {
                    data.extend_from_slice(feats[t].data());
                }
                Tensor::from_vec(&shape, data)
            })
            .collect()
    }

    /// One discriminator update. Returns (raw adv, reconstruction terms,
    /// weighted total, crop records used for decode and targets).
    fn d_step(
        &mut self,
        batch: &BatchTensors,
        y_hat: &Tensor<f32>,
        lr: f64,
    ) -> Result<(f64, ReconstrTerms, f64, Option<(CropRecord, CropRecord)>)> {
        let w = &self.cfg.weights;
        let mut g = Graph::new();
        let real_ct = g.constant(batch.ct.clone());
        let fake_ct = g.constant(y_hat.clone());
        let real = self.discriminator.forward_graph(
            &mut g,
            real_ct,
            &batch.frontal,
            batch.lateral.as_ref(),
            true,
        )?;
        let fake = self.discriminator.forward_graph(
            &mut g,
            fake_ct,
            &batch.frontal,
            batch.lateral.as_ref(),
            true,
        )?;
        let adv = losses::adv_d_var(&mut g, real.score, fake.score);
        let mut loss_terms = vec![(adv, w.lambda1)];
        let mut recon = ReconstrTerms {
            voxel: 0.0,
            perceptual: 0.0,
        };
        let mut crops = None;
        if w.variant != DaeVariant::None {
            // real-image taps only feed the decoders
            let f1_val = g.value(real.f1).clone();
            let mut crop_rng = epoch_rng(self.cfg.seed, 0xc0_0b, self.step as usize);
            let (_, record) = random_half_crop(&f1_val, &mut crop_rng)?;
            let cropped = g.crop_spatial(real.f1, record.offsets, record.extent);
            let dec_part = self
                .discriminator
                .decode_part_graph(&mut g, cropped, true)?;
            let dec_global = self
                .discriminator
                .decode_global_graph(&mut g, real.f2, true)?;
            let target_record = record.clone();
            let (i_part, i_full) = make_targets(&batch.ct, &target_record)?;
            let t_part = g.constant(i_part);
            let t_full = g.constant(i_full);
            let vox_p = losses::voxel_var(&mut g, dec_part, t_part, w);
            let vox_g = losses::voxel_var(&mut g, dec_global, t_full, w);
            let vox_pair = g.weighted_sum(&[(vox_p, 0.5), (vox_g, 0.5)]);
            loss_terms.push((vox_pair, w.lambda2));
            recon.voxel = g.value(vox_pair).item() as f64;
            if w.variant == DaeVariant::DaeB {
                let pc_p = losses::perceptual_var(&mut g, &self.backbone, dec_part, t_part);
                let pc_g = losses::perceptual_var(&mut g, &self.backbone, dec_global, t_full);
                let pc_pair = g.weighted_sum(&[(pc_p, 0.5), (pc_g, 0.5)]);
                loss_terms.push((pc_pair, w.lambda4));
                recon.perceptual = g.value(pc_pair).item() as f64;
            }
            crops = Some((record, target_record));
        }
        let total = g.weighted_sum(&loss_terms);
        let adv_val = g.value(adv).item() as f64;
        let total_val = g.value(total).item() as f64;
        let grads = g.backward(total);
        self.adam_d
            .step(&mut self.discriminator.store, &grads.by_param, lr);
        Ok((adv_val, recon, total_val, crops))
    }

    /// Generator losses appended to the graph that built `y_hat`; the
    /// discriminator enters frozen (gradients flow through it, not into
    /// it). Applies the Adam update and returns the raw terms and total.
    fn g_update(
        &mut self,
        g: &mut Graph<f32>,
        y_hat: crate::graph::Var,
        batch: &BatchTensors,
        lr: f64,
    ) -> Result<(GeneratorTerms, f64)> {
        let feats_y = self
            .cfg
            .weights
            .g3dpcept_enabled
            .then(|| self.batch_target_features(batch));
        let w = &self.cfg.weights;
        let disc = self.discriminator.forward_graph(
            g,
            y_hat,
            &batch.frontal,
            batch.lateral.as_ref(),
            false,
        )?;
        let y = g.constant(batch.ct.clone());
        let adv = losses::adv_g_var(g, disc.score);
        let voxel = losses::voxel_var(g, y, y_hat, w);
        let pm = losses::projection_var(g, y, y_hat);
        let mut terms = vec![(adv, w.lambda1), (voxel, w.lambda2), (pm, w.lambda3)];
        let mut pcept_val = 0.0;
        if w.g3dpcept_enabled {
            let target_feats = feats_y.expect("features precomputed when g3dpcept is on");
            let pc = losses::perceptual_var_cached(g, &self.backbone, &target_feats, y_hat);
            pcept_val = g.value(pc).item() as f64;
            terms.push((pc, w.lambda4));
        }
        let total = g.weighted_sum(&terms);
        let raw = GeneratorTerms {
            adv: g.value(adv).item() as f64,
            voxel: g.value(voxel).item() as f64,
            projection: g.value(pm).item() as f64,
            perceptual: pcept_val,
        };
        let total_val = g.value(total).item() as f64;
        let grads = g.backward(total);
        self.adam_g
            .step(&mut self.generator.store, &grads.by_param, lr);
        Ok((raw, total_val))
    }

    pub fn run(&mut self, out_dir: &Path) -> Result<TrainResult> {
        self.run_with_observer(out_dir, &mut |_| {})
    }

    pub fn run_with_observer(
        &mut self,
        out_dir: &Path,
        observer: &mut dyn FnMut(StepEvent),
    ) -> Result<TrainResult> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join("loss_log.csv");
        let mut log_file = std::io::BufWriter::new(
            std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?,
        );
        writeln!(log_file, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
        let mut logs = Vec::new();
        let n = self.train_samples.len();
        for epoch in self.start_epoch..self.cfg.epochs {
            let lr = self.cfg.lr_at(epoch);
            let mut order: Vec<usize> = (0..n).collect();
            epoch_rng(self.cfg.seed, 0x5f_1e, epoch).shuffle(&mut order);
            let batches: Vec<Vec<usize>> = match self.cfg.steps_per_epoch {
                None => order
                    .chunks(self.cfg.batch_size)
                    .map(|c| c.to_vec())
                    .collect(),
                Some(k) => {
                    // cycle the shuffled order to fill k batches
                    let mut cycled = Vec::with_capacity(k * self.cfg.batch_size);
                    let mut i = 0;
                    while cycled.len() < k * self.cfg.batch_size {
                        cycled.push(order[i % n]);
                        i += 1;
                    }
                    cycled
                        .chunks(self.cfg.batch_size)
                        .map(|c| c.to_vec())
                        .collect()
                }
            };
            for batch_idx in batches {
                let samples: Vec<&SampleRecord<f32>> =
                    batch_idx.iter().map(|&i| &self.train_samples[i]).collect();
                let batch = assemble_batch(&samples, self.cfg.generator.view_mode);
                // one generator forward per step: its value (detached)
                // feeds the D update, its graph carries the G update run
                // against the just-updated discriminator
                let mut gg = Graph::new();
                let y_hat_var = self.generator.forward_graph(
                    &mut gg,
                    &batch.frontal,
                    batch.lateral.as_ref(),
                    true,
                )?;
                let y_hat_detached = gg.value(y_hat_var).clone();
                let (d_adv, recon, d_total, crops) = self.d_step(&batch, &y_hat_detached, lr)?;
                let g_hash_after_d = self.generator.store.content_hash();
                let d_hash_after_d = self.discriminator.store.content_hash();
                let (g_terms, g_total) = self.g_update(&mut gg, y_hat_var, &batch, lr)?;
                drop(gg);
                observer(StepEvent {
                    step: self.step,
                    crop_for_decoder: crops.as_ref().map(|c| c.0.clone()),
                    crop_for_targets: crops.as_ref().map(|c| c.1.clone()),
                    g_hash_after_d_update: g_hash_after_d,
                    g_hash_after_g_update: self.generator.store.content_hash(),
                    d_hash_after_d_update: d_hash_after_d,
                    d_hash_after_g_update: self.discriminator.store.content_hash(),
                });
                let row = StepLog {
                    step: self.step,
                    epoch,
                    lr,
                    d_adv,
                    d_voxel: recon.voxel,
                    d_pcept: recon.perceptual,
                    d_total,
                    g_adv: g_terms.adv,
                    g_voxel: g_terms.voxel,
                    g_pm: g_terms.projection,
                    g_pcept: g_terms.perceptual,
                    g_total,
                };
                check_finite_terms(
                    self.step,
                    &[
                        ("d_adv", row.d_adv),
                        ("d_voxel", row.d_voxel),
                        ("d_pcept", row.d_pcept),
                        ("d_total", row.d_total),
                        ("g_adv", row.g_adv),
                        ("g_voxel", row.g_voxel),
                        ("g_pm", row.g_pm),
                        ("g_pcept", row.g_pcept),
                        ("g_total", row.g_total),
                    ],
                    &batch.ids,
                    out_dir,
                )?;
                writeln!(log_file, "{}", row.csv_row()).map_err(|e| Error::io(&log_path, e))?;
                logs.push(row);
                self.step += 1;
            }
            log_file.flush().map_err(|e| Error::io(&log_path, e))?;
            let is_last = epoch + 1 == self.cfg.epochs;
            if is_last
                || (self.cfg.checkpoint_every > 0 && (epoch + 1) % self.cfg.checkpoint_every == 0)
            {
                let path = out_dir.join(format!("ckpt_{}", epoch + 1));
                self.save_checkpoint(&path, epoch + 1)?;
            }
        }
        Ok(TrainResult {
            final_checkpoint: out_dir.join(format!("ckpt_{}", self.cfg.epochs)),
            loss_log_path: log_path,
            log: logs,
            steps: self.step,
        })
    }
}

/// Run a training job from a config.
pub fn train(cfg: TrainConfig, out_dir: &Path) -> Result<TrainResult> {
    Trainer::new(cfg)?.run(out_dir)
}

// ---------------------------------------------------------------------------
// loss-scale audit
// ---------------------------------------------------------------------------

/// Epoch-0 magnitudes of the voxel and perceptual reconstruction terms,
/// their order-of-magnitude ratios on the weighted scale, and pass/fail
/// for the two balance principles:
/// 1. the weighted generator and discriminator voxel terms sit within
///    one order of magnitude of each other;
/// 2. the weighted discriminator voxel and perceptual terms do too.
/// `drift` flags weighted terms displaced >= 1 order from the default
/// weighting (the report never fails to emit).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub raw_g_voxel: f64,
    pub raw_d_voxel: f64,
    pub raw_d_pcept: f64,
    pub weighted_g_voxel: f64,
    pub weighted_d_voxel: f64,
    pub weighted_d_pcept: f64,
    pub ratio_p1: f64,
    pub ratio_p2: f64,
    pub principle1_pass: bool,
    pub principle2_pass: bool,
    pub drift: Vec<String>,
}

impl AuditReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "epoch-0 audit\n  raw: g_voxel {:.4e}  d_voxel {:.4e}  d_pcept {:.4e}\n  weighted: g_voxel {:.4e}  d_voxel {:.4e}  d_pcept {:.4e}\n  principle 1 (g_voxel vs d_voxel): log10 ratio {:+.3} -> {}\n  principle 2 (d_voxel vs d_pcept): log10 ratio {:+.3} -> {}\n",
            self.raw_g_voxel,
            self.raw_d_voxel,
            self.raw_d_pcept,
            self.weighted_g_voxel,
            self.weighted_d_voxel,
            self.weighted_d_pcept,
            self.ratio_p1,
            if self.principle1_pass { "PASS" } else { "FAIL" },
            self.ratio_p2,
            if self.principle2_pass { "PASS" } else { "FAIL" },
        );
        if self.drift.is_empty() {
            s.push_str("  drift: none\n");
        } else {
            for d in &self.drift {
                s.push_str(&format!("  drift: {d}\n"));
            }
        }
        s
    }
}

/// Audit a freshly initialized model pair on one seeded batch.
pub fn loss_scale_audit(
    generator: &Generator<f32>,
    discriminator: &Discriminator<f32>,
    backbone: &PerceptualBackbone<f32>,
    batch_ct: &Tensor<f32>,
    frontal: &Tensor<f32>,
    lateral: Option<&Tensor<f32>>,
    weights: &LossWeights,
    rng: &mut SeedRng,
) -> Result<AuditReport> {
    let y_hat = generator.forward_batch(frontal, lateral)?;
    let raw_g_voxel = voxel_loss(batch_ct, &y_hat)?;
    let real = discriminator.discriminate(batch_ct, frontal, lateral, TapSource::Real)?;
    let (cropped, record) = random_half_crop(&real.f1, rng)?;
    let dec_part = discriminator.decode_part(&cropped, TapSource::Real)?;
    let dec_global = discriminator.decode_global(&real.f2, TapSource::Real)?;
    let (i_part, i_full) = make_targets(batch_ct, &record)?;
    let terms = losses::d_reconstr_terms((&dec_part, &i_part), (&dec_global, &i_full), backbone)?;
    let weighted_g_voxel = weights.lambda2 * raw_g_voxel;
    let weighted_d_voxel = weights.lambda2 * terms.voxel;
    let weighted_d_pcept = weights.lambda4 * terms.perceptual;
    let ratio_p1 = (weighted_g_voxel / weighted_d_voxel).log10();
    let ratio_p2 = (weighted_d_voxel / weighted_d_pcept).log10();
    let defaults = LossWeights::default();
    let mut drift = Vec::new();
    for (name, l, l0) in [
        ("lambda1 (adversarial)", weights.lambda1, defaults.lambda1),
        (
            "lambda2 (voxel reconstruction)",
            weights.lambda2,
            defaults.lambda2,
        ),
        ("lambda3 (projection)", weights.lambda3, defaults.lambda3),
        (
            "lambda4 (perceptual reconstruction)",
            weights.lambda4,
            defaults.lambda4,
        ),
    ] {
        let shift = (l / l0).log10();
        if shift.abs() >= 1.0 {
            drift.push(format!(
                "{name} weighted magnitude shifted {shift:+.2} orders vs default weighting"
            ));
        }
    }
    Ok(AuditReport {
        raw_g_voxel,
        raw_d_voxel: terms.voxel,
        raw_d_pcept: terms.perceptual,
        weighted_g_voxel,
        weighted_d_voxel,
        weighted_d_pcept,
        ratio_p1,
        ratio_p2,
        principle1_pass: ratio_p1.abs() <= 1.0,
        principle2_pass: ratio_p2.abs() <= 1.0,
        drift,
    })
}

/// Build the audit inputs from a config: fresh models plus the first
/// seeded training batch.
pub fn audit_from_config(cfg: &TrainConfig) -> Result<AuditReport> {
    cfg.validate()?;
    let samples = load_split(&cfg.manifest, Split::Train)?;
    if samples.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let [.., w] = samples[0].ct.dhw();
    let generator = Generator::new(cfg.generator.clone(), w, cfg.seed)?;
    let disc_cfg = DiscriminatorConfig {
        base_channels: cfg.discriminator_channels,
        channel_cap: cfg.discriminator_cap,
        view_mode: cfg.generator.view_mode,
        with_decoders: true,
    };
    let discriminator = Discriminator::new(disc_cfg, cfg.seed ^ 0xd15c)?;
    let backbone = PerceptualBackbone::seeded(cfg.backbone.clone())?;
    let take = cfg.batch_size.min(samples.len());
    let refs: Vec<&SampleRecord<f32>> = samples.iter().take(take).collect();
    let batch = assemble_batch(&refs, cfg.generator.view_mode);
    let mut rng = SeedRng::new(cfg.seed).split(0xa0d1);
    loss_scale_audit(
        &generator,
        &discriminator,
        &backbone,
        &batch.ct,
        &batch.frontal,
        batch.lateral.as_ref(),
        &cfg.weights,
        &mut rng,
    )
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

pub enum EvalModel<'a> {
    Generator(&'a Generator<f32>),
    /// Test hook: score the ground truth against itself.
    IdentityHook,
}

pub fn evaluate(
    model: &EvalModel,
    manifest_path: &Path,
    split: Split,
    backbone: &PerceptualBackbone<f32>,
) -> Result<MetricReport> {
    let samples = load_split(manifest_path, split)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("split {split:?} is empty")));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in &samples {
        let y_hat = match model {
            EvalModel::IdentityHook => s.ct.data().clone(),
            EvalModel::Generator(g) => {
                let xrays = match g.cfg.view_mode {
                    ViewMode::Single => s.xrays.to_single(),
                    ViewMode::Dual => s.xrays.clone(),
                };
                g.forward_pair(&xrays)?
            }
        };
        rows.push(evaluate_pair(&s.id, s.ct.data(), &y_hat, backbone)?);
    }
    MetricReport::from_samples(rows)
}

/// Rebuild the generator (and backbone) recorded in a training checkpoint.
pub fn load_generator(path: &Path) -> Result<(Generator<f32>, TrainConfig)> {
    let (meta, tensors) = checkpoint::load(path)?;
    let cfg: TrainConfig = serde_json::from_value(
        meta.get("config")
            .cloned()
            .ok_or_else(|| Error::corrupt(path, "missing config in checkpoint meta"))?,
    )?;
    let extent = meta["input_extent"]
        .as_u64()
        .ok_or_else(|| Error::corrupt(path, "missing input_extent"))? as usize;
    let mut generator = Generator::new(cfg.generator.clone(), extent, cfg.seed)?;
    let g_tensors: BTreeMap<String, Tensor<f32>> = tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("g.").map(|r| (r.to_string(), v.clone())))
        .collect();
    generator.store.load_values(&g_tensors)?;
    Ok((generator, cfg))
}

/// Rebuild the discriminator recorded in a training checkpoint.
pub fn load_discriminator(path: &Path) -> Result<Discriminator<f32>> {
    let (meta, tensors) = checkpoint::load(path)?;
    let cfg: TrainConfig = serde_json::from_value(
        meta.get("config")
            .cloned()
            .ok_or_else(|| Error::corrupt(path, "missing config"))?,
    )?;
    let disc_cfg = DiscriminatorConfig {
        base_channels: cfg.discriminator_channels,
        channel_cap: cfg.discriminator_cap,
        view_mode: cfg.generator.view_mode,
        with_decoders: cfg.weights.variant != DaeVariant::None,
    };
    let mut d = Discriminator::new(disc_cfg, cfg.seed ^ 0xd15c)?;
    let d_tensors: BTreeMap<String, Tensor<f32>> = tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("d.").map(|r| (r.to_string(), v.clone())))
        .collect();
    d.store.load_values(&d_tensors)?;
    Ok(d)
}

// ---------------------------------------------------------------------------
// ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub variant: DaeVariant,
    pub g3dpcept: bool,
    pub sgg: bool,
}

/// The component grid: baseline, each mechanism alone, and the full stack.
pub fn default_ablation_grid() -> Vec<AblationVariant> {
    vec![
        AblationVariant {
            name: "baseline".into(),
            variant: DaeVariant::None,
            g3dpcept: false,
            sgg: false,
        },
        AblationVariant {
            name: "dae-a".into(),
            variant: DaeVariant::DaeA,
            g3dpcept: false,
            sgg: false,
        },
        AblationVariant {
            name: "dae-b".into(),
            variant: DaeVariant::DaeB,
            g3dpcept: false,
            sgg: false,
        },
        AblationVariant {
            name: "g3dpcept".into(),
            variant: DaeVariant::None,
            g3dpcept: true,
            sgg: false,
        },
        AblationVariant {
            name: "sgg".into(),
            variant: DaeVariant::None,
            g3dpcept: false,
            sgg: true,
        },
        AblationVariant {
            name: "dae-b+g3dpcept+sgg".into(),
            variant: DaeVariant::DaeB,
            g3dpcept: true,
            sgg: true,
        },
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub variant: DaeVariant,
    pub g3dpcept: bool,
    pub sgg: bool,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub lpips_mean: f64,
    pub lpips_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn text(&self) -> String {
        let mut s = format!(
            "{:<22} {:>6} {:>9} {:>5} {:>16} {:>16}\n",
            "variant", "dae", "g3dpcept", "sgg", "psnr(dB)", "lpips(x100)"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<22} {:>6} {:>9} {:>5} {:>9.3}±{:<6.3} {:>9.3}±{:<6.3}\n",
                r.name,
                match r.variant {
                    DaeVariant::None => "-",
                    DaeVariant::DaeA => "A",
                    DaeVariant::DaeB => "B",
                },
                r.g3dpcept,
                r.sgg,
                r.psnr_mean,
                r.psnr_std,
                r.lpips_mean,
                r.lpips_std
            ));
        }
        s
    }
}

/// Apply a variant's flags to a base config.
pub fn variant_config(base: &TrainConfig, v: &AblationVariant) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.weights.variant = v.variant;
    cfg.weights.g3dpcept_enabled = v.g3dpcept;
    cfg.generator.sgg_enabled = v.sgg;
    cfg
}

/// Train and evaluate every variant with shared seed and data.
pub fn run_ablation(
    base: &TrainConfig,
    grid: &[AblationVariant],
    out_dir: &Path,
) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(grid.len());
    for v in grid {
        let cfg = variant_config(base, v);
        let run_dir = out_dir.join(&v.name);
        let mut trainer = Trainer::new(cfg)?;
        trainer.run(&run_dir)?;
        let report = evaluate(
            &EvalModel::Generator(&trainer.generator),
            &trainer.cfg.manifest,
            Split::Test,
            &trainer.backbone,
        )?;
        rows.push(AblationRow {
            name: v.name.clone(),
            variant: v.variant,
            g3dpcept: v.g3dpcept,
            sgg: v.sgg,
            psnr_mean: report.aggregate.psnr_db.mean,
            psnr_std: report.aggregate.psnr_db.std,
            lpips_mean: report.aggregate.lpips.mean,
            lpips_std: report.aggregate.lpips.std,
        });
    }
    let table = AblationTable { rows };
    let json_path = out_dir.join("ablation.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&table)?)
        .map_err(|e| Error::io(&json_path, e))?;
    Ok(table)
}
