//! Mini-batch SGD for the baseline and every ablation mode.
//!
//! Per-sample objectives, with `f`/`l` the former/latter embeddings:
//!
//! | mode          | edit pair | crop pair         | hard-negative pair        |
//! |---------------|-----------|-------------------|---------------------------|
//! | baseline      | M         | -                 | -                         |
//! | triplet       | λM + T    | -                 | -                         |
//! | asl-crop      | λM        | ratio(f→l) + λM   | -                         |
//! | asl-negative  | λM        | λM                | ratio(l→f) + λM, split    |
//! | asl-positive  | λM        | λM                | ratio(l→f) + λM, shared   |
//! | asl-full      | λM        | ratio(f→l) + λM   | ratio(l→f) + λM, shared   |
//!
//! `M` is CosFace averaged over both members, `T` the triplet loss with the
//! next sample's latter as negative. "split"/"shared" is the class given to the
//! latter of a hard-negative pair.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::descriptor::{norm, ImageId};
use crate::encoder::{self, init_params, Dims, EncoderParams, Grads};
use crate::error::{Error, Result};
use crate::objectives::{asl_loss, cosface_loss, triplet_loss, LossConfig};
use crate::rng::{self, domain, Rng};
use crate::synth::{
    self, basic_edit, crop_copy, gen_image_sized, Dataset, DatasetManifest, ToyImage, Window, CROP_SCHEDULE,
    HELDOUT_ID_BASE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Baseline,
    AslCrop,
    AslNegative,
    AslPositive,
    Triplet,
    AslFull,
}

impl TrainMode {
    pub const ALL: [TrainMode; 6] = [
        TrainMode::Baseline,
        TrainMode::AslCrop,
        TrainMode::AslNegative,
        TrainMode::AslPositive,
        TrainMode::Triplet,
        TrainMode::AslFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::AslCrop => "asl-crop",
            TrainMode::AslNegative => "asl-negative",
            TrainMode::AslPositive => "asl-positive",
            TrainMode::Triplet => "triplet",
            TrainMode::AslFull => "asl-full",
        }
    }

    pub fn uses_crop_ladders(self) -> bool {
        matches!(
            self,
            TrainMode::AslCrop | TrainMode::AslNegative | TrainMode::AslPositive | TrainMode::AslFull
        )
    }

    pub fn uses_hard_negatives(self) -> bool {
        matches!(
            self,
            TrainMode::AslNegative | TrainMode::AslPositive | TrainMode::AslFull
        )
    }

    pub fn ratio_on_crops(self) -> bool {
        matches!(self, TrainMode::AslCrop | TrainMode::AslFull)
    }

    pub fn ratio_on_hard_negatives(self) -> bool {
        self.uses_hard_negatives()
    }

    /// Whether the latter of a hard-negative pair is a positive of the former
    /// for the metric term.
    pub fn hard_negative_shares_class(self) -> bool {
        matches!(self, TrainMode::AslPositive | TrainMode::AslFull)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = TrainMode::ALL.iter().map(|m| m.name()).collect();
            Error::config("mode", format!("unknown mode `{s}`; valid: {}", valid.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Share of each batch drawn from hard-negative pairs, in modes that use
    /// them.
    pub hard_negative_fraction: f64,
    /// Chance that a regular sample is a crop pair rather than an edit pair,
    /// in modes with crop ladders.
    pub crop_fraction: f64,
    pub hidden: usize,
    pub dim: usize,
    /// Size of the held-out crop-pair probe logged every epoch.
    pub heldout_pairs: usize,
    /// Rescale any batch gradient whose global L2 norm exceeds this.
    pub max_grad_norm: Option<f64>,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::AslFull,
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            hard_negative_fraction: 0.25,
            crop_fraction: 0.5,
            hidden: 128,
            dim: 32,
            heldout_pairs: 100,
            max_grad_norm: Some(1.0),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be a finite value ≥ 0"));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be ≥ 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be ≥ 2"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be ≥ 0"));
        }
        if !(0.0..1.0).contains(&self.hard_negative_fraction) {
            return Err(Error::config("hard_negative_fraction", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.crop_fraction) {
            return Err(Error::config("crop_fraction", "must lie in [0, 1]"));
        }
        if self.hidden < 1 || self.dim < 1 {
            return Err(Error::config("hidden/dim", "must be ≥ 1"));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::config("max_grad_norm", "must be a finite value > 0"));
            }
        }
        self.loss.validate()
    }

    fn hard_per_batch(&self) -> usize {
        if self.mode.uses_hard_negatives() {
            ((self.hard_negative_fraction * self.batch_size as f64).round() as usize).min(self.batch_size - 1)
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassAssignment {
    pub classes: BTreeMap<ImageId, usize>,
    pub num_classes: usize,
}

impl ClassAssignment {
    pub fn class_of(&self, id: ImageId) -> usize {
        self.classes[&id]
    }
}

/// One class per base training image; crops and edits inherit their source's
/// class. Hard-negative pairs only get classes in modes that train on them.
pub fn assign_classes(manifest: &DatasetManifest, mode: TrainMode) -> ClassAssignment {
    let mut classes = BTreeMap::new();
    let mut next = 0;
    for id in manifest.train_base_images() {
        classes.insert(id, next);
        next += 1;
    }
    if mode.uses_hard_negatives() {
        for (former, latter) in manifest.train_hard_negative_pairs() {
            let cf = *classes.entry(former).or_insert_with(|| {
                next += 1;
                next - 1
            });
            if mode.hard_negative_shares_class() {
                classes.insert(latter, cf);
            } else {
                classes.entry(latter).or_insert_with(|| {
                    next += 1;
                    next - 1
                });
            }
        }
    }
    ClassAssignment {
        classes,
        num_classes: next,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleRelation {
    /// Base image and a basic edit of it.
    BasicEdit,
    /// Two nested crops from one ladder; the former is the larger.
    CropCopy {
        former_scale: f64,
        latter_scale: f64,
    },
    HardNegativeDirected,
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub former: ToyImage,
    pub latter: ToyImage,
    pub relation: SampleRelation,
    pub class_former: usize,
    pub class_latter: usize,
}

/// Nested ladder windows over the crop schedule, outermost first.
pub fn crop_ladder(rng: &mut Rng) -> Vec<Window> {
    let mut ladder = vec![Window::FULL];
    for step in CROP_SCHEDULE.windows(2) {
        let relative = Window::random(rng, step[1] / step[0]);
        let outer = *ladder.last().expect("non-empty");
        ladder.push(outer.compose(&relative));
    }
    ladder
}

fn crop_pair(rng: &mut Rng, img: &ToyImage) -> Result<(ToyImage, ToyImage, SampleRelation)> {
    let turns = rng.gen_range(0..4);
    let mut img = if rng.gen_bool(0.5) {
        synth::hflip(img)
    } else {
        img.clone()
    };
    for _ in 0..turns {
        img = synth::rotate90(&img);
    }
    let img = &img;
    let ladder = crop_ladder(rng);
    let k = rng.gen_range(0..ladder.len() - 1);
    let (a, b) = (ladder[k], ladder[k + 1]);
    let former = crop_copy(img, a.scale, (a.x, a.y), rng.gen())?;
    let latter = crop_copy(img, b.scale, (b.x, b.y), rng.gen())?;
    Ok((
        former,
        latter,
        SampleRelation::CropCopy {
            former_scale: a.scale,
            latter_scale: b.scale,
        },
    ))
}

/// Draws one batch. Deterministic given the rng state.
pub fn sample_batch(
    rng: &mut Rng,
    dataset: &Dataset,
    classes: &ClassAssignment,
    config: &TrainConfig,
) -> Result<Vec<TrainSample>> {
    let base = dataset.manifest.train_base_images();
    if base.is_empty() {
        return Err(Error::config("dataset", "no base training images"));
    }
    let pairs = if config.mode.uses_hard_negatives() {
        dataset.manifest.train_hard_negative_pairs()
    } else {
        Vec::new()
    };
    let n_hard = if pairs.is_empty() { 0 } else { config.hard_per_batch() };
    let mut batch = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size - n_hard {
        let id = base[rng.gen_range(0..base.len())];
        let img = dataset.image(id);
        let class = classes.class_of(id);
        let (former, latter, relation) = if config.mode.uses_crop_ladders() && rng.gen_bool(config.crop_fraction) {
            crop_pair(rng, img)?
        } else {
            let seed: u64 = rng.gen();
            (img.clone(), basic_edit(img, seed), SampleRelation::BasicEdit)
        };
        batch.push(TrainSample {
            former,
            latter,
            relation,
            class_former: class,
            class_latter: class,
        });
    }
    for _ in 0..n_hard {
        let (f, l) = pairs[rng.gen_range(0..pairs.len())];
        batch.push(TrainSample {
            former: dataset.image(f).clone(),
            latter: dataset.image(l).clone(),
            relation: SampleRelation::HardNegativeDirected,
            class_former: classes.class_of(f),
            class_latter: classes.class_of(l),
        });
    }
    Ok(batch)
}

/// Counters for auditing which terms a run actually evaluated.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TrainStats {
    pub edit_samples: u64,
    pub crop_samples: u64,
    pub hard_negative_samples: u64,
    pub ratio_terms_on_crops: u64,
    pub ratio_terms_on_hard_negatives: u64,
    /// Hard-negative ratio terms whose numerator was the latter / the former.
    pub hard_negative_ratio_latter_numerator: u64,
    pub hard_negative_ratio_former_numerator: u64,
    pub triplet_terms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub mean_ratio_heldout: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub log: Vec<EpochLog>,
    pub stats: TrainStats,
    pub classes: ClassAssignment,
}

fn add_into(dst: &mut [f64], src: &[f64], w: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += w * s;
    }
}

/// Mean loss over the batch and its gradient with respect to every parameter.
pub fn batch_loss_and_grads(
    params: &EncoderParams,
    batch: &[TrainSample],
    mode: TrainMode,
    loss: &LossConfig,
    stats: &mut TrainStats,
) -> Result<(f64, Grads)> {
    let dims = params.dims();
    let n = batch.len();
    let images = batch.iter().flat_map(|s| [&s.former, &s.latter]);
    let x = encoder::stack_images(images, dims, params.flatten)?;
    let (emb, tape) = encoder::forward_batch(params, x)?;
    let mut upstream = Array2::<f64>::zeros((2 * n, dims.dim));
    let mut proxy_grad = Array2::<f64>::zeros(params.proxies.dim());
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    let metric_weight = if mode == TrainMode::Baseline { 1.0 } else { loss.lambda };
    let (s, m) = (loss.cosface_scale, loss.cosface_margin);

    for (i, sample) in batch.iter().enumerate() {
        let f = emb.row(2 * i).to_vec();
        let l = emb.row(2 * i + 1).to_vec();
        let ratio_applies = match sample.relation {
            SampleRelation::BasicEdit => {
                stats.edit_samples += 1;
                false
            }
            SampleRelation::CropCopy { .. } => {
                stats.crop_samples += 1;
                mode.ratio_on_crops()
            }
            SampleRelation::HardNegativeDirected => {
                stats.hard_negative_samples += 1;
                mode.ratio_on_hard_negatives()
            }
        };
        let (value, gf, gl, gp) = if ratio_applies {
            let cfg = LossConfig {
                lambda: metric_weight,
                ..*loss
            };
            if sample.relation == SampleRelation::HardNegativeDirected {
                // The latter is not a copy of the former: push R(l -> f) above 1.
                stats.ratio_terms_on_hard_negatives += 1;
                stats.hard_negative_ratio_latter_numerator += 1;
                let a = asl_loss(
                    &l,
                    &f,
                    sample.class_latter,
                    sample.class_former,
                    params.proxies.view(),
                    &cfg,
                )?;
                (a.value, a.grad_j, a.grad_i, a.grad_proxies)
            } else {
                stats.ratio_terms_on_crops += 1;
                let a = asl_loss(
                    &f,
                    &l,
                    sample.class_former,
                    sample.class_latter,
                    params.proxies.view(),
                    &cfg,
                )?;
                (a.value, a.grad_i, a.grad_j, a.grad_proxies)
            }
        } else {
            let cf = cosface_loss(&f, sample.class_former, params.proxies.view(), s, m)?;
            let cl = cosface_loss(&l, sample.class_latter, params.proxies.view(), s, m)?;
            let w = 0.5 * metric_weight;
            let mut gf = cf.grad_x;
            gf.iter_mut().for_each(|g| *g *= w);
            let mut gl = cl.grad_x;
            gl.iter_mut().for_each(|g| *g *= w);
            (
                w * (cf.value + cl.value),
                gf,
                gl,
                (cf.grad_proxies + cl.grad_proxies) * w,
            )
        };
        total += value;
        add_into(upstream.row_mut(2 * i).as_slice_mut().expect("contiguous"), &gf, inv_n);
        add_into(
            upstream.row_mut(2 * i + 1).as_slice_mut().expect("contiguous"),
            &gl,
            inv_n,
        );
        proxy_grad.scaled_add(inv_n, &gp);

        if mode == TrainMode::Triplet {
            stats.triplet_terms += 1;
            let j = (i + 1) % n;
            let neg = emb.row(2 * j + 1).to_vec();
            let t = triplet_loss(&f, &l, &neg, loss.triplet_margin)?;
            total += t.value;
            add_into(
                upstream.row_mut(2 * i).as_slice_mut().expect("contiguous"),
                &t.grad_anchor,
                inv_n,
            );
            add_into(
                upstream.row_mut(2 * i + 1).as_slice_mut().expect("contiguous"),
                &t.grad_positive,
                inv_n,
            );
            add_into(
                upstream.row_mut(2 * j + 1).as_slice_mut().expect("contiguous"),
                &t.grad_negative,
                inv_n,
            );
        }
    }
    let mut grads = encoder::backward_batch(params, &tape, upstream.view())?;
    grads.proxies = proxy_grad;
    Ok((total * inv_n, grads))
}

/// SGD with momentum and L2 weight decay, applied to every tensor.
pub fn sgd_step(params: &mut EncoderParams, velocity: &mut Grads, grads: &Grads, cfg: &TrainConfig) {
    for ((p, v), g) in params
        .tensors_mut()
        .into_iter()
        .zip(velocity.tensors_mut())
        .zip(grads.tensors())
    {
        for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *pi;
            *pi -= cfg.lr * *vi;
        }
    }
}

/// Fresh scenes (outside every dataset id block) paired with one crop each,
/// at a scale drawn from the crop schedule below 1.
pub fn heldout_crop_pairs(seed: u64, count: usize, size: usize) -> Result<Vec<(ToyImage, ToyImage)>> {
    (0..count as u64)
        .map(|i| {
            let mut rng = rng::stream(seed, domain::HELDOUT, i);
            let full = gen_image_sized(seed, ImageId(HELDOUT_ID_BASE + i), size);
            let scale = CROP_SCHEDULE[rng.gen_range(1..CROP_SCHEDULE.len())];
            let w = Window::random(&mut rng, scale);
            let crop = crop_copy(&full, w.scale, (w.x, w.y), rng.gen())?;
            Ok((full, crop))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioProbe {
    /// Mean of `‖f(reference)‖ / ‖f(crop)‖`.
    pub mean_ratio: f64,
    /// Share of pairs with `‖f(reference)‖ > ‖f(crop)‖`.
    pub ordered_fraction: f64,
    pub max_norm: f64,
}

pub fn probe_ratios(params: &EncoderParams, pairs: &[(ToyImage, ToyImage)]) -> Result<RatioProbe> {
    if pairs.is_empty() {
        return Ok(RatioProbe {
            mean_ratio: f64::NAN,
            ordered_fraction: f64::NAN,
            max_norm: 0.0,
        });
    }
    let images: Vec<&ToyImage> = pairs.iter().flat_map(|(a, b)| [a, b]).collect();
    let emb = encoder::embed(params, &images)?;
    let mut sum = 0.0;
    let mut ordered = 0usize;
    let mut max_norm = 0.0f64;
    for i in 0..pairs.len() {
        let nr = norm(emb.row(2 * i).as_slice().expect("contiguous"));
        let nc = norm(emb.row(2 * i + 1).as_slice().expect("contiguous"));
        max_norm = max_norm.max(nr).max(nc);
        sum += if nc > 0.0 { nr / nc } else { f64::INFINITY };
        if nr > nc {
            ordered += 1;
        }
    }
    Ok(RatioProbe {
        mean_ratio: sum / pairs.len() as f64,
        ordered_fraction: ordered as f64 / pairs.len() as f64,
        max_norm,
    })
}

pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let classes = assign_classes(&dataset.manifest, config.mode);
    if classes.num_classes == 0 {
        return Err(Error::config("dataset", "no base training images"));
    }
    let size = dataset.image_size();
    let dims = Dims {
        height: size,
        width: size,
        hidden: config.hidden,
        dim: config.dim,
        classes: classes.num_classes,
    };
    let params = init_params(config.seed, dims);
    train_from(config, dataset, classes, params)
}

/// Runs the loop from given initial parameters.
pub fn train_from(
    config: &TrainConfig,
    dataset: &Dataset,
    classes: ClassAssignment,
    mut params: EncoderParams,
) -> Result<TrainOutcome> {
    config.validate()?;
    let dims = params.dims();
    if dims.classes != classes.num_classes {
        return Err(Error::ShapeMismatch {
            expected: format!("{} proxies", classes.num_classes),
            found: format!("{}", dims.classes),
        });
    }
    let mut velocity = Grads::zeros(dims);
    let mut rng = rng::stream(config.seed, domain::BATCH, 0);
    let heldout = heldout_crop_pairs(config.seed, config.heldout_pairs, dims.height)?;
    let regular_per_batch = config.batch_size
        - if dataset.manifest.train_hard_negative_pairs().is_empty() {
            0
        } else {
            config.hard_per_batch()
        };
    let n_base = dataset.manifest.train_base_images().len();
    let batches_per_epoch = n_base.div_ceil(regular_per_batch).max(1);
    let mut stats = TrainStats::default();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..batches_per_epoch {
            let batch = sample_batch(&mut rng, dataset, &classes, config)?;
            let (loss, mut grads) = batch_loss_and_grads(&params, &batch, config.mode, &config.loss, &mut stats)?;
            if !loss.is_finite() {
                return Err(Error::DivergenceDetected { epoch });
            }
            if let Some(limit) = config.max_grad_norm {
                let g = grads.l2_norm();
                if g > limit {
                    grads.scale(limit / g);
                }
            }
            epoch_loss += loss;
            sgd_step(&mut params, &mut velocity, &grads, config);
        }
        if !params.is_finite() {
            return Err(Error::DivergenceDetected { epoch });
        }
        let probe = probe_ratios(&params, &heldout)?;
        log.push(EpochLog {
            epoch,
            loss: epoch_loss / batches_per_epoch as f64,
            mean_ratio_heldout: probe.mean_ratio,
        });
    }
    Ok(TrainOutcome {
        params,
        log,
        stats,
        classes,
    })
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch,loss,mean_ratio_heldout\n");
    for e in log {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.mean_ratio_heldout));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
