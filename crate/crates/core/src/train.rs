//! Two-stage training, indexing, and the evaluation pipeline.
//!
//! The prompt stage fits the prompt context and background embedding to the
//! pseudo masks with the encoder frozen. The joint stage initialises the
//! memory bank from fixed stripes, then trains everything except the prompt
//! context; after each optimizer step the bank absorbs the detached region
//! features whose discrimination score clears the admission threshold.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::config::{vocabulary_for, Config, RegionMode};
use crate::data::{apply_plan, augment, AugmentParams, AugmentPlan, DatasetSplit, Image, PkSampler, Sample};
use crate::error::{Error, Result};
use crate::matching::{evaluate, Metrics, RetrievalEntry, RetrievalIndex};
use crate::model::{derive_seed, named_gradients, Model, Stage};
use crate::objective::{total_loss_on_graph, ObjectiveInputs};
use crate::optim::{Adam, StepSchedule};
use crate::params::Binder;
use crate::prototypes::PrototypeSet;
use crate::ram::MemoryBank;
use crate::rgm::pixel_accuracy;
use crate::tensor::Matrix;

/// Images per inference batch.
const EVAL_BATCH: usize = 64;

/// One training step, handed to the caller's logger.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub stage: &'static str,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub parts: Vec<(String, f64)>,
    /// Per-class count of features admitted into the memory bank.
    pub admitted: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptReport {
    /// Mean segmentation loss over the un-augmented training split.
    pub initial_seg: f64,
    pub final_seg: f64,
    /// Mean per-step segmentation loss of each epoch.
    pub epoch_seg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
    /// Features admitted into each class center over the whole run.
    pub admitted: Vec<usize>,
}

fn plain_params(pad: usize) -> AugmentParams {
    AugmentParams {
        pad,
        flip_prob: 0.0,
        erase_prob: 0.0,
        ..AugmentParams::default()
    }
}

/// Resizes a sample to the model input without any randomness.
pub fn prepare_eval(sample: &Sample, size: (usize, usize)) -> Result<Sample> {
    if (sample.image.height(), sample.image.width()) == size {
        return Ok(sample.clone());
    }
    apply_plan(sample, size, &plain_params(0), &AugmentPlan::identity(0))
}

fn prepare_batch(
    split: &DatasetSplit,
    indices: &[usize],
    config: &Config,
    params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sample>> {
    let size = config.image_size();
    indices
        .iter()
        .map(|&i| {
            let s = &split.samples()[i];
            if config.augment {
                augment(s, size, params, rng)
            } else {
                prepare_eval(s, size)
            }
        })
        .collect()
}

/// Pixel targets at feature resolution for every sample, concatenated.
fn seg_targets(samples: &[Sample], grid: (usize, usize), classes: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len() * grid.0 * grid.1);
    for s in samples {
        let m = s
            .pseudo_mask
            .as_ref()
            .ok_or_else(|| Error::Missing(format!("pseudo mask for {}", describe(s))))?;
        let m = m.resample_nearest(grid.0, grid.1);
        if let Some(&bad) = m.as_slice().iter().find(|&&l| l as usize > classes) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                classes,
            });
        }
        out.extend(m.to_targets());
    }
    Ok(out)
}

fn describe(s: &Sample) -> String {
    s.source
        .clone()
        .unwrap_or_else(|| format!("person {} camera {}", s.person_id, s.camera_id))
}

fn guard(value: f64, epoch: usize, step: usize, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            step,
            detail: format!("{what} is {value}"),
        })
    }
}

/// Mean segmentation loss of the model's masks over a split.
pub fn mean_seg_loss(model: &Model, split: &DatasetSplit) -> Result<f64> {
    let size = model.config.image_size();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in split.samples().chunks(EVAL_BATCH) {
        let samples = chunk.iter().map(|s| prepare_eval(s, size)).collect::<Result<Vec<_>>>()?;
        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let mut g = Graph::new();
        let mut binder = Binder::new(&mut g);
        let vars = model.bind(&mut binder, Stage::Inference)?;
        let fwd = model.forward(&mut g, &vars, &images)?;
        let masks = fwd.masks.ok_or_else(|| Error::Config("no regions to segment".into()))?;
        let targets = seg_targets(&samples, model.grid(), model.regions())?;
        let l = g.nll_rows(masks, &targets)?;
        total += g.value(l).item() * samples.len() as f64;
        count += samples.len();
    }
    Ok(total / count as f64)
}

/// Prompt stage: only the prompt context and background are updated.
pub fn train_prompt(
    model: &mut Model,
    train: &DatasetSplit,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<PromptReport> {
    if !train.has_masks() {
        return Err(Error::Missing(
            "pseudo masks for the prompt stage: use synthetic data or provide masks/<stem>.png sidecars".into(),
        ));
    }
    if model.config.region_mode != RegionMode::Rgm || model.regions() == 0 {
        return Err(Error::Config("the prompt stage needs region_mode = rgm and regions >= 1".into()));
    }
    let config = model.config.clone();
    let epochs = config.scaled_prompt_epochs();
    let sampler = PkSampler::new(train, config.ids_per_batch, config.instances_per_id)?;
    let params = config.augment_params(train.channel_means());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 10));
    let mut opt = Adam::new(config.weight_decay);
    let initial_seg = mean_seg_loss(model, train)?;
    let mut epoch_seg = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut sum = 0.0;
        let batches = sampler.epoch(&mut rng);
        for (step, indices) in batches.iter().enumerate() {
            let samples = prepare_batch(train, indices, &config, &params, &mut rng)?;
            let targets = seg_targets(&samples, model.grid(), model.regions())?;
            let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
            let mut g = Graph::new();
            let mut binder = Binder::new(&mut g);
            let vars = model.bind(&mut binder, Stage::Prompt)?;
            let bound = binder.finish();
            let fwd = model.forward(&mut g, &vars, &images)?;
            let masks = fwd.masks.expect("regions >= 1");
            let loss = g.nll_rows(masks, &targets)?;
            let value = g.value(loss).item();
            guard(value, epoch, step, "segmentation loss")?;
            let grads = named_gradients(&g, &bound, loss);
            opt.step(&mut model.prompt, &grads, config.prompt_lr);
            sum += value;
            log(&LogRecord {
                stage: "prompt",
                epoch,
                step,
                lr: config.prompt_lr,
                total: value,
                parts: alloc::vec![(String::from("seg"), value)],
                admitted: None,
            });
        }
        epoch_seg.push(sum / batches.len().max(1) as f64);
    }
    let final_seg = mean_seg_loss(model, train)?;
    Ok(PromptReport {
        initial_seg,
        final_seg,
        epoch_seg,
    })
}

/// Stripe-initialised memory from one pass over the (un-augmented) split.
pub fn init_memory(model: &Model, train: &DatasetSplit) -> Result<MemoryBank> {
    let size = model.config.image_size();
    let mut maps = Vec::with_capacity(train.len());
    for chunk in train.samples().chunks(EVAL_BATCH) {
        let samples = chunk.iter().map(|s| prepare_eval(s, size)).collect::<Result<Vec<_>>>()?;
        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        maps.extend(model.feature_maps(&images)?);
    }
    MemoryBank::from_stripes(&maps, model.regions(), model.config.momentum, model.config.tau)
}

/// Joint stage.
pub fn train(model: &mut Model, train: &DatasetSplit, log: &mut dyn FnMut(&LogRecord)) -> Result<TrainReport> {
    let config = model.config.clone();
    if train.id_count() != model.identities() {
        return Err(Error::Dimension {
            expected: model.identities(),
            found: train.id_count(),
        });
    }
    let n = model.regions();
    if n > 0 {
        model.memory = Some(init_memory(model, train)?);
    }
    let epochs = config.scaled_epochs();
    let schedule = StepSchedule {
        base: config.lr,
        milestones: config.scaled_milestones(),
        gamma: config.lr_gamma,
    };
    let sampler = PkSampler::new(train, config.ids_per_batch, config.instances_per_id)?;
    let params = config.augment_params(train.channel_means());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 20));
    let mut opt = Adam::new(config.weight_decay);
    let use_seg = config.region_mode == RegionMode::Rgm && n > 0 && config.seg_weight > 0.0;
    if use_seg && !train.has_masks() {
        return Err(Error::Missing(
            "pseudo masks for the segmentation term: set seg_weight = 0 or provide masks".into(),
        ));
    }
    let mut report = TrainReport {
        epoch_loss: Vec::with_capacity(epochs),
        steps: 0,
        admitted: alloc::vec![0; n],
    };
    for epoch in 0..epochs {
        let lr = schedule.rate(epoch);
        let batches = sampler.epoch(&mut rng);
        let mut sum = 0.0;
        for (step, indices) in batches.iter().enumerate() {
            let samples = prepare_batch(train, indices, &config, &params, &mut rng)?;
            let targets: Vec<usize> = samples
                .iter()
                .map(|s| train.label_of(s.person_id).expect("sample from this split"))
                .collect();
            let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
            let mut g = Graph::new();
            let mut binder = Binder::new(&mut g);
            let vars = model.bind(&mut binder, Stage::Joint)?;
            let bound = binder.finish();
            let fwd = model.forward(&mut g, &vars, &images)?;
            let (alpha, w) = if n > 0 {
                let (a, w, _) = model.confidence(&mut g, &vars, &fwd)?;
                (a, Some(w))
            } else {
                (None, None)
            };
            let inp = ObjectiveInputs {
                regions: fwd.regions,
                w,
                w_b: &vars.ram.w_b,
                global: fwd.global,
                classifier: vars.classifier,
                targets: &targets,
                margin: config.margin,
            };
            let (mut total, mut parts) = total_loss_on_graph(&mut g, &inp)?;
            if use_seg {
                let seg_t = seg_targets(&samples, model.grid(), n)?;
                let seg = g.nll_rows(fwd.masks.expect("regions >= 1"), &seg_t)?;
                let seg = g.scale(seg, config.seg_weight);
                total = g.sum(&[total, seg])?;
                parts.push(("seg", seg));
            }
            let value = g.value(total).item();
            guard(value, epoch, step, "total loss")?;
            let grads = named_gradients(&g, &bound, total);
            for (name, grad) in &grads {
                if !grad.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        detail: format!("non-finite gradient for `{name}`"),
                    });
                }
            }
            // statistics for the memory update, taken before the step
            let snapshot = fwd.regions.map(|r| g.value(r).clone());
            let alphas = alpha.map(|a| g.value(a).clone());
            let part_values: Vec<(String, f64)> = parts
                .iter()
                .map(|(name, v)| (name.to_string(), g.value(*v).item()))
                .collect();
            drop(g);

            opt.step(model, &grads, lr);

            let admitted = match (snapshot, model.memory.as_mut()) {
                (Some(regions), Some(bank)) => Some(update_bank(bank, &regions, alphas.as_ref(), samples.len())?),
                _ => None,
            };
            if let Some(a) = &admitted {
                for (t, c) in report.admitted.iter_mut().zip(a) {
                    *t += c;
                }
            }
            sum += value;
            report.steps += 1;
            log(&LogRecord {
                stage: "joint",
                epoch,
                step,
                lr,
                total: value,
                parts: part_values,
                admitted,
            });
        }
        report.epoch_loss.push(sum / batches.len().max(1) as f64);
        model.epoch = epoch as u32 + 1;
    }
    Ok(report)
}

/// Splits region-major values by class and applies the momentum update;
/// without a discrimination indicator every feature is admitted.
fn update_bank(bank: &mut MemoryBank, regions: &Matrix, alphas: Option<&Matrix>, batch: usize) -> Result<Vec<usize>> {
    let n = bank.classes();
    let mut candidates = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for j in 0..n {
        candidates.push(regions.select_rows(j * batch, (j + 1) * batch));
        scores.push(match alphas {
            Some(a) => a.as_slice()[j * batch..(j + 1) * batch].to_vec(),
            None => alloc::vec![1.0; batch],
        });
    }
    bank.update(&candidates, &scores)
}

/// One inference pass per image in split order.
pub fn build_index(model: &Model, split: &DatasetSplit) -> Result<RetrievalIndex> {
    let size = model.config.image_size();
    let mut entries = Vec::with_capacity(split.len());
    for chunk in split.samples().chunks(EVAL_BATCH) {
        let samples = chunk.iter().map(|s| prepare_eval(s, size)).collect::<Result<Vec<_>>>()?;
        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        for (s, e) in chunk.iter().zip(model.embed(&images)?) {
            entries.push(RetrievalEntry {
                global: e.global,
                regions: e.regions,
                w: e.scores.w,
                person_id: s.person_id,
                camera_id: s.camera_id,
                source: s.source.clone(),
            });
        }
    }
    RetrievalIndex::new(entries)
}

/// Argmax-mask pixel accuracy against the pseudo masks at feature resolution.
pub fn mask_accuracy(model: &Model, split: &DatasetSplit) -> Result<f64> {
    let size = model.config.image_size();
    let mut hits = 0.0;
    let mut count = 0usize;
    for chunk in split.samples().chunks(EVAL_BATCH) {
        let samples = chunk.iter().map(|s| prepare_eval(s, size)).collect::<Result<Vec<_>>>()?;
        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        for (s, e) in samples.iter().zip(model.embed(&images)?) {
            let (Some(masks), Some(gt)) = (e.masks, s.pseudo_mask.as_ref()) else {
                continue;
            };
            hits += pixel_accuracy(&masks, gt)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Missing("pseudo masks to score segmentation against".into()));
    }
    Ok(hits / count as f64)
}

/// Mean invariance score of visible and of occluded regions, over samples
/// that carry occlusion flags. `None` when either group is empty.
pub fn beta_by_visibility(model: &Model, split: &DatasetSplit) -> Result<Option<(f64, f64)>> {
    let size = model.config.image_size();
    let (mut vis, mut occ) = ((0.0, 0usize), (0.0, 0usize));
    for chunk in split.samples().chunks(EVAL_BATCH) {
        let samples = chunk.iter().map(|s| prepare_eval(s, size)).collect::<Result<Vec<_>>>()?;
        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        for (s, e) in samples.iter().zip(model.embed(&images)?) {
            let Some(flags) = &s.occlusion_flags else { continue };
            for (&occluded, &b) in flags.iter().zip(&e.scores.beta) {
                let acc = if occluded { &mut occ } else { &mut vis };
                acc.0 += b;
                acc.1 += 1;
            }
        }
    }
    Ok((vis.1 > 0 && occ.1 > 0).then(|| (vis.0 / vis.1 as f64, occ.0 / occ.1 as f64)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub metrics: Metrics,
    pub prompt: Option<PromptReport>,
    pub train: TrainReport,
    pub mask_accuracy: Option<f64>,
    /// `(visible, occluded)` mean invariance scores on query + gallery.
    pub beta: Option<(f64, f64)>,
}

/// Prompt stage (for learned prompts under the region generator), joint
/// stage, then evaluation on the held-out splits.
pub fn run_experiment(
    config: &Config,
    train_split: &DatasetSplit,
    query: &DatasetSplit,
    gallery: &DatasetSplit,
    imported: Option<PrototypeSet>,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<(Model, ExperimentReport)> {
    let mut model = Model::new(config, train_split.id_count(), imported)?;
    let rgm = config.region_mode == RegionMode::Rgm && config.regions > 0;
    let prompt = if rgm && model.prompt.is_learned() && config.scaled_prompt_epochs() > 0 {
        Some(train_prompt(&mut model, train_split, log)?)
    } else {
        None
    };
    let train_report = train(&mut model, train_split, log)?;
    let metrics = evaluate(&build_index(&model, query)?, &build_index(&model, gallery)?)?;
    let held_out: Vec<Sample> = query.samples().iter().chain(gallery.samples()).cloned().collect();
    let held_out = DatasetSplit::new(held_out, crate::data::SplitRole::Gallery)?;
    let mask_accuracy = if rgm && held_out.has_masks() {
        Some(mask_accuracy(&model, &held_out)?)
    } else {
        None
    };
    let beta = if config.regions > 0 {
        beta_by_visibility(&model, &held_out)?
    } else {
        None
    };
    Ok((
        model,
        ExperimentReport {
            metrics,
            prompt,
            train: train_report,
            mask_accuracy,
            beta,
        },
    ))
}

/// Hyperparameters a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Regions,
    Gamma,
    ContextLen,
    Momentum,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "N" | "regions" => Ok(Self::Regions),
            "gamma" => Ok(Self::Gamma),
            "K" | "context_len" => Ok(Self::ContextLen),
            "m_u" | "momentum" => Ok(Self::Momentum),
            _ => Err(Error::Config(format!(
                "cannot sweep `{name}`; expected one of N, gamma, K, m_u"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Regions => "N",
            Self::Gamma => "gamma",
            Self::ContextLen => "K",
            Self::Momentum => "m_u",
        }
    }
}

/// Configuration for one sweep value. Changing `N` also swaps in the class
/// vocabulary and synthetic band layout for that many regions.
pub fn sweep_config(base: &Config, param: SweepParam, value: &str) -> Result<Config> {
    let mut c = base.clone();
    match param {
        SweepParam::Regions => {
            let n: usize = value
                .parse()
                .map_err(|_| Error::Config(format!("N = `{value}` is not an integer")))?;
            let (names, fractions) = vocabulary_for(n)
                .ok_or_else(|| Error::Config(format!("no region vocabulary for N = {n} (supported: 2..=5)")))?;
            c.regions = n;
            c.class_names = names;
            c.synthetic.band_fractions = fractions;
        }
        SweepParam::Gamma => c.set("gamma", value)?,
        SweepParam::ContextLen => c.set("context_len", value)?,
        SweepParam::Momentum => c.set("momentum", value)?,
    }
    c.validate()?;
    Ok(c)
}
