//! The two mitigation procedures: training with targeted data augmentation
//! and attribution-feedback fine-tuning (forcing-to-ignore).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cbi::BiasTransform;
use crate::dataset::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{self, cross_entropy_node, evaluate, EvalReport, TinyCnn, TrainConfig};
use crate::rng::{self, tags};


/// One augmentation step: the transform fires independently with
/// probability `p` per sample per epoch.
#[derive(Debug, Clone)]
pub struct PolicyEntry {
    pub transform: BiasTransform,
    pub probability: f64,
}

/// Ordered augmentation steps (the hair+ruler step precedes the frame step
/// when both are present).
#[derive(Debug, Clone, Default)]
pub struct AugmentationPolicy {
    pub entries: Vec<PolicyEntry>,
}

impl AugmentationPolicy {
    pub fn single(transform: BiasTransform, probability: f64) -> AugmentationPolicy {
        AugmentationPolicy {
            entries: vec![PolicyEntry {
                transform,
                probability,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if !(0.0..=1.0).contains(&e.probability) {
                return Err(Error::Config(format!(
                    "augmentation probability {} outside [0, 1]",
                    e.probability
                )));
            }
        }
        Ok(())
    }
}

/// Roll each policy entry independently and compose the fired transforms in
/// policy order.
pub fn apply_policy(image: &Image, policy: &AugmentationPolicy, seed: u64) -> Result<Image> {
    let mut out = image.clone();
    for (i, entry) in policy.entries.iter().enumerate() {
        let mut rng = rng::rng_from_seed(rng::subseed(seed, tags::TRAIN_AUGMENT, i as u64));
        if rng.random_range(0.0..1.0) < entry.probability {
            out = entry.transform.apply(
                &out,
                rng::subseed(seed, tags::TRAIN_AUGMENT, 1000 + i as u64),
                None,
            )?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TdaResult {
    pub loss_history: Vec<f64>,
    pub eval_clean: EvalReport,
    pub eval_biased: EvalReport,
    /// Class-1 F1 on the clean test split.
    pub f1_org: f64,
    /// Class-1 F1 on the bias-inserted test copies.
    pub f1_aug: f64,
    pub f1_mean: f64,
}

/// Train with the augmentation policy, then evaluate on the clean test
/// split and on test copies with the bias inserted (using `test_transform`,
/// which must come from a stamp bank disjoint from the training one).
pub fn tda_train(
    model: &mut TinyCnn,
    dataset: &Dataset,
    policy: &AugmentationPolicy,
    cfg: &TrainConfig,
    test_transform: &BiasTransform,
    test_seed: u64,
) -> Result<TdaResult> {
    policy.validate()?;
    let train: Vec<&Sample> = dataset.with_split(Split::Train);
    let augment = |img: &Image, seed: u64| apply_policy(img, policy, seed);
    let loss_history = model.train(&train, cfg, Some(&augment))?;

    let test: Vec<&Sample> = dataset.with_split(Split::Test);
    let eval_clean = evaluate(model, &test)?;
    let biased: Vec<Sample> = test
        .iter()
        .map(|s| {
            Ok(Sample {
                image: test_transform.apply(
                    &s.image,
                    rng::subseed(test_seed, tags::CBI, s.id),
                    Some(&s.annotation),
                )?,
                ..(*s).clone()
            })
        })
        .collect::<Result<_>>()?;
    let biased_refs: Vec<&Sample> = biased.iter().collect();
    let eval_biased = evaluate(model, &biased_refs)?;

    let f1_org = eval_clean.per_class[1].f1;
    let f1_aug = eval_biased.per_class[1].f1;
    Ok(TdaResult {
        loss_history,
        eval_clean,
        eval_biased,
        f1_org,
        f1_aug,
        f1_mean: (f1_org + f1_aug) / 2.0,
    })
}

/// Mean squared difference between two attribution rasters.
pub fn attribution_loss(map_original: &Image, map_biased: &Image) -> Result<f64> {
    if map_original.width() != map_biased.width()
        || map_original.height() != map_biased.height()
    {
        return Err(Error::ShapeMismatch {
            op: "attribution_loss",
            lhs: vec![map_original.height(), map_original.width()],
            rhs: vec![map_biased.height(), map_biased.width()],
        });
    }
    let n = map_original.pixels().len() as f64;
    Ok(map_original
        .pixels()
        .iter()
        .zip(map_biased.pixels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone)]
pub struct FeedbackConfig {
    /// Weight of the attribution loss in the convex combination
    /// (1−α)·L_cls + α·L_atr.
    pub alpha: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lr_decay: f64,
    pub seed: u64,
    /// The artifact the model is being forced to ignore.
    pub transform: BiasTransform,
}

impl FeedbackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must be in [0, 1]".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackEpoch {
    pub classification_loss: f64,
    pub attribution_loss: f64,
    pub total_loss: f64,
}

/// Attribution-feedback fine-tuning. Per batch: the signed saliency of the
/// clean inputs (for each sample's true-class logit) is captured and held
/// fixed; the saliency of the bias-inserted inputs stays differentiable;
/// the loss (1−α)·L_cls + α·L_atr is minimized by SGD, with a second-order
/// path through L_atr.
///
/// At α = 0 the parameter updates are bit-identical to plain fine-tuning
/// with the same seed (same shuffle, same arithmetic).
pub fn feedback_finetune(
    model: &mut TinyCnn,
    data: &[&Sample],
    cfg: &FeedbackConfig,
) -> Result<Vec<FeedbackEpoch>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::data("feedback_finetune: empty dataset"));
    }
    let n = data.len();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32);
        let order = shuffled_indices(n, rng::subseed(cfg.seed, tags::TRAIN_SHUFFLE, epoch as u64));
        let mut sums = (0.0, 0.0, 0.0);
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let context = || format!("epoch {epoch}, batch {batch_idx}");
            let (l_cls, l_atr, total) = feedback_step(model, data, chunk, cfg, epoch, lr)
                .map_err(|e| match e {
                    Error::Numeric { what, .. } => Error::numeric(what, context()),
                    other => other,
                })?;
            if !total.is_finite() {
                return Err(Error::numeric("divergent loss", context()));
            }
            sums.0 += l_cls * chunk.len() as f64;
            sums.1 += l_atr * chunk.len() as f64;
            sums.2 += total * chunk.len() as f64;
        }
        history.push(FeedbackEpoch {
            classification_loss: sums.0 / n as f64,
            attribution_loss: sums.1 / n as f64,
            total_loss: sums.2 / n as f64,
        });
    }
    Ok(history)
}

fn feedback_step(
    model: &mut TinyCnn,
    data: &[&Sample],
    chunk: &[usize],
    cfg: &FeedbackConfig,
    epoch: usize,
    lr: f64,
) -> Result<(f64, f64, f64)> {
    let n = data.len();
    let clean: Vec<Image> = chunk
        .iter()
        .map(|&i| model.prepare(&data[i].image))
        .collect::<Result<_>>()?;
    let biased: Vec<Image> = chunk
        .iter()
        .map(|&i| {
            let s = data[i];
            let b = cfg.transform.apply(
                &s.image,
                rng::subseed(cfg.seed, tags::FEEDBACK, (epoch * n + i) as u64),
                Some(&s.annotation),
            )?;
            model.prepare(&b)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
    let onehot = model::one_hot(&labels, model.classes());

    let mut tape = crate::autodiff::Tape::new();
    let leaves = model.param_leaves(&mut tape);
    let wrt: Vec<crate::autodiff::NodeId> = leaves.iter().map(|(_, id)| *id).collect();

    // classification loss on the clean inputs
    let x_clean = tape.leaf(model.batch_tensor(&clean)?);
    let graph_clean = model.graph(&mut tape, x_clean, &leaves)?;
    let y = tape.leaf(onehot.clone());
    let l_cls = cross_entropy_node(&mut tape, graph_clean.logits, y)?;

    // desired saliency: gradient of each sample's true-class logit on the
    // clean input, detached (no gradient flows through it)
    let picked_clean = tape.mul(graph_clean.logits, y)?;
    let s_clean = tape.sum(picked_clean)?;
    let r_clean_node = tape.backward(s_clean, &[x_clean])?[&x_clean];
    let r_fixed = tape.leaf(tape.value(r_clean_node).clone());

    // current saliency on the bias-inserted inputs, kept differentiable
    let x_biased = tape.leaf(model.batch_tensor(&biased)?);
    let graph_biased = model.graph(&mut tape, x_biased, &leaves)?;
    let y2 = tape.leaf(onehot);
    let picked_biased = tape.mul(graph_biased.logits, y2)?;
    let s_biased = tape.sum(picked_biased)?;
    let r_biased = tape.backward(s_biased, &[x_biased])?[&x_biased];

    // Per-instance squared-norm form of the attribution loss: the square
    // of each map difference summed over its pixels, averaged over the
    // batch. This keeps L_atr on the same scale as L_cls so the α-weighted
    // combination balances the two pressures.
    let diff = tape.sub(r_biased, r_fixed)?;
    let sq = tape.square(diff)?;
    let sq_sum = tape.sum(sq)?;
    let l_atr = tape.scale(sq_sum, 1.0 / chunk.len() as f64)?;

    let weighted_cls = tape.scale(l_cls, 1.0 - cfg.alpha)?;
    let weighted_atr = tape.scale(l_atr, cfg.alpha)?;
    let total = tape.add(weighted_cls, weighted_atr)?;

    let l_cls_v = tape.value(l_cls).item()?;
    let l_atr_v = tape.value(l_atr).item()?;
    let total_v = tape.value(total).item()?;
    if !total_v.is_finite() {
        return Err(Error::numeric("divergent loss", String::new()));
    }

    let grads = tape.grad_of_grad(total, &wrt)?;
    model.apply_grads(&leaves, &grads, &tape, lr);
    Ok((l_cls_v, l_atr_v, total_v))
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rng::rng_from_seed(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Mean L_atr of a model over samples: squared difference between clean and
/// bias-inserted saliency, averaged. Used to verify that fine-tuning
/// actually moved the attributions.
pub fn mean_attribution_gap(
    model: &TinyCnn,
    data: &[&Sample],
    transform: &BiasTransform,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::data("mean_attribution_gap: empty dataset"));
    }
    let gaps: Vec<Result<f64>> = crate::exec::map_slice(data, |s| {
        let clean = model.prepare(&s.image)?;
        let biased_native = transform.apply(
            &s.image,
            rng::subseed(seed, tags::FEEDBACK, s.id),
            Some(&s.annotation),
        )?;
        let biased = model.prepare(&biased_native)?;
        let r = crate::attribution::signed_saliency(model, &clean, s.label)?;
        let r_hat = crate::attribution::signed_saliency(model, &biased, s.label)?;
        attribution_loss(&r, &r_hat)
    });
    let mut total = 0.0;
    for g in gaps {
        total += g?;
    }
    Ok(total / data.len() as f64)
}
