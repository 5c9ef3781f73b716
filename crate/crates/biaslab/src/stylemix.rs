//! Image-optimization neural style transfer on the trained classifier's
//! convolutional features, and the style-transfer data-augmentation
//! pipeline with pseudo-labeling.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::dataset::{Annotation, Dataset, Provenance, Sample, Split};
use crate::error::{Error, Result};
use crate::exec;
use crate::image::Image;
use crate::model::TinyCnn;
use crate::rng::{self, tags};
use crate::tensor::Tensor;

/// Synthetic sample ids start here so merged datasets cannot collide with
/// generator ids.
const SYNTHETIC_ID_BASE: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLayer {
    Conv1,
    Conv2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleTransferConfig {
    /// Content weight.
    pub alpha: f64,
    /// Style weight.
    pub beta: f64,
    pub content_layers: Vec<FeatureLayer>,
    pub style_layers: Vec<FeatureLayer>,
    pub iterations: usize,
    pub step_size: f64,
    /// Capture the base image every this many iterations (off by default;
    /// the pipeline trains on final iterations only).
    pub capture_every: Option<usize>,
}

impl Default for StyleTransferConfig {
    fn default() -> Self {
        StyleTransferConfig {
            alpha: 1.0,
            beta: 1e-4,
            content_layers: vec![FeatureLayer::Conv2],
            style_layers: vec![FeatureLayer::Conv1, FeatureLayer::Conv2],
            iterations: 30,
            step_size: 2e-3,
            capture_every: None,
        }
    }
}

impl StyleTransferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("style/content weights must be >= 0".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if self.content_layers.is_empty() && self.style_layers.is_empty() {
            return Err(Error::Config("need at least one feature layer".into()));
        }
        Ok(())
    }
}

/// Post-relu feature maps of the named layers as `[filters, positions]`
/// matrices.
pub fn feature_maps(
    model: &TinyCnn,
    image: &Image,
    layers: &[FeatureLayer],
) -> Result<Vec<Tensor>> {
    let trace = model.forward_trace(image)?;
    layers
        .iter()
        .map(|layer| {
            let t = match layer {
                FeatureLayer::Conv1 => &trace.conv1_post,
                FeatureLayer::Conv2 => &trace.conv2_post,
            };
            // NHWC [1, h, w, c] -> [c, h*w]
            let (h, w, c) = (t.shape()[1], t.shape()[2], t.shape()[3]);
            let mut data = vec![0.0; c * h * w];
            for pos in 0..h * w {
                for ch in 0..c {
                    data[ch * h * w + pos] = t.data()[pos * c + ch];
                }
            }
            Tensor::new(vec![c, h * w], data)
        })
        .collect()
}

/// Gram matrix G_ij = Σ_k F_ik · F_jk of a `[filters, positions]` feature
/// matrix, unnormalized.
pub fn gram_matrix(features: &Tensor) -> Tensor {
    let (c, m) = (features.rows(), features.cols());
    let f = features.data();
    let mut g = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..=i {
            let dot: f64 = f[i * m..(i + 1) * m]
                .iter()
                .zip(&f[j * m..(j + 1) * m])
                .map(|(a, b)| a * b)
                .sum();
            g[i * c + j] = dot;
            g[j * c + i] = dot;
        }
    }
    Tensor::new(vec![c, c], g).expect("gram shape")
}

/// ½ Σ (F_base − F_content)² at one layer.
pub fn content_loss(features_base: &Tensor, features_content: &Tensor) -> Result<f64> {
    if features_base.shape() != features_content.shape() {
        return Err(Error::ShapeMismatch {
            op: "content_loss",
            lhs: features_base.shape().to_vec(),
            rhs: features_content.shape().to_vec(),
        });
    }
    Ok(0.5
        * features_base
            .data()
            .iter()
            .zip(features_content.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>())
}

/// Σ over layers of Σ_ij (G_style − G_base)², each layer equally weighted.
pub fn style_loss(features_base: &[Tensor], features_style: &[Tensor]) -> Result<f64> {
    if features_base.len() != features_style.len() {
        return Err(Error::invalid("style_loss: layer count mismatch"));
    }
    let mut total = 0.0;
    for (fb, fs) in features_base.iter().zip(features_style) {
        let (gb, gs) = (gram_matrix(fb), gram_matrix(fs));
        if gb.shape() != gs.shape() {
            return Err(Error::ShapeMismatch {
                op: "style_loss",
                lhs: gb.shape().to_vec(),
                rhs: gs.shape().to_vec(),
            });
        }
        total += gb
            .data()
            .iter()
            .zip(gs.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct NstResult {
    pub image: Image,
    /// L_total per iteration (evaluated before each pixel update).
    pub trace: Vec<f64>,
    /// Intermediate captures, when configured.
    pub captures: Vec<(usize, Image)>,
}

/// Record feature nodes of the requested layers as `[positions, filters]`
/// matrices on the tape.
fn record_features(
    tape: &mut Tape,
    model: &TinyCnn,
    x: NodeId,
    leaves: &[(String, NodeId)],
    layers: &[FeatureLayer],
) -> Result<Vec<NodeId>> {
    let graph = model.graph(tape, x, leaves)?;
    layers
        .iter()
        .map(|layer| {
            let node = match layer {
                FeatureLayer::Conv1 => graph.conv1,
                FeatureLayer::Conv2 => graph.conv2,
            };
            let s = tape.value(node).shape().to_vec();
            // [1, h, w, c] -> [h*w, c]
            tape.reshape(node, &[s[1] * s[2], s[3]])
        })
        .collect()
}

/// Gram of a `[positions, filters]` node: Fᵀ·F (same matrix as the
/// `[filters, positions]` convention).
fn gram_node(tape: &mut Tape, features: NodeId) -> Result<NodeId> {
    let ft = tape.transpose(features)?;
    tape.matmul(ft, features)
}

/// Gradient descent on the base image's pixels, starting from the content
/// image, minimizing α·L_content + β·L_style. Pixels are clamped to [0, 1]
/// after each step.
pub fn nst_optimize(
    content: &Image,
    style: &Image,
    model: &TinyCnn,
    cfg: &StyleTransferConfig,
) -> Result<NstResult> {
    cfg.validate()?;
    let content = model.prepare(content)?;
    let style = model.prepare(style)?;

    let content_targets = feature_maps(model, &content, &cfg.content_layers)?;
    let style_targets: Vec<Tensor> = feature_maps(model, &style, &cfg.style_layers)?
        .iter()
        .map(gram_matrix)
        .collect();

    let mut base = content.clone();
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut captures = Vec::new();
    for iter in 0..cfg.iterations {
        let mut tape = Tape::new();
        let leaves = model.param_leaves(&mut tape);
        let x = tape.leaf(model.batch_tensor(std::slice::from_ref(&base))?);

        // one graph serves both content and style layers
        let all_layers: Vec<FeatureLayer> = {
            let mut v = cfg.content_layers.clone();
            for l in &cfg.style_layers {
                if !v.contains(l) {
                    v.push(*l);
                }
            }
            v
        };
        let feature_nodes = record_features(&mut tape, model, x, &leaves, &all_layers)?;
        let node_of = |layer: &FeatureLayer| -> NodeId {
            let idx = all_layers.iter().position(|l| l == layer).expect("recorded");
            feature_nodes[idx]
        };

        let mut total: Option<NodeId> = None;
        // content term: ½ Σ (F − F_content)² per layer
        for (layer, target) in cfg.content_layers.iter().zip(&content_targets) {
            let f = node_of(layer);
            // targets are [filters, positions]; the node is [positions, filters]
            let target_pf = crate::autodiff::kernels::transpose(target);
            let t = tape.leaf(target_pf);
            let diff = tape.sub(f, t)?;
            let sq = tape.square(diff)?;
            let sum = tape.sum(sq)?;
            let half = tape.scale(sum, 0.5 * cfg.alpha)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, half)?,
                None => half,
            });
        }
        // style term: Σ (G − G_style)² per layer
        for (layer, target) in cfg.style_layers.iter().zip(&style_targets) {
            let f = node_of(layer);
            let g = gram_node(&mut tape, f)?;
            let t = tape.leaf(target.clone());
            let diff = tape.sub(g, t)?;
            let sq = tape.square(diff)?;
            let sum = tape.sum(sq)?;
            let weighted = tape.scale(sum, cfg.beta)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, weighted)?,
                None => weighted,
            });
        }
        let total = total.expect("validated non-empty layers");
        let loss = tape.value(total).item()?;
        if !loss.is_finite() {
            return Err(Error::numeric("divergent style-transfer loss", format!("iteration {iter}")));
        }
        trace.push(loss);

        let grads = tape.backward(total, &[x])?;
        let g = tape.value(grads[&x]).data().to_vec();
        for (p, gv) in base.pixels_mut().iter_mut().zip(&g) {
            *p = (*p - cfg.step_size * gv).clamp(0.0, 1.0);
        }
        if let Some(every) = cfg.capture_every {
            if every > 0 && (iter + 1) % every == 0 {
                captures.push((iter + 1, base.clone()));
            }
        }
    }
    Ok(NstResult {
        image: base,
        trace,
        captures,
    })
}

#[derive(Debug, Clone)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    /// Scores at the quota boundary were tied; the split fell back to id
    /// order.
    pub tied: bool,
}

/// Split scores into exactly `quota0` class-0 and `quota1` class-1 labels:
/// the lowest-scoring images take class 0. Ties break by score order, then
/// id (index) order.
pub fn pseudo_label(scores: &[f64], quota0: usize, quota1: usize) -> Result<PseudoLabels> {
    if quota0 + quota1 != scores.len() {
        return Err(Error::invalid(format!(
            "pseudo_label: quotas {quota0}+{quota1} do not cover {} scores",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let mut labels = vec![1usize; scores.len()];
    for &i in order.iter().take(quota0) {
        labels[i] = 0;
    }
    let tied = quota0 > 0
        && quota1 > 0
        && scores[order[quota0 - 1]] == scores[order[quota0]];
    Ok(PseudoLabels { labels, tied })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StdaConfig {
    pub pairs: usize,
    /// Class supplying the content (shape) images.
    pub content_class: usize,
    /// Class supplying the style (texture) images.
    pub style_class: usize,
    pub nst: StyleTransferConfig,
    pub seed: u64,
}

impl Default for StdaConfig {
    fn default() -> Self {
        StdaConfig {
            pairs: 16,
            content_class: 0,
            style_class: 1,
            nst: StyleTransferConfig::default(),
            seed: 0,
        }
    }
}

/// Style-transfer data augmentation: synthesize `pairs` images from random
/// (content, style) picks of the two classes' train splits, pseudo-label
/// them with balanced quotas, and tag everything `train`.
pub fn stda_generate(dataset: &Dataset, model: &TinyCnn, cfg: &StdaConfig) -> Result<Dataset> {
    cfg.nst.validate()?;
    if cfg.pairs == 0 {
        return Ok(Dataset::default());
    }
    let content_pool: Vec<&Sample> = dataset
        .samples
        .iter()
        .filter(|s| s.split == Split::Train && s.label == cfg.content_class)
        .collect();
    let style_pool: Vec<&Sample> = dataset
        .samples
        .iter()
        .filter(|s| s.split == Split::Train && s.label == cfg.style_class)
        .collect();
    if content_pool.is_empty() || style_pool.is_empty() {
        return Err(Error::data(
            "stda: content or style class has no training samples",
        ));
    }
    let picks: Vec<(usize, usize)> = {
        let mut rng = rng::rng_from_seed(rng::subseed(cfg.seed, tags::STDA, 0));
        (0..cfg.pairs)
            .map(|_| {
                (
                    rng.random_range(0..content_pool.len()),
                    rng.random_range(0..style_pool.len()),
                )
            })
            .collect()
    };
    let results: Vec<Result<(Image, Provenance)>> = exec::map_slice(&picks, |&(ci, si)| {
        let content = content_pool[ci];
        let style = style_pool[si];
        let out = nst_optimize(&content.image, &style.image, model, &cfg.nst)?;
        Ok((
            out.image,
            Provenance {
                content_id: content.id,
                style_id: style.id,
                iterations: cfg.nst.iterations,
            },
        ))
    });
    let mut images = Vec::with_capacity(cfg.pairs);
    let mut provenances = Vec::with_capacity(cfg.pairs);
    for r in results {
        let (img, prov) = r?;
        images.push(img);
        provenances.push(prov);
    }

    // score by the style class's probability and balance the label quotas
    let scores: Vec<f64> = images
        .iter()
        .map(|img| Ok(model.predict(img)?.1[cfg.style_class]))
        .collect::<Result<_>>()?;
    let quota1 = cfg.pairs / 2;
    let quota0 = cfg.pairs - quota1;
    let pseudo = pseudo_label(&scores, quota0, quota1)?;

    let samples = images
        .into_iter()
        .zip(provenances)
        .zip(pseudo.labels)
        .enumerate()
        .map(|(i, ((mut image, provenance), pseudo_class))| {
            image.snap_to_u8_grid();
            let label = match pseudo_class {
                0 => cfg.content_class,
                _ => cfg.style_class,
            };
            Sample {
                id: SYNTHETIC_ID_BASE + i as u64,
                image,
                label,
                split: Split::Train,
                annotation: Annotation::default(),
                provenance: Some(provenance),
            }
        })
        .collect();
    Ok(Dataset { samples })
}
