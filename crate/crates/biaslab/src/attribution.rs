//! Local explanation generators (saliency, occlusion, LRP-ε) and the
//! explanation-quality metrics built on them.
//!
//! All generators are pure: the same model and image always yield the same
//! map. Display maps are non-negative; the signed saliency is kept separate
//! because the attribution-feedback loss and infidelity need it.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, ConvGeom, Tape};
use crate::error::{Error, Result};
use crate::exec;
use crate::image::Image;
use crate::model::{self, Classifier, TinyCnn};
use crate::rng::{self, tags};
use crate::tensor::Tensor;

/// Per-pixel relevance aligned to the explained image.
#[derive(Debug, Clone)]
pub struct AttributionMap {
    pub values: Image,
    pub source_image_id: Option<u64>,
    pub target_class: usize,
}

impl AttributionMap {
    /// Build a display map from a signed relevance raster (absolute value).
    pub fn from_signed(signed: &Image, target_class: usize) -> AttributionMap {
        let values = Image::new(
            signed.width(),
            signed.height(),
            signed.pixels().iter().map(|v| v.abs()).collect(),
        )
        .expect("same raster size");
        AttributionMap {
            values,
            source_image_id: None,
            target_class,
        }
    }

    pub fn with_source(mut self, id: u64) -> AttributionMap {
        self.source_image_id = Some(id);
        self
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrpConfig {
    /// Stabilizer added to the denominator (with the denominator's sign).
    pub epsilon: f64,
    /// How much positive weight contributions are favored: ρ(w) = w + γ·max(0, w).
    pub gamma: f64,
}

impl Default for LrpConfig {
    fn default() -> Self {
        LrpConfig {
            epsilon: 1e-6,
            gamma: 0.0,
        }
    }
}

/// Which explainer a pipeline should use.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ExplainerKind {
    Saliency,
    Occlusion,
    Lrp,
}

fn check_input<M: Classifier + ?Sized>(model: &M, image: &Image, what: &'static str) -> Result<()> {
    let (w, h) = model.input_dims();
    if image.width() != w || image.height() != h {
        return Err(Error::data(format!(
            "{what}: image {}x{} does not match model input {}x{}",
            image.width(),
            image.height(),
            w,
            h
        )));
    }
    Ok(())
}

/// Signed input gradient of the target logit; this is the raster the
/// attribution loss trains against.
pub fn signed_saliency<M: Classifier + ?Sized>(
    model: &M,
    image: &Image,
    target_class: usize,
) -> Result<Image> {
    check_input(model, image, "saliency")?;
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(
        vec![1, image.height(), image.width(), 1],
        image.pixels().to_vec(),
    )?);
    let logits = model.record_logits(&mut tape, x)?;
    let onehot = tape.leaf(model::one_hot(&[target_class], model.classes()));
    let picked = tape.mul(logits, onehot)?;
    let logit = tape.sum(picked)?;
    let grads = tape.backward(logit, &[x])?;
    let g = tape.value(grads[&x]);
    Image::new(image.width(), image.height(), g.data().to_vec())
}

/// |∂ logit_target / ∂ pixel| per pixel.
pub fn saliency<M: Classifier + ?Sized>(
    model: &M,
    image: &Image,
    target_class: usize,
) -> Result<AttributionMap> {
    let signed = signed_saliency(model, image, target_class)?;
    Ok(AttributionMap::from_signed(&signed, target_class))
}

/// Occlusion map: each patch position scores `logit(original) −
/// logit(patch zeroed)`; overlapping contributions are averaged and the
/// magnitude kept.
pub fn occlusion<M: Classifier + ?Sized>(
    model: &M,
    image: &Image,
    target_class: usize,
    patch_side: usize,
    stride: usize,
) -> Result<AttributionMap> {
    check_input(model, image, "occlusion")?;
    let (w, h) = (image.width(), image.height());
    if patch_side == 0 || patch_side > w || patch_side > h {
        return Err(Error::invalid(format!(
            "occlusion: patch side {patch_side} out of range for {w}x{h} image"
        )));
    }
    if stride == 0 || stride > patch_side {
        return Err(Error::invalid(format!(
            "occlusion: stride {stride} > patch side {patch_side} leaves coverage gaps"
        )));
    }
    let base = model.logits_image(image)?[target_class];
    let positions: Vec<(usize, usize)> = {
        let ys = axis_positions(h, patch_side, stride);
        let xs = axis_positions(w, patch_side, stride);
        ys.iter()
            .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
            .collect()
    };
    let scores: Vec<Result<f64>> = exec::map_slice(&positions, |&(py, px)| {
        let mut occluded = image.clone();
        for y in py..py + patch_side {
            for x in px..px + patch_side {
                occluded.set(x, y, 0.0);
            }
        }
        Ok(base - model.logits_image(&occluded)?[target_class])
    });
    let mut acc = vec![0.0; w * h];
    let mut cover = vec![0usize; w * h];
    for (&(py, px), score) in positions.iter().zip(scores) {
        let score = score?;
        for y in py..py + patch_side {
            for x in px..px + patch_side {
                acc[y * w + x] += score;
                cover[y * w + x] += 1;
            }
        }
    }
    for (a, &c) in acc.iter_mut().zip(&cover) {
        if c > 0 {
            *a /= c as f64;
        }
    }
    let signed = Image::new(w, h, acc)?;
    Ok(AttributionMap::from_signed(&signed, target_class))
}

/// Number of patch evaluations `occlusion` performs on a square image.
pub fn occlusion_patch_count(side: usize, patch_side: usize, stride: usize) -> usize {
    axis_positions(side, patch_side, stride).len().pow(2)
}

fn axis_positions(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut p = 0;
    while p + patch <= extent {
        starts.push(p);
        p += stride;
    }
    // cover the far edge when the stride does not divide evenly
    if *starts.last().expect("patch <= extent") + patch < extent {
        starts.push(extent - patch);
    }
    starts
}

/// Signed LRP-ε relevance propagated from the target logit to the pixels.
///
/// The unified rule R_j = Σ_k (a_j·ρ(w_jk)) / (ε + Σ_j a_j·ρ(w_jk)) · R_k is
/// applied to the dense and convolution layers with ρ(w) = w + γ·max(0, w);
/// the stabilizer follows the denominator's sign. Relu passes relevance
/// through; maxpool routes it to the argmax winner; biases enter the
/// denominator but are not redistributed.
pub fn lrp_signed(
    model: &TinyCnn,
    image: &Image,
    target_class: usize,
    cfg: &LrpConfig,
) -> Result<Image> {
    check_input(model, image, "lrp")?;
    if !(cfg.epsilon > 0.0) {
        return Err(Error::Config("lrp: epsilon must be positive".into()));
    }
    if cfg.gamma < 0.0 {
        return Err(Error::Config("lrp: gamma must be non-negative".into()));
    }
    let trace = model.forward_trace(image)?;
    let m = Classifier::classes(model);

    // relevance at the output: the target logit, everything else zero
    let mut r_out = vec![0.0; m];
    r_out[target_class] = trace.logits.data()[target_class];

    let r_hidden = lrp_dense(
        trace.fc1_post.data(),
        model.param(model::FC2_W),
        model.param(model::FC2_B),
        &r_out,
        cfg,
    );
    let r_flat = lrp_dense(
        trace.flat.data(),
        model.param(model::FC1_W),
        model.param(model::FC1_B),
        &r_hidden,
        cfg,
    );
    // relevance on the flattened pool2 map, scattered to the conv2 winners
    let r_pool2 = Tensor::new(trace.pool2.shape().to_vec(), r_flat).expect("pool2 relevance");
    let r_conv2 = kernels::unpool2x2(&r_pool2, &trace.pool2_idx, trace.conv2_post.shape());
    let r_pool1 = lrp_conv(
        &trace.pool1,
        model.param(model::CONV2_W),
        model.param(model::CONV2_B),
        &r_conv2,
        cfg,
    );
    let r_conv1 = kernels::unpool2x2(&r_pool1, &trace.pool1_idx, trace.conv1_post.shape());
    let r_input = lrp_conv(
        &trace.input,
        model.param(model::CONV1_W),
        model.param(model::CONV1_B),
        &r_conv1,
        cfg,
    );
    Image::new(image.width(), image.height(), r_input.into_data())
}

/// Display variant of [`lrp_signed`] (absolute relevance).
pub fn lrp_epsilon(
    model: &TinyCnn,
    image: &Image,
    target_class: usize,
    cfg: &LrpConfig,
) -> Result<AttributionMap> {
    let signed = lrp_signed(model, image, target_class, cfg)?;
    Ok(AttributionMap::from_signed(&signed, target_class))
}

fn rho(w: f64, gamma: f64) -> f64 {
    w + gamma * w.max(0.0)
}

fn stabilized(z: f64, eps: f64) -> f64 {
    if z >= 0.0 {
        z + eps
    } else {
        z - eps
    }
}

fn lrp_dense(a: &[f64], w: &Tensor, b: &Tensor, r_out: &[f64], cfg: &LrpConfig) -> Vec<f64> {
    let (d, k) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    let bd = b.data();
    // z_k = Σ_j a_j ρ(w_jk) + ρ(b_k)
    let mut z = vec![0.0; k];
    for (kk, zk) in z.iter_mut().enumerate() {
        *zk = rho(bd[kk], cfg.gamma);
    }
    for j in 0..d {
        let aj = a[j];
        if aj == 0.0 {
            continue;
        }
        let row = &wd[j * k..(j + 1) * k];
        for kk in 0..k {
            z[kk] += aj * rho(row[kk], cfg.gamma);
        }
    }
    let s: Vec<f64> = r_out
        .iter()
        .zip(&z)
        .map(|(r, zk)| r / stabilized(*zk, cfg.epsilon))
        .collect();
    // R_j = a_j Σ_k ρ(w_jk) s_k
    let mut r_in = vec![0.0; d];
    for j in 0..d {
        let aj = a[j];
        if aj == 0.0 {
            continue;
        }
        let row = &wd[j * k..(j + 1) * k];
        let mut acc = 0.0;
        for kk in 0..k {
            acc += rho(row[kk], cfg.gamma) * s[kk];
        }
        r_in[j] = aj * acc;
    }
    r_in
}

fn lrp_conv(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    r_out: &Tensor,
    cfg: &LrpConfig,
) -> Tensor {
    let s = input.shape();
    let geom = ConvGeom {
        n: s[0],
        h: s[1],
        w: s[2],
        c: s[3],
        kh: kernel.shape()[0],
        kw: kernel.shape()[1],
    };
    let co = kernel.shape()[3];
    let cols = kernels::im2col(input, &geom);
    let rho_w = Tensor::new(
        vec![kernel.numel() / co, co],
        kernel.data().iter().map(|&w| rho(w, cfg.gamma)).collect(),
    )
    .expect("rho kernel");
    let mut z = kernels::matmul(&cols, &rho_w);
    for row in z.data_mut().chunks_mut(co) {
        for (zk, bk) in row.iter_mut().zip(bias.data()) {
            *zk += rho(*bk, cfg.gamma);
        }
    }
    // s = R / stabilized(z), elementwise over [positions, co]
    let s_mat = Tensor::new(
        z.shape().to_vec(),
        r_out
            .data()
            .iter()
            .zip(z.data())
            .map(|(r, zk)| r / stabilized(*zk, cfg.epsilon))
            .collect(),
    )
    .expect("lrp s");
    // backprojected c = s · ρ(w)^T, then R_cols = cols ⊙ c, folded back
    let c_mat = kernels::matmul(&s_mat, &kernels::transpose(&rho_w));
    let r_cols = Tensor::new(
        cols.shape().to_vec(),
        cols.data()
            .iter()
            .zip(c_mat.data())
            .map(|(a, c)| a * c)
            .collect(),
    )
    .expect("lrp r_cols");
    kernels::col2im(&r_cols, &geom)
}

// ── explanation-quality metrics ──────────────────────────────────────

/// Monte-Carlo max-sensitivity: the largest L2 change of the explanation
/// over uniform per-pixel perturbations of radius `r`, probes clipped to
/// `[0, 1]`.
pub fn max_sensitivity<F>(
    explain: F,
    image: &Image,
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&Image) -> Result<Vec<f64>> + Sync,
{
    if !(radius > 0.0) {
        return Err(Error::invalid("max_sensitivity: radius must be positive"));
    }
    if samples == 0 {
        return Err(Error::invalid("max_sensitivity: need at least one sample"));
    }
    let base = explain(image)?;
    let deltas: Vec<Result<f64>> = exec::map_indices(samples, |i| {
        let mut rng = rng::rng_from_seed(rng::subseed(seed, tags::METRIC_MC, i as u64));
        let mut probe = image.clone();
        for v in probe.pixels_mut() {
            *v = (*v + rng.random_range(-radius..radius)).clamp(0.0, 1.0);
        }
        let phi = explain(&probe)?;
        Ok(phi
            .iter()
            .zip(&base)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    });
    let mut best = 0.0f64;
    for d in deltas {
        best = best.max(d?);
    }
    Ok(best)
}

/// How the significant perturbations for infidelity are drawn.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationSpec {
    /// I = x − (x₀ + ε), ε ~ N(0, σ²) per pixel; x₀ defaults to zeros.
    NoisyBaseline { sigma: f64 },
    /// I = the content of a random square patch (the patch is zeroed).
    SquareRemoval { square_side: usize },
    /// I = (x − x₀) on a random half-density pixel subset.
    SubsetBaseline,
}

impl PerturbationSpec {
    fn validate(&self, width: usize, height: usize) -> Result<()> {
        match self {
            PerturbationSpec::NoisyBaseline { sigma } if !(*sigma > 0.0) => {
                Err(Error::invalid("infidelity: sigma must be positive"))
            }
            PerturbationSpec::SquareRemoval { square_side }
                if *square_side == 0 || *square_side > width || *square_side > height =>
            {
                Err(Error::invalid(format!(
                    "infidelity: square side {square_side} out of range for {width}x{height}"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Monte-Carlo infidelity E[(Iᵀφ − (f(x) − f(x−I)))²] of a signed
/// explanation `phi` for the target logit.
#[allow(clippy::too_many_arguments)]
pub fn infidelity<M: Classifier + ?Sized>(
    phi: &Image,
    model: &M,
    image: &Image,
    target_class: usize,
    spec: &PerturbationSpec,
    baseline: Option<&Image>,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    check_input(model, image, "infidelity")?;
    if phi.width() != image.width() || phi.height() != image.height() {
        return Err(Error::ShapeMismatch {
            op: "infidelity",
            lhs: vec![phi.height(), phi.width()],
            rhs: vec![image.height(), image.width()],
        });
    }
    if samples == 0 {
        return Err(Error::invalid("infidelity: need at least one sample"));
    }
    spec.validate(image.width(), image.height())?;
    let f_x = model.logits_image(image)?[target_class];
    let terms: Vec<Result<f64>> = exec::map_indices(samples, |i| {
        let mut rng = rng::rng_from_seed(rng::subseed(seed, tags::METRIC_MC, i as u64));
        let perturbation = draw_perturbation(image, spec, baseline, &mut rng);
        let mut probe = image.clone();
        for (p, d) in probe.pixels_mut().iter_mut().zip(&perturbation) {
            *p -= d;
        }
        let f_probe = model.logits_image(&probe)?[target_class];
        let dot: f64 = perturbation
            .iter()
            .zip(phi.pixels())
            .map(|(i, p)| i * p)
            .sum();
        let term = dot - (f_x - f_probe);
        Ok(term * term)
    });
    let mut total = 0.0;
    for t in terms {
        total += t?;
    }
    Ok(total / samples as f64)
}

fn draw_perturbation(
    image: &Image,
    spec: &PerturbationSpec,
    baseline: Option<&Image>,
    rng: &mut rng::Rng,
) -> Vec<f64> {
    let (w, h) = (image.width(), image.height());
    let zero;
    let base = match baseline {
        Some(b) => b,
        None => {
            zero = Image::zeros(w, h);
            &zero
        }
    };
    match spec {
        PerturbationSpec::NoisyBaseline { sigma } => {
            let normal = Normal::new(0.0, *sigma).expect("valid sigma");
            image
                .pixels()
                .iter()
                .zip(base.pixels())
                .map(|(x, b)| x - (b + normal.sample(rng)))
                .collect()
        }
        PerturbationSpec::SquareRemoval { square_side } => {
            let my = h - square_side;
            let mx = w - square_side;
            let py = if my == 0 { 0 } else { rng.random_range(0..=my) };
            let px = if mx == 0 { 0 } else { rng.random_range(0..=mx) };
            let mut out = vec![0.0; w * h];
            for y in py..py + square_side {
                for x in px..px + square_side {
                    out[y * w + x] = image.get(x, y);
                }
            }
            out
        }
        PerturbationSpec::SubsetBaseline => image
            .pixels()
            .iter()
            .zip(base.pixels())
            .map(|(x, b)| if rng.random_range(0..2) == 1 { x - b } else { 0.0 })
            .collect(),
    }
}

/// Spatial region used by the concept metrics.
#[derive(Debug, Clone)]
pub struct Mask {
    width: usize,
    height: usize,
    inside: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, inside: Vec<bool>) -> Result<Mask> {
        if inside.len() != width * height {
            return Err(Error::invalid("mask size mismatch"));
        }
        Ok(Mask {
            width,
            height,
            inside,
        })
    }

    pub fn full(width: usize, height: usize) -> Mask {
        Mask {
            width,
            height,
            inside: vec![true; width * height],
        }
    }

    pub fn disk(side: usize, cx: f64, cy: f64, r: f64) -> Mask {
        let inside = (0..side * side)
            .map(|i| {
                let (x, y) = ((i % side) as f64, (i / side) as f64);
                (x - cx).powi(2) + (y - cy).powi(2) <= r * r
            })
            .collect();
        Mask {
            width: side,
            height: side,
            inside,
        }
    }

    /// Mean of the raster values inside the mask.
    pub fn mean_inside(&self, raster: &Image) -> f64 {
        debug_assert_eq!(raster.width(), self.width);
        debug_assert_eq!(raster.height(), self.height);
        let mut total = 0.0;
        let mut count = 0usize;
        for (v, &m) in raster.pixels().iter().zip(&self.inside) {
            if m {
                total += v;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

/// Model contrast score: difference of mean in-mask attribution between two
/// models, over the images both classify correctly.
pub fn model_contrast_score<M, F>(
    attr: F,
    model_a: &M,
    model_b: &M,
    concept_mask: &Mask,
    samples: &[(Image, usize)],
) -> Result<f64>
where
    M: Classifier + ?Sized,
    F: Fn(&M, &Image) -> Result<AttributionMap>,
{
    let mut ga = 0.0;
    let mut gb = 0.0;
    let mut kept = 0usize;
    for (image, label) in samples {
        let (pa, _) = model_a.predict_image(image)?;
        let (pb, _) = model_b.predict_image(image)?;
        if pa != *label || pb != *label {
            continue;
        }
        ga += concept_mask.mean_inside(&attr(model_a, image)?.values);
        gb += concept_mask.mean_inside(&attr(model_b, image)?.values);
        kept += 1;
    }
    if kept == 0 {
        return Err(Error::data(
            "model_contrast_score: no image is correctly classified by both models",
        ));
    }
    Ok((ga - gb) / kept as f64)
}

/// A (with common feature, without common feature) image pair with its
/// shared ground-truth label.
#[derive(Debug, Clone)]
pub struct IdrPair {
    pub with_cf: Image,
    pub without_cf: Image,
    pub label: usize,
}

/// Input dependence rate: among pairs the model classifies correctly (both
/// sides), the fraction where mean in-mask attribution is strictly smaller
/// on the image *with* the common feature.
pub fn input_dependence_rate<M, F>(
    attr: F,
    model: &M,
    pairs: &[IdrPair],
    cf_mask: &Mask,
) -> Result<f64>
where
    M: Classifier + ?Sized,
    F: Fn(&M, &Image) -> Result<AttributionMap>,
{
    let mut correct = 0usize;
    let mut satisfied = 0usize;
    for pair in pairs {
        let (pw, _) = model.predict_image(&pair.with_cf)?;
        let (po, _) = model.predict_image(&pair.without_cf)?;
        if pw != pair.label || po != pair.label {
            continue;
        }
        correct += 1;
        let g_with = cf_mask.mean_inside(&attr(model, &pair.with_cf)?.values);
        let g_without = cf_mask.mean_inside(&attr(model, &pair.without_cf)?.values);
        if g_with < g_without {
            satisfied += 1;
        }
    }
    if correct == 0 {
        return Ok(0.0);
    }
    Ok(satisfied as f64 / correct as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearModel;

    #[test]
    fn linear_model_saliency_is_abs_weights() {
        // f(x) = w·x with w = [1, -2] on a 1x2 image -> map [1, 2]
        let m = LinearModel::single_output(2, 1, &[1.0, -2.0]).unwrap();
        let img = Image::new(2, 1, vec![0.3, 0.7]).unwrap();
        let map = saliency(&m, &img, 0).unwrap();
        assert_eq!(map.values.pixels(), &[1.0, 2.0]);
    }

    #[test]
    fn constant_model_yields_zero_maps() {
        let m = LinearModel::single_output(2, 2, &[0.0; 4]).unwrap();
        let img = Image::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(saliency(&m, &img, 0).unwrap().values.pixels().iter().all(|&v| v == 0.0));
        let occ = occlusion(&m, &img, 0, 1, 1).unwrap();
        assert!(occ.values.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn occlusion_rejects_gappy_stride() {
        let m = LinearModel::single_output(4, 4, &[0.0; 16]).unwrap();
        let img = Image::filled(4, 4, 0.5);
        assert!(occlusion(&m, &img, 0, 2, 3).is_err());
    }

    #[test]
    fn occlusion_tiling_count() {
        // 4x4 image, patch 2, stride 2 -> exactly 4 patch evaluations
        assert_eq!(occlusion_patch_count(4, 2, 2), 4);
        assert_eq!(occlusion_patch_count(16, 4, 4), 16);
        // non-dividing stride still covers the far edge
        assert_eq!(occlusion_patch_count(5, 2, 2), 9);
    }

    #[test]
    fn occlusion_locality() {
        // model reads only pixel (0,0): patches containing it score, others 0
        let mut w = vec![0.0; 16];
        w[0] = 2.0;
        let m = LinearModel::single_output(4, 4, &w).unwrap();
        let img = Image::filled(4, 4, 0.5);
        let map = occlusion(&m, &img, 0, 2, 2).unwrap();
        assert!(map.values.get(0, 0) > 0.0);
        assert_eq!(map.values.get(3, 3), 0.0);
        assert_eq!(map.values.get(2, 0), 0.0);
    }

    #[test]
    fn infidelity_of_linear_gradient_explanation_is_zero() {
        let w = [0.4, -1.2, 0.8, 2.0];
        let m = LinearModel::single_output(2, 2, &w).unwrap();
        let img = Image::new(2, 2, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let phi = signed_saliency(&m, &img, 0).unwrap();
        for spec in [
            PerturbationSpec::NoisyBaseline { sigma: 0.3 },
            PerturbationSpec::SquareRemoval { square_side: 1 },
            PerturbationSpec::SubsetBaseline,
        ] {
            let v = infidelity(&phi, &m, &img, 0, &spec, None, 64, 9).unwrap();
            assert!(v <= 1e-10, "{spec:?}: {v}");
        }
    }

    #[test]
    fn zero_explanation_infidelity_is_output_variance() {
        let w = [1.0, 1.0, 1.0, 1.0];
        let m = LinearModel::single_output(2, 2, &w).unwrap();
        let img = Image::filled(2, 2, 0.5);
        let zero_phi = Image::zeros(2, 2);
        let v = infidelity(
            &zero_phi,
            &m,
            &img,
            0,
            &PerturbationSpec::SquareRemoval { square_side: 1 },
            None,
            32,
            3,
        )
        .unwrap();
        // each draw removes one pixel worth 0.5; E[(0 - 0.5)^2] = 0.25
        assert!((v - 0.25).abs() < 1e-12, "{v}");
    }

    #[test]
    fn sensitivity_of_linear_saliency_is_zero() {
        let m = LinearModel::single_output(2, 2, &[0.3, 0.1, -0.2, 0.9]).unwrap();
        let img = Image::filled(2, 2, 0.5);
        let v = max_sensitivity(
            |probe| Ok(saliency(&m, probe, 0)?.values.into_pixels()),
            &img,
            0.1,
            16,
            4,
        )
        .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn sensitivity_of_identity_explainer_is_norm_bounded() {
        let img = Image::filled(3, 3, 0.5);
        let r = 0.2;
        let few = max_sensitivity(|p| Ok(p.pixels().to_vec()), &img, r, 4, 7).unwrap();
        let many = max_sensitivity(|p| Ok(p.pixels().to_vec()), &img, r, 64, 7).unwrap();
        let bound = r * 3.0; // r * sqrt(pixel count)
        assert!(few <= bound && many <= bound);
        assert!(many >= few, "estimate must be monotone in samples");
    }

    #[test]
    fn mcs_two_pixel_case() {
        // model A reads only the masked pixel, model B only the unmasked one
        let a = LinearModel::single_output(2, 1, &[1.0, 0.0]).unwrap();
        let b = LinearModel::single_output(2, 1, &[0.0, 1.0]).unwrap();
        let mask = Mask::new(2, 1, vec![true, false]).unwrap();
        let samples = vec![(Image::new(2, 1, vec![0.5, 0.5]).unwrap(), 0usize)];
        let mcs = model_contrast_score(
            |m: &LinearModel, img: &Image| saliency(m, img, 0),
            &a,
            &b,
            &mask,
            &samples,
        )
        .unwrap();
        assert_eq!(mcs, 1.0);

        // identical models -> 0
        let same = model_contrast_score(
            |m: &LinearModel, img: &Image| saliency(m, img, 0),
            &a,
            &a,
            &mask,
            &samples,
        )
        .unwrap();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn idr_zero_attribution_counts_nothing() {
        let m = LinearModel::single_output(2, 1, &[0.0, 0.0]).unwrap();
        let mask = Mask::new(2, 1, vec![true, false]).unwrap();
        let pairs = vec![IdrPair {
            with_cf: Image::new(2, 1, vec![1.0, 0.0]).unwrap(),
            without_cf: Image::new(2, 1, vec![0.0, 0.0]).unwrap(),
            label: 0,
        }];
        let v = input_dependence_rate(
            |m: &LinearModel, img: &Image| saliency(m, img, 0),
            &m,
            &pairs,
            &mask,
        )
        .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn saliency_is_pure_and_shift_invariant() {
        let model = TinyCnn::new(16, 2, 5).unwrap();
        let img = Image::new(
            16,
            16,
            (0..256).map(|i| ((i * 37) % 251) as f64 / 250.0).collect(),
        )
        .unwrap();
        let a = saliency(&model, &img, 1).unwrap();
        let b = saliency(&model, &img, 1).unwrap();
        assert_eq!(a.values.pixels(), b.values.pixels());

        // adding a constant to all logits (via the last-layer bias) leaves
        // the input gradient unchanged
        let before = signed_saliency(&model, &img, 0).unwrap();
        let shifted: Vec<(String, Tensor)> = model
            .params()
            .iter()
            .map(|(n, t)| {
                if n == model::FC2_B {
                    (
                        n.clone(),
                        Tensor::new(
                            t.shape().to_vec(),
                            t.data().iter().map(|v| v + 3.5).collect(),
                        )
                        .unwrap(),
                    )
                } else {
                    (n.clone(), t.clone())
                }
            })
            .collect();
        let model = TinyCnn::from_named_params(shifted).unwrap();
        let after = signed_saliency(&model, &img, 0).unwrap();
        for (x, y) in before.pixels().iter().zip(after.pixels()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
