//! Global Explanations for Bias Identification: preprocess images and
//! attribution maps, embed both with Isomap, concatenate, cluster, report.
//! SpRAy (downscaled maps only) and IsoSpRAy (Isomap on maps only) are kept
//! as ablation modes.

use serde::{Deserialize, Serialize};

use crate::attribution::{self, ExplainerKind, LrpConfig};
use crate::clustering::{self, SelectKMethod};
use crate::dataset::{ArtifactKind, Sample};
use crate::embedding::{self, EmbeddingConfig};
use crate::error::{Error, Result};
use crate::exec;
use crate::image::Image;
use crate::model::TinyCnn;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GebiMode {
    /// Downscaled attribution maps only.
    Spray,
    /// Isomap-reduced attribution maps only.
    IsoSpray,
    /// Isomap-reduced images concatenated with Isomap-reduced maps.
    Gebi,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GebiConfig {
    pub mode: GebiMode,
    /// The single class whose predictions are being explained.
    pub target_class: usize,
    pub image_dims: usize,
    pub attribution_dims: usize,
    pub knn_k: usize,
    /// Fixed cluster count; when absent, `select_method` picks one in
    /// `[2, select_k_max]`.
    pub cluster_k: Option<usize>,
    pub select_method: SelectKMethod,
    pub select_k_max: usize,
    pub explainer: ExplainerKind,
    pub lrp: LrpConfig,
    /// Occlusion geometry when `explainer` is `occlusion`.
    pub occlusion_patch: usize,
    pub occlusion_stride: usize,
    /// Analysis raster side for preprocessing (resize + equalize + stretch).
    pub analysis_side: usize,
    /// Downscale side for spray mode.
    pub spray_side: usize,
    pub preprocess_images: bool,
    pub preprocess_maps: bool,
    pub seed: u64,
}

impl Default for GebiConfig {
    fn default() -> Self {
        GebiConfig {
            mode: GebiMode::Gebi,
            target_class: 1,
            image_dims: 10,
            attribution_dims: 20,
            knn_k: 10,
            cluster_k: None,
            select_method: SelectKMethod::Elbow,
            select_k_max: 8,
            explainer: ExplainerKind::Lrp,
            lrp: LrpConfig::default(),
            occlusion_patch: 8,
            occlusion_stride: 4,
            analysis_side: 45,
            spray_side: 10,
            preprocess_images: true,
            preprocess_maps: true,
            seed: 0,
        }
    }
}

impl GebiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_dims == 0 || self.attribution_dims == 0 {
            return Err(Error::Config("embedding dimensions must be >= 1".into()));
        }
        if self.mode == GebiMode::Gebi && self.attribution_dims < self.image_dims {
            return Err(Error::Config(
                "gebi mode expects the attribution vector to be at least as large as the image vector (about twice as large works best)"
                    .into(),
            ));
        }
        if self.analysis_side == 0 || self.spray_side == 0 {
            return Err(Error::Config("raster sides must be >= 1".into()));
        }
        if let Some(k) = self.cluster_k {
            if k == 0 {
                return Err(Error::Config("cluster_k must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Resize to the analysis side, 256-bin histogram equalization, then a
/// linear contrast stretch to `[0, 1]`. Constant rasters pass through the
/// equalization unchanged.
pub fn preprocess(image: &Image, side: usize) -> Result<Image> {
    let resized = image.resize_bilinear(side)?;
    Ok(resized.equalize_histogram().stretch_contrast())
}

/// Per-sample embedding vectors for the selected class, plus bookkeeping.
#[derive(Debug, Clone)]
pub struct GebiEmbeddings {
    pub vectors: Tensor,
    pub ids: Vec<u64>,
    /// Connectivity repairs performed inside Isomap.
    pub repairs: usize,
}

fn attribution_raster(model: &TinyCnn, cfg: &GebiConfig, image: &Image) -> Result<Image> {
    let prepared = model.prepare(image)?;
    let map = match cfg.explainer {
        ExplainerKind::Saliency => attribution::saliency(model, &prepared, cfg.target_class)?,
        ExplainerKind::Occlusion => attribution::occlusion(
            model,
            &prepared,
            cfg.target_class,
            cfg.occlusion_patch,
            cfg.occlusion_stride,
        )?,
        ExplainerKind::Lrp => {
            attribution::lrp_epsilon(model, &prepared, cfg.target_class, &cfg.lrp)?
        }
    };
    Ok(map.values)
}

fn analysis_raster(image: &Image, side: usize, apply_preprocess: bool) -> Result<Image> {
    if apply_preprocess {
        preprocess(image, side)
    } else {
        image.resize_bilinear(side)
    }
}

fn rows_to_tensor(rows: Vec<Vec<f64>>) -> Result<Tensor> {
    let n = rows.len();
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    Tensor::new(vec![n, d], rows.into_iter().flatten().collect())
}

/// Block z-normalization: center each column, then divide the whole block
/// by its root-mean-square so concatenated modalities contribute on the
/// same scale while the within-modality eigenvalue weighting survives.
/// All-constant blocks become zero.
fn z_normalize(t: &Tensor) -> Tensor {
    let (n, d) = (t.rows(), t.cols());
    let mut out = t.data().to_vec();
    for j in 0..d {
        let mean: f64 = (0..n).map(|i| t.data()[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * d + j] -= mean;
        }
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
    if rms > 0.0 {
        for v in &mut out {
            *v /= rms;
        }
    }
    Tensor::new(vec![n, d], out).expect("same shape")
}

fn concat_columns(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.rows();
    let (da, db) = (a.cols(), b.cols());
    let mut out = Vec::with_capacity(n * (da + db));
    for i in 0..n {
        out.extend_from_slice(a.row(i));
        out.extend_from_slice(b.row(i));
    }
    Tensor::new(vec![n, da + db], out).expect("concat shape")
}

/// Build per-sample vectors for the configured mode from the samples of the
/// target class.
pub fn build_embeddings(
    samples: &[&Sample],
    model: &TinyCnn,
    cfg: &GebiConfig,
) -> Result<GebiEmbeddings> {
    cfg.validate()?;
    let selected: Vec<&&Sample> = samples
        .iter()
        .filter(|s| s.label == cfg.target_class)
        .collect();
    let n = selected.len();
    if n == 0 {
        return Err(Error::data(format!(
            "gebi: no samples of class {}",
            cfg.target_class
        )));
    }
    if n < cfg.knn_k + 1 {
        return Err(Error::data(format!(
            "gebi: {n} samples is fewer than k+1 = {} neighbours",
            cfg.knn_k + 1
        )));
    }
    let ids: Vec<u64> = selected.iter().map(|s| s.id).collect();

    let maps: Vec<Result<Image>> = exec::map_slice(&selected, |s| {
        let raster = attribution_raster(model, cfg, &s.image)?;
        analysis_raster(&raster, cfg.analysis_side, cfg.preprocess_maps)
    });
    let maps: Vec<Image> = maps.into_iter().collect::<Result<_>>()?;

    match cfg.mode {
        GebiMode::Spray => {
            let rows: Vec<Vec<f64>> = maps
                .iter()
                .map(|m| embedding::downscale(m, cfg.spray_side))
                .collect::<Result<_>>()?;
            Ok(GebiEmbeddings {
                vectors: rows_to_tensor(rows)?,
                ids,
                repairs: 0,
            })
        }
        GebiMode::IsoSpray => {
            let rows: Vec<Vec<f64>> = maps.iter().map(|m| m.pixels().to_vec()).collect();
            let iso = embedding::isomap(
                &rows_to_tensor(rows)?,
                &EmbeddingConfig {
                    k_neighbors: cfg.knn_k,
                    target_dims: cfg.attribution_dims,
                },
            )?;
            Ok(GebiEmbeddings {
                vectors: iso.coordinates,
                ids,
                repairs: iso.repairs,
            })
        }
        GebiMode::Gebi => {
            let image_rows: Vec<Vec<f64>> = selected
                .iter()
                .map(|s| {
                    Ok(analysis_raster(&s.image, cfg.analysis_side, cfg.preprocess_images)?
                        .into_pixels())
                })
                .collect::<Result<_>>()?;
            let iso_images = embedding::isomap(
                &rows_to_tensor(image_rows)?,
                &EmbeddingConfig {
                    k_neighbors: cfg.knn_k,
                    target_dims: cfg.image_dims,
                },
            )?;
            let map_rows: Vec<Vec<f64>> = maps.iter().map(|m| m.pixels().to_vec()).collect();
            let iso_maps = embedding::isomap(
                &rows_to_tensor(map_rows)?,
                &EmbeddingConfig {
                    k_neighbors: cfg.knn_k,
                    target_dims: cfg.attribution_dims,
                },
            )?;
            let vectors = concat_columns(
                &z_normalize(&iso_images.coordinates),
                &z_normalize(&iso_maps.coordinates),
            );
            Ok(GebiEmbeddings {
                vectors,
                ids,
                repairs: iso_images.repairs + iso_maps.repairs,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ArtifactFrequencies {
    pub frame: f64,
    pub ruler: f64,
    pub hair: f64,
    pub circle: f64,
}

impl ArtifactFrequencies {
    pub fn get(&self, kind: ArtifactKind) -> f64 {
        match kind {
            ArtifactKind::Frame => self.frame,
            ArtifactKind::Ruler => self.ruler,
            ArtifactKind::Hair => self.hair,
            ArtifactKind::Circle => self.circle,
        }
    }

    fn set(&mut self, kind: ArtifactKind, v: f64) {
        match kind {
            ArtifactKind::Frame => self.frame = v,
            ArtifactKind::Ruler => self.ruler = v,
            ArtifactKind::Hair => self.hair = v,
            ArtifactKind::Circle => self.circle = v,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterInfo {
    pub index: usize,
    pub size: usize,
    pub member_ids: Vec<u64>,
    /// Fraction of members bearing each annotated artifact.
    pub artifact_frequency: ArtifactFrequencies,
    pub class_counts: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    pub mode: GebiMode,
    pub config: GebiConfig,
    pub k: usize,
    pub k_was_selected: bool,
    pub clusters: Vec<ClusterInfo>,
    /// Per artifact, the highest member frequency over all clusters.
    pub best_purity: ArtifactFrequencies,
    pub isomap_repairs: usize,
}

/// The full pipeline: embeddings → spectral clustering → artifact-frequency
/// report (the machine-checkable surrogate for visual cluster inspection).
pub fn run_gebi(samples: &[&Sample], model: &TinyCnn, cfg: &GebiConfig) -> Result<ClusterReport> {
    let embeddings = build_embeddings(samples, model, cfg)?;
    let n = embeddings.ids.len();
    let (k, k_was_selected) = match cfg.cluster_k {
        Some(k) => (k.min(n), false),
        None => {
            let max_k = cfg.select_k_max.min(n);
            let sel = clustering::select_k(
                &embeddings.vectors,
                2.min(max_k),
                max_k,
                cfg.select_method,
                cfg.knn_k.min(n - 1),
                cfg.seed,
            )?;
            (sel.k, true)
        }
    };
    let assignment =
        clustering::spectral_cluster(&embeddings.vectors, k, cfg.knn_k.min(n - 1), cfg.seed)?;

    let by_id: std::collections::HashMap<u64, &Sample> = samples
        .iter()
        .filter(|s| s.label == cfg.target_class)
        .map(|s| (s.id, *s))
        .collect();
    let classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(1);
    let mut clusters = Vec::with_capacity(k);
    for c in 0..k {
        let member_ids: Vec<u64> = embeddings
            .ids
            .iter()
            .zip(&assignment.labels)
            .filter(|(_, &l)| l == c)
            .map(|(&id, _)| id)
            .collect();
        let size = member_ids.len();
        let mut freq = ArtifactFrequencies::default();
        let mut class_counts = vec![0usize; classes];
        for id in &member_ids {
            let s = by_id[id];
            class_counts[s.label] += 1;
            for kind in ArtifactKind::ALL {
                if s.annotation.has(kind) {
                    freq.set(kind, freq.get(kind) + 1.0);
                }
            }
        }
        if size > 0 {
            for kind in ArtifactKind::ALL {
                freq.set(kind, freq.get(kind) / size as f64);
            }
        }
        clusters.push(ClusterInfo {
            index: c,
            size,
            member_ids,
            artifact_frequency: freq,
            class_counts,
        });
    }
    let mut best_purity = ArtifactFrequencies::default();
    for kind in ArtifactKind::ALL {
        let best = clusters
            .iter()
            .map(|c| c.artifact_frequency.get(kind))
            .fold(0.0, f64::max);
        best_purity.set(kind, best);
    }
    Ok(ClusterReport {
        mode: cfg.mode,
        config: cfg.clone(),
        k,
        k_was_selected,
        clusters,
        best_purity,
        isomap_repairs: embeddings.repairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preprocess_output_spans_unit_interval() {
        let img = Image::new(
            8,
            8,
            (0..64).map(|i| 0.3 + 0.4 * (i as f64 / 63.0)).collect(),
        )
        .unwrap();
        let out = preprocess(&img, 45).unwrap();
        assert_eq!(out.side(), 45);
        let (mn, mx) = out.min_max();
        assert_eq!(mn, 0.0);
        assert_eq!(mx, 1.0);
    }

    #[test]
    fn preprocess_constant_image_is_unchanged() {
        let img = Image::filled(8, 8, 0.4);
        let out = preprocess(&img, 8).unwrap();
        assert_eq!(out.pixels(), img.pixels());
    }

    #[test]
    fn gebi_vector_length_is_sum_of_dims() {
        // default dims: 10 + 20 = 30
        let cfg = GebiConfig::default();
        assert_eq!(cfg.image_dims + cfg.attribution_dims, 30);
    }

    #[test]
    fn config_rejects_inverted_dims_in_gebi_mode() {
        let cfg = GebiConfig {
            image_dims: 20,
            attribution_dims: 10,
            ..GebiConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn z_normalize_centers_columns() {
        let t = Tensor::matrix(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        let z = z_normalize(&t);
        let col0: Vec<f64> = (0..3).map(|i| z.data()[i * 2]).collect();
        let mean: f64 = col0.iter().sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        // constant column becomes zero
        assert!((0..3).all(|i| z.data()[i * 2 + 1] == 0.0));
    }

    #[test]
    fn identical_inputs_get_identical_vectors() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        let z = z_normalize(&a);
        assert_eq!(z.row(0), z.row(1));
        let c = concat_columns(&a, &a);
        assert_eq!(c.row(0), c.row(1));
        assert_eq!(c.cols(), 4);
    }
}
