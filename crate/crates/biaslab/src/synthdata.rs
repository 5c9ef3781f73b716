//! Synthetic "lesion-like" grayscale datasets with planted, configurable
//! artifact–class correlations, plus the descriptive statistics used to
//! audit them.
//!
//! Class 1 blobs get irregular borders and high-contrast interior texture,
//! class 0 smooth and regular ones, so the class signal is separable
//! without any artifact. Artifacts are inserted by the counterfactual
//! transforms and recorded in the annotations; frames are applied last so
//! that "all four corner pixels are zero" detects exactly the frame images.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cbi::{self, BiasTransform, CircleParams, FrameParams, HairDensity};
use crate::dataset::{Annotation, ArtifactKind, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::exec;
use crate::image::Image;
use crate::rng::{self, tags};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobParams {
    /// Blob radius as a fraction of the image side.
    pub radius_frac: (f64, f64),
    /// Per-image range of the radial border perturbation amplitude. The
    /// class ranges overlap, so some cases stay genuinely ambiguous and
    /// correlated artifacts keep predictive value for a converged model.
    pub irregularity: (f64, f64),
    /// Per-image range of the interior blotch texture amplitude.
    pub texture_contrast: (f64, f64),
    /// Blotch cell size in pixels; coarse cells survive downscaling.
    pub texture_scale: usize,
    /// Mean interior gray level.
    pub interior_level: f64,
}

impl Default for BlobParams {
    fn default() -> Self {
        BlobParams {
            radius_frac: (0.22, 0.32),
            irregularity: (0.0, 0.16),
            texture_contrast: (0.0, 0.14),
            texture_scale: 4,
            interior_level: 0.40,
        }
    }
}

impl BlobParams {
    /// Irregular-border, high-contrast-texture profile for class 1,
    /// overlapping the smooth profile's upper range.
    pub fn irregular() -> BlobParams {
        BlobParams {
            radius_frac: (0.22, 0.32),
            irregularity: (0.09, 0.33),
            texture_contrast: (0.09, 0.39),
            texture_scale: 4,
            interior_level: 0.40,
        }
    }
}

/// Per-artifact planted correlation: the probability of carrying the
/// artifact, conditional on the class.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactPlanEntry {
    pub kind: ArtifactKind,
    pub p_class0: f64,
    pub p_class1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub n_per_class: usize,
    pub side: usize,
    pub class0_blob: BlobParams,
    pub class1_blob: BlobParams,
    pub artifact_plan: Vec<ArtifactPlanEntry>,
    pub hair_density: HairDensity,
    /// Train/val/test fractions; must sum to 1.
    pub split_fractions: (f64, f64, f64),
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            n_per_class: 2000,
            side: 64,
            class0_blob: BlobParams::default(),
            class1_blob: BlobParams::irregular(),
            artifact_plan: vec![ArtifactPlanEntry {
                kind: ArtifactKind::Frame,
                p_class0: 0.1,
                p_class1: 0.9,
            }],
            hair_density: HairDensity::Medium,
            split_fractions: (0.7, 0.1, 0.2),
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        for e in &self.artifact_plan {
            for p in [e.p_class0, e.p_class1] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!(
                        "artifact probability {p} outside [0, 1]"
                    )));
                }
            }
        }
        let (a, b, c) = self.split_fractions;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must sum to 1".into()));
        }
        if self.side < 16 {
            return Err(Error::Config("image side must be at least 16".into()));
        }
        Ok(())
    }
}

/// Deterministically generate the planted-bias dataset: per-image seeds are
/// derived from the spec seed and the image id, so output is byte-identical
/// across runs and thread counts. Pixel values are snapped to the 8-bit
/// grid, making write-then-read the identity.
pub fn generate(spec: &GeneratorSpec) -> Result<Dataset> {
    spec.validate()?;
    let bank_seed = rng::subseed(spec.seed, tags::STAMP_BANK, 0);
    let stamp_side = spec.side / 2;
    let hair = cbi::hair_bank(stamp_side, spec.hair_density, 8, bank_seed);
    let ruler = cbi::ruler_bank(stamp_side, 8, rng::subseed(spec.seed, tags::STAMP_BANK, 1));

    let total = spec.n_per_class * 2;
    let samples: Vec<Result<Sample>> = exec::map_indices(total, |idx| {
        let label = usize::from(idx >= spec.n_per_class);
        let id = idx as u64;
        let image_seed = rng::subseed(spec.seed, tags::DATA_GEN, id);
        let blob = if label == 0 {
            &spec.class0_blob
        } else {
            &spec.class1_blob
        };
        let mut rng = rng::rng_from_seed(image_seed);
        let (mut image, annotation) = render_blob(spec.side, blob, &mut rng);
        let mut annotation = annotation;

        // artifacts roll independently per plan entry; frames go last so
        // corner blackness stays a sound frame detector
        let mut planned: Vec<&ArtifactPlanEntry> = spec.artifact_plan.iter().collect();
        planned.sort_by_key(|e| matches!(e.kind, ArtifactKind::Frame));
        for entry in planned {
            let p = if label == 0 { entry.p_class0 } else { entry.p_class1 };
            if rng.random_range(0.0..1.0) >= p {
                continue;
            }
            let t_seed = rng::subseed(image_seed, tags::CBI, entry.kind as u64);
            image = match entry.kind {
                ArtifactKind::Frame => {
                    BiasTransform::Frame(FrameParams::default()).apply(&image, t_seed, None)?
                }
                ArtifactKind::Ruler => {
                    BiasTransform::Ruler(ruler.clone()).apply(&image, t_seed, None)?
                }
                ArtifactKind::Hair => {
                    BiasTransform::Hair(hair.clone()).apply(&image, t_seed, None)?
                }
                ArtifactKind::Circle => {
                    BiasTransform::Circle(CircleParams::default()).apply(&image, t_seed, None)?
                }
            };
            annotation.set(entry.kind, true);
        }
        image.snap_to_u8_grid();
        Ok(Sample {
            id,
            image,
            label,
            split: Split::Train, // assigned below
            annotation,
            provenance: None,
        })
    });
    let mut samples: Vec<Sample> = samples.into_iter().collect::<Result<_>>()?;
    assign_splits(&mut samples, spec);
    Ok(Dataset { samples })
}

fn render_blob(side: usize, blob: &BlobParams, rng: &mut rng::Rng) -> (Image, Annotation) {
    let s = side as f64;
    let cx = s / 2.0 + rng.random_range(-s / 10.0..s / 10.0);
    let cy = s / 2.0 + rng.random_range(-s / 10.0..s / 10.0);
    let r0 = rng.random_range(blob.radius_frac.0..blob.radius_frac.1) * s;

    let irregularity = draw(rng, blob.irregularity);
    let texture_contrast = draw(rng, blob.texture_contrast);

    // radial border perturbation from a few random harmonics
    let harmonics: Vec<(f64, f64, f64)> = (2..6)
        .map(|h| {
            (
                h as f64,
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();

    // per-cell blotch values; the cell size controls how coarse the
    // interior texture is
    let cell = blob.texture_scale.max(1);
    let grid = side.div_ceil(cell);
    let blotches: Vec<f64> = (0..grid * grid)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();

    let mut pix = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            // skin background with mild speckle, kept well above black
            let noise: f64 = rng.random_range(-0.04..0.04);
            let skin = (0.74 + noise).clamp(0.55, 0.92);
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let dist = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx);
            let wobble: f64 = harmonics
                .iter()
                .map(|(h, a, phase)| a * (h * theta + phase).sin())
                .sum();
            let r_here = r0 * (1.0 + irregularity * wobble / 2.0);
            if dist <= r_here {
                let blotch = blotches[(y / cell) * grid + x / cell];
                let texture = blotch * texture_contrast;
                let edge = ((r_here - dist) / 2.0).clamp(0.0, 1.0);
                let interior = (blob.interior_level + texture).clamp(0.12, 0.9);
                pix[y * side + x] = skin + edge * (interior - skin);
            } else {
                pix[y * side + x] = skin;
            }
        }
    }
    let image = Image::new(side, side, pix).expect("blob raster");
    let annotation = Annotation {
        object_cx: cx.round() as usize,
        object_cy: cy.round() as usize,
        object_r: r0.ceil() as usize + 1,
        ..Annotation::default()
    };
    (image, annotation)
}

fn draw(rng: &mut rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn assign_splits(samples: &mut [Sample], spec: &GeneratorSpec) {
    let (train_frac, val_frac, _) = spec.split_fractions;
    for class in 0..2 {
        let idx: Vec<usize> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        let mut order = idx.clone();
        let mut rng = rng::rng_from_seed(rng::subseed(spec.seed, tags::DATA_GEN, 1_000_000 + class as u64));
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let n = order.len();
        let n_train = (n as f64 * train_frac).round() as usize;
        let n_val = (n as f64 * val_frac).round() as usize;
        for (pos, &i) in order.iter().enumerate() {
            samples[i].split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
}

/// All four corner pixels exactly zero — the machine check that agrees with
/// the frame annotation on generated data.
pub fn detect_frame(image: &Image) -> bool {
    let (w, h) = (image.width(), image.height());
    image.get(0, 0) == 0.0
        && image.get(w - 1, 0) == 0.0
        && image.get(0, h - 1) == 0.0
        && image.get(w - 1, h - 1) == 0.0
}

// ── descriptive statistics ───────────────────────────────────────────

/// Count of images in `class` carrying `artifact`, divided by the class
/// size.
pub fn artifact_ratio(dataset: &Dataset, artifact: ArtifactKind, class: usize) -> Result<f64> {
    let total = dataset.count_class(class);
    if total == 0 {
        return Err(Error::data(format!("artifact_ratio: class {class} is empty")));
    }
    let with = dataset
        .samples
        .iter()
        .filter(|s| s.label == class && s.annotation.has(artifact))
        .count();
    Ok(with as f64 / total as f64)
}

/// Q^class = class-1 artifact ratio over class-0 artifact ratio. A zero
/// denominator yields the +infinity sentinel (flagged in the stats report).
pub fn class_ratio(dataset: &Dataset, artifact: ArtifactKind) -> Result<f64> {
    let q0 = artifact_ratio(dataset, artifact, 0)?;
    let q1 = artifact_ratio(dataset, artifact, 1)?;
    if q0 == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(q1 / q0)
}

/// Pearson correlation between two equal-length observations with a
/// two-sided p-value from the t-distribution with n−2 degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::invalid("pearson: length mismatch"));
    }
    if n < 3 {
        return Err(Error::invalid("pearson: need at least 3 observations"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("pearson: constant variable"));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        // two-sided p via the regularized incomplete beta
        incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
    };
    Ok((r, p))
}

/// Pearson correlation of an artifact indicator against the binary label.
pub fn pearson_artifact(dataset: &Dataset, artifact: ArtifactKind) -> Result<(f64, f64)> {
    let x: Vec<f64> = dataset
        .samples
        .iter()
        .map(|s| if s.annotation.has(artifact) { 1.0 } else { 0.0 })
        .collect();
    let y: Vec<f64> = dataset.samples.iter().map(|s| s.label as f64).collect();
    pearson(&x, &y)
}

/// Cohen's kappa: (p_o − p_e)/(1 − p_e) with marginal-product chance
/// agreement, computed from integer counts so exact fixtures stay exact.
pub fn cohens_kappa(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    if labels_a.len() != labels_b.len() {
        return Err(Error::invalid("cohens_kappa: length mismatch"));
    }
    let n = labels_a.len();
    if n == 0 {
        return Err(Error::invalid("cohens_kappa: empty input"));
    }
    let k = labels_a
        .iter()
        .chain(labels_b)
        .map(|&l| l + 1)
        .max()
        .unwrap_or(1);
    let mut row = vec![0u64; k];
    let mut col = vec![0u64; k];
    let mut agree = 0u64;
    for (&a, &b) in labels_a.iter().zip(labels_b) {
        row[a] += 1;
        col[b] += 1;
        if a == b {
            agree += 1;
        }
    }
    let n = n as u64;
    let chance: u64 = row.iter().zip(&col).map(|(r, c)| r * c).sum();
    if chance == n * n {
        return Err(Error::invalid(
            "cohens_kappa: degenerate marginals (chance agreement is 1)",
        ));
    }
    // kappa = (agree·n − Σ row·col) / (n² − Σ row·col)
    Ok((agree * n) as f64 - chance as f64)
        .map(|num| num / ((n * n - chance) as f64))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactStats {
    pub kind: ArtifactKind,
    pub count_class0: usize,
    pub count_class1: usize,
    pub ratio_class0: f64,
    pub ratio_class1: f64,
    /// Serialized as `null` when the class-0 ratio is zero (the +infinity
    /// sentinel case); see `class_ratio_undefined`.
    pub class_ratio: Option<f64>,
    pub class_ratio_undefined: bool,
    pub pearson_r: Option<f64>,
    pub pearson_p: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsReport {
    pub n_class0: usize,
    pub n_class1: usize,
    pub per_artifact: Vec<ArtifactStats>,
}

/// The per-artifact cardinality/ratio/correlation table for a dataset.
pub fn stats_report(dataset: &Dataset) -> Result<StatsReport> {
    let per_artifact = ArtifactKind::ALL
        .iter()
        .map(|&kind| {
            let count = |class: usize| {
                dataset
                    .samples
                    .iter()
                    .filter(|s| s.label == class && s.annotation.has(kind))
                    .count()
            };
            let ratio_class0 = artifact_ratio(dataset, kind, 0)?;
            let ratio_class1 = artifact_ratio(dataset, kind, 1)?;
            let cr = class_ratio(dataset, kind)?;
            let (pearson_r, pearson_p) = match pearson_artifact(dataset, kind) {
                Ok((r, p)) => (Some(r), Some(p)),
                Err(_) => (None, None), // constant indicator
            };
            Ok(ArtifactStats {
                kind,
                count_class0: count(0),
                count_class1: count(1),
                ratio_class0,
                ratio_class1,
                class_ratio: cr.is_finite().then_some(cr),
                class_ratio_undefined: !cr.is_finite(),
                pearson_r,
                pearson_p,
            })
        })
        .collect::<Result<_>>()?;
    Ok(StatsReport {
        n_class0: dataset.count_class(0),
        n_class1: dataset.count_class(1),
        per_artifact,
    })
}

/// Regularized incomplete beta I_x(a, b) by continued fraction.
fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Lentz's continued fraction for the incomplete beta.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 3e-16;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos log-gamma.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for c in COEFFS {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A dataset of 1×1 stubs carrying only labels and one artifact flag.
    pub(crate) fn fixture_from_counts(
        n0: usize,
        with0: usize,
        n1: usize,
        with1: usize,
        kind: ArtifactKind,
    ) -> Dataset {
        let mut samples = Vec::new();
        for i in 0..n0 + n1 {
            let label = usize::from(i >= n0);
            let has = if label == 0 { i < with0 } else { i - n0 < with1 };
            let mut annotation = Annotation::default();
            annotation.set(kind, has);
            samples.push(Sample {
                id: i as u64,
                image: Image::filled(1, 1, 0.5),
                label,
                split: Split::Train,
                annotation,
                provenance: None,
            });
        }
        Dataset { samples }
    }

    #[test]
    fn table_fixture_frame_row() {
        // benign 104/2001 -> 5.20%, malignant 521/2000 -> 26.05%, ratio 5.01
        let ds = fixture_from_counts(2001, 104, 2000, 521, ArtifactKind::Frame);
        let q0 = artifact_ratio(&ds, ArtifactKind::Frame, 0).unwrap();
        let q1 = artifact_ratio(&ds, ArtifactKind::Frame, 1).unwrap();
        let qc = class_ratio(&ds, ArtifactKind::Frame).unwrap();
        assert_eq!(format!("{:.2}", q0 * 100.0), "5.20");
        assert_eq!(format!("{:.2}", q1 * 100.0), "26.05");
        assert_eq!(format!("{:.2}", qc), "5.01");
    }

    #[test]
    fn table_fixture_hair_row() {
        // hair 958/2001 -> 47.88%, 868/2000 -> 43.40%, ratio 0.91
        let ds = fixture_from_counts(2001, 958, 2000, 868, ArtifactKind::Hair);
        let q0 = artifact_ratio(&ds, ArtifactKind::Hair, 0).unwrap();
        let q1 = artifact_ratio(&ds, ArtifactKind::Hair, 1).unwrap();
        let qc = class_ratio(&ds, ArtifactKind::Hair).unwrap();
        assert_eq!(format!("{:.2}", q0 * 100.0), "47.88");
        assert_eq!(format!("{:.2}", q1 * 100.0), "43.40");
        assert_eq!(format!("{:.2}", qc), "0.91");
    }

    #[test]
    fn ratio_edge_cases() {
        let ds = fixture_from_counts(10, 0, 10, 10, ArtifactKind::Circle);
        assert_eq!(artifact_ratio(&ds, ArtifactKind::Circle, 0).unwrap(), 0.0);
        assert_eq!(artifact_ratio(&ds, ArtifactKind::Circle, 1).unwrap(), 1.0);
        assert!(class_ratio(&ds, ArtifactKind::Circle).unwrap().is_infinite());

        let equal = fixture_from_counts(10, 4, 10, 4, ArtifactKind::Ruler);
        assert_eq!(class_ratio(&equal, ArtifactKind::Ruler).unwrap(), 1.0);
        // 40% / 20% -> 2.0
        let hand = fixture_from_counts(10, 2, 10, 4, ArtifactKind::Ruler);
        assert!((class_ratio(&hand, ArtifactKind::Ruler).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_phi_fixture() {
        // 2x2 counts a=45, b=5, c=5, d=45 -> phi = 0.8
        let ds = fixture_from_counts(50, 5, 50, 45, ArtifactKind::Frame);
        let (r, p) = pearson_artifact(&ds, ArtifactKind::Frame).unwrap();
        assert!((r - 0.8).abs() < 1e-12, "r = {r}");
        // scipy.stats.pearsonr reference
        assert!((p - 1.81359988167959e-23).abs() < 1e-27, "p = {p}");
    }

    #[test]
    fn pearson_identity_and_errors() {
        let x = [1.0, 0.0, 1.0, 0.0, 1.0];
        let (r, p) = pearson(&x, &x).unwrap();
        assert_eq!(r, 1.0);
        assert_eq!(p, 0.0);
        let constant = [1.0; 5];
        assert!(pearson(&x, &constant).is_err());
        assert!(pearson(&x[..2], &x[..2]).is_err());
    }

    #[test]
    fn pearson_p_values_match_scipy() {
        for (r_target, n, want_p) in [
            (0.5f64, 20usize, 0.0247695588041097f64),
            (0.1, 12, 0.757158109101562),
            (-0.6, 30, 0.000457055239405078),
        ] {
            // build x, y achieving exactly this r is fiddly; instead check
            // the p-value transform directly through the public API by
            // reproducing its formula
            let df = (n - 2) as f64;
            let t = r_target * (df / (1.0 - r_target * r_target)).sqrt();
            let p = incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
            assert!(
                (p - want_p).abs() < want_p.abs() * 1e-10,
                "r={r_target} n={n}: {p} vs {want_p}"
            );
        }
    }

    #[test]
    fn kappa_fixtures() {
        // perfect agreement with varied labels
        let a = [0, 1, 0, 1, 2];
        assert_eq!(cohens_kappa(&a, &a).unwrap(), 1.0);

        // counts a=4, b=1, c=1, d=4: p_o = 0.8, p_e = 0.5, kappa = 0.6 exactly
        let x = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let y = [0, 0, 0, 0, 1, 0, 1, 1, 1, 1];
        assert_eq!(cohens_kappa(&x, &y).unwrap(), 0.6);

        // agreement exactly at chance: independent marginals
        let x = [0, 0, 1, 1];
        let y = [0, 1, 0, 1];
        assert_eq!(cohens_kappa(&x, &y).unwrap(), 0.0);

        // degenerate marginals rejected
        let c = [0, 0, 0];
        assert!(cohens_kappa(&c, &c).is_err());
    }

    #[test]
    fn degenerate_plan_produces_exact_frequencies() {
        let spec = GeneratorSpec {
            n_per_class: 30,
            side: 32,
            artifact_plan: vec![ArtifactPlanEntry {
                kind: ArtifactKind::Frame,
                p_class0: 0.0,
                p_class1: 1.0,
            }],
            seed: 5,
            ..GeneratorSpec::default()
        };
        let ds = generate(&spec).unwrap();
        assert_eq!(artifact_ratio(&ds, ArtifactKind::Frame, 0).unwrap(), 0.0);
        assert_eq!(artifact_ratio(&ds, ArtifactKind::Frame, 1).unwrap(), 1.0);
    }

    #[test]
    fn empty_plan_yields_no_annotations() {
        let spec = GeneratorSpec {
            n_per_class: 10,
            side: 32,
            artifact_plan: vec![],
            seed: 1,
            ..GeneratorSpec::default()
        };
        let ds = generate(&spec).unwrap();
        for s in &ds.samples {
            assert_eq!(
                (s.annotation.frame, s.annotation.ruler, s.annotation.hair, s.annotation.circle),
                (false, false, false, false)
            );
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = GeneratorSpec {
            n_per_class: 12,
            side: 32,
            seed: 9,
            ..GeneratorSpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.image.pixels(), sb.image.pixels());
            assert_eq!(sa.split, sb.split);
            assert_eq!(sa.annotation, sb.annotation);
        }
    }

    #[test]
    fn frame_annotation_matches_corner_detector() {
        let spec = GeneratorSpec {
            n_per_class: 40,
            side: 32,
            artifact_plan: vec![
                ArtifactPlanEntry {
                    kind: ArtifactKind::Frame,
                    p_class0: 0.3,
                    p_class1: 0.7,
                },
                ArtifactPlanEntry {
                    kind: ArtifactKind::Hair,
                    p_class0: 0.5,
                    p_class1: 0.5,
                },
                ArtifactPlanEntry {
                    kind: ArtifactKind::Ruler,
                    p_class0: 0.4,
                    p_class1: 0.4,
                },
                ArtifactPlanEntry {
                    kind: ArtifactKind::Circle,
                    p_class0: 0.2,
                    p_class1: 0.2,
                },
            ],
            seed: 21,
            ..GeneratorSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let mut frames = 0;
        for s in &ds.samples {
            assert_eq!(
                detect_frame(&s.image),
                s.annotation.frame,
                "id {} disagrees",
                s.id
            );
            frames += usize::from(s.annotation.frame);
        }
        assert!(frames > 0);
    }

    #[test]
    fn binomial_concentration_of_plan() {
        let spec = GeneratorSpec {
            n_per_class: 1000,
            side: 16,
            artifact_plan: vec![ArtifactPlanEntry {
                kind: ArtifactKind::Frame,
                p_class0: 0.1,
                p_class1: 0.9,
            }],
            seed: 3,
            ..GeneratorSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let q0 = artifact_ratio(&ds, ArtifactKind::Frame, 0).unwrap();
        let q1 = artifact_ratio(&ds, ArtifactKind::Frame, 1).unwrap();
        assert!((q0 - 0.1).abs() < 0.03, "q0 = {q0}");
        assert!((q1 - 0.9).abs() < 0.03, "q1 = {q1}");
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let spec = GeneratorSpec {
            n_per_class: 100,
            side: 16,
            seed: 2,
            ..GeneratorSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let train = ds.with_split(Split::Train).len();
        let val = ds.with_split(Split::Val).len();
        let test = ds.with_split(Split::Test).len();
        assert_eq!(train + val + test, 200);
        assert_eq!(train, 140);
        assert_eq!(val, 20);
        assert_eq!(test, 40);
    }
}
