//! Counterfactual Bias Insertion: artifact-insertion transforms and the
//! change/switched metrics.
//!
//! Every transform is a pure function of (image, seed, parameters), maps
//! `[0, 1]` images to `[0, 1]` images, and touches only its own geometry,
//! so planted artifacts stay machine-checkable.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, Sample};
use crate::error::{Error, Result};
use crate::exec;
use crate::image::Image;
use crate::model::TinyCnn;
use crate::rng::{self, tags};

// ── stamps ───────────────────────────────────────────────────────────

/// An alpha-composited artifact patch: `out = (1−α)·img + α·value`.
#[derive(Debug, Clone)]
pub struct Stamp {
    pub width: usize,
    pub height: usize,
    pub alpha: Vec<f64>,
    pub value: f64,
}

impl Stamp {
    pub fn empty(width: usize, height: usize) -> Stamp {
        Stamp {
            width,
            height,
            alpha: vec![0.0; width * height],
            value: 0.0,
        }
    }

    /// Number of pixels the stamp actually covers.
    pub fn covered_pixels(&self) -> usize {
        self.alpha.iter().filter(|&&a| a > 0.0).count()
    }

    fn dihedral(&self, variant: u8) -> Stamp {
        let (w, h) = (self.width, self.height);
        let rot90 = variant & 1 != 0;
        let (ow, oh) = if rot90 { (h, w) } else { (w, h) };
        let mut alpha = vec![0.0; self.alpha.len()];
        for y in 0..h {
            for x in 0..w {
                let (mut nx, mut ny) = if rot90 { (h - 1 - y, x) } else { (x, y) };
                if variant & 2 != 0 {
                    nx = ow - 1 - nx;
                }
                if variant & 4 != 0 {
                    ny = oh - 1 - ny;
                }
                alpha[ny * ow + nx] = self.alpha[y * w + x];
            }
        }
        Stamp {
            width: ow,
            height: oh,
            alpha,
            value: self.value,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StampBank {
    pub stamps: Vec<Stamp>,
}

impl StampBank {
    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HairDensity {
    Short,
    Medium,
    Dense,
}

/// Procedural ruler stamps: a tick strip with a baseline, dark marks.
pub fn ruler_bank(side: usize, count: usize, seed: u64) -> StampBank {
    let stamps = (0..count)
        .map(|i| {
            let mut rng = rng::rng_from_seed(rng::subseed(seed, tags::STAMP_BANK, i as u64));
            let w = (side * 6 / 10).max(8);
            let h = (side / 10).max(4);
            let mut alpha = vec![0.0; w * h];
            let spacing = rng.random_range(3..6usize);
            // baseline along the bottom edge
            for x in 0..w {
                alpha[(h - 1) * w + x] = 1.0;
            }
            for (tick, x) in (0..w).step_by(spacing).enumerate() {
                let tick_h = if tick % 5 == 0 { h - 1 } else { (h - 1) / 2 };
                for y in (h - 1 - tick_h)..h {
                    alpha[y * w + x] = 1.0;
                }
            }
            Stamp {
                width: w,
                height: h,
                alpha,
                value: 0.12,
            }
        })
        .collect();
    StampBank { stamps }
}

/// Procedural hair stamps: dark quadratic-curve polylines in three
/// densities. A dense stamp covers far more pixels than a short one.
pub fn hair_bank(side: usize, density: HairDensity, count: usize, seed: u64) -> StampBank {
    let (curves, span, thickness) = match density {
        HairDensity::Short => (1usize, 0.30f64, 1usize),
        HairDensity::Medium => (5, 0.75, 1),
        HairDensity::Dense => (14, 1.00, 2),
    };
    let stamps = (0..count)
        .map(|i| {
            let mut rng = rng::rng_from_seed(rng::subseed(
                seed,
                tags::STAMP_BANK,
                1000 + density as u64 * 100 + i as u64,
            ));
            let w = side.max(8);
            let h = side.max(8);
            let mut alpha = vec![0.0; w * h];
            for _ in 0..curves {
                let reach = span * side as f64;
                let x0 = rng.random_range(0.0..w as f64);
                let y0 = rng.random_range(0.0..h as f64);
                let x2 = (x0 + rng.random_range(-reach..reach)).clamp(0.0, w as f64 - 1.0);
                let y2 = (y0 + rng.random_range(-reach..reach)).clamp(0.0, h as f64 - 1.0);
                let xc = ((x0 + x2) / 2.0 + rng.random_range(-reach..reach) * 0.5)
                    .clamp(0.0, w as f64 - 1.0);
                let yc = ((y0 + y2) / 2.0 + rng.random_range(-reach..reach) * 0.5)
                    .clamp(0.0, h as f64 - 1.0);
                let steps = (3.0 * side as f64) as usize;
                for s in 0..=steps {
                    let t = s as f64 / steps as f64;
                    let mt = 1.0 - t;
                    let x = mt * mt * x0 + 2.0 * mt * t * xc + t * t * x2;
                    let y = mt * mt * y0 + 2.0 * mt * t * yc + t * t * y2;
                    for dy in 0..thickness {
                        for dx in 0..thickness {
                            let px = (x as usize + dx).min(w - 1);
                            let py = (y as usize + dy).min(h - 1);
                            alpha[py * w + px] = 1.0;
                        }
                    }
                }
            }
            Stamp {
                width: w,
                height: h,
                alpha,
                value: 0.15,
            }
        })
        .collect();
    StampBank { stamps }
}

// ── transforms ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStyle {
    /// Dermatoscope-style vignette: everything outside a ring goes black.
    Round,
    /// Black bands across the top and bottom edges.
    Rect,
    /// Pick round or rectangular per seed.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameParams {
    pub style: FrameStyle,
    /// Round-frame radius as a fraction of the image side.
    pub radius_frac: (f64, f64),
    /// Rectangular-frame band height as a fraction of the image side.
    pub band_frac: (f64, f64),
}

impl Default for FrameParams {
    fn default() -> Self {
        FrameParams {
            style: FrameStyle::Round,
            radius_frac: (0.40, 0.48),
            band_frac: (0.05, 0.12),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CircleParams {
    /// Ring radius as a fraction of the image side.
    pub radius_frac: (f64, f64),
}

impl Default for CircleParams {
    fn default() -> Self {
        CircleParams {
            radius_frac: (0.10, 0.25),
        }
    }
}

/// A seeded artifact-insertion transform.
#[derive(Debug, Clone)]
pub enum BiasTransform {
    Identity,
    Frame(FrameParams),
    Ruler(StampBank),
    Hair(StampBank),
    /// Hair and ruler inserted in a single step, in that order.
    HairRuler {
        hair: StampBank,
        ruler: StampBank,
    },
    Circle(CircleParams),
    CoverObject,
}

impl BiasTransform {
    pub fn label(&self) -> &'static str {
        match self {
            BiasTransform::Identity => "identity",
            BiasTransform::Frame(_) => "frame",
            BiasTransform::Ruler(_) => "ruler",
            BiasTransform::Hair(_) => "hair",
            BiasTransform::HairRuler { .. } => "hair_ruler",
            BiasTransform::Circle(_) => "circle",
            BiasTransform::CoverObject => "cover_object",
        }
    }

    /// Apply the transform. `annotation` is needed only for `CoverObject`.
    pub fn apply(
        &self,
        image: &Image,
        seed: u64,
        annotation: Option<&Annotation>,
    ) -> Result<Image> {
        match self {
            BiasTransform::Identity => Ok(image.clone()),
            BiasTransform::Frame(params) => insert_frame_with(image, seed, params),
            BiasTransform::Ruler(bank) => insert_ruler(image, bank, seed),
            BiasTransform::Hair(bank) => insert_hair(image, bank, seed),
            BiasTransform::HairRuler { hair, ruler } => {
                let haired = insert_hair(image, hair, seed)?;
                insert_ruler(&haired, ruler, rng::subseed(seed, tags::CBI, 1))
            }
            BiasTransform::Circle(params) => insert_circle_with(image, seed, params),
            BiasTransform::CoverObject => {
                let ann = annotation.ok_or_else(|| {
                    Error::invalid("cover_object requires an object annotation")
                })?;
                cover_object(image, ann)
            }
        }
    }
}

/// Darken a border region to 0: a ring (round frame) or top/bottom bands
/// (rectangular), geometry drawn from seeded ranges.
pub fn insert_frame(image: &Image, seed: u64) -> Image {
    insert_frame_with(image, seed, &FrameParams::default()).expect("default params are valid")
}

pub fn insert_frame_with(image: &Image, seed: u64, params: &FrameParams) -> Result<Image> {
    let mut rng = rng::rng_from_seed(seed);
    let side = image.width().min(image.height()) as f64;
    let mut out = image.clone();
    let round = match params.style {
        FrameStyle::Round => true,
        FrameStyle::Rect => false,
        FrameStyle::Random => rng.random_range(0..2) == 0,
    };
    if round {
        // round frame: everything at or beyond the radius goes black
        let r = draw_range(&mut rng, params.radius_frac)? * side;
        let cx = (image.width() as f64 - 1.0) / 2.0;
        let cy = (image.height() as f64 - 1.0) / 2.0;
        for y in 0..image.height() {
            for x in 0..image.width() {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                if d >= r {
                    out.set(x, y, 0.0);
                }
            }
        }
    } else {
        let band = (draw_range(&mut rng, params.band_frac)? * side).round() as usize;
        for y in 0..band.min(image.height()) {
            for x in 0..image.width() {
                out.set(x, y, 0.0);
            }
        }
        for y in image.height().saturating_sub(band)..image.height() {
            for x in 0..image.width() {
                out.set(x, y, 0.0);
            }
        }
    }
    Ok(out)
}

fn draw_range(rng: &mut rng::Rng, (lo, hi): (f64, f64)) -> Result<f64> {
    if lo > hi || lo < 0.0 {
        return Err(Error::invalid(format!("invalid parameter range ({lo}, {hi})")));
    }
    Ok(if lo == hi { lo } else { rng.random_range(lo..hi) })
}

/// Composite a randomly selected, randomly rotated stamp at a random
/// in-bounds position.
fn composite_stamp(image: &Image, bank: &StampBank, seed: u64) -> Result<Image> {
    if bank.is_empty() {
        return Err(Error::invalid("stamp bank is empty"));
    }
    let mut rng = rng::rng_from_seed(seed);
    let base = &bank.stamps[rng.random_range(0..bank.stamps.len())];
    let stamp = base.dihedral(rng.random_range(0..8u8));
    if stamp.width > image.width() || stamp.height > image.height() {
        return Err(Error::invalid(format!(
            "stamp {}x{} larger than image {}x{}",
            stamp.width,
            stamp.height,
            image.width(),
            image.height()
        )));
    }
    let max_x = image.width() - stamp.width;
    let max_y = image.height() - stamp.height;
    let ox = if max_x == 0 { 0 } else { rng.random_range(0..=max_x) };
    let oy = if max_y == 0 { 0 } else { rng.random_range(0..=max_y) };
    let mut out = image.clone();
    for y in 0..stamp.height {
        for x in 0..stamp.width {
            let a = stamp.alpha[y * stamp.width + x];
            if a > 0.0 {
                let v = (1.0 - a) * out.get(ox + x, oy + y) + a * stamp.value;
                out.set(ox + x, oy + y, v);
            }
        }
    }
    Ok(out)
}

pub fn insert_ruler(image: &Image, bank: &StampBank, seed: u64) -> Result<Image> {
    composite_stamp(image, bank, seed)
}

pub fn insert_hair(image: &Image, bank: &StampBank, seed: u64) -> Result<Image> {
    composite_stamp(image, bank, seed)
}

/// Bright ring of random center and radius — the null-effect control
/// artifact. Radius zero is the identity.
pub fn insert_circle(image: &Image, seed: u64) -> Image {
    insert_circle_with(image, seed, &CircleParams::default()).expect("default params are valid")
}

pub fn insert_circle_with(image: &Image, seed: u64, params: &CircleParams) -> Result<Image> {
    let mut rng = rng::rng_from_seed(seed);
    let side = image.width().min(image.height()) as f64;
    let r = (draw_range(&mut rng, params.radius_frac)? * side).round() as isize;
    let mut out = image.clone();
    if r == 0 {
        return Ok(out);
    }
    let cx = rng.random_range(r as i64..image.width() as i64 - r as i64) as isize;
    let cy = rng.random_range(r as i64..image.height() as i64 - r as i64) as isize;
    for (x, y) in midpoint_circle(cx, cy, r) {
        if x >= 0 && y >= 0 && (x as usize) < image.width() && (y as usize) < image.height() {
            out.set(x as usize, y as usize, 1.0);
        }
    }
    Ok(out)
}

/// Midpoint-circle rasterization of the ring at radius `r`.
pub fn midpoint_circle(cx: isize, cy: isize, r: isize) -> Vec<(isize, isize)> {
    let mut pts = Vec::new();
    let mut x = r;
    let mut y = 0isize;
    let mut err = 1 - r;
    while x >= y {
        for &(dx, dy) in &[
            (x, y),
            (y, x),
            (-y, x),
            (-x, y),
            (-x, -y),
            (-y, -x),
            (y, -x),
            (x, -y),
        ] {
            pts.push((cx + dx, cy + dy));
        }
        y += 1;
        if err < 0 {
            err += 2 * y + 1;
        } else {
            x -= 1;
            err += 2 * (y - x) + 1;
        }
    }
    pts.sort_unstable();
    pts.dedup();
    pts
}

/// Set a white disk over the annotated object.
pub fn cover_object(image: &Image, annotation: &Annotation) -> Result<Image> {
    if annotation.object_r == 0 {
        return Err(Error::invalid(
            "cover_object: annotation has no object radius",
        ));
    }
    let mut out = image.clone();
    let (cx, cy, r) = (
        annotation.object_cx as f64,
        annotation.object_cy as f64,
        annotation.object_r as f64,
    );
    for y in 0..image.height() {
        for x in 0..image.width() {
            if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r {
                out.set(x, y, 1.0);
            }
        }
    }
    Ok(out)
}

/// Serializable description of a transform, for configuration files. Stamp
/// banks are procedural, so a spec plus a bank seed fully determines the
/// transform.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TransformSpec {
    Identity,
    Frame {
        #[serde(default)]
        params: FrameParams,
    },
    Circle {
        #[serde(default)]
        params: CircleParams,
    },
    Hair {
        density: HairDensity,
    },
    Ruler,
    HairRuler {
        density: HairDensity,
    },
    CoverObject,
}

impl TransformSpec {
    pub fn frame() -> TransformSpec {
        TransformSpec::Frame {
            params: FrameParams::default(),
        }
    }

    pub fn circle() -> TransformSpec {
        TransformSpec::Circle {
            params: CircleParams::default(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            TransformSpec::Identity => "identity",
            TransformSpec::Frame { .. } => "frame",
            TransformSpec::Circle { .. } => "circle",
            TransformSpec::Hair { .. } => "hair",
            TransformSpec::Ruler => "ruler",
            TransformSpec::HairRuler { .. } => "hair_ruler",
            TransformSpec::CoverObject => "cover_object",
        }
    }

    /// Materialize the transform; stamp banks are generated from
    /// `bank_seed` at `stamp_side`, so disjoint train/test banks come from
    /// different seeds.
    pub fn build(&self, stamp_side: usize, bank_seed: u64) -> BiasTransform {
        const BANK_STAMPS: usize = 8;
        match self {
            TransformSpec::Identity => BiasTransform::Identity,
            TransformSpec::Frame { params } => BiasTransform::Frame(*params),
            TransformSpec::Circle { params } => BiasTransform::Circle(*params),
            TransformSpec::Hair { density } => {
                BiasTransform::Hair(hair_bank(stamp_side, *density, BANK_STAMPS, bank_seed))
            }
            TransformSpec::Ruler => {
                BiasTransform::Ruler(ruler_bank(stamp_side, BANK_STAMPS, bank_seed))
            }
            TransformSpec::HairRuler { density } => BiasTransform::HairRuler {
                hair: hair_bank(stamp_side, *density, BANK_STAMPS, bank_seed),
                ruler: ruler_bank(stamp_side, BANK_STAMPS, rng::subseed(bank_seed, tags::STAMP_BANK, 2)),
            },
            TransformSpec::CoverObject => BiasTransform::CoverObject,
        }
    }
}

// ── the audit ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CbiRow {
    pub id: u64,
    /// Class predicted on the original image; `p_*` are its probability.
    pub predicted: usize,
    pub p_orig: f64,
    pub p_biased: f64,
    /// p_orig − p_biased.
    pub change: f64,
    pub switched: bool,
    /// Class predicted after bias insertion.
    pub to: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectionalSwitch {
    pub from: usize,
    pub to: usize,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CbiReport {
    pub transform: String,
    pub sample_count: usize,
    pub mean_change: f64,
    pub median_change: f64,
    /// Largest absolute per-sample change.
    pub max_abs_change: f64,
    pub switched_total: usize,
    pub switched_by_direction: Vec<DirectionalSwitch>,
    pub rows: Vec<CbiRow>,
}

impl CbiReport {
    pub fn switched_fraction(&self) -> f64 {
        if self.sample_count == 0 {
            0.0
        } else {
            self.switched_total as f64 / self.sample_count as f64
        }
    }
}

/// Insert the examined bias into every sample organically and compare the
/// prediction for the originally predicted class before and after.
pub fn run_cbi(
    model: &TinyCnn,
    samples: &[&Sample],
    transform: &BiasTransform,
    seed: u64,
) -> Result<CbiReport> {
    let rows: Vec<Result<CbiRow>> = exec::map_slice(samples, |s| {
        let (predicted, probs) = model.predict(&s.image)?;
        let p_orig = probs[predicted];
        let biased = transform.apply(
            &s.image,
            rng::subseed(seed, tags::CBI, s.id),
            Some(&s.annotation),
        )?;
        let (to, probs_b) = model.predict(&biased)?;
        let p_biased = probs_b[predicted];
        Ok(CbiRow {
            id: s.id,
            predicted,
            p_orig,
            p_biased,
            change: p_orig - p_biased,
            switched: to != predicted,
            to,
        })
    });
    let rows: Vec<CbiRow> = rows.into_iter().collect::<Result<_>>()?;
    Ok(summarize(transform.label().to_string(), rows))
}

fn summarize(transform: String, rows: Vec<CbiRow>) -> CbiReport {
    let n = rows.len();
    let mean_change = if n == 0 {
        0.0
    } else {
        rows.iter().map(|r| r.change).sum::<f64>() / n as f64
    };
    let median_change = median(rows.iter().map(|r| r.change).collect());
    let max_abs_change = rows.iter().map(|r| r.change.abs()).fold(0.0, f64::max);
    let mut directional: std::collections::BTreeMap<(usize, usize), usize> =
        std::collections::BTreeMap::new();
    for r in rows.iter().filter(|r| r.switched) {
        *directional.entry((r.predicted, r.to)).or_default() += 1;
    }
    let switched_by_direction: Vec<DirectionalSwitch> = directional
        .into_iter()
        .map(|((from, to), count)| DirectionalSwitch { from, to, count })
        .collect();
    let switched_total = switched_by_direction.iter().map(|d| d.count).sum();
    CbiReport {
        transform,
        sample_count: n,
        mean_change,
        median_change,
        max_abs_change,
        switched_total,
        switched_by_direction,
        rows,
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}
