//! Labeled image collections with per-image artifact annotations, and the
//! on-disk layout: a `manifest.csv` next to one PGM file per image.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::data(format!("unknown split tag {other:?}"))),
        }
    }
}

/// Which artifacts were actually applied to an image, plus the lesion-blob
/// geometry for covered-object experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Annotation {
    pub frame: bool,
    pub ruler: bool,
    pub hair: bool,
    pub circle: bool,
    pub object_cx: usize,
    pub object_cy: usize,
    pub object_r: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Frame,
    Ruler,
    Hair,
    Circle,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 4] = [
        ArtifactKind::Frame,
        ArtifactKind::Ruler,
        ArtifactKind::Hair,
        ArtifactKind::Circle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::Frame => "frame",
            ArtifactKind::Ruler => "ruler",
            ArtifactKind::Hair => "hair",
            ArtifactKind::Circle => "circle",
        }
    }
}

impl Annotation {
    pub fn has(&self, kind: ArtifactKind) -> bool {
        match kind {
            ArtifactKind::Frame => self.frame,
            ArtifactKind::Ruler => self.ruler,
            ArtifactKind::Hair => self.hair,
            ArtifactKind::Circle => self.circle,
        }
    }

    pub fn set(&mut self, kind: ArtifactKind, value: bool) {
        match kind {
            ArtifactKind::Frame => self.frame = value,
            ArtifactKind::Ruler => self.ruler = value,
            ArtifactKind::Hair => self.hair = value,
            ArtifactKind::Circle => self.circle = value,
        }
    }
}

/// Provenance of a synthesized image (style-transfer outputs).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub content_id: u64,
    pub style_id: u64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: u64,
    pub image: Image,
    pub label: usize,
    pub split: Split,
    pub annotation: Annotation,
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.samples.iter().map(|s| s.label + 1).max().unwrap_or(0)
    }

    /// Samples carrying the given split tag, in manifest order.
    pub fn with_split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn with_class(&self, label: usize) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.label == label).collect()
    }

    /// New dataset holding clones of the given split only.
    pub fn subset(&self, split: Split) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .filter(|s| s.split == split)
                .cloned()
                .collect(),
        }
    }

    pub fn count_class(&self, label: usize) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    // ── on-disk layout ─────────────────────────────────────────────

    const MANIFEST_HEADER: [&'static str; 11] = [
        "id", "filename", "label", "split", "frame", "ruler", "hair", "circle", "object_cx",
        "object_cy", "object_r",
    ];

    /// Write `manifest.csv` plus one PGM per image into `dir`. Synthetic
    /// samples additionally get a `provenance.csv` sidecar.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("manifest.csv"))
            .map_err(|e| Error::data(format!("manifest.csv: {e}")))?;
        w.write_record(Self::MANIFEST_HEADER)
            .map_err(|e| Error::data(format!("manifest.csv: {e}")))?;
        let mut provenance: Vec<(u64, Provenance)> = Vec::new();
        for s in &self.samples {
            let filename = format!("img_{:06}.pgm", s.id);
            s.image.write_pgm(&dir.join(&filename))?;
            let a = &s.annotation;
            w.write_record([
                s.id.to_string(),
                filename,
                s.label.to_string(),
                s.split.as_str().to_string(),
                bool01(a.frame),
                bool01(a.ruler),
                bool01(a.hair),
                bool01(a.circle),
                a.object_cx.to_string(),
                a.object_cy.to_string(),
                a.object_r.to_string(),
            ])
            .map_err(|e| Error::data(format!("manifest.csv: {e}")))?;
            if let Some(p) = s.provenance {
                provenance.push((s.id, p));
            }
        }
        w.flush()?;
        if !provenance.is_empty() {
            let mut pw = csv::Writer::from_path(dir.join("provenance.csv"))
                .map_err(|e| Error::data(format!("provenance.csv: {e}")))?;
            pw.write_record(["id", "content_id", "style_id", "iterations"])
                .map_err(|e| Error::data(format!("provenance.csv: {e}")))?;
            for (id, p) in provenance {
                pw.write_record([
                    id.to_string(),
                    p.content_id.to_string(),
                    p.style_id.to_string(),
                    p.iterations.to_string(),
                ])
                .map_err(|e| Error::data(format!("provenance.csv: {e}")))?;
            }
            pw.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest = dir.join("manifest.csv");
        let mut r = csv::Reader::from_path(&manifest)
            .map_err(|e| Error::data(format!("{}: {e}", manifest.display())))?;
        {
            let got = r
                .headers()
                .map_err(|e| Error::data(format!("{}: {e}", manifest.display())))?;
            let want: Vec<&str> = Self::MANIFEST_HEADER.to_vec();
            if got.iter().collect::<Vec<_>>() != want {
                return Err(Error::data(format!(
                    "{}: unexpected header {:?}",
                    manifest.display(),
                    got
                )));
            }
        }
        let provenance = load_provenance(dir)?;
        let mut samples = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::data(format!("{}: {e}", manifest.display())))?;
            let ctx = |field: &str| {
                format!(
                    "{} line {}: bad {}",
                    manifest.display(),
                    line + 2,
                    field
                )
            };
            let id: u64 = rec[0].parse().map_err(|_| Error::data(ctx("id")))?;
            let filename = rec[1].to_string();
            let label: usize = rec[2].parse().map_err(|_| Error::data(ctx("label")))?;
            let split = Split::parse(&rec[3])?;
            let annotation = Annotation {
                frame: parse01(&rec[4]).ok_or_else(|| Error::data(ctx("frame")))?,
                ruler: parse01(&rec[5]).ok_or_else(|| Error::data(ctx("ruler")))?,
                hair: parse01(&rec[6]).ok_or_else(|| Error::data(ctx("hair")))?,
                circle: parse01(&rec[7]).ok_or_else(|| Error::data(ctx("circle")))?,
                object_cx: rec[8].parse().map_err(|_| Error::data(ctx("object_cx")))?,
                object_cy: rec[9].parse().map_err(|_| Error::data(ctx("object_cy")))?,
                object_r: rec[10].parse().map_err(|_| Error::data(ctx("object_r")))?,
            };
            let image = Image::read_pgm(&dir.join(&filename))?;
            samples.push(Sample {
                id,
                image,
                label,
                split,
                annotation,
                provenance: provenance.get(&id).copied(),
            });
        }
        Ok(Dataset { samples })
    }
}

fn load_provenance(dir: &Path) -> Result<BTreeMap<u64, Provenance>> {
    let path = dir.join("provenance.csv");
    let mut map = BTreeMap::new();
    if !path.exists() {
        return Ok(map);
    }
    let mut r = csv::Reader::from_path(&path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let id: u64 = rec[0]
            .parse()
            .map_err(|_| Error::data(format!("{}: bad id", path.display())))?;
        map.insert(
            id,
            Provenance {
                content_id: rec[1]
                    .parse()
                    .map_err(|_| Error::data(format!("{}: bad content_id", path.display())))?,
                style_id: rec[2]
                    .parse()
                    .map_err(|_| Error::data(format!("{}: bad style_id", path.display())))?,
                iterations: rec[3]
                    .parse()
                    .map_err(|_| Error::data(format!("{}: bad iterations", path.display())))?,
            },
        );
    }
    Ok(map)
}

fn bool01(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

fn parse01(s: &str) -> Option<bool> {
    match s {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> Dataset {
        let mut img = Image::filled(4, 4, 0.5);
        img.snap_to_u8_grid();
        Dataset {
            samples: vec![
                Sample {
                    id: 0,
                    image: img.clone(),
                    label: 0,
                    split: Split::Train,
                    annotation: Annotation::default(),
                    provenance: None,
                },
                Sample {
                    id: 1,
                    image: img,
                    label: 1,
                    split: Split::Test,
                    annotation: Annotation {
                        frame: true,
                        object_cx: 2,
                        object_cy: 2,
                        object_r: 1,
                        ..Annotation::default()
                    },
                    provenance: Some(Provenance {
                        content_id: 7,
                        style_id: 9,
                        iterations: 30,
                    }),
                },
            ],
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = std::env::temp_dir().join(format!("biaslab_ds_{}", std::process::id()));
        let ds = tiny_dataset();
        ds.save(&dir).unwrap();
        let back = Dataset::load(&dir).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.samples[0].image.pixels(), ds.samples[0].image.pixels());
        assert_eq!(back.samples[1].annotation, ds.samples[1].annotation);
        assert_eq!(back.samples[1].split, Split::Test);
        assert_eq!(
            back.samples[1].provenance,
            Some(Provenance {
                content_id: 7,
                style_id: 9,
                iterations: 30
            })
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn malformed_manifest_reports_line() {
        let dir = std::env::temp_dir().join(format!("biaslab_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(
            dir.join("manifest.csv"),
            "id,filename,label,split,frame,ruler,hair,circle,object_cx,object_cy,object_r\n\
             0,img.pgm,0,train,2,0,0,0,0,0,0\n",
        )
        .unwrap();
        let err = Dataset::load(&dir).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("frame"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }
}
