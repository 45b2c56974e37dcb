//! Newline-delimited JSON scene files.
//!
//! One record per line: `{"objects": [{"cx", "cy", "w", "h", "feature": [..]}, ..],
//! "tokens": [..], "gt": k}`. Synthetic records also carry the object
//! attributes and the expression depth; detected-proposal records carry a
//! separate `gt_box`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DgaError, Result};
use crate::geometry::{BoundingBox, ObjectProposal, VisualGraph};
use crate::language::{Expression, Vocabulary};
use crate::reasoning::EdgeIndex;
use crate::synth::{Color, Shape, Size};

/// Rounds to 9 significant decimal digits, the precision used on disk.
pub fn quantize(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRecord {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Shape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<Color>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<Size>,
}

impl ObjectRecord {
    pub fn bbox(&self) -> BoundingBox {
        BoundingBox {
            cx: self.cx,
            cy: self.cy,
            w: self.w,
            h: self.h,
        }
    }

    fn quantized(&self) -> ObjectRecord {
        ObjectRecord {
            cx: quantize(self.cx),
            cy: quantize(self.cy),
            w: quantize(self.w),
            h: quantize(self.h),
            feature: self.feature.iter().map(|&v| quantize(v)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub objects: Vec<ObjectRecord>,
    pub tokens: Vec<String>,
    pub gt: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<u8>,
    /// Present for detected proposals: correctness is then IoU with this box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_box: Option<BoundingBox>,
}

impl SceneRecord {
    pub fn feature_dim(&self) -> usize {
        self.objects.first().map_or(0, |o| o.feature.len())
    }

    /// Structural checks that do not depend on other records.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.objects.len() < 2 {
            return Err(format!("need at least 2 objects, got {}", self.objects.len()));
        }
        if self.gt >= self.objects.len() {
            return Err(format!("gt {} out of {} objects", self.gt, self.objects.len()));
        }
        if self.tokens.is_empty() {
            return Err("empty token list".into());
        }
        let dim = self.feature_dim();
        if dim == 0 {
            return Err("empty feature vector".into());
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.feature.len() != dim {
                return Err(format!("object {i} has {} features, object 0 has {dim}", o.feature.len()));
            }
            o.bbox().validate().map_err(|e| format!("object {i}: {e}"))?;
            if o.feature.iter().any(|v| !v.is_finite()) {
                return Err(format!("object {i} has a non-finite feature"));
            }
        }
        if let Some(b) = &self.gt_box {
            b.validate().map_err(|e| format!("gt_box: {e}"))?;
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        let q = SceneRecord {
            objects: self.objects.iter().map(ObjectRecord::quantized).collect(),
            gt_box: self.gt_box.map(|b| BoundingBox {
                cx: quantize(b.cx),
                cy: quantize(b.cy),
                w: quantize(b.w),
                h: quantize(b.h),
            }),
            ..self.clone()
        };
        serde_json::to_string(&q).expect("scene records serialize")
    }

    pub fn proposals(&self) -> Vec<ObjectProposal> {
        self.objects
            .iter()
            .map(|o| ObjectProposal {
                bbox: o.bbox(),
                visual_feature: o.feature.clone(),
            })
            .collect()
    }
}

pub fn write_dataset<W: Write>(mut w: W, scenes: &[SceneRecord]) -> std::io::Result<()> {
    for s in scenes {
        writeln!(w, "{}", s.to_json_line())?;
    }
    w.flush()
}

/// Writes via a sibling temp file and a rename so readers never see a partial file.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut out = BufWriter::new(File::create(&tmp)?);
        write(&mut out)?;
        out.flush()?;
        out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(DgaError::io(path, e));
    }
    Ok(())
}

pub fn save_dataset(path: &Path, scenes: &[SceneRecord]) -> Result<()> {
    write_atomic(path, |w| write_dataset(w, scenes))
}

/// Parses records from a reader; `path` only labels errors. Blank lines are skipped.
pub fn read_dataset<R: BufRead>(r: R, path: &Path) -> Result<Vec<SceneRecord>> {
    let mut scenes = Vec::new();
    let mut dim = None;
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| DgaError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| DgaError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            record: scenes.len(),
            message,
        };
        let scene: SceneRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        scene.validate().map_err(err)?;
        let d = scene.feature_dim();
        match dim {
            None => dim = Some(d),
            Some(first) if first != d => {
                return Err(err(format!("feature dimension {d}, earlier records have {first}")));
            }
            _ => {}
        }
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn load_dataset(path: &Path) -> Result<Vec<SceneRecord>> {
    let file = File::open(path).map_err(|e| DgaError::io(path, e))?;
    read_dataset(BufReader::new(file), path)
}

/// Every token of every scene in first-seen order.
pub fn dataset_vocabulary(scenes: &[SceneRecord]) -> Vocabulary {
    Vocabulary::from_tokens(scenes.iter().flat_map(|s| s.tokens.iter().map(String::as_str)))
}

/// A scene ready for the network: graph, edge layout and encoded expression.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub graph: VisualGraph,
    pub edges: EdgeIndex,
    pub expression: Expression,
    pub gt: usize,
    pub depth: Option<u8>,
    pub gt_box: Option<BoundingBox>,
}

impl PreparedScene {
    /// Fails with a compatibility error when a token is missing from `vocab`
    /// or the features do not have `visual_dim` entries.
    pub fn new(record: &SceneRecord, vocab: &Vocabulary, visual_dim: usize, max_len: usize) -> Result<Self> {
        if record.feature_dim() != visual_dim {
            return Err(DgaError::Compatibility {
                field: "visual_dim".into(),
                message: format!("model expects {visual_dim}, scene has {}", record.feature_dim()),
            });
        }
        let ids = vocab.encode(&record.tokens).map_err(|e| DgaError::Compatibility {
            field: "vocabulary".into(),
            message: e.to_string(),
        })?;
        let graph = VisualGraph::build(record.proposals())?;
        let edges = EdgeIndex::new(&graph);
        Ok(PreparedScene {
            edges,
            graph,
            expression: Expression::new(ids, max_len)?,
            gt: record.gt,
            depth: record.depth,
            gt_box: record.gt_box,
        })
    }
}

pub fn prepare_all(records: &[SceneRecord], vocab: &Vocabulary, visual_dim: usize, max_len: usize) -> Result<Vec<PreparedScene>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            PreparedScene::new(r, vocab, visual_dim, max_len).map_err(|e| match e {
                DgaError::Compatibility { field, message } => DgaError::Compatibility {
                    field,
                    message: format!("record {i}: {message}"),
                },
                other => DgaError::Data(format!("record {i}: {other}")),
            })
        })
        .collect()
}

/// SHA-256 over the scene's objects (not its expression), used to keep a
/// scene from landing in more than one split.
pub fn scene_hash(scene: &SceneRecord) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for o in &scene.objects {
        for v in [o.cx, o.cy, o.w, o.h].iter().chain(&o.feature) {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Deterministic split by content hash: a scene goes to validation when the
/// first hash byte falls below `fraction · 256`. Identical scenes always land
/// on the same side.
pub fn split_by_hash(scenes: Vec<SceneRecord>, fraction: f64) -> (Vec<SceneRecord>, Vec<SceneRecord>) {
    let cut = (fraction.clamp(0.0, 1.0) * 256.0).round() as u32;
    scenes
        .into_iter()
        .partition(|s| u32::from(scene_hash(s)[0]) >= cut)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> SceneRecord {
        SceneRecord {
            objects: vec![
                ObjectRecord {
                    cx: 0.25,
                    cy: 0.5,
                    w: 0.1,
                    h: 0.1,
                    feature: vec![0.1, 0.2],
                    shape: None,
                    color: None,
                    size: None,
                },
                ObjectRecord {
                    cx: 0.75,
                    cy: 0.5,
                    w: 0.1,
                    h: 0.1,
                    feature: vec![1.0 / 3.0, -2.0],
                    shape: Some(Shape::Square),
                    color: Some(Color::Red),
                    size: Some(Size::Large),
                },
            ],
            tokens: vec!["the".into(), "red".into(), "square".into()],
            gt: 1,
            depth: Some(0),
            gt_box: None,
        }
    }

    #[test]
    fn quantize_keeps_nine_digits() {
        assert_eq!(quantize(1.0 / 3.0), 0.333333333);
        assert_eq!(quantize(123456789123.0), 123456789000.0);
        assert_eq!(quantize(0.0), 0.0);
        let q = quantize(0.123456789987);
        assert_eq!(q, quantize(q));
    }

    #[test]
    fn line_round_trip_after_quantization() {
        let r = record();
        let line = r.to_json_line();
        let back: SceneRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back.objects[1].feature[0], 0.333333333);
        assert_eq!(back.to_json_line(), line);
    }

    #[test]
    fn parse_errors_name_the_record() {
        let good = record().to_json_line();
        let text = format!("{good}\n{good}\n{}", &good[..good.len() / 2]);
        let err = read_dataset(text.as_bytes(), Path::new("x.jsonl")).unwrap_err();
        match err {
            DgaError::Parse { line, record, .. } => assert_eq!((line, record), (3, 2)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_gt_is_rejected() {
        let mut r = record();
        r.gt = 5;
        let err = read_dataset(r.to_json_line().as_bytes(), Path::new("x")).unwrap_err();
        assert!(matches!(err, DgaError::Parse { .. }));
    }

    #[test]
    fn mixed_dims_are_rejected() {
        let a = record();
        let mut b = record();
        for o in &mut b.objects {
            o.feature.push(0.0);
        }
        let text = format!("{}\n{}\n", a.to_json_line(), b.to_json_line());
        assert!(read_dataset(text.as_bytes(), Path::new("x")).is_err());
    }

    #[test]
    fn prepare_checks_vocabulary_and_dim() {
        let r = record();
        let vocab = Vocabulary::from_tokens(["the", "red"]);
        assert!(matches!(
            PreparedScene::new(&r, &vocab, 2, 20),
            Err(DgaError::Compatibility { .. })
        ));
        let vocab = Vocabulary::from_tokens(["the", "red", "square"]);
        assert!(matches!(
            PreparedScene::new(&r, &vocab, 3, 20),
            Err(DgaError::Compatibility { .. })
        ));
        let p = PreparedScene::new(&r, &vocab, 2, 20).unwrap();
        assert_eq!(p.graph.len(), 2);
    }

    #[test]
    fn split_is_disjoint_and_stable() {
        let mut scenes = Vec::new();
        for i in 0..50 {
            let mut r = record();
            r.objects[0].cx = 0.2 + i as f64 * 0.001;
            scenes.push(r);
        }
        let (a, b) = split_by_hash(scenes.clone(), 0.3);
        assert_eq!(a.len() + b.len(), 50);
        for s in &b {
            assert!(!a.iter().any(|t| scene_hash(t) == scene_hash(s)));
        }
        assert_eq!(split_by_hash(scenes, 0.3), (a, b));
    }
}
