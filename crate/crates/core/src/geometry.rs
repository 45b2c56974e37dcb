//! Spatial relations between object proposals and the directed scene graph.
//!
//! Coordinates are normalized to the image, with `y` growing downward.
//! Directions are reported the way a viewer reads them: "top" means the
//! first box is higher up in the image than the second.

use serde::{Deserialize, Serialize};

use crate::error::{DgaError, Result};

/// Axis-aligned box given by its normalized center and size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let extent = |v: f64| v > 0.0 && v <= 1.0;
        if !(unit(self.cx) && unit(self.cy) && extent(self.w) && extent(self.h)) {
            return Err(DgaError::Scene(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Whether `other` lies within `self` on both axes. Shared borders count.
    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x0() <= other.x0()
            && other.x1() <= self.x1()
            && self.y0() <= other.y0()
            && other.y1() <= self.y1()
    }

    fn intersection(&self, other: &BoundingBox) -> f64 {
        let w = self.x1().min(other.x1()) - self.x0().max(other.x0());
        let h = self.y1().min(other.y1()) - self.y0().max(other.y0());
        w.max(0.0) * h.max(0.0)
    }
}

/// Intersection over union.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b);
    // Areas from the same corner arithmetic as the intersection, so that
    // identical boxes give exactly 1.
    let area = |x: &BoundingBox| (x.x1() - x.x0()) * (x.y1() - x.y0());
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// `[cx, cy, w, h, w·h]`, the raw input of the learned spatial projection.
pub fn spatial_feature(b: &BoundingBox) -> [f64; 5] {
    [b.cx, b.cy, b.w, b.h, b.w * b.h]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectProposal {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub visual_feature: Vec<f64>,
}

/// Number of attendable relation types (codes 1..=11).
pub const NUM_EDGE_TYPES: usize = 11;

/// Directed spatial relation code in `0..=11`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeType(u8);

impl EdgeType {
    pub const NONE: EdgeType = EdgeType(0);
    pub const INSIDE: EdgeType = EdgeType(1);
    pub const COVER: EdgeType = EdgeType(2);
    pub const OVERLAP: EdgeType = EdgeType(3);
    pub const RIGHT: EdgeType = EdgeType(4);
    pub const TOP_RIGHT: EdgeType = EdgeType(5);
    pub const TOP: EdgeType = EdgeType(6);
    pub const TOP_LEFT: EdgeType = EdgeType(7);
    pub const LEFT: EdgeType = EdgeType(8);
    pub const BOTTOM_LEFT: EdgeType = EdgeType(9);
    pub const BOTTOM: EdgeType = EdgeType(10);
    pub const BOTTOM_RIGHT: EdgeType = EdgeType(11);

    pub fn new(code: u8) -> Result<Self> {
        if code as usize > NUM_EDGE_TYPES {
            return Err(DgaError::Scene(format!("edge code {code} out of range")));
        }
        Ok(EdgeType(code))
    }

    pub fn code(self) -> u8 {
        self.0
    }

    pub fn is_edge(self) -> bool {
        self.0 > 0
    }

    pub fn is_compass(self) -> bool {
        self.0 >= 4
    }

    /// The compass direction pointing the other way; other codes map to themselves
    /// except inside/cover, which swap.
    pub fn reversed(self) -> EdgeType {
        match self.0 {
            1 => EdgeType(2),
            2 => EdgeType(1),
            c if c >= 4 => EdgeType(4 + (c - 4 + 4) % 8),
            c => EdgeType(c),
        }
    }

    pub fn label(self) -> &'static str {
        const LABELS: [&str; 12] = [
            "none",
            "inside",
            "cover",
            "overlap",
            "right",
            "top-right",
            "top",
            "top-left",
            "left",
            "bottom-left",
            "bottom",
            "bottom-right",
        ];
        LABELS[self.0 as usize]
    }
}

// Centers farther apart than this fraction of the image diagonal are unrelated.
const FAR_RATIO: f64 = 0.5;
const OVERLAP_IOU: f64 = 0.5;

/// Relation of box `i` with respect to box `j`. First matching rule wins:
/// `i` contains `j` (inside), `j` contains `i` (cover), IoU > 0.5 (overlap),
/// centers too far apart (none), otherwise the 45° compass sector of the
/// vector from `j`'s center to `i`'s center.
pub fn classify_boxes(bi: &BoundingBox, bj: &BoundingBox) -> EdgeType {
    if bi.contains(bj) {
        return EdgeType::INSIDE;
    }
    if bj.contains(bi) {
        return EdgeType::COVER;
    }
    let overlap = iou(bi, bj);
    if overlap > OVERLAP_IOU {
        return EdgeType::OVERLAP;
    }
    let dx = bi.cx - bj.cx;
    // flip so that positive means "higher in the image"
    let dy = -(bi.cy - bj.cy);
    let dist = dx.hypot(dy);
    if dist / std::f64::consts::SQRT_2 > FAR_RATIO {
        return EdgeType::NONE;
    }
    if dist == 0.0 {
        return if overlap > 0.0 { EdgeType::OVERLAP } else { EdgeType::NONE };
    }
    let mut theta = dy.atan2(dx).to_degrees();
    if theta < 0.0 {
        theta += 360.0;
    }
    if theta >= 360.0 {
        theta -= 360.0;
    }
    let sector = ((theta + 22.5) / 45.0).floor() as i64;
    EdgeType(4 + sector.rem_euclid(8) as u8)
}

pub fn classify_edge(oi: &ObjectProposal, oj: &ObjectProposal) -> EdgeType {
    classify_boxes(&oi.bbox, &oj.bbox)
}

/// Directed graph over the proposals of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualGraph {
    pub proposals: Vec<ObjectProposal>,
    /// Row-major K×K; `edges[i*K + j]` is the relation of `i` to `j`.
    edges: Vec<EdgeType>,
    pub spatial_raw: Vec<[f64; 5]>,
}

impl VisualGraph {
    pub fn build(proposals: Vec<ObjectProposal>) -> Result<Self> {
        let k = proposals.len();
        if k < 2 {
            return Err(DgaError::Scene(format!("need at least 2 proposals, got {k}")));
        }
        let dim = proposals[0].visual_feature.len();
        for (i, p) in proposals.iter().enumerate() {
            p.bbox.validate()?;
            if p.visual_feature.len() != dim {
                return Err(DgaError::Scene(format!(
                    "proposal {i} has feature dim {}, expected {dim}",
                    p.visual_feature.len()
                )));
            }
            if p.visual_feature.iter().any(|v| !v.is_finite()) {
                return Err(DgaError::Scene(format!("proposal {i} has non-finite features")));
            }
        }
        let mut edges = vec![EdgeType::NONE; k * k];
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    edges[i * k + j] = classify_edge(&proposals[i], &proposals[j]);
                }
            }
        }
        let spatial_raw = proposals.iter().map(|p| spatial_feature(&p.bbox)).collect();
        Ok(VisualGraph {
            proposals,
            edges,
            spatial_raw,
        })
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.proposals[0].visual_feature.len()
    }

    pub fn edge(&self, i: usize, j: usize) -> EdgeType {
        self.edges[i * self.len() + j]
    }

    pub fn edge_matrix(&self) -> Vec<Vec<u8>> {
        let k = self.len();
        (0..k)
            .map(|i| (0..k).map(|j| self.edge(i, j).code()).collect())
            .collect()
    }
}

/// Convenience wrapper matching the free-function style of the other ops.
pub fn build_graph(proposals: Vec<ObjectProposal>) -> Result<VisualGraph> {
    VisualGraph::build(proposals)
}
