//! Synthetic scenes of colored shapes with templated referring expressions.
//!
//! Ground truth comes from evaluating the expression against the object
//! attributes by brute force; a scene is only emitted when every "the ..."
//! in its expression picks out exactly one object.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{quantize, ObjectRecord, SceneRecord};
use crate::error::{DgaError, Result};
use crate::geometry::{classify_boxes, iou, BoundingBox, EdgeType};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Gray,
    Purple,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Gray, Color::Purple];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Gray => "gray",
            Color::Purple => "purple",
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

/// Spatial relation words and the edge code each one requires.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
        }
    }

    /// Edge type of "subject → anchor" when the relation holds.
    pub fn edge(self) -> EdgeType {
        match self {
            Relation::LeftOf => EdgeType::LEFT,
            Relation::RightOf => EdgeType::RIGHT,
            Relation::Above => EdgeType::TOP,
            Relation::Below => EdgeType::BOTTOM,
        }
    }

    pub fn holds(self, subject: &BoundingBox, anchor: &BoundingBox) -> bool {
        classify_boxes(subject, anchor) == self.edge()
    }
}

/// Every word the templates can produce.
pub fn lexicon() -> Vec<&'static str> {
    let mut words = vec!["the"];
    words.extend(Color::ALL.iter().map(|c| c.word()));
    words.extend(Shape::ALL.iter().map(|s| s.word()));
    for r in Relation::ALL {
        for w in r.words() {
            if !words.contains(w) {
                words.push(w);
            }
        }
    }
    words
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthObject {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub bbox: BoundingBox,
}

/// A referring phrase: either "the {color} {shape}" or
/// "the {shape} {relation} <phrase>".
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Phrase {
    Base { color: Color, shape: Shape },
    Related { shape: Shape, relation: Relation, anchor: Box<Phrase> },
}

impl Phrase {
    pub fn depth(&self) -> usize {
        match self {
            Phrase::Base { .. } => 0,
            Phrase::Related { anchor, .. } => 1 + anchor.depth(),
        }
    }

    pub fn tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.push_tokens(&mut out);
        out
    }

    fn push_tokens(&self, out: &mut Vec<String>) {
        out.push("the".into());
        match self {
            Phrase::Base { color, shape } => {
                out.push(color.word().into());
                out.push(shape.word().into());
            }
            Phrase::Related { shape, relation, anchor } => {
                out.push(shape.word().into());
                out.extend(relation.words().iter().map(|w| w.to_string()));
                anchor.push_tokens(out);
            }
        }
    }

    /// Inverse of [`Phrase::tokens`].
    pub fn parse<S: AsRef<str>>(tokens: &[S]) -> Option<Phrase> {
        let words: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
        let (phrase, rest) = parse_phrase(&words)?;
        rest.is_empty().then_some(phrase)
    }

    /// All objects the phrase can denote: attribute matches, with relations
    /// satisfied by at least one object the anchor denotes.
    pub fn denotation(&self, objects: &[SynthObject]) -> Vec<usize> {
        match self {
            Phrase::Base { color, shape } => (0..objects.len())
                .filter(|&i| objects[i].color == *color && objects[i].shape == *shape)
                .collect(),
            Phrase::Related { shape, relation, anchor } => {
                let anchors = anchor.denotation(objects);
                (0..objects.len())
                    .filter(|&i| {
                        objects[i].shape == *shape
                            && anchors
                                .iter()
                                .any(|&a| a != i && relation.holds(&objects[i].bbox, &objects[a].bbox))
                    })
                    .collect()
            }
        }
    }

    /// The single referent, provided every nested phrase is unambiguous.
    pub fn resolve(&self, objects: &[SynthObject]) -> Option<usize> {
        if let Phrase::Related { anchor, .. } = self {
            anchor.resolve(objects)?;
        }
        match self.denotation(objects).as_slice() {
            [one] => Some(*one),
            _ => None,
        }
    }
}

fn parse_phrase<'a, 'b>(words: &'b [&'a str]) -> Option<(Phrase, &'b [&'a str])> {
    let (&"the", rest) = words.split_first()? else {
        return None;
    };
    let (first, rest) = rest.split_first()?;
    if let Some(&color) = Color::ALL.iter().find(|c| c.word() == *first) {
        let (second, rest) = rest.split_first()?;
        let &shape = Shape::ALL.iter().find(|s| s.word() == *second)?;
        return Some((Phrase::Base { color, shape }, rest));
    }
    let &shape = Shape::ALL.iter().find(|s| s.word() == *first)?;
    let relation = Relation::ALL
        .into_iter()
        .find(|r| rest.starts_with(r.words()))?;
    let (anchor, rest) = parse_phrase(&rest[relation.words().len()..])?;
    Some((
        Phrase::Related {
            shape,
            relation,
            anchor: Box::new(anchor),
        },
        rest,
    ))
}

/// Knobs of the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub objects: usize,
    pub visual_dim: usize,
    /// Uniform feature noise amplitude.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            objects: 8,
            visual_dim: 32,
            noise: 0.05,
        }
    }
}

const ATTRIBUTE_DIMS: usize = Shape::ALL.len() + Color::ALL.len() + Size::ALL.len();
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
const MAX_PAIR_IOU: f64 = 0.3;

/// Places `k` objects with uniform attributes so that no two boxes overlap
/// by IoU ≥ 0.3 or contain one another.
pub fn generate_scene(rng: &mut ChaCha8Rng, k: usize) -> Result<Vec<SynthObject>> {
    if k < 2 {
        return Err(DgaError::Generation(format!("need at least 2 objects, got {k}")));
    }
    let mut objects: Vec<SynthObject> = Vec::with_capacity(k);
    for n in 0..k {
        let shape = *Shape::ALL.choose(rng).expect("nonempty");
        let color = *Color::ALL.choose(rng).expect("nonempty");
        let size = *Size::ALL.choose(rng).expect("nonempty");
        let (lo, hi) = match size {
            Size::Small => (0.08, 0.12),
            Size::Large => (0.16, 0.22),
        };
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let w = quantize(rng.gen_range(lo..hi));
            let h = quantize(rng.gen_range(lo..hi));
            let cx = quantize(rng.gen_range(w / 2.0..1.0 - w / 2.0));
            let cy = quantize(rng.gen_range(h / 2.0..1.0 - h / 2.0));
            let b = BoundingBox { cx, cy, w, h };
            let clear = objects
                .iter()
                .all(|o| iou(&o.bbox, &b) < MAX_PAIR_IOU && !o.bbox.contains(&b) && !b.contains(&o.bbox));
            if clear {
                placed = Some(b);
                break;
            }
        }
        let bbox = placed.ok_or_else(|| {
            DgaError::Generation(format!(
                "could not place object {n} after {MAX_PLACEMENT_ATTEMPTS} attempts"
            ))
        })?;
        objects.push(SynthObject { shape, color, size, bbox });
    }
    Ok(objects)
}

/// Attribute one-hot blocks followed by zeros, plus uniform noise, rounded
/// to the dataset's decimal precision.
pub fn object_features(rng: &mut ChaCha8Rng, obj: &SynthObject, dim: usize, noise: f64) -> Result<Vec<f64>> {
    if dim < ATTRIBUTE_DIMS {
        return Err(DgaError::Generation(format!(
            "visual_dim {dim} cannot hold {ATTRIBUTE_DIMS} attribute slots"
        )));
    }
    let mut f = vec![0.0; dim];
    let s = Shape::ALL.iter().position(|&x| x == obj.shape).expect("listed");
    let c = Color::ALL.iter().position(|&x| x == obj.color).expect("listed");
    let z = Size::ALL.iter().position(|&x| x == obj.size).expect("listed");
    f[s] = 1.0;
    f[Shape::ALL.len() + c] = 1.0;
    f[Shape::ALL.len() + Color::ALL.len() + z] = 1.0;
    for v in &mut f {
        if noise > 0.0 {
            *v += rng.gen_range(-noise..noise);
        }
        *v = quantize(*v);
    }
    Ok(f)
}

/// Why an expression could not be produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpressionError {
    /// No phrase at the requested depth has a unique referent; draw another scene.
    Retry,
}

fn unambiguous_phrases(objects: &[SynthObject], depth: usize) -> Vec<(Phrase, usize)> {
    let mut level: Vec<(Phrase, usize)> = Color::ALL
        .iter()
        .flat_map(|&color| Shape::ALL.iter().map(move |&shape| Phrase::Base { color, shape }))
        .filter_map(|p| p.resolve(objects).map(|r| (p, r)))
        .collect();
    for _ in 0..depth {
        let mut next = Vec::new();
        for (anchor, a) in &level {
            for shape in Shape::ALL {
                for relation in Relation::ALL {
                    let hits: Vec<usize> = (0..objects.len())
                        .filter(|&i| {
                            i != *a
                                && objects[i].shape == shape
                                && relation.holds(&objects[i].bbox, &objects[*a].bbox)
                        })
                        .collect();
                    if let [one] = hits.as_slice() {
                        let p = Phrase::Related {
                            shape,
                            relation,
                            anchor: Box::new(anchor.clone()),
                        };
                        next.push((p, *one));
                    }
                }
            }
        }
        level = next;
    }
    level
}

/// Picks a referent uniformly among those describable at `depth`, then one of
/// its phrases uniformly.
pub fn generate_expression(
    objects: &[SynthObject],
    depth: usize,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<(Phrase, usize), ExpressionError> {
    let candidates = unambiguous_phrases(objects, depth);
    let mut referents: Vec<usize> = candidates.iter().map(|(_, r)| *r).collect();
    referents.sort_unstable();
    referents.dedup();
    let &gt = referents.choose(rng).ok_or(ExpressionError::Retry)?;
    let options: Vec<&Phrase> = candidates.iter().filter(|(_, r)| *r == gt).map(|(p, _)| p).collect();
    let phrase = (*options.choose(rng).expect("referent has a phrase")).clone();
    Ok((phrase, gt))
}

/// One complete synthetic example.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub objects: Vec<SynthObject>,
    pub features: Vec<Vec<f64>>,
    pub phrase: Phrase,
    pub gt: usize,
}

impl SynthScene {
    pub fn to_record(&self) -> SceneRecord {
        let objects = self
            .objects
            .iter()
            .zip(&self.features)
            .map(|(o, f)| ObjectRecord {
                cx: o.bbox.cx,
                cy: o.bbox.cy,
                w: o.bbox.w,
                h: o.bbox.h,
                feature: f.clone(),
                shape: Some(o.shape),
                color: Some(o.color),
                size: Some(o.size),
            })
            .collect();
        SceneRecord {
            objects,
            tokens: self.phrase.tokens(),
            gt: self.gt,
            depth: Some(self.phrase.depth() as u8),
            gt_box: None,
        }
    }
}

/// Scenes are redrawn until one admits an expression at `depth`.
pub fn generate_sample(rng: &mut ChaCha8Rng, cfg: &SynthConfig, depth: usize) -> Result<SynthScene> {
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let objects = generate_scene(rng, cfg.objects)?;
        if let Ok((phrase, gt)) = generate_expression(&objects, depth, rng) {
            let features = objects
                .iter()
                .map(|o| object_features(rng, o, cfg.visual_dim, cfg.noise))
                .collect::<Result<Vec<_>>>()?;
            return Ok(SynthScene {
                objects,
                features,
                phrase,
                gt,
            });
        }
    }
    Err(DgaError::Generation(format!(
        "no depth-{depth} expression after {MAX_PLACEMENT_ATTEMPTS} scenes"
    )))
}

/// Per-scene generator: stream `index` of the base seed, so each scene is
/// reproducible on its own and scenes can be generated in any order.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Splits `count` into per-depth counts for proportions `mix` (depths 0, 1, 2, ...).
pub fn depth_counts(count: usize, mix: &[f64]) -> Result<Vec<usize>> {
    if mix.is_empty() || mix.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(DgaError::Flag(format!("depth proportions {mix:?} must lie in [0, 1]")));
    }
    let total: f64 = mix.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DgaError::Flag(format!("depth proportions sum to {total}, not 1")));
    }
    let mut counts: Vec<usize> = mix.iter().map(|p| (p * count as f64).floor() as usize).collect();
    // hand out the remainder to the largest fractional parts, lowest depth first on ties
    let mut rest = count - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..mix.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = mix[a] * count as f64 - counts[a] as f64;
        let fb = mix[b] * count as f64 - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if mix[i] > 0.0 {
            counts[i] += 1;
            rest -= 1;
        }
    }
    Ok(counts)
}

/// Generates `count` scenes whose depths follow `mix`.
pub fn generate_dataset(count: usize, mix: &[f64], seed: u64, cfg: &SynthConfig) -> Result<Vec<SynthScene>> {
    let counts = depth_counts(count, mix)?;
    let depths: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(d, &n)| std::iter::repeat_n(d, n))
        .collect();
    let make = |(i, &d): (usize, &usize)| generate_sample(&mut scene_rng(seed, i as u64), cfg, d);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        depths.par_iter().enumerate().map(make).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        depths.iter().enumerate().map(make).collect()
    }
}
