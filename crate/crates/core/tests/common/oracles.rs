//! Reference implementations written independently of the library code.

use dga::dataset::PreparedScene;
use dga::geometry::BoundingBox;
use dga::matching::triplet_loss;
use dga::model::DgaModel;
use dga::tensor::{ParamId, Tape};

fn interval_overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Intersection over union from interval overlaps.
pub fn oracle_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = interval_overlap(a.cx - a.w / 2.0, a.cx + a.w / 2.0, b.cx - b.w / 2.0, b.cx + b.w / 2.0);
    let iy = interval_overlap(a.cy - a.h / 2.0, a.cy + a.h / 2.0, b.cy - b.h / 2.0, b.cy + b.h / 2.0);
    let inter = ix * iy;
    inter / (a.w * a.h + b.w * b.h - inter)
}

fn encloses(outer: &BoundingBox, inner: &BoundingBox) -> bool {
    outer.cx - outer.w / 2.0 <= inner.cx - inner.w / 2.0
        && outer.cx + outer.w / 2.0 >= inner.cx + inner.w / 2.0
        && outer.cy - outer.h / 2.0 <= inner.cy - inner.h / 2.0
        && outer.cy + outer.h / 2.0 >= inner.cy + inner.h / 2.0
}

/// Edge code of the ordered pair by the rule list: containment either way,
/// heavy overlap, far apart, then the nearest of eight compass directions.
pub fn oracle_edge(i: &BoundingBox, j: &BoundingBox) -> u8 {
    if encloses(i, j) {
        return 1;
    }
    if encloses(j, i) {
        return 2;
    }
    let overlap = oracle_iou(i, j);
    if overlap > 0.5 {
        return 3;
    }
    let dx = i.cx - j.cx;
    let dy = j.cy - i.cy; // up is positive
    let dist = (dx * dx + dy * dy).sqrt();
    if dist > 0.5 * 2f64.sqrt() {
        return 0;
    }
    if dist == 0.0 {
        return if overlap > 0.0 { 3 } else { 0 };
    }
    // right, top-right, top, ... : pick the unit direction with the largest projection
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let dirs = [(1.0, 0.0), (s, s), (0.0, 1.0), (-s, s), (-1.0, 0.0), (-s, -s), (0.0, -1.0), (s, -s)];
    let mut best = 0;
    let mut best_dot = f64::NEG_INFINITY;
    for (n, (ux, uy)) in dirs.iter().enumerate() {
        let d = dx * ux + dy * uy;
        if d > best_dot {
            best_dot = d;
            best = n;
        }
    }
    4 + best as u8
}

/// Triplet loss of the whole network on one scene at the model's current weights.
pub fn scene_loss(model: &DgaModel, scene: &PreparedScene, margin: f64) -> f64 {
    let mut tape = Tape::new(&model.store);
    let pass = model
        .forward(&mut tape, &scene.graph, &scene.edges, &scene.expression)
        .unwrap();
    let loss = triplet_loss(&mut tape, pass.matching.scores, scene.gt, margin).unwrap();
    tape.data(loss)[0]
}

/// Analytic vs central-difference gradient for one parameter tensor.
#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`; zero when both vanish.
    pub rel_error: f64,
}

/// Finite-difference scheme for the numeric reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Difference {
    /// `(f(x+h) − f(x−h)) / 2h`, error O(h²).
    Central,
    /// Central differences at h and h/2 combined to cancel the h² term.
    Extrapolated,
}

fn central(model: &mut DgaModel, scene: &PreparedScene, margin: f64, id: ParamId, e: usize, h: f64) -> f64 {
    let orig = model.store.value(id).data()[e];
    model.store.value_mut(id).data_mut()[e] = orig + h;
    let up = scene_loss(model, scene, margin);
    model.store.value_mut(id).data_mut()[e] = orig - h;
    let down = scene_loss(model, scene, margin);
    model.store.value_mut(id).data_mut()[e] = orig;
    (up - down) / (2.0 * h)
}

/// Perturbs every weight and compares against backpropagation.
pub fn check_gradients(
    model: &mut DgaModel,
    scene: &PreparedScene,
    margin: f64,
    h: f64,
    scheme: Difference,
) -> Vec<GroupCheck> {
    let analytic = {
        let mut tape = Tape::new(&model.store);
        let pass = model
            .forward(&mut tape, &scene.graph, &scene.edges, &scene.expression)
            .unwrap();
        let loss = triplet_loss(&mut tape, pass.matching.scores, scene.gt, margin).unwrap();
        tape.backward(loss).unwrap()
    };
    let ids: Vec<_> = model.store.ids().collect();
    let mut out = Vec::new();
    for id in ids {
        let n = model.store.value(id).len();
        let a = analytic.get(id, n);
        let numeric: Vec<f64> = (0..n)
            .map(|e| {
                let d = central(model, scene, margin, id, e, h);
                match scheme {
                    Difference::Central => d,
                    Difference::Extrapolated => (4.0 * central(model, scene, margin, id, e, h / 2.0) - d) / 3.0,
                }
            })
            .collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = a.iter().zip(&numeric).map(|(x, y)| x - y).collect();
        let (an, nn) = (norm(&a), norm(&numeric));
        let scale = an.max(nn);
        out.push(GroupCheck {
            name: model.store.name(id).to_string(),
            analytic_norm: an,
            numeric_norm: nn,
            rel_error: if scale < 1e-12 { 0.0 } else { norm(&diff) / scale },
        });
    }
    out
}

/// Relative error between backpropagation and central differences for one
/// named parameter, where `build` records a scalar on the tape.
pub fn param_rel_error(
    model: &mut DgaModel,
    name: &str,
    h: f64,
    build: impl Fn(&mut Tape, &DgaModel) -> dga::tensor::Var,
) -> f64 {
    let id = model.store.require(name).unwrap();
    let n = model.store.value(id).len();
    let analytic = {
        let mut tape = Tape::new(&model.store);
        let out = build(&mut tape, model);
        tape.backward(out).unwrap().get(id, n)
    };
    let eval = |m: &DgaModel| {
        let mut tape = Tape::new(&m.store);
        let out = build(&mut tape, m);
        tape.data(out)[0]
    };
    let mut numeric = vec![0.0; n];
    for (e, slot) in numeric.iter_mut().enumerate() {
        let orig = model.store.value(id).data()[e];
        model.store.value_mut(id).data_mut()[e] = orig + h;
        let up = eval(model);
        model.store.value_mut(id).data_mut()[e] = orig - h;
        let down = eval(model);
        model.store.value_mut(id).data_mut()[e] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    assert!(scale > 1e-10, "{name}: gradient vanished, check is vacuous");
    norm(&diff) / scale
}

/// `Σ_i c_i x_i` with fixed pseudo-random coefficients, as a scalar probe.
pub fn probe(tape: &mut Tape, x: dga::tensor::Var) -> dga::tensor::Var {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product::<usize>().max(1);
    let coeffs: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.45).collect();
    let c = tape.constant(dga::tensor::Tensor::new(shape, coeffs).unwrap());
    let prod = tape.mul(x, c).unwrap();
    tape.sum_all(prod)
}

fn mat_vec(w: &dga::tensor::Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Smallest distance of the forward pass to a point where the loss is not
/// differentiable: a ReLU input at zero or a tie for the hardest negative.
/// Central differences are only meaningful when this is well above `h`.
pub fn distance_to_kink(model: &DgaModel, scene: &PreparedScene) -> f64 {
    let mut tape = Tape::new(&model.store);
    let pass = model
        .forward(&mut tape, &scene.graph, &scene.edges, &scene.expression)
        .unwrap();
    let param = |name: &str| model.store.value(model.store.require(name).unwrap());
    let mut nearest = f64::INFINITY;
    let mut track = |pre: Vec<f64>, bias: &[f64]| {
        for (p, b) in pre.iter().zip(bias) {
            nearest = nearest.min((p + b).abs());
        }
    };

    let words = tape.value(pass.encoded.words);
    for l in 0..words.rows() {
        track(mat_vec(param("edge_attn.w_b0"), words.row(l)), param("edge_attn.b_b0").data());
    }
    let q = tape.data(pass.encoded.summary).to_vec();
    let mut prev = param("analyzer.y0").data().to_vec();
    for (t, y) in pass.program.outputs.iter().enumerate() {
        let w_t = param(&format!("analyzer.step{}.w", t + 1));
        let b_t = param(&format!("analyzer.step{}.b", t + 1)).data();
        let q_t: Vec<f64> = mat_vec(w_t, &q).iter().zip(b_t).map(|(a, b)| a + b).collect();
        let u: Vec<f64> = q_t.into_iter().chain(prev.iter().copied()).collect();
        track(mat_vec(param("analyzer.w_u"), &u), param("analyzer.b_u").data());
        prev = tape.data(*y).to_vec();
    }

    let mut negatives: Vec<f64> = tape
        .data(pass.matching.scores)
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != scene.gt)
        .map(|(_, s)| *s)
        .collect();
    negatives.sort_by(|a, b| b.total_cmp(a));
    if negatives.len() > 1 {
        nearest = nearest.min(negatives[0] - negatives[1]);
    }
    nearest
}
