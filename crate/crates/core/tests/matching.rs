mod common;

use dga::matching::{hardest_negative, matching_scores, triplet_loss, triplet_loss_value, MatchParams};
use dga::tensor::{ParameterStore, Tape, Tensor};
use proptest::prelude::*;

fn identity_store(d: usize) -> (ParameterStore, MatchParams) {
    let mut eye = vec![0.0; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    let mut store = ParameterStore::new();
    store.insert("match.w_c0", Tensor::matrix(d, d, eye.clone()).unwrap()).unwrap();
    store.insert("match.w_c1", Tensor::matrix(d, d, eye).unwrap()).unwrap();
    let p = MatchParams::bind(&store).unwrap();
    (store, p)
}

fn scores(store: &ParameterStore, p: &MatchParams, mems: Vec<Vec<f64>>, q: Vec<f64>) -> Vec<f64> {
    let mut tape = Tape::new(store);
    let m = tape.constant(Tensor::from_rows(&mems).unwrap());
    let q = tape.constant(Tensor::vector(q).unwrap());
    let r = matching_scores(&mut tape, p, m, q).unwrap();
    tape.data(r.scores).to_vec()
}

#[test]
fn cosine_examples() {
    let (store, p) = identity_store(2);
    let s = scores(&store, &p, vec![vec![1.0, 0.0], vec![6.0, 8.0], vec![-4.0, 3.0]], vec![3.0, 4.0]);
    assert!((s[0] - 0.6).abs() < 1e-12);
    assert!((s[1] - 1.0).abs() < 1e-12);
    assert!(s[2].abs() < 1e-12);
}

#[test]
fn zero_projection_scores_zero() {
    let (store, p) = identity_store(2);
    let s = scores(&store, &p, vec![vec![0.0, 0.0], vec![1.0, 1.0]], vec![1.0, 0.0]);
    assert_eq!(s[0], 0.0);
    assert!(s[1].is_finite());
}

#[test]
fn loss_examples() {
    assert_eq!(triplet_loss_value(&[0.9, 0.5], 0, 0.1).unwrap(), 0.0);
    let l = triplet_loss_value(&[0.3, 0.4, 0.1], 0, 0.1).unwrap();
    assert!((l - 0.2).abs() < 1e-12);
    assert_eq!(hardest_negative(&[0.3, 0.4, 0.5], 2).unwrap(), 1);
    assert!(triplet_loss_value(&[0.3], 0, 0.1).is_err());
    assert!(triplet_loss_value(&[0.3, 0.2], 2, 0.1).is_err());
}

#[test]
fn satisfied_margin_has_no_gradient() {
    let (store, _) = identity_store(2);
    let mut tape = Tape::new(&store);
    let s = tape.constant(Tensor::vector(vec![0.9, 0.1, 0.5]).unwrap());
    let loss = triplet_loss(&mut tape, s, 0, 0.1).unwrap();
    assert_eq!(tape.data(loss)[0], 0.0);
    let g = tape.backward(loss).unwrap();
    for id in store.ids() {
        assert!(g.get(id, store.value(id).len()).iter().all(|&x| x == 0.0));
    }
}

fn arb_rows() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (2usize..6, 1usize..5).prop_flat_map(|(k, d)| {
        (
            prop::collection::vec(prop::collection::vec(-10.0..10.0f64, d), k),
            prop::collection::vec(-10.0..10.0f64, d),
        )
    })
}

proptest! {
    #[test]
    fn scores_are_bounded_and_scale_free((mems, q) in arb_rows(), c in 0.01..100.0f64) {
        let d = q.len();
        let (store, p) = identity_store(d);
        let s = scores(&store, &p, mems.clone(), q.clone());
        prop_assert!(s.iter().all(|x| (-1.0 - 1e-12..=1.0 + 1e-12).contains(x)));
        let scaled: Vec<Vec<f64>> = mems.iter().map(|r| r.iter().map(|x| x * c).collect()).collect();
        let s2 = scores(&store, &p, scaled, q.iter().map(|x| x * c).collect());
        let norms_ok = mems.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-2)
            && q.iter().map(|x| x * x).sum::<f64>() > 1e-2;
        if norms_ok {
            for (a, b) in s.iter().zip(&s2) {
                prop_assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn loss_is_nonnegative_and_vanishes_past_margin(
        s in prop::collection::vec(-1.0..1.0f64, 2..9),
        gt in 0usize..8,
        margin in 0.0..0.5f64,
    ) {
        let gt = gt % s.len();
        let l = triplet_loss_value(&s, gt, margin).unwrap();
        prop_assert!(l >= 0.0);
        let best_other = s.iter().enumerate().filter(|(i, _)| *i != gt).map(|(_, v)| *v).fold(f64::MIN, f64::max);
        if s[gt] > best_other + margin {
            prop_assert_eq!(l, 0.0);
        } else {
            prop_assert!((l - (best_other + margin - s[gt])).abs() < 1e-12);
        }
    }
}
