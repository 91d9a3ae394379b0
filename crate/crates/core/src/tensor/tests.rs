use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use super::param::{load_params, save_params};
use super::*;

fn rc(v: Vec<usize>) -> Arc<Vec<usize>> {
    Arc::new(v)
}

fn randoms(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // keep values away from the elu kink at exactly zero
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if v.abs() < 1e-3 {
                v + 0.1
            } else {
                v
            }
        })
        .collect()
}

/// Compares reverse-mode gradients of `build`'s scalar output against
/// central finite differences with h = 1e-6 on every input entry.
fn check_gradients(
    inputs: &[(Shape, Vec<f64>)],
    build: &dyn Fn(&mut Tape, &[TensorId]) -> TensorId,
) {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|(s, d)| tape.leaf(d.clone(), *s, true).unwrap())
        .collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).unwrap().to_vec())
        .collect();

    let h = 1e-6;
    for (k, (_, data)) in inputs.iter().enumerate() {
        for i in 0..data.len() {
            let eval = |delta: f64| -> f64 {
                let mut tape = Tape::new();
                let ids: Vec<TensorId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, (s, d))| {
                        let mut dd = d.clone();
                        if j == k {
                            dd[i] += delta;
                        }
                        tape.leaf(dd, *s, true).unwrap()
                    })
                    .collect();
                let loss = build(&mut tape, &ids);
                tape.scalar(loss).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[k][i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                (a - fd).abs() / denom < 1e-4,
                "input {k} entry {i}: analytic {a}, finite-difference {fd}"
            );
        }
    }
}

#[test]
fn gradcheck_matmul() {
    let target = randoms(6, 100);
    check_gradients(
        &[((3, 4), randoms(12, 1)), ((4, 2), randoms(8, 2))],
        &move |tape, ids| {
            let c = tape.matmul(ids[0], ids[1]).unwrap();
            let t = tape.constant(target.clone(), (3, 2)).unwrap();
            tape.mse(c, t).unwrap()
        },
    );
}

#[test]
fn gradcheck_add_and_broadcast() {
    let target = randoms(12, 101);
    check_gradients(
        &[
            ((3, 4), randoms(12, 3)),
            ((3, 4), randoms(12, 4)),
            ((1, 4), randoms(4, 5)),
        ],
        &move |tape, ids| {
            let s = tape.add(ids[0], ids[1]).unwrap();
            let b = tape.add(s, ids[2]).unwrap();
            let t = tape.constant(target.clone(), (3, 4)).unwrap();
            tape.mse(b, t).unwrap()
        },
    );
}

#[test]
fn gradcheck_sub_mul_scale() {
    let target = randoms(8, 102);
    check_gradients(
        &[((2, 4), randoms(8, 6)), ((2, 4), randoms(8, 7))],
        &move |tape, ids| {
            let d = tape.sub(ids[0], ids[1]).unwrap();
            let m = tape.mul(d, ids[0]).unwrap();
            let s = tape.scale(m, -1.7).unwrap();
            let t = tape.constant(target.clone(), (2, 4)).unwrap();
            tape.mse(s, t).unwrap()
        },
    );
}

#[test]
fn gradcheck_concat() {
    let target = randoms(15, 103);
    check_gradients(
        &[((3, 2), randoms(6, 8)), ((3, 3), randoms(9, 9))],
        &move |tape, ids| {
            let c = tape.concat(ids[0], ids[1]).unwrap();
            let t = tape.constant(target.clone(), (3, 5)).unwrap();
            tape.mse(c, t).unwrap()
        },
    );
}

#[test]
fn gradcheck_gather_scatter() {
    let target = randoms(8, 104);
    check_gradients(&[((4, 2), randoms(8, 10))], &move |tape, ids| {
        // repeated gather indices exercise gradient accumulation
        let g = tape.gather_rows(ids[0], rc(vec![2, 0, 2, 1, 3])).unwrap();
        let s = tape.scatter_mean(g, rc(vec![0, 2, 2, 0, 1]), 4).unwrap();
        let t = tape.constant(target.clone(), (4, 2)).unwrap();
        tape.mse(s, t).unwrap()
    });
}

#[test]
fn gradcheck_elu() {
    let target = randoms(9, 105);
    check_gradients(&[((3, 3), randoms(9, 11))], &move |tape, ids| {
        let e = tape.elu(ids[0]).unwrap();
        let t = tape.constant(target.clone(), (3, 3)).unwrap();
        tape.mse(e, t).unwrap()
    });
}

#[test]
fn gradcheck_relu() {
    let target = randoms(9, 106);
    check_gradients(&[((3, 3), randoms(9, 12))], &move |tape, ids| {
        let e = tape.relu(ids[0]).unwrap();
        let t = tape.constant(target.clone(), (3, 3)).unwrap();
        tape.mse(e, t).unwrap()
    });
}

#[test]
fn relu_forward_clamps_negatives() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![-2.0, -0.5, 0.0, 0.5, 2.0], (1, 5)).unwrap();
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y), &[0.0, 0.0, 0.0, 0.5, 2.0]);
}

#[test]
fn gradcheck_scale_rows() {
    let target = randoms(6, 106);
    check_gradients(&[((3, 2), randoms(6, 12))], &move |tape, ids| {
        let s = tape
            .scale_rows(ids[0], Arc::new(vec![0.5, -1.25, 2.0]))
            .unwrap();
        let t = tape.constant(target.clone(), (3, 2)).unwrap();
        tape.mse(s, t).unwrap()
    });
}

#[test]
fn gradcheck_edge_mix() {
    let target = randoms(12, 107);
    check_gradients(
        &[((4, 3), randoms(12, 13)), ((4, 3), randoms(12, 14))],
        &move |tape, ids| {
            let mixed = tape
                .edge_mix(
                    &[ids[0], ids[1]],
                    rc(vec![0, 1, 2, 3, 0]),
                    rc(vec![1, 1, 2, 0, 0]),
                    rc(vec![0, 1, 1, 0, 0, 1, 0, 0, 1, 1]),
                    Arc::new(vec![0.7, 0.3, 0.4, 0.6, 1.0, 0.0, 0.2, 0.5, 0.9, 0.1]),
                    4,
                )
                .unwrap();
            let t = tape.constant(target.clone(), (4, 3)).unwrap();
            tape.mse(mixed, t).unwrap()
        },
    );
}

#[test]
fn gradcheck_composite_graph() {
    let target = randoms(20, 108);
    check_gradients(
        &[
            ((4, 3), randoms(12, 20)),
            ((3, 5), randoms(15, 21)),
            ((1, 5), randoms(5, 22)),
            ((3, 5), randoms(15, 23)),
        ],
        &move |tape, ids| {
            let (x, w1, b, w2) = (ids[0], ids[1], ids[2], ids[3]);
            let h = tape.matmul(x, w1).unwrap();
            let h = tape.add(h, b).unwrap();
            let e = tape.elu(h).unwrap();
            let g = tape.gather_rows(e, rc(vec![3, 1, 1, 0])).unwrap();
            let mixed = tape
                .edge_mix(
                    &[e, g],
                    rc(vec![0, 1, 2, 3]),
                    rc(vec![1, 0, 1, 2]),
                    rc(vec![0, 1, 1, 0, 0, 1, 0, 1]),
                    Arc::new(vec![0.6, 0.4, 0.8, 0.2, 0.5, 0.5, 0.9, 0.1]),
                    4,
                )
                .unwrap();
            let xw2 = tape.matmul(x, w2).unwrap();
            let s = tape.sub(mixed, xw2).unwrap();
            let m = tape.mul(s, e).unwrap();
            let half = tape.scale(e, 0.5).unwrap();
            let c = tape.concat(m, half).unwrap();
            let sm = tape.scatter_mean(c, rc(vec![0, 1, 0, 1]), 2).unwrap();
            let t = tape.constant(target.clone(), (2, 10)).unwrap();
            tape.mse(sm, t).unwrap()
        },
    );
}

#[test]
fn mse_of_identical_tensors_is_zero_with_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(randoms(6, 30), (2, 3), true).unwrap();
    let loss = tape.mse(x, x).unwrap();
    assert_eq!(tape.scalar(loss).unwrap(), 0.0);
    tape.backward(loss).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn scatter_mean_of_equal_values_returns_the_value() {
    let mut tape = Tape::new();
    let v = tape
        .constant(vec![5.0, 7.0, 5.0, 7.0, 5.0, 7.0], (3, 2))
        .unwrap();
    let s = tape.scatter_mean(v, rc(vec![0, 0, 0]), 1).unwrap();
    assert_eq!(tape.value(s), &[5.0, 7.0]);
}

#[test]
fn scatter_mean_untouched_rows_are_zero() {
    let mut tape = Tape::new();
    let v = tape.constant(vec![1.0, 2.0], (1, 2)).unwrap();
    let s = tape.scatter_mean(v, rc(vec![2]), 4).unwrap();
    assert_eq!(tape.value(s), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0]);
}

#[test]
fn sum_via_matmul_has_unit_gradients() {
    let mut tape = Tape::new();
    let w = tape.leaf(randoms(5, 31), (1, 5), true).unwrap();
    let ones = tape.constant(vec![1.0; 5], (5, 1)).unwrap();
    let loss = tape.matmul(w, ones).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[1.0; 5]);
}

#[test]
fn squared_norm_has_gradient_two_w() {
    let mut tape = Tape::new();
    let data = randoms(4, 32);
    let w = tape.leaf(data.clone(), (1, 4), true).unwrap();
    let zeros = tape.constant(vec![0.0; 4], (1, 4)).unwrap();
    let m = tape.mse(w, zeros).unwrap();
    let loss = tape.scale(m, 4.0).unwrap(); // sum of squares
    tape.backward(loss).unwrap();
    let grad = tape.grad(w).unwrap();
    for (g, x) in grad.iter().zip(&data) {
        assert!((g - 2.0 * x).abs() < 1e-12);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(randoms(4, 33), (2, 2), true).unwrap();
    assert!(matches!(
        tape.backward(x),
        Err(Error::ShapeMismatch { op: "backward", .. })
    ));
}

#[test]
fn shape_and_index_errors_name_the_op() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![0.0; 6], (2, 3)).unwrap();
    let b = tape.constant(vec![0.0; 6], (3, 2)).unwrap();
    match tape.add(a, b) {
        Err(Error::ShapeMismatch { op: "add", .. }) => {}
        other => panic!("expected add shape mismatch, got {other:?}"),
    }
    match tape.gather_rows(a, rc(vec![0, 5])) {
        Err(Error::IndexOutOfRange {
            op: "gather_rows",
            index: 5,
            len: 2,
        }) => {}
        other => panic!("expected gather index error, got {other:?}"),
    }
    match tape.matmul(a, a) {
        Err(Error::ShapeMismatch { op: "matmul", .. }) => {}
        other => panic!("expected matmul shape mismatch, got {other:?}"),
    }
}

fn simple_store(seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    store.insert("w", (4, 4), randoms(16, seed)).unwrap();
    store.insert("b", (1, 4), randoms(4, seed + 1)).unwrap();
    store
}

#[test]
fn adam_zero_gradients_leave_params_unchanged() {
    let mut store = simple_store(40);
    let before = store.clone();
    let mut state = AdamState::new(1e-3);
    let mut grads = BTreeMap::new();
    grads.insert("w".to_string(), vec![0.0; 16]);
    grads.insert("b".to_string(), vec![0.0; 4]);
    adam_step(&mut store, &grads, &mut state).unwrap();
    assert_eq!(store, before);
    assert_eq!(state.step, 1);
}

#[test]
fn adam_constant_gradient_steps_are_lr_sized() {
    let mut store = ParamStore::new();
    store.insert("w", (1, 3), vec![0.0; 3]).unwrap();
    let mut state = AdamState::new(1e-2);
    let g = vec![0.5, -2.0, 1e-3];
    let mut grads = BTreeMap::new();
    grads.insert("w".to_string(), g.clone());
    let mut prev = store.get("w").unwrap().data.clone();
    for _ in 0..20 {
        adam_step(&mut store, &grads, &mut state).unwrap();
        let cur = store.get("w").unwrap().data.clone();
        for i in 0..3 {
            let step = cur[i] - prev[i];
            assert!(step.abs() <= state.lr * 1.000001, "step {step}");
            assert!(step.abs() >= state.lr * 0.99, "step {step}");
            assert_eq!(step.signum(), -g[i].signum());
        }
        prev = cur;
    }
}

#[test]
fn adam_converges_on_quadratic_bowl() {
    let minimizer = randoms(8, 50);
    let curv = [1.0, 2.0, 0.5, 3.0, 1.5, 0.7, 2.5, 1.1];
    let mut store = ParamStore::new();
    store.insert("w", (1, 8), vec![0.0; 8]).unwrap();
    let mut state = AdamState::new(1e-2);
    for _ in 0..2000 {
        let w = store.get("w").unwrap().data.clone();
        let grad: Vec<f64> = w
            .iter()
            .zip(&minimizer)
            .zip(&curv)
            .map(|((wi, ai), c)| 2.0 * c * (wi - ai))
            .collect();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), grad);
        adam_step(&mut store, &grads, &mut state).unwrap();
    }
    let w = &store.get("w").unwrap().data;
    for (wi, ai) in w.iter().zip(&minimizer) {
        assert!((wi - ai).abs() < 1e-3, "got {wi}, want {ai}");
    }
}

#[test]
fn adam_rejects_nan_gradients() {
    let mut store = simple_store(60);
    let mut state = AdamState::new(1e-3);
    let mut grads = BTreeMap::new();
    grads.insert("w".to_string(), vec![f64::NAN; 16]);
    match adam_step(&mut store, &grads, &mut state) {
        Err(Error::NanGradient { param }) => assert_eq!(param, "w"),
        other => panic!("expected NaN-gradient error, got {other:?}"),
    }
    // state must be untouched on error
    assert_eq!(state.step, 0);
}

/// One training step used by the determinism test.
fn train_params(steps: usize) -> ParamStore {
    let mut store = simple_store(70);
    let mut state = AdamState::new(1e-3);
    let x = randoms(20, 71);
    let target = randoms(20, 72);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let w = tape
            .leaf(store.get("w").unwrap().data.clone(), (4, 4), true)
            .unwrap();
        let b = tape
            .leaf(store.get("b").unwrap().data.clone(), (1, 4), true)
            .unwrap();
        let xc = tape.constant(x.clone(), (5, 4)).unwrap();
        let h = tape.matmul(xc, w).unwrap();
        let h = tape.add(h, b).unwrap();
        let e = tape.elu(h).unwrap();
        let t = tape.constant(target.clone(), (5, 4)).unwrap();
        let loss = tape.mse(e, t).unwrap();
        tape.backward(loss).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), tape.grad(w).unwrap().to_vec());
        grads.insert("b".to_string(), tape.grad(b).unwrap().to_vec());
        adam_step(&mut store, &grads, &mut state).unwrap();
    }
    store
}

#[test]
fn training_is_bit_deterministic() {
    let a = train_params(50);
    let b = train_params(50);
    assert_eq!(a, b);
}

#[test]
fn param_checkpoint_round_trips_bit_identically() {
    let store = train_params(10);
    let dir = tempdir().unwrap();
    let path = dir.path().join("params.doc");
    save_params(&path, &store).unwrap();
    let loaded = load_params(&path).unwrap();
    assert_eq!(loaded, store);
}
