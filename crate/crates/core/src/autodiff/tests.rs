use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Sum of `out` weighted by fixed pseudo-random coefficients.
fn probe(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let weights = (0..n).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 5.0 + 0.1).collect();
    let w = tape.constant(shape, weights)?;
    let prod = tape.mul(out, w)?;
    let m = tape.mean(prod);
    Ok(tape.scale(m, n as f64))
}

fn store_with(shapes: &[(&str, &[usize], f64, f64)], seed: u64) -> (ParameterStore, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let ids = shapes
        .iter()
        .map(|(name, shape, lo, hi)| {
            store
                .insert(*name, random_tensor(&mut rng, shape, *lo, *hi))
                .unwrap()
        })
        .collect();
    (store, ids)
}

fn assert_grads<F>(store: &ParameterStore, f: F)
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let report = grad_check(f, store, EPS, 7).unwrap();
    for p in &report.params {
        assert!(
            p.max_rel_error < TOL,
            "{}: relative error {} (abs {})",
            p.name,
            p.max_rel_error,
            p.max_abs_error
        );
    }
}

#[test]
fn matmul_family() {
    let (store, ids) = store_with(
        &[
            ("a", &[3, 4], -1.0, 1.0),
            ("b", &[4, 5], -1.0, 1.0),
            ("c", &[5, 4], -1.0, 1.0),
        ],
        1,
    );
    assert_grads(&store, |t, s| {
        let a = t.param(s, ids[0]);
        let b = t.param(s, ids[1]);
        let c = t.param(s, ids[2]);
        let ab = t.matmul(a, b)?;
        let act = t.matmul_t(a, c)?;
        let x = probe(t, ab)?;
        let y = probe(t, act)?;
        t.add(x, y)
    });
}

#[test]
fn batch_matmul_grad() {
    let (store, ids) = store_with(&[("a", &[2, 3, 4], -1.0, 1.0), ("b", &[2, 4, 2], -1.0, 1.0)], 2);
    assert_grads(&store, |t, s| {
        let a = t.param(s, ids[0]);
        let b = t.param(s, ids[1]);
        let out = t.batch_matmul(a, b)?;
        probe(t, out)
    });
}

#[test]
fn elementwise_grads() {
    let (store, ids) = store_with(
        &[("x", &[2, 5], -1.0, 1.0), ("y", &[2, 5], 0.5, 2.0)],
        3,
    );
    assert_grads(&store, |t, s| {
        let x = t.param(s, ids[0]);
        let y = t.param(s, ids[1]);
        let add = t.add(x, y)?;
        let sub = t.sub(x, y)?;
        let mul = t.mul(x, y)?;
        let div = t.div(x, y)?;
        let ex = t.exp(x);
        let lg = t.log(y);
        let ab = t.abs(x);
        let sq = t.square(x);
        let re = t.relu(x);
        let ge = t.gelu(x);
        let sc = t.scale(x, -2.5);
        let mut total = probe(t, add)?;
        for v in [sub, mul, div, ex, lg, ab, sq, re, ge, sc] {
            let p = probe(t, v)?;
            total = t.add(total, p)?;
        }
        Ok(total)
    });
}

#[test]
fn broadcast_and_reduction_grads() {
    let (store, ids) = store_with(
        &[
            ("x", &[3, 3, 4], -1.0, 1.0),
            ("v", &[3, 4], -1.0, 1.0),
            ("r", &[1, 4], -1.0, 1.0),
        ],
        4,
    );
    assert_grads(&store, |t, s| {
        let x = t.param(s, ids[0]);
        let v = t.param(s, ids[1]);
        let r = t.param(s, ids[2]);
        let tr = t.add_trailing(x, v)?;
        let b = t.broadcast_to(r, &[3, 3, 4])?;
        let xb = t.mul(tr, b)?;
        let s1 = t.sum_axis(xb, 1)?;
        let s0 = t.sum_axis(xb, 0)?;
        let rs = t.reshape(s0, &[12])?;
        let a = probe(t, s1)?;
        let c = probe(t, rs)?;
        t.add(a, c)
    });
}

#[test]
fn softmax_grads() {
    let (store, ids) = store_with(&[("x", &[3, 4, 2], -2.0, 2.0)], 5);
    let mask: Vec<f64> = (0..24).map(|i| if i % 5 == 1 { 0.0 } else { 1.0 }).collect();
    assert_grads(&store, |t, s| {
        let x = t.param(s, ids[0]);
        let a = t.softmax(x, 1)?;
        let b = t.masked_softmax(x, 1, Some(&mask))?;
        let c = t.softmax(x, 2)?;
        let mut total = probe(t, a)?;
        for v in [b, c] {
            let p = probe(t, v)?;
            total = t.add(total, p)?;
        }
        Ok(total)
    });
}

#[test]
fn gather_concat_pool_grads() {
    let (store, ids) = store_with(
        &[("table", &[5, 3], -1.0, 1.0), ("h", &[4, 2], -1.0, 1.0)],
        6,
    );
    assert_grads(&store, |t, s| {
        let table = t.param(s, ids[0]);
        let h = t.param(s, ids[1]);
        let g = t.gather(table, &[4, 0, 4, 2])?;
        let cat = t.concat_last(&[g, h])?;
        let top = t.slice_rows(cat, 1, 2)?;
        let rows = t.concat_rows(&[top, cat])?;
        let pooled = t.mean_rows(rows)?;
        let a = probe(t, pooled)?;
        let b = probe(t, rows)?;
        t.add(a, b)
    });
}

#[test]
fn norm_grads() {
    let (store, ids) = store_with(
        &[
            ("x", &[5, 3], -2.0, 2.0),
            ("gamma", &[3], 0.5, 1.5),
            ("beta", &[3], -0.5, 0.5),
        ],
        7,
    );
    let rm = [0.1, -0.2, 0.3];
    let rv = [1.5, 0.7, 2.0];
    assert_grads(&store, |t, s| {
        let x = t.param(s, ids[0]);
        let g = t.param(s, ids[1]);
        let b = t.param(s, ids[2]);
        let (train, _) = t.batch_norm(x, g, b, None)?;
        let (fixed, _) = t.batch_norm(x, g, b, Some((&rm, &rv)))?;
        let ln = t.layer_norm(x, g, b)?;
        let mut total = probe(t, train)?;
        for v in [fixed, ln] {
            let p = probe(t, v)?;
            total = t.add(total, p)?;
        }
        Ok(total)
    });
}

#[test]
fn mask_and_cross_entropy_grads() {
    let (store, ids) = store_with(&[("logits", &[4, 3], -2.0, 2.0)], 8);
    let mask: Rc<[f64]> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 2.0 }).collect();
    assert_grads(&store, move |t, s| {
        let l = t.param(s, ids[0]);
        let m = t.mask_mul(l, mask.clone())?;
        let ce = t.cross_entropy(m, &[0, 2, 1, 1])?;
        let p = probe(t, m)?;
        t.add(ce, p)
    });
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut t = Tape::new();
    let x = t.constant(vec![5], vec![0.0; 5]).unwrap();
    let y = t.softmax(x, 0).unwrap();
    for &v in t.value(y) {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn gather_identity_table_is_one_hot() {
    let mut t = Tape::new();
    let eye = t
        .constant(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
        .unwrap();
    let g = t.gather(eye, &[2, 0]).unwrap();
    assert_eq!(t.value(g), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
}

#[test]
fn sum_exp_gradient_at_zero() {
    let mut store = ParameterStore::new();
    let id = store.insert("x", Tensor::zeros(vec![2])).unwrap();
    let mut t = Tape::new();
    let x = t.param(&store, id);
    let e = t.exp(x);
    let s = t.sum_axis(e, 0).unwrap();
    t.backward(s, &mut store).unwrap();
    assert_eq!(store.grad(id), &[1.0, 1.0]);
}

#[test]
fn gradients_accumulate_additively() {
    let (mut store, ids) = store_with(&[("w", &[3, 3], -1.0, 1.0)], 9);
    let mut t = Tape::new();
    let w = t.param(&store, ids[0]);
    let e = t.exp(w);
    let loss = probe(&mut t, e).unwrap();
    t.backward(loss, &mut store).unwrap();
    let once = store.grad(ids[0]).to_vec();
    t.backward(loss, &mut store).unwrap();
    let twice = store.grad(ids[0]);
    for (a, b) in once.iter().zip(twice) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn shape_errors_name_the_op() {
    let mut t = Tape::new();
    let a = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul"), "{err}");
    let c = t.constant(vec![3], vec![0.0; 3]).unwrap();
    assert!(t.add(a, c).unwrap_err().to_string().contains("add"));
    assert!(t.broadcast_to(a, &[3, 3]).is_err());
    assert!(t.backward(a, &mut ParameterStore::new()).is_err());
}

#[test]
fn quadratic_grad_check() {
    let mut store = ParameterStore::new();
    store
        .insert("theta", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
        .unwrap();
    let f = |t: &mut Tape, s: &ParameterStore| {
        let th = t.param(s, s.id("theta").unwrap());
        let sq = t.square(th);
        t.sum_axis(sq, 0)
    };
    let mut work = store.clone();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &work).unwrap();
    tape.backward(loss, &mut work).unwrap();
    assert_eq!(work.grad(work.id("theta").unwrap()), &[2.0, 4.0]);

    let report = grad_check(f, &store, 1e-4, 0).unwrap();
    assert!(report.max_rel_error() < 1e-8, "{}", report.max_rel_error());
}

#[test]
fn constant_function_has_zero_gradients() {
    let (store, _) = store_with(&[("w", &[4], -1.0, 1.0)], 10);
    let report = grad_check(|t, _| t.constant(vec![], vec![3.0]), &store, 1e-3, 0).unwrap();
    assert_eq!(report.max_rel_error(), 0.0);
    assert_eq!(report.params[0].max_abs_error, 0.0);
}

#[test]
fn grad_check_reports_non_finite() {
    let (store, ids) = store_with(&[("w", &[2], -1.0, -0.5)], 11);
    let res = grad_check(
        |t, s| {
            let w = t.param(s, ids[0]);
            let l = t.log(w);
            Ok(t.mean(l))
        },
        &store,
        1e-3,
        0,
    );
    assert!(matches!(res, Err(crate::CgtError::Numerical(_))));
}

#[test]
fn grad_check_samples_large_parameters() {
    let (store, ids) = store_with(&[("w", &[10, 10], -1.0, 1.0)], 12);
    let report = grad_check(
        |t, s| {
            let w = t.param(s, ids[0]);
            let sq = t.square(w);
            Ok(t.mean(sq))
        },
        &store,
        1e-4,
        3,
    )
    .unwrap();
    assert_eq!(report.params[0].checked, COORDS_PER_PARAM);
}

#[test]
fn forward_is_bit_deterministic() {
    let (store, ids) = store_with(&[("x", &[4, 6], -3.0, 3.0)], 13);
    let run = || {
        let mut t = Tape::new();
        let x = t.param(&store, ids[0]);
        let s = t.softmax(x, 1).unwrap();
        let m = t.matmul_t(s, x).unwrap();
        t.value(m).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (store, _) = store_with(&[("a", &[3, 7], -1e3, 1e3), ("b", &[5], -1e-9, 1e-9)], 14);
    let file = TensorFile::from_store(serde_json::json!({"note": "x"}), &store).unwrap();
    let text = file.to_json().unwrap();
    let back = TensorFile::from_json(&text).unwrap();
    let mut restored = store.clone();
    restored.get_mut(restored.id("a").unwrap()).data.iter_mut().for_each(|x| *x = 0.0);
    back.load_into(&mut restored).unwrap();
    for ((_, x), (_, y)) in store.iter().zip(restored.iter()) {
        let xb: Vec<u64> = x.data.iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u64> = y.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
    }
}

#[test]
fn checkpoint_rejects_other_versions() {
    let (store, _) = store_with(&[("a", &[2], -1.0, 1.0)], 15);
    let mut file = TensorFile::from_store(serde_json::Value::Null, &store).unwrap();
    file.version = 99;
    let text = serde_json::to_string(&file).unwrap();
    assert!(matches!(
        TensorFile::from_json(&text),
        Err(crate::CgtError::Version { .. })
    ));
}
