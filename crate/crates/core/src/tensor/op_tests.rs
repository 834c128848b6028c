use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::gradcheck;
use crate::rng::{normal_tensor, stream};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    normal_tensor(&mut stream(seed, 99), shape, 1.0)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::identity(2));
    let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let c = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);

    let a = g.constant(t(&[1, 2], &[1., 2.]));
    let b = g.constant(t(&[2, 1], &[3., 4.]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[1, 1]);
    assert_eq!(g.value(c).item(), 11.0);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let params = vec![
        ("a".to_string(), rand(&[5, 7], 1)),
        ("b".to_string(), rand(&[7, 3], 2)),
    ];
    let w = rand(&[5, 3], 3);
    let report = gradcheck::check(&params, 1e-5, |g, v| {
        let c = g.matmul(v[0], v[1])?;
        let w = g.constant(w.clone());
        let p = g.mul(c, w)?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(report.passes(1e-7), "{report:?}");
}

fn softmax_of(row: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, row.len()], row));
    let y = g.softmax_rows(x).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn softmax_examples() {
    let third = 1.0 / 3.0;
    assert!(close(&softmax_of(&[0., 0., 0.]), &[third; 3], 1e-15));

    let y = softmax_of(&[1000.0, 0.0]);
    assert!(y.iter().all(|v| v.is_finite()));
    assert!((y[0] - 1.0).abs() < 1e-15 && y[1] < 1e-300);

    let y = softmax_of(&[1f64.ln(), 2f64.ln(), 3f64.ln()]);
    assert!(close(&y, &[1. / 6., 2. / 6., 3. / 6.], 1e-15));
}

#[test]
fn softmax_preserves_exact_ties() {
    let y = softmax_of(&[0.3, 1.7, 0.3, 1.7]);
    assert_eq!(y[0].to_bits(), y[2].to_bits());
    assert_eq!(y[1].to_bits(), y[3].to_bits());
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2], &[1., 2.]));
    let b = g.constant(t(&[2], &[3., 4.]));
    let s = g.add(a, b).unwrap();
    assert_eq!(g.value(s).data(), &[4., 6.]);

    let c = g.constant(Tensor::full(&[7], 2.5));
    let m = g.mean(c);
    assert_eq!(g.value(m).item(), 2.5);

    let bad = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(g.add(a, bad), Err(Error::Shape { .. })));

    let mat = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let row = g.constant(t(&[2], &[10., 20.]));
    let s = g.add(mat, row).unwrap();
    assert_eq!(g.value(s).data(), &[11., 22., 13., 24.]);
    let p = g.mul(mat, row).unwrap();
    assert_eq!(g.value(p).data(), &[10., 40., 30., 80.]);

    let r = g.constant(t(&[3], &[-1., 0.5, 0.]));
    let r = g.relu(r);
    assert_eq!(g.value(r).data(), &[0., 0.5, 0.]);
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut g = Graph::new();
    let x = g.constant(rand(&[4, 9], 5));
    let y = g.layer_norm(x, 0.0).unwrap();
    for row in g.value(y).data().chunks(9) {
        let mu = row.iter().sum::<f64>() / 9.0;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 9.0;
        assert!(mu.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-10);
    }
}

#[test]
fn index_select_and_add_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3, 1], &[1., 2., 3.]));
    let s = g.index_select(x, &[2, 0]).unwrap();
    assert_eq!(g.value(s).data(), &[3., 1.]);

    let dest = g.constant(Tensor::zeros(&[2, 1]));
    let src = g.constant(t(&[2, 1], &[1., 2.]));
    let out = g.index_add(dest, &[0, 0], src).unwrap();
    assert_eq!(g.value(out).data(), &[3., 0.]);

    match g.index_select(x, &[0, 3]) {
        Err(Error::Index { index, extent, .. }) => assert_eq!((index, extent), (3, 3)),
        other => panic!("expected index error, got {other:?}"),
    }
    assert!(matches!(
        g.index_add(dest, &[5, 0], src),
        Err(Error::Index { index: 5, .. })
    ));
}

fn brute_force_ce(logits: &Tensor, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let u = g.constant(Tensor::zeros(&[2, 4]));
    let l = g.cross_entropy(u, &[0, 3]).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);

    let sure = g.constant(t(&[1, 3], &[0., 60., 0.]));
    let l = g.cross_entropy(sure, &[1]).unwrap();
    assert!(g.value(l).item() < 1e-20);

    let logits = rand(&[3, 5], 11);
    let labels = [4, 0, 2];
    let x = g.constant(logits.clone());
    let l = g.cross_entropy(x, &labels).unwrap();
    assert!((g.value(l).item() - brute_force_ce(&logits, &labels)).abs() < 1e-10);

    assert!(matches!(
        g.cross_entropy(x, &[0, 5, 1]),
        Err(Error::Index { index: 5, extent: 5, .. })
    ));
}

#[test]
fn backward_examples_and_accumulation() {
    let mut w = Tensor::vector(vec![0.3, -1.0, 2.0]).unwrap().with_requires_grad(true);
    let mut g = Graph::new();
    let v = g.leaf(w.clone());
    let s = g.sum(v);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(v).unwrap(), &[1., 1., 1.]);

    let mut w2 = Tensor::vector(vec![1., 2.]).unwrap().with_requires_grad(true);
    let mut g = Graph::new();
    let v2 = g.leaf(w2.clone());
    let sq = g.mul(v2, v2).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(v2).unwrap(), &[2., 4.]);

    grads.accumulate_into(v2, &mut w2).unwrap();
    let again = g.backward(s).unwrap();
    again.accumulate_into(v2, &mut w2).unwrap();
    assert_eq!(w2.grad().unwrap(), &[4., 8.]);
    w2.zero_grad();
    assert!(w2.grad().is_none());

    let mut g = Graph::new();
    let v = g.leaf(w.clone());
    assert!(matches!(g.backward(v), Err(Error::Contract(_))));
    w.zero_grad();
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[2], 3.0));
    let p = g.param(&Tensor::full(&[2], 1.0));
    let m = g.mul(c, p).unwrap();
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    assert!(grads.wrt(c).is_none());
    assert_eq!(grads.wrt(p).unwrap(), &[3., 3.]);
}

fn check_op(
    shapes: &[&[usize]],
    seed: u64,
    tol: f64,
    f: impl Fn(&mut Graph, &[Var]) -> crate::Result<Var>,
) {
    let params: Vec<(String, Tensor)> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("x{i}"), rand(s, seed + i as u64)))
        .collect();
    // project onto a random direction so every output element matters
    let report = gradcheck::check(&params, 1e-5, |g, v| {
        let y = f(g, v)?;
        let shape = g.value(y).shape().to_vec();
        let w = g.constant(rand(&shape, seed + 1000));
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(report.passes(tol), "{report:?}");
}

#[test]
fn elementwise_gradients() {
    let tol = 1e-6;
    check_op(&[&[4, 5], &[4, 5]], 1, tol, |g, v| g.add(v[0], v[1]));
    check_op(&[&[4, 5], &[5]], 2, tol, |g, v| g.add(v[0], v[1]));
    check_op(&[&[4, 5], &[4, 5]], 3, tol, |g, v| g.mul(v[0], v[1]));
    check_op(&[&[4, 5], &[1, 5]], 4, tol, |g, v| g.mul(v[0], v[1]));
    check_op(&[&[4, 5]], 5, tol, |g, v| Ok(g.scale(v[0], -1.7)));
    check_op(&[&[4, 5]], 6, tol, |g, v| Ok(g.sum(v[0])));
    check_op(&[&[4, 5]], 22, tol, |g, v| {
        let sq = g.mul(v[0], v[0])?;
        let c = g.constant(Tensor::full(&[4, 5], 0.5));
        let pos = g.add(sq, c)?;
        Ok(g.recip(pos))
    });
    check_op(&[&[4, 5]], 7, tol, |g, v| Ok(g.mean(v[0])));
    check_op(&[&[4, 5]], 8, tol, |g, v| Ok(g.relu(v[0])));
    check_op(&[&[4, 5]], 9, tol, |g, v| Ok(g.gelu(v[0])));
    check_op(&[&[4, 6]], 10, tol, |g, v| g.layer_norm(v[0], 1e-5));
    check_op(&[&[4, 6]], 11, tol, |g, v| g.softmax_rows(v[0]));
    check_op(&[&[4, 6]], 12, tol, |g, v| g.transpose(v[0]));
    check_op(&[&[4, 3]], 13, tol, |g, v| g.index_select(v[0], &[3, 1, 1]));
    check_op(&[&[4, 3], &[3, 3]], 14, tol, |g, v| {
        g.index_add(v[0], &[2, 0, 2], v[1])
    });
    check_op(&[&[4, 3]], 15, tol, |g, v| {
        g.gather_elems(v[0], &[(0, 2), (3, 1), (0, 2)])
    });
    check_op(&[&[4, 3], &[4]], 16, tol, |g, v| g.scale_rows(v[0], v[1]));
    check_op(&[&[4, 5]], 17, tol, |g, v| g.select_cols(v[0], &[4, 0, 2]));
    check_op(&[&[3, 2], &[3, 4]], 18, tol, |g, v| g.concat_cols(&[v[0], v[1]]));
    check_op(&[&[2, 3], &[4, 3]], 19, tol, |g, v| g.concat_rows(&[v[0], v[1]]));
    check_op(&[&[4, 3]], 20, tol, |g, v| g.sum_rows(v[0]));
    check_op(&[&[3, 5]], 21, tol, |g, v| g.cross_entropy(v[0], &[1, 4, 0]));
}

#[test]
fn cv_squared_gradient() {
    // shifted away from zero mean so the ratio is well conditioned
    let x = Tensor::from_fn(&[6], |i| 2.0 + 0.3 * i as f64 - 0.1 * (i * i) as f64 / 4.0);
    let params = vec![("x".to_string(), x)];
    let report = gradcheck::check(&params, 1e-5, |g, v| Ok(g.cv_squared(v[0]))).unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut g = Graph::new();
        let a = g.constant(rand(&[6, 8], 1));
        let b = g.constant(rand(&[8, 4], 2));
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax_rows(c).unwrap();
        let n = g.layer_norm(s, 1e-5).unwrap();
        g.value(n).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn fault_injection_breaks_matmul_gradient() {
    let params = vec![
        ("a".to_string(), rand(&[3, 4], 1)),
        ("b".to_string(), rand(&[4, 2], 2)),
    ];
    inject_fault(Some(Fault::FlipMatmulBackward));
    let report = gradcheck::check(&params, 1e-5, |g, v| {
        let c = g.matmul(v[0], v[1])?;
        let sq = g.mul(c, c)?;
        Ok(g.sum(sq))
    });
    inject_fault(None);
    assert!(!report.unwrap().passes(1e-4));
}

#[test]
fn mac_counter_tracks_terms() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[3, 4]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    g.set_mac_term(MacTerm::Score);
    g.matmul(a, b).unwrap();
    g.set_mac_term(MacTerm::Other);
    g.matmul(a, b).unwrap();
    assert_eq!(g.macs().score, 60);
    assert_eq!(g.macs().other, 60);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-300.0f64..300.0, 1..9), 1..5)) {
        let n = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(n, 0.0); r }).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&rows).unwrap());
        let y = g.softmax_rows(x).unwrap();
        for row in g.value(y).data().chunks(n) {
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_then_scatter_is_identity(perm in Just((0..7usize).collect::<Vec<_>>()).prop_shuffle(), seed in 0u64..1000) {
        let x = rand(&[7, 3], seed);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gathered = g.index_select(xv, &perm).unwrap();
        let zero = g.constant(Tensor::zeros(&[7, 3]));
        let back = g.index_add(zero, &perm, gathered).unwrap();
        prop_assert_eq!(g.value(back).data(), x.data());
    }
}
