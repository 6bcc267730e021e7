use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::attnmask::AttentionMask;
use crate::rng::{rng_for, Stream};

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_for(seed, Stream::Init, 99);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Φ(x) by composite Simpson quadrature of the normal density on [0, |x|].
fn phi_by_quadrature(x: f64) -> f64 {
    let n = 20_000;
    let h = x.abs() / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(0.0) + pdf(x.abs());
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * pdf(i as f64 * h);
    }
    let half = s * h / 3.0;
    if x >= 0.0 {
        0.5 + half
    } else {
        0.5 - half
    }
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::eye(2)).unwrap();
    let ii = g.matmul(i, i).unwrap();
    assert_eq!(g.value(ii), &Tensor::eye(2));

    let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
    let b = g.constant(m(&[&[0.0], &[1.0]])).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &m(&[&[2.0], &[4.0]]));

    let z = g.constant(Tensor::zeros(&[3, 2])).unwrap();
    let zc = g.matmul(z, a).unwrap();
    assert!(g.value(zc).data().iter().all(|&v| v == 0.0));

    assert!(matches!(g.matmul(a, z), Err(NumericsError::ShapeMismatch { .. })));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::zeros(&[4, 4])).unwrap();
    let p = g.softmax_masked(l, &AttentionMask::all_allow(4)).unwrap();
    assert!(g.value(p).data().iter().all(|&v| v == 0.25));

    let l = g.constant(random(&[3, 3], 1)).unwrap();
    let diag = AttentionMask::from_fn(3, |q, k| q == k);
    let p = g.softmax_masked(l, &diag).unwrap();
    assert_eq!(g.value(p), &Tensor::eye(3));

    let l = g.constant(m(&[&[0.0, 3f64.ln()], &[0.0, 3f64.ln()]])).unwrap();
    let p = g.softmax_masked(l, &AttentionMask::all_allow(2)).unwrap();
    assert!((g.value(p).at(0, 0) - 0.25).abs() < 1e-15);
    assert!((g.value(p).at(0, 1) - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_rejects_empty_rows_and_bad_shapes() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::zeros(&[2, 2])).unwrap();
    let mask = AttentionMask::from_fn(2, |q, _| q == 0);
    assert_eq!(g.softmax_masked(l, &mask), Err(NumericsError::EmptyMaskRow { row: 1 }));
    assert!(matches!(
        g.softmax_masked(l, &AttentionMask::all_allow(3)),
        Err(NumericsError::ShapeMismatch { .. })
    ));
}

#[test]
fn layernorm_examples() {
    let mut g = Graph::new();
    let ones = g.constant(Tensor::full(&[2], 1.0)).unwrap();
    let zeros = g.constant(Tensor::zeros(&[2])).unwrap();

    let c = g.constant(m(&[&[3.0, 3.0]])).unwrap();
    let y = g.layernorm(c, ones, zeros, LAYERNORM_EPS).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    // mean 0, variance 1, so the output is [1, -1] / sqrt(1 + eps).
    let x = g.constant(m(&[&[1.0, -1.0]])).unwrap();
    let y = g.layernorm(x, ones, zeros, LAYERNORM_EPS).unwrap();
    let s = 1.0 / (1.0 + LAYERNORM_EPS).sqrt();
    assert!((g.value(y).at(0, 0) - s).abs() < 1e-15);
    assert!((g.value(y).at(0, 1) + s).abs() < 1e-15);
    assert!((g.value(y).at(0, 0) - 1.0).abs() < 1e-5);

    let bias = g.constant(Tensor::vector(vec![0.3, -0.7])).unwrap();
    let x0 = g.constant(Tensor::zeros(&[1, 2])).unwrap();
    let y = g.layernorm(x0, ones, bias, LAYERNORM_EPS).unwrap();
    assert_eq!(g.value(y).data(), &[0.3, -0.7]);
}

#[test]
fn gelu_examples() {
    assert_eq!(gelu_scalar(0.0), 0.0);
    assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
    let oracle = 1.0 * phi_by_quadrature(1.0);
    assert!((oracle - 0.841345).abs() < 1e-6);
    assert!((gelu_scalar(1.0) - oracle).abs() < 1e-12);
    for x in [-3.0, -0.5, 0.25, 2.0] {
        assert!((gelu_scalar(x) - x * phi_by_quadrature(x)).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let u = g.constant(Tensor::zeros(&[3, 16])).unwrap();
    let l = g.cross_entropy(u, &[0, 7, 15]).unwrap();
    assert!((g.value(l).item() - 16f64.ln()).abs() < 1e-12);

    let mut hot = Tensor::zeros(&[1, 4]);
    hot.data_mut()[2] = 1e4;
    let h = g.constant(hot).unwrap();
    let l = g.cross_entropy(h, &[2]).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let x = g.constant(m(&[&[0.0, 3f64.ln()]])).unwrap();
    let l = g.cross_entropy(x, &[1]).unwrap();
    assert!((g.value(l).item() - (-(0.75f64).ln())).abs() < 1e-12);
    assert!((g.value(l).item() - 0.2877).abs() < 1e-4);

    assert_eq!(
        g.cross_entropy(x, &[2]),
        Err(NumericsError::TargetOutOfRange { target: 2, vocab: 2 })
    );
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(random(&[2, 3], 2)).unwrap();
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let xv = random(&[5], 3);
    let x = g.param(xv.clone()).unwrap();
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &xv.map(|v| 2.0 * v));
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut g = Graph::new();
    let x = g.param(random(&[4], 4)).unwrap();
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 2.0));
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_needs_scalar() {
    let mut g = Graph::new();
    let x = g.param(random(&[2, 2], 5)).unwrap();
    assert!(matches!(g.backward(x), Err(NumericsError::NotScalar { .. })));
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::new();
    assert!(matches!(
        g.constant(Tensor::scalar(f64::NAN)),
        Err(NumericsError::NonFinite { .. })
    ));
    let x = g.constant(Tensor::scalar(1e300)).unwrap();
    assert!(matches!(g.mul(x, x), Err(NumericsError::NonFinite { .. })));
}

#[test]
fn fd_check_examples() {
    let r = fd_check(
        |g, p| {
            let sq = g.mul(p[0], p[0])?;
            g.sum(sq)
        },
        &[Tensor::scalar(3.0)],
        DEFAULT_FD_EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");

    let r = fd_check(
        |g, p| {
            let a = g.transpose(p[0])?;
            let b = g.transpose(p[1])?;
            let d = g.row_cosine_distance(a, b)?;
            g.sum(d)
        },
        &[random(&[4, 1], 6), random(&[4, 1], 7)],
        DEFAULT_FD_EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");

    assert_eq!(
        fd_check(|g, p| g.sum(p[0]), &[Tensor::scalar(1.0)], 0.0),
        Err(NumericsError::BadStep(0.0))
    );
}

#[test]
fn composite_mlp_gradient_matches_fd() {
    let params = [random(&[3, 5], 10), random(&[5], 11), random(&[5, 2], 12), random(&[4, 3], 13)];
    let r = fd_check(
        |g, p| {
            let h = g.matmul(p[3], p[0])?;
            let h = g.add_row(h, p[1])?;
            let h = g.gelu(h)?;
            let o = g.matmul(h, p[2])?;
            g.cross_entropy(o, &[0, 1, 1, 0])
        },
        &params,
        DEFAULT_FD_EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn corrupted_gelu_rule_is_caught() {
    let params = [random(&[3, 4], 20)];
    let f = |g: &mut Graph, p: &[Var]| {
        g.inject_fault(Some(GradFault::GeluDerivative));
        let h = g.gelu(p[0])?;
        let h = g.mul(h, h)?;
        g.sum(h)
    };
    let r = fd_check(f, &params, DEFAULT_FD_EPS).unwrap();
    assert!(r.max_rel_error > 1e-4, "{r:?}");
}

/// Every differentiable op against central differences at 100 random points.
#[test]
fn every_op_matches_finite_differences() {
    type Case = (&'static str, Vec<Vec<usize>>, fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>);
    let cases: Vec<Case> = vec![
        ("matmul", vec![vec![2, 3], vec![3, 2]], |g, p| {
            let c = g.matmul(p[0], p[1])?;
            let c = g.mul(c, c)?;
            g.sum(c)
        }),
        ("add_sub_mul", vec![vec![2, 2], vec![2, 2]], |g, p| {
            let a = g.add(p[0], p[1])?;
            let s = g.sub(p[0], p[1])?;
            let c = g.mul(a, s)?;
            let c = g.mul(c, p[0])?;
            g.sum(c)
        }),
        ("add_row_scale", vec![vec![3, 2], vec![2]], |g, p| {
            let a = g.add_row(p[0], p[1])?;
            let a = g.scale(a, -1.7)?;
            let a = g.mul(a, a)?;
            g.mean(a)
        }),
        ("transpose", vec![vec![2, 3], vec![2, 3]], |g, p| {
            let t = g.transpose(p[0])?;
            let c = g.matmul(p[1], t)?;
            let c = g.mul(c, c)?;
            g.sum(c)
        }),
        ("gelu", vec![vec![3, 3]], |g, p| {
            let h = g.gelu(p[0])?;
            let h = g.mul(h, h)?;
            g.sum(h)
        }),
        ("layernorm", vec![vec![3, 4], vec![4], vec![4], vec![3, 4]], |g, p| {
            let y = g.layernorm(p[0], p[1], p[2], LAYERNORM_EPS)?;
            let y = g.mul(y, p[3])?;
            g.sum(y)
        }),
        ("softmax_masked", vec![vec![4, 4], vec![4, 4]], |g, p| {
            let mask = AttentionMask::from_fn(4, |q, k| k <= q || (q + k) % 3 == 0);
            let y = g.softmax_masked(p[0], &mask)?;
            let y = g.mul(y, p[1])?;
            g.sum(y)
        }),
        ("cross_entropy", vec![vec![3, 5]], |g, p| g.cross_entropy(p[0], &[4, 0, 2])),
        ("gather_concat_rows", vec![vec![3, 2], vec![2, 2]], |g, p| {
            let c = g.concat_rows(&[p[0], p[1]])?;
            let r = g.gather_rows(c, &[4, 0, 0, 2])?;
            let r = g.mul(r, r)?;
            g.sum(r)
        }),
        ("slice_concat_cols", vec![vec![2, 4]], |g, p| {
            let a = g.slice_cols(p[0], 1, 2)?;
            let b = g.slice_cols(p[0], 0, 1)?;
            let c = g.concat_cols(&[b, a, b])?;
            let c = g.mul(c, c)?;
            let c = g.mul(c, c)?;
            g.sum(c)
        }),
        ("row_cosine_distance", vec![vec![3, 4], vec![3, 4]], |g, p| {
            let d = g.row_cosine_distance(p[0], p[1])?;
            let d = g.mul(d, d)?;
            g.sum(d)
        }),
        ("row_smooth_l1", vec![vec![3, 4], vec![3, 4]], |g, p| {
            let d = g.row_smooth_l1(p[0], p[1])?;
            g.sum(d)
        }),
    ];
    for (name, shapes, f) in cases {
        for point in 0..100u64 {
            let params: Vec<Tensor> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| random(s, point * 31 + i as u64))
                .collect();
            let r = fd_check(f, &params, DEFAULT_FD_EPS).unwrap();
            assert!(r.max_rel_error < 1e-4, "{name} at point {point}: {r:?}");
        }
    }
}

#[test]
fn ops_are_bit_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.param(random(&[4, 6], 40)).unwrap();
        let w = g.param(random(&[6, 6], 41)).unwrap();
        let h = g.matmul(x, w).unwrap();
        let h = g.gelu(h).unwrap();
        let t = g.transpose(h).unwrap();
        let s = g.matmul(h, t).unwrap();
        let p = g.softmax_masked(s, &AttentionMask::causal(4)).unwrap();
        let l = g.cross_entropy(p, &[0, 1, 2, 3]).unwrap();
        g.backward(l).unwrap();
        (
            g.value(l).item().to_bits(),
            g.grad(w).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn masked_softmax_rows_are_distributions(
        logits in proptest::collection::vec(-20.0f64..20.0, 36),
        bits in proptest::collection::vec(any::<bool>(), 36),
    ) {
        let mask = AttentionMask::from_fn(6, |q, k| q == k || bits[q * 6 + k]);
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(vec![6, 6], logits).unwrap()).unwrap();
        let p = g.softmax_masked(l, &mask).unwrap();
        let y = g.value(p);
        for q in 0..6 {
            let mut total = 0.0;
            for k in 0..6 {
                if mask.allows(q, k) {
                    total += y.at(q, k);
                } else {
                    prop_assert_eq!(y.at(q, k), 0.0);
                }
            }
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss(seed in 0u64..1000) {
        let params = [random(&[3, 4], seed), random(&[4, 2], seed + 1)];
        let build = |g: &mut Graph, which: u8| -> (Var, Var, Var) {
            let a = g.param(params[0].clone()).unwrap();
            let b = g.param(params[1].clone()).unwrap();
            let h = g.matmul(a, b).unwrap();
            let l1 = g.cross_entropy(h, &[0, 1, 1]).unwrap();
            let h2 = g.gelu(h).unwrap();
            let l2 = g.sum(h2).unwrap();
            let loss = match which {
                0 => g.add(l1, l2).unwrap(),
                1 => l1,
                _ => l2,
            };
            (a, b, loss)
        };
        let mut both = Graph::new();
        let (a, b, l) = build(&mut both, 0);
        both.backward(l).unwrap();
        let mut sep = Graph::new();
        let (a1, b1, l1) = build(&mut sep, 1);
        sep.backward(l1).unwrap();
        let mut sep2 = Graph::new();
        let (a2, b2, l2) = build(&mut sep2, 2);
        sep2.backward(l2).unwrap();
        for (v, (v1, v2)) in [(a, (a1, a2)), (b, (b1, b2))] {
            let joint = both.grad(v).unwrap().data();
            let g1 = sep.grad(v1).unwrap().data();
            let g2 = sep2.grad(v2).unwrap().data();
            for i in 0..joint.len() {
                prop_assert!((joint[i] - (g1[i] + g2[i])).abs() < 1e-12);
            }
        }
    }
}
