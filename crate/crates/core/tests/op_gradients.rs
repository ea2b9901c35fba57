//! Finite-difference checks for every tape op at 64-bit precision.
//!
//! Inputs near a non-differentiable point (ReLU at 0, max-pool near-ties,
//! zero-norm rows) are rejected and resampled.

use hman::numcore::{grad_check, BatchNormStats, Mode, Parameter, Tape, Tensor, Var};
use hman::Result;
use proptest::prelude::*;

const TOL: f64 = 1e-5;
const EPS: f64 = 1e-6;
const KINK: f64 = 1e-3;

fn param(name: &str, shape: &[usize], data: &[f64]) -> Parameter<f64> {
    Parameter::new(name, Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
}

/// `Σy² + 0.7·Σy`, which has a non-trivial gradient for every op.
fn readout(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let sq = tape.sum_squares(y);
    let lin = tape.sum(y);
    let lin = tape.scale(lin, 0.7);
    tape.add(sq, lin)
}

fn check(
    params: Vec<Parameter<f64>>,
    mut f: impl FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let mut set = params;
    grad_check(
        &mut set,
        |s, tape| {
            let vars: Vec<Var> = s.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
            let y = f(tape, &vars)?;
            readout(tape, y)
        },
        EPS,
    )
    .unwrap()
}

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn linear(x in vals(6), w in vals(12), b in vals(4)) {
        let err = check(
            vec![param("x", &[2, 3], &x), param("w", &[3, 4], &w), param("b", &[4], &b)],
            |t, v| t.linear(v[0], v[1], v[2]),
        );
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn matmul_t(a in vals(6), b in vals(12)) {
        let err = check(
            vec![param("a", &[2, 3], &a), param("b", &[4, 3], &b)],
            |t, v| t.matmul_t(v[0], v[1]),
        );
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn transpose(a in vals(6)) {
        let err = check(vec![param("a", &[2, 3], &a)], |t, v| t.transpose(v[0]));
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn conv1d(x in vals(14), k in vals(12), b in vals(2), stride in 1usize..3) {
        let err = check(
            vec![param("x", &[2, 7], &x), param("k", &[2, 2, 3], &k), param("b", &[2], &b)],
            |t, v| t.conv1d(v[0], v[1], v[2], stride),
        );
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn maxpool1d(x in vals(12), window in 1usize..4, stride in 1usize..3) {
        for row in x.chunks(6) {
            for start in (0..=6 - window).step_by(stride) {
                let mut w: Vec<f64> = row[start..start + window].to_vec();
                w.sort_by(|a, b| b.total_cmp(a));
                prop_assume!(w.len() < 2 || w[0] - w[1] > KINK);
            }
        }
        let err = check(vec![param("x", &[2, 6], &x)], |t, v| t.maxpool1d(v[0], window, stride));
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn relu(x in vals(8)) {
        prop_assume!(x.iter().all(|v| v.abs() > KINK));
        let err = check(vec![param("x", &[2, 4], &x)], |t, v| Ok(t.relu(v[0])));
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn batchnorm_train(x in vals(12), g in vals(3), b in vals(3)) {
        let mut stats = BatchNormStats::new(3);
        let err = check(
            vec![param("x", &[4, 3], &x), param("g", &[3], &g), param("b", &[3], &b)],
            |t, v| t.batchnorm(v[0], v[1], v[2], Mode::Train, &mut stats),
        );
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn batchnorm_infer(x in vals(6), g in vals(3), b in vals(3)) {
        let mut stats = BatchNormStats { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 1.5, 2.0] };
        let err = check(
            vec![param("x", &[2, 3], &x), param("g", &[3], &g), param("b", &[3], &b)],
            |t, v| t.batchnorm(v[0], v[1], v[2], Mode::Infer, &mut stats),
        );
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn concat(a in vals(6), b in vals(4), axis in 0usize..2) {
        let b_shape: &[usize] = if axis == 0 { &[2, 2] } else { &[3, 2] };
        let a_shape: &[usize] = &[3, 2];
        let b = if axis == 0 { b.clone() } else { [b.clone(), vec![0.25, -0.5]].concat() };
        let err = check(
            vec![param("a", a_shape, &a), param("b", b_shape, &b)],
            |t, v| t.concat(&[v[0], v[1]], axis),
        );
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn normalize_rows(x in vals(8)) {
        prop_assume!(x.chunks(4).all(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt() > 0.1));
        let err = check(vec![param("x", &[2, 4], &x)], |t, v| t.normalize_rows(v[0]));
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn add_and_scale(a in vals(4), b in vals(4), c in -2.0f64..2.0) {
        let err = check(
            vec![param("a", &[4], &a), param("b", &[4], &b)],
            |t, v| {
                let s = t.scale(v[1], c);
                t.add(v[0], s)
            },
        );
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn composed_encoder_path(x in vals(12), w in vals(9), k in vals(18), b in vals(3)) {
        // linear → transpose → conv → relu → transpose → normalize
        let err = check(
            vec![
                param("x", &[4, 3], &x),
                param("w", &[3, 3], &w),
                param("k", &[3, 3, 2], &k),
                param("b", &[3], &b),
            ],
            |t, v| {
                let zero = t.input(Tensor::zeros(&[3]));
                let h = t.linear(v[0], v[1], zero)?;
                let h = t.transpose(h)?;
                let h = t.conv1d(h, v[2], v[3], 1)?;
                let h = t.transpose(h)?;
                t.normalize_rows(h)
            },
        );
        // no ReLU here: the composed check avoids kinks entirely
        prop_assert!(err <= TOL, "{err}");
    }
}

#[test]
fn additivity_of_reused_nodes() {
    // y = x + x; d(Σy²)/dx = 8x
    let mut set = vec![param("x", &[3], &[0.5, -1.0, 2.0])];
    let mut tape = Tape::new();
    let x = tape.param(0, &set[0]);
    let y = tape.add(x, x).unwrap();
    let l = tape.sum_squares(y);
    tape.backward(l, &mut set).unwrap();
    assert_eq!(set[0].grad.data(), &[4.0, -8.0, 16.0]);
}
