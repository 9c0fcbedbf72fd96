use super::*;
use crate::numkit::rel_l2;

fn v(data: &[f64]) -> Vec64 {
    Vec64::new(data.to_vec()).unwrap()
}

fn m(rows: usize, cols: usize, data: &[f64]) -> Mat64 {
    Mat64::new(rows, cols, data.to_vec()).unwrap()
}

fn linear_block() -> BlockSpec {
    BlockSpec {
        hidden: None,
        activation: Activation::Identity,
    }
}

fn all_specs() -> Vec<LayerSpec> {
    let tanh2 = BlockSpec {
        hidden: Some(5),
        activation: Activation::Tanh,
    };
    let relu1 = BlockSpec {
        hidden: None,
        activation: Activation::Relu,
    };
    vec![
        LayerSpec::residual(LayerKind::PlainResidual, 3, tanh2),
        LayerSpec::residual(LayerKind::PlainResidual, 3, relu1),
        LayerSpec::residual(LayerKind::ReluResidual, 3, tanh2),
        LayerSpec::residual(LayerKind::GammaResidual(0.2), 3, tanh2),
        LayerSpec::residual(LayerKind::GammaResidual(1.0), 3, BlockSpec::default()),
        LayerSpec::gru(3, 2),
        LayerSpec::gru(4, 0),
        LayerSpec::lstm(2, 3),
    ]
}

struct Case {
    spec: LayerSpec,
    params: ParamGroup,
    h: Vec64,
    x: Option<Mat64>,
}

fn case(spec: LayerSpec, seed: u64, batch: usize) -> Case {
    let mut rng = Rng::new(seed);
    let params = spec.init_params(
        "layer",
        &mut rng,
        InitSpec {
            scale: 1.5,
            forget_bias: 0.3,
        },
    );
    // biases get random values too so every path is exercised
    let mut params = params;
    for p in params.params.iter_mut() {
        if p.value.rows() == 1 {
            let c = p.value.cols();
            p.value = rng.normal_mat(1, c, 0.5);
        }
    }
    let h = rng.normal(batch * spec.state_dim, 1.0);
    let x = (spec.input_dim > 0).then(|| rng.normal_mat(batch, spec.input_dim, 1.0));
    Case { spec, params, h, x }
}

fn eval(c: &Case, h: &Vec64) -> Vec64 {
    c.spec.forward(0, &c.params, h, c.x.as_ref()).unwrap().0
}

/// Central-difference `w·∂f/∂h`, independent of any backward code.
fn fd_input_vjp(c: &Case, w: &Vec64) -> Vec<f64> {
    let eps = 1e-6;
    (0..c.h.len())
        .map(|j| {
            let mut hp = c.h.clone();
            hp.as_mut_slice()[j] += eps;
            let mut hm = c.h.clone();
            hm.as_mut_slice()[j] -= eps;
            let fp = eval(c, &hp);
            let fm = eval(c, &hm);
            w.dot(&fp.sub(&fm).unwrap()).unwrap() / (2.0 * eps)
        })
        .collect()
}

fn fd_param_vjp(c: &Case, w: &Vec64) -> Vec<Vec<f64>> {
    let eps = 1e-6;
    (0..c.params.params.len())
        .map(|a| {
            (0..c.params.params[a].value.as_slice().len())
                .map(|j| {
                    let mut pp = c.params.clone();
                    pp.params[a].value.as_mut_slice()[j] += eps;
                    let mut pm = c.params.clone();
                    pm.params[a].value.as_mut_slice()[j] -= eps;
                    let fp = c.spec.forward(0, &pp, &c.h, c.x.as_ref()).unwrap().0;
                    let fm = c.spec.forward(0, &pm, &c.h, c.x.as_ref()).unwrap().0;
                    w.dot(&fp.sub(&fm).unwrap()).unwrap() / (2.0 * eps)
                })
                .collect()
        })
        .collect()
}

#[test]
fn plain_residual_with_zero_block_is_identity() {
    let spec = LayerSpec::residual(LayerKind::PlainResidual, 3, BlockSpec::default());
    let params = ParamGroup::new("l", vec![("w", Mat64::zeros(3, 3)), ("b", Mat64::zeros(1, 3))]);
    let h = v(&[0.5, -1.0, 2.0]);
    let (out, tape) = spec.forward(0, &params, &h, None).unwrap();
    assert_eq!(out, h);
    assert_eq!(spec.residual_jacobian(&tape), ResidualJacobian::identity(3));
    let w = v(&[1.0, 2.0, 3.0]);
    assert_eq!(spec.vjp_block(&params, &tape, &w).unwrap(), Vec64::zeros(3));
}

#[test]
fn relu_residual_hand_example() {
    // block output z = [0, 1] via zero weights and bias [0, 1]
    let spec = LayerSpec::residual(LayerKind::ReluResidual, 2, linear_block());
    let params = ParamGroup::new("l", vec![("w", Mat64::zeros(2, 2)), ("b", m(1, 2, &[0.0, 1.0]))]);
    let (out, tape) = spec.forward(0, &params, &v(&[1.0, -3.0]), None).unwrap();
    assert_eq!(out.as_slice(), &[1.0, 0.0]);
    assert_eq!(spec.residual_jacobian(&tape), ResidualJacobian::diagonal(v(&[1.0, 0.0])));
}

#[test]
fn relu_mask_is_zero_at_exact_zero() {
    let spec = LayerSpec::residual(LayerKind::ReluResidual, 2, linear_block());
    let params = ParamGroup::new("l", vec![("w", Mat64::zeros(2, 2)), ("b", m(1, 2, &[-1.0, 1.0]))]);
    let (_, tape) = spec.forward(0, &params, &v(&[1.0, 1.0]), None).unwrap();
    assert_eq!(spec.residual_jacobian(&tape), ResidualJacobian::diagonal(v(&[0.0, 1.0])));
}

#[test]
fn relu_all_positive_behaves_as_identity() {
    let spec = LayerSpec::residual(LayerKind::ReluResidual, 2, linear_block());
    let params = ParamGroup::new("l", vec![("w", Mat64::zeros(2, 2)), ("b", m(1, 2, &[0.5, 0.5]))]);
    let (_, tape) = spec.forward(0, &params, &v(&[1.0, 2.0]), None).unwrap();
    let k = spec.residual_jacobian(&tape);
    assert_eq!(k, ResidualJacobian::diagonal(Vec64::filled(2, 1.0)));
    let w = v(&[3.0, -4.0]);
    assert_eq!(k.apply(&w).unwrap(), w);
}

#[test]
fn gru_with_closed_update_gate_copies_state() {
    let spec = LayerSpec::gru(2, 1);
    let mut rng = Rng::new(1);
    let mut params = spec.init_params("g", &mut rng, InitSpec::default());
    params.params[3].value = Mat64::new(1, 2, vec![-1e3; 2]).unwrap();
    let h = v(&[0.3, -0.7]);
    let x = m(1, 1, &[0.1]);
    let (out, tape) = spec.forward(0, &params, &h, Some(&x)).unwrap();
    assert_eq!(out, h);
    assert_eq!(spec.residual_jacobian(&tape), ResidualJacobian::diagonal(Vec64::filled(2, 1.0)));
}

#[test]
fn scalar_block_vjp_hand_example() {
    let spec = LayerSpec::residual(LayerKind::PlainResidual, 1, linear_block());
    let params = ParamGroup::new("l", vec![("w", m(1, 1, &[2.0])), ("b", Mat64::zeros(1, 1))]);
    let (_, tape) = spec.forward(0, &params, &v(&[0.7]), None).unwrap();
    assert_eq!(spec.vjp_block(&params, &tape, &v(&[1.0])).unwrap().as_slice(), &[2.0]);
}

#[test]
fn scalar_param_vjp_hand_example() {
    // h = θ·x + x with x = 3
    let spec = LayerSpec::residual(LayerKind::PlainResidual, 1, linear_block());
    let params = ParamGroup::new("l", vec![("w", m(1, 1, &[0.4])), ("b", Mat64::zeros(1, 1))]);
    let (_, tape) = spec.forward(0, &params, &v(&[3.0]), None).unwrap();
    let g = spec.vjp_params(&params, &tape, &v(&[1.0])).unwrap();
    assert_eq!(g[0].as_slice(), &[3.0]);
    assert_eq!(g[1].as_slice(), &[1.0]);
}

#[test]
fn constant_block_has_zero_block_vjp() {
    let spec = LayerSpec::residual(LayerKind::PlainResidual, 2, linear_block());
    let params = ParamGroup::new("l", vec![("w", Mat64::zeros(2, 2)), ("b", m(1, 2, &[4.0, -1.0]))]);
    let (_, tape) = spec.forward(0, &params, &v(&[1.0, 2.0]), None).unwrap();
    assert_eq!(spec.vjp_block(&params, &tape, &v(&[5.0, 6.0])).unwrap(), Vec64::zeros(2));
}

#[test]
fn gamma_residual_jacobians() {
    let block = BlockSpec::default();
    let mut rng = Rng::new(2);
    let spec = LayerSpec::residual(LayerKind::GammaResidual(0.2), 2, block);
    let params = spec.init_params("l", &mut rng, InitSpec::default());
    let (_, tape) = spec.forward(0, &params, &v(&[1.0, 2.0]), None).unwrap();
    assert_eq!(tape.residual_jac.kind(), &JacobianKind::Scalar(0.8));

    let one = LayerSpec::residual(LayerKind::GammaResidual(1.0), 2, block);
    let (_, tape) = one.forward(0, &params, &v(&[1.0, 2.0]), None).unwrap();
    assert!(tape.residual_jac.is_zero());
    let w = v(&[0.3, -1.1]);
    let full = one.vjp_full(&params, &tape, &w).unwrap();
    assert_eq!(one.vjp_block(&params, &tape, &w).unwrap(), full);
}

#[test]
fn gamma_zero_forward_is_bit_identical_to_plain() {
    let mut rng = Rng::new(5);
    let block = BlockSpec {
        hidden: Some(4),
        activation: Activation::Tanh,
    };
    let plain = LayerSpec::residual(LayerKind::PlainResidual, 3, block);
    let gamma = LayerSpec::residual(LayerKind::GammaResidual(0.0), 3, block);
    let params = plain.init_params("l", &mut rng, InitSpec::default());
    let h = rng.normal(6, 1.0);
    let a = plain.forward(0, &params, &h, None).unwrap().0;
    let b = gamma.forward(0, &params, &h, None).unwrap().0;
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn lstm_residual_jacobian_covers_cell_part_only() {
    // forget gate f = [0.5, 0.9] via zero weights and logit biases
    let spec = LayerSpec::lstm(2, 1);
    let mut rng = Rng::new(0);
    let mut params = spec.init_params("c", &mut rng, InitSpec::default());
    for k in 0..4 {
        params.params[k].value = Mat64::zeros(3, 2);
    }
    let logit = |p: f64| (p / (1.0 - p)).ln();
    params.params[4].value = m(1, 2, &[logit(0.5), logit(0.9)]);
    let (_, tape) = spec
        .forward(0, &params, &v(&[0.1, 0.2, 0.3, 0.4]), Some(&m(1, 1, &[1.0])))
        .unwrap();
    match spec.residual_jacobian(&tape).kind() {
        JacobianKind::Diagonal(d) => {
            let expect = [0.5, 0.9, 0.0, 0.0];
            for (a, b) in d.iter().zip(expect) {
                assert!((a - b).abs() < 1e-15, "{a} vs {b}");
            }
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn jacobian_split_matches_finite_differences() {
    for (s, spec) in all_specs().into_iter().enumerate() {
        for seed in 0..3 {
            let c = case(spec, 100 * s as u64 + seed, 2);
            let (_, tape) = spec.forward(0, &c.params, &c.h, c.x.as_ref()).unwrap();
            let w = Rng::new(seed + 7).normal(c.h.len(), 1.0);
            let analytic = spec.vjp_full(&c.params, &tape, &w).unwrap();
            let numeric = fd_input_vjp(&c, &w);
            let err = rel_l2(analytic.as_slice(), &numeric);
            assert!(err < 1e-5, "{:?}: rel err {err}", spec.kind);
        }
    }
}

#[test]
fn param_vjp_matches_finite_differences() {
    for (s, spec) in all_specs().into_iter().enumerate() {
        let c = case(spec, 900 + s as u64, 3);
        let (_, tape) = spec.forward(0, &c.params, &c.h, c.x.as_ref()).unwrap();
        let w = Rng::new(11).normal(c.h.len(), 1.0);
        let analytic = spec.vjp_params(&c.params, &tape, &w).unwrap();
        let numeric = fd_param_vjp(&c, &w);
        let a: Vec<f64> = analytic.iter().flat_map(|m| m.as_slice().to_vec()).collect();
        let n: Vec<f64> = numeric.concat();
        let err = rel_l2(&a, &n);
        assert!(err < 1e-5, "{:?}: rel err {err}", spec.kind);
    }
}

#[test]
fn zero_cotangent_gives_zero_param_grads() {
    for spec in all_specs() {
        let c = case(spec, 3, 2);
        let (_, tape) = spec.forward(0, &c.params, &c.h, c.x.as_ref()).unwrap();
        let g = spec.vjp_params(&c.params, &tape, &Vec64::zeros(c.h.len())).unwrap();
        assert!(g.iter().all(|m| m.as_slice().iter().all(|&x| x == 0.0)));
    }
}

#[test]
fn block_vjp_is_linear_in_cotangent() {
    for spec in all_specs() {
        let c = case(spec, 4, 2);
        let (_, tape) = spec.forward(0, &c.params, &c.h, c.x.as_ref()).unwrap();
        let mut rng = Rng::new(99);
        let a = rng.normal(c.h.len(), 1.0);
        let b = rng.normal(c.h.len(), 1.0);
        let lhs = spec.vjp_block(&c.params, &tape, &a.add(&b).unwrap()).unwrap();
        let rhs = spec
            .vjp_block(&c.params, &tape, &a)
            .unwrap()
            .add(&spec.vjp_block(&c.params, &tape, &b).unwrap())
            .unwrap();
        assert!(rel_l2(lhs.as_slice(), rhs.as_slice()) < 1e-12);
    }
}

#[test]
fn summed_param_vjp_matches_per_tape_sum() {
    for spec in all_specs() {
        let steps: Vec<(LayerTape, Vec64)> = (0..4)
            .map(|t| {
                let c = case(spec, 40 + t, 3);
                let (_, tape) = spec.forward(t as usize, &c.params, &c.h, c.x.as_ref()).unwrap();
                (tape, Rng::new(t).normal(c.h.len(), 1.0))
            })
            .collect();
        let params = case(spec, 40, 3).params;
        let tapes: Vec<&LayerTape> = steps.iter().map(|s| &s.0).collect();
        let ws: Vec<&Vec64> = steps.iter().map(|s| &s.1).collect();
        let got = spec.vjp_params_sum(&params, &tapes, &ws).unwrap();
        for (p, g) in got.iter().enumerate() {
            let mut expect = vec![0.0; g.as_slice().len()];
            for (t, w) in &steps {
                let part = spec.vjp_params(&params, t, w).unwrap();
                for (e, x) in expect.iter_mut().zip(part[p].as_slice()) {
                    *e += x;
                }
            }
            assert!(rel_l2(g.as_slice(), &expect) < 1e-13, "{spec:?} param {p}");
        }
        assert!(spec.vjp_params_sum(&params, &tapes, &ws[..2]).is_err());
        assert!(spec.vjp_params_sum(&params, &[], &[]).is_err());
    }
}

#[test]
fn mismatched_tape_is_a_contract_error() {
    let gru = case(LayerSpec::gru(3, 2), 1, 1);
    let (_, tape) = gru.spec.forward(0, &gru.params, &gru.h, gru.x.as_ref()).unwrap();
    let lstm = LayerSpec::lstm(2, 2);
    let err = lstm.vjp_block(&gru.params, &tape, &Vec64::zeros(3)).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
    let err = gru.spec.vjp_block(&gru.params, &tape, &Vec64::zeros(4)).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
}

#[test]
fn forward_rejects_bad_shapes_and_reports_non_finite_layer() {
    let c = case(LayerSpec::gru(3, 2), 1, 1);
    assert!(c.spec.forward(0, &c.params, &Vec64::zeros(4), c.x.as_ref()).is_err());
    assert!(c.spec.forward(0, &c.params, &c.h, None).is_err());

    let spec = LayerSpec::residual(LayerKind::PlainResidual, 1, linear_block());
    let params = ParamGroup::new("l", vec![("w", m(1, 1, &[f64::MAX])), ("b", Mat64::zeros(1, 1))]);
    let err = spec.forward(7, &params, &v(&[10.0]), None).unwrap_err();
    assert!(matches!(err, Error::Numeric { layer: 7, .. }), "{err}");
}

#[test]
fn validate_rejects_bad_gamma_and_odd_lstm() {
    let bad = LayerSpec::residual(LayerKind::GammaResidual(1.5), 2, BlockSpec::default());
    assert!(bad.validate().is_err());
    let mut odd = LayerSpec::lstm(2, 1);
    odd.state_dim = 3;
    assert!(odd.validate().is_err());
    assert!(LayerSpec::gru(4, 2).validate().is_ok());
}
