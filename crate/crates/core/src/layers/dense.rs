//! Residual layers over a dense block: plain `x + z`, `ReLU(x + z)` and the
//! γ-split `(1−γ)x + (z + γx)`.

use super::{
    broadcast_rows, col_sums, vec, Activation, JacobianKind, LayerKind, LayerSpec, LayerTape,
    ParamGroup, ResidualJacobian, TapeCache,
};
use crate::layers::InitSpec;
use crate::numkit::{gemm, Cotangent, Mat64, MatRef, Rng, StateVec, Vec64};

#[derive(Clone, Debug)]
pub(crate) struct ResidualCache {
    /// Activated output of the first dense layer, `batch x width`.
    s1: Vec<f64>,
}

pub(super) fn shapes(spec: &LayerSpec) -> Vec<(&'static str, usize, usize)> {
    let d = spec.state_dim;
    match spec.block.hidden {
        None => vec![("w", d, d), ("b", 1, d)],
        Some(h) => vec![("w1", d, h), ("b1", 1, h), ("w2", h, d), ("b2", 1, d)],
    }
}

pub(super) fn init(spec: &LayerSpec, name: &str, rng: &mut Rng, init: InitSpec) -> ParamGroup {
    let params = shapes(spec)
        .into_iter()
        .map(|(n, r, c)| {
            let m = if r == 1 {
                Mat64::zeros(1, c)
            } else {
                rng.normal_mat(r, c, init.scale / (r as f64).sqrt())
            };
            (n, m)
        })
        .collect();
    ParamGroup::new(name, params)
}

pub(super) fn forward(
    spec: &LayerSpec,
    params: &ParamGroup,
    h_prev: &StateVec,
    batch: usize,
) -> (StateVec, ResidualJacobian, TapeCache) {
    let d = spec.state_dim;
    let act = spec.block.activation;
    let x = h_prev.as_slice();
    let w1 = params.value(0);
    let mut s1 = broadcast_rows(params.value(1), batch);
    gemm(1.0, MatRef::row_major(x, batch, d), w1.view(), 1.0, &mut s1);
    act.apply_in_place(&mut s1);

    let z = match spec.block.hidden {
        None => s1.clone(),
        Some(h) => {
            let mut z = broadcast_rows(params.value(3), batch);
            gemm(
                1.0,
                MatRef::row_major(&s1, batch, h),
                params.value(2).view(),
                1.0,
                &mut z,
            );
            z
        }
    };

    let n = batch * d;
    let (out, jac) = match spec.kind {
        LayerKind::PlainResidual => {
            let out = x.iter().zip(&z).map(|(a, b)| a + b).collect();
            (out, ResidualJacobian::identity(n))
        }
        LayerKind::ReluResidual => {
            let mut out = Vec::with_capacity(n);
            let mut mask = Vec::with_capacity(n);
            for (a, b) in x.iter().zip(&z) {
                let p = a + b;
                // subgradient at exactly zero is zero
                if p > 0.0 {
                    out.push(p);
                    mask.push(1.0);
                } else {
                    out.push(0.0);
                    mask.push(0.0);
                }
            }
            (out, ResidualJacobian::diagonal(vec(mask)))
        }
        LayerKind::GammaResidual(gamma) => {
            let keep = 1.0 - gamma;
            let out = x
                .iter()
                .zip(&z)
                .map(|(a, b)| keep * a + (b + gamma * a))
                .collect();
            (out, ResidualJacobian::scalar(n, keep))
        }
        LayerKind::GruCell | LayerKind::LstmCell => unreachable!("dense forward on a cell"),
    };
    (vec(out), jac, TapeCache::Residual(ResidualCache { s1 }))
}

/// Cotangent arriving at the block output `z`.
fn block_output_cotangent(spec: &LayerSpec, tape: &LayerTape, w: &Cotangent) -> Vec<f64> {
    match (spec.kind, tape.residual_jac.kind()) {
        (LayerKind::ReluResidual, JacobianKind::Diagonal(mask)) => {
            w.iter().zip(mask.iter()).map(|(a, m)| a * m).collect()
        }
        _ => w.as_slice().to_vec(),
    }
}

/// Cotangent at the first dense layer's pre-activation.
fn first_preact_cotangent(
    spec: &LayerSpec,
    params: &ParamGroup,
    cache: &ResidualCache,
    dz: &[f64],
    batch: usize,
) -> Vec<f64> {
    let act: Activation = spec.block.activation;
    let mut da1 = match spec.block.hidden {
        None => dz.to_vec(),
        Some(h) => {
            let mut ds1 = vec![0.0; batch * h];
            gemm(
                1.0,
                MatRef::row_major(dz, batch, spec.state_dim),
                params.value(2).view().t(),
                0.0,
                &mut ds1,
            );
            ds1
        }
    };
    for (g, s) in da1.iter_mut().zip(&cache.s1) {
        *g *= act.derivative_from_output(*s);
    }
    da1
}

pub(super) fn vjp_block(
    spec: &LayerSpec,
    params: &ParamGroup,
    tape: &LayerTape,
    cache: &ResidualCache,
    w: &Cotangent,
) -> Cotangent {
    let batch = tape.batch;
    let d = spec.state_dim;
    let dz = block_output_cotangent(spec, tape, w);
    let da1 = first_preact_cotangent(spec, params, cache, &dz, batch);
    let w1 = params.value(0);
    let mut dx = vec![0.0; batch * d];
    gemm(
        1.0,
        MatRef::row_major(&da1, batch, w1.cols()),
        w1.view().t(),
        0.0,
        &mut dx,
    );
    if let LayerKind::GammaResidual(gamma) = spec.kind {
        crate::numkit::axpy(gamma, w.as_slice(), &mut dx);
    }
    Vec64::from_raw(dx)
}

pub(super) fn vjp_params(
    spec: &LayerSpec,
    params: &ParamGroup,
    tape: &LayerTape,
    cache: &ResidualCache,
    w: &Cotangent,
) -> Vec<Mat64> {
    let batch = tape.batch;
    let d = spec.state_dim;
    let x = tape.input.as_slice();
    let dz = block_output_cotangent(spec, tape, w);
    let da1 = first_preact_cotangent(spec, params, cache, &dz, batch);
    let width = params.value(0).cols();

    let mut dw1 = Mat64::zeros(d, width);
    gemm(
        1.0,
        MatRef::row_major(x, batch, d).t(),
        MatRef::row_major(&da1, batch, width),
        0.0,
        dw1.as_mut_slice(),
    );
    let db1 = col_sums(&da1, width);
    match spec.block.hidden {
        None => vec![dw1, db1],
        Some(h) => {
            let mut dw2 = Mat64::zeros(h, d);
            gemm(
                1.0,
                MatRef::row_major(&cache.s1, batch, h).t(),
                MatRef::row_major(&dz, batch, d),
                0.0,
                dw2.as_mut_slice(),
            );
            let db2 = col_sums(&dz, d);
            vec![dw1, db1, dw2, db2]
        }
    }
}
