//! GRU cell `h' = (1−z)⊙h + z⊙ĥ`, split as `a(x)⊙x + b(x)` with
//! `a = 1−z` and `b = z⊙ĥ`, so `K = diag(1−z)`.

use super::{broadcast_rows, reduce_factors, sigmoid, vec, ParamFactors, LayerSpec, LayerTape, ParamGroup, ResidualJacobian, TapeCache};
use crate::layers::InitSpec;
use crate::numkit::{gemm, tanh_in_place, Cotangent, Mat64, MatRef, Rng, StateVec, Vec64};

const WZ: usize = 0;
const WR: usize = 1;
const WH: usize = 2;
const BZ: usize = 3;
const BR: usize = 4;
const BH: usize = 5;

#[derive(Clone, Debug)]
pub(crate) struct GruCache {
    /// `[x, h]` rows.
    xh: Vec<f64>,
    /// `[x, r⊙h]` rows.
    xrh: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    hc: Vec<f64>,
}

pub(super) fn shapes(spec: &LayerSpec) -> Vec<(&'static str, usize, usize)> {
    let d = spec.state_dim;
    let nd = spec.input_dim + d;
    vec![
        ("w_z", nd, d),
        ("w_r", nd, d),
        ("w_h", nd, d),
        ("b_z", 1, d),
        ("b_r", 1, d),
        ("b_h", 1, d),
    ]
}

pub(super) fn init(spec: &LayerSpec, name: &str, rng: &mut Rng, init: InitSpec) -> ParamGroup {
    let d = spec.state_dim;
    let nd = spec.input_dim + d;
    let scale = init.scale / (nd as f64).sqrt();
    ParamGroup::new(
        name,
        vec![
            ("w_z", rng.normal_mat(nd, d, scale)),
            ("w_r", rng.normal_mat(nd, d, scale)),
            ("w_h", rng.normal_mat(nd, d, scale)),
            ("b_z", Mat64::new(1, d, vec![-init.forget_bias; d]).expect("d > 0")),
            ("b_r", Mat64::zeros(1, d)),
            ("b_h", Mat64::zeros(1, d)),
        ],
    )
}

pub(super) fn forward(
    spec: &LayerSpec,
    params: &ParamGroup,
    h_prev: &StateVec,
    x_ext: Option<&Mat64>,
    batch: usize,
) -> (StateVec, ResidualJacobian, TapeCache) {
    let (n, d) = (spec.input_dim, spec.state_dim);
    let nd = n + d;
    let h = h_prev.as_slice();

    let mut xh = vec![0.0; batch * nd];
    for b in 0..batch {
        let row = &mut xh[b * nd..(b + 1) * nd];
        if let Some(x) = x_ext.filter(|_| n > 0) {
            row[..n].copy_from_slice(x.row(b));
        }
        row[n..].copy_from_slice(&h[b * d..(b + 1) * d]);
    }
    let xh_view = MatRef::row_major(&xh, batch, nd);

    let mut z = broadcast_rows(params.value(BZ), batch);
    gemm(1.0, xh_view, params.value(WZ).view(), 1.0, &mut z);
    z.iter_mut().for_each(|v| *v = sigmoid(*v));

    let mut r = broadcast_rows(params.value(BR), batch);
    gemm(1.0, xh_view, params.value(WR).view(), 1.0, &mut r);
    r.iter_mut().for_each(|v| *v = sigmoid(*v));

    let mut xrh = xh.clone();
    for b in 0..batch {
        for j in 0..d {
            xrh[b * nd + n + j] *= r[b * d + j];
        }
    }
    let mut hc = broadcast_rows(params.value(BH), batch);
    gemm(
        1.0,
        MatRef::row_major(&xrh, batch, nd),
        params.value(WH).view(),
        1.0,
        &mut hc,
    );
    tanh_in_place(&mut hc);

    let mut out = Vec::with_capacity(batch * d);
    let mut keep = Vec::with_capacity(batch * d);
    for i in 0..batch * d {
        let a = 1.0 - z[i];
        out.push(a * h[i] + z[i] * hc[i]);
        keep.push(a);
    }
    (
        vec(out),
        ResidualJacobian::diagonal(vec(keep)),
        TapeCache::Gru(GruCache { xh, xrh, z, r, hc }),
    )
}

struct GateCotangents {
    daz: Vec<f64>,
    dar: Vec<f64>,
    dah: Vec<f64>,
    /// Cotangent of `r⊙h` coming out of the candidate matmul.
    drh: Vec<f64>,
}

/// Backward through `r(x, [a, b]) = a⊙x + b` (block side only) down to the
/// gate pre-activations.
fn gate_cotangents(
    spec: &LayerSpec,
    params: &ParamGroup,
    tape: &LayerTape,
    c: &GruCache,
    w: &Cotangent,
) -> GateCotangents {
    let (n, d, batch) = (spec.input_dim, spec.state_dim, tape.batch);
    let h = tape.input.as_slice();
    let w = w.as_slice();
    let size = batch * d;

    let mut daz = vec![0.0; size];
    let mut dah = vec![0.0; size];
    for i in 0..size {
        // a = 1 − z contributes −w⊙h, b = z⊙ĥ contributes w⊙ĥ
        let dz = w[i] * (c.hc[i] - h[i]);
        daz[i] = dz * c.z[i] * (1.0 - c.z[i]);
        let dhc = w[i] * c.z[i];
        dah[i] = dhc * (1.0 - c.hc[i] * c.hc[i]);
    }
    let mut drh = vec![0.0; size];
    gemm(
        1.0,
        MatRef::row_major(&dah, batch, d),
        params.value(WH).row_block(n, d).t(),
        0.0,
        &mut drh,
    );
    let dar = (0..size)
        .map(|i| drh[i] * h[i] * c.r[i] * (1.0 - c.r[i]))
        .collect();
    GateCotangents { daz, dar, dah, drh }
}

pub(super) fn vjp_block(
    spec: &LayerSpec,
    params: &ParamGroup,
    tape: &LayerTape,
    c: &GruCache,
    w: &Cotangent,
) -> Cotangent {
    let (n, d, batch) = (spec.input_dim, spec.state_dim, tape.batch);
    let g = gate_cotangents(spec, params, tape, c, w);
    let mut dh: Vec<f64> = g.drh.iter().zip(&c.r).map(|(a, r)| a * r).collect();
    gemm(
        1.0,
        MatRef::row_major(&g.daz, batch, d),
        params.value(WZ).row_block(n, d).t(),
        1.0,
        &mut dh,
    );
    gemm(
        1.0,
        MatRef::row_major(&g.dar, batch, d),
        params.value(WR).row_block(n, d).t(),
        1.0,
        &mut dh,
    );
    Vec64::from_raw(dh)
}

pub(super) fn param_factors<'a>(
    spec: &LayerSpec,
    params: &ParamGroup,
    tape: &LayerTape,
    c: &'a GruCache,
    w: &Cotangent,
) -> ParamFactors<'a> {
    let g = gate_cotangents(spec, params, tape, c, w);
    let mut f = ParamFactors::new(tape.batch, spec.input_dim + spec.state_dim, spec.state_dim, vec![&c.xh, &c.xrh]);
    f.push(0, g.daz);
    f.push(0, g.dar);
    f.push(1, g.dah);
    f
}

pub(super) fn vjp_params(
    spec: &LayerSpec,
    params: &ParamGroup,
    tape: &LayerTape,
    c: &GruCache,
    w: &Cotangent,
) -> Vec<Mat64> {
    reduce_factors(&[param_factors(spec, params, tape, c, w)])
}
