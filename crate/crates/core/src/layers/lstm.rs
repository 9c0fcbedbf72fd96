//! LSTM cell on the state `[c; h]`:
//! `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`, split as `[z₁⊙c + z₂, z₃]` with
//! `z = [f, i⊙g, o⊙tanh(f⊙c + i⊙g)]`. The residual path only carries
//! `f⊙c`, so `K = diag([f, 0])`; the `c → h'` dependence goes through the
//! block.

use super::{broadcast_rows, reduce_factors, sigmoid, vec, LayerSpec, LayerTape, ParamFactors, ParamGroup, ResidualJacobian, TapeCache};
use crate::layers::InitSpec;
use crate::numkit::{gemm, tanh_in_place, Cotangent, Mat64, MatRef, Rng, StateVec, Vec64};

// gate order: forget, input, output, candidate
const GATES: usize = 4;

#[derive(Clone, Debug)]
pub(crate) struct LstmCache {
    xh: Vec<f64>,
    f: Vec<f64>,
    i: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    tc: Vec<f64>,
}

pub(super) fn shapes(spec: &LayerSpec) -> Vec<(&'static str, usize, usize)> {
    let dc = spec.state_dim / 2;
    let nd = spec.input_dim + dc;
    vec![
        ("w_f", nd, dc),
        ("w_i", nd, dc),
        ("w_o", nd, dc),
        ("w_g", nd, dc),
        ("b_f", 1, dc),
        ("b_i", 1, dc),
        ("b_o", 1, dc),
        ("b_g", 1, dc),
    ]
}

pub(super) fn init(spec: &LayerSpec, name: &str, rng: &mut Rng, init: InitSpec) -> ParamGroup {
    let dc = spec.state_dim / 2;
    let nd = spec.input_dim + dc;
    let scale = init.scale / (nd as f64).sqrt();
    ParamGroup::new(
        name,
        vec![
            ("w_f", rng.normal_mat(nd, dc, scale)),
            ("w_i", rng.normal_mat(nd, dc, scale)),
            ("w_o", rng.normal_mat(nd, dc, scale)),
            ("w_g", rng.normal_mat(nd, dc, scale)),
            ("b_f", Mat64::new(1, dc, vec![init.forget_bias; dc]).expect("dc > 0")),
            ("b_i", Mat64::zeros(1, dc)),
            ("b_o", Mat64::zeros(1, dc)),
            ("b_g", Mat64::zeros(1, dc)),
        ],
    )
}

pub(super) fn forward(
    spec: &LayerSpec,
    params: &ParamGroup,
    state: &StateVec,
    x_ext: Option<&Mat64>,
    batch: usize,
) -> (StateVec, ResidualJacobian, TapeCache) {
    let n = spec.input_dim;
    let d = spec.state_dim;
    let dc = d / 2;
    let nd = n + dc;
    let s = state.as_slice();

    let mut xh = vec![0.0; batch * nd];
    for b in 0..batch {
        let row = &mut xh[b * nd..(b + 1) * nd];
        if let Some(x) = x_ext.filter(|_| n > 0) {
            row[..n].copy_from_slice(x.row(b));
        }
        row[n..].copy_from_slice(&s[b * d + dc..(b + 1) * d]);
    }
    let xh_view = MatRef::row_major(&xh, batch, nd);
    let gate = |k: usize, squash: fn(&mut [f64])| {
        let mut a = broadcast_rows(params.value(GATES + k), batch);
        gemm(1.0, xh_view, params.value(k).view(), 1.0, &mut a);
        squash(&mut a);
        a
    };
    let sigmoid_in_place = |v: &mut [f64]| v.iter_mut().for_each(|x| *x = sigmoid(*x));
    let f = gate(0, sigmoid_in_place);
    let i = gate(1, sigmoid_in_place);
    let o = gate(2, sigmoid_in_place);
    let g = gate(3, tanh_in_place);

    let mut out = vec![0.0; batch * d];
    let mut keep = vec![0.0; batch * d];
    let mut tc = vec![0.0; batch * dc];
    for b in 0..batch {
        for j in 0..dc {
            let q = b * dc + j;
            let c_prev = s[b * d + j];
            let cn = f[q] * c_prev + i[q] * g[q];
            tc[q] = cn;
            out[b * d + j] = cn;
            keep[b * d + j] = f[q];
        }
    }
    tanh_in_place(&mut tc);
    for b in 0..batch {
        for j in 0..dc {
            out[b * d + dc + j] = o[b * dc + j] * tc[b * dc + j];
        }
    }
    (
        vec(out),
        ResidualJacobian::diagonal(vec(keep)),
        TapeCache::Lstm(LstmCache { xh, f, i, o, g, tc }),
    )
}

struct Backward {
    /// Pre-activation cotangents, one buffer per gate.
    da: [Vec<f64>; GATES],
    /// Cotangent reaching `c` through the block's `f⊙c` inside `z₃`.
    dc_block: Vec<f64>,
}

fn backward(spec: &LayerSpec, tape: &LayerTape, c: &LstmCache, w: &Cotangent) -> Backward {
    let d = spec.state_dim;
    let dc = d / 2;
    let batch = tape.batch;
    let s = tape.input.as_slice();
    let w = w.as_slice();
    let size = batch * dc;
    let mut da: [Vec<f64>; GATES] = std::array::from_fn(|_| vec![0.0; size]);
    let mut dc_block = vec![0.0; batch * d];
    for b in 0..batch {
        for j in 0..dc {
            let q = b * dc + j;
            let wc = w[b * d + j];
            let wh = w[b * d + dc + j];
            let c_prev = s[b * d + j];
            let (f, i, o, g, tc) = (c.f[q], c.i[q], c.o[q], c.g[q], c.tc[q]);

            let d_o = wh * tc;
            let dcn = wh * o * (1.0 - tc * tc);
            // z₁ = f reaches the output as f⊙c; z₂ = i⊙g directly
            let e = wc + dcn;
            let df = e * c_prev;
            let di = e * g;
            let dg = e * i;
            dc_block[b * d + j] = dcn * f;

            da[0][q] = df * f * (1.0 - f);
            da[1][q] = di * i * (1.0 - i);
            da[2][q] = d_o * o * (1.0 - o);
            da[3][q] = dg * (1.0 - g * g);
        }
    }
    Backward { da, dc_block }
}

pub(super) fn vjp_block(
    spec: &LayerSpec,
    params: &ParamGroup,
    tape: &LayerTape,
    c: &LstmCache,
    w: &Cotangent,
) -> Cotangent {
    let n = spec.input_dim;
    let d = spec.state_dim;
    let dc = d / 2;
    let batch = tape.batch;
    let bw = backward(spec, tape, c, w);
    let mut dh = vec![0.0; batch * dc];
    for (k, da) in bw.da.iter().enumerate() {
        gemm(
            1.0,
            MatRef::row_major(da, batch, dc),
            params.value(k).row_block(n, dc).t(),
            1.0,
            &mut dh,
        );
    }
    let mut out = bw.dc_block;
    for b in 0..batch {
        out[b * d + dc..(b + 1) * d].copy_from_slice(&dh[b * dc..(b + 1) * dc]);
    }
    Vec64::from_raw(out)
}

pub(super) fn param_factors<'a>(spec: &LayerSpec, tape: &LayerTape, c: &'a LstmCache, w: &Cotangent) -> ParamFactors<'a> {
    let dc = spec.state_dim / 2;
    let bw = backward(spec, tape, c, w);
    let mut f = ParamFactors::new(tape.batch, spec.input_dim + dc, dc, vec![&c.xh]);
    for da in bw.da {
        f.push(0, da);
    }
    f
}

pub(super) fn vjp_params(
    spec: &LayerSpec,
    _params: &ParamGroup,
    tape: &LayerTape,
    c: &LstmCache,
    w: &Cotangent,
) -> Vec<Mat64> {
    reduce_factors(&[param_factors(spec, tape, c, w)])
}
