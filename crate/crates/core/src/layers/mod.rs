//! Layers split as `f(x) = r(x, g(x))`: an expensive block `g` reachable only
//! through vector-Jacobian products, and a residual map `r` whose input
//! Jacobian `K` is structured (identity, scalar, diagonal or zero).
//!
//! All state vectors are batched: `batch` rows of `state_dim` entries,
//! row-major. Cotangents share that layout.

mod dense;
mod gru;
mod jacobian;
mod lstm;
mod params;

pub use jacobian::{JacobianKind, ResidualJacobian};
pub use params::{Param, ParamGroup, ParamSet};

use crate::error::{Error, Result};
use std::borrow::Cow;

use rayon::prelude::*;

use crate::numkit::{gemm, Cotangent, Mat64, MatRef, Rng, StateVec, Vec64};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerKind {
    PlainResidual,
    ReluResidual,
    /// `(1−γ)x + (Block(x) + γx)`; moves part of the skip into the block path.
    GammaResidual(f64),
    GruCell,
    LstmCell,
}

impl LayerKind {
    pub fn is_recurrent(&self) -> bool {
        matches!(self, LayerKind::GruCell | LayerKind::LstmCell)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply_in_place(self, v: &mut [f64]) {
        match self {
            Activation::Tanh => crate::numkit::tanh_in_place(v),
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Identity => {}
        }
    }

    /// Derivative expressed through the activated value `s = act(x)`.
    fn derivative_from_output(self, s: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - s * s,
            Activation::Relu => {
                if s > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Dense block of a residual layer: `act(xW + b)` when `hidden` is `None`,
/// otherwise `act(xW₁ + b₁)W₂ + b₂`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSpec {
    pub hidden: Option<usize>,
    pub activation: Activation,
}

impl Default for BlockSpec {
    fn default() -> Self {
        Self {
            hidden: None,
            activation: Activation::Tanh,
        }
    }
}

/// Initialization knobs shared by all layer kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitSpec {
    /// Weights are drawn from `N(0, (scale/√fan_in)²)`.
    pub scale: f64,
    /// Bias pushing gated cells towards keeping their memory: GRU update
    /// gate bias is `−forget_bias`, LSTM forget gate bias is `+forget_bias`.
    pub forget_bias: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            scale: 1.0,
            forget_bias: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub block: BlockSpec,
    /// Per-row width of the state. For LSTM this is `2·d_cell` (`[c; h]`).
    pub state_dim: usize,
    /// Width of the external input concatenated before the block (RNN cells).
    pub input_dim: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum TapeCache {
    Residual(dense::ResidualCache),
    Gru(gru::GruCache),
    Lstm(lstm::LstmCache),
}

/// Forward intermediates of one layer; enough to evaluate every backward
/// product without re-running the forward pass.
#[derive(Clone, Debug)]
pub struct LayerTape {
    pub index: usize,
    pub batch: usize,
    pub input: StateVec,
    pub output: StateVec,
    pub residual_jac: ResidualJacobian,
    pub(crate) cache: TapeCache,
}

impl LayerSpec {
    pub fn residual(kind: LayerKind, state_dim: usize, block: BlockSpec) -> Self {
        Self {
            kind,
            block,
            state_dim,
            input_dim: 0,
        }
    }

    pub fn gru(state_dim: usize, input_dim: usize) -> Self {
        Self {
            kind: LayerKind::GruCell,
            block: BlockSpec::default(),
            state_dim,
            input_dim,
        }
    }

    /// LSTM over a `[c; h]` state of width `2·cell_dim`.
    pub fn lstm(cell_dim: usize, input_dim: usize) -> Self {
        Self {
            kind: LayerKind::LstmCell,
            block: BlockSpec::default(),
            state_dim: 2 * cell_dim,
            input_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::Config("state_dim must be positive".into()));
        }
        match self.kind {
            LayerKind::GammaResidual(g) if !(0.0..=1.0).contains(&g) => {
                Err(Error::Config(format!("gamma must lie in [0, 1], got {g}")))
            }
            LayerKind::LstmCell if self.state_dim % 2 != 0 => Err(Error::Config(
                "LSTM state is [c; h] and needs an even width".into(),
            )),
            LayerKind::PlainResidual | LayerKind::ReluResidual | LayerKind::GammaResidual(_)
                if self.input_dim != 0 =>
            {
                Err(Error::Config("residual layers take no external input".into()))
            }
            _ if self.block.hidden == Some(0) => {
                Err(Error::Config("block hidden width must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Columns of a state row that feed the loss head.
    pub fn readout_range(&self) -> std::ops::Range<usize> {
        match self.kind {
            LayerKind::LstmCell => self.state_dim / 2..self.state_dim,
            _ => 0..self.state_dim,
        }
    }

    pub fn init_params(&self, name: &str, rng: &mut Rng, init: InitSpec) -> ParamGroup {
        match self.kind {
            LayerKind::GruCell => gru::init(self, name, rng, init),
            LayerKind::LstmCell => lstm::init(self, name, rng, init),
            _ => dense::init(self, name, rng, init),
        }
    }

    /// Shapes of the parameter arrays, in declaration order.
    pub fn param_shapes(&self) -> Vec<(&'static str, usize, usize)> {
        match self.kind {
            LayerKind::GruCell => gru::shapes(self),
            LayerKind::LstmCell => lstm::shapes(self),
            _ => dense::shapes(self),
        }
    }

    fn check_params(&self, params: &ParamGroup) -> Result<()> {
        let shapes = self.param_shapes();
        let ok = shapes.len() == params.params.len()
            && shapes
                .iter()
                .zip(&params.params)
                .all(|(&(_, r, c), p)| p.value.shape() == (r, c));
        if !ok {
            return Err(Error::shape(
                "layer params",
                format!("{shapes:?}"),
                format!(
                    "{:?}",
                    params
                        .params
                        .iter()
                        .map(|p| p.value.shape())
                        .collect::<Vec<_>>()
                ),
            ));
        }
        Ok(())
    }

    fn batch_of(&self, h: &StateVec) -> Result<usize> {
        if h.len() % self.state_dim != 0 {
            return Err(Error::shape(
                "layer state",
                format!("multiple of {}", self.state_dim),
                h.len(),
            ));
        }
        Ok(h.len() / self.state_dim)
    }

    /// Evaluates `h = r(h_prev, g(h_prev))` and records the tape.
    pub fn forward(
        &self,
        index: usize,
        params: &ParamGroup,
        h_prev: &StateVec,
        x_ext: Option<&Mat64>,
    ) -> Result<(StateVec, LayerTape)> {
        self.check_params(params)?;
        let batch = self.batch_of(h_prev)?;
        if self.kind.is_recurrent() && self.input_dim > 0 {
            match x_ext {
                Some(x) if x.shape() == (batch, self.input_dim) => {}
                Some(x) => {
                    return Err(Error::shape(
                        "external input",
                        format!("{batch}x{}", self.input_dim),
                        format!("{}x{}", x.rows(), x.cols()),
                    ))
                }
                None => return Err(Error::Contract(format!("layer {index} needs an external input"))),
            }
        }
        let (output, residual_jac, cache) = match self.kind {
            LayerKind::GruCell => gru::forward(self, params, h_prev, x_ext, batch),
            LayerKind::LstmCell => lstm::forward(self, params, h_prev, x_ext, batch),
            _ => dense::forward(self, params, h_prev, batch),
        };
        if !output.is_finite() {
            return Err(Error::Numeric {
                layer: index,
                what: "layer output".into(),
            });
        }
        let tape = LayerTape {
            index,
            batch,
            input: h_prev.clone(),
            output: output.clone(),
            residual_jac,
            cache,
        };
        Ok((output, tape))
    }

    fn check_tape(&self, tape: &LayerTape, w: &Cotangent) -> Result<()> {
        let matches = matches!(
            (&tape.cache, self.kind),
            (TapeCache::Gru(_), LayerKind::GruCell)
                | (TapeCache::Lstm(_), LayerKind::LstmCell)
                | (
                    TapeCache::Residual(_),
                    LayerKind::PlainResidual | LayerKind::ReluResidual | LayerKind::GammaResidual(_)
                )
        );
        if !matches || tape.output.len() != tape.batch * self.state_dim {
            return Err(Error::Contract(format!(
                "tape of layer {} does not belong to a {:?} layer of width {}",
                tape.index, self.kind, self.state_dim
            )));
        }
        if w.len() != tape.output.len() {
            return Err(Error::shape("cotangent", tape.output.len(), w.len()));
        }
        Ok(())
    }

    /// `w·J`: the cotangent routed through the block path only.
    pub fn vjp_block(&self, params: &ParamGroup, tape: &LayerTape, w: &Cotangent) -> Result<Cotangent> {
        self.check_tape(tape, w)?;
        Ok(match &tape.cache {
            TapeCache::Residual(c) => dense::vjp_block(self, params, tape, c, w),
            TapeCache::Gru(c) => gru::vjp_block(self, params, tape, c, w),
            TapeCache::Lstm(c) => lstm::vjp_block(self, params, tape, c, w),
        })
    }

    pub fn residual_jacobian(&self, tape: &LayerTape) -> ResidualJacobian {
        tape.residual_jac.clone()
    }

    /// `w·(J + K)`, the full input VJP of the layer.
    pub fn vjp_full(&self, params: &ParamGroup, tape: &LayerTape, w: &Cotangent) -> Result<Cotangent> {
        let mut out = self.vjp_block(params, tape, w)?;
        tape.residual_jac.apply_add_into(w.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    /// Parameter cotangents `w·∂f/∂θ`, one array per parameter in
    /// declaration order.
    pub fn vjp_params(&self, params: &ParamGroup, tape: &LayerTape, w: &Cotangent) -> Result<Vec<Mat64>> {
        self.check_tape(tape, w)?;
        Ok(match &tape.cache {
            TapeCache::Residual(c) => dense::vjp_params(self, params, tape, c, w),
            TapeCache::Gru(c) => gru::vjp_params(self, params, tape, c, w),
            TapeCache::Lstm(c) => lstm::vjp_params(self, params, tape, c, w),
        })
    }

    /// Sum of [`Self::vjp_params`] over several tapes of this layer, as for
    /// a shared cell unrolled in time. Cells stack every step into one
    /// product per weight; residual layers add contributions in tape order.
    pub fn vjp_params_sum(&self, params: &ParamGroup, tapes: &[&LayerTape], ws: &[&Cotangent]) -> Result<Vec<Mat64>> {
        if tapes.is_empty() || tapes.len() != ws.len() {
            return Err(Error::shape("vjp_params_sum", tapes.len(), ws.len()));
        }
        for (t, w) in tapes.iter().zip(ws) {
            self.check_tape(t, w)?;
        }
        if !self.kind.is_recurrent() {
            let mut sum = self.vjp_params(params, tapes[0], ws[0])?;
            for (t, w) in tapes.iter().zip(ws).skip(1) {
                for (s, c) in sum.iter_mut().zip(self.vjp_params(params, t, w)?) {
                    crate::numkit::add_into(s.as_mut_slice(), c.as_slice());
                }
            }
            return Ok(sum);
        }
        let parts: Vec<ParamFactors> = tapes
            .par_iter()
            .zip(ws)
            .map(|(t, w)| match &t.cache {
                TapeCache::Gru(c) => gru::param_factors(self, params, t, c, w),
                TapeCache::Lstm(c) => lstm::param_factors(self, t, c, w),
                TapeCache::Residual(_) => unreachable!("checked against the layer kind"),
            })
            .collect();
        Ok(reduce_factors(&parts))
    }
}

/// Parameter cotangents of one cell step in factored form: each weight
/// gradient is `Xᵀ·D` for one of `inputs` and one delta, and each bias
/// gradient is the column sum of the same delta. Weights come first, then
/// biases, both in delta order.
pub(crate) struct ParamFactors<'a> {
    rows: usize,
    in_cols: usize,
    out_cols: usize,
    inputs: Vec<&'a [f64]>,
    deltas: Vec<(usize, Vec<f64>)>,
}

impl<'a> ParamFactors<'a> {
    pub(crate) fn new(rows: usize, in_cols: usize, out_cols: usize, inputs: Vec<&'a [f64]>) -> Self {
        Self {
            rows,
            in_cols,
            out_cols,
            inputs,
            deltas: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, input: usize, delta: Vec<f64>) {
        self.deltas.push((input, delta));
    }
}

fn stacked<'s>(parts: &'s [ParamFactors], pick: impl Fn(&'s ParamFactors) -> &'s [f64]) -> Cow<'s, [f64]> {
    match parts {
        [one] => Cow::Borrowed(pick(one)),
        _ => Cow::Owned(parts.iter().flat_map(|p| pick(p).iter().copied()).collect()),
    }
}

/// Sums the contributions of several steps with one product per weight over
/// all stacked rows.
pub(crate) fn reduce_factors(parts: &[ParamFactors]) -> Vec<Mat64> {
    let first = &parts[0];
    let rows: usize = parts.iter().map(|p| p.rows).sum();
    let (nd, d) = (first.in_cols, first.out_cols);
    let inputs: Vec<Cow<[f64]>> = (0..first.inputs.len())
        .map(|j| stacked(parts, |p| p.inputs[j]))
        .collect();
    let deltas: Vec<Cow<[f64]>> = (0..first.deltas.len())
        .map(|q| stacked(parts, |p| &p.deltas[q].1))
        .collect();
    let mut out = Vec::with_capacity(2 * deltas.len());
    for (q, delta) in deltas.iter().enumerate() {
        let mut m = Mat64::zeros(nd, d);
        gemm(
            1.0,
            MatRef::row_major(&inputs[first.deltas[q].0], rows, nd).t(),
            MatRef::row_major(delta, rows, d),
            0.0,
            m.as_mut_slice(),
        );
        out.push(m);
    }
    out.extend(deltas.iter().map(|delta| col_sums(delta, d)));
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rows of `bias` broadcast into a fresh `batch x cols` buffer.
pub(crate) fn broadcast_rows(bias: &Mat64, batch: usize) -> Vec<f64> {
    let row = bias.as_slice();
    let mut out = Vec::with_capacity(batch * row.len());
    for _ in 0..batch {
        out.extend_from_slice(row);
    }
    out
}

pub(crate) fn col_sums(data: &[f64], cols: usize) -> Mat64 {
    let mut out = vec![0.0; cols];
    crate::numkit::col_sums_into(data, cols, &mut out);
    Mat64::new(1, cols, out).expect("positive width")
}

pub(crate) fn vec(data: Vec<f64>) -> Vec64 {
    Vec64::from_raw(data)
}

#[cfg(test)]
mod tests;
