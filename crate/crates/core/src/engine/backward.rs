use rayon::prelude::*;

use super::forward::{run_forward, ForwardPass};
use super::model::{Batch, ModelGraph};
use crate::error::{Error, Result};
use crate::layers::{ParamSet, ResidualJacobian};
use crate::numkit::{Cotangent, Mat64, Vec64};
use crate::scan::{cumsumprod, KChain};

/// How a layer's input Jacobian is divided between the scanned path and
/// the per-layer VJP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathSplit {
    /// `K` goes through the scan, `J` through the VJP.
    Residual,
    /// Nothing is scanned; the VJP carries the full Jacobian `J + K`.
    FixedPoint,
}

/// Cotangent estimates `w_0 … w_L` after `k` iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub w: Vec<Cotangent>,
    pub k: usize,
}

impl GradientEstimate {
    pub fn flatten(&self) -> Vec<f64> {
        self.w.iter().flat_map(|v| v.iter().copied()).collect()
    }
}

/// Parameter gradients plus the gradient with respect to `h_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub params: ParamSet,
    pub input: Vec64,
}

impl GradientSet {
    /// Parameter gradients in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.flatten()
    }

    pub fn norm(&self) -> f64 {
        crate::numkit::norm(&self.flatten())
    }
}

/// Work counters of one backward computation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackwardStats {
    pub vjp_block_calls: usize,
    pub scan_calls: usize,
    pub scan_levels: usize,
    pub vjp_param_calls: usize,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub grads: GradientSet,
    pub loss: f64,
    pub stats: BackwardStats,
    /// Final state cotangents.
    pub cotangents: GradientEstimate,
    /// `w⁰ … w^k`, when requested.
    pub estimates: Option<Vec<GradientEstimate>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Backprop,
    Highway(usize),
    Fpi(usize),
}

impl Algorithm {
    pub fn k(&self) -> Option<usize> {
        match *self {
            Algorithm::Backprop => None,
            Algorithm::Highway(k) | Algorithm::Fpi(k) => Some(k),
        }
    }
}

/// `[·, K_1, …, K_L]` under `split`. Entry 0 is an unused identity.
pub fn residual_chain(model: &ModelGraph, fwd: &ForwardPass, split: PathSplit) -> Result<KChain> {
    let dim = fwd.batch * model.state_dim();
    let mut entries = Vec::with_capacity(fwd.len() + 1);
    entries.push(ResidualJacobian::identity(dim));
    entries.extend(fwd.tapes.iter().map(|t| match split {
        PathSplit::Residual => t.residual_jac.clone(),
        PathSplit::FixedPoint => ResidualJacobian::zero(dim),
    }));
    KChain::new(entries)
}

fn check_chain(fwd: &ForwardPass, chain: &KChain) -> Result<()> {
    if chain.len() != fwd.len() + 1 {
        return Err(Error::shape("residual chain", fwd.len() + 1, chain.len()));
    }
    let dim = fwd.state(0).len();
    if chain.dim() != dim {
        return Err(Error::shape("residual chain", dim, chain.dim()));
    }
    Ok(())
}

fn check_estimate(fwd: &ForwardPass, e: &GradientEstimate, what: &'static str) -> Result<()> {
    if e.w.len() != fwd.len() + 1 {
        return Err(Error::shape(what, fwd.len() + 1, e.w.len()));
    }
    let dim = fwd.state(0).len();
    if let Some(bad) = e.w.iter().find(|v| v.len() != dim) {
        return Err(Error::shape(what, dim, bad.len()));
    }
    Ok(())
}

/// `w⁰_i = Σ_{j ≥ i} ∂L_j/∂h_j · K_j ⋯ K_{i+1}` via one scan.
pub fn initial_estimate(fwd: &ForwardPass, chain: &KChain) -> Result<GradientEstimate> {
    initial_counted(fwd, chain, &mut BackwardStats::default())
}

fn initial_counted(fwd: &ForwardPass, chain: &KChain, stats: &mut BackwardStats) -> Result<GradientEstimate> {
    check_chain(fwd, chain)?;
    let dim = chain.dim();
    let mut a = Vec::with_capacity(fwd.len() + 1);
    a.push(Vec64::zeros(dim));
    a.extend(
        fwd.loss_cotangents
            .iter()
            .map(|c| c.clone().unwrap_or_else(|| Vec64::zeros(dim))),
    );
    let out = cumsumprod(a, chain)?;
    stats.scan_calls += 1;
    stats.scan_levels += out.levels;
    Ok(GradientEstimate { w: out.values, k: 0 })
}

/// One iteration `w^k → w^{k+1}`:
/// every block VJP `v_i = w^k_{i+1}·J_{i+1}` in parallel, then
/// `u_i = v_i + u_{i+1}·K_{i+1}` by scan and `w^{k+1}_i = w⁰_i + u_i`.
/// `w_L` never changes.
pub fn iterate(
    model: &ModelGraph,
    fwd: &ForwardPass,
    chain: &KChain,
    wk: &GradientEstimate,
    w0: &GradientEstimate,
    split: PathSplit,
) -> Result<GradientEstimate> {
    check_chain(fwd, chain)?;
    let inner = inner_chain(chain)?;
    iterate_counted(model, fwd, &inner, wk, w0, split, &mut BackwardStats::default())
}

/// The first `L` chain entries, which the per-iteration scan runs over.
fn inner_chain(chain: &KChain) -> Result<KChain> {
    KChain::new(chain.entries()[..chain.len() - 1].to_vec())
}

/// `inner` is [`inner_chain`] of an already checked chain.
fn iterate_counted(
    model: &ModelGraph,
    fwd: &ForwardPass,
    inner: &KChain,
    wk: &GradientEstimate,
    w0: &GradientEstimate,
    split: PathSplit,
    stats: &mut BackwardStats,
) -> Result<GradientEstimate> {
    check_estimate(fwd, wk, "iterate w^k")?;
    check_estimate(fwd, w0, "iterate w^0")?;
    let l = fwd.len();
    let v: Vec<Cotangent> = (0..l)
        .into_par_iter()
        .map(|i| {
            let spec = &model.layers[i];
            let params = model.group_of(i);
            match split {
                PathSplit::Residual => spec.vjp_block(params, &fwd.tapes[i], &wk.w[i + 1]),
                PathSplit::FixedPoint => spec.vjp_full(params, &fwd.tapes[i], &wk.w[i + 1]),
            }
        })
        .collect::<Result<_>>()?;
    stats.vjp_block_calls += l;
    let u = cumsumprod(v, inner)?;
    stats.scan_calls += 1;
    stats.scan_levels += u.levels;
    let mut w: Vec<Cotangent> = u
        .values
        .into_iter()
        .zip(&w0.w)
        .map(|(mut ui, w0i)| {
            crate::numkit::add_into(ui.as_mut_slice(), w0i.as_slice());
            ui
        })
        .collect();
    w.push(w0.w[l].clone());
    Ok(GradientEstimate { w, k: wk.k + 1 })
}

/// Per-layer parameter contributions `w_i·∂f_i/∂θ`, layer order.
pub fn layer_param_contributions(
    model: &ModelGraph,
    fwd: &ForwardPass,
    w: &GradientEstimate,
) -> Result<Vec<Vec<Mat64>>> {
    check_estimate(fwd, w, "finalize")?;
    (0..fwd.len())
        .into_par_iter()
        .map(|i| model.layers[i].vjp_params(model.group_of(i), &fwd.tapes[i], &w.w[i + 1]))
        .collect()
}

/// Parameter gradients from state cotangents. Layers sharing a group and a
/// spec are reduced together (one stacked product per weight for cells);
/// the order of every sum is fixed, so the result does not depend on the
/// thread count.
pub fn finalize_params(model: &ModelGraph, fwd: &ForwardPass, w: &GradientEstimate) -> Result<GradientSet> {
    check_estimate(fwd, w, "finalize")?;
    let mut runs: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, &g) in model.layer_group.iter().enumerate() {
        match runs.iter_mut().find(|(rg, layers)| *rg == g && model.layers[layers[0]] == model.layers[i]) {
            Some((_, layers)) => layers.push(i),
            None => runs.push((g, vec![i])),
        }
    }
    let sums: Vec<Vec<Mat64>> = runs
        .par_iter()
        .map(|(g, layers)| {
            let tapes: Vec<_> = layers.iter().map(|&i| &fwd.tapes[i]).collect();
            let ws: Vec<_> = layers.iter().map(|&i| &w.w[i + 1]).collect();
            model.layers[layers[0]].vjp_params_sum(&model.params.groups[*g], &tapes, &ws)
        })
        .collect::<Result<_>>()?;
    let mut params = model.params.zeros_like();
    for ((g, _), c) in runs.iter().zip(&sums) {
        params.accumulate(*g, c);
    }
    if let (Some(g), Some(h)) = (model.head_group(), &fwd.head_grads) {
        params.accumulate(g, h);
    }
    Ok(GradientSet {
        params,
        input: w.w[0].clone(),
    })
}

/// Options for [`highway_from_forward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HighwayOptions {
    pub split: PathSplit,
    /// Keep `w⁰ … w^k`.
    pub retain: bool,
}

impl Default for HighwayOptions {
    fn default() -> Self {
        Self {
            split: PathSplit::Residual,
            retain: false,
        }
    }
}

/// `k` iterations over an existing forward pass with an explicit chain.
pub fn highway_with_chain(
    model: &ModelGraph,
    fwd: &ForwardPass,
    chain: &KChain,
    k: usize,
    opts: HighwayOptions,
) -> Result<Gradients> {
    let mut stats = BackwardStats::default();
    let w0 = initial_counted(fwd, chain, &mut stats)?;
    let mut kept = opts.retain.then(|| vec![w0.clone()]);
    let mut w = w0.clone();
    let inner = inner_chain(chain)?;
    for _ in 0..k {
        w = iterate_counted(model, fwd, &inner, &w, &w0, opts.split, &mut stats)?;
        if let Some(kept) = kept.as_mut() {
            kept.push(w.clone());
        }
    }
    let grads = finalize_params(model, fwd, &w)?;
    stats.vjp_param_calls += fwd.len();
    Ok(Gradients {
        grads,
        loss: fwd.loss,
        stats,
        cotangents: w,
        estimates: kept,
    })
}

pub fn highway_from_forward(
    model: &ModelGraph,
    fwd: &ForwardPass,
    k: usize,
    opts: HighwayOptions,
) -> Result<Gradients> {
    let chain = residual_chain(model, fwd, opts.split)?;
    highway_with_chain(model, fwd, &chain, k, opts)
}

/// Forward pass plus `k` highway iterations.
pub fn highway_bp(model: &ModelGraph, batch: &Batch, k: usize) -> Result<Gradients> {
    highway_bp_with(model, batch, k, false)
}

pub fn highway_bp_with(model: &ModelGraph, batch: &Batch, k: usize, retain: bool) -> Result<Gradients> {
    let fwd = run_forward(model, batch)?;
    highway_from_forward(
        model,
        &fwd,
        k,
        HighwayOptions {
            split: PathSplit::Residual,
            retain,
        },
    )
}

/// Fixed-point iteration baseline: no residual path, full VJPs.
pub fn fpi(model: &ModelGraph, batch: &Batch, k: usize) -> Result<Gradients> {
    let fwd = run_forward(model, batch)?;
    highway_from_forward(
        model,
        &fwd,
        k,
        HighwayOptions {
            split: PathSplit::FixedPoint,
            retain: false,
        },
    )
}

pub fn backprop_from_forward(model: &ModelGraph, fwd: &ForwardPass) -> Result<Gradients> {
    let l = fwd.len();
    let dim = fwd.state(0).len();
    let attached = |i: usize| {
        fwd.loss_cotangents[i - 1]
            .clone()
            .unwrap_or_else(|| Vec64::zeros(dim))
    };
    let mut w = vec![Vec64::zeros(dim); l + 1];
    w[l] = attached(l);
    let mut stats = BackwardStats::default();
    for i in (0..l).rev() {
        let mut wi = model.layers[i].vjp_full(model.group_of(i), &fwd.tapes[i], &w[i + 1])?;
        if i > 0 {
            crate::numkit::add_into(wi.as_mut_slice(), attached(i).as_slice());
        }
        w[i] = wi;
    }
    stats.vjp_block_calls += l;
    let est = GradientEstimate { w, k: l };
    let grads = finalize_params(model, fwd, &est)?;
    stats.vjp_param_calls += l;
    Ok(Gradients {
        grads,
        loss: fwd.loss,
        stats,
        cotangents: est,
        estimates: None,
    })
}

/// Sequential reference backward sweep.
pub fn exact_backprop(model: &ModelGraph, batch: &Batch) -> Result<Gradients> {
    let fwd = run_forward(model, batch)?;
    backprop_from_forward(model, &fwd)
}

pub fn compute_gradients(model: &ModelGraph, batch: &Batch, alg: Algorithm) -> Result<Gradients> {
    match alg {
        Algorithm::Backprop => exact_backprop(model, batch),
        Algorithm::Highway(k) => highway_bp(model, batch, k),
        Algorithm::Fpi(k) => fpi(model, batch, k),
    }
}
