use super::model::{Batch, Head, ModelGraph, Targets};
use crate::error::{Error, Result};
use crate::layers::LayerTape;
use crate::numkit::{gemm, Cotangent, Mat64, MatRef, StateVec, Vec64};

/// Tapes and loss of one forward evaluation.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub tapes: Vec<LayerTape>,
    pub loss: f64,
    /// `∂L/∂h_i` for `i = 1..=L` (slot `i − 1`); `None` where no loss is
    /// attached.
    pub loss_cotangents: Vec<Option<Cotangent>>,
    /// Exact gradients of the head parameters, when the head has any.
    pub head_grads: Option<Vec<Mat64>>,
    pub batch: usize,
}

impl ForwardPass {
    pub fn len(&self) -> usize {
        self.tapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tapes.is_empty()
    }

    pub fn output(&self) -> &StateVec {
        &self.tapes[self.tapes.len() - 1].output
    }

    /// `h_i` for `i ∈ 0..=L`.
    pub fn state(&self, i: usize) -> &StateVec {
        if i == 0 {
            &self.tapes[0].input
        } else {
            &self.tapes[i - 1].output
        }
    }
}

/// Loss and feature/parameter cotangents of one attached state.
struct HeadEval {
    loss: f64,
    dfeat: Vec<f64>,
    dw: Option<(Mat64, Mat64)>,
}

fn features(model: &ModelGraph, h: &StateVec, batch: usize) -> Vec<f64> {
    let d = model.state_dim();
    let range = model.layers[0].readout_range();
    let r = range.len();
    let mut out = Vec::with_capacity(batch * r);
    for b in 0..batch {
        out.extend_from_slice(&h.as_slice()[b * d + range.start..b * d + range.end]);
    }
    debug_assert_eq!(out.len(), batch * r);
    out
}

/// Head output `F·W + b` (or `F` itself for the bare MSE head).
fn head_output(model: &ModelGraph, feat: &[f64], batch: usize) -> Vec<f64> {
    let r = model.readout_dim();
    match model.head_group() {
        None => feat.to_vec(),
        Some(g) => {
            let p = &model.params.groups[g];
            let out = model.head.out_dim(r);
            let mut y = crate::layers::broadcast_rows(p.value(1), batch);
            gemm(1.0, MatRef::row_major(feat, batch, r), p.value(0).view(), 1.0, &mut y);
            debug_assert_eq!(y.len(), batch * out);
            y
        }
    }
}

fn eval_head(model: &ModelGraph, feat: &[f64], target: &Targets, batch: usize, weight: f64) -> HeadEval {
    let r = model.readout_dim();
    let out = model.head.out_dim(r);
    let y = head_output(model, feat, batch);
    let (loss, dy) = match (model.head, target) {
        (Head::LinearSoftmax { .. }, Targets::Classes(cls)) => {
            let mut loss = 0.0;
            let mut dy = vec![0.0; y.len()];
            for b in 0..batch {
                let row = &y[b * out..(b + 1) * out];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                let lse = m + z.ln();
                loss += lse - row[cls[b]];
                for (c, g) in dy[b * out..(b + 1) * out].iter_mut().enumerate() {
                    let p = (row[c] - lse).exp();
                    *g = weight * (p - if c == cls[b] { 1.0 } else { 0.0 });
                }
            }
            (weight * loss, dy)
        }
        (_, Targets::Values(t)) => {
            let diff: Vec<f64> = y.iter().zip(t.as_slice()).map(|(a, b)| a - b).collect();
            let loss = 0.5 * weight * diff.iter().map(|v| v * v).sum::<f64>();
            (loss, diff.into_iter().map(|v| weight * v).collect())
        }
        // check_batch has already matched targets to the head
        _ => unreachable!("target kind checked against head"),
    };
    match model.head_group() {
        None => HeadEval {
            loss,
            dfeat: dy,
            dw: None,
        },
        Some(g) => {
            let w = model.params.groups[g].value(0);
            let mut dfeat = vec![0.0; batch * r];
            gemm(1.0, MatRef::row_major(&dy, batch, out), w.view().t(), 0.0, &mut dfeat);
            let mut dw = Mat64::zeros(r, out);
            gemm(
                1.0,
                MatRef::row_major(feat, batch, r).t(),
                MatRef::row_major(&dy, batch, out),
                0.0,
                dw.as_mut_slice(),
            );
            let db = crate::layers::col_sums(&dy, out);
            HeadEval {
                loss,
                dfeat,
                dw: Some((dw, db)),
            }
        }
    }
}

/// Per-attachment loss weight: the total loss is the mean over attached
/// states and batch elements.
fn loss_weight(model: &ModelGraph, batch: usize) -> f64 {
    1.0 / (model.attached_indices().len() * batch) as f64
}

/// Runs every layer in order, recording tapes, and evaluates the loss with
/// its cotangents on the attached states.
pub fn run_forward(model: &ModelGraph, batch: &Batch) -> Result<ForwardPass> {
    let bsz = model.check_batch(batch)?;
    let l = model.len();
    let mut tapes = Vec::with_capacity(l);
    let mut h = batch.h0.clone();
    for (i, spec) in model.layers.iter().enumerate() {
        let x = batch.inputs.as_ref().map(|xs| &xs[i]);
        let (next, tape) = spec.forward(i + 1, model.group_of(i), &h, x)?;
        tapes.push(tape);
        h = next;
    }

    let weight = loss_weight(model, bsz);
    let d = model.state_dim();
    let range = model.layers[0].readout_range();
    let r = range.len();
    let mut loss = 0.0;
    let mut cot: Vec<Option<Cotangent>> = vec![None; l];
    let mut head_grads = model
        .head_group()
        .map(|_| vec![Mat64::zeros(r, model.head.out_dim(r)), Mat64::zeros(1, model.head.out_dim(r))]);
    for (idx, target) in model.attached_indices().into_iter().zip(&batch.targets) {
        let state = &tapes[idx - 1].output;
        let feat = features(model, state, bsz);
        let ev = eval_head(model, &feat, target, bsz, weight);
        if !ev.loss.is_finite() {
            return Err(Error::Numeric {
                layer: idx,
                what: "loss".into(),
            });
        }
        loss += ev.loss;
        let mut c = vec![0.0; bsz * d];
        for b in 0..bsz {
            c[b * d + range.start..b * d + range.end].copy_from_slice(&ev.dfeat[b * r..(b + 1) * r]);
        }
        cot[idx - 1] = Some(Vec64::from_raw(c));
        if let (Some(acc), Some((dw, db))) = (head_grads.as_mut(), ev.dw) {
            crate::numkit::add_into(acc[0].as_mut_slice(), dw.as_slice());
            crate::numkit::add_into(acc[1].as_mut_slice(), db.as_slice());
        }
    }
    Ok(ForwardPass {
        tapes,
        loss,
        loss_cotangents: cot,
        head_grads,
        batch: bsz,
    })
}

/// Loss only; the tapes are dropped.
pub fn loss(model: &ModelGraph, batch: &Batch) -> Result<f64> {
    run_forward(model, batch).map(|f| f.loss)
}

/// Head predictions on the final state, one row per batch element.
pub fn predict(model: &ModelGraph, batch: &Batch) -> Result<Mat64> {
    let fwd = run_forward(model, batch)?;
    let feat = features(model, fwd.output(), fwd.batch);
    let out = model.head.out_dim(model.readout_dim());
    Mat64::new(fwd.batch, out, head_output(model, &feat, fwd.batch))
}
