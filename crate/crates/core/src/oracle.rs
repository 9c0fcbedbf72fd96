//! Independent references for the backward pass: explicit path enumeration,
//! central finite differences, and comparison metrics.

use crate::engine::{run_forward, Batch, ForwardPass, GradientEstimate, GradientSet, ModelGraph};
use crate::error::{Error, Result};
use crate::numkit::{dot, norm, Cotangent, Vec64};

/// Longest chain the brute-force enumeration accepts.
pub const BRUTE_FORCE_MAX_LAYERS: usize = 12;

/// `G_ij(𝒥)`: the loss cotangent at `h_j` carried back to `h_i`, crossing
/// the block of every layer in `blocks` and the residual path of every other
/// layer in `(i, j]`. With `i == j` the path is empty and `blocks` is
/// ignored.
pub fn path_gradient(
    model: &ModelGraph,
    fwd: &ForwardPass,
    i: usize,
    j: usize,
    blocks: &[usize],
) -> Result<Cotangent> {
    let l = fwd.len();
    if i > j || j > l || j == 0 {
        return Err(Error::Contract(format!("path from h_{j} to h_{i} outside 0..={l}")));
    }
    if let Some(&m) = blocks.iter().find(|&&m| i < j && (m <= i || m > j)) {
        return Err(Error::Contract(format!("layer {m} is not between h_{i} and h_{j}")));
    }
    let mut w = fwd.loss_cotangents[j - 1]
        .clone()
        .ok_or_else(|| Error::Contract(format!("no loss attached at h_{j}")))?;
    for m in (i + 1..=j).rev() {
        w = if blocks.contains(&m) {
            model.layers[m - 1].vjp_block(model.group_of(m - 1), &fwd.tapes[m - 1], &w)?
        } else {
            fwd.tapes[m - 1].residual_jac.apply(&w)?
        };
    }
    Ok(w)
}

/// Sum of all paths crossing at most `k` blocks, for every `h_i`.
/// Subsets are visited per `i`, then `j` ascending, then as a binary
/// counter over layers `i+1..=j`.
pub fn brute_force_estimate(model: &ModelGraph, fwd: &ForwardPass, k: usize) -> Result<GradientEstimate> {
    let l = fwd.len();
    if l > BRUTE_FORCE_MAX_LAYERS {
        return Err(Error::Capacity {
            what: "brute-force path enumeration",
            limit: BRUTE_FORCE_MAX_LAYERS,
            requested: l,
        });
    }
    let dim = fwd.state(0).len();
    let mut w = Vec::with_capacity(l + 1);
    for i in 0..=l {
        let mut acc = Vec64::zeros(dim);
        for j in (i.max(1)..=l).filter(|&j| fwd.loss_cotangents[j - 1].is_some()) {
            let span = j - i;
            for mask in 0u32..(1u32 << span) {
                if mask.count_ones() as usize > k {
                    continue;
                }
                let blocks: Vec<usize> = (0..span)
                    .filter(|b| mask & (1 << b) != 0)
                    .map(|b| i + 1 + b)
                    .collect();
                acc.add_assign(&path_gradient(model, fwd, i, j, &blocks)?)?;
            }
        }
        w.push(acc);
    }
    Ok(GradientEstimate { w, k })
}

/// Central-difference gradient of the loss with respect to every parameter
/// and every entry of `h_0`.
pub fn finite_diff_gradient(model: &ModelGraph, batch: &Batch, eps: f64) -> Result<GradientSet> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Input(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut m = model.clone();
    let mut params = model.params.zeros_like();
    for g in 0..model.params.groups.len() {
        for p in 0..model.params.groups[g].params.len() {
            let n = model.params.groups[g].params[p].value.as_slice().len();
            for e in 0..n {
                let orig = model.params.groups[g].params[p].value.as_slice()[e];
                let slot = |m: &mut ModelGraph, v: f64| m.params.groups[g].params[p].value.as_mut_slice()[e] = v;
                slot(&mut m, orig + eps);
                let up = run_forward(&m, batch)?.loss;
                slot(&mut m, orig - eps);
                let down = run_forward(&m, batch)?.loss;
                slot(&mut m, orig);
                params.groups[g].params[p].value.as_mut_slice()[e] = (up - down) / (2.0 * eps);
            }
        }
    }
    let mut b = batch.clone();
    let mut input = Vec64::zeros(batch.h0.len());
    for e in 0..batch.h0.len() {
        let orig = batch.h0[e];
        b.h0.as_mut_slice()[e] = orig + eps;
        let up = run_forward(model, &b)?.loss;
        b.h0.as_mut_slice()[e] = orig - eps;
        let down = run_forward(model, &b)?.loss;
        b.h0.as_mut_slice()[e] = orig;
        input.as_mut_slice()[e] = (up - down) / (2.0 * eps);
    }
    Ok(GradientSet { params, input })
}

/// Cosine similarity of two flat vectors. Two zero vectors count as
/// identical; one zero vector against a nonzero one gives 0.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "cosine",
            expected: a.len().to_string(),
            got: b.len().to_string(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    Ok(match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot(a, b) / (na * nb)).clamp(-1.0, 1.0),
    })
}

/// Cosine similarity of the parameter gradients.
pub fn cosine_similarity(a: &GradientSet, b: &GradientSet) -> Result<f64> {
    a.params.check_same_shape(&b.params, "cosine_similarity")?;
    cosine(&a.flatten(), &b.flatten())
}

/// Cosine similarity of the state cotangents `w_0 … w_L`.
pub fn estimate_cosine(a: &GradientEstimate, b: &GradientEstimate) -> Result<f64> {
    cosine(&a.flatten(), &b.flatten())
}

/// Relative size of each iteration's contribution: entry 0 is `‖w⁰‖`,
/// entry `k` is `‖w^k − w^{k−1}‖`, all divided by `‖w^K‖` of the last
/// estimate. A zero final estimate leaves the norms unscaled.
pub fn norm_profile(estimates: &[GradientEstimate]) -> Result<Vec<f64>> {
    let last = estimates
        .last()
        .ok_or_else(|| Error::Contract("norm profile needs at least one estimate".into()))?;
    let total = norm(&last.flatten());
    let scale = if total > 0.0 { total } else { 1.0 };
    let mut out = Vec::with_capacity(estimates.len());
    let mut prev: Option<Vec<f64>> = None;
    for e in estimates {
        let cur = e.flatten();
        let step = match &prev {
            None => norm(&cur),
            Some(p) => {
                if p.len() != cur.len() {
                    return Err(Error::shape("norm_profile", p.len(), cur.len()));
                }
                cur.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            }
        };
        out.push(step / scale);
        prev = Some(cur);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{exact_backprop, highway_from_forward, HighwayOptions, Head, LossAttachment, Targets};
    use crate::layers::{Activation, BlockSpec, InitSpec, LayerKind, LayerSpec, ParamGroup, ParamSet};
    use crate::numkit::{rel_l2, Mat64, Rng};

    fn scalar_chain() -> (ModelGraph, ForwardPass) {
        let block = BlockSpec {
            hidden: None,
            activation: Activation::Identity,
        };
        let groups = [2.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                ParamGroup::new(
                    format!("layer{}", i + 1),
                    vec![("w", Mat64::new(1, 1, vec![a]).unwrap()), ("b", Mat64::zeros(1, 1))],
                )
            })
            .collect();
        let model = ModelGraph::from_parts(
            vec![LayerSpec::residual(LayerKind::PlainResidual, 1, block); 2],
            vec![0, 1],
            ParamSet { groups },
            Head::Mse,
            LossAttachment::Final,
        )
        .unwrap();
        let batch = Batch {
            h0: Vec64::new(vec![1.0]).unwrap(),
            inputs: None,
            targets: vec![Targets::Values(Mat64::zeros(1, 1))],
        };
        let mut fwd = run_forward(&model, &batch).unwrap();
        fwd.loss_cotangents = vec![None, Some(Vec64::new(vec![1.0]).unwrap())];
        (model, fwd)
    }

    #[test]
    fn scalar_paths() {
        let (model, fwd) = scalar_chain();
        assert_eq!(path_gradient(&model, &fwd, 0, 2, &[2]).unwrap()[0], 3.0);
        assert_eq!(path_gradient(&model, &fwd, 0, 2, &[1, 2]).unwrap()[0], 6.0);
        assert_eq!(path_gradient(&model, &fwd, 0, 2, &[]).unwrap()[0], 1.0);
        let bf = brute_force_estimate(&model, &fwd, 1).unwrap();
        assert_eq!(bf.w[0][0], 6.0);
        assert!(path_gradient(&model, &fwd, 1, 2, &[1]).is_err());
        assert!(matches!(path_gradient(&model, &fwd, 0, 1, &[]), Err(Error::Contract(_))));
        assert_eq!(path_gradient(&model, &fwd, 2, 2, &[1, 2]).unwrap()[0], 1.0);
    }

    #[test]
    fn norm_profile_example() {
        let est = |v: &[f64], k| GradientEstimate {
            w: vec![Vec64::new(v.to_vec()).unwrap()],
            k,
        };
        // w⁰ = 1, w¹ = 6, w² = 12 → increments 1, 5, 6 over 12
        let p = norm_profile(&[est(&[1.0], 0), est(&[6.0], 1), est(&[12.0], 2)]).unwrap();
        let want = [1.0 / 12.0, 5.0 / 12.0, 6.0 / 12.0];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(norm_profile(&[]).is_err());
    }

    #[test]
    fn cosine_conventions() {
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn brute_force_matches_highway_on_small_models() {
        let rng = Rng::new(3);
        let mut data = Rng::new(4);
        let models = [
            ModelGraph::recurrent(LayerSpec::gru(3, 2), 6, Head::Mse, LossAttachment::Every, &rng, InitSpec::default())
                .unwrap(),
            ModelGraph::stack(
                vec![LayerSpec::residual(LayerKind::ReluResidual, 3, BlockSpec::default()); 5],
                Head::Mse,
                LossAttachment::Every,
                &rng,
                InitSpec::default(),
            )
            .unwrap(),
        ];
        for model in &models {
            let l = model.len();
            let batch = Batch {
                h0: data.normal(2 * model.state_dim(), 1.0),
                inputs: (model.layers[0].input_dim > 0).then(|| (0..l).map(|_| data.normal_mat(2, 2, 1.0)).collect()),
                targets: (0..l).map(|_| Targets::Values(data.normal_mat(2, 3, 1.0))).collect(),
            };
            let fwd = run_forward(model, &batch).unwrap();
            let hw = highway_from_forward(
                model,
                &fwd,
                l,
                HighwayOptions {
                    retain: true,
                    ..Default::default()
                },
            )
            .unwrap();
            for (k, est) in hw.estimates.unwrap().iter().enumerate() {
                let bf = brute_force_estimate(model, &fwd, k).unwrap();
                assert!(rel_l2(&bf.flatten(), &est.flatten()) < 1e-10, "k={k}");
            }
        }
    }

    #[test]
    fn finite_differences_agree_with_backprop() {
        let rng = Rng::new(8);
        let model = ModelGraph::recurrent(
            LayerSpec::lstm(2, 2),
            4,
            Head::LinearMse { out: 1 },
            LossAttachment::Final,
            &rng,
            InitSpec::default(),
        )
        .unwrap();
        let mut data = Rng::new(1);
        let batch = Batch {
            h0: data.normal(2 * 4, 0.5),
            inputs: Some((0..4).map(|_| data.normal_mat(2, 2, 1.0)).collect()),
            targets: vec![Targets::Values(data.normal_mat(2, 1, 1.0))],
        };
        let fd = finite_diff_gradient(&model, &batch, 1e-6).unwrap();
        let bp = exact_backprop(&model, &batch).unwrap();
        assert!(rel_l2(&fd.flatten(), &bp.grads.flatten()) < 1e-6);
        assert!(rel_l2(fd.input.as_slice(), bp.grads.input.as_slice()) < 1e-6);
        assert!(cosine_similarity(&fd, &bp.grads).unwrap() > 1.0 - 1e-10);
    }

    #[test]
    fn brute_force_refuses_long_chains() {
        let rng = Rng::new(0);
        let model =
            ModelGraph::recurrent(LayerSpec::gru(1, 0), 13, Head::Mse, LossAttachment::Final, &rng, InitSpec::default())
                .unwrap();
        let batch = Batch {
            h0: Vec64::zeros(1),
            inputs: None,
            targets: vec![Targets::Values(Mat64::zeros(1, 1))],
        };
        let fwd = run_forward(&model, &batch).unwrap();
        assert!(matches!(
            brute_force_estimate(&model, &fwd, 1),
            Err(Error::Capacity { limit: 12, requested: 13, .. })
        ));
    }
}
