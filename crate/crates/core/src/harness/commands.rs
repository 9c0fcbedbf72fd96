//! Library side of the `gradcheck`, `analyze`, and `bench` commands.

use std::path::Path;
use std::time::Instant;

use super::checkpoint::Checkpoint;
use super::config::{streams, TrainConfig};
use crate::engine::{
    backprop_from_forward, compute_gradients, highway_from_forward, highway_with_chain,
    residual_chain, run_forward, Algorithm, Batch, GradientEstimate, Head, HighwayOptions, LossAttachment,
    ModelGraph, PathSplit, Targets,
};
use crate::error::{Error, Result};
use crate::layers::{BlockSpec, InitSpec, LayerKind, LayerSpec, ResidualJacobian};
use crate::numkit::{rel_l2, Rng};
use crate::oracle::{brute_force_estimate, cosine_similarity, finite_diff_gradient, norm_profile, BRUTE_FORCE_MAX_LAYERS};

// ---- gradcheck -------------------------------------------------------------

pub const PRESETS: [&str; 5] = ["gru", "lstm", "plain", "relu", "gamma"];

/// Small model and batch for the gradient checks.
#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub preset: String,
    /// Chain length; 8 by default.
    pub layers: usize,
    /// State (cell) width; 4 by default.
    pub width: usize,
    pub batch: usize,
    pub seed: u64,
    /// Scales every residual Jacobian seen by the engine by 1.5, leaving
    /// the oracles untouched. For checking that the suites can fail.
    pub corrupt_k: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            preset: "gru".into(),
            layers: 8,
            width: 4,
            batch: 2,
            seed: 0,
            corrupt_k: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub worst: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

/// Stream for preset bias draws; layer streams count up from 0.
const PRESET_BIAS_STREAM: u64 = u64::MAX;

/// A small random model of one preset kind. Unlike training init, biases are
/// drawn from `N(0, 0.1²)`: with zero biases a dead ReLU row feeds an exact
/// zero into the next layer's kink.
pub fn preset_model(
    preset: &str,
    layers: usize,
    width: usize,
    attach: LossAttachment,
    seed: u64,
) -> Result<ModelGraph> {
    let rng = Rng::new(seed);
    let init = InitSpec::default();
    let head = Head::LinearMse { out: 2 };
    let stack = |kind| {
        ModelGraph::stack(
            vec![LayerSpec::residual(kind, width, BlockSpec::default()); layers],
            head,
            attach,
            &rng,
            init,
        )
    };
    let mut model = match preset {
        "gru" => ModelGraph::recurrent(LayerSpec::gru(width, 3), layers, head, attach, &rng, init),
        "lstm" => ModelGraph::recurrent(LayerSpec::lstm(width, 3), layers, head, attach, &rng, init),
        "plain" => stack(LayerKind::PlainResidual),
        "relu" => stack(LayerKind::ReluResidual),
        "gamma" => stack(LayerKind::GammaResidual(0.2)),
        other => Err(Error::Config(format!(
            "unknown preset '{other}', expected one of {}",
            PRESETS.join(", ")
        ))),
    }?;
    let mut bias_rng = rng.split(PRESET_BIAS_STREAM);
    for p in model.params.groups.iter_mut().flat_map(|g| g.params.iter_mut()) {
        if p.value.rows() == 1 {
            let noise = bias_rng.normal(p.value.cols(), 0.1);
            crate::numkit::add_into(p.value.as_mut_slice(), noise.as_slice());
        }
    }
    Ok(model)
}

/// Random `h_0`, inputs, and value targets fitting `model`.
pub fn random_batch(model: &ModelGraph, batch: usize, rng: &mut Rng) -> Batch {
    let n = model.layers[0].input_dim;
    let out = model.head.out_dim(model.readout_dim());
    Batch {
        h0: rng.normal(batch * model.state_dim(), 0.5),
        inputs: (n > 0).then(|| (0..model.len()).map(|_| rng.normal_mat(batch, n, 1.0)).collect()),
        targets: model
            .attached_indices()
            .iter()
            .map(|_| Targets::Values(rng.normal_mat(batch, out, 1.0)))
            .collect(),
    }
}

fn worst(errors: impl IntoIterator<Item = f64>) -> f64 {
    errors.into_iter().fold(0.0, f64::max)
}

/// Runs the exactness, path-oracle, FPI-truncation, and finite-difference
/// suites. Refuses chains longer than the path enumeration allows.
pub fn gradcheck(opts: &GradcheckOptions) -> Result<Vec<SuiteResult>> {
    if opts.layers > BRUTE_FORCE_MAX_LAYERS {
        return Err(Error::Capacity {
            what: "gradcheck path enumeration",
            limit: BRUTE_FORCE_MAX_LAYERS,
            requested: opts.layers,
        });
    }
    let l = opts.layers;
    let model = preset_model(&opts.preset, l, opts.width, LossAttachment::Every, opts.seed)?;
    let batch = random_batch(&model, opts.batch, &mut Rng::new(opts.seed).split(1));
    let fwd = run_forward(&model, &batch)?;
    let mut chain = residual_chain(&model, &fwd, PathSplit::Residual)?;
    if opts.corrupt_k {
        for k in chain.entries_mut().iter_mut().skip(1) {
            *k = ResidualJacobian::compose(k, &ResidualJacobian::scalar(k.dim(), 1.5))?;
        }
    }
    let retain = HighwayOptions {
        split: PathSplit::Residual,
        retain: true,
    };
    let hw = highway_with_chain(&model, &fwd, &chain, l, retain)?;
    let bp = backprop_from_forward(&model, &fwd)?;

    let exactness = SuiteResult {
        name: "exactness",
        worst: worst([
            rel_l2(&hw.grads.flatten(), &bp.grads.flatten()),
            rel_l2(&hw.cotangents.flatten(), &bp.cotangents.flatten()),
        ]),
        tolerance: 1e-10,
    };

    let mut path_errors = Vec::new();
    for (k, est) in hw.estimates.as_deref().unwrap_or_default().iter().enumerate() {
        let bf = brute_force_estimate(&model, &fwd, k)?;
        path_errors.extend(bf.w.iter().zip(&est.w).map(|(a, b)| rel_l2(a.as_slice(), b.as_slice())));
    }
    let path = SuiteResult {
        name: "path-oracle",
        worst: worst(path_errors),
        tolerance: 1e-12,
    };

    let final_model = preset_model(&opts.preset, l, opts.width, LossAttachment::Final, opts.seed)?;
    let final_batch = random_batch(&final_model, opts.batch, &mut Rng::new(opts.seed).split(2));
    let ffwd = run_forward(&final_model, &final_batch)?;
    let fbp = backprop_from_forward(&final_model, &ffwd)?;
    let mut fpi_errors = Vec::new();
    for k in 0..=l {
        let fpi = highway_from_forward(
            &final_model,
            &ffwd,
            k,
            HighwayOptions {
                split: PathSplit::FixedPoint,
                retain: false,
            },
        )?;
        for i in 0..=l {
            let got = fpi.cotangents.w[i].as_slice();
            fpi_errors.push(if i + k >= l {
                rel_l2(got, fbp.cotangents.w[i].as_slice())
            } else {
                crate::numkit::norm(got)
            });
        }
    }
    let fpi = SuiteResult {
        name: "fpi-truncation",
        worst: worst(fpi_errors),
        tolerance: 1e-12,
    };

    let fd = finite_diff_gradient(&model, &batch, 1e-6)?;
    let finite = SuiteResult {
        name: "finite-difference",
        worst: worst([
            rel_l2(&fd.flatten(), &bp.grads.flatten()),
            rel_l2(&fd.flatten(), &hw.grads.flatten()),
        ]),
        tolerance: 1e-5,
    };
    Ok(vec![exactness, path, fpi, finite])
}

// ---- analyze ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyzeRow {
    pub label: String,
    pub k: usize,
    pub cos_sim: f64,
    pub norm: f64,
}

pub const ANALYZE_HEADER: &str = "label,k,cos_sim,relative_norm";

impl AnalyzeRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{}", self.label, self.k, self.cos_sim, self.norm)
    }
}

/// Cosine similarity of highway(k) against the exact gradient and the
/// norm profile, for `k = 0..=max_k`, on the probe batch of the
/// checkpoint's config.
pub fn analyze_checkpoint(ck: &Checkpoint, label: &str, max_k: usize) -> Result<Vec<AnalyzeRow>> {
    let model = ck.model()?;
    let task = ck.config.build_task()?;
    let probe = task.batch(&mut Rng::new(ck.config.run.seed).split(streams::PROBE), model.state_dim());
    let fwd = run_forward(&model, &probe)?;
    let exact = backprop_from_forward(&model, &fwd)?;
    let hw = highway_from_forward(
        &model,
        &fwd,
        max_k,
        HighwayOptions {
            split: PathSplit::Residual,
            retain: true,
        },
    )?;
    let estimates: &[GradientEstimate] = hw.estimates.as_deref().unwrap_or_default();
    let profile = norm_profile(estimates)?;
    estimates
        .iter()
        .zip(profile)
        .map(|(est, norm)| {
            let g = crate::engine::finalize_params(&model, &fwd, est)?;
            Ok(AnalyzeRow {
                label: label.to_string(),
                k: est.k,
                cos_sim: cosine_similarity(&g, &exact.grads)?,
                norm,
            })
        })
        .collect()
}

pub fn analyze(path: &Path, max_k: usize) -> Result<Vec<AnalyzeRow>> {
    let ck = Checkpoint::load(path)?;
    let label = path.file_stem().map_or("checkpoint".into(), |s| s.to_string_lossy().into_owned());
    analyze_checkpoint(&ck, &label, max_k)
}

// ---- bench -----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub algorithm: Algorithm,
    pub median_ms: f64,
    pub vjp_block_calls: usize,
    pub scan_calls: usize,
}

pub const BENCH_HEADER: &str = "algorithm,k,median_ms,vjp_block_calls,scan_calls";

impl BenchRow {
    pub fn to_csv(&self) -> String {
        let (name, k) = match self.algorithm {
            Algorithm::Backprop => ("backprop", String::new()),
            Algorithm::Highway(k) => ("highway", k.to_string()),
            Algorithm::Fpi(k) => ("fpi", k.to_string()),
        };
        format!(
            "{name},{k},{:.3},{},{}",
            self.median_ms, self.vjp_block_calls, self.scan_calls
        )
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall-clock gradient step (forward plus backward) over `trials`
/// for backprop, and for fpi(k) and highway(k) at every `k`.
pub fn bench(config: &TrainConfig, ks: &[usize], trials: usize) -> Result<Vec<BenchRow>> {
    if trials == 0 {
        return Err(Error::Config("trials must be positive".into()));
    }
    let model = config.build_model()?;
    let task = config.build_task()?;
    let batch = task.batch(&mut Rng::new(config.run.seed).split(streams::TRAIN), model.state_dim());
    let mut algorithms = vec![Algorithm::Backprop];
    algorithms.extend(ks.iter().map(|&k| Algorithm::Fpi(k)));
    algorithms.extend(ks.iter().map(|&k| Algorithm::Highway(k)));
    algorithms
        .into_iter()
        .map(|alg| {
            let mut times = Vec::with_capacity(trials);
            let mut stats = None;
            for _ in 0..trials {
                let t = Instant::now();
                let g = compute_gradients(&model, &batch, alg)?;
                times.push(t.elapsed().as_secs_f64() * 1e3);
                stats = Some(g.stats);
            }
            let stats = stats.expect("trials > 0");
            Ok(BenchRow {
                algorithm: alg,
                median_ms: median(times),
                vjp_block_calls: stats.vjp_block_calls,
                scan_calls: stats.scan_calls,
            })
        })
        .collect()
}

/// Whether highway step time never decreases as `k` grows.
pub fn highway_time_nondecreasing(rows: &[BenchRow]) -> bool {
    let times: Vec<f64> = rows
        .iter()
        .filter(|r| matches!(r.algorithm, Algorithm::Highway(_)))
        .map(|r| r.median_ms)
        .collect();
    times.windows(2).all(|w| w[0] <= w[1])
}
