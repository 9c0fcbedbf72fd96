use std::path::Path;
use std::time::Instant;

use super::checkpoint::Checkpoint;
use super::config::{streams, TrainConfig};
use super::metrics::{MetricsRow, MetricsWriter};
use super::optim::Optimizer;
use super::task::Task;
use crate::engine::{
    compute_gradients, exact_backprop, highway_bp_with, loss, Algorithm, BackwardStats, Batch, ModelGraph,
};
use crate::error::{Error, Result};
use crate::numkit::Rng;
use crate::oracle::{cosine_similarity, norm_profile};

/// Outcome of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub step: usize,
    /// Loss on the training batch before the update.
    pub loss: f64,
    pub algorithm: Algorithm,
    pub stats: BackwardStats,
}

/// Gradient-quality diagnostics on the probe batch.
#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub cos_sim: f64,
    pub norm_profile: Option<Vec<f64>>,
}

/// Model, optimizer, and data streams of one run. Batch `s` is drawn from
/// `Rng::new(seed).split(TRAIN).split(s)`, so runs with equal configs see
/// equal data.
pub struct Trainer {
    config: TrainConfig,
    model: ModelGraph,
    task: Task,
    opt: Optimizer,
    step: usize,
    eval: Vec<Batch>,
    probe: Batch,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = config.build_model()?;
        let task = config.build_task()?;
        let opt = Optimizer::new(config.optimizer, &model.params)?;
        let root = Rng::new(config.run.seed);
        let width = model.state_dim();
        let eval_rng = root.split(streams::EVAL);
        let eval = (0..config.task.eval_batches)
            .map(|i| task.batch(&mut eval_rng.split(i as u64), width))
            .collect();
        let probe = task.batch(&mut root.split(streams::PROBE), width);
        Ok(Self {
            config,
            model,
            task,
            opt,
            step: 0,
            eval,
            probe,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &ModelGraph {
        &self.model
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn probe_batch(&self) -> &Batch {
        &self.probe
    }

    pub fn batch_at(&self, step: usize) -> Batch {
        let mut rng = Rng::new(self.config.run.seed).split(streams::TRAIN).split(step as u64);
        self.task.batch(&mut rng, self.model.state_dim())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.config.clone(), self.step, self.model.params.clone())
    }

    /// Forward, backward with the scheduled algorithm, and one update.
    /// A non-finite forward pass or loss becomes [`Error::Divergence`].
    pub fn step(&mut self) -> Result<StepResult> {
        let step = self.step;
        let batch = self.batch_at(step);
        let algorithm = self.config.algorithm.at(step);
        let g = match compute_gradients(&self.model, &batch, algorithm) {
            Err(Error::Numeric { .. }) => return Err(Error::Divergence { step, loss: f64::NAN }),
            other => other?,
        };
        if !g.loss.is_finite() {
            return Err(Error::Divergence { step, loss: g.loss });
        }
        let lr = self.config.optimizer.lr() * self.config.schedule.factor(step);
        self.opt.step(&mut self.model.params, &g.grads.params, lr)?;
        self.step += 1;
        Ok(StepResult {
            step,
            loss: g.loss,
            algorithm,
            stats: g.stats,
        })
    }

    /// Mean loss over the held-out batches.
    pub fn eval_loss(&self) -> Result<f64> {
        if self.eval.is_empty() {
            return Err(Error::Config("eval_batches is 0".into()));
        }
        let mut total = 0.0;
        for b in &self.eval {
            total += loss(&self.model, b)?;
        }
        Ok(total / self.eval.len() as f64)
    }

    /// Cosine similarity of `algorithm`'s gradient against the exact one
    /// on the probe batch, plus the norm profile for highway runs. Uses its
    /// own forward passes; training steps never see the exact gradient.
    pub fn probe(&self, algorithm: Algorithm) -> Result<ProbeResult> {
        let exact = exact_backprop(&self.model, &self.probe)?;
        Ok(match algorithm {
            Algorithm::Highway(k) => {
                let g = highway_bp_with(&self.model, &self.probe, k, true)?;
                let est = g.estimates.as_deref().unwrap_or_default();
                ProbeResult {
                    cos_sim: cosine_similarity(&g.grads, &exact.grads)?,
                    norm_profile: Some(norm_profile(est)?),
                }
            }
            other => ProbeResult {
                cos_sim: cosine_similarity(&compute_gradients(&self.model, &self.probe, other)?.grads, &exact.grads)?,
                norm_profile: None,
            },
        })
    }
}

fn finite_or_nan(r: Result<f64>) -> Result<f64> {
    match r {
        Err(Error::Numeric { .. }) => Ok(f64::NAN),
        other => other,
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub rows: Vec<MetricsRow>,
    /// Training loss of every step, in order.
    pub losses: Vec<f64>,
    pub final_eval_loss: Option<f64>,
    pub model: ModelGraph,
}

/// Runs the configured number of steps. With `out`, writes
/// `metrics.csv`, `norm_profile.csv`, `manifest.toml`, and
/// `checkpoint_init.bin` / `checkpoint_final.bin` there. On divergence the
/// offending step is logged before the error is returned.
pub fn train(config: TrainConfig, out: Option<&Path>) -> Result<TrainReport> {
    let mut trainer = Trainer::new(config)?;
    let cfg = trainer.config().clone();
    let mut writer = out.map(|dir| MetricsWriter::create(dir, &cfg)).transpose()?;
    if let Some(dir) = out {
        trainer.checkpoint().save(&dir.join("checkpoint_init.bin"))?;
    }
    let started = Instant::now();
    let steps = cfg.schedule.steps;
    let mut rows = Vec::new();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let last = step + 1 == steps;
        let due = |every: usize| every > 0 && (step % every == 0 || last);
        // a blown-up model shows as NaN here; the step below reports it
        let eval_loss = if due(cfg.run.eval_every) {
            Some(finite_or_nan(trainer.eval_loss())?)
        } else {
            None
        };
        let probe = if due(cfg.run.diag_every) {
            match trainer.probe(cfg.algorithm.at(step)) {
                Err(Error::Numeric { .. }) => None,
                other => Some(other?),
            }
        } else {
            None
        };
        let result = trainer.step();
        let (loss, algorithm, stats) = match &result {
            Ok(r) => (r.loss, r.algorithm, r.stats),
            Err(Error::Divergence { loss, .. }) => (*loss, cfg.algorithm.at(step), BackwardStats::default()),
            Err(_) => (f64::NAN, cfg.algorithm.at(step), BackwardStats::default()),
        };
        if result.is_ok() {
            losses.push(loss);
        }
        if due(cfg.run.log_every) || eval_loss.is_some() || probe.is_some() || result.is_err() {
            let row = MetricsRow {
                step,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
                train_loss: loss,
                eval_loss,
                k_used: algorithm.k(),
                vjp_block_calls: stats.vjp_block_calls,
                scan_calls: stats.scan_calls,
                cos_sim: probe.as_ref().map(|p| p.cos_sim),
                norm_profile: probe.and_then(|p| p.norm_profile),
            };
            if let Some(w) = writer.as_mut() {
                w.write(&row)?;
            }
            rows.push(row);
        }
        result?;
    }
    if let Some(dir) = out {
        trainer.checkpoint().save(&dir.join("checkpoint_final.bin"))?;
    }
    let final_eval_loss = if cfg.task.eval_batches > 0 {
        Some(trainer.eval_loss()?)
    } else {
        None
    };
    Ok(TrainReport {
        rows,
        losses,
        final_eval_loss,
        model: trainer.model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(alg: &str, extra: &str) -> TrainConfig {
        TrainConfig::from_toml(&format!(
            r#"
[model]
kind = "gru"
layers = 6
width = 4
[task]
kind = "adding"
batch_size = 4
eval_batches = 2
[algorithm]
{alg}
[optimizer]
name = "adam"
lr = 0.01
[schedule]
steps = 20
[run]
seed = 3
log_every = 5
{extra}
"#
        ))
        .unwrap()
    }

    #[test]
    fn highway_at_full_depth_tracks_backprop() {
        let a = train(cfg("name = \"highway\"\nk = 6", ""), None).unwrap();
        let b = train(cfg("name = \"backprop\"", ""), None).unwrap();
        assert_eq!(a.losses.len(), 20);
        for (x, y) in a.losses.iter().zip(&b.losses) {
            assert!((x - y).abs() <= 1e-8 * y.abs().max(1.0));
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let c = cfg("name = \"highway\"\nk = 2", "diag_every = 10");
        let a = train(c.clone(), None).unwrap();
        let b = train(c, None).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn k_schedule_shows_in_rows() {
        let r = train(cfg("name = \"highway\"\nk_schedule = [[0, 1], [10, 4]]", ""), None).unwrap();
        let ks: Vec<(usize, Option<usize>)> = r.rows.iter().map(|r| (r.step, r.k_used)).collect();
        assert_eq!(ks, vec![(0, Some(1)), (5, Some(1)), (10, Some(4)), (15, Some(4)), (19, Some(4))]);
        assert_eq!(r.rows[2].vjp_block_calls, 4 * 6);
    }

    #[test]
    fn fpi_zero_on_final_loss_only_touches_the_last_cell() {
        let t = Trainer::new(cfg("name = \"fpi\"\nk = 0", "")).unwrap();
        let batch = t.batch_at(0);
        let fwd = crate::engine::run_forward(t.model(), &batch).unwrap();
        let g = crate::engine::highway_from_forward(
            t.model(),
            &fwd,
            0,
            crate::engine::HighwayOptions {
                split: crate::engine::PathSplit::FixedPoint,
                retain: false,
            },
        )
        .unwrap();
        let parts = crate::engine::layer_param_contributions(t.model(), &fwd, &g.cotangents).unwrap();
        for (i, p) in parts.iter().enumerate() {
            let nonzero = p.iter().any(|m| m.as_slice().iter().any(|&v| v != 0.0));
            assert_eq!(nonzero, i == 5, "layer {i}");
        }
    }

    #[test]
    fn writes_outputs_and_reports_divergence() {
        let dir = tempfile::tempdir().unwrap();
        let r = train(cfg("name = \"backprop\"", "eval_every = 10\ndiag_every = 10"), Some(dir.path())).unwrap();
        for f in ["metrics.csv", "norm_profile.csv", "manifest.toml", "checkpoint_init.bin", "checkpoint_final.bin"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let logged = super::super::metrics::read_losses(&dir.path().join("metrics.csv")).unwrap();
        assert_eq!(logged.len(), r.rows.len());
        assert!(r.rows.iter().filter_map(|r| r.cos_sim).all(|c| (c - 1.0).abs() < 1e-12));

        let mut c = cfg("name = \"backprop\"", "");
        c.optimizer = super::super::optim::OptimizerConfig::SgdMomentum {
            lr: 1e6,
            momentum: 0.0,
            weight_decay: 0.0,
            clip_norm: None,
        };
        c.model.init_scale = 50.0;
        c.schedule.steps = 200;
        match train(c, Some(dir.path())) {
            Err(Error::Divergence { step, .. }) => {
                let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
                assert!(text.lines().last().unwrap().starts_with(&format!("{step},")));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
