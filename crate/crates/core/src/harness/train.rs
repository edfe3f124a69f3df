//! Training loop, spectral probes and the λ sweep.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{conditioning_trajectory, evaluate_bound, HeadSpectra, ProbeSnapshot, TrajectoryPoint};
use crate::conditioning::Conditioning;
use crate::error::{Error, Result};
use crate::linalg::{spectral_record, RecordTag};
use crate::rng::derived;

use super::model::{Model, TransformerConfig};
use super::optim::{AdamW, OptimizerConfig};
use super::task::{probe_examples, synth_task_with_len, Example};

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub config: TransformerConfig,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub probe_every: usize,
    /// Sequences in the fixed probe batch the Jacobian bounds are measured on.
    pub probe_batch: usize,
    pub n_train: usize,
    pub n_eval: usize,
}

impl RunSpec {
    /// The reference run: seed 7, diagonal shift λ = 10, 2000 steps.
    pub fn reference() -> Self {
        Self {
            config: TransformerConfig::reference(),
            optimizer: OptimizerConfig::default(),
            steps: 2000,
            batch_size: 32,
            probe_every: 250,
            probe_batch: 1,
            n_train: 4096,
            n_eval: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.optimizer.validate()?;
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("probe_every", self.probe_every),
            ("probe_batch", self.probe_batch),
            ("n_train", self.n_train),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.config.seq_len < 2 {
            return Err(Error::Config("probing needs seq_len >= 2".into()));
        }
        Ok(())
    }

    /// Probe steps: 0, every `probe_every`, and the last step.
    pub fn probe_steps(&self) -> Vec<usize> {
        let mut v: Vec<usize> = (0..=self.steps).step_by(self.probe_every.max(1)).collect();
        if v.last() != Some(&self.steps) {
            v.push(self.steps);
        }
        v
    }
}

/// One metrics row, written at every probe step (and once on divergence).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    /// Mean training-batch loss since the previous row; at step 0, the loss
    /// of the first batch at initialization.
    #[serde(with = "crate::report::float")]
    pub loss: f64,
    #[serde(with = "crate::report::float")]
    pub eval_loss: f64,
    #[serde(with = "crate::report::float")]
    pub eval_acc: f64,
    /// Absent on the diagnostic row of a diverged run.
    pub spectral: Option<TrajectoryPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub reason: String,
}

/// Protocol checks gathered while training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub steps_completed: usize,
    /// Bit patterns of all corrections before the first step and after the last.
    pub corrections_initial: Vec<u64>,
    pub corrections_final: Vec<u64>,
    pub parameter_tensors: usize,
    pub optimizer_tensors: usize,
    pub optimizer_entries: usize,
    pub trainable_parameters: usize,
    pub divergence: Option<Divergence>,
}

impl RunOutcome {
    pub fn corrections_frozen(&self) -> bool {
        self.corrections_initial == self.corrections_final
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub spec: RunSpec,
    /// Strictly increasing in step.
    pub metrics: Vec<MetricsRow>,
    pub snapshots: Vec<ProbeSnapshot>,
    pub outcome: Option<RunOutcome>,
}

impl TrainRun {
    pub fn new(spec: RunSpec) -> Self {
        Self {
            spec,
            metrics: Vec::new(),
            snapshots: Vec::new(),
            outcome: None,
        }
    }

    pub fn final_row(&self) -> Option<&MetricsRow> {
        self.metrics.iter().rev().find(|r| r.spectral.is_some())
    }

    pub fn diverged(&self) -> bool {
        self.outcome.as_ref().is_some_and(|o| o.divergence.is_some())
    }
}

/// Spectra of every head's projections and Jacobian bounds on the probe batch.
pub fn probe(model: &Model, probes: &[Example], step: usize) -> Result<ProbeSnapshot> {
    let mut heads = Vec::new();
    let mut effective = Vec::new();
    for (l, layer) in model.params.layers.iter().enumerate() {
        let corrections = model.corrections(l);
        let eff = layer.effective_heads(corrections)?;
        for (h, p) in layer.heads.iter().enumerate() {
            let tag = |name: &str| RecordTag::named(name).at(l, h).step(step);
            let weights = [
                spectral_record(&p.w_q, tag("w_q"))?,
                spectral_record(&p.w_k, tag("w_k"))?,
                spectral_record(&p.w_v, tag("w_v"))?,
            ];
            let corrected = [
                spectral_record(&eff[h].w_q, tag("w_q+c_q"))?,
                spectral_record(&eff[h].w_k, tag("w_k+c_k"))?,
                spectral_record(&eff[h].w_v, tag("w_v+c_v"))?,
            ];
            let correction_norms = match corrections {
                Some(cs) => [cs[h].c_q(), cs[h].c_k(), cs[h].c_v()].map(|c| c.frobenius_norm()),
                None => [0.0; 3],
            };
            heads.push(HeadSpectra {
                layer: l,
                head: h,
                weights,
                corrected,
                correction_norms,
            });
        }
        effective.push(eff);
    }
    let mut bounds = Vec::new();
    for ex in probes {
        let inputs = model.attention_inputs(&ex.tokens)?;
        for (l, x) in inputs.iter().enumerate() {
            for (h, p) in effective[l].iter().enumerate() {
                bounds.push(evaluate_bound(x, p, RecordTag::named("jacobian").at(l, h).step(step))?);
            }
        }
    }
    Ok(ProbeSnapshot { step, heads, bounds })
}

fn sample_batch(rng: &mut impl Rng, train: &[Example], size: usize) -> Vec<Example> {
    (0..size)
        .map(|_| train[rng.random_range(0..train.len())].clone())
        .collect()
}

fn non_finite_tensor(model: &Model) -> Option<String> {
    let names = model.params.names();
    model
        .params
        .tensors()
        .iter()
        .position(|t| t.as_slice().iter().any(|v| !v.is_finite()))
        .map(|i| names[i].clone())
}

/// Trains the model described by `run.spec`, filling metrics, snapshots and outcome.
///
/// A non-finite loss or parameter stops the run after a diagnostic row; the
/// run is still returned (check [`TrainRun::diverged`]).
pub fn train(mut run: TrainRun) -> Result<TrainRun> {
    let spec = run.spec.clone();
    spec.validate()?;
    let cfg = &spec.config;
    let data = synth_task_with_len(cfg.seed, spec.n_train, spec.n_eval, cfg.seq_len)?;
    let probes = probe_examples(cfg.seed, spec.probe_batch, cfg.seq_len)?;
    let mut model = Model::new(cfg.clone())?;
    let mut opt = AdamW::new(spec.optimizer, &model.params)?;
    let corrections_initial = model.correction_fingerprint();
    let mut batch_rng = derived(cfg.seed, 3);
    let mut batch = sample_batch(&mut batch_rng, &data.train, spec.batch_size);

    run.metrics.clear();
    run.snapshots.clear();
    let record = |run: &mut TrainRun, model: &Model, step: usize, loss: f64| -> Result<()> {
        let snap = probe(model, &probes, step)?;
        let point = conditioning_trajectory(std::slice::from_ref(&snap))?.remove(0);
        let (eval_loss, eval_acc) = model.evaluate(&data.eval)?;
        run.metrics.push(MetricsRow {
            step,
            loss,
            eval_loss,
            eval_acc,
            spectral: Some(point),
        });
        run.snapshots.push(snap);
        Ok(())
    };

    record(&mut run, &model, 0, model.loss(&batch)?)?;
    let (mut window_sum, mut window_len) = (0.0, 0usize);
    let mut divergence = None;
    let mut completed = 0;
    for step in 1..=spec.steps {
        let (loss, grad) = match model.loss_and_grad(&batch) {
            Ok(v) => v,
            Err(Error::NonFinite(msg)) => {
                divergence = Some(Divergence { step, reason: msg });
                break;
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            divergence = Some(Divergence {
                step,
                reason: format!("training loss is {loss}"),
            });
            break;
        }
        opt.step(&mut model.params, &grad)?;
        if let Some(name) = non_finite_tensor(&model) {
            divergence = Some(Divergence {
                step,
                reason: format!("non-finite entries in {name} after the update"),
            });
            break;
        }
        completed = step;
        window_sum += loss;
        window_len += 1;
        batch = sample_batch(&mut batch_rng, &data.train, spec.batch_size);
        if step % spec.probe_every == 0 || step == spec.steps {
            record(&mut run, &model, step, window_sum / window_len as f64)?;
            window_sum = 0.0;
            window_len = 0;
        }
    }
    if let Some(d) = &divergence {
        run.metrics.push(MetricsRow {
            step: d.step,
            loss: f64::NAN,
            eval_loss: f64::NAN,
            eval_acc: f64::NAN,
            spectral: None,
        });
    }
    let params = &model.params;
    run.outcome = Some(RunOutcome {
        steps_completed: completed,
        corrections_initial,
        corrections_final: model.correction_fingerprint(),
        parameter_tensors: params.tensors().len(),
        optimizer_tensors: opt.state_len(),
        optimizer_entries: opt.tracked_entries(),
        trainable_parameters: params.num_parameters(),
        divergence,
    });
    Ok(run)
}

/// Multiply-add count of the Q/K/V projections for one head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub projection_flops: u64,
}

/// `6NDd` for plain projections, `6NDd + 3Nd` with corrections added.
pub fn flops_estimate(n: u64, d_model: u64, d_head: u64, conditioned: bool) -> FlopsEstimate {
    let base = 6 * n * d_model * d_head;
    FlopsEstimate {
        projection_flops: if conditioned { base + 3 * n * d_head } else { base },
    }
}

/// Relative cost of conditioning, `(conditioned − plain)/plain`.
pub fn flops_overhead(n: u64, d_model: u64, d_head: u64) -> f64 {
    let plain = flops_estimate(n, d_model, d_head, false).projection_flops as f64;
    let cond = flops_estimate(n, d_model, d_head, true).projection_flops as f64;
    (cond - plain) / plain
}

/// Final-probe summary of one λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    #[serde(with = "crate::report::float")]
    pub lambda: f64,
    #[serde(with = "crate::report::float")]
    pub final_eval_acc: f64,
    /// Mean over roles of the mean κ(W + C).
    #[serde(with = "crate::report::float")]
    pub final_kappa_corrected: f64,
    #[serde(with = "crate::report::float")]
    pub final_kappa_weights: f64,
    #[serde(with = "crate::report::float")]
    pub final_kappa_j_effective: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    /// Sorted by λ.
    pub rows: Vec<AblationRow>,
    pub runs: Vec<TrainRun>,
    /// λ values that appeared more than once in the request.
    pub duplicates: Vec<f64>,
}

fn role_mean(p: &TrajectoryPoint, corrected: bool) -> f64 {
    let roles = if corrected { &p.corrected } else { &p.weights };
    roles.iter().map(|r| r.kappa).sum::<f64>() / 3.0
}

/// One run per distinct λ (diagonal shift), same seed and data; rows sorted by λ.
pub fn ablate_lambda(base: &RunSpec, lambdas: &[f64]) -> Result<AblationTable> {
    if lambdas.is_empty() {
        return Err(Error::Empty("lambda list is empty".into()));
    }
    let mut sorted = lambdas.to_vec();
    for &l in &sorted {
        Conditioning::from_name("diag-shift", l)?;
    }
    sorted.sort_by(f64::total_cmp);
    let mut duplicates = Vec::new();
    sorted.dedup_by(|a, b| {
        let dup = a == b;
        if dup && duplicates.last() != Some(b) {
            duplicates.push(*b);
        }
        dup
    });
    let mut rows = Vec::with_capacity(sorted.len());
    let mut runs = Vec::with_capacity(sorted.len());
    for &lambda in &sorted {
        let mut spec = base.clone();
        spec.config.conditioning = Conditioning::DiagonalShift { lambda };
        let run = train(TrainRun::new(spec))?;
        let last = run
            .final_row()
            .and_then(|r| r.spectral.clone().map(|p| (r.eval_acc, p)))
            .ok_or_else(|| Error::Empty(format!("run at lambda {lambda} produced no probes")))?;
        rows.push(AblationRow {
            lambda,
            final_eval_acc: last.0,
            final_kappa_corrected: role_mean(&last.1, true),
            final_kappa_weights: role_mean(&last.1, false),
            final_kappa_j_effective: last.1.kappa_j_effective,
            diverged: run.diverged(),
        });
        runs.push(run);
    }
    Ok(AblationTable { rows, runs, duplicates })
}
