//! Deterministic server/worker training simulator.
//!
//! One iteration: the server broadcasts the model; every honest worker
//! samples a mini-batch without replacement, averages per-example
//! gradients, clips, injects correlated plus independent noise, and folds
//! the result into its momentum; malicious workers either craft messages
//! from the honest momentums or run a corrupted pipeline (sign-flipped
//! gradients, flipped labels); the server aggregates all `n` momentums with
//! the configured rule and takes a gradient step. Every random draw is
//! keyed by `(seed, role, worker, iteration)`, so traces are byte-identical
//! across runs and thread counts.

pub mod partition;
pub mod schedule;
pub mod task;

pub use partition::{partition, PartitionError, PartitionScheme};
pub use schedule::{default_sigma_bar, sigma_batch_sq, Schedule, ScheduleError};
pub use task::{
    accuracy, honest_loss_grad, Dataset, Example, LogisticTask, MlpTask, Objective, QuadraticTask,
};

use std::sync::Arc;

use rayon::prelude::*;

use thiserror::Error;

use crate::aggregation::{AggregationError, AggregatorKind, UpdateBatch};
use crate::attacks::{craft, AttackError, AttackKind, AttackSpec};
use crate::linalg;
use crate::noise::{perturb, NoiseError, NoisePlan, SecretRegistry};
use crate::privacy::{secldp_epsilon, NoiseAssignment, PrivacyError, PrivacyParams};
use crate::rng::{domain, KeyedStream};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid simulation setup: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("metric unsupported: {0}")]
    UnsupportedMetric(String),
}

/// Scale a vector so its norm does not exceed `threshold`; direction and
/// short vectors are untouched.
pub fn clip(gradient: &[f64], threshold: f64) -> Vec<f64> {
    assert!(threshold > 0.0, "clip threshold must be positive");
    let norm = linalg::norm(gradient);
    let factor = (threshold / norm).min(1.0);
    gradient.iter().map(|g| g * factor).collect()
}

/// Uniform index into `0..total`, keyed by the run seed; this is the draw
/// selecting the returned iterate.
pub fn sample_iterate_index(seed: u64, total: u64) -> u64 {
    KeyedStream::new(&[domain::THETA_HAT, seed], 0).below(total as usize) as u64
}

/// A fully resolved run description: concrete task, datasets, noise
/// magnitudes, and schedule.
pub struct Simulation {
    pub seed: u64,
    pub n: usize,
    /// Bound on malicious workers; ids `n - corrupt .. n` act maliciously.
    pub corrupt: usize,
    pub batch_size: usize,
    pub clip_threshold: f64,
    pub iterations: u64,
    pub aggregator: AggregatorKind,
    pub attack: AttackSpec,
    pub noise: NoisePlan,
    pub schedule: Schedule,
    pub objective: Arc<dyn Objective>,
    /// One dataset per worker, in worker order.
    pub worker_data: Vec<Dataset>,
    /// Held-out classification data; empty when accuracy is meaningless.
    pub test_data: Dataset,
    pub theta0: Vec<f64>,
    /// When set, the trace carries the composed budget after each step.
    pub accounting: Option<(PrivacyParams, NoiseAssignment)>,
    /// Record the honest-loss gap against the task minimum.
    pub compute_gap: bool,
    /// Worker-step parallelism; 0 picks the library default.
    pub threads: usize,
}

/// Per-iteration record of the run.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub t: u64,
    /// Honest loss at the current model.
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub accuracy: Option<f64>,
    pub gap: Option<f64>,
    pub eps_so_far: Option<f64>,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    /// Iterate sampled uniformly from those visited.
    pub theta_hat: Vec<f64>,
    pub theta_hat_index: u64,
    pub final_theta: Vec<f64>,
    /// Infimum of the honest loss, when the task provides one.
    pub loss_star: Option<f64>,
}

fn validate(sim: &Simulation) -> Result<(), SimulationError> {
    let bad = |msg: String| Err(SimulationError::InvalidConfig(msg));
    if sim.n == 0 {
        return bad("need at least one worker".into());
    }
    if 2 * sim.corrupt >= sim.n {
        return bad(format!(
            "corrupt bound {} must satisfy 2f < n = {}",
            sim.corrupt, sim.n
        ));
    }
    if sim.worker_data.len() != sim.n {
        return bad(format!(
            "got {} worker datasets for n = {}",
            sim.worker_data.len(),
            sim.n
        ));
    }
    if sim.iterations == 0 {
        return bad("need at least one iteration".into());
    }
    if sim.clip_threshold.is_nan() || sim.clip_threshold <= 0.0 {
        return bad(format!(
            "clip threshold must be positive, got {}",
            sim.clip_threshold
        ));
    }
    let d = sim.objective.dim();
    if sim.theta0.len() != d {
        return bad(format!(
            "initial model has dimension {}, objective expects {d}",
            sim.theta0.len()
        ));
    }
    if sim.noise.d != d {
        return bad(format!(
            "noise plan dimension {} does not match model dimension {d}",
            sim.noise.d
        ));
    }
    if !sim.noise.is_disabled() && sim.n < 2 {
        return bad("noise injection needs at least two workers".into());
    }
    if sim.batch_size == 0 {
        return bad("batch size must be at least 1".into());
    }
    for (id, data) in sim.worker_data.iter().enumerate() {
        let runs_pipeline = id < sim.n - sim.corrupt || !sim.attack.kind.is_message_level();
        if runs_pipeline {
            if data.is_empty() {
                return bad(format!("worker {id} has an empty dataset"));
            }
            if sim.batch_size > data.len() {
                return bad(format!(
                    "batch size {} exceeds worker {id}'s {} points",
                    sim.batch_size,
                    data.len()
                ));
            }
        }
    }
    Ok(())
}

/// Momentum refresh for one pipeline worker at iteration `t >= 1`.
#[allow(clippy::too_many_arguments)]
fn pipeline_momentum(
    sim: &Simulation,
    registry: Option<&SecretRegistry>,
    data: &Dataset,
    id: usize,
    t: u64,
    theta: &[f64],
    previous: &[f64],
    beta_prev: f64,
    negate: bool,
) -> Result<Vec<f64>, SimulationError> {
    let d = sim.objective.dim();
    let mut stream = KeyedStream::new(&[domain::BATCH, sim.seed, id as u64], t);
    let batch = stream.sample_without_replacement(data.len(), sim.batch_size);

    let mut grad = vec![0.0; d];
    for &k in &batch {
        sim.objective
            .example_loss_grad(theta, &data[k], Some(&mut grad));
    }
    linalg::scale(&mut grad, 1.0 / sim.batch_size as f64);

    let mut clipped = clip(&grad, sim.clip_threshold);
    if negate {
        for g in clipped.iter_mut() {
            *g = -*g;
        }
    }
    // Sensitivity contract for everything entering the noise layer.
    assert!(
        linalg::norm(&clipped) <= sim.clip_threshold * (1.0 + 1e-12) + 1e-12,
        "clipped gradient escaped the sensitivity bound"
    );

    let noisy = match registry {
        Some(reg) if !sim.noise.is_disabled() => perturb(&clipped, id, t, reg, &sim.noise)?,
        _ => clipped,
    };

    let mut momentum = vec![0.0; d];
    for k in 0..d {
        momentum[k] = beta_prev * previous[k] + (1.0 - beta_prev) * noisy[k];
    }
    Ok(momentum)
}

/// Execute the full protocol for `sim.iterations` steps.
pub fn run(sim: &Simulation) -> Result<RunTrace, SimulationError> {
    validate(sim)?;
    let n = sim.n;
    let f = sim.corrupt;
    let d = sim.objective.dim();
    let honest_count = n - f;

    let registry = if sim.noise.is_disabled() {
        None
    } else {
        Some(SecretRegistry::establish(n, sim.seed)?)
    };

    // Label flipping corrupts the malicious datasets before training.
    let mut data: Vec<Dataset> = sim.worker_data.clone();
    if sim.attack.kind == AttackKind::LabelFlip {
        if let Some(classes) = sim.objective.classes() {
            for ds in data.iter_mut().skip(honest_count) {
                for ex in ds.iter_mut() {
                    ex.y = classes - 1 - ex.y;
                }
            }
        }
    }

    let honest_data = &sim.worker_data[..honest_count];
    let loss_star = if sim.compute_gap {
        sim.objective.loss_star(honest_data)
    } else {
        None
    };
    if sim.compute_gap && loss_star.is_none() {
        return Err(SimulationError::UnsupportedMetric(
            "task does not expose its honest-loss infimum".into(),
        ));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sim.threads)
        .build()
        .map_err(|e| SimulationError::InvalidConfig(format!("thread pool: {e}")))?;

    let theta_hat_index = sample_iterate_index(sim.seed, sim.iterations);
    let mut theta = sim.theta0.clone();
    let mut theta_hat = theta.clone();
    let mut momentums: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
    let mut rows = Vec::with_capacity(sim.iterations as usize);

    for t in 0..sim.iterations {
        let (loss, grad) = honest_loss_grad(sim.objective.as_ref(), honest_data, &theta);
        let acc = accuracy(sim.objective.as_ref(), &theta, &sim.test_data);
        let gap = loss_star.map(|star| loss - star);
        let eps = match &sim.accounting {
            Some((params, assignment)) => {
                let stepped = PrivacyParams {
                    steps: t + 1,
                    ..*params
                };
                Some(secldp_epsilon(&stepped, assignment)?.0)
            }
            None => None,
        };
        rows.push(TraceRow {
            t,
            loss,
            grad_norm_sq: linalg::norm_sq(&grad),
            accuracy: acc,
            gap,
            eps_so_far: eps,
        });
        if t == theta_hat_index {
            theta_hat = theta.clone();
        }

        let beta_prev = if t == 0 { 0.0 } else { sim.schedule.at(t - 1).1 };
        let pipeline: Vec<Option<Result<Vec<f64>, SimulationError>>> = pool.install(|| {
            (0..n)
                .into_par_iter()
                .map(|id| {
                    let is_malicious = id >= honest_count;
                    if is_malicious && sim.attack.kind.is_message_level() {
                        return None;
                    }
                    if t == 0 {
                        return Some(Ok(vec![0.0; d]));
                    }
                    Some(pipeline_momentum(
                        sim,
                        registry.as_ref(),
                        &data[id],
                        id,
                        t,
                        &theta,
                        &momentums[id],
                        beta_prev,
                        is_malicious && sim.attack.kind == AttackKind::SignFlip,
                    ))
                })
                .collect()
        });

        let mut messages: Vec<Vec<f64>> = vec![Vec::new(); n];
        for (id, slot) in pipeline.into_iter().enumerate() {
            if let Some(result) = slot {
                let momentum = result?;
                momentums[id] = momentum.clone();
                messages[id] = momentum;
            }
        }
        if f > 0 && sim.attack.kind.is_message_level() {
            let honest_view = UpdateBatch::new(messages[..honest_count].to_vec())?;
            let crafted = craft(&sim.attack, &honest_view, f)?;
            for (slot, msg) in messages[honest_count..].iter_mut().zip(crafted) {
                *slot = msg;
            }
        }

        let batch = UpdateBatch::new(messages)?;
        let update = sim
            .aggregator
            .apply(&batch, f, crate::rng::mix_labels(&[sim.seed, t]))?;
        let (gamma, _) = sim.schedule.at(t);
        linalg::axpy(&mut theta, -gamma, &update);
    }

    Ok(RunTrace {
        rows,
        theta_hat,
        theta_hat_index,
        final_theta: theta,
        loss_star,
    })
}

/// Honest-loss gap of the sampled iterate against the task minimum.
pub fn robustness_gap(
    objective: &dyn Objective,
    honest: &[Dataset],
    trace: &RunTrace,
) -> Result<f64, SimulationError> {
    let star = trace
        .loss_star
        .or_else(|| objective.loss_star(honest))
        .ok_or_else(|| {
            SimulationError::UnsupportedMetric(
                "task does not expose its honest-loss infimum".into(),
            )
        })?;
    let (loss, _) = honest_loss_grad(objective, honest, &trace.theta_hat);
    Ok(loss - star)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::task::synthetic_quadratic_data;

    fn quadratic_sim(n: usize, corrupt: usize, seed: u64) -> Simulation {
        let d = 3;
        let data = synthetic_quadratic_data(n, 12, d, 1.5, 0.5, seed);
        let task = QuadraticTask::with_spectrum(d, 1.0, 1.0);
        Simulation {
            seed,
            n,
            corrupt,
            batch_size: 6,
            clip_threshold: 50.0,
            iterations: 40,
            aggregator: AggregatorKind::Mean,
            attack: AttackSpec::none(),
            noise: NoisePlan::disabled(d),
            schedule: Schedule::constant(0.4, 0.5).unwrap(),
            objective: Arc::new(task),
            worker_data: data,
            test_data: Vec::new(),
            theta0: vec![5.0; d],
            accounting: None,
            compute_gap: true,
            threads: 1,
        }
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip(&[3.0, 4.0], 10.0), vec![3.0, 4.0]);
        let c = clip(&[3.0, 4.0], 1.0);
        assert!((c[0] - 0.6).abs() < 1e-15);
        assert!((c[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip(&[0.0, 0.0], 2.0), vec![0.0, 0.0]);
    }

    #[test]
    fn first_iteration_momentum_is_zero() {
        let mut sim = quadratic_sim(4, 0, 3);
        sim.iterations = 1;
        let trace = run(&sim).unwrap();
        // R_0 = 0, so the model does not move.
        assert_eq!(trace.final_theta, sim.theta0);
    }

    #[test]
    fn momentum_inherits_previous_value_with_beta_one() {
        let mut sim = quadratic_sim(3, 0, 4);
        sim.schedule = Schedule::constant(0.1, 1.0).unwrap();
        sim.iterations = 5;
        let trace = run(&sim).unwrap();
        // beta = 1 freezes momentum at m_1 = 0 * prev + 0 * grad... m_1 uses
        // beta_0 = 1, so m stays identically zero and theta never moves.
        assert_eq!(trace.final_theta, sim.theta0);
    }

    #[test]
    fn converges_on_quadratic_without_interference() {
        let sim = quadratic_sim(6, 0, 5);
        let trace = run(&sim).unwrap();
        let first = trace.rows.first().unwrap().gap.unwrap();
        let last = trace.rows.last().unwrap().gap.unwrap();
        assert!(last < 1e-2 * first, "gap {first} -> {last}");
    }

    #[test]
    fn identical_seeds_identical_traces() {
        let sim = quadratic_sim(5, 1, 6);
        let a = run(&sim).unwrap();
        let b = run(&sim).unwrap();
        assert_eq!(a.final_theta, b.final_theta);
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut sim = quadratic_sim(7, 2, 7);
        sim.attack = AttackSpec {
            kind: AttackKind::Alie,
            strength: 1.06,
        };
        sim.noise = NoisePlan::new(0.01, 0.01, 3).unwrap();
        let single = run(&sim).unwrap();
        sim.threads = 4;
        let multi = run(&sim).unwrap();
        assert_eq!(single.final_theta, multi.final_theta);
    }

    #[test]
    fn caf_equals_mean_with_no_corruption() {
        let mut sim = quadratic_sim(6, 0, 8);
        sim.batch_size = 12; // full batch keeps both paths on exact gradients
        let mean_trace = run(&sim).unwrap();
        sim.aggregator = AggregatorKind::Caf;
        let caf_trace = run(&sim).unwrap();
        for (a, b) in mean_trace.final_theta.iter().zip(&caf_trace.final_theta) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn attack_kind_does_not_leak_into_honest_state_or_clean_runs() {
        // f = 0: any attack spec must leave the trajectory bit-identical to
        // an attack-free run.
        let mut sim = quadratic_sim(5, 0, 9);
        let clean = run(&sim).unwrap();
        sim.attack = AttackSpec {
            kind: AttackKind::Foe,
            strength: 3.0,
        };
        let attacked = run(&sim).unwrap();
        assert_eq!(clean.final_theta, attacked.final_theta);
    }

    #[test]
    fn honest_first_momentum_is_attack_independent() {
        // theta_1 = theta_0 regardless of attack, so honest momentums at
        // t = 1 must agree bit for bit across attack kinds; malicious input
        // reaches honest workers only through the aggregate. The t=1 row is
        // recorded before any malicious message was aggregated.
        let mut traces = Vec::new();
        for kind in [AttackKind::Alie, AttackKind::Foe, AttackKind::SignFlip] {
            let mut sim = quadratic_sim(6, 2, 10);
            sim.iterations = 2;
            sim.aggregator = AggregatorKind::Caf;
            sim.attack = AttackSpec {
                kind,
                strength: 1.0,
            };
            traces.push(run(&sim).unwrap());
        }
        let reference = &traces[0].rows[1];
        for trace in &traces[1..] {
            assert_eq!(trace.rows[1].loss.to_bits(), reference.loss.to_bits());
        }
    }

    #[test]
    fn first_momentum_is_the_noisy_gradient_and_sign_flip_negates_it() {
        // With beta_0 = 0, no noise, and single-point datasets, the t = 1
        // momentum of worker i is exactly its clipped gradient, and a
        // sign-flipping malicious worker sends its negation. The t = 2
        // model is then theta0 - gamma * mean(messages).
        let task = QuadraticTask::with_spectrum(2, 1.0, 1.0);
        let points = [[1.0, 0.0], [0.0, 1.0], [4.0, 4.0]];
        let worker_data: Vec<Dataset> = points
            .iter()
            .map(|p| {
                vec![Example {
                    x: p.to_vec(),
                    y: 0,
                }]
            })
            .collect();
        let sim = Simulation {
            seed: 1,
            n: 3,
            corrupt: 1,
            batch_size: 1,
            clip_threshold: 100.0,
            iterations: 2,
            aggregator: AggregatorKind::Mean,
            attack: AttackSpec {
                kind: AttackKind::SignFlip,
                strength: 1.0,
            },
            noise: NoisePlan::disabled(2),
            schedule: Schedule::constant(0.5, 0.0).unwrap(),
            objective: Arc::new(task),
            worker_data,
            test_data: Vec::new(),
            theta0: vec![0.0, 0.0],
            accounting: None,
            compute_gap: false,
            threads: 1,
        };
        let trace = run(&sim).unwrap();
        // Gradients at theta1 = theta0: (-1,0), (0,-1); flipped (4,4).
        // Mean message (1,1); theta2 = -gamma * (1,1).
        assert!((trace.final_theta[0] + 0.5).abs() < 1e-12);
        assert!((trace.final_theta[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn sign_flip_hurts_plain_mean_but_not_caf() {
        let make = |aggregator| {
            let mut sim = quadratic_sim(9, 3, 11);
            sim.iterations = 60;
            sim.aggregator = aggregator;
            sim.attack = AttackSpec {
                kind: AttackKind::SignFlip,
                strength: 1.0,
            };
            run(&sim).unwrap()
        };
        let mean_gap = make(AggregatorKind::Mean).rows.last().unwrap().gap.unwrap();
        let caf_gap = make(AggregatorKind::Caf).rows.last().unwrap().gap.unwrap();
        assert!(
            caf_gap < mean_gap,
            "caf gap {caf_gap} should beat mean gap {mean_gap}"
        );
    }

    #[test]
    fn batch_size_larger_than_dataset_is_rejected() {
        let mut sim = quadratic_sim(4, 0, 12);
        sim.batch_size = 1000;
        assert!(matches!(
            run(&sim),
            Err(SimulationError::InvalidConfig(_))
        ));
    }

    #[test]
    fn iterate_sampling_is_uniform() {
        let total = 16u64;
        let mut counts = vec![0u32; total as usize];
        let draws = 10_000u64;
        for seed in 0..draws {
            counts[sample_iterate_index(seed, total) as usize] += 1;
        }
        let expect = draws as f64 / total as f64;
        let sigma = (draws as f64 * (1.0 / total as f64) * (1.0 - 1.0 / total as f64)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expect).abs() <= 3.0 * sigma,
                "index {i}: {c} vs {expect}"
            );
        }
    }

    #[test]
    fn robustness_gap_examples() {
        // theta_hat at the exact minimizer gives gap 0; a unit offset on a
        // unit quadratic gives 0.5.
        let data = vec![vec![Example {
            x: vec![0.0, 0.0],
            y: 0,
        }]];
        let task = QuadraticTask::with_spectrum(2, 1.0, 1.0);
        let trace = RunTrace {
            rows: Vec::new(),
            theta_hat: vec![0.0, 0.0],
            theta_hat_index: 0,
            final_theta: vec![0.0, 0.0],
            loss_star: None,
        };
        assert_eq!(robustness_gap(&task, &data, &trace).unwrap(), 0.0);

        let trace_off = RunTrace {
            theta_hat: vec![1.0, 0.0],
            ..trace
        };
        let gap = robustness_gap(&task, &data, &trace_off).unwrap();
        assert!((gap - 0.5).abs() < 1e-12);
        assert!(gap >= 0.0);
    }

    #[test]
    fn label_flip_changes_malicious_data_only() {
        let blobs = crate::training::task::synthetic_blobs(4, 3, 40, 3.0, 0.3, 13);
        let shares = partition(&blobs, 5, PartitionScheme::Iid, 13).unwrap();
        let task = LogisticTask::new(4, 3, 1e-3, &[&shares[0]]);
        let sim = Simulation {
            seed: 13,
            n: 5,
            corrupt: 2,
            batch_size: 4,
            clip_threshold: 10.0,
            iterations: 3,
            aggregator: AggregatorKind::Caf,
            attack: AttackSpec {
                kind: AttackKind::LabelFlip,
                strength: 0.0,
            },
            noise: NoisePlan::disabled(task.dim()),
            schedule: Schedule::constant(0.5, 0.0).unwrap(),
            objective: Arc::new(task),
            worker_data: shares.clone(),
            test_data: Vec::new(),
            theta0: vec![0.0; 4 * 4],
            accounting: None,
            compute_gap: false,
            threads: 1,
        };
        let _ = run(&sim).unwrap();
        // The caller's datasets are untouched.
        for (original, current) in shares.iter().zip(&sim.worker_data) {
            assert_eq!(original, current);
        }
    }
}
