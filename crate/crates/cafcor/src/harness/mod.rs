//! Configuration, dataset ingestion, trace output, and the synthetic
//! aggregator bench backing the command-line tool.

pub mod config;
pub mod idx;

pub use config::{
    parse_config_file, parse_config_str, resolve, to_canonical_json, ExperimentConfig,
    ResolvedExperiment,
};
pub use idx::{load_idx_dataset, read_idx_images, read_idx_labels, IdxError, Normalization};

use serde::Serialize;
use thiserror::Error;

use crate::aggregation::{caf_full, certify, AggregatorKind, EigenMode, UpdateBatch};
use crate::linalg;
use crate::privacy::PrivacyError;
use crate::rng::KeyedStream;
use crate::training::{RunTrace, SimulationError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config key `{key}`: {message}")]
    Validation { key: String, message: String },
    #[error(transparent)]
    Data(#[from] IdxError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Aggregation(#[from] crate::aggregation::AggregationError),
}

/// 17 significant digits; round-trips any f64 exactly.
pub fn format_metric(value: f64) -> String {
    if value.is_nan() {
        "NaN".to_string()
    } else {
        format!("{value:.16e}")
    }
}

fn format_optional(value: Option<f64>) -> String {
    format_metric(value.unwrap_or(f64::NAN))
}

/// Render a trace as CSV with the stable schema
/// `t,loss,grad_norm_sq,accuracy,gap,eps` and LF line endings.
pub fn trace_to_csv(trace: &RunTrace) -> String {
    let mut out = String::from("t,loss,grad_norm_sq,accuracy,gap,eps\n");
    for row in &trace.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.t,
            format_metric(row.loss),
            format_metric(row.grad_norm_sq),
            format_optional(row.accuracy),
            format_optional(row.gap),
            format_optional(row.eps_so_far),
        ));
    }
    out
}

/// One line of the aggregator comparison table.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub aggregator: String,
    /// Mean distance to the honest mean across instances.
    pub mean_error: f64,
    pub worst_error: f64,
    /// Instances where the deviation certificate failed.
    pub certificate_violations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BenchConfig {
    pub n: usize,
    pub f: usize,
    pub d: usize,
    pub instances: usize,
    pub seed: u64,
}

/// Random batches with planted adversarial rows: honest rows are Gaussian,
/// adversarial rows are Gaussian scaled by factors up to 1e6. The last
/// instance plants identical honest rows, the case where the certificate's
/// right-hand side collapses to zero.
pub fn aggregate_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>, HarnessError> {
    if 2 * cfg.f >= cfg.n {
        return Err(HarnessError::Validation {
            key: "f".to_string(),
            message: format!("must satisfy 2f < n = {}", cfg.n),
        });
    }
    let aggregators = [
        AggregatorKind::Caf,
        AggregatorKind::CafPower,
        AggregatorKind::Mean,
        AggregatorKind::Cwtm,
        AggregatorKind::Cwmed,
        AggregatorKind::Gm,
        AggregatorKind::Multikrum,
        AggregatorKind::Meamed,
    ];
    let mut rows: Vec<BenchRow> = aggregators
        .iter()
        .map(|a| BenchRow {
            aggregator: a.name().to_string(),
            mean_error: 0.0,
            worst_error: 0.0,
            certificate_violations: 0,
        })
        .collect();

    let mut stream = KeyedStream::new(&[0x62656e63, cfg.seed], 0);
    for instance in 0..cfg.instances {
        let identical_honest = instance + 1 == cfg.instances;
        let honest: Vec<Vec<f64>> = if identical_honest {
            vec![vec![1.0; cfg.d]; cfg.n - cfg.f]
        } else {
            (0..cfg.n - cfg.f)
                .map(|_| (0..cfg.d).map(|_| stream.standard_normal()).collect())
                .collect()
        };
        let scale = 10f64.powi((instance % 7) as i32);
        let mut vectors = honest.clone();
        for _ in 0..cfg.f {
            vectors.push((0..cfg.d).map(|_| scale * stream.standard_normal()).collect());
        }
        let batch = UpdateBatch::new(vectors)?;
        let honest_mean = linalg::mean_rows(&honest);
        let honest_ids: Vec<usize> = (0..cfg.n - cfg.f).collect();

        for (row, aggregator) in rows.iter_mut().zip(&aggregators) {
            let out = aggregator.apply(&batch, cfg.f, cfg.seed ^ instance as u64)?;
            let err = linalg::dist_sq(&out, &honest_mean).sqrt();
            row.mean_error += err / cfg.instances as f64;
            row.worst_error = row.worst_error.max(err);
            let cert = certify(&batch, &honest_ids, &out)?;
            if !cert.holds {
                row.certificate_violations += 1;
            }
        }
    }
    Ok(rows)
}

/// Filter state dump: one JSON line per downweighting pass.
pub fn caf_trace_jsonl(
    batch: &UpdateBatch,
    corrupt_bound: usize,
    mode: EigenMode,
    seed: u64,
) -> Result<String, HarnessError> {
    let output = caf_full(batch, corrupt_bound, mode, seed)?;
    let mut out = String::new();
    for state in &output.history {
        out.push_str(&serde_json::to_string(state).expect("state serializes"));
        out.push('\n');
    }
    Ok(out)
}
