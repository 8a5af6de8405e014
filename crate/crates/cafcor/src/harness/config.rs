//! Experiment configuration: parsing, validation, and resolution into a
//! runnable simulation.
//!
//! Two on-disk shapes map to the same schema: a JSON document, or flat
//! `dotted.key = value` lines (comments start with `#`). Validation errors
//! name the offending key path.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::idx::{load_idx_dataset, Normalization};
use super::HarnessError;
use crate::aggregation::AggregatorKind;
use crate::attacks::{AttackKind, AttackSpec};
use crate::noise::NoisePlan;
use crate::privacy::{calibrate, NoiseAssignment, NoiseRegime, PrivacyParams};
use crate::training::task::{
    synthetic_blobs, synthetic_quadratic_data, Dataset, LogisticTask, MlpTask, Objective,
    QuadraticTask,
};
use crate::training::{
    default_sigma_bar, partition, sigma_batch_sq, PartitionScheme, Schedule, Simulation,
};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub config_version: u32,
    pub seed: u64,
    pub n: usize,
    pub f: usize,
    #[serde(default)]
    pub q: usize,
    pub batch_size: usize,
    pub clip: f64,
    pub iterations: u64,
    pub task: TaskConfig,
    #[serde(default)]
    pub partition: Option<PartitionConfig>,
    pub aggregator: String,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub privacy: Option<PrivacyConfig>,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub compute_gap: Option<bool>,
    #[serde(default)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: String,
    // quadratic
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points_per_worker: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curvature_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curvature_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_spread: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_noise: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0_offset: Option<f64>,
    // classification
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: String,
    // blobs
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scatter: Option<f64>,
    // idx files
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit_train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit_test: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalize: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_horizontal: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub scheme: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strength: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    /// `off`, `explicit`, or `target`.
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_cor_sq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_ind_sq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<String>,
    /// `user` (default) or `example`; example-level reinterprets the
    /// sensitivity as the per-example share `C / b` of the clip threshold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_bar: Option<f64>,
    /// Per-worker gradient standard deviation estimate feeding the default
    /// sigma_bar; the clip threshold is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

fn invalid(key: &str, message: impl Into<String>) -> HarnessError {
    HarnessError::Validation {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Parse a config from text; JSON when it starts with `{`, flat key-value
/// lines otherwise.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let trimmed = text.trim_start();
    let value: Value = if trimmed.starts_with('{') {
        serde_json::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?
    } else {
        flat_to_value(text)?
    };
    serde_json::from_value(value).map_err(|e| HarnessError::Parse(e.to_string()))
}

pub fn parse_config_file(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

/// Canonical serialized form, used by the round-trip contract.
pub fn to_canonical_json(config: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(config).expect("config serializes")
}

fn flat_to_value(text: &str) -> Result<Value, HarnessError> {
    let mut root = serde_json::Map::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            HarnessError::Parse(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(HarnessError::Parse(format!("line {}: empty key", lineno + 1)));
        }
        let parsed: Value = serde_json::from_str(value)
            .unwrap_or_else(|_| Value::String(value.to_string()));
        insert_path(&mut root, key, parsed).map_err(|msg| {
            HarnessError::Parse(format!("line {}: {msg}", lineno + 1))
        })?;
    }
    Ok(Value::Object(root))
}

fn insert_path(
    root: &mut serde_json::Map<String, Value>,
    dotted: &str,
    value: Value,
) -> Result<(), String> {
    let mut map = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let entry = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(serde_json::Map::new()));
        map = entry
            .as_object_mut()
            .ok_or_else(|| format!("key `{dotted}` conflicts with a scalar value"))?;
    }
    let leaf = parts[parts.len() - 1];
    if map.contains_key(leaf) {
        return Err(format!("duplicate key `{dotted}`"));
    }
    map.insert(leaf.to_string(), value);
    Ok(())
}

/// A resolved experiment: the simulation plus presentation context.
pub struct ResolvedExperiment {
    pub simulation: Simulation,
    pub config: ExperimentConfig,
    /// Calibrated or explicit noise, when privacy is on.
    pub assignment: Option<NoiseAssignment>,
}

fn resolve_partition_scheme(
    config: &ExperimentConfig,
) -> Result<Option<PartitionScheme>, HarnessError> {
    let Some(p) = &config.partition else {
        return Ok(None);
    };
    let scheme = match p.scheme.as_str() {
        "iid" => PartitionScheme::Iid,
        "dirichlet" => {
            let alpha = p
                .alpha
                .ok_or_else(|| invalid("partition.alpha", "required for dirichlet"))?;
            if alpha.is_nan() || alpha <= 0.0 {
                return Err(invalid("partition.alpha", "must be positive"));
            }
            PartitionScheme::Dirichlet { alpha }
        }
        "extreme" => PartitionScheme::Extreme,
        other => {
            return Err(invalid(
                "partition.scheme",
                format!("unknown scheme `{other}` (expected iid, dirichlet, or extreme)"),
            ))
        }
    };
    Ok(Some(scheme))
}

struct LoadedData {
    train: Dataset,
    test: Dataset,
    features: usize,
    classes: usize,
}

fn load_classification_data(
    task: &TaskConfig,
    seed: u64,
) -> Result<LoadedData, HarnessError> {
    let data = task
        .data
        .as_ref()
        .ok_or_else(|| invalid("task.data", "required for classification tasks"))?;
    match data.source.as_str() {
        "blobs" => {
            let classes = task.classes.unwrap_or(10);
            let features = data
                .features
                .ok_or_else(|| invalid("task.data.features", "required for blobs"))?;
            let train = data
                .train
                .ok_or_else(|| invalid("task.data.train", "required for blobs"))?;
            let test = data.test.unwrap_or(train / 5);
            let separation = data.separation.unwrap_or(3.0);
            let scatter = data.scatter.unwrap_or(1.0);
            let all = synthetic_blobs(classes, features, train + test, separation, scatter, seed);
            let test_set = all[train..].to_vec();
            let train_set = all[..train].to_vec();
            Ok(LoadedData {
                train: train_set,
                test: test_set,
                features,
                classes,
            })
        }
        "idx" => {
            let classes = task.classes.unwrap_or(10);
            let need = |field: &Option<String>, key: &str| {
                field
                    .clone()
                    .ok_or_else(|| invalid(key, "required for idx data"))
            };
            let train_images = need(&data.train_images, "task.data.train_images")?;
            let train_labels = need(&data.train_labels, "task.data.train_labels")?;
            let normalization = match data.normalize.as_deref() {
                Some("mnist") | None => Normalization::Mnist,
                Some("unit") => Normalization::Unit,
                Some(other) => {
                    return Err(invalid(
                        "task.data.normalize",
                        format!("unknown normalization `{other}` (expected mnist or unit)"),
                    ))
                }
            };
            let flip = data.flip_horizontal.unwrap_or(false);
            let train = load_idx_dataset(
                Path::new(&train_images),
                Path::new(&train_labels),
                normalization,
                flip,
                data.limit_train,
            )?;
            let test = match (&data.test_images, &data.test_labels) {
                (Some(ti), Some(tl)) => load_idx_dataset(
                    Path::new(ti),
                    Path::new(tl),
                    normalization,
                    flip,
                    data.limit_test,
                )?,
                _ => Vec::new(),
            };
            let features = train
                .first()
                .map(|e| e.x.len())
                .ok_or_else(|| invalid("task.data.limit_train", "train set is empty"))?;
            Ok(LoadedData {
                train,
                test,
                features,
                classes,
            })
        }
        other => Err(invalid(
            "task.data.source",
            format!("unknown source `{other}` (expected blobs or idx)"),
        )),
    }
}

/// Validate the parsed config and build the simulation it describes.
pub fn resolve(config: &ExperimentConfig) -> Result<ResolvedExperiment, HarnessError> {
    if config.config_version != CONFIG_VERSION {
        return Err(invalid(
            "config_version",
            format!("expected {CONFIG_VERSION}, got {}", config.config_version),
        ));
    }
    if config.n == 0 {
        return Err(invalid("n", "need at least one worker"));
    }
    if 2 * config.f >= config.n {
        return Err(invalid("f", format!("must satisfy 2f < n = {}", config.n)));
    }
    if config.q > config.f {
        return Err(invalid("q", format!("must not exceed f = {}", config.f)));
    }
    if config.batch_size == 0 {
        return Err(invalid("batch_size", "must be at least 1"));
    }
    if config.clip.is_nan() || config.clip <= 0.0 {
        return Err(invalid("clip", "must be positive"));
    }
    if config.iterations == 0 {
        return Err(invalid("iterations", "must be at least 1"));
    }

    let aggregator = AggregatorKind::parse(&config.aggregator).ok_or_else(|| {
        invalid(
            "aggregator",
            format!(
                "unknown aggregator `{}` (expected mean, caf, caf_power, cwtm, cwmed, gm, multikrum, or meamed)",
                config.aggregator
            ),
        )
    })?;

    let attack = match &config.attack {
        None => AttackSpec::none(),
        Some(a) => {
            let kind = AttackKind::parse(&a.kind).ok_or_else(|| {
                invalid(
                    "attack.kind",
                    format!("unknown attack `{}` (expected none, alie, foe, lf, or sf)", a.kind),
                )
            })?;
            let strength = a.strength.unwrap_or(match kind {
                AttackKind::Alie => AttackSpec::DEFAULT_ALIE_STRENGTH,
                AttackKind::Foe => AttackSpec::DEFAULT_FOE_STRENGTH,
                _ => 0.0,
            });
            if !strength.is_finite() {
                return Err(invalid("attack.strength", "must be finite"));
            }
            AttackSpec { kind, strength }
        }
    };

    let scheme = resolve_partition_scheme(config)?;

    // Task, datasets, and initial model.
    enum Built {
        Quadratic(QuadraticTask),
        Logistic(LogisticTask),
        Mlp(MlpTask),
    }
    let (built, worker_data, test_data, theta0) = match config.task.kind.as_str() {
        "quadratic" => {
            let d = config
                .task
                .d
                .ok_or_else(|| invalid("task.d", "required for quadratic"))?;
            if d == 0 {
                return Err(invalid("task.d", "must be at least 1"));
            }
            if let Some(s) = &scheme {
                if *s != PartitionScheme::Iid {
                    return Err(invalid(
                        "partition.scheme",
                        "quadratic data is synthesized per worker; only iid is meaningful",
                    ));
                }
            }
            let m = config.task.points_per_worker.unwrap_or(32);
            if m == 0 {
                return Err(invalid("task.points_per_worker", "must be at least 1"));
            }
            let cmin = config.task.curvature_min.unwrap_or(1.0);
            let cmax = config.task.curvature_max.unwrap_or(cmin);
            if !(cmin > 0.0 && cmax >= cmin) {
                return Err(invalid(
                    "task.curvature_max",
                    "need 0 < curvature_min <= curvature_max",
                ));
            }
            let spread = config.task.center_spread.unwrap_or(1.0);
            let noise = config.task.point_noise.unwrap_or(0.25);
            let offset = config.task.theta0_offset.unwrap_or(5.0);
            let data =
                synthetic_quadratic_data(config.n, m, d, spread, noise, config.seed);
            let task = QuadraticTask::with_spectrum(d, cmin, cmax);
            let theta0 = vec![offset; d];
            (Built::Quadratic(task), data, Vec::new(), theta0)
        }
        "logistic" | "mlp" => {
            let loaded = load_classification_data(&config.task, config.seed)?;
            if loaded.classes < 2 {
                return Err(invalid("task.classes", "need at least 2 classes"));
            }
            for (i, ex) in loaded.train.iter().enumerate() {
                if ex.y >= loaded.classes {
                    return Err(invalid(
                        "task.classes",
                        format!("train example {i} has label {} >= classes", ex.y),
                    ));
                }
            }
            let scheme = scheme.unwrap_or(PartitionScheme::Iid);
            let shares = partition(&loaded.train, config.n, scheme, config.seed)
                .map_err(|e| invalid("partition.scheme", e.to_string()))?;
            if config.task.kind == "logistic" {
                let l2 = config.task.l2.unwrap_or(1e-4);
                if l2 < 0.0 {
                    return Err(invalid("task.l2", "must be nonnegative"));
                }
                let refs: Vec<&Dataset> = shares.iter().collect();
                let task = LogisticTask::new(loaded.classes, loaded.features, l2, &refs);
                let theta0 = vec![0.0; task.dim()];
                (Built::Logistic(task), shares, loaded.test, theta0)
            } else {
                let hidden = config
                    .task
                    .hidden
                    .ok_or_else(|| invalid("task.hidden", "required for mlp"))?;
                if hidden == 0 {
                    return Err(invalid("task.hidden", "must be at least 1"));
                }
                let task = MlpTask::new(loaded.features, hidden, loaded.classes);
                let theta0 = task.init_theta(config.seed);
                (Built::Mlp(task), shares, loaded.test, theta0)
            }
        }
        other => {
            return Err(invalid(
                "task.kind",
                format!("unknown task `{other}` (expected quadratic, logistic, or mlp)"),
            ))
        }
    };

    let objective: Arc<dyn crate::training::Objective> = match built {
        Built::Quadratic(t) => Arc::new(t),
        Built::Logistic(t) => Arc::new(t),
        Built::Mlp(t) => Arc::new(t),
    };
    let dim = objective.dim();

    // Noise plan and accountant context.
    let (noise, accounting, assignment) = match &config.privacy {
        None => (NoisePlan::disabled(dim), None, None),
        Some(p) => match p.mode.as_str() {
            "off" => (NoisePlan::disabled(dim), None, None),
            "explicit" => {
                let cor = p
                    .sigma_cor_sq
                    .ok_or_else(|| invalid("privacy.sigma_cor_sq", "required for explicit"))?;
                let ind = p
                    .sigma_ind_sq
                    .ok_or_else(|| invalid("privacy.sigma_ind_sq", "required for explicit"))?;
                let plan = NoisePlan::new(cor, ind, dim)
                    .map_err(|e| invalid("privacy.sigma_cor_sq", e.to_string()))?;
                let assignment = NoiseAssignment {
                    sigma_cor_sq: cor,
                    sigma_ind_sq: ind,
                    regime: NoiseRegime::Equal,
                };
                let accounting = p.delta.map(|delta| {
                    (
                        PrivacyParams {
                            epsilon: 0.0, // unused by composition
                            delta,
                            steps: config.iterations,
                            clip: effective_clip(config, p),
                            n: config.n,
                            corrupt: config.f,
                            colluding: config.q,
                        },
                        assignment,
                    )
                });
                (plan, accounting, Some(assignment))
            }
            "target" => {
                let epsilon = p
                    .epsilon
                    .ok_or_else(|| invalid("privacy.epsilon", "required for target"))?;
                let delta = p
                    .delta
                    .ok_or_else(|| invalid("privacy.delta", "required for target"))?;
                let regime = match p.regime.as_deref() {
                    None => NoiseRegime::Equal,
                    Some(name) => NoiseRegime::parse(name).ok_or_else(|| {
                        invalid(
                            "privacy.regime",
                            format!(
                                "unknown regime `{name}` (expected equal, ldp, or no_independent)"
                            ),
                        )
                    })?,
                };
                match p.level.as_deref() {
                    None | Some("user") | Some("example") => {}
                    Some(other) => {
                        return Err(invalid(
                            "privacy.level",
                            format!("unknown level `{other}` (expected user or example)"),
                        ))
                    }
                }
                let params = PrivacyParams {
                    epsilon,
                    delta,
                    steps: config.iterations,
                    clip: effective_clip(config, p),
                    n: config.n,
                    corrupt: config.f,
                    colluding: config.q,
                };
                let assignment = calibrate(&params, regime)?;
                let plan = NoisePlan::new(assignment.sigma_cor_sq, assignment.sigma_ind_sq, dim)
                    .map_err(|e| invalid("privacy.epsilon", e.to_string()))?;
                (plan, Some((params, assignment)), Some(assignment))
            }
            other => {
                return Err(invalid(
                    "privacy.mode",
                    format!("unknown mode `{other}` (expected off, explicit, or target)"),
                ))
            }
        },
    };

    // Schedule.
    let schedule = match config.schedule.kind.as_str() {
        "strongly_convex" => {
            let mu = config
                .schedule
                .mu
                .or_else(|| objective.strong_convexity())
                .ok_or_else(|| {
                    invalid("schedule.mu", "task exposes no strong convexity; set it")
                })?;
            let l = config
                .schedule
                .l
                .or_else(|| objective.smoothness())
                .ok_or_else(|| invalid("schedule.l", "task exposes no smoothness; set it"))?;
            Schedule::strongly_convex(mu, l)
                .map_err(|e| invalid("schedule.mu", e.to_string()))?
        }
        "nonconvex" => {
            let l = config
                .schedule
                .l
                .or_else(|| objective.smoothness())
                .ok_or_else(|| invalid("schedule.l", "task exposes no smoothness; set it"))?;
            let loss_gap = config
                .schedule
                .loss_gap
                .ok_or_else(|| invalid("schedule.loss_gap", "required for nonconvex"))?;
            let sigma_bar = config.schedule.sigma_bar.unwrap_or_else(|| {
                let sigma = config.schedule.sigma.unwrap_or(config.clip);
                let m = worker_data
                    .iter()
                    .map(Vec::len)
                    .min()
                    .unwrap_or(config.batch_size)
                    .max(config.batch_size);
                default_sigma_bar(
                    sigma_batch_sq(sigma * sigma, config.batch_size, m),
                    dim,
                    config.f,
                    config.n,
                    noise.sigma_cor_sq,
                    noise.sigma_ind_sq,
                )
            });
            Schedule::non_convex(l, loss_gap, sigma_bar, config.iterations)
                .map_err(|e| invalid("schedule.loss_gap", e.to_string()))?
        }
        "constant" => {
            let gamma = config
                .schedule
                .gamma
                .ok_or_else(|| invalid("schedule.gamma", "required for constant"))?;
            let beta = config
                .schedule
                .beta
                .ok_or_else(|| invalid("schedule.beta", "required for constant"))?;
            Schedule::constant(gamma, beta).map_err(|e| invalid("schedule.gamma", e.to_string()))?
        }
        other => {
            return Err(invalid(
                "schedule.kind",
                format!(
                    "unknown schedule `{other}` (expected strongly_convex, nonconvex, or constant)"
                ),
            ))
        }
    };

    let compute_gap = config
        .compute_gap
        .unwrap_or(config.task.kind == "quadratic");

    let simulation = Simulation {
        seed: config.seed,
        n: config.n,
        corrupt: config.f,
        batch_size: config.batch_size,
        clip_threshold: config.clip,
        iterations: config.iterations,
        aggregator,
        attack,
        noise,
        schedule,
        objective,
        worker_data,
        test_data,
        theta0,
        accounting,
        compute_gap,
        threads: config.threads.unwrap_or(0),
    };
    Ok(ResolvedExperiment {
        simulation,
        config: config.clone(),
        assignment,
    })
}

fn effective_clip(config: &ExperimentConfig, privacy: &PrivacyConfig) -> f64 {
    match privacy.level.as_deref() {
        Some("example") => config.clip / config.batch_size as f64,
        _ => config.clip,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FLAT: &str = r#"
# quadratic smoke config
config_version = 1
seed = 7
n = 6
f = 1
q = 0
batch_size = 8
clip = 10.0
iterations = 25
task.kind = quadratic
task.d = 3
task.points_per_worker = 16
aggregator = caf
attack.kind = alie
schedule.kind = strongly_convex
"#;

    #[test]
    fn flat_and_json_agree() {
        let from_flat = parse_config_str(FLAT).unwrap();
        let json = to_canonical_json(&from_flat);
        let from_json = parse_config_str(&json).unwrap();
        assert_eq!(from_flat, from_json);
    }

    #[test]
    fn round_trip_preserves_all_keys() {
        let config = parse_config_str(FLAT).unwrap();
        let reparsed = parse_config_str(&to_canonical_json(&config)).unwrap();
        assert_eq!(
            to_canonical_json(&config),
            to_canonical_json(&reparsed)
        );
    }

    #[test]
    fn flat_rejects_duplicate_keys() {
        let text = "config_version = 1\nconfig_version = 2\n";
        assert!(matches!(
            parse_config_str(text),
            Err(HarnessError::Parse(_))
        ));
    }

    #[test]
    fn unknown_aggregator_names_the_key() {
        let mut config = parse_config_str(FLAT).unwrap();
        config.aggregator = "bogus".into();
        match resolve(&config) {
            Err(HarnessError::Validation { key, .. }) => assert_eq!(key, "aggregator"),
            Err(other) => panic!("expected validation error, got {other:?}"),
            Ok(_) => panic!("expected validation error, got a resolved experiment"),
        }
    }

    #[test]
    fn invalid_f_names_the_key() {
        let mut config = parse_config_str(FLAT).unwrap();
        config.f = 3; // 2*3 >= 6
        match resolve(&config) {
            Err(HarnessError::Validation { key, .. }) => assert_eq!(key, "f"),
            Err(other) => panic!("expected validation error, got {other:?}"),
            Ok(_) => panic!("expected validation error, got a resolved experiment"),
        }
    }

    #[test]
    fn resolves_runnable_simulation() {
        let config = parse_config_str(FLAT).unwrap();
        let resolved = resolve(&config).unwrap();
        let trace = crate::training::run(&resolved.simulation).unwrap();
        assert_eq!(trace.rows.len(), 25);
    }

    #[test]
    fn target_privacy_calibrates_and_accounts() {
        let text = format!(
            "{FLAT}privacy.mode = target\nprivacy.epsilon = 2.0\nprivacy.delta = 1e-4\nprivacy.regime = equal\n"
        );
        let config = parse_config_str(&text).unwrap();
        let resolved = resolve(&config).unwrap();
        let a = resolved.assignment.unwrap();
        assert!(a.sigma_cor_sq > 0.0);
        let trace = crate::training::run(&resolved.simulation).unwrap();
        let eps = trace.rows.last().unwrap().eps_so_far.unwrap();
        assert!(eps <= 2.0 + 1e-9, "eps={eps}");
    }

    #[test]
    fn example_level_divides_sensitivity_by_batch() {
        let base = format!(
            "{FLAT}privacy.mode = target\nprivacy.epsilon = 2.0\nprivacy.delta = 1e-4\n"
        );
        let user = resolve(&parse_config_str(&base).unwrap()).unwrap();
        let example = resolve(
            &parse_config_str(&format!("{base}privacy.level = example\n")).unwrap(),
        )
        .unwrap();
        let ratio = user.assignment.unwrap().sigma_ind_sq
            / example.assignment.unwrap().sigma_ind_sq;
        let b = 8.0f64;
        assert!((ratio - b * b).abs() < 1e-6 * ratio);
    }

    #[test]
    fn mlp_config_runs_the_nonconvex_path() {
        let text = r#"
config_version = 1
seed = 6
n = 4
f = 0
batch_size = 20
clip = 5.0
iterations = 30
task.kind = mlp
task.classes = 3
task.hidden = 8
task.data.source = blobs
task.data.features = 5
task.data.train = 240
task.data.test = 60
task.data.separation = 3.0
task.data.scatter = 0.6
aggregator = mean
schedule.kind = nonconvex
schedule.l = 2.0
schedule.loss_gap = 2.0
schedule.sigma_bar = 0.5
"#;
        let config = parse_config_str(text).unwrap();
        let resolved = resolve(&config).unwrap();
        let trace = crate::training::run(&resolved.simulation).unwrap();
        let first = trace.rows.first().unwrap();
        let last = trace.rows.last().unwrap();
        assert!(last.loss < first.loss, "mlp loss should drop");
        assert!(last.accuracy.unwrap() > first.accuracy.unwrap());
    }

    #[test]
    fn blobs_logistic_config_resolves() {
        let text = r#"
config_version = 1
seed = 3
n = 5
f = 1
batch_size = 10
clip = 2.0
iterations = 5
task.kind = logistic
task.classes = 3
task.l2 = 0.001
task.data.source = blobs
task.data.features = 4
task.data.train = 200
partition.scheme = dirichlet
partition.alpha = 5.0
aggregator = cwmed
schedule.kind = constant
schedule.gamma = 0.5
schedule.beta = 0.9
"#;
        let config = parse_config_str(text).unwrap();
        let resolved = resolve(&config).unwrap();
        let trace = crate::training::run(&resolved.simulation).unwrap();
        assert_eq!(trace.rows.len(), 5);
        assert!(trace.rows[0].accuracy.is_some());
    }
}
