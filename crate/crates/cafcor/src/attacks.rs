//! Malicious-worker message crafting.
//!
//! Two attacks act at the message level and read the honest momentums of
//! the same iteration (the strongest adversary the threat model allows):
//! a small coordinated shift of the honest mean by a multiple of the honest
//! per-coordinate spread, and an inversion of the honest mean. Sign
//! flipping and label flipping act inside the worker pipeline instead
//! (gradient negation, label remap) and are wired up by the simulator.

use serde::Serialize;
use thiserror::Error;

use crate::aggregation::UpdateBatch;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("attack needs at least one honest momentum to observe")]
    NoHonestView,
    #[error("attack strength must be finite, got {0}")]
    InvalidStrength(f64),
}

/// Which attack the malicious workers run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    /// Shift the honest mean by `strength` per-coordinate standard
    /// deviations; blends into the honest cloud for small strengths.
    Alie,
    /// Send `-strength` times the honest mean.
    Foe,
    /// Remap labels (`y -> classes-1-y`) in the malicious datasets.
    LabelFlip,
    /// Negate the clipped gradient in the malicious pipeline.
    SignFlip,
}

impl AttackKind {
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "none" => Self::None,
            "alie" => Self::Alie,
            "foe" => Self::Foe,
            "lf" | "label_flip" => Self::LabelFlip,
            "sf" | "sign_flip" => Self::SignFlip,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Alie => "alie",
            Self::Foe => "foe",
            Self::LabelFlip => "lf",
            Self::SignFlip => "sf",
        }
    }

    /// True when the malicious message is crafted from the honest view;
    /// false when the attack runs inside the worker pipeline.
    pub fn is_message_level(&self) -> bool {
        matches!(self, Self::None | Self::Alie | Self::Foe)
    }
}

/// Attack selection plus its scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub strength: f64,
}

impl AttackSpec {
    pub fn none() -> Self {
        Self {
            kind: AttackKind::None,
            strength: 0.0,
        }
    }

    /// Common published default for the mean-shift attack.
    pub const DEFAULT_ALIE_STRENGTH: f64 = 1.06;
    /// Pure inversion of the honest mean.
    pub const DEFAULT_FOE_STRENGTH: f64 = 1.0;
}

/// Craft the `f` malicious messages from the honest momentums of the same
/// iteration. Pipeline-level attacks return copies of the honest mean here;
/// their effect happens in the worker step.
pub fn craft(
    spec: &AttackSpec,
    honest_momentums: &UpdateBatch,
    f: usize,
) -> Result<Vec<Vec<f64>>, AttackError> {
    if !spec.strength.is_finite() {
        return Err(AttackError::InvalidStrength(spec.strength));
    }
    if honest_momentums.is_empty() {
        return Err(AttackError::NoHonestView);
    }
    let d = honest_momentums.dim();
    let n_h = honest_momentums.len() as f64;

    let mut mean = vec![0.0; d];
    for row in honest_momentums.rows() {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x / n_h;
        }
    }

    let message = match spec.kind {
        AttackKind::Alie => {
            let mut std = vec![0.0; d];
            for row in honest_momentums.rows() {
                for (s, (x, m)) in std.iter_mut().zip(row.iter().zip(&mean)) {
                    *s += (x - m) * (x - m) / n_h;
                }
            }
            mean.iter()
                .zip(&std)
                .map(|(m, v)| m + spec.strength * v.sqrt())
                .collect()
        }
        AttackKind::Foe => mean.iter().map(|m| -spec.strength * m).collect(),
        AttackKind::None | AttackKind::LabelFlip | AttackKind::SignFlip => mean,
    };
    Ok(vec![message; f])
}
