use serde::{Deserialize, Serialize};

use prefrank_core::pairs::{PseudoPolicy, SamplerConfig};
use prefrank_core::EncoderConfig;

use crate::ServiceError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    /// Accepted annotations per retrain.
    pub round_size: usize,
    pub sampler: SamplerConfig,
    /// `input_dim` and `seed` are overwritten per round.
    pub encoder: EncoderConfig,
    pub train_steps: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Applied to the easy pairs of the hard+pseudo strategy.
    pub pseudo: PseudoPolicy,
    /// Pending pairs older than this return to the pool.
    pub pending_ttl_secs: u64,
    pub seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            round_size: 25,
            sampler: SamplerConfig::default(),
            encoder: EncoderConfig {
                learning_rate: 1e-2,
                ..Default::default()
            },
            train_steps: 600,
            max_epochs: 200,
            batch_size: 64,
            pseudo: PseudoPolicy::default(),
            pending_ttl_secs: 600,
            seed: 0,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), ServiceError> {
        let bad = |field: &'static str, reason: &str| {
            Err(ServiceError::Config {
                field,
                reason: reason.into(),
            })
        };
        if self.round_size == 0 {
            return bad("round_size", "must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.sampler.candidate_pool == 0 {
            return bad("sampler.candidate_pool", "must be >= 1");
        }
        if !(self.sampler.pseudo_ratio.is_finite() && self.sampler.pseudo_ratio >= 0.0) {
            return bad("sampler.pseudo_ratio", "must be finite and >= 0");
        }
        self.pseudo.validate()?;
        self.encoder.validate()?;
        Ok(())
    }
}
