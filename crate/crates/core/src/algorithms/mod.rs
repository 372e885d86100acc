//! Learner lifecycle, per-method training mathematics and the method registry.

pub mod composed;
pub mod ewc;
pub mod lifecycle;
pub mod losses;
pub mod optim;
pub mod projection;
pub mod ranpac;
pub mod rebalance;

pub use composed::ComposedLearner;
pub use ewc::{estimate_fisher_diag, ewc_penalty, ewc_penalty_grad, EwcState, FisherMode};
pub use lifecycle::{masked_argmax, Hook, Learner, LifecycleGuard, ObserveOutput, TaskInfo};
pub use losses::{cross_entropy, distill_loss, erace_masked_loss, replay_loss, Origin};
pub use projection::{
    adabop_projection, gpm_project_gradient, gpm_update_subspace, nscl_project_gradient,
    trgp_effective_weight, trgp_trust_region, SubspaceState,
};
pub use ranpac::RanpacLearner;
pub use rebalance::{bic_apply, bic_fit, icarl_classify_nme, wa_align, BiasCorrectionState};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

/// Methods implemented here.
pub const METHODS: &[&str] = &[
    "finetune", "ewc", "lwf", "er", "er_ace", "icarl", "bic", "wa", "gpm", "adam_nscl", "adabop", "trgp",
    "ranpac",
];

/// Registered but unavailable methods, with the reason shown to the user.
pub const STUBS: &[(&str, &str)] = &[
    ("l2p", "prompt-based methods need a large pretrained transformer"),
    ("dualprompt", "prompt-based methods need a large pretrained transformer"),
    ("codaprompt", "prompt-based methods need a large pretrained transformer"),
    ("ocm", "needs contrastive pretext training outside the desk-scale scope"),
    ("api", "needs a pretrained transformer backbone"),
    ("inflora", "low-rank adapters need a pretrained transformer"),
    ("moe_adapter4cl", "mixture-of-adapters needs a pretrained vision-language model"),
    ("rapf", "needs a pretrained vision-language model"),
    ("sd_lora", "low-rank adapters need a pretrained transformer"),
    ("lucir", "the cosine-normalized classifier details are unspecified"),
];

/// Fails fast for stubbed or unknown methods.
pub fn check_method(method: &str) -> Result<()> {
    if METHODS.contains(&method) {
        return Ok(());
    }
    match STUBS.iter().find(|(m, _)| *m == method) {
        Some((m, reason)) => Err(Error::MethodUnavailable { method: m.to_string(), reason: reason.to_string() }),
        None => Err(Error::UnknownMethod(method.to_string())),
    }
}

/// Builds the learner named by `cfg.method` for inputs of `input_shape`.
pub fn build_learner(cfg: &ExperimentConfig, input_shape: &[usize]) -> Result<Box<dyn Learner>> {
    check_method(&cfg.method)?;
    Ok(match cfg.method.as_str() {
        "ranpac" => Box::new(RanpacLearner::from_config(cfg, input_shape)?),
        _ => Box::new(ComposedLearner::from_config(cfg, input_shape)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stubs_fail_fast() {
        for (m, _) in STUBS {
            assert!(matches!(check_method(m), Err(Error::MethodUnavailable { .. })));
        }
        assert!(matches!(check_method("nope"), Err(Error::UnknownMethod(_))));
        for m in METHODS {
            check_method(m).unwrap();
        }
    }
}
