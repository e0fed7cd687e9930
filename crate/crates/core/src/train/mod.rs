//! Supervised fine-tuning, preference optimization and their data.

mod backprop;
pub mod curate;
pub mod distill;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use curate::{curate_sft_dataset, CurationReport, CurationRules, RejectReason};
pub use distill::generate_distillation_set;
pub use loss::{
    dpo_loss_and_grad, dpo_loss_and_grad_with_ref, reference_logprobs, sequence_logprob,
    sft_loss_and_grad, DpoOptions, PreferencePair, SftExample,
};
pub use optim::{adamw_step, lr_at, OptimizerState, Schedule, TrainConfig};
pub use trainer::{train_dpo, train_sft, TrainOutcome};
