//! Corruption procedures and the subtask objectives.
//!
//! Each loss builds onto a caller-owned [`Graph`](crate::numerics::Graph) and
//! returns the scalar node, so losses can be differentiated on their own or
//! summed with [`combine_losses`].

mod losses;
mod masking;

pub use losses::{
    combine_loss_values, combine_losses, contrastive_loss, s2p_loss, s2t_loss, ssl_loss_from_targets,
    ssl_masked_kl_loss, ssl_targets, t2t_loss, target_concentration, task_loss, ContrastiveConfig, LossOptions,
    SslLoss, TaskWeights,
};
pub use masking::{
    noise_text, sample_spans, sample_spans_with, text_mask_flags, MaskPlan, SPAN_LENGTH, SSL_MASK_RATE,
    SUPERVISED_MASK_RATE, TEXT_MASK_RATE, TEXT_SPAN_MEAN,
};
