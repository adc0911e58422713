//! Losses, the pretrain/finetune loops and checkpoint files.

mod checkpoint;
mod losses;
mod trainer;

pub use checkpoint::{
    check_compatible, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, MCKP_MAGIC,
    MCKP_VERSION,
};
pub use losses::{finetune_loss, finetune_loss_graph, pretrain_loss, pretrain_loss_graph, sq_error_graph};
pub use trainer::{
    param_hash, BatchSampler, FinetuneOptions, MaskOptions, PretrainMode, PretrainOptions, StageOptions, StepStats,
    Trainer,
};
