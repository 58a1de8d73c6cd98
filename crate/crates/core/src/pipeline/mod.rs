//! Training loops and evaluation.

mod eval;
mod train;

pub use eval::{
    corrupt_split, evaluate, evaluate_corruptions, flip_rate, mix_seed, wilson_interval,
    CorruptionRow, EvalReport, FlipRateReport, FlipRateSummary, FLIP_THRESHOLD,
};
pub use train::{
    loss_log_csv, train_erm, train_ssca, write_loss_csv, LrSchedule, MiningStats, NoopObserver,
    SscaConfig, StepLoss, TrainConfig, TrainObserver, TrainOutcome, LOSS_CSV_HEADER,
};
