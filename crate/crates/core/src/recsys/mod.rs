//! Sequential recommendation on top of the side network: leave-one-out
//! splits, smoothed popularity, a causal sequence encoder, the in-batch
//! debiased loss, training and full-catalog evaluation.

mod data;
mod loss;
mod metrics;
mod seq;
mod train;

pub use data::{
    compute_popularity, split_leave_one_out, EvalTarget, InteractionDataset, Popularity, Split, UserSplit,
};
pub use loss::{debiased_ce_on_tape, inbatch_debiased_ce, LossOutput, LossTerm};
pub use metrics::{
    hit, ndcg_gain, pessimistic_rank, popularity_baseline, popularity_baseline_for, MetricReport, CUTOFF,
};
pub use seq::{score, SeqConfig, SeqEncoder};
pub use train::{
    batch_loss, evaluate, item_embeddings, sequence_loss, train, train_step, train_with, Batch, ItemSource, RecModel, Recommender,
    StepOutcome, TrainConfig, TrainReport,
};
