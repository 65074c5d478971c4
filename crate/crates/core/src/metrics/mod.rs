//! Retrieval metrics over a similarity matrix and the analytic
//! parameter/FLOPs counter.

mod flops;
mod retrieval;

pub use flops::{count_params_flops, FlopsReport, SubnetworkCost, NONLINEAR_FLOPS};
pub use retrieval::{median_rank, recall_at_k, true_match_ranks, Direction, RetrievalReport};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("k = {k} outside 1..={gallery}")]
    InvalidK { k: usize, gallery: usize },
    #[error("configuration error: {0}")]
    Config(String),
}
