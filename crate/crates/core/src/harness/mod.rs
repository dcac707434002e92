//! Training, evaluation, verification and catalog commands behind the `ccn`
//! binary, plus run configuration and checkpoints.

mod checkpoint;
mod config;
mod train;
mod verify;

pub use checkpoint::{decode, encode, Checkpoint, Entry, FORMAT_VERSION, MAGIC};
pub use config::{FeatureKind, RunConfig, TaskKind};
pub use train::{
    cmd_eval, cmd_train, evaluate, prepare, split_plan, train_epoch, train_split, Metrics,
    Prepared, SplitReport, TrainReport,
};
pub use verify::{cmd_verify, jitter_biases, least_likely_class, random_graph, SuiteResult, VerifyLevel, VerifyReport, MANIFEST};

pub use crate::parallel::{parallel_map, worker_count};

use crate::error::Result;
use crate::tensor::enumerate_contractions;

/// One line per contraction: canonical index, case tag, spec.
pub fn cmd_enumerate(order_in: usize, order_out: usize) -> Result<Vec<String>> {
    Ok(enumerate_contractions(order_in, order_out)?
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{i}\t{}\t{s}", s.case_tag()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_lines() {
        let lines = cmd_enumerate(5, 2).unwrap();
        assert_eq!(lines.len(), 50);
        assert_eq!(lines.iter().filter(|l| l.contains("\t1+2\t")).count(), 30);
        assert_eq!(cmd_enumerate(3, 2).unwrap().len(), 3);
        assert!(cmd_enumerate(2, 2).is_err());
    }

}
