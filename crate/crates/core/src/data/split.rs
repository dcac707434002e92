use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Task};
use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl SplitPlan {
    pub fn get(&self, name: &str) -> Option<&[usize]> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Splits `total` across buckets proportionally to `weights` by largest
/// remainder; ties go to the lower bucket index.
fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    let mut out: Vec<usize> = weights.iter().map(|&w| total * w / sum).collect();
    let mut rest: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| ((total * w) % sum, i))
        .collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let assigned: usize = out.iter().sum();
    for &(_, i) in rest.iter().take(total - assigned) {
        out[i] += 1;
    }
    out
}

/// 80/10/10 split stratified by class. Validation and test each receive
/// `round(N/10)` graphs, apportioned across classes by largest remainder;
/// training receives the rest.
pub fn stratified_split(ds: &Dataset, seed: u64) -> Result<SplitPlan> {
    ensure!(
        ds.task() == Task::Classification,
        Dataset,
        "stratified splitting needs class targets"
    );
    let k = ds.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..ds.len() {
        by_class[ds.class_of(i).unwrap()].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        ensure!(
            members.is_empty() || members.len() >= 3,
            Dataset,
            "class {c} has {} members, fewer than the 3 needed for a three-way split",
            members.len()
        );
    }
    let n = ds.len();
    let held = (n + 5) / 10;
    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let valid_counts = apportion(held, &sizes);
    let remaining: Vec<usize> = sizes.iter().zip(&valid_counts).map(|(s, v)| s - v).collect();
    // test quotas follow the class sizes too; fall back to what is left
    let mut test_counts = apportion(held, &sizes);
    for (t, r) in test_counts.iter_mut().zip(&remaining) {
        *t = (*t).min(r.saturating_sub(1));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = SplitPlan {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        let (v, t) = (valid_counts[c], test_counts[c]);
        plan.valid.extend_from_slice(&members[..v]);
        plan.test.extend_from_slice(&members[v..v + t]);
        plan.train.extend_from_slice(&members[v + t..]);
    }
    plan.train.sort_unstable();
    plan.valid.sort_unstable();
    plan.test.sort_unstable();
    Ok(plan)
}
