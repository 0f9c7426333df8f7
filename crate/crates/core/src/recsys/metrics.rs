use std::collections::BTreeSet;
use std::fmt;

use super::data::{EvalTarget, Popularity, Split};
use crate::error::{Error, Result};

pub const CUTOFF: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub hr_at_10: f64,
    pub ndcg_at_10: f64,
    pub users: usize,
}

impl MetricReport {
    /// Aggregates 1-based ranks.
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let n = ranks.len();
        let (hits, gain) = ranks.iter().fold((0usize, 0.0f64), |(h, g), &r| (h + hit(r) as usize, g + ndcg_gain(r)));
        let div = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
        Self {
            hr_at_10: div(hits as f64),
            ndcg_at_10: div(gain),
            users: n,
        }
    }

    /// `METRICS hr10=<f> ndcg10=<f> users=<n>`
    pub fn machine_line(&self) -> String {
        format!("METRICS hr10={:.6} ndcg10={:.6} users={}", self.hr_at_10, self.ndcg_at_10, self.users)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "HR@10   {:.4}", self.hr_at_10)?;
        writeln!(f, "NDCG@10 {:.4}", self.ndcg_at_10)?;
        writeln!(f, "users   {}", self.users)?;
        write!(f, "{}", self.machine_line())
    }
}

pub fn hit(rank: usize) -> bool {
    (1..=CUTOFF).contains(&rank)
}

pub fn ndcg_gain(rank: usize) -> f64 {
    if hit(rank) {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// 1-based rank of `target`, placed after every other item with an equal
/// or higher score.
pub fn pessimistic_rank(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| j != target && v >= s)
        .count()
}

/// Ranks the catalog by popularity (descending, then id ascending) for
/// every user's test item.
pub fn popularity_baseline(split: &Split, catalog: &BTreeSet<u64>, popularity: &Popularity) -> Result<MetricReport> {
    popularity_baseline_for(split, catalog, popularity, EvalTarget::Test)
}

pub fn popularity_baseline_for(
    split: &Split,
    catalog: &BTreeSet<u64>,
    popularity: &Popularity,
    target: EvalTarget,
) -> Result<MetricReport> {
    if catalog.is_empty() {
        return Err(Error::Input("empty catalog".into()));
    }
    let mut order: Vec<(u64, f64)> = catalog
        .iter()
        .map(|&i| {
            popularity
                .get(i)
                .map(|p| (i, p))
                .ok_or_else(|| Error::Input(format!("item {i} has no popularity")))
        })
        .collect::<Result<_>>()?;
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let ranks = split
        .users
        .iter()
        .map(|u| {
            let t = u.target(target);
            order
                .iter()
                .position(|&(i, _)| i == t)
                .map(|p| p + 1)
                .ok_or_else(|| Error::Input(format!("target item {t} of user {} is not in the catalog", u.user)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_ranks(&ranks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recsys::data::{compute_popularity, split_leave_one_out, InteractionDataset};

    #[test]
    fn rank_fixtures() {
        let r = MetricReport::from_ranks(&[1]);
        assert_eq!((r.hr_at_10, r.ndcg_at_10), (1.0, 1.0));
        let r = MetricReport::from_ranks(&[11]);
        assert_eq!((r.hr_at_10, r.ndcg_at_10), (0.0, 0.0));
        let r = MetricReport::from_ranks(&[4]);
        assert!((r.ndcg_at_10 - 0.430_676_558).abs() < 1e-9);
    }

    #[test]
    fn ties_are_pessimistic() {
        assert_eq!(pessimistic_rank(&[0.0; 5], 2), 5);
        assert_eq!(pessimistic_rank(&[3.0, 1.0, 2.0], 0), 1);
        assert_eq!(pessimistic_rank(&[3.0, 1.0, 3.0], 0), 2);
    }

    #[test]
    fn uniform_popularity_ranks_by_id() {
        // 20 items, all seen once in training; targets are items 1..=20
        let mut seqs = Vec::new();
        for t in 1..=20u64 {
            seqs.push((format!("u{t:02}"), vec![t, 0, t]));
        }
        let d = InteractionDataset::from_sequences(seqs);
        let s = split_leave_one_out(&d).unwrap();
        let catalog: BTreeSet<u64> = (1..=20).collect();
        let p = compute_popularity(&s, &catalog);
        let r = popularity_baseline(&s, &catalog, &p).unwrap();
        assert_eq!(r.hr_at_10, 10.0 / 20.0);
    }

    #[test]
    fn missing_target_is_an_error() {
        let d = InteractionDataset::from_sequences([("u".to_string(), vec![1, 2, 3])]);
        let s = split_leave_one_out(&d).unwrap();
        let catalog: BTreeSet<u64> = [1, 2].into();
        let p = compute_popularity(&s, &catalog);
        assert!(popularity_baseline(&s, &catalog, &p).is_err());
        assert!(popularity_baseline(&s, &BTreeSet::new(), &p).is_err());
    }
}
