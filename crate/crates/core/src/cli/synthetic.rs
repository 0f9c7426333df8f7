use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::recsys::InteractionDataset;

/// Interaction data with a planted first-order pattern: each next item
/// follows a fixed transition table with probability `strength`, and is
/// uniform otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub strength: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 200,
            items: 50,
            min_len: 5,
            max_len: 15,
            strength: 0.9,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.items < 11 {
            return Err(Error::Config(format!("{} items leave HR@10 degenerate; need at least 11", self.items)));
        }
        if self.users == 0 {
            return Err(Error::Config("synthetic data needs at least one user".into()));
        }
        if self.min_len < 3 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "sequence lengths {}..={} must satisfy 3 <= min <= max",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::Config(format!("strength {} outside [0, 1]", self.strength)));
        }
        Ok(())
    }

    /// Item ids are `1..=items`; `table[i - 1]` is the planted successor of `i`.
    pub fn transition_table(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut next: Vec<u64> = (1..=self.items as u64).collect();
        next.shuffle(&mut rng);
        next
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<InteractionDataset> {
    spec.validate()?;
    let table = spec.transition_table();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let n = spec.items as u64;
    let width = spec.users.to_string().len();
    let users = (0..spec.users).map(|u| {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut seq = Vec::with_capacity(len);
        let mut cur = rng.random_range(1..=n);
        seq.push(cur);
        for _ in 1..len {
            cur = if rng.random::<f64>() < spec.strength {
                table[cur as usize - 1]
            } else {
                rng.random_range(1..=n)
            };
            seq.push(cur);
        }
        (format!("u{u:0width$}"), seq)
    });
    Ok(InteractionDataset::from_sequences(users.collect::<Vec<_>>()))
}
