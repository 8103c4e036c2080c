use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Order in which batches from several sessions are visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Uniform permutation of all batches from all sessions.
    #[default]
    Random,
    /// Sessions by date, batches chronologically within each.
    Sequential,
    /// Random session order, batches chronologically within each.
    RandomSession,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::Sequential, Strategy::RandomSession];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Sequential => "sequential",
            Strategy::RandomSession => "random_session",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, HarnessError> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == norm || (norm == "randomsession" && *k == Strategy::RandomSession))
            .ok_or_else(|| HarnessError::Config(format!("unknown strategy {s:?}")))
    }
}

/// Flattens per-session batch lists into one visiting order.
///
/// `sessions` pairs each session's date index with its batches in
/// chronological order.
pub fn schedule_batches<T>(sessions: Vec<(usize, Vec<T>)>, strategy: Strategy, seed: u64) -> Result<Vec<T>, HarnessError> {
    if sessions.is_empty() {
        return Err(HarnessError::Config("no sessions to schedule".into()));
    }
    if let Some(i) = sessions.iter().position(|(_, b)| b.is_empty()) {
        return Err(HarnessError::Config(format!("session {i} contributes no batches")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sessions = sessions;
    Ok(match strategy {
        Strategy::Random => {
            let mut all: Vec<T> = sessions.into_iter().flat_map(|(_, b)| b).collect();
            all.shuffle(&mut rng);
            all
        }
        Strategy::Sequential => {
            sessions.sort_by_key(|(d, _)| *d);
            sessions.into_iter().flat_map(|(_, b)| b).collect()
        }
        Strategy::RandomSession => {
            sessions.shuffle(&mut rng);
            sessions.into_iter().flat_map(|(_, b)| b).collect()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ab() -> Vec<(usize, Vec<&'static str>)> {
        vec![(1, vec!["B1", "B2"]), (0, vec!["A1", "A2", "A3"])]
    }

    #[test]
    fn sequential_orders_by_date() {
        assert_eq!(
            schedule_batches(ab(), Strategy::Sequential, 0).unwrap(),
            ["A1", "A2", "A3", "B1", "B2"]
        );
    }

    #[test]
    fn random_session_keeps_sessions_contiguous() {
        for seed in 0..20 {
            let out = schedule_batches(ab(), Strategy::RandomSession, seed).unwrap();
            assert!(
                out == ["B1", "B2", "A1", "A2", "A3"] || out == ["A1", "A2", "A3", "B1", "B2"],
                "{out:?}"
            );
        }
    }

    #[test]
    fn random_is_a_seeded_permutation() {
        let a = schedule_batches(ab(), Strategy::Random, 3).unwrap();
        assert_eq!(a, schedule_batches(ab(), Strategy::Random, 3).unwrap());
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, ["A1", "A2", "A3", "B1", "B2"]);
        let distinct: std::collections::BTreeSet<_> = (0..30)
            .map(|s| schedule_batches(ab(), Strategy::Random, s).unwrap())
            .collect();
        assert!(distinct.len() > 5);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(schedule_batches::<u8>(vec![], Strategy::Random, 0).is_err());
        assert!(schedule_batches::<u8>(vec![(0, vec![1]), (1, vec![])], Strategy::Sequential, 0).is_err());
    }

    #[test]
    fn parses_names() {
        assert_eq!("Random-Session".parse::<Strategy>().unwrap(), Strategy::RandomSession);
        assert_eq!("sequential".parse::<Strategy>().unwrap(), Strategy::Sequential);
        assert!("daily".parse::<Strategy>().is_err());
    }
}
