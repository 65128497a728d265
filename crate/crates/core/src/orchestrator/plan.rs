//! Session plans and counterbalanced condition orders.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Modality;

/// Movie order shared by every plan.
pub const MOVIES: [&str; 3] = ["big bunny", "overwatch", "for the birds"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub movie: String,
    pub modality: Modality,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub pair_id: u32,
    pub segments: Vec<Segment>,
}

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("at least one pair is required")]
    NoPairs,
    #[error("plan for pair {pair_id}: {problem}")]
    Invalid { pair_id: u32, problem: String },
    #[error("pair {0} not found in plan file")]
    PairNotFound(u32),
    #[error("cannot read plan file: {0}")]
    Io(#[from] std::io::Error),
    #[error("plan file is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl SessionPlan {
    pub fn new(pair_id: u32, order: [Modality; 3]) -> Self {
        Self {
            pair_id,
            segments: MOVIES
                .iter()
                .zip(order)
                .map(|(movie, modality)| Segment {
                    movie: (*movie).to_owned(),
                    modality,
                })
                .collect(),
        }
    }

    pub fn modality_order(&self) -> Vec<Modality> {
        self.segments.iter().map(|s| s.modality).collect()
    }

    /// Every modality exactly once, no empty titles.
    pub fn validate(&self) -> Result<(), PlanError> {
        let invalid = |problem: String| PlanError::Invalid {
            pair_id: self.pair_id,
            problem,
        };
        if self.segments.len() != Modality::ALL.len() {
            return Err(invalid(format!("expected 3 segments, got {}", self.segments.len())));
        }
        for m in Modality::ALL {
            let n = self.segments.iter().filter(|s| s.modality == m).count();
            if n != 1 {
                return Err(invalid(format!("{m} appears {n} times")));
            }
        }
        if let Some(s) = self.segments.iter().find(|s| s.movie.trim().is_empty()) {
            return Err(invalid(format!("empty movie title in {} segment", s.modality)));
        }
        Ok(())
    }

    /// Reads a plan file holding either one plan or a list of plans, and picks
    /// `pair_id` (or the first plan when `None`).
    pub fn load(path: impl AsRef<Path>, pair_id: Option<u32>) -> Result<Self, PlanError> {
        let text = std::fs::read_to_string(path)?;
        let plans: Vec<SessionPlan> = match serde_json::from_str::<SessionPlan>(&text) {
            Ok(plan) => vec![plan],
            Err(_) => serde_json::from_str(&text)?,
        };
        let plan = match pair_id {
            Some(id) => plans.into_iter().find(|p| p.pair_id == id).ok_or(PlanError::PairNotFound(id))?,
            None => plans.into_iter().next().ok_or(PlanError::NoPairs)?,
        };
        plan.validate()?;
        Ok(plan)
    }
}

fn permutations() -> Vec<[Modality; 3]> {
    let [a, b, c] = Modality::ALL;
    vec![[a, b, c], [a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]]
}

/// Plans for `n_pairs` pairs, numbered from 1. The six modality orders are
/// shuffled once under `seed` and then dealt round-robin, so their counts
/// differ by at most one.
pub fn generate_condition_orders(n_pairs: usize, seed: u64) -> Result<Vec<SessionPlan>, PlanError> {
    if n_pairs == 0 {
        return Err(PlanError::NoPairs);
    }
    let mut orders = permutations();
    orders.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..n_pairs)
        .map(|i| SessionPlan::new(i as u32 + 1, orders[i % orders.len()]))
        .collect())
}
