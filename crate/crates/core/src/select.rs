//! Ranking subjects by predicted quality and picking who gets annotated.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    BestN,
    WorstN,
    /// `n` from each end of the ranking.
    BestWorst,
    RandomN,
    All,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::BestN => "best_n",
            StrategyKind::WorstN => "worst_n",
            StrategyKind::BestWorst => "best_worst",
            StrategyKind::RandomN => "random_n",
            StrategyKind::All => "all",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "best_n" | "best" => StrategyKind::BestN,
            "worst_n" | "worst" => StrategyKind::WorstN,
            "best_worst" => StrategyKind::BestWorst,
            "random_n" | "random" => StrategyKind::RandomN,
            "all" => StrategyKind::All,
            _ => return Err(Error::InvalidArgument(format!("unknown strategy {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SelectionStrategy {
    pub kind: StrategyKind,
    /// Per side for `BestWorst`; ignored for `All`.
    pub n: usize,
    /// Only read by `RandomN`.
    pub seed: u64,
}

impl SelectionStrategy {
    pub fn best(n: usize) -> Self {
        Self { kind: StrategyKind::BestN, n, seed: 0 }
    }
    pub fn worst(n: usize) -> Self {
        Self { kind: StrategyKind::WorstN, n, seed: 0 }
    }
    pub fn best_worst(n: usize) -> Self {
        Self { kind: StrategyKind::BestWorst, n, seed: 0 }
    }
    pub fn random(n: usize, seed: u64) -> Self {
        Self { kind: StrategyKind::RandomN, n, seed }
    }
    pub fn all() -> Self {
        Self { kind: StrategyKind::All, n: 0, seed: 0 }
    }

    /// Number of subjects the plan will contain for a pool of `pool` subjects.
    pub fn size(&self, pool: usize) -> usize {
        match self.kind {
            StrategyKind::All => pool,
            StrategyKind::BestWorst => 2 * self.n,
            _ => self.n,
        }
    }

    pub fn validate(&self, pool: usize) -> Result<()> {
        if self.kind != StrategyKind::All && self.n == 0 {
            return Err(Error::InvalidArgument(format!("{} needs n >= 1", self.kind)));
        }
        let need = self.size(pool);
        if need > pool {
            return Err(Error::InvalidArgument(format!(
                "{} with n={} needs {need} subjects but only {pool} are available",
                self.kind, self.n
            )));
        }
        Ok(())
    }

    /// Short label such as `best_worst(5)`.
    pub fn label(&self) -> String {
        match self.kind {
            StrategyKind::All => "all".to_string(),
            k => format!("{k}({})", self.n),
        }
    }
}

/// Ascending by score, ties by ascending id.
pub fn rank_subjects(estimates: &[(String, f64)]) -> Result<Vec<(String, f64)>> {
    if estimates.is_empty() {
        return Err(Error::InvalidArgument("nothing to rank".into()));
    }
    if let Some((id, s)) = estimates.iter().find(|(_, s)| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("score of {id} is not finite ({s})")));
    }
    let mut ranked = estimates.to_vec();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Best,
    Worst,
    Random,
    All,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Best => "best",
            Side::Worst => "worst",
            Side::Random => "random",
            Side::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionPlan {
    pub strategy: SelectionStrategy,
    pub chosen_ids: Vec<String>,
    /// Which end of the ranking each chosen id came from.
    pub sides: Vec<Side>,
    /// The ranking the plan was drawn from, ascending.
    pub scores_used: Vec<(String, f64)>,
}

impl SelectionPlan {
    pub fn contains(&self, id: &str) -> bool {
        self.chosen_ids.iter().any(|c| c == id)
    }

    fn score_of(&self, id: &str) -> f64 {
        self.scores_used
            .iter()
            .find(|(i, _)| i == id)
            .map(|(_, s)| *s)
            .unwrap_or(f64::NAN)
    }

    /// `rank,subject_id,score,side`, rank counting from 1 in plan order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,subject_id,score,side\n");
        for (i, (id, side)) in self.chosen_ids.iter().zip(&self.sides).enumerate() {
            let _ = writeln!(s, "{},{},{:.6},{}", i + 1, id, self.score_of(id), side.as_str());
        }
        s
    }
}

/// Draws a plan from an ascending ranking (as returned by [`rank_subjects`]).
///
/// Best picks are listed from the top down, worst picks from the bottom up.
/// Random picks use a seeded partial Fisher–Yates over the ranking.
pub fn select(strategy: &SelectionStrategy, ranked: &[(String, f64)]) -> Result<SelectionPlan> {
    let pool = ranked.len();
    strategy.validate(pool)?;
    let n = strategy.n;
    let mut picks: Vec<(usize, Side)> = Vec::new();
    match strategy.kind {
        StrategyKind::BestN => picks.extend((0..n).map(|k| (pool - 1 - k, Side::Best))),
        StrategyKind::WorstN => picks.extend((0..n).map(|k| (k, Side::Worst))),
        StrategyKind::BestWorst => {
            picks.extend((0..n).map(|k| (pool - 1 - k, Side::Best)));
            picks.extend((0..n).map(|k| (k, Side::Worst)));
        }
        StrategyKind::RandomN => picks.extend(
            rng::sample_indices(pool, n, strategy.seed)
                .into_iter()
                .map(|i| (i, Side::Random)),
        ),
        StrategyKind::All => picks.extend((0..pool).map(|i| (i, Side::All))),
    }
    Ok(SelectionPlan {
        strategy: *strategy,
        chosen_ids: picks.iter().map(|&(i, _)| ranked[i].0.clone()).collect(),
        sides: picks.iter().map(|&(_, s)| s).collect(),
        scores_used: ranked.to_vec(),
    })
}

/// Ranks then selects.
pub fn select_from_scores(strategy: &SelectionStrategy, scores: &[(String, f64)]) -> Result<SelectionPlan> {
    select(strategy, &rank_subjects(scores)?)
}
