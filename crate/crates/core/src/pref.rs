//! Round-robin tournaments over candidate pools.
//!
//! Every unordered pair is judged once with the lower index shown as A. The
//! most-chosen candidate becomes the winner and the least-chosen the loser,
//! ties going to the lowest index.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpo::{Provenance, WinLosePair};
use crate::reward::Choice;

#[derive(Debug, Error)]
pub enum PrefError {
    #[error("pool {0} needs at least 2 candidates")]
    PoolTooSmall(String),
    #[error("judge failed on pool {prompt_id} pair ({i}, {j}): {msg}")]
    Judge { prompt_id: String, i: usize, j: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Chooses between two presented candidates.
pub trait Judge {
    fn judge(&self, a: &[f64], b: &[f64]) -> Result<Choice, String>;
}

impl<F> Judge for F
where
    F: Fn(&[f64], &[f64]) -> Result<Choice, String>,
{
    fn judge(&self, a: &[f64], b: &[f64]) -> Result<Choice, String> {
        self(a, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    AWins,
    BWins,
    NotJudged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub prompt_id: String,
    pub candidates: Vec<Vec<f64>>,
    /// Entry `(i, j)` records the verdict with `i` shown as A.
    pub judge_matrix: Option<Vec<Vec<Verdict>>>,
}

impl CandidatePool {
    pub fn new(prompt_id: impl Into<String>, candidates: Vec<Vec<f64>>) -> Self {
        Self {
            prompt_id: prompt_id.into(),
            candidates,
            judge_matrix: None,
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub prompt_id: String,
    pub i: usize,
    pub j: usize,
    pub verdict: Choice,
}

pub fn write_audit(path: &Path, rows: &[AuditRow]) -> Result<(), PrefError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TournamentOutcome {
    pub winner: usize,
    pub loser: usize,
    pub counts: Vec<usize>,
    pub audit: Vec<AuditRow>,
}

impl TournamentOutcome {
    pub fn pair(&self, pool: &CandidatePool, provenance: Provenance) -> WinLosePair {
        WinLosePair {
            prompt_id: pool.prompt_id.clone(),
            winner: pool.candidates[self.winner].clone(),
            loser: pool.candidates[self.loser].clone(),
            provenance,
        }
    }
}

/// Winner and loser indices from win counts.
pub fn pick_winner_loser(counts: &[usize]) -> (usize, usize) {
    let mut winner = 0;
    let mut loser = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[winner] {
            winner = i;
        }
        if c < counts[loser] {
            loser = i;
        }
    }
    if winner == loser {
        (0, 1)
    } else {
        (winner, loser)
    }
}

/// Judges all `C(N, 2)` pairs and fills the pool's judge matrix.
pub fn run_tournament(pool: &mut CandidatePool, judge: &dyn Judge) -> Result<TournamentOutcome, PrefError> {
    let n = pool.len();
    if n < 2 {
        return Err(PrefError::PoolTooSmall(pool.prompt_id.clone()));
    }
    let mut matrix = vec![vec![Verdict::NotJudged; n]; n];
    let mut counts = vec![0; n];
    let mut audit = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let v = judge
                .judge(&pool.candidates[i], &pool.candidates[j])
                .map_err(|msg| PrefError::Judge {
                    prompt_id: pool.prompt_id.clone(),
                    i,
                    j,
                    msg,
                })?;
            counts[if v == Choice::A { i } else { j }] += 1;
            matrix[i][j] = if v == Choice::A { Verdict::AWins } else { Verdict::BWins };
            matrix[j][i] = if v == Choice::A { Verdict::BWins } else { Verdict::AWins };
            audit.push(AuditRow {
                prompt_id: pool.prompt_id.clone(),
                i,
                j,
                verdict: v,
            });
        }
    }
    pool.judge_matrix = Some(matrix);
    let (winner, loser) = pick_winner_loser(&counts);
    Ok(TournamentOutcome {
        winner,
        loser,
        counts,
        audit,
    })
}

/// Result of pairing a new pool's winner with earlier losers.
#[derive(Debug, Clone, PartialEq)]
pub struct Refresh {
    pub pairs: Vec<WinLosePair>,
    pub warnings: usize,
    pub outcome: Option<TournamentOutcome>,
}

/// Pairs the new pool's tournament winner with the loser of every earlier
/// pair for the same prompt, whatever the judge thinks of the match-up.
pub fn refresh_pairs(
    new_pool: &mut CandidatePool,
    old_pairs: &[WinLosePair],
    judge: &dyn Judge,
) -> Result<Refresh, PrefError> {
    let old: Vec<&WinLosePair> = old_pairs.iter().filter(|p| p.prompt_id == new_pool.prompt_id).collect();
    if old.is_empty() {
        return Ok(Refresh {
            pairs: Vec::new(),
            warnings: 1,
            outcome: None,
        });
    }
    let outcome = run_tournament(new_pool, judge)?;
    let best = &new_pool.candidates[outcome.winner];
    let pairs = old
        .into_iter()
        .map(|p| WinLosePair {
            prompt_id: p.prompt_id.clone(),
            winner: best.clone(),
            loser: p.loser.clone(),
            provenance: Provenance::Refreshed,
        })
        .collect();
    Ok(Refresh {
        pairs,
        warnings: 0,
        outcome: Some(outcome),
    })
}

/// Fraction of pairs whose preferred candidate survives swapping the
/// presentation order.
pub fn presentation_bias_probe(judge: &dyn Judge, pool: &CandidatePool) -> Result<f64, PrefError> {
    let n = pool.len();
    if n < 2 {
        return Err(PrefError::PoolTooSmall(pool.prompt_id.clone()));
    }
    let err = |i, j, msg| PrefError::Judge {
        prompt_id: pool.prompt_id.clone(),
        i,
        j,
        msg,
    };
    let mut stable = 0;
    let mut total = 0;
    for i in 0..n {
        for j in i + 1..n {
            let fwd = judge.judge(&pool.candidates[i], &pool.candidates[j]).map_err(|m| err(i, j, m))?;
            let bwd = judge.judge(&pool.candidates[j], &pool.candidates[i]).map_err(|m| err(j, i, m))?;
            if fwd == bwd.swapped() {
                stable += 1;
            }
            total += 1;
        }
    }
    Ok(stable as f64 / total as f64)
}
