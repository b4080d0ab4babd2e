//! Budgeted search over the fusion start layer and the prompt length.
//!
//! Grid mode evaluates candidates in row-major order (`lf` outer). The
//! evolutionary mode is a (mu + lambda) strategy: each generation draws
//! `population` offspring from uniformly chosen parents, moving every gene
//! to a neighbouring candidate value with probability `mutation_rate`.
//! Candidates are never evaluated twice; an offspring that is already known
//! is replaced by a random unseen candidate.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Candidate {
    pub lf: usize,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SearchMode {
    Grid,
    Evolutionary {
        population: usize,
        #[serde(default = "default_mutation_rate")]
        mutation_rate: f64,
    },
}

fn default_mutation_rate() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub lf: Vec<usize>,
    pub m: Vec<usize>,
    pub budget: usize,
    pub mode: SearchMode,
}

impl SearchSpace {
    pub fn size(&self) -> usize {
        self.lf.len() * self.m.len()
    }

    pub fn contains(&self, c: Candidate) -> bool {
        self.lf.contains(&c.lf) && self.m.contains(&c.m)
    }

    /// Checks the space itself and, when `layers` is given, that every
    /// candidate fits a backbone of that depth.
    pub fn validate(&self, layers: Option<usize>) -> Result<()> {
        if self.lf.is_empty() || self.m.is_empty() {
            return Err(Error::Config("search space is empty".into()));
        }
        if self.budget == 0 {
            return Err(Error::Config("search budget must be >= 1".into()));
        }
        if let SearchMode::Evolutionary {
            population,
            mutation_rate,
        } = self.mode
        {
            if population == 0 || self.budget < population {
                return Err(Error::Config(format!(
                    "search budget {} must be >= population {population} >= 1",
                    self.budget
                )));
            }
            if !(0.0..=1.0).contains(&mutation_rate) {
                return Err(Error::Config(format!("mutation_rate {mutation_rate} not in [0, 1]")));
            }
        }
        if self.m.contains(&0) {
            return Err(Error::Config("prompt length candidates must be >= 1".into()));
        }
        if let Some(l) = layers {
            if let Some(bad) = self.lf.iter().find(|&&lf| lf > l) {
                return Err(Error::Config(format!("Lf candidate {bad} exceeds {l} layers")));
            }
        }
        Ok(())
    }

    fn sorted(&self) -> (Vec<usize>, Vec<usize>) {
        let prep = |v: &[usize]| {
            let mut v = v.to_vec();
            v.sort_unstable();
            v.dedup();
            v
        };
        (prep(&self.lf), prep(&self.m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchEntry {
    pub index: usize,
    pub generation: usize,
    pub lf: usize,
    pub m: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Candidate,
    pub best_score: f64,
    pub log: Vec<SearchEntry>,
}

struct Evaluator<'a, F> {
    objective: F,
    log: Vec<SearchEntry>,
    seen: HashSet<Candidate>,
    space: &'a SearchSpace,
}

impl<F: FnMut(Candidate) -> Result<f64>> Evaluator<'_, F> {
    fn eval(&mut self, c: Candidate, generation: usize) -> Result<f64> {
        debug_assert!(self.space.contains(c));
        let score = (self.objective)(c)?;
        if score.is_nan() {
            return Err(Error::NonFinite(format!("objective at Lf={} M={}", c.lf, c.m)));
        }
        self.seen.insert(c);
        self.log.push(SearchEntry {
            index: self.log.len(),
            generation,
            lf: c.lf,
            m: c.m,
            score,
        });
        Ok(score)
    }

    fn remaining(&self) -> usize {
        self.space.budget - self.log.len()
    }
}

/// Maximizes `objective` over the space within the evaluation budget. Ties
/// go to the earlier evaluation.
pub fn search<F>(space: &SearchSpace, seed: u64, objective: F) -> Result<SearchResult>
where
    F: FnMut(Candidate) -> Result<f64>,
{
    space.validate(None)?;
    let (lfs, ms) = space.sorted();
    let all: Vec<Candidate> = lfs
        .iter()
        .flat_map(|&lf| ms.iter().map(move |&m| Candidate { lf, m }))
        .collect();
    let mut ev = Evaluator {
        objective,
        log: Vec::new(),
        seen: HashSet::new(),
        space,
    };
    match space.mode {
        SearchMode::Grid => {
            for &c in all.iter().take(space.budget) {
                ev.eval(c, 0)?;
            }
        }
        SearchMode::Evolutionary {
            population,
            mutation_rate,
        } => {
            let mut rng = rng::substream(seed, stream::SEARCH);
            let unseen = |seen: &HashSet<Candidate>, rng: &mut rng::Rng| {
                let pool: Vec<Candidate> = all.iter().copied().filter(|c| !seen.contains(c)).collect();
                pool.choose(rng).copied()
            };
            let mut pop: Vec<(f64, usize, Candidate)> = Vec::new();
            for _ in 0..population.min(all.len()) {
                let c = unseen(&ev.seen, &mut rng).expect("population fits the space");
                let s = ev.eval(c, 0)?;
                pop.push((s, ev.log.len() - 1, c));
            }
            let mut generation = 0;
            while ev.remaining() > 0 && ev.seen.len() < all.len() {
                generation += 1;
                let parents: Vec<Candidate> = pop.iter().map(|p| p.2).collect();
                let mut offspring = Vec::new();
                for _ in 0..population.min(ev.remaining()) {
                    let parent = *parents.choose(&mut rng).expect("non-empty population");
                    let child = Candidate {
                        lf: mutate(&lfs, parent.lf, mutation_rate, &mut rng),
                        m: mutate(&ms, parent.m, mutation_rate, &mut rng),
                    };
                    let child = if ev.seen.contains(&child) || offspring.contains(&child) {
                        let mut taken = ev.seen.clone();
                        taken.extend(offspring.iter().copied());
                        match unseen(&taken, &mut rng) {
                            Some(c) => c,
                            None => break,
                        }
                    } else {
                        child
                    };
                    offspring.push(child);
                }
                if offspring.is_empty() {
                    break;
                }
                for c in offspring {
                    let s = ev.eval(c, generation)?;
                    pop.push((s, ev.log.len() - 1, c));
                }
                pop.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                pop.truncate(population);
            }
        }
    }
    let best = ev
        .log
        .iter()
        .fold(None::<&SearchEntry>, |best, e| match best {
            Some(b) if b.score >= e.score => Some(b),
            _ => Some(e),
        })
        .expect("budget >= 1 evaluates at least one candidate");
    Ok(SearchResult {
        best: Candidate {
            lf: best.lf,
            m: best.m,
        },
        best_score: best.score,
        log: ev.log,
    })
}

/// With probability `rate`, moves to a neighbouring value of `values`.
fn mutate(values: &[usize], current: usize, rate: f64, rng: &mut rng::Rng) -> usize {
    let i = values.iter().position(|&v| v == current).expect("gene in space");
    if values.len() == 1 || !rng.random_bool(rate) {
        return current;
    }
    let j = if i == 0 {
        1
    } else if i + 1 == values.len() || rng.random_bool(0.5) {
        i - 1
    } else {
        i + 1
    };
    values[j]
}

impl SearchResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,generation,lf,m,score\n");
        for e in &self.log {
            out.push_str(&format!("{},{},{},{},{}\n", e.index, e.generation, e.lf, e.m, e.score));
        }
        out
    }
}
