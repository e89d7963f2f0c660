//! Grid search over finite spaces and seeded random search over ranges.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// A sampled or enumerated hyperparameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Int(v) => Some(*v as f64),
            ParamValue::Float(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_usize(&self) -> Option<usize> {
        match self {
            ParamValue::Int(v) if *v >= 0 => Some(*v as usize),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            ParamValue::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParamValue::Str(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Bool(b) => write!(f, "{b}"),
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Float(v) => write!(f, "{v}"),
            ParamValue::Str(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    Log,
}

/// One parameter's domain: a finite set, an integer range (inclusive), or a
/// real range with linear or log-uniform sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    Set { values: Vec<ParamValue> },
    IntRange { lo: i64, hi: i64 },
    FloatRange { lo: f64, hi: f64, scale: Scale },
}

impl Domain {
    fn validate(&self, name: &str) -> Result<()> {
        match self {
            Domain::Set { values } => {
                if values.is_empty() {
                    return Err(CoreError::config(format!("parameter `{name}`: empty set")));
                }
            }
            Domain::IntRange { lo, hi } => {
                if lo >= hi {
                    return Err(CoreError::config(format!(
                        "parameter `{name}`: need lo < hi, got [{lo}, {hi}]"
                    )));
                }
            }
            Domain::FloatRange { lo, hi, scale } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(CoreError::config(format!(
                        "parameter `{name}`: need finite lo < hi"
                    )));
                }
                if *scale == Scale::Log && *lo <= 0.0 {
                    return Err(CoreError::config(format!(
                        "parameter `{name}`: log scale requires lo > 0"
                    )));
                }
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> ParamValue {
        match self {
            Domain::Set { values } => values[rng.random_range(0..values.len())].clone(),
            Domain::IntRange { lo, hi } => ParamValue::Int(rng.random_range(*lo..=*hi)),
            Domain::FloatRange { lo, hi, scale } => match scale {
                Scale::Linear => ParamValue::Float(rng.random_range(*lo..*hi)),
                Scale::Log => {
                    ParamValue::Float(rng.random_range(lo.ln()..hi.ln()).exp())
                }
            },
        }
    }
}

/// Named parameter domains. Enumeration order is by parameter name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: BTreeMap<String, Domain>,
}

impl SearchSpace {
    pub fn new() -> SearchSpace {
        SearchSpace::default()
    }

    pub fn with(mut self, name: &str, domain: Domain) -> SearchSpace {
        self.params.insert(name.to_string(), domain);
        self
    }

    pub fn set_of(values: &[ParamValue]) -> Domain {
        Domain::Set { values: values.to_vec() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.is_empty() {
            return Err(CoreError::config("search space has no parameters"));
        }
        for (name, domain) in &self.params {
            domain.validate(name)?;
        }
        Ok(())
    }
}

pub type Assignment = BTreeMap<String, ParamValue>;

/// One evaluated configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub params: Assignment,
    pub score: f64,
}

/// Search result: the winning configuration plus the full trial log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: Trial,
    pub trials: Vec<Trial>,
}

fn pick_best(trials: &[Trial], maximize: bool) -> Result<Trial> {
    if trials.is_empty() {
        return Err(CoreError::config("no trials were run"));
    }
    let mut best = &trials[0];
    for t in &trials[1..] {
        let better = if maximize { t.score > best.score } else { t.score < best.score };
        if better {
            best = t;
        }
    }
    Ok(best.clone())
}

/// The reference linear-model grid: penalty in {l1, l2} × C in {0.01, 0.1, 1, 10}.
pub fn linear_grid_space() -> SearchSpace {
    SearchSpace::new()
        .with(
            "inverse_reg_c",
            SearchSpace::set_of(&[
                ParamValue::Float(0.01),
                ParamValue::Float(0.1),
                ParamValue::Float(1.0),
                ParamValue::Float(10.0),
            ]),
        )
        .with(
            "penalty",
            SearchSpace::set_of(&[
                ParamValue::Str("l1".to_string()),
                ParamValue::Str("l2".to_string()),
            ]),
        )
}

/// The reference CNN random-search space.
pub fn cnn_search_space() -> SearchSpace {
    SearchSpace::new()
        .with("n_layers", Domain::IntRange { lo: 1, hi: 5 })
        .with("expansion", Domain::FloatRange { lo: 1.0, hi: 4.0, scale: Scale::Linear })
        .with(
            "rep_dim",
            SearchSpace::set_of(&[
                ParamValue::Int(16),
                ParamValue::Int(32),
                ParamValue::Int(64),
                ParamValue::Int(128),
            ]),
        )
        .with(
            "batch_norm",
            SearchSpace::set_of(&[ParamValue::Bool(true), ParamValue::Bool(false)]),
        )
        .with("lr", Domain::FloatRange { lo: 1e-4, hi: 1e-2, scale: Scale::Log })
        .with(
            "batch_size",
            SearchSpace::set_of(&[ParamValue::Int(16), ParamValue::Int(32), ParamValue::Int(64)]),
        )
        .with("epochs", Domain::IntRange { lo: 10, hi: 50 })
}

/// Evaluate every cell of a finite Cartesian product.
///
/// Parameters enumerate sorted by name with declared value order, the last
/// parameter varying fastest; ties keep the earlier cell.
pub fn grid_search<F>(
    space: &SearchSpace,
    mut evaluate: F,
    maximize: bool,
) -> Result<SearchOutcome>
where
    F: FnMut(&Assignment) -> Result<f64>,
{
    space.validate()?;
    let mut names = Vec::new();
    let mut value_lists: Vec<&[ParamValue]> = Vec::new();
    for (name, domain) in &space.params {
        match domain {
            Domain::Set { values } => {
                names.push(name.clone());
                value_lists.push(values);
            }
            _ => {
                return Err(CoreError::config(format!(
                    "grid search requires finite sets; parameter `{name}` is a range"
                )))
            }
        }
    }

    let total: usize = value_lists.iter().map(|v| v.len()).product();
    let mut trials = Vec::with_capacity(total);
    let mut counters = vec![0usize; names.len()];
    for index in 0..total {
        let assignment: Assignment = names
            .iter()
            .zip(&counters)
            .zip(&value_lists)
            .map(|((n, &c), vals)| (n.clone(), vals[c].clone()))
            .collect();
        let score = evaluate(&assignment)?;
        trials.push(Trial { index, params: assignment, score });
        // Odometer increment, last parameter fastest.
        for pos in (0..counters.len()).rev() {
            counters[pos] += 1;
            if counters[pos] < value_lists[pos].len() {
                break;
            }
            counters[pos] = 0;
        }
    }

    Ok(SearchOutcome { best: pick_best(&trials, maximize)?, trials })
}

/// Sample `n_trials` configurations uniformly (log-uniform where declared)
/// and evaluate each. Deterministic given the seed; ties keep the earlier
/// trial.
pub fn random_search<F>(
    space: &SearchSpace,
    n_trials: usize,
    seed: u64,
    mut evaluate: F,
    maximize: bool,
) -> Result<SearchOutcome>
where
    F: FnMut(&Assignment) -> Result<f64>,
{
    space.validate()?;
    if n_trials == 0 {
        return Err(CoreError::config("random search needs at least one trial"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(n_trials);
    for index in 0..n_trials {
        let assignment: Assignment = space
            .params
            .iter()
            .map(|(name, domain)| (name.clone(), domain.sample(&mut rng)))
            .collect();
        let score = evaluate(&assignment)?;
        trials.push(Trial { index, params: assignment, score });
    }
    Ok(SearchOutcome { best: pick_best(&trials, maximize)?, trials })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_grid_enumerates_eight_cells() {
        let mut seen = Vec::new();
        let out = grid_search(
            &linear_grid_space(),
            |a| {
                seen.push(a.clone());
                Ok(0.0)
            },
            true,
        )
        .unwrap();
        assert_eq!(out.trials.len(), 8);
        assert_eq!(seen.len(), 8);
        // Ties keep the first enumerated cell.
        assert_eq!(out.best.index, 0);
        assert_eq!(out.best.params["inverse_reg_c"], ParamValue::Float(0.01));
        assert_eq!(out.best.params["penalty"], ParamValue::Str("l1".to_string()));
    }

    #[test]
    fn single_cell_grid_returns_it() {
        let space = SearchSpace::new().with("x", SearchSpace::set_of(&[ParamValue::Int(5)]));
        let out = grid_search(&space, |a| Ok(a["x"].as_f64().unwrap()), true).unwrap();
        assert_eq!(out.trials.len(), 1);
        assert_eq!(out.best.score, 5.0);
    }

    #[test]
    fn grid_rejects_ranges_and_empty_spaces() {
        let space = SearchSpace::new().with("lr", Domain::FloatRange { lo: 0.1, hi: 1.0, scale: Scale::Linear });
        assert!(grid_search(&space, |_| Ok(0.0), true).is_err());
        assert!(grid_search(&SearchSpace::new(), |_| Ok(0.0), true).is_err());
    }

    #[test]
    fn grid_best_matches_trial_log_extremum() {
        let space = SearchSpace::new().with(
            "x",
            SearchSpace::set_of(&[
                ParamValue::Float(1.0),
                ParamValue::Float(4.0),
                ParamValue::Float(2.0),
            ]),
        );
        let out = grid_search(&space, |a| Ok(a["x"].as_f64().unwrap()), true).unwrap();
        let max = out.trials.iter().map(|t| t.score).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best.score, max);
        let out_min = grid_search(&space, |a| Ok(a["x"].as_f64().unwrap()), false).unwrap();
        assert_eq!(out_min.best.score, 1.0);
    }

    #[test]
    fn random_search_is_seed_deterministic_and_in_range() {
        let space = cnn_search_space();
        let run = |seed| random_search(&space, 50, seed, |_| Ok(1.0), true).unwrap();
        let a = run(9);
        let b = run(9);
        for (ta, tb) in a.trials.iter().zip(&b.trials) {
            assert_eq!(ta.params, tb.params);
        }
        let c = run(10);
        assert!(a.trials.iter().zip(&c.trials).any(|(x, y)| x.params != y.params));

        for t in &a.trials {
            let lr = t.params["lr"].as_f64().unwrap();
            assert!((1e-4..=1e-2).contains(&lr), "lr {lr} out of range");
            let layers = t.params["n_layers"].as_f64().unwrap();
            assert!((1.0..=5.0).contains(&layers));
            let exp = t.params["expansion"].as_f64().unwrap();
            assert!((1.0..=4.0).contains(&exp));
        }
    }

    #[test]
    fn random_single_trial_is_returned() {
        let space = SearchSpace::new().with("x", Domain::IntRange { lo: 0, hi: 10 });
        let out = random_search(&space, 1, 3, |_| Ok(0.25), true).unwrap();
        assert_eq!(out.trials.len(), 1);
        assert_eq!(out.best.score, 0.25);
    }
}
