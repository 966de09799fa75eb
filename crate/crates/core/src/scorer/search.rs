use rand::Rng;
use serde::{Deserialize, Serialize};

use super::crossfit::{out_of_fold, shuffled_folds};
use super::gbt::{FeatureMatrix, TrainConfig};
use super::metrics::rmse;
use crate::error::{Error, Result};
use crate::seeds::{derive_seed, stream_rng};

/// Sampling range of one hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRange {
    Fixed(f64),
    Uniform(f64, f64),
    LogUniform(f64, f64),
    Choice(Vec<f64>),
}

impl ParamRange {
    fn check(&self, name: &str) -> Result<()> {
        let bad = || Err(Error::Config(format!("invalid search range for {name}: {self:?}")));
        match self {
            ParamRange::Fixed(v) if v.is_finite() => Ok(()),
            ParamRange::Uniform(a, b) if a.is_finite() && b.is_finite() && a <= b => Ok(()),
            ParamRange::LogUniform(a, b) if *a > 0.0 && b.is_finite() && a <= b => Ok(()),
            ParamRange::Choice(v) if !v.is_empty() && v.iter().all(|x| x.is_finite()) => Ok(()),
            _ => bad(),
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            ParamRange::Fixed(v) => *v,
            ParamRange::Uniform(a, b) | ParamRange::LogUniform(a, b) if a == b => *a,
            ParamRange::Uniform(a, b) => rng.random_range(*a..=*b),
            ParamRange::LogUniform(a, b) => rng.random_range(a.ln()..=b.ln()).exp(),
            ParamRange::Choice(v) => v[rng.random_range(0..v.len())],
        }
    }
}

/// Search space over the tunable boosting parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub n_trees: ParamRange,
    pub max_depth: ParamRange,
    pub learning_rate: ParamRange,
    pub subsample_rows: ParamRange,
    pub l1_leaf: ParamRange,
    pub l2_leaf: ParamRange,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            n_trees: ParamRange::Uniform(100.0, 600.0),
            max_depth: ParamRange::Choice(vec![2.0, 3.0, 4.0, 5.0, 6.0]),
            learning_rate: ParamRange::LogUniform(0.01, 0.2),
            subsample_rows: ParamRange::Uniform(0.5, 1.0),
            l1_leaf: ParamRange::LogUniform(1e-3, 1.0),
            l2_leaf: ParamRange::LogUniform(1e-3, 1.0),
        }
    }
}

impl SearchSpace {
    /// Space holding only the given configuration.
    pub fn point(cfg: &TrainConfig) -> Self {
        SearchSpace {
            n_trees: ParamRange::Fixed(cfg.n_trees as f64),
            max_depth: ParamRange::Fixed(cfg.max_depth as f64),
            learning_rate: ParamRange::Fixed(cfg.learning_rate),
            subsample_rows: ParamRange::Fixed(cfg.subsample_rows),
            l1_leaf: ParamRange::Fixed(cfg.l1_leaf),
            l2_leaf: ParamRange::Fixed(cfg.l2_leaf),
        }
    }

    fn check(&self) -> Result<()> {
        self.n_trees.check("n_trees")?;
        self.max_depth.check("max_depth")?;
        self.learning_rate.check("learning_rate")?;
        self.subsample_rows.check("subsample_rows")?;
        self.l1_leaf.check("l1_leaf")?;
        self.l2_leaf.check("l2_leaf")
    }

    fn sample(&self, base: &TrainConfig, rng: &mut impl Rng) -> TrainConfig {
        TrainConfig {
            n_trees: self.n_trees.sample(rng).round() as usize,
            max_depth: self.max_depth.sample(rng).round() as usize,
            learning_rate: self.learning_rate.sample(rng),
            subsample_rows: self.subsample_rows.sample(rng),
            l1_leaf: self.l1_leaf.sample(rng),
            l2_leaf: self.l2_leaf.sample(rng),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub config: TrainConfig,
    pub cv_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: TrainConfig,
    pub trials: Vec<Trial>,
}

/// Mean RMSE over shuffled K-fold splits of `(x, y)`.
pub fn cv_rmse(x: &FeatureMatrix, y: &[f64], cfg: &TrainConfig, folds: &[usize], n_folds: usize) -> Result<f64> {
    let oof = out_of_fold(x, y, folds, n_folds, cfg)?;
    let mut total = 0.0;
    for f in 0..n_folds {
        let (p, t): (Vec<f64>, Vec<f64>) = (0..y.len()).filter(|&i| folds[i] == f).map(|i| (oof[i], y[i])).unzip();
        total += rmse(&p, &t)?;
    }
    Ok(total / n_folds as f64)
}

/// Randomized search minimizing mean cross-validated RMSE. Ties keep the
/// earliest sampled configuration.
pub fn random_search(
    x: &FeatureMatrix,
    y: &[f64],
    space: &SearchSpace,
    base: &TrainConfig,
    n_iter: usize,
    folds: usize,
    seed: u64,
) -> Result<SearchOutcome> {
    if n_iter < 1 {
        return Err(Error::Config("n_iter must be at least 1".into()));
    }
    if folds < 2 || folds > y.len() {
        return Err(Error::Config(format!("cannot split {} rows into {folds} folds", y.len())));
    }
    space.check()?;
    let labels = shuffled_folds(y.len(), folds, derive_seed(seed, "search-folds"));
    let mut rng = stream_rng(seed, "search-sample");
    let mut trials = Vec::with_capacity(n_iter);
    let mut best: Option<(f64, usize)> = None;
    for t in 0..n_iter {
        let cfg = space.sample(base, &mut rng);
        cfg.validate()?;
        let score = cv_rmse(x, y, &cfg, &labels, folds)?;
        if best.is_none_or(|(b, _)| score < b) {
            best = Some((score, t));
        }
        trials.push(Trial { config: cfg, cv_rmse: score });
    }
    let (_, at) = best.expect("n_iter >= 1");
    Ok(SearchOutcome {
        best: trials[at].config.clone(),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize) -> (FeatureMatrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let y = rows.iter().map(|r| r[0] + 0.05 * rng.random::<f64>()).collect();
        (FeatureMatrix::from_rows(&rows).unwrap(), y)
    }

    #[test]
    fn collapsed_space_returns_the_point() {
        let (x, y) = data(60);
        let base = TrainConfig { n_trees: 20, l1_leaf: 0.037, l2_leaf: 0.011, ..Default::default() };
        let mut space = SearchSpace::point(&base);
        space.l1_leaf = ParamRange::LogUniform(0.037, 0.037);
        let out = random_search(&x, &y, &space, &base, 3, 3, 1).unwrap();
        assert_eq!(out.best, base);
        assert_eq!(out.trials.len(), 3);
    }

    #[test]
    fn picks_the_exhaustive_argmin_with_first_sampled_ties() {
        let (x, y) = data(150);
        let base = TrainConfig { n_trees: 30, ..Default::default() };
        let mut space = SearchSpace::point(&base);
        space.max_depth = ParamRange::Choice(vec![1.0, 4.0]);
        let out = random_search(&x, &y, &space, &base, 6, 3, 4).unwrap();
        let labels = shuffled_folds(150, 3, derive_seed(4, "search-folds"));
        let mut oracle: Option<(f64, TrainConfig)> = None;
        for t in &out.trials {
            let s = cv_rmse(&x, &y, &t.config, &labels, 3).unwrap();
            assert_eq!(s, t.cv_rmse);
            if oracle.as_ref().is_none_or(|(b, _)| s < *b) {
                oracle = Some((s, t.config.clone()));
            }
        }
        assert_eq!(out.best, oracle.unwrap().1);
    }

    #[test]
    fn zero_iterations_rejected() {
        let (x, y) = data(30);
        let base = TrainConfig::default();
        assert!(random_search(&x, &y, &SearchSpace::point(&base), &base, 0, 3, 0).is_err());
    }
}
