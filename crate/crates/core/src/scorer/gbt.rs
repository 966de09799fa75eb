//! Histogram gradient boosting for squared loss.
//!
//! Each column is cut at up to `max_bins - 1` quantile thresholds; split search
//! is exact over those thresholds. Leaves use L1/L2-shrunk residual sums:
//! `w = sign(G) * max(|G| - l1, 0) / (H + l2)` with `G` the residual sum and
//! `H` the row count.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    SquaredError,
}

/// Boosting hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub subsample_rows: f64,
    pub l1_leaf: f64,
    pub l2_leaf: f64,
    pub min_leaf_weight: f64,
    pub loss: Loss,
    pub max_bins: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_trees: 396,
            max_depth: 4,
            learning_rate: 0.05,
            subsample_rows: 0.8,
            l1_leaf: 0.055,
            l2_leaf: 0.026,
            min_leaf_weight: 1.0,
            loss: Loss::SquaredError,
            max_bins: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.subsample_rows > 0.0 && self.subsample_rows <= 1.0) {
            return bad("subsample_rows must lie in (0, 1]");
        }
        if !(self.l1_leaf >= 0.0 && self.l2_leaf >= 0.0) {
            return bad("l1_leaf and l2_leaf must be non-negative");
        }
        if !(self.min_leaf_weight >= 0.0) {
            return bad("min_leaf_weight must be non-negative");
        }
        if !(2..=256).contains(&self.max_bins) {
            return bad("max_bins must lie in 2..=256");
        }
        Ok(())
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f64>, n_rows: usize, n_cols: usize) -> Result<Self> {
        if data.len() != n_rows * n_cols {
            return Err(Error::DimensionMismatch {
                expected: n_rows * n_cols,
                got: data.len(),
            });
        }
        Ok(FeatureMatrix { data, n_rows, n_cols })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for r in rows {
            if r.len() != n_cols {
                return Err(Error::DimensionMismatch {
                    expected: n_cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(FeatureMatrix {
            data,
            n_rows: rows.len(),
            n_cols,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }

    /// Rows at the given positions, in order.
    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.n_cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            data,
            n_rows: idx.len(),
            n_cols: self.n_cols,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, at: usize) -> usize {
            match t.nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }
}

/// Trained additive tree model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub n_features: usize,
    pub base_prediction: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
    /// Training RMSE after each tree, over all training rows.
    pub train_rmse: Vec<f64>,
}

impl Ensemble {
    pub fn predict_row(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        let mut s = 0.0;
        for t in &self.trees {
            s += t.predict(x);
        }
        Ok(self.base_prediction + self.learning_rate * s)
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        (0..x.n_rows()).map(|i| self.predict_row(x.row(i))).collect()
    }
}

/// Column thresholds; bin of `x` is the number of cuts `<= x`.
struct Bins {
    cuts: Vec<Vec<f64>>,
    /// Column-major bin codes.
    codes: Vec<Vec<u8>>,
}

fn column_cuts(values: &mut [f64], max_bins: usize) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    let mut uniq: Vec<f64> = Vec::new();
    for &v in values.iter() {
        if uniq.last() != Some(&v) {
            uniq.push(v);
        }
    }
    if uniq.len() <= 1 {
        return Vec::new();
    }
    if uniq.len() <= max_bins {
        return uniq
            .windows(2)
            .map(|w| {
                let mid = w[0] + (w[1] - w[0]) / 2.0;
                if mid > w[0] {
                    mid
                } else {
                    w[1]
                }
            })
            .collect();
    }
    let n = values.len();
    let mut cuts: Vec<f64> = Vec::with_capacity(max_bins - 1);
    for j in 1..max_bins {
        let c = values[(j * n) / max_bins];
        if c > values[0] && cuts.last().is_none_or(|&l| c > l) {
            cuts.push(c);
        }
    }
    cuts
}

impl Bins {
    fn build(x: &FeatureMatrix, max_bins: usize) -> Bins {
        let mut cuts = Vec::with_capacity(x.n_cols());
        let mut codes = Vec::with_capacity(x.n_cols());
        for j in 0..x.n_cols() {
            let col: Vec<f64> = (0..x.n_rows()).map(|i| x.get(i, j)).collect();
            let c = column_cuts(&mut col.clone(), max_bins);
            let code: Vec<u8> = col
                .iter()
                .map(|v| c.partition_point(|t| t <= v) as u8)
                .collect();
            cuts.push(c);
            codes.push(code);
        }
        Bins { cuts, codes }
    }
}

fn shrink(g: f64, l1: f64) -> f64 {
    g.signum() * (g.abs() - l1).max(0.0)
}

struct Grower<'a> {
    bins: &'a Bins,
    resid: &'a [f64],
    cfg: &'a TrainConfig,
    nodes: Vec<Node>,
    /// Per node: (feature, bin) of splits, used for in-sample updates.
    split_bins: Vec<Option<(usize, u8)>>,
    hist_g: Vec<f64>,
    hist_n: Vec<f64>,
}

impl Grower<'_> {
    fn objective(&self, g: f64, h: f64) -> f64 {
        let t = shrink(g, self.cfg.l1_leaf);
        t * t / (h + self.cfg.l2_leaf)
    }

    fn leaf(&mut self, g: f64, h: f64) -> usize {
        let value = shrink(g, self.cfg.l1_leaf) / (h + self.cfg.l2_leaf);
        self.nodes.push(Node::Leaf { value });
        self.split_bins.push(None);
        self.nodes.len() - 1
    }

    fn grow(&mut self, rows: &mut [u32], depth: usize) -> usize {
        let g: f64 = rows.iter().map(|&r| self.resid[r as usize]).sum();
        let h = rows.len() as f64;
        let mlw = self.cfg.min_leaf_weight;
        if depth >= self.cfg.max_depth || h < 2.0 * mlw.max(1.0) {
            return self.leaf(g, h);
        }
        let parent = self.objective(g, h);
        let mut best: Option<(f64, usize, u8)> = None;
        for (f, cuts) in self.bins.cuts.iter().enumerate() {
            let nb = cuts.len();
            if nb == 0 {
                continue;
            }
            let codes = &self.bins.codes[f];
            self.hist_g[..=nb].iter_mut().for_each(|v| *v = 0.0);
            self.hist_n[..=nb].iter_mut().for_each(|v| *v = 0.0);
            for &r in rows.iter() {
                let b = codes[r as usize] as usize;
                self.hist_g[b] += self.resid[r as usize];
                self.hist_n[b] += 1.0;
            }
            let (mut gl, mut hl) = (0.0, 0.0);
            for j in 0..nb {
                gl += self.hist_g[j];
                hl += self.hist_n[j];
                let hr = h - hl;
                if hl < mlw || hr < mlw || hl == 0.0 || hr == 0.0 {
                    continue;
                }
                let gain = self.objective(gl, hl) + self.objective(g - gl, hr) - parent;
                if gain > 1e-12 && best.is_none_or(|(bg, _, _)| gain > bg) {
                    best = Some((gain, f, j as u8));
                }
            }
        }
        let Some((_, f, j)) = best else {
            return self.leaf(g, h);
        };
        let codes = &self.bins.codes[f];
        let mut split = 0;
        for i in 0..rows.len() {
            if codes[rows[i] as usize] <= j {
                rows.swap(i, split);
                split += 1;
            }
        }
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        self.split_bins.push(Some((f, j)));
        let (lrows, rrows) = rows.split_at_mut(split);
        let left = self.grow(lrows, depth + 1);
        let right = self.grow(rrows, depth + 1);
        self.nodes[at] = Node::Split {
            feature: f,
            threshold: self.bins.cuts[f][j as usize],
            left,
            right,
        };
        at
    }

    fn predict_binned(&self, r: usize) -> f64 {
        let mut at = 0;
        loop {
            match (&self.nodes[at], self.split_bins[at]) {
                (Node::Leaf { value }, _) => return *value,
                (Node::Split { left, right, .. }, Some((f, j))) => {
                    at = if self.bins.codes[f][r] <= j { *left } else { *right }
                }
                _ => unreachable!("split node without bin"),
            }
        }
    }
}

/// Fit a boosted ensemble to `y` by stagewise least squares.
pub fn train(x: &FeatureMatrix, y: &[f64], cfg: &TrainConfig) -> Result<Ensemble> {
    cfg.validate()?;
    let n = x.n_rows();
    if n == 0 {
        return Err(Error::EmptyData("no training rows".into()));
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    if n < 2 {
        return Err(Error::EmptyData("at least two training rows are required".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidRecord("non-finite target".into()));
    }
    let bins = Bins::build(x, cfg.max_bins);
    let base = y.iter().sum::<f64>() / n as f64;
    let mut pred = vec![base; n];
    let mut resid: Vec<f64> = y.iter().map(|v| v - base).collect();
    let m = ((cfg.subsample_rows * n as f64).round() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trees = Vec::with_capacity(cfg.n_trees);
    let mut trace = Vec::with_capacity(cfg.n_trees);
    let mut hist_g = vec![0.0; cfg.max_bins];
    let mut hist_n = vec![0.0; cfg.max_bins];
    for _ in 0..cfg.n_trees {
        let mut rows: Vec<u32> = if m == n {
            (0..n as u32).collect()
        } else {
            let mut s: Vec<u32> = index::sample(&mut rng, n, m).into_iter().map(|i| i as u32).collect();
            s.sort_unstable();
            s
        };
        let mut grower = Grower {
            bins: &bins,
            resid: &resid,
            cfg,
            nodes: Vec::new(),
            split_bins: Vec::new(),
            hist_g: std::mem::take(&mut hist_g),
            hist_n: std::mem::take(&mut hist_n),
        };
        grower.grow(&mut rows, 0);
        let mut sse = 0.0;
        let mut delta = vec![0.0; n];
        for (r, d) in delta.iter_mut().enumerate() {
            *d = grower.predict_binned(r);
        }
        hist_g = grower.hist_g;
        hist_n = grower.hist_n;
        let tree = Tree { nodes: grower.nodes };
        for r in 0..n {
            pred[r] += cfg.learning_rate * delta[r];
            resid[r] = y[r] - pred[r];
            sse += resid[r] * resid[r];
        }
        trace.push((sse / n as f64).sqrt());
        trees.push(tree);
    }
    Ok(Ensemble {
        n_features: x.n_cols(),
        base_prediction: base,
        learning_rate: cfg.learning_rate,
        trees,
        train_rmse: trace,
    })
}
