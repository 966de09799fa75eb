//! Simulated rewrite panels with known content, style and tilt.
//!
//! Each essay draws a latent content vector `C ~ N(mu_G, I)`. The content
//! index is `theta(C)`, the original's style score is `rho0 = premium_G +
//! style_sd * z`, and rewrite `k` carries style `lambda_k + u`. The HIGH
//! scoring function is `theta + rho`; the LOW one subtracts a constant tilt.

mod recovery;

pub use recovery::{evaluate_recovery, ComponentError, RecoveryReport};

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{EssayRecord, FeatureManifest, FeatureVector, GroupLabel, PanelDataset, RewriteKind, VersionKey, VersionRecord};
use crate::error::{Error, Result};
use crate::scorer::{PredictionPanel, PredictionSlice};
use crate::seeds::stream_rng;

/// Shape of the content index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum ThetaMap {
    Linear,
    /// `scale * tanh(linear / scale)`, a smooth saturating nonlinearity.
    Tanh { scale: f64 },
}

/// How observable features are emitted from the latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureModel {
    /// Noise added to each embedding coordinate (embedding = C + noise).
    pub embedding_noise_sd: f64,
    /// Extra embedding columns of pure noise.
    pub noise_columns: usize,
    pub style_dim: usize,
    /// Noise on each style column (style = rho / style_sd + noise).
    pub style_noise_sd: f64,
    /// Loading of every style column on the standardized content index.
    pub cross_loading: f64,
}

impl Default for FeatureModel {
    fn default() -> Self {
        FeatureModel {
            embedding_noise_sd: 0.05,
            noise_columns: 0,
            style_dim: 3,
            style_noise_sd: 0.1,
            cross_loading: 0.0,
        }
    }
}

/// Complete description of a simulated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_high: usize,
    pub n_low: usize,
    pub content_dim: usize,
    /// Standard deviation of theta within a group.
    pub content_sd: f64,
    /// Planted mean difference of theta, HIGH minus LOW.
    pub content_gap: f64,
    pub theta: ThetaMap,
    pub theta_intercept: f64,
    /// Planted mean difference of original style, HIGH minus LOW.
    pub style_gap: f64,
    pub style_sd: f64,
    /// Correlation of the original's style draw with standardized content.
    pub content_style_corr: f64,
    /// Rewrite shifts, one per SAT level; K is their count.
    pub lambda: Vec<f64>,
    /// Per-version rewrite style noise.
    pub rewrite_noise_sd: f64,
    /// Noise of human scores around the group's scoring function.
    pub human_noise_sd: f64,
    /// LOW scorer = HIGH scorer minus this constant.
    pub tilt: f64,
    /// Content-by-rewrite interaction added on `interaction_levels`.
    pub interaction_knob: f64,
    pub interaction_levels: Vec<u8>,
    /// Rejection probability per SAT level (empty = none rejected).
    pub reject_rates: Vec<f64>,
    pub neutral_replicates: usize,
    pub neutral_shift: f64,
    pub neutral_reject_rate: f64,
    pub prompts: Vec<String>,
    pub grades: Vec<String>,
    pub genders: Vec<String>,
    /// Clip human scores into [1, 6].
    pub clip_scores: bool,
    /// Round human scores to integers after clipping.
    pub discretize: bool,
    pub features: FeatureModel,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_high: 2000,
            n_low: 2000,
            content_dim: 3,
            content_sd: 0.6,
            content_gap: 0.5,
            theta: ThetaMap::Linear,
            theta_intercept: 3.3,
            style_gap: 0.2,
            style_sd: 0.35,
            content_style_corr: 0.3,
            lambda: vec![-0.45, -0.3, -0.15, 0.0, 0.15, 0.3],
            rewrite_noise_sd: 0.15,
            human_noise_sd: 0.3,
            tilt: 0.05,
            interaction_knob: 0.0,
            interaction_levels: vec![1],
            reject_rates: Vec::new(),
            neutral_replicates: 0,
            neutral_shift: 0.0,
            neutral_reject_rate: 0.0,
            prompts: ["Car-free cities", "Distance learning", "Phones and driving", "Seeking multiple opinions"]
                .map(String::from)
                .to_vec(),
            grades: ["6", "8", "10", "11"].map(String::from).to_vec(),
            genders: ["F", "M"].map(String::from).to_vec(),
            clip_scores: true,
            discretize: false,
            features: FeatureModel::default(),
            seed: 20_240_601,
        }
    }
}

impl SyntheticConfig {
    pub fn k(&self) -> usize {
        self.lambda.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_high == 0 || self.n_low == 0 {
            return bad("both groups need at least one essay".into());
        }
        if self.content_dim == 0 {
            return bad("content_dim must be at least 1".into());
        }
        if self.content_sd < 0.0 || self.style_sd < 0.0 || self.rewrite_noise_sd < 0.0 || self.human_noise_sd < 0.0 {
            return bad("standard deviations must be non-negative".into());
        }
        if self.content_sd == 0.0 && self.content_gap != 0.0 {
            return bad("degenerate content distribution: zero content_sd with a nonzero content_gap".into());
        }
        if !(-1.0..=1.0).contains(&self.content_style_corr) {
            return bad("content_style_corr must lie in [-1, 1]".into());
        }
        if self.lambda.is_empty() || self.lambda.len() > 6 {
            return bad("lambda needs between 1 and 6 entries".into());
        }
        if !self.reject_rates.is_empty() && self.reject_rates.len() != self.lambda.len() {
            return bad("reject_rates must be empty or match lambda".into());
        }
        if self
            .reject_rates
            .iter()
            .chain([&self.neutral_reject_rate])
            .any(|r| !(0.0..=1.0).contains(r))
        {
            return bad("rejection rates must lie in [0, 1]".into());
        }
        if let ThetaMap::Tanh { scale } = self.theta {
            if scale <= 0.0 {
                return bad("tanh scale must be positive".into());
            }
        }
        if self.prompts.is_empty() || self.grades.is_empty() || self.genders.is_empty() {
            return bad("covariate level lists must be nonempty".into());
        }
        if self.interaction_levels.iter().any(|&l| l == 0 || usize::from(l) > self.lambda.len()) {
            return bad("interaction_levels must name SAT levels 1..=K".into());
        }
        Ok(())
    }

    /// Population R² ceiling of a scorer on originals: Var(signal) / (Var(signal) + noise²),
    /// for a linear theta and unclipped scores.
    pub fn r2_ceiling(&self) -> f64 {
        let signal = self.content_sd.powi(2)
            + self.style_sd.powi(2)
            + 2.0 * self.content_style_corr * self.content_sd * self.style_sd;
        signal / (signal + self.human_noise_sd.powi(2))
    }

    pub fn manifest(&self) -> FeatureManifest {
        FeatureManifest {
            embedding_dim: self.content_dim + self.features.noise_columns,
            style_columns: (0..self.features.style_dim).map(|j| format!("style_{j}")).collect(),
            extra_columns: Vec::new(),
            prompts: self.prompts.clone(),
            covariates: vec!["grade".into(), "gender".into()],
            provenance: [("source".to_string(), "synthetic".to_string()), ("seed".to_string(), self.seed.to_string())].into(),
        }
    }
}

/// Realized latent quantities of a generated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    /// Sample mean of theta, HIGH minus LOW.
    pub content_gap: f64,
    /// Sample mean of original style, HIGH minus LOW.
    pub style_gap: f64,
    pub tilt: f64,
    /// content_gap + style_gap + tilt.
    pub observed_gap: f64,
    pub theta: BTreeMap<String, f64>,
    pub rho0: BTreeMap<String, f64>,
}

impl SyntheticTruth {
    /// Truth after swapping group labels and scorer roles.
    pub fn relabeled(&self) -> SyntheticTruth {
        SyntheticTruth {
            content_gap: -self.content_gap,
            style_gap: -self.style_gap,
            tilt: -self.tilt,
            observed_gap: -self.observed_gap,
            ..self.clone()
        }
    }
}

/// A generated panel with its truth and oracle predictions.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub panel: PanelDataset,
    pub truth: SyntheticTruth,
    /// True scoring functions evaluated on every accepted version.
    pub oracle: PredictionPanel,
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draw a world from `cfg`.
pub fn generate_world(cfg: &SyntheticConfig) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let d = cfg.content_dim;
    let w_coord = cfg.content_sd / (d as f64).sqrt();
    // shift along w so that w·(mu_H - mu_L) = content_gap
    let shift_coord = if cfg.content_sd > 0.0 {
        cfg.content_gap / 2.0 * w_coord / cfg.content_sd.powi(2)
    } else {
        0.0
    };
    let mid_linear = cfg.theta_intercept;
    let r = cfg.content_style_corr;
    let fm = &cfg.features;

    let mut essays = Vec::with_capacity(cfg.n_high + cfg.n_low);
    let mut versions = Vec::new();
    let mut oracle_h = Vec::new();
    let mut theta_map = BTreeMap::new();
    let mut rho_map = BTreeMap::new();
    let mut sums = [[0.0f64; 2]; 2];

    for g in GroupLabel::BOTH {
        let n = if g == GroupLabel::High { cfg.n_high } else { cfg.n_low };
        let sign = if g == GroupLabel::High { 1.0 } else { -1.0 };
        let mut rng = stream_rng(cfg.seed, &format!("world-{g}"));
        for i in 0..n {
            let id = format!("{}{:05}", &g.as_str()[..1], i);
            let z: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            let c: Vec<f64> = z.iter().map(|zj| sign * shift_coord + zj).collect();
            let lin = cfg.theta_intercept + w_coord * c.iter().sum::<f64>();
            let theta = match cfg.theta {
                ThetaMap::Linear => lin,
                ThetaMap::Tanh { scale } => cfg.theta_intercept + scale * ((lin - cfg.theta_intercept) / scale).tanh(),
            };
            let zc = z.iter().sum::<f64>() / (d as f64).sqrt();
            let zs = r * zc + (1.0 - r * r).sqrt() * normal(&mut rng);
            let rho0 = sign * cfg.style_gap / 2.0 + cfg.style_sd * zs;
            let gi = g.index();
            sums[gi][0] += theta;
            sums[gi][1] += rho0;
            theta_map.insert(id.clone(), theta);
            rho_map.insert(id.clone(), rho0);

            let tilt = if g == GroupLabel::Low { cfg.tilt } else { 0.0 };
            let mut human = theta + rho0 - tilt + cfg.human_noise_sd * normal(&mut rng);
            if cfg.clip_scores {
                human = human.clamp(1.0, 6.0);
            }
            if cfg.discretize {
                human = human.round().clamp(1.0, 6.0);
            }
            let covariates = [
                ("grade".to_string(), cfg.grades[rng.random_range(0..cfg.grades.len())].clone()),
                ("gender".to_string(), cfg.genders[rng.random_range(0..cfg.genders.len())].clone()),
            ]
            .into();
            let prompt_name = cfg.prompts[rng.random_range(0..cfg.prompts.len())].clone();
            essays.push(EssayRecord {
                essay_id: id.clone(),
                group: g,
                human_score: Some(human),
                prompt_name,
                covariates,
                text: None,
            });

            let mut emit = |rng: &mut rand_chacha::ChaCha8Rng, k: u32, kind: RewriteKind, style: f64, accepted: bool| {
                let mut embedding: Vec<f64> = c.iter().map(|cj| cj + fm.embedding_noise_sd * normal(rng)).collect();
                embedding.extend((0..fm.noise_columns).map(|_| normal(rng)));
                let sty: Vec<f64> = (0..fm.style_dim)
                    .map(|_| {
                        let base = if cfg.style_sd > 0.0 { style / cfg.style_sd } else { style };
                        base + fm.cross_loading * zc + fm.style_noise_sd * normal(rng)
                    })
                    .collect();
                if accepted {
                    oracle_h.push((VersionKey::new(id.clone(), k, kind), theta + style));
                }
                versions.push(VersionRecord {
                    essay_id: id.clone(),
                    version_k: k,
                    kind,
                    features: FeatureVector {
                        embedding,
                        style: sty,
                        extras: Vec::new(),
                    },
                    accepted,
                });
            };

            emit(&mut rng, 0, RewriteKind::Original, rho0, true);
            for (j, &lam) in cfg.lambda.iter().enumerate() {
                let level = (j + 1) as u8;
                let mut style = lam + cfg.rewrite_noise_sd * normal(&mut rng);
                if cfg.interaction_knob != 0.0 && cfg.interaction_levels.contains(&level) && cfg.content_gap != 0.0 {
                    style += cfg.interaction_knob * (theta - mid_linear) / cfg.content_gap;
                }
                let rate = cfg.reject_rates.get(j).copied().unwrap_or(0.0);
                let accepted = !(rate > 0.0 && rng.random::<f64>() < rate);
                emit(&mut rng, level as u32, RewriteKind::Sat(level), style, accepted);
            }
            for rep in 1..=cfg.neutral_replicates {
                let style = cfg.neutral_shift + cfg.rewrite_noise_sd * normal(&mut rng);
                let accepted = !(cfg.neutral_reject_rate > 0.0 && rng.random::<f64>() < cfg.neutral_reject_rate);
                emit(&mut rng, rep as u32, RewriteKind::Neutral, style, accepted);
            }
        }
    }

    let nh = cfg.n_high as f64;
    let nl = cfg.n_low as f64;
    let content_gap = sums[0][0] / nh - sums[1][0] / nl;
    let style_gap = sums[0][1] / nh - sums[1][1] / nl;
    let truth = SyntheticTruth {
        content_gap,
        style_gap,
        tilt: cfg.tilt,
        observed_gap: content_gap + style_gap + cfg.tilt,
        theta: theta_map,
        rho0: rho_map,
    };
    let low: Vec<(VersionKey, f64)> = oracle_h.iter().map(|(k, s)| (k.clone(), s - cfg.tilt)).collect();
    let oracle = PredictionPanel::new(PredictionSlice::external(oracle_h), PredictionSlice::external(low));
    let panel = PanelDataset::new(essays, versions, cfg.manifest())?.with_seed("simulate", cfg.seed);
    Ok(SyntheticWorld { panel, truth, oracle })
}
