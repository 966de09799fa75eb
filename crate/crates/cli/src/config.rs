use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stylegap::data::GroupLabel;
use stylegap::decomposition::{DecomposeOptions, EstimatorVariant, KindSelection};
use stylegap::diagnostics::{DidOptions, ScorerChoice};
use stylegap::inference::{BootstrapConfig, BootstrapMode};
use stylegap::rewrite::EndpointConfig;
use stylegap::scorer::{FeatureSubset, TrainConfig};
use stylegap::seeds::derive_seed;
use stylegap::synthetic::SyntheticConfig;

use crate::layout::Layout;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Simulate,
    Rewrite,
    Verify,
    Train,
    Decompose,
    Diagnose,
    Bootstrap,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Simulate,
        Stage::Rewrite,
        Stage::Verify,
        Stage::Train,
        Stage::Decompose,
        Stage::Diagnose,
        Stage::Bootstrap,
        Stage::Report,
    ];

    /// Position in the pipeline; ingest and simulate share the first slot.
    fn rank(self) -> u8 {
        match self {
            Stage::Ingest | Stage::Simulate => 0,
            Stage::Rewrite => 1,
            Stage::Verify => 2,
            Stage::Train => 3,
            Stage::Decompose => 4,
            Stage::Diagnose => 5,
            Stage::Bootstrap => 6,
            Stage::Report => 7,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Simulate => "simulate",
            Stage::Rewrite => "rewrite",
            Stage::Verify => "verify",
            Stage::Train => "train",
            Stage::Decompose => "decompose",
            Stage::Diagnose => "diagnose",
            Stage::Bootstrap => "bootstrap",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .with_context(|| format!("unknown stage {s:?}"))
    }
}

/// External input files. Relative paths resolve against the config file's
/// directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub essays: Option<PathBuf>,
    pub versions: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// Features of generated rewrites, in the versions layout.
    pub rewrite_features: Option<PathBuf>,
    /// Endpoint call log; defaults to `rewrite/archive.jsonl` in the output.
    pub archive: Option<PathBuf>,
    /// Imported predictions for `train.source = "external"`.
    pub predictions: Option<PathBuf>,
    pub provenance: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionSource {
    #[default]
    Learned,
    /// The true scoring functions of a simulated world.
    Oracle,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub source: PredictionSource,
    pub n_folds: usize,
    pub subset: FeatureSubset,
    pub high: TrainConfig,
    pub low: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            source: PredictionSource::Learned,
            n_folds: 5,
            subset: FeatureSubset::default(),
            high: TrainConfig::default(),
            low: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeSection {
    pub variant: EstimatorVariant,
    pub reference: GroupLabel,
    pub kinds: KindSelection,
    /// Covariates to split the subgroup tables by.
    pub group_by: Vec<String>,
    pub robustness: bool,
    /// Also run the neutral-baseline decomposition when neutral rewrites exist.
    pub neutral: bool,
}

impl Default for DecomposeSection {
    fn default() -> Self {
        DecomposeSection {
            variant: EstimatorVariant::FixedEffects,
            reference: GroupLabel::High,
            kinds: KindSelection::Sat,
            group_by: vec!["prompt_name".into()],
            robustness: true,
            neutral: true,
        }
    }
}

impl DecomposeSection {
    pub fn options(&self) -> DecomposeOptions {
        DecomposeOptions {
            variant: self.variant,
            reference: self.reference,
            kinds: self.kinds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    pub did: bool,
    pub did_options: DidOptions,
    pub rewrite_means: bool,
    pub means_scorer: ScorerChoice,
    pub ci_level: f64,
    pub correlation: bool,
    /// Out-of-fold R² on content, style and joint feature subsets.
    pub subset_r2: bool,
    /// Separability of the groups from their originals' features.
    pub auc: bool,
    pub calibration_bins: usize,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        DiagnoseSection {
            did: true,
            did_options: DidOptions::default(),
            rewrite_means: true,
            means_scorer: ScorerChoice::default(),
            ci_level: 0.95,
            correlation: true,
            subset_r2: false,
            auc: false,
            calibration_bins: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    pub b: usize,
    pub mode: BootstrapMode,
    pub ci_level: f64,
    pub stratified: bool,
    pub robustness: bool,
    pub subgroups: bool,
    pub did_cells: bool,
    pub correlation: bool,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        let c = BootstrapConfig::default();
        BootstrapSection {
            b: c.b,
            mode: c.mode,
            ci_level: c.ci_level,
            stratified: c.stratified,
            robustness: true,
            subgroups: true,
            did_cells: false,
            correlation: true,
        }
    }
}

impl BootstrapSection {
    pub fn config(&self, seed: u64) -> BootstrapConfig {
        BootstrapConfig {
            b: self.b,
            seed,
            mode: self.mode,
            ci_level: self.ci_level,
            stratified: self.stratified,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewriteSection {
    pub neutral_replicates: u32,
}

impl Default for RewriteSection {
    fn default() -> Self {
        RewriteSection { neutral_replicates: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub histogram_bins: usize,
    pub scatter_points: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            histogram_bins: 40,
            scatter_points: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub stages: Vec<Stage>,
    /// Every stage seed is derived from this one.
    pub seed: u64,
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub paths: Paths,
    pub simulate: SyntheticConfig,
    pub rewrite: RewriteSection,
    pub endpoint: EndpointConfig,
    pub train: TrainSection,
    pub decompose: DecomposeSection,
    pub diagnose: DiagnoseSection,
    pub bootstrap: BootstrapSection,
    pub report: ReportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            stages: vec![
                Stage::Simulate,
                Stage::Train,
                Stage::Decompose,
                Stage::Diagnose,
                Stage::Bootstrap,
                Stage::Report,
            ],
            seed: 20_240_601,
            workers: None,
            out_dir: None,
            paths: Paths::default(),
            simulate: SyntheticConfig::default(),
            rewrite: RewriteSection::default(),
            endpoint: EndpointConfig::default(),
            train: TrainSection::default(),
            decompose: DecomposeSection::default(),
            diagnose: DiagnoseSection::default(),
            bootstrap: BootstrapSection::default(),
            report: ReportSection::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = RunConfig::parse(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        let base = std::path::absolute(base)?;
        let p = &mut cfg.paths;
        for slot in [
            &mut p.essays,
            &mut p.versions,
            &mut p.manifest,
            &mut p.rewrite_features,
            &mut p.archive,
            &mut p.predictions,
            &mut p.provenance,
        ] {
            resolve(&base, slot);
        }
        resolve(&base, &mut cfg.out_dir);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text)?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            bail!(
                "config schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            );
        }
        let defaults = RunConfig::default();
        for (section, set, default) in [
            ("simulate", cfg.simulate.seed, defaults.simulate.seed),
            ("train.high", cfg.train.high.seed, defaults.train.high.seed),
            ("train.low", cfg.train.low.seed, defaults.train.low.seed),
            ("diagnose.did_options", cfg.diagnose.did_options.seed, defaults.diagnose.did_options.seed),
        ] {
            if set != default {
                bail!("[{section}] seed is derived from the top-level seed; remove it");
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// The seed each stage uses, keyed by stream name.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        ["simulate", "crossfit", "train-high", "train-low", "did", "bootstrap", "diagnose", "scatter"]
            .into_iter()
            .map(|s| (s.to_string(), derive_seed(self.seed, s)))
            .collect()
    }

    pub fn seed_for(&self, stream: &str) -> u64 {
        derive_seed(self.seed, stream)
    }

    /// Check stage order and that every stage's inputs exist on disk or are
    /// produced by an earlier stage of `stages`.
    pub fn validate_plan(&self, stages: &[Stage], layout: &Layout) -> Result<()> {
        if stages.is_empty() {
            bail!("no stages to run");
        }
        for w in stages.windows(2) {
            if w[1].rank() <= w[0].rank() {
                bail!("stage {} cannot follow {}", w[1], w[0]);
            }
        }
        let mut produced: Vec<Artifact> = Vec::new();
        for &stage in stages {
            for need in self.requires(stage) {
                match need {
                    Need::Artifact(a) => {
                        if !produced.contains(&a) && !layout.exists(a) {
                            bail!("stage {stage} needs {} ({}), which no earlier stage produces", a.describe(), layout.path_of(a).display());
                        }
                    }
                    Need::File(key, path) => match path {
                        None => bail!("stage {stage} needs paths.{key} in the config"),
                        Some(p) if !p.exists() => bail!("stage {stage} input paths.{key} = {} does not exist", p.display()),
                        Some(_) => {}
                    },
                }
            }
            produced.extend(self.produces(stage));
        }
        Ok(())
    }

    fn requires(&self, stage: Stage) -> Vec<Need> {
        use Artifact::*;
        let file = |key: &'static str, p: &Option<PathBuf>| Need::File(key, p.clone());
        match stage {
            Stage::Ingest => vec![
                file("essays", &self.paths.essays),
                file("versions", &self.paths.versions),
                file("manifest", &self.paths.manifest),
            ],
            Stage::Simulate => vec![],
            Stage::Rewrite => vec![Need::Artifact(Panel)],
            Stage::Verify => vec![
                Need::Artifact(Panel),
                Need::Artifact(Rewrites),
                file("rewrite_features", &self.paths.rewrite_features),
            ],
            Stage::Train => {
                let mut v = vec![Need::Artifact(Panel)];
                match self.train.source {
                    PredictionSource::Learned => {}
                    PredictionSource::Oracle => v.push(Need::Artifact(Oracle)),
                    PredictionSource::External => {
                        v.push(file("predictions", &self.paths.predictions));
                        v.push(file("provenance", &self.paths.provenance));
                    }
                }
                v
            }
            Stage::Decompose | Stage::Diagnose => vec![Need::Artifact(Panel), Need::Artifact(Predictions)],
            Stage::Bootstrap => {
                let mut v = vec![Need::Artifact(Panel), Need::Artifact(Predictions)];
                if self.bootstrap.mode == BootstrapMode::Full {
                    v.push(Need::Artifact(Setup));
                }
                v
            }
            Stage::Report => vec![Need::Artifact(Panel), Need::Artifact(Decomposition)],
        }
    }

    fn produces(&self, stage: Stage) -> Vec<Artifact> {
        use Artifact::*;
        match stage {
            Stage::Ingest => vec![Panel],
            Stage::Simulate => vec![Panel, Oracle],
            Stage::Rewrite => vec![Rewrites],
            Stage::Verify => vec![Panel],
            Stage::Train => match self.train.source {
                PredictionSource::Learned => vec![Predictions, Setup],
                _ => vec![Predictions],
            },
            Stage::Decompose => vec![Decomposition],
            Stage::Diagnose | Stage::Bootstrap | Stage::Report => vec![],
        }
    }
}

/// Intermediate products passed between stages through the output directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Artifact {
    Panel,
    Oracle,
    Rewrites,
    Predictions,
    Setup,
    Decomposition,
}

impl Artifact {
    fn describe(self) -> &'static str {
        match self {
            Artifact::Panel => "a panel",
            Artifact::Oracle => "oracle predictions",
            Artifact::Rewrites => "rewrite results",
            Artifact::Predictions => "scorer predictions",
            Artifact::Setup => "scorer training settings",
            Artifact::Decomposition => "decomposition results",
        }
    }
}

enum Need {
    Artifact(Artifact),
    File(&'static str, Option<PathBuf>),
}
