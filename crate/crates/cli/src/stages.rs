use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use stylegap::data::{emit_panel, ingest_panel, read_manifest, read_version_features, write_manifest, GroupLabel, PanelDataset, RewriteKind};
use stylegap::decomposition::{
    self, fit_fixed_effects, scored_panel, ComponentEstimates, DecomposeOptions, DecompositionResult, EstimatorVariant,
    NeutralDecomposition, TableRow,
};
use stylegap::diagnostics::{self, DidMatrix, DidOptions, RewriteMean, SeparationResult, SubsetR2};
use stylegap::inference::{self, BootstrapMode, BootstrapSummary, StatisticSpec, TrainingSetup};
use stylegap::report::{self, DecompositionTable, ReportRow};
use stylegap::rewrite::{self, Archive, HttpBackend, KeyedFeatures, RewriteRequest, RewriteResult};
use stylegap::scorer::{self, CrossFitPlan, PredictionPanel, ScorerMetrics, TrainConfig};
use stylegap::synthetic::generate_world;

use crate::config::{PredictionSource, RunConfig, Stage};
use crate::layout::Layout;

pub struct Ctx {
    pub cfg: RunConfig,
    pub layout: Layout,
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

impl Ctx {
    pub fn run(&self, stage: Stage) -> Result<()> {
        log::info!("stage {stage}");
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::Simulate => self.simulate(),
            Stage::Rewrite => self.rewrite(),
            Stage::Verify => self.verify(),
            Stage::Train => self.train(),
            Stage::Decompose => self.decompose(),
            Stage::Diagnose => self.diagnose(),
            Stage::Bootstrap => self.bootstrap(),
            Stage::Report => self.report(),
        }
    }

    fn load_panel(&self) -> Result<PanelDataset> {
        let l = &self.layout;
        let schema = read_manifest(&l.panel_manifest())?;
        let (ds, _) = ingest_panel(&l.essays(), &l.versions(), &schema)?;
        Ok(ds)
    }

    fn save_panel(&self, ds: &PanelDataset) -> Result<()> {
        let l = &self.layout;
        ensure_parent(&l.essays())?;
        emit_panel(ds, &l.essays(), &l.versions())?;
        write_manifest(&l.panel_manifest(), ds.manifest())?;
        Ok(())
    }

    fn load_predictions(&self) -> Result<PredictionPanel> {
        let (csv, prov) = self.layout.predictions();
        Ok(PredictionPanel::read(&csv, &prov)?)
    }

    fn group_configs(&self) -> [TrainConfig; 2] {
        let t = &self.cfg.train;
        [
            TrainConfig {
                seed: self.cfg.seed_for("train-high"),
                ..t.high.clone()
            },
            TrainConfig {
                seed: self.cfg.seed_for("train-low"),
                ..t.low.clone()
            },
        ]
    }

    fn ingest(&self) -> Result<()> {
        let p = &self.cfg.paths;
        let (Some(essays), Some(versions), Some(manifest)) = (&p.essays, &p.versions, &p.manifest) else {
            bail!("ingest needs paths.essays, paths.versions and paths.manifest");
        };
        let schema = read_manifest(manifest)?;
        let (ds, summary) = ingest_panel(essays, versions, &schema)?;
        let validation = stylegap::data::validate_panel(&ds);
        for f in validation.failures() {
            log::warn!("check {} failed: {}", f.name, f.detail);
        }
        self.save_panel(&ds)?;
        write_json(&self.layout.join("panel/ingest.json"), &summary)?;
        write_json(&self.layout.join("panel/validation.json"), &validation)?;
        println!(
            "ingested {} essays ({} HIGH, {} LOW), K = {}",
            ds.essays().len(),
            validation.n_high,
            validation.n_low,
            ds.k()
        );
        Ok(())
    }

    fn simulate(&self) -> Result<()> {
        let mut sc = self.cfg.simulate.clone();
        sc.seed = self.cfg.seed_for("simulate");
        let world = generate_world(&sc)?;
        self.save_panel(&world.panel)?;
        write_json(&self.layout.truth(), &world.truth)?;
        let (csv, prov) = self.layout.oracle();
        world.oracle.write(&csv, &prov)?;
        write_json(&self.layout.join("panel/validation.json"), &stylegap::data::validate_panel(&world.panel))?;
        println!(
            "simulated {} essays; planted content {:.4}, style {:.4}, tilt {:.4}",
            world.panel.essays().len(),
            world.truth.content_gap,
            world.truth.style_gap,
            world.truth.tilt
        );
        Ok(())
    }

    fn rewrite(&self) -> Result<()> {
        let ds = self.load_panel()?;
        let essays: Vec<(String, String)> = ds
            .essays()
            .iter()
            .filter_map(|e| e.text.clone().map(|t| (e.essay_id.clone(), t)))
            .collect();
        if essays.is_empty() {
            bail!("no essay texts in the panel; the essays file needs a text column");
        }
        let archive_path = self.cfg.paths.archive.clone().unwrap_or_else(|| self.layout.default_archive());
        ensure_parent(&archive_path)?;
        let archive = Archive::open(&archive_path)?;
        let backend = HttpBackend::new(self.cfg.endpoint.clone())?;
        let requests = RewriteRequest::standard(self.cfg.rewrite.neutral_replicates);
        let results = rewrite::run_rewrites(&backend, &archive, &essays, &requests, &self.cfg.endpoint)?;
        let path = self.layout.rewrite_results();
        ensure_parent(&path)?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
        for r in &results {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        let failed = results.iter().filter(|r| r.verdict == rewrite::Verdict::Failed).count();
        println!("{} rewrites for {} essays, {failed} failed", results.len(), essays.len());
        Ok(())
    }

    fn verify(&self) -> Result<()> {
        let ds = self.load_panel()?;
        let text = std::fs::read_to_string(self.layout.rewrite_results())?;
        let results: Vec<RewriteResult> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()
            .context("parsing rewrite results")?;
        let features_path = self.cfg.paths.rewrite_features.as_ref().context("verify needs paths.rewrite_features")?;
        let features = KeyedFeatures(read_version_features(features_path, ds.manifest())?);
        // earlier versions of the kinds being merged are replaced
        let replaced: BTreeSet<RewriteKind> = results.iter().map(|r| r.rewrite_kind).collect();
        let (essays, versions, manifest) = ds.clone().into_parts();
        let kept: Vec<_> = versions.into_iter().filter(|v| !replaced.contains(&v.kind)).collect();
        let base = ds
            .seed_registry()
            .iter()
            .fold(PanelDataset::new(essays, kept, manifest)?, |acc, (s, v)| acc.with_seed(s, *v));
        let (merged, acceptance) = rewrite::build_versions(&base, &results, &features)?;
        self.save_panel(&merged)?;
        let validation = stylegap::data::validate_panel(&merged);
        #[derive(Serialize)]
        struct Summary<'a> {
            acceptance: &'a [stylegap::data::KindAcceptance],
            no_panel: &'a [String],
        }
        write_json(
            &self.layout.join("verify/acceptance.json"),
            &Summary {
                acceptance: &acceptance,
                no_panel: &validation.no_panel,
            },
        )?;
        for a in &acceptance {
            println!("{:<10} {:>6}/{:<6} accepted ({:.4})", a.kind.to_string(), a.accepted, a.total, a.rate);
        }
        Ok(())
    }

    fn train(&self) -> Result<()> {
        let ds = self.load_panel()?;
        let (csv, prov) = self.layout.predictions();
        ensure_parent(&csv)?;
        let preds = match self.cfg.train.source {
            PredictionSource::Learned => self.train_learned(&ds)?,
            PredictionSource::Oracle => {
                let (c, p) = self.layout.oracle();
                PredictionPanel::read(&c, &p)?
            }
            PredictionSource::External => {
                let p = &self.cfg.paths;
                let (Some(c), Some(v)) = (&p.predictions, &p.provenance) else {
                    bail!("external predictions need paths.predictions and paths.provenance");
                };
                PredictionPanel::read(c, v)?
            }
        };
        preds.check_complete(&ds)?;
        preds.audit_no_leakage()?;
        preds.write(&csv, &prov)?;
        let bins = self.cfg.diagnose.calibration_bins;
        let metrics: Vec<ScorerMetrics> = GroupLabel::BOTH
            .iter()
            .map(|&g| scorer::scorer_metrics(&ds, &preds, g, bins))
            .collect::<stylegap::Result<_>>()?;
        write_json(&self.layout.scorer_metrics(), &metrics)?;
        for m in &metrics {
            println!("{} scorer: out-of-fold R² {:.4}, RMSE {:.4} (n = {})", m.group, m.r2_out_of_fold, m.rmse_out_of_fold, m.n);
        }
        Ok(())
    }

    fn train_learned(&self, ds: &PanelDataset) -> Result<PredictionPanel> {
        let t = &self.cfg.train;
        let plan = CrossFitPlan::new(ds, t.n_folds, self.cfg.seed_for("crossfit"))?;
        let configs = self.group_configs();
        let mut slices = Vec::new();
        for g in GroupLabel::BOTH {
            let out = scorer::cross_fit_predict_with(ds, g, &configs[g.index()], &plan, t.subset)?;
            let dir = self.layout.join("train/models");
            std::fs::create_dir_all(&dir)?;
            for m in out.fold_models.iter().chain([&out.full_model]) {
                let tag = m.tag.to_string().replace(':', "");
                m.save(&dir.join(format!("{}_{tag}.json", g.as_str().to_lowercase())))?;
            }
            slices.push(out.predictions);
        }
        let low = slices.pop().expect("two groups");
        let high = slices.pop().expect("two groups");
        write_json(
            &self.layout.setup(),
            &TrainingSetup {
                configs,
                plan,
                subset: t.subset,
            },
        )?;
        Ok(PredictionPanel::new(high, low))
    }

    fn decompose(&self) -> Result<()> {
        let ds = self.load_panel()?;
        let preds = self.load_predictions()?;
        let d = &self.cfg.decompose;
        let opts = d.options();
        let main = decomposition::decompose(&ds, &preds, &opts)?;
        let robustness = if d.robustness {
            decomposition::robustness_suite(&ds, &preds, &opts)
        } else {
            Vec::new()
        };
        let mut subgroups = Vec::new();
        for cov in &d.group_by {
            let rows = decomposition::subgroup_table(&ds, &preds, std::slice::from_ref(cov), &opts)?;
            subgroups.push(SubgroupBlock {
                covariate: cov.clone(),
                rows: rows.into_iter().skip(1).collect(),
            });
        }
        let neutral = if d.neutral && opts.variant != EstimatorVariant::NeutralBaseline {
            match decomposition::neutral_decompose(&ds, &preds) {
                Ok(n) => Some(n),
                Err(stylegap::Error::NeutralAbsent) => None,
                Err(e) => return Err(e.into()),
            }
        } else {
            None
        };
        let components = self.components(&ds, &preds)?;
        let out = DecomposeOutput {
            options: opts,
            main,
            robustness,
            subgroups,
            neutral,
            components,
        };
        write_json(&self.layout.decomposition(), &out)?;
        print!("{}", DecompositionTable::new("Decomposition", vec![ReportRow::from_result("All", &out.main)]).to_text());
        Ok(())
    }

    /// Per-essay FE estimates under the reference scorer on the SAT panel.
    fn components(&self, ds: &PanelDataset, preds: &PredictionPanel) -> Result<ComponentEstimates> {
        let opts = DecomposeOptions {
            variant: EstimatorVariant::FixedEffects,
            reference: self.cfg.decompose.reference,
            kinds: self.cfg.decompose.kinds,
        };
        Ok(fit_fixed_effects(&scored_panel(ds, preds, &opts)?, opts.reference)?)
    }

    fn diagnose(&self) -> Result<()> {
        let ds = self.load_panel()?;
        let preds = self.load_predictions()?;
        let c = &self.cfg.diagnose;
        let sat_levels = sat_levels(&ds);
        let did = if c.did && sat_levels.len() >= 2 {
            let opts = DidOptions {
                seed: self.cfg.seed_for("did"),
                ..c.did_options
            };
            Some(diagnostics::did_matrix(&ds, &preds, &opts)?)
        } else {
            if c.did {
                log::info!("fewer than two SAT levels; DiD matrix skipped");
            }
            None
        };
        let rewrite_means = if c.rewrite_means {
            diagnostics::rewrite_means(&ds, &preds, c.means_scorer, c.ci_level)?
        } else {
            Vec::new()
        };
        let mut correlation = Vec::new();
        if c.correlation {
            let est = self.components(&ds, &preds)?;
            for g in GroupLabel::BOTH {
                correlation.push(CorrelationRow {
                    group: g,
                    scorer: est.scorer_group,
                    correlation: diagnostics::component_correlation(&est, &ds, g)?,
                });
            }
        }
        let configs = self.group_configs();
        let mut subset_r2 = Vec::new();
        if c.subset_r2 {
            for g in GroupLabel::BOTH {
                subset_r2.push(diagnostics::feature_subset_r2(
                    &ds,
                    g,
                    &configs[g.index()],
                    self.cfg.train.n_folds,
                    self.cfg.seed_for("diagnose"),
                )?);
            }
        }
        let separation = if c.auc {
            let plan = if self.layout.setup().exists() {
                read_json::<TrainingSetup>(&self.layout.setup())?.plan
            } else {
                CrossFitPlan::new(&ds, self.cfg.train.n_folds, self.cfg.seed_for("crossfit"))?
            };
            Some(diagnostics::separation_auc(&ds, self.cfg.train.subset, &plan, &configs[0])?)
        } else {
            None
        };
        if let Some(m) = &did {
            let flagged = m.upper().filter(|c| c.flagged).count();
            println!("DiD: {flagged} of {} upper cells flagged at {}", m.upper().count(), m.ci_level);
        }
        for r in &correlation {
            println!("corr(content, style) in {}: {:.4}", r.group, r.correlation);
        }
        write_json(
            &self.layout.diagnostics(),
            &Diagnostics {
                did,
                rewrite_means,
                correlation,
                subset_r2,
                separation,
            },
        )
    }

    fn bootstrap(&self) -> Result<()> {
        let ds = self.load_panel()?;
        let preds = self.load_predictions()?;
        let b = &self.cfg.bootstrap;
        let d = &self.cfg.decompose;
        let opts = d.options();
        let mut targets = if b.subgroups && !d.group_by.is_empty() {
            StatisticSpec::subgroups(&ds, &d.group_by, &opts)?
        } else {
            vec![StatisticSpec::Decomposition {
                label: "All".into(),
                filter: None,
                options: opts,
            }]
        };
        if b.robustness {
            for spec in decomposition::robustness_specs(&opts) {
                match decomposition::robustness_panel(&ds, &preds, &spec) {
                    Ok(_) => targets.push(StatisticSpec::from_robustness(&spec)),
                    Err(e) => log::info!("robustness row {:?} not bootstrapped: {e}", spec.label),
                }
            }
        }
        if b.did_cells {
            let levels = sat_levels(&ds);
            for &row in &levels {
                for &col in &levels {
                    if row != col {
                        targets.push(StatisticSpec::DidCell {
                            row,
                            col,
                            scorer: self.cfg.diagnose.did_options.scorer,
                        });
                    }
                }
            }
        }
        if b.correlation {
            for g in GroupLabel::BOTH {
                targets.push(StatisticSpec::ComponentCorrelation {
                    group: g,
                    scorer: d.reference,
                });
            }
        }
        let setup = if b.mode == BootstrapMode::Full {
            Some(read_json::<TrainingSetup>(&self.layout.setup())?)
        } else {
            None
        };
        let cfg = b.config(self.cfg.seed_for("bootstrap"));
        let summary = inference::bootstrap(&ds, &preds, setup.as_ref(), &targets, &cfg)?;
        write_json(&self.layout.bootstrap(), &summary)?;
        println!("{} bootstrap, B = {}: {} statistics", cfg.mode, cfg.b, summary.stats.len());
        Ok(())
    }

    fn report(&self) -> Result<()> {
        let ds = self.load_panel()?;
        let dec: DecomposeOutput = read_json(&self.layout.decomposition())?;
        let boot: Option<BootstrapSummary> = optional_json(&self.layout.bootstrap())?;
        let diag: Option<Diagnostics> = optional_json(&self.layout.diagnostics())?;
        let metrics: Option<Vec<ScorerMetrics>> = optional_json(&self.layout.scorer_metrics())?;
        let files = render_report(&dec, boot.as_ref(), diag.as_ref(), metrics.as_deref(), &ds, &self.cfg)?;
        let dir = self.layout.join("report");
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        for (name, body) in &files {
            write_bytes(&dir.join(name), body.as_bytes())?;
        }
        if let Some((_, main)) = files.iter().find(|(n, _)| n == "table_main.txt") {
            print!("{main}");
        }
        println!("wrote {} report files to {}", files.len(), dir.display());
        Ok(())
    }
}

fn optional_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if path.exists() {
        read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

fn sat_levels(ds: &PanelDataset) -> Vec<u8> {
    let mut levels: Vec<u8> = ds
        .versions()
        .iter()
        .filter(|v| v.accepted)
        .filter_map(|v| v.kind.sat_level())
        .collect();
    levels.sort_unstable();
    levels.dedup();
    levels
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubgroupBlock {
    pub covariate: String,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecomposeOutput {
    pub options: DecomposeOptions,
    pub main: DecompositionResult,
    pub robustness: Vec<TableRow>,
    pub subgroups: Vec<SubgroupBlock>,
    pub neutral: Option<NeutralDecomposition>,
    pub components: ComponentEstimates,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub group: GroupLabel,
    pub scorer: GroupLabel,
    pub correlation: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Diagnostics {
    pub did: Option<DidMatrix>,
    pub rewrite_means: Vec<RewriteMean>,
    pub correlation: Vec<CorrelationRow>,
    pub subset_r2: Vec<SubsetR2>,
    pub separation: Option<SeparationResult>,
}

/// Report files by name. Pure function of its inputs.
pub fn render_report(
    dec: &DecomposeOutput,
    boot: Option<&BootstrapSummary>,
    diag: Option<&Diagnostics>,
    metrics: Option<&[ScorerMetrics]>,
    ds: &PanelDataset,
    cfg: &RunConfig,
) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    let mut table = |name: &str, t: DecompositionTable| -> Result<()> {
        files.push((format!("table_{name}.csv"), t.to_csv()?));
        files.push((format!("table_{name}.txt"), t.to_text()));
        Ok(())
    };
    let mut main = ReportRow::from_result("All", &dec.main);
    if let Some(b) = boot {
        main = main.with_bootstrap(b);
    }
    table("main", DecompositionTable::new("Decomposition of the score gap", vec![main]))?;
    if !dec.robustness.is_empty() {
        table("robustness", DecompositionTable::from_rows("Robustness", &dec.robustness, boot))?;
    }
    let (prompt, other): (Vec<&SubgroupBlock>, Vec<&SubgroupBlock>) =
        dec.subgroups.iter().partition(|b| b.covariate == "prompt_name");
    if !prompt.is_empty() {
        let rows: Vec<TableRow> = prompt.iter().flat_map(|b| b.rows.clone()).collect();
        table("prompt", DecompositionTable::from_rows("By prompt", &rows, boot))?;
    }
    if !other.is_empty() {
        let rows: Vec<TableRow> = other.iter().flat_map(|b| b.rows.clone()).collect();
        table("subgroup", DecompositionTable::from_rows("By subgroup", &rows, boot))?;
    }
    if let Some(n) = &dec.neutral {
        let (t, premium) = report::neutral_report(n)?;
        table("neutral", t)?;
        files.push(("style_premium.csv".into(), premium));
    }
    let bins = cfg.report.histogram_bins;
    files.push((
        "hist_components.csv".into(),
        report::histogram_csv(&report::component_histograms(&dec.components, ds, bins)?)?,
    ));
    let seed = stylegap::seeds::derive_seed(cfg.seed, "scatter");
    files.push((
        "scatter_components.csv".into(),
        report::scatter_csv(&report::scatter_sample(&dec.components, ds, cfg.report.scatter_points, seed))?,
    ));
    if let Some(d) = diag {
        if let Some(m) = &d.did {
            files.push(("did_grid.csv".into(), report::did_grid_csv(m)?));
            files.push(("did_cells.csv".into(), report::did_cells_csv(m)?));
        }
        if !d.rewrite_means.is_empty() {
            files.push(("rewrite_means.csv".into(), report::rewrite_means_csv(&d.rewrite_means)?));
        }
        if !d.correlation.is_empty() {
            let mut s = String::from("group,scorer,correlation\n");
            for r in &d.correlation {
                s.push_str(&format!("{},{},{}\n", r.group, r.scorer, r.correlation));
            }
            files.push(("correlation.csv".into(), s));
        }
        if !d.subset_r2.is_empty() {
            let mut s = String::from("group,n,r2_content,r2_style,r2_both,redundancy\n");
            for r in &d.subset_r2 {
                let red = r.redundancy.map(|v| v.to_string()).unwrap_or_default();
                s.push_str(&format!("{},{},{},{},{},{red}\n", r.group, r.n, r.content, r.style, r.both));
            }
            files.push(("subset_r2.csv".into(), s));
        }
    }
    if let Some(m) = metrics {
        files.push(("calibration.csv".into(), report::calibration_csv(m)?));
    }
    if let Some(b) = boot {
        files.push(("bootstrap.csv".into(), report::bootstrap_csv(b)?));
    }
    Ok(files)
}
