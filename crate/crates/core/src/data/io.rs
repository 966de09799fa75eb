//! Delimited (CSV/TSV) and line-delimited JSON panel files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_panel, EssayRecord, FeatureManifest, FeatureVector, PanelDataset, VersionRecord};
use crate::error::{Error, Result};

/// Row counts and imputation tallies from [`ingest_panel`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub essay_rows: usize,
    pub version_rows: usize,
    pub rejected_versions: usize,
    /// Column name → number of imputed cells.
    pub imputed: BTreeMap<String, usize>,
}

#[derive(Clone, Copy, PartialEq)]
enum Format {
    Delimited(u8),
    JsonLines,
}

fn format_of(path: &Path) -> Format {
    match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") | Some("tab") => Format::Delimited(b'\t'),
        Some("jsonl") | Some("ndjson") => Format::JsonLines,
        _ => Format::Delimited(b','),
    }
}

pub fn read_manifest(path: &Path) -> Result<FeatureManifest> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

pub fn write_manifest(path: &Path, m: &FeatureManifest) -> Result<()> {
    let mut s = serde_json::to_string_pretty(m)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn essay_columns(m: &FeatureManifest) -> Vec<String> {
    let mut cols: Vec<String> = ["essay_id", "group", "human_score", "prompt_name"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend(m.covariates.iter().cloned());
    cols
}

fn version_columns(m: &FeatureManifest) -> Vec<String> {
    let mut cols: Vec<String> = ["essay_id", "version_k", "rewrite_kind", "accepted"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend(m.feature_columns());
    cols
}

/// Read a table whose header must equal `expected` (optionally followed by the
/// `optional` column). Returns rows aligned to that header and whether the
/// optional column was present.
fn read_table(path: &Path, expected: &[String], optional: Option<&str>) -> Result<(Vec<Vec<String>>, bool)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format_of(path) {
        Format::Delimited(delim) => {
            let mut rdr = csv::ReaderBuilder::new()
                .delimiter(delim)
                .has_headers(true)
                .from_reader(BufReader::new(file));
            let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
            let with_opt = matches!(optional, Some(o) if header.len() == expected.len() + 1 && header.last().map(String::as_str) == Some(o));
            let core = if with_opt { &header[..header.len() - 1] } else { &header[..] };
            if core != expected {
                return Err(Error::Schema(format!(
                    "{}: header {:?} does not match manifest columns {:?}",
                    path.display(),
                    header,
                    expected
                )));
            }
            let mut rows = Vec::new();
            for rec in rdr.records() {
                let rec = rec?;
                if rec.len() != header.len() {
                    return Err(Error::Schema(format!(
                        "{}: row with {} fields, expected {}",
                        path.display(),
                        rec.len(),
                        header.len()
                    )));
                }
                rows.push(rec.iter().map(String::from).collect());
            }
            Ok((rows, with_opt))
        }
        Format::JsonLines => {
            let mut rows = Vec::new();
            let mut with_opt = false;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let obj: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&line)?;
                for key in obj.keys() {
                    if !expected.contains(key) && Some(key.as_str()) != optional {
                        return Err(Error::Schema(format!(
                            "{} line {}: unknown column {key:?}",
                            path.display(),
                            n + 1
                        )));
                    }
                }
                let mut row: Vec<String> = expected
                    .iter()
                    .map(|c| obj.get(c).map(json_cell).unwrap_or_default())
                    .collect();
                if let Some(o) = optional {
                    if let Some(v) = obj.get(o) {
                        with_opt = true;
                        row.push(json_cell(v));
                    } else {
                        row.push(String::new());
                    }
                }
                rows.push(row);
            }
            Ok((rows, with_opt))
        }
    }
}

fn json_cell(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Null => String::new(),
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Number(n) => match n.as_f64() {
            Some(x) if n.is_f64() => format!("{x}"),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

fn is_missing(s: &str) -> bool {
    matches!(s.trim(), "" | "NA" | "NaN" | "nan" | "null")
}

fn parse_bool(s: &str) -> Result<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidRecord(format!("bad boolean {s:?}"))),
    }
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::InvalidRecord(format!("bad number {s:?} in {what}")))
}

/// Read and validate a panel. Missing feature cells are imputed with the
/// column median over accepted originals, and the counts are returned.
pub fn ingest_panel(
    essays_path: &Path,
    versions_path: &Path,
    schema: &FeatureManifest,
) -> Result<(PanelDataset, IngestSummary)> {
    let ecols = essay_columns(schema);
    let (erows, with_text) = read_table(essays_path, &ecols, Some("text"))?;
    let ncov = schema.covariates.len();
    let mut essays = Vec::with_capacity(erows.len());
    for row in &erows {
        let human_score = if is_missing(&row[2]) {
            None
        } else {
            Some(parse_f64(&row[2], "human_score")?)
        };
        let covariates = schema
            .covariates
            .iter()
            .zip(&row[4..4 + ncov])
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        essays.push(EssayRecord {
            essay_id: row[0].clone(),
            group: row[1].parse()?,
            human_score,
            prompt_name: row[3].clone(),
            covariates,
            text: if with_text && !row[4 + ncov].is_empty() {
                Some(row[4 + ncov].clone())
            } else {
                None
            },
        });
    }

    let vcols = version_columns(schema);
    let (vrows, _) = read_table(versions_path, &vcols, None)?;
    let nfeat = schema.feature_dim();
    let mut parsed: Vec<(String, u32, super::RewriteKind, bool, Vec<Option<f64>>)> = Vec::with_capacity(vrows.len());
    for row in &vrows {
        let version_k: u32 = row[1]
            .trim()
            .parse()
            .map_err(|_| Error::InvalidRecord(format!("bad version_k {:?}", row[1])))?;
        let kind = row[2].parse()?;
        let accepted = parse_bool(&row[3])?;
        let feats = row[4..4 + nfeat]
            .iter()
            .map(|c| if is_missing(c) { Ok(None) } else { parse_f64(c, "features").map(Some) })
            .collect::<Result<Vec<_>>>()?;
        parsed.push((row[0].clone(), version_k, kind, accepted, feats));
    }

    let names = schema.feature_columns();
    let mut summary = IngestSummary {
        essay_rows: essays.len(),
        version_rows: parsed.len(),
        rejected_versions: parsed.iter().filter(|p| !p.3).count(),
        imputed: BTreeMap::new(),
    };
    for (c, name) in names.iter().enumerate() {
        let missing = parsed.iter().filter(|p| p.4[c].is_none()).count();
        if missing == 0 {
            continue;
        }
        let pool: Vec<f64> = parsed
            .iter()
            .filter(|p| p.2.is_original() && p.3)
            .filter_map(|p| p.4[c])
            .collect();
        let fill = crate::stats::median(&pool)
            .or_else(|| crate::stats::median(&parsed.iter().filter_map(|p| p.4[c]).collect::<Vec<_>>()))
            .unwrap_or(0.0);
        for p in parsed.iter_mut() {
            if p.4[c].is_none() {
                p.4[c] = Some(fill);
            }
        }
        log::info!("imputed {missing} cells of {name} with median {fill}");
        summary.imputed.insert(name.clone(), missing);
    }

    let de = schema.embedding_dim;
    let ds_ = schema.style_columns.len();
    let versions = parsed
        .into_iter()
        .map(|(essay_id, version_k, kind, accepted, f)| {
            let f: Vec<f64> = f.into_iter().map(|x| x.unwrap_or(0.0)).collect();
            VersionRecord {
                essay_id,
                version_k,
                kind,
                features: FeatureVector {
                    embedding: f[..de].to_vec(),
                    style: f[de..de + ds_].to_vec(),
                    extras: f[de + ds_..].to_vec(),
                },
                accepted,
            }
        })
        .collect();

    let ds = PanelDataset::new(essays, versions, schema.clone())?;
    let report = validate_panel(&ds);
    if !report.passed() {
        let msgs: Vec<String> = report.failures().iter().map(|c| c.detail.clone()).collect();
        return Err(Error::Validation(msgs.join("; ")));
    }
    log::info!(
        "ingested {} essays, {} versions ({} rejected)",
        summary.essay_rows,
        summary.version_rows,
        summary.rejected_versions
    );
    Ok((ds, summary))
}

/// Feature vectors for rewritten texts, in the versions-file layout. The
/// `accepted` column is ignored; every feature cell must be present.
pub fn read_version_features(
    path: &Path,
    schema: &FeatureManifest,
) -> Result<std::collections::HashMap<super::VersionKey, FeatureVector>> {
    let (rows, _) = read_table(path, &version_columns(schema), None)?;
    let de = schema.embedding_dim;
    let ds_ = schema.style_columns.len();
    let mut out = std::collections::HashMap::with_capacity(rows.len());
    for row in &rows {
        let version_k: u32 = row[1]
            .trim()
            .parse()
            .map_err(|_| Error::InvalidRecord(format!("bad version_k {:?}", row[1])))?;
        let f = row[4..4 + schema.feature_dim()]
            .iter()
            .map(|c| parse_f64(c, "features"))
            .collect::<Result<Vec<_>>>()?;
        let key = super::VersionKey::new(row[0].clone(), version_k, row[2].parse()?);
        let fv = FeatureVector {
            embedding: f[..de].to_vec(),
            style: f[de..de + ds_].to_vec(),
            extras: f[de + ds_..].to_vec(),
        };
        if out.insert(key.clone(), fv).is_some() {
            return Err(Error::InvalidRecord(format!("duplicate feature row for {key}")));
        }
    }
    Ok(out)
}

/// Write a panel in the format implied by each path's extension.
pub fn emit_panel(ds: &PanelDataset, essays_path: &Path, versions_path: &Path) -> Result<()> {
    let m = ds.manifest();
    let with_text = ds.essays().iter().any(|e| e.text.is_some());
    let mut ecols = essay_columns(m);
    if with_text {
        ecols.push("text".into());
    }
    let erows: Vec<Vec<String>> = ds
        .essays()
        .iter()
        .map(|e| {
            let mut r = vec![
                e.essay_id.clone(),
                e.group.to_string(),
                e.human_score.map(|s| format!("{s}")).unwrap_or_default(),
                e.prompt_name.clone(),
            ];
            r.extend(m.covariates.iter().map(|c| e.covariates.get(c).cloned().unwrap_or_default()));
            if with_text {
                r.push(e.text.clone().unwrap_or_default());
            }
            r
        })
        .collect();
    write_table(essays_path, &ecols, &erows, &[2])?;

    let vcols = version_columns(m);
    let vrows: Vec<Vec<String>> = ds
        .versions()
        .iter()
        .map(|v| {
            let mut r = vec![
                v.essay_id.clone(),
                v.version_k.to_string(),
                v.kind.to_string(),
                v.accepted.to_string(),
            ];
            let f = &v.features;
            r.extend(f.embedding.iter().chain(&f.style).chain(&f.extras).map(|x| format!("{x}")));
            r
        })
        .collect();
    let numeric: Vec<usize> = (1..vcols.len()).filter(|&i| i != 2).collect();
    write_table(versions_path, &vcols, &vrows, &numeric)
}

fn write_table(path: &Path, header: &[String], rows: &[Vec<String>], numeric: &[usize]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    match format_of(path) {
        Format::Delimited(delim) => {
            let mut w = csv::WriterBuilder::new().delimiter(delim).from_writer(BufWriter::new(file));
            w.write_record(header)?;
            for r in rows {
                w.write_record(r)?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        Format::JsonLines => {
            let mut w = BufWriter::new(file);
            for r in rows {
                let mut obj = serde_json::Map::new();
                for (i, (k, v)) in header.iter().zip(r).enumerate() {
                    let val = if v.is_empty() {
                        serde_json::Value::Null
                    } else if numeric.contains(&i) {
                        serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.clone()))
                    } else {
                        serde_json::Value::String(v.clone())
                    };
                    obj.insert(k.clone(), val);
                }
                serde_json::to_writer(&mut w, &obj)?;
                w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}
