//! Ablation table, Bland-Altman and correlation data from `metrics.json` files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use restore_core::metrics::{bland_altman, pearson_r, BlandAltman};
use serde::Serialize;

use crate::commands::EvaluationSummary;
use crate::config::{ExperimentConfig, Overrides};
use crate::{CliError, Common};

#[derive(Debug, Serialize)]
struct TableRow {
    tag: String,
    method: String,
    /// `(domain, NRMSE, SSIM)`
    cells: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Serialize)]
struct RatioAgreement {
    tag: String,
    bland_altman: Option<BlandAltman>,
    r: Option<f64>,
    n: usize,
}

#[derive(Debug, Serialize)]
struct Report {
    inputs: Vec<PathBuf>,
    config_hash: String,
    table: Vec<TableRow>,
    agreement: Vec<RatioAgreement>,
}

fn read_summary(p: &Path) -> Result<(PathBuf, EvaluationSummary), CliError> {
    let file = if p.is_dir() { p.join("metrics.json") } else { p.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| CliError::Validation(format!("{}: {e}", file.display())))?;
    let s = serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", file.display())))?;
    Ok((file, s))
}

fn write_err(p: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", p.display()))
}

fn table_rows(summaries: &[(String, EvaluationSummary)]) -> Vec<TableRow> {
    let mut rows = Vec::new();
    if let Some((_, s)) = summaries.iter().find(|(_, s)| s.baseline.is_some()) {
        rows.push(TableRow {
            tag: "input".into(),
            method: "short-scan input".into(),
            cells: s
                .per_domain
                .iter()
                .filter_map(|d| Some((d.domain, d.baseline_nrmse?, d.baseline_ssim?)))
                .collect(),
        });
    }
    for (tag, s) in summaries {
        rows.push(TableRow {
            tag: tag.clone(),
            method: s.method.clone(),
            cells: s.per_domain.iter().map(|d| (d.domain, d.nrmse, d.ssim)).collect(),
        });
    }
    rows
}

fn markdown(rows: &[TableRow]) -> String {
    let mut domains: Vec<usize> = rows.iter().flat_map(|r| r.cells.iter().map(|c| c.0)).collect();
    domains.sort_unstable();
    domains.dedup();
    let mut md = String::from("| run | method |");
    for d in &domains {
        let _ = write!(md, " domain {d} NRMSE | domain {d} SSIM |");
    }
    md.push_str("\n|---|---|");
    md.push_str(&"---|---|".repeat(domains.len()));
    md.push('\n');
    for r in rows {
        let _ = write!(md, "| {} | {} |", r.tag, r.method);
        for d in &domains {
            match r.cells.iter().find(|c| c.0 == *d) {
                Some(c) => {
                    let _ = write!(md, " {:.3} | {:.4} |", c.1, c.2);
                }
                None => md.push_str(" - | - |"),
            }
        }
        md.push('\n');
    }
    md
}

pub fn report(common: &Common, o: &Overrides, inputs: &[PathBuf]) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    cfg.apply(o);
    let out = cfg.output_dir()?.to_path_buf();
    let mut files = Vec::new();
    let mut summaries = Vec::new();
    for (i, p) in inputs.iter().enumerate() {
        let (file, s) = read_summary(p)?;
        summaries.push((format!("{i}-{}", s.mode), s));
        files.push(file);
    }
    if out.exists() && !common.force && fs::read_dir(&out).map_err(|e| write_err(&out, e))?.next().is_some() {
        return Err(CliError::Validation(format!(
            "output directory {} is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    fs::create_dir_all(&out).map_err(|e| write_err(&out, e))?;

    let table = table_rows(&summaries);
    let md = markdown(&table);
    let p = out.join("summary.md");
    fs::write(&p, &md).map_err(|e| write_err(&p, e))?;
    let p = out.join("summary.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| write_err(&p, e))?;
    w.write_record(["run", "method", "domain", "nrmse", "ssim"]).map_err(|e| write_err(&p, e))?;
    for r in &table {
        for c in &r.cells {
            w.write_record([r.tag.clone(), r.method.clone(), c.0.to_string(), c.1.to_string(), c.2.to_string()])
                .map_err(|e| write_err(&p, e))?;
        }
    }
    w.flush().map_err(|e| write_err(&p, e))?;

    let mut agreement = Vec::new();
    for (tag, s) in &summaries {
        let pairs: Vec<(&str, f64, f64)> = s
            .volumes
            .iter()
            .filter_map(|v| Some((v.id.as_str(), v.ratio_corrected?, v.ratio_reference?)))
            .collect();
        let corrected: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let reference: Vec<f64> = pairs.iter().map(|p| p.2).collect();
        let p = out.join(format!("ratios_{tag}.csv"));
        let mut w = csv::Writer::from_path(&p).map_err(|e| write_err(&p, e))?;
        w.write_record(["id", "reference", "corrected", "mean", "difference"]).map_err(|e| write_err(&p, e))?;
        for (id, c, r) in &pairs {
            w.write_record([id.to_string(), r.to_string(), c.to_string(), ((c + r) / 2.0).to_string(), (c - r).to_string()])
                .map_err(|e| write_err(&p, e))?;
        }
        w.flush().map_err(|e| write_err(&p, e))?;
        agreement.push(RatioAgreement {
            tag: tag.clone(),
            bland_altman: bland_altman(&corrected, &reference).ok(),
            r: pearson_r(&corrected, &reference).ok(),
            n: pairs.len(),
        });
    }
    print!("{md}");
    for a in &agreement {
        match (&a.bland_altman, a.r) {
            (Some(b), Some(r)) => println!(
                "{}: ratio bias {:+.4}, limits [{:.4}, {:.4}], r {:.4} (n={})",
                a.tag, b.mean_difference, b.lower_limit, b.upper_limit, r, a.n
            ),
            _ => println!("{}: too few ratio pairs (n={})", a.tag, a.n),
        }
    }
    let report = Report {
        inputs: files,
        config_hash: cfg.hash(),
        table,
        agreement,
    };
    let p = out.join("report.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(&p, text + "\n").map_err(|e| write_err(&p, e))?;
    Ok(())
}
