use std::fs;
use std::path::{Path, PathBuf};

use restore_core::conditioning::MappingLabel;
use restore_core::data::{build_dataset, load_dataset, save_dataset, Dataset, MixtureSpec, SlicePair, Split};
use restore_core::label_estimation::{self, write_surface_csv, GridRecord, ModelObjective};
use restore_core::losses::domain_weights;
use restore_core::metrics::{region_ratio, volume_metrics, MetricReport, SsimConstants, VolumeMetrics};
use restore_core::training::{
    infer, load_checkpoint, save_checkpoint, train as train_model, write_batch_csv, write_loss_csv,
    Checkpoint, TrainEvent, TrainingData,
};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Overrides};
use crate::{CliError, Common};

pub const EXPERIMENT_FILE: &str = "experiment.toml";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn load_config(common: &Common, o: &Overrides) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    cfg.apply(o);
    Ok(cfg)
}

/// Refuses a non-empty directory unless `force`; with `force`, removes the
/// artifacts this command writes so reruns start clean.
fn prepare_out(dir: &Path, force: bool, artifacts: &[&str]) -> Result<(), CliError> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Validation(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        for a in artifacts {
            let p = dir.join(a);
            if p.is_dir() {
                fs::remove_dir_all(&p).map_err(|e| io_err(&p, e))?;
            } else if p.exists() {
                fs::remove_file(&p).map_err(|e| io_err(&p, e))?;
            }
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    let p = dir.join(EXPERIMENT_FILE);
    let text = toml::to_string_pretty(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(&p, text).map_err(|e| io_err(&p, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn parse_mixture(s: &str) -> Result<MixtureSpec, CliError> {
    let bad = || CliError::Validation(format!("--mixture expects FROM,TO,ALPHA[,SUBJECTS], got {s:?}"));
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if !(3..=4).contains(&parts.len()) {
        return Err(bad());
    }
    let from: usize = parts[0].parse().map_err(|_| bad())?;
    let to: usize = parts[1].parse().map_err(|_| bad())?;
    let alpha: f64 = parts[2].parse().map_err(|_| bad())?;
    let subjects: usize = parts.get(3).map_or(Ok(4), |v| v.parse()).map_err(|_| bad())?;
    Ok(MixtureSpec {
        name: format!("mix{from}{to}a{}", (alpha * 100.0).round() as i64),
        from,
        to,
        alpha,
        subjects,
    })
}

pub fn synth(common: &Common, o: &Overrides, mixtures: &[String]) -> Result<(), CliError> {
    let mut cfg = load_config(common, o)?;
    for m in mixtures {
        cfg.dataset.mixtures.push(parse_mixture(m)?);
    }
    let out = cfg.output_dir()?.to_path_buf();
    let dcfg = cfg.dataset_config()?;
    dcfg.validate()?;
    prepare_out(&out, common.force, &["dataset.json", "subjects", EXPERIMENT_FILE])?;
    let ds = build_dataset(&dcfg)?;
    save_dataset(&ds, &out, Some(cfg.hash()))?;
    write_experiment(&cfg, &out)?;

    let train_sizes = ds.domain_sizes(Some(Split::Train));
    let weights = domain_weights(&train_sizes)?;
    println!("{:<10} {:>8} {:>11} {:>9} {:>10}", "domain", "subjects", "train_pairs", "val_pairs", "weight");
    let val_sizes = ds.domain_sizes(Some(Split::Val));
    for d in &ds.config.domains {
        println!(
            "{:<10} {:>8} {:>11} {:>9} {:>10.6}",
            d.name,
            ds.subjects_in(d.index, None).count(),
            train_sizes[d.index],
            val_sizes[d.index],
            weights.0[d.index]
        );
    }
    for m in ds.config.mixture_domains()? {
        println!("{:<10} {:>8} (held out, index {})", m.name, ds.subjects_in(m.index, None).count(), m.index);
    }
    println!("weight sum {:.6}", weights.0.iter().sum::<f64>());
    println!("wrote {}", out.display());
    Ok(())
}

fn required(p: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    p.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Validation(format!("missing --{what}")))
}

pub fn train(common: &Common, o: &Overrides, data: Option<PathBuf>, domain: Option<usize>) -> Result<(), CliError> {
    let cfg = load_config(common, o)?;
    let data_dir = required(data, &cfg.data_dir, "data")?;
    let out = cfg
        .output_dir
        .clone()
        .or_else(|| cfg.checkpoint_dir.clone())
        .ok_or_else(|| CliError::Validation("no checkpoint directory: pass --out".into()))?;
    let ds = load_dataset(&data_dir)?;
    let mut td = TrainingData::from_dataset(&ds, Split::Train);
    if let Some(d) = domain {
        td = td.only_domain(d)?;
    }
    prepare_out(
        &out,
        common.force,
        &["manifest.json", "weights.bin", "loss.csv", "batches.csv", EXPERIMENT_FILE],
    )?;
    println!("mode {} ({}), training pairs per domain {:?}", cfg.train.mode, cfg.train.mode.description(), td.sizes());
    let outcome = train_model(&td, &cfg.model, &cfg.train, &mut |e| {
        if let TrainEvent::Epoch(r) = e {
            let l = &r.loss;
            println!(
                "epoch {:>4}  adv_g {:.5}  adv_d {:.5}  cyc {:.6}  wls {:.6}  total_g {:.5}",
                r.epoch, l.adv_g, l.adv_d, l.cyc, l.wls, l.total_g
            );
        }
    })?;
    let manifest = save_checkpoint(&outcome.checkpoint, &out, Some(cfg.hash()))?;
    write_loss_csv(&out.join("loss.csv"), &outcome.epochs)?;
    write_batch_csv(&out.join("batches.csv"), &outcome.batches)?;
    write_experiment(&cfg, &out)?;
    println!("wrote {} ({} tensors)", out.display(), manifest.tensors.len());
    Ok(())
}

fn calibration_pairs(ds: &Dataset, domain: Option<usize>) -> Result<Vec<SlicePair>, CliError> {
    let pairs: Vec<SlicePair> = match domain {
        Some(d) => ds.pairs_of(d, None),
        None => {
            let cal: Vec<_> = ds.subjects.iter().filter(|s| s.split == Split::Calibration).collect();
            let subs = if cal.is_empty() { ds.subjects.iter().collect() } else { cal };
            subs.iter().flat_map(|s| s.pairs()).collect()
        }
    };
    if pairs.is_empty() {
        return Err(CliError::Validation("calibration set is empty".into()));
    }
    Ok(pairs)
}

#[derive(Serialize)]
struct GridMeta {
    epsilon: f64,
    coarse: f64,
    fine: f64,
    radius: f64,
    points_evaluated: usize,
    excluded: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct Refined {
    c: MappingLabel,
    objective: f64,
    steps: usize,
}

#[derive(Serialize)]
struct LabelOutput {
    c_t: MappingLabel,
    objective: f64,
    coarse_objective: f64,
    fine_objective: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    refined: Option<Refined>,
    grid: GridMeta,
    calibration: PathBuf,
    calibration_domain: Option<usize>,
    calibration_slices: usize,
    checkpoint: PathBuf,
    config_hash: String,
}

fn unique_records(grid: &[GridRecord]) -> Vec<&GridRecord> {
    let mut out: Vec<&GridRecord> = Vec::with_capacity(grid.len());
    for r in grid {
        if !out.iter().any(|o| o.point == r.point) {
            out.push(r);
        }
    }
    out
}

pub fn estimate_label(
    common: &Common,
    o: &Overrides,
    checkpoint: Option<PathBuf>,
    calibration: &Path,
    domain: Option<usize>,
    surface: bool,
    refine_steps: usize,
) -> Result<(), CliError> {
    let cfg = load_config(common, o)?;
    cfg.grid.validate()?;
    let ck_dir = required(checkpoint, &cfg.checkpoint_dir, "checkpoint")?;
    let out = cfg.output_dir()?.to_path_buf();
    let ck = load_checkpoint(&ck_dir)?;
    let ds = load_dataset(calibration)?;
    let pairs = calibration_pairs(&ds, domain)?;
    prepare_out(&out, common.force, &["label.json", "surface.csv"])?;
    let est = label_estimation::estimate_label(&ck, &pairs, &cfg.grid)?;
    let refined = if refine_steps > 0 {
        let obj = ModelObjective::new(&ck, &pairs)?;
        let (c, objective) = obj.refine(&est.c_t, cfg.grid.epsilon, refine_steps, cfg.grid.fine)?;
        Some(Refined { c, objective, steps: refine_steps })
    } else {
        None
    };
    let records = unique_records(&est.grid);
    if surface {
        let pts: Vec<Vec<f64>> = records.iter().map(|r| r.point.clone()).collect();
        let vals: Vec<f64> = records.iter().map(|r| r.objective).collect();
        write_surface_csv(&out.join("surface.csv"), &pts, &vals)?;
    }
    let output = LabelOutput {
        c_t: est.c_t.clone(),
        objective: est.objective,
        coarse_objective: est.coarse_objective,
        fine_objective: est.fine_objective,
        refined,
        grid: GridMeta {
            epsilon: cfg.grid.epsilon,
            coarse: cfg.grid.coarse,
            fine: cfg.grid.fine,
            radius: cfg.grid.radius(),
            points_evaluated: records.len(),
            excluded: est.excluded.clone(),
        },
        calibration: calibration.to_path_buf(),
        calibration_domain: domain,
        calibration_slices: pairs.len(),
        checkpoint: ck_dir,
        config_hash: cfg.hash(),
    };
    write_json(&out.join("label.json"), &output)?;
    println!("c_T = {:?}  objective {:.6e}", est.c_t.0, est.objective);
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub label: Option<String>,
    pub label_file: Option<PathBuf>,
    pub domain: Option<usize>,
    pub split: String,
    pub baseline: bool,
}

/// One evaluated volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeRow {
    pub id: String,
    pub domain: usize,
    pub nrmse: f64,
    pub ssim: f64,
    pub ratio_corrected: Option<f64>,
    pub ratio_reference: Option<f64>,
    pub baseline_nrmse: Option<f64>,
    pub baseline_ssim: Option<f64>,
    pub ratio_input: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSummary {
    pub domain: usize,
    pub volumes: usize,
    pub nrmse: f64,
    pub ssim: f64,
    pub baseline_nrmse: Option<f64>,
    pub baseline_ssim: Option<f64>,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub mode: String,
    pub method: String,
    pub label: Option<Vec<f64>>,
    pub split: String,
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub config_hash: String,
    pub report: MetricReport,
    pub baseline: Option<MetricReport>,
    pub per_domain: Vec<DomainSummary>,
    pub volumes: Vec<VolumeRow>,
}

fn parse_label(s: &str) -> Result<MappingLabel, CliError> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map(MappingLabel)
        .map_err(|_| CliError::Validation(format!("--label expects comma-separated numbers, got {s:?}")))
}

fn read_label_file(p: &Path) -> Result<MappingLabel, CliError> {
    #[derive(Deserialize)]
    struct L {
        c_t: MappingLabel,
    }
    let text = fs::read_to_string(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
    let l: L = serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
    Ok(l.c_t)
}

fn split_of(s: &str) -> Split {
    match s {
        "train" => Split::Train,
        "calibration" => Split::Calibration,
        _ => Split::Val,
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn evaluate_volumes(
    ck: &Checkpoint,
    ds: &Dataset,
    split: Split,
    domain: Option<usize>,
    fixed: Option<&MappingLabel>,
    baseline: bool,
) -> Result<Vec<(VolumeRow, VolumeMetrics, Option<VolumeMetrics>)>, CliError> {
    let k = SsimConstants::default();
    let mut rows = Vec::new();
    for s in ds.subjects.iter().filter(|s| s.split == split && domain.is_none_or(|d| s.domain_index == d)) {
        let label = match fixed {
            Some(l) => l.clone(),
            None if s.domain_index < ck.domain_count() => MappingLabel::one_hot(s.domain_index, ck.domain_count())?,
            None => {
                return Err(CliError::Validation(format!(
                    "subject {} is from held-out domain {}; pass --label or --label-file",
                    s.id, s.domain_index
                )))
            }
        };
        let corrected = infer(ck, &s.short, &label)?;
        let vm = volume_metrics(&s.id, s.domain_index, &corrected.voxels, &s.standard.voxels, k, false)?;
        let ratio = |v: &ndarray::Array3<f32>| region_ratio(v, &s.masks.target, &s.masks.reference).ok();
        let base = if baseline {
            Some(volume_metrics(&s.id, s.domain_index, &s.short.voxels, &s.standard.voxels, k, false)?)
        } else {
            None
        };
        let row = VolumeRow {
            id: s.id.clone(),
            domain: s.domain_index,
            nrmse: vm.nrmse,
            ssim: vm.ssim,
            ratio_corrected: ratio(&corrected.voxels),
            ratio_reference: ratio(&s.standard.voxels),
            baseline_nrmse: base.as_ref().map(|b| b.nrmse),
            baseline_ssim: base.as_ref().map(|b| b.ssim),
            ratio_input: if baseline { ratio(&s.short.voxels) } else { None },
        };
        rows.push((row, vm, base));
    }
    if rows.is_empty() {
        return Err(CliError::Validation(format!("no subjects in split {split:?}")));
    }
    Ok(rows)
}

pub fn evaluate(common: &Common, o: &Overrides, a: EvalArgs) -> Result<(), CliError> {
    let cfg = load_config(common, o)?;
    let ck_dir = required(a.checkpoint, &cfg.checkpoint_dir, "checkpoint")?;
    let data_dir = required(a.data, &cfg.data_dir, "data")?;
    let out = cfg.output_dir()?.to_path_buf();
    let ck = load_checkpoint(&ck_dir)?;
    let ds = load_dataset(&data_dir)?;
    let fixed = match (&a.label, &a.label_file) {
        (Some(s), _) => Some(parse_label(s)?),
        (None, Some(p)) => Some(read_label_file(p)?),
        (None, None) => None,
    };
    if let Some(l) = &fixed {
        l.check_len(ck.domain_count())?;
    }
    let split = split_of(&a.split);
    prepare_out(&out, common.force, &["metrics.csv", "metrics.json"])?;
    let rows = evaluate_volumes(&ck, &ds, split, a.domain, fixed.as_ref(), a.baseline)?;

    let mut w = csv::Writer::from_path(out.join("metrics.csv")).map_err(|e| io_err(&out, e))?;
    for (r, _, _) in &rows {
        w.serialize(r).map_err(|e| io_err(&out, e))?;
    }
    w.flush().map_err(|e| io_err(&out, e))?;

    let report = MetricReport::from_volumes(rows.iter().map(|r| r.1.clone()).collect());
    let baseline = a
        .baseline
        .then(|| MetricReport::from_volumes(rows.iter().filter_map(|r| r.2.clone()).collect()));
    let mut domains: Vec<usize> = rows.iter().map(|r| r.0.domain).collect();
    domains.sort_unstable();
    domains.dedup();
    let per_domain = domains
        .iter()
        .map(|&d| {
            let sel: Vec<&VolumeRow> = rows.iter().map(|r| &r.0).filter(|r| r.domain == d).collect();
            DomainSummary {
                domain: d,
                volumes: sel.len(),
                nrmse: mean(sel.iter().map(|r| r.nrmse)),
                ssim: mean(sel.iter().map(|r| r.ssim)),
                baseline_nrmse: a.baseline.then(|| mean(sel.iter().filter_map(|r| r.baseline_nrmse))),
                baseline_ssim: a.baseline.then(|| mean(sel.iter().filter_map(|r| r.baseline_ssim))),
            }
        })
        .collect::<Vec<_>>();
    for d in &per_domain {
        match d.baseline_nrmse {
            Some(b) => println!("domain {}: NRMSE {:.3} SSIM {:.4} (input NRMSE {b:.3})", d.domain, d.nrmse, d.ssim),
            None => println!("domain {}: NRMSE {:.3} SSIM {:.4}", d.domain, d.nrmse, d.ssim),
        }
    }
    let summary = EvaluationSummary {
        mode: ck.train_config.mode.name().into(),
        method: ck.train_config.mode.description().into(),
        label: fixed.map(|l| l.0),
        split: a.split.clone(),
        checkpoint: ck_dir,
        data: data_dir,
        config_hash: cfg.hash(),
        report,
        baseline,
        per_domain,
        volumes: rows.into_iter().map(|r| r.0).collect(),
    };
    write_json(&out.join("metrics.json"), &summary)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_flag_parses() {
        let m = parse_mixture("0,1,0.5").unwrap();
        assert_eq!((m.from, m.to, m.alpha, m.subjects), (0, 1, 0.5, 4));
        assert_eq!(parse_mixture("1, 2, 0.25, 3").unwrap().subjects, 3);
        assert!(parse_mixture("0,1").is_err());
    }

    #[test]
    fn label_flag_parses() {
        assert_eq!(parse_label("1,0,0.5").unwrap().0, vec![1.0, 0.0, 0.5]);
        assert!(parse_label("a,b").is_err());
    }
}
