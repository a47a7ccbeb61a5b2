//! Estimating the mapping label of an unseen domain by minimising the
//! empirical correction error over a discretised label box.

use std::cmp::Ordering;
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::MappingLabel;
use crate::data::SlicePair;
use crate::error::{Error, Result};
use crate::training::{slices_to_tensor, Checkpoint};

/// Largest generator batch used while sweeping the grid.
const MAX_EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSearchConfig {
    /// The search box is `[-epsilon, 1 + epsilon]^N`.
    pub epsilon: f64,
    pub coarse: f64,
    pub fine: f64,
    /// Half-width of the fine window around the coarse minimum; defaults to
    /// one coarse cell.
    pub radius: Option<f64>,
}

impl Default for GridSearchConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            coarse: 0.1,
            fine: 0.02,
            radius: None,
        }
    }
}

impl GridSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Validation(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        for (name, h) in [("coarse", self.coarse), ("fine", self.fine)] {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Validation(format!("{name} spacing must be positive, got {h}")));
            }
            if Lattice::new(h).points(self.lo(), self.hi()).len() < 2 {
                return Err(Error::Validation(format!(
                    "{name} spacing {h} yields fewer than 2 points on [{}, {}]",
                    self.lo(),
                    self.hi()
                )));
            }
        }
        if self.fine > self.coarse {
            return Err(Error::Validation(format!(
                "fine spacing {} exceeds coarse spacing {}",
                self.fine, self.coarse
            )));
        }
        if let Some(r) = self.radius {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Validation(format!("radius must be >= 0, got {r}")));
            }
        }
        Ok(())
    }

    pub fn lo(&self) -> f64 {
        -self.epsilon
    }

    pub fn hi(&self) -> f64 {
        1.0 + self.epsilon
    }

    pub fn radius(&self) -> f64 {
        self.radius.unwrap_or(self.coarse)
    }
}

/// Points `k h` for integer `k`. When `1/h` is an integer `m`, points are
/// computed as `k / m`, so nested lattices share bit-identical points.
#[derive(Debug, Clone, Copy)]
struct Lattice {
    h: f64,
    inv: Option<f64>,
}

impl Lattice {
    fn new(h: f64) -> Self {
        let m = (1.0 / h).round();
        let inv = ((1.0 / h - m).abs() < 1e-9 && m >= 1.0).then_some(m);
        Self { h, inv }
    }

    fn at(&self, k: i64) -> f64 {
        match self.inv {
            Some(m) => k as f64 / m,
            None => k as f64 * self.h,
        }
    }

    fn points(&self, lo: f64, hi: f64) -> Vec<f64> {
        let tol = 1e-9;
        let k0 = (lo / self.h - tol).ceil() as i64;
        let k1 = (hi / self.h + tol).floor() as i64;
        (k0..=k1).map(|k| self.at(k)).collect()
    }
}

/// Cartesian product with the last axis varying fastest.
fn product(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::with_capacity(axes.len())];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(*v);
                    p
                })
            })
            .collect();
    }
    out
}

/// Coarse lattice over the whole box, in row-major order (last axis fastest).
pub fn coarse_grid(config: &GridSearchConfig, n: usize) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    let axis = Lattice::new(config.coarse).points(config.lo(), config.hi());
    Ok(product(&vec![axis; n]))
}

/// Fine lattice within `radius` of `centre`, clipped to the box.
pub fn fine_grid(config: &GridSearchConfig, centre: &[f64]) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    let lat = Lattice::new(config.fine);
    let r = config.radius();
    let axes: Vec<Vec<f64>> = centre
        .iter()
        .map(|&c| lat.points((c - r).max(config.lo()), (c + r).min(config.hi())))
        .collect();
    Ok(product(&axes))
}

/// Something whose value at each label can be evaluated.
pub trait LabelObjective: Sync {
    fn domain_count(&self) -> usize;
    /// Objective at each point, in the same order.
    fn evaluate(&self, points: &[Vec<f64>]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub point: Vec<f64>,
    pub objective: f64,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEstimate {
    pub c_t: MappingLabel,
    pub objective: f64,
    pub coarse_objective: f64,
    pub fine_objective: f64,
    /// Every finite evaluation.
    pub grid: Vec<GridRecord>,
    /// Points whose objective was NaN or infinite.
    pub excluded: Vec<Vec<f64>>,
}

fn lex(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Record with the smallest objective; ties go to the lexicographically
/// smallest point. Independent of record order.
pub fn select_minimum(records: &[GridRecord]) -> Option<&GridRecord> {
    records.iter().min_by(|a, b| {
        a.objective
            .total_cmp(&b.objective)
            .then_with(|| lex(&a.point, &b.point))
    })
}

fn evaluate_stage(
    objective: &dyn LabelObjective,
    points: Vec<Vec<f64>>,
    stage: Stage,
    grid: &mut Vec<GridRecord>,
    excluded: &mut Vec<Vec<f64>>,
) -> Result<Vec<GridRecord>> {
    let values = objective.evaluate(&points)?;
    if values.len() != points.len() {
        return Err(Error::Dimension(format!(
            "objective returned {} values for {} points",
            values.len(),
            points.len()
        )));
    }
    let mut finite = Vec::new();
    for (point, objective) in points.into_iter().zip(values) {
        if objective.is_finite() {
            let rec = GridRecord { point, objective, stage };
            grid.push(rec.clone());
            finite.push(rec);
        } else {
            excluded.push(point);
        }
    }
    Ok(finite)
}

/// Exhaustive coarse sweep, then a fine sweep around the coarse minimum.
pub fn grid_search(objective: &dyn LabelObjective, config: &GridSearchConfig) -> Result<LabelEstimate> {
    let n = objective.domain_count();
    if n == 0 {
        return Err(Error::Validation("label dimension must be positive".into()));
    }
    let mut grid = Vec::new();
    let mut excluded = Vec::new();
    let coarse = evaluate_stage(objective, coarse_grid(config, n)?, Stage::Coarse, &mut grid, &mut excluded)?;
    let best_coarse = select_minimum(&coarse)
        .cloned()
        .ok_or_else(|| Error::Validation("objective is non-finite at every coarse grid point".into()))?;
    let mut fine_points = fine_grid(config, &best_coarse.point)?;
    if !fine_points.contains(&best_coarse.point) {
        fine_points.push(best_coarse.point.clone());
    }
    let mut fine = evaluate_stage(objective, fine_points, Stage::Fine, &mut grid, &mut excluded)?;
    if !fine.iter().any(|r| r.point == best_coarse.point) {
        // the coarse minimum re-evaluated to a non-finite value; keep the coarse record
        fine.push(GridRecord { stage: Stage::Fine, ..best_coarse.clone() });
    }
    let best_fine = select_minimum(&fine).cloned().expect("fine stage holds the coarse minimum");
    let best = select_minimum(&grid).cloned().expect("grid is non-empty");
    Ok(LabelEstimate {
        c_t: MappingLabel(best.point),
        objective: best.objective,
        coarse_objective: best_coarse.objective,
        fine_objective: best_fine.objective,
        grid,
        excluded,
    })
}

/// Objective values at `points`; same order as the input.
pub fn objective_surface(objective: &dyn LabelObjective, points: &[Vec<f64>]) -> Result<Vec<f64>> {
    if let Some(p) = points.iter().find(|p| p.len() != objective.domain_count()) {
        return Err(Error::Config(format!(
            "grid point has {} coordinates, objective expects {}",
            p.len(),
            objective.domain_count()
        )));
    }
    objective.evaluate(points)
}

/// CSV with columns `c0, .., c{N-1}, objective`, one row per point.
pub fn write_surface_csv(path: &Path, points: &[Vec<f64>], values: &[f64]) -> Result<()> {
    use crate::training::csv_err;
    let n = points.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
    header.push("objective".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (p, v) in points.iter().zip(values) {
        let row: Vec<String> = p.iter().chain(std::iter::once(v)).map(|x| x.to_string()).collect();
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean per-pixel squared error of an arbitrary slice corrector `g(z, c)`.
pub struct FnObjective<G> {
    pairs: Vec<(Array2<f64>, Array2<f64>)>,
    n: usize,
    g: G,
}

impl<G> FnObjective<G>
where
    G: Fn(&Array2<f64>, &[f64]) -> Array2<f64> + Sync,
{
    pub fn new(pairs: Vec<(Array2<f64>, Array2<f64>)>, n: usize, g: G) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Validation("calibration set is empty".into()));
        }
        Ok(Self { pairs, n, g })
    }
}

impl<G> LabelObjective for FnObjective<G>
where
    G: Fn(&Array2<f64>, &[f64]) -> Array2<f64> + Sync,
{
    fn domain_count(&self) -> usize {
        self.n
    }

    fn evaluate(&self, points: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(points
            .par_iter()
            .map(|c| {
                let total: f64 = self
                    .pairs
                    .iter()
                    .map(|(z, x)| {
                        let gz = (self.g)(z, c);
                        (&gz - x).mapv(|d| d * d).mean().unwrap_or(f64::NAN)
                    })
                    .sum();
                total / self.pairs.len() as f64
            })
            .collect())
    }
}

/// The empirical objective of a trained generator on a calibration set,
/// in the checkpoint's normalised intensity units.
pub struct ModelObjective<'a> {
    ck: &'a Checkpoint,
    z: Tensor,
    x: Tensor,
    count: usize,
}

impl<'a> ModelObjective<'a> {
    pub fn new(ck: &'a Checkpoint, calibration: &[SlicePair]) -> Result<Self> {
        if calibration.is_empty() {
            return Err(Error::Validation("calibration set is empty".into()));
        }
        let d = ck.model_config.generator.divisor();
        if let Some(p) = calibration.iter().find(|p| p.z.dim().0 % d != 0 || p.z.dim().1 % d != 0) {
            return Err(Error::Dimension(format!(
                "calibration slice {:?} of {} is not divisible by {d}",
                p.z.dim(),
                p.subject_id
            )));
        }
        let zs: Vec<_> = calibration.iter().map(|p| &p.z).collect();
        let xs: Vec<_> = calibration.iter().map(|p| &p.x).collect();
        Ok(Self {
            ck,
            z: slices_to_tensor(&zs, ck.intensity_scale, ck.dtype())?,
            x: slices_to_tensor(&xs, ck.intensity_scale, ck.dtype())?,
            count: calibration.len(),
        })
    }

    fn labels(&self, points: &[Vec<f64>]) -> Result<Tensor> {
        let n = self.domain_count();
        let mut rows = Vec::with_capacity(points.len() * self.count * n);
        for p in points {
            MappingLabel(p.clone()).check_len(n)?;
            for _ in 0..self.count {
                rows.extend_from_slice(p);
            }
        }
        Ok(Tensor::from_vec(rows, (points.len() * self.count, n), self.z.device())?.to_dtype(self.ck.dtype())?)
    }

    /// Objective for a batch of points as a `(points,)` tensor.
    fn forward(&self, points: &[Vec<f64>], labels: &Tensor) -> Result<Tensor> {
        let p = points.len();
        let z = self.z.repeat((p, 1, 1, 1))?;
        let x = self.x.repeat((p, 1, 1, 1))?;
        let g = self.ck.generator().forward(&z, labels)?;
        let per = (g - x)?.sqr()?.flatten_from(1)?.mean(1)?;
        Ok(per.reshape((p, self.count))?.mean(1)?)
    }

    /// Projected gradient descent on the label, starting from `start` and
    /// staying inside `[-epsilon, 1 + epsilon]^N`. The step halves whenever a
    /// trial step fails to lower the objective, so the result never exceeds
    /// the starting objective.
    pub fn refine(&self, start: &MappingLabel, epsilon: f64, steps: usize, step_size: f64) -> Result<(MappingLabel, f64)> {
        let n = self.domain_count();
        start.check_len(n)?;
        let mut c = start.0.clone();
        let mut best = self.evaluate(std::slice::from_ref(&c))?[0];
        let mut step = step_size;
        for _ in 0..steps {
            let var = Var::from_slice(&c, (1, n), self.z.device())?;
            let labels = var.as_tensor().to_dtype(self.ck.dtype())?.repeat((self.count, 1))?;
            let loss = self.forward(std::slice::from_ref(&c), &labels)?.sum_all()?;
            let grads = loss.backward()?;
            let Some(g) = grads.get(var.as_tensor()) else { break };
            let g: Vec<f64> = g.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                break;
            }
            loop {
                let trial: Vec<f64> = c
                    .iter()
                    .zip(&g)
                    .map(|(ci, gi)| (ci - step * gi / norm).clamp(-epsilon, 1.0 + epsilon))
                    .collect();
                let v = self.evaluate(std::slice::from_ref(&trial))?[0];
                if v < best {
                    c = trial;
                    best = v;
                    break;
                }
                step *= 0.5;
                if step < 1e-6 {
                    return Ok((MappingLabel(c), best));
                }
            }
        }
        Ok((MappingLabel(c), best))
    }
}

impl LabelObjective for ModelObjective<'_> {
    fn domain_count(&self) -> usize {
        self.ck.domain_count()
    }

    fn evaluate(&self, points: &[Vec<f64>]) -> Result<Vec<f64>> {
        let per_call = (MAX_EVAL_BATCH / self.count).max(1);
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(per_call) {
            let labels = self.labels(chunk)?;
            let v = self.forward(chunk, &labels)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            out.extend(v);
        }
        Ok(out)
    }
}

/// Grid-search estimate of the label for a calibration set.
pub fn estimate_label(ck: &Checkpoint, calibration: &[SlicePair], config: &GridSearchConfig) -> Result<LabelEstimate> {
    let obj = ModelObjective::new(ck, calibration)?;
    grid_search(&obj, config)
}

/// Objective of the checkpoint at a single label.
pub fn label_objective(ck: &Checkpoint, calibration: &[SlicePair], c: &MappingLabel) -> Result<f64> {
    let obj = ModelObjective::new(ck, calibration)?;
    c.check_len(obj.domain_count())?;
    let v = obj.evaluate(std::slice::from_ref(&c.0))?;
    Ok(v[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    /// Objective given directly as a function of the label.
    struct Analytic<F>(usize, F);

    impl<F: Fn(&[f64]) -> f64 + Sync> LabelObjective for Analytic<F> {
        fn domain_count(&self) -> usize {
            self.0
        }
        fn evaluate(&self, points: &[Vec<f64>]) -> Result<Vec<f64>> {
            Ok(points.iter().map(|p| (self.1)(p)).collect())
        }
    }

    fn shift_stub() -> FnObjective<impl Fn(&Array2<f64>, &[f64]) -> Array2<f64> + Sync> {
        let z = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64);
        let x = &z + 1.0;
        FnObjective::new(vec![(z, x)], 1, |z: &Array2<f64>, c: &[f64]| z + c[0]).unwrap()
    }

    #[test]
    fn exact_interpolation_at_grid_point() {
        let cfg = GridSearchConfig {
            epsilon: 0.0,
            coarse: 0.5,
            fine: 0.5,
            radius: None,
        };
        assert_eq!(coarse_grid(&cfg, 1).unwrap(), vec![vec![0.0], vec![0.5], vec![1.0]]);
        let est = grid_search(&shift_stub(), &cfg).unwrap();
        assert_eq!(est.c_t.0, vec![1.0]);
        assert_eq!(est.objective, 0.0);
    }

    #[test]
    fn quadratic_argmin_on_fine_axis() {
        let obj = Analytic(1, |c: &[f64]| (c[0] - 0.52).powi(2));
        let est = grid_search(&obj, &GridSearchConfig::default()).unwrap();
        assert!((est.c_t.0[0] - 0.52).abs() < 1e-12, "{:?}", est.c_t);
        assert!(est.fine_objective <= est.coarse_objective);
    }

    #[test]
    fn constant_generator_gives_constant_surface() {
        let z = Array2::from_elem((2, 2), 3.0);
        let x = Array2::from_elem((2, 2), 1.0);
        let obj = FnObjective::new(vec![(z, x)], 2, |z: &Array2<f64>, _c: &[f64]| z.clone()).unwrap();
        let pts = coarse_grid(&GridSearchConfig::default(), 2).unwrap();
        let s = objective_surface(&obj, &pts).unwrap();
        assert!(s.iter().all(|v| *v == 4.0));
        // ties resolve to the lexicographically smallest point
        let est = grid_search(&obj, &GridSearchConfig::default()).unwrap();
        assert_eq!(est.c_t.0, vec![-0.1, -0.1]);
    }

    #[test]
    fn surface_matches_closed_form_and_minimum() {
        let f = |c: &[f64]| (c[0] - 0.3).powi(2) + 2.0 * (c[1] - 0.74).powi(2);
        let obj = Analytic(2, f);
        let cfg = GridSearchConfig::default();
        let pts = coarse_grid(&cfg, 2).unwrap();
        assert_eq!(pts.len(), 13 * 13);
        // row-major: second coordinate varies fastest
        assert_eq!(pts[1], vec![-0.1, 0.0]);
        let s = objective_surface(&obj, &pts).unwrap();
        for (p, v) in pts.iter().zip(&s) {
            assert!((v - f(p)).abs() < 1e-6);
        }
        let est = grid_search(&obj, &cfg).unwrap();
        let min = select_minimum(&est.grid).unwrap();
        assert_eq!(min.point, est.c_t.0);
        assert!((est.c_t.0[0] - 0.3).abs() < 1e-12 && (est.c_t.0[1] - 0.74).abs() < 1e-12);
        for r in &est.grid {
            assert!(est.objective <= r.objective);
        }
    }

    #[test]
    fn non_finite_points_are_excluded() {
        let obj = Analytic(1, |c: &[f64]| if c[0] > 0.95 { f64::NAN } else { (c[0] - 1.0).powi(2) });
        let est = grid_search(&obj, &GridSearchConfig::default()).unwrap();
        assert!(!est.excluded.is_empty());
        assert!(est.excluded.iter().all(|p| p[0] > 0.95));
        assert!((est.c_t.0[0] - 0.94).abs() < 1e-12, "{:?}", est.c_t);
    }

    #[test]
    fn empty_calibration_rejected() {
        let r = FnObjective::new(Vec::new(), 1, |z: &Array2<f64>, _c: &[f64]| z.clone());
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            GridSearchConfig { fine: 0.2, coarse: 0.1, ..Default::default() },
            GridSearchConfig { coarse: 5.0, ..Default::default() },
            GridSearchConfig { fine: 0.0, ..Default::default() },
            GridSearchConfig { epsilon: -1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn surface_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_surface_csv(&p, &[vec![0.0, 0.5], vec![0.0, 1.0]], &[1.5, 2.0]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "c0,c1,objective\n0,0.5,1.5\n0,1,2\n");
    }

    proptest! {
        #[test]
        fn minimum_is_order_independent(vals in proptest::collection::vec(0u8..4, 2..40), seed in 0u64..1000) {
            let recs: Vec<GridRecord> = vals
                .iter()
                .enumerate()
                .map(|(i, v)| GridRecord { point: vec![(i % 5) as f64, (i / 5) as f64], objective: *v as f64, stage: Stage::Coarse })
                .collect();
            let a = select_minimum(&recs).unwrap().clone();
            let mut shuffled = recs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(&a, select_minimum(&shuffled).unwrap());
        }
    }
}
