//! Evaluation metrics: aligned point errors, scale-corrected shape error,
//! F-scores and sparse vertex-to-joint mappings.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Rig;
use crate::energies::{EnergyWeights, Priors};
use crate::error::{Error, Result};
use crate::fitter::{fit_sequence, FitConfig};
use crate::observations::ObservationSet;
use crate::model::{evaluate_mesh, forward_kinematics, shaped_template, ModelDefinition, Parameters};

/// `target ~ scale * rotation * source + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().fold(Vector3::zeros(), |a, p| a + p) / points.len() as f64
}

fn check_pair(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("point counts differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::InsufficientData("empty point set".into()));
    }
    Ok(())
}

/// Least-squares similarity (or rigid motion) taking `source` onto `target`.
pub fn procrustes_align(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    with_scale: bool,
) -> Result<(Similarity, Vec<Vector3<f64>>)> {
    check_pair(source, target)?;
    if source.len() < 3 {
        return Err(Error::Degenerate("alignment needs at least 3 points".into()));
    }
    let cs = centroid(source);
    let ct = centroid(target);
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        cov += (t - ct) * (s - cs).transpose();
        var_s += (s - cs).norm_squared();
    }
    let spread = source
        .iter()
        .fold(Matrix3::zeros(), |a, s| a + (s - cs) * (s - cs).transpose());
    let mut ev: Vec<f64> = spread.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[1] > 1e-12 * ev[0].max(1e-300)) {
        return Err(Error::Degenerate("source points have rank below 2".into()));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Numeric("SVD did not converge".into())),
    };
    let d = if (u * v_t).determinant() < 0.0 { -1.0 } else { 1.0 };
    let sign = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = u * sign * v_t;
    let scale = if with_scale {
        let sv = svd.singular_values;
        (sv[0] + sv[1] + d * sv[2]) / var_s
    } else {
        1.0
    };
    let translation = ct - rotation * cs * scale;
    let sim = Similarity {
        rotation,
        translation,
        scale,
    };
    let aligned = source.iter().map(|p| sim.apply(p)).collect();
    Ok((sim, aligned))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    None,
    Pelvis,
    Procrustes,
}

impl AlignMode {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(AlignMode::None),
            "pelvis" => Ok(AlignMode::Pelvis),
            "procrustes" => Ok(AlignMode::Procrustes),
            _ => Err(Error::Lookup {
                kind: "alignment mode",
                name: name.into(),
            }),
        }
    }
}

fn mean_distance_mm(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len() as f64 * 1000.0
}

/// Mean Euclidean distance in millimeters (inputs in meters) after alignment.
/// Procrustes mode includes uniform scale.
pub fn point_error(pred: &[Vector3<f64>], gt: &[Vector3<f64>], mode: AlignMode, pelvis: Option<usize>) -> Result<f64> {
    check_pair(pred, gt)?;
    match mode {
        AlignMode::None => Ok(mean_distance_mm(pred, gt)),
        AlignMode::Pelvis => {
            let p = pelvis.ok_or_else(|| Error::Config("pelvis alignment needs a pelvis index".into()))?;
            if p >= pred.len() {
                return Err(Error::Shape(format!("pelvis index {p} out of range")));
            }
            let shift = gt[p] - pred[p];
            let moved: Vec<Vector3<f64>> = pred.iter().map(|x| x + shift).collect();
            Ok(mean_distance_mm(&moved, gt))
        }
        AlignMode::Procrustes => {
            let (_, aligned) = procrustes_align(pred, gt, true)?;
            Ok(mean_distance_mm(&aligned, gt))
        }
    }
}

/// Mean vertex error of the scale-corrected shaped meshes (no pose, no expression).
pub fn pve_t_sc(model: &ModelDefinition, pred: &Parameters, gt: &Parameters) -> Result<f64> {
    let a = shaped_template(model, pred)?;
    let b = shaped_template(model, gt)?;
    pve_t_sc_meshes(&a, &b)
}

/// Both meshes are centered on their centroids, then the prediction is scaled
/// by the factor minimizing the mean vertex distance.
pub fn pve_t_sc_meshes(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    check_pair(pred, gt)?;
    let cp = centroid(pred);
    let cg = centroid(gt);
    let p: Vec<Vector3<f64>> = pred.iter().map(|x| x - cp).collect();
    let g: Vec<Vector3<f64>> = gt.iter().map(|x| x - cg).collect();
    let cost = |s: f64| -> f64 { p.iter().zip(&g).map(|(a, b)| (a * s - b).norm()).sum::<f64>() };
    let pp: f64 = p.iter().map(|a| a.norm_squared()).sum();
    if !(pp > 0.0) {
        return Ok(mean_distance_mm(&p, &g));
    }
    let s_ls = p.iter().zip(&g).map(|(a, b)| a.dot(b)).sum::<f64>() / pp;
    // The mean distance is convex in the scale, so a golden-section search
    // over a bracket around the least-squares scale finds the minimum.
    let (mut lo, mut hi) = (0.0, 2.0 * s_ls.abs().max(1.0) + 1.0);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (cost(x1), cost(x2));
    for _ in 0..200 {
        if hi - lo < 1e-14 {
            break;
        }
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = cost(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = cost(x2);
        }
    }
    let best = [s_ls, 0.5 * (lo + hi), 1.0]
        .into_iter()
        .map(cost)
        .fold(f64::INFINITY, f64::min);
    Ok(best / p.len() as f64 * 1000.0)
}

fn nearest_distances(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> Vec<f64> {
    crate::par::map_slice(from, |p| {
        to.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt()
    })
}

/// Harmonic mean of precision and recall; a point counts when its nearest
/// neighbour in the other set is within `threshold_mm` (inputs in meters).
pub fn f_score(pred: &[Vector3<f64>], gt: &[Vector3<f64>], threshold_mm: f64) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::InsufficientData("f-score needs nonempty point sets".into()));
    }
    let thr = threshold_mm / 1000.0;
    let frac = |d: Vec<f64>| d.iter().filter(|&&x| x <= thr).count() as f64 / d.len() as f64;
    let precision = frac(nearest_distances(pred, gt));
    let recall = frac(nearest_distances(gt, pred));
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Sparse affine vertex combination predicting one joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointFit {
    pub vertices: Vec<usize>,
    pub weights: Vec<f64>,
    /// Root-mean-square joint prediction error over the fitted frames, meters.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointMapping {
    pub frames: Vec<usize>,
    pub joints: Vec<JointFit>,
}

impl JointMapping {
    pub fn apply(&self, vertices: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        self.joints
            .iter()
            .map(|j| {
                j.vertices
                    .iter()
                    .zip(&j.weights)
                    .fold(Vector3::zeros(), |a, (&v, &w)| a + vertices[v] * w)
            })
            .collect()
    }
}

/// Equally spaced 5% subset of the frames starting at frame 0, at least four frames.
pub fn mapping_frames(total: usize) -> Result<Vec<usize>> {
    if total < 4 {
        return Err(Error::InsufficientData(format!(
            "joint mapping needs at least 4 frames, got {total}"
        )));
    }
    let count = ((total as f64 * 0.05).ceil() as usize).max(4);
    Ok((0..count).map(|i| i * total / count).collect())
}

/// Affine-constrained least squares: weights summing to one over the selected
/// columns. Returns the weights and squared residual, or `None` when the
/// selection is rank deficient.
fn affine_fit(columns: &[Vec<f64>], selected: &[usize], target: &[f64]) -> Option<(Vec<f64>, f64)> {
    let base = &columns[selected[0]];
    let rhs: Vec<f64> = target.iter().zip(base).map(|(t, b)| t - b).collect();
    let s = selected.len() - 1;
    if s == 0 {
        return Some((vec![1.0], rhs.iter().map(|x| x * x).sum()));
    }
    let diffs: Vec<Vec<f64>> = selected[1..]
        .iter()
        .map(|&v| columns[v].iter().zip(base).map(|(c, b)| c - b).collect())
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut gram = vec![0.0; s * s];
    let mut h = vec![0.0; s];
    for i in 0..s {
        h[i] = dot(&diffs[i], &rhs);
        for j in 0..=i {
            let g = dot(&diffs[i], &diffs[j]);
            gram[i * s + j] = g;
            gram[j * s + i] = g;
        }
    }
    let z = cholesky_solve(&mut gram, &h, s)?;
    let mut resid = 0.0;
    for (row, r) in rhs.iter().enumerate() {
        let fitted: f64 = (0..s).map(|i| diffs[i][row] * z[i]).sum();
        resid += (fitted - r) * (fitted - r);
    }
    let mut w = vec![1.0 - z.iter().sum::<f64>()];
    w.extend(z);
    Some((w, resid))
}

/// Solves a small symmetric positive definite system in place; `None` when a
/// pivot collapses relative to the diagonal.
fn cholesky_solve(a: &mut [f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let max_diag = (0..n).map(|i| a[i * n + i]).fold(0.0, f64::max);
    if !(max_diag > 0.0) {
        return None;
    }
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 1e-14 * max_diag) {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / d;
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= a[i * n + k] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= a[k * n + i] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    Some(y)
}

type Selection = (Vec<usize>, Vec<f64>, f64);

struct MappingSearch<'a> {
    columns: &'a [Vec<f64>],
    target: &'a [f64],
}

impl MappingSearch<'_> {
    fn eval(&self, sel: &[usize]) -> Option<(Vec<f64>, f64)> {
        affine_fit(self.columns, sel, self.target)
    }

    /// Adds the vertex that lowers the residual most.
    fn grow(&self, current: &Selection) -> Option<Selection> {
        let mut best: Option<Selection> = None;
        for v in 0..self.columns.len() {
            if current.0.contains(&v) {
                continue;
            }
            let mut trial = current.0.clone();
            trial.push(v);
            if let Some((w, r)) = self.eval(&trial) {
                if best.as_ref().is_none_or(|b| r < b.2) {
                    best = Some((trial, w, r));
                }
            }
        }
        best
    }

    /// The single vertex that best completes `base`, found by projecting out
    /// the affine hull of `base`. Returns the vertex and its squared residual.
    fn complete(&self, base: &[usize]) -> Option<(usize, f64)> {
        let origin = &self.columns[base[0]];
        let sub = |a: &[f64]| -> Vec<f64> { a.iter().zip(origin).map(|(x, o)| x - o).collect() };
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(base.len());
        let reject = |basis: &[Vec<f64>], mut v: Vec<f64>| {
            for q in basis {
                let c = dot(q, &v);
                v.iter_mut().zip(q).for_each(|(x, qi)| *x -= c * qi);
            }
            v
        };
        for &b in &base[1..] {
            let d = sub(&self.columns[b]);
            let scale = dot(&d, &d);
            let v = reject(&basis, d);
            let norm = dot(&v, &v);
            if norm <= 1e-20 * scale.max(1e-300) {
                return None;
            }
            basis.push(v.into_iter().map(|x| x / norm.sqrt()).collect());
        }
        let residual = reject(&basis, sub(self.target));
        let base_r = dot(&residual, &residual);
        let mut best: Option<(usize, f64)> = None;
        for v in 0..self.columns.len() {
            if base.contains(&v) {
                continue;
            }
            let d = sub(&self.columns[v]);
            let scale = dot(&d, &d);
            let perp = reject(&basis, d);
            let norm = dot(&perp, &perp);
            if norm <= 1e-20 * scale.max(1e-300) {
                continue;
            }
            let proj = dot(&perp, &residual);
            let r = (base_r - proj * proj / norm).max(0.0);
            if best.is_none_or(|b| r < b.1) {
                best = Some((v, r));
            }
        }
        best
    }

    /// Replaces members one at a time while that lowers the residual.
    fn refine(&self, mut current: Selection, tiny: f64) -> Selection {
        for _ in 0..8 {
            let mut changed = false;
            for slot in 0..current.0.len() {
                for v in 0..self.columns.len() {
                    if current.2 <= tiny {
                        return current;
                    }
                    if current.0.contains(&v) {
                        continue;
                    }
                    let mut trial = current.0.clone();
                    trial[slot] = v;
                    if let Some((w, r)) = self.eval(&trial) {
                        if r < current.2 * (1.0 - 1e-9) {
                            current = (trial, w, r);
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        current
    }
}

const MAPPING_RESTARTS: usize = 24;
/// Upper bound on (neighbourhood subsets) x (vertices) scanned per joint and size.
const NEIGHBOURHOOD_BUDGET: f64 = 2.0e6;

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Visits every `size`-subset of `pool` in lexicographic order.
fn for_each_subset(pool: &[usize], size: usize, mut visit: impl FnMut(&[usize])) {
    let n = pool.len();
    if size == 0 || size > n {
        return;
    }
    let mut idx: Vec<usize> = (0..size).collect();
    let mut sel = vec![0; size];
    loop {
        for (s, &i) in sel.iter_mut().zip(&idx) {
            *s = pool[i];
        }
        visit(&sel);
        let Some(i) = (0..size).rev().find(|&i| idx[i] < n - size + i) else {
            return;
        };
        idx[i] += 1;
        for j in i + 1..size {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn fit_one(columns: &[Vec<f64>], target: &[f64], k: usize, frames: usize) -> JointFit {
    let search = MappingSearch { columns, target };
    let scale: f64 = target.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let tiny = (1e-13 * scale).powi(2);
    // Single vertices ranked by residual seed the restarts.
    let mut singles: Vec<(usize, f64)> = (0..columns.len())
        .map(|v| (v, search.eval(&[v]).map_or(f64::INFINITY, |(_, r)| r)))
        .collect();
    singles.sort_by(|a, b| a.1.total_cmp(&b.1));
    let Some(&(first, r0)) = singles.first() else {
        return JointFit {
            vertices: vec![],
            weights: vec![],
            residual: f64::INFINITY,
        };
    };
    let mut best: Selection = (vec![first], vec![1.0], r0);
    for size in 2..=k {
        if best.2 <= tiny {
            break;
        }
        // Growing the previous best keeps the residual non-increasing in k.
        let Some(grown) = search.grow(&best) else { break };
        let mut candidate = search.refine(grown, tiny);
        for &(seed, _) in singles.iter().skip(1).take(MAPPING_RESTARTS) {
            if candidate.2 <= tiny {
                break;
            }
            let mut trial: Selection = (vec![seed], vec![1.0], f64::INFINITY);
            for _ in 1..size {
                match search.grow(&trial) {
                    Some(next) => trial = next,
                    None => break,
                }
            }
            if trial.0.len() == size {
                let trial = search.refine(trial, tiny);
                if trial.2 < candidate.2 {
                    candidate = trial;
                }
            }
        }
        if candidate.2 > tiny {
            // Every subset of the closest vertices, completed by the best vertex overall.
            let per_base = columns.len() as f64;
            let mut pool_size = singles.len();
            while pool_size > size - 1 && binomial(pool_size, size - 1) * per_base > NEIGHBOURHOOD_BUDGET {
                pool_size -= 1;
            }
            let pool: Vec<usize> = singles[..pool_size].iter().map(|s| s.0).collect();
            let mut found: Option<(Vec<usize>, f64)> = None;
            for_each_subset(&pool, size - 1, |base| {
                if let Some((v, r)) = search.complete(base) {
                    if r < found.as_ref().map_or(candidate.2, |f| f.1) {
                        let mut sel = base.to_vec();
                        sel.push(v);
                        found = Some((sel, r));
                    }
                }
            });
            if let Some((sel, _)) = found {
                if let Some((w, r)) = search.eval(&sel) {
                    if r < candidate.2 {
                        candidate = (sel, w, r);
                    }
                }
            }
        }
        if candidate.2 <= best.2 {
            best = candidate;
        }
    }
    JointFit {
        residual: (best.2 / frames as f64).sqrt(),
        vertices: best.0,
        weights: best.1,
    }
}

/// Per joint, the affine combination of at most `k` vertices that best predicts
/// it over an equally spaced 5% subset of frames. Vertices are picked greedily
/// with swap refinement after every addition, plus restarts from other seed
/// vertices. A joint with no usable selection maps to its nearest vertex.
pub fn fit_joint_mapping(
    meshes: &[Vec<Vector3<f64>>],
    joints: &[Vec<Vector3<f64>>],
    k: usize,
) -> Result<JointMapping> {
    if meshes.len() != joints.len() {
        return Err(Error::Shape(format!(
            "{} mesh frames but {} joint frames",
            meshes.len(),
            joints.len()
        )));
    }
    if k == 0 {
        return Err(Error::Config("joint mapping needs k >= 1".into()));
    }
    let frames = mapping_frames(meshes.len())?;
    let n = meshes[frames[0]].len();
    let nj = joints[frames[0]].len();
    if frames.iter().any(|&f| meshes[f].len() != n || joints[f].len() != nj) {
        return Err(Error::Shape("frames differ in vertex or joint count".into()));
    }
    let stack = |pts: &dyn Fn(usize) -> Vector3<f64>| -> Vec<f64> {
        frames
            .iter()
            .flat_map(|&f| {
                let p = pts(f);
                [p.x, p.y, p.z]
            })
            .collect()
    };
    let columns: Vec<Vec<f64>> = (0..n).map(|v| stack(&|f| meshes[f][v])).collect();
    let targets: Vec<Vec<f64>> = (0..nj).map(|j| stack(&|f| joints[f][j])).collect();
    let fits = crate::par::map_slice(&targets, |t| fit_one(&columns, t, k, frames.len()));
    Ok(JointMapping { frames, joints: fits })
}

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: String,
    pub value: f64,
    pub unit: String,
    pub alignment: Option<AlignMode>,
}

/// Evaluation report written by the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub config_hash: String,
    pub model_hash: String,
    pub metrics: Vec<MetricValue>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub view_sweep: Vec<ViewCount>,
}

/// World-space MPJPE of re-fits on every camera subset of one size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewCount {
    pub views: usize,
    pub subsets: Vec<Vec<usize>>,
    pub mpjpe: Vec<f64>,
    pub median_mpjpe: f64,
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }
}

/// Sequence metrics of a fit against ground truth, averaged over frames.
///
/// Joints are the posed skeleton joints. Pelvis alignment uses the root
/// joint; F-scores use pelvis-aligned vertices.
pub fn evaluate_sequence(
    model: &ModelDefinition,
    pred: &Parameters,
    gt: &Parameters,
    config_hash: &str,
) -> Result<EvalReport> {
    pred.validate(model)?;
    gt.validate(model)?;
    let frames = gt.num_frames();
    if pred.num_frames() != frames || frames == 0 {
        return Err(Error::Shape(format!(
            "prediction has {} frames, ground truth {frames}",
            pred.num_frames()
        )));
    }
    let root = model.topo_order[0];
    let per_frame = crate::par::map_range(frames, |f| -> Result<[f64; 7]> {
        let pj = forward_kinematics(model, pred, f)?.translations;
        let gj = forward_kinematics(model, gt, f)?.translations;
        let pv = evaluate_mesh(model, pred, f)?;
        let gv = evaluate_mesh(model, gt, f)?;
        let shift = gj[root] - pj[root];
        let centered: Vec<Vector3<f64>> = pv.iter().map(|v| v + shift).collect();
        Ok([
            point_error(&pj, &gj, AlignMode::None, None)?,
            point_error(&pj, &gj, AlignMode::Procrustes, None)?,
            mean_distance_mm(&pv, &gv),
            mean_distance_mm(&centered, &gv),
            point_error(&pv, &gv, AlignMode::Procrustes, None)?,
            f_score(&centered, &gv, 5.0)?,
            f_score(&centered, &gv, 10.0)?,
        ])
    });
    let mut sums = [0.0; 7];
    for values in per_frame {
        for (s, v) in sums.iter_mut().zip(values?) {
            *s += v;
        }
    }
    let mean = sums.map(|s| s / frames as f64);
    let metric = |name: &str, value: f64, unit: &str, alignment: Option<AlignMode>| MetricValue {
        name: name.into(),
        value,
        unit: unit.into(),
        alignment,
    };
    Ok(EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        config_hash: config_hash.into(),
        model_hash: model.hash().into(),
        metrics: vec![
            metric("mpjpe", mean[0], "mm", Some(AlignMode::None)),
            metric("pa_mpjpe", mean[1], "mm", Some(AlignMode::Procrustes)),
            metric("mpvpe_world", mean[2], "mm", Some(AlignMode::None)),
            metric("mpvpe", mean[3], "mm", Some(AlignMode::Pelvis)),
            metric("pa_mpvpe", mean[4], "mm", Some(AlignMode::Procrustes)),
            metric("pve_t_sc", pve_t_sc(model, pred, gt)?, "mm", None),
            metric("f_score_5mm", mean[5], "ratio", Some(AlignMode::Pelvis)),
            metric("f_score_10mm", mean[6], "ratio", Some(AlignMode::Pelvis)),
        ],
        view_sweep: Vec::new(),
    })
}

/// Every `k`-element subset of `0..n` in lexicographic order.
pub fn camera_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn extend(start: usize, n: usize, k: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in start..n {
            current.push(i);
            extend(i + 1, n, k, current, out);
            current.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        extend(0, n, k, &mut Vec::new(), &mut out);
    }
    out
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Re-fits the sequence on every subset of `counts` cameras and scores the
/// world-space MPJPE of each fit against ground truth.
#[allow(clippy::too_many_arguments)]
pub fn view_count_sweep(
    model: &ModelDefinition,
    obs: &ObservationSet,
    rig: &Rig,
    priors: &Priors,
    weights: &EnergyWeights,
    config: &FitConfig,
    gt: &Parameters,
    counts: &[usize],
) -> Result<Vec<ViewCount>> {
    let n = obs.num_cameras();
    if rig.len() != n {
        return Err(Error::Shape(format!("rig has {} cameras, observations have {n}", rig.len())));
    }
    counts
        .iter()
        .map(|&k| {
            if k == 0 || k > n {
                return Err(Error::Config(format!("cannot select {k} of {n} cameras")));
            }
            let subsets = camera_subsets(n, k);
            let mpjpe = subsets
                .iter()
                .map(|cams| {
                    let fit = fit_sequence(model, &obs.select_cameras(cams)?, Some(&rig.select(cams)?), priors, weights, config, None)?;
                    Ok(evaluate_sequence(model, &fit.params, gt, "")?.get("mpjpe").expect("mpjpe is always reported"))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(ViewCount {
                views: k,
                median_mpjpe: median(&mpjpe),
                subsets,
                mpjpe,
            })
        })
        .collect()
}
