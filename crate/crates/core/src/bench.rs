//! Synthetic experiment harness: procedural prototype shapes, disturbance
//! generation (outliers, occlusion, noise, random transforms), the error
//! metric, and a deterministic trial runner.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::{run_inner_approximation, SolverConfig};
use crate::transform::{apply, ModelKind, PointSet};

/// Noise level (relative to shape diameter) used when a spec does not set
/// one.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.01;
/// Scale sampling interval used when a spec does not set one.
pub const DEFAULT_SCALE_RANGE: (f64, f64) = (0.5, 1.5);
/// Bounding-box inflation factor for outlier placement.
const OUTLIER_BOX_INFLATION: f64 = 1.5;
/// Translation sampling half-range, relative to the shape diameter.
const TRANSLATION_RANGE: f64 = 0.5;

/// How the generating transform samples its rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationRule {
    /// No rotation disturbance.
    None,
    /// Uniform angle on the full circle (2D kinds).
    Full2d,
    /// Uniform angle about the z-axis (3D kinds).
    ZAxis3d,
}

/// One synthetic trial: a prototype shape plus disturbances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialSpec {
    /// Prototype identifier: `ellipse`, `star`, `spiral`, `helix`,
    /// `box-corner`.
    pub shape: String,
    /// Points sampled on the prototype; per-shape default when absent.
    #[serde(default)]
    pub n_points: Option<usize>,
    pub kind: ModelKind,
    pub n_outliers: usize,
    pub occlusion_fraction: f64,
    pub rotation: RotationRule,
    #[serde(default = "default_scale_range")]
    pub scale_range: (f64, f64),
    /// Isotropic Gaussian noise std, relative to the shape diameter.
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    pub seed: u64,
    /// Fraction of the surviving ground-truth overlap used as the match
    /// count.
    #[serde(default = "default_np_fraction")]
    pub n_p_fraction: f64,
}

fn default_scale_range() -> (f64, f64) {
    DEFAULT_SCALE_RANGE
}

fn default_noise_sigma() -> f64 {
    DEFAULT_NOISE_SIGMA
}

fn default_np_fraction() -> f64 {
    1.0
}

impl TrialSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.occlusion_fraction) {
            return Err(Error::InvalidSpec(format!(
                "occlusion_fraction {} outside [0, 1)",
                self.occlusion_fraction
            )));
        }
        if self.scale_range.0 <= 0.0 || self.scale_range.1 < self.scale_range.0 {
            return Err(Error::InvalidSpec(format!(
                "invalid scale range {:?}",
                self.scale_range
            )));
        }
        if !(self.n_p_fraction > 0.0 && self.n_p_fraction <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "n_p_fraction {} outside (0, 1]",
                self.n_p_fraction
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidSpec("negative noise sigma".into()));
        }
        Ok(())
    }
}

/// A generated instance with its ground truth.
#[derive(Debug, Clone)]
pub struct TrialData {
    pub model: PointSet,
    pub scene: PointSet,
    /// Surviving (model index, scene index) inlier pairs.
    pub inlier_pairs: Vec<(usize, usize)>,
    /// Parameters mapping model points onto their scene counterparts.
    pub phi_truth: DVector<f64>,
    /// Match count resolved from `n_p_fraction`.
    pub n_p: usize,
    /// Prototype diameter (the scale reference for errors and noise).
    pub diameter: f64,
}

/// Outcome of one trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialResult {
    pub rms_error: Option<f64>,
    pub energy: Option<f64>,
    pub certificate_eps: Option<f64>,
    pub runtime_seconds: f64,
    pub iterations: usize,
    pub status: String,
}

/// Spec echo plus outcome, one row of the suite report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub shape: String,
    pub kind: ModelKind,
    pub n_outliers: usize,
    pub occlusion_fraction: f64,
    pub n_p: usize,
    pub diameter: f64,
    #[serde(flatten)]
    pub result: TrialResult,
}

/// Aggregate statistics over a suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteAggregate {
    pub n_trials: usize,
    pub n_solved: usize,
    pub mean_rms_error: Option<f64>,
    pub median_rms_error: Option<f64>,
    pub mean_runtime_seconds: f64,
    pub median_runtime_seconds: f64,
}

/// Samples `n` points on a named prototype shape.
pub fn shape_points(shape: &str, n: Option<usize>) -> Result<PointSet> {
    match shape {
        "ellipse" => {
            let n = n.unwrap_or(40);
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|k| {
                    let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                    vec![t.cos(), 0.6 * t.sin()]
                })
                .collect();
            PointSet::from_points(&pts)
        }
        "star" => {
            let n = n.unwrap_or(40);
            // Five-pointed star polyline, sampled uniformly by arc length.
            let corners: Vec<(f64, f64)> = (0..10)
                .map(|k| {
                    let r = if k % 2 == 0 { 1.0 } else { 0.45 };
                    let a = std::f64::consts::PI * (0.5 + k as f64 / 5.0);
                    (r * a.cos(), r * a.sin())
                })
                .collect();
            PointSet::from_points(&sample_closed_polyline(&corners, n))
        }
        "spiral" => {
            let n = n.unwrap_or(50);
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|k| {
                    let t = 3.0 * std::f64::consts::PI * k as f64 / (n - 1).max(1) as f64;
                    let r = 0.25 + 0.12 * t;
                    vec![r * t.cos(), r * t.sin()]
                })
                .collect();
            PointSet::from_points(&pts)
        }
        "helix" => {
            let n = n.unwrap_or(36);
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|k| {
                    let t = 4.0 * std::f64::consts::PI * k as f64 / (n - 1).max(1) as f64;
                    vec![t.cos(), t.sin(), 0.15 * t]
                })
                .collect();
            PointSet::from_points(&pts)
        }
        "box-corner" => {
            let n = n.unwrap_or(36);
            let per_edge = n / 3;
            let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n);
            for edge in 0..3 {
                let count = if edge == 0 { n - 2 * per_edge } else { per_edge };
                for k in 0..count {
                    let s = (k + 1) as f64 / count as f64;
                    let mut p = vec![0.0, 0.0, 0.0];
                    p[edge] = s;
                    pts.push(p);
                }
            }
            PointSet::from_points(&pts)
        }
        other => Err(Error::InvalidSpec(format!("unknown shape {other:?}"))),
    }
}

fn sample_closed_polyline(corners: &[(f64, f64)], n: usize) -> Vec<Vec<f64>> {
    let m = corners.len();
    let seg_lens: Vec<f64> = (0..m)
        .map(|k| {
            let (x0, y0) = corners[k];
            let (x1, y1) = corners[(k + 1) % m];
            ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt()
        })
        .collect();
    let total: f64 = seg_lens.iter().sum();
    (0..n)
        .map(|k| {
            let mut s = total * k as f64 / n as f64;
            let mut seg = 0;
            while s > seg_lens[seg] && seg + 1 < m {
                s -= seg_lens[seg];
                seg += 1;
            }
            let t = (s / seg_lens[seg]).min(1.0);
            let (x0, y0) = corners[seg];
            let (x1, y1) = corners[(seg + 1) % m];
            vec![x0 + t * (x1 - x0), y0 + t * (y1 - y0)]
        })
        .collect()
}

/// The generating map `G(x) = M·x + t` as a matrix/translation pair.
struct GeneratingTransform {
    m: DMatrix<f64>,
    t: DVector<f64>,
}

impl GeneratingTransform {
    fn sample(spec: &TrialSpec, diameter: f64, rng: &mut ChaCha8Rng) -> Self {
        let n_d = spec.kind.n_dim();
        let (lo, hi) = spec.scale_range;
        let angle = match spec.rotation {
            RotationRule::None => 0.0,
            RotationRule::Full2d | RotationRule::ZAxis3d => {
                rng.gen_range(0.0..2.0 * std::f64::consts::PI)
            }
        };
        let m = match spec.kind {
            ModelKind::Similarity2d | ModelKind::Affine2d => {
                let s = rng.gen_range(lo..=hi);
                DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        s * angle.cos(),
                        -s * angle.sin(),
                        s * angle.sin(),
                        s * angle.cos(),
                    ],
                )
            }
            ModelKind::ScaleTranslate3d => {
                let sx = rng.gen_range(lo..=hi);
                let sy = rng.gen_range(lo..=hi);
                let sz = rng.gen_range(lo..=hi);
                DMatrix::from_diagonal(&DVector::from_column_slice(&[sx, sy, sz]))
            }
            ModelKind::ZRotScale3d => {
                let s = rng.gen_range(lo..=hi);
                let sz = rng.gen_range(lo..=hi);
                DMatrix::from_row_slice(
                    3,
                    3,
                    &[
                        s * angle.cos(),
                        -s * angle.sin(),
                        0.0,
                        s * angle.sin(),
                        s * angle.cos(),
                        0.0,
                        0.0,
                        0.0,
                        sz,
                    ],
                )
            }
        };
        let t = DVector::from_fn(n_d, |_, _| {
            rng.gen_range(-TRANSLATION_RANGE..TRANSLATION_RANGE) * diameter
        });
        Self { m, t }
    }

    /// Parameters of the inverse map in the family's parameterization (the
    /// transform the solver is expected to recover).
    fn inverse_phi(&self, kind: ModelKind) -> DVector<f64> {
        let m_inv = self
            .m
            .clone()
            .try_inverse()
            .expect("generating transform invertible");
        let t_inv = -(&m_inv * &self.t);
        match kind {
            ModelKind::Similarity2d => DVector::from_column_slice(&[
                m_inv[(0, 0)],
                m_inv[(1, 0)],
                t_inv[0],
                t_inv[1],
            ]),
            ModelKind::Affine2d => DVector::from_column_slice(&[
                m_inv[(0, 0)],
                m_inv[(0, 1)],
                m_inv[(1, 0)],
                m_inv[(1, 1)],
                t_inv[0],
                t_inv[1],
            ]),
            ModelKind::ScaleTranslate3d => DVector::from_column_slice(&[
                m_inv[(0, 0)],
                m_inv[(1, 1)],
                m_inv[(2, 2)],
                t_inv[0],
                t_inv[1],
                t_inv[2],
            ]),
            ModelKind::ZRotScale3d => DVector::from_column_slice(&[
                m_inv[(0, 0)],
                m_inv[(1, 0)],
                m_inv[(2, 2)],
                t_inv[0],
                t_inv[1],
                t_inv[2],
            ]),
        }
    }
}

/// Generates a trial: the scene is the prototype plus box outliers plus
/// noise, the model is the transformed prototype with a contiguous occluded
/// run removed plus noise. Ground truth records the surviving pairs and the
/// parameters mapping the model back onto the scene.
pub fn generate_trial(spec: &TrialSpec) -> Result<TrialData> {
    spec.validate()?;
    let proto = shape_points(&spec.shape, spec.n_points)?;
    if proto.dim() != spec.kind.n_dim() {
        return Err(Error::InvalidSpec(format!(
            "shape {} is {}-dimensional but {} expects {}",
            spec.shape,
            proto.dim(),
            spec.kind,
            spec.kind.n_dim()
        )));
    }
    let n_proto = proto.len();
    let n_d = proto.dim();
    let diameter = proto.diameter();
    let sigma = spec.noise_sigma * diameter;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let gauss = |rng: &mut ChaCha8Rng, sigma: f64| -> f64 {
        // Box-Muller; two uniforms per draw keeps the stream simple.
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };

    // Scene: noisy prototype copies, then outliers in the inflated box.
    let (lo, hi) = proto.bounding_box();
    let center = (&lo + &hi) * 0.5;
    let half = (&hi - &lo) * (0.5 * OUTLIER_BOX_INFLATION);
    let mut scene_cols: Vec<DVector<f64>> = Vec::with_capacity(n_proto + spec.n_outliers);
    for j in 0..n_proto {
        let mut p = proto.point(j).clone_owned();
        for r in 0..n_d {
            p[r] += gauss(&mut rng, sigma);
        }
        scene_cols.push(p);
    }
    for _ in 0..spec.n_outliers {
        let p = DVector::from_fn(n_d, |r, _| {
            center[r] + rng.gen_range(-1.0..1.0) * half[r].max(1e-9)
        });
        scene_cols.push(p);
    }

    // Model: transformed prototype, occluded, noisy.
    let transform = GeneratingTransform::sample(spec, diameter, &mut rng);
    let transformed: Vec<DVector<f64>> = (0..n_proto)
        .map(|i| &transform.m * proto.point(i) + &transform.t)
        .collect();

    let n_occluded = (spec.occlusion_fraction * n_proto as f64).round() as usize;
    let survivors: Vec<usize> = if n_occluded == 0 {
        (0..n_proto).collect()
    } else {
        // Contiguous run anchored at the extreme point of a random
        // direction (the side nearest a random half-plane), wrapping around
        // the contour order.
        let dir = {
            let mut d = DVector::from_fn(n_d, |_, _| rng.gen_range(-1.0..1.0f64));
            while d.norm() < 1e-9 {
                d = DVector::from_fn(n_d, |_, _| rng.gen_range(-1.0..1.0f64));
            }
            d.normalize()
        };
        let anchor = (0..n_proto)
            .max_by(|&a, &b| {
                dir.dot(&transformed[a])
                    .total_cmp(&dir.dot(&transformed[b]))
                    .then(b.cmp(&a))
            })
            .unwrap();
        let removed: std::collections::BTreeSet<usize> =
            (0..n_occluded).map(|k| (anchor + k) % n_proto).collect();
        (0..n_proto).filter(|i| !removed.contains(i)).collect()
    };
    if survivors.is_empty() {
        return Err(Error::InvalidSpec(
            "occlusion removed every model point".into(),
        ));
    }

    let mut model_cols: Vec<DVector<f64>> = Vec::with_capacity(survivors.len());
    let mut inlier_pairs: Vec<(usize, usize)> = Vec::with_capacity(survivors.len());
    for (new_idx, &orig) in survivors.iter().enumerate() {
        let mut p = transformed[orig].clone();
        for r in 0..n_d {
            p[r] += gauss(&mut rng, sigma);
        }
        model_cols.push(p);
        inlier_pairs.push((new_idx, orig));
    }

    let model = PointSet::new(DMatrix::from_columns(&model_cols))?;
    let scene = PointSet::new(DMatrix::from_columns(&scene_cols))?;
    let n_inliers = inlier_pairs.len();
    let n_p = ((spec.n_p_fraction * n_inliers as f64).floor() as usize)
        .max(spec.kind.min_matches())
        .min(model.len().min(scene.len()));
    let phi_truth = transform.inverse_phi(spec.kind);

    Ok(TrialData {
        model,
        scene,
        inlier_pairs,
        phi_truth,
        n_p,
        diameter,
    })
}

/// Root mean squared difference between the coordinates of transformed
/// model inliers and their scene counterparts, normalized per coordinate.
pub fn rms_error(
    phi: &DVector<f64>,
    kind: ModelKind,
    inlier_pairs: &[(usize, usize)],
    model: &PointSet,
    scene: &PointSet,
) -> Result<f64> {
    if inlier_pairs.is_empty() {
        return Err(Error::InvalidInput("no inlier pairs".into()));
    }
    let n_d = kind.n_dim();
    let mut total = 0.0;
    for &(i, j) in inlier_pairs {
        let mapped = apply(kind, phi, &model.point(i))?;
        total += (scene.point(j) - mapped).norm_squared();
    }
    Ok((total / (inlier_pairs.len() * n_d) as f64).sqrt())
}

/// Runs one trial end to end.
pub fn run_trial(spec: &TrialSpec, config: &SolverConfig) -> TrialResult {
    let started = std::time::Instant::now();
    let data = match generate_trial(spec) {
        Ok(d) => d,
        Err(e) => {
            return TrialResult {
                rms_error: None,
                energy: None,
                certificate_eps: None,
                runtime_seconds: started.elapsed().as_secs_f64(),
                iterations: 0,
                status: format!("error: {e}"),
            }
        }
    };
    match run_inner_approximation(&data.model, &data.scene, spec.kind, data.n_p, config) {
        Ok(result) => {
            let rms = rms_error(
                &result.phi,
                spec.kind,
                &data.inlier_pairs,
                &data.model,
                &data.scene,
            )
            .ok();
            TrialResult {
                rms_error: rms,
                energy: Some(result.energy),
                certificate_eps: Some(result.certificate_eps),
                runtime_seconds: started.elapsed().as_secs_f64(),
                iterations: result.iterations,
                status: result.status.name().to_string(),
            }
        }
        Err(e) => TrialResult {
            rms_error: None,
            energy: None,
            certificate_eps: None,
            runtime_seconds: started.elapsed().as_secs_f64(),
            iterations: 0,
            status: format!("error: {e}"),
        },
    }
}

/// Runs every trial (in parallel; each owns its seed) and aggregates.
pub fn run_suite(specs: &[TrialSpec], config: &SolverConfig) -> (Vec<TrialRecord>, SuiteAggregate) {
    let records: Vec<TrialRecord> = specs
        .par_iter()
        .enumerate()
        .map(|(trial_id, spec)| {
            let (n_p, diameter) = match generate_trial(spec) {
                Ok(d) => (d.n_p, d.diameter),
                Err(_) => (0, 0.0),
            };
            let result = run_trial(spec, config);
            TrialRecord {
                trial_id,
                shape: spec.shape.clone(),
                kind: spec.kind,
                n_outliers: spec.n_outliers,
                occlusion_fraction: spec.occlusion_fraction,
                n_p,
                diameter,
                result,
            }
        })
        .collect();

    let aggregate = aggregate_records(&records);
    (records, aggregate)
}

/// Recomputes suite statistics from records (also used to round-trip the
/// persisted CSV).
pub fn aggregate_records(records: &[TrialRecord]) -> SuiteAggregate {
    let solved: Vec<&TrialRecord> = records
        .iter()
        .filter(|r| r.result.rms_error.is_some())
        .collect();
    let mut rms: Vec<f64> = solved.iter().filter_map(|r| r.result.rms_error).collect();
    rms.sort_by(f64::total_cmp);
    let mut runtimes: Vec<f64> = records.iter().map(|r| r.result.runtime_seconds).collect();
    runtimes.sort_by(f64::total_cmp);
    let mean = |v: &[f64]| -> Option<f64> {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let median = |v: &[f64]| -> Option<f64> {
        if v.is_empty() {
            None
        } else if v.len() % 2 == 1 {
            Some(v[v.len() / 2])
        } else {
            Some(0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2]))
        }
    };
    SuiteAggregate {
        n_trials: records.len(),
        n_solved: solved.len(),
        mean_rms_error: mean(&rms),
        median_rms_error: median(&rms),
        mean_runtime_seconds: mean(&runtimes).unwrap_or(0.0),
        median_runtime_seconds: median(&runtimes).unwrap_or(0.0),
    }
}
