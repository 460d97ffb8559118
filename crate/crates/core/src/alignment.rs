//! Aligning the robot's own (non-georegistered) trajectory with past
//! position estimates on the map.
//!
//! The local trajectory comes from odometry in an arbitrary frame and scale.
//! Fitting a similarity transform from it to the independent per-step
//! estimates, with RANSAC to reject estimates made in ambiguous regions,
//! gives a predicted map position for the current step.

use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::Point2;

/// `p ↦ s·R(θ)·p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub rotation_deg: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl SimilarityTransform {
    pub const IDENTITY: Self = Self {
        rotation_deg: 0.0,
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(rotation_deg: f64, scale: f64, tx: f64, ty: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "scale must be positive, got {scale}"
            )));
        }
        Ok(Self {
            rotation_deg,
            scale,
            tx,
            ty,
        })
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        p.rotated(self.rotation_deg.to_radians()) * self.scale + Point2::new(self.tx, self.ty)
    }

    pub fn inverse(&self) -> Self {
        let inv_s = 1.0 / self.scale;
        let t = Point2::new(self.tx, self.ty).rotated(-self.rotation_deg.to_radians()) * -inv_s;
        Self {
            rotation_deg: -self.rotation_deg,
            scale: inv_s,
            tx: t.x,
            ty: t.y,
        }
    }
}

fn centroid(points: &[Point2]) -> Point2 {
    let sum = points.iter().fold(Point2::default(), |a, &p| a + p);
    sum * (1.0 / points.len() as f64)
}

/// Least-squares similarity transform (no reflection) taking `src` onto `dst`.
pub fn procrustes(src: &[Point2], dst: &[Point2]) -> Result<SimilarityTransform> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch(src.len(), dst.len()));
    }
    if src.len() < 2 {
        return Err(Error::DegeneratePoints("need at least two correspondences"));
    }
    let (ms, md) = (centroid(src), centroid(dst));
    let (mut a, mut b, mut var) = (0.0, 0.0, 0.0);
    for (&s, &d) in src.iter().zip(dst) {
        let (s, d) = (s - ms, d - md);
        a += s.x * d.x + s.y * d.y;
        b += s.x * d.y - s.y * d.x;
        var += s.x * s.x + s.y * s.y;
    }
    let spread = src.iter().map(|p| p.distance(ms)).fold(0.0, f64::max);
    if var == 0.0 || spread <= 1e-12 * (1.0 + ms.norm()) {
        return Err(Error::DegeneratePoints("source points coincide"));
    }
    let theta = b.atan2(a);
    let scale = a.hypot(b) / var;
    if !(scale > 0.0) {
        return Err(Error::DegeneratePoints("destination points coincide"));
    }
    let t = md - ms.rotated(theta) * scale;
    Ok(SimilarityTransform {
        rotation_deg: theta.to_degrees(),
        scale,
        tx: t.x,
        ty: t.y,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacParams {
    pub iterations: usize,
    pub sample_size: usize,
    /// Max distance (cells) between a transformed trajectory point and its estimate.
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    /// Hypotheses with a scale outside `[lo, hi]` are discarded.
    pub scale_bounds: Option<(f64, f64)>,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 200,
            sample_size: 3,
            inlier_threshold: 15.0,
            min_inliers: 3,
            scale_bounds: None,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<()> {
        if self.sample_size < 2 || self.iterations == 0 {
            return Err(Error::InvalidParameter(
                "RANSAC needs sample_size >= 2 and at least one iteration".into(),
            ));
        }
        if !(self.inlier_threshold >= 0.0) {
            return Err(Error::InvalidParameter(
                "inlier_threshold must be non-negative".into(),
            ));
        }
        if let Some((lo, hi)) = self.scale_bounds {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::InvalidParameter(format!(
                    "bad scale bounds [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub transform: SimilarityTransform,
    /// Consensus of `transform`.
    pub inliers: Vec<bool>,
    /// Inlier count of the winning minimal-sample hypothesis.
    pub support: usize,
}

impl Alignment {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn consensus(
    t: &SimilarityTransform,
    trajectory: &[Point2],
    estimates: &[Point2],
    threshold: f64,
) -> Vec<bool> {
    trajectory
        .iter()
        .zip(estimates)
        .map(|(&x, &e)| t.apply(x).distance(e) <= threshold)
        .collect()
}

/// Robustly fits the transform taking `trajectory` onto `estimates`.
///
/// Each iteration fits a minimal sample; the hypothesis with the most
/// inliers wins (earliest on ties) and the returned transform is refit on
/// its inliers. The returned mask is the consensus of the refit transform.
pub fn ransac_align<R: Rng + ?Sized>(
    estimates: &[Point2],
    trajectory: &[Point2],
    params: &RansacParams,
    rng: &mut R,
) -> Result<Alignment> {
    params.validate()?;
    if estimates.len() != trajectory.len() {
        return Err(Error::LengthMismatch(estimates.len(), trajectory.len()));
    }
    let n = estimates.len();
    if n < params.sample_size {
        return Err(Error::InvalidParameter(format!(
            "{n} correspondences, RANSAC samples {}",
            params.sample_size
        )));
    }
    let mut best: Option<(usize, Vec<bool>)> = None;
    let mut src = Vec::with_capacity(params.sample_size);
    let mut dst = Vec::with_capacity(params.sample_size);
    for _ in 0..params.iterations {
        src.clear();
        dst.clear();
        for i in index::sample(rng, n, params.sample_size) {
            src.push(trajectory[i]);
            dst.push(estimates[i]);
        }
        let Ok(t) = procrustes(&src, &dst) else {
            continue;
        };
        if let Some((lo, hi)) = params.scale_bounds {
            if t.scale < lo || t.scale > hi {
                continue;
            }
        }
        let mask = consensus(&t, trajectory, estimates, params.inlier_threshold);
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, mask));
        }
    }
    let (count, inliers) = best.unwrap_or((0, vec![false; n]));
    if count < params.min_inliers || count < 2 {
        return Err(Error::NotLocalizable {
            found: count,
            required: params.min_inliers.max(2),
        });
    }
    let (src, dst): (Vec<Point2>, Vec<Point2>) = inliers
        .iter()
        .zip(trajectory.iter().zip(estimates))
        .filter_map(|(&keep, (&x, &e))| keep.then_some((x, e)))
        .unzip();
    let transform = procrustes(&src, &dst)?;
    let inliers = consensus(&transform, trajectory, estimates, params.inlier_threshold);
    Ok(Alignment {
        transform,
        inliers,
        support: count,
    })
}

/// Predicted map position for a trajectory point, clamped into the map.
pub fn predict_prior(
    transform: &SimilarityTransform,
    point: Point2,
    width: usize,
    height: usize,
) -> Point2 {
    transform.apply(point).clamp_to(width, height)
}

/// CSV `t,theta_deg,scale,tx,ty`.
pub fn write_transform_log(rows: &[(usize, SimilarityTransform)]) -> String {
    let mut out = String::from("t,theta_deg,scale,tx,ty\n");
    for (t, tr) in rows {
        writeln!(
            out,
            "{t},{},{},{},{}",
            tr.rotation_deg, tr.scale, tr.tx, tr.ty
        )
        .unwrap();
    }
    out
}

/// CSV `t,x,y` of the local trajectory (meters, arbitrary frame).
pub fn write_trajectory_csv(points: &[Point2]) -> String {
    let mut out = String::from("t,x,y\n");
    for (t, p) in points.iter().enumerate() {
        writeln!(out, "{t},{},{}", p.x, p.y).unwrap();
    }
    out
}

/// Parses a `t,x,y` CSV. Rows must be in order `t = 0, 1, ...`; extra
/// columns are ignored.
pub fn parse_trajectory_csv(text: &str) -> Result<Vec<Point2>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::parse(i + 1, format!("bad trajectory row {line:?}"));
        if f.len() < 3 {
            return Err(bad());
        }
        let t: usize = f[0].parse().map_err(|_| bad())?;
        if t != out.len() {
            return Err(Error::parse(
                i + 1,
                format!("expected t={}, got {t}", out.len()),
            ));
        }
        let x: f64 = f[1].parse().map_err(|_| bad())?;
        let y: f64 = f[2].parse().map_err(|_| bad())?;
        out.push(Point2::new(x, y));
    }
    Ok(out)
}
