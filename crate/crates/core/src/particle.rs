//! Particle filter over map cells.
//!
//! Each step shifts particles by the change in the predicted prior center
//! plus a bounded random jitter, weights them by the normalized similarity
//! score times a Gaussian prior around the predicted center, takes the
//! weighted mean as the estimate and resamples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::descriptor::ScoreField;
use crate::error::{Error, Result};
use crate::grid::{CellPos, Grid, Point2};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Particle {
    /// Real-valued cell coordinates.
    pub position: Point2,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterParams {
    pub n_particles: usize,
    /// Maximum jitter magnitude (cells).
    pub lambda: f64,
    /// Prior standard deviation (cells).
    pub sigma: f64,
    /// Shape of the prior covariance, scaled by `sigma²`.
    pub covariance: [[f64; 2]; 2],
    /// Radius (cells) of the region re-seeded when every particle scores zero.
    pub reinit_radius: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            n_particles: 500,
            lambda: 15.0,
            sigma: 15.0,
            covariance: [[1.0, 0.0], [0.0, 1.0]],
            reinit_radius: 30.0,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::InvalidParameter(
                "n_particles must be at least 1".into(),
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite())
            || !(self.sigma > 0.0 && self.sigma.is_finite())
        {
            return Err(Error::InvalidParameter(format!(
                "need lambda >= 0 and sigma > 0, got {} and {}",
                self.lambda, self.sigma
            )));
        }
        let [[a, b], [c, d]] = self.covariance;
        if b != c || !(a > 0.0) || !(a * d - b * c > 0.0) {
            return Err(Error::InvalidParameter(
                "covariance must be symmetric positive-definite".into(),
            ));
        }
        if !(self.reinit_radius >= 0.0) {
            return Err(Error::InvalidParameter(
                "reinit_radius must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// `ln g(p; center, σ²Σ)` for the bivariate Gaussian density `g`.
    pub fn log_prior_density(&self, p: Point2, center: Point2) -> f64 {
        let s2 = self.sigma * self.sigma;
        let [[a, b], [_, d]] = self.covariance;
        let det = a * d - b * b;
        let (dx, dy) = (p.x - center.x, p.y - center.y);
        // inverse of [[a, b], [b, d]] is [[d, -b], [-b, a]] / det
        let maha = (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / (det * s2);
        -0.5 * maha - (2.0 * std::f64::consts::PI * s2 * det.sqrt()).ln()
    }
}

/// Where to seed particles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Region {
    WholeMap,
    /// Traversable cells whose centers lie within `radius` of `center`.
    Disc {
        center: Point2,
        radius: f64,
    },
    Cell(CellPos),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    pub particles: Vec<Particle>,
    width: usize,
    height: usize,
}

impl ParticleSet {
    pub fn new(particles: Vec<Particle>, width: usize, height: usize) -> Self {
        Self {
            particles,
            width,
            height,
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn bounds(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn weight_sum(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum()
    }
}

fn region_cells(traversable: &Grid<bool>, region: Region) -> Vec<CellPos> {
    let inside = |c: CellPos| match region {
        Region::WholeMap => true,
        Region::Disc { center, radius } => c.center().distance(center) <= radius,
        Region::Cell(cell) => c == cell,
    };
    traversable
        .cells()
        .filter(|&(c, &t)| t && inside(c))
        .map(|(c, _)| c)
        .collect()
}

/// Samples `n_particles` cells uniformly from the traversable part of
/// `region`, each with weight `1/n`.
pub fn init_particles<R: Rng + ?Sized>(
    params: &FilterParams,
    traversable: &Grid<bool>,
    region: Region,
    rng: &mut R,
) -> Result<ParticleSet> {
    params.validate()?;
    let cells = region_cells(traversable, region);
    if cells.is_empty() {
        return Err(Error::EmptyRegion("no traversable cell in the seed region"));
    }
    let w = 1.0 / params.n_particles as f64;
    let particles = (0..params.n_particles)
        .map(|_| Particle {
            position: cells[rng.gen_range(0..cells.len())].center(),
            weight: w,
        })
        .collect();
    Ok(ParticleSet::new(
        particles,
        traversable.width(),
        traversable.height(),
    ))
}

/// Shifts every particle by `prior_now - prior_prev` (zero unless both are
/// known) plus a jitter with uniform direction and magnitude uniform on
/// `[0, lambda]`, then clamps into the map.
pub fn propagate<R: Rng + ?Sized>(
    set: &mut ParticleSet,
    prior_now: Option<Point2>,
    prior_prev: Option<Point2>,
    params: &FilterParams,
    rng: &mut R,
) {
    let shift = match (prior_now, prior_prev) {
        (Some(a), Some(b)) => a - b,
        _ => Point2::default(),
    };
    let (w, h) = set.bounds();
    for p in &mut set.particles {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let magnitude = if params.lambda > 0.0 {
            rng.gen_range(0.0..=params.lambda)
        } else {
            0.0
        };
        let jitter = Point2::new(magnitude * angle.cos(), magnitude * angle.sin());
        p.position = (p.position + shift + jitter).clamp_to(w, h);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightOutcome {
    Weighted,
    /// The field sums to zero; every particle got `1/n`.
    DegenerateField,
    /// No particle sits on a scoring cell; weights are left unnormalized at 0.
    AllZero,
}

/// Sets `w_i ∝ S(y_i)/ΣS · g(y_i; prior, σ²Σ)`, normalized to sum 1.
/// Without a prior only the likelihood term is used.
pub fn weight(
    set: &mut ParticleSet,
    field: &ScoreField,
    prior: Option<Point2>,
    params: &FilterParams,
) -> WeightOutcome {
    let n = set.len();
    let total = field.total();
    if !(total > 0.0) {
        for p in &mut set.particles {
            p.weight = 1.0 / n as f64;
        }
        return WeightOutcome::DegenerateField;
    }
    let log_total = total.ln();
    let logs: Vec<f64> = set
        .particles
        .par_iter()
        .map(|p| {
            let s = field.score_at(p.position);
            if s <= 0.0 {
                return f64::NEG_INFINITY;
            }
            let prior_term = prior.map_or(0.0, |c| params.log_prior_density(p.position, c));
            s.ln() - log_total + prior_term
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        for p in &mut set.particles {
            p.weight = 0.0;
        }
        return WeightOutcome::AllZero;
    }
    let unnorm: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = unnorm.iter().sum();
    for (p, u) in set.particles.iter_mut().zip(unnorm) {
        p.weight = u / sum;
    }
    WeightOutcome::Weighted
}

/// Systematic resampling; output weights are uniform.
pub fn resample<R: Rng + ?Sized>(set: &mut ParticleSet, rng: &mut R) {
    let n = set.len();
    if n == 0 {
        return;
    }
    let step = 1.0 / n as f64;
    let mut u = rng.gen_range(0.0..step);
    let mut out = Vec::with_capacity(n);
    let mut cumulative = 0.0;
    let mut i = 0;
    for (k, p) in set.particles.iter().enumerate() {
        cumulative += p.weight;
        if k == n - 1 {
            cumulative = f64::INFINITY;
        }
        while i < n && u < cumulative {
            out.push(Particle {
                position: p.position,
                weight: step,
            });
            u += step;
            i += 1;
        }
    }
    set.particles = out;
}

/// Weighted mean position.
pub fn estimate(set: &ParticleSet) -> Point2 {
    set.particles
        .iter()
        .fold(Point2::default(), |acc, p| acc + p.position * p.weight)
}

/// Filter state for one run: particles, the previous prior center and an
/// owned deterministic rng.
#[derive(Clone, Debug)]
pub struct ParticleFilter {
    params: FilterParams,
    traversable: Grid<bool>,
    set: ParticleSet,
    prev_prior: Option<Point2>,
    rng: ChaCha8Rng,
}

impl ParticleFilter {
    /// Seeds particles uniformly over the whole map.
    pub fn new(params: FilterParams, traversable: Grid<bool>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = init_particles(&params, &traversable, Region::WholeMap, &mut rng)?;
        Ok(Self {
            params,
            traversable,
            set,
            prev_prior: None,
            rng,
        })
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.set
    }

    /// Runs one propagate / weight / estimate / resample cycle and returns
    /// the estimate.
    pub fn step(&mut self, field: &ScoreField, prior: Option<Point2>) -> Result<Point2> {
        propagate(
            &mut self.set,
            prior,
            self.prev_prior,
            &self.params,
            &mut self.rng,
        );
        self.prev_prior = prior;
        if weight(&mut self.set, field, prior, &self.params) == WeightOutcome::AllZero {
            let region = match prior {
                Some(center) => Region::Disc {
                    center,
                    radius: self.params.reinit_radius,
                },
                None => Region::WholeMap,
            };
            self.set = init_particles(&self.params, &self.traversable, region, &mut self.rng)
                .or_else(|_| {
                    init_particles(
                        &self.params,
                        &self.traversable,
                        Region::WholeMap,
                        &mut self.rng,
                    )
                })?;
            if weight(&mut self.set, field, prior, &self.params) == WeightOutcome::AllZero {
                let w = 1.0 / self.set.len() as f64;
                for p in &mut self.set.particles {
                    p.weight = w;
                }
            }
        }
        let xbar = estimate(&self.set);
        resample(&mut self.set, &mut self.rng);
        Ok(xbar)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::CellIndex;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn field(traversable: &Grid<bool>, score: impl Fn(CellPos) -> f64) -> ScoreField {
        let cells: Vec<CellPos> = traversable
            .cells()
            .filter(|(_, &t)| t)
            .map(|(c, _)| c)
            .collect();
        let scores = cells.iter().map(|&c| score(c)).collect();
        let n = cells.len();
        ScoreField::new(Arc::new(CellIndex::new(cells)), scores, vec![0; n], 6.0).unwrap()
    }

    fn set_at(points: &[(f64, f64)], weights: &[f64]) -> ParticleSet {
        let particles = points
            .iter()
            .zip(weights)
            .map(|(&(x, y), &weight)| Particle {
                position: Point2::new(x, y),
                weight,
            })
            .collect();
        ParticleSet::new(particles, 100, 100)
    }

    #[test]
    fn params_validation() {
        assert!(FilterParams::default().validate().is_ok());
        let bad = FilterParams {
            covariance: [[1.0, 0.5], [0.0, 1.0]],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(FilterParams {
            sigma: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn log_density_matches_closed_form() {
        let p = FilterParams::default();
        let v = p.log_prior_density(Point2::new(3.0, 4.0), Point2::new(0.0, 0.0));
        let expected = (-(25.0f64) / (2.0 * 225.0)).exp() / (2.0 * std::f64::consts::PI * 225.0);
        assert!((v.exp() - expected).abs() < 1e-15);
    }

    #[test]
    fn single_cell_region() {
        let trav = Grid::filled(10, 10, true);
        let p = FilterParams {
            n_particles: 20,
            ..Default::default()
        };
        let set = init_particles(&p, &trav, Region::Cell(CellPos::new(4, 7)), &mut rng(0)).unwrap();
        assert!(set
            .particles
            .iter()
            .all(|q| q.position == Point2::new(4.0, 7.0) && q.weight == 1.0 / 20.0));
        let blocked = Grid::filled(10, 10, false);
        assert!(matches!(
            init_particles(&p, &blocked, Region::WholeMap, &mut rng(0)),
            Err(Error::EmptyRegion(_))
        ));
    }

    #[test]
    fn whole_map_init_is_uniform_over_traversable_cells() {
        // 5x5 map, 20 traversable cells
        let trav = Grid::from_fn(5, 5, |c| !(c.x == 2 && c.y != 2));
        let p = FilterParams {
            n_particles: 10_000,
            ..Default::default()
        };
        let set = init_particles(&p, &trav, Region::WholeMap, &mut rng(11)).unwrap();
        let mut counts = Grid::filled(5, 5, 0usize);
        for q in &set.particles {
            counts[q.position.cell(5, 5).unwrap()] += 1;
        }
        let k = trav.iter().filter(|&&t| t).count();
        let expected = 10_000.0 / k as f64;
        let mut chi2 = 0.0;
        for (c, &t) in trav.cells() {
            if t {
                chi2 += (counts[c] as f64 - expected).powi(2) / expected;
            } else {
                assert_eq!(counts[c], 0);
            }
        }
        // 19 degrees of freedom, 99.9th percentile is about 43.8
        assert!(chi2 < 43.8, "chi2 = {chi2}");
    }

    #[test]
    fn zero_jitter_propagation() {
        let p = FilterParams {
            lambda: 0.0,
            ..Default::default()
        };
        let mut set = set_at(&[(10.0, 10.0), (20.5, 30.25)], &[0.5, 0.5]);
        let before = set.clone();
        let prior = Some(Point2::new(50.0, 50.0));
        propagate(&mut set, prior, prior, &p, &mut rng(0));
        assert_eq!(set, before);
        propagate(
            &mut set,
            Some(Point2::new(53.0, 54.0)),
            prior,
            &p,
            &mut rng(0),
        );
        assert_eq!(set.particles[0].position, Point2::new(13.0, 14.0));
        assert_eq!(set.particles[1].position, Point2::new(23.5, 34.25));
        // cold start: no shift
        propagate(&mut set, prior, None, &p, &mut rng(0));
        assert_eq!(set.particles[0].position, Point2::new(13.0, 14.0));
    }

    #[test]
    fn jitter_is_bounded_by_lambda() {
        let p = FilterParams::default();
        let start: Vec<(f64, f64)> = (0..10_000)
            .map(|i| (500.0 + (i % 7) as f64, 500.0))
            .collect();
        let mut set = set_at(&start, &vec![1e-4; 10_000]);
        set = ParticleSet::new(set.particles, 2000, 2000);
        let shift = Point2::new(3.0, -2.0);
        propagate(
            &mut set,
            Some(Point2::new(3.0, -2.0)),
            Some(Point2::default()),
            &p,
            &mut rng(5),
        );
        let mut max_jitter: f64 = 0.0;
        for (q, &(x, y)) in set.particles.iter().zip(&start) {
            let j = q.position.distance(Point2::new(x, y) + shift);
            assert!(j <= 15.0 + 1e-9);
            max_jitter = max_jitter.max(j);
        }
        assert!(max_jitter > 14.0);
    }

    #[test]
    fn propagation_clamps_into_map() {
        let p = FilterParams {
            lambda: 0.0,
            ..Default::default()
        };
        let mut set = set_at(&[(1.0, 98.0)], &[1.0]);
        propagate(
            &mut set,
            Some(Point2::new(-10.0, 10.0)),
            Some(Point2::default()),
            &p,
            &mut rng(0),
        );
        assert_eq!(set.particles[0].position, Point2::new(0.0, 99.0));
    }

    #[test]
    fn weights_follow_scores_and_prior() {
        let trav = Grid::from_fn(100, 100, |c| c.x != 50);
        let f = field(&trav, |c| if c.x == 10 { 2.0 } else { 1.0 });
        let p = FilterParams::default();
        // equal prior distance, scores 2c and c
        let mut set = set_at(&[(10.0, 20.0), (30.0, 20.0)], &[0.5, 0.5]);
        let prior = Some(Point2::new(20.0, 20.0));
        assert_eq!(weight(&mut set, &f, prior, &p), WeightOutcome::Weighted);
        assert!((set.particles[0].weight - 2.0 / 3.0).abs() < 1e-12);
        assert!((set.particles[1].weight - 1.0 / 3.0).abs() < 1e-12);
        // uniform field, equidistant particles
        let mut set = set_at(&[(20.0, 10.0), (30.0, 20.0), (20.0, 30.0)], &[0.0; 3]);
        let uniform = field(&trav, |_| 4.0);
        weight(&mut set, &uniform, prior, &p);
        for q in &set.particles {
            assert!((q.weight - 1.0 / 3.0).abs() < 1e-12);
        }
        // non-traversable cell scores zero
        let mut set = set_at(&[(50.0, 5.0), (20.0, 20.0)], &[0.5, 0.5]);
        weight(&mut set, &uniform, prior, &p);
        assert_eq!(set.particles[0].weight, 0.0);
        assert_eq!(set.particles[1].weight, 1.0);
    }

    #[test]
    fn prior_favours_nearby_particles() {
        let trav = Grid::filled(100, 100, true);
        let f = field(&trav, |_| 1.0);
        let mut set = set_at(&[(20.0, 20.0), (20.0, 40.0)], &[0.5, 0.5]);
        weight(
            &mut set,
            &f,
            Some(Point2::new(20.0, 20.0)),
            &FilterParams::default(),
        );
        let ratio = set.particles[0].weight / set.particles[1].weight;
        assert!((ratio - (400.0f64 / 450.0).exp()).abs() < 1e-9);
        // cold start ignores distance
        weight(&mut set, &f, None, &FilterParams::default());
        assert_eq!(set.particles[0].weight, set.particles[1].weight);
    }

    #[test]
    fn degenerate_fields() {
        let trav = Grid::filled(10, 10, true);
        let zero = field(&trav, |_| 0.0);
        let mut set = set_at(&[(1.0, 1.0), (2.0, 2.0)], &[0.9, 0.1]);
        assert_eq!(
            weight(&mut set, &zero, None, &FilterParams::default()),
            WeightOutcome::DegenerateField
        );
        assert_eq!(set.particles[0].weight, 0.5);
        let sparse = field(&trav, |c| if c == CellPos::new(9, 9) { 1.0 } else { 0.0 });
        assert_eq!(
            weight(&mut set, &sparse, None, &FilterParams::default()),
            WeightOutcome::AllZero
        );
    }

    #[test]
    fn filter_reinitializes_around_prior_when_all_particles_miss() {
        let trav = Grid::filled(200, 200, true);
        let f = field(&trav, |c| if c.x >= 150 && c.y >= 150 { 1.0 } else { 0.0 });
        let params = FilterParams {
            n_particles: 50,
            lambda: 0.0,
            ..Default::default()
        };
        let mut pf = ParticleFilter::new(params, trav, 3).unwrap();
        pf.set
            .particles
            .iter_mut()
            .for_each(|p| p.position = Point2::new(10.0, 10.0));
        let xbar = pf.step(&f, Some(Point2::new(170.0, 170.0))).unwrap();
        assert!(xbar.x >= 150.0 && xbar.y >= 150.0, "{xbar:?}");
    }

    #[test]
    fn systematic_resampling_traces() {
        let mut one = set_at(&[(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)], &[0.0, 1.0, 0.0]);
        resample(&mut one, &mut rng(0));
        assert!(one
            .particles
            .iter()
            .all(|p| p.position == Point2::new(2.0, 2.0)));
        for seed in 0..50 {
            // two live particles padded to n = 4
            let mut s = set_at(
                &[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (2.0, 0.0)],
                &[0.75, 0.25, 0.0, 0.0],
            );
            resample(&mut s, &mut rng(seed));
            let count = |x: f64| s.particles.iter().filter(|p| p.position.x == x).count();
            assert_eq!((count(0.0), count(1.0)), (3, 1));
            assert!(s.particles.iter().all(|p| p.weight == 0.25));
        }
        for seed in 0..50 {
            let pts: Vec<(f64, f64)> = (0..16).map(|i| (i as f64, 0.0)).collect();
            let mut s = set_at(&pts, &[1.0 / 16.0; 16]);
            resample(&mut s, &mut rng(seed));
            let mut counts = [0usize; 16];
            for p in &s.particles {
                counts[p.position.x as usize] += 1;
            }
            assert!(counts.iter().all(|&c| c == 1), "{counts:?}");
        }
    }

    #[test]
    fn estimate_is_weighted_mean() {
        assert_eq!(
            estimate(&set_at(&[(3.0, 4.0), (3.0, 4.0)], &[0.5, 0.5])),
            Point2::new(3.0, 4.0)
        );
        assert_eq!(
            estimate(&set_at(&[(0.0, 0.0), (10.0, 0.0)], &[0.5, 0.5])),
            Point2::new(5.0, 0.0)
        );
        assert_eq!(
            estimate(&set_at(&[(7.0, 1.0), (10.0, 0.0)], &[1.0, 0.0])),
            Point2::new(7.0, 1.0)
        );
    }

    #[test]
    fn filter_runs_are_deterministic() {
        let trav = Grid::from_fn(80, 80, |c| (c.x / 10 + c.y / 10) % 3 != 0);
        let f = field(&trav, |c| ((c.x * 7 + c.y * 3) % 11) as f64);
        let run = || {
            let mut pf = ParticleFilter::new(FilterParams::default(), trav.clone(), 42).unwrap();
            (0..5)
                .map(|t| {
                    pf.step(&f, (t > 1).then(|| Point2::new(40.0 + t as f64, 40.0)))
                        .unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    fn positions() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((0.0..99.0f64, 0.0..99.0f64), 1..60)
    }

    proptest! {
        #[test]
        fn weights_are_normalized_and_scale_invariant(
            pts in positions(), cx in 0.0..99.0f64, cy in 0.0..99.0f64, c in 0.01..100.0f64,
        ) {
            let trav = Grid::from_fn(100, 100, |q| (q.x * 31 + q.y * 17) % 5 != 0);
            let f = field(&trav, |q| ((q.x ^ q.y) % 13) as f64 + 1.0);
            let mut a = set_at(&pts, &vec![0.0; pts.len()]);
            let prior = Some(Point2::new(cx, cy));
            let p = FilterParams::default();
            if weight(&mut a, &f, prior, &p) == WeightOutcome::Weighted {
                prop_assert!((a.weight_sum() - 1.0).abs() < 1e-9);
                prop_assert!(a.particles.iter().all(|q| q.weight >= 0.0));
                let mut b = set_at(&pts, &vec![0.0; pts.len()]);
                weight(&mut b, &f.scaled(c), prior, &p);
                for (x, y) in a.particles.iter().zip(&b.particles) {
                    prop_assert!((x.weight - y.weight).abs() < 1e-9);
                }
                let e = estimate(&a);
                let (lo_x, hi_x) = pts.iter().fold((f64::MAX, f64::MIN), |(l, h), p| (l.min(p.0), h.max(p.0)));
                let (lo_y, hi_y) = pts.iter().fold((f64::MAX, f64::MIN), |(l, h), p| (l.min(p.1), h.max(p.1)));
                prop_assert!(e.x >= lo_x - 1e-9 && e.x <= hi_x + 1e-9 && e.y >= lo_y - 1e-9 && e.y <= hi_y + 1e-9);
            }
        }

        #[test]
        fn resampling_multiplicities_are_floor_or_ceil(
            raw in prop::collection::vec(0.0..1.0f64, 1..40), seed in any::<u64>(),
        ) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 0.0);
            let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let pts: Vec<(f64, f64)> = (0..w.len()).map(|i| (i as f64, 0.0)).collect();
            let mut s = set_at(&pts, &w);
            resample(&mut s, &mut rng(seed));
            prop_assert_eq!(s.len(), w.len());
            let mut counts = vec![0usize; w.len()];
            for p in &s.particles {
                counts[p.position.x as usize] += 1;
            }
            for (c, wi) in counts.iter().zip(&w) {
                let e = wi * w.len() as f64;
                prop_assert!((*c as f64) >= (e - 1e-9).floor() && (*c as f64) <= (e + 1e-9).ceil());
            }
        }
    }
}
