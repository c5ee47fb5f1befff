//! Event-driven exact simulation of standard binary BBM.
//!
//! The simulator stores only the branch-event skeleton (one [`Segment`] per
//! particle lifetime). Interior positions are filled on demand by
//! Brownian-bridge sampling and cached per segment, so path functionals can
//! be evaluated without any global time grid.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::bridge;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// How segment/boundary crossings are decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossingMode {
    /// Closed-form bridge crossing probability per segment (unbiased).
    SegmentExact,
    /// Sign checks on a `bridge_grid_dt` grid. Documented bias: excursions
    /// between grid points are missed.
    GridOnly,
}

/// Simulation configuration for one replica.
#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    pub horizon: f64,
    pub seed: u64,
    pub replica_index: u64,
    pub max_particles: usize,
    pub bridge_grid_dt: f64,
    pub crossing_mode: CrossingMode,
}

impl SimConfig {
    pub fn new(horizon: f64, seed: u64, replica_index: u64) -> Self {
        Self {
            horizon,
            seed,
            replica_index,
            // e^t at t = 14 is about 1.2e6; 2^22 keeps desk-scale runs in memory.
            max_particles: 1 << 22,
            bridge_grid_dt: 1e-3,
            crossing_mode: CrossingMode::SegmentExact,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon >= 0.0) {
            return Err(Error::Range(format!("horizon must be >= 0, got {}", self.horizon)));
        }
        if self.max_particles < 1 {
            return Err(Error::Range("max_particles must be >= 1".into()));
        }
        if !(self.bridge_grid_dt > 0.0) {
            return Err(Error::Range("bridge_grid_dt must be > 0".into()));
        }
        Ok(())
    }
}

/// One particle lifetime: a Brownian stretch between birth and branch (or
/// the horizon).
#[derive(Debug)]
pub struct Segment {
    pub particle_id: u32,
    pub parent_id: Option<u32>,
    pub t_birth: f64,
    pub x_birth: f64,
    pub t_end: f64,
    pub x_end: f64,
    pub is_leaf_at_horizon: bool,
    pub children: Option<(u32, u32)>,
    /// Spine segments before the first-passage stopping time are conditioned
    /// to stay above the passage level; their interior law is not a plain
    /// bridge, so level-crossing machinery treats them specially.
    pub spine_constrained: bool,
    knots: RefCell<Vec<(f64, f64)>>,
    bridge_rng: RefCell<Option<Box<ChaCha8Rng>>>,
    /// Uniform behind the bridge-minimum inverse transform; NaN until
    /// drawn (eagerly by the simulator, lazily otherwise).
    min_u: std::cell::Cell<f64>,
    min_cache: RefCell<Option<(f64, f64)>>,
}

impl Segment {
    fn new(
        particle_id: u32,
        parent_id: Option<u32>,
        t_birth: f64,
        x_birth: f64,
        t_end: f64,
        x_end: f64,
        is_leaf_at_horizon: bool,
    ) -> Self {
        Self {
            particle_id,
            parent_id,
            t_birth,
            x_birth,
            t_end,
            x_end,
            is_leaf_at_horizon,
            children: None,
            spine_constrained: false,
            knots: RefCell::new(Vec::new()),
            bridge_rng: RefCell::new(None),
            min_u: std::cell::Cell::new(f64::NAN),
            min_cache: RefCell::new(None),
        }
    }

    pub fn lifetime(&self) -> f64 {
        self.t_end - self.t_birth
    }
}

/// Outcome of a segment/boundary crossing query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossingResult {
    pub crossed: bool,
    pub t_hit: Option<f64>,
}

/// Branch-event skeleton of one BBM realization.
#[derive(Debug)]
pub struct ParticleTree {
    pub segments: Vec<Segment>,
    pub horizon: f64,
    pub seed: u64,
    pub replica_index: u64,
    pub bridge_grid_dt: f64,
    pub crossing_mode: CrossingMode,
    pub rng_state_digest: u64,
}

/// Simulate one standard BBM replica up to `cfg.horizon`.
///
/// Lifetimes are i.i.d. Exp(1); displacements at branch events are Gaussian
/// with variance equal to the elapsed lifetime. Deterministic given
/// `(seed, replica_index)`.
pub fn simulate(cfg: &SimConfig) -> Result<ParticleTree> {
    cfg.validate()?;
    let mut segments = Vec::new();
    grow_standard_subtree(
        &mut segments,
        None,
        0.0,
        0.0,
        cfg.horizon,
        cfg.seed,
        cfg.replica_index,
        cfg.max_particles,
    )?;
    Ok(finish_tree(segments, cfg))
}

pub(crate) fn finish_tree(segments: Vec<Segment>, cfg: &SimConfig) -> ParticleTree {
    let digest = digest_segments(cfg.seed, cfg.replica_index, &segments);
    ParticleTree {
        segments,
        horizon: cfg.horizon,
        seed: cfg.seed,
        replica_index: cfg.replica_index,
        bridge_grid_dt: cfg.bridge_grid_dt,
        crossing_mode: cfg.crossing_mode,
        rng_state_digest: digest,
    }
}

fn digest_segments(seed: u64, replica: u64, segments: &[Segment]) -> u64 {
    // FNV-1a over the skeleton endpoints; a cheap reproducibility token.
    let mut h: u64 = 0xcbf29ce484222325 ^ seed.wrapping_mul(0x100000001b3) ^ replica;
    for s in segments {
        for v in [s.t_birth, s.x_birth, s.t_end, s.x_end] {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Grow a standard BBM subtree rooted at `(t0, x0)` into `segments`,
/// returning the root particle id. Shared between `simulate` and the spine
/// sampler (side subtrees and the post-stop spine are plain BBMs).
pub(crate) fn grow_standard_subtree(
    segments: &mut Vec<Segment>,
    parent: Option<u32>,
    t0: f64,
    x0: f64,
    horizon: f64,
    seed: u64,
    replica: u64,
    max_particles: usize,
) -> Result<u32> {
    let root_id = segments.len() as u32;
    let mut queue: std::collections::VecDeque<(Option<u32>, f64, f64)> =
        std::collections::VecDeque::new();
    queue.push_back((parent, t0, x0));
    while let Some((par, tb, xb)) = queue.pop_front() {
        if segments.len() >= 2 * max_particles {
            return Err(Error::PopulationCapExceeded(max_particles));
        }
        let id = segments.len() as u32;
        // One eager stream per segment covers both the lifetime and the
        // endpoint displacement; lazily evaluated quantities (bridge
        // interior, minimum, crossing) get their own purposes.
        let mut seg_rng = stream(seed, replica, id as u64, Purpose::Lifetime);
        let lifetime: f64 = Exp1.sample(&mut seg_rng);
        let (t_end, leaf) = if tb + lifetime >= horizon {
            (horizon, true)
        } else {
            (tb + lifetime, false)
        };
        let dt = t_end - tb;
        let dx = if dt > 0.0 {
            let g: f64 = StandardNormal.sample(&mut seg_rng);
            dt.sqrt() * g
        } else {
            0.0
        };
        let x_end = xb + dx;
        let seg = Segment::new(id, par, tb, xb, t_end, x_end, leaf);
        seg.min_u.set(seg_rng.gen_range(f64::MIN_POSITIVE..1.0));
        segments.push(seg);
        if let Some(p) = par {
            let parent_seg = &mut segments[p as usize];
            parent_seg.children = match parent_seg.children {
                None => Some((id, id)),
                Some((a, b)) if a == b => Some((a, id)),
                other => other,
            };
        }
        if !leaf {
            queue.push_back((Some(id), t_end, x_end));
            queue.push_back((Some(id), t_end, x_end));
        }
    }
    Ok(root_id)
}

impl ParticleTree {
    pub fn segment(&self, particle_id: u32) -> Result<&Segment> {
        self.segments
            .get(particle_id as usize)
            .ok_or(Error::UnknownParticle(particle_id))
    }

    /// Particle ids alive at time `r` (leaves when `r` equals the horizon).
    pub fn alive_at(&self, r: f64) -> Vec<u32> {
        if r >= self.horizon {
            self.segments
                .iter()
                .filter(|s| s.is_leaf_at_horizon)
                .map(|s| s.particle_id)
                .collect()
        } else {
            self.segments
                .iter()
                .filter(|s| s.t_birth <= r && r < s.t_end)
                .map(|s| s.particle_id)
                .collect()
        }
    }

    /// Number of particles alive at the horizon.
    pub fn population(&self) -> usize {
        self.segments.iter().filter(|s| s.is_leaf_at_horizon).count()
    }

    fn segment_rng<'a>(&self, seg: &'a Segment) -> std::cell::RefMut<'a, Option<Box<ChaCha8Rng>>> {
        let mut slot = seg.bridge_rng.borrow_mut();
        if slot.is_none() {
            *slot = Some(Box::new(stream(
                self.seed,
                self.replica_index,
                seg.particle_id as u64,
                Purpose::Bridge,
            )));
        }
        slot
    }

    /// Position of a particle at an interior time of its segment, sampled
    /// as a Brownian bridge conditioned on the endpoints and every
    /// previously sampled interior point. Cached: repeated queries agree.
    pub fn position_at(&self, particle_id: u32, t: f64) -> Result<f64> {
        let seg = self.segment(particle_id)?;
        if t < seg.t_birth || t > seg.t_end {
            return Err(Error::TimeOutsideSegment {
                t,
                lo: seg.t_birth,
                hi: seg.t_end,
            });
        }
        if t == seg.t_birth {
            return Ok(seg.x_birth);
        }
        if t == seg.t_end {
            return Ok(seg.x_end);
        }
        {
            let knots = seg.knots.borrow();
            if let Ok(i) = knots.binary_search_by(|(kt, _)| kt.partial_cmp(&t).unwrap()) {
                return Ok(knots[i].1);
            }
        }
        let (t0, x0, t1, x1) = {
            let knots = seg.knots.borrow();
            let idx = knots.partition_point(|(kt, _)| *kt < t);
            let (t0, x0) = if idx == 0 {
                (seg.t_birth, seg.x_birth)
            } else {
                knots[idx - 1]
            };
            let (t1, x1) = if idx == knots.len() {
                (seg.t_end, seg.x_end)
            } else {
                knots[idx]
            };
            (t0, x0, t1, x1)
        };
        let x = {
            let mut rng = self.segment_rng(seg);
            bridge::sample_point(t0, x0, t1, x1, t, 1.0, rng.as_mut().unwrap())
        };
        let mut knots = seg.knots.borrow_mut();
        let idx = knots.partition_point(|(kt, _)| *kt < t);
        knots.insert(idx, (t, x));
        Ok(x)
    }

    /// V value of a segment endpoint: `V(r) = (theta^2/2 + 1) r - theta X(r)`.
    pub fn v_value(theta: f64, r: f64, x: f64) -> f64 {
        (theta * theta / 2.0 + 1.0) * r - theta * x
    }

    /// Sampled minimum of the V process over one segment (exact
    /// bridge-minimum law; cached per `theta`). For spine-constrained
    /// segments the knot endpoints bound the minimum from below and the
    /// smaller endpoint is returned.
    pub fn segment_v_min(&self, particle_id: u32, theta: f64) -> Result<f64> {
        let seg = self.segment(particle_id)?;
        if let Some((th, vmin)) = *seg.min_cache.borrow() {
            if th == theta {
                return Ok(vmin);
            }
        }
        let v0 = Self::v_value(theta, seg.t_birth, seg.x_birth);
        let v1 = Self::v_value(theta, seg.t_end, seg.x_end);
        let vmin = if seg.spine_constrained || seg.lifetime() <= 0.0 {
            v0.min(v1)
        } else {
            let mut u = seg.min_u.get();
            if u.is_nan() {
                let mut rng = stream(
                    self.seed,
                    self.replica_index,
                    seg.particle_id as u64,
                    Purpose::SegmentMin,
                );
                u = rng.gen_range(f64::MIN_POSITIVE..1.0);
                seg.min_u.set(u);
            }
            bridge::min_from_uniform(v0, v1, seg.lifetime(), theta * theta, u)
        };
        *seg.min_cache.borrow_mut() = Some((theta, vmin));
        Ok(vmin)
    }

    /// Decide whether a segment's path crosses the affine boundary
    /// `x = b0 + b1 t`, and refine the hit time to `bridge_grid_dt`.
    pub fn segment_crosses_line(
        &self,
        particle_id: u32,
        b0: f64,
        b1: f64,
        mode: CrossingMode,
    ) -> Result<CrossingResult> {
        let seg = self.segment(particle_id)?;
        let f = |t: f64, x: f64| x - (b0 + b1 * t);
        let d0 = f(seg.t_birth, seg.x_birth);
        let d1 = f(seg.t_end, seg.x_end);
        match mode {
            CrossingMode::SegmentExact => {
                if d0 == 0.0 {
                    return Ok(CrossingResult {
                        crossed: true,
                        t_hit: Some(seg.t_birth),
                    });
                }
                let crossed = if d0 * d1 <= 0.0 {
                    true
                } else {
                    let p = bridge::crossing_probability(d0.abs(), d1.abs(), seg.lifetime(), 1.0);
                    let mut rng = stream(
                        self.seed,
                        self.replica_index,
                        seg.particle_id as u64,
                        Purpose::Crossing,
                    );
                    rng.gen::<f64>() < p
                };
                if !crossed {
                    return Ok(CrossingResult {
                        crossed: false,
                        t_hit: None,
                    });
                }
                let t_hit = self.refine_first_hit(particle_id, b0, b1)?;
                Ok(CrossingResult {
                    crossed: true,
                    t_hit: Some(t_hit),
                })
            }
            CrossingMode::GridOnly => {
                let mut t = seg.t_birth;
                let mut prev = d0;
                while t < seg.t_end {
                    t = (t + self.bridge_grid_dt).min(seg.t_end);
                    let x = self.position_at(particle_id, t)?;
                    let cur = f(t, x);
                    if prev * cur <= 0.0 {
                        return Ok(CrossingResult {
                            crossed: true,
                            t_hit: Some(t),
                        });
                    }
                    prev = cur;
                }
                Ok(CrossingResult {
                    crossed: false,
                    t_hit: None,
                })
            }
        }
    }

    /// Bisection refinement of the first boundary hit inside a segment
    /// already known to cross. Samples bridge midpoints (cached as knots)
    /// and walks into the half containing the first crossing.
    pub(crate) fn refine_first_hit(&self, particle_id: u32, b0: f64, b1: f64) -> Result<f64> {
        let seg = self.segment(particle_id)?;
        let f = |t: f64, x: f64| x - (b0 + b1 * t);
        let mut ta = seg.t_birth;
        let mut fa = f(seg.t_birth, seg.x_birth);
        let mut tb = seg.t_end;
        if fa == 0.0 {
            return Ok(ta);
        }
        let mut rng = stream(
            self.seed,
            self.replica_index,
            particle_id as u64,
            Purpose::Crossing,
        );
        // Burn the decision draw so refinement is independent of it.
        let _: f64 = rng.gen();
        while tb - ta > self.bridge_grid_dt {
            let tm = 0.5 * (ta + tb);
            let xm = self.position_at(particle_id, tm)?;
            let fm = f(tm, xm);
            let left_crossed = if fa * fm <= 0.0 {
                true
            } else {
                let p = bridge::crossing_probability(fa.abs(), fm.abs(), tm - ta, 1.0);
                rng.gen::<f64>() < p
            };
            if left_crossed {
                tb = tm;
            } else {
                ta = tm;
                fa = fm;
            }
        }
        Ok(0.5 * (ta + tb))
    }

    /// One CSV row per segment: particle_id, parent_id, t_birth, x_birth,
    /// t_end, x_end.
    pub fn dump_csv(&self) -> String {
        let mut out = String::from("particle_id,parent_id,t_birth,x_birth,t_end,x_end\n");
        for s in &self.segments {
            let parent = s
                .parent_id
                .map(|p| p.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.particle_id, parent, s.t_birth, s.x_birth, s.t_end, s.x_end
            ));
        }
        out
    }

    /// Append a standard subtree (used by the spine sampler).
    pub(crate) fn push_raw_segment(
        segments: &mut Vec<Segment>,
        parent: Option<u32>,
        t_birth: f64,
        x_birth: f64,
        t_end: f64,
        x_end: f64,
        leaf: bool,
        constrained: bool,
    ) -> u32 {
        let id = segments.len() as u32;
        let mut seg = Segment::new(id, parent, t_birth, x_birth, t_end, x_end, leaf);
        seg.spine_constrained = constrained;
        segments.push(seg);
        if let Some(p) = parent {
            let parent_seg = &mut segments[p as usize];
            parent_seg.children = match parent_seg.children {
                None => Some((id, id)),
                Some((a, b)) if a == b => Some((a, id)),
                other => other,
            };
        }
        id
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizon_zero_gives_single_zero_length_root() {
        let tree = simulate(&SimConfig::new(0.0, 1, 0)).unwrap();
        assert_eq!(tree.segments.len(), 1);
        assert_eq!(tree.population(), 1);
        let root = &tree.segments[0];
        assert_eq!(root.t_birth, 0.0);
        assert_eq!(root.t_end, 0.0);
        assert_eq!(root.x_end, 0.0);
    }

    #[test]
    fn determinism_same_seed_same_tree() {
        let a = simulate(&SimConfig::new(4.0, 99, 5)).unwrap();
        let b = simulate(&SimConfig::new(4.0, 99, 5)).unwrap();
        assert_eq!(a.segments.len(), b.segments.len());
        assert_eq!(a.rng_state_digest, b.rng_state_digest);
        for (sa, sb) in a.segments.iter().zip(&b.segments) {
            assert_eq!(sa.t_end.to_bits(), sb.t_end.to_bits());
            assert_eq!(sa.x_end.to_bits(), sb.x_end.to_bits());
        }
        let c = simulate(&SimConfig::new(4.0, 99, 6)).unwrap();
        assert_ne!(a.rng_state_digest, c.rng_state_digest);
    }

    #[test]
    fn genealogy_invariants() {
        let tree = simulate(&SimConfig::new(5.0, 7, 0)).unwrap();
        let mut roots = 0;
        for s in &tree.segments {
            assert!(s.t_birth < s.t_end || (s.t_birth == s.t_end && s.t_end == tree.horizon));
            assert!(s.t_end <= tree.horizon);
            match s.parent_id {
                None => roots += 1,
                Some(p) => {
                    let par = tree.segment(p).unwrap();
                    assert_eq!(par.t_end, s.t_birth);
                    assert_eq!(par.x_end, s.x_birth);
                }
            }
            match s.children {
                None => assert!(s.is_leaf_at_horizon),
                Some((a, b)) => assert!(a != b),
            }
        }
        assert_eq!(roots, 1);
        // Alive set is nonempty at every time.
        for i in 0..=10 {
            let r = tree.horizon * i as f64 / 10.0;
            assert!(!tree.alive_at(r).is_empty());
        }
    }

    #[test]
    fn mean_population_is_exp_t() {
        let t = 3.0;
        let n = 4000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for r in 0..n {
            let tree = simulate(&SimConfig::new(t, 11, r)).unwrap();
            let pop = tree.population() as f64;
            sum += pop;
            sumsq += pop * pop;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let stderr = (var / n as f64).sqrt();
        let expect = t.exp();
        assert!(
            (mean - expect).abs() < 3.0 * stderr,
            "mean {mean} vs {expect} (stderr {stderr})"
        );
    }

    #[test]
    fn bridge_endpoint_and_cache_contract() {
        let tree = simulate(&SimConfig::new(2.0, 3, 0)).unwrap();
        let seg = &tree.segments[0];
        assert_eq!(tree.position_at(0, seg.t_birth).unwrap(), seg.x_birth);
        assert_eq!(tree.position_at(0, seg.t_end).unwrap(), seg.x_end);
        let tm = 0.5 * (seg.t_birth + seg.t_end);
        let a = tree.position_at(0, tm).unwrap();
        let b = tree.position_at(0, tm).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(tree.position_at(0, seg.t_end + 1.0).is_err());
        assert!(tree.position_at(10_000, 0.1).is_err());
    }

    #[test]
    fn bridge_midpoint_moments() {
        // Midpoint of a unit segment with both endpoints pinned at 0 has
        // mean 0 and variance 1/4.
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let n = 50_000;
        for r in 0..n {
            let cfg = SimConfig::new(0.0, 17, r);
            let mut segments = Vec::new();
            ParticleTree::push_raw_segment(&mut segments, None, 0.0, 0.0, 1.0, 0.0, true, false);
            let mut cfg2 = cfg;
            cfg2.horizon = 1.0;
            let tree = finish_tree(segments, &cfg2);
            let v = tree.position_at(0, 0.5).unwrap();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 0.25).abs() < 0.01, "var {var}");
    }

    #[test]
    fn population_cap_is_enforced() {
        let mut cfg = SimConfig::new(12.0, 1, 0);
        cfg.max_particles = 64;
        match simulate(&cfg) {
            Err(Error::PopulationCapExceeded(64)) => {}
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn crossing_far_boundary_is_rare_and_low_endpoint_certain() {
        let mut cfg = SimConfig::new(1.0, 23, 0);
        cfg.horizon = 1.0;
        let mut crossed = 0;
        let n = 20_000;
        for r in 0..n {
            cfg.replica_index = r;
            let mut segments = Vec::new();
            ParticleTree::push_raw_segment(&mut segments, None, 0.0, 3.0, 1.0, 3.0, true, false);
            let tree = finish_tree(segments, &cfg);
            // Boundary at x = 0: clearances 3 and 3, p = e^{-18}.
            let res = tree.segment_crosses_line(0, 0.0, 0.0, CrossingMode::SegmentExact).unwrap();
            if res.crossed {
                crossed += 1;
            }
        }
        assert_eq!(crossed, 0, "e^-18 crossing fired {crossed} times in {n}");

        // Endpoint below the boundary: always crossed.
        let mut segments = Vec::new();
        ParticleTree::push_raw_segment(&mut segments, None, 0.0, 1.0, 1.0, -1.0, true, false);
        let tree = finish_tree(segments, &cfg);
        let res = tree.segment_crosses_line(0, 0.0, 0.0, CrossingMode::SegmentExact).unwrap();
        assert!(res.crossed);
        let t_hit = res.t_hit.unwrap();
        assert!(t_hit > 0.0 && t_hit < 1.0);
    }

    #[test]
    fn tangent_boundary_crossing_frequency() {
        // d0 = d1 = 0.5 over dt = 1: probability e^{-0.5}.
        let n = 40_000;
        let mut crossed = 0;
        for r in 0..n {
            let cfg = SimConfig::new(1.0, 31, r);
            let mut segments = Vec::new();
            ParticleTree::push_raw_segment(&mut segments, None, 0.0, 0.5, 1.0, 0.5, true, false);
            let tree = finish_tree(segments, &cfg);
            if tree
                .segment_crosses_line(0, 0.0, 0.0, CrossingMode::SegmentExact)
                .unwrap()
                .crossed
            {
                crossed += 1;
            }
        }
        let freq = crossed as f64 / n as f64;
        let expect = (-0.5f64).exp();
        let sigma = (expect * (1.0 - expect) / n as f64).sqrt();
        assert!((freq - expect).abs() < 4.0 * sigma, "{freq} vs {expect}");
    }
}
