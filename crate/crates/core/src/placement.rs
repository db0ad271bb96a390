//! Initial object placement for each rung of the spatial task ladder, plus the
//! object-region pairing split used by the compositional hold-out.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::{ObjectKind, ObjectSpec, WorkspaceConfig};
use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// Minimum edge-to-edge gap between two placed objects (m).
pub const COLLISION_MARGIN: f64 = 0.005;
pub const JITTER_ATTEMPTS: usize = 1000;
pub const FULL_RANDOM_ATTEMPTS: usize = 10_000;
pub const MATCHING_ATTEMPTS: usize = 1000;
pub const REGION_COUNT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    SmallJitter,
    MediumJitter,
    LargeJitter,
    FullRandom,
}

impl Regime {
    /// Ladder order, least to most randomized.
    pub const LADDER: [Regime; 4] =
        [Regime::SmallJitter, Regime::MediumJitter, Regime::LargeJitter, Regime::FullRandom];

    /// Full width and depth of each placement region, if the regime has regions.
    pub fn region_dims(self) -> Option<[f64; 2]> {
        match self {
            Regime::SmallJitter => Some([0.04, 0.06]),
            Regime::MediumJitter => Some([0.08, 0.12]),
            Regime::LargeJitter => Some([0.12, 0.16]),
            Regime::FullRandom => None,
        }
    }

    pub fn is_jitter(self) -> bool {
        self.region_dims().is_some()
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::SmallJitter => "small_jitter",
            Regime::MediumJitter => "medium_jitter",
            Regime::LargeJitter => "large_jitter",
            Regime::FullRandom => "full_random",
        }
    }

    pub fn ladder_rank(self) -> usize {
        Regime::LADDER.iter().position(|&r| r == self).unwrap_or(usize::MAX)
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        match norm.as_str() {
            "small_jitter" | "small" => Ok(Regime::SmallJitter),
            "medium_jitter" | "medium" => Ok(Regime::MediumJitter),
            "large_jitter" | "large" => Ok(Regime::LargeJitter),
            "full_random" | "full" => Ok(Regime::FullRandom),
            _ => Err(Error::InvalidConfig(format!("unknown regime '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub region_id: usize,
    pub center: [f64; 2],
    pub half_extents: [f64; 2],
}

impl Region {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (p[0] - self.center[0]).abs() <= self.half_extents[0] + 1e-12
            && (p[1] - self.center[1]).abs() <= self.half_extents[1] + 1e-12
    }
}

pub const REGION_CENTERS: [[f64; 2]; REGION_COUNT] =
    [[0.0, 0.0], [-0.10, 0.15], [0.10, 0.15], [-0.10, -0.15], [0.10, -0.15]];

/// The five canonical regions sized for `regime` (zero extents for full random).
pub fn canonical_layout(regime: Regime) -> Vec<Region> {
    let half = regime.region_dims().map(|d| [d[0] / 2.0, d[1] / 2.0]).unwrap_or([0.0, 0.0]);
    REGION_CENTERS
        .iter()
        .enumerate()
        .map(|(region_id, &center)| Region { region_id, center, half_extents: half })
        .collect()
}

pub fn canonical_region(kind: ObjectKind) -> usize {
    match kind {
        ObjectKind::RubiksCube => 0,
        ObjectKind::Apple => 1,
        ObjectKind::Orange => 2,
        ObjectKind::Mug => 3,
        ObjectKind::LargeMarker => 4,
    }
}

/// Default object-to-region map, indexed like `specs`.
pub fn default_assignment(specs: &[ObjectSpec]) -> Vec<usize> {
    specs.iter().map(|s| canonical_region(s.name)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementSample {
    /// Planar position per scene object, indexed like the scene's spec list.
    pub positions: Vec<[f64; 2]>,
    pub regime: Regime,
    pub region_assignment: Option<Vec<usize>>,
    pub seed: u64,
}

/// Geometry a sampler needs: bounds and the radii of the objects being placed.
#[derive(Debug, Clone, Copy)]
pub struct PlacementContext<'a> {
    pub workspace: &'a WorkspaceConfig,
    pub specs: &'a [ObjectSpec],
}

impl<'a> PlacementContext<'a> {
    pub fn new(workspace: &'a WorkspaceConfig, specs: &'a [ObjectSpec]) -> Self {
        Self { workspace, specs }
    }

    fn shrunk_bounds(&self, radius: f64) -> ([f64; 2], [f64; 2]) {
        let xh = self.workspace.x_half_extent - radius;
        let yh = self.workspace.y_half_extent - radius;
        ([-xh, -yh], [xh, yh])
    }

    fn gap_ok(&self, placed: &[(usize, [f64; 2])], idx: usize, p: [f64; 2]) -> bool {
        placed.iter().all(|&(j, q)| {
            planar_distance(p, q) >= self.specs[idx].radius + self.specs[j].radius + COLLISION_MARGIN
        })
    }
}

pub fn planar_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Smallest pairwise edge-to-edge gap minus the required margin is non-negative,
/// and every object lies inside the workspace shrunk by its own radius.
pub fn validate_sample(ctx: &PlacementContext<'_>, sample: &PlacementSample) -> Result<()> {
    let fail = |reason: String| Err(Error::PlacementFailure { seed: sample.seed, reason });
    if sample.positions.len() != ctx.specs.len() {
        return fail(format!("{} positions for {} objects", sample.positions.len(), ctx.specs.len()));
    }
    for (i, p) in sample.positions.iter().enumerate() {
        let (lo, hi) = ctx.shrunk_bounds(ctx.specs[i].radius);
        let eps = 1e-12;
        if p[0] < lo[0] - eps || p[0] > hi[0] + eps || p[1] < lo[1] - eps || p[1] > hi[1] + eps {
            return fail(format!("{} at ({:.4}, {:.4}) outside workspace", ctx.specs[i].name, p[0], p[1]));
        }
        for j in 0..i {
            let gap = planar_distance(*p, sample.positions[j]) - ctx.specs[i].radius - ctx.specs[j].radius;
            if gap < COLLISION_MARGIN - 1e-12 {
                return fail(format!("{} and {} gap {gap:.4}", ctx.specs[i].name, ctx.specs[j].name));
            }
        }
    }
    Ok(())
}

/// Uniform placement inside per-object regions, re-drawing colliding objects.
pub fn sample_jitter(
    ctx: &PlacementContext<'_>,
    regime: Regime,
    assignment: &[usize],
    seed: u64,
) -> Result<PlacementSample> {
    let dims = regime.region_dims().ok_or_else(|| {
        Error::InvalidConfig(format!("{regime} has no regions; use sample_full_random"))
    })?;
    if assignment.len() != ctx.specs.len() {
        return Err(Error::InvalidConfig("assignment length differs from object count".into()));
    }
    if let Some(&bad) = assignment.iter().find(|&&r| r >= REGION_COUNT) {
        return Err(Error::InvalidConfig(format!("region {bad} does not exist")));
    }
    let mut rng = rng::stream(seed, Domain::Placement);
    let half = [dims[0] / 2.0, dims[1] / 2.0];
    let mut placed: Vec<(usize, [f64; 2])> = Vec::with_capacity(ctx.specs.len());

    for (idx, &region) in assignment.iter().enumerate() {
        let center = REGION_CENTERS[region];
        let pos = if regime == Regime::SmallJitter && region == 0 {
            let p = [0.0, 0.0];
            if !ctx.gap_ok(&placed, idx, p) {
                return Err(Error::PlacementFailure { seed, reason: "center object collides".into() });
            }
            p
        } else {
            // Region box clipped to the workspace shrunk by this object's radius.
            let (lo_ws, hi_ws) = ctx.shrunk_bounds(ctx.specs[idx].radius);
            let lo = [(center[0] - half[0]).max(lo_ws[0]), (center[1] - half[1]).max(lo_ws[1])];
            let hi = [(center[0] + half[0]).min(hi_ws[0]), (center[1] + half[1]).min(hi_ws[1])];
            if lo[0] > hi[0] || lo[1] > hi[1] {
                return Err(Error::PlacementFailure {
                    seed,
                    reason: format!("region {region} lies outside the workspace for {}", ctx.specs[idx].name),
                });
            }
            let mut found = None;
            for _ in 0..JITTER_ATTEMPTS {
                let p = [rng.gen_range(lo[0]..=hi[0]), rng.gen_range(lo[1]..=hi[1])];
                if ctx.gap_ok(&placed, idx, p) {
                    found = Some(p);
                    break;
                }
            }
            found.ok_or_else(|| Error::PlacementFailure {
                seed,
                reason: format!("no collision-free spot for {} after {JITTER_ATTEMPTS} draws", ctx.specs[idx].name),
            })?
        };
        placed.push((idx, pos));
    }

    Ok(PlacementSample {
        positions: placed.into_iter().map(|(_, p)| p).collect(),
        regime,
        region_assignment: Some(assignment.to_vec()),
        seed,
    })
}

/// Whole-sample rejection over the full workspace.
pub fn sample_full_random(ctx: &PlacementContext<'_>, seed: u64) -> Result<PlacementSample> {
    let mut rng = rng::stream(seed, Domain::Placement);
    let mut positions = Vec::with_capacity(ctx.specs.len());
    for _ in 0..FULL_RANDOM_ATTEMPTS {
        positions.clear();
        for spec in ctx.specs {
            let (lo, hi) = ctx.shrunk_bounds(spec.radius);
            positions.push([rng.gen_range(lo[0]..=hi[0]), rng.gen_range(lo[1]..=hi[1])]);
        }
        if pairwise_gaps_ok(ctx.specs, &positions) {
            return Ok(PlacementSample {
                positions,
                regime: Regime::FullRandom,
                region_assignment: None,
                seed,
            });
        }
    }
    Err(Error::PlacementFailure {
        seed,
        reason: format!("no collision-free sample after {FULL_RANDOM_ATTEMPTS} draws"),
    })
}

pub fn pairwise_gaps_ok(specs: &[ObjectSpec], positions: &[[f64; 2]]) -> bool {
    (0..positions.len()).all(|i| {
        (0..i).all(|j| {
            planar_distance(positions[i], positions[j]) >= specs[i].radius + specs[j].radius + COLLISION_MARGIN
        })
    })
}

/// Dispatches to the jitter or full-random sampler with the canonical assignment.
pub fn sample_regime(ctx: &PlacementContext<'_>, regime: Regime, seed: u64) -> Result<PlacementSample> {
    if regime.is_jitter() {
        sample_jitter(ctx, regime, &default_assignment(ctx.specs), seed)
    } else {
        sample_full_random(ctx, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Eval => "eval",
        }
    }
}

/// Which regions each object may occupy during training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingSplit {
    pub train_regions: Vec<[usize; 3]>,
    pub eval_regions: Vec<[usize; 2]>,
    pub seed: u64,
    /// Probability that a training scene uses every object's primary pairing
    /// (`train_regions[i][0]`); otherwise a random admissible matching is drawn.
    #[serde(default = "default_primary_weight")]
    pub primary_weight: f64,
}

pub fn default_primary_weight() -> f64 {
    0.7
}

impl PairingSplit {
    /// Object `i` trains on regions `{i, i+1, i+2}` and is held out on `{i+3, i+4}` (mod 5).
    pub fn circulant() -> Self {
        Self::from_indexing(&[0, 1, 2, 3, 4], 0)
    }

    fn from_indexing(index: &[usize], seed: u64) -> Self {
        let train_regions = index.iter().map(|&k| [k % 5, (k + 1) % 5, (k + 2) % 5]).collect();
        let eval_regions = index.iter().map(|&k| [(k + 3) % 5, (k + 4) % 5]).collect();
        Self { train_regions, eval_regions, seed, primary_weight: default_primary_weight() }
    }

    pub fn object_count(&self) -> usize {
        self.train_regions.len()
    }

    pub fn primary_region(&self, object: usize) -> usize {
        self.train_regions[object][0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_regions.len() != self.eval_regions.len() {
            return Err(Error::InvalidConfig("train/eval region lists differ in length".into()));
        }
        if !(0.0..=1.0).contains(&self.primary_weight) {
            return Err(Error::InvalidConfig("primary_weight must lie in [0, 1]".into()));
        }
        let mut covered = [false; REGION_COUNT];
        for (train, eval) in self.train_regions.iter().zip(&self.eval_regions) {
            let mut all: Vec<usize> = train.iter().chain(eval.iter()).copied().collect();
            all.sort_unstable();
            if all != [0, 1, 2, 3, 4] {
                return Err(Error::InvalidConfig("each object's train and eval regions must partition 0..5".into()));
            }
            for &r in train {
                covered[r] = true;
            }
        }
        if self.train_regions.len() == REGION_COUNT && !covered.iter().all(|&c| c) {
            return Err(Error::InvalidConfig("training regions do not cover every region".into()));
        }
        Ok(())
    }
}

/// Circulant split whose object indexing is shuffled by `seed`.
pub fn make_pairing_split(seed: u64) -> PairingSplit {
    let mut index: Vec<usize> = (0..REGION_COUNT).collect();
    index.shuffle(&mut rng::stream(seed, Domain::Split));
    PairingSplit::from_indexing(&index, seed)
}

fn random_matching(
    allowed: &[Vec<usize>],
    rng: &mut rng::Rng,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = allowed.len();
    let mut order: Vec<usize> = (0..n).collect();
    'attempt: for _ in 0..MATCHING_ATTEMPTS {
        order.shuffle(rng);
        let mut taken = [false; REGION_COUNT];
        let mut assignment = vec![usize::MAX; n];
        for &obj in &order {
            let free: Vec<usize> = allowed[obj].iter().copied().filter(|&r| !taken[r]).collect();
            let Some(&region) = free.choose(rng) else { continue 'attempt };
            taken[region] = true;
            assignment[obj] = region;
        }
        return Ok(assignment);
    }
    Err(Error::PlacementFailure {
        seed,
        reason: format!("no object-region matching after {MATCHING_ATTEMPTS} attempts"),
    })
}

/// Object-to-region permutation for one compositional episode.
pub fn compositional_assignment(
    split: &PairingSplit,
    phase: Phase,
    instructed: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    split.validate()?;
    let n = split.object_count();
    if n != REGION_COUNT {
        return Err(Error::InvalidConfig("compositional scenes need exactly five objects".into()));
    }
    if instructed >= n {
        return Err(Error::InvalidInstruction { target_id: instructed });
    }
    let mut rng = rng::stream(seed, Domain::Split);
    match phase {
        Phase::Train => {
            let primary: Vec<usize> = (0..n).map(|o| split.primary_region(o)).collect();
            let mut seen = [false; REGION_COUNT];
            let is_perm = primary.iter().all(|&r| !std::mem::replace(&mut seen[r], true));
            if is_perm && rng.gen_bool(split.primary_weight) {
                return Ok(primary);
            }
            let allowed: Vec<Vec<usize>> = split.train_regions.iter().map(|t| t.to_vec()).collect();
            random_matching(&allowed, &mut rng, seed)
        }
        Phase::Eval => {
            let allowed: Vec<Vec<usize>> = (0..n)
                .map(|o| {
                    if o == instructed {
                        split.eval_regions[o].to_vec()
                    } else {
                        (0..REGION_COUNT).collect()
                    }
                })
                .collect();
            random_matching(&allowed, &mut rng, seed)
        }
    }
}

pub fn sample_compositional(
    ctx: &PlacementContext<'_>,
    split: &PairingSplit,
    phase: Phase,
    regime: Regime,
    instructed: usize,
    seed: u64,
) -> Result<PlacementSample> {
    if ctx.specs.len() != split.object_count() {
        return Err(Error::InvalidConfig("split and scene disagree on object count".into()));
    }
    let assignment = compositional_assignment(split, phase, instructed, seed)?;
    sample_jitter(ctx, regime, &assignment, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EnvConfig;

    fn ctx_of(cfg: &EnvConfig) -> PlacementContext<'_> {
        PlacementContext::new(&cfg.workspace, &cfg.objects)
    }

    #[test]
    fn layout_has_five_regions_centered_on_origin() {
        let layout = canonical_layout(Regime::SmallJitter);
        assert_eq!(layout.len(), 5);
        assert_eq!(layout[0].center, [0.0, 0.0]);
    }

    #[test]
    fn large_regions_fit_the_workspace() {
        let ws = WorkspaceConfig::default();
        for r in canonical_layout(Regime::LargeJitter) {
            assert!(r.center[0].abs() + r.half_extents[0] <= ws.x_half_extent + 1e-12);
            assert!(r.center[1].abs() + r.half_extents[1] <= ws.y_half_extent + 1e-12);
        }
        // 0.10 + 0.06 and 0.15 + 0.08
        let r = canonical_layout(Regime::LargeJitter)[4];
        assert!((r.center[0] + r.half_extents[0] - 0.16).abs() < 1e-12);
        assert!((r.center[1].abs() + r.half_extents[1] - 0.23).abs() < 1e-12);
    }

    #[test]
    fn small_jitter_box_and_fixed_center() {
        let cfg = EnvConfig::default();
        let ctx = ctx_of(&cfg);
        let assignment = default_assignment(&cfg.objects);
        // orange -> region 2 at (0.10, 0.15)
        let orange = cfg.objects.iter().position(|s| s.name == ObjectKind::Orange).unwrap();
        let cube = cfg.objects.iter().position(|s| s.name == ObjectKind::RubiksCube).unwrap();
        for seed in 0..500 {
            let s = sample_jitter(&ctx, Regime::SmallJitter, &assignment, seed).unwrap();
            let p = s.positions[orange];
            assert!((0.08..=0.12).contains(&p[0]) && (0.12..=0.18).contains(&p[1]), "{p:?}");
            assert_eq!(s.positions[cube], [0.0, 0.0]);
        }
    }

    #[test]
    fn jitter_rejects_full_random() {
        let cfg = EnvConfig::default();
        let err = sample_jitter(&ctx_of(&cfg), Regime::FullRandom, &[0, 1, 2, 3, 4], 1);
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn overlapping_pair_is_rejected() {
        let specs = &EnvConfig::default().objects[..2];
        assert!(!pairwise_gaps_ok(specs, &[[0.0, 0.0], [0.05, 0.0]]));
        assert!(pairwise_gaps_ok(specs, &[[0.0, 0.0], [0.083, 0.0]]));
    }

    #[test]
    fn impossible_scene_reports_placement_failure() {
        let mut ws = WorkspaceConfig::default();
        ws.x_half_extent = 0.05;
        ws.y_half_extent = 0.05;
        let specs = ObjectSpec::standard_set();
        let err = sample_full_random(&PlacementContext::new(&ws, &specs), 9).unwrap_err();
        assert!(matches!(err, Error::PlacementFailure { seed: 9, .. }));
    }

    #[test]
    fn circulant_split() {
        let split = PairingSplit::circulant();
        assert_eq!(split.train_regions[0], [0, 1, 2]);
        assert_eq!(split.eval_regions[0], [3, 4]);
        split.validate().unwrap();
        for seed in 0..20 {
            make_pairing_split(seed).validate().unwrap();
        }
        assert_ne!(make_pairing_split(1).train_regions, make_pairing_split(2).train_regions);
    }

    #[test]
    fn compositional_constraints_hold() {
        let cfg = EnvConfig::default();
        let ctx = ctx_of(&cfg);
        let split = PairingSplit::circulant();
        for seed in 0..300 {
            let t = sample_compositional(&ctx, &split, Phase::Train, Regime::SmallJitter, 0, seed).unwrap();
            let a = t.region_assignment.clone().unwrap();
            let mut sorted = a.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, [0, 1, 2, 3, 4]);
            for (o, &r) in a.iter().enumerate() {
                assert!(split.train_regions[o].contains(&r));
            }
            let instructed = (seed % 5) as usize;
            let e = sample_compositional(&ctx, &split, Phase::Eval, Regime::SmallJitter, instructed, seed).unwrap();
            let a = e.region_assignment.unwrap();
            assert!(split.eval_regions[instructed].contains(&a[instructed]));
            let mut sorted = a.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, [0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn regime_parses() {
        assert_eq!("full-random".parse::<Regime>().unwrap(), Regime::FullRandom);
        assert_eq!("small".parse::<Regime>().unwrap(), Regime::SmallJitter);
        assert!("huge".parse::<Regime>().is_err());
    }
}
