//! Synthetic cohort generator calibrated to per-arm activity rates and
//! lesion counts, with a concentric region atlas standing in for an
//! anatomical segmentation.
//!
//! Outcomes are driven by a per-patient severity latent through a
//! Gaussian copula: marginal activity rates and count distributions per
//! horizon stay exact, while activity and counts correlate across the
//! two horizons. Lesions are ellipsoids placed predominantly in the
//! white-matter analog; future lesions preferentially appear near
//! mid-timepoint lesions, so the conditioning images carry real signal.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::model::TreatmentArm;
use crate::numerics::{read_tensor_file, write_tensor_file, NumericsError, Real, Tensor};
use crate::rng;

/// Correlation between the severity latent and per-horizon activity.
const RHO_ACTIVITY: Real = 0.8;
/// Correlation between the severity latent and per-horizon counts.
const RHO_COUNT: Real = 0.8;
/// Probability that a future lesion center lands within 3 voxels of a
/// mid-timepoint lesion center.
const PERSISTENCE: Real = 0.5;
/// Probability that a mid lesion already shows at baseline.
const BASELINE_CARRYOVER: Real = 0.55;
/// Fraction of lesion centers placed in the white-matter analog.
const WM_PLACEMENT: Real = 0.85;

/// Per-horizon calibration target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonStats {
    /// Fraction of patients with any lesion activity.
    pub activity: Real,
    /// Mean lesion count across all patients (active and inactive).
    pub mean_count: Real,
}

/// Calibration targets for one treatment arm at both horizons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmStats {
    pub arm: TreatmentArm,
    /// One-year horizon; drives the mid-timepoint volumes.
    pub mid: HorizonStats,
    /// Two-year horizon; drives the future mask (the prediction target).
    pub future: HorizonStats,
}

impl HorizonStats {
    pub fn validate(&self) -> Result<(), NumericsError> {
        let bad = |reason: String| NumericsError::Config { op: "arm_stats", reason };
        if !(0.0..=1.0).contains(&self.activity) {
            return Err(bad(format!("activity {} outside [0,1]", self.activity)));
        }
        if self.mean_count < 0.0 {
            return Err(bad(format!("mean count {} negative", self.mean_count)));
        }
        if self.mean_count == 0.0 && self.activity != 0.0 {
            return Err(bad("zero mean count requires zero activity".into()));
        }
        if self.activity > 0.0 && self.mean_count / self.activity < 1.0 {
            return Err(bad(format!(
                "conditional mean {} below 1; counts are at least one when active",
                self.mean_count / self.activity
            )));
        }
        Ok(())
    }

    /// Mean of the count distribution among active patients.
    pub fn conditional_mean(&self) -> Real {
        self.mean_count / self.activity
    }
}

/// Default calibration table.
///
/// Mid-horizon values are the observed one-year per-arm statistics.
/// Future-horizon activities are the observed two-year rates; future
/// counts are adjusted onto the efficacy ordering (isotonic projection
/// of the observed values with a small separating margin, preserving
/// the top-three total) so counterfactual count comparisons order the
/// arms cleanly.
pub fn default_arm_stats() -> Vec<ArmStats> {
    use TreatmentArm::*;
    let row = |arm, am: Real, cm: Real, af: Real, cf: Real| ArmStats {
        arm,
        mid: HorizonStats { activity: am, mean_count: cm },
        future: HorizonStats { activity: af, mean_count: cf },
    };
    vec![
        row(Placebo, 0.637, 4.60, 0.581, 4.50),
        row(Ne, 0.647, 5.51, 0.571, 4.10),
        row(Le, 0.547, 4.37, 0.519, 3.70),
        row(Mie, 0.249, 0.63, 0.337, 1.59),
        row(Moe, 0.196, 0.60, 0.261, 1.03),
        row(He, 0.032, 0.07, 0.015, 0.07),
    ]
}

/// Relative cohort sizes per arm, mirroring the observed sample counts.
pub fn default_arm_proportions() -> Vec<(TreatmentArm, Real)> {
    use TreatmentArm::*;
    let counts = [(Placebo, 267.0), (Ne, 184.0), (Le, 214.0), (Mie, 418.0), (Moe, 153.0), (He, 466.0)];
    let total: Real = counts.iter().map(|(_, c)| c).sum();
    counts.into_iter().map(|(a, c)| (a, c / total)).collect()
}

// ---- region atlas ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Background,
    WhiteMatter,
    Cortex,
}

impl Region {
    pub fn label(self) -> u8 {
        match self {
            Region::Background => 0,
            Region::WhiteMatter => 1,
            Region::Cortex => 2,
        }
    }

    pub fn from_label(l: u8) -> Region {
        match l {
            1 => Region::WhiteMatter,
            2 => Region::Cortex,
            _ => Region::Background,
        }
    }
}

/// Concentric per-slice geometry: a central ventricle-analog hole
/// (background), a white-matter-analog disk, a cortex-analog annulus,
/// and background outside the brain.
#[derive(Debug, Clone)]
pub struct RegionAtlas {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    labels: Vec<u8>,
    /// In-plane (y, x) coordinates eligible as lesion centers.
    wm_centers: Vec<(usize, usize)>,
    cortex_centers: Vec<(usize, usize)>,
}

impl RegionAtlas {
    pub fn make(slices: usize, height: usize, width: usize) -> Result<Self, NumericsError> {
        if slices < 5 || height < 32 || width < 32 {
            return Err(NumericsError::Config {
                op: "make_atlas",
                reason: format!("shape ({slices},{height},{width}) below minimum (5,32,32)"),
            });
        }
        let min = height.min(width) as Real;
        let (r_hole, r_wm, r_brain) = (0.09 * min, 0.375 * min, 0.47 * min);
        let cy = (height as Real - 1.0) / 2.0;
        let cx = (width as Real - 1.0) / 2.0;
        let mut plane = vec![0u8; height * width];
        let mut wm_centers = Vec::new();
        let mut cortex_centers = Vec::new();
        for y in 0..height {
            for x in 0..width {
                let r = ((y as Real - cy).powi(2) + (x as Real - cx).powi(2)).sqrt();
                let region = if r < r_hole || r >= r_brain {
                    Region::Background
                } else if r < r_wm {
                    Region::WhiteMatter
                } else {
                    Region::Cortex
                };
                plane[y * width + x] = region.label();
                match region {
                    Region::WhiteMatter => wm_centers.push((y, x)),
                    // keep centers clear of the outer boundary so the
                    // ellipsoid core survives clipping
                    Region::Cortex if r <= r_brain - 1.5 => cortex_centers.push((y, x)),
                    _ => {}
                }
            }
        }
        let mut labels = Vec::with_capacity(slices * height * width);
        for _ in 0..slices {
            labels.extend_from_slice(&plane);
        }
        Ok(RegionAtlas { slices, height, width, labels, wm_centers, cortex_centers })
    }

    pub fn region(&self, s: usize, y: usize, x: usize) -> Region {
        Region::from_label(self.labels[(s * self.height + y) * self.width + x])
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// (background, white-matter, cortex) voxel totals.
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut c = (0usize, 0usize, 0usize);
        for &l in &self.labels {
            match Region::from_label(l) {
                Region::Background => c.0 += 1,
                Region::WhiteMatter => c.1 += 1,
                Region::Cortex => c.2 += 1,
            }
        }
        c
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.labels.iter().map(|&l| l as Real).collect();
        Tensor::from_vec(&[1, self.slices, self.height, self.width], data).expect("atlas shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, NumericsError> {
        let s = t.shape().to_vec();
        if s.len() != 4 || s[0] != 1 {
            return Err(NumericsError::Rank { op: "atlas_from_tensor", expected: 4, got: s });
        }
        let mut atlas = RegionAtlas::make(s[1], s[2], s[3])?;
        atlas.labels = t.data().iter().map(|&v| v as u8).collect();
        Ok(atlas)
    }
}

// ---- outcome sampling ----

/// Activity flags and lesion counts for both horizons, drawn through
/// the shared severity latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outcome {
    pub mid_active: bool,
    pub mid_count: usize,
    pub future_active: bool,
    pub future_count: usize,
}

/// Solves E[X | X >= 1] = m for a truncated-at-1 Poisson mean.
fn solve_truncated_mean(m: Real) -> Real {
    assert!(m >= 1.0, "conditional mean below 1");
    let f = |mu: Real| mu / (1.0 - (-mu).exp());
    let (mut lo, mut hi) = (1e-12, (2.0 * m).max(60.0));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < m {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Quantile of the truncated-at-1 Poisson via its cumulative pmf.
fn truncated_poisson_quantile(mu: Real, v: Real) -> usize {
    let p0 = (-mu).exp();
    let norm = 1.0 - p0;
    let mut pk = p0;
    let mut cum = 0.0;
    for k in 1..=2000usize {
        pk *= mu / k as Real;
        cum += pk / norm;
        if cum >= v {
            return k;
        }
    }
    2000
}

fn gauss_cdf(x: Real) -> Real {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    n.cdf(x as f64) as Real
}

/// One horizon of the copula. Activity couples to the activity latent;
/// the count couples to a separate latent that is independent of the
/// activity pathway, so `count | active` keeps the exact calibrated
/// truncated-Poisson marginal while counts still correlate across
/// horizons.
fn sample_horizon<R: Rng>(
    stats: &HorizonStats,
    act_latent: Real,
    cnt_latent: Real,
    rng: &mut R,
) -> (bool, usize) {
    let za: Real = rng.sample(StandardNormal);
    let zc: Real = rng.sample(StandardNormal);
    if stats.activity == 0.0 {
        return (false, 0);
    }
    let u_act =
        gauss_cdf(RHO_ACTIVITY * act_latent + (1.0 - RHO_ACTIVITY * RHO_ACTIVITY).sqrt() * za);
    let active = u_act < stats.activity;
    if !active {
        return (false, 0);
    }
    let mu = solve_truncated_mean(stats.conditional_mean());
    let u_cnt = gauss_cdf(RHO_COUNT * cnt_latent + (1.0 - RHO_COUNT * RHO_COUNT).sqrt() * zc);
    (true, truncated_poisson_quantile(mu, u_cnt))
}

/// Draws both horizons for one patient.
pub fn sample_outcome<R: Rng>(stats: &ArmStats, rng: &mut R) -> Outcome {
    let act_latent: Real = rng.sample(StandardNormal);
    let cnt_latent: Real = rng.sample(StandardNormal);
    let (mid_active, mid_count) = sample_horizon(&stats.mid, act_latent, cnt_latent, rng);
    let (future_active, future_count) = sample_horizon(&stats.future, act_latent, cnt_latent, rng);
    Outcome { mid_active, mid_count, future_active, future_count }
}

// ---- lesion placement and rendering ----

#[derive(Debug, Clone, Copy)]
struct Lesion {
    s: isize,
    y: isize,
    x: isize,
    rs: Real,
    ry: Real,
    rx: Real,
}

fn lesion_shape<R: Rng>(rng: &mut R) -> (Real, Real, Real) {
    (rng.gen_range(1.0..2.0), rng.gen_range(3.0..3.8), rng.gen_range(3.0..3.8))
}

fn fresh_center<R: Rng>(atlas: &RegionAtlas, rng: &mut R) -> (isize, isize, isize) {
    let pool = if rng.gen_range(0.0..1.0) < WM_PLACEMENT {
        &atlas.wm_centers
    } else {
        &atlas.cortex_centers
    };
    let (y, x) = pool[rng.gen_range(0..pool.len())];
    let s = rng.gen_range(0..atlas.slices);
    (s as isize, y as isize, x as isize)
}

fn too_close(a: &Lesion, s: isize, y: isize, x: isize, min_plane: Real) -> bool {
    let plane = (((a.y - y).pow(2) + (a.x - x).pow(2)) as Real).sqrt();
    plane < min_plane && (a.s - s).abs() <= 2
}

/// Places `count` lesions with decreasing separation requirements so
/// the post-opening component count tracks the drawn count. `anchors`
/// biases placement toward earlier lesions with the persistence factor.
fn place_lesions<R: Rng>(
    count: usize,
    atlas: &RegionAtlas,
    anchors: &[Lesion],
    rng: &mut R,
) -> Vec<Lesion> {
    let mut placed: Vec<Lesion> = Vec::with_capacity(count);
    for _ in 0..count {
        let (rs, ry, rx) = lesion_shape(rng);
        let mut chosen = None;
        'search: for &(attempts, min_plane) in &[(40, 9.0), (30, 6.5), (30, 4.0)] {
            for _ in 0..attempts {
                let near_anchor = !anchors.is_empty() && rng.gen_range(0.0..1.0) < PERSISTENCE;
                let (s, y, x) = if near_anchor {
                    let a = &anchors[rng.gen_range(0..anchors.len())];
                    let s = (a.s + rng.gen_range(-1..=1)).clamp(0, atlas.slices as isize - 1);
                    let y = a.y + rng.gen_range(-3..=3);
                    let x = a.x + rng.gen_range(-3..=3);
                    let in_bounds =
                        y >= 0 && y < atlas.height as isize && x >= 0 && x < atlas.width as isize;
                    if !in_bounds
                        || atlas.region(s as usize, y as usize, x as usize) == Region::Background
                    {
                        fresh_center(atlas, rng)
                    } else {
                        (s, y, x)
                    }
                } else {
                    fresh_center(atlas, rng)
                };
                if placed.iter().all(|p| !too_close(p, s, y, x, min_plane)) {
                    chosen = Some((s, y, x));
                    break 'search;
                }
            }
        }
        let (s, y, x) = chosen.unwrap_or_else(|| fresh_center(atlas, rng));
        placed.push(Lesion { s, y, x, rs, ry, rx });
    }
    placed
}

/// Voxel set of a lesion, clipped to non-background labels.
fn rasterize(lesion: &Lesion, atlas: &RegionAtlas) -> Vec<usize> {
    let mut voxels = Vec::new();
    let (s_ext, y_ext, x_ext) =
        (lesion.rs.ceil() as isize, lesion.ry.ceil() as isize, lesion.rx.ceil() as isize);
    for ds in -s_ext..=s_ext {
        for dy in -y_ext..=y_ext {
            for dx in -x_ext..=x_ext {
                let (s, y, x) = (lesion.s + ds, lesion.y + dy, lesion.x + dx);
                if s < 0
                    || y < 0
                    || x < 0
                    || s >= atlas.slices as isize
                    || y >= atlas.height as isize
                    || x >= atlas.width as isize
                {
                    continue;
                }
                let d = (ds as Real / lesion.rs).powi(2)
                    + (dy as Real / lesion.ry).powi(2)
                    + (dx as Real / lesion.rx).powi(2);
                if d <= 1.0 && atlas.region(s as usize, y as usize, x as usize) != Region::Background
                {
                    voxels.push(((s as usize) * atlas.height + y as usize) * atlas.width + x as usize);
                }
            }
        }
    }
    voxels
}

// ---- patient records and cohorts ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One synthetic patient: two imaging timepoints, the future lesion
/// mask to predict, and bookkeeping for evaluation.
#[derive(Debug, Clone)]
pub struct PatientRecord {
    pub id: String,
    pub arm: TreatmentArm,
    /// Pre-treatment volume [1, s, h, w].
    pub baseline: Tensor,
    /// Intermediate-timepoint volume [1, s, h, w].
    pub mid: Tensor,
    /// Binary future lesion mask [1, s, h, w].
    pub future_mask: Tensor,
    pub atlas: Arc<RegionAtlas>,
    pub split: Split,
    /// Lesion counts as drawn by the generator, before rasterization.
    pub drawn_mid_count: usize,
    pub drawn_future_count: usize,
}

impl PatientRecord {
    pub fn is_active(&self) -> bool {
        self.future_mask.data().iter().any(|&v| v > 0.5)
    }
}

/// Smooth per-patient brain-like intensity plane.
fn render_base_plane<R: Rng>(atlas: &RegionAtlas, rng: &mut R) -> Vec<Real> {
    let (h, w) = (atlas.height, atlas.width);
    let tau = std::f64::consts::TAU as Real;
    let mut waves = Vec::new();
    for _ in 0..3 {
        let amp = rng.gen_range(0.02..0.05);
        let fy = rng.gen_range(1..4) as Real;
        let fx = rng.gen_range(1..4) as Real;
        let phase = rng.gen_range(0.0..tau);
        waves.push((amp, fy, fx, phase));
    }
    let mut plane = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0;
            for &(amp, fy, fx, phase) in &waves {
                v += amp * (tau * (fy * y as Real / h as Real + fx * x as Real / w as Real) + phase).cos();
            }
            plane[y * w + x] = v;
        }
    }
    plane
}

fn render_volume<R: Rng>(
    atlas: &RegionAtlas,
    base_plane: &[Real],
    lesions: &[Lesion],
    rng: &mut R,
) -> Tensor {
    let (s, h, w) = (atlas.slices, atlas.height, atlas.width);
    let mut data = vec![0.0; s * h * w];
    for si in 0..s {
        for y in 0..h {
            for x in 0..w {
                let idx = (si * h + y) * w + x;
                let (base, field) = match atlas.region(si, y, x) {
                    Region::Background => (0.03, 0.0),
                    Region::WhiteMatter => (0.50, base_plane[y * w + x]),
                    Region::Cortex => (0.70, base_plane[y * w + x]),
                };
                let noise: Real = rng.sample::<Real, _>(StandardNormal) * 0.015;
                data[idx] = (base + field + noise).clamp(0.0, 1.0);
            }
        }
    }
    for lesion in lesions {
        let bright = 0.92 + rng.gen_range(0.0..0.06);
        for &v in &rasterize(lesion, atlas) {
            data[v] = bright;
        }
    }
    Tensor::from_vec(&[1, s, h, w], data).expect("volume shape")
}

fn render_mask(atlas: &RegionAtlas, lesions: &[Lesion]) -> Tensor {
    let (s, h, w) = (atlas.slices, atlas.height, atlas.width);
    let mut data = vec![0.0; s * h * w];
    for lesion in lesions {
        for &v in &rasterize(lesion, atlas) {
            data[v] = 1.0;
        }
    }
    Tensor::from_vec(&[1, s, h, w], data).expect("mask shape")
}

/// Generates one patient record from its arm statistics.
pub fn sample_patient<R: Rng>(
    id: String,
    stats: &ArmStats,
    atlas: &Arc<RegionAtlas>,
    split: Split,
    rng: &mut R,
) -> PatientRecord {
    let outcome = sample_outcome(stats, rng);
    let mid_lesions = place_lesions(outcome.mid_count, atlas, &[], rng);
    let future_lesions = place_lesions(outcome.future_count, atlas, &mid_lesions, rng);
    let baseline_lesions: Vec<Lesion> = mid_lesions
        .iter()
        .filter(|_| rng.gen_range(0.0..1.0) < BASELINE_CARRYOVER)
        .copied()
        .collect();

    let base_plane = render_base_plane(atlas, rng);
    let baseline = render_volume(atlas, &base_plane, &baseline_lesions, rng);
    let mid = render_volume(atlas, &base_plane, &mid_lesions, rng);
    let future_mask = render_mask(atlas, &future_lesions);

    PatientRecord {
        id,
        arm: stats.arm,
        baseline,
        mid,
        future_mask,
        atlas: Arc::clone(atlas),
        split,
        drawn_mid_count: outcome.mid_count,
        drawn_future_count: outcome.future_count,
    }
}

/// A complete synthetic cohort with its shared atlas.
pub struct Cohort {
    pub atlas: Arc<RegionAtlas>,
    pub patients: Vec<PatientRecord>,
}

/// Largest-remainder apportionment of `total` into weighted parts.
fn apportion(total: usize, weights: &[Real]) -> Vec<usize> {
    let sum: Real = weights.iter().sum();
    let exact: Vec<Real> = weights.iter().map(|w| total as Real * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..total - assigned {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

/// Builds an n-patient cohort with stratified 80/10/10 splits.
pub fn make_cohort(
    n: usize,
    proportions: &[(TreatmentArm, Real)],
    stats: &[ArmStats],
    shape: (usize, usize, usize),
    seed: u64,
) -> Result<Cohort, NumericsError> {
    if n < 30 {
        return Err(NumericsError::Config {
            op: "make_cohort",
            reason: format!("cohort of {n} is too small to stratify"),
        });
    }
    for s in stats {
        s.mid.validate()?;
        s.future.validate()?;
    }
    let atlas = Arc::new(RegionAtlas::make(shape.0, shape.1, shape.2)?);
    let weights: Vec<Real> = proportions.iter().map(|&(_, w)| w).collect();
    let per_arm = apportion(n, &weights);

    // global split sizes first, then per-arm apportionment of val/test
    let val_total = (n as Real * 0.1).round() as usize;
    let test_total = val_total;
    let arm_weights: Vec<Real> = per_arm.iter().map(|&c| c as Real).collect();
    let val_per_arm = apportion(val_total, &arm_weights);
    let test_per_arm = apportion(test_total, &arm_weights);

    let mut patients = Vec::with_capacity(n);
    let mut next_id = 0usize;
    for (ai, &(arm, _)) in proportions.iter().enumerate() {
        let arm_stats = stats
            .iter()
            .find(|s| s.arm == arm)
            .ok_or_else(|| NumericsError::Config {
                op: "make_cohort",
                reason: format!("missing statistics for arm {arm}"),
            })?;
        let count = per_arm[ai];
        // deterministic split assignment within the arm
        let mut order: Vec<usize> = (0..count).collect();
        let mut shuffle_rng = rng::stream(seed, "split", ai as u64);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for (local, &slot) in order.iter().enumerate() {
            let split = if slot < val_per_arm[ai] {
                Split::Val
            } else if slot < val_per_arm[ai] + test_per_arm[ai] {
                Split::Test
            } else {
                Split::Train
            };
            let id = format!("p{:05}", next_id + local);
            let mut patient_rng = rng::stream(seed, "patient", (next_id + local) as u64);
            patients.push(sample_patient(id, arm_stats, &atlas, split, &mut patient_rng));
        }
        next_id += count;
    }
    patients.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Cohort { atlas, patients })
}

impl Cohort {
    pub fn split(&self, split: Split) -> Vec<&PatientRecord> {
        self.patients.iter().filter(|p| p.split == split).collect()
    }

    /// Writes the manifest, atlas, and per-patient volumes.
    pub fn save(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        write_tensor_file(&dir.join("atlas.lft"), &self.atlas.to_tensor())?;
        let mut manifest = fs::File::create(dir.join("manifest.txt"))?;
        for p in &self.patients {
            let base = format!("{}_baseline.lft", p.id);
            let mid = format!("{}_mid.lft", p.id);
            let fut = format!("{}_future.lft", p.id);
            write_tensor_file(&dir.join(&base), &p.baseline)?;
            write_tensor_file(&dir.join(&mid), &p.mid)?;
            write_tensor_file(&dir.join(&fut), &p.future_mask)?;
            writeln!(
                manifest,
                "{},{},{},{},{},{},{},{}",
                p.id,
                p.arm,
                p.split.tag(),
                base,
                mid,
                fut,
                p.drawn_mid_count,
                p.drawn_future_count
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> io::Result<Cohort> {
        let atlas_tensor = read_tensor_file(&dir.join("atlas.lft"))?;
        let atlas = Arc::new(
            RegionAtlas::from_tensor(&atlas_tensor)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?,
        );
        let manifest = fs::File::open(dir.join("manifest.txt"))?;
        let mut patients = Vec::new();
        for line in io::BufReader::new(manifest).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 8 {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("malformed manifest line: {line}"),
                ));
            }
            let bad = |e: String| io::Error::new(io::ErrorKind::InvalidData, e);
            patients.push(PatientRecord {
                id: parts[0].to_string(),
                arm: parts[1].parse().map_err(bad)?,
                split: parts[2].parse().map_err(bad)?,
                baseline: read_tensor_file(&dir.join(parts[3]))?,
                mid: read_tensor_file(&dir.join(parts[4]))?,
                future_mask: read_tensor_file(&dir.join(parts[5]))?,
                atlas: Arc::clone(&atlas),
                drawn_mid_count: parts[6]
                    .parse()
                    .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                drawn_future_count: parts[7]
                    .parse()
                    .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            });
        }
        Ok(Cohort { atlas, patients })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atlas_labels_every_voxel_once_with_frozen_counts() {
        let atlas = RegionAtlas::make(5, 32, 32).unwrap();
        let (bg, wm, cortex) = atlas.counts();
        assert_eq!(bg + wm + cortex, 5 * 32 * 32);
        // frozen from direct geometric counting at the default radii
        assert_eq!((bg, wm, cortex), (1660, 2120, 1340));
        assert!(wm > cortex);
    }

    #[test]
    fn atlas_rejects_too_small_shapes() {
        assert!(RegionAtlas::make(4, 32, 32).is_err());
        assert!(RegionAtlas::make(5, 16, 32).is_err());
    }

    #[test]
    fn outcome_marginals_match_targets_he_arm() {
        // tightest calibration target: high-efficacy arm over 10^4 draws
        let stats = default_arm_stats();
        let he = stats.iter().find(|s| s.arm == TreatmentArm::He).unwrap();
        let mut rng = rng::stream(1234, "calibration", 0);
        let n = 10_000;
        let mut active = 0usize;
        let mut count_sum = 0.0;
        let mut count_sq = 0.0;
        for _ in 0..n {
            let o = sample_outcome(he, &mut rng);
            active += o.mid_active as usize;
            count_sum += o.mid_count as Real;
            count_sq += (o.mid_count * o.mid_count) as Real;
        }
        let rate = active as Real / n as Real;
        let se_rate = (he.mid.activity * (1.0 - he.mid.activity) / n as Real).sqrt();
        assert!((rate - he.mid.activity).abs() < 3.0 * se_rate, "activity {rate}");
        let mean = count_sum / n as Real;
        let var = count_sq / n as Real - mean * mean;
        let se_mean = (var / n as Real).sqrt();
        assert!((mean - he.mid.mean_count).abs() < 3.0 * se_mean, "count {mean}");
    }

    #[test]
    fn mid_activity_doubles_future_odds() {
        // pooled over the default cohort mix, mid-active patients must
        // be at least twice as likely to be future-active
        let stats = default_arm_stats();
        let props = default_arm_proportions();
        let mut rng = rng::stream(77, "informativeness", 0);
        let (mut both, mut mid_active_n, mut fut_given_inactive, mut inactive_mid) =
            (0.0, 0.0, 0.0, 0.0);
        for _ in 0..20_000 {
            let u: Real = rng.gen_range(0.0..1.0);
            let mut acc = 0.0;
            let mut arm = TreatmentArm::Placebo;
            for &(a, w) in &props {
                acc += w;
                if u < acc {
                    arm = a;
                    break;
                }
            }
            let s = stats.iter().find(|s| s.arm == arm).unwrap();
            let o = sample_outcome(s, &mut rng);
            if o.mid_active {
                mid_active_n += 1.0;
                both += o.future_active as usize as Real;
            } else {
                inactive_mid += 1.0;
                fut_given_inactive += o.future_active as usize as Real;
            }
        }
        let p_given_active = both / mid_active_n;
        let p_given_inactive = fut_given_inactive / inactive_mid;
        assert!(
            p_given_active >= 2.0 * p_given_inactive,
            "{p_given_active} vs {p_given_inactive}"
        );
    }

    #[test]
    fn inactive_patients_have_empty_masks_and_lesions_stay_in_brain() {
        let stats = default_arm_stats();
        let atlas = Arc::new(RegionAtlas::make(5, 32, 32).unwrap());
        let mut rng = rng::stream(3, "placement", 0);
        let mut saw_active = false;
        for (i, s) in stats.iter().cycle().take(60).enumerate() {
            let p = sample_patient(format!("t{i}"), s, &atlas, Split::Train, &mut rng);
            if p.drawn_future_count == 0 {
                assert!(!p.is_active(), "inactive draw must give an empty mask");
            } else {
                saw_active = true;
            }
            for (idx, &v) in p.future_mask.data().iter().enumerate() {
                if v > 0.5 {
                    let hw = 32 * 32;
                    let (s_i, rem) = (idx / hw, idx % hw);
                    assert_ne!(
                        p.atlas.region(s_i, rem / 32, rem % 32),
                        Region::Background,
                        "lesion voxel in background"
                    );
                }
            }
        }
        assert!(saw_active);
    }

    #[test]
    fn cohort_split_is_80_10_10_and_stratified() {
        let stats = default_arm_stats();
        let props = default_arm_proportions();
        let cohort = make_cohort(100, &props, &stats, (5, 32, 32), 11).unwrap();
        assert_eq!(cohort.patients.len(), 100);
        assert_eq!(cohort.split(Split::Train).len(), 80);
        assert_eq!(cohort.split(Split::Val).len(), 10);
        assert_eq!(cohort.split(Split::Test).len(), 10);
        // each arm's share of each split within one patient of its
        // global share
        for &(arm, _) in &props {
            let global = cohort.patients.iter().filter(|p| p.arm == arm).count() as Real / 100.0;
            for (split, size) in [(Split::Train, 80.0), (Split::Val, 10.0), (Split::Test, 10.0)] {
                let in_split = cohort
                    .patients
                    .iter()
                    .filter(|p| p.arm == arm && p.split == split)
                    .count() as Real;
                assert!(
                    (in_split - global * size).abs() <= 1.0,
                    "{arm} {split:?}: {in_split} vs {}",
                    global * size
                );
            }
        }
    }

    #[test]
    fn cohort_generation_is_seed_deterministic() {
        let stats = default_arm_stats();
        let props = default_arm_proportions();
        let a = make_cohort(40, &props, &stats, (5, 32, 32), 5).unwrap();
        let b = make_cohort(40, &props, &stats, (5, 32, 32), 5).unwrap();
        for (pa, pb) in a.patients.iter().zip(&b.patients) {
            assert_eq!(pa.id, pb.id);
            assert_eq!(pa.arm, pb.arm);
            assert_eq!(pa.baseline.data(), pb.baseline.data());
            assert_eq!(pa.future_mask.data(), pb.future_mask.data());
        }
    }

    #[test]
    fn cohort_round_trips_through_disk() {
        let stats = default_arm_stats();
        let props = default_arm_proportions();
        let cohort = make_cohort(32, &props, &stats, (5, 32, 32), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        cohort.save(dir.path()).unwrap();
        let loaded = Cohort::load(dir.path()).unwrap();
        assert_eq!(loaded.patients.len(), cohort.patients.len());
        for (a, b) in cohort.patients.iter().zip(&loaded.patients) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.arm, b.arm);
            assert_eq!(a.split, b.split);
            assert_eq!(a.drawn_future_count, b.drawn_future_count);
            // volumes round-trip through f32 storage
            for (x, y) in a.mid.data().iter().zip(b.mid.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn truncated_poisson_solver_and_quantile_agree() {
        // the quantile transform of uniforms reproduces the conditional mean
        for &target in &[1.5, 2.19, 4.67, 7.75] {
            let mu = solve_truncated_mean(target);
            assert!((mu / (1.0 - (-mu).exp()) - target).abs() < 1e-9);
            let mut rng = rng::stream(8, "tp", target.to_bits());
            let n = 40_000;
            let mut sum = 0.0;
            for _ in 0..n {
                sum += truncated_poisson_quantile(mu, rng.gen_range(0.0..1.0)) as Real;
            }
            let mean = sum / n as Real;
            assert!((mean - target).abs() < 0.08, "target {target}: got {mean}");
        }
    }
}
