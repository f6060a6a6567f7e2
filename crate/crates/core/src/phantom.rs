//! Synthetic paired-contrast head phantoms and a simple tissue segmenter.
//!
//! A phantom is a set of nested ellipsoids (WM core, GM shell, CSF rim) with
//! a wavy GM/WM boundary and optional WM lesions. One label field is rendered
//! twice, once per contrast. Boundary voxels hold a mixture of tissues, and
//! each contrast maps that mixture to intensity along its own curve, so the
//! two contrasts disagree on how partial-volume voxels segment.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::{LabelVolume, PerClass, Tissue};
use crate::rng::{self, NoiseRng};
use crate::volume::{preprocess, Spacing, Volume};

/// Lowest intensity a tissue voxel may take before normalization, keeping
/// exact zero reserved for background.
pub const TISSUE_FLOOR: f64 = 1e-3;

/// Intensity model of one contrast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastSpec {
    /// Pure-tissue intensities (CSF, GM, WM).
    pub means: PerClass<f64>,
    /// Gaussian noise SD per tissue class.
    pub sds: PerClass<f64>,
    pub background: f64,
    /// Shape of the intensity ramp across CSF/GM and GM/WM mixtures. Above 1
    /// mixtures look more like GM, below 1 more like the neighbouring tissue,
    /// 1 is linear mixing.
    pub pv_exponents: [f64; 2],
    /// Intensity replacing WM inside lesions.
    pub lesion_mean: f64,
}

impl ContrastSpec {
    /// Lower-field, lower-contrast rendering.
    pub fn source_default() -> Self {
        Self {
            means: PerClass([0.40, 0.68, 0.90]),
            sds: PerClass([0.01; 3]),
            background: 0.0,
            pv_exponents: [0.6, 0.92],
            lesion_mean: 0.60,
        }
    }

    /// Higher-field rendering with wider tissue separation.
    pub fn target_default() -> Self {
        Self {
            means: PerClass([0.15, 0.55, 0.95]),
            sds: PerClass([0.01; 3]),
            background: 0.0,
            pv_exponents: [1.6, 1.08],
            lesion_mean: 0.30,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let m = self.means.0;
        if m.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid(format!("{name}: tissue means must be positive")));
        }
        if m[0] == m[1] || m[1] == m[2] || m[0] == m[2] {
            return Err(invalid(format!("{name}: tissue means must be distinct")));
        }
        if self.sds.0.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(invalid(format!("{name}: noise SDs must be non-negative")));
        }
        if self.pv_exponents.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(invalid(format!("{name}: partial-volume exponent must be positive")));
        }
        if !(self.background.is_finite() && self.lesion_mean.is_finite() && self.lesion_mean > 0.0) {
            return Err(invalid(format!("{name}: background and lesion intensity must be finite")));
        }
        Ok(())
    }

    /// Tissues in ascending order of intensity.
    pub fn tissue_order(&self) -> [Tissue; 3] {
        let mut order = Tissue::ALL;
        order.sort_by(|a, b| self.means[*a].total_cmp(&self.means[*b]));
        order
    }
}

impl Default for ContrastSpec {
    fn default() -> Self {
        Self::source_default()
    }
}

/// Ellipsoid layout, as fractions of the half-extent of the volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Geometry {
    pub csf_radius: f64,
    pub gm_radius: f64,
    pub wm_radius: f64,
    /// Per-axis radius scale is drawn from `1 ± scale_jitter`.
    pub scale_jitter: f64,
    /// Centre offset is drawn from `± center_jitter` per axis.
    pub center_jitter: f64,
    /// Relative amplitude of the GM/WM boundary ripple.
    pub fold_amplitude: f64,
    pub fold_frequency: f64,
    /// Width in voxels of the partial-volume transition at every boundary.
    /// Zero gives hard boundaries.
    pub pv_width: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            csf_radius: 0.94,
            gm_radius: 0.80,
            wm_radius: 0.55,
            scale_jitter: 0.06,
            center_jitter: 0.04,
            fold_amplitude: 0.08,
            fold_frequency: 4.0,
            pv_width: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LesionSpec {
    pub enabled: bool,
    pub count: usize,
    pub radius_vox: f64,
}

impl Default for LesionSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            count: 4,
            radius_vox: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: Spacing,
    pub source: ContrastSpec,
    pub target: ContrastSpec,
    pub geometry: Geometry,
    pub lesions: LesionSpec,
    pub seed: u64,
    /// Percentile fraction clipped at each end before normalization.
    pub clip_fraction: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            spacing: Spacing::UNIT,
            source: ContrastSpec::source_default(),
            target: ContrastSpec::target_default(),
            geometry: Geometry::default(),
            lesions: LesionSpec::default(),
            seed: 0,
            clip_fraction: 0.001,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 4) {
            return Err(invalid(format!("phantom dims {:?} below 4 voxels", self.dims)));
        }
        self.spacing.validate()?;
        let g = &self.geometry;
        if !(0.0 < g.wm_radius && g.wm_radius < g.gm_radius && g.gm_radius < g.csf_radius && g.csf_radius <= 1.0) {
            return Err(invalid(format!(
                "degenerate geometry: radii must satisfy 0 < wm {} < gm {} < csf {} <= 1",
                g.wm_radius, g.gm_radius, g.csf_radius
            )));
        }
        let fractions = [g.scale_jitter, g.center_jitter, g.fold_amplitude];
        if fractions.iter().any(|v| !(0.0..0.5).contains(v)) {
            return Err(invalid("degenerate geometry: jitter and fold amplitude must lie in [0, 0.5)"));
        }
        if !(g.pv_width >= 0.0 && g.pv_width.is_finite() && g.fold_frequency.is_finite()) {
            return Err(invalid("degenerate geometry: partial-volume width must be non-negative"));
        }
        if self.lesions.radius_vox.is_nan() || self.lesions.radius_vox <= 0.0 {
            return Err(invalid("lesion radius must be positive"));
        }
        if !(0.0..0.5).contains(&self.clip_fraction) {
            return Err(invalid("clip fraction must lie in [0, 0.5)"));
        }
        self.source.validate("source contrast")?;
        self.target.validate("target contrast")
    }
}

/// One subject: both renderings and the shared ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPair {
    pub source: Volume,
    pub target: Volume,
    pub labels: LabelVolume,
}

/// Tissue fractions of one voxel, and its centre label.
struct Voxel {
    fractions: [f64; 4],
    label: u8,
    lesion: bool,
}

struct Anatomy {
    center: [f64; 3],
    semi_axes: [f64; 3],
    /// Radius in voxels used to convert radial offsets into voxel distances.
    radius_vox: f64,
    fold_phase: f64,
    lesions: Vec<[f64; 3]>,
}

fn uniform(rng: &mut NoiseRng, half_width: f64) -> f64 {
    if half_width == 0.0 {
        0.0
    } else {
        rng.random_range(-half_width..half_width)
    }
}

impl Anatomy {
    fn draw(spec: &PhantomSpec, rng: &mut NoiseRng) -> Self {
        let g = &spec.geometry;
        let half = spec.dims.map(|d| d as f64 / 2.0);
        let mut center = [0.0; 3];
        let mut semi_axes = [0.0; 3];
        for a in 0..3 {
            semi_axes[a] = half[a] * (1.0 + uniform(rng, g.scale_jitter));
            center[a] = half[a] * (1.0 + uniform(rng, g.center_jitter));
        }
        let fold_phase = uniform(rng, std::f64::consts::PI);
        let mut anatomy = Anatomy {
            center,
            semi_axes,
            radius_vox: semi_axes.iter().copied().fold(f64::INFINITY, f64::min),
            fold_phase,
            lesions: Vec::new(),
        };
        if spec.lesions.enabled {
            // Lesion centres sit well inside the WM core.
            let r = 0.7 * g.wm_radius * (1.0 - g.fold_amplitude);
            while anatomy.lesions.len() < spec.lesions.count {
                let u = [uniform(rng, r), uniform(rng, r), uniform(rng, r)];
                if u.iter().map(|v| v * v).sum::<f64>() < r * r {
                    anatomy
                        .lesions
                        .push(std::array::from_fn(|a| anatomy.center[a] + u[a] * anatomy.semi_axes[a]));
                }
            }
        }
        anatomy
    }

    fn voxel(&self, spec: &PhantomSpec, p: [usize; 3]) -> Voxel {
        let g = &spec.geometry;
        let pos = p.map(|i| i as f64 + 0.5);
        let u: [f64; 3] = std::array::from_fn(|a| (pos[a] - self.center[a]) / self.semi_axes[a]);
        let rho = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        let azimuth = u[1].atan2(u[0]);
        let elevation = if rho > 0.0 { (u[2] / rho).asin() } else { 0.0 };
        let ripple = 1.0
            + g.fold_amplitude
                * (g.fold_frequency * azimuth + self.fold_phase).sin()
                * (g.fold_frequency * elevation).cos();
        let radii = [g.csf_radius, g.gm_radius, g.wm_radius * ripple];
        // Fraction of the voxel inside each boundary.
        let inside = radii.map(|r| {
            let dist = (r - rho) * self.radius_vox;
            if g.pv_width == 0.0 {
                if dist > 0.0 { 1.0 } else { 0.0 }
            } else {
                1.0 / (1.0 + (-dist / g.pv_width).exp())
            }
        });
        let fractions = [
            1.0 - inside[0],
            inside[0] - inside[1],
            inside[1] - inside[2],
            inside[2],
        ];
        let label = radii.iter().filter(|&&r| rho < r).count() as u8;
        let lesion = label == Tissue::Wm.label()
            && self.lesions.iter().any(|c| {
                pos.iter()
                    .zip(c)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    < spec.lesions.radius_vox
            });
        Voxel {
            fractions,
            label,
            lesion,
        }
    }
}

impl ContrastSpec {
    /// Intensity of a tissue mixture, ignoring noise.
    fn mixture(&self, v: &Voxel) -> f64 {
        let tissue = v.fractions[1] + v.fractions[2] + v.fractions[3];
        let wm = if v.lesion { self.lesion_mean } else { self.means[Tissue::Wm] };
        let (csf, gm) = (self.means[Tissue::Csf], self.means[Tissue::Gm]);
        // 0 = pure CSF, 1 = pure GM, 2 = pure WM
        let q = (v.fractions[2] + 2.0 * v.fractions[3]) / tissue;
        let pure = if q <= 1.0 {
            csf + (gm - csf) * (1.0 - (1.0 - q).powf(self.pv_exponents[0]))
        } else {
            gm + (wm - gm) * (q - 1.0).powf(self.pv_exponents[1])
        };
        tissue * pure + v.fractions[0] * self.background
    }
}

fn render(voxels: &[Voxel], contrast: &ContrastSpec, rng: &mut NoiseRng) -> Vec<f32> {
    voxels
        .iter()
        .map(|v| {
            if v.label == 0 {
                return contrast.background as f32;
            }
            let class = Tissue::ALL[usize::from(v.label) - 1];
            let noise = contrast.sds[class] * rng::standard_normal(rng);
            (contrast.mixture(v) + noise).max(TISSUE_FLOOR) as f32
        })
        .collect()
}

/// Renders one subject. Deterministic in `spec.seed`.
pub fn generate_pair(spec: &PhantomSpec) -> Result<PhantomPair> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed);
    let anatomy = Anatomy::draw(spec, &mut rng);
    let [nx, ny, nz] = spec.dims;
    let mut voxels = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                voxels.push(anatomy.voxel(spec, [x, y, z]));
            }
        }
    }
    if !voxels.iter().any(|v| v.label > 0) {
        return Err(invalid("degenerate geometry: phantom contains no tissue"));
    }
    let labels = LabelVolume::new(spec.dims, spec.spacing, voxels.iter().map(|v| v.label).collect())?;
    let source = render(&voxels, &spec.source, &mut rng);
    let target = render(&voxels, &spec.target, &mut rng);
    let finish = |data: Vec<f32>, tag: &str| -> Result<Volume> {
        let v = Volume::new(spec.dims, spec.spacing, data)?;
        Ok(preprocess(&v, spec.clip_fraction)?.with_tags(tag, ""))
    };
    Ok(PhantomPair {
        source: finish(source, "S")?,
        target: finish(target, "T")?,
        labels,
    })
}

/// A cohort of phantom subjects sharing one base spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub subjects: usize,
    /// The last `lesion_subjects` subjects get lesions.
    pub lesion_subjects: usize,
    pub base: PhantomSpec,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            subjects: 40,
            lesion_subjects: 18,
            base: PhantomSpec::default(),
        }
    }
}

impl CohortSpec {
    pub fn subject_id(index: usize) -> String {
        format!("sub-{:03}", index + 1)
    }

    /// Spec of subject `index`, with its own seed and lesion setting.
    pub fn subject(&self, index: usize) -> PhantomSpec {
        let mut spec = self.base.clone();
        spec.seed = self.base.seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        spec.lesions.enabled = index + self.lesion_subjects >= self.subjects;
        spec
    }
}

/// Optimal partition of 1-D data into three contiguous clusters under the
/// within-cluster sum of squares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThreeMeans {
    pub means: [f64; 3],
    /// A value `v` is in cluster 0 if `v <= thresholds[0]`, cluster 1 if
    /// `v <= thresholds[1]`, else cluster 2.
    pub thresholds: [f64; 2],
}

impl ThreeMeans {
    pub fn assign(&self, v: f64) -> usize {
        if v <= self.thresholds[0] {
            0
        } else if v <= self.thresholds[1] {
            1
        } else {
            2
        }
    }
}

struct Moments {
    w: Vec<f64>,
    s: Vec<f64>,
    q: Vec<f64>,
}

impl Moments {
    fn sse(&self, a: usize, b: usize) -> f64 {
        let w = self.w[b] - self.w[a];
        let s = self.s[b] - self.s[a];
        (self.q[b] - self.q[a] - s * s / w).max(0.0)
    }
}

/// Exact 1-D k-means with k = 3. Clusters in one dimension are intervals, so
/// the optimum is found over split points between distinct values, using the
/// monotonicity of the optimal first split in the second.
pub fn three_means(values: &[f64]) -> Result<ThreeMeans> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("three_means: non-finite value"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut uniq: Vec<(f64, f64)> = Vec::new();
    for v in sorted {
        match uniq.last_mut() {
            Some((last, count)) if *last == v => *count += 1.0,
            _ => uniq.push((v, 1.0)),
        }
    }
    let m = uniq.len();
    if m < 3 {
        return Err(Error::DegenerateInput(format!(
            "need three distinct intensities to form three clusters, found {m}"
        )));
    }
    let shift = values.iter().sum::<f64>() / values.len() as f64;
    let mut mo = Moments {
        w: vec![0.0; m + 1],
        s: vec![0.0; m + 1],
        q: vec![0.0; m + 1],
    };
    for (i, &(v, c)) in uniq.iter().enumerate() {
        let d = v - shift;
        mo.w[i + 1] = mo.w[i] + c;
        mo.s[i + 1] = mo.s[i] + c * d;
        mo.q[i + 1] = mo.q[i] + c * d * d;
    }

    // two[j] = best cost of splitting uniq[..j] into two clusters, split[j] its first split.
    let mut two = vec![f64::INFINITY; m];
    let mut split = vec![0usize; m];
    fill_two_cluster(&mo, 2, m - 1, 1, m - 2, &mut two, &mut split);
    let mut best = (f64::INFINITY, 0usize);
    for (j, two_j) in two.iter().enumerate().skip(2) {
        let cost = two_j + mo.sse(j, m);
        if cost < best.0 {
            best = (cost, j);
        }
    }
    let (j, i) = (best.1, split[best.1]);
    let mean = |a: usize, b: usize| (mo.s[b] - mo.s[a]) / (mo.w[b] - mo.w[a]) + shift;
    Ok(ThreeMeans {
        means: [mean(0, i), mean(i, j), mean(j, m)],
        thresholds: [
            0.5 * (uniq[i - 1].0 + uniq[i].0),
            0.5 * (uniq[j - 1].0 + uniq[j].0),
        ],
    })
}

fn fill_two_cluster(
    mo: &Moments,
    j_lo: usize,
    j_hi: usize,
    i_lo: usize,
    i_hi: usize,
    two: &mut [f64],
    split: &mut [usize],
) {
    if j_lo > j_hi {
        return;
    }
    let j = (j_lo + j_hi) / 2;
    let mut best = (f64::INFINITY, i_lo);
    for i in i_lo..=i_hi.min(j - 1) {
        let cost = mo.sse(0, i) + mo.sse(i, j);
        if cost < best.0 {
            best = (cost, i);
        }
    }
    two[j] = best.0;
    split[j] = best.1;
    if j > j_lo {
        fill_two_cluster(mo, j_lo, j - 1, i_lo, best.1, two, split);
    }
    fill_two_cluster(mo, j + 1, j_hi, best.1, i_hi, two, split);
}

/// Three-class segmentation of the nonzero voxels, with the darkest cluster
/// labelled CSF, then GM, then WM.
pub fn threshold_segment(v: &Volume) -> Result<LabelVolume> {
    threshold_segment_with(v, Tissue::ALL)
}

/// Like [`threshold_segment`], with `order` naming the tissue of each
/// cluster from darkest to brightest.
pub fn threshold_segment_with(v: &Volume, order: [Tissue; 3]) -> Result<LabelVolume> {
    let nonzero: Vec<f64> = v
        .data()
        .iter()
        .filter(|&&x| x != 0.0)
        .map(|&x| f64::from(x))
        .collect();
    let km = three_means(&nonzero)?;
    let labels = v
        .data()
        .iter()
        .map(|&x| if x == 0.0 { 0 } else { order[km.assign(f64::from(x))].label() })
        .collect();
    LabelVolume::new(v.dims(), v.spacing(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;

    fn small() -> PhantomSpec {
        PhantomSpec {
            dims: [16, 16, 16],
            ..PhantomSpec::default()
        }
    }

    fn noiseless(mut spec: PhantomSpec) -> PhantomSpec {
        for c in [&mut spec.source, &mut spec.target] {
            c.sds = PerClass([0.0; 3]);
        }
        spec.geometry.pv_width = 0.0;
        spec.clip_fraction = 0.0;
        spec
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate_pair(&small()).unwrap();
        assert_eq!(a, generate_pair(&small()).unwrap());
        let other = generate_pair(&PhantomSpec { seed: 9, ..small() }).unwrap();
        assert_ne!(a.source, other.source);
    }

    #[test]
    fn noiseless_classes_are_constant() {
        let spec = noiseless(small());
        let pair = generate_pair(&spec).unwrap();
        for (vol, contrast) in [(&pair.source, &spec.source), (&pair.target, &spec.target)] {
            let top = contrast.means.0.iter().copied().fold(0.0, f64::max);
            for (&x, &l) in vol.data().iter().zip(pair.labels.labels()) {
                let expected = if l == 0 { 0.0 } else { contrast.means.0[usize::from(l) - 1] / top };
                assert!((f64::from(x) - expected).abs() < 1e-6, "{x} vs {expected}");
            }
        }
    }

    #[test]
    fn noiseless_segmentation_matches_labels() {
        let pair = generate_pair(&noiseless(small())).unwrap();
        assert_eq!(threshold_segment(&pair.source).unwrap(), pair.labels);
        assert_eq!(threshold_segment(&pair.target).unwrap(), pair.labels);
    }

    #[test]
    fn all_classes_present_and_background_zero() {
        let pair = generate_pair(&PhantomSpec::default()).unwrap();
        for t in Tissue::ALL {
            assert!(pair.labels.count(t) > 100, "{t:?}");
        }
        for (&x, &l) in pair.source.data().iter().zip(pair.labels.labels()) {
            assert_eq!(x == 0.0, l == 0);
        }
    }

    #[test]
    fn default_segmentation_is_accurate() {
        let pair = generate_pair(&PhantomSpec::default()).unwrap();
        for v in [&pair.source, &pair.target] {
            let seg = threshold_segment(v).unwrap();
            for t in Tissue::ALL {
                let d = dice(&seg, &pair.labels, t).unwrap();
                assert!(d >= 0.95, "{t:?}: dice {d}");
            }
        }
    }

    #[test]
    fn lesions_change_only_intensity() {
        let mut spec = small();
        spec.lesions.enabled = true;
        let with = generate_pair(&spec).unwrap();
        spec.lesions.enabled = false;
        let without = generate_pair(&spec).unwrap();
        assert_eq!(with.labels.labels().len(), without.labels.labels().len());
        assert_ne!(with.source, without.source);
    }

    #[test]
    fn degenerate_geometry_rejected() {
        let mut spec = small();
        spec.geometry.wm_radius = 0.9;
        assert!(matches!(generate_pair(&spec), Err(Error::InvalidArgument(_))));
        assert!(generate_pair(&PhantomSpec { dims: [2, 16, 16], ..small() }).is_err());
    }

    #[test]
    fn three_means_small_cases() {
        let km = three_means(&[0.0, 0.1, 1.0, 1.1, 5.0, 5.2]).unwrap();
        assert_eq!(km.thresholds, [0.55, 3.05]);
        assert!((km.means[2] - 5.1).abs() < 1e-12);
        assert!(three_means(&[1.0, 1.0, 2.0]).is_err());
        let exact = three_means(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(exact.means, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn segment_rejects_two_level_volume() {
        let v = Volume::new([2, 2, 1], Spacing::UNIT, vec![0.0, 0.5, 0.5, 1.0]).unwrap();
        assert!(matches!(threshold_segment(&v), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn cohort_assigns_lesions_to_last_subjects() {
        let cohort = CohortSpec::default();
        assert!(!cohort.subject(21).lesions.enabled);
        assert!(cohort.subject(22).lesions.enabled);
        assert_ne!(cohort.subject(0).seed, cohort.subject(1).seed);
        assert_eq!(CohortSpec::subject_id(0), "sub-001");
    }

    #[test]
    fn tissue_order_follows_means() {
        let mut c = ContrastSpec::source_default();
        assert_eq!(c.tissue_order(), [Tissue::Csf, Tissue::Gm, Tissue::Wm]);
        c.means = PerClass([0.9, 0.5, 0.3]);
        assert_eq!(c.tissue_order(), [Tissue::Wm, Tissue::Gm, Tissue::Csf]);
    }
}
