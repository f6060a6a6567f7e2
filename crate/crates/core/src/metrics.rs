//! Image and segmentation agreement metrics, and their aggregation across
//! cross-validation folds.

use std::io::Write;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::predictor::Direction;
use crate::volume::{Spacing, Volume};

/// Number of histogram bins used for AHD.
pub const HISTOGRAM_BINS: usize = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MseMode {
    /// Average over voxels.
    #[default]
    Mean,
    /// Plain sum of squared differences.
    Sum,
}

pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    mse_with(a, b, MseMode::Mean)
}

pub fn mse_with(a: &Volume, b: &Volume, mode: MseMode) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(invalid(format!(
            "mse needs equal dims, got {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum();
    Ok(match mode {
        MseMode::Mean => sum / a.len() as f64,
        MseMode::Sum => sum,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistogramOptions {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
    /// Count voxels that are exactly zero. Off by default so the background
    /// does not swamp the first bin.
    pub include_zero: bool,
}

impl Default for HistogramOptions {
    fn default() -> Self {
        Self {
            bins: HISTOGRAM_BINS,
            lo: 0.0,
            hi: 1.0,
            include_zero: false,
        }
    }
}

/// Uniform-bin intensity histogram. Bins are half-open except the last,
/// which also holds `hi`. Values outside `[lo, hi]` are not counted.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    counts: Vec<u64>,
    lo: f64,
    hi: f64,
    include_zero: bool,
}

impl Histogram {
    pub fn empty(options: HistogramOptions) -> Result<Self> {
        if options.bins == 0 {
            return Err(invalid("histogram needs at least one bin"));
        }
        if !(options.lo.is_finite() && options.hi.is_finite() && options.lo < options.hi) {
            return Err(invalid(format!(
                "histogram range [{}, {}] is empty",
                options.lo, options.hi
            )));
        }
        Ok(Self {
            counts: vec![0; options.bins],
            lo: options.lo,
            hi: options.hi,
            include_zero: options.include_zero,
        })
    }

    pub fn of_volume(v: &Volume, options: HistogramOptions) -> Result<Self> {
        let mut h = Self::empty(options)?;
        for &x in v.data() {
            h.add(f64::from(x));
        }
        Ok(h)
    }

    /// Counts one value if it is in range (and nonzero unless zeros are included).
    pub fn add(&mut self, value: f64) {
        if value == 0.0 && !self.include_zero {
            return;
        }
        if let Some(i) = self.bin_of(value) {
            self.counts[i] += 1;
        }
    }

    pub fn bin_of(&self, value: f64) -> Option<usize> {
        if !(value >= self.lo && value <= self.hi) {
            return None;
        }
        let n = self.counts.len();
        let mut pos = (((value - self.lo) / (self.hi - self.lo) * n as f64).floor() as usize).min(n - 1);
        // The division can land one bin off next to an edge.
        if pos > 0 && value < self.edge(pos) {
            pos -= 1;
        } else if pos + 1 < n && value >= self.edge(pos + 1) {
            pos += 1;
        }
        Some(pos)
    }

    /// Lower edge of bin `i`.
    fn edge(&self, i: usize) -> f64 {
        self.lo + (self.hi - self.lo) * i as f64 / self.counts.len() as f64
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_centers(&self) -> impl Iterator<Item = f64> + '_ {
        let width = (self.hi - self.lo) / self.bins() as f64;
        (0..self.bins()).map(move |i| self.lo + (i as f64 + 0.5) * width)
    }

    /// Two-column CSV: `bin_center,count`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_center", "count"]).map_err(csv_error)?;
        for (c, n) in self.bin_centers().zip(&self.counts) {
            w.write_record([c.to_string(), n.to_string()])
                .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Absolute histogram difference: the L1 distance between bin counts.
pub fn ahd(h1: &Histogram, h2: &Histogram) -> Result<f64> {
    if h1.bins() != h2.bins() || h1.range() != h2.range() {
        return Err(invalid(format!(
            "histograms differ in layout: {} bins on {:?} vs {} bins on {:?}",
            h1.bins(),
            h1.range(),
            h2.bins(),
            h2.range()
        )));
    }
    Ok(h1
        .counts
        .iter()
        .zip(&h2.counts)
        .map(|(&a, &b)| a.abs_diff(b) as f64)
        .sum())
}

/// AHD between the default histograms of two volumes.
pub fn volume_ahd(a: &Volume, b: &Volume, options: HistogramOptions) -> Result<f64> {
    ahd(&Histogram::of_volume(a, options)?, &Histogram::of_volume(b, options)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tissue {
    Csf = 1,
    Gm = 2,
    Wm = 3,
}

impl Tissue {
    pub const ALL: [Tissue; 3] = [Tissue::Csf, Tissue::Gm, Tissue::Wm];

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Tissue::Csf => "csf",
            Tissue::Gm => "gm",
            Tissue::Wm => "wm",
        }
    }

    fn slot(self) -> usize {
        self as usize - 1
    }
}

/// One value per tissue class, indexable by [`Tissue`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerClass<T>(pub [T; 3]);

impl<T> Index<Tissue> for PerClass<T> {
    type Output = T;
    fn index(&self, t: Tissue) -> &T {
        &self.0[t.slot()]
    }
}

impl<T> IndexMut<Tissue> for PerClass<T> {
    fn index_mut(&mut self, t: Tissue) -> &mut T {
        &mut self.0[t.slot()]
    }
}

impl<T> PerClass<T> {
    pub fn try_from_fn<E>(mut f: impl FnMut(Tissue) -> std::result::Result<T, E>) -> std::result::Result<Self, E> {
        let [a, b, c] = Tissue::ALL;
        Ok(PerClass([f(a)?, f(b)?, f(c)?]))
    }
}

/// Segmentation labels: 0 background, then [`Tissue`] codes. Same voxel
/// order as [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    spacing: Spacing,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], spacing: Spacing, labels: Vec<u8>) -> Result<Self> {
        spacing.validate()?;
        let n: usize = dims.iter().product();
        if n == 0 || labels.len() != n {
            return Err(invalid(format!(
                "label volume {dims:?} needs {n} > 0 labels, got {}",
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l > Tissue::Wm.label()) {
            return Err(invalid(format!("label {} at index {i} out of range", labels[i])));
        }
        Ok(Self {
            dims,
            spacing,
            labels,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn count(&self, class: Tissue) -> usize {
        self.labels.iter().filter(|&&l| l == class.label()).count()
    }

    /// Labels as float voxels, for storage in volume files.
    pub fn to_volume(&self) -> Volume {
        let data = self.labels.iter().map(|&l| f32::from(l)).collect();
        Volume::new(self.dims, self.spacing, data)
            .expect("label geometry already validated")
            .with_tags("labels", "")
    }

    /// Inverse of [`LabelVolume::to_volume`]; every voxel must hold a label code.
    pub fn from_volume(v: &Volume) -> Result<Self> {
        let labels = v
            .data()
            .iter()
            .map(|&x| match x {
                0.0 => Ok(0),
                1.0 => Ok(1),
                2.0 => Ok(2),
                3.0 => Ok(3),
                other => Err(invalid(format!("{other} is not a label code"))),
            })
            .collect::<Result<_>>()?;
        Self::new(v.dims(), v.spacing(), labels)
    }

    fn mask(&self, class: Tissue) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class.label()).collect()
    }
}

/// Volume of each class in mm³.
pub fn class_volumes(lv: &LabelVolume) -> PerClass<f64> {
    let mut counts = [0usize; 3];
    for &l in &lv.labels {
        if l > 0 {
            counts[usize::from(l) - 1] += 1;
        }
    }
    let vox = lv.spacing.voxel_volume();
    PerClass(counts.map(|c| c as f64 * vox))
}

/// Per-class absolute volume difference in mm³.
pub fn volume_diff(a: &LabelVolume, b: &LabelVolume) -> Result<PerClass<f64>> {
    if a.spacing != b.spacing {
        return Err(invalid(format!(
            "volume difference needs equal spacing, got {:?} and {:?}",
            a.spacing.0, b.spacing.0
        )));
    }
    let (va, vb) = (class_volumes(a), class_volumes(b));
    Ok(PerClass(std::array::from_fn(|i| (va.0[i] - vb.0[i]).abs())))
}

fn ensure_same_dims(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims != b.dims {
        return Err(invalid(format!(
            "label volumes differ in dims: {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    Ok(())
}

/// Dice overlap of one class. Two empty masks score 1.
pub fn dice(a: &LabelVolume, b: &LabelVolume, class: Tissue) -> Result<f64> {
    ensure_same_dims(a, b)?;
    let c = class.label();
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        let (ia, ib) = (x == c, y == c);
        na += usize::from(ia);
        nb += usize::from(ib);
        both += usize::from(ia && ib);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Exact symmetric Hausdorff distance in mm between the voxel centres of one
/// class in each volume.
pub fn hausdorff(a: &LabelVolume, b: &LabelVolume, class: Tissue) -> Result<f64> {
    ensure_same_dims(a, b)?;
    if a.spacing != b.spacing {
        return Err(invalid("hausdorff needs equal spacing"));
    }
    let (ma, mb) = (a.mask(class), b.mask(class));
    if !ma.contains(&true) || !mb.contains(&true) {
        return Err(Error::UndefinedMetric(format!(
            "hausdorff: class {} is empty in one volume",
            class.name()
        )));
    }
    let to_b = squared_edt(&mb, a.dims, a.spacing);
    let to_a = squared_edt(&ma, a.dims, a.spacing);
    let directed = |from: &[bool], dist: &[f64]| {
        from.iter()
            .zip(dist)
            .filter(|(m, _)| **m)
            .map(|(_, d)| *d)
            .fold(0.0f64, f64::max)
    };
    Ok(directed(&ma, &to_b).max(directed(&mb, &to_a)).sqrt())
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest set voxel
/// of `mask`, by separable lower envelopes of parabolas along each axis.
pub fn squared_edt(mask: &[bool], dims: [usize; 3], spacing: Spacing) -> Vec<f64> {
    let mut d: Vec<f64> = mask
        .iter()
        .map(|&m| if m { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let longest = dims.iter().copied().max().unwrap_or(0);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut scratch = Envelope::with_capacity(longest);
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for i in 0..dims[o1] {
            for j in 0..dims[o2] {
                let base = i * strides[o1] + j * strides[o2];
                for k in 0..n {
                    line[k] = d[base + k * stride];
                }
                scratch.transform(&line[..n], spacing.0[axis], &mut out[..n]);
                for k in 0..n {
                    d[base + k * stride] = out[k];
                }
            }
        }
    }
    d
}

struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self {
            sites: Vec::with_capacity(n),
            bounds: Vec::with_capacity(n + 1),
        }
    }

    /// `out[q] = min_p (s·(q − p))² + f[p]` over finite `f[p]`.
    fn transform(&mut self, f: &[f64], s: f64, out: &mut [f64]) {
        self.sites.clear();
        self.bounds.clear();
        let s2 = s * s;
        let key = |p: usize| f[p] + s2 * (p * p) as f64;
        for q in (0..f.len()).filter(|&q| f[q].is_finite()) {
            let mut cross = f64::NEG_INFINITY;
            while let Some(&p) = self.sites.last() {
                cross = (key(q) - key(p)) / (2.0 * s2 * (q - p) as f64);
                if cross <= *self.bounds.last().expect("bound per site") {
                    self.sites.pop();
                    self.bounds.pop();
                    cross = f64::NEG_INFINITY;
                } else {
                    break;
                }
            }
            self.sites.push(q);
            self.bounds.push(cross);
        }
        if self.sites.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while k + 1 < self.sites.len() && self.bounds[k + 1] < q as f64 {
                k += 1;
            }
            let p = self.sites[k];
            let dq = s * (q as f64 - p as f64);
            *o = dq * dq + f[p];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Unharmonized input compared with the reference.
    #[serde(rename = "original")]
    Original,
    /// Diffusion-model output compared with the reference.
    #[serde(rename = "dm")]
    Diffusion,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Original => "original",
            Method::Diffusion => "dm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub volume_diff_mm3: f64,
    pub dice: f64,
    /// Missing when the class is empty in either segmentation.
    pub hausdorff_mm: Option<f64>,
}

/// Metrics of one compared volume pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub subject_id: String,
    pub direction: Direction,
    pub method: Method,
    pub mse: f64,
    pub ahd: f64,
    pub classes: PerClass<ClassMetrics>,
}

/// Column names of the per-pair CSV, in order.
pub const REPORT_COLUMNS: [&str; 14] = [
    "subject_id",
    "direction",
    "method",
    "mse",
    "ahd",
    "csf_voldiff_mm3",
    "gm_voldiff_mm3",
    "wm_voldiff_mm3",
    "dice_csf",
    "dice_gm",
    "dice_wm",
    "hd_csf",
    "hd_gm",
    "hd_wm",
];

/// Number of numeric metric columns.
pub const METRIC_COUNT: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub mse_mode: MseMode,
    pub histogram: HistogramOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mse_mode: MseMode::Mean,
            histogram: HistogramOptions::default(),
        }
    }
}

/// Scores `candidate` against `reference`, with their segmentations.
pub fn evaluate_pair(
    candidate: &Volume,
    reference: &Volume,
    candidate_labels: &LabelVolume,
    reference_labels: &LabelVolume,
    options: &EvalOptions,
) -> Result<(f64, f64, PerClass<ClassMetrics>)> {
    let mse = mse_with(candidate, reference, options.mse_mode)?;
    let ahd = volume_ahd(candidate, reference, options.histogram)?;
    let diffs = volume_diff(candidate_labels, reference_labels)?;
    let classes = PerClass::try_from_fn(|c| {
        let hausdorff_mm = match hausdorff(candidate_labels, reference_labels, c) {
            Ok(h) => Some(h),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(ClassMetrics {
            volume_diff_mm3: diffs[c],
            dice: dice(candidate_labels, reference_labels, c)?,
            hausdorff_mm,
        })
    })?;
    Ok((mse, ahd, classes))
}

impl PairRecord {
    /// Numeric metrics in CSV column order.
    pub fn values(&self) -> [Option<f64>; METRIC_COUNT] {
        let c = &self.classes;
        let [csf, gm, wm] = Tissue::ALL;
        [
            Some(self.mse),
            Some(self.ahd),
            Some(c[csf].volume_diff_mm3),
            Some(c[gm].volume_diff_mm3),
            Some(c[wm].volume_diff_mm3),
            Some(c[csf].dice),
            Some(c[gm].dice),
            Some(c[wm].dice),
            c[csf].hausdorff_mm,
            c[gm].hausdorff_mm,
            c[wm].hausdorff_mm,
        ]
    }
}

/// Per-pair records of one fold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fold: usize,
    pub records: Vec<PairRecord>,
}

impl MetricsReport {
    /// One CSV row per record under [`REPORT_COLUMNS`]; missing values are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_COLUMNS).map_err(csv_error)?;
        for r in &self.records {
            let mut row = vec![
                r.subject_id.clone(),
                r.direction.tag().to_string(),
                r.method.tag().to_string(),
            ];
            row.extend(
                r.values()
                    .iter()
                    .map(|v| v.map(|x| x.to_string()).unwrap_or_default()),
            );
            w.write_record(&row).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean of every metric over the records of one direction and method.
    /// A metric with no present values is `None`.
    pub fn group_means(&self, direction: Direction, method: Method) -> Option<[Option<f64>; METRIC_COUNT]> {
        let group: Vec<_> = self
            .records
            .iter()
            .filter(|r| r.direction == direction && r.method == method)
            .map(PairRecord::values)
            .collect();
        if group.is_empty() {
            return None;
        }
        Some(std::array::from_fn(|m| {
            let present: Vec<f64> = group.iter().filter_map(|v| v[m]).collect();
            (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
        }))
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format {
        format: "csv",
        reason: e.to_string(),
    }
}

/// Mean and population variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub variance: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Stat { mean, variance })
    }
}

/// Fold-level statistics of one (direction, method) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub direction: Direction,
    pub method: Method,
    pub folds: usize,
    /// Keyed by metric column name; `None` if no fold had the metric.
    pub metrics: Vec<(String, Option<Stat>)>,
}

impl GroupSummary {
    pub fn get(&self, metric: &str) -> Option<Stat> {
        self.metrics
            .iter()
            .find(|(name, _)| name == metric)
            .and_then(|(_, s)| *s)
    }
}

/// Mean and population variance of the per-fold means, for every group
/// present in any report. Groups are ordered by (direction, method).
pub fn aggregate_folds(reports: &[MetricsReport]) -> Result<Vec<GroupSummary>> {
    if reports.is_empty() {
        return Err(invalid("no fold reports to aggregate"));
    }
    let mut groups: Vec<(Direction, Method)> = reports
        .iter()
        .flat_map(|r| r.records.iter().map(|p| (p.direction, p.method)))
        .collect();
    groups.sort_by_key(|(d, m)| (d.tag(), *m));
    groups.dedup();
    Ok(groups
        .into_iter()
        .map(|(direction, method)| {
            let fold_means: Vec<_> = reports
                .iter()
                .filter_map(|r| r.group_means(direction, method))
                .collect();
            let metrics = REPORT_COLUMNS[3..]
                .iter()
                .enumerate()
                .map(|(m, name)| {
                    let vals: Vec<f64> = fold_means.iter().filter_map(|f| f[m]).collect();
                    (name.to_string(), Stat::of(&vals))
                })
                .collect();
            GroupSummary {
                direction,
                method,
                folds: fold_means.len(),
                metrics,
            }
        })
        .collect())
}
