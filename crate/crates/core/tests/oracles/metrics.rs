//! Brute-force metric oracles on random small volumes. Each check returns
//! the number of cases it compared, or a description of the first mismatch.

use harmonize_core::metrics::{
    ahd, class_volumes, dice, hausdorff, mse, mse_with, squared_edt, volume_diff, Histogram,
    HistogramOptions, LabelVolume, MseMode, Tissue,
};
use harmonize_core::{Error, Spacing, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Outcome = Result<usize, String>;

fn random_dims(rng: &mut ChaCha8Rng) -> [usize; 3] {
    [0; 3].map(|_| rng.random_range(1..=12))
}

fn random_spacing(rng: &mut ChaCha8Rng) -> Spacing {
    Spacing::new(
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
    )
    .unwrap()
}

/// Labels in 0..=3 with random class proportions, so some classes are
/// often empty.
fn random_labels(rng: &mut ChaCha8Rng, dims: [usize; 3], spacing: Spacing) -> LabelVolume {
    let n = dims.iter().product();
    let weights: [f64; 4] = [0; 4].map(|_| rng.random_range(0.0..1.0f64).powi(3));
    let total: f64 = weights.iter().sum::<f64>() + 1e-12;
    let labels = (0..n)
        .map(|_| {
            let mut u = rng.random_range(0.0..total);
            for (l, w) in weights.iter().enumerate() {
                if u < *w {
                    return l as u8;
                }
                u -= w;
            }
            0
        })
        .collect();
    LabelVolume::new(dims, spacing, labels).unwrap()
}

fn random_volume(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Volume {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| match rng.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            2 => rng.random_range(-0.2..1.2),
            // Bin edges are the interesting boundary values.
            3 => rng.random_range(0..=255u32) as f32 / 255.0,
            _ => rng.random_range(0.0..1.0),
        })
        .collect();
    Volume::new(dims, Spacing::default(), data).unwrap()
}

fn coords(i: usize, dims: [usize; 3]) -> [usize; 3] {
    [
        i % dims[0],
        (i / dims[0]) % dims[1],
        i / (dims[0] * dims[1]),
    ]
}

fn dist2(a: [usize; 3], b: [usize; 3], s: Spacing) -> f64 {
    (0..3)
        .map(|k| ((a[k] as f64 - b[k] as f64) * s.0[k]).powi(2))
        .sum()
}

fn mask(lv: &LabelVolume, c: Tissue) -> Vec<bool> {
    lv.labels().iter().map(|&l| l == c.label()).collect()
}

fn close(got: f64, want: f64) -> bool {
    (got - want).abs() <= 1e-9 * want.abs().max(1.0)
}

fn all_pairs_hausdorff(a: &[bool], b: &[bool], dims: [usize; 3], s: Spacing) -> f64 {
    let pts = |m: &[bool]| -> Vec<[usize; 3]> {
        (0..m.len())
            .filter(|&i| m[i])
            .map(|i| coords(i, dims))
            .collect()
    };
    let (pa, pb) = (pts(a), pts(b));
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter()
            .map(|&p| {
                to.iter()
                    .map(|&q| dist2(p, q, s))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0f64, f64::max)
    };
    directed(&pa, &pb).max(directed(&pb, &pa)).sqrt()
}

/// Hausdorff distance against an all-pairs search. Counts only cases where
/// the metric is defined; empty classes must be reported as undefined.
pub fn hausdorff_cases(min_defined: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut defined = 0;
    let mut case = 0;
    while defined < min_defined {
        case += 1;
        let dims = random_dims(&mut rng);
        let s = random_spacing(&mut rng);
        let a = random_labels(&mut rng, dims, s);
        let b = random_labels(&mut rng, dims, s);
        for c in Tissue::ALL {
            let (ma, mb) = (mask(&a, c), mask(&b, c));
            match hausdorff(&a, &b, c) {
                Ok(h) => {
                    defined += 1;
                    let want = all_pairs_hausdorff(&ma, &mb, dims, s);
                    if !close(h, want) {
                        return Err(format!("case {case} {c:?}: {h} vs {want}"));
                    }
                }
                Err(Error::UndefinedMetric(_)) if !ma.contains(&true) || !mb.contains(&true) => {}
                Err(e) => return Err(format!("case {case} {c:?}: {e}")),
            }
        }
    }
    Ok(defined)
}

pub fn distance_transform_cases(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let dims = random_dims(&mut rng);
        let s = random_spacing(&mut rng);
        let n: usize = dims.iter().product();
        let p = rng.random_range(0.0..0.3);
        let m: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
        let got = squared_edt(&m, dims, s);
        let set: Vec<usize> = (0..n).filter(|&i| m[i]).collect();
        for i in 0..n {
            let want = set
                .iter()
                .map(|&j| dist2(coords(i, dims), coords(j, dims), s))
                .fold(f64::INFINITY, f64::min);
            let ok = if want.is_infinite() {
                got[i].is_infinite()
            } else {
                close(got[i], want)
            };
            if !ok {
                return Err(format!("case {case} voxel {i}: {} vs {want}", got[i]));
            }
        }
    }
    Ok(cases)
}

pub fn dice_cases(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let dims = random_dims(&mut rng);
        let s = random_spacing(&mut rng);
        let a = random_labels(&mut rng, dims, s);
        let b = random_labels(&mut rng, dims, s);
        for c in Tissue::ALL {
            let (ma, mb) = (mask(&a, c), mask(&b, c));
            let na = ma.iter().filter(|&&v| v).count();
            let nb = mb.iter().filter(|&&v| v).count();
            let both = ma.iter().zip(&mb).filter(|(x, y)| **x && **y).count();
            let want = if na + nb == 0 {
                1.0
            } else {
                2.0 * both as f64 / (na + nb) as f64
            };
            let got = dice(&a, &b, c).map_err(|e| e.to_string())?;
            if got != want {
                return Err(format!("case {case} {c:?}: {got} vs {want}"));
            }
        }
    }
    Ok(cases)
}

pub fn class_volume_cases(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let dims = random_dims(&mut rng);
        let s = random_spacing(&mut rng);
        let a = random_labels(&mut rng, dims, s);
        let b = random_labels(&mut rng, dims, s);
        let vox = s.0[0] * s.0[1] * s.0[2];
        let va = class_volumes(&a);
        let diff = volume_diff(&a, &b).map_err(|e| e.to_string())?;
        for c in Tissue::ALL {
            let count = |lv: &LabelVolume| lv.labels().iter().filter(|&&l| l == c.label()).count();
            let want = count(&a) as f64 * vox;
            let want_diff = (count(&a) as f64 - count(&b) as f64).abs() * vox;
            if !close(va[c], want) || !close(diff[c], want_diff) {
                return Err(format!(
                    "case {case} {c:?}: {} / {} vs {want} / {want_diff}",
                    va[c], diff[c]
                ));
            }
        }
    }
    Ok(cases)
}

/// Bin index found by walking the bin edges instead of dividing.
fn edge_bin(v: f64, bins: usize) -> Option<usize> {
    if !(0.0..=1.0).contains(&v) {
        return None;
    }
    let edge = |i: usize| i as f64 / bins as f64;
    (0..bins).find(|&i| v >= edge(i) && (v < edge(i + 1) || i == bins - 1))
}

pub fn ahd_cases(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = HistogramOptions::default();
    for case in 0..cases {
        let dims = random_dims(&mut rng);
        let a = random_volume(&mut rng, dims);
        let b = random_volume(&mut rng, dims);
        let recount = |v: &Volume| {
            let mut c = vec![0u64; opts.bins];
            for &x in v.data() {
                let x = f64::from(x);
                if x != 0.0 {
                    if let Some(i) = edge_bin(x, opts.bins) {
                        c[i] += 1;
                    }
                }
            }
            c
        };
        let (ca, cb) = (recount(&a), recount(&b));
        let want: u64 = ca.iter().zip(&cb).map(|(x, y)| x.abs_diff(*y)).sum();
        let ha = Histogram::of_volume(&a, opts).map_err(|e| e.to_string())?;
        let hb = Histogram::of_volume(&b, opts).map_err(|e| e.to_string())?;
        if ha.counts() != ca.as_slice() {
            return Err(format!("case {case}: bin counts differ"));
        }
        let got = ahd(&ha, &hb).map_err(|e| e.to_string())?;
        if got != want as f64 {
            return Err(format!("case {case}: {got} vs {want}"));
        }
    }
    Ok(cases)
}

pub fn mse_cases(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let dims = random_dims(&mut rng);
        let a = random_volume(&mut rng, dims);
        let b = random_volume(&mut rng, dims);
        let mut sum = 0.0;
        for i in 0..a.len() {
            let d = f64::from(a.data()[i]) - f64::from(b.data()[i]);
            sum += d * d;
        }
        let got_sum = mse_with(&a, &b, MseMode::Sum).map_err(|e| e.to_string())?;
        let got_mean = mse(&a, &b).map_err(|e| e.to_string())?;
        if !close(got_sum, sum) || !close(got_mean, sum / a.len() as f64) {
            return Err(format!("case {case}: {got_sum} vs {sum}"));
        }
    }
    Ok(cases)
}
