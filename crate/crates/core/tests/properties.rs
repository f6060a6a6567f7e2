use harmonize_core::metrics::{
    ahd, dice, hausdorff, mse, Histogram, HistogramOptions, LabelVolume, Tissue,
};
use harmonize_core::phantom::{generate_pair, PhantomSpec};
use harmonize_core::predictor::OutputHead;
use harmonize_core::volume::{preprocess, slice_sagittal, stack_sagittal};
use harmonize_core::{
    hvol, q_sample, Activation, Checkpoint, Direction, NetDescriptor, NoiseSchedule, Precision,
    ScheduleKind, Slice, SmallNet, Spacing, VarianceMode, Volume,
};
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = ScheduleKind> {
    prop_oneof![Just(ScheduleKind::Linear), Just(ScheduleKind::Cosine)]
}

fn dims() -> impl Strategy<Value = [usize; 3]> {
    [1usize..7, 1usize..7, 1usize..7]
}

fn spacing() -> impl Strategy<Value = Spacing> {
    (0.3f64..3.0, 0.3f64..3.0, 0.3f64..3.0).prop_map(|(a, b, c)| Spacing::new(a, b, c).unwrap())
}

fn volume() -> impl Strategy<Value = Volume> {
    (dims(), spacing()).prop_flat_map(|(d, s)| {
        let n: usize = d.iter().product();
        prop::collection::vec(prop_oneof![Just(0.0f32), 0.0f32..=1.0], n)
            .prop_map(move |data| Volume::new(d, s, data).unwrap())
    })
}

fn volume_pair() -> impl Strategy<Value = (Volume, Volume)> {
    volume().prop_flat_map(|a| {
        let n = a.len();
        let (d, s) = (a.dims(), a.spacing());
        prop::collection::vec(0.0f32..=1.0, n)
            .prop_map(move |data| (a.clone(), Volume::new(d, s, data).unwrap()))
    })
}

fn label_pair() -> impl Strategy<Value = (LabelVolume, LabelVolume)> {
    (dims(), spacing()).prop_flat_map(|(d, s)| {
        let n: usize = d.iter().product();
        (
            prop::collection::vec(0u8..4, n),
            prop::collection::vec(0u8..4, n),
        )
            .prop_map(move |(a, b)| {
                (
                    LabelVolume::new(d, s, a).unwrap(),
                    LabelVolume::new(d, s, b).unwrap(),
                )
            })
    })
}

proptest! {
    #[test]
    fn alpha_bar_is_the_product_of_alphas(steps in 1usize..1500, kind in kind()) {
        let s = NoiseSchedule::new(steps, kind, VarianceMode::Posterior).unwrap();
        let mut log_sum = 0.0;
        for t in 1..=steps {
            log_sum += s.alpha(t).ln();
            let want = log_sum.exp();
            prop_assert!((s.alpha_bar(t) - want).abs() <= 1e-10 * want);
        }
    }

    #[test]
    fn coefficients_are_monotone(steps in 2usize..1500, kind in kind()) {
        let s = NoiseSchedule::new(steps, kind, VarianceMode::Posterior).unwrap();
        for t in 2..=steps {
            prop_assert!(s.signal_scale(t) < s.signal_scale(t - 1));
            prop_assert!(s.noise_scale(t) > s.noise_scale(t - 1));
        }
    }

    #[test]
    fn posterior_variance_is_at_most_beta(steps in 2usize..1500, kind in kind()) {
        let s = NoiseSchedule::new(steps, kind, VarianceMode::Posterior).unwrap();
        for t in 2..=steps {
            let want = s.beta(t) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t));
            prop_assert!((s.sigma(t).powi(2) - want).abs() <= 1e-12 * want.max(1e-300));
            prop_assert!(s.sigma(t).powi(2) <= s.beta(t) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn q_sample_is_affine_in_its_inputs(
        x in prop::collection::vec(-1.0f64..1.0, 12),
        e in prop::collection::vec(-3.0f64..3.0, 12),
        t in 1usize..=100,
    ) {
        let s = NoiseSchedule::new(100, ScheduleKind::Cosine, VarianceMode::Posterior).unwrap();
        let x0 = Slice::new(3, 4, x).unwrap();
        let eps = Slice::new(3, 4, e).unwrap();
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        for i in 0..12 {
            let want = s.signal_scale(t) * x0.data()[i] + s.noise_scale(t) * eps.data()[i];
            prop_assert!((xt.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn slicing_then_stacking_is_exact(v in volume()) {
        let v = v.with_tags("S", "sub-001");
        let back = stack_sagittal(&slice_sagittal(&v), v.spacing(), "S", "sub-001").unwrap();
        prop_assert_eq!(back, v);
    }

    #[test]
    fn preprocessing_is_idempotent_and_keeps_geometry(v in volume(), p in 0.0f64..0.2) {
        let Ok(once) = preprocess(&v, p) else { return Ok(()); };
        prop_assert_eq!(once.dims(), v.dims());
        prop_assert_eq!(once.spacing(), v.spacing());
        let (lo, hi) = once.min_max();
        prop_assert!(lo == 0.0 && hi == 1.0);
        // Clipped values are tied at the extremes, so a second pass clips
        // nothing and only rounding can move a value.
        let twice = preprocess(&once, p).unwrap();
        let worst = once.data().iter().zip(twice.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        prop_assert!(worst <= 1e-6, "moved by {}", worst);
    }

    #[test]
    fn hvol_round_trip(v in volume()) {
        // The format stores spacing at single precision.
        let s = v.spacing().0.map(|x| f64::from(x as f32));
        let v = Volume::new(v.dims(), Spacing(s), v.data().to_vec()).unwrap().with_tags("T", "sub-042");
        prop_assert_eq!(hvol::from_bytes(&hvol::to_bytes(&v)).unwrap(), v);
    }

    #[test]
    fn overlap_metrics_are_symmetric((a, b) in label_pair()) {
        for c in Tissue::ALL {
            prop_assert_eq!(dice(&a, &b, c).unwrap(), dice(&b, &a, c).unwrap());
            let d = dice(&a, &b, c).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            match (hausdorff(&a, &b, c), hausdorff(&b, &a, c)) {
                (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "hausdorff defined in one order only"),
            }
        }
        prop_assert_eq!(dice(&a, &a, Tissue::Gm).unwrap(), 1.0);
    }

    #[test]
    fn ahd_is_a_metric_on_counts((a, b) in volume_pair(), c in volume()) {
        let o = HistogramOptions::default();
        let (ha, hb) = (Histogram::of_volume(&a, o).unwrap(), Histogram::of_volume(&b, o).unwrap());
        let hc = Histogram::of_volume(&c, o).unwrap();
        prop_assert_eq!(ahd(&ha, &ha).unwrap(), 0.0);
        prop_assert_eq!(ahd(&ha, &hb).unwrap(), ahd(&hb, &ha).unwrap());
        prop_assert!(ahd(&ha, &hc).unwrap() <= ahd(&ha, &hb).unwrap() + ahd(&hb, &hc).unwrap());
        let nonzero = a.data().iter().filter(|&&x| x != 0.0).count() as u64;
        prop_assert_eq!(ha.total(), nonzero);
    }

    #[test]
    fn mse_is_zero_exactly_for_equal_volumes((a, b) in volume_pair()) {
        let m = mse(&a, &b).unwrap();
        prop_assert!(m >= 0.0);
        prop_assert_eq!(m == 0.0, a.data() == b.data());
        prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn checkpoint_round_trip(
        hidden in prop::collection::vec(1usize..5, 1..3),
        seed in any::<u64>(),
        head in 0u8..4,
        reverse in any::<bool>(),
    ) {
        let desc = NetDescriptor {
            hidden,
            activation: Activation::Silu,
            head: OutputHead::from_code(head).unwrap(),
            residual_scale: 0.25,
        };
        let ckpt = Checkpoint {
            direction: if reverse { Direction::TargetToSource } else { Direction::SourceToTarget },
            schedule: harmonize_core::ScheduleSpec::default(),
            precision: Precision::F64,
            net: SmallNet::new(desc, seed).unwrap(),
        };
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        prop_assert!(back.ensure_direction(ckpt.direction).is_ok());
        prop_assert!(back.ensure_direction(ckpt.direction.reversed()).is_err());
        prop_assert_eq!(back, ckpt);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn phantom_contrasts_share_labels_but_not_histograms(seed in any::<u64>()) {
        let spec = PhantomSpec { dims: [16, 16, 16], seed, ..PhantomSpec::default() };
        let a = generate_pair(&spec).unwrap();
        let b = generate_pair(&spec).unwrap();
        prop_assert_eq!(&a, &b);
        let o = HistogramOptions::default();
        let d = ahd(&Histogram::of_volume(&a.source, o).unwrap(), &Histogram::of_volume(&a.target, o).unwrap()).unwrap();
        prop_assert!(d > 0.0);
        let nonzero = |v: &Volume| v.data().iter().map(|&x| x != 0.0).collect::<Vec<_>>();
        let brain: Vec<bool> = a.labels.labels().iter().map(|&l| l != 0).collect();
        prop_assert_eq!(nonzero(&a.source), brain.clone());
        prop_assert_eq!(nonzero(&a.target), brain);
    }
}
