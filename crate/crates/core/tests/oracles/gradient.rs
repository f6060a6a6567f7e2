//! Central finite differences against the analytic training gradient.

use harmonize_core::predictor::{loss_gradient, BatchItem, OutputHead};
use harmonize_core::{
    rng, Activation, NetDescriptor, NoiseSchedule, ScheduleKind, Slice, SmallNet, VarianceMode,
};

pub const STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct Worst {
    pub rel: f64,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a − n| / max(|a|, |n|, floor)`. The floor keeps parameters with a
/// vanishing gradient from dividing roundoff by zero.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Checks every parameter of a net with `hidden` layers on a batch of 4×4
/// slices. Returns the worst relative error.
pub fn check(activation: Activation, head: OutputHead, hidden: &[usize], seed: u64) -> Worst {
    let sched = NoiseSchedule::new(50, ScheduleKind::Linear, VarianceMode::Posterior).unwrap();
    let desc = NetDescriptor {
        hidden: hidden.to_vec(),
        activation,
        head,
        residual_scale: 0.3,
    };
    let net = SmallNet::new(desc, seed).unwrap();
    let mut r = rng::stream(seed ^ 0x5eed);
    let mut noise = |w| Slice::from_fn(w, w, |_, _| rng::standard_normal(&mut r));
    let conditions: Vec<Slice> = (0..3).map(|_| noise(4).map(|v| v.abs().min(1.0))).collect();
    let targets: Vec<Slice> = conditions
        .iter()
        .map(|c| c.map(|v| 0.5 * v + 0.2))
        .collect();
    let epsilons: Vec<Slice> = (0..3).map(|_| noise(4)).collect();
    let ts = [1, 17, 50];
    let batch: Vec<BatchItem> = (0..3)
        .map(|i| BatchItem {
            condition: &conditions[i],
            target: &targets[i],
            t: ts[i],
            epsilon: epsilons[i].clone(),
        })
        .collect();
    let (_, grad) = loss_gradient(&net, &batch, &sched, false).unwrap();
    let loss_at = |p: &SmallNet| loss_gradient(p, &batch, &sched, false).unwrap().0;
    let mut worst = Worst {
        rel: 0.0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = net.clone();
    for i in 0..net.params().len() {
        let base = net.params()[i];
        probe.params_mut()[i] = base + STEP;
        let up = loss_at(&probe);
        probe.params_mut()[i] = base - STEP;
        let down = loss_at(&probe);
        probe.params_mut()[i] = base;
        let numeric = (up - down) / (2.0 * STEP);
        let rel = relative_error(grad[i], numeric, 1e-6);
        if rel > worst.rel {
            worst = Worst {
                rel,
                index: i,
                analytic: grad[i],
                numeric,
            };
        }
    }
    worst
}
