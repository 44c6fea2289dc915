use std::time::Instant;

use reuseplan::backbone::{build_backbone, BackboneConfig};
use reuseplan::planner::CachePlan;
use reuseplan::sampler::{SampleInput, SampleSchedule};
use reuseplan::scheduler::{execute_plan, ExecuteOptions};

/// Wall time falls as more sites are reused. Each plan in the ladder drops
/// at least a fifth of the work, well above the 10% timer allowance.
#[test]
fn latency_falls_with_skip_fraction() {
    let m = build_backbone(&BackboneConfig::toy_dit(4, 32, 32, 4, 8)).unwrap();
    let s = SampleSchedule::linear(20, 1.0, 0.0).unwrap();
    let input = SampleInput::batch(m.as_ref(), 0, 1).remove(0);
    let ladder: Vec<CachePlan> = [0usize, 2, 3]
        .iter()
        .map(|&every| {
            let mut plan = CachePlan::zeros_for(m.as_ref(), &s);
            if every > 0 {
                for t in (1..19).filter(|t| t % every != 0) {
                    for l in 0..4 {
                        for f in 0..2 {
                            plan.set_site(t, l, f, true);
                        }
                    }
                }
            }
            plan
        })
        .collect();
    let mut samples = vec![Vec::new(); ladder.len()];
    for _ in 0..5 {
        for (i, plan) in ladder.iter().enumerate() {
            let start = Instant::now();
            execute_plan(m.as_ref(), &s, plan, &input, ExecuteOptions::default()).unwrap();
            samples[i].push(start.elapsed().as_secs_f64());
        }
    }
    let medians: Vec<f64> = samples
        .iter_mut()
        .map(|v| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        })
        .collect();
    for w in medians.windows(2) {
        assert!(w[1] <= w[0] * 1.10, "{medians:?}");
    }
}
