//! Scratch: list violation events (contiguous det >= gamma runs per target).

use roadwatch::coordinator::{run_variant, Variant};
use roadwatch::scenario::Scenario;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let path = &args[1];
    let seed: u64 = args[2].parse().unwrap();
    let steps: Option<usize> = args.get(3).map(|s| s.parse().unwrap());
    let scenario = Scenario::from_toml(&std::fs::read_to_string(path).unwrap()).unwrap();
    let report = run_variant(&scenario, seed, steps, Variant::Full).unwrap();
    let gamma = report.gamma;
    println!(
        "seed {seed} viol_frac {:.5} grace {}",
        report.violation_fraction, report.grace
    );
    let m = scenario.targets.count;
    for tid in 0..m {
        let mut run_start: Option<usize> = None;
        let mut peak = 0.0f64;
        let mut pre = 0.0f64;
        for s in &report.steps {
            let d = s.dets[tid];
            if d >= gamma {
                if run_start.is_none() {
                    run_start = Some(s.step);
                    peak = d;
                } else {
                    peak = peak.max(d);
                }
            } else {
                if let Some(st) = run_start.take() {
                    if s.step >= report.grace {
                        println!(
                            "t{tid} [{st}..{}) len {} peak {peak:.3} pre {pre:.4}",
                            s.step,
                            s.step - st
                        );
                    }
                }
                pre = d;
            }
        }
        if let Some(st) = run_start {
            println!("t{tid} [{st}..end) peak {peak:.3} pre {pre:.4}");
        }
    }
}
