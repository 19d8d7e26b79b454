use roadwatch::coordinator::{run_variant, Variant};
use roadwatch::scenario::Scenario;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let path = args.get(1).map(String::as_str).unwrap_or("scenarios/nominal.toml");
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let steps: Option<usize> = args.get(3).and_then(|s| s.parse().ok());
    let variant = match args.get(4).map(String::as_str) {
        Some("nmpc-only") => Variant::NmpcOnly,
        Some("mvrp-only") => Variant::MvrpOnly,
        Some("no-bound") => Variant::NoBound,
        Some("no-forks") => Variant::NoForks,
        _ => Variant::Full,
    };
    let s = Scenario::from_toml(&std::fs::read_to_string(path).unwrap()).unwrap();
    let t0 = Instant::now();
    let r = run_variant(&s, seed, steps, variant).unwrap();
    let wall = t0.elapsed().as_secs_f64();
    let max_det_post = r
        .steps
        .iter()
        .filter(|st| st.step >= r.grace)
        .flat_map(|st| st.dets.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    println!(
        "{} seed {} variant {:?}: wall {:.1}s  mean_active {:.2}  viol_frac {:.5}  zero_viol {}  success {}  uncovered {}  max_det_post_grace {:.4}  routing {:.0}ms nmpc {:.0}ms",
        s.name, seed, variant, wall, r.mean_active, r.violation_fraction,
        r.zero_violations, r.success, r.uncovered_events, max_det_post,
        r.routing_ms_total, r.nmpc_ms_total
    );
}
