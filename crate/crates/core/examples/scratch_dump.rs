use roadwatch::coordinator::run_variant;
use roadwatch::coordinator::Variant;
use roadwatch::report::write_outputs;
use roadwatch::scenario::Scenario;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let path = args.get(1).map(String::as_str).unwrap_or("scenarios/nominal.toml");
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let steps: Option<usize> = args.get(3).and_then(|s| s.parse().ok());
    let s = Scenario::from_toml(&std::fs::read_to_string(path).unwrap()).unwrap();
    let r = run_variant(&s, seed, steps, Variant::Full).unwrap();
    let (csv, json) = write_outputs(std::path::Path::new("/tmp/dump"), &r, &s).unwrap();
    println!("{} {}", csv.display(), json.display());
}
