//! Episode result serialization: a per-step CSV trace and a JSON summary
//! with the scenario configuration echoed back for reproducibility.

use crate::coordinator::EpisodeReport;
use crate::scenario::Scenario;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

/// Per-step trace: step index, per-target determinants, active fleet size,
/// per-robot assignment counts. Timing fields stay out of the CSV so equal
/// runs produce byte-equal traces.
pub fn csv_string(report: &EpisodeReport) -> String {
    let targets = report.steps.first().map_or(0, |s| s.dets.len());
    let robots = report
        .steps
        .first()
        .map_or(0, |s| s.assigned_counts.len());
    let mut out = String::new();
    out.push_str("step");
    for t in 0..targets {
        let _ = write!(out, ",det_{t}");
    }
    out.push_str(",active");
    for r in 0..robots {
        let _ = write!(out, ",assigned_{r}");
    }
    out.push('\n');
    for s in &report.steps {
        let _ = write!(out, "{}", s.step);
        for d in &s.dets {
            let _ = write!(out, ",{d}");
        }
        let _ = write!(out, ",{}", s.active_count);
        for c in &s.assigned_counts {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Timings {
    pub routing_ms_total: f64,
    pub nmpc_ms_total: f64,
    pub routing_ms_per_solve: f64,
    pub nmpc_ms_per_solve: f64,
}

/// Episode summary serialized to JSON next to the CSV trace.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub variant: String,
    pub seed: u64,
    pub gamma: f64,
    pub grace: usize,
    pub steps: usize,
    pub mean_active: f64,
    pub violation_fraction: f64,
    pub zero_violations: bool,
    pub success: bool,
    pub uncovered_events: usize,
    pub timings: Timings,
    /// SHA-256 of the scenario TOML this episode ran with.
    pub config_digest: String,
    pub config: Scenario,
}

pub fn summary(report: &EpisodeReport, scenario: &Scenario) -> Summary {
    let toml = scenario.to_toml();
    let digest = hex(&Sha256::digest(toml.as_bytes()));
    let routing_solves = report
        .steps
        .iter()
        .filter(|s| s.routing_ms > 0.0)
        .count()
        .max(1);
    let nmpc_solves = report
        .steps
        .iter()
        .filter(|s| s.nmpc_ms > 0.0)
        .count()
        .max(1);
    Summary {
        scenario: report.scenario.clone(),
        variant: report.variant.label().to_string(),
        seed: report.seed,
        gamma: report.gamma,
        grace: report.grace,
        steps: report.steps.len(),
        mean_active: report.mean_active,
        violation_fraction: report.violation_fraction,
        zero_violations: report.zero_violations,
        success: report.success,
        uncovered_events: report.uncovered_events,
        timings: Timings {
            routing_ms_total: report.routing_ms_total,
            nmpc_ms_total: report.nmpc_ms_total,
            routing_ms_per_solve: report.routing_ms_total / routing_solves as f64,
            nmpc_ms_per_solve: report.nmpc_ms_total / nmpc_solves as f64,
        },
        config_digest: digest,
        config: scenario.clone(),
    }
}

pub fn summary_json(report: &EpisodeReport, scenario: &Scenario) -> String {
    serde_json::to_string_pretty(&summary(report, scenario)).expect("summary serializes")
}

/// Everything an episode produced except wall-clock timings; equal seeds and
/// scenarios must yield byte-equal fingerprints.
pub fn determinism_fingerprint(report: &EpisodeReport, scenario: &Scenario) -> String {
    let mut s = summary(report, scenario);
    s.timings = Timings {
        routing_ms_total: 0.0,
        nmpc_ms_total: 0.0,
        routing_ms_per_solve: 0.0,
        nmpc_ms_per_solve: 0.0,
    };
    let mut out = csv_string(report);
    out.push_str(&serde_json::to_string(&s).expect("summary serializes"));
    let _ = write!(out, "{:?}", report.final_poses);
    out
}

/// Writes `<name>.csv` and `<name>.json` under `dir`, creating it if needed;
/// returns the two paths.
pub fn write_outputs(
    dir: &Path,
    report: &EpisodeReport,
    scenario: &Scenario,
) -> io::Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let stem = format!(
        "{}_{}_seed{}",
        report.scenario,
        report.variant.label(),
        report.seed
    );
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(&csv_path, csv_string(report))?;
    std::fs::write(&json_path, summary_json(report, scenario))?;
    Ok((csv_path, json_path))
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}
