use std::fmt::Write;

use anyhow::Context;
use rpbt_core::verify::{run_verification, Fault, VerifyConfig, VerifyReport};

use crate::{Failure, VerifyArgs};

pub fn run(args: VerifyArgs) -> Result<(), Failure> {
    let cfg = args.config.load()?;
    cfg.validate().map_err(Failure::config)?;
    let v = VerifyConfig {
        seed: args.seed.unwrap_or(cfg.verify.seed),
        n_mdps: cfg.verify.n_mdps,
        max_states: cfg.verify.max_states,
        max_actions: cfg.verify.max_actions,
        fault: args.inject_fault.then_some(Fault::ExpansiveOperator),
        ..VerifyConfig::default()
    };
    let report = run_verification(&v);
    print!("{}", report.to_text());
    std::fs::write(&args.report, detailed(&report))
        .with_context(|| format!("cannot write report {}", args.report.display()))
        .map_err(Failure::runtime)?;
    if report.all_passed() {
        Ok(())
    } else {
        eprintln!("verification failed; details in {}", args.report.display());
        Err(Failure::verification())
    }
}

/// Every check with every recorded violation.
fn detailed(report: &VerifyReport) -> String {
    let mut out = format!("seed {}\n", report.seed);
    for c in &report.checks {
        let _ = writeln!(
            out,
            "check {} {}: {} ({} cases, worst margin {:.3e}, {} recorded violations)",
            c.id,
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.cases,
            c.worst_margin,
            c.failures.len()
        );
        for f in &c.failures {
            let _ = writeln!(out, "    {f}");
        }
    }
    out
}
