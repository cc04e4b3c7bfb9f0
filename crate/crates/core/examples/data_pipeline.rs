//! Round-trips simulated loans through the CSV layout, expands them into
//! person-months and standardises the covariates.

use stjm::data::{expand_person_period, load_loans, longitudinal_outcome, standardize, write_loans};
use stjm::simulate::{simulate_temporal, to_loan_records, SimConfig};

fn main() -> stjm::Result<()> {
    let cfg = SimConfig {
        n_loans: 200,
        seed: Some(11),
        ..SimConfig::default()
    };
    let (data, _) = simulate_temporal(&cfg)?;
    let dir = std::env::temp_dir().join("stjm-data-pipeline");
    std::fs::create_dir_all(&dir)?;
    let (orig, perf) = (dir.join("origination.csv"), dir.join("performance.csv"));
    write_loans(&to_loan_records(&data), &orig, &perf)?;

    let loans = load_loans(&orig, &perf)?;
    let first = &loans[0];
    println!("loan {} in area {}: {} months observed, prepaid = {}", first.loan_id, first.area, first.duration(), first.prepaid);
    for (s, p) in first.balances.iter().enumerate().take(3) {
        let y = longitudinal_outcome(first.orig_upb, *p, first.monthly_rate(), first.term, cfg.t_study)?;
        println!("  month {}: balance {p:.2}, outcome y = {y:.6}", s + 1);
    }

    let panel = expand_person_period(&loans, cfg.t_study, &["cltv", "dti"])?;
    let panel = standardize(panel, &["cltv", "dti"])?;
    println!("{} person-month rows, {} at risk after month 24", panel.n_rows(), panel.at_risk(24));
    for s in &panel.standardization {
        println!("  {}: mean {:.3}, sd {:.3}", s.name, s.mean, s.sd);
    }
    Ok(())
}
