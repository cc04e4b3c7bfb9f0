//! Loan-level ingestion: origination/performance CSV files, the repaid-fraction
//! longitudinal outcome, covariate standardisation and person-period panels.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StjmError};

/// Default study length in months.
pub const DEFAULT_T_STUDY: usize = 54;

/// Numeric covariates standardised before fitting.
pub const NUMERIC_COVARIATES: [&str; 4] = ["cltv", "orig_upb", "dti", "int_rt"];

/// Every covariate name understood by [`LoanRecord::covariate`]. Indicators
/// are coded against the reference levels (multi-unit, term ≤ 15 years,
/// cash-out refinance, single borrower).
pub const ALL_COVARIATES: [&str; 9] = [
    "cltv",
    "orig_upb",
    "cnt_units1",
    "dti",
    "int_rt",
    "term_g15",
    "loan_purposeN",
    "loan_purposeP",
    "cnt_borr2",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoanPurpose {
    /// Cash-out refinance (reference level).
    #[serde(rename = "C")]
    CashOut,
    /// No cash-out refinance.
    #[serde(rename = "N")]
    NoCashOut,
    #[serde(rename = "P")]
    Purchase,
}

impl LoanPurpose {
    fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "C" | "0" => Ok(LoanPurpose::CashOut),
            "N" => Ok(LoanPurpose::NoCashOut),
            "P" => Ok(LoanPurpose::Purchase),
            other => Err(StjmError::Data(format!("unknown loan_purpose `{other}`"))),
        }
    }

    fn code(self) -> &'static str {
        match self {
            LoanPurpose::CashOut => "C",
            LoanPurpose::NoCashOut => "N",
            LoanPurpose::Purchase => "P",
        }
    }
}

/// One mortgage with its monthly balance history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoanRecord {
    pub loan_id: String,
    /// 1-based area index matching the adjacency file.
    pub area: usize,
    pub orig_date: String,
    /// Contractual term `M` in months.
    pub term: u32,
    /// Annual interest rate in percent.
    pub int_rt: f64,
    pub orig_upb: f64,
    pub cltv: f64,
    pub cnt_units: u32,
    pub dti: f64,
    pub loan_purpose: LoanPurpose,
    pub cnt_borr: u32,
    /// Unpaid balance `P_s` for months `s = 1..=t_i`.
    pub balances: Vec<f64>,
    /// `δ_i`: full prepayment observed at the last month.
    pub prepaid: bool,
}

impl LoanRecord {
    /// Observed duration `t_i`.
    pub fn duration(&self) -> usize {
        self.balances.len()
    }

    /// Monthly rate, annual percent / 100 / 12.
    pub fn monthly_rate(&self) -> f64 {
        self.int_rt / 1200.0
    }

    pub fn covariate(&self, name: &str) -> Result<f64> {
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        Ok(match name {
            "cltv" => self.cltv,
            "orig_upb" => self.orig_upb,
            "dti" => self.dti,
            "int_rt" => self.int_rt,
            "cnt_units1" => flag(self.cnt_units == 1),
            "term_g15" => flag(self.term > 180),
            "loan_purposeN" => flag(self.loan_purpose == LoanPurpose::NoCashOut),
            "loan_purposeP" => flag(self.loan_purpose == LoanPurpose::Purchase),
            "cnt_borr2" => flag(self.cnt_borr > 1),
            other => return Err(StjmError::Data(format!("unknown covariate `{other}`"))),
        })
    }

    /// Months where the balance rises or exceeds the original balance.
    pub fn balance_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut prev = self.orig_upb;
        for (k, &p) in self.balances.iter().enumerate() {
            if p > prev {
                out.push(format!(
                    "loan {}: balance rises at month {} ({} -> {})",
                    self.loan_id,
                    k + 1,
                    prev,
                    p
                ));
            }
            prev = p;
        }
        out
    }
}

/// Scaled repaid fraction `((P₀ − P_t)/P₀) · ((1+i)^M − 1)/(i·T)`.
///
/// A balance above `P₀` (capitalised arrears) yields a negative outcome; the
/// map stays affine and strictly increasing in the repaid amount.
pub fn longitudinal_outcome(p0: f64, pt: f64, i_monthly: f64, term: u32, t_study: usize) -> Result<f64> {
    if !(i_monthly > 0.0) {
        return Err(StjmError::Data(format!(
            "monthly interest rate must be positive, got {i_monthly}"
        )));
    }
    if !(p0 > 0.0) || !(pt >= 0.0) || t_study == 0 || term == 0 {
        return Err(StjmError::Data(format!(
            "invalid balances/term for outcome: P0={p0}, Pt={pt}, M={term}, T={t_study}"
        )));
    }
    let growth = (1.0 + i_monthly).powi(term as i32) - 1.0;
    Ok((p0 - pt) / p0 * growth / (i_monthly * t_study as f64))
}

/// Balance implied by an outcome value; inverse of [`longitudinal_outcome`].
pub fn balance_from_outcome(p0: f64, y: f64, i_monthly: f64, term: u32, t_study: usize) -> f64 {
    let growth = (1.0 + i_monthly).powi(term as i32) - 1.0;
    p0 * (1.0 - y * i_monthly * t_study as f64 / growth)
}

/// Closed form of the outcome for a loan paying exactly on schedule.
pub fn scheduled_outcome(i_monthly: f64, month: usize, t_study: usize) -> f64 {
    ((1.0 + i_monthly).powi(month as i32) - 1.0) / (i_monthly * t_study as f64)
}

/// Mean and sample standard deviation used to standardise one covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateStats {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

impl CovariateStats {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.sd
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

/// One loan of a person-period panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelLoan {
    pub loan_id: String,
    pub area: usize,
    pub prepaid: bool,
    /// `y_{i,s}` for `s = 1..=t_i`.
    pub y: Vec<f64>,
    /// Covariates in the order of [`PanelDataset::covariate_names`].
    pub covariates: Vec<f64>,
}

impl PanelLoan {
    pub fn duration(&self) -> usize {
        self.y.len()
    }

    /// `x_{i,s}`, 1-based `s`.
    pub fn event_at(&self, s: usize) -> bool {
        self.prepaid && s == self.y.len()
    }

    pub fn event_sequence(&self) -> Vec<u8> {
        (1..=self.duration()).map(|s| self.event_at(s) as u8).collect()
    }
}

/// Flat view of one person-period row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanelRow<'a> {
    pub loan: usize,
    pub loan_id: &'a str,
    pub s: usize,
    pub y: f64,
    pub x: bool,
    pub area: usize,
    pub covariates: &'a [f64],
}

/// Person-period table: one row per loan and month up to its observed duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    pub loans: Vec<PanelLoan>,
    pub t_study: usize,
    pub covariate_names: Vec<String>,
    pub standardization: Vec<CovariateStats>,
}

impl PanelDataset {
    pub fn new(loans: Vec<PanelLoan>, t_study: usize, covariate_names: Vec<String>) -> Result<Self> {
        let mut seen = HashMap::new();
        for (k, loan) in loans.iter().enumerate() {
            if loan.y.is_empty() {
                return Err(StjmError::Data(format!("loan {} has no observed months", loan.loan_id)));
            }
            if loan.duration() > t_study {
                return Err(StjmError::Data(format!(
                    "loan {} observed for {} months, beyond the {t_study}-month study",
                    loan.loan_id,
                    loan.duration()
                )));
            }
            if loan.covariates.len() != covariate_names.len() {
                return Err(StjmError::Data(format!(
                    "loan {} has {} covariates, expected {}",
                    loan.loan_id,
                    loan.covariates.len(),
                    covariate_names.len()
                )));
            }
            if loan.area == 0 {
                return Err(StjmError::Data(format!("loan {} has area id 0", loan.loan_id)));
            }
            if seen.insert(loan.loan_id.clone(), k).is_some() {
                return Err(StjmError::Data(format!("duplicate loan id {}", loan.loan_id)));
            }
        }
        Ok(Self {
            loans,
            t_study,
            covariate_names,
            standardization: Vec::new(),
        })
    }

    pub fn n_loans(&self) -> usize {
        self.loans.len()
    }

    pub fn n_rows(&self) -> usize {
        self.loans.iter().map(PanelLoan::duration).sum()
    }

    pub fn max_area(&self) -> usize {
        self.loans.iter().map(|l| l.area).max().unwrap_or(0)
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn rows(&self) -> impl Iterator<Item = PanelRow<'_>> + '_ {
        self.loans.iter().enumerate().flat_map(|(i, loan)| {
            (1..=loan.duration()).map(move |s| PanelRow {
                loan: i,
                loan_id: &loan.loan_id,
                s,
                y: loan.y[s - 1],
                x: loan.event_at(s),
                area: loan.area,
                covariates: &loan.covariates,
            })
        })
    }

    /// Number of loans with `t_i > t`.
    pub fn at_risk(&self, t: usize) -> usize {
        self.loans.iter().filter(|l| l.duration() > t).count()
    }
}

/// Expands loan records into the person-period panel with the requested covariates.
pub fn expand_person_period(loans: &[LoanRecord], t_study: usize, covariates: &[&str]) -> Result<PanelDataset> {
    let mut out = Vec::with_capacity(loans.len());
    for rec in loans {
        if rec.duration() > t_study {
            return Err(StjmError::Data(format!(
                "loan {} observed for {} months, beyond the {t_study}-month study",
                rec.loan_id,
                rec.duration()
            )));
        }
        let i = rec.monthly_rate();
        let y = rec
            .balances
            .iter()
            .map(|&pt| longitudinal_outcome(rec.orig_upb, pt, i, rec.term, t_study))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| StjmError::Data(format!("loan {}: {e}", rec.loan_id)))?;
        let z = covariates
            .iter()
            .map(|c| rec.covariate(c))
            .collect::<Result<Vec<_>>>()?;
        out.push(PanelLoan {
            loan_id: rec.loan_id.clone(),
            area: rec.area,
            prepaid: rec.prepaid,
            y,
            covariates: z,
        });
    }
    PanelDataset::new(out, t_study, covariates.iter().map(|s| s.to_string()).collect())
}

/// Standardises the named covariates to mean 0 and sample sd 1 over loans.
pub fn standardize(mut dataset: PanelDataset, names: &[&str]) -> Result<PanelDataset> {
    let n = dataset.n_loans();
    if n < 2 {
        return Err(StjmError::Data("standardisation needs at least two loans".into()));
    }
    for &name in names {
        let k = dataset
            .covariate_index(name)
            .ok_or_else(|| StjmError::Data(format!("covariate `{name}` not in dataset")))?;
        let mean = dataset.loans.iter().map(|l| l.covariates[k]).sum::<f64>() / n as f64;
        let var = dataset
            .loans
            .iter()
            .map(|l| (l.covariates[k] - mean).powi(2))
            .sum::<f64>()
            / (n - 1) as f64;
        let sd = var.sqrt();
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return Err(StjmError::ZeroVariance(name.to_string()));
        }
        let stats = CovariateStats {
            name: name.to_string(),
            mean,
            sd,
        };
        for l in &mut dataset.loans {
            l.covariates[k] = stats.apply(l.covariates[k]);
        }
        dataset.standardization.retain(|s| s.name != name);
        dataset.standardization.push(stats);
    }
    Ok(dataset)
}

/// Applies stored standardisation to another panel with the same covariates.
pub fn apply_standardization(mut dataset: PanelDataset, stats: &[CovariateStats]) -> Result<PanelDataset> {
    for s in stats {
        let k = dataset
            .covariate_index(&s.name)
            .ok_or_else(|| StjmError::Data(format!("covariate `{}` not in dataset", s.name)))?;
        for l in &mut dataset.loans {
            l.covariates[k] = s.apply(l.covariates[k]);
        }
    }
    dataset.standardization = stats.to_vec();
    Ok(dataset)
}

#[derive(Debug, Serialize, Deserialize)]
struct OriginationRow {
    loan_id: String,
    area: usize,
    orig_date: String,
    term: u32,
    int_rt: f64,
    orig_upb: f64,
    cltv: f64,
    cnt_units: u32,
    dti: f64,
    loan_purpose: String,
    cnt_borr: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct PerformanceRow {
    loan_id: String,
    month_index: usize,
    current_upb: f64,
    prepaid_flag: u8,
}

/// Reads the origination/performance CSV pair and joins them by loan id.
///
/// Duration and event come from each loan's last performance row. Rising
/// balances are counted in one `log::warn!` and listed at debug level, not rejected.
pub fn load_loans(origination_path: impl AsRef<Path>, performance_path: impl AsRef<Path>) -> Result<Vec<LoanRecord>> {
    let mut orig_reader = csv::Reader::from_path(origination_path)?;
    let mut order = Vec::new();
    let mut origination: HashMap<String, OriginationRow> = HashMap::new();
    for row in orig_reader.deserialize::<OriginationRow>() {
        let row = row?;
        if origination.contains_key(&row.loan_id) {
            return Err(StjmError::Data(format!("duplicate origination row for loan {}", row.loan_id)));
        }
        order.push(row.loan_id.clone());
        origination.insert(row.loan_id.clone(), row);
    }

    let mut perf: HashMap<String, BTreeMap<usize, (f64, u8)>> = HashMap::new();
    let mut orphans = Vec::new();
    let mut perf_reader = csv::Reader::from_path(performance_path)?;
    for row in perf_reader.deserialize::<PerformanceRow>() {
        let row = row?;
        if !origination.contains_key(&row.loan_id) {
            orphans.push(row.loan_id.clone());
            continue;
        }
        let months = perf.entry(row.loan_id.clone()).or_default();
        if months.insert(row.month_index, (row.current_upb, row.prepaid_flag)).is_some() {
            return Err(StjmError::Data(format!(
                "duplicate performance row for loan {} month {}",
                row.loan_id, row.month_index
            )));
        }
    }
    if !orphans.is_empty() {
        orphans.dedup();
        return Err(StjmError::Data(format!(
            "performance rows without origination record: {}",
            orphans.join(", ")
        )));
    }
    let missing: Vec<&str> = order
        .iter()
        .filter(|id| !perf.contains_key(*id))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(StjmError::Data(format!(
            "loans without performance observations: {}",
            missing.join(", ")
        )));
    }

    let mut loans = Vec::with_capacity(order.len());
    let mut flagged = 0usize;
    for id in order {
        let o = origination.remove(&id).expect("present");
        let months = perf.remove(&id).expect("present");
        let mut balances = Vec::with_capacity(months.len());
        let mut prepaid = false;
        for (expected, (&m, &(upb, flag))) in (1..).zip(months.iter()) {
            if m != expected {
                return Err(StjmError::Data(format!(
                    "loan {id}: performance months must run 1..t without gaps (found month {m}, expected {expected})"
                )));
            }
            if flag > 1 {
                return Err(StjmError::Data(format!("loan {id}: prepaid_flag must be 0 or 1")));
            }
            if flag == 1 && m != months.len() {
                return Err(StjmError::Data(format!(
                    "loan {id}: prepayment flagged at month {m} before the last observation"
                )));
            }
            prepaid = flag == 1;
            balances.push(upb);
        }
        let rec = LoanRecord {
            loan_id: id,
            area: o.area,
            orig_date: o.orig_date,
            term: o.term,
            int_rt: o.int_rt,
            orig_upb: o.orig_upb,
            cltv: o.cltv,
            cnt_units: o.cnt_units,
            dti: o.dti,
            loan_purpose: LoanPurpose::parse(&o.loan_purpose)?,
            cnt_borr: o.cnt_borr,
            balances,
            prepaid,
        };
        let warnings = rec.balance_warnings();
        if !warnings.is_empty() {
            flagged += 1;
        }
        for w in warnings {
            log::debug!("{w}");
        }
        loans.push(rec);
    }
    if flagged > 0 {
        log::warn!("{flagged} of {} loans have rising balances (details at debug level)", loans.len());
    }
    Ok(loans)
}

/// Writes loans in the format read by [`load_loans`].
pub fn write_loans(loans: &[LoanRecord], origination_path: impl AsRef<Path>, performance_path: impl AsRef<Path>) -> Result<()> {
    let mut ow = csv::Writer::from_path(origination_path)?;
    let mut pw = csv::Writer::from_path(performance_path)?;
    for l in loans {
        ow.serialize(OriginationRow {
            loan_id: l.loan_id.clone(),
            area: l.area,
            orig_date: l.orig_date.clone(),
            term: l.term,
            int_rt: l.int_rt,
            orig_upb: l.orig_upb,
            cltv: l.cltv,
            cnt_units: l.cnt_units,
            dti: l.dti,
            loan_purpose: l.loan_purpose.code().to_string(),
            cnt_borr: l.cnt_borr,
        })?;
        for (k, &b) in l.balances.iter().enumerate() {
            let last = k + 1 == l.balances.len();
            pw.serialize(PerformanceRow {
                loan_id: l.loan_id.clone(),
                month_index: k + 1,
                current_upb: b,
                prepaid_flag: (last && l.prepaid) as u8,
            })?;
        }
    }
    ow.flush()?;
    pw.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loan(id: &str, balances: Vec<f64>, prepaid: bool) -> LoanRecord {
        LoanRecord {
            loan_id: id.into(),
            area: 1,
            orig_date: "2015-06".into(),
            term: 360,
            int_rt: 4.0,
            orig_upb: 200_000.0,
            cltv: 80.0,
            cnt_units: 1,
            dti: 35.0,
            loan_purpose: LoanPurpose::Purchase,
            cnt_borr: 2,
            balances,
            prepaid,
        }
    }

    #[test]
    fn outcome_zero_when_nothing_repaid() {
        assert_eq!(longitudinal_outcome(1000.0, 1000.0, 0.003, 360, 54).unwrap(), 0.0);
    }

    #[test]
    fn outcome_rejects_non_positive_rate() {
        assert!(longitudinal_outcome(1000.0, 900.0, 0.0, 360, 54).is_err());
        assert!(longitudinal_outcome(1000.0, 900.0, -0.01, 360, 54).is_err());
    }

    #[test]
    fn outcome_golden_value() {
        // ((50000/200000)·((1+0.04/12)^360 − 1)/((0.04/12)·54)), evaluated with mpmath at 50 digits.
        let y = longitudinal_outcome(200_000.0, 150_000.0, 0.04 / 12.0, 360, 54).unwrap();
        assert!((y - 3.2131916869539595).abs() < 1e-12, "{y}");
    }

    #[test]
    fn outcome_balance_inverse() {
        let y = longitudinal_outcome(250_000.0, 201_234.5, 0.0035, 360, 54).unwrap();
        let p = balance_from_outcome(250_000.0, y, 0.0035, 360, 54);
        assert!((p - 201_234.5).abs() < 1e-8);
    }

    #[test]
    fn event_sequences() {
        let panel = expand_person_period(
            &[loan("a", vec![1.9e5; 3], true), loan("b", vec![1.9e5; 3], false)],
            54,
            &["cltv"],
        )
        .unwrap();
        assert_eq!(panel.loans[0].event_sequence(), vec![0, 0, 1]);
        assert_eq!(panel.loans[1].event_sequence(), vec![0, 0, 0]);
        assert_eq!(panel.n_rows(), 6);
        assert_eq!(panel.rows().count(), 6);
    }

    #[test]
    fn expansion_rejects_long_duration() {
        assert!(expand_person_period(&[loan("a", vec![1.9e5; 10], false)], 5, &[]).is_err());
    }

    #[test]
    fn standardize_simple() {
        let loans = (1..=3)
            .map(|k| PanelLoan {
                loan_id: k.to_string(),
                area: 1,
                prepaid: false,
                y: vec![0.0],
                covariates: vec![k as f64, 5.0],
            })
            .collect();
        let panel = PanelDataset::new(loans, 10, vec!["a".into(), "c".into()]).unwrap();
        let std = standardize(panel.clone(), &["a"]).unwrap();
        let col: Vec<f64> = std.loans.iter().map(|l| l.covariates[0]).collect();
        assert_eq!(col, vec![-1.0, 0.0, 1.0]);
        assert!(matches!(standardize(panel.clone(), &["c"]), Err(StjmError::ZeroVariance(_))));
        let again = apply_standardization(panel, &std.standardization).unwrap();
        assert_eq!(again.loans, std.loans);
    }

    #[test]
    fn dti_reference_stats() {
        let s = CovariateStats {
            name: "dti".into(),
            mean: 34.87,
            sd: 9.14,
        };
        assert!((s.apply(44.01) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn covariate_indicators() {
        let l = loan("a", vec![1.0], false);
        assert_eq!(l.covariate("cnt_units1").unwrap(), 1.0);
        assert_eq!(l.covariate("term_g15").unwrap(), 1.0);
        assert_eq!(l.covariate("loan_purposeP").unwrap(), 1.0);
        assert_eq!(l.covariate("loan_purposeN").unwrap(), 0.0);
        assert_eq!(l.covariate("cnt_borr2").unwrap(), 1.0);
        assert!(l.covariate("nope").is_err());
    }
}
