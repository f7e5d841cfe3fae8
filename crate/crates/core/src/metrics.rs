//! Hard classification, confusion matrices, CSI/F1/MSE scores,
//! over/under-estimation ratios and radius-filtered case analysis.

use std::fmt::Write as _;

use thiserror::Error;

use crate::dataset::{Event, PrecipClass, LEADS, LEAD_STEP_MIN};

/// Mean Earth radius used for great-circle distances.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("no groups to average")]
    EmptyGroups,
    #[error("group {0} is empty")]
    EmptyGroup(usize),
    #[error("expected {LEADS} lead-time matrices, got {0}")]
    LeadCount(usize),
    #[error("station index {0} has no coordinates")]
    UnknownStation(usize),
}

/// Argmax over `(OTHERS, LIGHT, HEAVY)`; ties go to the more severe class.
pub fn hard_classify(probs: [f64; 3]) -> PrecipClass {
    let mut best = PrecipClass::Heavy;
    for c in [PrecipClass::Light, PrecipClass::Others] {
        if probs[c.index()] > probs[best.index()] {
            best = c;
        }
    }
    best
}

/// Counts indexed `[actual][predicted]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
    pub lead_minutes: u32,
}

impl ConfusionMatrix {
    pub fn new(lead_minutes: u32) -> Self {
        Self {
            counts: [[0; 3]; 3],
            lead_minutes,
        }
    }

    pub fn from_counts(counts: [[u64; 3]; 3], lead_minutes: u32) -> Self {
        Self { counts, lead_minutes }
    }

    pub fn add(&mut self, predicted: PrecipClass, actual: PrecipClass) {
        self.counts[actual.index()][predicted.index()] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for a in 0..3 {
            for p in 0..3 {
                self.counts[a][p] += other.counts[a][p];
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// `(TP, FP, FN)` of a binary event; RAIN merges the LIGHT and HEAVY rows and columns.
    pub fn binary(&self, event: Event) -> (u64, u64, u64) {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for a in PrecipClass::ALL {
            for p in PrecipClass::ALL {
                let n = self.counts[a.index()][p.index()];
                match (event.contains(a), event.contains(p)) {
                    (true, true) => tp += n,
                    (false, true) => fp += n,
                    (true, false) => fn_ += n,
                    (false, false) => {}
                }
            }
        }
        (tp, fp, fn_)
    }
}

/// Builds a matrix from `(predicted, actual)` pairs.
pub fn confusion_matrix(pairs: &[(PrecipClass, PrecipClass)], lead_minutes: u32) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new(lead_minutes);
    for &(p, a) in pairs {
        cm.add(p, a);
    }
    cm
}

/// TP/(TP+FP+FN), or `None` when the denominator is zero.
pub fn csi_defined(cm: &ConfusionMatrix, event: Event) -> Option<f64> {
    let (tp, fp, fn_) = cm.binary(event);
    let d = tp + fp + fn_;
    (d > 0).then(|| tp as f64 / d as f64)
}

/// TP/(TP+FP+FN), 0 when the denominator is zero.
pub fn csi_score(cm: &ConfusionMatrix, event: Event) -> f64 {
    csi_defined(cm, event).unwrap_or(0.0)
}

/// 2TP/(2TP+FP+FN), 0 when the denominator is zero.
pub fn f1_score(cm: &ConfusionMatrix, event: Event) -> f64 {
    let (tp, fp, fn_) = cm.binary(event);
    let d = 2 * tp + fp + fn_;
    if d == 0 {
        0.0
    } else {
        (2 * tp) as f64 / d as f64
    }
}

/// Fractions of pairs predicted more severe / less severe than observed.
pub fn over_under_ratios(cm: &ConfusionMatrix) -> Result<(f64, f64), MetricError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricError::EmptyMatrix);
    }
    let (mut over, mut under) = (0, 0);
    for a in 0..3 {
        for p in 0..3 {
            if p > a {
                over += cm.counts[a][p];
            } else if p < a {
                under += cm.counts[a][p];
            }
        }
    }
    Ok((over as f64 / total as f64, under as f64 / total as f64))
}

/// Mean over groups (timestamps) of the mean squared error within each group (stations).
pub fn mse(groups: &[Vec<(f64, f64)>]) -> Result<f64, MetricError> {
    if groups.is_empty() {
        return Err(MetricError::EmptyGroups);
    }
    let mut total = 0.0;
    for (i, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(MetricError::EmptyGroup(i));
        }
        total += g.iter().map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / g.len() as f64;
    }
    Ok(total / groups.len() as f64)
}

/// Great-circle distance in km between two `(lat, lon)` points in degrees.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (la1, lo1) = (a.0.to_radians(), a.1.to_radians());
    let (la2, lo2) = (b.0.to_radians(), b.1.to_radians());
    let h = ((la2 - la1) / 2.0).sin().powi(2) + la1.cos() * la2.cos() * ((lo2 - lo1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportRow {
    pub csi_rain: f64,
    pub f1_rain: f64,
    pub csi_heavy: f64,
    pub f1_heavy: f64,
}

impl ReportRow {
    pub fn from_matrix(cm: &ConfusionMatrix) -> Self {
        Self {
            csi_rain: csi_score(cm, Event::Rain),
            f1_rain: f1_score(cm, Event::Rain),
            csi_heavy: csi_score(cm, Event::Heavy),
            f1_heavy: f1_score(cm, Event::Heavy),
        }
    }

    fn values(&self) -> [f64; 4] {
        [self.csi_rain, self.f1_rain, self.csi_heavy, self.f1_heavy]
    }
}

/// Per-lead scores plus their arithmetic means.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub leads: Vec<u32>,
    pub rows: Vec<ReportRow>,
    pub average: ReportRow,
    /// Per-lead MSE for estimation reports.
    pub mse: Option<Vec<f64>>,
}

pub const REPORT_HEADER: &str = "lead_minutes,csi_rain,f1_rain,csi_heavy,f1_heavy";

impl EvalReport {
    /// One row per matrix, in the given order.
    pub fn from_matrices(matrices: &[ConfusionMatrix]) -> Self {
        let rows: Vec<ReportRow> = matrices.iter().map(ReportRow::from_matrix).collect();
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&ReportRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let average = ReportRow {
            csi_rain: mean(|r| r.csi_rain),
            f1_rain: mean(|r| r.f1_rain),
            csi_heavy: mean(|r| r.csi_heavy),
            f1_heavy: mean(|r| r.f1_heavy),
        };
        Self {
            leads: matrices.iter().map(|m| m.lead_minutes).collect(),
            rows,
            average,
            mse: None,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        if self.mse.is_some() {
            out.push_str(",mse");
        }
        out.push('\n');
        for (i, (lead, row)) in self.leads.iter().zip(&self.rows).enumerate() {
            let _ = write!(out, "{lead}");
            for v in row.values() {
                let _ = write!(out, ",{v:.6}");
            }
            if let Some(m) = &self.mse {
                let _ = write!(out, ",{:.6}", m[i]);
            }
            out.push('\n');
        }
        out.push_str("average");
        for v in self.average.values() {
            let _ = write!(out, ",{v:.6}");
        }
        if let Some(m) = &self.mse {
            let _ = write!(out, ",{:.6}", m.iter().sum::<f64>() / m.len().max(1) as f64);
        }
        out.push('\n');
        out
    }

    /// Aligned text table: one block per event, columns per lead time.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<10}", "");
        for lead in &self.leads {
            let _ = write!(out, "{:>9}", format!("{lead} min"));
        }
        let _ = writeln!(out, "{:>9}", "Average");
        let lines: [(&str, fn(&ReportRow) -> f64); 4] = [
            ("RAIN CSI", |r| r.csi_rain),
            ("RAIN F1", |r| r.f1_rain),
            ("HEAVY CSI", |r| r.csi_heavy),
            ("HEAVY F1", |r| r.f1_heavy),
        ];
        for (name, f) in lines {
            let _ = write!(out, "{name:<10}");
            for r in &self.rows {
                let _ = write!(out, "{:>9.3}", f(r));
            }
            let _ = writeln!(out, "{:>9.3}", f(&self.average));
        }
        out
    }
}

/// Per-lead confusion matrices tagged 60, 120, … minutes.
pub fn lead_matrices() -> Vec<ConfusionMatrix> {
    (1..=LEADS)
        .map(|k| ConfusionMatrix::new((k as i64 * LEAD_STEP_MIN) as u32))
        .collect()
}

/// One scored prediction for case analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseRecord {
    pub station: usize,
    /// 0-based lead index (lead time = 60·(index + 1) minutes).
    pub lead_index: usize,
    pub predicted: PrecipClass,
    pub actual: PrecipClass,
}

/// Per-lead `(CSI_RAIN, CSI_HEAVY)`; `None` marks an undefined cell.
pub type CaseScores = Vec<(Option<f64>, Option<f64>)>;

/// Scores restricted to stations within `radius_km` of `center` (`None` = all stations).
/// With no station in range every cell is undefined.
pub fn case_csi(
    records: &[CaseRecord],
    station_coords: &[(f64, f64)],
    center: (f64, f64),
    radius_km: Option<f64>,
) -> Result<CaseScores, MetricError> {
    let inside: Vec<bool> = station_coords
        .iter()
        .map(|&c| radius_km.is_none_or(|r| haversine_km(center, c) <= r))
        .collect();
    let mut matrices = lead_matrices();
    let mut any = false;
    for rec in records {
        let &ok = inside.get(rec.station).ok_or(MetricError::UnknownStation(rec.station))?;
        if ok && rec.lead_index < LEADS {
            matrices[rec.lead_index].add(rec.predicted, rec.actual);
            any = true;
        }
    }
    Ok(matrices
        .iter()
        .map(|m| {
            if any {
                (csi_defined(m, Event::Rain), csi_defined(m, Event::Heavy))
            } else {
                (None, None)
            }
        })
        .collect())
}

/// Formats a case-analysis cell; undefined cells print as 0.000.
pub fn format_case_cell(v: Option<f64>) -> String {
    format!("{:.3}", v.unwrap_or(0.0))
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn class() -> impl Strategy<Value = PrecipClass> {
        (0usize..3).prop_map(|i| PrecipClass::from_index(i).unwrap())
    }

    proptest! {
        #[test]
        fn scores_are_bounded_and_perfect_forecasts_score_one(actual in proptest::collection::vec(class(), 1..60), pred in proptest::collection::vec(class(), 60)) {
            let pairs: Vec<_> = pred.iter().copied().zip(actual.iter().copied()).collect();
            let cm = confusion_matrix(&pairs, 60);
            prop_assert_eq!(cm.total(), pairs.len() as u64);
            for e in [Event::Rain, Event::Heavy] {
                prop_assert!((0.0..=1.0).contains(&csi_score(&cm, e)));
                prop_assert!(csi_score(&cm, e) <= f1_score(&cm, e));
                let perfect: Vec<_> = actual.iter().map(|&a| (a, a)).collect();
                let pm = confusion_matrix(&perfect, 60);
                if let Some(v) = csi_defined(&pm, e) {
                    prop_assert_eq!(v, 1.0);
                }
            }
        }
    }
}
