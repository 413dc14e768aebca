//! Runtime tallies of the hypotheses behind each envelope certificate.
//!
//! Every observation is a margin `value - bound`; a negative margin is a
//! violation. A pass is evidence from the sampled evaluations, not a proof.

use std::collections::BTreeMap;

use crate::gaussian::CovarianceModel;
use crate::quadrature::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum HypothesisId {
    /// `G_F >= sigma_min^2`
    GFloor,
    /// `E[X_s X_v] >= 0` on the grid
    CovarianceNonnegative,
    /// `|f'| >= c`
    FprimeFloor,
    /// sign of `f''` agrees with the declared convexity
    FsecondSign,
    /// `h_F >= 0` (convex) or `<= 0` (concave), up to 3 standard errors
    HSign,
    /// `|sigma(t, x)| >= c`
    SigmaFloor,
    /// `|m(t, x)|` within the declared bound
    MBound,
    /// `Phi_F != 0`
    PhiNonzero,
    /// `Phi_F >= c^2 e^{-2MT} t^{2H}`, up to 3 nested standard errors
    PhiFloor,
}

impl HypothesisId {
    pub fn description(&self) -> &'static str {
        match self {
            HypothesisId::GFloor => "G_F >= sigma_min^2 on every sampled path",
            HypothesisId::CovarianceNonnegative => "E[X_s X_v] >= 0 for all grid pairs",
            HypothesisId::FprimeFloor => "|f'(x)| >= c at every evaluated point",
            HypothesisId::FsecondSign => "sign of f'' matches the declared convexity at every evaluated point",
            HypothesisId::HSign => "h-sample sign matches the convexity branch within 3 standard errors",
            HypothesisId::SigmaFloor => "|sigma(t, x)| >= c at every evaluated point",
            HypothesisId::MBound => "|m(t, x)| within the declared bound (+1e-12) at every evaluated point",
            HypothesisId::PhiNonzero => "|Phi_F| >= 1e-10 on every sampled path",
            HypothesisId::PhiFloor => "Phi_F >= c^2 e^{-2MT} t^{2H} - 3 SE_nested on every sampled path",
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AuditRecord {
    pub id: HypothesisId,
    pub description: &'static str,
    pub checked: u64,
    pub violations: u64,
    /// Smallest observed margin; `null` in JSON when nothing was checked.
    pub worst_margin: Option<f64>,
}

impl AuditRecord {
    pub fn new(id: HypothesisId) -> Self {
        Self {
            id,
            description: id.description(),
            checked: 0,
            violations: 0,
            worst_margin: None,
        }
    }

    pub fn observe(&mut self, margin: f64) {
        self.checked += 1;
        if !(margin >= 0.0) {
            self.violations += 1;
        }
        self.worst_margin = Some(match self.worst_margin {
            Some(w) if !(margin < w) => w,
            _ => margin,
        });
    }

    /// Records `count` checks at once with their worst margin.
    pub fn observe_many(&mut self, count: u64, violations: u64, worst: f64) {
        if count == 0 {
            return;
        }
        self.checked += count;
        self.violations += violations;
        self.worst_margin = Some(match self.worst_margin {
            Some(w) if !(worst < w) => w,
            _ => worst,
        });
    }

    pub fn merge(&mut self, other: &AuditRecord) {
        if let Some(w) = other.worst_margin {
            self.observe_many(other.checked, other.violations, w);
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// A set of audit records keyed by hypothesis.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Audit {
    records: BTreeMap<HypothesisId, AuditRecord>,
}

impl Audit {
    pub fn new(hypotheses: &[HypothesisId]) -> Self {
        Self {
            records: hypotheses.iter().map(|h| (*h, AuditRecord::new(*h))).collect(),
        }
    }

    /// Ignored when `id` was not declared.
    pub fn observe(&mut self, id: HypothesisId, margin: f64) {
        if let Some(r) = self.records.get_mut(&id) {
            r.observe(margin);
        }
    }

    pub fn record(&self, id: HypothesisId) -> Option<&AuditRecord> {
        self.records.get(&id)
    }

    pub fn insert(&mut self, record: AuditRecord) {
        self.records.insert(record.id, record);
    }

    /// Merges in the order given, so per-thread tallies combined in path
    /// order give the same result on any schedule.
    pub fn merge(&mut self, other: &Audit) {
        for (id, r) in &other.records {
            self.records.entry(*id).or_insert_with(|| AuditRecord::new(*id)).merge(r);
        }
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.records.values().cloned().collect()
    }

    /// True when every listed hypothesis was declared and has no violation.
    pub fn gate(&self, linked: &[HypothesisId]) -> bool {
        linked.iter().all(|id| self.records.get(id).is_some_and(|r| r.passed()))
    }

    pub fn all_passed(&self) -> bool {
        self.records.values().all(|r| r.passed())
    }
}

/// Tallies a stream of `(hypothesis, margin)` observations.
pub fn audit(observations: &[(HypothesisId, f64)], hypotheses: &[HypothesisId]) -> Vec<AuditRecord> {
    let mut a = Audit::new(hypotheses);
    for (id, m) in observations {
        a.observe(*id, *m);
    }
    a.records()
}

/// `R(s, v) >= 0` for every grid pair.
pub fn audit_covariance(cov: &CovarianceModel, grid: &TimeGrid) -> AuditRecord {
    let mut r = AuditRecord::new(HypothesisId::CovarianceNonnegative);
    let p = grid.points();
    for (i, s) in p.iter().enumerate() {
        for v in &p[i..] {
            r.observe(cov.covariance(*s, *v));
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn tallies_and_margins() {
        let recs = audit(
            &[
                (HypothesisId::GFloor, 0.5),
                (HypothesisId::GFloor, -0.1),
                (HypothesisId::GFloor, 0.0),
                (HypothesisId::MBound, 1.0),
            ],
            &[HypothesisId::GFloor],
        );
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].checked, 3);
        assert_eq!(recs[0].violations, 1);
        assert_eq!(recs[0].worst_margin, Some(-0.1));
        let mut nan = AuditRecord::new(HypothesisId::GFloor);
        nan.observe(f64::NAN);
        assert!(!nan.passed());
    }

    #[test]
    fn merge_is_order_independent_in_result() {
        let ids = [HypothesisId::GFloor, HypothesisId::HSign];
        let mut parts: Vec<Audit> = (0..4)
            .map(|k| {
                let mut a = Audit::new(&ids);
                a.observe(HypothesisId::GFloor, k as f64 - 1.5);
                a.observe(HypothesisId::HSign, 1.0);
                a
            })
            .collect();
        let mut fwd = Audit::new(&ids);
        parts.iter().for_each(|p| fwd.merge(p));
        parts.reverse();
        let mut rev = Audit::new(&ids);
        parts.iter().for_each(|p| rev.merge(p));
        assert_eq!(fwd, rev);
        assert_eq!(fwd.record(HypothesisId::GFloor).unwrap().violations, 2);
        assert!(fwd.gate(&[HypothesisId::HSign]));
        assert!(!fwd.gate(&[HypothesisId::GFloor]));
        assert!(!fwd.gate(&[HypothesisId::PhiFloor]));
    }

    #[test]
    fn covariance_audit() {
        let g = TimeGrid::uniform(1.0, 33).unwrap();
        let r = audit_covariance(&CovarianceModel::fbm(0.75).unwrap(), &g);
        assert!(r.passed());
        assert_eq!(r.checked, 33 * 34 / 2);
        let neg = CovarianceModel::Custom {
            name: "anti".into(),
            cov: Arc::new(|s: f64, t: f64| if s == t { 1.0 } else { -0.1 }),
        };
        assert!(!audit_covariance(&neg, &g).passed());
    }
}
