//! Throttle planning for confirmed anomalies.
//!
//! VMs whose recent reports show a producer-side signature (flow-creation
//! surge or flow-size shift) are throttled; everyone else in the verdict is
//! reported as a victim and left alone.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::agent::{Symptom, SymptomReport};
use crate::controller::{AnomalyVerdict, HistorySource};
use crate::error::{Error, Result};
use crate::trace::VmId;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MitigationConfig {
    pub enabled: bool,
    pub rho: f64,
    pub ttl_windows: u32,
    pub theta: f64,
    /// Reports (out of the history) that must carry the producer signature.
    pub min_persistence: usize,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        MitigationConfig {
            enabled: true,
            rho: 0.5,
            ttl_windows: 6,
            theta: 0.5,
            min_persistence: 2,
        }
    }
}

impl MitigationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::param("rho", "rate factor must lie in (0, 1]"));
        }
        if self.ttl_windows == 0 {
            return Err(Error::param("ttl_windows", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::param("theta", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn producer_signature(r: &SymptomReport, theta: f64) -> bool {
    let surge = r.component(Symptom::Flows) >= theta && r.raw_signs[0] > 0;
    let shift = r.component(Symptom::Size) >= theta;
    surge || shift
}

/// Splits the verdict's members into (misbehaving, victims).
pub fn classify(
    verdict: &AnomalyVerdict,
    recent: &dyn HistorySource,
    cfg: &MitigationConfig,
) -> (BTreeSet<VmId>, BTreeSet<VmId>) {
    let mut misbehaving = BTreeSet::new();
    let mut victims = BTreeSet::new();
    for &vm in &verdict.members {
        let hits = recent
            .history(vm)
            .unwrap_or_default()
            .iter()
            .filter(|r| producer_signature(r, cfg.theta))
            .count();
        if hits >= cfg.min_persistence {
            misbehaving.insert(vm);
        } else {
            victims.insert(vm);
        }
    }
    (misbehaving, victims)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThrottleAction {
    pub vm: VmId,
    pub rate_factor: f64,
    pub ttl_windows: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MitigationPlan {
    pub window_index: u64,
    pub actions: Vec<ThrottleAction>,
    pub victims: Vec<VmId>,
}

impl MitigationPlan {
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// One action per misbehaving VM at the configured rate factor.
pub fn plan(window_index: u64, misbehaving: &BTreeSet<VmId>, cfg: &MitigationConfig) -> MitigationPlan {
    MitigationPlan {
        window_index,
        actions: misbehaving
            .iter()
            .map(|&vm| ThrottleAction {
                vm,
                rate_factor: cfg.rho,
                ttl_windows: cfg.ttl_windows,
            })
            .collect(),
        victims: Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveThrottle {
    pub rate_factor: f64,
    pub remaining: u32,
}

/// TTL table of live throttles. Re-planning a throttled VM refreshes its TTL
/// and keeps the factor: throttles never compound.
///
/// A VM once classified misbehaving stays an offender: when it reappears in
/// a verdict after its throttle expired it is throttled again, even though
/// the surge that first exposed it has left the report history.
#[derive(Debug, Clone, Default)]
pub struct Mitigator {
    cfg: MitigationConfig,
    active: BTreeMap<VmId, ActiveThrottle>,
    offenders: BTreeSet<VmId>,
}

impl Mitigator {
    pub fn new(cfg: MitigationConfig) -> Self {
        Mitigator {
            cfg,
            active: BTreeMap::new(),
            offenders: BTreeSet::new(),
        }
    }

    pub fn config(&self) -> &MitigationConfig {
        &self.cfg
    }

    pub fn active(&self) -> &BTreeMap<VmId, ActiveThrottle> {
        &self.active
    }

    /// Builds the window's plan from all of its verdicts.
    pub fn on_window(
        &mut self,
        window_index: u64,
        verdicts: &[AnomalyVerdict],
        recent: &dyn HistorySource,
    ) -> MitigationPlan {
        let mut misbehaving = BTreeSet::new();
        let mut victims = BTreeSet::new();
        for v in verdicts {
            let (m, vi) = classify(v, recent, &self.cfg);
            misbehaving.extend(m);
            misbehaving.extend(vi.intersection(&self.offenders));
            victims.extend(vi);
        }
        self.offenders.extend(misbehaving.iter().copied());
        let victims: Vec<VmId> = victims.difference(&misbehaving).copied().collect();
        let mut p = plan(window_index, &misbehaving, &self.cfg);
        p.victims = victims;
        for a in &p.actions {
            self.active
                .entry(a.vm)
                .and_modify(|t| t.remaining = a.ttl_windows)
                .or_insert(ActiveThrottle {
                    rate_factor: a.rate_factor,
                    remaining: a.ttl_windows,
                });
        }
        p
    }

    /// Ages every throttle by one window and returns the VMs whose TTL ran out.
    pub fn tick(&mut self) -> Vec<VmId> {
        let mut expired = Vec::new();
        for (vm, t) in self.active.iter_mut() {
            t.remaining = t.remaining.saturating_sub(1);
            if t.remaining == 0 {
                expired.push(*vm);
            }
        }
        for vm in &expired {
            self.active.remove(vm);
        }
        expired
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::AgentId;

    fn report(vm: u32, s: [f64; 5], signs: [i8; 2]) -> SymptomReport {
        SymptomReport {
            s,
            raw_signs: signs,
            ..SymptomReport::zero(AgentId(0), VmId(vm), 0)
        }
    }

    fn verdict(members: &[u32]) -> AnomalyVerdict {
        AnomalyVerdict {
            window_index: 7,
            cluster_id: 0,
            members: members.iter().map(|&v| VmId(v)).collect(),
            detected_symptom: Symptom::DupAck,
            mean_pairwise_similarity: 1.0,
            dominant: vec![],
        }
    }

    fn histories(vm: VmId) -> Option<Vec<SymptomReport>> {
        let quiet = report(vm.0, [0.0; 5], [0, 0]);
        Some(match vm.0 {
            // persistent flow surge
            1 => vec![report(1, [0.0, 0.0, 0.0, 0.8, 0.0], [1, 0]); 5],
            // congestion sufferer
            2 => vec![report(2, [0.9, 0.0, 0.8, 0.0, 0.0], [0, 0]); 5],
            // single spike
            3 => {
                let mut h = vec![quiet; 4];
                h.push(report(3, [0.0, 0.0, 0.0, 0.9, 0.9], [1, 1]));
                h
            }
            // flow collapse is not a producer signature
            4 => vec![report(4, [0.0, 0.0, 0.0, 0.9, 0.0], [-1, 0]); 5],
            _ => vec![quiet; 5],
        })
    }

    #[test]
    fn classify_examples() {
        let (m, v) = classify(&verdict(&[1, 2, 3, 4]), &histories, &MitigationConfig::default());
        assert_eq!(m, [VmId(1)].into());
        assert_eq!(v, [VmId(2), VmId(3), VmId(4)].into());
    }

    #[test]
    fn classify_is_pure() {
        let v = verdict(&[1, 2, 3]);
        let cfg = MitigationConfig::default();
        assert_eq!(classify(&v, &histories, &cfg), classify(&v, &histories, &cfg));
    }

    #[test]
    fn plan_examples() {
        let cfg = MitigationConfig::default();
        assert!(plan(1, &BTreeSet::new(), &cfg).is_empty());
        let p = plan(1, &[VmId(1), VmId(2), VmId(3)].into(), &cfg);
        assert_eq!(p.actions.len(), 3);
        assert!(p.actions.iter().all(|a| a.rate_factor == 0.5 && a.ttl_windows == 6));
    }

    #[test]
    fn throttles_refresh_without_compounding() {
        let mut m = Mitigator::new(MitigationConfig::default());
        let v = [verdict(&[1, 2])];
        m.on_window(1, &v, &histories);
        m.tick();
        m.tick();
        assert_eq!(m.active()[&VmId(1)].remaining, 4);
        let p = m.on_window(3, &v, &histories);
        assert_eq!(p.actions[0].rate_factor, 0.5);
        assert_eq!(p.victims, vec![VmId(2)]);
        let t = m.active()[&VmId(1)];
        assert_eq!(t.rate_factor, 0.5);
        assert_eq!(t.remaining, 6);
        assert!(!m.active().contains_key(&VmId(2)));
    }

    #[test]
    fn ttl_expiry() {
        let cfg = MitigationConfig {
            ttl_windows: 2,
            ..Default::default()
        };
        let mut m = Mitigator::new(cfg);
        m.on_window(0, &[verdict(&[1])], &histories);
        assert!(m.tick().is_empty());
        assert_eq!(m.tick(), vec![VmId(1)]);
        assert!(m.active().is_empty());
    }

    #[test]
    fn offenders_are_throttled_again_after_expiry() {
        let cfg = MitigationConfig {
            ttl_windows: 1,
            ..Default::default()
        };
        let mut m = Mitigator::new(cfg);
        m.on_window(0, &[verdict(&[1])], &histories);
        assert_eq!(m.tick(), vec![VmId(1)]);
        // the surge has aged out of the history by now
        let quiet = |vm: VmId| Some(vec![report(vm.0, [0.0, 0.0, 0.9, 0.0, 0.0], [0, 0]); 5]);
        let p = m.on_window(5, &[verdict(&[1, 2])], &quiet);
        assert_eq!(p.actions.iter().map(|a| a.vm).collect::<Vec<_>>(), vec![VmId(1)]);
        assert_eq!(p.victims, vec![VmId(2)]);
    }

    #[test]
    fn rejects_zero_rate() {
        let cfg = MitigationConfig {
            rho: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
