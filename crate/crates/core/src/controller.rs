//! Controller side: global clustering of suspicious reports (K-halving
//! K-means with an elbow stop) followed by time-domain correlation of each
//! cluster's members.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{nearest_representative, Symptom, SymptomReport, SYMPTOMS};
use crate::error::{Error, Result};
use crate::trace::VmId;

pub type Point = [f64; SYMPTOMS];

pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest representative, lowest index on ties.
pub fn nearest(p: &Point, reps: &[Point]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, r) in reps.iter().enumerate() {
        let d = sq_dist(p, r);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Seeded choice of up to `k` initial representatives: input indices with
/// pairwise distinct vectors (first occurrence of each vector is eligible).
pub fn initial_indices(points: &[Point], k: usize, seed: u64) -> Vec<usize> {
    let mut distinct: Vec<usize> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if !distinct.iter().any(|&j| points[j] == *p) {
            distinct.push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = k.min(distinct.len());
    rand::seq::index::sample(&mut rng, distinct.len(), take)
        .into_iter()
        .map(|i| distinct[i])
        .collect()
}

pub const MAX_LLOYD_ITERATIONS: usize = 100;

#[derive(Debug, Clone)]
pub struct LloydResult {
    /// Cluster index of every input point, into `representatives`.
    pub assignments: Vec<usize>,
    pub representatives: Vec<Point>,
    /// Sum of squared distances after every assignment step.
    pub objective: Vec<f64>,
    pub hit_cap: bool,
}

/// Lloyd iteration from seeded initial representatives. Empty clusters are
/// dropped rather than reseeded.
pub fn lloyd(points: &[Point], k: usize, seed: u64) -> Result<LloydResult> {
    if k == 0 || k > points.len() {
        return Err(Error::param(
            "k",
            format!("need 1 <= k <= {}, got {k}", points.len()),
        ));
    }
    let mut reps: Vec<Point> = initial_indices(points, k, seed)
        .into_iter()
        .map(|i| points[i])
        .collect();
    let mut labels: Option<Vec<usize>> = None;
    let mut objective = Vec::new();
    let mut hit_cap = true;

    for _ in 0..MAX_LLOYD_ITERATIONS {
        let assigned: Vec<usize> = points.iter().map(|p| nearest(p, &reps)).collect();
        objective.push(
            points
                .iter()
                .zip(&assigned)
                .map(|(p, &c)| sq_dist(p, &reps[c]))
                .sum(),
        );
        if labels.as_ref() == Some(&assigned) {
            hit_cap = false;
            break;
        }

        let mut sums = vec![[0.0; SYMPTOMS]; reps.len()];
        let mut counts = vec![0usize; reps.len()];
        for (p, &c) in points.iter().zip(&assigned) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut remap = vec![usize::MAX; reps.len()];
        let mut next = Vec::with_capacity(reps.len());
        for (c, (sum, &n)) in sums.iter().zip(&counts).enumerate() {
            if n > 0 {
                remap[c] = next.len();
                next.push(sum.map(|s| s / n as f64));
            }
        }
        reps = next;
        labels = Some(assigned.into_iter().map(|c| remap[c]).collect());
    }
    if hit_cap {
        log::warn!("lloyd: no convergence after {MAX_LLOYD_ITERATIONS} iterations");
    }
    let assignments = match labels {
        Some(l) if !hit_cap => l,
        // cap reached: final assignment against the last representatives
        _ => points.iter().map(|p| nearest(p, &reps)).collect(),
    };
    Ok(LloydResult {
        assignments,
        representatives: reps,
        objective,
        hit_cap,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: usize,
    pub representative: Point,
    pub members: Vec<SymptomReport>,
    pub dominant_symptom: Symptom,
}

impl Cluster {
    fn from_members(id: usize, members: Vec<SymptomReport>) -> Self {
        let n = members.len() as f64;
        let mut rep = [0.0; SYMPTOMS];
        for m in &members {
            for (r, x) in rep.iter_mut().zip(&m.s) {
                *r += x;
            }
        }
        let rep = rep.map(|r| r / n);
        Cluster {
            id,
            representative: rep,
            members,
            dominant_symptom: argmax_symptom(&rep),
        }
    }

    pub fn vms(&self) -> Vec<VmId> {
        self.members.iter().map(|m| m.vm).collect()
    }

    /// Root-mean-square distance of members to the representative.
    pub fn spread(&self) -> f64 {
        let total: f64 = self
            .members
            .iter()
            .map(|m| sq_dist(&m.s, &self.representative))
            .sum();
        (total / self.members.len() as f64).sqrt()
    }
}

/// Largest component, lowest index on ties.
pub fn argmax_symptom(p: &Point) -> Symptom {
    let mut best = 0;
    for i in 1..SYMPTOMS {
        if p[i] > p[best] {
            best = i;
        }
    }
    Symptom::ALL[best]
}

/// Groups reports into at most `k` clusters (empty ones dropped), ordered by
/// first member in input order.
pub fn kmeans(srs: &[SymptomReport], k: usize, seed: u64) -> Result<Vec<Cluster>> {
    let points: Vec<Point> = srs.iter().map(|r| r.s).collect();
    let res = lloyd(&points, k, seed)?;
    Ok(group(srs, &res.assignments))
}

fn group(srs: &[SymptomReport], assignments: &[usize]) -> Vec<Cluster> {
    let mut order: Vec<usize> = Vec::new();
    let mut buckets: Vec<Vec<SymptomReport>> = Vec::new();
    let mut slot = std::collections::HashMap::new();
    for (r, &c) in srs.iter().zip(assignments) {
        let b = *slot.entry(c).or_insert_with(|| {
            order.push(c);
            buckets.push(Vec::new());
            buckets.len() - 1
        });
        buckets[b].push(r.clone());
    }
    buckets
        .into_iter()
        .enumerate()
        .map(|(id, members)| Cluster::from_members(id, members))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub tau: f64,
    pub min_anomaly_size: usize,
    pub min_cluster_size: usize,
    pub theta: [f64; SYMPTOMS],
    /// Stop halving when |ΔCC| falls inside this band.
    pub elbow_tolerance: f64,
    /// A halving step whose clusters exceed this RMS spread is rejected and
    /// the previous clustering kept.
    pub max_cluster_spread: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            tau: 0.8,
            min_anomaly_size: 3,
            min_cluster_size: 3,
            theta: [0.5; SYMPTOMS],
            elbow_tolerance: 0.05,
            max_cluster_spread: 0.25,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::param("tau", "must lie in [0, 1]"));
        }
        if self.min_anomaly_size < 2 {
            return Err(Error::param("min_anomaly_size", "must be at least 2"));
        }
        if self.min_cluster_size < 1 {
            return Err(Error::param("min_cluster_size", "must be at least 1"));
        }
        if self.theta.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::param("theta", "thresholds must lie in [0, 1]"));
        }
        if self.elbow_tolerance.is_nan() || self.elbow_tolerance < 0.0 {
            return Err(Error::param("elbow_tolerance", "must be nonnegative"));
        }
        if self.max_cluster_spread.is_nan() || self.max_cluster_spread <= 0.0 {
            return Err(Error::param("max_cluster_spread", "must be positive"));
        }
        Ok(())
    }
}

/// Bookkeeping of one halving step.
#[derive(Debug, Clone, PartialEq)]
pub struct ElbowState {
    pub iteration: usize,
    pub k: usize,
    /// Average cluster size over nonempty clusters.
    pub cs: f64,
    pub cg: f64,
    pub cc: f64,
    /// `None` while the previous CC is zero.
    pub delta_cc: Option<f64>,
    pub max_spread: f64,
}

#[derive(Debug, Clone, Default)]
pub struct DasOutcome {
    pub clusters: Vec<Cluster>,
    pub elbow: Vec<ElbowState>,
}

/// Sort key that makes clustering independent of arrival order.
pub fn canonical_order(srs: &mut [SymptomReport]) {
    srs.sort_by(|a, b| {
        (a.agent, a.vm, a.window_index).cmp(&(b.agent, b.vm, b.window_index))
    });
}

/// Global clustering: K starts at `6 * agent_count` (capped at the input
/// size) and halves until the elbow rule stops it.
pub fn das_controller(
    srs: &[SymptomReport],
    agent_count: usize,
    seed: u64,
    cfg: &ControllerConfig,
) -> Result<DasOutcome> {
    let mut srs = srs.to_vec();
    if srs.is_empty() {
        return Ok(DasOutcome::default());
    }
    canonical_order(&mut srs);
    let n = srs.len();
    let mut k = (6 * agent_count.max(1)).min(n);
    let (mut prev_cs, mut prev_cc) = (0.0, 0.0);
    let mut out = DasOutcome::default();

    while k > 0 {
        let clusters = kmeans(&srs, k, seed)?;
        let cs = n as f64 / clusters.len() as f64;
        let cg = cs - prev_cs;
        let cc = cg / k as f64;
        let delta_cc = (prev_cc != 0.0).then(|| (cc - prev_cc) / prev_cc);
        let max_spread = clusters.iter().map(Cluster::spread).fold(0.0, f64::max);
        let state = ElbowState {
            iteration: out.elbow.len() + 1,
            k,
            cs,
            cg,
            cc,
            delta_cc,
            max_spread,
        };
        if max_spread > cfg.max_cluster_spread && !out.clusters.is_empty() {
            // halving merged dissimilar reports: keep the previous step
            out.elbow.push(state);
            break;
        }
        out.clusters = clusters;
        out.elbow.push(state);
        if delta_cc.is_some_and(|d| d.abs() <= cfg.elbow_tolerance) {
            break;
        }
        prev_cs = cs;
        prev_cc = cc;
        k /= 2;
    }
    Ok(out)
}

/// Binary indicators of the four symptoms other than the detected one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GammaVector {
    pub host: VmId,
    pub alpha: [bool; SYMPTOMS - 1],
}

impl GammaVector {
    pub fn is_zero(&self) -> bool {
        self.alpha.iter().all(|a| !a)
    }
}

/// `alpha_k` is set when symptom k reaches its threshold in any history
/// report. The detected symptom is left out.
pub fn build_gamma(
    host: VmId,
    history: &[SymptomReport],
    detected: Symptom,
    theta: &[f64; SYMPTOMS],
) -> GammaVector {
    let mut alpha = [false; SYMPTOMS - 1];
    let others = Symptom::ALL.iter().filter(|s| **s != detected);
    for (a, sym) in alpha.iter_mut().zip(others) {
        let i = sym.slot();
        *a = history.iter().any(|r| r.s[i] >= theta[i]);
    }
    GammaVector { host, alpha }
}

/// M11 / (M11 + M10 + M01); two all-zero vectors score 0.
pub fn binary_jaccard(a: &[bool], b: &[bool]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (mut m11, mut mismatch) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        match (x, y) {
            (true, true) => m11 += 1,
            (true, false) | (false, true) => mismatch += 1,
            _ => {}
        }
    }
    if m11 + mismatch == 0 {
        0.0
    } else {
        m11 as f64 / (m11 + mismatch) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyVerdict {
    pub window_index: u64,
    pub cluster_id: usize,
    pub members: Vec<VmId>,
    pub detected_symptom: Symptom,
    pub mean_pairwise_similarity: f64,
    pub dominant: Vec<(VmId, Symptom)>,
}

/// Report histories the controller pulls from agents.
pub trait HistorySource {
    fn history(&self, vm: VmId) -> Option<Vec<SymptomReport>>;
}

impl<F> HistorySource for F
where
    F: Fn(VmId) -> Option<Vec<SymptomReport>>,
{
    fn history(&self, vm: VmId) -> Option<Vec<SymptomReport>> {
        self(vm)
    }
}

fn mean_pairwise(sim: &[Vec<f64>], alive: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in alive.iter().enumerate() {
        for &j in &alive[a + 1..] {
            total += sim[i][j];
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Time-domain check of one cluster. Members with no persistent
/// co-symptoms are discarded, then the least similar member is pruned until
/// the mean pairwise similarity reaches `tau`.
pub fn tac(
    window_index: u64,
    cluster: &Cluster,
    histories: &dyn HistorySource,
    cfg: &ControllerConfig,
) -> Option<AnomalyVerdict> {
    let detected = cluster.dominant_symptom;
    let mut gammas = Vec::new();
    let mut dominant = Vec::new();
    for m in &cluster.members {
        let Some(hist) = histories.history(m.vm) else {
            log::warn!("tac: no history for vm {}, skipped", m.vm);
            continue;
        };
        let g = build_gamma(m.vm, &hist, detected, &cfg.theta);
        if !g.is_zero() {
            let dom = Symptom::from_index(nearest_representative(&m.s)).unwrap_or(detected);
            dominant.push((m.vm, dom));
            gammas.push(g);
        }
    }
    let n = gammas.len();
    let sim: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| binary_jaccard(&gammas[i].alpha, &gammas[j].alpha))
                .collect()
        })
        .collect();
    let mut alive: Vec<usize> = (0..n).collect();
    loop {
        if alive.len() < cfg.min_anomaly_size {
            return None;
        }
        let mean = mean_pairwise(&sim, &alive);
        if mean >= cfg.tau {
            return Some(AnomalyVerdict {
                window_index,
                cluster_id: cluster.id,
                members: alive.iter().map(|&i| gammas[i].host).collect(),
                detected_symptom: detected,
                mean_pairwise_similarity: mean,
                dominant: alive.iter().map(|&i| dominant[i]).collect(),
            });
        }
        let avg = |i: usize| -> f64 {
            alive.iter().filter(|&&j| j != i).map(|&j| sim[i][j]).sum::<f64>()
                / (alive.len() - 1) as f64
        };
        let mut worst = 0;
        for pos in 1..alive.len() {
            if avg(alive[pos]) < avg(alive[worst]) {
                worst = pos;
            }
        }
        alive.remove(worst);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Clusters { window: u64, clusters: Vec<ClusterSummary> },
    Verdict { window: u64, verdict: VerdictSummary },
    NoAnomaly { window: u64 },
    Throttle { window: u64, vm: VmId, factor: f64, ttl: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSummary {
    pub id: usize,
    pub dominant: Symptom,
    pub representative: Point,
    pub members: Vec<VmId>,
}

impl From<&Cluster> for ClusterSummary {
    fn from(c: &Cluster) -> Self {
        ClusterSummary {
            id: c.id,
            dominant: c.dominant_symptom,
            representative: c.representative,
            members: c.vms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerdictSummary {
    pub cluster_id: usize,
    pub symptom: Symptom,
    pub similarity: f64,
    pub members: Vec<(VmId, Symptom)>,
}

impl From<&AnomalyVerdict> for VerdictSummary {
    fn from(v: &AnomalyVerdict) -> Self {
        VerdictSummary {
            cluster_id: v.cluster_id,
            symptom: v.detected_symptom,
            similarity: v.mean_pairwise_similarity,
            members: v.dominant.clone(),
        }
    }
}

impl Event {
    pub fn window(&self) -> u64 {
        match self {
            Event::Clusters { window, .. }
            | Event::Verdict { window, .. }
            | Event::NoAnomaly { window }
            | Event::Throttle { window, .. } => *window,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Event::Clusters { .. } => "CLUSTERS",
            Event::Verdict { .. } => "VERDICT",
            Event::NoAnomaly { .. } => "NO-ANOMALY",
            Event::Throttle { .. } => "THROTTLE",
        }
    }
}

fn join<T: fmt::Display>(items: impl IntoIterator<Item = T>, sep: &str) -> String {
    items
        .into_iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(sep)
}

/// Line format: `window,TYPE,payload`.
///
/// * CLUSTERS: `id:dominant:r1 r2 r3 r4 r5:vm vm ...` joined by `|`
/// * VERDICT: `cluster:symptom:similarity:vm/symptom vm/symptom ...`
/// * NO-ANOMALY: empty payload
/// * THROTTLE: `vm,factor,ttl`
impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},", self.window(), self.kind())?;
        match self {
            Event::Clusters { clusters, .. } => {
                let body = clusters.iter().map(|c| {
                    format!(
                        "{}:{}:{}:{}",
                        c.id,
                        c.dominant.index(),
                        join(c.representative.iter().map(|x| format!("{x:.6}")), " "),
                        join(&c.members, " ")
                    )
                });
                f.write_str(&join(body, "|"))
            }
            Event::Verdict { verdict: v, .. } => write!(
                f,
                "{}:{}:{:.6}:{}",
                v.cluster_id,
                v.symptom.index(),
                v.similarity,
                join(v.members.iter().map(|(vm, s)| format!("{vm}/{}", s.index())), " ")
            ),
            Event::NoAnomaly { .. } => Ok(()),
            Event::Throttle { vm, factor, ttl, .. } => write!(f, "{vm},{factor:.6},{ttl}"),
        }
    }
}

fn symptom_field(s: &str) -> Result<Symptom> {
    s.parse::<usize>()
        .ok()
        .and_then(Symptom::from_index)
        .ok_or_else(|| Error::Parse(format!("bad symptom index `{s}`")))
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse(format!("bad number `{s}`")))
}

fn vm_list(s: &str) -> Result<Vec<VmId>> {
    s.split_whitespace().map(str::parse).collect()
}

impl std::str::FromStr for Event {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut parts = line.trim_end().splitn(3, ',');
        let window: u64 = num(parts.next().unwrap_or(""))?;
        let kind = parts.next().ok_or_else(|| Error::Parse("missing event type".into()))?;
        let payload = parts.next().unwrap_or("");
        match kind {
            "NO-ANOMALY" => Ok(Event::NoAnomaly { window }),
            "THROTTLE" => {
                let f: Vec<&str> = payload.split(',').collect();
                if f.len() != 3 {
                    return Err(Error::Parse(format!("bad THROTTLE payload `{payload}`")));
                }
                Ok(Event::Throttle {
                    window,
                    vm: f[0].parse()?,
                    factor: num(f[1])?,
                    ttl: num(f[2])?,
                })
            }
            "CLUSTERS" => {
                let mut clusters = Vec::new();
                for c in payload.split('|').filter(|c| !c.is_empty()) {
                    let f: Vec<&str> = c.split(':').collect();
                    if f.len() != 4 {
                        return Err(Error::Parse(format!("bad cluster `{c}`")));
                    }
                    let rep: Vec<f64> = f[2]
                        .split_whitespace()
                        .map(num)
                        .collect::<Result<_>>()?;
                    let representative: Point = rep
                        .try_into()
                        .map_err(|_| Error::Parse(format!("bad representative `{}`", f[2])))?;
                    clusters.push(ClusterSummary {
                        id: num(f[0])?,
                        dominant: symptom_field(f[1])?,
                        representative,
                        members: vm_list(f[3])?,
                    });
                }
                Ok(Event::Clusters { window, clusters })
            }
            "VERDICT" => {
                let f: Vec<&str> = payload.split(':').collect();
                if f.len() != 4 {
                    return Err(Error::Parse(format!("bad VERDICT payload `{payload}`")));
                }
                let members = f[3]
                    .split_whitespace()
                    .map(|m| {
                        let (vm, s) = m
                            .split_once('/')
                            .ok_or_else(|| Error::Parse(format!("bad member `{m}`")))?;
                        Ok((vm.parse()?, symptom_field(s)?))
                    })
                    .collect::<Result<_>>()?;
                Ok(Event::Verdict {
                    window,
                    verdict: VerdictSummary {
                        cluster_id: num(f[0])?,
                        symptom: symptom_field(f[1])?,
                        similarity: num(f[2])?,
                        members,
                    },
                })
            }
            other => Err(Error::Parse(format!("unknown event type `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct WindowOutcome {
    pub das: DasOutcome,
    pub verdicts: Vec<AnomalyVerdict>,
    pub events: Vec<Event>,
}

/// Seed for one window's clustering, derived from the run seed.
pub fn window_seed(seed: u64, window: u64) -> u64 {
    seed ^ window.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One reporting epoch: cluster every suspicious report of the window, run
/// TAC over clusters that are large enough, and emit events in cluster order.
pub fn process_window(
    window: u64,
    suspicious: &[SymptomReport],
    agent_count: usize,
    seed: u64,
    histories: &dyn HistorySource,
    cfg: &ControllerConfig,
) -> Result<WindowOutcome> {
    let das = das_controller(suspicious, agent_count, window_seed(seed, window), cfg)?;
    let mut events = Vec::new();
    if !das.clusters.is_empty() {
        events.push(Event::Clusters {
            window,
            clusters: das.clusters.iter().map(ClusterSummary::from).collect(),
        });
    }
    let verdicts: Vec<AnomalyVerdict> = das
        .clusters
        .iter()
        .filter(|c| c.members.len() >= cfg.min_cluster_size)
        .filter_map(|c| tac(window, c, histories, cfg))
        .collect();
    if verdicts.is_empty() {
        events.push(Event::NoAnomaly { window });
    }
    for v in &verdicts {
        events.push(Event::Verdict {
            window,
            verdict: v.into(),
        });
    }
    Ok(WindowOutcome {
        das,
        verdicts,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::AgentId;

    fn sr(vm: u32, s: Point) -> SymptomReport {
        SymptomReport {
            s,
            ..SymptomReport::zero(AgentId(0), VmId(vm), 0)
        }
    }

    #[test]
    fn kmeans_identical_inputs() {
        let v = [0.2, 0.0, 0.7, 0.0, 0.0];
        let srs: Vec<_> = (0..3).map(|i| sr(i, v)).collect();
        let c = kmeans(&srs, 1, 3).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].members.len(), 3);
        for (r, x) in c[0].representative.iter().zip(v) {
            assert!((r - x).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_rejects_large_k() {
        let srs = vec![sr(0, [0.0; 5])];
        assert!(matches!(kmeans(&srs, 2, 0), Err(Error::InvalidParameter { .. })));
        assert!(kmeans(&srs, 0, 0).is_err());
    }

    #[test]
    fn kmeans_recovers_separated_groups_for_every_seed() {
        let mut srs: Vec<_> = (0..5).map(|i| sr(i, [1.0, 0.0, 0.0, 0.0, 0.0])).collect();
        srs.extend((5..10).map(|i| sr(i, [0.0, 0.0, 0.0, 1.0, 0.0])));
        for seed in 0..200 {
            let c = kmeans(&srs, 2, seed).unwrap();
            assert_eq!(c.len(), 2, "seed {seed}");
            for cl in &c {
                let first = cl.members[0].vm.0 < 5;
                assert!(cl.members.iter().all(|m| (m.vm.0 < 5) == first));
            }
        }
    }

    #[test]
    fn das_single_report() {
        let out = das_controller(&[sr(1, [0.9, 0.0, 0.0, 0.0, 0.0])], 4, 1, &ControllerConfig::default())
            .unwrap();
        assert_eq!(out.clusters.len(), 1);
        assert_eq!(out.elbow.last().unwrap().k, 1);
    }

    #[test]
    fn das_empty_input() {
        let out = das_controller(&[], 4, 1, &ControllerConfig::default()).unwrap();
        assert!(out.clusters.is_empty());
    }

    #[test]
    fn das_identical_reports_one_cluster() {
        let srs: Vec<_> = (0..12).map(|i| sr(i, [0.0, 0.0, 0.8, 0.0, 0.0])).collect();
        let out = das_controller(&srs, 4, 9, &ControllerConfig::default()).unwrap();
        assert_eq!(out.clusters.len(), 1);
        assert_eq!(out.clusters[0].members.len(), 12);
        // all picks coincide, so every K collapses to one cluster: CS = 12 at once
        assert_eq!(out.elbow[0].cs, 12.0);
    }

    #[test]
    fn gamma_examples() {
        let theta = [0.5; 5];
        let zero = vec![sr(1, [0.0; 5]); 3];
        assert!(build_gamma(VmId(1), &zero, Symptom::Rtt, &theta).is_zero());

        let h = vec![sr(1, [0.9, 0.0, 0.7, 0.0, 0.0])];
        let g = build_gamma(VmId(1), &h, Symptom::Rtt, &theta);
        assert_eq!(g.alpha, [false, true, false, false]);

        let h = vec![sr(1, [0.0, 0.5, 0.0, 0.0, 0.0])];
        let g = build_gamma(VmId(1), &h, Symptom::Rtt, &theta);
        assert_eq!(g.alpha, [true, false, false, false]);
    }

    #[test]
    fn binary_jaccard_examples() {
        let t = true;
        let f = false;
        assert_eq!(binary_jaccard(&[t, f, t, f], &[t, f, t, f]), 1.0);
        assert_eq!(binary_jaccard(&[t, t, f, f], &[t, f, t, f]), 1.0 / 3.0);
        assert_eq!(binary_jaccard(&[f; 4], &[f; 4]), 0.0);
    }

    fn cluster_of(members: Vec<SymptomReport>) -> Cluster {
        Cluster::from_members(0, members)
    }

    #[test]
    fn tac_identical_gammas() {
        // detected symptom dupack; co-symptoms rtt and flows
        let hist = sr(0, [0.8, 0.0, 0.9, 0.6, 0.0]);
        let members: Vec<_> = (0..4).map(|i| sr(i, [0.0, 0.0, 0.9, 0.0, 0.0])).collect();
        let c = cluster_of(members);
        let hs = |_vm: VmId| Some(vec![hist.clone()]);
        let v = tac(5, &c, &hs, &ControllerConfig::default()).unwrap();
        assert_eq!(v.mean_pairwise_similarity, 1.0);
        assert_eq!(v.members.len(), 4);
        assert_eq!(v.detected_symptom, Symptom::DupAck);
    }

    #[test]
    fn tac_ephemeral_cluster() {
        let members: Vec<_> = (0..4).map(|i| sr(i, [0.0, 0.0, 0.9, 0.0, 0.0])).collect();
        let c = cluster_of(members.clone());
        let hs = move |vm: VmId| Some(vec![members[vm.0 as usize].clone()]);
        assert!(tac(5, &c, &hs, &ControllerConfig::default()).is_none());
    }

    #[test]
    fn tac_prunes_outlier() {
        // detected symptom rtt; gamma slots are rst, dupack, flows, size
        let members: Vec<_> = (0..6).map(|i| sr(i, [0.9, 0.0, 0.0, 0.0, 0.0])).collect();
        let c = cluster_of(members);
        let hs = |vm: VmId| {
            let s = if vm.0 == 3 {
                [0.9, 0.0, 0.0, 0.8, 0.8]
            } else {
                [0.9, 0.8, 0.8, 0.0, 0.0]
            };
            Some(vec![sr(vm.0, s)])
        };
        let v = tac(2, &c, &hs, &ControllerConfig::default()).unwrap();
        assert_eq!(v.members, vec![VmId(0), VmId(1), VmId(2), VmId(4), VmId(5)]);
        assert_eq!(v.mean_pairwise_similarity, 1.0);
    }

    #[test]
    fn tac_missing_history_skips_member() {
        let members: Vec<_> = (0..4).map(|i| sr(i, [0.9, 0.0, 0.0, 0.0, 0.0])).collect();
        let c = cluster_of(members);
        let hs = |vm: VmId| (vm.0 != 0).then(|| vec![sr(vm.0, [0.9, 0.7, 0.0, 0.0, 0.0])]);
        let v = tac(2, &c, &hs, &ControllerConfig::default()).unwrap();
        assert_eq!(v.members, vec![VmId(1), VmId(2), VmId(3)]);
    }

    #[test]
    fn event_lines_parse_back() {
        let events = vec![
            Event::NoAnomaly { window: 3 },
            Event::Throttle {
                window: 4,
                vm: VmId(9),
                factor: 0.5,
                ttl: 6,
            },
            Event::Clusters {
                window: 4,
                clusters: vec![ClusterSummary {
                    id: 0,
                    dominant: Symptom::DupAck,
                    representative: [0.25, 0.0, 0.75, 0.0, 0.5],
                    members: vec![VmId(1), VmId(2)],
                }],
            },
            Event::Verdict {
                window: 4,
                verdict: VerdictSummary {
                    cluster_id: 0,
                    symptom: Symptom::DupAck,
                    similarity: 0.875,
                    members: vec![(VmId(1), Symptom::DupAck), (VmId(2), Symptom::Rtt)],
                },
            },
        ];
        for e in events {
            let line = e.to_string();
            assert_eq!(line.parse::<Event>().unwrap(), e, "{line}");
        }
        assert_eq!(Event::NoAnomaly { window: 3 }.to_string(), "3,NO-ANOMALY,");
        assert!("3,BOGUS,".parse::<Event>().is_err());
    }
}
