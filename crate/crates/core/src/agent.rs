//! Per-server agent: turns window metrics into symptom reports and filters
//! out VMs that show no dominant symptom before anything reaches the
//! controller.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowTable, Rejected, WindowMetrics};
use crate::trace::{AgentId, Micros, PacketHeaderRecord, VmId};

pub const SYMPTOMS: usize = 5;

/// Symptom slots of a report, in vector order. Indices are 1-based to match
/// the representative numbering (0 is the no-symptom representative).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Symptom {
    Rtt = 1,
    Rst = 2,
    DupAck = 3,
    Flows = 4,
    Size = 5,
}

impl Symptom {
    pub const ALL: [Symptom; SYMPTOMS] = [
        Symptom::Rtt,
        Symptom::Rst,
        Symptom::DupAck,
        Symptom::Flows,
        Symptom::Size,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Position in the report vector.
    pub fn slot(self) -> usize {
        self as usize - 1
    }

    pub fn from_index(i: usize) -> Option<Symptom> {
        Self::ALL.get(i.wrapping_sub(1)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Symptom::Rtt => "rtt",
            Symptom::Rst => "rst",
            Symptom::DupAck => "dupack",
            Symptom::Flows => "flows",
            Symptom::Size => "size",
        }
    }
}

impl fmt::Display for Symptom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Signed relative change `(cur - prev) / cur`, clamped to [-1, 1].
pub fn fluctuation(prev: f64, cur: f64) -> f64 {
    if cur == 0.0 {
        return if prev == 0.0 { 0.0 } else { -1.0 };
    }
    ((cur - prev) / cur).clamp(-1.0, 1.0)
}

/// Set Jaccard index; two empty sets are identical.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RttLabelSet(pub BTreeSet<usize>);

/// Maps each sample to its band (`boundaries` are the B-1 ascending cut
/// points; a sample equal to a cut point belongs to the upper band).
pub fn dequantize_rtt(samples: &[Micros], boundaries: &[Micros]) -> RttLabelSet {
    RttLabelSet(
        samples
            .iter()
            .map(|s| boundaries.partition_point(|b| b <= s))
            .collect(),
    )
}

/// Nearest-rank percentiles of `samples`, deduplicated into strictly
/// ascending band boundaries.
pub fn band_boundaries(samples: &[Micros], percentiles: &[f64]) -> Vec<Micros> {
    if samples.is_empty() {
        return Vec::new();
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let mut out: Vec<Micros> = Vec::with_capacity(percentiles.len());
    for p in percentiles {
        let rank = ((p / 100.0) * n as f64).ceil() as usize;
        let v = sorted[rank.clamp(1, n) - 1];
        if out.last().is_none_or(|last| *last < v) {
            out.push(v);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Saturation constant for the frequency symptoms, events per window.
    pub kappa: f64,
    pub calibration_windows: u64,
    pub band_percentiles: Vec<f64>,
    pub history_depth: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            kappa: 10.0,
            calibration_windows: 3,
            band_percentiles: vec![50.0, 90.0, 99.0],
            history_depth: 5,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::param("kappa", "must be positive"));
        }
        if self.calibration_windows == 0 {
            return Err(Error::param("calibration_windows", "must be at least 1"));
        }
        let ascending = self.band_percentiles.windows(2).all(|w| w[0] < w[1]);
        let in_range = self
            .band_percentiles
            .iter()
            .all(|p| *p > 0.0 && *p < 100.0);
        if self.band_percentiles.is_empty() || !ascending || !in_range {
            return Err(Error::param(
                "band_percentiles",
                "need strictly ascending values in (0, 100)",
            ));
        }
        if self.history_depth == 0 {
            return Err(Error::param("history_depth", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymptomReport {
    pub vm: VmId,
    pub agent: AgentId,
    pub window_index: u64,
    /// `[rtt, rst, dupack, flows, size]`, each in [0, 1].
    pub s: [f64; SYMPTOMS],
    /// Direction of the flows and size fluctuations.
    pub raw_signs: [i8; 2],
}

impl SymptomReport {
    pub fn zero(agent: AgentId, vm: VmId, window_index: u64) -> Self {
        SymptomReport {
            vm,
            agent,
            window_index,
            s: [0.0; SYMPTOMS],
            raw_signs: [0, 0],
        }
    }

    pub fn component(&self, symptom: Symptom) -> f64 {
        self.s[symptom.slot()]
    }

    /// Audit/report line: agent, vm, window, five components, two signs and
    /// the dominant symptom index (0 when filtered).
    pub fn to_line(&self, dominant: usize) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.agent,
            self.vm,
            self.window_index,
            self.s[0],
            self.s[1],
            self.s[2],
            self.s[3],
            self.s[4],
            self.raw_signs[0],
            self.raw_signs[1],
            dominant
        )
    }
}

/// Parsed report line, the inverse of [`SymptomReport::to_line`].
pub fn parse_report_line(line: &str) -> Result<(SymptomReport, usize)> {
    let f: Vec<&str> = line.trim().split(',').collect();
    if f.len() != 11 {
        return Err(Error::Parse(format!("report needs 11 fields, got {}", f.len())));
    }
    let bad = |what: &str| Error::Parse(format!("bad {what} in report `{line}`"));
    let mut s = [0.0; SYMPTOMS];
    for (i, slot) in s.iter_mut().enumerate() {
        *slot = f[3 + i].parse().map_err(|_| bad("component"))?;
    }
    let sign = |v: &str| -> Result<i8> { v.parse().map_err(|_| bad("sign")) };
    Ok((
        SymptomReport {
            agent: AgentId::from_str(f[0])?,
            vm: VmId::from_str(f[1])?,
            window_index: f[2].parse().map_err(|_| bad("window"))?,
            s,
            raw_signs: [sign(f[8])?, sign(f[9])?],
        },
        f[10].parse().map_err(|_| bad("dominant"))?,
    ))
}

fn saturate(count: u64, kappa: f64) -> f64 {
    let c = count as f64;
    c / (c + kappa)
}

fn sign_of(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Builds one report from two consecutive windows of the same VM.
///
/// Labels are `None` while RTT bands are still being calibrated, in which
/// case the RTT component is 0.
pub fn make_report(
    agent: AgentId,
    prev: &WindowMetrics,
    prev_labels: Option<&RttLabelSet>,
    cur: &WindowMetrics,
    cur_labels: Option<&RttLabelSet>,
    kappa: f64,
) -> SymptomReport {
    let s_rtt = match (prev_labels, cur_labels) {
        (Some(p), Some(c)) => 1.0 - jaccard(&p.0, &c.0),
        _ => 0.0,
    };
    let d_flows = fluctuation(prev.active_flows as f64, cur.active_flows as f64);
    let d_size = fluctuation(prev.mean_flow_size, cur.mean_flow_size);
    SymptomReport {
        vm: cur.vm,
        agent,
        window_index: cur.window_index,
        s: [
            s_rtt,
            saturate(cur.rst_count, kappa),
            saturate(cur.dup_ack_count, kappa),
            d_flows.abs(),
            d_size.abs(),
        ],
        raw_signs: [sign_of(d_flows), sign_of(d_size)],
    }
}

/// Representative index (0 = no symptom, k = k-th unity vector) nearest to
/// `s` in Euclidean distance, lowest index on ties.
pub fn nearest_representative(s: &[f64; SYMPTOMS]) -> usize {
    let mut best = 0;
    let mut best_d = s.iter().map(|x| x * x).sum::<f64>();
    for k in 1..=SYMPTOMS {
        let d: f64 = s
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let p = if i + 1 == k { 1.0 } else { 0.0 };
                (x - p) * (x - p)
            })
            .sum();
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

#[derive(Debug, Clone, Default)]
pub struct AgentDasOutput {
    pub suspicious: Vec<(SymptomReport, Symptom)>,
    pub filtered_count: usize,
}

/// Clusters reports against the six fixed representatives; the default
/// cluster is dropped and only counted.
pub fn das_agent(reports: &[SymptomReport]) -> AgentDasOutput {
    let mut out = AgentDasOutput::default();
    for r in reports {
        match Symptom::from_index(nearest_representative(&r.s)) {
            Some(sym) => out.suspicious.push((r.clone(), sym)),
            None => out.filtered_count += 1,
        }
    }
    out
}

#[derive(Debug, Default)]
struct VmState {
    calibration: Vec<Micros>,
    bands: Option<Vec<Micros>>,
    prev: Option<WindowMetrics>,
    history: VecDeque<SymptomReport>,
}

/// One agent per server. Owns its flow table and the report history of its
/// hosted VMs; nothing here is shared with other agents.
#[derive(Debug)]
pub struct Agent {
    id: AgentId,
    cfg: AgentConfig,
    table: FlowTable,
    vms: BTreeMap<VmId, VmState>,
    window: u64,
}

impl Agent {
    pub fn new(
        id: AgentId,
        hosted: impl IntoIterator<Item = VmId>,
        flow_cfg: FlowConfig,
        cfg: AgentConfig,
    ) -> Self {
        let vms: BTreeMap<VmId, VmState> =
            hosted.into_iter().map(|v| (v, VmState::default())).collect();
        let table = FlowTable::new(flow_cfg).with_local_vms(vms.keys().copied());
        Agent {
            id,
            cfg,
            table,
            vms,
            window: 0,
        }
    }

    pub fn id(&self) -> AgentId {
        self.id
    }

    pub fn hosted(&self) -> impl Iterator<Item = VmId> + '_ {
        self.vms.keys().copied()
    }

    pub fn current_window(&self) -> u64 {
        self.window
    }

    pub fn rejected(&self) -> u64 {
        self.table.rejected()
    }

    /// Ingests a header belonging to the currently open window.
    pub fn ingest(&mut self, pkt: &PacketHeaderRecord) -> std::result::Result<(), Rejected> {
        self.table.track_packet(pkt)
    }

    /// Streaming entry point: closes every window that ends before `pkt`
    /// and returns the reports produced by those closures.
    pub fn feed(&mut self, pkt: &PacketHeaderRecord) -> Vec<SymptomReport> {
        let mut out = Vec::new();
        while self.table.window_of(pkt.timestamp) > self.window {
            out.extend(self.close_window().into_iter().map(|(r, _)| r));
        }
        if let Err(rej) = self.ingest(pkt) {
            log::warn!(
                "agent {}: rejected record at {} (latest {})",
                self.id,
                rej.timestamp,
                rej.latest
            );
        }
        out
    }

    /// Closes the open window for every hosted VM and advances to the next.
    /// Returns each report together with the window's raw metrics.
    pub fn close_window(&mut self) -> Vec<(SymptomReport, WindowMetrics)> {
        let w = self.window;
        let mut out = Vec::with_capacity(self.vms.len());
        let calibrating = w + 1 < self.cfg.calibration_windows;
        for (vm, st) in self.vms.iter_mut() {
            let cur = self.table.close_window(*vm, w);
            let report = match &st.prev {
                // first window has nothing to compare against
                None => SymptomReport::zero(self.id, *vm, w),
                Some(prev) => {
                    let labels = st
                        .bands
                        .as_ref()
                        .map(|b| (dequantize_rtt(&prev.rtt_samples, b), dequantize_rtt(&cur.rtt_samples, b)));
                    make_report(
                        self.id,
                        prev,
                        labels.as_ref().map(|l| &l.0),
                        &cur,
                        labels.as_ref().map(|l| &l.1),
                        self.cfg.kappa,
                    )
                }
            };
            st.history.push_back(report.clone());
            while st.history.len() > self.cfg.history_depth {
                st.history.pop_front();
            }
            // bands freeze once the calibration period has produced samples
            if st.bands.is_none() {
                st.calibration.extend_from_slice(&cur.rtt_samples);
                if !calibrating && !st.calibration.is_empty() {
                    st.bands = Some(band_boundaries(&st.calibration, &self.cfg.band_percentiles));
                    st.calibration = Vec::new();
                }
            }
            st.prev = Some(cur.clone());
            out.push((report, cur));
        }
        self.table.end_window(w);
        self.window += 1;
        out
    }

    /// Up to `depth` most recent reports of `vm`, newest last.
    pub fn history_window(&self, vm: VmId, depth: usize) -> Result<Vec<SymptomReport>> {
        let st = self.vms.get(&vm).ok_or(Error::UnknownVm(vm.0))?;
        if st.history.is_empty() {
            return Err(Error::UnknownVm(vm.0));
        }
        let skip = st.history.len().saturating_sub(depth);
        Ok(st.history.iter().skip(skip).cloned().collect())
    }
}
