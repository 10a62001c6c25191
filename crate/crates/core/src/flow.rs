//! Per-agent flow table and per-window raw metrics.
//!
//! The table turns a monotone stream of mirrored headers into bidirectional
//! flows, tracks triple-duplicate-ACK runs and Karn-filtered RTT samples, and
//! accumulates per-VM activity for the currently open reporting window.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::trace::{Micros, PacketHeaderRecord, Protocol, TcpFlags, VmId};

/// `a < b` in 32-bit sequence space.
pub fn seq_lt(a: u32, b: u32) -> bool {
    (a.wrapping_sub(b) as i32) < 0
}

pub fn seq_le(a: u32, b: u32) -> bool {
    a == b || seq_lt(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    pub vm: VmId,
    pub port: u16,
}

/// Bidirectional 5-tuple. The lexicographically smaller endpoint is `lo`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub lo: Endpoint,
    pub hi: Endpoint,
    pub protocol: Protocol,
}

/// Which endpoint sent a packet, relative to the canonical key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    FromLo,
    FromHi,
}

impl Direction {
    fn index(self) -> usize {
        match self {
            Direction::FromLo => 0,
            Direction::FromHi => 1,
        }
    }
}

impl FlowKey {
    pub fn new(a: Endpoint, b: Endpoint, protocol: Protocol) -> Self {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        FlowKey { lo, hi, protocol }
    }

    pub fn canonical(&self) -> Self {
        FlowKey::new(self.lo, self.hi, self.protocol)
    }

    pub fn from_packet(pkt: &PacketHeaderRecord) -> (Self, Direction) {
        let src = Endpoint {
            vm: pkt.src_vm,
            port: pkt.src_port,
        };
        let dst = Endpoint {
            vm: pkt.dst_vm,
            port: pkt.dst_port,
        };
        let key = FlowKey::new(src, dst, pkt.protocol);
        let dir = if key.lo == src {
            Direction::FromLo
        } else {
            Direction::FromHi
        };
        (key, dir)
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    start: u32,
    end: u32,
    sent_at: Micros,
    retransmitted: bool,
}

/// Per-direction TCP bookkeeping; "sender" is the endpoint this half belongs to.
#[derive(Debug, Clone, Default)]
struct HalfState {
    highest_end: Option<u32>,
    outstanding: VecDeque<Segment>,
    last_ack: Option<u32>,
    dup_count: u32,
    fin: bool,
}

#[derive(Debug, Clone)]
pub struct FlowState {
    pub key: FlowKey,
    pub first_seen: Micros,
    pub last_seen: Micros,
    pub bytes_total: u64,
    pub dup_ack_runs: u64,
    pub rst_count: u64,
    pub rtt_samples: Vec<Micros>,
    pub open: bool,
    halves: [HalfState; 2],
}

impl FlowState {
    pub fn new(key: FlowKey, ts: Micros) -> Self {
        FlowState {
            key,
            first_seen: ts,
            last_seen: ts,
            bytes_total: 0,
            dup_ack_runs: 0,
            rst_count: 0,
            rtt_samples: Vec::new(),
            open: true,
            halves: Default::default(),
        }
    }

    fn direction_of(&self, pkt: &PacketHeaderRecord) -> Direction {
        if self.key.lo.vm == pkt.src_vm && self.key.lo.port == pkt.src_port {
            Direction::FromLo
        } else {
            Direction::FromHi
        }
    }

    /// Updates the duplicate-ACK run of the sending half. Returns true when
    /// this packet is the third duplicate (fourth identical ACK) of a run.
    fn observe_dup_ack(&mut self, pkt: &PacketHeaderRecord, dir: Direction) -> bool {
        let half = &mut self.halves[dir.index()];
        let pure_ack = pkt.has(TcpFlags::ACK)
            && pkt.payload_len == 0
            && !pkt.has(TcpFlags::SYN)
            && !pkt.has(TcpFlags::FIN)
            && !pkt.has(TcpFlags::RST);
        if pure_ack && half.last_ack == Some(pkt.ack) {
            half.dup_count += 1;
            if half.dup_count == 3 {
                self.dup_ack_runs += 1;
                return true;
            }
            return false;
        }
        half.last_ack = pkt.has(TcpFlags::ACK).then_some(pkt.ack);
        half.dup_count = 0;
        false
    }

    /// Karn-filtered RTT estimation, see [`estimate_rtt`].
    fn observe_rtt(&mut self, pkt: &PacketHeaderRecord, dir: Direction) -> Option<Micros> {
        let mut sample = None;

        // The ACK side first: it acknowledges the opposite half's segments.
        if pkt.has(TcpFlags::ACK) {
            let peer = &mut self.halves[1 - dir.index()];
            while let Some(seg) = peer.outstanding.front() {
                if !seq_le(seg.end, pkt.ack) {
                    break;
                }
                let seg = peer.outstanding.pop_front().unwrap();
                if !seg.retransmitted && pkt.timestamp > seg.sent_at && sample.is_none() {
                    sample = Some(pkt.timestamp - seg.sent_at);
                }
            }
        }

        let len = pkt.payload_len
            + u32::from(pkt.has(TcpFlags::SYN))
            + u32::from(pkt.has(TcpFlags::FIN));
        if len > 0 {
            let start = pkt.seq;
            let end = pkt.seq.wrapping_add(len);
            let half = &mut self.halves[dir.index()];
            match half.highest_end {
                Some(high) if seq_lt(start, high) => {
                    for seg in half.outstanding.iter_mut() {
                        if seq_lt(start, seg.end) && seq_lt(seg.start, end) {
                            seg.retransmitted = true;
                        }
                    }
                    if seq_lt(high, end) {
                        half.highest_end = Some(end);
                    }
                }
                _ => {
                    half.outstanding.push_back(Segment {
                        start,
                        end,
                        sent_at: pkt.timestamp,
                        retransmitted: false,
                    });
                    half.highest_end = Some(end);
                }
            }
        }
        sample
    }
}

/// Emits an RTT sample when `pkt` is the first ACK covering a segment that
/// was never retransmitted. SYN and FIN occupy one sequence number, so the
/// SYN / SYN-ACK exchange yields a sample too.
///
/// When one ACK covers several segments only the oldest yields a sample.
pub fn estimate_rtt(state: &mut FlowState, pkt: &PacketHeaderRecord) -> Option<Micros> {
    if !pkt.is_tcp() {
        return None;
    }
    let dir = state.direction_of(pkt);
    state.observe_rtt(pkt, dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub vm: VmId,
    pub window_index: u64,
    pub active_flows: u64,
    pub mean_flow_size: f64,
    pub dup_ack_count: u64,
    pub rst_count: u64,
    pub rtt_samples: Vec<Micros>,
}

impl WindowMetrics {
    pub fn empty(vm: VmId, window_index: u64) -> Self {
        WindowMetrics {
            vm,
            window_index,
            active_flows: 0,
            mean_flow_size: 0.0,
            dup_ack_count: 0,
            rst_count: 0,
            rtt_samples: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FlowConfig {
    pub window_length_us: Micros,
    pub idle_timeout_us: Micros,
    pub reorder_tolerance_us: Micros,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            window_length_us: 10_000_000,
            idle_timeout_us: 60_000_000,
            reorder_tolerance_us: 1_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rejected {
    pub timestamp: Micros,
    pub latest: Micros,
}

type FlowId = u64;

#[derive(Debug, Default)]
struct VmAccumulator {
    active: BTreeSet<FlowId>,
    dup_acks: u64,
    rsts: u64,
    rtt_samples: Vec<Micros>,
}

#[derive(Debug)]
pub struct FlowTable {
    cfg: FlowConfig,
    flows: HashMap<FlowId, FlowState>,
    by_key: HashMap<FlowKey, FlowId>,
    next_id: FlowId,
    latest: Option<Micros>,
    local: Option<HashSet<VmId>>,
    acc: HashMap<VmId, VmAccumulator>,
    rejected: u64,
}

impl FlowTable {
    pub fn new(cfg: FlowConfig) -> Self {
        FlowTable {
            cfg,
            flows: HashMap::new(),
            by_key: HashMap::new(),
            next_id: 0,
            latest: None,
            local: None,
            acc: HashMap::new(),
            rejected: 0,
        }
    }

    /// Restrict window attribution to the VMs hosted behind this agent.
    pub fn with_local_vms(mut self, vms: impl IntoIterator<Item = VmId>) -> Self {
        self.local = Some(vms.into_iter().collect());
        self
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn window_of(&self, ts: Micros) -> u64 {
        ts / self.cfg.window_length_us
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn open_flows(&self) -> usize {
        self.flows.values().filter(|f| f.open).count()
    }

    pub fn flow(&self, key: &FlowKey) -> Option<&FlowState> {
        self.by_key.get(key).and_then(|id| self.flows.get(id))
    }

    fn attribute(&mut self, key: &FlowKey, f: impl Fn(&mut VmAccumulator)) {
        let vms = [key.lo.vm, key.hi.vm];
        for (i, vm) in vms.iter().enumerate() {
            if i == 1 && vms[0] == vms[1] {
                break;
            }
            if self.local.as_ref().is_some_and(|l| !l.contains(vm)) {
                continue;
            }
            f(self.acc.entry(*vm).or_default());
        }
    }

    /// Ingests one header. Records older than the newest seen timestamp by
    /// more than the reorder tolerance are rejected and counted.
    pub fn track_packet(&mut self, pkt: &PacketHeaderRecord) -> Result<(), Rejected> {
        if let Some(latest) = self.latest {
            if pkt.timestamp + self.cfg.reorder_tolerance_us < latest {
                self.rejected += 1;
                return Err(Rejected {
                    timestamp: pkt.timestamp,
                    latest,
                });
            }
        }
        self.latest = Some(self.latest.map_or(pkt.timestamp, |l| l.max(pkt.timestamp)));

        let (key, _) = FlowKey::from_packet(pkt);
        let fresh_syn = pkt.has(TcpFlags::SYN) && !pkt.has(TcpFlags::ACK);
        let id = match self.by_key.get(&key) {
            Some(&id) if self.flows[&id].open || !fresh_syn => id,
            _ => {
                let id = self.next_id;
                self.next_id += 1;
                self.flows.insert(id, FlowState::new(key, pkt.timestamp));
                self.by_key.insert(key, id);
                id
            }
        };

        let flow = self.flows.get_mut(&id).expect("flow id indexed");
        flow.last_seen = flow.last_seen.max(pkt.timestamp);
        flow.bytes_total += u64::from(pkt.payload_len);

        let mut dup_event = false;
        let mut rst = false;
        let mut sample = None;
        if pkt.is_tcp() {
            let dir = flow.direction_of(pkt);
            dup_event = flow.observe_dup_ack(pkt, dir);
            sample = flow.observe_rtt(pkt, dir);
            if let Some(s) = sample {
                flow.rtt_samples.push(s);
            }
            if pkt.has(TcpFlags::RST) {
                flow.rst_count += 1;
                flow.open = false;
                rst = true;
            }
            if pkt.has(TcpFlags::FIN) {
                flow.halves[dir.index()].fin = true;
                if flow.halves.iter().all(|h| h.fin) {
                    flow.open = false;
                }
            }
        }

        self.attribute(&key, |acc| {
            acc.active.insert(id);
            acc.dup_acks += u64::from(dup_event);
            acc.rsts += u64::from(rst);
        });
        // A sample measures the path seen by whoever sent the acked segment,
        // i.e. the receiver of this ACK; the acker's side would only see its
        // own turnaround delay.
        if let Some(s) = sample {
            let sender = pkt.dst_vm;
            if self.local.as_ref().is_none_or(|l| l.contains(&sender)) {
                self.acc.entry(sender).or_default().rtt_samples.push(s);
            }
        }
        Ok(())
    }

    /// Summarizes the VM's activity since the previous window boundary.
    /// `mean_flow_size` uses each active flow's cumulative byte count.
    pub fn close_window(&mut self, vm: VmId, window_index: u64) -> WindowMetrics {
        let Some(acc) = self.acc.remove(&vm) else {
            return WindowMetrics::empty(vm, window_index);
        };
        let active_flows = acc.active.len() as u64;
        let mean_flow_size = if active_flows == 0 {
            0.0
        } else {
            let total: u64 = acc
                .active
                .iter()
                .filter_map(|id| self.flows.get(id))
                .map(|f| f.bytes_total)
                .sum();
            total as f64 / active_flows as f64
        };
        WindowMetrics {
            vm,
            window_index,
            active_flows,
            mean_flow_size,
            dup_ack_count: acc.dup_acks,
            rst_count: acc.rsts,
            rtt_samples: acc.rtt_samples,
        }
    }

    /// Called once every hosted VM's window is closed: drops accumulators,
    /// evicts closed flows, and closes flows idle past the timeout.
    pub fn end_window(&mut self, window_index: u64) {
        self.acc.clear();
        let boundary = (window_index + 1) * self.cfg.window_length_us;
        let idle = self.cfg.idle_timeout_us;
        let by_key = &mut self.by_key;
        self.flows.retain(|id, f| {
            if f.open && f.last_seen + idle <= boundary {
                f.open = false;
            }
            if !f.open {
                if by_key.get(&f.key) == Some(id) {
                    by_key.remove(&f.key);
                }
                return false;
            }
            true
        });
    }
}
