//! End-to-end runs: open-loop simulation to files, detection over trace
//! files, closed-loop simulation with mitigation, and scoring against ground
//! truth.
//!
//! Output directory layout:
//!
//! ```text
//! traces/agent-<id>.trace   packet headers, one file per agent
//! traces/trace_meta.toml    window length, window count, agent -> VMs
//! traces/ground_truth.csv   vm,onset_window,phase,role
//! events.log                controller events, one per line
//! reports.log               every symptom report
//! summary.txt               key = value lines
//! manifest.txt              sha256 and path of every file above
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{das_agent, nearest_representative, Agent, SymptomReport};
use crate::config::{DetectorConfig, RunConfig};
use crate::controller::{process_window, AnomalyVerdict, Event};
use crate::error::{Error, Result};
use crate::flow::WindowMetrics;
use crate::mitigation::{Mitigator, ThrottleAction};
use crate::sim::{self, GroundTruth, Role, ScenarioSpec, Simulator, TrafficModelParams};
use crate::trace::{read_trace, AgentId, Micros, PacketHeaderRecord, VmId};

pub const TRACE_DIR: &str = "traces";
pub const META_FILE: &str = "trace_meta.toml";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const EVENTS_FILE: &str = "events.log";
pub const REPORTS_FILE: &str = "reports.log";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMeta {
    pub id: u32,
    pub vms: Vec<u32>,
}

/// What a detector needs to know about a trace directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub scenario: String,
    pub window_length_us: Micros,
    pub total_windows: u64,
    pub vm_count: u32,
    #[serde(rename = "agent")]
    pub agents: Vec<AgentMeta>,
}

impl TraceMeta {
    pub fn from_spec(spec: &ScenarioSpec) -> Self {
        TraceMeta {
            scenario: spec.name.to_string(),
            window_length_us: spec.window_length_us,
            total_windows: spec.total_windows,
            vm_count: spec.vm_count,
            agents: spec
                .topology()
                .into_iter()
                .enumerate()
                .map(|(i, vms)| AgentMeta {
                    id: i as u32,
                    vms: vms.into_iter().map(|v| v.0).collect(),
                })
                .collect(),
        }
    }

    fn topology(&self) -> Vec<(AgentId, Vec<VmId>)> {
        self.agents
            .iter()
            .map(|a| (AgentId(a.id), a.vms.iter().map(|&v| VmId(v)).collect()))
            .collect()
    }
}

/// Everything one window of detection produced.
#[derive(Debug, Clone)]
pub struct WindowResult {
    pub window: u64,
    pub reports: Vec<SymptomReport>,
    pub metrics: Vec<WindowMetrics>,
    pub filtered: usize,
    pub verdicts: Vec<AnomalyVerdict>,
    pub events: Vec<Event>,
}

/// The agents plus the controller, advanced one window at a time.
#[derive(Debug)]
pub struct Detector {
    agents: Vec<Agent>,
    agent_of: BTreeMap<VmId, usize>,
    cfg: DetectorConfig,
    seed: u64,
    window: u64,
}

impl Detector {
    pub fn new(
        topology: &[(AgentId, Vec<VmId>)],
        window_length_us: Micros,
        cfg: DetectorConfig,
        seed: u64,
    ) -> Self {
        let flow_cfg = cfg.flow.flow_config(window_length_us);
        let mut agent_of = BTreeMap::new();
        let agents = topology
            .iter()
            .enumerate()
            .map(|(i, (id, vms))| {
                for &vm in vms {
                    agent_of.insert(vm, i);
                }
                Agent::new(*id, vms.iter().copied(), flow_cfg, cfg.agent.clone())
            })
            .collect();
        Detector {
            agents,
            agent_of,
            cfg,
            seed,
            window: 0,
        }
    }

    pub fn history(&self, vm: VmId) -> Option<Vec<SymptomReport>> {
        let a = self.agent_of.get(&vm)?;
        self.agents[*a]
            .history_window(vm, self.cfg.agent.history_depth)
            .ok()
    }

    pub fn rejected(&self) -> u64 {
        self.agents.iter().map(|a| a.rejected()).sum()
    }

    /// Feeds one window of packets (indexed like the topology) and runs the
    /// controller over the resulting reports.
    pub fn process(&mut self, per_agent: &[Vec<PacketHeaderRecord>]) -> Result<WindowResult> {
        let w = self.window;
        let mut reports = Vec::new();
        let mut metrics = Vec::new();
        let mut suspicious = Vec::new();
        let mut filtered = 0;
        for (i, agent) in self.agents.iter_mut().enumerate() {
            for pkt in per_agent.get(i).map(Vec::as_slice).unwrap_or_default() {
                if let Err(r) = agent.ingest(pkt) {
                    log::warn!(
                        "agent {}: record at {} rejected, newest seen {}",
                        agent.id(),
                        r.timestamp,
                        r.latest
                    );
                }
            }
            let closed = agent.close_window();
            let rs: Vec<SymptomReport> = closed.iter().map(|(r, _)| r.clone()).collect();
            let das = das_agent(&rs);
            log::debug!("agent {} window {w}: {} filtered", agent.id(), das.filtered_count);
            filtered += das.filtered_count;
            suspicious.extend(das.suspicious.into_iter().map(|(r, _)| r));
            for (r, m) in closed {
                reports.push(r);
                metrics.push(m);
            }
        }
        let hist = |vm: VmId| self.history(vm);
        let outcome = process_window(
            w,
            &suspicious,
            self.agents.len(),
            self.seed,
            &hist,
            &self.cfg.controller,
        )?;
        self.window += 1;
        Ok(WindowResult {
            window: w,
            reports,
            metrics,
            filtered,
            verdicts: outcome.verdicts,
            events: outcome.events,
        })
    }
}

/// Accumulated output of a detect or run invocation.
#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub scenario: String,
    pub seed: u64,
    pub windows: u64,
    pub vm_count: u32,
    pub events: Vec<Event>,
    pub verdicts: Vec<AnomalyVerdict>,
    pub report_lines: Vec<String>,
    /// Triple-duplicate-ACK events per VM, indexed by window.
    pub dup_acks: BTreeMap<VmId, Vec<u64>>,
    pub throttles: Vec<(u64, ThrottleAction)>,
    pub ground_truth: Option<GroundTruth>,
    pub filtered: u64,
    pub rejected: u64,
}

impl RunOutcome {
    fn record(&mut self, res: WindowResult) {
        for r in &res.reports {
            self.report_lines.push(r.to_line(nearest_representative(&r.s)));
        }
        for m in &res.metrics {
            self.dup_acks.entry(m.vm).or_default().push(m.dup_ack_count);
        }
        self.filtered += res.filtered as u64;
        self.events.extend(res.events);
        self.verdicts.extend(res.verdicts);
        self.windows = res.window + 1;
    }

    pub fn event_lines(&self) -> Vec<String> {
        self.events.iter().map(|e| e.to_string()).collect()
    }

    pub fn verdict_members(&self) -> BTreeSet<VmId> {
        self.verdicts.iter().flat_map(|v| v.members.iter().copied()).collect()
    }

    pub fn first_throttle_window(&self) -> Option<u64> {
        self.throttles.first().map(|(w, _)| *w)
    }

    /// Mean per-VM dup-ACK count of `vms` over `windows`.
    pub fn mean_dup_acks(&self, vms: &BTreeSet<VmId>, windows: std::ops::RangeInclusive<u64>) -> f64 {
        let mut total = 0u64;
        let mut n = 0u64;
        for vm in vms {
            let Some(series) = self.dup_acks.get(vm) else { continue };
            for w in windows.clone() {
                if let Some(c) = series.get(w as usize) {
                    total += c;
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            total as f64 / n as f64
        }
    }

    /// Victim dup-ACK mean over the two windows up to the first throttle and
    /// the two windows after it.
    pub fn victim_relief(&self) -> Option<(f64, f64)> {
        let gt = self.ground_truth.as_ref()?;
        let w = self.first_throttle_window()?;
        let victims = gt.with_role(Role::Victim);
        if victims.is_empty() || w == 0 {
            return None;
        }
        Some((
            self.mean_dup_acks(&victims, w - 1..=w),
            self.mean_dup_acks(&victims, w + 1..=w + 2),
        ))
    }

    pub fn summary(&self) -> Summary {
        let mut s = Summary::default();
        s.push("scenario", &self.scenario);
        s.push("seed", self.seed);
        s.push("windows", self.windows);
        s.push("vm_count", self.vm_count);
        s.push("verdicts", self.verdicts.len());
        let verdict_windows: BTreeSet<u64> = self.verdicts.iter().map(|v| v.window_index).collect();
        s.push("verdict_windows", verdict_windows.len());
        s.push("first_verdict_window", opt(self.verdicts.first().map(|v| v.window_index)));
        let members = self.verdict_members();
        s.push("verdict_vms", members.len());
        s.push("filtered_reports", self.filtered);
        s.push("rejected_records", self.rejected);

        if let Some(gt) = self.ground_truth.as_ref().filter(|g| !g.entries.is_empty()) {
            let affected = gt.affected();
            let onset = gt.onset().unwrap_or(0);
            let tp = members.intersection(&affected).count();
            let fp = members.len() - tp;
            let unaffected = (self.vm_count as usize).saturating_sub(affected.len());
            s.push("onset_window", onset);
            let first_after = self
                .verdicts
                .iter()
                .map(|v| v.window_index)
                .find(|&w| w >= onset);
            s.push("detection_latency_windows", opt(first_after.map(|w| w - onset)));
            s.push("affected_vms", affected.len());
            s.push("detected_affected_vms", tp);
            s.push("coverage", fmt_ratio(tp, affected.len()));
            s.push("precision", fmt_ratio(tp, members.len()));
            s.push("false_positive_vms", fp);
            s.push("false_positive_rate", fmt_ratio(fp, unaffected));
        }

        let throttled: BTreeSet<VmId> = self.throttles.iter().map(|(_, a)| a.vm).collect();
        s.push("throttle_events", self.throttles.len());
        s.push("throttled_vms", throttled.len());
        s.push("first_throttle_window", opt(self.first_throttle_window()));
        if let Some(gt) = &self.ground_truth {
            let producers = gt.with_role(Role::Producer);
            let victims = gt.with_role(Role::Victim);
            if !throttled.is_empty() {
                let good = throttled.intersection(&producers).count();
                s.push("throttle_precision", fmt_ratio(good, throttled.len()));
                s.push("victims_throttled", throttled.intersection(&victims).count());
            }
            if let Some((before, after)) = self.victim_relief() {
                s.push("victim_dupack_before", format!("{before:.3}"));
                s.push("victim_dupack_after", format!("{after:.3}"));
            }
        }
        s
    }
}

fn opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "none".to_string(), |v| v.to_string())
}

fn fmt_ratio(num: usize, den: usize) -> String {
    if den == 0 {
        "none".to_string()
    } else {
        format!("{:.4}", num as f64 / den as f64)
    }
}

/// Ordered `key = value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary(pub Vec<(String, String)>);

impl Summary {
    fn push(&mut self, key: &str, value: impl fmt::Display) {
        self.0.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn parse(text: &str) -> Self {
        Summary(
            text.lines()
                .filter_map(|l| l.split_once(" = "))
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .collect(),
        )
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.0 {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Closed-loop (or, with `mitigate` false, open-loop) simulation and
/// detection entirely in memory. `sink` sees each window's packets.
pub fn run_in_memory(
    spec: ScenarioSpec,
    params: TrafficModelParams,
    det: DetectorConfig,
    mitigate: bool,
    mut sink: impl FnMut(&sim::WindowTraffic) -> Result<()>,
) -> Result<RunOutcome> {
    let seed = spec.rng_seed;
    let meta = TraceMeta::from_spec(&spec);
    let mut simulator = Simulator::new(spec, params)?;
    let mut mitigator = Mitigator::new(det.mitigation.clone());
    let mut detector = Detector::new(&meta.topology(), meta.window_length_us, det, seed);
    let mut out = RunOutcome {
        scenario: meta.scenario.clone(),
        seed,
        vm_count: meta.vm_count,
        ground_truth: Some(simulator.ground_truth()),
        ..Default::default()
    };
    while !simulator.is_done() {
        let traffic = simulator.next_window();
        sink(&traffic)?;
        let res = detector.process(&traffic.per_agent)?;
        let w = res.window;
        let verdicts = res.verdicts.clone();
        out.record(res);
        if !mitigate {
            continue;
        }
        for vm in mitigator.tick() {
            simulator.release(vm);
        }
        let hist = |vm: VmId| detector.history(vm);
        let plan = mitigator.on_window(w, &verdicts, &hist);
        simulator.apply_throttle(&plan);
        for a in &plan.actions {
            out.events.push(Event::Throttle {
                window: w,
                vm: a.vm,
                factor: a.rate_factor,
                ttl: a.ttl_windows,
            });
            out.throttles.push((w, *a));
        }
    }
    out.rejected = detector.rejected();
    Ok(out)
}

/// Detection over already-loaded per-agent records.
pub fn detect_records(
    meta: &TraceMeta,
    records: Vec<Vec<PacketHeaderRecord>>,
    det: DetectorConfig,
    seed: u64,
    ground_truth: Option<GroundTruth>,
) -> Result<RunOutcome> {
    let wl = meta.window_length_us;
    let mut split: Vec<Vec<Vec<PacketHeaderRecord>>> =
        vec![vec![Vec::new(); meta.agents.len()]; meta.total_windows as usize];
    for (a, recs) in records.into_iter().enumerate() {
        let mut late = 0u64;
        for r in recs {
            match split.get_mut((r.timestamp / wl) as usize) {
                Some(win) => win[a].push(r),
                None => late += 1,
            }
        }
        if late > 0 {
            log::warn!("agent {a}: {late} records past the last window ignored");
        }
    }
    let mut detector = Detector::new(&meta.topology(), wl, det, seed);
    let mut out = RunOutcome {
        scenario: meta.scenario.clone(),
        seed,
        vm_count: meta.vm_count,
        ground_truth,
        ..Default::default()
    };
    for window in split {
        let res = detector.process(&window)?;
        out.record(res);
    }
    out.rejected = detector.rejected();
    Ok(out)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut buf = Vec::new();
    for l in lines {
        buf.extend_from_slice(l.as_bytes());
        buf.push(b'\n');
    }
    write_file(path, &buf)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    std::io::copy(&mut file, &mut h).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(h.finalize()))
}

/// Writes `manifest.txt` listing every other file under `out` with its
/// SHA-256, sorted by relative path.
pub fn write_manifest(out: &Path) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    collect_files(out, &mut files)?;
    let manifest = out.join(MANIFEST_FILE);
    let mut entries = Vec::new();
    for f in files {
        if f == manifest {
            continue;
        }
        let rel = f
            .strip_prefix(out)
            .expect("file under output dir")
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        entries.push((rel, sha256_file(&f)?));
    }
    entries.sort();
    let lines: Vec<String> = entries.iter().map(|(p, d)| format!("{d}  {p}")).collect();
    write_lines(&manifest, &lines)?;
    Ok(entries)
}

fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    // stale results from an earlier invocation would end up in the manifest
    for name in [EVENTS_FILE, REPORTS_FILE, SUMMARY_FILE, MANIFEST_FILE] {
        let p = out.join(name);
        if p.exists() {
            std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

fn write_meta(dir: &Path, spec: &ScenarioSpec, gt: &GroundTruth) -> Result<()> {
    let meta = toml::to_string(&TraceMeta::from_spec(spec)).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&dir.join(META_FILE), meta.as_bytes())?;
    let mut buf = Vec::new();
    gt.write(&mut buf).expect("write to vec");
    write_file(&dir.join(GROUND_TRUTH_FILE), &buf)
}

fn write_results(out: &Path, outcome: &RunOutcome) -> Result<()> {
    write_lines(&out.join(EVENTS_FILE), &outcome.event_lines())?;
    write_lines(&out.join(REPORTS_FILE), &outcome.report_lines)?;
    write_file(&out.join(SUMMARY_FILE), outcome.summary().to_string().as_bytes())
}

/// `simulate`: traces, topology and ground truth, then the manifest.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<Vec<(String, String)>> {
    cfg.validate()?;
    let spec = cfg.scenario_spec()?;
    prepare_out(out)?;
    let dir = out.join(TRACE_DIR);
    let gt = sim::generate(spec.clone(), cfg.traffic.clone(), &dir)?;
    write_meta(&dir, &spec, &gt)?;
    write_manifest(out)
}

/// Loads a trace directory written by `simulate` (or `run --write-traces`).
pub fn load_traces(dir: &Path) -> Result<(TraceMeta, Vec<Vec<PacketHeaderRecord>>, Option<GroundTruth>)> {
    let listing = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut any_trace = false;
    for entry in listing {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        any_trace |= path.extension().is_some_and(|e| e == "trace");
    }
    if !any_trace {
        return Err(Error::EmptyTraceDir(dir.to_path_buf()));
    }
    let meta_path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: TraceMeta =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", meta_path.display())))?;
    let mut records = Vec::with_capacity(meta.agents.len());
    for a in &meta.agents {
        let path = dir.join(sim::trace_file_name(AgentId(a.id)));
        records.push(read_trace(&path)?);
    }
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    let gt = if gt_path.exists() {
        Some(GroundTruth::read(&gt_path)?)
    } else {
        None
    };
    Ok((meta, records, gt))
}

/// `detect`: offline detection over a trace directory.
pub fn detect(cfg: &RunConfig, trace_dir: &Path, out: &Path) -> Result<RunOutcome> {
    cfg.validate_detector()?;
    let (meta, records, gt) = load_traces(trace_dir)?;
    let outcome = detect_records(&meta, records, cfg.detector(), cfg.seed()?, gt)?;
    prepare_out(out)?;
    write_results(out, &outcome)?;
    write_manifest(out)?;
    Ok(outcome)
}

/// `run`: closed-loop simulation and detection. With `write_traces` the
/// generated packets are kept under `traces/` as well.
pub fn run(cfg: &RunConfig, out: &Path, write_traces: bool) -> Result<RunOutcome> {
    cfg.validate()?;
    let spec = cfg.scenario_spec()?;
    prepare_out(out)?;
    let dir = out.join(TRACE_DIR);
    let mut writers = Vec::new();
    if write_traces {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for a in 0..spec.agent_count {
            let path = dir.join(sim::trace_file_name(AgentId(a)));
            let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writers.push((path, std::io::BufWriter::new(f)));
        }
    }
    let outcome = run_in_memory(
        spec.clone(),
        cfg.traffic.clone(),
        cfg.detector(),
        cfg.mitigation.enabled,
        |t| {
            for (pkts, (path, w)) in t.per_agent.iter().zip(writers.iter_mut()) {
                crate::trace::write_trace(&mut *w, pkts).map_err(|e| Error::io(path.as_path(), e))?;
            }
            Ok(())
        },
    )?;
    for (path, mut w) in writers {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if write_traces {
        write_meta(&dir, &spec, outcome.ground_truth.as_ref().expect("simulated run"))?;
    }
    write_results(out, &outcome)?;
    write_manifest(out)?;
    Ok(outcome)
}
