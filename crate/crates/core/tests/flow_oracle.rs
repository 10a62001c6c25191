//! Flow tracker vs. brute-force re-derivations over random TCP exchanges.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symptom_core::flow::{estimate_rtt, FlowConfig, FlowKey, FlowState, FlowTable};
use symptom_core::trace::{Micros, PacketHeaderRecord, Protocol, TcpFlags, VmId};

const A: u32 = 1;
const B: u32 = 2;

fn pkt(ts: Micros, from_a: bool, flags: TcpFlags, len: u32, seq: u32, ack: u32) -> PacketHeaderRecord {
    let (src, dst, sp, dp) = if from_a { (A, B, 1000, 2000) } else { (B, A, 2000, 1000) };
    PacketHeaderRecord {
        timestamp: ts,
        src_vm: VmId(src),
        dst_vm: VmId(dst),
        src_port: sp,
        dst_port: dp,
        protocol: Protocol::Tcp,
        payload_len: len,
        tcp_flags: flags,
        seq,
        ack,
    }
}

struct Side {
    next: u32,
    sent: Vec<(u32, u32)>,
    acked: u32,
}

/// Both sides send in-order data with occasional retransmissions; ACKs are
/// cumulative and sometimes repeated. Sequence numbers start anywhere,
/// including just below the wrap.
fn exchange(seed: u64, len: usize) -> Vec<PacketHeaderRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = |rng: &mut ChaCha8Rng| -> u32 {
        if rng.random_bool(0.3) {
            u32::MAX - rng.random_range(0..5_000)
        } else {
            rng.random()
        }
    };
    let a0 = start(&mut rng);
    let b0 = start(&mut rng);
    let mut sides = [
        Side { next: a0, sent: vec![], acked: a0 },
        Side { next: b0, sent: vec![], acked: b0 },
    ];
    let mut ts: Micros = 0;
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        ts += rng.random_range(0..400);
        let me = rng.random_range(0..2usize);
        let other = 1 - me;
        let from_a = me == 0;
        let ack_for_me = sides[other].acked;
        match rng.random_range(0..10) {
            // new data
            0..=3 => {
                let l = rng.random_range(1..1500);
                let seq = sides[me].next;
                sides[me].sent.push((seq, l));
                sides[me].next = seq.wrapping_add(l);
                out.push(pkt(ts, from_a, TcpFlags::ACK, l, seq, ack_for_me));
            }
            // retransmission of something already sent
            4 if !sides[me].sent.is_empty() => {
                let (seq, l) = sides[me].sent[rng.random_range(0..sides[me].sent.len())];
                out.push(pkt(ts, from_a, TcpFlags::ACK, l, seq, ack_for_me));
            }
            // cumulative ACK of the other side, advancing to a segment end
            5..=6 => {
                let cur = sides[other].acked;
                let ends: Vec<u32> = sides[other]
                    .sent
                    .iter()
                    .map(|(s, l)| s.wrapping_add(*l))
                    .filter(|e| e.wrapping_sub(cur) as i32 > 0)
                    .collect();
                if let Some(&e) = ends.get(rng.random_range(0..ends.len().max(1))) {
                    sides[other].acked = e;
                }
                let ack = sides[other].acked;
                out.push(pkt(ts, from_a, TcpFlags::ACK, 0, sides[me].next, ack));
            }
            // duplicate ACK
            _ => {
                out.push(pkt(ts, from_a, TcpFlags::ACK, 0, sides[me].next, ack_for_me));
            }
        }
    }
    out
}

fn pure_ack(p: &PacketHeaderRecord) -> bool {
    p.has(TcpFlags::ACK)
        && p.payload_len == 0
        && !p.has(TcpFlags::SYN)
        && !p.has(TcpFlags::FIN)
        && !p.has(TcpFlags::RST)
}

/// Packet `i` completes a triple duplicate when it ends a run of identical
/// pure ACKs from its sender that holds exactly three duplicates of the
/// run's opening acknowledgement.
fn dup_oracle(pkts: &[PacketHeaderRecord], i: usize) -> bool {
    let p = &pkts[i];
    if !pure_ack(p) {
        return false;
    }
    let same_sender: Vec<&PacketHeaderRecord> = pkts[..=i].iter().filter(|q| q.src_vm == p.src_vm).collect();
    let mut run = 0;
    let mut opener = None;
    for q in same_sender.iter().rev() {
        if pure_ack(q) && q.ack == p.ack {
            run += 1;
        } else {
            opener = Some(*q);
            break;
        }
    }
    let dups = match opener {
        Some(q) if q.has(TcpFlags::ACK) && q.ack == p.ack => run,
        _ => run - 1,
    };
    dups == 3
}

fn seq_le(a: u32, b: u32) -> bool {
    (b.wrapping_sub(a) as i32) >= 0
}

fn overlaps(a: (u32, u32), b: (u32, u32)) -> bool {
    // ranges as (start, len), compared relative to a's start
    let b_off = b.0.wrapping_sub(a.0) as i32 as i64;
    b_off < i64::from(a.1) && b_off + i64::from(b.1) > 0
}

/// RTT sample produced by packet `k`, derived from scratch: among the
/// original transmissions first covered by `k`, the oldest that was not
/// retransmitted before `k` yields `t_k - t_j`.
fn rtt_oracle(pkts: &[PacketHeaderRecord], k: usize) -> Option<Micros> {
    let ack = &pkts[k];
    if !ack.has(TcpFlags::ACK) {
        return None;
    }
    let mut highest: Option<u32> = None;
    let mut originals = Vec::new();
    for (j, p) in pkts[..k].iter().enumerate() {
        if p.src_vm != ack.dst_vm || p.payload_len == 0 {
            continue;
        }
        let end = p.seq.wrapping_add(p.payload_len);
        match highest {
            Some(h) if (p.seq.wrapping_sub(h) as i32) < 0 => {
                if (end.wrapping_sub(h) as i32) > 0 {
                    highest = Some(end);
                }
            }
            _ => {
                originals.push(j);
                highest = Some(end);
            }
        }
    }
    for j in originals {
        let seg = &pkts[j];
        let end = seg.seq.wrapping_add(seg.payload_len);
        let first_cover = pkts[j + 1..]
            .iter()
            .position(|q| q.src_vm == ack.src_vm && q.has(TcpFlags::ACK) && seq_le(end, q.ack))
            .map(|x| x + j + 1);
        if first_cover != Some(k) {
            continue;
        }
        let retransmitted = pkts[j + 1..k].iter().any(|q| {
            q.src_vm == seg.src_vm && q.payload_len > 0 && overlaps((seg.seq, seg.payload_len), (q.seq, q.payload_len))
        });
        if !retransmitted && ack.timestamp > seg.timestamp {
            return Some(ack.timestamp - seg.timestamp);
        }
    }
    None
}

/// The tracker pops covered segments strictly in send order, so the oracle
/// only applies while every ACK covers a prefix of the original sends.
fn acks_cover_prefixes(pkts: &[PacketHeaderRecord]) -> bool {
    for (k, ack) in pkts.iter().enumerate() {
        let mut segs: Vec<(u32, u32)> = Vec::new();
        for p in pkts[..k].iter().filter(|p| p.src_vm == ack.dst_vm && p.payload_len > 0) {
            if !segs.iter().any(|s| s.0 == p.seq) {
                segs.push((p.seq, p.seq.wrapping_add(p.payload_len)));
            }
        }
        let covered: Vec<bool> = segs.iter().map(|(_, e)| seq_le(*e, ack.ack)).collect();
        if covered.windows(2).any(|w| !w[0] && w[1]) {
            return false;
        }
    }
    true
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn dup_ack_events_match_oracle(seed in any::<u64>(), len in 1usize..250) {
        let pkts = exchange(seed, len);
        let mut table = FlowTable::new(FlowConfig::default());
        let (key, _) = FlowKey::from_packet(&pkts[0]);
        let mut prev = 0;
        for (i, p) in pkts.iter().enumerate() {
            table.track_packet(p).unwrap();
            let runs = table.flow(&key).unwrap().dup_ack_runs;
            prop_assert_eq!(runs - prev == 1, dup_oracle(&pkts, i), "packet {}", i);
            prev = runs;
        }
    }

    #[test]
    fn rtt_samples_match_oracle(seed in any::<u64>(), len in 1usize..200) {
        let pkts = exchange(seed, len);
        prop_assume!(acks_cover_prefixes(&pkts));
        let (key, _) = FlowKey::from_packet(&pkts[0]);
        let mut state = FlowState::new(key, 0);
        for (k, p) in pkts.iter().enumerate() {
            prop_assert_eq!(estimate_rtt(&mut state, p), rtt_oracle(&pkts, k), "packet {}", k);
        }
    }
}

#[test]
fn oracle_sanity() {
    // four identical ACKs after the acknowledgement they repeat: one event
    let p = |ts, ack| pkt(ts, false, TcpFlags::ACK, 0, 5, ack);
    let seq = vec![p(0, 100), p(1, 100), p(2, 100), p(3, 100), p(4, 100)];
    let events: Vec<bool> = (0..seq.len()).map(|i| dup_oracle(&seq, i)).collect();
    assert_eq!(events, vec![false, false, false, true, false]);

    let data = pkt(0, true, TcpFlags::ACK, 100, 1000, 0);
    let ack = pkt(250, false, TcpFlags::ACK, 0, 0, 1100);
    assert_eq!(rtt_oracle(&[data, ack], 1), Some(250));
}
