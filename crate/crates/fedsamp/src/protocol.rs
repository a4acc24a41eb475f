//! Message-level round state machines.
//!
//! Two protocol variants are modeled. In the exact variant the master reads
//! every client's norm report, sorts, and computes the closed-form
//! probabilities. In the sum-only variant the master is structurally limited
//! to aggregates: client messages land in an [`Inbox`] whose per-client
//! accessor counts reads, and the sum-only master path never calls it. The
//! aggregator is an in-process trusted summer; only its information-flow
//! shape is enforced, not cryptography.
//!
//! Downlink broadcasts cost zero in the ledger by default; a flag on
//! [`BitLedger`] enables counting them for sensitivity studies.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{
    ocs_probabilities, uniform_probabilities, ClientSelection, ProbabilityVector,
    WeightedNormVector,
};
use crate::stream::{client_stream, domain};

/// How the round selects participating clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerKind {
    Full,
    Uniform,
    Ocs,
    Aocs,
}

impl SamplerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "uniform" => Ok(Self::Uniform),
            "ocs" => Ok(Self::Ocs),
            "aocs" => Ok(Self::Aocs),
            other => Err(Error::Config(format!("unknown sampler '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Uniform => "uniform",
            Self::Ocs => "ocs",
            Self::Aocs => "aocs",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Party {
    Client(usize),
    Master,
    Aggregator,
}

impl std::fmt::Display for Party {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Party::Client(i) => write!(f, "client/{i}"),
            Party::Master => write!(f, "master"),
            Party::Aggregator => write!(f, "aggregator"),
        }
    }
}

/// Protocol messages. `StatusReport` is exactly `(1, p_i)` while `p_i < 1`
/// and `(0, 0)` afterwards; saturated clients keep sending `(0, 0)` each
/// iteration and are charged for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Message {
    NormReport(f64),
    NormSumBroadcast(f64),
    ProbabilityBroadcast(Vec<f64>),
    StatusReport(f64, f64),
    StatusAggregate(f64, f64),
    CalibrationBroadcast(f64),
    UpdateSubmission(Vec<f64>),
}

impl Message {
    fn variant(&self) -> &'static str {
        match self {
            Message::NormReport(_) => "norm_report",
            Message::NormSumBroadcast(_) => "norm_sum_broadcast",
            Message::ProbabilityBroadcast(_) => "probability_broadcast",
            Message::StatusReport(_, _) => "status_report",
            Message::StatusAggregate(_, _) => "status_aggregate",
            Message::CalibrationBroadcast(_) => "calibration_broadcast",
            Message::UpdateSubmission(_) => "update_submission",
        }
    }

    fn payload(&self) -> String {
        fn floats(fs: &[f64]) -> String {
            fs.iter()
                .map(|f| format!("{f:?}"))
                .collect::<Vec<_>>()
                .join(" ")
        }
        match self {
            Message::NormReport(u) => floats(&[*u]),
            Message::NormSumBroadcast(u) => floats(&[*u]),
            Message::ProbabilityBroadcast(p) => floats(p),
            Message::StatusReport(a, b) => floats(&[*a, *b]),
            Message::StatusAggregate(i, p) => floats(&[*i, *p]),
            Message::CalibrationBroadcast(c) => floats(&[*c]),
            Message::UpdateSubmission(v) => floats(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub round: u64,
    pub sender: Party,
    pub message: Message,
}

impl LogEntry {
    /// One-line debug/replay format: `round sender variant payload`.
    pub fn log_line(&self) -> String {
        format!(
            "{} {} {} {}",
            self.round,
            self.sender,
            self.message.variant(),
            self.message.payload()
        )
    }
}

/// Mailbox for one kind of per-client message. The aggregator sums it; any
/// per-client access is counted, which is how the sum-only property is
/// audited.
#[derive(Debug)]
pub struct Inbox<T> {
    items: Vec<T>,
    per_client_reads: AtomicUsize,
}

impl<T> Inbox<T> {
    pub fn new(items: Vec<T>) -> Self {
        Self { items, per_client_reads: AtomicUsize::new(0) }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Per-client read; counted.
    pub fn get(&self, client: usize) -> &T {
        self.per_client_reads.fetch_add(1, Ordering::Relaxed);
        &self.items[client]
    }

    pub fn per_client_reads(&self) -> usize {
        self.per_client_reads.load(Ordering::Relaxed)
    }
}

impl Inbox<f64> {
    /// Aggregate view: the sum only.
    pub fn sum(&self) -> f64 {
        self.items.iter().sum()
    }
}

impl Inbox<(f64, f64)> {
    pub fn sum_pairs(&self) -> (f64, f64) {
        self.items
            .iter()
            .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y))
    }
}

/// Uplink bit accounting. Downlink is excluded unless `count_downlink` is
/// set; float width defaults to 32 bits per scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitLedger {
    pub float_width: u64,
    pub count_downlink: bool,
    pub uplink_update_bits: u64,
    pub uplink_overhead_bits: u64,
    pub downlink_bits: u64,
}

impl Default for BitLedger {
    fn default() -> Self {
        Self::new(32, false)
    }
}

impl BitLedger {
    pub fn new(float_width: u64, count_downlink: bool) -> Self {
        Self {
            float_width,
            count_downlink,
            uplink_update_bits: 0,
            uplink_overhead_bits: 0,
            downlink_bits: 0,
        }
    }

    pub fn uplink_bits(&self) -> u64 {
        self.uplink_update_bits + self.uplink_overhead_bits
    }

    /// Add a completed round; additive and deterministic given the transcript.
    pub fn charge(&mut self, transcript: &RoundTranscript) {
        let delta = account_bits(transcript, self.float_width);
        self.uplink_update_bits += delta.uplink_update_bits;
        self.uplink_overhead_bits += delta.uplink_overhead_bits;
        if self.count_downlink {
            self.downlink_bits += transcript.downlink_floats * self.float_width;
        }
    }
}

/// Complete record of one protocol round.
#[derive(Debug)]
pub struct RoundTranscript {
    pub round: u64,
    pub mode: SamplerKind,
    pub n: usize,
    pub dim: usize,
    pub probs: ProbabilityVector,
    pub selection: ClientSelection,
    pub iterations_used: usize,
    pub log: Vec<LogEntry>,
    /// Per-client reads performed by master-side code during the round.
    pub master_per_client_reads: usize,
    /// Total floats broadcast downlink (counted only if the ledger opts in).
    pub downlink_floats: u64,
}

impl RoundTranscript {
    pub fn participants(&self) -> usize {
        self.selection.len()
    }

    pub fn log_lines(&self) -> Vec<String> {
        self.log.iter().map(LogEntry::log_line).collect()
    }
}

/// Deterministic per-round bit count.
///
/// Uplink update bits are `participants * d * float_width` for every mode.
/// Overhead is `n` floats for the exact protocol (one norm per client),
/// `n * (1 + 2 * iterations_used)` floats for the sum-only protocol, and
/// zero for full participation and uniform sampling.
pub fn account_bits(transcript: &RoundTranscript, float_width: u64) -> BitLedger {
    let participants = transcript.participants() as u64;
    let n = transcript.n as u64;
    let d = transcript.dim as u64;
    let overhead_floats = match transcript.mode {
        SamplerKind::Full | SamplerKind::Uniform => 0,
        SamplerKind::Ocs => n,
        SamplerKind::Aocs => n * (1 + 2 * transcript.iterations_used as u64),
    };
    BitLedger {
        float_width,
        count_downlink: false,
        uplink_update_bits: participants * d * float_width,
        uplink_overhead_bits: overhead_floats * float_width,
        downlink_bits: 0,
    }
}

fn check_updates(weighted_updates: &[Vec<f64>]) -> Result<usize> {
    if weighted_updates.is_empty() {
        return Err(Error::InvalidInput("no client updates".into()));
    }
    let d = weighted_updates[0].len();
    if weighted_updates.iter().any(|u| u.len() != d) {
        return Err(Error::DimensionMismatch("client updates have unequal dimensions".into()));
    }
    Ok(d)
}

/// Each client flips its own coin on its own `(seed, round, client)` stream,
/// so concurrency and sampler choice never change the draw.
fn flip_coins(probs: &ProbabilityVector, seed: u64, round: u64) -> ClientSelection {
    let included = probs
        .probs()
        .iter()
        .enumerate()
        .filter(|(i, &pi)| {
            let mut stream = client_stream(seed, round, *i as u64, domain::COIN);
            stream.gen::<f64>() < pi
        })
        .map(|(i, _)| i)
        .collect();
    ClientSelection::new(included)
}

fn log_submissions(
    log: &mut Vec<LogEntry>,
    round: u64,
    weighted_updates: &[Vec<f64>],
    probs: &ProbabilityVector,
    selection: &ClientSelection,
) {
    for &i in selection.included() {
        let p = probs.probs()[i];
        let scaled: Vec<f64> = weighted_updates[i].iter().map(|&x| x / p).collect();
        log.push(LogEntry {
            round,
            sender: Party::Client(i),
            message: Message::UpdateSubmission(scaled),
        });
    }
}

/// Exact protocol round: clients report norms individually, master computes
/// the closed-form probabilities and broadcasts them, clients flip coins.
pub fn run_ocs_round(
    weighted_updates: &[Vec<f64>],
    m: usize,
    seed: u64,
    round: u64,
) -> Result<RoundTranscript> {
    let d = check_updates(weighted_updates)?;
    let n = weighted_updates.len();
    let norms = WeightedNormVector::from_weighted_updates(weighted_updates)?;

    let mut log = Vec::new();
    let inbox = Inbox::new(norms.values().to_vec());
    for (i, &u) in norms.values().iter().enumerate() {
        log.push(LogEntry { round, sender: Party::Client(i), message: Message::NormReport(u) });
    }

    // The exact master legitimately reads every individual norm.
    let reported: Vec<f64> = (0..n).map(|i| *inbox.get(i)).collect();
    let reported = WeightedNormVector::new(reported)?;
    let probs = ocs_probabilities(&reported, m)?;
    log.push(LogEntry {
        round,
        sender: Party::Master,
        message: Message::ProbabilityBroadcast(probs.probs().to_vec()),
    });
    let downlink_floats = n as u64;

    let selection = if probs.is_degenerate() {
        ClientSelection::new(vec![])
    } else {
        flip_coins(&probs, seed, round)
    };
    log_submissions(&mut log, round, weighted_updates, &probs, &selection);

    Ok(RoundTranscript {
        round,
        mode: SamplerKind::Ocs,
        n,
        dim: d,
        probs,
        selection,
        iterations_used: 0,
        log,
        master_per_client_reads: inbox.per_client_reads(),
        downlink_floats,
    })
}

/// Sum-only protocol round. The master receives only sums: the norm total
/// from one aggregation, then `(I, P)` status totals per iteration. Clients
/// compute and recalibrate their own probabilities locally.
pub fn run_aocs_round(
    weighted_updates: &[Vec<f64>],
    m: usize,
    j_max: usize,
    seed: u64,
    round: u64,
) -> Result<RoundTranscript> {
    let d = check_updates(weighted_updates)?;
    if j_max < 1 {
        return Err(Error::InvalidInput("j_max must be >= 1".into()));
    }
    let n = weighted_updates.len();
    let norms = WeightedNormVector::from_weighted_updates(weighted_updates)?;

    let mut log = Vec::new();
    let mut downlink_floats = 0u64;
    let mut master_reads = 0usize;

    let norm_inbox = Inbox::new(norms.values().to_vec());
    for (i, &u) in norms.values().iter().enumerate() {
        log.push(LogEntry { round, sender: Party::Client(i), message: Message::NormReport(u) });
    }
    // Master sees the sum only.
    let norm_sum = norm_inbox.sum();
    master_reads += norm_inbox.per_client_reads();
    log.push(LogEntry {
        round,
        sender: Party::Master,
        message: Message::NormSumBroadcast(norm_sum),
    });
    downlink_floats += n as u64;

    let mut iterations = 0usize;
    let (probs, selection) = if norm_sum == 0.0 {
        (ProbabilityVector::degenerate(n, m)?, ClientSelection::new(vec![]))
    } else {
        // Client-local probabilities.
        let mut p: Vec<f64> = norms
            .values()
            .iter()
            .map(|&ui| (m as f64 * ui / norm_sum).min(1.0))
            .collect();

        for _ in 0..j_max {
            iterations += 1;
            let reports: Vec<(f64, f64)> = p
                .iter()
                .map(|&pi| if pi < 1.0 { (1.0, pi) } else { (0.0, 0.0) })
                .collect();
            let status_inbox = Inbox::new(reports.clone());
            for (i, &(a, b)) in reports.iter().enumerate() {
                log.push(LogEntry {
                    round,
                    sender: Party::Client(i),
                    message: Message::StatusReport(a, b),
                });
            }
            let (i_count, p_sum) = status_inbox.sum_pairs();
            master_reads += status_inbox.per_client_reads();
            log.push(LogEntry {
                round,
                sender: Party::Aggregator,
                message: Message::StatusAggregate(i_count, p_sum),
            });
            if p_sum == 0.0 {
                break;
            }
            let c = (m as f64 - n as f64 + i_count) / p_sum;
            log.push(LogEntry {
                round,
                sender: Party::Master,
                message: Message::CalibrationBroadcast(c),
            });
            downlink_floats += n as u64;
            for pi in p.iter_mut() {
                if *pi < 1.0 {
                    *pi = (c * *pi).min(1.0);
                }
            }
            if c <= 1.0 {
                break;
            }
        }

        let probs = ProbabilityVector::new(p, m)?;
        let selection = flip_coins(&probs, seed, round);
        (probs, selection)
    };

    log_submissions(&mut log, round, weighted_updates, &probs, &selection);

    Ok(RoundTranscript {
        round,
        mode: SamplerKind::Aocs,
        n,
        dim: d,
        probs,
        selection,
        iterations_used: iterations,
        log,
        master_per_client_reads: master_reads,
        downlink_floats,
    })
}

/// Full-participation round: everyone submits, no sampling overhead.
pub fn run_full_round(weighted_updates: &[Vec<f64>], round: u64) -> Result<RoundTranscript> {
    let d = check_updates(weighted_updates)?;
    let n = weighted_updates.len();
    let probs = ProbabilityVector::new(vec![1.0; n], n.max(1))?;
    let selection = ClientSelection::new((0..n).collect());
    let mut log = Vec::new();
    log_submissions(&mut log, round, weighted_updates, &probs, &selection);
    Ok(RoundTranscript {
        round,
        mode: SamplerKind::Full,
        n,
        dim: d,
        probs,
        selection,
        iterations_used: 0,
        log,
        master_per_client_reads: 0,
        downlink_floats: 0,
    })
}

/// Uniform independent sampling round: `p_i = m / n`, no norm exchange.
pub fn run_uniform_round(
    weighted_updates: &[Vec<f64>],
    m: usize,
    seed: u64,
    round: u64,
) -> Result<RoundTranscript> {
    let d = check_updates(weighted_updates)?;
    let n = weighted_updates.len();
    let probs = uniform_probabilities(n, m)?;
    let selection = flip_coins(&probs, seed, round);
    let mut log = Vec::new();
    log_submissions(&mut log, round, weighted_updates, &probs, &selection);
    Ok(RoundTranscript {
        round,
        mode: SamplerKind::Uniform,
        n,
        dim: d,
        probs,
        selection,
        iterations_used: 0,
        log,
        master_per_client_reads: 0,
        downlink_floats: 0,
    })
}

/// Dispatch on sampler kind. `m` and `j_max` are ignored where not relevant.
pub fn run_round(
    kind: SamplerKind,
    weighted_updates: &[Vec<f64>],
    m: usize,
    j_max: usize,
    seed: u64,
    round: u64,
) -> Result<RoundTranscript> {
    match kind {
        SamplerKind::Full => run_full_round(weighted_updates, round),
        SamplerKind::Uniform => run_uniform_round(weighted_updates, m, seed, round),
        SamplerKind::Ocs => run_ocs_round(weighted_updates, m, seed, round),
        SamplerKind::Aocs => run_aocs_round(weighted_updates, m, j_max, seed, round),
    }
}
