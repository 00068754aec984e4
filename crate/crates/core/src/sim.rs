//! Deterministic discrete-event clock for heterogeneous devices and links.

use crate::error::{Error, Result};
use crate::wire::MsgKind;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub name: String,
    pub fwd_seconds_per_block_per_sample: f64,
    #[serde(default = "default_bwd_multiplier")]
    pub bwd_multiplier: f64,
    pub memory_bytes_budget: u64,
    pub uplink_bytes_per_s: f64,
    pub downlink_bytes_per_s: f64,
    pub latency_s: f64,
    #[serde(default)]
    pub dropout_prob: f64,
}

fn default_bwd_multiplier() -> f64 {
    2.0
}

impl DeviceProfile {
    pub fn validate(&self, path: &str) -> Result<()> {
        for (field, v) in [
            ("fwd_seconds_per_block_per_sample", self.fwd_seconds_per_block_per_sample),
            ("uplink_bytes_per_s", self.uplink_bytes_per_s),
            ("downlink_bytes_per_s", self.downlink_bytes_per_s),
        ] {
            if v <= 0.0 {
                return Err(Error::Config(format!("{path}.{field} must be > 0")));
            }
        }
        if self.latency_s < 0.0 {
            return Err(Error::Config(format!("{path}.latency_s must be >= 0")));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(Error::Config(format!("{path}.dropout_prob must be in [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// latency + bytes / bandwidth.
pub fn transfer_time(bytes: usize, bytes_per_s: f64, latency_s: f64) -> f64 {
    latency_s + bytes as f64 / bytes_per_s
}

/// blocks * samples * per-block-per-sample seconds, doubled-ish for backward.
pub fn compute_time(
    blocks: usize,
    samples: usize,
    profile: &DeviceProfile,
    direction: Direction,
) -> f64 {
    let mult = match direction {
        Direction::Forward => 1.0,
        Direction::Backward => profile.bwd_multiplier,
    };
    blocks as f64 * samples as f64 * profile.fwd_seconds_per_block_per_sample * mult
}

/// Deterministic per-round participation draw for one client.
pub fn sample_dropout(seed: u64, client: usize, round: u64, dropout_prob: f64) -> bool {
    if dropout_prob <= 0.0 {
        return true;
    }
    if dropout_prob >= 1.0 {
        return false;
    }
    let mix = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((client as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(round.wrapping_mul(0x94d0_49bb_1331_11eb));
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    rng.gen::<f64>() >= dropout_prob
}

// ---------------------------------------------------------------------------
// Event queue
// ---------------------------------------------------------------------------

struct Entry<A> {
    fire_time: f64,
    seq: u64,
    action: A,
}

impl<A> PartialEq for Entry<A> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_time == other.fire_time && self.seq == other.seq
    }
}
impl<A> Eq for Entry<A> {}
impl<A> PartialOrd for Entry<A> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<A> Ord for Entry<A> {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap, we want earliest first
        other
            .fire_time
            .total_cmp(&self.fire_time)
            .then(other.seq.cmp(&self.seq))
    }
}

/// Min-queue over (fire_time, insertion sequence); the clock never goes back.
pub struct EventQueue<A> {
    heap: BinaryHeap<Entry<A>>,
    seq: u64,
    clock: f64,
}

impl<A> Default for EventQueue<A> {
    fn default() -> Self {
        EventQueue { heap: BinaryHeap::new(), seq: 0, clock: 0.0 }
    }
}

impl<A> EventQueue<A> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.clock
    }

    pub fn schedule(&mut self, fire_time: f64, action: A) {
        debug_assert!(fire_time.is_finite());
        let t = fire_time.max(self.clock);
        self.heap.push(Entry { fire_time: t, seq: self.seq, action });
        self.seq += 1;
    }

    /// Pops the earliest event and advances the clock; `None` at quiescence.
    pub fn advance(&mut self) -> Option<(f64, A)> {
        let e = self.heap.pop()?;
        self.clock = e.fire_time;
        Some((e.fire_time, e.action))
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientMetrics {
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub compute_s: f64,
    pub idle_s: f64,
    pub steps: u64,
    pub skipped_steps: u64,
    /// Parameter bytes plus the largest observed activation cache.
    pub peak_memory_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLedger {
    pub per_client: Vec<ClientMetrics>,
    pub total_sim_time_s: f64,
    pub frames_by_kind: [u64; 9],
    pub barrier_events: u64,
}

impl MetricsLedger {
    pub fn new(num_clients: usize) -> MetricsLedger {
        MetricsLedger {
            per_client: vec![ClientMetrics::default(); num_clients],
            ..Default::default()
        }
    }

    pub fn record_frame(&mut self, kind: MsgKind, client: usize, bytes: usize, upward: bool) {
        self.frames_by_kind[kind as usize] += 1;
        let m = &mut self.per_client[client];
        if upward {
            m.bytes_up += bytes as u64;
        } else {
            m.bytes_down += bytes as u64;
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.per_client.iter().map(|m| m.bytes_up + m.bytes_down).sum()
    }

    pub fn param_frames(&self) -> u64 {
        self.frames_by_kind[MsgKind::ParamUp as usize]
            + self.frames_by_kind[MsgKind::ParamDown as usize]
    }
}
