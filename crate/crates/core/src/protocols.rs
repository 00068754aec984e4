//! The three training regimes, driven end to end on the simulated clock:
//!
//! * asynchronous split training with per-client cuts and no parameter
//!   aggregation (the main protocol),
//! * a synchronous split baseline with periodic FedAvg of the client-side
//!   layers,
//! * a synchronous full-model FedAvg baseline.
//!
//! All three can run to the same total number of gradient applications, so
//! time and byte comparisons are apples-to-apples.

use crate::client::{gather_batch, BatchSampler, ClientRuntime};
use crate::data::{global_test_set, Federation};
use crate::error::{Error, Result};
use crate::model::{build_model, evaluate_stack, monolithic_step, LayerStack, ModelConfig,
    Partition, StackOptState};
use crate::optim::Hyper;
use crate::server::ServerRuntime;
use crate::sim::{compute_time, sample_dropout, transfer_time, DeviceProfile, Direction,
    EventQueue, MetricsLedger};
use crate::wire::{message_size_for, Message, MsgKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    FlexpSfl,
    Sfl,
    Fedavg,
}

#[derive(Debug, Clone)]
pub struct RunPlan {
    pub protocol: ProtocolKind,
    /// Total gradient applications across all clients.
    pub target_steps: Option<u64>,
    pub time_budget_s: Option<f64>,
    /// Flexibility ratio per client. The synchronous split baseline uses the
    /// median as its common cut.
    pub qs: Vec<f64>,
    /// Aggregation period E in rounds (baselines only).
    pub aggregation_period: Option<u64>,
    /// Local steps H per round (full-model baseline only).
    pub local_steps: Option<u64>,
    pub lambda: f64,
    pub k_align: Option<u64>,
    pub batch_size: usize,
    pub hyper: Hyper,
    pub element_size: usize,
    /// Server-side seconds per block per sample; negligible by default.
    pub server_seconds_per_block_per_sample: f64,
}

impl RunPlan {
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        if self.qs.len() != num_clients {
            return Err(Error::Config(format!(
                "plan.qs has {} entries for {num_clients} clients",
                self.qs.len()
            )));
        }
        for (i, &q) in self.qs.iter().enumerate() {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::Config(format!("plan.clients[{i}].q = {q} outside [0, 1]")));
            }
        }
        match (self.target_steps, self.time_budget_s) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "plan needs exactly one of target_steps, time_budget_s".into(),
                ))
            }
        }
        if self.batch_size < 1 {
            return Err(Error::Config("plan.batch_size must be >= 1".into()));
        }
        if self.element_size != 4 && self.element_size != 8 {
            return Err(Error::Config("plan.element_size must be 4 or 8".into()));
        }
        if self.k_align == Some(0) {
            return Err(Error::Config("plan.k_align must be >= 1".into()));
        }
        match self.protocol {
            ProtocolKind::FlexpSfl => {
                if self.aggregation_period.is_some() || self.local_steps.is_some() {
                    return Err(Error::Config(
                        "aggregation_period/local_steps are baseline-only fields".into(),
                    ));
                }
            }
            ProtocolKind::Sfl | ProtocolKind::Fedavg => {
                if self.lambda != 0.0 || self.k_align.is_some() {
                    return Err(Error::Config(
                        "lambda/k_align apply only to the flexp_sfl protocol".into(),
                    ));
                }
                if self.aggregation_period == Some(0) || self.local_steps == Some(0) {
                    return Err(Error::Config(
                        "plan.aggregation_period and plan.local_steps must be >= 1".into(),
                    ));
                }
            }
        }
        if self.server_seconds_per_block_per_sample < 0.0 {
            return Err(Error::Config(
                "plan.server_seconds_per_block_per_sample must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Common cut for the synchronous split baseline: the median q.
    pub fn median_q(&self) -> f64 {
        let mut qs = self.qs.clone();
        qs.sort_by(f64::total_cmp);
        qs[qs.len() / 2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimelineRow {
    pub sim_time_s: f64,
    /// Global completed-step counter at the time of this row.
    pub step: u64,
    pub client_id: usize,
    pub train_loss: f64,
    pub bytes_up_total: u64,
    pub bytes_down_total: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub ledger: MetricsLedger,
    pub timeline: Vec<TimelineRow>,
    /// Own-shard test accuracy of each client's final composite model.
    pub personalized_acc: Vec<f64>,
    /// Pooled-test accuracy of each client's final composite model.
    pub global_acc: Vec<f64>,
    /// `crosseval[i][j]`: client i's model on client j's test shard.
    pub crosseval: Vec<Vec<f64>>,
    pub final_stacks: Vec<LayerStack>,
    /// Clients whose resident parameters exceed their device memory budget.
    pub over_budget: Vec<usize>,
}

/// Seed for one client's mini-batch schedule; exposed so oracle tests can
/// replay the identical batch sequence monolithically.
pub fn client_sampler_seed(run_seed: u64, client: usize) -> u64 {
    run_seed
        .wrapping_mul(0x2545_f491_4f6c_dd1d)
        .wrapping_add(client as u64)
}

pub fn run(
    model: &ModelConfig,
    plan: &RunPlan,
    fed: &Federation,
    devices: &[DeviceProfile],
    seed: u64,
) -> Result<RunOutput> {
    match plan.protocol {
        ProtocolKind::FlexpSfl => run_flexp_sfl(model, plan, fed, devices, seed),
        ProtocolKind::Sfl => run_sfl_baseline(model, plan, fed, devices, seed),
        ProtocolKind::Fedavg => run_fedavg_baseline(model, plan, fed, devices, seed),
    }
}

fn validate_inputs(
    model: &ModelConfig,
    plan: &RunPlan,
    fed: &Federation,
    devices: &[DeviceProfile],
) -> Result<()> {
    model.validate()?;
    plan.validate(fed.clients.len())?;
    if devices.len() != fed.clients.len() {
        return Err(Error::Config(format!(
            "{} device profiles for {} clients",
            devices.len(),
            fed.clients.len()
        )));
    }
    for (i, d) in devices.iter().enumerate() {
        d.validate(&format!("devices[{i}]"))?;
    }
    Ok(())
}

/// Shape of one activation frame for a given batch size.
fn cut_shape(model: &ModelConfig, batch: usize) -> Vec<usize> {
    match model.seq_len {
        Some(seq) if model.block_kind == crate::blocks::BlockKind::AttentionMlpResidual => {
            vec![batch, seq, model.hidden_dim]
        }
        _ => vec![batch, model.hidden_dim],
    }
}

/// Per-client constants of the pipeline: frame bytes, compute and transfer
/// durations. Activation and gradient frames have identical size, so all of
/// this is independent of q except the compute terms.
struct StepTiming {
    fwd_s: f64,
    head_s: f64,
    bwd_s: f64,
    server_fwd_s: f64,
    server_bwd_s: f64,
    up_act_s: f64,
    down_act_s: f64,
    down_ack_s: f64,
    /// End-to-end duration of one step with no contention.
    nominal_s: f64,
}

impl StepTiming {
    fn new(
        model: &ModelConfig,
        plan: &RunPlan,
        profile: &DeviceProfile,
        cl_count: usize,
        num_middle: usize,
    ) -> StepTiming {
        let batch = plan.batch_size;
        let act_bytes = message_size_for(&cut_shape(model, batch), plan.element_size);
        let ack_bytes = message_size_for(&[1], plan.element_size);
        let fwd_s = compute_time(1 + cl_count, batch, profile, Direction::Forward);
        let head_s = compute_time(1, batch, profile, Direction::Forward)
            + compute_time(1, batch, profile, Direction::Backward);
        let bwd_s = compute_time(1 + cl_count, batch, profile, Direction::Backward);
        let sl = num_middle - cl_count;
        let server_rate = plan.server_seconds_per_block_per_sample;
        let server_fwd_s = sl as f64 * batch as f64 * server_rate;
        let server_bwd_s = 2.0 * server_fwd_s;
        let up_act_s = transfer_time(act_bytes, profile.uplink_bytes_per_s, profile.latency_s);
        let down_act_s = transfer_time(act_bytes, profile.downlink_bytes_per_s, profile.latency_s);
        let down_ack_s = transfer_time(ack_bytes, profile.downlink_bytes_per_s, profile.latency_s);
        let nominal_s = fwd_s
            + up_act_s
            + server_fwd_s
            + down_act_s
            + head_s
            + up_act_s
            + server_bwd_s
            + down_act_s
            + bwd_s;
        StepTiming {
            fwd_s,
            head_s,
            bwd_s,
            server_fwd_s,
            server_bwd_s,
            up_act_s,
            down_act_s,
            down_ack_s,
            nominal_s,
        }
    }
}

// ---------------------------------------------------------------------------
// FlexP-SFL: asynchronous, aggregation-free
// ---------------------------------------------------------------------------

enum Ev {
    /// A client attempts to begin its next step.
    Start(usize),
    AtServer(Message),
    AtClient(usize, Message),
    /// The client-side backward finished; the step is complete.
    Done(usize, f64),
}

pub fn run_flexp_sfl(
    model: &ModelConfig,
    plan: &RunPlan,
    fed: &Federation,
    devices: &[DeviceProfile],
    seed: u64,
) -> Result<RunOutput> {
    validate_inputs(model, plan, fed, devices)?;
    let n = fed.clients.len();
    let init = build_model(model, seed)?;
    let mut server =
        ServerRuntime::new(init.clone(), plan.lambda, plan.hyper.clone(), plan.element_size);
    let mut clients = Vec::with_capacity(n);
    let mut samplers = Vec::with_capacity(n);
    let mut timings = Vec::with_capacity(n);
    for c in 0..n {
        let part = Partition::new(model.num_middle_blocks, plan.qs[c])?;
        server.register_client(c as u32, plan.qs[c])?;
        timings.push(StepTiming::new(model, plan, &devices[c], part.cl_count, part.num_middle));
        clients.push(ClientRuntime::new(
            c as u32,
            &init,
            part,
            plan.hyper.clone(),
            plan.element_size,
            plan.k_align,
        ));
        samplers.push(BatchSampler::new(
            fed.clients[c].train.len(),
            plan.batch_size,
            client_sampler_seed(seed, c),
        ));
    }

    let mut ledger = MetricsLedger::new(n);
    let mut queue: EventQueue<Ev> = EventQueue::new();
    let mut attempts = vec![0u64; n];
    let mut step_start = vec![0.0f64; n];
    let mut cur_loss = vec![0.0f64; n];
    let mut steps_started: u64 = 0;
    let mut steps_done: u64 = 0;
    let mut timeline = Vec::new();

    let may_start = |t: f64, started: u64| -> bool {
        if let Some(target) = plan.target_steps {
            started < target
        } else {
            t < plan.time_budget_s.unwrap()
        }
    };

    for c in 0..n {
        queue.schedule(0.0, Ev::Start(c));
    }
    while let Some((t, ev)) = queue.advance() {
        match ev {
            Ev::Start(c) => {
                if !may_start(t, steps_started) {
                    continue;
                }
                let round = attempts[c];
                attempts[c] += 1;
                let tm = &timings[c];
                if !sample_dropout(seed, c, round, devices[c].dropout_prob) {
                    // the attempt's wall time elapses with nothing to show
                    ledger.per_client[c].skipped_steps += 1;
                    ledger.per_client[c].idle_s += tm.nominal_s;
                    queue.schedule(t + tm.nominal_s, Ev::Start(c));
                    continue;
                }
                steps_started += 1;
                step_start[c] = t;
                let shard = &fed.clients[c].train;
                let idx = samplers[c].next_batch();
                let (input, labels) = gather_batch(model, &shard.features, &shard.labels, &idx)?;
                let (act, probe) = clients[c].client_forward(&input, labels)?;
                ledger.per_client[c].compute_s += tm.fwd_s;
                let sent = t + tm.fwd_s;
                ledger.record_frame(MsgKind::ActUp, c, act.byte_size(plan.element_size), true);
                queue.schedule(sent + tm.up_act_s, Ev::AtServer(act));
                if let Some(p) = probe {
                    ledger.record_frame(MsgKind::AlignProbe, c, p.byte_size(plan.element_size), true);
                    queue.schedule(sent + tm.up_act_s, Ev::AtServer(p));
                }
            }
            Ev::AtServer(msg) => {
                let c = msg.client_id as usize;
                let tm = &timings[c];
                match msg.kind {
                    MsgKind::ActUp => {
                        let down = server.handle_activation_up(&msg)?;
                        ledger.record_frame(MsgKind::ActDown, c, down.byte_size(plan.element_size), false);
                        queue.schedule(t + tm.server_fwd_s + tm.down_act_s, Ev::AtClient(c, down));
                    }
                    MsgKind::AlignProbe => {
                        let ack = server.handle_align_probe(&msg)?;
                        ledger.record_frame(MsgKind::AlignAck, c, ack.byte_size(plan.element_size), false);
                        queue.schedule(t + tm.server_fwd_s + tm.down_ack_s, Ev::AtClient(c, ack));
                    }
                    MsgKind::GradUp => {
                        let down = server.handle_gradient_up(&msg)?;
                        ledger.record_frame(MsgKind::GradDown, c, down.byte_size(plan.element_size), false);
                        queue.schedule(t + tm.server_bwd_s + tm.down_act_s, Ev::AtClient(c, down));
                    }
                    other => {
                        return Err(Error::Protocol(format!("unexpected {other:?} at server")))
                    }
                }
            }
            Ev::AtClient(c, msg) => {
                let tm = &timings[c];
                match msg.kind {
                    MsgKind::ActDown => {
                        let (loss, up) = clients[c].client_finalize_forward(&msg)?;
                        cur_loss[c] = loss;
                        ledger.per_client[c].compute_s += tm.head_s;
                        ledger.record_frame(MsgKind::GradUp, c, up.byte_size(plan.element_size), true);
                        queue.schedule(t + tm.head_s + tm.up_act_s, Ev::AtServer(up));
                    }
                    MsgKind::GradDown => {
                        clients[c].client_apply_cut_gradient(&msg)?;
                        ledger.per_client[c].compute_s += tm.bwd_s;
                        queue.schedule(t + tm.bwd_s, Ev::Done(c, cur_loss[c]));
                    }
                    MsgKind::AlignAck => clients[c].record_align_ack(&msg),
                    other => {
                        return Err(Error::Protocol(format!("unexpected {other:?} at client")))
                    }
                }
            }
            Ev::Done(c, loss) => {
                steps_done += 1;
                let m = &mut ledger.per_client[c];
                m.steps += 1;
                let tm = &timings[c];
                m.idle_s += (t - step_start[c]) - (tm.fwd_s + tm.head_s + tm.bwd_s);
                timeline.push(TimelineRow {
                    sim_time_s: t,
                    step: steps_done,
                    client_id: c,
                    train_loss: loss,
                    bytes_up_total: ledger.per_client.iter().map(|m| m.bytes_up).sum(),
                    bytes_down_total: ledger.per_client.iter().map(|m| m.bytes_down).sum(),
                });
                ledger.total_sim_time_s = t;
                queue.schedule(t, Ev::Start(c));
            }
        }
    }
    debug_assert_eq!(server.in_flight(), 0, "tape cache leak after quiescence");
    debug_assert_eq!(steps_done, steps_started);

    for c in 0..n {
        let m = &mut ledger.per_client[c];
        m.peak_memory_bytes =
            (clients[c].resident_param_count() + clients[c].peak_cache_elements()) as u64 * 8;
    }
    finish_split(model, plan, fed, devices, ledger, timeline, &clients, &server)
}

/// Final evaluation shared by the two split protocols.
fn finish_split(
    model: &ModelConfig,
    _plan: &RunPlan,
    fed: &Federation,
    devices: &[DeviceProfile],
    ledger: MetricsLedger,
    timeline: Vec<TimelineRow>,
    clients: &[ClientRuntime],
    server: &ServerRuntime,
) -> Result<RunOutput> {
    let stacks: Vec<LayerStack> =
        clients.iter().map(|c| c.composite(server.middle_blocks())).collect();
    let over_budget = (0..clients.len())
        .filter(|&c| ledger.per_client[c].peak_memory_bytes > devices[c].memory_bytes_budget)
        .collect();
    evaluate_all(model, fed, ledger, timeline, stacks, over_budget)
}

fn evaluate_all(
    model: &ModelConfig,
    fed: &Federation,
    ledger: MetricsLedger,
    timeline: Vec<TimelineRow>,
    stacks: Vec<LayerStack>,
    over_budget: Vec<usize>,
) -> Result<RunOutput> {
    let pooled = global_test_set(fed);
    let mut personalized = Vec::with_capacity(stacks.len());
    let mut global = Vec::with_capacity(stacks.len());
    let mut crosseval = Vec::with_capacity(stacks.len());
    for (i, stack) in stacks.iter().enumerate() {
        let mut row = Vec::with_capacity(stacks.len());
        for c in fed.clients.iter() {
            row.push(evaluate_stack(stack, model, &c.test.features, &c.test.labels)?);
        }
        personalized.push(row[i]);
        global.push(evaluate_stack(stack, model, &pooled.features, &pooled.labels)?);
        crosseval.push(row);
    }
    Ok(RunOutput {
        ledger,
        timeline,
        personalized_acc: personalized,
        global_acc: global,
        crosseval,
        final_stacks: stacks,
        over_budget,
    })
}

// ---------------------------------------------------------------------------
// Synchronous baselines
// ---------------------------------------------------------------------------

fn weighted_average(sets: &[(f64, Vec<f64>)]) -> Vec<f64> {
    let total: f64 = sets.iter().map(|(w, _)| w).sum();
    let len = sets[0].1.len();
    let mut out = vec![0.0; len];
    for (w, v) in sets {
        for (o, &x) in out.iter_mut().zip(v) {
            *o += (w / total) * x;
        }
    }
    out
}

struct RoundStop {
    steps_done: u64,
    time_s: f64,
    rounds: u64,
}

impl RoundStop {
    fn keep_going(&mut self, plan: &RunPlan) -> Result<bool> {
        self.rounds += 1;
        if self.rounds > 2_000_000 {
            return Err(Error::State(
                "round limit exceeded; dropout too high to reach the step target".into(),
            ));
        }
        Ok(match (plan.target_steps, plan.time_budget_s) {
            (Some(target), _) => self.steps_done < target,
            (None, Some(budget)) => self.time_s < budget,
            _ => unreachable!("validated"),
        })
    }
}

/// Synchronous split baseline: common cut, straggler barrier per round, and
/// FedAvg of the client-side layers every E rounds.
pub fn run_sfl_baseline(
    model: &ModelConfig,
    plan: &RunPlan,
    fed: &Federation,
    devices: &[DeviceProfile],
    seed: u64,
) -> Result<RunOutput> {
    validate_inputs(model, plan, fed, devices)?;
    let n = fed.clients.len();
    let e = plan.aggregation_period.unwrap_or(1);
    let q = plan.median_q();
    let init = build_model(model, seed)?;
    let mut server = ServerRuntime::new(init.clone(), 0.0, plan.hyper.clone(), plan.element_size);
    let mut clients = Vec::with_capacity(n);
    let mut samplers = Vec::with_capacity(n);
    let mut timings = Vec::with_capacity(n);
    for c in 0..n {
        let part = Partition::new(model.num_middle_blocks, q)?;
        server.register_client(c as u32, q)?;
        timings.push(StepTiming::new(model, plan, &devices[c], part.cl_count, part.num_middle));
        clients.push(ClientRuntime::new(
            c as u32,
            &init,
            part,
            plan.hyper.clone(),
            plan.element_size,
            None,
        ));
        samplers.push(BatchSampler::new(
            fed.clients[c].train.len(),
            plan.batch_size,
            client_sampler_seed(seed, c),
        ));
    }
    let view_params = clients[0].resident_param_count();
    let param_bytes = message_size_for(&[view_params], plan.element_size);

    let mut ledger = MetricsLedger::new(n);
    let mut timeline = Vec::new();
    let mut stop = RoundStop { steps_done: 0, time_s: 0.0, rounds: 0 };
    let mut round: u64 = 0;
    while stop.keep_going(plan)? {
        let participants: Vec<usize> = (0..n)
            .filter(|&c| sample_dropout(seed, c, round, devices[c].dropout_prob))
            .collect();
        let mut round_time: f64 = 0.0;
        let mut losses = Vec::new();
        for &c in &participants {
            let tm = &timings[c];
            let shard = &fed.clients[c].train;
            let idx = samplers[c].next_batch();
            let (input, labels) = gather_batch(model, &shard.features, &shard.labels, &idx)?;
            let (act, _) = clients[c].client_forward(&input, labels)?;
            ledger.record_frame(MsgKind::ActUp, c, act.byte_size(plan.element_size), true);
            let down = server.handle_activation_up(&act)?;
            ledger.record_frame(MsgKind::ActDown, c, down.byte_size(plan.element_size), false);
            let (loss, up) = clients[c].client_finalize_forward(&down)?;
            ledger.record_frame(MsgKind::GradUp, c, up.byte_size(plan.element_size), true);
            let gd = server.handle_gradient_up(&up)?;
            ledger.record_frame(MsgKind::GradDown, c, gd.byte_size(plan.element_size), false);
            clients[c].client_apply_cut_gradient(&gd)?;
            losses.push((c, loss));
            let m = &mut ledger.per_client[c];
            m.steps += 1;
            m.compute_s += tm.fwd_s + tm.head_s + tm.bwd_s;
            round_time = round_time.max(tm.nominal_s);
            stop.steps_done += 1;
        }
        for c in 0..n {
            if participants.contains(&c) {
                ledger.per_client[c].idle_s += round_time - timings[c].nominal_s
                    + (timings[c].nominal_s
                        - (timings[c].fwd_s + timings[c].head_s + timings[c].bwd_s));
            } else {
                ledger.per_client[c].skipped_steps += 1;
                ledger.per_client[c].idle_s += round_time;
            }
        }
        ledger.barrier_events += 1;
        stop.time_s += round_time;

        if (round + 1) % e == 0 && !participants.is_empty() {
            let sets: Vec<(f64, Vec<f64>)> = participants
                .iter()
                .map(|&c| (fed.clients[c].train.len() as f64, clients[c].export_params()))
                .collect();
            let avg = weighted_average(&sets);
            let mut up_max: f64 = 0.0;
            let mut down_max: f64 = 0.0;
            for &c in &participants {
                ledger.record_frame(MsgKind::ParamUp, c, param_bytes, true);
                up_max = up_max.max(transfer_time(
                    param_bytes,
                    devices[c].uplink_bytes_per_s,
                    devices[c].latency_s,
                ));
            }
            for (c, client) in clients.iter_mut().enumerate() {
                client.import_params(&avg)?;
                ledger.record_frame(MsgKind::ParamDown, c, param_bytes, false);
                down_max = down_max.max(transfer_time(
                    param_bytes,
                    devices[c].downlink_bytes_per_s,
                    devices[c].latency_s,
                ));
            }
            stop.time_s += up_max + down_max;
        }
        for (c, loss) in losses {
            timeline.push(TimelineRow {
                sim_time_s: stop.time_s,
                step: stop.steps_done,
                client_id: c,
                train_loss: loss,
                bytes_up_total: ledger.per_client.iter().map(|m| m.bytes_up).sum(),
                bytes_down_total: ledger.per_client.iter().map(|m| m.bytes_down).sum(),
            });
        }
        round += 1;
    }
    ledger.total_sim_time_s = stop.time_s;
    for c in 0..n {
        ledger.per_client[c].peak_memory_bytes =
            (clients[c].resident_param_count() + clients[c].peak_cache_elements()) as u64 * 8;
    }
    finish_split(model, plan, fed, devices, ledger, timeline, &clients, &server)
}

/// Full-model synchronous FedAvg: H local steps per round, whole-model
/// upload/download at every aggregation.
pub fn run_fedavg_baseline(
    model: &ModelConfig,
    plan: &RunPlan,
    fed: &Federation,
    devices: &[DeviceProfile],
    seed: u64,
) -> Result<RunOutput> {
    validate_inputs(model, plan, fed, devices)?;
    let n = fed.clients.len();
    let e = plan.aggregation_period.unwrap_or(1);
    let h = plan.local_steps.unwrap_or(1);
    let init = build_model(model, seed)?;
    let blocks = model.num_middle_blocks + 2;
    let mut stacks: Vec<LayerStack> = vec![init.clone(); n];
    let mut states: Vec<StackOptState> = stacks.iter().map(StackOptState::new).collect();
    let mut samplers: Vec<BatchSampler> = (0..n)
        .map(|c| {
            BatchSampler::new(
                fed.clients[c].train.len(),
                plan.batch_size,
                client_sampler_seed(seed, c),
            )
        })
        .collect();
    let full_params = init.param_count();
    let param_bytes = message_size_for(&[full_params], plan.element_size);
    let step_s: Vec<f64> = devices
        .iter()
        .map(|d| {
            compute_time(blocks, plan.batch_size, d, Direction::Forward)
                + compute_time(blocks, plan.batch_size, d, Direction::Backward)
        })
        .collect();

    let mut ledger = MetricsLedger::new(n);
    let mut timeline = Vec::new();
    let mut stop = RoundStop { steps_done: 0, time_s: 0.0, rounds: 0 };
    let mut round: u64 = 0;
    while stop.keep_going(plan)? {
        let participants: Vec<usize> = (0..n)
            .filter(|&c| sample_dropout(seed, c, round, devices[c].dropout_prob))
            .collect();
        let mut round_time: f64 = 0.0;
        let mut losses = Vec::new();
        for &c in &participants {
            let shard = &fed.clients[c].train;
            let mut loss_sum = 0.0;
            for _ in 0..h {
                let idx = samplers[c].next_batch();
                let (input, labels) = gather_batch(model, &shard.features, &shard.labels, &idx)?;
                loss_sum +=
                    monolithic_step(&mut stacks[c], &mut states[c], &input, &labels, &plan.hyper)?;
                stop.steps_done += 1;
                ledger.per_client[c].steps += 1;
            }
            losses.push((c, loss_sum / h as f64));
            let dur = h as f64 * step_s[c];
            ledger.per_client[c].compute_s += dur;
            round_time = round_time.max(dur);
        }
        for c in 0..n {
            if participants.contains(&c) {
                ledger.per_client[c].idle_s += round_time - h as f64 * step_s[c];
            } else {
                ledger.per_client[c].skipped_steps += 1;
                ledger.per_client[c].idle_s += round_time;
            }
        }
        ledger.barrier_events += 1;
        stop.time_s += round_time;

        if (round + 1) % e == 0 && !participants.is_empty() {
            let sets: Vec<(f64, Vec<f64>)> = participants
                .iter()
                .map(|&c| (fed.clients[c].train.len() as f64, stacks[c].flatten()))
                .collect();
            let avg = weighted_average(&sets);
            let mut up_max: f64 = 0.0;
            let mut down_max: f64 = 0.0;
            for &c in &participants {
                ledger.record_frame(MsgKind::ParamUp, c, param_bytes, true);
                up_max = up_max.max(transfer_time(
                    param_bytes,
                    devices[c].uplink_bytes_per_s,
                    devices[c].latency_s,
                ));
            }
            for (c, stack) in stacks.iter_mut().enumerate() {
                stack.unflatten(&avg)?;
                ledger.record_frame(MsgKind::ParamDown, c, param_bytes, false);
                down_max = down_max.max(transfer_time(
                    param_bytes,
                    devices[c].downlink_bytes_per_s,
                    devices[c].latency_s,
                ));
            }
            stop.time_s += up_max + down_max;
        }
        for (c, loss) in losses {
            timeline.push(TimelineRow {
                sim_time_s: stop.time_s,
                step: stop.steps_done,
                client_id: c,
                train_loss: loss,
                bytes_up_total: ledger.per_client.iter().map(|m| m.bytes_up).sum(),
                bytes_down_total: ledger.per_client.iter().map(|m| m.bytes_down).sum(),
            });
        }
        round += 1;
    }
    ledger.total_sim_time_s = stop.time_s;
    let mut over_budget = Vec::new();
    for c in 0..n {
        let mem = full_params as u64 * 8;
        ledger.per_client[c].peak_memory_bytes = mem;
        if mem > devices[c].memory_bytes_budget {
            over_budget.push(c);
        }
    }
    evaluate_all(model, fed, ledger, timeline, stacks, over_budget)
}

/// First simulated time at which the smoothed pooled train loss comes within
/// `rel_margin` of its final smoothed value; a convergence-speed summary.
pub fn time_to_plateau(timeline: &[TimelineRow], rel_margin: f64) -> Option<f64> {
    if timeline.len() < 4 {
        return None;
    }
    let window = (timeline.len() / 10).max(3);
    let smoothed: Vec<f64> = timeline
        .windows(window)
        .map(|w| w.iter().map(|r| r.train_loss).sum::<f64>() / w.len() as f64)
        .collect();
    let last = *smoothed.last().unwrap();
    let threshold = last * (1.0 + rel_margin);
    for (i, &v) in smoothed.iter().enumerate() {
        if v <= threshold {
            return Some(timeline[i + window - 1].sim_time_s);
        }
    }
    None
}
