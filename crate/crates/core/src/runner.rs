//! Experiment execution on disk: single runs with CSV outputs, seed-averaged
//! parameter sweeps, and the self-check oracle suite.

use crate::blocks::{grad_check, BlockKind};
use crate::client::{gather_batch, BatchSampler};
use crate::config::ExperimentConfig;
use crate::data::generate_federation;
use crate::error::{Error, Result};
use crate::model::{build_model, monolithic_step, ModelConfig, StackOptState};
use crate::optim::Hyper;
use crate::protocols::{
    client_sampler_seed, run, run_flexp_sfl, time_to_plateau, ProtocolKind, RunOutput, RunPlan,
};
use crate::sim::DeviceProfile;
use crate::wire::{decode_message, encode_message, Message, MsgKind};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;

/// Scalar digest of one run, used by sweeps and reports.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub mean_personalized_acc: f64,
    pub mean_global_acc: f64,
    pub total_sim_time_s: f64,
    pub total_bytes: u64,
    pub plateau_time_s: Option<f64>,
}

impl RunSummary {
    pub fn of(out: &RunOutput) -> RunSummary {
        let n = out.personalized_acc.len() as f64;
        RunSummary {
            mean_personalized_acc: out.personalized_acc.iter().sum::<f64>() / n,
            mean_global_acc: out.global_acc.iter().sum::<f64>() / n,
            total_sim_time_s: out.ledger.total_sim_time_s,
            total_bytes: out.ledger.total_bytes(),
            plateau_time_s: time_to_plateau(&out.timeline, 0.05),
        }
    }
}

/// Execute the configured protocol once, entirely in memory.
pub fn run_in_memory(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutput> {
    let mut spec = cfg.federation.clone();
    spec.seed = spec.seed.wrapping_add(seed);
    let fed = generate_federation(&spec)?;
    run(&cfg.model, &cfg.run_plan(), &fed, &cfg.device_table(), seed)
}

fn fnum(v: f64) -> String {
    // shortest round-trip form; deterministic across runs
    format!("{v}")
}

pub fn timeline_csv(out: &RunOutput) -> String {
    let mut s = String::from("sim_time_s,step,client_id,train_loss,bytes_up_total,bytes_down_total\n");
    for r in &out.timeline {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            fnum(r.sim_time_s),
            r.step,
            r.client_id,
            fnum(r.train_loss),
            r.bytes_up_total,
            r.bytes_down_total
        );
    }
    s
}

pub fn summary_csv(out: &RunOutput) -> String {
    let mut s = String::from(
        "client_id,personalized_acc,global_acc,peak_memory_bytes,bytes_up,bytes_down,steps,skipped_steps,compute_s,idle_s,sim_time_s\n",
    );
    for (c, m) in out.ledger.per_client.iter().enumerate() {
        let _ = writeln!(
            s,
            "{c},{},{},{},{},{},{},{},{},{},{}",
            fnum(out.personalized_acc[c]),
            fnum(out.global_acc[c]),
            m.peak_memory_bytes,
            m.bytes_up,
            m.bytes_down,
            m.steps,
            m.skipped_steps,
            fnum(m.compute_s),
            fnum(m.idle_s),
            fnum(out.ledger.total_sim_time_s)
        );
    }
    let n = out.personalized_acc.len() as f64;
    let l = &out.ledger;
    let _ = writeln!(
        s,
        "all,{},{},{},{},{},{},{},{},{},{}",
        fnum(out.personalized_acc.iter().sum::<f64>() / n),
        fnum(out.global_acc.iter().sum::<f64>() / n),
        l.per_client.iter().map(|m| m.peak_memory_bytes).max().unwrap_or(0),
        l.per_client.iter().map(|m| m.bytes_up).sum::<u64>(),
        l.per_client.iter().map(|m| m.bytes_down).sum::<u64>(),
        l.per_client.iter().map(|m| m.steps).sum::<u64>(),
        l.per_client.iter().map(|m| m.skipped_steps).sum::<u64>(),
        fnum(l.per_client.iter().map(|m| m.compute_s).sum::<f64>()),
        fnum(l.per_client.iter().map(|m| m.idle_s).sum::<f64>()),
        fnum(l.total_sim_time_s)
    );
    s
}

pub fn crosseval_csv(out: &RunOutput) -> String {
    let n = out.crosseval.len();
    let mut s = String::from("model_id");
    for j in 0..n {
        let _ = write!(s, ",shard_{j}");
    }
    s.push('\n');
    for (i, row) in out.crosseval.iter().enumerate() {
        let _ = write!(s, "{i}");
        for v in row {
            let _ = write!(s, ",{}", fnum(*v));
        }
        s.push('\n');
    }
    s
}

/// Run one experiment and write `timeline.csv`, `summary.csv`,
/// `crosseval.csv` into `out_dir`. Deterministic per `(config, seed)`.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<RunSummary> {
    let out = run_in_memory(cfg, seed)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("timeline.csv"), timeline_csv(&out))?;
    std::fs::write(out_dir.join("summary.csv"), summary_csv(&out))?;
    std::fs::write(out_dir.join("crosseval.csv"), crosseval_csv(&out))?;
    Ok(RunSummary::of(&out))
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Q,
    Lambda,
    Dropout,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<SweepParam> {
        match s {
            "q" => Ok(SweepParam::Q),
            "lambda" => Ok(SweepParam::Lambda),
            "dropout" => Ok(SweepParam::Dropout),
            other => Err(Error::Config(format!(
                "unknown sweep parameter {other:?}; expected q, lambda, or dropout"
            ))),
        }
    }
}

/// A copy of the config with one swept parameter overridden everywhere it
/// applies (all clients / all devices).
pub fn apply_sweep_value(cfg: &ExperimentConfig, param: SweepParam, value: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    match param {
        SweepParam::Q => {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Config(format!("sweep q = {value} outside [0, 1]")));
            }
            c.plan.qs = vec![value; c.plan.qs.len()];
        }
        SweepParam::Lambda => {
            if value < 0.0 {
                return Err(Error::Config(format!("sweep lambda = {value} must be >= 0")));
            }
            c.plan.lambda = value;
        }
        SweepParam::Dropout => {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Config(format!("sweep dropout = {value} outside [0, 1]")));
            }
            for d in &mut c.devices {
                d.profile.dropout_prob = value;
            }
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub seeds: usize,
    pub personalized_mean: f64,
    pub personalized_std: f64,
    pub global_mean: f64,
    pub global_std: f64,
    pub time_mean: f64,
    pub time_std: f64,
    pub bytes_mean: f64,
    pub plateau_mean: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Cartesian product of `values` × `seeds`, averaged over seeds, executed on
/// a bounded worker pool of `jobs` threads.
pub fn sweep(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    let mut tasks: Vec<(usize, u64)> = Vec::new();
    let mut configs = Vec::with_capacity(values.len());
    for (vi, &v) in values.iter().enumerate() {
        configs.push(apply_sweep_value(cfg, param, v)?);
        for &s in seeds {
            tasks.push((vi, s));
        }
    }
    let queue = Mutex::new(tasks);
    let results: Mutex<Vec<(usize, u64, RunSummary)>> = Mutex::new(Vec::new());
    let first_err: Mutex<Option<Error>> = Mutex::new(None);
    let workers = jobs.max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let task = queue.lock().unwrap().pop();
                let Some((vi, seed)) = task else { break };
                match run_in_memory(&configs[vi], seed) {
                    Ok(out) => {
                        results.lock().unwrap().push((vi, seed, RunSummary::of(&out)));
                    }
                    Err(e) => {
                        first_err.lock().unwrap().get_or_insert(e);
                        break;
                    }
                }
            });
        }
    });
    if let Some(e) = first_err.into_inner().unwrap() {
        return Err(e);
    }
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(vi, seed, _)| (*vi, *seed));
    let mut rows = Vec::with_capacity(values.len());
    for (vi, &v) in values.iter().enumerate() {
        let group: Vec<&RunSummary> =
            results.iter().filter(|(i, _, _)| *i == vi).map(|(_, _, s)| s).collect();
        let pers: Vec<f64> = group.iter().map(|s| s.mean_personalized_acc).collect();
        let glob: Vec<f64> = group.iter().map(|s| s.mean_global_acc).collect();
        let time: Vec<f64> = group.iter().map(|s| s.total_sim_time_s).collect();
        let bytes: Vec<f64> = group.iter().map(|s| s.total_bytes as f64).collect();
        let plateau: Vec<f64> =
            group.iter().filter_map(|s| s.plateau_time_s).collect();
        let (pm, ps) = mean_std(&pers);
        let (gm, gs) = mean_std(&glob);
        let (tm, ts) = mean_std(&time);
        let (bm, _) = mean_std(&bytes);
        let (lm, _) = if plateau.is_empty() { (f64::NAN, 0.0) } else { mean_std(&plateau) };
        rows.push(SweepRow {
            value: v,
            seeds: group.len(),
            personalized_mean: pm,
            personalized_std: ps,
            global_mean: gm,
            global_std: gs,
            time_mean: tm,
            time_std: ts,
            bytes_mean: bm,
            plateau_mean: lm,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let name = match param {
        SweepParam::Q => "q",
        SweepParam::Lambda => "lambda",
        SweepParam::Dropout => "dropout",
    };
    let mut s = String::from(
        "param,value,seeds,personalized_mean,personalized_std,global_mean,global_std,time_mean_s,time_std_s,bytes_mean,plateau_mean_s\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{name},{},{},{},{},{},{},{},{},{},{}",
            fnum(r.value),
            r.seeds,
            fnum(r.personalized_mean),
            fnum(r.personalized_std),
            fnum(r.global_mean),
            fnum(r.global_std),
            fnum(r.time_mean),
            fnum(r.time_std),
            fnum(r.bytes_mean),
            fnum(r.plateau_mean)
        );
    }
    s
}

// ---------------------------------------------------------------------------
// Verification oracles
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct VerifyCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<VerifyCheck>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &'static str, passed: bool, detail: String) {
        self.checks.push(VerifyCheck { name, passed, detail });
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_dim: 8,
        hidden_dim: 8,
        num_middle_blocks: 4,
        num_classes: 3,
        block_kind: BlockKind::MlpResidual,
        seq_len: None,
    }
}

fn tiny_federation(n: usize, seed: u64) -> crate::data::Federation {
    generate_federation(&crate::data::FederationSpec {
        num_clients: n,
        input_dim: 8,
        num_classes: 3,
        samples_per_client: 40,
        theta_max: 0.8,
        label_alpha: 1.0,
        noise_sigma: 0.3,
        train_fraction: 0.8,
        seed,
        clusters_per_class: 1,
        task: crate::data::TaskKind::Prototype,
    })
    .expect("valid spec")
}

fn flat_profile() -> DeviceProfile {
    DeviceProfile {
        name: "oracle".into(),
        fwd_seconds_per_block_per_sample: 0.001,
        bwd_multiplier: 2.0,
        memory_bytes_budget: 1 << 30,
        uplink_bytes_per_s: 1e6,
        downlink_bytes_per_s: 1e6,
        latency_s: 0.01,
        dropout_prob: 0.0,
    }
}

/// Worst parameter deviation between a one-client split run (no alignment,
/// lossless wire) and monolithic training on the identical batch sequence.
pub fn split_equivalence_diff(q: f64, steps: u64, seed: u64) -> Result<f64> {
    let model = tiny_model();
    let fed = tiny_federation(1, seed ^ 0x51ee);
    let plan = RunPlan {
        protocol: ProtocolKind::FlexpSfl,
        target_steps: Some(steps),
        time_budget_s: None,
        qs: vec![q],
        aggregation_period: None,
        local_steps: None,
        lambda: 0.0,
        k_align: None,
        batch_size: 4,
        hyper: Hyper::sgd(0.1),
        element_size: 8,
        server_seconds_per_block_per_sample: 0.0,
    };
    let devices = vec![flat_profile()];
    let out = run_flexp_sfl(&model, &plan, &fed, &devices, seed)?;

    let mut stack = build_model(&model, seed)?;
    let mut state = StackOptState::new(&stack);
    let shard = &fed.clients[0].train;
    let mut sampler = BatchSampler::new(shard.len(), plan.batch_size, client_sampler_seed(seed, 0));
    for _ in 0..steps {
        let idx = sampler.next_batch();
        let (input, labels) = gather_batch(&model, &shard.features, &shard.labels, &idx)?;
        monolithic_step(&mut stack, &mut state, &input, &labels, &plan.hyper)?;
    }
    Ok(out.final_stacks[0].max_abs_diff(&stack))
}

fn random_frame(rng: &mut impl rand::Rng, element_size: usize) -> Message {
    let kinds = [
        MsgKind::ActUp,
        MsgKind::ActDown,
        MsgKind::GradUp,
        MsgKind::GradDown,
        MsgKind::AlignProbe,
        MsgKind::AlignAck,
        MsgKind::ParamUp,
        MsgKind::ParamDown,
    ];
    let kind = kinds[rng.gen_range(0..kinds.len())];
    let ndim = rng.gen_range(1..=3);
    let shape: Vec<usize> = (0..ndim).map(|_| rng.gen_range(1..=5)).collect();
    let count: usize = shape.iter().product();
    let data: Vec<f64> = (0..count)
        .map(|_| {
            let v = rng.gen_range(-1e3..1e3);
            if element_size == 4 { v as f32 as f64 } else { v }
        })
        .collect();
    Message::new(
        kind,
        rng.gen::<u32>(),
        rng.gen::<u64>(),
        crate::tensor::Tensor::new(shape, data).unwrap(),
    )
}

/// `count` random frames, both element widths, bit-exact round-trips.
pub fn wire_roundtrip_check(count: usize, seed: u64) -> Result<()> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let element_size = if i % 2 == 0 { 4 } else { 8 };
        let msg = random_frame(&mut rng, element_size);
        let back = decode_message(&encode_message(&msg, element_size))?;
        if back != msg {
            return Err(Error::Protocol(format!("frame {i} failed round-trip")));
        }
    }
    Ok(())
}

/// Runs the oracle suite: gradient checks, split equivalence, wire
/// round-trips, and whole-run determinism. Everything is seed-pinned.
pub fn verify() -> VerifyReport {
    let mut report = VerifyReport::default();

    let mut worst_nonlinear: f64 = 0.0;
    let mut worst_linear: f64 = 0.0;
    for seed in 0..5u64 {
        for kind in [BlockKind::MlpResidual, BlockKind::AttentionMlpResidual] {
            worst_nonlinear = worst_nonlinear.max(grad_check(kind, seed));
        }
        for kind in [BlockKind::InputProj, BlockKind::OutputHead] {
            worst_linear = worst_linear.max(grad_check(kind, seed));
        }
    }
    report.push(
        "gradcheck_nonlinear",
        worst_nonlinear < 1e-4,
        format!("worst rel err {worst_nonlinear:.3e} (tolerance 1e-4)"),
    );
    report.push(
        "gradcheck_linear",
        worst_linear < 1e-6,
        format!("worst rel err {worst_linear:.3e} (tolerance 1e-6)"),
    );

    for q in [0.0, 0.5, 1.0] {
        let (passed, detail) = match split_equivalence_diff(q, 20, 7) {
            Ok(d) => (d <= 1e-9, format!("q={q}: max param diff {d:.3e} (tolerance 1e-9)")),
            Err(e) => (false, format!("q={q}: {e}")),
        };
        report.push("split_equivalence", passed, detail);
    }

    let (passed, detail) = match wire_roundtrip_check(100, 13) {
        Ok(()) => (true, "100 random frames bit-exact".into()),
        Err(e) => (false, e.to_string()),
    };
    report.push("wire_roundtrip", passed, detail);

    let cfg = ExperimentConfig::from_str(crate::config::CONFIG_REFERENCE).expect("reference");
    let mut small = cfg;
    small.federation.num_clients = 3;
    small.federation.samples_per_client = 40;
    small.plan.qs = vec![0.5; 3];
    small.plan.target_steps = Some(30);
    small.devices[0].clients = vec![0, 1];
    small.devices[1].clients = vec![2];
    let (passed, detail) = match (run_in_memory(&small, 3), run_in_memory(&small, 3)) {
        (Ok(a), Ok(b)) => (
            timeline_csv(&a) == timeline_csv(&b)
                && summary_csv(&a) == summary_csv(&b)
                && crosseval_csv(&a) == crosseval_csv(&b),
            "repeated run produced identical outputs".into(),
        ),
        (Err(e), _) | (_, Err(e)) => (false, e.to_string()),
    };
    report.push("determinism", passed, detail);

    report
}
