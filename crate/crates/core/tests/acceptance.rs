//! Acceptance suite: ten end-to-end criteria covering gradient oracles,
//! split-execution equivalence, the alignment regularizer, the wire
//! protocol's no-aggregation invariants, straggler behaviour, the three
//! ablation trends (flexibility ratio, alignment weight, dropout), the
//! personalization matrix, and byte-level determinism.
//!
//! Every test prints exactly one `criterion NN PASS/FAIL` line; tolerances
//! and experiment configurations are pinned in this file.

use flexp_core::blocks::{forward_inference, grad_check, BlockKind};
use flexp_core::client::ClientRuntime;
use flexp_core::config::ExperimentConfig;
use flexp_core::data::{generate_federation, FederationSpec, TaskKind};
use flexp_core::loss::kl_divergence;
use flexp_core::model::{build_model, ModelConfig, Partition};
use flexp_core::optim::Hyper;
use flexp_core::protocols::{run, ProtocolKind, RunPlan};
use flexp_core::runner::{
    run_experiment, run_in_memory, split_equivalence_diff, sweep, wire_roundtrip_check,
    SweepParam,
};
use flexp_core::server::ServerRuntime;
use flexp_core::sim::DeviceProfile;
use flexp_core::tensor::Tensor;
use flexp_core::wire::{decode_message, encode_message, Message, MsgKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(num: u32, name: &str, passed: bool, detail: &str) {
    println!("criterion {num:02} {} — {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    assert!(passed, "criterion {num:02} ({name}) failed: {detail}");
}

fn pooled_se(a_std: f64, a_n: usize, b_std: f64, b_n: usize) -> f64 {
    (a_std * a_std / a_n as f64 + b_std * b_std / b_n as f64).sqrt()
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_gradient_correctness() {
    let mut worst_nonlinear: f64 = 0.0;
    let mut worst_linear: f64 = 0.0;
    for seed in 0..20u64 {
        for kind in [BlockKind::MlpResidual, BlockKind::AttentionMlpResidual] {
            worst_nonlinear = worst_nonlinear.max(grad_check(kind, seed));
        }
        for kind in [BlockKind::InputProj, BlockKind::OutputHead] {
            worst_linear = worst_linear.max(grad_check(kind, seed));
        }
    }
    report(
        1,
        "gradient correctness",
        worst_nonlinear < 1e-4 && worst_linear < 1e-6,
        &format!(
            "20 seeds: worst nonlinear rel err {worst_nonlinear:.3e} (tol 1e-4), \
             worst linear {worst_linear:.3e} (tol 1e-6)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Split-execution equivalence
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_split_equivalence() {
    let mut worst: f64 = 0.0;
    for q in [0.0, 0.1, 0.5, 1.0] {
        let diff = split_equivalence_diff(q, 50, 11).unwrap();
        worst = worst.max(diff);
    }
    report(
        2,
        "split-execution equivalence",
        worst <= 1e-9,
        &format!("q in {{0, 0.1, 0.5, 1.0}}, 50 steps: worst param diff {worst:.3e} (tol 1e-9)"),
    );
}

// ---------------------------------------------------------------------------
// 3. Alignment correctness
// ---------------------------------------------------------------------------

/// Softmax temperature used by the server's alignment divergence.
const ALIGN_TEMPERATURE: f64 = 0.25;

fn align_r(z_cl: &Tensor, z_hat: &Tensor) -> f64 {
    let inv_t = 1.0 / ALIGN_TEMPERATURE;
    let mut zs = z_cl.clone();
    for v in zs.data_mut() {
        *v *= inv_t;
    }
    let mut hs = z_hat.clone();
    for v in hs.data_mut() {
        *v *= inv_t;
    }
    kl_divergence(&zs, &hs, z_cl.shape().len() - 1).unwrap().0
}

#[test]
fn criterion_03_alignment_correctness() {
    let cfg = ModelConfig {
        input_dim: 6,
        hidden_dim: 8,
        num_middle_blocks: 4,
        num_classes: 4,
        block_kind: BlockKind::MlpResidual,
        seq_len: None,
    };
    let stack = build_model(&cfg, 3).unwrap();
    let part = Partition::new(4, 0.5).unwrap();
    let hyper = Hyper::sgd(0.05);

    // (a) client CL equals server copy: R must be exactly zero and the
    // alignment gradient must leave GRAD_DOWN bit-identical to a lambda=0
    // server fed the same traffic.
    let mut server_zero = ServerRuntime::new(stack.clone(), 0.0, hyper.clone(), 8);
    let mut server_lam = ServerRuntime::new(stack.clone(), 0.25, hyper.clone(), 8);
    server_zero.register_client(1, 0.5).unwrap();
    server_lam.register_client(1, 0.5).unwrap();
    let mut client = ClientRuntime::new(1, &stack, part.clone(), hyper.clone(), 8, Some(1));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input =
        Tensor::new(vec![4, 6], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let (act, probe) = client.client_forward(&input, vec![0, 1, 2, 3]).unwrap();
    let probe = probe.expect("probe expected on step 0");
    let down_a = server_zero.handle_activation_up(&act).unwrap();
    server_lam.handle_activation_up(&act).unwrap();
    let ack = server_lam.handle_align_probe(&probe).unwrap();
    let r_equal = ack.payload.data()[0];
    let (_, grad_up) = client.client_finalize_forward(&down_a).unwrap();
    let gd_zero = server_zero.handle_gradient_up(&grad_up).unwrap();
    let gd_lam = server_lam.handle_gradient_up(&grad_up).unwrap();
    let identical_graddown = gd_zero.payload.data() == gd_lam.payload.data();

    // (b) epsilon-perturbed z_CL: R > 0 with a finite-difference-consistent
    // gradient. The alignment gradient is extracted through the public
    // wire path by sending a zero head gradient, so GRAD_DOWN carries
    // lambda * dR/dz_CL alone.
    let lambda = 0.25;
    let mut server = ServerRuntime::new(stack.clone(), lambda, hyper.clone(), 8);
    server.register_client(2, 0.5).unwrap();
    let z_pl1 =
        Tensor::new(vec![4, 8], (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let mut z_cl = z_pl1.clone();
    for b in &server.middle_blocks()[..2] {
        z_cl = forward_inference(b, &z_cl).unwrap();
    }
    let z_hat = z_cl.clone();
    for (i, v) in z_cl.data_mut().iter_mut().enumerate() {
        *v += 0.01 * ((i as f64) * 1.3).sin();
    }
    let act = Message::new(MsgKind::ActUp, 2, 0, z_cl.clone());
    let act_down = server.handle_activation_up(&act).unwrap();
    let probe = Message::new(MsgKind::AlignProbe, 2, 0, z_pl1);
    let r_pert = server.handle_align_probe(&probe).unwrap().payload.data()[0];
    let zero_grad = Tensor::new(
        act_down.payload.shape().to_vec(),
        vec![0.0; act_down.payload.len()],
    )
    .unwrap();
    let gd = server
        .handle_gradient_up(&Message::new(MsgKind::GradUp, 2, 0, zero_grad))
        .unwrap();
    // Recompute the replay reference the probe used. z_hat is the forward
    // of z_pl1 through the unperturbed prefix, which equals z_cl before
    // the perturbation was applied (captured above).
    let mut worst_fd: f64 = 0.0;
    let h = 1e-5;
    for i in (0..z_cl.len()).step_by(5) {
        let mut zp = z_cl.clone();
        zp.data_mut()[i] += h;
        let r1 = align_r(&zp, &z_hat);
        zp.data_mut()[i] -= 2.0 * h;
        let r0 = align_r(&zp, &z_hat);
        let fd = (r1 - r0) / (2.0 * h);
        let got = gd.payload.data()[i] / lambda;
        worst_fd = worst_fd.max((got - fd).abs() / fd.abs().max(1e-4));
    }

    // (c) lambda = 0: probing on vs. off leaves training bit-identical.
    let fed = generate_federation(&FederationSpec {
        num_clients: 3,
        input_dim: 6,
        num_classes: 4,
        samples_per_client: 40,
        theta_max: 0.8,
        label_alpha: 1.0,
        noise_sigma: 0.3,
        train_fraction: 0.8,
        seed: 2,
        clusters_per_class: 1,
        task: TaskKind::Prototype,
    })
    .unwrap();
    let device = DeviceProfile {
        name: "edge".into(),
        fwd_seconds_per_block_per_sample: 0.001,
        bwd_multiplier: 2.0,
        memory_bytes_budget: 1 << 30,
        uplink_bytes_per_s: 1e6,
        downlink_bytes_per_s: 1e7,
        latency_s: 0.01,
        dropout_prob: 0.0,
    };
    let devices = vec![device; 3];
    let mut plan = RunPlan {
        protocol: ProtocolKind::FlexpSfl,
        target_steps: Some(60),
        time_budget_s: None,
        qs: vec![0.5; 3],
        aggregation_period: None,
        local_steps: None,
        lambda: 0.0,
        k_align: Some(3),
        batch_size: 4,
        hyper: Hyper::sgd(0.1),
        element_size: 8,
        server_seconds_per_block_per_sample: 0.0,
    };
    let probed = run(&cfg, &plan, &fed, &devices, 7).unwrap();
    plan.k_align = None;
    let silent = run(&cfg, &plan, &fed, &devices, 7).unwrap();
    let bit_identical = probed
        .final_stacks
        .iter()
        .zip(&silent.final_stacks)
        .all(|(a, b)| a.flatten() == b.flatten());

    let passed = r_equal == 0.0
        && identical_graddown
        && r_pert > 0.0
        && worst_fd < 1e-4
        && bit_identical;
    report(
        3,
        "alignment correctness",
        passed,
        &format!(
            "R(equal) = {r_equal:.1e} (want 0), GRAD_DOWN bit-identical at zero grad: \
             {identical_graddown}, R(perturbed) = {r_pert:.3e} > 0, FD rel err \
             {worst_fd:.3e} (tol 1e-4), lambda=0 probe on/off bit-identical: {bit_identical}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. No-aggregation and constant payload
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_no_aggregation_constant_payload() {
    let cfg = ModelConfig {
        input_dim: 8,
        hidden_dim: 10,
        num_middle_blocks: 5,
        num_classes: 4,
        block_kind: BlockKind::MlpResidual,
        seq_len: None,
    };
    let fed = generate_federation(&FederationSpec {
        num_clients: 4,
        input_dim: 8,
        num_classes: 4,
        samples_per_client: 60,
        theta_max: 1.0,
        label_alpha: 0.7,
        noise_sigma: 0.3,
        train_fraction: 0.8,
        seed: 4,
        clusters_per_class: 1,
        task: TaskKind::Prototype,
    })
    .unwrap();
    let device = DeviceProfile {
        name: "edge".into(),
        fwd_seconds_per_block_per_sample: 0.001,
        bwd_multiplier: 2.0,
        memory_bytes_budget: 1 << 30,
        uplink_bytes_per_s: 1e6,
        downlink_bytes_per_s: 1e7,
        latency_s: 0.01,
        dropout_prob: 0.0,
    };
    let devices = vec![device; 4];
    let mut totals = Vec::new();
    let mut param_frames = 0;
    for q in [0.1, 0.2, 0.5] {
        let plan = RunPlan {
            protocol: ProtocolKind::FlexpSfl,
            target_steps: Some(40),
            time_budget_s: None,
            qs: vec![q; 4],
            aggregation_period: None,
            local_steps: None,
            lambda: 0.0,
            k_align: None,
            batch_size: 4,
            hyper: Hyper::sgd(0.1),
            element_size: 4,
            server_seconds_per_block_per_sample: 0.0,
        };
        let out = run(&cfg, &plan, &fed, &devices, 6).unwrap();
        param_frames += out.ledger.param_frames();
        totals.push(out.ledger.total_bytes());
    }
    let constant = totals.windows(2).all(|w| w[0] == w[1]);
    report(
        4,
        "no aggregation, constant payload",
        param_frames == 0 && constant,
        &format!(
            "PARAM_* frames: {param_frames} (want 0); ACT/GRAD bytes across q in \
             {{0.1, 0.2, 0.5}}: {totals:?} (must be identical)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Straggler speedup
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_straggler_speedup() {
    let cfg = ModelConfig {
        input_dim: 12,
        hidden_dim: 12,
        num_middle_blocks: 6,
        num_classes: 4,
        block_kind: BlockKind::MlpResidual,
        seq_len: None,
    };
    let fed = generate_federation(&FederationSpec {
        num_clients: 5,
        input_dim: 12,
        num_classes: 4,
        samples_per_client: 80,
        theta_max: 1.0,
        label_alpha: 0.7,
        noise_sigma: 0.3,
        train_fraction: 0.8,
        seed: 9,
        clusters_per_class: 1,
        task: TaskKind::Prototype,
    })
    .unwrap();
    let fast = DeviceProfile {
        name: "fast".into(),
        fwd_seconds_per_block_per_sample: 0.001,
        bwd_multiplier: 2.0,
        memory_bytes_budget: 1 << 30,
        uplink_bytes_per_s: 1e6,
        downlink_bytes_per_s: 1e7,
        latency_s: 0.01,
        dropout_prob: 0.0,
    };
    let slow = DeviceProfile {
        name: "slow".into(),
        fwd_seconds_per_block_per_sample: 0.01, // 10:1 compute heterogeneity
        ..fast.clone()
    };
    let devices = vec![fast.clone(), fast.clone(), fast.clone(), fast, slow];
    let time_for = |protocol: ProtocolKind| -> f64 {
        let plan = RunPlan {
            protocol,
            target_steps: Some(500),
            time_budget_s: None,
            qs: vec![0.5; 5],
            aggregation_period: if protocol == ProtocolKind::FlexpSfl { None } else { Some(1) },
            local_steps: if protocol == ProtocolKind::Fedavg { Some(1) } else { None },
            lambda: 0.0,
            k_align: None,
            batch_size: 4,
            hyper: Hyper::sgd(0.1),
            element_size: 4,
            server_seconds_per_block_per_sample: 0.0,
        };
        run(&cfg, &plan, &fed, &devices, 12).unwrap().ledger.total_sim_time_s
    };
    let t_flexp = time_for(ProtocolKind::FlexpSfl);
    let t_sfl = time_for(ProtocolKind::Sfl);
    let t_fedavg = time_for(ProtocolKind::Fedavg);
    report(
        5,
        "straggler speedup",
        t_flexp <= 0.5 * t_sfl && t_sfl <= t_fedavg,
        &format!(
            "500 steps, 10:1 heterogeneity: flexp {t_flexp:.1}s <= 0.5 * sfl {t_sfl:.1}s, \
             sfl <= fedavg {t_fedavg:.1}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// 6.-9. Trend experiments
// ---------------------------------------------------------------------------

/// Ten clients labelling pairs of concepts with client-specific tables; a
/// narrow stack trained near the SGD stability edge, where server-side
/// blocks suffer stale, conflicting updates and private blocks do not.
const Q_ABLATION_CONFIG: &str = r#"
seeds = [1]
[model]
input_dim = 32
hidden_dim = 12
num_middle_blocks = 6
num_classes = 8
block_kind = "mlp_residual"
[federation]
num_clients = 10
input_dim = 32
num_classes = 8
samples_per_client = 600
theta_max = 0.5
label_alpha = 1.0
noise_sigma = 0.15
train_fraction = 0.8
seed = 0
task = "conjunction"
[plan]
protocol = "flexp_sfl"
target_steps = 6000
qs = [0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]
batch_size = 8
optimizer = "sgd"
lr = 0.35
element_size = 4
[[devices]]
clients = [0, 1, 2, 3, 4, 5, 6, 7, 8]
[devices.profile]
name = "fast"
fwd_seconds_per_block_per_sample = 0.001
memory_bytes_budget = 1073741824
uplink_bytes_per_s = 1e6
downlink_bytes_per_s = 1e7
latency_s = 0.01
[[devices]]
clients = [9]
[devices.profile]
name = "slow"
fwd_seconds_per_block_per_sample = 0.01
memory_bytes_budget = 1073741824
uplink_bytes_per_s = 1e6
downlink_bytes_per_s = 1e7
latency_s = 0.01
"#;

/// Ten clients, narrow shared stack, rotated prototypes: the server-side
/// blocks must serve every client's drifted cut distribution, which is
/// where the alignment regularizer earns its keep.
const LAMBDA_ABLATION_CONFIG: &str = r#"
seeds = [1]
[model]
input_dim = 32
hidden_dim = 8
num_middle_blocks = 6
num_classes = 8
block_kind = "mlp_residual"
[federation]
num_clients = 10
input_dim = 32
num_classes = 8
samples_per_client = 200
theta_max = 0.5
label_alpha = 1.0
noise_sigma = 0.3
train_fraction = 0.8
seed = 0
[plan]
protocol = "flexp_sfl"
target_steps = 6000
qs = [0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]
k_align = 4
batch_size = 8
optimizer = "sgd"
lr = 0.15
element_size = 4
[[devices]]
clients = [0, 1, 2, 3, 4, 5, 6, 7, 8]
[devices.profile]
name = "fast"
fwd_seconds_per_block_per_sample = 0.001
memory_bytes_budget = 1073741824
uplink_bytes_per_s = 1e6
downlink_bytes_per_s = 1e7
latency_s = 0.01
[[devices]]
clients = [9]
[devices.profile]
name = "slow"
fwd_seconds_per_block_per_sample = 0.01
memory_bytes_budget = 1073741824
uplink_bytes_per_s = 1e6
downlink_bytes_per_s = 1e7
latency_s = 0.01
"#;

/// Five clients with strong task rotations for the personalization matrix.
const CROSSEVAL_CONFIG: &str = r#"
seeds = [1]
[model]
input_dim = 32
hidden_dim = 16
num_middle_blocks = 6
num_classes = 8
block_kind = "mlp_residual"
[federation]
num_clients = 5
input_dim = 32
num_classes = 8
samples_per_client = 400
theta_max = 1.5
label_alpha = 0.5
noise_sigma = 0.3
train_fraction = 0.8
seed = 0
[plan]
protocol = "flexp_sfl"
target_steps = 3000
qs = [0.5, 0.5, 0.5, 0.5, 0.5]
lambda = 0.25
k_align = 4
batch_size = 8
optimizer = "sgd"
lr = 0.15
element_size = 4
[[devices]]
clients = [0, 1, 2, 3]
[devices.profile]
name = "fast"
fwd_seconds_per_block_per_sample = 0.001
memory_bytes_budget = 1073741824
uplink_bytes_per_s = 1e6
downlink_bytes_per_s = 1e7
latency_s = 0.01
[[devices]]
clients = [4]
[devices.profile]
name = "slow"
fwd_seconds_per_block_per_sample = 0.01
memory_bytes_budget = 1073741824
uplink_bytes_per_s = 1e6
downlink_bytes_per_s = 1e7
latency_s = 0.01
"#;

#[test]
fn criterion_06_q_ablation() {
    let cfg = ExperimentConfig::from_str(Q_ABLATION_CONFIG).unwrap();
    let seeds: Vec<u64> = (1..=8).collect();
    let rows = sweep(&cfg, SweepParam::Q, &[0.1, 0.2, 0.5], &seeds, 4).unwrap();
    let m: Vec<f64> = rows.iter().map(|r| r.personalized_mean).collect();
    let non_decreasing = m[0] <= m[1] && m[1] <= m[2];
    let se = pooled_se(rows[0].personalized_std, rows[0].seeds, rows[2].personalized_std, rows[2].seeds);
    let margin = m[2] - m[0];
    report(
        6,
        "q ablation",
        non_decreasing && margin > se,
        &format!(
            "personalized acc over q {{0.1, 0.2, 0.5}}: {:.4} <= {:.4} <= {:.4}, \
             extreme margin {margin:.4} > pooled SE {se:.4} ({} seeds)",
            m[0], m[1], m[2], seeds.len()
        ),
    );
}

#[test]
fn criterion_07_lambda_ablation() {
    let cfg = ExperimentConfig::from_str(LAMBDA_ABLATION_CONFIG).unwrap();
    let seeds: Vec<u64> = (1..=10).collect();
    let rows = sweep(&cfg, SweepParam::Lambda, &[0.0, 0.25, 0.5], &seeds, 4).unwrap();
    let g: Vec<f64> = rows.iter().map(|r| r.global_mean).collect();
    let non_decreasing = g[0] <= g[1] && g[1] <= g[2];
    let faster_without = rows[0].plateau_mean <= rows[2].plateau_mean;
    report(
        7,
        "lambda ablation",
        non_decreasing && faster_without,
        &format!(
            "global acc over lambda {{0, 0.25, 0.5}}: {:.4} <= {:.4} <= {:.4}; \
             lambda=0 plateau {:.1}s <= lambda=0.5 plateau {:.1}s ({} seeds)",
            g[0], g[1], g[2], rows[0].plateau_mean, rows[2].plateau_mean, seeds.len()
        ),
    );
}

/// Dropout is examined from both ends of the same phenomenon: a fixed
/// workload takes longer to complete, and a fixed wall-clock budget
/// (pinned to the zero-dropout completion time) trains less.
#[test]
fn criterion_08_dropout_robustness() {
    let cfg = ExperimentConfig::from_str(LAMBDA_ABLATION_CONFIG).unwrap();
    let seeds: Vec<u64> = (1..=8).collect();
    let values = [0.0, 0.1, 0.5];

    let time_rows = sweep(&cfg, SweepParam::Dropout, &values, &seeds, 4).unwrap();
    let t: Vec<f64> = time_rows.iter().map(|r| r.time_mean).collect();
    let time_non_decreasing = t[0] <= t[1] && t[1] <= t[2];
    let time_se = pooled_se(time_rows[0].time_std, time_rows[0].seeds, time_rows[2].time_std, time_rows[2].seeds);
    let time_margin = t[2] - t[0];

    let mut budget_cfg = cfg.clone();
    budget_cfg.plan.target_steps = None;
    budget_cfg.plan.time_budget_s = Some(t[0] * 1.001);
    let acc_rows = sweep(&budget_cfg, SweepParam::Dropout, &values, &seeds, 4).unwrap();
    let a: Vec<f64> = acc_rows.iter().map(|r| r.personalized_mean).collect();
    let acc_non_increasing = a[0] >= a[1] && a[1] >= a[2];
    let acc_se = pooled_se(acc_rows[0].personalized_std, acc_rows[0].seeds, acc_rows[2].personalized_std, acc_rows[2].seeds);
    let acc_margin = a[0] - a[2];

    report(
        8,
        "dropout robustness",
        time_non_decreasing
            && time_margin > time_se
            && acc_non_increasing
            && acc_margin > acc_se,
        &format!(
            "dropout {{0, 0.1, 0.5}}: fixed-workload time {:.1} <= {:.1} <= {:.1}s \
             (margin {time_margin:.1} > SE {time_se:.2}); fixed-budget acc \
             {:.4} >= {:.4} >= {:.4} (margin {acc_margin:.4} > SE {acc_se:.4})",
            t[0], t[1], t[2], a[0], a[1], a[2]
        ),
    );
}

#[test]
fn criterion_09_personalization_matrix() {
    let cfg = ExperimentConfig::from_str(CROSSEVAL_CONFIG).unwrap();
    let seeds: Vec<u64> = (1..=5).collect();
    let n = cfg.federation.num_clients;
    let mut mats = Vec::new();
    for &s in &seeds {
        mats.push(run_in_memory(&cfg, s).unwrap().crosseval);
    }
    let diff_stats = |diffs: &[f64]| -> (f64, f64) {
        let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>()
            / (diffs.len() as f64 - 1.0);
        (m, (var / diffs.len() as f64).sqrt())
    };
    let mut passed = true;
    let mut worst = f64::INFINITY;
    for i in 0..n {
        // (a) own shard vs. this model's mean accuracy elsewhere
        let diffs: Vec<f64> = mats
            .iter()
            .map(|m| {
                let off = (0..n).filter(|&j| j != i).map(|j| m[i][j]).sum::<f64>()
                    / (n - 1) as f64;
                m[i][i] - off
            })
            .collect();
        let (mean, se) = diff_stats(&diffs);
        passed &= mean > se;
        worst = worst.min(mean / se.max(1e-12));
        // (b) own shard vs. every other model's accuracy on it
        for k in 0..n {
            if k == i {
                continue;
            }
            let diffs: Vec<f64> = mats.iter().map(|m| m[i][i] - m[k][i]).collect();
            let (mean, se) = diff_stats(&diffs);
            passed &= mean > se;
            worst = worst.min(mean / se.max(1e-12));
        }
    }
    report(
        9,
        "personalization matrix",
        passed,
        &format!(
            "lambda = 0.25, {} seeds: every diagonal beats its row mean and column \
             rivals; worst margin {worst:.1} standard errors (need > 1)",
            seeds.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. Determinism & wire layout
// ---------------------------------------------------------------------------

const GOLDEN_F64_FRAME: &str = "4650534601010300000009000000000000005300000000000000020200000003000000000000000000f03f00000000000004c0000000000000d03f0000000000000840000000000000c0bf0000000000002040";
const GOLDEN_F32_FRAME: &str = "465053460104070000000c000000000000003b000000000000000202000000030000000000803f000020c00000803e00004040000000be00000041";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn criterion_10_determinism_and_wire() {
    let cfg = ExperimentConfig::from_str(CROSSEVAL_CONFIG).unwrap();
    let mut small = cfg.clone();
    small.plan.target_steps = Some(200);
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run_experiment(&small, 1, dir_a.path()).unwrap();
    run_experiment(&small, 1, dir_b.path()).unwrap();
    let mut identical = true;
    for name in ["timeline.csv", "summary.csv", "crosseval.csv"] {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        identical &= a == b;
    }

    let roundtrips = wire_roundtrip_check(1000, 7).is_ok();

    let payload = Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.25, 3.0, -0.125, 8.0]).unwrap();
    let m8 = Message::new(MsgKind::ActUp, 3, 9, payload.clone());
    let m4 = Message::new(MsgKind::GradDown, 7, 12, payload);
    let golden = hex(&encode_message(&m8, 8)) == GOLDEN_F64_FRAME
        && hex(&encode_message(&m4, 4)) == GOLDEN_F32_FRAME
        && decode_message(&encode_message(&m8, 8)).unwrap().payload.data()
            == m8.payload.data();

    report(
        10,
        "determinism and wire layout",
        identical && roundtrips && golden,
        &format!(
            "repeated runs byte-identical CSVs: {identical}; 1000 wire frames \
             round-trip: {roundtrips}; golden frame layouts match: {golden}"
        ),
    );
}
