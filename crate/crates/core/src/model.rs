//! The layered model, its four-way split, and size accounting.

use crate::blocks::{
    backward_block, forward_block, AttnParams, BlockKind, BlockParams, MlpParams, Tape,
};
use crate::error::{Error, Result};
use crate::loss::cross_entropy_loss;
use crate::optim::{optimizer_step, Hyper, OptState};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_middle_blocks: usize,
    pub num_classes: usize,
    pub block_kind: BlockKind,
    /// Sequence length; required for attention middle blocks, ignored otherwise.
    #[serde(default)]
    pub seq_len: Option<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_middle_blocks < 1 {
            return Err(Error::Config("model.num_middle_blocks must be >= 1".into()));
        }
        for (name, v) in [
            ("model.input_dim", self.input_dim),
            ("model.hidden_dim", self.hidden_dim),
            ("model.num_classes", self.num_classes),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        match self.block_kind {
            BlockKind::AttentionMlpResidual => {
                if self.seq_len.map_or(true, |s| s < 1) {
                    return Err(Error::Config(
                        "model.seq_len must be >= 1 for attention blocks".into(),
                    ));
                }
            }
            BlockKind::MlpResidual => {}
            _ => {
                return Err(Error::Config(
                    "model.block_kind must be mlp_residual or attention_mlp_residual".into(),
                ))
            }
        }
        Ok(())
    }

    /// Lift a batch of flat feature rows into the model's input tensor.
    ///
    /// Sequence models tile each sample across the sequence axis.
    pub fn make_input(&self, rows: &[&[f64]]) -> Result<Tensor> {
        let batch = rows.len();
        match (self.block_kind, self.seq_len) {
            (BlockKind::AttentionMlpResidual, Some(seq)) => {
                let mut data = Vec::with_capacity(batch * seq * self.input_dim);
                for r in rows {
                    for _ in 0..seq {
                        data.extend_from_slice(r);
                    }
                }
                Tensor::new(vec![batch, seq, self.input_dim], data)
            }
            _ => {
                let mut data = Vec::with_capacity(batch * self.input_dim);
                for r in rows {
                    data.extend_from_slice(r);
                }
                Tensor::new(vec![batch, self.input_dim], data)
            }
        }
    }
}

/// The full stack: input block, M homogeneous middle blocks, head block.
#[derive(Debug, Clone)]
pub struct LayerStack {
    pub input_block: BlockParams,
    pub middle_blocks: Vec<BlockParams>,
    pub head_block: BlockParams,
}

impl LayerStack {
    pub fn num_middle(&self) -> usize {
        self.middle_blocks.len()
    }

    pub fn param_count(&self) -> usize {
        self.input_block.param_count()
            + self.middle_blocks.iter().map(BlockParams::param_count).sum::<usize>()
            + self.head_block.param_count()
    }

    pub fn param_bytes(&self, element_size: usize) -> usize {
        self.param_count() * element_size
    }

    pub fn max_abs_diff(&self, other: &LayerStack) -> f64 {
        let mut worst = self.input_block.max_abs_diff(&other.input_block);
        for (a, b) in self.middle_blocks.iter().zip(&other.middle_blocks) {
            worst = worst.max(a.max_abs_diff(b));
        }
        worst.max(self.head_block.max_abs_diff(&other.head_block))
    }

    /// All parameters flattened to one vector, fixed traversal order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        let mut push = |b: &BlockParams| {
            for (_, t) in b.tensors() {
                out.extend_from_slice(t.data());
            }
        };
        push(&self.input_block);
        for b in &self.middle_blocks {
            push(b);
        }
        push(&self.head_block);
        out
    }

    /// Inverse of [`flatten`]: overwrite parameters from a flat vector.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "unflatten: {} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        let mut pull = |b: &mut BlockParams| {
            for t in b.tensors_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        };
        pull(&mut self.input_block);
        for b in &mut self.middle_blocks {
            pull(b);
        }
        pull(&mut self.head_block);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

/// Number of middle blocks placed on the client for flexibility ratio `q`.
///
/// Round-half-up; q=0 puts everything but the input and head on the server,
/// q=1 keeps every middle block local.
pub fn partition(num_middle: usize, q: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Input(format!("flexibility ratio q={q} outside [0, 1]")));
    }
    Ok(((q * num_middle as f64 + 0.5).floor() as usize).min(num_middle))
}

/// The four-way split for one client: PL1 + cl middle blocks + PL2 stay on
/// the client, the remaining middle blocks are served remotely.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub q: f64,
    pub cl_count: usize,
    pub num_middle: usize,
}

impl Partition {
    pub fn new(num_middle: usize, q: f64) -> Result<Partition> {
        let cl_count = partition(num_middle, q)?;
        Ok(Partition { q, cl_count, num_middle })
    }

    /// Middle-block indices resident on the client.
    pub fn client_middle(&self) -> std::ops::Range<usize> {
        0..self.cl_count
    }

    /// Middle-block indices served by the server for this client.
    pub fn server_middle(&self) -> std::ops::Range<usize> {
        self.cl_count..self.num_middle
    }
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

fn init_linear(rng: &mut ChaCha8Rng, din: usize, dout: usize) -> (Tensor, Tensor) {
    let normal = Normal::new(0.0, INIT_STD).unwrap();
    let w: Vec<f64> = (0..din * dout).map(|_| normal.sample(rng)).collect();
    (Tensor::new(vec![din, dout], w).unwrap(), Tensor::zeros(&[dout]))
}

fn init_mlp(rng: &mut ChaCha8Rng, d: usize) -> MlpParams {
    let (w1, b1) = init_linear(rng, d, 4 * d);
    let (w2, b2) = init_linear(rng, 4 * d, d);
    MlpParams {
        ln_gain: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
        ln_bias: Tensor::zeros(&[d]),
        w1,
        b1,
        w2,
        b2,
    }
}

fn init_attn(rng: &mut ChaCha8Rng, d: usize) -> AttnParams {
    let (wq, bq) = init_linear(rng, d, d);
    let (wk, bk) = init_linear(rng, d, d);
    let (wv, bv) = init_linear(rng, d, d);
    let (wo, bo) = init_linear(rng, d, d);
    AttnParams {
        ln_gain: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
        ln_bias: Tensor::zeros(&[d]),
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
    }
}

/// Deterministic initialization: identical `(config, seed)` pairs produce
/// element-wise identical stacks.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<LayerStack> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.hidden_dim;
    let (w, b) = init_linear(&mut rng, config.input_dim, d);
    let input_block = BlockParams::InputProj { w, b };
    let middle_blocks = (0..config.num_middle_blocks)
        .map(|_| match config.block_kind {
            BlockKind::MlpResidual => BlockParams::MlpResidual(init_mlp(&mut rng, d)),
            BlockKind::AttentionMlpResidual => BlockParams::AttentionMlpResidual {
                attn: init_attn(&mut rng, d),
                mlp: init_mlp(&mut rng, d),
            },
            _ => unreachable!("validated"),
        })
        .collect();
    let (w, b) = init_linear(&mut rng, d, config.num_classes);
    Ok(LayerStack { input_block, middle_blocks, head_block: BlockParams::OutputHead { w, b } })
}

// ---------------------------------------------------------------------------
// Monolithic execution (training oracle, pretraining, evaluation)
// ---------------------------------------------------------------------------

/// Forward through the whole stack, recording one tape per block.
pub fn stack_forward(stack: &LayerStack, input: &Tensor) -> Result<(Tensor, Vec<Tape>)> {
    let mut tapes = Vec::with_capacity(stack.num_middle() + 2);
    let mut tape = Tape::new();
    let mut h = forward_block(&stack.input_block, input, &mut tape)?;
    tapes.push(tape);
    for block in &stack.middle_blocks {
        let mut tape = Tape::new();
        h = forward_block(block, &h, &mut tape)?;
        tapes.push(tape);
    }
    let mut tape = Tape::new();
    let logits = forward_block(&stack.head_block, &h, &mut tape)?;
    tapes.push(tape);
    Ok((logits, tapes))
}

/// Backward over tapes from [`stack_forward`]; returns per-block gradients
/// in stack order (input, middles.., head).
pub fn stack_backward(tapes: &mut [Tape], logit_grad: &Tensor) -> Result<Vec<BlockParams>> {
    let mut grads: Vec<BlockParams> = Vec::with_capacity(tapes.len());
    let mut g = logit_grad.clone();
    for tape in tapes.iter_mut().rev() {
        let (gi, pg) = backward_block(tape, &g)?;
        grads.push(pg);
        g = gi;
    }
    grads.reverse();
    Ok(grads)
}

/// Optimizer state for every block of a stack.
pub struct StackOptState {
    pub input: OptState,
    pub middle: Vec<OptState>,
    pub head: OptState,
}

impl StackOptState {
    pub fn new(stack: &LayerStack) -> StackOptState {
        StackOptState {
            input: OptState::new(&stack.input_block),
            middle: stack.middle_blocks.iter().map(OptState::new).collect(),
            head: OptState::new(&stack.head_block),
        }
    }
}

/// One full supervised step on the monolithic stack. Returns the loss.
pub fn monolithic_step(
    stack: &mut LayerStack,
    state: &mut StackOptState,
    input: &Tensor,
    labels: &[usize],
    hyper: &Hyper,
) -> Result<f64> {
    let (logits, mut tapes) = stack_forward(stack, input)?;
    let (loss, grad) = cross_entropy_loss(&logits, labels)?;
    let grads = stack_backward(&mut tapes, &grad)?;
    let m = stack.num_middle();
    optimizer_step(&mut stack.input_block, &grads[0], &mut state.input, hyper)?;
    for i in 0..m {
        optimizer_step(&mut stack.middle_blocks[i], &grads[1 + i], &mut state.middle[i], hyper)?;
    }
    optimizer_step(&mut stack.head_block, &grads[1 + m], &mut state.head, hyper)?;
    Ok(loss)
}

/// Argmax accuracy of the stack on a labelled set of flat feature rows.
pub fn evaluate_stack(
    stack: &LayerStack,
    config: &ModelConfig,
    features: &[Vec<f64>],
    labels: &[usize],
) -> Result<f64> {
    if features.is_empty() {
        return Err(Error::Input("evaluate: empty test set".into()));
    }
    let classes = config.num_classes;
    let mut correct = 0usize;
    // fixed-size chunks keep activation memory bounded
    for (chunk_x, chunk_y) in features.chunks(64).zip(labels.chunks(64)) {
        let rows: Vec<&[f64]> = chunk_x.iter().map(|v| v.as_slice()).collect();
        let input = config.make_input(&rows)?;
        let (logits, _) = stack_forward(stack, &input)?;
        for (r, &label) in chunk_y.iter().enumerate() {
            let row = &logits.data()[r * classes..(r + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / features.len() as f64)
}

// ---------------------------------------------------------------------------
// Payload accounting
// ---------------------------------------------------------------------------

/// Bytes of one tensor payload on the wire: elements times element size
/// plus a fixed frame header.
pub fn payload_bytes(tensor_shape: &[usize], element_size: usize, header: usize) -> usize {
    tensor_shape.iter().product::<usize>() * element_size + header
}
