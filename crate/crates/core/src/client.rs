//! Client runtime: the personalized PL1 / CL / PL2 layers and the two-phase
//! split step (forward up to the cut, then head loss and backward once the
//! served activations come back).

use crate::blocks::{backward_block, forward_block, BlockParams, Tape};
use crate::error::{Error, Result};
use crate::loss::cross_entropy_loss;
use crate::model::{LayerStack, ModelConfig, Partition};
use crate::optim::{optimizer_step, Hyper, OptState};
use crate::tensor::Tensor;
use crate::wire::{quantize_tensor, Message, MsgKind};

struct PendingStep {
    step_id: u64,
    input_tape: Tape,
    cl_tapes: Vec<Tape>,
    labels: Vec<usize>,
}

pub struct ClientRuntime {
    pub id: u32,
    pub partition: Partition,
    input_block: BlockParams,
    cl_blocks: Vec<BlockParams>,
    head_block: BlockParams,
    opt_input: OptState,
    opt_cl: Vec<OptState>,
    opt_head: OptState,
    hyper: Hyper,
    element_size: usize,
    /// Probe cadence in steps; `None` disables alignment probing.
    k_align: Option<u64>,
    next_step: u64,
    pending: Option<PendingStep>,
    /// Largest activation cache (tape elements) seen so far.
    peak_cache_elements: usize,
    /// Alignment divergence values acknowledged by the server, (step, R).
    pub align_log: Vec<(u64, f64)>,
}

impl ClientRuntime {
    /// Carve this client's resident layers out of a full initial stack.
    pub fn new(
        id: u32,
        stack: &LayerStack,
        partition: Partition,
        hyper: Hyper,
        element_size: usize,
        k_align: Option<u64>,
    ) -> ClientRuntime {
        let cl_blocks: Vec<BlockParams> =
            stack.middle_blocks[partition.client_middle()].to_vec();
        let opt_cl = cl_blocks.iter().map(OptState::new).collect();
        ClientRuntime {
            id,
            partition,
            opt_input: OptState::new(&stack.input_block),
            opt_head: OptState::new(&stack.head_block),
            input_block: stack.input_block.clone(),
            cl_blocks,
            head_block: stack.head_block.clone(),
            opt_cl,
            hyper,
            element_size,
            k_align,
            next_step: 0,
            pending: None,
            peak_cache_elements: 0,
            align_log: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.next_step
    }

    pub fn in_flight(&self) -> bool {
        self.pending.is_some()
    }

    pub fn resident_param_count(&self) -> usize {
        self.input_block.param_count()
            + self.cl_blocks.iter().map(BlockParams::param_count).sum::<usize>()
            + self.head_block.param_count()
    }

    pub fn peak_cache_elements(&self) -> usize {
        self.peak_cache_elements
    }

    /// Phase one: forward through PL1 and the local middle blocks, emit
    /// ACT_UP and, on probe steps, ALIGN_PROBE carrying z_PL1.
    ///
    /// At most one step may be in flight per client.
    pub fn client_forward(
        &mut self,
        input: &Tensor,
        labels: Vec<usize>,
    ) -> Result<(Message, Option<Message>)> {
        if self.pending.is_some() {
            return Err(Error::State(format!(
                "client {}: step {} still in flight",
                self.id,
                self.pending.as_ref().unwrap().step_id
            )));
        }
        let step_id = self.next_step;
        let mut input_tape = Tape::new();
        let z_pl1 = forward_block(&self.input_block, input, &mut input_tape)?;
        let mut h = z_pl1.clone();
        let mut cl_tapes = Vec::with_capacity(self.cl_blocks.len());
        for block in &self.cl_blocks {
            let mut tape = Tape::new();
            h = forward_block(block, &h, &mut tape)?;
            cl_tapes.push(tape);
        }
        let z_cl = quantize_tensor(&h, self.element_size);
        let probe = match self.k_align {
            Some(k) if step_id % k == 0 && self.partition.cl_count > 0 => Some(Message::new(
                MsgKind::AlignProbe,
                self.id,
                step_id,
                quantize_tensor(&z_pl1, self.element_size),
            )),
            _ => None,
        };
        let cache: usize = input_tape.cached_elements()
            + cl_tapes.iter().map(Tape::cached_elements).sum::<usize>();
        self.peak_cache_elements = self.peak_cache_elements.max(cache);
        self.pending = Some(PendingStep { step_id, input_tape, cl_tapes, labels });
        Ok((Message::new(MsgKind::ActUp, self.id, step_id, z_cl), probe))
    }

    /// Phase two: head forward on z_SL, loss, head backward and update.
    /// Returns the loss and the GRAD_UP frame for the server.
    pub fn client_finalize_forward(&mut self, msg: &Message) -> Result<(f64, Message)> {
        if msg.kind != MsgKind::ActDown {
            return Err(Error::Protocol(format!("expected ACT_DOWN, got {:?}", msg.kind)));
        }
        let pending = self
            .pending
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("client {}: no step in flight", self.id)))?;
        if pending.step_id != msg.step_id {
            return Err(Error::Protocol(format!(
                "client {}: ACT_DOWN for step {}, expected {}",
                self.id, msg.step_id, pending.step_id
            )));
        }
        let mut head_tape = Tape::new();
        let logits = forward_block(&self.head_block, &msg.payload, &mut head_tape)?;
        let (loss, logit_grad) = cross_entropy_loss(&logits, &pending.labels)?;
        let (g_sl, head_grads) = backward_block(&mut head_tape, &logit_grad)?;
        optimizer_step(&mut self.head_block, &head_grads, &mut self.opt_head, &self.hyper)?;
        let payload = quantize_tensor(&g_sl, self.element_size);
        Ok((loss, Message::new(MsgKind::GradUp, self.id, msg.step_id, payload)))
    }

    /// Phase three: GRAD_DOWN closes the step; backward through the local
    /// middle blocks and PL1, update everything, clear the in-flight slot.
    pub fn client_apply_cut_gradient(&mut self, msg: &Message) -> Result<()> {
        if msg.kind != MsgKind::GradDown {
            return Err(Error::Protocol(format!("expected GRAD_DOWN, got {:?}", msg.kind)));
        }
        let mut pending = self
            .pending
            .take()
            .ok_or_else(|| Error::Protocol(format!("client {}: no step in flight", self.id)))?;
        if pending.step_id != msg.step_id {
            self.pending = Some(pending);
            return Err(Error::Protocol(format!(
                "client {}: GRAD_DOWN for step {}, expected another",
                self.id, msg.step_id
            )));
        }
        let mut g = msg.payload.clone();
        for (i, tape) in pending.cl_tapes.iter_mut().enumerate().rev() {
            let (gi, pg) = backward_block(tape, &g)?;
            optimizer_step(&mut self.cl_blocks[i], &pg, &mut self.opt_cl[i], &self.hyper)?;
            g = gi;
        }
        let (_, pg) = backward_block(&mut pending.input_tape, &g)?;
        optimizer_step(&mut self.input_block, &pg, &mut self.opt_input, &self.hyper)?;
        self.next_step += 1;
        Ok(())
    }

    pub fn record_align_ack(&mut self, msg: &Message) {
        self.align_log.push((msg.step_id, msg.payload.data()[0]));
    }

    /// All resident parameters (PL1, CL blocks, PL2) flattened in order.
    pub fn export_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.resident_param_count());
        let mut push = |b: &BlockParams| {
            for (_, t) in b.tensors() {
                out.extend_from_slice(t.data());
            }
        };
        push(&self.input_block);
        for b in &self.cl_blocks {
            push(b);
        }
        push(&self.head_block);
        out
    }

    /// Inverse of [`export_params`]; used by aggregation-based baselines.
    pub fn import_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.resident_param_count() {
            return Err(Error::Dimension(format!(
                "import: {} values for {} resident parameters",
                flat.len(),
                self.resident_param_count()
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
        for b in &mut self.cl_blocks {
            pull(b);
        }
        pull(&mut self.head_block);
        Ok(())
    }

    /// Assemble the full inference stack: personal layers plus the current
    /// server copy of the remaining middle blocks.
    pub fn composite(&self, server_middle: &[BlockParams]) -> LayerStack {
        let mut middle = self.cl_blocks.clone();
        middle.extend_from_slice(&server_middle[self.partition.server_middle()]);
        LayerStack {
            input_block: self.input_block.clone(),
            middle_blocks: middle,
            head_block: self.head_block.clone(),
        }
    }
}

/// Deterministic shuffled mini-batch schedule over one client's shard.
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> BatchSampler {
        use rand::SeedableRng;
        let mut s = BatchSampler {
            order: (0..len).collect(),
            cursor: 0,
            batch_size: batch_size.min(len).max(1),
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        use rand::Rng;
        for i in (1..self.order.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            self.order.swap(i, j);
        }
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.order.len() {
            self.reshuffle();
        }
        let b = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        b
    }
}

/// Gather a batch from a shard into model input plus labels.
pub fn gather_batch(
    config: &ModelConfig,
    features: &[Vec<f64>],
    labels: &[usize],
    indices: &[usize],
) -> Result<(Tensor, Vec<usize>)> {
    let rows: Vec<&[f64]> = indices.iter().map(|&i| features[i].as_slice()).collect();
    let ys: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
    Ok((config.make_input(&rows)?, ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::BlockKind;
    use crate::model::{build_model, ModelConfig};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            hidden_dim: 8,
            num_middle_blocks: 4,
            num_classes: 3,
            block_kind: BlockKind::MlpResidual,
            seq_len: None,
        }
    }

    fn client(q: f64, k_align: Option<u64>) -> ClientRuntime {
        let stack = build_model(&cfg(), 11).unwrap();
        let p = Partition::new(4, q).unwrap();
        ClientRuntime::new(1, &stack, p, Hyper::sgd(0.1), 8, k_align)
    }

    fn rand_input(seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..2 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (Tensor::new(vec![2, 6], data).unwrap(), vec![0, 2])
    }

    #[test]
    fn one_step_in_flight_enforced() {
        let mut c = client(0.5, None);
        let (x, y) = rand_input(1);
        c.client_forward(&x, y.clone()).unwrap();
        assert!(matches!(c.client_forward(&x, y), Err(Error::State(_))));
    }

    #[test]
    fn probe_cadence() {
        let mut c = client(0.5, Some(3));
        for step in 0..7u64 {
            let (x, y) = rand_input(step);
            let (act, probe) = c.client_forward(&x, y).unwrap();
            assert_eq!(act.step_id, step);
            assert_eq!(probe.is_some(), step % 3 == 0, "step {step}");
            // close the loop with a loopback gradient
            let down = Message::new(MsgKind::ActDown, 1, step, act.payload.clone());
            let (_, up) = c.client_finalize_forward(&down).unwrap();
            let gd = Message::new(MsgKind::GradDown, 1, step, up.payload.scale(0.0));
            c.client_apply_cut_gradient(&gd).unwrap();
        }
        assert_eq!(c.steps_taken(), 7);
    }

    #[test]
    fn no_probe_with_empty_cl() {
        let mut c = client(0.0, Some(1));
        let (x, y) = rand_input(1);
        let (_, probe) = c.client_forward(&x, y).unwrap();
        assert!(probe.is_none());
    }

    #[test]
    fn stale_frames_are_protocol_errors() {
        let mut c = client(0.5, None);
        let (x, y) = rand_input(1);
        let (act, _) = c.client_forward(&x, y).unwrap();
        let wrong = Message::new(MsgKind::ActDown, 1, 99, act.payload.clone());
        assert!(matches!(c.client_finalize_forward(&wrong), Err(Error::Protocol(_))));
        let gd = Message::new(MsgKind::GradDown, 1, 99, act.payload.clone());
        assert!(matches!(c.client_apply_cut_gradient(&gd), Err(Error::Protocol(_))));
        // the in-flight step survives a stale frame
        assert!(c.in_flight());
    }

    #[test]
    fn resident_params_grow_with_q() {
        let low = client(0.0, None).resident_param_count();
        let mid = client(0.5, None).resident_param_count();
        let high = client(1.0, None).resident_param_count();
        assert!(low < mid && mid < high);
        // 4 blocks of 8-dim mlp: each 2*8 + (8*32+32) + (32*8+8) = 568
        assert_eq!(mid - low, 2 * 568);
    }

    #[test]
    fn composite_matches_origin_stack_before_training() {
        let stack = build_model(&cfg(), 11).unwrap();
        let c = client(0.5, None);
        let composite = c.composite(&stack.middle_blocks);
        assert_eq!(composite.max_abs_diff(&stack), 0.0);
    }

    #[test]
    fn sampler_is_deterministic_and_covers_epoch() {
        let mut a = BatchSampler::new(10, 3, 5);
        let mut b = BatchSampler::new(10, 3, 5);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..3 {
            let ba = a.next_batch();
            assert_eq!(ba, b.next_batch());
            seen.extend(ba);
        }
        assert_eq!(seen.len(), 9); // three disjoint batches within one epoch
    }
}
