//! Server runtime: one global model copy, per-client served layers, and the
//! alignment divergence computed server-side.
//!
//! The server never aggregates parameters. Serving client `n` only ever
//! updates middle blocks at index `>= cl_count(n)`; the blocks below that
//! cut are this client's reference copy, updated solely by other clients
//! whose own cut lies lower.

use crate::blocks::{backward_block, forward_block, forward_inference, BlockParams, Tape};
use crate::error::{Error, Result};
use crate::loss::kl_divergence;

/// Softmax temperature of the alignment divergence. Feature profiles are
/// sharpened before the KL so that small per-sample representation drift
/// still produces a usable gradient.
const ALIGN_TEMPERATURE: f64 = 0.25;
use crate::model::{partition, LayerStack};
use crate::optim::{optimizer_step, Hyper, OptState};
use crate::tensor::Tensor;
use crate::wire::{quantize_tensor, Message, MsgKind, SessionKey};
use std::collections::BTreeMap;

pub struct ServerRuntime {
    stack: LayerStack,
    registry: BTreeMap<u32, usize>,
    opt_states: Vec<OptState>,
    tape_cache: BTreeMap<SessionKey, Vec<Tape>>,
    /// Most recent (step, z_CL) per client; kept past the step's backward
    /// so a probe that arrives late can still be served.
    cut_cache: BTreeMap<u32, (u64, Tensor)>,
    /// Alignment gradient (w.r.t. z_CL, unscaled) awaiting the next
    /// GRAD_DOWN for that client.
    pending_align: BTreeMap<u32, Tensor>,
    lambda: f64,
    hyper: Hyper,
    element_size: usize,
}

impl ServerRuntime {
    /// Takes the full global stack `w`; PL1/PL2 copies are kept frozen.
    pub fn new(stack: LayerStack, lambda: f64, hyper: Hyper, element_size: usize) -> ServerRuntime {
        let opt_states = stack.middle_blocks.iter().map(OptState::new).collect();
        ServerRuntime {
            stack,
            registry: BTreeMap::new(),
            opt_states,
            tape_cache: BTreeMap::new(),
            cut_cache: BTreeMap::new(),
            pending_align: BTreeMap::new(),
            lambda,
            hyper,
            element_size,
        }
    }

    pub fn register_client(&mut self, client_id: u32, q: f64) -> Result<usize> {
        if self.registry.contains_key(&client_id) {
            return Err(Error::Protocol(format!("client {client_id} already registered")));
        }
        let cl_count = partition(self.stack.num_middle(), q)?;
        self.registry.insert(client_id, cl_count);
        Ok(cl_count)
    }

    pub fn cl_count(&self, client_id: u32) -> Option<usize> {
        self.registry.get(&client_id).copied()
    }

    pub fn middle_blocks(&self) -> &[BlockParams] {
        &self.stack.middle_blocks
    }

    pub fn in_flight(&self) -> usize {
        self.tape_cache.len()
    }

    fn lookup(&self, client_id: u32) -> Result<usize> {
        self.registry
            .get(&client_id)
            .copied()
            .ok_or_else(|| Error::Protocol(format!("unknown client {client_id}")))
    }

    /// Forward z_CL through this client's served blocks; caches the tapes.
    pub fn handle_activation_up(&mut self, msg: &Message) -> Result<Message> {
        if msg.kind != MsgKind::ActUp {
            return Err(Error::Protocol(format!("expected ACT_UP, got {:?}", msg.kind)));
        }
        let cl = self.lookup(msg.client_id)?;
        let key = msg.session_key();
        if self.tape_cache.contains_key(&key) {
            return Err(Error::Protocol(format!(
                "duplicate ACT_UP for client {} step {}",
                msg.client_id, msg.step_id
            )));
        }
        let mut h = msg.payload.clone();
        let mut tapes = Vec::with_capacity(self.stack.num_middle() - cl);
        for block in &self.stack.middle_blocks[cl..] {
            let mut tape = Tape::new();
            h = forward_block(block, &h, &mut tape)?;
            tapes.push(tape);
        }
        self.cut_cache.insert(msg.client_id, (msg.step_id, msg.payload.clone()));
        self.tape_cache.insert(key, tapes);
        let payload = if cl == self.stack.num_middle() {
            // empty SL: bit-exact pass-through
            msg.payload.clone()
        } else {
            quantize_tensor(&h, self.element_size)
        };
        Ok(Message::new(MsgKind::ActDown, msg.client_id, msg.step_id, payload))
    }

    /// Backward through the cached tapes, update served blocks, emit g_SL.
    pub fn handle_gradient_up(&mut self, msg: &Message) -> Result<Message> {
        if msg.kind != MsgKind::GradUp {
            return Err(Error::Protocol(format!("expected GRAD_UP, got {:?}", msg.kind)));
        }
        let cl = self.lookup(msg.client_id)?;
        let key = msg.session_key();
        let mut tapes = self.tape_cache.remove(&key).ok_or_else(|| {
            Error::Protocol(format!(
                "no cached forward for client {} step {} (reordered or dropped)",
                msg.client_id, msg.step_id
            ))
        })?;
        let mut g = msg.payload.clone();
        for (offset, tape) in tapes.iter_mut().enumerate().rev() {
            let (gi, pg) = backward_block(tape, &g)?;
            let idx = cl + offset;
            optimizer_step(
                &mut self.stack.middle_blocks[idx],
                &pg,
                &mut self.opt_states[idx],
                &self.hyper,
            )?;
            g = gi;
        }
        if self.lambda != 0.0 {
            if let Some(align_grad) = self.pending_align.remove(&msg.client_id) {
                g.axpy(self.lambda, &align_grad)?;
            }
        }
        let payload = if cl == self.stack.num_middle() {
            g
        } else {
            quantize_tensor(&g, self.element_size)
        };
        Ok(Message::new(MsgKind::GradDown, msg.client_id, msg.step_id, payload))
    }

    /// Computes R = KL(P(z_CL) || P(z-hat_CL)) between the
    /// temperature-sharpened feature profiles of the client's cut
    /// activation and the server's own replay of it, and stashes dR/dz_CL
    /// for this client's next GRAD_DOWN. If the probe arrives after the
    /// step's backward already completed, the gradient is applied to the
    /// following step's GRAD_DOWN instead. The reference blocks are never
    /// updated here.
    pub fn handle_align_probe(&mut self, msg: &Message) -> Result<Message> {
        if msg.kind != MsgKind::AlignProbe {
            return Err(Error::Protocol(format!("expected ALIGN_PROBE, got {:?}", msg.kind)));
        }
        let cl = self.lookup(msg.client_id)?;
        if cl == 0 {
            return Err(Error::Protocol(format!(
                "alignment probe from client {} with empty CL",
                msg.client_id
            )));
        }
        let z_cl = match self.cut_cache.get(&msg.client_id) {
            Some((step, z)) if *step == msg.step_id => z,
            _ => {
                return Err(Error::Protocol(format!(
                    "no z_CL cached for client {} step {}",
                    msg.client_id, msg.step_id
                )))
            }
        };
        let mut h = msg.payload.clone();
        for block in &self.stack.middle_blocks[..cl] {
            h = forward_inference(block, &h)?;
        }
        let axis = z_cl.shape().len() - 1;
        let inv_t = 1.0 / ALIGN_TEMPERATURE;
        let mut zs = z_cl.clone();
        for v in zs.data_mut() {
            *v *= inv_t;
        }
        for v in h.data_mut() {
            *v *= inv_t;
        }
        let (r, mut grad_p, _grad_q) = kl_divergence(&zs, &h, axis)?;
        for v in grad_p.data_mut() {
            *v *= inv_t;
        }
        self.pending_align.insert(msg.client_id, grad_p);
        Ok(Message::new(MsgKind::AlignAck, msg.client_id, msg.step_id, Tensor::scalar(r)))
    }

    /// Stable fingerprint of one middle block, for freeze detection.
    pub fn block_digest(&self, index: usize) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.stack.middle_blocks[index].tensors() {
            for &v in t.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        }
        h
    }
}
