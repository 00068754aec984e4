//! Layer blocks with recorded forward passes and exact reverse-mode backward.
//!
//! The vocabulary is fixed: an input projection, a GELU MLP residual block,
//! a single-head attention + MLP residual block, and a linear output head.
//! `forward_block` records everything backward needs onto a [`Tape`];
//! `backward_block` consumes the tape and returns input and parameter
//! gradients. Backward reads the parameters saved at forward time, so a
//! recorded step stays consistent even if the live parameters move in
//! between (the server interleaves clients this way).

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    InputProj,
    MlpResidual,
    AttentionMlpResidual,
    OutputHead,
}

/// Layernorm + linear(d -> 4d) + GELU + linear(4d -> d), residual add.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Single-head scaled-dot-product self-attention sublayer parameters.
#[derive(Debug, Clone)]
pub struct AttnParams {
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

#[derive(Debug, Clone)]
pub enum BlockParams {
    InputProj { w: Tensor, b: Tensor },
    MlpResidual(MlpParams),
    AttentionMlpResidual { attn: AttnParams, mlp: MlpParams },
    OutputHead { w: Tensor, b: Tensor },
}

impl BlockParams {
    pub fn kind(&self) -> BlockKind {
        match self {
            BlockParams::InputProj { .. } => BlockKind::InputProj,
            BlockParams::MlpResidual(_) => BlockKind::MlpResidual,
            BlockParams::AttentionMlpResidual { .. } => BlockKind::AttentionMlpResidual,
            BlockParams::OutputHead { .. } => BlockKind::OutputHead,
        }
    }

    /// Named views of every parameter tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            BlockParams::InputProj { w, b } | BlockParams::OutputHead { w, b } => {
                vec![("w", w), ("b", b)]
            }
            BlockParams::MlpResidual(m) => mlp_tensors(m),
            BlockParams::AttentionMlpResidual { attn, mlp } => {
                let mut v = vec![
                    ("attn.ln_gain", &attn.ln_gain),
                    ("attn.ln_bias", &attn.ln_bias),
                    ("attn.wq", &attn.wq),
                    ("attn.bq", &attn.bq),
                    ("attn.wk", &attn.wk),
                    ("attn.bk", &attn.bk),
                    ("attn.wv", &attn.wv),
                    ("attn.bv", &attn.bv),
                    ("attn.wo", &attn.wo),
                    ("attn.bo", &attn.bo),
                ];
                v.extend(mlp_tensors(mlp));
                v
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            BlockParams::InputProj { w, b } | BlockParams::OutputHead { w, b } => vec![w, b],
            BlockParams::MlpResidual(m) => {
                vec![&mut m.ln_gain, &mut m.ln_bias, &mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2]
            }
            BlockParams::AttentionMlpResidual { attn, mlp } => vec![
                &mut attn.ln_gain,
                &mut attn.ln_bias,
                &mut attn.wq,
                &mut attn.bq,
                &mut attn.wk,
                &mut attn.bk,
                &mut attn.wv,
                &mut attn.bv,
                &mut attn.wo,
                &mut attn.bo,
                &mut mlp.ln_gain,
                &mut mlp.ln_bias,
                &mut mlp.w1,
                &mut mlp.b1,
                &mut mlp.w2,
                &mut mlp.b2,
            ],
        }
    }

    /// Same structure with every tensor zeroed; used as a gradient container.
    pub fn zeros_like(&self) -> BlockParams {
        let mut c = self.clone();
        for t in c.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        c
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn max_abs_diff(&self, other: &BlockParams) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|((_, a), (_, b))| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

fn mlp_tensors(m: &MlpParams) -> Vec<(&'static str, &Tensor)> {
    vec![
        ("mlp.ln_gain", &m.ln_gain),
        ("mlp.ln_bias", &m.ln_bias),
        ("mlp.w1", &m.w1),
        ("mlp.b1", &m.b1),
        ("mlp.w2", &m.w2),
        ("mlp.b2", &m.b2),
    ]
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// Recording of one `forward_block` application.
///
/// Single-producer, single-consumer: a second forward onto the same tape or
/// a second backward over it is a state error.
#[derive(Debug, Default)]
pub struct Tape {
    trace: Option<BlockTrace>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn is_recorded(&self) -> bool {
        self.trace.is_some()
    }

    /// Total elements cached on this tape (activation memory accounting).
    pub fn cached_elements(&self) -> usize {
        match &self.trace {
            None => 0,
            Some(t) => t.cached_elements(),
        }
    }
}

#[derive(Debug)]
enum BlockTrace {
    Linear {
        params: BlockParams,
        input: Tensor,
        // Mean-pooled rows when a 3-d input was pooled before the head.
        pooled: Option<Tensor>,
    },
    Mlp {
        params: MlpParams,
        input: Tensor,
        ln: LnTrace,
        pre_act: Tensor,
        hidden: Tensor,
    },
    AttnMlp {
        attn: AttnParams,
        input: Tensor,
        ln1: LnTrace,
        q: Tensor,
        k: Tensor,
        v: Tensor,
        att: Tensor,
        ctx: Tensor,
        mlp: Box<BlockTrace>,
    },
}

impl BlockTrace {
    fn cached_elements(&self) -> usize {
        match self {
            BlockTrace::Linear { input, pooled, .. } => {
                input.len() + pooled.as_ref().map_or(0, Tensor::len)
            }
            BlockTrace::Mlp { input, ln, pre_act, hidden, .. } => {
                input.len() + ln.normed.len() + ln.inv_sigma.len() + pre_act.len() + hidden.len()
            }
            BlockTrace::AttnMlp { input, ln1, q, k, v, att, ctx, mlp, .. } => {
                input.len()
                    + ln1.normed.len()
                    + ln1.inv_sigma.len()
                    + q.len()
                    + k.len()
                    + v.len()
                    + att.len()
                    + ctx.len()
                    + mlp.cached_elements()
            }
        }
    }
}

#[derive(Debug)]
struct LnTrace {
    /// x-hat, before gain/bias.
    normed: Tensor,
    /// 1 / sqrt(var + eps), one per row.
    inv_sigma: Tensor,
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

pub fn forward_block(params: &BlockParams, input: &Tensor, tape: &mut Tape) -> Result<Tensor> {
    if tape.is_recorded() {
        return Err(Error::State("tape already holds a recording".into()));
    }
    let (out, trace) = match params {
        BlockParams::InputProj { w, b } => forward_linear(params, w, b, input, false)?,
        BlockParams::OutputHead { w, b } => forward_linear(params, w, b, input, true)?,
        BlockParams::MlpResidual(m) => {
            let (out, trace) = forward_mlp(m, input)?;
            (out, trace)
        }
        BlockParams::AttentionMlpResidual { attn, mlp } => forward_attn_mlp(attn, mlp, input)?,
    };
    tape.trace = Some(trace);
    Ok(out)
}

/// Forward without recording; for evaluation passes.
pub fn forward_inference(params: &BlockParams, input: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    forward_block(params, input, &mut tape)
}

fn forward_linear(
    params: &BlockParams,
    w: &Tensor,
    b: &Tensor,
    input: &Tensor,
    pool_3d: bool,
) -> Result<(Tensor, BlockTrace)> {
    let in_dim = w.shape()[0];
    let out_dim = w.shape()[1];
    if input.last_dim() != in_dim {
        return Err(Error::Dimension(format!(
            "linear block: last axis is {} but weight expects {}",
            input.last_dim(),
            in_dim
        )));
    }
    // The head mean-pools the sequence axis when given a 3-d input.
    let (x, pooled) = if pool_3d && input.shape().len() == 3 {
        let [batch, seq, d] = [input.shape()[0], input.shape()[1], input.shape()[2]];
        let mut p = vec![0.0; batch * d];
        for bi in 0..batch {
            for s in 0..seq {
                for j in 0..d {
                    p[bi * d + j] += input.data()[(bi * seq + s) * d + j] / seq as f64;
                }
            }
        }
        (Tensor::new(vec![batch, d], p)?, true)
    } else {
        (input.clone(), false)
    };
    let rows = x.rows();
    let mut out = matmul(x.data(), w.data(), rows, in_dim, out_dim);
    for r in 0..rows {
        for j in 0..out_dim {
            out[r * out_dim + j] += b.data()[j];
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_dim;
    let out = Tensor::new(shape, out)?;
    let trace = BlockTrace::Linear {
        params: params.clone(),
        input: input.clone(),
        pooled: if pooled { Some(x) } else { None },
    };
    Ok((out, trace))
}

fn layernorm(input: &Tensor, gain: &Tensor, bias: &Tensor) -> (Tensor, LnTrace) {
    let d = input.last_dim();
    let rows = input.rows();
    let mut normed = vec![0.0; input.len()];
    let mut inv_sigma = vec![0.0; rows];
    let mut out = vec![0.0; input.len()];
    for r in 0..rows {
        let x = &input.data()[r * d..(r + 1) * d];
        let mu = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
        inv_sigma[r] = inv;
        for j in 0..d {
            let xh = (x[j] - mu) * inv;
            normed[r * d + j] = xh;
            out[r * d + j] = gain.data()[j] * xh + bias.data()[j];
        }
    }
    let normed = Tensor::new(input.shape().to_vec(), normed).unwrap();
    let out = Tensor::new(input.shape().to_vec(), out).unwrap();
    (out, LnTrace { normed, inv_sigma: Tensor::new(vec![rows], inv_sigma).unwrap() })
}

/// Backward through layernorm. Returns d_input; accumulates into d_gain/d_bias.
fn layernorm_backward(
    g: &Tensor,
    gain: &Tensor,
    ln: &LnTrace,
    d_gain: &mut Tensor,
    d_bias: &mut Tensor,
) -> Tensor {
    let d = g.last_dim();
    let rows = g.rows();
    let mut dx = vec![0.0; g.len()];
    for r in 0..rows {
        let grow = &g.data()[r * d..(r + 1) * d];
        let xh = &ln.normed.data()[r * d..(r + 1) * d];
        let inv = ln.inv_sigma.data()[r];
        let mut mean_gh = 0.0;
        let mut mean_gh_xh = 0.0;
        for j in 0..d {
            let gh = grow[j] * gain.data()[j];
            mean_gh += gh;
            mean_gh_xh += gh * xh[j];
            d_gain.data_mut()[j] += grow[j] * xh[j];
            d_bias.data_mut()[j] += grow[j];
        }
        mean_gh /= d as f64;
        mean_gh_xh /= d as f64;
        for j in 0..d {
            let gh = grow[j] * gain.data()[j];
            dx[r * d + j] = inv * (gh - mean_gh - xh[j] * mean_gh_xh);
        }
    }
    Tensor::new(g.shape().to_vec(), dx).unwrap()
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn forward_mlp(m: &MlpParams, input: &Tensor) -> Result<(Tensor, BlockTrace)> {
    let d = m.ln_gain.len();
    if input.last_dim() != d {
        return Err(Error::Dimension(format!(
            "mlp_residual: last axis is {} but block width is {d}",
            input.last_dim()
        )));
    }
    let rows = input.rows();
    let hidden_dim = m.w1.shape()[1];
    let (ln_out, ln) = layernorm(input, &m.ln_gain, &m.ln_bias);
    let mut pre = matmul(ln_out.data(), m.w1.data(), rows, d, hidden_dim);
    for r in 0..rows {
        for j in 0..hidden_dim {
            pre[r * hidden_dim + j] += m.b1.data()[j];
        }
    }
    let hidden: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
    let mut out = matmul(&hidden, m.w2.data(), rows, hidden_dim, d);
    for r in 0..rows {
        for j in 0..d {
            out[r * d + j] += m.b2.data()[j] + input.data()[r * d + j];
        }
    }
    let mut hshape = input.shape().to_vec();
    *hshape.last_mut().unwrap() = hidden_dim;
    let trace = BlockTrace::Mlp {
        params: m.clone(),
        input: input.clone(),
        ln,
        pre_act: Tensor::new(hshape.clone(), pre)?,
        hidden: Tensor::new(hshape, hidden)?,
    };
    Ok((Tensor::new(input.shape().to_vec(), out)?, trace))
}

fn forward_attn_mlp(
    attn: &AttnParams,
    mlp: &MlpParams,
    input: &Tensor,
) -> Result<(Tensor, BlockTrace)> {
    if input.shape().len() != 3 {
        return Err(Error::Dimension(format!(
            "attention_mlp_residual: expected batch x seq x d input, got shape {:?}",
            input.shape()
        )));
    }
    let d = attn.ln_gain.len();
    if input.last_dim() != d {
        return Err(Error::Dimension(format!(
            "attention_mlp_residual: last axis is {} but block width is {d}",
            input.last_dim()
        )));
    }
    let (batch, seq) = (input.shape()[0], input.shape()[1]);
    let rows = batch * seq;
    let (ln_out, ln1) = layernorm(input, &attn.ln_gain, &attn.ln_bias);
    let proj = |w: &Tensor, b: &Tensor| {
        let mut p = matmul(ln_out.data(), w.data(), rows, d, d);
        for r in 0..rows {
            for j in 0..d {
                p[r * d + j] += b.data()[j];
            }
        }
        p
    };
    let q = proj(&attn.wq, &attn.bq);
    let k = proj(&attn.wk, &attn.bk);
    let v = proj(&attn.wv, &attn.bv);
    let scale = 1.0 / (d as f64).sqrt();
    let mut att = vec![0.0; batch * seq * seq];
    let mut ctx = vec![0.0; rows * d];
    for bi in 0..batch {
        let qb = &q[bi * seq * d..(bi + 1) * seq * d];
        let kb = &k[bi * seq * d..(bi + 1) * seq * d];
        let vb = &v[bi * seq * d..(bi + 1) * seq * d];
        let mut scores = matmul_nt(qb, kb, seq, d, seq);
        for s in scores.iter_mut() {
            *s *= scale;
        }
        // row softmax with max subtraction
        for i in 0..seq {
            let row = &mut scores[i * seq..(i + 1) * seq];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
        }
        let c = matmul(&scores, vb, seq, seq, d);
        att[bi * seq * seq..(bi + 1) * seq * seq].copy_from_slice(&scores);
        ctx[bi * seq * d..(bi + 1) * seq * d].copy_from_slice(&c);
    }
    let mut y = matmul(&ctx, attn.wo.data(), rows, d, d);
    for r in 0..rows {
        for j in 0..d {
            y[r * d + j] += attn.bo.data()[j] + input.data()[r * d + j];
        }
    }
    let h = Tensor::new(input.shape().to_vec(), y)?;
    let (out, mlp_trace) = forward_mlp(mlp, &h)?;
    let qkv_shape = input.shape().to_vec();
    let trace = BlockTrace::AttnMlp {
        attn: attn.clone(),
        input: input.clone(),
        ln1,
        q: Tensor::new(qkv_shape.clone(), q)?,
        k: Tensor::new(qkv_shape.clone(), k)?,
        v: Tensor::new(qkv_shape, v)?,
        att: Tensor::new(vec![batch, seq, seq], att)?,
        ctx: Tensor::new(input.shape().to_vec(), ctx)?,
        mlp: Box::new(mlp_trace),
    };
    Ok((out, trace))
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Consumes the tape; returns the input gradient and the parameter gradients
/// in a `BlockParams`-shaped container.
pub fn backward_block(tape: &mut Tape, output_grad: &Tensor) -> Result<(Tensor, BlockParams)> {
    let trace = tape
        .trace
        .take()
        .ok_or_else(|| Error::State("tape already consumed (or never recorded)".into()))?;
    backward_trace(trace, output_grad)
}

fn backward_trace(trace: BlockTrace, g: &Tensor) -> Result<(Tensor, BlockParams)> {
    match trace {
        BlockTrace::Linear { params, input, pooled } => {
            let (w, is_head) = match &params {
                BlockParams::InputProj { w, .. } => (w, false),
                BlockParams::OutputHead { w, .. } => (w, true),
                _ => unreachable!(),
            };
            let in_dim = w.shape()[0];
            let out_dim = w.shape()[1];
            let x = pooled.as_ref().unwrap_or(&input);
            let rows = x.rows();
            if g.last_dim() != out_dim || g.rows() != rows {
                return Err(Error::Dimension(format!(
                    "linear backward: output_grad shape {:?} does not match forward output",
                    g.shape()
                )));
            }
            let dw = matmul_tn(x.data(), g.data(), rows, in_dim, out_dim);
            let mut db = vec![0.0; out_dim];
            for r in 0..rows {
                for j in 0..out_dim {
                    db[j] += g.data()[r * out_dim + j];
                }
            }
            let dx_rows = matmul_nt(g.data(), w.data(), rows, out_dim, in_dim);
            let dx = if let Some(p) = &pooled {
                // un-pool: spread evenly over the sequence axis
                let (batch, seq, d) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                debug_assert_eq!(p.rows(), batch);
                let mut full = vec![0.0; input.len()];
                for bi in 0..batch {
                    for s in 0..seq {
                        for j in 0..d {
                            full[(bi * seq + s) * d + j] = dx_rows[bi * d + j] / seq as f64;
                        }
                    }
                }
                Tensor::new(input.shape().to_vec(), full)?
            } else {
                Tensor::new(input.shape().to_vec(), dx_rows)?
            };
            let grads = if is_head {
                BlockParams::OutputHead {
                    w: Tensor::new(vec![in_dim, out_dim], dw)?,
                    b: Tensor::new(vec![out_dim], db)?,
                }
            } else {
                BlockParams::InputProj {
                    w: Tensor::new(vec![in_dim, out_dim], dw)?,
                    b: Tensor::new(vec![out_dim], db)?,
                }
            };
            Ok((dx, grads))
        }
        BlockTrace::Mlp { params, input, ln, pre_act, hidden } => {
            let (dx, grads) = backward_mlp(&params, &input, &ln, &pre_act, &hidden, g)?;
            Ok((dx, BlockParams::MlpResidual(grads)))
        }
        BlockTrace::AttnMlp { attn, input, ln1, q, k, v, att, ctx, mlp } => {
            // mlp sublayer first (it ran last)
            let (g_h, mlp_grads) = match *mlp {
                BlockTrace::Mlp { params, input, ln, pre_act, hidden } => {
                    backward_mlp(&params, &input, &ln, &pre_act, &hidden, g)?
                }
                _ => unreachable!(),
            };
            let d = attn.ln_gain.len();
            let (batch, seq) = (input.shape()[0], input.shape()[1]);
            let rows = batch * seq;
            let scale = 1.0 / (d as f64).sqrt();

            let mut d_wo = vec![0.0; d * d];
            let mut d_bo = vec![0.0; d];
            // g_h splits into the residual branch and the attention output
            let dw = matmul_tn(ctx.data(), g_h.data(), rows, d, d);
            for (a, b) in d_wo.iter_mut().zip(dw) {
                *a += b;
            }
            for r in 0..rows {
                for j in 0..d {
                    d_bo[j] += g_h.data()[r * d + j];
                }
            }
            let g_ctx = matmul_nt(g_h.data(), attn.wo.data(), rows, d, d);

            let mut g_q = vec![0.0; rows * d];
            let mut g_k = vec![0.0; rows * d];
            let mut g_v = vec![0.0; rows * d];
            for bi in 0..batch {
                let ab = &att.data()[bi * seq * seq..(bi + 1) * seq * seq];
                let vb = &v.data()[bi * seq * d..(bi + 1) * seq * d];
                let qb = &q.data()[bi * seq * d..(bi + 1) * seq * d];
                let kb = &k.data()[bi * seq * d..(bi + 1) * seq * d];
                let gc = &g_ctx[bi * seq * d..(bi + 1) * seq * d];
                let g_att = matmul_nt(gc, vb, seq, d, seq);
                let gv = matmul_tn(ab, gc, seq, seq, d);
                g_v[bi * seq * d..(bi + 1) * seq * d].copy_from_slice(&gv);
                // softmax backward per row
                let mut g_scores = vec![0.0; seq * seq];
                for i in 0..seq {
                    let arow = &ab[i * seq..(i + 1) * seq];
                    let grow = &g_att[i * seq..(i + 1) * seq];
                    let dot: f64 = arow.iter().zip(grow).map(|(a, g)| a * g).sum();
                    for j in 0..seq {
                        g_scores[i * seq + j] = arow[j] * (grow[j] - dot) * scale;
                    }
                }
                let gq = matmul(&g_scores, kb, seq, seq, d);
                let gk = matmul_tn(&g_scores, qb, seq, seq, d);
                g_q[bi * seq * d..(bi + 1) * seq * d].copy_from_slice(&gq);
                g_k[bi * seq * d..(bi + 1) * seq * d].copy_from_slice(&gk);
            }

            // back through the three projections into the ln1 output
            let mut g_ln = vec![0.0; rows * d];
            let mut proj_back = |gp: &[f64], w: &Tensor| -> (Vec<f64>, Vec<f64>) {
                let dwp = matmul_tn(ln1_input(&ln1, &attn, &input).data(), gp, rows, d, d);
                let dbp = {
                    let mut b = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            b[j] += gp[r * d + j];
                        }
                    }
                    b
                };
                let gx = matmul_nt(gp, w.data(), rows, d, d);
                for (a, b) in g_ln.iter_mut().zip(gx) {
                    *a += b;
                }
                (dwp, dbp)
            };
            let (d_wq, d_bq) = proj_back(&g_q, &attn.wq);
            let (d_wk, d_bk) = proj_back(&g_k, &attn.wk);
            let (d_wv, d_bv) = proj_back(&g_v, &attn.wv);

            let mut d_ln_gain = Tensor::zeros(&[d]);
            let mut d_ln_bias = Tensor::zeros(&[d]);
            let g_ln_t = Tensor::new(input.shape().to_vec(), g_ln)?;
            let mut dx = layernorm_backward(&g_ln_t, &attn.ln_gain, &ln1, &mut d_ln_gain, &mut d_ln_bias);
            dx.axpy(1.0, &g_h)?; // residual branch

            let attn_grads = AttnParams {
                ln_gain: d_ln_gain,
                ln_bias: d_ln_bias,
                wq: Tensor::new(vec![d, d], d_wq)?,
                bq: Tensor::new(vec![d], d_bq)?,
                wk: Tensor::new(vec![d, d], d_wk)?,
                bk: Tensor::new(vec![d], d_bk)?,
                wv: Tensor::new(vec![d, d], d_wv)?,
                bv: Tensor::new(vec![d], d_bv)?,
                wo: Tensor::new(vec![d, d], d_wo)?,
                bo: Tensor::new(vec![d], d_bo)?,
            };
            Ok((dx, BlockParams::AttentionMlpResidual { attn: attn_grads, mlp: mlp_grads }))
        }
    }
}

/// Recompute the ln1 output needed by projection backward.
///
/// Cheap relative to caching a third rows-by-d tensor on every tape.
fn ln1_input(ln1: &LnTrace, attn: &AttnParams, input: &Tensor) -> Tensor {
    let d = attn.ln_gain.len();
    let rows = input.rows();
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        for j in 0..d {
            out[r * d + j] =
                attn.ln_gain.data()[j] * ln1.normed.data()[r * d + j] + attn.ln_bias.data()[j];
        }
    }
    Tensor::new(input.shape().to_vec(), out).unwrap()
}

fn backward_mlp(
    params: &MlpParams,
    input: &Tensor,
    ln: &LnTrace,
    pre_act: &Tensor,
    hidden: &Tensor,
    g: &Tensor,
) -> Result<(Tensor, MlpParams)> {
    let d = params.ln_gain.len();
    if g.shape() != input.shape() {
        return Err(Error::Dimension(format!(
            "mlp backward: output_grad shape {:?} does not match forward output {:?}",
            g.shape(),
            input.shape()
        )));
    }
    let rows = input.rows();
    let hidden_dim = params.w1.shape()[1];
    let d_w2 = matmul_tn(hidden.data(), g.data(), rows, hidden_dim, d);
    let mut d_b2 = vec![0.0; d];
    for r in 0..rows {
        for j in 0..d {
            d_b2[j] += g.data()[r * d + j];
        }
    }
    let g_hidden = matmul_nt(g.data(), params.w2.data(), rows, d, hidden_dim);
    let g_pre: Vec<f64> = g_hidden
        .iter()
        .zip(pre_act.data())
        .map(|(gh, &a)| gh * gelu_grad(a))
        .collect();
    let mut d_b1 = vec![0.0; hidden_dim];
    for r in 0..rows {
        for j in 0..hidden_dim {
            d_b1[j] += g_pre[r * hidden_dim + j];
        }
    }
    // ln output = gain * normed + bias, recomputed for the W1 gradient
    let mut ln_out = vec![0.0; rows * d];
    for r in 0..rows {
        for j in 0..d {
            ln_out[r * d + j] =
                params.ln_gain.data()[j] * ln.normed.data()[r * d + j] + params.ln_bias.data()[j];
        }
    }
    let d_w1 = matmul_tn(&ln_out, &g_pre, rows, d, hidden_dim);
    let g_ln = matmul_nt(&g_pre, params.w1.data(), rows, hidden_dim, d);
    let g_ln_t = Tensor::new(input.shape().to_vec(), g_ln)?;
    let mut d_ln_gain = Tensor::zeros(&[d]);
    let mut d_ln_bias = Tensor::zeros(&[d]);
    let mut dx = layernorm_backward(&g_ln_t, &params.ln_gain, ln, &mut d_ln_gain, &mut d_ln_bias);
    dx.axpy(1.0, g)?; // residual branch
    let grads = MlpParams {
        ln_gain: d_ln_gain,
        ln_bias: d_ln_bias,
        w1: Tensor::new(vec![d, hidden_dim], d_w1)?,
        b1: Tensor::new(vec![hidden_dim], d_b1)?,
        w2: Tensor::new(vec![hidden_dim, d], d_w2)?,
        b2: Tensor::new(vec![d], d_b2)?,
    };
    Ok((dx, grads))
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

/// Builds a random block and input from `seed`, scalarizes the output with a
/// fixed random weighting, and compares `backward_block` against central
/// finite differences (h = 1e-4). Returns the worst relative error.
pub fn grad_check(kind: BlockKind, seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(17));
    let d = 6;
    let (mut params, input_shape) = match kind {
        BlockKind::InputProj => (random_linear(&mut rng, 5, d, false), vec![3, 5]),
        BlockKind::OutputHead => (random_linear(&mut rng, d, 4, true), vec![3, d]),
        BlockKind::MlpResidual => {
            (BlockParams::MlpResidual(random_mlp(&mut rng, d)), vec![3, d])
        }
        BlockKind::AttentionMlpResidual => (
            BlockParams::AttentionMlpResidual {
                attn: random_attn(&mut rng, d),
                mlp: random_mlp(&mut rng, d),
            },
            vec![2, 4, d],
        ),
    };
    let n_in: usize = input_shape.iter().product();
    let mut input = Tensor::new(
        input_shape.clone(),
        (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();

    let mut tape = Tape::new();
    let out = forward_block(&params, &input, &mut tape).unwrap();
    let weights: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let out_grad = Tensor::new(out.shape().to_vec(), weights.clone()).unwrap();
    let (input_grad, param_grads) = backward_block(&mut tape, &out_grad).unwrap();

    let loss = |params: &BlockParams, input: &Tensor| -> f64 {
        let mut t = Tape::new();
        let o = forward_block(params, input, &mut t).unwrap();
        o.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
    };

    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut check = |analytic: f64, fd: f64| {
        let denom = analytic.abs().max(fd.abs()).max(1e-3);
        worst = worst.max((analytic - fd).abs() / denom);
    };
    // input entries
    for i in 0..n_in {
        let orig = input.data()[i];
        input.data_mut()[i] = orig + h;
        let lp = loss(&params, &input);
        input.data_mut()[i] = orig - h;
        let lm = loss(&params, &input);
        input.data_mut()[i] = orig;
        check(input_grad.data()[i], (lp - lm) / (2.0 * h));
    }
    // parameter entries
    let n_tensors = param_grads.tensors().len();
    for ti in 0..n_tensors {
        let len = param_grads.tensors()[ti].1.len();
        for i in 0..len {
            let orig = params.tensors()[ti].1.data()[i];
            params.tensors_mut()[ti].data_mut()[i] = orig + h;
            let lp = loss(&params, &input);
            params.tensors_mut()[ti].data_mut()[i] = orig - h;
            let lm = loss(&params, &input);
            params.tensors_mut()[ti].data_mut()[i] = orig;
            check(param_grads.tensors()[ti].1.data()[i], (lp - lm) / (2.0 * h));
        }
    }
    worst
}

fn random_tensor<R: rand::Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn random_linear<R: rand::Rng>(rng: &mut R, din: usize, dout: usize, head: bool) -> BlockParams {
    let w = random_tensor(rng, &[din, dout], 0.5);
    let b = random_tensor(rng, &[dout], 0.5);
    if head {
        BlockParams::OutputHead { w, b }
    } else {
        BlockParams::InputProj { w, b }
    }
}

fn random_mlp<R: rand::Rng>(rng: &mut R, d: usize) -> MlpParams {
    MlpParams {
        ln_gain: random_tensor(rng, &[d], 1.0),
        ln_bias: random_tensor(rng, &[d], 0.5),
        w1: random_tensor(rng, &[d, 4 * d], 0.5),
        b1: random_tensor(rng, &[4 * d], 0.5),
        w2: random_tensor(rng, &[4 * d, d], 0.5),
        b2: random_tensor(rng, &[d], 0.5),
    }
}

fn random_attn<R: rand::Rng>(rng: &mut R, d: usize) -> AttnParams {
    AttnParams {
        ln_gain: random_tensor(rng, &[d], 1.0),
        ln_bias: random_tensor(rng, &[d], 0.5),
        wq: random_tensor(rng, &[d, d], 0.5),
        bq: random_tensor(rng, &[d], 0.5),
        wk: random_tensor(rng, &[d, d], 0.5),
        bk: random_tensor(rng, &[d], 0.5),
        wv: random_tensor(rng, &[d, d], 0.5),
        bv: random_tensor(rng, &[d], 0.5),
        wo: random_tensor(rng, &[d, d], 0.5),
        bo: random_tensor(rng, &[d], 0.5),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_proj(dim: usize) -> BlockParams {
        let mut w = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = 1.0;
        }
        BlockParams::InputProj { w, b: Tensor::zeros(&[dim]) }
    }

    #[test]
    fn input_proj_identity() {
        let p = identity_proj(2);
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let y = forward_block(&p, &x, &mut tape).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn mlp_zero_weights_is_identity() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = random_mlp(&mut rng, d);
        m.w1.data_mut().fill(0.0);
        m.w2.data_mut().fill(0.0);
        m.b2.data_mut().fill(0.0);
        let p = BlockParams::MlpResidual(m);
        let x = random_tensor(&mut rng, &[3, d], 1.0);
        let mut tape = Tape::new();
        let y = forward_block(&p, &x, &mut tape).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-15);
    }

    /// Independent straight-line re-evaluation of the mlp_residual formulas.
    #[test]
    fn mlp_matches_straight_line_oracle() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_mlp(&mut rng, d);
        let x = random_tensor(&mut rng, &[2, d], 1.0);
        let mut tape = Tape::new();
        let p = BlockParams::MlpResidual(m.clone());
        let y = forward_block(&p, &x, &mut tape).unwrap();

        let c: f64 = (2.0 / std::f64::consts::PI).sqrt();
        for r in 0..2 {
            let row = &x.data()[r * d..(r + 1) * d];
            let mu: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            let sigma = (var + 1e-5).sqrt();
            let ln: Vec<f64> = (0..d)
                .map(|j| m.ln_gain.data()[j] * (row[j] - mu) / sigma + m.ln_bias.data()[j])
                .collect();
            for jo in 0..d {
                let mut acc = row[jo] + m.b2.data()[jo];
                for jh in 0..4 * d {
                    let mut pre = m.b1.data()[jh];
                    for ji in 0..d {
                        pre += ln[ji] * m.w1.data()[ji * 4 * d + jh];
                    }
                    let u = c * (pre + 0.044715 * pre.powi(3));
                    let act = 0.5 * pre * (1.0 + u.tanh());
                    acc += act * m.w2.data()[jh * d + jo];
                }
                assert!((acc - y.data()[r * d + jo]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_linear_analytic() {
        // y = x W, grad g: dx = g W^T, dW = x^T g
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_tensor(&mut rng, &[3, 2], 1.0);
        let p = BlockParams::InputProj { w: w.clone(), b: Tensor::zeros(&[2]) };
        let x = random_tensor(&mut rng, &[4, 3], 1.0);
        let g = random_tensor(&mut rng, &[4, 2], 1.0);
        let mut tape = Tape::new();
        forward_block(&p, &x, &mut tape).unwrap();
        let (dx, grads) = backward_block(&mut tape, &g).unwrap();
        let want_dx = matmul_nt(g.data(), w.data(), 4, 2, 3);
        let want_dw = matmul_tn(x.data(), g.data(), 4, 3, 2);
        assert!(dx.data().iter().zip(&want_dx).all(|(a, b)| (a - b).abs() < 1e-14));
        let dw = &grads.tensors()[0].1;
        assert!(dw.data().iter().zip(&want_dw).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn backward_zero_grad_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = BlockParams::MlpResidual(random_mlp(&mut rng, 5));
        let x = random_tensor(&mut rng, &[2, 5], 1.0);
        let mut tape = Tape::new();
        forward_block(&p, &x, &mut tape).unwrap();
        let (dx, grads) = backward_block(&mut tape, &Tensor::zeros(&[2, 5])).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(grads.tensors().iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn tape_reuse_is_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = BlockParams::MlpResidual(random_mlp(&mut rng, 4));
        let x = random_tensor(&mut rng, &[2, 4], 1.0);
        let mut tape = Tape::new();
        forward_block(&p, &x, &mut tape).unwrap();
        assert!(matches!(
            forward_block(&p, &x, &mut tape),
            Err(Error::State(_))
        ));
        let g = Tensor::zeros(&[2, 4]);
        backward_block(&mut tape, &g).unwrap();
        assert!(matches!(backward_block(&mut tape, &g), Err(Error::State(_))));
    }

    #[test]
    fn shape_mismatch_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = BlockParams::MlpResidual(random_mlp(&mut rng, 4));
        let x = random_tensor(&mut rng, &[2, 5], 1.0);
        let mut tape = Tape::new();
        let err = forward_block(&p, &x, &mut tape).unwrap_err();
        assert!(err.to_string().contains("last axis"));
    }

    #[test]
    fn grad_check_all_kinds_seed0() {
        assert!(grad_check(BlockKind::MlpResidual, 0) < 1e-4);
        assert!(grad_check(BlockKind::AttentionMlpResidual, 0) < 1e-4);
        assert!(grad_check(BlockKind::InputProj, 0) < 1e-6);
        assert!(grad_check(BlockKind::OutputHead, 3) < 1e-6);
    }

    /// Composing blocks tape-by-tape must equal a fused forward+backward.
    #[test]
    fn chain_backward_composes() {
        let d = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b1 = BlockParams::MlpResidual(random_mlp(&mut rng, d));
        let b2 = BlockParams::MlpResidual(random_mlp(&mut rng, d));
        let x = random_tensor(&mut rng, &[3, d], 1.0);
        let g: Tensor = random_tensor(&mut rng, &[3, d], 1.0);

        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let h = forward_block(&b1, &x, &mut t1).unwrap();
        let _y = forward_block(&b2, &h, &mut t2).unwrap();
        let (gh, _) = backward_block(&mut t2, &g).unwrap();
        let (gx_chained, _) = backward_block(&mut t1, &gh).unwrap();

        // fused: finite differences of the scalarized two-block function
        let loss = |x: &Tensor| -> f64 {
            let mut t1 = Tape::new();
            let mut t2 = Tape::new();
            let h = forward_block(&b1, x, &mut t1).unwrap();
            let y = forward_block(&b2, &h, &mut t2).unwrap();
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let mut xp = x.clone();
        let h_step = 1e-5;
        for i in 0..x.len() {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + h_step;
            let lp = loss(&xp);
            xp.data_mut()[i] = orig - h_step;
            let lm = loss(&xp);
            xp.data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h_step);
            let a = gx_chained.data()[i];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3) < 1e-4);
        }
    }
}
