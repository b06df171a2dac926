//! Single-layer LSTM language model with embedding input, softmax output,
//! and hand-written backpropagation through time.
//!
//! Packed gate matrices use the fixed row order (input, forget,
//! cell-candidate, output); the forget slice is rows H..2H.

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::IdGrid;
use crate::error::{Error, Result};
use crate::math::{axpy, matmul_nn_acc, matmul_nt_acc, matmul_nt_into, matmul_tn_acc, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

/// All learnable tensors of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: Dims,
    pub tied: bool,
    pub embedding: Mat,     // V×E
    pub w_input: Mat,       // 4H×E
    pub w_hidden: Mat,      // 4H×H
    pub bias_gates: Vec<f64>, // 4H
    pub w_out: Mat,         // V×H
    pub bias_out: Vec<f64>,   // V
}

impl ModelParams {
    pub fn zeros(dims: Dims) -> Self {
        ModelParams {
            dims,
            tied: false,
            embedding: Mat::zeros(dims.vocab, dims.embed),
            w_input: Mat::zeros(4 * dims.hidden, dims.embed),
            w_hidden: Mat::zeros(4 * dims.hidden, dims.hidden),
            bias_gates: vec![0.0; 4 * dims.hidden],
            w_out: Mat::zeros(dims.vocab, dims.hidden),
            bias_out: vec![0.0; dims.vocab],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.dims);
        z.tied = self.tied;
        z
    }

    pub fn param_count(&self) -> usize {
        let Dims { vocab, embed, hidden } = self.dims;
        vocab * embed + 4 * hidden * embed + 4 * hidden * hidden + 4 * hidden + vocab * hidden + vocab
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 6] {
        [
            ("embedding", self.embedding.as_slice()),
            ("w_input", self.w_input.as_slice()),
            ("w_hidden", self.w_hidden.as_slice()),
            ("bias_gates", &self.bias_gates),
            ("w_out", self.w_out.as_slice()),
            ("bias_out", &self.bias_out),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 6] {
        [
            ("embedding", self.embedding.as_mut_slice()),
            ("w_input", self.w_input.as_mut_slice()),
            ("w_hidden", self.w_hidden.as_mut_slice()),
            ("bias_gates", &mut self.bias_gates),
            ("w_out", self.w_out.as_mut_slice()),
            ("bias_out", &mut self.bias_out),
        ]
    }

    /// Keep the output projection identical to the embedding under weight
    /// tying. No-op for untied models.
    pub fn sync_tied(&mut self) {
        if self.tied {
            self.w_out.copy_from(&self.embedding);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Recurrent state, one row per batch lane.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub h: Mat,
    pub c: Mat,
}

impl HiddenState {
    pub fn zeros(lanes: usize, hidden: usize) -> Self {
        HiddenState { h: Mat::zeros(lanes, hidden), c: Mat::zeros(lanes, hidden) }
    }

    pub fn lanes(&self) -> usize {
        self.h.rows()
    }
}

/// Activations cached by one forward step, enough for the exact backward
/// pass.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub ids: Vec<u32>,
    /// post-activation gate values, B×4H
    pub gates: Mat,
    pub c_prev: Mat,
    pub c_new: Mat,
    pub tanh_c: Mat,
    pub h_prev: Mat,
}

/// Weights sampled from U[−1/√H, +1/√H]; biases zero except the forget
/// slice, which starts at +1. Deterministic for a fixed seed.
pub fn init_params(dims: Dims, seed: u64, tied: bool) -> Result<ModelParams> {
    if dims.vocab == 0 || dims.embed == 0 || dims.hidden == 0 {
        return Err(Error::Config("model dimensions must all be positive".into()));
    }
    if tied && dims.embed != dims.hidden {
        return Err(Error::Config(format!(
            "weight tying requires embed == hidden (got {} and {})",
            dims.embed, dims.hidden
        )));
    }
    let bound = 1.0 / (dims.hidden as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(dims);
    params.tied = tied;
    for slot in params.embedding.as_mut_slice() {
        *slot = dist.sample(&mut rng);
    }
    for slot in params.w_input.as_mut_slice() {
        *slot = dist.sample(&mut rng);
    }
    for slot in params.w_hidden.as_mut_slice() {
        *slot = dist.sample(&mut rng);
    }
    if tied {
        params.sync_tied();
    } else {
        for slot in params.w_out.as_mut_slice() {
            *slot = dist.sample(&mut rng);
        }
    }
    for b in &mut params.bias_gates[dims.hidden..2 * dims.hidden] {
        *b = 1.0;
    }
    Ok(params)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One LSTM step over a batch of input ids. Returns the output logits, the
/// next state, and the trace entry needed by the backward pass.
pub fn forward_step(
    params: &ModelParams,
    state: &HiddenState,
    input_ids: &[u32],
) -> Result<(Mat, HiddenState, StepTrace)> {
    let Dims { vocab, embed, hidden } = params.dims;
    let lanes = input_ids.len();
    assert_eq!(state.lanes(), lanes, "state lanes must match input batch");

    let mut x = Mat::zeros(lanes, embed);
    for (b, &id) in input_ids.iter().enumerate() {
        if id as usize >= vocab {
            return Err(Error::IdOutOfRange { id, vocab });
        }
        x.row_mut(b).copy_from_slice(params.embedding.row(id as usize));
    }

    let mut gates = Mat::zeros(lanes, 4 * hidden);
    matmul_nt_into(&x, &params.w_input, Some(&params.bias_gates), &mut gates);
    matmul_nt_acc(&state.h, &params.w_hidden, &mut gates);

    let mut c_new = Mat::zeros(lanes, hidden);
    let mut tanh_c = Mat::zeros(lanes, hidden);
    let mut h_new = Mat::zeros(lanes, hidden);
    for b in 0..lanes {
        let g = gates.row_mut(b);
        for v in &mut g[..2 * hidden] {
            *v = sigmoid(*v); // input, forget
        }
        for v in &mut g[2 * hidden..3 * hidden] {
            *v = v.tanh(); // cell candidate
        }
        for v in &mut g[3 * hidden..] {
            *v = sigmoid(*v); // output
        }
        let (i_g, rest) = g.split_at(hidden);
        let (f_g, rest) = rest.split_at(hidden);
        let (g_g, o_g) = rest.split_at(hidden);
        let cp = state.c.row(b);
        let cn = c_new.row_mut(b);
        for k in 0..hidden {
            cn[k] = f_g[k] * cp[k] + i_g[k] * g_g[k];
        }
        let tc = tanh_c.row_mut(b);
        for k in 0..hidden {
            tc[k] = cn[k].tanh();
        }
        let hn = h_new.row_mut(b);
        for k in 0..hidden {
            hn[k] = o_g[k] * tc[k];
        }
    }

    let mut logits = Mat::zeros(lanes, vocab);
    matmul_nt_into(&h_new, &params.w_out, Some(&params.bias_out), &mut logits);

    let trace = StepTrace {
        ids: input_ids.to_vec(),
        gates,
        c_prev: state.c.clone(),
        c_new: c_new.clone(),
        tanh_c: tanh_c.clone(),
        h_prev: state.h.clone(),
    };
    Ok((logits, HiddenState { h: h_new, c: c_new }, trace))
}

/// Max-subtracted log-softmax bookkeeping for one logit row: returns
/// (log Z, max) so that log p(v) = logits[v] − max − log Z.
#[inline]
pub(crate) fn log_norm(logits: &[f64]) -> (f64, f64) {
    let mut m = f64::NEG_INFINITY;
    for &l in logits {
        if l > m {
            m = l;
        }
    }
    let mut z = 0.0;
    for &l in logits {
        z += (l - m).exp();
    }
    (z.ln(), m)
}

pub struct LossGrad {
    /// Sum of −log p(target) in nats over mask-true positions.
    pub total_nll: f64,
    /// Number of mask-true positions.
    pub token_count: usize,
    /// Exact reverse-mode derivatives of `total_nll` for every parameter.
    pub grads: ModelParams,
    /// State after the last column; gradients do not flow into the initial
    /// state.
    pub final_state: HiddenState,
}

/// Lanes per parallel work unit. Lanes are independent streams, so the
/// window gradient splits into fixed blocks merged in block order; results
/// do not depend on the thread count.
const LANE_BLOCK: usize = 3;

/// Run `steps` forward columns, sum masked NLL, and backpropagate through
/// the whole window. `mask` is column-major, aligned 1:1 with
/// `targets.ids`.
pub fn loss_and_grad(
    params: &ModelParams,
    inputs: &IdGrid,
    targets: &IdGrid,
    mask: &[bool],
    initial_state: &HiddenState,
) -> Result<LossGrad> {
    let lanes = inputs.lanes;
    let steps = inputs.steps;
    assert_eq!(targets.lanes, lanes);
    assert_eq!(targets.steps, steps);
    assert_eq!(mask.len(), targets.ids.len(), "mask must align with targets");
    assert_eq!(initial_state.lanes(), lanes);

    let mut out = if lanes <= LANE_BLOCK {
        loss_and_grad_block(params, inputs, targets, mask, initial_state)?
    } else {
        let blocks: Vec<(usize, usize)> = (0..lanes)
            .step_by(LANE_BLOCK)
            .map(|start| (start, LANE_BLOCK.min(lanes - start)))
            .collect();
        let parts: Result<Vec<LossGrad>> = blocks
            .par_iter()
            .map(|&(start, count)| {
                let bi = inputs.lane_block(start, count);
                let bt = targets.lane_block(start, count);
                let mut bm = Vec::with_capacity(count * steps);
                for t in 0..steps {
                    bm.extend_from_slice(&mask[t * lanes + start..t * lanes + start + count]);
                }
                let bs = HiddenState {
                    h: initial_state.h.row_block(start, count),
                    c: initial_state.c.row_block(start, count),
                };
                loss_and_grad_block(params, &bi, &bt, &bm, &bs)
            })
            .collect();
        let parts = parts?;

        let mut merged = LossGrad {
            total_nll: 0.0,
            token_count: 0,
            grads: params.zeros_like(),
            final_state: HiddenState::zeros(lanes, params.dims.hidden),
        };
        for (&(start, _), part) in blocks.iter().zip(&parts) {
            merged.total_nll += part.total_nll;
            merged.token_count += part.token_count;
            for ((_, g), (_, p)) in merged.grads.tensors_mut().into_iter().zip(part.grads.tensors()) {
                for (gv, pv) in g.iter_mut().zip(p) {
                    *gv += pv;
                }
            }
            merged.final_state.h.set_row_block(start, &part.final_state.h);
            merged.final_state.c.set_row_block(start, &part.final_state.c);
        }
        merged
    };

    if params.tied {
        // Under tying the projection IS the embedding; fold its gradient in.
        let w_out_grad = out.grads.w_out.clone();
        for v in 0..params.dims.vocab {
            axpy(1.0, w_out_grad.row(v), out.grads.embedding.row_mut(v));
        }
        out.grads.w_out.fill(0.0);
    }
    Ok(out)
}

fn loss_and_grad_block(
    params: &ModelParams,
    inputs: &IdGrid,
    targets: &IdGrid,
    mask: &[bool],
    initial_state: &HiddenState,
) -> Result<LossGrad> {
    let Dims { vocab, embed, hidden } = params.dims;
    let lanes = inputs.lanes;
    let steps = inputs.steps;

    let mut grads = params.zeros_like();
    let mut total_nll = 0.0;
    let mut token_count = 0usize;

    let mut state = initial_state.clone();
    let mut traces: Vec<StepTrace> = Vec::with_capacity(steps);
    // dL/dh coming from each step's own softmax, B×H per step
    let mut dh_out: Vec<Mat> = Vec::with_capacity(steps);
    let mut dlogits = Mat::zeros(lanes, vocab);

    for t in 0..steps {
        let (logits, next, trace) = forward_step(params, &state, inputs.step(t))?;
        let tgt = targets.step(t);
        let msk = &mask[t * lanes..(t + 1) * lanes];
        dlogits.fill(0.0);
        for b in 0..lanes {
            if !msk[b] {
                continue;
            }
            let target = tgt[b] as usize;
            if target >= vocab {
                return Err(Error::IdOutOfRange { id: tgt[b], vocab });
            }
            let lrow = logits.row(b);
            let (log_z, m) = log_norm(lrow);
            total_nll += log_z + m - lrow[target];
            token_count += 1;
            let drow = dlogits.row_mut(b);
            for (d, &l) in drow.iter_mut().zip(lrow) {
                *d = (l - m - log_z).exp();
            }
            drow[target] -= 1.0;
        }
        // Output-layer grads are local to the step; fold them in now so
        // logits never need to be kept around.
        matmul_tn_acc(&dlogits, &next.h, &mut grads.w_out);
        for b in 0..lanes {
            axpy(1.0, dlogits.row(b), &mut grads.bias_out);
        }
        let mut dh = Mat::zeros(lanes, hidden);
        matmul_nn_acc(&dlogits, &params.w_out, &mut dh);
        dh_out.push(dh);
        traces.push(trace);
        state = next;
    }

    // Backward through time.
    let mut dh_next = Mat::zeros(lanes, hidden);
    let mut dc_next = Mat::zeros(lanes, hidden);
    let mut dgates = Mat::zeros(lanes, 4 * hidden);
    let mut x = Mat::zeros(lanes, embed);
    let mut dx = Mat::zeros(lanes, embed);
    for t in (0..steps).rev() {
        let trace = &traces[t];
        let dh_t = &dh_out[t];
        for b in 0..lanes {
            let g = trace.gates.row(b);
            let (i_g, rest) = g.split_at(hidden);
            let (f_g, rest) = rest.split_at(hidden);
            let (g_g, o_g) = rest.split_at(hidden);
            let tc = trace.tanh_c.row(b);
            let cp = trace.c_prev.row(b);
            let dh_row = dh_t.row(b);
            let dhn_row = dh_next.row(b);
            let dcn_row = dc_next.row_mut(b);
            let dg_row = dgates.row_mut(b);
            for k in 0..hidden {
                let dh = dh_row[k] + dhn_row[k];
                let d_o = dh * tc[k];
                let dc = dh * o_g[k] * (1.0 - tc[k] * tc[k]) + dcn_row[k];
                let d_i = dc * g_g[k];
                let d_g = dc * i_g[k];
                let d_f = dc * cp[k];
                dg_row[k] = d_i * i_g[k] * (1.0 - i_g[k]);
                dg_row[hidden + k] = d_f * f_g[k] * (1.0 - f_g[k]);
                dg_row[2 * hidden + k] = d_g * (1.0 - g_g[k] * g_g[k]);
                dg_row[3 * hidden + k] = d_o * o_g[k] * (1.0 - o_g[k]);
                // dc flowing to the previous step, via the forget gate
                dcn_row[k] = dc * f_g[k];
            }
        }
        for (b, &id) in trace.ids.iter().enumerate() {
            x.row_mut(b).copy_from_slice(params.embedding.row(id as usize));
        }
        matmul_tn_acc(&dgates, &x, &mut grads.w_input);
        matmul_tn_acc(&dgates, &trace.h_prev, &mut grads.w_hidden);
        for b in 0..lanes {
            axpy(1.0, dgates.row(b), &mut grads.bias_gates);
        }
        dx.fill(0.0);
        matmul_nn_acc(&dgates, &params.w_input, &mut dx);
        for (b, &id) in trace.ids.iter().enumerate() {
            axpy(1.0, dx.row(b), grads.embedding.row_mut(id as usize));
        }
        dh_next.fill(0.0);
        matmul_nn_acc(&dgates, &params.w_hidden, &mut dh_next);
    }

    Ok(LossGrad { total_nll, token_count, grads, final_state: state })
}

/// Advance one step on a single lane and return the full next-token
/// distribution (max-subtracted softmax).
pub fn predict_distribution(
    params: &ModelParams,
    state: &HiddenState,
    input_id: u32,
) -> Result<(Vec<f64>, HiddenState)> {
    let (logits, next, _) = forward_step(params, state, &[input_id])?;
    let lrow = logits.row(0);
    let (log_z, m) = log_norm(lrow);
    let probs = lrow.iter().map(|&l| (l - m - log_z).exp()).collect();
    Ok((probs, next))
}

pub const CKPT_MAGIC: &[u8; 4] = b"TTLM";
pub const CKPT_VERSION: u32 = 1;

const FLAG_TIED: u32 = 1;

fn push_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    buf.reserve(vals.len() * 8);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Little-endian binary checkpoint: magic "TTLM", format version, V/E/H,
/// a flags word (bit 0 = weight tying, bits 8..16 = thinking-token count
/// the model was trained with), the six tensors in fixed order as raw f64,
/// and a trailing 64-bit hash of the vocabulary file the model was trained
/// against.
pub fn save_checkpoint(
    params: &ModelParams,
    thinking_n: usize,
    vocab_hash: u64,
    path: &Path,
) -> Result<()> {
    assert!(thinking_n < 256, "thinking_n must fit the checkpoint flags byte");
    let mut buf = Vec::with_capacity(24 + params.param_count() * 8 + 8);
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.dims.vocab as u32).to_le_bytes());
    buf.extend_from_slice(&(params.dims.embed as u32).to_le_bytes());
    buf.extend_from_slice(&(params.dims.hidden as u32).to_le_bytes());
    let flags = if params.tied { FLAG_TIED } else { 0 } | ((thinking_n as u32) << 8);
    buf.extend_from_slice(&flags.to_le_bytes());
    for (_, t) in params.tensors() {
        push_f64s(&mut buf, t);
    }
    buf.extend_from_slice(&vocab_hash.to_le_bytes());
    fs::write(path, buf).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub struct LoadedCheckpoint {
    pub params: ModelParams,
    pub thinking_n: usize,
    pub vocab_hash: u64,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    if bytes.len() < 24 {
        return Err(Error::CheckpointTruncated);
    }
    if &bytes[0..4] != CKPT_MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let rd_u32 = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = rd_u32(4);
    if version != CKPT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CKPT_VERSION });
    }
    let dims = Dims {
        vocab: rd_u32(8) as usize,
        embed: rd_u32(12) as usize,
        hidden: rd_u32(16) as usize,
    };
    let flags = rd_u32(20);
    if dims.vocab == 0 || dims.embed == 0 || dims.hidden == 0 {
        return Err(Error::Config("checkpoint header has a zero dimension".into()));
    }
    let mut params = ModelParams::zeros(dims);
    params.tied = flags & FLAG_TIED != 0;
    let expected = 24 + params.param_count() * 8 + 8;
    if bytes.len() != expected {
        return Err(Error::CheckpointTruncated);
    }
    let mut off = 24;
    for (_, t) in params.tensors_mut() {
        for slot in t.iter_mut() {
            *slot = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            off += 8;
        }
    }
    let vocab_hash = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    Ok(LoadedCheckpoint { params, thinking_n: ((flags >> 8) & 0xff) as usize, vocab_hash })
}
