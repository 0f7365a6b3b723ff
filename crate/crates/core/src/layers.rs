//! Layer forward/backward passes: LSTM, BiLSTM, 1-d convolution over time
//! with multiple widths, max/mean pooling over time, inverted dropout, dense
//! softmax, and the L2 penalty.
//!
//! Every backward pass here is hand-derived and checked against the
//! central-difference oracle in `tensor::numeric_gradient`; see the unit
//! tests and the acceptance suite.
//!
//! Masking convention: a sequence carries `true_len`, the number of real
//! (non-PAD) rows. Recurrent states beyond `true_len` copy the last valid
//! state forward; pooling only ever scans positions whose windows touch at
//! least one real token. Appending PAD to a document therefore changes no
//! downstream value.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Rng, Tensor};
use serde::{Deserialize, Serialize};

/// Uniform Glorot initialization on [-s, s], s = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::rand_uniform(rng, vec![rows, cols], -s, s).expect("positive range")
}

// ---------------------------------------------------------------------------
// small slice kernels shared by the layer implementations

/// out[c] += sum_r v[r] * m[r][c]
fn vecmat_acc(v: &[f64], m: &Tensor, out: &mut [f64]) {
    let cols = m.cols();
    debug_assert_eq!(v.len(), m.rows());
    debug_assert_eq!(out.len(), cols);
    for (r, &vr) in v.iter().enumerate() {
        if vr == 0.0 {
            continue;
        }
        let row = m.row(r);
        for c in 0..cols {
            out[c] += vr * row[c];
        }
    }
}

/// out[r] += sum_c m[r][c] * v[c]
fn matvec_acc(m: &Tensor, v: &[f64], out: &mut [f64]) {
    let cols = m.cols();
    debug_assert_eq!(v.len(), cols);
    debug_assert_eq!(out.len(), m.rows());
    for (r, o) in out.iter_mut().enumerate() {
        let row = m.row(r);
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * v[c];
        }
        *o += acc;
    }
}

/// grad[r][c] += a[r] * b[c]
fn outer_acc(grad: &mut Tensor, a: &[f64], b: &[f64]) {
    debug_assert_eq!(grad.rows(), a.len());
    debug_assert_eq!(grad.cols(), b.len());
    for (r, &ar) in a.iter().enumerate() {
        if ar == 0.0 {
            continue;
        }
        let row = grad.row_mut(r);
        for (c, &bc) in b.iter().enumerate() {
            row[c] += ar * bc;
        }
    }
}

// ---------------------------------------------------------------------------
// LSTM

/// Per-gate weights of one LSTM direction. The forget-gate bias starts at
/// 1.0 so early training does not erase the cell state.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_i: Tensor,
    pub w_f: Tensor,
    pub w_o: Tensor,
    pub w_c: Tensor,
    pub u_i: Tensor,
    pub u_f: Tensor,
    pub u_o: Tensor,
    pub u_c: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_o: Tensor,
    pub b_c: Tensor,
}

impl LstmParams {
    pub fn init(d_in: usize, hidden: usize, rng: &mut Rng) -> Self {
        LstmParams {
            w_i: glorot_uniform(rng, d_in, hidden),
            w_f: glorot_uniform(rng, d_in, hidden),
            w_o: glorot_uniform(rng, d_in, hidden),
            w_c: glorot_uniform(rng, d_in, hidden),
            u_i: glorot_uniform(rng, hidden, hidden),
            u_f: glorot_uniform(rng, hidden, hidden),
            u_o: glorot_uniform(rng, hidden, hidden),
            u_c: glorot_uniform(rng, hidden, hidden),
            b_i: Tensor::zeros(vec![hidden]),
            b_f: Tensor::filled(vec![hidden], 1.0),
            b_o: Tensor::zeros(vec![hidden]),
            b_c: Tensor::zeros(vec![hidden]),
        }
    }

    pub fn zeros(d_in: usize, hidden: usize) -> Self {
        LstmParams {
            w_i: Tensor::zeros(vec![d_in, hidden]),
            w_f: Tensor::zeros(vec![d_in, hidden]),
            w_o: Tensor::zeros(vec![d_in, hidden]),
            w_c: Tensor::zeros(vec![d_in, hidden]),
            u_i: Tensor::zeros(vec![hidden, hidden]),
            u_f: Tensor::zeros(vec![hidden, hidden]),
            u_o: Tensor::zeros(vec![hidden, hidden]),
            u_c: Tensor::zeros(vec![hidden, hidden]),
            b_i: Tensor::zeros(vec![hidden]),
            b_f: Tensor::zeros(vec![hidden]),
            b_o: Tensor::zeros(vec![hidden]),
            b_c: Tensor::zeros(vec![hidden]),
        }
    }

    pub fn zeros_like(other: &LstmParams) -> Self {
        LstmParams::zeros(other.input_dim(), other.hidden())
    }

    pub fn input_dim(&self) -> usize {
        self.w_i.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_i.cols()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "lstm_forward",
                lhs: x.shape().to_vec(),
                rhs: vec![self.input_dim(), self.hidden()],
            });
        }
        Ok(())
    }
}

/// Activations recorded during the forward pass for BPTT.
#[derive(Debug, Clone)]
pub struct LstmCache {
    x: Tensor,
    true_len: usize,
    gate_i: Tensor,
    gate_f: Tensor,
    gate_o: Tensor,
    gate_g: Tensor,
    cell: Tensor,
    tanh_cell: Tensor,
    hidden: Tensor,
}

/// Standard LSTM recurrence over rows of `x`:
/// i,f,o = sigmoid gates, g = tanh candidate, c_t = f*c + i*g, h_t = o*tanh(c_t).
///
/// Rows at and beyond `true_len` copy the last valid hidden state forward;
/// downstream pooling masks them out.
pub fn lstm_forward(
    params: &LstmParams,
    x: &Tensor,
    true_len: usize,
) -> Result<(Tensor, LstmCache)> {
    params.check_input(x)?;
    let t_total = x.rows();
    let ell = true_len.min(t_total);
    if ell == 0 {
        return Err(Error::InvalidArgument {
            op: "lstm_forward",
            msg: "true_len must be >= 1".into(),
        });
    }
    let h = params.hidden();

    let mut gate_i = Tensor::zeros(vec![t_total, h]);
    let mut gate_f = Tensor::zeros(vec![t_total, h]);
    let mut gate_o = Tensor::zeros(vec![t_total, h]);
    let mut gate_g = Tensor::zeros(vec![t_total, h]);
    let mut cell = Tensor::zeros(vec![t_total, h]);
    let mut tanh_cell = Tensor::zeros(vec![t_total, h]);
    let mut hidden = Tensor::zeros(vec![t_total, h]);

    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    let mut pre = vec![0.0; h];

    for t in 0..ell {
        let xt = x.row(t);
        // each gate: x_t W + h_{t-1} U + b
        for (gate, w, u, b, squash) in [
            (&mut gate_i, &params.w_i, &params.u_i, &params.b_i, false),
            (&mut gate_f, &params.w_f, &params.u_f, &params.b_f, false),
            (&mut gate_o, &params.w_o, &params.u_o, &params.b_o, false),
            (&mut gate_g, &params.w_c, &params.u_c, &params.b_c, true),
        ] {
            pre.copy_from_slice(b.data());
            vecmat_acc(xt, w, &mut pre);
            vecmat_acc(&h_prev, u, &mut pre);
            let row = gate.row_mut(t);
            if squash {
                for (dst, &p) in row.iter_mut().zip(&pre) {
                    *dst = p.tanh();
                }
            } else {
                for (dst, &p) in row.iter_mut().zip(&pre) {
                    *dst = sigmoid(p);
                }
            }
        }
        for k in 0..h {
            let c = gate_f.at(t, k) * c_prev[k] + gate_i.at(t, k) * gate_g.at(t, k);
            cell.set(t, k, c);
            let tc = c.tanh();
            tanh_cell.set(t, k, tc);
            hidden.set(t, k, gate_o.at(t, k) * tc);
        }
        h_prev.copy_from_slice(hidden.row(t));
        c_prev.copy_from_slice(cell.row(t));
    }
    for t in ell..t_total {
        let last = hidden.row(ell - 1).to_vec();
        hidden.row_mut(t).copy_from_slice(&last);
    }

    let states = hidden.clone();
    Ok((
        states,
        LstmCache {
            x: x.clone(),
            true_len: ell,
            gate_i,
            gate_f,
            gate_o,
            gate_g,
            cell,
            tanh_cell,
            hidden,
        },
    ))
}

/// BPTT for one LSTM direction. `dstates` is the gradient w.r.t. the full
/// returned state matrix (copied rows included; their gradient folds into
/// the last valid row). Returns (d_input, parameter gradients).
pub fn lstm_backward(
    params: &LstmParams,
    cache: &LstmCache,
    dstates: &Tensor,
) -> Result<(Tensor, LstmParams)> {
    let t_total = cache.x.rows();
    let h = params.hidden();
    if dstates.shape() != [t_total, h] {
        return Err(Error::ShapeMismatch {
            op: "lstm_backward",
            lhs: dstates.shape().to_vec(),
            rhs: vec![t_total, h],
        });
    }
    let ell = cache.true_len;
    let mut grads = LstmParams::zeros_like(params);
    let mut dx = Tensor::zeros_like(&cache.x);

    // gradient flowing into the last valid state from the copied rows
    let mut fold = vec![0.0; h];
    for t in ell..t_total {
        for (acc, &g) in fold.iter_mut().zip(dstates.row(t)) {
            *acc += g;
        }
    }

    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut da_i = vec![0.0; h];
    let mut da_f = vec![0.0; h];
    let mut da_o = vec![0.0; h];
    let mut da_g = vec![0.0; h];

    for t in (0..ell).rev() {
        for k in 0..h {
            let mut dh = dstates.at(t, k) + dh_next[k];
            if t == ell - 1 {
                dh += fold[k];
            }
            let o = cache.gate_o.at(t, k);
            let i = cache.gate_i.at(t, k);
            let f = cache.gate_f.at(t, k);
            let g = cache.gate_g.at(t, k);
            let tc = cache.tanh_cell.at(t, k);
            let c_prev = if t == 0 { 0.0 } else { cache.cell.at(t - 1, k) };

            let dc = dh * o * (1.0 - tc * tc) + dc_next[k];
            da_o[k] = dh * tc * o * (1.0 - o);
            da_f[k] = dc * c_prev * f * (1.0 - f);
            da_i[k] = dc * g * i * (1.0 - i);
            da_g[k] = dc * i * (1.0 - g * g);
            dc_next[k] = dc * f;
        }

        let xt = cache.x.row(t);
        let h_prev: &[f64] = if t == 0 { &[] } else { cache.hidden.row(t - 1) };
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        for (da, w, u, gw, gu, gb) in [
            (
                &da_i,
                &params.w_i,
                &params.u_i,
                &mut grads.w_i,
                &mut grads.u_i,
                &mut grads.b_i,
            ),
            (
                &da_f,
                &params.w_f,
                &params.u_f,
                &mut grads.w_f,
                &mut grads.u_f,
                &mut grads.b_f,
            ),
            (
                &da_o,
                &params.w_o,
                &params.u_o,
                &mut grads.w_o,
                &mut grads.u_o,
                &mut grads.b_o,
            ),
            (
                &da_g,
                &params.w_c,
                &params.u_c,
                &mut grads.w_c,
                &mut grads.u_c,
                &mut grads.b_c,
            ),
        ] {
            outer_acc(gw, xt, da);
            if t > 0 {
                outer_acc(gu, h_prev, da);
            }
            for (b, &d) in gb.data_mut().iter_mut().zip(da) {
                *b += d;
            }
            matvec_acc(w, da, dx.row_mut(t));
            matvec_acc(u, da, &mut dh_next);
        }
    }
    Ok((dx, grads))
}

/// Forward and backward LSTM passes with per-step state concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl BiLstmParams {
    pub fn init(d_in: usize, hidden: usize, rng: &mut Rng) -> Self {
        BiLstmParams {
            fwd: LstmParams::init(d_in, hidden, rng),
            bwd: LstmParams::init(d_in, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden()
    }
}

#[derive(Debug, Clone)]
pub struct BiLstmCache {
    fwd: LstmCache,
    bwd: LstmCache,
    true_len: usize,
}

/// Reverse the first `ell` rows of `x`; rows beyond stay in place.
fn reverse_rows(x: &Tensor, ell: usize) -> Tensor {
    let mut rev = x.clone();
    let cols = x.cols();
    for t in 0..ell {
        rev.row_mut(t)[..cols].copy_from_slice(x.row(ell - 1 - t));
    }
    rev
}

/// Output row t is [h_fwd_t ; h_bwd_t] where the backward pass consumed the
/// valid prefix in reverse. Rows at and beyond `true_len` copy row
/// `true_len - 1`.
pub fn bilstm_forward(
    params: &BiLstmParams,
    x: &Tensor,
    true_len: usize,
) -> Result<(Tensor, BiLstmCache)> {
    if params.fwd.hidden() != params.bwd.hidden() {
        return Err(Error::ShapeMismatch {
            op: "bilstm_forward",
            lhs: vec![params.fwd.hidden()],
            rhs: vec![params.bwd.hidden()],
        });
    }
    let t_total = x.rows();
    let ell = true_len.min(t_total).max(1);
    let h = params.hidden();

    let (states_f, cache_f) = lstm_forward(&params.fwd, x, ell)?;
    let x_rev = reverse_rows(x, ell);
    let (states_r, cache_r) = lstm_forward(&params.bwd, &x_rev, ell)?;

    let mut out = Tensor::zeros(vec![t_total, 2 * h]);
    for t in 0..t_total {
        let src_b = if t < ell { ell - 1 - t } else { 0 };
        out.row_mut(t)[..h].copy_from_slice(states_f.row(t));
        out.row_mut(t)[h..].copy_from_slice(states_r.row(src_b));
    }
    Ok((
        out,
        BiLstmCache {
            fwd: cache_f,
            bwd: cache_r,
            true_len: ell,
        },
    ))
}

/// Backward of [`bilstm_forward`]. Returns (d_input, gradients).
pub fn bilstm_backward(
    params: &BiLstmParams,
    cache: &BiLstmCache,
    dstates: &Tensor,
) -> Result<(Tensor, BiLstmParams)> {
    let t_total = cache.fwd.x.rows();
    let h = params.hidden();
    if dstates.shape() != [t_total, 2 * h] {
        return Err(Error::ShapeMismatch {
            op: "bilstm_backward",
            lhs: dstates.shape().to_vec(),
            rhs: vec![t_total, 2 * h],
        });
    }
    let ell = cache.true_len;

    // Split halves, folding copied rows (>= ell) into row ell-1.
    let mut d_fwd = Tensor::zeros(vec![t_total, h]);
    let mut d_bwd_rev = Tensor::zeros(vec![t_total, h]);
    for t in 0..t_total {
        let (dst_f, src_b) = if t < ell {
            (t, ell - 1 - t) // backward direction ran over the reversed prefix
        } else {
            (ell - 1, 0)
        };
        for k in 0..h {
            let vf = d_fwd.at(dst_f, k) + dstates.at(t, k);
            d_fwd.set(dst_f, k, vf);
            let vb = d_bwd_rev.at(src_b, k) + dstates.at(t, h + k);
            d_bwd_rev.set(src_b, k, vb);
        }
    }

    let (dx_f, grads_f) = lstm_backward(&params.fwd, &cache.fwd, &d_fwd)?;
    let (dx_r, grads_b) = lstm_backward(&params.bwd, &cache.bwd, &d_bwd_rev)?;

    let mut dx = dx_f;
    for t in 0..ell {
        let src = dx_r.row(ell - 1 - t).to_vec();
        for (d, s) in dx.row_mut(t).iter_mut().zip(src) {
            *d += s;
        }
    }
    Ok((
        dx,
        BiLstmParams {
            fwd: grads_f,
            bwd: grads_b,
        },
    ))
}

// ---------------------------------------------------------------------------
// Convolution over time

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvActivation {
    Relu,
    Identity,
}

/// One filter group: `F` filters of a single width over `D` input channels.
/// The kernel is stored as (width*D)×F; row j*D+c corresponds to window
/// offset j, channel c.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFilter {
    pub width: usize,
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvFilter {
    pub fn init(width: usize, d_in: usize, filters: usize, rng: &mut Rng) -> Self {
        ConvFilter {
            width,
            kernel: glorot_uniform(rng, width * d_in, filters),
            bias: Tensor::zeros(vec![filters]),
        }
    }

    pub fn filters(&self) -> usize {
        self.kernel.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.rows() / self.width
    }
}

/// Parallel filter groups, one per width, identical filter count.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFilterBank {
    pub filters: Vec<ConvFilter>,
}

impl ConvFilterBank {
    pub fn init(widths: &[usize], d_in: usize, per_width: usize, rng: &mut Rng) -> Self {
        ConvFilterBank {
            filters: widths
                .iter()
                .map(|&k| ConvFilter::init(k, d_in, per_width, rng))
                .collect(),
        }
    }

    pub fn max_width(&self) -> usize {
        self.filters.iter().map(|f| f.width).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    windows: Tensor, // L×(k*D)
    preact: Tensor,  // L×F
    rows_in: usize,
    activation: ConvActivation,
}

/// Slide one filter group over `x` (T×D): out[p][f] =
/// act(bias_f + sum over the width×D window of kernel ⊙ input).
pub fn conv_over_time(
    filter: &ConvFilter,
    x: &Tensor,
    activation: ConvActivation,
) -> Result<(Tensor, ConvCache)> {
    let t = x.rows();
    let d = x.cols();
    let k = filter.width;
    if d != filter.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "conv_over_time",
            lhs: x.shape().to_vec(),
            rhs: vec![k, filter.input_dim(), filter.filters()],
        });
    }
    if t < k {
        return Err(Error::InvalidArgument {
            op: "conv_over_time",
            msg: format!("sequence of {t} rows is shorter than filter width {k}; pad upstream"),
        });
    }
    let l = t - k + 1;
    // Row-major means window p is the contiguous slice x[p*D .. (p+k)*D].
    let mut windows = Tensor::zeros(vec![l, k * d]);
    for p in 0..l {
        windows
            .row_mut(p)
            .copy_from_slice(&x.data()[p * d..(p + k) * d]);
    }
    let mut preact = windows.matmul(&filter.kernel)?;
    let f = filter.filters();
    for p in 0..l {
        let row = preact.row_mut(p);
        for (v, b) in row.iter_mut().zip(filter.bias.data()) {
            *v += b;
        }
    }
    debug_assert_eq!(preact.shape(), &[l, f]);
    let out = match activation {
        ConvActivation::Relu => preact.relu(),
        ConvActivation::Identity => preact.clone(),
    };
    Ok((
        out,
        ConvCache {
            windows,
            preact,
            rows_in: t,
            activation,
        },
    ))
}

/// Backward of [`conv_over_time`]. Returns (d_input, d_kernel, d_bias).
pub fn conv_backward(
    filter: &ConvFilter,
    cache: &ConvCache,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let l = cache.preact.rows();
    let f = filter.filters();
    if upstream.shape() != [l, f] {
        return Err(Error::ShapeMismatch {
            op: "conv_backward",
            lhs: upstream.shape().to_vec(),
            rhs: vec![l, f],
        });
    }
    let dpre = match cache.activation {
        ConvActivation::Relu => {
            let mut d = upstream.clone();
            for (g, &p) in d.data_mut().iter_mut().zip(cache.preact.data()) {
                if p <= 0.0 {
                    *g = 0.0;
                }
            }
            d
        }
        ConvActivation::Identity => upstream.clone(),
    };

    let mut dbias = Tensor::zeros(vec![f]);
    for p in 0..l {
        for (b, &g) in dbias.data_mut().iter_mut().zip(dpre.row(p)) {
            *b += g;
        }
    }
    let dkernel = cache.windows.transpose()?.matmul(&dpre)?;
    let dwindows = dpre.matmul(&filter.kernel.transpose()?)?;

    let d = filter.input_dim();
    let k = filter.width;
    let mut dx = Tensor::zeros(vec![cache.rows_in, d]);
    for p in 0..l {
        let src = dwindows.row(p);
        let dst = &mut dx.data_mut()[p * d..(p + k) * d];
        for (a, b) in dst.iter_mut().zip(src) {
            *a += b;
        }
    }
    Ok((dx, dkernel, dbias))
}

// ---------------------------------------------------------------------------
// Pooling over time

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Max,
    Mean,
}

/// Per-filter maximum over the first `valid_len` rows; ties take the
/// smallest index. Returns the pooled vector and the argmax per filter for
/// backward routing.
pub fn max_pool_over_time(map: &Tensor, valid_len: usize) -> Result<(Tensor, Vec<usize>)> {
    let l = map.rows();
    let f = map.cols();
    if valid_len == 0 || l == 0 {
        return Err(Error::InvalidArgument {
            op: "max_pool_over_time",
            msg: "valid_len must be >= 1".into(),
        });
    }
    let v = valid_len.min(l);
    let mut out = Tensor::zeros(vec![f]);
    let mut argmax = vec![0usize; f];
    for c in 0..f {
        let mut best = map.at(0, c);
        let mut best_p = 0;
        for p in 1..v {
            let val = map.at(p, c);
            if val > best {
                best = val;
                best_p = p;
            }
        }
        out.data_mut()[c] = best;
        argmax[c] = best_p;
    }
    Ok((out, argmax))
}

/// Route each filter's gradient to its argmax position.
pub fn max_pool_backward(upstream: &Tensor, argmax: &[usize], rows: usize) -> Tensor {
    let f = upstream.len();
    let mut dmap = Tensor::zeros(vec![rows, f]);
    for (c, &p) in argmax.iter().enumerate() {
        dmap.set(p, c, upstream.data()[c]);
    }
    dmap
}

/// Per-filter mean over the first `valid_len` rows (the §VI pooling variant).
pub fn mean_pool_over_time(map: &Tensor, valid_len: usize) -> Result<Tensor> {
    let l = map.rows();
    let f = map.cols();
    if valid_len == 0 || l == 0 {
        return Err(Error::InvalidArgument {
            op: "mean_pool_over_time",
            msg: "valid_len must be >= 1".into(),
        });
    }
    let v = valid_len.min(l);
    let mut out = Tensor::zeros(vec![f]);
    for c in 0..f {
        let mut acc = 0.0;
        for p in 0..v {
            acc += map.at(p, c);
        }
        out.data_mut()[c] = acc / v as f64;
    }
    Ok(out)
}

pub fn mean_pool_backward(upstream: &Tensor, valid_len: usize, rows: usize) -> Tensor {
    let f = upstream.len();
    let v = valid_len.min(rows);
    let mut dmap = Tensor::zeros(vec![rows, f]);
    for p in 0..v {
        for c in 0..f {
            dmap.set(p, c, upstream.data()[c] / v as f64);
        }
    }
    dmap
}

// ---------------------------------------------------------------------------
// Dropout

/// Inverted dropout. In training mode each element is zeroed with
/// probability `rate` and survivors scale by 1/(1-rate); in eval mode the
/// input passes through untouched. The returned mask (already scaled) is
/// the backward multiplier.
pub fn dropout(
    x: &Tensor,
    rate: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument {
            op: "dropout",
            msg: format!("rate {rate} outside [0, 1)"),
        });
    }
    if !training || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask = x.map(|_| 0.0); // shape template
    let mut mask = mask;
    for m in mask.data_mut() {
        *m = if rng.next_f64() < rate { 0.0 } else { scale };
    }
    let out = x.hadamard(&mask)?;
    Ok((out, Some(mask)))
}

// ---------------------------------------------------------------------------
// Dense softmax head

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// in×classes
    pub w: Tensor,
    /// [classes]
    pub b: Tensor,
}

impl DenseParams {
    pub fn init(input: usize, classes: usize, rng: &mut Rng) -> Self {
        DenseParams {
            w: glorot_uniform(rng, input, classes),
            b: Tensor::zeros(vec![classes]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn classes(&self) -> usize {
        self.w.cols()
    }
}

/// softmax(Wᵀx + b).
pub fn dense_softmax(params: &DenseParams, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 || x.len() != params.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "dense_softmax",
            lhs: x.shape().to_vec(),
            rhs: vec![params.input_dim(), params.classes()],
        });
    }
    let mut logits = params.b.data().to_vec();
    vecmat_acc(x.data(), &params.w, &mut logits);
    Tensor::from_vec(logits).softmax()
}

/// Backward through the dense layer given the gradient w.r.t. the logits.
/// Returns (dx, dW, db).
pub fn dense_backward(
    params: &DenseParams,
    x: &Tensor,
    dlogits: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if dlogits.len() != params.classes() {
        return Err(Error::ShapeMismatch {
            op: "dense_backward",
            lhs: dlogits.shape().to_vec(),
            rhs: vec![params.classes()],
        });
    }
    let mut dw = Tensor::zeros_like(&params.w);
    outer_acc(&mut dw, x.data(), dlogits.data());
    let db = dlogits.clone();
    let mut dx = Tensor::zeros(vec![params.input_dim()]);
    matvec_acc(&params.w, dlogits.data(), dx.data_mut());
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// L2 penalty

/// Loss contribution (lambda/2)·sum of squares over the given weight
/// tensors, and the matching per-tensor gradient contribution lambda·W.
/// Callers pass weight matrices only: biases are excluded by convention,
/// and the embedding PAD row is zero so it contributes nothing.
pub fn l2_penalty(weights: &[&Tensor], lambda: f64) -> Result<(f64, Vec<Tensor>)> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument {
            op: "l2_penalty",
            msg: format!("negative lambda {lambda}"),
        });
    }
    if lambda == 0.0 {
        return Ok((0.0, weights.iter().map(|w| Tensor::zeros_like(w)).collect()));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(weights.len());
    for w in weights {
        loss += w.data().iter().map(|v| v * v).sum::<f64>();
        grads.push(w.scale(lambda));
    }
    Ok((0.5 * lambda * loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::numeric_gradient;

    pub(crate) fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / (a.abs() + n.abs()).max(1e-5)
    }

    fn random(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
        Tensor::rand_uniform(rng, shape, -1.0, 1.0).unwrap()
    }

    /// Check every element of `analytic` against the finite-difference
    /// gradient of `f` at `x`.
    fn check_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, analytic: &Tensor, what: &str) {
        let numeric = numeric_gradient(&f, x, 1e-4);
        for (idx, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            assert!(
                rel_err(*a, *n) < 1e-4,
                "{what}[{idx}]: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn lstm_zero_network_is_silent() {
        let params = LstmParams::zeros(3, 2);
        let x = Tensor::filled(vec![4, 3], 0.7);
        let (states, _) = lstm_forward(&params, &x, 4).unwrap();
        assert!(states.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_single_step_matches_hand_rolled_cell() {
        let mut rng = Rng::new(11);
        let params = LstmParams::init(2, 2, &mut rng);
        let x = random(vec![1, 2], &mut rng);
        let (states, _) = lstm_forward(&params, &x, 1).unwrap();

        // one gated step with h_prev = c_prev = 0
        let xt = x.row(0);
        let gate = |w: &Tensor, b: &Tensor, tanh: bool| -> Vec<f64> {
            let mut pre = b.data().to_vec();
            for (r, &v) in xt.iter().enumerate() {
                for c in 0..2 {
                    pre[c] += v * w.at(r, c);
                }
            }
            pre.iter()
                .map(|&p| if tanh { p.tanh() } else { sigmoid(p) })
                .collect()
        };
        let i = gate(&params.w_i, &params.b_i, false);
        let o = gate(&params.w_o, &params.b_o, false);
        let g = gate(&params.w_c, &params.b_c, true);
        for k in 0..2 {
            let c = i[k] * g[k];
            let expect = o[k] * c.tanh();
            assert!((states.at(0, k) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_bptt_matches_finite_differences() {
        let mut rng = Rng::new(42);
        let (t, d, h) = (5, 4, 3);
        let params = LstmParams::init(d, h, &mut rng);
        let x = random(vec![t, d], &mut rng);
        let weight = random(vec![t, h], &mut rng); // fixed projection breaking symmetry
        let true_len = 4; // exercise the copy-forward path too

        let loss_with = |p: &LstmParams, input: &Tensor| -> f64 {
            let (states, _) = lstm_forward(p, input, true_len).unwrap();
            states
                .data()
                .iter()
                .zip(weight.data())
                .map(|(s, w)| s * w)
                .sum()
        };
        let (states, cache) = lstm_forward(&params, &x, true_len).unwrap();
        assert_eq!(states.shape(), &[t, h]);
        let (dx, grads) = lstm_backward(&params, &cache, &weight).unwrap();

        check_grad(|v| loss_with(&params, v), &x, &dx, "dx");
        macro_rules! check_param {
            ($field:ident) => {{
                let f = |v: &Tensor| {
                    let mut p = params.clone();
                    p.$field = v.clone();
                    loss_with(&p, &x)
                };
                check_grad(f, &params.$field, &grads.$field, stringify!($field));
            }};
        }
        check_param!(w_i);
        check_param!(w_f);
        check_param!(w_o);
        check_param!(w_c);
        check_param!(u_i);
        check_param!(u_f);
        check_param!(u_o);
        check_param!(u_c);
        check_param!(b_i);
        check_param!(b_f);
        check_param!(b_o);
        check_param!(b_c);
    }

    #[test]
    fn bilstm_output_width_is_twice_hidden() {
        let mut rng = Rng::new(1);
        let params = BiLstmParams::init(300, 150, &mut rng);
        let x = random(vec![7, 300], &mut rng);
        let (out, _) = bilstm_forward(&params, &x, 7).unwrap();
        assert_eq!(out.shape(), &[7, 300]);
    }

    #[test]
    fn bilstm_palindrome_symmetry_with_tied_directions() {
        let mut rng = Rng::new(5);
        let one_dir = LstmParams::init(3, 2, &mut rng);
        let params = BiLstmParams {
            fwd: one_dir.clone(),
            bwd: one_dir,
        };
        let t = 5;
        let mut x = Tensor::zeros(vec![t, 3]);
        for i in 0..t {
            let row: Vec<f64> = (0..3).map(|j| ((i.min(t - 1 - i) + j) as f64) * 0.3).collect();
            x.row_mut(i).copy_from_slice(&row);
        }
        let (out, _) = bilstm_forward(&params, &x, t).unwrap();
        let h = 2;
        for i in 0..t {
            let j = t - 1 - i;
            for k in 0..h {
                assert!((out.at(i, k) - out.at(j, h + k)).abs() < 1e-12);
                assert!((out.at(i, h + k) - out.at(j, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilstm_bptt_matches_finite_differences() {
        let mut rng = Rng::new(7);
        let (t, d, h) = (4, 3, 2);
        let params = BiLstmParams::init(d, h, &mut rng);
        let x = random(vec![t, d], &mut rng);
        let weight = random(vec![t, 2 * h], &mut rng);
        let true_len = 3;

        let loss_with = |p: &BiLstmParams, input: &Tensor| -> f64 {
            let (states, _) = bilstm_forward(p, input, true_len).unwrap();
            states
                .data()
                .iter()
                .zip(weight.data())
                .map(|(s, w)| s * w)
                .sum()
        };
        let (_, cache) = bilstm_forward(&params, &x, true_len).unwrap();
        let (dx, grads) = bilstm_backward(&params, &cache, &weight).unwrap();

        check_grad(|v| loss_with(&params, v), &x, &dx, "dx");
        let f = |v: &Tensor| {
            let mut p = params.clone();
            p.fwd.w_i = v.clone();
            loss_with(&p, &x)
        };
        check_grad(f, &params.fwd.w_i, &grads.fwd.w_i, "fwd.w_i");
        let f = |v: &Tensor| {
            let mut p = params.clone();
            p.bwd.u_c = v.clone();
            loss_with(&p, &x)
        };
        check_grad(f, &params.bwd.u_c, &grads.bwd.u_c, "bwd.u_c");
        let f = |v: &Tensor| {
            let mut p = params.clone();
            p.bwd.b_f = v.clone();
            loss_with(&p, &x)
        };
        check_grad(f, &params.bwd.b_f, &grads.bwd.b_f, "bwd.b_f");
    }

    #[test]
    fn conv_output_length_is_t_minus_k_plus_1() {
        let mut rng = Rng::new(2);
        let filter = ConvFilter::init(3, 2, 4, &mut rng);
        let x = random(vec![50, 2], &mut rng);
        let (map, _) = conv_over_time(&filter, &x, ConvActivation::Relu).unwrap();
        assert_eq!(map.shape(), &[48, 4]);
    }

    #[test]
    fn conv_zero_filter_gives_zero_map() {
        let filter = ConvFilter {
            width: 2,
            kernel: Tensor::zeros(vec![2 * 3, 2]),
            bias: Tensor::zeros(vec![2]),
        };
        let mut rng = Rng::new(3);
        let x = random(vec![5, 3], &mut rng);
        let (map, _) = conv_over_time(&filter, &x, ConvActivation::Relu).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_hand_example_doubling_kernel() {
        // 1 filter, width 1, D=1, kernel [[2]]: [1,3,5] -> [2,6,10]
        let filter = ConvFilter {
            width: 1,
            kernel: Tensor::from_rows(&[vec![2.0]]).unwrap(),
            bias: Tensor::zeros(vec![1]),
        };
        let x = Tensor::new(vec![3, 1], vec![1.0, 3.0, 5.0]).unwrap();
        let (map, _) = conv_over_time(&filter, &x, ConvActivation::Relu).unwrap();
        assert_eq!(map.data(), &[2.0, 6.0, 10.0]);
    }

    #[test]
    fn conv_rejects_sequences_shorter_than_width() {
        let mut rng = Rng::new(2);
        let filter = ConvFilter::init(5, 2, 1, &mut rng);
        let x = random(vec![3, 2], &mut rng);
        assert!(conv_over_time(&filter, &x, ConvActivation::Relu).is_err());
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = Rng::new(13);
        let (t, d, f, k) = (6, 3, 2, 3);
        let filter = ConvFilter::init(k, d, f, &mut rng);
        let x = random(vec![t, d], &mut rng);
        let weight = random(vec![t - k + 1, f], &mut rng);

        for act in [ConvActivation::Relu, ConvActivation::Identity] {
            let loss_with = |flt: &ConvFilter, input: &Tensor| -> f64 {
                let (map, _) = conv_over_time(flt, input, act).unwrap();
                map.data().iter().zip(weight.data()).map(|(m, w)| m * w).sum()
            };
            let (_, cache) = conv_over_time(&filter, &x, act).unwrap();
            let (dx, dkernel, dbias) = conv_backward(&filter, &cache, &weight).unwrap();

            check_grad(|v| loss_with(&filter, v), &x, &dx, "conv dx");
            let f_k = |v: &Tensor| {
                let mut flt = filter.clone();
                flt.kernel = v.clone();
                loss_with(&flt, &x)
            };
            check_grad(f_k, &filter.kernel, &dkernel, "conv kernel");
            let f_b = |v: &Tensor| {
                let mut flt = filter.clone();
                flt.bias = v.clone();
                loss_with(&flt, &x)
            };
            check_grad(f_b, &filter.bias, &dbias, "conv bias");
        }
    }

    #[test]
    fn max_pool_basics() {
        let single = Tensor::from_rows(&[vec![3.0, -1.0]]).unwrap();
        let (pooled, argmax) = max_pool_over_time(&single, 1).unwrap();
        assert_eq!(pooled.data(), &[3.0, -1.0]);
        assert_eq!(argmax, &[0, 0]);

        let col = Tensor::new(vec![3, 1], vec![1.0, 5.0, 3.0]).unwrap();
        let (pooled, argmax) = max_pool_over_time(&col, 3).unwrap();
        assert_eq!(pooled.data(), &[5.0]);
        assert_eq!(argmax, &[1]);

        assert!(max_pool_over_time(&col, 0).is_err());
    }

    #[test]
    fn max_pool_respects_valid_len_and_ties() {
        let col = Tensor::new(vec![3, 1], vec![1.0, 1.0, 9.0]).unwrap();
        let (pooled, argmax) = max_pool_over_time(&col, 2).unwrap();
        assert_eq!(pooled.data(), &[1.0]); // position 2 masked out
        assert_eq!(argmax, &[0]); // tie -> smallest index
    }

    #[test]
    fn max_pool_gradient_routes_to_argmax() {
        let map = Tensor::from_rows(&[vec![1.0, 4.0], vec![5.0, 2.0]]).unwrap();
        let (_, argmax) = max_pool_over_time(&map, 2).unwrap();
        let upstream = Tensor::from_vec(vec![1.0, 1.0]);
        let dmap = max_pool_backward(&upstream, &argmax, 2);
        assert_eq!(dmap.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn mean_pool_and_backward() {
        let col = Tensor::new(vec![3, 1], vec![1.0, 5.0, 300.0]).unwrap();
        let pooled = mean_pool_over_time(&col, 2).unwrap();
        assert_eq!(pooled.data(), &[3.0]);
        let dmap = mean_pool_backward(&Tensor::from_vec(vec![1.0]), 2, 3);
        assert_eq!(dmap.data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = Rng::new(4);
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let (out, mask) = dropout(&x, 0.0, &mut rng, true).unwrap();
        assert_eq!(out, x);
        assert!(mask.is_none());
        let (out, mask) = dropout(&x, 0.9, &mut rng, false).unwrap();
        assert_eq!(out, x);
        assert!(mask.is_none());
        assert!(dropout(&x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_survivor_fraction_and_scaling() {
        let mut rng = Rng::new(8);
        let x = Tensor::filled(vec![100_000], 1.0);
        let (out, mask) = dropout(&x, 0.5, &mut rng, true).unwrap();
        let survivors = out.data().iter().filter(|&&v| v != 0.0).count();
        let fraction = survivors as f64 / x.len() as f64;
        assert!((fraction - 0.5).abs() < 0.01, "fraction {fraction}");
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(mask.is_some());
    }

    #[test]
    fn dense_uniform_and_bias_dominated() {
        let params = DenseParams {
            w: Tensor::zeros(vec![3, 2]),
            b: Tensor::zeros(vec![2]),
        };
        let x = Tensor::from_vec(vec![0.3, -0.7, 2.0]);
        let probs = dense_softmax(&params, &x).unwrap();
        assert_eq!(probs.data(), &[0.5, 0.5]);

        let params = DenseParams {
            w: Tensor::zeros(vec![3, 2]),
            b: Tensor::from_vec(vec![10.0, -10.0]),
        };
        let probs = dense_softmax(&params, &x).unwrap();
        assert!(probs.data()[0] > 0.999 && probs.data()[1] < 1e-3);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let params = DenseParams::init(4, 2, &mut rng);
        let x = random(vec![4], &mut rng);
        let label = 0usize;

        // fused softmax + cross-entropy: dlogits = probs - onehot
        let loss_with = |p: &DenseParams, input: &Tensor| -> f64 {
            let probs = dense_softmax(p, input).unwrap();
            -probs.data()[label].max(1e-12).ln()
        };
        let probs = dense_softmax(&params, &x).unwrap();
        let mut dlogits = probs.clone();
        dlogits.data_mut()[label] -= 1.0;
        let (dx, dw, db) = dense_backward(&params, &x, &dlogits).unwrap();

        check_grad(|v| loss_with(&params, v), &x, &dx, "dense dx");
        let f_w = |v: &Tensor| {
            let p = DenseParams {
                w: v.clone(),
                b: params.b.clone(),
            };
            loss_with(&p, &x)
        };
        check_grad(f_w, &params.w, &dw, "dense w");
        let f_b = |v: &Tensor| {
            let p = DenseParams {
                w: params.w.clone(),
                b: v.clone(),
            };
            loss_with(&p, &x)
        };
        check_grad(f_b, &params.b, &db, "dense b");
    }

    #[test]
    fn l2_penalty_formula() {
        let (loss, grads) = l2_penalty(&[], 2.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.is_empty());

        let w = Tensor::from_vec(vec![3.0]);
        let (loss, grads) = l2_penalty(&[&w], 2.0).unwrap();
        assert_eq!(loss, 9.0);
        assert_eq!(grads[0].data(), &[6.0]);

        let (loss, grads) = l2_penalty(&[&w], 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads[0].data(), &[0.0]);

        assert!(l2_penalty(&[&w], -1.0).is_err());
    }
}
