//! Forward and backward kernels shared by the eager and taped executors.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: usize,
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: 0,
        }
    }
}

impl ConvOpts {
    pub fn stride(stride: usize) -> Self {
        Self {
            stride,
            ..Self::default()
        }
    }
}

/// Output length of a strided, dilated, padded convolution, `None` when empty.
pub fn conv1d_len(len: usize, kernel: usize, o: ConvOpts) -> Option<usize> {
    let span = o.dilation * (kernel - 1) + 1;
    let padded = len + 2 * o.padding;
    if padded < span || o.stride == 0 {
        return None;
    }
    Some((padded - span) / o.stride + 1)
}

pub fn conv_transpose1d_len(
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let full = (len.checked_sub(1)?) * stride + kernel;
    full.checked_sub(2 * padding).filter(|&n| n > 0)
}

/// Range of `t` for which `t * stride + off` lands in `[0, bound)`, clipped to `[0, n_t)`.
fn tap_range(off: isize, stride: usize, n_t: usize, bound: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let last = bound as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(n_t as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

fn check_conv(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    o: ConvOpts,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (batch, cin, lin) = x.dims3("conv1d")?;
    let (cout, cin_g, k) = w.dims3("conv1d")?;
    if o.groups == 0 || o.stride == 0 || o.dilation == 0 || k == 0 {
        return shape_err(
            "conv1d",
            "stride, dilation, groups and kernel must be positive",
        );
    }
    if cin % o.groups != 0 || cout % o.groups != 0 || cin / o.groups != cin_g {
        return shape_err(
            "conv1d",
            format!(
                "input channels {cin}, groups {}, kernel {:?}",
                o.groups,
                w.shape()
            ),
        );
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return shape_err("conv1d", format!("bias {:?} for {cout} outputs", b.shape()));
        }
    }
    let Some(lout) = conv1d_len(lin, k, o) else {
        return shape_err(
            "conv1d",
            format!("input length {lin} too short for kernel {k}"),
        );
    };
    Ok((batch, cin, lin, cout, k, lout))
}

pub fn conv1d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, o: ConvOpts) -> Result<Tensor> {
    let (batch, cin, lin, cout, k, lout) = check_conv(x, w, b, o)?;
    let cin_g = cin / o.groups;
    let cout_g = cout / o.groups;
    let mut out = vec![0.0; batch * cout * lout];
    let (xd, wd) = (x.data(), w.data());
    for bi in 0..batch {
        for oc in 0..cout {
            let g = oc / cout_g;
            let orow = &mut out[(bi * cout + oc) * lout..][..lout];
            if let Some(b) = b {
                orow.fill(b.data()[oc]);
            }
            for icl in 0..cin_g {
                let ic = g * cin_g + icl;
                let xrow = &xd[(bi * cin + ic) * lin..][..lin];
                for kk in 0..k {
                    let wv = wd[(oc * cin_g + icl) * k + kk];
                    let off = (kk * o.dilation) as isize - o.padding as isize;
                    let (lo, hi) = tap_range(off, o.stride, lout, lin);
                    if lo >= hi {
                        continue;
                    }
                    if o.stride == 1 {
                        let start = (lo as isize + off) as usize;
                        for (dst, src) in orow[lo..hi].iter_mut().zip(&xrow[start..]) {
                            *dst += wv * src;
                        }
                    } else {
                        for t in lo..hi {
                            orow[t] += wv * xrow[(t as isize * o.stride as isize + off) as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch, cout, lout], out)
}

/// Returns `(dx, dw, db)`; `db` is only populated when `with_bias`.
pub fn conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    with_bias: bool,
    o: ConvOpts,
    dout: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let [batch, cin, lin] = x.shape()[..] else {
        unreachable!()
    };
    let [cout, cin_g, k] = w.shape()[..] else {
        unreachable!()
    };
    let lout = dout.shape()[2];
    let cout_g = cout / o.groups;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; if with_bias { cout } else { 0 }];
    let (xd, wd, gd) = (x.data(), w.data(), dout.data());
    for bi in 0..batch {
        for oc in 0..cout {
            let g = oc / cout_g;
            let grow = &gd[(bi * cout + oc) * lout..][..lout];
            if with_bias {
                db[oc] += grow.iter().sum::<f64>();
            }
            for icl in 0..cin_g {
                let ic = g * cin_g + icl;
                let xoff = (bi * cin + ic) * lin;
                for kk in 0..k {
                    let widx = (oc * cin_g + icl) * k + kk;
                    let wv = wd[widx];
                    let off = (kk * o.dilation) as isize - o.padding as isize;
                    let (lo, hi) = tap_range(off, o.stride, lout, lin);
                    let mut acc = 0.0;
                    for t in lo..hi {
                        let pos = xoff + (t as isize * o.stride as isize + off) as usize;
                        acc += grow[t] * xd[pos];
                        dx[pos] += wv * grow[t];
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
        with_bias.then(|| Tensor::new(vec![cout], db).unwrap()),
    )
}

/// Transposed convolution with weight layout `[in, out, kernel]`.
pub fn conv_transpose1d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (batch, cin, lin) = x.dims3("conv_transpose1d")?;
    let (win, cout, k) = w.dims3("conv_transpose1d")?;
    if win != cin || stride == 0 || k == 0 {
        return shape_err(
            "conv_transpose1d",
            format!(
                "input channels {cin} vs kernel {:?}, stride {stride}",
                w.shape()
            ),
        );
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return shape_err(
                "conv_transpose1d",
                format!("bias {:?} for {cout} outputs", b.shape()),
            );
        }
    }
    let Some(lout) = conv_transpose1d_len(lin, k, stride, padding) else {
        return shape_err("conv_transpose1d", format!("empty output for length {lin}"));
    };
    let mut out = vec![0.0; batch * cout * lout];
    let (xd, wd) = (x.data(), w.data());
    for bi in 0..batch {
        for oc in 0..cout {
            let orow = &mut out[(bi * cout + oc) * lout..][..lout];
            if let Some(b) = b {
                orow.fill(b.data()[oc]);
            }
            for ic in 0..cin {
                let xrow = &xd[(bi * cin + ic) * lin..][..lin];
                for kk in 0..k {
                    let wv = wd[(ic * cout + oc) * k + kk];
                    let off = kk as isize - padding as isize;
                    let (lo, hi) = tap_range(off, stride, lin, lout);
                    for t in lo..hi {
                        orow[(t as isize * stride as isize + off) as usize] += wv * xrow[t];
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch, cout, lout], out)
}

pub fn conv_transpose1d_backward(
    x: &Tensor,
    w: &Tensor,
    with_bias: bool,
    stride: usize,
    padding: usize,
    dout: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let [batch, cin, lin] = x.shape()[..] else {
        unreachable!()
    };
    let [_, cout, k] = w.shape()[..] else {
        unreachable!()
    };
    let lout = dout.shape()[2];
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; if with_bias { cout } else { 0 }];
    let (xd, wd, gd) = (x.data(), w.data(), dout.data());
    for bi in 0..batch {
        for oc in 0..cout {
            let grow = &gd[(bi * cout + oc) * lout..][..lout];
            if with_bias {
                db[oc] += grow.iter().sum::<f64>();
            }
            for ic in 0..cin {
                let xoff = (bi * cin + ic) * lin;
                for kk in 0..k {
                    let widx = (ic * cout + oc) * k + kk;
                    let wv = wd[widx];
                    let off = kk as isize - padding as isize;
                    let (lo, hi) = tap_range(off, stride, lin, lout);
                    let mut acc = 0.0;
                    for t in lo..hi {
                        let g = grow[(t as isize * stride as isize + off) as usize];
                        acc += g * xd[xoff + t];
                        dx[xoff + t] += wv * g;
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
        with_bias.then(|| Tensor::new(vec![cout], db).unwrap()),
    )
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Gated linear unit over the channel axis: `a * sigmoid(b)` for `x = [a | b]`.
pub fn glu(x: &Tensor) -> Result<Tensor> {
    let (batch, c2, l) = x.dims3("glu")?;
    if c2 % 2 != 0 {
        return shape_err("glu", format!("odd channel count {c2}"));
    }
    let c = c2 / 2;
    let mut out = Vec::with_capacity(batch * c * l);
    let xd = x.data();
    for bi in 0..batch {
        let a = &xd[bi * c2 * l..][..c * l];
        let g = &xd[(bi * c2 + c) * l..][..c * l];
        out.extend(a.iter().zip(g).map(|(&a, &g)| a * sigmoid(g)));
    }
    Tensor::new(vec![batch, c, l], out)
}

pub fn glu_backward(x: &Tensor, dout: &Tensor) -> Tensor {
    let [batch, c2, l] = x.shape()[..] else {
        unreachable!()
    };
    let c = c2 / 2;
    let mut dx = vec![0.0; x.len()];
    let (xd, gd) = (x.data(), dout.data());
    for bi in 0..batch {
        for i in 0..c * l {
            let a = xd[bi * c2 * l + i];
            let s = sigmoid(xd[(bi * c2 + c) * l + i]);
            let g = gd[bi * c * l + i];
            dx[bi * c2 * l + i] = g * s;
            dx[(bi * c2 + c) * l + i] = g * a * s * (1.0 - s);
        }
    }
    Tensor::new(x.shape().to_vec(), dx).unwrap()
}

/// Statistics groups used by layer normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// One mean/variance per batch item, over channels and time.
    Global,
    /// One mean/variance per batch item and time step, over channels.
    Channel,
}

pub const NORM_EPS: f64 = 1e-8;

/// Normalized activations (before the affine step) and one inverse std per group.
pub struct NormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

fn norm_groups(
    kind: NormKind,
    batch: usize,
    c: usize,
    l: usize,
) -> (usize, Box<dyn Fn(usize, usize) -> Vec<usize>>) {
    match kind {
        NormKind::Global => (
            batch,
            Box::new(move |g, _| ((g * c * l)..((g + 1) * c * l)).collect()),
        ),
        NormKind::Channel => (
            batch * l,
            Box::new(move |g, _| {
                let (bi, t) = (g / l, g % l);
                (0..c).map(|ch| (bi * c + ch) * l + t).collect()
            }),
        ),
    }
}

pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    kind: NormKind,
) -> Result<(Tensor, NormCache)> {
    let (batch, c, l) = x.dims3("layer_norm")?;
    if gain.shape() != [c] || bias.shape() != [c] {
        return shape_err(
            "layer_norm",
            format!(
                "gain {:?} / bias {:?} for {c} channels",
                gain.shape(),
                bias.shape()
            ),
        );
    }
    let (n_groups, members) = norm_groups(kind, batch, c, l);
    let xd = x.data();
    let mut y = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(n_groups);
    for g in 0..n_groups {
        let idx = members(g, 0);
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| xd[i]).sum::<f64>() / n;
        let var = idx.iter().map(|&i| (xd[i] - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(inv);
        for &i in &idx {
            let ch = (i / l) % c;
            y[i] = (xd[i] - mean) * inv;
            out[i] = gain.data()[ch] * y[i] + bias.data()[ch];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        NormCache {
            normalized: Tensor::new(x.shape().to_vec(), y)?,
            inv_std,
        },
    ))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &NormCache,
    gain: &Tensor,
    kind: NormKind,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [batch, c, l] = dout.shape()[..] else {
        unreachable!()
    };
    let (n_groups, members) = norm_groups(kind, batch, c, l);
    let (y, gd) = (cache.normalized.data(), dout.data());
    let mut dx = vec![0.0; dout.len()];
    let mut dgain = vec![0.0; c];
    let mut dbias = vec![0.0; c];
    for g in 0..n_groups {
        let idx = members(g, 0);
        let n = idx.len() as f64;
        let mut mean_dy = 0.0;
        let mut mean_dyy = 0.0;
        for &i in &idx {
            let ch = (i / l) % c;
            dgain[ch] += gd[i] * y[i];
            dbias[ch] += gd[i];
            let dy = gd[i] * gain.data()[ch];
            mean_dy += dy;
            mean_dyy += dy * y[i];
        }
        mean_dy /= n;
        mean_dyy /= n;
        let inv = cache.inv_std[g];
        for &i in &idx {
            let ch = (i / l) % c;
            let dy = gd[i] * gain.data()[ch];
            dx[i] = inv * (dy - mean_dy - y[i] * mean_dyy);
        }
    }
    (
        Tensor::new(dout.shape().to_vec(), dx).unwrap(),
        Tensor::new(vec![c], dgain).unwrap(),
        Tensor::new(vec![c], dbias).unwrap(),
    )
}

/// PReLU with either one shared slope (`[1]`) or one per channel (`[C]`).
pub fn prelu(x: &Tensor, slope: &Tensor) -> Result<Tensor> {
    let (_, c, l) = x.dims3("prelu")?;
    let per_channel = match slope.shape() {
        [1] => false,
        [n] if *n == c => true,
        s => return shape_err("prelu", format!("slope {s:?} for {c} channels")),
    };
    let sd = slope.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let a = if per_channel { sd[(i / l) % c] } else { sd[0] };
            if v > 0.0 {
                v
            } else {
                a * v
            }
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn prelu_backward(x: &Tensor, slope: &Tensor, dout: &Tensor) -> (Tensor, Tensor) {
    let [_, c, l] = x.shape()[..] else {
        unreachable!()
    };
    let per_channel = slope.len() > 1;
    let sd = slope.data();
    let mut dx = vec![0.0; x.len()];
    let mut ds = vec![0.0; slope.len()];
    for (i, (&v, &g)) in x.data().iter().zip(dout.data()).enumerate() {
        let si = if per_channel { (i / l) % c } else { 0 };
        if v > 0.0 {
            dx[i] = g;
        } else {
            dx[i] = sd[si] * g;
            ds[si] += v * g;
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(slope.shape().to_vec(), ds).unwrap(),
    )
}

/// Per-step activations kept for backpropagation through time.
pub struct LstmCache {
    /// `[batch][t][4H]` post-nonlinearity gates in `i, f, g, o` order.
    gates: Vec<f64>,
    /// `[batch][t][H]` cell states.
    cells: Vec<f64>,
    /// `[batch][t][H]` hidden states.
    hidden: Vec<f64>,
}

fn check_lstm(
    x: &Tensor,
    w_ih: &Tensor,
    w_hh: &Tensor,
    b_ih: &Tensor,
    b_hh: &Tensor,
) -> Result<(usize, usize, usize, usize)> {
    let (batch, input, steps) = x.dims3("lstm")?;
    let h4 = w_ih.shape().first().copied().unwrap_or(0);
    let h = h4 / 4;
    if h == 0
        || h4 % 4 != 0
        || w_ih.shape() != [h4, input]
        || w_hh.shape() != [h4, h]
        || b_ih.shape() != [h4]
        || b_hh.shape() != [h4]
    {
        return shape_err(
            "lstm",
            format!(
                "input {input}, w_ih {:?}, w_hh {:?}, b_ih {:?}, b_hh {:?}",
                w_ih.shape(),
                w_hh.shape(),
                b_ih.shape(),
                b_hh.shape()
            ),
        );
    }
    Ok((batch, input, steps, h))
}

/// Single-direction LSTM over the time axis; output `[batch, H, T]`.
/// With `reverse`, the recurrence runs from the last step to the first.
pub fn lstm(
    x: &Tensor,
    w_ih: &Tensor,
    w_hh: &Tensor,
    b_ih: &Tensor,
    b_hh: &Tensor,
    reverse: bool,
) -> Result<(Tensor, LstmCache)> {
    let (batch, input, steps, h) = check_lstm(x, w_ih, w_hh, b_ih, b_hh)?;
    let h4 = 4 * h;
    let (xd, wi, wh) = (x.data(), w_ih.data(), w_hh.data());
    let mut gates = vec![0.0; batch * steps * h4];
    let mut cells = vec![0.0; batch * steps * h];
    let mut hidden = vec![0.0; batch * steps * h];
    let mut out = vec![0.0; batch * h * steps];
    let mut pre = vec![0.0; h4];
    let mut xt = vec![0.0; input];
    for bi in 0..batch {
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        for step in 0..steps {
            let t = if reverse { steps - 1 - step } else { step };
            for (i, v) in xt.iter_mut().enumerate() {
                *v = xd[(bi * input + i) * steps + t];
            }
            for r in 0..h4 {
                let wi_row = &wi[r * input..][..input];
                let wh_row = &wh[r * h..][..h];
                pre[r] = b_ih.data()[r]
                    + b_hh.data()[r]
                    + wi_row.iter().zip(&xt).map(|(a, b)| a * b).sum::<f64>()
                    + wh_row.iter().zip(&h_prev).map(|(a, b)| a * b).sum::<f64>();
            }
            let gslot = &mut gates[(bi * steps + t) * h4..][..h4];
            for j in 0..h {
                let i_g = sigmoid(pre[j]);
                let f_g = sigmoid(pre[h + j]);
                let g_g = pre[2 * h + j].tanh();
                let o_g = sigmoid(pre[3 * h + j]);
                gslot[j] = i_g;
                gslot[h + j] = f_g;
                gslot[2 * h + j] = g_g;
                gslot[3 * h + j] = o_g;
                let c = f_g * c_prev[j] + i_g * g_g;
                let hv = o_g * c.tanh();
                c_prev[j] = c;
                h_prev[j] = hv;
                cells[(bi * steps + t) * h + j] = c;
                hidden[(bi * steps + t) * h + j] = hv;
                out[(bi * h + j) * steps + t] = hv;
            }
        }
    }
    Ok((
        Tensor::new(vec![batch, h, steps], out)?,
        LstmCache {
            gates,
            cells,
            hidden,
        },
    ))
}

pub struct LstmGrads {
    pub dx: Tensor,
    pub dw_ih: Tensor,
    pub dw_hh: Tensor,
    pub db_ih: Tensor,
    pub db_hh: Tensor,
}

pub fn lstm_backward(
    x: &Tensor,
    w_ih: &Tensor,
    w_hh: &Tensor,
    reverse: bool,
    cache: &LstmCache,
    dout: &Tensor,
) -> LstmGrads {
    let [batch, input, steps] = x.shape()[..] else {
        unreachable!()
    };
    let h4 = w_ih.shape()[0];
    let h = h4 / 4;
    let (xd, wi, wh, gd) = (x.data(), w_ih.data(), w_hh.data(), dout.data());
    let mut dx = vec![0.0; x.len()];
    let mut dwi = vec![0.0; w_ih.len()];
    let mut dwh = vec![0.0; w_hh.len()];
    let mut db = vec![0.0; h4];
    let mut dpre = vec![0.0; h4];
    for bi in 0..batch {
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for step in (0..steps).rev() {
            let t = if reverse { steps - 1 - step } else { step };
            let prev_t = (step > 0).then(|| if reverse { t + 1 } else { t - 1 });
            let gslot = &cache.gates[(bi * steps + t) * h4..][..h4];
            for j in 0..h {
                let (i_g, f_g, g_g, o_g) =
                    (gslot[j], gslot[h + j], gslot[2 * h + j], gslot[3 * h + j]);
                let c = cache.cells[(bi * steps + t) * h + j];
                let c_prev = prev_t.map_or(0.0, |p| cache.cells[(bi * steps + p) * h + j]);
                let tc = c.tanh();
                let dh = gd[(bi * h + j) * steps + t] + dh_next[j];
                let d_o = dh * tc;
                let dc = dh * o_g * (1.0 - tc * tc) + dc_next[j];
                dpre[j] = dc * g_g * i_g * (1.0 - i_g);
                dpre[h + j] = dc * c_prev * f_g * (1.0 - f_g);
                dpre[2 * h + j] = dc * i_g * (1.0 - g_g * g_g);
                dpre[3 * h + j] = d_o * o_g * (1.0 - o_g);
                dc_next[j] = dc * f_g;
            }
            dh_next.fill(0.0);
            for r in 0..h4 {
                let d = dpre[r];
                if d == 0.0 {
                    continue;
                }
                db[r] += d;
                for i in 0..input {
                    let xi = (bi * input + i) * steps + t;
                    dwi[r * input + i] += d * xd[xi];
                    dx[xi] += d * wi[r * input + i];
                }
                if let Some(p) = prev_t {
                    let hp = &cache.hidden[(bi * steps + p) * h..][..h];
                    for k in 0..h {
                        dwh[r * h + k] += d * hp[k];
                        dh_next[k] += d * wh[r * h + k];
                    }
                }
            }
        }
    }
    LstmGrads {
        dx: Tensor::new(x.shape().to_vec(), dx).unwrap(),
        dw_ih: Tensor::new(w_ih.shape().to_vec(), dwi).unwrap(),
        dw_hh: Tensor::new(w_hh.shape().to_vec(), dwh).unwrap(),
        db_ih: Tensor::new(vec![h4], db.clone()).unwrap(),
        db_hh: Tensor::new(vec![h4], db).unwrap(),
    }
}

fn check_rows(op: &'static str, x: &Tensor, target: &Tensor) -> Result<(usize, usize, usize)> {
    let dims = x.dims3(op)?;
    if x.shape() != target.shape() {
        return shape_err(
            op,
            format!("estimate {:?} vs target {:?}", x.shape(), target.shape()),
        );
    }
    Ok(dims)
}

/// Mean absolute error per `(batch, channel)` row, shape `[batch, channels]`.
pub fn l1_rows(x: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (batch, c, l) = check_rows("l1_rows", x, target)?;
    let data = (0..batch * c)
        .map(|r| {
            let (a, b) = (&x.data()[r * l..][..l], &target.data()[r * l..][..l]);
            a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / l.max(1) as f64
        })
        .collect();
    Tensor::new(vec![batch, c], data)
}

pub fn l1_rows_backward(x: &Tensor, target: &Tensor, dout: &Tensor) -> Tensor {
    let l = x.shape()[2];
    let data = x
        .data()
        .iter()
        .zip(target.data())
        .enumerate()
        .map(|(i, (p, q))| {
            let s = if p > q {
                1.0
            } else if p < q {
                -1.0
            } else {
                0.0
            };
            s * dout.data()[i / l] / l as f64
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

pub const SI_SNR_CLAMP_DB: f64 = 60.0;
pub const ENERGY_EPS: f64 = 1e-8;
const DB_PER_LN: f64 = 10.0 / std::f64::consts::LN_10;

/// Negated scale-invariant SNR for one row, with its gradient.
///
/// The value is clamped to `[-60, 60]`; the gradient is zero when clamped.
/// An all-zero target falls back to the estimate energy `10 log10(|x|^2 + eps)`.
pub fn neg_si_snr_row(x: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let tt: f64 = target.iter().map(|v| v * v).sum();
    let clamp = |v: f64| v.clamp(-SI_SNR_CLAMP_DB, SI_SNR_CLAMP_DB);
    if tt == 0.0 {
        let xx: f64 = x.iter().map(|v| v * v).sum();
        let raw = 10.0 * (xx + ENERGY_EPS).log10();
        let value = clamp(raw);
        let grad = if value != raw {
            vec![0.0; x.len()]
        } else {
            x.iter()
                .map(|v| DB_PER_LN * 2.0 * v / (xx + ENERGY_EPS))
                .collect()
        };
        return (value, grad);
    }
    let xt: f64 = x.iter().zip(target).map(|(a, b)| a * b).sum();
    let alpha = xt / tt;
    let s: Vec<f64> = target.iter().map(|v| alpha * v).collect();
    let e: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a - b).collect();
    let ss: f64 = s.iter().map(|v| v * v).sum();
    let ee: f64 = e.iter().map(|v| v * v).sum();
    if ee == 0.0 {
        return (-SI_SNR_CLAMP_DB, vec![0.0; x.len()]);
    }
    if ss == 0.0 {
        return (SI_SNR_CLAMP_DB, vec![0.0; x.len()]);
    }
    let raw = -10.0 * (ss / ee).log10();
    let value = clamp(raw);
    let grad = if value != raw {
        vec![0.0; x.len()]
    } else {
        s.iter()
            .zip(&e)
            .map(|(sv, ev)| -DB_PER_LN * (2.0 * sv / ss - 2.0 * ev / ee))
            .collect()
    };
    (value, grad)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Slice `[start, start + len)` along `axis`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.shape().len() || start + len > x.shape()[axis] {
        return shape_err(
            "narrow",
            format!(
                "[{start}, {}) on axis {axis} of {:?}",
                start + len,
                x.shape()
            ),
        );
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        data.extend_from_slice(&x.data()[(o * n + start) * inner..][..len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, data)
}

/// Scatter-adds `dout` back into a zero tensor of `full_shape`.
pub fn narrow_backward(full_shape: &[usize], axis: usize, start: usize, dout: &Tensor) -> Tensor {
    let (outer, n, inner) = axis_split(full_shape, axis);
    let len = dout.shape()[axis];
    let mut dx = vec![0.0; outer * n * inner];
    for o in 0..outer {
        dx[(o * n + start) * inner..][..len * inner]
            .copy_from_slice(&dout.data()[o * len * inner..][..len * inner]);
    }
    Tensor::new(full_shape.to_vec(), dx).unwrap()
}

pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let Some(first) = xs.first() else {
        return shape_err("concat", "no inputs");
    };
    let rank = first.shape().len();
    if axis >= rank {
        return shape_err("concat", format!("axis {axis} for rank {rank}"));
    }
    for x in xs {
        let same = x.shape().len() == rank
            && x.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return shape_err("concat", format!("{:?} vs {:?}", x.shape(), first.shape()));
        }
    }
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let total: usize = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let n = x.shape()[axis];
            data.extend_from_slice(&x.data()[o * n * inner..][..n * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(shape, data)
}
