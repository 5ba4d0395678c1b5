//! Windowed multi-head self-attention block.
//!
//! `z = y + MLP(LN(y))`, `y = x + Proj(WindowAttention(LN(x)))`. Attention
//! runs inside non-overlapping `window × window` tiles. A shifted block rolls
//! the map by `window / 2` first and masks token pairs that were not
//! neighbours before the roll; results are written straight back to the
//! unrolled positions.

use rayon::prelude::*;

use super::layers::{dot, 
    gelu, gelu_slope, layer_norm, layer_norm_backward, linear, linear_backward, masked_softmax, softmax_backward,
    NormCache,
};
use super::params::{LinearSlot, NormSlot, SwinSlot};
use super::{FeatureMap, NetworkParams};
use crate::error::{Error, Result};

/// Token partition of one block: `count` windows of `size` tokens each.
pub(crate) struct Windows {
    tokens: Vec<usize>,
    labels: Vec<u8>,
    size: usize,
    count: usize,
}

impl Windows {
    pub(crate) fn new(height: usize, width: usize, window: usize, shift: usize) -> Windows {
        let label = |i: usize, len: usize| -> u8 {
            if shift == 0 || i < len - window {
                0
            } else if i < len - shift {
                1
            } else {
                2
            }
        };
        let (nh, nw) = (height / window, width / window);
        let size = window * window;
        let mut tokens = Vec::with_capacity(height * width);
        let mut labels = Vec::with_capacity(height * width);
        for wy in 0..nh {
            for wx in 0..nw {
                for a in 0..size {
                    // (i, j) in rolled coordinates
                    let (i, j) = (wy * window + a / window, wx * window + a % window);
                    let (y, x) = ((i + shift) % height, (j + shift) % width);
                    tokens.push(y * width + x);
                    labels.push(label(i, height) * 3 + label(j, width));
                }
            }
        }
        Windows {
            tokens,
            labels,
            size,
            count: nh * nw,
        }
    }

    fn tokens(&self, w: usize) -> &[usize] {
        &self.tokens[w * self.size..(w + 1) * self.size]
    }

    fn labels(&self, w: usize) -> &[u8] {
        &self.labels[w * self.size..(w + 1) * self.size]
    }
}

pub(crate) struct SwinCache {
    windows: Windows,
    x: Vec<f64>,
    xn: Vec<f64>,
    ln1: NormCache,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    yn: Vec<f64>,
    ln2: NormCache,
    h1: Vec<f64>,
    g: Vec<f64>,
}

struct Dims {
    d: usize,
    heads: usize,
    hd: usize,
}

fn dims(p: &NetworkParams) -> Dims {
    let cfg = p.config();
    Dims {
        d: cfg.decoder_channels(),
        heads: cfg.heads,
        hd: cfg.head_dim(),
    }
}

fn lin(p: &NetworkParams, s: &LinearSlot, x: &[f64]) -> Vec<f64> {
    linear(x, p.slice(s.weight), p.slice(s.bias), s.din, s.dout)
}

fn norm(p: &NetworkParams, s: &NormSlot, x: &[f64], d: usize) -> (Vec<f64>, NormCache) {
    layer_norm(x, p.slice(s.scale), p.slice(s.shift), d)
}

/// Attention for every window; returns `(o, probs)` with `probs` laid out as
/// `[window][head][query][key]`.
fn attend(qkv: &[f64], win: &Windows, dm: &Dims, keep_probs: bool) -> (Vec<f64>, Vec<f64>) {
    let (d, hd, ws) = (dm.d, dm.hd, win.size);
    let scale = 1.0 / (hd as f64).sqrt();
    let per_window: Vec<(Vec<f64>, Vec<f64>)> = (0..win.count)
        .into_par_iter()
        .map(|w| {
            let toks = win.tokens(w);
            let labs = win.labels(w);
            let mut out = vec![0.0; ws * d];
            let mut probs = vec![0.0; dm.heads * ws * ws];
            for h in 0..dm.heads {
                let q = |a: usize| &qkv[toks[a] * 3 * d + h * hd..][..hd];
                let k = |b: usize| &qkv[toks[b] * 3 * d + d + h * hd..][..hd];
                let v = |b: usize| &qkv[toks[b] * 3 * d + 2 * d + h * hd..][..hd];
                for a in 0..ws {
                    let row = &mut probs[(h * ws + a) * ws..][..ws];
                    let qa = q(a);
                    for (b, r) in row.iter_mut().enumerate() {
                        if labs[a] == labs[b] {
                            *r = scale * dot(qa, k(b));
                        }
                    }
                    masked_softmax(row, |b| labs[a] == labs[b]);
                    let oa = &mut out[a * d + h * hd..][..hd];
                    for (b, &pv) in row.iter().enumerate() {
                        if pv == 0.0 {
                            continue;
                        }
                        for (o, &vv) in oa.iter_mut().zip(v(b)) {
                            *o += pv * vv;
                        }
                    }
                }
            }
            (out, if keep_probs { probs } else { Vec::new() })
        })
        .collect();
    let n = win.tokens.len();
    let mut o = vec![0.0; n * d];
    let mut probs = Vec::with_capacity(if keep_probs { win.count * dm.heads * ws * ws } else { 0 });
    for (w, (out, pr)) in per_window.into_iter().enumerate() {
        for (a, &t) in win.tokens(w).iter().enumerate() {
            o[t * d..(t + 1) * d].copy_from_slice(&out[a * d..(a + 1) * d]);
        }
        probs.extend(pr);
    }
    (o, probs)
}

fn attend_backward(qkv: &[f64], probs: &[f64], win: &Windows, dm: &Dims, d_o: &[f64]) -> Vec<f64> {
    let (d, hd, ws) = (dm.d, dm.hd, win.size);
    let scale = 1.0 / (hd as f64).sqrt();
    let per_window: Vec<Vec<f64>> = (0..win.count)
        .into_par_iter()
        .map(|w| {
            let toks = win.tokens(w);
            let mut dqkv = vec![0.0; ws * 3 * d];
            let mut dp = vec![0.0; ws];
            let mut dl = vec![0.0; ws];
            for h in 0..dm.heads {
                let q = |a: usize| &qkv[toks[a] * 3 * d + h * hd..][..hd];
                let k = |b: usize| &qkv[toks[b] * 3 * d + d + h * hd..][..hd];
                let v = |b: usize| &qkv[toks[b] * 3 * d + 2 * d + h * hd..][..hd];
                for a in 0..ws {
                    let row = &probs[((w * dm.heads + h) * ws + a) * ws..][..ws];
                    let go = &d_o[toks[a] * d + h * hd..][..hd];
                    for b in 0..ws {
                        dp[b] = if row[b] == 0.0 {
                            0.0
                        } else {
                            dot(go, v(b))
                        };
                        // dV_b += P_ab dO_a
                        let pv = row[b];
                        if pv != 0.0 {
                            let dv = &mut dqkv[b * 3 * d + 2 * d + h * hd..][..hd];
                            for (x, &g) in dv.iter_mut().zip(go) {
                                *x += pv * g;
                            }
                        }
                    }
                    softmax_backward(row, &dp, &mut dl);
                    let qa = q(a).to_vec();
                    for b in 0..ws {
                        let s = scale * dl[b];
                        if s == 0.0 {
                            continue;
                        }
                        let kb = k(b);
                        let dq = &mut dqkv[a * 3 * d + h * hd..][..hd];
                        for (x, &kv) in dq.iter_mut().zip(kb) {
                            *x += s * kv;
                        }
                        let dk = &mut dqkv[b * 3 * d + d + h * hd..][..hd];
                        for (x, &qv) in dk.iter_mut().zip(&qa) {
                            *x += s * qv;
                        }
                    }
                }
            }
            dqkv
        })
        .collect();
    let mut dqkv = vec![0.0; win.tokens.len() * 3 * d];
    for (w, part) in per_window.into_iter().enumerate() {
        for (a, &t) in win.tokens(w).iter().enumerate() {
            dqkv[t * 3 * d..(t + 1) * 3 * d].copy_from_slice(&part[a * 3 * d..(a + 1) * 3 * d]);
        }
    }
    dqkv
}

/// Token-major block forward. `keep` retains what the backward pass needs.
pub(crate) fn swin_forward(
    p: &NetworkParams,
    slot: &SwinSlot,
    x: &[f64],
    height: usize,
    width: usize,
    shifted: bool,
    keep: bool,
) -> (Vec<f64>, Option<SwinCache>) {
    let dm = dims(p);
    let cfg = p.config();
    let shift = if shifted { cfg.shift() } else { 0 };
    let windows = Windows::new(height, width, cfg.window, shift);

    let (xn, ln1) = norm(p, &slot.norm1, x, dm.d);
    let qkv = lin(p, &slot.qkv, &xn);
    let (o, probs) = attend(&qkv, &windows, &dm, keep);
    let attn = lin(p, &slot.proj, &o);
    let y: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();

    let (yn, ln2) = norm(p, &slot.norm2, &y, dm.d);
    let h1 = lin(p, &slot.fc1, &yn);
    let g: Vec<f64> = h1.iter().map(|&v| gelu(v)).collect();
    let m = lin(p, &slot.fc2, &g);
    let z: Vec<f64> = y.iter().zip(&m).map(|(a, b)| a + b).collect();

    let cache = keep.then(|| SwinCache {
        windows,
        x: x.to_vec(),
        xn,
        ln1,
        qkv,
        probs,
        o,
        yn,
        ln2,
        h1,
        g,
    });
    (z, cache)
}

fn add_into(grads: &mut [f64], (off, len): (usize, usize), g: &[f64]) {
    grads[off..off + len].iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

fn lin_back(p: &NetworkParams, s: &LinearSlot, x: &[f64], dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
    let mut dw = vec![0.0; s.weight.1];
    let mut db = vec![0.0; s.bias.1];
    let dx = linear_backward(x, p.slice(s.weight), s.din, s.dout, dy, &mut dw, &mut db);
    add_into(grads, s.weight, &dw);
    add_into(grads, s.bias, &db);
    dx
}

fn norm_back(p: &NetworkParams, s: &NormSlot, cache: &NormCache, d: usize, dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
    let mut ds = vec![0.0; s.scale.1];
    let mut dsh = vec![0.0; s.shift.1];
    let dx = layer_norm_backward(cache, p.slice(s.scale), d, dy, &mut ds, &mut dsh);
    add_into(grads, s.scale, &ds);
    add_into(grads, s.shift, &dsh);
    dx
}

pub(crate) fn swin_backward(p: &NetworkParams, slot: &SwinSlot, c: &SwinCache, dz: &[f64], grads: &mut [f64]) -> Vec<f64> {
    let dm = dims(p);
    debug_assert_eq!(c.x.len(), dz.len());

    // MLP branch
    let dg = lin_back(p, &slot.fc2, &c.g, dz, grads);
    let dh1: Vec<f64> = dg.iter().zip(&c.h1).map(|(g, &h)| g * gelu_slope(h)).collect();
    let dyn_ = lin_back(p, &slot.fc1, &c.yn, &dh1, grads);
    let mut dy = norm_back(p, &slot.norm2, &c.ln2, dm.d, &dyn_, grads);
    dy.iter_mut().zip(dz).for_each(|(a, b)| *a += b);

    // attention branch
    let d_o = lin_back(p, &slot.proj, &c.o, &dy, grads);
    let dqkv = attend_backward(&c.qkv, &c.probs, &c.windows, &dm, &d_o);
    let dxn = lin_back(p, &slot.qkv, &c.xn, &dqkv, grads);
    let mut dx = norm_back(p, &slot.norm1, &c.ln1, dm.d, &dxn, grads);
    dx.iter_mut().zip(&dy).for_each(|(a, b)| *a += b);
    dx
}

/// One decoder block on a `2·feat_channels × H × W` map.
pub fn swin_block(x: &FeatureMap, p: &NetworkParams, index: usize, shifted: bool) -> Result<FeatureMap> {
    let cfg = p.config();
    if x.channels() != cfg.decoder_channels() {
        return Err(Error::dims(
            format!("{} channels", cfg.decoder_channels()),
            format!("{} channels", x.channels()),
        ));
    }
    cfg.check_spatial(x.height(), x.width())?;
    let slot = p
        .layout()
        .blocks
        .get(index)
        .ok_or_else(|| Error::InvalidParameter(format!("decoder has 3 blocks, asked for {index}")))?;
    let (z, _) = swin_forward(p, slot, &x.to_tokens(), x.height(), x.width(), shifted, false);
    Ok(FeatureMap::from_tokens(&z, x.channels(), x.height(), x.width()))
}

/// Attention matrices of one block, laid out `[window][head][query][key]`.
pub fn swin_attention(x: &FeatureMap, p: &NetworkParams, index: usize, shifted: bool) -> Result<Vec<f64>> {
    swin_block(x, p, index, shifted)?;
    let slot = &p.layout().blocks[index];
    let (_, cache) = swin_forward(p, slot, &x.to_tokens(), x.height(), x.width(), shifted, true);
    Ok(cache.expect("kept").probs)
}
