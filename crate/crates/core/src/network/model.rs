//! Encoder, decoder and the full two-input forward pass, plus backpropagation.

use super::ccam::{ccam_backward, ccam_forward, CcamCache};
use super::config::LEAKY_SLOPE;
use super::layers::{conv2d_backward, conv2d_unchecked, leaky_relu, sigmoid, ConvKernel};
use super::params::ConvSlot;
use super::swin::{swin_backward, swin_forward, SwinCache};
use super::{FeatureMap, NetworkParams};
use crate::error::{Error, Result};
use crate::image_io::HdrImage;
use crate::radiometry::InputStack;

/// Shift pattern of the three decoder blocks.
pub const BLOCK_SHIFTS: [bool; 3] = [false, true, false];

fn kernel<'a>(p: &'a NetworkParams, s: &ConvSlot) -> ConvKernel<'a> {
    ConvKernel {
        weight: p.slice(s.weight),
        bias: p.slice(s.bias),
        in_channels: s.cin,
        out_channels: s.cout,
    }
}

fn stack_to_map(x: &InputStack) -> FeatureMap {
    FeatureMap::new(7, x.height(), x.width(), x.data().to_vec()).expect("stack has 7 planes")
}

struct EncoderCache {
    input: FeatureMap,
    pre: Vec<FeatureMap>,
    act: Vec<FeatureMap>,
}

fn encode(p: &NetworkParams, input: FeatureMap, keep: bool) -> (FeatureMap, Option<EncoderCache>) {
    let mut pre = Vec::new();
    let mut act = Vec::new();
    let mut cur = input.clone();
    for slot in &p.layout().encoder {
        let z = conv2d_unchecked(&cur, kernel(p, slot), slot.dilation);
        let a = z.map(|v| leaky_relu(v, LEAKY_SLOPE));
        if keep {
            pre.push(z);
            act.push(a.clone());
        }
        cur = a;
    }
    (cur, keep.then_some(EncoderCache { input, pre, act }))
}

fn encode_backward(p: &NetworkParams, c: &EncoderCache, d_out: FeatureMap, grads: &mut [f64]) {
    let mut g = d_out;
    for (i, slot) in p.layout().encoder.iter().enumerate().rev() {
        let pre = &c.pre[i];
        for (gv, &z) in g.data_mut().iter_mut().zip(pre.data()) {
            if z <= 0.0 {
                *gv *= LEAKY_SLOPE;
            }
        }
        let input = if i == 0 { &c.input } else { &c.act[i - 1] };
        let (wo, wl) = slot.weight;
        let (bo, bl) = slot.bias;
        let mut dw = vec![0.0; wl];
        let mut db = vec![0.0; bl];
        g = conv2d_backward(input, kernel(p, slot), slot.dilation, &g, &mut dw, &mut db);
        grads[wo..wo + wl].iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        grads[bo..bo + bl].iter_mut().zip(&db).for_each(|(a, b)| *a += b);
    }
}

/// Three dilated 3×3 convolutions (dilation 1, 2, 4) with LeakyReLU, 7 → C → C → C.
pub fn can_encode(x: &InputStack, p: &NetworkParams) -> Result<FeatureMap> {
    p.config().check_spatial(x.height(), x.width())?;
    Ok(encode(p, stack_to_map(x), false).0)
}

struct DecoderCache {
    blocks: Vec<SwinCache>,
    cat: FeatureMap,
    fusion_pre: FeatureMap,
    fusion_act: FeatureMap,
    out: FeatureMap,
}

fn decode_inner(p: &NetworkParams, fused: &FeatureMap, skip: &FeatureMap, keep: bool) -> (FeatureMap, Option<DecoderCache>) {
    let l = p.layout();
    let (h, w, d) = (fused.height(), fused.width(), fused.channels());
    let mut tokens = fused.to_tokens();
    let mut outs = Vec::with_capacity(3);
    let mut caches = Vec::new();
    for (slot, &shifted) in l.blocks.iter().zip(&BLOCK_SHIFTS) {
        let (z, cache) = swin_forward(p, slot, &tokens, h, w, shifted, keep);
        caches.extend(cache);
        outs.push(FeatureMap::from_tokens(&z, d, h, w));
        tokens = z;
    }
    let cat = FeatureMap::concat(&[&outs[0], &outs[1], &outs[2], skip]).expect("equal spatial dims");
    let fusion_pre = conv2d_unchecked(&cat, kernel(p, &l.fusion), 1);
    let fusion_act = fusion_pre.map(|v| leaky_relu(v, LEAKY_SLOPE));
    let logits = conv2d_unchecked(&fusion_act, kernel(p, &l.head), 1);
    let out = logits.map(sigmoid);
    let cache = keep.then(|| DecoderCache {
        blocks: caches,
        cat,
        fusion_pre,
        fusion_act,
        out: out.clone(),
    });
    (out, cache)
}

/// Returns the gradients with respect to `(fused, skip)`.
fn decode_backward(p: &NetworkParams, c: &DecoderCache, d_out: &FeatureMap, grads: &mut [f64]) -> (FeatureMap, FeatureMap) {
    let l = p.layout();
    let conv_back = |slot: &ConvSlot, input: &FeatureMap, g: &FeatureMap, grads: &mut [f64]| {
        let (wo, wl) = slot.weight;
        let (bo, bl) = slot.bias;
        let mut dw = vec![0.0; wl];
        let mut db = vec![0.0; bl];
        let dx = conv2d_backward(input, kernel(p, slot), 1, g, &mut dw, &mut db);
        grads[wo..wo + wl].iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        grads[bo..bo + bl].iter_mut().zip(&db).for_each(|(a, b)| *a += b);
        dx
    };
    let mut d_logits = d_out.clone();
    for (g, &o) in d_logits.data_mut().iter_mut().zip(c.out.data()) {
        *g *= o * (1.0 - o);
    }
    let mut d_act = conv_back(&l.head, &c.fusion_act, &d_logits, grads);
    for (g, &z) in d_act.data_mut().iter_mut().zip(c.fusion_pre.data()) {
        if z <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
    let d_cat = conv_back(&l.fusion, &c.cat, &d_act, grads);

    let d = p.config().decoder_channels();
    let (h, w) = (c.cat.height(), c.cat.width());
    let d_skip = d_cat.slice_channels(3 * d, d);
    let mut carry: Option<Vec<f64>> = None;
    for i in (0..3).rev() {
        let mut dz = d_cat.slice_channels(i * d, d).to_tokens();
        if let Some(c) = &carry {
            dz.iter_mut().zip(c).for_each(|(a, b)| *a += b);
        }
        carry = Some(swin_backward(p, &l.blocks[i], &c.blocks[i], &dz, grads));
    }
    let d_fused = FeatureMap::from_tokens(&carry.expect("three blocks"), d, h, w);
    (d_fused, d_skip)
}

fn check_decoder_inputs(p: &NetworkParams, fused: &FeatureMap, skip: &FeatureMap) -> Result<()> {
    let d = p.config().decoder_channels();
    if fused.channels() != d || !fused.same_shape(skip) {
        return Err(Error::dims(
            format!("{d}-channel fused and skip maps of equal size"),
            format!("{} and {}", fused.shape_string(), skip.shape_string()),
        ));
    }
    p.config().check_spatial(fused.height(), fused.width())
}

/// Three attention blocks (plain, shifted, plain), concatenation of their
/// outputs with the skip features, fusion convolution, RGB head and sigmoid.
pub fn decode(fused: &FeatureMap, skip: &FeatureMap, p: &NetworkParams) -> Result<HdrImage> {
    check_decoder_inputs(p, fused, skip)?;
    let (out, _) = decode_inner(p, fused, skip, false);
    HdrImage::from_planar(out.width(), out.height(), out.data())
}

fn check_pair(x1: &InputStack, x2: &InputStack, p: &NetworkParams) -> Result<()> {
    if (x1.width(), x1.height()) != (x2.width(), x2.height()) {
        return Err(Error::dims(
            format!("{}x{}", x1.width(), x1.height()),
            format!("{}x{}", x2.width(), x2.height()),
        ));
    }
    p.config().check_spatial(x1.height(), x1.width())
}

/// Activations kept by [`forward_train`].
pub struct ForwardCache {
    enc1: EncoderCache,
    enc2: EncoderCache,
    phi1: FeatureMap,
    phi2: FeatureMap,
    ccam: CcamCache,
    decoder: DecoderCache,
}

fn run(x1: &InputStack, x2: &InputStack, p: &NetworkParams, keep: bool) -> (FeatureMap, Option<ForwardCache>) {
    let (phi1, enc1) = encode(p, stack_to_map(x1), keep);
    let (phi2, enc2) = encode(p, stack_to_map(x2), keep);
    let (phi1c, ccam) = ccam_forward(p, &phi1, &phi2);
    let fused = FeatureMap::concat(&[&phi2, &phi1c]).expect("equal spatial dims");
    let (out, decoder) = decode_inner(p, &fused, &fused, keep);
    let cache = if keep {
        Some(ForwardCache {
            enc1: enc1.expect("kept"),
            enc2: enc2.expect("kept"),
            phi1,
            phi2,
            ccam,
            decoder: decoder.expect("kept"),
        })
    } else {
        None
    };
    (out, cache)
}

/// The network output as a `3 × H × W` map. `x2` is the reference.
pub fn forward_planar(x1: &InputStack, x2: &InputStack, p: &NetworkParams) -> Result<FeatureMap> {
    check_pair(x1, x2, p)?;
    Ok(run(x1, x2, p, false).0)
}

/// `H = M(X1, X2; θ)` with `x2` as the reference exposure.
pub fn forward(x1: &InputStack, x2: &InputStack, p: &NetworkParams) -> Result<HdrImage> {
    let out = forward_planar(x1, x2, p)?;
    HdrImage::from_planar(out.width(), out.height(), out.data())
}

pub fn forward_train(x1: &InputStack, x2: &InputStack, p: &NetworkParams) -> Result<(FeatureMap, ForwardCache)> {
    check_pair(x1, x2, p)?;
    let (out, cache) = run(x1, x2, p, true);
    Ok((out, cache.expect("kept")))
}

/// Gradient of a scalar with respect to every parameter, given its gradient
/// with respect to the network output.
pub fn backward(p: &NetworkParams, cache: &ForwardCache, d_out: &FeatureMap) -> Vec<f64> {
    let mut grads = vec![0.0; p.count()];
    let (d_fused, d_skip) = decode_backward(p, &cache.decoder, d_out, &mut grads);
    let c = p.config().feat_channels;
    let mut d_f = d_fused;
    d_f.data_mut().iter_mut().zip(d_skip.data()).for_each(|(a, b)| *a += b);
    let mut d_phi2 = d_f.slice_channels(0, c);
    let d_phi1c = d_f.slice_channels(c, c);
    let (d_phi1, d_phi2_ccam) = ccam_backward(p, &cache.phi1, &cache.phi2, &cache.ccam, &d_phi1c, &mut grads);
    d_phi2.data_mut().iter_mut().zip(d_phi2_ccam.data()).for_each(|(a, b)| *a += b);
    encode_backward(p, &cache.enc2, d_phi2, &mut grads);
    encode_backward(p, &cache.enc1, d_phi1, &mut grads);
    grads
}
