//! A small multi-stream MLP with late fusion and its training loop.
//!
//! Each modality has its own two-layer ReLU stream. The stream outputs are
//! concatenated and fed to the fused head, either linear or with one ReLU
//! hidden layer. Optional per-modality linear
//! heads serve the cross-modal losses. All parameters live in one flat
//! vector, so gradients, updates and serialization share one layout.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::features::{sample_index_subset, FeatureMatrix, LabeledFeatureSet, LogitMatrix, ModalitySet, RandomSource};
use crate::losses::{
    a2d_loss, combined_loss, cross_entropy, entropy_max_loss, focal_loss, lovasz_softmax, softmax, xmuda_loss,
    CombinedLossConfig, CrossModal, LossMode, LossParts, LossValue,
};
use crate::synth::{
    feature_mixing, feature_mixing_cyclic, feature_mixing_unimodal, mixup_synth, npmix_synth, vos_synth,
    MixingConfig, NpMixConfig, SynthesisResult,
};

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

/// Affine layer stored in the flat parameter vector: `n_in * n_out`
/// weights (row `k` holds input `k`'s outgoing weights), then `n_out` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    offset: usize,
    n_in: usize,
    n_out: usize,
}

impl Dense {
    fn len(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }

    fn w_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.n_in * self.n_out
    }

    fn b_range(&self) -> std::ops::Range<usize> {
        let s = self.offset + self.n_in * self.n_out;
        s..s + self.n_out
    }

    /// `x (n x n_in) -> x W + b`, optionally rectified.
    fn forward(&self, params: &[f64], x: &[f64], n: usize, relu: bool) -> Vec<f64> {
        let (w, b) = (&params[self.w_range()], &params[self.b_range()]);
        let mut out = vec![0.0; n * self.n_out];
        for (xi, oi) in x.chunks_exact(self.n_in).zip(out.chunks_exact_mut(self.n_out)) {
            oi.copy_from_slice(b);
            for (&xk, wk) in xi.iter().zip(w.chunks_exact(self.n_out)) {
                if xk != 0.0 {
                    for (o, &wv) in oi.iter_mut().zip(wk) {
                        *o += xk * wv;
                    }
                }
            }
            if relu {
                oi.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `want_input` is set.
    fn backward(&self, params: &[f64], x: &[f64], g: &[f64], grads: &mut [f64], want_input: bool) -> Option<Vec<f64>> {
        let (wr, br) = (self.w_range(), self.b_range());
        for (xi, gi) in x.chunks_exact(self.n_in).zip(g.chunks_exact(self.n_out)) {
            for (gb, &gv) in grads[br.clone()].iter_mut().zip(gi) {
                *gb += gv;
            }
            for (&xk, gw) in xi.iter().zip(grads[wr.clone()].chunks_exact_mut(self.n_out)) {
                if xk != 0.0 {
                    for (d, &gv) in gw.iter_mut().zip(gi) {
                        *d += xk * gv;
                    }
                }
            }
        }
        if !want_input {
            return None;
        }
        let w = &params[wr];
        let n = g.len() / self.n_out;
        let mut dx = vec![0.0; n * self.n_in];
        for (dxi, gi) in dx.chunks_exact_mut(self.n_in).zip(g.chunks_exact(self.n_out)) {
            for (d, wk) in dxi.iter_mut().zip(w.chunks_exact(self.n_out)) {
                *d = wk.iter().zip(gi).map(|(a, b)| a * b).sum();
            }
        }
        Some(dx)
    }
}

/// Network shape. `stream_hidden[m]` gives modality `m`'s two hidden widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input_widths: Vec<usize>,
    pub stream_hidden: Vec<[usize; 2]>,
    pub n_classes: usize,
    pub modal_heads: bool,
    /// Width of the fused head's hidden layer; 0 makes the head linear.
    #[serde(default)]
    pub head_hidden: usize,
    /// Standardize each stream's output per row (zero mean, unit variance).
    #[serde(default)]
    pub stream_norm: bool,
}

impl NetShape {
    /// Same hidden widths for every stream.
    pub fn uniform(input_widths: Vec<usize>, hidden: [usize; 2], n_classes: usize, modal_heads: bool) -> Self {
        let stream_hidden = vec![hidden; input_widths.len()];
        Self {
            input_widths,
            stream_hidden,
            n_classes,
            modal_heads,
            head_hidden: 0,
            stream_norm: false,
        }
    }

    pub fn with_head_hidden(mut self, width: usize) -> Self {
        self.head_hidden = width;
        self
    }

    pub fn with_stream_norm(mut self, on: bool) -> Self {
        self.stream_norm = on;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.input_widths.is_empty() || self.input_widths.len() != self.stream_hidden.len() {
            return arg_err("one hidden-width pair per input stream required");
        }
        if self.input_widths.contains(&0) || self.stream_hidden.iter().any(|h| h.contains(&0)) {
            return arg_err("layer widths must be positive");
        }
        if self.n_classes < 2 {
            return arg_err("need at least 2 classes");
        }
        if self.modal_heads && self.input_widths.len() != 2 {
            return arg_err("per-modality heads require exactly 2 streams");
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TwoStreamNet {
    shape: NetShape,
    streams: Vec<[Dense; 2]>,
    head: Vec<Dense>,
    modal: Vec<Dense>,
    params: Vec<f64>,
    id: u64,
    version: u64,
}

impl Clone for TwoStreamNet {
    fn clone(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            streams: self.streams.clone(),
            head: self.head.clone(),
            modal: self.modal.clone(),
            params: self.params.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl PartialEq for TwoStreamNet {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.params == other.params
    }
}

/// Everything a backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    net_id: u64,
    version: u64,
    n_rows: usize,
    inputs: Vec<Vec<f64>>,
    hidden1: Vec<Vec<f64>>,
    hidden2: Vec<Vec<f64>>,
    inv_std: Vec<Vec<f64>>,
    fused_input: Vec<f64>,
    head_hidden: Option<Vec<f64>>,
}

const NORM_EPS: f64 = 1e-5;

/// Per-row standardization; returns the normalized rows and `1 / std`.
fn normalize_rows(a: &[f64], w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = Vec::with_capacity(a.len());
    let mut inv = Vec::with_capacity(a.len() / w);
    for row in a.chunks_exact(w) {
        let mean = row.iter().sum::<f64>() / w as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
        let r = 1.0 / (var + NORM_EPS).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * r));
        inv.push(r);
    }
    (out, inv)
}

/// Backward of [`normalize_rows`] given its output `y`.
fn normalize_rows_backward(g: &[f64], y: &[f64], inv: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.len());
    for ((gr, yr), &r) in g.chunks_exact(w).zip(y.chunks_exact(w)).zip(inv) {
        let gm = gr.iter().sum::<f64>() / w as f64;
        let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
        out.extend(gr.iter().zip(yr).map(|(gv, yv)| r * (gv - gm - yv * gy)));
    }
    out
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Penultimate (second hidden layer) activations, one block per stream.
    pub stream_feats: ModalitySet,
    pub fused_logits: LogitMatrix,
    pub modal_logits: Option<(LogitMatrix, LogitMatrix)>,
    pub cache: ForwardCache,
}

/// Upstream gradients for [`TwoStreamNet::backward`]. Any part may be absent.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub fused: Option<LogitMatrix>,
    pub modal: Option<(LogitMatrix, LogitMatrix)>,
    /// Extra gradient on the stream features, e.g. routed back from
    /// synthesized outliers.
    pub stream_feats: Option<ModalitySet>,
}

impl TwoStreamNet {
    /// He-initialized network.
    pub fn new(shape: NetShape, rng: &mut RandomSource) -> Result<Self> {
        let mut net = Self::zeroed(shape)?;
        let layers: Vec<(Dense, bool)> = net
            .streams
            .iter()
            .flat_map(|s| s.iter().map(|&d| (d, true)))
            .chain(net.head.iter().enumerate().map(|(i, &d)| (d, i + 1 < net.head.len())))
            .chain(net.modal.iter().map(|&d| (d, false)))
            .collect();
        for (d, relu) in layers {
            let std = if relu { (2.0 / d.n_in as f64).sqrt() } else { (1.0 / d.n_in as f64).sqrt() };
            for w in &mut net.params[d.w_range()] {
                *w = std * rng.standard_normal();
            }
        }
        Ok(net)
    }

    /// All parameters zero.
    pub fn zeroed(shape: NetShape) -> Result<Self> {
        shape.validate()?;
        let mut offset = 0;
        let mut layer = |n_in, n_out| {
            let d = Dense { offset, n_in, n_out };
            offset += d.len();
            d
        };
        let streams: Vec<[Dense; 2]> = shape
            .input_widths
            .iter()
            .zip(&shape.stream_hidden)
            .map(|(&w, h)| [layer(w, h[0]), layer(h[0], h[1])])
            .collect();
        let fused_width: usize = shape.stream_hidden.iter().map(|h| h[1]).sum();
        let head = if shape.head_hidden > 0 {
            vec![layer(fused_width, shape.head_hidden), layer(shape.head_hidden, shape.n_classes)]
        } else {
            vec![layer(fused_width, shape.n_classes)]
        };
        let modal = if shape.modal_heads {
            shape.stream_hidden.iter().map(|h| layer(h[1], shape.n_classes)).collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            shape,
            streams,
            head,
            modal,
            params: vec![0.0; offset],
            id: fresh_id(),
            version: 0,
        })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn n_classes(&self) -> usize {
        self.shape.n_classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Scales the weights (not the biases) of the fused head's output layer.
    pub fn scale_head_weights(&mut self, factor: f64) {
        let r = self.head[self.head.len() - 1].w_range();
        self.params_mut()[r].iter_mut().for_each(|w| *w *= factor);
    }

    fn check_input(&self, ms: &ModalitySet) -> Result<()> {
        let found = ms.widths();
        if found != self.shape.input_widths {
            return arg_err(format!(
                "input widths {:?} do not match the network's {:?}",
                found, self.shape.input_widths
            ));
        }
        Ok(())
    }

    pub fn forward(&self, ms: &ModalitySet) -> Result<ForwardOutput> {
        self.check_input(ms)?;
        let n = ms.n_rows();
        let mut inputs = Vec::new();
        let mut hidden1 = Vec::new();
        let mut hidden2 = Vec::new();
        let mut inv_std = Vec::new();
        let mut feats = Vec::new();
        for (s, block) in self.streams.iter().zip(ms.blocks()) {
            let x = block.as_slice().to_vec();
            let a1 = s[0].forward(&self.params, &x, n, true);
            let a2 = s[1].forward(&self.params, &a1, n, true);
            let f = if self.shape.stream_norm {
                let (f, inv) = normalize_rows(&a2, s[1].n_out);
                inv_std.push(inv);
                f
            } else {
                a2.clone()
            };
            inputs.push(x);
            hidden1.push(a1);
            hidden2.push(a2);
            feats.push(FeatureMatrix::from_vec_unchecked(n, s[1].n_out, f));
        }
        let stream_feats = ModalitySet::new(feats, ms.names().to_vec())?;
        let fused_input = stream_feats.concat().into_vec();
        let (head_hidden, fused_logits) = self.head_apply(&fused_input, n);
        let modal_logits = if self.modal.is_empty() {
            None
        } else {
            Some((
                self.linear(self.modal[0], stream_feats.block(0).as_slice(), n),
                self.linear(self.modal[1], stream_feats.block(1).as_slice(), n),
            ))
        };
        Ok(ForwardOutput {
            stream_feats,
            fused_logits,
            modal_logits,
            cache: ForwardCache {
                net_id: self.id,
                version: self.version,
                n_rows: n,
                inputs,
                hidden1,
                hidden2,
                inv_std,
                fused_input,
                head_hidden,
            },
        })
    }

    fn head_apply(&self, x: &[f64], n: usize) -> (Option<Vec<f64>>, LogitMatrix) {
        match self.head.as_slice() {
            [out] => (None, self.linear(*out, x, n)),
            [hid, out] => {
                let h = hid.forward(&self.params, x, n, true);
                let logits = self.linear(*out, &h, n);
                (Some(h), logits)
            }
            _ => unreachable!("head has one or two layers"),
        }
    }

    fn head_grad(&self, x: &[f64], hidden: Option<&[f64]>, g: &[f64], grads: &mut [f64]) -> Vec<f64> {
        match (self.head.as_slice(), hidden) {
            ([out], None) => out.backward(&self.params, x, g, grads, true).unwrap(),
            ([hid, out], Some(h)) => {
                let mut gh = out.backward(&self.params, h, g, grads, true).unwrap();
                gh.iter_mut().zip(h).for_each(|(v, &a)| {
                    if a <= 0.0 {
                        *v = 0.0;
                    }
                });
                hid.backward(&self.params, x, &gh, grads, true).unwrap()
            }
            _ => unreachable!("head activations match the head depth"),
        }
    }

    fn linear(&self, d: Dense, x: &[f64], n: usize) -> LogitMatrix {
        FeatureMatrix::from_vec_unchecked(n, d.n_out, d.forward(&self.params, x, n, false))
    }

    /// Fused logits only.
    pub fn predict(&self, ms: &ModalitySet) -> Result<LogitMatrix> {
        Ok(self.forward(ms)?.fused_logits)
    }

    fn check_feats(&self, feats: &ModalitySet) -> Result<()> {
        let expect: Vec<usize> = self.shape.stream_hidden.iter().map(|h| h[1]).collect();
        if feats.widths() != expect {
            return dim_err(format!("stream features {:?}, head expects {:?}", feats.widths(), expect));
        }
        Ok(())
    }

    /// Applies the fused head to stream-level features.
    pub fn head_forward(&self, feats: &ModalitySet) -> Result<LogitMatrix> {
        self.check_feats(feats)?;
        Ok(self.head_apply(feats.concat().as_slice(), feats.n_rows()).1)
    }

    /// Backward through the fused head alone: accumulates head gradients
    /// into `grads` and returns the gradient on `feats`.
    pub fn head_backward(&self, feats: &ModalitySet, grad_logits: &LogitMatrix, grads: &mut [f64]) -> Result<ModalitySet> {
        self.check_feats(feats)?;
        if grad_logits.n_rows() != feats.n_rows() || grad_logits.n_cols() != self.shape.n_classes {
            return dim_err("head gradient shape mismatch");
        }
        let x = feats.concat();
        let (hidden, _) = self.head_apply(x.as_slice(), feats.n_rows());
        let dx = self.head_grad(x.as_slice(), hidden.as_deref(), grad_logits.as_slice(), grads);
        let dx = FeatureMatrix::from_vec_unchecked(feats.n_rows(), feats.total_width(), dx);
        ModalitySet::split(&dx, &feats.widths(), feats.names().to_vec())
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    /// Accumulates parameter gradients for the given upstream gradients.
    pub fn backward_into(&self, cache: &ForwardCache, up: &OutputGrads, grads: &mut [f64]) -> Result<()> {
        if cache.net_id != self.id || cache.version != self.version {
            return Err(Error::StaleCache(format!(
                "cache from net {} version {}, differentiating net {} version {}",
                cache.net_id, cache.version, self.id, self.version
            )));
        }
        if grads.len() != self.params.len() {
            return dim_err("gradient buffer length mismatch");
        }
        let n = cache.n_rows;
        let c = self.shape.n_classes;
        let check = |g: &LogitMatrix| -> Result<()> {
            if g.n_rows() != n || g.n_cols() != c {
                return dim_err(format!("logit gradient is {}x{}, expected {n}x{c}", g.n_rows(), g.n_cols()));
            }
            Ok(())
        };
        let widths: Vec<usize> = self.streams.iter().map(|s| s[1].n_out).collect();
        let mut d_feats: Vec<Vec<f64>> = widths.iter().map(|&w| vec![0.0; n * w]).collect();

        if let Some(g) = &up.fused {
            check(g)?;
            let dx = self.head_grad(&cache.fused_input, cache.head_hidden.as_deref(), g.as_slice(), grads);
            let total: usize = widths.iter().sum();
            for i in 0..n {
                let mut start = i * total;
                for (m, &w) in widths.iter().enumerate() {
                    for (d, &v) in d_feats[m][i * w..(i + 1) * w].iter_mut().zip(&dx[start..start + w]) {
                        *d += v;
                    }
                    start += w;
                }
            }
        }
        if let Some((gc, gl)) = &up.modal {
            if self.modal.is_empty() {
                return arg_err("network has no per-modality heads");
            }
            for (m, g) in [gc, gl].into_iter().enumerate() {
                check(g)?;
                let x = self.stream_feats_slice(cache, m);
                let dx = self.modal[m].backward(&self.params, &x, g.as_slice(), grads, true).unwrap();
                d_feats[m].iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
            }
        }
        if let Some(extra) = &up.stream_feats {
            if extra.widths() != widths || extra.n_rows() != n {
                return dim_err("stream feature gradient shape mismatch");
            }
            for (m, b) in extra.blocks().iter().enumerate() {
                d_feats[m].iter_mut().zip(b.as_slice()).for_each(|(a, b)| *a += b);
            }
        }

        for (m, s) in self.streams.iter().enumerate() {
            let mut g2 = std::mem::take(&mut d_feats[m]);
            if self.shape.stream_norm {
                let f = self.stream_feats_slice(cache, m);
                g2 = normalize_rows_backward(&g2, &f, &cache.inv_std[m], s[1].n_out);
            }
            g2.iter_mut().zip(&cache.hidden2[m]).for_each(|(g, &a)| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            let mut g1 = s[1].backward(&self.params, &cache.hidden1[m], &g2, grads, true).unwrap();
            g1.iter_mut().zip(&cache.hidden1[m]).for_each(|(g, &a)| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            s[0].backward(&self.params, &cache.inputs[m], &g1, grads, false);
        }
        Ok(())
    }

    /// Parameter gradients for the given upstream gradients.
    pub fn backward(&self, cache: &ForwardCache, up: &OutputGrads) -> Result<Vec<f64>> {
        let mut grads = self.zero_grads();
        self.backward_into(cache, up, &mut grads)?;
        Ok(grads)
    }

    fn stream_feats_slice(&self, cache: &ForwardCache, m: usize) -> Vec<f64> {
        let widths: Vec<usize> = self.streams.iter().map(|s| s[1].n_out).collect();
        let total: usize = widths.iter().sum();
        let start: usize = widths[..m].iter().sum();
        let w = widths[m];
        let mut out = Vec::with_capacity(cache.n_rows * w);
        for i in 0..cache.n_rows {
            out.extend_from_slice(&cache.fused_input[i * total + start..i * total + start + w]);
        }
        out
    }

    /// `params -= step * grads`.
    pub fn sgd_step(&mut self, grads: &[f64], step: f64) {
        for (p, g) in self.params_mut().iter_mut().zip(grads) {
            *p -= step * g;
        }
    }
}

const MODEL_MAGIC: &[u8; 8] = b"FMIXNET\0";
const MODEL_VERSION: u32 = 1;

fn model_fmt(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "model file",
        reason: reason.into(),
    }
}

impl TwoStreamNet {
    /// Layout in `docs/formats.md`: magic, version, stream count, class
    /// count, flag byte (bit 0 modality heads, bit 1 stream normalization),
    /// fused-head hidden width, per-stream
    /// widths, parameter count, parameters.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(self.shape.input_widths.len() as u32).to_le_bytes())?;
        w.write_all(&(self.shape.n_classes as u64).to_le_bytes())?;
        w.write_all(&[self.shape.modal_heads as u8 | (self.shape.stream_norm as u8) << 1])?;
        w.write_all(&(self.shape.head_hidden as u64).to_le_bytes())?;
        for (&iw, h) in self.shape.input_widths.iter().zip(&self.shape.stream_hidden) {
            for v in [iw, h[0], h[1]] {
                w.write_all(&(v as u64).to_le_bytes())?;
            }
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
            let mut b = [0u8; N];
            r.read_exact(&mut b).map_err(|_| model_fmt("truncated"))?;
            Ok(b)
        }
        let u64_at = |r: &mut dyn FnMut() -> Result<[u8; 8]>| -> Result<usize> { Ok(u64::from_le_bytes(r()?) as usize) };
        if &take::<8>(r)? != MODEL_MAGIC {
            return Err(model_fmt("bad magic"));
        }
        let version = u32::from_le_bytes(take(r)?);
        if version != MODEL_VERSION {
            return Err(model_fmt(format!("unsupported version {version}")));
        }
        let n_streams = u32::from_le_bytes(take(r)?) as usize;
        let mut next = || take::<8>(r);
        let n_classes = u64_at(&mut next)?;
        let [flag] = take::<1>(r)?;
        let head_hidden = u64::from_le_bytes(take(r)?) as usize;
        let mut input_widths = Vec::new();
        let mut stream_hidden = Vec::new();
        for _ in 0..n_streams {
            let mut next = || take::<8>(r);
            input_widths.push(u64_at(&mut next)?);
            let h = [u64_at(&mut next)?, u64_at(&mut next)?];
            stream_hidden.push(h);
        }
        let shape = NetShape {
            input_widths,
            stream_hidden,
            n_classes,
            modal_heads: flag & 1 != 0,
            head_hidden,
            stream_norm: flag & 2 != 0,
        };
        let mut net = Self::zeroed(shape).map_err(|e| model_fmt(e.to_string()))?;
        let n_params = u64::from_le_bytes(take(r)?) as usize;
        if n_params != net.params.len() {
            return Err(model_fmt(format!("{n_params} parameters, shape needs {}", net.params.len())));
        }
        for p in net.params.iter_mut() {
            *p = f64::from_le_bytes(take(r)?);
        }
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(model_fmt("trailing bytes"));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMethod {
    None,
    #[default]
    FeatureMixing,
    Mixup,
    Vos,
    Npmix,
}

impl SynthMethod {
    pub const ALL: [SynthMethod; 5] = [
        SynthMethod::None,
        SynthMethod::FeatureMixing,
        SynthMethod::Mixup,
        SynthMethod::Vos,
        SynthMethod::Npmix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthMethod::None => "none",
            SynthMethod::FeatureMixing => "feature_mixing",
            SynthMethod::Mixup => "mixup",
            SynthMethod::Vos => "vos",
            SynthMethod::Npmix => "npmix",
        }
    }
}

impl std::str::FromStr for SynthMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SynthMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown synthesis method '{s}'")))
    }
}

/// Where outliers are synthesized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthSpace {
    /// Penultimate stream features; outliers pass through the fused head.
    #[default]
    Features,
    /// Network inputs; outliers pass through the whole network.
    Inputs,
}

/// VOS-style sampler settings used during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VosTrainConfig {
    /// Candidates drawn per class per step.
    pub n_candidates: usize,
    pub keep_fraction: f64,
    /// Recent detached features kept per class for moment estimation.
    pub bank_per_class: usize,
}

impl Default for VosTrainConfig {
    fn default() -> Self {
        Self {
            n_candidates: 200,
            keep_fraction: 0.1,
            bank_per_class: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Leading steps trained on the ID objective alone.
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub step_size: f64,
    /// L2 penalty `weight_decay / 2 * |theta|^2` on every parameter.
    pub weight_decay: f64,
    pub hidden: [usize; 2],
    /// Fused-head hidden width; 0 for a linear head.
    pub head_hidden: usize,
    /// Per-row standardization of stream outputs.
    pub stream_norm: bool,
    pub synth_method: SynthMethod,
    pub synth_space: SynthSpace,
    pub mixing: MixingConfig,
    pub mixup_alpha: f64,
    pub npmix: NpMixConfig,
    pub vos: VosTrainConfig,
    pub loss: CombinedLossConfig,
    /// Route the outlier-branch gradient through the synthesis back into
    /// the streams. When false only the fused head learns from outliers.
    pub outlier_grad_to_streams: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            warmup_steps: 500,
            batch_size: 128,
            step_size: 0.05,
            weight_decay: 0.0,
            hidden: [64, 32],
            head_hidden: 64,
            stream_norm: true,
            synth_method: SynthMethod::FeatureMixing,
            synth_space: SynthSpace::Features,
            mixing: MixingConfig::new(8),
            mixup_alpha: 1.0,
            npmix: NpMixConfig::default(),
            vos: VosTrainConfig::default(),
            loss: CombinedLossConfig::default(),
            outlier_grad_to_streams: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Plain classifier training: no synthesis, no entropy term.
    pub fn baseline(&self) -> Self {
        let mut cfg = self.clone();
        cfg.synth_method = SynthMethod::None;
        cfg.loss.gamma1 = 0.0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return arg_err("steps must be >= 1");
        }
        if self.batch_size == 0 {
            return arg_err("batch_size must be >= 1");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return arg_err("step_size must be > 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return arg_err("weight_decay must be finite and >= 0");
        }
        self.loss.validate()
    }

    fn outlier_branch(&self) -> bool {
        self.synth_method != SynthMethod::None && self.loss.gamma1 > 0.0
    }
}

/// Loss components of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_ent: f64,
    pub loss_xmodal: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<StepLosses>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "step,loss_total,loss_cls,loss_ent,loss_xmodal";

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.step, r.loss_total, r.loss_cls, r.loss_ent, r.loss_xmodal)?;
        }
        Ok(())
    }
}

/// Per-class FIFO of detached stream features for the VOS-style sampler.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    capacity: usize,
    per_class: Vec<VecDeque<Vec<f64>>>,
    widths: Vec<usize>,
}

impl FeatureBank {
    pub fn new(n_classes: usize, widths: Vec<usize>, capacity: usize) -> Self {
        Self {
            capacity,
            per_class: vec![VecDeque::new(); n_classes],
            widths,
        }
    }

    pub fn push(&mut self, feats: &ModalitySet, labels: &[usize]) {
        let fm = feats.concat();
        for (row, &y) in fm.rows().zip(labels) {
            let q = &mut self.per_class[y];
            if q.len() == self.capacity {
                q.pop_front();
            }
            q.push_back(row.to_vec());
        }
    }

    /// The bank as a labeled set, when every class has at least `min_rows`.
    fn snapshot(&self, min_rows: usize) -> Result<Option<LabeledFeatureSet>> {
        if self.per_class.iter().any(|q| q.len() < min_rows) {
            return Ok(None);
        }
        let total: usize = self.widths.iter().sum();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (c, q) in self.per_class.iter().enumerate() {
            for row in q {
                data.extend_from_slice(row);
                labels.push(c);
            }
        }
        let n = labels.len();
        let fm = FeatureMatrix::from_vec_unchecked(n, total, data);
        let names = (0..self.widths.len()).map(|m| format!("m{m}")).collect();
        let ms = ModalitySet::split(&fm, &self.widths, names)?;
        Ok(Some(LabeledFeatureSet::new(ms, labels, vec![false; n], self.per_class.len())?))
    }
}

/// Feature Mixing dispatched on the number of streams: pairwise for two,
/// cyclic for three or more, split halves for one.
pub fn mix_streams(feats: &ModalitySet, cfg: &MixingConfig, rng: &mut RandomSource) -> Result<SynthesisResult> {
    match feats.n_blocks() {
        1 => feature_mixing_unimodal(feats.block(0), cfg, rng),
        2 => feature_mixing(feats, cfg, rng),
        _ => feature_mixing_cyclic(feats, cfg, rng),
    }
}

fn synthesize(
    cfg: &TrainConfig,
    feats: &ModalitySet,
    labels: &[usize],
    n_classes: usize,
    bank: &mut FeatureBank,
    rng: &mut RandomSource,
) -> Result<Option<SynthesisResult>> {
    Ok(match cfg.synth_method {
        SynthMethod::None => None,
        SynthMethod::FeatureMixing => Some(mix_streams(feats, &cfg.mixing, rng)?),
        SynthMethod::Mixup => Some(mixup_synth(feats, cfg.mixup_alpha, rng)?),
        SynthMethod::Npmix => {
            let lfs = LabeledFeatureSet::new(feats.clone(), labels.to_vec(), vec![false; labels.len()], n_classes)?;
            let present = (0..n_classes).filter(|c| labels.contains(c)).count();
            if present < 2 {
                None
            } else {
                Some(npmix_synth(&lfs, cfg.npmix.k_neighbors, cfg.npmix.beta_range, rng)?)
            }
        }
        SynthMethod::Vos => {
            bank.push(feats, labels);
            match bank.snapshot(feats.total_width() + 2)? {
                Some(lfs) => Some(vos_synth(&lfs, cfg.vos.n_candidates, cfg.vos.keep_fraction, rng)?),
                None => None,
            }
        }
    })
}

/// Loss and parameter gradients of one step on one batch.
///
/// `synth_rng` drives the outlier synthesis; passing clones of the same
/// generator reproduces the same outliers, which is what finite-difference
/// checks rely on.
pub fn step_loss_and_grad(
    net: &TwoStreamNet,
    batch: &ModalitySet,
    labels: &[usize],
    cfg: &TrainConfig,
    bank: &mut FeatureBank,
    synth_rng: &mut RandomSource,
) -> Result<(StepLosses, Vec<f64>)> {
    let c = net.n_classes();
    let fwd = net.forward(batch)?;
    let mut parts = LossParts::default();
    match cfg.loss.mode {
        LossMode::Detection => parts.cls = Some(cross_entropy(&fwd.fused_logits, labels)?),
        LossMode::Segmentation => {
            parts.focal = Some(focal_loss(&fwd.fused_logits, labels, None, cfg.loss.focal_lambda)?);
            parts.lovasz = Some(lovasz_softmax(&softmax(&fwd.fused_logits), labels)?);
        }
    }

    let mut outliers = None;
    let mut input_outliers = None;
    if cfg.outlier_branch() {
        match cfg.synth_space {
            SynthSpace::Features => {
                if let Some(res) = synthesize(cfg, &fwd.stream_feats, labels, c, bank, synth_rng)? {
                    let logits = net.head_forward(&res.outliers)?;
                    parts.entropy = Some(entropy_max_loss(&logits));
                    outliers = Some(res);
                }
            }
            SynthSpace::Inputs => {
                if let Some(res) = synthesize(cfg, batch, labels, c, bank, synth_rng)? {
                    let out = net.forward(&res.outliers)?;
                    parts.entropy = Some(entropy_max_loss(&out.fused_logits));
                    input_outliers = Some(out.cache);
                }
            }
        }
    }

    let mut modal_ce: Option<(LossValue, LossValue)> = None;
    if cfg.loss.cross_modal != CrossModal::None {
        let (lc, ll) = fwd
            .modal_logits
            .as_ref()
            .ok_or_else(|| Error::Argument("cross-modal loss needs per-modality heads".into()))?;
        let (pc, pl) = (softmax(lc), softmax(ll));
        let x = match cfg.loss.cross_modal {
            CrossModal::A2d => a2d_loss(&pc, &pl, labels, cfg.loss.distance)?,
            _ => xmuda_loss(&pc, &pl, &softmax(&fwd.fused_logits))?,
        };
        parts.cross_modal = Some(x);
        modal_ce = Some((cross_entropy(lc, labels)?, cross_entropy(ll, labels)?));
    }

    let mut loss_cfg = cfg.loss;
    if parts.entropy.is_none() {
        loss_cfg.gamma1 = 0.0;
    }
    let total = combined_loss(&parts, &loss_cfg)?;
    let mut grads = net.zero_grads();
    let mut grad_fused = total.grad_id.clone();
    if let Some(g) = &total.grad_fused_xmodal {
        grad_fused.add_scaled_in_place(g, 1.0);
    }
    let mut up = OutputGrads {
        fused: Some(grad_fused),
        modal: total.grad_modal.clone(),
        stream_feats: None,
    };
    let mut cls = total.cls_value;
    if let Some((ec, el)) = &modal_ce {
        cls += ec.value + el.value;
        let (gc, gl) = up.modal.get_or_insert_with(|| {
            let z = FeatureMatrix::zeros(labels.len(), c);
            (z.clone(), z)
        });
        gc.add_scaled_in_place(&ec.grad_logits, 1.0);
        gl.add_scaled_in_place(&el.grad_logits, 1.0);
    }
    if let (Some(res), Some(g)) = (&outliers, &total.grad_outlier) {
        let g_feats = net.head_backward(&res.outliers, g, &mut grads)?;
        if cfg.outlier_grad_to_streams {
            up.stream_feats = res.backprop(&g_feats, batch.n_rows())?;
        }
    }
    if let (Some(cache), Some(g)) = (&input_outliers, &total.grad_outlier) {
        let up_o = OutputGrads {
            fused: Some(g.clone()),
            ..Default::default()
        };
        net.backward_into(cache, &up_o, &mut grads)?;
    }
    net.backward_into(&fwd.cache, &up, &mut grads)?;
    let mut decay = 0.0;
    if cfg.weight_decay > 0.0 {
        for (g, &p) in grads.iter_mut().zip(net.params()) {
            *g += cfg.weight_decay * p;
            decay += 0.5 * cfg.weight_decay * p * p;
        }
    }
    let losses = StepLosses {
        step: 0,
        loss_total: total.value - total.cls_value + cls + decay,
        loss_cls: cls,
        loss_ent: total.ent_value,
        loss_xmodal: total.xmodal_value,
    };
    Ok((losses, grads))
}

/// Trains a fresh network on ID rows. Bit-reproducible for a fixed config.
pub fn train(data: &LabeledFeatureSet, cfg: &TrainConfig) -> Result<(TwoStreamNet, TrainLog)> {
    cfg.validate()?;
    if data.has_ood() {
        return arg_err("training data contains OOD rows");
    }
    let widths = data.features().widths();
    let shape = NetShape::uniform(
        widths.clone(),
        cfg.hidden,
        data.n_classes(),
        cfg.loss.cross_modal != CrossModal::None,
    )
    .with_head_hidden(cfg.head_hidden)
    .with_stream_norm(cfg.stream_norm);
    let root = RandomSource::new(cfg.seed);
    let mut net = TwoStreamNet::new(shape, &mut root.child("init"))?;
    let mut batch_rng = root.child("batch");
    let mut synth_rng = root.child("synth");
    let mut bank = FeatureBank::new(
        data.n_classes(),
        match cfg.synth_space {
            SynthSpace::Features => vec![cfg.hidden[1]; widths.len()],
            SynthSpace::Inputs => widths.clone(),
        },
        cfg.vos.bank_per_class,
    );
    let batch_size = cfg.batch_size.min(data.n_rows());
    let warm_cfg = cfg.baseline();
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let step_cfg = if step < cfg.warmup_steps { &warm_cfg } else { cfg };
        let idx = sample_index_subset(&mut batch_rng, data.n_rows(), batch_size)?;
        let batch = data.select_rows(&idx)?;
        let (mut losses, grads) =
            step_loss_and_grad(&net, batch.features(), batch.labels(), step_cfg, &mut bank, &mut synth_rng)?;
        losses.step = step;
        if !losses.loss_total.is_finite() {
            return Err(Error::Argument(format!("training diverged at step {step}")));
        }
        net.sgd_step(&grads, cfg.step_size);
        log.rows.push(losses);
    }
    Ok((net, log))
}
