//! A small U-Net: reflect-padded 3x3 convolutions, instance normalization,
//! max-pool downsampling, transposed-convolution upsampling with skip
//! concatenation, and a 1x1 classification head. Forward and backward are
//! hand-written; the same code runs in `f32` and `f64`.

pub mod layers;
pub mod tensor;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use layers::*;
pub use tensor::{Real, Tensor4};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("input has {found} channels, network expects {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("input size {h}x{w} not divisible by {divisor}")]
    Divisibility { h: usize, w: usize, divisor: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint architecture {found:?} does not match expected {expected:?}")]
    ArchitectureMismatch { expected: NetConfig, found: NetConfig },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upsampling {
    TransposedConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Reflection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Instance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub base_filters: usize,
    pub upsampling: Upsampling,
    pub padding: Padding,
    pub normalization: Normalization,
    pub norm_epsilon: f64,
}

impl Default for NetConfig {
    /// The full-size network: 2 inputs (DTM, CHM), 4 classes, depth 5, 16 base filters.
    fn default() -> Self {
        NetConfig {
            in_channels: 2,
            out_channels: 4,
            depth: 5,
            base_filters: 16,
            upsampling: Upsampling::TransposedConv,
            padding: Padding::Reflection,
            normalization: Normalization::Instance,
            norm_epsilon: 1e-5,
        }
    }
}

impl NetConfig {
    /// Desk-scale variant used for laptop runs.
    pub fn desk() -> Self {
        NetConfig { depth: 3, base_filters: 8, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(NetError::Config(format!("depth {} < 2", self.depth)));
        }
        if self.base_filters == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(NetError::Config("channel counts must be >= 1".into()));
        }
        if !(self.norm_epsilon > 0.0) {
            return Err(NetError::Config("norm_epsilon must be > 0".into()));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let block = |prefix: String, cin: usize, f: usize, out: &mut Vec<(String, Vec<usize>)>| {
            out.push((format!("{prefix}.conv1.weight"), vec![f, cin, 3, 3]));
            out.push((format!("{prefix}.conv1.bias"), vec![f]));
            out.push((format!("{prefix}.norm1.scale"), vec![f]));
            out.push((format!("{prefix}.norm1.shift"), vec![f]));
            out.push((format!("{prefix}.conv2.weight"), vec![f, f, 3, 3]));
            out.push((format!("{prefix}.conv2.bias"), vec![f]));
            out.push((format!("{prefix}.norm2.scale"), vec![f]));
            out.push((format!("{prefix}.norm2.shift"), vec![f]));
        };
        for l in 0..self.depth {
            let cin = if l == 0 { self.in_channels } else { self.filters(l - 1) };
            block(format!("enc{l}"), cin, self.filters(l), &mut out);
        }
        for l in (0..self.depth - 1).rev() {
            let f = self.filters(l);
            out.push((format!("up{l}.weight"), vec![self.filters(l + 1), f, 2, 2]));
            out.push((format!("up{l}.bias"), vec![f]));
            block(format!("dec{l}"), 2 * f, f, &mut out);
        }
        out.push(("head.weight".into(), vec![self.out_channels, self.filters(0)]));
        out.push(("head.bias".into(), vec![self.out_channels]));
        out
    }

    fn enc_index(&self, level: usize) -> usize {
        8 * level
    }

    fn up_index(&self, level: usize) -> usize {
        8 * self.depth + 10 * (self.depth - 2 - level)
    }

    fn head_index(&self) -> usize {
        8 * self.depth + 10 * (self.depth - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered parameter tensors (or gradients of the same shapes).
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T> {
    pub tensors: Vec<NamedTensor<T>>,
}

impl<T: Real> NetParams<T> {
    pub fn zeros_like(cfg: &NetConfig) -> Self {
        NetParams {
            tensors: cfg
                .layout()
                .into_iter()
                .map(|(name, dims)| {
                    let n = dims.iter().product();
                    NamedTensor { name, dims, data: vec![T::zero(); n] }
                })
                .collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn cast<U: Real>(&self) -> NetParams<U> {
        NetParams {
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    dims: t.dims.clone(),
                    data: t.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn scale(&mut self, k: T) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = *v * k;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    fn check_layout(&self, cfg: &NetConfig) -> Result<()> {
        let layout = cfg.layout();
        if layout.len() != self.tensors.len() {
            return Err(NetError::Shape(format!("{} tensors, layout has {}", self.tensors.len(), layout.len())));
        }
        for ((name, dims), t) in layout.iter().zip(&self.tensors) {
            if *name != t.name || *dims != t.dims || t.data.len() != dims.iter().product::<usize>() {
                return Err(NetError::Shape(format!("tensor {} {:?} vs layout {name} {dims:?}", t.name, t.dims)));
            }
        }
        Ok(())
    }

    fn d(&self, i: usize) -> &[T] {
        &self.tensors[i].data
    }
}

/// Deterministic initialization: convolution weights uniform in
/// `±sqrt(6 / fan_in)`, biases and shifts 0, norm scales 1.
pub fn init_model<T: Real>(cfg: &NetConfig, seed: u64) -> Result<NetParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetParams::zeros_like(cfg);
    for t in &mut params.tensors {
        if t.name.ends_with(".scale") {
            t.data.fill(T::one());
        } else if t.name.ends_with("weight") {
            let fan_in = if t.name.starts_with("up") { t.dims[0] } else { t.dims[1..].iter().product() };
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in &mut t.data {
                *v = T::from_f64(rng.gen_range(-bound..bound));
            }
        }
    }
    Ok(params)
}

struct BlockTape<T> {
    conv1: ConvCache<T>,
    norm1: NormCache<T>,
    act1: Tensor4<T>,
    conv2: ConvCache<T>,
    norm2: NormCache<T>,
    out: Tensor4<T>,
}

/// Activations retained by `forward` for `backward`.
pub struct Tape<T> {
    cfg: NetConfig,
    enc: Vec<BlockTape<T>>,
    pools: Vec<Vec<u32>>,
    up_inputs: Vec<Tensor4<T>>,
    dec: Vec<BlockTape<T>>,
    head_input: Tensor4<T>,
}

fn block_forward<T: Real>(x: &Tensor4<T>, p: &NetParams<T>, i: usize, eps: f64) -> BlockTape<T> {
    let (z1, conv1) = conv3x3_forward(x, p.d(i), p.d(i + 1));
    let (n1, norm1) = instance_norm_forward(&z1, p.d(i + 2), p.d(i + 3), eps);
    let act1 = relu_forward(&n1);
    let (z2, conv2) = conv3x3_forward(&act1, p.d(i + 4), p.d(i + 5));
    let (n2, norm2) = instance_norm_forward(&z2, p.d(i + 6), p.d(i + 7), eps);
    let out = relu_forward(&n2);
    BlockTape { conv1, norm1, act1, conv2, norm2, out }
}

fn block_backward<T: Real>(t: &BlockTape<T>, p: &NetParams<T>, g: &mut NetParams<T>, i: usize, dout: &Tensor4<T>) -> Tensor4<T> {
    let dn2 = relu_backward(&t.out, dout);
    let (dz2, ds2, dt2) = instance_norm_backward(&t.norm2, p.d(i + 6), &dn2);
    let (da1, dw2, db2) = conv3x3_backward(&t.conv2, p.d(i + 4), &dz2);
    let dn1 = relu_backward(&t.act1, &da1);
    let (dz1, ds1, dt1) = instance_norm_backward(&t.norm1, p.d(i + 2), &dn1);
    let (dx, dw1, db1) = conv3x3_backward(&t.conv1, p.d(i), &dz1);
    for (k, v) in [dw1, db1, ds1, dt1, dw2, db2, ds2, dt2].into_iter().enumerate() {
        g.tensors[i + k].data = v;
    }
    dx
}

/// Runs the network and returns logits `(B, out_channels, H, W)` plus the tape.
pub fn forward<T: Real>(params: &NetParams<T>, cfg: &NetConfig, x: &Tensor4<T>) -> Result<(Tensor4<T>, Tape<T>)> {
    cfg.validate()?;
    params.check_layout(cfg)?;
    if x.channels() != cfg.in_channels {
        return Err(NetError::ChannelMismatch { expected: cfg.in_channels, found: x.channels() });
    }
    let div = cfg.size_divisor();
    if x.height() % div != 0 || x.width() % div != 0 || x.height() == 0 || x.width() == 0 {
        return Err(NetError::Divisibility { h: x.height(), w: x.width(), divisor: div });
    }
    let eps = cfg.norm_epsilon;
    let mut enc = Vec::with_capacity(cfg.depth);
    let mut pools = Vec::with_capacity(cfg.depth - 1);
    let mut cur = x.clone();
    for l in 0..cfg.depth {
        let t = block_forward(&cur, params, cfg.enc_index(l), eps);
        if l + 1 < cfg.depth {
            let (pooled, arg) = maxpool_forward(&t.out);
            pools.push(arg);
            cur = pooled;
        } else {
            cur = t.out.clone();
        }
        enc.push(t);
    }
    let mut up_inputs = Vec::with_capacity(cfg.depth - 1);
    let mut dec = Vec::with_capacity(cfg.depth - 1);
    for l in (0..cfg.depth - 1).rev() {
        let i = cfg.up_index(l);
        let up = upconv_forward(&cur, params.d(i), params.d(i + 1));
        let cat = concat(&up, &enc[l].out);
        up_inputs.push(cur);
        let t = block_forward(&cat, params, i + 2, eps);
        cur = t.out.clone();
        dec.push(t);
    }
    let h = cfg.head_index();
    let logits = conv1x1_forward(&cur, params.d(h), params.d(h + 1));
    Ok((logits, Tape { cfg: *cfg, enc, pools, up_inputs, dec, head_input: cur }))
}

/// Exact gradients of `sum(logits * dlogits)` with respect to every parameter.
pub fn backward<T: Real>(params: &NetParams<T>, cfg: &NetConfig, tape: &Tape<T>, dlogits: &Tensor4<T>) -> Result<NetParams<T>> {
    backward_with_input(params, cfg, tape, dlogits).map(|(g, _)| g)
}

/// Like `backward`, also returning the gradient with respect to the input.
pub fn backward_with_input<T: Real>(params: &NetParams<T>, cfg: &NetConfig, tape: &Tape<T>, dlogits: &Tensor4<T>) -> Result<(NetParams<T>, Tensor4<T>)> {
    if tape.cfg != *cfg {
        return Err(NetError::Shape("tape was recorded with a different config".into()));
    }
    params.check_layout(cfg)?;
    let expected = [tape.head_input.batch(), cfg.out_channels, tape.head_input.height(), tape.head_input.width()];
    if dlogits.dims != expected {
        return Err(NetError::Shape(format!("dlogits {:?}, expected {expected:?}", dlogits.dims)));
    }
    let mut g = NetParams::zeros_like(cfg);
    let h = cfg.head_index();
    let (mut d, dw, db) = conv1x1_backward(&tape.head_input, params.d(h), dlogits);
    g.tensors[h].data = dw;
    g.tensors[h + 1].data = db;

    let mut skip_grads: Vec<Option<Tensor4<T>>> = (0..cfg.depth).map(|_| None).collect();
    // decoder tapes were recorded from the bottleneck upward; unwind from the top
    for l in 0..cfg.depth - 1 {
        let k = cfg.depth - 2 - l;
        let i = cfg.up_index(l);
        let dcat = block_backward(&tape.dec[k], params, &mut g, i + 2, &d);
        let (dup, dskip) = split(&dcat, cfg.filters(l));
        skip_grads[l] = Some(dskip);
        let (dx, dw, db) = upconv_backward(&tape.up_inputs[k], params.d(i), &dup);
        g.tensors[i].data = dw;
        g.tensors[i + 1].data = db;
        d = dx;
    }
    for l in (0..cfg.depth).rev() {
        // encoder outputs feed both the pool below and the skip connection
        let dout = if l + 1 < cfg.depth {
            let mut dpool = maxpool_backward(&tape.pools[l], tape.enc[l].out.dims, &d);
            if let Some(s) = &skip_grads[l] {
                add_assign(&mut dpool, s);
            }
            dpool
        } else {
            d.clone()
        };
        d = block_backward(&tape.enc[l], params, &mut g, cfg.enc_index(l), &dout);
    }
    Ok((g, d))
}

/// Convenience: forward without keeping the tape.
pub fn predict<T: Real>(params: &NetParams<T>, cfg: &NetConfig, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    forward(params, cfg, x).map(|(y, _)| y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<T: Real>(params: &NetParams<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update. Moments are kept in `f64`.
pub fn opt_step<T: Real>(params: &mut NetParams<T>, grads: &NetParams<T>, state: &mut AdamState, lr: f64, hyper: &AdamHyper) -> Result<()> {
    if params.tensors.len() != grads.tensors.len() || params.tensors.len() != state.m.len() {
        return Err(NetError::Shape("parameter, gradient and state tensor counts differ".into()));
    }
    for ((p, g), m) in params.tensors.iter().zip(&grads.tensors).zip(&state.m) {
        if p.data.len() != g.data.len() || p.data.len() != m.len() {
            return Err(NetError::Shape(format!("tensor {} length mismatch", p.name)));
        }
    }
    state.step += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.step as i32);
    for (k, (p, g)) in params.tensors.iter_mut().zip(&grads.tensors).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.data.len() {
            let gi = g.data[i].as_f64();
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
            let step = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + hyper.eps);
            p.data[i] = T::from_f64(p.data[i].as_f64() - step);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"CSNP";
const CKPT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &NetParams<f32>, cfg: &NetConfig) -> Result<Vec<u8>> {
    params.check_layout(cfg)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for v in [cfg.in_channels, cfg.out_channels, cfg.depth, cfg.base_filters] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    // upsampling, padding, normalization tags, reserved
    buf.extend_from_slice(&[0, 0, 0, 0]);
    buf.extend_from_slice(&cfg.norm_epsilon.to_le_bytes());
    buf.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for t in &params.tensors {
        buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(t.dims.len() as u8);
        for d in &t.dims {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.data.len() as u64;
    }
    for t in &params.tensors {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(NetError::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(NetParams<f32>, NetConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| NetError::Format("missing magic".into()))? != CKPT_MAGIC {
        return Err(NetError::Format("bad magic, expected \"CSNP\"".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(NetError::Format(format!("unsupported version {version}")));
    }
    let (in_channels, out_channels, depth, base_filters) =
        (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let tags = r.take(4)?;
    if tags[..3] != [0, 0, 0] {
        return Err(NetError::Format(format!("unknown architecture tags {:?}", &tags[..3])));
    }
    let norm_epsilon = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let cfg = NetConfig { in_channels, out_channels, depth, base_filters, norm_epsilon, ..NetConfig::default() };
    cfg.validate().map_err(|e| NetError::Format(e.to_string()))?;
    let layout = cfg.layout();
    let count = r.u32()? as usize;
    if count != layout.len() {
        return Err(NetError::Shape(format!("checkpoint has {count} tensors, config implies {}", layout.len())));
    }
    let mut entries = Vec::with_capacity(count);
    for (name, dims) in &layout {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let got = std::str::from_utf8(r.take(len)?).map_err(|_| NetError::Format("tensor name not utf-8".into()))?;
        let nd = r.take(1)?[0] as usize;
        let mut got_dims = Vec::with_capacity(nd);
        for _ in 0..nd {
            got_dims.push(r.u32()? as usize);
        }
        let offset = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        if got != name || got_dims != *dims {
            return Err(NetError::Shape(format!("directory entry {got} {got_dims:?}, expected {name} {dims:?}")));
        }
        entries.push((name.clone(), got_dims, offset));
    }
    let payload = &bytes[r.pos..];
    let total: usize = layout.iter().map(|(_, d)| d.iter().product::<usize>()).sum();
    if payload.len() != total * 4 {
        return Err(NetError::Format(format!("payload {} bytes, expected {}", payload.len(), total * 4)));
    }
    let tensors = entries
        .into_iter()
        .map(|(name, dims, offset)| {
            let n: usize = dims.iter().product();
            let chunk = payload
                .get(offset..offset + 4 * n)
                .ok_or_else(|| NetError::Format(format!("tensor {name} offset out of range")))?;
            let data = chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(NamedTensor { name, dims, data })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((NetParams { tensors }, cfg))
}

pub fn save_checkpoint(params: &NetParams<f32>, cfg: &NetConfig, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(params, cfg)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(NetParams<f32>, NetConfig)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads a checkpoint and refuses it unless its architecture equals `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &NetConfig) -> Result<NetParams<f32>> {
    let (params, found) = load_checkpoint(path)?;
    if found != *expected {
        return Err(NetError::ArchitectureMismatch { expected: *expected, found });
    }
    Ok(params)
}
