//! Encoder-decoder network with skip connections and optional timestep
//! conditioning, with explicit reverse-mode differentiation.

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{avg_pool2, avg_pool2_backward, col2im, gemm, im2col, upsample2, upsample2_backward, Tensor};
use crate::error::{Error, Result};
use crate::image::Image;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Block composition recorded with every serialized architecture.
pub const COMPOSITION: &str = "level block: conv3x3 -> leaky_relu(0.2) [-> +time projection] -> conv3x3 -> leaky_relu(0.2); \
down: avg_pool 2x2; up: nearest 2x then concat skip; head: conv1x1 linear; \
init: conv weights N(0, 2/fan_in), head and dense N(0, 1/fan_in), biases 0; \
time embedding: sinusoidal(4*base_width) -> dense -> leaky_relu -> per-block dense";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub time_conditioned: bool,
    /// Largest accepted timestep for time-conditioned networks (steps are `1..=T`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_timestep: Option<usize>,
    #[serde(default = "default_composition")]
    pub composition: String,
}

fn default_composition() -> String {
    COMPOSITION.to_string()
}

impl ArchSpec {
    pub fn unet(channels: usize, base_width: usize, depth: usize) -> Self {
        Self {
            in_channels: channels,
            out_channels: channels,
            base_width,
            depth,
            time_conditioned: false,
            max_timestep: None,
            composition: default_composition(),
        }
    }

    pub fn score(channels: usize, base_width: usize, depth: usize, max_timestep: usize) -> Self {
        Self {
            time_conditioned: true,
            max_timestep: Some(max_timestep),
            ..Self::unet(channels, base_width, depth)
        }
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::invalid("depth must be at least 1"));
        }
        if self.in_channels < 1 || self.out_channels < 1 || self.base_width < 1 {
            return Err(Error::invalid("channel counts must be at least 1"));
        }
        if self.time_conditioned && self.max_timestep.is_none_or(|t| t < 1) {
            return Err(Error::invalid("time-conditioned network needs max_timestep >= 1"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).n_params
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    cin: usize,
    cout: usize,
    k: usize,
    w: usize,
    b: usize,
}

impl Conv {
    fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    din: usize,
    dout: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    a: Conv,
    b: Conv,
    proj: Option<Dense>,
}

#[derive(Debug, Clone)]
struct Layout {
    enc: Vec<Block>,
    mid: Block,
    /// Decoder blocks indexed by level (`dec[l]` produces width `l`).
    dec: Vec<Block>,
    head: Conv,
    temb: Option<Dense>,
    n_params: usize,
}

struct Alloc(usize);

impl Alloc {
    fn conv(&mut self, cin: usize, cout: usize, k: usize) -> Conv {
        let w = self.0;
        self.0 += cout * cin * k * k;
        let b = self.0;
        self.0 += cout;
        Conv { cin, cout, k, w, b }
    }

    fn dense(&mut self, din: usize, dout: usize) -> Dense {
        let w = self.0;
        self.0 += dout * din;
        let b = self.0;
        self.0 += dout;
        Dense { din, dout, w, b }
    }

    fn block(&mut self, cin: usize, cout: usize, tdim: Option<usize>) -> Block {
        Block {
            a: self.conv(cin, cout, 3),
            proj: tdim.map(|d| self.dense(d, cout)),
            b: self.conv(cout, cout, 3),
        }
    }
}

impl Layout {
    fn new(arch: &ArchSpec) -> Self {
        let mut al = Alloc(0);
        let tdim = arch.time_conditioned.then(|| arch.time_dim());
        let temb = tdim.map(|d| al.dense(d, d));
        let mut enc = Vec::with_capacity(arch.depth);
        let mut cin = arch.in_channels;
        for l in 0..arch.depth {
            enc.push(al.block(cin, arch.width(l), tdim));
            cin = arch.width(l);
        }
        let mid = al.block(cin, arch.width(arch.depth), tdim);
        let mut dec = Vec::with_capacity(arch.depth);
        for l in 0..arch.depth {
            dec.push(al.block(arch.width(l + 1) + arch.width(l), arch.width(l), tdim));
        }
        let head = al.conv(arch.width(0), arch.out_channels, 1);
        Layout {
            enc,
            mid,
            dec,
            head,
            temb,
            n_params: al.0,
        }
    }

    fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.enc.iter().chain(std::iter::once(&self.mid)).chain(self.dec.iter())
    }
}

thread_local! {
    static SCRATCH: RefCell<(Vec<f64>, Vec<f64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

fn leaky_grad(out: f64) -> f64 {
    if out > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Sinusoidal embedding of a scalar step, `[sin(t ω_k), cos(t ω_k)]`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

/// Activations retained by a training forward pass.
pub struct Tape {
    input: Tensor,
    temb: Option<TembTape>,
    enc: Vec<BlockTape>,
    pooled: Vec<Tensor>,
    mid: BlockTape,
    dec: Vec<BlockTape>,
    head_in: Tensor,
}

struct TembTape {
    emb: Vec<f64>,
    hidden: Vec<f64>,
}

struct BlockTape {
    input: Tensor,
    act_a: Tensor,
    input_b: Tensor,
    out: Tensor,
}

/// A parameterised differentiable image-to-image network.
#[derive(Debug, Clone)]
pub struct Network {
    pub arch: ArchSpec,
    pub params: Vec<f64>,
    layout: Layout,
}

impl Network {
    /// Random initialisation, deterministic per seed.
    pub fn new(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.n_params];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |off: usize, len: usize, std: f64, params: &mut [f64]| {
            let dist = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[off..off + len] {
                *p = dist.sample(&mut rng);
            }
        };
        if let Some(d) = layout.temb {
            fill(d.w, d.din * d.dout, (1.0 / d.din as f64).sqrt(), &mut params);
        }
        for blk in layout.blocks() {
            for conv in [blk.a, blk.b] {
                fill(conv.w, conv.cout * conv.fan_in(), (2.0 / conv.fan_in() as f64).sqrt(), &mut params);
            }
            if let Some(d) = blk.proj {
                fill(d.w, d.din * d.dout, (1.0 / d.din as f64).sqrt(), &mut params);
            }
        }
        let h = layout.head;
        fill(h.w, h.cout * h.fan_in(), (1.0 / h.fan_in() as f64).sqrt(), &mut params);
        Ok(Self { arch, params, layout })
    }

    /// Rebuilds a network from stored parameters.
    pub fn from_params(arch: ArchSpec, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if params.len() != layout.n_params {
            return Err(Error::shape(&[layout.n_params], &[params.len()]));
        }
        Ok(Self { arch, params, layout })
    }

    pub fn n_params(&self) -> usize {
        self.layout.n_params
    }

    fn check_input(&self, x: &Tensor, t: Option<&[usize]>) -> Result<()> {
        if x.c != self.arch.in_channels {
            return Err(Error::shape(&[self.arch.in_channels], &[x.c]));
        }
        let m = 1usize << self.arch.depth;
        if x.h == 0 || x.w == 0 || x.h % m != 0 || x.w % m != 0 {
            return Err(Error::invalid(format!(
                "input {}x{} is not divisible by 2^depth = {m}",
                x.h, x.w
            )));
        }
        match (self.arch.time_conditioned, t) {
            (true, Some(ts)) => {
                if ts.len() != x.b {
                    return Err(Error::shape(&[x.b], &[ts.len()]));
                }
                let max = self.arch.max_timestep.unwrap_or(usize::MAX);
                if let Some(bad) = ts.iter().find(|&&s| s < 1 || s > max) {
                    return Err(Error::invalid(format!("timestep {bad} outside 1..={max}")));
                }
                Ok(())
            }
            (true, None) => Err(Error::invalid("time-conditioned network needs a timestep")),
            (false, Some(_)) => Err(Error::invalid("network is not time-conditioned")),
            (false, None) => Ok(()),
        }
    }

    pub fn apply(&self, x: &Image) -> Result<Image> {
        Ok(self.forward(&Tensor::from_image(x), None)?.into_image())
    }

    pub fn apply_t(&self, x: &Image, t: usize) -> Result<Image> {
        Ok(self.forward(&Tensor::from_image(x), Some(&[t]))?.into_image())
    }

    pub fn forward(&self, x: &Tensor, t: Option<&[usize]>) -> Result<Tensor> {
        self.forward_train(x, t).map(|(y, _)| y)
    }

    fn conv_forward(&self, conv: &Conv, x: &Tensor) -> Tensor {
        let n = x.n();
        let mut out = Tensor::zeros(conv.cout, x.b, x.h, x.w);
        let w = &self.params[conv.w..conv.w + conv.cout * conv.fan_in()];
        let kk = conv.fan_in() as isize;
        if conv.k == 1 {
            gemm(conv.cout, conv.cin, n, w, kk, 1, &x.data, n as isize, 1, &mut out.data, false);
        } else {
            SCRATCH.with(|s| {
                let cols = &mut s.borrow_mut().0;
                im2col(x, conv.k, cols);
                gemm(conv.cout, conv.fan_in(), n, w, kk, 1, cols, n as isize, 1, &mut out.data, false);
            });
        }
        for co in 0..conv.cout {
            let b = self.params[conv.b + co];
            out.data[co * n..(co + 1) * n].iter_mut().for_each(|v| *v += b);
        }
        out
    }

    /// Accumulates weight and bias gradients; returns the input gradient.
    fn conv_backward(&self, conv: &Conv, x: &Tensor, dy: &Tensor, grads: &mut [f64]) -> Tensor {
        let n = x.n();
        let fan = conv.fan_in();
        let w = &self.params[conv.w..conv.w + conv.cout * fan];
        for co in 0..conv.cout {
            grads[conv.b + co] += dy.data[co * n..(co + 1) * n].iter().sum::<f64>();
        }
        let mut dx = Tensor::zeros(conv.cin, x.b, x.h, x.w);
        let gw = &mut grads[conv.w..conv.w + conv.cout * fan];
        if conv.k == 1 {
            gemm(conv.cout, n, fan, &dy.data, n as isize, 1, &x.data, 1, n as isize, gw, true);
            gemm(fan, conv.cout, n, w, 1, fan as isize, &dy.data, n as isize, 1, &mut dx.data, false);
        } else {
            SCRATCH.with(|s| {
                let (cols, dcols) = &mut *s.borrow_mut();
                im2col(x, conv.k, cols);
                gemm(conv.cout, n, fan, &dy.data, n as isize, 1, cols, 1, n as isize, gw, true);
                dcols.clear();
                dcols.resize(fan * n, 0.0);
                gemm(fan, conv.cout, n, w, 1, fan as isize, &dy.data, n as isize, 1, dcols, false);
                col2im(dcols, conv.k, &mut dx);
            });
        }
        dx
    }

    fn block_forward(&self, blk: &Block, x: Tensor, temb: Option<&TembTape>) -> BlockTape {
        let mut act_a = self.conv_forward(&blk.a, &x);
        act_a.data.iter_mut().for_each(|v| *v = leaky(*v));
        let mut input_b = act_a.clone();
        if let (Some(d), Some(tt)) = (blk.proj, temb) {
            let hw = x.h * x.w;
            let bsz = x.b;
            for bi in 0..bsz {
                let hid = &tt.hidden[bi * d.din..(bi + 1) * d.din];
                for co in 0..d.dout {
                    let wrow = &self.params[d.w + co * d.din..d.w + (co + 1) * d.din];
                    let shift = self.params[d.b + co] + wrow.iter().zip(hid).map(|(a, b)| a * b).sum::<f64>();
                    input_b.data[(co * bsz + bi) * hw..(co * bsz + bi + 1) * hw]
                        .iter_mut()
                        .for_each(|v| *v += shift);
                }
            }
        }
        let mut out = self.conv_forward(&blk.b, &input_b);
        out.data.iter_mut().for_each(|v| *v = leaky(*v));
        BlockTape {
            input: x,
            act_a,
            input_b,
            out,
        }
    }

    fn block_backward(
        &self,
        blk: &Block,
        tape: &BlockTape,
        mut dout: Tensor,
        temb: Option<&TembTape>,
        dhidden: &mut [f64],
        grads: &mut [f64],
    ) -> Tensor {
        dout.data
            .iter_mut()
            .zip(&tape.out.data)
            .for_each(|(d, o)| *d *= leaky_grad(*o));
        let mut d_a = self.conv_backward(&blk.b, &tape.input_b, &dout, grads);
        if let (Some(d), Some(tt)) = (blk.proj, temb) {
            let hw = tape.input.h * tape.input.w;
            let bsz = tape.input.b;
            for bi in 0..bsz {
                let hid = &tt.hidden[bi * d.din..(bi + 1) * d.din];
                for co in 0..d.dout {
                    let g: f64 = d_a.data[(co * bsz + bi) * hw..(co * bsz + bi + 1) * hw].iter().sum();
                    grads[d.b + co] += g;
                    for j in 0..d.din {
                        grads[d.w + co * d.din + j] += g * hid[j];
                        dhidden[bi * d.din + j] += g * self.params[d.w + co * d.din + j];
                    }
                }
            }
        }
        d_a.data
            .iter_mut()
            .zip(&tape.act_a.data)
            .for_each(|(d, o)| *d *= leaky_grad(*o));
        self.conv_backward(&blk.a, &tape.input, &d_a, grads)
    }

    /// Forward pass that keeps every activation needed by [`Network::backward`].
    pub fn forward_train(&self, x: &Tensor, t: Option<&[usize]>) -> Result<(Tensor, Tape)> {
        self.check_input(x, t)?;
        let temb = match (self.layout.temb, t) {
            (Some(d), Some(ts)) => {
                let mut emb = Vec::with_capacity(ts.len() * d.din);
                for &s in ts {
                    emb.extend(timestep_embedding(s, d.din));
                }
                let mut hidden = vec![0.0; ts.len() * d.dout];
                for bi in 0..ts.len() {
                    let e = &emb[bi * d.din..(bi + 1) * d.din];
                    for o in 0..d.dout {
                        let wrow = &self.params[d.w + o * d.din..d.w + (o + 1) * d.din];
                        let v = self.params[d.b + o] + wrow.iter().zip(e).map(|(a, b)| a * b).sum::<f64>();
                        hidden[bi * d.dout + o] = leaky(v);
                    }
                }
                Some(TembTape { emb, hidden })
            }
            _ => None,
        };
        let mut enc = Vec::with_capacity(self.arch.depth);
        let mut pooled = Vec::with_capacity(self.arch.depth);
        let mut cur = x.clone();
        for blk in &self.layout.enc {
            let bt = self.block_forward(blk, cur, temb.as_ref());
            let p = avg_pool2(&bt.out);
            enc.push(bt);
            pooled.push(p.clone());
            cur = p;
        }
        let mid = self.block_forward(&self.layout.mid, cur, temb.as_ref());
        let mut up_src = mid.out.clone();
        let mut dec: Vec<BlockTape> = Vec::with_capacity(self.arch.depth);
        for l in (0..self.arch.depth).rev() {
            let cat = Tensor::concat(&upsample2(&up_src), &enc[l].out);
            let bt = self.block_forward(&self.layout.dec[l], cat, temb.as_ref());
            up_src = bt.out.clone();
            dec.push(bt);
        }
        dec.reverse();
        let out = self.conv_forward(&self.layout.head, &up_src);
        Ok((
            out,
            Tape {
                input: x.clone(),
                temb,
                enc,
                pooled,
                mid,
                dec,
                head_in: up_src,
            },
        ))
    }

    /// Reverse pass: adds `∂loss/∂params` into `grads` and returns `∂loss/∂input`.
    pub fn backward(&self, tape: &Tape, dout: &Tensor, grads: &mut [f64]) -> Tensor {
        assert_eq!(grads.len(), self.n_params(), "gradient buffer length");
        let depth = self.arch.depth;
        let tt = tape.temb.as_ref();
        let mut dhidden = vec![0.0; tt.map_or(0, |t| t.hidden.len())];
        let mut d = self.conv_backward(&self.layout.head, &tape.head_in, dout, grads);
        let mut dskip: Vec<Option<Tensor>> = (0..depth).map(|_| None).collect();
        for l in 0..depth {
            let dcat = self.block_backward(&self.layout.dec[l], &tape.dec[l], d, tt, &mut dhidden, grads);
            let (du, ds) = dcat.split(self.arch.width(l + 1));
            dskip[l] = Some(ds);
            d = upsample2_backward(&du);
        }
        let mut d = self.block_backward(&self.layout.mid, &tape.mid, d, tt, &mut dhidden, grads);
        for l in (0..depth).rev() {
            debug_assert_eq!(tape.pooled[l].data.len(), d.data.len());
            let mut ds = avg_pool2_backward(&d);
            if let Some(extra) = dskip[l].take() {
                ds.data.iter_mut().zip(&extra.data).for_each(|(a, b)| *a += b);
            }
            d = self.block_backward(&self.layout.enc[l], &tape.enc[l], ds, tt, &mut dhidden, grads);
        }
        if let (Some(dn), Some(tt)) = (self.layout.temb, tt) {
            let bsz = tape.input.b;
            for bi in 0..bsz {
                let e = &tt.emb[bi * dn.din..(bi + 1) * dn.din];
                for o in 0..dn.dout {
                    let g = dhidden[bi * dn.dout + o] * leaky_grad(tt.hidden[bi * dn.dout + o]);
                    grads[dn.b + o] += g;
                    for j in 0..dn.din {
                        grads[dn.w + o * dn.din + j] += g * e[j];
                    }
                }
            }
        }
        d
    }
}

/// Value, parameter gradient and output of a scalar loss of the network output.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub output: Tensor,
}

/// Differentiates `loss(f_θ(input))` with respect to every parameter.
///
/// `loss` returns the scalar value together with its gradient with respect to
/// the network output.
pub fn loss_gradient(
    net: &Network,
    input: &Tensor,
    t: Option<&[usize]>,
    loss: impl FnOnce(&Tensor) -> (f64, Tensor),
) -> Result<LossGradient> {
    let (output, tape) = net.forward_train(input, t)?;
    let (value, dout) = loss(&output);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: 0 });
    }
    let mut grads = vec![0.0; net.n_params()];
    net.backward(&tape, &dout, &mut grads);
    Ok(LossGradient {
        loss: value,
        grads,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(c: usize, b: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(c, b, h, w);
        let n = Normal::new(0.0, 1.0).unwrap();
        t.data.iter_mut().for_each(|v| *v = n.sample(&mut rng));
        t
    }

    #[test]
    fn shape_preserved() {
        let net = Network::new(ArchSpec::unet(2, 4, 3), 0).unwrap();
        let x = random_tensor(2, 1, 64, 64, 1);
        let y = net.forward(&x, None).unwrap();
        assert_eq!((y.c, y.h, y.w), (2, 64, 64));
        let bad = random_tensor(2, 1, 60, 64, 1);
        assert!(net.forward(&bad, None).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = Network::new(ArchSpec::unet(1, 4, 2), 7).unwrap();
        let b = Network::new(ArchSpec::unet(1, 4, 2), 7).unwrap();
        let x = random_tensor(1, 1, 16, 16, 2);
        assert_eq!(a.forward(&x, None).unwrap(), b.forward(&x, None).unwrap());
        let c = Network::new(ArchSpec::unet(1, 4, 2), 8).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn score_net_timestep_range() {
        let net = Network::new(ArchSpec::score(1, 4, 2, 10), 0).unwrap();
        let x = random_tensor(1, 1, 16, 16, 3);
        assert!(net.forward(&x, Some(&[1])).is_ok());
        assert!(net.forward(&x, Some(&[10])).is_ok());
        assert!(net.forward(&x, Some(&[0])).is_err());
        assert!(net.forward(&x, Some(&[11])).is_err());
        assert!(net.forward(&x, None).is_err());
        let a = net.forward(&x, Some(&[3])).unwrap();
        let b = net.forward(&x, Some(&[7])).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn batch_matches_single() {
        let net = Network::new(ArchSpec::score(2, 4, 2, 50), 3).unwrap();
        let a = random_tensor(2, 1, 8, 8, 4).into_image();
        let b = random_tensor(2, 1, 8, 8, 5).into_image();
        let batch = net.forward(&Tensor::from_images(&[&a, &b]), Some(&[4, 40])).unwrap();
        let sa = net.apply_t(&a, 4).unwrap();
        let sb = net.apply_t(&b, 40).unwrap();
        for (u, v) in batch.to_image(0).data.iter().zip(&sa.data) {
            assert!((u - v).abs() < 1e-12);
        }
        for (u, v) in batch.to_image(1).data.iter().zip(&sb.data) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn param_count_regression() {
        // depth-2 width-8 two-channel U-Net:
        // enc0 2->8, enc1 8->16, mid 16->32, dec0 24->8, dec1 48->16, head 8->2
        let expected = (9 * 2 * 8 + 8) + (9 * 8 * 8 + 8)
            + (9 * 8 * 16 + 16) + (9 * 16 * 16 + 16)
            + (9 * 16 * 32 + 32) + (9 * 32 * 32 + 32)
            + (9 * 24 * 8 + 8) + (9 * 8 * 8 + 8)
            + (9 * 48 * 16 + 16) + (9 * 16 * 16 + 16)
            + (8 * 2 + 2);
        assert_eq!(ArchSpec::unet(2, 8, 2).param_count(), expected);
        let t = ArchSpec::score(2, 8, 2, 100);
        let tdim = 32;
        let extra = (tdim * tdim + tdim) + [8, 16, 32, 8, 16].iter().map(|c| c * tdim + c).sum::<usize>();
        assert_eq!(t.param_count(), expected + extra);
    }

    #[test]
    fn zero_loss_gives_zero_gradient() {
        let net = Network::new(ArchSpec::unet(1, 4, 2), 1).unwrap();
        let x = random_tensor(1, 1, 8, 8, 1);
        let g = loss_gradient(&net, &x, None, |y| (3.0, Tensor::zeros(y.c, y.b, y.h, y.w))).unwrap();
        assert_eq!(g.grads.len(), net.n_params());
        assert!(g.grads.iter().all(|&v| v == 0.0));
        let bad = loss_gradient(&net, &x, None, |y| (f64::NAN, Tensor::zeros(y.c, y.b, y.h, y.w)));
        assert!(matches!(bad, Err(Error::NonFiniteLoss { .. })));
    }
}
