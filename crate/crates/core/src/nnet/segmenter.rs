//! Encoder-decoder segmenter with configurable skip merging.
//!
//! Encoder stage `s` (channels `base * 2^s`) is two 3x3 conv + ReLU layers
//! followed by 2x2 max pooling; the bottleneck is one more conv block at
//! `base * 2^depth` channels. Decoder stage `s` upsamples, projects to the
//! stage width with a 3x3 conv + ReLU, merges with the encoder output of the
//! same stage, and applies a conv block. A 1x1 head and a logistic squashing
//! produce a one-channel probability map. The bottleneck is tagged encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{
    conv2d_bwd, conv2d_fwd, maxpool2_bwd, maxpool2_fwd, merge_bwd, merge_fwd, relu_bwd, relu_fwd,
    sigmoid, upsample2_bwd, upsample2_fwd, MergeMode,
};
use super::params::{ParamSet, Tag};
use crate::error::{Error, Result};
use crate::tensor::TensorF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub merge_mode: MergeMode,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 8,
            depth: 3,
            merge_mode: MergeMode::Concat,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.base_channels < 1 || self.in_channels < 1 {
            return Err(Error::Range(format!(
                "depth, base_channels and in_channels must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Channel width of encoder stage `s` (`s == depth` is the bottleneck).
    pub fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    /// Inputs must have spatial extents divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    c1: ConvIdx,
    c2: ConvIdx,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    tag: Tag,
    shape: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Layout {
    specs: Vec<ParamSpec>,
    enc: Vec<Block>,
    bottleneck: Block,
    /// Indexed by stage; applied deepest first.
    dec: Vec<(ConvIdx, Block)>,
    head: ConvIdx,
}

impl Layout {
    fn conv(&mut self, name: &str, tag: Tag, cin: usize, cout: usize, k: usize) -> ConvIdx {
        let w = self.specs.len();
        self.specs.push(ParamSpec {
            name: format!("{name}.weight"),
            tag,
            shape: vec![cout, cin, k, k],
        });
        self.specs.push(ParamSpec {
            name: format!("{name}.bias"),
            tag,
            shape: vec![cout],
        });
        ConvIdx { w, b: w + 1 }
    }

    fn block(&mut self, name: &str, tag: Tag, cin: usize, cout: usize) -> Block {
        Block {
            c1: self.conv(&format!("{name}.conv1"), tag, cin, cout, 3),
            c2: self.conv(&format!("{name}.conv2"), tag, cout, cout, 3),
        }
    }

    fn new(cfg: &NetConfig) -> Self {
        let dummy = ConvIdx { w: 0, b: 0 };
        let mut l = Layout {
            specs: Vec::new(),
            enc: Vec::new(),
            bottleneck: Block { c1: dummy, c2: dummy },
            dec: Vec::new(),
            head: dummy,
        };
        let mut cin = cfg.in_channels;
        for s in 0..cfg.depth {
            let c = cfg.stage_channels(s);
            let b = l.block(&format!("enc{s}"), Tag::Encoder, cin, c);
            l.enc.push(b);
            cin = c;
        }
        l.bottleneck = l.block("bottleneck", Tag::Encoder, cin, cfg.stage_channels(cfg.depth));
        let mut dec = Vec::new();
        for s in (0..cfg.depth).rev() {
            let c = cfg.stage_channels(s);
            let up = l.conv(&format!("dec{s}.up"), Tag::Decoder, cfg.stage_channels(s + 1), c, 3);
            let merged = match cfg.merge_mode {
                MergeMode::Add => c,
                MergeMode::Concat => 2 * c,
            };
            let block = l.block(&format!("dec{s}"), Tag::Decoder, merged, c);
            dec.push((up, block));
        }
        dec.reverse();
        l.dec = dec;
        l.head = l.conv("head", Tag::Decoder, cfg.base_channels, 1, 1);
        l
    }
}

struct ConvTrace {
    input: TensorF,
    pre: TensorF,
}

struct BlockTrace {
    c1: ConvTrace,
    c2: ConvTrace,
}

struct EncTrace {
    block: BlockTrace,
    argmax: Vec<usize>,
    pooled_from: Vec<usize>,
}

/// Intermediate values of one forward pass, consumed by [`Segmenter::backward`].
pub struct Trace {
    enc: Vec<EncTrace>,
    bottleneck: BlockTrace,
    dec: Vec<(ConvTrace, BlockTrace)>,
    head_input: TensorF,
    prob: TensorF,
}

impl Trace {
    pub fn output(&self) -> &TensorF {
        &self.prob
    }
}

#[derive(Debug, Clone)]
pub struct Segmenter {
    cfg: NetConfig,
    layout: Layout,
}

impl Segmenter {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            layout: Layout::new(&cfg),
            cfg,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Seeded initialization: weights uniform in `+-sqrt(6 / fan_in)`,
    /// which keeps activation variance roughly constant through ReLU layers;
    /// biases zero. Each parameter draws from its own stream keyed by name, so
    /// a parameter's values depend only on the seed, its name and its shape.
    pub fn init_params(&self) -> ParamSet {
        let mut set = ParamSet::new();
        for spec in &self.layout.specs {
            let mut t = TensorF::zeros(&spec.shape);
            if let [_, cin, kh, kw] = spec.shape[..] {
                let fan_in = (cin * kh * kw) as f64;
                let bound = (6.0 / fan_in).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
                rng.set_stream(name_stream(&spec.name));
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.gen_range(-bound..bound));
            }
            set.push(spec.name.clone(), spec.tag, t)
                .expect("layout names are unique");
        }
        set
    }

    /// Confirms `params` has exactly this network's names, tags and shapes.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let ok = params.len() == self.layout.specs.len()
            && params.iter().zip(&self.layout.specs).all(|(p, s)| {
                p.name == s.name && p.tag == s.tag && p.value.shape() == &s.shape[..]
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "parameter set does not match a {:?} network",
                self.cfg
            )))
        }
    }

    fn check_input(&self, x: &TensorF) -> Result<()> {
        let (c, h, w) = x.chw()?;
        let d = self.cfg.divisor();
        if c != self.cfg.in_channels || h % d != 0 || w % d != 0 {
            return Err(Error::Dimension(format!(
                "input {:?} must have {} channels and extents divisible by {d}",
                x.shape(),
                self.cfg.in_channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParamSet, x: &TensorF) -> Result<TensorF> {
        Ok(self.forward_trace(params, x)?.prob)
    }

    pub fn forward_trace(&self, params: &ParamSet, x: &TensorF) -> Result<Trace> {
        self.check_params(params)?;
        self.check_input(x)?;
        let l = &self.layout;
        let mut h = x.clone();
        let mut enc = Vec::with_capacity(self.cfg.depth);
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for block in &l.enc {
            let (out, bt) = block_fwd(params, block, h)?;
            let (pooled, argmax) = maxpool2_fwd(&out)?;
            enc.push(EncTrace {
                block: bt,
                argmax,
                pooled_from: out.shape().to_vec(),
            });
            skips.push(out);
            h = pooled;
        }
        let (mut h, bottleneck) = block_fwd(params, &l.bottleneck, h)?;
        let mut dec: Vec<Option<(ConvTrace, BlockTrace)>> = (0..self.cfg.depth).map(|_| None).collect();
        for s in (0..self.cfg.depth).rev() {
            let (up_idx, block) = &l.dec[s];
            let (proj, up_trace) = conv_relu_fwd(params, up_idx, upsample2_fwd(&h)?)?;
            let merged = merge_fwd(&skips[s], &proj, self.cfg.merge_mode)?;
            let (out, bt) = block_fwd(params, block, merged)?;
            dec[s] = Some((up_trace, bt));
            h = out;
        }
        let z = conv2d_fwd(&h, &params.param(l.head.w).value, &params.param(l.head.b).value)?;
        Ok(Trace {
            enc,
            bottleneck,
            dec: dec.into_iter().map(|d| d.expect("every stage visited")).collect(),
            head_input: h,
            prob: z.map(sigmoid),
        })
    }

    /// Accumulates `dL/dparams` into the gradient buffers of `params`, given
    /// `dprob = dL/d(output probabilities)`.
    pub fn backward(&self, params: &mut ParamSet, trace: &Trace, dprob: &TensorF) -> Result<()> {
        self.check_params(params)?;
        trace.prob.ensure_same_shape(dprob)?;
        let l = &self.layout;
        let dz = TensorF::from_vec(
            dprob.shape(),
            trace
                .prob
                .data()
                .iter()
                .zip(dprob.data())
                .map(|(&p, &g)| g * p * (1.0 - p))
                .collect(),
        )?;
        let mut dh = conv_bwd_acc(params, &l.head, &trace.head_input, &dz, true)?.expect("dx requested");
        let mut dskips = Vec::with_capacity(self.cfg.depth);
        for s in 0..self.cfg.depth {
            let (up_idx, block) = &l.dec[s];
            let (up_trace, bt) = &trace.dec[s];
            let dmerged = block_bwd(params, block, bt, &dh, true)?.expect("dx requested");
            let (dskip, dproj) = merge_bwd(&dmerged, self.cfg.merge_mode, self.cfg.stage_channels(s))?;
            dskips.push(dskip);
            let dup = conv_relu_bwd(params, up_idx, up_trace, &dproj, true)?.expect("dx requested");
            dh = upsample2_bwd(&dup)?;
        }
        dh = block_bwd(params, &l.bottleneck, &trace.bottleneck, &dh, true)?.expect("dx requested");
        for s in (0..self.cfg.depth).rev() {
            let et = &trace.enc[s];
            let mut dout = maxpool2_bwd(&dh, &et.argmax, &et.pooled_from)?;
            for (a, b) in dout.data_mut().iter_mut().zip(dskips[s].data()) {
                *a += b;
            }
            match block_bwd(params, &l.enc[s], &et.block, &dout, s > 0)? {
                Some(dx) => dh = dx,
                None => break,
            }
        }
        Ok(())
    }
}

fn name_stream(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn conv_relu_fwd(params: &ParamSet, idx: &ConvIdx, x: TensorF) -> Result<(TensorF, ConvTrace)> {
    let pre = conv2d_fwd(&x, &params.param(idx.w).value, &params.param(idx.b).value)?;
    Ok((relu_fwd(&pre), ConvTrace { input: x, pre }))
}

fn block_fwd(params: &ParamSet, block: &Block, x: TensorF) -> Result<(TensorF, BlockTrace)> {
    let (h, c1) = conv_relu_fwd(params, &block.c1, x)?;
    let (out, c2) = conv_relu_fwd(params, &block.c2, h)?;
    Ok((out, BlockTrace { c1, c2 }))
}

fn conv_bwd_acc(
    params: &mut ParamSet,
    idx: &ConvIdx,
    input: &TensorF,
    dpre: &TensorF,
    need_dx: bool,
) -> Result<Option<TensorF>> {
    let g = conv2d_bwd(input, &params.param(idx.w).value, dpre, need_dx)?;
    add_into(&mut params.param_mut(idx.w).grad, &g.dkernel);
    add_into(&mut params.param_mut(idx.b).grad, &g.dbias);
    Ok(g.dx)
}

fn conv_relu_bwd(
    params: &mut ParamSet,
    idx: &ConvIdx,
    trace: &ConvTrace,
    dy: &TensorF,
    need_dx: bool,
) -> Result<Option<TensorF>> {
    let dpre = relu_bwd(&trace.pre, dy);
    conv_bwd_acc(params, idx, &trace.input, &dpre, need_dx)
}

fn block_bwd(
    params: &mut ParamSet,
    block: &Block,
    trace: &BlockTrace,
    dy: &TensorF,
    need_dx: bool,
) -> Result<Option<TensorF>> {
    let dh = conv_relu_bwd(params, &block.c2, &trace.c2, dy, true)?.expect("dx requested");
    conv_relu_bwd(params, &block.c1, &trace.c1, &dh, need_dx)
}

fn add_into(acc: &mut TensorF, g: &TensorF) {
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

/// Seeded parameters for the network described by `cfg`.
pub fn init_params(cfg: &NetConfig) -> Result<ParamSet> {
    Ok(Segmenter::new(*cfg)?.init_params())
}
