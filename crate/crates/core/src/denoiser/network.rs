//! The encoder-decoder itself: layer graph built from an [`ArchSpec`], a
//! forward pass that records a [`Trace`], and the matching reverse pass.

use serde::Serialize;

use super::ArchSpec;
use crate::nn::layers::{
    group_count, Attention, AttentionCache, Conv2d, GroupNorm, GroupNormCache, Linear,
};
use crate::nn::{Real, Tensor};

/// How a parameter block is initialised.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// One named block inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub init: Init,
}

#[derive(Default)]
struct Alloc {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl Alloc {
    fn take(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let len = shape.iter().product();
        let offset = self.total;
        self.entries.push(ParamEntry {
            name,
            offset,
            len,
            shape,
            init,
        });
        self.total += len;
        offset
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, zero: bool) -> Conv2d {
        let std = (1.0 / (cin * k * k) as f64).sqrt();
        let winit = if zero { Init::Zeros } else { Init::Normal(std) };
        let weight = self.take(format!("{name}.weight"), vec![cout, cin, k, k], winit);
        let bias = self.take(format!("{name}.bias"), vec![cout], Init::Zeros);
        Conv2d {
            cin,
            cout,
            k,
            stride,
            weight,
            bias,
        }
    }

    fn norm(&mut self, name: &str, c: usize, enabled: bool) -> Option<GroupNorm> {
        if !enabled {
            return None;
        }
        let gamma = self.take(format!("{name}.gamma"), vec![c], Init::Ones);
        let beta = self.take(format!("{name}.beta"), vec![c], Init::Zeros);
        Some(GroupNorm {
            c,
            groups: group_count(c),
            gamma,
            beta,
        })
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize, init: Init) -> Linear {
        let weight = self.take(format!("{name}.weight"), vec![out, inp], init);
        let bias = self.take(format!("{name}.bias"), vec![out], Init::Zeros);
        Linear {
            inp,
            out,
            weight,
            bias,
        }
    }

    fn resblock(&mut self, name: &str, cin: usize, cout: usize, arch: &ArchSpec) -> ResBlock {
        let norm1 = self.norm(&format!("{name}.norm1"), cin, arch.group_norm);
        let conv1 = self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, false);
        // Projection outputs (gamma - 1, beta); all-zero parameters are the
        // identity modulation.
        let film = self.linear(&format!("{name}.film"), arch.timestep_embed_dim, 2 * cout, Init::Zeros);
        let norm2 = self.norm(&format!("{name}.norm2"), cout, arch.group_norm);
        let conv2 = self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, false);
        let skip = (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1, false));
        ResBlock {
            cout,
            norm1,
            conv1,
            film,
            norm2,
            conv2,
            skip,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ResBlock {
    cout: usize,
    norm1: Option<GroupNorm>,
    conv1: Conv2d,
    film: Linear,
    norm2: Option<GroupNorm>,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

pub(crate) struct ResBlockCache<T> {
    x: Tensor<T>,
    n1: Option<GroupNormCache<T>>,
    pre1: Tensor<T>,
    a1: Tensor<T>,
    h: Tensor<T>,
    gamma_beta: Vec<T>,
    n2: Option<GroupNormCache<T>>,
    pre2: Tensor<T>,
    a2: Tensor<T>,
}

fn norm_forward<T: Real>(
    norm: &Option<GroupNorm>,
    p: &[T],
    x: &Tensor<T>,
) -> (Tensor<T>, Option<GroupNormCache<T>>) {
    match norm {
        Some(gn) => {
            let (y, c) = gn.forward(p, x);
            (y, Some(c))
        }
        None => (x.clone(), None),
    }
}

fn norm_backward<T: Real>(
    norm: &Option<GroupNorm>,
    p: &[T],
    cache: &Option<GroupNormCache<T>>,
    dy: Tensor<T>,
    g: &mut [T],
) -> Tensor<T> {
    match (norm, cache) {
        (Some(gn), Some(c)) => gn.backward(p, c, &dy, g),
        _ => dy,
    }
}

impl ResBlock {
    fn forward<T: Real>(
        &self,
        p: &[T],
        x: Tensor<T>,
        emb: &[T],
        arch: &ArchSpec,
    ) -> (Tensor<T>, ResBlockCache<T>) {
        let act = arch.activation;
        let (pre1, n1) = norm_forward(&self.norm1, p, &x);
        let a1 = act.forward_t(&pre1);
        let h = self.conv1.forward(p, &a1);
        let gamma_beta = self.film.forward(p, emb);
        let mut hm = h.clone();
        if arch.film {
            let plane = hm.plane();
            for c in 0..self.cout {
                let (gm, bt) = (gamma_beta[c] + T::one(), gamma_beta[self.cout + c]);
                for v in &mut hm.data[c * plane..(c + 1) * plane] {
                    *v = *v * gm + bt;
                }
            }
        }
        let (pre2, n2) = norm_forward(&self.norm2, p, &hm);
        let a2 = act.forward_t(&pre2);
        let mut y = self.conv2.forward(p, &a2);
        match &self.skip {
            Some(skip) => y.add_assign(&skip.forward(p, &x)),
            None => y.add_assign(&x),
        }
        (
            y,
            ResBlockCache {
                x,
                n1,
                pre1,
                a1,
                h,
                gamma_beta,
                n2,
                pre2,
                a2,
            },
        )
    }

    fn backward<T: Real>(
        &self,
        p: &[T],
        cache: &ResBlockCache<T>,
        dy: &Tensor<T>,
        g: &mut [T],
        emb: &[T],
        d_emb: &mut [T],
        arch: &ArchSpec,
    ) -> Tensor<T> {
        let act = arch.activation;
        let mut dx = match &self.skip {
            Some(skip) => skip.backward(p, &cache.x, dy, g, true).expect("dx"),
            None => dy.clone(),
        };
        let da2 = self.conv2.backward(p, &cache.a2, dy, g, true).expect("dx");
        let dpre2 = act.backward_t(&cache.pre2, &da2);
        let mut dh = norm_backward(&self.norm2, p, &cache.n2, dpre2, g);
        let mut d_gb = vec![T::zero(); 2 * self.cout];
        if arch.film {
            let plane = dh.plane();
            for c in 0..self.cout {
                let gm = cache.gamma_beta[c] + T::one();
                let (mut dg, mut db) = (T::zero(), T::zero());
                let hs = &cache.h.data[c * plane..(c + 1) * plane];
                for (d, &hv) in dh.data[c * plane..(c + 1) * plane].iter_mut().zip(hs) {
                    dg += *d * hv;
                    db += *d;
                    *d *= gm;
                }
                d_gb[c] = dg;
                d_gb[self.cout + c] = db;
            }
        }
        let de = self.film.backward(p, emb, &d_gb, g);
        for (a, b) in d_emb.iter_mut().zip(de) {
            *a += b;
        }
        let da1 = self.conv1.backward(p, &cache.a1, &dh, g, true).expect("dx");
        let dpre1 = act.backward_t(&cache.pre1, &da1);
        let dx1 = norm_backward(&self.norm1, p, &cache.n1, dpre1, g);
        dx.add_assign(&dx1);
        dx
    }
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderStage {
    blocks: Vec<ResBlock>,
    down: Conv2d,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderStage {
    up: Conv2d,
    width: usize,
    blocks: Vec<ResBlock>,
}

/// Layer graph plus parameter layout for one [`ArchSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    time: Linear,
    stem: Conv2d,
    encoder: Vec<EncoderStage>,
    mid1: ResBlock,
    attention: Option<Attention>,
    mid2: ResBlock,
    /// Deepest stage first.
    decoder: Vec<DecoderStage>,
    head_norm: Option<GroupNorm>,
    head: Conv2d,
    layout: Vec<ParamEntry>,
    param_count: usize,
}

pub(crate) struct EncoderTrace<T> {
    blocks: Vec<ResBlockCache<T>>,
}

pub(crate) struct DecoderTrace<T> {
    upsampled: Tensor<T>,
    blocks: Vec<ResBlockCache<T>>,
}

/// Activations recorded by a forward pass, consumed by [`Network::backward`].
pub struct Trace<T> {
    features: Vec<T>,
    emb: Vec<T>,
    emb_act: Vec<T>,
    input: Tensor<T>,
    encoder: Vec<EncoderTrace<T>>,
    skips: Vec<Tensor<T>>,
    mid1: ResBlockCache<T>,
    attention: Option<AttentionCache<T>>,
    mid2: ResBlockCache<T>,
    decoder: Vec<DecoderTrace<T>>,
    head_norm: Option<GroupNormCache<T>>,
    head_pre: Tensor<T>,
    head_act: Tensor<T>,
}

/// Sinusoidal features of `t / T`, sin half then cos half.
pub fn timestep_features(t: usize, steps: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let tau = 1000.0 * t as f64 / steps.max(1) as f64;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (tau * freq).sin();
        out[half + i] = (tau * freq).cos();
    }
    out
}

impl Network {
    pub fn build(arch: &ArchSpec) -> Self {
        let mut a = Alloc::default();
        let d = arch.timestep_embed_dim;
        let time = a.linear("time", d, d, Init::Normal((1.0 / d as f64).sqrt()));
        let widths = arch.stage_widths();
        let stem = a.conv("stem", 2, widths[0], 3, 1, false);
        let mut encoder = Vec::new();
        let mut cur = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..arch.resblocks_per_stage {
                blocks.push(a.resblock(&format!("enc{i}.res{b}"), cur, w, arch));
                cur = w;
            }
            let down = a.conv(&format!("enc{i}.down"), w, w, 3, 2, false);
            encoder.push(EncoderStage { blocks, down });
        }
        let mid1 = a.resblock("mid.res0", cur, cur, arch);
        let attention = arch.use_bottleneck_attention.then(|| {
            let norm = a.norm("mid.attn.norm", cur, arch.group_norm);
            let qkv = a.conv("mid.attn.qkv", cur, 3 * cur, 1, 1, false);
            let proj = a.conv("mid.attn.proj", cur, cur, 1, 1, false);
            Attention {
                c: cur,
                norm,
                qkv,
                proj,
            }
        });
        let mid2 = a.resblock("mid.res1", cur, cur, arch);
        let mut decoder = Vec::new();
        for (i, &w) in widths.iter().enumerate().rev() {
            let up = a.conv(&format!("dec{i}.up"), cur, w, 3, 1, false);
            let mut blocks = Vec::new();
            let mut cin = 2 * w;
            for b in 0..arch.resblocks_per_stage.max(1) {
                blocks.push(a.resblock(&format!("dec{i}.res{b}"), cin, w, arch));
                cin = w;
            }
            decoder.push(DecoderStage {
                up,
                width: w,
                blocks,
            });
            cur = w;
        }
        let head_norm = a.norm("head.norm", cur, arch.group_norm);
        let head = a.conv("head.out", cur, 2, 3, 1, true);
        Network {
            time,
            stem,
            encoder,
            mid1,
            attention,
            mid2,
            decoder,
            head_norm,
            head,
            param_count: a.total,
            layout: a.entries,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn layout(&self) -> &[ParamEntry] {
        &self.layout
    }

    /// `input` holds the two channels `[g_t, s]`; output channels are `[r_hat, logits]`.
    pub fn forward<T: Real>(
        &self,
        p: &[T],
        arch: &ArchSpec,
        input: Tensor<T>,
        t: usize,
    ) -> (Tensor<T>, Trace<T>) {
        let act = arch.activation;
        let features: Vec<T> = timestep_features(t, arch.timesteps, arch.timestep_embed_dim)
            .into_iter()
            .map(T::of)
            .collect();
        let emb = self.time.forward(p, &features);
        let emb_act = act.forward(&emb);

        let mut h = self.stem.forward(p, &input);
        let mut enc_traces = Vec::with_capacity(self.encoder.len());
        let mut skips = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            let mut caches = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (y, c) = block.forward(p, h, &emb_act, arch);
                caches.push(c);
                h = y;
            }
            let down = stage.down.forward(p, &h);
            skips.push(h);
            h = down;
            enc_traces.push(EncoderTrace { blocks: caches });
        }
        let (y, mid1) = self.mid1.forward(p, h, &emb_act, arch);
        h = y;
        let attention = self.attention.as_ref().map(|attn| {
            let (y, c) = attn.forward(p, &h);
            h = y;
            c
        });
        let (y, mid2) = self.mid2.forward(p, h, &emb_act, arch);
        h = y;
        let mut dec_traces = Vec::with_capacity(self.decoder.len());
        for (j, stage) in self.decoder.iter().enumerate() {
            let skip = &skips[self.encoder.len() - 1 - j];
            let upsampled = h.upsample2();
            let up = stage.up.forward(p, &upsampled);
            h = up.concat(skip);
            let mut caches = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (y, c) = block.forward(p, h, &emb_act, arch);
                caches.push(c);
                h = y;
            }
            dec_traces.push(DecoderTrace {
                upsampled,
                blocks: caches,
            });
        }
        let (head_pre, head_norm) = norm_forward(&self.head_norm, p, &h);
        let head_act = act.forward_t(&head_pre);
        let out = self.head.forward(p, &head_act);
        (
            out,
            Trace {
                features,
                emb,
                emb_act,
                input,
                encoder: enc_traces,
                skips,
                mid1,
                attention,
                mid2,
                decoder: dec_traces,
                head_norm,
                head_pre,
                head_act,
            },
        )
    }

    /// Accumulates `d loss / d params` into `g` given `d loss / d output`.
    pub fn backward<T: Real>(&self, p: &[T], arch: &ArchSpec, trace: &Trace<T>, d_out: &Tensor<T>, g: &mut [T]) {
        let act = arch.activation;
        let mut d_emb = vec![T::zero(); trace.emb_act.len()];
        let da = self.head.backward(p, &trace.head_act, d_out, g, true).expect("dx");
        let dpre = act.backward_t(&trace.head_pre, &da);
        let mut dh = norm_backward(&self.head_norm, p, &trace.head_norm, dpre, g);

        let mut d_skips: Vec<Option<Tensor<T>>> = vec![None; self.encoder.len()];
        for (j, stage) in self.decoder.iter().enumerate().rev() {
            let tr = &trace.decoder[j];
            for (block, cache) in stage.blocks.iter().zip(&tr.blocks).rev() {
                dh = block.backward(p, cache, &dh, g, &trace.emb_act, &mut d_emb, arch);
            }
            let (d_up, d_skip) = dh.split(stage.width);
            d_skips[self.encoder.len() - 1 - j] = Some(d_skip);
            let d_upsampled = stage.up.backward(p, &tr.upsampled, &d_up, g, true).expect("dx");
            dh = d_upsampled.upsample2_backward();
        }
        dh = self.mid2.backward(p, &trace.mid2, &dh, g, &trace.emb_act, &mut d_emb, arch);
        if let (Some(attn), Some(cache)) = (&self.attention, &trace.attention) {
            dh = attn.backward(p, cache, &dh, g);
        }
        dh = self.mid1.backward(p, &trace.mid1, &dh, g, &trace.emb_act, &mut d_emb, arch);
        for (i, stage) in self.encoder.iter().enumerate().rev() {
            let mut d = stage.down.backward(p, &trace.skips[i], &dh, g, true).expect("dx");
            if let Some(ds) = d_skips[i].take() {
                d.add_assign(&ds);
            }
            for (block, cache) in stage.blocks.iter().zip(&trace.encoder[i].blocks).rev() {
                d = block.backward(p, cache, &d, g, &trace.emb_act, &mut d_emb, arch);
            }
            dh = d;
        }
        self.stem.backward(p, &trace.input, &dh, g, false);
        let d_pre = act.backward(&trace.emb, &d_emb);
        self.time.backward(p, &trace.features, &d_pre, g);
    }

    /// Parameter ranges of the output head (weights and bias).
    pub fn head_range(&self) -> std::ops::Range<usize> {
        self.head.weight..self.head.bias + self.head.cout
    }

    /// Parameter ranges of every FiLM projection.
    pub fn film_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.blocks()
            .map(|b| b.film.weight..b.film.bias + b.film.out)
            .collect()
    }

    fn blocks(&self) -> impl Iterator<Item = &ResBlock> {
        self.encoder
            .iter()
            .flat_map(|s| s.blocks.iter())
            .chain([&self.mid1, &self.mid2])
            .chain(self.decoder.iter().flat_map(|s| s.blocks.iter()))
    }
}
