//! The shared generator and the per-domain PatchGAN discriminators.
//!
//! The generator is `Dec(T^k(Enc(x)))`: one encode, `k` recurrent
//! applications of the residual trunk, one decode. The trunk's convolutions
//! are shared across steps; only the AdaIN scale/shift bank is indexed by
//! the step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, Var};
use crate::kernels::{ConvGeom, Padding};
use crate::params::ParamStore;
use crate::rng::{self, Rng};
use crate::seq::{self, SequenceSpec, StepIndex};
use crate::tensor::{Float, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Layer widths and depths. Defaults reproduce `c7-32, d64, d128, R128 x 6,
/// u128, u64, c7-3` and discriminators `c4-64, c4-128, c4-256, c4-1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub image_channels: usize,
    pub base_channels: usize,
    pub residual_blocks: usize,
    /// Hidden discriminator widths; a final 1-channel layer follows.
    pub disc_channels: Vec<usize>,
    pub init_std: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            base_channels: 32,
            residual_blocks: 6,
            disc_channels: vec![64, 128, 256],
            init_std: 0.02,
        }
    }
}

impl ArchConfig {
    /// 8-channel trunk with 2 residual blocks and a 3-layer discriminator,
    /// sized for 8x8 images.
    pub fn tiny() -> Self {
        Self {
            image_channels: 3,
            base_channels: 2,
            residual_blocks: 2,
            disc_channels: vec![4, 8],
            init_std: 0.02,
        }
    }

    pub fn trunk_channels(&self) -> usize {
        self.base_channels * 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.base_channels == 0 || self.disc_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}

/// Images `(batch, channels, height, width)` with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T>(Tensor<T>);

impl<T: Float> ImageBatch<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        if t.shape().len() != 4 {
            return Err(Error::Shape(format!("image batch needs 4 axes, got {:?}", t.shape())));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn dims(&self) -> [usize; 4] {
        self.0.dims4()
    }

    pub fn in_range(&self) -> bool {
        self.0.data().iter().all(|v| v.abs() <= T::one())
    }
}

/// Trunk activations `(batch, trunk_channels, height/4, width/4)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T>(Tensor<T>);

impl<T: Float> FeatureMap<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        if t.shape().len() != 4 {
            return Err(Error::Shape(format!("feature map must be 4-D, got {:?}", t.shape())));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn dims(&self) -> [usize; 4] {
        self.0.dims4()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    w: usize,
    b: usize,
    geom: ConvGeom,
}

impl ConvLayer {
    fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        shape: [usize; 4],
        geom: ConvGeom,
        std: f64,
        rng: &mut Rng,
        transposed: bool,
    ) -> Self {
        let bias_len = if transposed { shape[1] } else { shape[0] };
        let w = store.add_normal(format!("{name}.weight"), &shape, std, rng);
        let b = store.add_const(format!("{name}.bias"), &[bias_len], 0.0);
        Self { w, b, geom }
    }

    fn apply<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.w), p.var(self.b), self.geom)
    }
}

#[derive(Clone, Copy, Debug)]
struct UpLayer {
    conv: ConvLayer,
    ln_scale: usize,
    ln_shift: usize,
}

const C7: ConvGeom = ConvGeom::new(7, 1, 3, Padding::Reflect);
const DOWN: ConvGeom = ConvGeom::new(3, 2, 1, Padding::Zero);
const RES: ConvGeom = ConvGeom::new(3, 1, 1, Padding::Reflect);
const UP: ConvGeom = ConvGeom::new(3, 2, 1, Padding::Zero);
const PATCH: ConvGeom = ConvGeom::new(4, 2, 1, Padding::Zero);

/// Invocation counts for one translation; local to the call.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub encode_calls: usize,
    pub decode_calls: usize,
    /// Step argument of each trunk application, in order.
    pub trunk_steps: Vec<StepIndex>,
}

/// Enc / T / Dec weights plus the per-step AdaIN bank.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    arch: ArchConfig,
    n_steps: usize,
    store: ParamStore<T>,
    enc: [ConvLayer; 3],
    trunk: Vec<[ConvLayer; 2]>,
    adain_scale: usize,
    adain_shift: usize,
    up: [UpLayer; 2],
    out: ConvLayer,
}

impl<T: Float> Generator<T> {
    pub fn new(arch: &ArchConfig, spec: &SequenceSpec, rng: &mut Rng) -> Result<Self> {
        Self::build(arch, spec.n(), rng)
    }

    /// Generator with parameters taken from `store` (names and shapes must
    /// match the architecture).
    pub fn from_store(arch: &ArchConfig, n_steps: usize, store: &ParamStore<T>) -> Result<Self> {
        let mut g = Self::build(arch, n_steps, &mut rng::stream(0, "layout", 0))?;
        g.store.assign(store)?;
        Ok(g)
    }

    fn build(arch: &ArchConfig, n_steps: usize, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        if n_steps < 2 {
            return Err(Error::Config("generator needs at least 2 steps".into()));
        }
        let std = arch.init_std;
        let (ic, b) = (arch.image_channels, arch.base_channels);
        let tc = arch.trunk_channels();
        let mut s = ParamStore::new();
        let enc = [
            ConvLayer::new(&mut s, "enc.c7", [b, ic, 7, 7], C7, std, rng, false),
            ConvLayer::new(&mut s, "enc.d1", [2 * b, b, 3, 3], DOWN, std, rng, false),
            ConvLayer::new(&mut s, "enc.d2", [tc, 2 * b, 3, 3], DOWN, std, rng, false),
        ];
        let trunk = (0..arch.residual_blocks)
            .map(|blk| {
                [0, 1].map(|l| ConvLayer::new(&mut s, &format!("trunk.block{blk}.conv{l}"), [tc, tc, 3, 3], RES, std, rng, false))
            })
            .collect();
        let bank = [n_steps, arch.residual_blocks, 2, tc];
        let adain_scale = s.add_const("trunk.adain.scale", &bank, 1.0);
        let adain_shift = s.add_const("trunk.adain.shift", &bank, 0.0);
        let mut up_layer = |s: &mut ParamStore<T>, name: &str, cin: usize, cout: usize| UpLayer {
            conv: ConvLayer::new(s, name, [cin, cout, 3, 3], UP, std, rng, true),
            ln_scale: s.add_const(format!("{name}.ln.scale"), &[cout], 1.0),
            ln_shift: s.add_const(format!("{name}.ln.shift"), &[cout], 0.0),
        };
        let up = [up_layer(&mut s, "dec.u1", tc, tc), up_layer(&mut s, "dec.u2", tc, 2 * b)];
        let out = ConvLayer::new(&mut s, "dec.c7", [ic, 2 * b, 7, 7], C7, std, rng, false);
        Ok(Self {
            arch: arch.clone(),
            n_steps,
            store: s,
            enc,
            trunk,
            adain_scale,
            adain_shift,
            up,
            out,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn adain_bank_ids(&self) -> (usize, usize) {
        (self.adain_scale, self.adain_shift)
    }

    fn adain_offset(&self, step: usize, block: usize, layer: usize) -> usize {
        ((step * self.arch.residual_blocks + block) * 2 + layer) * self.arch.trunk_channels()
    }

    /// Copy step 0's AdaIN entries into every other step.
    pub fn tie_adain_steps(&mut self) {
        let per = self.arch.residual_blocks * 2 * self.arch.trunk_channels();
        for id in [self.adain_scale, self.adain_shift] {
            let data = self.store.get_mut(id).data_mut();
            let (first, rest) = data.split_at_mut(per);
            rest.chunks_mut(per).for_each(|c| c.copy_from_slice(first));
        }
    }

    pub fn encode_g(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let [_, c, h, w] = g.value(x).dims4();
        if c != self.arch.image_channels {
            return Err(Error::Shape(format!(
                "expected {} image channels, got {c}",
                self.arch.image_channels
            )));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("image size {h}x{w} is not divisible by 4")));
        }
        let mut v = x;
        for layer in &self.enc {
            let y = layer.apply(g, p, v)?;
            v = g.relu(y);
        }
        Ok(v)
    }

    /// One trunk application at `step`. When `probe` is given, the
    /// instance-normalized activation of every AdaIN layer is recorded.
    pub fn transform_step_g(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        h: Var,
        step: StepIndex,
        mut probe: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        if step.value() >= self.n_steps {
            return Err(Error::Range {
                value: step.value(),
                n: self.n_steps,
            });
        }
        let [_, c, ..] = g.value(h).dims4();
        if c != self.arch.trunk_channels() {
            return Err(Error::Shape(format!(
                "feature map has {c} channels, trunk expects {}",
                self.arch.trunk_channels()
            )));
        }
        let (scale, shift) = (p.var(self.adain_scale), p.var(self.adain_shift));
        let mut v = h;
        for (blk, layers) in self.trunk.iter().enumerate() {
            let input = v;
            let mut y = v;
            for (l, layer) in layers.iter().enumerate() {
                let c = layer.apply(g, p, y)?;
                let n = g.instance_norm(c);
                if let Some(probe) = probe.as_deref_mut() {
                    probe.push(n);
                }
                let a = g.channel_affine(n, scale, shift, self.adain_offset(step.value(), blk, l))?;
                y = g.relu(a);
            }
            v = g.add(input, y)?;
        }
        Ok(v)
    }

    pub fn decode_g(&self, g: &mut Graph<T>, p: &Bound, h: Var) -> Result<Var> {
        let [_, c, ..] = g.value(h).dims4();
        if c != self.arch.trunk_channels() {
            return Err(Error::Shape(format!(
                "feature map has {c} channels, decoder expects {}",
                self.arch.trunk_channels()
            )));
        }
        let mut v = h;
        for up in &self.up {
            let y = g.conv_transpose2d(v, p.var(up.conv.w), p.var(up.conv.b), up.conv.geom, 1)?;
            let n = g.layer_norm(y);
            let a = g.channel_affine(n, p.var(up.ln_scale), p.var(up.ln_shift), 0)?;
            v = g.relu(a);
        }
        let y = self.out.apply(g, p, v)?;
        Ok(g.tanh(y))
    }

    /// `k` trunk applications starting at `start`, decoding after each one
    /// when `decode_each` is set. Returns the final feature map and the
    /// decoded images (empty unless `decode_each`).
    pub fn unroll_g(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        h: Var,
        start: StepIndex,
        k: usize,
        spec: &SequenceSpec,
        trace: &mut Trace,
    ) -> Result<Var> {
        let mut v = h;
        let mut step = start;
        for _ in 0..k {
            v = self.transform_step_g(g, p, v, step, None)?;
            trace.trunk_steps.push(step);
            step = seq::advance(step, spec)?;
        }
        Ok(v)
    }

    /// `Dec(T^k(Enc(x)))` with `k = step_distance(src, dst, full_loop)`.
    pub fn translate_g(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        src: StepIndex,
        dst: StepIndex,
        spec: &SequenceSpec,
        full_loop: bool,
        trace: &mut Trace,
    ) -> Result<Var> {
        self.check_spec(spec)?;
        let k = seq::step_distance(src, dst, spec, full_loop)?;
        let h = self.encode_g(g, p, x)?;
        trace.encode_calls += 1;
        let h = self.unroll_g(g, p, h, src, k, spec, trace)?;
        let y = self.decode_g(g, p, h)?;
        trace.decode_calls += 1;
        Ok(y)
    }

    fn check_spec(&self, spec: &SequenceSpec) -> Result<()> {
        if spec.n() != self.n_steps {
            return Err(Error::Config(format!(
                "generator has {} AdaIN steps but the sequence has {} domains",
                self.n_steps,
                spec.n()
            )));
        }
        Ok(())
    }

    fn frozen(&self) -> (Graph<T>, Bound) {
        let mut g = Graph::new();
        let p = g.bind(&self.store, false);
        (g, p)
    }

    pub fn encode(&self, x: &ImageBatch<T>) -> Result<FeatureMap<T>> {
        let (mut g, p) = self.frozen();
        let xv = g.constant(x.tensor().clone());
        let h = self.encode_g(&mut g, &p, xv)?;
        Ok(FeatureMap(g.value(h).clone()))
    }

    pub fn transform_step(&self, h: &FeatureMap<T>, step: StepIndex) -> Result<FeatureMap<T>> {
        let (mut g, p) = self.frozen();
        let hv = g.constant(h.0.clone());
        let y = self.transform_step_g(&mut g, &p, hv, step, None)?;
        Ok(FeatureMap(g.value(y).clone()))
    }

    /// Instance-normalized activations (before the AdaIN scale/shift) of every
    /// trunk layer for one step.
    pub fn adain_probe(&self, h: &FeatureMap<T>, step: StepIndex) -> Result<Vec<Tensor<T>>> {
        let (mut g, p) = self.frozen();
        let hv = g.constant(h.0.clone());
        let mut probe = Vec::new();
        self.transform_step_g(&mut g, &p, hv, step, Some(&mut probe))?;
        Ok(probe.into_iter().map(|v| g.value(v).clone()).collect())
    }

    pub fn decode(&self, h: &FeatureMap<T>) -> Result<ImageBatch<T>> {
        let (mut g, p) = self.frozen();
        let hv = g.constant(h.0.clone());
        let y = self.decode_g(&mut g, &p, hv)?;
        ImageBatch::new(g.value(y).clone())
    }

    pub fn translate(
        &self,
        x: &ImageBatch<T>,
        src: StepIndex,
        dst: StepIndex,
        spec: &SequenceSpec,
        full_loop: bool,
    ) -> Result<ImageBatch<T>> {
        Ok(self.translate_traced(x, src, dst, spec, full_loop)?.0)
    }

    /// [`translate`](Self::translate) plus per-call invocation counts.
    pub fn translate_traced(
        &self,
        x: &ImageBatch<T>,
        src: StepIndex,
        dst: StepIndex,
        spec: &SequenceSpec,
        full_loop: bool,
    ) -> Result<(ImageBatch<T>, Trace)> {
        self.check_spec(spec)?;
        let k = seq::step_distance(src, dst, spec, full_loop)?;
        let mut trace = Trace::default();
        let mut h = self.encode(x)?;
        trace.encode_calls += 1;
        let mut step = src;
        for _ in 0..k {
            h = self.transform_step(&h, step)?;
            trace.trunk_steps.push(step);
            step = seq::advance(step, spec)?;
        }
        let y = self.decode(&h)?;
        trace.decode_calls += 1;
        Ok((y, trace))
    }

    /// Translations of `x` (from `src`) into every domain plus the full loop
    /// back to `src`, sharing one encode and one trunk unroll. Entry `d` of
    /// the returned vector equals `translate(x, src, d, full_loop = false)`.
    pub fn translate_sequence(
        &self,
        x: &ImageBatch<T>,
        src: StepIndex,
        spec: &SequenceSpec,
    ) -> Result<(Vec<ImageBatch<T>>, ImageBatch<T>)> {
        self.check_spec(spec)?;
        spec.check(src)?;
        let n = spec.n();
        let mut out: Vec<Option<ImageBatch<T>>> = vec![None; n];
        let mut h = self.encode(x)?;
        out[src.value()] = Some(self.decode(&h)?);
        let mut step = src;
        let mut full = None;
        for m in 1..=n {
            h = self.transform_step(&h, step)?;
            step = seq::advance(step, spec)?;
            let y = self.decode(&h)?;
            if m == n {
                full = Some(y);
            } else {
                out[step.value()] = Some(y);
            }
        }
        Ok((
            out.into_iter().map(|o| o.expect("every domain visited")).collect(),
            full.expect("n >= 2"),
        ))
    }

    pub fn count_parameters(&self) -> ParamCount {
        ParamCount::from_store(&self.store, "")
    }
}

/// Per-layer and total parameter counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub layers: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamCount {
    /// Group tensors by layer: the name without its final component.
    fn from_store<T: Float>(store: &ParamStore<T>, prefix: &str) -> Self {
        let mut layers: Vec<(String, usize)> = Vec::new();
        for (name, t) in store.iter() {
            let layer = match name.rsplit_once('.') {
                Some((l, _)) if !l.ends_with(".ln") => format!("{prefix}{l}"),
                Some((l, _)) => format!("{prefix}{}", l.trim_end_matches(".ln")),
                None => format!("{prefix}{name}"),
            };
            match layers.last_mut() {
                Some((last, c)) if *last == layer => *c += t.len(),
                _ => layers.push((layer, t.len())),
            }
        }
        let total = layers.iter().map(|(_, c)| c).sum();
        Self { layers, total }
    }

    pub fn get(&self, layer: &str) -> Option<usize> {
        self.layers.iter().find(|(l, _)| l == layer).map(|&(_, c)| c)
    }

    pub fn merge(parts: impl IntoIterator<Item = ParamCount>) -> Self {
        let layers: Vec<_> = parts.into_iter().flat_map(|p| p.layers).collect();
        let total = layers.iter().map(|(_, c)| c).sum();
        Self { layers, total }
    }
}

/// One PatchGAN: `c4-k` layers of stride 2, the first without
/// normalization, the last a raw 1-channel score map.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    store: ParamStore<T>,
    layers: Vec<ConvLayer>,
}

impl<T: Float> Discriminator<T> {
    fn build(arch: &ArchConfig, rng: &mut Rng) -> Self {
        let mut s = ParamStore::new();
        let mut layers = Vec::new();
        let mut cin = arch.image_channels;
        for (i, &c) in arch.disc_channels.iter().chain(std::iter::once(&1)).enumerate() {
            layers.push(ConvLayer::new(&mut s, &format!("c{i}"), [c, cin, 4, 4], PATCH, arch.init_std, rng, false));
            cin = c;
        }
        Self { store: s, layers }
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn forward_g(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut v = x;
        for (i, layer) in self.layers.iter().enumerate() {
            v = layer.apply(g, p, v)?;
            if i == last {
                break;
            }
            if i > 0 {
                v = g.instance_norm(v);
            }
            v = g.leaky_relu(v, LEAKY_SLOPE);
        }
        Ok(v)
    }
}

/// `n` discriminators sharing an architecture, never weights.
#[derive(Clone, Debug)]
pub struct DiscriminatorSet<T> {
    arch: ArchConfig,
    members: Vec<Discriminator<T>>,
}

impl<T: Float> DiscriminatorSet<T> {
    /// Member `i` is initialized from its own stream of `seed`.
    pub fn new(arch: &ArchConfig, spec: &SequenceSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let members = (0..spec.n())
            .map(|i| Discriminator::build(arch, &mut rng::stream(seed, "discriminator", i as u64)))
            .collect();
        Ok(Self {
            arch: arch.clone(),
            members,
        })
    }

    pub fn from_stores(arch: &ArchConfig, stores: &[ParamStore<T>]) -> Result<Self> {
        let mut set = Self {
            arch: arch.clone(),
            members: (0..stores.len())
                .map(|i| Discriminator::build(arch, &mut rng::stream(0, "layout", i as u64)))
                .collect(),
        };
        for (m, s) in set.members.iter_mut().zip(stores) {
            m.store.assign(s)?;
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn member(&self, i: StepIndex) -> Result<&Discriminator<T>> {
        self.members.get(i.value()).ok_or(Error::Range {
            value: i.value(),
            n: self.members.len(),
        })
    }

    pub fn members(&self) -> &[Discriminator<T>] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [Discriminator<T>] {
        &mut self.members
    }

    /// Raw patch scores `(batch, 1, h', w')` of discriminator `i`.
    pub fn discriminate(&self, i: StepIndex, x: &ImageBatch<T>) -> Result<Tensor<T>> {
        let d = self.member(i)?;
        let mut g = Graph::new();
        let p = g.bind(&d.store, false);
        let xv = g.constant(x.tensor().clone());
        let y = d.forward_g(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn count_parameters(&self) -> ParamCount {
        ParamCount::merge(
            self.members
                .iter()
                .enumerate()
                .map(|(i, m)| ParamCount::from_store(&m.store, &format!("disc{i}."))),
        )
    }
}
