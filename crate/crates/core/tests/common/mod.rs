//! Helpers shared by the integration and acceptance test targets.
#![allow(dead_code)]

use loopgan::graph::{Bound, Graph};
use loopgan::model::{ArchConfig, DiscriminatorSet, Generator, ImageBatch};
use loopgan::objective::{self, GanMode, TrainConfig};
use loopgan::params::ParamStore;
use loopgan::rng::{self, Rng};
use loopgan::{SequenceSpec, Tensor};
use rand::Rng as _;

pub fn uniform_batch(shape: &[usize], rng: &mut Rng) -> ImageBatch<f64> {
    let n: usize = shape.iter().product();
    ImageBatch::new(Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).unwrap()
}

/// Biases of convolutions followed by instance normalization: the
/// normalization subtracts any per-channel constant, so their gradient is
/// identically zero and they are checked separately.
pub fn is_norm_cancelled_bias(owner: Owner, name: &str, arch: &ArchConfig) -> bool {
    match owner {
        Owner::Generator => name.starts_with("trunk.block") && name.ends_with(".bias"),
        Owner::Discriminator(_) => {
            let last = arch.disc_channels.len();
            (1..last).any(|i| name == format!("c{i}.bias"))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Owner {
    Generator,
    Discriminator(usize),
}

/// The tiny float64 setup: 8x8 images, 2 residual blocks, 8 trunk channels,
/// three domains, batch 2.
pub struct TinyProblem {
    pub spec: SequenceSpec,
    pub arch: ArchConfig,
    pub cfg: TrainConfig,
    pub gen: Generator<f64>,
    pub dset: DiscriminatorSet<f64>,
    pub batches: Vec<ImageBatch<f64>>,
}

impl TinyProblem {
    pub fn new(seed: u64, mode: GanMode) -> Self {
        let spec = SequenceSpec::lettered(3).unwrap();
        // A wider init than training uses keeps activations away from the
        // near-linear regime so every op contributes curvature.
        let arch = ArchConfig {
            init_std: 0.3,
            ..ArchConfig::tiny()
        };
        let cfg = TrainConfig {
            gan_mode: mode,
            ..TrainConfig::default()
        };
        let mut r = rng::stream(seed, "fd-problem", 0);
        let mut gen = Generator::<f64>::new(&arch, &spec, &mut r).unwrap();
        // Move the affine parameters off their identity initialization.
        let names: Vec<String> = gen.store().names().to_vec();
        for (i, name) in names.iter().enumerate() {
            if name.contains("adain") || name.contains(".ln.") || name.ends_with(".bias") {
                let base = if name.ends_with("scale") { 1.0 } else { 0.0 };
                for v in gen.store_mut().get_mut(i).data_mut() {
                    *v = base + r.random_range(-0.3..0.3);
                }
            }
        }
        let mut dset = DiscriminatorSet::<f64>::new(&arch, &spec, seed).unwrap();
        for m in dset.members_mut() {
            let names: Vec<String> = m.store().names().to_vec();
            for (i, name) in names.iter().enumerate() {
                if name.ends_with(".bias") {
                    for v in m.store_mut().get_mut(i).data_mut() {
                        *v = r.random_range(-0.3..0.3);
                    }
                }
            }
        }
        let batches = (0..3).map(|_| uniform_batch(&[2, 3, 8, 8], &mut r)).collect();
        Self {
            spec,
            arch,
            cfg,
            gen,
            dset,
            batches,
        }
    }

    /// Generator-side objective value, kink signature and (optionally) the
    /// gradient for the generator's parameters.
    pub fn generator_side(&self, want_grad: bool) -> (f64, u64, Option<Vec<Tensor<f64>>>) {
        let mut g = Graph::new();
        let gp = g.bind(self.gen.store(), true);
        let dps: Vec<Bound> = self.dset.members().iter().map(|m| g.bind(m.store(), false)).collect();
        let obj = objective::generator_objective(&mut g, &self.gen, &gp, &self.dset, &dps, &self.batches, &self.spec, &self.cfg).unwrap();
        let v = g.value(obj.total).item();
        let grads = want_grad.then(|| g.backward(obj.total).unwrap().for_store(&gp, self.gen.store()));
        (v, g.kink_signature(), grads)
    }

    /// Fakes of every domain from the current generator, as constants.
    pub fn fakes(&self) -> Vec<Tensor<f64>> {
        let mut g = Graph::new();
        let gp = g.bind(self.gen.store(), false);
        let dps: Vec<Bound> = self.dset.members().iter().map(|m| g.bind(m.store(), false)).collect();
        let obj = objective::generator_objective(&mut g, &self.gen, &gp, &self.dset, &dps, &self.batches, &self.spec, &self.cfg).unwrap();
        obj.fakes
            .iter()
            .map(|fs| {
                let parts: Vec<&Tensor<f64>> = fs.iter().map(|&f| g.value(f)).collect();
                Tensor::concat(&parts).unwrap()
            })
            .collect()
    }

    /// Discriminator-side objective summed over domains.
    pub fn discriminator_side(&self, fakes: &[Tensor<f64>], want_grad: bool) -> (f64, u64, Option<Vec<Vec<Tensor<f64>>>>) {
        let mut g = Graph::new();
        let ps: Vec<Bound> = self.dset.members().iter().map(|m| g.bind(m.store(), true)).collect();
        let mut terms = Vec::new();
        for (d, m) in self.dset.members().iter().enumerate() {
            let real = g.constant(self.batches[d].tensor().clone());
            let fake = g.constant(fakes[d].clone());
            let sr = m.forward_g(&mut g, &ps[d], real).unwrap();
            let sf = m.forward_g(&mut g, &ps[d], fake).unwrap();
            terms.push((objective::adv_d_g(&mut g, sr, sf, self.cfg.gan_mode), 1.0));
        }
        let total = g.weighted_sum(terms);
        let v = g.value(total).item();
        let grads = want_grad.then(|| {
            let gr = g.backward(total).unwrap();
            self.dset.members().iter().zip(&ps).map(|(m, p)| gr.for_store(p, m.store())).collect()
        });
        (v, g.kink_signature(), grads)
    }

    fn store_mut(&mut self, owner: Owner) -> &mut ParamStore<f64> {
        match owner {
            Owner::Generator => self.gen.store_mut(),
            Owner::Discriminator(d) => self.dset.members_mut()[d].store_mut(),
        }
    }

    fn store(&self, owner: Owner) -> &ParamStore<f64> {
        match owner {
            Owner::Generator => self.gen.store(),
            Owner::Discriminator(d) => self.dset.members()[d].store(),
        }
    }
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub resampled: usize,
    pub max_rel: f64,
    pub worst: String,
    /// Largest analytic gradient among norm-cancelled biases.
    pub max_cancelled_bias_grad: f64,
}

pub const FD_STEP: f64 = 1e-5;
/// Floor on the relative-error denominator for near-zero derivatives.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compare analytic and central-difference derivatives on `per_side`
/// random coordinates of the generator and of the discriminators. Points
/// whose +-h evaluations cross a ReLU / LeakyReLU / L1 kink are redrawn.
pub fn finite_difference_check(seed: u64, mode: GanMode, per_side: usize) -> FdReport {
    let mut p = TinyProblem::new(seed, mode);
    let mut rep = FdReport::default();
    let mut r = rng::stream(seed, "fd-coordinates", 0);

    let (_, base_sig, g_grads) = p.generator_side(true);
    let g_grads = g_grads.unwrap();
    let fakes = p.fakes();
    let (_, d_base_sig, d_grads) = p.discriminator_side(&fakes, true);
    let d_grads = d_grads.unwrap();

    for (owner, grads) in std::iter::once((Owner::Generator, &g_grads)).chain(d_grads.iter().enumerate().map(|(d, g)| (Owner::Discriminator(d), g))) {
        for (i, name) in p.store(owner).names().iter().enumerate() {
            if is_norm_cancelled_bias(owner, name, &p.arch) {
                let m = grads[i].data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
                rep.max_cancelled_bias_grad = rep.max_cancelled_bias_grad.max(m);
            }
        }
    }

    let n_disc = p.dset.len();
    for side in 0..2 {
        let mut done = 0;
        let mut attempts = 0;
        while done < per_side {
            attempts += 1;
            assert!(attempts < per_side * 20, "too many kink-crossing redraws");
            let owner = if side == 0 {
                Owner::Generator
            } else {
                Owner::Discriminator(r.random_range(0..n_disc))
            };
            let (t, j) = p.store(owner).random_coordinate(&mut r);
            let name = p.store(owner).names()[t].clone();
            if is_norm_cancelled_bias(owner, &name, &p.arch) {
                continue;
            }
            let analytic = match owner {
                Owner::Generator => g_grads[t].data()[j],
                Owner::Discriminator(d) => d_grads[d][t].data()[j],
            };
            let orig = p.store(owner).get(t).data()[j];
            let eval = |p: &mut TinyProblem, v: f64| {
                p.store_mut(owner).get_mut(t).data_mut()[j] = v;
                match owner {
                    Owner::Generator => {
                        let (f, s, _) = p.generator_side(false);
                        (f, s == base_sig)
                    }
                    Owner::Discriminator(_) => {
                        let (f, s, _) = p.discriminator_side(&fakes, false);
                        (f, s == d_base_sig)
                    }
                }
            };
            let (fp, smooth_p) = eval(&mut p, orig + FD_STEP);
            let (fm, smooth_m) = eval(&mut p, orig - FD_STEP);
            p.store_mut(owner).get_mut(t).data_mut()[j] = orig;
            if !(smooth_p && smooth_m) {
                rep.resampled += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let e = rel_err(analytic, numeric);
            if e > rep.max_rel {
                rep.max_rel = e;
                rep.worst = format!("{owner:?} {name}[{j}]: analytic {analytic:e}, numeric {numeric:e}");
            }
            done += 1;
            rep.checked += 1;
        }
    }
    rep
}
