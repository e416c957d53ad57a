//! Gated dual-head denoiser: an encoder-decoder with FiLM timestep
//! conditioning that predicts a residual `r_hat` and ground logits from
//! `[g_t, s]`, and the confidence gate that fuses them with the DSM.

pub mod checkpoint;
pub mod gate;
pub mod network;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use gate::{gate, gate_backward, gated_predict, GateMode};
pub use network::{timestep_features, Init, Network, ParamEntry, Trace};

use crate::error::{Error, Result};
use crate::nn::layers::Activation;
use crate::nn::{Real, Tensor};
use crate::raster::Grid;

/// What the first output channel means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Above-ground residual; the estimate is `s - r_hat`.
    #[default]
    Residual,
    /// Absolute terrain elevation.
    Absolute,
}

/// Architecture and output-semantics description. Serialized into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchSpec {
    pub base_channels: usize,
    /// Number of encoder stages; each halves the resolution.
    pub depth: usize,
    pub resblocks_per_stage: usize,
    pub use_bottleneck_attention: bool,
    pub timestep_embed_dim: usize,
    /// Trained diffusion step count `T`; timestep features use `t / T`.
    pub timesteps: usize,
    pub activation: Activation,
    pub group_norm: bool,
    pub film: bool,
    pub target: Target,
    pub gating: bool,
    /// `false` turns the model into a single-pass network that sees only the
    /// DSM (the `g_t` channel is zeroed and `t` pinned to `T`).
    pub diffusion: bool,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            base_channels: 16,
            depth: 2,
            resblocks_per_stage: 1,
            use_bottleneck_attention: false,
            timestep_embed_dim: 32,
            timesteps: 10,
            activation: Activation::Silu,
            group_norm: true,
            film: true,
            target: Target::Residual,
            gating: true,
            diffusion: true,
        }
    }
}

impl ArchSpec {
    /// Channel width of each encoder stage: `base * 2^i`.
    pub fn stage_widths(&self) -> Vec<usize> {
        (0..self.depth).map(|i| self.base_channels << i).collect()
    }

    pub fn multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn gate_mode(&self) -> GateMode {
        GateMode {
            target: self.target,
            gating: self.gating,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth == 0 || self.resblocks_per_stage == 0 {
            return Err(Error::InvalidArgument(
                "base_channels, depth and resblocks_per_stage must be positive".into(),
            ));
        }
        if self.timestep_embed_dim < 2 || !self.timestep_embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument("timestep_embed_dim must be even and >= 2".into()));
        }
        if self.timesteps == 0 {
            return Err(Error::InvalidArgument("timesteps must be positive".into()));
        }
        Ok(())
    }

    pub fn check_input(&self, width: usize, height: usize) -> Result<()> {
        let m = self.multiple();
        if !width.is_multiple_of(m) || !height.is_multiple_of(m) || width == 0 || height == 0 {
            return Err(Error::PadOrResize(format!(
                "{width}x{height} is not divisible by {m}"
            )));
        }
        Ok(())
    }
}

/// Forward-pass record needed by [`DenoiserModel::backward`].
pub struct Tape<T> {
    trace: Option<Trace<T>>,
    dims: (usize, usize),
}

impl<T> Default for Tape<T> {
    fn default() -> Self {
        Self {
            trace: None,
            dims: (0, 0),
        }
    }
}

impl<T> Tape<T> {
    pub fn is_recorded(&self) -> bool {
        self.trace.is_some()
    }
}

/// Parameters plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel<T = f32> {
    arch: ArchSpec,
    net: Network,
    params: Vec<T>,
}

impl<T: Real> DenoiserModel<T> {
    /// Randomly initialised model; output head starts at zero.
    pub fn new(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let net = Network::build(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); net.param_count()];
        for e in net.layout() {
            let slot = &mut params[e.offset..e.offset + e.len];
            match e.init {
                Init::Zeros => slot.fill(T::zero()),
                Init::Ones => slot.fill(T::one()),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("finite std");
                    for v in slot {
                        *v = T::of(dist.sample(&mut rng));
                    }
                }
            }
        }
        Ok(Self { arch, net, params })
    }

    pub fn from_params(arch: ArchSpec, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        let net = Network::build(&arch);
        if params.len() != net.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for an architecture expecting {}",
                params.len(),
                net.param_count()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        Ok(Self { arch, net, params })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn layout(&self) -> &[ParamEntry] {
        self.net.layout()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Same architecture with a different scalar type.
    pub fn cast<U: Real>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            arch: self.arch.clone(),
            net: self.net.clone(),
            params: self.params.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Validates shapes/timestep and packs `[g_t, s]` into a network input.
    pub fn prepare_input(&self, g_t: &[f64], s: &Grid, t: usize) -> Result<(Tensor<T>, usize)> {
        self.arch.check_input(s.width(), s.height())?;
        if g_t.len() != s.len() {
            return Err(Error::ShapeMismatch("g_t and s differ in size".into()));
        }
        if t == 0 || t > self.arch.timesteps {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.arch.timesteps,
            });
        }
        let clean = |v: f64| if v.is_finite() { T::of(v) } else { T::zero() };
        let mut data = Vec::with_capacity(2 * s.len());
        if self.arch.diffusion {
            data.extend(g_t.iter().map(|&v| clean(v)));
        } else {
            data.extend(std::iter::repeat_n(T::zero(), s.len()));
        }
        data.extend(s.values().iter().map(|&v| clean(v)));
        let t_eff = if self.arch.diffusion { t } else { self.arch.timesteps };
        Ok((Tensor::from_vec(2, s.height(), s.width(), data), t_eff))
    }

    pub fn forward_tensor(&self, input: Tensor<T>, t: usize) -> (Tensor<T>, Trace<T>) {
        self.net.forward(&self.params, &self.arch, input, t)
    }

    pub fn backward_tensor(&self, trace: &Trace<T>, d_out: &Tensor<T>, grads: &mut [T]) {
        self.net.backward(&self.params, &self.arch, trace, d_out, grads)
    }

    fn split_output(out: &Tensor<T>, like: &Grid) -> (Grid, Grid) {
        let n = out.plane();
        let to_grid = |xs: &[T]| {
            like.with_values(xs.iter().map(|v| v.as_f64()).collect())
                .expect("output matches input shape")
        };
        (to_grid(&out.data[..n]), to_grid(&out.data[n..]))
    }

    /// `(r_hat, logits)` for one sample.
    pub fn forward(&self, g_t: &Grid, s: &Grid, t: usize) -> Result<(Grid, Grid)> {
        g_t.check_shape(s, "denoiser input")?;
        let (input, t) = self.prepare_input(g_t.values(), s, t)?;
        let (out, _) = self.forward_tensor(input, t);
        Ok(Self::split_output(&out, s))
    }

    /// Like [`DenoiserModel::forward`] but keeps activations in `tape`.
    pub fn forward_recorded(&self, g_t: &Grid, s: &Grid, t: usize, tape: &mut Tape<T>) -> Result<(Grid, Grid)> {
        g_t.check_shape(s, "denoiser input")?;
        let (input, t) = self.prepare_input(g_t.values(), s, t)?;
        let (out, trace) = self.forward_tensor(input, t);
        tape.trace = Some(trace);
        tape.dims = (s.width(), s.height());
        Ok(Self::split_output(&out, s))
    }

    /// Parameter gradient given upstream gradients on `(r_hat, logits)`.
    pub fn backward(&self, tape: &Tape<T>, d_rhat: &Grid, d_logits: &Grid) -> Result<Vec<f64>> {
        let trace = tape.trace.as_ref().ok_or(Error::NoForward)?;
        let (w, h) = tape.dims;
        if d_rhat.width() != w || d_rhat.height() != h || !d_rhat.same_shape(d_logits) {
            return Err(Error::ShapeMismatch("upstream gradient shape".into()));
        }
        let data = d_rhat
            .values()
            .iter()
            .chain(d_logits.values())
            .map(|&v| T::of(v))
            .collect();
        let d_out = Tensor::from_vec(2, h, w, data);
        let mut grads = vec![T::zero(); self.params.len()];
        self.backward_tensor(trace, &d_out, &mut grads);
        Ok(grads.into_iter().map(|v| v.as_f64()).collect())
    }
}
