//! Small encoder–decoder ε-predictor over `2×H×W` range images.
//!
//! Each level runs two 3×3 convolutions with SiLU activations; levels are
//! joined by 2×2 average pooling on the way down and nearest upsampling on
//! the way up, with additive skip connections. The diffusion time enters as a
//! sinusoidal embedding of the log-SNR, mapped by a two-layer MLP to one
//! additive bias per channel per level.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{avg_pool, avg_pool_backward, silu, silu_grad, silu_in_place, upsample, upsample_backward, Conv, Dense};
use super::{Linearization, ScoreModel};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, TimePoint};
use crate::tensor::Tensor;

/// Image channels (range, reflectance).
const IO_CHANNELS: usize = 2;
/// The log-SNR is clamped to this magnitude before embedding.
const LOG_SNR_LIMIT: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    /// Channel width per level, finest first.
    pub widths: Vec<usize>,
    /// Length of the sinusoidal time embedding (even).
    pub embed_dim: usize,
    /// Hidden width of the time MLP.
    pub hidden_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            widths: vec![8, 16, 32, 64],
            embed_dim: 16,
            hidden_dim: 32,
        }
    }
}

impl Architecture {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("widths must be non-empty and positive".into()));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidArgument(
                "embed_dim must be even and positive, hidden_dim positive".into(),
            ));
        }
        Ok(())
    }

    /// Input `H, W` must be divisible by `2^(levels-1)`.
    pub fn check_input(&self, shape: [usize; 3]) -> Result<()> {
        let f = 1usize << (self.levels() - 1);
        if shape[0] != IO_CHANNELS || shape[1] % f != 0 || shape[2] % f != 0 || shape[1] == 0 {
            return Err(Error::InvalidArgument(format!(
                "denoiser input must be 2×H×W with H, W divisible by {f}, got {shape:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Layout {
    temb_in: Dense,
    temb_out: Dense,
    enc: Vec<(Conv, Conv)>,
    dec: Vec<(Conv, Conv)>,
    out: Conv,
    /// Offset of each level's time bias inside the time MLP output.
    enc_bias: Vec<usize>,
    dec_bias: Vec<usize>,
    n_params: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Layout {
        let w = &arch.widths;
        let levels = w.len();
        let mut next = 0;
        let temb_in = Dense::alloc(arch.embed_dim, arch.hidden_dim, &mut next);
        let mut bias_len = 0;
        let mut enc_bias = Vec::new();
        for &c in w {
            enc_bias.push(bias_len);
            bias_len += c;
        }
        let mut dec_bias = vec![0; levels.saturating_sub(1)];
        for l in (0..levels - 1).rev() {
            dec_bias[l] = bias_len;
            bias_len += w[l];
        }
        let temb_out = Dense::alloc(arch.hidden_dim, bias_len, &mut next);
        let enc = (0..levels)
            .map(|l| {
                let cin = if l == 0 { IO_CHANNELS } else { w[l - 1] };
                (Conv::alloc(cin, w[l], &mut next), Conv::alloc(w[l], w[l], &mut next))
            })
            .collect();
        let mut dec = Vec::with_capacity(levels - 1);
        for l in (0..levels - 1).rev() {
            dec.push((Conv::alloc(w[l + 1], w[l], &mut next), Conv::alloc(w[l], w[l], &mut next)));
        }
        dec.reverse();
        let out = Conv::alloc(w[0], IO_CHANNELS, &mut next);
        Layout {
            temb_in,
            temb_out,
            enc,
            dec,
            out,
            enc_bias,
            dec_bias,
            n_params: next,
        }
    }

    /// Every layer in declaration order.
    fn convs(&self) -> impl Iterator<Item = &Conv> {
        self.enc
            .iter()
            .flat_map(|(a, b)| [a, b])
            .chain(self.dec.iter().rev().flat_map(|(a, b)| [a, b]))
            .chain(std::iter::once(&self.out))
    }
}

/// Sinusoidal features of the clamped log-SNR.
fn time_features(log_snr: f64, dim: usize) -> Vec<f64> {
    let u = log_snr.clamp(-LOG_SNR_LIMIT, LOG_SNR_LIMIT);
    let half = dim / 2;
    let mut f = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (k as f64).exp2() / 32.0;
        f.push((u * freq).sin());
    }
    for k in 0..half {
        let freq = (k as f64).exp2() / 32.0;
        f.push((u * freq).cos());
    }
    f
}

/// Activations of one conv pair, kept for the backward pass.
#[derive(Debug, Clone)]
struct PairTrace {
    cols_a: Vec<f64>,
    /// SiLU derivatives at the pre-activations.
    grad_a: Vec<f64>,
    cols_b: Vec<f64>,
    grad_b: Vec<f64>,
    out: Vec<f64>,
    h: usize,
    w: usize,
}

#[derive(Debug, Clone)]
struct Trace {
    feats: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    biases: Vec<f64>,
    enc: Vec<PairTrace>,
    dec: Vec<PairTrace>,
    out_cols: Vec<f64>,
    eps: Vec<f64>,
    shape: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct NeuralDenoiser {
    arch: Architecture,
    layout: Layout,
    params: Vec<f64>,
    schedule: NoiseSchedule,
}

impl NeuralDenoiser {
    /// He-style random initialization with the output convolution zeroed, so a
    /// fresh model predicts ε̂ ≡ 0.
    pub fn new(arch: Architecture, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        let mut model = Self::random(arch, schedule, seed)?;
        let out = model.layout.out;
        model.params[out.w_off..out.b_off + out.cout].fill(0.0);
        Ok(model)
    }

    /// Random initialization of every layer, including the output.
    pub fn random(arch: Architecture, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.n_params];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |off: usize, len: usize, fan_in: usize, params: &mut [f64]| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            for p in &mut params[off..off + len] {
                *p = normal.sample(&mut rng);
            }
        };
        for d in [layout.temb_in, layout.temb_out] {
            fill(d.w_off, d.din * d.dout, d.din, &mut params);
        }
        for c in layout.convs() {
            fill(c.w_off, c.weight_len(), c.cin * 9, &mut params);
        }
        // keep the output layer small so a random model is a mild perturbation
        let out = layout.out;
        for p in &mut params[out.w_off..out.b_off] {
            *p *= 0.1;
        }
        Ok(NeuralDenoiser {
            arch,
            layout,
            params,
            schedule,
        })
    }

    pub fn from_params(arch: Architecture, schedule: NoiseSchedule, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if params.len() != layout.n_params {
            return Err(Error::DimensionMismatch(layout.n_params, params.len()));
        }
        Ok(NeuralDenoiser {
            arch,
            layout,
            params,
            schedule,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.n_params
    }

    /// Zeroes the output convolution (weights and bias).
    pub fn zero_output(&mut self) {
        let out = self.layout.out;
        self.params[out.w_off..out.b_off + out.cout].fill(0.0);
    }

    fn forward(&self, x_t: &Tensor, t: TimePoint) -> Result<Trace> {
        self.arch.check_input(x_t.shape())?;
        let p = &self.params;
        let ly = &self.layout;
        let levels = self.arch.levels();

        let feats = time_features(self.schedule.log_snr(t), self.arch.embed_dim);
        let hidden_pre = ly.temb_in.forward(p, &feats);
        let hidden: Vec<f64> = hidden_pre.iter().map(|&v| silu(v)).collect();
        let biases = ly.temb_out.forward(p, &hidden);

        let (mut h, mut w) = (x_t.height(), x_t.width());
        let mut enc: Vec<PairTrace> = Vec::with_capacity(levels);
        for l in 0..levels {
            let input = if l == 0 {
                x_t.data().to_vec()
            } else {
                let prev = &enc[l - 1];
                let pooled = avg_pool(&prev.out, self.arch.widths[l - 1], h, w);
                h /= 2;
                w /= 2;
                pooled
            };
            let (a, b) = ly.enc[l];
            enc.push(run_pair(p, a, b, &input, None, &biases[ly.enc_bias[l]..], h, w));
        }

        let mut dec: Vec<PairTrace> = (0..levels - 1).map(|_| PairTrace::empty()).collect();
        let mut below = enc[levels - 1].out.clone();
        for l in (0..levels - 1).rev() {
            let up = upsample(&below, self.arch.widths[l + 1], h, w);
            h *= 2;
            w *= 2;
            let (a, b) = ly.dec[l];
            let tr = run_pair(p, a, b, &up, Some(&enc[l].out), &biases[ly.dec_bias[l]..], h, w);
            below = tr.out.clone();
            dec[l] = tr;
        }

        let (eps, out_cols) = ly.out.forward(p, &below, h, w);
        Ok(Trace {
            feats,
            hidden_pre,
            hidden,
            biases,
            enc,
            dec,
            out_cols,
            eps,
            shape: x_t.shape(),
        })
    }

    /// Pulls `d_eps` back through the network. Parameter gradients are
    /// accumulated into `grads` when given; returns `∂⟨d_eps, ε̂⟩/∂x_t`.
    fn backward(&self, tr: &Trace, d_eps: &[f64], mut grads: Option<&mut [f64]>) -> Vec<f64> {
        let p = &self.params;
        let ly = &self.layout;
        let levels = self.arch.levels();
        let widths = &self.arch.widths;
        let mut d_bias = grads.as_ref().map(|_| vec![0.0; tr.biases.len()]);

        let (h0, w0) = (tr.shape[1], tr.shape[2]);
        let mut d_below = ly.out.backward(p, &tr.out_cols, d_eps, h0, w0, grads.as_deref_mut());

        // gradient w.r.t. each encoder output, accumulated from skip and pool paths
        let mut d_enc_out: Vec<Vec<f64>> = tr.enc.iter().map(|e| vec![0.0; e.out.len()]).collect();
        for l in 0..levels - 1 {
            let tr_l = &tr.dec[l];
            let (a, b) = ly.dec[l];
            let (d_up, d_skip) = back_pair(
                p,
                a,
                b,
                tr_l,
                &d_below,
                true,
                d_bias.as_mut().map(|v| &mut v[ly.dec_bias[l]..]),
                grads.as_deref_mut(),
            );
            add_into(&mut d_enc_out[l], &d_skip.expect("decoder has skip"));
            d_below = upsample_backward(&d_up, widths[l + 1], tr_l.h / 2, tr_l.w / 2);
        }
        add_into(&mut d_enc_out[levels - 1], &d_below);

        let mut d_input = Vec::new();
        for l in (0..levels).rev() {
            let tr_l = &tr.enc[l];
            let (a, b) = ly.enc[l];
            let d_out = std::mem::take(&mut d_enc_out[l]);
            let (d_in, _) = back_pair(
                p,
                a,
                b,
                tr_l,
                &d_out,
                false,
                d_bias.as_mut().map(|v| &mut v[ly.enc_bias[l]..]),
                grads.as_deref_mut(),
            );
            if l > 0 {
                let d_prev = avg_pool_backward(&d_in, widths[l - 1], tr.enc[l - 1].h, tr.enc[l - 1].w);
                add_into(&mut d_enc_out[l - 1], &d_prev);
            } else {
                d_input = d_in;
            }
        }

        if let (Some(g), Some(db)) = (grads, d_bias) {
            let d_hidden = ly.temb_out.backward(p, &tr.hidden, &db, g);
            let d_pre: Vec<f64> = d_hidden
                .iter()
                .zip(&tr.hidden_pre)
                .map(|(d, &x)| d * silu_grad(x))
                .collect();
            ly.temb_in.backward(p, &tr.feats, &d_pre, g);
        }
        d_input
    }

    /// Loss `mean((ε̂ − ε)²)` at one training example, accumulating the
    /// parameter gradient scaled by `weight` into `grads`.
    pub(crate) fn loss_and_grad(
        &self,
        x_t: &Tensor,
        t: TimePoint,
        eps: &Tensor,
        weight: f64,
        grads: &mut [f64],
    ) -> Result<f64> {
        let tr = self.forward(x_t, t)?;
        let n = eps.len() as f64;
        let mut loss = 0.0;
        let d_eps: Vec<f64> = tr
            .eps
            .iter()
            .zip(eps.data())
            .map(|(a, b)| {
                let r = a - b;
                loss += r * r;
                weight * 2.0 * r / n
            })
            .collect();
        self.backward(&tr, &d_eps, Some(grads));
        Ok(loss / n)
    }
}

impl PairTrace {
    fn empty() -> Self {
        PairTrace {
            cols_a: Vec::new(),
            grad_a: Vec::new(),
            cols_b: Vec::new(),
            grad_b: Vec::new(),
            out: Vec::new(),
            h: 0,
            w: 0,
        }
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

/// `silu(conv_b(silu(conv_a(x) + skip + bias)))`, biases broadcast per channel.
#[allow(clippy::too_many_arguments)]
fn run_pair(
    p: &[f64],
    a: Conv,
    b: Conv,
    input: &[f64],
    skip: Option<&Vec<f64>>,
    bias: &[f64],
    h: usize,
    w: usize,
) -> PairTrace {
    let hw = h * w;
    let (mut pre_a, cols_a) = a.forward(p, input, h, w);
    if let Some(s) = skip {
        add_into(&mut pre_a, s);
    }
    for (c, row) in pre_a.chunks_exact_mut(hw).enumerate() {
        let bc = bias[c];
        row.iter_mut().for_each(|v| *v += bc);
    }
    let grad_a = silu_in_place(&mut pre_a);
    let (mut out, cols_b) = b.forward(p, &pre_a, h, w);
    let grad_b = silu_in_place(&mut out);
    PairTrace {
        cols_a,
        grad_a,
        cols_b,
        grad_b,
        out,
        h,
        w,
    }
}

/// Backward of [`run_pair`]: returns `(d_input, d_skip)`.
#[allow(clippy::too_many_arguments)]
fn back_pair(
    p: &[f64],
    a: Conv,
    b: Conv,
    tr: &PairTrace,
    d_out: &[f64],
    has_skip: bool,
    d_bias: Option<&mut [f64]>,
    mut grads: Option<&mut [f64]>,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let hw = tr.h * tr.w;
    let d_pre_b: Vec<f64> = d_out
        .iter()
        .zip(&tr.grad_b)
        .map(|(d, g)| d * g)
        .collect();
    let d_act_a = b.backward(p, &tr.cols_b, &d_pre_b, tr.h, tr.w, grads.as_deref_mut());
    let d_pre_a: Vec<f64> = d_act_a
        .iter()
        .zip(&tr.grad_a)
        .map(|(d, g)| d * g)
        .collect();
    if let Some(db) = d_bias {
        for (c, row) in d_pre_a.chunks_exact(hw).enumerate() {
            db[c] += row.iter().sum::<f64>();
        }
    }
    let d_in = a.backward(p, &tr.cols_a, &d_pre_a, tr.h, tr.w, grads);
    (d_in, has_skip.then_some(d_pre_a))
}

struct NeuralLinearization<'a> {
    model: &'a NeuralDenoiser,
    trace: Trace,
    eps: Tensor,
    alpha: f64,
    sigma: f64,
}

impl Linearization for NeuralLinearization<'_> {
    fn eps(&self) -> &Tensor {
        &self.eps
    }

    /// `x̂ = (x − σ ε̂(x))/α`, so `vᵀ∂x̂/∂x = (v − σ·vᵀ∂ε̂/∂x)/α`.
    fn tweedie_vjp(&self, v: &Tensor) -> Result<Tensor> {
        self.eps.check_same_shape(v)?;
        if self.alpha <= 0.0 {
            return Err(Error::DegenerateTime(1.0));
        }
        let d = self.model.backward(&self.trace, v.data(), None);
        let out: Vec<f64> = v
            .data()
            .iter()
            .zip(&d)
            .map(|(&vi, &di)| (vi - self.sigma * di) / self.alpha)
            .collect();
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericFailure {
                step: 0,
                what: "non-finite value in denoiser backward pass".into(),
            });
        }
        Tensor::from_vec(v.shape(), out)
    }
}

impl ScoreModel for NeuralDenoiser {
    fn schedule(&self) -> NoiseSchedule {
        self.schedule
    }

    fn predict_eps(&self, x_t: &Tensor, t: TimePoint) -> Result<Tensor> {
        let tr = self.forward(x_t, t)?;
        finite_eps(tr.eps, x_t.shape())
    }

    fn linearize<'a>(&'a self, x_t: &Tensor, t: TimePoint) -> Result<Box<dyn Linearization + 'a>> {
        let mut trace = self.forward(x_t, t)?;
        let eps = finite_eps(std::mem::take(&mut trace.eps), x_t.shape())?;
        let (alpha, sigma) = self.schedule.alpha_sigma(t);
        Ok(Box::new(NeuralLinearization {
            model: self,
            trace,
            eps,
            alpha,
            sigma,
        }))
    }
}

fn finite_eps(eps: Vec<f64>, shape: [usize; 3]) -> Result<Tensor> {
    if eps.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure {
            step: 0,
            what: "non-finite ε-prediction".into(),
        });
    }
    Tensor::from_vec(shape, eps)
}
