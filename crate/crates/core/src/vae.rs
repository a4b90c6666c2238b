//! Variational autoencoder learner: diagonal-Gaussian encoder, Bernoulli or
//! Gaussian decoder, closed-form-KL ELBO, importance-weighted bound,
//! generation and the encoder-mean feature extractor.
//!
//! All likelihood arithmetic lives in [`VaeView`], which evaluates an
//! encoder chain and a decoder chain of networks. A plain VAE is a chain of
//! length one; a mixture component is a shared trunk followed by its head.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{
    log_sum_exp, sigmoid, Activation, AdamConfig, AdamState, DenseMatrix, ForwardCache, MlpParams,
};
use crate::rng::{self, Rng64};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const BERNOULLI_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecoderFamily {
    Bernoulli,
    Gaussian { sigma: f64 },
}

impl DecoderFamily {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DecoderFamily::Gaussian { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::Config(format!(
                    "gaussian decoder sigma must be positive, got {sigma}"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Training objective for one gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    Elbo,
    BetaElbo { beta: f64 },
    Iwae { m: usize },
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Objective::BetaElbo { beta } if !(beta >= 0.0 && beta.is_finite()) => Err(
                Error::Config(format!("beta must be non-negative, got {beta}")),
            ),
            Objective::Iwae { m: 0 } => Err(Error::Config("iwae objective needs m >= 1".into())),
            _ => Ok(()),
        }
    }
}

/// How the KL term of a single-sample ELBO estimate is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlMode {
    /// Exact diagonal-Gaussian KL.
    ClosedForm,
    /// `log q(z|x) − log p(z)` at the drawn `z`; equals the one-sample IWAE bound.
    Sampled,
}

/// Layer widths shared by single VAEs and mixture components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeArch {
    pub data_dim: usize,
    pub latent_dim: usize,
    /// Encoder trunk widths (data → … → last entry).
    pub encoder_hidden: Vec<usize>,
    /// Decoder trunk widths (latent → … → last entry).
    pub decoder_hidden: Vec<usize>,
    pub family: DecoderFamily,
}

impl VaeArch {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Config(
                "data and latent dimensions must be positive".into(),
            ));
        }
        if self.encoder_hidden.is_empty() || self.decoder_hidden.is_empty() {
            return Err(Error::Config(
                "encoder and decoder need at least one hidden layer".into(),
            ));
        }
        if self
            .encoder_hidden
            .iter()
            .chain(&self.decoder_hidden)
            .any(|&w| w == 0)
        {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        self.family.validate()
    }

    fn trunk<R: Rng + ?Sized>(input: usize, hidden: &[usize], rng: &mut R) -> Result<MlpParams> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        MlpParams::init(&sizes, &vec![Activation::Tanh; hidden.len()], rng)
    }

    pub fn encoder_trunk<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<MlpParams> {
        Self::trunk(self.data_dim, &self.encoder_hidden, rng)
    }

    /// Final encoder layer producing `[μ, log σ²]`.
    pub fn encoder_head<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<MlpParams> {
        let last = *self.encoder_hidden.last().expect("validated");
        MlpParams::init(&[last, 2 * self.latent_dim], &[Activation::Identity], rng)
    }

    pub fn decoder_trunk<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<MlpParams> {
        Self::trunk(self.latent_dim, &self.decoder_hidden, rng)
    }

    /// Final decoder layer producing logits (Bernoulli) or means (Gaussian).
    pub fn decoder_head<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<MlpParams> {
        let last = *self.decoder_hidden.last().expect("validated");
        MlpParams::init(&[last, self.data_dim], &[Activation::Identity], rng)
    }
}

/// A latent draw with its exact log densities.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub log_q: f64,
    pub log_prior: f64,
}

/// `z = μ + exp(½ log σ²) ⊙ noise`, with diagonal-Gaussian log densities.
pub fn reparameterize(mu: &[f64], logvar: &[f64], noise: &[f64]) -> LatentSample {
    let mut z = Vec::with_capacity(mu.len());
    let mut log_q = 0.0;
    let mut log_prior = 0.0;
    for ((&m, &lv), &e) in mu.iter().zip(logvar).zip(noise) {
        let zi = m + (0.5 * lv).exp() * e;
        log_q += -0.5 * (LN_2PI + lv + e * e);
        log_prior += -0.5 * (LN_2PI + zi * zi);
        z.push(zi);
    }
    LatentSample {
        z,
        log_q,
        log_prior,
    }
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, 1))` summed over dimensions.
pub fn gaussian_kl(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Encoder/decoder chains evaluated as one VAE.
#[derive(Debug, Clone)]
pub struct VaeView<'a> {
    pub(crate) enc: Vec<&'a MlpParams>,
    pub(crate) dec: Vec<&'a MlpParams>,
    pub(crate) family: DecoderFamily,
    pub(crate) beta: f64,
}

fn chain_predict(parts: &[&MlpParams], x: &DenseMatrix) -> Result<DenseMatrix> {
    let mut h = parts[0].predict(x)?;
    for p in &parts[1..] {
        h = p.predict(&h)?;
    }
    Ok(h)
}

fn chain_forward(
    parts: &[&MlpParams],
    x: &DenseMatrix,
) -> Result<(DenseMatrix, Vec<ForwardCache>)> {
    let mut caches = Vec::with_capacity(parts.len());
    let mut h = x.clone();
    for p in parts {
        let (out, cache) = p.forward(&h)?;
        caches.push(cache);
        h = out;
    }
    Ok((h, caches))
}

fn chain_backward(
    parts: &[&MlpParams],
    caches: &[ForwardCache],
    grad: DenseMatrix,
) -> Result<(Vec<MlpParams>, DenseMatrix)> {
    let mut grads = Vec::with_capacity(parts.len());
    let mut g = grad;
    for (p, c) in parts.iter().zip(caches).rev() {
        let (pg, ig) = p.backward(c, &g)?;
        grads.push(pg);
        g = ig;
    }
    grads.reverse();
    Ok((grads, g))
}

impl<'a> VaeView<'a> {
    /// SHA-256 of the encoder chain and of the decoder chain. A chain hashes
    /// the same as the single network it composes to.
    pub fn digest(&self) -> String {
        let chain = |nets: &[&MlpParams]| {
            let mut h = Sha256::new();
            for v in nets.iter().flat_map(|n| n.values()) {
                h.update(v.to_le_bytes());
            }
            hex::encode(h.finalize())
        };
        format!("{}:{}", chain(&self.enc), chain(&self.dec))
    }

    pub fn family(&self) -> DecoderFamily {
        self.family
    }

    pub fn data_dim(&self) -> usize {
        self.enc[0].input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.enc[self.enc.len() - 1].output_dim() / 2
    }

    pub fn check_data(&self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.data_dim() {
            return Err(Error::dim("vae input", self.data_dim(), x.cols()));
        }
        if matches!(self.family, DecoderFamily::Bernoulli)
            && x.as_slice().iter().any(|&v| !(0.0..=1.0).contains(&v))
        {
            return Err(Error::Input(
                "bernoulli decoder needs inputs in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    fn check_noise(&self, noise: &DenseMatrix, rows: usize) -> Result<()> {
        if noise.cols() != self.latent_dim() {
            return Err(Error::dim(
                "latent noise width",
                self.latent_dim(),
                noise.cols(),
            ));
        }
        if noise.rows() != rows {
            return Err(Error::dim("latent noise rows", rows, noise.rows()));
        }
        Ok(())
    }

    pub fn encode(&self, x: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        if x.cols() != self.data_dim() {
            return Err(Error::dim("vae input", self.data_dim(), x.cols()));
        }
        let h = chain_predict(&self.enc, x)?;
        let dz = self.latent_dim();
        Ok((h.columns(0, dz), h.columns(dz, 2 * dz)))
    }

    /// Raw decoder output: logits for Bernoulli, means for Gaussian.
    pub fn decode_raw(&self, z: &DenseMatrix) -> Result<DenseMatrix> {
        chain_predict(&self.dec, z)
    }

    /// Deterministic generator `G*(z)`.
    pub fn decode_mean(&self, z: &DenseMatrix) -> Result<DenseMatrix> {
        let raw = self.decode_raw(z)?;
        Ok(match self.family {
            DecoderFamily::Bernoulli => raw.map(sigmoid),
            DecoderFamily::Gaussian { .. } => raw,
        })
    }

    /// Per-row `log p(x | z)` from raw decoder outputs.
    pub fn loglik_rows(&self, x: &DenseMatrix, raw: &DenseMatrix) -> Vec<f64> {
        x.row_iter()
            .zip(raw.row_iter())
            .map(|(xr, rr)| loglik_row(self.family, xr, rr))
            .collect()
    }

    /// `∂ log p(x | z) / ∂ raw`.
    fn loglik_grad(&self, x: &DenseMatrix, raw: &DenseMatrix) -> DenseMatrix {
        let mut g = DenseMatrix::zeros(raw.rows(), raw.cols());
        match self.family {
            DecoderFamily::Bernoulli => {
                for ((gv, &xv), &l) in g
                    .as_mut_slice()
                    .iter_mut()
                    .zip(x.as_slice())
                    .zip(raw.as_slice())
                {
                    let p = sigmoid(l);
                    *gv = if !(BERNOULLI_CLAMP..=1.0 - BERNOULLI_CLAMP).contains(&p) {
                        0.0
                    } else {
                        xv - p
                    };
                }
            }
            DecoderFamily::Gaussian { sigma } => {
                let s2 = sigma * sigma;
                for ((gv, &xv), &m) in g
                    .as_mut_slice()
                    .iter_mut()
                    .zip(x.as_slice())
                    .zip(raw.as_slice())
                {
                    *gv = (xv - m) / s2;
                }
            }
        }
        g
    }

    /// Single-sample ELBO estimate per row of `x`, one noise row each.
    pub fn elbo_rows(&self, x: &DenseMatrix, noise: &DenseMatrix, kl: KlMode) -> Result<Vec<f64>> {
        self.check_data(x)?;
        self.check_noise(noise, x.rows())?;
        let (mu, lv) = self.encode(x)?;
        let samples: Vec<LatentSample> = (0..x.rows())
            .map(|i| reparameterize(mu.row(i), lv.row(i), noise.row(i)))
            .collect();
        let z =
            DenseMatrix::from_rows(&samples.iter().map(|s| s.z.as_slice()).collect::<Vec<_>>())?;
        let raw = self.decode_raw(&z)?;
        let ll = self.loglik_rows(x, &raw);
        Ok(ll
            .iter()
            .zip(&samples)
            .enumerate()
            .map(|(i, (&l, s))| match kl {
                KlMode::ClosedForm => l - self.beta * gaussian_kl(mu.row(i), lv.row(i)),
                KlMode::Sampled => log_weight(l, s),
            })
            .collect())
    }

    /// Importance-weighted bound of one input with `noise_set.rows()` samples.
    pub fn iwae(&self, x: &[f64], noise_set: &DenseMatrix) -> Result<f64> {
        let xm = DenseMatrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.iwae_rows(&xm, noise_set)?[0])
    }

    /// IWAE bound per row; `noise` holds `m` consecutive rows per input.
    pub fn iwae_rows(&self, x: &DenseMatrix, noise: &DenseMatrix) -> Result<Vec<f64>> {
        self.check_data(x)?;
        let n = x.rows();
        if n == 0 {
            return Ok(Vec::new());
        }
        if noise.rows() == 0 || !noise.rows().is_multiple_of(n) {
            return Err(Error::dim("iwae noise rows", n, noise.rows()));
        }
        let m = noise.rows() / n;
        self.check_noise(noise, n * m)?;
        let (mu, lv) = self.encode(x)?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let samples: Vec<LatentSample> = (0..m)
                .map(|j| reparameterize(mu.row(i), lv.row(i), noise.row(i * m + j)))
                .collect();
            let z = DenseMatrix::from_rows(
                &samples.iter().map(|s| s.z.as_slice()).collect::<Vec<_>>(),
            )?;
            let raw = self.decode_raw(&z)?;
            let xi = x.row(i);
            let logw: Vec<f64> = raw
                .row_iter()
                .zip(&samples)
                .map(|(rr, s)| log_weight(loglik_row(self.family, xi, rr), s))
                .collect();
            out.push(log_sum_exp(&logw) - (m as f64).ln());
        }
        Ok(out)
    }

    /// Mean training loss (negated objective) and gradients for every part,
    /// encoder parts first, then decoder parts.
    pub fn loss_and_grads(
        &self,
        x: &DenseMatrix,
        noise: &DenseMatrix,
        objective: Objective,
    ) -> Result<(f64, Vec<MlpParams>)> {
        match objective {
            Objective::Elbo => self.elbo_grads(x, noise, 1.0),
            Objective::BetaElbo { beta } => self.elbo_grads(x, noise, beta),
            Objective::Iwae { m } => self.iwae_grads(x, noise, m),
        }
    }

    fn elbo_grads(
        &self,
        x: &DenseMatrix,
        noise: &DenseMatrix,
        beta: f64,
    ) -> Result<(f64, Vec<MlpParams>)> {
        self.check_data(x)?;
        self.check_noise(noise, x.rows())?;
        let n = x.rows() as f64;
        let dz = self.latent_dim();
        let (h, enc_caches) = chain_forward(&self.enc, x)?;
        let mut z = DenseMatrix::zeros(x.rows(), dz);
        let mut kl_total = 0.0;
        for i in 0..x.rows() {
            let (mu, lv) = h.row(i).split_at(dz);
            kl_total += gaussian_kl(mu, lv);
            for k in 0..dz {
                z[(i, k)] = mu[k] + (0.5 * lv[k]).exp() * noise[(i, k)];
            }
        }
        let (raw, dec_caches) = chain_forward(&self.dec, &z)?;
        let ll_total: f64 = self.loglik_rows(x, &raw).iter().sum();
        let loss = -(ll_total - beta * kl_total) / n;

        let out_grad = self.loglik_grad(x, &raw).map(|g| -g / n);
        let (dec_grads, dz_loss) = chain_backward(&self.dec, &dec_caches, out_grad)?;
        let mut dh = DenseMatrix::zeros(h.rows(), h.cols());
        for i in 0..x.rows() {
            for k in 0..dz {
                let mu = h[(i, k)];
                let lv = h[(i, dz + k)];
                let std = (0.5 * lv).exp();
                let gz = dz_loss[(i, k)];
                dh[(i, k)] = gz + beta * mu / n;
                dh[(i, dz + k)] =
                    gz * noise[(i, k)] * 0.5 * std + beta * 0.5 * (lv.exp() - 1.0) / n;
            }
        }
        let (mut grads, _) = chain_backward(&self.enc, &enc_caches, dh)?;
        grads.extend(dec_grads);
        Ok((loss, grads))
    }

    fn iwae_grads(
        &self,
        x: &DenseMatrix,
        noise: &DenseMatrix,
        m: usize,
    ) -> Result<(f64, Vec<MlpParams>)> {
        self.check_data(x)?;
        let rows = x.rows();
        self.check_noise(noise, rows * m)?;
        let n = rows as f64;
        let dz = self.latent_dim();
        let (h, enc_caches) = chain_forward(&self.enc, x)?;
        let mut z = DenseMatrix::zeros(rows * m, dz);
        let mut xrep = DenseMatrix::zeros(rows * m, x.cols());
        let mut samples = Vec::with_capacity(rows * m);
        for i in 0..rows {
            let (mu, lv) = h.row(i).split_at(dz);
            for j in 0..m {
                let s = reparameterize(mu, lv, noise.row(i * m + j));
                z.row_mut(i * m + j).copy_from_slice(&s.z);
                xrep.row_mut(i * m + j).copy_from_slice(x.row(i));
                samples.push(s);
            }
        }
        let (raw, dec_caches) = chain_forward(&self.dec, &z)?;
        let ll = self.loglik_rows(&xrep, &raw);
        let mut coef = vec![0.0; rows * m];
        let mut loss = 0.0;
        for i in 0..rows {
            let logw: Vec<f64> = (i * m..(i + 1) * m)
                .map(|r| log_weight(ll[r], &samples[r]))
                .collect();
            let lse = log_sum_exp(&logw);
            loss -= (lse - (m as f64).ln()) / n;
            for (j, lw) in logw.iter().enumerate() {
                coef[i * m + j] = -(lw - lse).exp() / n;
            }
        }
        let mut out_grad = self.loglik_grad(&xrep, &raw);
        for (r, c) in coef.iter().enumerate() {
            out_grad.row_mut(r).iter_mut().for_each(|g| *g *= c);
        }
        let (dec_grads, dz_dec) = chain_backward(&self.dec, &dec_caches, out_grad)?;
        let mut dh = DenseMatrix::zeros(h.rows(), h.cols());
        for i in 0..rows {
            for j in 0..m {
                let r = i * m + j;
                for k in 0..dz {
                    let lv = h[(i, dz + k)];
                    let std = (0.5 * lv).exp();
                    // log p(z) contributes −z; log q contributes +½ per log σ² entry.
                    let gz = dz_dec[(r, k)] - coef[r] * z[(r, k)];
                    dh[(i, k)] += gz;
                    dh[(i, dz + k)] += gz * noise[(r, k)] * 0.5 * std + coef[r] * 0.5;
                }
            }
        }
        let (mut grads, _) = chain_backward(&self.enc, &enc_caches, dh)?;
        grads.extend(dec_grads);
        Ok((loss, grads))
    }

    /// `n` samples from the generator; Gaussian adds σ-noise, Bernoulli
    /// returns probabilities.
    pub fn generate(&self, n: usize, rng: &mut Rng64) -> Result<DenseMatrix> {
        let z = rng::standard_normal(rng, n, self.latent_dim());
        let mean = self.decode_mean(&z)?;
        Ok(match self.family {
            DecoderFamily::Bernoulli => mean,
            DecoderFamily::Gaussian { sigma } => {
                let eps = rng::standard_normal(rng, n, self.data_dim());
                let mut out = mean;
                for (o, e) in out.as_mut_slice().iter_mut().zip(eps.as_slice()) {
                    *o += sigma * e;
                }
                out
            }
        })
    }

    /// Noise-free generator samples `G*(z)`, `z ~ N(0, I)`.
    pub fn generate_mean(&self, n: usize, rng: &mut Rng64) -> Result<DenseMatrix> {
        let z = rng::standard_normal(rng, n, self.latent_dim());
        self.decode_mean(&z)
    }

    pub fn features(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.encode(x)?.0)
    }
}

#[inline]
fn log_weight(loglik: f64, s: &LatentSample) -> f64 {
    loglik + s.log_prior - s.log_q
}

fn loglik_row(family: DecoderFamily, x: &[f64], raw: &[f64]) -> f64 {
    match family {
        DecoderFamily::Bernoulli => x
            .iter()
            .zip(raw)
            .map(|(&xv, &l)| {
                let p = sigmoid(l).clamp(BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP);
                xv * p.ln() + (1.0 - xv) * (1.0 - p).ln()
            })
            .sum(),
        DecoderFamily::Gaussian { sigma } => {
            let d = x.len() as f64;
            let s2 = sigma * sigma;
            let r2: f64 = x.iter().zip(raw).map(|(a, b)| (a - b) * (a - b)).sum();
            -0.5 * d * (LN_2PI + s2.ln()) - r2 / (2.0 * s2)
        }
    }
}

/// Optimizer state for one network pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeOptimizer {
    pub encoder: AdamState,
    pub decoder: AdamState,
}

/// A single VAE learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeComponent {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub family: DecoderFamily,
    pub beta: f64,
    pub frozen: bool,
    pub optimizer: VaeOptimizer,
}

impl VaeComponent {
    /// Draws parameters in the order encoder trunk, encoder head, decoder
    /// trunk, decoder head, matching a one-component mixture.
    pub fn new(arch: &VaeArch, adam: AdamConfig, rng: &mut Rng64) -> Result<Self> {
        arch.validate()?;
        let encoder = arch.encoder_trunk(rng)?.then(&arch.encoder_head(rng)?)?;
        let decoder = arch.decoder_trunk(rng)?.then(&arch.decoder_head(rng)?)?;
        Self::from_parts(encoder, decoder, arch.family, adam)
    }

    pub fn from_parts(
        encoder: MlpParams,
        decoder: MlpParams,
        family: DecoderFamily,
        adam: AdamConfig,
    ) -> Result<Self> {
        family.validate()?;
        if !encoder.output_dim().is_multiple_of(2) {
            return Err(Error::Config(
                "encoder output must hold mean and log-variance halves".into(),
            ));
        }
        if encoder.output_dim() / 2 != decoder.input_dim() {
            return Err(Error::dim(
                "decoder latent input",
                encoder.output_dim() / 2,
                decoder.input_dim(),
            ));
        }
        if encoder.input_dim() != decoder.output_dim() {
            return Err(Error::dim(
                "decoder output",
                encoder.input_dim(),
                decoder.output_dim(),
            ));
        }
        let optimizer = VaeOptimizer {
            encoder: AdamState::new(&encoder, adam),
            decoder: AdamState::new(&decoder, adam),
        };
        Ok(Self {
            encoder,
            decoder,
            family,
            beta: 1.0,
            frozen: false,
            optimizer,
        })
    }

    pub fn view(&self) -> VaeView<'_> {
        VaeView {
            enc: vec![&self.encoder],
            dec: vec![&self.decoder],
            family: self.family,
            beta: self.beta,
        }
    }

    pub fn data_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim() / 2
    }

    pub fn encode(&self, x: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        self.view().encode(x)
    }

    pub fn decoder_loglik(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        let xm = DenseMatrix::from_vec(1, x.len(), x.to_vec())?;
        let view = self.view();
        view.check_data(&xm)?;
        if z.len() != self.latent_dim() {
            return Err(Error::dim("latent code", self.latent_dim(), z.len()));
        }
        let raw = view.decode_raw(&DenseMatrix::from_vec(1, z.len(), z.to_vec())?)?;
        Ok(view.loglik_rows(&xm, &raw)[0])
    }

    /// Single-sample ELBO with closed-form KL weighted by `beta`.
    pub fn elbo(&self, x: &[f64], noise: &[f64]) -> Result<f64> {
        let xm = DenseMatrix::from_vec(1, x.len(), x.to_vec())?;
        let nm = DenseMatrix::from_vec(1, noise.len(), noise.to_vec())?;
        Ok(self.view().elbo_rows(&xm, &nm, KlMode::ClosedForm)?[0])
    }

    pub fn elbo_rows(&self, x: &DenseMatrix, noise: &DenseMatrix, kl: KlMode) -> Result<Vec<f64>> {
        self.view().elbo_rows(x, noise, kl)
    }

    pub fn iwae_bound(&self, x: &[f64], noise_set: &DenseMatrix) -> Result<f64> {
        self.view().iwae(x, noise_set)
    }

    pub fn iwae_rows(&self, x: &DenseMatrix, noise: &DenseMatrix) -> Result<Vec<f64>> {
        self.view().iwae_rows(x, noise)
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<DenseMatrix> {
        self.view().generate(n, &mut rng::stream_rng(seed, 0))
    }

    pub fn generate_mean(&self, n: usize, seed: u64) -> Result<DenseMatrix> {
        self.view().generate_mean(n, &mut rng::stream_rng(seed, 0))
    }

    /// Encoder mean `μ(x)` per row.
    pub fn feature_extract(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.view().features(x)
    }

    pub fn loss_and_grads(
        &self,
        x: &DenseMatrix,
        noise: &DenseMatrix,
        objective: Objective,
    ) -> Result<(f64, Vec<MlpParams>)> {
        self.view().loss_and_grads(x, noise, objective)
    }

    /// Noise rows needed by one gradient step on `rows` inputs.
    pub fn noise_rows(objective: Objective, rows: usize) -> usize {
        match objective {
            Objective::Iwae { m } => rows * m,
            _ => rows,
        }
    }

    /// One optimizer step; a frozen component only reports the loss.
    pub fn train_step(
        &mut self,
        x: &DenseMatrix,
        objective: Objective,
        rng: &mut Rng64,
    ) -> Result<f64> {
        let noise = rng::standard_normal(
            rng,
            Self::noise_rows(objective, x.rows()),
            self.latent_dim(),
        );
        let (loss, grads) = self.loss_and_grads(x, &noise, objective)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss}")));
        }
        if self.frozen {
            return Ok(loss);
        }
        self.optimizer.encoder.step(&mut self.encoder, &grads[0])?;
        self.optimizer.decoder.step(&mut self.decoder, &grads[1])?;
        Ok(loss)
    }

    pub fn digest(&self) -> String {
        self.view().digest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn arch(family: DecoderFamily) -> VaeArch {
        VaeArch {
            data_dim: 5,
            latent_dim: 2,
            encoder_hidden: vec![6],
            decoder_hidden: vec![4],
            family,
        }
    }

    fn model(family: DecoderFamily, seed: u64) -> VaeComponent {
        VaeComponent::new(
            &arch(family),
            AdamConfig::default(),
            &mut rng::stream_rng(seed, 0),
        )
        .unwrap()
    }

    fn flat(c: &VaeComponent) -> Vec<f64> {
        let mut f = c.encoder.to_flat();
        f.extend(c.decoder.to_flat());
        f
    }

    fn load(c: &mut VaeComponent, f: &[f64]) {
        let ne = c.encoder.param_count();
        c.encoder.load_flat(&f[..ne]).unwrap();
        c.decoder.load_flat(&f[ne..]).unwrap();
    }

    const GAUSS: DecoderFamily = DecoderFamily::Gaussian {
        sigma: std::f64::consts::FRAC_1_SQRT_2,
    };

    #[test]
    fn zero_encoder_outputs_bias() {
        let mut c = model(GAUSS, 1);
        c.encoder.values_mut().for_each(|v| *v = 0.0);
        let last = c.encoder.layers().len() - 1;
        c.encoder.layers_mut()[last].bias = vec![0.0, 0.0, 0.3, -0.7];
        let (mu, lv) = c
            .encode(&DenseMatrix::from_rows(&[[1.0, 2.0, 3.0, 4.0, 5.0]]).unwrap())
            .unwrap();
        assert_eq!(mu.as_slice(), &[0.0, 0.0]);
        assert_eq!(lv.as_slice(), &[0.3, -0.7]);
    }

    #[test]
    fn encoder_log_variance_bounded_by_head_norm() {
        // tanh trunk outputs lie in [-1, 1], so |logvar_k| ≤ ‖w_k‖₁ + |b_k|.
        let c = model(GAUSS, 2);
        let mut r = rng::stream_rng(9, 0);
        let x = rng::standard_normal(&mut r, 20, 5).map(|v| 10.0 * v);
        let (mu, lv) = c.encode(&x).unwrap();
        assert!(mu.is_finite() && lv.is_finite());
        let head = &c.encoder.layers()[c.encoder.layers().len() - 1];
        for row in lv.row_iter() {
            for (k, &v) in row.iter().enumerate() {
                let w = head.weight.row(2 + k);
                let bound = w.iter().map(|a| a.abs()).sum::<f64>() + head.bias[2 + k].abs();
                assert!(v.abs() <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn reparameterize_cases() {
        let s = reparameterize(&[0.4, -1.0], &[0.2, 0.1], &[0.0, 0.0]);
        assert_eq!(s.z, vec![0.4, -1.0]);
        let s = reparameterize(&[0.0, 0.0], &[0.0, 0.0], &[0.3, -1.4]);
        assert_eq!(s.z, vec![0.3, -1.4]);
        assert_eq!(s.log_q, s.log_prior);
        let s = reparameterize(&[1.0], &[4f64.ln()], &[0.5]);
        assert!((s.z[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_loglik_at_zero_residual() {
        let c = model(GAUSS, 3);
        let z = [0.3, -0.2];
        let x = c
            .view()
            .decode_mean(&DenseMatrix::from_rows(&[z]).unwrap())
            .unwrap();
        let ll = c.decoder_loglik(x.row(0), &z).unwrap();
        let expected = -2.5 * std::f64::consts::PI.ln();
        assert!((ll - expected).abs() < 1e-12);
        // shifting one coordinate by 0.5 costs r/(2σ²) = 0.25 at σ² = ½
        let mut xs = x.row(0).to_vec();
        xs[0] += 0.5;
        let ll2 = c.decoder_loglik(&xs, &z).unwrap();
        assert!((ll - ll2 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_half_probability() {
        let mut c = model(DecoderFamily::Bernoulli, 4);
        c.decoder.values_mut().for_each(|v| *v = 0.0);
        let ll = c
            .decoder_loglik(&[1.0, 0.0, 1.0, 1.0, 0.0], &[0.5, 0.5])
            .unwrap();
        assert!((ll + 5.0 * 2f64.ln()).abs() < 1e-12);
        assert!(matches!(
            c.decoder_loglik(&[1.2, 0.0, 0.0, 0.0, 0.0], &[0.0, 0.0]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn closed_form_kl() {
        assert!((gaussian_kl(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
        assert_eq!(gaussian_kl(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn beta_scales_only_kl() {
        let mut c = model(GAUSS, 5);
        let x = [0.1, 0.2, -0.3, 0.4, 0.0];
        let e = [0.3, -0.1];
        let full = c.elbo(&x, &e).unwrap();
        c.beta = 0.0;
        let recon = c.elbo(&x, &e).unwrap();
        c.beta = 0.01;
        let small = c.elbo(&x, &e).unwrap();
        let kl = recon - full;
        assert!(kl > 0.0);
        assert!((recon - small - 0.01 * kl).abs() < 1e-10);
    }

    #[test]
    fn one_sample_iwae_equals_sampled_elbo() {
        let c = model(DecoderFamily::Bernoulli, 6);
        let x = DenseMatrix::from_rows(&[[1.0, 0.0, 1.0, 0.0, 1.0]]).unwrap();
        let e = DenseMatrix::from_rows(&[[0.7, -0.2]]).unwrap();
        let a = c.iwae_bound(x.row(0), &e).unwrap();
        let b = c.elbo_rows(&x, &e, KlMode::Sampled).unwrap()[0];
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn iwae_invariant_to_noise_order() {
        let c = model(GAUSS, 7);
        let x = [0.5, -0.5, 0.2, 0.1, 0.0];
        let noise = rng::standard_normal(&mut rng::stream_rng(3, 0), 12, 2);
        let rev: Vec<usize> = (0..12).rev().collect();
        let a = c.iwae_bound(&x, &noise).unwrap();
        let b = c.iwae_bound(&x, &noise.select_rows(&rev)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn prior_posterior_and_constant_decoder_make_iwae_equal_elbo() {
        let mut c = model(GAUSS, 8);
        c.encoder.values_mut().for_each(|v| *v = 0.0);
        let last = c.decoder.layers().len() - 1;
        c.decoder.layers_mut()[last]
            .weight
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let x = [0.5, -0.5, 0.2, 0.1, 0.0];
        let elbo = c.elbo(&x, &[0.0, 0.0]).unwrap();
        for m in [1, 5, 40] {
            let noise = rng::standard_normal(&mut rng::stream_rng(m as u64, 0), m, 2);
            let iw = c.iwae_bound(&x, &noise).unwrap();
            assert!((iw - elbo).abs() < 1e-10, "m={m}: {iw} vs {elbo}");
        }
    }

    #[test]
    fn generation_is_seeded() {
        let c = model(GAUSS, 9);
        assert_eq!(c.generate(10, 3).unwrap(), c.generate(10, 3).unwrap());
        assert_ne!(c.generate(10, 3).unwrap(), c.generate(10, 4).unwrap());
    }

    #[test]
    fn zero_decoder_generates_bias() {
        let mut c = model(DecoderFamily::Bernoulli, 10);
        c.decoder.values_mut().for_each(|v| *v = 0.0);
        let last = c.decoder.layers().len() - 1;
        c.decoder.layers_mut()[last].bias = vec![0.0, 1.0, -1.0, 2.0, 0.0];
        let g = c.generate(4, 1).unwrap();
        for row in g.row_iter() {
            assert!((row[1] - sigmoid(1.0)).abs() < 1e-15);
            assert!((row[3] - sigmoid(2.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn features_are_encoder_means() {
        let c = model(GAUSS, 11);
        let x = DenseMatrix::from_rows(&[[0.1, 0.2, 0.3, 0.4, 0.5], [0.1, 0.2, 0.3, 0.4, 0.5]])
            .unwrap();
        let f = c.feature_extract(&x).unwrap();
        assert_eq!(f.cols(), 2);
        assert_eq!(f.row(0), f.row(1));
        assert_eq!(f, c.encode(&x).unwrap().0);
    }

    fn check_objective(family: DecoderFamily, objective: Objective, seed: u64) -> f64 {
        let c = model(family, seed);
        let mut r = rng::stream_rng(seed, 1);
        let x = match family {
            DecoderFamily::Bernoulli => DenseMatrix::from_vec(
                3,
                5,
                (0..15).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect(),
            )
            .unwrap(),
            _ => rng::standard_normal(&mut r, 3, 5),
        };
        let noise = rng::standard_normal(&mut r, VaeComponent::noise_rows(objective, 3), 2);
        let f = |p: &[f64]| {
            let mut m = c.clone();
            load(&mut m, p);
            let (l, g) = m.loss_and_grads(&x, &noise, objective).unwrap();
            let mut flat = g[0].to_flat();
            flat.extend(g[1].to_flat());
            (l, flat)
        };
        grad_check(f, &flat(&c), 1e-5)
    }

    #[test]
    fn elbo_gradients_match_finite_differences() {
        for (i, fam) in [GAUSS, DecoderFamily::Bernoulli].into_iter().enumerate() {
            for obj in [
                Objective::Elbo,
                Objective::BetaElbo { beta: 0.01 },
                Objective::Iwae { m: 4 },
            ] {
                let err = check_objective(fam, obj, 20 + i as u64);
                assert!(err < 1e-4, "{fam:?} {obj:?}: {err}");
            }
        }
    }

    #[test]
    fn loss_is_negated_mean_elbo() {
        let c = model(GAUSS, 12);
        let mut r = rng::stream_rng(1, 1);
        let x = rng::standard_normal(&mut r, 4, 5);
        let noise = rng::standard_normal(&mut r, 4, 2);
        let (loss, _) = c.loss_and_grads(&x, &noise, Objective::Elbo).unwrap();
        let rows = c.elbo_rows(&x, &noise, KlMode::ClosedForm).unwrap();
        let mean = rows.iter().sum::<f64>() / 4.0;
        assert!((loss + mean).abs() < 1e-10);
    }

    #[test]
    fn frozen_component_is_not_updated() {
        let mut c = model(GAUSS, 13);
        c.frozen = true;
        let before = c.digest();
        let x = rng::standard_normal(&mut rng::stream_rng(2, 0), 4, 5);
        c.train_step(&x, Objective::Elbo, &mut rng::stream_rng(2, 1))
            .unwrap();
        assert_eq!(before, c.digest());
    }

    #[test]
    fn training_reduces_loss() {
        let mut c = model(GAUSS, 14);
        let x = rng::standard_normal(&mut rng::stream_rng(4, 0), 32, 5).map(|v| 0.3 * v + 1.0);
        let mut r = rng::stream_rng(4, 1);
        let first = c.train_step(&x, Objective::Elbo, &mut r).unwrap();
        let mut last = first;
        for _ in 0..300 {
            last = c.train_step(&x, Objective::Elbo, &mut r).unwrap();
        }
        assert!(last < first - 1.0, "{first} -> {last}");
    }
}
