//! Optimal-transport diagnostics: exact squared 2-Wasserstein distances
//! between empirical distributions, a closed-form Gaussian reference, and
//! the ELBO/transport bound terms for trained models.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{squared_distance, DenseMatrix};
use crate::rng::{self, stream_rng};
use crate::vae::{gaussian_kl, DecoderFamily, KlMode, VaeView};

/// Uniformly weighted sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDistribution {
    samples: DenseMatrix,
}

impl EmpiricalDistribution {
    pub fn new(samples: DenseMatrix) -> Result<Self> {
        if samples.rows() == 0 {
            return Err(Error::Input(
                "empirical distribution needs at least one sample".into(),
            ));
        }
        if !samples.is_finite() {
            return Err(Error::NonFinite("empirical distribution samples".into()));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &DenseMatrix {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }
}

/// Minimum-cost perfect assignment of rows to columns for a square or wide
/// cost matrix. Returns the column of every row and the total cost.
pub fn assignment(cost: &DenseMatrix) -> Result<(Vec<usize>, f64)> {
    let (n, m) = (cost.rows(), cost.cols());
    if n > m {
        return Err(Error::dim("assignment columns", n, m));
    }
    // Shortest augmenting path with dual potentials, 1-based with a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            let crow = cost.row(i0 - 1);
            for j in 1..=m {
                if !used[j] {
                    let cur = crow[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            cols[p[j] - 1] = j - 1;
        }
    }
    let total = cols.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    Ok((cols, total))
}

fn cost_matrix(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let mut c = DenseMatrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            c[(i, j)] = squared_distance(a.row(i), b.row(j));
        }
    }
    c
}

/// Squared 2-Wasserstein distance between two empirical distributions.
/// Unequal counts are reduced by subsampling the larger set (seed 0).
pub fn exact_w2(p: &EmpiricalDistribution, q: &EmpiricalDistribution) -> Result<f64> {
    exact_w2_seeded(p, q, 0)
}

pub fn exact_w2_seeded(
    p: &EmpiricalDistribution,
    q: &EmpiricalDistribution,
    seed: u64,
) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::dim("exact_w2 dimension", p.dim(), q.dim()));
    }
    let n = p.len().min(q.len());
    let shrink = |d: &EmpiricalDistribution| -> DenseMatrix {
        if d.len() == n {
            d.samples.clone()
        } else {
            let mut idx = sample(&mut stream_rng(seed, 1), d.len(), n).into_vec();
            idx.sort_unstable();
            d.samples.select_rows(&idx)
        }
    };
    let (a, b) = (shrink(p), shrink(q));
    let (cols, _) = assignment(&cost_matrix(&a, &b))?;
    // Sorted summation so that swapping the arguments gives the same bits.
    let mut pairs: Vec<f64> = cols
        .iter()
        .enumerate()
        .map(|(i, &j)| squared_distance(a.row(i), b.row(j)))
        .collect();
    pairs.sort_unstable_by(f64::total_cmp);
    Ok(pairs.iter().sum::<f64>() / n as f64)
}

fn check_psd(name: &str, c: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let scale = c.amax().max(1.0);
    if (c - c.transpose()).amax() > 1e-9 * scale {
        return Err(Error::Input(format!("{name} is not symmetric")));
    }
    let eig = SymmetricEigen::new(c.clone());
    if eig.eigenvalues.iter().any(|&l| l < -1e-9 * scale) {
        return Err(Error::Input(format!(
            "{name} is not positive semi-definite"
        )));
    }
    Ok(eig)
}

fn psd_sqrt(eig: SymmetricEigen<f64, nalgebra::Dyn>) -> DMatrix<f64> {
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Closed-form squared 2-Wasserstein distance between two Gaussians.
pub fn gaussian_w2_oracle(
    m1: &[f64],
    c1: &DenseMatrix,
    m2: &[f64],
    c2: &DenseMatrix,
) -> Result<f64> {
    let d = m1.len();
    if m2.len() != d {
        return Err(Error::dim("gaussian mean", d, m2.len()));
    }
    for c in [c1, c2] {
        if c.rows() != d || c.cols() != d {
            return Err(Error::dim(
                "gaussian covariance",
                d * d,
                c.rows() * c.cols(),
            ));
        }
    }
    let a = DMatrix::from_row_slice(d, d, c1.as_slice());
    let b = DMatrix::from_row_slice(d, d, c2.as_slice());
    let ra = psd_sqrt(check_psd("first covariance", &a)?);
    check_psd("second covariance", &b)?;
    let mut mid = &ra * &b * &ra;
    mid = (&mid + mid.transpose()) * 0.5;
    let cross = psd_sqrt(SymmetricEigen::new(mid));
    let mean: f64 = squared_distance(m1, m2);
    Ok((mean + (a + b - cross * 2.0).trace()).max(0.0))
}

/// Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
}

impl McEstimate {
    pub fn from_values(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            se: (var / n).sqrt(),
        }
    }
}

/// Sampling controls shared by every report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagOptions {
    /// Reparameterization draws per sample in ELBO expectations.
    pub elbo_samples: usize,
    pub seed: u64,
}

impl Default for DiagOptions {
    fn default() -> Self {
        Self {
            elbo_samples: 16,
            seed: 0,
        }
    }
}

const NOISE_STREAM: u64 = 11;
const GEN_STREAM: u64 = 12;

fn latent_noise(opts: &DiagOptions, tag: u64, rows: usize, dz: usize) -> DenseMatrix {
    rng::standard_normal(
        &mut stream_rng(rng::derive_seed(opts.seed, NOISE_STREAM, tag), 0),
        rows,
        dz,
    )
}

/// `G*(z)`, `z ~ N(0, I)`, `n` samples.
pub fn generated(
    view: &VaeView<'_>,
    n: usize,
    opts: &DiagOptions,
    tag: u64,
) -> Result<EmpiricalDistribution> {
    let mut r = stream_rng(rng::derive_seed(opts.seed, GEN_STREAM, tag), 0);
    EmpiricalDistribution::new(view.generate_mean(n, &mut r)?)
}

/// Per-sample `‖x − G*(z)‖²` with `z` drawn from `q(z|x)` by `noise`.
fn residuals(view: &VaeView<'_>, x: &DenseMatrix, noise: &DenseMatrix) -> Result<Vec<f64>> {
    if noise.rows() != x.rows() || noise.cols() != view.latent_dim() {
        return Err(Error::dim("upper bound noise rows", x.rows(), noise.rows()));
    }
    let (mu, lv) = view.encode(x)?;
    let mut z = DenseMatrix::zeros(x.rows(), view.latent_dim());
    for i in 0..x.rows() {
        for k in 0..z.cols() {
            z[(i, k)] = mu[(i, k)] + (0.5 * lv[(i, k)]).exp() * noise[(i, k)];
        }
    }
    let g = view.decode_mean(&z)?;
    Ok((0..x.rows())
        .map(|i| squared_distance(x.row(i), g.row(i)))
        .collect())
}

/// `E_x E_{q(z|x)} ‖x − G*(z)‖²` with one noise row per target sample.
pub fn w2_upper_bound(
    view: &VaeView<'_>,
    target: &EmpiricalDistribution,
    noise: &DenseMatrix,
) -> Result<McEstimate> {
    Ok(McEstimate::from_values(&residuals(
        view,
        &target.samples,
        noise,
    )?))
}

/// Mean ELBO (closed-form KL) over `x`, averaged over `opts.elbo_samples` draws.
pub fn mean_elbo(view: &VaeView<'_>, x: &DenseMatrix, opts: &DiagOptions, tag: u64) -> Result<f64> {
    let s = opts.elbo_samples.max(1);
    let mut total = 0.0;
    for k in 0..s {
        let noise = latent_noise(
            opts,
            tag.wrapping_mul(1_000_003).wrapping_add(k as u64),
            x.rows(),
            view.latent_dim(),
        );
        total += view
            .elbo_rows(x, &noise, KlMode::ClosedForm)?
            .iter()
            .sum::<f64>();
    }
    Ok(total / (s * x.rows()) as f64)
}

/// Nonnegative slack term combining posterior KL and the gap between the
/// encoder-coupled cost and the optimal transport cost.
pub fn f_tilde(
    view: &VaeView<'_>,
    memory: &EmpiricalDistribution,
    n_gen: usize,
    opts: &DiagOptions,
) -> Result<f64> {
    let w = exact_w2(memory, &generated(view, n_gen, opts, 1)?)?;
    f_tilde_with(view, memory, w, opts)
}

fn f_tilde_with(
    view: &VaeView<'_>,
    memory: &EmpiricalDistribution,
    w_m_g: f64,
    opts: &DiagOptions,
) -> Result<f64> {
    let x = memory.samples();
    let (mu, lv) = view.encode(x)?;
    let kl = (0..x.rows())
        .map(|i| gaussian_kl(mu.row(i), lv.row(i)))
        .sum::<f64>()
        / x.rows() as f64;
    let s = opts.elbo_samples.max(1);
    let mut cost = 0.0;
    for k in 0..s {
        let noise = latent_noise(opts, 2_000_000 + k as u64, x.rows(), view.latent_dim());
        cost += residuals(view, x, &noise)?.iter().sum::<f64>();
    }
    cost /= (s * x.rows()) as f64;
    Ok(kl.max(0.0) + (-cost - w_m_g).abs())
}

/// Every term of the source/target ELBO bound; field names are emitted as is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub elbo_source: f64,
    pub elbo_target: f64,
    pub w_m_g: f64,
    pub w_x_m: f64,
    pub f_tilde: f64,
    pub rhs: f64,
    pub lhs: f64,
    pub gap: f64,
}

pub const HALF_LN_PI: f64 = 0.572_364_942_924_700_1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub w_x_g: f64,
}

/// Target ELBO against `−½ log π − W⋆(target, G)`; requires the Gaussian
/// decoder with `σ = 1/√2`.
pub fn theorem1_report(
    view: &VaeView<'_>,
    target: &EmpiricalDistribution,
    opts: &DiagOptions,
) -> Result<Theorem1Report> {
    match view.family() {
        DecoderFamily::Gaussian { sigma }
            if (sigma - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12 => {}
        f => {
            return Err(Error::Config(format!(
                "this report needs a gaussian decoder with sigma = 1/sqrt(2), got {f:?}"
            )))
        }
    }
    let lhs = mean_elbo(view, target.samples(), opts, 3)?;
    let w = exact_w2(target, &generated(view, target.len(), opts, 3)?)?;
    let rhs = -HALF_LN_PI - w;
    Ok(Theorem1Report {
        lhs,
        rhs,
        gap: rhs - lhs,
        w_x_g: w,
    })
}

/// Source (memory) and target bound, assembled term by term.
pub fn theorem2_report(
    view: &VaeView<'_>,
    memory: &EmpiricalDistribution,
    target: &EmpiricalDistribution,
    opts: &DiagOptions,
) -> Result<BoundReport> {
    if memory.dim() != target.dim() {
        return Err(Error::dim("memory vs target", target.dim(), memory.dim()));
    }
    let elbo_source = mean_elbo(view, memory.samples(), opts, 1)?;
    let elbo_target = if memory == target {
        elbo_source
    } else {
        mean_elbo(view, target.samples(), opts, 2)?
    };
    let w_m_g = exact_w2(memory, &generated(view, memory.len(), opts, 1)?)?;
    let w_x_m = exact_w2(target, memory)?;
    let f_tilde = f_tilde_with(view, memory, w_m_g, opts)?;
    let rhs = elbo_source + 2.0 * w_m_g - w_x_m + f_tilde;
    Ok(BoundReport {
        elbo_source,
        elbo_target,
        w_m_g,
        w_x_m,
        f_tilde,
        rhs,
        lhs: elbo_target,
        gap: rhs - elbo_target,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetBound {
    pub target: usize,
    /// Component whose bound was the largest (always 0 for a single model).
    pub component: usize,
    pub report: BoundReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub per_target: Vec<TargetBound>,
    pub aggregate: f64,
}

/// Sum over targets of the bound. With several `(model, memory)` pairs each
/// target takes the maximum over pairs; one pair gives the single-model sum.
pub fn lemma_bounds(
    models: &[(VaeView<'_>, EmpiricalDistribution)],
    targets: &[EmpiricalDistribution],
    opts: &DiagOptions,
) -> Result<LemmaReport> {
    if models.is_empty() {
        return Err(Error::Input("lemma bounds need at least one model".into()));
    }
    let mut per_target = Vec::with_capacity(targets.len());
    for (t, target) in targets.iter().enumerate() {
        let mut best: Option<TargetBound> = None;
        for (j, (view, memory)) in models.iter().enumerate() {
            let report = theorem2_report(view, memory, target, opts)?;
            if best.as_ref().is_none_or(|b| report.rhs > b.report.rhs) {
                best = Some(TargetBound {
                    target: t,
                    component: j,
                    report,
                });
            }
        }
        per_target.push(best.expect("non-empty"));
    }
    let aggregate = per_target.iter().map(|b| b.report.rhs).sum();
    Ok(LemmaReport {
        per_target,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::AdamConfig;
    use crate::rng::standard_normal;
    use crate::vae::{VaeArch, VaeComponent};

    fn emp(m: DenseMatrix) -> EmpiricalDistribution {
        EmpiricalDistribution::new(m).unwrap()
    }

    fn brute(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        fn rec(k: usize, perm: &mut Vec<usize>, c: &DenseMatrix, best: &mut f64) {
            if k == perm.len() {
                let s: f64 = perm.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum();
                *best = best.min(s);
                return;
            }
            for i in k..perm.len() {
                perm.swap(k, i);
                rec(k + 1, perm, c, best);
                perm.swap(k, i);
            }
        }
        let c = cost_matrix(a, b);
        let mut best = f64::INFINITY;
        rec(0, &mut (0..a.rows()).collect(), &c, &mut best);
        best / a.rows() as f64
    }

    #[test]
    fn assignment_matches_permutations() {
        for t in 0..30u64 {
            let n = 1 + (t as usize % 6);
            let a = standard_normal(&mut stream_rng(t, 1), n, 3);
            let b = standard_normal(&mut stream_rng(t, 2), n, 3);
            let w = exact_w2(&emp(a.clone()), &emp(b.clone())).unwrap();
            assert!((w - brute(&a, &b)).abs() < 1e-12, "instance {t}");
        }
    }

    #[test]
    fn wide_assignment() {
        let c = DenseMatrix::from_rows(&[[4.0, 1.0, 3.0], [2.0, 0.0, 5.0]]).unwrap();
        let (cols, total) = assignment(&c).unwrap();
        assert_eq!(cols, vec![1, 0]);
        assert_eq!(total, 3.0);
        assert!(assignment(&c.transpose()).is_err());
    }

    #[test]
    fn point_masses_and_self_distance() {
        let a = emp(DenseMatrix::from_rows(&[[0.0, 0.0]]).unwrap());
        let b = emp(DenseMatrix::from_rows(&[[3.0, 4.0]]).unwrap());
        assert_eq!(exact_w2(&a, &b).unwrap(), 25.0);
        let x = emp(standard_normal(&mut stream_rng(0, 0), 20, 2));
        assert_eq!(exact_w2(&x, &x).unwrap(), 0.0);
        let y = emp(DenseMatrix::zeros(3, 3));
        assert!(exact_w2(&x, &y).is_err());
    }

    #[test]
    fn unequal_counts_subsample() {
        let a = emp(standard_normal(&mut stream_rng(0, 0), 7, 2));
        let b = emp(standard_normal(&mut stream_rng(1, 0), 4, 2));
        let w = exact_w2(&a, &b).unwrap();
        assert_eq!(w, exact_w2(&a, &b).unwrap());
        assert!(w > 0.0);
    }

    #[test]
    fn gaussian_oracle_cases() {
        let c = DenseMatrix::from_rows(&[[2.0, 0.5], [0.5, 1.0]]).unwrap();
        assert!(
            gaussian_w2_oracle(&[1.0, 2.0], &c, &[1.0, 2.0], &c)
                .unwrap()
                .abs()
                < 1e-12
        );
        let w = gaussian_w2_oracle(&[0.0, 0.0], &c, &[3.0, 4.0], &c).unwrap();
        assert!((w - 25.0).abs() < 1e-10);
        // 1-D: (m1-m2)² + (s1-s2)²
        let w = gaussian_w2_oracle(
            &[0.0],
            &DenseMatrix::from_rows(&[[4.0]]).unwrap(),
            &[1.0],
            &DenseMatrix::from_rows(&[[9.0]]).unwrap(),
        )
        .unwrap();
        assert!((w - 2.0).abs() < 1e-12);
        let bad = DenseMatrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        assert!(gaussian_w2_oracle(&[0.0, 0.0], &bad, &[0.0, 0.0], &c).is_err());
    }

    fn model(sigma: f64) -> VaeComponent {
        let arch = VaeArch {
            data_dim: 3,
            latent_dim: 2,
            encoder_hidden: vec![4],
            decoder_hidden: vec![4],
            family: DecoderFamily::Gaussian { sigma },
        };
        VaeComponent::new(&arch, AdamConfig::default(), &mut stream_rng(5, 0)).unwrap()
    }

    #[test]
    fn report_invariants() {
        let c = model(std::f64::consts::FRAC_1_SQRT_2);
        let v = c.view();
        let x = emp(standard_normal(&mut stream_rng(2, 0), 12, 3));
        let opts = DiagOptions::default();
        let r = theorem2_report(&v, &x, &x, &opts).unwrap();
        assert_eq!(r.w_x_m, 0.0);
        assert_eq!(r.elbo_source, r.elbo_target);
        assert!((r.gap - (2.0 * r.w_m_g + r.f_tilde)).abs() < 1e-9);
        assert!(r.w_m_g >= 0.0 && r.f_tilde >= 0.0);
        assert_eq!(r, theorem2_report(&v, &x, &x, &opts).unwrap());
        let t1 = theorem1_report(&v, &x, &opts).unwrap();
        assert!((t1.rhs + HALF_LN_PI + t1.w_x_g).abs() < 1e-12);
        assert!(theorem1_report(&model(1.0).view(), &x, &opts).is_err());
        let l = lemma_bounds(&[(c.view(), x.clone())], std::slice::from_ref(&x), &opts).unwrap();
        assert_eq!(l.aggregate, r.rhs);
    }

    #[test]
    fn half_log_pi() {
        assert!((HALF_LN_PI - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_residual_model_has_zero_upper_bound() {
        // Decoder ignores z and outputs the single data point exactly.
        let mut c = model(1.0);
        for l in c.decoder.layers_mut() {
            l.weight.as_mut_slice().iter_mut().for_each(|w| *w = 0.0);
        }
        let last = c.decoder.layers().len() - 1;
        c.decoder.layers_mut()[last].bias = vec![1.0, -2.0, 0.5];
        let x = emp(DenseMatrix::from_rows(&[[1.0, -2.0, 0.5], [1.0, -2.0, 0.5]]).unwrap());
        let noise = standard_normal(&mut stream_rng(0, 0), 2, 2);
        let u = w2_upper_bound(&c.view(), &x, &noise).unwrap();
        assert_eq!(u.mean, 0.0);
    }
}
