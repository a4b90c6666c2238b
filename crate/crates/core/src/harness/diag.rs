use sha2::{Digest, Sha256};

use super::learner::Learner;
use super::metrics::{BoundRecord, LemmaRecord, Record, TransportRecord};
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::ot::{
    exact_w2, generated, lemma_bounds, theorem1_report, w2_upper_bound, DiagOptions,
    EmpiricalDistribution, McEstimate,
};
use crate::rng;
use crate::stream::Dataset;
use crate::vae::{DecoderFamily, KlMode};

const TRANSPORT_REPLICATES: usize = 5;

/// Held-out targets: one per class (first `per_target` rows of each) when
/// labels exist, otherwise one target of the first `per_target` rows.
pub fn split_targets(
    test: &Dataset,
    per_target: usize,
) -> Result<Vec<(usize, EmpiricalDistribution)>> {
    if test.is_empty() {
        return Err(Error::Input("empty target set".into()));
    }
    match &test.labels {
        Some(_) => test
            .classes()
            .into_iter()
            .map(|c| {
                let rows: Vec<usize> = test.class_rows(c).into_iter().take(per_target).collect();
                Ok((
                    c,
                    EmpiricalDistribution::new(test.samples.select_rows(&rows))?,
                ))
            })
            .collect(),
        None => {
            let rows: Vec<usize> = (0..test.len().min(per_target)).collect();
            Ok(vec![(
                0,
                EmpiricalDistribution::new(test.samples.select_rows(&rows))?,
            )])
        }
    }
}

/// Union of all targets.
pub fn target_mixture(targets: &[(usize, EmpiricalDistribution)]) -> Result<EmpiricalDistribution> {
    let mut all = targets[0].1.samples().clone();
    for (_, t) in &targets[1..] {
        all = all.vstack(t.samples())?;
    }
    EmpiricalDistribution::new(all)
}

pub fn matrix_digest(m: &DenseMatrix) -> String {
    let mut h = Sha256::new();
    for v in m.as_slice() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Whether the ELBO transport report applies: Gaussian decoder with σ = 1/√2.
pub fn is_theorem1_family(f: DecoderFamily) -> bool {
    matches!(f, DecoderFamily::Gaussian { sigma } if (sigma - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12)
}

/// Bound records for every target. `memories[j]` is the memory component
/// `j` converged on; a mixture takes the best component per target.
pub fn bound_records(
    learner: &Learner,
    memories: &[DenseMatrix],
    targets: &[(usize, EmpiricalDistribution)],
    step: u64,
    opts: &DiagOptions,
) -> Result<Vec<Record>> {
    let views = learner.views();
    if views.is_empty() {
        return Err(Error::Config(
            "bound diagnostics need a generative learner".into(),
        ));
    }
    if memories.len() != views.len() {
        return Err(Error::Internal(
            "one memory per component is required".into(),
        ));
    }
    let mut pairs = Vec::new();
    for (v, m) in views.iter().zip(memories) {
        pairs.push((v.clone(), EmpiricalDistribution::new(m.clone())?));
    }
    let target_sets: Vec<EmpiricalDistribution> = targets.iter().map(|(_, t)| t.clone()).collect();
    let lemma = lemma_bounds(&pairs, &target_sets, opts)?;
    let mut out = Vec::new();
    for (tb, (label, target)) in lemma.per_target.iter().zip(targets) {
        let view = &views[tb.component];
        let mut r = rng::stream_rng(rng::derive_seed(opts.seed, 0xB0, *label as u64), 0);
        let noise = rng::standard_normal(&mut r, target.len(), view.latent_dim());
        let ub = w2_upper_bound(view, target, &noise)?;
        let w_x_g = exact_w2(target, &generated(view, target.len(), opts, 3)?)?;
        let t1 = if is_theorem1_family(view.family()) {
            Some(theorem1_report(view, target, opts)?)
        } else {
            None
        };
        let rep = tb.report;
        out.push(Record::Bound(BoundRecord {
            step,
            target: *label,
            component: tb.component,
            elbo_source: rep.elbo_source,
            elbo_target: rep.elbo_target,
            w_m_g: rep.w_m_g,
            w_x_m: rep.w_x_m,
            f_tilde: rep.f_tilde,
            rhs: rep.rhs,
            lhs: rep.lhs,
            gap: rep.gap,
            upper_bound: ub.mean,
            upper_bound_se: ub.se,
            w_x_g,
            theorem1_lhs: t1.map(|t| t.lhs),
            theorem1_rhs: t1.map(|t| t.rhs),
        }));
    }
    let single_component = if pairs.len() > 1 {
        pairs
            .iter()
            .map(|p| Ok(lemma_bounds(std::slice::from_ref(p), &target_sets, opts)?.aggregate))
            .collect::<Result<Vec<f64>>>()?
    } else {
        vec![lemma.aggregate]
    };
    out.push(Record::Lemma(LemmaRecord {
        step,
        components: pairs.len(),
        aggregate: lemma.aggregate,
        single_component,
    }));
    Ok(out)
}

/// Encoder-coupled cost vs exact transport cost to generator samples on the
/// whole target. A mixture routes each target row to its best-ELBO
/// component and draws generator samples from each component in proportion
/// to the rows routed to it, keeping the counts matched.
pub fn transport_record(
    learner: &Learner,
    target: &EmpiricalDistribution,
    step: u64,
    opts: &DiagOptions,
) -> Result<TransportRecord> {
    let views = learner.views();
    if views.is_empty() {
        return Err(Error::Config(
            "transport diagnostics need a generative learner".into(),
        ));
    }
    let x = target.samples();
    let dz = views[0].latent_dim();
    let mut r = rng::stream_rng(rng::derive_seed(opts.seed, 0xC0, 0), 0);
    let route_noise = rng::standard_normal(&mut r, x.rows(), dz);
    let mut best = vec![(0usize, f64::NEG_INFINITY); x.rows()];
    if views.len() > 1 {
        for (j, v) in views.iter().enumerate() {
            for (b, e) in best
                .iter_mut()
                .zip(v.elbo_rows(x, &route_noise, KlMode::ClosedForm)?)
            {
                if e > b.1 {
                    *b = (j, e);
                }
            }
        }
    }
    let noise = rng::standard_normal(&mut r, x.rows(), dz);
    let mut costs = Vec::with_capacity(x.rows());
    let mut routed: Vec<(usize, usize)> = Vec::new();
    for (j, v) in views.iter().enumerate() {
        let rows: Vec<usize> = (0..x.rows()).filter(|&i| best[i].0 == j).collect();
        if rows.is_empty() {
            continue;
        }
        let part = EmpiricalDistribution::new(x.select_rows(&rows))?;
        costs.push((
            w2_upper_bound(v, &part, &noise.select_rows(&rows))?,
            rows.len(),
        ));
        routed.push((j, rows.len()));
    }
    let n = x.rows() as f64;
    let mean = costs.iter().map(|(e, k)| e.mean * *k as f64).sum::<f64>() / n;
    // Standard error of a stratified mean.
    let se = costs
        .iter()
        .map(|(e, k)| (e.se * *k as f64 / n).powi(2))
        .sum::<f64>()
        .sqrt();
    // Independent generator draws give the transport side its own error bar.
    let mut w = Vec::with_capacity(TRANSPORT_REPLICATES);
    for rep in 0..TRANSPORT_REPLICATES {
        let mut gen: Option<DenseMatrix> = None;
        for &(j, k) in &routed {
            let tag = 100 + (rep * views.len() + j) as u64;
            let g = generated(&views[j], k, opts, tag)?.samples().clone();
            gen = Some(match gen {
                None => g,
                Some(acc) => acc.vstack(&g)?,
            });
        }
        w.push(exact_w2(
            target,
            &EmpiricalDistribution::new(gen.expect("at least one routed row"))?,
        )?);
    }
    let w_est = McEstimate::from_values(&w);
    Ok(TransportRecord {
        step,
        samples: x.rows(),
        upper_bound: mean,
        upper_bound_se: se,
        w_x_g: w_est.mean,
        w_x_g_se: w_est.se,
    })
}

/// Every bound record for `learner` against held-out `test` data plus the
/// whole-target transport check. `live` is the current long-term memory.
pub fn diagnostics(
    learner: &Learner,
    live: &DenseMatrix,
    test: &Dataset,
    per_target: usize,
    step: u64,
    opts: &DiagOptions,
) -> Result<Vec<Record>> {
    if live.rows() == 0 {
        return Err(Error::Input("diagnostics need a non-empty memory".into()));
    }
    let targets = split_targets(test, per_target)?;
    let mixture = target_mixture(&targets)?;
    let memories = learner.component_memories(live)?;
    let mut out = bound_records(learner, &memories, &targets, step, opts)?;
    out.push(Record::Transport(transport_record(
        learner, &mixture, step, opts,
    )?));
    Ok(out)
}
