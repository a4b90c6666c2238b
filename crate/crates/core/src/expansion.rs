//! Dynamic mixture of VAE components: shared encoder/decoder trunks, one
//! head pair per component, loss-shift expansion, freezing and memory
//! clearing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryBuffer;
use crate::numerics::{AdamConfig, AdamState, DenseMatrix, MlpParams};
use crate::rng::{self, Rng64};
use crate::vae::{DecoderFamily, KlMode, Objective, VaeArch, VaeComponent, VaeOptimizer, VaeView};

pub const DEFAULT_K_MAX: usize = 30;

/// When the loss reference used by the expansion test moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RLastMode {
    /// Updated to the latest loss at every check.
    #[default]
    EveryCheck,
    /// Fixed at the first check after a component is created.
    AtCreation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionEvent {
    pub step_index: u64,
    pub components_before: usize,
    pub components_after: usize,
    pub r_i: f64,
    pub r_last: f64,
    /// Joint memory of the component that froze, taken before clearing.
    pub memory: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureHead {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub frozen: bool,
    pub optimizer: VaeOptimizer,
}

impl MixtureHead {
    fn new(encoder: MlpParams, decoder: MlpParams, adam: AdamConfig) -> Self {
        let optimizer = VaeOptimizer {
            encoder: AdamState::new(&encoder, adam),
            decoder: AdamState::new(&decoder, adam),
        };
        Self {
            encoder,
            decoder,
            frozen: false,
            optimizer,
        }
    }

    pub fn digest(&self) -> String {
        format!("{}:{}", self.encoder.digest(), self.decoder.digest())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub arch: VaeArch,
    pub adam: AdamConfig,
    pub encoder_trunk: MlpParams,
    pub decoder_trunk: MlpParams,
    pub trunk_optimizer: VaeOptimizer,
    pub trunks_frozen: bool,
    pub heads: Vec<MixtureHead>,
    pub active_index: usize,
    pub k_max: usize,
    pub r_last: Option<f64>,
    pub r_last_mode: RLastMode,
    pub events: Vec<ExpansionEvent>,
    pub warnings: Vec<String>,
}

impl MixtureModel {
    /// Parameters are drawn in the same order as [`VaeComponent::new`], so a
    /// one-component mixture starts from the same weights as a single VAE.
    pub fn new(arch: &VaeArch, adam: AdamConfig, k_max: usize, rng: &mut Rng64) -> Result<Self> {
        arch.validate()?;
        if k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        let encoder_trunk = arch.encoder_trunk(rng)?;
        let encoder_head = arch.encoder_head(rng)?;
        let decoder_trunk = arch.decoder_trunk(rng)?;
        let decoder_head = arch.decoder_head(rng)?;
        let trunk_optimizer = VaeOptimizer {
            encoder: AdamState::new(&encoder_trunk, adam),
            decoder: AdamState::new(&decoder_trunk, adam),
        };
        Ok(Self {
            arch: arch.clone(),
            adam,
            encoder_trunk,
            decoder_trunk,
            trunk_optimizer,
            trunks_frozen: false,
            heads: vec![MixtureHead::new(encoder_head, decoder_head, adam)],
            active_index: 0,
            k_max,
            r_last: None,
            r_last_mode: RLastMode::EveryCheck,
            events: Vec::new(),
            warnings: Vec::new(),
        })
    }

    pub fn component_count(&self) -> usize {
        self.heads.len()
    }

    pub fn family(&self) -> DecoderFamily {
        self.arch.family
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.heads.len() {
            return Err(Error::Input(format!(
                "component index {i} out of range for {} components",
                self.heads.len()
            )));
        }
        Ok(())
    }

    /// Component `i` as trunk→head chains.
    pub fn component_view(&self, i: usize) -> Result<VaeView<'_>> {
        self.check_index(i)?;
        let h = &self.heads[i];
        Ok(VaeView {
            enc: vec![&self.encoder_trunk, &h.encoder],
            dec: vec![&self.decoder_trunk, &h.decoder],
            family: self.arch.family,
            beta: 1.0,
        })
    }

    /// Component `i` materialized as a standalone VAE (frozen flag copied).
    pub fn component(&self, i: usize) -> Result<VaeComponent> {
        self.check_index(i)?;
        let h = &self.heads[i];
        let mut c = VaeComponent::from_parts(
            self.encoder_trunk.then(&h.encoder)?,
            self.decoder_trunk.then(&h.decoder)?,
            self.arch.family,
            self.adam,
        )?;
        c.frozen = h.frozen;
        Ok(c)
    }

    /// Closed-form-KL ELBO of component `i` per row, one noise row each.
    pub fn mixture_elbo(&self, i: usize, x: &DenseMatrix, noise: &DenseMatrix) -> Result<Vec<f64>> {
        self.component_view(i)?
            .elbo_rows(x, noise, KlMode::ClosedForm)
    }

    /// Negative ELBO averaged over every component and every row of
    /// `memory`; the same noise rows are used for all components.
    pub fn mixture_loss_r(&self, memory: &DenseMatrix, noise: &DenseMatrix) -> Result<f64> {
        if memory.rows() == 0 {
            return Err(Error::Input(
                "loss over an empty memory is undefined".into(),
            ));
        }
        let k = self.heads.len() as f64;
        let n = memory.rows() as f64;
        let mut total = 0.0;
        for i in 0..self.heads.len() {
            total += self.mixture_elbo(i, memory, noise)?.iter().sum::<f64>();
        }
        Ok(-total / (k * n))
    }

    /// Loss-shift test. Returns true iff a reference exists, the shift
    /// strictly exceeds `lambda2`, and there is room for another component.
    pub fn expansion_check(&mut self, r_i: f64, lambda2: f64) -> bool {
        let Some(r_last) = self.r_last else {
            self.r_last = Some(r_i);
            return false;
        };
        let shifted = (r_i - r_last).abs() > lambda2;
        if self.r_last_mode == RLastMode::EveryCheck {
            self.r_last = Some(r_i);
        }
        if shifted && self.heads.len() >= self.k_max {
            self.warnings.push(format!(
                "expansion suppressed at k_max = {}: |{r_i} - {r_last}| > {lambda2}",
                self.k_max
            ));
            return false;
        }
        shifted
    }

    /// Freezes the active component (and the trunks), appends a freshly
    /// initialized head and empties both memories. The loss reference is
    /// reset, so the first check of the new component only re-anchors it.
    pub fn expand(
        &mut self,
        stm: &mut MemoryBuffer,
        ltm: &mut MemoryBuffer,
        step_index: u64,
        r_i: f64,
        rng: &mut Rng64,
    ) -> Result<Option<ExpansionEvent>> {
        let before = self.heads.len();
        if before >= self.k_max {
            self.warnings
                .push(format!("expansion suppressed at k_max = {}", self.k_max));
            return Ok(None);
        }
        let memory = stm.samples().vstack(&ltm.samples())?;
        self.heads[self.active_index].frozen = true;
        self.trunks_frozen = true;
        let enc = self.arch.encoder_head(rng)?;
        let dec = self.arch.decoder_head(rng)?;
        self.heads.push(MixtureHead::new(enc, dec, self.adam));
        self.active_index = before;
        stm.clear();
        ltm.clear();
        let event = ExpansionEvent {
            step_index,
            components_before: before,
            components_after: before + 1,
            r_i,
            r_last: self.r_last.unwrap_or(r_i),
            memory,
        };
        self.r_last = None;
        self.events.push(event.clone());
        Ok(Some(event))
    }

    /// Concatenated encoder means of all components, in creation order.
    pub fn augmented_features(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = self.component_view(0)?.features(x)?;
        for i in 1..self.heads.len() {
            out = out.hstack(&self.component_view(i)?.features(x)?)?;
        }
        Ok(out)
    }

    /// Per-row IWAE score of every component (`m` noise rows per input).
    pub fn component_scores(&self, x: &DenseMatrix, noise: &DenseMatrix) -> Result<Vec<Vec<f64>>> {
        (0..self.heads.len())
            .map(|i| self.component_view(i)?.iwae_rows(x, noise))
            .collect()
    }

    /// Component with the highest IWAE bound for `x`; ties go to the earliest.
    pub fn select_component(&self, x: &[f64], noise_set: &DenseMatrix) -> Result<(usize, f64)> {
        let mut best = (0, f64::NEG_INFINITY);
        for i in 0..self.heads.len() {
            let s = self.component_view(i)?.iwae(x, noise_set)?;
            if s > best.1 || i == 0 {
                best = (i, s);
            }
        }
        Ok(best)
    }

    /// Loss and gradients of the active component, ordered encoder trunk,
    /// encoder head, decoder trunk, decoder head.
    pub fn loss_and_grads(
        &self,
        x: &DenseMatrix,
        noise: &DenseMatrix,
        objective: Objective,
    ) -> Result<(f64, Vec<MlpParams>)> {
        self.component_view(self.active_index)?
            .loss_and_grads(x, noise, objective)
    }

    /// One optimizer step on the active head, and on the trunks while they
    /// are still shared with a single component.
    pub fn train_step(
        &mut self,
        x: &DenseMatrix,
        objective: Objective,
        rng: &mut Rng64,
    ) -> Result<f64> {
        let noise = rng::standard_normal(
            rng,
            VaeComponent::noise_rows(objective, x.rows()),
            self.latent_dim(),
        );
        let (loss, grads) = self.loss_and_grads(x, &noise, objective)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss}")));
        }
        let active = self.active_index;
        if !self.trunks_frozen {
            self.trunk_optimizer
                .encoder
                .step(&mut self.encoder_trunk, &grads[0])?;
        }
        let head = &mut self.heads[active];
        head.optimizer.encoder.step(&mut head.encoder, &grads[1])?;
        if !self.trunks_frozen {
            self.trunk_optimizer
                .decoder
                .step(&mut self.decoder_trunk, &grads[2])?;
        }
        let head = &mut self.heads[active];
        head.optimizer.decoder.step(&mut head.decoder, &grads[3])?;
        Ok(loss)
    }

    pub fn trunk_digest(&self) -> String {
        format!(
            "{}:{}",
            self.encoder_trunk.digest(),
            self.decoder_trunk.digest()
        )
    }

    /// One digest per component over its trunk→head chains, comparable with
    /// a standalone VAE's digest.
    pub fn digests(&self) -> Vec<String> {
        (0..self.heads.len())
            .map(|i| self.component_view(i).expect("index in range").digest())
            .collect()
    }

    /// Memory a component converged on: the freeze-time snapshot for frozen
    /// components, `live` for the active one.
    pub fn memory_for(&self, i: usize, live: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_index(i)?;
        if i == self.active_index {
            return Ok(live.clone());
        }
        self.events
            .iter()
            .find(|e| e.components_before == i + 1)
            .map(|e| e.memory.clone())
            .ok_or_else(|| {
                Error::Integrity(format!("missing memory snapshot for frozen component {i}"))
            })
    }

    pub(crate) fn consistent(&self) -> bool {
        let trainable = self.heads.iter().filter(|h| !h.frozen).count();
        trainable == 1
            && !self.heads[self.active_index].frozen
            && self.active_index + 1 == self.heads.len()
            && self.heads.len() <= self.k_max
            && (self.heads.len() == 1 || self.trunks_frozen)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::BufferKind;
    use crate::numerics::grad_check;
    use crate::rng::stream_rng;

    fn arch() -> VaeArch {
        VaeArch {
            data_dim: 4,
            latent_dim: 2,
            encoder_hidden: vec![5],
            decoder_hidden: vec![3],
            family: DecoderFamily::Gaussian { sigma: 0.7 },
        }
    }

    fn mixture(seed: u64) -> MixtureModel {
        MixtureModel::new(
            &arch(),
            AdamConfig::default(),
            DEFAULT_K_MAX,
            &mut stream_rng(seed, 0),
        )
        .unwrap()
    }

    fn data(seed: u64, n: usize) -> DenseMatrix {
        rng::standard_normal(&mut stream_rng(seed, 9), n, 4)
    }

    fn buffers() -> (MemoryBuffer, MemoryBuffer) {
        let mut stm = MemoryBuffer::new(BufferKind::Stm, 4, Some(4));
        let mut ltm = MemoryBuffer::new(BufferKind::Ltm, 4, None);
        stm.push(&[1.0; 4], None, 0).unwrap();
        ltm.push(&[2.0; 4], None, 0).unwrap();
        (stm, ltm)
    }

    #[test]
    fn one_component_matches_single_vae() {
        let m = mixture(3);
        let c = VaeComponent::new(&arch(), AdamConfig::default(), &mut stream_rng(3, 0)).unwrap();
        let x = data(1, 6);
        let e = rng::standard_normal(&mut stream_rng(2, 0), 6, 2);
        assert_eq!(
            m.mixture_elbo(0, &x, &e).unwrap(),
            c.elbo_rows(&x, &e, KlMode::ClosedForm).unwrap()
        );
        assert_eq!(
            m.augmented_features(&x).unwrap(),
            c.feature_extract(&x).unwrap()
        );
        let r = m.mixture_loss_r(&x, &e).unwrap();
        let mean: f64 = c
            .elbo_rows(&x, &e, KlMode::ClosedForm)
            .unwrap()
            .iter()
            .sum::<f64>()
            / 6.0;
        assert!((r + mean).abs() < 1e-12);
    }

    #[test]
    fn single_step_training_matches_single_vae_bitwise() {
        let mut m = mixture(4);
        let mut c =
            VaeComponent::new(&arch(), AdamConfig::default(), &mut stream_rng(4, 0)).unwrap();
        let x = data(5, 8);
        let (mut r1, mut r2) = (stream_rng(6, 1), stream_rng(6, 1));
        for _ in 0..5 {
            let a = m.train_step(&x, Objective::Elbo, &mut r1).unwrap();
            let b = c.train_step(&x, Objective::Elbo, &mut r2).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(m.component(0).unwrap().encoder, c.encoder);
        assert_eq!(m.component(0).unwrap().decoder, c.decoder);
    }

    #[test]
    fn loss_r_by_hand() {
        // Two points, one component: R is minus the mean of the two ELBOs.
        let m = mixture(7);
        let x = DenseMatrix::from_rows(&[[0.1, 0.2, 0.3, 0.4], [-1.0, 0.5, 0.0, 2.0]]).unwrap();
        let e = DenseMatrix::from_rows(&[[0.3, -0.2], [1.0, 0.0]]).unwrap();
        let c = m.component(0).unwrap();
        let a = c.elbo(x.row(0), e.row(0)).unwrap();
        let b = c.elbo(x.row(1), e.row(1)).unwrap();
        let r = m.mixture_loss_r(&x, &e).unwrap();
        assert!((r - (-(a + b) / 2.0)).abs() < 1e-12);
        let dup = x.vstack(&x).unwrap();
        let r2 = m.mixture_loss_r(&dup, &e.vstack(&e).unwrap()).unwrap();
        assert!((r - r2).abs() < 1e-12);
    }

    #[test]
    fn check_semantics() {
        let mut m = mixture(0);
        assert!(!m.expansion_check(5.0, 1.0));
        assert_eq!(m.r_last, Some(5.0));
        assert!(!m.expansion_check(5.0, 1e-9));
        assert!(!m.expansion_check(6.0, 1.0));
        assert!(m.expansion_check(7.5, 1.0));
        assert_eq!(m.r_last, Some(7.5));
        assert!(!m.expansion_check(1e300, f64::INFINITY));
    }

    #[test]
    fn expand_freezes_and_clears() {
        let mut m = mixture(1);
        let (mut stm, mut ltm) = buffers();
        let x = data(2, 5);
        let r = &mut stream_rng(3, 0);
        for _ in 0..3 {
            m.train_step(&x, Objective::Elbo, r).unwrap();
        }
        let before0 = m.heads[0].digest();
        let trunk = m.trunk_digest();
        let feats0 = m.augmented_features(&x).unwrap();
        let ev = m
            .expand(&mut stm, &mut ltm, 11, 3.0, &mut stream_rng(9, 4))
            .unwrap()
            .unwrap();
        assert_eq!((stm.len(), ltm.len()), (0, 0));
        assert_eq!(
            (ev.components_before, ev.components_after, ev.memory.rows()),
            (1, 2, 2)
        );
        assert_eq!(m.active_index, 1);
        assert!(m.consistent());
        for _ in 0..5 {
            m.train_step(&x, Objective::Elbo, r).unwrap();
        }
        assert_eq!(m.heads[0].digest(), before0);
        assert_eq!(m.trunk_digest(), trunk);
        let feats = m.augmented_features(&x).unwrap();
        assert_eq!(feats.cols(), 4);
        assert_eq!(feats.columns(0, 2), feats0);
        assert_eq!(m.memory_for(0, &x).unwrap().rows(), 2);
    }

    #[test]
    fn k_max_suppresses_expansion() {
        let mut m =
            MixtureModel::new(&arch(), AdamConfig::default(), 1, &mut stream_rng(0, 0)).unwrap();
        let (mut stm, mut ltm) = buffers();
        m.expansion_check(0.0, 1.0);
        assert!(!m.expansion_check(100.0, 1.0));
        assert_eq!(m.warnings.len(), 1);
        assert!(m
            .expand(&mut stm, &mut ltm, 0, 0.0, &mut stream_rng(0, 1))
            .unwrap()
            .is_none());
        assert_eq!(m.component_count(), 1);
        assert_eq!(stm.len(), 1);
    }

    #[test]
    fn selected_score_is_component_iwae() {
        let mut m = mixture(2);
        let (mut stm, mut ltm) = buffers();
        m.expand(&mut stm, &mut ltm, 0, 0.0, &mut stream_rng(5, 5))
            .unwrap();
        let noise = rng::standard_normal(&mut stream_rng(1, 1), 7, 2);
        let x = [0.5, -0.5, 1.0, 0.0];
        let (i, s) = m.select_component(&x, &noise).unwrap();
        assert_eq!(s, m.component_view(i).unwrap().iwae(&x, &noise).unwrap());
        for j in 0..2 {
            assert!(m.component_view(j).unwrap().iwae(&x, &noise).unwrap() <= s);
        }
    }

    #[test]
    fn active_head_gradients_match_finite_differences() {
        let mut m = mixture(8);
        let (mut stm, mut ltm) = buffers();
        m.expand(&mut stm, &mut ltm, 0, 0.0, &mut stream_rng(1, 2))
            .unwrap();
        let x = data(3, 4);
        for objective in [Objective::Elbo, Objective::Iwae { m: 3 }] {
            let noise = rng::standard_normal(
                &mut stream_rng(4, 0),
                VaeComponent::noise_rows(objective, 4),
                2,
            );
            let base = m.clone();
            let (ne, nd) = (
                base.heads[1].encoder.param_count(),
                base.heads[1].decoder.param_count(),
            );
            let mut flat = base.heads[1].encoder.to_flat();
            flat.extend(base.heads[1].decoder.to_flat());
            let err = grad_check(
                |p| {
                    let mut mm = base.clone();
                    mm.heads[1].encoder.load_flat(&p[..ne]).unwrap();
                    mm.heads[1].decoder.load_flat(&p[ne..ne + nd]).unwrap();
                    let (l, g) = mm.loss_and_grads(&x, &noise, objective).unwrap();
                    let mut gf = g[1].to_flat();
                    gf.extend(g[3].to_flat());
                    (l, gf)
                },
                &flat,
                1e-5,
            );
            assert!(err < 1e-4, "{objective:?}: {err}");
        }
    }
}
