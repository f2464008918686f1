//! Finite-volume dynamics and equilibrium-condition checks.
//!
//! A self-adjoint generator defines a one-parameter conjugation group on the
//! arrow algebra. This module provides that evolution (including its
//! analytic continuation to imaginary time), the equilibrium residual that
//! relates a state to the dynamics, perturbation cocycles computed both as a
//! truncated series and in closed form, the perturbed states they induce,
//! the projection onto diagonal observables, a factorization check for
//! window-decoupled perturbed states, and the diagonal conditional kernel of
//! classical interactions.

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::gibbs::{
    state_pairing, validate_density, GibbsError, GibbsFunctional, GibbsParameters,
};
use crate::groupoid::{
    pauli_string, AlgebraError, LocalOperator, Region, SpinConfiguration,
};
use crate::interaction::{
    hamiltonian, surface_term, Interaction, InteractionError,
};
use crate::paths::{hermitian_map, toeplitz_exp_row, PathError};

fn czero() -> Complex64 {
    Complex64::new(0.0, 0.0)
}

fn cone() -> Complex64 {
    Complex64::new(1.0, 0.0)
}

/// Failures of dynamics construction and equilibrium checks.
#[derive(Debug, Error)]
pub enum KmsError {
    /// The inverse temperature must be a positive, finite real.
    #[error("inverse temperature must be positive and finite, got {0}")]
    BadBeta(f64),
    /// The generator or perturbation is not self-adjoint.
    #[error("operator is not self-adjoint (asymmetry {0:.3e})")]
    NotSelfAdjoint(f64),
    /// The evolution parameter must be finite.
    #[error("evolution time must be finite")]
    BadTime,
    /// Operators built over different spin models cannot be combined.
    #[error("operators belong to different spin models")]
    ModelMismatch,
    /// The sandwich normalization vanished: the input state is not faithful.
    #[error("state assigns zero weight to the cocycle sandwich")]
    NonFaithful,
    /// The interaction carries non-diagonal terms.
    #[error("interaction is not classical")]
    NotClassical,
    /// A term's support is not covered by the window plus boundary data.
    #[error("boundary configuration does not cover the interaction support")]
    BoundaryCoverMismatch,
    /// A state input failed validation.
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error(transparent)]
    Interaction(#[from] InteractionError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Gibbs(#[from] GibbsError),
}

/// A self-adjoint generator together with an inverse temperature: the data
/// defining the conjugation dynamics and its imaginary-time continuation.
#[derive(Debug, Clone)]
pub struct DynamicsSpec {
    pub generator: LocalOperator,
    pub beta: f64,
}

fn asymmetry(m: &DMatrix<Complex64>) -> f64 {
    (m - m.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn ensure_self_adjoint(op: &LocalOperator) -> Result<(), KmsError> {
    let m = op.to_matrix();
    let scale = op.max_abs().max(1.0);
    let asym = asymmetry(&m);
    if asym > 1e-12 * scale {
        return Err(KmsError::NotSelfAdjoint(asym));
    }
    Ok(())
}

impl DynamicsSpec {
    pub fn new(generator: LocalOperator, beta: f64) -> Result<Self, KmsError> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(KmsError::BadBeta(beta));
        }
        ensure_self_adjoint(&generator)?;
        Ok(DynamicsSpec { generator, beta })
    }
}

/// Conjugation evolution of `a` by the generator: real `t` gives the unitary
/// group `e^{-itH} a e^{itH}`; purely imaginary `t = is` continues it
/// analytically to `e^{sH} a e^{-sH}`.
pub fn evolve(
    spec: &DynamicsSpec,
    t: Complex64,
    a: &LocalOperator,
) -> Result<LocalOperator, KmsError> {
    if !t.is_finite() {
        return Err(KmsError::BadTime);
    }
    if a.model() != spec.generator.model() {
        return Err(KmsError::ModelMismatch);
    }
    let region = spec.generator.region().union(a.region());
    let h = spec.generator.embed(&region)?;
    let aa = a.embed(&region)?;
    let hm = h.to_matrix();
    let i = Complex64::new(0.0, 1.0);
    let left = hermitian_map(&hm, |e| (-i * t * e).exp())?;
    let right = hermitian_map(&hm, |e| (i * t * e).exp())?;
    let out = &left * aa.to_matrix() * &right;
    Ok(LocalOperator::from_matrix(a.model(), region, &out)?)
}

/// Equilibrium residual `|μ(ab) − μ(τ_{iβ}(b)·a)|` of the state against the
/// dynamics: zero exactly when the state satisfies the boundary-value
/// relation between the product and its imaginary-time-swapped form.
pub fn kms_check(
    mu: &GibbsFunctional,
    spec: &DynamicsSpec,
    a: &LocalOperator,
    b: &LocalOperator,
) -> Result<f64, KmsError> {
    let joint = spec
        .generator
        .region()
        .union(a.region())
        .union(b.region());
    let aa = a.embed(&joint)?;
    let bb = b.embed(&joint)?;
    let lhs = mu.evaluate(&aa.convolve(&bb)?)?;
    let swapped = evolve(spec, Complex64::new(0.0, spec.beta), &bb)?;
    let rhs = mu.evaluate(&swapped.convolve(&aa)?)?;
    Ok((lhs - rhs).norm())
}

/// A truncated perturbation cocycle together with the norm bound on the
/// discarded orders.
#[derive(Debug, Clone)]
pub struct CocycleSeries {
    pub value: LocalOperator,
    pub tail_bound: f64,
}

fn operator_norm(op: &LocalOperator) -> Result<f64, KmsError> {
    let m = op.to_matrix();
    let herm = (&m + m.adjoint()).scale(0.5);
    let eig = herm.symmetric_eigen();
    Ok(eig.eigenvalues.iter().fold(0.0f64, |acc, e| acc.max(e.abs())))
}

/// Perturbation cocycle as an order-`k` truncation of its iterated-integral
/// expansion in the perturbation: the order-`n` term collects the `n`-fold
/// time-ordered simplex integrals of the evolved perturbation. The
/// `tail_bound` is `(|t|·‖p‖)^{k+1}/(k+1)!`.
pub fn dyson_cocycle(
    spec: &DynamicsSpec,
    p: &LocalOperator,
    t: Complex64,
    k: usize,
) -> Result<CocycleSeries, KmsError> {
    if !t.is_finite() {
        return Err(KmsError::BadTime);
    }
    if p.model() != spec.generator.model() {
        return Err(KmsError::ModelMismatch);
    }
    ensure_self_adjoint(p)?;
    let region = spec.generator.region().union(p.region());
    let h = spec.generator.embed(&region)?;
    let pp = p.embed(&region)?;
    let i = Complex64::new(0.0, 1.0);
    let d = h.to_matrix() * (i * t);
    let v = pp.to_matrix() * (i * t);
    let rows = toeplitz_exp_row(&d, &v, k + 1);
    let dim = d.nrows();
    let mut total: DMatrix<Complex64> = DMatrix::zeros(dim, dim);
    for row in &rows {
        total += row;
    }
    // Undo the unperturbed factor on the right.
    let back = hermitian_map(&h.to_matrix(), |e| (-i * t * e).exp())?;
    let gamma = total * back;
    let value = LocalOperator::from_matrix(p.model(), region, &gamma)?;
    let x = t.norm() * operator_norm(p)?;
    let mut tail = 1.0f64;
    for j in 1..=(k + 1) {
        tail *= x / j as f64;
    }
    Ok(CocycleSeries { value, tail_bound: tail })
}

/// Perturbation cocycle in closed form, `e^{it(H+P)}·e^{-itH}`; at
/// `t = iβ/2` this is `e^{-β(H+P)/2}·e^{βH/2}`, the operator whose sandwich
/// produces the perturbed state.
pub fn exact_cocycle(
    spec: &DynamicsSpec,
    p: &LocalOperator,
    t: Complex64,
) -> Result<LocalOperator, KmsError> {
    if !t.is_finite() {
        return Err(KmsError::BadTime);
    }
    if p.model() != spec.generator.model() {
        return Err(KmsError::ModelMismatch);
    }
    let region = spec.generator.region().union(p.region());
    let h = spec.generator.embed(&region)?;
    let pp = p.embed(&region)?;
    let sum = h.add_scaled(cone(), &pp)?;
    let i = Complex64::new(0.0, 1.0);
    let left = hermitian_map(&sum.to_matrix(), |e| (i * t * e).exp())?;
    let right = hermitian_map(&h.to_matrix(), |e| (-i * t * e).exp())?;
    let out = left * right;
    Ok(LocalOperator::from_matrix(p.model(), region, &out)?)
}

/// A state twisted by a cocycle sandwich: evaluates
/// `ω(Γ* a Γ)/ω(Γ*Γ)` against the base density.
#[derive(Debug, Clone)]
pub struct PerturbedState {
    rho: LocalOperator,
    gamma: LocalOperator,
    weight: Complex64,
}

impl PerturbedState {
    pub fn evaluate(&self, a: &LocalOperator) -> Result<Complex64, KmsError> {
        let q = self.rho.model().q();
        let region = self.rho.region();
        let aa = a.embed(region)?;
        let sandwich = self.gamma.adjoint().convolve(&aa)?.convolve(&self.gamma)?;
        Ok(state_pairing(&self.rho, &sandwich, q) / self.weight)
    }

    pub fn cocycle(&self) -> &LocalOperator {
        &self.gamma
    }
}

/// Builds the perturbed state of `rho` for the self-adjoint perturbation
/// `p`: the sandwich state of the closed-form cocycle at `t = iβ/2`. For a
/// thermal density of the generator, the result is the thermal state of the
/// shifted generator.
pub fn perturbed_state(
    rho: &LocalOperator,
    spec: &DynamicsSpec,
    p: &LocalOperator,
) -> Result<PerturbedState, KmsError> {
    if rho.model() != spec.generator.model() {
        return Err(KmsError::ModelMismatch);
    }
    validate_density(rho).map_err(|e| KmsError::InvalidState(e.to_string()))?;
    ensure_self_adjoint(p)?;
    let halfway = Complex64::new(0.0, spec.beta / 2.0);
    let gamma = exact_cocycle(spec, p, halfway)?.embed(rho.region())?;
    let q = rho.model().q();
    let weight = state_pairing(rho, &gamma.adjoint().convolve(&gamma)?, q);
    if weight.norm() < 1e-12 {
        return Err(KmsError::NonFaithful);
    }
    Ok(PerturbedState { rho: rho.clone(), gamma, weight })
}

/// Projection onto diagonal observables: keeps the coefficients on
/// identity-flip arrows and zeroes every other column. Idempotent and
/// norm-nonincreasing.
pub fn classical_projection(a: &LocalOperator) -> LocalOperator {
    let mut out = LocalOperator::zero(a.model(), a.region().clone())
        .expect("region was already validated by the input operator");
    let diag = out.flip_index(&crate::groupoid::FlipSet::identity());
    for s in 0..a.dim() {
        *out.coeff_mut(s, diag) = a.coeff(s, diag);
    }
    out
}

/// Maximum residual `|ω(a) − ω(E(a))|` over the test set, where `E` is the
/// diagonal projection: zero for every test operator exactly when the state
/// ignores off-diagonal structure on that set.
pub fn is_classical_state(
    rho: &LocalOperator,
    test_set: &[LocalOperator],
) -> Result<f64, KmsError> {
    validate_density(rho).map_err(|e| KmsError::InvalidState(e.to_string()))?;
    let q = rho.model().q();
    let mut worst = 0.0f64;
    for a in test_set {
        if a.model() != rho.model() {
            return Err(KmsError::ModelMismatch);
        }
        let aa = a.embed(rho.region())?;
        let direct = state_pairing(rho, &aa, q);
        let projected = state_pairing(rho, &classical_projection(&aa), q);
        worst = worst.max((direct - projected).norm());
    }
    Ok(worst)
}

/// Outcome of the window-decoupling check: the perturbation that removes
/// the window's boundary coupling, the cocycle it generates, the perturbed
/// state's values on the product test basis, the worst deviation of those
/// values from the product of marginal values, and the cocycle's condition
/// number.
#[derive(Debug, Clone)]
pub struct PerturbationReport {
    pub perturbation: LocalOperator,
    pub cocycle: LocalOperator,
    pub values: Vec<Complex64>,
    pub residual: f64,
    pub condition: f64,
}

fn subsets(region: &Region) -> Vec<Region> {
    let sites = region.sites();
    let n = sites.len();
    let mut out = Vec::with_capacity(1 << n);
    for mask in 0..(1u32 << n) {
        let chosen: Vec<_> = sites
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, s)| s.clone())
            .collect();
        out.push(Region::new(chosen).expect("sites of a region are distinct"));
    }
    out
}

/// All diagonal/flip basis strings supported inside `support`, built on
/// `carrier`.
fn string_basis(
    op_model: crate::groupoid::SpinModel,
    carrier: &Region,
    support: &Region,
) -> Result<Vec<LocalOperator>, KmsError> {
    let parts = subsets(support);
    let mut out = Vec::new();
    for a in &parts {
        for b in &parts {
            out.push(pauli_string(op_model, carrier, a, b)?);
        }
    }
    Ok(out)
}

/// Checks that perturbing the state by the negative of the window's boundary
/// coupling decouples it: the perturbed state, evaluated on products of
/// window-local and environment-local strings, must factor into the window's
/// isolated thermal values times the induced environment values.
pub fn gibbs_araki_check(
    rho: &LocalOperator,
    parameters: &GibbsParameters,
) -> Result<PerturbationReport, KmsError> {
    let model = parameters.interaction.model();
    if rho.model() != model {
        return Err(KmsError::ModelMismatch);
    }
    if rho.region() != &parameters.ambient {
        return Err(KmsError::InvalidState(
            "density must live on the ambient region".into(),
        ));
    }
    let beta = parameters.beta;
    let lambda = &parameters.lambda;
    let ambient = &parameters.ambient;
    let h_amb = hamiltonian(&parameters.interaction, ambient)?;
    let w = surface_term(&parameters.interaction, lambda, ambient)?.embed(ambient)?;
    // The decoupling perturbation: adding it to the generator cancels every
    // term that straddles the window boundary.
    let p = w.scale(Complex64::new(-1.0, 0.0));
    let spec = DynamicsSpec::new(h_amb, beta)?;
    let state = perturbed_state(rho, &spec, &p)?;

    // Condition number of the cocycle.
    let gm = state.gamma.to_matrix();
    let svd = gm.clone().svd(false, false);
    let smax = svd.singular_values.iter().fold(0.0f64, |a, s| a.max(*s));
    let smin = svd
        .singular_values
        .iter()
        .fold(f64::INFINITY, |a, s| a.min(*s));
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };

    // Window marginal: the isolated thermal values on the window alone.
    let h_win = hamiltonian(&parameters.interaction, lambda)?;
    let wm = h_win.to_matrix();
    let win_density = hermitian_map(&wm, |e| Complex64::new((-beta * e).exp(), 0.0))?;
    let win_trace = win_density.trace();

    let outside = ambient.difference(lambda);
    let window_strings = string_basis(model, ambient, lambda)?;
    let outside_strings = string_basis(model, ambient, &outside)?;
    let window_local = string_basis(model, lambda, lambda)?;

    let mut values = Vec::new();
    let mut residual = 0.0f64;
    for (wi, ws) in window_strings.iter().enumerate() {
        let marginal = (window_local[wi].to_matrix() * &win_density).trace() / win_trace;
        for os in &outside_strings {
            let joint = state.evaluate(&ws.convolve(os)?)?;
            values.push(joint);
            let env = state.evaluate(os)?;
            residual = residual.max((joint - marginal * env).norm());
        }
    }
    Ok(PerturbationReport {
        perturbation: p,
        cocycle: state.gamma.clone(),
        values,
        residual,
        condition,
    })
}

/// Diagonal conditional kernel of a classical interaction: the probability
/// table over window configurations induced by the boundary configuration,
/// `σ ↦ e^{-βE(σ·η)}/Z` with `E` summing every term that meets the window.
pub fn classical_dlr_kernel(
    interaction: &Interaction,
    lambda: &Region,
    beta: f64,
    eta: &SpinConfiguration,
) -> Result<Vec<(SpinConfiguration, f64)>, KmsError> {
    interaction.ensure_valid()?;
    if !interaction.is_classical() {
        return Err(KmsError::NotClassical);
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(KmsError::BadBeta(beta));
    }
    let model = interaction.model();
    let q = model.q();
    let probe = LocalOperator::zero(model, lambda.clone())?;
    let mut energies = Vec::with_capacity(probe.dim());
    let mut configs = Vec::with_capacity(probe.dim());
    for idx in 0..probe.dim() {
        let sigma = probe.index_config(idx);
        let merged = sigma.merge(eta);
        let mut energy = czero();
        for term in interaction.terms() {
            let support = term.support();
            if term.coeff.norm() == 0.0 || !support.intersects(lambda) {
                continue;
            }
            let mut val = term.coeff;
            for site in term.a.sites() {
                match merged.spin_at(site, q) {
                    Some(z) => val *= z,
                    None => return Err(KmsError::BoundaryCoverMismatch),
                }
            }
            energy += val;
        }
        energies.push(energy.re);
        configs.push(sigma);
    }
    let shift = energies.iter().cloned().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = energies.iter().map(|e| (-beta * (e - shift)).exp()).collect();
    let z: f64 = weights.iter().sum();
    Ok(configs
        .into_iter()
        .zip(weights)
        .map(|(cfg, w)| (cfg, w / z))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gibbs::{boundary_functional, dlr_check, free_gibbs};
    use crate::groupoid::{site1, FlipSet, GroupoidArrow, SpinModel};
    use crate::interaction::{split, InteractionTerm};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn model() -> SpinModel {
        SpinModel::new(2, 1).unwrap()
    }

    fn region(xs: &[i64]) -> Region {
        Region::new(xs.iter().map(|&x| site1(x)).collect::<Vec<_>>()).unwrap()
    }

    fn config(r: &Region, vals: &[u8]) -> SpinConfiguration {
        SpinConfiguration::new(r.clone(), vals.to_vec(), 2).unwrap()
    }

    fn random_operator(
        m: SpinModel,
        r: &Region,
        rng: &mut impl Rng,
    ) -> LocalOperator {
        let mut op = LocalOperator::zero(m, r.clone()).unwrap();
        for s in 0..op.dim() {
            for z in 0..op.dim() {
                *op.coeff_mut(s, z) = c(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                );
            }
        }
        op
    }

    fn random_self_adjoint(
        m: SpinModel,
        r: &Region,
        rng: &mut impl Rng,
    ) -> LocalOperator {
        let f = random_operator(m, r, rng);
        f.add_scaled(cone(), &f.adjoint()).unwrap().scale(c(0.5, 0.0))
    }

    fn ising_chain(n: i64, j: f64, h: f64) -> Interaction {
        let mut terms = Vec::new();
        for x in 0..n {
            terms.push(InteractionTerm::new(region(&[x]), Region::empty(), c(h, 0.0)));
        }
        for x in 0..n - 1 {
            terms.push(InteractionTerm::new(
                region(&[x, x + 1]),
                Region::empty(),
                c(j, 0.0),
            ));
        }
        Interaction::new(model(), 1.5, terms).unwrap()
    }

    fn tfim_chain(n: i64, j: f64, h: f64) -> Interaction {
        let mut terms = Vec::new();
        for x in 0..n {
            terms.push(InteractionTerm::new(Region::empty(), region(&[x]), c(h, 0.0)));
        }
        for x in 0..n - 1 {
            terms.push(InteractionTerm::new(
                region(&[x, x + 1]),
                Region::empty(),
                c(j, 0.0),
            ));
        }
        Interaction::new(model(), 1.5, terms).unwrap()
    }

    fn mixed_chain(n: i64, rng: &mut impl Rng) -> Interaction {
        let mut terms = Vec::new();
        for x in 0..n {
            terms.push(InteractionTerm::new(
                region(&[x]),
                Region::empty(),
                c(rng.random::<f64>() - 0.5, 0.0),
            ));
            terms.push(InteractionTerm::new(
                Region::empty(),
                region(&[x]),
                c(rng.random::<f64>() - 0.5, 0.0),
            ));
        }
        for x in 0..n - 1 {
            terms.push(InteractionTerm::new(
                region(&[x, x + 1]),
                Region::empty(),
                c(rng.random::<f64>() - 0.5, 0.0),
            ));
        }
        Interaction::new(model(), 1.5, terms).unwrap()
    }

    fn gibbs_density(phi: &Interaction, amb: &Region, beta: f64) -> LocalOperator {
        let hm = hamiltonian(phi, amb).unwrap().to_matrix();
        let dm = hermitian_map(&hm, |e| c((-beta * e).exp(), 0.0)).unwrap();
        let tr = dm.trace();
        LocalOperator::from_matrix(model(), amb.clone(), &(dm / tr)).unwrap()
    }

    #[test]
    fn evolution_matches_the_rotation_oracle() {
        let amb = region(&[0]);
        let h = 0.7;
        let gen = pauli_string(model(), &amb, &amb, &Region::empty())
            .unwrap()
            .scale(c(h, 0.0));
        let spec = DynamicsSpec::new(gen, 1.0).unwrap();
        let x = pauli_string(model(), &amb, &Region::empty(), &amb).unwrap();

        // t = 0 leaves the observable alone.
        let still = evolve(&spec, czero(), &x).unwrap();
        assert!(still.add_scaled(c(-1.0, 0.0), &x).unwrap().max_abs() <= 1e-14);

        // Generic time: rotation in the two off-diagonal directions.
        for t in [0.3, 1.1, -0.8] {
            let rotated = evolve(&spec, c(t, 0.0), &x).unwrap().to_matrix();
            let theta = 2.0 * h * t;
            let mut expected = DMatrix::<Complex64>::zeros(2, 2);
            expected[(0, 1)] = c(theta.cos(), -theta.sin());
            expected[(1, 0)] = c(theta.cos(), theta.sin());
            let diff = (&rotated - &expected)
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-12, "rotation mismatch {diff} at t={t}");
        }

        // Diagonal observable commutes with the diagonal generator.
        let z = pauli_string(model(), &amb, &amb, &Region::empty()).unwrap();
        let fixed = evolve(&spec, c(2.0, 0.0), &z).unwrap();
        assert!(fixed.add_scaled(c(-1.0, 0.0), &z).unwrap().max_abs() <= 1e-12);

        // Imaginary time gives the similarity transform with real weights.
        let beta = 0.9;
        let cont = evolve(&spec, c(0.0, beta), &x).unwrap().to_matrix();
        let mut expected = DMatrix::<Complex64>::zeros(2, 2);
        // e^{βhZ} X e^{-βhZ} scales the two off-diagonal entries oppositely.
        expected[(0, 1)] = c((2.0 * beta * h).exp(), 0.0);
        expected[(1, 0)] = c((-2.0 * beta * h).exp(), 0.0);
        let diff = (&cont - &expected).iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(diff <= 1e-12, "continuation mismatch {diff}");
    }

    #[test]
    fn thermal_state_passes_the_balance_check() {
        let mut rng = ChaCha12Rng::seed_from_u64(301);
        let phi = mixed_chain(3, &mut rng);
        let amb = region(&[0, 1, 2]);
        let beta = 0.9;
        let params = GibbsParameters::new(beta, phi.clone(), amb.clone(), amb.clone()).unwrap();
        let mu = free_gibbs(&params).unwrap();
        let gen = hamiltonian(&phi, &amb).unwrap();
        let spec = DynamicsSpec::new(gen.clone(), beta).unwrap();

        let mut worst = 0.0f64;
        for _ in 0..20 {
            let a = random_operator(model(), &amb, &mut rng);
            let b = random_operator(model(), &amb, &mut rng);
            let res = kms_check(&mu, &spec, &a, &b).unwrap();
            worst = worst.max(res);
        }
        assert!(worst <= 1e-10, "matched-generator residual {worst}");

        // The identity as the swapped operand gives an exactly zero residual.
        let a = random_operator(model(), &amb, &mut rng);
        let one = LocalOperator::identity(model(), amb.clone()).unwrap();
        assert!(kms_check(&mu, &spec, &a, &one).unwrap() <= 1e-12);

        // A mismatched inverse temperature is detected on a generic pair.
        let mismatched = DynamicsSpec::new(gen, beta / 2.0).unwrap();
        let b = random_operator(model(), &amb, &mut rng);
        let res = kms_check(&mu, &mismatched, &a, &b).unwrap();
        assert!(res > 1e-3, "mismatch witness too small: {res}");
    }

    #[test]
    fn cocycle_series_agrees_with_the_closed_form() {
        let mut rng = ChaCha12Rng::seed_from_u64(311);
        let amb = region(&[0, 1]);
        let phi = mixed_chain(2, &mut rng);
        let gen = hamiltonian(&phi, &amb).unwrap();
        let beta = 1.0;
        let spec = DynamicsSpec::new(gen.clone(), beta).unwrap();
        let p = random_self_adjoint(model(), &amb, &mut rng);

        // Zero perturbation and zero truncation both give the identity.
        let one = LocalOperator::identity(model(), amb.clone()).unwrap();
        let zero_p = LocalOperator::zero(model(), amb.clone()).unwrap();
        let trivially = dyson_cocycle(&spec, &zero_p, c(0.8, 0.0), 6).unwrap();
        assert!(trivially.value.add_scaled(c(-1.0, 0.0), &one).unwrap().max_abs() <= 1e-12);
        assert_eq!(trivially.tail_bound, 0.0);
        let order_zero = dyson_cocycle(&spec, &p, c(0.8, 0.0), 0).unwrap();
        assert!(order_zero.value.add_scaled(c(-1.0, 0.0), &one).unwrap().max_abs() <= 1e-12);

        // A perturbation commuting with the generator produces a pure
        // exponential of the perturbation.
        let diag_phi = ising_chain(2, 0.6, 0.4);
        let diag_gen = hamiltonian(&diag_phi, &amb).unwrap();
        let diag_spec = DynamicsSpec::new(diag_gen, beta).unwrap();
        let diag_p = pauli_string(model(), &amb, &region(&[0]), &Region::empty())
            .unwrap()
            .scale(c(0.45, 0.0));
        let t = c(0.7, 0.0);
        let series = dyson_cocycle(&diag_spec, &diag_p, t, 20).unwrap();
        let direct = hermitian_map(&diag_p.to_matrix(), |e| {
            (Complex64::new(0.0, 1.0) * t * e).exp()
        })
        .unwrap();
        let expected = LocalOperator::from_matrix(model(), amb.clone(), &direct).unwrap();
        let diff = series.value.add_scaled(c(-1.0, 0.0), &expected).unwrap().max_abs();
        assert!(diff <= 1e-12, "commuting case differs by {diff}");

        // Generic instance, real and imaginary times: deep truncation matches
        // the closed form, and moderate truncations sit inside their own
        // reported tail bounds.
        for t in [c(0.9, 0.0), c(0.0, beta / 2.0)] {
            let exact = exact_cocycle(&spec, &p, t).unwrap();
            let deep = dyson_cocycle(&spec, &p, t, 25).unwrap();
            let diff = deep.value.add_scaled(c(-1.0, 0.0), &exact).unwrap().max_abs();
            assert!(diff <= 1e-8, "deep truncation differs by {diff}");
            for k in [6, 9, 12] {
                let part = dyson_cocycle(&spec, &p, t, k).unwrap();
                let diff = part.value.add_scaled(c(-1.0, 0.0), &exact).unwrap().max_abs();
                assert!(
                    diff <= part.tail_bound.max(1e-13),
                    "order {k}: difference {diff:.3e} exceeds tail {:.3e}",
                    part.tail_bound
                );
            }
        }
    }

    #[test]
    fn perturbed_state_is_the_shifted_thermal_state() {
        let mut rng = ChaCha12Rng::seed_from_u64(317);
        let amb = region(&[0, 1]);
        let phi = mixed_chain(2, &mut rng);
        let beta = 0.85;
        let gen = hamiltonian(&phi, &amb).unwrap();
        let spec = DynamicsSpec::new(gen.clone(), beta).unwrap();
        let rho = gibbs_density(&phi, &amb, beta);
        let p = random_self_adjoint(model(), &amb, &mut rng);
        let state = perturbed_state(&rho, &spec, &p).unwrap();

        // Shifted thermal target, computed directly.
        let shifted = gen.add_scaled(cone(), &p).unwrap().to_matrix();
        let target = hermitian_map(&shifted, |e| c((-beta * e).exp(), 0.0)).unwrap();
        let ztr = target.trace();

        let mut worst = 0.0f64;
        let basis = string_basis(model(), &amb, &amb).unwrap();
        for a in &basis {
            let got = state.evaluate(a).unwrap();
            let want = (a.to_matrix() * &target).trace() / ztr;
            worst = worst.max((got - want).norm());
        }
        assert!(worst <= 1e-9, "spanning-set deviation {worst}");

        // Normalization and the unperturbed limit.
        let one = LocalOperator::identity(model(), amb.clone()).unwrap();
        assert!((state.evaluate(&one).unwrap() - cone()).norm() <= 1e-12);
        let zero_p = LocalOperator::zero(model(), amb.clone()).unwrap();
        let plain = perturbed_state(&rho, &spec, &zero_p).unwrap();
        let f = random_operator(model(), &amb, &mut rng);
        let direct = state_pairing(&rho, &f, 2);
        assert!((plain.evaluate(&f).unwrap() - direct).norm() <= 1e-12);
    }

    #[test]
    fn diagonal_projection_properties() {
        let mut rng = ChaCha12Rng::seed_from_u64(331);
        let amb = region(&[0, 1]);
        let a = random_operator(model(), &amb, &mut rng);

        // Idempotence.
        let once = classical_projection(&a);
        let twice = classical_projection(&once);
        assert!(twice.add_scaled(c(-1.0, 0.0), &once).unwrap().max_abs() == 0.0);

        // Diagonal operators are fixed; pure flips are annihilated.
        let z = pauli_string(model(), &amb, &region(&[0]), &Region::empty()).unwrap();
        assert!(classical_projection(&z)
            .add_scaled(c(-1.0, 0.0), &z)
            .unwrap()
            .max_abs()
            == 0.0);
        let x = pauli_string(model(), &amb, &Region::empty(), &region(&[1])).unwrap();
        assert!(classical_projection(&x).max_abs() == 0.0);

        // The matrix norm never grows: check on the spectral norm.
        let m = a.to_matrix();
        let pm = once.to_matrix();
        let norm = |mm: &DMatrix<Complex64>| {
            mm.clone()
                .svd(false, false)
                .singular_values
                .iter()
                .fold(0.0f64, |acc, s| acc.max(*s))
        };
        assert!(norm(&pm) <= norm(&m) + 1e-12);
    }

    #[test]
    fn classical_states_ignore_off_diagonal_observables() {
        let mut rng = ChaCha12Rng::seed_from_u64(337);
        let amb = region(&[0, 1]);
        let beta = 1.0;
        let test_set: Vec<LocalOperator> = (0..12)
            .map(|_| random_operator(model(), &amb, &mut rng))
            .collect();

        // Diagonal interaction: its thermal state is classical.
        let rho = gibbs_density(&ising_chain(2, 0.7, 0.4), &amb, beta);
        let res = is_classical_state(&rho, &test_set).unwrap();
        assert!(res <= 1e-12, "diagonal thermal state residual {res}");

        // Transverse-field thermal state is not.
        let rho_q = gibbs_density(&tfim_chain(2, 0.7, 0.6), &amb, beta);
        let res_q = is_classical_state(&rho_q, &test_set).unwrap();
        assert!(res_q > 1e-3, "expected an off-diagonal witness, got {res_q}");

        // Diagonal-only test operators cannot distinguish anything.
        let diag_set: Vec<LocalOperator> = vec![
            pauli_string(model(), &amb, &region(&[0]), &Region::empty()).unwrap(),
            pauli_string(model(), &amb, &region(&[0, 1]), &Region::empty()).unwrap(),
        ];
        assert!(is_classical_state(&rho_q, &diag_set).unwrap() <= 1e-14);
    }

    #[test]
    fn decoupling_perturbation_factorizes_the_thermal_state() {
        let mut rng = ChaCha12Rng::seed_from_u64(347);
        let amb = region(&[0, 1, 2]);
        let lam = region(&[0, 1]);
        let beta = 0.8;

        // Diagonal interaction.
        let phi = ising_chain(3, 0.7, 0.3);
        let params = GibbsParameters::new(beta, phi.clone(), lam.clone(), amb.clone()).unwrap();
        let rho = gibbs_density(&phi, &amb, beta);
        let report = gibbs_araki_check(&rho, &params).unwrap();
        assert!(report.residual <= 1e-9, "diagonal residual {}", report.residual);
        assert!(report.condition.is_finite());

        // Non-diagonal interaction: the same decoupling is exact, because
        // removing the boundary terms splits the generator into commuting
        // blocks on the window and its complement.
        let phi_q = mixed_chain(3, &mut rng);
        let params_q =
            GibbsParameters::new(beta, phi_q.clone(), lam.clone(), amb.clone()).unwrap();
        let rho_q = gibbs_density(&phi_q, &amb, beta);
        let report_q = gibbs_araki_check(&rho_q, &params_q).unwrap();
        assert!(report_q.residual <= 1e-9, "non-diagonal residual {}", report_q.residual);

        // No boundary coupling at all: the perturbation is zero and the
        // thermal state already factors.
        let fields_only = {
            let mut terms = Vec::new();
            for x in 0..3 {
                terms.push(InteractionTerm::new(region(&[x]), Region::empty(), c(0.4, 0.0)));
                terms.push(InteractionTerm::new(Region::empty(), region(&[x]), c(0.3, 0.0)));
            }
            Interaction::new(model(), 1.5, terms).unwrap()
        };
        let params_f =
            GibbsParameters::new(beta, fields_only.clone(), lam.clone(), amb.clone()).unwrap();
        let rho_f = gibbs_density(&fields_only, &amb, beta);
        let report_f = gibbs_araki_check(&rho_f, &params_f).unwrap();
        assert!(report_f.perturbation.max_abs() == 0.0);
        assert!(report_f.residual <= 1e-12, "free residual {}", report_f.residual);

        // A non-thermal state does not factorize: witness reported.
        let dim = 8.0;
        let mixed_state = LocalOperator::identity(model(), amb.clone())
            .unwrap()
            .scale(c(1.0 / dim, 0.0));
        let report_m = gibbs_araki_check(&mixed_state, &params_q).unwrap();
        assert!(
            report_m.residual > 1e-3,
            "uniform state unexpectedly factorizes: {}",
            report_m.residual
        );
    }

    #[test]
    fn kernel_table_matches_closed_forms_and_the_window_functional() {
        // Zero temperature parameter: uniform table.
        let phi = ising_chain(2, 0.8, 0.5);
        let lam = region(&[0, 1]);
        let eta = config(&Region::empty(), &[]);
        let table = classical_dlr_kernel(&phi, &lam, 0.0, &eta).unwrap();
        for (_, pr) in &table {
            assert!((pr - 0.25).abs() <= 1e-14);
        }

        // Single site in a field: two-state closed form.
        let single = ising_chain(1, 0.0, 0.6);
        let lam1 = region(&[0]);
        let beta = 1.1;
        let table = classical_dlr_kernel(&single, &lam1, beta, &eta).unwrap();
        let z = (-beta * 0.6f64).exp() + (beta * 0.6f64).exp();
        for (cfg, pr) in &table {
            let s = cfg.spin_at(&site1(0), 2).unwrap().re;
            let expected = (-beta * 0.6 * s).exp() / z;
            assert!((pr - expected).abs() <= 1e-14);
        }

        // Coupled pair with a boundary spin: enumerate the four states.
        let chain = ising_chain(3, 0.9, 0.4);
        let lam2 = region(&[0, 1]);
        let eta2 = config(&region(&[2]), &[1]);
        let table = classical_dlr_kernel(&chain, &lam2, beta, &eta2).unwrap();
        let mut z = 0.0;
        let mut expected = Vec::new();
        let probe = LocalOperator::zero(model(), lam2.clone()).unwrap();
        for idx in 0..4 {
            let cfg = probe.index_config(idx);
            let s0 = cfg.spin_at(&site1(0), 2).unwrap().re;
            let s1 = cfg.spin_at(&site1(1), 2).unwrap().re;
            let s2 = -1.0;
            let e = 0.4 * (s0 + s1) + 0.9 * (s0 * s1 + s1 * s2);
            let w = (-beta * e).exp();
            z += w;
            expected.push(w);
        }
        for (idx, (_, pr)) in table.iter().enumerate() {
            assert!((pr - expected[idx] / z).abs() <= 1e-12);
        }

        // The table is the diagonal of the window functional: evaluating the
        // indicator of each window configuration reproduces it.
        let amb = region(&[0, 1, 2]);
        let params = GibbsParameters::new(beta, chain.clone(), lam2.clone(), amb).unwrap();
        let functional = boundary_functional(&params, &eta2, &FlipSet::identity()).unwrap();
        for (cfg, pr) in &table {
            let indicator = LocalOperator::delta(
                model(),
                &GroupoidArrow::new(cfg.clone(), FlipSet::identity()),
            )
            .unwrap();
            let got = functional.evaluate(&indicator).unwrap();
            assert!((got.re - pr).abs() <= 1e-12, "kernel mismatch {} vs {}", got.re, pr);
            assert!(got.im.abs() <= 1e-14);
        }

        // Non-diagonal interactions are rejected.
        assert!(matches!(
            classical_dlr_kernel(&tfim_chain(2, 0.5, 0.5), &lam, beta, &eta),
            Err(KmsError::NotClassical)
        ));
    }

    /// Instances whose densities satisfy the window balance equation also
    /// satisfy the dynamical balance for the matching window generator; the
    /// strict-window non-diagonal instance is excluded by its balance
    /// residual, and that exclusion is reported.
    #[test]
    fn balance_equation_implies_dynamical_balance() {
        let mut rng = ChaCha12Rng::seed_from_u64(353);
        let amb = region(&[0, 1, 2]);
        let beta = 0.9;

        let run_gate = |phi: &Interaction, lam: &Region, rng: &mut ChaCha12Rng| -> (f64, f64) {
            let rho = gibbs_density(phi, &amb, beta);
            let params =
                GibbsParameters::new(beta, phi.clone(), lam.clone(), amb.clone()).unwrap();
            let mut gate = 0.0f64;
            for _ in 0..3 {
                let f = random_operator(model(), &amb, rng);
                gate = gate.max(dlr_check(&rho, &params, &f).unwrap());
            }
            // Window generator: every term meeting the window, on its carrier.
            let bundle = split(phi, lam, &amb).unwrap();
            let spec = DynamicsSpec::new(bundle.total.clone(), beta).unwrap();
            let mu_params =
                GibbsParameters::new(beta, phi.clone(), amb.clone(), amb.clone()).unwrap();
            let mu = free_gibbs(&mu_params).unwrap();
            let mut dynamical = 0.0f64;
            for _ in 0..5 {
                let a = random_operator(model(), lam, rng);
                let b = random_operator(model(), lam, rng);
                dynamical = dynamical.max(kms_check(&mu, &spec, &a, &b).unwrap());
            }
            (gate, dynamical)
        };

        // Diagonal interaction: every window passes the gate, and the
        // dynamical residual stays at oracle precision.
        let phi = ising_chain(3, 0.7, 0.3);
        for lam in [region(&[0]), region(&[0, 1]), region(&[0, 1, 2])] {
            let (gate, dynamical) = run_gate(&phi, &lam, &mut rng);
            println!("diagonal window {lam}: gate {gate:.3e}, dynamical {dynamical:.3e}");
            assert!(gate <= 1e-8, "diagonal gate failed: {gate}");
            assert!(dynamical <= 1e-6, "diagonal dynamical residual {dynamical}");
        }

        // Non-diagonal interaction: the full window passes both; the strict
        // window is excluded by the gate itself.
        let phi_q = mixed_chain(3, &mut rng);
        let (gate, dynamical) = run_gate(&phi_q, &amb, &mut rng);
        println!("non-diagonal full window: gate {gate:.3e}, dynamical {dynamical:.3e}");
        assert!(gate <= 1e-8, "full-window gate failed: {gate}");
        assert!(dynamical <= 1e-6, "full-window dynamical residual {dynamical}");

        let strict = region(&[0, 1]);
        let (gate_q, _) = run_gate(&phi_q, &strict, &mut rng);
        println!("non-diagonal strict window: gate {gate_q:.3e} (excluded)");
        assert!(
            gate_q > 1e-3,
            "strict non-diagonal window unexpectedly passed the gate: {gate_q}"
        );
    }

    #[test]
    fn construction_errors_are_reported() {
        let amb = region(&[0]);
        let mut rng = ChaCha12Rng::seed_from_u64(359);
        let sa = random_self_adjoint(model(), &amb, &mut rng);
        assert!(matches!(
            DynamicsSpec::new(sa.clone(), -0.5),
            Err(KmsError::BadBeta(_))
        ));
        let skew = random_operator(model(), &amb, &mut rng);
        assert!(matches!(
            DynamicsSpec::new(skew, 1.0),
            Err(KmsError::NotSelfAdjoint(_))
        ));
        let spec = DynamicsSpec::new(sa.clone(), 1.0).unwrap();
        assert!(matches!(
            evolve(&spec, c(f64::NAN, 0.0), &sa),
            Err(KmsError::BadTime)
        ));
        // Non-density input to the perturbed-state constructor.
        let not_normalized = LocalOperator::identity(model(), amb.clone()).unwrap();
        assert!(matches!(
            perturbed_state(&not_normalized, &spec, &sa),
            Err(KmsError::InvalidState(_))
        ));
    }
}
