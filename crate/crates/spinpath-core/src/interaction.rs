//! Pauli-string interactions and the Hamiltonians they generate.
//!
//! An interaction is a finite list of terms `c · σ_A^(3) σ_B^(1)` (diagonal
//! string over `A` to the left of a flip string over `B`), each confined to a
//! ball of sup-norm radius `R`. Self-adjointness of every term forces
//! `conj(c) = (-1)^{|A∩B|} c`, so each coefficient is purely real or purely
//! imaginary: in polar form `c = r·e^{iπθ}` with `r > 0` the phase angle `θ`
//! is one of `0, 1, ±1/2`.
//!
//! [`split`] separates the Hamiltonian-plus-surface-term of a region into a
//! diagonal part and a list of jump terms `(A, B, r, θ)`, normalized so that
//!
//! ```text
//! H + W = H⁰ - Σ_X r_X · S_X,      S_X = -e^{iπθ_X} σ_A^(3) σ_B^(1)
//! ```
//!
//! with every `r_X > 0` and every `S_X` self-adjoint. The jump rates `r_X`
//! feed Poisson intensities downstream, and with this normalization a jump
//! path picks up the phase `e^{iπθ_X}` times the diagonal spins per jump and
//! one global factor `(-1)^n` for `n` jumps.

use std::fmt;

use num_complex::Complex64;
use thiserror::Error;

use crate::groupoid::{
    pauli_string, AlgebraError, LocalOperator, Region, Site, SpinConfiguration, SpinModel,
};

/// Relative tolerance deciding whether a parsed coefficient counts as purely
/// real or purely imaginary.
const COEFF_AXIS_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum InteractionError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("interaction is invalid: {0}")]
    Invalid(String),
    #[error("term at sites {term} reaches outside the ambient region")]
    AmbientTooSmall { term: String },
    #[error("boundary configuration does not cover {missing}")]
    BoundaryConfigIncomplete { missing: String },
    #[error("operation requires a classical interaction")]
    NotClassical,
    #[error("interaction terms require q = 2")]
    RequiresSpinHalf,
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
}

/// One Pauli-string summand `c · σ_A^(3) σ_B^(1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionTerm {
    /// Sites of the diagonal string.
    pub a: Region,
    /// Sites of the flip string; empty means the term is classical.
    pub b: Region,
    /// Complex coefficient, purely real or purely imaginary when valid.
    pub coeff: Complex64,
    /// Source line when parsed from a file (for diagnostics).
    pub line: Option<usize>,
}

impl InteractionTerm {
    pub fn new(a: Region, b: Region, coeff: Complex64) -> Self {
        InteractionTerm {
            a,
            b,
            coeff,
            line: None,
        }
    }

    /// Union of the two strings: the set of sites the term touches.
    pub fn support(&self) -> Region {
        self.a.union(&self.b)
    }

    pub fn is_classical(&self) -> bool {
        self.b.is_empty()
    }
}

/// A finite-range interaction: a term list plus its range radius.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    model: SpinModel,
    range: f64,
    terms: Vec<InteractionTerm>,
}

/// A single diagnostic produced by [`Interaction::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Source line of the offending term, when known.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(n) => write!(f, "line {n}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl Interaction {
    pub fn new(
        model: SpinModel,
        range: f64,
        terms: Vec<InteractionTerm>,
    ) -> Result<Self, InteractionError> {
        if model.q() != 2 {
            return Err(InteractionError::RequiresSpinHalf);
        }
        Ok(Interaction {
            model,
            range,
            terms,
        })
    }

    pub fn model(&self) -> SpinModel {
        self.model
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn terms(&self) -> &[InteractionTerm] {
        &self.terms
    }

    /// Every term that actually contributes has an empty flip string.
    pub fn is_classical(&self) -> bool {
        self.terms
            .iter()
            .all(|t| t.is_classical() || t.coeff.norm() == 0.0)
    }

    /// Checks every term against the three structural constraints:
    /// self-adjointness parity, phase quantization, and range. Returns an
    /// empty list exactly when the interaction is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let d = self.model.d() as usize;
        for (k, t) in self.terms.iter().enumerate() {
            let label = |msg: String| Violation {
                line: t.line,
                message: format!("term {}: {msg}", k + 1),
            };
            for s in t.a.sites().iter().chain(t.b.sites()) {
                if s.coords().len() != d {
                    out.push(label(format!(
                        "site {s} has {} coordinates, model has d = {d}",
                        s.coords().len()
                    )));
                }
            }
            let c = t.coeff;
            let mag = c.norm();
            if mag > 0.0 {
                let overlap = t.a.intersection(&t.b).len();
                let real_ok = c.im.abs() <= COEFF_AXIS_TOL * mag;
                let imag_ok = c.re.abs() <= COEFF_AXIS_TOL * mag;
                if !real_ok && !imag_ok {
                    out.push(label(format!(
                        "coefficient ({}, {}) is neither real nor imaginary: \
                         phase angle must be one of 0, 1, ±1/2 (in units of π)",
                        c.re, c.im
                    )));
                } else if overlap % 2 == 0 && !real_ok {
                    out.push(label(format!(
                        "|A∩B| = {overlap} is even, so the coefficient must be real \
                         (got ({}, {}))",
                        c.re, c.im
                    )));
                } else if overlap % 2 == 1 && !imag_ok {
                    out.push(label(format!(
                        "|A∩B| = {overlap} is odd, so the coefficient must be imaginary \
                         (got ({}, {}))",
                        c.re, c.im
                    )));
                }
            }
            let diam = diameter(&t.support());
            if diam as f64 > self.range {
                out.push(label(format!(
                    "support has sup-norm diameter {diam}, exceeding range {}",
                    self.range
                )));
            }
        }
        out
    }

    /// Errors unless [`Self::validate`] is clean.
    pub fn ensure_valid(&self) -> Result<(), InteractionError> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(())
        } else {
            let joined = violations
                .iter()
                .map(Violation::to_string)
                .collect::<Vec<_>>()
                .join("; ");
            Err(InteractionError::Invalid(joined))
        }
    }

    /// Canonical text form; [`parse_interaction`] reads it back exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "model q={} d={} range={}\n",
            self.model.q(),
            self.model.d(),
            self.range
        ));
        for t in &self.terms {
            out.push_str(&format!(
                "term a={} b={} c=({},{})\n",
                site_list(&t.a),
                site_list(&t.b),
                t.coeff.re,
                t.coeff.im
            ));
        }
        out
    }
}

/// Sup-norm diameter of a region (0 for empty or singleton regions).
pub fn diameter(r: &Region) -> i64 {
    let mut best = 0;
    for (i, x) in r.sites().iter().enumerate() {
        for y in &r.sites()[i + 1..] {
            best = best.max(x.sup_distance(y));
        }
    }
    best
}

/// All lattice points within sup-norm distance `R` of the region: the box
/// enlargement `Λ_R`, generated in `Z^d` (not clipped to any ambient set).
pub fn enlarged_region(lambda: &Region, interaction: &Interaction) -> Region {
    let reach = interaction.range.floor() as i64;
    let d = interaction.model.d() as usize;
    if reach <= 0 || lambda.is_empty() {
        return lambda.clone();
    }
    let mut sites = Vec::new();
    let mut offset = vec![-reach; d];
    loop {
        for s in lambda.sites() {
            let coords: Vec<i64> = s
                .coords()
                .iter()
                .zip(&offset)
                .map(|(c, o)| c + o)
                .collect();
            sites.push(Site::new(coords));
        }
        // Odometer increment over the box [-reach, reach]^d.
        let mut k = 0;
        loop {
            if k == d {
                return Region::new(sites).expect("uniform dimension");
            }
            offset[k] += 1;
            if offset[k] <= reach {
                break;
            }
            offset[k] = -reach;
            k += 1;
        }
    }
}

/// `H_Λ = Σ_{A∪B ⊆ Λ} c_{A,B} σ_A^(3) σ_B^(1)` as an operator on `Λ`.
pub fn hamiltonian(
    interaction: &Interaction,
    lambda: &Region,
) -> Result<LocalOperator, InteractionError> {
    interaction.ensure_valid()?;
    let mut h = LocalOperator::zero(interaction.model, lambda.clone())?;
    for t in &interaction.terms {
        if t.support().is_subset_of(lambda) && t.coeff.norm() > 0.0 {
            let s = pauli_string(interaction.model, lambda, &t.a, &t.b)?;
            h = h.add_scaled(t.coeff, &s)?;
        }
    }
    Ok(h)
}

/// Smallest region carrying every term that touches `Λ`, together with `Λ`
/// itself. Errors if such a term reaches outside `ambient`.
pub fn support_region(
    interaction: &Interaction,
    lambda: &Region,
    ambient: &Region,
) -> Result<Region, InteractionError> {
    let mut out = lambda.clone();
    for t in &interaction.terms {
        if t.coeff.norm() == 0.0 {
            continue;
        }
        let supp = t.support();
        if supp.intersects(lambda) {
            if !supp.is_subset_of(ambient) {
                return Err(InteractionError::AmbientTooSmall {
                    term: supp.to_string(),
                });
            }
            out = out.union(&supp);
        }
    }
    Ok(out)
}

/// `W_Λ`: the sum of terms coupling `Λ` to `ambient \ Λ`, as an operator on
/// the support region returned by [`support_region`].
pub fn surface_term(
    interaction: &Interaction,
    lambda: &Region,
    ambient: &Region,
) -> Result<LocalOperator, InteractionError> {
    interaction.ensure_valid()?;
    let carrier = support_region(interaction, lambda, ambient)?;
    let mut w = LocalOperator::zero(interaction.model, carrier.clone())?;
    for t in &interaction.terms {
        let supp = t.support();
        if t.coeff.norm() > 0.0 && supp.intersects(lambda) && !supp.is_subset_of(lambda) {
            let s = pauli_string(interaction.model, &carrier, &t.a, &t.b)?;
            w = w.add_scaled(t.coeff, &s)?;
        }
    }
    Ok(w)
}

/// One off-diagonal summand of a [`HamiltonianBundle`], normalized to a
/// positive rate: the bundle satisfies `H + W = H⁰ - Σ r·S` with
/// `S = -e^{iπθ} σ_A^(3) σ_B^(1)` self-adjoint.
#[derive(Debug, Clone)]
pub struct JumpTerm {
    pub a: Region,
    /// Flip sites; non-empty by construction.
    pub b: Region,
    /// Rate `r > 0`.
    pub rate: f64,
    /// Phase angle in units of π: one of `0, 1, ±1/2`.
    pub theta: f64,
    /// `e^{iπθ}`, exactly one of `±1, ±i`.
    pub phase: Complex64,
    /// The self-adjoint jump operator `S` on the bundle's carrier region.
    pub op: LocalOperator,
}

/// A region's Hamiltonian with surface term, split for the jump expansion.
#[derive(Debug, Clone)]
pub struct HamiltonianBundle {
    pub model: SpinModel,
    /// The conditioned region `Λ`.
    pub region: Region,
    /// Carrier region of all operators: `Λ` plus every term touching it.
    pub enlarged: Region,
    /// `H_Λ + W_Λ` on the carrier region.
    pub total: LocalOperator,
    /// Diagonal part `H⁰` (all terms with empty flip string).
    pub classical: LocalOperator,
    /// Off-diagonal terms, one per (A, B) pair with `B ≠ ∅`.
    pub jumps: Vec<JumpTerm>,
    /// Real coefficients of the diagonal terms, keyed by their site set.
    pub classical_coeffs: Vec<(Region, f64)>,
}

impl HamiltonianBundle {
    /// `Σ_X r_X`, the total jump intensity before the β factor.
    pub fn rate_sum(&self) -> f64 {
        self.jumps.iter().map(|j| j.rate).sum()
    }

    /// Diagonal energy `H⁰(σ) = Σ_A J_A Π_{x∈A} σ_x` of a configuration
    /// covering the carrier region.
    pub fn classical_energy(&self, cfg: &SpinConfiguration) -> f64 {
        let mut e = 0.0;
        for (a, j) in &self.classical_coeffs {
            let mut prod = 1.0;
            for x in a.sites() {
                let v = cfg.value_at(x).expect("configuration covers carrier");
                prod *= if v == 0 { 1.0 } else { -1.0 };
            }
            e += j * prod;
        }
        e
    }

    /// Largest |H⁰(σ)| over all configurations of the carrier region.
    pub fn classical_energy_bound(&self) -> f64 {
        self.classical_coeffs
            .iter()
            .map(|(_, j)| j.abs())
            .sum()
    }
}

/// Splits `H_Λ + W_Λ` (within `ambient`) into its diagonal part and
/// positive-rate jump terms. Zero-coefficient terms are dropped.
pub fn split(
    interaction: &Interaction,
    lambda: &Region,
    ambient: &Region,
) -> Result<HamiltonianBundle, InteractionError> {
    interaction.ensure_valid()?;
    let carrier = support_region(interaction, lambda, ambient)?;
    let model = interaction.model;
    let mut total = LocalOperator::zero(model, carrier.clone())?;
    let mut classical = LocalOperator::zero(model, carrier.clone())?;
    let mut jumps = Vec::new();
    let mut classical_coeffs: Vec<(Region, f64)> = Vec::new();
    for t in &interaction.terms {
        let supp = t.support();
        if t.coeff.norm() == 0.0 || !supp.intersects(lambda) {
            continue;
        }
        let string = pauli_string(model, &carrier, &t.a, &t.b)?;
        total = total.add_scaled(t.coeff, &string)?;
        if t.is_classical() {
            classical = classical.add_scaled(t.coeff, &string)?;
            match classical_coeffs.iter_mut().find(|(a, _)| a == &t.a) {
                Some((_, j)) => *j += t.coeff.re,
                None => classical_coeffs.push((t.a.clone(), t.coeff.re)),
            }
        } else {
            let (rate, theta, phase) = polar_quantized(t.coeff);
            // S = -e^{iπθ}·string, so that the term c·string equals -r·S.
            let op = string.scale(-phase);
            jumps.push(JumpTerm {
                a: t.a.clone(),
                b: t.b.clone(),
                rate,
                theta,
                phase,
                op,
            });
        }
    }
    Ok(HamiltonianBundle {
        model,
        region: lambda.clone(),
        enlarged: carrier,
        total,
        classical,
        jumps,
        classical_coeffs,
    })
}

/// Polar form of a validated coefficient: `(r, θ, e^{iπθ})` with `r > 0` and
/// `θ ∈ {0, 1, ±1/2}`. The sub-tolerance off-axis residue is discarded.
fn polar_quantized(c: Complex64) -> (f64, f64, Complex64) {
    if c.re.abs() >= c.im.abs() {
        if c.re >= 0.0 {
            (c.re, 0.0, Complex64::new(1.0, 0.0))
        } else {
            (-c.re, 1.0, Complex64::new(-1.0, 0.0))
        }
    } else if c.im >= 0.0 {
        (c.im, 0.5, Complex64::new(0.0, 1.0))
    } else {
        (-c.im, -0.5, Complex64::new(0.0, -1.0))
    }
}

/// `H^ω_Λ`: the Hamiltonian-plus-surface-term conditioned on an outside
/// configuration `ω`, as an operator on `Λ`.
///
/// Terms whose flip string leaves `Λ` are annihilated (the outside evaluation
/// of a flip operator has no diagonal part); terms with `B ⊆ Λ` keep their
/// inside strings, scaled by the outside spins `Π_{y∈A∖Λ} ω_y`.
pub fn boundary_hamiltonian(
    interaction: &Interaction,
    lambda: &Region,
    omega: &SpinConfiguration,
) -> Result<LocalOperator, InteractionError> {
    interaction.ensure_valid()?;
    let model = interaction.model;
    let mut h = LocalOperator::zero(model, lambda.clone())?;
    for t in &interaction.terms {
        if t.coeff.norm() == 0.0 {
            continue;
        }
        let supp = t.support();
        if !supp.intersects(lambda) && !supp.is_empty() {
            continue;
        }
        if !t.b.is_subset_of(lambda) {
            continue;
        }
        let a_out = t.a.difference(lambda);
        let mut scale = t.coeff;
        let mut missing = Vec::new();
        for y in a_out.sites() {
            match omega.value_at(y) {
                Some(v) => scale *= if v == 0 { 1.0 } else { -1.0 },
                None => missing.push(y.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(InteractionError::BoundaryConfigIncomplete {
                missing: Region::new(missing)?.to_string(),
            });
        }
        let a_in = t.a.intersection(lambda);
        let s = pauli_string(model, lambda, &a_in, &t.b)?;
        h = h.add_scaled(scale, &s)?;
    }
    Ok(h)
}

fn site_list(r: &Region) -> String {
    let mut out = String::from("[");
    for (i, s) in r.sites().iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&s.to_string());
    }
    out.push(']');
    out
}

/// Parses the interaction file format:
///
/// ```text
/// # comment
/// model q=2 d=1 range=1
/// term a=[(0),(1)] b=[] c=(-1,0)
/// term a=[] b=[(2)] c=(-0.5,0)
/// ```
///
/// One `model` header, then one `term` line per summand; `a` and `b` are
/// site lists (d-tuples), `c` is a `(re,im)` pair of decimal literals.
/// Errors carry a 1-based line number.
pub fn parse_interaction(text: &str) -> Result<Interaction, InteractionError> {
    let err = |line: usize, message: String| InteractionError::Parse { line, message };
    let mut model: Option<(SpinModel, f64)> = None;
    let mut terms = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (head, rest) = match line.split_once(char::is_whitespace) {
            Some((h, r)) => (h, r.trim()),
            None => (line, ""),
        };
        match head {
            "model" => {
                if model.is_some() {
                    return Err(err(lineno, "duplicate model header".into()));
                }
                let fields = parse_fields(rest, lineno)?;
                let q: u32 = lookup(&fields, "q", lineno)?
                    .parse()
                    .map_err(|e| err(lineno, format!("bad q: {e}")))?;
                let d: u32 = lookup(&fields, "d", lineno)?
                    .parse()
                    .map_err(|e| err(lineno, format!("bad d: {e}")))?;
                let range: f64 = lookup(&fields, "range", lineno)?
                    .parse()
                    .map_err(|e| err(lineno, format!("bad range: {e}")))?;
                if q != 2 {
                    return Err(err(lineno, format!("q must be 2 for Pauli-string terms (got {q})")));
                }
                if !(range >= 0.0) {
                    return Err(err(lineno, format!("range must be non-negative (got {range})")));
                }
                let m = SpinModel::new(q, d).map_err(|e| err(lineno, e.to_string()))?;
                model = Some((m, range));
            }
            "term" => {
                let (m, _) =
                    model.ok_or_else(|| err(lineno, "term before model header".into()))?;
                let fields = parse_fields(rest, lineno)?;
                let a = parse_sites(lookup(&fields, "a", lineno)?, m.d(), lineno)?;
                let b = parse_sites(lookup(&fields, "b", lineno)?, m.d(), lineno)?;
                let c = parse_pair(lookup(&fields, "c", lineno)?, lineno)?;
                terms.push(InteractionTerm {
                    a,
                    b,
                    coeff: Complex64::new(c.0, c.1),
                    line: Some(lineno),
                });
            }
            other => {
                return Err(err(
                    lineno,
                    format!("unknown directive '{other}' (expected 'model' or 'term')"),
                ));
            }
        }
    }
    let (m, range) = model.ok_or_else(|| err(0, "missing model header".into()))?;
    Interaction::new(m, range, terms)
}

/// Splits `k=v` fields on whitespace outside brackets/parentheses.
fn parse_fields(s: &str, lineno: usize) -> Result<Vec<(String, String)>, InteractionError> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut cur = String::new();
    let flush = |cur: &mut String, out: &mut Vec<(String, String)>| -> Result<(), InteractionError> {
        if cur.is_empty() {
            return Ok(());
        }
        let (k, v) = cur.split_once('=').ok_or(InteractionError::Parse {
            line: lineno,
            message: format!("expected key=value, got '{cur}'"),
        })?;
        out.push((k.to_string(), v.to_string()));
        cur.clear();
        Ok(())
    };
    for ch in s.chars() {
        match ch {
            '[' | '(' => {
                depth += 1;
                cur.push(ch);
            }
            ']' | ')' => {
                depth = depth.saturating_sub(1);
                cur.push(ch);
            }
            c if c.is_whitespace() && depth == 0 => flush(&mut cur, &mut out)?,
            c => cur.push(c),
        }
    }
    flush(&mut cur, &mut out)?;
    Ok(out)
}

fn lookup<'a>(
    fields: &'a [(String, String)],
    key: &str,
    lineno: usize,
) -> Result<&'a str, InteractionError> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or(InteractionError::Parse {
            line: lineno,
            message: format!("missing field '{key}'"),
        })
}

/// Parses a standalone site list in the model-file syntax (`[]` or
/// `[(1),(0,2),...]`) into a region; intended for command-line arguments.
pub fn parse_region(text: &str, d: u32) -> Result<Region, InteractionError> {
    parse_sites(text.trim(), d, 0)
}

/// Parses `[]` or `[(1),(0,2),...]` into a region of `d`-dimensional sites.
fn parse_sites(s: &str, d: u32, lineno: usize) -> Result<Region, InteractionError> {
    let err = |message: String| InteractionError::Parse {
        line: lineno,
        message,
    };
    let inner = s
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| err(format!("expected [..] site list, got '{s}'")))?;
    let mut sites = Vec::new();
    let mut rest = inner.trim();
    while !rest.is_empty() {
        let close = rest
            .find(')')
            .ok_or_else(|| err(format!("unterminated site tuple in '{s}'")))?;
        let tuple = &rest[..=close];
        let body = tuple
            .strip_prefix('(')
            .and_then(|t| t.strip_suffix(')'))
            .ok_or_else(|| err(format!("expected (..) site tuple, got '{tuple}'")))?;
        let coords: Result<Vec<i64>, _> = body
            .split(',')
            .map(|p| p.trim().parse::<i64>())
            .collect();
        let coords = coords.map_err(|e| err(format!("bad site coordinate in '{tuple}': {e}")))?;
        if coords.len() != d as usize {
            return Err(err(format!(
                "site {tuple} has {} coordinates, model has d = {d}",
                coords.len()
            )));
        }
        sites.push(Site::new(coords));
        rest = rest[close + 1..]
            .trim_start()
            .trim_start_matches(',')
            .trim_start();
    }
    Region::new(sites).map_err(|e| err(e.to_string()))
}

fn parse_pair(s: &str, lineno: usize) -> Result<(f64, f64), InteractionError> {
    let err = |message: String| InteractionError::Parse {
        line: lineno,
        message,
    };
    let body = s
        .strip_prefix('(')
        .and_then(|t| t.strip_suffix(')'))
        .ok_or_else(|| err(format!("expected (re,im) pair, got '{s}'")))?;
    let (re, im) = body
        .split_once(',')
        .ok_or_else(|| err(format!("expected two comma-separated numbers in '{s}'")))?;
    let re: f64 = re
        .trim()
        .parse()
        .map_err(|e| err(format!("bad real part '{re}': {e}")))?;
    let im: f64 = im
        .trim()
        .parse()
        .map_err(|e| err(format!("bad imaginary part '{im}': {e}")))?;
    Ok((re, im))
}
