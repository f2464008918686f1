//! Finite spin-groupoid algebra over a region of `Z^d`.
//!
//! A configuration assigns each site of a finite region one of `q` spin
//! values; a flip shifts the value at selected sites by an element of `Z_q`.
//! An arrow of the transformation groupoid is a pair (configuration, flip):
//! its source is the configuration itself and its range is the flipped
//! configuration. A [`LocalOperator`] is a dense complex-valued function on
//! arrows. Under [`LocalOperator::to_matrix`] the basis arrow at `(σ, X)`
//! maps to the matrix unit `|flip_apply(σ, X)⟩⟨σ|`, and convolution of
//! operator coefficients corresponds exactly to matrix multiplication; the
//! two routes are kept separate in code so tests can compare them.
//!
//! Conventions fixed here and relied on everywhere else:
//!
//! * sites are ordered lexicographically by coordinates, and a region's
//!   configuration basis is ordered lexicographically over its sorted sites
//!   with spin value 0 (the `+1` spin for `q = 2`) before value 1;
//! * the first site in sort order is the most significant digit of a basis
//!   index;
//! * `(f * g)(σ, X) = Σ_Y f(flip_apply(σ, Y), X - Y) · g(σ, Y)`, the unique
//!   orientation for which `to_matrix` is an algebra homomorphism.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

/// Errors from constructing or combining groupoid-algebra values.
#[derive(Debug, Error)]
pub enum AlgebraError {
    #[error("spin cardinality q must be at least 2 (got {0})")]
    BadCardinality(u32),
    #[error("lattice dimension d must be at least 1 (got {0})")]
    BadDimension(u32),
    #[error("site {site} has {got} coordinates, expected {expected}")]
    SiteDimensionMismatch {
        site: String,
        got: usize,
        expected: usize,
    },
    #[error("operation requires matching regions")]
    RegionMismatch,
    #[error("operation requires matching spin models")]
    ModelMismatch,
    #[error("site {0} does not belong to the region")]
    SiteNotInRegion(String),
    #[error("region of {got} sites with q = {q} exceeds the dense-storage cap of {cap} sites")]
    RegionTooLarge { got: usize, q: u32, cap: usize },
    #[error("spin value {got} out of range for q = {q}")]
    SpinValueOutOfRange { got: u8, q: u32 },
    #[error("matrix must be square of size q^|Λ| = {expected} (got {rows}x{cols})")]
    MatrixShape {
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("embedding target must contain the source region")]
    NotASuperRegion,
    #[error("{0} is only defined for q = 2")]
    RequiresSpinHalf(&'static str),
}

/// Hard cap on dense arrow storage: `q^(2|Λ|)` entries must stay below this.
const MAX_DENSE_ENTRIES: usize = 1 << 28;

/// Global model parameters: `q` spin values per site on the lattice `Z^d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpinModel {
    q: u32,
    d: u32,
}

impl SpinModel {
    pub fn new(q: u32, d: u32) -> Result<Self, AlgebraError> {
        if q < 2 {
            return Err(AlgebraError::BadCardinality(q));
        }
        if d < 1 {
            return Err(AlgebraError::BadDimension(d));
        }
        Ok(SpinModel { q, d })
    }

    pub fn q(&self) -> u32 {
        self.q
    }

    pub fn d(&self) -> u32 {
        self.d
    }
}

/// A lattice site: a point of `Z^d`, ordered lexicographically by coordinates.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Site(pub Vec<i64>);

impl Site {
    pub fn new(coords: impl Into<Vec<i64>>) -> Self {
        Site(coords.into())
    }

    pub fn coords(&self) -> &[i64] {
        &self.0
    }

    /// Sup-norm distance to another site.
    pub fn sup_distance(&self, other: &Site) -> i64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .max()
            .unwrap_or(0)
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// Convenience constructor for a 1-d site.
pub fn site1(x: i64) -> Site {
    Site::new(vec![x])
}

/// Convenience constructor for a 2-d site.
pub fn site2(x: i64, y: i64) -> Site {
    Site::new(vec![x, y])
}

/// A finite set of sites of common dimension, kept sorted and deduplicated.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Region {
    sites: Vec<Site>,
}

impl Region {
    /// Builds a region from any iterator of sites; duplicates collapse.
    pub fn new(sites: impl IntoIterator<Item = Site>) -> Result<Self, AlgebraError> {
        let set: BTreeSet<Site> = sites.into_iter().collect();
        let sites: Vec<Site> = set.into_iter().collect();
        if let Some(first) = sites.first() {
            let dim = first.0.len();
            for s in &sites {
                if s.0.len() != dim {
                    return Err(AlgebraError::SiteDimensionMismatch {
                        site: s.to_string(),
                        got: s.0.len(),
                        expected: dim,
                    });
                }
            }
        }
        Ok(Region { sites })
    }

    pub fn empty() -> Self {
        Region { sites: Vec::new() }
    }

    /// Sites in ascending lexicographic order.
    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn contains(&self, s: &Site) -> bool {
        self.sites.binary_search(s).is_ok()
    }

    /// Position of a site in the sorted order, if present.
    pub fn position(&self, s: &Site) -> Option<usize> {
        self.sites.binary_search(s).ok()
    }

    pub fn is_subset_of(&self, other: &Region) -> bool {
        self.sites.iter().all(|s| other.contains(s))
    }

    pub fn intersects(&self, other: &Region) -> bool {
        self.sites.iter().any(|s| other.contains(s))
    }

    pub fn union(&self, other: &Region) -> Region {
        let mut set: BTreeSet<Site> = self.sites.iter().cloned().collect();
        set.extend(other.sites.iter().cloned());
        Region {
            sites: set.into_iter().collect(),
        }
    }

    pub fn intersection(&self, other: &Region) -> Region {
        Region {
            sites: self
                .sites
                .iter()
                .filter(|s| other.contains(s))
                .cloned()
                .collect(),
        }
    }

    pub fn difference(&self, other: &Region) -> Region {
        Region {
            sites: self
                .sites
                .iter()
                .filter(|s| !other.contains(s))
                .cloned()
                .collect(),
        }
    }

    /// All sites of `ambient` within sup-norm distance `r` of this region.
    pub fn enlarge_within(&self, r: f64, ambient: &Region) -> Region {
        Region {
            sites: ambient
                .sites
                .iter()
                .filter(|x| {
                    self.sites
                        .iter()
                        .any(|y| (x.sup_distance(y) as f64) <= r)
                })
                .cloned()
                .collect(),
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, s) in self.sites.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{s}")?;
        }
        write!(f, "}}")
    }
}

/// An assignment of a spin value (`0..q`) to every site of a region.
///
/// For `q = 2` the multiplicative convention applies: stored value 0 is the
/// spin `+1` and stored value 1 is the spin `-1`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SpinConfiguration {
    region: Region,
    /// One value per site, aligned with `region.sites()` order.
    vals: Vec<u8>,
}

impl SpinConfiguration {
    pub fn new(region: Region, vals: Vec<u8>, q: u32) -> Result<Self, AlgebraError> {
        debug_assert_eq!(region.len(), vals.len());
        for &v in &vals {
            if u32::from(v) >= q {
                return Err(AlgebraError::SpinValueOutOfRange { got: v, q });
            }
        }
        Ok(SpinConfiguration { region, vals })
    }

    /// The all-zero (all spins `+1`) configuration.
    pub fn all_plus(region: Region) -> Self {
        let vals = vec![0; region.len()];
        SpinConfiguration { region, vals }
    }

    pub fn from_map(map: &BTreeMap<Site, u8>, q: u32) -> Result<Self, AlgebraError> {
        let region = Region::new(map.keys().cloned())?;
        let vals = region.sites().iter().map(|s| map[s]).collect();
        SpinConfiguration::new(region, vals, q)
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn values(&self) -> &[u8] {
        &self.vals
    }

    pub fn value_at(&self, s: &Site) -> Option<u8> {
        self.region.position(s).map(|i| self.vals[i])
    }

    /// The spin at `s` as a complex number: the `v`-th power of the primitive
    /// `q`-th root of unity, so `+1`/`-1` for `q = 2`.
    pub fn spin_at(&self, s: &Site, q: u32) -> Option<Complex64> {
        self.value_at(s).map(|v| root_of_unity(v, q))
    }

    /// Applies a flip: shifts each flipped site's value by its `Z_q` step.
    pub fn flip_apply(&self, flip: &FlipSet, q: u32) -> SpinConfiguration {
        let mut vals = self.vals.clone();
        for (site, &step) in flip.shifts() {
            if let Some(i) = self.region.position(site) {
                vals[i] = ((u32::from(vals[i]) + u32::from(step)) % q) as u8;
            }
        }
        SpinConfiguration {
            region: self.region.clone(),
            vals,
        }
    }

    /// Restriction to a subregion (sites outside `sub` are dropped).
    pub fn restrict(&self, sub: &Region) -> SpinConfiguration {
        let vals = sub
            .sites()
            .iter()
            .map(|s| self.value_at(s).unwrap_or(0))
            .collect();
        SpinConfiguration {
            region: sub.clone(),
            vals,
        }
    }

    /// Joins two configurations on disjoint regions.
    pub fn merge(&self, other: &SpinConfiguration) -> SpinConfiguration {
        let region = self.region.union(&other.region);
        let vals = region
            .sites()
            .iter()
            .map(|s| {
                self.value_at(s)
                    .or_else(|| other.value_at(s))
                    .expect("merge covers every site")
            })
            .collect();
        SpinConfiguration { region, vals }
    }
}

/// The `v`-th power of the primitive `q`-th root of unity `e^{2πi/q}`.
pub fn root_of_unity(v: u8, q: u32) -> Complex64 {
    if q == 2 {
        // Keep the q = 2 values exactly ±1.
        if v == 0 {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::new(-1.0, 0.0)
        }
    } else {
        let theta = 2.0 * std::f64::consts::PI * f64::from(v) / f64::from(q);
        Complex64::new(theta.cos(), theta.sin())
    }
}

/// A site-wise `Z_q` shift supported on finitely many sites.
///
/// For `q = 2` a flip is just a set of sites (every nontrivial step is 1).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct FlipSet {
    /// Nontrivial shifts only: site -> step in `1..q`.
    shifts: BTreeMap<Site, u8>,
}

impl FlipSet {
    pub fn identity() -> Self {
        FlipSet::default()
    }

    /// Builds a flip from explicit steps; zero steps are dropped.
    pub fn new(steps: impl IntoIterator<Item = (Site, u8)>) -> Self {
        let shifts = steps.into_iter().filter(|&(_, v)| v != 0).collect();
        FlipSet { shifts }
    }

    /// `q = 2` convenience: flip by one step at each listed site.
    pub fn from_sites(sites: impl IntoIterator<Item = Site>) -> Self {
        FlipSet {
            shifts: sites.into_iter().map(|s| (s, 1)).collect(),
        }
    }

    pub fn shifts(&self) -> &BTreeMap<Site, u8> {
        &self.shifts
    }

    pub fn is_identity(&self) -> bool {
        self.shifts.is_empty()
    }

    /// Sites moved by this flip.
    pub fn support(&self) -> Region {
        Region {
            sites: self.shifts.keys().cloned().collect(),
        }
    }

    /// Group composition: step-wise sum mod `q`.
    pub fn compose(&self, other: &FlipSet, q: u32) -> FlipSet {
        let mut shifts = self.shifts.clone();
        for (site, &step) in &other.shifts {
            let v = shifts.entry(site.clone()).or_insert(0);
            *v = ((u32::from(*v) + u32::from(step)) % q) as u8;
        }
        shifts.retain(|_, v| *v != 0);
        FlipSet { shifts }
    }

    /// Group inverse: step-wise negation mod `q`.
    pub fn inverse(&self, q: u32) -> FlipSet {
        FlipSet {
            shifts: self
                .shifts
                .iter()
                .map(|(s, &v)| (s.clone(), ((q - u32::from(v)) % q) as u8))
                .collect(),
        }
    }

    /// Restriction to a subregion.
    pub fn restrict(&self, sub: &Region) -> FlipSet {
        FlipSet {
            shifts: self
                .shifts
                .iter()
                .filter(|(s, _)| sub.contains(s))
                .map(|(s, &v)| (s.clone(), v))
                .collect(),
        }
    }
}

/// A groupoid arrow: a configuration together with a flip acting on it.
///
/// The source is the configuration itself; the range is the flipped
/// configuration, so the arrow moves `source -> range`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupoidArrow {
    pub config: SpinConfiguration,
    pub flip: FlipSet,
}

impl GroupoidArrow {
    pub fn new(config: SpinConfiguration, flip: FlipSet) -> Self {
        GroupoidArrow { config, flip }
    }

    pub fn source(&self) -> &SpinConfiguration {
        &self.config
    }

    pub fn range(&self, q: u32) -> SpinConfiguration {
        self.config.flip_apply(&self.flip, q)
    }

    /// The reversed arrow, from range back to source.
    pub fn inverse(&self, q: u32) -> GroupoidArrow {
        GroupoidArrow {
            config: self.range(q),
            flip: self.flip.inverse(q),
        }
    }
}

/// Dense complex function on the arrows of the groupoid over one region.
///
/// Storage is row-major over (configuration index, flip index); both indices
/// run through the mixed-radix encoding with the region's first sorted site
/// as the most significant digit.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOperator {
    model: SpinModel,
    region: Region,
    /// `coeffs[cfg_idx * dim + flip_idx]`, `dim = q^|Λ|`.
    coeffs: Vec<Complex64>,
}

impl LocalOperator {
    /// The zero element of the arrow algebra on `region`.
    pub fn zero(model: SpinModel, region: Region) -> Result<Self, AlgebraError> {
        let dim = dense_dim(model.q, region.len())?;
        Ok(LocalOperator {
            model,
            region,
            coeffs: vec![Complex64::new(0.0, 0.0); dim * dim],
        })
    }

    /// The multiplicative unit: value 1 on every identity-flip arrow.
    pub fn identity(model: SpinModel, region: Region) -> Result<Self, AlgebraError> {
        let mut op = LocalOperator::zero(model, region)?;
        let dim = op.dim();
        for c in 0..dim {
            op.coeffs[c * dim] = Complex64::new(1.0, 0.0);
        }
        Ok(op)
    }

    /// The indicator of a single arrow.
    pub fn delta(model: SpinModel, arrow: &GroupoidArrow) -> Result<Self, AlgebraError> {
        let mut op = LocalOperator::zero(model, arrow.config.region().clone())?;
        let c = op.config_index(&arrow.config);
        let x = op.flip_index(&arrow.flip);
        let dim = op.dim();
        op.coeffs[c * dim + x] = Complex64::new(1.0, 0.0);
        Ok(op)
    }

    pub fn model(&self) -> SpinModel {
        self.model
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    /// Hilbert-space dimension `q^|Λ|`.
    pub fn dim(&self) -> usize {
        (self.model.q as usize).pow(self.region.len() as u32)
    }

    /// Number of arrows, `q^(2|Λ|)`.
    pub fn arrow_count(&self) -> usize {
        self.coeffs.len()
    }

    /// Mixed-radix index of a configuration (first sorted site most
    /// significant, ascending spin value).
    pub fn config_index(&self, cfg: &SpinConfiguration) -> usize {
        debug_assert_eq!(cfg.region(), &self.region);
        let q = self.model.q as usize;
        cfg.values().iter().fold(0, |acc, &v| acc * q + v as usize)
    }

    /// Inverse of [`Self::config_index`].
    pub fn index_config(&self, mut idx: usize) -> SpinConfiguration {
        let q = self.model.q as usize;
        let n = self.region.len();
        let mut vals = vec![0u8; n];
        for k in (0..n).rev() {
            vals[k] = (idx % q) as u8;
            idx /= q;
        }
        SpinConfiguration {
            region: self.region.clone(),
            vals,
        }
    }

    /// Mixed-radix index of a flip (same digit convention as configurations).
    pub fn flip_index(&self, flip: &FlipSet) -> usize {
        let q = self.model.q as usize;
        self.region.sites().iter().fold(0, |acc, s| {
            acc * q + flip.shifts.get(s).copied().unwrap_or(0) as usize
        })
    }

    /// Inverse of [`Self::flip_index`].
    pub fn index_flip(&self, mut idx: usize) -> FlipSet {
        let q = self.model.q as usize;
        let n = self.region.len();
        let mut steps = vec![0u8; n];
        for k in (0..n).rev() {
            steps[k] = (idx % q) as u8;
            idx /= q;
        }
        FlipSet::new(
            self.region
                .sites()
                .iter()
                .cloned()
                .zip(steps)
                .filter(|&(_, v)| v != 0),
        )
    }

    pub fn get(&self, arrow: &GroupoidArrow) -> Complex64 {
        let dim = self.dim();
        self.coeffs[self.config_index(&arrow.config) * dim + self.flip_index(&arrow.flip)]
    }

    pub fn set(&mut self, arrow: &GroupoidArrow, value: Complex64) {
        let dim = self.dim();
        let idx = self.config_index(&arrow.config) * dim + self.flip_index(&arrow.flip);
        self.coeffs[idx] = value;
    }

    /// Raw coefficient at (configuration index, flip index).
    pub fn coeff(&self, cfg_idx: usize, flip_idx: usize) -> Complex64 {
        self.coeffs[cfg_idx * self.dim() + flip_idx]
    }

    pub fn coeff_mut(&mut self, cfg_idx: usize, flip_idx: usize) -> &mut Complex64 {
        let dim = self.dim();
        &mut self.coeffs[cfg_idx * dim + flip_idx]
    }

    /// Groupoid convolution, summed arrow-by-arrow:
    /// `(f * g)(σ, X) = Σ_Y f(flip_apply(σ, Y), X - Y) · g(σ, Y)`.
    ///
    /// This is deliberately *not* implemented via matrices; the agreement of
    /// the two routes is a tested isomorphism property, not a definition.
    pub fn convolve(&self, g: &LocalOperator) -> Result<LocalOperator, AlgebraError> {
        if self.model != g.model {
            return Err(AlgebraError::ModelMismatch);
        }
        if self.region != g.region {
            return Err(AlgebraError::RegionMismatch);
        }
        let dim = self.dim();
        let q = self.model.q as usize;
        let n = self.region.len();
        let mut out = LocalOperator::zero(self.model, self.region.clone())?;
        // Digit tables: flip composition and configuration shifts are
        // digit-wise arithmetic mod q on the mixed-radix encodings.
        let radix: Vec<usize> = radix_weights(q, n);
        for sigma in 0..dim {
            for x in 0..dim {
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..dim {
                    let gv = g.coeffs[sigma * dim + y];
                    if gv == Complex64::new(0.0, 0.0) {
                        continue;
                    }
                    let sigma_y = digitwise_add(sigma, y, q, &radix);
                    let x_minus_y = digitwise_sub(x, y, q, &radix);
                    acc += self.coeffs[sigma_y * dim + x_minus_y] * gv;
                }
                out.coeffs[sigma * dim + x] = acc;
            }
        }
        Ok(out)
    }

    /// The involution `f*(γ) = conj(f(γ⁻¹))`.
    pub fn adjoint(&self) -> LocalOperator {
        let dim = self.dim();
        let q = self.model.q as usize;
        let radix = radix_weights(q, self.region.len());
        let mut out = LocalOperator::zero(self.model, self.region.clone()).expect("same size");
        for sigma in 0..dim {
            for x in 0..dim {
                // Inverse arrow of (σ, X) is (σ + X, -X).
                let range = digitwise_add(sigma, x, q, &radix);
                let neg_x = digitwise_neg(x, q, &radix);
                out.coeffs[sigma * dim + x] = self.coeffs[range * dim + neg_x].conj();
            }
        }
        out
    }

    /// Pointwise linear combination `self + z · g`.
    pub fn add_scaled(&self, z: Complex64, g: &LocalOperator) -> Result<LocalOperator, AlgebraError> {
        if self.model != g.model {
            return Err(AlgebraError::ModelMismatch);
        }
        if self.region != g.region {
            return Err(AlgebraError::RegionMismatch);
        }
        let mut out = self.clone();
        for (a, b) in out.coeffs.iter_mut().zip(&g.coeffs) {
            *a += z * b;
        }
        Ok(out)
    }

    pub fn scale(&self, z: Complex64) -> LocalOperator {
        let mut out = self.clone();
        for a in out.coeffs.iter_mut() {
            *a *= z;
        }
        out
    }

    /// Sum of identity-flip values; equals the trace of [`Self::to_matrix`].
    pub fn trace(&self) -> Complex64 {
        let dim = self.dim();
        (0..dim).map(|c| self.coeffs[c * dim]).sum()
    }

    /// Largest coefficient magnitude over all arrows.
    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// The defining representation: the arrow at `(σ, X)` becomes
    /// `|flip_apply(σ, X)⟩⟨σ|`, so column `σ`, row `range`.
    pub fn to_matrix(&self) -> DMatrix<Complex64> {
        let dim = self.dim();
        let q = self.model.q as usize;
        let radix = radix_weights(q, self.region.len());
        let mut m = DMatrix::zeros(dim, dim);
        for sigma in 0..dim {
            for x in 0..dim {
                let v = self.coeffs[sigma * dim + x];
                if v != Complex64::new(0.0, 0.0) {
                    let range = digitwise_add(sigma, x, q, &radix);
                    m[(range, sigma)] += v;
                }
            }
        }
        m
    }

    /// Inverse of [`Self::to_matrix`].
    pub fn from_matrix(
        model: SpinModel,
        region: Region,
        m: &DMatrix<Complex64>,
    ) -> Result<LocalOperator, AlgebraError> {
        let mut op = LocalOperator::zero(model, region)?;
        let dim = op.dim();
        if m.nrows() != dim || m.ncols() != dim {
            return Err(AlgebraError::MatrixShape {
                expected: dim,
                rows: m.nrows(),
                cols: m.ncols(),
            });
        }
        let q = model.q as usize;
        let radix = radix_weights(q, op.region.len());
        for sigma in 0..dim {
            for x in 0..dim {
                let range = digitwise_add(sigma, x, q, &radix);
                op.coeffs[sigma * dim + x] = m[(range, sigma)];
            }
        }
        Ok(op)
    }

    /// Tensors with the identity on `target \ region`, producing an operator
    /// on the larger region. The matrix image is the Kronecker product up to
    /// the interleaving forced by sorted site order.
    pub fn embed(&self, target: &Region) -> Result<LocalOperator, AlgebraError> {
        if !self.region.is_subset_of(target) {
            return Err(AlgebraError::NotASuperRegion);
        }
        let mut out = LocalOperator::zero(self.model, target.clone())?;
        let q = self.model.q as usize;
        let small_dim = self.dim();
        let big_dim = out.dim();
        // For each target site, where it sits in the source region (if at all).
        let placement: Vec<Option<usize>> = target
            .sites()
            .iter()
            .map(|s| self.region.position(s))
            .collect();
        let n_big = target.len();
        let mut big_cfg_digits = vec![0usize; n_big];
        for big_cfg in 0..big_dim {
            decompose(big_cfg, q, &mut big_cfg_digits);
            // Restrict the big configuration to the source region; sorted
            // order is inherited, so the digits stay in place.
            let mut small_cfg = 0usize;
            for (pos, digit) in placement.iter().zip(&big_cfg_digits) {
                if pos.is_some() {
                    small_cfg = small_cfg * q + digit;
                }
            }
            for small_flip in 0..small_dim {
                let v = self.coeffs[small_cfg * small_dim + small_flip];
                if v == Complex64::new(0.0, 0.0) {
                    continue;
                }
                // Spread the small flip digits across the big region; sites
                // outside the source region keep flip digit 0.
                let mut small_digits = vec![0usize; self.region.len()];
                decompose(small_flip, q, &mut small_digits);
                let mut big_flip = 0usize;
                for pos in &placement {
                    big_flip = big_flip * q
                        + match pos {
                            Some(j) => small_digits[*j],
                            None => 0,
                        };
                }
                out.coeffs[big_cfg * big_dim + big_flip] = v;
            }
        }
        Ok(out)
    }
}

/// `q^n` with the dense-storage cap enforced on `q^(2n)`.
fn dense_dim(q: u32, n: usize) -> Result<usize, AlgebraError> {
    let mut dim: usize = 1;
    for _ in 0..(2 * n) {
        dim = dim
            .checked_mul(q as usize)
            .filter(|&v| v <= MAX_DENSE_ENTRIES)
            .ok_or(AlgebraError::RegionTooLarge {
                got: n,
                q,
                cap: (MAX_DENSE_ENTRIES.ilog2() as usize) / (2 * (q as usize).ilog2() as usize).max(1),
            })?;
    }
    // dim now holds q^(2n); return q^n.
    let mut root = 1usize;
    for _ in 0..n {
        root *= q as usize;
    }
    Ok(root)
}

/// Positional weights of the mixed-radix encoding, most significant first.
fn radix_weights(q: usize, n: usize) -> Vec<usize> {
    let mut w = vec![1usize; n];
    for k in (0..n.saturating_sub(1)).rev() {
        w[k] = w[k + 1] * q;
    }
    w
}

fn decompose(mut idx: usize, q: usize, digits: &mut [usize]) {
    for k in (0..digits.len()).rev() {
        digits[k] = idx % q;
        idx /= q;
    }
}

/// Digit-wise `(a + b) mod q` on mixed-radix encodings.
fn digitwise_add(a: usize, b: usize, q: usize, radix: &[usize]) -> usize {
    let mut out = 0usize;
    for &w in radix {
        let da = (a / w) % q;
        let db = (b / w) % q;
        out += ((da + db) % q) * w;
    }
    out
}

/// Digit-wise `(a - b) mod q`.
fn digitwise_sub(a: usize, b: usize, q: usize, radix: &[usize]) -> usize {
    let mut out = 0usize;
    for &w in radix {
        let da = (a / w) % q;
        let db = (b / w) % q;
        out += ((da + q - db) % q) * w;
    }
    out
}

/// Digit-wise negation mod q.
fn digitwise_neg(a: usize, q: usize, radix: &[usize]) -> usize {
    let mut out = 0usize;
    for &w in radix {
        let da = (a / w) % q;
        out += ((q - da) % q) * w;
    }
    out
}

/// The operator whose matrix image is the product of a diagonal spin string
/// over `a_sites` and a flip string over `b_sites`, diagonal factor to the
/// left: on the arrow `(σ, B)` it takes the value `Π_{x∈A} s_x(flip(σ))`,
/// the spins read *after* the flip. Defined for `q = 2` only.
pub fn pauli_string(
    model: SpinModel,
    region: &Region,
    a_sites: &Region,
    b_sites: &Region,
) -> Result<LocalOperator, AlgebraError> {
    if model.q != 2 {
        return Err(AlgebraError::RequiresSpinHalf("pauli_string"));
    }
    for s in a_sites.sites().iter().chain(b_sites.sites()) {
        if !region.contains(s) {
            return Err(AlgebraError::SiteNotInRegion(s.to_string()));
        }
    }
    let mut op = LocalOperator::zero(model, region.clone())?;
    let dim = op.dim();
    let flip = FlipSet::from_sites(b_sites.sites().iter().cloned());
    let flip_idx = op.flip_index(&flip);
    for sigma in 0..dim {
        let cfg = op.index_config(sigma);
        let flipped = cfg.flip_apply(&flip, 2);
        let mut v = Complex64::new(1.0, 0.0);
        for x in a_sites.sites() {
            v *= flipped.spin_at(x, 2).expect("site checked in region");
        }
        op.coeffs[sigma * dim + flip_idx] = v;
    }
    Ok(op)
}
