//! Intrinsic GMRF structure matrices and their identifiability constraints.
//!
//! Every [`StructureMatrix`] carries an orthonormal basis of its null space.
//! The declared rank deficiency is cross-checked against the spectrum at
//! construction; a disagreement is a hard error.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::CsrMatrix;

/// Relative eigenvalue threshold under which an eigenvalue counts as zero.
pub const RANK_REL_TOL: f64 = 1e-8;

/// Above this dimension the dense spectral cross-check is skipped for
/// directly built matrices (Kronecker products are checked through their
/// factors regardless of size).
const DENSE_CHECK_LIMIT: usize = 2500;

/// Effective relative threshold for type `T`: `1e-8`, raised for
/// single precision where it sits below machine resolution.
pub fn rank_tolerance<T: Scalar>() -> T {
    T::lit(RANK_REL_TOL).max(T::lit(64.0) * T::eps())
}

fn null_check_tolerance<T: Scalar>() -> T {
    T::lit(1e-8).max(T::lit(1e3) * T::eps())
}

/// Knorr-Held space-time interaction type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum InteractionKind {
    /// `I_s ⊗ I_t`
    I,
    /// `I_s ⊗ R_t`
    II,
    /// `R_s ⊗ I_t`
    III,
    /// `R_s ⊗ R_t`
    IV,
}

impl InteractionKind {
    pub const ALL: [InteractionKind; 4] = [Self::I, Self::II, Self::III, Self::IV];

    pub fn structured_space(self) -> bool {
        matches!(self, Self::III | Self::IV)
    }

    pub fn structured_time(self) -> bool {
        matches!(self, Self::II | Self::IV)
    }

    pub fn numeral(self) -> &'static str {
        match self {
            Self::I => "I",
            Self::II => "II",
            Self::III => "III",
            Self::IV => "IV",
        }
    }
}

impl fmt::Display for InteractionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.numeral())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StructureKind {
    Icar,
    Rw2,
    Iid,
    Interaction(InteractionKind),
}

#[derive(Debug, Clone)]
pub struct StructureMatrix<T> {
    kind: StructureKind,
    matrix: CsrMatrix<T>,
    null_basis: DMatrix<T>,
}

/// Counts eigenvalues below `tol · max|λ|`.
pub fn numerical_rank_deficiency<T: Scalar>(eigenvalues: &[T]) -> usize {
    let max = eigenvalues.iter().fold(T::zero(), |acc, v| acc.max(v.magnitude()));
    if max == T::zero() {
        return eigenvalues.len();
    }
    let tol = rank_tolerance::<T>() * max;
    eigenvalues.iter().filter(|v| v.magnitude() <= tol).count()
}

fn inf_norm<T: Scalar>(m: &CsrMatrix<T>) -> T {
    (0..m.dim())
        .map(|i| m.row(i).fold(T::zero(), |acc, (_, v)| acc + v.magnitude()))
        .fold(T::zero(), |acc, v| acc.max(v))
}

impl<T: Scalar> StructureMatrix<T> {
    /// Validates and wraps a structure matrix. The rank deficiency is the
    /// number of columns of `null_basis`.
    pub fn new(kind: StructureKind, matrix: CsrMatrix<T>, null_basis: DMatrix<T>) -> Result<Self> {
        let s = Self {
            kind,
            matrix,
            null_basis,
        };
        s.check_shape()?;
        s.check_null_basis()?;
        if s.dim() <= DENSE_CHECK_LIMIT {
            let eig = SymmetricEigen::new(s.matrix.to_dense());
            let min = eig.eigenvalues.iter().fold(T::zero(), |acc, v| acc.min(*v));
            let max = eig.eigenvalues.iter().fold(T::zero(), |acc, v| acc.max(*v));
            if min < -rank_tolerance::<T>() * max.max(T::one()) {
                return Err(Error::Dimension(format!(
                    "{kind:?} structure is not positive semidefinite (eigenvalue {min})"
                )));
            }
            let numerical = numerical_rank_deficiency(eig.eigenvalues.as_slice());
            if numerical != s.rank_deficiency() {
                return Err(Error::RankMismatch {
                    what: format!("{kind:?} structure"),
                    declared: s.rank_deficiency(),
                    numerical,
                });
            }
        }
        Ok(s)
    }

    fn check_shape(&self) -> Result<()> {
        if self.null_basis.nrows() != self.dim() {
            return Err(Error::Dimension(format!(
                "null basis has {} rows for a {}-dimensional structure",
                self.null_basis.nrows(),
                self.dim()
            )));
        }
        if !self.matrix.is_symmetric(T::zero()) {
            return Err(Error::Dimension(format!("{:?} structure is not symmetric", self.kind)));
        }
        Ok(())
    }

    fn check_null_basis(&self) -> Result<()> {
        let norm = inf_norm(&self.matrix).max(T::one());
        let tol = null_check_tolerance::<T>() * norm;
        for c in 0..self.null_basis.ncols() {
            let col: Vec<T> = self.null_basis.column(c).iter().copied().collect();
            let image = self.matrix.mul_vec(&col);
            let worst = image.iter().fold(T::zero(), |acc, v| acc.max(v.magnitude()));
            if worst > tol {
                return Err(Error::RankMismatch {
                    what: format!("{:?} null basis column {c} (|R v| = {worst})", self.kind),
                    declared: self.rank_deficiency(),
                    numerical: 0,
                });
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> StructureKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn matrix(&self) -> &CsrMatrix<T> {
        &self.matrix
    }

    /// Orthonormal basis of the null space, one vector per column.
    pub fn null_basis(&self) -> &DMatrix<T> {
        &self.null_basis
    }

    pub fn rank_deficiency(&self) -> usize {
        self.null_basis.ncols()
    }

    pub fn rank(&self) -> usize {
        self.dim() - self.rank_deficiency()
    }

    /// Debug export in Matrix Market coordinate format.
    pub fn write_matrix_market<W: Write>(&self, w: W) -> std::io::Result<()> {
        self.matrix.write_matrix_market(w)
    }
}

/// Second-order random walk structure `DᵀD`, where `D` is the `(T−2)×T`
/// second-difference operator.
pub fn rw2_structure<T: Scalar>(t: usize) -> Result<StructureMatrix<T>> {
    if t < 3 {
        return Err(Error::Dimension(format!("RW2 needs at least 3 time points, got {t}")));
    }
    let coef = [T::one(), -T::lit(2.0), T::one()];
    let mut triplets = Vec::with_capacity(9 * (t - 2));
    for r in 0..t - 2 {
        for a in 0..3 {
            for b in 0..3 {
                triplets.push((r + a, r + b, coef[a] * coef[b]));
            }
        }
    }
    // Orthonormal basis of {1, t}: normalised constant and centred time.
    let mut null_basis = DMatrix::zeros(t, 2);
    let n = T::from_usize_lossy(t);
    let centre = (n - T::one()) / T::lit(2.0);
    let mut ss = T::zero();
    for i in 0..t {
        let c = T::from_usize_lossy(i) - centre;
        ss += c * c;
    }
    let inv = T::one() / ss.sqrt();
    for i in 0..t {
        null_basis[(i, 0)] = T::one() / n.sqrt();
        null_basis[(i, 1)] = (T::from_usize_lossy(i) - centre) * inv;
    }
    StructureMatrix::new(StructureKind::Rw2, CsrMatrix::from_triplets(t, triplets), null_basis)
}

pub fn iid_structure<T: Scalar>(m: usize) -> Result<StructureMatrix<T>> {
    if m == 0 {
        return Err(Error::Dimension("IID effect needs at least one element".into()));
    }
    Ok(StructureMatrix {
        kind: StructureKind::Iid,
        matrix: CsrMatrix::identity(m),
        null_basis: DMatrix::zeros(m, 0),
    })
}

/// Eigen-decomposition of a structure factor; identity factors skip the
/// numerical routine.
struct Spectrum<T: Scalar> {
    values: Vec<T>,
    vectors: DMatrix<T>,
}

impl<T: Scalar> Spectrum<T> {
    fn of(s: &StructureMatrix<T>) -> Self {
        if s.kind == StructureKind::Iid {
            return Self::identity(s.dim());
        }
        let eig = SymmetricEigen::new(s.matrix.to_dense());
        Self {
            values: eig.eigenvalues.iter().copied().collect(),
            vectors: eig.eigenvectors,
        }
    }

    fn identity(n: usize) -> Self {
        Self {
            values: vec![T::one(); n],
            vectors: DMatrix::identity(n, n),
        }
    }

    fn max(&self) -> T {
        self.values.iter().fold(T::zero(), |a, v| a.max(v.magnitude()))
    }
}

fn kron_columns<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    // Columns are all a_k ⊗ b_l, ordered by k then l.
    let (na, ka) = a.shape();
    let (nb, kb) = b.shape();
    let mut out = DMatrix::zeros(na * nb, ka * kb);
    for k in 0..ka {
        for l in 0..kb {
            let col = k * kb + l;
            for i in 0..na {
                let av = a[(i, k)];
                if av == T::zero() {
                    continue;
                }
                for t in 0..nb {
                    out[(i * nb + t, col)] = av * b[(t, l)];
                }
            }
        }
    }
    out
}

/// Knorr-Held interaction structure over an `n × T` space-time lattice with
/// time-fastest layout (`index = region · T + time`).
///
/// `spatial` must be the `n × n` spatial structure and `temporal` the
/// `T × T` temporal structure; the identity factors for the unstructured
/// sides are built internally.
pub fn interaction_structure<T: Scalar>(
    kind: InteractionKind,
    spatial: &StructureMatrix<T>,
    temporal: &StructureMatrix<T>,
) -> Result<StructureMatrix<T>> {
    let n = spatial.dim();
    let nt = temporal.dim();
    let space = if kind.structured_space() {
        spatial.clone()
    } else {
        iid_structure(n)?
    };
    let time = if kind.structured_time() {
        temporal.clone()
    } else {
        iid_structure(nt)?
    };

    let ss = Spectrum::of(&space);
    let ts = Spectrum::of(&time);
    let max = ss.max() * ts.max();
    let tol = rank_tolerance::<T>() * max;
    let zero_s: Vec<bool> = ss.values.iter().map(|v| v.magnitude() * ts.max() <= tol).collect();
    let numerical = ss
        .values
        .iter()
        .flat_map(|a| ts.values.iter().map(move |b| (*a * *b).magnitude()))
        .filter(|p| *p <= tol)
        .count();
    let declared = n * nt - space.rank() * time.rank();
    if numerical != declared {
        return Err(Error::RankMismatch {
            what: format!("type {kind} interaction"),
            declared,
            numerical,
        });
    }

    let null_basis = match kind {
        InteractionKind::I => DMatrix::zeros(n * nt, 0),
        InteractionKind::II => kron_columns(&DMatrix::identity(n, n), time.null_basis()),
        InteractionKind::III => kron_columns(space.null_basis(), &DMatrix::identity(nt, nt)),
        InteractionKind::IV => {
            let range_cols: Vec<usize> = (0..n).filter(|&k| !zero_s[k]).collect();
            let range = ss.vectors.select_columns(&range_cols);
            let a = kron_columns(space.null_basis(), &DMatrix::identity(nt, nt));
            let b = kron_columns(&range, time.null_basis());
            let mut basis = DMatrix::zeros(n * nt, a.ncols() + b.ncols());
            basis.columns_mut(0, a.ncols()).copy_from(&a);
            basis.columns_mut(a.ncols(), b.ncols()).copy_from(&b);
            basis
        }
    };
    if null_basis.ncols() != declared {
        return Err(Error::RankMismatch {
            what: format!("type {kind} null basis"),
            declared,
            numerical: null_basis.ncols(),
        });
    }

    let s = StructureMatrix {
        kind: StructureKind::Interaction(kind),
        matrix: CsrMatrix::kron(space.matrix(), time.matrix()),
        null_basis,
    };
    s.check_shape()?;
    s.check_null_basis()?;
    Ok(s)
}

/// Linear constraints `A x = 0` with orthonormal rows.
#[derive(Debug, Clone)]
pub struct ConstraintSet<T> {
    a: DMatrix<T>,
}

pub fn constraint_set<T: Scalar>(structure: &StructureMatrix<T>) -> ConstraintSet<T> {
    ConstraintSet {
        a: structure.null_basis().transpose(),
    }
}

impl<T: Scalar> ConstraintSet<T> {
    pub fn none(dim: usize) -> Self {
        Self {
            a: DMatrix::zeros(0, dim),
        }
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.a
    }

    pub fn len(&self) -> usize {
        self.a.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.a.nrows() == 0
    }

    /// `A x`.
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        (0..self.a.nrows())
            .map(|r| self.a.row(r).iter().zip(x).fold(T::zero(), |acc, (a, v)| acc + *a * *v))
            .collect()
    }

    /// Largest `|(A x)_k|`.
    pub fn residual(&self, x: &[T]) -> T {
        self.apply(x)
            .into_iter()
            .fold(T::zero(), |acc, v| acc.max(v.magnitude()))
    }

    /// Orthogonal projection onto `{x : A x = 0}`, in place.
    pub fn project(&self, x: &mut [T]) {
        if self.is_empty() {
            return;
        }
        let ax = self.apply(x);
        for (r, coef) in ax.into_iter().enumerate() {
            if coef == T::zero() {
                continue;
            }
            for (xi, ai) in x.iter_mut().zip(self.a.row(r).iter()) {
                *xi -= coef * *ai;
            }
        }
    }
}

/// Role of a random effect in the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum EffectRole {
    /// Spatially structured (ICAR) effect `u`.
    SpatialStructured,
    /// Spatially unstructured (IID) effect `v`.
    SpatialUnstructured,
    /// Temporally structured (RW2) effect `γ`.
    TemporalStructured,
    /// Temporally unstructured (IID) effect `φ`.
    TemporalUnstructured,
    /// Space-time interaction `δ`.
    Interaction,
}

impl EffectRole {
    pub const ALL: [EffectRole; 5] = [
        Self::SpatialStructured,
        Self::SpatialUnstructured,
        Self::TemporalStructured,
        Self::TemporalUnstructured,
        Self::Interaction,
    ];

    /// Short symbol used in parameter labels and outputs.
    pub fn symbol(self) -> &'static str {
        match self {
            Self::SpatialStructured => "u",
            Self::SpatialUnstructured => "v",
            Self::TemporalStructured => "gamma",
            Self::TemporalUnstructured => "phi",
            Self::Interaction => "delta",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.symbol() == s)
    }
}

/// Gamma(shape, rate) prior on a precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl Default for GammaPrior {
    fn default() -> Self {
        Self { shape: 1.0, rate: 5e-5 }
    }
}

/// Maps (region, time unit) coordinates onto positions of an effect vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndexMap {
    Region {
        n: usize,
    },
    Time {
        n: usize,
    },
    /// Time-fastest: `region · n_time + time`.
    RegionTime {
        n_regions: usize,
        n_time: usize,
    },
}

impl IndexMap {
    pub fn dim(&self) -> usize {
        match *self {
            Self::Region { n } | Self::Time { n } => n,
            Self::RegionTime { n_regions, n_time } => n_regions * n_time,
        }
    }

    #[inline]
    pub fn position(&self, region: usize, time: usize) -> usize {
        match *self {
            Self::Region { .. } => region,
            Self::Time { .. } => time,
            Self::RegionTime { n_time, .. } => region * n_time + time,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RandomEffectBlock<T> {
    pub role: EffectRole,
    pub structure: Arc<StructureMatrix<T>>,
    pub precision_prior: GammaPrior,
    pub constraints: Arc<ConstraintSet<T>>,
    pub index_map: IndexMap,
}

impl<T: Scalar> RandomEffectBlock<T> {
    pub fn new(role: EffectRole, structure: Arc<StructureMatrix<T>>, index_map: IndexMap) -> Result<Self> {
        if structure.dim() != index_map.dim() {
            return Err(Error::Dimension(format!(
                "{} block: structure dim {} vs index map dim {}",
                role.symbol(),
                structure.dim(),
                index_map.dim()
            )));
        }
        let constraints = Arc::new(constraint_set(&structure));
        Ok(Self {
            role,
            structure,
            precision_prior: GammaPrior::default(),
            constraints,
            index_map,
        })
    }

    pub fn dim(&self) -> usize {
        self.structure.dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{icar_structure, AdjacencyGraph};

    fn path_icar(n: usize) -> StructureMatrix<f64> {
        let g = AdjacencyGraph::from_index_pairs(n, (0..n - 1).map(|i| (i, i + 1))).unwrap();
        icar_structure(&g).unwrap()
    }

    #[test]
    fn rw2_t4_is_dtd() {
        let r = rw2_structure::<f64>(4).unwrap();
        let d = DMatrix::from_row_slice(2, 4, &[1.0, -2.0, 1.0, 0.0, 0.0, 1.0, -2.0, 1.0]);
        assert_eq!(r.matrix().to_dense(), d.transpose() * d);
        assert_eq!(r.rank_deficiency(), 2);
        assert_eq!(r.matrix().get(1, 1), 5.0);
        assert_eq!(r.matrix().get(2, 2), 5.0);
    }

    #[test]
    fn rw2_too_short() {
        assert!(matches!(rw2_structure::<f64>(2), Err(Error::Dimension(_))));
    }

    #[test]
    fn rw2_large_rank() {
        let r = rw2_structure::<f64>(182).unwrap();
        assert_eq!(r.rank(), 180);
    }

    #[test]
    fn iid_shapes() {
        let one = iid_structure::<f64>(1).unwrap();
        assert_eq!(one.matrix().to_dense(), DMatrix::identity(1, 1));
        let five = iid_structure::<f64>(5).unwrap();
        assert_eq!(five.rank(), 5);
        assert_eq!(
            iid_structure::<f64>(42).unwrap().matrix().to_dense(),
            DMatrix::identity(42, 42)
        );
        assert!(iid_structure::<f64>(0).is_err());
    }

    #[test]
    fn type_one_is_identity() {
        let k = interaction_structure(InteractionKind::I, &path_icar(3), &rw2_structure(4).unwrap()).unwrap();
        assert_eq!(k.matrix(), iid_structure::<f64>(12).unwrap().matrix());
        assert_eq!(k.rank(), 12);
    }

    #[test]
    fn type_four_nullity() {
        let k = interaction_structure(InteractionKind::IV, &path_icar(3), &rw2_structure(4).unwrap()).unwrap();
        assert_eq!(k.dim(), 12);
        assert_eq!(k.rank(), 4);
        assert_eq!(constraint_set(&k).len(), 8);
    }

    #[test]
    fn type_three_null_vectors_constant_per_time() {
        let k = interaction_structure(InteractionKind::III, &path_icar(3), &rw2_structure(4).unwrap()).unwrap();
        assert_eq!(k.rank_deficiency(), 4);
        // Constant over regions at a fixed time unit lies in the null space.
        for t in 0..4 {
            let mut x = vec![0.0; 12];
            for i in 0..3 {
                x[i * 4 + t] = 1.0;
            }
            let y = k.matrix().mul_vec(&x);
            assert!(y.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn rw2_constraints_span_constant_and_linear() {
        let c = constraint_set(&rw2_structure::<f64>(4).unwrap());
        assert_eq!(c.len(), 2);
        let mut x = vec![3.0, -1.0, 4.0, 1.5];
        c.project(&mut x);
        let sum: f64 = x.iter().sum();
        let lin: f64 = x.iter().enumerate().map(|(t, v)| t as f64 * v).sum();
        assert!(sum.abs() < 1e-12 && lin.abs() < 1e-12);
    }

    #[test]
    fn icar_constraint_is_sum_to_zero() {
        let c = constraint_set(&path_icar(5));
        assert_eq!(c.len(), 1);
        let row = c.matrix().row(0);
        let first = row[0];
        assert!(row.iter().all(|v| (v - first).abs() < 1e-15));
    }

    #[test]
    fn index_map_bijection() {
        let m = IndexMap::RegionTime {
            n_regions: 3,
            n_time: 4,
        };
        let mut seen = vec![false; 12];
        for i in 0..3 {
            for t in 0..4 {
                let p = m.position(i, t);
                assert!(!seen[p]);
                seen[p] = true;
            }
        }
        assert!(seen.into_iter().all(|s| s));
        assert_eq!(m.position(1, 2), 6);
    }

    #[test]
    fn single_precision_structures() {
        let g = AdjacencyGraph::from_index_pairs(4, [(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        let s = icar_structure::<f32>(&g).unwrap();
        let t = rw2_structure::<f32>(6).unwrap();
        let k = interaction_structure(InteractionKind::IV, &s, &t).unwrap();
        assert_eq!(k.rank_deficiency(), 24 - 3 * 4);
    }

    #[test]
    fn matrix_market_export() {
        let mut buf = Vec::new();
        rw2_structure::<f64>(3).unwrap().write_matrix_market(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("3 3 9"));
    }
}
