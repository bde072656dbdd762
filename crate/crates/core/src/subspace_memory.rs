//! Dual gradient projection memory.
//!
//! For every adapted projection the memory holds an orthonormal basis `M` of
//! the input directions earlier tasks used. Because the gradient of a linear
//! map `x ↦ x W` with respect to `W` is `xᵀ g`, its columns live in the span
//! of the inputs, so input activations serve as the gradient-subspace proxy.
//!
//! The memory stores either `M` itself or a basis of `M⊥`, whichever has
//! fewer columns. The stored side is never observable through
//! [`SubspaceMemory::effective_gradient_basis`]; only the cost changes.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{project_complement, qr_orthonormalize, thin_svd, DenseMatrix};
use crate::rng::Rng;

/// Singular values at or below this are treated as numerically zero when
/// choosing adapter directions.
pub const SINGULAR_VALUE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StoredSide {
    GradientSpace,
    Complement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Projection {
    Key,
    Value,
}

impl Projection {
    pub const BOTH: [Projection; 2] = [Projection::Key, Projection::Value];

    pub fn tag(self) -> &'static str {
        match self {
            Projection::Key => "key",
            Projection::Value => "value",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    /// Fraction of activation energy the memory must cover after an update.
    pub energy_threshold: f64,
    /// Maximum number of activation columns kept per buffer.
    pub activation_cap: usize,
    pub rank: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            energy_threshold: 0.95,
            activation_cap: 256,
            rank: 2,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self, ambient_dim: usize) -> Result<()> {
        if !(self.energy_threshold > 0.0 && self.energy_threshold < 1.0) {
            return Err(Error::config(format!(
                "energy threshold must lie in (0, 1), got {}",
                self.energy_threshold
            )));
        }
        if self.activation_cap == 0 {
            return Err(Error::config("activation cap must be positive"));
        }
        if self.rank == 0 || self.rank > ambient_dim {
            return Err(Error::config(format!(
                "rank must lie in 1..={ambient_dim}, got {}",
                self.rank
            )));
        }
        Ok(())
    }
}

/// Token embeddings seen at one projection's input, reservoir-sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBuffer {
    pub layer_id: usize,
    pub projection: Projection,
    dim: usize,
    cap: usize,
    seen: u64,
    columns: Vec<Vec<f64>>,
}

impl ActivationBuffer {
    pub fn new(layer_id: usize, projection: Projection, dim: usize, cap: usize) -> Self {
        Self {
            layer_id,
            projection,
            dim,
            cap,
            seen: 0,
            columns: Vec::new(),
        }
    }

    /// Wraps an explicit `d × n` sample matrix (columns are embeddings).
    pub fn from_samples(layer_id: usize, projection: Projection, samples: &DenseMatrix) -> Self {
        let columns = samples.columns();
        Self {
            layer_id,
            projection,
            dim: samples.rows(),
            cap: columns.len().max(1),
            seen: columns.len() as u64,
            columns,
        }
    }

    /// Offers one embedding; kept with probability `cap / seen` (Algorithm R).
    pub fn offer(&mut self, column: &[f64], rng: &mut Rng) {
        debug_assert_eq!(column.len(), self.dim);
        self.seen += 1;
        if self.columns.len() < self.cap {
            self.columns.push(column.to_vec());
        } else {
            let j = rng.random_range(0..self.seen);
            if (j as usize) < self.cap {
                self.columns[j as usize] = column.to_vec();
            }
        }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    /// Number of embeddings offered, including those not retained.
    pub fn offered(&self) -> u64 {
        self.seen
    }

    pub fn clear(&mut self) {
        self.columns.clear();
        self.seen = 0;
    }

    /// The `d × n` matrix `H`.
    pub fn samples(&self) -> DenseMatrix {
        DenseMatrix::from_columns(self.dim, &self.columns)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceMemory {
    ambient_dim: usize,
    stored_side: StoredSide,
    basis: DenseMatrix,
    memory_dim: usize,
}

/// Result of [`SubspaceMemory::update`].
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryUpdate {
    pub memory: SubspaceMemory,
    /// Directions added to the gradient-space side.
    pub added: usize,
    /// Covered energy fraction of the update's activations after the update.
    pub covered_energy: f64,
    /// True once the memory spans the whole ambient space.
    pub saturated: bool,
}

impl SubspaceMemory {
    pub fn new(ambient_dim: usize) -> Self {
        assert!(ambient_dim >= 1, "ambient dimension must be positive");
        Self {
            ambient_dim,
            stored_side: StoredSide::GradientSpace,
            basis: DenseMatrix::zeros(ambient_dim, 0),
            memory_dim: 0,
        }
    }

    /// Rebuilds a memory from its stored parts, checking every invariant.
    pub fn from_parts(
        ambient_dim: usize,
        stored_side: StoredSide,
        basis: DenseMatrix,
        memory_dim: usize,
    ) -> Result<Self> {
        if basis.rows() != ambient_dim || memory_dim > ambient_dim {
            return Err(Error::contract(format!(
                "memory basis {:?} inconsistent with ambient dim {ambient_dim} and memory dim {memory_dim}",
                basis.shape()
            )));
        }
        let expected_cols = match stored_side {
            StoredSide::GradientSpace => memory_dim,
            StoredSide::Complement => ambient_dim - memory_dim,
        };
        if basis.cols() != expected_cols {
            return Err(Error::contract(format!(
                "{stored_side:?} basis has {} columns, expected {expected_cols}",
                basis.cols()
            )));
        }
        crate::linalg::check_orthonormal(&basis, "memory basis")?;
        Ok(Self {
            ambient_dim,
            stored_side,
            basis,
            memory_dim,
        })
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn stored_side(&self) -> StoredSide {
        self.stored_side
    }

    pub fn stored_basis(&self) -> &DenseMatrix {
        &self.basis
    }

    /// Dimension of the gradient-space side, whichever side is stored.
    pub fn memory_dim(&self) -> usize {
        self.memory_dim
    }

    /// Directions still free for new adapters.
    pub fn free_dim(&self) -> usize {
        self.ambient_dim - self.memory_dim
    }

    fn switch_threshold(&self) -> usize {
        self.ambient_dim.div_ceil(2)
    }

    /// `d × memory_dim` orthonormal basis of the gradient-space side.
    pub fn effective_gradient_basis(&self) -> DenseMatrix {
        match self.stored_side {
            StoredSide::GradientSpace => self.basis.clone(),
            StoredSide::Complement => {
                orthonormal_complement(&self.basis, self.memory_dim)
                    .expect("stored complement basis is orthonormal")
            }
        }
    }

    /// Grows the memory so it covers at least `energy_threshold` of the
    /// buffer's energy. New directions are the leading left singular vectors
    /// of the activations with the current memory projected out.
    pub fn update(&self, buf: &ActivationBuffer, cfg: &MemoryConfig) -> Result<MemoryUpdate> {
        if buf.is_empty() {
            return Err(Error::Data(format!(
                "empty activation buffer for layer {} {}",
                buf.layer_id,
                buf.projection.tag()
            )));
        }
        let h = buf.samples();
        if h.rows() != self.ambient_dim {
            return Err(Error::Dimension {
                op: "update_memory",
                left: (self.ambient_dim, self.memory_dim),
                right: h.shape(),
            });
        }
        let m = self.effective_gradient_basis();
        let total = sq_norm(&h);
        let covered = if m.cols() == 0 { 0.0 } else { sq_norm(&m.t_matmul(&h)?) };
        if total == 0.0 || covered / total >= cfg.energy_threshold || self.free_dim() == 0 {
            return Ok(MemoryUpdate {
                memory: self.clone(),
                added: 0,
                covered_energy: if total == 0.0 { 1.0 } else { covered / total },
                saturated: self.free_dim() == 0,
            });
        }

        let residual = project_complement(&m, &h)?;
        let svd = thin_svd(&residual)?;
        let floor = SINGULAR_VALUE_FLOOR * total.sqrt();
        let mut k = 0;
        let mut energy = covered;
        for &s in svd.singular_values.iter().take(self.free_dim()) {
            if s <= floor {
                break;
            }
            k += 1;
            energy += s * s;
            if energy / total >= cfg.energy_threshold {
                break;
            }
        }
        if k == 0 {
            return Ok(MemoryUpdate {
                memory: self.clone(),
                added: 0,
                covered_energy: covered / total,
                saturated: false,
            });
        }

        // Re-project so the new directions are orthogonal to M to working
        // precision, not just to the accuracy of the SVD.
        let fresh = project_complement(&m, &svd.u.leading_columns(k))?;
        let fresh = qr_orthonormalize(&fresh)?;
        let new_dim = self.memory_dim + k;
        let new_total_covered = energy / total;

        let memory = match self.stored_side {
            StoredSide::GradientSpace => {
                let grown = m.hstack(&fresh)?;
                if new_dim > self.switch_threshold() {
                    let complement = orthonormal_complement(&grown, self.ambient_dim - new_dim)?;
                    Self {
                        ambient_dim: self.ambient_dim,
                        stored_side: StoredSide::Complement,
                        basis: complement,
                        memory_dim: new_dim,
                    }
                } else {
                    Self {
                        ambient_dim: self.ambient_dim,
                        stored_side: StoredSide::GradientSpace,
                        basis: grown,
                        memory_dim: new_dim,
                    }
                }
            }
            StoredSide::Complement => {
                let shrunk = project_complement(&fresh, &self.basis)?;
                let basis = range_basis(&shrunk, self.ambient_dim - new_dim)?;
                Self {
                    ambient_dim: self.ambient_dim,
                    stored_side: StoredSide::Complement,
                    basis,
                    memory_dim: new_dim,
                }
            }
        };
        let saturated = memory.memory_dim == memory.ambient_dim;
        Ok(MemoryUpdate {
            memory,
            added: k,
            covered_energy: new_total_covered,
            saturated,
        })
    }

    /// Chooses a `d × rank` adapter basis: the leading left singular vectors
    /// of the activations after projecting out the memory.
    pub fn select_adapter_basis(&self, buf: &ActivationBuffer, rank: usize) -> Result<DenseMatrix> {
        if buf.is_empty() {
            return Err(Error::Data(format!(
                "empty activation buffer for layer {} {}",
                buf.layer_id,
                buf.projection.tag()
            )));
        }
        if rank > self.free_dim() {
            return Err(Error::CapacityExhausted {
                requested: rank,
                available: self.free_dim(),
                context: format!(" (layer {} {})", buf.layer_id, buf.projection.tag()),
            });
        }
        let h = buf.samples();
        let m = self.effective_gradient_basis();
        let residual = project_complement(&m, &h)?;
        let svd = thin_svd(&residual)?;
        let found = svd
            .singular_values
            .iter()
            .filter(|&&s| s > SINGULAR_VALUE_FLOOR)
            .count();
        if found < rank {
            return Err(Error::InsufficientRank {
                requested: rank,
                found,
            });
        }
        let a = project_complement(&m, &svd.u.leading_columns(rank))?;
        qr_orthonormalize(&a)
    }
}

fn sq_norm(m: &DenseMatrix) -> f64 {
    m.data().iter().map(|v| v * v).sum()
}

/// Orthonormal basis (`d × k`) of the range of `m`, taken from its leading
/// left singular vectors.
fn range_basis(m: &DenseMatrix, k: usize) -> Result<DenseMatrix> {
    if k == 0 {
        return Ok(DenseMatrix::zeros(m.rows(), 0));
    }
    let svd = thin_svd(m)?;
    Ok(svd.u.leading_columns(k))
}

/// Orthonormal basis (`d × k`) of the orthogonal complement of `span(basis)`,
/// where `k = d − basis.cols()`.
fn orthonormal_complement(basis: &DenseMatrix, k: usize) -> Result<DenseMatrix> {
    let d = basis.rows();
    if k == 0 {
        return Ok(DenseMatrix::zeros(d, 0));
    }
    let projector = project_complement(basis, &DenseMatrix::identity(d))?;
    range_basis(&projector, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{orthonormality_error, principal_angles};
    use crate::rng::{gaussian_matrix, rng_for, Stream};

    fn buffer(h: &DenseMatrix) -> ActivationBuffer {
        ActivationBuffer::from_samples(0, Projection::Key, h)
    }

    fn cfg(eps: f64) -> MemoryConfig {
        MemoryConfig {
            energy_threshold: eps,
            activation_cap: 256,
            rank: 1,
        }
    }

    fn unit(d: usize, i: usize) -> Vec<f64> {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        e
    }

    /// Columns with random Gaussian coefficients on the given coordinates.
    fn coordinate_samples(d: usize, coords: &[usize], n: usize, seed: u64) -> DenseMatrix {
        let mut rng = rng_for(seed, Stream::Data, &[]);
        let coeffs = gaussian_matrix(&mut rng, coords.len(), n, 1.0);
        let mut h = DenseMatrix::zeros(d, n);
        for (r, &c) in coords.iter().enumerate() {
            for j in 0..n {
                h[(c, j)] = coeffs[(r, j)];
            }
        }
        h
    }

    #[test]
    fn init_is_empty_and_projects_to_identity() {
        for d in [1, 8] {
            let mem = SubspaceMemory::new(d);
            assert_eq!(mem.memory_dim(), 0);
            assert_eq!(mem.stored_side(), StoredSide::GradientSpace);
            assert_eq!(mem.effective_gradient_basis().shape(), (d, 0));
        }
        let h = crate::testutil::uniform_matrix(8, 5, 3);
        let mem = SubspaceMemory::new(8);
        assert_eq!(project_complement(&mem.effective_gradient_basis(), &h).unwrap(), h);
    }

    #[test]
    fn select_from_empty_memory_recovers_dominant_plane() {
        let h = coordinate_samples(4, &[0, 1], 20, 1);
        let a = SubspaceMemory::new(4).select_adapter_basis(&buffer(&h), 2).unwrap();
        let plane = DenseMatrix::from_columns(4, &[unit(4, 0), unit(4, 1)]);
        let angles = principal_angles(&a, &plane).unwrap();
        assert!(angles.iter().all(|t| *t <= 1e-8), "{angles:?}");
    }

    #[test]
    fn select_projects_out_memory() {
        let mem = SubspaceMemory::from_parts(
            2,
            StoredSide::GradientSpace,
            DenseMatrix::from_columns(2, &[unit(2, 0)]),
            1,
        )
        .unwrap();
        let h = coordinate_samples(2, &[0, 1], 10, 2);
        let a = mem.select_adapter_basis(&buffer(&h), 1).unwrap();
        assert!(a[(0, 0)].abs() < 1e-12);
        assert!((a[(1, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn select_errors() {
        let mem = SubspaceMemory::from_parts(2, StoredSide::GradientSpace, DenseMatrix::identity(2), 2).unwrap();
        let h = coordinate_samples(2, &[0, 1], 4, 3);
        assert!(matches!(
            mem.select_adapter_basis(&buffer(&h), 1),
            Err(Error::CapacityExhausted { .. })
        ));
        let h = coordinate_samples(4, &[0], 4, 3);
        assert!(matches!(
            SubspaceMemory::new(4).select_adapter_basis(&buffer(&h), 2),
            Err(Error::InsufficientRank { requested: 2, found: 1 })
        ));
    }

    #[test]
    fn single_dominant_direction() {
        let mut cols = Vec::new();
        let mut rng = rng_for(5, Stream::Data, &[]);
        let noise = gaussian_matrix(&mut rng, 6, 50, 1e-12);
        for j in 0..50 {
            let mut c = noise.column(j);
            c[0] += 1.0;
            cols.push(c);
        }
        let h = DenseMatrix::from_columns(6, &cols);
        let up = SubspaceMemory::new(6).update(&buffer(&h), &cfg(0.95)).unwrap();
        assert_eq!(up.added, 1);
        assert_eq!(up.memory.memory_dim(), 1);
        let m = up.memory.effective_gradient_basis();
        assert!((m[(0, 0)].abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn covered_memory_is_unchanged() {
        let h = coordinate_samples(5, &[1, 3], 30, 4);
        let first = SubspaceMemory::new(5).update(&buffer(&h), &cfg(0.99)).unwrap();
        let again = first.memory.update(&buffer(&h), &cfg(0.99)).unwrap();
        assert_eq!(again.added, 0);
        assert_eq!(again.memory, first.memory);
    }

    #[test]
    fn coordinate_pairs_fill_and_switch_sides() {
        let mut mem = SubspaceMemory::new(6);
        let mut dims = Vec::new();
        let mut sides = Vec::new();
        let mut saturated = false;
        for (t, pair) in [[0, 1], [2, 3], [4, 5]].iter().enumerate() {
            let h = coordinate_samples(6, pair, 40, 10 + t as u64);
            let up = mem.update(&buffer(&h), &cfg(0.99)).unwrap();
            mem = up.memory;
            saturated = up.saturated;
            dims.push(mem.memory_dim());
            sides.push(mem.stored_side());
            assert!(mem.stored_basis().cols() <= 6usize.div_ceil(2) + 1);
        }
        assert_eq!(dims, vec![2, 4, 6]);
        assert_eq!(
            sides,
            vec![StoredSide::GradientSpace, StoredSide::Complement, StoredSide::Complement]
        );
        assert!(saturated);
        assert!(mem.effective_gradient_basis().max_abs_diff(&DenseMatrix::identity(6)).unwrap() < 1e-10);
    }

    #[test]
    fn effective_basis_from_coordinate_complement() {
        let comp: Vec<Vec<f64>> = (2..8).map(|i| unit(8, i)).collect();
        let mem = SubspaceMemory::from_parts(8, StoredSide::Complement, DenseMatrix::from_columns(8, &comp), 2).unwrap();
        let m = mem.effective_gradient_basis();
        assert_eq!(m.shape(), (8, 2));
        assert!(orthonormality_error(&m) < 1e-10);
        let plane = DenseMatrix::from_columns(8, &[unit(8, 0), unit(8, 1)]);
        assert!(principal_angles(&m, &plane).unwrap().iter().all(|t| *t <= 1e-8));
    }

    #[test]
    fn from_parts_rejects_inconsistent_shapes() {
        let err = SubspaceMemory::from_parts(4, StoredSide::Complement, DenseMatrix::zeros(4, 1), 1);
        assert!(err.is_err());
    }

    #[test]
    fn reservoir_respects_cap_and_counts_offers() {
        let mut buf = ActivationBuffer::new(1, Projection::Value, 3, 4);
        let mut rng = rng_for(1, Stream::Reservoir, &[]);
        for i in 0..10 {
            buf.offer(&[i as f64, 0.0, 1.0], &mut rng);
        }
        assert_eq!(buf.len(), 4);
        assert_eq!(buf.offered(), 10);
        assert_eq!(buf.samples().shape(), (3, 4));
        buf.clear();
        assert!(buf.is_empty());
    }
}
