//! Dense row-major tensors with named indices, and the linear-algebra
//! kernels the rest of the crate is built on: permutation, matricization,
//! pairwise contraction and SVD.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};

pub type IndexId = u32;

/// A tensor mode: a unique id, a display name and its extent.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Index {
    id: IndexId,
    name: Arc<str>,
    size: usize,
}

impl Index {
    pub fn new(id: IndexId, name: impl Into<Arc<str>>, size: usize) -> Result<Self> {
        if size == 0 {
            return invalid("index size must be at least 1");
        }
        Ok(Self {
            id,
            name: name.into(),
            size,
        })
    }

    pub fn id(&self) -> IndexId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Same id and name, different extent. Used when a bond is truncated.
    pub fn resized(&self, size: usize) -> Result<Self> {
        Index::new(self.id, self.name.clone(), size)
    }
}

impl fmt::Display for Index {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.name, self.size)
    }
}

/// Dense tensor of `f64` stored row-major with respect to `indices`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    indices: Vec<Index>,
    data: Vec<f64>,
}

fn element_count(indices: &[Index]) -> usize {
    indices.iter().map(Index::size).product()
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl Tensor {
    pub fn new(indices: Vec<Index>, data: Vec<f64>) -> Result<Self> {
        for (i, a) in indices.iter().enumerate() {
            if indices[..i].iter().any(|b| b.id == a.id) {
                return invalid(format!("duplicate index id {} ({})", a.id, a.name));
            }
        }
        let expected = element_count(&indices);
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match index sizes (expected {expected})",
                data.len()
            )));
        }
        Ok(Self { indices, data })
    }

    pub fn zeros(indices: Vec<Index>) -> Result<Self> {
        let n = element_count(&indices);
        Self::new(indices, vec![0.0; n])
    }

    /// Builds a tensor by evaluating `f` at every multi-index, row-major.
    pub fn from_fn(indices: Vec<Index>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let shape: Vec<usize> = indices.iter().map(Index::size).collect();
        let n = shape.iter().product();
        let mut coords = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&coords));
            for ax in (0..shape.len()).rev() {
                coords[ax] += 1;
                if coords[ax] < shape[ax] {
                    break;
                }
                coords[ax] = 0;
            }
        }
        Self::new(indices, data)
    }

    pub fn indices(&self) -> &[Index] {
        &self.indices
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn order(&self) -> usize {
        self.indices.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.indices.iter().map(Index::size).collect()
    }

    /// Number of stored elements, `size(T)`.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn position(&self, id: IndexId) -> Option<usize> {
        self.indices.iter().position(|ix| ix.id == id)
    }

    pub fn index(&self, id: IndexId) -> Option<&Index> {
        self.indices.iter().find(|ix| ix.id == id)
    }

    pub fn get(&self, coords: &[usize]) -> f64 {
        let strides = row_major_strides(&self.shape());
        let offset: usize = coords.iter().zip(&strides).map(|(c, s)| c * s).sum();
        self.data[offset]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            indices: self.indices.clone(),
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    /// Reorders the modes: output mode `i` is input mode `order[i]`.
    pub fn permute(&self, order: &[usize]) -> Result<Tensor> {
        let d = self.order();
        if order.len() != d {
            return invalid(format!("permutation has length {}, tensor order is {d}", order.len()));
        }
        let mut seen = vec![false; d];
        for &p in order {
            if p >= d || std::mem::replace(&mut seen[p], true) {
                return invalid(format!("{order:?} is not a permutation of 0..{d}"));
            }
        }
        let indices: Vec<Index> = order.iter().map(|&p| self.indices[p].clone()).collect();
        if order.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(self.clone());
        }
        let data = permute_data(&self.data, &self.shape(), order);
        Ok(Tensor { indices, data })
    }

    /// Permutes so that the modes appear in the order given by `ids`.
    pub fn permute_to(&self, ids: &[IndexId]) -> Result<Tensor> {
        let order = ids
            .iter()
            .map(|&id| {
                self.position(id)
                    .ok_or_else(|| Error::InvalidArgument(format!("index id {id} not in tensor")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.permute(&order)
    }

    /// Permutes modes into ascending id order.
    pub fn canonical(&self) -> Tensor {
        let mut order: Vec<usize> = (0..self.order()).collect();
        order.sort_by_key(|&p| self.indices[p].id);
        self.permute(&order).expect("sorted positions form a permutation")
    }

    /// The `rows`-matricization: row modes then column modes, each in
    /// ascending id order, reshaped to a matrix.
    pub fn matricize(&self, rows: &[IndexId]) -> Result<Matricization> {
        for &id in rows {
            if self.position(id).is_none() {
                return invalid(format!("row index id {id} not in tensor"));
            }
        }
        let mut row_ix: Vec<Index> = self
            .indices
            .iter()
            .filter(|ix| rows.contains(&ix.id))
            .cloned()
            .collect();
        if row_ix.is_empty() || row_ix.len() == self.order() {
            return invalid("matricization rows must be a proper nonempty subset of the indices");
        }
        let mut col_ix: Vec<Index> = self
            .indices
            .iter()
            .filter(|ix| !rows.contains(&ix.id))
            .cloned()
            .collect();
        row_ix.sort_by_key(Index::id);
        col_ix.sort_by_key(Index::id);
        Ok(self.matricize_ordered(row_ix, col_ix))
    }

    /// Matricization with caller-chosen mode order on both sides. Either side
    /// may be empty (a 1×n or m×1 matrix).
    pub(crate) fn matricize_ordered(&self, rows: Vec<Index>, cols: Vec<Index>) -> Matricization {
        let ids: Vec<IndexId> = rows.iter().chain(&cols).map(Index::id).collect();
        let permuted = self.permute_to(&ids).expect("rows and cols partition the indices");
        let m = element_count(&rows);
        let n = element_count(&cols);
        let matrix = DMatrix::from_row_slice(m, n, &permuted.data);
        Matricization {
            rows,
            cols,
            matrix,
            original: self.indices.clone(),
        }
    }

    /// Contracts over every shared index id. Result modes are the symmetric
    /// difference, in ascending id order.
    pub fn contract(&self, other: &Tensor) -> Result<Tensor> {
        let mut shared = Vec::new();
        for ix in &self.indices {
            if let Some(o) = other.index(ix.id) {
                if o.size != ix.size {
                    return Err(Error::ShapeMismatch(format!(
                        "index {} has size {} on one side and {} on the other",
                        ix.name, ix.size, o.size
                    )));
                }
                shared.push(ix.clone());
            }
        }
        shared.sort_by_key(Index::id);
        let left: Vec<Index> = self
            .indices
            .iter()
            .filter(|ix| !shared.contains(ix))
            .cloned()
            .collect();
        let right: Vec<Index> = other
            .indices
            .iter()
            .filter(|ix| !shared.iter().any(|s| s.id == ix.id))
            .cloned()
            .collect();
        let a = self.matricize_ordered(left.clone(), shared.clone()).matrix;
        let b = other.matricize_ordered(shared, right.clone()).matrix;
        let c = a * b;
        let mut indices = left;
        indices.extend(right);
        Ok(tensor_from_matrix(&c, indices).canonical())
    }

    /// Applies `m` (new_size × old_size) along mode `id`, giving that mode
    /// extent `m.nrows()`.
    pub fn apply_on_index(&self, id: IndexId, m: &DMatrix<f64>) -> Result<Tensor> {
        let pos = self
            .position(id)
            .ok_or_else(|| Error::InvalidArgument(format!("index id {id} not in tensor")))?;
        let ix = &self.indices[pos];
        if m.ncols() != ix.size {
            return Err(Error::ShapeMismatch(format!(
                "matrix has {} columns, index {} has size {}",
                m.ncols(),
                ix.name,
                ix.size
            )));
        }
        let rest: Vec<Index> = self.indices.iter().filter(|i| i.id != id).cloned().collect();
        let mat = self.matricize_ordered(vec![ix.clone()], rest.clone()).matrix;
        let out = m * mat;
        let mut indices = vec![ix.resized(m.nrows())?];
        indices.extend(rest);
        let order: Vec<IndexId> = self.indices.iter().map(Index::id).collect();
        tensor_from_matrix(&out, indices).permute_to(&order)
    }

    /// Frobenius norm of `self - other`, aligning `other`'s modes by id.
    pub fn distance(&self, other: &Tensor) -> Result<f64> {
        if self.order() != other.order() {
            return Err(Error::ShapeMismatch("tensors have different orders".into()));
        }
        let ids: Vec<IndexId> = self.indices.iter().map(Index::id).collect();
        let aligned = other.permute_to(&ids)?;
        if aligned.shape() != self.shape() {
            return Err(Error::ShapeMismatch("tensors have different shapes".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(&aligned.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Replaces the index metadata (names/ids) without touching data.
    pub fn with_indices(&self, indices: Vec<Index>) -> Result<Tensor> {
        if indices.iter().map(Index::size).ne(self.indices.iter().map(Index::size)) {
            return Err(Error::ShapeMismatch("relabeling must preserve index sizes".into()));
        }
        Tensor::new(indices, self.data.clone())
    }
}

/// Reshapes a row-major matrix into a tensor over `indices`.
pub(crate) fn tensor_from_matrix(m: &DMatrix<f64>, indices: Vec<Index>) -> Tensor {
    debug_assert_eq!(m.len(), element_count(&indices));
    // nalgebra is column-major, so the transpose's storage is our row-major order.
    let data = m.transpose().as_slice().to_vec();
    Tensor { indices, data }
}

fn permute_data(src: &[f64], shape: &[usize], order: &[usize]) -> Vec<f64> {
    let d = shape.len();
    let src_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = order.iter().map(|&p| shape[p]).collect();
    let steps: Vec<usize> = order.iter().map(|&p| src_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let inner = out_shape[d - 1];
    let inner_step = steps[d - 1];
    let mut coords = vec![0usize; d - 1];
    let mut base = 0usize;
    for _ in 0..n / inner {
        let mut off = base;
        for _ in 0..inner {
            out.push(src[off]);
            off += inner_step;
        }
        for ax in (0..d - 1).rev() {
            coords[ax] += 1;
            base += steps[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            base -= steps[ax] * out_shape[ax];
            coords[ax] = 0;
        }
    }
    out
}

/// A tensor reshaped to a matrix, with enough bookkeeping to undo it.
#[derive(Clone, Debug)]
pub struct Matricization {
    pub rows: Vec<Index>,
    pub cols: Vec<Index>,
    pub matrix: DMatrix<f64>,
    original: Vec<Index>,
}

impl Matricization {
    /// Inverse of [`Tensor::matricize`]: restores the original mode order.
    pub fn into_tensor(self) -> Tensor {
        let mut indices = self.rows;
        indices.extend(self.cols);
        let order: Vec<IndexId> = self.original.iter().map(Index::id).collect();
        tensor_from_matrix(&self.matrix, indices)
            .permute_to(&order)
            .expect("matricization bookkeeping is consistent")
    }
}

/// Economy SVD `m = u · diag(sigma) · vt`, singular values descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub sigma: Vec<f64>,
    pub vt: DMatrix<f64>,
}

impl Svd {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * &self.vt
    }
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        invalid("matrix has non-finite entries")
    }
}

fn to_faer(m: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Economy SVD. Computed with faer: nalgebra's SVD returns inaccurate
/// factors for some rank-deficient inputs, which are the common case here.
pub fn svd(m: &DMatrix<f64>) -> Result<Svd> {
    check_finite(m)?;
    if m.is_empty() {
        return invalid("cannot decompose an empty matrix");
    }
    let dec = to_faer(m)
        .thin_svd()
        .map_err(|e| Error::InvalidState(format!("SVD did not converge: {e:?}")))?;
    let (u, s, v) = (dec.U(), dec.S().column_vector(), dec.V());
    let k = s.nrows();
    Ok(Svd {
        u: DMatrix::from_fn(m.nrows(), k, |i, j| u[(i, j)]),
        sigma: (0..k).map(|i| s[i].max(0.0)).collect(),
        vt: DMatrix::from_fn(k, m.ncols(), |i, j| v[(j, i)]),
    })
}

/// Singular values only, descending.
pub fn singular_values(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_finite(m)?;
    if m.is_empty() {
        return Ok(Vec::new());
    }
    let s = to_faer(m)
        .singular_values()
        .map_err(|e| Error::InvalidState(format!("SVD did not converge: {e:?}")))?;
    Ok(s.into_iter().map(|x| x.max(0.0)).collect())
}
