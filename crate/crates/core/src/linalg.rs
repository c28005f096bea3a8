//! Dense symmetric linear-algebra kernels shared by every module.
//!
//! Eigen- and singular-vector outputs follow one convention everywhere:
//! values sorted descending with a stable sort, and each vector's
//! largest-magnitude entry made positive, so designs are reproducible.

use nalgebra::{DMatrix, DVector};

pub type Mat = DMatrix<f64>;
pub type Vect = DVector<f64>;

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry of `m - mᵀ`.
pub fn asymmetry(m: &Mat) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Flip each column so that its largest-magnitude entry is positive.
pub fn fix_signs(vectors: &mut Mat) {
    for mut col in vectors.column_iter_mut() {
        let mut pivot = 0.0f64;
        for &v in col.iter() {
            if v.abs() > pivot.abs() {
                pivot = v;
            }
        }
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
}

fn sorted_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    // sort_by is stable; equal values keep their solver order
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
pub fn sym_eigen_desc(m: &Mat) -> (Vect, Mat) {
    let n = m.nrows();
    if n == 0 {
        return (Vect::zeros(0), Mat::zeros(0, 0));
    }
    let eig = symmetrize(m).symmetric_eigen();
    let order = sorted_order(eig.eigenvalues.as_slice());
    let values = Vect::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Mat::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    fix_signs(&mut vectors);
    (values, vectors)
}

/// `U·diag(f(λ))·Uᵀ` for symmetric `m = U·diag(λ)·Uᵀ`.
pub fn sym_map(m: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    let (values, vectors) = sym_eigen_desc(m);
    let scaled = Mat::from_fn(vectors.nrows(), vectors.ncols(), |r, c| {
        vectors[(r, c)] * f(values[c])
    });
    scaled * vectors.transpose()
}

/// Symmetric square root of a PSD matrix; negative round-off is clamped.
pub fn sqrt_psd(m: &Mat) -> Mat {
    sym_map(m, |l| l.max(0.0).sqrt())
}

/// Symmetric inverse square root with eigenvalues floored at `floor`.
pub fn inv_sqrt_floored(m: &Mat, floor: f64) -> Mat {
    sym_map(m, |l| 1.0 / l.max(floor).sqrt())
}

/// Symmetric pseudo inverse square root: eigenvalues below `cutoff` map to 0.
pub fn pinv_sqrt(m: &Mat, cutoff: f64) -> Mat {
    sym_map(m, |l| if l > cutoff { 1.0 / l.sqrt() } else { 0.0 })
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &Mat) -> Mat {
    match symmetrize(m).cholesky() {
        Some(chol) => chol.inverse(),
        None => sym_map(m, |l| 1.0 / l),
    }
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    symmetrize(m).symmetric_eigen().eigenvalues.min()
}

/// `max |PᵀP - I|` entrywise.
pub fn orthonormality_error(p: &Mat) -> f64 {
    let gram = p.transpose() * p;
    let mut worst = 0.0f64;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

/// Orthogonal projector onto the span of the columns of `basis` (assumed
/// orthonormal).
pub fn projector(basis: &Mat) -> Mat {
    basis * basis.transpose()
}

/// Orthonormalize `candidates` in order (modified Gram-Schmidt with one
/// re-orthogonalization pass), dropping vectors whose residual falls below
/// `rel_tol` of their original norm. The result is completed to a full basis
/// of R^dim with natural basis vectors. Returns the basis and how many
/// columns came from `candidates`.
pub fn gram_schmidt_complete<I>(candidates: I, dim: usize, rel_tol: f64) -> (Mat, usize)
where
    I: IntoIterator<Item = Vect>,
{
    fn push(basis: &mut Vec<Vect>, v: Vect, dim: usize, rel_tol: f64) -> bool {
        let norm0 = v.norm();
        if basis.len() == dim || norm0 == 0.0 {
            return false;
        }
        let mut r = v;
        for _ in 0..2 {
            for q in basis.iter() {
                let proj = q.dot(&r);
                r.axpy(-proj, q, 1.0);
            }
        }
        let norm = r.norm();
        if norm <= rel_tol * norm0 {
            return false;
        }
        basis.push(r / norm);
        true
    }

    let mut basis: Vec<Vect> = Vec::with_capacity(dim);
    let mut from_candidates = 0;
    for v in candidates {
        if push(&mut basis, v, dim, rel_tol) {
            from_candidates += 1;
        }
    }
    for k in 0..dim {
        if basis.len() == dim {
            break;
        }
        let mut e = Vect::zeros(dim);
        e[k] = 1.0;
        push(&mut basis, e, dim, rel_tol);
    }
    let mat = if basis.is_empty() {
        Mat::zeros(dim, 0)
    } else {
        Mat::from_columns(&basis)
    };
    (mat, from_candidates)
}

/// Right singular vectors of `a` (columns of the returned `cols(a)×cols(a)`
/// orthogonal matrix), singular values descending, completed to a full
/// basis when `a` has fewer rows than columns. The second value holds the
/// singular values, zero-padded to `cols(a)`.
pub fn right_singular_basis(a: &Mat) -> (Mat, Vec<f64>) {
    let dim = a.ncols();
    if a.nrows() == 0 || dim == 0 {
        return (Mat::identity(dim, dim), vec![0.0; dim]);
    }
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let sv = svd.singular_values.as_slice();
    let order = sorted_order(sv);
    let mut values: Vec<f64> = order.iter().map(|&i| sv[i]).collect();
    let mut leading = Mat::from_fn(dim, order.len(), |r, c| v_t[(order[c], r)]);
    fix_signs(&mut leading);
    let (mut basis, _) =
        gram_schmidt_complete(leading.column_iter().map(|c| c.into_owned()), dim, 1e-8);
    // completion vectors come out of Gram-Schmidt with arbitrary sign
    let mut tail = basis.columns(order.len(), dim - order.len()).into_owned();
    fix_signs(&mut tail);
    basis
        .columns_mut(order.len(), dim - order.len())
        .copy_from(&tail);
    values.resize(dim, 0.0);
    (basis, values)
}

/// Numerical rank: singular values above `tol` times the largest (and above
/// `abs_tol`).
pub fn rank(a: &Mat, abs_tol: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .filter(|&&s| s > abs_tol)
        .count()
}

pub fn vstack(blocks: &[Mat]) -> Mat {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        out.rows_mut(at, b.nrows()).copy_from(b);
        at += b.nrows();
    }
    out
}

/// JSON representation of a dense matrix: explicit shape plus row-major data.
pub mod serde_matrix {
    use super::Mat;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Repr {
        pub rows: usize,
        pub cols: usize,
        pub data: Vec<f64>,
    }

    impl From<&Mat> for Repr {
        fn from(m: &Mat) -> Self {
            let mut data = Vec::with_capacity(m.len());
            for r in 0..m.nrows() {
                data.extend(m.row(r).iter());
            }
            Repr {
                rows: m.nrows(),
                cols: m.ncols(),
                data,
            }
        }
    }

    impl Repr {
        pub fn into_matrix<E: serde::de::Error>(self) -> Result<Mat, E> {
            if self.rows * self.cols != self.data.len() {
                return Err(E::custom(format!(
                    "matrix shape {}x{} does not match {} entries",
                    self.rows,
                    self.cols,
                    self.data.len()
                )));
            }
            Ok(Mat::from_row_slice(self.rows, self.cols, &self.data))
        }
    }

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        Repr::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        Repr::deserialize(d)?.into_matrix()
    }

    pub mod vec {
        use super::{Mat, Repr};
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        pub fn serialize<S: Serializer>(ms: &[Mat], s: S) -> Result<S::Ok, S::Error> {
            let reprs: Vec<Repr> = ms.iter().map(Repr::from).collect();
            reprs.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Mat>, D::Error> {
            Vec::<Repr>::deserialize(d)?
                .into_iter()
                .map(Repr::into_matrix)
                .collect()
        }
    }
}
