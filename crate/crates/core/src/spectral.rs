//! Finite coordinates for the resolved space `H_d` and the truncated noise
//! space `H_M`, the noise covariance spectrum, and the small dense tensor
//! algebra shared by every model.
//!
//! Vectors are plain `[f64]` slices in the orthonormal bases `{e_i}` and
//! `{f_m}`. Tensors are dense and row-major; a [`Bilinear`] with shape
//! `(out, a, b)` stores `T[i][a][b]` at `(i * a + a_idx) * b + b_idx`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Dimensions of the resolved space, truncation level of the noise space, and
/// the eigenvalues `q_m` of the noise covariance in the basis `{f_m}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpaceSpecRaw", into = "SpaceSpecRaw")]
pub struct SpaceSpec {
    d: usize,
    q: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SpaceSpecRaw {
    d: usize,
    q: Vec<f64>,
}

impl TryFrom<SpaceSpecRaw> for SpaceSpec {
    type Error = Error;

    fn try_from(raw: SpaceSpecRaw) -> Result<Self> {
        SpaceSpec::new(raw.d, raw.q)
    }
}

impl From<SpaceSpec> for SpaceSpecRaw {
    fn from(s: SpaceSpec) -> Self {
        SpaceSpecRaw { d: s.d, q: s.q }
    }
}

impl SpaceSpec {
    pub fn new(d: usize, q: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidParam {
                name: "d",
                reason: "resolved dimension must be at least 1".into(),
            });
        }
        if q.is_empty() {
            return Err(Error::InvalidParam {
                name: "q",
                reason: "noise truncation level must be at least 1".into(),
            });
        }
        if let Some(bad) = q.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidParam {
                name: "q",
                reason: format!("covariance eigenvalues must be finite and nonnegative, got {bad}"),
            });
        }
        if q.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidParam {
                name: "q",
                reason: "at least one covariance eigenvalue must be positive".into(),
            });
        }
        Ok(SpaceSpec { d, q })
    }

    /// Dimension of `H_d`.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Truncation level `M` of the noise space.
    pub fn m(&self) -> usize {
        self.q.len()
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn trace(&self) -> f64 {
        self.q.iter().sum()
    }

    /// Same basis, covariance scaled by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        SpaceSpec::new(self.d, self.q.iter().map(|v| v * alpha).collect())
    }
}

/// Dense matrix `L[i][a]` of a linear map from an `a`-dimensional space into a
/// `rows`-dimensional one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct LinearMap {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl LinearMap {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        LinearMap {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut l = LinearMap::zeros(n, n);
        for i in 0..n {
            l.set(i, i, 1.0);
        }
        l
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(shape_err("linear map", "at least one row", "0 rows"));
        }
        let c = rows[0].len();
        if c == 0 {
            return Err(shape_err("linear map", "at least one column", "0 columns"));
        }
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(shape_err(
                    "linear map row",
                    format!("{c} entries"),
                    format!("{} entries in row {i}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(LinearMap {
            rows: r,
            cols: c,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for a in 0..cols {
                data.push(f(i, a));
            }
        }
        LinearMap { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, a: usize) -> f64 {
        self.data[i * self.cols + a]
    }

    #[inline]
    pub fn set(&mut self, i: usize, a: usize, v: f64) {
        self.data[i * self.cols + a] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.rows];
        self.apply_into(u, &mut out)?;
        Ok(out)
    }

    pub fn apply_into(&self, u: &[f64], out: &mut [f64]) -> Result<()> {
        if u.len() != self.cols || out.len() != self.rows {
            return Err(shape_err(
                "linear map apply",
                format!("input {} / output {}", self.cols, self.rows),
                format!("input {} / output {}", u.len(), out.len()),
            ));
        }
        self.apply_unchecked(u, out);
        Ok(())
    }

    /// `out = L u` without shape checks; callers guarantee lengths.
    #[inline]
    pub(crate) fn apply_unchecked(&self, u: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = dot(row, u);
        }
    }

    /// Adjoint in the orthonormal bases, i.e. the matrix transpose.
    pub fn transpose(&self) -> LinearMap {
        LinearMap::from_fn(self.cols, self.rows, |a, i| self.get(i, a))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.data)
    }
}

impl TryFrom<Vec<Vec<f64>>> for LinearMap {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        LinearMap::from_rows(&rows)
    }
}

impl From<LinearMap> for Vec<Vec<f64>> {
    fn from(l: LinearMap) -> Self {
        l.to_rows()
    }
}

/// Dense rank-3 tensor `T[i][a][b]` of a bilinear map `(u, v) -> T(u, v)`.
///
/// The same layout is reused for the space derivative of the diffusion
/// coefficient, `D_j sigma^{i,m}` stored as `[i][j][m]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<Vec<f64>>>", into = "Vec<Vec<Vec<f64>>>")]
pub struct Bilinear {
    out: usize,
    a: usize,
    b: usize,
    data: Vec<f64>,
}

impl Bilinear {
    pub fn zeros(out: usize, a: usize, b: usize) -> Self {
        Bilinear {
            out,
            a,
            b,
            data: vec![0.0; out * a * b],
        }
    }

    pub fn from_fn(out: usize, a: usize, b: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(out * a * b);
        for i in 0..out {
            for j in 0..a {
                for k in 0..b {
                    data.push(f(i, j, k));
                }
            }
        }
        Bilinear { out, a, b, data }
    }

    pub fn from_nested(t: &[Vec<Vec<f64>>]) -> Result<Self> {
        let out = t.len();
        if out == 0 {
            return Err(shape_err("bilinear tensor", "nonempty outer index", "0"));
        }
        let a = t[0].len();
        let b = t[0].first().map_or(0, Vec::len);
        if a == 0 || b == 0 {
            return Err(shape_err("bilinear tensor", "nonempty inner indices", format!("{a}x{b}")));
        }
        let mut data = Vec::with_capacity(out * a * b);
        for (i, slab) in t.iter().enumerate() {
            if slab.len() != a {
                return Err(shape_err(
                    "bilinear tensor",
                    format!("{a} rows in slab {i}"),
                    slab.len(),
                ));
            }
            for (j, row) in slab.iter().enumerate() {
                if row.len() != b {
                    return Err(shape_err(
                        "bilinear tensor",
                        format!("{b} entries at [{i}][{j}]"),
                        row.len(),
                    ));
                }
                data.extend_from_slice(row);
            }
        }
        Ok(Bilinear { out, a, b, data })
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.out)
            .map(|i| {
                (0..self.a)
                    .map(|j| (0..self.b).map(|k| self.get(i, j, k)).collect())
                    .collect()
            })
            .collect()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.out, self.a, self.b)
    }

    pub fn out_dim(&self) -> usize {
        self.out
    }

    pub fn left_dim(&self) -> usize {
        self.a
    }

    pub fn right_dim(&self) -> usize {
        self.b
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.a + j) * self.b + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.a + j) * self.b + k] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.data)
    }

    /// `out[i] = sum_{a,b} T[i][a][b] u[a] v[b]`.
    pub fn apply(&self, u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.out];
        self.apply_into(u, v, &mut out)?;
        Ok(out)
    }

    pub fn apply_into(&self, u: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        if u.len() != self.a || v.len() != self.b || out.len() != self.out {
            return Err(shape_err(
                "bilinear apply",
                format!("({}, {}) -> {}", self.a, self.b, self.out),
                format!("({}, {}) -> {}", u.len(), v.len(), out.len()),
            ));
        }
        self.apply_unchecked(u, v, out);
        Ok(())
    }

    #[inline]
    pub(crate) fn apply_unchecked(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
        let slab = self.a * self.b;
        for (o, t) in out.iter_mut().zip(self.data.chunks_exact(slab)) {
            let mut acc = 0.0;
            for (uj, row) in u.iter().zip(t.chunks_exact(self.b)) {
                if *uj != 0.0 {
                    acc += uj * dot(row, v);
                }
            }
            *o = acc;
        }
    }

    /// Accumulates the linear map `v -> T(u, v)` into `into` (shape `out x b`).
    pub(crate) fn add_partial_left(&self, u: &[f64], into: &mut LinearMap) {
        for i in 0..self.out {
            for (j, uj) in u.iter().enumerate() {
                if *uj == 0.0 {
                    continue;
                }
                let base = (i * self.a + j) * self.b;
                for k in 0..self.b {
                    let cur = into.get(i, k);
                    into.set(i, k, cur + uj * self.data[base + k]);
                }
            }
        }
    }

    /// Averages the two inner indices: `(T[i][a][b] + T[i][b][a]) / 2`.
    /// Quadratic forms `T(u, u)` are unchanged.
    pub fn symmetrize_in_last_two(&self) -> Result<Bilinear> {
        if self.a != self.b {
            return Err(shape_err(
                "symmetrize_in_last_two",
                "square inner shape",
                format!("{}x{}", self.a, self.b),
            ));
        }
        Ok(Bilinear::from_fn(self.out, self.a, self.b, |i, j, k| {
            0.5 * (self.get(i, j, k) + self.get(i, k, j))
        }))
    }

    pub fn is_symmetric_in_last_two(&self, tol: f64) -> bool {
        self.a == self.b
            && (0..self.out).all(|i| {
                (0..self.a).all(|j| (0..j).all(|k| (self.get(i, j, k) - self.get(i, k, j)).abs() <= tol))
            })
    }
}

impl TryFrom<Vec<Vec<Vec<f64>>>> for Bilinear {
    type Error = Error;

    fn try_from(t: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        Bilinear::from_nested(&t)
    }
}

impl From<Bilinear> for Vec<Vec<Vec<f64>>> {
    fn from(t: Bilinear) -> Self {
        t.to_nested()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_bilinear(rng: &mut ChaCha8Rng, o: usize, a: usize, b: usize) -> Bilinear {
        Bilinear::from_fn(o, a, b, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn space_spec_rejects_degenerate_inputs() {
        assert!(SpaceSpec::new(0, vec![1.0]).is_err());
        assert!(SpaceSpec::new(1, vec![]).is_err());
        assert!(SpaceSpec::new(1, vec![0.0, 0.0]).is_err());
        assert!(SpaceSpec::new(1, vec![1.0, -0.1]).is_err());
        let s = SpaceSpec::new(2, vec![1.0, 0.5, 0.0]).unwrap();
        assert_eq!((s.d(), s.m()), (2, 3));
        assert_eq!(s.trace(), 1.5);
    }

    #[test]
    fn zero_tensor_applies_to_zero() {
        let t = Bilinear::zeros(3, 2, 4);
        let out = t.apply(&[1.0, -2.0], &[0.5, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn scalar_bilinear_is_product() {
        let t = Bilinear::from_nested(&[vec![vec![1.0]]]).unwrap();
        assert_eq!(t.apply(&[2.0], &[3.0]).unwrap(), vec![6.0]);
    }

    #[test]
    fn bilinear_shape_mismatch_is_an_error() {
        let t = Bilinear::zeros(2, 2, 3);
        assert!(matches!(t.apply(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::Shape { .. })));
        assert!(Bilinear::from_nested(&[vec![vec![1.0, 2.0], vec![1.0]]]).is_err());
    }

    #[test]
    fn bilinearity_holds_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let t = random_bilinear(&mut rng, 3, 4, 5);
            let u = random_vec(&mut rng, 4);
            let u2 = random_vec(&mut rng, 4);
            let v = random_vec(&mut rng, 5);
            let v2 = random_vec(&mut rng, 5);
            let alpha = rng.random_range(-2.0..2.0);
            let left: Vec<f64> = u.iter().zip(&u2).map(|(a, b)| alpha * a + b).collect();
            let right: Vec<f64> = v.iter().zip(&v2).map(|(a, b)| alpha * a + b).collect();
            let lhs = t.apply(&left, &v).unwrap();
            let (tu, tu2) = (t.apply(&u, &v).unwrap(), t.apply(&u2, &v).unwrap());
            let rhs = t.apply(&u, &right).unwrap();
            let (tv, tv2) = (t.apply(&u, &v).unwrap(), t.apply(&u, &v2).unwrap());
            for i in 0..3 {
                let scale = 1.0 + lhs[i].abs();
                assert!((lhs[i] - alpha * tu[i] - tu2[i]).abs() <= 1e-12 * scale);
                assert!((rhs[i] - alpha * tv[i] - tv2[i]).abs() <= 1e-12 * (1.0 + rhs[i].abs()));
            }
        }
    }

    #[test]
    fn symmetrize_fixed_point_and_averaging() {
        let sym = Bilinear::from_nested(&[vec![vec![1.0, 2.0], vec![2.0, 3.0]]]).unwrap();
        assert_eq!(sym.symmetrize_in_last_two().unwrap(), sym);

        let t = Bilinear::from_nested(&[vec![vec![0.0, 1.0], vec![0.0, 0.0]]]).unwrap();
        let s = t.symmetrize_in_last_two().unwrap();
        assert_eq!(s.get(0, 0, 1), 0.5);
        assert_eq!(s.get(0, 1, 0), 0.5);

        assert!(Bilinear::zeros(1, 2, 3).symmetrize_in_last_two().is_err());
    }

    #[test]
    fn symmetrize_preserves_quadratic_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = random_bilinear(&mut rng, 3, 4, 4);
        let s = t.symmetrize_in_last_two().unwrap();
        for _ in 0..100 {
            let u = random_vec(&mut rng, 4);
            let a = t.apply(&u, &u).unwrap();
            let b = s.apply(&u, &u).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn transpose_cases() {
        assert_eq!(LinearMap::identity(3).transpose(), LinearMap::identity(3));
        let l = LinearMap::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let lt = l.transpose();
        assert_eq!(lt.to_rows(), vec![vec![1.0, 4.0], vec![2.0, 5.0], vec![3.0, 6.0]]);
        assert_eq!(lt.transpose(), l);
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = LinearMap::from_fn(2, 5, |_, _| rng.random_range(-1.0..1.0));
        let lt = l.transpose();
        for _ in 0..20 {
            let y = random_vec(&mut rng, 5);
            let x = random_vec(&mut rng, 2);
            let lhs = dot(&l.apply(&y).unwrap(), &x);
            let rhs = dot(&y, &lt.apply(&x).unwrap());
            assert!((lhs - rhs).abs() <= 1e-12);
        }
    }

    #[test]
    fn partial_left_matches_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_bilinear(&mut rng, 2, 2, 3);
        let u = random_vec(&mut rng, 2);
        let v = random_vec(&mut rng, 3);
        let mut lm = LinearMap::zeros(2, 3);
        t.add_partial_left(&u, &mut lm);
        let a = lm.apply(&v).unwrap();
        let b = t.apply(&u, &v).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn serde_uses_nested_row_major_arrays() {
        let t = Bilinear::from_nested(&[vec![vec![1.0, 2.0], vec![3.0, 4.0]]]).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(json, "[[[1.0,2.0],[3.0,4.0]]]");
        let back: Bilinear = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        let bad: std::result::Result<LinearMap, _> = serde_json::from_str("[[1.0],[1.0,2.0]]");
        assert!(bad.is_err());
    }
}
