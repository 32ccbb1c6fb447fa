//! Polynomial spline bases on `[0, 1]` with equally spaced interior knots.

use nalgebra::{DMatrix, DVector};

use crate::error::{GaplmError, Result};
use crate::types::ClusterDataset;

/// Number of interior knots: the integer part of `n^{1/(2p+3)}`, at least 1.
pub fn knot_count(n: usize, degree: usize) -> usize {
    let e = (2 * degree + 3) as i32;
    let n = n.max(1);
    let mut k = (n as f64).powf(1.0 / e as f64).floor().max(1.0) as usize;
    // powf may land a hair below an exact root
    while ((k + 1) as f64).powi(e) <= n as f64 {
        k += 1;
    }
    while k > 1 && (k as f64).powi(e) > n as f64 {
        k -= 1;
    }
    k
}

/// Clamped knot vector on `[0, 1]`: `p + 1` copies of each boundary knot
/// around strictly increasing interior knots.
#[derive(Clone, Debug, PartialEq)]
pub struct KnotSequence {
    pub degree: usize,
    pub interior: Vec<f64>,
    full: Vec<f64>,
}

impl KnotSequence {
    pub fn new(interior: Vec<f64>, degree: usize) -> Result<Self> {
        if degree < 1 {
            return Err(GaplmError::Domain("spline degree must be at least 1".into()));
        }
        let mut prev = 0.0;
        for &k in &interior {
            if !(k > prev && k < 1.0) {
                return Err(GaplmError::Domain(format!(
                    "interior knots must be strictly increasing inside (0, 1): {interior:?}"
                )));
            }
            prev = k;
        }
        let mut full = vec![0.0; degree + 1];
        full.extend(interior.iter().copied());
        full.extend(std::iter::repeat_n(1.0, degree + 1));
        Ok(Self { degree, interior, full })
    }

    pub fn equally_spaced(n_interior: usize, degree: usize) -> Result<Self> {
        let step = 1.0 / (n_interior as f64 + 1.0);
        Self::new((1..=n_interior).map(|j| j as f64 * step).collect(), degree)
    }

    /// `0 = u_0 < u_1 < ... < u_{N+1} = 1`.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b = vec![0.0];
        b.extend(self.interior.iter().copied());
        b.push(1.0);
        b
    }

    /// Number of raw basis functions, `N + p + 1`.
    pub fn n_raw(&self) -> usize {
        self.interior.len() + self.degree + 1
    }

    pub fn full(&self) -> &[f64] {
        &self.full
    }

    fn span(&self, x: f64) -> usize {
        let p = self.degree;
        let last = self.n_raw() - 1;
        if x >= 1.0 {
            return last;
        }
        // largest i in [p, last] with full[i] <= x
        let mut lo = p;
        let mut hi = last + 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.full[mid] <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

/// All `N + p + 1` B-spline basis functions at `x` (Cox-de Boor).
pub fn eval_raw_basis(x: f64, knots: &KnotSequence) -> Result<DVector<f64>> {
    if !(0.0..=1.0).contains(&x) {
        return Err(GaplmError::Domain(format!("spline argument {x} outside [0, 1]")));
    }
    let p = knots.degree;
    let u = knots.full();
    let span = knots.span(x);
    let mut n = vec![0.0; p + 1];
    let mut left = vec![0.0; p + 1];
    let mut right = vec![0.0; p + 1];
    n[0] = 1.0;
    for j in 1..=p {
        left[j] = x - u[span + 1 - j];
        right[j] = u[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let tmp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        n[j] = saved;
    }
    let mut out = DVector::zeros(knots.n_raw());
    for (r, v) in n.into_iter().enumerate() {
        out[span - p + r] = v;
    }
    Ok(out)
}

/// Subtracts column means. Returns the centered design and the means.
pub fn center_columns(design: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let rows = design.nrows().max(1) as f64;
    let means = DVector::from_iterator(design.ncols(), design.column_iter().map(|c| c.sum() / rows));
    let mut out = design.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    (out, means)
}

/// Drops the first raw column (the constant direction is carried by the
/// intercept) and centers the rest.
pub fn center_basis(raw: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let kept = raw.columns(1, raw.ncols().saturating_sub(1)).into_owned();
    center_columns(&kept)
}

/// `K = (1/n) sum_i (1/T_i) sum_t b_it b_it^T` for a design whose rows are
/// stacked cluster by cluster with the given sizes.
pub fn gram_matrix(centered: &DMatrix<f64>, cluster_sizes: &[usize]) -> Result<DMatrix<f64>> {
    let total: usize = cluster_sizes.iter().sum();
    if total != centered.nrows() {
        return Err(GaplmError::Dimension(format!(
            "design has {} rows, cluster sizes sum to {total}",
            centered.nrows()
        )));
    }
    let j = centered.ncols();
    let mut k = DMatrix::zeros(j, j);
    let mut start = 0;
    for &t in cluster_sizes {
        let block = centered.rows(start, t);
        k += (block.transpose() * block) / t as f64;
        start += t;
    }
    let n = cluster_sizes.len().max(1) as f64;
    k /= n;
    Ok(k)
}

/// `sqrt(gamma^T K gamma)`, clipped at zero against rounding.
pub fn group_norm(k: &DMatrix<f64>, gamma: &DVector<f64>) -> f64 {
    (gamma.dot(&(k * gamma))).max(0.0).sqrt()
}

/// Knots, centering offsets and Gram matrices for every nonparametric
/// covariate of a training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineSystem {
    pub degree: usize,
    pub knots: Vec<KnotSequence>,
    /// Per covariate, the training means of raw columns `2..=N+p+1`.
    pub offsets: Vec<DVector<f64>>,
    pub grams: Vec<DMatrix<f64>>,
    j_n: usize,
}

impl SplineSystem {
    pub fn build(ds: &ClusterDataset, degree: usize) -> Result<Self> {
        let n_int = knot_count(ds.n_clusters(), degree);
        Self::build_with_knots(ds, degree, n_int)
    }

    pub fn build_with_knots(ds: &ClusterDataset, degree: usize, n_interior: usize) -> Result<Self> {
        let seq = KnotSequence::equally_spaced(n_interior, degree)?;
        let sizes = ds.cluster_sizes();
        let n_obs = ds.n_obs();
        let mut knots = Vec::with_capacity(ds.d_x);
        let mut offsets = Vec::with_capacity(ds.d_x);
        let mut grams = Vec::with_capacity(ds.d_x);
        for l in 0..ds.d_x {
            let mut raw = DMatrix::zeros(n_obs, seq.n_raw());
            let mut row = 0;
            for c in &ds.clusters {
                for t in 0..c.size() {
                    raw.set_row(row, &eval_raw_basis(c.x[(t, l)], &seq)?.transpose());
                    row += 1;
                }
            }
            let (centered, means) = center_basis(&raw);
            grams.push(gram_matrix(&centered, &sizes)?);
            offsets.push(means);
            knots.push(seq.clone());
        }
        Ok(Self { degree, knots, offsets, grams, j_n: n_interior + degree })
    }

    /// Centered basis dimension `J_n = N_n + p`.
    pub fn j_n(&self) -> usize {
        self.j_n
    }

    pub fn d_x(&self) -> usize {
        self.knots.len()
    }

    pub fn n_interior(&self) -> usize {
        self.knots.first().map_or(0, |k| k.interior.len())
    }

    /// Centered basis `B_l(x)` of covariate `l`.
    pub fn eval_centered(&self, l: usize, x: f64) -> Result<DVector<f64>> {
        let raw = eval_raw_basis(x, &self.knots[l])?;
        Ok(raw.rows(1, self.j_n).into_owned() - &self.offsets[l])
    }

    /// Spline block of the design for one cluster: `T x (d_x J_n)`.
    pub fn cluster_design(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let d_x = self.d_x();
        if x.ncols() != d_x {
            return Err(GaplmError::Dimension(format!("X has {} columns, expected {d_x}", x.ncols())));
        }
        let mut out = DMatrix::zeros(x.nrows(), d_x * self.j_n);
        for t in 0..x.nrows() {
            for l in 0..d_x {
                let b = self.eval_centered(l, x[(t, l)])?;
                out.view_mut((t, l * self.j_n), (1, self.j_n)).copy_from(&b.transpose());
            }
        }
        Ok(out)
    }

    /// `alpha_l(x) = B_l(x)^T gamma_l`.
    pub fn eval_function(&self, l: usize, gamma: &DVector<f64>, x: f64) -> Result<f64> {
        Ok(self.eval_centered(l, x)?.dot(gamma))
    }

    /// `int_0^1 alpha_l(x) dx` by Simpson's rule on every knot span, exact up
    /// to cubic splines.
    pub fn integral(&self, l: usize, gamma: &DVector<f64>) -> Result<f64> {
        const M: usize = 8;
        let mut total = 0.0;
        for w in self.knots[l].breakpoints().windows(2) {
            let h = (w[1] - w[0]) / M as f64;
            let mut acc = self.eval_function(l, gamma, w[0])? + self.eval_function(l, gamma, w[1])?;
            for i in 1..M {
                acc += self.eval_function(l, gamma, w[0] + i as f64 * h)? * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            total += acc * h / 3.0;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{least_squares, max_abs_diff};
    use crate::types::Cluster;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, d_x: usize) -> ClusterDataset {
        let clusters = (0..n)
            .map(|_| {
                let t = rng.random_range(1..=5);
                Cluster::new(
                    DVector::zeros(t),
                    DMatrix::from_fn(t, d_x, |_, _| rng.random::<f64>()),
                    DMatrix::from_element(t, 1, 1.0),
                )
            })
            .collect();
        ClusterDataset::new(clusters, d_x, 1)
    }

    #[test]
    fn knot_count_examples() {
        assert_eq!(knot_count(200, 1), 2);
        assert_eq!(knot_count(200, 3), 1);
        assert_eq!(knot_count(1, 1), 1);
        assert_eq!(knot_count(32, 1), 2);
        assert_eq!(knot_count(243, 1), 3);
        assert_eq!(knot_count(242, 1), 2);
    }

    #[test]
    fn linear_hat_functions() {
        let k = KnotSequence::new(vec![0.5], 1).unwrap();
        let b = eval_raw_basis(0.25, &k).unwrap();
        assert_eq!(b.len(), 3);
        assert!((b[0] - 0.5).abs() < 1e-15 && (b[1] - 0.5).abs() < 1e-15 && b[2] == 0.0);
        let b = eval_raw_basis(1.0, &k).unwrap();
        assert_eq!(b.as_slice(), &[0.0, 0.0, 1.0]);
        let b = eval_raw_basis(0.0, &k).unwrap();
        assert_eq!(b.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn cubic_matches_closed_form_without_interior_knots() {
        // No interior knots: the basis is the Bernstein polynomials.
        let k = KnotSequence::new(vec![], 3).unwrap();
        for &x in &[0.0, 0.1, 0.37, 0.8, 1.0] {
            let b = eval_raw_basis(x, &k).unwrap();
            let y: f64 = 1.0 - x;
            let expect = [y.powi(3), 3.0 * x * y * y, 3.0 * x * x * y, x.powi(3)];
            for j in 0..4 {
                assert!((b[j] - expect[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn outside_unit_interval_is_domain_error() {
        let k = KnotSequence::equally_spaced(2, 1).unwrap();
        assert!(matches!(eval_raw_basis(1.5, &k), Err(GaplmError::Domain(_))));
        assert!(eval_raw_basis(-0.01, &k).is_err());
    }

    #[test]
    fn partition_of_unity_and_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in 1..=3 {
            for n_int in 1..=4 {
                let k = KnotSequence::equally_spaced(n_int, p).unwrap();
                for _ in 0..1000 {
                    let x: f64 = rng.random();
                    let b = eval_raw_basis(x, &k).unwrap();
                    assert!((b.sum() - 1.0).abs() <= 1e-12);
                    assert!(b.iter().all(|&v| v >= 0.0));
                    assert!(b.iter().filter(|&&v| v != 0.0).count() <= p + 1);
                }
            }
        }
    }

    #[test]
    fn reproduces_polynomials_of_its_degree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in 1..=3 {
            let k = KnotSequence::equally_spaced(3, p).unwrap();
            let xs: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
            let coef: Vec<f64> = (0..=p).map(|_| rng.random_range(-2.0..2.0)).collect();
            let poly = |x: f64| coef.iter().rev().fold(0.0, |acc, c| acc * x + c);
            let design = DMatrix::from_fn(xs.len(), k.n_raw(), |i, j| eval_raw_basis(xs[i], &k).unwrap()[j]);
            let y = DVector::from_iterator(xs.len(), xs.iter().map(|&x| poly(x)));
            let b = least_squares(&design, &y).unwrap();
            let resid = (&design * b - y).amax();
            assert!(resid <= 1e-9, "degree {p}: residual {resid}");
        }
    }

    #[test]
    fn centered_columns_have_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = KnotSequence::equally_spaced(2, 1).unwrap();
        let mut raw = DMatrix::zeros(150, k.n_raw());
        for i in 0..150 {
            let x: f64 = rng.random();
            raw.set_row(i, &eval_raw_basis(x, &k).unwrap().transpose());
        }
        let (c, _) = center_basis(&raw);
        assert_eq!(c.ncols(), 3);
        for col in c.column_iter() {
            assert!((col.sum() / 150.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn constant_column_is_absorbed() {
        let d = DMatrix::from_fn(10, 2, |i, j| if j == 0 { 4.0 } else { i as f64 });
        let (c, m) = center_columns(&d);
        assert_eq!(m[0], 4.0);
        assert!(c.column(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recentering_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = DMatrix::from_fn(40, 4, |_, _| rng.random::<f64>());
        let (c1, _) = center_columns(&d);
        let (c2, _) = center_columns(&c1);
        assert!(max_abs_diff(&c1, &c2) <= 1e-12);
    }

    #[test]
    fn single_observation_gram() {
        let b = DMatrix::from_element(1, 1, 0.3);
        let k = gram_matrix(&b, &[1]).unwrap();
        assert!((k[(0, 0)] - 0.09).abs() < 1e-15);
        let g = DVector::from_element(1, -2.0);
        assert!((group_norm(&k, &g) - 0.6).abs() < 1e-15);
        assert_eq!(group_norm(&k, &DVector::zeros(1)), 0.0);
    }

    #[test]
    fn gram_rejects_wrong_sizes() {
        let b = DMatrix::zeros(4, 2);
        assert!(gram_matrix(&b, &[1, 2]).is_err());
    }

    #[test]
    fn system_dimensions_and_training_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = random_dataset(&mut rng, 200, 3);
        let sys = SplineSystem::build(&ds, 1).unwrap();
        assert_eq!(sys.n_interior(), 2);
        assert_eq!(sys.j_n(), 3);
        let mut sum = DVector::zeros(3 * sys.j_n());
        for c in &ds.clusters {
            let d = sys.cluster_design(&c.x).unwrap();
            for row in d.row_iter() {
                sum += row.transpose();
            }
        }
        assert!(sum.amax() / ds.n_obs() as f64 <= 1e-10);
        for k in &sys.grams {
            assert!(max_abs_diff(k, &k.transpose()) == 0.0);
            assert!(crate::linalg::min_eigenvalue(k) >= -1e-12);
        }
    }

    #[test]
    fn integral_matches_closed_form() {
        // int_0^1 of raw B-spline j is (t_{j+p+1} - t_j) / (p + 1)
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ds = random_dataset(&mut rng, 150, 2);
        for degree in [1, 2, 3] {
            let sys = SplineSystem::build(&ds, degree).unwrap();
            let t = sys.knots[1].full();
            let gamma = DVector::from_fn(sys.j_n(), |_, _| rng.random_range(-1.0..1.0));
            let want: f64 = (0..sys.j_n())
                .map(|k| {
                    let j = k + 1;
                    gamma[k] * ((t[j + degree + 1] - t[j]) / (degree as f64 + 1.0) - sys.offsets[1][k])
                })
                .sum();
            assert!((sys.integral(1, &gamma).unwrap() - want).abs() <= 1e-13, "degree {degree}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn group_norm_is_empirical_norm(seed in any::<u64>(), degree in 1usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds = random_dataset(&mut rng, 30, 2);
            let sys = SplineSystem::build(&ds, degree).unwrap();
            let l = 1;
            let gamma = DVector::from_fn(sys.j_n(), |_, _| rng.random_range(-3.0..3.0));
            let mut direct = 0.0;
            for c in &ds.clusters {
                let mut s = 0.0;
                for t in 0..c.size() {
                    let v = sys.eval_function(l, &gamma, c.x[(t, l)]).unwrap();
                    s += v * v;
                }
                direct += s / c.size() as f64;
            }
            direct /= ds.n_clusters() as f64;
            let quad = gamma.dot(&(&sys.grams[l] * &gamma));
            prop_assert!((quad - direct).abs() <= 1e-10 * direct.max(1.0));
        }
    }
}
