//! Structure operators: the canonical skew form and the degeneracy projection.

use crate::autodiff::{Graph, NodeId};

/// Regulariser in the degeneracy projector denominator.
pub const EPS_PROJ: f64 = 1e-12;

/// Canonical symplectic form on `[q; p]` with `q, p ∈ ℝⁿ`: `J = [[0, I], [−I, 0]]`.
///
/// Only the block size is stored, so `J + Jᵀ = 0` holds by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkewOperator {
    half: usize,
}

impl SkewOperator {
    /// `None` for odd dimensions.
    pub fn canonical(d: usize) -> Option<Self> {
        (d.is_multiple_of(2) && d > 0).then_some(Self { half: d / 2 })
    }

    pub fn dim(&self) -> usize {
        2 * self.half
    }

    /// `J a = [a_p; −a_q]`
    pub fn apply(&self, a: &[f64]) -> Vec<f64> {
        let (aq, ap) = a.split_at(self.half);
        ap.iter().copied().chain(aq.iter().map(|v| -v)).collect()
    }

    /// `aᵀ J b`, summed block by block so that `aᵀ J a` is exactly zero.
    pub fn form(&self, a: &[f64], b: &[f64]) -> f64 {
        (0..self.half)
            .map(|i| a[i] * b[self.half + i] - a[self.half + i] * b[i])
            .sum()
    }

    /// Dense row-major matrix.
    pub fn matrix(&self) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d * d];
        for i in 0..self.half {
            m[i * d + self.half + i] = 1.0;
            m[(self.half + i) * d + i] = -1.0;
        }
        m
    }

    /// `J a` for a `[d, batch]` node.
    pub fn build(&self, g: &mut Graph, a: NodeId) -> NodeId {
        let aq = g.slice_rows(a, 0, self.half);
        let ap = g.slice_rows(a, self.half, self.half);
        let neg = g.scale(aq, -1.0);
        g.concat(&[ap, neg])
    }
}

/// `P G P` with `P = I − n nᵀ / (‖n‖² + ε)`, removing the range of `G` along `n = ∇H`.
///
/// Falls back to `G` when `‖n‖ < 1e-12`. `g` is a row-major `d x d` matrix.
pub fn deg_project(g: &[f64], grad_h: &[f64]) -> Vec<f64> {
    let d = grad_h.len();
    debug_assert_eq!(g.len(), d * d);
    let nn: f64 = grad_h.iter().map(|v| v * v).sum();
    if nn.sqrt() < 1e-12 {
        return g.to_vec();
    }
    let den = nn + EPS_PROJ;
    let mut p = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            p[i * d + j] = f64::from(u8::from(i == j)) - grad_h[i] * grad_h[j] / den;
        }
    }
    let pg = matmul(&p, g, d);
    let out = matmul(&pg, &p, d);
    // symmetrise away rounding asymmetry
    let mut sym = out.clone();
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (out[i * d + j] + out[j * d + i]);
        }
    }
    sym
}

/// `P a` for the projector of [`deg_project`], applied columnwise to `[d, batch]` nodes.
pub fn build_projector_apply(g: &mut Graph, n: NodeId, a: NodeId) -> NodeId {
    let nsq = g.square(n);
    let nn = g.sum_rows(nsq);
    let den = g.offset(nn, EPS_PROJ);
    let inv = g.recip(den);
    let na = g.col_dot(n, a);
    let coef = g.mul(na, inv);
    let shift = g.col_scale(n, coef);
    g.sub(a, shift)
}

pub(crate) fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

#[cfg(test)]
pub(crate) fn matvec(a: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..a.len() / d)
        .map(|i| a[i * d..(i + 1) * d].iter().zip(x).map(|(u, v)| u * v).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn canonical_two_dimensional_form() {
        let j = SkewOperator::canonical(2).unwrap();
        assert_eq!(j.matrix(), vec![0.0, 1.0, -1.0, 0.0]);
        assert_eq!(j.apply(&[3.0, 5.0]), vec![5.0, -3.0]);
        assert!(SkewOperator::canonical(3).is_none());
    }

    #[test]
    fn skew_matrix_is_antisymmetric() {
        let j = SkewOperator::canonical(6).unwrap();
        let m = j.matrix();
        for a in 0..6 {
            for b in 0..6 {
                assert_eq!(m[a * 6 + b], -m[b * 6 + a]);
            }
        }
    }

    proptest! {
        #[test]
        fn skew_quadratic_form_is_exactly_zero(a in prop::collection::vec(-1e3f64..1e3, 4)) {
            let j = SkewOperator::canonical(4).unwrap();
            prop_assert_eq!(j.form(&a, &a), 0.0);
            let ja = j.apply(&a);
            let q: f64 = a.iter().zip(&ja).map(|(x, y)| x * y).sum();
            prop_assert!(q.abs() <= 1e-12 * a.iter().map(|v| v * v).sum::<f64>());
        }
    }

    #[test]
    fn projection_removes_gradient_direction() {
        let g = vec![1.0, 0.0, 0.0, 1.0];
        let gt = deg_project(&g, &[0.0, 1.0]);
        let expect = [1.0, 0.0, 0.0, 0.0];
        for (a, b) in gt.iter().zip(expect) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn zero_gradient_falls_back() {
        let g = vec![2.0, 0.5, 0.5, 1.0];
        assert_eq!(deg_project(&g, &[0.0, 0.0]), g);
    }

    #[test]
    fn projection_keeps_psd_and_annihilates_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for d in [2usize, 4] {
            for _ in 0..200 {
                let l: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let lm = DMatrix::from_row_slice(d, d, &l);
                let gm = &lm * lm.transpose();
                let g: Vec<f64> = gm.transpose().iter().copied().collect();
                let n: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let gt = deg_project(&g, &n);
                let gtm = DMatrix::from_row_slice(d, d, &gt);
                let eig = gtm.clone().symmetric_eigen();
                assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-12), "{:?}", eig.eigenvalues);
                let gn = matvec(&gt, &n);
                let norm_gn = gn.iter().map(|v| v * v).sum::<f64>().sqrt();
                let norm_g = gm.norm();
                let norm_n = n.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(norm_gn <= 1e-10 * norm_g * norm_n, "{norm_gn}");
            }
        }
    }
}
