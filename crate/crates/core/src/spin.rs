//! Spin-1/2 operators in Liouville space, piecewise-constant propagators and
//! their exact derivatives.
//!
//! Density matrices are vectorized column-major: `vec(rho) = [r00, r10, r01, r11]`.
//! Under that convention the commutation superoperator of a Hilbert-space
//! operator `H` is `ad(H) = 1 ⊗ H - Hᵀ ⊗ 1`, so that
//! `ad(H) vec(rho) = vec(H rho - rho H)`.
//!
//! Propagator derivatives come from the exponential of the block upper
//! triangular matrix `[[A, dA], [0, A]]`, whose top-right block is the
//! directional (Fréchet) derivative of `exp(A)` along `dA`.

use nalgebra::{Complex, SMatrix, SVector};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

/// Dimension of the spin-1/2 Liouville space.
pub const LIOUVILLE_DIM: usize = 4;

pub type Mat2 = SMatrix<C64, 2, 2>;
pub type Mat4 = SMatrix<C64, 4, 4>;
pub type Mat8 = SMatrix<C64, 8, 8>;
pub type Vec4 = SVector<C64, 4>;
pub type RealMat4 = SMatrix<f64, 4, 4>;

const I: C64 = C64::new(0.0, 1.0);

/// Hilbert-space operator on a single spin-1/2, in units of ħ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpinOperator(pub Mat2);

impl SpinOperator {
    pub fn matrix(&self) -> &Mat2 {
        &self.0
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        (self.0 - self.0.adjoint()).iter().all(|z| z.norm() <= tol)
    }

    /// Commutation superoperator `ρ ↦ [H, ρ]` on column-major vectorized ρ.
    pub fn commutation_superop(&self) -> Superoperator {
        let h = &self.0;
        let mut out = Mat4::zeros();
        // Column-major vec: index (i, j) of the 2x2 matrix lives at j * 2 + i.
        // (H X)_{ij} = sum_k H_ik X_kj ; (X H)_{ij} = sum_k X_ik H_kj
        for i in 0..2 {
            for j in 0..2 {
                let row = j * 2 + i;
                for k in 0..2 {
                    out[(row, j * 2 + k)] += h[(i, k)];
                    out[(row, k * 2 + i)] -= h[(k, j)];
                }
            }
        }
        Superoperator(out)
    }

    pub fn vectorize(&self) -> StateVector {
        StateVector::from_operator(&self.0)
    }
}

impl std::ops::Neg for SpinOperator {
    type Output = SpinOperator;
    fn neg(self) -> SpinOperator {
        SpinOperator(-self.0)
    }
}

/// Linear map on vectorized density operators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Superoperator(pub Mat4);

impl Superoperator {
    pub fn zero() -> Self {
        Superoperator(Mat4::zeros())
    }

    pub fn matrix(&self) -> &Mat4 {
        &self.0
    }

    pub fn apply(&self, x: &StateVector) -> StateVector {
        StateVector(self.0 * x.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Vectorized 2x2 density-like operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVector(pub Vec4);

impl StateVector {
    pub fn from_operator(m: &Mat2) -> Self {
        StateVector(Vec4::new(m[(0, 0)], m[(1, 0)], m[(0, 1)], m[(1, 1)]))
    }

    pub fn to_operator(&self) -> Mat2 {
        let v = &self.0;
        Mat2::new(v[0], v[2], v[1], v[3])
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    /// `⟨self|other⟩`, conjugating `self`.
    pub fn inner(&self, other: &StateVector) -> C64 {
        self.0.dotc(&other.0)
    }
}

/// Uncontrollable part of the Liouvillian: resonance offset plus optional
/// constant relaxation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DriftSpec {
    /// Rotating-frame resonance offset, rad/s.
    pub offset: f64,
    /// Relaxation superoperator, 1/s. Enters the Liouvillian as `+iR`, so a
    /// decaying system has negative semidefinite `R`.
    pub relaxation: Option<RealMat4>,
}

impl DriftSpec {
    pub fn offset(offset: f64) -> Self {
        DriftSpec { offset, relaxation: None }
    }

    pub fn with_relaxation(mut self, relaxation: RealMat4) -> Self {
        self.relaxation = Some(relaxation);
        self
    }

    /// `D = offset * ad(S_Z) + i R`.
    pub fn superoperator(&self) -> Superoperator {
        let ops = build_spin_half_ops();
        let mut d = ops.ad_sz.0 * C64::from(self.offset);
        if let Some(r) = &self.relaxation {
            d += r.map(|x| I * x);
        }
        Superoperator(d)
    }
}

/// Relaxation superoperator that damps longitudinal magnetization at rate
/// `r1` and transverse magnetization at rate `r2`, both toward zero.
pub fn relaxation_from_rates(r1: f64, r2: f64) -> RealMat4 {
    let mut r = RealMat4::zeros();
    // Projector onto span{vec(S_X), vec(S_Y)} is the identity on the
    // off-diagonal slots; onto vec(S_Z) it is the difference of the diagonal
    // slots.
    r[(1, 1)] = -r2;
    r[(2, 2)] = -r2;
    r[(0, 0)] = -0.5 * r1;
    r[(3, 3)] = -0.5 * r1;
    r[(0, 3)] = 0.5 * r1;
    r[(3, 0)] = 0.5 * r1;
    r
}

/// Spin-1/2 operators and their commutation superoperators.
#[derive(Debug, Clone, Copy)]
pub struct SpinHalfOps {
    pub sx: SpinOperator,
    pub sy: SpinOperator,
    pub sz: SpinOperator,
    pub ad_sx: Superoperator,
    pub ad_sy: Superoperator,
    pub ad_sz: Superoperator,
}

pub fn build_spin_half_ops() -> SpinHalfOps {
    let h = C64::from(0.5);
    let z = C64::from(0.0);
    let sx = SpinOperator(Mat2::new(z, h, h, z));
    let sy = SpinOperator(Mat2::new(z, -I * 0.5, I * 0.5, z));
    let sz = SpinOperator(Mat2::new(h, z, z, -h));
    SpinHalfOps {
        ad_sx: sx.commutation_superop(),
        ad_sy: sy.commutation_superop(),
        ad_sz: sz.commutation_superop(),
        sx,
        sy,
        sz,
    }
}

/// `L = D + Σ_k c_k C_k`.
pub fn build_liouvillian(drift: &DriftSpec, controls: &[(f64, &Superoperator)]) -> Result<Superoperator> {
    let mut l = drift.superoperator().0;
    for (k, (amp, op)) in controls.iter().enumerate() {
        if !amp.is_finite() {
            return Err(Error::Numeric(format!("control amplitude {k} is not finite: {amp}")));
        }
        l += op.0 * C64::from(*amp);
    }
    Ok(Superoperator(l))
}

fn norm1<const D: usize>(a: &SMatrix<C64, D, D>) -> f64 {
    (0..D)
        .map(|j| a.column(j).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Number of halvings needed to bring a 1-norm under 1/2.
fn scaling_exponent(norm: f64) -> i32 {
    if norm <= 0.5 {
        0
    } else {
        (norm / 0.5).log2().ceil() as i32
    }
}

const TAYLOR_MAX_TERMS: usize = 30;

/// Matrix exponential by scaling and squaring around a truncated Taylor
/// series. The series is summed until the next term drops below machine
/// precision relative to the partial sum (at 1-norm ≤ 1/2 that takes at most
/// ~18 terms).
pub fn expm<const D: usize>(a: &SMatrix<C64, D, D>) -> SMatrix<C64, D, D> {
    let s = scaling_exponent(norm1(a));
    let x = a * C64::from(0.5f64.powi(s));
    let mut sum = SMatrix::<C64, D, D>::identity();
    let mut term = sum;
    for k in 1..=TAYLOR_MAX_TERMS {
        term = (term * x) / C64::from(k as f64);
        sum += term;
        if norm1(&term) <= f64::EPSILON * norm1(&sum) {
            break;
        }
    }
    for _ in 0..s {
        sum = sum * sum;
    }
    sum
}

/// `exp(-i L dt)`.
pub fn propagator(l: &Superoperator, dt: f64) -> Result<Superoperator> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Domain(format!("propagator time step must be positive, got {dt}")));
    }
    if !l.is_finite() {
        return Err(Error::Numeric("Liouvillian has non-finite entries".into()));
    }
    let p = expm(&(l.0 * (-I * dt)));
    let out = Superoperator(p);
    if !out.is_finite() {
        return Err(Error::Numeric("propagator overflowed".into()));
    }
    Ok(out)
}

/// Action of `exp(A)` and of its derivative along `dA` on `x`, read off the
/// exponential of the augmented block matrix `[[A, dA], [0, A]]` applied to
/// `(0; x)`. Returns `(exp(A) x, [∂exp(A)] x)`.
pub fn prop_deriv_action(a: &Mat4, da: &Mat4, x: &StateVector) -> (StateVector, StateVector) {
    let mut block = Mat8::zeros();
    block.fixed_view_mut::<4, 4>(0, 0).copy_from(a);
    block.fixed_view_mut::<4, 4>(0, 4).copy_from(da);
    block.fixed_view_mut::<4, 4>(4, 4).copy_from(a);
    let e = expm(&block);
    let mut rhs = SVector::<C64, 8>::zeros();
    rhs.fixed_rows_mut::<4>(4).copy_from(&x.0);
    let y = e * rhs;
    let deriv = StateVector(y.fixed_rows::<4>(0).into_owned());
    let value = StateVector(y.fixed_rows::<4>(4).into_owned());
    (value, deriv)
}

/// `exp(A)` together with the full derivative matrices `∂exp(A)` along each
/// direction in `directions`, written into `derivs`.
///
/// Mathematically this is the exponential of the augmented block matrix of
/// [`prop_deriv_action`] for every direction at once; the block triangular
/// structure is exploited so the diagonal block is only computed once.
pub fn expm_with_derivatives(a: &Mat4, directions: &[Mat4], derivs: &mut [Mat4]) -> Mat4 {
    assert_eq!(directions.len(), derivs.len());
    let block_norm = norm1(a) + directions.iter().map(norm1).fold(0.0, f64::max);
    let s = scaling_exponent(block_norm);
    let scale = C64::from(0.5f64.powi(s));
    let x = a * scale;

    let mut sum = Mat4::identity();
    let mut term = sum;
    for d in derivs.iter_mut() {
        *d = Mat4::zeros();
    }
    let mut dterms = vec![Mat4::zeros(); directions.len()];
    for k in 1..=TAYLOR_MAX_TERMS {
        let inv_k = C64::from(1.0 / k as f64);
        let mut dmax = 0.0f64;
        for (j, e) in directions.iter().enumerate() {
            let next = (x * dterms[j] + (e * scale) * term) * inv_k;
            dterms[j] = next;
            derivs[j] += next;
            dmax = dmax.max(norm1(&next) / norm1(&derivs[j]).max(f64::MIN_POSITIVE));
        }
        term = (term * x) * inv_k;
        sum += term;
        if norm1(&term) <= f64::EPSILON * norm1(&sum) && dmax <= f64::EPSILON {
            break;
        }
    }
    for _ in 0..s {
        for d in derivs.iter_mut() {
            *d = sum * *d + *d * sum;
        }
        sum = sum * sum;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_abs<const R: usize, const C: usize>(m: &SMatrix<C64, R, C>) -> f64 {
        m.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    fn random_mat4(rng: &mut ChaCha8Rng, scale: f64) -> Mat4 {
        Mat4::from_fn(|_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * scale)
    }

    fn random_hermitian(rng: &mut ChaCha8Rng) -> SpinOperator {
        let m = Mat2::from_fn(|_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        SpinOperator((m + m.adjoint()) * C64::from(0.5))
    }

    /// Plain Taylor series without any scaling, summed to 60 terms.
    fn taylor_oracle(a: &Mat4) -> Mat4 {
        let mut sum = Mat4::identity();
        let mut term = Mat4::identity();
        for k in 1..=60 {
            term = term * a / C64::from(k as f64);
            sum += term;
        }
        sum
    }

    #[test]
    fn spin_operators_satisfy_commutation_relations() {
        let ops = build_spin_half_ops();
        let (x, y, z) = (ops.sx.0, ops.sy.0, ops.sz.0);
        assert!(max_abs(&(x * y - y * x - z * I)) < 1e-15);
        assert!(max_abs(&(y * z - z * y - x * I)) < 1e-15);
        assert!(max_abs(&(z * x - x * z - y * I)) < 1e-15);
        for op in [ops.sx, ops.sy, ops.sz] {
            assert!(op.is_hermitian(0.0));
            let eig = op.0.symmetric_eigenvalues();
            let mut e: Vec<f64> = eig.iter().copied().collect();
            e.sort_by(f64::total_cmp);
            assert_relative_eq!(e[0], -0.5, epsilon = 1e-14);
            assert_relative_eq!(e[1], 0.5, epsilon = 1e-14);
        }
    }

    #[test]
    fn ad_sz_annihilates_sz_and_rotates_sx_into_sy() {
        let ops = build_spin_half_ops();
        let r = ops.ad_sz.apply(&ops.sz.vectorize());
        assert!(r.norm() == 0.0);
        // Oracle: explicit 2x2 commutator.
        let brute = ops.sz.0 * ops.sx.0 - ops.sx.0 * ops.sz.0;
        let got = ops.ad_sz.apply(&ops.sx.vectorize());
        assert!(max_abs(&(got.0 - StateVector::from_operator(&brute).0)) < 1e-15);
        assert!(max_abs(&(got.0 - ops.sy.vectorize().0 * I)) < 1e-15);
    }

    #[test]
    fn commutation_superops_are_traceless() {
        let ops = build_spin_half_ops();
        for ad in [ops.ad_sx, ops.ad_sy, ops.ad_sz] {
            assert!(ad.0.trace().norm() < 1e-15);
        }
    }

    #[test]
    fn liouvillian_assembly() {
        let ops = build_spin_half_ops();
        let zero = build_liouvillian(&DriftSpec::default(), &[]).unwrap();
        assert_eq!(zero, Superoperator::zero());

        let w0 = 1234.5;
        let l = build_liouvillian(&DriftSpec::offset(w0), &[]).unwrap();
        assert!(max_abs(&(l.0 - ops.ad_sz.0 * C64::from(w0))) == 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, b) = (rng.gen_range(-1e5..1e5), rng.gen_range(-1e5..1e5));
        let l = build_liouvillian(&DriftSpec::offset(w0), &[(a, &ops.ad_sx), (b, &ops.ad_sy)]).unwrap();
        let mut hand = Mat4::zeros();
        for r in 0..4 {
            for c in 0..4 {
                hand[(r, c)] = ops.ad_sz.0[(r, c)] * w0 + ops.ad_sx.0[(r, c)] * a + ops.ad_sy.0[(r, c)] * b;
            }
        }
        assert!(max_abs(&(l.0 - hand)) < 1e-9);

        assert!(matches!(
            build_liouvillian(&DriftSpec::default(), &[(f64::NAN, &ops.ad_sx)]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn relaxation_enters_as_decay() {
        let ops = build_spin_half_ops();
        let drift = DriftSpec::offset(0.0).with_relaxation(relaxation_from_rates(2.0, 10.0));
        let p = propagator(&drift.superoperator(), 0.1).unwrap();
        let x = p.apply(&ops.sx.vectorize());
        let z = p.apply(&ops.sz.vectorize());
        assert_relative_eq!(x.norm(), ops.sx.vectorize().norm() * (-1.0f64).exp(), epsilon = 1e-12);
        assert_relative_eq!(z.norm(), ops.sz.vectorize().norm() * (-0.2f64).exp(), epsilon = 1e-12);
        // The identity (trace) component is not relaxed.
        let id = StateVector(Vec4::new(C64::from(1.0), C64::from(0.0), C64::from(0.0), C64::from(1.0)));
        assert!(max_abs(&(p.apply(&id).0 - id.0)) < 1e-14);
    }

    #[test]
    fn propagator_special_cases() {
        let ops = build_spin_half_ops();
        let p = propagator(&Superoperator::zero(), 1e-3).unwrap();
        assert_eq!(p.0, Mat4::identity());

        let w1 = 2.0 * std::f64::consts::PI * 25e3;
        let dt = std::f64::consts::PI / w1;
        let l = build_liouvillian(&DriftSpec::default(), &[(w1, &ops.ad_sx)]).unwrap();
        let out = propagator(&l, dt).unwrap().apply(&ops.sz.vectorize());
        assert!(max_abs(&(out.0 + ops.sz.vectorize().0)) < 1e-12);

        assert!(matches!(propagator(&l, 0.0), Err(Error::Domain(_))));
        let bad = Superoperator(Mat4::from_element(C64::new(f64::INFINITY, 0.0)));
        assert!(matches!(propagator(&bad, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn expm_matches_taylor_oracle_at_small_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let a = random_mat4(&mut rng, 0.3);
            let e = expm(&a);
            assert!(max_abs(&(e - taylor_oracle(&a))) < 1e-14);
        }
    }

    #[test]
    fn expm_uses_squaring_for_large_norms() {
        // exp(A) exp(-A) = 1 even when the scaled series is squared many times.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_mat4(&mut rng, 6.0);
        let prod = expm(&a) * expm(&(-a));
        assert!(max_abs(&(prod - Mat4::identity())) < 1e-9);
    }

    #[test]
    fn prop_deriv_action_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_mat4(&mut rng, 0.5);
        let x = StateVector(Vec4::from_fn(|_, _| C64::new(rng.gen(), rng.gen())));
        let (v, d) = prop_deriv_action(&a, &Mat4::zeros(), &x);
        assert_eq!(d.norm(), 0.0);
        assert!(max_abs(&(v.0 - expm(&a) * x.0)) < 1e-14);

        let m = random_mat4(&mut rng, 1.0);
        let (v, d) = prop_deriv_action(&Mat4::zeros(), &m, &x);
        assert!(max_abs(&(v.0 - x.0)) < 1e-15);
        assert!(max_abs(&(d.0 - m * x.0)) < 1e-14);
    }

    #[test]
    fn prop_deriv_action_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let s = rng.gen_range(0.1..2.0);
            let a = random_mat4(&mut rng, s);
            let da = random_mat4(&mut rng, 1.0);
            let x = StateVector(Vec4::from_fn(|_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))));
            let (_, d) = prop_deriv_action(&a, &da, &x);
            let h = 1e-5 * norm1(&a);
            let fd = (expm(&(a + da * C64::from(h))) - expm(&(a - da * C64::from(h)))) * x.0 / C64::from(2.0 * h);
            let rel = (d.0 - fd).norm() / fd.norm();
            assert!(rel <= 1e-7, "relative error {rel}");
        }
    }

    #[test]
    fn batched_derivatives_match_block_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for scale in [0.01, 0.3, 3.0] {
            let a = random_mat4(&mut rng, scale);
            let dirs = [random_mat4(&mut rng, scale), random_mat4(&mut rng, 0.1)];
            let mut derivs = [Mat4::zeros(); 2];
            let p = expm_with_derivatives(&a, &dirs, &mut derivs);
            assert!(max_abs(&(p - expm(&a))) < 1e-13 * max_abs(&p).max(1.0));
            for (e, d) in dirs.iter().zip(&derivs) {
                for col in 0..4 {
                    let x = StateVector(Mat4::identity().column(col).into_owned());
                    let (_, dx) = prop_deriv_action(&a, e, &x);
                    let err = (d.column(col) - dx.0).norm();
                    assert!(err < 1e-12 * dx.0.norm().max(1.0), "scale {scale}: {err}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn vec_unvec_round_trips(vals in proptest::collection::vec(-1e3f64..1e3, 8)) {
            let m = Mat2::new(
                C64::new(vals[0], vals[1]), C64::new(vals[2], vals[3]),
                C64::new(vals[4], vals[5]), C64::new(vals[6], vals[7]),
            );
            prop_assert_eq!(StateVector::from_operator(&m).to_operator(), m);
        }

        #[test]
        fn ad_acts_as_commutator_and_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h1 = random_hermitian(&mut rng);
            let h2 = random_hermitian(&mut rng);
            let rho = Mat2::from_fn(|_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            let lhs = h1.commutation_superop().apply(&StateVector::from_operator(&rho));
            let rhs = StateVector::from_operator(&(h1.0 * rho - rho * h1.0));
            prop_assert!(max_abs(&(lhs.0 - rhs.0)) < 1e-14);

            let comb = SpinOperator(h1.0 * C64::from(a) + h2.0 * C64::from(b)).commutation_superop();
            let sep = h1.commutation_superop().0 * C64::from(a) + h2.commutation_superop().0 * C64::from(b);
            prop_assert!(max_abs(&(comb.0 - sep)) < 1e-14);
        }

        #[test]
        fn unitary_propagation_preserves_norm_and_composes(seed in any::<u64>(), t1 in 1e-7f64..1e-5, t2 in 1e-7f64..1e-5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_hermitian(&mut rng);
            let l = Superoperator(h.commutation_superop().0 * C64::from(2.0 * std::f64::consts::PI * 1e5));
            let x = StateVector(Vec4::from_fn(|_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))));
            let p1 = propagator(&l, t1).unwrap();
            let p2 = propagator(&l, t2).unwrap();
            let p12 = propagator(&l, t1 + t2).unwrap();
            prop_assert!((p1.apply(&x).norm() - x.norm()).abs() < 1e-12);
            prop_assert!(max_abs(&(p12.0 - p2.0 * p1.0)) < 1e-12);
        }
    }
}
