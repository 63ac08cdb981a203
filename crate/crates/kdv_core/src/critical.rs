//! Critical lengths: the closed-form set `S`, and the sets `N` and `F` defined by
//! transcendental chains in three exponents `a + b + c = 0`.
//!
//! A length is critical when the boundary eigenproblem for `-∂x - ∂x³` has a
//! nontrivial solution. Writing the eigenfunction as `Σ c_j e^{μ_j x}` with
//! `μ_j` the three roots of `μ³ + μ + λ = 0`, the exponents `a = μ₁L`, ... satisfy
//! `L² = -(a² + ab + b²)`. Roots are certified by the rank deficiency of the
//! 4×3 boundary matrix.

use nalgebra::{Complex, DMatrix};
use rayon::prelude::*;
use thiserror::Error;

pub type C64 = Complex<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CriticalError {
    #[error("degenerate exponents (a = {a}, b = {b}): a, b and a + b must be nonzero")]
    Degenerate { a: C64, b: C64 },
    #[error("k_max must be at least 1")]
    EmptyRange,
    #[error("set S is enumerated in closed form; use enumerate_s")]
    ClosedForm,
    #[error("eigenvalues from the three exponents disagree (relative spread {0:.3e}); spurious root")]
    LambdaMismatch(f64),
    #[error("length must be positive, got {0}")]
    NonPositiveLength(f64),
    #[error("invalid search box: {0}")]
    InvalidBox(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SetTag {
    S,
    N,
    F,
}

impl SetTag {
    pub fn tag(self) -> &'static str {
        match self {
            SetTag::S => "S",
            SetTag::N => "N",
            SetTag::F => "F",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "S" | "s" => Some(SetTag::S),
            "N" | "n" => Some(SetTag::N),
            "F" | "f" => Some(SetTag::F),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalRoot {
    pub set_tag: SetTag,
    pub a: C64,
    pub b: C64,
    pub c: C64,
    pub lambda: C64,
    pub length: f64,
    pub residual_norm: f64,
    pub certification_sigma: f64,
}

impl CriticalRoot {
    fn triple(&self) -> [C64; 3] {
        [self.a, self.b, self.c]
    }

    /// Exponents scaled to the eigenproblem variable `μ_j`.
    pub fn mus(&self) -> [C64; 3] {
        let s = match self.set_tag {
            SetTag::N => -1.0,
            _ => 1.0,
        } / self.length;
        [self.a * s, self.b * s, self.c * s]
    }
}

/// One length of `S` with every `(k, l)`, `1 ≤ k ≤ l`, producing it.
#[derive(Debug, Clone, PartialEq)]
pub struct SLength {
    pub length: f64,
    pub witnesses: Vec<(u32, u32)>,
}

pub fn s_length(k: u32, l: u32) -> f64 {
    let (k, l) = (k as f64, l as f64);
    2.0 * std::f64::consts::PI * ((k * k + k * l + l * l) / 3.0).sqrt()
}

/// All lengths `2π√((k²+kl+l²)/3)` for `1 ≤ k ≤ l ≤ k_max`, increasing.
pub fn enumerate_s(k_max: u32) -> Result<Vec<SLength>, CriticalError> {
    if k_max == 0 {
        return Err(CriticalError::EmptyRange);
    }
    let mut all: Vec<(u64, u32, u32)> = Vec::new();
    for k in 1..=k_max {
        for l in k..=k_max {
            let (k64, l64) = (k as u64, l as u64);
            all.push((k64 * k64 + k64 * l64 + l64 * l64, k, l));
        }
    }
    // the integer k²+kl+l² orders and deduplicates exactly
    all.sort();
    let mut out: Vec<SLength> = Vec::new();
    let mut last: Option<u64> = None;
    for (q, k, l) in all {
        if last == Some(q) {
            out.last_mut().expect("nonempty").witnesses.push((k, l));
        } else {
            out.push(SLength { length: s_length(k, l), witnesses: vec![(k, l)] });
            last = Some(q);
        }
    }
    Ok(out)
}

/// The root of `S` attached to the witness `(k, l)`: purely imaginary exponents.
pub fn s_root(k: u32, l: u32) -> CriticalRoot {
    let tau = 2.0 * std::f64::consts::PI / 3.0;
    let (kf, lf) = (k as f64, l as f64);
    let a = C64::new(0.0, tau * (2.0 * kf + lf));
    let b = C64::new(0.0, tau * (lf - kf));
    let c = -(a + b);
    let length = s_length(k, l);
    let res = ((a.exp() - b.exp()).norm_sqr() + (a.exp() - c.exp()).norm_sqr()).sqrt();
    let mut root =
        CriticalRoot { set_tag: SetTag::S, a, b, c, lambda: C64::new(0.0, 0.0), length, residual_norm: res, certification_sigma: f64::NAN };
    let mu = root.mus()[0];
    root.lambda = -mu - mu * mu * mu;
    root.certification_sigma = certify(length, &root).map(|c| c.sigma_min).unwrap_or(f64::NAN);
    root
}

fn nondegenerate(a: C64, b: C64) -> Result<(), CriticalError> {
    if a == C64::new(0.0, 0.0) || b == C64::new(0.0, 0.0) || a + b == C64::new(0.0, 0.0) {
        return Err(CriticalError::Degenerate { a, b });
    }
    Ok(())
}

fn f_n(z: C64) -> C64 {
    z * z.exp()
}

fn df_n(z: C64) -> C64 {
    (z + 1.0) * z.exp()
}

fn g_f(z: C64) -> C64 {
    z.exp() / (z * z)
}

fn dg_f(z: C64) -> C64 {
    z.exp() * (1.0 / (z * z) - 2.0 / (z * z * z))
}

/// `(a e^a - b e^b, a e^a + (a+b) e^{-(a+b)})`.
pub fn residual_n(a: C64, b: C64) -> Result<[C64; 2], CriticalError> {
    nondegenerate(a, b)?;
    let c = -(a + b);
    Ok([f_n(a) - f_n(b), f_n(a) - f_n(c)])
}

/// With `g(z) = e^z / z²`: `(g(a) - g(b), g(a) - g(-(a+b)))`.
pub fn residual_f(a: C64, b: C64) -> Result<[C64; 2], CriticalError> {
    nondegenerate(a, b)?;
    let c = -(a + b);
    Ok([g_f(a) - g_f(b), g_f(a) - g_f(c)])
}

fn chain(tag: SetTag) -> (fn(C64) -> C64, fn(C64) -> C64) {
    match tag {
        SetTag::N => (f_n, df_n),
        _ => (g_f, dg_f),
    }
}

fn residual(tag: SetTag, a: C64, b: C64) -> [C64; 2] {
    let (f, _) = chain(tag);
    let c = -(a + b);
    [f(a) - f(b), f(a) - f(c)]
}

fn jacobian(tag: SetTag, a: C64, b: C64) -> [[C64; 2]; 2] {
    let (_, df) = chain(tag);
    let c = -(a + b);
    // dc/da = dc/db = -1
    [[df(a), -df(b)], [df(a) + df(c), df(c)]]
}

fn norm2(r: &[C64; 2]) -> f64 {
    (r[0].norm_sqr() + r[1].norm_sqr()).sqrt()
}

/// Damped Newton: the step is halved up to 20 times until the residual drops.
pub fn newton(tag: SetTag, mut a: C64, mut b: C64, tol: f64, max_iter: usize) -> Option<(C64, C64, f64)> {
    let mut r = residual(tag, a, b);
    let mut nr = norm2(&r);
    for _ in 0..max_iter {
        if !nr.is_finite() {
            return None;
        }
        if nr <= tol {
            return Some((a, b, nr));
        }
        let j = jacobian(tag, a, b);
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.norm() == 0.0 || !det.norm().is_finite() {
            return None;
        }
        let da = (-r[0] * j[1][1] + r[1] * j[0][1]) / det;
        let db = (-r[1] * j[0][0] + r[0] * j[1][0]) / det;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=20 {
            let (a2, b2) = (a + da * t, b + db * t);
            let r2 = residual(tag, a2, b2);
            let n2 = norm2(&r2);
            if n2.is_finite() && n2 < nr {
                accepted = Some((a2, b2, r2, n2));
                break;
            }
            t *= 0.5;
        }
        let (a2, b2, r2, n2) = accepted?;
        a = a2;
        b = b2;
        r = r2;
        nr = n2;
    }
    (nr <= tol).then_some((a, b, nr))
}

/// Axis-aligned rectangle for `Re` and `Im` of both seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchBox {
    pub re: (f64, f64),
    pub im: (f64, f64),
}

impl Default for SearchBox {
    fn default() -> Self {
        Self { re: (-15.0, 15.0), im: (-15.0, 15.0) }
    }
}

impl SearchBox {
    fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }
}

/// Seeds closer than this to `a = 0`, `b = 0`, `a + b = 0` or `a = b` are skipped.
pub const EXCLUSION_RADIUS: f64 = 1e-3;
const DEDUP_TOL: f64 = 1e-6;
const NEWTON_MAX_ITER: usize = 100;

fn degenerate_near(a: C64, b: C64, r: f64) -> bool {
    a.norm() < r || b.norm() < r || (a + b).norm() < r || (a - b).norm() < r
}

fn same_triple(x: &[C64; 3], y: &[C64; 3]) -> bool {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let scale = 1.0f64.max(x.iter().map(|z| z.norm()).fold(0.0, f64::max));
    PERMS.iter().any(|p| (0..3).all(|i| (x[i] - y[p[i]]).norm() <= DEDUP_TOL * scale))
}

/// Newton from a seed grid over the box. Seeds are the full 4-D grid over
/// `(Re a, Im a, Re b, Im b)` plus the conjugate slice `b = ā`, on which the
/// third exponent is real and real lengths live.
pub fn find_critical_lengths(
    set_tag: SetTag,
    search_box: SearchBox,
    seeds_per_axis: usize,
    tol: f64,
) -> Result<Vec<CriticalRoot>, CriticalError> {
    if set_tag == SetTag::S {
        return Err(CriticalError::ClosedForm);
    }
    if seeds_per_axis == 0 || !(search_box.re.0 <= search_box.re.1) || !(search_box.im.0 <= search_box.im.1) {
        return Err(CriticalError::InvalidBox(format!("{search_box:?} with {seeds_per_axis} seeds per axis")));
    }
    let xs = SearchBox::axis(search_box.re.0, search_box.re.1, seeds_per_axis);
    let ys = SearchBox::axis(search_box.im.0, search_box.im.1, seeds_per_axis);
    let mut seeds: Vec<(C64, C64)> = Vec::new();
    for &x in &xs {
        for &y in &ys {
            let a = C64::new(x, y);
            seeds.push((a, a.conj()));
        }
    }
    for &xa in &xs {
        for &ya in &ys {
            for &xb in &xs {
                for &yb in &ys {
                    seeds.push((C64::new(xa, ya), C64::new(xb, yb)));
                }
            }
        }
    }
    let found: Vec<CriticalRoot> = seeds
        .par_iter()
        .filter_map(|&(a, b)| {
            if degenerate_near(a, b, EXCLUSION_RADIUS) {
                return None;
            }
            let (a, b, nr) = newton(set_tag, a, b, tol, NEWTON_MAX_ITER)?;
            build_root(set_tag, a, b, nr)
        })
        .collect();
    let mut unique: Vec<CriticalRoot> = Vec::new();
    for r in found {
        if !unique.iter().any(|u| same_triple(&u.triple(), &r.triple())) {
            unique.push(r);
        }
    }
    unique.sort_by(|x, y| {
        x.length
            .total_cmp(&y.length)
            .then(x.a.re.total_cmp(&y.a.re))
            .then(x.a.im.total_cmp(&y.a.im))
    });
    Ok(unique)
}

fn build_root(tag: SetTag, a: C64, b: C64, residual_norm: f64) -> Option<CriticalRoot> {
    if degenerate_near(a, b, EXCLUSION_RADIUS) {
        return None;
    }
    let c = -(a + b);
    let l2 = -(a * a + a * b + b * b);
    if !(l2.re > 0.0) || l2.im.abs() > 1e-8 * l2.re {
        return None;
    }
    let length = l2.re.sqrt();
    let mut root = CriticalRoot {
        set_tag: tag,
        a,
        b,
        c,
        lambda: C64::new(0.0, 0.0),
        length,
        residual_norm,
        certification_sigma: f64::NAN,
    };
    let cert = certify(length, &root).ok()?;
    root.lambda = cert.lambda;
    root.certification_sigma = cert.sigma_min;
    Some(root)
}

/// Outcome of the boundary-matrix rank test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certification {
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// `-μ - μ³` of the first exponent.
    pub lambda: C64,
    /// Largest relative difference among the three `λ_j`.
    pub lambda_spread: f64,
    pub vieta_product: C64,
}

/// Boundary matrix rows for each set, evaluated at length `length` with the
/// exponents of `root` held fixed; columns are normalized.
pub fn boundary_matrix(length: f64, root: &CriticalRoot) -> DMatrix<C64> {
    let mus = root.mus();
    let one = C64::new(1.0, 0.0);
    let mut m = DMatrix::from_fn(4, 3, |r, j| {
        let mu = mus[j];
        let e = (mu * length).exp();
        match (root.set_tag, r) {
            (_, 0) => one,
            (_, 1) => mu,
            (SetTag::F, 2) => (one + mu * mu) * e,
            (SetTag::F, _) => mu * e,
            (SetTag::N, 2) => e,
            (SetTag::N, _) => mu * mu * e,
            (SetTag::S, 2) => e,
            (SetTag::S, _) => mu * e,
        }
    });
    for mut col in m.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= C64::new(n, 0.0);
        }
    }
    m
}

pub fn certify(length: f64, root: &CriticalRoot) -> Result<Certification, CriticalError> {
    if !(length > 0.0) {
        return Err(CriticalError::NonPositiveLength(length));
    }
    let mus = root.mus();
    let lam: Vec<C64> = mus.iter().map(|&m| -m - m * m * m).collect();
    let scale = lam.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
    let spread = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .map(|(i, j)| (lam[i] - lam[j]).norm())
        .fold(0.0, f64::max)
        / scale;
    if spread > 1e-9 {
        return Err(CriticalError::LambdaMismatch(spread));
    }
    let sv = boundary_matrix(length, root).singular_values();
    let sigma_min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    let sigma_max = sv.iter().copied().fold(0.0, f64::max);
    Ok(Certification { sigma_min, sigma_max, lambda: lam[0], lambda_spread: spread, vieta_product: mus[0] * mus[1] * mus[2] })
}

/// Smallest singular value of the normalized 4×3 boundary matrix.
pub fn verify_eigen_deficiency(length: f64, root: &CriticalRoot) -> Result<f64, CriticalError> {
    Ok(certify(length, root)?.sigma_min)
}

/// Every root has its conjugate triple (up to permutation) in the list.
pub fn conjugate_closed(roots: &[CriticalRoot]) -> bool {
    roots.iter().all(|r| {
        let conj = [r.a.conj(), r.b.conj(), r.c.conj()];
        roots.iter().any(|s| same_triple(&s.triple(), &conj))
    })
}

/// Size of the third pairwise relation of the chain, `|f(b) - f(c)|`, which the
/// residual does not contain directly.
pub fn third_relation(root: &CriticalRoot) -> f64 {
    match root.set_tag {
        SetTag::S => (root.b.exp() - root.c.exp()).norm(),
        tag => {
            let (f, _) = chain(tag);
            (f(root.b) - f(root.c)).norm()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn s_enumeration() {
        let s = enumerate_s(1).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].length, 2.0 * std::f64::consts::PI);
        let s = enumerate_s(3).unwrap();
        assert_eq!(s.len(), 6);
        assert!(s.windows(2).all(|w| w[0].length < w[1].length));
        assert!((s[1].length - 2.0 * std::f64::consts::PI * (7.0f64 / 3.0).sqrt()).abs() < 1e-14);
        assert!(enumerate_s(0).is_err());
    }

    #[test]
    fn residual_symmetries() {
        let a = C64::new(0.3, 1.2);
        let b = C64::new(-0.7, 0.4);
        for f in [residual_n, residual_f] {
            assert_eq!(f(a, a).unwrap()[0], C64::new(0.0, 0.0));
            let r = f(a, b).unwrap();
            let rc = f(a.conj(), b.conj()).unwrap();
            assert!((rc[0] - r[0].conj()).norm() < 1e-14);
            assert!((rc[1] - r[1].conj()).norm() < 1e-14);
            assert!(f(a, -a).is_err());
            assert!(f(C64::new(0.0, 0.0), b).is_err());
        }
    }

    #[test]
    fn s_roots_are_deficient() {
        for (k, l) in [(1, 1), (1, 2), (2, 3)] {
            let r = s_root(k, l);
            assert!(r.residual_norm < 1e-12);
            assert!(r.certification_sigma < 1e-10);
            assert!((r.length * r.length + (r.a * r.a + r.a * r.b + r.b * r.b).re).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_box_gives_no_roots() {
        let b = SearchBox { re: (-1e-4, 1e-4), im: (-1e-4, 1e-4) };
        assert!(find_critical_lengths(SetTag::F, b, 4, 1e-12).unwrap().is_empty());
        assert!(find_critical_lengths(SetTag::S, b, 4, 1e-12).is_err());
    }
}
