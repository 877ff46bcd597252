//! Dense and banded linear-algebra helpers shared across the planner.
//!
//! The QP solver's normal-matrix solves dominate the per-cycle cost, and the
//! trajectory structure makes those matrices nearly block-tridiagonal. A
//! reverse Cuthill-McKee ordering followed by a banded Cholesky turns the
//! O(n^3) dense factorization into O(n*b^2) with a small bandwidth b, which
//! is what keeps receding-horizon planning fast on a single core.

use crate::{cst, Scalar};
use nalgebra::{DMatrix, DVector};

/// Symmetrize in place: `C <- (C + C^T)/2`.
pub fn symmetrize<S: Scalar>(m: &mut DMatrix<S>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    let half = cst::<S>(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue<S: Scalar>(m: &DMatrix<S>) -> S {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(S::max_value().unwrap(), |a, b| a.min(b))
}

/// `L` with `L L^T = m` for a PSD matrix, tolerating zero and tiny negative
/// eigenvalues (clamped to zero). Used to sample Gaussians with possibly
/// singular covariance.
pub fn psd_sqrt<S: Scalar>(m: &DMatrix<S>) -> DMatrix<S> {
    if let Some(chol) = m.clone().cholesky() {
        return chol.l();
    }
    let eig = m.clone().symmetric_eigen();
    let n = m.nrows();
    let mut l = eig.eigenvectors;
    for j in 0..n {
        let s = eig.eigenvalues[j].max(S::zero()).sqrt();
        for i in 0..n {
            l[(i, j)] *= s;
        }
    }
    l
}

/// Solve `m x = b` for symmetric positive definite `m` via Cholesky; falls
/// back to an SVD pseudo-inverse (with a warning) if the factorization
/// fails. The fallback keeps degenerate-but-consistent systems usable.
pub fn solve_spd<S: Scalar>(m: &DMatrix<S>, b: &DVector<S>) -> DVector<S> {
    if let Some(chol) = m.clone().cholesky() {
        return chol.solve(b);
    }
    log::warn!("Cholesky failed on a {0}x{0} matrix; using pseudo-inverse", m.nrows());
    let svd = m.clone().svd(true, true);
    let pinv = svd
        .pseudo_inverse(cst::<S>(1e-12))
        .expect("SVD pseudo-inverse");
    &pinv * b
}

/// Fixed nonzero pattern of a symmetric matrix, as per-row column lists.
pub type SymPattern = Vec<Vec<usize>>;

/// Reverse Cuthill-McKee ordering of a symmetric sparsity pattern.
///
/// Deterministic: start nodes and tie-breaks are chosen by (degree, index).
pub fn reverse_cuthill_mckee(pattern: &SymPattern) -> Vec<usize> {
    let n = pattern.len();
    let degree: Vec<usize> = pattern.iter().map(|r| r.len()).collect();
    let mut order = Vec::with_capacity(n);
    let mut visited = vec![false; n];

    let mut component: Vec<usize> = (0..n).collect();
    component.sort_by_key(|&i| (degree[i], i));

    for &seed in &component {
        if visited[seed] {
            continue;
        }
        let start = pseudo_peripheral(pattern, &degree, seed);
        // Cuthill-McKee BFS, neighbors in increasing-degree order.
        let mut queue = std::collections::VecDeque::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = pattern[v].iter().copied().filter(|&u| !visited[u]).collect();
            nbrs.sort_by_key(|&u| (degree[u], u));
            for u in nbrs {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

fn pseudo_peripheral(pattern: &SymPattern, degree: &[usize], seed: usize) -> usize {
    let n = pattern.len();
    let mut start = seed;
    let mut last_ecc = 0usize;
    for _ in 0..4 {
        let mut level = vec![usize::MAX; n];
        level[start] = 0;
        let mut queue = std::collections::VecDeque::from([start]);
        let mut far = start;
        while let Some(v) = queue.pop_front() {
            far = v;
            for &u in &pattern[v] {
                if level[u] == usize::MAX {
                    level[u] = level[v] + 1;
                    queue.push_back(u);
                }
            }
        }
        let ecc = level[far];
        if ecc <= last_ecc {
            break;
        }
        last_ecc = ecc;
        // farthest level, lowest degree
        let best = (0..n)
            .filter(|&v| level[v] == ecc)
            .min_by_key(|&v| (degree[v], v))
            .unwrap_or(far);
        start = best;
    }
    start
}

/// Cholesky factorization of a symmetric positive definite matrix stored as
/// a lower band, with an RCM permutation applied first.
pub struct BandedCholesky<S: Scalar> {
    n: usize,
    /// number of subdiagonals
    bw: usize,
    /// column-major band storage: entry (i,j) with d = i-j in 0..=bw lives
    /// at band[j*(bw+1) + d]
    band: Vec<S>,
    /// permutation: permuted index p -> original index
    perm: Vec<usize>,
    /// inverse permutation: original index -> permuted index
    iperm: Vec<usize>,
    scratch: std::cell::RefCell<Vec<S>>,
}

impl<S: Scalar> BandedCholesky<S> {
    /// Factor `m` (symmetric positive definite). `pattern` must cover every
    /// off-diagonal nonzero of `m`; it drives the fill-reducing ordering.
    pub fn new(m: &DMatrix<S>, pattern: &SymPattern) -> Option<Self> {
        let n = m.nrows();
        let perm = reverse_cuthill_mckee(pattern);
        let mut iperm = vec![0usize; n];
        for (p, &orig) in perm.iter().enumerate() {
            iperm[orig] = p;
        }
        let mut bw = 0usize;
        for (i, row) in pattern.iter().enumerate() {
            for &j in row {
                bw = bw.max(iperm[i].abs_diff(iperm[j]));
            }
        }
        let w = bw + 1;
        let mut band = vec![S::zero(); n * w];
        for pj in 0..n {
            let oj = perm[pj];
            for d in 0..w.min(n - pj) {
                band[pj * w + d] = m[(perm[pj + d], oj)];
            }
        }
        // in-place banded Cholesky
        for j in 0..n {
            let mut diag = band[j * w];
            let k0 = j.saturating_sub(bw);
            for k in k0..j {
                let l_jk = band[k * w + (j - k)];
                diag -= l_jk * l_jk;
            }
            if diag <= S::zero() {
                return None;
            }
            let l_jj = diag.sqrt();
            band[j * w] = l_jj;
            for i in (j + 1)..(j + w).min(n) {
                let mut v = band[j * w + (i - j)];
                let k0 = i.saturating_sub(bw);
                for k in k0..j {
                    v -= band[k * w + (i - k)] * band[k * w + (j - k)];
                }
                band[j * w + (i - j)] = v / l_jj;
            }
        }
        Some(Self {
            n,
            bw,
            band,
            perm,
            iperm,
            scratch: std::cell::RefCell::new(vec![S::zero(); n]),
        })
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    /// Solve `m x = b` in place.
    pub fn solve_in_place(&self, b: &mut DVector<S>) {
        let (n, w) = (self.n, self.bw + 1);
        let mut scratch = self.scratch.borrow_mut();
        for p in 0..n {
            scratch[p] = b[self.perm[p]];
        }
        // forward: L y = Pb
        for j in 0..n {
            let y = scratch[j] / self.band[j * w];
            scratch[j] = y;
            for i in (j + 1)..(j + w).min(n) {
                let l = self.band[j * w + (i - j)];
                scratch[i] -= l * y;
            }
        }
        // backward: L^T x = y
        for j in (0..n).rev() {
            let mut v = scratch[j];
            for i in (j + 1)..(j + w).min(n) {
                v -= self.band[j * w + (i - j)] * scratch[i];
            }
            scratch[j] = v / self.band[j * w];
        }
        for p in 0..n {
            b[self.perm[p]] = scratch[p];
        }
    }

    pub fn solve(&self, b: &DVector<S>) -> DVector<S> {
        let mut x = b.clone();
        self.solve_in_place(&mut x);
        x
    }

    /// Permutation used by the factorization (permuted -> original).
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Inverse permutation (original -> permuted).
    pub fn inverse_permutation(&self) -> &[usize] {
        &self.iperm
    }
}
