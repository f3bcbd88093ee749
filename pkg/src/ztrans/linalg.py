"""Deterministic dense linear algebra: Jacobi eigensolver, SVD, CCA, statistics.

Independent of the autodiff engine.  Everything works on float64 numpy
arrays and returns fresh arrays; no function mutates its inputs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.sparse.csgraph import connected_components

from .errors import DegenerateInputError, InvalidInputError, SingularityError

SYMMETRY_TOL = 1e-10
_MAX_SWEEPS = 60


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray  # (m, k), orthonormal columns
    s: np.ndarray  # (k,), nonincreasing, >= 0
    v: np.ndarray  # (n, k), orthonormal columns

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


@dataclass(frozen=True)
class CcaResult:
    w_a: np.ndarray  # (d', d_a)
    w_b: np.ndarray  # (d', d_b)
    correlations: np.ndarray  # (d',), nonincreasing, in [0, 1]
    mean_a: np.ndarray
    mean_b: np.ndarray

    def transform_a(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean_a) @ self.w_a.T

    def transform_b(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.mean_b) @ self.w_b.T


@dataclass(frozen=True)
class SpectralEmbedding:
    coordinates: np.ndarray  # (n, dims)
    eigenvalues: np.ndarray  # eigenvalues of the normalised Laplacian, ascending
    disconnected: bool
    degenerate: bool  # zero gap between the last kept and first dropped eigenvalue


def _as_matrix(a, name: str = "input") -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInputError(f"{name} must be a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings covering every (p, q) once; pairs within a round are disjoint."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry of every column positive."""
    if vecs.size == 0:
        return vecs
    rows = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[rows, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def sym_eig(a) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations are applied a round at a time: each round of the round-robin
    schedule touches disjoint index pairs, so it vectorises.  Eigenvalues are
    returned in nonincreasing order with sign-normalised eigenvectors.
    """
    a = _as_matrix(a)
    n = a.shape[0]
    if a.shape[1] != n:
        raise InvalidInputError(f"sym_eig needs a square matrix, got {a.shape}")
    scale_ = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > SYMMETRY_TOL * scale_:
        raise InvalidInputError("sym_eig: matrix is not symmetric within 1e-10")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    if n > 1:
        rounds = _round_robin(n)
        total = np.linalg.norm(a)
        for _ in range(_MAX_SWEEPS):
            off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
            if off <= 1e-15 * total or off == 0.0:
                break
            for p, q in rounds:
                if p.size == 0:
                    continue
                apq = a[p, q]
                active = np.abs(apq) > 1e-300
                if not active.any():
                    continue
                p, q, apq = p[active], q[active], apq[active]
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (np.abs(theta) + np.hypot(1.0, theta))
                t[theta == 0] = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # A <- J^T A J with J[p,p]=J[q,q]=c, J[p,q]=s, J[q,p]=-s
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c[:, None] * rp - s[:, None] * rq
                a[q, :] = s[:, None] * rp + c[:, None] * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = cp * c - cq * s
                a[:, q] = cp * s + cq * c
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = vp * c - vq * s
                v[:, q] = vp * s + vq * c
    lam = np.diag(a).copy()
    order = np.argsort(-lam, kind="stable")
    return lam[order], _fix_signs(v[:, order])


def _orthonormal_completion(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Gram-Schmidt ``u``'s columns in order; replace bad ones with basis fill."""
    m, k = u.shape
    out = np.zeros((m, k))
    basis = iter(np.eye(m))
    for j in range(k):
        cand = u[:, j] if good[j] else None
        while True:
            if cand is None:
                cand = next(basis)
            w = cand - out[:, :j] @ (out[:, :j].T @ cand)
            w = w - out[:, :j] @ (out[:, :j].T @ w)
            nrm = np.linalg.norm(w)
            if nrm > 1e-8:
                out[:, j] = w / nrm
                break
            cand = None
    return out


def svd(a) -> SvdResult:
    """Thin SVD via the Jacobi eigendecomposition of the smaller Gram matrix."""
    a = _as_matrix(a)
    m, n = a.shape
    if m < n:
        r = svd(a.T)
        return SvdResult(u=r.v, s=r.s, v=r.u)
    lam, v = sym_eig(a.T @ a)
    s = np.sqrt(np.clip(lam, 0.0, None))
    tol = max(m, n) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    good = s > max(tol, 1e-300)
    u = np.zeros((m, n))
    u[:, good] = (a @ v[:, good]) / s[good]
    u = _orthonormal_completion(u, good)
    s = np.where(good, s, 0.0)
    return SvdResult(u=u, s=s, v=v)


def retained_dims(s, threshold: float) -> int:
    """Smallest prefix whose squared-singular-value energy fraction reaches ``threshold``."""
    if not 0.0 < threshold <= 1.0:
        raise InvalidInputError(f"threshold must lie in (0, 1], got {threshold}")
    energy = np.asarray(s, dtype=np.float64) ** 2
    total = energy.sum()
    if total <= 0.0:
        return 1
    frac = np.cumsum(energy) / total
    # relative slack so that e.g. 9/10 counts as reaching 0.90
    k = int(np.searchsorted(frac, threshold - 1e-12, side="left")) + 1
    return max(1, min(k, energy.size))


def truncate_by_variance(result: SvdResult, threshold: float = 0.99) -> np.ndarray:
    """Projection (n_features, k) onto the leading singular directions."""
    k = retained_dims(result.s, threshold)
    return result.v[:, :k]


def _inv_sqrt(cov: np.ndarray) -> np.ndarray:
    lam, vec = sym_eig(cov)
    return (vec / np.sqrt(lam)) @ vec.T


def cca_fit(x, y, regularization: float = 1e-6) -> CcaResult:
    """Canonical correlation analysis with ridge-regularised whitening.

    The ridge is ``regularization`` times the mean variance of each side, so
    the fit is unchanged by a global rescaling of either input.
    """
    x, y = _as_matrix(x, "x"), _as_matrix(y, "y")
    n = x.shape[0]
    if y.shape[0] != n:
        raise InvalidInputError(f"x and y need the same row count, got {n} and {y.shape[0]}")
    if n < 2:
        raise DegenerateInputError("cca_fit needs at least 2 samples")
    if regularization < 0:
        raise InvalidInputError("regularization must be nonnegative")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    sxx = xc.T @ xc / (n - 1)
    syy = yc.T @ yc / (n - 1)
    sxy = xc.T @ yc / (n - 1)
    whiten = []
    for name, cov in (("x", sxx), ("y", syy)):
        d = cov.shape[0]
        ridge = regularization * max(np.trace(cov) / d, np.finfo(float).tiny)
        cov = cov + ridge * np.eye(d)
        lam, _ = sym_eig(cov)
        if lam[-1] <= max(lam[0], np.finfo(float).tiny) * 1e-13:
            raise SingularityError(
                f"covariance of {name} is rank-deficient; use a nonzero regularization")
        whiten.append(_inv_sqrt(cov))
    wx, wy = whiten
    r = svd(wx @ sxy @ wy)
    dprime = min(x.shape[1], y.shape[1])
    corr = np.clip(r.s[:dprime], 0.0, 1.0)
    w_a = (wx @ r.u[:, :dprime]).T
    w_b = (wy @ r.v[:, :dprime]).T
    return CcaResult(w_a=w_a, w_b=w_b, correlations=corr, mean_a=mx, mean_b=my)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine of a zero-norm vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def pearson(xs, ys) -> tuple[float, float]:
    """Sample correlation and two-sided p-value (t distribution, n - 2 dof)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise InvalidInputError("pearson needs two equal-length vectors of length >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = np.dot(xc, xc), np.dot(yc, yc)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInputError("pearson is undefined for a zero-variance input")
    r = float(np.clip(np.dot(xc, yc) / np.sqrt(sxx * syy), -1.0, 1.0))
    dof = x.size - 2
    if dof <= 0 or abs(r) == 1.0:
        p = 0.0 if dof > 0 else 1.0
    else:
        t = r * np.sqrt(dof / (1.0 - r * r))
        p = float(2.0 * stats.t.sf(abs(t), dof))
    return r, p


def spectral_embedding(similarity, dims: int) -> SpectralEmbedding:
    """Laplacian eigenmap of a symmetric nonnegative affinity matrix.

    The trivial eigenvector of the normalised Laplacian is deflated exactly,
    so the first coordinate is meaningful even for a disconnected graph.
    """
    w = _as_matrix(similarity, "similarity")
    n = w.shape[0]
    if w.shape[1] != n:
        raise InvalidInputError("similarity must be square")
    if np.abs(w - w.T).max() > SYMMETRY_TOL:
        raise InvalidInputError("similarity must be symmetric")
    if not 1 <= dims < n:
        raise InvalidInputError(f"dims must satisfy 1 <= dims < n={n}")
    deg = w.sum(axis=1)
    if np.any(deg <= 0):
        raise DegenerateInputError("every node needs positive total similarity")
    ncomp, _ = connected_components(w > 0, directed=False)
    disconnected = ncomp > 1
    if disconnected:
        warnings.warn("similarity graph is disconnected", RuntimeWarning, stacklevel=2)
    dhalf = np.sqrt(deg)
    lap = np.eye(n) - w / np.outer(dhalf, dhalf)
    trivial = dhalf / np.linalg.norm(dhalf)
    lam, vec = sym_eig(lap + 4.0 * np.outer(trivial, trivial))
    lam, vec = lam[::-1], vec[:, ::-1]  # ascending; trivial vector now sits last
    coords = _fix_signs(vec[:, :dims] / dhalf[:, None])
    gap = lam[dims] - lam[dims - 1] if dims < n - 1 else np.inf
    degenerate = bool(gap <= 1e-10)
    return SpectralEmbedding(coordinates=coords, eigenvalues=lam[: n - 1],
                             disconnected=bool(disconnected), degenerate=degenerate)
