"""Lowest Dirichlet eigenpairs of the sparse -Δ/2 operator.

The iterative solver is a thick-restart block Krylov method on ``A^-1``
(sparse LU) with Rayleigh-Ritz projection on ``A``. Eigenvalues are reported
with multiplicity; the retained block is wider than ``k`` so clusters
straddling the k-th value are resolved.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import splu

from .errors import ConvergenceError, EmptyDomainError, SizeGuardError, InvalidParameterError
from .grid import GridDomain, SparseOperator, assemble_half_laplacian
from .model import stream

DENSE_GUARD = 2000
DENSE_VALUES_MAX = 8000
# values-only requests with k >= n / DENSE_VALUES_RATIO go to LAPACK
DENSE_VALUES_RATIO = 16
DEGENERACY_RTOL = 1e-8


@dataclass
class Spectrum:
    """k lowest eigenpairs. Eigenvectors are orthonormal for ``<u, v> h^d``."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    residuals: np.ndarray
    iterations: int
    h: float
    d: int
    domain: GridDomain | None = None
    clamped: bool = False
    meta: dict = field(default_factory=dict)

    @classmethod
    def infinite(cls, k: int, h: float, d: int, domain=None) -> "Spectrum":
        return cls(np.full(k, np.inf), np.zeros((0, k)), np.zeros(k), 0, h, d, domain)

    @property
    def is_empty(self) -> bool:
        return not np.isfinite(self.eigenvalues[0]) if self.eigenvalues.size else True

    @property
    def k(self) -> int:
        return self.eigenvalues.size

    @property
    def lambda1(self) -> float:
        return float(self.eigenvalues[0])

    def principal_eigenfunction(self) -> np.ndarray:
        """Normalised projection of the constant 1 on the eigenspace of λ1.

        Positive exactly on the components whose principal eigenvalue is λ1;
        zero vector for an empty domain.
        """
        if self.is_empty:
            return np.zeros(0)
        lam = self.eigenvalues
        cluster = np.abs(lam - lam[0]) <= DEGENERACY_RTOL * abs(lam[0])
        if cluster.all() and self.k > 1:
            warnings.warn("eigenspace of λ1 may extend beyond the computed pairs", RuntimeWarning)
        V = self.eigenvectors[:, cluster]
        w = self.h ** self.d
        coef = V.T @ np.full(V.shape[0], w)
        phi = V @ coef
        norm = np.sqrt(w * phi @ phi)
        return phi / norm if norm > 0 else phi


def _sign_fix(V: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(V), axis=0)
    s = np.sign(V[idx, np.arange(V.shape[1])])
    s[s == 0] = 1.0
    return V * s


def _orthonormalize(V: np.ndarray, passes: int = 2) -> np.ndarray:
    # SVQB: whiten through the Gram matrix, dropping numerically dependent directions
    for _ in range(passes):
        V = V / np.linalg.norm(V, axis=0)
        G = V.T @ V
        s, U = np.linalg.eigh(0.5 * (G + G.T))
        keep = s > s[-1] * 1e-13
        V = V @ (U[:, keep] / np.sqrt(s[keep]))
    return V


def _project_out(W: np.ndarray, Q: np.ndarray) -> np.ndarray:
    for _ in range(2):
        W = W - Q @ (Q.T @ W)
    return W


def smallest_eigenpairs(op: SparseOperator | GridDomain, k: int = 1, tol: float = 1e-9,
                        seed: int = 0, maxiter: int = 5000, block: int | None = None,
                        grow: int | None = None, vectors: bool = True) -> Spectrum:
    """The ``k`` smallest eigenpairs with ``|A x - λ x| <= tol λ |x|`` each.

    Accepts a domain (assembled here; an empty one yields the infinite
    sentinel) or an assembled operator. ``k`` larger than the problem size is
    clamped and flagged on the result.

    Thick-restart block Krylov iteration on ``A^-1``: the ``p >= k + 2``
    current Ritz vectors are kept and the basis is extended by repeated
    sparse-LU solves applied to (at most ``block``) unconverged residuals,
    followed by a Rayleigh-Ritz step with ``A``. With ``vectors=False`` the
    eigenvector block is dropped (and the dense path skips computing it).
    """
    if k < 1:
        raise InvalidParameterError("k must be >= 1")
    if not tol > 0:
        raise InvalidParameterError("tol must be positive")
    if isinstance(op, GridDomain):
        try:
            op = assemble_half_laplacian(op)
        except EmptyDomainError:
            return Spectrum.infinite(k, op.h, op.d, op)
    n = op.n
    clamped = k > n
    if clamped:
        warnings.warn(f"k={k} exceeds problem size {n}; clamped", RuntimeWarning)
        k = n
    p = min(n, max(k + 2, k + k // 4 + 2))
    b = block or min(64, max(8, p // 3))
    grow = grow or max(40, p)
    A = op.matrix.tocsc()

    wide = not vectors and n <= DENSE_VALUES_MAX and DENSE_VALUES_RATIO * k >= n
    if p + grow >= n // 2 or wide:
        # the search space would be comparable to the whole space
        if not vectors:
            theta = sla.eigh(A.toarray(), eigvals_only=True, subset_by_index=(0, k - 1),
                             check_finite=False)
            return _finish(op, theta, np.zeros((n, 0)), np.zeros(k), 1, clamped)
        theta, X = sla.eigh(A.toarray(), check_finite=False)
        theta, X = theta[:k], X[:, :k]
        R = A @ X - X * theta
        return _finish(op, theta, X, np.linalg.norm(R, axis=0), 1, clamped)

    lu = splu(A, permc_spec="COLAMD")
    X = _orthonormalize(stream(seed, 0xE16E).standard_normal((n, p)))
    AX = A @ X
    B = X[:, :b]
    res = np.full(k, np.inf)
    theta = np.zeros(p)
    cap = p + grow + b
    Qbuf = np.empty((n, cap), order="F")
    AQbuf = np.empty((n, cap), order="F")
    for it in range(1, maxiter + 1):
        m = X.shape[1]
        Qbuf[:, :m], AQbuf[:, :m] = X, AX
        while m < p + grow:
            W = lu.solve(np.asfortranarray(B))
            W = _orthonormalize(_project_out(W, Qbuf[:, :m]))
            w = min(W.shape[1], cap - m)
            if w == 0:
                break
            Qbuf[:, m:m + w] = W[:, :w]
            AQbuf[:, m:m + w] = A @ W[:, :w]
            B = W[:, :w]
            m += w
        Q, AQ = Qbuf[:, :m], AQbuf[:, :m]
        H = Q.T @ AQ
        theta, S = sla.eigh(0.5 * (H + H.T), check_finite=False)
        S = S[:, :p]
        theta = theta[:p]
        X, AX = Q @ S, AQ @ S
        R = AX - X * theta
        res_all = np.linalg.norm(R, axis=0)
        res = res_all[:k]
        done = res_all <= tol * np.abs(theta)
        if done[:k].all():
            return _finish(op, theta[:k], X[:, :k] if vectors else X[:, :0], res, it, clamped)
        B = R[:, np.flatnonzero(~done)[:b]]
    partial = _finish(op, theta[:k], X[:, :k], res, maxiter, clamped)
    raise ConvergenceError(f"no convergence in {maxiter} sweeps (max residual {res.max():.3e})", partial)


def _finish(op: SparseOperator, theta, X, res, iters, clamped) -> Spectrum:
    X = _sign_fix(np.asarray(X))
    X = X / op.h ** (op.d / 2)
    return Spectrum(np.asarray(theta, dtype=float), X, np.asarray(res, dtype=float), iters,
                    op.h, op.d, op.domain, clamped)


def eigenvalues_below(op: SparseOperator | GridDomain, cut: float, k0: int = 16, tol: float = 1e-9,
                      seed: int = 0, kmax: int = 4000) -> Spectrum:
    """All eigenpairs with eigenvalue ``<= cut``, growing ``k`` until one exceeds ``cut``."""
    if isinstance(op, GridDomain):
        try:
            op = assemble_half_laplacian(op)
        except EmptyDomainError:
            return Spectrum.infinite(1, op.h, op.d, op)
    k = min(k0, op.n)
    while True:
        spec = smallest_eigenpairs(op, k, tol=tol, seed=seed)
        if spec.eigenvalues[-1] > cut or k >= op.n:
            keep = spec.eigenvalues <= cut
            keep[0] = True  # keep λ1 even above the cut so the record is never empty
            spec.eigenvalues = spec.eigenvalues[keep]
            spec.eigenvectors = spec.eigenvectors[:, keep]
            spec.residuals = spec.residuals[keep]
            spec.meta["cut"] = float(cut)
            return spec
        if k >= kmax:
            raise ConvergenceError(f"more than {kmax} eigenvalues below {cut}", spec)
        k = min(op.n, kmax, int(k * 1.6) + 8)


def dense_oracle_eigs(op: SparseOperator, k: int) -> np.ndarray:
    """Full symmetric eigendecomposition of the assembled matrix (validation only)."""
    if op.n > DENSE_GUARD:
        raise SizeGuardError(f"dense oracle refused: {op.n} unknowns > {DENSE_GUARD}")
    vals = np.linalg.eigvalsh(op.matrix.toarray())
    return vals[:k]


def write_spectrum(spec: Spectrum, path, vectors: bool = False) -> Path:
    """CSV ``index,eigenvalue,residual``; optional ``.vec`` block with JSON header."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "eigenvalue", "residual"])
        for i, (lam, r) in enumerate(zip(spec.eigenvalues, spec.residuals), start=1):
            w.writerow([i, repr(float(lam)), repr(float(r))])
    if vectors:
        header = {"n": int(spec.eigenvectors.shape[0]), "k": int(spec.eigenvectors.shape[1]),
                  "dtype": "<f8", "order": "F", "h": spec.h, "d": spec.d}
        hb = json.dumps(header, sort_keys=True).encode()
        with open(path.with_suffix(".vec"), "wb") as fh:
            fh.write(len(hb).to_bytes(8, "little"))
            fh.write(hb)
            fh.write(np.asfortranarray(spec.eigenvectors, dtype="<f8").tobytes(order="F"))
    return path


def read_vectors(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    hl = int.from_bytes(raw[:8], "little")
    header = json.loads(raw[8:8 + hl])
    data = np.frombuffer(raw[8 + hl:], dtype=header["dtype"])
    return data.reshape((header["n"], header["k"]), order="F")
