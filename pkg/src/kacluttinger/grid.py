"""Rasterisation of the vacant set and the sparse Dirichlet operator -Δ/2."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components as _cc

from .errors import EmptyDomainError, InvalidParameterError
from .model import Box, Cloud

_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class GridDomain:
    """Interior lattice nodes of ``box`` that are vacant.

    Nodes sit at ``anchor + i * h``. ``mask`` has one entry per interior
    lattice node (C order), True where the node is active.
    """

    box: Box
    h: float
    anchor: tuple[float, ...]
    axes: tuple[np.ndarray, ...]
    mask: np.ndarray

    @property
    def d(self) -> int:
        return self.box.d

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mask.shape

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def cell_volume(self) -> float:
        return self.h ** self.d

    @property
    def volume(self) -> float:
        """Vacant volume counted as ``n_active * h^d``."""
        return self.n_active * self.cell_volume

    def active_indices(self) -> np.ndarray:
        """Multi-indices of active nodes, lexicographic order."""
        return np.argwhere(self.mask)

    def coordinates(self) -> np.ndarray:
        idx = self.active_indices()
        if idx.size == 0:
            return np.zeros((0, self.d))
        return np.stack([self.axes[k][idx[:, k]] for k in range(self.d)], axis=1)

    def index_map(self) -> np.ndarray:
        """Array over the lattice holding the active number of each node, -1 if masked."""
        out = np.full(self.shape, -1, dtype=np.int64)
        out[self.mask] = np.arange(self.n_active)
        return out

    def with_mask(self, mask: np.ndarray) -> "GridDomain":
        return GridDomain(self.box, self.h, self.anchor, self.axes, np.asarray(mask, bool))


def lattice_axis(lo: float, hi: float, anchor: float, h: float) -> np.ndarray:
    """Lattice points ``anchor + i h`` lying strictly inside ``(lo, hi)``."""
    i0 = math.floor((lo - anchor) / h) - 1
    i1 = math.ceil((hi - anchor) / h) + 1
    i = np.arange(i0, i1 + 1)
    x = anchor + i * h
    tol = _EDGE_TOL * h
    return x[(x > lo + tol) & (x < hi - tol)]


def build_mask(box: Box, cloud: Cloud | None, a: float, h: float, anchor=None) -> GridDomain:
    """Active nodes of ``box`` minus the closed balls ``B(y, a)``, ``y`` in ``cloud``.

    A node is removed iff its centre lies in some closed obstacle ball.
    """
    if not h > 0:
        raise InvalidParameterError(f"grid spacing must be positive, got {h}")
    anchor = tuple(box.lo) if anchor is None else tuple(float(v) for v in anchor)
    axes = tuple(lattice_axis(box.lo[k], box.hi[k], anchor[k], h) for k in range(box.d))
    shape = tuple(len(ax) for ax in axes)
    mask = np.ones(shape, dtype=bool)
    if cloud is not None and len(cloud) and mask.size:
        near = cloud.restricted(box, margin=a)
        if len(near):
            _carve(mask, axes, near.points, a)
    return GridDomain(box, float(h), anchor, axes, mask)


def _carve(mask: np.ndarray, axes, points: np.ndarray, a: float) -> None:
    # stamp each ball onto its bounding window of nodes
    a2 = a * a
    for y in points:
        sl = []
        for k, ax in enumerate(axes):
            i0 = np.searchsorted(ax, y[k] - a, side="left")
            i1 = np.searchsorted(ax, y[k] + a, side="right")
            if i0 >= i1:
                break
            sl.append((i0, i1))
        else:
            grids = np.meshgrid(*[(axes[k][s0:s1] - y[k]) ** 2 for k, (s0, s1) in enumerate(sl)],
                                indexing="ij", sparse=True)
            r2 = sum(grids)
            window = tuple(slice(s0, s1) for s0, s1 in sl)
            mask[window] &= ~(r2 <= a2)


@dataclass(frozen=True)
class SparseOperator:
    matrix: sp.csr_matrix
    h: float
    d: int
    domain: GridDomain | None = None

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def assemble_half_laplacian(domain: GridDomain) -> SparseOperator:
    """Standard (2d+1)-point stencil for -Δ/2 with Dirichlet conditions at masked nodes."""
    n = domain.n_active
    if n == 0:
        raise EmptyDomainError("no active node: the spectrum is identically infinite")
    d, h = domain.d, domain.h
    idx = domain.index_map()
    off = -0.5 / (h * h)
    rows, cols = [], []
    for k in range(d):
        lo = [slice(None)] * d
        hi = [slice(None)] * d
        lo[k] = slice(0, -1)
        hi[k] = slice(1, None)
        a = idx[tuple(lo)].ravel()
        b = idx[tuple(hi)].ravel()
        keep = (a >= 0) & (b >= 0)
        rows.append(a[keep])
        cols.append(b[keep])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    diag = np.arange(n)
    data = np.concatenate([np.full(2 * r.size, off), np.full(n, d / (h * h))])
    mat = sp.coo_matrix(
        (data, (np.concatenate([r, c, diag]), np.concatenate([c, r, diag]))), shape=(n, n)
    ).tocsr()
    mat.sort_indices()
    return SparseOperator(mat, h, d, domain)


def connected_components(domain: GridDomain) -> tuple[int, np.ndarray]:
    """Label active nodes by grid-adjacency component. Returns ``(count, labels)``."""
    n = domain.n_active
    if n == 0:
        return 0, np.zeros(0, dtype=np.int64)
    adj = assemble_half_laplacian(domain).matrix
    count, labels = _cc(adj, directed=False)
    return int(count), labels.astype(np.int64)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _rle(flat: np.ndarray) -> np.ndarray:
    """Run lengths of a boolean vector, starting with a run of False (possibly 0)."""
    if flat.size == 0:
        return np.zeros(0, dtype=np.uint32)
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate([[0], runs])
    return runs.astype(np.uint32)


def _unrle(runs: np.ndarray, size: int) -> np.ndarray:
    vals = np.arange(runs.size) % 2 == 1
    out = np.repeat(vals, runs.astype(np.int64))
    if out.size != size:
        raise InvalidParameterError("run lengths do not match header size")
    return out


def write_domain(domain: GridDomain, path) -> Path:
    """Binary container: 8-byte header length, JSON header, uint32 run lengths."""
    path = Path(path)
    runs = _rle(domain.mask.ravel())
    header = {
        "box": domain.box.to_dict(),
        "h": domain.h,
        "d": domain.d,
        "n_active": domain.n_active,
        "anchor": list(domain.anchor),
        "shape": list(domain.shape),
        "runs": int(runs.size),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(len(hb).to_bytes(8, "little"))
        fh.write(hb)
        fh.write(runs.astype("<u4").tobytes())
    return path


def read_domain(path) -> GridDomain:
    raw = Path(path).read_bytes()
    hl = int.from_bytes(raw[:8], "little")
    header = json.loads(raw[8:8 + hl])
    runs = np.frombuffer(raw[8 + hl:], dtype="<u4")
    box = Box.from_dict(header["box"])
    h = header["h"]
    anchor = tuple(header["anchor"])
    axes = tuple(lattice_axis(box.lo[k], box.hi[k], anchor[k], h) for k in range(box.d))
    shape = tuple(header["shape"])
    mask = _unrle(runs, int(np.prod(shape))).reshape(shape)
    dom = GridDomain(box, h, anchor, axes, mask)
    if dom.n_active != header["n_active"]:
        raise InvalidParameterError("corrupt domain file: n_active mismatch")
    return dom


def write_operator(op: SparseOperator, path) -> Path:
    path = Path(path)
    scipy.io.mmwrite(str(path), op.matrix.tocoo(), symmetry="symmetric",
                     comment=f"half laplacian d={op.d} h={op.h!r}")
    return path
