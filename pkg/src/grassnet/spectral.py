"""Dense symmetric eigendecomposition, graph Fourier transform, spectrum KDE
and the binary eigencache format.

The default solver is a cyclic Jacobi method with round-robin (parallel)
pair ordering: each round applies ``floor(n/2)`` disjoint rotations at once,
so a round is a handful of vectorised row/column updates.  Entries that are
exactly zero are never rotated, which keeps block-diagonal inputs (graphs
with several connected components) block-diagonal and their eigenvectors
supported on single components.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .errors import EigenConvergenceError, EigencacheError, ShapeError

MAX_SWEEPS = 100
REL_TOL = 1e-11
# eigenvalues closer than this are one "numerically equal" cluster
TIE_TOL = 1e-10
# sign canonicalisation treats |entries| within this of the max as tied
SIGN_TOL = 1e-10

MAGIC = b"GRSP"
VERSION = 1
_HEADER = struct.Struct("<4sBQ")


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def n(self) -> int:
        return int(self.eigenvalues.shape[0])


def _round_robin(m: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Circle-method schedule: ``m - 1`` rounds of ``m / 2`` disjoint pairs."""
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p = players[: m // 2]
        q = players[m // 2:][::-1]
        lo = np.minimum(p, q)
        hi = np.maximum(p, q)
        rounds.append((lo, hi))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _off_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def jacobi_eigh(a: np.ndarray, max_sweeps: int = MAX_SWEEPS, rel_tol: float = REL_TOL):
    """Raw Jacobi eigenpairs of a symmetric matrix, in diagonal (emission) order.

    Converged when the off-diagonal Frobenius norm drops below
    ``rel_tol * ||a||_F``; otherwise :class:`EigenConvergenceError`.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    if n == 1:
        return a.diagonal().copy(), v
    tol = rel_tol * float(np.linalg.norm(a))
    m = n + (n % 2)
    schedule = []
    for lo, hi in _round_robin(m):
        keep = hi < n
        schedule.append((lo[keep], hi[keep]))

    off = _off_norm(a)
    for _ in range(max_sweeps):
        if off <= tol:
            break
        for p, q in schedule:
            apq = a[p, q]
            active = apq != 0.0
            if not np.any(active):
                continue
            p, q, apq = p[active], q[active], apq[active]
            app = a[p, p]
            aqq = a[q, q]
            # a tiny apq can push tau to inf; t -> 0 is then the right limit
            with np.errstate(over="ignore"):
                tau = (aqq - app) / (2.0 * apq)
                t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c

            colp = a[:, p]
            colq = a[:, q]
            a[:, p] = c * colp - s * colq
            a[:, q] = s * colp + c * colq
            rowp = a[p, :]
            rowq = a[q, :]
            a[p, :] = c[:, None] * rowp - s[:, None] * rowq
            a[q, :] = s[:, None] * rowp + c[:, None] * rowq
            a[p, q] = 0.0
            a[q, p] = 0.0

            vp = v[:, p]
            vq = v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        a = 0.5 * (a + a.T)
        off = _off_norm(a)
    else:
        if off > tol:
            raise EigenConvergenceError(off, max_sweeps)
    return a.diagonal().copy(), v


def _canonicalize(vals: np.ndarray, vecs: np.ndarray) -> SpectralDecomposition:
    order = np.argsort(vals, kind="stable")
    sorted_vals = vals[order]
    # merge numerically-equal runs: members keep emission order and share the
    # run's mean value, so equal frequencies are bit-equal downstream
    out_order = []
    out_vals = np.empty_like(sorted_vals)
    start = 0
    for i in range(1, len(sorted_vals) + 1):
        if i == len(sorted_vals) or sorted_vals[i] - sorted_vals[i - 1] > TIE_TOL:
            members = np.sort(order[start:i])
            out_order.extend(members.tolist())
            out_vals[start:i] = sorted_vals[start:i].mean() if i - start > 1 else sorted_vals[start]
            start = i
    u = vecs[:, out_order].copy()
    mags = np.abs(u)
    peak = mags.max(axis=0)
    first = np.argmax(mags >= peak - SIGN_TOL, axis=0)
    signs = np.where(u[first, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    u *= signs
    return SpectralDecomposition(out_vals, u)


def eig_sym(lap: np.ndarray, method: str = "jacobi") -> SpectralDecomposition:
    """Full eigendecomposition with ascending eigenvalues.

    Ties (within ``TIE_TOL``) keep the solver's emission order and are snapped
    to a common value; each eigenvector column is signed so its first
    largest-magnitude entry is positive.  ``method="lapack"`` swaps in
    ``numpy.linalg.eigh`` for graphs too large for Jacobi.
    """
    lap = np.asarray(lap, dtype=np.float64)
    if lap.ndim != 2 or lap.shape[0] != lap.shape[1] or lap.shape[0] < 1:
        raise ShapeError(f"expected a non-empty square matrix, got {lap.shape}")
    if method == "jacobi":
        vals, vecs = jacobi_eigh(lap)
    elif method == "lapack":
        vals, vecs = np.linalg.eigh(lap)
    else:
        raise ValueError(f"unknown eigensolver '{method}'")
    return _canonicalize(vals, vecs)


def gft(u: np.ndarray, x: np.ndarray) -> np.ndarray:
    if u.shape[0] != np.shape(x)[0]:
        raise ShapeError(f"gft: U is {u.shape}, signal is {np.shape(x)}")
    return u.T @ x


def igft(u: np.ndarray, xp: np.ndarray) -> np.ndarray:
    if u.shape[1] != np.shape(xp)[0]:
        raise ShapeError(f"igft: U is {u.shape}, spectral signal is {np.shape(xp)}")
    return u @ xp


# ---------------------------------------------------------------------------
# spectrum density


@dataclass(frozen=True, eq=False)
class KdeCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float


def silverman_bandwidth(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    # std of equal values can round to ~1e-16 instead of 0
    if np.ptp(x) == 0:
        return 1e-3
    sigma = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sigma, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = sigma
    h = 0.9 * spread * len(x) ** (-0.2)
    return h if h > 0 else 1e-3


def spectrum_kde(eigenvalues, grid_size: int = 512, lo: float = 0.0, hi: float = 2.0) -> KdeCurve:
    """Gaussian KDE of the spectrum on a uniform grid over ``[lo, hi]``.

    Each grid value is the kernel mass of its trapezoid cell divided by the
    cell width (half cells at the ends), so the trapezoidal integral equals
    the KDE mass inside ``[lo, hi]`` even when the bandwidth is far below the
    grid spacing.
    """
    lam = np.asarray(eigenvalues, dtype=np.float64).reshape(-1)
    if lam.size < 2:
        raise ValueError("spectrum_kde needs at least 2 eigenvalues")
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    if not hi > lo:
        raise ValueError(f"empty KDE range [{lo}, {hi}]")
    h = silverman_bandwidth(lam)
    grid = np.linspace(lo, hi, grid_size)
    step = grid[1] - grid[0]
    left = np.maximum(grid - step / 2, lo)
    right = np.minimum(grid + step / 2, hi)
    mass = ndtr((right[:, None] - lam[None, :]) / h) - ndtr((left[:, None] - lam[None, :]) / h)
    density = mass.mean(axis=1) / (right - left)
    return KdeCurve(grid, density, h)


# ---------------------------------------------------------------------------
# eigencache


def write_eigencache(sd: SpectralDecomposition, path: str | os.PathLike) -> None:
    """``GRSP``, version byte, u64 n, n f64 eigenvalues, n*n f64 column-major U."""
    n = sd.n
    vals = np.ascontiguousarray(sd.eigenvalues, dtype="<f8")
    vecs = np.asarray(sd.eigenvectors, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n))
        fh.write(vals.tobytes())
        fh.write(vecs.tobytes(order="F"))


def read_eigencache(path: str | os.PathLike) -> SpectralDecomposition:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise EigencacheError("bad magic")
    if len(blob) < _HEADER.size:
        raise EigencacheError("truncated header")
    _, version, n = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise EigencacheError(f"unsupported version {version}")
    if n == 0 or n > (1 << 31):
        raise EigencacheError(f"n overflow ({n})")
    need = _HEADER.size + 8 * (n + n * n)
    if len(blob) < need:
        raise EigencacheError(f"truncated: expected {need} bytes, found {len(blob)}")
    if len(blob) > need:
        raise EigencacheError(f"trailing bytes: expected {need}, found {len(blob)}")
    off = _HEADER.size
    vals = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64)
    vecs = np.frombuffer(blob, dtype="<f8", count=n * n, offset=off + 8 * n)
    vecs = vecs.reshape((n, n), order="F").astype(np.float64)
    return SpectralDecomposition(vals, np.ascontiguousarray(vecs))
