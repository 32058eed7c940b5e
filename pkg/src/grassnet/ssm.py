"""Selective state-space filter over the ordered Laplacian spectrum.

Pipeline per call: embed each eigenvalue (``psi``), run ``l`` residual
bidirectional selective-scan layers over the ascending sequence, project to
one scalar per position and rescale so the largest magnitude equals
``gamma``.
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, record
from .errors import ShapeError

SERIES_CUTOFF = 1e-8


# ---------------------------------------------------------------------------
# parameters


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


@dataclass
class SsmLayerParams:
    W_B: Tensor
    W_C: Tensor
    W_delta: Tensor
    A_log: Tensor

    @classmethod
    def init(cls, d_in: int, d_mid: int, rng: np.random.Generator) -> "SsmLayerParams":
        # -A spaced over 1..d_mid per channel (S4D-real style)
        a_log = np.tile(np.log(np.arange(1, d_mid + 1, dtype=np.float64)), (d_in, 1))
        return cls(
            W_B=_uniform(rng, (d_in, d_mid), d_in),
            W_C=_uniform(rng, (d_in, d_mid), d_in),
            W_delta=_uniform(rng, (d_in, d_in), d_in),
            A_log=Tensor(a_log),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.W_B": self.W_B, f"{prefix}.W_C": self.W_C,
                f"{prefix}.W_delta": self.W_delta, f"{prefix}.A_log": self.A_log}

    @classmethod
    def from_named(cls, store, prefix: str) -> "SsmLayerParams":
        return cls(*(store[f"{prefix}.{k}"] for k in ("W_B", "W_C", "W_delta", "A_log")))

    def zero_(self) -> None:
        for t in (self.W_B, self.W_C, self.W_delta, self.A_log):
            t.data = np.zeros_like(t.data)


@dataclass
class SsmLayerPair:
    fwd: SsmLayerParams
    bwd: SsmLayerParams | None = None


@dataclass
class SsmFilterParams:
    """psi (affine stack from 1 to ``d_in``, tanh after each), scan layers,
    output projection ``w_out`` and the fixed scale ``gamma``."""

    psi: list[tuple[Tensor, Tensor]]
    layers: list[SsmLayerPair]
    w_out: Tensor
    gamma: float = 1.0

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("need at least one SSM layer")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    @property
    def d_in(self) -> int:
        return self.w_out.shape[0]

    @property
    def bidirectional(self) -> bool:
        return all(p.bwd is not None for p in self.layers)

    @classmethod
    def init(cls, d_in: int, d_mid: int = 16, n_layers: int = 2, gamma: float = 1.0,
             rng: np.random.Generator | None = None, bidirectional: bool = True,
             psi_depth: int = 1) -> "SsmFilterParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        psi = [(_uniform(rng, (1, d_in), 1), _uniform(rng, (d_in,), 1))]
        for _ in range(psi_depth - 1):
            psi.append((_uniform(rng, (d_in, d_in), d_in), _uniform(rng, (d_in,), d_in)))
        layers = []
        for _ in range(n_layers):
            fwd = SsmLayerParams.init(d_in, d_mid, rng)
            bwd = SsmLayerParams.init(d_in, d_mid, rng) if bidirectional else None
            layers.append(SsmLayerPair(fwd, bwd))
        return cls(psi, layers, _uniform(rng, (d_in,), d_in), gamma)

    def named(self, prefix: str = "filter") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (w, b) in enumerate(self.psi):
            out[f"{prefix}.psi.{i}.weight"] = w
            out[f"{prefix}.psi.{i}.bias"] = b
        for i, pair in enumerate(self.layers):
            out.update(pair.fwd.named(f"{prefix}.layer.{i}.fwd"))
            if pair.bwd is not None:
                out.update(pair.bwd.named(f"{prefix}.layer.{i}.bwd"))
        out[f"{prefix}.w_out"] = self.w_out
        return out

    @classmethod
    def from_named(cls, store, gamma: float, prefix: str = "filter",
                   bidirectional: bool = True) -> "SsmFilterParams":
        psi = _psi_from_named(store, prefix)
        layers = []
        i = 0
        while f"{prefix}.layer.{i}.fwd.W_B" in store.params:
            fwd = SsmLayerParams.from_named(store, f"{prefix}.layer.{i}.fwd")
            bwd = None
            if bidirectional and f"{prefix}.layer.{i}.bwd.W_B" in store.params:
                bwd = SsmLayerParams.from_named(store, f"{prefix}.layer.{i}.bwd")
            layers.append(SsmLayerPair(fwd, bwd))
            i += 1
        return cls(psi, layers, store[f"{prefix}.w_out"], gamma)


@dataclass
class FcFilterParams:
    """Pointwise ``lambda -> g(lambda)``: the psi stack then a linear read-out."""

    psi: list[tuple[Tensor, Tensor]]
    w_out: Tensor
    b_out: Tensor
    gamma: float = 1.0

    @classmethod
    def init(cls, d_in: int, gamma: float = 1.0, rng: np.random.Generator | None = None,
             psi_depth: int = 1) -> "FcFilterParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        psi = [(_uniform(rng, (1, d_in), 1), _uniform(rng, (d_in,), 1))]
        for _ in range(psi_depth - 1):
            psi.append((_uniform(rng, (d_in, d_in), d_in), _uniform(rng, (d_in,), d_in)))
        return cls(psi, _uniform(rng, (d_in,), d_in), _uniform(rng, (1,), d_in), gamma)

    def named(self, prefix: str = "filter") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (w, b) in enumerate(self.psi):
            out[f"{prefix}.psi.{i}.weight"] = w
            out[f"{prefix}.psi.{i}.bias"] = b
        out[f"{prefix}.w_out"] = self.w_out
        out[f"{prefix}.b_out"] = self.b_out
        return out

    @classmethod
    def from_named(cls, store, gamma: float, prefix: str = "filter") -> "FcFilterParams":
        return cls(_psi_from_named(store, prefix), store[f"{prefix}.w_out"],
                   store[f"{prefix}.b_out"], gamma)


def _psi_from_named(store, prefix: str) -> list[tuple[Tensor, Tensor]]:
    psi = []
    i = 0
    while f"{prefix}.psi.{i}.weight" in store.params:
        psi.append((store[f"{prefix}.psi.{i}.weight"], store[f"{prefix}.psi.{i}.bias"]))
        i += 1
    return psi


# ---------------------------------------------------------------------------
# filter stages


def psi_embed(lambdas, psi: list[tuple[Tensor, Tensor]]) -> Tensor:
    """Row ``i`` is ``tanh(w * lambda_i + b)`` (repeated for deeper stacks)."""
    lam = np.asarray(lambdas, dtype=np.float64).reshape(-1, 1)
    h: Tensor = Tensor(lam)
    for w, b in psi:
        h = ad.tanh(ad.matmul(h, w) + b)
    return h


_TINY = np.finfo(np.float64).tiny


def selection(h: Tensor, p: SsmLayerParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent ``B = H W_B``, ``C = H W_C``, ``delta = softplus(H W_delta)``."""
    if h.shape[1] != p.W_B.shape[0]:
        raise ShapeError(f"selection: H has width {h.shape[1]}, W_B expects {p.W_B.shape[0]}")
    b = ad.matmul(h, p.W_B)
    c = ad.matmul(h, p.W_C)
    # softplus underflows to exactly 0 below about -745; adding the smallest
    # normal double keeps delta > 0 and leaves every other value bit-identical
    delta = ad.softplus(ad.matmul(h, p.W_delta)) + Tensor(np.array(_TINY))
    return b, c, delta


def _phi(z: np.ndarray) -> np.ndarray:
    small = np.abs(z) < SERIES_CUTOFF
    if not small.any():
        return np.expm1(z) / z
    zs = np.where(small, 1.0, z)
    return np.where(small, 1.0 + z / 2.0, np.expm1(zs) / zs)


def _dphi(z: np.ndarray) -> np.ndarray:
    # phi'(z) = (e^z - phi(z)) / z; cancellation near 0 -> Taylor series
    small = np.abs(z) < 1e-3
    zs = np.where(small, 1.0, z)
    out = (np.exp(zs) - _phi(zs)) / zs
    if small.any():
        zz = z[small]
        out[small] = 0.5 + zz * (1.0 / 3.0 + zz * (1.0 / 8.0 + zz / 30.0))
    return out


def phi(z: Tensor) -> Tensor:
    """``(e^z - 1) / z``, with the ``1 + z/2`` series below ``SERIES_CUTOFF``."""
    return record(_phi(z.data), (z,), lambda g: (g * _dphi(z.data),))


def discretize(delta: Tensor, A: Tensor, B: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order hold for diagonal ``A``.

    ``Abar[i,j,k] = exp(delta[i,j] A[j,k])`` and
    ``Bbar[i,j,k] = (exp(delta[i,j] A[j,k]) - 1) / A[j,k] * B[i,k]``,
    evaluated as ``delta * phi(delta A) * B``.
    """
    if np.any(delta.data <= 0):
        raise ValueError("discretize: step sizes must be positive")
    n, d = delta.shape
    if A.shape[0] != d or B.shape[0] != n or A.shape[1] != B.shape[1]:
        raise ShapeError(f"discretize: delta {delta.shape}, A {A.shape}, B {B.shape}")
    m = A.shape[1]
    delta3 = ad.reshape(delta, (n, d, 1))
    z = delta3 * ad.reshape(A, (1, d, m))
    a_bar = ad.exp(z)
    b_bar = delta3 * phi(z) * ad.reshape(B, (n, 1, m))
    return a_bar, b_bar


def linear_recurrence(a: np.ndarray, u: np.ndarray, method: str = "sequential") -> np.ndarray:
    """All states of ``h_i = a_i * h_{i-1} + u_i`` from ``h_{-1} = 0``.

    ``method="associative"`` runs a Hillis-Steele inclusive scan over the
    affine maps ``h -> a h + u`` (log2(n) vectorised passes).
    """
    if method == "sequential":
        hs = np.empty_like(u)
        h = np.zeros_like(u[0])
        for i in range(u.shape[0]):
            h = a[i] * h + u[i]
            hs[i] = h
        return hs
    if method == "associative":
        acc_a = a.copy()
        acc_u = u.copy()
        off = 1
        n = u.shape[0]
        while off < n:
            new_u = acc_u.copy()
            new_a = acc_a.copy()
            new_u[off:] = acc_a[off:] * acc_u[:-off] + acc_u[off:]
            new_a[off:] = acc_a[off:] * acc_a[:-off]
            acc_a, acc_u = new_a, new_u
            off *= 2
        return acc_u
    raise ValueError(f"unknown scan method '{method}'")


def ssm_scan(h_in: Tensor, a_bar: Tensor, b_bar: Tensor, C: Tensor,
             method: str = "sequential") -> Tensor:
    """Selective scan: per channel ``j`` and state ``k``,
    ``h[i,j,k] = Abar[i,j,k] h[i-1,j,k] + Bbar[i,j,k] H[i,j]`` and
    ``S[i,j] = sum_k C[i,k] h[i,j,k]``.  Backward runs the adjoint recurrence
    in reverse with the same kernel.
    """
    x = h_in.data
    a = a_bar.data
    bb = b_bar.data
    c = C.data
    u = bb * x[:, :, None]
    hs = linear_recurrence(a, u, method)
    out = np.einsum("ijk,ik->ij", hs, c)

    def back(g):
        g_c = np.einsum("ij,ijk->ik", g, hs)
        direct = g[:, :, None] * c[:, None, :]
        a_next = np.concatenate([a[1:], np.zeros_like(a[:1])], axis=0)
        gh = linear_recurrence(a_next[::-1], direct[::-1], method)[::-1]
        h_prev = np.concatenate([np.zeros_like(hs[:1]), hs[:-1]], axis=0)
        g_a = gh * h_prev
        g_b = gh * x[:, :, None]
        g_x = (gh * bb).sum(axis=2)
        return g_x, g_a, g_b, g_c

    return record(out, (h_in, a_bar, b_bar, C), back)


def ssm_layer(h: Tensor, p: SsmLayerParams, method: str = "sequential") -> Tensor:
    b, c, delta = selection(h, p)
    A = -ad.exp(p.A_log)
    a_bar, b_bar = discretize(delta, A, b)
    return ssm_scan(h, a_bar, b_bar, c, method)


def bidirectional_layer(h: Tensor, fwd: SsmLayerParams, bwd: SsmLayerParams | None,
                        method: str = "sequential") -> Tensor:
    """Ascending scan plus the re-reversed descending scan (``bwd=None``: ascending only)."""
    out = ssm_layer(h, fwd, method)
    if bwd is None:
        return out
    return out + ad.reverse_rows(ssm_layer(ad.reverse_rows(h), bwd, method))


@dataclass
class FilterCoefficients:
    values: Tensor
    zero: bool = False  # pre-scale output was all zeros

    def numpy(self) -> np.ndarray:
        return self.values.data


def rescale(s: Tensor, gamma: float) -> FilterCoefficients:
    """``gamma * s / max|s|``; the max takes part in differentiation."""
    peak = ad.max_abs(s)
    if float(peak.data) == 0.0:
        warnings.warn("filter output is identically zero; returning zero coefficients",
                      RuntimeWarning, stacklevel=2)
        return FilterCoefficients(Tensor(np.zeros(s.shape)), zero=True)
    return FilterCoefficients(ad.scalar_mul(ad.div_scalar(s, peak), gamma))


def filter_forward(lambdas, params: SsmFilterParams, method: str = "sequential",
                   bidirectional: bool | None = None) -> FilterCoefficients:
    """Filtering coefficient per ascending eigenvalue.

    Layers are residual: ``H_t = layer(H_{t-1}) + H_{t-1}``.  With
    ``bidirectional=False`` the descending scans are skipped even if their
    parameters exist.
    """
    lam = np.asarray(lambdas, dtype=np.float64).reshape(-1)
    if lam.size == 0:
        raise ValueError("empty spectrum")
    use_bwd = params.bidirectional if bidirectional is None else bidirectional
    h = psi_embed(lam, params.psi)
    for pair in params.layers:
        h = bidirectional_layer(h, pair.fwd, pair.bwd if use_bwd else None, method) + h
    s = ad.reshape(ad.matmul(h, ad.reshape(params.w_out, (params.d_in, 1))), (lam.size,))
    return rescale(s, params.gamma)


def fc_filter_forward(lambdas, params: FcFilterParams) -> FilterCoefficients:
    lam = np.asarray(lambdas, dtype=np.float64).reshape(-1)
    h = psi_embed(lam, params.psi)
    # a per-row reduction instead of BLAS matmul: BLAS may round rows
    # differently by position, and equal eigenvalues must map to equal values
    s = ad.sum_(h * params.w_out, axis=1) + params.b_out
    return rescale(s, params.gamma)


def write_filter_dump(lambdas, coeffs, path: str | os.PathLike) -> None:
    """CSV ``lambda,coefficient`` in ascending-eigenvalue order."""
    lam = np.asarray(lambdas, dtype=np.float64).reshape(-1)
    vals = np.asarray(coeffs, dtype=np.float64).reshape(-1)
    if lam.shape != vals.shape:
        raise ShapeError(f"filter dump: {lam.size} eigenvalues vs {vals.size} coefficients")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "coefficient"])
        for lv, cv in zip(lam, vals):
            w.writerow([repr(float(lv)), repr(float(cv))])
