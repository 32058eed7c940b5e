"""End-to-end GrassNet: encoder, learned spectral convolution, linear classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ShapeError
from .spectral import SpectralDecomposition
from .ssm import (FcFilterParams, FilterCoefficients, SsmFilterParams, _uniform,
                  fc_filter_forward, filter_forward)

VARIANTS = ("ssm-bi", "ssm-un", "fc")


@dataclass
class Affine:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator) -> "Affine":
        return cls(_uniform(rng, (d_in, d_out), d_in), _uniform(rng, (d_out,), d_in))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.weight.shape[0]:
            raise ShapeError(f"affine: input width {x.shape[1]}, expected {self.weight.shape[0]}")
        return ad.matmul(x, self.weight) + self.bias


@dataclass
class ModelParams:
    encoder: list[Affine]
    filter: SsmFilterParams | FcFilterParams
    classifier: Affine
    variant: str = "ssm-bi"

    @classmethod
    def init(cls, d: int, num_classes: int, hidden: int = 16, fc_layers: int = 1,
             variant: str = "ssm-bi", gamma: float = 1.0, d_state: int = 16,
             ssm_layers: int = 2, filter_width: int | None = None,
             seed: int = 0) -> "ModelParams":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant '{variant}' (expected one of {VARIANTS})")
        if fc_layers < 1:
            raise ValueError("fc_layers must be >= 1")
        rng = np.random.default_rng(seed)
        widths = [d] + [hidden] * fc_layers
        encoder = [Affine.init(widths[i], widths[i + 1], rng) for i in range(fc_layers)]
        d_in = filter_width or hidden
        if variant == "fc":
            filt = FcFilterParams.init(d_in, gamma, rng)
        else:
            filt = SsmFilterParams.init(d_in, d_state, ssm_layers, gamma, rng,
                                        bidirectional=variant == "ssm-bi")
        return cls(encoder, filt, Affine.init(hidden, num_classes, rng), variant)

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.encoder):
            out[f"encoder.{i}.weight"] = layer.weight
            out[f"encoder.{i}.bias"] = layer.bias
        out.update(self.filter.named("filter"))
        out["classifier.weight"] = self.classifier.weight
        out["classifier.bias"] = self.classifier.bias
        return out

    def store(self) -> ParamStore:
        return ParamStore(self.named())

    @classmethod
    def from_store(cls, store: ParamStore, variant: str, gamma: float) -> "ModelParams":
        encoder = []
        i = 0
        while f"encoder.{i}.weight" in store.params:
            encoder.append(Affine(store[f"encoder.{i}.weight"], store[f"encoder.{i}.bias"]))
            i += 1
        if variant == "fc":
            filt = FcFilterParams.from_named(store, gamma)
        else:
            filt = SsmFilterParams.from_named(store, gamma, bidirectional=variant == "ssm-bi")
        cls_layer = Affine(store["classifier.weight"], store["classifier.bias"])
        return cls(encoder, filt, cls_layer, variant)


def encode(x, encoder: list[Affine]) -> Tensor:
    """Affine layers with ReLU between them; the last layer stays linear."""
    h = ad.as_tensor(x)
    for i, layer in enumerate(encoder):
        h = layer(h)
        if i < len(encoder) - 1:
            h = ad.relu(h)
    return h


def spectral_convolve(u: np.ndarray, coeffs, x_hat: Tensor) -> Tensor:
    """``U diag(coeffs) U^T x_hat`` as two dense products; the n x n filter
    operator is never formed."""
    c = ad.as_tensor(coeffs)
    n = u.shape[0]
    if c.data.reshape(-1).shape[0] != n or x_hat.shape[0] != n:
        raise ShapeError(f"spectral_convolve: U {u.shape}, coeffs {c.shape}, X {x_hat.shape}")
    spec = ad.matmul(Tensor(u.T), x_hat)
    spec = ad.reshape(c, (n, 1)) * spec
    return ad.matmul(Tensor(u), spec)


def classify(x: Tensor, classifier: Affine) -> Tensor:
    return classifier(x)


def loss(logits: Tensor, labels) -> Tensor:
    """Softmax cross-entropy averaged over the given rows."""
    return ad.cross_entropy(logits, labels)


def filter_coefficients(lambdas, params: ModelParams, scan: str = "sequential") -> FilterCoefficients:
    if params.variant == "fc":
        return fc_filter_forward(lambdas, params.filter)
    if params.variant == "ssm-un":
        return filter_forward(lambdas, params.filter, scan, bidirectional=False)
    if params.variant == "ssm-bi":
        return filter_forward(lambdas, params.filter, scan, bidirectional=True)
    raise ValueError(f"unknown variant '{params.variant}'")


def forward(decomp: SpectralDecomposition, x, params: ModelParams,
            variant: str | None = None, scan: str = "sequential") -> Tensor:
    """Logits for every node.  ``variant`` overrides ``params.variant`` (e.g. to
    run a bidirectional parameter set as ``ssm-un``)."""
    if variant is not None and variant != params.variant:
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant '{variant}'")
        params = ModelParams(params.encoder, params.filter, params.classifier, variant)
    coeffs = filter_coefficients(decomp.eigenvalues, params, scan)
    x_hat = encode(x, params.encoder)
    x_tilde = spectral_convolve(decomp.eigenvectors, coeffs.values, x_hat)
    return classify(x_tilde, params.classifier)
