"""Multi-layer residual vector quantization with EMA codebook updates.

Each layer holds K code vectors of width D. Quantization runs the layers in
order: every layer picks the code nearest (squared Euclidean, lowest index
on ties) to the residual left by the previous layers, and the reconstruction
is the running sum of the picked codes. Codebooks are maintained by
exponential moving averages of assignment counts and residual sums, with
dead codes reseeded from recently seen residuals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DimensionError

__all__ = ["ResidualCodebook", "QuantizeResult", "quantize", "dequantize", "usage_histogram"]

_EMA_EPS = 1e-5
_POOL_SIZE = 1024


class ConfigurationError(ValueError):
    """Codebook structurally unusable (e.g. an empty layer)."""


@dataclass
class QuantizeResult:
    """Outcome of one residual quantization pass.

    ``indices`` has the latent's leading shape plus a trailing layer axis;
    ``quantized`` matches the latent; ``residuals[i]`` is the input residual
    of layer i (``residuals[0]`` is the latent itself) and ``residuals[-1]``
    the final unexplained remainder.
    """

    indices: np.ndarray
    quantized: np.ndarray
    residuals: list[np.ndarray]


@dataclass
class ResidualCodebook:
    """Layered code vectors plus the EMA state that maintains them."""

    layers: np.ndarray            # (N_q, K, D)
    ema_count: np.ndarray         # (N_q, K)
    ema_sum: np.ndarray           # (N_q, K, D)
    usage: np.ndarray             # (N_q, K) assignments since last dead-code sweep
    initialized: bool = False
    _pools: list[np.ndarray] = field(default_factory=list, repr=False)

    @classmethod
    def empty(cls, num_layers: int, codebook_size: int, dim: int) -> "ResidualCodebook":
        if num_layers < 1 or codebook_size < 1 or dim < 1:
            raise ConfigurationError(
                f"codebook needs positive layers/size/dim, got {num_layers}/{codebook_size}/{dim}"
            )
        return cls(
            layers=np.zeros((num_layers, codebook_size, dim)),
            ema_count=np.ones((num_layers, codebook_size)),
            ema_sum=np.zeros((num_layers, codebook_size, dim)),
            usage=np.zeros((num_layers, codebook_size), dtype=np.int64),
        )

    @classmethod
    def from_layers(cls, layers) -> "ResidualCodebook":
        """Wrap explicit code vectors (tests, checkpoints) as a ready codebook."""
        layers = np.ascontiguousarray(layers, dtype=np.float64)
        if layers.ndim != 3:
            raise ConfigurationError(f"layers must be (N_q, K, D), got shape {layers.shape}")
        if layers.shape[1] == 0:
            raise ConfigurationError("codebook layer is empty (K = 0)")
        book = cls.empty(*layers.shape)
        book.layers = layers.copy()
        book.ema_sum = layers.copy()
        book.initialized = True
        return book

    @property
    def num_layers(self) -> int:
        return self.layers.shape[0]

    @property
    def codebook_size(self) -> int:
        return self.layers.shape[1]

    @property
    def dim(self) -> int:
        return self.layers.shape[2]

    def validate(self):
        if self.codebook_size == 0:
            raise ConfigurationError("codebook layer is empty (K = 0)")
        if not np.all(np.isfinite(self.layers)):
            raise ConfigurationError("codebook contains non-finite code vectors")

    def initialize_from(self, latents: np.ndarray, rng: np.random.Generator):
        """Seed each layer from the residual cascade of a sample batch.

        Layer i draws K vectors from the residuals left after layers < i
        have quantized the batch; sampling is without replacement when the
        batch is large enough.
        """
        flat = np.ascontiguousarray(latents, dtype=np.float64).reshape(-1, self.dim)
        if flat.shape[0] == 0:
            raise ConfigurationError("cannot initialize a codebook from an empty batch")
        residual = flat
        k = self.codebook_size
        for i in range(self.num_layers):
            replace = residual.shape[0] < k
            picks = rng.choice(residual.shape[0], size=k, replace=replace)
            self.layers[i] = residual[picks]
            self.ema_sum[i] = self.layers[i].copy()
            self.ema_count[i] = 1.0
            idx = _nearest(residual, self.layers[i])
            residual = residual - self.layers[i][idx]
        self.usage[:] = 0
        self._pools = []
        self.initialized = True

    # ------------------------------------------------------------- training

    def ema_update(self, result: QuantizeResult, decay: float):
        """Fold one batch of assignments into the EMA accumulators.

        Per layer and code: the cluster count and residual-sum EMAs absorb
        the batch, then the code vector is renormalized to
        ``ema_sum / max(ema_count, eps)``.
        """
        if not 0.0 < decay < 1.0:
            raise ValueError(f"EMA decay must lie in (0, 1), got {decay}")
        idx2 = result.indices.reshape(-1, self.num_layers)
        pools = []
        for i in range(self.num_layers):
            inputs = result.residuals[i].reshape(-1, self.dim)
            idx = idx2[:, i]
            counts = np.bincount(idx, minlength=self.codebook_size).astype(np.float64)
            sums = np.zeros((self.codebook_size, self.dim))
            np.add.at(sums, idx, inputs)
            self.ema_count[i] = decay * self.ema_count[i] + (1.0 - decay) * counts
            self.ema_sum[i] = decay * self.ema_sum[i] + (1.0 - decay) * sums
            denom = np.maximum(self.ema_count[i], _EMA_EPS)
            self.layers[i] = self.ema_sum[i] / denom[:, None]
            self.usage[i] += counts.astype(np.int64)
            pools.append(inputs[-_POOL_SIZE:].copy())
        self._pools = pools

    def reseed_dead_codes(self, threshold: int, rng: np.random.Generator) -> int:
        """Replace codes whose usage over the current window fell below
        ``threshold`` with random recent residuals; resets the window."""
        reseeded = 0
        for i in range(self.num_layers):
            dead = np.flatnonzero(self.usage[i] < threshold)
            pool = self._pools[i] if i < len(self._pools) else None
            if dead.size and pool is not None and len(pool):
                picks = rng.choice(len(pool), size=dead.size, replace=len(pool) < dead.size)
                self.layers[i][dead] = pool[picks]
                self.ema_sum[i][dead] = self.layers[i][dead]
                self.ema_count[i][dead] = 1.0
                reseeded += dead.size
        self.usage[:] = 0
        return reseeded


def _nearest(residual: np.ndarray, codes: np.ndarray) -> np.ndarray:
    # ||r - b||^2 expanded; argmin returns the lowest index on ties.
    d = (
        (residual * residual).sum(axis=1, keepdims=True)
        - 2.0 * residual @ codes.T
        + (codes * codes).sum(axis=1)
    )
    return d.argmin(axis=1)


def quantize(latent: np.ndarray, codebook: ResidualCodebook,
             num_layers: int | None = None) -> QuantizeResult:
    """Greedy layer-by-layer residual quantization.

    ``latent`` is (..., D). At every layer the selected code minimizes the
    distance to that layer's input residual; the residual-norm sequence is
    not guaranteed monotone and is not asserted here.
    """
    codebook.validate()
    latent = np.asarray(latent, dtype=np.float64)
    if latent.shape[-1] != codebook.dim:
        raise DimensionError(
            f"quantize: latent width {latent.shape[-1]} != codebook dim {codebook.dim}"
        )
    layers = codebook.num_layers if num_layers is None else num_layers
    if not 1 <= layers <= codebook.num_layers:
        raise ValueError(f"num_layers must lie in [1, {codebook.num_layers}], got {layers}")
    lead = latent.shape[:-1]
    flat = latent.reshape(-1, codebook.dim)
    residual = flat
    quantized = np.zeros_like(flat)
    indices = np.empty((flat.shape[0], layers), dtype=np.int64)
    residuals = [flat.reshape(lead + (codebook.dim,))]
    for i in range(layers):
        idx = _nearest(residual, codebook.layers[i])
        indices[:, i] = idx
        quantized = quantized + codebook.layers[i][idx]
        residual = residual - codebook.layers[i][idx]
        residuals.append(residual.reshape(lead + (codebook.dim,)))
    return QuantizeResult(
        indices=indices.reshape(lead + (layers,)),
        quantized=quantized.reshape(lead + (codebook.dim,)),
        residuals=residuals,
    )


def dequantize(indices: np.ndarray, codebook: ResidualCodebook) -> np.ndarray:
    """Sum the addressed code vectors, layer 1 upward.

    Accumulates in the same order as ``quantize`` so the roundtrip
    ``dequantize(quantize(x).indices)`` is bitwise identical to
    ``quantize(x).quantized``.
    """
    codebook.validate()
    indices = np.asarray(indices)
    if indices.shape[-1] > codebook.num_layers:
        raise DimensionError(
            f"dequantize: {indices.shape[-1]} index layers > codebook layers {codebook.num_layers}"
        )
    if indices.size and (indices.min() < 0 or indices.max() >= codebook.codebook_size):
        raise IndexError(
            f"dequantize: index out of range [0, {codebook.codebook_size})"
        )
    lead = indices.shape[:-1]
    idx2 = indices.reshape(-1, indices.shape[-1])
    out = np.zeros((idx2.shape[0], codebook.dim))
    for i in range(idx2.shape[1]):
        out = out + codebook.layers[i][idx2[:, i]]
    return out.reshape(lead + (codebook.dim,))


def usage_histogram(indices: np.ndarray, codebook_size: int) -> np.ndarray:
    """Per-layer histogram of code usage; indices are (..., N_q)."""
    idx2 = np.asarray(indices).reshape(-1, np.asarray(indices).shape[-1])
    return np.stack([
        np.bincount(idx2[:, i], minlength=codebook_size) for i in range(idx2.shape[1])
    ])
