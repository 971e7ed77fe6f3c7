"""Action-chunk codec: temporal conv encoder, residual vector quantizer,
transposed-conv decoder, and the reconstruction+commitment training stage.

The estimator follows the sklearn transformer protocol: ``fit`` trains the
codec on raw command chunks, ``transform`` maps chunks to discrete token
grids (time-major: all quantizer layers of position 0, then position 1,
...), ``inverse_transform`` maps tokens back to continuous chunks.

Shapes: a chunk is (N, 12); the encoder produces a latent grid (C, D) with
C = ceil(N / pool_factor) (stride-1 causal convolutions preserve length,
average pooling compresses time); the quantizer emits a (C, N_q) index
grid. Gradients reach the encoder through a straight-through estimator;
codebooks are maintained by EMA updates, not gradient descent.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import autodiff as ad
from .autodiff import Tensor
from .data import NUM_COMMAND_DIMS, NormalizationStats, fit_normalization
from .data import normalize as normalize_frames
from .data import denormalize as denormalize_frames
from .metrics import DEFAULT_PEAK, ReconstructionReport
from .optim import AdamW
from .quantizer import QuantizeResult, ResidualCodebook, dequantize, quantize, usage_histogram
from .serialize import CheckpointError, load_container, save_container
from .validation import check_chunk_array, check_is_fitted

__all__ = ["ChunkCodec", "TrainingDiverged", "stage1_loss", "PAPER_SCALE"]

# The full-scale configuration; constructor defaults are desk-scale so the
# codec trains on a CPU in seconds while keeping the same structure.
PAPER_SCALE = {"latent_dim": 512, "codebook_size": 512}

_INT_FIELDS = {
    "chunk_len", "latent_dim", "codebook_size", "num_quantizers", "pool_factor",
    "kernel_size", "stride", "conv_layers", "dead_code_threshold",
    "dead_code_window", "steps", "batch_size", "seed", "log_every",
}
_FLOAT_FIELDS = {"beta", "ema_decay", "learning_rate"}


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the step and the last finite state."""

    def __init__(self, step: int, last_good=None):
        super().__init__(f"training loss became non-finite at step {step}")
        self.step = step
        self.last_good = last_good


def stage1_loss(chunk: np.ndarray, reconstruction: Tensor, latent: Tensor,
                quantized: np.ndarray, beta: float):
    """Reconstruction + commitment objective.

    ``total = mse(chunk, reconstruction) + beta * mse(latent, sg(quantized))``
    where the quantized latent enters as a constant (stop-gradient), so the
    commitment term pulls the encoder toward the codes it was assigned.
    Returns ``(total, l_rec, l_com)``; ``l_com`` is the unscaled MSE.
    """
    l_rec = ad.mse_loss(reconstruction, Tensor(chunk))
    l_com = ad.mse_loss(latent, Tensor(quantized))
    total = ad.add(l_rec, ad.mul(l_com, Tensor(np.array(beta))))
    return total, l_rec, l_com


class ChunkCodec(BaseEstimator, TransformerMixin):
    """Learned discrete codec for windows of 12-dim command frames.

    Parameters mirror the codec configuration: ``chunk_len`` frames per
    chunk, ``conv_layers`` stride-``stride`` causal convolutions of width
    ``kernel_size`` into a ``latent_dim``-channel latent, temporal average
    pooling by ``pool_factor``, and ``num_quantizers`` residual codebook
    layers of ``codebook_size`` codes each. ``beta`` weights the commitment
    term (1.0 reproduces the unweighted two-term objective).
    """

    def __init__(self, chunk_len=10, latent_dim=64, codebook_size=128,
                 num_quantizers=2, pool_factor=5, kernel_size=4, stride=1,
                 conv_layers=3, beta=0.25, ema_decay=0.99,
                 dead_code_threshold=1, dead_code_window=50,
                 learning_rate=3e-4, steps=3000, batch_size=64, seed=0,
                 log_every=50):
        self.chunk_len = chunk_len
        self.latent_dim = latent_dim
        self.codebook_size = codebook_size
        self.num_quantizers = num_quantizers
        self.pool_factor = pool_factor
        self.kernel_size = kernel_size
        self.stride = stride
        self.conv_layers = conv_layers
        self.beta = beta
        self.ema_decay = ema_decay
        self.dead_code_threshold = dead_code_threshold
        self.dead_code_window = dead_code_window
        self.learning_rate = learning_rate
        self.steps = steps
        self.batch_size = batch_size
        self.seed = seed
        self.log_every = log_every

    # ------------------------------------------------------------ geometry

    @property
    def upsample_factor(self) -> int:
        return self.pool_factor * self.stride**self.conv_layers

    @property
    def compressed_len(self) -> int:
        """Latent grid length C for the configured chunk length."""
        length = self.chunk_len
        for _ in range(self.conv_layers):
            length = -(-length // self.stride)
        return -(-length // self.pool_factor)

    @property
    def tokens_per_chunk(self) -> int:
        return self.compressed_len * self.num_quantizers

    def _validate_hyperparams(self):
        for name in ("chunk_len", "latent_dim", "codebook_size", "num_quantizers",
                     "pool_factor", "kernel_size", "conv_layers", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if self.beta < 0 or self.learning_rate < 0:
            raise ValueError("beta and learning_rate must be non-negative")

    # ------------------------------------------------------- network setup

    def _init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        h = self.latent_dim
        k = self.kernel_size
        params: dict[str, Tensor] = {}
        enc_channels = [NUM_COMMAND_DIMS] + [h] * (self.conv_layers - 1) + [self.latent_dim]
        for i in range(self.conv_layers):
            cin, cout = enc_channels[i], enc_channels[i + 1]
            params[f"enc.conv{i}.weight"] = Tensor(
                rng.normal(0.0, np.sqrt(2.0 / (cin * k)), (cout, cin, k)), requires_grad=True)
            params[f"enc.conv{i}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
        # Upsampling kernel spans two strides so adjacent latent positions
        # overlap; non-overlapping unpooling leaves visible chunk seams.
        up = 2 * self.upsample_factor
        dec_hidden = h if self.conv_layers >= 2 else NUM_COMMAND_DIMS
        params["dec.up.weight"] = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / self.latent_dim), (self.latent_dim, dec_hidden, up)),
            requires_grad=True)
        params["dec.up.bias"] = Tensor(np.zeros(dec_hidden), requires_grad=True)
        for j in range(self.conv_layers - 1):
            cin = dec_hidden if j == 0 else h
            cout = NUM_COMMAND_DIMS if j == self.conv_layers - 2 else h
            params[f"dec.conv{j}.weight"] = Tensor(
                rng.normal(0.0, np.sqrt(2.0 / (cin * k)), (cout, cin, k)), requires_grad=True)
            params[f"dec.conv{j}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
        return params

    def _encode_graph(self, chunks: np.ndarray, params: dict[str, Tensor]) -> Tensor:
        h = Tensor(chunks)
        for i in range(self.conv_layers):
            h = ad.conv1d(h, params[f"enc.conv{i}.weight"], params[f"enc.conv{i}.bias"],
                          stride=self.stride, padding="causal")
            if i < self.conv_layers - 1:
                h = ad.gelu(h)
        return ad.avg_pool1d(h, self.pool_factor)

    def _decode_graph(self, latent, params: dict[str, Tensor]) -> Tensor:
        h = latent if isinstance(latent, Tensor) else Tensor(latent)
        h = ad.conv1d_transpose(h, params["dec.up.weight"], params["dec.up.bias"],
                                stride=self.upsample_factor)
        # Kernel 2u at stride u emits (C+1)*u frames; keep the first N.
        h = ad.crop_time(h, self.chunk_len)
        for j in range(self.conv_layers - 1):
            h = ad.gelu(h)
            h = ad.conv1d(h, params[f"dec.conv{j}.weight"], params[f"dec.conv{j}.bias"],
                          stride=1, padding="causal")
        return h

    # ------------------------------------------------------------ training

    def _snapshot(self) -> dict:
        return {
            "params": {k: v.data.copy() for k, v in self.params_.items()},
            "codebook_layers": self.codebook_.layers.copy(),
            "codebook_ema_count": self.codebook_.ema_count.copy(),
            "codebook_ema_sum": self.codebook_.ema_sum.copy(),
        }

    def fit(self, X, y=None):
        """Train encoder/decoder (AdamW on the straight-through objective)
        and the codebook (EMA) on raw chunks shaped (n, chunk_len, 12)."""
        self._validate_hyperparams()
        X = check_chunk_array(X, self.chunk_len)
        if len(X) == 0:
            raise ValueError("cannot fit on an empty chunk array")
        rng = np.random.default_rng(self.seed)
        self.norm_stats_ = fit_normalization(X)
        xn = normalize_frames(X, self.norm_stats_)

        self.params_ = self._init_params(rng)
        self.codebook_ = ResidualCodebook.empty(
            self.num_quantizers, self.codebook_size, self.latent_dim)
        opt = AdamW(self.params_, lr=self.learning_rate)
        self.history_ = []

        n = len(xn)
        bs = n if not self.batch_size else min(self.batch_size, n)
        order = rng.permutation(n)
        cursor = 0
        last_good = None
        final_rec = final_com = float("nan")
        for step in range(self.steps):
            if cursor + bs > n:
                order = rng.permutation(n)
                cursor = 0
            batch = xn[order[cursor : cursor + bs]]
            cursor += bs

            latent = self._encode_graph(batch, self.params_)
            if not self.codebook_.initialized:
                self.codebook_.initialize_from(latent.data, rng)
            qres = quantize(latent.data, self.codebook_)
            st = ad.straight_through(latent, qres.quantized)
            recon = self._decode_graph(st, self.params_)
            total, l_rec, l_com = stage1_loss(batch, recon, latent, qres.quantized, self.beta)

            if not np.isfinite(total.data):
                raise TrainingDiverged(step, last_good)
            if step % self.log_every == 0:
                last_good = self._snapshot()

            opt.zero_grad()
            total.backward()
            opt.step()
            self.codebook_.ema_update(qres, self.ema_decay)
            if (step + 1) % self.dead_code_window == 0:
                self.codebook_.reseed_dead_codes(self.dead_code_threshold, rng)

            final_rec, final_com = float(l_rec.data), float(l_com.data)
            if step % self.log_every == 0 or step == self.steps - 1:
                hist = usage_histogram(qres.indices, self.codebook_size)
                self.history_.append({
                    "step": step,
                    "l_rec": final_rec,
                    "l_com": final_com,
                    "total": float(total.data),
                    "perplexity": [float(np.exp(_entropy(h))) for h in hist],
                })
        self.trained_steps_ = self.steps
        self.final_losses_ = {"l_rec": final_rec, "l_com": final_com}
        return self

    # ------------------------------------------------- spec-level operations

    def encode(self, chunks_normalized) -> np.ndarray:
        """Normalized chunks (n, N, 12) -> latent grids (n, C, D)."""
        check_is_fitted(self, "params_")
        xn = check_chunk_array(chunks_normalized, self.chunk_len, name="chunks")
        return self._encode_graph(xn, self.params_).data

    def quantize_latent(self, latent) -> QuantizeResult:
        """Residual-quantize latent grids against the fitted codebook."""
        check_is_fitted(self, "codebook_")
        return quantize(np.asarray(latent, dtype=np.float64), self.codebook_)

    def dequantize(self, indices) -> np.ndarray:
        """Index grids (..., N_q) -> summed code vectors (..., D)."""
        check_is_fitted(self, "codebook_")
        return dequantize(indices, self.codebook_)

    def decode(self, latent) -> np.ndarray:
        """Latent grids (n, C, D) -> normalized chunks (n, N, 12)."""
        check_is_fitted(self, "params_")
        latent = np.asarray(latent, dtype=np.float64)
        single = latent.ndim == 2
        if single:
            latent = latent[None]
        expect = (self.compressed_len, self.latent_dim)
        if latent.shape[1:] != expect:
            raise ad.DimensionError(f"decode: latent shape {latent.shape[1:]} != {expect}")
        out = self._decode_graph(latent, self.params_).data
        return out[0] if single else out

    # --------------------------------------------------- estimator surface

    def transform(self, X) -> np.ndarray:
        """Raw chunks -> discrete tokens (n, C*N_q), time-major."""
        check_is_fitted(self, "codebook_")
        X = check_chunk_array(X, self.chunk_len)
        xn = normalize_frames(X, self.norm_stats_)
        qres = self.quantize_latent(self._encode_graph(xn, self.params_).data)
        return qres.indices.reshape(len(X), self.tokens_per_chunk)

    def inverse_transform(self, tokens) -> np.ndarray:
        """Tokens (n, C*N_q) or (n, C, N_q) -> raw chunks (n, N, 12)."""
        check_is_fitted(self, "codebook_")
        tokens = np.asarray(tokens)
        grids = tokens.reshape(-1, self.compressed_len, self.num_quantizers)
        latent = self.dequantize(grids)
        xn = self.decode(latent)
        return denormalize_frames(xn, self.norm_stats_)

    def reconstruct(self, X) -> np.ndarray:
        """Round-trip raw chunks through encode/quantize/decode."""
        return self.inverse_transform(self.transform(X))

    def evaluate(self, X, peak: float = DEFAULT_PEAK) -> ReconstructionReport:
        """Reconstruction fidelity in the normalized command space."""
        check_is_fitted(self, "codebook_")
        X = check_chunk_array(X, self.chunk_len)
        xn = normalize_frames(X, self.norm_stats_)
        qres = self.quantize_latent(self._encode_graph(xn, self.params_).data)
        recon = self.decode(qres.quantized)
        hist = usage_histogram(qres.indices, self.codebook_size)
        return ReconstructionReport.compute(xn, recon, peak=peak, usage_histograms=hist)

    # ---------------------------------------------------------- persistence

    def save(self, path):
        """Write a self-describing checkpoint (config + stats + parameters)."""
        check_is_fitted(self, "params_")
        config = {name: getattr(self, name) for name in _INT_FIELDS | _FLOAT_FIELDS}
        metadata = {
            "trained_steps": getattr(self, "trained_steps_", 0),
            "codebook_initialized": self.codebook_.initialized,
            "final_rec": self.final_losses_.get("l_rec", float("nan")),
            "final_com": self.final_losses_.get("l_com", float("nan")),
        }
        blocks = [
            ("norm.mins", self.norm_stats_.mins),
            ("norm.maxs", self.norm_stats_.maxs),
            ("codebook.layers", self.codebook_.layers),
            ("codebook.ema_count", self.codebook_.ema_count),
            ("codebook.ema_sum", self.codebook_.ema_sum),
        ]
        blocks += [(name, self.params_[name].data) for name in sorted(self.params_)]
        save_container(path, "codec", config, metadata, blocks)

    @classmethod
    def load(cls, path) -> "ChunkCodec":
        """Load a checkpoint; requires no external configuration."""
        kind, config, metadata, blocks = load_container(path)
        if kind != "codec":
            raise CheckpointError(f"{path}: expected a codec checkpoint, found kind={kind!r}")
        kwargs = {}
        for key, value in config.items():
            if key in _INT_FIELDS:
                kwargs[key] = int(value)
            elif key in _FLOAT_FIELDS:
                kwargs[key] = float(value)
        codec = cls(**kwargs)
        try:
            codec.norm_stats_ = NormalizationStats(blocks.pop("norm.mins"), blocks.pop("norm.maxs"))
            layers = blocks.pop("codebook.layers")
            book = ResidualCodebook.empty(*layers.shape)
            book.layers = layers
            book.ema_count = blocks.pop("codebook.ema_count")
            book.ema_sum = blocks.pop("codebook.ema_sum")
            book.initialized = metadata.get("codebook_initialized", "0") == "1"
            codec.codebook_ = book
            codec.params_ = {name: Tensor(arr, requires_grad=True) for name, arr in blocks.items()}
        except KeyError as exc:
            raise CheckpointError(f"{path}: checkpoint is missing block {exc}") from exc
        codec.trained_steps_ = int(metadata.get("trained_steps", "0"))
        codec.final_losses_ = {
            "l_rec": float(metadata.get("final_rec", "nan")),
            "l_com": float(metadata.get("final_com", "nan")),
        }
        codec.history_ = []
        return codec


def _entropy(histogram: np.ndarray) -> float:
    total = histogram.sum()
    if total <= 0:
        return 0.0
    p = histogram[histogram > 0] / total
    return float(-(p * np.log(p)).sum())
