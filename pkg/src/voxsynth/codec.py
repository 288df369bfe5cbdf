"""Volume codec: conv encoder, fine-grained two-stage vector quantization,
and a mirrored transposed-conv decoder.

Each latent vector is split into two contiguous half-vectors; every half is
quantized as the sum of two codebook entries: the nearest entry, then the
nearest entry to the leftover difference.  Entry 0 is pinned to the exact
zero vector and excluded from training, which guarantees the second lookup
can always fall back to "add nothing" — so two-stage quantization never does
worse than a single lookup.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Adam, Tape, Tensor

DOWNSAMPLE = 4  # two stride-2 stages


@dataclass
class CodecParams:
    """Encoder/decoder weights, codebook, and training hyperparameters."""

    n_c: int
    n_d: int
    hidden: int
    beta: float
    learning_rate: float
    iterations: int
    enc1_w: Tensor
    enc1_b: Tensor
    enc2_w: Tensor
    enc2_b: Tensor
    dec1_w: Tensor
    dec1_b: Tensor
    dec2_w: Tensor
    dec2_b: Tensor
    codebook: Tensor  # (n_c, n_d/2); row 0 is the pinned zero entry

    @classmethod
    def init(
        cls,
        seed: int = 0,
        n_c: int = 64,
        n_d: int = 16,
        hidden: int = 8,
        beta: float = 0.25,
        learning_rate: float = 2e-3,
        iterations: int = 5000,
    ) -> "CodecParams":
        if n_d % 2:
            raise ValueError(f"n_d must be even, got {n_d}")
        if n_c < 2:
            raise ValueError(f"codebook needs at least 2 entries, got {n_c}")
        rng = np.random.default_rng(seed)

        def w(shape, fan_in):
            return Tensor(rng.normal(0, np.sqrt(2.0 / fan_in), shape), requires_grad=True)

        def b(n):
            return Tensor(np.zeros(n), requires_grad=True)

        entries = rng.normal(0.0, 0.1, (n_c, n_d // 2))
        entries[0] = 0.0
        params = cls(
            n_c=n_c,
            n_d=n_d,
            hidden=hidden,
            beta=beta,
            learning_rate=learning_rate,
            iterations=iterations,
            enc1_w=w((hidden, 1, 3, 3, 3), 27),
            enc1_b=b(hidden),
            enc2_w=w((n_d, hidden, 3, 3, 3), 27 * hidden),
            enc2_b=b(n_d),
            dec1_w=w((n_d, hidden, 3, 3, 3), 27 * n_d),
            dec1_b=b(hidden),
            dec2_w=w((hidden, 1, 3, 3, 3), 27 * hidden),
            dec2_b=b(1),
            codebook=Tensor(entries, requires_grad=True),
        )
        params.validate_codebook()
        return params

    def validate_codebook(self):
        e = self.codebook.data
        if not np.array_equal(e[0], np.zeros(e.shape[1])):
            raise ValueError("codebook entry 0 must be the exact zero vector")
        _, counts = np.unique(e, axis=0, return_counts=True)
        if np.any(counts > 1):
            raise ValueError("codebook entries must be pairwise distinct")

    def parameters(self) -> list[Tensor]:
        return [
            self.enc1_w, self.enc1_b, self.enc2_w, self.enc2_b,
            self.dec1_w, self.dec1_b, self.dec2_w, self.dec2_b,
            self.codebook,
        ]


def _encode_graph(x: Tensor, params: CodecParams) -> Tensor:
    h = T.leaky_relu(T.conv3d(x, params.enc1_w, params.enc1_b, stride=2, padding=1))
    z = T.conv3d(h, params.enc2_w, params.enc2_b, stride=2, padding=1)
    return T.transpose(z, (1, 2, 3, 0))  # (d, h, w, n_d)


def _decode_graph(q: Tensor, params: CodecParams) -> Tensor:
    z = T.transpose(q, (3, 0, 1, 2))  # (n_d, d, h, w)
    h = T.leaky_relu(
        T.conv3d_transpose(z, params.dec1_w, params.dec1_b, stride=2, padding=1, output_padding=1)
    )
    return T.conv3d_transpose(
        h, params.dec2_w, params.dec2_b, stride=2, padding=1, output_padding=1
    )


def encode(x: np.ndarray, params: CodecParams) -> np.ndarray:
    """Map a (D, H, W) volume to its (D/4, H/4, W/4, n_d) latent grid."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"encode expects a 3-D volume, got shape {x.shape}")
    if any(e % DOWNSAMPLE for e in x.shape):
        raise ValueError(
            f"volume extents {x.shape} must be divisible by {DOWNSAMPLE}"
        )
    return _encode_graph(Tensor(x[None]), params).data


def decode(q_grid: np.ndarray, params: CodecParams) -> np.ndarray:
    """Map a latent grid back to a volume, clamped to [0, 1]."""
    q_grid = np.asarray(q_grid, dtype=np.float64)
    if q_grid.ndim != 4 or q_grid.shape[-1] != params.n_d:
        raise ValueError(
            f"decode expects a (d, h, w, {params.n_d}) grid, got {q_grid.shape}"
        )
    out = _decode_graph(Tensor(q_grid), params).data[0]
    return np.clip(out, 0.0, 1.0)


def split_halves(z_grid: np.ndarray) -> np.ndarray:
    """(d, h, w, n) -> (2, d, h, w, n/2), contiguous halves of each vector."""
    z_grid = np.asarray(z_grid)
    n = z_grid.shape[-1]
    if n % 2:
        raise ValueError(f"vector dimension {n} must be even to split")
    half = n // 2
    return np.stack([z_grid[..., :half], z_grid[..., half:]])


def stack_halves(halves: np.ndarray) -> np.ndarray:
    """Inverse of split_halves; exact round-trip."""
    halves = np.asarray(halves)
    if halves.shape[0] != 2:
        raise ValueError(f"expected a leading axis of 2 halves, got {halves.shape}")
    return np.concatenate([halves[0], halves[1]], axis=-1)


def _sq_dists(vs: np.ndarray, entries: np.ndarray) -> np.ndarray:
    diff = vs[:, None, :] - entries[None, :, :]
    return np.einsum("mkd,mkd->mk", diff, diff)


def nearest_codes(vs: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index of the closest entry per row; ties resolve to the lowest index."""
    return _sq_dists(np.atleast_2d(vs), entries).argmin(axis=1)


def nearest_code(v: np.ndarray, codebook: np.ndarray) -> int:
    return int(nearest_codes(np.atleast_2d(v), codebook)[0])


def fine_quantize_batch(vs: np.ndarray, entries: np.ndarray):
    """Two-stage quantization of each row: nearest entry, then nearest entry
    to the remainder.  Returns (k1, k2, quantized rows)."""
    vs = np.atleast_2d(np.asarray(vs, dtype=np.float64))
    k1 = nearest_codes(vs, entries)
    residual = vs - entries[k1]
    k2 = nearest_codes(residual, entries)
    q = entries[k1] + entries[k2]
    return k1, k2, q


def fine_quantize(v: np.ndarray, codebook: np.ndarray):
    """Single-vector convenience wrapper; returns (k1, k2, q)."""
    k1, k2, q = fine_quantize_batch(np.atleast_2d(v), codebook)
    return int(k1[0]), int(k2[0]), q[0]


def quantize_grid(z_grid: np.ndarray, params: CodecParams):
    """Quantize a latent grid.

    Returns (codes, q_grid) where codes has shape (2, d, h, w, 2): leading
    axis = which half-vector, trailing axis = (first, remainder) entry index.
    """
    halves = split_halves(z_grid)
    lead_shape = halves.shape[:-1]
    flat = halves.reshape(-1, halves.shape[-1])
    k1, k2, q = fine_quantize_batch(flat, params.codebook.data)
    codes = np.stack([k1, k2], axis=-1).reshape(lead_shape + (2,)).astype(np.uint32)
    q_grid = stack_halves(q.reshape(halves.shape))
    return codes, q_grid


def dequantize_codes(codes: np.ndarray, params: CodecParams) -> np.ndarray:
    """Rebuild a latent grid from (2, d, h, w, 2) index pairs."""
    codes = np.asarray(codes)
    if codes.ndim != 5 or codes.shape[0] != 2 or codes.shape[-1] != 2:
        raise ValueError(f"codes must have shape (2, d, h, w, 2), got {codes.shape}")
    if codes.max() >= params.n_c:
        raise ValueError(
            f"code index {int(codes.max())} out of range for codebook size {params.n_c}"
        )
    e = params.codebook.data
    halves = e[codes[..., 0]] + e[codes[..., 1]]
    return stack_halves(halves)


def reconstruct(x: np.ndarray, params: CodecParams) -> np.ndarray:
    """encode -> quantize -> decode, clamped to [0, 1]."""
    _, q_grid = quantize_grid(encode(x, params), params)
    return decode(q_grid, params)


def _volume_of(item) -> np.ndarray:
    return item.volume if hasattr(item, "volume") else np.asarray(item, dtype=np.float64)


def _train_step(x_np: np.ndarray, params: CodecParams):
    x_t = Tensor(x_np[None])
    latent = _encode_graph(x_t, params)
    d, h, w, n_d = latent.shape
    half = n_d // 2
    halves = T.transpose(T.reshape(latent, (d, h, w, 2, half)), (3, 0, 1, 2, 4))
    v = T.reshape(halves, (2 * d * h * w, half))
    k1, k2, _ = fine_quantize_batch(v.data, params.codebook.data)
    q = T.add(T.embedding(params.codebook, k1), T.embedding(params.codebook, k2))
    q_st = T.add(v, T.stop_gradient(T.sub(q, v)))
    q_grid = T.transpose(
        T.reshape(q_st, (2, d, h, w, half)), (1, 2, 3, 0, 4)
    )
    q_grid = T.reshape(q_grid, (d, h, w, n_d))
    recon = _decode_graph(q_grid, params)
    recon_loss = T.mse(recon, x_t)
    codebook_loss = T.mse(q, T.stop_gradient(v))
    commit_loss = T.mse(v, T.stop_gradient(q))
    total = T.add(recon_loss, T.add(codebook_loss, T.mul(commit_loss, params.beta)))
    return total, recon_loss


def train_codec(dataset, params: CodecParams, seed: int = 0):
    """Optimize reconstruction + codebook + commitment losses with Adam.

    One randomly chosen volume per iteration.  Gradients never touch codebook
    row 0.  Returns (params, trace) where trace[i] = (iteration, total loss,
    reconstruction mse).
    """
    volumes = [_volume_of(v) for v in dataset]
    if not volumes:
        raise ValueError("train_codec requires a non-empty dataset")
    rng = np.random.default_rng(seed)
    opt = Adam(params.parameters(), lr=params.learning_rate)
    trace = np.zeros((params.iterations, 3))
    for it in range(params.iterations):
        x = volumes[rng.integers(len(volumes))]
        opt.zero_grad()
        with Tape() as tape:
            total, recon = _train_step(x, params)
        if not np.isfinite(total.data):
            raise FloatingPointError(f"codec training diverged at iteration {it}")
        tape.backward(total)
        params.codebook.grad[0, :] = 0.0
        opt.step()
        trace[it] = (it, total.item(), recon.item())
    params.validate_codebook()
    return params, trace


def reconstruction_mse(dataset, params: CodecParams) -> float:
    """Mean squared reconstruction error over a held-out set."""
    volumes = [_volume_of(v) for v in dataset]
    errs = [float(np.mean((reconstruct(x, params) - x) ** 2)) for x in volumes]
    return float(np.mean(errs))
