"""Least-squares split of quantized encodings into a metadata component and a
residual, plus conversion of residuals to/from discrete R-codes.

The model is q = P m + r with m = [1, age_norm, sex].  P solves the normal
equations in closed form (the design is only 3 columns wide), the residual r
is what the masked diffusion model learns, and the R-code is the fine-grained
quantization of r against the codec's codebook.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .codec import CodecParams, dequantize_codes, fine_quantize_batch, split_halves
from .phantom import AGE_YEARS_MAX, AGE_YEARS_MIN, Metadata

METADATA_COLUMNS = ("bias", "age_norm", "sex")


@dataclass
class GLMModel:
    """Fitted metadata matrix plus the shape and normalization it was fit on."""

    P: np.ndarray  # (latent size, 3)
    latent_shape: tuple[int, int, int, int]
    age_low: float = AGE_YEARS_MIN
    age_high: float = AGE_YEARS_MAX

    def metadata_component(self, m: Metadata) -> np.ndarray:
        return (self.P @ m.vector()).reshape(self.latent_shape)


@dataclass
class RCode:
    """Integer code grid of a residual: (2, d, h, w, 2) entry indices.

    Leading axis selects the half-vector, trailing axis the (first, remainder)
    quantization stage.  Values lie in [0, n_c); ``n_c`` itself is the MASK
    sentinel for not-yet-generated entries.
    """

    indices: np.ndarray
    n_c: int

    @property
    def mask_value(self) -> int:
        return self.n_c

    def has_mask(self) -> bool:
        return bool(np.any(self.indices == self.n_c))


def design_matrix(metadata: list[Metadata]) -> np.ndarray:
    return np.stack([m.vector() for m in metadata])


def _check_design_rank(M: np.ndarray):
    for j, name in enumerate(METADATA_COLUMNS):
        if j == 0:
            continue
        if np.ptp(M[:, j]) == 0.0:
            raise ValueError(
                f"design matrix is rank-deficient: column '{name}' is constant"
            )
    gram = M.T @ M
    if abs(np.linalg.det(gram)) < 1e-12 * np.abs(gram).max() ** 3:
        raise ValueError("design matrix is rank-deficient: columns are collinear")


def fit_glm(encodings, metadata: list[Metadata]) -> GLMModel:
    """Least-squares fit of P minimizing sum_i ||q_i - P m_i||^2.

    ``encodings`` is a sequence of latent grids (or already-flat vectors);
    the fit is the closed-form normal-equation solution.
    """
    if len(encodings) < 3:
        raise ValueError(f"need at least 3 samples to fit, got {len(encodings)}")
    if len(encodings) != len(metadata):
        raise ValueError("encodings and metadata lengths differ")
    first = np.asarray(encodings[0])
    latent_shape = first.shape if first.ndim == 4 else (1, 1, 1, first.size)
    Q = np.stack([np.asarray(e).reshape(-1) for e in encodings])  # (N, F)
    M = design_matrix(metadata)  # (N, 3)
    _check_design_rank(M)
    gram = M.T @ M  # (3, 3)
    rhs = M.T @ Q  # (3, F)
    P = np.linalg.solve(gram, rhs).T  # (F, 3)
    return GLMModel(P=P, latent_shape=tuple(latent_shape))


def split(q_grid: np.ndarray, m: Metadata, glm: GLMModel) -> np.ndarray:
    """Residual r = q - P m, reshaped to the latent grid."""
    q_grid = np.asarray(q_grid, dtype=np.float64)
    if q_grid.shape != glm.latent_shape:
        raise ValueError(
            f"encoding shape {q_grid.shape} does not match fitted {glm.latent_shape}"
        )
    return q_grid - glm.metadata_component(m)


def residual_to_rcode(r_grid: np.ndarray, params: CodecParams) -> RCode:
    """Fine-quantize each half-vector of the residual into a (k1, k2) pair."""
    halves = split_halves(np.asarray(r_grid, dtype=np.float64))
    lead = halves.shape[:-1]
    k1, k2, _ = fine_quantize_batch(halves.reshape(-1, halves.shape[-1]),
                                    params.codebook.data)
    codes = np.stack([k1, k2], axis=-1).reshape(lead + (2,)).astype(np.uint32)
    return RCode(indices=codes, n_c=params.n_c)


def recombine(code: RCode, m: Metadata, glm: GLMModel, params: CodecParams) -> np.ndarray:
    """Dequantized residual plus the metadata component P m."""
    if code.has_mask():
        raise ValueError("cannot recombine a code that still contains MASK entries")
    r_hat = dequantize_codes(code.indices, params)
    return glm.metadata_component(m) + r_hat


def residuals_orthogonal_to_design(residuals, metadata: list[Metadata]) -> float:
    """Max |M^T r| entry — the normal-equation certificate, ~0 after fitting."""
    R = np.stack([np.asarray(r).reshape(-1) for r in residuals])
    M = design_matrix(metadata)
    return float(np.abs(M.T @ R).max())


def design_matrix_csv(metadata: list[Metadata]) -> str:
    """Design matrix as CSV text for audit (one row per sample)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METADATA_COLUMNS)
    for m in metadata:
        writer.writerow([repr(float(v)) for v in m.vector()])
    return buf.getvalue()
