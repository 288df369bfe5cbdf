"""Masked categorical diffusion over residual codes.

Forward process: entries of a code are progressively replaced by a MASK
sentinel (index n_c) according to a schedule; reverse process: a denoiser
predicts the clean code and masked positions are re-filled step by step,
moving the masked fraction along the schedule until nothing is masked at
t=0.  Codes are generated subcode-by-subcode, each conditioned on the
previously generated one so block boundaries stay coherent.

Two denoisers share one interface: a counting model whose behaviour can be
verified by enumeration, and a small attention network trained by gradient
descent on the masked-position cross-entropy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .disentangle import RCode
from .seeding import derive_seed
from .tensor import Adam, Tape, Tensor

log = logging.getLogger(__name__)

SCHEDULE_KINDS = ("factorial", "linear")


@dataclass(frozen=True)
class MaskSchedule:
    """Masking schedule over ``steps`` forward steps.

    ``factorial``: each step t independently keeps visible entries with
    probability 1/t, so cumulative visibility collapses as 1/t!.
    ``linear``: cumulative visibility decreases as 1 - t/steps, reaching
    exactly zero at t = steps.
    """

    kind: str
    steps: int = 16

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    def visible_fraction(self, t: int) -> float:
        """Cumulative fraction of entries still visible after step t."""
        if not (0 <= t <= self.steps):
            raise ValueError(f"t must lie in [0, {self.steps}], got {t}")
        if t == 0:
            return 1.0
        if self.kind == "factorial":
            return 1.0 / math.factorial(t)
        return 1.0 - t / self.steps

    def keep_prob(self, t: int) -> float:
        """Per-step probability of keeping a visible entry at step t."""
        if not (1 <= t <= self.steps):
            raise ValueError(f"t must lie in [1, {self.steps}], got {t}")
        if self.kind == "factorial":
            return 1.0 / t
        return (self.steps - t) / (self.steps - t + 1)


@dataclass(frozen=True)
class SubcodePartition:
    """Contiguous split of a code grid along the depth axis."""

    code_shape: tuple[int, ...]  # (2, d, h, w, 2)
    boundaries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.code_shape) != 5:
            raise ValueError(f"code shape must be 5-D, got {self.code_shape}")
        depth = self.code_shape[1]
        prev_stop = 0
        for start, stop in self.boundaries:
            if start != prev_stop:
                raise ValueError(
                    f"partition boundaries leave a gap or overlap at {start} "
                    f"(expected {prev_stop})"
                )
            if stop <= start:
                raise ValueError(f"empty partition block [{start}, {stop})")
            prev_stop = stop
        if prev_stop != depth:
            raise ValueError(
                f"partition does not cover the depth axis: ends at {prev_stop} of {depth}"
            )

    @classmethod
    def from_depth(cls, code_shape, n_i: int) -> "SubcodePartition":
        depth = code_shape[1]
        if n_i < 1 or depth % n_i:
            raise ValueError(f"depth {depth} not divisible into {n_i} equal blocks")
        step = depth // n_i
        bounds = tuple((i * step, (i + 1) * step) for i in range(n_i))
        return cls(code_shape=tuple(code_shape), boundaries=bounds)

    @property
    def n_i(self) -> int:
        return len(self.boundaries)

    def block_shape(self, i: int) -> tuple[int, ...]:
        start, stop = self.boundaries[i]
        s = self.code_shape
        return (s[0], stop - start, s[2], s[3], s[4])

    def block_length(self, i: int) -> int:
        return int(np.prod(self.block_shape(i)))


def partition(indices: np.ndarray, part: SubcodePartition) -> list[np.ndarray]:
    """Slice a code grid into its subcode blocks (copies)."""
    indices = np.asarray(indices)
    if indices.shape != part.code_shape:
        raise ValueError(
            f"code shape {indices.shape} does not match partition {part.code_shape}"
        )
    return [indices[:, a:b].copy() for a, b in part.boundaries]


def concatenate_subcodes(blocks, part: SubcodePartition) -> np.ndarray:
    """Inverse of :func:`partition`."""
    blocks = list(blocks)
    if len(blocks) != part.n_i:
        raise ValueError(f"expected {part.n_i} blocks, got {len(blocks)}")
    for i, b in enumerate(blocks):
        if tuple(np.shape(b)) != part.block_shape(i):
            raise ValueError(
                f"block {i} has shape {np.shape(b)}, expected {part.block_shape(i)}"
            )
    return np.concatenate(blocks, axis=1)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def fdp_mask(subcode, t: int, schedule: MaskSchedule, seed, mask_value: int):
    """One forward step: keep each visible entry with keep_prob(t).

    Applying steps 1..t in sequence to a clean code gives the schedule's
    cumulative visibility exactly (entries are masked independently).
    """
    rng = _as_rng(seed)
    p = schedule.keep_prob(t)  # validates t
    flat = np.asarray(subcode).copy()
    visible = flat != mask_value
    drop = visible & (rng.random(flat.shape) >= p)
    flat[drop] = mask_value
    return flat


def mask_to_level(subcode, t: int, schedule: MaskSchedule, seed, mask_value: int):
    """Mask a clean code directly to the cumulative visibility at step t.

    Marginally identical to chaining fdp_mask over steps 1..t, since each
    entry is kept independently at every step.
    """
    rng = _as_rng(seed)
    if not (1 <= t <= schedule.steps):
        raise ValueError(f"t must lie in [1, {schedule.steps}], got {t}")
    v = schedule.visible_fraction(t)
    flat = np.asarray(subcode).copy()
    flat[rng.random(flat.shape) >= v] = mask_value
    return flat


class TabularDenoiser:
    """Per-position empirical category distributions keyed by the condition.

    Smoothing keeps every logit row finite while leaving off-support
    probability mass negligible (so a point-mass training set samples back
    exactly, within float64 resolution).
    """

    def __init__(self, n_c: int, subcode_len: int, alpha: float = 1e-12):
        self.n_c = n_c
        self.subcode_len = subcode_len
        self.alpha = alpha
        self.schedule: MaskSchedule | None = None
        self._counts: dict[tuple, np.ndarray] = {}
        self._cond_marginal = np.zeros((subcode_len, n_c))

    def fit(self, pairs):
        """Counting pass over (target, condition) training pairs."""
        for target, condition in pairs:
            target = np.asarray(target)
            if target.shape != (self.subcode_len,):
                raise ValueError(
                    f"target length {target.shape} != ({self.subcode_len},)"
                )
            key = () if condition is None else tuple(int(v) for v in condition)
            counts = self._counts.setdefault(key, np.zeros((self.subcode_len, self.n_c)))
            counts[np.arange(self.subcode_len), target] += 1.0
            if condition is not None:
                self._cond_marginal[np.arange(self.subcode_len), target] += 1.0

    def predict(self, noisy, condition, t: int) -> np.ndarray:
        """Log-probabilities per position; the noisy input and t are unused."""
        key = () if condition is None else tuple(int(v) for v in condition)
        counts = self._counts.get(key)
        if counts is None:
            counts = self._cond_marginal if key else np.zeros((self.subcode_len, self.n_c))
        probs = (counts + self.alpha) / (
            counts.sum(axis=1, keepdims=True) + self.alpha * self.n_c
        )
        return np.log(probs)

    def mean_nll(self, pairs) -> float:
        total, n = 0.0, 0
        for target, condition in pairs:
            logp = self.predict(None, condition, 1)
            total += float(-logp[np.arange(self.subcode_len), np.asarray(target)].sum())
            n += self.subcode_len
        return total / max(n, 1)


class NeuralDenoiser:
    """Single-head attention block over [condition tokens | target tokens].

    Queries come from target positions only; keys and values span the full
    context, so the condition informs predictions without paying for its own
    output rows.  The MASK sentinel has its own embedding row.
    """

    def __init__(
        self,
        n_c: int,
        subcode_len: int,
        steps: int,
        d_model: int = 32,
        hidden: int = 64,
        learning_rate: float = 3e-3,
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        L, d = subcode_len, d_model
        self.n_c = n_c
        self.subcode_len = L
        self.steps = steps
        self.d_model = d
        self.learning_rate = learning_rate
        self.schedule: MaskSchedule | None = None

        def p(shape, scale):
            return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)

        self.tok_emb = p((n_c + 1, d), 0.02)
        self.pos_emb = p((2 * L, d), 0.02)
        self.t_emb = p((steps, d), 0.02)
        self.wq = p((d, d), 1.0 / math.sqrt(d))
        self.wk = p((d, d), 1.0 / math.sqrt(d))
        self.wv = p((d, d), 1.0 / math.sqrt(d))
        self.wo = p((d, d), 1.0 / math.sqrt(d))
        self.mlp_w1 = p((d, hidden), math.sqrt(2.0 / d))
        self.mlp_b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.mlp_w2 = p((hidden, d), math.sqrt(2.0 / hidden))
        self.mlp_b2 = Tensor(np.zeros(d), requires_grad=True)
        self.head_w = p((d, n_c), math.sqrt(2.0 / d))
        self.head_b = Tensor(np.zeros(n_c), requires_grad=True)
        log.info("neural denoiser: %d parameters", self.parameter_count)

    PARAM_ATTRS = (
        "tok_emb", "pos_emb", "t_emb",
        "wq", "wk", "wv", "wo",
        "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
        "head_w", "head_b",
    )

    def parameters(self) -> list[Tensor]:
        return [getattr(self, name) for name in self.PARAM_ATTRS]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(name, getattr(self, name)) for name in self.PARAM_ATTRS]

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def _embed(self, tokens, pos_lo, pos_hi, t):
        tok = T.embedding(self.tok_emb, np.asarray(tokens, dtype=np.int64))
        pos = T.slice0(self.pos_emb, pos_lo, pos_hi)
        trow = T.reshape(T.slice0(self.t_emb, t - 1, t), (self.d_model,))
        return T.bias_add(T.add(tok, pos), trow)

    def forward(self, noisy, condition, t: int) -> Tensor:
        L = self.subcode_len
        noisy = np.asarray(noisy)
        if noisy.shape != (L,):
            raise ValueError(f"subcode length {noisy.shape} != ({L},)")
        if not (1 <= t <= self.steps):
            raise ValueError(f"t must lie in [1, {self.steps}], got {t}")
        x_tgt = self._embed(noisy, L, 2 * L, t)
        if condition is not None:
            condition = np.asarray(condition)
            if condition.shape != (L,):
                raise ValueError(f"condition length {condition.shape} != ({L},)")
            kv = T.concat([self._embed(condition, 0, L, t), x_tgt], axis=0)
        else:
            kv = x_tgt
        q = T.matmul(x_tgt, self.wq)
        k = T.matmul(kv, self.wk)
        v = T.matmul(kv, self.wv)
        scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(self.d_model))
        ctx = T.matmul(T.matmul(T.softmax(scores), v), self.wo)
        h1 = T.add(x_tgt, ctx)
        mid = T.leaky_relu(T.bias_add(T.matmul(h1, self.mlp_w1), self.mlp_b1))
        h2 = T.add(h1, T.bias_add(T.matmul(mid, self.mlp_w2), self.mlp_b2))
        return T.bias_add(T.matmul(h2, self.head_w), self.head_b)

    def predict(self, noisy, condition, t: int) -> np.ndarray:
        return self.forward(noisy, condition, t).data


def _training_pairs(codes, part: SubcodePartition):
    lengths = {part.block_length(i) for i in range(part.n_i)}
    if len(lengths) != 1:
        raise ValueError("training requires equal-length subcode blocks")
    pairs = []
    for code in codes:
        idx = code.indices if isinstance(code, RCode) else np.asarray(code)
        blocks = [b.reshape(-1).astype(np.int64) for b in partition(idx, part)]
        for n, block in enumerate(blocks):
            condition = blocks[n - 1] if n > 0 else None
            pairs.append((block, condition))
    return pairs


def train_denoiser(codes, part, schedule, model, epochs: int = 1, seed: int = 0):
    """Fit the denoiser on subcode/condition pairs from complete codes.

    Tabular models take a single counting pass.  Neural models minimize the
    cross-entropy of the clean code at masked positions, with the timestep
    drawn uniformly and the target masked to the schedule's level.  Returns
    (model, per-epoch loss trace).
    """
    if not codes:
        raise ValueError("train_denoiser requires at least one code")
    for code in codes:
        if isinstance(code, RCode) and code.has_mask():
            raise ValueError("training codes must not contain MASK entries")
    pairs = _training_pairs(codes, part)
    model.schedule = schedule

    if isinstance(model, TabularDenoiser):
        model.fit(pairs)
        return model, np.array([model.mean_nll(pairs)])

    rng = np.random.default_rng(derive_seed(seed, "train-denoiser"))
    opt = Adam(model.parameters(), lr=model.learning_rate)
    mask_value = model.n_c
    trace = np.zeros(epochs)
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        losses = np.zeros(len(pairs))
        for j, pi in enumerate(order):
            target, condition = pairs[pi]
            noisy = target
            for _ in range(100):
                t = int(rng.integers(1, schedule.steps + 1))
                noisy = mask_to_level(target, t, schedule, rng, mask_value)
                if np.any(noisy == mask_value):
                    break
            weights = (noisy == mask_value).astype(np.float64)
            opt.zero_grad()
            with Tape() as tape:
                logits = model.forward(noisy, condition, t)
                loss = T.cross_entropy(logits, target, weights=weights)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"denoiser training diverged at epoch {epoch}")
            tape.backward(loss)
            opt.step()
            losses[j] = loss.item()
        trace[epoch] = losses.mean()
    return model, trace


def rdp_step(noisy, condition, t: int, model, seed):
    """One reverse step: unmask enough positions to reach the schedule's
    masked fraction at t-1, sampling each from the model's softmax."""
    schedule = model.schedule
    if schedule is None:
        raise ValueError("model has no schedule; train it first")
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    rng = _as_rng(seed)
    mask_value = model.n_c
    out = np.asarray(noisy).copy()
    masked = np.flatnonzero(out == mask_value)
    if masked.size == 0:
        return out
    L = out.size
    target_masked = int(round(L * (1.0 - schedule.visible_fraction(t - 1))))
    n_unmask = max(0, masked.size - target_masked)
    if n_unmask == 0:
        return out
    chosen = rng.choice(masked, size=n_unmask, replace=False)
    logits = model.predict(out, condition, t)[chosen]
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    cum = np.cumsum(probs, axis=1)
    u = rng.random(n_unmask)
    draws = np.minimum((cum < u[:, None]).sum(axis=1), model.n_c - 1)
    out[chosen] = draws
    return out


def sample_rcode(part: SubcodePartition, schedule: MaskSchedule, model, seed) -> RCode:
    """Generate a complete code: each subcode starts fully masked and is
    denoised from t=steps down to 1, conditioned on the previous subcode."""
    if model.schedule is None:
        raise ValueError("model has no schedule; train it first")
    if model.schedule != schedule:
        raise ValueError(
            f"schedule mismatch: model trained with {model.schedule}, requested {schedule}"
        )
    rng = _as_rng(seed if isinstance(seed, np.random.Generator) else derive_seed(seed, "sample"))
    mask_value = model.n_c
    blocks = []
    prev = None
    for n in range(part.n_i):
        sub = np.full(part.block_length(n), mask_value, dtype=np.int64)
        for t in range(schedule.steps, 0, -1):
            sub = rdp_step(sub, prev, t, model, rng)
        blocks.append(sub)
        prev = sub
    arrays = [b.reshape(part.block_shape(i)) for i, b in enumerate(blocks)]
    indices = concatenate_subcodes(arrays, part).astype(np.uint32)
    return RCode(indices=indices, n_c=model.n_c)
