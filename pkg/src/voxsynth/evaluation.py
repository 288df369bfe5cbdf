"""Statistics and image metrics for judging synthetic volumes.

Covers: standardized group differences and their effect classes, volume-age
correlations, correlation comparison via the Fisher transform, t-tests and
one-way ANOVA, kernel two-sample discrepancy, SNR, multi-scale structural
similarity for volumes, the per-region plausibility report, and the
augmentation / age-gap experiment with a closed-form ridge regressor.

Test statistics are computed from their defining formulas; only the
p-value tail probabilities come from scipy's distribution functions.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np
from scipy import ndimage, stats

from .phantom import PhantomSpec

EFFECT_SMALL = "small"
EFFECT_SMALL_TO_MEDIUM = "small-to-medium"
EFFECT_MEDIUM_TO_LARGE = "medium-to-large"


# ---------------------------------------------------------------------------
# region tables


@dataclass
class RegionTable:
    """Per-sample metadata and region volume measurements."""

    ids: list[str]
    ages: np.ndarray  # years
    sexes: np.ndarray  # 0.0 / 1.0
    cohorts: list[str]
    volumes: np.ndarray  # (N, K)

    def __post_init__(self):
        self.ages = np.asarray(self.ages, dtype=np.float64)
        self.sexes = np.asarray(self.sexes, dtype=np.float64)
        self.volumes = np.atleast_2d(np.asarray(self.volumes, dtype=np.float64))
        n = len(self.ids)
        if not (self.ages.shape == (n,) and self.sexes.shape == (n,)
                and self.volumes.shape[0] == n and len(self.cohorts) == n):
            raise ValueError("RegionTable field lengths disagree")
        if not np.all(np.isfinite(self.volumes)):
            raise ValueError("RegionTable contains missing region values")

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def k(self) -> int:
        return self.volumes.shape[1]

    def subset(self, mask) -> "RegionTable":
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask) if mask.dtype == bool else mask
        return RegionTable(
            ids=[self.ids[i] for i in idx],
            ages=self.ages[idx],
            sexes=self.sexes[idx],
            cohorts=[self.cohorts[i] for i in idx],
            volumes=self.volumes[idx],
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "age", "sex", "cohort"] + [f"vol_{j + 1}" for j in range(self.k)])
        for i in range(self.n):
            w.writerow(
                [self.ids[i], repr(float(self.ages[i])), repr(float(self.sexes[i])),
                 self.cohorts[i]] + [repr(float(v)) for v in self.volumes[i]]
            )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RegionTable":
        rows = list(csv.reader(io.StringIO(text)))
        header = rows[0]
        if header[:4] != ["id", "age", "sex", "cohort"]:
            raise ValueError(f"unexpected RegionTable header: {header}")
        ids, ages, sexes, cohorts, vols = [], [], [], [], []
        for row in rows[1:]:
            if not row:
                continue
            ids.append(row[0])
            ages.append(float(row[1]))
            sexes.append(float(row[2]))
            cohorts.append(row[3])
            vols.append([float(v) for v in row[4:]])
        return cls(ids=ids, ages=np.array(ages), sexes=np.array(sexes),
                   cohorts=cohorts, volumes=np.array(vols))


def table_from_cohort(cohort, cohort_label: str, id_prefix: str = "s") -> RegionTable:
    """RegionTable from labeled phantoms using their ground-truth counts."""
    return RegionTable(
        ids=[f"{id_prefix}{i:04d}" for i in range(len(cohort))],
        ages=np.array([lv.metadata.age_years for lv in cohort]),
        sexes=np.array([lv.metadata.sex for lv in cohort]),
        cohorts=[cohort_label] * len(cohort),
        volumes=np.stack([lv.region_volumes for lv in cohort]),
    )


# ---------------------------------------------------------------------------
# effect sizes, correlations, tests


def cohens_d(a, b) -> float:
    """(mean(a) - mean(b)) / pooled standard deviation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("cohens_d needs at least 2 values per sample")
    na, nb = a.size, b.size
    pooled_var = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2)
    if pooled_var <= 0.0:
        raise ValueError("cohens_d undefined: pooled variance is zero")
    return float((a.mean() - b.mean()) / math.sqrt(pooled_var))


def classify_effect(d: float) -> str:
    """|d| < 0.2 small; 0.2 <= |d| < 0.5 small-to-medium; else medium-to-large."""
    if not np.isfinite(d):
        raise ValueError(f"effect size must be finite, got {d}")
    ad = abs(d)
    if ad < 0.2:
        return EFFECT_SMALL
    if ad < 0.5:
        return EFFECT_SMALL_TO_MEDIUM
    return EFFECT_MEDIUM_TO_LARGE


def pearson_r(x, y) -> tuple[float, float]:
    """Product-moment correlation and its two-tailed p (t with n-2 df)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 3:
        raise ValueError("pearson_r needs equal-length inputs of size >= 3")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("pearson_r undefined for constant input")
    xc = x - x.mean()
    yc = y - y.mean()
    r = float((xc * yc).sum() / math.sqrt((xc * xc).sum() * (yc * yc).sum()))
    r = max(-1.0, min(1.0, r))
    n = x.size
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    p = 2.0 * float(stats.t.sf(abs(t), df=n - 2))
    return r, p


def fisher_z_compare(r1: float, n1: int, r2: float, n2: int) -> tuple[float, float]:
    """z-test for the difference of two independent correlations."""
    for r in (r1, r2):
        if not abs(r) < 1.0:
            raise ValueError(f"correlations must satisfy |r| < 1, got {r}")
    for n in (n1, n2):
        if n < 4:
            raise ValueError(f"need n >= 4 per sample, got {n}")
    z = (math.atanh(r1) - math.atanh(r2)) / math.sqrt(1.0 / (n1 - 3) + 1.0 / (n2 - 3))
    p = 2.0 * float(stats.norm.sf(abs(z)))
    return z, p


def t_test_one_sample(x, mu0: float) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        raise ValueError("one-sample t-test needs n >= 2")
    sd = x.std(ddof=1)
    if sd == 0.0:
        raise ValueError("one-sample t-test undefined for zero variance")
    t = (x.mean() - mu0) / (sd / math.sqrt(x.size))
    p = 2.0 * float(stats.t.sf(abs(t), df=x.size - 1))
    return float(t), p


def t_test_two_sample(a, b, equal_var: bool = False) -> tuple[float, float]:
    """Two-sample t; Welch (unequal variance) by default."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("two-sample t-test needs n >= 2 per sample")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    na, nb = a.size, b.size
    if va == 0.0 and vb == 0.0:
        raise ValueError("two-sample t-test undefined: both variances are zero")
    if equal_var:
        pooled = ((na - 1) * va + (nb - 1) * vb) / (na + nb - 2)
        t = (a.mean() - b.mean()) / math.sqrt(pooled * (1 / na + 1 / nb))
        df = na + nb - 2
    else:
        se2 = va / na + vb / nb
        t = (a.mean() - b.mean()) / math.sqrt(se2)
        df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    p = 2.0 * float(stats.t.sf(abs(t), df=df))
    return float(t), p


def anova_oneway(groups) -> tuple[float, float]:
    """Classic between/within mean-square F with its upper-tail p."""
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(groups) < 2 or any(g.size < 2 for g in groups):
        raise ValueError("anova needs >= 2 groups with >= 2 values each")
    all_values = np.concatenate(groups)
    if np.ptp(all_values) == 0.0:
        raise ValueError("anova undefined: all values identical")
    grand = all_values.mean()
    n_total = all_values.size
    k = len(groups)
    ss_between = sum(g.size * (g.mean() - grand) ** 2 for g in groups)
    ss_within = sum(((g - g.mean()) ** 2).sum() for g in groups)
    df_between = k - 1
    df_within = n_total - k
    if ss_within == 0.0:
        raise ValueError("anova undefined: zero within-group variance")
    f = (ss_between / df_between) / (ss_within / df_within)
    p = float(stats.f.sf(f, df_between, df_within))
    return float(f), p


def spearman_trend(x, y) -> tuple[float, float]:
    """Spearman rho plus an exact one-sided p for a decreasing trend.

    Small-n tail probabilities come from full enumeration of rank
    permutations (n <= 8), so a perfect monotone decrease over 4 points is
    significant at 1/24.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    if n < 3 or n > 8:
        raise ValueError("spearman_trend supports 3 <= n <= 8")
    rx = stats.rankdata(x)
    ry = stats.rankdata(y)

    def rho_of(a, b):
        ac = a - a.mean()
        bc = b - b.mean()
        return float((ac * bc).sum() / math.sqrt((ac * ac).sum() * (bc * bc).sum()))

    rho = rho_of(rx, ry)
    count = 0
    total = 0
    for perm in permutations(range(n)):
        total += 1
        if rho_of(rx, ry[list(perm)]) <= rho + 1e-12:
            count += 1
    return rho, count / total


# ---------------------------------------------------------------------------
# distribution and image metrics


def mmd(set_a, set_b) -> float:
    """Unbiased squared kernel discrepancy, RBF with the median heuristic.

    Bandwidth is the median pairwise Euclidean distance over the pooled set;
    negative estimates (e.g. identical sets) are clamped to 0.
    """
    A = np.atleast_2d(np.asarray(set_a, dtype=np.float64))
    B = np.atleast_2d(np.asarray(set_b, dtype=np.float64))
    A = A.reshape(A.shape[0], -1)
    B = B.reshape(B.shape[0], -1)
    if A.shape[0] < 2 or B.shape[0] < 2:
        raise ValueError("mmd needs at least 2 samples per set")

    def sq_dists(x, y):
        sx = (x * x).sum(1)
        sy = (y * y).sum(1)
        return np.maximum(sx[:, None] + sy[None, :] - 2.0 * (x @ y.T), 0.0)

    pooled = np.concatenate([A, B])
    sq = sq_dists(pooled, pooled)
    tri = sq[np.triu_indices(len(pooled), k=1)]
    h = math.sqrt(float(np.median(tri)))
    if h <= 0.0:
        return 0.0

    def kernel(x, y):
        return np.exp(-sq_dists(x, y) / (2.0 * h * h))

    kaa = kernel(A, A)
    kbb = kernel(B, B)
    kab = kernel(A, B)
    na, nb = A.shape[0], B.shape[0]
    term_a = (kaa.sum() - np.trace(kaa)) / (na * (na - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (nb * (nb - 1))
    value = term_a + term_b - 2.0 * kab.mean()
    return float(max(0.0, value))


def snr(volume, foreground_mask) -> float:
    """Foreground mean over background standard deviation (population sd)."""
    volume = np.asarray(volume, dtype=np.float64)
    mask = np.asarray(foreground_mask, dtype=bool)
    if mask.shape != volume.shape:
        raise ValueError("snr: mask shape does not match volume")
    if not mask.any() or mask.all():
        raise ValueError("snr: mask must be non-empty with a non-empty complement")
    bg_sd = volume[~mask].std()
    if bg_sd == 0.0:
        raise ValueError("snr undefined: background deviation is zero")
    return float(volume[mask].mean() / bg_sd)


_MSSSIM_WEIGHTS = (0.25, 0.35, 0.40)
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _ssim_maps(a, b):
    # 7-tap Gaussian window, sigma 1.5 (truncate=2 gives radius 3), applied
    # separably with reflect edges
    blur = lambda v: ndimage.gaussian_filter(v, sigma=1.5, truncate=2.0, mode="reflect")
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + _SSIM_C1) / (mu_a ** 2 + mu_b ** 2 + _SSIM_C1)
    cs = (2 * cov + _SSIM_C2) / (var_a + var_b + _SSIM_C2)
    return lum, cs


def _downsample2(v):
    crop = tuple(slice(0, 2 * (s // 2)) for s in v.shape)
    v = v[crop]
    return (
        v[::2, ::2, ::2] + v[1::2, ::2, ::2] + v[::2, 1::2, ::2] + v[::2, ::2, 1::2]
        + v[1::2, 1::2, ::2] + v[1::2, ::2, 1::2] + v[::2, 1::2, 1::2] + v[1::2, 1::2, 1::2]
    ) / 8.0


def ms_ssim(a, b, weights=_MSSSIM_WEIGHTS) -> float:
    """Multi-scale structural similarity for volumes on a unit dynamic range.

    Contrast-structure terms at the fine scales, the full index at the
    coarsest, combined as a weighted product; components are clamped at 0 so
    the result stays in [0, 1].
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"ms_ssim needs equal 3-D extents, got {a.shape} and {b.shape}")
    n_scales = len(weights)
    if min(a.shape) < 2 ** (n_scales - 1) * 4:
        raise ValueError(
            f"extents {a.shape} too small for {n_scales} dyadic scales (need >= "
            f"{2 ** (n_scales - 1) * 4} per axis)"
        )
    value = 1.0
    for level in range(n_scales):
        lum, cs = _ssim_maps(a, b)
        if level < n_scales - 1:
            component = float(cs.mean())
            a, b = _downsample2(a), _downsample2(b)
        else:
            component = float((lum * cs).mean())
        value *= max(0.0, component) ** weights[level]
    return float(value)


# ---------------------------------------------------------------------------
# plausibility report


@dataclass
class EffectReport:
    """Per-region effect statistics comparing a real and a synthetic table."""

    region_d: np.ndarray  # real-vs-synth standardized mean difference
    region_class: list[str]
    sex_d_real: np.ndarray
    sex_d_synth: np.ndarray
    delta_d: np.ndarray
    age_r_real: np.ndarray
    age_r_synth: np.ndarray
    delta_r: np.ndarray
    sex_effect_correlation: tuple[float, float]  # (r, p) across regions
    age_effect_correlation: tuple[float, float]
    complexity_correlation: tuple[float, float]  # |d| vs region anisotropy
    complexities: np.ndarray
    real_volumes: np.ndarray = field(repr=False)
    synth_volumes: np.ndarray = field(repr=False)

    @property
    def k(self) -> int:
        return self.region_d.size

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            ["region", "d_real_vs_synth", "effect_class", "d_sex_real", "d_sex_synth",
             "delta_d", "r_age_real", "r_age_synth", "delta_r", "complexity"]
        )
        for j in range(self.k):
            w.writerow(
                [j + 1, repr(float(self.region_d[j])), self.region_class[j],
                 repr(float(self.sex_d_real[j])), repr(float(self.sex_d_synth[j])),
                 repr(float(self.delta_d[j])), repr(float(self.age_r_real[j])),
                 repr(float(self.age_r_synth[j])), repr(float(self.delta_r[j])),
                 repr(float(self.complexities[j]))]
            )
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["statistic", "r", "p"])
        for name, (r, p) in [
            ("sex_effect_correlation", self.sex_effect_correlation),
            ("age_effect_correlation", self.age_effect_correlation),
            ("complexity_correlation", self.complexity_correlation),
        ]:
            w.writerow([name, repr(float(r)), repr(float(p))])
        return buf.getvalue()


def _sex_d_per_region(table: RegionTable) -> np.ndarray:
    male = table.sexes == 1.0
    return np.array(
        [cohens_d(table.volumes[male, j], table.volumes[~male, j]) for j in range(table.k)]
    )


def _age_r_per_region(table: RegionTable) -> np.ndarray:
    return np.array(
        [pearson_r(table.ages, table.volumes[:, j])[0] for j in range(table.k)]
    )


def plausibility_report(
    real: RegionTable, synth: RegionTable, spec: PhantomSpec
) -> EffectReport:
    """Region-wise comparison of real and synthetic measurement tables."""
    if real.k != synth.k or real.k != spec.n_regions:
        raise ValueError(
            f"region sets differ: real {real.k}, synth {synth.k}, spec {spec.n_regions}"
        )
    region_d = np.array(
        [cohens_d(real.volumes[:, j], synth.volumes[:, j]) for j in range(real.k)]
    )
    region_class = [classify_effect(d) for d in region_d]
    sex_d_real = _sex_d_per_region(real)
    sex_d_synth = _sex_d_per_region(synth)
    age_r_real = _age_r_per_region(real)
    age_r_synth = _age_r_per_region(synth)
    complexities = spec.complexities()

    def corr_or_perfect(u, v):
        # identical vectors have zero variance in their difference; the
        # cross-dataset correlation is still well-defined unless constant
        if np.allclose(u, v) and np.ptp(u) == 0:
            return 1.0, 0.0
        if u.size < 3 or np.ptp(u) == 0 or np.ptp(v) == 0:
            return float("nan"), float("nan")
        return pearson_r(u, v)

    return EffectReport(
        region_d=region_d,
        region_class=region_class,
        sex_d_real=sex_d_real,
        sex_d_synth=sex_d_synth,
        delta_d=np.abs(sex_d_real - sex_d_synth),
        age_r_real=age_r_real,
        age_r_synth=age_r_synth,
        delta_r=np.abs(age_r_real - age_r_synth),
        sex_effect_correlation=corr_or_perfect(sex_d_real, sex_d_synth),
        age_effect_correlation=corr_or_perfect(age_r_real, age_r_synth),
        complexity_correlation=corr_or_perfect(np.abs(region_d), complexities),
        complexities=complexities,
        real_volumes=real.volumes.copy(),
        synth_volumes=synth.volumes.copy(),
    )


# ---------------------------------------------------------------------------
# ridge regression and the augmentation experiment


@dataclass
class RidgeModel:
    weights: np.ndarray
    intercept: float
    x_mean: np.ndarray
    y_mean: float

    def predict(self, X) -> np.ndarray:
        return (np.asarray(X) - self.x_mean) @ self.weights + self.y_mean


def fit_ridge(X, y, lam: float = 1.0) -> RidgeModel:
    """Centered ridge with sample-count normalization: duplicating every row
    uniformly leaves the solution unchanged."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise ValueError("ridge needs at least 2 samples")
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    yc = y - y_mean
    gram = Xc.T @ Xc / n + lam * np.eye(X.shape[1])
    w = np.linalg.solve(gram, Xc.T @ yc / n)
    return RidgeModel(weights=w, intercept=float(y_mean - x_mean @ w),
                      x_mean=x_mean, y_mean=float(y_mean))


@dataclass
class AugmentationResult:
    pool_sizes: list[int]
    mae: np.ndarray  # per pool size, pooled over held-out folds
    r2: np.ndarray
    gaps: dict[str, list[dict]]  # cohort -> per-size {mean, t, p}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cohort_names = sorted(self.gaps)
        header = ["pool_size", "mae", "r2"]
        for name in cohort_names:
            header += [f"{name}_gap_mean", f"{name}_gap_t", f"{name}_gap_p"]
        w.writerow(header)
        for i, size in enumerate(self.pool_sizes):
            row = [size, repr(float(self.mae[i])), repr(float(self.r2[i]))]
            for name in cohort_names:
                g = self.gaps[name][i]
                row += [repr(float(g["mean"])), repr(float(g["t"])), repr(float(g["p"]))]
            w.writerow(row)
        return buf.getvalue()


def augmentation_experiment(
    real: RegionTable,
    synth_pool: RegionTable,
    pool_sizes,
    cohorts: dict[str, RegionTable] | None = None,
    n_folds: int = 2,
    ridge_lambda: float = 1.0,
    seed: int = 0,
) -> AugmentationResult:
    """Cross-validated age regression with synthetic-pool augmentation.

    For each pool size S, each training fold is augmented with the first S
    rows of the synthetic pool; test MAE and R^2 are pooled over held-out
    folds.  Every extra cohort gets per-subject predictions averaged across
    fold models, and its mean predicted-minus-chronological gap is tested
    against zero.
    """
    pool_sizes = [int(s) for s in pool_sizes]
    if real.n < n_folds:
        raise ValueError(f"{real.n} real samples cannot form {n_folds} folds")
    if pool_sizes and max(pool_sizes) > synth_pool.n:
        raise ValueError(
            f"pool size {max(pool_sizes)} exceeds available synthetic samples {synth_pool.n}"
        )
    cohorts = cohorts or {}
    rng = np.random.default_rng(seed)
    order = rng.permutation(real.n)
    folds = [order[i::n_folds] for i in range(n_folds)]

    mae = np.zeros(len(pool_sizes))
    r2 = np.zeros(len(pool_sizes))
    gaps: dict[str, list[dict]] = {name: [] for name in cohorts}
    for si, size in enumerate(pool_sizes):
        preds = np.zeros(real.n)
        cohort_preds = {name: np.zeros(t.n) for name, t in cohorts.items()}
        for fi in range(n_folds):
            test_idx = folds[fi]
            train_idx = np.concatenate([folds[j] for j in range(n_folds) if j != fi])
            X = real.volumes[train_idx]
            y = real.ages[train_idx]
            if size:
                X = np.concatenate([X, synth_pool.volumes[:size]])
                y = np.concatenate([y, synth_pool.ages[:size]])
            model = fit_ridge(X, y, lam=ridge_lambda)
            preds[test_idx] = model.predict(real.volumes[test_idx])
            for name, t in cohorts.items():
                cohort_preds[name] += model.predict(t.volumes) / n_folds
        err = preds - real.ages
        mae[si] = np.abs(err).mean()
        ss_res = (err ** 2).sum()
        ss_tot = ((real.ages - real.ages.mean()) ** 2).sum()
        r2[si] = 1.0 - ss_res / ss_tot
        for name, t in cohorts.items():
            g = cohort_preds[name] - t.ages
            tstat, p = t_test_one_sample(g, 0.0)
            gaps[name].append({"mean": float(g.mean()), "t": tstat, "p": p})
    return AugmentationResult(pool_sizes=pool_sizes, mae=mae, r2=r2, gaps=gaps)
