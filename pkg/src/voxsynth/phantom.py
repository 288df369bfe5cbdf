"""Procedural 3-D phantom volumes with known region geometry.

Each phantom is a stack of axis-aligned ellipsoid regions whose radii respond
linearly to normalized age and to sex, rendered onto an intensity grid with
Gaussian noise.  Because the geometry is exactly controlled, every downstream
claim about aging slopes, sex differences, and regional volumes can be checked
against ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .seeding import derive_seed

AGE_YEARS_MIN = 13.0
AGE_YEARS_MAX = 91.0


@dataclass(frozen=True)
class Metadata:
    """Design vector [bias, normalized age, sex]."""

    age_norm: float
    sex: float
    bias: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.age_norm <= 1.0):
            raise ValueError(f"age_norm must lie in [0, 1], got {self.age_norm}")
        if self.sex not in (0.0, 1.0):
            raise ValueError(f"sex must be 0.0 or 1.0, got {self.sex}")

    @classmethod
    def from_age_years(cls, age_years: float, sex: float) -> "Metadata":
        a = (age_years - AGE_YEARS_MIN) / (AGE_YEARS_MAX - AGE_YEARS_MIN)
        return cls(age_norm=float(a), sex=float(sex))

    @property
    def age_years(self) -> float:
        return AGE_YEARS_MIN + self.age_norm * (AGE_YEARS_MAX - AGE_YEARS_MIN)

    def vector(self) -> np.ndarray:
        return np.array([self.bias, self.age_norm, self.sex])


@dataclass(frozen=True)
class RegionSpec:
    """One ellipsoid region and its metadata response."""

    center: tuple[float, float, float]
    base_radii: tuple[float, float, float]
    age_coeff: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sex_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    intensity: float = 0.8
    complexity: float = 0.0  # radii anisotropy; filled in by default_spec

    def radii(self, metadata: Metadata) -> np.ndarray:
        return (
            np.array(self.base_radii)
            + np.array(self.age_coeff) * metadata.age_norm
            + np.array(self.sex_offset) * metadata.sex
        )


def _anisotropy(radii) -> float:
    r = np.asarray(radii, dtype=float)
    return float(r.max() / r.min())


@dataclass(frozen=True)
class PhantomSpec:
    """Grid extents, region table, and rendering noise parameters."""

    grid: tuple[int, int, int] = (32, 32, 32)
    regions: tuple[RegionSpec, ...] = ()
    noise_sigma: float = 0.02
    background_intensity: float = 0.05

    def __post_init__(self):
        if not self.regions:
            raise ValueError("PhantomSpec requires at least one region")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not (0.0 <= self.background_intensity < 1.0):
            raise ValueError("background_intensity must lie in [0, 1)")
        for region in self.regions:
            if not (0.0 < region.intensity <= 1.0):
                raise ValueError(f"region intensity {region.intensity} outside (0, 1]")
        # every region must stay inside the grid at all metadata extremes
        for k, region in enumerate(self.regions, start=1):
            for a in (0.0, 1.0):
                for s in (0.0, 1.0):
                    r = region.radii(Metadata(age_norm=a, sex=s))
                    if np.any(r <= 0):
                        raise ValueError(
                            f"region {k} collapses (radii {tuple(r)}) at age_norm={a}, sex={s}"
                        )
                    lo = np.array(region.center) - r
                    hi = np.array(region.center) + r
                    if np.any(lo < 0) or np.any(hi > np.array(self.grid) - 1):
                        raise ValueError(
                            f"region {k} escapes the grid at age_norm={a}, sex={s}"
                        )

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    def complexities(self) -> np.ndarray:
        return np.array([r.complexity for r in self.regions])


def default_spec() -> PhantomSpec:
    """Six-region benchmark: mostly shrinking with age, one growing, mixed
    sex offsets, varying anisotropy."""
    raw = [
        RegionSpec((10, 10, 10), (5.5, 5.0, 4.5), (-1.5, -1.2, -1.0), (0.6, 0.0, 0.0), 0.90),
        RegionSpec((22, 10, 10), (4.5, 4.0, 4.0), (-2.0, -1.5, -1.2), (0.0, 0.0, 0.0), 0.75),
        RegionSpec((10, 22, 10), (4.0, 4.5, 3.5), (-0.8, -0.8, -0.8), (0.0, 0.8, 0.0), 0.60),
        RegionSpec((22, 22, 10), (3.5, 3.5, 3.5), (-0.5, -0.4, 0.0), (0.5, 0.5, 0.0), 0.85),
        RegionSpec((10, 16, 22), (4.0, 3.0, 4.5), (-1.0, -0.5, -1.5), (0.0, 0.0, 0.7), 0.70),
        RegionSpec((22, 16, 22), (3.0, 4.2, 3.2), (1.0, 0.5, 0.8), (0.0, 0.0, 0.0), 0.95),
    ]
    regions = tuple(replace(r, complexity=_anisotropy(r.base_radii)) for r in raw)
    return PhantomSpec(regions=regions)


@dataclass
class LabeledVolume:
    """Rendered phantom plus its ground-truth labels and voxel counts."""

    volume: np.ndarray  # (D, H, W) float64 in [0, 1]
    labels: np.ndarray  # (D, H, W) int, 0 = background, 1..K regions
    metadata: Metadata
    region_volumes: np.ndarray  # (K,) voxel counts per region


def _ellipsoid_mask(grid, center, radii) -> np.ndarray:
    d, h, w = grid
    zz, yy, xx = np.ogrid[0:d, 0:h, 0:w]
    cz, cy, cx = center
    rz, ry, rx = radii
    return (
        ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    ) <= 1.0


def generate_phantom(spec: PhantomSpec, metadata: Metadata, seed: int) -> LabeledVolume:
    """Render one phantom; labels depend only on metadata, noise on the seed."""
    labels = np.zeros(spec.grid, dtype=np.int32)
    for k, region in enumerate(spec.regions, start=1):
        r = region.radii(metadata)
        if np.any(r <= 0):
            raise ValueError(f"region {k} collapses at metadata {metadata}")
        lo = np.array(region.center) - r
        hi = np.array(region.center) + r
        if np.any(lo < 0) or np.any(hi > np.array(spec.grid) - 1):
            raise ValueError(f"region {k} escapes the grid at metadata {metadata}")
        labels[_ellipsoid_mask(spec.grid, region.center, r)] = k

    volume = np.full(spec.grid, spec.background_intensity)
    for k, region in enumerate(spec.regions, start=1):
        volume[labels == k] = region.intensity
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        volume = volume + rng.normal(0.0, spec.noise_sigma, size=spec.grid)
    volume = np.clip(volume, 0.0, 1.0)

    counts = np.array(
        [(labels == k).sum() for k in range(1, spec.n_regions + 1)], dtype=np.float64
    )
    return LabeledVolume(volume=volume, labels=labels, metadata=metadata, region_volumes=counts)


def generate_cohort(
    spec: PhantomSpec,
    n: int,
    age_low: float = AGE_YEARS_MIN,
    age_high: float = AGE_YEARS_MAX,
    sex_balance: float = 0.5,
    seed: int = 0,
) -> list[LabeledVolume]:
    """Draw n phantoms with uniform ages and a fixed sex ratio.

    Exactly round(n * sex_balance) members get sex=1; the assignment order is
    shuffled deterministically.  Member noise uses per-member derived seeds.
    """
    if n < 2:
        raise ValueError(f"cohort size must be >= 2, got {n}")
    if not (AGE_YEARS_MIN <= age_low < age_high <= AGE_YEARS_MAX):
        raise ValueError(
            f"age range [{age_low}, {age_high}] must satisfy "
            f"{AGE_YEARS_MIN} <= low < high <= {AGE_YEARS_MAX}"
        )
    if not (0.0 <= sex_balance <= 1.0):
        raise ValueError(f"sex_balance must lie in [0, 1], got {sex_balance}")
    rng = np.random.default_rng(derive_seed(seed, "cohort"))
    ages = rng.uniform(age_low, age_high, size=n)
    n_one = int(round(n * sex_balance))
    sexes = np.zeros(n)
    sexes[:n_one] = 1.0
    rng.shuffle(sexes)
    cohort = []
    for i in range(n):
        meta = Metadata.from_age_years(ages[i], sexes[i])
        cohort.append(generate_phantom(spec, meta, derive_seed(seed, "member", i)))
    return cohort


def measure_regions_via_template(
    volume: np.ndarray,
    spec: PhantomSpec,
    metadata: Metadata,
    threshold: float,
) -> np.ndarray:
    """Per-region voxel counts above threshold inside the dilated template.

    Works on any volume (no labels needed): the template ellipsoid at the
    given metadata, dilated by 2 voxels, defines where to look for region k.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    counts = np.zeros(spec.n_regions)
    for k, region in enumerate(spec.regions):
        r = region.radii(metadata) + 2.0
        mask = _ellipsoid_mask(volume.shape, region.center, r)
        counts[k] = float((volume[mask] > threshold).sum())
    return counts
