import numpy as np
import pytest

from voxsynth.phantom import (
    LabeledVolume,
    Metadata,
    PhantomSpec,
    RegionSpec,
    default_spec,
    generate_cohort,
    generate_phantom,
    measure_regions_via_template,
)


def voxel_count_oracle(grid, center, radii):
    """Brute-force ellipsoid voxel count by explicit triple loop."""
    count = 0
    for z in range(grid[0]):
        for y in range(grid[1]):
            for x in range(grid[2]):
                q = (
                    ((z - center[0]) / radii[0]) ** 2
                    + ((y - center[1]) / radii[1]) ** 2
                    + ((x - center[2]) / radii[2]) ** 2
                )
                if q <= 1.0:
                    count += 1
    return count


def sphere_spec(radius=5.0, age_coeff=(0.0, 0.0, 0.0)):
    return PhantomSpec(
        grid=(24, 24, 24),
        regions=(
            RegionSpec((12, 12, 12), (radius,) * 3, age_coeff, intensity=0.8),
        ),
    )


def test_metadata_vector_layout():
    m = Metadata.from_age_years(13.0, 0.0)
    assert np.array_equal(m.vector(), [1.0, 0.0, 0.0])
    m = Metadata.from_age_years(91.0, 1.0)
    assert np.array_equal(m.vector(), [1.0, 1.0, 1.0])
    assert len(m.vector()) == 3


def test_metadata_rejects_out_of_range():
    with pytest.raises(ValueError):
        Metadata(age_norm=1.2, sex=0.0)
    with pytest.raises(ValueError):
        Metadata(age_norm=0.5, sex=0.3)


def test_labels_independent_of_noise_seed():
    spec = sphere_spec()
    m = Metadata(age_norm=0.5, sex=0.0)
    a = generate_phantom(spec, m, seed=1)
    b = generate_phantom(spec, m, seed=2)
    assert np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.volume, b.volume)


def test_determinism_byte_identical():
    spec = default_spec()
    m = Metadata(age_norm=0.25, sex=1.0)
    a = generate_phantom(spec, m, seed=77)
    b = generate_phantom(spec, m, seed=77)
    assert np.array_equal(a.volume, b.volume)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.region_volumes, b.region_volumes)


def test_shrinking_sphere_matches_voxel_oracle():
    spec = sphere_spec(radius=5.0, age_coeff=(-1.0, -1.0, -1.0))
    young = generate_phantom(spec, Metadata(age_norm=0.0, sex=0.0), seed=0)
    old = generate_phantom(spec, Metadata(age_norm=1.0, sex=0.0), seed=0)
    assert young.region_volumes[0] == voxel_count_oracle((24,) * 3, (12, 12, 12), (5, 5, 5))
    assert old.region_volumes[0] == voxel_count_oracle((24,) * 3, (12, 12, 12), (4, 4, 4))
    assert old.region_volumes[0] < young.region_volumes[0]


def test_region_volumes_count_labels():
    spec = default_spec()
    lv = generate_phantom(spec, Metadata(age_norm=0.3, sex=1.0), seed=4)
    for k in range(1, spec.n_regions + 1):
        assert lv.region_volumes[k - 1] == (lv.labels == k).sum()


def test_noiseless_phantom_is_piecewise_constant():
    spec = PhantomSpec(
        grid=(24, 24, 24),
        regions=sphere_spec().regions,
        noise_sigma=0.0,
    )
    lv = generate_phantom(spec, Metadata(age_norm=0.0, sex=0.0), seed=9)
    assert len(np.unique(lv.volume)) <= spec.n_regions + 1
    assert lv.volume.min() >= 0.0 and lv.volume.max() <= 1.0


def test_region_escaping_grid_raises():
    with pytest.raises(ValueError, match="region 1"):
        PhantomSpec(
            grid=(16, 16, 16),
            regions=(RegionSpec((8, 8, 8), (9.0, 4.0, 4.0), intensity=0.8),),
        )


def test_monotone_shrinkage_across_ages():
    spec = sphere_spec(radius=5.5, age_coeff=(-2.0, -2.0, -2.0))
    volumes = []
    for a in np.linspace(0, 1, 10):
        lv = generate_phantom(spec, Metadata(age_norm=float(a), sex=0.0), seed=1)
        volumes.append(lv.region_volumes[0])
    assert all(b <= a for a, b in zip(volumes, volumes[1:]))


def test_cohort_sex_balance_and_age_support():
    spec = default_spec()
    cohort = generate_cohort(spec, n=300, age_low=13, age_high=91, sex_balance=0.5, seed=5)
    sexes = np.array([lv.metadata.sex for lv in cohort])
    assert (sexes == 1.0).sum() == 150
    assert (sexes == 0.0).sum() == 150
    ages = np.array([lv.metadata.age_years for lv in cohort])
    assert ages.min() >= 13.0 and ages.max() <= 91.0


def test_cohort_deterministic_and_distinct_members():
    spec = sphere_spec()
    a = generate_cohort(spec, n=2, seed=3)
    b = generate_cohort(spec, n=2, seed=3)
    for x, y in zip(a, b):
        assert np.array_equal(x.volume, y.volume)
    assert not np.array_equal(a[0].volume, a[1].volume)


def test_cohort_rejects_bad_ranges():
    spec = sphere_spec()
    with pytest.raises(ValueError):
        generate_cohort(spec, n=1, seed=0)
    with pytest.raises(ValueError):
        generate_cohort(spec, n=4, age_low=50, age_high=40, seed=0)
    with pytest.raises(ValueError):
        generate_cohort(spec, n=4, age_low=5, age_high=40, seed=0)


def test_sex_effect_present_at_cohort_scale():
    spec = default_spec()
    cohort = generate_cohort(spec, n=300, sex_balance=0.5, seed=11)
    vols = np.array([lv.region_volumes for lv in cohort])
    sexes = np.array([lv.metadata.sex for lv in cohort])
    males = vols[sexes == 1.0, 0]
    females = vols[sexes == 0.0, 0]
    pooled = np.sqrt((males.var(ddof=1) + females.var(ddof=1)) / 2)
    d = (males.mean() - females.mean()) / pooled
    assert abs(d) > 0.1  # region 1 has a nonzero sex offset


def test_template_measurement_recovers_labels_when_noiseless():
    spec = PhantomSpec(grid=(24,) * 3, regions=sphere_spec().regions, noise_sigma=0.0)
    m = Metadata(age_norm=0.4, sex=0.0)
    lv = generate_phantom(spec, m, seed=0)
    got = measure_regions_via_template(lv.volume, spec, m, threshold=0.3)
    assert np.array_equal(got, lv.region_volumes)


def test_template_measurement_high_threshold_all_zero():
    spec = sphere_spec()
    m = Metadata(age_norm=0.0, sex=0.0)
    lv = generate_phantom(spec, m, seed=0)
    capped = np.minimum(lv.volume, 0.9)
    assert np.array_equal(
        measure_regions_via_template(capped, spec, m, threshold=0.99), np.zeros(1)
    )


def test_template_measurement_zero_volume():
    spec = sphere_spec()
    m = Metadata(age_norm=0.0, sex=0.0)
    zeros = np.zeros(spec.grid)
    assert np.array_equal(
        measure_regions_via_template(zeros, spec, m, threshold=0.5), np.zeros(1)
    )


def test_template_threshold_validation():
    spec = sphere_spec()
    m = Metadata(age_norm=0.0, sex=0.0)
    with pytest.raises(ValueError):
        measure_regions_via_template(np.zeros(spec.grid), spec, m, threshold=0.0)


def test_default_spec_valid_and_complexity_is_anisotropy():
    spec = default_spec()
    assert spec.n_regions == 6
    for r in spec.regions:
        assert r.complexity == max(r.base_radii) / min(r.base_radii)
    lv = generate_phantom(spec, Metadata(age_norm=1.0, sex=1.0), seed=0)
    assert isinstance(lv, LabeledVolume)
    assert np.all(lv.region_volumes > 0)
