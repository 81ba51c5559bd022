import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fclsim.data import (
    AugmentConfig,
    DataConfig,
    augment,
    dump_cohort,
    generate_cohort,
    load_cohort,
    partition_of,
    partition_slices,
    sample_partition_pair,
    volume_slices,
)


@pytest.fixture(scope="module")
def cohort():
    return generate_cohort(DataConfig())


def test_determinism():
    a = generate_cohort(DataConfig(n_clients=3, seed=7))
    b = generate_cohort(DataConfig(n_clients=3, seed=7))
    for va, vb in zip(itertools.chain(*a), itertools.chain(*b)):
        assert va.voxels.tobytes() == vb.voxels.tobytes()
    c = generate_cohort(DataConfig(n_clients=3, seed=8))
    assert a[0][0].voxels.tobytes() != c[0][0].voxels.tobytes()


def test_default_shape(cohort):
    cfg = DataConfig()
    assert cfg.S == 4 and cfg.n_clients == 10
    assert len(cohort) == 10 and all(len(c) == 4 for c in cohort)
    v = cohort[3][2]
    assert v.voxels.shape == (16, 16, 16) and v.client_id == 3 and v.subject_id == 14
    assert v.voxels.min() >= 0.0 and v.voxels.max() <= 1.0


@pytest.mark.parametrize(
    "kwargs",
    [dict(S=1), dict(S=20), dict(D=1), dict(H=1), dict(n_clients=0), dict(volumes_per_client=0), dict(seed=-1)],
)
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        generate_cohort(DataConfig(**kwargs))


def test_within_partition_correlation_exceeds_cross(cohort):
    vols = list(itertools.chain(*cohort))[:10]
    x, part, vol = [], [], []
    for i, v in enumerate(vols):
        for s in volume_slices(v, 4):
            x.append(s.image.ravel())
            part.append(s.partition)
            vol.append(i)
    corr = np.corrcoef(np.array(x))
    part, vol = np.array(part), np.array(vol)
    within = (part[:, None] == part[None]) & (vol[:, None] != vol[None])
    cross = part[:, None] != part[None]
    assert corr[within].mean() > corr[cross].mean()


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 40), st.integers(2, 8))
def test_partitions_contiguous_and_consistent(D, S):
    if S > D:
        return
    covered = []
    for s in range(S):
        idx = partition_slices(D, S, s)
        assert len(idx) >= 1
        assert all(partition_of(z, D, S) == s for z in idx)
        covered.extend(idx)
    assert covered == list(range(D))


def test_slice_labels(cohort):
    for s in volume_slices(cohort[0][0], 4):
        assert s.partition == s.slice_index * 4 // 16


class TestPartitionPair:
    def test_two_volumes_forced(self, cohort):
        vols = cohort[0][:2]
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b = sample_partition_pair(vols, 1, rng)
            assert {a.volume_id, b.volume_id} == {vols[0].subject_id, vols[1].subject_id}
            assert a.partition == b.partition == 1
            assert partition_of(a.slice_index, 16, 4) == 1

    def test_uniform_pairs(self, cohort):
        vols = cohort[1]
        rng = np.random.default_rng(1)
        counts = {}
        for _ in range(1000):
            a, b = sample_partition_pair(vols, 2, rng)
            assert a.volume_id != b.volume_id
            key = frozenset((a.volume_id, b.volume_id))
            counts[key] = counts.get(key, 0) + 1
        assert len(counts) == 6
        for c in counts.values():
            assert abs(c / 1000 - 1 / 6) <= 0.05

    def test_errors(self, cohort):
        rng = np.random.default_rng(2)
        with pytest.raises(ValueError):
            sample_partition_pair(cohort[0][:1], 0, rng)
        with pytest.raises(ValueError):
            sample_partition_pair(cohort[0], 4, rng)


class TestAugment:
    def test_identity_configuration(self):
        img = np.random.default_rng(0).uniform(size=(16, 16))
        cfg = AugmentConfig(min_scale=1.0, max_scale=1.0, flip_p=0.0, noise_sigma=0.0)
        a, b = augment(img, np.random.default_rng(1), cfg)
        np.testing.assert_array_equal(a, img)
        np.testing.assert_array_equal(b, img)

    def test_range_and_difference(self, cohort):
        rng = np.random.default_rng(3)
        differ = 0
        for i in range(200):
            img = cohort[i % 10][i % 4].voxels[i % 16]
            a, b = augment(img, rng)
            assert a.shape == b.shape == img.shape
            assert a.min() >= 0.0 and a.max() <= 1.0 and b.min() >= 0.0 and b.max() <= 1.0
            differ += np.linalg.norm(a - b) > 0
        assert differ / 200 > 0.99

    def test_too_small(self):
        with pytest.raises(ValueError):
            augment(np.zeros((3, 3)), np.random.default_rng(0))
        with pytest.raises(ValueError):
            augment(np.zeros(16), np.random.default_rng(0))

    def test_deterministic_given_rng(self):
        img = np.random.default_rng(0).uniform(size=(8, 8))
        a = augment(img, np.random.default_rng(5))
        b = augment(img, np.random.default_rng(5))
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_dump_round_trip(tmp_path):
    cfg = DataConfig(n_clients=2, volumes_per_client=2, D=8, H=6, W=5, S=2, seed=3)
    cohort = generate_cohort(cfg)
    path = tmp_path / "cohort.bin"
    dump_cohort(path, cohort, cfg)
    cfg2, arr = load_cohort(path)
    assert cfg2 == cfg and arr.shape == (2, 2, 8, 6, 5)
    np.testing.assert_allclose(arr[1, 0], cohort[1][0].voxels, atol=1e-7)
    assert path.stat().st_size == 4 + 32 + 4 * arr.size


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"JUNKJUNK")
    with pytest.raises(ValueError):
        load_cohort(path)
