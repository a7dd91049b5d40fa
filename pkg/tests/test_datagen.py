"""Oriented-bars dataset: PRNG, rendering symmetries, labels, split, export."""

import csv
import math

import numpy as np
import pytest

from arcconv import datagen
from arcconv.datagen import DatasetConfig, SplitMix64
from arcconv.tensor import ConfigurationError

MASK = (1 << 64) - 1


def scalar_splitmix64(seed, count, gamma=datagen.GOLDEN_GAMMA):
    """Textbook one-value-at-a-time splitmix64 on Python integers."""
    state, out = seed & MASK, []
    for _ in range(count):
        state = (state + gamma) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        out.append(z ^ (z >> 31))
    return out


def test_mixer_reproduces_published_reference_stream():
    # first outputs of the reference generator seeded with 0 (canonical increment)
    canonical = 0x9E3779B97F4A7C15
    assert scalar_splitmix64(0, 3, canonical) == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]
    states = np.array([(canonical * i) & MASK for i in (1, 2, 3)], dtype=np.uint64)
    assert [int(v) for v in datagen._mix64(states)] == scalar_splitmix64(0, 3, canonical)


@pytest.mark.parametrize("seed", [0, 1, 123456789, MASK])
def test_vectorized_generator_matches_scalar_reference(seed):
    g = SplitMix64(seed)
    first = [int(v) for v in g.next_u64(5)]
    second = [int(v) for v in g.next_u64(3)]
    assert first + second == scalar_splitmix64(seed, 8)


def test_seed_zero_golden_values():
    assert [int(v) for v in SplitMix64(0).next_u64(2)] == [0xF8B076DE3D50B360, 0x53E255E5090B6D57]


def test_uniform_and_normal_draws():
    u = SplitMix64(7).uniform(4)
    ref = [(v >> 11) * 2.0 ** -53 for v in scalar_splitmix64(7, 4)]
    assert list(u) == ref
    z = SplitMix64(3).normal(200_000)
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01
    a, b = scalar_splitmix64(3, 2)
    u1, u2 = (a >> 11) * 2.0 ** -53, (b >> 11) * 2.0 ** -53
    assert z[0] == math.sqrt(-2 * math.log(1 - u1)) * math.cos(2 * math.pi * u2)


def test_horizontal_bar_is_mirror_symmetric():
    cfg = DatasetConfig(noise=0.0, jitter=0.0)
    img = datagen.generate(cfg, 1, orientation=0.0)[0].image[0]
    assert np.max(np.abs(img - img[:, ::-1])) <= 1e-12
    assert np.max(np.abs(img - img[::-1, :])) <= 1e-12
    assert img[16].sum() > img[:, 16].sum()  # horizontal, not vertical


def test_quarter_turn_rendering_equivariance():
    cfg = DatasetConfig(noise=0.0, jitter=0.0)
    a = datagen.generate(cfg, 1, orientation=0.0)[0].image[0]
    b = datagen.generate(cfg, 1, orientation=90.0)[0].image[0]
    assert np.max(np.abs(b - np.rot90(a))) <= 1e-12
    c = datagen.generate(cfg, 1, orientation=30.0)[0].image[0]
    d = datagen.generate(cfg, 1, orientation=120.0)[0].image[0]
    assert np.max(np.abs(d - np.rot90(c))) <= 1e-12


def test_orientation_is_counter_clockwise():
    cfg = DatasetConfig(noise=0.0, jitter=0.0)
    img = datagen.generate(cfg, 1, orientation=45.0)[0].image[0]
    # a counter-clockwise 45 degree bar runs from bottom-left to top-right
    assert img[11, 21] > 0.5 and img[21, 11] > 0.5
    assert img[11, 11] == 0 and img[21, 21] == 0


def test_labels_ranges_and_orientation_distribution():
    samples = datagen.generate(DatasetConfig(seed=3), 400)
    for s in samples:
        assert 0 <= s.orientation < 180
        assert s.label == math.floor(s.orientation / (180 / 8))
        assert s.image.min() >= 0 and s.image.max() <= 1 and s.image.shape == (1, 32, 32)
    counts = np.bincount([s.label for s in samples], minlength=8)
    assert counts.min() > 25  # roughly uniform: expected 50 per bin


def test_same_seed_bitwise_identical_and_seed_sensitive():
    a = datagen.generate(DatasetConfig(seed=5), 30)
    b = datagen.generate(DatasetConfig(seed=5), 30)
    c = datagen.generate(DatasetConfig(seed=6), 30)
    assert all(np.array_equal(x.image, y.image) and x.orientation == y.orientation for x, y in zip(a, b))
    assert datagen.dataset_checksum(a) == datagen.dataset_checksum(b) != datagen.dataset_checksum(c)


def test_samples_are_independent_of_count():
    a = datagen.generate(DatasetConfig(seed=9), 5)
    b = datagen.generate(DatasetConfig(seed=9), 12)
    assert [s.checksum() for s in a] == [s.checksum() for s in b[:5]]


def test_checksum_is_platform_stable_golden():
    samples = datagen.generate(DatasetConfig(seed=0), 10)
    assert samples[0].orientation == scalar_uniform_orientation(0, 0)
    assert datagen.dataset_checksum(samples) == GOLDEN_CHECKSUM


def scalar_uniform_orientation(seed, index):
    master = scalar_splitmix64((seed + index * datagen.GOLDEN_GAMMA) & MASK, 1)[0]
    return (scalar_splitmix64(master, 1)[0] >> 11) * 2.0 ** -53 * 180.0


# recorded once; any change means datasets are no longer reproducible
GOLDEN_CHECKSUM = "324a90023a2fc174b2efba230238a91737739da0ce08f136267fa16c613f7997"


@pytest.mark.parametrize("kwargs", [dict(bar_length=40.0), dict(jitter=20.0), dict(bins=1),
                                    dict(noise=-0.1), dict(supersample=0)])
def test_invalid_configs_rejected(kwargs):
    with pytest.raises(ConfigurationError):
        datagen.generate(DatasetConfig(**kwargs), 3)


def test_count_must_be_positive():
    with pytest.raises(ConfigurationError):
        datagen.generate(DatasetConfig(), 0)


def test_split_sizes_and_disjointness():
    data = list(range(1000))
    train, test = datagen.split(data, 0.8, seed=1)
    assert (len(train), len(test)) == (800, 200)
    assert sorted(train + test) == data and not set(train) & set(test)
    assert datagen.split(data, 0.8, seed=1) == (train, test)
    assert datagen.split(data, 0.8, seed=2) != (train, test)


def test_split_bin_coverage():
    samples = datagen.generate(DatasetConfig(seed=0), 1600)
    train, test = datagen.split(samples, 0.8, seed=0)
    assert {s.label for s in train} == set(range(8)) == {s.label for s in test}


@pytest.mark.parametrize("fraction,count", [(0.0, 10), (1.0, 10), (0.01, 10), (0.5, 1)])
def test_split_rejects_degenerate(fraction, count):
    with pytest.raises(ConfigurationError):
        datagen.split(list(range(count)), fraction)


def test_pgm_round_trip(tmp_path):
    img = datagen.generate(DatasetConfig(seed=1), 1)[0].image
    path = tmp_path / "a.pgm"
    datagen.write_pgm(str(path), img)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n32 32\n255\n") and len(raw) == len(b"P5\n32 32\n255\n") + 32 * 32
    back = datagen.read_pgm(str(path))
    assert np.max(np.abs(back - img[0])) <= 0.5 / 255 + 1e-12


def test_manifest_export(tmp_path):
    samples = datagen.generate(DatasetConfig(seed=2), 6)
    manifest = datagen.export(str(tmp_path), samples, pgm=True)
    with open(manifest) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["index", "orientation_deg", "label", "checksum"]
    for i, row in enumerate(rows[1:]):
        assert int(row[0]) == i
        assert int(row[2]) == math.floor(float(row[1]) / 22.5) == samples[i].label
        assert row[3] == samples[i].checksum()
    assert len(list(tmp_path.glob("*.pgm"))) == 6
