import gzip
import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from rdvae import datasets
from rdvae.datasets import (DEFAULT_VARIANCES, FACTOR_KINDS, FactorDatasetSpec, FactorDistribution, IdxFormatError,
                            generate_toy, load_dataset, load_idx, make_basis, sample_factor, save_dataset)

ALL_FACTORS = [(k, v) for k in FACTOR_KINDS for v in DEFAULT_VARIANCES]


def test_normal_density_at_zero():
    _, dens = sample_factor(FactorDistribution("normal", 8 / 3), 1, 0)
    assert FactorDistribution("normal", 8 / 3).pdf(0.0) == pytest.approx(1 / math.sqrt(2 * math.pi * 8 / 3))
    assert FactorDistribution("normal", 8 / 3).pdf(0.0) == pytest.approx(0.24430, abs=1e-5)


def test_uniform_half_width_and_density():
    d = FactorDistribution("uniform", 1 / 6)
    a = math.sqrt(0.5)
    assert d.pdf(0.0) == pytest.approx(1 / (2 * a))
    assert d.pdf(0.0) == pytest.approx(0.70711, abs=1e-5)
    assert d.pdf(a + 1e-9) == 0.0
    vals, _ = sample_factor(d, 10000, 1)
    assert np.max(np.abs(vals)) <= a


def test_sample_factor_rejects_bad_input():
    with pytest.raises(ValueError):
        sample_factor(FactorDistribution("normal", 1.0), 0, 0)
    with pytest.raises(ValueError):
        FactorDistribution("cauchy", 1.0)
    with pytest.raises(ValueError):
        FactorDistribution("normal", -1.0)


@pytest.mark.parametrize("kind,var", ALL_FACTORS)
def test_factor_moments_and_normalisation(kind, var):
    d = FactorDistribution(kind, var)
    vals, dens = sample_factor(d, 1_000_000, 42)
    assert abs(vals.mean()) <= 0.01 * math.sqrt(var) * 5
    assert vals.var() == pytest.approx(var, rel=0.01)
    assert np.all(dens > 0)
    sd = math.sqrt(var)
    mass, _ = integrate.quad(d.pdf, -8 * sd, 8 * sd, points=[-2 * sd, 0, 2 * sd], limit=200)
    assert mass == pytest.approx(1.0, abs=1e-3)
    mean, _ = integrate.quad(lambda s: s * d.pdf(s), -8 * sd, 8 * sd, points=[-2 * sd, 0, 2 * sd], limit=200)
    assert abs(mean) <= 1e-6


@pytest.mark.parametrize("kind", FACTOR_KINDS)
def test_histogram_matches_density(kind):
    d = FactorDistribution(kind, 2 / 3)
    vals, _ = sample_factor(d, 1_000_000, 7)
    sd = math.sqrt(d.target_variance)
    edges = np.linspace(-4 * sd, 4 * sd, 101)
    counts, _ = np.histogram(vals, edges)
    expected = 1_000_000 * np.diff(d.cdf(edges))
    # sparse bins carry sampling noise far above 5%; compare where counts are large
    use = expected >= 5000
    assert use.sum() >= 20
    assert np.max(np.abs(counts[use] - expected[use]) / expected[use]) <= 0.05


@pytest.mark.parametrize("kind", FACTOR_KINDS)
def test_cdf_is_integral_of_pdf(kind):
    d = FactorDistribution(kind, 1.0)
    for s in (-1.3, -0.2, 0.4, 1.7):
        area, _ = integrate.quad(d.pdf, -10, s, limit=200)
        assert d.cdf(s) == pytest.approx(area, abs=1e-7)


def test_basis_orthonormal():
    assert abs(abs(make_basis(1, 1, 0)[0, 0]) - 1.0) < 1e-15
    B = make_basis(3, 16, 5)
    assert np.max(np.abs(B @ B.T - np.eye(3))) <= 1e-10
    with pytest.raises(ValueError):
        make_basis(4, 3, 0)


@given(st.integers(1, 8), st.integers(0, 8), st.integers(0, 2 ** 31 - 1))
def test_basis_orthonormal_property(k, extra, seed):
    B = make_basis(k, k + extra, seed)
    assert B.shape == (k, k + extra)
    assert np.max(np.abs(B @ B.T - np.eye(k))) <= 1e-10


@pytest.mark.parametrize("name", ["mix", "ramp", "norm"])
def test_generate_toy_structure(name):
    ds = generate_toy(FactorDatasetSpec.preset(name, n_samples=50_000, seed=2))
    assert ds.x.shape == (50_000, 16)
    assert np.array_equal(ds.x, ds.s @ ds.basis)
    assert np.all(ds.density > 0)
    assert np.trace(np.cov(ds.x.T)) == pytest.approx(3.5, rel=0.02)
    proj = np.var(ds.x @ ds.basis.T, axis=0)
    assert proj / proj[0] == pytest.approx([1, 4, 16], rel=0.05)
    eig = np.sort(np.linalg.eigvalsh(np.cov(ds.x.T)))[::-1]
    assert eig[:3] == pytest.approx(sorted(proj, reverse=True), rel=0.05)
    assert np.all(eig[3:] < 1e-10)


def test_generate_toy_deterministic_and_density_product():
    spec = FactorDatasetSpec.preset("mix", n_samples=100, seed=9)
    a, b = generate_toy(spec), generate_toy(spec)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.density, b.density)
    prod = np.prod([f.pdf(a.s[:, j]) for j, f in enumerate(spec.factors)], axis=0)
    assert np.allclose(a.density, prod)
    zero = np.prod([f.pdf(0.0) for f in spec.factors])
    assert zero > 0


def test_dataset_roundtrip(tmp_path):
    ds = generate_toy(FactorDatasetSpec.preset("ramp", n_samples=500, seed=4))
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert np.array_equal(back.x, ds.x) and np.array_equal(back.density, ds.density)
    assert np.array_equal(back.basis, ds.basis)
    assert back.spec.to_dict() == ds.spec.to_dict()


def _idx_bytes(pixels, count=1, rows=2, cols=2, magic=0x00000803):
    return struct.pack(">IIII", magic, count, rows, cols) + bytes(pixels)


def test_idx_fixture(tmp_path):
    p = tmp_path / "img.idx"
    p.write_bytes(_idx_bytes([0, 255, 128, 64]))
    imgs = load_idx(p)
    assert (imgs.count, imgs.rows, imgs.cols) == (1, 2, 2)
    assert np.allclose(imgs.pixels[0], [0, 1, 128 / 255, 64 / 255])


def test_idx_gzip_and_labels(tmp_path):
    img = tmp_path / "img.idx.gz"
    with gzip.open(img, "wb") as f:
        f.write(_idx_bytes([1, 2, 3, 4, 5, 6, 7, 8], count=2))
    lab = tmp_path / "lab.idx"
    lab.write_bytes(struct.pack(">II", 0x00000801, 2) + bytes([3, 9]))
    out = load_idx(img, lab)
    assert out.count == 2 and list(out.labels) == [3, 9]


def test_idx_errors(tmp_path):
    bad = tmp_path / "bad.idx"
    bad.write_bytes(_idx_bytes([0, 1, 2, 3], magic=0x00000801))
    with pytest.raises(IdxFormatError, match="magic") as err:
        load_idx(bad)
    assert err.value.offset == 0
    short = tmp_path / "short.idx"
    short.write_bytes(_idx_bytes([0, 1, 2]))
    with pytest.raises(IdxFormatError, match="payload"):
        load_idx(short)
    huge = tmp_path / "huge.idx"
    huge.write_bytes(struct.pack(">IIII", 0x00000803, 2 ** 31, 2 ** 31, 2 ** 31))
    with pytest.raises(IdxFormatError, match="overflow"):
        load_idx(huge)
    lab = tmp_path / "lab.idx"
    lab.write_bytes(struct.pack(">II", 0x00000801, 3) + bytes([1, 2, 3]))
    ok = tmp_path / "ok.idx"
    ok.write_bytes(_idx_bytes([0, 1, 2, 3]))
    with pytest.raises(IdxFormatError):
        load_idx(ok, lab)


def test_idx_writer_roundtrip(tmp_path):
    imgs, labels = datasets.synthetic_strokes(5, side=12, seed=3)
    datasets.write_idx_images(tmp_path / "i.idx", imgs)
    datasets.write_idx_labels(tmp_path / "l.idx", labels)
    back = load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    assert np.array_equal(np.round(back.pixels * 255).astype(np.uint8), imgs.reshape(5, -1))
    assert np.array_equal(back.labels, labels)
    again, _ = datasets.synthetic_strokes(5, side=12, seed=3)
    assert np.array_equal(again, imgs)
