"""Toy datasets with known density, and IDX image ingestion.

Factors ``s`` are drawn from 1-D distributions with zero mean and a target
variance, then embedded into ``m`` dimensions through orthonormal rows:
``x = s @ basis``. The reported density is ``p(s_1) p(s_2) ... p(s_k)``.
"""

from __future__ import annotations

import gzip
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

FACTOR_KINDS = ("normal", "uniform", "triangular_ramp", "gaussian_mixture2")
DEFAULT_VARIANCES = (1.0 / 6.0, 2.0 / 3.0, 8.0 / 3.0)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class FactorDistribution:
    """Zero-mean 1-D factor distribution.

    ``separation`` is only used by ``gaussian_mixture2``: the component
    centres sit at ``+-separation * sqrt(target_variance)`` and the component
    spread takes the remaining variance.
    """

    kind: str
    target_variance: float
    separation: float = 0.85

    def __post_init__(self):
        if self.kind not in FACTOR_KINDS:
            raise ValueError(f"unknown factor kind {self.kind!r}")
        if not self.target_variance > 0:
            raise ValueError("target_variance must be positive")
        if self.kind == "gaussian_mixture2" and not 0.0 <= self.separation < 1.0:
            raise ValueError("separation must lie in [0, 1)")

    # support / shape helpers
    def _uniform_half_width(self):
        return math.sqrt(3.0 * self.target_variance)

    def _ramp(self):
        # p(s) = 2 (s - lo) / L^2 on [lo, lo + L]; var = L^2 / 18, mean = lo + 2L/3
        L = math.sqrt(18.0 * self.target_variance)
        lo = -2.0 * L / 3.0
        return lo, L

    def _mixture(self):
        sd = math.sqrt(self.target_variance)
        centre = self.separation * sd
        spread = sd * math.sqrt(1.0 - self.separation ** 2)
        return centre, spread

    def pdf(self, s):
        s = np.asarray(s, dtype=np.float64)
        v = self.target_variance
        if self.kind == "normal":
            return np.exp(-0.5 * s * s / v) / math.sqrt(2.0 * math.pi * v)
        if self.kind == "uniform":
            a = self._uniform_half_width()
            return np.where(np.abs(s) <= a, 1.0 / (2.0 * a), 0.0)
        if self.kind == "triangular_ramp":
            lo, L = self._ramp()
            return np.where((s >= lo) & (s <= lo + L), 2.0 * (s - lo) / (L * L), 0.0)
        c, t = self._mixture()
        norm = 1.0 / (2.0 * math.sqrt(2.0 * math.pi) * t)
        return norm * (np.exp(-0.5 * ((s - c) / t) ** 2) + np.exp(-0.5 * ((s + c) / t) ** 2))

    def cdf(self, s):
        s = np.asarray(s, dtype=np.float64)
        if self.kind == "normal":
            return special.ndtr(s / math.sqrt(self.target_variance))
        if self.kind == "uniform":
            a = self._uniform_half_width()
            return np.clip((s + a) / (2.0 * a), 0.0, 1.0)
        if self.kind == "triangular_ramp":
            lo, L = self._ramp()
            u = np.clip((s - lo) / L, 0.0, 1.0)
            return u * u
        c, t = self._mixture()
        return 0.5 * (special.ndtr((s - c) / t) + special.ndtr((s + c) / t))

    def sample(self, n: int, rng: np.random.Generator):
        if self.kind == "normal":
            return rng.normal(0.0, math.sqrt(self.target_variance), size=n)
        if self.kind == "uniform":
            a = self._uniform_half_width()
            return rng.uniform(-a, a, size=n)
        if self.kind == "triangular_ramp":
            lo, L = self._ramp()
            # 1 - U lies in (0, 1], keeping samples off the zero-density endpoint
            return lo + L * np.sqrt(1.0 - rng.uniform(0.0, 1.0, size=n))
        c, t = self._mixture()
        signs = np.where(rng.uniform(size=n) < 0.5, -1.0, 1.0)
        return signs * c + rng.normal(0.0, t, size=n)

    def to_dict(self) -> dict:
        return asdict(self)


def sample_factor(dist: FactorDistribution, n: int, seed):
    """Draw ``n`` values and return them with their exact densities."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    values = dist.sample(n, rng)
    return values, dist.pdf(values)


def make_basis(k: int, m: int, seed) -> np.ndarray:
    """``k`` orthonormal rows in R^m from QR of a seeded Gaussian matrix."""
    if k > m:
        raise ValueError(f"cannot fit {k} orthonormal vectors in R^{m}")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((m, k)))
    # fix column signs so the factorisation is unique
    q = q * np.sign(np.diag(r))[None, :]
    return np.ascontiguousarray(q.T)


PRESETS = {
    "mix": ("uniform", "gaussian_mixture2", "triangular_ramp"),
    "ramp": ("triangular_ramp", "triangular_ramp", "triangular_ramp"),
    "norm": ("normal", "normal", "normal"),
}


@dataclass
class FactorDatasetSpec:
    factors: list[FactorDistribution] = field(default_factory=list)
    ambient_dim: int = 16
    n_samples: int = 50_000
    seed: int = 0
    name: str = "custom"

    def __post_init__(self):
        if not self.factors:
            self.factors = [FactorDistribution(k, v) for k, v in zip(PRESETS["mix"], DEFAULT_VARIANCES)]
            self.name = "mix" if self.name == "custom" else self.name
        self.factors = [f if isinstance(f, FactorDistribution) else FactorDistribution(**f)
                        for f in self.factors]
        if len(self.factors) > self.ambient_dim:
            raise ValueError("more factors than ambient dimensions")

    @classmethod
    def preset(cls, name: str, n_samples: int = 50_000, seed: int = 0, ambient_dim: int = 16):
        if name not in PRESETS:
            raise ValueError(f"unknown dataset preset {name!r}; choose from {sorted(PRESETS)}")
        factors = [FactorDistribution(k, v) for k, v in zip(PRESETS[name], DEFAULT_VARIANCES)]
        return cls(factors, ambient_dim, n_samples, seed, name)

    def to_dict(self) -> dict:
        return {"name": self.name, "ambient_dim": self.ambient_dim, "n_samples": self.n_samples,
                "seed": self.seed, "factors": [f.to_dict() for f in self.factors]}

    @classmethod
    def from_dict(cls, d: dict) -> "FactorDatasetSpec":
        return cls([FactorDistribution(**f) for f in d["factors"]], int(d["ambient_dim"]),
                   int(d["n_samples"]), int(d["seed"]), d.get("name", "custom"))


@dataclass
class ToyDataset:
    x: np.ndarray
    s: np.ndarray
    density: np.ndarray
    basis: np.ndarray
    spec: FactorDatasetSpec | None = None


def generate_toy(spec: FactorDatasetSpec) -> ToyDataset:
    rng = np.random.default_rng(spec.seed)
    k = len(spec.factors)
    basis = make_basis(k, spec.ambient_dim, rng)
    s = np.empty((spec.n_samples, k))
    density = np.ones(spec.n_samples)
    for j, dist in enumerate(spec.factors):
        s[:, j], dens = sample_factor(dist, spec.n_samples, rng)
        density *= dens
    x = s @ basis
    return ToyDataset(x, s, density, basis, spec)


def save_dataset(ds: ToyDataset, out_dir) -> Path:
    """Write ``dataset.json`` (header) and ``dataset.bin`` (little-endian f64)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n, m = ds.x.shape
    k = ds.s.shape[1]
    header = {
        "format": "rdvae-toy-v1",
        "spec": ds.spec.to_dict() if ds.spec else None,
        "seed": ds.spec.seed if ds.spec else None,
        "n_samples": n, "ambient_dim": m, "n_factors": k,
        "basis": ds.basis.tolist(),
        "layout": ["x", "s", "density"],
    }
    (out / "dataset.json").write_text(json.dumps(header, indent=2, sort_keys=True))
    with open(out / "dataset.bin", "wb") as f:
        for arr in (ds.x, ds.s, ds.density):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return out


def load_dataset(path) -> ToyDataset:
    path = Path(path)
    if path.is_file():
        path = path.parent
    header = json.loads((path / "dataset.json").read_text())
    n, m, k = header["n_samples"], header["ambient_dim"], header["n_factors"]
    raw = np.fromfile(path / "dataset.bin", dtype="<f8")
    if raw.size != n * m + n * k + n:
        raise ValueError(f"dataset.bin holds {raw.size} values, header implies {n * (m + k + 1)}")
    x = raw[:n * m].reshape(n, m)
    s = raw[n * m:n * (m + k)].reshape(n, k)
    density = raw[n * (m + k):]
    spec = FactorDatasetSpec.from_dict(header["spec"]) if header.get("spec") else None
    return ToyDataset(x.astype(np.float64), s.astype(np.float64), density.astype(np.float64),
                      np.asarray(header["basis"], dtype=np.float64), spec)


# --- IDX -----------------------------------------------------------------------

class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class IdxImages:
    count: int
    rows: int
    cols: int
    pixels: np.ndarray  # (count, rows*cols) in [0, 1]
    labels: np.ndarray | None = None


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(buf: bytes, magic: int, ndim: int):
    if len(buf) < 4:
        raise IdxFormatError("file too short for magic number", 0)
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise IdxFormatError(f"bad magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    if len(buf) < 4 + 4 * ndim:
        raise IdxFormatError("truncated header", len(buf))
    dims = struct.unpack(">" + "I" * ndim, buf[4:4 + 4 * ndim])
    total = 1
    for d in dims:
        total *= d
        if total > 2 ** 34:
            raise IdxFormatError("dimension product overflows", 4)
    start = 4 + 4 * ndim
    if len(buf) - start != total:
        raise IdxFormatError(f"payload has {len(buf) - start} bytes, header declares {total}", start)
    return dims, np.frombuffer(buf, dtype=np.uint8, offset=start)


def load_idx(images_path, labels_path=None) -> IdxImages:
    (count, rows, cols), raw = _parse_idx(_read_bytes(images_path), IDX_IMAGE_MAGIC, 3)
    pixels = raw.reshape(count, rows * cols).astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        (n_labels,), lab = _parse_idx(_read_bytes(labels_path), IDX_LABEL_MAGIC, 1)
        if n_labels != count:
            raise IdxFormatError(f"{n_labels} labels for {count} images", 4)
        labels = lab.copy()
    return IdxImages(count, rows, cols, pixels, labels)


def write_idx_images(path, images: np.ndarray) -> None:
    """Write uint8 images ``(count, rows, cols)`` as an IDX3 file."""
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, count, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.size))
        f.write(labels.tobytes())


def synthetic_strokes(n: int, side: int = 28, seed=0, max_strokes: int = 3):
    """Seeded stand-in for handwritten digits: a few thick blurred line segments.

    Returns ``(images uint8 (n, side, side), labels uint8 (n,))`` where the
    label is the stroke count minus one.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    images = np.zeros((n, side, side))
    labels = rng.integers(1, max_strokes + 1, size=n)
    for i in range(n):
        for _ in range(labels[i]):
            p0, p1 = rng.uniform(0.2 * side, 0.8 * side, size=(2, 2))
            d = p1 - p0
            t = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / max(d @ d, 1e-9), 0.0, 1.0)
            dist2 = (xx - p0[0] - t * d[0]) ** 2 + (yy - p0[1] - t * d[1]) ** 2
            images[i] = np.maximum(images[i], np.exp(-dist2 / (2.0 * (side / 28.0) ** 2)))
    return np.round(255.0 * images).astype(np.uint8), (labels - 1).astype(np.uint8)
