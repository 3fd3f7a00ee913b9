"""Dataset sources: seeded synthetic generators, IDX files and CSV."""
import csv
import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidInputError, ParseError

IDX_TYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int
    mean: np.ndarray = None
    std: np.ndarray = None
    source: dict = field(default_factory=dict)

    def __len__(self):
        return self.x.shape[0]

    @property
    def input_shape(self):
        return tuple(self.x.shape[1:])

    def subset(self, idx):
        return Dataset(self.x[idx], self.y[idx], self.n_classes, self.mean, self.std, self.source)


def channel_stats(x):
    """Mean/std over every axis but the last (the channel axis)."""
    axes = tuple(range(x.ndim - 1))
    mean = x.mean(axis=axes)
    std = x.std(axis=axes)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def standardize(ds, stats=None):
    """Per-channel standardization; ``stats`` reuses another set's (mean, std)."""
    x = ds.x.astype(np.float64)
    mean, std = channel_stats(x) if stats is None else (np.asarray(stats[0]), np.asarray(stats[1]))
    return Dataset((x - mean) / std, ds.y, ds.n_classes, mean, std, ds.source)


# --- synthetic -----------------------------------------------------------


def two_moons(n=1000, noise=0.1, seed=0):
    """Two interleaving half circles, balanced classes."""
    rng = np.random.Generator(np.random.Philox(seed))
    n_a = n // 2
    n_b = n - n_a
    t_a = np.linspace(0.0, np.pi, n_a)
    t_b = np.linspace(0.0, np.pi, n_b)
    a = np.stack([np.cos(t_a), np.sin(t_a)], axis=1)
    b = np.stack([1.0 - np.cos(t_b), 0.5 - np.sin(t_b)], axis=1)
    x = np.concatenate([a, b]) + noise * rng.standard_normal((n, 2))
    y = np.concatenate([np.zeros(n_a, dtype=np.int64), np.ones(n_b, dtype=np.int64)])
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm], 2)


def gaussian_blobs(n=1000, n_features=2, n_classes=3, spread=1.0, scale=4.0, seed=0):
    """Isotropic Gaussian clusters with centres drawn from N(0, scale^2)."""
    rng = np.random.Generator(np.random.Philox(seed))
    centres = scale * rng.standard_normal((n_classes, n_features))
    y = np.arange(n) % n_classes
    rng.shuffle(y)
    x = centres[y] + spread * rng.standard_normal((n, n_features))
    return Dataset(x, y.astype(np.int64), n_classes)


def subspace_blobs(n=1000, n_features=32, n_classes=10, latent=6, spread=1.0, scale=3.0,
                   noise=0.3, seed=0):
    """Gaussian clusters living in a random ``latent``-dimensional subspace,
    embedded in ``n_features`` dimensions with isotropic noise on top."""
    rng = np.random.Generator(np.random.Philox(seed))
    centres = scale * rng.standard_normal((n_classes, latent))
    basis, _ = np.linalg.qr(rng.standard_normal((n_features, latent)))
    y = np.arange(n) % n_classes
    rng.shuffle(y)
    z = centres[y] + spread * rng.standard_normal((n, latent))
    x = z @ basis.T + noise * rng.standard_normal((n, n_features))
    return Dataset(x, y.astype(np.int64), n_classes)


GENERATORS = {"two_moons": two_moons, "blobs": gaussian_blobs, "subspace_blobs": subspace_blobs}


# --- IDX -----------------------------------------------------------------


def _open_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw):
    """Decode an IDX byte string into a numpy array."""
    if len(raw) < 4:
        raise ParseError("truncated IDX header", offset=len(raw))
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in IDX_TYPES or ndim < 1:
        raise ParseError(f"bad IDX magic 0x{struct.unpack('>I', raw[:4])[0]:08x}", offset=0)
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise ParseError("truncated IDX dimension table", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:end])
    dtype = IDX_TYPES[dtype_code]
    want = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - end != want:
        raise ParseError(
            f"IDX payload holds {len(raw) - end} bytes, dimensions {dims} need {want}",
            offset=end,
        )
    return np.frombuffer(raw, dtype=dtype, offset=end).reshape(dims)


def load_idx(images, labels, n_classes=None):
    img_raw, lab_raw = _open_bytes(images), _open_bytes(labels)
    if len(img_raw) >= 4 and struct.unpack(">I", img_raw[:4])[0] != IDX_IMAGES:
        raise ParseError(f"{images}: expected image magic 0x{IDX_IMAGES:08x}", offset=0)
    if len(lab_raw) >= 4 and struct.unpack(">I", lab_raw[:4])[0] != IDX_LABELS:
        raise ParseError(f"{labels}: expected label magic 0x{IDX_LABELS:08x}", offset=0)
    x = parse_idx(img_raw).astype(np.float64) / 255.0
    y = parse_idx(lab_raw).astype(np.int64)
    if x.shape[0] != y.shape[0]:
        raise ParseError(f"{x.shape[0]} images but {y.shape[0]} labels", offset=4)
    x = x.reshape(x.shape[0], -1)
    k = int(y.max()) + 1 if n_classes is None else int(n_classes)
    return Dataset(x, y, k)


# --- CSV -----------------------------------------------------------------


def load_csv(path, n_classes=None):
    """Rows of ``label, f1, f2, ...``; lines starting with '#' are skipped."""
    labels, rows = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or rec[0].lstrip().startswith("#"):
                continue
            if width is None:
                width = len(rec)
                if width < 2:
                    raise ParseError(f"{path}:{lineno}: need a label and at least one feature")
            if len(rec) != width:
                raise ParseError(f"{path}:{lineno}: expected {width} columns, found {len(rec)}")
            try:
                labels.append(int(rec[0]))
                rows.append([float(v) for v in rec[1:]])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ParseError(f"{path}: no data rows")
    y = np.asarray(labels, dtype=np.int64)
    if y.min() < 0:
        raise ParseError(f"{path}: labels must be non-negative")
    k = int(y.max()) + 1 if n_classes is None else int(n_classes)
    return Dataset(np.asarray(rows), y, k)


# --- entry point ---------------------------------------------------------


def load_dataset(source, stats=None):
    """Load and standardize a dataset described by ``source``.

    ``source`` is a mapping with a ``source`` key naming a generator
    (``two_moons``, ``blobs``, ``subspace_blobs``), ``idx`` (keys ``images``,
    ``labels``) or ``csv`` (key ``path``); other keys are passed through.
    ``stats`` reuses a recorded ``(mean, std)`` instead of fitting new ones.
    """
    if isinstance(source, str):
        source = parse_source(source)
    spec = dict(source)
    kind = spec.pop("source", None)
    shape = spec.pop("shape", None)
    try:
        if kind in GENERATORS:
            ds = GENERATORS[kind](**spec)
        elif kind == "idx":
            ds = load_idx(**spec)
        elif kind == "csv":
            ds = load_csv(**spec)
        else:
            raise ConfigError(f"unknown dataset source {kind!r}")
    except TypeError as exc:
        raise ConfigError(f"bad options for dataset {kind!r}: {exc}") from None
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != ds.x[0].size:
            raise InvalidInputError(f"shape {shape} does not match {ds.x[0].size} features")
        ds.x = ds.x.reshape((len(ds),) + shape)
    if len(ds) == 0:
        raise InvalidInputError("dataset is empty")
    ds.source = dict(source)
    return standardize(ds, stats)


def parse_source(text):
    """``"two_moons:n=500,seed=1"`` -> ``{"source": "two_moons", "n": 500, "seed": 1}``."""
    kind, _, rest = text.partition(":")
    out = {"source": kind.strip()}
    for part in filter(None, rest.split(",")):
        key, sep, val = part.partition("=")
        if not sep:
            raise ConfigError(f"dataset option {part!r} is not key=value")
        out[key.strip()] = _coerce(val.strip())
    return out


def _coerce(val):
    for cast in (int, float):
        try:
            return cast(val)
        except ValueError:
            pass
    return val
