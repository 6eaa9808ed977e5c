"""Dataset containers, IDX / CSV readers and the synthetic blob generator."""

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Split",
    "DatasetSplit",
    "IDXError",
    "load_idx",
    "write_idx",
    "load_idx_pair",
    "save_csv",
    "load_csv",
    "SyntheticSpec",
    "gen_synthetic",
    "TABLE1_DATASETS",
]

# name -> (train, valid, test, classes); None where a split is not provided
TABLE1_DATASETS = {
    "MNIST": (55000, 5000, 10000, 10),
    "SVHN": (73257, None, 26032, 10),
    "CIFAR-10": (50000, None, 10000, 10),
    "LSUN": (None, None, 10000, 10),
    "CIFAR-100": (50000, None, 10000, 100),
    "TinyImagenet": (100000, 10000, 10000, 200),
}


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"{self.x.shape[0]} examples but {self.y.shape[0]} labels")

    def __len__(self):
        return self.x.shape[0]


@dataclass
class DatasetSplit:
    train: Split
    num_classes: int
    valid: Split = None
    test: Split = None
    image_shape: tuple = None
    sizes: dict = field(init=False)

    def __post_init__(self):
        self.sizes = {}
        for name in ("train", "valid", "test"):
            part = getattr(self, name)
            if part is None:
                continue
            if len(part) and (part.y.min() < 0 or part.y.max() >= self.num_classes):
                raise ValueError(f"{name} labels outside [0, {self.num_classes})")
            self.sizes[name] = len(part)


# -- IDX ---------------------------------------------------------------------

_IDX_UBYTE = 0x08


class IDXError(ValueError):
    pass


def load_idx(path):
    """Read an unsigned-byte IDX file.

    Image files (3 dims, magic 0x00000803) come back as float64 scaled to
    ``[0, 1]``; label files (1 dim, magic 0x00000801) as int64.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise IDXError(f"{path}: file too short for an IDX header")
    zero, dtype, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype != _IDX_UBYTE or ndim not in (1, 3):
        raise IDXError(f"{path}: bad magic 0x{int.from_bytes(data[:4], 'big'):08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IDXError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) - header != count:
        raise IDXError(f"{path}: expected {count} payload bytes, found {len(data) - header}")
    payload = np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)
    if ndim == 1:
        return payload.astype(np.int64)
    return payload.astype(np.float64) / 255.0


def write_idx(path, array):
    """Write a uint8 array (1-d labels or 3-d images) as IDX."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise IDXError("IDX writer only handles uint8 payloads")
    if array.ndim not in (1, 3):
        raise IDXError("IDX writer expects 1-d labels or 3-d images")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, _IDX_UBYTE, array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(np.ascontiguousarray(array).tobytes())


def load_idx_pair(images_path, labels_path):
    x = load_idx(images_path)
    y = load_idx(labels_path)
    if x.ndim != 3 or y.ndim != 1:
        raise IDXError("expected an image file and a label file")
    if x.shape[0] != y.shape[0]:
        raise IDXError(f"{x.shape[0]} images but {y.shape[0]} labels")
    return Split(x.reshape(x.shape[0], -1), y), x.shape[1:]


# -- CSV -----------------------------------------------------------------------


def save_csv(path, x, y=None):
    """Feature columns ``x0..x{D-1}`` and, if given, a ``label`` column."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(x.shape[1])] + ([] if y is None else ["label"]))
        for i, row in enumerate(x):
            w.writerow([repr(float(v)) for v in row] + ([] if y is None else [int(y[i])]))


def load_csv(path):
    """Returns ``(x, y)``; ``y`` is None when the file has no label column."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV file")
    header, body = rows[0], rows[1:]
    has_label = header[-1] == "label"
    n_feat = len(header) - has_label
    x = np.array([[float(v) for v in r[:n_feat]] for r in body], dtype=np.float64).reshape(-1, n_feat)
    y = np.array([int(r[-1]) for r in body], dtype=np.int64) if has_label else None
    return x, y


# -- synthetic -----------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Isotropic Gaussian blobs in 2-d with an out-of-domain ring around them.

    ``means`` default to ``mean_radius`` around ``center`` at evenly spaced
    angles.  The ring is centred on ``center`` too.
    """

    num_classes: int = 3
    points_per_class: int = 200
    means: tuple = None
    cov_scale: float = 0.03
    ood_ring_radius: float = 0.45
    seed: int = 0
    center: tuple = (0.5, 0.5)
    mean_radius: float = 0.35
    valid_per_class: int = 0
    test_per_class: int = 200
    ood_points: int = 300

    def class_means(self):
        if self.means is not None:
            return np.asarray(self.means, dtype=np.float64)
        angles = np.pi / 2 + 2 * np.pi * np.arange(self.num_classes) / self.num_classes
        unit = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return np.asarray(self.center) + self.mean_radius * unit


def gen_synthetic(spec):
    """Returns ``(DatasetSplit, ood_x)``; deterministic for a given seed."""
    if spec.num_classes < 2:
        raise ValueError("need at least two classes")
    if not spec.cov_scale > 0:
        raise ValueError(f"degenerate covariance scale {spec.cov_scale}")
    means = spec.class_means()
    if means.shape != (spec.num_classes, 2):
        raise ValueError(f"means must have shape ({spec.num_classes}, 2)")
    reach = np.max(np.linalg.norm(means - np.asarray(spec.center), axis=1))
    if not spec.ood_ring_radius > reach:
        raise ValueError(f"ring radius {spec.ood_ring_radius} must exceed max mean distance {reach:.4g}")

    rng = np.random.default_rng(spec.seed)

    def blobs(per_class):
        if per_class == 0:
            return None
        x = np.concatenate([m + spec.cov_scale * rng.standard_normal((per_class, 2)) for m in means])
        y = np.repeat(np.arange(spec.num_classes), per_class)
        return Split(x, y)

    train = blobs(spec.points_per_class)
    valid = blobs(spec.valid_per_class)
    test = blobs(spec.test_per_class)
    theta = rng.uniform(0.0, 2 * np.pi, spec.ood_points)
    ood = np.asarray(spec.center) + spec.ood_ring_radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return DatasetSplit(train, spec.num_classes, valid, test), ood
