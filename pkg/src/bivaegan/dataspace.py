"""Datasets of pre-extracted features: containers, normalization, on-disk format, synthetic fixtures."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class DatasetError(ValueError):
    """Base class for dataset validation failures."""


class MissingFileError(DatasetError):
    pass


class ShapeMismatchError(DatasetError):
    pass


class NonFiniteError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


class InductiveContractError(RuntimeError):
    """Raised when unseen visual data is touched during inductive training."""


class DegenerateVectorError(ValueError):
    pass


def l2_normalize(v, r: float = 1.0) -> np.ndarray:
    """Scale ``v`` (or each row of a 2-D array) to L2 norm ``r``."""
    if r <= 0:
        raise ValueError(f"radius must be positive, got {r}")
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise DegenerateVectorError("cannot L2-normalize a zero-norm feature vector")
    return r * v / norm


def minmax_normalize(v) -> np.ndarray:
    """Rescale ``v`` (or each row) affinely onto [0, 1]."""
    v = np.asarray(v, dtype=np.float64)
    lo = v.min(axis=-1, keepdims=True)
    hi = v.max(axis=-1, keepdims=True)
    span = hi - lo
    if np.any(span == 0):
        raise DegenerateVectorError("cannot Min-Max normalize a constant vector (zero range)")
    return (v - lo) / span


@dataclass(frozen=True)
class ClassPrior:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("class prior must be a non-empty vector")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError(f"class prior has invalid entries: {p}")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"class prior sums to {p.sum()}, not 1")
        object.__setattr__(self, "probs", p)

    def __len__(self):
        return len(self.probs)

    def tolist(self) -> list[float]:
        return [float(x) for x in self.probs]


def empirical_class_prior(labels: Sequence[int], num_classes: int) -> ClassPrior:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot estimate a class prior from an empty label sequence")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise LabelRangeError(f"labels must lie in [0, {num_classes})")
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    return ClassPrior(counts / counts.sum())


def _check_matrix(name: str, m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise ShapeMismatchError(f"{name}: expected a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name}: contains NaN or Inf")
    return m


def _check_labels(name: str, y: np.ndarray, rows: int, num_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.ndim != 1 or y.shape[0] != rows:
        raise ShapeMismatchError(f"{name}: expected {rows} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise LabelRangeError(f"{name}: labels must lie in [0, {num_classes})")
    return y


@dataclass(frozen=True)
class SplitDataset:
    """Seen labeled features, unlabeled unseen features, and both attribute tables.

    ``unseen_labels_eval`` and the ``seen_test_*`` arrays are evaluation-only.
    """

    seen_features: np.ndarray
    seen_labels: np.ndarray
    unseen_features_: np.ndarray | None
    seen_attributes: np.ndarray
    unseen_attributes: np.ndarray
    unseen_labels_eval: np.ndarray | None = None
    seen_test_features: np.ndarray | None = None
    seen_test_labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)
    inductive: bool = False

    def __post_init__(self):
        sa = _check_matrix("seen_attributes", self.seen_attributes)
        ua = _check_matrix("unseen_attributes", self.unseen_attributes)
        if sa.shape[1] != ua.shape[1]:
            raise ShapeMismatchError("seen and unseen attribute dims differ")
        sv = _check_matrix("seen_features", self.seen_features)
        _check_labels("seen_labels", self.seen_labels, sv.shape[0], sa.shape[0])
        if self.unseen_features_ is not None:
            uv = _check_matrix("unseen_features", self.unseen_features_)
            if uv.shape[1] != sv.shape[1]:
                raise ShapeMismatchError("seen and unseen feature dims differ")
            if self.unseen_labels_eval is not None:
                _check_labels("unseen_labels_eval", self.unseen_labels_eval, uv.shape[0], ua.shape[0])
        if self.seen_test_features is not None:
            st = _check_matrix("seen_test_features", self.seen_test_features)
            if st.shape[1] != sv.shape[1]:
                raise ShapeMismatchError("seen test feature dim differs")
            if self.seen_test_labels is None:
                raise ShapeMismatchError("seen_test_features given without seen_test_labels")
            _check_labels("seen_test_labels", self.seen_test_labels, st.shape[0], sa.shape[0])

    @property
    def unseen_features(self) -> np.ndarray:
        if self.inductive:
            raise InductiveContractError("unseen visual features are not available during inductive training")
        if self.unseen_features_ is None:
            raise DatasetError("dataset carries no unseen features")
        return self.unseen_features_

    @property
    def num_seen(self) -> int:
        return self.seen_attributes.shape[0]

    @property
    def num_unseen(self) -> int:
        return self.unseen_attributes.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.seen_features.shape[1]

    @property
    def attribute_dim(self) -> int:
        return self.seen_attributes.shape[1]

    def inductive_view(self) -> "SplitDataset":
        """A handle whose unseen visual features (and eval labels) are unreachable."""
        return SplitDataset(
            self.seen_features, self.seen_labels, None, self.seen_attributes,
            self.unseen_attributes, meta=self.meta, inductive=True,
        )

    def replace(self, **changes) -> "SplitDataset":
        fields = dict(
            seen_features=self.seen_features, seen_labels=self.seen_labels,
            unseen_features_=self.unseen_features_, seen_attributes=self.seen_attributes,
            unseen_attributes=self.unseen_attributes, unseen_labels_eval=self.unseen_labels_eval,
            seen_test_features=self.seen_test_features, seen_test_labels=self.seen_test_labels,
            meta=dict(self.meta), inductive=self.inductive,
        )
        fields.update(changes)
        return SplitDataset(**fields)


NORMALIZATIONS = ("l2", "minmax", "none")


def normalize_dataset(ds: SplitDataset, mode: str = "l2", r: float = 1.0) -> SplitDataset:
    """Normalize visual features per ``mode``; attributes are always L2-normalized to ``r``."""
    if mode not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {mode!r}; expected one of {NORMALIZATIONS}")
    fn = {"l2": lambda m: l2_normalize(m, r), "minmax": minmax_normalize, "none": np.asarray}[mode]

    def feat(m):
        return None if m is None else fn(np.asarray(m, dtype=np.float64))

    meta = dict(ds.meta, feature_normalization=mode, attribute_normalization="l2", radius=r)
    return ds.replace(
        seen_features=feat(ds.seen_features),
        unseen_features_=feat(ds.unseen_features_),
        seen_test_features=feat(ds.seen_test_features),
        seen_attributes=l2_normalize(ds.seen_attributes, r),
        unseen_attributes=l2_normalize(ds.unseen_attributes, r),
        meta=meta,
    )


# ---------------------------------------------------------------- on-disk format

_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}
_ENTRIES = {
    "seen_features": ("f32", True),
    "seen_labels": ("i32", True),
    "unseen_features": ("f32", True),
    "seen_attributes": ("f32", True),
    "unseen_attributes": ("f32", True),
    "unseen_labels_eval": ("i32", False),
    "seen_test_features": ("f32", False),
    "seen_test_labels": ("i32", False),
}


def write_blob(path: Path, array: np.ndarray, dtype: str) -> dict:
    arr = np.ascontiguousarray(array, dtype=_DTYPES[dtype])
    path.write_bytes(arr.tobytes(order="C"))
    return {"file": path.name, "dtype": dtype, "shape": list(arr.shape)}


def read_blob(root: Path, name: str, entry: dict) -> np.ndarray:
    try:
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(int(s) for s in entry["shape"])
        rel = entry["file"]
    except KeyError as exc:
        raise DatasetError(f"{name}: manifest entry missing key {exc}") from None
    path = root / rel
    if not path.is_file():
        raise MissingFileError(f"{name}: blob file not found: {path}")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise ShapeMismatchError(
            f"{name}: manifest shape {list(shape)} needs {expected} bytes, {path.name} holds {len(raw)}"
        )
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
    if dtype.kind == "f" and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name}: {path.name} contains NaN or Inf")
    return arr


def save_dataset(ds: SplitDataset, path) -> Path:
    """Write ``ds`` as ``manifest.json`` plus raw little-endian blobs (f32 reals, i32 labels)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    arrays = {
        "seen_features": ds.seen_features,
        "seen_labels": ds.seen_labels,
        "unseen_features": ds.unseen_features_,
        "seen_attributes": ds.seen_attributes,
        "unseen_attributes": ds.unseen_attributes,
        "unseen_labels_eval": ds.unseen_labels_eval,
        "seen_test_features": ds.seen_test_features,
        "seen_test_labels": ds.seen_test_labels,
    }
    manifest = {}
    for name, (dtype, _) in _ENTRIES.items():
        if arrays[name] is not None:
            manifest[name] = write_blob(root / f"{name}.bin", arrays[name], dtype)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_dataset(path, normalization: str | None = "l2", r: float = 1.0) -> SplitDataset:
    """Read a dataset directory; normalizes per ``normalization`` (``None`` keeps raw values)."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise MissingFileError(f"manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    unknown = set(manifest) - set(_ENTRIES)
    if unknown:
        raise DatasetError(f"manifest has unknown entries: {sorted(unknown)}")
    arrays = {}
    for name, (dtype, required) in _ENTRIES.items():
        if name not in manifest:
            if required:
                raise MissingFileError(f"manifest lacks required entry {name!r}")
            arrays[name] = None
            continue
        if manifest[name].get("dtype") != dtype:
            raise DatasetError(f"{name}: expected dtype {dtype}, manifest says {manifest[name].get('dtype')}")
        arr = read_blob(root, name, manifest[name])
        arrays[name] = arr.astype(np.int64) if dtype == "i32" else arr
    ds = SplitDataset(
        seen_features=arrays["seen_features"],
        seen_labels=arrays["seen_labels"],
        unseen_features_=arrays["unseen_features"],
        seen_attributes=arrays["seen_attributes"],
        unseen_attributes=arrays["unseen_attributes"],
        unseen_labels_eval=arrays["unseen_labels_eval"],
        seen_test_features=arrays["seen_test_features"],
        seen_test_labels=arrays["seen_test_labels"],
        meta={"source": str(root)},
    )
    if normalization is None:
        return ds
    return normalize_dataset(ds, normalization, r)


# ---------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SyntheticSpec:
    num_seen: int = 8
    num_unseen: int = 4
    feature_dim: int = 32
    attribute_dim: int = 16
    seen_per_class: int | Sequence[int] = 100
    unseen_per_class: int | Sequence[int] = (160, 80, 40, 20)
    separation: float = 5.0
    noise: float = 0.5
    attribute_noise: float = 0.1
    offset: float = 0.0
    class_subspace_dim: int | None = 6
    seen_test_fraction: float = 0.2
    radius: float = 1.0

    def counts(self, which: str) -> list[int]:
        n = self.num_seen if which == "seen" else self.num_unseen
        c = self.seen_per_class if which == "seen" else self.unseen_per_class
        counts = [int(c)] * n if np.isscalar(c) else [int(x) for x in c]
        if len(counts) != n:
            raise ValueError(f"{which}_per_class has {len(counts)} entries for {n} classes")
        return counts

    def validate(self):
        for name in ("num_seen", "num_unseen", "feature_dim", "attribute_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for which in ("seen", "unseen"):
            if any(c <= 0 for c in self.counts(which)):
                raise ValueError(f"{which} per-class counts must be positive")
        if self.class_subspace_dim is not None and self.class_subspace_dim <= 0:
            raise ValueError("class_subspace_dim must be positive")
        if self.separation <= 0 or self.noise < 0 or self.attribute_noise < 0:
            raise ValueError("separation must be positive and noise scales non-negative")
        if not 0 <= self.seen_test_fraction < 1:
            raise ValueError("seen_test_fraction must lie in [0, 1)")


def make_synthetic_tzsl(spec: SyntheticSpec, seed: int) -> SplitDataset:
    """Gaussian class clusters around means on a sphere of radius ``spec.separation``.

    Means span a ``class_subspace_dim``-dimensional subspace so that seen classes
    determine the attribute-to-feature relation on unseen ones.

    Attributes are ``l2_normalize(P @ mean + eps, radius)`` for one fixed random
    projection ``P``. Features are returned raw (pass through ``normalize_dataset``);
    a held-out seen test split (``seen_test_fraction`` of each class count, drawn in
    addition to the training rows) backs generalized evaluation.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    n_cls = spec.num_seen + spec.num_unseen
    m = spec.feature_dim if spec.class_subspace_dim is None else min(spec.class_subspace_dim, spec.feature_dim)
    basis = np.linalg.qr(rng.standard_normal((spec.feature_dim, m)))[0]
    means = l2_normalize(rng.standard_normal((n_cls, m)) @ basis.T, spec.separation)
    proj = rng.standard_normal((spec.attribute_dim, spec.feature_dim)) / np.sqrt(spec.feature_dim)
    attrs = means @ proj.T / spec.separation
    attrs = attrs + spec.attribute_noise * rng.standard_normal(attrs.shape) / np.sqrt(spec.attribute_dim)
    attrs = l2_normalize(attrs, spec.radius)

    def sample(class_ids, counts):
        xs, ys = [], []
        for local, (cls, n) in enumerate(zip(class_ids, counts)):
            xs.append(means[cls] + spec.offset + spec.noise * rng.standard_normal((n, spec.feature_dim)))
            ys.append(np.full(n, local, dtype=np.int64))
        return np.concatenate(xs), np.concatenate(ys)

    seen_counts = spec.counts("seen")
    test_counts = [int(round(spec.seen_test_fraction * n)) for n in seen_counts]
    sv, sy = sample(range(spec.num_seen), seen_counts)
    uv, uy = sample(range(spec.num_seen, n_cls), spec.counts("unseen"))
    if sum(test_counts):
        tv, ty = sample(range(spec.num_seen), test_counts)
    else:
        tv = ty = None
    perm = rng.permutation(len(uy))
    return SplitDataset(
        seen_features=sv,
        seen_labels=sy,
        unseen_features_=uv[perm],
        seen_attributes=attrs[: spec.num_seen],
        unseen_attributes=attrs[spec.num_seen:],
        unseen_labels_eval=uy[perm],
        seen_test_features=tv,
        seen_test_labels=ty,
        meta={"synthetic_seed": seed},
    )
