"""Dataset directories, min-max scaling and the synthetic multi-view generator.

A dataset directory holds ``views.txt`` (one CSV filename per line, in view
order), the headerless comma-separated view files, and optionally
``labels.csv`` with one non-negative integer per line.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DataError

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ViewDataset:
    views: Tuple[np.ndarray, ...]
    labels: Optional[np.ndarray] = None
    names: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.views:
            raise DataError("a dataset needs at least one view")
        n = self.views[0].shape[0]
        for name, v in zip(self.view_names, self.views):
            if v.ndim != 2 or v.shape[0] != n:
                raise DataError(f"view {name!r} has shape {v.shape}, expected {n} rows")
        if self.labels is not None and len(self.labels) != n:
            raise DataError(f"labels have {len(self.labels)} entries, views have {n} rows")

    @property
    def view_names(self) -> Tuple[str, ...]:
        return self.names or tuple(f"view{r + 1}" for r in range(len(self.views)))

    @property
    def n_samples(self) -> int:
        return self.views[0].shape[0]

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def dims(self) -> List[int]:
        return [v.shape[1] for v in self.views]

    def subset_views(self, indices: Sequence[int]) -> "ViewDataset":
        names = self.view_names
        return ViewDataset(tuple(self.views[i] for i in indices), self.labels, tuple(names[i] for i in indices))


@dataclass(frozen=True)
class ViewSpec:
    dim: int
    separation: float
    noise_sigma: float

    @classmethod
    def parse(cls, text: str) -> "ViewSpec":
        """``dim:separation:sigma``, e.g. ``20:4.0:1.0``."""
        try:
            dim, sep, sigma = text.split(":")
            return cls(int(dim), float(sep), float(sigma))
        except ValueError:
            raise DataError(f"view spec {text!r} is not of the form dim:separation:sigma") from None


@dataclass(frozen=True)
class SynthSpec:
    n_samples: int
    n_clusters: int
    views: Tuple[ViewSpec, ...]
    seed: int = 0

    def validate(self) -> None:
        if self.n_clusters < 2:
            raise DataError(f"n_clusters must be >= 2, got {self.n_clusters}")
        if self.n_samples < 2 * self.n_clusters:
            raise DataError(f"n_samples must be >= 2*n_clusters = {2 * self.n_clusters}")
        if not self.views:
            raise DataError("at least one view is required")
        for v in self.views:
            if v.dim < 1 or v.separation < 0 or v.noise_sigma <= 0:
                raise DataError(f"invalid view spec {v}: need dim>=1, separation>=0, sigma>0")


def _read_matrix(path: Path) -> np.ndarray:
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise DataError(f"{path}:{lineno}: ragged row ({len(cells)} cells, expected {width})")
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                bad = next(c for c in cells if not _is_float(c))
                raise DataError(f"{path}:{lineno}: non-numeric cell {bad!r}") from None
    if not rows:
        raise DataError(f"{path}: no rows")
    return np.array(rows, dtype=np.float64)


def _is_float(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def _read_labels(path: Path) -> np.ndarray:
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                value = int(line)
            except ValueError:
                raise DataError(f"{path}:{lineno}: label {line!r} is not an integer") from None
            if value < 0:
                raise DataError(f"{path}:{lineno}: negative label {value}")
            labels.append(value)
    return np.array(labels, dtype=np.int64)


def view_files(path: PathLike) -> List[Path]:
    root = Path(path)
    index = root / "views.txt"
    if not index.is_file():
        raise DataError(f"{index}: missing (expected one view filename per line)")
    names = [ln.strip() for ln in index.read_text().splitlines() if ln.strip()]
    if not names:
        raise DataError(f"{index}: lists no views")
    files = [root / n for n in names]
    for f in files:
        if not f.is_file():
            raise DataError(f"{f}: missing view file listed in {index}")
    return files


def load_dataset(path: PathLike) -> ViewDataset:
    root = Path(path)
    files = view_files(root)
    views = [_read_matrix(f) for f in files]
    counts = [v.shape[0] for v in views]
    for f, c in zip(files[1:], counts[1:]):
        if c != counts[0]:
            raise DataError(f"row-count mismatch: {files[0].name} has {counts[0]} rows, {f.name} has {c}")
    labels = None
    label_file = root / "labels.csv"
    if label_file.is_file():
        labels = _read_labels(label_file)
        if len(labels) != counts[0]:
            raise DataError(
                f"row-count mismatch: {files[0].name} has {counts[0]} rows, labels.csv has {len(labels)}"
            )
    return ViewDataset(tuple(views), labels, _unique_names([f.stem for f in files]))


def _unique_names(names: Sequence[str]) -> Tuple[str, ...]:
    """Suffix repeats (a file listed twice) so every view keeps a distinct name."""
    seen: dict = {}
    out = []
    for name in names:
        seen[name] = seen.get(name, 0) + 1
        out.append(name if seen[name] == 1 else f"{name}_{seen[name]}")
    return tuple(out)


def save_dataset(ds: ViewDataset, path: PathLike) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    names = [f"{name}.csv" for name in ds.view_names]
    (root / "views.txt").write_text("".join(f"{n}\n" for n in names))
    for name, v in zip(names, ds.views):
        with open(root / name, "w") as fh:
            for row in v:
                fh.write(",".join(f"{x:.17g}" for x in row) + "\n")
    if ds.labels is not None:
        (root / "labels.csv").write_text("".join(f"{int(y)}\n" for y in ds.labels))


def fingerprint(path: PathLike) -> dict:
    """sha256 of every file the loader reads, keyed by filename."""
    root = Path(path)
    files = [root / "views.txt"] + view_files(root)
    if (root / "labels.csv").is_file():
        files.append(root / "labels.csv")
    return {f.name: hashlib.sha256(f.read_bytes()).hexdigest() for f in files}


def minmax_scale(ds: ViewDataset) -> ViewDataset:
    """Per-column (x - min) / (max - min); constant columns become 0."""
    scaled = []
    for v in ds.views:
        lo = v.min(axis=0)
        span = v.max(axis=0) - lo
        safe = np.where(span > 0, span, 1.0)
        out = np.where(span > 0, (v - lo) / safe, 0.0)
        scaled.append(np.clip(out, 0.0, 1.0))
    return replace(ds, views=tuple(scaled))


def synth_generate(spec: SynthSpec) -> ViewDataset:
    """Gaussian clusters per view with a shared labelling; larger separation = more discriminative."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, k = spec.n_samples, spec.n_clusters
    labels = rng.permutation(np.arange(n) % k)
    views = []
    for v in spec.views:
        centers = rng.standard_normal((k, v.dim)) * v.separation
        views.append(centers[labels] + rng.normal(0.0, v.noise_sigma, size=(n, v.dim)))
    names = tuple(f"view{r + 1}" for r in range(len(views)))
    return minmax_scale(ViewDataset(tuple(views), labels.astype(np.int64), names))
