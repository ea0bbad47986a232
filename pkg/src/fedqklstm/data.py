"""HAR data: windowing, normalization, client partitioning, RWHAR loading, synthetic data."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .federated.checkpoint import deserialize_checkpoint, serialize_checkpoint
from .numerics import ParamTree, make_rng

NORM_EPS = 1e-8
DATASET_MAGIC = b"FQKD"
DATASET_VERSION = 1


class DataError(ValueError):
    pass


class MissingColumnError(DataError):
    pass


class UnknownActivityError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class SampleRateError(DataError):
    pass


@dataclass
class WindowedDataset:
    windows: np.ndarray  # (M, T, d)
    labels: np.ndarray  # (M,) int64
    num_classes: int
    subjects: np.ndarray | None = None  # (M,) int64
    sample_rate: float | None = None
    label_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.windows.ndim != 3 or self.windows.shape[0] < 1:
            raise DataError("windows must be a non-empty (M, T, d) array")
        if self.labels.shape != (self.windows.shape[0],):
            raise DataError("one label per window required")
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if self.subjects is not None:
            self.subjects = np.asarray(self.subjects, dtype=np.int64)

    def __len__(self) -> int:
        return self.windows.shape[0]

    def subset(self, indices) -> "WindowedDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return WindowedDataset(
            self.windows[idx],
            self.labels[idx],
            self.num_classes,
            None if self.subjects is None else self.subjects[idx],
            self.sample_rate,
            list(self.label_names),
        )


# -----------------------------------------------------------------------------
# Windowing
# -----------------------------------------------------------------------------


def majority_label(labels) -> int:
    """Most frequent label; ties go to the smallest class index."""
    return int(np.argmax(np.bincount(np.asarray(labels, dtype=np.int64))))


def window_series(series, labels, win: int, stride: int, num_classes: int | None = None,
                  subject: int | None = None, sample_rate: float | None = None) -> WindowedDataset:
    series = np.asarray(series, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if series.ndim != 2 or labels.shape != (series.shape[0],):
        raise DataError("series must be (T_total, d) with one label per sample")
    if win < 1 or stride < 1:
        raise DataError("window and stride must be >= 1")
    total = series.shape[0]
    if total < win:
        raise DataError(f"series of {total} samples is shorter than the window {win}")
    starts = range(0, total - win + 1, stride)
    windows = np.stack([series[s : s + win] for s in starts])
    win_labels = np.array([majority_label(labels[s : s + win]) for s in starts])
    subjects = None if subject is None else np.full(len(win_labels), subject)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return WindowedDataset(windows, win_labels, num_classes, subjects, sample_rate)


def concat_datasets(parts: list[WindowedDataset]) -> WindowedDataset:
    if not parts:
        raise EmptyDatasetError("nothing to concatenate")
    subjects = None
    if all(p.subjects is not None for p in parts):
        subjects = np.concatenate([p.subjects for p in parts])
    return WindowedDataset(
        np.concatenate([p.windows for p in parts]),
        np.concatenate([p.labels for p in parts]),
        max(p.num_classes for p in parts),
        subjects,
        parts[0].sample_rate,
        list(parts[0].label_names),
    )


# -----------------------------------------------------------------------------
# Normalization
# -----------------------------------------------------------------------------


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray  # already floored at NORM_EPS

    @classmethod
    def fit(cls, dataset: WindowedDataset) -> "NormStats":
        flat = dataset.windows.reshape(-1, dataset.windows.shape[-1])
        return cls(flat.mean(axis=0), np.maximum(flat.std(axis=0), NORM_EPS))


def normalize(dataset: WindowedDataset, stats: NormStats) -> WindowedDataset:
    d = dataset.windows.shape[-1]
    if stats.mean.shape != (d,) or stats.std.shape != (d,):
        raise DataError(f"stats have {stats.mean.shape[0]} channels, dataset has {d}")
    out = dataset.subset(np.arange(len(dataset)))
    out.windows = (dataset.windows - stats.mean) / np.maximum(stats.std, NORM_EPS)
    return out


# -----------------------------------------------------------------------------
# Splits and client partitions
# -----------------------------------------------------------------------------


@dataclass
class PartitionPlan:
    shards: list[np.ndarray]
    strategy: str
    seed: int


def partition(dataset: WindowedDataset, num_clients: int, strategy: str = "iid",
              seed: int = 0) -> PartitionPlan:
    m = len(dataset)
    if num_clients < 1:
        raise DataError("need at least one client")
    if num_clients > m:
        raise DataError(f"{num_clients} clients but only {m} windows")
    rng = make_rng(seed, "partition", strategy)
    if strategy == "iid":
        order = rng.permutation(m)
        shards = [np.sort(order[k::num_clients]) for k in range(num_clients)]
    elif strategy == "by-subject":
        if dataset.subjects is None:
            raise DataError("by-subject partition needs subject ids")
        subjects = np.unique(dataset.subjects)
        if num_clients > subjects.size:
            raise DataError(f"{num_clients} clients but only {subjects.size} subjects")
        subjects = subjects[rng.permutation(subjects.size)]
        shards = []
        for k in range(num_clients):
            mine = subjects[k::num_clients]
            shards.append(np.flatnonzero(np.isin(dataset.subjects, mine)))
    else:
        raise DataError(f"unknown partition strategy {strategy!r}")
    return PartitionPlan(shards, strategy, seed)


def train_test_split(dataset: WindowedDataset, test_fraction: float = 0.2, seed: int = 0,
                     by_subject: bool = False) -> tuple[WindowedDataset, WindowedDataset]:
    if not 0.0 < test_fraction < 1.0:
        raise DataError("test_fraction must be in (0, 1)")
    rng = make_rng(seed, "split")
    m = len(dataset)
    if by_subject:
        if dataset.subjects is None:
            raise DataError("by-subject split needs subject ids")
        subjects = np.unique(dataset.subjects)
        n_test = max(1, int(round(test_fraction * subjects.size)))
        if n_test >= subjects.size:
            raise DataError("not enough subjects for a by-subject split")
        test_subjects = rng.permutation(subjects)[:n_test]
        is_test = np.isin(dataset.subjects, test_subjects)
    else:
        n_test = max(1, int(round(test_fraction * m)))
        if n_test >= m:
            raise DataError("not enough windows to split")
        is_test = np.zeros(m, dtype=bool)
        is_test[rng.permutation(m)[:n_test]] = True
    return dataset.subset(np.flatnonzero(~is_test)), dataset.subset(np.flatnonzero(is_test))


# -----------------------------------------------------------------------------
# Synthetic HAR-like data
# -----------------------------------------------------------------------------


def gen_synthetic(num_classes: int, windows_per_class: int, window: int, channels: int,
                  noise_sd: float, seed: int) -> WindowedDataset:
    """Class ``c`` channel ``j`` is ``sin(2 pi (1 + c + j/2) t / T + phase) + noise``."""
    if num_classes < 2:
        raise DataError("synthetic data needs at least two classes")
    rng = make_rng(seed, "synthetic")
    m = num_classes * windows_per_class
    labels = np.repeat(np.arange(num_classes), windows_per_class)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=m)
    t = np.arange(window) / window
    freq = 1.0 + labels[:, None] + 0.5 * np.arange(channels)[None, :]  # (M, d)
    arg = 2.0 * np.pi * freq[:, None, :] * t[None, :, None] + phase[:, None, None]
    windows = np.sin(arg) + noise_sd * rng.standard_normal((m, window, channels))
    subjects = np.arange(m) % 8
    names = [f"class{c}" for c in range(num_classes)]
    return WindowedDataset(windows, labels, num_classes, subjects, None, names)


# -----------------------------------------------------------------------------
# RWHAR CSV ingestion
# -----------------------------------------------------------------------------


def _read_csv(path: Path, time_column: str, axis_columns) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyDatasetError(f"{path}: empty file") from None
        wanted = [time_column, *axis_columns]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise MissingColumnError(f"{path}: missing column(s) {', '.join(missing)}")
        cols = [header.index(c) for c in wanted]
        rows = [[float(row[c]) for c in cols] for row in reader if row]
    if not rows:
        raise EmptyDatasetError(f"{path}: no data rows")
    arr = np.asarray(rows)
    return arr[:, 0], arr[:, 1:]


def _split_on_gaps(times: np.ndarray, max_gap: float) -> list[slice]:
    breaks = np.flatnonzero(np.diff(times) > max_gap) + 1
    edges = [0, *breaks.tolist(), times.size]
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def load_rwhar(root_dir, label_map: dict[str, int], sensor: str = "acc",
               body_position: str = "chest", window: int = 100, stride: int = 50,
               sample_rate: float = 50.0, time_column: str = "timestamp",
               axis_columns=("x", "y", "z"), time_scale: float = 1e-3) -> WindowedDataset:
    """Load ``<root>/<subject>/**/<sensor>_<activity>_<position>.csv`` files.

    Timestamps are multiplied by ``time_scale`` to get seconds. A stream is
    cut wherever consecutive samples are more than three sample periods apart,
    and windows never straddle a cut.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise EmptyDatasetError(f"{root}: not a directory")
    subject_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    suffix = f"_{body_position}.csv"
    prefix = f"{sensor}_"
    period = 1.0 / sample_rate
    parts = []
    for subject_id, subject_dir in enumerate(subject_dirs):
        files = sorted(
            p for p in subject_dir.rglob("*.csv")
            if p.name.startswith(prefix) and p.name.endswith(suffix)
        )
        for path in files:
            activity = path.name[len(prefix) : -len(suffix)]
            if activity not in label_map:
                raise UnknownActivityError(f"{path}: activity {activity!r} not in label map")
            times, values = _read_csv(path, time_column, axis_columns)
            times = times * time_scale
            if times.size > 1:
                median_dt = float(np.median(np.diff(times)))
                if not 0.8 * period <= median_dt <= 1.2 * period:
                    raise SampleRateError(
                        f"{path}: median sample interval {median_dt:.4g}s, expected {period:.4g}s"
                    )
            for seg in _split_on_gaps(times, 3.0 * period):
                n = seg.stop - seg.start
                if n < window:
                    continue
                labels = np.full(n, label_map[activity])
                parts.append(
                    window_series(values[seg], labels, window, stride,
                                  num_classes=max(label_map.values()) + 1,
                                  subject=subject_id, sample_rate=sample_rate)
                )
    if not parts:
        raise EmptyDatasetError(f"{root}: no usable {prefix}*{suffix} recordings found")
    out = concat_datasets(parts)
    names = sorted(label_map, key=label_map.get)
    out.label_names = names
    return out


# -----------------------------------------------------------------------------
# Dataset cache
# -----------------------------------------------------------------------------


def dataset_to_bytes(dataset: WindowedDataset) -> bytes:
    """``FQKD`` magic, version, u32 header length, JSON header, then a checkpoint blob."""
    header = json.dumps({
        "num_classes": dataset.num_classes,
        "sample_rate": dataset.sample_rate,
        "label_names": dataset.label_names,
    }, sort_keys=True).encode("utf-8")
    tensors = ParamTree({"labels": dataset.labels.astype(np.float64), "windows": dataset.windows})
    if dataset.subjects is not None:
        tensors["subjects"] = dataset.subjects.astype(np.float64)
    return (DATASET_MAGIC + struct.pack("<BI", DATASET_VERSION, len(header)) + header
            + serialize_checkpoint(tensors))


def dataset_from_bytes(blob: bytes) -> WindowedDataset:
    if blob[:4] != DATASET_MAGIC:
        raise DataError("not a dataset cache (bad magic)")
    version, hlen = struct.unpack_from("<BI", blob, 4)
    if version != DATASET_VERSION:
        raise DataError(f"unsupported dataset cache version {version}")
    start = 4 + struct.calcsize("<BI")
    header = json.loads(blob[start : start + hlen].decode("utf-8"))
    tensors = deserialize_checkpoint(blob[start + hlen :])
    subjects = tensors["subjects"].astype(np.int64) if "subjects" in tensors else None
    return WindowedDataset(
        tensors["windows"], tensors["labels"].astype(np.int64), header["num_classes"],
        subjects, header["sample_rate"], header["label_names"],
    )


def save_dataset(dataset: WindowedDataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(dataset))


def load_dataset(path) -> WindowedDataset:
    return dataset_from_bytes(Path(path).read_bytes())
