"""CSV loading, sliding-window datasets, noise injection, few-shot subsets.

Series are split on raw timesteps first and windowed inside each segment
afterwards, so no training window ever touches validation or test
timesteps. Window datasets keep their source segment so protocols that
alter the raw data (noise injection, few-shot prefixes) can re-window
consistently; noising overlapping windows independently would hand the
model several inconsistent copies of the same timestep.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (ConfigurationError, DataLoadError, InsufficientDataError,
                     UsageError)

# frequency label -> seasonal period (steps per dominant season)
FREQUENCY_PERIODS = {
    "h": 24, "1h": 24, "hourly": 24,
    "15min": 96, "15 min": 96,
    "10min": 144, "10 min": 144,
}


def seasonal_period(frequency_label: str) -> int:
    return FREQUENCY_PERIODS.get(frequency_label.strip().lower(), 1)


@dataclass
class RawSeries:
    """A multichannel series: values are [timesteps, channels]."""

    name: str
    values: np.ndarray
    frequency_label: str = ""

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]


@dataclass
class SplitSpec:
    """Train/val/test ratios over raw timesteps."""

    ratios: tuple = (0.7, 0.1, 0.2)
    scheme: str = "default"

    def __post_init__(self):
        r = self.ratios
        if len(r) != 3 or any(x <= 0 for x in r):
            raise ConfigurationError(f"ratios must be three positives, got {r}")
        if abs(sum(r) - 1.0) > 1e-9:
            raise ConfigurationError(f"ratios must sum to 1, got {sum(r)}")

    @classmethod
    def ett_wind(cls) -> "SplitSpec":
        return cls(ratios=(0.6, 0.2, 0.2), scheme="ett_wind")

    @classmethod
    def default(cls) -> "SplitSpec":
        return cls()


class WindowDataset:
    """Contiguous (input, target) window pairs from one raw segment.

    ``inputs`` is [n, L, M], ``targets`` is [n, T, M]; target windows
    immediately follow their inputs in the source segment.
    ``channel_stats`` caches per-window per-channel (mean, std) of the
    input windows.
    """

    def __init__(self, split: str, segment: np.ndarray, input_length: int,
                 horizon: int, stride: int, name: str = "",
                 frequency_label: str = ""):
        self.split = split
        self.segment = np.ascontiguousarray(segment, dtype=np.float64)
        self.input_length = input_length
        self.horizon = horizon
        self.stride = stride
        self.name = name
        self.frequency_label = frequency_label
        self.inputs, self.targets = _window_segment(
            self.segment, input_length, horizon, stride)
        mean = self.inputs.mean(axis=1)
        std = self.inputs.std(axis=1)
        self.channel_stats = (mean, std)

    @property
    def n_windows(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_channels(self) -> int:
        return self.segment.shape[1]

    def copy(self) -> "WindowDataset":
        return WindowDataset(self.split, self.segment.copy(),
                             self.input_length, self.horizon, self.stride,
                             self.name, self.frequency_label)


def _window_segment(segment, L, T, stride):
    n_steps = segment.shape[0]
    count = (n_steps - L - T) // stride + 1
    if count < 1:
        raise InsufficientDataError(
            f"segment of {n_steps} timesteps cannot fit one window of "
            f"input {L} + horizon {T}")
    idx = np.arange(count) * stride
    inputs = np.stack([segment[i:i + L] for i in idx])
    targets = np.stack([segment[i + L:i + L + T] for i in idx])
    return inputs, targets


def load_csv(path, has_header: bool = True, date_column=None,
             frequency_label: str = "", name: str = "") -> RawSeries:
    """Parse a UTF-8 comma-separated file into a numeric series.

    The optional date column is dropped; remaining column order is
    preserved. Unparseable cells are rejected with their (row, column)
    position, 1-based as in the file; nothing is imputed.
    """
    p = Path(path)
    if not p.exists():
        raise DataLoadError(f"no such file: {p}")
    rows = []
    width = None
    with open(p, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, cells in enumerate(reader, start=1):
            if has_header and lineno == 1:
                continue
            if not cells or all(c.strip() == "" for c in cells):
                continue
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise DataLoadError(
                    f"{p}: row {lineno} has {len(cells)} cells, expected {width}")
            parsed = []
            for col, cell in enumerate(cells, start=1):
                if date_column is not None and col - 1 == date_column:
                    continue
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise DataLoadError(
                        f"{p}: non-numeric cell at row {lineno}, column {col}: "
                        f"{cell!r}") from None
            rows.append(parsed)
    if len(rows) < 2:
        raise DataLoadError(f"{p}: need at least 2 data rows, got {len(rows)}")
    values = np.asarray(rows, dtype=np.float64)
    return RawSeries(name=name or p.stem, values=values,
                     frequency_label=frequency_label)


def make_windows(series: RawSeries, spec: SplitSpec, input_length: int,
                 horizon: int, stride: int = 1):
    """Split on raw timesteps, then window each segment.

    Returns (train, val, test) :class:`WindowDataset` triples. Each split
    must fit at least one window; the error names the minimum number of
    raw timesteps that would have sufficed.
    """
    if min(input_length, horizon, stride) < 1:
        raise ConfigurationError("input length, horizon, stride must be >= 1")
    n = series.n_steps
    r_train, r_val, _ = spec.ratios
    n_train = int(math.floor(r_train * n))
    n_val = int(math.floor(r_val * n))
    n_test = n - n_train - n_val
    need = input_length + horizon
    for label, seg_len, ratio in (("train", n_train, spec.ratios[0]),
                                  ("val", n_val, spec.ratios[1]),
                                  ("test", n_test, spec.ratios[2])):
        if seg_len < need:
            n_min = math.ceil(need / ratio)
            while int(math.floor(ratio * n_min)) < need:
                n_min += 1
            raise InsufficientDataError(
                f"{label} segment has {seg_len} timesteps but one window "
                f"needs {need}; the series would need at least {n_min} "
                f"timesteps under ratios {spec.ratios}")
    segments = (series.values[:n_train],
                series.values[n_train:n_train + n_val],
                series.values[n_train + n_val:])
    return tuple(
        WindowDataset(split, seg, input_length, horizon, stride,
                      name=series.name, frequency_label=series.frequency_label)
        for split, seg in zip(("train", "val", "test"), segments))


def inject_noise(dataset: WindowDataset, eta: float, seed: int) -> WindowDataset:
    """Additive Gaussian noise on the raw training segment.

    Each value becomes v + e with e ~ Normal(0, (eta * sigma_channel)^2),
    sigma_channel being the training segment's per-channel standard
    deviation; the noise is relative to the channel's own scale.
    Deterministic under the seed. eta == 0 returns a bit-identical copy.
    """
    if not 0.0 <= eta <= 1.0:
        raise ConfigurationError(f"eta must lie in [0, 1], got {eta}")
    if dataset.split != "train":
        raise UsageError("noise injection applies to the training split only")
    if eta == 0.0:
        return dataset.copy()
    rng = np.random.default_rng(seed)
    sigma = dataset.segment.std(axis=0)           # zero for constant channels
    noise = rng.normal(0.0, 1.0, size=dataset.segment.shape) * (eta * sigma)
    return WindowDataset(dataset.split, dataset.segment + noise,
                         dataset.input_length, dataset.horizon, dataset.stride,
                         dataset.name, dataset.frequency_label)


def few_shot_subset(dataset: WindowDataset, fraction: float) -> WindowDataset:
    """Keep the first ceil(fraction * timesteps) of the training segment.

    The prefix is re-windowed; if no full window fits the protocol is
    not applicable and an insufficient-data error names the shortfall.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"fraction must lie in (0, 1], got {fraction}")
    if dataset.split != "train":
        raise UsageError("few-shot subsetting applies to the training split only")
    keep = math.ceil(fraction * dataset.segment.shape[0])
    need = dataset.input_length + dataset.horizon
    if keep < need:
        raise InsufficientDataError(
            f"{fraction:.0%} of the training segment is {keep} timesteps; "
            f"one window needs {need}")
    return WindowDataset(dataset.split, dataset.segment[:keep],
                         dataset.input_length, dataset.horizon, dataset.stride,
                         dataset.name, dataset.frequency_label)


def synthetic_sine(n_steps: int, channels: int = 1, period: float = 24.0,
                   amplitude: float = 1.0, noise: float = 0.1,
                   seed: int = 0, name: str = "sine") -> RawSeries:
    """Seasonal benchmark series: amplitude * sin(2 pi t / period) plus
    Gaussian noise, one phase-shifted copy per channel."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_steps, dtype=np.float64)[:, None]
    phase = np.arange(channels)[None, :] * (period / max(channels, 1)) * 0.25
    clean = amplitude * np.sin(2 * np.pi * (t + phase) / period)
    values = clean + noise * rng.normal(size=(n_steps, channels))
    return RawSeries(name=name, values=values, frequency_label="")


# ---------------------------------------------------------------------------
# binary cache
# ---------------------------------------------------------------------------

_MAGIC = b"SVQW"
_VERSION = 1
_SPLIT_TAGS = {"train": 0, "val": 1, "test": 2}
_TAG_SPLITS = {v: k for k, v in _SPLIT_TAGS.items()}


def _write_str(fh, s: str):
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def _write_array(fh, arr: np.ndarray):
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(fh) -> np.ndarray:
    (ndim,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
    return data.astype(np.float64)


def save_windows(dataset: WindowDataset, path) -> None:
    """Write the dataset cache: magic SVQW, version, metadata, then the
    shape-prefixed float64 source segment (little-endian)."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<B", _SPLIT_TAGS[dataset.split]))
        fh.write(struct.pack("<III", dataset.input_length, dataset.horizon,
                             dataset.stride))
        _write_str(fh, dataset.name)
        _write_str(fh, dataset.frequency_label)
        _write_array(fh, dataset.segment)


def load_windows(path) -> WindowDataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise DataLoadError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise DataLoadError(f"{path}: unsupported cache version {version}")
        (tag,) = struct.unpack("<B", fh.read(1))
        L, T, stride = struct.unpack("<III", fh.read(12))
        name = _read_str(fh)
        freq = _read_str(fh)
        segment = _read_array(fh)
    return WindowDataset(_TAG_SPLITS[tag], segment, L, T, stride, name, freq)
