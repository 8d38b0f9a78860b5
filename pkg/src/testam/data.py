"""Dataset types, z-score scaling, sliding windows, and chronological splits.

Speed readings of exactly 0.0 encode missing data (the standard convention
for loop-detector speed datasets); the scaler and all metrics mask zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MINUTES_PER_DAY = 24 * 60

# Floor applied to the fitted std so constant series stay invertible.
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class GraphSignalSeries:
    """Timestamped speed matrix over a fixed set of road-network nodes.

    values: [T_total, N] speeds (km/h or mph); 0.0 means missing.
    timestamps: epoch seconds, strictly increasing with uniform spacing.
    """

    values: np.ndarray
    timestamps: np.ndarray
    node_ids: list[str]
    interval_minutes: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        timestamps = np.asarray(self.timestamps, dtype=np.int64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "timestamps", timestamps)
        if values.ndim != 2:
            raise ValueError(f"values must be 2-D [T, N], got shape {values.shape}")
        t_total, n = values.shape
        if n < 1:
            raise ValueError("series must have at least one node")
        if len(self.node_ids) != n:
            raise ValueError(f"{len(self.node_ids)} node_ids for {n} columns")
        if timestamps.shape != (t_total,):
            raise ValueError("timestamps length must match values rows")
        if self.interval_minutes <= 0:
            raise ValueError("interval_minutes must be positive")
        if t_total > 1:
            deltas = np.diff(timestamps)
            if np.any(deltas <= 0):
                raise ValueError("timestamps must be strictly increasing")
            expected = self.interval_minutes * 60
            if np.any(deltas != expected):
                raise ValueError("non-uniform interval between timestamps")
        if not np.all(np.isfinite(values)):
            raise ValueError("values must be finite")

    @property
    def num_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def num_steps(self) -> int:
        return self.values.shape[0]

    @property
    def steps_per_day(self) -> int:
        if MINUTES_PER_DAY % self.interval_minutes != 0:
            raise ValueError(
                f"interval_minutes={self.interval_minutes} does not divide a day"
            )
        return MINUTES_PER_DAY // self.interval_minutes

    def time_of_day_index(self) -> np.ndarray:
        """Per-row index in 0..steps_per_day-1 derived from the timestamps."""
        minutes = (self.timestamps // 60) % MINUTES_PER_DAY
        return (minutes // self.interval_minutes).astype(np.int64)

    def day_of_week_index(self) -> np.ndarray:
        """Per-row day index 0..6 (0 = Monday, epoch-based)."""
        return ((self.timestamps // 86400 + 3) % 7).astype(np.int64)

    def slice_steps(self, start: int, stop: int) -> "GraphSignalSeries":
        return GraphSignalSeries(
            values=self.values[start:stop].copy(),
            timestamps=self.timestamps[start:stop].copy(),
            node_ids=list(self.node_ids),
            interval_minutes=self.interval_minutes,
        )


@dataclass(frozen=True)
class Scaler:
    """Z-score normalizer with a floored std."""

    mean: float
    std: float

    def __post_init__(self):
        if self.std <= 0:
            raise ValueError("std must be positive")

    def apply(self, x):
        return (x - self.mean) / self.std

    def invert(self, z):
        return z * self.std + self.mean


def fit_scaler(series: GraphSignalSeries, mask_zero: bool = True) -> Scaler:
    """Fit mean/std on a series, optionally ignoring zero (missing) entries.

    Fit this on the training portion of the data only; statistics must not
    leak from validation or test ranges.
    """
    values = series.values
    if mask_zero:
        values = values[values != 0.0]
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size < 2:
        raise ValueError("empty series: need at least 2 non-masked entries")
    mean = float(values.mean())
    std = float(values.std())
    return Scaler(mean=mean, std=max(std, STD_FLOOR))


@dataclass(frozen=True)
class WindowedSample:
    """One forecasting sample.

    x: [T_in, N, C] with channel 0 the normalized speed and channel 1 the
       normalized time-of-day scalar; y: [T_out, N, 1] in original units.
    tau_in/tau_out: integer time-of-day indices for each step.
    start: index of the first input row in the source series.
    """

    x: np.ndarray
    y: np.ndarray
    tau_in: np.ndarray
    tau_out: np.ndarray
    start: int

    @property
    def window_end(self) -> int:
        """Index of the last raw row covered by this sample (inclusive)."""
        return self.start + self.x.shape[0] + self.y.shape[0] - 1


def make_windows(
    series: GraphSignalSeries,
    t_in: int,
    t_out: int,
    scaler: Scaler,
    add_day_of_week: bool = False,
) -> list[WindowedSample]:
    """Slide a (t_in, t_out) window over the series, one step at a time.

    Returns T_total - t_in - t_out + 1 samples. Inputs are scaled; targets
    stay in original units so losses and metrics read in speed units.
    add_day_of_week appends a normalized weekday channel (C becomes 3).
    """
    if t_in < 1 or t_out < 1:
        raise ValueError("t_in and t_out must be >= 1")
    t_total = series.num_steps
    if t_total < t_in + t_out:
        raise ValueError(
            f"series too short: {t_total} steps < t_in + t_out = {t_in + t_out}"
        )
    steps_per_day = series.steps_per_day
    tau = series.time_of_day_index()
    scaled = scaler.apply(series.values).astype(np.float32)
    channels = [scaled, np.broadcast_to(
        (tau.astype(np.float32) / steps_per_day)[:, None], scaled.shape
    )]
    if add_day_of_week:
        dow = series.day_of_week_index().astype(np.float32) / 7.0
        channels.append(np.broadcast_to(dow[:, None], scaled.shape))

    samples = []
    for start in range(t_total - t_in - t_out + 1):
        in_sl = slice(start, start + t_in)
        out_sl = slice(start + t_in, start + t_in + t_out)
        x = np.stack([c[in_sl] for c in channels], axis=-1)
        y = series.values[out_sl].astype(np.float32)[..., None]
        samples.append(
            WindowedSample(
                x=x.astype(np.float32),
                y=y,
                tau_in=tau[in_sl].copy(),
                tau_out=tau[out_sl].copy(),
                start=start,
            )
        )
    return samples


@dataclass(frozen=True)
class DatasetSplit:
    train: list[WindowedSample]
    val: list[WindowedSample]
    test: list[WindowedSample]
    scaler: Scaler | None = None

    def __iter__(self):
        return iter((self.train, self.val, self.test))


def chronological_split(
    samples: list[WindowedSample],
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
) -> DatasetSplit:
    """Split an ordered sample list into contiguous train/val/test blocks.

    Counts are floor-based with the remainder going to test.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(samples)
    n_train = int(n * ratios[0])
    n_val = int(n * ratios[1])
    n_test = n - n_train - n_val
    if n_train == 0 or n_val == 0 or n_test == 0:
        raise ValueError(
            f"empty split: {n} samples at ratios {ratios} "
            f"gives ({n_train}, {n_val}, {n_test})"
        )
    return DatasetSplit(
        train=samples[:n_train],
        val=samples[n_train : n_train + n_val],
        test=samples[n_train + n_val :],
    )


def prepare_dataset(
    series: GraphSignalSeries,
    t_in: int,
    t_out: int,
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    mask_zero: bool = True,
    add_day_of_week: bool = False,
) -> DatasetSplit:
    """Build a leakage-free dataset: split the raw series, then window.

    The raw series is cut into contiguous train/val/test ranges and each
    range is windowed independently, so no window straddles a boundary and
    the scaler sees training rows only.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    t_total = series.num_steps
    n_train = int(t_total * ratios[0])
    n_val = int(t_total * ratios[1])
    train_series = series.slice_steps(0, n_train)
    val_series = series.slice_steps(n_train, n_train + n_val)
    test_series = series.slice_steps(n_train + n_val, t_total)
    scaler = fit_scaler(train_series, mask_zero=mask_zero)
    blocks = []
    for block, offset in (
        (train_series, 0),
        (val_series, n_train),
        (test_series, n_train + n_val),
    ):
        if block.num_steps < t_in + t_out:
            raise ValueError(
                f"empty split: block of {block.num_steps} steps cannot hold a "
                f"{t_in}+{t_out} window"
            )
        windows = make_windows(block, t_in, t_out, scaler, add_day_of_week)
        # Re-anchor start indices to the full series for traceability.
        blocks.append(
            [
                WindowedSample(
                    x=w.x, y=w.y, tau_in=w.tau_in, tau_out=w.tau_out,
                    start=w.start + offset,
                )
                for w in windows
            ]
        )
    return DatasetSplit(train=blocks[0], val=blocks[1], test=blocks[2], scaler=scaler)
