"""Dataset ingestion and generation.

Three surfaces:
  * CSV loader for the tabular convention (ISO-8601 timestamp column followed
    by one speed column per node).
  * A native binary bundle ("TSTM") for fast, bit-exact persistence of a
    series plus optional scenario tags.
  * A synthetic road-network generator producing recurring daily patterns on
    a geometric graph, spatially isolated nodes with independent patterns,
    and sudden speed-drop events tagged per (node, time).
"""

from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .data import MINUTES_PER_DAY, GraphSignalSeries

BUNDLE_MAGIC = b"TSTM"
BUNDLE_VERSION = 1

NODE_CLASS_CONNECTED = "connected"
NODE_CLASS_ISOLATED = "isolated"

# Default start for generated timestamps: 2024-01-01 00:00:00 UTC.
_EPOCH_START = 1704067200


class BundleFormatError(ValueError):
    """Raised when a bundle file fails structural validation."""


@dataclass(frozen=True)
class ScenarioTags:
    """Ground-truth scenario annotations for a generated dataset.

    node_class: per-node label, "isolated" or "connected".
    event_mask: [T, N] boolean, true where an event overwrote the speed.
    """

    node_class: list[str]
    event_mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.event_mask, dtype=bool)
        object.__setattr__(self, "event_mask", mask)
        for label in self.node_class:
            if label not in (NODE_CLASS_CONNECTED, NODE_CLASS_ISOLATED):
                raise ValueError(f"unknown node class {label!r}")
        if mask.ndim != 2 or mask.shape[1] != len(self.node_class):
            raise ValueError("event_mask must be [T, N] matching node_class")

    def event_nodes(self) -> np.ndarray:
        """Indices of nodes with at least one tagged event step."""
        return np.flatnonzero(self.event_mask.any(axis=0))


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the synthetic scenario generator."""

    n_nodes: int = 16
    steps_per_day: int = 288
    n_days: int = 14
    n_isolated: int = 2
    n_event_nodes: int = 2
    event_rate: float = 1.0  # expected events per event node per day
    seed: int = 0
    noise_std: float = 1.0
    v_max: float = 70.0
    connect_radius: float = 0.45

    def validate(self) -> None:
        if self.n_nodes < 1:
            raise ValueError("n_nodes must be >= 1")
        if self.n_isolated + self.n_event_nodes > self.n_nodes:
            raise ValueError("n_isolated + n_event_nodes must be <= n_nodes")
        if self.n_isolated < 0 or self.n_event_nodes < 0:
            raise ValueError("node counts must be non-negative")
        if self.event_rate < 0:
            raise ValueError("event_rate must be >= 0")
        if self.n_days < 1:
            raise ValueError("n_days must be >= 1")
        if MINUTES_PER_DAY % self.steps_per_day != 0:
            raise ValueError(
                f"steps_per_day={self.steps_per_day} must divide {MINUTES_PER_DAY}"
            )
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.v_max <= 0:
            raise ValueError("v_max must be positive")

    @property
    def interval_minutes(self) -> int:
        return MINUTES_PER_DAY // self.steps_per_day


def load_csv(path: str | Path) -> GraphSignalSeries:
    """Parse a CSV with an ISO-8601 timestamp column and one column per node.

    Empty speed cells become 0.0 (the missing-data convention); any other
    non-numeric cell is an error naming the row and column.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if len(header) < 2:
            raise ValueError(f"{path}: need a timestamp column plus >=1 node column")
        node_ids = [h.strip() for h in header[1:]]
        timestamps = []
        rows = []
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(
                    f"{path}: row {row_no} has {len(row)} cells, expected {len(header)}"
                )
            try:
                ts = datetime.fromisoformat(row[0].strip())
            except ValueError:
                raise ValueError(
                    f"{path}: row {row_no}, column 1: bad timestamp {row[0]!r}"
                ) from None
            if ts.tzinfo is None:
                ts = ts.replace(tzinfo=timezone.utc)
            timestamps.append(int(ts.timestamp()))
            parsed = []
            for col_no, cell in enumerate(row[1:], start=2):
                cell = cell.strip()
                if cell == "":
                    parsed.append(0.0)
                    continue
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"{path}: row {row_no}, column {col_no}: "
                        f"non-numeric cell {cell!r}"
                    ) from None
            rows.append(parsed)
    if len(rows) < 1:
        raise ValueError(f"{path}: no data rows")
    ts_arr = np.asarray(timestamps, dtype=np.int64)
    if len(ts_arr) > 1:
        deltas = np.diff(ts_arr)
        if np.any(deltas <= 0):
            raise ValueError(f"{path}: timestamps must be strictly increasing")
        if np.any(deltas != deltas[0]):
            raise ValueError(f"{path}: non-uniform interval between rows")
        if deltas[0] % 60 != 0:
            raise ValueError(f"{path}: interval must be a whole number of minutes")
        interval_minutes = int(deltas[0] // 60)
    else:
        interval_minutes = 5  # single row: interval is unobservable, assume 5 min
    return GraphSignalSeries(
        values=np.asarray(rows, dtype=np.float64),
        timestamps=ts_arr,
        node_ids=node_ids,
        interval_minutes=interval_minutes,
    )


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise BundleFormatError("checksum failure: truncated bundle")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save_bundle(
    series: GraphSignalSeries,
    tags: ScenarioTags | None,
    path: str | Path,
) -> None:
    """Write the little-endian TSTM bundle; see README for the byte layout."""
    t_total, n = series.values.shape
    parts = [
        BUNDLE_MAGIC,
        struct.pack("<H", BUNDLE_VERSION),
        struct.pack("<B", 1 if tags is not None else 0),
        struct.pack("<I", series.interval_minutes),
        struct.pack("<QQ", t_total, n),
    ]
    for node_id in series.node_ids:
        parts.append(_pack_str(node_id))
    parts.append(series.timestamps.astype("<u8").tobytes())
    parts.append(np.ascontiguousarray(series.values, dtype="<f4").tobytes())
    if tags is not None:
        classes = np.array(
            [1 if c == NODE_CLASS_ISOLATED else 0 for c in tags.node_class],
            dtype="<u1",
        )
        parts.append(classes.tobytes())
        parts.append(np.packbits(tags.event_mask.astype(np.uint8)).tobytes())
    body = b"".join(parts)
    checksum = zlib.crc32(body) & 0xFFFFFFFF
    Path(path).write_bytes(body + struct.pack("<I", checksum))


def load_bundle(path: str | Path) -> tuple[GraphSignalSeries, ScenarioTags | None]:
    """Read a TSTM bundle back; values round-trip bit-exactly as float32."""
    raw = Path(path).read_bytes()
    if len(raw) < len(BUNDLE_MAGIC) + 4:
        raise BundleFormatError("checksum failure: truncated bundle")
    body, stored = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise BundleFormatError("checksum failure")
    cur = _Cursor(body)
    magic = cur.take(4)
    if magic != BUNDLE_MAGIC:
        raise BundleFormatError(
            f"magic-number mismatch: got {magic!r}, expected {BUNDLE_MAGIC!r}"
        )
    (version,) = cur.unpack("<H")
    if version != BUNDLE_VERSION:
        raise BundleFormatError(
            f"version mismatch: file is v{version}, reader supports v{BUNDLE_VERSION}"
        )
    (has_tags,) = cur.unpack("<B")
    (interval_minutes,) = cur.unpack("<I")
    t_total, n = cur.unpack("<QQ")
    node_ids = []
    for _ in range(n):
        (length,) = cur.unpack("<H")
        node_ids.append(cur.take(length).decode("utf-8"))
    timestamps = np.frombuffer(cur.take(8 * t_total), dtype="<u8").astype(np.int64)
    values = np.frombuffer(cur.take(4 * t_total * n), dtype="<f4").reshape(t_total, n)
    series = GraphSignalSeries(
        values=values.astype(np.float64),
        timestamps=timestamps,
        node_ids=node_ids,
        interval_minutes=interval_minutes,
    )
    tags = None
    if has_tags:
        classes = np.frombuffer(cur.take(n), dtype="<u1")
        n_mask_bytes = (t_total * n + 7) // 8
        bits = np.unpackbits(
            np.frombuffer(cur.take(n_mask_bytes), dtype=np.uint8),
            count=t_total * n,
        )
        tags = ScenarioTags(
            node_class=[
                NODE_CLASS_ISOLATED if c else NODE_CLASS_CONNECTED for c in classes
            ],
            event_mask=bits.reshape(t_total, n).astype(bool),
        )
    if cur.pos != len(body):
        raise BundleFormatError("checksum failure: trailing bytes")
    return series, tags


def _raised_cosine(tau_frac: np.ndarray, center: float, width: float) -> np.ndarray:
    """Daily congestion bump: 1 at `center`, 0 outside +/- width (day fractions)."""
    delta = np.minimum(np.abs(tau_frac - center), 1.0 - np.abs(tau_frac - center))
    bump = 0.5 * (1.0 + np.cos(np.pi * np.clip(delta / width, 0.0, 1.0)))
    return np.where(delta < width, bump, 0.0)


def generate_synthetic(
    cfg: SyntheticConfig,
) -> tuple[GraphSignalSeries, np.ndarray, ScenarioTags]:
    """Generate a synthetic road network with recurring and event regimes.

    Topology is a random geometric graph in the unit square (nodes within
    `connect_radius` get edges); the first n_isolated nodes are detached.
    Connected nodes follow node-specific morning/evening rush bumps diffused
    across neighbors with a one-step lag; isolated nodes follow independent
    periodic patterns. Events start at an event node and spread to its
    neighbors with lag, cutting speed by at least 40% over a contiguous span.

    Deterministic for a fixed seed (counter-based Philox RNG).
    """
    cfg.validate()
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))
    n, spd = cfg.n_nodes, cfg.steps_per_day
    t_total = spd * cfg.n_days

    # --- topology -----------------------------------------------------------
    coords = rng.uniform(0.0, 1.0, size=(n, 2))
    dist = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    adjacency = ((dist < cfg.connect_radius) & ~np.eye(n, dtype=bool)).astype(
        np.float64
    )
    isolated = np.arange(cfg.n_isolated)
    adjacency[isolated, :] = 0.0
    adjacency[:, isolated] = 0.0
    # Keep the connected component honest: wire any accidentally degree-zero
    # connected node to its nearest connected neighbor.
    connected = np.arange(cfg.n_isolated, n)
    if connected.size > 1:
        for i in connected:
            if adjacency[i].sum() == 0:
                others = connected[connected != i]
                j = others[np.argmin(dist[i, others])]
                adjacency[i, j] = adjacency[j, i] = 1.0

    # --- recurring base signals ----------------------------------------------
    # Connected nodes follow morning/evening raised-cosine rush bumps whose
    # intensity drifts with a slow AR(1) congestion level per node. The drift
    # makes the signal non-deterministic given time-of-day alone, so neighbor
    # observations (which lead through lagged diffusion below) carry real
    # predictive information.
    tau_frac = (np.arange(t_total) % spd) / spd
    v_free = rng.uniform(58.0, 68.0, size=n)
    morning_amp = rng.uniform(18.0, 30.0, size=n)
    evening_amp = rng.uniform(18.0, 30.0, size=n)
    morning_center = rng.uniform(0.32, 0.37, size=n)  # ~8am
    evening_center = rng.uniform(0.72, 0.77, size=n)  # ~5:30pm
    width = rng.uniform(0.06, 0.10, size=n)

    rho = 0.95
    shocks = rng.normal(0.0, 0.12, size=(t_total, n))
    level = np.ones((t_total, n))
    for t in range(1, t_total):
        level[t] = rho * level[t - 1] + (1.0 - rho) * 1.0 + shocks[t]
    level = np.clip(level, 0.4, 1.6)

    base = np.empty((t_total, n))
    for i in range(n):
        bumps = (
            morning_amp[i] * _raised_cosine(tau_frac, morning_center[i], width[i])
            + evening_amp[i] * _raised_cosine(tau_frac, evening_center[i], width[i])
        )
        base[:, i] = v_free[i] - bumps * level[:, i]
    # Isolated nodes get their own rhythm: an off-peak dip plus a fast
    # multi-cycle oscillation, deterministic up to noise. Their dynamics share
    # nothing with the rush pattern, so any cross-node mixing only pollutes
    # them while pure temporal modeling nails them.
    for i in isolated:
        phase = rng.uniform(0.0, 1.0)
        cycles = rng.integers(4, 8)
        dip_center = rng.uniform(0.45, 0.60)
        base[:, i] = (
            v_free[i]
            - 18.0 * _raised_cosine(tau_frac, dip_center, 0.12)
            + 10.0 * np.sin(2.0 * np.pi * (cycles * tau_frac + phase))
        )

    # --- spatial diffusion (connected nodes only) -----------------------------
    # Convex mix of own signal and neighbors' lagged signals. Per-edge lags of
    # several steps mean congestion waves arrive from neighbors well before
    # they show in a node's own history.
    values = base.copy()
    self_w = rng.uniform(0.40, 0.60, size=n)
    edge_lag = rng.integers(2, 7, size=(n, n))
    for i in connected:
        nbrs = np.flatnonzero(adjacency[i])
        if nbrs.size == 0:
            continue
        mixed = np.zeros(t_total)
        for j in nbrs:
            lag = int(edge_lag[i, j])
            lagged = np.roll(base[:, j], shift=lag)
            lagged[:lag] = base[0, j]
            mixed += lagged
        values[:, i] = self_w[i] * base[:, i] + (1.0 - self_w[i]) * (
            mixed / nbrs.size
        )

    values = values + rng.normal(0.0, cfg.noise_std, size=values.shape)

    # --- events ----------------------------------------------------------------
    # Each event cuts the event node's speed by >=40% over a contiguous span.
    # Neighbors show a weaker drop that LEADS the event by a few steps (a
    # congestion wave arriving at the sensor), so during tagged spans the
    # neighbors carry predictive signal that pure temporal modeling cannot see.
    # Only the event node itself is tagged.
    event_mask = np.zeros((t_total, n), dtype=bool)
    event_nodes = np.arange(cfg.n_isolated, cfg.n_isolated + cfg.n_event_nodes)
    for node in event_nodes:
        n_events = rng.poisson(cfg.event_rate * cfg.n_days)
        for _ in range(n_events):
            start = int(rng.integers(0, t_total))
            duration = max(2, int(rng.integers(max(1, spd // 6), max(2, spd // 3))))
            stop = min(start + duration, t_total)
            if stop - start < 2:
                continue
            drop = rng.uniform(0.45, 0.70)
            values[start:stop, node] *= 1.0 - drop
            event_mask[start:stop, node] = True
            for nbr in np.flatnonzero(adjacency[node]):
                lead = int(rng.integers(2, 5))
                s, e = max(0, start - lead), max(0, stop - lead)
                if s >= e:
                    continue
                values[s:e, nbr] *= 1.0 - 0.7 * drop

    values = np.clip(values, 3.0, cfg.v_max)

    interval_sec = cfg.interval_minutes * 60
    series = GraphSignalSeries(
        values=values,
        timestamps=_EPOCH_START + interval_sec * np.arange(t_total, dtype=np.int64),
        node_ids=[f"n{i:03d}" for i in range(n)],
        interval_minutes=cfg.interval_minutes,
    )
    node_class = [
        NODE_CLASS_ISOLATED if i < cfg.n_isolated else NODE_CLASS_CONNECTED
        for i in range(n)
    ]
    return series, adjacency, ScenarioTags(node_class=node_class, event_mask=event_mask)
