"""Windowed datasets, their columnar binary file and the ingest pipeline.

File layout (all integers little-endian)::

    8 bytes   magic b"VTRJDSET"
    uint32    format version (1)
    uint64    header length L
    L bytes   UTF-8 JSON header (sorted keys)
    payload   raw little-endian columns, each at the offset listed in the header

Per split the columns are ``x`` (N, l, 2) float64, ``y`` (N, h, 2) float64,
``psi`` (N,) int64 with -1 for unlabeled, ``traj`` (N,) int64 index into the
split's trajectory-id list, ``start`` (N,) int64 and ``t_last`` (N,) float64
(time of the last input point, seconds). Coordinates are normalized with the
header's training statistics.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ..errors import DataError, ExtentError, FormatError, IntegrityError
from .ais import AISRecord, ParseResult, group_by_vessel, parse_ais_csv, segment_voyages
from .geodesy import project_utm
from .trajectory import (
    NormStats,
    Trajectory,
    intention_vocabulary,
    label_intention,
    load_labels,
    load_regions,
    resample,
    split,
    window,
)

logger = logging.getLogger(__name__)

MAGIC = b"VTRJDSET"
VERSION = 1
SPLITS = ("train", "val", "test")
_COLUMNS = (("x", "<f8"), ("y", "<f8"), ("psi", "<i8"), ("traj", "<i8"), ("start", "<i8"), ("t_last", "<f8"))


@dataclass
class WindowSet:
    """Normalized windows of one split."""

    x: np.ndarray  # (N, l, 2)
    y: np.ndarray  # (N, h, 2)
    psi: np.ndarray  # (N,) class index, -1 when unlabeled
    traj: np.ndarray  # (N,) index into traj_ids
    start: np.ndarray  # (N,)
    t_last: np.ndarray  # (N,)
    traj_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def window_traj_ids(self) -> list[str]:
        return [self.traj_ids[i] for i in self.traj]

    def psi_onehot(self, v: int) -> np.ndarray:
        if v <= 0:
            return np.zeros((len(self), 0))
        if np.any(self.psi < 0) or np.any(self.psi >= v):
            raise ExtentError(f"split holds intention classes outside a vocabulary of size {v}")
        return np.eye(v)[self.psi]

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx)
        return WindowSet(
            self.x[idx], self.y[idx], self.psi[idx], self.traj[idx], self.start[idx], self.t_last[idx], self.traj_ids
        )

    @classmethod
    def empty(cls, seq_in: int, seq_out: int) -> "WindowSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, seq_in, 2)), np.zeros((0, seq_out, 2)), z, z, z, np.zeros(0), [])

    @classmethod
    def from_trajectories(
        cls, trajectories: Sequence[Trajectory], stats: NormStats, seq_in: int, seq_out: int
    ) -> "WindowSet":
        xs, ys, psi, traj, start, t_last = [], [], [], [], [], []
        ids = []
        for k, tr in enumerate(trajectories):
            ids.append(tr.id)
            for w in window(tr, seq_in, seq_out):
                xs.append(w.x)
                ys.append(w.y)
                psi.append(-1 if w.psi is None else w.psi)
                traj.append(k)
                start.append(w.start)
                t_last.append(tr.t[w.start + seq_in - 1])
        if not xs:
            out = cls.empty(seq_in, seq_out)
            out.traj_ids = ids
            return out
        return cls(
            stats.normalize(np.stack(xs)),
            stats.normalize(np.stack(ys)),
            np.asarray(psi, dtype=np.int64),
            np.asarray(traj, dtype=np.int64),
            np.asarray(start, dtype=np.int64),
            np.asarray(t_last, dtype=np.float64),
            ids,
        )


@dataclass
class Dataset:
    splits: dict[str, WindowSet]
    stats: NormStats
    vocab: list[str]
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def seq_in(self) -> int:
        return self.splits["train"].x.shape[1]

    @property
    def seq_out(self) -> int:
        return self.splits["train"].y.shape[1]

    @property
    def n_intents(self) -> int:
        return len(self.vocab)

    def __getitem__(self, name: str) -> WindowSet:
        if name not in self.splits:
            raise DataError(f"unknown split {name!r}; expected one of {list(SPLITS)}")
        return self.splits[name]

    def counts(self) -> dict[str, dict[str, int]]:
        return {
            name: {"trajectories": len(ws.traj_ids), "windows": len(ws)} for name, ws in self.splits.items()
        }


def build_from_trajectories(
    trajectories: Sequence[Trajectory],
    seq_in: int,
    seq_out: int,
    fractions: Sequence[float],
    seed: int,
    vocab: list[str] | None = None,
    meta: dict[str, Any] | None = None,
) -> Dataset:
    """Split at trajectory level, fit stats on the training split, then window."""
    tr, va, te = split(trajectories, fractions, seed)
    if not tr:
        raise DataError("training split is empty")
    stats = NormStats.fit(tr)
    splits = {
        name: WindowSet.from_trajectories(part, stats, seq_in, seq_out)
        for name, part in zip(SPLITS, (tr, va, te))
    }
    return Dataset(splits, stats, list(vocab or []), dict(meta or {}))


# -- ingest -----------------------------------------------------------------


def vessel_trajectories(
    mmsi: str, records: list[AISRecord], delta: float, gap: float, min_points: int, zone: int
) -> list[Trajectory]:
    """Voyages of one vessel: segment, project, resample, drop short ones."""
    out = []
    for k, seg in enumerate(segment_voyages(records, gap)):
        t = np.array([r.timestamp for r in seg])
        lat = np.array([r.lat for r in seg])
        lon = np.array([r.lon for r in seg])
        e, n = project_utm(lat, lon, zone)
        res = resample(Trajectory(f"{mmsi}-{k:03d}", t, np.column_stack([e, n])), delta)
        if res is not None and len(res) >= min_points:
            out.append(res)
    return out


def build_dataset(csv_path: Path | str, config, workers: int = 1) -> tuple[Dataset, ParseResult]:
    """Full pipeline from an AIS CSV export to a windowed, split, normalized dataset."""
    parsed = parse_ais_csv(csv_path, config.ship_type)
    groups = group_by_vessel(parsed.records)
    min_points = config.seq_in + config.seq_out

    def per_vessel(item):
        mmsi, recs = item
        return vessel_trajectories(mmsi, recs, config.delta, config.gap, min_points, config.zone)

    items = list(groups.items())  # sorted by MMSI
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(per_vessel, items))
    else:
        parts = [per_vessel(it) for it in items]
    trajectories = [t for p in parts for t in p]

    regions = load_regions(config.regions) if config.regions else None
    labels = load_labels(config.labels) if config.labels else None
    vocab = intention_vocabulary(regions, labels)
    excluded = 0
    if vocab:
        kept = []
        for tr in trajectories:
            tr.intent = label_intention(tr, vocab, regions, labels, config.zone)
            if tr.intent is None:
                excluded += 1
                logger.warning("trajectory %s matches no intention class; excluded", tr.id)
            else:
                kept.append(tr)
        trajectories = kept
    if not trajectories:
        raise DataError(f"{csv_path}: no trajectory with at least {min_points} resampled points")
    meta = {
        "source": Path(csv_path).name,
        "rows": parsed.n_rows,
        "rows_skipped": parsed.n_skipped,
        "rows_filtered": parsed.n_filtered,
        "trajectories_unlabeled_excluded": excluded,
        "delta": config.delta,
        "zone": config.zone,
    }
    ds = build_from_trajectories(
        trajectories, config.seq_in, config.seq_out, config.splits, config.seed, vocab, meta
    )
    return ds, parsed


# -- serialization ----------------------------------------------------------


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dataset_bytes(ds: Dataset) -> bytes:
    header: dict[str, Any] = {
        "stats": ds.stats.to_dict(),
        "vocab": list(ds.vocab),
        "meta": ds.meta,
        "seq_in": ds.seq_in,
        "seq_out": ds.seq_out,
        "splits": {},
    }
    chunks = []
    offset = 0
    for name in SPLITS:
        ws = ds.splits[name]
        cols = {}
        for col, dtype in _COLUMNS:
            arr = np.ascontiguousarray(getattr(ws, col), dtype=dtype)
            raw = arr.tobytes()
            cols[col] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
            chunks.append(raw)
            offset += len(raw)
        header["splits"][name] = {"columns": cols, "traj_ids": list(ws.traj_ids)}
    head = _canonical(header)
    return MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + b"".join(chunks)


def save_dataset(ds: Dataset, path: Path | str) -> str:
    """Write the dataset file; returns its SHA-256 hex digest."""
    blob = dataset_bytes(ds)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_dataset(path: Path | str) -> Dataset:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if blob[:8] != MAGIC:
        raise FormatError(f"{path}: not a dataset file")
    if len(blob) < 20:
        raise IntegrityError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    try:
        header = json.loads(blob[20 : 20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt header") from exc
    payload = memoryview(blob)[20 + hlen :]
    splits = {}
    for name in SPLITS:
        entry = header["splits"][name]
        arrays = {}
        for col, info in entry["columns"].items():
            lo, n = info["offset"], info["nbytes"]
            if lo + n > len(payload):
                raise IntegrityError(f"{path}: column {name}.{col} extends past end of file")
            arrays[col] = np.frombuffer(payload[lo : lo + n], dtype=info["dtype"]).reshape(info["shape"]).copy()
        splits[name] = WindowSet(traj_ids=list(entry["traj_ids"]), **arrays)
    return Dataset(splits, NormStats.from_dict(header["stats"]), list(header["vocab"]), dict(header["meta"]))


def manifest(ds: Dataset, checksum: str, config_echo: dict[str, Any] | None = None) -> dict[str, Any]:
    return {
        "format": "vesseltraj-dataset",
        "version": VERSION,
        "sha256": checksum,
        "counts": ds.counts(),
        "stats": ds.stats.to_dict(),
        "vocab": list(ds.vocab),
        "seq_in": ds.seq_in,
        "seq_out": ds.seq_out,
        "meta": ds.meta,
        "config": config_echo or {},
    }


def write_dataset(ds: Dataset, outdir: Path | str, config_echo: dict[str, Any] | None = None, name: str = "dataset"):
    """Dataset file plus ``<name>.manifest.json``; returns both paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    data_path = outdir / f"{name}.bin"
    checksum = save_dataset(ds, data_path)
    man_path = outdir / f"{name}.manifest.json"
    man_path.write_text(json.dumps(manifest(ds, checksum, config_echo), indent=2, sort_keys=True) + "\n")
    return data_path, man_path
