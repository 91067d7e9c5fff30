"""Dynamic brain-network data model and dataset file I/O.

One sample is a node-feature matrix (regions x feature dims) plus a stack of
per-timestep coherence matrices and a binary label. A static view per sample
(boolean neighborhoods + shortest-path-distance buckets) drives the encoder.

Dataset files are a raw little-endian float64 record stream with a JSON
sidecar (``<path>.json``) carrying the header; see README for the layout.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numcore import check_finite

FORMAT_VERSION = 1
DEFAULT_TAU = 0.4
DEFAULT_MAX_BUCKET = 5


class DatasetFormatError(ValueError):
    """A dataset file or one of its samples violates the format contract."""


@dataclass(frozen=True)
class DynamicBrainGraph:
    """One subject: features (N, D), coherence stack (T, N, N), label in {0,1}."""

    node_features: np.ndarray
    connectivity: np.ndarray
    label: int

    @property
    def n_regions(self) -> int:
        return self.node_features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.node_features.shape[1]

    @property
    def timesteps(self) -> int:
        return self.connectivity.shape[0]

    def validate(self, index: int | None = None) -> None:
        where = f"sample {index}" if index is not None else "sample"
        x, conn = self.node_features, self.connectivity
        if x.ndim != 2:
            raise DatasetFormatError(f"{where}: node_features must be 2-D")
        if conn.ndim != 3 or conn.shape[1] != conn.shape[2]:
            raise DatasetFormatError(f"{where}: connectivity must be (T, N, N)")
        if conn.shape[1] != x.shape[0]:
            raise DatasetFormatError(
                f"{where}: connectivity size {conn.shape[1]} does not match "
                f"{x.shape[0]} regions"
            )
        if self.label not in (0, 1):
            raise DatasetFormatError(f"{where}: label {self.label!r} outside {{0,1}}")
        if not np.all(np.isfinite(x)):
            raise DatasetFormatError(f"{where}: non-finite node features")
        for t in range(conn.shape[0]):
            m = conn[t]
            if not np.array_equal(m, m.T):
                raise DatasetFormatError(f"{where}: asymmetric connectivity at t={t}")
            if not np.allclose(np.diagonal(m), 1.0, rtol=0.0, atol=0.0):
                raise DatasetFormatError(f"{where}: connectivity diagonal not 1 at t={t}")
            if m.min() < 0.0 or m.max() > 1.0:
                raise DatasetFormatError(f"{where}: coherence outside [0,1] at t={t}")


@dataclass(frozen=True)
class StaticGraphView:
    """Thresholded neighborhoods and SPD buckets shared by all encoder layers."""

    adjacency: np.ndarray
    spd_bucket: np.ndarray

    @property
    def n_regions(self) -> int:
        return self.adjacency.shape[0]


def aggregate_dynamic(connectivity: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Elementwise mean of the per-timestep coherence matrices."""
    stack = np.asarray(connectivity, dtype=np.float64)
    if stack.ndim != 3 or stack.shape[0] == 0:
        raise ValueError("aggregate_dynamic: need at least one T x N x N matrix")
    return stack.mean(axis=0)


def threshold_adjacency(coherence: np.ndarray, tau: float) -> np.ndarray:
    """Boolean adjacency: coherence >= tau off-diagonal, self-loops always on."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0,1), got {tau}")
    coherence = np.asarray(coherence, dtype=np.float64)
    adj = coherence >= tau
    np.fill_diagonal(adj, True)
    return adj


def shortest_path_buckets(adjacency: np.ndarray, max_bucket: int) -> np.ndarray:
    """Unweighted all-pairs shortest-path distances, clipped to buckets.

    Distances above max_bucket-1 and unreachable pairs land in the dedicated
    bucket ``max_bucket``. Implemented as simultaneous BFS over boolean
    frontier products.
    """
    adj = np.asarray(adjacency, dtype=bool)
    n = adj.shape[0]
    off = adj.copy()
    np.fill_diagonal(off, False)
    dist = np.full((n, n), max_bucket, dtype=np.int64)
    np.fill_diagonal(dist, 0)
    visited = np.eye(n, dtype=bool)
    frontier = np.eye(n, dtype=bool)
    for d in range(1, max_bucket):
        frontier = (frontier @ off) & ~visited
        if not frontier.any():
            break
        dist[frontier] = d
        visited |= frontier
    return dist


def build_view(
    graph: DynamicBrainGraph,
    tau: float = DEFAULT_TAU,
    max_bucket: int = DEFAULT_MAX_BUCKET,
) -> StaticGraphView:
    """Mean coherence -> thresholded adjacency -> SPD buckets."""
    mean = aggregate_dynamic(graph.connectivity)
    adj = threshold_adjacency(mean, tau)
    return StaticGraphView(adjacency=adj, spd_bucket=shortest_path_buckets(adj, max_bucket))


def _sidecar_path(path: Path) -> Path:
    return Path(str(path) + ".json")


def save_dataset(
    path: str | Path,
    graphs: Sequence[DynamicBrainGraph],
    region_names: Sequence[str] | None = None,
    planted_regions: Sequence[int] | None = None,
    extra: dict | None = None,
) -> None:
    """Write the binary record stream plus the JSON sidecar header."""
    if not graphs:
        raise ValueError("save_dataset: empty dataset")
    path = Path(path)
    n, d, t = graphs[0].n_regions, graphs[0].feature_dim, graphs[0].timesteps
    for i, g in enumerate(graphs):
        g.validate(i)
        if (g.n_regions, g.feature_dim, g.timesteps) != (n, d, t):
            raise DatasetFormatError(f"sample {i}: inconsistent shapes across dataset")
    if region_names is not None and len(region_names) != n:
        raise ValueError("region_names length must equal the number of regions")
    header = {
        "format_version": FORMAT_VERSION,
        "N": n,
        "D": d,
        "T": t,
        "sample_count": len(graphs),
    }
    if region_names is not None:
        header["region_names"] = list(region_names)
    if planted_regions is not None:
        header["planted_regions"] = sorted(int(r) for r in planted_regions)
    if extra:
        header.update(extra)
    with open(path, "wb") as fh:
        for g in graphs:
            fh.write(np.float64(g.label).astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(g.node_features, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(g.connectivity, dtype="<f8").tobytes())
    with open(_sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_sidecar(path: str | Path) -> dict:
    sidecar = _sidecar_path(Path(path))
    if not sidecar.exists():
        raise DatasetFormatError(f"missing sidecar {sidecar}")
    with open(sidecar, encoding="utf-8") as fh:
        try:
            header = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"corrupt sidecar {sidecar}: {exc}") from exc
    for key in ("format_version", "N", "D", "T", "sample_count"):
        if key not in header:
            raise DatasetFormatError(f"sidecar missing header field {key!r}")
    if header["format_version"] != FORMAT_VERSION:
        raise DatasetFormatError(
            f"unsupported format_version {header['format_version']}"
        )
    return header


def load_dataset(path: str | Path) -> list[DynamicBrainGraph]:
    """Load and validate every sample; raises naming the offending sample."""
    path = Path(path)
    header = read_sidecar(path)
    n, d, t = header["N"], header["D"], header["T"]
    count = header["sample_count"]
    record = 1 + n * d + t * n * n
    raw = np.fromfile(path, dtype="<f8")
    if raw.size != count * record:
        raise DatasetFormatError(
            f"corrupt dataset {path}: expected {count * record} float64 values, "
            f"found {raw.size}"
        )
    graphs: list[DynamicBrainGraph] = []
    for i in range(count):
        rec = raw[i * record : (i + 1) * record]
        label_value = rec[0]
        if label_value not in (0.0, 1.0):
            raise DatasetFormatError(f"sample {i}: label {label_value!r} outside {{0,1}}")
        feats = rec[1 : 1 + n * d].reshape(n, d).copy()
        conn = rec[1 + n * d :].reshape(t, n, n).copy()
        g = DynamicBrainGraph(node_features=feats, connectivity=conn, label=int(label_value))
        g.validate(i)
        graphs.append(g)
    return graphs


def export_features_csv(path: str | Path, graphs: Sequence[DynamicBrainGraph]) -> None:
    """Flat CSV of node features for eyeballing: one row per (sample, region)."""
    if not graphs:
        raise ValueError("export_features_csv: empty dataset")
    d = graphs[0].feature_dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "label", "region"] + [f"f{k}" for k in range(d)])
        for s, g in enumerate(graphs):
            for r in range(g.n_regions):
                writer.writerow(
                    [s, g.label, r] + [repr(v) for v in g.node_features[r].tolist()]
                )


def labels_array(graphs: Sequence[DynamicBrainGraph]) -> np.ndarray:
    return np.array([g.label for g in graphs], dtype=np.int64)
