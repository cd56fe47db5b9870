"""Node correlation functions and graph dataset assembly.

Every correlation function returns a symmetric ``N x N`` affinity matrix with
a zero diagonal and entries in ``[0, 1]``:

* ``DB``  -- Gaussian kernel of electrode distance, shared by all timestamps
* ``KNN`` -- binary k-nearest-neighbour graph over node feature rows
* ``PCC`` -- absolute Pearson correlation of node feature rows
* ``PLV`` -- phase locking value of node feature rows
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    ContainerError,
    DataError,
    DegenerateGeometryError,
    DegenerateRowError,
    InvalidInputError,
    NonFiniteError,
    ShapeError,
)
from .numerics import analytic_signal, as_matrix
from .signal_ingest import ElectrodePositions, LabelSet

CORR_KINDS = ("DB", "KNN", "PCC", "PLV")
GDS_VERSION = 1


@dataclass(frozen=True)
class CorrConfig:
    kind: str = "PLV"
    k: int = 3
    sigma_mode: str = "mean-pairwise-distance"
    sigma: float | None = None
    threshold: float = 0.0

    def __post_init__(self):
        if self.kind not in CORR_KINDS:
            raise ConfigError(f"unknown correlation kind {self.kind!r}; expected one of {CORR_KINDS}")
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.sigma_mode not in ("mean-pairwise-distance", "explicit"):
            raise ConfigError(f"unknown sigma_mode {self.sigma_mode!r}")
        if self.sigma_mode == "explicit" and (self.sigma is None or not self.sigma > 0):
            raise ConfigError("explicit sigma_mode needs a positive sigma")
        if not 0.0 <= self.threshold < 1.0:
            raise ConfigError(f"threshold must be in [0, 1), got {self.threshold}")


@dataclass
class GraphSample:
    x: np.ndarray  # (N, d)
    a: np.ndarray  # (N, N)
    y: int

    def __post_init__(self):
        if self.x.ndim != 2 or self.a.shape != (self.x.shape[0], self.x.shape[0]):
            raise ShapeError(f"node features {self.x.shape} do not match adjacency {self.a.shape}")

    @property
    def n_nodes(self) -> int:
        return self.x.shape[0]


def check_adjacency(a: np.ndarray, tol: float = 1e-12) -> None:
    """Raise :class:`DataError` unless ``a`` is a valid affinity matrix."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"adjacency must be square, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("adjacency has non-finite entries")
    if np.max(np.abs(a - a.T), initial=0.0) > tol:
        raise DataError("adjacency is not symmetric")
    if np.any(np.diag(a) != 0.0):
        raise DataError("adjacency diagonal must be zero")
    if a.min(initial=0.0) < 0.0 or a.max(initial=0.0) > 1.0:
        raise DataError("adjacency weights must lie in [0, 1]")


def _finish(a: np.ndarray) -> np.ndarray:
    # Mirror the upper triangle so symmetry is exact, clip rounding overshoot.
    upper = np.triu(a, 1)
    out = np.clip(upper + upper.T, 0.0, 1.0)
    np.fill_diagonal(out, 0.0)
    return out


def corr_db(pos: ElectrodePositions, cfg: CorrConfig = CorrConfig(kind="DB")) -> np.ndarray:
    p = pos.coords
    n = p.shape[0]
    if n < 2:
        raise InvalidInputError("need at least two electrodes")
    diff = p[:, None, :] - p[None, :, :]
    sq = np.sum(diff * diff, axis=-1)
    if cfg.sigma_mode == "explicit":
        sigma = float(cfg.sigma)
    else:
        iu = np.triu_indices(n, 1)
        sigma = float(np.mean(np.sqrt(sq[iu])))
        if sigma == 0.0:
            raise DegenerateGeometryError("all electrodes coincide; mean pairwise distance is zero")
    return _finish(np.exp(-sq / (2.0 * sigma * sigma)))


def corr_knn(x, cfg: CorrConfig = CorrConfig(kind="KNN")) -> np.ndarray:
    """Binary k-NN graph; ties in distance go to the lower node index."""
    x = as_matrix(x, "node features")
    n = x.shape[0]
    if not 1 <= cfg.k < n:
        raise ConfigError(f"k must satisfy 1 <= k < N={n}, got k={cfg.k}")
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    a = np.zeros((n, n))
    for i in range(n):
        d = dist[i].copy()
        d[i] = np.inf
        nearest = np.argsort(d, kind="stable")[: cfg.k]
        a[i, nearest] = 1.0
    a = np.maximum(a, a.T)
    np.fill_diagonal(a, 0.0)
    return a


def corr_pcc(x) -> np.ndarray:
    x = as_matrix(x, "node features")
    if x.shape[1] < 2:
        raise InvalidInputError("PCC needs at least 2 features per node")
    centered = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.sum(centered * centered, axis=1))
    for i, nrm in enumerate(norms):
        if nrm == 0.0:
            raise DegenerateRowError(f"node {i} has zero variance; Pearson correlation undefined", node=i)
    unit = centered / norms[:, None]
    return _finish(np.abs(unit @ unit.T))


def plv_matrix(x) -> np.ndarray:
    """Phase locking value between every pair of rows, diagonal included."""
    x = as_matrix(x, "node features")
    if x.shape[1] < 4:
        raise InvalidInputError("PLV needs at least 4 samples per node")
    phasors = np.empty(x.shape, dtype=np.complex128)
    for i, row in enumerate(x):
        if np.all(row == row[0]):
            raise DegenerateRowError(f"node {i} is constant; instantaneous phase undefined", node=i)
        z = analytic_signal(row)
        phasors[i] = np.exp(1j * np.angle(z))
    return np.abs(phasors @ phasors.conj().T) / x.shape[1]


def corr_plv(x) -> np.ndarray:
    return _finish(plv_matrix(x))


def correlate(x: np.ndarray | None, cfg: CorrConfig, pos: ElectrodePositions | None = None) -> np.ndarray:
    if cfg.kind == "DB":
        if pos is None:
            raise ConfigError("DB correlation requires electrode positions")
        a = corr_db(pos, cfg)
    elif cfg.kind == "KNN":
        a = corr_knn(x, cfg)
    elif cfg.kind == "PCC":
        a = corr_pcc(x)
    else:
        a = corr_plv(x)
    if cfg.threshold > 0.0:
        a = np.where(a < cfg.threshold, 0.0, a)
    return a


class TimestampError(DataError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"timestamp {index}: {cause}")
        self.index = index
        self.cause = cause


def assemble_dataset(
    features,
    labels: LabelSet,
    cfg: CorrConfig,
    pos: ElectrodePositions | None = None,
    workers: int = 1,
) -> list[GraphSample]:
    """One :class:`GraphSample` per timestamp of a ``(T, N, d)`` feature tensor.

    DB adjacency depends on geometry only, so it is computed once and the
    same array object is shared by every sample.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 3:
        raise ShapeError(f"features must be T x N x d, got {feats.shape}")
    t = feats.shape[0]
    if len(labels) != t:
        raise DataError(f"{len(labels)} labels for {t} timestamps")
    if cfg.kind == "DB":
        if pos is None:
            raise ConfigError("DB correlation requires electrode positions")
        if pos.coords.shape[0] != feats.shape[1]:
            raise DataError(f"{pos.coords.shape[0]} electrodes for {feats.shape[1]} nodes")
        shared = correlate(None, cfg, pos)
        shared.setflags(write=False)
        return [GraphSample(feats[i], shared, int(labels.labels[i])) for i in range(t)]

    def build(i):
        try:
            return GraphSample(feats[i], correlate(feats[i], cfg), int(labels.labels[i]))
        except DataError as exc:
            raise TimestampError(i, exc) from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(build, range(t)))
    return [build(i) for i in range(t)]


# --------------------------------------------------------------------------
# .gds documents
# --------------------------------------------------------------------------

def _num_list(a: np.ndarray) -> str:
    return "[" + ",".join(format(float(v), ".17g") for v in np.ravel(a)) + "]"


def encode_gds(samples: list[GraphSample], meta: dict) -> str:
    """Serialise samples as JSON with 17 significant digits per number."""
    header = json.dumps(meta, sort_keys=True)
    parts = [
        '{"x":' + _num_list(s.x) + ',"a":' + _num_list(s.a) + ',"y":' + str(int(s.y)) + "}"
        for s in samples
    ]
    return '{"metadata":' + header + ',"samples":[\n' + ",\n".join(parts) + "\n]}\n"


def gds_metadata(samples, corr_kind, extractor_kind, n_classes) -> dict:
    n, d = samples[0].x.shape if samples else (0, 0)
    return {
        "corr_kind": corr_kind,
        "extractor_kind": extractor_kind,
        "n": int(n),
        "d": int(d),
        "n_classes": int(n_classes),
        "generator_version": GDS_VERSION,
    }


def decode_gds(text: str) -> tuple[list[GraphSample], dict]:
    try:
        doc = json.loads(text)
        meta = doc["metadata"]
        n, d = int(meta["n"]), int(meta["d"])
        samples = []
        for i, s in enumerate(doc["samples"]):
            x = np.array(s["x"], dtype=np.float64).reshape(n, d)
            a = np.array(s["a"], dtype=np.float64).reshape(n, n)
            samples.append(GraphSample(x, a, int(s["y"])))
    except (ValueError, KeyError, TypeError) as exc:
        raise ContainerError(f"malformed graph dataset: {exc}") from None
    return samples, meta


def write_gds(samples, meta, path) -> None:
    from .io_utils import atomic_write_text

    atomic_write_text(path, encode_gds(samples, meta))


def read_gds(path) -> tuple[list[GraphSample], dict]:
    return decode_gds(Path(path).read_text(encoding="utf-8"))
