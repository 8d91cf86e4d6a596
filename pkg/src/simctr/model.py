"""Model configuration, parameter storage, embedding tables and checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .domain import DEFAULT_BOUNDARIES, TimeDeltaBuckets
from .errors import ChecksumError, ConfigError, StoreFormatError, StoreIOError, VersionMismatchError
from .nn import mlp_param_names

SEARCH_MODES = ("hard", "soft", "none")
POOLINGS = ("attention", "avg")


@dataclass(frozen=True)
class SimConfig:
    """Architecture and optimization hyperparameters.

    ``search`` picks the first stage: ``hard`` (category match), ``soft``
    (learned inner product with an auxiliary loss) or ``none`` (the whole long
    sequence goes to the second stage; with ``pooling="avg"`` this is the
    average-pooling baseline).
    """

    n_items: int
    n_categories: int
    dim: int = 4
    time_dim: int = 4
    heads: int = 4
    hidden: tuple[int, ...] = (200, 80)
    search: str = "hard"
    pooling: str = "attention"
    use_time: bool = True
    alpha: float | None = None
    beta: float = 1.0
    k: int = 200
    short_len: int = 10
    aux_max_len: int = 200
    lr0: float = 0.001
    decay: float = 0.9
    batch_size: int = 128
    init_scale: float = 0.1
    boundaries: tuple[float, ...] = field(default=DEFAULT_BOUNDARIES)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "boundaries", tuple(float(b) for b in self.boundaries))
        if self.alpha is None:
            object.__setattr__(self, "alpha", 1.0 if self.search == "soft" else 0.0)
        self.validate()

    def validate(self) -> None:
        if self.search not in SEARCH_MODES:
            raise ConfigError(f"search must be one of {SEARCH_MODES}, got {self.search!r}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.search != "soft" and self.alpha != 0:
            raise ConfigError("alpha must be 0 unless the first stage is soft-search")
        if min(self.n_items, self.n_categories) < 1:
            raise ConfigError("vocabulary sizes must be positive")
        if min(self.dim, self.time_dim, self.heads, self.k, self.aux_max_len, self.batch_size) < 1:
            raise ConfigError("dimensions, heads, k, aux_max_len and batch_size must be >= 1")
        if self.short_len < 0:
            raise ConfigError("short_len must be >= 0")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be non-negative")
        if not (self.lr0 > 0 and 0 < self.decay <= 1):
            raise ConfigError("need lr0 > 0 and 0 < decay <= 1")
        TimeDeltaBuckets(self.boundaries)

    @property
    def mode(self) -> str:
        return self.search

    @property
    def z_dim(self) -> int:
        return self.dim + self.time_dim

    @property
    def n_buckets(self) -> int:
        return len(self.boundaries) + 1

    @property
    def buckets(self) -> TimeDeltaBuckets:
        return TimeDeltaBuckets(self.boundaries)

    @property
    def long_dim(self) -> int:
        return self.heads * self.z_dim if self.pooling == "attention" else self.z_dim

    @property
    def esu_input_dim(self) -> int:
        # long-term vector, short-term sum pool, candidate (item ++ category)
        return self.long_dim + self.dim + 2 * self.dim

    @property
    def n_mlp_layers(self) -> int:
        return len(self.hidden) + 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        d["boundaries"] = list(self.boundaries)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


class EmbeddingTable:
    """View over a parameter matrix; row 0 is the out-of-vocabulary row.

    Real ids ``0..n-1`` live at rows ``1..n``. The table never copies the
    weights, so two tables built over the same array alias each other.
    """

    def __init__(self, weights: np.ndarray, oov: bool = True):
        self.weights = weights
        self.oov = oov

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def rows(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if not self.oov:
            return ids
        n = self.weights.shape[0] - 1
        return np.where((ids >= 0) & (ids < n), ids + 1, 0)

    def lookup(self, ids) -> np.ndarray:
        return self.weights[self.rows(ids)]


def _mlp_shapes(prefix: str, in_dim: int, hidden: tuple[int, ...]) -> dict:
    dims = [in_dim, *hidden, 2]
    shapes = {}
    for i in range(len(dims) - 1):
        shapes[f"{prefix}.W{i}"] = (dims[i], dims[i + 1])
        shapes[f"{prefix}.b{i}"] = (dims[i + 1],)
    return shapes


def param_shapes(cfg: SimConfig) -> dict[str, tuple[int, ...]]:
    d, dz = cfg.dim, cfg.z_dim
    shapes = {
        "item_emb": (cfg.n_items + 1, d),
        "cat_emb": (cfg.n_categories + 1, d),
        "time_emb": (cfg.n_buckets, cfg.time_dim),
        "nohist_z": (dz,),
        "nohist_short": (d,),
        "esu.Wb": (cfg.heads, dz, dz),
        "esu.Wa": (cfg.heads, dz, 2 * d),
    }
    shapes.update(_mlp_shapes("mlp", cfg.esu_input_dim, cfg.hidden))
    if cfg.search == "soft":
        shapes["gsu.Wb"] = (d, d)
        shapes["gsu.Wa"] = (d, d)
        shapes.update(_mlp_shapes("aux", 2 * d, cfg.hidden))
    return shapes


class SimModel:
    """All learnable parameters plus the config that shapes them.

    ``params`` maps names to float64 arrays. Optimizers must update these
    arrays in place: GSU and ESU read the same embedding arrays.
    """

    def __init__(self, config: SimConfig, params: dict[str, np.ndarray]):
        self.config = config
        expected = param_shapes(config)
        if set(params) != set(expected):
            raise ConfigError(
                f"parameter names do not match config: missing {sorted(set(expected) - set(params))}, "
                f"extra {sorted(set(params) - set(expected))}"
            )
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ConfigError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.params = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in params.items()}

    @property
    def mode(self) -> str:
        return self.config.search

    @property
    def item_table(self) -> EmbeddingTable:
        return EmbeddingTable(self.params["item_emb"])

    @property
    def cat_table(self) -> EmbeddingTable:
        return EmbeddingTable(self.params["cat_emb"])

    @property
    def time_table(self) -> EmbeddingTable:
        return EmbeddingTable(self.params["time_emb"], oov=False)

    def gsu_tables(self) -> tuple[EmbeddingTable, EmbeddingTable]:
        return self.item_table, self.cat_table

    def esu_tables(self) -> tuple[EmbeddingTable, EmbeddingTable]:
        return self.item_table, self.cat_table

    def behavior_vectors(self, items, cats) -> np.ndarray:
        """Per-behavior embedding: item vector plus category vector."""
        return self.item_table.lookup(items) + self.cat_table.lookup(cats)

    def candidate_vector(self, item_id, category_id) -> np.ndarray:
        """Candidate embedding in behavior space (used by the first stage)."""
        return self.behavior_vectors(item_id, category_id)

    def candidate_pair(self, item_id, category_id) -> np.ndarray:
        """Candidate as concat(item vector, category vector) (second stage)."""
        return np.concatenate(
            [self.item_table.lookup(item_id), self.cat_table.lookup(category_id)], axis=-1
        )

    def copy(self) -> "SimModel":
        return SimModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def snap_to_float32(self) -> None:
        """Round every parameter to the nearest float32 (the checkpoint precision)."""
        for v in self.params.values():
            v[...] = v.astype(np.float32)

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def init_model(config: SimConfig, seed: int = 0) -> SimModel:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in sorted(param_shapes(config).items()):
        if name in ("item_emb", "cat_emb", "time_emb", "nohist_z", "nohist_short"):
            v = rng.normal(0.0, config.init_scale, shape)
        elif name.startswith(("mlp.", "aux.")):
            if name.rsplit(".", 1)[1].startswith("b"):
                v = np.zeros(shape)
            else:
                v = rng.normal(0.0, np.sqrt(2.0 / shape[0]), shape)
        elif name in ("gsu.Wb", "gsu.Wa"):
            v = np.eye(shape[0]) + rng.normal(0.0, 0.1, shape)
        else:  # attention projections
            v = rng.normal(0.0, 1.0 / np.sqrt(shape[-1]), shape)
        params[name] = v
    model = SimModel(config, params)
    model.snap_to_float32()
    return model


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CKPT_MAGIC = b"SIMCKPT1"
CKPT_VERSION = 1


def _digest(data) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def checkpoint_bytes(model: SimModel, extra: dict | None = None) -> bytes:
    hyper = {"config": model.config.to_dict()}
    if extra:
        hyper["extra"] = extra
    hyper_bytes = json.dumps(hyper, sort_keys=True, separators=(",", ":")).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(hyper_bytes)), hyper_bytes]
    names = sorted(model.params)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        arr = model.params[name]
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + _digest(body)


def save_checkpoint(model: SimModel, path, extra: dict | None = None) -> None:
    data = checkpoint_bytes(model, extra)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise StoreIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, with_extra: bool = False):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise StoreIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:8] != CKPT_MAGIC:
        raise StoreFormatError(f"{path}: not a checkpoint file")
    if len(data) < 16 + 8:
        raise ChecksumError(f"{path}: truncated checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    body, digest = data[:-8], data[-8:]
    if _digest(body) != digest:
        raise ChecksumError(f"{path}: checksum mismatch")
    off = 16
    hyper = json.loads(body[off:off + hlen])
    off += hlen
    (n,) = struct.unpack_from("<I", body, off)
    off += 4
    params = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 4 * count
    model = SimModel(SimConfig.from_dict(hyper["config"]), params)
    if with_extra:
        return model, hyper.get("extra", {})
    return model
