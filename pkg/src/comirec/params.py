"""Model configuration, trainable parameters, Adam and binary checkpoints.

Parameters are a plain ``dict[str, np.ndarray]``:

* ``item_emb``  (n_items, d)
* ``pos_emb``   (n_max, d)          self-attentive extractor only
* ``W1``        (d_a, d)            self-attentive extractor only
* ``W2``        (d_a, K)            self-attentive extractor only
* ``W_route``   (n_max, K, d, d)    dynamic-routing extractor only
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

EXTRACTORS = ("DR", "SA")
MAGIC = b"CMRC"
FORMAT_VERSION = 1

Params = dict[str, np.ndarray]


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_items: int
    d: int = 64
    K: int = 4
    r: int = 3
    d_a: int | None = None
    n_max: int = 20
    extractor: str = "SA"
    n_negatives: int = 10
    lr: float = 0.001
    batch_size: int = 128
    seed: int = 0
    exclude_history_negatives: bool = False

    def __post_init__(self):
        self.extractor = self.extractor.upper()
        if self.d_a is None:
            self.d_a = self.d
        if self.extractor not in EXTRACTORS:
            raise ValueError(f"unknown extractor {self.extractor!r}; expected DR or SA")
        for name in ("d", "K", "r", "d_a", "n_max", "n_items", "n_negatives", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {"item_emb": (self.n_items, self.d)}
        if self.extractor == "SA":
            shapes["pos_emb"] = (self.n_max, self.d)
            shapes["W1"] = (self.d_a, self.d)
            shapes["W2"] = (self.d_a, self.K)
        else:
            shapes["W_route"] = (self.n_max, self.K, self.d, self.d)
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in known})


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_parameters(config: ModelConfig, seed: int | None = None, dtype=np.float32) -> Params:
    """Gaussian N(0, 1/d) embeddings, Glorot-uniform projection matrices."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    std = 1.0 / np.sqrt(config.d)
    shapes = config.shapes()
    params: Params = {"item_emb": rng.normal(0.0, std, size=shapes["item_emb"])}
    if config.extractor == "SA":
        params["pos_emb"] = rng.normal(0.0, std, size=shapes["pos_emb"])
        params["W1"] = _glorot(rng, shapes["W1"], config.d, config.d_a)
        params["W2"] = _glorot(rng, shapes["W2"], config.d_a, config.K)
    else:
        params["W_route"] = _glorot(rng, shapes["W_route"], config.d, config.d)
    return {k: v.astype(dtype) for k, v in params.items()}


def check_shapes(params: Params, config: ModelConfig) -> None:
    expected = config.shapes()
    if set(params) != set(expected):
        raise CheckpointError(f"parameter names {sorted(params)} != expected {sorted(expected)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointError(f"{name}: shape {params[name].shape} != expected {shape}")


@dataclass
class AdamState:
    m: Params
    v: Params
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Params) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: Params, grads: Params, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient {name}: shape {g.shape} != {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        params[name] -= step.astype(params[name].dtype, copy=False)


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    params: Params
    config: ModelConfig
    adam: AdamState | None = None
    step: int = 0
    item_category: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, n).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(dims)
    return name, data.astype(np.float32)


def save(path: str | Path, params: Params, config: ModelConfig, *, adam: AdamState | None = None,
         step: int = 0, item_category: np.ndarray | None = None, meta: dict | None = None) -> None:
    """Little-endian: magic, u32 version, u32-length JSON header, u32 tensor count, tensors."""
    check_shapes(params, config)
    header = {"config": config.to_dict(), "step": int(step), "meta": meta or {}}
    tensors = [(k, params[k]) for k in sorted(params)]
    if adam is not None:
        header["adam"] = {"t": adam.t, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}
        tensors += [(f"adam.m/{k}", adam.m[k]) for k in sorted(adam.m)]
        tensors += [(f"adam.v/{k}", adam.v[k]) for k in sorted(adam.v)]
    if item_category is not None:
        cats = np.asarray(item_category)
        if cats.size and np.abs(cats).max() >= 2 ** 24:
            raise CheckpointError("category ids must stay below 2**24 to be stored exactly")
        tensors.append(("item_category", cats.astype(np.float32)))
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(fh, name, arr)


def load(path: str | Path) -> Checkpoint:
    with Path(path).open("rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        header = json.loads(_read_exact(fh, n).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = dict(_read_tensor(fh) for _ in range(count))
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")

    config = ModelConfig.from_dict(header["config"])
    params = {k: v for k, v in tensors.items() if "/" not in k and k != "item_category"}
    check_shapes(params, config)
    adam = None
    if "adam" in header:
        h = header["adam"]
        adam = AdamState(
            {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("adam.m/")},
            {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("adam.v/")},
            t=h["t"], beta1=h["beta1"], beta2=h["beta2"], eps=h["eps"],
        )
        check_shapes(adam.m, config)
        check_shapes(adam.v, config)
    cats = tensors.get("item_category")
    if cats is not None:
        cats = cats.astype(np.int64)
    return Checkpoint(params, config, adam, header.get("step", 0), cats, header.get("meta", {}))
