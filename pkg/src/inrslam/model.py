"""Scene model: encoding + MLP decoders under the three coupling structures."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterBlock
from .encodings import AABB, Encoding, PositionalEncoding, make_encoding
from .octree import OctreeSDFPrior

STRUCTURES = ("coupled-base", "coupled", "decoupled")
MODEL_ENCODINGS = ("mlp", "dense", "hash", "triplane", "factor", "hybrid", "explicit-hybrid")

CHECKPOINT_MAGIC = b"INRS"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    encoding: str = "dense"
    structure: str = "coupled-base"
    aabb_lo: tuple[float, float, float] = (-2.0, -2.0, -2.0)
    aabb_hi: tuple[float, float, float] = (2.0, 2.0, 2.0)
    cells: tuple[float, float] = (0.24, 0.02)
    feature_dim: int = 2
    hidden: int = 32
    hidden_layers: int = 2
    pe_frequencies: int | None = None
    h_dim: int = 15
    truncation: float = 0.1
    log2_hash: int = 13
    octree_leaf: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if self.encoding not in MODEL_ENCODINGS:
            raise ValueError(f"unknown encoding {self.encoding!r}")
        if self.structure not in STRUCTURES:
            raise ValueError(f"unknown structure {self.structure!r}")
        self.aabb_lo = tuple(float(x) for x in self.aabb_lo)
        self.aabb_hi = tuple(float(x) for x in self.aabb_hi)
        self.cells = tuple(float(c) for c in self.cells)

    @property
    def aabb(self) -> AABB:
        return AABB(self.aabb_lo, self.aabb_hi)

    @property
    def frequencies(self) -> int:
        if self.pe_frequencies is not None:
            return self.pe_frequencies
        return 6 if self.encoding == "mlp" else 2


class MLPHead:
    """``in -> hidden -> ... -> out`` with ReLU between layers and identity output."""

    def __init__(self, name: str, in_dim: int, out_dim: int, hidden: int = 32, layers: int = 2, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        dims = [in_dim] + [hidden] * layers + [out_dim]
        self.name = name
        self.weights: list[ParameterBlock] = []
        self.biases: list[ParameterBlock] = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / np.sqrt(max(a, 1))
            self.weights.append(ParameterBlock(f"{name}.w{i}", rng.uniform(-bound, bound, (a, b))))
            self.biases.append(ParameterBlock(f"{name}.b{i}", rng.uniform(-bound, bound, b)))

    @property
    def blocks(self) -> list[ParameterBlock]:
        return [b for pair in zip(self.weights, self.biases) for b in pair]

    @property
    def out_dim(self) -> int:
        return self.biases[-1].values.shape[0]

    def __call__(self, x):
        return ad.mlp(x, [ad.param(w) for w in self.weights], [ad.param(b) for b in self.biases])

    def reference(self, x):
        """Unfused layer-by-layer evaluation (used to cross-check :func:`autodiff.mlp`)."""
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.linear(x, ad.param(w), ad.param(b))
            if i < n - 1:
                x = ad.relu(x)
        return x

    def zero_(self) -> None:
        for b in self.blocks:
            b.values[...] = 0.0


@dataclass
class DecoderOutput:
    sdf: object  # normalised SDF, (n,)
    color: object  # (n, 3) in [0, 1]
    h: object | None = None


class SceneModel:
    def __init__(self, config: ModelConfig):
        self.config = cfg = config
        rng = np.random.default_rng(cfg.seed)
        self.aabb = cfg.aabb
        self.truncation = cfg.truncation
        self.pe = PositionalEncoding(cfg.frequencies, include_input=True)
        self.encoding: Encoding = make_encoding(cfg.encoding, self.aabb, cfg.cells, cfg.feature_dim, rng,
                                                prefix="geo", log2_hash=cfg.log2_hash)
        self.color_encoding: Encoding | None = None
        if cfg.structure == "decoupled" and cfg.encoding != "mlp":
            self.color_encoding = make_encoding(cfg.encoding, self.aabb, cfg.cells, cfg.feature_dim, rng,
                                                prefix="app", log2_hash=cfg.log2_hash)
        feat = self.encoding.out_dim
        geo_in = feat + self.pe.out_dim
        self.shared = cfg.encoding == "mlp" and cfg.structure == "coupled-base"
        if self.shared:
            # a single network predicts SDF and colour jointly
            self.geo_head = MLPHead("geo_head", geo_in, 4, cfg.hidden, cfg.hidden_layers, rng)
            self.color_head = None
        else:
            geo_out = 1 + (cfg.h_dim if cfg.structure == "coupled" else 0)
            self.geo_head = MLPHead("geo_head", geo_in, geo_out, cfg.hidden, cfg.hidden_layers, rng)
            if cfg.structure == "decoupled":
                col_in = (self.color_encoding.out_dim if self.color_encoding else 0) + self.pe.out_dim
            elif cfg.structure == "coupled":
                col_in = geo_in + cfg.h_dim
            else:
                col_in = geo_in
            self.color_head = MLPHead("color_head", col_in, 3, cfg.hidden, cfg.hidden_layers, rng)
        self.octree: OctreeSDFPrior | None = None
        if cfg.encoding == "explicit-hybrid":
            self.octree = OctreeSDFPrior(self.aabb, cfg.octree_leaf, cfg.truncation)
            # the residual starts at exactly zero; hidden layers stay random so gradients flow
            self.geo_head.weights[-1].values[:, 0] = 0.0
            self.geo_head.biases[-1].values[0] = 0.0

    # -- parameters ----------------------------------------------------------
    @property
    def geometry_blocks(self) -> list[ParameterBlock]:
        return self.encoding.blocks + self.geo_head.blocks

    @property
    def color_blocks(self) -> list[ParameterBlock]:
        enc = self.color_encoding.blocks if self.color_encoding else []
        return enc + (self.color_head.blocks if self.color_head else [])

    @property
    def feature_blocks(self) -> list[ParameterBlock]:
        return self.encoding.blocks + (self.color_encoding.blocks if self.color_encoding else [])

    @property
    def mlp_blocks(self) -> list[ParameterBlock]:
        return self.geo_head.blocks + (self.color_head.blocks if self.color_head else [])

    @property
    def blocks(self) -> list[ParameterBlock]:
        return self.feature_blocks + self.mlp_blocks

    def state_dict(self) -> dict[str, np.ndarray]:
        return {b.name: b.values.copy() for b in self.blocks}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for b in self.blocks:
            b.values[...] = state[b.name]

    # -- evaluation ----------------------------------------------------------
    def eval_points(self, points) -> DecoderOutput:
        """Decode normalised SDF and colour at world points inside the AABB."""
        n = len(ad.value(points))
        if n == 0:
            return DecoderOutput(np.zeros(0), np.zeros((0, 3)), None)
        feat = self.encoding(points)
        gamma = self.pe(self.aabb.normalize(points))
        geo_in = ad.concat([feat, gamma], axis=-1) if self.encoding.out_dim else gamma
        geo = self.geo_head(geo_in)
        if self.shared:
            sdf = ad.reshape(ad.index(geo, (slice(None), 0)), (n,))
            color = ad.sigmoid(ad.index(geo, (slice(None), slice(1, 4))))
            return DecoderOutput(sdf, color, None)
        sdf = ad.index(geo, (slice(None), 0))
        if self.octree is not None:
            sdf = ad.add(ad.div(self.octree.query_node(points), self.truncation), sdf)
        h = None
        st = self.config.structure
        if st == "coupled":
            h = ad.index(geo, (slice(None), slice(1, None)))
            col_in = ad.concat([geo_in, h], axis=-1)
        elif st == "decoupled":
            if self.color_encoding is not None:
                col_in = ad.concat([self.color_encoding(points), gamma], axis=-1)
            else:
                col_in = gamma
        else:
            col_in = geo_in
        color = ad.sigmoid(self.color_head(col_in))
        return DecoderOutput(sdf, color, h)

    def eval_explicit_hybrid(self, points) -> DecoderOutput:
        """Octree prior (normalised) plus the learned residual from the geometry head."""
        if self.octree is None:
            raise ValueError("model has no octree prior")
        return self.eval_points(points)

    def sdf_metric(self, points: np.ndarray, chunk: int = 200_000) -> np.ndarray:
        """Metric SDF at points (no tape), evaluated in chunks."""
        out = np.empty(len(points))
        for s in range(0, len(points), chunk):
            out[s:s + chunk] = ad.value(self.eval_points(points[s:s + chunk]).sdf) * self.truncation
        return out


def build_model(config: ModelConfig) -> SceneModel:
    return SceneModel(config)


def parameter_report(model: SceneModel) -> dict:
    rows = [{"name": b.name, "count": int(b.size), "bytes": int(b.values.nbytes)} for b in model.blocks]
    return {
        "blocks": rows,
        "total_count": int(sum(r["count"] for r in rows)),
        "total_bytes": int(sum(r["bytes"] for r in rows)),
    }


def mlp_param_count(in_dim: int, out_dim: int, hidden: int = 32, layers: int = 2) -> int:
    dims = [in_dim] + [hidden] * layers + [out_dim]
    return int(sum(a * b + b for a, b in zip(dims[:-1], dims[1:])))


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def write_blocks(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def read_blocks(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    try:
        return _parse_blocks(path, data)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc


def _parse_blocks(path, data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    version, mlen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    meta = json.loads(data[off:off + mlen])
    off += mlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, "<f8", size, off).reshape(shape).copy()
        off += 8 * size
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return meta, arrays


def save_checkpoint(path, model: SceneModel, extra: dict[str, np.ndarray] | None = None) -> None:
    arrays = model.state_dict()
    if model.octree is not None:
        arrays.update({f"octree.{k}": v for k, v in model.octree.state_arrays().items()})
    arrays.update(extra or {})
    write_blocks(path, {"model": asdict(model.config)}, arrays)


def load_checkpoint(path) -> tuple[SceneModel, dict[str, np.ndarray]]:
    """Rebuild the model; returns it with any extra (non-model) arrays."""
    meta, arrays = read_blocks(path)
    cfg = meta["model"]
    cfg["cells"] = tuple(cfg["cells"])
    model = SceneModel(ModelConfig(**cfg))
    model.load_state_dict(arrays)
    names = {b.name for b in model.blocks}
    if model.octree is not None:
        model.octree.load_state_arrays({k[7:]: v for k, v in arrays.items() if k.startswith("octree.")})
    extra = {k: v for k, v in arrays.items() if k not in names and not k.startswith("octree.")}
    return model, extra
