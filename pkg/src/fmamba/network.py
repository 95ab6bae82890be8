"""The full dual-branch U-shaped fusion network, its parameter store and file format."""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional

import numpy as np

from . import numerics as nx
from .blocks import _sub, dvss_forward, init_dvss, init_linear, init_ln, layer_norm
from .fusion import ModalPair, dffm_forward, init_dffm
from .init import Params, as_params, trunc_normal
from .ssm import ScanLayout
from .tape import NonFiniteError, Tensor, as_tensor

BRANCHES = ("a", "b")
MAGIC = b"FMAM"
FORMAT_VERSION = 1


class StateFileError(ValueError):
    """Unreadable or incompatible model-state file."""


@dataclass(frozen=True)
class ModelConfig:
    base_dim: int = 96
    depths: tuple[int, ...] = (2, 2, 9, 2)
    state_size: int = 16
    patch_size: int = 4
    levels: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        if len(self.depths) != self.levels or self.levels != 4:
            raise ValueError(f"depths must list 4 levels, got {self.depths}")
        if any(d < 1 for d in self.depths):
            raise ValueError("every level needs at least one block")
        if self.base_dim < 2 or self.base_dim % 2:
            raise ValueError(f"base_dim must be a positive even number, got {self.base_dim}")
        if self.state_size < 1:
            raise ValueError("state_size must be >= 1")
        if self.patch_size != 4:
            raise ValueError("only 4x4 patches are supported")

    @property
    def dims(self) -> list[int]:
        return [self.base_dim * 2 ** i for i in range(self.levels)]

    @property
    def stride(self) -> int:
        return self.patch_size * 2 ** (self.levels - 1)

    @classmethod
    def micro(cls, seed: int = 0) -> "ModelConfig":
        return cls(base_dim=8, depths=(1, 1, 1, 1), state_size=2, seed=seed)

    @classmethod
    def toy(cls, seed: int = 0) -> "ModelConfig":
        """Smallest config that reliably halves the loss in 200 Adam steps."""
        return cls(base_dim=16, depths=(1, 1, 1, 1), state_size=4, seed=seed)


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def view(self) -> Params:
        return Params(self.params)


def model_init(cfg: ModelConfig) -> ModelState:
    """Deterministic initialisation from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    dims = cfg.dims
    params: dict[str, np.ndarray] = {}
    p2 = cfg.patch_size ** 2
    for br in BRANCHES:
        params.update(_sub(f"embed.{br}", init_linear(rng, p2, dims[0])))
        for lvl, (dim, depth) in enumerate(zip(dims, cfg.depths)):
            for j in range(depth):
                params.update(_sub(f"enc{lvl}.{br}.dvss{j}", init_dvss(rng, dim, cfg.state_size)))
            if lvl + 1 < cfg.levels:
                params.update(_sub(f"merge{lvl}.{br}", init_linear(rng, 4 * dim, 2 * dim)))
    for lvl, dim in enumerate(dims):
        params.update(_sub(f"dffm{lvl}", init_dffm(rng, dim, cfg.state_size)))
    for lvl in reversed(range(cfg.levels)):
        dim = dims[lvl]
        if lvl + 1 < cfg.levels:
            params.update(_sub(f"expand{lvl}", init_linear(rng, 2 * dim, 4 * dim)))
        for j in range(cfg.depths[lvl]):
            params.update(_sub(f"dec{lvl}.dvss{j}", init_dvss(rng, dim, cfg.state_size)))
    c = dims[0]
    params.update(_sub("head.expand", init_linear(rng, c, cfg.patch_size ** 2 * c)))
    params.update(_sub("head.norm", init_ln(c)))
    params.update(_sub("head.proj", init_linear(rng, c, 1)))
    return ModelState(cfg, params)


def expected_names(cfg: ModelConfig) -> list[str]:
    return list(model_init_shapes(cfg))


def model_init_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in model_init(cfg).params.items()}


def _checked(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(where)
    return t


ShapeHook = Callable[[str, tuple[int, ...]], None]


def forward_fuse(state, I1, I2, *, config: Optional[ModelConfig] = None,
                 trace: Optional[ShapeHook] = None) -> Tensor:
    """Fuse two ``[H, W]`` images in [0, 1] into one ``[H, W]`` image in (0, 1).

    ``state`` is a :class:`ModelState` or, together with ``config``, any
    mapping of parameter names to arrays or tensors.
    """
    if isinstance(state, ModelState):
        cfg, p = state.config, state.view()
    else:
        if config is None:
            raise ValueError("config is required when passing a raw parameter mapping")
        cfg, p = config, as_params(state)
    I1, I2 = as_tensor(I1), as_tensor(I2)
    if I1.ndim != 2 or I1.shape != I2.shape:
        raise ValueError(f"need two equal [H, W] images, got {I1.shape} and {I2.shape}")
    H, W = I1.shape
    if H % cfg.stride or W % cfg.stride:
        raise ValueError(f"image extents {H}x{W} must be divisible by {cfg.stride}")
    emit = trace or (lambda name, shape: None)

    layouts: dict[tuple[int, int], ScanLayout] = {}

    def layout_for(t: Tensor) -> ScanLayout:
        hw = t.shape[:2]
        if hw not in layouts:
            layouts[hw] = ScanLayout.build(*hw, allow_odd=True)
        return layouts[hw]

    def stack(x: Tensor, prefix: str, depth: int) -> Tensor:
        for j in range(depth):
            x = _checked(dvss_forward(x, p.sub(f"{prefix}.dvss{j}"), layout_for(x)), f"{prefix}.dvss{j}")
        return x

    levels: dict[str, list[Tensor]] = {}
    for br, img in zip(BRANCHES, (I1, I2)):
        with nx.flop_scope(f"encoder.{br}"):
            x = nx.patch_embed(img, p[f"embed.{br}.weight"], p[f"embed.{br}.bias"], cfg.patch_size)
            emit(f"embed.{br}", x.shape)
            feats = []
            for lvl in range(cfg.levels):
                x = stack(x, f"enc{lvl}.{br}", cfg.depths[lvl])
                emit(f"enc{lvl}.{br}", x.shape)
                feats.append(x)
                if lvl + 1 < cfg.levels:
                    x = _checked(nx.patch_merge(x, p[f"merge{lvl}.{br}.weight"], p[f"merge{lvl}.{br}.bias"]),
                                 f"merge{lvl}.{br}")
            levels[br] = feats

    fused = []
    with nx.flop_scope("fusion"):
        for lvl in range(cfg.levels):
            pair = ModalPair(levels["a"][lvl], levels["b"][lvl])
            X = _checked(dffm_forward(pair, p.sub(f"dffm{lvl}"), layout_for(pair.F1)), f"dffm{lvl}")
            emit(f"dffm{lvl}", X.shape)
            fused.append(X)

    with nx.flop_scope("decoder"):
        d = fused[-1]
        for lvl in reversed(range(cfg.levels)):
            if lvl + 1 < cfg.levels:
                d = nx.patch_expand(d, p[f"expand{lvl}.weight"], p[f"expand{lvl}.bias"])
                d = _checked(nx.add(d, fused[lvl]), f"expand{lvl}")
            d = stack(d, f"dec{lvl}", cfg.depths[lvl])
            emit(f"dec{lvl}", d.shape)

    with nx.flop_scope("head"):
        d = nx.final_expand(d, p["head.expand.weight"], p["head.expand.bias"], cfg.patch_size)
        d = layer_norm(d, p.sub("head.norm"))
        emit("head.expand", d.shape)
        logits = nx.linear(d, p["head.proj.weight"], p["head.proj.bias"])
        out = _checked(nx.reshape(nx.sigmoid(logits), (H, W)), "head")
        emit("output", out.shape)
    return out


def fuse_images(state: ModelState, I1, I2) -> np.ndarray:
    return forward_fuse(state, I1, I2).data


# --------------------------------------------------------------------------- audit & cost

def shape_audit(state: ModelState, H: int, W: int) -> tuple[list[tuple[str, tuple[int, ...]]], nx.FlopCounter]:
    """Run one forward pass on flat images, returning the stage shape table and flop count."""
    rows: list[tuple[str, tuple[int, ...]]] = []
    counter = nx.FlopCounter()
    img = np.full((H, W), 0.5)
    with nx.count_flops_into(counter):
        forward_fuse(state, img, img, trace=lambda n, s: rows.append((n, tuple(s))))
    return rows, counter


def format_shape_table(rows) -> str:
    width = max(len(n) for n, _ in rows)
    return "\n".join(f"{n:<{width}}  {'x'.join(map(str, s))}" for n, s in rows)


def count_flops(cfg: ModelConfig, H: int, W: int) -> dict[str, int]:
    """Per-stage and total flop count (multiply-accumulates x2) for an ``H x W`` pair."""
    _, counter = shape_audit(model_init(cfg), H, W)
    out = dict(counter.by_scope)
    out.update({f"kind.{k}": v for k, v in counter.by_kind.items()})
    out["total"] = counter.total
    return out


# --------------------------------------------------------------------------- persistence

_CFG = struct.Struct("<I4IIIIQ")


def save_state(state: ModelState, path) -> None:
    """Little-endian: magic, version, config record, name table, float64 payloads."""
    cfg = state.config
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += _CFG.pack(cfg.base_dim, *cfg.depths, cfg.state_size, cfg.patch_size, cfg.levels,
                     cfg.seed & 0xFFFFFFFFFFFFFFFF)
    out += struct.pack("<I", len(state.params))
    for name, value in state.params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", value.ndim)
        out += struct.pack(f"<{value.ndim}I", *value.shape)
    for value in state.params.values():
        out += np.ascontiguousarray(value, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise StateFileError(f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_state(path, expect: Optional[ModelConfig] = None) -> ModelState:
    path = str(path)
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise StateFileError(f"{path}: bad magic, not a model state file")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise StateFileError(f"{path}: unsupported format version {version}")
    base, d0, d1, d2, d3, n, patch, levels, seed = r.unpack(_CFG.format)
    try:
        cfg = ModelConfig(base, (d0, d1, d2, d3), n, patch, levels, seed)
    except ValueError as exc:
        raise StateFileError(f"{path}: invalid config record: {exc}") from exc
    if expect is not None and asdict(expect) | {"seed": 0} != asdict(cfg) | {"seed": 0}:
        raise StateFileError(f"{path}: stored config {cfg} does not match expected {expect}")
    (count,) = r.unpack("<I")
    table = []
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        table.append((name, tuple(shape)))
    params = {}
    for name, shape in table:
        size = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(r.data):
        raise StateFileError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    expected = model_init_shapes(cfg)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise StateFileError(f"{path}: parameter names do not match config; "
                             f"missing={missing} extra={extra}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise StateFileError(f"{path}: {name} has shape {params[name].shape}, expected {shape}")
    return ModelState(cfg, {k: params[k] for k in expected})
