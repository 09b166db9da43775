"""Modular model: named parameter blocks with roles, a desk-scale network
(frozen GELU backbone, a pair of parallel bottleneck adapters per layer,
one softmax head per task) and wire sizes decoupled from parameter counts.

Every block stores its parameters as one flat float64 vector. Layouts:

* backbone: for each layer ``W (w x in), b (w)``
* adapter[l]: ``down1 (h x w), bd1 (h), up1 (w x h), bu1 (w)`` then the
  same four arrays for the second adapter
* task_head[t]: ``W (C x w), b (C)``
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Callable, Iterable

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DataError, ShapeError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Role(str, enum.Enum):
    ENCODER = "encoder"
    BACKBONE = "backbone"
    ADAPTER = "adapter"
    TASK_HEAD = "task_head"
    PROMPT = "prompt"
    EXPERT = "expert"


@dataclass(frozen=True, order=True)
class ModuleKind:
    role: Role
    index: int | None = None

    def __post_init__(self):
        if self.index is not None and self.index < 0:
            raise ValueError("module index must be non-negative")

    def __str__(self):
        return self.role.value if self.index is None else f"{self.role.value}[{self.index}]"

    @classmethod
    def parse(cls, text: str) -> "ModuleKind":
        name, _, rest = text.partition("[")
        index = int(rest.rstrip("]")) if rest else None
        return cls(Role(name), index)


BACKBONE = ModuleKind(Role.BACKBONE)


def adapter(layer: int) -> ModuleKind:
    return ModuleKind(Role.ADAPTER, layer)


def task_head(task: int) -> ModuleKind:
    return ModuleKind(Role.TASK_HEAD, task)


@dataclass(frozen=True)
class Placeholder:
    """Size-only block (prompt, expert, encoder) used for cost simulation."""

    kind: str
    wire_bytes: int
    trainable: bool = True


@dataclass(frozen=True)
class ModelSpec:
    d: int = 32
    L: int = 2
    w: int = 64
    h: int = 8
    C: int = 10
    num_tasks: int = 2
    nominal_bottleneck: int = 256
    trainable_wire_bytes: int = 6_000_000
    frozen_wire_bytes: int = 328_000_000
    head_wire_bytes: int = 1_000_000
    placeholders: tuple[Placeholder, ...] = ()

    def validate(self, path="model"):
        for name in ("d", "L", "w", "h", "C", "num_tasks", "nominal_bottleneck"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", f"{path}.{name}")
        for name in ("trainable_wire_bytes", "frozen_wire_bytes", "head_wire_bytes"):
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", f"{path}.{name}")
        kinds = set()
        for i, p in enumerate(self.placeholders):
            try:
                kind = ModuleKind.parse(p.kind)
            except ValueError as exc:
                raise ConfigError(str(exc), f"{path}.placeholders[{i}].kind") from None
            if kind.role not in (Role.PROMPT, Role.EXPERT, Role.ENCODER):
                raise ConfigError("placeholders must be prompt/expert/encoder blocks",
                                  f"{path}.placeholders[{i}].kind")
            if kind in kinds:
                raise ConfigError(f"duplicate block {kind}", f"{path}.placeholders[{i}].kind")
            kinds.add(kind)
            if p.wire_bytes < 0:
                raise ConfigError("must be >= 0", f"{path}.placeholders[{i}].wire_bytes")
        if self._adapter_share() < 0:
            raise ConfigError(
                "task heads and trainable placeholders exceed the trainable payload",
                f"{path}.trainable_wire_bytes",
            )

    def _adapter_share(self) -> int:
        carved = self.num_tasks * self.head_wire_bytes
        carved += sum(p.wire_bytes for p in self.placeholders if p.trainable)
        return self.trainable_wire_bytes - carved

    @property
    def backbone_size(self) -> int:
        return self.w * (self.d + 1) + (self.L - 1) * self.w * (self.w + 1)

    @property
    def adapter_size(self) -> int:
        return 2 * (2 * self.w * self.h + self.h + self.w)

    @property
    def head_size(self) -> int:
        return self.C * (self.w + 1)


@dataclass
class ParamBlock:
    kind: ModuleKind
    values: np.ndarray
    trainable: bool
    wire_bytes: int


@dataclass
class ModularModel:
    blocks: list[ParamBlock]
    spec: ModelSpec

    def block(self, kind: ModuleKind) -> ParamBlock:
        for b in self.blocks:
            if b.kind == kind:
                return b
        raise ShapeError(f"model has no block {kind}")

    def kinds(self, select: Callable[[ParamBlock], bool] | None = None) -> list[ModuleKind]:
        return [b.kind for b in self.blocks if select is None or select(b)]

    def copy(self) -> "ModularModel":
        """Copy trainable values; frozen arrays are read-only and shared."""
        blocks = [
            replace(b, values=b.values.copy()) if b.trainable else b for b in self.blocks
        ]
        return ModularModel(blocks, self.spec)


# selection predicates
def trainable(block: ParamBlock) -> bool:
    return block.trainable


def frozen(block: ParamBlock) -> bool:
    return not block.trainable


def everything(block: ParamBlock) -> bool:
    return True


def nothing(block: ParamBlock) -> bool:
    return False


def of_kinds(kinds: Iterable[ModuleKind]) -> Callable[[ParamBlock], bool]:
    wanted = frozenset(kinds)
    return lambda b: b.kind in wanted


def _split_evenly(total: int, parts: int) -> list[int]:
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def init_model(spec: ModelSpec, seed: int) -> ModularModel:
    spec.validate()
    rng = np.random.default_rng(seed)
    d, L, w, h, C = spec.d, spec.L, spec.w, spec.h, spec.C

    parts = []
    fan_in = d
    for _ in range(L):
        parts.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=w * fan_in))
        parts.append(rng.normal(0.0, 0.1, size=w))
        fan_in = w
    backbone = np.concatenate(parts)
    backbone.flags.writeable = False
    blocks = [ParamBlock(BACKBONE, backbone, False, spec.frozen_wire_bytes)]

    adapter_bytes = _split_evenly(spec._adapter_share(), L)
    for layer in range(L):
        pair = []
        for _ in range(2):
            pair.append(rng.normal(0.0, 1.0 / np.sqrt(w), size=h * w))  # down
            pair.append(np.zeros(h))
            pair.append(np.zeros(w * h))  # up: zero so the adapter starts as identity
            pair.append(np.zeros(w))
        blocks.append(ParamBlock(adapter(layer), np.concatenate(pair), True, adapter_bytes[layer]))

    for t in range(spec.num_tasks):
        head = np.concatenate([rng.normal(0.0, 0.1, size=C * w), np.zeros(C)])
        blocks.append(ParamBlock(task_head(t), head, True, spec.head_wire_bytes))

    for p in spec.placeholders:
        values = np.zeros(0)
        if not p.trainable:
            values.flags.writeable = False
        blocks.append(ParamBlock(ModuleKind.parse(p.kind), values, p.trainable, p.wire_bytes))
    return ModularModel(blocks, spec)


# ---------------------------------------------------------------------------
# forward / backward

def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _backbone_layers(model: ModularModel):
    s = model.spec
    v = model.block(BACKBONE).values
    layers, off, fan_in = [], 0, s.d
    for _ in range(s.L):
        W = v[off:off + s.w * fan_in].reshape(s.w, fan_in)
        off += s.w * fan_in
        b = v[off:off + s.w]
        off += s.w
        layers.append((W, b))
        fan_in = s.w
    return layers


def _adapter_views(values: np.ndarray, w: int, h: int):
    """Split an adapter block into two (down, bd, up, bu) tuples of views."""
    out, off = [], 0
    for _ in range(2):
        down = values[off:off + h * w].reshape(h, w)
        off += h * w
        bd = values[off:off + h]
        off += h
        up = values[off:off + w * h].reshape(w, h)
        off += w * h
        bu = values[off:off + w]
        off += w
        out.append((down, bd, up, bu))
    return out


def _head_views(values: np.ndarray, w: int, C: int):
    return values[:C * w].reshape(C, w), values[C * w:]


def _check_inputs(model: ModularModel, inputs: np.ndarray, task: int) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.spec.d:
        raise ShapeError(f"expected inputs of shape (n, {model.spec.d}), got {np.shape(inputs)}")
    if not 0 <= task < model.spec.num_tasks:
        raise ShapeError(f"task {task} out of range [0, {model.spec.num_tasks})")
    return x


def _forward(model: ModularModel, x: np.ndarray, task: int, keep: bool):
    s = model.spec
    cache = []
    for layer, (W, b) in enumerate(_backbone_layers(model)):
        z = x @ W.T + b
        a = gelu(z)
        out = a.copy()
        adapters = []
        for down, bd, up, bu in _adapter_views(model.block(adapter(layer)).values, s.w, s.h):
            u = a @ down.T + bd
            g = gelu(u)
            out += g @ up.T + bu
            adapters.append((u, g))
        if keep:
            cache.append((z, a, adapters))
        x = out
    Wh, bh = _head_views(model.block(task_head(task)).values, s.w, s.C)
    logits = x @ Wh.T + bh
    logits -= logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(logits).sum(axis=1, keepdims=True))
    log_p = logits - log_norm
    return np.exp(log_p), x, cache, log_p


def forward(model: ModularModel, inputs, task: int = 0) -> np.ndarray:
    """Class probabilities, one row per input."""
    x = _check_inputs(model, inputs, task)
    return _forward(model, x, task, keep=False)[0]


def predict(model: ModularModel, inputs, task: int = 0) -> np.ndarray:
    return forward(model, inputs, task).argmax(axis=1)


def accuracy(model: ModularModel, inputs, labels, task: int = 0) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(predict(model, inputs, task) == labels))


def loss_and_grads(model: ModularModel, inputs, labels, task: int = 0):
    """Mean cross-entropy and its exact gradient for every trainable block.

    Returns ``(loss, grads)`` with ``grads`` mapping ModuleKind to a flat
    array shaped like the block's values. Heads of other tasks and
    size-only placeholders get zero gradients.
    """
    s = model.spec
    x0 = _check_inputs(model, inputs, task)
    y = np.asarray(labels)
    if y.shape != (x0.shape[0],):
        raise ShapeError(f"expected {x0.shape[0]} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= s.C or not np.issubdtype(y.dtype, np.integer)):
        raise DataError(f"labels must be integers in [0, {s.C})")
    n = x0.shape[0]

    p, xL, cache, log_p = _forward(model, x0, task, keep=True)
    loss = float(-np.mean(log_p[np.arange(n), y])) if n else 0.0

    grads = {b.kind: np.zeros_like(b.values) for b in model.blocks if b.trainable}
    dlogits = p.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    Wh, _ = _head_views(model.block(task_head(task)).values, s.w, s.C)
    gh = grads[task_head(task)]
    gh[:s.C * s.w] = (dlogits.T @ xL).ravel()
    gh[s.C * s.w:] = dlogits.sum(axis=0)
    dx = dlogits @ Wh

    layers = _backbone_layers(model)
    for layer in range(s.L - 1, -1, -1):
        z, a, adapters = cache[layer]
        kind = adapter(layer)
        views = _adapter_views(model.block(kind).values, s.w, s.h)
        ga = grads.get(kind)
        gviews = _adapter_views(ga, s.w, s.h) if ga is not None else None
        da = dx.copy()
        for i, ((down, _, up, _), (u, g)) in enumerate(zip(views, adapters)):
            du = (dx @ up) * gelu_grad(u)
            if gviews is not None:
                g_down, g_bd, g_up, g_bu = gviews[i]
                g_up[...] = dx.T @ g
                g_bu[...] = dx.sum(axis=0)
                g_down[...] = du.T @ a
                g_bd[...] = du.sum(axis=0)
            da += du @ down
        dz = da * gelu_grad(z)
        dx = dz @ layers[layer][0]
    return loss, grads


def sgd_step(model: ModularModel, grads: dict, lr: float) -> ModularModel:
    """Return a copy with ``values - lr * grad`` applied to trainable blocks."""
    blocks = []
    for b in model.blocks:
        g = grads.get(b.kind) if b.trainable else None
        if g is None:
            blocks.append(b)
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != b.values.shape:
            raise ShapeError(f"gradient for {b.kind} has shape {g.shape}, expected {b.values.shape}")
        blocks.append(replace(b, values=b.values - lr * g))
    for kind in grads:
        block = model.block(kind)
        if not block.trainable:
            raise ShapeError(f"gradient supplied for frozen block {kind}")
    return ModularModel(blocks, model.spec)


def payload_bytes(model: ModularModel, select: Callable[[ParamBlock], bool] = trainable) -> int:
    return sum(b.wire_bytes for b in model.blocks if select(b))


def extract_blocks(model: ModularModel, select: Callable[[ParamBlock], bool] = trainable):
    return [(b.kind, b.values.copy()) for b in model.blocks if select(b)]


def load_blocks(model: ModularModel, blocks) -> ModularModel:
    """Return a copy of ``model`` with the named blocks' values replaced."""
    incoming = {}
    for kind, values in blocks:
        target = model.block(kind)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != target.values.shape:
            raise ShapeError(f"block {kind}: got {values.shape}, expected {target.values.shape}")
        incoming[kind] = values
    out = []
    for b in model.blocks:
        if b.kind in incoming:
            values = incoming[b.kind].copy()
            if not b.trainable:
                values.flags.writeable = False
            out.append(replace(b, values=values))
        else:
            out.append(b)
    return ModularModel(out, model.spec)
