"""A small vision transformer written directly in numpy, with exact gradients.

Token sequences are ``(n, d)`` arrays (one token per row), batched as
``(B, n, d)``. Linear maps follow the ``y = x Wᵀ + b`` convention, so a weight
stored as ``(d_out, d_in)`` is the same matrix that acts on column tokens.
"""

from __future__ import annotations

import enum
import math
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np
from scipy.special import ndtr

from .linalg import DimensionError


class ComponentKind(str, enum.Enum):
    LN1 = "LN1"
    MHA = "MHA"
    LN2 = "LN2"
    FC1 = "FC1"
    FC2 = "FC2"


KINDS: tuple[ComponentKind, ...] = tuple(ComponentKind)

# Parameter groups that are not transformer components.
EMBEDDING = "EMBED"
POSITIONS = "POS"
CLS_TOKEN = "CLS"
HEAD = "HEAD"
ALL = "ALL"
GROUPS = tuple(k.value for k in KINDS) + (EMBEDDING, POSITIONS, CLS_TOKEN, HEAD)

INIT_SCHEMES = ("trunc_normal", "matched")
HEAD_TAPS = ("block", "attention")


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 16
    num_heads: int = 4
    num_layers: int = 4
    num_classes: int = 4
    ln_eps: float = 1e-12
    seed: int = 0
    init: str = "trunc_normal"
    head_tap: str = "block"

    def __post_init__(self) -> None:
        if min(self.image_size, self.patch_size, self.channels, self.embed_dim, self.num_heads) < 1:
            raise ValueError("sizes must be positive")
        if self.num_layers < 0 or self.num_classes < 1:
            raise ValueError("num_layers must be >= 0 and num_classes >= 1")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if not self.ln_eps > 0:
            raise ValueError("ln_eps must be positive")
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme {self.init!r}")
        if self.head_tap not in HEAD_TAPS:
            raise ValueError(f"unknown head tap {self.head_tap!r}")
        if self.head_tap == "attention" and self.num_layers == 0:
            raise ValueError("attention tap needs at least one layer")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return 4 * self.embed_dim

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ViTConfig":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


PRESETS: dict[str, ViTConfig] = {
    "micro": ViTConfig(image_size=8, patch_size=4, channels=3, embed_dim=8, num_heads=2, num_layers=2, num_classes=3),
    "tiny": ViTConfig(image_size=16, patch_size=4, channels=3, embed_dim=16, num_heads=4, num_layers=4, num_classes=4),
    "base": ViTConfig(image_size=224, patch_size=16, channels=3, embed_dim=768, num_heads=12, num_layers=12, num_classes=10),
    "huge": ViTConfig(image_size=224, patch_size=14, channels=3, embed_dim=1280, num_heads=16, num_layers=32, num_classes=10),
}


def preset(name: str, **overrides) -> ViTConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides)


# --------------------------------------------------------------------------
# parameters


def block_prefix(layer: int) -> str:
    return f"blocks.{layer}"


def parameter_shapes(cfg: ViTConfig) -> "OrderedDict[str, tuple[int, ...]]":
    d, h4 = cfg.embed_dim, cfg.hidden_dim
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["embed.weight"] = (d, cfg.patch_dim)
    shapes["embed.bias"] = (d,)
    shapes["cls"] = (d,)
    shapes["pos"] = (cfg.seq_len, d)
    for layer in range(cfg.num_layers):
        p = block_prefix(layer)
        shapes[f"{p}.ln1.gamma"] = (d,)
        shapes[f"{p}.ln1.beta"] = (d,)
        shapes[f"{p}.mha.qkv.weight"] = (3 * d, d)
        shapes[f"{p}.mha.qkv.bias"] = (3 * d,)
        shapes[f"{p}.mha.out.weight"] = (d, d)
        shapes[f"{p}.mha.out.bias"] = (d,)
        shapes[f"{p}.ln2.gamma"] = (d,)
        shapes[f"{p}.ln2.beta"] = (d,)
        shapes[f"{p}.fc1.weight"] = (h4, d)
        shapes[f"{p}.fc1.bias"] = (h4,)
        shapes[f"{p}.fc2.weight"] = (d, h4)
        shapes[f"{p}.fc2.bias"] = (d,)
    shapes["head.norm.gamma"] = (d,)
    shapes["head.norm.beta"] = (d,)
    shapes["head.weight"] = (cfg.num_classes, d)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


_SUBMODULE_GROUP = {"ln1": "LN1", "mha": "MHA", "ln2": "LN2", "fc1": "FC1", "fc2": "FC2"}


def group_of(name: str) -> str:
    """Map a parameter name to its group label (a component kind or EMBED/POS/CLS/HEAD)."""
    parts = name.split(".")
    if parts[0] == "blocks":
        return _SUBMODULE_GROUP[parts[2]]
    if parts[0] == "embed":
        return EMBEDDING
    if parts[0] == "pos":
        return POSITIONS
    if parts[0] == "cls":
        return CLS_TOKEN
    if parts[0] == "head":
        return HEAD
    raise KeyError(name)


def layer_of(name: str) -> int | None:
    parts = name.split(".")
    return int(parts[1]) if parts[0] == "blocks" else None


def _group_label(group) -> str:
    return group.value if isinstance(group, ComponentKind) else str(group).upper()


def count_parameters(cfg: ViTConfig, group=ALL) -> int:
    """Exact parameter count (weights and biases) of a group across all layers."""
    label = _group_label(group)
    total = 0
    for name, shape in parameter_shapes(cfg).items():
        if label == ALL or group_of(name) == label:
            total += math.prod(shape)
    return total


class ParameterStore:
    """Ordered name → array map with a per-entry trainable flag."""

    def __init__(self, tensors: Mapping[str, np.ndarray], trainable: Iterable[str] | None = None):
        self._tensors: OrderedDict[str, np.ndarray] = OrderedDict(
            (name, np.asarray(value, dtype=np.float64)) for name, value in tensors.items()
        )
        names = list(self._tensors) if trainable is None else list(trainable)
        unknown = set(names) - set(self._tensors)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        self._trainable = set(names)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._tensors:
            raise KeyError(name)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._tensors[name].shape:
            raise DimensionError(f"{name}: shape {value.shape} != {self._tensors[name].shape}")
        self._tensors[name] = value

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def is_trainable(self, name: str) -> bool:
        return name in self._trainable

    def trainable_names(self) -> list[str]:
        return [n for n in self._tensors if n in self._trainable]

    def set_trainable(self, names: Iterable[str]) -> None:
        names = set(names)
        unknown = names - set(self._tensors)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        self._trainable = names

    def num_trainable(self) -> int:
        return sum(self._tensors[n].size for n in self.trainable_names())

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self._tensors.items()}, self._trainable)

    def as_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(self._tensors)


def _trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def init_tensor(cfg: ViTConfig, name: str, shape: tuple[int, ...]) -> np.ndarray:
    """Deterministic initial value of one parameter (independent of other entries)."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return np.ones(shape)
    if leaf in ("beta", "bias"):
        return np.zeros(shape)
    rng = _param_rng(cfg.seed, name)
    if cfg.init == "trunc_normal" or name.startswith("head"):
        return _trunc_normal(rng, shape, 0.02)
    # matched: unit-gain weights, unit-variance class/position tokens
    if name in ("cls", "pos"):
        return rng.standard_normal(shape)
    return rng.standard_normal(shape) / math.sqrt(cfg.embed_dim)


def init_params(cfg: ViTConfig) -> ParameterStore:
    return ParameterStore({name: init_tensor(cfg, name, shape) for name, shape in parameter_shapes(cfg).items()})


def iter_layer_params(cfg: ViTConfig, layer: int) -> dict[str, np.ndarray]:
    """Freshly initialised parameters of one block, without building the whole model."""
    p = block_prefix(layer) + "."
    return {n: init_tensor(cfg, n, s) for n, s in parameter_shapes(cfg).items() if n.startswith(p)}


class LazyParams(Mapping):
    """Read-only view of a model's initial parameters, generated on each access.

    Lets shape-only models (too large to hold in memory) be analysed one
    tensor at a time.
    """

    def __init__(self, cfg: ViTConfig):
        self.cfg = cfg
        self._shapes = parameter_shapes(cfg)

    def __getitem__(self, name: str) -> np.ndarray:
        return init_tensor(self.cfg, name, self._shapes[name])

    def __iter__(self) -> Iterator[str]:
        return iter(self._shapes)

    def __len__(self) -> int:
        return len(self._shapes)


# --------------------------------------------------------------------------
# component forward passes


def gelu(x: np.ndarray) -> np.ndarray:
    return x * ndtr(x)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return ndtr(x) + x * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def patchify(cfg: ViTConfig, images: np.ndarray) -> np.ndarray:
    """(B, C, S, S) → (B, num_patches, C·P·P), patches in row-major grid order."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    b = images.shape[0]
    c, s, p, g = cfg.channels, cfg.image_size, cfg.patch_size, cfg.grid
    if images.shape[1:] != (c, s, s):
        raise DimensionError(f"image shape {images.shape[1:]} does not match config {(c, s, s)}")
    x = images.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, c * p * p)


def embed_images(cfg: ViTConfig, params: ParameterStore, images: np.ndarray) -> np.ndarray:
    patches = patchify(cfg, images)
    tokens = patches @ params["embed.weight"].T + params["embed.bias"]
    cls = np.broadcast_to(params["cls"], (tokens.shape[0], 1, cfg.embed_dim))
    return np.concatenate([cls, tokens], axis=1) + params["pos"]


def embed_image(cfg: ViTConfig, params: ParameterStore, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DimensionError(f"expected a (C, H, W) image, got {image.shape}")
    return embed_images(cfg, params, image[None])[0]


def layer_norm(gamma: np.ndarray, beta: np.ndarray, eps: float, x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return gamma * (x - mu) / np.sqrt(var + eps) + beta


def _ln_forward(gamma, beta, eps, x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return gamma * xhat + beta, (xhat, rstd)


def _ln_backward(gamma, cache, dy, axes):
    xhat, rstd = cache
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def split_heads(w_qkv: np.ndarray, w_out: np.ndarray, num_heads: int):
    """Per-head (O, Q, K, V) matrices with shapes (d×k, k×d, k×d, k×d)."""
    d = w_out.shape[0]
    k = d // num_heads
    heads = []
    for h in range(num_heads):
        sl = slice(h * k, (h + 1) * k)
        q = w_qkv[sl]
        kk = w_qkv[d + h * k : d + (h + 1) * k]
        v = w_qkv[2 * d + h * k : 2 * d + (h + 1) * k]
        heads.append((w_out[:, sl], q, kk, v))
    return heads


def _mha_forward(w_qkv, b_qkv, w_out, b_out, num_heads, x):
    lead = x.shape[:-2]
    n, d = x.shape[-2:]
    k = d // num_heads
    qkv = x @ w_qkv.T + b_qkv
    qkv = qkv.reshape(*lead, n, 3, num_heads, k)
    q = np.moveaxis(qkv[..., 0, :, :], -2, -3)  # (..., H, n, k)
    kk = np.moveaxis(qkv[..., 1, :, :], -2, -3)
    v = np.moveaxis(qkv[..., 2, :, :], -2, -3)
    scores = q @ np.swapaxes(kk, -1, -2) / math.sqrt(k)
    scores = scores - scores.max(axis=-1, keepdims=True)
    s = np.exp(scores)
    s /= s.sum(axis=-1, keepdims=True)
    ctx = s @ v  # (..., H, n, k): token i gathers Σ_j S_ij V x_j
    ctx = np.moveaxis(ctx, -3, -2).reshape(*lead, n, d)
    out = ctx @ w_out.T + b_out
    return out, (q, kk, v, s, ctx)


def multi_head_attention(params: Mapping[str, np.ndarray], layer: int, num_heads: int, x: np.ndarray) -> np.ndarray:
    p = block_prefix(layer)
    out, _ = _mha_forward(
        params[f"{p}.mha.qkv.weight"], params[f"{p}.mha.qkv.bias"],
        params[f"{p}.mha.out.weight"], params[f"{p}.mha.out.bias"], num_heads, np.asarray(x, dtype=np.float64),
    )
    return out


def feedforward(w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: np.ndarray, x: np.ndarray) -> np.ndarray:
    return gelu(x @ w1.T + b1) @ w2.T + b2


def component_function(cfg: ViTConfig, params: Mapping[str, np.ndarray], layer: int, kind: ComponentKind) -> Callable:
    """The component at ``(layer, kind)`` as a standalone map on token sequences.

    FC1 and FC2 are the bare linear layers (the GeLU sits between them), so
    FC2 consumes ``4d``-dimensional tokens.
    """
    p = block_prefix(layer)
    kind = ComponentKind(kind)
    if kind in (ComponentKind.LN1, ComponentKind.LN2):
        sub = kind.value.lower()
        gamma, beta = params[f"{p}.{sub}.gamma"], params[f"{p}.{sub}.beta"]
        return lambda x: layer_norm(gamma, beta, cfg.ln_eps, x)
    if kind is ComponentKind.MHA:
        return lambda x: multi_head_attention(params, layer, cfg.num_heads, x)
    sub = kind.value.lower()
    w, b = params[f"{p}.{sub}.weight"], params[f"{p}.{sub}.bias"]
    return lambda x: x @ w.T + b


# --------------------------------------------------------------------------
# full model


@dataclass
class ActivationTrace:
    """Inputs seen by every component during a forward pass, batched as (B, n, ·)."""

    embedding: np.ndarray
    inputs: dict[tuple[int, ComponentKind], np.ndarray] = field(default_factory=dict)


@dataclass
class _BlockCache:
    x_in: np.ndarray
    ln1: tuple
    a: np.ndarray
    mha: tuple
    m: np.ndarray
    ln2: tuple
    c: np.ndarray
    h: np.ndarray
    g: np.ndarray


def _block_forward(cfg: ViTConfig, params: Mapping[str, np.ndarray], layer: int, x: np.ndarray):
    p = block_prefix(layer)
    a, ln1 = _ln_forward(params[f"{p}.ln1.gamma"], params[f"{p}.ln1.beta"], cfg.ln_eps, x)
    m, mha = _mha_forward(
        params[f"{p}.mha.qkv.weight"], params[f"{p}.mha.qkv.bias"],
        params[f"{p}.mha.out.weight"], params[f"{p}.mha.out.bias"], cfg.num_heads, a,
    )
    x1 = x + m
    c, ln2 = _ln_forward(params[f"{p}.ln2.gamma"], params[f"{p}.ln2.beta"], cfg.ln_eps, x1)
    h = c @ params[f"{p}.fc1.weight"].T + params[f"{p}.fc1.bias"]
    g = gelu(h)
    x2 = x1 + g @ params[f"{p}.fc2.weight"].T + params[f"{p}.fc2.bias"]
    return x2, _BlockCache(x, ln1, a, mha, m, ln2, c, h, g), x1


def _forward_all(cfg: ViTConfig, params: Mapping[str, np.ndarray], images: np.ndarray, trace: bool):
    patches = patchify(cfg, images)
    x = patches @ params["embed.weight"].T + params["embed.bias"]
    cls = np.broadcast_to(params["cls"], (x.shape[0], 1, cfg.embed_dim))
    x = np.concatenate([cls, x], axis=1) + params["pos"]
    tr = ActivationTrace(embedding=x.copy()) if trace else None
    caches = []
    for layer in range(cfg.num_layers):
        x_next, cache, x1 = _block_forward(cfg, params, layer, x)
        caches.append(cache)
        if tr is not None:
            tr.inputs[(layer, ComponentKind.LN1)] = cache.x_in
            tr.inputs[(layer, ComponentKind.MHA)] = cache.a
            tr.inputs[(layer, ComponentKind.LN2)] = x1
            tr.inputs[(layer, ComponentKind.FC1)] = cache.c
            tr.inputs[(layer, ComponentKind.FC2)] = cache.g
        x = x_next
    if cfg.head_tap == "attention":
        feat = caches[-1].m[:, 0]
    else:
        feat = x[:, 0]
    z, head_ln = _ln_forward(params["head.norm.gamma"], params["head.norm.beta"], cfg.ln_eps, feat)
    logits = z @ params["head.weight"].T + params["head.bias"]
    return logits, patches, caches, (feat, z, head_ln), tr


def forward_batch(cfg: ViTConfig, params: Mapping[str, np.ndarray], images: np.ndarray, trace: bool = False):
    """Logits for a batch of images, plus the activation trace when requested."""
    logits, _, _, _, tr = _forward_all(cfg, params, images, trace)
    return (logits, tr) if trace else logits


def forward(cfg: ViTConfig, params: Mapping[str, np.ndarray], image: np.ndarray, trace: bool = False):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DimensionError(f"expected a (C, H, W) image, got {image.shape}")
    if trace:
        logits, tr = forward_batch(cfg, params, image[None], trace=True)
        return logits[0], tr
    return forward_batch(cfg, params, image[None])[0]


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} != ({b},)")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"label out of range [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logz - shifted[np.arange(b), labels]))
    probs = np.exp(shifted - logz[:, None])
    probs[np.arange(b), labels] -= 1.0
    return loss, probs / b


def backward(cfg: ViTConfig, params: ParameterStore, images: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and gradients of the trainable entries.

    Returns ``(loss, grads, logits)`` where ``grads`` maps each trainable
    parameter name to an array of the same shape.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise DimensionError("backward needs a non-empty (B, C, H, W) batch")
    need = set(params.trainable_names())
    logits, patches, caches, (feat, z, head_ln), _ = _forward_all(cfg, params, images, False)
    loss, dlogits = cross_entropy(logits, labels)
    grads: dict[str, np.ndarray] = {}

    def put(name, fn):
        if name in need:
            grads[name] = fn()

    put("head.weight", lambda: dlogits.T @ z)
    put("head.bias", lambda: dlogits.sum(axis=0))
    dz = dlogits @ params["head.weight"]
    dfeat, dgam, dbet = _ln_backward(params["head.norm.gamma"], head_ln, dz, axes=0)
    put("head.norm.gamma", lambda: dgam)
    put("head.norm.beta", lambda: dbet)

    # earliest layer whose parameters (or anything upstream) need gradients
    first = cfg.num_layers
    if need & {"embed.weight", "embed.bias", "cls", "pos"}:
        first = 0
    else:
        for name in need:
            layer = layer_of(name)
            if layer is not None:
                first = min(first, layer)

    b, n, d = images.shape[0], cfg.seq_len, cfg.embed_dim
    dx = np.zeros((b, n, d))
    dm_extra = None
    if cfg.head_tap == "attention":
        dm_extra = np.zeros((b, n, d))
        dm_extra[:, 0] = dfeat
    else:
        dx[:, 0] = dfeat

    for layer in reversed(range(first, cfg.num_layers)):
        extra = dm_extra if layer == cfg.num_layers - 1 else None
        dx = _block_backward(cfg, params, layer, caches[layer], dx, extra, need, grads)

    if first == 0:
        put("pos", lambda: dx.sum(axis=0))
        put("cls", lambda: dx[:, 0].sum(axis=0))
        dtok = dx[:, 1:]
        put("embed.weight", lambda: np.einsum("bpd,bpe->de", dtok, patches))
        put("embed.bias", lambda: dtok.sum(axis=(0, 1)))
    return loss, grads, logits


def _block_backward(cfg, params, layer, cache: _BlockCache, dx_out, dm_extra, need, grads):
    p = block_prefix(layer)
    names = (f"{p}.ln1.gamma", f"{p}.ln1.beta", f"{p}.mha.qkv.weight", f"{p}.mha.qkv.bias",
             f"{p}.mha.out.weight", f"{p}.mha.out.bias", f"{p}.ln2.gamma", f"{p}.ln2.beta",
             f"{p}.fc1.weight", f"{p}.fc1.bias", f"{p}.fc2.weight", f"{p}.fc2.bias")
    wanted = {nm for nm in names if nm in need}
    axes = (0, 1)

    # FFN branch
    df = dx_out
    if f"{p}.fc2.weight" in wanted:
        grads[f"{p}.fc2.weight"] = np.einsum("bnd,bne->de", df, cache.g)
    if f"{p}.fc2.bias" in wanted:
        grads[f"{p}.fc2.bias"] = df.sum(axis=axes)
    dh = (df @ params[f"{p}.fc2.weight"]) * gelu_grad(cache.h)
    if f"{p}.fc1.weight" in wanted:
        grads[f"{p}.fc1.weight"] = np.einsum("bnh,bnd->hd", dh, cache.c)
    if f"{p}.fc1.bias" in wanted:
        grads[f"{p}.fc1.bias"] = dh.sum(axis=axes)
    dc = dh @ params[f"{p}.fc1.weight"]
    dx1, dg2, db2 = _ln_backward(params[f"{p}.ln2.gamma"], cache.ln2, dc, axes)
    if f"{p}.ln2.gamma" in wanted:
        grads[f"{p}.ln2.gamma"] = dg2
    if f"{p}.ln2.beta" in wanted:
        grads[f"{p}.ln2.beta"] = db2
    dx1 = dx1 + dx_out

    # attention branch
    dm = dx1 if dm_extra is None else dx1 + dm_extra
    q, kk, v, s, ctx = cache.mha
    if f"{p}.mha.out.weight" in wanted:
        grads[f"{p}.mha.out.weight"] = np.einsum("bnd,bne->de", dm, ctx)
    if f"{p}.mha.out.bias" in wanted:
        grads[f"{p}.mha.out.bias"] = dm.sum(axis=axes)
    b, n, d = dm.shape
    hh, k = cfg.num_heads, cfg.head_dim
    dctx = (dm @ params[f"{p}.mha.out.weight"]).reshape(b, n, hh, k).transpose(0, 2, 1, 3)
    ds = dctx @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(s, -1, -2) @ dctx
    dscores = s * (ds - (ds * s).sum(axis=-1, keepdims=True)) / math.sqrt(k)
    dq = dscores @ kk
    dk = np.swapaxes(dscores, -1, -2) @ q
    dqkv = np.stack([dq, dk, dv], axis=1)  # (B, 3, H, n, k)
    dqkv = dqkv.transpose(0, 3, 1, 2, 4).reshape(b, n, 3 * d)
    if f"{p}.mha.qkv.weight" in wanted:
        grads[f"{p}.mha.qkv.weight"] = np.einsum("bnf,bnd->fd", dqkv, cache.a)
    if f"{p}.mha.qkv.bias" in wanted:
        grads[f"{p}.mha.qkv.bias"] = dqkv.sum(axis=axes)
    da = dqkv @ params[f"{p}.mha.qkv.weight"]
    dx0, dg1, db1 = _ln_backward(params[f"{p}.ln1.gamma"], cache.ln1, da, axes)
    if f"{p}.ln1.gamma" in wanted:
        grads[f"{p}.ln1.gamma"] = dg1
    if f"{p}.ln1.beta" in wanted:
        grads[f"{p}.ln1.beta"] = db1
    return dx0 + dx1
