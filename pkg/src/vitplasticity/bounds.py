"""Closed-form plasticity upper bounds for the five component kinds.

Every bound is a Lipschitz-type constant, so it dominates any average rate of
change on inputs that satisfy its assumptions:

* LayerNorm: ``‖γ‖∞ / σ`` when tokens at each position share their mean and
  standard deviation, σ being the smallest such deviation.
* Linear layer: ``‖W‖₂``.
* Attention on the ball ``B_r`` (every token norm at most ``r``):
  ``Σ_h ‖Oʰ‖₂‖Vʰ‖₂ √(3n + (12n+3) r⁴ ‖Aʰ‖₂²)``, ``Aʰ = Qʰᵀ Kʰ / √k``.
* Attention on embedded images of total energy at most 𝓔:
  ``Σ_h ‖Oʰ‖₂‖Vʰ‖₂ (√n + α² 𝓔 ‖Aʰ‖₂)``, α being the embedding's spectral norm.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .linalg import product_spectral_norm, spectral_norm
from .plasticity import compute_radius
from .transformer import KINDS, ComponentKind, ViTConfig, block_prefix, patchify, split_heads

REPORT_SCHEMA = "vitplasticity.bounds/1"
SIGMA_FLOOR = 1e-6

METHOD_LN = "layernorm"
METHOD_LINEAR = "linear"
METHOD_BALL = "attention_ball"
METHOD_ENERGY = "attention_energy"


class AssumptionError(ValueError):
    """Raised when a bound's hypotheses cannot hold (e.g. σ ≤ 0)."""


@dataclass(frozen=True)
class BoundInputs:
    n: int
    r: float
    sigma_min: float | None = None
    alpha: float | None = None
    energy: float | None = None

    def __post_init__(self) -> None:
        if self.n < 1:
            raise AssumptionError("n must be >= 1")
        if not self.r >= 0:
            raise AssumptionError("r must be >= 0")
        if self.alpha is not None and not self.alpha >= 0:
            raise AssumptionError("alpha must be >= 0")
        if self.energy is not None and not self.energy >= 0:
            raise AssumptionError("energy must be >= 0")

    def to_dict(self) -> dict:
        return {"n": self.n, "r": self.r, "sigma_min": self.sigma_min, "alpha": self.alpha, "energy": self.energy}


@dataclass(frozen=True)
class HeadNorms:
    o: float
    v: float
    a: float


@dataclass(frozen=True)
class MhaBound:
    value: float
    terms: tuple[float, ...]
    heads: tuple[HeadNorms, ...]


def ln_bound(gamma: np.ndarray, sigma_min: float) -> float:
    if sigma_min is None or not sigma_min > 0:
        raise AssumptionError(f"LayerNorm bound needs sigma_min > 0, got {sigma_min}")
    gamma = np.asarray(gamma, dtype=np.float64)
    return float(np.max(np.abs(gamma))) / sigma_min if gamma.size else 0.0


def fc_bound(w: np.ndarray) -> float:
    return spectral_norm(w)


def head_norms(o: np.ndarray, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> HeadNorms:
    """Spectral norms ‖O‖₂, ‖V‖₂ and ‖QᵀK/√k‖₂ of one head."""
    k_dim = q.shape[0]
    a = product_spectral_norm(np.asarray(q, dtype=np.float64).T, np.asarray(k, dtype=np.float64)) / math.sqrt(k_dim)
    return HeadNorms(spectral_norm(o), spectral_norm(v), a)


def _norms(heads) -> list[HeadNorms]:
    return [h if isinstance(h, HeadNorms) else head_norms(*h) for h in heads]


def ball_term(h: HeadNorms, n: int, r: float) -> float:
    return h.o * h.v * math.sqrt(3 * n + (12 * n + 3) * r**4 * h.a**2)


def energy_term(h: HeadNorms, n: int, alpha: float, energy: float) -> float:
    return h.o * h.v * (math.sqrt(n) + alpha**2 * energy * h.a)


def mha_bound(heads: Sequence, n: int, r: float) -> MhaBound:
    """Attention bound on the ball of radius ``r``.

    ``heads`` holds per-head ``(O, Q, K, V)`` tuples or precomputed HeadNorms.
    """
    if n < 1 or not r >= 0:
        raise AssumptionError("need n >= 1 and r >= 0")
    norms = _norms(heads)
    terms = tuple(ball_term(h, n, r) for h in norms)
    return MhaBound(float(sum(terms)), terms, tuple(norms))


def mha_bound_tighter(heads: Sequence, n: int, alpha: float, energy: float) -> MhaBound:
    """Attention bound for tokens embedded from images of energy at most ``energy``."""
    if n < 1 or not alpha >= 0 or not energy >= 0:
        raise AssumptionError("need n >= 1, alpha >= 0 and energy >= 0")
    norms = _norms(heads)
    terms = tuple(energy_term(h, n, alpha, energy) for h in norms)
    return MhaBound(float(sum(terms)), terms, tuple(norms))


def energy_radius(alpha: float, energy: float) -> float:
    """R = α√𝓔, the Frobenius radius of embedded sequences."""
    return alpha * math.sqrt(energy)


def attention_lipschitz_per_head(q: np.ndarray, k: np.ndarray, v: np.ndarray, n: int, r: float) -> float:
    """√3 ‖V‖₂ √(‖A‖₂² r⁴ (4n+1) + n) for one head on the ball of radius r."""
    if not r >= 0:
        raise AssumptionError("r must be >= 0")
    k_dim = q.shape[0]
    a = product_spectral_norm(np.asarray(q, dtype=np.float64).T, np.asarray(k, dtype=np.float64)) / math.sqrt(k_dim)
    return math.sqrt(3.0) * spectral_norm(v) * math.sqrt(a * a * r**4 * (4 * n + 1) + n)


# --------------------------------------------------------------------------
# constants estimated from probe data


def estimate_sigma_min(sequences: np.ndarray, floor: float = SIGMA_FLOOR) -> float:
    """Smallest within-token standard deviation over positions and probe samples."""
    seqs = np.asarray(sequences, dtype=np.float64)
    if seqs.ndim == 2:
        seqs = seqs[None]
    return max(float(np.min(seqs.std(axis=-1))), floor)


def sigma_spread(sequences: np.ndarray) -> float:
    """Largest spread (max − min over samples) of any position's token std.

    Zero when the equal-statistics assumption of the LayerNorm bound holds.
    """
    seqs = np.asarray(sequences, dtype=np.float64)
    std = seqs.std(axis=-1)
    return float(np.max(std.max(axis=0) - std.min(axis=0)))


def image_energy(images: np.ndarray) -> float:
    """Largest Σ pixel² over a batch of (already normalised) images."""
    images = np.asarray(images, dtype=np.float64)
    return float(np.max(np.sum(images.reshape(len(images), -1) ** 2, axis=1)))


def embedding_norm(params: Mapping[str, np.ndarray]) -> float:
    return spectral_norm(params["embed.weight"])


def infer_bound_inputs(
    cfg: ViTConfig,
    params: Mapping[str, np.ndarray],
    images: np.ndarray,
    sequences: np.ndarray | None = None,
    r: float | None = None,
    sigma_min: float | None = None,
    alpha: float | None = None,
    energy: float | None = None,
) -> BoundInputs:
    """Fill in every constant not given explicitly from probe images."""
    from .transformer import embed_images

    if sequences is None and (r is None or sigma_min is None):
        sequences = embed_images(cfg, params, images)
    return BoundInputs(
        n=cfg.seq_len,
        r=compute_radius(sequences) if r is None else r,
        sigma_min=estimate_sigma_min(sequences) if sigma_min is None else sigma_min,
        alpha=embedding_norm(params) if alpha is None else alpha,
        energy=image_energy(images) if energy is None else energy,
    )


# --------------------------------------------------------------------------
# whole-model evaluation


@dataclass
class SiteBound:
    layer: int
    kind: ComponentKind
    value: float
    method: str
    constants: dict = field(default_factory=dict)


@dataclass
class BoundReport:
    inputs: BoundInputs
    sites: list[SiteBound]
    metadata: dict = field(default_factory=dict)

    def site(self, layer: int, kind) -> SiteBound:
        kind = ComponentKind(kind)
        for s in self.sites:
            if s.layer == layer and s.kind is kind:
                return s
        raise KeyError((layer, kind))

    def layer_ordering(self, layer: int) -> list[ComponentKind]:
        vals = {s.kind: s.value for s in self.sites if s.layer == layer}
        return sorted(vals, key=lambda k: (-vals[k], KINDS.index(k)))

    def kind_means(self) -> dict[ComponentKind, float]:
        out = {}
        for kind in KINDS:
            vals = [s.value for s in self.sites if s.kind is kind]
            if vals:
                out[kind] = float(np.mean(vals))
        return out

    def ranking(self) -> list[ComponentKind]:
        means = self.kind_means()
        return sorted(means, key=lambda k: (-means[k], KINDS.index(k)))

    @property
    def layers(self) -> list[int]:
        return sorted({s.layer for s in self.sites})

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "metadata": self.metadata,
            "inputs": self.inputs.to_dict(),
            "kind_means": {k.value: v for k, v in self.kind_means().items()},
            "ranking": [k.value for k in self.ranking()],
            "layer_orderings": {str(l): [k.value for k in self.layer_ordering(l)] for l in self.layers},
            "sites": [
                {"layer": s.layer, "kind": s.kind.value, "value": s.value, "method": s.method, "constants": s.constants}
                for s in self.sites
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def _mha_constants(b: MhaBound) -> dict:
    return {
        "head_o_norms": [h.o for h in b.heads],
        "head_v_norms": [h.v for h in b.heads],
        "head_a_norms": [h.a for h in b.heads],
        "head_terms": list(b.terms),
    }


def evaluate_layer_bounds(cfg: ViTConfig, params: Mapping[str, np.ndarray], layer: int, inputs: BoundInputs, tighter: bool = False) -> list[SiteBound]:
    p = block_prefix(layer)
    out = []
    for kind in KINDS:
        if kind in (ComponentKind.LN1, ComponentKind.LN2):
            gamma = params[f"{p}.{kind.value.lower()}.gamma"]
            out.append(SiteBound(layer, kind, ln_bound(gamma, inputs.sigma_min), METHOD_LN,
                                 {"gamma_inf": float(np.max(np.abs(gamma))), "sigma_min": inputs.sigma_min}))
        elif kind is ComponentKind.MHA:
            heads = split_heads(params[f"{p}.mha.qkv.weight"], params[f"{p}.mha.out.weight"], cfg.num_heads)
            norms = [head_norms(*h) for h in heads]
            ball = mha_bound(norms, inputs.n, inputs.r)
            consts = _mha_constants(ball)
            consts.update({"n": inputs.n, "r": inputs.r, "num_heads": cfg.num_heads})
            if tighter:
                if inputs.alpha is None or inputs.energy is None:
                    raise AssumptionError("energy bound needs alpha and energy")
                # the energy bound holds for bias-free patch tokens, whose count excludes the class token
                n_patch = cfg.num_patches
                en = mha_bound_tighter(norms, n_patch, inputs.alpha, inputs.energy)
                consts.update({
                    "energy_bound": en.value,
                    "energy_head_terms": list(en.terms),
                    "energy_n": n_patch,
                    "alpha": inputs.alpha,
                    "energy": inputs.energy,
                    "energy_radius": energy_radius(inputs.alpha, inputs.energy),
                })
            out.append(SiteBound(layer, kind, ball.value, METHOD_BALL, consts))
        else:
            w_norm = fc_bound(params[f"{p}.{kind.value.lower()}.weight"])
            out.append(SiteBound(layer, kind, w_norm, METHOD_LINEAR, {"weight_norm": w_norm}))
    return out


def evaluate_all_bounds(
    cfg: ViTConfig,
    params: Mapping[str, np.ndarray],
    inputs: BoundInputs,
    tighter: bool = False,
    layers: Sequence[int] | None = None,
) -> BoundReport:
    """Bounds for every component at every depth (or at ``layers``)."""
    if inputs.n != cfg.seq_len:
        raise AssumptionError(f"inputs.n={inputs.n} but the model's sequence length is {cfg.seq_len}")
    layers = range(cfg.num_layers) if layers is None else layers
    sites: list[SiteBound] = []
    for layer in layers:
        sites.extend(evaluate_layer_bounds(cfg, params, layer, inputs, tighter))
    return BoundReport(inputs, sites, {"model": cfg.to_dict(), "tighter": tighter})


def embed_patches_bias_free(cfg: ViTConfig, params: Mapping[str, np.ndarray], images: np.ndarray) -> np.ndarray:
    """Patch tokens E·pᵢ without bias, class token or positions (the energy-bound setting)."""
    return patchify(cfg, images) @ params["embed.weight"].T
