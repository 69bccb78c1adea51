"""Monte-Carlo estimation of component plasticity (average rate of change)."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .data_io import Dataset
from .linalg import DegeneratePairError, DimensionError
from .transformer import (
    KINDS,
    ComponentKind,
    ParameterStore,
    ViTConfig,
    component_function,
    embed_images,
    forward_batch,
)

REPORT_SCHEMA = "vitplasticity.plasticity/1"
DEFAULT_SAMPLE_CAP = 10_000


class ProbeMode(str, enum.Enum):
    EMBEDDING = "embedding"
    IN_SITU = "insitu"


def default_min_discrepancy(n: int, d: int) -> float:
    return 1e-8 * math.sqrt(d * n)


def rate_of_change(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, y: np.ndarray, min_discrepancy: float = 0.0) -> float:
    """‖f(x) − f(y)‖_F / ‖x − y‖_F for a single pair of token sequences."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"{x.shape} vs {y.shape}")
    gap = float(np.linalg.norm(x - y))
    if gap == 0.0 or gap < min_discrepancy:
        raise DegeneratePairError(f"pair discrepancy {gap:.3g} below {min_discrepancy:.3g}")
    return float(np.linalg.norm(f(x) - f(y))) / gap


def batch_rates(f: Callable[[np.ndarray], np.ndarray], xs: np.ndarray, ys: np.ndarray, min_discrepancy: float = 0.0) -> np.ndarray:
    """Rates of change for a batch of pairs stacked on the leading axis."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape:
        raise DimensionError(f"{xs.shape} vs {ys.shape}")
    gaps = np.sqrt(((xs - ys) ** 2).reshape(len(xs), -1).sum(axis=1))
    if np.any(gaps == 0.0) or np.any(gaps < min_discrepancy):
        raise DegeneratePairError("batch contains a pair below the discrepancy threshold")
    diff = f(xs) - f(ys)
    return np.sqrt((diff**2).reshape(len(xs), -1).sum(axis=1)) / gaps


def lift_to_hidden(x: np.ndarray, hidden_dim: int | None = None) -> np.ndarray:
    """Zero-pad each token from ℝᵈ into ℝ^{4d} (or ``hidden_dim``)."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    width = 4 * d if hidden_dim is None else hidden_dim
    if width < d:
        raise DimensionError(f"cannot lift dimension {d} into {width}")
    pad = [(0, 0)] * (x.ndim - 1) + [(0, width - d)]
    return np.pad(x, pad)


def compute_radius(sequences) -> float:
    """Average over sequences of √((1/n) Σᵢ ‖xᵢ‖²)."""
    seqs = [np.asarray(s, dtype=np.float64) for s in sequences]
    if not seqs:
        raise ValueError("need at least one sequence")
    radii = [math.sqrt(float(np.mean(np.sum(s * s, axis=-1)))) for s in seqs]
    return float(np.mean(radii))


@dataclass
class PairSampler:
    """Draws distinct (x, y) pairs, x from ``source_a`` and y from ``source_b``.

    Each source is consumed through its own seeded shuffle; a source that runs
    out is reshuffled and cycled. Exact repeats of an index pair and pairs
    closer than ``min_discrepancy`` are skipped.
    """

    source_a: Dataset | np.ndarray
    source_b: Dataset | np.ndarray
    num_pairs: int
    batch_size: int = 64
    seed: int = 0
    min_discrepancy: float | None = None

    def __post_init__(self) -> None:
        if self.num_pairs < 1:
            raise ValueError("num_pairs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.min_discrepancy is not None and not self.min_discrepancy > 0:
            raise ValueError("min_discrepancy must be positive")

    def index_stream(self) -> Iterator[tuple[int, int]]:
        na, nb = len(self.source_a), len(self.source_b)
        if na == 0 or nb == 0:
            raise ValueError("empty source")
        root = np.random.SeedSequence(self.seed)
        seq_a, seq_b = root.spawn(2)

        def cycle(seq, n):
            epoch = 0
            while True:
                rng = np.random.default_rng(np.random.SeedSequence([*seq.generate_state(2), epoch]))
                yield from rng.permutation(n).tolist()
                epoch += 1

        it_a, it_b = cycle(seq_a, na), cycle(seq_b, nb)
        while True:
            yield next(it_a), next(it_b)


def _is_sequences(src) -> bool:
    return isinstance(src, np.ndarray)


@dataclass
class SiteEstimate:
    layer: int
    kind: ComponentKind
    samples: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.samples))

    @property
    def stderr(self) -> float:
        n = len(self.samples)
        return float(np.std(self.samples, ddof=1) / math.sqrt(n)) if n > 1 else 0.0

    @property
    def regime(self) -> str:
        return "contracting" if self.mean < 1.0 else "amplifying"


@dataclass
class PlasticityReport:
    sites: list[SiteEstimate]
    metadata: dict = field(default_factory=dict)

    def site(self, layer: int, kind) -> SiteEstimate:
        kind = ComponentKind(kind)
        for s in self.sites:
            if s.layer == layer and s.kind is kind:
                return s
        raise KeyError((layer, kind))

    def kind_means(self) -> dict[ComponentKind, float]:
        """Plasticity of each kind averaged over depth."""
        out = {}
        for kind in KINDS:
            vals = [s.mean for s in self.sites if s.kind is kind]
            if vals:
                out[kind] = float(np.mean(vals))
        return out

    def ranking(self) -> list[ComponentKind]:
        means = self.kind_means()
        return sorted(means, key=lambda k: (-means[k], KINDS.index(k)))

    def to_dict(self, sample_cap: int = DEFAULT_SAMPLE_CAP) -> dict:
        sites = []
        for s in self.sites:
            samples = s.samples
            sites.append(
                {
                    "layer": s.layer,
                    "kind": s.kind.value,
                    "num_samples": int(len(samples)),
                    "mean": s.mean,
                    "stderr": s.stderr,
                    "min": float(np.min(samples)),
                    "max": float(np.max(samples)),
                    "regime": s.regime,
                    "samples": [float(v) for v in samples[:sample_cap]],
                    "samples_truncated": bool(len(samples) > sample_cap),
                }
            )
        return {
            "schema": REPORT_SCHEMA,
            "metadata": self.metadata,
            "kind_means": {k.value: v for k, v in self.kind_means().items()},
            "ranking": [k.value for k in self.ranking()],
            "sites": sites,
        }

    def to_json(self, sample_cap: int = DEFAULT_SAMPLE_CAP) -> str:
        return json.dumps(self.to_dict(sample_cap), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping) -> "PlasticityReport":
        if data.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {data.get('schema')!r}")
        sites = [SiteEstimate(int(s["layer"]), ComponentKind(s["kind"]), np.asarray(s["samples"], dtype=np.float64)) for s in data["sites"]]
        return cls(sites, dict(data.get("metadata", {})))


def _site_inputs(cfg: ViTConfig, params, src, idx: np.ndarray, mode: ProbeMode):
    """Per-site probe inputs for the items ``idx`` of a source."""
    if _is_sequences(src):
        seqs = np.asarray(src[idx], dtype=np.float64)
        if mode is ProbeMode.IN_SITU:
            raise ValueError("in-situ probing needs image datasets, not token sequences")
        return seqs, None
    images = src.images[idx]
    if mode is ProbeMode.EMBEDDING:
        return embed_images(cfg, params, images), None
    _, tr = forward_batch(cfg, params, images, trace=True)
    return tr.embedding, tr.inputs


def estimate_plasticity(
    cfg: ViTConfig,
    params: ParameterStore | Mapping[str, np.ndarray],
    sampler: PairSampler,
    mode: ProbeMode | str = ProbeMode.EMBEDDING,
    sites: Sequence[tuple[int, ComponentKind]] | None = None,
    components: Mapping[tuple[int, ComponentKind], Callable] | None = None,
) -> PlasticityReport:
    """Estimate the plasticity of every component site.

    In embedding mode each component receives post-embedding token sequences
    (FC2 receives them zero-padded to 4d). In in-situ mode each component
    receives the inputs it actually sees in forward passes over the two
    sources. ``components`` may override the callable used at a site.
    """
    mode = ProbeMode(mode)
    if sites is None:
        sites = [(layer, kind) for layer in range(cfg.num_layers) for kind in KINDS]
    sites = [(int(layer), ComponentKind(kind)) for layer, kind in sites]
    funcs = {}
    for site in sites:
        if components and site in components:
            funcs[site] = components[site]
        else:
            funcs[site] = component_function(cfg, params, *site)

    n, d = cfg.seq_len, cfg.embed_dim
    if _is_sequences(sampler.source_a):
        n, d = sampler.source_a.shape[1:]
    min_disc = sampler.min_discrepancy or default_min_discrepancy(n, d)

    samples = {site: [] for site in sites}
    seen: set[tuple[int, int]] = set()
    stream = sampler.index_stream()
    na, nb = len(sampler.source_a), len(sampler.source_b)
    budget = max(10 * sampler.num_pairs, 4 * na * nb if na * nb < 10**6 else 0)
    attempts = 0
    rejected = 0
    done = 0
    while done < sampler.num_pairs:
        want = min(sampler.batch_size, sampler.num_pairs - done)
        ia, ib = [], []
        while len(ia) < want:
            if attempts >= budget:
                raise ValueError(
                    f"sources too small: found {done + len(ia)} of {sampler.num_pairs} distinct pairs"
                )
            attempts += 1
            a, b = next(stream)
            if (a, b) in seen:
                continue
            seen.add((a, b))
            ia.append(a)
            ib.append(b)
        ia_arr, ib_arr = np.asarray(ia), np.asarray(ib)
        xa, tra = _site_inputs(cfg, params, sampler.source_a, ia_arr, mode)
        xb, trb = _site_inputs(cfg, params, sampler.source_b, ib_arr, mode)
        gaps = np.sqrt(((xa - xb) ** 2).reshape(len(ia), -1).sum(axis=1))
        keep = gaps >= min_disc
        keep &= gaps > 0
        rejected += int((~keep).sum())
        if not np.any(keep):
            continue
        for site in sites:
            if mode is ProbeMode.EMBEDDING:
                x, y = xa[keep], xb[keep]
                if site[1] is ComponentKind.FC2:
                    x, y = lift_to_hidden(x), lift_to_hidden(y)
            else:
                x, y = tra[site][keep], trb[site][keep]
            samples[site].append(batch_rates(funcs[site], x, y))
        done += int(keep.sum())

    estimates = []
    for site in sites:
        vals = np.concatenate(samples[site])[: sampler.num_pairs]
        estimates.append(SiteEstimate(site[0], site[1], vals))
    meta = {
        "model": cfg.to_dict(),
        "mode": mode.value,
        "num_pairs": sampler.num_pairs,
        "batch_size": sampler.batch_size,
        "seed": sampler.seed,
        "min_discrepancy": min_disc,
        "rejected_pairs": rejected,
    }
    return PlasticityReport(estimates, meta)
