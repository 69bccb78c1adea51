"""Small builders shared by several test modules."""

import numpy as np

from vitplasticity.transformer import ParameterStore, ViTConfig, init_params


def perturbed_params(cfg: ViTConfig, seed: int) -> ParameterStore:
    """Parameters with every entry moved off its initial value.

    Unit gains and zero biases hide indexing mistakes, so all of them get
    random offsets here.
    """
    params = init_params(cfg)
    rng = np.random.default_rng(seed)
    for name in params.names():
        value = params[name]
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            params[name] = 1.0 + 0.3 * rng.standard_normal(value.shape)
        elif leaf in ("beta", "bias"):
            params[name] = 0.1 * rng.standard_normal(value.shape)
        else:
            params[name] = rng.standard_normal(value.shape) / np.sqrt(max(value.shape[-1], 1))
    return params


def random_images(cfg: ViTConfig, count: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((count, cfg.channels, cfg.image_size, cfg.image_size))


def fd_relative_errors(cfg, params, images, labels, h=1e-5):
    """Per-tensor ‖analytic − central difference‖_∞ / ‖central difference‖_∞."""
    from oracles import central_difference
    from vitplasticity.transformer import backward, cross_entropy, forward_batch

    _, grads, _ = backward(cfg, params, images, labels)
    errors = {}
    for name in params.trainable_names():
        base = params[name].copy()

        def loss_at(value, name=name):
            params[name] = value
            return cross_entropy(forward_batch(cfg, params, images), labels)[0]

        fd = central_difference(loss_at, base, h)
        params[name] = base
        scale = max(float(np.max(np.abs(fd))), 1e-12)
        errors[name] = float(np.max(np.abs(grads[name] - fd))) / scale
    return errors


# --------------------------------------------------------------------------
# pair constructions that enforce each bound's hypotheses


def equal_statistics_pairs(rng, count, n, d):
    """Pairs whose tokens share mean and std position by position."""
    x = rng.standard_normal((count, n, d)) * rng.uniform(0.5, 3.0, (1, n, 1)) + rng.standard_normal((1, n, 1))
    z = rng.standard_normal((count, n, d))
    z = (z - z.mean(-1, keepdims=True)) / z.std(-1, keepdims=True)
    y = z * x.std(-1, keepdims=True) + x.mean(-1, keepdims=True)
    return x, y


def nearby_pairs(rng, count, n, d):
    x = rng.standard_normal((count, n, d))
    y = x + rng.standard_normal(x.shape) * rng.uniform(1e-3, 1.0, (count, 1, 1))
    return x, y


def project_to_ball(a, radius):
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    return a * np.minimum(1.0, radius / np.maximum(norms, 1e-300))


def ball_pairs(rng, count, n, d, radius):
    """Pairs whose every token lies in the Euclidean ball of ``radius``."""
    x, y = nearby_pairs(rng, count, n, d)
    return project_to_ball(x * radius, radius), project_to_ball(y * radius, radius)


def energy_image_pairs(rng, count, shape, energy):
    """Image pairs with Σ pixel² ≤ ``energy`` for every image."""
    imgs = rng.standard_normal((count, *shape))
    imgs *= (np.sqrt(energy / np.sum(imgs**2, axis=(1, 2, 3))) * rng.uniform(0.0, 1.0, count))[:, None, None, None]
    other = imgs + rng.standard_normal(imgs.shape) * 0.05
    other *= np.minimum(1.0, np.sqrt(energy / np.sum(other**2, axis=(1, 2, 3))))[:, None, None, None]
    return imgs, other


def soundness_params(cfg, seed):
    """Matched-scale weights with random gains/offsets in block 0 and bias-free queries and keys."""
    from vitplasticity.transformer import init_params

    params = init_params(cfg)
    rng = np.random.default_rng(seed)
    for name in params.names():
        if name.endswith("qkv.bias"):
            params[name] = np.zeros_like(params[name])
        elif name.startswith("blocks.0.") and name.endswith(("bias", "beta", "gamma")):
            params[name] = rng.standard_normal(params[name].shape)
    return params


def soundness_ratios(cfg, params, rng, count, radii=(0.5, 2.0, 6.0)):
    """Largest measured-rate / bound ratio per bound for block 0 of one model."""
    from vitplasticity import bounds as B
    from vitplasticity.plasticity import batch_rates
    from vitplasticity.transformer import ComponentKind as K
    from vitplasticity.transformer import component_function, split_heads

    n, d = cfg.seq_len, cfg.embed_dim
    out = {}
    x, y = equal_statistics_pairs(rng, count, n, d)
    sigma = B.estimate_sigma_min(np.concatenate([x, y]))
    for kind in (K.LN1, K.LN2):
        rates = batch_rates(component_function(cfg, params, 0, kind), x, y)
        out[kind.value] = float(rates.max()) / B.ln_bound(params[f"blocks.0.{kind.value.lower()}.gamma"], sigma)
    for kind in (K.FC1, K.FC2):
        w = params[f"blocks.0.{kind.value.lower()}.weight"]
        xx, yy = nearby_pairs(rng, count, n, w.shape[1])
        rates = batch_rates(component_function(cfg, params, 0, kind), xx, yy)
        out[kind.value] = float(rates.max()) / B.fc_bound(w)
    heads = [B.head_norms(*h) for h in split_heads(params["blocks.0.mha.qkv.weight"], params["blocks.0.mha.out.weight"], cfg.num_heads)]
    mha = component_function(cfg, params, 0, K.MHA)
    out["MHA-ball"] = 0.0
    for radius in radii:
        xx, yy = ball_pairs(rng, count, n, d, radius)
        rates = batch_rates(mha, xx, yy)
        out["MHA-ball"] = max(out["MHA-ball"], float(rates.max()) / B.mha_bound(heads, n, radius).value)
    energy = float(rng.uniform(1.0, 300.0))
    imgs, other = energy_image_pairs(rng, count, (cfg.channels, cfg.image_size, cfg.image_size), energy)
    xx, yy = B.embed_patches_bias_free(cfg, params, imgs), B.embed_patches_bias_free(cfg, params, other)
    rates = batch_rates(mha, xx, yy)
    alpha = B.embedding_norm(params)
    out["MHA-energy"] = float(rates.max()) / B.mha_bound_tighter(heads, cfg.num_patches, alpha, energy).value
    return out
