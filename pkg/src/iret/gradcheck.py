"""Central finite-difference checks of the hand-written gradients."""

import numpy as np

from .aggregate import AggregatorConfig
from .encoder import backward, forward, init_params
from .losses import bin_centers, ntxent, quantized_ap_loss, similarity_matrix
from .seeding import generator
from .whiten import l2_normalize

STEP = 1e-5
# entries whose true derivative is below this are compared absolutely
FLOOR = 1e-7


def rel_error(analytic, numeric):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FLOOR)
    return float((np.abs(analytic - numeric) / denom).max())


def numeric_grad(f, x, indices=None, step=STEP):
    """Central differences of scalar ``f`` at ``x`` (perturbed in place, restored)."""
    flat = x.reshape(-1)
    indices = range(flat.size) if indices is None else indices
    out = []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        out.append((up - down) / (2.0 * step))
    return np.array(out)


def near_kink(Z, bins, margin=1e-3):
    """True if any off-diagonal score sits within ``margin`` of a bin center."""
    S = similarity_matrix(Z)
    off = S[~np.eye(len(S), dtype=bool)]
    centers, _ = bin_centers(bins)
    return bool((np.abs(off[:, None] - centers) < margin).any())


def random_labels(rng, B, per_label=2):
    labels = np.repeat(np.arange(B // per_label), per_label)
    return rng.permutation(labels)


def check_embedding_grads(seed, B=8, d=6, temperature=0.5, bins=20):
    """Max relative error of NT-Xent and quantized-AP gradients w.r.t. embeddings."""
    rng = generator(seed, "gradcheck", "embeddings")
    Z = l2_normalize(rng.normal(size=(B, d)))
    labels = random_labels(rng, B)
    while near_kink(Z, bins):
        Z = l2_normalize(rng.normal(size=(B, d)))

    res = ntxent(Z, temperature)
    num = numeric_grad(lambda: ntxent(Z, temperature).value, Z)
    err_nt = rel_error(res.grad.reshape(-1), num)

    res = quantized_ap_loss(Z, labels, bins)
    num = numeric_grad(lambda: quantized_ap_loss(Z, labels, bins).value, Z)
    err_ap = rel_error(res.grad.reshape(-1), num)
    return {"ntxent": err_nt, "ap": err_ap}


def _pattern(cache, bins=None, scores=None):
    """Which side of every kink the current point sits on."""
    parts = [cache["c1"] > 0, cache["c2"] > 0]
    if "hp" in cache:
        parts.append(cache["hp"] > 0)
    if scores is not None:
        centers, _ = bin_centers(bins)
        off = scores[~np.eye(len(scores), dtype=bool)]
        parts.append(off[:, None] > centers)
    return b"".join(np.packbits(p).tobytes() for p in parts)


def smooth_numeric_grad(f, x, indices, step=STEP):
    """Central differences that skip coordinates whose stencil crosses a kink.

    ``f`` returns ``(value, pattern)``. Returns ``(kept_indices, grads)``.
    """
    flat = x.reshape(-1)
    _, base = f()
    kept, out = [], []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + step
        up, pat_up = f()
        flat[i] = orig - step
        down, pat_down = f()
        flat[i] = orig
        if pat_up == base and pat_down == base:
            kept.append(i)
            out.append((up - down) / (2.0 * step))
    return np.array(kept, dtype=int), np.array(out)


def check_encoder_grads(seed, n_images=4, per_tensor=24, temperature=0.5, bins=20, pooling=None):
    """Max relative error over sampled entries of every parameter tensor.

    NT-Xent is checked through the projection head, quantized AP through the
    encoder descriptor. Also returns how many sampled coordinates were skipped
    because the finite-difference stencil crossed a ReLU or binning kink.
    """
    pooling = pooling or AggregatorConfig()
    rng = generator(seed, "gradcheck", "encoder")
    params = init_params(rng)
    for name in params:
        if "_b" in name:
            params[name] = rng.normal(0.0, 0.05, size=params[name].shape)
    images = rng.uniform(0.0, 1.0, size=(n_images, 3, 32, 32))
    labels = np.repeat(np.arange(n_images // 2), 2)

    def nt_loss():
        z, cache = forward(params, images, pooling, head=True)
        return ntxent(z, temperature).value, _pattern(cache)

    def ap_loss():
        f, cache = forward(params, images, pooling)
        return quantized_ap_loss(f, labels, bins).value, _pattern(cache, bins, similarity_matrix(f))

    z, cache = forward(params, images, pooling, head=True)
    g_nt = backward(params, ntxent(z, temperature).grad, cache, pooling)
    f, cache = forward(params, images, pooling)
    g_ap = backward(params, quantized_ap_loss(f, labels, bins).grad, cache, pooling)

    errors = {"ntxent": 0.0, "ap": 0.0, "skipped": 0, "checked": 0}
    for name, p in params.items():
        k = min(per_tensor, p.size)
        idx = rng.choice(p.size, size=k, replace=False)
        checks = [("ntxent", nt_loss, g_nt)]
        if name in g_ap:
            checks.append(("ap", ap_loss, g_ap))
        for key, loss, grads in checks:
            kept, num = smooth_numeric_grad(loss, p, idx)
            errors["skipped"] += k - len(kept)
            errors["checked"] += len(kept)
            if len(kept):
                errors[key] = max(errors[key], rel_error(grads[name].reshape(-1)[kept], num))
    return errors


def run_suite(seed, trials=20, encoder_trials=5):
    """Worst relative errors over all trials, plus the kink-skip tally."""
    worst = {"embedding_ntxent": 0.0, "embedding_ap": 0.0, "encoder_ntxent": 0.0, "encoder_ap": 0.0}
    skipped = checked = 0
    for t in range(trials):
        e = check_embedding_grads(seed * 1000 + t)
        worst["embedding_ntxent"] = max(worst["embedding_ntxent"], e["ntxent"])
        worst["embedding_ap"] = max(worst["embedding_ap"], e["ap"])
    for t in range(encoder_trials):
        e = check_encoder_grads(seed * 1000 + t)
        worst["encoder_ntxent"] = max(worst["encoder_ntxent"], e["ntxent"])
        worst["encoder_ap"] = max(worst["encoder_ap"], e["ap"])
        skipped += e["skipped"]
        checked += e["checked"]
    return worst, checked, skipped
