"""Central finite-difference checks for the encoder, the losses and the TF models."""

import numpy as np

from .data import apply_cloze_mask, SequenceDataset
from .encoder import EncoderConfig, backward, forward, init_params
from .losses import loss_grad_wrt_logits, weighted_cloze_loss
from .synth import TFParams, tf_loss_and_grad


def relative_error(analytic, numeric):
    """``max|a - n| / max(max|a|, max|n|, 1e-12)`` over a whole tensor."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def numeric_grad(f, x, h=1e-6, entries=None):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place).

    ``entries`` restricts the check to a list of flat indices; other entries
    stay zero in the result.
    """
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    idx = range(flat.size) if entries is None else entries
    for j in idx:
        old = flat[j]
        flat[j] = old + h
        fp = f()
        flat[j] = old - h
        fm = f()
        flat[j] = old
        gflat[j] = (fp - fm) / (2 * h)
    return g


def _random_weights(rng, shape):
    return rng.uniform(0.2, 3.0, size=shape)


def check_encoder(seed=0, item_count=6, T=5, hidden_units=8, blocks=2, heads=2, batch=3,
                  h=1e-6, max_entries=40):
    """Per-tensor relative error of encoder gradients under a weighted Cloze loss.

    Uses a random masked batch (with padding) and random positive weights.
    At most ``max_entries`` entries per tensor are perturbed.
    """
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(item_count=item_count, T=T, hidden_units=hidden_units, blocks=blocks,
                        heads=heads, seed=seed)
    params = init_params(cfg)
    # larger weights than the training init so every nonlinearity is exercised
    for _, v in params.items():
        v += 0.3 * rng.standard_normal(v.shape)
    tokens = rng.integers(1, item_count + 1, size=(batch, T))
    tokens[0, :2] = 0
    tokens[1, :1] = 0
    ds = SequenceDataset(tokens, item_count)
    mb = apply_cloze_mask(ds, 0.5, seed)
    w = _random_weights(rng, (batch, T))
    norm = float(max(mb.mask_indicator.sum(), 1))

    def loss():
        logits, _ = forward(params, mb)
        return weighted_cloze_loss(logits, mb.mask_indicator, mb.labels, w, norm)

    logits, cache = forward(params, mb)
    grads = backward(cache, loss_grad_wrt_logits(logits, mb.mask_indicator, w, mb.labels, norm))
    errors = {}
    for name, v in params.items():
        n = v.size
        entries = None if n <= max_entries else rng.choice(n, size=max_entries, replace=False)
        num = numeric_grad(loss, v, h, entries)
        ana = grads[name]
        if entries is not None:
            keep = np.zeros(n, dtype=bool)
            keep[entries] = True
            ana = np.where(keep.reshape(v.shape), ana, 0.0)
        errors[name] = relative_error(ana, num)
    return errors


def check_tf(loss="mse", seed=0, shape=(3, 4, 5), d=3, n=25, h=1e-6):
    """Relative error of the TF gradient for ``loss`` in {'mse', 'bce'} per factor matrix."""
    rng = np.random.default_rng(seed)
    params = TFParams(*(rng.standard_normal((k, d)) for k in shape))
    X = np.column_stack([rng.integers(0, k, size=n) for k in shape])
    y = rng.integers(1, 6, size=n).astype(float) if loss == "mse" else rng.integers(0, 2, size=n).astype(float)
    _, g = tf_loss_and_grad(params, X, y, loss)
    errors = {}
    for name in ("P", "Q", "W"):
        num = numeric_grad(lambda: tf_loss_and_grad(params, X, y, loss)[0], getattr(params, name), h)
        errors[name] = relative_error(getattr(g, name), num)
    return errors


def check_losses(seed=0, shape=(3, 4, 6), h=1e-6):
    """Relative error of :func:`loss_grad_wrt_logits` against finite differences."""
    rng = np.random.default_rng(seed)
    B, T, n_items = shape
    logits = rng.standard_normal(shape)
    mask = rng.random((B, T)) < 0.6
    targets = rng.integers(1, n_items + 1, size=(B, T))
    w = _random_weights(rng, (B, T))
    norm = float(B * T * n_items)
    ana = loss_grad_wrt_logits(logits, mask, w, targets, norm)
    num = numeric_grad(lambda: weighted_cloze_loss(logits, mask, targets, w, norm), logits, h)
    return {"logits": relative_error(ana, num)}


def run_all(seed=0):
    """Max relative error per suite: ``{'encoder': .., 'tf_mse': .., 'tf_bce': .., 'losses': ..}``."""
    return {
        "encoder": max(check_encoder(seed=seed).values()),
        "tf_mse": max(check_tf("mse", seed=seed).values()),
        "tf_bce": max(check_tf("bce", seed=seed).values()),
        "losses": max(check_losses(seed=seed).values()),
    }
