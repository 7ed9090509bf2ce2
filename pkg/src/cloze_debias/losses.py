"""Cloze-task loss estimators and their gradients with respect to logits.

All four losses are weighted negative log-softmax sums over masked
positions, differing only in the per-term weight:

=========  ==========================================
cloze      1
ideal      relevance of the chosen item
ips        1 / static propensity of the target item
itps       1 / temporal propensity of the target item
=========  ==========================================

Targets are token ids (``0`` = no interaction at that position). Propensity
and relevance tensors are laid out ``(sequence, item, timestep)`` with the
0-based item axis ``token - 1``, aligned row-for-row with the logits.
"""

import numpy as np

from ._validation import DomainError


def softmax_over_items(logit_row):
    z = np.asarray(logit_row, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def full_normalizer(dims):
    """``|S| * |I| * T`` for ``dims = (|S|, |I|, T)``."""
    n_seq, n_items, T = dims
    return float(n_seq) * float(n_items) * float(T)


def _dims_of(logits, dims):
    if dims is None:
        B, T, n_items = np.shape(logits)
        return (B, n_items, T)
    return dims


def _active(mask, targets):
    mask = np.asarray(mask, dtype=bool)
    targets = np.asarray(targets, dtype=np.int64)
    return mask & (targets > 0)


def _gather(logp, targets, active):
    b, t = np.nonzero(active)
    return b, t, logp[b, t, targets[b, t] - 1]


def weighted_cloze_loss(logits, mask, targets, weights, normalizer):
    """``-(1/normalizer) * sum_{masked, interacted} w * log softmax(target)``.

    ``weights`` is a ``(B, T)`` array (or scalar) of per-term weights.
    Terms are accumulated in row-major order so results are bit-stable.
    """
    active = _active(mask, targets)
    if not active.any():
        return 0.0
    logp = log_softmax(logits)
    b, t, lp = _gather(logp, np.asarray(targets), active)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), active.shape)[b, t]
    return float(-(w * lp).sum() / normalizer)


def loss_grad_wrt_logits(logits, mask, weights, targets, normalizer):
    """Gradient of :func:`weighted_cloze_loss` with respect to the logits.

    At each masked interacted position: ``-(w / normalizer) * (onehot(target) - softmax)``;
    zero elsewhere.
    """
    logits = np.asarray(logits, dtype=np.float64)
    grad = np.zeros_like(logits)
    targets = np.asarray(targets)
    active = _active(mask, targets)
    if not active.any():
        return grad
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), active.shape)
    if np.any(w[active] < 0) or not np.all(np.isfinite(w[active])):
        raise ValueError("loss weights must be finite and >= 0")
    b, t = np.nonzero(active)
    probs = softmax_over_items(logits[b, t])
    probs[np.arange(len(b)), targets[b, t] - 1] -= 1.0
    grad[b, t] = (w[b, t] / normalizer)[:, None] * probs
    return grad


def cloze_loss(logits, mask, targets, dims=None):
    return weighted_cloze_loss(logits, mask, targets, 1.0, full_normalizer(_dims_of(logits, dims)))


def ideal_weights(mask, choice, gamma):
    """Relevance of the chosen item at each masked position (0 elsewhere)."""
    active = _active(mask, choice)
    w = np.zeros(active.shape)
    b, t = np.nonzero(active)
    w[b, t] = np.asarray(gamma)[b, np.asarray(choice)[b, t] - 1, t]
    return w


def ideal_loss(logits, mask, choice, gamma, dims=None):
    """Relevance-weighted Cloze loss assuming every item was exposed."""
    w = ideal_weights(mask, choice, gamma)
    return weighted_cloze_loss(logits, mask, choice, w, full_normalizer(_dims_of(logits, dims)))


def ips_weights(mask, targets, theta_static):
    """``1 / theta[s, target]`` at masked interacted positions."""
    active = _active(mask, targets)
    theta = np.asarray(theta_static, dtype=np.float64)
    if theta.ndim == 1:
        theta = np.broadcast_to(theta, (active.shape[0], theta.shape[0]))
    w = np.zeros(active.shape)
    b, t = np.nonzero(active)
    th = theta[b, np.asarray(targets)[b, t] - 1]
    if np.any(th <= 0):
        raise DomainError("zero static propensity at an interacted entry; smooth first")
    w[b, t] = 1.0 / th
    return w


def itps_weights(mask, targets, theta_temporal):
    """``1 / theta[s, target, t]`` at masked interacted positions."""
    active = _active(mask, targets)
    theta = np.asarray(theta_temporal, dtype=np.float64)
    w = np.zeros(active.shape)
    b, t = np.nonzero(active)
    th = theta[b, np.asarray(targets)[b, t] - 1, t]
    if np.any(th <= 0):
        raise DomainError("zero temporal propensity at an interacted entry; smooth first")
    w[b, t] = 1.0 / th
    return w


def ips_loss(logits, mask, targets, theta_static, dims=None):
    w = ips_weights(mask, targets, theta_static)
    return weighted_cloze_loss(logits, mask, targets, w, full_normalizer(_dims_of(logits, dims)))


def itps_loss(logits, mask, targets, theta_temporal, dims=None):
    w = itps_weights(mask, targets, theta_temporal)
    return weighted_cloze_loss(logits, mask, targets, w, full_normalizer(_dims_of(logits, dims)))
