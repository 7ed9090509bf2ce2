"""Bidirectional self-attention encoder with exact reverse-mode gradients.

Post-norm transformer blocks (multi-head attention, GELU feed-forward), learned
position embeddings, output projection tied to the item embedding rows plus a
free bias. Padding positions are masked out of attention as keys and produce a
zero attention output as queries.
"""

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import erf

from ._validation import check_tokens
from .data import MaskedBatch

LN_EPS = 1e-12
_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class EncoderConfig:
    item_count: int
    T: int
    hidden_units: int = 16
    blocks: int = 1
    heads: int = 1
    dropout_rate: float = 0.0
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.blocks < 1 or self.heads < 1:
            raise ValueError("blocks and heads must be >= 1")
        if self.hidden_units % self.heads:
            raise ValueError(
                f"hidden_units ({self.hidden_units}) must be divisible by heads ({self.heads})"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.item_count < 1 or self.T < 1:
            raise ValueError("item_count and T must be >= 1")

    @property
    def head_dim(self):
        return self.hidden_units // self.heads


class EncoderParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self):
        return EncoderParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def n_parameters(self):
        return sum(v.size for v in self.tensors.values())


def _block_names(l):
    p = f"blocks.{l}."
    return {k: p + k for k in (
        "wq", "wk", "wv", "wo", "ln1_g", "ln1_b",
        "ff_w1", "ff_b1", "ff_w2", "ff_b2", "ln2_g", "ln2_b",
    )}


def init_params(config):
    """Normal(0, 0.02^2) weights; layer-norm scales 1; biases and shifts 0."""
    rng = np.random.default_rng(config.seed)
    dt = np.dtype(config.dtype)
    h, n_items = config.hidden_units, config.item_count

    def normal(*shape):
        return (0.02 * rng.standard_normal(shape)).astype(dt)

    t = {
        "item_emb": normal(n_items + 2, h),
        "pos_emb": normal(config.T, h),
    }
    for l in range(config.blocks):
        n = _block_names(l)
        for k in ("wq", "wk", "wv", "wo"):
            t[n[k]] = normal(h, h)
        t[n["ln1_g"]] = np.ones(h, dt)
        t[n["ln1_b"]] = np.zeros(h, dt)
        t[n["ff_w1"]] = normal(h, 4 * h)
        t[n["ff_b1"]] = np.zeros(4 * h, dt)
        t[n["ff_w2"]] = normal(4 * h, h)
        t[n["ff_b2"]] = np.zeros(h, dt)
        t[n["ln2_g"]] = np.ones(h, dt)
        t[n["ln2_b"]] = np.zeros(h, dt)
    t["out_bias"] = np.zeros(n_items, dt)
    return EncoderParams(config, t)


def _gelu(z):
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def _gelu_grad(z):
    return 0.5 * (1.0 + erf(z / _SQRT2)) + z * _INV_SQRT2PI * np.exp(-0.5 * z * z)


def _layer_norm(u, g, b):
    mu = u.mean(axis=-1, keepdims=True)
    var = u.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (u - mu) * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_backward(dy, g, cache):
    xhat, inv = cache
    dg = np.einsum("bth,bth->h", dy, xhat)
    db = dy.sum(axis=(0, 1))
    dxhat = dy * g
    du = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return du, dg, db


def _dropout(x, rate, rng):
    if rate == 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


def _split_heads(x, A):
    B, T, h = x.shape
    return x.reshape(B, T, A, h // A).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, A, T, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, A * d)


def forward(params, batch, rng=None):
    """Score every real item at every position.

    ``batch`` is a :class:`MaskedBatch` or a token matrix (mask tokens
    allowed). Passing ``rng`` enables dropout (when the config rate is > 0).
    Returns ``(logits, cache)`` with logits of shape ``(B, T, item_count)``.
    """
    cfg = params.config
    tokens = batch.masked_tokens if isinstance(batch, MaskedBatch) else batch
    tokens = check_tokens(tokens, cfg.item_count, allow_mask=True)
    B, T = tokens.shape
    if T != cfg.T:
        raise ValueError(f"batch has T={T}, encoder expects T={cfg.T}")
    A, dh = cfg.heads, cfg.head_dim
    valid = tokens != 0
    key_bias = np.where(valid, 0.0, -np.inf)[:, None, None, :]
    qmask = valid[:, None, :, None].astype(params["item_emb"].dtype)
    any_key = valid.any(axis=1)[:, None, None, None]

    x = params["item_emb"][tokens] + params["pos_emb"][None]
    x, emb_keep = _dropout(x, cfg.dropout_rate, rng)
    layers = []
    for l in range(cfg.blocks):
        n = _block_names(l)
        q = _split_heads(x @ params[n["wq"]], A)
        k = _split_heads(x @ params[n["wk"]], A)
        v = _split_heads(x @ params[n["wv"]], A)
        scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh) + key_bias
        if any_key.all():
            smax = scores.max(axis=-1, keepdims=True)
        else:
            smax = np.where(any_key, scores.max(axis=-1, keepdims=True), 0.0)
        e = np.exp(scores - smax)
        denom = e.sum(axis=-1, keepdims=True)
        p = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
        pq = p * qmask
        ctx = _merge_heads(pq @ v)
        a = ctx @ params[n["wo"]]
        a, a_keep = _dropout(a, cfg.dropout_rate, rng)
        x1, ln1 = _layer_norm(x + a, params[n["ln1_g"]], params[n["ln1_b"]])
        z = x1 @ params[n["ff_w1"]] + params[n["ff_b1"]]
        gz = _gelu(z)
        f = gz @ params[n["ff_w2"]] + params[n["ff_b2"]]
        f, f_keep = _dropout(f, cfg.dropout_rate, rng)
        x_out, ln2 = _layer_norm(x1 + f, params[n["ln2_g"]], params[n["ln2_b"]])
        layers.append(dict(x=x, q=q, k=k, v=v, p=p, qmask=qmask, ctx=ctx, a_keep=a_keep,
                           ln1=ln1, x1=x1, z=z, gz=gz, f_keep=f_keep, ln2=ln2))
        x = x_out
    out_w = params["item_emb"][1:cfg.item_count + 1]
    logits = x @ out_w.T + params["out_bias"]
    cache = dict(params=params, tokens=tokens, emb_keep=emb_keep, layers=layers, h_final=x)
    return logits, cache


def backward(cache, dlogits):
    """Gradients of ``sum(dlogits * logits)`` with respect to every parameter."""
    params = cache["params"]
    cfg = params.config
    tokens = cache["tokens"]
    B, T = tokens.shape
    dlogits = np.asarray(dlogits)
    if dlogits.shape != (B, T, cfg.item_count):
        raise ValueError(
            f"dlogits shape {dlogits.shape} does not match logits {(B, T, cfg.item_count)}"
        )
    A, dh = cfg.heads, cfg.head_dim
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    x = cache["h_final"]
    out_w = params["item_emb"][1:cfg.item_count + 1]
    grads["out_bias"] += dlogits.sum(axis=(0, 1))
    grads["item_emb"][1:cfg.item_count + 1] += np.einsum("bti,bth->ih", dlogits, x)
    dx = dlogits @ out_w

    for l in reversed(range(cfg.blocks)):
        n = _block_names(l)
        c = cache["layers"][l]
        du2, grads[n["ln2_g"]], grads[n["ln2_b"]] = _layer_norm_backward(dx, params[n["ln2_g"]], c["ln2"])
        dx1 = du2
        df = du2 if c["f_keep"] is None else du2 * c["f_keep"]
        grads[n["ff_w2"]] = np.einsum("btk,bth->kh", c["gz"], df)
        grads[n["ff_b2"]] = df.sum(axis=(0, 1))
        dz = (df @ params[n["ff_w2"]].T) * _gelu_grad(c["z"])
        grads[n["ff_w1"]] = np.einsum("bth,btk->hk", c["x1"], dz)
        grads[n["ff_b1"]] = dz.sum(axis=(0, 1))
        dx1 = dx1 + dz @ params[n["ff_w1"]].T

        du, grads[n["ln1_g"]], grads[n["ln1_b"]] = _layer_norm_backward(dx1, params[n["ln1_g"]], c["ln1"])
        dx = du
        da = du if c["a_keep"] is None else du * c["a_keep"]
        grads[n["wo"]] = np.einsum("bth,btk->hk", c["ctx"], da)
        dctx = _split_heads(da @ params[n["wo"]].T, A)
        p, v, q, k = c["p"], c["v"], c["q"], c["k"]
        dpq = dctx @ v.transpose(0, 1, 3, 2)
        dv = (p * c["qmask"]).transpose(0, 1, 3, 2) @ dctx
        dp = dpq * c["qmask"]
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        xin = c["x"]
        dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
        grads[n["wq"]] = np.einsum("bth,btk->hk", xin, dq)
        grads[n["wk"]] = np.einsum("bth,btk->hk", xin, dk)
        grads[n["wv"]] = np.einsum("bth,btk->hk", xin, dv)
        dx = dx + dq @ params[n["wq"]].T + dk @ params[n["wk"]].T + dv @ params[n["wv"]].T

    if cache["emb_keep"] is not None:
        dx = dx * cache["emb_keep"]
    grads["pos_emb"] += dx.sum(axis=0)
    np.add.at(grads["item_emb"], tokens.ravel(), dx.reshape(-1, cfg.hidden_units))
    return EncoderParams(cfg, grads)


def sgd_step(params, grads, lr):
    """Plain gradient descent: ``params - lr * grads``."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    return EncoderParams(params.config, {k: v - lr * grads[k] for k, v in params.items()})


class Adam:
    """Adam optimizer state over an :class:`EncoderParams` tree."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params, grads):
        if self.m is None:
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        new = {}
        for k, w in params.items():
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * w
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            new[k] = w - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return EncoderParams(params.config, new)


def save_params(params, directory):
    """Write ``manifest.json`` + ``params.bin`` (little-endian, row-major)."""
    os.makedirs(directory, exist_ok=True)
    entries, offset = [], 0
    with open(os.path.join(directory, "params.bin"), "wb") as fh:
        for name, arr in params.items():
            data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
            fh.write(data.tobytes(order="C"))
            entries.append({"name": name, "shape": list(arr.shape),
                            "dtype": arr.dtype.name, "offset": offset})
            offset += data.nbytes
    manifest = {"config": asdict(params.config), "tensors": entries}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_params(directory):
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    with open(os.path.join(directory, "params.bin"), "rb") as fh:
        blob = fh.read()
    tensors = {}
    for e in manifest["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(e["dtype"])
    return EncoderParams(EncoderConfig(**manifest["config"]), tensors)
