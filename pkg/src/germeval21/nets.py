"""NumPy transformer used by the tiny_test backbone.

Pre-LN encoder blocks (attention + GELU MLP, residual connections, final
LayerNorm) with explicit forward caches and hand-written backward passes.
Everything is a pure function over a flat {name: ndarray} parameter dict, so
optimizers, checkpointing, and finite-difference checks stay trivial.

Masked key positions receive an additive -1e4 before softmax; exp(-1e4)
underflows to exactly 0.0 in every supported dtype (including float16, where
-1e9 would not even be representable), so padding cannot leak into real
positions and padded parameter gradients are exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MASK_BIAS = -1e4
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class NetConfig:
    vocab_size: int
    max_positions: int
    hidden_size: int
    num_heads: int
    num_layers: int

    @property
    def ffn_size(self) -> int:
        return 4 * self.hidden_size

    @property
    def head_dim(self) -> int:
        if self.hidden_size % self.num_heads:
            raise ValueError("hidden_size must be divisible by num_heads")
        return self.hidden_size // self.num_heads


def init_params(config: NetConfig, rng: np.random.Generator, scale: float = 0.02) -> dict[str, np.ndarray]:
    """Gaussian(0, scale) weights, zero biases, unit LayerNorm gains; float32."""
    d, f = config.hidden_size, config.ffn_size

    def w(*shape):
        return (rng.standard_normal(shape) * scale).astype(np.float32)

    def zeros(*shape):
        return np.zeros(shape, dtype=np.float32)

    def ones(*shape):
        return np.ones(shape, dtype=np.float32)

    params: dict[str, np.ndarray] = {
        "tok_emb": w(config.vocab_size, d),
        "pos_emb": w(config.max_positions, d),
        "ln_f.g": ones(d),
        "ln_f.b": zeros(d),
    }
    for l in range(config.num_layers):
        p = f"layer{l}."
        params[p + "ln1.g"] = ones(d)
        params[p + "ln1.b"] = zeros(d)
        params[p + "attn.Wq"] = w(d, d)
        params[p + "attn.bq"] = zeros(d)
        params[p + "attn.Wk"] = w(d, d)
        params[p + "attn.bk"] = zeros(d)
        params[p + "attn.Wv"] = w(d, d)
        params[p + "attn.bv"] = zeros(d)
        params[p + "attn.Wo"] = w(d, d)
        params[p + "attn.bo"] = zeros(d)
        params[p + "ln2.g"] = ones(d)
        params[p + "ln2.b"] = zeros(d)
        params[p + "mlp.W1"] = w(d, f)
        params[p + "mlp.b1"] = zeros(f)
        params[p + "mlp.W2"] = w(f, d)
        params[p + "mlp.b2"] = zeros(d)
    return params


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    dt = (1.0 - t**2) * _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * dt


def _linear_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w + b, (x, w)


def _linear_bwd(dout: np.ndarray, cache):
    x, w = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = x2.T @ d2
    db = d2.sum(axis=0)
    dx = dout @ w.T
    return dx, dw, db


def _layernorm_fwd(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _layernorm_bwd(dout: np.ndarray, cache):
    xhat, inv, g = cache
    dg = (dout * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    dxhat = dout * g
    mean1 = dxhat.mean(axis=-1, keepdims=True)
    mean2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean1 - xhat * mean2)
    return dx, dg, db


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, num_heads, d // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _attention_fwd(x, mask_bias, params, prefix, num_heads):
    q, cq = _linear_fwd(x, params[prefix + "Wq"], params[prefix + "bq"])
    k, ck = _linear_fwd(x, params[prefix + "Wk"], params[prefix + "bk"])
    v, cv = _linear_fwd(x, params[prefix + "Wv"], params[prefix + "bv"])
    qh = _split_heads(q, num_heads)
    kh = _split_heads(k, num_heads)
    vh = _split_heads(v, num_heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    scores = qh @ kh.transpose(0, 1, 3, 2) * scale + mask_bias
    attn = _softmax(scores)
    ctx = _merge_heads(attn @ vh)
    out, co = _linear_fwd(ctx, params[prefix + "Wo"], params[prefix + "bo"])
    return out, (cq, ck, cv, co, qh, kh, vh, attn, scale, num_heads)


def _attention_bwd(dout, cache, grads, prefix):
    cq, ck, cv, co, qh, kh, vh, attn, scale, num_heads = cache
    dctx, dwo, dbo = _linear_bwd(dout, co)
    grads[prefix + "Wo"] = dwo
    grads[prefix + "bo"] = dbo
    dctx_h = _split_heads(dctx, num_heads)
    dattn = dctx_h @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ dctx_h
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dqh = dscores @ kh * scale
    dkh = dscores.transpose(0, 1, 3, 2) @ qh * scale
    dx = np.zeros_like(cq[0])
    for dh, c, wkey, bkey in (
        (dqh, cq, "Wq", "bq"),
        (dkh, ck, "Wk", "bk"),
        (dvh, cv, "Wv", "bv"),
    ):
        dxi, dw, db = _linear_bwd(_merge_heads(dh), c)
        grads[prefix + wkey] = dw
        grads[prefix + bkey] = db
        dx += dxi
    return dx


def forward(
    params: dict[str, np.ndarray],
    ids: np.ndarray,
    mask: np.ndarray,
    config: NetConfig,
    causal: bool = False,
):
    """Run the network; returns (hidden [B,T,D], cache for `backward`).

    `ids` and `mask` are int arrays of shape [B,T]; T must fit max_positions.
    """
    b, t = ids.shape
    if t > config.max_positions:
        raise ValueError(f"sequence length {t} exceeds {config.max_positions} positions")
    dtype = params["tok_emb"].dtype
    x = params["tok_emb"][ids] + params["pos_emb"][:t]
    mask_bias = ((1 - mask).astype(dtype) * dtype.type(MASK_BIAS))[:, None, None, :]
    if causal:
        future = np.triu(np.ones((t, t), dtype=dtype), k=1) * dtype.type(MASK_BIAS)
        mask_bias = mask_bias + future[None, None, :, :]

    layer_caches = []
    for l in range(config.num_layers):
        p = f"layer{l}."
        ln1_out, c_ln1 = _layernorm_fwd(x, params[p + "ln1.g"], params[p + "ln1.b"])
        attn_out, c_attn = _attention_fwd(ln1_out, mask_bias, params, p + "attn.", config.num_heads)
        x = x + attn_out
        ln2_out, c_ln2 = _layernorm_fwd(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h1, c_w1 = _linear_fwd(ln2_out, params[p + "mlp.W1"], params[p + "mlp.b1"])
        act = _gelu(h1)
        mlp_out, c_w2 = _linear_fwd(act, params[p + "mlp.W2"], params[p + "mlp.b2"])
        x = x + mlp_out
        layer_caches.append((c_ln1, c_attn, c_ln2, c_w1, h1, c_w2))

    hidden, c_lnf = _layernorm_fwd(x, params["ln_f.g"], params["ln_f.b"])
    cache = (ids, t, layer_caches, c_lnf, config)
    return hidden, cache


def backward(dhidden: np.ndarray, cache) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss wrt every parameter, given d(loss)/d(hidden)."""
    ids, t, layer_caches, c_lnf, config = cache
    grads: dict[str, np.ndarray] = {}
    dx, grads["ln_f.g"], grads["ln_f.b"] = _layernorm_bwd(dhidden, c_lnf)

    for l in reversed(range(config.num_layers)):
        p = f"layer{l}."
        c_ln1, c_attn, c_ln2, c_w1, h1, c_w2 = layer_caches[l]
        dact, dw2, db2 = _linear_bwd(dx, c_w2)
        grads[p + "mlp.W2"] = dw2
        grads[p + "mlp.b2"] = db2
        dh1 = dact * _gelu_grad(h1)
        dln2, dw1, db1 = _linear_bwd(dh1, c_w1)
        grads[p + "mlp.W1"] = dw1
        grads[p + "mlp.b1"] = db1
        dx2, dg2, dbb2 = _layernorm_bwd(dln2, c_ln2)
        grads[p + "ln2.g"] = dg2
        grads[p + "ln2.b"] = dbb2
        dx = dx + dx2
        dln1 = _attention_bwd(dx, c_attn, grads, p + "attn.")
        dx1, dg1, dbb1 = _layernorm_bwd(dln1, c_ln1)
        grads[p + "ln1.g"] = dg1
        grads[p + "ln1.b"] = dbb1
        dx = dx + dx1

    demb = dx
    dtok = np.zeros((config.vocab_size, demb.shape[-1]), dtype=demb.dtype)
    np.add.at(dtok, cache[0], demb)
    grads["tok_emb"] = dtok
    dpos = np.zeros((config.max_positions, demb.shape[-1]), dtype=demb.dtype)
    dpos[:t] = demb.sum(axis=0)
    grads["pos_emb"] = dpos
    return grads


def pool_forward(hidden: np.ndarray, mask: np.ndarray, rule: str):
    """Collapse [B,T,D] hidden states to [B,D] per the pooling rule."""
    if rule == "cls_token":
        cache = ("cls_token", hidden.shape, mask)
        return hidden[:, 0, :], cache
    if rule == "last_nonpad_token":
        last = mask.sum(axis=1) - 1
        if np.any(last < 0):
            raise ValueError("a sequence has no real tokens")
        rows = np.arange(hidden.shape[0])
        cache = ("last_nonpad_token", hidden.shape, (rows, last))
        return hidden[rows, last, :], cache
    if rule == "mean":
        counts = mask.sum(axis=1, keepdims=True).astype(hidden.dtype)
        if np.any(counts == 0):
            raise ValueError("a sequence has no real tokens")
        m = mask.astype(hidden.dtype)[:, :, None]
        pooled = (hidden * m).sum(axis=1) / counts
        cache = ("mean", hidden.shape, (m, counts))
        return pooled, cache
    raise ValueError(f"unknown pooling rule {rule!r}")


def pool_backward(dpooled: np.ndarray, cache) -> np.ndarray:
    rule, shape, extra = cache
    dhidden = np.zeros(shape, dtype=dpooled.dtype)
    if rule == "cls_token":
        dhidden[:, 0, :] = dpooled
    elif rule == "last_nonpad_token":
        rows, last = extra
        dhidden[rows, last, :] = dpooled
    else:
        m, counts = extra
        dhidden += dpooled[:, None, :] * m / counts[:, :, None]
    return dhidden


def cast_params(params: dict[str, np.ndarray], dtype) -> dict[str, np.ndarray]:
    """View of the parameter dict in the requested compute dtype."""
    return {k: (v if v.dtype == dtype else v.astype(dtype)) for k, v in params.items()}
