"""Transformer building blocks and the AdamW optimizer on top of autodiff.

Models in this package are plain classes holding an ordered ``params``
dict of named leaf tensors; everything here is a function over those
tensors, so parameter manifests, checkpoints, and gradient checks can
treat all models uniformly.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from . import autodiff as ad
from . import rng as rng_mod

INIT_STD = 0.02


class ParamStore:
    """Ordered registry of named trainable tensors."""

    def __init__(self, dtype=np.float32):
        self.dtype = dtype
        self.params: dict[str, ad.Tensor] = {}

    def add(self, name, data):
        if name in self.params:
            raise ValueError(f"duplicate parameter '{name}'")
        t = ad.Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def normal(self, name, shape, gen, std=INIT_STD):
        return self.add(name, rng_mod.truncated_normal(gen, shape, std=std, dtype=self.dtype))

    def zeros(self, name, shape):
        return self.add(name, np.zeros(shape, dtype=self.dtype))

    def ones(self, name, shape):
        return self.add(name, np.ones(shape, dtype=self.dtype))

    def __getitem__(self, name):
        return self.params[name]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=self.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for '{k}': {arr.shape} vs {p.data.shape}")
            p.data = arr

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for k in self.params:
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        return h.hexdigest()


def add_linear(store, prefix, d_in, d_out, gen):
    store.normal(f"{prefix}.weight", (d_in, d_out), gen)
    store.zeros(f"{prefix}.bias", (d_out,))


def apply_linear(store, prefix, x):
    return ad.linear(x, store[f"{prefix}.weight"], store[f"{prefix}.bias"])


def add_layer_norm(store, prefix, d):
    store.ones(f"{prefix}.gain", (d,))
    store.zeros(f"{prefix}.bias", (d,))


def apply_layer_norm(store, prefix, x):
    return ad.layer_norm(x, store[f"{prefix}.gain"], store[f"{prefix}.bias"])


def _split_heads(x, n_heads):
    # (B, N, d) -> (B, H, N, d/H)
    b, n, d = x.shape
    dh = d // n_heads
    return ad.transpose(ad.reshape(x, (b, n, n_heads, dh)), (0, 2, 1, 3))


def _merge_heads(x):
    # (B, H, N, dh) -> (B, N, d)
    b, h, n, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def add_attention(store, prefix, d_model, d_kv, gen):
    """Attention parameters; keys/values may live in a different input dim."""
    store.normal(f"{prefix}.wq", (d_model, d_model), gen)
    store.zeros(f"{prefix}.bq", (d_model,))
    store.normal(f"{prefix}.wk", (d_kv, d_model), gen)
    store.zeros(f"{prefix}.bk", (d_model,))
    store.normal(f"{prefix}.wv", (d_kv, d_model), gen)
    store.zeros(f"{prefix}.bv", (d_model,))
    store.normal(f"{prefix}.wo", (d_model, d_model), gen)
    store.zeros(f"{prefix}.bo", (d_model,))


def apply_attention(store, prefix, query, keyval, n_heads):
    """Multi-head attention; self-attention when query is keyval."""
    d_model = store[f"{prefix}.wq"].shape[1]
    if d_model % n_heads:
        raise ad.ShapeError(f"d_model {d_model} not divisible by {n_heads} heads")
    q = ad.linear(query, store[f"{prefix}.wq"], store[f"{prefix}.bq"])
    k = ad.linear(keyval, store[f"{prefix}.wk"], store[f"{prefix}.bk"])
    v = ad.linear(keyval, store[f"{prefix}.wv"], store[f"{prefix}.bv"])
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    scale = 1.0 / math.sqrt(d_model // n_heads)
    scores = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))),
                    ad.constant(np.asarray(scale, dtype=query.dtype)))
    attn = ad.softmax(scores, axis=-1)
    out = _merge_heads(ad.matmul(attn, vh))
    return ad.linear(out, store[f"{prefix}.wo"], store[f"{prefix}.bo"])


def add_ffn(store, prefix, d_model, d_hidden, gen):
    store.normal(f"{prefix}.w1", (d_model, d_hidden), gen)
    store.zeros(f"{prefix}.b1", (d_hidden,))
    store.normal(f"{prefix}.w2", (d_hidden, d_model), gen)
    store.zeros(f"{prefix}.b2", (d_model,))


def apply_ffn(store, prefix, x):
    h = ad.gelu(ad.linear(x, store[f"{prefix}.w1"], store[f"{prefix}.b1"]))
    return ad.linear(h, store[f"{prefix}.w2"], store[f"{prefix}.b2"])


def add_transformer_block(store, prefix, d_model, d_hidden, gen):
    add_layer_norm(store, f"{prefix}.ln1", d_model)
    add_attention(store, f"{prefix}.attn", d_model, d_model, gen)
    add_layer_norm(store, f"{prefix}.ln2", d_model)
    add_ffn(store, f"{prefix}.ffn", d_model, d_hidden, gen)


def apply_transformer_block(store, prefix, x, n_heads):
    """Pre-LN block: x + MSA(LN(x)), then x + FFN(LN(x))."""
    ln = apply_layer_norm(store, f"{prefix}.ln1", x)
    x = ad.add(x, apply_attention(store, f"{prefix}.attn", ln, ln, n_heads))
    f = apply_ffn(store, f"{prefix}.ffn", apply_layer_norm(store, f"{prefix}.ln2", x))
    return ad.add(x, f)


def mse(a, b):
    return ad.reduce_mean(ad.square(ad.sub(a, b)))


class AdamW:
    """Adam with decoupled weight decay; state kept in parameter dtype."""

    def __init__(self, store: ParamStore, lr=1e-3, weight_decay=0.0,
                 betas=(0.9, 0.999), eps=1e-8):
        self.store = store
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in store.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in store.params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for k, p in self.store.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * (g * g)
            m_hat = self.m[k] / bias1
            v_hat = self.v[k] / bias2
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.data.dtype)
