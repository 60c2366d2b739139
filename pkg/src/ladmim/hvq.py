"""Hierarchical vector-quantized transformer for feature reconstruction.

An L-layer encoder produces hidden states h^1..h^L; the final state is
quantized against codebook L, and each earlier layer l is quantized against
codebook l using the concatenation [h^{l-1}, z^L]. An L-layer decoder of
self-attention + cross-attention blocks (cross keys/values are the layer's
quantized codes) rebuilds the backbone feature map from learnable queries.
Training minimizes reconstruction MSE plus per-layer codebook/commitment
terms with stop-gradients; gradients cross the argmin via the
straight-through estimator.

The trained model doubles as the tokenizer for the masked-prediction model:
``tokenize`` returns the per-layer code indices of an image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from . import rng as rng_mod


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class HvqConfig:
    d0: int = 48          # backbone feature dim
    d: int = 64           # transformer embedding dim
    d_q: int = 32         # codebook entry dim
    n_codes: int = 32     # K
    n_layers: int = 4     # L (encoder depth = decoder depth = codebook count)
    n_heads: int = 4
    ffn_hidden: int = 128
    n_tokens: int = 64    # N

    def __post_init__(self):
        if self.n_codes < 2:
            raise ValueError("codebook size K must be >= 2")
        if self.d % self.n_heads:
            raise ValueError("d must be divisible by n_heads")


@dataclass
class QuantizationResult:
    codes: ad.Tensor        # (B, N, d_q) straight-through quantized vectors
    indices: np.ndarray     # (B, N) selected entry per token
    distances: np.ndarray   # (B, N) squared distance to the selected entry
    projected: ad.Tensor    # (B, N, d_q) pre-quantization psi projection


def nearest_code(projected: np.ndarray, codebook: np.ndarray):
    """Exhaustive nearest-entry search; ties break to the lowest index.

    projected: (..., d_q), codebook: (K, d_q). Returns (indices, sq distances).
    """
    if codebook.ndim != 2 or codebook.shape[0] < 1:
        raise ValueError("codebook must be a non-empty (K, d_q) array")
    diff = projected[..., None, :] - codebook  # (..., K, d_q)
    d2 = np.einsum("...kd,...kd->...k", diff, diff)
    idx = np.argmin(d2, axis=-1)  # argmin returns the first (lowest) index on ties
    dist = np.take_along_axis(d2, idx[..., None], axis=-1)[..., 0]
    return idx, dist


class HvqModel:
    def __init__(self, config: HvqConfig, seed: int, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.store = nn.ParamStore(dtype=dtype)
        c = config
        gen = rng_mod.stream(seed, "hvq-init")
        s = self.store

        nn.add_linear(s, "embed", c.d0, c.d, gen)
        s.normal("enc_pos", (c.n_tokens, c.d), gen)
        for l in range(1, c.n_layers + 1):
            nn.add_transformer_block(s, f"enc{l}", c.d, c.ffn_hidden, gen)
        # psi^L maps d -> d_q; psi^l (l < L) maps [h^{l-1}, z^L] -> d_q
        nn.add_linear(s, f"psi{c.n_layers}", c.d, c.d_q, gen)
        for l in range(1, c.n_layers):
            nn.add_linear(s, f"psi{l}", c.d + c.d_q, c.d_q, gen)
        for l in range(1, c.n_layers + 1):
            s.normal(f"codebook{l}", (c.n_codes, c.d_q), gen)
        s.normal("dec_queries", (c.n_tokens, c.d), gen)
        s.normal("dec_pos", (c.n_tokens, c.d), gen)
        for l in range(1, c.n_layers + 1):
            nn.add_attention(s, f"dec{l}.msa", c.d, c.d, gen)
            nn.add_attention(s, f"dec{l}.mca", c.d, c.d_q, gen)
            nn.add_ffn(s, f"dec{l}.ffn", c.d, c.ffn_hidden, gen)
        nn.add_linear(s, "gamma", c.d, c.d0, gen)

    # -- forward pieces ------------------------------------------------------

    def encode(self, h0: ad.Tensor):
        """h0 (B, N, d0) -> [x0 (embedded input), h^1, ..., h^L], each (B, N, d)."""
        c = self.config
        if h0.shape[-2:] != (c.n_tokens, c.d0):
            raise ad.ShapeError(f"encode: expected (*, {c.n_tokens}, {c.d0}), got {h0.shape}")
        x = ad.add(nn.apply_linear(self.store, "embed", h0), self.store["enc_pos"])
        states = [x]
        for l in range(1, c.n_layers + 1):
            x = nn.apply_transformer_block(self.store, f"enc{l}", x, c.n_heads)
            states.append(x)
        return states

    def _quantize(self, layer: int, projected: ad.Tensor) -> QuantizationResult:
        codebook = self.store[f"codebook{layer}"]
        idx, dist = nearest_code(projected.data, codebook.data)
        selected = codebook.data[idx]
        codes = ad.straight_through(projected, selected)
        return QuantizationResult(codes, idx, dist, projected)

    def quantize_final(self, h_last: ad.Tensor) -> QuantizationResult:
        L = self.config.n_layers
        return self._quantize(L, nn.apply_linear(self.store, f"psi{L}", h_last))

    def quantize_intermediate(self, h_prev: ad.Tensor, z_last: ad.Tensor,
                              layer: int) -> QuantizationResult:
        if not (1 <= layer < self.config.n_layers):
            raise ValueError(f"intermediate layer must be in [1, L-1], got {layer}")
        projected = nn.apply_linear(self.store, f"psi{layer}",
                                    ad.concat([h_prev, z_last], axis=-1))
        return self._quantize(layer, projected)

    def quantize_all(self, states):
        """states = [x0, h^1..h^L] -> {layer: QuantizationResult}."""
        L = self.config.n_layers
        results = {L: self.quantize_final(states[L])}
        for l in range(1, L):
            results[l] = self.quantize_intermediate(states[l - 1], results[L].codes, l)
        return results

    def decode(self, quantized: dict) -> ad.Tensor:
        """Quantized codes per layer -> reconstructed feature map (B, N, d0)."""
        c = self.config
        s = self.store
        batch = quantized[1].codes.shape[0]
        seed_q = ad.add(s["dec_queries"], s["dec_pos"])
        d = ad.add(seed_q, ad.constant(np.zeros((batch, c.n_tokens, c.d),
                                                dtype=s.dtype)))
        for l in range(1, c.n_layers + 1):
            q = ad.add(nn.apply_attention(s, f"dec{l}.msa", d, d, c.n_heads), d)
            dt = ad.add(nn.apply_attention(s, f"dec{l}.mca", q, quantized[l].codes,
                                           c.n_heads), q)
            d = ad.add(nn.apply_ffn(s, f"dec{l}.ffn", dt), dt)
        return nn.apply_linear(s, "gamma", d)

    def forward(self, h0: ad.Tensor):
        states = self.encode(h0)
        quantized = self.quantize_all(states)
        recon = self.decode(quantized)
        return recon, states, quantized

    # -- loss ----------------------------------------------------------------

    def loss(self, h0: ad.Tensor, recon: ad.Tensor, quantized: dict):
        """Reconstruction MSE plus per-layer codebook and commitment terms."""
        total = nn.mse(h0, recon)
        recon_term = total.item()
        for l in range(1, self.config.n_layers + 1):
            qr = quantized[l]
            selected = ad.take(self.store[f"codebook{l}"], qr.indices, axis=0)
            codebook_term = nn.mse(ad.stop_gradient(qr.projected), selected)
            commit_term = nn.mse(qr.projected, ad.stop_gradient(selected))
            total = ad.add(total, ad.add(codebook_term, commit_term))
        return total, recon_term

    # -- training ------------------------------------------------------------

    def init_codebooks_from_batch(self, h0_batch: np.ndarray, gen):
        """Seed each codebook from the empirical psi-projected feature distribution."""
        c = self.config
        with ad.no_grad():
            states = self.encode(ad.constant(h0_batch, dtype=self.store.dtype))
            L = c.n_layers
            proj_last = nn.apply_linear(self.store, f"psi{L}", states[L])
            self._set_codebook(L, proj_last.data, gen)
            qr = self.quantize_final(states[L])
            for l in range(1, L):
                proj = nn.apply_linear(self.store, f"psi{l}",
                                       ad.concat([states[l - 1], qr.codes], axis=-1))
                self._set_codebook(l, proj.data, gen)

    def _set_codebook(self, layer, projected_data, gen):
        flat = projected_data.reshape(-1, self.config.d_q)
        pick = gen.integers(0, flat.shape[0], size=self.config.n_codes)
        noise = gen.standard_normal((self.config.n_codes, self.config.d_q)) * 0.01
        self.store[f"codebook{layer}"].data = (flat[pick] + noise).astype(self.store.dtype)

    # -- inference -----------------------------------------------------------

    def reconstruction_errors(self, h0_batch: np.ndarray) -> np.ndarray:
        """Per-image mean squared reconstruction error, (B,)."""
        with ad.no_grad():
            h0 = ad.constant(h0_batch, dtype=self.store.dtype)
            recon, _, _ = self.forward(h0)
            err = (h0.data - recon.data) ** 2
        return err.mean(axis=(1, 2))

    def tokenize(self, h0_batch: np.ndarray) -> dict:
        """Per-layer code indices {layer: (B, N)} for use as prediction targets."""
        with ad.no_grad():
            _, _, quantized = self.forward(ad.constant(h0_batch, dtype=self.store.dtype))
        return {l: q.indices for l, q in quantized.items()}


def structural_score(model: HvqModel, h0: np.ndarray) -> float:
    """Mean reconstruction MSE of a single image's feature map."""
    return float(model.reconstruction_errors(h0[None])[0])


def train_hvq(features: np.ndarray, config: HvqConfig, seed: int, epochs: int,
              lr=1e-3, weight_decay=1e-4, batch_size=16, log=None):
    """Train on (M, N, d0) normal-image features; returns (model, history)."""
    model = HvqModel(config, seed=seed)
    history = []
    if epochs == 0:
        return model, history
    m = features.shape[0]
    data_gen = rng_mod.stream(seed, "hvq-data")
    model.init_codebooks_from_batch(features[:min(m, batch_size * 4)],
                                    rng_mod.stream(seed, "hvq-codebook-init"))
    opt = nn.AdamW(model.store, lr=lr, weight_decay=weight_decay)
    for epoch in range(epochs):
        order = data_gen.permutation(m)
        epoch_loss = 0.0
        epoch_recon = 0.0
        n_batches = 0
        for start in range(0, m, batch_size):
            idx = order[start:start + batch_size]
            h0 = ad.constant(features[idx], dtype=model.store.dtype)
            model.store.zero_grad()
            try:
                recon, _, quantized = model.forward(h0)
                total, recon_term = model.loss(h0, recon, quantized)
                ad.backward(total)
            except ad.NonFiniteError as e:
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}: {e}") from e
            opt.step()
            epoch_loss += total.item()
            epoch_recon += recon_term
            n_batches += 1
        history.append({"epoch": epoch,
                        "loss": epoch_loss / n_batches,
                        "recon_mse": epoch_recon / n_batches})
        if log is not None:
            log(history[-1])
    return model, history


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def usage_perplexity(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))


def codebook_diagnostics(model: HvqModel, features: np.ndarray,
                         token_kinds=None) -> dict:
    """Code usage, perplexity, and collision/redundancy proxies per layer.

    `token_kinds` is an optional (M, N) array of object-kind labels per token
    ("background" plus vocabulary names); without it only usage statistics
    are reported.
    """
    K = model.config.n_codes
    indices = model.tokenize(features)
    report = {"n_codes": K, "layers": {}}
    for layer, idx in sorted(indices.items()):
        counts = np.bincount(idx.ravel(), minlength=K)
        layer_report = {
            "usage_counts": counts.tolist(),
            "active_codes": int((counts > 0).sum()),
            "perplexity": usage_perplexity(counts),
        }
        if token_kinds is not None:
            kinds = sorted(set(np.asarray(token_kinds).ravel().tolist()))
            table = {}
            majority = {}
            redundancy = {}
            for kind in kinds:
                mask = np.asarray(token_kinds) == kind
                kc = np.bincount(idx[mask], minlength=K)
                table[kind] = kc.tolist()
                majority[kind] = int(np.argmax(kc))
                share = kc / max(1, kc.sum())
                redundancy[kind] = int((share >= 0.05).sum())
            n_kinds = len(kinds)
            n_distinct = len(set(majority.values()))
            layer_report["contingency"] = table
            layer_report["majority_code"] = majority
            layer_report["collision_fraction"] = (
                0.0 if n_kinds == 0 else 1.0 - n_distinct / n_kinds)
            layer_report["redundancy_codes_per_kind"] = redundancy
        report["layers"][str(layer)] = layer_report
    return report
