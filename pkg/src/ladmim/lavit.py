"""Masked-prediction transformer over backbone tokens.

A proportion of the token grid is hidden behind a learnable mask embedding
(block-wise rectangles, BEiT-style); a dedicated prediction token aggregates
the visible context, and per-layer linear heads map its final state to a
probability distribution over the tokenizer's codebook. The training target
is the histogram of code indices inside the masked region, compared by L1
distance. Alternative prediction targets (raw pixels, backbone features,
per-position codes) are kept for ablations.

At inference the loss itself is the anomaly score, averaged over several
independent random masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from . import rng as rng_mod
from .hvq import HvqModel, TrainingDiverged

TARGET_MODES = ("pixels", "features", "codes", "histogram")


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class MaskSpec:
    indices: np.ndarray     # sorted unique token indices, subset of [0, N)
    ratio: float
    blocks: tuple           # (top, left, height, width) rectangles on the grid
    grid: tuple             # (h, w)

    @property
    def size(self):
        return len(self.indices)


def make_block_mask(grid_h: int, grid_w: int, ratio: float, gen) -> MaskSpec:
    """Union of random rectangles covering exactly round(ratio * N) cells.

    Rectangles (aspect in [0.3, 3.3], area >= 4 cells) accumulate until the
    target count is reached; overshoot is trimmed by dropping the most
    recently added cells.
    """
    n = grid_h * grid_w
    target = int(round(ratio * n))
    if not (0 < ratio < 1) or target <= 0 or target >= n:
        raise MaskError(f"mask ratio {ratio} yields {target} of {n} masked tokens")

    masked = set()
    order = []  # cells in addition order, for trimming
    blocks = []
    while len(masked) < target:
        aspect = float(np.exp(gen.uniform(np.log(0.3), np.log(3.3))))
        area = float(gen.uniform(4, max(4.0, 0.5 * target) + 1e-9))
        bh = int(np.clip(round(np.sqrt(area * aspect)), 1, grid_h))
        bw = int(np.clip(round(np.sqrt(area / aspect)), 1, grid_w))
        if bh * bw < 4:
            bw = min(grid_w, max(bw, (3 // bh) + 1))
            if bh * bw < 4:
                bh = min(grid_h, 2)
                bw = min(grid_w, 2)
        top = int(gen.integers(0, grid_h - bh + 1))
        left = int(gen.integers(0, grid_w - bw + 1))
        blocks.append((top, left, bh, bw))
        for r in range(top, top + bh):
            for c in range(left, left + bw):
                cell = r * grid_w + c
                if cell not in masked:
                    masked.add(cell)
                    order.append(cell)
    order = order[:target]
    indices = np.array(sorted(order), dtype=np.int64)
    return MaskSpec(indices=indices, ratio=ratio, blocks=tuple(blocks),
                    grid=(grid_h, grid_w))


def mask_matrix(n_tokens: int, indices: np.ndarray, dtype=np.float32) -> np.ndarray:
    m = np.zeros((n_tokens, 1), dtype=dtype)
    if len(indices) and (indices.min() < 0 or indices.max() >= n_tokens):
        raise MaskError(f"mask index out of range for N={n_tokens}")
    m[indices] = 1.0
    return m


def compute_target_histogram(codes: np.ndarray, indices: np.ndarray,
                             n_codes: int) -> np.ndarray:
    """Normalized counts of the code values at the masked positions."""
    if len(indices) == 0:
        raise MaskError("empty mask: histogram target undefined")
    counts = np.bincount(np.asarray(codes)[indices], minlength=n_codes)
    return (counts / len(indices)).astype(np.float64)


@dataclass(frozen=True)
class LavitConfig:
    d0: int = 48
    d: int = 64
    n_layers: int = 4         # L'
    n_heads: int = 4
    ffn_hidden: int = 128
    n_tokens: int = 64
    n_codes: int = 32         # K of the tokenizer
    tokenizer_layers: int = 4  # L of the tokenizer (head count in histogram/codes modes)
    target_mode: str = "histogram"
    patch_dim: int = 48       # pixels-per-token dim, for the pixels target

    def __post_init__(self):
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"unknown target mode '{self.target_mode}'")


class LavitModel:
    def __init__(self, config: LavitConfig, seed: int, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.store = nn.ParamStore(dtype=dtype)
        c = config
        gen = rng_mod.stream(seed, "lavit-init")
        s = self.store

        nn.add_linear(s, "embed", c.d0, c.d, gen)
        s.normal("mask_emb", (c.d,), gen)       # e
        s.normal("pred_token", (c.d,), gen)     # p
        s.normal("pos", (c.n_tokens + 1, c.d), gen)  # prediction token has its own slot
        for l in range(1, c.n_layers + 1):
            nn.add_transformer_block(s, f"blk{l}", c.d, c.ffn_hidden, gen)
        nn.add_layer_norm(s, "final_ln", c.d)
        if c.target_mode in ("histogram", "codes"):
            for l in range(1, c.tokenizer_layers + 1):
                nn.add_linear(s, f"head{l}", c.d, c.n_codes, gen)
        elif c.target_mode == "features":
            nn.add_linear(s, "feat_head", c.d, c.d0, gen)
        else:  # pixels
            nn.add_linear(s, "pixel_head", c.d, c.patch_dim, gen)

    # -- forward -------------------------------------------------------------

    def apply_mask(self, embedded: ad.Tensor, masks) -> ad.Tensor:
        """Replace masked token embeddings with e and append the prediction token.

        embedded: (B, N, d); masks: list of index arrays, one per batch item.
        Returns the (B, N+1, d) sequence before positional embeddings.
        """
        c = self.config
        b = embedded.shape[0]
        m = np.stack([mask_matrix(c.n_tokens, np.asarray(idx), dtype=self.store.dtype)
                      for idx in masks])  # (B, N, 1)
        mc = ad.constant(m)
        inv = ad.constant(1.0 - m)
        visible = ad.mul(embedded, inv)
        masked = ad.mul(ad.reshape(self.store["mask_emb"], (1, 1, c.d)), mc)
        tokens = ad.add(visible, masked)
        pred = ad.add(ad.reshape(self.store["pred_token"], (1, 1, c.d)),
                      ad.constant(np.zeros((b, 1, c.d), dtype=self.store.dtype)))
        return ad.concat([tokens, pred], axis=1)

    def forward_states(self, h0: ad.Tensor, masks) -> ad.Tensor:
        """(B, N, d0) features + per-image masks -> final-layer states (B, N+1, d)."""
        c = self.config
        if h0.shape[-2:] != (c.n_tokens, c.d0):
            raise ad.ShapeError(f"forward: expected (*, {c.n_tokens}, {c.d0}), got {h0.shape}")
        embedded = nn.apply_linear(self.store, "embed", h0)
        seq = ad.add(self.apply_mask(embedded, masks), self.store["pos"])
        for l in range(1, c.n_layers + 1):
            seq = nn.apply_transformer_block(self.store, f"blk{l}", seq, c.n_heads)
        return nn.apply_layer_norm(self.store, "final_ln", seq)

    def predict_histograms(self, states: ad.Tensor) -> dict:
        """Prediction-token state -> {layer: (B, K) distribution on the simplex}."""
        if self.config.target_mode != "histogram":
            raise ValueError(f"model target mode is '{self.config.target_mode}'")
        p_state = ad.take(states, np.array([self.config.n_tokens]), axis=1)  # (B, 1, d)
        p_state = ad.reshape(p_state, (states.shape[0], self.config.d))
        return {l: ad.softmax(nn.apply_linear(self.store, f"head{l}", p_state), axis=-1)
                for l in range(1, self.config.tokenizer_layers + 1)}

    # -- losses per target mode ------------------------------------------------

    def histogram_loss(self, predictions: dict, targets: dict) -> ad.Tensor:
        """Sum over layers and codebook entries of |P - Q|, averaged over the batch."""
        layers = sorted(predictions)
        if sorted(targets) != layers:
            raise ValueError(f"layer mismatch: {layers} vs {sorted(targets)}")
        total = None
        for l in layers:
            q = ad.constant(np.asarray(targets[l], dtype=self.store.dtype))
            if q.shape != predictions[l].shape:
                raise ad.ShapeError(f"histogram layer {l}: {q.shape} vs {predictions[l].shape}")
            term = ad.reduce_mean(ad.reduce_sum(ad.absolute(ad.sub(predictions[l], q)),
                                                axis=-1))
            total = term if total is None else ad.add(total, term)
        return total

    def masked_token_states(self, states: ad.Tensor, masks) -> ad.Tensor:
        idx = np.stack([np.asarray(m) for m in masks])  # (B, |M|) — fixed ratio
        return ad.gather_rows(states, idx)

    def mode_loss(self, h0: ad.Tensor, states: ad.Tensor, masks, *,
                  code_targets=None, feature_targets=None, pixel_targets=None):
        """Training/score loss for the configured prediction target."""
        mode = self.config.target_mode
        if mode == "histogram":
            preds = self.predict_histograms(states)
            targets = {l: np.stack([compute_target_histogram(code_targets[l][b], masks[b],
                                                             self.config.n_codes)
                                    for b in range(len(masks))])
                       for l in code_targets}
            return self.histogram_loss(preds, targets)
        if mode == "codes":
            mstates = self.masked_token_states(states, masks)  # (B, M, d)
            idx = np.stack([np.asarray(m) for m in masks])
            total = None
            for l in range(1, self.config.tokenizer_layers + 1):
                logits = nn.apply_linear(self.store, f"head{l}", mstates)
                logp = ad.log_softmax(logits, axis=-1)
                tgt = np.take_along_axis(code_targets[l], idx, axis=1)  # (B, M)
                onehot = np.eye(self.config.n_codes, dtype=self.store.dtype)[tgt]
                ce = ad.neg(ad.reduce_sum(ad.mul(logp, ad.constant(onehot))))
                term = ad.mul(ce, ad.constant(np.asarray(1.0 / len(masks),
                                                         dtype=self.store.dtype)))
                total = term if total is None else ad.add(total, term)
            return total
        if mode == "features":
            mstates = self.masked_token_states(states, masks)
            pred = nn.apply_linear(self.store, "feat_head", mstates)
            return nn.mse(pred, ad.constant(feature_targets, dtype=self.store.dtype))
        # pixels
        mstates = self.masked_token_states(states, masks)
        pred = nn.apply_linear(self.store, "pixel_head", mstates)
        return nn.mse(pred, ad.constant(pixel_targets, dtype=self.store.dtype))


# ---------------------------------------------------------------------------
# training / scoring
# ---------------------------------------------------------------------------

def _gather_mode_targets(model, masks, code_targets, features, patches):
    """Per-mask targets for the features/pixels modes (others pass through)."""
    mode = model.config.target_mode
    if mode == "features":
        idx = np.stack([np.asarray(m) for m in masks])
        return {"feature_targets": np.take_along_axis(
            features, idx[..., None], axis=1)}
    if mode == "pixels":
        idx = np.stack([np.asarray(m) for m in masks])
        return {"pixel_targets": np.take_along_axis(
            patches, idx[..., None], axis=1)}
    return {"code_targets": code_targets}


def train_lavit(hvq_model: HvqModel, features: np.ndarray, config: LavitConfig,
                seed: int, epochs: int, mask_ratio=0.4, lr=1e-3, weight_decay=1e-6,
                batch_size=16, patches=None, log=None):
    """Train against the frozen tokenizer on (M, N, d0) normal features."""
    model = LavitModel(config, seed=seed)
    history = []
    if epochs == 0:
        return model, history
    m = features.shape[0]
    grid = int(round(np.sqrt(config.n_tokens)))
    if grid * grid != config.n_tokens:
        raise ValueError("n_tokens must form a square grid")
    code_targets_all = hvq_model.tokenize(features)  # frozen tokenizer, fixed targets
    data_gen = rng_mod.stream(seed, "lavit-data")
    mask_gen = rng_mod.stream(seed, "lavit-mask")
    opt = nn.AdamW(model.store, lr=lr, weight_decay=weight_decay)
    for epoch in range(epochs):
        order = data_gen.permutation(m)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, m, batch_size):
            idx = order[start:start + batch_size]
            masks = [make_block_mask(grid, grid, mask_ratio, mask_gen).indices
                     for _ in range(len(idx))]
            code_targets = {l: v[idx] for l, v in code_targets_all.items()}
            kwargs = _gather_mode_targets(model, masks, code_targets, features[idx],
                                          None if patches is None else patches[idx])
            h0 = ad.constant(features[idx], dtype=model.store.dtype)
            model.store.zero_grad()
            try:
                states = model.forward_states(h0, masks)
                loss = model.mode_loss(h0, states, masks, **kwargs)
                ad.backward(loss)
            except ad.NonFiniteError as e:
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}: {e}") from e
            opt.step()
            epoch_loss += loss.item()
            n_batches += 1
        history.append({"epoch": epoch, "loss": epoch_loss / n_batches})
        if log is not None:
            log(history[-1])
    return model, history


def logical_score(hvq_model: HvqModel, lavit_model: LavitModel, h0: np.ndarray,
                  n_masks: int, eval_seed: int, image_index: int, mask_ratio=0.4,
                  patches=None, return_per_mask=False):
    """Mean mode-loss over independent random masks of one image."""
    if n_masks < 1:
        raise ValueError("n_masks must be >= 1")
    config = lavit_model.config
    grid = int(round(np.sqrt(config.n_tokens)))
    gen = rng_mod.stream(eval_seed, "eval-mask", index=image_index)
    code_targets_all = hvq_model.tokenize(h0[None])
    per_mask = []
    with ad.no_grad():
        for _ in range(n_masks):
            mask = make_block_mask(grid, grid, mask_ratio, gen).indices
            kwargs = _gather_mode_targets(
                lavit_model, [mask], code_targets_all, h0[None],
                None if patches is None else patches[None])
            h0t = ad.constant(h0[None], dtype=lavit_model.store.dtype)
            states = lavit_model.forward_states(h0t, [mask])
            per_mask.append(lavit_model.mode_loss(h0t, states, [mask], **kwargs).item())
    score = float(np.mean(per_mask))  # masks summed in draw order (ascending index)
    if return_per_mask:
        return score, per_mask
    return score
