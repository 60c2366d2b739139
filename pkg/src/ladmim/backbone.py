"""Frozen, seeded patch-embedding feature extractor.

A random linear projection over non-overlapping pixel patches stands in for
a pretrained descriptor network: at this scale random projections keep
distinct patches distinguishable, and they remove any external-weights
dependency. Weights are immutable after construction; per-channel
standardization statistics are fit once on the training split.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import rng as rng_mod


class Backbone:
    def __init__(self, patch_size=4, pool=1, out_dim=48, in_channels=3, seed=0):
        if patch_size < 1 or pool < 1:
            raise ValueError("patch_size and pool must be >= 1")
        self.patch_size = patch_size
        self.pool = pool
        self.out_dim = out_dim
        self.in_channels = in_channels
        self.seed = seed
        gen = rng_mod.stream(seed, "backbone-init")
        d_in = patch_size * patch_size * in_channels
        w = gen.standard_normal((d_in, out_dim)) / np.sqrt(d_in)
        self.projection = w.astype(np.float32)
        self.projection.setflags(write=False)
        self.feat_mean = np.zeros(out_dim, dtype=np.float32)
        self.feat_std = np.ones(out_dim, dtype=np.float32)

    # -- geometry ----------------------------------------------------------

    def grid_shape(self, image_hw):
        h, w = image_hw
        step = self.patch_size * self.pool
        if h % step or w % step:
            raise ValueError(f"image {h}x{w} not divisible by patch*pool={step}")
        return h // step, w // step

    def n_tokens(self, image_hw):
        gh, gw = self.grid_shape(image_hw)
        return gh * gw

    # -- feature extraction --------------------------------------------------

    def _patchify(self, image_f):
        p = self.patch_size
        h, w, c = image_f.shape
        x = image_f.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4)
        return x.reshape(h // p * (w // p), p * p * c)

    def extract_features(self, image, standardize=True) -> np.ndarray:
        """(H, W, 3) uint8 image -> (N, out_dim) float32 token features."""
        if image.dtype == np.uint8:
            image_f = image.astype(np.float32) / 255.0
        else:
            image_f = image.astype(np.float32)
        gh, gw = self.grid_shape(image_f.shape[:2])
        tokens = self._patchify(image_f) @ self.projection
        if self.pool > 1:
            k = self.pool
            fh, fw = gh * k, gw * k
            tokens = tokens.reshape(fh // k, k, fw // k, k, self.out_dim).mean(axis=(1, 3))
            tokens = tokens.reshape(gh * gw, self.out_dim)
        if standardize:
            tokens = (tokens - self.feat_mean) / self.feat_std
        return tokens.astype(np.float32)

    def extract_batch(self, images, standardize=True) -> np.ndarray:
        return np.stack([self.extract_features(im, standardize=standardize) for im in images])

    def raw_patches(self, image) -> np.ndarray:
        """Pixel content of each token window, (N, (patch*pool)^2 * 3) in [0, 1]."""
        if image.dtype == np.uint8:
            image_f = image.astype(np.float32) / 255.0
        else:
            image_f = image.astype(np.float32)
        step = self.patch_size * self.pool
        h, w, c = image_f.shape
        x = image_f.reshape(h // step, step, w // step, step, c).transpose(0, 2, 1, 3, 4)
        return x.reshape((h // step) * (w // step), step * step * c)

    # -- standardization -----------------------------------------------------

    def fit_standardization(self, images):
        """Per-channel mean/std over all tokens of the given (training) images."""
        feats = np.concatenate([self.extract_features(im, standardize=False)
                                for im in images], axis=0).astype(np.float64)
        mean = feats.mean(axis=0)
        std = feats.std(axis=0)
        std[std < 1e-6] = 1.0
        self.feat_mean = mean.astype(np.float32)
        self.feat_std = std.astype(np.float32)

    # -- persistence ---------------------------------------------------------

    def params_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.projection.tobytes())
        h.update(self.feat_mean.tobytes())
        h.update(self.feat_std.tobytes())
        return h.hexdigest()

    def state(self) -> dict:
        return {
            "backbone.projection": self.projection.copy(),
            "backbone.feat_mean": self.feat_mean.copy(),
            "backbone.feat_std": self.feat_std.copy(),
        }

    @classmethod
    def from_state(cls, state, patch_size, pool, out_dim, in_channels=3, seed=0):
        bb = cls(patch_size=patch_size, pool=pool, out_dim=out_dim,
                 in_channels=in_channels, seed=seed)
        proj = np.asarray(state["backbone.projection"], dtype=np.float32)
        if proj.shape != bb.projection.shape:
            raise ValueError("backbone projection shape mismatch")
        bb.projection = proj
        bb.projection.setflags(write=False)
        bb.feat_mean = np.asarray(state["backbone.feat_mean"], dtype=np.float32)
        bb.feat_std = np.asarray(state["backbone.feat_std"], dtype=np.float32)
        return bb
