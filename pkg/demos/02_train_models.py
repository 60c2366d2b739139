"""Train both models on a small dataset and watch what each one learns.

Stage 1 trains the hierarchical vector-quantized reconstruction model; its
codebooks become the tokenizer. Stage 2 freezes the tokenizer and trains the
masked-prediction transformer to output, for each codebook, the histogram of
code indices hidden behind a random block mask.

This demo uses a reduced dataset and epoch count so it finishes in about two
minutes on one CPU; the CLI defaults are larger.

Run:  python3 demos/02_train_models.py
"""

import tempfile

import numpy as np

from ladmim import hvq, lavit
from ladmim.config import RunConfig
from ladmim.pipeline import (DatasetView, gen_data, hvq_config, lavit_config,
                             make_backbone, token_kind_map)

cfg = RunConfig(hvq_epochs=40, lavit_epochs=60)
cfg.counts = {"train_normal": 60, "test_normal": 10, "test_logical": 10,
              "test_structural": 10}

data_dir = tempfile.mkdtemp(prefix="ladmim-demo-")
gen_data(cfg, data_dir)
view = DatasetView(cfg, data_dir)
backbone = view.fitted_backbone()
features = view.features(backbone, view.fit_records)
print(f"training features: {features.shape} (images, tokens, channels)")

# -- stage 1: reconstruction + codebooks ------------------------------------
print("\nstage 1: reconstruction model")
model, history = hvq.train_hvq(features, hvq_config(cfg), seed=cfg.init_seed,
                               epochs=cfg.hvq_epochs, lr=cfg.hvq_lr,
                               weight_decay=cfg.hvq_weight_decay,
                               batch_size=cfg.batch_size)
for h in history[:: max(1, len(history) // 5)]:
    print(f"  epoch {h['epoch']:3d}  loss {h['loss']:.4f}  "
          f"recon_mse {h['recon_mse']:.4f}")

# do the learned codes mean anything? check them against the object layout
kinds = token_kind_map(cfg, view.fit_records[0])
codes = model.tokenize(features[:1])
print("\nlayer-1 code vs object kind for one image (token grid rows):")
grid = cfg.grid_side
for r in range(grid):
    row = "  ".join(f"{codes[1][0][r * grid + c]:2d}:{kinds[r * grid + c][:2]}"
                    for c in range(grid))
    print(" ", row)

# -- stage 2: masked histogram prediction ------------------------------------
print("\nstage 2: masked-prediction model (histogram target)")
lv, history = lavit.train_lavit(model, features, lavit_config(cfg),
                                seed=cfg.mask_seed, epochs=cfg.lavit_epochs,
                                mask_ratio=cfg.mask_ratio, lr=cfg.lavit_lr,
                                weight_decay=cfg.lavit_weight_decay,
                                batch_size=cfg.batch_size)
for h in history[:: max(1, len(history) // 5)]:
    print(f"  epoch {h['epoch']:3d}  loss {h['loss']:.4f}")
print("  (histogram L1, at most 2 per codebook layer; lower is better)")

# scores on one normal and one anomalous test image
test_feats = view.features(backbone, view.test_records)
for rec, feat in zip(view.test_records, test_feats):
    if rec["label"] in ("normal", "logical"):
        s_hvq = hvq.structural_score(model, feat)
        s_lavit = lavit.logical_score(model, lv, feat, n_masks=cfg.n_masks,
                                      eval_seed=cfg.eval_seed,
                                      image_index=rec["index"],
                                      mask_ratio=cfg.mask_ratio)
        print(f"\n{rec['label']:8s} ({rec['kind']}): "
              f"reconstruction score {s_hvq:.4f}, histogram score {s_lavit:.4f}")
        if rec["label"] == "logical":
            break
