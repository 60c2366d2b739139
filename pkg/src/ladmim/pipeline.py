"""Two-stage pipeline: data generation, HVQ training, LAViT training, evaluation.

Shared by the CLI and the test suite. All stages are deterministic given the
config; artifacts are written atomically and checkpoints are self-describing
(see checkpoint.py).
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import checkpoint as ckpt_mod
from . import evaluation as eval_mod
from . import synthgen
from .backbone import Backbone
from .config import RunConfig
from .hvq import HvqConfig, HvqModel, train_hvq, codebook_diagnostics
from .lavit import LavitConfig, LavitModel, train_lavit, logical_score


class MissingPrerequisite(RuntimeError):
    pass


def n_workers():
    try:
        return max(1, int(os.environ.get("LADMIM_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# stage: gen-data
# ---------------------------------------------------------------------------

def gen_data(cfg: RunConfig, out_dir) -> dict:
    cfg.validate()
    if cfg.canvas != 32:
        raise NotImplementedError("the default scene spec targets a 32x32 canvas")
    spec = synthgen.default_scene_spec()
    return synthgen.write_dataset(spec, cfg.counts, cfg.data_seed, out_dir,
                                  n_workers=n_workers())


# ---------------------------------------------------------------------------
# shared loading helpers
# ---------------------------------------------------------------------------

def make_backbone(cfg: RunConfig) -> Backbone:
    return Backbone(patch_size=cfg.patch_size, pool=cfg.pool, out_dim=cfg.d0,
                    seed=cfg.init_seed)


def hvq_config(cfg: RunConfig) -> HvqConfig:
    return HvqConfig(d0=cfg.d0, d=cfg.d, d_q=cfg.d_q, n_codes=cfg.n_codes,
                     n_layers=cfg.hvq_layers, n_heads=cfg.n_heads,
                     ffn_hidden=cfg.ffn_hidden, n_tokens=cfg.n_tokens)


def lavit_config(cfg: RunConfig, target_mode=None) -> LavitConfig:
    step = cfg.patch_size * cfg.pool
    return LavitConfig(d0=cfg.d0, d=cfg.d, n_layers=cfg.lavit_layers,
                       n_heads=cfg.n_heads, ffn_hidden=cfg.ffn_hidden,
                       n_tokens=cfg.n_tokens, n_codes=cfg.n_codes,
                       tokenizer_layers=cfg.hvq_layers,
                       target_mode=target_mode or cfg.target_mode,
                       patch_dim=step * step * 3)


def split_calibration(train_records, fraction):
    """Deterministic holdout: the trailing fraction of train normals by index."""
    ordered = sorted(train_records, key=lambda r: r["index"])
    n_hold = max(2, int(round(fraction * len(ordered))))
    return ordered[:-n_hold], ordered[-n_hold:]


class DatasetView:
    """Manifest + decoded images + backbone features for one data directory."""

    def __init__(self, cfg: RunConfig, data_dir):
        self.cfg = cfg
        self.data_dir = data_dir
        manifest_path = os.path.join(data_dir, "manifest.json")
        if not os.path.exists(manifest_path):
            raise MissingPrerequisite(f"no dataset manifest at {manifest_path} "
                                      "(run gen-data first)")
        self.manifest = synthgen.load_manifest(data_dir)
        train = [r for r in self.manifest["images"] if r["split"] == "train"]
        self.fit_records, self.calib_records = split_calibration(
            train, cfg.calibration_fraction)
        self.test_records = [r for r in self.manifest["images"] if r["split"] == "test"]

    def images(self, records):
        return [synthgen.read_ppm(os.path.join(self.data_dir, r["path"]))
                for r in records]

    def fitted_backbone(self) -> Backbone:
        bb = make_backbone(self.cfg)
        bb.fit_standardization(self.images(self.fit_records))
        return bb

    def features(self, backbone, records):
        return backbone.extract_batch(self.images(records))

    def patches(self, backbone, records):
        return np.stack([backbone.raw_patches(im) for im in self.images(records)])


# ---------------------------------------------------------------------------
# stage: train-hvq
# ---------------------------------------------------------------------------

def run_train_hvq(cfg: RunConfig, data_dir, out_path) -> dict:
    cfg.validate()
    view = DatasetView(cfg, data_dir)
    backbone = view.fitted_backbone()
    features = view.features(backbone, view.fit_records)
    model, history = train_hvq(features, hvq_config(cfg), seed=cfg.init_seed,
                               epochs=cfg.hvq_epochs, lr=cfg.hvq_lr,
                               weight_decay=cfg.hvq_weight_decay,
                               batch_size=cfg.batch_size)
    arrays = {}
    arrays.update(backbone.state())
    arrays.update({f"hvq.{k}": v for k, v in model.store.state().items()})
    meta = {
        "stage": "hvq",
        "config": cfg.to_dict(),
        "epoch": cfg.hvq_epochs,
        "metrics": {"history": history},
    }
    ckpt_mod.save_checkpoint(out_path, meta, arrays)
    return meta


def load_hvq(path):
    meta, arrays = ckpt_mod.load_checkpoint(path)
    if meta.get("stage") != "hvq":
        raise ckpt_mod.CheckpointError(f"{path}: not an hvq checkpoint")
    cfg = RunConfig.from_dict(meta["config"])
    backbone = Backbone.from_state(
        {k: arrays[k] for k in arrays if k.startswith("backbone.")},
        patch_size=cfg.patch_size, pool=cfg.pool, out_dim=cfg.d0, seed=cfg.init_seed)
    model = HvqModel(hvq_config(cfg), seed=cfg.init_seed)
    model.store.load_state({k[len("hvq."):]: v for k, v in arrays.items()
                            if k.startswith("hvq.")})
    return cfg, backbone, model, meta


# ---------------------------------------------------------------------------
# stage: train-lavit
# ---------------------------------------------------------------------------

def run_train_lavit(cfg: RunConfig, data_dir, hvq_ckpt_path, out_path,
                    target_mode=None) -> dict:
    cfg.validate()
    if not os.path.exists(hvq_ckpt_path):
        raise MissingPrerequisite(f"missing hvq checkpoint at {hvq_ckpt_path} "
                                  "(run train-hvq first)")
    _, backbone, hvq_model, _ = load_hvq(hvq_ckpt_path)
    view = DatasetView(cfg, data_dir)
    features = view.features(backbone, view.fit_records)
    mode = target_mode or cfg.target_mode
    lcfg = lavit_config(cfg, target_mode=mode)
    patches = (view.patches(backbone, view.fit_records) if mode == "pixels" else None)
    model, history = train_lavit(hvq_model, features, lcfg, seed=cfg.mask_seed,
                                 epochs=cfg.lavit_epochs, mask_ratio=cfg.mask_ratio,
                                 lr=cfg.lavit_lr, weight_decay=cfg.lavit_weight_decay,
                                 batch_size=cfg.batch_size, patches=patches)
    meta = {
        "stage": "lavit",
        "config": cfg.to_dict(),
        "target_mode": mode,
        "epoch": cfg.lavit_epochs,
        "metrics": {"history": history},
        "hvq_checkpoint_hash": ckpt_mod.payload_hash(hvq_ckpt_path),
    }
    arrays = {f"lavit.{k}": v for k, v in model.store.state().items()}
    ckpt_mod.save_checkpoint(out_path, meta, arrays)
    return meta


def load_lavit(path, cfg: RunConfig):
    meta, arrays = ckpt_mod.load_checkpoint(path)
    if meta.get("stage") != "lavit":
        raise ckpt_mod.CheckpointError(f"{path}: not a lavit checkpoint")
    lcfg = lavit_config(cfg, target_mode=meta["target_mode"])
    model = LavitModel(lcfg, seed=cfg.mask_seed)
    model.store.load_state({k[len("lavit."):]: v for k, v in arrays.items()
                            if k.startswith("lavit.")})
    return model, meta


# ---------------------------------------------------------------------------
# stage: eval
# ---------------------------------------------------------------------------

def score_records(cfg, view, backbone, hvq_model, lavit_model, records,
                  collect_variance=False):
    """Per-image S_HVQ / S_LAViT for a record list; order-independent."""
    features = view.features(backbone, records)
    s_hvq = hvq_model.reconstruction_errors(features)
    need_patches = lavit_model.config.target_mode == "pixels"
    rows = []
    variances = []
    for i, rec in enumerate(records):
        patches = backbone.raw_patches(
            synthgen.read_ppm(os.path.join(view.data_dir, rec["path"]))
        ) if need_patches else None
        s_lavit, per_mask = logical_score(
            hvq_model, lavit_model, features[i], cfg.n_masks, cfg.eval_seed,
            image_index=rec["index"], mask_ratio=cfg.mask_ratio, patches=patches,
            return_per_mask=True)
        rows.append({"id": rec["path"], "label": rec["label"], "kind": rec["kind"],
                     "index": rec["index"], "s_hvq": float(s_hvq[i]),
                     "s_lavit": s_lavit})
        if collect_variance:
            variances.append({"id": rec["path"],
                              "mask_score_std": float(np.std(per_mask, ddof=1))
                              if len(per_mask) > 1 else 0.0})
    return rows, variances


def run_eval(cfg: RunConfig, data_dir, hvq_ckpt_path, lavit_ckpt_path, out_dir) -> dict:
    cfg.validate()
    for path, stage in ((hvq_ckpt_path, "train-hvq"), (lavit_ckpt_path, "train-lavit")):
        if path is None or not os.path.exists(path):
            raise MissingPrerequisite(f"missing checkpoint for stage {stage}: {path}")
    _, backbone, hvq_model, _ = load_hvq(hvq_ckpt_path)
    lavit_model, lavit_meta = load_lavit(lavit_ckpt_path, cfg)
    view = DatasetView(cfg, data_dir)

    calib_rows, _ = score_records(cfg, view, backbone, hvq_model, lavit_model,
                                  view.calib_records)
    stats = eval_mod.calibrate([r["s_hvq"] for r in calib_rows],
                               [r["s_lavit"] for r in calib_rows])
    test_rows, variances = score_records(cfg, view, backbone, hvq_model, lavit_model,
                                         view.test_records, collect_variance=True)
    for r in test_rows:
        r["s_fused"] = float(eval_mod.fuse(r["s_hvq"], r["s_lavit"], stats))
    diagnostics = {
        "target_mode": lavit_meta["target_mode"],
        "mask_score_variance": variances,
        "mean_mask_score_std": float(np.mean([v["mask_score_std"] for v in variances]))
        if variances else 0.0,
    }
    report = eval_mod.build_report(test_rows, cfg.to_dict(), stats, out_dir,
                                   diagnostics=diagnostics)
    return report


# ---------------------------------------------------------------------------
# stage: ablate
# ---------------------------------------------------------------------------

def run_ablate(cfg: RunConfig, data_dir, hvq_ckpt_path, out_dir, modes=None) -> dict:
    cfg.validate()
    modes = list(modes) if modes else ["pixels", "features", "codes", "histogram"]
    os.makedirs(out_dir, exist_ok=True)
    grid = {}
    for mode in modes:
        lavit_path = os.path.join(out_dir, f"lavit_{mode}.ckpt")
        run_train_lavit(cfg, data_dir, hvq_ckpt_path, lavit_path, target_mode=mode)
        mode_dir = os.path.join(out_dir, mode)
        report = run_eval(cfg, data_dir, hvq_ckpt_path, lavit_path, mode_dir)
        grid[mode] = report["auroc"]
    summary = {
        "config": cfg.to_dict(),
        "grid": grid,
        "reference_mvtecloco_table3": eval_mod.TABLE3_REFERENCE,
    }
    tmp = os.path.join(out_dir, "ablation.json.tmp")
    with open(tmp, "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(out_dir, "ablation.json"))
    return summary


# ---------------------------------------------------------------------------
# stage: diagnose
# ---------------------------------------------------------------------------

def token_kind_map(cfg: RunConfig, record) -> np.ndarray:
    """Majority object kind ('background' if none) per token of one image."""
    step = cfg.patch_size * cfg.pool
    side = cfg.grid_side
    idmap = np.zeros((cfg.canvas, cfg.canvas), dtype=np.int32)
    names = ["background"]
    for obj in record["objects"]:
        po = synthgen.PlacedObject(**{k: obj[k] for k in
                                      ("kind", "shape", "color", "size", "x", "y", "slot")})
        if po.kind not in names:
            names.append(po.kind)
        marker = np.full((cfg.canvas, cfg.canvas, 3), 0, dtype=np.uint8)
        synthgen._draw_object(marker, synthgen.PlacedObject(
            po.kind, po.shape, (255, 255, 255), po.size, po.x, po.y, po.slot))
        idmap[marker[:, :, 0] > 0] = names.index(po.kind)
    kinds = np.empty(side * side, dtype=object)
    for r in range(side):
        for c in range(side):
            window = idmap[r * step:(r + 1) * step, c * step:(c + 1) * step]
            vals, counts = np.unique(window, return_counts=True)
            kinds[r * side + c] = names[int(vals[np.argmax(counts)])]
    return kinds


def run_diagnose(cfg: RunConfig, data_dir, hvq_ckpt_path, out_path) -> dict:
    cfg.validate()
    if not os.path.exists(hvq_ckpt_path):
        raise MissingPrerequisite(f"missing hvq checkpoint at {hvq_ckpt_path}")
    _, backbone, hvq_model, _ = load_hvq(hvq_ckpt_path)
    view = DatasetView(cfg, data_dir)
    records = view.fit_records
    features = view.features(backbone, records)
    token_kinds = np.stack([token_kind_map(cfg, r) for r in records])
    report = codebook_diagnostics(hvq_model, features, token_kinds=token_kinds)
    tmp = f"{out_path}.tmp"
    with open(tmp, "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    os.replace(tmp, out_path)
    return report
