"""Procedural multi-object benchmark with labeled logical/structural anomalies.

Scenes are small RGB canvases holding a fixed multiset of colored geometric
objects, one per permitted region, with positional jitter. Logical anomalies
(missing / extra / swapped-position / wrong-combination) violate only the
global arrangement while every local patch stays inside the normal patch
vocabulary; structural anomalies (scratch / blob) inject out-of-vocabulary
texture while the arrangement stays valid.

Images are written as binary PPM (P6) plus a JSON manifest. Every image
derives its generator from (dataset seed, global image index), so parallel
and serial generation are bitwise identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import rng as rng_mod

LOGICAL_KINDS = ("missing", "extra", "swapped-position", "wrong-combination")
STRUCTURAL_KINDS = ("scratch", "blob")

SCRATCH_COLOR = (15, 15, 15)
BLOB_COLOR = (205, 40, 205)

# tiles of this size must never straddle two objects, so that logical
# anomalies remain locally indistinguishable from normal patches
PATCH_ALIGN = 4


class LayoutError(ValueError):
    """Requested layout cannot be realized (region too small, etc.)."""


class KindError(ValueError):
    """Anomaly kind not applicable to the scene spec."""


@dataclass(frozen=True)
class ObjectKind:
    name: str
    shape: str  # "square" or "circle"
    color: tuple
    size: int  # side length / diameter in pixels


@dataclass(frozen=True)
class Slot:
    """One required object and the region its top-left corner may occupy."""
    kind: int  # index into SceneSpec.kinds
    x_min: int
    x_max: int  # inclusive bounds for the top-left corner
    y_min: int
    y_max: int


@dataclass(frozen=True)
class SceneSpec:
    height: int = 32
    width: int = 32
    background: tuple = (190, 190, 190)
    kinds: tuple = ()
    slots: tuple = ()
    # groups of slot indices whose kinds may permute among themselves; a
    # normal scene places each group's kind multiset in any order, so the
    # layout rule is combinatorial rather than a fixed kind-per-slot map
    groups: tuple = ()

    def __post_init__(self):
        if len(self.kinds) < 3:
            raise LayoutError("object vocabulary must have at least 3 kinds")
        for s in self.slots:
            if s.x_max < s.x_min or s.y_max < s.y_min:
                raise LayoutError(f"infeasible placement region for slot {s}")
            size = self.kinds[s.kind].size
            if s.x_max + size > self.width or s.y_max + size > self.height:
                raise LayoutError(f"slot {s} can place objects outside the canvas")
        seen = set()
        for group in self.groups:
            sizes = set()
            for si in group:
                if si in seen or not (0 <= si < len(self.slots)):
                    raise LayoutError("groups must hold disjoint valid slot indices")
                seen.add(si)
                sizes.add(self.kinds[self.slots[si].kind].size)
            if len(sizes) > 1:
                raise LayoutError("kinds within a permutation group must share a size")

    def slot_group(self, slot_index: int):
        for gi, group in enumerate(self.groups):
            if slot_index in group:
                return gi
        return None

    def allowed_kinds(self, slot_index: int) -> set:
        gi = self.slot_group(slot_index)
        if gi is None:
            return {self.slots[slot_index].kind}
        return {self.slots[si].kind for si in self.groups[gi]}


def default_scene_spec() -> SceneSpec:
    """Four objects, one per quadrant: two squares and two circles.

    Jitter ranges cover all offsets mod PATCH_ALIGN in both axes, so every
    edge/corner phase an anomaly can produce also occurs in normal data.
    Placement bounds keep a >=2px gap across quadrant boundaries: no
    4x4-aligned tile ever contains pixels from two objects.
    """
    kinds = (
        ObjectKind("red-square", "square", (200, 60, 60), 8),
        ObjectKind("green-square", "square", (60, 175, 80), 8),
        ObjectKind("blue-circle", "circle", (70, 90, 200), 8),
        ObjectKind("yellow-circle", "circle", (220, 200, 70), 8),
    )
    slots = (
        Slot(0, 1, 8, 1, 8),      # top-left quadrant
        Slot(1, 17, 24, 1, 8),    # top-right
        Slot(2, 1, 8, 17, 24),    # bottom-left
        Slot(3, 17, 24, 17, 24),  # bottom-right
    )
    # squares permute over the top slots and circles over the bottom slots,
    # so the normal set is combinatorial and a reconstruction model has to
    # generalize over recombinations instead of memorizing one layout
    return SceneSpec(kinds=kinds, slots=slots, groups=((0, 1), (2, 3)))


@dataclass
class PlacedObject:
    kind: str
    shape: str
    color: tuple
    size: int
    x: int
    y: int
    slot: int  # -1 for objects outside any slot (the "extra" anomaly)

    def bbox(self):
        return (self.x, self.y, self.x + self.size - 1, self.y + self.size - 1)


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (H, W, 3) uint8
    label: str  # normal | logical | structural
    kind: str  # none | one of LOGICAL_KINDS/STRUCTURAL_KINDS
    split: str
    index: int
    seed: int
    objects: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _draw_object(img, obj: PlacedObject):
    color = np.array(obj.color, dtype=np.uint8)
    if obj.shape == "square":
        img[obj.y:obj.y + obj.size, obj.x:obj.x + obj.size] = color
    elif obj.shape == "circle":
        r = obj.size / 2.0
        cy, cx = obj.y + r - 0.5, obj.x + r - 0.5
        yy, xx = np.mgrid[obj.y:obj.y + obj.size, obj.x:obj.x + obj.size]
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[obj.y:obj.y + obj.size, obj.x:obj.x + obj.size][mask] = color
    else:
        raise LayoutError(f"unknown shape '{obj.shape}'")


def render(spec: SceneSpec, objects) -> np.ndarray:
    img = np.empty((spec.height, spec.width, 3), dtype=np.uint8)
    img[:] = np.array(spec.background, dtype=np.uint8)
    for obj in objects:
        _draw_object(img, obj)
    return img


def _tiles_of_bbox(bbox):
    x0, y0, x1, y1 = bbox
    return {(ty, tx)
            for ty in range(y0 // PATCH_ALIGN, y1 // PATCH_ALIGN + 1)
            for tx in range(x0 // PATCH_ALIGN, x1 // PATCH_ALIGN + 1)}


def _sample_placements(spec: SceneSpec, gen) -> list:
    kind_for_slot = {si: slot.kind for si, slot in enumerate(spec.slots)}
    for group in spec.groups:
        shuffled = [int(k) for k in gen.permutation([spec.slots[si].kind
                                                     for si in group])]
        kind_for_slot.update(zip(group, shuffled))
    objects = []
    for si, slot in enumerate(spec.slots):
        kind = spec.kinds[kind_for_slot[si]]
        x = int(gen.integers(slot.x_min, slot.x_max + 1))
        y = int(gen.integers(slot.y_min, slot.y_max + 1))
        objects.append(PlacedObject(kind.name, kind.shape, kind.color, kind.size,
                                    x, y, slot=si))
    return objects


def _image_gen(seed: int, index: int):
    return rng_mod.stream(seed, "synthgen-image", index=index)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def generate_normal(spec: SceneSpec, seed: int, index: int, split="train") -> LabeledImage:
    gen = _image_gen(seed, index)
    objects = _sample_placements(spec, gen)
    return LabeledImage(render(spec, objects), "normal", "none", split, index, seed,
                        objects=objects)


def _same_shape_other_kind(spec: SceneSpec, kind_name: str):
    me = next(k for k in spec.kinds if k.name == kind_name)
    for k in spec.kinds:
        if k.name != me.name and k.shape == me.shape:
            return k
    return None


def generate_logical_anomaly(spec: SceneSpec, seed: int, index: int, kind: str,
                             split="test") -> LabeledImage:
    if kind not in LOGICAL_KINDS:
        raise KindError(f"unknown logical anomaly kind '{kind}'")
    gen = _image_gen(seed, index)
    objects = _sample_placements(spec, gen)

    if kind == "missing":
        if len(objects) < 2:
            raise KindError("'missing' needs a layout with at least 2 objects")
        del objects[int(gen.integers(len(objects)))]
    elif kind == "extra":
        # some jitter layouts leave no tile-disjoint gap, so resample the
        # base layout until one admits a free spot
        for _ in range(50):
            src = objects[int(gen.integers(len(objects)))]
            occupied = set()
            for o in objects:
                occupied |= _tiles_of_bbox(o.bbox())
            placed = False
            for _ in range(500):
                x = int(gen.integers(1, spec.width - src.size - 1))
                y = int(gen.integers(1, spec.height - src.size - 1))
                cand = PlacedObject(src.kind, src.shape, src.color, src.size,
                                    x, y, slot=-1)
                if _tiles_of_bbox(cand.bbox()).isdisjoint(occupied):
                    objects.append(cand)
                    placed = True
                    break
            if placed:
                break
            objects = _sample_placements(spec, gen)
        else:
            raise LayoutError("no free tile-disjoint position for the extra object")
    elif kind == "swapped-position":
        if len(objects) < 2:
            raise KindError("'swapped-position' needs at least 2 objects")
        # the pair must come from different permutation groups (or kinds),
        # otherwise the exchanged layout would still satisfy the rule
        pairs = [(i, j) for i in range(len(objects)) for j in range(i + 1, len(objects))
                 if spec.slot_group(objects[i].slot) != spec.slot_group(objects[j].slot)
                 or (spec.slot_group(objects[i].slot) is None
                     and objects[i].kind != objects[j].kind)]
        if not pairs:
            raise KindError("'swapped-position' needs two exchangeable objects "
                            "from different groups")
        i, j = pairs[int(gen.integers(len(pairs)))]
        oi, oj = objects[int(i)], objects[int(j)]
        oi.x, oj.x = oj.x, oi.x
        oi.y, oj.y = oj.y, oi.y
    elif kind == "wrong-combination":
        candidates = [o for o in objects if _same_shape_other_kind(spec, o.kind)]
        if not candidates:
            raise KindError("'wrong-combination' needs two kinds sharing a shape")
        victim = candidates[int(gen.integers(len(candidates)))]
        other = _same_shape_other_kind(spec, victim.kind)
        victim.kind = other.name
        victim.color = other.color
        victim.size = other.size

    return LabeledImage(render(spec, objects), "logical", kind, split, index, seed,
                        objects=objects)


def generate_structural_anomaly(spec: SceneSpec, seed: int, index: int, kind: str,
                                split="test") -> LabeledImage:
    if kind not in STRUCTURAL_KINDS:
        raise KindError(f"unknown structural anomaly kind '{kind}'")
    gen = _image_gen(seed, index)
    objects = _sample_placements(spec, gen)
    img = render(spec, objects)

    if kind == "scratch":
        # 1px-wide polyline of a few straight segments in a non-vocabulary
        # color; total length stays well under 10% of the canvas area
        x = int(gen.integers(4, spec.width - 4))
        y = int(gen.integers(4, spec.height - 4))
        color = np.array(SCRATCH_COLOR, dtype=np.uint8)
        directions = ((1, 0), (0, 1), (1, 1), (1, -1), (-1, 0), (0, -1),
                      (-1, -1), (-1, 1))
        for _ in range(int(gen.integers(2, 4))):
            dx, dy = directions[int(gen.integers(len(directions)))]
            for _ in range(int(gen.integers(5, 9))):
                img[y, x] = color
                x = min(max(x + dx, 0), spec.width - 1)
                y = min(max(y + dy, 0), spec.height - 1)
    else:  # blob: filled ellipse no larger than 4x4 px
        rx = float(gen.uniform(1.7, 2.0))
        ry = float(gen.uniform(1.7, 2.0))
        cx = float(gen.uniform(2, spec.width - 3))
        cy = float(gen.uniform(2, spec.height - 3))
        yy, xx = np.mgrid[0:spec.height, 0:spec.width]
        mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        img[mask] = np.array(BLOB_COLOR, dtype=np.uint8)

    return LabeledImage(img, "structural", kind, split, index, seed, objects=objects)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def validate_layout(spec: SceneSpec, objects) -> bool:
    """Re-check the layout rule from object geometry, independently of pixels."""
    slotted = [o for o in objects if o.slot >= 0]
    if len(objects) != len(spec.slots) or len(slotted) != len(spec.slots):
        return False
    seen = set()
    placed_kind = {}
    for o in slotted:
        if o.slot in seen:
            return False
        seen.add(o.slot)
        slot = spec.slots[o.slot]
        match = [ki for ki in spec.allowed_kinds(o.slot)
                 if spec.kinds[ki].name == o.kind
                 and tuple(spec.kinds[ki].color) == tuple(o.color)]
        if not match:
            return False
        placed_kind[o.slot] = match[0]
        if not (slot.x_min <= o.x <= slot.x_max and slot.y_min <= o.y <= slot.y_max):
            return False
    # each permutation group must hold its required kind multiset exactly
    for group in spec.groups:
        required = sorted(spec.slots[si].kind for si in group)
        if sorted(placed_kind[si] for si in group) != required:
            return False
    return True


# ---------------------------------------------------------------------------
# PPM I/O
# ---------------------------------------------------------------------------

def write_ppm(path, pixels: np.ndarray):
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"write_ppm expects (H, W, 3) uint8, got {pixels.shape} {pixels.dtype}")
    h, w = pixels.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        # skip whitespace and comments between header fields
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a P6 PPM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    data = np.frombuffer(blob, dtype=np.uint8, count=h * w * 3, offset=pos)
    return data.reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# dataset writer
# ---------------------------------------------------------------------------

DEFAULT_COUNTS = {
    "train_normal": 200,
    "test_normal": 50,
    "test_logical": 50,
    "test_structural": 50,
}


def plan_dataset(counts: dict):
    """Deterministic (split, label, kind, global index) work list."""
    plan = []
    idx = 0
    for _ in range(counts["train_normal"]):
        plan.append(("train", "normal", "none", idx))
        idx += 1
    for _ in range(counts["test_normal"]):
        plan.append(("test", "normal", "none", idx))
        idx += 1
    for i in range(counts["test_logical"]):
        plan.append(("test", "logical", LOGICAL_KINDS[i % len(LOGICAL_KINDS)], idx))
        idx += 1
    for i in range(counts["test_structural"]):
        plan.append(("test", "structural", STRUCTURAL_KINDS[i % len(STRUCTURAL_KINDS)], idx))
        idx += 1
    return plan


def generate_item(spec, seed, split, label, kind, index) -> LabeledImage:
    if label == "normal":
        return generate_normal(spec, seed, index, split=split)
    if label == "logical":
        return generate_logical_anomaly(spec, seed, index, kind, split=split)
    return generate_structural_anomaly(spec, seed, index, kind, split=split)


def write_dataset(spec: SceneSpec, counts: dict, seed: int, out_dir, n_workers=1) -> dict:
    """Generate the benchmark into `out_dir`; returns the manifest dict."""
    plan = plan_dataset(counts)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)

    def make(entry):
        split, label, kind, index = entry
        item = generate_item(spec, seed, split, label, kind, index)
        rel = os.path.join("images", f"{split}_{label}_{index:05d}.ppm")
        write_ppm(os.path.join(out_dir, rel), item.pixels)
        return {
            "path": rel,
            "label": label,
            "kind": kind,
            "split": split,
            "seed": seed,
            "index": index,
            "objects": [asdict(o) for o in item.objects],
        }

    if n_workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            records = list(pool.map(make, plan))
    else:
        records = [make(e) for e in plan]

    manifest = {
        "format": "ladmim-dataset-v1",
        "seed": seed,
        "counts": dict(counts),
        "canvas": [spec.height, spec.width],
        "images": records,
    }
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))
    return manifest


def load_manifest(data_dir) -> dict:
    with open(os.path.join(data_dir, "manifest.json")) as f:
        return json.load(f)


def load_images(data_dir, manifest, split=None, label=None) -> list:
    out = []
    for rec in manifest["images"]:
        if split is not None and rec["split"] != split:
            continue
        if label is not None and rec["label"] != label:
            continue
        out.append((rec, read_ppm(os.path.join(data_dir, rec["path"]))))
    return out


MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["format", "seed", "counts", "canvas", "images"],
    "properties": {
        "format": {"const": "ladmim-dataset-v1"},
        "seed": {"type": "integer"},
        "counts": {"type": "object"},
        "canvas": {"type": "array", "items": {"type": "integer"}},
        "images": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["path", "label", "kind", "split", "seed", "index", "objects"],
                "properties": {
                    "path": {"type": "string"},
                    "label": {"enum": ["normal", "logical", "structural"]},
                    "kind": {"enum": ["none"] + list(LOGICAL_KINDS) + list(STRUCTURAL_KINDS)},
                    "split": {"enum": ["train", "test"]},
                    "seed": {"type": "integer"},
                    "index": {"type": "integer"},
                    "objects": {"type": "array"},
                },
            },
        },
    },
}
