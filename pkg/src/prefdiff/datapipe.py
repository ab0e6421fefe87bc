"""Preference-pair construction: grammar sampling, caption editing, paired
rendering, oracle filtering, and dataset serialization.

Every judgment a production pipeline would delegate to learned models
(dimension parsing, captioning, editing, VQA filtering) is replaced by a
deterministic oracle over the synthetic scene grammar, so each stage is
exactly checkable. The stage structure is preserved: captions are sampled per
dimension, edited into minimally-different variants (with swap/replace
augmentation for two-object attribute captions), re-rendered under a shared
layout so only edited regions differ, and cross-checked four ways before a
pair is admitted.
"""

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from . import toyworld as tw

DATASET_FORMAT = "prefdiff-dataset"
DATASET_VERSION = 1

DEFAULT_JITTER = 0.05

# mix of training pairs per dimension, color-heavy
DEFAULT_MIX = {"color": 0.366, "shape": 0.100, "texture": 0.181,
               "spatial": 0.147, "numeracy": 0.206}

SAMPLED_COUNTS = (2, 3, 4)   # single-replica scenes are indistinguishable
                             # from one-object attribute scenes, so the
                             # grammar starts at two


class VqaInconsistencyError(ValueError):
    """A candidate pair failed the four-way VQA cross-check."""


class MalformedRecordError(ValueError):
    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DatasetChecksumError(ValueError):
    pass


class DatasetVersionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PreferencePair:
    """One dataset row: a winner and a loser image-caption pair that differ
    only in the edited slots, plus region masks over the edited objects."""

    x0_w: np.ndarray
    y_w: tw.Caption
    x0_l: np.ndarray
    y_l: tw.Caption
    scene_w: tw.SceneSpec
    scene_l: tw.SceneSpec
    dimension: str
    edited_object_indices: frozenset
    mask_w: tw.RegionMask
    mask_l: tw.RegionMask


@dataclass
class DatasetManifest:
    requested: dict
    realized: dict
    config_hash: str
    filter_stats: dict
    seed: int

    def total_realized(self):
        return sum(self.realized.values())


def _child_seed(*parts):
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# grammar sampling

def sample_caption(dimension, rng_seed, exclude=frozenset()):
    """Uniform draw over the caption grammar conditioned on dimension.

    ``exclude`` rejects specific captions (used to keep evaluation prompts
    out of the training data); resampling uses fresh child seeds.
    """
    if dimension not in tw.DIMENSIONS:
        raise ValueError(f"unsupported dimension {dimension!r}")
    for attempt in range(1000):
        seed = rng_seed if attempt == 0 else _child_seed(rng_seed, "resample", attempt)
        caption = _draw_caption(dimension, np.random.default_rng(
            np.random.SeedSequence(seed & 0xFFFFFFFFFFFFFFFF)))
        if caption not in exclude:
            return caption
    raise RuntimeError(f"grammar for {dimension!r} exhausted by the exclusion set")


def _draw_caption(dimension, rng):
    def pick(seq):
        return seq[int(rng.integers(len(seq)))]

    def pick_shapes(n):
        idx = rng.choice(len(tw.SHAPES), size=n, replace=False)
        return [tw.SHAPES[int(i)] for i in idx]

    if dimension == "color":
        n = 1 + int(rng.integers(2))
        slots = tuple(tw.ObjectSlot(shape=s, color=pick(tw.COLORS)) for s in pick_shapes(n))
        return tw.Caption(dimension="color", objects=slots)
    if dimension == "shape":
        n = 1 + int(rng.integers(2))
        slots = tuple(tw.ObjectSlot(shape=s) for s in pick_shapes(n))
        return tw.Caption(dimension="shape", objects=slots)
    if dimension == "texture":
        n = 1 + int(rng.integers(2))
        slots = tuple(tw.ObjectSlot(shape=s, texture=pick(tw.TEXTURES)) for s in pick_shapes(n))
        return tw.Caption(dimension="texture", objects=slots)
    if dimension == "spatial":
        shapes = pick_shapes(2)
        with_color = rng.random() < 0.5
        slots = tuple(tw.ObjectSlot(shape=s, color=pick(tw.COLORS) if with_color else None)
                      for s in shapes)
        return tw.Caption(dimension="spatial", objects=slots, relation=pick(tw.RELATIONS))
    # numeracy: one replica slot, optionally carrying one extra attribute
    shape = pick(tw.SHAPES)
    extra = rng.random() < 0.5
    if extra and rng.random() < 0.5:
        slot = tw.ObjectSlot(shape=shape, color=pick(tw.COLORS))
    elif extra:
        slot = tw.ObjectSlot(shape=shape, texture=pick(tw.TEXTURES))
    else:
        slot = tw.ObjectSlot(shape=shape)
    return tw.Caption(dimension="numeracy", objects=(slot,), count=pick(SAMPLED_COUNTS))


def parse_dimension(caption):
    """Dimension of a caption from its content, by the priority ladder:
    relations first, then counts, then attributes."""
    tw.validate_caption(caption)
    if caption.relation is not None:
        return "spatial"
    if caption.count is not None:
        return "numeracy"
    if any(s.color is not None for s in caption.objects):
        return "color"
    if any(s.texture is not None for s in caption.objects):
        return "texture"
    return "shape"


# ---------------------------------------------------------------------------
# caption editing

def edit_caption(caption, rng_seed):
    """Edited variants of a caption, each with the touched slot indices.

    Always emits one primary edit (one slot moved to a different vocabulary
    value). Two-object color/shape/texture captions whose two attribute
    values differ additionally get the swap and both replace augmentations.
    All emitted captions are pairwise distinct and differ from the input.
    """
    tw.validate_caption(caption)
    rng = np.random.default_rng(np.random.SeedSequence(_child_seed(rng_seed, "edit")))
    dim = parse_dimension(caption)

    if dim == "spatial":
        flipped = replace(caption, relation=tw.flip_relation(caption.relation))
        return [(flipped, frozenset({0, 1}))]

    if dim == "numeracy":
        options = [c for c in SAMPLED_COUNTS if c != caption.count]
        new_count = options[int(rng.integers(len(options)))]
        return [(replace(caption, count=new_count), frozenset({0}))]

    attr = {"color": "color", "shape": "shape", "texture": "texture"}[dim]
    vocab = {"color": tw.COLORS, "shape": tw.SHAPES, "texture": tw.TEXTURES}[dim]
    values = [getattr(s, attr) for s in caption.objects]

    slot_idx = int(rng.integers(len(caption.objects)))
    taken = set(values)
    options = [v for v in vocab if v not in taken]
    if not options:   # both values present and vocab exhausted: edit the other way
        options = [v for v in vocab if v != values[slot_idx]]
    new_value = options[int(rng.integers(len(options)))]
    edits = [(_set_attr(caption, slot_idx, attr, new_value), frozenset({slot_idx}))]

    if len(caption.objects) == 2 and values[0] != values[1]:
        swap = _set_attr(_set_attr(caption, 0, attr, values[1]), 1, attr, values[0])
        edits.append((swap, frozenset({0, 1})))
        edits.append((_set_attr(caption, 1, attr, values[0]), frozenset({1})))
        edits.append((_set_attr(caption, 0, attr, values[1]), frozenset({0})))
    return edits


def _set_attr(caption, slot_idx, attr, value):
    slots = list(caption.objects)
    slots[slot_idx] = replace(slots[slot_idx], **{attr: value})
    return replace(caption, objects=tuple(slots))


# ---------------------------------------------------------------------------
# pair construction

def build_pair(caption, edit, layout_seed, jitter=DEFAULT_JITTER, grid=tw.DEFAULT_GRID):
    """Render a (winner, loser) pair under one shared layout.

    Both images are rendered with the identical layout seed so regions
    outside the edit differ by at most the shared jitter field. Raises
    VqaInconsistencyError when the four-way cross-check fails (the caller
    counts the discard).
    """
    edited_caption, edited_slots = edit
    if edited_caption == caption:
        raise ValueError("edit must differ from the source caption")
    scene_w, slot_map = tw.scene_from_caption(caption, layout_seed, grid)
    scene_l, idx_w, idx_l = tw.apply_scene_edit(
        scene_w, caption, edited_caption, edited_slots, slot_map, layout_seed, grid)
    x_w = tw.render(scene_w, layout_seed, jitter, grid)
    x_l = tw.render(scene_l, layout_seed, jitter, grid)

    checks = (tw.vqa_check(x_w, caption).passed,
              tw.vqa_check(x_l, edited_caption).passed,
              not tw.vqa_check(x_w, edited_caption).passed,
              not tw.vqa_check(x_l, caption).passed)
    if not all(checks):
        raise VqaInconsistencyError(
            f"cross-check (w/w, l/l, !w/l, !l/w) = {checks} for {caption} -> {edited_caption}")

    dim = parse_dimension(caption)
    return PreferencePair(
        x0_w=x_w, y_w=caption, x0_l=x_l, y_l=edited_caption,
        scene_w=scene_w, scene_l=scene_l, dimension=dim,
        edited_object_indices=frozenset(edited_slots),
        mask_w=tw.region_mask(scene_w, idx_w, 1.0, 0.5, grid),
        mask_l=tw.region_mask(scene_l, idx_l, 1.0, 0.5, grid))


def generate_dataset(counts, seed, jitter=DEFAULT_JITTER, grid=tw.DEFAULT_GRID,
                     exclude_captions=frozenset(), layout_pool=None):
    """Build a preference dataset with the requested per-dimension pair counts.

    Each sampled caption contributes every edit it admits (one pair per edit)
    until the dimension's quota is met. Discards from failed cross-checks or
    impossible layouts are counted in the manifest. ``layout_pool`` caps the
    number of distinct layout seeds to make the generative task easier at
    desk scale.
    """
    pairs = []
    realized = {}
    stats = {}
    for dim, want in counts.items():
        built = 0
        discarded_vqa = 0
        discarded_layout = 0
        i = 0
        dim_pairs = []
        while built < want:
            cap_seed = _child_seed(seed, dim, i, "caption")
            caption = sample_caption(dim, cap_seed, exclude=exclude_captions)
            edits = edit_caption(caption, _child_seed(seed, dim, i, "edit"))
            for j, edit in enumerate(edits):
                if built >= want:
                    break
                if edit[0] in exclude_captions:
                    continue   # edited caption collides with a reserved prompt
                if layout_pool:
                    pool_idx = _child_seed(seed, dim, i, j, "pick") % layout_pool
                    layout_seed = _child_seed(seed, "pool", pool_idx)
                else:
                    layout_seed = _child_seed(seed, dim, i, j, "layout")
                try:
                    dim_pairs.append(build_pair(caption, edit, layout_seed, jitter, grid))
                    built += 1
                except VqaInconsistencyError:
                    discarded_vqa += 1
                except tw.LayoutError:
                    discarded_layout += 1
            i += 1
            if i > want * 50 + 100:
                break   # give up quietly; manifest shows the shortfall
        pairs.extend(dim_pairs)
        realized[dim] = built
        stats[dim] = {"captions_sampled": i, "built": built,
                      "discarded_vqa": discarded_vqa,
                      "discarded_layout": discarded_layout}
    config = {"counts": dict(counts), "seed": seed, "jitter": jitter, "grid": grid,
              "layout_pool": layout_pool, "version": DATASET_VERSION}
    config_hash = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()
    manifest = DatasetManifest(requested=dict(counts), realized=realized,
                               config_hash=config_hash, filter_stats=stats, seed=seed)
    return pairs, manifest


def pairs_equal(a, b):
    """Structural equality of two pairs (exact image and mask values)."""
    return (np.array_equal(a.x0_w, b.x0_w) and np.array_equal(a.x0_l, b.x0_l)
            and a.y_w == b.y_w and a.y_l == b.y_l
            and a.scene_w == b.scene_w and a.scene_l == b.scene_l
            and a.dimension == b.dimension
            and a.edited_object_indices == b.edited_object_indices
            and a.mask_w == b.mask_w and a.mask_l == b.mask_l)


def dataset_captions(pairs):
    """Every caption (winner or loser) appearing in a list of pairs."""
    out = set()
    for p in pairs:
        out.add(p.y_w)
        out.add(p.y_l)
    return out


# ---------------------------------------------------------------------------
# filtering

def filter_pairs(pairs, corruption_rate=0.0, rng_seed=0):
    """Re-run the four-way cross-check, optionally corrupting labels first.

    Corruption swaps y_w/y_l on a random subset (images untouched), which the
    oracle check then rejects; it exists purely to exercise the filter.
    Returns (kept, discarded, stats).
    """
    if not 0.0 <= corruption_rate < 1.0:
        raise ValueError("corruption_rate must be in [0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence(int(rng_seed) & 0xFFFFFFFFFFFFFFFF))
    corrupt = rng.random(len(pairs)) < corruption_rate
    kept, discarded = [], []
    stats = {"injected": int(corrupt.sum()), "per_dimension": {}}
    for pair, bad in zip(pairs, corrupt):
        if bad:
            pair = replace(pair, y_w=pair.y_l, y_l=pair.y_w)
        ok = (tw.vqa_check(pair.x0_w, pair.y_w).passed
              and tw.vqa_check(pair.x0_l, pair.y_l).passed
              and not tw.vqa_check(pair.x0_w, pair.y_l).passed
              and not tw.vqa_check(pair.x0_l, pair.y_w).passed)
        bucket = stats["per_dimension"].setdefault(
            pair.dimension, {"kept": 0, "discarded": 0})
        if ok:
            kept.append(pair)
            bucket["kept"] += 1
        else:
            discarded.append(pair)
            bucket["discarded"] += 1
    return kept, discarded, stats


# ---------------------------------------------------------------------------
# serialization

def caption_to_dict(c):
    return {"dimension": c.dimension,
            "objects": [{"shape": s.shape, "color": s.color, "texture": s.texture}
                        for s in c.objects],
            "relation": c.relation, "count": c.count}


def caption_from_dict(d):
    return tw.Caption(dimension=d["dimension"],
                      objects=tuple(tw.ObjectSlot(**s) for s in d["objects"]),
                      relation=d["relation"], count=d["count"])


def _scene_dict(s):
    return {"objects": [{"shape": o.shape, "color": o.color, "texture": o.texture,
                         "bbox": [o.bbox.row0, o.bbox.col0, o.bbox.height, o.bbox.width]}
                        for o in s.objects],
            "relation": s.relation, "count_tag": s.count_tag}


def _scene_from(d):
    objs = tuple(tw.SceneObject(o["shape"], o["color"], o["texture"], tw.BBox(*o["bbox"]))
                 for o in d["objects"])
    return tw.SceneSpec(objects=objs, relation=d["relation"], count_tag=d["count_tag"])


def _mask_dict(m):
    inside = (m.weights == m.w_in).reshape(-1) if m.w_in != m.w_out \
        else np.zeros(m.weights.size, dtype=bool)
    runs = []
    current, length = False, 0
    for v in inside:
        if bool(v) == current:
            length += 1
        else:
            runs.append(length)
            current, length = bool(v), 1
    runs.append(length)
    return {"w_in": m.w_in, "w_out": m.w_out, "grid": m.weights.shape[0], "runs": runs}


def _mask_from(d):
    flat = np.empty(d["grid"] * d["grid"])
    pos, value = 0, False
    for run in d["runs"]:
        flat[pos:pos + run] = d["w_in"] if value else d["w_out"]
        pos += run
        value = not value
    return tw.RegionMask(weights=flat.reshape(d["grid"], d["grid"]),
                         w_in=d["w_in"], w_out=d["w_out"])


def _pair_dict(p):
    grid = p.x0_w.shape[0]
    return {"kind": "pair", "grid": grid,
            "x0_w": p.x0_w.reshape(-1).tolist(), "x0_l": p.x0_l.reshape(-1).tolist(),
            "y_w": caption_to_dict(p.y_w), "y_l": caption_to_dict(p.y_l),
            "scene_w": _scene_dict(p.scene_w), "scene_l": _scene_dict(p.scene_l),
            "dimension": p.dimension,
            "edited_object_indices": sorted(p.edited_object_indices),
            "mask_w": _mask_dict(p.mask_w), "mask_l": _mask_dict(p.mask_l)}


def _pair_from(d):
    grid = d["grid"]
    shape = (grid, grid, tw.CHANNELS)
    return PreferencePair(
        x0_w=np.array(d["x0_w"]).reshape(shape),
        y_w=caption_from_dict(d["y_w"]),
        x0_l=np.array(d["x0_l"]).reshape(shape),
        y_l=caption_from_dict(d["y_l"]),
        scene_w=_scene_from(d["scene_w"]), scene_l=_scene_from(d["scene_l"]),
        dimension=d["dimension"],
        edited_object_indices=frozenset(d["edited_object_indices"]),
        mask_w=_mask_from(d["mask_w"]), mask_l=_mask_from(d["mask_l"]))


def write_dataset(pairs, manifest, path):
    """Line-delimited records with a manifest header; checksummed."""
    lines = [json.dumps(_pair_dict(p)) for p in pairs]
    digest = hashlib.sha256()
    for line in lines:
        digest.update(line.encode())
        digest.update(b"\n")
    header = {"kind": "manifest", "format": DATASET_FORMAT, "version": DATASET_VERSION,
              "requested": manifest.requested, "realized": manifest.realized,
              "config_hash": manifest.config_hash, "filter_stats": manifest.filter_stats,
              "seed": manifest.seed, "records": len(pairs), "checksum": digest.hexdigest()}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for line in lines:
            fh.write(line + "\n")


def read_dataset(path):
    """Inverse of write_dataset; raises on version, checksum, or record damage."""
    with open(path) as fh:
        raw = fh.read().split("\n")
    if raw and raw[-1] == "":
        raw = raw[:-1]
    if not raw:
        raise MalformedRecordError(1, "empty file")
    try:
        header = json.loads(raw[0])
    except json.JSONDecodeError as exc:
        raise MalformedRecordError(1, f"bad manifest: {exc}") from exc
    if header.get("format") != DATASET_FORMAT:
        raise DatasetVersionError(f"not a {DATASET_FORMAT} file")
    if header.get("version") != DATASET_VERSION:
        raise DatasetVersionError(f"unsupported version {header.get('version')!r}")
    digest = hashlib.sha256()
    pairs = []
    for line_no, line in enumerate(raw[1:], start=2):
        try:
            record = json.loads(line)
            if record.get("kind") != "pair":
                raise ValueError(f"unexpected record kind {record.get('kind')!r}")
            pairs.append(_pair_from(record))
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedRecordError(line_no, str(exc)) from exc
        digest.update(line.encode())
        digest.update(b"\n")
    if len(pairs) != header["records"]:
        raise MalformedRecordError(len(raw) + 1,
                                   f"expected {header['records']} records, found {len(pairs)}")
    if digest.hexdigest() != header["checksum"]:
        raise DatasetChecksumError("dataset checksum mismatch")
    manifest = DatasetManifest(requested=header["requested"], realized=header["realized"],
                               config_hash=header["config_hash"],
                               filter_stats=header["filter_stats"], seed=header["seed"])
    return pairs, manifest


def default_mix(total):
    """Per-dimension pair counts following the color-heavy default mix."""
    counts = {dim: int(round(total * frac)) for dim, frac in DEFAULT_MIX.items()}
    drift = total - sum(counts.values())
    counts["color"] += drift
    return counts
