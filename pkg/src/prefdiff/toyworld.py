"""Synthetic compositional scenes: rendering, oracle detection, oracle VQA.

Scenes live on a G x G cell grid with C=3 channels and values in [-1, 1].
Objects are axis-aligned shapes drawn in disjoint bounding boxes; colors come
from an 8-entry palette of cube corners so that nearest-palette matching stays
unambiguous under small per-cell jitter. Detection is an oracle that inverts
the renderer by template matching, standing in for a real open-vocabulary
detection + segmentation + captioning stack.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

SHAPES = ("square", "disc", "triangle")
TEXTURES = ("solid", "striped", "checker")
RELATIONS = ("left-of", "right-of", "above", "below")
DIMENSIONS = ("color", "shape", "texture", "spatial", "numeracy")
COUNTS = (1, 2, 3, 4)

# Palette channels sit at +-1 so every pair of colors differs by 2 in at
# least one channel and every color is far from the 0.0 background.
PALETTE = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "magenta": (1.0, -1.0, 1.0),
    "cyan": (-1.0, 1.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (-1.0, -1.0, -1.0),
}
COLORS = tuple(PALETTE)

BACKGROUND = 0.0
DIM_FACTOR = 0.5          # brightness of the dimmed cells of striped/checker
DEFAULT_GRID = 16
CHANNELS = 3
JITTER_MAX = 0.1

_BG_THRESHOLD = 0.3       # max-channel deviation that counts as "object"
_MIN_COMPONENT = 5        # smaller blobs are treated as noise
_MARGIN_TOL = 0.02        # per-cell residual gap required between colors
_FIT_TOL = 0.12           # max per-cell residual for a component to count
                          # as an object at all (noise scores ~0.3)


class AmbiguousDetectionError(ValueError):
    """Nearest-palette (or template) margin fell below tolerance."""


class LayoutError(RuntimeError):
    """No disjoint placement found for the requested objects."""


@dataclass(frozen=True)
class BBox:
    row0: int
    col0: int
    height: int
    width: int

    @property
    def row1(self):
        return self.row0 + self.height

    @property
    def col1(self):
        return self.col0 + self.width

    @property
    def center(self):
        return (self.row0 + self.height / 2.0, self.col0 + self.width / 2.0)

    def overlaps(self, other, margin=0):
        return not (self.row1 + margin <= other.row0 or other.row1 + margin <= self.row0
                    or self.col1 + margin <= other.col0 or other.col1 + margin <= self.col0)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    texture: str
    bbox: BBox


@dataclass(frozen=True)
class SceneSpec:
    """Ground-truth scene: objects in canonical (col0, row0) order.

    ``relation`` is present exactly for two-object scenes of distinct classes
    and always states the dominant-axis relation of object 0 to object 1;
    ``count_tag`` is present exactly for replica (numeracy) scenes.
    """

    objects: tuple
    relation: str = None
    count_tag: int = None


@dataclass(frozen=True)
class ObjectSlot:
    """One caption slot: the shape acts as the object class; color and
    texture are optional attributes."""

    shape: str
    color: str = None
    texture: str = None


@dataclass(frozen=True)
class Caption:
    dimension: str
    objects: tuple
    relation: str = None
    count: int = None


@dataclass(frozen=True, eq=False)
class RegionMask:
    """Two-level G x G loss weights, broadcast over channels."""

    weights: np.ndarray
    w_in: float = 1.0
    w_out: float = 1.0

    def __eq__(self, other):
        if not isinstance(other, RegionMask):
            return NotImplemented
        return (self.w_in == other.w_in and self.w_out == other.w_out
                and np.array_equal(self.weights, other.weights))


def ones_mask(grid=DEFAULT_GRID):
    return RegionMask(weights=np.ones((grid, grid)), w_in=1.0, w_out=1.0)


# ---------------------------------------------------------------------------
# validation

def validate_caption(caption):
    """Raise ValueError if the caption violates the grammar invariants."""
    if caption.dimension not in DIMENSIONS:
        raise ValueError(f"unknown dimension {caption.dimension!r}")
    if not 1 <= len(caption.objects) <= 2:
        raise ValueError("captions carry one or two object slots")
    for slot in caption.objects:
        if slot.shape not in SHAPES:
            raise ValueError(f"unknown shape {slot.shape!r}")
        if slot.color is not None and slot.color not in COLORS:
            raise ValueError(f"unknown color {slot.color!r}")
        if slot.texture is not None and slot.texture not in TEXTURES:
            raise ValueError(f"unknown texture {slot.texture!r}")
    if caption.relation is not None:
        if caption.relation not in RELATIONS:
            raise ValueError(f"unknown relation {caption.relation!r}")
        if len(caption.objects) != 2:
            raise ValueError("a relation needs two object slots")
    if caption.count is not None:
        if caption.count not in COUNTS:
            raise ValueError(f"count {caption.count!r} outside {COUNTS}")
        if len(caption.objects) != 1:
            raise ValueError("counted captions carry a single replica slot")
    if caption.dimension == "spatial" and caption.relation is None:
        raise ValueError("spatial captions need a relation")
    if caption.dimension == "numeracy" and caption.count is None:
        raise ValueError("numeracy captions need a count")
    if caption.dimension == "color" and any(s.color is None for s in caption.objects):
        raise ValueError("color captions need a color on every slot")
    if caption.dimension == "texture" and any(s.texture is None for s in caption.objects):
        raise ValueError("texture captions need a texture on every slot")


def validate_scene(scene, grid=DEFAULT_GRID):
    """Raise ValueError if the scene violates its invariants."""
    if not scene.objects:
        return
    for obj in scene.objects:
        b = obj.bbox
        if b.row0 < 0 or b.col0 < 0 or b.row1 > grid or b.col1 > grid:
            raise ValueError(f"bbox {b} overflows {grid}x{grid} grid")
        if b.height < 1 or b.width < 1:
            raise ValueError("degenerate bbox")
    for i, a in enumerate(scene.objects):
        for b in scene.objects[i + 1:]:
            if a.bbox.overlaps(b.bbox):
                raise ValueError("object bboxes overlap")
    if scene.count_tag is not None:
        attrs = {(o.shape, o.color, o.texture) for o in scene.objects}
        if len(attrs) != 1 or len(scene.objects) != scene.count_tag:
            raise ValueError("numeracy scene replicas must share attributes")
    if scene.relation is not None:
        if len(scene.objects) != 2:
            raise ValueError("relation requires exactly two objects")
        if scene.relation != _dominant_relation(scene.objects[0].bbox, scene.objects[1].bbox):
            raise ValueError("stored relation inconsistent with bbox centers")


# ---------------------------------------------------------------------------
# rendering

def shape_cell_mask(shape, height, width):
    """Boolean (height, width) occupancy mask of a shape inside its bbox."""
    if shape == "square":
        return np.ones((height, width), dtype=bool)
    if shape == "disc":
        r = (np.arange(height)[:, None] + 0.5 - height / 2.0) / (height / 2.0)
        c = (np.arange(width)[None, :] + 0.5 - width / 2.0) / (width / 2.0)
        # a 3x3 inscribed circle would cover every cell; trim the corners so
        # tiny discs stay distinguishable from squares
        cutoff = 0.85 if height <= 3 and width <= 3 else 1.0
        return r * r + c * c <= cutoff
    if shape == "triangle":
        mask = np.zeros((height, width), dtype=bool)
        for i in range(height):
            span = max(1, round(width * (i + 1) / height))
            start = (width - span) // 2
            mask[i, start:start + span] = True
        return mask
    raise ValueError(f"unknown shape {shape!r}")


def texture_factor(texture, height, width):
    """Per-cell brightness factor of a texture, relative to the bbox origin."""
    if texture == "solid":
        return np.ones((height, width))
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    if texture == "striped":
        return np.where(rows % 2 == 0, 1.0, DIM_FACTOR) * np.ones((1, width))
    if texture == "checker":
        return np.where((rows + cols) % 2 == 0, 1.0, DIM_FACTOR)
    raise ValueError(f"unknown texture {texture!r}")


def object_patch(shape, color, texture, height, width):
    """The exact pixel patch an object produces inside its bbox."""
    mask = shape_cell_mask(shape, height, width)
    factor = texture_factor(texture, height, width)
    rgb = np.array(PALETTE[color])
    patch = np.full((height, width, CHANNELS), BACKGROUND)
    patch[mask] = factor[mask, None] * rgb[None, :]
    return patch


def render(scene, layout_seed, jitter=0.0, grid=DEFAULT_GRID):
    """Draw a scene onto the grid, then add clipped Gaussian per-cell jitter.

    Deterministic given (scene, layout_seed, jitter); jitter magnitude never
    exceeds ``jitter`` per cell and the result is clamped to [-1, 1].
    """
    validate_scene(scene, grid)
    img = np.full((grid, grid, CHANNELS), BACKGROUND)
    for obj in scene.objects:
        b = obj.bbox
        patch = object_patch(obj.shape, obj.color, obj.texture, b.height, b.width)
        mask = shape_cell_mask(obj.shape, b.height, b.width)
        region = img[b.row0:b.row1, b.col0:b.col1]
        region[mask] = patch[mask]
    if jitter > 0.0:
        rng = np.random.default_rng(np.random.SeedSequence(int(layout_seed) & 0xFFFFFFFFFFFFFFFF))
        noise = np.clip(rng.normal(0.0, jitter / 2.0, img.shape), -jitter, jitter)
        img = img + noise
    return np.clip(img, -1.0, 1.0)


# ---------------------------------------------------------------------------
# oracle detection

def _dominant_relation(bbox_a, bbox_b):
    """Relation of a to b along the axis with the larger center offset."""
    (ra, ca), (rb, cb) = bbox_a.center, bbox_b.center
    dr, dc = rb - ra, cb - ca
    if abs(dc) >= abs(dr):
        return "left-of" if dc > 0 else "right-of"
    return "above" if dr > 0 else "below"


def detect(image, grid=None):
    """Recover the generating SceneSpec from a rendered image.

    Connected components of non-background cells give candidate objects; each
    component is classified by exhaustive template matching over
    (shape, color, texture) within its bounding box. Raises
    AmbiguousDetectionError when the best and runner-up color explain a
    component almost equally well.
    """
    image = np.asarray(image)
    deviation = np.abs(image - BACKGROUND).max(axis=2)
    labels, n = ndimage.label(deviation > _BG_THRESHOLD)
    objects = []
    for k in range(1, n + 1):
        rows, cols = np.nonzero(labels == k)
        if rows.size < _MIN_COMPONENT:
            continue
        bbox = BBox(int(rows.min()), int(cols.min()),
                    int(rows.max() - rows.min() + 1), int(cols.max() - cols.min() + 1))
        patch = image[bbox.row0:bbox.row1, bbox.col0:bbox.col1]
        ncells = bbox.height * bbox.width * CHANNELS
        best = None          # (residual, shape, color, texture)
        best_other_color = np.inf
        for shape in SHAPES:
            for texture in TEXTURES:
                for color in COLORS:
                    tmpl = object_patch(shape, color, texture, bbox.height, bbox.width)
                    resid = float(np.square(patch - tmpl).sum()) / ncells
                    if best is None or resid < best[0]:
                        if best is not None and best[2] != color:
                            best_other_color = min(best_other_color, best[0])
                        best = (resid, shape, color, texture)
                    elif color != best[2]:
                        best_other_color = min(best_other_color, resid)
        if best_other_color - best[0] < _MARGIN_TOL:
            raise AmbiguousDetectionError(
                f"palette margin {best_other_color - best[0]:.4f} below {_MARGIN_TOL}")
        if best[0] > _FIT_TOL:
            continue   # nothing renderable explains this blob
        objects.append(SceneObject(best[1], best[2], best[3], bbox))

    objects.sort(key=lambda o: (o.bbox.col0, o.bbox.row0))
    relation = None
    count_tag = None
    attrs = {(o.shape, o.color, o.texture) for o in objects}
    if len(objects) >= 2 and len(attrs) == 1:
        count_tag = len(objects)
    elif len(objects) == 2:
        relation = _dominant_relation(objects[0].bbox, objects[1].bbox)
    return SceneSpec(objects=tuple(objects), relation=relation, count_tag=count_tag)


# ---------------------------------------------------------------------------
# oracle VQA

def _slot_matches(slot, obj):
    return ((slot.shape == obj.shape)
            and (slot.color is None or slot.color == obj.color)
            and (slot.texture is None or slot.texture == obj.texture))


def _slot_score(slot, obj):
    score = int(slot.shape == obj.shape)
    if slot.color is not None:
        score += int(slot.color == obj.color)
    if slot.texture is not None:
        score += int(slot.texture == obj.texture)
    return score


def _relation_holds(relation, bbox_a, bbox_b):
    (ra, ca), (rb, cb) = bbox_a.center, bbox_b.center
    if relation == "left-of":
        return ca < cb
    if relation == "right-of":
        return ca > cb
    if relation == "above":
        return ra < rb
    if relation == "below":
        return ra > rb
    raise ValueError(f"unknown relation {relation!r}")


@dataclass(frozen=True)
class VqaResult:
    passed: bool
    answers: tuple


def vqa_check(image, caption):
    """Answer one oracle question per caption slot (plus relation/count).

    Answers are exactly 0.0 or 1.0; the check passes iff every answer is at
    least 0.5. Detection failures simply score 0 on every question.
    """
    validate_caption(caption)
    try:
        scene = detect(image)
    except AmbiguousDetectionError:
        scene = None
    n_questions = len(caption.objects)
    n_questions += int(caption.relation is not None) + int(caption.count is not None)
    if scene is None:
        return VqaResult(passed=False, answers=(0.0,) * n_questions)
    objs = scene.objects

    answers = []
    if caption.count is not None:
        slot = caption.objects[0]
        ok = bool(objs) and all(_slot_matches(slot, o) for o in objs)
        answers.append(1.0 if ok else 0.0)
        answers.append(1.0 if len(objs) == caption.count else 0.0)
        return VqaResult(passed=all(a >= 0.5 for a in answers), answers=tuple(answers))

    assignment = _best_assignment(caption.objects, objs)
    for i, slot in enumerate(caption.objects):
        j = assignment[i]
        ok = j is not None and _slot_matches(slot, objs[j])
        answers.append(1.0 if ok else 0.0)
    if caption.relation is not None:
        a, b = assignment[0], assignment[1]
        ok = (a is not None and b is not None and a != b
              and _relation_holds(caption.relation, objs[a].bbox, objs[b].bbox))
        answers.append(1.0 if ok else 0.0)
    return VqaResult(passed=all(a >= 0.5 for a in answers), answers=tuple(answers))


def _best_assignment(slots, objs):
    """Injective slot -> object map maximizing matched attributes."""
    if not objs:
        return [None] * len(slots)
    if len(slots) == 1:
        scores = [_slot_score(slots[0], o) for o in objs]
        return [int(np.argmax(scores))]
    best, best_score = (None, None), -1
    for a in range(len(objs)):
        for b in range(len(objs)):
            if a == b:
                continue
            score = _slot_score(slots[0], objs[a]) + _slot_score(slots[1], objs[b])
            if score > best_score:
                best, best_score = (a, b), score
    if best == (None, None):           # single detected object, two slots
        scores = [_slot_score(slots[0], o) for o in objs]
        j = int(np.argmax(scores))
        return [j, None]
    return list(best)


# ---------------------------------------------------------------------------
# region masks

def region_mask(scene, edited_object_indices, w_in=1.0, w_out=0.5, grid=DEFAULT_GRID):
    """Two-level weights: w_in inside every edited object's bbox, w_out elsewhere."""
    for i in edited_object_indices:
        if not 0 <= i < len(scene.objects):
            raise IndexError(f"object index {i} out of range")
    weights = np.full((grid, grid), float(w_out))
    for i in edited_object_indices:
        b = scene.objects[i].bbox
        weights[b.row0:b.row1, b.col0:b.col1] = float(w_in)
    return RegionMask(weights=weights, w_in=float(w_in), w_out=float(w_out))


# ---------------------------------------------------------------------------
# scene construction from captions

def _size_range(grid):
    lo = max(3, round(grid * 0.25))
    hi = max(lo, round(grid / 3))
    return lo, hi


def _place_disjoint(rng, sizes, grid, constraint=None, tries=600):
    """Rejection-sample disjoint bboxes (1-cell separation); optionally keep
    only placements satisfying ``constraint(bboxes)``."""
    for _ in range(tries):
        boxes = []
        ok = True
        for (h, w) in sizes:
            for _ in range(60):
                r0 = int(rng.integers(0, grid - h + 1))
                c0 = int(rng.integers(0, grid - w + 1))
                cand = BBox(r0, c0, h, w)
                if all(not cand.overlaps(b, margin=1) for b in boxes):
                    boxes.append(cand)
                    break
            else:
                ok = False
                break
        if ok and (constraint is None or constraint(boxes)):
            return boxes
    raise LayoutError(f"could not place {len(sizes)} objects on a {grid}x{grid} grid")


def _axis_dominant(relation):
    def constraint(boxes):
        got = _dominant_relation(boxes[0], boxes[1])
        if got != relation:
            return False
        # require a clear dominant axis so the relation is unambiguous
        (ra, ca), (rb, cb) = boxes[0].center, boxes[1].center
        dr, dc = abs(rb - ra), abs(cb - ca)
        return (dc > dr + 0.5) if relation in ("left-of", "right-of") else (dr > dc + 0.5)
    return constraint


def scene_from_caption(caption, layout_seed, grid=DEFAULT_GRID):
    """Complete a caption into a concrete scene.

    Unspecified attributes are filled from the seeded generator, bboxes are
    placed disjointly (respecting the caption's relation, if any), and the
    result is canonically ordered. Returns (scene, slot_map) where
    slot_map[i] is the scene index of caption slot i.
    """
    validate_caption(caption)
    rng = np.random.default_rng(np.random.SeedSequence(int(layout_seed) & 0xFFFFFFFFFFFFFFFF))
    filled = []
    for slot in caption.objects:
        color = slot.color if slot.color is not None else COLORS[rng.integers(len(COLORS))]
        texture = slot.texture if slot.texture is not None else TEXTURES[rng.integers(len(TEXTURES))]
        filled.append((slot.shape, color, texture))

    lo, hi = _size_range(grid)
    if caption.count is not None:
        # always lay out the maximum replica count so edited counts reuse it
        side = lo
        boxes = _place_disjoint(rng, [(side, side)] * max(COUNTS), grid)
        shape, color, texture = filled[0]
        objs = [SceneObject(shape, color, texture, b) for b in boxes[:caption.count]]
        objs.sort(key=lambda o: (o.bbox.col0, o.bbox.row0))
        scene = SceneSpec(objects=tuple(objs), relation=None, count_tag=caption.count)
        validate_scene(scene, grid)
        return scene, (0,)

    sizes = [(int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))
             for _ in caption.objects]
    constraint = _axis_dominant(caption.relation) if caption.relation is not None else None
    boxes = _place_disjoint(rng, sizes, grid, constraint=constraint)
    objs = [SceneObject(s, c, t, b) for (s, c, t), b in zip(filled, boxes)]

    order = sorted(range(len(objs)), key=lambda i: (objs[i].bbox.col0, objs[i].bbox.row0))
    slot_map = tuple(order.index(i) for i in range(len(objs)))
    objs = [objs[i] for i in order]
    relation = None
    if len(objs) == 2:
        relation = _dominant_relation(objs[0].bbox, objs[1].bbox)
    scene = SceneSpec(objects=tuple(objs), relation=relation, count_tag=None)
    validate_scene(scene, grid)
    return scene, slot_map


def caption_of(scene, dimension):
    """Project a scene back onto a caption of the given dimension."""
    if dimension == "numeracy":
        o = scene.objects[0]
        return Caption(dimension="numeracy", objects=(ObjectSlot(shape=o.shape),),
                       count=scene.count_tag or len(scene.objects))
    if dimension == "spatial":
        a, b = scene.objects
        return Caption(dimension="spatial",
                       objects=(ObjectSlot(shape=a.shape), ObjectSlot(shape=b.shape)),
                       relation=scene.relation)
    slots = []
    for o in scene.objects:
        if dimension == "color":
            slots.append(ObjectSlot(shape=o.shape, color=o.color))
        elif dimension == "texture":
            slots.append(ObjectSlot(shape=o.shape, texture=o.texture))
        elif dimension == "shape":
            slots.append(ObjectSlot(shape=o.shape))
        else:
            raise ValueError(f"unknown dimension {dimension!r}")
    return Caption(dimension=dimension, objects=tuple(slots))


def flip_relation(relation):
    return {"left-of": "right-of", "right-of": "left-of",
            "above": "below", "below": "above"}[relation]


def apply_scene_edit(scene_w, caption_w, caption_l, edited_slots, slot_map,
                     layout_seed, grid=DEFAULT_GRID):
    """Derive the edited scene from the winner scene so that only the edited
    slots differ. Returns (scene_l, edited_scene_indices_w, edited_scene_indices_l)."""
    if caption_l.count is not None and caption_l.count != caption_w.count:
        scene_l, _ = scene_from_caption(caption_l, layout_seed, grid)
        shared = min(caption_w.count, caption_l.count)
        idx_w = frozenset(range(shared, caption_w.count))
        idx_l = frozenset(range(shared, caption_l.count))
        # replica layouts share a prefix, but canonical order may differ; map
        # edited replicas through position identity instead
        pos_w = {o.bbox: i for i, o in enumerate(scene_w.objects)}
        pos_l = {o.bbox: i for i, o in enumerate(scene_l.objects)}
        shared_boxes = set(pos_w) & set(pos_l)
        idx_w = frozenset(i for b, i in pos_w.items() if b not in shared_boxes)
        idx_l = frozenset(i for b, i in pos_l.items() if b not in shared_boxes)
        return scene_l, idx_w, idx_l

    if caption_l.relation is not None and caption_l.relation != caption_w.relation:
        a, b = scene_w.objects
        swapped = (replace(a, bbox=b.bbox), replace(b, bbox=a.bbox))
        objs = sorted(swapped, key=lambda o: (o.bbox.col0, o.bbox.row0))
        scene_l = SceneSpec(objects=tuple(objs),
                            relation=_dominant_relation(objs[0].bbox, objs[1].bbox),
                            count_tag=None)
        validate_scene(scene_l, grid)
        both = frozenset(range(len(scene_w.objects)))
        return scene_l, both, both

    # attribute edit: overwrite the edited slots' attributes in place
    objs = list(scene_w.objects)
    touched = set()
    for i in edited_slots:
        j = slot_map[i]
        slot = caption_l.objects[i]
        o = objs[j]
        objs[j] = SceneObject(shape=slot.shape,
                              color=slot.color if slot.color is not None else o.color,
                              texture=slot.texture if slot.texture is not None else o.texture,
                              bbox=o.bbox)
        touched.add(j)
    attrs = {(o.shape, o.color, o.texture) for o in objs}
    count_tag = len(objs) if (len(objs) >= 2 and len(attrs) == 1) else None
    relation = scene_w.relation if count_tag is None else None
    scene_l = SceneSpec(objects=tuple(objs), relation=relation, count_tag=count_tag)
    validate_scene(scene_l, grid)
    touched = frozenset(touched)
    return scene_l, touched, touched
