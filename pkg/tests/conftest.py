"""Shared test helpers: grammar enumeration and finite-difference oracles."""

import itertools

import numpy as np

from prefdiff import datapipe as dp
from prefdiff import toyworld as tw


def enumerate_captions():
    """Every caption the grammar can produce (used for brute-force checks)."""
    captions = []
    shape_pairs = [(a, b) for a in tw.SHAPES for b in tw.SHAPES if a != b]

    for attr, vocab, dim in (("color", tw.COLORS, "color"),
                             ("texture", tw.TEXTURES, "texture")):
        for s in tw.SHAPES:
            for v in vocab:
                captions.append(tw.Caption(
                    dimension=dim, objects=(tw.ObjectSlot(s, **{attr: v}),)))
        for (a, b), va, vb in itertools.product(shape_pairs, vocab, vocab):
            captions.append(tw.Caption(dimension=dim, objects=(
                tw.ObjectSlot(a, **{attr: va}), tw.ObjectSlot(b, **{attr: vb}))))

    for s in tw.SHAPES:
        captions.append(tw.Caption(dimension="shape", objects=(tw.ObjectSlot(s),)))
    for a, b in shape_pairs:
        captions.append(tw.Caption(dimension="shape",
                                   objects=(tw.ObjectSlot(a), tw.ObjectSlot(b))))

    for a, b in shape_pairs:
        for rel in tw.RELATIONS:
            captions.append(tw.Caption(dimension="spatial", relation=rel,
                                       objects=(tw.ObjectSlot(a), tw.ObjectSlot(b))))
            for ca, cb in itertools.product(tw.COLORS, tw.COLORS):
                captions.append(tw.Caption(
                    dimension="spatial", relation=rel,
                    objects=(tw.ObjectSlot(a, color=ca), tw.ObjectSlot(b, color=cb))))

    for s in tw.SHAPES:
        for count in dp.SAMPLED_COUNTS:
            captions.append(tw.Caption(dimension="numeracy", count=count,
                                       objects=(tw.ObjectSlot(s),)))
            for c in tw.COLORS:
                captions.append(tw.Caption(dimension="numeracy", count=count,
                                           objects=(tw.ObjectSlot(s, color=c),)))
            for t in tw.TEXTURES:
                captions.append(tw.Caption(dimension="numeracy", count=count,
                                           objects=(tw.ObjectSlot(s, texture=t),)))
    return captions


def finite_difference_grads(loss_fn, params, h=1e-5):
    """Central finite differences of loss_fn() w.r.t. every parameter entry."""
    grads = []
    for w, b in params.layers:
        pair = []
        for arr in (w, b):
            g = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + h
                fp = loss_fn()
                arr[idx] = orig - h
                fm = loss_fn()
                arr[idx] = orig
                g[idx] = (fp - fm) / (2 * h)
            pair.append(g)
        grads.append(tuple(pair))
    return grads


def max_relative_grad_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for (aw, ab), (nw, nb) in zip(analytic, numeric):
        for a, n in ((aw, nw), (ab, nb)):
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def norm_relative_grad_error(analytic, numeric):
    """Relative error per layer-gradient block.

    Central differences carry ~1e-9 absolute noise at h=1e-5 (f64), so
    entries near zero cannot be compared elementwise by ratio; the block
    norm is the scale at which the oracle actually resolves the gradient.
    """
    worst = 0.0
    for (aw, ab), (nw, nb) in zip(analytic, numeric):
        for a, n in ((aw, nw), (ab, nb)):
            denom = max(float(np.linalg.norm(n.reshape(-1))), 1e-12)
            err = float(np.linalg.norm((a - n).reshape(-1)))
            worst = max(worst, err / denom)
    return worst


def randomized_params(params, seed, scale=0.3):
    """Overwrite every layer (including the zero-initialized head) randomly."""
    rng = np.random.default_rng(seed)
    for i, (w, b) in enumerate(params.layers):
        params.layers[i] = (rng.normal(0.0, scale, w.shape),
                            rng.normal(0.0, scale, b.shape))
    return params
