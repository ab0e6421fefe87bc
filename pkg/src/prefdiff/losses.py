"""The preference-training loss family for the toy denoiser.

All losses share one contrastive core: the difference between the policy's
and a frozen reference's (optionally region-weighted) squared noise-prediction
errors on a preferred branch minus the same difference on a dispreferred
branch, scaled by beta * T * omega(lambda_t), passed through -log(sigmoid).
The full bracketed difference sits inside the sigmoid's argument.

The image-contrastive loss noises winner and loser images separately and
conditions both on the winner caption. The caption-contrastive loss evaluates
all four terms on one noised winner image, conditioned on the winner vs the
loser caption. The bimodal loss is the sum of two caption-contrastive terms
with the roles mirrored. Gradients flow only through the policy's passes;
frozen reference passes are evaluated outside the tape.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import diffusion as df
from . import net
from . import toyworld as tw

REGION_EXEMPT_DIMENSIONS = ("spatial", "numeracy")
DEFAULT_BETA = 0.1


@dataclass(frozen=True)
class LossBatchItem:
    """One sampled term of the image-contrastive expectation."""

    pair: object                 # datapipe.PreferencePair
    t: int
    eps_w: np.ndarray
    eps_l: np.ndarray
    beta: float = DEFAULT_BETA


@dataclass
class TapedLoss:
    """Scalar loss value plus the tape needed to differentiate it."""

    value: float
    root: ad.Tensor
    theta: net.ParamTensors
    margin: float               # mean sigmoid argument over the batch

    def backward(self):
        return net.backward(self.theta.params, self)


def masked_sq_err(eps, eps_hat, mask=None):
    """Weighted sum of squared errors; an all-ones mask reproduces the plain
    squared norm bitwise."""
    eps = np.asarray(eps)
    eps_hat = np.asarray(eps_hat)
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {eps.shape} vs {eps_hat.shape}")
    sq = np.square(eps - eps_hat)
    if mask is not None:
        sq = sq * _mask_weights(mask, eps.shape)
    return float(sq.sum())


def _mask_weights(mask, image_shape):
    w = np.asarray(mask.weights)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("mask weights must be finite and nonnegative")
    if w.shape == image_shape:
        return w
    if w.shape == image_shape[:-1]:
        return w[..., None]
    raise ValueError(f"mask shape {w.shape} incompatible with image {image_shape}")


def _mask_rows(masks, image_shape):
    """Stack masks to flat per-row weights, or None when every mask is trivial."""
    if masks is None or all(m is None for m in masks):
        return None
    flat = []
    for m in masks:
        if m is None:
            flat.append(np.ones(image_shape).reshape(-1))
        else:
            flat.append(np.broadcast_to(_mask_weights(m, image_shape), image_shape).reshape(-1))
    return np.stack(flat)


def _wrap_policy_and_ref(theta, ref):
    """Wrap the policy on the tape; reuse its leaves when the reference is the
    same trainable object so the contrast cancels exactly."""
    theta_pt = net.ParamTensors.wrap(theta)
    if ref is theta:
        return theta_pt, theta_pt
    if ref.trainable:
        return theta_pt, net.ParamTensors.wrap(ref)
    return theta_pt, None


def _errors(pt_or_params, rows, t_rows, sched, targets, mask_rows, use_tape):
    """Per-row weighted squared noise-prediction errors, shape (M,)."""
    if use_tape:
        pred = net.predict_noise_tape(pt_or_params, rows, t_rows, sched)
        diff = ad.sub(pred, ad.constant(targets))
        sq = ad.mul(diff, diff)
        if mask_rows is not None:
            sq = ad.mul(sq, ad.constant(mask_rows))
        return ad.tsum(sq, axis=1)
    pred = net.predict_noise_rows(pt_or_params, rows, t_rows, sched)
    sq = np.square(pred - targets)
    if mask_rows is not None:
        sq = sq * mask_rows
    return ad.constant(sq.sum(axis=1))


def _check_finite(loss, context):
    if not np.all(np.isfinite(loss.data)):
        raise df.NumericDivergenceError(f"non-finite loss in {context}")


def _contrast_batch(theta, ref, rows_w, rows_l, t_arr, sched, tgt_w, tgt_l, coef,
                    mask_w_rows=None, mask_l_rows=None, context="dpo"):
    """Shared contrastive core over a batch of N items.

    Returns (per_item_loss Tensor (N,), theta ParamTensors, sigma_args (N,)).
    """
    theta_pt, ref_pt = _wrap_policy_and_ref(theta, ref)
    n = rows_w.shape[0]
    rows = np.concatenate([rows_w, rows_l], axis=0)
    t_rows = np.concatenate([t_arr, t_arr])
    targets = np.concatenate([tgt_w, tgt_l], axis=0)
    masks = None
    if mask_w_rows is not None or mask_l_rows is not None:
        ones = np.ones_like(tgt_w)
        masks = np.concatenate([mask_w_rows if mask_w_rows is not None else ones,
                                mask_l_rows if mask_l_rows is not None else ones], axis=0)
    e_theta = _errors(theta_pt, rows, t_rows, sched, targets, masks, use_tape=True)
    if ref_pt is not None:
        e_ref = _errors(ref_pt, rows, t_rows, sched, targets, masks, use_tape=True)
    else:
        e_ref = _errors(ref, rows, t_rows, sched, targets, masks, use_tape=False)

    d_w = ad.sub(ad.slice_rows(e_theta, 0, n), ad.slice_rows(e_ref, 0, n))
    d_l = ad.sub(ad.slice_rows(e_theta, n, 2 * n), ad.slice_rows(e_ref, n, 2 * n))
    bracket = ad.sub(d_w, d_l)
    arg = ad.mul(bracket, np.asarray(coef))       # sigma argument is -arg
    per_item = ad.softplus(arg)
    _check_finite(per_item, context)
    return per_item, theta_pt, -arg.data


def scalarize(per_item, theta_pt, sigma_args):
    root = ad.tmean(per_item)
    return TapedLoss(value=float(root.data), root=root, theta=theta_pt,
                     margin=float(np.mean(sigma_args)))


def _coef(beta, sched, t_arr):
    return beta * sched.T * df.omega_vector(sched, t_arr)


# ---------------------------------------------------------------------------
# image-contrastive loss (winner image vs loser image, winner caption)

def diffusion_dpo_batch(theta, ref, x0_w, x0_l, enc_w, t_arr, eps_w, eps_l, beta, sched):
    n = x0_w.shape[0]
    ab = sched.alpha_bar[t_arr].reshape(n, 1, 1, 1)
    xt_w = np.sqrt(ab) * x0_w + np.sqrt(1.0 - ab) * eps_w
    xt_l = np.sqrt(ab) * x0_l + np.sqrt(1.0 - ab) * eps_l
    rows_w = net.assemble_input(theta, xt_w, t_arr, enc_w, sched)
    rows_l = net.assemble_input(theta, xt_l, t_arr, enc_w, sched)
    per_item, pt, args = _contrast_batch(
        theta, ref, rows_w, rows_l, t_arr, sched,
        eps_w.reshape(n, -1), eps_l.reshape(n, -1),
        _coef(beta, sched, t_arr), context="diffusion_dpo_loss")
    return per_item, pt, args


def diffusion_dpo_loss(theta, ref, item, sched):
    """Contrast denoising errors of the winner and loser images.

    Both branches condition on the winner caption; see LossBatchItem for the
    sampled (t, noise) pair. Returns a TapedLoss.
    """
    pair = item.pair
    if not 0 <= item.t < sched.T:
        raise ValueError(f"step index {item.t} out of range [0, {sched.T})")
    if np.asarray(item.eps_w).shape != np.asarray(pair.x0_w).shape:
        raise ValueError("noise shape must match image shape")
    enc_w = net.encode_caption(pair.y_w).vector[None]
    per_item, pt, args = diffusion_dpo_batch(
        theta, ref, np.asarray(pair.x0_w)[None], np.asarray(pair.x0_l)[None],
        enc_w, np.array([item.t]), np.asarray(item.eps_w)[None],
        np.asarray(item.eps_l)[None], item.beta, sched)
    return scalarize(per_item, pt, args)


# ---------------------------------------------------------------------------
# caption-contrastive loss (one image, winner caption vs loser caption)

def text_dpo_batch(theta, ref, x0_w, enc_w, enc_l, t_arr, eps, beta, sched,
                   masks=None, eps_l=None):
    n = x0_w.shape[0]
    ab = sched.alpha_bar[t_arr].reshape(n, 1, 1, 1)
    xt_w = np.sqrt(ab) * x0_w + np.sqrt(1.0 - ab) * eps
    rows_w = net.assemble_input(theta, xt_w, t_arr, enc_w, sched)
    if eps_l is None:
        rows_l = net.assemble_input(theta, xt_w, t_arr, enc_l, sched)
        tgt_l = eps.reshape(n, -1)
    else:
        xt_l = np.sqrt(ab) * x0_w + np.sqrt(1.0 - ab) * eps_l
        rows_l = net.assemble_input(theta, xt_l, t_arr, enc_l, sched)
        tgt_l = eps_l.reshape(n, -1)
    mask_rows = _mask_rows(masks, x0_w.shape[1:])
    per_item, pt, args = _contrast_batch(
        theta, ref, rows_w, rows_l, t_arr, sched, eps.reshape(n, -1), tgt_l,
        _coef(beta, sched, t_arr), mask_w_rows=mask_rows, mask_l_rows=mask_rows,
        context="text_dpo_loss")
    return per_item, pt, args


def text_dpo_loss(theta, ref, x0_w, y_w, y_l, t, eps, beta, sched,
                  mask=None, eps_l=None):
    """Contrast the winner caption against the loser caption on one image.

    A single shared noise draw feeds all four terms unless an independent
    loser-branch draw ``eps_l`` is supplied. ``mask`` defaults to all-ones.
    Returns a TapedLoss.
    """
    if not 0 <= t < sched.T:
        raise ValueError(f"step index {t} out of range [0, {sched.T})")
    x0_w = np.asarray(x0_w)
    if np.asarray(eps).shape != x0_w.shape:
        raise ValueError("noise shape must match image shape")
    enc_w = net.encode_caption(y_w).vector[None]
    enc_l = net.encode_caption(y_l).vector[None]
    per_item, pt, args = text_dpo_batch(
        theta, ref, x0_w[None], enc_w, enc_l, np.array([t]),
        np.asarray(eps)[None], beta, sched,
        masks=None if mask is None else [mask],
        eps_l=None if eps_l is None else np.asarray(eps_l)[None])
    return scalarize(per_item, pt, args)


# ---------------------------------------------------------------------------
# bimodal loss (two mirrored caption-contrastive terms)

def pair_masks(pair, use_region):
    """The masks the bimodal loss actually applies to a pair.

    Region weighting is skipped when disabled or when the pair's dimension
    needs a global focus (spatial and numeracy).
    """
    if not use_region or pair.dimension in REGION_EXEMPT_DIMENSIONS:
        return None, None
    return pair.mask_w, pair.mask_l


def bidpo_batch(theta, ref, x0_w, x0_l, enc_w, enc_l, t_arr, eps_w, eps_l,
                beta, sched, masks_w=None, masks_l=None):
    """Sum of the two mirrored caption-contrastive terms, batched."""
    theta_pt, ref_pt = _wrap_policy_and_ref(theta, ref)
    n = x0_w.shape[0]
    ab = sched.alpha_bar[t_arr].reshape(n, 1, 1, 1)
    xt_w = np.sqrt(ab) * x0_w + np.sqrt(1.0 - ab) * eps_w
    xt_l = np.sqrt(ab) * x0_l + np.sqrt(1.0 - ab) * eps_l
    # rows: [w-image|w-cap, w-image|l-cap, l-image|l-cap, l-image|w-cap]
    rows = np.concatenate([
        net.assemble_input(theta, xt_w, t_arr, enc_w, sched),
        net.assemble_input(theta, xt_w, t_arr, enc_l, sched),
        net.assemble_input(theta, xt_l, t_arr, enc_l, sched),
        net.assemble_input(theta, xt_l, t_arr, enc_w, sched),
    ], axis=0)
    tgt_w = eps_w.reshape(n, -1)
    tgt_l = eps_l.reshape(n, -1)
    targets = np.concatenate([tgt_w, tgt_w, tgt_l, tgt_l], axis=0)
    shape = x0_w.shape[1:]
    mw = _mask_rows(masks_w, shape)
    ml = _mask_rows(masks_l, shape)
    masks = None
    if mw is not None or ml is not None:
        ones = np.ones_like(tgt_w)
        mw = mw if mw is not None else ones
        ml = ml if ml is not None else ones
        masks = np.concatenate([mw, mw, ml, ml], axis=0)

    t_rows = np.concatenate([t_arr] * 4)
    e_theta = _errors(theta_pt, rows, t_rows, sched, targets, masks, use_tape=True)
    if ref_pt is not None:
        e_ref = _errors(ref_pt, rows, t_rows, sched, targets, masks, use_tape=True)
    else:
        e_ref = _errors(ref, rows, t_rows, sched, targets, masks, use_tape=False)

    coef = _coef(beta, sched, t_arr)
    per_term = []
    args = []
    for k in (0, 2):   # term 1: rows 0 vs 1; term 2: rows 2 vs 3
        d_w = ad.sub(ad.slice_rows(e_theta, k * n, (k + 1) * n),
                     ad.slice_rows(e_ref, k * n, (k + 1) * n))
        d_l = ad.sub(ad.slice_rows(e_theta, (k + 1) * n, (k + 2) * n),
                     ad.slice_rows(e_ref, (k + 1) * n, (k + 2) * n))
        arg = ad.mul(ad.sub(d_w, d_l), coef)
        per_term.append(ad.softplus(arg))
        args.append(-arg.data)
    per_item = ad.add(per_term[0], per_term[1])
    _check_finite(per_item, "bidpo_loss")
    return per_item, theta_pt, np.mean(args, axis=0)


def bidpo_loss(theta, ref, pair, t, eps_w, eps_l, beta, sched, use_region=False):
    """Bimodal preference loss: exact sum of the two mirrored caption terms."""
    if not 0 <= t < sched.T:
        raise ValueError(f"step index {t} out of range [0, {sched.T})")
    mask_w, mask_l = pair_masks(pair, use_region)
    enc_w = net.encode_caption(pair.y_w).vector[None]
    enc_l = net.encode_caption(pair.y_l).vector[None]
    per_item, pt, args = bidpo_batch(
        theta, ref, np.asarray(pair.x0_w)[None], np.asarray(pair.x0_l)[None],
        enc_w, enc_l, np.array([t]), np.asarray(eps_w)[None],
        np.asarray(eps_l)[None], beta, sched,
        masks_w=None if mask_w is None else [mask_w],
        masks_l=None if mask_l is None else [mask_l])
    return scalarize(per_item, pt, args)


# ---------------------------------------------------------------------------
# supervised baseline

def sft_batch(theta, x0, enc, t_arr, eps, sched):
    n = x0.shape[0]
    ab = sched.alpha_bar[t_arr].reshape(n, 1, 1, 1)
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    rows = net.assemble_input(theta, xt, t_arr, enc, sched)
    theta_pt = net.ParamTensors.wrap(theta)
    per_item = ad.mul(_errors(theta_pt, rows, t_arr, sched, eps.reshape(n, -1),
                              None, use_tape=True),
                      1.0 / eps[0].size)
    _check_finite(per_item, "sft_loss")
    return per_item, theta_pt


def sft_loss(theta, x0, y, t, eps, sched):
    """Per-cell mean squared noise-prediction error on a single example."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    enc = net.encode_caption(y).vector[None]
    per_item, pt = sft_batch(theta, x0[None], enc, np.array([t]), eps[None], sched)
    root = ad.tmean(per_item)
    return TapedLoss(value=float(root.data), root=root, theta=pt, margin=0.0)
