"""Oracle-scored compositional evaluation and the ablation harness.

Generated samples are scored by the same oracle pipeline that filters the
training data: detect the objects, answer one question per caption slot, and
pass only when everything matches. Accuracy is the pass fraction per
dimension; validity is the fraction of samples where detection recovers the
right number of objects at all.
"""

import csv
import json
import os
from dataclasses import dataclass, replace

import numpy as np

from . import diffusion as df
from . import net
from . import toyworld as tw
from . import trainer
from .datapipe import _child_seed, dataset_captions, sample_caption

METHODS = ("baseline", "sft", "image_dpo", "text_dpo", "bidpo", "bidpo_region")
REPORT_FORMATS = ("csv", "json", "markdown")


@dataclass(frozen=True)
class Scorecard:
    per_dimension: dict
    validity: float
    sample_count: int
    seed: int

    def attribute_mean(self):
        dims = [d for d in ("color", "shape", "texture") if d in self.per_dimension]
        return float(np.mean([self.per_dimension[d] for d in dims]))


@dataclass(frozen=True)
class AblationRow:
    method: str
    status: str                 # "ok" | "failed"
    scorecard: Scorecard = None
    error: str = None


@dataclass(frozen=True)
class AblationReport:
    rows: tuple
    seed: int

    def row(self, method):
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)


def sample_prompts(dims, n_per_dim, seed, exclude=frozenset()):
    """Distinct held-out prompts per dimension, rejecting excluded captions.

    ``n_per_dim`` may be a single count or a per-dimension mapping. Small
    grammars (notably the 9-caption bare-shape one) may not support the full
    request; the returned list simply carries fewer prompts there.
    """
    prompts = []
    exclude = set(exclude)
    for dim in dims:
        want = n_per_dim[dim] if isinstance(n_per_dim, dict) else n_per_dim
        seen = set()
        misses = 0
        while len(seen) < want and misses < 200:
            cap = sample_caption(dim, _child_seed(seed, dim, len(seen), misses))
            if cap in exclude or cap in seen:
                misses += 1
                continue
            seen.add(cap)
            prompts.append(cap)
    return prompts


def expected_object_count(caption):
    return caption.count if caption.count is not None else len(caption.objects)


def evaluate(params, prompts, samples_per_prompt, sched, seed,
             exclude=None, sampler=None):
    """Score a model on held-out prompts.

    For each prompt, ``samples_per_prompt`` images are generated (ancestral
    sampling by default; ``sampler`` may inject any (params, captions,
    encodings, sched, seeds) -> images callable) and oracle-checked against
    the prompt. Returns a Scorecard; deterministic given (params, prompts,
    seed).
    """
    if exclude is not None:
        overlap = set(prompts) & set(exclude)
        if overlap:
            raise ValueError(f"{len(overlap)} prompts appear in the training captions")
    if sampler is None:
        def sampler(params, captions, encodings, sched, seeds):
            return df.ddpm_sample_batch(params, encodings, sched, seeds)

    expanded = []
    seeds = []
    for i, cap in enumerate(prompts):
        for j in range(samples_per_prompt):
            expanded.append(cap)
            seeds.append(_child_seed(seed, i, j))
    encodings = np.stack([net.encode_caption(c).vector for c in expanded])
    images = sampler(params, expanded, encodings, sched, seeds)

    passes = {}
    valid = 0
    for cap, img in zip(expanded, images):
        result = tw.vqa_check(img, cap)
        passes.setdefault(cap.dimension, []).append(result.passed)
        try:
            detected = tw.detect(img)
            valid += int(len(detected.objects) == expected_object_count(cap))
        except tw.AmbiguousDetectionError:
            pass
    per_dimension = {dim: float(np.mean(vals)) for dim, vals in sorted(passes.items())}
    return Scorecard(per_dimension=per_dimension,
                     validity=valid / len(expanded) if expanded else 0.0,
                     sample_count=len(expanded), seed=seed)


def run_ablation(base_config, dataset, prompts, out_dir=None):
    """Train every method from one shared base model and score each.

    The base model is the initial parameter set supervised-pretrained on the
    dataset's preferred halves (the untrained-on-preferences baseline row);
    every method then trains from that base with a frozen clone of it as
    reference. Rows are independent; a failed row is recorded, not dropped.
    """
    trainer.validate_config(base_config)
    train_captions = dataset_captions(dataset)
    overlap = set(prompts) & train_captions
    if overlap:
        raise ValueError(f"{len(overlap)} evaluation prompts collide with training captions")

    sched = base_config.schedule()
    pretrain_cfg = replace(base_config, method="sft", steps=base_config.pretrain_steps)
    base_params, _ = trainer.train(pretrain_cfg, dataset)
    eval_seed = _child_seed(base_config.seed, "ablation-eval")

    rows = []
    for method in METHODS:
        try:
            if method == "baseline":
                params = base_params
            else:
                cfg = replace(base_config, method=method)
                params, _ = trainer.train(cfg, dataset, init_params=base_params)
            card = evaluate(params, prompts, base_config.eval_samples_per_prompt,
                            sched, seed=eval_seed, exclude=train_captions)
            rows.append(AblationRow(method=method, status="ok", scorecard=card))
        except Exception as exc:   # a row failure must not sink the report
            rows.append(AblationRow(method=method, status="failed", error=str(exc)))
    report = AblationReport(rows=tuple(rows), seed=base_config.seed)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for fmt, name in (("json", "report.json"), ("csv", "report.csv"),
                          ("markdown", "report.md")):
            emit_report(report, fmt, os.path.join(out_dir, name))
    return report


# ---------------------------------------------------------------------------
# report serialization

_CSV_DIMS = ("color", "shape", "texture", "spatial", "numeracy")


def _report_dict(report):
    return {"seed": report.seed,
            "rows": [{"method": r.method, "status": r.status, "error": r.error,
                      "scorecard": None if r.scorecard is None else {
                          "per_dimension": r.scorecard.per_dimension,
                          "validity": r.scorecard.validity,
                          "sample_count": r.scorecard.sample_count,
                          "seed": r.scorecard.seed}}
                     for r in report.rows]}


def _report_from_dict(d):
    rows = []
    for r in d["rows"]:
        card = None
        if r["scorecard"] is not None:
            card = Scorecard(per_dimension=dict(r["scorecard"]["per_dimension"]),
                             validity=r["scorecard"]["validity"],
                             sample_count=r["scorecard"]["sample_count"],
                             seed=r["scorecard"]["seed"])
        rows.append(AblationRow(method=r["method"], status=r["status"],
                                scorecard=card, error=r["error"]))
    return AblationReport(rows=tuple(rows), seed=d["seed"])


def emit_report(report, fmt, path):
    """Lossless tabular serialization of an ablation report."""
    if fmt not in REPORT_FORMATS:
        raise ValueError(f"format must be one of {REPORT_FORMATS}")
    if fmt == "json":
        with open(path, "w") as fh:
            json.dump(_report_dict(report), fh, indent=2)
        return path
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "status", *_CSV_DIMS,
                             "validity", "sample_count", "card_seed", "report_seed", "error"])
            for r in report.rows:
                card = r.scorecard
                dims = [repr(card.per_dimension[d]) if card and d in card.per_dimension else ""
                        for d in _CSV_DIMS]
                writer.writerow([r.method, r.status, *dims,
                                 repr(card.validity) if card else "",
                                 card.sample_count if card else "",
                                 card.seed if card else "",
                                 report.seed, r.error or ""])
        return path
    with open(path, "w") as fh:
        fh.write("| method | " + " | ".join(_CSV_DIMS) + " | validity |\n")
        fh.write("|" + " --- |" * (len(_CSV_DIMS) + 2) + "\n")
        for r in report.rows:
            card = r.scorecard
            if card is None:
                cells = ["failed"] * (len(_CSV_DIMS) + 1)
            else:
                cells = [f"{card.per_dimension.get(d, float('nan')):.3f}" for d in _CSV_DIMS]
                cells.append(f"{card.validity:.3f}")
            fh.write(f"| {r.method} | " + " | ".join(cells) + " |\n")
    return path


def load_report(path, fmt):
    """Inverse of emit_report for the lossless formats (json, csv)."""
    if fmt == "json":
        with open(path) as fh:
            return _report_from_dict(json.load(fh))
    if fmt != "csv":
        raise ValueError("only json and csv reports can be reloaded")
    rows = []
    seed = 0
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            seed = int(rec["report_seed"])
            card = None
            if rec["status"] == "ok":
                per_dim = {d: float(rec[d]) for d in _CSV_DIMS if rec[d] != ""}
                card = Scorecard(per_dimension=per_dim, validity=float(rec["validity"]),
                                 sample_count=int(rec["sample_count"]),
                                 seed=int(rec["card_seed"]))
            rows.append(AblationRow(method=rec["method"], status=rec["status"],
                                    scorecard=card, error=rec["error"] or None))
    return AblationReport(rows=tuple(rows), seed=seed)


def report_schema():
    """The JSON schema shipped with the package."""
    schema_path = os.path.join(os.path.dirname(__file__), "schema",
                               "ablation_report.schema.json")
    with open(schema_path) as fh:
        return json.load(fh)
