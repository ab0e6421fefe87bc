"""Command line entry points: gen-data, train, eval, ablate."""

import argparse
import json
import os
import sys

import numpy as np

from . import datapipe, evalbench, net, toyworld as tw, trainer


def _add_gen_data(sub):
    p = sub.add_parser("gen-data", help="build a preference dataset")
    p.add_argument("--dims", default=",".join(tw.DIMENSIONS),
                   help="comma-separated dimensions")
    p.add_argument("--count-per-dim", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jitter", type=float, default=datapipe.DEFAULT_JITTER)
    p.add_argument("--corruption-rate", type=float, default=0.0,
                   help="inject label corruption before filtering (testing aid)")
    p.add_argument("--grid", type=int, default=tw.DEFAULT_GRID)
    p.add_argument("--layout-pool", type=int, default=None)
    p.add_argument("--out", required=True)


def _cmd_gen_data(args):
    dims = [d.strip() for d in args.dims.split(",") if d.strip()]
    counts = {d: args.count_per_dim for d in dims}
    pairs, manifest = datapipe.generate_dataset(
        counts, seed=args.seed, jitter=args.jitter, grid=args.grid,
        layout_pool=args.layout_pool)
    if args.corruption_rate > 0:
        kept, discarded, stats = datapipe.filter_pairs(
            pairs, corruption_rate=args.corruption_rate, rng_seed=args.seed)
        print(f"filter: kept {len(kept)}, discarded {len(discarded)} "
              f"(injected {stats['injected']})")
        pairs = kept
        manifest.realized = {d: sum(1 for p in pairs if p.dimension == d)
                             for d in manifest.realized}
    datapipe.write_dataset(pairs, manifest, args.out)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    for dim, s in manifest.filter_stats.items():
        print(f"  {dim}: built {s['built']}, discarded "
              f"{s['discarded_vqa']} (vqa) + {s['discarded_layout']} (layout)")
    return 0


def _add_train(sub):
    p = sub.add_parser("train", help="train one method on a dataset")
    p.add_argument("--config", required=True, help="run-config JSON file")
    p.add_argument("--data", required=True, help="dataset file from gen-data")
    p.add_argument("--method", choices=trainer.METHODS, default=None,
                   help="override the config's method")
    p.add_argument("--out", required=True, help="output directory")


def _cmd_train(args):
    overrides = {"method": args.method} if args.method else {}
    config = trainer.load_config(args.config, **overrides)
    pairs, _ = datapipe.read_dataset(args.data)
    params, log = trainer.train(config, pairs)
    os.makedirs(args.out, exist_ok=True)
    net.save_checkpoint(params, os.path.join(args.out, "checkpoint.json"))
    trainer.write_metrics(log, os.path.join(args.out, "metrics.jsonl"))
    trainer.save_config(config, os.path.join(args.out, "config.json"))
    final = log.records[-1] if log.records else None
    if final:
        print(f"finished {config.method}: loss {final.loss:.4f}, "
              f"margin {final.margin:.4f}")
    print(f"checkpoint written to {args.out}/checkpoint.json")
    return 0


def _add_eval(sub):
    p = sub.add_parser("eval", help="score a checkpoint on held-out prompts")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompts", default=None,
                   help="JSONL caption file; omit with --gen to sample prompts")
    p.add_argument("--gen", action="store_true", help="sample prompts from the grammar")
    p.add_argument("--prompts-per-dim", type=int, default=20)
    p.add_argument("--samples-per-prompt", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="run-config for the schedule")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("json", "csv"), default="json")


def _cmd_eval(args):
    params = net.load_checkpoint(args.ckpt)
    config = trainer.load_config(args.config) if args.config else trainer.TrainConfig(
        grid=params.cfg.grid, channels=params.cfg.channels,
        hidden=params.cfg.hidden, time_dim=params.cfg.time_dim)
    sched = config.schedule()
    if args.gen:
        prompts = evalbench.sample_prompts(tw.DIMENSIONS, args.prompts_per_dim, args.seed)
    elif args.prompts:
        with open(args.prompts) as fh:
            prompts = [datapipe.caption_from_dict(json.loads(line))
                       for line in fh if line.strip()]
    else:
        print("need --prompts FILE or --gen", file=sys.stderr)
        return 2
    card = evalbench.evaluate(params, prompts, args.samples_per_prompt, sched,
                              seed=args.seed)
    record = {"per_dimension": card.per_dimension, "validity": card.validity,
              "sample_count": card.sample_count, "seed": card.seed}
    with open(args.out, "w") as fh:
        if args.format == "json":
            json.dump(record, fh, indent=2)
        else:
            dims = sorted(card.per_dimension)
            fh.write(",".join(["validity", *dims]) + "\n")
            fh.write(",".join([repr(card.validity)] +
                              [repr(card.per_dimension[d]) for d in dims]) + "\n")
    print(f"validity {card.validity:.3f}; " +
          "; ".join(f"{d} {a:.3f}" for d, a in card.per_dimension.items()))
    return 0


def _add_ablate(sub):
    p = sub.add_parser("ablate", help="run the full method ablation")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--prompts-per-dim", type=int, default=20)
    p.add_argument("--out", required=True)


def _cmd_ablate(args):
    config = trainer.load_config(args.config)
    pairs, _ = datapipe.read_dataset(args.data)
    prompts = evalbench.sample_prompts(
        tw.DIMENSIONS, args.prompts_per_dim,
        seed=np.random.SeedSequence(config.seed).generate_state(1)[0].item(),
        exclude=datapipe.dataset_captions(pairs))
    report = evalbench.run_ablation(config, pairs, prompts, out_dir=args.out)
    failed = [r.method for r in report.rows if r.status != "ok"]
    for r in report.rows:
        if r.scorecard:
            print(f"{r.method:14s} validity {r.scorecard.validity:.3f} "
                  + " ".join(f"{d}={a:.3f}" for d, a in r.scorecard.per_dimension.items()))
        else:
            print(f"{r.method:14s} FAILED: {r.error}")
    return 1 if failed else 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="prefdiff")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen_data(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_ablate(sub)
    args = parser.parse_args(argv)
    handler = {"gen-data": _cmd_gen_data, "train": _cmd_train,
               "eval": _cmd_eval, "ablate": _cmd_ablate}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
