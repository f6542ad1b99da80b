"""Command-line entry point.

Verbs cover the experiment lifecycle: gen-data, train, finetune, eval,
sample-patches, diversity, sweep.  Every command resolves its config from
defaults, an optional JSON file, and flags (flags win), then writes outputs
under <out>/run-<config-hash>/ together with a run manifest, so re-running
an identical config reproduces every artifact byte for byte.
"""

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import checkpoint, config as cfgmod, data, experiment, pixelcnn

SWEEP_AXES = {"preset-pixels": "preset_pixels",
              "pure-ratio": "pure_mix_ratio",
              "patch-k": "patch_k"}
DEFAULT_SWEEP = {"preset-pixels": "0,3,5,8",
                 "pure-ratio": "1,4,10",
                 "patch-k": "3,5,7"}


def _add_common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--out", default="runs", help="output root directory")
    p.add_argument("--checkpoint", help="checkpoint path")
    p.add_argument("--mode", choices=("pixel", "patch"),
                   help="classifier mode override")
    p.add_argument("--force", action="store_true",
                   help="load checkpoints despite a config-hash mismatch")
    p.add_argument("--quiet", action="store_true", help="suppress progress")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ctxseg",
        description="context-aware feature synthesis for zero-shot "
                    "segmentation: data, training, evaluation")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, doc in (
            ("gen-data", "write the synthetic corpus and its manifest"),
            ("train", "pretrain, train the patch model, then alternate"),
            ("finetune", "continue alternation from a checkpoint"),
            ("eval", "metric report for a checkpoint"),
            ("sample-patches", "dump generated patches ranked by likelihood"),
            ("diversity", "generated vs real feature diversity per category"),
            ("sweep", "hIoU across one hyper-parameter axis")):
        p = sub.add_parser(verb, help=doc)
        _add_common(p)
        if verb == "sample-patches":
            p.add_argument("--count", type=int, default=64,
                           help="patches to draw")
        if verb == "sweep":
            p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
            p.add_argument("--values",
                           help="comma-separated values (default per axis)")
    return parser


def resolve_config(args):
    file_values = cfgmod.load_file(args.config) if args.config else None
    overrides = {"seed": args.seed, "mode": args.mode}
    return cfgmod.resolve(file_values, overrides)


def run_dir(args, cfg):
    path = os.path.join(args.out, f"run-{cfgmod.config_hash(cfg)}")
    os.makedirs(path, exist_ok=True)
    return path


def write_manifest(cfg, out):
    """Run manifest: config snapshot, seed, and a content hash over the
    resolved config plus any external inputs."""
    cfgmod.save_file(cfg, os.path.join(out, "config.json"))
    hasher = hashlib.sha256()
    hasher.update(json.dumps(cfgmod.to_dict(cfg), sort_keys=True).encode())
    if cfg.embed_mode == "file":
        with open(cfg.embed_path, "rb") as fh:
            hasher.update(fh.read())
    manifest = {"config_hash": cfgmod.config_hash(cfg), "seed": cfg.seed,
                "inputs_hash": hasher.hexdigest()}
    with open(os.path.join(out, "run.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_lines(path, lines):
    with open(path, "w") as fh:
        for line in lines:
            fh.write(line + "\n")


def _log(args):
    if args.quiet:
        return None
    return lambda msg: print(msg, flush=True)


def _require_checkpoint(args):
    if not args.checkpoint:
        raise ValueError("this command requires --checkpoint")
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    return args.checkpoint


def _load_run(args, cfg):
    path = _require_checkpoint(args)
    tensors, _ = checkpoint.load(path, expect_hash=cfgmod.config_hash(cfg),
                                 force=args.force)
    run = experiment.Run(cfg)
    run.load_state(tensors)
    return run


def _save_run(run, out, name="checkpoint.bin"):
    path = os.path.join(out, name)
    checkpoint.save(path, run.state_tensors(),
                    cfgmod.config_hash(run.cfg))
    return path


def cmd_gen_data(args, cfg):
    out = run_dir(args, cfg)
    write_manifest(cfg, out)
    corpus = experiment.build_corpus(cfg)
    data.write_manifest(corpus.entries, os.path.join(out, "manifest.csv"))
    for role, samples in (("train", corpus.train), ("test", corpus.test)):
        np.save(os.path.join(out, f"{role}_images.npy"),
                np.stack([s.image for s in samples]))
        np.save(os.path.join(out, f"{role}_labels.npy"),
                np.stack([s.labels for s in samples]))
    print(f"{len(corpus.train)} train / {len(corpus.test)} test samples "
          f"under {out}")
    return 0


def _write_report(report, out, stem="report"):
    _write_lines(os.path.join(out, f"{stem}.csv"), [report.as_csv()])
    _write_lines(os.path.join(out, f"{stem}.kv"), [report.as_kv()])


def cmd_train(args, cfg):
    out = run_dir(args, cfg)
    write_manifest(cfg, out)
    log = _log(args)
    run = experiment.Run(cfg)
    experiment.pretrain(run, log=log)
    experiment.train_pixelcnn(run, log=log)
    experiment.alternate(run, log=log)
    experiment.self_train(run, log=log)
    _write_lines(os.path.join(out, "loss.csv"),
                 experiment.loss_log_lines(run.loss_log))
    path = _save_run(run, out)
    print(f"checkpoint written to {path}")
    return 0


def cmd_finetune(args, cfg):
    out = run_dir(args, cfg)
    write_manifest(cfg, out)
    run = _load_run(args, cfg)
    if run.schedule.phase != "alternate":
        raise ValueError("checkpoint is not pretrained; run train first")
    experiment.alternate(run, log=_log(args))
    path = _save_run(run, out, name="checkpoint-finetuned.bin")
    print(f"checkpoint written to {path}")
    return 0


def cmd_eval(args, cfg):
    out = run_dir(args, cfg)
    write_manifest(cfg, out)
    run = _load_run(args, cfg)
    report = experiment.evaluate(run)
    _write_report(report, out)
    print(report.as_kv())
    return 0


def cmd_sample_patches(args, cfg):
    out = run_dir(args, cfg)
    write_manifest(cfg, out)
    run = _load_run(args, cfg)
    rng = np.random.default_rng(cfg.seed)
    patches = pixelcnn.sample_mixed(
        run.p_model, run.corpus.table, run.corpus.split, args.count,
        lam_f=cfg.preset_pixels, max_cats=cfg.max_patch_categories, rng=rng)
    dump = os.path.join(out, "patches.txt")
    pixelcnn.write_patches(dump, patches, cfg.patch_k, cfg.preset_pixels,
                           cfg.seed)
    ranked = pixelcnn.rank_patches(run.p_model, run.corpus.table, patches)
    lines = ["rank,log_likelihood,categories"]
    for i, (patch, ll) in enumerate(ranked):
        cats = "|".join(str(c) for c in sorted(np.unique(patch)))
        lines.append(f"{i},{ll:.6f},{cats}")
    _write_lines(os.path.join(out, "patch_ranking.csv"), lines)
    print(f"{len(patches)} patches -> {dump}")
    return 0


def cmd_diversity(args, cfg):
    out = run_dir(args, cfg)
    write_manifest(cfg, out)
    run = _load_run(args, cfg)
    div = experiment.measure_diversity(run)
    lines = ["category,generated,real"]
    for c in sorted(div["generated"]):
        lines.append(f"{c},{div['generated'][c]:.6f},{div['real'][c]:.6f}")
    _write_lines(os.path.join(out, "diversity.csv"), lines)
    for line in lines:
        print(line)
    return 0


def cmd_sweep(args, cfg):
    import dataclasses

    out = run_dir(args, cfg)
    write_manifest(cfg, out)
    field = SWEEP_AXES[args.axis]
    raw = args.values or DEFAULT_SWEEP[args.axis]
    cast = float if field == "pure_mix_ratio" else int
    values = [cast(v) for v in raw.split(",")]
    log = _log(args)
    lines = [f"{field},hiou"]
    for value in values:
        point = dataclasses.replace(cfg, **{field: value}).validate()
        if log:
            log(f"sweep {field}={value}")
        result = experiment.run_experiment(point, log=log)
        lines.append(f"{value},{result['final_report'].hiou:.6f}")
    _write_lines(os.path.join(out, "sweep.csv"), lines)
    for line in lines:
        print(line)
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train,
            "finetune": cmd_finetune, "eval": cmd_eval,
            "sample-patches": cmd_sample_patches,
            "diversity": cmd_diversity, "sweep": cmd_sweep}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.verb](args, cfg)
    except (ValueError, FileNotFoundError, RuntimeError,
            json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
