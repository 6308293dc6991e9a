"""Command-line harness: data generation, training, evaluation, inference,
ablations, the entropy probe, and the verification suite.

Heavy imports happen inside handlers so ``--threads`` can pin the BLAS
thread count before numpy loads. Every output carries a provenance header
(config hash, seed, package version); outputs are deterministic given the
same config and seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _provenance(cfg) -> dict:
    from . import __version__

    return {"version": __version__, "config_sha256": cfg.hash(), "seed": str(cfg.seed)}


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_cfg(args) -> "RunConfig":
    from .config import load_config

    return load_config(args.config, args.set or [])


def _out_root(args) -> str:
    root = args.out or os.environ.get("SORTSCAN_OUT", ".")
    os.makedirs(root, exist_ok=True)
    return root


def cmd_gen_data(args) -> int:
    from . import synth

    cfg = _load_cfg(args)
    out = os.path.join(_out_root(args), "dataset")
    samples = synth.generate(cfg.synth_config())
    synth.save_dataset(out, samples, cfg.synth_config(),
                       meta={"config_sha256": cfg.hash(), "version": _provenance(cfg)["version"]})
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def _load_split(cfg, dataset_path: str, which: str):
    from . import synth

    samples, _ = synth.load_dataset(dataset_path)
    if which == "all":
        return samples
    train_set, test_set = synth.split(samples, cfg.train_frac, seed=cfg.data_seed)
    return train_set if which == "train" else test_set


def cmd_train(args) -> int:
    from . import train as training

    cfg = _load_cfg(args)
    samples = _load_split(cfg, args.dataset, args.split)
    out = os.path.join(_out_root(args), "run")
    try:
        _, records = training.train(cfg.model_config(), samples, out, resume=args.resume)
    except training.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"trained {cfg.iterations} iterations; final loss "
          f"{records[-1]['loss']:.4f}; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    from . import train as training

    cfg = _load_cfg(args)
    samples = _load_split(cfg, args.dataset, args.split)
    model = training.load_model(args.checkpoint, cfg.model_config())
    aggregate, per_image = training.evaluate(model, samples)
    out = os.path.join(_out_root(args), "metrics.json")
    training.write_report(out, cfg.model_config(), aggregate, per_image)
    print(f"dice={aggregate.dice:.4f} aji={aggregate.aji:.4f} pq={aggregate.pq:.4f} "
          f"f_detection={aggregate.f_detection:.4f} -> {out}")
    return 0


def cmd_infer(args) -> int:
    from . import train as training
    from .instances import save_instance_mask

    cfg = _load_cfg(args)
    samples = _load_split(cfg, args.dataset, args.split)
    model = training.load_model(args.checkpoint, cfg.model_config())
    out = os.path.join(_out_root(args), "predictions")
    os.makedirs(out, exist_ok=True)
    for i, sample in enumerate(samples):
        mask = training.predict_instances(model, sample)
        save_instance_mask(os.path.join(out, f"{i:04d}.png"), mask)
    print(f"wrote {len(samples)} instance masks to {out}")
    return 0


def cmd_ablate_scan(args) -> int:
    from . import ablate

    cfg = _load_cfg(args)
    root = _out_root(args)
    payload: dict = {"_provenance": _provenance(cfg)}
    tables = []
    if args.grid in ("orderings", "both"):
        result = ablate.run_ordering_grid(cfg, os.path.join(root, "ablation_runs"))
        payload["orderings"] = result
        tables.append(ablate.format_ordering_table(result))
    if args.grid in ("modules", "both"):
        result = ablate.run_toggle_grid(cfg, os.path.join(root, "ablation_runs"))
        payload["modules"] = result
        tables.append(ablate.format_toggle_table(result))
    _write_json(os.path.join(root, "ablation.json"), payload)
    table_text = "\n\n".join(tables)
    with open(os.path.join(root, "ablation_table.txt"), "w") as fh:
        fh.write(f"# config_sha256={cfg.hash()} seed={cfg.seed}\n" + table_text + "\n")
    print(table_text)
    return 0


def cmd_entropy_probe(args) -> int:
    import numpy as np

    from .sorting import entropy_probe, mixture_sequences

    cfg = _load_cfg(args)
    rng = np.random.default_rng(cfg.seed)
    seqs = mixture_sequences(cfg.probe_trials, cfg.probe_tokens, cfg.num_classes, rng)
    report = entropy_probe(seqs, rng)
    report["_provenance"] = _provenance(cfg)
    out = os.path.join(_out_root(args), "entropy_probe.json")
    _write_json(out, report)
    means = {k: v["mean_entropy"] for k, v in report["orderings"].items()}
    print(" ".join(f"{k}={v:.4f}" for k, v in means.items()) + f" -> {out}")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all()
    failures = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failures += 0 if ok else 1
    if failures:
        print(f"{failures} verification item(s) failed", file=sys.stderr)
        return 1
    print("all verification items passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sortscan",
        description="Probability-sorted selective-scan segmentation harness")
    parser.add_argument("--threads", type=int, default=0,
                        help="BLAS thread cap (0 = machine default)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=False, checkpoint=False, split_default="train"):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable; wins over the file)")
        p.add_argument("--out", default=None, help="output root (env SORTSCAN_OUT)")
        if dataset:
            p.add_argument("--dataset", required=True, help="dataset directory")
            p.add_argument("--split", choices=("train", "test", "all"),
                           default=split_default)
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint directory")

    common(sub.add_parser("gen-data", help="write a synthetic dataset"))
    p = sub.add_parser("train", help="train a model on a dataset")
    common(p, dataset=True)
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint")
    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, dataset=True, checkpoint=True, split_default="test")
    p = sub.add_parser("infer", help="write predicted instance masks")
    common(p, dataset=True, checkpoint=True, split_default="all")
    p = sub.add_parser("ablate-scan", help="run ordering/module ablation grids")
    common(p)
    p.add_argument("--grid", choices=("orderings", "modules", "both"), default="both")
    common(sub.add_parser("entropy-probe", help="run the ordering entropy probe"))
    common(sub.add_parser("verify", help="run the itemized verification suite"))
    return parser


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "ablate-scan": cmd_ablate_scan,
    "entropy-probe": cmd_entropy_probe,
    "verify": cmd_verify,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    threads = args.threads or int(os.environ.get("SORTSCAN_THREADS", "0"))
    if threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(threads))
    return _HANDLERS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
