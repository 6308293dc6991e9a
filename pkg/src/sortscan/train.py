"""Training loop, checkpointing, structured logs, and dataset evaluation.

Logs are line-delimited JSON records (iteration plus loss terms) behind a
provenance header; no wall-clock fields, so identical configs and seeds
produce bit-identical logs. Checkpoints store model parameters and
optimizer velocity as named tensors.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from . import autodiff as ad
from . import nn, serialize
from .instances import InstanceMask, extract_instances
from .metrics import MetricsReport, aggregate_reports, evaluate_pair
from .model import Model, ModelConfig, Targets, config_to_text
from .synth import Sample


class TrainingDiverged(RuntimeError):
    pass


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(config_to_text(cfg).encode()).hexdigest()[:16]


def provenance(cfg: ModelConfig) -> dict[str, str]:
    from . import __version__

    return {"version": __version__, "config_sha256": config_hash(cfg), "seed": str(cfg.seed)}


def train(cfg: ModelConfig, samples: list[Sample], out_dir: str,
          resume: bool = False) -> tuple[Model, list[dict]]:
    """Train on the given samples; writes checkpoint/ and train_log.jsonl."""
    if not samples:
        raise ValueError("train: empty dataset")
    os.makedirs(out_dir, exist_ok=True)
    model = Model(cfg)
    opt = nn.SGD(model.params, lr=cfg.lr, momentum=cfg.momentum,
                 weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    start_iter = 0
    log_path = os.path.join(out_dir, "train_log.jsonl")
    ckpt_path = os.path.join(out_dir, "checkpoint")

    if resume:
        state, meta = serialize.load_checkpoint(ckpt_path)
        model.load_state_dict({k[6:]: v for k, v in state.items() if k.startswith("param/")})
        for k, v in state.items():
            if k.startswith("vel/"):
                opt.velocity[k[4:]] = v.astype(model.cfg.np_dtype).copy()
        start_iter = int(meta.get("iteration", 0))

    targets = [Targets.from_sample(s, cfg) for s in samples]
    order_rng = np.random.default_rng(cfg.seed + 1)

    mode = "a" if resume else "w"
    records: list[dict] = []
    with open(log_path, mode) as log:
        if not resume:
            log.write("# " + json.dumps(provenance(cfg), sort_keys=True) + "\n")
        # replay epoch shuffles consumed before the resume point so a
        # resumed run visits the same sample sequence as an unbroken one
        n = len(samples)
        for _ in range(start_iter // n):
            order_rng.permutation(n)
        order = order_rng.permutation(n) if start_iter % n else np.array([], dtype=int)
        for it in range(start_iter, cfg.iterations):
            pos = it % n
            if pos == 0:
                order = order_rng.permutation(n)
            idx = int(order[pos])
            with ad.tape_scope():
                try:
                    out = model.forward(samples[idx].image,
                                        block_labels=targets[idx].block_labels)
                    loss, parts = model.loss(out, targets[idx])
                except ValueError:
                    # blown-up parameters can trip op preconditions before the
                    # loss itself turns non-finite; report those as divergence
                    if any(not np.all(np.isfinite(p.data)) for p in model.params.values()):
                        raise TrainingDiverged(
                            f"non-finite parameters at iteration {it}") from None
                    raise
                if not np.isfinite(parts["loss"]):
                    raise TrainingDiverged(
                        f"non-finite loss at iteration {it}: {parts}")
                opt.zero_grad()
                loss.backward()
                opt.step()
            if it % cfg.log_every == 0 or it == cfg.iterations - 1:
                rec = {"iteration": it, **parts}
                records.append(rec)
                log.write(json.dumps(rec, sort_keys=True) + "\n")

    state = {f"param/{k}": v for k, v in model.state_dict().items()}
    state.update({f"vel/{k}": v.copy() for k, v in opt.velocity.items()})
    meta = {**provenance(cfg), "iteration": str(cfg.iterations)}
    serialize.save_checkpoint(ckpt_path, state, meta)
    return model, records


def load_model(ckpt_path: str, cfg: ModelConfig) -> Model:
    state, _ = serialize.load_checkpoint(ckpt_path)
    model = Model(cfg)
    model.load_state_dict({k[6:]: v for k, v in state.items() if k.startswith("param/")})
    return model


def predict_instances(model: Model, sample: Sample) -> InstanceMask:
    with ad.no_grad(), ad.tape_scope():
        out = model.forward(sample.image)
        sem = _softmax_np(out.semantic.data[0])
        cls = _softmax_np(out.classes.data[0])
    return extract_instances(sem, cls)


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def ground_truth_mask(sample: Sample) -> InstanceMask:
    labels = np.asarray(sample.instance_mask, dtype=np.int32)
    classes = {}
    for inst in np.unique(labels):
        if inst > 0:
            vals = sample.class_mask[labels == inst]
            classes[int(inst)] = int(np.bincount(vals).argmax())
    return InstanceMask(labels=labels, classes=classes)


def evaluate(model: Model, samples: list[Sample]) -> tuple[MetricsReport, list[MetricsReport]]:
    """Aggregate and per-image metrics over a sample list."""
    pairs = []
    per_image = []
    nc = model.cfg.num_classes
    for s in samples:
        pred = predict_instances(model, s)
        gt = ground_truth_mask(s)
        pairs.append((pred, gt))
        per_image.append(evaluate_pair(pred, gt, nc))
    return aggregate_reports(pairs, nc), per_image


def write_report(path: str, cfg: ModelConfig, aggregate: MetricsReport,
                 per_image: list[MetricsReport]) -> None:
    payload = {
        "_provenance": provenance(cfg),
        "aggregate": aggregate.to_dict(),
        "per_image": [r.to_dict() for r in per_image],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
