"""Seeded SGD training, evaluation and metrics logging.

Run outputs, all inside ``config.output_dir``:

``metrics.jsonl``
    one JSON record per epoch: ``epoch, train_loss, train_acc, eval_acc``.
    Deterministic, so two runs with the same config match byte for byte.
``timing.jsonl``
    ``epoch, wall_ms`` per epoch (kept apart because wall time is not
    reproducible).
``checkpoint.fm3d``
    final parameters, momentum buffers and run metadata.
``plan.txt``
    the planner report for the network description.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, restore, save_checkpoint
from .config import RunConfig
from .data import Dataset, load_csv, load_idx, synth_dataset
from .errors import DimMismatch, NonFiniteLoss, ShapeMismatch
from .netdesc import (
    build_network,
    default_net_text,
    parse_net_text,
)
from .planner import render_plan_report

EVAL_BATCH = 256
DTYPES = {"single": np.float32, "double": np.float64}


class SGD:
    """Heavy-ball momentum: ``v = momentum * v + g``, ``p -= lr * v``."""

    def __init__(self, params: dict, lr, momentum=0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict):
        for name, p in self.params.items():
            v = self.velocity[name]
            v *= self.momentum
            v += grads[name]
            p -= self.lr * v


@dataclass
class TrainResult:
    metrics: list
    model: object
    plan: object
    checkpoint_path: Path
    output_dir: Path
    extra: dict = field(default_factory=dict)


def load_net_text(config: RunConfig) -> tuple[str, str | None]:
    if config.net_description is None:
        return default_net_text(), None
    path = Path(config.net_description)
    return path.read_text(encoding="utf-8"), str(path)


def load_datasets(config: RunConfig, input_shape=None):
    """``(train, eval_or_None)`` per the ``[data]`` section, cast to the run precision."""
    d = config.data
    dtype = DTYPES[config.precision]
    if d.source == "synthetic":
        eval_seed = d.eval_seed if d.eval_seed is not None else (config.seed + 1) % 2**64
        train = synth_dataset(config.seed, d.n, d.num_classes, d.height, d.width, d.channels,
                              d.noise)
        evals = synth_dataset(eval_seed, d.eval_n, d.num_classes, d.height, d.width,
                              d.channels, d.noise)
    elif d.source == "idx":
        train = load_idx(d.images, d.labels)
        evals = load_idx(d.eval_images, d.eval_labels) if d.eval_images else None
    else:
        train = load_csv(d.path, d.channels)
        evals = load_csv(d.eval_path, d.channels) if d.eval_path else None
    train.require_nonempty()
    if input_shape is not None:
        for ds in (train, evals):
            if ds is not None and tuple(ds.sample_shape) != tuple(input_shape):
                raise ShapeMismatch(f"data samples are {ds.sample_shape}, network input is "
                                    f"{tuple(input_shape)}")
    return train.astype(dtype), (evals.astype(dtype) if evals is not None else None)


def predict_logits(model, images, batch=EVAL_BATCH):
    return np.concatenate([model.forward(images[i : i + batch])
                           for i in range(0, images.shape[0], batch)])


def evaluate(model, dataset: Dataset):
    """``(accuracy, mean_loss)``; argmax ties go to the lowest class index."""
    from .ops import softmax_xent

    dataset.require_nonempty()
    logits = predict_logits(model, dataset.images)
    loss, _ = softmax_xent(logits, dataset.labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
    return acc, float(loss)


def _run_meta(config, net_text, epoch, step, rng_state):
    return {
        "seed": config.seed,
        "variant": config.variant,
        "precision": config.precision,
        "epoch": epoch,
        "step": step,
        "net": net_text,
        "rng_state": rng_state,
    }


def build_from_config(config: RunConfig, dtype=None):
    net_text, source = load_net_text(config)
    desc = parse_net_text(net_text, source)
    rng = np.random.default_rng(config.seed)
    model, plan = build_network(desc, config.variant, rng, config.grad_mode,
                                dtype or DTYPES[config.precision])
    return desc, model, plan, rng


def train(config: RunConfig, resume=None, log=None) -> TrainResult:
    """Train per ``config``; ``resume`` is a checkpoint from an earlier run of it.

    Epoch ``e`` shuffles with ``default_rng([seed, e])``, so a resumed run
    sees exactly the batches an uninterrupted run would.
    """
    desc, model, plan, rng = build_from_config(config)
    train_set, eval_set = load_datasets(config, desc.input_shape)
    n_out = model.output_shape(desc.input_shape)[0]
    if train_set.labels.max() >= n_out:
        raise ShapeMismatch(f"labels reach {train_set.labels.max()} but network has "
                            f"{n_out} outputs")
    params = model.parameters()
    opt = SGD(params, config.learning_rate, config.momentum)
    start_epoch, step = 1, 0
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        ckpt = load_checkpoint(resume)
        meta = ckpt.meta
        for key, want in (("variant", config.variant), ("precision", config.precision),
                          ("net", desc.text), ("seed", config.seed)):
            if meta.get(key) != want:
                raise DimMismatch(f"checkpoint {resume} was written with a different {key}")
        restore(ckpt, model, opt.velocity)
        rng.bit_generator.state = meta["rng_state"]
        start_epoch, step = meta["epoch"] + 1, meta["step"]

    (out_dir / "plan.txt").write_text(render_plan_report(plan), encoding="utf-8")
    mode = "a" if resume is not None else "w"
    metrics_f = open(out_dir / "metrics.jsonl", mode, encoding="utf-8")
    timing_f = open(out_dir / "timing.jsonl", mode, encoding="utf-8")
    records = []
    n = len(train_set)
    ckpt_path = out_dir / "checkpoint.fm3d"

    def write_ckpt(path, epoch):
        save_checkpoint(path, model, config.grad_mode, opt.velocity,
                        _run_meta(config, desc.text, epoch, step, rng.bit_generator.state))

    try:
        for epoch in range(start_epoch, config.epochs + 1):
            t0 = time.perf_counter()
            order = np.random.default_rng([config.seed, epoch]).permutation(n)
            for lo in range(0, n, config.batch_size):
                idx = order[lo : lo + config.batch_size]
                loss, grads = model.loss_and_grads(train_set.images[idx], train_set.labels[idx])
                if not np.isfinite(loss):
                    raise NonFiniteLoss(step, float(loss))
                opt.step(grads)
                step += 1
            train_acc, train_loss = evaluate(model, train_set)
            eval_acc = evaluate(model, eval_set)[0] if eval_set is not None else None
            rec = {"epoch": epoch, "train_loss": train_loss, "train_acc": train_acc,
                   "eval_acc": eval_acc}
            records.append(rec)
            metrics_f.write(json.dumps(rec) + "\n")
            metrics_f.flush()
            wall_ms = round((time.perf_counter() - t0) * 1000.0, 3)
            timing_f.write(json.dumps({"epoch": epoch, "wall_ms": wall_ms}) + "\n")
            timing_f.flush()
            if log:
                log(f"epoch {epoch}: loss {train_loss:.4f} train_acc {train_acc:.4f} "
                    f"eval_acc {eval_acc if eval_acc is None else round(eval_acc, 4)} "
                    f"({wall_ms:.0f} ms)")
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                write_ckpt(out_dir / f"checkpoint_epoch{epoch:04d}.fm3d", epoch)
    finally:
        metrics_f.close()
        timing_f.close()
    last_epoch = max(config.epochs, start_epoch - 1)
    write_ckpt(ckpt_path, last_epoch)
    return TrainResult(records, model, plan, ckpt_path, out_dir)


def model_from_checkpoint(path):
    """Rebuild the network stored in a checkpoint and load its parameters."""
    ckpt = load_checkpoint(path)
    meta = ckpt.meta
    desc = parse_net_text(meta["net"])
    model, plan = build_network(desc, meta["variant"], np.random.default_rng(0),
                                ckpt.grad_mode, DTYPES[meta["precision"]])
    restore(ckpt, model)
    return model, desc, ckpt


def evaluate_checkpoint(path, dataset: Dataset):
    dataset.require_nonempty()
    model, desc, ckpt = model_from_checkpoint(path)
    if tuple(dataset.sample_shape) != tuple(desc.input_shape):
        raise ShapeMismatch(f"data samples are {dataset.sample_shape}, network input is "
                            f"{desc.input_shape}")
    return evaluate(model, dataset.astype(DTYPES[ckpt.meta["precision"]]))


def read_records(path):
    """Parse a line-delimited structured file (metrics or plan report)."""
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]

