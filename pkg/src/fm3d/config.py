"""Run configuration files.

Sections ``[run]``, ``[data]`` and ``[net]``; only ``run.seed`` is
required.  Relative paths resolve against the config file's directory.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from . import cfgfile
from .errors import BadValue, MissingKey, UnknownKey
from .filtermap import GRAD_MODES

RUN_KEYS = {"seed", "epochs", "batch_size", "learning_rate", "momentum", "grad_mode",
            "precision", "variant", "output_dir", "checkpoint_every"}
DATA_KEYS = {"source", "n", "num_classes", "height", "width", "channels", "eval_n",
             "eval_seed", "noise", "images", "labels", "eval_images", "eval_labels",
             "path", "eval_path"}
NET_KEYS = {"description"}


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    n: int = 1000
    num_classes: int = 3
    height: int = 16
    width: int = 16
    channels: int = 2
    eval_n: int = 300
    eval_seed: int | None = None  # default: run seed + 1
    noise: float = 0.25
    images: Path | None = None
    labels: Path | None = None
    eval_images: Path | None = None
    eval_labels: Path | None = None
    path: Path | None = None
    eval_path: Path | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    grad_mode: str = "average"
    precision: str = "double"
    variant: str = "fm"
    output_dir: Path = Path("out")
    checkpoint_every: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    net_description: Path | None = None  # None: the packaged toy network

    def with_overrides(self, **kw):
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)


def _seed(text):
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    return value


def parse_config(path) -> RunConfig:
    path = Path(path)
    sections = {s.name: s for s in cfgfile.parse_file(path)}
    for name, sec in sections.items():
        if name not in ("run", "data", "net"):
            raise UnknownKey(f"unknown section [{name}]", str(path), sec.line)
    if "run" not in sections:
        raise MissingKey("missing [run] section (run.seed is required)", str(path))
    base = path.parent

    def resolve(text):
        p = Path(text)
        return p if p.is_absolute() else base / p

    run = sections["run"]
    run.reject_unknown(RUN_KEYS)
    defaults = RunConfig(seed=0)
    pos = lambda v: v >= 1
    kw = dict(
        seed=run.get("seed", _seed, required=True),
        epochs=run.get("epochs", int, defaults.epochs, check=lambda v: v >= 0,
                       expect="an integer >= 0"),
        batch_size=run.get("batch_size", int, defaults.batch_size, check=pos,
                           expect="an integer >= 1"),
        learning_rate=run.get("learning_rate", float, defaults.learning_rate,
                              check=lambda v: v >= 0 and v == v and v != float("inf"),
                              expect="a finite number >= 0"),
        momentum=run.get("momentum", float, defaults.momentum, check=lambda v: 0 <= v < 1,
                         expect="a number in [0, 1)"),
        grad_mode=run.get("grad_mode", str, defaults.grad_mode, check=lambda v: v in GRAD_MODES,
                          expect="sum or average"),
        precision=run.get("precision", str, defaults.precision,
                          check=lambda v: v in ("single", "double"), expect="single or double"),
        variant=run.get("variant", str, defaults.variant,
                        check=lambda v: v in ("fm", "baseline"), expect="fm or baseline"),
        output_dir=run.get("output_dir", resolve, base / defaults.output_dir),
        checkpoint_every=run.get("checkpoint_every", int, 0, check=lambda v: v >= 0,
                                 expect="an integer >= 0"),
    )

    dd = DataConfig()
    if "data" in sections:
        sec = sections["data"]
        sec.reject_unknown(DATA_KEYS)
        source = sec.get("source", str, dd.source,
                         check=lambda v: v in ("synthetic", "idx", "csv"),
                         expect="synthetic, idx or csv")
        ints = {k: sec.get(k, int, getattr(dd, k), check=pos, expect="an integer >= 1")
                for k in ("n", "num_classes", "height", "width", "channels", "eval_n")}
        paths = {k: sec.get(k, resolve) for k in ("images", "labels", "eval_images",
                                                   "eval_labels", "path", "eval_path")}
        if source == "idx":
            for k in ("images", "labels"):
                if paths[k] is None:
                    raise MissingKey(f"[data] source = idx requires '{k}'", str(path), sec.line)
            if (paths["eval_images"] is None) != (paths["eval_labels"] is None):
                raise MissingKey("[data] eval_images and eval_labels go together",
                                 str(path), sec.line)
        if source == "csv" and paths["path"] is None:
            raise MissingKey("[data] source = csv requires 'path'", str(path), sec.line)
        dd = DataConfig(source=source, eval_seed=sec.get("eval_seed", _seed),
                        noise=sec.get("noise", float, dd.noise, check=lambda v: v >= 0,
                                      expect="a number >= 0"),
                        **ints, **paths)
        if source == "synthetic" and dd.n < dd.num_classes:
            raise BadValue("[data] n must be >= num_classes", str(path), sec.line_of("n"))
    kw["data"] = dd

    if "net" in sections:
        sec = sections["net"]
        sec.reject_unknown(NET_KEYS)
        kw["net_description"] = sec.get("description", resolve)
    return RunConfig(**kw)
