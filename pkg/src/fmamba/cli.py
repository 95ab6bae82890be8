"""``fmamba`` command line: fuse, train-toy, metrics and check.

Exit codes: 0 success, 1 check or training failure, 2 input/usage error,
3 model-state or configuration error.
"""
from __future__ import annotations

import argparse
import contextlib
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checks
from .io import ImageFormatError, read_image, write_image
from .losses import DEFAULT_WEIGHTS, LossWeights
from .metrics import evaluate_all
from .network import ModelConfig, StateFileError, forward_fuse, load_state, model_init, save_state
from .training import DivergenceError, train_toy

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_STATE = 0, 1, 2, 3
IMAGE_SUFFIXES = (".pgm", ".png")
PRESETS = {"full": ModelConfig, "toy": ModelConfig.toy, "micro": ModelConfig.micro}
CONFIG_KEYS = {"a", "b", "out", "state", "seed", "report", "steps", "weights", "preset",
               "base_dim", "depths", "state_size", "dir_a", "dir_b", "dir_f", "jsonl", "suite"}


class InputError(Exception):
    pass


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    a: list[str] = field(default_factory=list)
    b: list[str] = field(default_factory=list)
    out: Optional[str] = None
    state: Optional[str] = None
    seed: Optional[int] = None
    report: Optional[str] = None
    steps: Optional[int] = None
    weights: LossWeights = DEFAULT_WEIGHTS
    preset: Optional[str] = None
    base_dim: Optional[int] = None
    depths: Optional[tuple[int, ...]] = None
    state_size: Optional[int] = None
    dir_a: Optional[str] = None
    dir_b: Optional[str] = None
    dir_f: Optional[str] = None
    jsonl: Optional[str] = None
    suite: Optional[str] = None
    inject_fault: Optional[str] = None

    def model_config(self, default_preset: str) -> ModelConfig:
        base = PRESETS[self.preset or default_preset](seed=self.seed or 0)
        overrides = {k: v for k, v in (("base_dim", self.base_dim), ("depths", self.depths),
                                       ("state_size", self.state_size)) if v is not None}
        if not overrides:
            return base
        try:
            return ModelConfig(**{**base.__dict__, **overrides})
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def _coerce(key: str, value: str):
    if key in ("seed", "steps", "base_dim", "state_size"):
        return int(value)
    if key == "weights":
        return LossWeights.parse(value)
    if key == "depths":
        return tuple(int(v) for v in value.split(","))
    if key in ("a", "b"):
        return [value]
    return value


def build_config(args: argparse.Namespace) -> RunConfig:
    """Merge the optional config file under the command-line flags."""
    cfg = RunConfig(command=args.command)
    if getattr(args, "config", None):
        for key, value in read_config_file(args.config).items():
            try:
                setattr(cfg, key, _coerce(key, value))
            except ValueError as exc:
                raise ConfigError(f"config key {key}: {exc}") from exc
    for key in CONFIG_KEYS | {"inject_fault"}:
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    return cfg


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned value")
    return value


def _weights(text: str) -> LossWeights:
    try:
        return LossWeights.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _depths(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), help="model size preset")
    p.add_argument("--base-dim", dest="base_dim", type=int)
    p.add_argument("--depths", type=_depths, help="blocks per level, e.g. 2,2,9,2")
    p.add_argument("--state-size", dest="state_size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmamba", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="flat key = value file; flags take precedence")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", help="fuse two registered grayscale images")
    p.add_argument("--a", action="append", help="first source image (PGM/PNG)")
    p.add_argument("--b", action="append", help="second source image (PGM/PNG)")
    p.add_argument("--out", help="fused output (PGM)")
    p.add_argument("--state", help="model state file from train-toy")
    p.add_argument("--seed", type=_seed, help="random initialisation seed when no --state is given")
    p.add_argument("--report", help="write a metric CSV for the fused pair")
    _add_model_flags(p)

    p = sub.add_parser("train-toy", help="overfit a small model on one or more pairs")
    p.add_argument("--a", action="append", help="first source image; repeat for more pairs")
    p.add_argument("--b", action="append", help="second source image; repeat for more pairs")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="where to save the trained state")
    p.add_argument("--weights", type=_weights, help="loss weights alpha1,alpha2,alpha3")
    p.add_argument("--seed", type=_seed)
    _add_model_flags(p)

    p = sub.add_parser("metrics", help="score directories of (I1, I2, If) triples")
    p.add_argument("--dir-a", dest="dir_a")
    p.add_argument("--dir-b", dest="dir_b")
    p.add_argument("--dir-f", dest="dir_f")
    p.add_argument("--out", help="CSV report path")
    p.add_argument("--jsonl", help="optional JSON-lines mirror of the report")

    p = sub.add_parser("check", help="run the built-in invariant suites")
    p.add_argument("--suite", choices=sorted(checks.SUITES))
    p.add_argument("--inject-fault", dest="inject_fault", choices=sorted(checks.SUITES),
                   help=argparse.SUPPRESS)
    return parser


# --------------------------------------------------------------------------- helpers

def _need(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if not getattr(cfg, n)]
    if missing:
        raise InputError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _load(path) -> np.ndarray:
    try:
        return read_image(path)
    except FileNotFoundError as exc:
        raise InputError(f"{path}: no such file") from exc
    except (ImageFormatError, OSError) as exc:
        raise InputError(str(exc)) from exc


def _load_pair(a, b, stride: int) -> tuple[np.ndarray, np.ndarray]:
    I1, I2 = _load(a), _load(b)
    if I1.shape != I2.shape:
        raise InputError(f"extent mismatch: {a} is {I1.shape[0]}x{I1.shape[1]}, "
                         f"{b} is {I2.shape[0]}x{I2.shape[1]}")
    if I1.shape[0] % stride or I1.shape[1] % stride:
        raise InputError(f"extents {I1.shape[0]}x{I1.shape[1]} must be divisible by {stride}")
    return I1, I2


def _single(values: list[str], flag: str) -> str:
    if len(values) != 1:
        raise InputError(f"fuse takes exactly one {flag}")
    return values[0]


# --------------------------------------------------------------------------- commands

def cmd_fuse(cfg: RunConfig) -> int:
    _need(cfg, "a", "b", "out")
    if cfg.state:
        try:
            state = load_state(cfg.state)
        except FileNotFoundError as exc:
            raise ConfigError(f"{cfg.state}: no such state file") from exc
        except StateFileError as exc:
            raise ConfigError(str(exc)) from exc
        if cfg.preset or cfg.base_dim or cfg.depths or cfg.state_size:
            wanted = cfg.model_config("full")
            if (wanted.base_dim, wanted.depths, wanted.state_size) != \
                    (state.config.base_dim, state.config.depths, state.config.state_size):
                raise ConfigError(f"state file {cfg.state} holds {state.config}, requested {wanted}")
    elif cfg.seed is not None:
        state = model_init(cfg.model_config("full"))
    else:
        raise InputError("fuse needs --state or --seed")
    I1, I2 = _load_pair(_single(cfg.a, "--a"), _single(cfg.b, "--b"), state.config.stride)
    fused = forward_fuse(state, I1, I2).data
    try:
        write_image(fused, cfg.out)
    except OSError as exc:
        raise InputError(f"cannot write {cfg.out}: {exc.strerror}") from exc
    print(f"wrote {cfg.out} ({fused.shape[0]}x{fused.shape[1]})")
    if cfg.report:
        report = evaluate_all([(I1, I2, read_image(cfg.out))], ids=[Path(cfg.out).stem])
        report.to_csv(cfg.report)
        print(f"wrote {cfg.report}")
    return EXIT_OK


def cmd_train_toy(cfg: RunConfig) -> int:
    _need(cfg, "a", "b", "out")
    if cfg.steps is None or cfg.steps < 1:
        raise InputError("--steps must be a positive integer")
    if len(cfg.a) != len(cfg.b):
        raise InputError(f"got {len(cfg.a)} --a images but {len(cfg.b)} --b images")
    model_cfg = cfg.model_config("toy")
    pairs = [_load_pair(a, b, model_cfg.stride) for a, b in zip(cfg.a, cfg.b)]

    def log(step: int, br: dict) -> None:
        print(f"step {step:5d}  int={br['int']:.6g}  text={br['text']:.6g}  "
              f"ssim={br['ssim']:.6g}  total={br['total']:.6g}", flush=True)

    try:
        result = train_toy(pairs, cfg.steps, model_cfg, cfg.weights, log=log)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    try:
        save_state(result.state, cfg.out)
    except OSError as exc:
        raise InputError(f"cannot write {cfg.out}: {exc.strerror}") from exc
    first, last = result.losses[0], result.losses[-1]
    print(f"first loss {first:.6g}  last loss {last:.6g}  ratio {last / first:.4f}")
    print(f"saved {cfg.out}")
    return EXIT_OK


def _stems(directory: str) -> dict[str, Path]:
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"{directory}: not a directory")
    out = {}
    for f in sorted(d.iterdir()):
        if f.suffix.lower() in IMAGE_SUFFIXES and f.stem not in out:
            out[f.stem] = f
    return out


def cmd_metrics(cfg: RunConfig) -> int:
    _need(cfg, "dir_a", "dir_b", "dir_f", "out")
    maps = [_stems(d) for d in (cfg.dir_a, cfg.dir_b, cfg.dir_f)]
    common = sorted(set(maps[0]) & set(maps[1]) & set(maps[2]))
    for stem in sorted(set().union(*maps) - set(common)):
        where = [d for d, m in zip((cfg.dir_a, cfg.dir_b, cfg.dir_f), maps) if stem not in m]
        print(f"warning: unmatched stem {stem!r} (missing in {', '.join(where)})", file=sys.stderr)
    if not common:
        raise InputError("no filename stems common to all three directories")
    triples = [tuple(_load(m[s]) for m in maps) for s in common]
    try:
        report = evaluate_all(triples, ids=common)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    report.to_csv(cfg.out)
    if cfg.jsonl:
        report.to_jsonl(cfg.jsonl)
    for row in report.rows:
        if row.flags:
            print(f"note: {row.pair}: {', '.join(row.flags)}", file=sys.stderr)
    print(f"wrote {cfg.out} ({len(report.rows)} pairs + mean)")
    return EXIT_OK


def cmd_check(cfg: RunConfig) -> int:
    names = [cfg.suite] if cfg.suite else None
    results = checks.run_suites(names, inject_fault=cfg.inject_fault)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.seconds:6.1f}s  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed suites: " + ", ".join(failed), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {"fuse": cmd_fuse, "train-toy": cmd_train_toy, "metrics": cmd_metrics, "check": cmd_check}


def thread_limit() -> Optional[int]:
    raw = os.environ.get("FMAMBA_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise InputError(f"FMAMBA_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = build_config(args)
        limit = thread_limit()
        if limit is None:
            ctx = contextlib.nullcontext()
        else:
            from threadpoolctl import threadpool_limits
            ctx = threadpool_limits(limits=limit)
        with ctx:
            return COMMANDS[cfg.command](cfg)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STATE


if __name__ == "__main__":
    sys.exit(main())
