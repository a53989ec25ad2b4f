"""Command-line entry point: ``adaclust <command> [flags]``.

Exit codes: 0 success, 1 usage, 2 I/O failure, 3 numeric failure,
4 bad argument semantics.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .model import PAD, CaptionerModel, ModelConfig, cross_entropy, generate
from .oracle import finite_diff
from .scenes import build_dataset, detokenize, generate_caption, generate_scene, read_dataset
from .train import FitConfig, NonFiniteError, evaluate, fit

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_SEMANTIC = 0, 1, 2, 3, 4

log = logging.getLogger("adaclust")


class UsageError(Exception):
    pass


class SemanticError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- run configuration ----------------------------------------------------------

@dataclasses.dataclass
class RunConfig:
    """Training run settings; every ModelConfig field may also appear at top level."""

    train_path: str = "data/train.jsonl"
    val_path: str = "data/val.jsonl"
    out_dir: str = "runs/default"
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay: float = 0.8
    lr_decay_every: int = 5
    seed: int = 0
    resume: Optional[str] = None
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        run_keys = {f.name for f in dataclasses.fields(cls)} - {"model"}
        model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
        unknown = set(raw) - run_keys - model_keys
        if unknown:
            raise SemanticError(f"unknown config keys: {sorted(unknown)}")
        model_part = {k: v for k, v in raw.items() if k in model_keys and k != "seed"}
        run_part = {k: v for k, v in raw.items() if k in run_keys}
        seed = raw.get("seed", 0)
        try:
            model = ModelConfig(seed=seed, **model_part)
        except (TypeError, ValueError) as exc:
            raise SemanticError(str(exc)) from exc
        return cls(model=model, **run_part)

    def to_dict(self) -> dict:
        out = {k: v for k, v in dataclasses.asdict(self).items() if k != "model"}
        out.update({k: v for k, v in self.model.to_dict().items() if k != "seed"})
        return out


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise OSError(f"config {path} is not valid JSON: {exc}") from exc


def _echo(command: str, effective: dict) -> None:
    print(json.dumps({"command": command, "effective": effective}, sort_keys=True, default=str),
          file=sys.stderr)


# -- commands -------------------------------------------------------------------

def _parse_grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise SemanticError(f"--grid must look like 8x8, got {text!r}") from exc
    if h < 4 or w < 4:
        raise SemanticError(f"grid must be at least 4x4, got {text}")
    return h, w


def cmd_gen_data(args) -> int:
    h, w = _parse_grid(args.grid)
    ratios = [float(r) for r in args.split.split(",")]
    _echo("gen-data", {"seed": args.seed, "count": args.count, "grid": [h, w], "out": args.out,
                        "split": ratios})
    try:
        paths = build_dataset(args.seed, args.count, ratios, args.out, h, w)
    except ValueError as exc:
        raise SemanticError(str(exc)) from exc
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


METRIC_FIELDS = ("epoch", "train_ce", "val_ce", "val_token_accuracy", "val_exact_match")


def cmd_train(args) -> int:
    run = RunConfig.from_dict(_load_json(args.config))
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    effective = run.to_dict()
    (out / "effective_config.json").write_text(json.dumps(effective, indent=2, sort_keys=True) + "\n")
    _echo("train", effective)

    train = read_dataset(run.train_path)
    val = read_dataset(run.val_path)
    start_epoch = 0
    optimizer = None
    best = float("inf")
    if run.resume:
        model, optimizer, state = load_checkpoint(run.resume)
        start_epoch = int(state.get("epoch", -1)) + 1
        best = float(state.get("best_val_ce", best))
    else:
        model = CaptionerModel.init(run.model)
    # ``epochs`` is the run's total, so a resumed run only trains the remainder
    remaining = max(0, run.epochs - start_epoch)
    fit_cfg = FitConfig(remaining, run.batch_size, run.lr, run.lr_decay, run.lr_decay_every, run.seed)

    metrics_path = out / "metrics.csv"
    append = run.resume is not None and metrics_path.exists()
    fh = open(metrics_path, "a" if append else "w", newline="")
    writer = csv.writer(fh)
    if not append:
        writer.writerow(METRIC_FIELDS)

    def on_epoch(epoch, train_ce, result, opt):
        nonlocal best
        writer.writerow([epoch, f"{train_ce:.6f}", f"{result.loss:.6f}",
                         f"{result.token_accuracy:.6f}", f"{result.exact_match:.6f}"])
        fh.flush()
        state = {"epoch": epoch, "step": opt.step_count}
        if result.loss < best:
            best = result.loss
            save_checkpoint(out / "best.ckpt", model, opt, {**state, "best_val_ce": best})
        save_checkpoint(out / "last.ckpt", model, opt, {**state, "best_val_ce": best})

    try:
        fit(model, train, val, fit_cfg, optimizer=optimizer, start_epoch=start_epoch, on_epoch=on_epoch)
    finally:
        fh.close()
    return EXIT_OK


def _load_model(path) -> CaptionerModel:
    model, _, _ = load_checkpoint(path)
    return model


def cmd_eval(args) -> int:
    _echo("eval", {"checkpoint": args.checkpoint, "data": args.data})
    model = _load_model(args.checkpoint)
    samples = read_dataset(args.data)
    result = evaluate(model, samples)
    print(f"val_ce {result.loss:.6f}")
    print(f"token_accuracy {result.token_accuracy:.6f}")
    print(f"exact_match {result.exact_match:.6f}")
    return EXIT_OK


def cmd_generate(args) -> int:
    _echo("generate", {"checkpoint": args.checkpoint, "seed": args.seed, "beam": args.beam})
    if args.beam < 1:
        raise SemanticError("--beam must be >= 1")
    model = _load_model(args.checkpoint)
    cfg = model.config
    scene = generate_scene(args.seed, cfg.grid_h, cfg.grid_w)
    if args.beam > 1:
        ids = generate(model, scene.features(), "beam", args.beam)
    else:
        ids = generate(model, scene.features(), "greedy")
    print(" ".join(detokenize(ids)))
    return EXIT_OK


def write_matrix_csv(path, matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in matrix:
            writer.writerow([repr(float(v)) for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def write_pgm(path, matrix: np.ndarray) -> None:
    """Plain (P2) 8-bit greyscale image, value ``round(255 * x)``."""
    pixels = np.clip(np.rint(255.0 * np.asarray(matrix)), 0, 255).astype(int)
    h, w = pixels.shape
    lines = ["P2", f"{w} {h}", "255"]
    lines += [" ".join(str(v) for v in row) for row in pixels]
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_dump_clusters(args) -> int:
    _echo("dump-clusters", {"checkpoint": args.checkpoint, "seed": args.seed,
                             "layer": args.layer, "out": args.out})
    model = _load_model(args.checkpoint)
    cfg = model.config
    depth = max(cfg.m_e, cfg.m_d)
    layers = list(range(depth)) if args.layer == "all" else [int(args.layer)]
    if any(not 0 <= l < depth for l in layers):
        raise SemanticError(f"layer {args.layer} outside depth {depth}")
    scene = generate_scene(args.seed, cfg.grid_h, cfg.grid_w)
    caption = generate_caption(scene)[: cfg.max_caption_len]
    memory, enc_trace = model.encode(scene.features())
    _, dec_trace = model.decode_teacher_forced(memory, caption)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for side, trace in (("encoder", enc_trace), ("decoder", dec_trace)):
        for l in layers:
            if l < len(trace):
                stem = out / f"{side}_layer{l}"
                write_matrix_csv(stem.with_suffix(".csv"), trace[l].data)
                write_pgm(stem.with_suffix(".pgm"), trace[l].data)
                print(stem)
                written += 1
    if not written:
        raise SemanticError("model has no clustering matrices at the requested layer")
    return EXIT_OK


TINY_CONFIG = dict(d=8, n_heads=2, m_e=2, m_d=2, grid_h=3, grid_w=3, max_caption_len=4)


def gradcheck_model(config: ModelConfig, fraction: float, seed: int = 0, step: float = 1e-5):
    """Finite-difference report for the whole-model CE loss on one seeded random input."""
    model = CaptionerModel.init(config)
    rng = np.random.default_rng(seed)
    t = config.max_caption_len
    feats = rng.normal(size=(1, config.grid_h, config.grid_w, config.d_in))
    words = rng.integers(3, config.vocab_size, size=t)
    inputs = np.concatenate([[0], words[:-1]])[None]
    targets = np.concatenate([words[:-1], [1]])[None]
    # keep tokens non-pad so every position contributes to the loss
    inputs[inputs == PAD] = 3
    targets[targets == PAD] = 3

    def loss():
        return cross_entropy(model.forward(feats, inputs), targets)

    return finite_diff(loss, model.parameters(), fraction, step, seed)


def cmd_gradcheck(args) -> int:
    raw = dict(TINY_CONFIG)
    if args.config:
        raw.update(_load_json(args.config))
    try:
        config = ModelConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise SemanticError(str(exc)) from exc
    if not 0 < args.fraction <= 1:
        raise SemanticError("--fraction must be in (0, 1]")
    _echo("gradcheck", {**config.to_dict(), "fraction": args.fraction, "tol": args.tol})
    report = gradcheck_model(config, args.fraction, args.seed)
    name, err = report.worst
    print(f"coordinates {report.coords_checked} max_rel_error {err:.3e} worst {name} "
          f"at {report.argmax.get(name)}")
    if err > args.tol:
        print(f"FAIL: {name} exceeds tolerance {args.tol:g}")
        return EXIT_NUMERIC
    print("PASS")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adaclust", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write toy train/val/test JSONL files")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1200)
    p.add_argument("--grid", default="8x8")
    p.add_argument("--split", default="0.8,0.1,0.1", help="train,val,test ratios")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from a RunConfig JSON file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="token accuracy and exact match on a JSONL split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="caption a seeded scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--beam", type=int, default=1)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("dump-clusters", help="export accumulated clustering matrices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--layer", default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_clusters)

    p = sub.add_parser("gradcheck", help="finite-difference check of the whole-model loss")
    p.add_argument("--config", help="JSON ModelConfig overrides (default: tiny config)")
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except SemanticError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SEMANTIC
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SEMANTIC


if __name__ == "__main__":
    sys.exit(main())
