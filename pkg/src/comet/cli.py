"""Command-line entry point: gen-data, train, eval, stats, grad-check.

Exit codes: 0 success, 1 validation failure (bad config, missing or
incompatible inputs, failing gradient checks), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evalsuite, gradcheck, synthgen, trainer
from .config import ConfigError, RunConfig, load_config
from .numerics import derive_seed

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
ABLATE_ALIASES = {"pmr": "pm"}


class InputError(ValueError):
    """Inputs exist but are unusable: missing files, bad filters, wrong checkpoint."""


def _int_list(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise InputError(f"--stages expects comma-separated integers, got {text!r}") from exc


def parse_ablations(text: str | None) -> frozenset[str] | None:
    if text is None:
        return None
    names = [ABLATE_ALIASES.get(t.strip(), t.strip()) for t in text.split(",") if t.strip()]
    bad = [n for n in names if n not in trainer.ABLATIONS]
    if bad:
        raise InputError(f"--ablate: unknown component {bad[0]!r}; valid: {', '.join(trainer.ABLATIONS)}")
    return frozenset(names)


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=Path(args.out))
    return cfg


def _selected_stages(cfg: RunConfig, text: str | None) -> list[int]:
    wanted = _int_list(text)
    known = [s.index for s in cfg.stages]
    if wanted is None:
        return known
    missing = [i for i in wanted if i not in known]
    if missing:
        raise InputError(f"--stages: stage {missing[0]} is not in the config (stages: {known})")
    return sorted(set(wanted))


# ---------------------------------------------------------------- gen-data


def generate_datasets(cfg: RunConfig, stages: Sequence[int] | None = None) -> list[Path]:
    renderers = cfg.renderers()
    for r in renderers.values():
        r.validate()
    paths = []
    for spec in cfg.stage_specs():
        if stages is not None and spec.index not in stages:
            continue
        ds = synthgen.generate_stage_dataset(spec, renderers, derive_seed(cfg.seed, "train"))
        paths.append(ds.save(cfg.dataset_path(spec.index)))
    return paths


def eval_datasets(cfg: RunConfig, upto: int | None = None) -> list[synthgen.StageDataset]:
    """Held-out pairs per stage, regenerated from the config with a seed disjoint from training."""
    renderers = cfg.renderers()
    out = []
    for spec in cfg.stage_specs(n_pairs=cfg.data.eval_pairs):
        if upto is None or spec.index <= upto:
            out.append(synthgen.generate_stage_dataset(spec, renderers, derive_seed(cfg.seed, "eval")))
    return out


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    for p in generate_datasets(cfg, _selected_stages(cfg, args.stages)):
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------- train


def _format(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def write_metrics(path: Path, rows: list[dict], replaced_stages: set[int]) -> None:
    """Rewrite the metrics CSV, replacing rows of the stages that were just trained."""
    kept: list[dict] = []
    if path.exists():
        with path.open(newline="") as fh:
            kept = [r for r in csv.DictReader(fh) if int(r["stage"]) not in replaced_stages]
    merged = kept + [{k: _format(r[k]) for k in trainer.METRIC_COLUMNS} for r in rows]
    merged.sort(key=lambda r: int(r["stage"]))
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(trainer.METRIC_COLUMNS), lineterminator="\n")
        w.writeheader()
        w.writerows(merged)


def train_stages(cfg: RunConfig, stages: Sequence[int], ablate: frozenset[str] | None = None) -> list[Path]:
    for i in stages:
        if not cfg.dataset_path(i).exists():
            raise InputError(f"dataset for stage {i} not found at {cfg.dataset_path(i)}; run gen-data first")
    prev = None
    first = min(stages)
    if first > 1:
        path = cfg.checkpoint_path(first - 1)
        if not path.exists():
            raise InputError(f"stage {first} needs the stage-{first - 1} checkpoint at {path}")
        prev = trainer.load_checkpoint(path)
    rows: list[dict] = []
    written = []
    for i in stages:
        if prev is not None and prev.stage != i - 1:
            raise InputError(f"--stages must be contiguous; stage {i} cannot follow stage {prev.stage}")
        prev = trainer.run_stage(cfg.plan(i, ablate), prev, metrics=rows)
        written.append(trainer.save_checkpoint(prev, cfg.checkpoint_path(i)))
    write_metrics(cfg.metrics_path, rows, set(stages))
    return written


def cmd_train(args) -> int:
    cfg = _resolve(args)
    for p in train_stages(cfg, _selected_stages(cfg, args.stages), parse_ablations(args.ablate)):
        print(p)
    print(cfg.metrics_path)
    return EXIT_OK


# ---------------------------------------------------------------- eval / stats


def _checkpoint(cfg: RunConfig, explicit: str | None) -> tuple[trainer.Checkpoint, Path]:
    if explicit:
        path = Path(explicit)
    else:
        found = [cfg.checkpoint_path(s.index) for s in cfg.stages if cfg.checkpoint_path(s.index).exists()]
        if not found:
            raise InputError(f"no checkpoints under {cfg.out_dir / 'checkpoints'}; run train first")
        path = found[-1]
    if not path.exists():
        raise InputError(f"checkpoint {path} not found")
    return trainer.load_checkpoint(path), path


def _metric_list(text: str | None, cfg: RunConfig) -> list[str]:
    if text is None:
        return list(cfg.metrics)
    names = [t.strip() for t in text.split(",") if t.strip()]
    bad = [n for n in names if n not in evalsuite.METRICS]
    if bad:
        raise InputError(f"unknown metric {bad[0]!r}; valid: {', '.join(evalsuite.METRICS)}")
    return names


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    metrics = _metric_list(args.metrics, cfg)
    ckpt, path = _checkpoint(cfg, args.checkpoint)
    out_dir = cfg.out_dir / "eval"
    report = evalsuite.evaluate_checkpoint(
        ckpt, eval_datasets(cfg, ckpt.stage), metrics, out_dir, cfg.seed, cfg.activation_threshold
    )
    dest = report.save(out_dir / f"report_stage{ckpt.stage}.json")
    for name, value in sorted(report.metrics.items()):
        print(f"{name}\t{value:.6f}")
    print(dest)
    return EXIT_OK


def cmd_stats(args) -> int:
    cfg = _resolve(args)
    ckpt, _ = _checkpoint(cfg, args.checkpoint)
    model = ckpt.build_model()
    sets: dict[str, list[np.ndarray]] = {}
    for ds in eval_datasets(cfg, ckpt.stage):
        sets.setdefault(ds.mediator, []).append(ds.xa)
        sets.setdefault(ds.partner, []).append(ds.xb)
    csv_path = cfg.out_dir / "stats" / f"activation_stage{ckpt.stage}.csv"
    counts = evalsuite.export_code_activation(
        model, ckpt.codebook, {m: np.concatenate(v) for m, v in sets.items()}, cfg.activation_threshold, csv_path
    )
    print("class\tcodes")
    for k in range(4):
        label = f"{k}+" if k == 3 else str(k)
        print(f"{label}\t{counts[k]}")
    print(f"multi-modal fraction\t{evalsuite.multi_modal_fraction(counts):.4f}")
    print(csv_path)
    return EXIT_OK


# ---------------------------------------------------------------- grad-check


def cmd_grad_check(args) -> int:
    filters = [f.strip() for f in (args.filter or "").split(",") if f.strip()]
    try:
        checks = gradcheck.select(filters)
    except KeyError as exc:
        raise InputError(exc.args[0]) from exc
    failed = 0
    print(f"{'check':32s} {'instances':>9s} {'max rel err':>12s}  result")
    for check in checks:
        r = gradcheck.run_check(check, args.instances, args.seed or 0)
        failed += not r.passed
        print(f"{r.key:32s} {r.instances:9d} {r.worst:12.3e}  {'pass' if r.passed else 'FAIL'}")
    print(f"{len(checks) - failed}/{len(checks)} checks within {gradcheck.TOLERANCE:g}")
    return EXIT_OK if failed == 0 else EXIT_INVALID


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="comet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, stages=True):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory (beats $COMET_OUT)")
        if stages:
            p.add_argument("--stages", help="comma-separated stage indices, e.g. 1,2")

    p = sub.add_parser("gen-data", help="write one dataset file per stage")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train stages, write checkpoints and metrics.csv")
    common(p)
    p.add_argument("--ablate", help=f"comma-separated components to remove: {', '.join(trainer.ABLATIONS)}")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out pairs")
    common(p, stages=False)
    p.add_argument("--checkpoint", help="checkpoint file (default: latest stage in the output dir)")
    p.add_argument("--metrics", help=f"comma-separated subset of {', '.join(evalsuite.METRICS)}; empty for none")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="export code-activation classes")
    common(p, stages=False)
    p.add_argument("--checkpoint", help="checkpoint file (default: latest stage in the output dir)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("grad-check", help="compare analytic gradients with finite differences")
    p.add_argument("--config", help="accepted for symmetry; gradient checks need no config")
    p.add_argument("--filter", help="module name(s) or check keys, comma-separated")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.func(args)
    except (ConfigError, InputError, trainer.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
