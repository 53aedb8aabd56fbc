"""Command-line entry point: ``dcnas <subcommand> [options]``.

Exit codes: 0 ok, 2 configuration error, 3 missing or incompatible data/artifacts,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PRESETS, RunConfig, load_config
from .derive import (
    ArchDescriptor,
    build_stacked_encoder,
    builtin_arch,
    count_params,
    derive_architecture,
    render_arch,
    render_param_table,
)
from .engine import AlphaTrajectory, load_alpha, run_search
from .errors import ConfigurationError, ContractError, DataError, NumericError
from .pipeline import evaluate, load_model, model_dims, train_descriptor
from .serialization import load_arrays

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config merged over the preset")
    p.add_argument("--preset", choices=PRESETS, help="base preset (default: desk)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", type=Path, help="output directory or file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcnas", description="Differentiable Conformer-cell search on synthetic tasks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="per-epoch log lines")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="bi-level search; writes alpha, trajectory, metrics, checkpoint")
    _common(p)

    p = sub.add_parser("derive", help="architecture descriptor from an alpha checkpoint")
    _common(p)
    p.add_argument("--alpha", type=Path, required=True, help="alpha.json written by search")

    p = sub.add_parser("train", help="retrain a descriptor from fresh weights")
    _common(p)
    p.add_argument("--arch", required=True, help="descriptor JSON path or built-in name")

    p = sub.add_parser("eval", help="greedy-CTC token error rate on a held-out synthetic set")
    _common(p)
    p.add_argument("--ckpt", type=Path, required=True, help="model.json written by train")

    p = sub.add_parser("export-trajectory", help="alpha trajectory CSV from a search checkpoint")
    _common(p)
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint.json written by search")

    p = sub.add_parser("show-arch", help="text DAG and parameter table of a descriptor")
    _common(p)
    p.add_argument("--arch", default="darts_conformer", help="descriptor JSON path or built-in name")
    p.add_argument("--layers", type=int, help="stack depth (default: train.n_layers)")
    return parser


def _config(args) -> RunConfig:
    return load_config(args.preset, args.config, args.seed)


def _arch(ref: str) -> ArchDescriptor:
    path = Path(ref)
    if path.suffix == ".json" or path.exists():
        return ArchDescriptor.load(path)
    return builtin_arch(ref)


def cmd_search(args) -> int:
    config = _config(args)
    out = args.out or Path("runs") / f"search-{config.preset}-s{config.seed}"
    result = run_search(config, out)
    desc = derive_architecture(result.alphas, result.spec)
    print(f"search finished: {result.state.epoch} epochs, {result.state.step} steps -> {out}")
    print(render_arch(desc))
    return 0


def cmd_derive(args) -> int:
    alphas, spec, _ = load_alpha(args.alpha)
    desc = derive_architecture(alphas, spec)
    out = args.out or args.alpha.with_name("arch.json")
    desc.save(out)
    print(render_arch(desc))
    print(f"descriptor -> {out}")
    return 0


def cmd_train(args) -> int:
    config = _config(args)
    desc = _arch(args.arch)
    out = args.out or Path("runs") / f"train-{config.preset}-s{config.seed}"
    result = train_descriptor(config, desc, out)
    last = result.metrics[-1].train_loss if result.metrics else float("nan")
    print(f"trained {config.train.n_layers} layers, final loss {last:.4f} -> {out}")
    return 0


def cmd_eval(args) -> int:
    config = _config(args)
    model, _ = load_model(args.ckpt)
    result = evaluate(model, config.task, config.task_seed)
    print(
        f"TER {result.ter:.4f}  baseline {result.baseline_ter:.4f}  "
        f"relative gain {result.relative_gain:.1%}  ({result.n_utterances} utterances)"
    )
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    return 0


def cmd_export_trajectory(args) -> int:
    _, meta = load_arrays(args.ckpt)
    if meta.get("kind") != "search-checkpoint":
        raise DataError(f"{args.ckpt} is not a search checkpoint")
    traj = AlphaTrajectory([(int(e), ed, c, float(w)) for e, ed, c, w in meta["trajectory"]])
    out = args.out or args.ckpt.with_name("trajectory_export.csv")
    traj.to_csv(out)
    print(f"{len(traj.rows)} rows -> {out}")
    return 0


def cmd_show_arch(args) -> int:
    config = _config(args)
    desc = _arch(args.arch)
    n = args.layers or config.train.n_layers
    model = build_stacked_encoder(desc, n, model_dims(config))
    print(render_arch(desc))
    print()
    print(f"{n}-layer encoder, d_model={config.model.d_model}")
    print(render_param_table(count_params(model)))
    return 0


COMMANDS = {
    "search": cmd_search,
    "derive": cmd_derive,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-trajectory": cmd_export_trajectory,
    "show-arch": cmd_show_arch,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ContractError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
