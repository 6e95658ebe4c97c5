"""Command line entry point (``fracflow``).

Exit status: 0 on success, 1 for usage or configuration errors, 2 when a
pipeline stage fails (the stage name is printed on stderr).
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from ..geometry import normalize_cloud
from ..io import CloudFormatError, load_cloud, save_cloud
from ..views import render_views, save_view_png
from .experiment import ConfigError, RunConfig, StageError, ablation_sweep, load_config, load_models
from .experiment import missing_piece_eval, run_experiment, run_stages

log = logging.getLogger("fracflow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(eval_fraction(v)) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def eval_fraction(v: str) -> float:
    """Accepts ``0.04`` as well as ``1/25``."""
    v = v.strip()
    if "/" in v:
        num, den = v.split("/", 1)
        return float(num) / float(den)
    return float(v)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS,
                        help="YAML/JSON file with nested RunConfig keys")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed override")
    common.add_argument("--out-dir", type=Path, default=argparse.SUPPRESS, help="run directory override")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="fracflow", description="Shape completion for fractured assemblies.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="build the synthetic train/test split")
    sub.add_parser("train-prior", parents=[common], help="train the base flow on complete shapes")
    sub.add_parser("retarget", parents=[common], help="build retarget pairs and fine-tune")

    r = sub.add_parser("reconstruct", parents=[common], help="complete one point-cloud file")
    r.add_argument("--input", type=Path, required=True, help="partial assembly (.ply/.xyz)")
    r.add_argument("--output", type=Path, required=True, help="where to write the completion")
    r.add_argument("--sample-seed", type=int, default=0)

    e = sub.add_parser("eval", parents=[common], help="run the full pipeline and write manifests")
    e.add_argument("--missing-drop", type=float, default=None, metavar="P",
                   help="also run the missing-piece protocol at drop probability P")

    a = sub.add_parser("ablate", parents=[common], help="sweep reverse-step fraction k and alpha")
    a.add_argument("--ks", type=_float_list, default=[1.0, 0.2, 0.1, 0.04],
                   help="comma-separated reverse fractions, e.g. 1,1/10")
    a.add_argument("--alphas", type=_float_list, default=[0.2, 0.5, 0.8, 1.0],
                   help="comma-separated noise weights")

    v = sub.add_parser("render", parents=[common], help="write the camera-ring views of a cloud as PNG")
    v.add_argument("--input", type=Path, required=True)
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "out_dir", None) is not None:
        cfg = dataclasses.replace(cfg, out_dir=str(args.out_dir))
    return cfg


def _print_rows(rows, keys):
    print("\t".join(keys))
    for r in rows:
        print("\t".join(f"{r[k]:.6g}" if isinstance(r[k], float) else str(r[k]) for k in keys))


def _cmd_reconstruct(cfg: RunConfig, args) -> None:
    from ..retarget import reconstruct

    try:
        cloud = load_cloud(args.input)
    except (OSError, CloudFormatError) as exc:
        raise UsageError(f"cannot read {args.input}: {exc}") from None
    _, model = load_models(cfg)
    try:
        normed, rec = normalize_cloud(cloud)
        out = reconstruct(model, normed, cfg.retarget, cfg.codec(), seed=args.sample_seed)
        save_cloud(args.output, rec.invert_cloud(out))
    except Exception as exc:
        raise StageError("reconstruct", str(exc)) from exc
    print(f"wrote {len(out)} points to {args.output}")


def _cmd_render(cfg: RunConfig, args) -> None:
    try:
        cloud = load_cloud(args.input)
    except (OSError, CloudFormatError) as exc:
        raise UsageError(f"cannot read {args.input}: {exc}") from None
    out_dir = Path(cfg.out_dir) / "views"
    out_dir.mkdir(parents=True, exist_ok=True)
    codec = cfg.codec()
    try:
        normed, _ = normalize_cloud(cloud)
        views = render_views(normed, codec.cameras, codec.splat_px)
    except Exception as exc:
        raise StageError("render", str(exc)) from exc
    for i, view in enumerate(views):
        save_view_png(out_dir / f"{args.input.stem}_view{i}.png", view)
    print(f"wrote {len(views)} views to {out_dir}")


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        cmd = args.command
        if cmd in ("gen-data", "train-prior", "retarget"):
            run_stages(cfg, cmd)
            print(f"{cmd}: done ({cfg.out_dir}, config {cfg.config_hash()})")
        elif cmd == "eval":
            res = run_experiment(cfg)
            _print_rows(res.summary, ("row", "n", "cd_mean", "cd_std", "precision_mean", "recall_mean"))
            if args.missing_drop is not None:
                rows = missing_piece_eval(cfg, args.missing_drop, model_ft=res.finetuned)
                _print_rows(rows, ("row", "n", "cd_mean", "precision_mean", "recall_mean"))
        elif cmd == "ablate":
            rows = ablation_sweep(cfg, args.ks, args.alphas)
            _print_rows(rows, ("k", "alpha", "n", "cd_gt", "cd_input", "precision", "recall"))
        elif cmd == "reconstruct":
            _cmd_reconstruct(cfg, args)
        elif cmd == "render":
            _cmd_render(cfg, args)
    except (ConfigError, UsageError) as exc:
        print(f"fracflow: error: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"fracflow: stage {exc.stage} failed: {exc.message}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything unexpected still reports its stage
        print(f"fracflow: stage {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
