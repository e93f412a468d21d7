"""Command-line driver: ``meta``, ``eval``, ``export`` and ``analyze``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
arguments, 3 divergence during meta-training (partial metrics are kept).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from ..metrics import MetricsError, MetricsLog
from . import svg
from .analysis import UnsupportedFamilyError, report_analysis
from .artifact import ArtifactError, load_artifact
from .config import ConfigError, load_config
from .runner import DivergenceError, build_dataset, check_compatible, run_eval, run_meta

OUT_DIR_ENV = "COMMENTARIES_OUT_DIR"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("commentaries")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="commentaries", description="Learn and evaluate commentaries.")
    p.add_argument("--seed", type=int, default=None, help="override seeds.meta")
    p.add_argument("--out-dir", default=None, help=f"output directory (overrides ${OUT_DIR_ENV} and output.dir)")
    p.add_argument("--quiet", action="store_true", help="only report errors")
    sub = p.add_subparsers(dest="command", required=True)
    m = sub.add_parser("meta", help="meta-train a commentary")
    m.add_argument("--config", required=True)
    e = sub.add_parser("eval", help="train fresh students with a frozen commentary")
    e.add_argument("--artifact", required=True)
    e.add_argument("--config", required=True)
    x = sub.add_parser("export", help="render a metrics file as CSV or SVG")
    x.add_argument("--metrics", required=True)
    x.add_argument("--format", choices=("csv", "svg"), required=True)
    x.add_argument("--column", default="val_loss", choices=("train_loss", "val_loss", "test_acc"))
    a = sub.add_parser("analyze", help="write the family-specific analysis of a commentary")
    a.add_argument("--artifact", required=True)
    a.add_argument("--config", required=True)
    return p


def _out_dir(args, cfg=None) -> Path:
    if args.out_dir:
        return Path(args.out_dir)
    if os.environ.get(OUT_DIR_ENV):
        return Path(os.environ[OUT_DIR_ENV])
    if cfg is not None:
        return Path(cfg.output.dir)
    return Path(".")


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.override(seeds__meta=args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(message)s")
    try:
        if args.command == "meta":
            cfg = _config(args)
            out = _out_dir(args, cfg)
            res = run_meta(cfg, out)
            final = res.metrics.rows[-1]
            log.info("wrote %s and %s (final validation loss %.6g)", res.artifact_path, res.metrics_path,
                     final.val_loss)
        elif args.command == "eval":
            cfg = _config(args)
            out = _out_dir(args, cfg)
            metrics = run_eval(load_artifact(args.artifact), cfg, out)
            for phase in metrics.phases():
                last = {}
                for r in metrics.select(phase):
                    last[r.seed] = r
                vals = [r.val_loss for r in last.values()]
                log.info("%s: mean final validation loss %.6g", phase, sum(vals) / len(vals))
        elif args.command == "export":
            metrics = MetricsLog.read_csv(args.metrics)
            if not len(metrics):
                raise MetricsError("refusing to export an empty log")
            out = _out_dir(args)
            out.mkdir(parents=True, exist_ok=True)
            stem = Path(args.metrics).stem
            if args.format == "csv":
                path = metrics.write_csv(out / f"{stem}_export.csv")
            else:
                path = svg.write_text(svg.metrics_chart(metrics, args.column), out / f"{stem}_{args.column}.svg")
            log.info("wrote %s", path)
        else:
            cfg = _config(args)
            artifact = load_artifact(args.artifact)
            dataset = build_dataset(cfg)
            check_compatible(artifact, cfg, dataset)
            paths = report_analysis(artifact, dataset, _out_dir(args, cfg))
            for p in paths:
                log.info("wrote %s", p)
    except ConfigError as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    except DivergenceError as exc:
        log.error("diverged: %s (%d metric rows kept)", exc, len(exc.metrics))
        return EXIT_DIVERGED
    except (ArtifactError, MetricsError, UnsupportedFamilyError, OSError) as exc:
        log.error("error: %s", exc)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
