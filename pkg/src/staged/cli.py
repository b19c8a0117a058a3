"""Command-line entry point: ``staged <subcommand> [flags]``.

Failures print a single ``error: <ExceptionClass>: <message>`` line on stderr
and exit 1; argument errors print usage and exit 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .analysis import (eval_fit, extract_attention_series, prediction_dataset, recovery_metrics,
                       series_from_rollout, write_plot_csv)
from .data import (RunConfig, load_dataset, load_grn_specs, load_lr_catalog, load_placements, load_run_config,
                   save_dataset)
from .errors import StagedError
from .graph import dump_graph
from .model import ModelStructure, load_checkpoint, rollout
from .sim import assemble_tissue, simulate
from .train import train

log = logging.getLogger("staged")


def _add_config_flags(p: argparse.ArgumentParser, skip=()) -> None:
    g = p.add_argument_group("run config overrides")
    for f in dataclasses.fields(RunConfig):
        if f.name in skip:
            continue
        flags = [f"--{f.name.replace('_', '-')}"]
        if "_" in f.name:
            flags.append(f"--{f.name}")
        g.add_argument(*flags, dest=f"cfg_{f.name}", default=None, metavar=f.type.upper())


def _config(args) -> RunConfig:
    cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    over = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return cfg.replace(**over)


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _dump_graphs(st: ModelStructure, positions, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for c, nbrs in enumerate(st.neighbor_sets(positions)):
        dump_graph(st.cell_graph(c, nbrs), out / f"{st.cells[c]}.csv")


# ---------------------------------------------------------------------------


def cmd_simulate(args) -> None:
    specs = load_grn_specs(args.grn)
    catalog = load_lr_catalog(args.lr) if args.lr else ()
    model = assemble_tissue(specs, load_placements(args.placements), catalog, args.neighborhood,
                            eq2_sign_as_printed=args.eq2_sign_as_printed)
    n = int(round(args.t_end / args.dt))
    grid = np.round(np.arange(n + 1) * args.dt, 12)
    ds = simulate(model, grid, args.integrator, args.noise_sigma, args.seed, dt=args.substep)
    save_dataset(ds, args.out)


def cmd_train(args) -> None:
    cfg = _config(args)
    ds = load_dataset(args.data, normalize=args.normalize)
    specs = load_grn_specs(args.grn)
    catalog = load_lr_catalog(args.lr) if args.lr else ()
    if args.dump_graphs:
        _dump_graphs(ModelStructure.from_dataset(ds, specs, catalog, cfg), ds.positions[0], args.dump_graphs)
    state = train(ds, cfg, specs, catalog, checkpoint=args.out, log_path=args.log)
    log.info("best epoch %d val mse %.6g", state.best_epoch, state.best_val)


def cmd_rollout(args) -> None:
    ck = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    st = ck.structure_for(ds)
    if args.dump_graphs:
        _dump_graphs(st, ds.positions[0], args.dump_graphs)
    result = rollout(ds, ck.params, ck.config, ck.specs, ck.catalog, structure=st, record=bool(args.attention))
    save_dataset(prediction_dataset(ds, result.pred), args.out)
    if args.attention:
        series_from_rollout(result, ds.cell_type).to_csv(args.attention)
    if args.plot:
        write_plot_csv(result, ds, args.plot)


def cmd_infer_grn(args) -> None:
    ck = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    series, result = extract_attention_series(ck, ds)
    series.to_csv(args.out)
    if args.report:
        truth = load_grn_specs(args.truth) if args.truth else ck.specs
        _write_json(recovery_metrics(series, truth, result, ds).to_dict(), args.report)


def cmd_eval(args) -> None:
    pred = load_dataset(args.pred)
    obs = load_dataset(args.obs)
    rows = eval_fit(pred, obs)
    _write_json({"fit": [dataclasses.asdict(r) for r in rows]}, args.out)
    if args.plot:
        write_plot_csv(pred, obs, args.plot)


def cmd_bench(args) -> None:
    over = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    cfg = bench.default_config(args.seed).replace(**over)
    report = bench.run_bench(args.out_dir, args.seed, cfg)
    log.info("val/var %.4g, rollout mse %.4g", report["val_mse_ratio"], report["rollout_mse"])


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="staged", description="Spatial GRN simulation and attention-based GDE learning.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="integrate a coupled GRN tissue to a trajectory CSV")
    p.add_argument("--grn", required=True)
    p.add_argument("--placements", required=True, help="CSV cell_id,cell_type,x,y")
    p.add_argument("--lr", help="ligand-receptor catalog JSON")
    p.add_argument("--t-end", type=float, required=True)
    p.add_argument("--dt", type=float, required=True, help="output frame spacing")
    p.add_argument("--substep", type=float, default=None, help="internal integration step (default: --dt)")
    p.add_argument("--integrator", choices=("rk4", "euler"), default="rk4")
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--neighborhood", default="knn:2")
    p.add_argument("--eq2-sign-as-printed", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="fit model parameters to a trajectory CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--grn", required=True)
    p.add_argument("--lr", help="ligand-receptor catalog JSON")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-epoch CSV log")
    p.add_argument("--normalize", action="store_true", help="per-gene max normalization")
    p.add_argument("--dump-graphs", help="directory for per-cell edge lists at the first frame")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="closed-loop prediction from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="predicted trajectory CSV (warm-up frames copied)")
    p.add_argument("--attention", help="attention CSV")
    p.add_argument("--plot", help="plot-ready trajectory CSV")
    p.add_argument("--dump-graphs")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("infer-grn", help="export time-resolved attention networks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="attention CSV")
    p.add_argument("--truth", help="ground-truth GRN JSON (default: the checkpoint's prior)")
    p.add_argument("--report", help="recovery report JSON")
    p.set_defaults(func=cmd_infer_grn)

    p = sub.add_parser("eval", help="Spearman and MSE of predicted vs observed trajectories")
    p.add_argument("--pred", required=True)
    p.add_argument("--obs", required=True)
    p.add_argument("--out", required=True, help="JSON table")
    p.add_argument("--plot")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run the canonical two-type benchmark end to end")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p, skip=("seed",))
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (StagedError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        msg = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
