"""The canonical two-type, seven-cell oscillatory benchmark."""

from __future__ import annotations

import numpy as np

from .data import GrnSpec, LrPair, RunConfig, parse_grn_spec

GENES = tuple(f"g{i}" for i in range(1, 7))

# Kinetic constants fixed by sweeping the single-cell ring with a fine-step
# RK4 reference until every gene showed sustained oscillation.
TYPE_A = dict(k_act=2.0, k_rep=1.0, decay=1.0, init={"g1": 0.9, "g2": 0.3})
TYPE_B = dict(k_act=2.4, k_rep=1.5, decay=1.5, init={"g1": 0.9, "g6": 0.3})

PLACEMENTS = (
    ("c0", "A", (0.34, 0.95)),
    ("c1", "A", (3.21, 2.33)),
    ("c2", "A", (0.38, 1.73)),
    ("c3", "A", (1.92, 0.64)),
    ("c4", "B", (2.94, 0.45)),
    ("c5", "B", (1.56, 2.07)),
    ("c6", "B", (1.72, 2.35)),
)

LR_CATALOG = (LrPair("g4", "g1", "activation", 0.5),)

SIM_NEIGHBORHOOD = "knn:2"
T_END = 30.0
FRAME_DT = 0.5
SIM_DT = 0.05
NOISE_SIGMA = 0.02


def ring_spec(order, k_act: float, k_rep: float, decay: float, init: dict) -> GrnSpec:
    """Circular activation chain over ``order``; each gene is also linearly
    repressed by the gene opposite it on the ring."""
    edges = []
    n = len(order)
    for i in range(n):
        edges.append(dict(source=order[i], target=order[(i + 1) % n], kind="activation", rate_constant=k_act))
        edges.append(dict(source=order[(i + n // 2) % n], target=order[i], kind="repression", rate_constant=k_rep))
    return parse_grn_spec(dict(genes=list(GENES), edges=edges, decay={g: decay for g in GENES}, init=init,
                               ligands=["g4"], receptors=["g1"]))


def type_specs() -> dict[str, GrnSpec]:
    return {
        "A": ring_spec(GENES, TYPE_A["k_act"], TYPE_A["k_rep"], TYPE_A["decay"], TYPE_A["init"]),
        "B": ring_spec(GENES[::-1], TYPE_B["k_act"], TYPE_B["k_rep"], TYPE_B["decay"], TYPE_B["init"]),
    }


def t_grid() -> np.ndarray:
    return np.round(np.arange(0.0, T_END + FRAME_DT / 2, FRAME_DT), 10)


def default_config(seed: int = 7) -> RunConfig:
    return RunConfig(
        neighborhood=SIM_NEIGHBORHOOD,
        lag_gg=0, lag_gl=0, lag_lr=1, lag_rg=0,
        integrator="euler",
        learning_rate=0.01,
        epochs=300,
        seed=seed,
        window=8,
        window_stride=2,
        hidden=8,
        mlp_width=32,
        time_scale=1.0 / T_END,
        noise_sigma=NOISE_SIGMA,
    )


def simulate_benchmark(seed: int = 7):
    """Noisy observed trajectories of the canonical tissue."""
    from .sim import assemble_tissue, simulate

    model = assemble_tissue(type_specs(), PLACEMENTS, LR_CATALOG, SIM_NEIGHBORHOOD)
    return simulate(model, t_grid(), "rk4", NOISE_SIGMA, seed, dt=SIM_DT)


def run_bench(out_dir, seed: int = 7, config: RunConfig | None = None) -> dict:
    """Simulate, train, roll out, extract attention and score; every artifact lands in ``out_dir``.

    The report holds no wall-clock values, so equal seeds give byte-identical reports.
    """
    import json
    from pathlib import Path

    from .analysis import (eval_fit, extract_attention_series, prediction_dataset, recovery_metrics,
                           write_plot_csv)
    from .data import dump_grn_specs, dump_lr_catalog, save_dataset, save_placements, save_run_config
    from .model import load_checkpoint
    from .train import loss, split_frames, train

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = config or default_config(seed)
    specs = type_specs()
    ds = simulate_benchmark(seed)
    save_dataset(ds, out / "data.csv")
    save_placements(PLACEMENTS, out / "placements.csv")
    (out / "grn.json").write_text(json.dumps(dump_grn_specs(specs), indent=2, sort_keys=True) + "\n")
    (out / "lr.json").write_text(json.dumps(dump_lr_catalog(LR_CATALOG), indent=2, sort_keys=True) + "\n")
    save_run_config(cfg, out / "config.ini")

    state = train(ds, cfg, specs, LR_CATALOG, checkpoint=str(out / "checkpoint.npz"), log_path=out / "train_log.csv")
    ck = load_checkpoint(out / "checkpoint.npz")
    series, result = extract_attention_series(ck, ds)
    series.to_csv(out / "attention.csv")
    save_dataset(prediction_dataset(ds, result.pred), out / "pred.csv")
    write_plot_csv(result, ds, out / "trajectories.csv")

    split = split_frames(ds.n_frames, result.t_init, cfg.val_fraction)
    val_obs = ds.expression[split.n_train:]
    recovery = recovery_metrics(series, specs, result, ds)
    report = {
        "seed": seed,
        "config": cfg.to_dict(),
        "best_epoch": state.best_epoch,
        "best_val_mse": state.best_val,
        "val_variance": float(val_obs.var()),
        "val_mse_ratio": state.best_val / float(val_obs.var()),
        "rollout_mse": loss(result, ds).total,
        "fit": [dict(cell_type=r.cell_type, gene=r.gene, spearman=r.spearman, mse=r.mse)
                for r in eval_fit(result, ds)],
        "recovery": recovery.to_dict(),
        "train_mse_history": state.train_loss,
        "val_mse_history": state.val_loss,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
