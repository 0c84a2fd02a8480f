"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, Modules, RunConfig, load_config
from .flowedit import residual_diagnostic, step_noises
from .pipeline import (CHECKPOINT_NAMES, EditRequest, ablate, ablation_medians, add_hat_requests, edit,
                       load_models, write_ablation_csv)
from .rasi import calibrate
from .toy.nets import DenseVelocityNet, load_checkpoint
from .toy.shapes import embed_condition, gen_shape, null_condition
from .toy.training import train_toy

log = logging.getLogger("velocity_edit")

TRAIN_COMMANDS = {"train-dense": "dense", "train-sparse-geo": "geometry", "train-sparse-mat": "material"}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="velocity-edit", description="Velocity-space editing on a toy shape world.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("train-dense", "train the dense stage-1 toy net"),
                        ("train-sparse-geo", "train the sparse geometry toy net"),
                        ("train-sparse-mat", "train the sparse material toy net"),
                        ("edit", "run one edit request"),
                        ("ablate", "run the module ablation on add-hat edits"),
                        ("probe", "dump calibration losses and residual diagnostics"),
                        ("report", "render images from an edit output directory")]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path, help="JSON config file")
        s.add_argument("--seed", type=int, help="override the seed from the config")
        s.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        s.add_argument("--modules", help="comma-separated subset of rasi,pmg,tar ('' for plain FlowEdit)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args) -> RunConfig:
    run = load_config(args.config) if args.config is not None else RunConfig()
    if args.modules is not None:
        run = dataclasses.replace(run, edit_config=run.edit_config.with_modules(Modules.parse(args.modules)))
    return run


def _models(run: RunConfig):
    if run.checkpoints is None:
        raise ConfigError("config has no 'checkpoints' directory")
    return load_models(run.checkpoints)


def cmd_train(args, run: RunConfig) -> None:
    kind = TRAIN_COMMANDS[args.command]
    cfg = run.training[kind]
    seed = cfg.seed if args.seed is None else args.seed
    start = time.perf_counter()
    result, before, after = train_toy(kind, cfg.steps, cfg.hidden, cfg.lr, cfg.batch, seed, cfg.weighting)
    seconds = time.perf_counter() - start
    args.out.mkdir(parents=True, exist_ok=True)
    result.net.save(args.out / CHECKPOINT_NAMES[kind])
    result.write_csv(args.out / f"{kind}_loss.csv")
    summary = {"kind": kind, "steps": cfg.steps, "seed": seed, "val_loss_initial": before,
               "val_loss_final": after, "seconds": seconds}
    (args.out / f"{kind}_training.json").write_text(json.dumps(summary, indent=2))
    print(f"{kind}: validation loss {before:.4f} -> {after:.4f} in {seconds:.1f}s")


def cmd_edit(args, run: RunConfig) -> None:
    spec = run.edit
    seed = spec.seed if args.seed is None else args.seed
    models = _models(run)
    report = edit(EditRequest(spec.source, spec.target, seed, run.edit_config), models)
    out, res = args.out, report.output
    out.mkdir(parents=True, exist_ok=True)
    io.save_grid(out / "x_src.grid", gen_shape(spec.source).stage1)
    io.save_grid(out / "z_edit.grid", res.z_edit)
    io.save_slat(out / "geometry.slat", res.geometry)
    io.save_slat(out / "material.slat", res.material)
    if res.phi_cache is not None:
        res.phi_cache.save(out / "phi_cache.bin")
    for name, stage in (("geometry", res.geometry_stage), ("material", res.material_stage)):
        if stage is not None:
            stage.field.write_csv(out / f"agreement_{name}.csv")
    (out / "metrics.json").write_text(report.metrics_json())
    _write_rows(out / "steps.csv", report.step_trace)
    (out / "invocations.txt").write_text("\n".join(res.log) + "\n")
    print(report.metrics_json())


def _write_rows(path, rows: list[dict]) -> None:
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r.get(k), float) else r.get(k, "") for k in keys])


def cmd_ablate(args, run: RunConfig) -> None:
    seed = run.ablation.seed if args.seed is None else args.seed
    models = _models(run)
    rows = ablate(add_hat_requests(run.ablation.pairs, seed, run.edit_config), models)
    args.out.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(args.out / "ablation.csv", rows)
    medians = ablation_medians(rows)
    (args.out / "ablation_medians.json").write_text(json.dumps(medians, indent=2))
    for label, m in medians.items():
        print(f"{label:24s} " + " ".join(f"{k}={v:.4f}" for k, v in m.items()))


def cmd_probe(args, run: RunConfig) -> None:
    """Per active step: calibration losses and the guidance-asymmetry residual at the
    built-in null embedding and at the calibrated one."""
    if run.checkpoints is None:
        raise ConfigError("config has no 'checkpoints' directory")
    field = DenseVelocityNet(load_checkpoint(Path(run.checkpoints) / CHECKPOINT_NAMES["dense"]))
    cfg = run.edit_config
    seed = run.edit.seed if args.seed is None else args.seed
    x_src = gen_shape(run.edit.source).stage1
    c_src = embed_condition(run.edit.source)
    cache = calibrate(field, x_src, c_src, cfg.schedule, cfg.guidance, cfg.rasi, S=cfg.sampling.S, seed=seed)
    phi0 = null_condition()
    rows = []
    for k, e in sorted(cache.entries.items()):
        t = cfg.schedule.t(k)
        eps = step_noises(seed, k, 1, x_src.shape)[0]
        _, rhs0, gap0 = residual_diagnostic(field, x_src, c_src, phi0, cfg.guidance, t, eps)
        _, rhs1, gap1 = residual_diagnostic(field, x_src, c_src, e.phi, cfg.guidance, t, eps)
        rows.append({"step": k, "t": t, "loss_initial": e.loss_initial, "loss_final": e.loss_final,
                     "inner_steps": e.inner_steps, "accepted": int(e.accepted), "gap": max(gap0, gap1),
                     "residual_norm_null": float(np.linalg.norm(rhs0)),
                     "residual_norm_calibrated": float(np.linalg.norm(rhs1))})
    args.out.mkdir(parents=True, exist_ok=True)
    _write_rows(args.out / "probe.csv", rows)
    cache.save(args.out / "phi_cache.bin")
    print(f"wrote {len(rows)} rows to {args.out / 'probe.csv'}")


def cmd_report(args, run: RunConfig) -> None:
    out = args.out
    if not (out / "z_edit.grid").exists():
        raise FileNotFoundError(f"{out} holds no edit output (run `edit --out {out}` first)")
    for name in ("x_src", "z_edit"):
        io.render_occupancy(out / f"{name}.pgm", io.load_grid(out / f"{name}.grid"))
    R = io.load_grid(out / "z_edit.grid").shape[-1]
    for name in ("geometry", "material"):
        path = out / f"agreement_{name}.csv"
        if path.exists():
            coords, _, p = io.read_agreement_csv(path)
            io.render_heat(out / f"agreement_{name}.pgm", coords, p, R)
    print(f"rendered images into {out}")


COMMANDS = {**{k: cmd_train for k in TRAIN_COMMANDS}, "edit": cmd_edit, "ablate": cmd_ablate,
            "probe": cmd_probe, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = _config(args)
        COMMANDS[args.command](args, run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
