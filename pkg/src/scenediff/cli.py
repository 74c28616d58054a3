"""Command-line surface tying the pipeline together.

Subcommands: ``complete`` (scan completion), ``generate`` (unconditional
generation from shape templates), ``eval`` (metric suite on a cloud pair),
``ablate`` (start-step / solver-step sweeps), ``train-toy`` (train the small
denoiser on the synthetic scene).

Configuration precedence is defaults < config file < explicit flags; the
fully resolved configuration is written to a manifest next to the outputs of
every run. Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cloud import (
    PointCloud,
    disc_augment,
    duplicate,
    estimate_ground_height,
    farthest_point_sample,
    range_crop,
    uniform_sample,
)
from .dataio import ParseError, read_cloud, read_scan, write_cloud
from .denoiser import (
    DenoiserQuery,
    GaussianOracleDenoiser,
    ToyDenoiser,
    noise_stats,
)
from .errors import NumericalError
from .metrics import evaluate_pair, write_reports_csv
from .sampler_global import SamplerConfig, fast_solve, forward_noise, sample
from .sampler_local import LocalRegConfig, sample_local, train_step_local
from .schedule import NoiseSchedule
from .synthetic import (
    GENERATION_TEMPLATES,
    make_room_scene,
    template_cloud,
    two_cluster_observed,
    two_cluster_scene,
    virtual_scan,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


# ---------------------------------------------------------------------------
# configuration plumbing

_SCHED = {"beta_start": 3.5e-5, "beta_end": 0.007, "t_steps": 1000}
_SAMPLING = {
    "t0": 300,
    "gamma": 6.0,
    "k_dup": 10,
    "steps": 20,
    "ancestral": False,
    "sampler": "global",
    "seed": 0,
    "denoiser": "toy",
    "params": None,
    "hidden": "48,48",
    "norm_mode": "instance",
    "oracle_mean": "0,0,0",
    "oracle_var": 1.0,
    **_SCHED,
}
_PREPROC = {
    "crop_range": 50.0,
    "budget_sparse": 18_000,
    "budget_dense": 180_000,
    "disc_points": 1000,
    "disc_radius": 3.5,
    "ground_z": None,
}

DEFAULTS = {
    "complete": {
        **_SAMPLING,
        **_PREPROC,
        "scan": None,
        "synthetic_seed": 0,
        "out": "runs/complete",
    },
    "generate": {
        **_SAMPLING,
        "template": "straight",
        "template_file": None,
        "budget_dense": 180_000,
        "out": "runs/generate",
    },
    "eval": {
        "pred": None,
        "gt": None,
        "voxel_res": "0.5,0.2,0.1",
        "jsd_res": 0.5,
        "extent": 50.0,
        "scan_id": "",
        "out": "runs/eval",
    },
    "ablate": {
        **_SAMPLING,
        **_PREPROC,
        "t0_grid": "1000,500,300,100,50",
        "steps_grid": "50,20,10,5",
        "voxel_res": "0.5,0.2,0.1",
        "jsd_res": 0.5,
        "synthetic_seed": 0,
        "out": "runs/ablate",
    },
    "train-toy": {
        **_SCHED,
        "sampler": "global",
        "train_steps": 2000,
        "batch_size": 4,
        "points_per_cloud": 128,
        "lr": 5e-3,
        "cond_prob": 0.1,
        "lambda_reg": 5.0,
        "hidden": "48,48",
        "norm_mode": "instance",
        "seed": 0,
        "log_every": 100,
        "out": "runs/train_toy",
    },
}


def _parse_config_file(path) -> dict:
    """Flat key-value text format: ``key = value`` per line, ``#`` comments."""
    entries = {}
    for ln, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, val = line.split("=", 1)
        else:
            raise ValueError(f"{path}:{ln}: expected 'key = value', got {raw!r}")
        key = key.strip().replace("-", "_")
        val = val.strip()
        try:
            entries[key] = json.loads(val)
        except json.JSONDecodeError:
            entries[key] = val
    return entries


def _resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    config_path = getattr(args, "config", None)
    if config_path:
        for key, val in _parse_config_file(config_path).items():
            if key not in cfg:
                raise ValueError(f"unknown config key {key!r} for {command}")
            cfg[key] = val
    cfg.update(overrides)
    return cfg


@dataclass
class RunManifest:
    """Record of one run: resolved configuration, paths, and a content hash."""

    command: str
    config: dict
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    param_hash: str = ""

    def __post_init__(self):
        canon = json.dumps(self.config, sort_keys=True, default=str)
        self.param_hash = hashlib.sha256(canon.encode()).hexdigest()

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, default=str)
        return path


# ---------------------------------------------------------------------------
# shared pipeline pieces

def _parse_floats(text) -> list:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v != ""]


def _parse_hidden(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v != "")


def _build_schedule(cfg) -> NoiseSchedule:
    return NoiseSchedule.linear(
        float(cfg["beta_start"]), float(cfg["beta_end"]), int(cfg["t_steps"])
    )


def _build_denoiser(cfg, sched):
    if cfg["denoiser"] == "oracle":
        mean = _parse_floats(cfg["oracle_mean"])
        return GaussianOracleDenoiser(mean, float(cfg["oracle_var"]), sched)
    if cfg["denoiser"] != "toy":
        raise ValueError(f"unknown denoiser {cfg['denoiser']!r}")
    if cfg.get("params"):
        return ToyDenoiser.load_params(cfg["params"], sched)
    return ToyDenoiser(
        sched,
        hidden=_parse_hidden(cfg["hidden"]),
        norm_mode=cfg["norm_mode"],
        seed=int(cfg["seed"]),
    )


def _load_sparse_input(cfg) -> PointCloud:
    if cfg.get("scan"):
        path = Path(cfg["scan"])
        if not path.exists():
            raise ParseError(f"scan not found: {path}", path=path)
        if path.suffix.lower() == ".bin":
            return read_scan(path).points
        return read_cloud(path)
    scene = make_room_scene(seed=int(cfg["synthetic_seed"]))
    return virtual_scan(scene, seed=int(cfg["synthetic_seed"]))


def _preprocess_sparse(pc: PointCloud, cfg, rng) -> PointCloud:
    """Crop, add the ground disc, reduce to the sparse budget."""
    pc = range_crop(pc, float(cfg["crop_range"]))
    n_disc = int(cfg["disc_points"])
    if n_disc > 0:
        gz = cfg.get("ground_z")
        gz = estimate_ground_height(pc) if gz is None else float(gz)
        pc = disc_augment(pc, n_disc, float(cfg["disc_radius"]), gz, rng)
    return farthest_point_sample(pc, int(cfg["budget_sparse"]), rng)


def _run_sampler(denoiser, p_s, cfg, sched, rng) -> PointCloud:
    sampler_cfg = SamplerConfig(
        t0=int(cfg["t0"]),
        gamma=float(cfg["gamma"]),
        k_dup=int(cfg["k_dup"]),
        steps_fast=int(cfg["steps"]),
        seed=int(cfg["seed"]),
    )
    if cfg["sampler"] == "local":
        p_tilde = duplicate(p_s, sampler_cfg.k_dup)
        return sample_local(denoiser, p_tilde, sched, rng)
    if cfg["sampler"] != "global":
        raise ValueError(f"unknown sampler {cfg['sampler']!r}")
    if cfg["ancestral"]:
        return sample(denoiser, p_s, sampler_cfg, sched, rng)
    return fast_solve(denoiser, p_s, sampler_cfg, sched, rng)


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands

def cmd_complete(cfg) -> int:
    out = _out_dir(cfg)
    sched = _build_schedule(cfg)
    denoiser = _build_denoiser(cfg, sched)
    rng = np.random.default_rng(int(cfg["seed"]))
    raw = _load_sparse_input(cfg)
    p_s = _preprocess_sparse(raw, cfg, rng)
    if len(p_s) == 0:
        raise ParseError("input scan is empty after preprocessing")
    completed = _run_sampler(denoiser, p_s, cfg, sched, rng)
    cloud_path = out / "completed.ply"
    write_cloud(completed, cloud_path)
    manifest = RunManifest(
        "complete",
        cfg,
        inputs={"scan": cfg.get("scan") or f"synthetic:{cfg['synthetic_seed']}"},
        outputs={"cloud": str(cloud_path), "points": len(completed)},
    )
    manifest.write(out)
    print(f"complete: {len(completed)} points -> {cloud_path}")
    return EXIT_OK


def cmd_generate(cfg) -> int:
    out = _out_dir(cfg)
    cfg = dict(cfg)
    cfg["gamma"] = 0.0  # unconditional generation, regardless of the flag
    cfg["k_dup"] = 1
    sched = _build_schedule(cfg)
    denoiser = _build_denoiser(cfg, sched)
    rng = np.random.default_rng(int(cfg["seed"]))
    n = int(cfg["budget_dense"])
    name = cfg["template"]
    if name == "file":
        if not cfg.get("template_file"):
            raise ValueError("--template file requires --template-file")
        template = read_cloud(cfg["template_file"])
        template = uniform_sample(template, n, rng)
    elif name in GENERATION_TEMPLATES:
        template = template_cloud(name, n=n, seed=int(cfg["seed"]))
    else:
        raise ValueError(
            f"unknown template {name!r}; choose from {GENERATION_TEMPLATES + ('file',)}"
        )
    generated = _run_sampler(denoiser, template, cfg, sched, rng)
    cloud_path = out / "generated.ply"
    write_cloud(generated, cloud_path)
    manifest = RunManifest(
        "generate",
        cfg,
        inputs={"template": name},
        outputs={"cloud": str(cloud_path), "points": len(generated)},
    )
    manifest.write(out)
    print(f"generate: {len(generated)} points -> {cloud_path}")
    return EXIT_OK


def cmd_eval(cfg) -> int:
    out = _out_dir(cfg)
    if not cfg.get("pred") or not cfg.get("gt"):
        raise ValueError("eval requires --pred and --gt")
    pred = read_cloud(cfg["pred"])
    gt = read_cloud(cfg["gt"])
    if len(pred) == 0 or len(gt) == 0:
        raise ParseError("eval requires non-empty clouds")
    report = evaluate_pair(
        pred,
        gt,
        voxel_resolutions=_parse_floats(cfg["voxel_res"]),
        jsd_resolution=float(cfg["jsd_res"]),
        extent=float(cfg["extent"]),
        scan_id=str(cfg["scan_id"]),
    )
    (out / "report.json").write_text(report.to_json_line() + "\n")
    write_reports_csv([report], out / "metrics.csv")
    manifest = RunManifest(
        "eval",
        cfg,
        inputs={"pred": str(cfg["pred"]), "gt": str(cfg["gt"])},
        outputs={"report": str(out / "report.json"), "csv": str(out / "metrics.csv")},
    )
    manifest.write(out)
    print(report.to_json_line())
    return EXIT_OK


def cmd_ablate(cfg) -> int:
    out = _out_dir(cfg)
    sched = _build_schedule(cfg)
    denoiser = _build_denoiser(cfg, sched)
    t0_grid = [int(v) for v in _parse_floats(cfg["t0_grid"])]
    steps_grid = [int(v) for v in _parse_floats(cfg["steps_grid"])]
    resolutions = _parse_floats(cfg["voxel_res"])

    scene = make_room_scene(seed=int(cfg["synthetic_seed"]))
    raw = virtual_scan(scene, seed=int(cfg["synthetic_seed"]))
    gt = uniform_sample(
        range_crop(scene, float(cfg["crop_range"])),
        int(cfg["budget_dense"]),
        seed=int(cfg["seed"]),
    )

    reports = []
    rows = []
    for t0 in t0_grid:
        for steps in steps_grid:
            cell = dict(cfg, t0=t0, steps=steps)
            rng = np.random.default_rng(int(cfg["seed"]))
            p_s = _preprocess_sparse(raw, cell, rng)
            completed = _run_sampler(denoiser, p_s, cell, sched, rng)
            report = evaluate_pair(
                completed,
                gt,
                voxel_resolutions=resolutions,
                jsd_resolution=float(cfg["jsd_res"]),
                extent=float(cfg["crop_range"]),
                scan_id=f"t0={t0},steps={steps}",
            )
            reports.append(report)
            rows.append((t0, steps, report))
            print(report.to_json_line())
    write_reports_csv(reports, out / "ablation.csv")
    manifest = RunManifest(
        "ablate",
        cfg,
        inputs={"scene": f"synthetic:{cfg['synthetic_seed']}"},
        outputs={"csv": str(out / "ablation.csv"), "cells": len(rows)},
    )
    manifest.write(out)
    return EXIT_OK


def cmd_train_toy(cfg) -> int:
    out = _out_dir(cfg)
    sched = _build_schedule(cfg)
    local = cfg["sampler"] == "local"
    denoiser = ToyDenoiser(
        sched,
        hidden=_parse_hidden(cfg["hidden"]),
        norm_mode=cfg["norm_mode"],
        cond_prob=float(cfg["cond_prob"]),
        seed=int(cfg["seed"]),
    )
    lam = float(cfg["lambda_reg"])
    reg = LocalRegConfig(lam) if local and lam > 0 else None
    rng = np.random.default_rng(int(cfg["seed"]))
    n_steps = int(cfg["train_steps"])
    batch_size = int(cfg["batch_size"])
    n_pts = int(cfg["points_per_cloud"])
    lr = float(cfg["lr"])
    log_every = max(int(cfg["log_every"]), 1)

    params_path = out / "params.bin"
    log_rows = [("step", "loss", "pred_mean", "pred_std")]
    window = []
    try:
        for step in range(1, n_steps + 1):
            if local:
                batch = [two_cluster_scene(n_pts, seed=rng) for _ in range(batch_size)]
                loss = train_step_local(denoiser, batch, reg, lr, seed=rng)
            else:
                batch = [
                    (
                        two_cluster_scene(n_pts, seed=rng),
                        two_cluster_observed(n_pts // 2, seed=rng),
                    )
                    for _ in range(batch_size)
                ]
                loss = denoiser.train_step(batch, lr, seed=rng)
            window.append(loss)
            if step % log_every == 0:
                mean, std = _probe_noise_stats(denoiser, sched, rng)
                log_rows.append((step, float(np.mean(window)), mean, std))
                print(
                    f"step {step}: loss={np.mean(window):.4f} "
                    f"pred_mean={mean:+.4f} pred_std={std:.4f}"
                )
                window = []
                denoiser.save_params(params_path)
    except NumericalError as err:
        # parameters are still the last finite state: the step that diverged
        # never commits its update
        denoiser.save_params(params_path)
        _write_train_log(log_rows, out)
        print(f"training diverged: {err}; last checkpoint kept at {params_path}")
        return EXIT_NUMERIC
    denoiser.save_params(params_path)
    _write_train_log(log_rows, out)
    manifest = RunManifest(
        "train-toy",
        cfg,
        inputs={"scene": "two-cluster"},
        outputs={"params": str(params_path), "log": str(out / "train_log.csv")},
    )
    manifest.write(out)
    print(f"train-toy: saved parameters -> {params_path}")
    return EXIT_OK


def _probe_noise_stats(denoiser, sched, rng):
    queries = []
    for t in (50, 300, 800):
        t = min(t, sched.T)
        x0 = two_cluster_scene(512, seed=rng)
        queries.append(DenoiserQuery(forward_noise(x0, t, sched, rng), t, None))
    return noise_stats(denoiser, queries)


def _write_train_log(rows, out_dir):
    lines = [",".join(str(v) for v in row) for row in rows]
    (Path(out_dir) / "train_log.csv").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)


def _add_schedule_args(p):
    p.add_argument("--beta-start", dest="beta_start", type=float)
    p.add_argument("--beta-end", dest="beta_end", type=float)
    p.add_argument("--t-steps", dest="t_steps", type=int)


def _add_sampling_args(p):
    _add_schedule_args(p)
    p.add_argument("--t0", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--k-dup", dest="k_dup", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--ancestral", action="store_true")
    p.add_argument("--sampler", choices=["global", "local"])
    p.add_argument("--denoiser", choices=["toy", "oracle"])
    p.add_argument("--params", help="trained parameter file for the toy denoiser")
    p.add_argument("--hidden", help="comma-separated hidden widths")
    p.add_argument("--norm-mode", dest="norm_mode", choices=["instance", "batch"])
    p.add_argument("--oracle-mean", dest="oracle_mean")
    p.add_argument("--oracle-var", dest="oracle_var", type=float)


def _add_preproc_args(p):
    p.add_argument("--crop-range", dest="crop_range", type=float)
    p.add_argument("--budget-sparse", dest="budget_sparse", type=int)
    p.add_argument("--budget-dense", dest="budget_dense", type=int)
    p.add_argument("--disc-points", dest="disc_points", type=int)
    p.add_argument("--disc-radius", dest="disc_radius", type=float)
    p.add_argument("--ground-z", dest="ground_z", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenediff",
        description="Scene-scale point-cloud diffusion for lidar completion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("complete", help="complete a sparse scan")
    _add_common(p)
    _add_sampling_args(p)
    _add_preproc_args(p)
    p.add_argument("--scan", help="input scan (.bin or .ply); synthetic scene if omitted")
    p.add_argument("--synthetic-seed", dest="synthetic_seed", type=int)

    p = sub.add_parser("generate", help="unconditional generation from a template")
    _add_common(p)
    _add_sampling_args(p)
    p.add_argument("--template", choices=list(GENERATION_TEMPLATES) + ["file"])
    p.add_argument("--template-file", dest="template_file")
    p.add_argument("--budget-dense", dest="budget_dense", type=int)

    p = sub.add_parser("eval", help="metric suite for a prediction/target pair")
    _add_common(p)
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--voxel-res", dest="voxel_res")
    p.add_argument("--jsd-res", dest="jsd_res", type=float)
    p.add_argument("--extent", type=float)
    p.add_argument("--scan-id", dest="scan_id")

    p = sub.add_parser("ablate", help="sweep start step and solver steps")
    _add_common(p)
    _add_sampling_args(p)
    _add_preproc_args(p)
    p.add_argument("--t0-grid", dest="t0_grid")
    p.add_argument("--steps-grid", dest="steps_grid")
    p.add_argument("--voxel-res", dest="voxel_res")
    p.add_argument("--jsd-res", dest="jsd_res", type=float)
    p.add_argument("--synthetic-seed", dest="synthetic_seed", type=int)

    p = sub.add_parser("train-toy", help="train the toy denoiser on the synthetic scene")
    _add_common(p)
    _add_schedule_args(p)
    p.add_argument("--sampler", choices=["global", "local"])
    p.add_argument("--train-steps", dest="train_steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--points-per-cloud", dest="points_per_cloud", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--cond-prob", dest="cond_prob", type=float)
    p.add_argument("--lambda-reg", dest="lambda_reg", type=float)
    p.add_argument("--hidden")
    p.add_argument("--norm-mode", dest="norm_mode", choices=["instance", "batch"])
    p.add_argument("--log-every", dest="log_every", type=int)

    return parser


_COMMANDS = {
    "complete": cmd_complete,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "train-toy": cmd_train_toy,
}


def main(argv=None) -> int:
    parser = build_parser()
    ns, unknown = parser.parse_known_args(argv)
    if unknown:
        print(f"error: unknown arguments {unknown}", file=sys.stderr)
        return EXIT_USAGE
    args = argparse.Namespace(
        **{k: v for k, v in vars(ns).items() if v is not None and v is not False}
    )
    if not hasattr(args, "command"):
        args.command = ns.command
    try:
        cfg = _resolve_config(ns.command, args)
        return _COMMANDS[ns.command](cfg)
    except ParseError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
