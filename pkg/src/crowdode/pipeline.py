"""Experiment lifecycle: generate data, train, simulate, evaluate.

Each command writes into one output directory that always contains
``config.yaml`` and ``manifest.json``. The manifest carries the config digest
and an output digest built only from deterministic content, so rerunning a
command with the same config and inputs reproduces it exactly.

Seed derivation, all from ``RunConfig.seed``:

* data run ``i``: ``seed + i``
* training shuffle in epoch ``e``: ``seed + e``; network init: ``model.init_seed`` or ``seed``
* Monte Carlo evaluation run ``i``: ``seed + EVAL_SEED_OFFSET + i``
* short-horizon ADE run ``i``: ``seed + ADE_SEED_OFFSET + i``
* ``simulate`` run ``i``: ``seed + SIM_SEED_OFFSET + i``
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from pathlib import Path

from crowdode.config import RunConfig, dump_config
from crowdode.dynamics import IntegratorConfig, read_trajectory, write_trajectory
from crowdode.forcefield import init_force_field, load_checkpoint, save_checkpoint
from crowdode.metrics import (compare_models, default_ice_grid, learned_simulator,
                              monte_carlo_eval, orca_simulator, sfm_simulator,
                              short_horizon_ade, write_histogram_csv, write_ice_csv,
                              write_report)
from crowdode.orca import generate_orca_dataset
from crowdode.scene import sample_initial_state
from crowdode.sfm import generate_sfm_dataset
from crowdode.training import slice_windows, train

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 100_000
ADE_SEED_OFFSET = 200_000
SIM_SEED_OFFSET = 300_000


class ManifestError(ValueError):
    """A manifest or the files it lists could not be parsed."""


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _write_manifest(out: Path, kind: str, cfg: RunConfig, body: dict) -> dict:
    manifest = {"kind": kind, "config_digest": cfg.digest(), **body}
    manifest["digest"] = _digest(manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _prepare(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _record_every(interval: float, step: float) -> int:
    return max(1, int(round(interval / step)))


def read_manifest(path) -> dict:
    path = Path(path)
    text = path.read_text()
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    if not isinstance(manifest, dict) or "kind" not in manifest:
        raise ManifestError(f"{path}:1: not a manifest (missing 'kind')")
    return manifest


# --- gen-data ----------------------------------------------------------------

def gen_data(cfg: RunConfig, out, source: str | None = None) -> dict:
    source = source or cfg.data.source
    if source not in ("sfm", "orca"):
        raise ValueError(f"unknown source {source!r}")
    d = cfg.data
    scene = cfg.scene.build()
    if source == "sfm":
        every = _record_every(d.record_interval, cfg.sfm.step)
        trajs = generate_sfm_dataset(scene, cfg.sfm, d.n_agents, d.n_runs, cfg.seed,
                                     t_max=d.t_max, record_every=every,
                                     spawn_mode=d.spawn_mode, min_separation=d.min_separation)
    else:
        every = _record_every(d.record_interval, cfg.orca.step)
        trajs = generate_orca_dataset(scene, cfg.orca, d.n_agents, d.n_runs, cfg.seed,
                                      t_max=d.t_max, record_every=every,
                                      spawn_mode=d.spawn_mode, min_separation=d.min_separation)
    out = _prepare(out)
    dump_config(cfg, out / "config.yaml")
    files = []
    for i, traj in enumerate(trajs):
        name = f"traj_{i:04d}.csv"
        write_trajectory(traj, out / name, {"source": source, "run": i})
        files.append({"path": name, "seed": cfg.seed + i, "n_agents": traj.n_agents,
                      "sha256": sha256_file(out / name),
                      "meta_sha256": sha256_file(out / (name + ".meta.json"))})
    return _write_manifest(out, "dataset", cfg, {
        "data_digest": cfg.data_digest(), "source": source, "scene": scene.to_dict(), "n_agents": d.n_agents,
        "record_interval": d.record_interval, "files": files})


def load_dataset(manifest_path) -> tuple[dict, list]:
    """Read a dataset manifest and every trajectory it lists."""
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    if manifest["kind"] != "dataset":
        raise ManifestError(f"{manifest_path}:1: expected a dataset manifest, "
                            f"got {manifest['kind']!r}")
    files = manifest.get("files") or []
    if not files:
        raise ManifestError(f"{manifest_path}:1: manifest lists no files")
    sizes = {f.get("n_agents") for f in files}
    if len(sizes) != 1:
        raise ManifestError(f"{manifest_path}: files disagree on agent count {sorted(sizes)}")
    base = manifest_path.parent
    trajs = []
    for f in files:
        path = base / f["path"]
        if not path.exists():
            raise FileNotFoundError(f"{path}: listed in {manifest_path} but missing")
        try:
            trajs.append(read_trajectory(path))
        except (ValueError, KeyError) as exc:
            raise ManifestError(f"{path}: {exc}") from exc
    return manifest, trajs


# --- train -------------------------------------------------------------------

def initial_force_field(cfg: RunConfig):
    m = cfg.model
    return init_force_field(cfg.seed if m.init_seed is None else m.init_seed, m.hidden,
                            m.activation, m.k_neighbors, m.mass, m.pos_scale, m.vel_scale,
                            m.rel_scale, m.use_relative_velocity)


def train_from_manifest(cfg: RunConfig, manifest_path, out, progress=None) -> dict:
    manifest, trajs = load_dataset(manifest_path)
    scene = cfg.scene.build()
    if manifest.get("scene") != scene.to_dict():
        raise ManifestError(f"{manifest_path}: dataset scene differs from the configured scene")
    windows = []
    for i, traj in enumerate(trajs):
        for w in slice_windows(traj, cfg.train.window_steps, cfg.train.stride):
            w.sample_id = f"{i}:{w.sample_id}"
            windows.append(w)
    if not windows:
        raise ValueError("no training windows: every window contains an exit event "
                         "or the trajectories are shorter than train.window_steps")
    log.info("training on %d windows from %d trajectories", len(windows), len(trajs))
    ff, history = train(windows, scene, initial_force_field(cfg), cfg.train, progress)
    ff = dataclasses.replace(ff, config_digest=cfg.training_digest())
    out = _prepare(out)
    dump_config(cfg, out / "config.yaml")
    ckpt_sha = save_checkpoint(ff, out / "checkpoint.json")
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "skipped", "wall_time_s"])
        for rec in history:
            w.writerow([rec.epoch, repr(rec.mean_loss), rec.skipped, f"{rec.wall_time:.3f}"])
    return _write_manifest(out, "checkpoint", cfg, {
        "training_digest": cfg.training_digest(),
        "checkpoint": "checkpoint.json", "checkpoint_sha256": ckpt_sha,
        "dataset_digest": manifest.get("digest"), "n_windows": len(windows),
        "losses": [rec.mean_loss for rec in history], "log": "train_log.csv"})


# --- simulate ----------------------------------------------------------------

def load_model(cfg: RunConfig, checkpoint):
    ff = load_checkpoint(checkpoint)
    if ff.config_digest and ff.config_digest != cfg.training_digest():
        log.warning("checkpoint %s was trained under config %s, current config is %s",
                    checkpoint, ff.config_digest[:12], cfg.training_digest()[:12])
    return ff


def _learned(cfg: RunConfig, ff, scene, record_interval: float):
    solver: IntegratorConfig = cfg.train.solver
    return learned_simulator(ff, scene, solver, _record_every(record_interval, solver.step_size))


def simulate(cfg: RunConfig, checkpoint, n_agents: int, out, n_runs: int = 1,
             t_max: float | None = None) -> dict:
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    ff = load_model(cfg, checkpoint)
    scene = cfg.scene.build()
    e = cfg.eval
    t_max = e.t_max if t_max is None else t_max
    sim = _learned(cfg, ff, scene, e.record_interval)
    out = _prepare(out)
    dump_config(cfg, out / "config.yaml")
    files = []
    for i in range(n_runs):
        seed = cfg.seed + SIM_SEED_OFFSET + i
        z0 = sample_initial_state(scene, n_agents, e.spawn_mode, e.min_separation, seed)
        traj = sim(z0, t_max)
        name = f"sim_{i:04d}.csv"
        write_trajectory(traj, out / name, {"source": "learned", "run": i, "seed": seed})
        files.append({"path": name, "seed": seed, "n_agents": n_agents,
                      "sha256": sha256_file(out / name)})
    return _write_manifest(out, "simulation", cfg, {
        "checkpoint_sha256": sha256_file(checkpoint), "n_agents": n_agents, "files": files})


# --- evaluate ----------------------------------------------------------------

def reference_simulator(cfg: RunConfig, reference: str, scene, record_interval: float):
    if reference == "sfm":
        return sfm_simulator(scene, cfg.sfm, None, _record_every(record_interval, cfg.sfm.step))
    if reference == "orca":
        return orca_simulator(scene, cfg.orca, _record_every(record_interval, cfg.orca.step))
    raise ValueError(f"unknown reference {reference!r}")


def evaluate(cfg: RunConfig, checkpoint, reference: str, out, n_runs: int | None = None,
             with_ade: bool = True) -> dict:
    """Learned model against ``reference`` on shared initial states."""
    ff = load_model(cfg, checkpoint)
    scene = cfg.scene.build()
    e = cfg.eval
    n_runs = e.n_runs if n_runs is None else n_runs
    grid = default_ice_grid(e.t_max, e.ice_resolution)
    learned = _learned(cfg, ff, scene, e.record_interval)
    ref = reference_simulator(cfg, reference, scene, e.record_interval)
    seed = cfg.seed + EVAL_SEED_OFFSET
    common = dict(scene=scene, n_agents=e.n_agents, n_runs=n_runs, seed=seed, t_max=e.t_max,
                  ice_grid=grid, spawn_mode=e.spawn_mode, min_separation=e.min_separation)
    a = monte_carlo_eval(learned, name="learned", **common)
    b = monte_carlo_eval(ref, name=reference, **common)
    comparison = compare_models(a, b, e.bins)
    if with_ade:
        # short rollouts at the training crowd size, against the same reference
        fine = cfg.data.record_interval
        comparison["short_horizon"] = short_horizon_ade(
            _learned(cfg, ff, scene, fine), reference_simulator(cfg, reference, scene, fine),
            scene, cfg.data.n_agents, e.ade_runs, cfg.seed + ADE_SEED_OFFSET, e.ade_horizon,
            cfg.data.spawn_mode, cfg.data.min_separation)
    trained_on = cfg.data.source
    meta = {"reference": reference, "trained_on": trained_on,
            "cross_evaluation": trained_on != reference,
            "checkpoint_sha256": sha256_file(checkpoint)}
    out = _prepare(out)
    dump_config(cfg, out / "config.yaml")
    write_report(out / "report.json", [a, b], comparison, meta)
    write_ice_csv(out / "ice.csv", [a, b])
    write_histogram_csv(out / "t_ev_histogram.csv", comparison)
    return _write_manifest(out, "evaluation", cfg, {
        "report": "report.json", "report_sha256": sha256_file(out / "report.json"),
        **meta})
