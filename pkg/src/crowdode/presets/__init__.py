"""Bundled experiments: a config file, a command sequence and checkable thresholds.

Datasets and checkpoints are cached under ``<out>/cache`` keyed by the digest
of the config sections that determine them, so presets sharing a training
setup train once.
"""
from __future__ import annotations

import json
import operator
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from crowdode import pipeline
from crowdode.config import RunConfig, config_from_dict, load_config

_OPS = {"<=": operator.le, ">=": operator.ge, "<": operator.lt, ">": operator.gt}


@dataclass(frozen=True)
class Threshold:
    label: str
    path: tuple
    op: str
    bound: float

    def value(self, report: dict):
        node = report
        for key in self.path:
            node = node[key]
        return node

    def check(self, report: dict) -> tuple[float, bool]:
        raw = self.value(report)
        v = float("nan") if raw is None else float(raw)  # null means undefined: fails
        return v, bool(_OPS[self.op](v, self.bound))


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    description: str
    config_file: str
    reference: str
    thresholds: tuple
    artifacts: tuple = ("data/manifest.json", "model/checkpoint.json", "model/train_log.csv",
                        "eval/report.json", "eval/ice.csv", "eval/t_ev_histogram.csv")

    def config(self) -> RunConfig:
        with resources.as_file(resources.files(__package__) / self.config_file) as path:
            return load_config(path)


_SHORT = Threshold("short-horizon ADE / constant-velocity ADE",
                   ("comparison", "short_horizon", "ratio"), "<=", 0.5)

PRESETS = {
    p.name: p for p in (
        ExperimentPreset(
            "sfm-n5", "gen-data + train + evaluate at N=5 (social force)", "sfm-n5.yaml", "sfm",
            (_SHORT,)),
        ExperimentPreset(
            "sfm-n20-transfer", "N=5-trained model evaluated at N=20 (social force)",
            "sfm-n20-transfer.yaml", "sfm",
            (Threshold("max |mean ICE learned - mean ICE reference|",
                       ("comparison", "ice_max_abs_diff"), "<=", 0.2),
             Threshold("modes in learned T_ev histogram",
                       ("comparison", "histogram", "modes", 0), ">=", 2))),
        ExperimentPreset(
            "orca-n5", "ORCA pipeline: train at N=5, check N=5 accuracy and N=20 ICE gap",
            "orca-n5.yaml", "orca",
            (_SHORT,
             Threshold("max |mean ICE learned - mean ICE reference|",
                       ("comparison", "ice_max_abs_diff"), "<=", 0.3))),
    )
}


def list_presets() -> dict:
    return dict(PRESETS)


@dataclass
class PresetSummary:
    name: str
    rows: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r["passed"] for r in self.rows) and all(self.artifacts.values())

    @property
    def failures(self) -> list:
        return [r for r in self.rows if not r["passed"]]

    def table(self) -> str:
        lines = [f"preset {self.name}", "metric\tvalue\tbound\tresult"]
        for r in self.rows:
            lines.append(f"{r['metric']}\t{r['value']:.4g}\t{r['op']} {r['bound']:g}\t"
                         f"{'PASS' if r['passed'] else 'FAIL'}")
        missing = [a for a, ok in self.artifacts.items() if not ok]
        if missing:
            lines.append("missing artifacts: " + ", ".join(missing))
        lines.append("overall: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)


def _cached(root: Path, kind: str, digest: str, field_name: str, build) -> Path:
    target = root / "cache" / f"{kind}-{digest[:16]}"
    manifest = target / "manifest.json"
    if manifest.exists():
        try:
            if json.loads(manifest.read_text()).get(field_name) == digest:
                return target
        except json.JSONDecodeError:
            pass
    build(target)
    return target


def scaled_config(cfg: RunConfig, n_runs=None, data_runs=None, epochs=None) -> RunConfig:
    d = cfg.to_dict()
    if n_runs is not None:
        d["eval"]["n_runs"] = n_runs
    if data_runs is not None:
        d["data"]["n_runs"] = data_runs
    if epochs is not None:
        d["train"]["epochs"] = epochs
    return config_from_dict(d)


def run_preset(name: str, out="runs", n_runs: int | None = None, data_runs: int | None = None,
               epochs: int | None = None, ade_runs: int | None = None,
               progress=None) -> PresetSummary:
    """Run a preset's command sequence and check its thresholds.

    The scale overrides exist for quick CI runs; they change the config digest.
    """
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    preset = PRESETS[name]
    cfg = scaled_config(preset.config(), n_runs, data_runs, epochs)
    if ade_runs is not None:
        d = cfg.to_dict()
        d["eval"]["ade_runs"] = ade_runs
        cfg = config_from_dict(d)
    root = Path(out)
    data_dir = _cached(root, "data", cfg.data_digest(), "data_digest",
                       lambda t: pipeline.gen_data(cfg, t))
    model_dir = _cached(root, "model", cfg.training_digest(), "training_digest",
                        lambda t: pipeline.train_from_manifest(cfg, data_dir / "manifest.json",
                                                               t, progress))
    run_dir = root / name
    links = {"data": data_dir, "model": model_dir}
    pipeline.evaluate(cfg, model_dir / "checkpoint.json", preset.reference, run_dir / "eval")
    report = json.loads((run_dir / "eval" / "report.json").read_text())
    summary = PresetSummary(name)
    for th in preset.thresholds:
        value, ok = th.check(report)
        summary.rows.append({"metric": th.label, "value": value, "op": th.op,
                             "bound": th.bound, "passed": ok})
    for art in preset.artifacts:
        head, _, rest = art.partition("/")
        base = links.get(head, run_dir / head)
        summary.artifacts[art] = (base / rest).exists()
    (run_dir / "summary.tsv").write_text(summary.table() + "\n")
    (run_dir / "sources.json").write_text(json.dumps(
        {k: str(v.relative_to(root)) for k, v in links.items()}, indent=2) + "\n")
    return summary
