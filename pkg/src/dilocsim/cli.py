"""Experiment runner CLI.

Builds a scenario from a flat key = value config (or a named preset), runs
the requested algorithm with a seeded, fully reproducible random stream, and
writes three artifact kinds into the output directory: a per-iteration trace
table, a structured summary, and per-sensor coordinate series for plotting.
Identical config and seed produce byte-identical artifacts.

Commands:
    run <config-or-preset> [--seed S] [--replicas K] [--out DIR] [--print-config]
    validate <config-or-preset> [--print-config]
    presets list

Exit codes: 0 success, 2 config error, 3 runtime error. The environment
variable DILOCSIM_OUT_ROOT overrides the default output root (./runs).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import deployment as dep
from . import engine as eng
from . import random_env as renv
from . import system as sysm

OUT_ROOT_ENV = "DILOCSIM_OUT_ROOT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ConfigInvalidError(ValueError):
    pass


# Schema: key -> (type, default); REQUIRED means no default.
_REQUIRED = object()
_SCHEMA = {
    "scenario": (str, _REQUIRED),
    "dimension": (int, 2),
    "field.source": (str, _REQUIRED),
    "field.gamma": (float, None),
    "field.anchors": (str, None),
    "field.path": (str, None),
    "algorithm": (str, _REQUIRED),
    "alpha": (float, None),
    "schedule.family": (str, None),
    "schedule.param": (float, None),
    "noise.link_prob": (float, 1.0),
    "noise.channel_var": (float, 0.0),
    "noise.channel_var_scaled_by_M": (bool, False),
    "noise.fluct_var": (float, 0.0),
    "noise.bias_scale": (float, 0.0),
    "stop.step_tol": (float, 1e-10),
    "stop.max_iters": (int, 100_000),
    "snapshot_stride": (int, 10),
    "seed": (int, 0),
}

_NOISE_DEFAULTS = {
    "noise.link_prob": 1.0,
    "noise.channel_var": 0.0,
    "noise.channel_var_scaled_by_M": False,
    "noise.fluct_var": 0.0,
    "noise.bias_scale": 0.0,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Schema-validated, fully resolved experiment description."""

    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def canonical_text(self) -> str:
        lines = []
        for key in sorted(self.values):
            lines.append(f"{key} = {_format_value(self.values[key])}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.17g}"
    if v is None:
        return "-"
    return str(v)


def _coerce(key: str, raw: str):
    typ, _ = _SCHEMA[key]
    raw = raw.strip()
    if raw == "-":
        return None
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError as exc:
        raise ConfigInvalidError(f"key {key!r}: cannot parse {raw!r} as {typ.__name__}") from exc


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse and validate flat 'key = value' config text.

    Unknown keys are rejected, as are incompatible key combinations (noise
    settings on a deterministic algorithm, schedules without dlre, and so
    on). The result carries every key with defaults filled in.
    """
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigInvalidError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigInvalidError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigInvalidError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    for key, (_, default) in _SCHEMA.items():
        if key not in values:
            if default is _REQUIRED:
                raise ConfigInvalidError(f"missing required key {key!r}")
            values[key] = default
    _validate_semantics(values)
    return ExperimentConfig(values)


def _validate_semantics(v: dict):
    m = v["dimension"]
    if m < 1:
        raise ConfigInvalidError("dimension must be >= 1")
    if v["field.source"] == "poisson":
        if not v["field.gamma"] or v["field.gamma"] <= 0:
            raise ConfigInvalidError("poisson fields need field.gamma > 0")
        if not v["field.anchors"]:
            raise ConfigInvalidError("poisson fields need field.anchors")
        anchors = _parse_anchors(v["field.anchors"], m)
        if anchors.shape != (m + 1, m):
            raise ConfigInvalidError(
                f"field.anchors must list {m + 1} points of dimension {m}"
            )
        if v["field.path"] is not None:
            raise ConfigInvalidError("field.path is meaningless for poisson fields")
    elif v["field.source"] == "file":
        if not v["field.path"]:
            raise ConfigInvalidError("file fields need field.path")
        for key in ("field.gamma", "field.anchors"):
            if v[key] is not None:
                raise ConfigInvalidError(f"{key} is meaningless for file fields")
    else:
        raise ConfigInvalidError("field.source must be 'poisson' or 'file'")
    algo = v["algorithm"]
    if algo not in ("diloc", "diloc_rel", "dlre"):
        raise ConfigInvalidError("algorithm must be diloc, diloc_rel or dlre")
    if algo == "diloc_rel":
        if v["alpha"] is None or not 0.0 < v["alpha"] <= 1.0:
            raise ConfigInvalidError("diloc_rel needs alpha in (0, 1]")
    elif v["alpha"] is not None:
        raise ConfigInvalidError("alpha applies only to diloc_rel")
    if algo == "dlre":
        if v["schedule.family"] is None or v["schedule.param"] is None:
            raise ConfigInvalidError("dlre needs schedule.family and schedule.param")
        try:
            renv.make_weight_schedule(v["schedule.family"], v["schedule.param"])
        except renv.PersistenceViolationError as exc:
            raise ConfigInvalidError(str(exc)) from exc
    else:
        if v["schedule.family"] is not None or v["schedule.param"] is not None:
            raise ConfigInvalidError("schedules apply only to dlre")
        for key, default in _NOISE_DEFAULTS.items():
            if v[key] != default:
                raise ConfigInvalidError(f"{key} applies only to dlre")
    if not 0.0 < v["noise.link_prob"] <= 1.0:
        raise ConfigInvalidError("noise.link_prob must lie in (0, 1]")
    for key in ("noise.channel_var", "noise.fluct_var", "noise.bias_scale"):
        if v[key] < 0.0:
            raise ConfigInvalidError(f"{key} must be nonnegative")
    if v["stop.max_iters"] < 0 or v["stop.step_tol"] < 0:
        raise ConfigInvalidError("stop criteria must be nonnegative")
    if v["snapshot_stride"] < 0:
        raise ConfigInvalidError("snapshot_stride must be nonnegative")


def _parse_anchors(text: str, m: int) -> np.ndarray:
    try:
        rows = [
            [float(x) for x in chunk.replace(",", " ").split()]
            for chunk in text.split(";")
            if chunk.strip()
        ]
        return np.array(rows, dtype=float).reshape(len(rows), -1)
    except ValueError as exc:
        raise ConfigInvalidError(f"cannot parse field.anchors {text!r}") from exc


# -- presets -----------------------------------------------------------------

# Equilateral anchor triangle of area ~47: a density-1 deployment gives a
# network of about 50 nodes.
_POISSON50_ANCHORS = "0 0; 10.42 0; 5.21 9.024"


def _demo_field_path() -> str:
    return str(resources.files("dilocsim").joinpath("data/demo7.field"))


def preset_names() -> list[str]:
    return sorted(_PRESET_BUILDERS)


def materialize_preset(name: str) -> str:
    try:
        return _PRESET_BUILDERS[name]()
    except KeyError:
        raise ConfigInvalidError(
            f"unknown preset {name!r}; available: {', '.join(preset_names())}"
        ) from None


def _preset_deterministic_fixture() -> str:
    return (
        "scenario = deterministic-fixture\n"
        "dimension = 2\n"
        "field.source = file\n"
        f"field.path = {_demo_field_path()}\n"
        "algorithm = diloc\n"
        "stop.step_tol = 1e-10\n"
        "stop.max_iters = 100000\n"
        "snapshot_stride = 1\n"
        "seed = 7\n"
    )


def _preset_deterministic_poisson() -> str:
    return (
        "scenario = deterministic-poisson\n"
        "dimension = 2\n"
        "field.source = poisson\n"
        "field.gamma = 1.0\n"
        f"field.anchors = {_POISSON50_ANCHORS}\n"
        "algorithm = diloc\n"
        "stop.step_tol = 1e-10\n"
        "stop.max_iters = 100000\n"
        "seed = 3\n"
    )


def _preset_lf_cn() -> str:
    # link failures plus channel noise; decreasing harmonic gains
    return (
        "scenario = lf-cn\n"
        "dimension = 2\n"
        "field.source = poisson\n"
        "field.gamma = 1.0\n"
        f"field.anchors = {_POISSON50_ANCHORS}\n"
        "algorithm = dlre\n"
        "schedule.family = harmonic\n"
        "schedule.param = 4.0\n"
        "noise.link_prob = 0.9\n"
        "noise.channel_var = 1.0\n"
        "noise.channel_var_scaled_by_M = true\n"
        "stop.step_tol = 0\n"
        "stop.max_iters = 5000\n"
        "seed = 3\n"
    )


def _preset_noisy_distances() -> str:
    return (
        "scenario = noisy-distances\n"
        "dimension = 2\n"
        "field.source = poisson\n"
        "field.gamma = 1.0\n"
        f"field.anchors = {_POISSON50_ANCHORS}\n"
        "algorithm = dlre\n"
        "schedule.family = power\n"
        "schedule.param = 0.55\n"
        "noise.fluct_var = 0.1\n"
        "stop.step_tol = 0\n"
        "stop.max_iters = 5000\n"
        "seed = 3\n"
    )


def _preset_biased_distances() -> str:
    return (
        "scenario = biased-distances\n"
        "dimension = 2\n"
        "field.source = poisson\n"
        "field.gamma = 1.0\n"
        f"field.anchors = {_POISSON50_ANCHORS}\n"
        "algorithm = dlre\n"
        "schedule.family = power\n"
        "schedule.param = 0.55\n"
        "noise.fluct_var = 0.1\n"
        "noise.bias_scale = 0.01\n"
        "stop.step_tol = 0\n"
        "stop.max_iters = 5000\n"
        "seed = 3\n"
    )


def _preset_all_random() -> str:
    return (
        "scenario = all-random\n"
        "dimension = 2\n"
        "field.source = poisson\n"
        "field.gamma = 1.0\n"
        f"field.anchors = {_POISSON50_ANCHORS}\n"
        "algorithm = dlre\n"
        "schedule.family = power\n"
        "schedule.param = 0.55\n"
        "noise.link_prob = 0.9\n"
        "noise.channel_var = 1.0\n"
        "noise.channel_var_scaled_by_M = true\n"
        "noise.fluct_var = 0.1\n"
        "stop.step_tol = 0\n"
        "stop.max_iters = 5000\n"
        "seed = 3\n"
    )


_PRESET_BUILDERS = {
    "deterministic-fixture": _preset_deterministic_fixture,
    "deterministic-poisson": _preset_deterministic_poisson,
    "lf-cn": _preset_lf_cn,
    "noisy-distances": _preset_noisy_distances,
    "biased-distances": _preset_biased_distances,
    "all-random": _preset_all_random,
}


# -- artifact emission --------------------------------------------------------


def emit_trace(trace: eng.RunTrace, path, oracle_available: bool):
    """Tab-separated per-iteration rows; header always, rows per iteration."""
    cols = ["iteration", "step_norm"]
    if oracle_available:
        cols.append("oracle_error")
    cols += ["messages_total", "alpha_t"]
    lines = ["\t".join(cols)]
    for i in range(trace.iterations):
        row = [str(i + 1), f"{trace.step_norms[i]:.17g}"]
        if oracle_available:
            row.append(f"{trace.oracle_errors[i]:.17g}")
        row.append(str(trace.messages_total(i + 1)))
        row.append(f"{trace.alphas[i]:.17g}")
        lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def emit_summary(summary: dict, path):
    """Deterministic JSON with sorted keys."""
    Path(path).write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def emit_plot_data(traces, path, m: int):
    """One iteration-vs-value series file per (sensor, coordinate).

    Accepts a single trace or a sequence; multiple traces go into run-<k>/
    subdirectories.
    """
    if isinstance(traces, eng.RunTrace):
        traces = [traces]
        subdirs = [Path(path)]
    else:
        traces = list(traces)
        subdirs = [Path(path) / f"run-{k:03d}" for k in range(len(traces))]
    for trace, sub in zip(traces, subdirs):
        sub.mkdir(parents=True, exist_ok=True)
        for row in range(trace.n_sensors):
            sensor_id = m + 2 + row
            for j in range(m):
                lines = ["iteration\tvalue"]
                for t, snap in trace.snapshots:
                    lines.append(f"{t}\t{snap[row, j]:.17g}")
                (sub / f"sensor{sensor_id}_coord{j + 1}.tsv").write_text(
                    "\n".join(lines) + "\n", encoding="utf-8"
                )


# -- experiment execution ------------------------------------------------------


def _build_field(cfg: ExperimentConfig, seed: int) -> dep.SensorField:
    if cfg["field.source"] == "poisson":
        anchors = _parse_anchors(cfg["field.anchors"], cfg["dimension"])
        return dep.generate_poisson_field(cfg["dimension"], cfg["field.gamma"], anchors, seed)
    field = dep.load_field(cfg["field.path"])
    if field.m != cfg["dimension"]:
        raise ConfigInvalidError(
            f"config dimension {cfg['dimension']} does not match field file dimension {field.m}"
        )
    return field


def run_experiment(cfg: ExperimentConfig, out_dir, seed: int | None = None) -> dict:
    """Execute one seeded run and write trace, summary and plot data.

    Returns the summary dictionary. Raises ConfigInvalidError for config
    problems and lets runtime failures propagate for the CLI to map onto
    exit status 3.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg["seed"] if seed is None else int(seed)
    field = _build_field(cfg, seed)
    if field.n_sensors == 0:
        raise ConfigInvalidError("field holds no sensors; nothing to localize")
    tris = dep.triangulate_all(field)
    sys_m = sysm.build_system_matrices(field, tris)
    anchors = sysm.AnchorBlock(field.anchor_block())
    truth = field.true_sensor_matrix()
    rho_p = sysm.spectral_radius(sys_m.P)
    algo = cfg["algorithm"]
    initial = eng.initial_state(anchors, sys_m.M, seed=seed)
    stride = cfg["snapshot_stride"]
    summary = {
        "scenario": cfg["scenario"],
        "algorithm": algo,
        "config_hash": cfg.config_hash(),
        "seed": seed,
        "dimension": sys_m.m,
        "n_anchors": sys_m.m + 1,
        "n_sensors": sys_m.M,
        "rho_P": rho_p,
    }
    if algo in ("diloc", "diloc_rel"):
        alpha = cfg["alpha"] if algo == "diloc_rel" else 1.0
        trace = eng.run_to_convergence(
            initial,
            sys_m,
            anchors,
            mode=algo,
            alpha=alpha,
            step_tol=cfg["stop.step_tol"],
            max_iters=cfg["stop.max_iters"],
            snapshot_stride=stride,
            oracle=truth,
            seed=seed,
        )
        if algo == "diloc_rel":
            summary["alpha"] = alpha
            J = (1.0 - alpha) * np.eye(sys_m.M) + alpha * sys_m.P.toarray()
            summary["rho_J"] = float(np.max(np.abs(np.linalg.eigvals(J)))) if sys_m.M else 0.0
    else:
        channel_var = cfg["noise.channel_var"]
        if cfg["noise.channel_var_scaled_by_M"]:
            channel_var = channel_var / sys_m.M
        bias_b = bias_p = None
        if cfg["noise.bias_scale"] > 0.0:
            bias_b, bias_p = renv.random_link_bias(sys_m, cfg["noise.bias_scale"], seed=seed)
        model = renv.NoiseModel(
            link_prob=cfg["noise.link_prob"],
            channel_noise_var=channel_var,
            bias_B=bias_b,
            bias_P=bias_p,
            fluct_var=cfg["noise.fluct_var"],
            seed=seed,
        )
        schedule = renv.make_weight_schedule(cfg["schedule.family"], cfg["schedule.param"])
        trace = renv.run_dlre(
            initial,
            sys_m,
            anchors,
            model,
            schedule,
            max_iters=cfg["stop.max_iters"],
            step_tol=cfg["stop.step_tol"],
            snapshot_stride=stride,
            oracle=truth,
            seed=seed,
        )
        limit = renv.dlre_limit(sys_m, anchors, model)
        summary["schedule"] = f"{cfg['schedule.family']}({cfg['schedule.param']:g})"
        summary["channel_var_effective"] = channel_var
        summary["e_l"] = limit.e_l
        summary["dist_to_dstar"] = float(np.linalg.norm(trace.final_state - limit.d_star))
    summary["iterations"] = trace.iterations
    summary["converged_at"] = trace.converged_at
    summary["final_step_norm"] = (
        float(trace.step_norms[-1]) if trace.iterations else None
    )
    summary["final_oracle_error"] = (
        float(trace.oracle_errors[-1]) if trace.oracle_errors is not None and trace.iterations else None
    )
    summary["per_sensor_messages"] = trace.per_sensor_messages
    summary["per_sensor_flops"] = trace.per_sensor_flops
    summary["messages_total"] = trace.messages_total()
    emit_trace(trace, out / "trace.tsv", oracle_available=True)
    emit_summary(summary, out / "summary.json")
    emit_plot_data(trace, out / "plot", sys_m.m)
    dep.save_field(field, out / "field.field")
    return summary


def _replica_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([base & 0xFFFFFFFFFFFFFFFF, index]).generate_state(1)[0])


def run_replicas(cfg: ExperimentConfig, out_dir, replicas: int, seed: int | None = None) -> list[dict]:
    """Run seed-derived independent replicas in parallel subdirectories."""
    base = cfg["seed"] if seed is None else int(seed)
    out = Path(out_dir)
    if replicas <= 1:
        return [run_experiment(cfg, out, seed=base)]
    seeds = [_replica_seed(base, k) for k in range(replicas)]
    dirs = [out / f"replica-{k:03d}" for k in range(replicas)]
    with ThreadPoolExecutor(max_workers=min(replicas, os.cpu_count() or 1)) as pool:
        futures = [
            pool.submit(run_experiment, cfg, d, s) for d, s in zip(dirs, seeds)
        ]
        return [f.result() for f in futures]


# -- command line ---------------------------------------------------------------


def _load_config_arg(arg: str) -> ExperimentConfig:
    path = Path(arg)
    if path.exists():
        return parse_config_text(path.read_text(encoding="utf-8"))
    if arg in _PRESET_BUILDERS:
        return parse_config_text(materialize_preset(arg))
    raise ConfigInvalidError(f"{arg!r} is neither a config file nor a preset name")


def _default_out_dir(cfg: ExperimentConfig) -> Path:
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    return root / cfg["scenario"]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dilocsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment from a config file or preset")
    p_run.add_argument("config", help="config file path or preset name")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--replicas", type=int, default=1, help="independent seeded replicas")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--print-config", action="store_true", help="dump the resolved config")
    p_val = sub.add_parser("validate", help="validate a config file or preset")
    p_val.add_argument("config")
    p_val.add_argument("--print-config", action="store_true")
    p_pre = sub.add_parser("presets", help="preset utilities")
    p_pre.add_argument("action", choices=["list"])
    args = parser.parse_args(argv)

    if args.command == "presets":
        for name in preset_names():
            print(name)
        return EXIT_OK

    try:
        cfg = _load_config_arg(args.config)
    except (ConfigInvalidError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if getattr(args, "print_config", False):
        print(cfg.canonical_text(), end="")

    if args.command == "validate":
        print(f"config OK (hash {cfg.config_hash()[:12]})")
        return EXIT_OK

    if args.replicas < 1:
        print("config error: --replicas must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out) if args.out else _default_out_dir(cfg)
    try:
        summaries = run_replicas(cfg, out_dir, args.replicas, seed=args.seed)
    except ConfigInvalidError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (dep.DeploymentError, sysm.SystemMatrixError, eng.EngineError, renv.RandomEnvError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for s in summaries:
        final = s.get("final_oracle_error")
        final_txt = "n/a" if final is None else f"{final:.3e}"
        print(
            f"{s['scenario']}: seed={s['seed']} iters={s['iterations']} "
            f"converged_at={s['converged_at']} final_oracle_error={final_txt}"
        )
    print(f"artifacts in {out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
