"""Experiment runner: config -> seeded parties -> strategy run -> CSV reports."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .data import Dataset, load_idx, make_gaussian_1d, make_ring, partition, scheme_from_dict
from .metrics import COVERAGE_COLUMNS, GENERATOR_ID, METRICS_COLUMNS, CoverageReport, mode_coverage
from .nn import LayerSpec, NetworkSpec, NumericError, SpecError, forward, generator_preset, preset_specs
from .protocol import audit_channel
from .strategies import RunResult, StrategyError, build_and_run, eval_noise

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_ASSERT = 4

OUTPUT_FILES = ("metrics.csv", "coverage.csv", "samples_final.csv", "channel_log.txt", "audit.txt",
                "config_echo.yaml", "timing.csv", "summary.json")
COMPARE_COLUMNS = ("run", "strategy", "users", "total_work_units", "max_user_work_units", "wall_ms",
                   "covered_modes", "final_g_loss")


@dataclass
class RunOutcome:
    exit_code: int
    out_dir: Path
    coverage: list[tuple[int, CoverageReport]] = field(default_factory=list)
    result: RunResult | None = None
    audit_flags: list[str] = field(default_factory=list)
    message: str = ""

    @property
    def final_coverage(self) -> CoverageReport | None:
        return self.coverage[-1][1] if self.coverage else None


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg["dataset"]
    seed = cfg.seeds.data
    if d["kind"] == "ring":
        return make_ring(d["modes"], float(d["radius"]), float(d["sigma"]), d["per_mode"], seed)
    if d["kind"] == "gauss1d":
        return make_gaussian_1d(float(d["mean"]), float(d["std"]), d["n"], seed)
    base = Path(cfg.source).parent if cfg.source and not cfg.source.startswith("<") else Path.cwd()
    images = base / d["images"]
    labels = base / d["labels"] if d["labels"] else None
    return load_idx(images, labels, d["limit"])


def coverage_sigma(cfg: ExperimentConfig) -> float:
    d = cfg["dataset"]
    return float(d["sigma"] if d["kind"] == "ring" else d["std"])


def build_partitions(cfg: ExperimentConfig, ds: Dataset) -> list[np.ndarray]:
    """One sample matrix per user. A baseline restricted to one user's
    partition (``strategy.baseline_on``) gets just that matrix."""
    p = dict(cfg["partition"])
    parts = partition(ds, scheme_from_dict(p, default_seed=cfg.seeds.data))
    mats = [ds.samples[q.indices] for q in parts]
    if any(m.shape[0] == 0 for m in mats):
        empty = [i for i, m in enumerate(mats) if m.shape[0] == 0]
        raise ConfigError(f"partition leaves users {empty} without samples", cfg._line("partition"), cfg.source)
    on = cfg["strategy"]["baseline_on"]
    if cfg["strategy"]["kind"] == "baseline" and on != "all":
        return [mats[on]]
    return mats


def _explicit_spec(layers: list, what: str, cfg: ExperimentConfig) -> NetworkSpec:
    try:
        return NetworkSpec.from_layers([LayerSpec.from_dict(d) for d in layers])
    except (SpecError, TypeError, ValueError) as exc:
        raise ConfigError(f"networks.{what}: {exc}", cfg._line("networks", what), cfg.source) from None


def build_specs(cfg: ExperimentConfig, data_dim: int) -> tuple[NetworkSpec, NetworkSpec]:
    n = cfg["networks"]
    try:
        gen, disc = preset_specs(n["preset"], n["hidden"], n["noise_dim"], float(n["leaky_slope"]))
        if n["discriminator_hidden"]:
            _, disc = preset_specs(n["preset"], n["discriminator_hidden"], n["noise_dim"], float(n["leaky_slope"]))
        gh = n["generator_hidden"] or n["hidden"]
        if gh or n["generator_hidden_activation"] or n["generator_final_activation"]:
            dense = [l for l in gen.layers if l.kind == "dense"]
            gen = generator_preset(gen.input_dim, gh or dense[0].out_dim, gen.output_dim,
                                   n["generator_final_activation"] or gen.final_activation,
                                   hidden_activation=n["generator_hidden_activation"] or "relu",
                                   slope=float(n["leaky_slope"]))
    except SpecError as exc:
        raise ConfigError(f"networks: {exc}", cfg._line("networks"), cfg.source) from None
    if n["generator"]:
        gen = _explicit_spec(n["generator"], "generator", cfg)
    if n["discriminator"]:
        disc = _explicit_spec(n["discriminator"], "discriminator", cfg)
    if gen.output_dim != data_dim or disc.input_dim != data_dim:
        raise ConfigError(f"network dims do not match data dimension {data_dim} "
                          f"(generator emits {gen.output_dim}, discriminator takes {disc.input_dim})",
                          cfg._line("networks"), cfg.source)
    if disc.output_dim != 1 or disc.final_activation != "sigmoid":
        raise ConfigError("discriminator must end in a single sigmoid unit", cfg._line("networks"), cfg.source)
    return gen, disc


def eval_epochs(epochs: int, every: int | None) -> set[int]:
    step = every or max(1, epochs // 20)
    marks = set(range(0, epochs + 1, step))
    marks.add(epochs)
    return marks


def _write_csv_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for r in rows:
            f.write(r + "\n")


def _write_outputs(out: Path, cfg: ExperimentConfig, result: RunResult, coverage, samples: np.ndarray,
                   audit_text: str, status: str) -> None:
    with_wall = cfg["report_wall_clock"]
    _write_csv_rows(out / "metrics.csv", METRICS_COLUMNS, (m.csv_row(with_wall) for m in result.metrics))
    _write_csv_rows(out / "coverage.csv", COVERAGE_COLUMNS,
                    (f"{e},{c.covered_modes},{c.high_quality_fraction!r}" for e, c in coverage))
    header = [f"x{i}" for i in range(samples.shape[1])]
    _write_csv_rows(out / "samples_final.csv", header, (",".join(repr(float(v)) for v in row) for row in samples))
    (out / "channel_log.txt").write_text(result.message_log.to_text())
    (out / "audit.txt").write_text(audit_text)
    (out / "config_echo.yaml").write_text(cfg.echo())
    # wall-clock lives apart from metrics.csv so the latter stays byte-stable
    _write_csv_rows(out / "timing.csv", ("epoch", "wall_ms"),
                    (f"{i + 1},{w:.3f}" for i, w in enumerate(result.epoch_wall_ms)))
    ck = out / "checkpoint"
    ck.mkdir(exist_ok=True)
    (ck / "generator.json").write_text(result.final_generator.spec.to_json())
    (ck / "generator.bin").write_bytes(result.final_generator.params.to_bytes())
    for i, d in enumerate(result.discriminators):
        (ck / f"discriminator_{i}.bin").write_bytes(d.params.to_bytes())
    if result.discriminators:
        (ck / "discriminator.json").write_text(result.discriminators[0].spec.to_json())
    final = coverage[-1][1] if coverage else None
    g_rows = [m for m in result.metrics if m.user_id == GENERATOR_ID]
    summary = {
        "name": cfg["name"],
        "status": status,
        "strategy": result.kind,
        "users": len({m.user_id for m in result.metrics if m.user_id != GENERATOR_ID}) or cfg.user_count(),
        "epochs_completed": g_rows[-1].epoch if g_rows else 0,
        "covered_modes": final.covered_modes if final else None,
        "quality": final.high_quality_fraction if final else None,
        "final_g_loss": g_rows[-1].g_loss if g_rows else None,
        "mode_counts": final.within.tolist() if final else None,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _check_assertions(cfg: ExperimentConfig, final: CoverageReport | None) -> list[str]:
    a = cfg["assert"]
    bad = []
    if final is None:
        if any(v is not None for v in a.values()):
            bad.append("no coverage available to assert on")
        return bad
    if a["min_covered_modes"] is not None and final.covered_modes < a["min_covered_modes"]:
        bad.append(f"covered_modes {final.covered_modes} < {a['min_covered_modes']}")
    if a["max_covered_modes"] is not None and final.covered_modes > a["max_covered_modes"]:
        bad.append(f"covered_modes {final.covered_modes} > {a['max_covered_modes']}")
    if a["min_quality"] is not None and final.high_quality_fraction < a["min_quality"]:
        bad.append(f"quality {final.high_quality_fraction:.4f} < {a['min_quality']}")
    return bad


def execute(cfg: ExperimentConfig, out_dir=None, check: bool = False, log=print) -> RunOutcome:
    """Run one experiment and write every report; never raises for config or
    numeric trouble, the outcome's ``exit_code`` says what happened."""
    out = Path(out_dir or cfg["output"] or f"runs/{cfg['name']}")
    try:
        ds = build_dataset(cfg)
        parts = build_partitions(cfg, ds)
        gen_spec, disc_spec = build_specs(cfg, ds.dim)
        scfg = cfg.strategy_config(len(parts))
    except ConfigError as exc:
        log(f"config error: {exc}")
        return RunOutcome(EXIT_CONFIG, out, message=str(exc))
    except (OSError, ValueError, StrategyError) as exc:
        log(f"config error: {cfg.source}: {exc}")
        return RunOutcome(EXIT_CONFIG, out, message=str(exc))

    out.mkdir(parents=True, exist_ok=True)
    ev = cfg["evaluation"]
    z_eval = eval_noise(cfg.seeds, len(parts), ev["samples"], gen_spec.input_dim, cfg["networks"]["noise"])
    centers = ds.mode_centers
    sigma = coverage_sigma(cfg)
    marks = eval_epochs(scfg.epochs, ev["every"])
    coverage: list[tuple[int, CoverageReport]] = []

    def evaluate(epoch, gen):
        if centers is not None and epoch in marks:
            coverage.append((epoch, mode_coverage(forward(gen, z_eval), centers, sigma, ev["threshold_count"])))

    status, code, message = "ok", EXIT_OK, ""
    t0 = time.perf_counter()
    try:
        result = build_and_run(scfg, parts, gen_spec, disc_spec, cfg.seeds, cfg["networks"]["noise"],
                               on_epoch=evaluate)
    except NumericError as exc:
        result = exc.partial_result
        status, code, message = "numeric_failure", EXIT_NUMERIC, f"numeric failure: {exc}"
        log(message)
    elapsed = time.perf_counter() - t0

    try:
        samples = forward(result.final_generator, z_eval)
    except NumericError:
        samples = np.zeros((0, gen_spec.output_dim))
    raw = parts if cfg["strategy"]["kind"] != "baseline" else None
    audit = audit_channel(result.message_log, raw)
    _write_outputs(out, cfg, result, coverage, samples, audit.table(), status)
    outcome = RunOutcome(code, out, coverage, result, audit.flags, message)
    final = outcome.final_coverage
    if final is not None:
        log(f"{cfg['name']}: {result.kind}, {scfg.epochs} epochs in {elapsed:.1f}s; covered modes "
            f"{final.covered_modes}/{final.total_modes}, quality {final.high_quality_fraction:.3f}")
    if code == EXIT_OK and audit.flags:
        log(f"privacy audit raised {len(audit.flags)} flags")
    if code == EXIT_OK and check:
        bad = _check_assertions(cfg, final)
        if audit.flags:
            bad.append(f"{len(audit.flags)} privacy audit flags")
        if bad:
            outcome.exit_code = EXIT_ASSERT
            outcome.message = "; ".join(bad)
            log("assertion failed: " + outcome.message)
    return outcome


def run_experiment(cfg: ExperimentConfig, out_dir=None, check: bool = False) -> int:
    return execute(cfg, out_dir, check).exit_code


# ----------------------------------------------------------------- compare


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def summarize_run(run_dir) -> dict:
    d = Path(run_dir)
    for name in ("metrics.csv", "coverage.csv", "summary.json"):
        if not (d / name).exists():
            raise FileNotFoundError(f"{d}: missing {name}")
    metrics = _read_csv(d / "metrics.csv")
    summary = json.loads((d / "summary.json").read_text())
    users = [m for m in metrics if int(m["user_id"]) != GENERATOR_ID]
    gens = [m for m in metrics if int(m["user_id"]) == GENERATOR_ID]
    cov = _read_csv(d / "coverage.csv")
    wall = 0.0
    if (d / "timing.csv").exists():
        wall = sum(float(r["wall_ms"]) for r in _read_csv(d / "timing.csv"))
    return {
        "run": d.name,
        "strategy": summary["strategy"],
        "users": summary["users"],
        "total_work_units": sum(int(m["work_units"]) for m in users),
        "max_user_work_units": max((int(m["work_units"]) for m in users), default=0),
        "wall_ms": round(wall, 3),
        "covered_modes": int(cov[-1]["covered_modes"]) if cov else "",
        "final_g_loss": float(gens[-1]["g_loss"]) if gens else "",
    }


def compare_runs(run_dirs, out_path=None, log=print) -> list[dict]:
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two run directories")
    rows = [summarize_run(d) for d in run_dirs]
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in COMPARE_COLUMNS}
    log("  ".join(c.ljust(widths[c]) for c in COMPARE_COLUMNS))
    for r in rows:
        log("  ".join(str(r[c]).ljust(widths[c]) for c in COMPARE_COLUMNS))
    if out_path is not None:
        with open(out_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=COMPARE_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return rows
