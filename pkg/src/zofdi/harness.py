"""Experiment runner: configs, presets, seeded multi-trial execution and artifacts."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import analysis
from .dynamics import REGISTRY, NoiseSource, Scenario, get_scenario, scenario_from_mapping
from .errors import AssumptionViolation, ConfigurationError
from .objective import AdversaryObjective, Reference
from .zofo import AttackConfig, run_attack, run_batch, supports_kernel

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

OUT_ENV = "ZOFDI_OUT"
DEFAULT_OUT = "zofdi-out"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

DIVERGENCE_FRACTION = 0.10

CONFIG_KEYS = {
    "scenario": "registry name, or a table with kind/A/B/C/K/gamma/x0 (linear) or kind/n/gain (tanh)",
    "reference": "static | ramp",
    "reference_value": "static reference value (number or list)",
    "reference_slope": "ramp slope (number or list)",
    "Q": "attack weight matrix, nested row-major array",
    "delta": "smoothing radius",
    "eta": "step size in (0, 1)",
    "R": "energy budget, bound on theta'theta",
    "T": "number of optimizer iterations",
    "probe": "sphere | trig",
    "hold": "plant steps per iteration (default 1)",
    "noise": "none | gaussian | uniform",
    "noise_mean": "gaussian mean",
    "noise_variance": "gaussian variance",
    "noise_lo": "uniform lower bound",
    "noise_hi": "uniform upper bound",
    "trials": "number of independent trials",
    "seed": "master seed (trial i uses seed XOR i)",
    "out": "output directory",
    "plots": "write SVG plots (true/false)",
}

_BASE = {
    "Q": [[3.0, 0.0], [0.0, 3.0]],
    "delta": 1e-3,
    "eta": 7.5e-5,
    "R": 1.0,
    "trials": 50,
    "seed": 0,
    "noise": "none",
}

PRESETS: dict[str, dict] = {
    "fig1a": {**_BASE, "scenario": "paper-linear", "reference": "static", "reference_value": -1.5,
              "T": 20_000, "probe": "trig", "hold": 1},
    "fig1b": {**_BASE, "scenario": "paper-linear", "reference": "ramp", "reference_slope": 1e-4,
              "T": 40_000, "probe": "trig", "hold": 1},
    "fig2a": {**_BASE, "scenario": "stable-linear", "reference": "static", "reference_value": -1.5,
              "T": 20_000, "probe": "sphere", "hold": 10},
    "fig2b": {**_BASE, "scenario": "stable-linear", "reference": "ramp", "reference_slope": 1e-4,
              "T": 40_000, "probe": "sphere", "hold": 10},
    "fig3": {**_BASE, "scenario": "paper-linear", "reference": "ramp", "reference_slope": 1e-4,
             "T": 40_000, "probe": "trig", "hold": 1},
    "fig4": {**_BASE, "scenario": "stable-linear", "reference": "ramp", "reference_slope": 1e-4,
             "T": 40_000, "probe": "sphere", "hold": 10},
}

_GAUSS = {"noise": "gaussian", "noise_mean": 0.0, "noise_variance": 0.02}
_UNIF = {"noise": "uniform", "noise_lo": 0.0, "noise_hi": 0.02}
VARIANTS: dict[str, dict[str, dict]] = {
    "fig3": {"gaussian": _GAUSS, "uniform": _UNIF},
    "fig4": {"none": {"noise": "none"}, "gaussian": _GAUSS, "uniform": _UNIF},
}


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT))


@dataclass
class ExperimentConfig:
    scenario: str | Mapping
    objective: AdversaryObjective
    attack: AttackConfig
    noise: NoiseSource = field(default_factory=NoiseSource)
    trials: int = 50
    seed: int = 0
    out: Path | None = None
    plots: bool = False
    label: str = "run"

    def __post_init__(self):
        if int(self.trials) < 1:
            raise ConfigurationError("trials must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_mapping(cls, data: Mapping, label: str = "run") -> "ExperimentConfig":
        data = dict(data)
        unknown = set(data) - set(CONFIG_KEYS)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        if "scenario" not in data:
            raise ConfigurationError("config needs a 'scenario'")
        kind = data.get("reference", "static")
        if kind == "static":
            ref = Reference.static(data.get("reference_value", 0.0))
        elif kind == "ramp":
            ref = Reference.ramp(data.get("reference_slope", 0.0))
        else:
            raise ConfigurationError(f"unknown reference kind {kind!r}")
        Q = np.asarray(data.get("Q", _BASE["Q"]), dtype=float)
        attack = AttackConfig(
            delta=float(data.get("delta", _BASE["delta"])), eta=float(data.get("eta", _BASE["eta"])),
            R=float(data.get("R", _BASE["R"])), T=int(data.get("T", 20_000)),
            probe=str(data.get("probe", "sphere")), attack_dim=Q.shape[0], hold=int(data.get("hold", 1)))
        noise_kind = data.get("noise", "none")
        if noise_kind == "none":
            noise = NoiseSource()
        elif noise_kind == "gaussian":
            noise = NoiseSource.gaussian(float(data.get("noise_mean", 0.0)), float(data.get("noise_variance", 0.02)))
        elif noise_kind == "uniform":
            noise = NoiseSource.uniform(float(data.get("noise_lo", 0.0)), float(data.get("noise_hi", 0.02)))
        else:
            raise ConfigurationError(f"unknown noise kind {noise_kind!r}")
        out = data.get("out")
        return cls(scenario=data["scenario"], objective=AdversaryObjective(Q, ref), attack=attack, noise=noise,
                   trials=int(data.get("trials", 50)), seed=int(data.get("seed", 0)),
                   out=Path(out) if out else None, plots=bool(data.get("plots", False)), label=label)

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        return cls.from_mapping(data, label=Path(path).stem)

    def resolve_scenario(self) -> Scenario:
        if isinstance(self.scenario, str):
            return get_scenario(self.scenario)
        return scenario_from_mapping(self.scenario)

    def describe(self) -> dict:
        return {"scenario": self.scenario if isinstance(self.scenario, str) else dict(self.scenario),
                "objective": self.objective.describe(), "attack": self.attack.describe(),
                "noise": self.noise.describe(), "trials": int(self.trials), "seed": int(self.seed)}


def preset_configs(name: str, variant: str | None = None) -> list[ExperimentConfig]:
    """Configs of a preset; presets with variants expand to one config per variant."""
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}")
    variants = VARIANTS.get(name)
    if variants is None:
        if variant is not None:
            raise ConfigurationError(f"preset {name!r} has no variants")
        return [ExperimentConfig.from_mapping(PRESETS[name], label=name)]
    if variant is not None and variant not in variants:
        raise ConfigurationError(f"preset {name!r} variants: {', '.join(variants)}")
    chosen = [variant] if variant else list(variants)
    return [ExperimentConfig.from_mapping({**PRESETS[name], **variants[v]}, label=f"{name}/{v}") for v in chosen]


# ---------------------------------------------------------------------------
# execution


def _run_chunk(args):
    scenario_spec, objective, attack, noise, trials, seed, backend = args
    scenario = get_scenario(scenario_spec) if isinstance(scenario_spec, str) else scenario_from_mapping(scenario_spec)
    if supports_kernel(scenario):
        return run_batch(scenario, objective, attack, noise, trials, seed, backend=backend, store_states=False)
    return [run_attack(scenario, objective, attack, noise, t, seed, engine="python") for t in trials]


def run_trials(config: ExperimentConfig, workers: int | None = None, backend=None) -> list:
    """All trials of a config, ordered by trial index whatever the pool size."""
    trials = list(range(int(config.trials)))
    workers = max(1, min(int(workers or os.cpu_count() or 1), len(trials)))
    chunks = [trials[i::workers] for i in range(workers)]
    jobs = [(config.scenario, config.objective, config.attack, config.noise, c, int(config.seed), backend)
            for c in chunks if c]
    if workers == 1:
        results = [_run_chunk(jobs[0])]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_chunk, jobs))
    records = [r for chunk in results for r in chunk]
    return sorted(records, key=lambda r: r.trial)


def _slope(k, y) -> float:
    k = np.asarray(k, dtype=float)
    kc = k - k.mean()
    return float(np.dot(kc, y - y.mean()) / np.dot(kc, kc)) if k.size > 1 else 0.0


@dataclass
class ExperimentResult:
    exit_code: int
    summary: dict
    trajectory: dict
    records: list
    gap: analysis.GapReport | None
    paths: dict = field(default_factory=dict)


def evaluate_records(config: ExperimentConfig, scenario: Scenario, records: list) -> tuple[dict, dict, object]:
    """Aggregate trial records into the trajectory table and summary dict."""
    attack, obj = config.attack, config.objective
    T, p = int(attack.T), attack.attack_dim
    ok = [r for r in records if not r.diverged]
    diverged = len(records) - len(ok)
    k = np.arange(1, T + 1)
    ref = obj.reference.values(k)[:, 0]
    summary = {
        "label": config.label,
        "config": config.describe(),
        "config_fingerprint": attack.fingerprint(),
        "scenario_fingerprint": scenario.fingerprint(),
        "scenario": {"name": scenario.name, "stability": scenario.stability,
                     "spectral_radius": scenario.rho},
        "trials": len(records),
        "diverged_trials": diverged,
        "diverged_at": {str(r.trial): r.diverged_at for r in records if r.diverged},
    }
    # feasibility holds on every logged row, diverged trials included
    w2 = max((float(np.max(np.sum(r.w**2, axis=1), initial=0.0)) for r in records), default=0.0)
    th = max((float(np.max(np.linalg.norm(r.theta, axis=1), initial=0.0)) for r in records), default=0.0)
    summary["feasibility"] = {
        "max_w_sq_norm": w2, "w_feasible": bool(w2 <= attack.R * (1 + 1e-12)),
        "max_theta_norm": th,
        "theta_within_budget": bool(th <= math.sqrt(attack.R) + attack.delta + 1e-12),
    }
    if not ok:
        summary["error"] = "all trials diverged"
        return summary, {"k": k, "y_ref": ref}, None
    Y = np.stack([r.y[:, 0] for r in ok])
    y_mean = Y.mean(axis=0)
    theta_mean = np.stack([r.theta for r in ok]).mean(axis=0)
    tail = max(1, T // 5)
    summary["output"] = {
        "final_mean": float(y_mean[-1]),
        "tail_mean_final_20pct": float(y_mean[-tail:].mean()),
        "slope_fit": _slope(k, y_mean),
        "reference_slope": list(obj.reference.slope) if obj.reference.kind == "ramp" else None,
        "pooled": analysis.boxplot_stats(Y),
        "final": analysis.boxplot_stats(Y[:, -1]),
    }
    gap = None
    try:
        gap = analysis.optimality_gap(ok, scenario, obj, attack.R)
        summary["gap"] = gap.summary()
        gap_mean = gap.gap_mean
    except Exception as exc:  # oracle unavailable for exotic custom plants
        summary["gap"] = {"error": f"{type(exc).__name__}: {exc}"}
        gap_mean = np.full(T, np.nan)
    traj = {"k": k, "y_mean": y_mean, "y_ref": ref, "gap_mean": gap_mean, "theta_mean": theta_mean}
    return summary, traj, gap


def run_experiment(config: ExperimentConfig, *, workers: int | None = None, write: bool = True,
                   backend=None) -> ExperimentResult:
    """Run all trials, aggregate, and (optionally) write artifacts.

    Exit codes: 0 success, 2 configuration error, 3 more than 10 % of trials
    diverged (partial artifacts are still written), 4 I/O failure.
    """
    try:
        scenario = config.resolve_scenario()
        records = run_trials(config, workers, backend)
    except (ConfigurationError, AssumptionViolation) as exc:
        return ExperimentResult(EXIT_CONFIG, {"error": str(exc)}, {}, [], None)
    summary, traj, gap = evaluate_records(config, scenario, records)
    code = EXIT_OK
    if summary["diverged_trials"] > DIVERGENCE_FRACTION * len(records):
        code = EXIT_DIVERGED
    summary["exit_code"] = code
    result = ExperimentResult(code, summary, traj, records, gap)
    if write:
        out = Path(config.out) if config.out else default_out() / config.label
        try:
            result.paths = write_artifacts(out, summary, traj, config.attack.attack_dim, config.plots)
        except OSError as exc:
            result.exit_code = EXIT_IO
            result.summary["error"] = f"I/O failure: {exc}"
    return result


# ---------------------------------------------------------------------------
# artifacts


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def trajectory_csv(traj: dict, p: int) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "y_mean", "y_ref", "gap_mean"] + [f"theta_mean_{j + 1}" for j in range(p)])
    if "y_mean" in traj:
        for i, k in enumerate(traj["k"]):
            row = [int(k), traj["y_mean"][i], traj["y_ref"][i], traj["gap_mean"][i], *traj["theta_mean"][i]]
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    return buf.getvalue().encode()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def summary_json(summary: dict) -> bytes:
    return (json.dumps(_jsonable(summary), sort_keys=True, indent=2) + "\n").encode()


def write_artifacts(out: Path, summary: dict, traj: dict, p: int, plots: bool = False) -> dict:
    out = Path(out)
    paths = {"trajectory": out / "trajectory.csv", "summary": out / "summary.json"}
    _atomic_write(paths["trajectory"], trajectory_csv(traj, p))
    _atomic_write(paths["summary"], summary_json(summary))
    if plots and "y_mean" in traj:
        for name, data in plot_svgs(traj).items():
            paths[name] = out / f"{name}.svg"
            _atomic_write(paths[name], data)
    return paths


def plot_svgs(traj: dict) -> dict[str, bytes]:
    """Output-vs-reference and gap-vs-k as SVG bytes (deterministic metadata)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = {}
    with matplotlib.rc_context({"svg.hashsalt": "zofdi", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(traj["k"], traj["y_mean"], lw=0.8, label="ensemble-mean output")
        ax.plot(traj["k"], traj["y_ref"], "--", lw=0.8, label="reference")
        ax.set_xlabel("iteration k")
        ax.set_ylabel("y")
        ax.legend(loc="best")
        fig.tight_layout()
        out["output"] = _svg_bytes(fig)
        plt.close(fig)
        if np.all(np.isfinite(traj["gap_mean"])):
            fig, ax = plt.subplots(figsize=(6, 3.5))
            ax.plot(traj["k"], traj["gap_mean"], lw=0.8)
            ax.set_xlabel("iteration k")
            ax.set_ylabel("optimality gap")
            fig.tight_layout()
            out["gap"] = _svg_bytes(fig)
            plt.close(fig)
    return out


def _svg_bytes(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# listings and reports


def list_scenarios() -> list[dict]:
    rows = []
    for name in REGISTRY:
        sc = get_scenario(name)
        m = sc.plant
        rows.append({"name": name, "n": m.state_dim, "m": m.input_dim, "q": m.output_dim, "p": m.attack_dim,
                     "spectral_radius": sc.rho, "stability": sc.stability})
    return rows


def load_constants(path) -> tuple[analysis.TheoryConstants, dict]:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    extra = {k: data.pop(k) for k in ("p",) if k in data}
    return analysis.TheoryConstants.from_mapping(data), extra


def theory_report(constants: analysis.TheoryConstants, eps: float, T: int, *, kappa: float | None = None,
                  kappa_fraction: float = 0.5, p: int = 2, noisy: bool = False) -> dict:
    """Schedule, coupling matrix, spectral bound and feasibility verdicts.

    Infeasible inputs are reported, not raised.
    """
    mu, mu_ok = analysis.convergence_rate_mu(constants)
    rep = {"variant": "noisy" if noisy else "noiseless", "mu": mu, "mu_feasible": mu_ok,
           "epsilon": eps, "T": int(T), "p": int(p), "verdicts": []}
    if not mu_ok:
        why = "mu >= 1" if mu >= 1 else "mu < 0 (alpha3 > alpha2)"
        rep["verdicts"].append(f"infeasible: {why}; the plant contraction assumption fails")
        return rep
    ks = analysis.kappa_star(constants, T)
    rep.update(kappa_star=ks.kappa, xi1=ks.xi1, xi2=ks.xi2, xi3=ks.xi3)
    if noisy:
        if constants.sigma is None:
            raise ConfigurationError("the noisy report needs sigma in the constants file")
        bound = p**2 * math.sqrt(T) / (constants.sigma * eps)
        rep["kappa_bound"] = bound
    else:
        bound = ks.kappa
    if kappa is None:
        kappa = kappa_fraction * bound
    rep["kappa"] = kappa
    delta = eps / constants.M if constants.M > 0 else math.inf
    if noisy:
        eta = kappa * constants.sigma * eps / (p**2 * math.sqrt(T))
    else:
        eta = kappa * eps / (p * T)
    rep["delta"], rep["eta"] = delta, eta
    if not kappa < bound:
        if noisy:
            rep["verdicts"].append("infeasible kappa: violates kappa < p^2 sqrt(T)/(sigma eps)")
        else:
            bad = ks.violations(kappa) or ["kappa < kappa*"]
            rep["verdicts"].append(f"infeasible kappa: violates {'; '.join(bad)}")
    if not 0 < eta < 1:
        rep["verdicts"].append("infeasible step size: eta outside (0, 1)")
    if math.isfinite(delta) and eta > 0:
        P = analysis.coupling_matrix(constants, eta, delta, p, noisy=noisy)
        rep["coupling"] = P.as_dict()
        rep["rho"] = P.rho
        rep["verdicts"].append("rho < 1: feasible" if P.rho < 1 else "rho >= 1: infeasible")
    return rep
