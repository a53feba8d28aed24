"""Configuration-driven experiment runner.

An experiment is a JSON file validated by :class:`ExperimentConfig`. A run
writes, into its output directory,

* ``progress.csv``: one row per iteration (columns in :data:`CSV_COLUMNS`),
* ``checkpoint.json``: the policies after the last completed iteration,
* ``policy.json``: the final policies (and global policy for MDGPS),
* ``summary.json``: final evaluation costs,
* ``manifest.json``: resolved config, its hash, the seed and library versions.

A manifest can be passed back as a config; the run then reproduces every
artifact byte for byte.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import platform
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
import scipy
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import __version__
from .core import TvlgPolicy, sample_rollouts
from .envs import load_condition, make_env
from .errors import ConfigurationError, NumericalError, PilqrError
from .lqr_flm import LqrConfig
from .mdgps import GlobalPolicy, MdgpsConfig, mdgps_iteration
from .pi2 import Pi2Config
from .pilqr import AlgorithmConfig, run_iteration

CSV_COLUMNS = (
    "iteration",
    "episodes_cumulative",
    "mean_cost",
    "std_cost",
    "residual_ratio",
    "mean_eps",
    "mean_eta_lqr",
    "mean_eta_pi2",
)
COMPARE_COLUMNS = ("name", "algorithm", "iteration", "episodes_cumulative", "mean_cost", "std_cost", "seed_std", "n_seeds")
MANIFEST_SCHEMA = "pilqr-manifest"
# iteration slot reserved for the final evaluation samples
EVAL_STREAM = 2**32 - 1


class AlignmentError(PilqrError):
    """Experiments cannot be put on a shared axis (different horizons)."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Pi2Params(_Strict):
    fit_gains: bool = True
    covariance_damping: float = Field(0.9, gt=0.0, le=1.0)
    covariance_floor: float = Field(1e-6, ge=0.0)
    min_ess: float = Field(2.0, ge=1.0)
    reg: float = Field(1e-6, ge=0.0)
    log10_eta_bounds: tuple[float, float] = (-6.0, 6.0)


class LqrParams(_Strict):
    eta_min: float = Field(1e-6, gt=0.0)
    eta_max: float = Field(1e6, gt=0.0)
    kl_tol: float = Field(0.05, gt=0.0)
    mu_start: float = Field(1e-6, gt=0.0)
    mu_max: float = Field(1e2, gt=0.0)


class MdgpsParams(_Strict):
    hidden: list[int] = Field(default_factory=list)
    epochs: int = Field(300, ge=1)
    lr: float = Field(0.1, gt=0.0)
    local_reference_until_fitted: bool = True


class ExperimentConfig(_Strict):
    """Everything a run depends on besides the seed.

    ``conditions`` holds condition file paths (relative to the config file)
    or inline condition objects. ``algorithm="mdgps"`` trains one local
    policy per condition with ``local_algorithm`` and distills them into a
    global policy.
    """

    name: str = "experiment"
    env: Literal["lq", "reacher", "pusher"]
    conditions: list[Union[str, dict]] = Field(min_length=1)
    horizon: Optional[int] = Field(None, ge=2)
    algorithm: Literal["pi2", "lqr_flm", "pilqr", "mdgps"] = "pilqr"
    local_algorithm: Literal["pi2", "lqr_flm", "pilqr"] = "pilqr"
    iterations: int = Field(20, ge=1)
    n_samples: int = Field(20, ge=2)
    initial_variance: float = Field(1.0, gt=0.0)
    eps_init: float = Field(1.0, gt=0.0)
    eps_min: float = Field(1e-3, gt=0.0)
    eps_max: float = Field(10.0, gt=0.0)
    adapt_eps: bool = True
    ratio_low: float = Field(0.2, ge=0.0)
    ratio_high: float = Field(0.5, ge=0.0)
    eps_multiplier: float = Field(2.0, gt=1.0)
    pi2_eps: Optional[float] = Field(None, gt=0.0)
    pi2_eta_on_residual: bool = True
    residual_fit_gains: bool = False
    dynamics_reg: float = Field(1e-6, ge=0.0)
    covariance_floor: float = Field(1e-6, ge=0.0)
    pi2: Pi2Params = Field(default_factory=Pi2Params)
    lqr: LqrParams = Field(default_factory=LqrParams)
    mdgps: MdgpsParams = Field(default_factory=MdgpsParams)
    eval_samples: int = Field(50, ge=0)
    seeds: list[Annotated[int, Field(ge=0)]] = Field(default_factory=lambda: [0], min_length=1)
    output_dir: Optional[str] = None

    @field_validator("eps_max")
    @classmethod
    def _eps_order(cls, v, info):
        lo = info.data.get("eps_min")
        if lo is not None and v <= lo:
            raise ValueError("eps_max must exceed eps_min")
        return v

    @field_validator("ratio_high")
    @classmethod
    def _ratio_order(cls, v, info):
        lo = info.data.get("ratio_low")
        if lo is not None and v < lo:
            raise ValueError("ratio_high must not be below ratio_low")
        return v

    def algorithm_config(self) -> AlgorithmConfig:
        alg = self.local_algorithm if self.algorithm == "mdgps" else self.algorithm
        return AlgorithmConfig(
            algorithm=alg,
            n_samples=self.n_samples,
            eps_init=self.eps_init,
            eps_min=self.eps_min,
            eps_max=self.eps_max,
            ratio_low=self.ratio_low,
            ratio_high=self.ratio_high,
            eps_multiplier=self.eps_multiplier,
            adapt_eps=self.adapt_eps,
            pi2_eps=self.pi2_eps,
            pi2_eta_on_residual=self.pi2_eta_on_residual,
            residual_fit_gains=self.residual_fit_gains,
            dynamics_reg=self.dynamics_reg,
            covariance_floor=self.covariance_floor,
            lqr=LqrConfig(**self.lqr.model_dump()),
            pi2=Pi2Config(**{**self.pi2.model_dump(), "log10_eta_bounds": tuple(self.pi2.log10_eta_bounds)}),
        )

    def mdgps_config(self) -> MdgpsConfig:
        return MdgpsConfig(
            algorithm=self.algorithm_config(),
            hidden=tuple(self.mdgps.hidden),
            epochs=self.mdgps.epochs,
            lr=self.mdgps.lr,
            local_reference_until_fitted=self.mdgps.local_reference_until_fitted,
        )

    def resolved(self, base_dir=".") -> "ExperimentConfig":
        """Copy with condition files read and inlined; raises if one is missing."""
        conds = []
        for c in self.conditions:
            if isinstance(c, str):
                path = Path(base_dir) / c
                if not path.is_file():
                    raise ConfigurationError(f"condition file not found: {path}")
                conds.append(load_condition(path))
            else:
                conds.append(dict(c))
        return self.model_copy(update={"conditions": conds})

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def build_envs(self):
        kw = {"horizon": self.horizon} if self.horizon is not None else {}
        envs = []
        for i, c in enumerate(self.conditions):
            if isinstance(c, str):
                raise ConfigurationError("conditions must be resolved before building environments")
            try:
                envs.append(make_env(self.env, c, **kw))
            except TypeError as e:
                raise ConfigurationError(f"condition {i}: {e}") from None
        return envs


def _key_line(text: str, loc) -> Optional[int]:
    """Best-effort line of the innermost string key in ``loc`` within the JSON source."""
    keys = [k for k in loc if isinstance(k, str)]
    start = 0
    line = None
    for key in keys:
        m = re.compile(r'"' + re.escape(key) + r'"\s*:').search(text, start)
        if m is None:
            break
        start = m.end()
        line = text.count("\n", 0, m.start()) + 1
    return line


def parse_config(text: str, source="<config>") -> ExperimentConfig:
    """Validate JSON text; errors carry ``source:line`` for each problem."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{source}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    if isinstance(data, dict) and data.get("schema") == MANIFEST_SCHEMA:
        data = data["config"]
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        lines = []
        for err in e.errors():
            where = ".".join(str(p) for p in err["loc"]) or "<root>"
            ln = _key_line(text, err["loc"])
            prefix = f"{source}:{ln}" if ln else source
            lines.append(f"{prefix}: {where}: {err['msg']}")
        raise ConfigurationError("\n".join(lines)) from None


def load_config(path) -> ExperimentConfig:
    """Read, validate and resolve condition files relative to the config's directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigurationError(f"{path}: {e.strerror}") from None
    return parse_config(text, str(path)).resolved(path.parent)


def load_manifest_seed(path) -> Optional[int]:
    """The seed stored in a manifest file, or None for a plain config."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError):
        return None
    if isinstance(data, dict) and data.get("schema") == MANIFEST_SCHEMA:
        return int(data["seed"])
    return None


def worker_count(n_tasks: int) -> int:
    cap = os.environ.get("PILQR_THREADS")
    limit = os.cpu_count() or 1
    if cap:
        try:
            limit = max(1, int(cap))
        except ValueError:
            raise ConfigurationError(f"PILQR_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(limit, n_tasks))


def iteration_seed(seed: int, iteration: int, stream: int = 0) -> int:
    """A 63-bit sampling seed for ``(seed, iteration, stream)``."""
    state = np.random.SeedSequence([seed, iteration, stream]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _csv_text(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([r[c] if isinstance(r[c], str) else _fmt(r[c]) for c in columns])
    return buf.getvalue()


def _write(path: Path, text: str):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def versions() -> dict:
    return {"pilqr": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


def manifest(config: ExperimentConfig, seed: int) -> dict:
    return {
        "schema": MANIFEST_SCHEMA,
        "config": config.model_dump(mode="json"),
        "config_hash": config.config_hash(),
        "seed": int(seed),
        "versions": versions(),
    }


def aggregate_row(iteration, reports, episodes_cumulative) -> dict:
    """Fold per-condition reports of one iteration into one CSV row.

    ``std_cost`` is the spread of all episodes of the iteration pooled over
    conditions (equal batch sizes, so the law of total variance applies).
    """
    means = np.array([r.mean_cost for r in reports])
    stds = np.array([r.std_cost for r in reports])
    pooled = float(np.sqrt(max(np.mean(stds**2 + means**2) - means.mean() ** 2, 0.0)))

    def mean_of(attr):
        vals = [getattr(r, attr) for r in reports]
        vals = [v for v in vals if np.isfinite(v)]
        return float(np.mean(vals)) if vals else float("nan")

    return {
        "iteration": iteration,
        "episodes_cumulative": episodes_cumulative,
        "mean_cost": float(means.mean()),
        "std_cost": pooled,
        "residual_ratio": mean_of("residual_ratio"),
        "mean_eps": mean_of("mean_eps"),
        "mean_eta_lqr": mean_of("mean_eta_lqr"),
        "mean_eta_pi2": mean_of("mean_eta_pi2"),
    }


@dataclass
class RunResult:
    rows: list
    policies: list
    global_policy: Optional[GlobalPolicy]
    final_costs: list
    out_dir: Path

    @property
    def final_cost(self) -> float:
        return float(np.mean(self.final_costs)) if self.final_costs else float("nan")


def _policies_doc(policies, gp, iteration):
    doc = {"iteration": iteration, "policies": [p.to_dict() for p in policies]}
    if gp is not None:
        doc["global_policy"] = gp.to_dict()
    return doc


def evaluate(policies, envs, seed, n) -> list:
    """Mean total cost of ``n`` fresh samples of each policy on its condition."""
    if n == 0:
        return []
    out = []
    for c, (p, env) in enumerate(zip(policies, envs)):
        batch = sample_rollouts(p, env, n, iteration_seed(seed, EVAL_STREAM, c), str(c))
        out.append(float(batch.total_costs().mean()))
    return out


def run_experiment(config: ExperimentConfig, seed: int, out_dir=None) -> RunResult:
    """Run ``config.iterations`` iterations for one seed and write all artifacts.

    Conditions are updated concurrently on a pool capped by ``PILQR_THREADS``;
    results do not depend on the pool size. On a numerical error the CSV
    rows so far and the last good checkpoint stay on disk and the error
    propagates.
    """
    if seed < 0:
        raise ConfigurationError(f"seed must be nonnegative, got {seed}")
    if any(isinstance(c, str) for c in config.conditions):
        config = config.resolved()
    out = Path(out_dir or config.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    envs = config.build_envs()
    horizons = {e.horizon for e in envs}
    if len(horizons) != 1:
        raise ConfigurationError(f"conditions disagree on horizon: {sorted(horizons)}")
    T = horizons.pop()
    dX, dU = envs[0].dim_x, envs[0].dim_u
    policies = [TvlgPolicy.initial(T, dX, dU, variance=config.initial_variance) for _ in envs]
    eps = [None] * len(envs)
    alg = config.algorithm_config()
    gp = None
    mcfg = None
    if config.algorithm == "mdgps":
        mcfg = config.mdgps_config()
        gp = GlobalPolicy(dX, dU, tuple(config.mdgps.hidden), seed=seed)

    _write(out / "manifest.json", _json(manifest(config, seed)))
    rows, episodes = [], 0
    _write(out / "checkpoint.json", _json(_policies_doc(policies, gp, -1)))
    with ThreadPoolExecutor(max_workers=worker_count(len(envs))) as pool:
        for it in range(config.iterations):
            try:
                if gp is not None:
                    policies, gp, eps, reports, _ = mdgps_iteration(
                        envs, policies, gp, mcfg, iteration_seed(seed, it), eps_list=eps if eps[0] is not None else None,
                        iteration=it,
                    )
                else:
                    jobs = [
                        pool.submit(run_iteration, env, p, alg, iteration_seed(seed, it, c), e, it, str(c))
                        for c, (env, p, e) in enumerate(zip(envs, policies, eps))
                    ]
                    results = [j.result() for j in jobs]
                    policies = [r[0] for r in results]
                    reports = [r[1] for r in results]
                    eps = [r.eps for r in reports]
            except NumericalError:
                _write(out / "progress.csv", _csv_text(rows, CSV_COLUMNS))
                raise
            episodes += sum(r.episodes for r in reports)
            rows.append(aggregate_row(it, reports, episodes))
            _write(out / "progress.csv", _csv_text(rows, CSV_COLUMNS))
            _write(out / "checkpoint.json", _json(_policies_doc(policies, gp, it)))

    final = evaluate(policies, envs, seed, config.eval_samples)
    _write(out / "policy.json", _json(_policies_doc(policies, gp, config.iterations - 1)))
    _write(
        out / "summary.json",
        _json({"final_cost": float(np.mean(final)) if final else None, "per_condition_final_cost": final}),
    )
    return RunResult(rows, policies, gp, final, out)


def read_progress(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k in ("iteration", "episodes_cumulative") else float(v)) for k, v in r.items()} for r in rows]


def compare(configs, out_dir, run=True) -> list[dict]:
    """Run every seed of every config and align their learning curves.

    ``configs`` is a list of :class:`ExperimentConfig` (resolved) or paths.
    Each run lands in ``out_dir/<name>/seed_<s>``. The table has one row per
    config and iteration: cross-seed mean of ``mean_cost``, mean within-run
    ``std_cost``, cross-seed standard deviation and the seed count. Configs
    may have different iteration counts and budgets; all share the iteration
    axis. Different horizons raise :class:`AlignmentError`.
    """
    out = Path(out_dir)
    cfgs = [load_config(c) if isinstance(c, (str, Path)) else c for c in configs]
    names = [c.name for c in cfgs]
    if len(set(names)) != len(names):
        # disambiguate identically named configs by position
        names = [f"{n}_{i}" for i, n in enumerate(names)]
    horizons = {n: {e.horizon for e in c.build_envs()} for n, c in zip(names, cfgs)}
    flat = {h for hs in horizons.values() for h in hs}
    if len(flat) != 1:
        raise AlignmentError(f"cannot align experiments with horizons {horizons}")

    table, summary = [], []
    for name, cfg in zip(names, cfgs):
        curves, finals = [], []
        for s in cfg.seeds:
            d = out / name / f"seed_{s}"
            if run:
                res = run_experiment(cfg, s, d)
                finals.append(res.final_cost)
            else:
                finals.append(json.loads((d / "summary.json").read_text())["final_cost"])
            curves.append(read_progress(d / "progress.csv"))
        for it in range(min(len(c) for c in curves)):
            mc = np.array([c[it]["mean_cost"] for c in curves])
            table.append(
                {
                    "name": name,
                    "algorithm": cfg.algorithm,
                    "iteration": it,
                    "episodes_cumulative": curves[0][it]["episodes_cumulative"],
                    "mean_cost": float(mc.mean()),
                    "std_cost": float(np.mean([c[it]["std_cost"] for c in curves])),
                    "seed_std": float(mc.std()),
                    "n_seeds": len(curves),
                }
            )
        fin = np.array([f for f in finals if f is not None], float)
        summary.append(
            {
                "name": name,
                "algorithm": cfg.algorithm,
                "n_seeds": len(finals),
                "final_cost_median": float(np.median(fin)) if fin.size else float("nan"),
                "final_cost_mean": float(np.mean(fin)) if fin.size else float("nan"),
                "final_cost_std": float(np.std(fin)) if fin.size else float("nan"),
            }
        )
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "compare.csv", _csv_text(table, COMPARE_COLUMNS))
    _write(out / "summary.csv", _csv_text(summary, tuple(summary[0])))
    return table
