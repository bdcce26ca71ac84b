"""Experiment runner: JSON configs in, CSV/JSON artifacts out.

A config names a game, a task and the task's parameters::

    {"spec_version": "1", "task": "run", "seed": 7,
     "game": {"game": "duopoly", "A": 100, "c1": 5, "c2": 2},
     "rule": {"name": "stackelberg"},
     "schedules": [{"kind": "polynomial", "gamma": 1, "p": 1},
                   {"kind": "polynomial", "gamma": 1, "p": 0.6667}],
     "noise": {"kind": "gaussian", "variance": 10},
     "x0": [[50], [50]], "max_iters": 100000, "record_every": 100}

All randomness derives from ``seed``: the run stream and each Monte-Carlo
replica stream are split from it by (task index, replica index), and the
multi-start search seeds its start points from it.
"""

from __future__ import annotations

import copy
import csv
import io
import itertools
import json
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import LockInSpec, NoiseModel, RunConfig, Schedule, lockin_curve, rule_from_json, rule_to_json, run
from .equilibria import classify, find_critical_points
from .errors import ConfigError, ContractError, SingularFollowerHessianError, StackdynError
from .games import game_from_json
from .linalg import SolveConfig
from .oracle import GameOracle, JointPoint, as_point, omega, omega_stackelberg

SPEC_VERSION = "1"
TASKS = ("run", "classify", "find", "spectrum_trace", "lockin", "sweep")
_DYNAMIC_TASKS = ("run", "spectrum_trace", "lockin", "sweep")


# ------------------------------------------------------------------ file I/O


def atomic_write(path, text: str) -> Path:
    """Write via a temp file in the target directory and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


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
    if isinstance(obj, JointPoint):
        return obj.to_list()
    return obj


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header: list[str], rows: list[list], comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


# --------------------------------------------------------------- config parse


def _get(cfg: dict, key: str, task: str):
    if key not in cfg:
        raise ConfigError(f"task {task!r} requires field {key!r}", field=key)
    return cfg[key]


def _point(value, oracle: GameOracle, field: str) -> JointPoint:
    try:
        if isinstance(value, list) and len(value) == 2 and all(isinstance(v, list) for v in value):
            return as_point(JointPoint(value[0], value[1]), oracle.dims)
        return as_point(np.asarray(value, dtype=float), oracle.dims)
    except (ContractError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad point for {field!r}: {exc}", field=field) from exc


def noise_from_json(d, seed: int) -> NoiseModel:
    if d is None:
        return NoiseModel(seed=seed)
    if not isinstance(d, dict):
        raise ConfigError("noise must be an object", field="noise")
    kind = d.get("kind", "none")
    if "variance" in d:
        sigma = np.sqrt(np.broadcast_to(np.asarray(d["variance"], dtype=float), (2,)))
    else:
        sigma = np.broadcast_to(np.asarray(d.get("sigma", 0.0), dtype=float), (2,))
    return NoiseModel(kind, tuple(float(s) for s in sigma), seed)


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", field="config") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}", field="config") from exc
    return cfg


def load_config(path) -> dict:
    return validate_config(read_json(path))


def validate_config(cfg) -> dict:
    """Check task-required fields before anything runs."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object", field="config")
    version = str(cfg.get("spec_version", SPEC_VERSION))
    if version.split(".")[0] != SPEC_VERSION:
        raise ConfigError(f"unsupported spec_version {version!r}", field="spec_version")
    task = cfg.get("task", "run")
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}", field="task")
    _get(cfg, "game", task)
    if task in _DYNAMIC_TASKS:
        for key in ("rule", "schedules", "max_iters"):
            _get(cfg, key, task)
        if task != "lockin":
            _get(cfg, "x0", task)
    if task == "classify":
        _get(_get(cfg, "classify", task), "x", task)
    if task == "find":
        _get(_get(cfg, "find", task), "region", task)
    if task == "lockin":
        lk = _get(cfg, "lockin", task)
        for key in ("target", "n_bar", "q0"):
            if key not in lk:
                raise ConfigError(f"lockin requires {key!r}", field=f"lockin.{key}")
    if task == "sweep":
        grid = _get(_get(cfg, "sweep", task), "grid", task)
        if not isinstance(grid, dict) or not grid or any(not isinstance(v, list) or not v for v in grid.values()):
            raise ConfigError("sweep grid must map parameter paths to nonempty lists", field="sweep.grid")
    return cfg


def build_run_config(cfg: dict, oracle: GameOracle, task_index: int = 0) -> RunConfig:
    seed = int(cfg.get("seed", 0))
    scheds = cfg["schedules"]
    if not isinstance(scheds, list) or len(scheds) != 2:
        raise ConfigError("schedules must be a list of two schedule objects", field="schedules")
    x0 = cfg.get("x0")
    if x0 is None and "lockin" in cfg:
        x0 = cfg["lockin"]["target"]
    try:
        return RunConfig(
            rule=rule_from_json(cfg["rule"]),
            schedules=(Schedule.from_json(scheds[0]), Schedule.from_json(scheds[1])),
            x0=_point(x0, oracle, "x0"),
            max_iters=int(cfg["max_iters"]),
            noise=noise_from_json(cfg.get("noise"), seed),
            stop_grad_tol=cfg.get("stop_grad_tol"),
            record_every=int(cfg.get("record_every", 1)),
            spectra_every=cfg.get("spectra_every"),
            spectra_k=int(cfg.get("spectra_k", 6)),
            task_index=int(cfg.get("task_index", task_index)),
            fast_path=bool(cfg.get("fast_path", True)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad dynamics settings: {exc}", field="rule") from exc


# ------------------------------------------------------------------- tasks


def _spectrum_rows(traj, k: int):
    ops = ("J", "S1", "H1", "H2")
    widths = {op: 0 for op in ops}
    for snap in traj.spectra:
        for op in ops:
            widths[op] = max(widths[op], len(snap[op]["smallest"]))
    header = ["k"]
    for op in ops:
        header += [f"{op}_smallest_{i}" for i in range(widths[op])]
        header += [f"{op}_largest_{i}" for i in range(widths[op])]
    rows = []
    for snap in traj.spectra:
        row = [snap["k"]]
        for op in ops:
            for which in ("smallest", "largest"):
                vals = list(snap[op][which]) + [float("nan")] * (widths[op] - len(snap[op][which]))
                row += vals
        rows.append(row)
    return header, rows


def task_run(cfg: dict, oracle: GameOracle, out: Path, task_index: int = 0, name: str = "trajectory") -> dict:
    rc = build_run_config(cfg, oracle, task_index)
    traj = run(rc, oracle)
    csv_path = atomic_write(out / f"{name}.csv", traj.to_csv_string())
    side = traj.sidecar()
    side.update(rule=rule_to_json(rc.rule), two_timescale=rc.two_timescale, noise=rc.noise.to_json(), spec_version=SPEC_VERSION)
    atomic_write(out / f"{name}.csv.json", dumps(side))
    written = {"trajectory": str(csv_path)}
    if traj.spectra:
        header, rows = _spectrum_rows(traj, rc.spectra_k)
        written["spectrum_trace"] = str(atomic_write(out / "spectrum_trace.csv", csv_text(header, rows)))
    return {"paths": written, "trajectory": traj, "run_config": rc}


def task_spectrum_trace(cfg: dict, oracle: GameOracle, out: Path) -> dict:
    cfg = dict(cfg)
    cfg.setdefault("spectra_every", cfg.get("record_every", 1))
    return task_run(cfg, oracle, out)


def task_classify(cfg: dict, oracle: GameOracle, out: Path) -> dict:
    c = cfg["classify"]
    x = _point(c["x"], oracle, "classify.x")
    res = classify(oracle, x, float(c.get("eta", 0.0)), float(c.get("tol_eig", 1e-6)), float(c.get("crit_tol", 1e-6)))
    payload = {"spec_version": SPEC_VERSION, "classification": res.to_json()}
    return {"paths": {"classification": str(atomic_write(out / "classification.json", dumps(payload)))}, "classification": res}


def task_find(cfg: dict, oracle: GameOracle, out: Path) -> dict:
    f = cfg["find"]
    region = f["region"]
    field = f.get("field", "sim")
    eta = float(f.get("eta", 0.0))
    pts = find_critical_points(
        oracle,
        field,
        (region[0], region[1]),
        int(f.get("n_starts", 64)),
        float(f.get("tol", 1e-8)),
        eta,
        int(cfg.get("seed", 0)),
    )
    entries = []
    for p in pts:
        c = classify(oracle, p.x, eta, float(f.get("tol_eig", 1e-6)), float(f.get("crit_tol", 1e-6)))
        entries.append({**p.to_json(), "classification": c.to_json()})
    summary = {
        "count": len(entries),
        "dne": sum(e["classification"]["is_dne"] for e in entries),
        "dse": sum(e["classification"]["is_dse"] for e in entries),
        "non_nash_attractors": sum(e["classification"]["non_nash_attractor"] for e in entries),
        "non_nash_attractor_and_dse": sum(
            e["classification"]["non_nash_attractor"] and e["classification"]["is_dse"] for e in entries
        ),
    }
    payload = {"spec_version": SPEC_VERSION, "field": field, "eta": eta, "points": entries, "summary": summary}
    return {"paths": {"critical_points": str(atomic_write(out / "critical_points.json", dumps(payload)))}, "summary": summary}


def task_lockin(cfg: dict, oracle: GameOracle, out: Path) -> dict:
    lk = cfg["lockin"]
    rc = build_run_config(cfg, oracle)
    eps = lk.get("epsilons", [lk.get("epsilon", 0.1)])
    spec = LockInSpec(
        target=_point(lk["target"], oracle, "lockin.target"),
        epsilon=float(min(eps)),
        n_bar=int(lk["n_bar"]),
        q0=float(lk["q0"]),
        replicas=int(lk.get("replicas", 1000)),
        n0=int(lk.get("n0", 0)),
    )
    results = lockin_curve(rc, oracle, spec, [float(e) for e in eps])
    payload = {
        "spec_version": SPEC_VERSION,
        "replicas": spec.replicas,
        "n_bar": spec.n_bar,
        "q0": spec.q0,
        "max_iters": rc.max_iters,
        "results": [r.to_json() for r in results],
    }
    return {"paths": {"lockin": str(atomic_write(out / "lockin.json", dumps(payload)))}, "results": results}


def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {} if k not in node else node[k]
            if not isinstance(node[k], dict):
                raise ConfigError(f"cannot set {dotted!r}: {k!r} is not an object", field=f"sweep.grid.{dotted}")
        node = node[k]
    node[keys[-1]] = copy.deepcopy(value)


def task_sweep(cfg: dict, oracle_unused, out: Path) -> dict:
    """One ``run`` per cell of the Cartesian parameter grid, in parallel.

    Cell ``i`` (row-major over the grid keys in sorted order) uses task
    index ``i`` for its noise stream.  A failing cell records its error in
    its row; the others continue.
    """
    sw = cfg["sweep"]
    keys = sorted(sw["grid"])
    cells = list(itertools.product(*(sw["grid"][k] for k in keys)))
    target = sw.get("target")
    thresholds = sw.get("thresholds", {})

    def one(i, values):
        c = copy.deepcopy(cfg)
        c["task"] = "run"
        c.pop("sweep", None)
        for k, v in zip(keys, values):
            _set_path(c, k, v)
        row = {"cell": i, **{k: json.dumps(v, sort_keys=True) for k, v in zip(keys, values)}}
        try:
            oracle = game_from_json(c["game"])
            res = task_run(c, oracle, out, task_index=i, name=f"cell_{i:04d}")
            traj = res["trajectory"]
            row.update(
                terminal_reason=traj.terminal_reason,
                iterations=traj.iterations,
                grad_norm=float(traj.grad_norm[-1]),
                error="",
            )
            if target is not None:
                row["distance_to_target"] = float(np.linalg.norm(traj.final.flat - _point(target, oracle, "sweep.target").flat))
            if thresholds:
                row["iterations_to_threshold"] = traj.iterations_to(thresholds)
            for name, vals in traj.metrics.items():
                row[f"final_{name}"] = float(vals[-1])
        except (StackdynError, ValueError, ArithmeticError) as exc:
            row.update(terminal_reason="error", error=f"{type(exc).__name__}: {exc}")
        return row

    with ThreadPoolExecutor() as pool:
        rows = list(pool.map(lambda t: one(*t), enumerate(cells)))
    fixed = ["cell"] + keys + ["terminal_reason", "iterations", "grad_norm"]
    if target is not None:
        fixed.append("distance_to_target")
    if thresholds:
        fixed.append("iterations_to_threshold")
    extra = sorted({k for r in rows for k in r if k.startswith("final_")})
    header = fixed + extra + ["error"]
    text = csv_text(header, [[r.get(h) for h in header] for r in rows])
    return {"paths": {"sweep": str(atomic_write(out / "sweep.csv", text))}, "rows": rows}


TASK_FUNCS = {
    "run": task_run,
    "classify": task_classify,
    "find": task_find,
    "spectrum_trace": task_spectrum_trace,
    "lockin": task_lockin,
    "sweep": task_sweep,
}


def run_experiment(cfg: dict, out_dir=None, seed: int | None = None) -> dict:
    """Validate ``cfg`` and execute its task, writing artifacts under ``out_dir``."""
    cfg = validate_config(copy.deepcopy(cfg))
    if seed is not None:
        cfg["seed"] = int(seed)
    out = Path(out_dir or cfg.get("output_dir", "."))
    oracle = game_from_json(cfg["game"])
    return TASK_FUNCS[cfg.get("task", "run")](cfg, oracle, out)


# ------------------------------------------------------------- vector field


@dataclass
class VectorFieldGrid:
    lo: tuple[float, float]
    hi: tuple[float, float]
    resolution: tuple[int, int]
    field: str
    eta: float
    points: np.ndarray  # (n, 2)
    values: np.ndarray  # (n, 2), descent direction

    def to_csv(self) -> str:
        kind = "simultaneous" if self.field == "sim" else f"hierarchical (eta={self.eta!r})"
        comment = f"(u, v) is the descent direction: minus the {kind} gradient field"
        rows = [[p[0], p[1], v[0], v[1]] for p, v in zip(self.points, self.values)]
        return csv_text(["x1", "x2", "u", "v"], rows, comment=comment)


def emit_vector_field(oracle: GameOracle, field: str = "sim", box=((-1.0, -1.0), (1.0, 1.0)), resolution=(20, 20), eta: float = 0.0) -> VectorFieldGrid:
    """Sample ``-omega`` or ``-omega_S`` on a regular grid (two-dimensional games only)."""
    if oracle.dims.d != 2:
        raise ContractError(f"vector fields are only emitted for two-dimensional games, got d={oracle.dims.d}")
    nx, ny = (int(r) for r in np.broadcast_to(np.asarray(resolution), (2,)))
    if nx < 2 or ny < 2:
        raise ContractError("resolution must be >= 2 per axis")
    lo, hi = np.asarray(box[0], dtype=float), np.asarray(box[1], dtype=float)
    xs, ys = np.linspace(lo[0], hi[0], nx), np.linspace(lo[1], hi[1], ny)
    pts, vals = [], []
    solver = SolveConfig(method="dense")
    for a in xs:
        for b in ys:
            x = JointPoint([a], [b])
            try:
                w = omega(oracle, x) if field == "sim" else omega_stackelberg(oracle, x, eta, solver)
                vals.append(0.0 - w.flat)
            except SingularFollowerHessianError:
                vals.append(np.full(2, np.nan))
            pts.append((a, b))
    return VectorFieldGrid(tuple(lo), tuple(hi), (nx, ny), field, float(eta), np.array(pts), np.array(vals))


def field_from_config(cfg: dict, out_dir=None) -> Path:
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object", field="config")
    _get(cfg, "game", "field")
    fcfg = _get(cfg, "field", "field")
    for key in ("box", "resolution"):
        if key not in fcfg:
            raise ConfigError(f"field requires {key!r}", field=f"field.{key}")
    oracle = game_from_json(cfg["game"])
    grid = emit_vector_field(oracle, fcfg.get("kind", "sim"), fcfg["box"], fcfg["resolution"], float(fcfg.get("eta", 0.0)))
    out = Path(out_dir or cfg.get("output_dir", "."))
    return atomic_write(out / "vector_field.csv", grid.to_csv())
