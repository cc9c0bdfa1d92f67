"""Experiment presets, run directories and the ``irl`` command line.

Config files are flat ``key = value`` text; ``#`` starts a comment.  Every
preset fills in the remaining keys, so a file holding only ``preset = ...``
is a complete experiment.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import costs as costs_mod
from .costs import export_weights_csv, load_cost, make_cost, rebase, relativize_demo, save_cost
from .dynamics import (GroundTruthModel, LearnedModel, TrainHyperparams, TrainingDiverged, load_checkpoint,
                       save_checkpoint, train)
from .irl import (Episode, IrlConfig, apprenticeship_train, evaluate_cost, train_irl, write_record_csv)
from .planner import clamp_actions, execute_plan, optimize_actions, write_plan
from .sim_env import (ArmConfig, ArmEnv, CameraMap, SystemState, generate_demo, generate_sine_data, initial_state,
                      placing_task, reaching_task, read_dataset_csv, read_demo_csv, write_dataset_csv,
                      write_demo_csv)

OUT_ENV = "KPIRL_OUT"
DEFAULT_ROOT = "runs"
SINE_FREQUENCIES = (0.05, 0.13, 0.31)
SINE_AMPLITUDES = (0.5, 0.25, 0.08)


class HarnessError(RuntimeError):
    pass


PRESETS = {
    "sim-reaching-known": dict(
        horizon=25, model="known", n_demos=15, n_test=5, train_sizes=(1,), cost_families=("weighted",),
        seeds=(0,), epochs=500, eta=300.0, alpha=1e-4, iters_max=10, eval_every=1,
        center=(1.2, 0.9, -0.6), noise=0.15, ease=3.0, dx_range=(0.12, 0.2),
    ),
    "reaching-learned": dict(
        horizon=25, model="learned", n_demos=15, n_test=5, train_sizes=(1, 10),
        cost_families=("weighted", "timedep", "rbf"), seeds=(0, 1, 2), epochs=140, eta=150.0, alpha=1e-4,
        iters_max=10, eval_every=10, backtrack=True, center=(1.2, 0.9, -0.6), noise=0.15, ease=3.0, dx_range=(0.12, 0.2),
    ),
    "placing": dict(
        horizon=10, model="learned", n_demos=1, n_test=2, train_sizes=(1,),
        cost_families=("weighted", "timedep", "rbf"), seeds=(0,), epochs=1000, eta=1000.0, alpha=1e-3,
        iters_max=30, eval_every=50, center=(1.2, 0.9, -0.6), noise=0.0, ease=1.0,
        place_shift=(-0.15, -0.12), second_start=(0.15, -0.1, 0.1),
    ),
}


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str
    horizon: int
    model: str
    n_demos: int
    n_test: int
    train_sizes: tuple
    cost_families: tuple
    seeds: tuple
    irl: IrlConfig
    center: tuple
    noise: float = 0.15
    ease: float = 1.0
    dx_range: tuple = (0.12, 0.2)
    place_shift: tuple = (-0.15, -0.12)
    second_start: tuple = (0.15, -0.1, 0.1)
    dyn_epochs: int = 200
    dyn_samples: int = 2000
    out_dir: Optional[str] = None
    svg: bool = False
    workers: int = 1
    cost_file: Optional[str] = None
    arm: ArmConfig = field(default_factory=ArmConfig)
    camera: CameraMap = field(default_factory=CameraMap)

    @property
    def root(self) -> Path:
        base = self.out_dir or os.environ.get(OUT_ENV) or DEFAULT_ROOT
        return Path(base) / self.preset

    def run_dir(self, seed: int) -> Path:
        return self.root / f"seed_{seed}"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seeds=(seed,), irl=replace(self.irl, seed=seed))

    def digest(self) -> str:
        d = asdict(self)
        d.pop("out_dir")
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()


def _ints(v):
    return tuple(int(x) for x in v.split(","))


def _floats(v):
    return tuple(float(x) for x in v.split(","))


def _words(v):
    return tuple(x.strip() for x in v.split(",") if x.strip())


def _bool(v):
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


# config key -> (parser, target field); IRL fields live under "irl."
KEYS = {
    "preset": (str, "preset"),
    "seed": (lambda v: (int(v),), "seeds"),
    "seeds": (_ints, "seeds"),
    "epochs": (int, "irl.epochs"),
    "eta": (float, "irl.eta"),
    "alpha": (float, "irl.alpha"),
    "iters_max": (int, "irl.iters_max"),
    "cost_family": (_words, "cost_families"),
    "kernels": (int, "irl.n_kernels"),
    "gamma": (float, "irl.gamma"),
    "margin": (float, "irl.margin"),
    "eval_alpha": (float, "irl.eval_alpha"),
    "eval_iters": (int, "irl.eval_iters"),
    "eval_every": (int, "irl.eval_every"),
    "backtrack": (_bool, "irl.backtrack"),
    "out_dir": (str, "out_dir"),
    "train_sizes": (_ints, "train_sizes"),
    "model": (str, "model"),
    "n_demos": (int, "n_demos"),
    "n_test": (int, "n_test"),
    "noise": (float, "noise"),
    "ease": (float, "ease"),
    "center": (_floats, "center"),
    "dyn_epochs": (int, "dyn_epochs"),
    "dyn_samples": (int, "dyn_samples"),
    "svg": (_bool, "svg"),
    "workers": (int, "workers"),
    "cost_file": (str, "cost_file"),
}


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines into typed values (unknown keys are errors)."""
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise HarnessError(f"line {n}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise HarnessError(f"line {n}: unknown key {key!r} (known: {', '.join(sorted(KEYS))})")
        try:
            values[key] = KEYS[key][0](value)
        except ValueError as exc:
            raise HarnessError(f"line {n}: bad value for {key}: {exc}") from None
    return values


def build_config(values: dict) -> ExperimentConfig:
    preset = values.get("preset")
    if preset not in PRESETS:
        raise HarnessError(f"preset must be one of {', '.join(PRESETS)}; got {preset!r}")
    base = dict(PRESETS[preset])
    irl_fields = {k: base.pop(k) for k in ("epochs", "eta", "alpha", "iters_max", "eval_every", "backtrack") if k in base}
    for key, value in values.items():
        target = KEYS[key][1]
        if target.startswith("irl."):
            irl_fields[target[4:]] = value
        else:
            base[target] = value
    if base["model"] not in ("known", "learned"):
        raise HarnessError(f"model must be 'known' or 'learned', got {base['model']!r}")
    for fam in base["cost_families"]:
        if fam not in costs_mod.FAMILIES:
            raise HarnessError(f"unknown cost family {fam!r}")
    base["seeds"] = tuple(base["seeds"])
    irl_fields["seed"] = base["seeds"][0]
    try:
        irl = IrlConfig(**irl_fields)
    except ValueError as exc:
        raise HarnessError(str(exc)) from None
    if base["n_test"] >= base["n_demos"] and preset != "placing":
        raise HarnessError("need more demonstrations than test demonstrations")
    return ExperimentConfig(irl=irl, **base)


def load_config(path, seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise HarnessError(f"cannot read config {path}: {exc.strerror}") from None
    values = parse_config(text)
    if seed is not None:
        values["seeds"] = (seed,)
    if out is not None:
        values["out_dir"] = out
    return build_config(values)


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seeds: list
    files: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def verify(self) -> None:
        missing = [f for f in self.files if not Path(f).exists()]
        if missing:
            raise HarnessError(f"manifest lists missing files: {missing}")

    def write(self, root: Path) -> Path:
        self.verify()
        path = root / f"manifest_{self.command}.json"
        path.write_text(json.dumps(asdict(self), indent=2))
        return path


# data generation


def reaching_demos(cfg: ExperimentConfig, seed: int):
    rng = np.random.default_rng(seed)
    lo, hi = cfg.dx_range
    out = []
    attempts = 0
    while len(out) < cfg.n_demos:
        attempts += 1
        if attempts > 50 * cfg.n_demos:
            raise HarnessError("could not generate enough feasible reaching demonstrations")
        theta = np.asarray(cfg.center) + rng.uniform(-cfg.noise, cfg.noise, 3)
        dx = rng.choice([-1.0, 1.0]) * rng.uniform(lo, hi)
        try:
            out.append(generate_demo(cfg.arm, cfg.camera, reaching_task(cfg.arm, theta, dx, cfg.horizon, cfg.ease)))
        except ValueError:
            continue
    return out


def placing_starts(cfg: ExperimentConfig) -> list[SystemState]:
    first = np.asarray(cfg.center)
    return [initial_state(cfg.arm, cfg.camera, first),
            initial_state(cfg.arm, cfg.camera, first + np.asarray(cfg.second_start))]


def _write(files: list, path: Path, writer, *args) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        writer(path, *args)
    except OSError as exc:
        raise HarnessError(f"cannot write {path}: {exc.strerror}") from None
    files.append(str(path))


def _write_starts(path, starts):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["start", "theta1", "theta2", "theta3"])
        for i, s in enumerate(starts):
            w.writerow([i + 1] + [format(v, ".17g") for v in s.theta])


def read_starts(cfg: ExperimentConfig, path) -> list[SystemState]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [initial_state(cfg.arm, cfg.camera, [float(r[f"theta{j}"]) for j in (1, 2, 3)]) for r in rows]


def gen_data(cfg: ExperimentConfig, seed: int) -> list[str]:
    d = cfg.run_dir(seed) / "data"
    files: list = []
    if cfg.preset == "placing":
        starts = placing_starts(cfg)
        dx, dy = cfg.place_shift
        demo = generate_demo(cfg.arm, cfg.camera, placing_task(cfg.arm, starts[0].theta, dx, dy, cfg.horizon))
        _write(files, d / "placing_demo.csv", write_demo_csv, relativize_demo(demo))
        _write(files, d / "starts.csv", _write_starts, starts)
    else:
        demos = reaching_demos(cfg, seed)
        n_train = cfg.n_demos - cfg.n_test
        for i, demo in enumerate(demos):
            name = f"train_{i:02d}.csv" if i < n_train else f"test_{i - n_train:02d}.csv"
            _write(files, d / name, write_demo_csv, demo)
    data = generate_sine_data(cfg.arm, cfg.camera, SINE_FREQUENCIES, SINE_AMPLITUDES, cfg.dyn_samples, seed,
                              center=cfg.center)
    _write(files, d / "dynamics.csv", write_dataset_csv, data)
    return files


def _need(path: Path, command: str) -> Path:
    if not path.exists():
        raise HarnessError(f"missing {path}; run `irl {command}` with this config first")
    return path


def load_episodes(cfg: ExperimentConfig, seed: int) -> tuple[list[Episode], list[Episode]]:
    d = cfg.run_dir(seed) / "data"
    if cfg.preset == "placing":
        rel = read_demo_csv(_need(d / "placing_demo.csv", "gen-data"), relative=True)
        starts = read_starts(cfg, _need(d / "starts.csv", "gen-data"))
        eps = [Episode(s, rebase(rel, s.keypoints).keypoints) for s in starts]
        return eps[:1], eps
    n_train = cfg.n_demos - cfg.n_test
    train_eps = [Episode.from_demo(read_demo_csv(_need(d / f"train_{i:02d}.csv", "gen-data"))) for i in range(n_train)]
    test_eps = [Episode.from_demo(read_demo_csv(_need(d / f"test_{i:02d}.csv", "gen-data"))) for i in range(cfg.n_test)]
    return train_eps, test_eps


def load_model(cfg: ExperimentConfig, seed: int):
    if cfg.model == "known":
        return GroundTruthModel(cfg.arm, cfg.camera)
    return LearnedModel(load_checkpoint(_need(cfg.run_dir(seed) / "models" / "dynamics.kpdyn", "train-dynamics")))


# commands (one seed each)


def train_dynamics(cfg: ExperimentConfig, seed: int) -> list[str]:
    run = cfg.run_dir(seed)
    data = read_dataset_csv(_need(run / "data" / "dynamics.csv", "gen-data"))
    report = train(data, TrainHyperparams(epochs=cfg.dyn_epochs), seed=seed)
    files: list = []
    _write(files, run / "models" / "dynamics.kpdyn", save_checkpoint, report.params, report)
    files.append(str(run / "models" / "dynamics.kpdyn.json"))
    print(f"seed {seed}: held-out NMSE {report.heldout_nmse[-1]:.4f}")
    return files


def _save_learned(files, out: Path, cost, record):
    _write(files, out / "cost.json", save_cost, cost)
    _write(files, out / "record.csv", write_record_csv, record)
    _write(files, out / "weights.csv", export_weights_csv, cost)
    _write(files, out / "psi_history.csv", _write_history, record.params)


def _write_history(path, params):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        n = len(params[0]) if params else 0
        w.writerow(["epoch"] + [f"psi{i}" for i in range(n)])
        for e, p in enumerate(params):
            w.writerow([e] + [format(v, ".17g") for v in p])


def train_costs(cfg: ExperimentConfig, seed: int) -> list[str]:
    train_eps, test_eps = load_episodes(cfg, seed)
    model = load_model(cfg, seed)
    irl_cfg = replace(cfg.irl, seed=seed)
    files: list = []
    for fam in cfg.cost_families:
        for n in cfg.train_sizes:
            cost, record = train_irl(replace(irl_cfg, cost_family=fam), model, train_eps[:n], test_eps)
            print(f"seed {seed}: {fam} n={n} loss {record.loss[0]:.4g} -> {record.loss[-1]:.4g} "
                  f"({record.seconds:.1f}s)")
            _save_learned(files, cfg.run_dir(seed) / "irl" / f"{fam}_n{n}", cost, record)
    return files


def train_baseline(cfg: ExperimentConfig, seed: int) -> list[str]:
    train_eps, test_eps = load_episodes(cfg, seed)
    model = load_model(cfg, seed)
    files: list = []
    for n in cfg.train_sizes:
        cost, record = apprenticeship_train(replace(cfg.irl, seed=seed), model, train_eps[:n], test_eps)
        print(f"seed {seed}: apprenticeship n={n} {record.status} after {record.epochs} epochs")
        _save_learned(files, cfg.run_dir(seed) / "baseline" / f"n{n}", cost, record)
    return files


def plan(cfg: ExperimentConfig, seed: int) -> list[str]:
    _, test_eps = load_episodes(cfg, seed)
    model = load_model(cfg, seed)
    T, K = test_eps[0].keypoints.shape[:2]
    cost = load_cost(cfg.cost_file) if cfg.cost_file else make_cost("default", K, T)
    env = ArmEnv(cfg.arm, cfg.camera)
    files: list = []
    for i, e in enumerate(test_eps):
        result = optimize_actions(e.start, e.goal, cost, model, cfg.irl.test_alpha, cfg.irl.test_iters)
        executed = execute_plan(env, e.start, clamp_actions(result.actions[0], cfg.arm.max_step))
        out = cfg.run_dir(seed) / "plans" / cost.family / f"case_{i:02d}"
        files += [str(p) for p in write_plan(out, result, executed)]
        print(f"seed {seed}: case {i} relative distance {result.relative_distance[0]:.3f}")
    return files


METRICS = ("relative_distance", "relative_distance_x", "goal_mse")


def _cost_table(cfg: ExperimentConfig, seed: int, K: int, T: int) -> list[tuple[str, int, object]]:
    run = cfg.run_dir(seed)
    rows = [("default", 0, make_cost("default", K, T))]
    for fam in cfg.cost_families:
        for n in cfg.train_sizes:
            rows.append((fam, n, load_cost(_need(run / "irl" / f"{fam}_n{n}" / "cost.json", "train-irl"))))
    for n in cfg.train_sizes:
        path = run / "baseline" / f"n{n}" / "cost.json"
        rows.append(("apprenticeship", n, costs_mod.LinearFeatureCost(K, T, load_cost(
            _need(path, "baseline")).params)))
    return rows


def evaluate(cfg: ExperimentConfig, seed: int) -> list[str]:
    _, test_eps = load_episodes(cfg, seed)
    model = load_model(cfg, seed)
    env = ArmEnv(cfg.arm, cfg.camera)
    T, K = test_eps[0].keypoints.shape[:2]
    run = cfg.run_dir(seed)
    files: list = []
    table = []
    for name, n, cost in _cost_table(cfg, seed, K, T):
        metrics = evaluate_cost(cost, test_eps, model, cfg.irl.test_alpha, cfg.irl.test_iters, env)
        for i, m in enumerate(metrics):
            table.append([name, n, i + 1] + [m[k] for k in METRICS])
        if name not in ("default", "apprenticeship"):
            _write(files, run / "eval" / f"weights_{name}_n{n}.csv", export_weights_csv, cost)
            if cfg.svg:
                _write(files, run / "eval" / f"weights_{name}_n{n}.svg", write_bar_svg, cost)
    _write(files, run / "eval" / "metrics.csv", _write_metrics, table)
    return files


def _write_metrics(path, table):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cost", "n_train", "case"] + list(METRICS))
        for row in table:
            w.writerow(row[:3] + [format(v, ".17g") for v in row[3:]])


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{"cost": r["cost"], "n_train": int(r["n_train"]), "case": int(r["case"]),
                 **{k: float(r[k]) for k in METRICS}} for r in csv.DictReader(fh)]


def comparison(cfg: ExperimentConfig) -> list[dict]:
    """Aggregate per-seed metric files: mean and std over seeds.

    Placing keeps every start configuration as its own row; other presets
    average the test cases first.
    """
    per_seed = [read_metrics(_need(cfg.run_dir(s) / "eval" / "metrics.csv", "eval")) for s in cfg.seeds]
    by_case = cfg.preset == "placing"
    groups: dict = {}
    for rows in per_seed:
        seen: dict = {}
        for r in rows:
            key = (r["cost"], r["n_train"], r["case"] if by_case else 0)
            seen.setdefault(key, []).append([r[k] for k in METRICS])
        for key, vals in seen.items():
            groups.setdefault(key, []).append(np.mean(vals, axis=0))
    out = []
    for (name, n, case), vals in groups.items():
        vals = np.array(vals)
        row = {"cost": name, "n_train": n, "case": case}
        for j, k in enumerate(METRICS):
            row[k] = float(vals[:, j].mean())
            row[k + "_std"] = float(vals[:, j].std())
        out.append(row)
    return out


def write_comparison(cfg: ExperimentConfig, rows: list[dict]) -> list[Path]:
    show_std = len(cfg.seeds) > 1
    cols = ["cost", "n_train", "case"]
    for k in METRICS:
        cols += [k, k + "_std"] if show_std else [k]
    csv_path = cfg.root / "comparison.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] if c in ("cost", "n_train", "case") else format(r[c], ".17g") for c in cols])
    txt = cfg.root / "comparison.txt"
    lines = [f"{'cost':<16}{'n':>3}{'case':>5}" + "".join(f"{k:>26}" for k in METRICS)]
    for r in rows:
        cells = [f"{r[k]:.4g} ({r[k + '_std']:.2g})" if show_std else f"{r[k]:.4g}" for k in METRICS]
        lines.append(f"{r['cost']:<16}{r['n_train']:>3}{r['case']:>5}" + "".join(f"{c:>26}" for c in cells))
    txt.write_text("\n".join(lines) + "\n")
    return [csv_path, txt]


def write_bar_svg(path, cost) -> Path:
    """Static bar chart of the effective weights per keypoint and axis (mean over frames)."""
    w = cost.weight_table().mean(axis=0).ravel()
    labels = [f"k{k + 1}{a}" for k in range(cost.n_keypoints) for a in "xy"]
    width, height, pad = 40 * len(w) + 40, 220, 20
    top = max(float(w.max()), 1e-12)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    for i, (v, lab) in enumerate(zip(w, labels)):
        h = (height - 3 * pad) * v / top
        x = pad + 40 * i
        color = "#c0392b" if lab.startswith(f"k{cost.n_keypoints}") else "#2c7fb8"
        parts.append(f'<rect x="{x}" y="{height - 2 * pad - h:.1f}" width="30" height="{h:.1f}" fill="{color}"/>')
        parts.append(f'<text x="{x}" y="{height - pad / 2}" font-size="10">{lab}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
    return Path(path)


COMMANDS = {
    "gen-data": gen_data,
    "train-dynamics": train_dynamics,
    "train-irl": train_costs,
    "baseline": train_baseline,
    "plan": plan,
    "eval": evaluate,
}


def _one_seed(command: str, cfg: ExperimentConfig, seed: int):
    t0 = time.perf_counter()
    files = COMMANDS[command](cfg.with_seed(seed), seed)
    return files, time.perf_counter() - t0


def run_command(command: str, cfg: ExperimentConfig) -> RunManifest:
    """Run ``command`` for every seed (in worker processes when ``workers > 1``)."""
    if command not in COMMANDS:
        raise HarnessError(f"unknown command {command!r}")
    cfg.root.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command, cfg.digest(), list(cfg.seeds))
    if cfg.workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_one_seed, [command] * len(cfg.seeds), [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        results = [_one_seed(command, cfg, s) for s in cfg.seeds]
    for seed, (files, seconds) in zip(cfg.seeds, results):
        manifest.files += files
        manifest.timings[str(seed)] = seconds
    if command == "eval":
        manifest.files += [str(p) for p in write_comparison(cfg, comparison(cfg))]
        print((cfg.root / "comparison.txt").read_text(), end="")
    manifest.write(cfg.root)
    return manifest


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="irl", description="Keypoint cost learning experiments.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="key=value experiment file")
    parser.add_argument("--seed", type=int, help="run a single seed")
    parser.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./{DEFAULT_ROOT})")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        run_command(args.command, cfg)
    except (HarnessError, TrainingDiverged, ValueError, RuntimeError, OSError) as exc:
        print(f"irl {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
