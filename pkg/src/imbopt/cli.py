"""Command-line entry point: run, theory, gen-data, version.

Experiment configs are JSON documents with ``"version": 1``::

    {
      "version": 1,
      "dataset": {"profile": "binary", "params": [20, 200], "d": 100,
                  "separation": 3.0, "shift": 1.0, "seed": null},
      "model": {"hidden": [], "activation": "relu", "init_scale": 0.1},
      "algorithm": "gd",
      "schedule": {"kind": "constant", "eta": 0.5},
      "batch": {},
      "epochs": 100,
      "eval_interval": 1,
      "r_star": 0.7,
      "mid": {"window": null, "delta": 0.05, "minority": null},
      "seeds": [0, 1]
    }

A null dataset seed means every run seed draws its own dataset. Batch keys
are ``n_batches``, ``per_class_size`` or ``batch_size`` depending on the
algorithm. The minority class defaults to the last one.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from . import diagnostics as dg
from . import theory
from .data import ImbalanceProfile, make_gaussian_mixture, round_half_up, save_dataset_csv
from .model import ModelSpec
from .optim import ALGORITHMS, ConfigError, DivergenceError, Schedule, TrainConfig, check_batch_spec, run_training
from .tensor_core import STREAMS, DomainError, SeededRng

CONFIG_VERSION = 1
TOP_KEYS = {"version", "dataset", "model", "algorithm", "schedule", "batch", "epochs", "eval_interval",
            "r_star", "mid", "seeds", "out"}
SECTION_KEYS = {
    "dataset": {"profile", "params", "d", "separation", "shift", "seed", "test_per_class"},
    "model": {"hidden", "activation", "init_scale"},
    "schedule": {"kind", "eta", "c", "horizon", "c_mu"},
    "batch": {"n_batches", "per_class_size", "batch_size", "refresh_interval", "p_min"},
    "mid": {"window", "delta", "minority"},
}
SEED_COLUMNS = ["seed", "algorithm", "status", "final_t", "macro_recall_test", "tau", "mid_present",
                "mid_depth", "mid_duration", "initial_recall"]
SUMMARY_COLUMNS = ["algorithm", "n_seeds", "n_ok", "macro_recall_test_mean", "macro_recall_test_stderr",
                   "tau_mean", "tau_stderr", "n_tau_finite", "mid_count"]


class ConfigFileError(ValueError):
    """Config problem located at a line of the source file (0 if unknown)."""

    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


def _line_of(text: str, key: str) -> int:
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return 0


def load_config(path) -> dict:
    """Parse and validate a config file; errors carry the offending line."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigFileError(path, err.lineno, err.msg) from None
    if not isinstance(cfg, dict):
        raise ConfigFileError(path, 1, "top level must be an object")
    if cfg.get("version") != CONFIG_VERSION:
        raise ConfigFileError(path, _line_of(text, "version"), f"unsupported config version {cfg.get('version')!r}")
    for k in cfg:
        if k not in TOP_KEYS:
            raise ConfigFileError(path, _line_of(text, k), f"unknown key {k!r}")
    for sec, keys in SECTION_KEYS.items():
        body = cfg.get(sec, {})
        if not isinstance(body, dict):
            raise ConfigFileError(path, _line_of(text, sec), f"{sec} must be an object")
        for k in body:
            if k not in keys:
                raise ConfigFileError(path, _line_of(text, k), f"unknown key {sec}.{k}")
    for k in ("algorithm", "epochs"):
        if k not in cfg:
            raise ConfigFileError(path, 0, f"missing required key {k!r}")
    try:
        build_train_config(cfg, seed=0, dry=True)
    except (ConfigError, DomainError, TypeError, ValueError) as err:
        msg = str(err)
        key = next((k for k in _keys_in(msg) if _line_of(text, k)), None)
        raise ConfigFileError(path, _line_of(text, key) if key else 0, msg) from None
    return cfg


def _keys_in(msg: str) -> list[str]:
    words = msg.replace("'", " ").replace('"', " ").replace(",", " ").split()
    out = []
    for w in words:
        out += [w.split(".")[-1]] if "." in w else [w]
    return out


def make_profile(ds: dict) -> ImbalanceProfile:
    return ImbalanceProfile(ds.get("profile", "binary"), tuple(ds.get("params", (20, 200))))


def build_train_config(cfg: dict, seed: int, dry: bool = False) -> TrainConfig | None:
    """TrainConfig for one run seed; ``dry`` validates without sampling data."""
    ds = cfg.get("dataset", {})
    algo = cfg["algorithm"]
    if algo not in ALGORITHMS:
        raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {algo!r}")
    profile = make_profile(ds)
    counts = profile.counts()
    d = int(ds.get("d", 2))
    data_seed = ds.get("seed")
    data_seed = seed if data_seed is None else int(data_seed)
    m = cfg.get("model", {})
    spec = ModelSpec(d, len(counts), tuple(m.get("hidden", ())), m.get("activation", "relu"),
                     float(m.get("init_scale", 1.0)))
    sch = dict(cfg.get("schedule", {}))
    epochs = int(cfg["epochs"])
    schedule = Schedule(**sch)
    b = cfg.get("batch", {})
    if dry:
        check_batch_spec(algo, b.get("n_batches"), b.get("per_class_size"), b.get("batch_size"))
        if epochs < 0:
            raise ConfigError("epochs must be >= 0")
        return None
    train, test = make_gaussian_mixture(profile, d, float(ds.get("separation", 3.0)), data_seed,
                                        ds.get("test_per_class"), float(ds.get("shift", 0.0)))
    return TrainConfig(train, test, spec, algo, schedule, epochs, int(cfg.get("eval_interval", 1)), seed,
                       b.get("n_batches"), b.get("per_class_size"), b.get("batch_size"),
                       int(b.get("refresh_interval", 5)), float(b.get("p_min", dg.P_MIN)))


def stream_seeds(seed: int) -> dict:
    return {name: SeededRng(seed, name).derived_seed for name in STREAMS}


def _mid_args(cfg: dict, n_classes: int) -> dict:
    mid = cfg.get("mid", {})
    minority = mid.get("minority")
    return {"minority": n_classes - 1 if minority is None else int(minority), "window": mid.get("window"),
            "delta": float(mid.get("delta", 0.05)), "r_star": float(cfg.get("r_star", 0.7))}


def run_one(cfg: dict, seed: int, out_dir: str) -> dict:
    """Train one seed, write its run CSV, return its per-seed summary row."""
    tc = build_train_config(cfg, seed)
    row = {"seed": seed, "algorithm": tc.algorithm}
    try:
        log = run_training(tc)
        status = "ok"
    except DivergenceError as err:
        log, status = err.log, "diverged"
    log.to_csv(Path(out_dir) / f"run_seed{seed}.csv")
    if status != "ok" or not log.rows:
        row.update(status=status, final_t=log.rows[-1]["t"] if log.rows else 0, macro_recall_test=math.nan,
                   tau=math.nan, mid_present=0, mid_depth=math.nan, mid_duration=math.nan, initial_recall=math.nan)
        return row
    rep = dg.detect_mid(log, **_mid_args(cfg, tc.model.n_classes))
    row.update(status=status, final_t=log.rows[-1]["t"], macro_recall_test=log.rows[-1]["macro_recall_test"],
               tau=rep.tau, mid_present=int(rep.mid_present), mid_depth=rep.mid_depth,
               mid_duration=rep.mid_duration, initial_recall=rep.initial_recall)
    return row


def _mean_se(v) -> tuple[float, float]:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan
    return float(v.mean()), se


def summarize(rows: list[dict]) -> dict:
    """Mean and standard error over seeds; tau over seeds that reached R* only."""
    ok = [r for r in rows if r["status"] == "ok"]
    rec_m, rec_se = _mean_se([r["macro_recall_test"] for r in ok])
    taus = [r["tau"] for r in ok if math.isfinite(r["tau"])]
    tau_m, tau_se = _mean_se(taus)
    return {"algorithm": rows[0]["algorithm"] if rows else "", "n_seeds": len(rows), "n_ok": len(ok),
            "macro_recall_test_mean": rec_m, "macro_recall_test_stderr": rec_se, "tau_mean": tau_m,
            "tau_stderr": tau_se, "n_tau_finite": len(taus), "mid_count": sum(r["mid_present"] for r in ok)}


def _write_rows(path, cols, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], str) else dg.fmt(r[c]) for c in cols])


def _workers(n: int) -> int:
    try:
        cap = int(os.environ.get("IMBOPT_THREADS", "1"))
    except ValueError:
        cap = 1
    return max(1, min(n, cap))


def _say(quiet: bool, msg: str) -> None:
    if not quiet:
        print(msg, file=sys.stderr)


def parse_seeds(text: str | None) -> list[int] | None:
    if text is None:
        return None
    return [int(s) for s in text.split(",") if s.strip()]


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigFileError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    seeds = parse_seeds(args.seeds) or list(cfg.get("seeds", [0]))
    out = Path(args.out or cfg.get("out") or "runs")
    out.mkdir(parents=True, exist_ok=True)
    nw = _workers(len(seeds))
    if nw > 1:
        with ProcessPoolExecutor(max_workers=nw) as pool:
            rows = list(pool.map(run_one, [cfg] * len(seeds), seeds, [str(out)] * len(seeds)))
    else:
        rows = []
        for s in seeds:
            rows.append(run_one(cfg, s, str(out)))
            _say(args.quiet, f"seed {s}: {rows[-1]['status']}")
    _write_rows(out / "seeds.csv", SEED_COLUMNS, rows)
    _write_rows(out / "summary.csv", SUMMARY_COLUMNS, [summarize(rows)])
    manifest = {"version": __version__, "config": cfg, "seeds": seeds,
                "streams": {str(s): stream_seeds(s) for s in seeds},
                "files": [f"run_seed{s}.csv" for s in seeds] + ["seeds.csv", "summary.csv"]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    failed = [r["seed"] for r in rows if r["status"] != "ok"]
    if failed:
        _say(args.quiet, f"diverged seeds: {failed}")
        return 1
    return 0


def cmd_theory(args) -> int:
    name = args.battery
    if name not in theory.BATTERIES:
        print(f"unknown battery {name!r}; valid: {', '.join(theory.BATTERIES)}", file=sys.stderr)
        return 2
    seeds = parse_seeds(args.seeds) or [0]
    out = Path(args.out or "theory")
    out.mkdir(parents=True, exist_ok=True)
    bad = 0
    for s in seeds:
        reports = theory.run_battery(name, s)
        theory.write_reports_csv(out / f"theory_{name}_seed{s}.csv", reports)
        v = theory.violations(reports)
        bad += len(v)
        _say(args.quiet, f"{name} seed {s}: {len(reports)} rows, {sum(r.hypotheses_ok for r in reports)} "
                         f"with hypotheses, {len(v)} violations")
    return 1 if bad else 0


def scaled_profile(kind: str, params, scale: float) -> ImbalanceProfile:
    """Scale the count parameters of a profile (rounded half up)."""

    def sc(n):
        return int(round_half_up(Fraction(str(n)) * Fraction(str(scale))))

    p = list(params)
    if kind == "binary":
        p[1] = sc(p[1])
    elif kind == "step":
        p[0], p[1] = sc(p[0]), sc(p[1])
    elif kind == "geometric":
        p[0] = sc(p[0])
    return ImbalanceProfile(kind, tuple(p))


def _num(s: str):
    if "/" in s:
        return Fraction(s)
    f = float(s)
    return int(f) if f.is_integer() and "." not in s else f


def cmd_gen_data(args) -> int:
    params = [_num(v) for v in args.params.split(",")]
    try:
        profile = scaled_profile(args.profile, params, args.scale)
        counts = profile.counts()
        train, test = make_gaussian_mixture(profile, args.d, args.separation, args.seed, shift=args.shift)
    except DomainError as err:
        print(f"invalid profile: {err}", file=sys.stderr)
        return 2
    out = Path(args.out or "data")
    out.mkdir(parents=True, exist_ok=True)
    save_dataset_csv(out / "train.csv", train)
    save_dataset_csv(out / "test.csv", test)
    manifest = {"version": __version__, "profile": args.profile, "params": [str(p) for p in params],
                "scale": args.scale, "counts": counts, "rho": [counts[0] / c for c in counts], "seed": args.seed,
                "d": args.d, "separation": args.separation, "shift": args.shift,
                "streams": {k: SeededRng(args.seed, k).derived_seed for k in ("data", "test_data")}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _say(args.quiet, f"counts {counts}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imbopt", description="Per-class normalized optimizers under class imbalance.")
    sub = p.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", help="train from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--seeds", help='comma list, e.g. "0,1,2"; overrides the config')
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("theory", help="run a theorem battery")
    t.add_argument("--battery", required=True)
    t.add_argument("--out")
    t.add_argument("--seeds")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_theory)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--profile", default="binary", choices=("binary", "step", "geometric"))
    g.add_argument("--params", default="20,200", help="binary: rho,n_minor; step: n_major,n_minor,split,L; "
                                                      "geometric: n_max,base,L")
    g.add_argument("--scale", type=float, default=1.0)
    g.add_argument("--d", type=int, default=2)
    g.add_argument("--separation", type=float, default=3.0)
    g.add_argument("--shift", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.add_argument("--quiet", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    v = sub.add_parser("version")
    v.set_defaults(func=lambda a: print(__version__) or 0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return int(args.func(args))


if __name__ == "__main__":
    sys.exit(main())
