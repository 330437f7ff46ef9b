"""``assistlab`` command line.

Every subcommand reads its settings from built-in defaults, then an optional
YAML/JSON config (top-level keys, then a section named after the subcommand),
then command-line flags.  Artifacts land in ``--run-dir`` and carry a
provenance block (schema version, config hash, seed).

Exit codes: 0 ok, 2 configuration, 3 engine, 4 data.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shlex
import signal
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from . import __version__
from .game_model import SCHEMA_VERSION, DataError, atomic_write_text

log = logging.getLogger("assistlab")

EXIT_OK, EXIT_CONFIG, EXIT_ENGINE, EXIT_DATA = 0, 2, 3, 4


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


# -- option table ---------------------------------------------------------------------


def floats(value) -> list[float]:
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    text = str(value).strip()
    return [float(v) for v in text.split(",") if v.strip()] if text else []


def ints(value) -> list[int]:
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    return [int(v) for v in str(value).split(",") if v.strip()]


def command(value) -> list[str]:
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return shlex.split(str(value))


def optional(kind):
    def parse(value):
        if value is None or (isinstance(value, str) and value.lower() in ("", "none", "null")):
            return None
        return kind(value)

    parse.__name__ = kind.__name__
    return parse


@dataclass(frozen=True)
class Opt:
    name: str
    type: Callable = str
    default: Any = None
    help: str = ""
    choices: tuple | None = None
    flag: bool = False

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


COMMON = [
    Opt("run-dir", str, "run", "directory holding all artifacts"),
    Opt("seed", int, 0, "master seed"),
    Opt("workers", int, 1, "parallel game workers (one session triple each)"),
]

ENGINE = [
    Opt("engine", command, ["stockfish"], "engine command line, e.g. 'node sf.js'"),
    Opt("movetime-ms", optional(int), 100, "search time per go"),
    Opt("strong-movetime-ms", optional(int), None, "search time of the assisting engine (default 2x)"),
    Opt("depth", optional(int), None, "fixed search depth instead of movetime"),
    Opt("threads", int, 1, "engine Threads option"),
    Opt("search-timeout", float, 60.0, "seconds before a search counts as hung"),
    Opt("weak-elo", int, 1500, "UCI_Elo of White and Black"),
    Opt("strong-elo", int, 3190, "UCI_Elo of the assisting engine"),
    Opt("samples", int, 10, "engine samples per side at each decision"),
    Opt("fast", bool, False, "3 samples per decision (reduced fidelity)", flag=True),
    Opt("horizon", int, 200, "maximum White moves per game"),
    Opt("games", int, 100, "games to play"),
    Opt("resign-score", optional(float), None, "adjudicate once played-move scores stay this lopsided"),
    Opt("resign-plies", int, 6, "consecutive plies for resignation adjudication"),
    Opt("calibration", optional(str), None, "calibration artifact (default: RUN/calibration.json if present)"),
]

COMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "gen-data": ("play logged datasets D0 / DI", ENGINE + [
        Opt("kind", str, "both", "which dataset", ("d0", "di", "both")),
        Opt("di-max-move", optional(int), None, "upper end of the random DI move (default horizon)"),
    ]),
    "ingest-pgn": ("import human games from PGN", [
        Opt("pgn", str, None, "PGN file"),
        Opt("min-elo", optional(int), None, "minimum White rating"),
        Opt("max-elo", optional(int), None, "maximum White rating"),
        Opt("out", str, "human.jsonl", "output dataset (relative to run dir)"),
    ]),
    "annotate": ("fill raw engine scores into a dataset", ENGINE + [
        Opt("input", str, "human.jsonl", "dataset to annotate"),
        Opt("out", str, "human.annotated.jsonl", "output dataset"),
    ]),
    "calibrate": ("fit per-move-bucket calibration curves", [
        Opt("input", str, "d0.jsonl", "annotated dataset with results"),
        Opt("method", str, "isotonic", "curve family", ("isotonic", "monotone-net")),
        Opt("bucket-width", int, 5, "White moves per calibration bucket"),
        Opt("horizon", int, 200, "last move with its own bucket"),
        Opt("min-samples", int, 20, "points needed before a bucket gets its own curve"),
        Opt("apply", command, ["d0.jsonl", "di.jsonl"], "datasets to calibrate (written as *.cal.jsonl)"),
        Opt("compare", bool, False, "also report holdout MSE of isotonic vs monotone net", flag=True),
        Opt("holdout", float, 0.2, "fraction of games held out for --compare"),
    ]),
    "train-predictors": ("fit top-k suffix delta predictors", [
        Opt("input", str, "d0.cal.jsonl", "calibrated no-intervention dataset"),
        Opt("family", str, "random-forest", "model family", ("linear-L2", "random-forest", "mlp")),
        Opt("budget", int, 1, "largest k to train"),
    ]),
    "play": ("play games with a policy in the loop", ENGINE + [
        Opt("policy", str, "none", "intervention policy", ("none", "random", "threshold", "maxdelta", "always")),
        Opt("budget", int, 0, "intervention budget"),
        Opt("t", floats, [], "thresholds T1,T2,... for the threshold policy"),
        Opt("slacks", floats, [], "slacks for the maxdelta policy"),
        Opt("predictors", str, "predictors", "predictor directory for maxdelta"),
        Opt("mode", str, "game", "plain games, oracle upper bound or hindsight branching",
            ("game", "oracle", "hindsight")),
        Opt("name", optional(str), None, "output stem under RUN/play"),
    ]),
    "fit-uplift": ("build move banks and the uplift table", [
        Opt("d0", str, "d0.cal.jsonl", "calibrated D0"),
        Opt("di", str, "di.cal.jsonl", "calibrated DI"),
        Opt("horizon", int, 200, "simulation horizon"),
        Opt("bin-width", int, 10, "White moves per uplift bin"),
        Opt("grid-size", int, 101, "gap grid nodes"),
        Opt("min-di-per-bin", int, 30, "DI games needed for a bin to count as populated"),
    ]),
    "simulate": ("engine-free average score of a threshold vector", [
        Opt("thresholds", floats, None, "T1,T2,..."),
        Opt("runs", int, 200_000, "Monte Carlo runs"),
        Opt("horizon", int, 200, "simulation horizon"),
        Opt("uplift-scales", optional(floats), None, "per-assist uplift multipliers"),
        Opt("banks", str, "banks.json", "move banks"),
        Opt("uplift", str, "uplift.json", "uplift table"),
        Opt("out", str, "simulate.json", "report file"),
    ]),
    "optimize": ("Bayesian optimization of thresholds or maxdelta slacks", ENGINE + [
        Opt("backend", str, "simfree", "objective", ("simfree", "engine")),
        Opt("target", str, "thresholds", "what to tune; slacks need the engine backend", ("thresholds", "slacks")),
        Opt("k", int, 2, "number of thresholds, or the budget when tuning slacks"),
        Opt("iters", int, 25, "EI iterations after the initial design"),
        Opt("init", int, 8, "random initial points"),
        Opt("lower", optional(float), None, "lower bound per dimension (thresholds 0, slacks -0.3)"),
        Opt("upper", optional(float), None, "upper bound per dimension (thresholds 0.6, slacks 0.3)"),
        Opt("ordered", bool, False, "enforce T1 <= T2 <= ...", flag=True),
        Opt("predictors", str, "predictors", "predictor directory when tuning slacks"),
        Opt("runs", int, 50_000, "simulator runs per evaluation"),
        Opt("games-per-eval", int, 50, "engine games per evaluation"),
        Opt("banks", str, "banks.json", "move banks"),
        Opt("uplift", str, "uplift.json", "uplift table"),
    ]),
    "gap-grid": ("engine vs human conversion of good positions", [
        Opt("engine-data", str, "d0.cal.jsonl", "calibrated engine games"),
        Opt("human-data", str, "human.annotated.cal.jsonl", "calibrated human games"),
        Opt("n-values", ints, [10, 20, 30, 40], "move numbers"),
        Opt("alpha-values", floats, [0.6, 0.7, 0.8, 0.9], "score thresholds"),
        Opt("min-cell", int, 30, "games needed for a defined cell"),
        Opt("min-elo", optional(int), None, "minimum human White rating"),
        Opt("max-elo", optional(int), None, "maximum human White rating"),
    ]),
    "report": ("CSV tables and SVG figures from a run directory", [
        Opt("out", optional(str), None, "output directory (default RUN/report)"),
    ]),
}

POSITIVE = {"runs", "games", "k", "iters", "samples", "horizon", "bucket_width", "grid_size", "bin_width",
            "workers", "games_per_eval", "movetime_ms", "strong_movetime_ms", "depth", "threads", "min_cell"}
NON_NEGATIVE = {"budget", "init", "min_samples", "min_di_per_bin"}

# options that do not change results and stay out of the config hash
NON_SEMANTIC = {"config", "run_dir", "workers", "log_level"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="assistlab", description="Engine-assist experiments.")
    parser.add_argument("--version", action="version", version=f"assistlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="YAML or JSON config file")
        p.add_argument("--log-level", default="WARNING")
        for opt in COMMON + opts:
            if opt.flag:
                p.add_argument(f"--{opt.name}", action="store_true", help=opt.help)
            else:
                p.add_argument(f"--{opt.name}", type=_argtype(opt), choices=opt.choices, help=opt.help)
    return parser


def _argtype(opt: Opt):
    def parse(text):
        try:
            return opt.type(text)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    parse.__name__ = getattr(opt.type, "__name__", "value")
    return parse


def _coerce(opt: Opt, value, where: str):
    try:
        if opt.flag:
            if not isinstance(value, bool):
                raise ValueError("expected true/false")
            out = value
        elif opt.type is str and not isinstance(value, str):
            raise ValueError(f"expected a string, got {type(value).__name__}")
        else:
            out = opt.type(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}{opt.dest}", str(exc)) from None
    if opt.choices and out not in opt.choices:
        raise ConfigError(f"{where}{opt.dest}", f"must be one of {list(opt.choices)}")
    return out


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be a mapping")
    return doc


def resolve(cmd: str, args: dict) -> dict:
    """Defaults < config top level < config section ``cmd`` < flags."""
    opts = {o.dest: o for o in COMMON + COMMANDS[cmd][1]}
    every = {o.dest for _, (_, os_) in COMMANDS.items() for o in COMMON + os_}
    values = {k: o.default for k, o in opts.items()}
    doc = load_config(args["config"]) if args.get("config") else {}
    for key, value in doc.items():
        k = str(key).replace("-", "_")
        if key in COMMANDS:
            continue
        if k not in every:
            raise ConfigError(k, "unknown setting")
        if k in opts:
            values[k] = _coerce(opts[k], value, "")
    section = doc.get(cmd) or {}
    if not isinstance(section, dict):
        raise ConfigError(cmd, "section must be a mapping")
    for key, value in section.items():
        k = str(key).replace("-", "_")
        if k not in opts:
            raise ConfigError(f"{cmd}.{k}", "unknown setting for this command")
        values[k] = _coerce(opts[k], value, f"{cmd}.")
    for k, v in args.items():
        if k in opts:
            values[k] = v
    for k in POSITIVE & values.keys():
        if values[k] is not None and values[k] < 1:
            raise ConfigError(k, f"must be >= 1, got {values[k]}")
    for k in NON_NEGATIVE & values.keys():
        if values[k] < 0:
            raise ConfigError(k, f"must be >= 0, got {values[k]}")
    if values.get("fast"):
        values["samples"] = 3
    return values


def config_hash(cmd: str, values: dict) -> str:
    semantic = {k: v for k, v in values.items() if k not in NON_SEMANTIC}
    blob = json.dumps({"command": cmd, **semantic}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Run:
    cmd: str
    values: dict
    out: Any = sys.stdout

    @property
    def dir(self) -> Path:
        return Path(self.values["run_dir"])

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def path(self, name) -> Path:
        """Strings are relative to the run directory; Path objects are used as given."""
        if isinstance(name, Path):
            return name
        p = Path(name)
        return p if p.is_absolute() else self.dir / p

    def existing(self, field: str) -> Path:
        p = self.path(self.values[field])
        if not p.exists():
            raise ConfigError(field, f"{p} does not exist")
        return p

    @property
    def provenance(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config_hash": config_hash(self.cmd, self.values),
            "seed": self.seed,
            "command": self.cmd,
            "config": {k: v for k, v in self.values.items() if k not in NON_SEMANTIC},
        }

    def write_json(self, name, doc: dict) -> Path:
        p = self.path(name)
        atomic_write_text(p, json.dumps({**doc, "provenance": self.provenance}, sort_keys=True, indent=1) + "\n")
        return p

    def write_dataset(self, name, dataset) -> Path:
        from .game_model import write_jsonl

        p = self.path(name)
        write_jsonl(dataset, p, {"provenance": self.provenance})
        return p

    def say(self, obj) -> None:
        self.out.write((json.dumps(obj, sort_keys=True) if not isinstance(obj, str) else obj) + "\n")


# -- engine-backed commands ------------------------------------------------------------------


def match_config(run: Run, **overrides):
    from .orchestrator import MatchConfig

    v = run.values
    depth = v["depth"]
    kw = dict(
        weak_elo=v["weak_elo"],
        strong_elo=v["strong_elo"],
        samples_per_decision=v["samples"],
        horizon=v["horizon"],
        seed=v["seed"],
        games=v["games"],
        engine=tuple(v["engine"]),
        movetime_ms=None if depth is not None else v["movetime_ms"],
        strong_movetime_ms=v["strong_movetime_ms"],
        depth=depth,
        threads=v["threads"],
        search_timeout=v["search_timeout"],
        resign_score=v["resign_score"],
        resign_plies=v["resign_plies"],
    )
    kw.update(overrides)
    try:
        return MatchConfig(**kw)
    except ValueError as exc:
        raise ConfigError("match", str(exc)) from None


def load_bank(run: Run, required: bool = False):
    from .calibration import CalibrationBank

    given = run.values.get("calibration")
    p = run.path(given) if given else run.dir / "calibration.json"
    if not p.exists():
        if given or required:
            raise ConfigError("calibration", f"{p} does not exist")
        log.warning("no calibration artifact; policies see raw engine scores")
        return None
    return CalibrationBank.load(p)


def cmd_gen_data(run: Run) -> None:
    from .orchestrator import generate_d0, generate_di

    bank = load_bank(run)
    v = run.values
    if v["kind"] in ("d0", "both"):
        ds = generate_d0(match_config(run), bank, v["workers"])
        run.write_dataset("d0.jsonl", ds)
        run.say({"dataset": "d0", "records": len(ds), **ds.source_meta["tally"]})
    if v["kind"] in ("di", "both"):
        ds = generate_di(match_config(run, di_max_move=v["di_max_move"], seed=v["seed"] + 1), bank, v["workers"])
        run.write_dataset("di.jsonl", ds)
        run.say({"dataset": "di", "records": len(ds), "unfired": ds.source_meta["unfired"],
                 **ds.source_meta["tally"]})


def cmd_ingest_pgn(run: Run) -> None:
    from .game_model import PgnFilters, PgnStats, parse_pgn

    v = run.values
    if not v["pgn"]:
        raise ConfigError("pgn", "required")
    pgn = Path(v["pgn"])
    if not pgn.exists():
        raise ConfigError("pgn", f"{pgn} does not exist")
    stats = PgnStats()
    ds = parse_pgn(pgn, PgnFilters(v["min_elo"], v["max_elo"]), stats)
    run.write_dataset(v["out"], ds)
    run.say({"records": len(ds), **stats.__dict__})


def cmd_annotate(run: Run) -> None:
    from .engine_bridge import start_engine
    from .game_model import AnnotationInterrupted, annotate, read_jsonl

    ds = read_jsonl(run.existing("input"))
    mc = match_config(run)
    with start_engine(mc.engine_config(mc.weak_elo)) as weak, start_engine(mc.engine_config(mc.strong_elo, True)) as strong:
        try:
            out = annotate(ds, weak, strong, mc.samples_per_decision)
        except AnnotationInterrupted as exc:
            run.write_dataset(run.values["out"] + ".partial", exc.partial)
            raise
    run.write_dataset(run.values["out"], out)
    run.say({"records": len(out)})


def _policy(run: Run):
    from .policies import AlwaysPolicy, NoPolicy, RandomPolicy, ThresholdPolicy

    v = run.values
    kind, budget = v["policy"], v["budget"]
    if kind == "none":
        if budget:
            raise ConfigError("budget", "policy none has budget 0")
        return NoPolicy()
    if kind == "random":
        return RandomPolicy(budget, v["horizon"])
    if kind == "always":
        return AlwaysPolicy(budget)
    if kind == "threshold":
        if len(v["t"]) != budget:
            raise ConfigError("t", f"need {budget} thresholds for budget {budget}, got {len(v['t'])}")
        if any(not 0 <= x <= 1 for x in v["t"]):
            raise ConfigError("t", "thresholds must lie in [0, 1]")
        return ThresholdPolicy(tuple(v["t"]))
    return _maxdelta_policy(run, budget, v["slacks"])


def _maxdelta_policy(run: Run, budget: int, slacks):
    from .predictors import load_model, make_maxdelta_policy

    v = run.values
    pdir = run.path(v["predictors"])
    manifest = pdir / "manifest.json"
    if not manifest.exists():
        raise ConfigError("predictors", f"{manifest} does not exist; run train-predictors")
    doc = json.loads(manifest.read_text())
    if doc["budget"] < budget:
        raise ConfigError("budget", f"predictors were trained for budget {doc['budget']}")
    weak = [load_model(pdir / f) for f in doc["files"]["W"][:budget]]
    strong = [load_model(pdir / f) for f in doc["files"]["S"][: budget - 1]]
    try:
        return make_maxdelta_policy(weak, strong, slacks)
    except ValueError as exc:
        raise ConfigError("slacks", str(exc)) from None


def _mean_se(values) -> tuple[float, float]:
    y = np.asarray(values, float)
    if len(y) == 0:
        return float("nan"), float("nan")
    se = float(y.std(ddof=1) / np.sqrt(len(y))) if len(y) > 1 else 0.0
    return float(y.mean()), se


def cmd_play(run: Run) -> None:
    from .game_model import Dataset, DatasetKind
    from .orchestrator import hindsight_play, oracle_upper_bound, play_games

    v = run.values
    policy = _policy(run)
    bank = load_bank(run, required=v["policy"] in ("threshold", "maxdelta"))
    name = v["name"] or f"{v['mode']}-{v['policy']}-k{v['budget']}"
    cfg = match_config(run, budget=policy.budget, log_points=False)
    summary = {"policy": v["policy"], "budget": policy.budget, "thresholds": list(v["t"]) or None, "mode": v["mode"]}
    if v["mode"] == "game":
        records, tally = play_games(cfg, policy, bank, v["workers"], tag=name)
        run.write_dataset(f"play/{name}.jsonl", Dataset(DatasetKind.PLAY, records, {"tally": tally.to_dict()}))
        mean, se = _mean_se([r.result for r in records])
        summary |= {"games": len(records), "mean": mean, "std_error": se, "aborted": tally.aborted,
                    "fired_mean": float(np.mean([len(r.fired) for r in records])) if records else 0.0}
    elif v["mode"] == "oracle":
        bounds, tally = oracle_upper_bound(cfg, bank, v["workers"])
        atomic_write_text(run.path(f"play/{name}.oracle.jsonl"), "".join(json.dumps(b.to_dict()) + "\n" for b in bounds))
        mean, se = _mean_se([b.best_score for b in bounds])
        summary |= {"games": len(bounds), "mean": mean, "std_error": se, "aborted": tally.aborted,
                    "base_mean": _mean_se([b.base_result for b in bounds])[0],
                    "win_rate": float(np.mean([b.best_score == 1.0 for b in bounds])) if bounds else 0.0,
                    "never_worse": all(b.best_score >= b.base_result for b in bounds)}
    else:
        results, tally = hindsight_play(cfg, policy, bank, v["workers"])
        atomic_write_text(run.path(f"play/{name}.hindsight.jsonl"),
                          "".join(json.dumps(h.to_dict()) + "\n" for h in results))
        committed = _mean_se([h.committed_result for h in results])
        best = _mean_se([h.max_result for h in results])
        summary |= {"games": len(results), "mean": committed[0], "std_error": committed[1],
                    "aborted": tally.aborted, "max_mean": best[0], "uplift": best[0] - committed[0]}
    run.write_json(f"play/{name}.summary.json", summary)
    run.say(summary)
    if summary["games"] == 0:
        from .engine_bridge import EngineError

        raise EngineError(f"every game aborted: {tally.errors[:3]}")


# -- engine-free commands --------------------------------------------------------------------


def cmd_calibrate(run: Run) -> None:
    from .calibration import apply_calibration, build_bank
    from .game_model import read_jsonl

    v = run.values
    ds = read_jsonl(run.existing("input"))
    kw = dict(method=v["method"], bucket_width=v["bucket_width"], horizon=v["horizon"], min_samples=v["min_samples"])
    bank = build_bank(ds, **kw)
    run.write_json("calibration.json", bank.to_dict())
    run.say({"calibration": "calibration.json", "buckets": len(bank.curves), "borrowed": len(bank.borrowed)})
    for name in v["apply"]:
        p = run.path(name)
        if not p.exists():
            log.warning("skipping %s: not found", p)
            continue
        out = p.with_name(p.name.replace(".jsonl", "") + ".cal.jsonl")
        run.write_dataset(out, apply_calibration(read_jsonl(p), bank))
        run.say({"calibrated": str(out)})
    if v["compare"]:
        run.write_json("calibration_compare.json", compare_methods(ds, v["holdout"], run.seed, kw))


def compare_methods(ds, holdout: float, seed: int, kw: dict) -> dict:
    from .calibration import build_bank
    from .game_model import Dataset

    rng = np.random.default_rng(seed)
    test = rng.uniform(size=len(ds)) < holdout
    train = Dataset(ds.kind, [r for r, h in zip(ds.records, test) if not h])
    rows = [(p.t, p.pw_raw, r.result) for r, h in zip(ds.records, test) if h for p in r.points if p.pw_raw is not None]
    if not rows or not train.records:
        raise DataError("holdout split left one side empty")
    t, x, y = (np.array(c) for c in zip(*rows))
    out = {}
    for method in ("isotonic", "monotone-net"):
        bank = build_bank(train, **{**kw, "method": method})
        out[method] = float(np.mean((bank.calibrate(t, x) - y) ** 2))
    out["winner"] = "isotonic" if out["isotonic"] <= out["monotone-net"] else "monotone-net"
    out["holdout_points"] = len(rows)
    return out


def cmd_train_predictors(run: Run) -> None:
    from .game_model import read_jsonl
    from .predictors import build_training_set, fit, mse, save_model

    v = run.values
    ds = read_jsonl(run.existing("input"))
    files = {"W": [], "S": []}
    errors = {}
    pdir = run.dir / "predictors"
    for side, top in (("W", v["budget"]), ("S", v["budget"] - 1)):
        for k in range(1, top + 1):
            ts = build_training_set(ds, k, side)
            model = fit(v["family"], ts, seed=run.seed)
            name = f"{side}_{k}.json"
            save_model(model, pdir / name)
            files[side].append(name)
            errors[f"{side}_{k}"] = mse(model, ts)
    run.write_json("predictors/manifest.json", {"family": v["family"], "budget": v["budget"], "files": files,
                                            "train_mse": errors})
    run.say({"predictors": str(pdir), "train_mse": errors})


def cmd_fit_uplift(run: Run) -> None:
    from .game_model import read_jsonl
    from .simfree import build_banks, fit_uplift

    v = run.values
    d0 = read_jsonl(run.existing("d0"))
    di = read_jsonl(run.existing("di"))
    banks = build_banks(d0, v["horizon"])
    table = fit_uplift(d0, di, v["bin_width"], v["grid_size"], v["horizon"], v["min_di_per_bin"])
    run.write_json("banks.json", banks.to_dict())
    run.write_json("uplift.json", table.to_dict())
    pop = table.populated_values()
    run.say({"baseline_mean": banks.baseline_mean, "empty_bins": table.empty_bins,
             "populated_cells": int(table.populated.sum()),
             "mean_populated_delta": float(pop.mean()) if len(pop) else None})


def _sim_inputs(run: Run):
    from .simfree import load_banks, load_uplift

    return load_banks(run.existing("banks")), load_uplift(run.existing("uplift"))


def cmd_simulate(run: Run) -> None:
    from .simfree import SimConfig, avg_score

    v = run.values
    if v["thresholds"] is None:
        raise ConfigError("thresholds", "required")
    banks, table = _sim_inputs(run)
    cfg = SimConfig(v["horizon"], v["runs"], run.seed, v["uplift_scales"])
    report = avg_score(banks, table, v["thresholds"], cfg)
    run.write_json(v["out"], report.to_dict())
    run.say(report.to_dict())


def cmd_optimize(run: Run) -> None:
    from .optimize import SearchSpace, bayes_opt, make_engine_objective, make_simfree_objective, write_trials
    from .simfree import SimConfig

    v = run.values
    slacks = v["target"] == "slacks"
    lower, upper = v["lower"], v["upper"]
    if lower is None:
        lower = -0.3 if slacks else 0.0
    if upper is None:
        upper = 0.3 if slacks else 0.6
    try:
        if slacks:
            space = SearchSpace([lower] * v["k"], [upper] * v["k"])
        else:
            space = SearchSpace.thresholds(v["k"], lower, upper, v["ordered"])
    except ValueError as exc:
        raise ConfigError("lower/upper", str(exc)) from None
    if slacks and v["backend"] != "engine":
        raise ConfigError("target", "slacks can only be tuned with the engine backend")
    if v["backend"] == "simfree":
        banks, table = _sim_inputs(run)
        objective = make_simfree_objective(banks, table, SimConfig(banks.horizon, v["runs"], run.seed))
    else:
        factory = None
        if slacks:
            _maxdelta_policy(run, v["k"], [0.0] * v["k"])  # fail early on missing predictors
            factory = lambda params: _maxdelta_policy(run, v["k"], list(params))
        objective = make_engine_objective(match_config(run, log_points=False), v["games_per_eval"],
                                          load_bank(run, required=True), v["workers"], policy_factory=factory)
    trials_path = run.dir / "optimize" / "trials.jsonl"
    seen = []

    def stream(trial):
        seen.append(trial)
        write_trials(seen, trials_path)

    result = bayes_opt(objective, space, v["init"], v["iters"], run.seed, v["backend"], on_trial=stream)
    best = {"target": v["target"], "best_params": result.best_params, "best_value": result.best_value,
            "backend": v["backend"],
            "evaluations": len(result.trials), "failed": sum(t.failed for t in result.trials)}
    run.write_json("optimize/best.json", best)
    run.say(best)


def cmd_gap_grid(run: Run) -> None:
    from .analysis import gap_grid
    from .game_model import read_jsonl

    v = run.values
    grid = gap_grid(read_jsonl(run.existing("engine_data")), read_jsonl(run.existing("human_data")),
                    v["n_values"], v["alpha_values"], v["min_cell"], v["min_elo"], v["max_elo"])
    run.write_json("gap_grid.json", grid.to_dict())
    run.say({"mean_delta": grid.mean_delta, "defined_cells": int(grid.defined.sum())})


def cmd_report(run: Run) -> None:
    from .analysis import report

    out = run.path(run.values["out"]) if run.values["out"] else None
    written = report(run.dir, out)
    run.say({"written": written})


HANDLERS = {
    "gen-data": cmd_gen_data,
    "ingest-pgn": cmd_ingest_pgn,
    "annotate": cmd_annotate,
    "calibrate": cmd_calibrate,
    "train-predictors": cmd_train_predictors,
    "play": cmd_play,
    "fit-uplift": cmd_fit_uplift,
    "simulate": cmd_simulate,
    "optimize": cmd_optimize,
    "gap-grid": cmd_gap_grid,
    "report": cmd_report,
}


def exit_code(exc: BaseException) -> int:
    from .analysis import ReportError
    from .calibration import CalibrationError
    from .engine_bridge import EngineError
    from .predictors import PredictorError
    from .simfree import SimError

    if isinstance(exc, EngineError):
        return EXIT_ENGINE
    if isinstance(exc, (DataError, CalibrationError, SimError, PredictorError, ReportError, OSError)):
        return EXIT_DATA
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    raise exc


def _install_drain():
    from .orchestrator import STOP

    def handler(signum, frame):
        if STOP.is_set():
            raise KeyboardInterrupt
        STOP.set()
        sys.stderr.write(json.dumps({"event": "drain", "message": "finishing in-flight games"}) + "\n")

    try:
        signal.signal(signal.SIGINT, handler)
    except ValueError:  # not in the main thread
        pass


def main(argv=None, out=None) -> int:
    args = vars(build_parser().parse_args(argv))
    cmd = args.pop("command")
    logging.basicConfig(level=args.get("log_level", "WARNING").upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values = resolve(cmd, args)
        run = Run(cmd, values, out or sys.stdout)
        if cmd not in ("report",):
            run.dir.mkdir(parents=True, exist_ok=True)
        _install_drain()
        HANDLERS[cmd](run)
    except Exception as exc:
        code = exit_code(exc)
        sys.stderr.write(json.dumps({"event": "error", "exit_code": code, "error": f"{type(exc).__name__}: {exc}"}) + "\n")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
