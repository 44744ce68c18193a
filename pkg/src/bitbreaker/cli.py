"""Command-line driver: rank, select, optimize, prune, attack, eval, oracle, gen-fixtures.

Every command reads a run configuration (``--config`` JSON, then the
``BITBREAKER_SEED`` environment variable, then explicit flags) and writes its
machine-readable results under the output directory. Console output is for
humans only.

Exit codes: 0 success, 1 attack below threshold under ``--strict``,
2 I/O or configuration error, 3 enumeration guard exceeded.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import fixtures
from .flipset import FlipSet, load_flipset, save_flipset
from .genbfa import GaConfig, optimize, prune_run, write_history_csv
from .oracle import DEFAULT_GUARD, GuardExceeded, exhaustive_min_flipset
from .qtensor import QuantFormat
from .sensitivity import SensitivityConfig, SensitivityProfile, rank_layers
from .subsetsel import (
    DEFAULT_THRESHOLD_MULTIPLIER,
    SubsetConfig,
    ThresholdNotReached,
    default_rates,
    select_subset,
    write_sweep_csv,
)
from .toymodel import (
    CheckpointError,
    Dataset,
    ModelError,
    ToyModel,
    accuracy,
    exp_loss,
    forward_loss,
    load_checkpoint,
    load_dataset,
    mask_weights,
)

EXIT_OK, EXIT_BELOW_THRESHOLD, EXIT_CONFIG, EXIT_GUARD = 0, 1, 2, 3
SEED_ENV = "BITBREAKER_SEED"
DEFAULT_OUTPUT_DIR = "bitbreaker-out"

# output file names inside the output directory
PROFILE_CSV = "profile.csv"
SWEEP_CSV = "sweep.csv"
HISTORY_CSV = "ga_history.csv"
WSUB_JSON = "w_sub.json"
WOPT_JSON = "w_opt.json"
PRUNED_JSON = "w_pruned.json"
FINAL_JSON = "w_final.json"
REPORT_JSON = "report.json"
EVAL_JSON = "eval.json"
ORACLE_JSON = "oracle.json"


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


# ---------------------------------------------------------------- configuration

@dataclass
class SensitivitySection:
    alpha: float = 0.5
    r: float = 0.1
    pos: dict[str, int] = field(default_factory=dict)


@dataclass
class SubsetSection:
    rates: list[float] = field(default_factory=default_rates)
    threshold_mode: str = "relative"
    threshold: float = DEFAULT_THRESHOLD_MULTIPLIER
    top_n: int = 1


@dataclass
class GaSection:
    m: int = 100
    g: int = 150
    mu: float = 0.1
    pc: float = 0.9
    N: int = 20
    seed: int = 0


@dataclass
class PruneSection:
    enabled: bool = True
    epsilon: float | None = None
    T: int = 500
    N: int = 50


@dataclass
class RunConfig:
    checkpoint: str | None = None
    dataset: str | None = None
    output_dir: str = DEFAULT_OUTPUT_DIR
    sensitivity: SensitivitySection = field(default_factory=SensitivitySection)
    subset: SubsetSection = field(default_factory=SubsetSection)
    ga: GaSection = field(default_factory=GaSection)
    prune: PruneSection = field(default_factory=PruneSection)

    def to_dict(self, include_output: bool = True) -> dict:
        d = {"version": 1, **dataclasses.asdict(self)}
        if not include_output:
            del d["output_dir"]
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        raw = dict(raw)
        version = raw.pop("version", 1)
        if version != 1:
            raise ConfigError(f"unsupported config version {version!r}")
        sections = {"sensitivity": SensitivitySection, "subset": SubsetSection, "ga": GaSection,
                    "prune": PruneSection}
        cfg = cls()
        for key, value in raw.items():
            if key in sections:
                setattr(cfg, key, _section(sections[key], value, key))
            elif key in ("checkpoint", "dataset", "output_dir"):
                if value is not None and not isinstance(value, str):
                    raise ConfigError(f"{key} must be a string path")
                setattr(cfg, key, value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cfg

    def validate(self) -> None:
        s, sub, ga, pr = self.sensitivity, self.subset, self.ga, self.prune
        for name, value in (("subset.top_n", sub.top_n), ("ga.m", ga.m), ("ga.g", ga.g), ("ga.N", ga.N),
                            ("ga.seed", ga.seed), ("prune.T", pr.T), ("prune.N", pr.N)):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name} must be an integer")
        for name, value in (("sensitivity.alpha", s.alpha), ("sensitivity.r", s.r), ("ga.mu", ga.mu),
                            ("ga.pc", ga.pc), ("subset.threshold", sub.threshold)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name} must be a number")
        if not isinstance(sub.rates, list) or not all(isinstance(r, (int, float)) for r in sub.rates):
            raise ConfigError("subset.rates must be a list of numbers")
        if not isinstance(s.pos, dict):
            raise ConfigError("sensitivity.pos must map format names to bit positions")
        try:
            self.sensitivity_config()
            SubsetConfig(1.0, sub.rates, sub.top_n, s.alpha)
            GaConfig(1.0, ga.m, ga.g, ga.mu, ga.pc, ga.N, ga.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if sub.threshold_mode not in ("relative", "absolute"):
            raise ConfigError("subset.threshold_mode must be 'relative' or 'absolute'")
        if not (math.isfinite(sub.threshold) and sub.threshold > 0):
            raise ConfigError("subset.threshold must be a positive number")
        if pr.epsilon is not None and not pr.epsilon > 0:
            raise ConfigError("prune.epsilon must be positive")
        if pr.T < 1 or pr.N < 1:
            raise ConfigError("prune.T and prune.N must be positive")

    def sensitivity_config(self) -> SensitivityConfig:
        return SensitivityConfig(self.sensitivity.alpha, self.sensitivity.r, self.flip_pos())

    def flip_pos(self) -> dict[QuantFormat, int]:
        try:
            return {QuantFormat(k): int(v) for k, v in self.sensitivity.pos.items()}
        except ValueError as exc:
            raise ConfigError(f"bad flip position override: {exc}") from exc

    def subset_config(self, threshold: float) -> SubsetConfig:
        s = self.subset
        return SubsetConfig(threshold, s.rates, s.top_n, self.sensitivity.alpha, self.flip_pos())

    def ga_config(self, threshold: float) -> GaConfig:
        g = self.ga
        return GaConfig(threshold, g.m, g.g, g.mu, g.pc, g.N, g.seed)

    def threshold(self, clean_loss: float) -> float:
        if self.subset.threshold_mode == "absolute":
            return float(self.subset.threshold)
        return float(self.subset.threshold) * clean_loss


def _section(cls, value, name: str):
    if not isinstance(value, dict):
        raise ConfigError(f"{name} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(value) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(unknown)}")
    return cls(**value)


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {p}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return RunConfig.from_dict(raw)


# flag dest -> (section, key); None section means top level
_FLAG_MAP = {
    "checkpoint": (None, "checkpoint"),
    "dataset": (None, "dataset"),
    "output_dir": (None, "output_dir"),
    "alpha": ("sensitivity", "alpha"),
    "rank_rate": ("sensitivity", "r"),
    "rates": ("subset", "rates"),
    "threshold_mode": ("subset", "threshold_mode"),
    "threshold": ("subset", "threshold"),
    "top_n": ("subset", "top_n"),
    "population": ("ga", "m"),
    "generations": ("ga", "g"),
    "mutation_rate": ("ga", "mu"),
    "crossover_prob": ("ga", "pc"),
    "patience": ("ga", "N"),
    "seed": ("ga", "seed"),
    "prune_epsilon": ("prune", "epsilon"),
    "prune_iters": ("prune", "T"),
    "prune_patience": ("prune", "N"),
}


def resolve_config(args: argparse.Namespace, environ: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then --config, then BITBREAKER_SEED, then explicit flags."""
    environ = os.environ if environ is None else environ
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if environ.get(SEED_ENV, "").strip():
        try:
            cfg.ga.seed = int(environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {environ[SEED_ENV]!r}") from exc
    for dest, (section, key) in _FLAG_MAP.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        target = cfg if section is None else getattr(cfg, section)
        setattr(target, key, value)
    for item in getattr(args, "pos", None) or []:
        fmt, _, pos = item.partition("=")
        try:
            cfg.sensitivity.pos[QuantFormat(fmt).value] = int(pos)
        except ValueError as exc:
            raise ConfigError(f"--pos expects FORMAT=BIT (e.g. int8=7), got {item!r}") from exc
    if getattr(args, "no_prune", False):
        cfg.prune.enabled = False
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- shared helpers

def load_inputs(cfg: RunConfig) -> tuple[ToyModel, Dataset]:
    ckpt = cfg.checkpoint or str(fixtures.fixture_path("mlp"))
    data = cfg.dataset or str(fixtures.fixture_path("dataset"))
    for label, path in (("checkpoint", ckpt), ("dataset", data)):
        if not Path(path).is_file():
            raise ConfigError(f"{label} not found: {path}")
    try:
        model = load_checkpoint(ckpt)
        dataset = load_dataset(data)
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from exc
    width = model.input_width
    if width is not None and dataset.inputs.shape[1] != width:
        raise ConfigError(f"dataset has {dataset.inputs.shape[1]} features, model expects {width}")
    if int(dataset.labels.max()) >= model.num_classes:
        raise ConfigError("dataset labels exceed the model's class count")
    return model, dataset


def metrics(m: ToyModel, d: Dataset, fs: FlipSet | None = None) -> dict[str, float]:
    loss = forward_loss(m, d, fs)
    return {"loss": loss, "perplexity": exp_loss(loss), "accuracy": accuracy(m, d, fs)}


def read_flipset(path: str | Path, m: ToyModel) -> FlipSet:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"flip set not found: {p}")
    try:
        fs = load_flipset(p)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    try:
        layer = m.layer(fs.layer)
    except ModelError as exc:
        raise ConfigError(f"{p}: unknown layer {fs.layer!r}") from exc
    if fs.indices and max(fs.indices) >= layer.weights.size:
        raise ConfigError(f"{p}: index out of range for layer {fs.layer!r}")
    if not 0 <= fs.pos < layer.weights.format.width:
        raise ConfigError(f"{p}: bit position {fs.pos} invalid for {layer.weights.format.value}")
    return fs


def write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def flip_rate(n_flips: int, m: ToyModel) -> float:
    return n_flips / m.total_bits()


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_profile(profile: SensitivityProfile) -> None:
    width = max(len("layer"), *(len(e.layer) for e in profile.entries))
    print(f"{'layer':<{width}}  {'k':>5}  loss")
    for e in profile.entries:
        print(f"{e.layer:<{width}}  {e.k:>5}  {e.loss:.6g}")


def _threads(args) -> int:
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return args.threads
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


# ---------------------------------------------------------------- commands

def cmd_rank(cfg: RunConfig, args) -> int:
    m, d = load_inputs(cfg)
    profile = rank_layers(m, d, cfg.sensitivity_config(), threads=_threads(args))
    out = _outdir(cfg)
    profile.write_csv(out / PROFILE_CSV)
    _print_profile(profile)
    print(f"wrote {out / PROFILE_CSV}")
    return EXIT_OK


def cmd_select(cfg: RunConfig, args) -> int:
    m, d = load_inputs(cfg)
    threads = _threads(args)
    out = _outdir(cfg)
    profile = rank_layers(m, d, cfg.sensitivity_config(), threads=threads)
    profile.write_csv(out / PROFILE_CSV)
    th = cfg.threshold(forward_loss(m, d))
    try:
        sel = select_subset(m, d, profile, cfg.subset_config(th), threads=threads)
    except ThresholdNotReached as exc:
        write_sweep_csv(exc.sweep, out / SWEEP_CSV)
        print(f"select: {exc}", file=sys.stderr)
        return EXIT_BELOW_THRESHOLD if args.strict else EXIT_OK
    write_sweep_csv(sel.sweep, out / SWEEP_CSV)
    save_flipset(sel.flipset, out / WSUB_JSON)
    w = sel.winner
    print(f"W_sub: layer {w.layer}, r={w.r}%, k={w.k}, loss {w.loss:.6g} (threshold {th:.6g})")
    print(f"wrote {out / WSUB_JSON}")
    return EXIT_OK


def cmd_optimize(cfg: RunConfig, args) -> int:
    m, d = load_inputs(cfg)
    out = _outdir(cfg)
    w_sub = read_flipset(args.flipset or out / WSUB_JSON, m)
    th = cfg.threshold(forward_loss(m, d))
    res = optimize(m, d, w_sub, cfg.ga_config(th), threads=_threads(args))
    write_history_csv(res.history, out / HISTORY_CSV)
    save_flipset(res.flipset, out / WOPT_JSON)
    print(f"W_opt: {len(res.flipset)} flips in {res.flipset.layer}, loss {res.loss:.6g} "
          f"(threshold {th:.6g}), {len(res.history)} generations")
    print(f"wrote {out / WOPT_JSON}")
    if not res.success:
        print("optimize: best set is below the loss threshold", file=sys.stderr)
        return EXIT_BELOW_THRESHOLD if args.strict else EXIT_OK
    return EXIT_OK


def cmd_prune(cfg: RunConfig, args) -> int:
    m, d = load_inputs(cfg)
    out = _outdir(cfg)
    best = read_flipset(args.flipset or out / WOPT_JSON, m)
    pr = cfg.prune
    res = prune_run(m, d, best, pr.epsilon, pr.T, pr.N, rng=np.random.default_rng(cfg.ga.seed))
    save_flipset(res.flipset, out / PRUNED_JSON)
    print(f"pruned {len(best)} -> {len(res.flipset)} flips, loss {res.reference_loss:.6g} -> {res.loss:.6g}")
    print(f"wrote {out / PRUNED_JSON}")
    return EXIT_OK


def run_attack(cfg: RunConfig, m: ToyModel, d: Dataset, threads: int, timings: bool = True,
               out: Path | None = None) -> dict:
    """Full pipeline; returns the report dictionary. Stage failures are recorded, not raised."""
    clock: dict[str, float] = {}
    # the output directory does not influence results and is left out of the echo
    report: dict[str, Any] = {"version": 1, "config": cfg.to_dict(include_output=False)}
    clean = metrics(m, d)
    th = cfg.threshold(clean["loss"])
    report.update(clean=clean, threshold=th, total_bits=m.total_bits())
    report.update(profile=None, subset=None, optimized=None, pruned=None, final=None, attacked=None,
                  flips=0, flip_rate=0.0, success=False, error=None)

    t0 = time.perf_counter()
    profile = rank_layers(m, d, cfg.sensitivity_config(), threads=threads)
    clock["rank"] = time.perf_counter() - t0
    report["profile"] = [{"layer": e.layer, "k": e.k, "loss": e.loss} for e in profile.entries]
    if out is not None:
        profile.write_csv(out / PROFILE_CSV)

    t0 = time.perf_counter()
    try:
        sel = select_subset(m, d, profile, cfg.subset_config(th), threads=threads)
    except ThresholdNotReached as exc:
        clock["select"] = time.perf_counter() - t0
        if out is not None:
            write_sweep_csv(exc.sweep, out / SWEEP_CSV)
        report["error"] = {"stage": "select", "message": str(exc)}
        if timings:
            report["timings"] = clock
        return report
    clock["select"] = time.perf_counter() - t0
    w = sel.winner
    report["subset"] = {"layer": w.layer, "r": w.r, "k": w.k, "size": len(sel.flipset), "loss": w.loss}
    if out is not None:
        write_sweep_csv(sel.sweep, out / SWEEP_CSV)
        save_flipset(sel.flipset, out / WSUB_JSON)

    t0 = time.perf_counter()
    ga = optimize(m, d, sel.flipset, cfg.ga_config(th), threads=threads)
    clock["optimize"] = time.perf_counter() - t0
    report["optimized"] = {
        "layer": ga.flipset.layer, "pos": ga.flipset.pos, "indices": list(ga.flipset.indices),
        "loss": ga.loss, "fitness": ga.fitness, "success": ga.success,
        "generations": len(ga.history), "evaluations": ga.evaluations,
    }
    if out is not None:
        write_history_csv(ga.history, out / HISTORY_CSV)
        save_flipset(ga.flipset, out / WOPT_JSON)

    final = ga.flipset
    if cfg.prune.enabled:
        t0 = time.perf_counter()
        pr = cfg.prune
        res = prune_run(m, d, ga.flipset, pr.epsilon, pr.T, pr.N, rng=np.random.default_rng(cfg.ga.seed))
        clock["prune"] = time.perf_counter() - t0
        final = res.flipset
        report["pruned"] = {"indices": list(final.indices), "loss": res.loss, "epsilon": res.epsilon,
                            "iterations": res.iterations}
        if out is not None:
            save_flipset(final, out / PRUNED_JSON)

    t0 = time.perf_counter()
    attacked = metrics(m, d, final)
    clock["evaluate"] = time.perf_counter() - t0
    report["final"] = final.to_dict()
    report["attacked"] = attacked
    report["flips"] = len(final)
    report["flip_rate"] = flip_rate(len(final), m)
    report["success"] = attacked["loss"] >= th
    if out is not None:
        save_flipset(final, out / FINAL_JSON)
    if timings:
        report["timings"] = clock
    return report


def cmd_attack(cfg: RunConfig, args) -> int:
    m, d = load_inputs(cfg)
    out = _outdir(cfg)
    report = run_attack(cfg, m, d, _threads(args), timings=not args.no_timings, out=out)
    write_json(out / REPORT_JSON, report)
    c = report["clean"]
    print(f"clean:    loss {c['loss']:.6g}  ppl {c['perplexity']:.6g}  acc {c['accuracy']:.4f}")
    if report["error"] is not None:
        print(f"{report['error']['stage']}: {report['error']['message']}", file=sys.stderr)
    else:
        a = report["attacked"]
        print(f"attacked: loss {a['loss']:.6g}  ppl {a['perplexity']:.6g}  acc {a['accuracy']:.4f}")
        print(f"flips: {report['flips']} in {report['final']['layer']}  flip rate {report['flip_rate']:.4g}")
    print(f"wrote {out / REPORT_JSON}")
    if not report["success"]:
        print(f"attack did not reach the loss threshold {report['threshold']:.6g}", file=sys.stderr)
        return EXIT_BELOW_THRESHOLD if args.strict else EXIT_OK
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    m, d = load_inputs(cfg)
    fs = read_flipset(args.flipset, m) if args.flipset else None
    if args.mask and fs is None:
        raise ConfigError("--mask requires --flipset")
    if args.mask:
        result = {"mode": "masked", **metrics(mask_weights(m, fs), d)}
    else:
        result = {"mode": "clean" if fs is None else "flipped", **metrics(m, d, fs)}
    payload = {"version": 1, **result, "flips": 0 if fs is None else len(fs)}
    target = Path(args.output) if args.output else _outdir(cfg) / EVAL_JSON
    write_json(target, payload)
    print(f"{payload['mode']}: loss {payload['loss']:.6g}  ppl {payload['perplexity']:.6g}  "
          f"acc {payload['accuracy']:.4f}")
    print(f"wrote {target}")
    return EXIT_OK


def cmd_oracle(cfg: RunConfig, args) -> int:
    m, d = load_inputs(cfg)
    threads = _threads(args)
    th = cfg.threshold(forward_loss(m, d))
    if args.flipset:
        space = read_flipset(args.flipset, m)
    else:
        profile = rank_layers(m, d, cfg.sensitivity_config(), threads=threads)
        try:
            space = select_subset(m, d, profile, cfg.subset_config(th), threads=threads).flipset
        except ThresholdNotReached as exc:
            print(f"oracle: no search space: {exc}", file=sys.stderr)
            return EXIT_BELOW_THRESHOLD if args.strict else EXIT_OK
    try:
        res = exhaustive_min_flipset(m, d, space, th, args.max_size, guard=args.guard, threads=threads)
    except GuardExceeded as exc:
        print(f"oracle refused: {exc}", file=sys.stderr)
        return EXIT_GUARD
    out = _outdir(cfg)
    write_json(out / ORACLE_JSON, {**res.to_dict(), "threshold": th, "space_size": len(space)})
    if res.min_cardinality is None:
        print(f"no subset of size <= {args.max_size} reaches {th:.6g} ({res.subsets_examined} examined)")
    else:
        print(f"minimum cardinality {res.min_cardinality}: {list(res.witness.indices)} in {res.witness.layer}, "
              f"loss {res.witness_loss:.6g} ({res.subsets_examined} examined)")
    print(f"wrote {out / ORACLE_JSON}")
    return EXIT_OK


def cmd_gen_fixtures(cfg: RunConfig, args) -> int:
    accs = fixtures.write_reference_fixtures(args.out_dir)
    for name, acc in accs.items():
        print(f"{name}: clean accuracy {acc:.4f}")
    print(f"wrote fixtures to {args.out_dir}")
    return EXIT_OK


COMMANDS = {
    "rank": cmd_rank,
    "select": cmd_select,
    "optimize": cmd_optimize,
    "prune": cmd_prune,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "oracle": cmd_oracle,
    "gen-fixtures": cmd_gen_fixtures,
}


# ---------------------------------------------------------------- argument parsing

def _rates(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; flags override its values")
    p.add_argument("--checkpoint", help="model checkpoint JSON (default: bundled reference MLP)")
    p.add_argument("--dataset", help="dataset JSON (default: bundled reference dataset)")
    p.add_argument("--output-dir", dest="output_dir", help=f"output directory (default: {DEFAULT_OUTPUT_DIR})")
    p.add_argument("--threads", type=int, help="worker cap (default: available CPUs); results do not depend on it")
    p.add_argument("--strict", action="store_true", help="exit 1 when the loss threshold is not reached")
    g = p.add_argument_group("sensitivity")
    g.add_argument("--alpha", type=float, help="gradient weight in the sensitivity score")
    g.add_argument("--rank-rate", dest="rank_rate", type=float, help="percent of weights flipped per layer when ranking")
    g.add_argument("--pos", action="append", metavar="FORMAT=BIT", help="flip position override, repeatable")
    g = p.add_argument_group("subset selection")
    g.add_argument("--rates", type=_rates, help="ascending sampling rates in percent, comma separated")
    g.add_argument("--threshold-mode", dest="threshold_mode", choices=("relative", "absolute"))
    g.add_argument("--threshold", type=float, help="multiplier of the clean loss, or absolute loss")
    g.add_argument("--top-n", dest="top_n", type=int, help="number of top-ranked layers to sweep")
    g = p.add_argument_group("genetic optimisation")
    g.add_argument("--population", type=int)
    g.add_argument("--generations", type=int)
    g.add_argument("--mutation-rate", dest="mutation_rate", type=float)
    g.add_argument("--crossover-prob", dest="crossover_prob", type=float)
    g.add_argument("--patience", type=int, help="generations without improvement before stopping")
    g.add_argument("--seed", type=int, help=f"overrides {SEED_ENV} and the config file")
    g = p.add_argument_group("pruning")
    g.add_argument("--no-prune", dest="no_prune", action="store_true")
    g.add_argument("--prune-epsilon", dest="prune_epsilon", type=float)
    g.add_argument("--prune-iters", dest="prune_iters", type=int)
    g.add_argument("--prune-patience", dest="prune_patience", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bitbreaker", description="Bit-flip attack pipeline for toy quantized models.")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("rank", help="rank layers by single-probe flip loss"))
    _common(sub.add_parser("select", help="pick the smallest qualifying top-k weight subset"))
    p = sub.add_parser("optimize", help="shrink a weight subset with the genetic search")
    _common(p)
    p.add_argument("--flipset", help=f"input subset (default: <output-dir>/{WSUB_JSON})")
    p = sub.add_parser("prune", help="randomly drop flips that barely change the loss")
    _common(p)
    p.add_argument("--flipset", help=f"input set (default: <output-dir>/{WOPT_JSON})")
    p = sub.add_parser("attack", help="rank, select, optimize and prune in one run")
    _common(p)
    p.add_argument("--no-timings", dest="no_timings", action="store_true",
                   help="leave wall-clock timings out of the report")
    p = sub.add_parser("eval", help="loss, perplexity and accuracy with an optional flip set")
    _common(p)
    p.add_argument("--flipset", help="flip set to apply")
    p.add_argument("--mask", action="store_true", help="zero the flip set's weights instead of flipping them")
    p.add_argument("--output", help=f"metrics file (default: <output-dir>/{EVAL_JSON})")
    p = sub.add_parser("oracle", help="exhaustive minimum flip set over a small space")
    _common(p)
    p.add_argument("--flipset", help="search space (default: the selected W_sub)")
    p.add_argument("--max-size", dest="max_size", type=int, default=3)
    p.add_argument("--guard", type=int, default=DEFAULT_GUARD, help="largest number of subsets to enumerate")
    p = sub.add_parser("gen-fixtures", help="retrain and write the bundled reference fixtures")
    p.add_argument("--out-dir", dest="out_dir", default="fixtures")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args) if args.command != "gen-fixtures" else RunConfig()
        if args.command == "oracle" and args.max_size < 1:
            raise ConfigError("--max-size must be >= 1")
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
