"""Command-line surface: influence precomputation, attacks, ACDP aggregation,
and result verification.

Exit codes: 0 success, 1 verification failure, 2 input error, 3 solver
configuration error, 4 empty-input analysis.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .acdp import abstract_path, relevance
from .engine import AttackResult, Scheduler, attack_result_to_json, run_attack
from .influence import (
    BackgroundSet,
    ConfigurationError,
    InfluenceMap,
    build_influence_map,
)
from .semantics import ModelConfigError, ModelSpec, forward, load_model, load_seed_input
from .solver import ExternalSolver, SolverError, SolverRequest

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_INPUT_ERROR = 2
EXIT_SOLVER_ERROR = 3
EXIT_EMPTY_ANALYSIS = 4

_STRATEGIES = {
    "fifo": Scheduler.fifo,
    "pq": Scheduler.pq,
    "pq-layers": Scheduler.pq_layers,
    "pq-capped": Scheduler.pq_capped,
}


class InputError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything a reproducible run needs, mirroring the CLI flags."""

    model: str
    output_dir: str
    seeds: list[str] = field(default_factory=list)
    background: Optional[str] = None
    influence_map: Optional[str] = None
    pixels: int = 1
    pixel_indices: Optional[list[int]] = None
    domain: tuple[float, float] = (0.0, 1.0)
    strategy: str = "pq"
    build_cap_s: Optional[float] = None
    wall_budget_s: Optional[float] = None
    solver_cmd: str = ""
    solver_timeout_s: float = 60.0
    random_seed: int = 0
    permutations: int = 128
    alpha: float = 0.2
    beta: float = 0.5
    reports: list[str] = field(default_factory=list)
    workers: int = 1

    def scheduler(self) -> Scheduler:
        make = _STRATEGIES[self.strategy]
        if self.strategy == "pq-capped":
            return make(self.build_cap_s if self.build_cap_s is not None else 30.0)
        return make()

    def solver_command(self) -> str:
        if self.solver_cmd:
            return self.solver_cmd
        return f"{sys.executable} -m attnconcolic.refsolver"

    def public(self) -> dict:
        doc = {k: v for k, v in self.__dict__.items()}
        doc["domain"] = list(self.domain)
        return doc


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _load_background(path: str, seed: int) -> BackgroundSet:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"background: cannot read {path}: {exc}") from exc
    try:
        return BackgroundSet(np.asarray(data, dtype=float), seed=seed)
    except (ConfigurationError, ValueError) as exc:
        raise InputError(f"background: {exc}") from exc


def _load_model(path: str) -> ModelSpec:
    try:
        return load_model(path)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"model: cannot read {path}: {exc}") from exc
    except ModelConfigError as exc:
        raise InputError(f"model: {exc}") from exc


def _seed_paths(specs: Sequence[str]) -> list[Path]:
    paths: list[Path] = []
    for spec in specs:
        p = Path(spec)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.json")))
        elif p.exists():
            paths.append(p)
        else:
            raise InputError(f"seeds: no such file or directory: {spec}")
    if not paths:
        raise InputError("seeds: nothing to attack")
    return paths


def _write_manifest(out_dir: Path, command: str, config: RunConfig,
                    artifacts: list[Path]) -> None:
    entries = []
    for path in sorted(artifacts):
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        entries.append({"path": path.name, "sha256": digest})
    doc = {"command": command, "config": config.public(), "artifacts": entries}
    (out_dir / "manifest.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _default_pixels(imap: InfluenceMap, model: ModelSpec, count: int) -> list[int]:
    """Top-``count`` input neurons by influence (ties to the lower index)."""
    entries = [(nid, val) for nid, val in imap.items() if nid.layer == 0]
    entries.sort(key=lambda kv: (-kv[1],
                                 int(np.ravel_multi_index(kv[0].index, model.shapes[0]))))
    flat = [int(np.ravel_multi_index(nid.index, model.shapes[0]))
            for nid, _ in entries[:count]]
    if len(flat) < count:
        raise InputError(f"pixels: model has only {len(entries)} input neurons")
    return flat


def _apply_adversarial(seed: np.ndarray, values: dict[str, float]) -> np.ndarray:
    flat = seed.copy().reshape(-1)
    for key, value in values.items():
        flat[int(key.lstrip("p"))] = float(value)
    return flat.reshape(seed.shape)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_influence(config: RunConfig) -> int:
    model = _load_model(config.model)
    if not config.background:
        raise InputError("background: required for influence computation")
    background = _load_background(config.background, config.random_seed)
    if not config.seeds:
        raise InputError("seeds: one seed input is required")
    seed = load_seed_input(config.seeds[0])
    try:
        imap = build_influence_map(model, background, seed,
                                   n_permutations=config.permutations)
    except ConfigurationError as exc:
        raise InputError(str(exc)) from exc
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "influence.json"
    imap.save(str(out_path))
    for layer, (count, lo, hi, mean) in imap.layer_summary().items():
        print(f"layer {layer}: {count} neurons  influence min {lo:.6g} "
              f"max {hi:.6g} mean {mean:.6g}")
    _write_manifest(out_dir, "influence", config, [out_path])
    print(f"wrote {out_path}")
    return EXIT_OK


def _attack_backend(config: RunConfig) -> ExternalSolver:
    backend = ExternalSolver(config.solver_command(),
                             default_timeout_s=config.solver_timeout_s)
    try:  # pre-flight so a bad command fails the whole batch loudly
        backend.check(SolverRequest(variables=(), assertion=(), timeout_s=10.0))
    except SolverError as exc:
        raise SolverError(f"solver command failed pre-flight: {exc}") from exc
    return backend


def _attack_single(config: RunConfig, model: ModelSpec, imap: InfluenceMap,
                   backend: ExternalSolver, seed_path: Path) -> tuple[dict, AttackResult]:
    seed = load_seed_input(str(seed_path))
    pixels = config.pixel_indices or _default_pixels(imap, model, config.pixels)
    result = run_attack(
        model, imap, seed, pixels, domain=config.domain,
        scheduler=config.scheduler(), wall_budget_s=config.wall_budget_s,
        backend=backend, solver_timeout_s=config.solver_timeout_s)
    return attack_result_to_json(result, seed_ref=str(seed_path)), result


def _attack_worker(config_doc: dict, seed_path: str) -> dict:
    config = RunConfig(**{**config_doc, "domain": tuple(config_doc["domain"])})
    model = _load_model(config.model)
    imap = _load_influence(config, model)
    backend = ExternalSolver(config.solver_command(),
                             default_timeout_s=config.solver_timeout_s)
    doc, _ = _attack_single(config, model, imap, backend, Path(seed_path))
    return doc


def _load_influence(config: RunConfig, model: ModelSpec) -> InfluenceMap:
    if config.influence_map:
        try:
            return InfluenceMap.load(config.influence_map)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"influence-map: cannot read: {exc}") from exc
    if not config.background:
        raise InputError("attack needs --influence-map or --background")
    background = _load_background(config.background, config.random_seed)
    seed = load_seed_input(config.seeds[0])
    return build_influence_map(model, background, seed,
                               n_permutations=config.permutations)


def cmd_attack(config: RunConfig) -> int:
    model = _load_model(config.model)
    seed_paths = _seed_paths(config.seeds)
    config.seeds = [str(p) for p in seed_paths]
    imap = _load_influence(config, model)
    backend = _attack_backend(config)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    docs: list[dict] = []
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(_attack_worker, config.public(), str(p))
                       for p in seed_paths]
            for path, future in zip(seed_paths, futures):
                try:
                    docs.append(future.result())
                except Exception as exc:  # per-seed failure; batch continues
                    docs.append({"seed": str(path), "outcome": "error",
                                 "error": str(exc)})
    else:
        for path in seed_paths:
            try:
                doc, _ = _attack_single(config, model, imap, backend, path)
                docs.append(doc)
            except SolverError:
                raise
            except Exception as exc:
                docs.append({"seed": str(path), "outcome": "error",
                             "error": str(exc)})

    artifacts: list[Path] = []
    for path, doc in zip(seed_paths, docs):
        out_path = out_dir / f"attack_{path.stem}.json"
        out_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        artifacts.append(out_path)

    csv_path = out_dir / "attacks.csv"
    columns = ["seed", "iterations", "sat", "unsat", "gen_constraints",
               "sol_constraints", "wall_s", "cpu_s", "outcome"]
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for doc in docs:
            writer.writerow({col: doc.get(col, "") for col in columns})
    artifacts.append(csv_path)
    _write_manifest(out_dir, "attack", config, artifacts)

    successes = sum(1 for d in docs if d.get("outcome") == "success")
    print(f"attacked {len(docs)} seed(s): {successes} success, "
          f"{len(docs) - successes} other")
    print(f"wrote {csv_path}")
    return EXIT_OK


def _load_reports(specs: Sequence[str]) -> list[dict]:
    docs = []
    for path in _seed_paths(specs):  # same file/dir expansion
        if path.name.startswith("manifest") or path.name == "acdp.json":
            continue
        try:
            docs.append(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise InputError(f"report {path}: {exc}") from exc
    return docs


def cmd_acdp(config: RunConfig) -> int:
    model = _load_model(config.model)
    if not config.background:
        raise InputError("background: required for relevance computation")
    background = _load_background(config.background, config.random_seed)
    reports = _load_reports(config.reports)
    successes = [doc for doc in reports if doc.get("outcome") == "success"]
    if not successes:
        print("no successful attacks in the given reports", file=sys.stderr)
        return EXIT_EMPTY_ANALYSIS

    suite = []
    label_pairs = []
    for doc in successes:
        seed_ref = doc["seed"]
        seed = load_seed_input(seed_ref) if isinstance(seed_ref, str) \
            else np.asarray(seed_ref, dtype=float).reshape(model.shapes[0])
        adv = _apply_adversarial(seed, doc["adversarial_values"])
        matrix = relevance(model, background, adv,
                           n_permutations=config.permutations)
        suite.append((adv, matrix))
        label_pairs.append((int(doc["original_label"]), int(doc["flipped_label"])))

    report = abstract_path(suite, config.alpha, config.beta, label_pairs)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights_path = out_dir / "acdp_weights.csv"
    with open(weights_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["neuron", "weight"])
        for nid in sorted(report.weights):
            writer.writerow([nid.key(), report.weights[nid]])
    report_path = out_dir / "acdp.json"
    report_path.write_text(
        json.dumps(report.to_json(weights_path.name), indent=2) + "\n",
        encoding="utf-8")
    _write_manifest(out_dir, "acdp", config, [report_path, weights_path])
    print(f"suite of {report.suite_size}: {len(report.members)} neurons above "
          f"beta={report.beta}; pair entropy "
          f"{report.entropy_bits:.3f} bits")
    print(f"wrote {report_path}")
    return EXIT_OK


def cmd_verify(config: RunConfig) -> int:
    model = _load_model(config.model)
    reports = _load_reports(config.reports)
    failures = []
    checked = 0
    for doc in reports:
        if doc.get("outcome") != "success":
            continue
        checked += 1
        name = doc.get("seed", f"case{checked}")
        seed_ref = doc["seed"]
        seed = load_seed_input(seed_ref) if isinstance(seed_ref, str) \
            else np.asarray(seed_ref, dtype=float).reshape(model.shapes[0])
        adv = _apply_adversarial(seed, doc["adversarial_values"])
        label = forward(model, adv).label
        in_bounds = True
        pixel_order = [int(p) for p in doc.get("pixel_indices", [])]
        domains = doc.get("domain", [])
        for key, value in doc["adversarial_values"].items():
            pixel = int(key.lstrip("p"))
            if pixel in pixel_order and pixel_order.index(pixel) < len(domains):
                lo, hi = domains[pixel_order.index(pixel)]
                if not lo <= value <= hi:
                    in_bounds = False
        flipped = label != int(doc["original_label"])
        verdict = "PASS" if flipped and in_bounds else "FAIL"
        print(f"{verdict} {name}: label {doc['original_label']} -> {label}"
              f"{'' if in_bounds else ' (out of bounds)'}")
        if verdict == "FAIL":
            failures.append(name)
    if failures:
        print(f"{len(failures)} case(s) failed re-execution: {failures}",
              file=sys.stderr)
        return EXIT_VERIFY_FAILED
    print(f"verified {checked} successful case(s)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="model JSON file")
    p.add_argument("--output-dir", default="out", help="artifact directory")
    p.add_argument("--random-seed", type=int, default=0)
    p.add_argument("--permutations", type=int, default=128,
                   help="permutation count for the sampling estimator")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnconcolic",
        description="Influence-guided concolic testing of attention classifiers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("influence", help="precompute the per-neuron influence map")
    _add_common(p)
    p.add_argument("--background", required=True, help="background inputs JSON")
    p.add_argument("--seed-input", required=True, help="probe input JSON")

    p = sub.add_parser("attack", help="search for label flips per seed")
    _add_common(p)
    p.add_argument("--seeds", nargs="+", required=True,
                   help="seed JSON files or directories")
    p.add_argument("--background", help="background inputs JSON (to build the map inline)")
    p.add_argument("--influence-map", help="precomputed influence map JSON")
    p.add_argument("--pixels", type=int, default=1,
                   help="perturb the top-N most influential pixels")
    p.add_argument("--pixel-indices", help="explicit flat pixel indices, comma separated")
    p.add_argument("--domain", nargs=2, type=float, default=(0.0, 1.0),
                   metavar=("LO", "HI"))
    p.add_argument("--strategy", choices=sorted(_STRATEGIES), default="pq")
    p.add_argument("--build-cap-s", type=float, default=None,
                   help="per-constraint build cap (pq-capped)")
    p.add_argument("--wall-budget-s", type=float, default=None)
    p.add_argument("--solver-cmd", default="",
                   help="external SMT solver command (default: bundled reference solver)")
    p.add_argument("--solver-timeout-s", type=float, default=60.0)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("acdp", help="aggregate successful attacks into an ACDP")
    _add_common(p)
    p.add_argument("--background", required=True)
    p.add_argument("--reports", nargs="+", required=True,
                   help="attack report files or directories")
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--beta", type=float, default=0.5)

    p = sub.add_parser("verify", help="re-execute claimed adversarial inputs")
    p.add_argument("--model", required=True)
    p.add_argument("--reports", nargs="+", required=True)

    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    config = RunConfig(model=args.model,
                       output_dir=getattr(args, "output_dir", "out"))
    for name in ("background", "influence_map", "strategy", "build_cap_s",
                 "wall_budget_s", "solver_cmd", "solver_timeout_s",
                 "random_seed", "permutations", "alpha", "beta", "workers",
                 "pixels"):
        if hasattr(args, name) and getattr(args, name) is not None:
            setattr(config, name, getattr(args, name))
    if getattr(args, "domain", None) is not None:
        config.domain = (float(args.domain[0]), float(args.domain[1]))
    if getattr(args, "seeds", None):
        config.seeds = list(args.seeds)
    if getattr(args, "seed_input", None):
        config.seeds = [args.seed_input]
    if getattr(args, "reports", None):
        config.reports = list(args.reports)
    if getattr(args, "pixel_indices", None):
        config.pixel_indices = [int(s) for s in args.pixel_indices.split(",") if s]
    return config


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    config = _config_from_args(args)
    handlers = {"influence": cmd_influence, "attack": cmd_attack,
                "acdp": cmd_acdp, "verify": cmd_verify}
    try:
        return handlers[args.command](config)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except (ModelConfigError, ConfigurationError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER_ERROR


if __name__ == "__main__":
    sys.exit(main())
