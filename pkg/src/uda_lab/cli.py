"""``uda-lab`` command line.

Every command writes ``<output>.manifest.json`` next to its main output. The
manifest stores the exact argument vector, so ``uda-lab replay <manifest>``
re-runs the command and reproduces the outputs byte for byte.

Exit codes: 0 success, 2 usage/config error, 3 convergence failure,
4 internal-invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, _accel
from .bounds import evaluate_bounds
from .casesolver import ConvergenceError, case_preset, run_case
from .datagen import Dataset, MoonsConfig, gen_two_moons
from .domains import LinearUdaModel, MixtureDomainPair
from .nnkit import TrainConfig, TrainingDivergedError, UdaMethod, train_uda
from .poison import (
    CleanLabelSpec,
    InfeasiblePoisonError,
    LabelScheme,
    WatermarkSpec,
    WrongLabelSpec,
    class_centroids,
    clean_label_alternate,
    make_watermark_poison,
    make_wrong_label_poison,
)

log = logging.getLogger("uda_lab")

EXIT_OK, EXIT_USAGE, EXIT_CONVERGENCE, EXIT_INVARIANT = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ manifest


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from any JSON-serialisable key."""
    digest = hashlib.sha256(canonical_json(list(parts)).encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int
    outputs: list[str] = field(default_factory=list)
    tool_version: str = __version__

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "tool_version": self.tool_version,
            "outputs": self.outputs,
            # outputs are byte-identical for a fixed kernel backend
            "kernel_backend": _accel.backend(),
        }

    def write(self, main_output: str) -> Path:
        path = Path(str(main_output) + ".manifest.json")
        _write_text(path, json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(d["command"], d["argv"], d["config"], d["seed"], d["outputs"], d["tool_version"])


def _write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")


def _config_of(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}


def _finish(args, argv, outputs: list[str], seed: int) -> None:
    RunManifest(args.command, list(argv), _config_of(args), seed, outputs).write(outputs[0])


# ------------------------------------------------------------------ commands


def cmd_case(args, argv) -> int:
    cfg = case_preset(args.id)
    try:
        report = run_case(cfg, restarts=args.restarts, seed=args.seed, case_id=args.id)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    _write_text(args.out, report.to_json() + "\n")
    _finish(args, argv, [args.out], args.seed)
    m = report.bound_report.measures
    print(f"case {args.id}: outcome={report.outcome} e_T={m.e_T_abs:.4g} lower_bound={report.bound_report.lower_bound:.4g} u={report.best_params.u.round(4).tolist()}")
    return EXIT_OK


def load_bounds_config(path) -> tuple[MixtureDomainPair, LinearUdaModel]:
    """``{"pair": {"source": .., "target": ..}, "model": {"u": [..], "a": .., "b": ..}}``.

    The pair may also be given inline as top-level ``source``/``target``.
    """
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        pair_d = d["pair"] if "pair" in d else {"source": d["source"], "target": d["target"]}
        return MixtureDomainPair.from_dict(pair_d), LinearUdaModel.from_dict(d["model"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"bad bounds config {path}: {exc}") from None


def cmd_bounds(args, argv) -> int:
    pair, model = load_bounds_config(args.config)
    report = evaluate_bounds(pair, model)
    _write_text(args.out, report.to_json() + "\n")
    _finish(args, argv, [args.out], 0)
    if not report.consistent:
        print("error: bound inequality violated; this indicates a bug", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_gen_moons(args, argv) -> int:
    src, tgt = gen_two_moons(MoonsConfig(args.n, args.noise, args.shift, args.seed))
    out = Path(args.out_dir)
    paths = [str(out / "source.csv"), str(out / "target.csv")]
    out.mkdir(parents=True, exist_ok=True)
    src.to_csv(paths[0])
    tgt.to_csv(paths[1])
    _finish(args, argv, paths, args.seed)
    return EXIT_OK


def _read_dataset(path) -> Dataset:
    try:
        return Dataset.from_csv(Path(path))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read dataset {path}: {exc}") from None


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, seed=args.seed)


def _reference(args, source: Dataset):
    """Clean source-only model and class centroids for nearest-incorrect labeling."""
    rep = train_uda(UdaMethod.SOURCE_ONLY, source, source, _train_cfg(args), seed=args.seed)
    return rep.model, class_centroids(rep.model, source)


def cmd_poison(args, argv) -> int:
    source, target = _read_dataset(args.source), _read_dataset(args.target)
    outputs = [args.out]
    try:
        if args.attack in ("wrong-label", "watermark"):
            model = centroids = None
            if args.scheme == LabelScheme.NEAREST_INCORRECT.value:
                model, centroids = _reference(args, source)
            if args.attack == "wrong-label":
                spec = WrongLabelSpec(args.sample_from, args.fraction, args.scheme)
                poisons = make_wrong_label_poison(source, target, spec, args.seed, model, centroids)
            else:
                spec = WatermarkSpec(args.alpha, args.fraction, args.scheme)
                poisons = make_watermark_poison(source, target, spec, args.seed, model, centroids)
                for msg in poisons.skipped:
                    print(f"warning: skipped {msg}", file=sys.stderr)
        else:
            spec = CleanLabelSpec(args.eps, args.norm, args.n_poison, args.base_from, args.test_index, args.outer_iters, args.attacker_step)
            poisons, trace = clean_label_alternate(spec, args.method, source, target, _train_cfg(args), args.seed)
            trace_path = str(args.out) + ".trace.json"
            _write_text(trace_path, trace.to_json() + "\n")
            outputs.append(trace_path)
            if trace.failed:
                print(f"warning: {trace.message}", file=sys.stderr)
    except (InfeasiblePoisonError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    _write_text(args.out, poisons.to_csv())
    _finish(args, argv, outputs, args.seed)
    return EXIT_OK


# ------------------------------------------------------------------ sweep

SWEEP_FIELDS = ["method", "shift", "attack", "fraction", "trial", "seed", "source_accuracy", "target_accuracy", "diverged"]
AGG_FIELDS = ["stat", "method", "shift", "attack", "fraction", "trials", "source_accuracy", "target_accuracy"]


@dataclass(frozen=True)
class SweepResultRow:
    method: str
    shift: float
    attack: str
    fraction: float
    trial: int
    seed: int
    source_accuracy: float
    target_accuracy: float
    diverged: bool = False

    def cells(self) -> list:
        return [self.method, repr(self.shift), self.attack, repr(self.fraction), self.trial, self.seed, repr(self.source_accuracy), repr(self.target_accuracy), int(self.diverged)]


@dataclass(frozen=True)
class SweepJob:
    method: str
    shift: float
    attack: str
    fraction: float
    trial: int
    master_seed: int
    n_per_domain: int
    noise: float
    epochs: int
    alpha: float = 0.3

    @property
    def seed(self) -> int:
        return derive_seed(self.master_seed, self.method, self.shift, self.fraction, self.trial)

    @property
    def data_seed(self) -> int:
        # shared by every method and fraction of a trial, so cells compare on the same draw
        return derive_seed(self.master_seed, "data", self.shift, self.trial)


def run_sweep_job(job: SweepJob) -> SweepResultRow:
    src, tgt = gen_two_moons(MoonsConfig(job.n_per_domain, job.noise, job.shift, job.data_seed))
    if job.attack == "wrong-label":
        poisons = make_wrong_label_poison(src, tgt, WrongLabelSpec("target", job.fraction), job.seed)
    elif job.attack == "watermark":
        poisons = make_watermark_poison(src, tgt, WatermarkSpec(job.alpha, job.fraction), job.seed)
    else:
        poisons = Dataset.empty()
    cfg = TrainConfig(epochs=job.epochs)
    try:
        rep = train_uda(job.method, src.concat(poisons), tgt, cfg, seed=job.seed)
        return SweepResultRow(job.method, job.shift, job.attack, job.fraction, job.trial, job.seed, rep.final_source_accuracy, rep.final_target_accuracy)
    except TrainingDivergedError as exc:
        r = exc.report
        return SweepResultRow(job.method, job.shift, job.attack, job.fraction, job.trial, job.seed, r.final_source_accuracy, r.final_target_accuracy, True)


def worker_count() -> int:
    env = os.environ.get("UDA_LAB_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"UDA_LAB_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise UsageError("UDA_LAB_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def run_jobs(jobs: list[SweepJob], workers: int) -> list[SweepResultRow]:
    """Results come back in job order whatever the completion order."""
    if workers <= 1 or len(jobs) <= 1:
        return [run_sweep_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(run_sweep_job, jobs))


def sweep_jobs(methods, shifts, attack, fractions, trials, seed, n_per_domain=500, noise=0.1, epochs=200) -> list[SweepJob]:
    return [
        SweepJob(UdaMethod.parse(m).value, float(d), attack, float(f), t, seed, n_per_domain, noise, epochs)
        for m in methods
        for d in shifts
        for f in fractions
        for t in range(trials)
    ]


def aggregate(rows: list[SweepResultRow]) -> list[list]:
    cells: dict[tuple, list[SweepResultRow]] = {}
    for r in rows:
        cells.setdefault((r.method, r.shift, r.attack, r.fraction), []).append(r)
    out = []
    for (method, shift, attack, fraction), rs in cells.items():
        src = np.array([r.source_accuracy for r in rs])
        tgt = np.array([r.target_accuracy for r in rs])
        ddof = 1 if len(rs) > 1 else 0
        for stat, fn in (("mean", np.mean), ("sd", lambda a: np.std(a, ddof=ddof))):
            out.append([stat, method, repr(shift), attack, repr(fraction), len(rs), repr(float(fn(src))), repr(float(fn(tgt)))])
    return out


def sweep_csv(rows: list[SweepResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_FIELDS)
    for r in rows:
        w.writerow(r.cells())
    w.writerow([])
    w.writerow(AGG_FIELDS)
    w.writerows(aggregate(rows))
    return buf.getvalue()


def read_sweep_csv(text: str) -> tuple[list[dict], list[dict]]:
    """Split a sweep CSV into (per-run rows, aggregate rows)."""
    head, _, tail = text.partition("\n\n")
    return list(csv.DictReader(io.StringIO(head))), list(csv.DictReader(io.StringIO(tail)))


def cmd_moons_sweep(args, argv) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    jobs = sweep_jobs(args.methods, args.shifts, args.attack, args.fractions, args.trials, args.seed, args.n, args.noise, args.epochs)
    rows = run_jobs(jobs, worker_count())
    _write_text(args.out, sweep_csv(rows))
    _finish(args, argv, [args.out], args.seed)
    bad = sum(r.diverged for r in rows)
    if bad:
        print(f"warning: {bad} of {len(rows)} runs diverged (flagged in the CSV)", file=sys.stderr)
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    try:
        m = RunManifest.read(args.manifest)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise UsageError(f"bad manifest {args.manifest}: {exc}") from None
    return main(m.argv)


# ------------------------------------------------------------------ parser


def _csv_list(kind):
    def parse(text: str):
        try:
            return [kind(p) for p in text.split(",") if p.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uda-lab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("case", help="solve one of the three analytic case presets")
    c.add_argument("--id", type=int, choices=(1, 2, 3), required=True)
    c.add_argument("--restarts", type=int, default=5)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default="case.json")
    c.set_defaults(func=cmd_case)

    b = sub.add_parser("bounds", help="evaluate the target-error bounds for a (domain pair, model) config")
    b.add_argument("--config", required=True)
    b.add_argument("--out", default="bounds.json")
    b.set_defaults(func=cmd_bounds)

    g = sub.add_parser("gen-moons", help="write seeded source/target two-moons CSVs")
    g.add_argument("--n", type=int, default=500, help="samples per domain")
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--shift", type=float, default=0.25)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", default="moons")
    g.set_defaults(func=cmd_gen_moons)

    s = sub.add_parser("moons-sweep", help="multi-trial training sweep over methods, shifts and poison fractions")
    s.add_argument("--methods", type=_csv_list(str), default=["source", "dann", "cdan", "mcd"])
    s.add_argument("--shifts", type=_csv_list(float), default=[0.25, 0.5, 0.75])
    s.add_argument("--attack", choices=("wrong-label", "watermark", "none"), default="wrong-label")
    s.add_argument("--fractions", type=_csv_list(float), default=[0.0, 0.05, 0.10])
    s.add_argument("--trials", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=500, help="samples per domain")
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--out", default="sweep.csv")
    s.set_defaults(func=cmd_moons_sweep)

    po = sub.add_parser("poison", help="generate a poison CSV")
    po_sub = po.add_subparsers(dest="attack", required=True)
    for name in ("wrong-label", "watermark", "clean-label"):
        a = po_sub.add_parser(name)
        a.add_argument("--source", required=True)
        a.add_argument("--target", required=True)
        a.add_argument("--seed", type=int, default=0)
        a.add_argument("--epochs", type=int, default=200, help="victim/reference training epochs")
        a.add_argument("--out", default=f"{name}.csv")
        if name != "clean-label":
            a.add_argument("--fraction", type=float, default=0.10)
            a.add_argument("--scheme", choices=[s.value for s in LabelScheme], default=LabelScheme.NEXT_CLASS.value)
        if name == "wrong-label":
            a.add_argument("--from", dest="sample_from", choices=("source", "target"), default="target")
        if name == "watermark":
            a.add_argument("--alpha", type=float, default=0.3)
        if name == "clean-label":
            a.add_argument("--eps", type=float, default=0.1)
            a.add_argument("--norm", choices=("l_inf", "l2"), default="l_inf")
            a.add_argument("--n-poison", type=int, default=5)
            a.add_argument("--base-from", choices=("source", "target"), default="target")
            a.add_argument("--test-index", type=int, default=0)
            a.add_argument("--outer-iters", type=int, default=200)
            a.add_argument("--attacker-step", type=float, default=0.05)
            a.add_argument("--method", choices=[m.value for m in UdaMethod], default="dann")
        a.set_defaults(func=cmd_poison)

    r = sub.add_parser("replay", help="re-run a command from its manifest")
    r.add_argument("manifest")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
