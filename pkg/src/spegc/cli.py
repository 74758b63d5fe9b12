"""Command-line entry point: pretrain, adapt, solve, gradcheck, oracle.

Exit codes: 0 success, 1 failed check, 2 bad input, 3 artifact mismatch.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import dgcs
from . import tape as T
from .adapt import AdaptConfig, run_stream
from .backbone import (BackboneConfig, CheckpointError, PretrainConfig, load_checkpoint,
                       pretrain_source, save_checkpoint)
from .checks import GradcheckConfig, oracle_table, run_gradcheck
from .numerics import NonFiniteError
from .stream import DEFAULT_TARGETS, DomainSpec, generate_stream

log = logging.getLogger("spegc")

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_ARTIFACT = 0, 1, 2, 3


class InputError(ValueError):
    """Bad user input; maps to exit code 2."""


# configuration ---------------------------------------------------------------------

@dataclass
class StreamConfig:
    seed: int = 0
    steps_per_domain: int = 100
    domains: list = field(default_factory=lambda: [d.domain_id for d in DEFAULT_TARGETS])
    shuffle: bool = False
    size: int = 48

    def domain_specs(self) -> list[DomainSpec]:
        known = {d.domain_id: d for d in DEFAULT_TARGETS}
        specs = []
        for entry in self.domains:
            if isinstance(entry, str):
                if entry not in known:
                    raise InputError(f"unknown domain {entry!r}; known: {sorted(known)}")
                specs.append(known[entry])
            elif isinstance(entry, dict):
                _reject_unknown(entry, {f.name for f in fields(DomainSpec)}, "stream.domains[]")
                try:
                    specs.append(DomainSpec(**entry))
                except (TypeError, ValueError) as exc:
                    raise InputError(f"bad domain spec {entry}: {exc}") from exc
            else:
                raise InputError(f"domain entries must be names or objects, got {entry!r}")
        return specs


@dataclass
class RunConfig:
    """Everything a command needs; adaptation fields sit at the top level."""

    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def to_dict(self) -> dict:
        out = self.adapt.to_dict()
        out["stream"] = asdict(self.stream)
        out["pretrain"] = asdict(self.pretrain)
        return out


def _reject_unknown(doc: dict, allowed: set[str], where: str) -> None:
    extra = sorted(set(doc) - allowed)
    if extra:
        raise InputError(f"unknown key(s) in {where}: {', '.join(extra)}")


def _build(cls, doc: dict, where: str, nested: dict | None = None):
    if not isinstance(doc, dict):
        raise InputError(f"{where} must be a JSON object")
    nested = nested or {}
    _reject_unknown(doc, {f.name for f in fields(cls)}, where)
    kwargs = {k: (nested[k](v) if k in nested else v) for k, v in doc.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid {where}: {exc}") from exc


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise InputError(f"{source}: top level must be a JSON object")
    adapt_keys = AdaptConfig.field_names()
    _reject_unknown(doc, adapt_keys | {"stream", "pretrain"}, source)
    adapt = _build(AdaptConfig, {k: v for k, v in doc.items() if k in adapt_keys}, "config")
    stream = _build(StreamConfig, doc.get("stream", {}), "stream")
    stream.domain_specs()
    pretrain = _build(PretrainConfig, doc.get("pretrain", {}), "pretrain",
                      {"backbone": lambda b: _build(BackboneConfig, b, "pretrain.backbone")})
    return RunConfig(adapt, stream, pretrain)


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    return parse_run_config(text, path)


def _with_overrides(cfg: RunConfig, **adapt_overrides) -> RunConfig:
    changes = {k: v for k, v in adapt_overrides.items() if v is not None}
    if not changes:
        return cfg
    try:
        adapt = AdaptConfig(**{**cfg.adapt.to_dict(), **changes})
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    return RunConfig(adapt, cfg.stream, cfg.pretrain)


# output helpers --------------------------------------------------------------------

def _clean(x: Any) -> Any:
    """Non-finite floats become null so every artifact is strict JSON."""
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return _clean(x.item())
    return x


def dumps(obj: Any, indent: int | None = None) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=indent, allow_nan=False)


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from exc


def read_matrix_csv(path: str | Path) -> np.ndarray:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    try:
        data = [[float(v) for v in r] for r in rows]
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric entry ({exc})") from exc
    if not data or any(len(r) != len(data) for r in data):
        raise InputError(f"{path}: affinity must be a non-empty square matrix")
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{path}: entries must be finite")
    return arr


def format_matrix_csv(m: np.ndarray) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in np.asarray(m))


def _file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# commands --------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config)
    pre = cfg.pretrain
    if args.epochs is not None:
        pre = PretrainConfig(**{**asdict(pre), "epochs": args.epochs, "backbone": pre.backbone})
    if args.seed is not None:
        pre = PretrainConfig(**{**asdict(pre), "seed": args.seed, "backbone": pre.backbone})
    if pre.epochs < 0:
        raise InputError("epochs must be >= 0")
    cfg = RunConfig(cfg.adapt, cfg.stream, pre)
    result = pretrain_source(pre)
    out = Path(args.out)
    meta = {"seed": pre.seed, "initial_loss": result.initial_loss, "final_loss": result.final_loss,
            "source_dice": result.source_dice}
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out, result.model, _clean(cfg.to_dict()), {"training": _clean(meta)})
    except OSError as exc:
        raise InputError(f"cannot write {out}: {exc}") from exc
    log_path = Path(args.log) if args.log else out.with_suffix(".train.jsonl")
    lines = [dumps({"kind": "header", "config": cfg.to_dict(), "seed": pre.seed})]
    lines += [dumps({"kind": "epoch", "epoch": i, "loss": v})
              for i, v in enumerate(result.loss_history)]
    _write(log_path, "\n".join(lines) + "\n")
    print(f"pretrained {pre.epochs} epochs: loss {result.initial_loss:.4f} -> "
          f"{result.final_loss:.4f}; source DSC {result.source_dice}")
    print(f"checkpoint -> {out}; log -> {log_path}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = load_run_config(args.config)
    cfg = _with_overrides(cfg, rounds=args.rounds, seed=args.seed)
    stream_changes = {"shuffle": True} if args.shuffle else {}
    if args.seed is not None:
        stream_changes["seed"] = args.seed
    if stream_changes:
        cfg = RunConfig(cfg.adapt, StreamConfig(**{**asdict(cfg.stream), **stream_changes}), cfg.pretrain)
    try:
        model, payload = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise InputError(f"checkpoint not found: {args.checkpoint}") from exc
    s = cfg.stream
    stream = generate_stream(s.seed, s.domain_specs(), s.steps_per_domain, shuffle=s.shuffle, size=s.size)
    result = run_stream(model, stream, cfg.adapt)
    out = Path(args.out)
    header = {"kind": "header", "config": cfg.to_dict(), "seed": cfg.adapt.seed,
              "checkpoint_sha256": _file_digest(args.checkpoint), "n_samples": len(stream)}
    lines = [dumps(header)] + [dumps({"kind": "step", **r.to_dict()}) for r in result.reports]
    _write(out / "steps.jsonl", "\n".join(lines) + "\n")
    summary = {**result.summary, "config": cfg.to_dict(),
               "checkpoint_sha256": header["checkpoint_sha256"]}
    _write(out / "summary.json", dumps(summary, indent=2) + "\n")
    adapter = {k: v.data.tolist() for k, v in sorted(result.state.adapter.params().items())}
    save_checkpoint(out / "adapted_checkpoint.json", result.state.model, _clean(cfg.to_dict()),
                    {"adapter": adapter, "seed": cfg.adapt.seed})
    print(f"{summary['n_steps']} steps ({summary['aborted_steps']} rolled back); "
          f"adapted DSC {summary['adapted_dsc_mean']:.4f} vs no-adapt {summary['no_adapt_dsc_mean']:.4f}")
    print(f"outputs -> {out}")
    return EXIT_OK


def cmd_solve(args) -> int:
    S_prime = read_matrix_csv(args.affinity)
    if args.z < 0:
        raise InputError("--z must be >= 0")
    if args.theta <= 0:
        raise InputError("--theta must be > 0")
    n = S_prime.shape[0]
    if n * n < 2:
        raise InputError("need at least two candidate edges")
    S_star, plan, clamped = dgcs.refine_affinity(
        T.Value(S_prime), args.z, theta=args.theta, cost_mode=args.cost_mode,
        max_iter=args.max_iter, tol=args.tol, normalize=args.normalize)
    out = Path(args.out)
    _write(out, format_matrix_csv(S_star.data))
    diag = {
        "config": {"affinity": str(args.affinity), "z": args.z, "theta": args.theta,
                   "cost_mode": args.cost_mode, "max_iter": args.max_iter, "tol": args.tol,
                   "normalize": args.normalize},
        "V": n, "E": n * n, "k": plan.k, "k_clamped": clamped,
        "iterations": plan.iterations, "residual": plan.residual, "converged": plan.converged,
        "select_sum": float(plan.select_numpy().sum()),
    }
    diag_path = Path(args.diagnostics) if args.diagnostics else out.with_suffix(".json")
    _write(diag_path, dumps(diag, indent=2) + "\n")
    print(f"V={n} k={plan.k}{' (clamped)' if clamped else ''} iterations={plan.iterations} "
          f"residual={plan.residual:.3e}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.size % args.blocks:
        raise InputError(f"--size {args.size} must be a multiple of --blocks {args.blocks}")
    cfg = GradcheckConfig(nodes_per_block=args.size // args.blocks, blocks=args.blocks,
                          iters=args.iters, seed=args.seed)
    try:
        report = run_gradcheck(cfg)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    print(report.table())
    print(f"loss {report.loss:.6f}; {report.sinkhorn_iterations} unrolled iterations; "
          f"{report.seconds:.1f}s")
    if args.out:
        _write(Path(args.out), dumps({k: v for k, v in report.to_dict().items() if k != "seconds"},
                                     indent=2) + "\n")
    if not report.passed:
        print(f"gradient check FAILED for: {', '.join(report.failing())}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def _parse_thetas(text: str) -> list[float]:
    try:
        values = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise InputError(f"bad --theta-sweep {text!r}") from exc
    if not values or any(not (v > 0 and math.isfinite(v)) for v in values):
        raise InputError("--theta-sweep needs positive finite values")
    return values


def cmd_oracle(args) -> int:
    thetas = _parse_thetas(args.theta_sweep)
    try:
        rows = oracle_table(args.e, args.k, thetas, args.cost_mode, args.seed, args.max_iter)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    print(f"{'theta':>10} {'agreement':>9} {'gap_oracle':>10} {'gap_uniform':>11} {'iters':>6} {'residual':>10}")
    for r in rows:
        print(f"{r.theta:>10.3g} {r.agreement:>9.3f} {r.gap_to_oracle:>10.3e} "
              f"{r.gap_to_uniform:>11.3e} {r.iterations:>6d} {r.residual:>10.2e}")
    if args.out:
        doc = {"config": {"e": args.e, "k": args.k, "thetas": thetas, "cost_mode": args.cost_mode,
                          "max_iter": args.max_iter},
               "seed": args.seed, "rows": [asdict(r) for r in rows]}
        _write(Path(args.out), dumps(doc, indent=2) + "\n")
    return EXIT_OK


# argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spegc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the backbone on clean source images")
    p.add_argument("--config", help="RunConfig JSON (defaults if omitted)")
    p.add_argument("--out", required=True, help="checkpoint path (.json)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--log", help="training log JSONL (default: <out>.train.jsonl)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="adapt a checkpoint over a synthetic target stream")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--rounds", type=int)
    p.add_argument("--seed", type=int, help="seed for both the stream and adaptation")
    p.add_argument("--shuffle", action="store_true", help="mix samples from all domains")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("solve", help="sparsify an affinity matrix with the OT solver")
    p.add_argument("--affinity", required=True, help="square headerless CSV")
    p.add_argument("--z", type=int, required=True, help="number of clusters (k = V - z)")
    p.add_argument("--theta", type=float, default=0.05)
    p.add_argument("--cost-mode", choices=dgcs.COST_MODES, default="squared")
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--normalize", action="store_true", help="rescale affinities to [0, 1] first")
    p.add_argument("--out", required=True, help="output CSV for S*")
    p.add_argument("--diagnostics", help="diagnostics JSON (default: <out>.json)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("gradcheck", help="compare backward() with finite differences")
    p.add_argument("--size", type=int, default=12, help="total node count V (<= 16)")
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--seed", type=int, default=GradcheckConfig.seed)
    p.add_argument("--out", help="write the report as JSON")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle", help="Sinkhorn versus the hard top-k oracle across theta")
    p.add_argument("--e", type=int, default=1000)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--theta-sweep", default="0.001,0.01,0.05,0.5,1000")
    p.add_argument("--cost-mode", choices=dgcs.COST_MODES, default="squared")
    p.add_argument("--max-iter", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the table as JSON")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
