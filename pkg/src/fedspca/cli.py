"""Command-line entry point: ``fedspca {gen,run,metrics,master,worker}``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 transport
failure, 1 anything else raised by the package.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .admm import ALGORITHMS, TRACE_COLUMNS
from .core import DataShard, HyperParams, center_federated, read_matrix_csv, write_matrix_csv
from .datagen import (
    WDBC_COLS,
    SyntheticSpec,
    augment_wdbc,
    gen_synthetic_iid,
    gen_synthetic_noniid,
    load_wdbc_base,
)
from .errors import FedSpcaError, NumericalError, TransportError, ValidationError
from .federation import SessionConfig, connect, run_session, worker_loop
from .metrics import (
    MetricsReport,
    l0_count,
    mean_abs_cosine,
    reconstruction_error,
    reconstruction_norm,
    recovery_error,
    small_value_profile,
)

log = logging.getLogger("fedspca")

CONFIG_FILE = "fedspca.conf"
DEFAULT_OUT = "out"

# run options that may come from the config file: name -> parser
RUN_KEYS = {
    "lambda": float, "lambda1": float, "lambda2": float, "rho": float, "mu": float,
    "r": int, "c1": float, "c2": float, "max_rounds": int, "max_linesearch_steps": int,
    "tol_primal": float, "tol_dual": float, "tol_inner": float, "max_inner_iters": int,
    "initial_step": float, "seed": int, "deflate": int, "transport": str, "bind": str,
    "threads": int, "timeout": float, "manifest": str, "out_dir": str, "k": int,
}
PARAM_KEYS = {
    "lambda": "lam", "lambda1": "lambda1", "lambda2": "lambda2", "rho": "rho", "mu": "mu",
    "r": "r", "c1": "c1", "c2": "c2", "max_rounds": "max_rounds",
    "max_linesearch_steps": "max_linesearch_steps", "tol_primal": "tol_primal",
    "tol_dual": "tol_dual", "tol_inner": "tol_inner", "max_inner_iters": "max_inner_iters",
    "initial_step": "initial_step", "seed": "seed",
}
SWEEPABLE = ("lambda", "lambda1", "lambda2", "rho", "mu")


# --------------------------------------------------------------------------- config


def read_config(path) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment. Unknown keys are an error."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        if key not in RUN_KEYS:
            raise ValidationError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = RUN_KEYS[key](value.strip())
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: bad value for {key}: {value.strip()!r}") from exc
    return out


@dataclass
class RunConfig:
    """Resolved run options: command line over config file over defaults."""

    algorithm: str
    values: dict = field(default_factory=dict)

    def get(self, key, default=None):
        return self.values.get(key, default)

    def params(self) -> HyperParams:
        kwargs = {PARAM_KEYS[k]: v for k, v in self.values.items() if k in PARAM_KEYS and v is not None}
        return HyperParams(**kwargs)

    @classmethod
    def resolve(cls, args) -> "RunConfig":
        conf_path = args.config
        if conf_path is None and Path(CONFIG_FILE).is_file():
            conf_path = CONFIG_FILE
        values = read_config(conf_path) if conf_path else {}
        for key in RUN_KEYS:
            v = getattr(args, key, None)
            if v is not None:
                values[key] = v
        return cls(args.algorithm, values)


def parse_sweep(text: str) -> tuple[str, list[float]]:
    """``name=a:b:step`` -> (name, [a, a + step, ..., <= b])."""
    name, sep, spec = text.partition("=")
    name = name.strip()
    if not sep or name not in SWEEPABLE:
        raise ValidationError(f"sweep must look like NAME=a:b:step with NAME in {SWEEPABLE}")
    try:
        a, b, step = (float(x) for x in spec.split(":"))
    except ValueError as exc:
        raise ValidationError(f"bad sweep range {spec!r}") from exc
    if not step > 0 or b < a:
        raise ValidationError("sweep needs step > 0 and a <= b")
    count = int(np.floor((b - a) / step + 1e-9)) + 1
    return name, [round(a + i * step, 12) for i in range(count)]


# --------------------------------------------------------------------------- manifests


def _out_dir(args) -> Path:
    out = Path(getattr(args, "out_dir", None) or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, kind: str, shards, spec: dict, v_sol=None, original_count=None) -> Path:
    names = []
    for s in shards:
        name = f"shard_{s.worker_id}.csv"
        write_matrix_csv(out / name, s.values)
        names.append(name)
    v_name = None
    if v_sol is not None:
        v_name = "v_sol.csv"
        write_matrix_csv(out / v_name, v_sol)
    manifest = {
        "kind": kind,
        "d": shards[0].cols,
        "K": len(shards),
        "seed": spec.get("seed"),
        "spec": spec,
        "shards": names,
        "rows": [s.rows for s in shards],
        "v_sol": v_name,
        "original_count": original_count,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_manifest(path):
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"manifest not found: {path}")
    manifest = json.loads(path.read_text())
    base = path.parent
    shards = [DataShard(read_matrix_csv(base / name), worker_id=i) for i, name in enumerate(manifest["shards"])]
    v_sol = read_matrix_csv(base / manifest["v_sol"]) if manifest.get("v_sol") else None
    return manifest, shards, v_sol


# --------------------------------------------------------------------------- gen


def cmd_gen(args) -> int:
    out = _out_dir(args)
    if args.source == "synth":
        spec = SyntheticSpec(d=args.d, n=args.n, K=args.k, iid=not args.noniid, seed=args.seed,
                             unit_eigvecs=not args.raw_eigvecs)
        shards = gen_synthetic_iid(spec) if spec.iid else gen_synthetic_noniid(spec)
        path = write_manifest(out, "synth", shards, spec.to_dict(), v_sol=spec.v_sol)
    else:
        if args.input:
            drop = [int(c) for c in args.drop_cols.split(",") if c.strip()] if args.drop_cols else []
            base = read_matrix_csv(args.input, header=args.header, drop_cols=drop)
        else:
            base = load_wdbc_base()
        shards = augment_wdbc(base, args.mode, K=args.k, seed=args.seed, added=args.added)
        spec = {"mode": args.mode, "K": args.k, "seed": args.seed, "added": args.added,
                "input": args.input, "drop_cols": args.drop_cols}
        path = write_manifest(out, "wdbc", shards, spec, original_count=WDBC_COLS)
    print(path)
    return 0


# --------------------------------------------------------------------------- run


def _metrics(shards, z, v_sol, original_count, cosine) -> MetricsReport:
    rep = MetricsReport(l0_count=l0_count(z), mean_abs_cosine=cosine)
    if shards is not None:
        centered, _ = center_federated(shards)
        rep.reconstruction_error = reconstruction_error(centered, z)
        rep.reconstruction_norm = reconstruction_norm(centered, z)
    if v_sol is not None and v_sol.shape[0] == z.shape[0]:
        rep.recovery_error = recovery_error(z, v_sol)
    if original_count:
        rep.small_value_percentages = small_value_profile(z, original_count)
    return rep


def _session_config(rc: RunConfig, K: int, transport: str, trace) -> SessionConfig:
    return SessionConfig(
        algorithm=rc.algorithm,
        K=K,
        params=rc.params(),
        transport=transport,
        address=rc.get("bind"),
        deflate=rc.get("deflate"),
        trace=trace,
        threads=rc.get("threads"),
        timeout=rc.get("timeout", 120.0),
    )


def _write_trace(path: Path, records) -> None:
    import csv

    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for rec in records:
            w.writerow([rec.round, repr(rec.objective), repr(rec.primal_residual),
                        repr(rec.dual_residual), repr(rec.mean_abs_cosine), rec.bytes_sent])


def _run_once(rc: RunConfig, out: Path, shards, v_sol, manifest, transport) -> dict:
    K = len(shards) if shards is not None else rc.get("k")
    cfg = _session_config(rc, K, transport, None)
    loadings, report = run_session(cfg, shards)
    z = loadings.values
    write_matrix_csv(out / "loadings.csv", z)
    _write_trace(out / "trace.csv", report.trace)
    metrics = _metrics(shards, z, v_sol, (manifest or {}).get("original_count"), report.final_cosine)
    body = report.to_dict()
    trace = body.pop("trace")
    body["metrics"] = metrics.to_dict()
    body["run"] = {"algorithm": rc.algorithm, "options": rc.values, "version": __version__}
    body["trace_rows"] = len(trace)
    (out / "report.json").write_text(json.dumps(body, indent=2, default=_json_default))
    return body


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def _summary(body: dict) -> str:
    m = body["metrics"]
    parts = [f"rounds={body['rounds']}", f"converged={body['converged']}"]
    for key in ("mean_abs_cosine", "recovery_error", "reconstruction_error", "l0_count"):
        if m.get(key) is not None:
            parts.append(f"{key}={m[key]:.6g}" if isinstance(m[key], float) else f"{key}={m[key]}")
    return " ".join(parts)


def cmd_run(args, transport_default: str = "in_process") -> int:
    if args.replay:
        prev = json.loads(Path(args.replay).read_text())["run"]
        args.algorithm = prev["algorithm"]
        rc = RunConfig(prev["algorithm"], dict(prev["options"]))
        for key in RUN_KEYS:
            v = getattr(args, key, None)
            if v is not None:
                rc.values[key] = v
    else:
        rc = RunConfig.resolve(args)
    out = Path(rc.get("out_dir") or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    transport = rc.get("transport") or transport_default
    shards = v_sol = manifest = None
    if rc.get("manifest"):
        manifest, shards, v_sol = load_manifest(rc.get("manifest"))
        if rc.get("k") is not None and rc.get("k") != len(shards):
            raise ValidationError(f"--k {rc.get('k')} but the manifest has {len(shards)} shards")
    elif transport != "tcp" or getattr(args, "local_workers", True):
        raise ValidationError("--manifest is required")
    elif rc.get("k") is None:
        raise ValidationError("--k is required when hosting external workers")
    rc.params()  # validate before any work starts

    if args.sweep:
        name, grid = parse_sweep(args.sweep)
        rows = []
        for value in grid:
            sub = RunConfig(rc.algorithm, {**rc.values, name: value})
            sub_out = out / f"sweep_{name}_{value:g}"
            sub_out.mkdir(parents=True, exist_ok=True)
            body = _run_once(sub, sub_out, shards, v_sol, manifest, transport)
            rows.append({name: value, "dir": sub_out.name, "rounds": body["rounds"],
                         "converged": body["converged"], **body["metrics"]})
            print(f"{name}={value:g} {_summary(body)}")
        (out / "sweep.json").write_text(json.dumps(rows, indent=2, default=_json_default))
        return 0
    body = _run_once(rc, out, shards, v_sol, manifest, transport)
    print(_summary(body))
    return 0


def cmd_master(args) -> int:
    args.transport = "tcp"
    if not args.manifest:
        args.local_workers = False
        return _host_external(args)
    return cmd_run(args, transport_default="tcp")


def _host_external(args) -> int:
    rc = RunConfig.resolve(args)
    if rc.get("k") is None:
        raise ValidationError("--k is required when hosting external workers")
    out = Path(rc.get("out_dir") or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _session_config(rc, rc.get("k"), "tcp", None)
    loadings, report = run_session(cfg, None)
    write_matrix_csv(out / "loadings.csv", loadings.values)
    _write_trace(out / "trace.csv", report.trace)
    body = report.to_dict()
    body.pop("trace")
    body["metrics"] = _metrics(None, loadings.values, None, None, report.final_cosine).to_dict()
    body["run"] = {"algorithm": rc.algorithm, "options": rc.values, "version": __version__}
    (out / "report.json").write_text(json.dumps(body, indent=2, default=_json_default))
    print(_summary(body))
    return 0


def cmd_worker(args) -> int:
    shard = read_matrix_csv(args.shard)
    channel = connect(args.connect, args.timeout)
    updates = worker_loop(channel, DataShard(shard, worker_id=args.worker_id))
    print(f"worker {args.worker_id}: {updates} local updates")
    return 0


# --------------------------------------------------------------------------- metrics


def cmd_metrics(args) -> int:
    z = read_matrix_csv(args.loadings)
    rep = MetricsReport()
    if args.reference:
        rep.recovery_error = recovery_error(z, read_matrix_csv(args.reference))
    if args.manifest:
        manifest, shards, v_sol = load_manifest(args.manifest)
        centered, _ = center_federated(shards)
        rep.reconstruction_error = reconstruction_error(centered, z)
        rep.reconstruction_norm = reconstruction_norm(centered, z)
        if rep.recovery_error is None and v_sol is not None:
            rep.recovery_error = recovery_error(z, v_sol)
        if args.original_count is None and manifest.get("original_count"):
            args.original_count = manifest["original_count"]
    if args.l0 or not (args.reference or args.manifest or args.profile):
        rep.l0_count = l0_count(z, args.tol)
    if args.profile or args.original_count is not None:
        rep.small_value_percentages = small_value_profile(z, args.original_count or 0)
    if args.workers:
        rep.mean_abs_cosine = mean_abs_cosine([read_matrix_csv(p) for p in args.workers])
    text = json.dumps(rep.to_dict(), indent=2, default=_json_default)
    if args.out_dir:
        out = _out_dir(args)
        (out / "metrics.json").write_text(text)
    print(text)
    return 0


# --------------------------------------------------------------------------- parser


def _add_run_options(p):
    g = p.add_argument_group("hyper-parameters")
    g.add_argument("--lambda", dest="lambda", type=float, help="l1 weight (faspca)")
    g.add_argument("--lambda1", type=float, help="smoothing weight (fsspca)")
    g.add_argument("--lambda2", type=float, help="consensus l1 weight (fsspca)")
    g.add_argument("--rho", type=float)
    g.add_argument("--mu", type=float)
    g.add_argument("--r", type=int, help="number of loadings")
    g.add_argument("--c1", type=float)
    g.add_argument("--c2", type=float)
    g.add_argument("--max-rounds", dest="max_rounds", type=int)
    g.add_argument("--max-linesearch-steps", dest="max_linesearch_steps", type=int)
    g.add_argument("--tol-primal", dest="tol_primal", type=float)
    g.add_argument("--tol-dual", dest="tol_dual", type=float)
    g.add_argument("--tol-inner", dest="tol_inner", type=float)
    g.add_argument("--max-inner-iters", dest="max_inner_iters", type=int)
    g.add_argument("--initial-step", dest="initial_step", type=float)
    g.add_argument("--seed", type=int)
    p.add_argument("--deflate", type=int, help="extract this many loadings one at a time")
    p.add_argument("--manifest")
    p.add_argument("--k", type=int, help="expected number of workers")
    p.add_argument("--transport", choices=("in_process", "tcp"))
    p.add_argument("--bind", help="master listen address host:port (FEDSPCA_BIND wins)")
    p.add_argument("--threads", type=int, help="concurrent local solves (in-process)")
    p.add_argument("--timeout", type=float, help="seconds to wait for any single message")
    p.add_argument("--config", help=f"key = value file (default ./{CONFIG_FILE} if present)")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--sweep", help="NAME=a:b:step, one run per value")
    p.add_argument("--replay", help="re-run with the options recorded in a report.json")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedspca", description="Federated sparse PCA.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write shard CSVs and a manifest")
    gen.add_argument("source", choices=("synth", "wdbc"))
    mode = gen.add_mutually_exclusive_group()
    mode.add_argument("--iid", action="store_true", help="(synth) identical worker distributions")
    mode.add_argument("--noniid", action="store_true", help="(synth) per-worker covariance tails")
    gen.add_argument("--raw-eigvecs", dest="raw_eigvecs", action="store_true",
                     help="(synth, non-IID) keep the tail eigenvector columns unnormalised")
    gen.add_argument("--k", type=int, default=1)
    gen.add_argument("--d", type=int, default=500)
    gen.add_argument("--n", type=int, default=1000)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--input", help="(wdbc) CSV with the raw dataset; default: scikit-learn copy")
    gen.add_argument("--drop-cols", dest="drop_cols", default="0,1",
                     help="(wdbc) comma-separated column indices to drop from --input")
    gen.add_argument("--header", action="store_true", help="(wdbc) --input has a header row")
    gen.add_argument("--mode", choices=("iid", "noniid"), default="iid")
    gen.add_argument("--added", type=int, default=800)
    gen.add_argument("--out-dir", dest="out_dir")
    gen.set_defaults(func=cmd_gen)

    run = sub.add_parser("run", help="run a session and write loadings, trace and report")
    run.add_argument("algorithm", choices=ALGORITHMS, nargs="?")
    _add_run_options(run)
    run.set_defaults(func=cmd_run)

    master = sub.add_parser("master", help="host a tcp session")
    master.add_argument("algorithm", choices=ALGORITHMS)
    _add_run_options(master)
    master.set_defaults(func=cmd_master)

    worker = sub.add_parser("worker", help="join a tcp session with one shard")
    worker.add_argument("--connect", required=True, help="master address host:port")
    worker.add_argument("--shard", required=True)
    worker.add_argument("--worker-id", dest="worker_id", type=int, default=0)
    worker.add_argument("--timeout", type=float, default=None)
    worker.set_defaults(func=cmd_worker)

    met = sub.add_parser("metrics", help="evaluate saved loadings")
    met.add_argument("--loadings", required=True)
    met.add_argument("--reference", help="ground-truth loadings CSV for the recovery error")
    met.add_argument("--manifest", help="shards for the reconstruction error")
    met.add_argument("--l0", action="store_true")
    met.add_argument("--tol", type=float, default=1e-6)
    met.add_argument("--profile", action="store_true", help="small-value percentages, decades 1..10")
    met.add_argument("--original-count", dest="original_count", type=int)
    met.add_argument("--workers", nargs="+", help="per-worker loading CSVs for cosine similarity")
    met.add_argument("--out-dir", dest="out_dir")
    met.set_defaults(func=cmd_metrics)
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ValidationError, OSError, json.JSONDecodeError)):
        return 2
    if isinstance(exc, NumericalError):
        return 3
    if isinstance(exc, TransportError):
        return 4
    return getattr(exc, "exit_code", 1)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run" and args.algorithm is None and not args.replay:
        parser.error("run needs an algorithm (or --replay)")
    try:
        return args.func(args)
    except (FedSpcaError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
