"""Command-line entry point: ``hamlearn generate|train|evaluate|sweep``.

Settings come from built-in defaults, then an optional ``--config`` JSON
document, then command-line flags. Exit codes: 0 success, 2 configuration
error, 3 integration failure, 4 training divergence, 5 every sweep run failed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load, resolve, variant_for
from .evaluation import AGG_STATS, RESULT_FIELDS, SweepGrid, aggregate, evaluate, run_sweep
from .files import read_dataset, write_dataset, write_loss_history, write_table
from .geometry import manifold_violation
from .integrators import IntegrationError
from .models import ModelFormatError, init_model, read_model_document, serialize_model
from .systems import get_system
from .training import TrainConfig, TrainingDivergence, add_noise, generate_dataset, train

EXIT_OK, EXIT_CONFIG, EXIT_INTEGRATION, EXIT_DIVERGENCE, EXIT_SWEEP = 0, 2, 3, 4, 5
OUTDIR_ENV = "HAMLEARN_OUTDIR"

log = logging.getLogger("hamlearn")


def _outdir(cfg) -> Path:
    return Path(cfg["output"]["dir"] or os.environ.get(OUTDIR_ENV) or ".")


def _csv_list(text, cast):
    return [cast(x) for x in text.split(",") if x.strip()] if text else []


def _set(doc, path, value):
    if value is None:
        return
    *parents, leaf = path.split(".")
    for key in parents:
        doc = doc.setdefault(key, {})
    doc[leaf] = value


def _base_doc(args) -> tuple[dict, str | None]:
    doc = load(args.config) if getattr(args, "config", None) else {}
    _set(doc, "seeds.master", getattr(args, "seed", None))
    _set(doc, "output.dir", getattr(args, "outdir", None))
    explicit = None
    if getattr(args, "dt", None) is not None:
        doc["dt"], explicit = args.dt, "dt"
    if getattr(args, "t_final", None) is not None:
        doc["t_final"], explicit = args.t_final, "t_final"
    return doc, explicit


def _train_flags(doc, args):
    _set(doc, "train.integrator", args.integrator)
    _set(doc, "train.epochs", args.epochs)
    _set(doc, "train.batch_size", args.batch_size)
    _set(doc, "train.lr", args.lr)
    _set(doc, "train.mu", getattr(args, "mu", None))
    _set(doc, "train.first_integral", getattr(args, "first_integral", None))
    if args.hidden is not None:
        _set(doc, "model.hidden", _csv_list(args.hidden, int))


# commands ----------------------------------------------------------------------

def cmd_generate(args) -> int:
    doc, explicit = _base_doc(args)
    _set(doc, "system", args.system)
    _set(doc, "N", args.n)
    _set(doc, "M", args.m)
    _set(doc, "eps", args.eps)
    if args.reproject:
        doc["reproject"] = True
    cfg = resolve(doc, explicit, check_batch=False)
    system = get_system(cfg["system"])
    seeds = cfg["seeds"]
    ds = generate_dataset(system, cfg["N"], cfg["M"], cfg["dt"], cfg["rtol"], cfg["atol"],
                          seed=seeds["data"], system_id=cfg["system"])
    ds = add_noise(ds, cfg["eps"], seeds["noise"], reproject=cfg["reproject"])
    out = Path(args.out) if args.out else _outdir(cfg) / "dataset.csv"
    write_dataset(out, ds, cfg)
    msg = f"wrote {out}: N={ds.N} M={ds.M} dt={ds.dt:.6g} ({ds.N * ds.M} rows)"
    if system.manifold == "sphere":
        msg += f", max constraint violation {manifold_violation(ds.q, ds.p):.3e}"
    print(msg)
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        ds = read_dataset(args.data)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read dataset {args.data}: {exc}") from None
    prov = ds.provenance
    doc, _ = _base_doc(args)
    for key in ("system", "N", "M", "dt", "eps"):
        if key in doc and doc[key] != prov.get(key):
            raise ConfigError(f"config {key}={doc[key]!r} disagrees with the dataset ({prov.get(key)!r})")
        doc[key] = prov[key]
    doc.pop("t_final", None)
    _train_flags(doc, args)
    cfg = resolve(doc, "dt")
    system = get_system(cfg["system"])
    variant = variant_for(system)
    size = system.k if variant == "chain" else system.n
    seeds, tr = cfg["seeds"], cfg["train"]
    params = init_model(variant, size, tuple(cfg["model"]["hidden"]), seed=seeds["init"],
                        ridge=cfg["model"]["ridge"])
    tcfg = TrainConfig(integrator=tr["integrator"], epochs=tr["epochs"], batch_size=tr["batch_size"],
                       lr=tr["lr"], beta1=tr["beta1"], beta2=tr["beta2"], eps_adam=tr["eps_adam"],
                       mu=tr["mu"], first_integral=tr["first_integral"],
                       reg_indices=tuple(tr["reg_indices"]) if tr["reg_indices"] else None,
                       seed=seeds["shuffle"])
    probe = variant == "chain"

    def report(epoch, loss, _):
        if args.verbose:
            print(f"epoch {epoch + 1}/{tcfg.epochs} loss {loss:.6e}")

    result = train(ds, tcfg, params, probe=probe, callback=report)
    out = Path(args.out) if args.out else _outdir(cfg) / "model.json"
    meta = {"config": cfg, "dataset": prov, "final_loss": result.final_loss, "version": __version__}
    if probe:
        meta["stage_violation"] = result.stage_violation
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(serialize_model(result.params, meta))
    loss_csv = Path(args.loss_csv) if args.loss_csv else out.with_name(out.stem + "_loss.csv")
    write_loss_history(loss_csv, result.history, cfg)
    print(f"wrote {out} and {loss_csv}; final loss {result.final_loss:.6e}")
    if probe:
        print(f"max constraint violation at stage points {result.stage_violation:.3e}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        params, meta = read_model_document(Path(args.model).read_bytes())
    except (OSError, ModelFormatError) as exc:
        raise ConfigError(f"cannot read model {args.model}: {exc}") from None
    doc = dict(meta.get("config", {}))
    doc.pop("t_final", None)
    if args.config:
        extra = load(args.config)
        doc.update({k: v for k, v in extra.items() if k != "eval"})
        if "eval" in extra:
            doc.setdefault("eval", {}).update(extra["eval"])
    _set(doc, "system", args.system)
    _set(doc, "output.dir", args.outdir)
    _set(doc, "eval.n_test", args.n_test)
    _set(doc, "eval.m_test", args.m_test)
    _set(doc, "eval.t_test", args.t_test)
    if args.metrics:
        _set(doc, "eval.metrics", _csv_list(args.metrics, str))
    if args.seed is not None:
        # a new master seed re-derives every seed, including the test points
        doc["seeds"] = {"master": args.seed}
    cfg = resolve(doc, "dt" if "dt" in doc else None, check_batch=False)
    system = get_system(cfg["system"])
    if variant_for(system) != params.variant:
        raise ConfigError(f"a {params.variant} model cannot be scored against {cfg['system']!r}")
    ev = cfg["eval"]
    rep = evaluate(system, params, ev["n_test"], ev["m_test"], ev["t_test"], seed=cfg["seeds"]["test"],
                   rtol=cfg["rtol"], atol=cfg["atol"], metrics=tuple(ev["metrics"]))
    for name in ev["metrics"]:
        val = getattr(rep, name)
        print(f"{name.upper()} = {'n/a' if val is None else format(val, '.6e')}")
    out = Path(args.out) if args.out else _outdir(cfg) / "evaluation.csv"
    row = dict(rep.as_dict(), model=Path(args.model).name, system=cfg["system"])
    # fixed columns so rows appended by different --metrics choices line up
    cols = ("model", "system", "e1", "e2", "drift", "n_test", "m_test", "t_test", "seed", "rtol", "atol")
    write_table(out, cols, [row], cfg, append=True)
    return EXIT_OK


def cmd_sweep(args) -> int:
    doc, explicit = _base_doc(args)
    _set(doc, "system", args.system)
    _set(doc, "sweep.repeats", args.repeats)
    _set(doc, "train.epochs", args.epochs)
    _set(doc, "train.batch_size", args.batch_size)
    _set(doc, "train.lr", args.lr)
    if args.hidden is not None:
        _set(doc, "model.hidden", _csv_list(args.hidden, int))
    cfg = resolve(doc, explicit, check_batch=False)
    sw, tr, ev = cfg["sweep"], cfg["train"], cfg["eval"]
    grid = SweepGrid(N=tuple(sw["N"]), M=tuple(sw["M"]), eps=tuple(float(e) for e in sw["eps"]),
                     integrators=tuple(sw["integrators"]), system=cfg["system"], t_final=cfg["t_final"],
                     hidden=tuple(cfg["model"]["hidden"]), epochs=tr["epochs"], batch_size=tr["batch_size"],
                     lr=tr["lr"], n_test=ev["n_test"], m_test=ev["m_test"], t_test=ev["t_test"])
    total = len(grid.cells()) * sw["repeats"]
    done = [0]

    def progress(rec):
        done[0] += 1
        if args.verbose:
            print(f"[{done[0]}/{total}] N={rec.N} M={rec.M} eps={rec.eps} {rec.integrator} "
                  f"repeat {rec.repeat}: {rec.status} e1={rec.e1:.3e}")

    records = run_sweep(grid, sw["repeats"], cfg["seeds"]["master"], jobs=args.jobs, progress=progress)
    outdir = Path(args.out_dir) if args.out_dir else _outdir(cfg)
    rows = [{k: getattr(r, k) for k in RESULT_FIELDS} for r in records]
    write_table(outdir / "results.csv", RESULT_FIELDS, rows, cfg)
    cell_keys = ("N", "M", "eps", "integrator")
    write_table(outdir / "aggregates.csv", cell_keys + AGG_STATS + ("runs",), aggregate(records, cell_keys), cfg)
    write_table(outdir / "aggregates_by_integrator.csv", ("integrator",) + AGG_STATS + ("runs",),
                aggregate(records, ("integrator",)), cfg)
    ok = sum(r.status == "ok" for r in records)
    print(f"wrote {outdir}/results.csv ({len(records)} runs, {ok} succeeded)")
    return EXIT_OK if ok else EXIT_SWEEP


# parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hamlearn", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"hamlearn {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment configuration")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--outdir", help=f"default output directory (else ${OUTDIR_ENV} or .)")
        p.add_argument("-v", "--verbose", action="store_true")

    def training(p):
        p.add_argument("--integrator", help="ee, rk4, sv, le or cf4")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--hidden", help="comma-separated hidden widths; empty for a linear potential")

    g = sub.add_parser("generate", help="sample trajectories of a true system")
    common(g)
    g.add_argument("--system")
    g.add_argument("--n", type=int, help="number of trajectories")
    g.add_argument("--m", type=int, help="points per trajectory")
    t = g.add_mutually_exclusive_group()
    t.add_argument("--dt", type=float)
    t.add_argument("--t-final", type=float)
    g.add_argument("--eps", type=float, help="target noise level")
    g.add_argument("--reproject", action="store_true", help="project noisy chain targets onto the manifold")
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", help="fit a Hamiltonian model to a dataset")
    common(tr)
    training(tr)
    tr.add_argument("--data", required=True)
    tr.add_argument("--mu", type=float, help="first-integral regularization weight")
    tr.add_argument("--first-integral")
    tr.add_argument("--out", help="model file")
    tr.add_argument("--loss-csv")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="score a model with E1, E2 and constraint drift")
    common(ev)
    ev.add_argument("--model", required=True)
    ev.add_argument("--system")
    ev.add_argument("--n-test", type=int)
    ev.add_argument("--m-test", type=int)
    ev.add_argument("--t-test", type=float)
    ev.add_argument("--metrics", help="comma-separated subset of e1,e2,drift")
    ev.add_argument("--out", help="CSV to append the report to")
    ev.set_defaults(func=cmd_evaluate)

    sw = sub.add_parser("sweep", help="run a grid of training experiments")
    common(sw)
    training(sw)
    sw.add_argument("--system")
    sw.add_argument("--repeats", type=int)
    sw.add_argument("--jobs", type=int, default=1, help="worker processes")
    sw.add_argument("--out-dir")
    sw.set_defaults(func=cmd_sweep, integrator=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (IntegrationError, np.linalg.LinAlgError) as exc:
        print(f"integration failed: {exc}", file=sys.stderr)
        return EXIT_INTEGRATION
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
