"""Command-line entry point.

Subcommands: ``fit``, ``sample``, ``diagnose``, ``decide``, ``roc`` and
``experiment``. Runs are driven by a TOML file (``--config``); unknown keys
are rejected. Every command writes ``resolved_config.json`` next to its
outputs.

Exit codes: 0 success, 1 input error, 2 numerical non-convergence. Errors
are reported on stderr as one line::

    error: kind=ConfigError key=solver.graad_tol msg="unknown key"
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import diagnostics as diag
from . import experiments as exps
from . import transportmap as tm
from .errors import ConfigError, DidNotConverge, FitError, OTBayesError
from .inference import (DecisionProblem, bayes_action, map_action, roc_curve, threshold_loss)
from .models import (ConstantLikelihood, ExponentialPrior, GammaPrior,
                     GaussianLinearLikelihood, GaussianPrior, LaplacePrior, LogisticLikelihood,
                     PoissonLikelihood, PosteriorTarget, SpectralMagnitudeLikelihood,
                     UniformBoxPrior, map_estimate)
from .polybasis import BasisSpec, Family, gram_schmidt_empirical
from .samples import substream_seed
from .solver import FitOptions, fit

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("otbayes")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2

TOP_KEYS = {"seed", "out_dir", "threads", "prior", "likelihood", "basis", "solver",
            "fit", "sample", "diagnose", "decision", "experiment"}

PRIOR_KEYS = {
    "gaussian": {"kind", "mean", "cov", "var", "dim"},
    "uniform": {"kind", "lo", "hi", "dim"},
    "exponential": {"kind", "rate", "dim"},
    "laplace": {"kind", "scale", "dim", "loc", "smoothing"},
    "gamma": {"kind", "shape", "scale", "dim"},
}

LIKELIHOOD_KEYS = {
    "none": {"kind"},
    "gaussian_linear": {"kind", "M", "noise_cov", "noise_var", "y", "data_csv"},
    "poisson": {"kind", "counts", "data_csv"},
    "logistic": {"kind", "features", "labels", "data_csv"},
    "spectral": {"kind", "groups", "sigma2"},
}

SECTION_KEYS = {
    "basis": {"degree", "families", "empirical"},
    "solver": set(FitOptions.__dataclass_fields__) - {"seed"},
    "fit": {"n_train"},
    "sample": {"n"},
    "diagnose": {"n"},
    "decision": {"kind", "tau", "actions", "coord", "edges", "loss_matrix", "n"},
    "experiment": {"n_train", "n_eval", "degree", "params"},
}

DEFAULTS = {"fit": {"n_train": 1000}, "sample": {"n": 2000}, "diagnose": {"n": 2000},
            "decision": {"n": 2000}}


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------

def load_config(path) -> dict:
    """Parse a TOML run file and check every key against the schema."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", key=str(path)) from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}", key=str(path)) from None
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    for k in cfg:
        if k not in TOP_KEYS:
            raise ConfigError("unknown key", key=k)
    for section, allowed in SECTION_KEYS.items():
        block = cfg.get(section, {})
        if not isinstance(block, dict):
            raise ConfigError("expected a table", key=section)
        for k in block:
            if k not in allowed:
                raise ConfigError("unknown key", key=f"{section}.{k}")
    for section, table in (("prior", PRIOR_KEYS), ("likelihood", LIKELIHOOD_KEYS)):
        block = cfg.get(section)
        if block is None:
            continue
        kind = block.get("kind")
        if kind not in table:
            raise ConfigError(f"kind must be one of {sorted(table)}", key=f"{section}.kind")
        for k in block:
            if k not in table[kind]:
                raise ConfigError("unknown key", key=f"{section}.{k}")


def resolve(cfg: dict, args) -> dict:
    """Fill defaults and apply command-line overrides."""
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in cfg.items()}
    for section, vals in DEFAULTS.items():
        out[section] = {**vals, **out.get(section, {})}
    if args.seed is not None:
        out["seed"] = args.seed
    out.setdefault("seed", 0)
    if args.threads is not None:
        out["threads"] = args.threads
    out.setdefault("threads", 1)
    if args.out_dir is not None:
        out["out_dir"] = args.out_dir
    out.setdefault("out_dir", ".")
    return out


def _write_resolved(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _need(block: dict, key: str, section: str):
    if key not in block:
        raise ConfigError("missing required key", key=f"{section}.{key}")
    return block[key]


def _read_csv(path) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise ConfigError(f"cannot read data file: {exc.strerror}", key=str(path)) from None
    try:
        body = [[float(v) for v in r] for r in rows[1:]] if rows and not _numeric(rows[0]) \
            else [[float(v) for v in r] for r in rows]
    except ValueError as exc:
        raise ConfigError(f"bad number in data file: {exc}", key=str(path)) from None
    if not body:
        raise ConfigError("data file has no rows", key=str(path))
    return np.array(body, dtype=float)


def _numeric(row) -> bool:
    try:
        [float(v) for v in row]
    except ValueError:
        return False
    return True


def build_prior(cfg: dict):
    p = cfg.get("prior")
    if p is None:
        raise ConfigError("missing [prior] table", key="prior")
    kind = p["kind"]
    try:
        if kind == "gaussian":
            if "mean" in p:
                mean = np.asarray(p["mean"], dtype=float)
                cov = np.asarray(p.get("cov", np.eye(mean.size) * p.get("var", 1.0)), dtype=float)
                return GaussianPrior(mean, cov)
            return GaussianPrior.standard(int(p.get("dim", 1)), float(p.get("var", 1.0)))
        if kind == "uniform":
            return UniformBoxPrior(_need(p, "lo", "prior"), _need(p, "hi", "prior"), p.get("dim"))
        if kind == "exponential":
            return ExponentialPrior(_need(p, "rate", "prior"), p.get("dim"))
        if kind == "laplace":
            return LaplacePrior(_need(p, "scale", "prior"), p.get("dim"), p.get("loc", 0.0),
                                p.get("smoothing", 0.0))
        return GammaPrior(_need(p, "shape", "prior"), _need(p, "scale", "prior"), p.get("dim"))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), key="prior") from None


def build_likelihood(cfg: dict, dim: int):
    lk = cfg.get("likelihood", {"kind": "none"})
    kind = lk["kind"]
    data = _read_csv(lk["data_csv"]) if "data_csv" in lk else None
    try:
        if kind == "none":
            return ConstantLikelihood(dim)
        if kind == "poisson":
            counts = data if data is not None else _need(lk, "counts", "likelihood")
            return PoissonLikelihood(np.asarray(counts, dtype=float).reshape(-1, dim), dim=dim)
        if kind == "gaussian_linear":
            M = np.atleast_2d(np.asarray(_need(lk, "M", "likelihood"), dtype=float))
            y = data.reshape(-1) if data is not None else _need(lk, "y", "likelihood")
            if "noise_cov" in lk:
                cov = lk["noise_cov"]
            else:
                cov = float(lk.get("noise_var", 1.0)) * np.eye(M.shape[0])
            return GaussianLinearLikelihood(M, cov, y)
        if kind == "logistic":
            if data is not None:
                return LogisticLikelihood(data[:, :-1], data[:, -1])
            return LogisticLikelihood(_need(lk, "features", "likelihood"),
                                      _need(lk, "labels", "likelihood"))
        return SpectralMagnitudeLikelihood(_need(lk, "groups", "likelihood"),
                                           float(_need(lk, "sigma2", "likelihood")))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), key="likelihood") from None


def build_target(cfg: dict):
    prior = build_prior(cfg)
    return PosteriorTarget(prior, build_likelihood(cfg, prior.dim))


def build_spec(cfg: dict, prior, samples) -> Optional[BasisSpec]:
    b = cfg.get("basis", {})
    degree = int(b.get("degree", 3))
    if b.get("empirical", False):
        return gram_schmidt_empirical(samples, degree)
    if "families" in b:
        fams = []
        for j, f in enumerate(b["families"]):
            if not isinstance(f, dict) or "kind" not in f:
                raise ConfigError("each family needs a kind", key=f"basis.families[{j}]")
            try:
                fams.append(Family(f["kind"], tuple(f.get("params", ()))))
            except ValueError as exc:
                raise ConfigError(str(exc), key=f"basis.families[{j}]") from None
        if len(fams) != prior.dim:
            raise ConfigError("need one family per coordinate", key="basis.families")
        return BasisSpec.from_families(fams, degree)
    return None


def build_options(cfg: dict) -> FitOptions:
    try:
        return FitOptions(**cfg.get("solver", {}), seed=int(cfg["seed"])).replace(strict=False)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), key="solver") from None


def _positive_count(v, key) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
        raise ConfigError("must be a positive integer", key=key)
    return int(v)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _out(msg: str, args) -> None:
    if not args.quiet:
        print(msg)


def _map_config(args, map_path: Path) -> dict:
    """Config for commands that take a fitted map: ``--config`` if given,
    else the resolved config saved beside the map."""
    if args.config:
        return load_config(args.config)
    saved = map_path.parent / "resolved_config.json"
    if not saved.exists():
        raise ConfigError("no --config given and no resolved_config.json beside the map",
                          key=str(saved))
    cfg = json.loads(saved.read_text())
    validate_config(cfg)
    return cfg


def cmd_fit(args) -> int:
    if not args.config:
        raise ConfigError("fit needs --config", key="config")
    cfg = resolve(load_config(args.config), args)
    target = build_target(cfg)
    n = _positive_count(cfg["fit"]["n_train"], "fit.n_train")
    samples = target.prior.sample(n, seed=substream_seed(cfg["seed"], "fit"))
    spec = build_spec(cfg, target.prior, samples)
    degree = int(cfg.get("basis", {}).get("degree", 3))
    opts = build_options(cfg)
    tmap, report = fit(target, samples, spec=spec, opts=opts, degree=degree)
    out = Path(cfg["out_dir"])
    _write_resolved(cfg, out)
    tm.save(tmap, out / "map.json")
    (out / "solve_report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    _out(f"{report.termination} after {report.iterations} iterations, "
         f"|grad|={report.grad_norm:.3g}; map written to {out / 'map.json'}", args)
    return EXIT_OK if report.converged else EXIT_NUMERIC


def cmd_sample(args) -> int:
    map_path = Path(args.map)
    tmap = tm.load(map_path)
    cfg = resolve(_map_config(args, map_path), args)
    n = args.n if args.n is not None else cfg["sample"]["n"]
    n = _positive_count(n, "sample.n")
    prior = build_prior(cfg)
    draws = prior.sample(n, seed=substream_seed(cfg["seed"], "sample"))
    pushed = tm.push_samples(tmap, draws, strict=False)
    out = Path(cfg["out_dir"])
    _write_resolved(cfg, out)
    path = Path(args.out) if args.out else out / "samples.csv"
    pushed.to_csv(path)
    bad = 0 if pushed.flags is None else int(pushed.flags.sum())
    _out(f"wrote {n} samples to {path} ({bad} flagged infeasible)", args)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    map_path = Path(args.map)
    tmap = tm.load(map_path)
    cfg = resolve(_map_config(args, map_path), args)
    n = _positive_count(args.n if args.n is not None else cfg["diagnose"]["n"], "diagnose.n")
    target = build_target(cfg)
    draws = target.prior.sample(n, seed=substream_seed(cfg["seed"], "diagnose"))
    rep = diag.diagnose(tmap, target, draws)
    out = Path(cfg["out_dir"])
    _write_resolved(cfg, out)
    (out / "diagnostics.json").write_text(rep.to_json() + "\n")
    _out(rep.table(), args)
    return EXIT_OK


def build_decision(cfg: dict, dim: int) -> DecisionProblem:
    dec = cfg.get("decision", {})
    kind = dec.get("kind", "threshold")
    actions = dec.get("actions")
    if actions is not None and len(actions) == 0:
        raise ConfigError("action list is empty", key="decision.actions")
    if kind == "threshold":
        tau = float(_need(dec, "tau", "decision"))
        if actions is None:
            actions = list(itertools.product((0, 1), repeat=dim))
        return DecisionProblem([tuple(int(v) for v in a) for a in actions],
                               loss=threshold_loss(tau))
    if kind == "interval":
        coord = int(dec.get("coord", 0))
        edges = np.asarray(_need(dec, "edges", "decision"), dtype=float)
        L = np.asarray(_need(dec, "loss_matrix", "decision"), dtype=float)
        if actions is None:
            actions = list(range(L.shape[0]))
        if L.ndim != 2 or L.shape[1] != edges.size + 1:
            raise ConfigError("loss_matrix needs one column per interval", key="decision.loss_matrix")

        def labels(X):
            bins = np.searchsorted(edges, np.asarray(X)[:, coord], side="right")
            return np.eye(edges.size + 1)[bins]

        try:
            return DecisionProblem(actions, loss_matrix=L, label_model=labels)
        except ValueError as exc:
            raise ConfigError(str(exc), key="decision") from None
    raise ConfigError("kind must be 'threshold' or 'interval'", key="decision.kind")


def cmd_decide(args) -> int:
    map_path = Path(args.map)
    cfg = resolve(_map_config(args, map_path), args)
    target = build_target(cfg)
    problem = build_decision(cfg, target.dim)
    tmap = tm.load(map_path)
    n = _positive_count(cfg["decision"]["n"], "decision.n")
    draws = target.prior.sample(n, seed=substream_seed(cfg["seed"], "decide"))
    pushed = tm.push_samples(tmap, draws, strict=False)
    Z = pushed.values if pushed.flags is None else pushed.values[~pushed.flags]
    a_bayes, losses = bayes_action(problem, Z)
    x0 = np.clip(np.zeros(target.dim), *target.prior.support())
    if not np.isfinite(target.log_density(x0)):
        x0 = np.median(Z, axis=0)
    a_map = map_action(problem, map_estimate(target, x0))
    result = {"bayes_action": _plain(a_bayes), "map_action": _plain(a_map),
              "expected_losses": [float(v) for v in losses],
              "actions": [_plain(a) for a in problem.actions]}
    out = Path(cfg["out_dir"])
    _write_resolved(cfg, out)
    (out / "decision.json").write_text(json.dumps(result, indent=2) + "\n")
    _out(f"bayes action {result['bayes_action']}  map action {result['map_action']}", args)
    return EXIT_OK


def _plain(a):
    if isinstance(a, (tuple, list, np.ndarray)):
        return [_plain(v) for v in a]
    if isinstance(a, np.integer):
        return int(a)
    return a


def cmd_roc(args) -> int:
    data = _read_csv(args.scores)
    if data.shape[1] < 2:
        raise ConfigError("scores file needs score and label columns", key=str(args.scores))
    curve = roc_curve(data[:, 0], data[:, 1].astype(int))
    cfg = resolve(load_config(args.config) if args.config else {}, args)
    out = Path(cfg["out_dir"])
    _write_resolved({**cfg, "scores": str(args.scores)}, out)
    curve.to_csv(out / "roc.csv")
    print(f"AUC {curve.auc:.6g}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    raw = load_config(args.config) if args.config else {}
    cfg = resolve(raw, args)
    block = dict(cfg.get("experiment", {}))
    try:
        ecfg = exps.ExperimentConfig(args.scenario, seed=int(cfg["seed"]),
                                     threads=int(cfg["threads"]), **block)
    except ValueError as exc:
        raise ConfigError(str(exc), key="experiment") from None
    report = exps.run(ecfg)
    out = Path(cfg["out_dir"])
    _write_resolved({**cfg, "experiment": ecfg.to_dict()}, out)
    path = report.write(out)
    for k, v in report.metrics.items():
        if isinstance(v, (int, float, str)):
            _out(f"{k:<28}{v}", args)
    _out(f"report written to {path}", args)
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def _globals() -> argparse.ArgumentParser:
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", default=argparse.SUPPRESS, help="TOML run file")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root seed")
    g.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                   help="worker threads for trial loops")
    g.add_argument("--out-dir", dest="out_dir", default=argparse.SUPPRESS,
                   help="output directory")
    g.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS,
                   help="only errors and requested results on the console")
    return g


def build_parser() -> argparse.ArgumentParser:
    g = _globals()
    parser = argparse.ArgumentParser(prog="otbayes", parents=[g],
                                     description="Transport-map Bayesian inference.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("fit", parents=[g], help="fit a prior-to-posterior map")
    p.set_defaults(func=cmd_fit)
    p = sub.add_parser("sample", parents=[g], help="push fresh prior draws through a map")
    p.add_argument("map")
    p.add_argument("--n", type=int)
    p.add_argument("--out", help="CSV path (default <out-dir>/samples.csv)")
    p.set_defaults(func=cmd_sample)
    p = sub.add_parser("diagnose", parents=[g], help="T-operator diagnostics of a map")
    p.add_argument("map")
    p.add_argument("--n", type=int)
    p.set_defaults(func=cmd_diagnose)
    p = sub.add_parser("decide", parents=[g], help="Bayes and MAP actions")
    p.add_argument("map")
    p.set_defaults(func=cmd_decide)
    p = sub.add_parser("roc", parents=[g], help="ROC curve and AUC from score,label CSV")
    p.add_argument("scores")
    p.set_defaults(func=cmd_roc)
    p = sub.add_parser("experiment", parents=[g], help="run a preset scenario")
    p.add_argument("scenario", choices=exps.SCENARIOS)
    p.set_defaults(func=cmd_experiment)
    return parser


def _error_line(exc: BaseException, key: Optional[str] = None) -> str:
    msg = str(exc).replace("\n", " ").replace('"', "'")
    parts = [f"kind={type(exc).__name__}"]
    if key:
        parts.append(f"key={key}")
    parts.append(f'msg="{msg}"')
    return "error: " + " ".join(parts)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    for name, default in (("config", None), ("seed", None), ("threads", None),
                          ("out_dir", None), ("quiet", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(_error_line(exc, exc.key), file=sys.stderr)
        return EXIT_INPUT
    except (FitError, DidNotConverge) as exc:
        print(_error_line(exc), file=sys.stderr)
        return EXIT_NUMERIC
    except (OTBayesError, ValueError, OSError) as exc:
        key = getattr(exc, "filename", None)
        print(_error_line(exc, key), file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
