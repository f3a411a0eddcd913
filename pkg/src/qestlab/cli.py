"""Command-line entry point.

Exit codes: 0 success, 2 configuration or validation error, 3 numerical
failure inside a computation.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, core
from .adaptive import AdaptiveSchedule, fake_ensemble_reduce, leibniz_check
from .channels import interiority_check, scaling_experiment
from .errors import ConfigError, InvalidConfig, NumericalError, QestError, UnknownModel
from .fisher import (
    Estimator,
    classical_fisher,
    evaluate_exact,
    locally_unbiased_estimator,
    qfi_sld,
    rebias_estimator,
)
from .io import (
    csv_text,
    dumps,
    load_json,
    parse_matrix,
    parse_real_matrix,
    povm_from_config,
    write_text,
)
from .locc import (
    ProductModel,
    brute_force_lo_search,
    identifiability_projector,
    locc_variance_bound,
    _pinv,
)
from .models import ChannelModel, StateModel, builtin_model, estimate_regularity, model_from_config
from .twostep import TwoStepConfig, monte_carlo

SEED_ENV = "QESTLAB_SEED"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidConfig(message)


# argument helpers


def _model_ref(ref: str):
    """Built-in name with optional ``:key=value,...`` parameters, or a JSON config path."""
    if ref.endswith(".json") or os.path.sep in ref:
        return model_from_config(load_json(ref))
    name, _, rest = ref.partition(":")
    params = {}
    if rest:
        for item in rest.split(","):
            key, eq, val = item.partition("=")
            if not eq:
                raise InvalidConfig(f"bad model parameter {item!r}; expected key=value")
            try:
                params[key.strip()] = float(val)
            except ValueError:
                params[key.strip()] = val.strip()
    return builtin_model(name, params)


def _state_model(ref: str) -> StateModel:
    model = _model_ref(ref)
    if not isinstance(model, StateModel):
        raise InvalidConfig(f"{ref!r} is a channel family; a state model is required")
    return model


def _channel_model(ref: str) -> ChannelModel:
    model = _model_ref(ref)
    if not isinstance(model, ChannelModel):
        raise UnknownModel(f"{ref!r} is not a channel family")
    return model


def _floats(text: str) -> np.ndarray:
    text = text.strip()
    if text.startswith("["):
        return np.asarray(json.loads(text), dtype=float).ravel()
    try:
        return np.array([float(x) for x in text.split(",") if x.strip()])
    except ValueError:
        raise InvalidConfig(f"expected a comma-separated list of numbers, got {text!r}") from None


def _ints(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InvalidConfig(f"expected a comma-separated list of integers, got {text!r}") from None


def _g_matrix(ref, m: int) -> np.ndarray:
    if ref is None or ref == "identity":
        return np.eye(m)
    raw = json.loads(ref) if ref.strip().startswith("[") else load_json(ref)
    if isinstance(raw, dict):
        raw = raw.get("matrix", raw)
    G = parse_real_matrix(raw)
    if G.shape != (m, m):
        raise InvalidConfig(f"G must be {m}x{m}, got {G.shape}")
    if np.abs(G - G.T).max() > 1e-12 or np.linalg.eigvalsh(G).min() <= 0:
        raise InvalidConfig("G must be symmetric positive definite")
    return G


def _seed(value) -> int:
    if value is None:
        value = os.environ.get(SEED_ENV)
        if value is None:
            raise InvalidConfig(f"a seed is required (--seed or {SEED_ENV})")
    try:
        seed = int(value)
    except ValueError:
        raise InvalidConfig(f"seed must be an integer, got {value!r}") from None
    if not 0 <= seed < 2 ** 64:
        raise InvalidConfig("seed must fit in an unsigned 64-bit integer")
    return seed


def _workers(value) -> int:
    if value is None:
        return os.cpu_count() or 1
    if value < 1:
        raise InvalidConfig("--workers must be at least 1")
    return value


# schedule configs


def _instrument_from_config(cfg) -> core.Instrument:
    if "luders" in cfg:
        return core.luders_instrument(povm_from_config(cfg["luders"]))
    if "kraus" in cfg:
        k = cfg["kraus"]
        branches = [[parse_matrix(op) for op in b] for b in k["branches"]]
        labels = k.get("labels", list(range(len(branches))))
        return core.Instrument(tuple(branches), tuple(labels))
    if "povm" in cfg:
        return core.luders_instrument(povm_from_config(cfg["povm"]))
    raise InvalidConfig("instrument needs one of 'luders', 'kraus' or 'povm'")


def _matches(pattern, value) -> bool:
    return pattern == "*" or pattern == value


def schedule_from_config(cfg: dict) -> AdaptiveSchedule:
    """Decision-table schedule: the first table row whose round, sample and
    history prefix pattern match selects the instrument (``"*"`` is a wildcard)."""
    try:
        n, rounds = int(cfg["samples"]), int(cfg["rounds"])
        insts = {name: _instrument_from_config(spec) for name, spec in cfg["instruments"].items()}
        table = list(cfg["table"])
    except (KeyError, TypeError) as exc:
        raise InvalidConfig(f"schedule config is missing {exc}") from None
    for row in table:
        if row.get("instrument") not in insts:
            raise InvalidConfig(f"table row names unknown instrument {row.get('instrument')!r}")

    def choose(r, k, history):
        for row in table:
            if not _matches(row.get("round", "*"), r) or not _matches(row.get("sample", "*"), k):
                continue
            pat = row.get("history", "*")
            if pat != "*":
                if len(pat) > len(history) or not all(_matches(p, h) for p, h in zip(pat, history)):
                    continue
            return insts[row["instrument"]]
        raise InvalidConfig(f"no schedule table row matches round {r}, sample {k}, history {history}")

    return AdaptiveSchedule(n, rounds, choose)


def estimator_from_config(cfg: dict, schedule: AdaptiveSchedule, model: StateModel, theta0) -> Estimator:
    """T(path) = θ₀ + Σ_p w_p s_p + Σ c_pq s_p s_q, rebiased to be locally unbiased at θ₀.

    s_p is the numeric value of the p-th outcome label (``label_values`` may
    map labels to numbers).
    """
    m = model.m
    length = schedule.rounds * schedule.n_samples
    w = np.atleast_2d(np.asarray(cfg.get("weights", [1.0] * length), dtype=float))
    if w.shape != (m, length):
        raise InvalidConfig(f"estimator weights must have shape ({m}, {length})")
    cross = [(int(a), int(b), np.atleast_1d(np.asarray(c, dtype=float))) for a, b, c in cfg.get("cross", [])]
    values = {str(k): float(v) for k, v in cfg.get("label_values", {}).items()}

    def value(lab):
        return values.get(str(lab), lab if isinstance(lab, (int, float)) else float("nan"))

    paths = schedule.outcome_law(model, theta0)[0]
    table = {}
    for p in paths:
        s = np.array([value(x) for x in p], dtype=float)
        if not np.all(np.isfinite(s)):
            raise InvalidConfig(f"outcome labels {p} need numeric label_values")
        t = theta0 + w @ s
        for a, b, c in cross:
            t = t + c * s[a] * s[b]
        table[p] = t
    return rebias_estimator(Estimator.from_table(schedule, table), model, theta0)


# subcommands


def _theta(args, model) -> np.ndarray:
    t = _floats(args.theta)
    if t.shape[0] != model.m:
        raise InvalidConfig(f"--theta needs {model.m} values")
    return t


def cmd_qfi(args):
    model = _state_model(args.model)
    J = qfi_sld(model, _theta(args, model))
    return {"matrix": J.matrix, "kind": J.kind}


def cmd_cfi(args):
    model = _state_model(args.model)
    povm = povm_from_config(args.povm if args.povm == "pauli" else load_json(args.povm))
    J = classical_fisher(model, _theta(args, model), povm)
    return {"matrix": J.matrix, "kind": J.kind}


def cmd_lue(args):
    model = _state_model(args.model)
    t = _theta(args, model)
    povm = povm_from_config(args.povm if args.povm == "pauli" else load_json(args.povm))
    est = locally_unbiased_estimator(model, t, povm)
    rep = evaluate_exact(est, model, t)
    return {
        "estimates": [{"label": lab, "value": est(lab)} for lab in povm.labels],
        "matrix": rep.variance,
        "kind": "variance",
        "b_matrix": rep.b_matrix,
    }


def cmd_two_step(args):
    model = _state_model(args.model)
    t = _theta(args, model)
    seed = _seed(args.seed)
    G = _g_matrix(args.g, model.m)
    cfg = TwoStepConfig(args.n, args.n1, seed=seed)
    mc = monte_carlo(model, t, cfg, args.trials, G, workers=_workers(args.workers))
    rep = mc.report
    row = [
        args.model, " ".join("%.17g" % x for x in t), args.n, mc.n0, mc.n1, mc.n2, args.trials, seed,
        float(rep.weighted_cost), float(rep.stderr), float(np.linalg.norm(rep.bias)),
        None if mc.ks_stat is None else float(mc.ks_stat), mc.flagged_trials,
    ]
    header = ["model", "theta", "n", "n0", "n1", "n2", "trials", "seed", "n_mse_trace",
              "stderr", "bias_norm", "ks_stat", "flagged_trials"]
    return csv_text(header, [row])


def cmd_adaptive_verify(args):
    model = _state_model(args.model)
    t0 = _floats(args.theta0)
    cfg = load_json(args.schedule)
    schedule = schedule_from_config(cfg)
    T = estimator_from_config(cfg.get("estimator", {}), schedule, model, t0)
    residual = max(
        leibniz_check(schedule, T, model, t0, r, k)
        for r in range(schedule.rounds)
        for k in range(schedule.n_samples)
    )
    _, rep = fake_ensemble_reduce(schedule, T, model, t0)
    return {
        "leibniz_residual": residual,
        "psd_gap": rep.psd_gap,
        "b_error": rep.b_error,
        "orthogonality": rep.orthogonality,
        "mean_f": rep.mean_f,
        "variance_adaptive": rep.v_e,
        "variance_reduced": rep.v_s,
    }


def cmd_locc_bound(args):
    a, b = _state_model(args.model_a), _state_model(args.model_b)
    pm = ProductModel(a, b)
    t = _floats(args.theta)
    G = _g_matrix(args.g, pm.m)
    Pa, Pb = identifiability_projector(a, t), identifiability_projector(b, t)
    Va, Vb = _pinv(qfi_sld(a, t).matrix), _pinv(qfi_sld(b, t).matrix)
    return {"bound": locc_variance_bound(Va, Vb, Pa, Pb, G), "projectors": {"a": Pa, "b": Pb}}


def cmd_locc_search(args):
    pm = ProductModel(_state_model(args.model_a), _state_model(args.model_b))
    t = _floats(args.theta)
    res = brute_force_lo_search(pm, t, _g_matrix(args.g, pm.m), grid=args.grid)
    return {"best_cost": res.best_cost, "axes": {"a": res.axis_a, "b": res.axis_b}, "bound": res.bound}


def cmd_channel_interior(args):
    cm = _channel_model(args.family)
    return {"interior": interiority_check(cm, _floats(args.theta), args.eps)}


def cmd_channel_scaling(args):
    cm = _channel_model(args.family)
    t = _floats(args.theta)
    seed = _seed(args.seed)
    rows = scaling_experiment(cm, t, args.strategy, _ints(args.ns), args.trials, seed,
                              shots=args.shots, workers=_workers(args.workers))
    header = ["family", "theta", "strategy", "n", "trials", "mse", "n_mse", "n2_mse", "stderr"]
    body = [
        [args.family, "%.17g" % t[0], args.strategy, r.n, r.trials, r.mse, r.n_mse, r.n2_mse, r.stderr]
        for r in rows
    ]
    return csv_text(header, body)


def cmd_regcheck(args):
    model = _state_model(args.model)
    grid = _floats(args.grid) if not args.grid.strip().startswith("[[") else np.asarray(json.loads(args.grid))
    diag = estimate_regularity(model, np.asarray(grid, dtype=float).reshape(-1, model.m))
    return {
        "a1_estimate": diag.a1_estimate,
        "m2_ok": list(diag.m2_ok),
        "notes": list(diag.notes),
    }


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qestlab", description="Quantum estimation laboratory")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        if out:
            sp.add_argument("--out", help="output file (refuses to overwrite without --force)")
            sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("qfi", help="SLD quantum Fisher information")
    sp.add_argument("--model", required=True)
    sp.add_argument("--theta", required=True)
    common(sp)
    sp.set_defaults(func=cmd_qfi)

    for name, func, help_ in (
        ("cfi", cmd_cfi, "classical Fisher information of a POVM"),
        ("lue", cmd_lue, "locally unbiased estimator for a POVM"),
    ):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--model", required=True)
        sp.add_argument("--theta", required=True)
        sp.add_argument("--povm", required=True, help="POVM JSON file or 'pauli'")
        common(sp)
        sp.set_defaults(func=func)

    sim = sub.add_parser("simulate").add_subparsers(dest="what", required=True, parser_class=_Parser)
    sp = sim.add_parser("two-step", help="Monte Carlo of the two-step estimator")
    sp.add_argument("--model", required=True)
    sp.add_argument("--theta", required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--n1", type=int, default=1)
    sp.add_argument("--trials", type=int, required=True)
    sp.add_argument("--seed")
    sp.add_argument("--g", default="identity")
    sp.add_argument("--workers", type=int)
    common(sp)
    sp.set_defaults(func=cmd_two_step)

    ad = sub.add_parser("adaptive").add_subparsers(dest="what", required=True, parser_class=_Parser)
    sp = ad.add_parser("verify", help="Leibniz and reduction checks on a schedule")
    sp.add_argument("--schedule", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--theta0", required=True)
    common(sp)
    sp.set_defaults(func=cmd_adaptive_verify)

    lo = sub.add_parser("locc").add_subparsers(dest="what", required=True, parser_class=_Parser)
    for name, func in (("bound", cmd_locc_bound), ("search", cmd_locc_search)):
        sp = lo.add_parser(name)
        sp.add_argument("--model-a", required=True)
        sp.add_argument("--model-b", required=True)
        sp.add_argument("--theta", required=True)
        sp.add_argument("--g", default="identity")
        if name == "search":
            sp.add_argument("--grid", type=int, default=36)
        common(sp)
        sp.set_defaults(func=func)

    ch = sub.add_parser("channel").add_subparsers(dest="what", required=True, parser_class=_Parser)
    sp = ch.add_parser("interior")
    sp.add_argument("--family", required=True)
    sp.add_argument("--theta", required=True)
    sp.add_argument("--eps", type=float, required=True)
    common(sp)
    sp.set_defaults(func=cmd_channel_interior)
    sp = ch.add_parser("scaling")
    sp.add_argument("--family", required=True)
    sp.add_argument("--theta", required=True)
    sp.add_argument("--strategy", required=True)
    sp.add_argument("--ns", required=True)
    sp.add_argument("--trials", type=int, required=True)
    sp.add_argument("--seed")
    sp.add_argument("--shots", type=int, default=400)
    sp.add_argument("--workers", type=int)
    common(sp)
    sp.set_defaults(func=cmd_channel_scaling)

    sp = sub.add_parser("regcheck", help="regularity diagnostics over a theta grid")
    sp.add_argument("--model", required=True)
    sp.add_argument("--grid", required=True, help="comma list (one parameter) or JSON list of points")
    common(sp)
    sp.set_defaults(func=cmd_regcheck)
    return p


def _jsonable(obj):
    if isinstance(obj, argparse.Namespace):
        return {k: v for k, v in vars(obj).items() if k != "func"}
    return obj


def run(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    argv = list(sys.argv[1:] if argv is None else argv)
    started = time.time()
    args = None
    status, message, code = "ok", None, 0
    try:
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as exc:  # --help / --version
            return int(exc.code or 0)
        if getattr(args, "out", None) and Path(args.out).exists() and not args.force:
            raise InvalidConfig(f"refusing to overwrite {args.out} (pass --force)")
        result = args.func(args)
        text = result if isinstance(result, str) else dumps(result) + "\n"
        if getattr(args, "out", None):
            write_text(args.out, text, force=args.force)
        else:
            stdout.write(text)
    except ConfigError as exc:
        status, message, code = "config-error", str(exc), 2
    except NumericalError as exc:
        status, message, code = "numerical-error", str(exc), 3
    except QestError as exc:
        status, message, code = "error", str(exc), 3
    if message:
        print(f"qestlab: {message}", file=stderr)
    out = getattr(args, "out", None) if args is not None else None
    if out:
        manifest = {
            "argv": argv,
            "config": _jsonable(args),
            "version": __version__,
            "wall_clock_seconds": time.time() - started,
            "status": status,
            "message": message,
        }
        mpath = Path(str(out) + ".manifest.json")
        if not mpath.exists() or args.force or code == 0:
            try:
                mpath.write_text(dumps(manifest) + "\n", encoding="utf-8")
            except OSError as exc:
                print(f"qestlab: could not write manifest: {exc}", file=stderr)
    return code


def main() -> None:
    sys.exit(run())
