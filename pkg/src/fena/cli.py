"""Command-line entry point: ``fena gen-data | train | eval | simulate | bench``.

Every run is fully determined by ``--preset``, ``--seed`` and the override
flags; each output directory receives a ``config.json`` with the resolved
settings.  Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import concat, dataset as D, presets, sfne
from .errors import ConfigError, DatasetFormatError, NumericError
from .rod import HarmonicLoad

log = logging.getLogger("fena")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
DATA_ENV = "FENA_DATA_DIR"

# documentation rows: full-scale results from the original study
REFERENCE_ROWS = {
    "1": {"train_er": 0.246, "test_er": 0.248},
    "2": {"train_er": 0.194, "test_er": 0.205},
    "4": {"train_er": 0.78, "test_er": 0.81},
}


class CliError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


def _default_dir(sub: str) -> Path:
    return Path(os.environ.get(DATA_ENV, ".")) / sub


def _write_config(out: Path, command: str, preset: presets.Preset, args, extra=None) -> None:
    cfg = {"command": command, "preset": preset.to_json(), "seed": args.seed,
           "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}}
    cfg.update(extra or {})
    (out / "config.json").write_text(json.dumps(cfg, indent=1, default=str))


def _resolve(args) -> presets.Preset:
    p = presets.get(args.preset)
    return p.with_overrides(epochs=getattr(args, "epochs", None), lr=getattr(args, "lr", None),
                            ensemble=getattr(args, "ensemble", None), sources=getattr(args, "count", None),
                            horizon=getattr(args, "horizon", None))


def _need_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise CliError(f"{what} directory {path} does not exist", EXIT_IO)
    return path


# -- gen-data ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    p = _resolve(args)
    out = _need_dir(args.out or _default_dir("data"), "output")
    members = p.ensemble
    built = []
    for j in range(members):
        tr, te = presets.member_data(p, args.seed, j, jobs=args.jobs)
        built.append((tr, te))
        log.info("member %d: %d train / %d test records", j, len(tr), len(te))
    # write only after every member generated so failures leave nothing behind
    for j, (tr, te) in enumerate(built):
        mdir = out / f"m{j}"
        mdir.mkdir(exist_ok=True)
        D.save(tr, mdir / "train")
        D.save(te, mdir / "test")
    total = sum(len(tr) + len(te) for tr, te in built[:1])
    _write_config(out, "gen-data", p, args, {"members": members, "count": total})
    print(f"wrote {members} member dataset(s) to {out}; member 0 has {total} records")
    return EXIT_OK


def _member_sets(data: Path, j: int):
    mdir = data / f"m{j}"
    if not mdir.is_dir():
        raise CliError(f"{mdir} missing; run gen-data with --ensemble covering member {j}", EXIT_IO)
    return D.load(mdir / "train"), D.load(mdir / "test")


# -- train --------------------------------------------------------------------------

def cmd_train(args) -> int:
    p = _resolve(args)
    data = _need_dir(args.data or _default_dir("data"), "data")
    out = _need_dir(args.out or _default_dir("models"), "output")
    cfg = p.train
    for j in range(p.ensemble):
        tr, te = _member_sets(data, j)
        member_cfg = sfne.TrainConfig(**{**asdict(cfg), "seed": args.seed + j})
        if args.resume and j == 0:
            resume, _ = sfne.load_checkpoint(args.resume)
            model = resume.model
        else:
            resume = None
            model = sfne.build(p.arch, member_cfg.seed, member_cfg.loss)
        t0 = time.perf_counter()
        res = sfne.train(model, tr, te, member_cfg, resume=resume, epochs=args.epoch_limit,
                         log=lambda e, a, b, lr: log.info("m%d epoch %d train %.4g test %.4g lr %.3g",
                                                          j, e, a, b, lr))
        final = sfne.evaluate_loss(res.model, tr)
        sfne.save_checkpoint(out / f"model_{j}.ckpt", res, member_cfg,
                             extra={"final_train_loss": repr(final), "preset": p.name,
                                    "train_seconds": time.perf_counter() - t0})
        res.curves.to_csv(out / f"curves_{j}.csv")
        print(f"member {j}: seed {member_cfg.seed}, {res.epochs_done} epochs, final train loss {final:.6g}")
    _write_config(out, "train", p, args)
    return EXIT_OK


def _load_ensemble(models: Path, k: int | None = None):
    paths = sorted(models.glob("model_*.ckpt"), key=lambda q: int(q.stem.split("_")[1]))
    if not paths:
        raise CliError(f"no model_*.ckpt in {models}", EXIT_IO)
    loaded = [sfne.load_checkpoint(q) for q in paths[:k]]
    return sfne.Ensemble([r.model for r, _ in loaded]), [m for _, m in loaded]


# -- eval -----------------------------------------------------------------------------

def evaluate(ensemble: sfne.Ensemble, tr, te) -> dict:
    ch = ensemble.arch.out_channels
    p_tr = ensemble.predict(tr.in_static, tr.in_dyn)
    p_te = ensemble.predict(te.in_static, te.in_dyn)
    return {
        "train_er": float(np.mean(sfne.sample_errors(p_tr, tr.out, ch))),
        "test_er": float(np.mean(sfne.sample_errors(p_te, te.out, ch))),
        "profile": sfne.step_profile(p_te, te.out, ch),
        "test_pred": p_te,
    }


def cmd_eval(args) -> int:
    p = _resolve(args)
    data = _need_dir(args.data or _default_dir("data"), "data")
    models = _need_dir(args.models or _default_dir("models"), "models")
    out = _need_dir(args.out or models, "output")
    ens, metas = _load_ensemble(models, args.ensemble)
    tr, te = _member_sets(data, 0)
    res = evaluate(ens, tr, te)
    member_losses = [sfne.evaluate_loss(m, tr) for m in ens.models]
    cut = concat.find_cutoff(res["profile"])
    report = {
        "preset": p.name, "k": len(ens), "train_er": res["train_er"], "test_er": res["test_er"],
        "t_c": cut.t_c, "t_c_flat": cut.flat,
        "member_train_loss": member_losses,
        "recorded_final_train_loss": [float(m["extra"].get("final_train_loss", "nan")) for m in metas],
        "reference": REFERENCE_ROWS.get(p.case),
        "config": p.to_json(),
    }
    (out / "eval.json").write_text(json.dumps(report, indent=1))
    with open(out / "profile.csv", "w") as fh:
        fh.write("step,test_er\n")
        for i, v in enumerate(res["profile"], start=1):
            fh.write(f"{i},{float(v)!r}\n")
    print(f"k={len(ens)} train e_r {res['train_er']:.3f}%  test e_r {res['test_er']:.3f}%  t_c {cut.t_c}")
    return EXIT_OK


# -- simulate ----------------------------------------------------------------------------

def long_truth(p: presets.Preset, params, t_s: int, horizon: int):
    """Oracle history (t_s + horizon + 1 rows, [u | u_dot]) and the static property rows."""
    problem = p.problem
    rec = D.solve_source(problem, params, t_s + horizon)
    static, dyn, out = rec
    full = np.vstack([static[-2:].reshape(1, -1), out])
    return full, static[:problem.n_props]


def cmd_simulate(args) -> int:
    p = _resolve(args)
    if p.windows == 0:
        raise CliError(f"preset {p.name} has no state input; simulate needs a windowed case", EXIT_CONFIG)
    models = _need_dir(args.models or _default_dir("models"), "models")
    out = _need_dir(args.out or models, "output")
    ens, _ = _load_ensemble(models, args.ensemble)
    horizon = p.horizon or p.n_t
    rng = np.random.default_rng(args.seed)
    problem = p.problem
    params = np.array([r[0] + (r[1] - r[0]) * rng.random() for r in problem.param_ranges])
    if args.omega is not None:
        params[0] = args.omega
    t_s = args.t_s if args.t_s is not None else int(rng.integers(*(problem.t_s_range or (0, 1))))
    full, props = long_truth(p, params, t_s, horizon)
    static0 = np.vstack([props, full[t_s].reshape(2, -1)])
    if args.t_c:
        t_c = args.t_c
    else:
        data = args.data or _default_dir("data")
        if not (data / "m0" / "test").is_dir():
            raise CliError("automatic t_c needs the test set (--data) or an explicit --t-c", EXIT_CONFIG)
        te = D.load(data / "m0" / "test")
        prof = sfne.step_profile(ens.predict(te.in_static, te.in_dyn), te.out, ens.arch.out_channels)
        t_c = concat.find_cutoff(prof).t_c
    load = HarmonicLoad(1.0, float(params[0]))
    res = concat.concatenate(ens, lambda t: load.value(t + t_s * problem.dt), static0, horizon, t_c,
                             p.n_t, problem.dt, truth=full[t_s + 1:])
    res.to_csv(out / "long_run.csv", x=np.linspace(0.0, problem.length, problem.n_x))
    _write_config(out, "simulate", p, args, {"params": params.tolist(), "t_s": t_s, "t_c": t_c})
    print(f"horizon {horizon} steps, t_c {t_c}, {len(res.segments)} segments, e_r {res.error:.3f}%")
    for j, e in enumerate(res.segment_errors):
        print(f"  segment {j}: e_r {e:.3f}%")
    return EXIT_OK


# -- bench -------------------------------------------------------------------------------

def bench(p: presets.Preset, ensemble: sfne.Ensemble, samples: int, seed: int) -> dict:
    """Mean per-sample wall time of the oracle solve and of batched network inference."""
    if p.case == "ondemand":
        raise ConfigError("bench compares whole-field solves; use a field preset")
    problem = p.problem
    rng = np.random.default_rng(seed)
    draws = D.draw_parameters(problem, samples, "uniform", rng)
    t0 = time.perf_counter()
    recs = [D.solve_source(problem, d, p.n_t) for d in draws]
    oracle = (time.perf_counter() - t0) / samples
    static = np.stack([r[0] for r in recs])
    n_props = problem.n_props
    if p.windows == 0:
        static = static[:, :n_props] if n_props else np.zeros((samples, 1, problem.n_x))
    dyn = np.stack([r[1] for r in recs])
    model = ensemble.models[0]
    sfne.predict(model, static[:1], dyn[:1])            # warm-up
    t0 = time.perf_counter()
    sfne.predict(model, static, dyn)
    net = (time.perf_counter() - t0) / samples
    return {"case": p.case, "oracle_ms": oracle * 1e3, "sfne_ms": net * 1e3, "speedup": oracle / net}


def cmd_bench(args) -> int:
    p = _resolve(args)
    models = _need_dir(args.models or _default_dir("models"), "models")
    out = _need_dir(args.out or models, "output")
    ens, _ = _load_ensemble(models, 1)
    row = bench(p, ens, args.samples, args.seed)
    with open(out / "bench.csv", "w") as fh:
        fh.write("case,oracle_ms,sfne_ms,speedup\n")
        fh.write(f"{row['case']},{row['oracle_ms']:.6g},{row['sfne_ms']:.6g},{row['speedup']:.6g}\n")
    _write_config(out, "bench", p, args, {"result": row})
    print(f"case {row['case']}: oracle {row['oracle_ms']:.3f} ms, network {row['sfne_ms']:.3f} ms, "
          f"speedup {row['speedup']:.1f}x")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fena", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--preset", required=True, help="e.g. desk-case1 ... paper-case5")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--out", type=Path, help=f"output directory (default under ${DATA_ENV})")

    g = sub.add_parser("gen-data", help="generate, split and save member datasets")
    common(g)
    g.add_argument("--ensemble", type=int, help="number of independent member datasets")
    g.add_argument("--count", type=int, help="source samples per member (overrides the preset)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model per member dataset")
    common(t)
    t.add_argument("--data", type=Path)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--ensemble", type=int)
    t.add_argument("--resume", type=Path, help="continue member 0 from this checkpoint")
    t.add_argument("--epoch-limit", type=int, help="stop after this many epochs in this invocation")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="ensemble errors and per-step profile")
    common(e)
    e.add_argument("--data", type=Path)
    e.add_argument("--models", type=Path)
    e.add_argument("--ensemble", type=int, help="use only the first k members")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="long-horizon prediction by chaining windows")
    common(s)
    s.add_argument("--data", type=Path, help="datasets for the automatic cut-off")
    s.add_argument("--models", type=Path)
    s.add_argument("--ensemble", type=int)
    s.add_argument("--horizon", type=int, help="steps to predict")
    s.add_argument("--t-c", dest="t_c", type=int, help="fixed cut-off step")
    s.add_argument("--omega", type=float, help="load frequency (default: drawn from --seed)")
    s.add_argument("--t-s", dest="t_s", type=int, help="start step of the initial state")
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("bench", help="per-sample oracle vs network timing")
    common(b)
    b.add_argument("--models", type=Path)
    b.add_argument("--samples", type=int, default=20)
    b.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"fena: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ValueError) as exc:
        print(f"fena: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"fena: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetFormatError) as exc:
        print(f"fena: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
