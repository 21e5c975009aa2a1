"""
Command-line interface: ``gpda {train,predict,simulate,evaluate}``.

Exit codes: 0 ok, 1 I/O error, 2 invalid config or shape, 3 training did not
converge within max_sweeps, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .classifier import predict_batch
from .config import ConfigError, RunConfig, load_config, save_config
from .engine import FitOptions, fit, set_threads
from .experiment import run_split, stratified_folds, stratified_holdout
from .io import DataFormatError, ModelFormatError, load_dataset, load_model, save_dataset, save_model, write_table
from .sde import DiscretizationError
from .simulate import generate_split

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NOCONV, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("gpda")


class ShapeError(ValueError):
    pass


def _fit_options(cfg: RunConfig) -> FitOptions:
    f = cfg.fit
    return FitOptions(tol=f.tol, max_sweeps=f.max_sweeps, pure_cavi=f.pure_cavi, svb_steps=f.svb_steps,
                      svb_gtol=f.svb_gtol, svb_method=f.svb_method, threads=cfg.threads)


def _predict_kwargs(cfg: RunConfig) -> dict:
    p = cfg.predict
    return dict(tol=p.tol, max_rounds=p.max_rounds, threshold=p.threshold, starts=None if p.multistart else ())


def _load(cfg: RunConfig, labeled: bool):
    if not cfg.data_path:
        raise ConfigError("no data file given (--data or data_path)")
    d = cfg.data
    return load_dataset(cfg.data_path, labeled=labeled, delimiter=d.delimiter, header=d.header, delta=d.delta)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_fit_tables(out: Path, state, delimiter: str):
    T = state.T
    loc = np.arange(T)
    write_table(out / "selection.csv", {"location": loc, "probability": state.w}, delimiter)
    write_table(out / "mean_functions.csv", {"location": loc, "mu0": state.q_mu[0].mean,
                                             "mu1": state.q_mu[1].mean, "mu_shared": state.q_mu[2].mean}, delimiter)
    write_table(out / "length_scales.csv", {"location": loc, "R": state.q_R.mean, "nu0": state.q_nu[0].mean,
                                            "nu1": state.q_nu[1].mean, "nu_shared": state.q_nu[2].mean}, delimiter)
    trace = np.array(state.elbo_trace, dtype=np.float64)
    write_table(out / "elbo.csv", {"sweep": np.arange(1, trace.size + 1), "elbo": trace}, delimiter)
    summary = {
        "converged": state.converged,
        "n_sweeps": state.n_sweeps,
        "lambda": state.lam,
        "tau2": state.tau2,
        "eta_tilde": state.eta_tilde,
        "lambda_tilde": state.lambda_tilde,
        "alpha": state.ising.alpha,
        "beta": state.ising.beta,
        "n_selected": int(state.selected().sum()),
        "notes": sorted(set(state.notes)),
    }
    with open(out / "summary.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_train(cfg: RunConfig) -> int:
    data = _load(cfg, labeled=True)
    data.check_trainable()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        state = fit(data, cfg.hyper, _fit_options(cfg))
    out = _out_dir(cfg)
    _write_fit_tables(out, state, cfg.data.delimiter)
    save_model(cfg.model_path or out / "model.npz", state)
    if not state.converged:
        log.warning("no convergence after %d sweeps", state.n_sweeps)
        return EXIT_NOCONV
    return EXIT_OK


def cmd_predict(cfg: RunConfig) -> int:
    if not cfg.model_path:
        raise ConfigError("no model archive given (--model or model_path)")
    model = load_model(cfg.model_path)
    data = _load(cfg, labeled=cfg.data.predict_labeled)
    if data.T != model.T:
        raise ShapeError(f"data has T={data.T} but the model was fitted with T={model.T}")
    pred = predict_batch(data.X, model, **_predict_kwargs(cfg))
    out = _out_dir(cfg)
    write_table(out / "predictions.csv", {"row": np.arange(data.n), "xi1": pred.xi1,
                                          "label": pred.predicted_label, "qda_score": pred.qda_score},
                cfg.data.delimiter)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    sim = dataclasses.replace(cfg.simulate, seed=cfg.seed)
    train, test, truth = generate_split(sim)
    out = _out_dir(cfg)
    d = cfg.data
    save_dataset(out / "train.csv", train, d.delimiter, d.header)
    save_dataset(out / "test.csv", test, d.delimiter, d.header)
    cols = {"location": np.arange(sim.T), "gamma": truth.gamma_star, "mu0": truth.mu_star[0],
            "mu1": truth.mu_star[1], "sigma2_0": truth.sigma_star[0], "sigma2_1": truth.sigma_star[1]}
    if truth.R_star is not None:
        cols["R"] = truth.R_star
    write_table(out / "truth.csv", cols, d.delimiter)
    save_config(out / "simulate_config.json", dataclasses.replace(cfg, simulate=sim, out_dir=None))
    return EXIT_OK


def _metrics_rows(results, labels):
    cols = {"split": np.array(labels + ["median"], dtype=object)}
    for name in ("error", "tpr", "tnr", "mcc"):
        vals = np.array([getattr(r, name) for r in results], dtype=np.float64)
        med = np.nanmedian(vals) if np.any(np.isfinite(vals)) else np.nan
        cols[name] = np.append(vals, med)
    conv = np.array([int(r.converged) for r in results], dtype=np.int64)
    cols["converged"] = np.append(conv, int(conv.sum()))
    return cols


def cmd_evaluate(cfg: RunConfig) -> int:
    ev = cfg.evaluate
    options = _fit_options(cfg)
    pk = _predict_kwargs(cfg)
    results, labels = [], []
    if cfg.data_path:
        data = _load(cfg, labeled=True)
        data.check_trainable()
        if ev.folds:
            folds = stratified_folds(data.y, ev.folds, cfg.seed)
            splits = [(np.setdiff1d(np.arange(data.n), f), f) for f in folds]
            labels = [f"fold{k}" for k in range(len(splits))]
        else:
            seeds = np.random.SeedSequence(cfg.seed).generate_state(ev.replicates)
            splits = [stratified_holdout(data.y, ev.test_fraction, int(s)) for s in seeds]
            labels = [f"rep{r}" for r in range(len(splits))]
        for tr, te in splits:
            results.append(run_split(data.subset(tr), data.subset(te), cfg.hyper, options,
                                     selection_threshold=cfg.selection_threshold, predict_kwargs=pk))
    else:
        for r in range(ev.replicates):
            sim = dataclasses.replace(cfg.simulate, seed=cfg.seed + r)
            train, test, truth = generate_split(sim)
            results.append(run_split(train, test, cfg.hyper, options, truth.gamma_star,
                                     cfg.selection_threshold, pk))
            labels.append(f"rep{r}")
    out = _out_dir(cfg)
    write_table(out / "metrics.csv", _metrics_rows(results, labels), cfg.data.delimiter)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "predict": cmd_predict, "simulate": cmd_simulate, "evaluate": cmd_evaluate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpda", description="GP discriminant analysis for functional data")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--data", help="delimited data file")
        s.add_argument("--model", help="model archive path")
        s.add_argument("--out", help="output directory")
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int)
        s.add_argument("--delimiter", choices=("comma", "tab"))
        s.add_argument("--header", choices=("yes", "no"))
        s.add_argument("--folds", type=int)
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.data is not None:
        cfg.data_path = args.data
    if args.model is not None:
        cfg.model_path = args.model
    if args.out is not None:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    elif cfg.threads is None and os.environ.get("GPDA_THREADS"):
        try:
            cfg.threads = int(os.environ["GPDA_THREADS"])
        except ValueError:
            raise ConfigError("GPDA_THREADS must be an integer") from None
    if cfg.threads is not None and cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    if args.delimiter is not None:
        cfg.data.delimiter = args.delimiter
    if args.header is not None:
        cfg.data.header = args.header == "yes"
    if args.folds is not None:
        cfg.evaluate = dataclasses.replace(cfg.evaluate, folds=args.folds)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="gpda: %(levelname)s: %(message)s")
    try:
        cfg = resolve_config(args)
        set_threads(cfg.threads)
        return COMMANDS[args.command](cfg)
    except (np.linalg.LinAlgError, DiscretizationError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (ConfigError, DataFormatError, ModelFormatError, ShapeError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
