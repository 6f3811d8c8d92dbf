"""Command line harness: ``generate``, ``run``, ``analyze`` and ``compare``.

Configuration is a flat text file with one ``key = value`` per line (keys are
case-sensitive, ``#`` starts a comment); ``--set key=value`` overrides single
options.  The output directory can be redirected with the environment
variable ``SUBSAMPLING_MCMC_OUTPUT_DIR``.

Seeds: the master ``seed`` feeds ``numpy.random.SeedSequence(seed)`` whose two
children drive data generation and the fit.  The fit stream is split again
into clustering and chain streams; ``compare`` spawns one fit stream per
method in the order listed.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io as sio
from .diagnostics import ALPHAS, cost_table, default_grid, kde_grid, quantile_table, silverman_bandwidth
from .estimator import ExactSubsamplingMCMC, StandardMH
from .estimators import BOUND_METHODS, FAMILIES
from .exceptions import InfeasibleTargetError, InvalidConfigurationError, InvalidInputError
from .models import PARAM_NAMES, PARAMETERIZATIONS, AR1StudentT, generate_ar1

OUTPUT_DIR_ENV = "SUBSAMPLING_MCMC_OUTPUT_DIR"
log = logging.getLogger("subsampling_mcmc")

DEFAULT_THETA = {"M1": (0.3, 0.6), "M2": (0.3, 0.99)}
DEFAULT_K = {"M1": "1%", "M2": "3.2%"}
ALIASES = {"N": "n_iter", "E_G": "expected_G", "target_sigma_LL2": "target_sigma2_LL"}
MODE_ALIASES = {
    "uncorrelated": "uncorrelated", "uncorr": "uncorrelated",
    "corr_g": "corr_g", "corrg": "corr_g",
    "corr_gu": "corr_gu", "corrgu": "corr_gu", "corr_g+u": "corr_gu",
}


@dataclass
class ExperimentConfig:
    model: str = "M1"
    theta_true: tuple = None
    nu: float = 5.0
    n: int = 10_000
    seed: int = 0
    K: str = None
    method: str = "pmmh"
    family: str = "poisson"
    mode: str = "corr_g"
    sampling: str = None
    expected_G: float = None
    p_tilde: float = 0.99
    target_sigma2_LL: float = None
    m_b: int = None
    bound_method: str = "empirical"
    phi: float = 0.9999
    kappa: float = 0.9863
    n_iter: int = 10_000
    burn_in: int = None
    target_accept: float = None
    output_dir: str = "output"
    methods: tuple = ("mh", "poisson:uncorrelated", "poisson:corr_g", "rg:corr_g")
    lines: dict = field(default_factory=dict, repr=False, compare=False)

    def resolved(self, method=None, family=None, mode=None) -> "ExperimentConfig":
        """Copy with method overrides and mode-dependent defaults filled in.

        Unless set explicitly, correlated modes use ``E[G] = 50`` and a target
        of 400; the uncorrelated mode ``E[G] = 5`` and 2.1.
        """
        cfg = copy.copy(self)
        cfg.method = method or self.method
        cfg.family = family or self.family
        cfg.mode = mode or self.mode
        correlated = cfg.mode != "uncorrelated"
        if cfg.theta_true is None:
            cfg.theta_true = DEFAULT_THETA[cfg.model]
        if cfg.K is None:
            cfg.K = DEFAULT_K[cfg.model]
        if "expected_G" not in self.lines:
            cfg.expected_G = 50.0 if correlated else 5.0
        if "target_sigma2_LL" not in self.lines:
            cfg.target_sigma2_LL = 400.0 if correlated else 2.1
        if "target_accept" not in self.lines:
            cfg.target_accept = 0.35 if cfg.method == "mh" else 0.15
        return cfg

    def echo(self) -> dict:
        out = asdict(self)
        out.pop("lines")
        return out


def _parse_pair(text):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError("expected two comma-separated numbers")
    return tuple(float(p) for p in parts)


def _parse_K(text):
    t = text.strip()
    if t.endswith("%"):
        pct = float(t[:-1])
        if not 0 < pct <= 100:
            raise ValueError("percent must lie in (0, 100]")
        return t
    k = int(t)
    if k < 1:
        raise ValueError("cluster count must be >= 1")
    return t


def _parse_methods(text):
    items = tuple(m.strip() for m in text.split(",") if m.strip())
    for item in items:
        _split_method(item)
    if not items:
        raise ValueError("empty method list")
    return items


def _split_method(item):
    if item == "mh":
        return "mh", None, None
    if ":" not in item:
        raise ValueError(f"method {item!r} is neither 'mh' nor 'family:mode'")
    family, mode = (s.strip().lower() for s in item.split(":", 1))
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    if mode not in MODE_ALIASES:
        raise ValueError(f"unknown mode {mode!r}")
    return "pmmh", family, MODE_ALIASES[mode]


def _choice(options):
    def parse(text):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {sorted(options)}")
        return t
    return parse


def _optional(parse):
    def inner(text):
        return None if text.strip().lower() in ("", "none", "auto") else parse(text)
    return inner


def _positive(parse):
    def inner(text):
        v = parse(text)
        if not v > 0:
            raise ValueError("must be positive")
        return v
    return inner


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise ValueError("must be >= 0")
    return v


def _unit(text):
    v = float(text)
    if not 0 <= v <= 1:
        raise ValueError("must lie in [0, 1]")
    return v


def _open_unit(text):
    v = float(text)
    if not 0 < v < 1:
        raise ValueError("must lie in (0, 1)")
    return v


def _mode(text):
    t = text.strip().lower()
    if t not in MODE_ALIASES:
        raise ValueError(f"expected one of {sorted(set(MODE_ALIASES.values()))}")
    return MODE_ALIASES[t]


PARSERS = {
    "model": _choice(PARAMETERIZATIONS),
    "theta_true": _parse_pair,
    "nu": _positive(float),
    "n": lambda t: _check(int(t) >= 2, int(t), "n must be >= 2"),
    "seed": _nonneg_int,
    "K": _parse_K,
    "method": _choice({"pmmh", "mh"}),
    "family": _choice(FAMILIES),
    "mode": _mode,
    "sampling": _optional(_choice({"fixed", "bernoulli"})),
    "expected_G": _positive(float),
    "p_tilde": _open_unit,
    "target_sigma2_LL": _positive(float),
    "m_b": _optional(_positive(int)),
    "bound_method": _choice(BOUND_METHODS),
    "phi": _unit,
    "kappa": _unit,
    "n_iter": _nonneg_int,
    "burn_in": _optional(_nonneg_int),
    "target_accept": _open_unit,
    "output_dir": str,
    "methods": _parse_methods,
}


def _check(ok, value, message):
    if not ok:
        raise ValueError(message)
    return value


def build_config(raw: sio.RawConfig) -> ExperimentConfig:
    """Typed, validated configuration; errors name the offending line."""
    cfg = ExperimentConfig()
    lines = {}
    for key, text in raw.values.items():
        name = ALIASES.get(key, key)
        if name not in PARSERS:
            raise raw.error(key, "unknown option")
        try:
            value = PARSERS[name](text)
        except ValueError as exc:
            raise raw.error(key, f"invalid value {text!r} ({exc})") from None
        setattr(cfg, name, value)
        lines[name] = raw.lines.get(key)
    cfg.lines = lines
    if cfg.model == "M2" and cfg.theta_true is not None and not 0 <= cfg.theta_true[1] < 1:
        raise raw.error("theta_true", "rho must lie in [0, 1)")
    if cfg.mode == "corr_gu" and cfg.sampling == "fixed":
        raise raw.error("sampling", "corr_gu needs Bernoulli batches")
    return cfg


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Config file (optional) plus ``key=value`` overrides; the env var wins for output_dir."""
    raw = sio.read_config(path) if path else sio.parse_config_text("", "<defaults>")
    if overrides:
        raw = sio.merge_configs(raw, sio.parse_config_text("\n".join(overrides), "<--set>"))
    cfg = build_config(raw)
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        cfg.output_dir = env
    return cfg


# ---------------------------------------------------------------- commands


def _seeds(cfg):
    data_ss, fit_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    return data_ss, fit_ss


def _ss_int(ss) -> int:
    return int(ss.generate_state(1)[0])


def default_dataset_path(cfg) -> Path:
    return Path(cfg.output_dir) / f"data_{cfg.model}_n{cfg.n}_seed{cfg.seed}.csv"


def cmd_generate(cfg: ExperimentConfig, out=None) -> Path:
    cfg = cfg.resolved()
    path = Path(out) if out else default_dataset_path(cfg)
    data_ss, _ = _seeds(cfg)
    t0 = time.perf_counter()
    model = AR1StudentT(cfg.model, cfg.nu)
    data = generate_ar1(cfg.n, model, cfg.theta_true, _ss_int(data_ss))
    manifest = {"model": cfg.model, "theta_true": list(cfg.theta_true), "nu": cfg.nu, "seed": cfg.seed,
                "param_names": list(PARAM_NAMES[cfg.model])}
    try:
        sio.write_dataset(path, data, manifest)
    except OSError as exc:
        raise InvalidInputError(f"cannot write dataset to {path}: {exc}") from exc
    log.info("generate: %d observations -> %s (%.2fs)", data.n, path, time.perf_counter() - t0)
    return path


def method_label(method, family=None, mode=None) -> str:
    return "mh" if method == "mh" else f"{family}-{mode}"


def _fit(cfg: ExperimentConfig, data, random_state):
    if cfg.method == "mh":
        est = StandardMH(cfg.model, cfg.nu, cfg.n_iter, cfg.burn_in, cfg.target_accept, random_state)
    else:
        K = cfg.K
        n_clusters = float(K[:-1]) / 100.0 if K.endswith("%") else int(K)
        est = ExactSubsamplingMCMC(
            parameterization=cfg.model, nu=cfg.nu, family=cfg.family, mode=cfg.mode,
            sampling=cfg.sampling, expected_G=cfg.expected_G, target_sigma2_LL=cfg.target_sigma2_LL,
            m_b=cfg.m_b, p_tilde=cfg.p_tilde, bound_method=cfg.bound_method, n_clusters=n_clusters,
            phi=cfg.phi, kappa=cfg.kappa, n_iter=cfg.n_iter, burn_in=cfg.burn_in,
            target_accept=cfg.target_accept, random_state=random_state,
        )
    return est.fit(data)


def _load_data(cfg, data_path):
    path = Path(data_path) if data_path else default_dataset_path(cfg)
    if not path.exists():
        raise InvalidInputError(f"dataset {path} not found; run 'generate' first")
    data = sio.read_dataset(path)
    manifest = sio.read_manifest(path)
    if manifest.get("model") not in (None, cfg.model):
        raise InvalidConfigurationError(
            f"dataset was generated under {manifest['model']}, config asks for {cfg.model}"
        )
    return data, path


def _run_one(cfg, data, data_path, random_state, out):
    label = method_label(cfg.method, cfg.family, cfg.mode)
    t0 = time.perf_counter()
    est = _fit(cfg, data, random_state)
    chain = est.chain_
    meta = dict(chain.metadata)
    meta.update(label=label, config=cfg.echo(), dataset=str(data_path), dataset_sha256=sio.file_sha256(data_path),
                acceptance_rate=chain.acceptance_rate, negative_fraction=chain.negative_fraction,
                wall_seconds=time.perf_counter() - t0)
    sio.write_chain(out, chain, PARAM_NAMES[cfg.model], meta)
    for stage, secs in meta.get("stage_seconds", {}).items():
        log.info("run %s: stage %s %.2fs", label, stage, secs)
    log.info("run %s: %d iterates -> %s", label, chain.n_iter, out)
    return Path(out)


def cmd_run(cfg: ExperimentConfig, data_path=None, out=None) -> Path:
    cfg = cfg.resolved()
    data, data_path = _load_data(cfg, data_path)
    _, fit_ss = _seeds(cfg)
    label = method_label(cfg.method, cfg.family, cfg.mode)
    out = Path(out) if out else Path(cfg.output_dir) / f"chain_{label}.csv"
    return _run_one(cfg, data, data_path, _ss_int(fit_ss), out)


def cmd_analyze(chain_paths, baseline_path, out_dir) -> dict:
    """Quantile table, cost table and KDE grids relative to an exact-MH baseline."""
    out_dir = Path(out_dir)
    baseline, names = sio.read_chain(baseline_path)
    if baseline.n_iter < 100:
        raise InvalidInputError("baseline chain needs at least 100 iterates")
    chains = {}
    for p in chain_paths:
        chain, chain_names = sio.read_chain(p)
        if chain_names != names:
            raise InvalidConfigurationError(f"{p}: parameters {chain_names} differ from baseline {names}")
        if chain.metadata.get("parameterization") != baseline.metadata.get("parameterization"):
            raise InvalidConfigurationError(f"{p}: parameterization differs from the baseline")
        label = chain.metadata.get("label") or Path(p).stem
        chains[label] = chain
    base_label = baseline.metadata.get("label", "mh")
    chains = {base_label: baseline, **{k: v for k, v in chains.items() if v is not baseline}}

    long_rows = quantile_table(chains, baseline, param_names=names)
    wide = []
    for method in chains:
        for name in names:
            row = {"method": method, "parameter": name}
            for r in long_rows:
                if r["method"] == method and r["parameter"] == name:
                    row[f"mce_{r['alpha']:.2f}"] = r["mce"]
                    row[f"ise_{r['alpha']:.2f}"] = r["ise"]
            wide.append(row)
    qcols = ["method", "parameter"] + [f"{k}_{a:.2f}" for a in ALPHAS for k in ("mce", "ise")]
    outputs = {"quantile_table": sio.write_rows(out_dir / "quantile_table.csv", wide, qcols)}

    crows = cost_table(chains, baseline, param_names=names)
    ccols = ["method", "parameter", "sampling_fraction", "IF", "ED_rel", "sign_rate"]
    outputs["cost_table"] = sio.write_rows(out_dir / "cost_table.csv", crows, ccols)

    for j, name in enumerate(names):
        grid = default_grid(baseline.theta[:, j], silverman_bandwidth(baseline.theta[:, j]))
        for method, chain in chains.items():
            dens = kde_grid(chain.theta[:, j], grid)
            rows = [{"grid": g, "density": d} for g, d in zip(grid, dens)]
            key = f"kde_{method}_{name}"
            outputs[key] = sio.write_rows(out_dir / f"{key}.csv", rows, ["grid", "density"])
    log.info("analyze: %d chains -> %s", len(chains), out_dir)
    return outputs


def cmd_compare(cfg: ExperimentConfig, data_path=None) -> dict:
    """Run every method in ``methods`` on one dataset, then analyze against MH."""
    if "mh" not in cfg.methods:
        raise InvalidConfigurationError("methods must include the 'mh' baseline")
    base = cfg.resolved()
    data, data_path = _load_data(base, data_path)
    _, fit_ss = _seeds(base)
    streams = fit_ss.spawn(len(cfg.methods))
    paths = {}
    for item, ss in zip(cfg.methods, streams):
        method, family, mode = _split_method(item)
        mcfg = cfg.resolved(method, family, mode)
        if mode == "corr_gu":
            mcfg.sampling = "bernoulli"
        elif mcfg.sampling == "bernoulli" and "sampling" not in cfg.lines:
            mcfg.sampling = None
        label = method_label(method, family, mode)
        out = Path(cfg.output_dir) / f"chain_{label}.csv"
        paths[label] = _run_one(mcfg, data, data_path, _ss_int(ss), out)
    others = [p for label, p in paths.items() if label != "mh"]
    return cmd_analyze(others, paths["mh"], Path(cfg.output_dir) / "analysis")


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subsampling-mcmc", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration option (repeatable)")

    p = sub.add_parser("generate", help="simulate an AR(1)-t dataset")
    common(p)
    p.add_argument("--out", help="dataset path (default: <output_dir>/data_<model>_n<n>_seed<seed>.csv)")

    p = sub.add_parser("run", help="run one sampler and write its chain")
    common(p)
    p.add_argument("--data", help="dataset CSV (default: the 'generate' path)")
    p.add_argument("--out", help="chain CSV path")

    p = sub.add_parser("analyze", help="tables and KDE grids against an exact-MH baseline")
    p.add_argument("chains", nargs="*", help="chain CSV files")
    p.add_argument("--baseline", required=True, help="exact-MH chain CSV")
    p.add_argument("--out-dir", default=None, help="output directory (default: $%s or 'analysis')" % OUTPUT_DIR_ENV)

    p = sub.add_parser("compare", help="run the method matrix and analyze it")
    common(p)
    p.add_argument("--data", help="dataset CSV (default: the 'generate' path)")
    return parser


def _error_payload(exc) -> dict:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, InfeasibleTargetError):
        payload["stats"] = exc.stats
    line = getattr(exc, "line", None)
    if line is not None:
        payload["line"] = line
    return payload


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "analyze":
            out_dir = args.out_dir or os.environ.get(OUTPUT_DIR_ENV) or "analysis"
            outputs = cmd_analyze(args.chains, args.baseline, out_dir)
            print(json.dumps({k: str(v) for k, v in outputs.items()}, indent=2))
            return 0
        cfg = load_config(args.config, [s.replace("=", " = ", 1) for s in args.set])
        if args.command == "generate":
            print(cmd_generate(cfg, args.out))
        elif args.command == "run":
            print(cmd_run(cfg, args.data, args.out))
        else:
            outputs = cmd_compare(cfg, args.data)
            print(json.dumps({k: str(v) for k, v in outputs.items()}, indent=2))
        return 0
    except (ValueError, ZeroDivisionError, OSError, KeyError) as exc:
        print(json.dumps(_error_payload(exc)), file=sys.stderr)
        return 2 if isinstance(exc, (InvalidInputError, InvalidConfigurationError)) else 1


if __name__ == "__main__":
    sys.exit(main())
