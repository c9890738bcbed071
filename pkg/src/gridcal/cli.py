"""Command-line pipeline over a single workspace directory.

    gridcal synth     --out run            -> run/data/
    gridcal train     --out run            -> run/models/
    gridcal estimate  --out run --method M -> run/estimates/M/{train,val,test}/
    gridcal calibrate --out run --method M -> run/intervals/M/
    gridcal evaluate  --out run            -> run/metrics/
    gridcal outliers  --out run            -> run/outliers/M/
    gridcal report    --out run            -> run/report/

Commands talk to each other only through these files.  Every output
directory also gets ``config.ini`` (the fully resolved settings, with paths
relative to the workspace) and ``status.txt``.  Rerunning a command with
``--config <dir>/config.ini --out <new workspace>`` redoes it exactly.

numpy is imported lazily so that ``--threads`` can cap BLAS threads first.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys
from pathlib import Path

METHODS = ("ens", "mcbn", "tta", "patches", "tta-ens", "patches-ens", "cub")
SPLITS = ("train", "val", "test")
COMBINED = ("tta-ens", "patches-ens")

EXIT_CODES = {
    "INVALID_FLAG": 2,
    "INVALID_CONFIG": 2,
    "MISSING_INPUT": 3,
    "SHAPE_MISMATCH": 4,
    "UNSUPPORTED": 5,
    "TRAINING_FAILED": 6,
    "INTERNAL": 1,
}

# options holding directories; echoed relative to the workspace
PATH_OPTIONS = ("data", "models")
# options that are not part of the echoed run settings
NOT_ECHOED = ("command", "config", "out", "func")


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("INVALID_FLAG", message)


# ---------------------------------------------------------------------------
# argument handling

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _seed(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def _unit_interval(text):
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1), got {text}")
    return v


def _common(p):
    p.add_argument("--config", help="sectioned key = value file; the [command] section supplies defaults")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="BLAS thread cap (fallback: GRIDCAL_THREADS, then 1)")
    p.add_argument("--out", default=".", help="workspace directory")


def _inputs(p, *names):
    for name in names:
        p.add_argument(f"--{name}", default=name, help=f"{name} directory (default: <out>/{name})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gridcal", description="Uncertainty quantification for gridded traffic forecasts.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic city")
    _common(p)
    p.add_argument("--days", type=_positive_int, default=10)
    p.add_argument("--preset", choices=("default", "sparse"), default="default")
    p.add_argument("--height", type=_positive_int)
    p.add_argument("--width", type=_positive_int)
    p.add_argument("--arterials", type=int)
    p.add_argument("--side-roads", type=int)
    p.add_argument("--zero-below", type=float)
    p.add_argument("--shift", action="append", default=[], metavar="R0,R1,C0,C1:ONSET:KIND:MAG",
                   help="distribution shift; repeatable")

    p = sub.add_parser("train", help="train an ensemble of predictors")
    _common(p)
    _inputs(p, "data")
    p.add_argument("--arch", choices=("conv", "linear", "persistence"), default="conv")
    p.add_argument("--members", type=_positive_int, default=5)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    p.add_argument("--batch-size", type=_positive_int, default=12)
    p.add_argument("--hidden", type=_positive_int, default=16)
    p.add_argument("--horizon", type=int, default=5, help="target index, 0..5 (5 = 60 minutes)")
    p.add_argument("--scheme", default="6,2,2", help="days per train,val,test split")
    p.add_argument("--window-step", type=_positive_int, default=1, help="use every n-th window")

    p = sub.add_parser("estimate", help="run an uncertainty estimator over the splits")
    _common(p)
    _inputs(p, "data", "models")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--splits", default="train,val,test")
    p.add_argument("--window-step", type=_positive_int, default=1)
    p.add_argument("--members", type=int, default=0, help="use the first M members (0 = all)")
    p.add_argument("--mcbn-passes", type=_positive_int, default=10)
    p.add_argument("--patch-size", type=_positive_int, default=16)
    p.add_argument("--stride", type=_positive_int, default=4)
    p.add_argument("--chunk", type=_positive_int, default=16, help="windows per forward batch")

    p = sub.add_parser("calibrate", help="conformal calibration on the validation split")
    _common(p)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--alpha", type=_unit_interval, default=0.1)
    p.add_argument("--mask", choices=("zero", "none"), default="zero")
    p.add_argument("--pooled", action="store_true", help="one quantile for all cells")

    p = sub.add_parser("evaluate", help="metric table over calibrated methods")
    _common(p)
    p.add_argument("--methods", default="", help="comma list (default: every calibrated method)")
    p.add_argument("--mask", choices=("zero", "none", "both"), default="both")
    p.add_argument("--dataset", default="synthetic")

    p = sub.add_parser("outliers", help="flag test samples with unusual epistemic uncertainty")
    _common(p)
    p.add_argument("--method", choices=METHODS, default="ens")
    p.add_argument("--epsilon", type=_unit_interval, default=0.001)
    p.add_argument("--time-index", type=int, default=None, help="only windows starting at this step of the day")
    p.add_argument("--literal-direction", action="store_true", help="flag p >= epsilon instead of p <= epsilon")

    p = sub.add_parser("report", help="CSV + SVG figures from earlier outputs")
    _common(p)
    p.add_argument("what", nargs="?", choices=("coverage", "metrics", "outliers", "all"), default="all")
    return parser


def _convert(action, raw: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        states = configparser.ConfigParser.BOOLEAN_STATES
        if raw.lower() not in states:
            raise CliError("INVALID_CONFIG", f"{action.dest} = {raw}: expected true or false")
        return states[raw.lower()]
    if isinstance(action, argparse._AppendAction):
        return [s.strip() for s in raw.replace(";", "\n").splitlines() if s.strip()]
    if raw == "" and action.default is None:
        return None
    try:
        value = action.type(raw) if action.type else raw
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise CliError("INVALID_CONFIG", f"{action.dest} = {raw}: {exc}") from None
    if action.choices is not None and value not in action.choices:
        raise CliError("INVALID_CONFIG", f"{action.dest} = {raw}: choose from {list(action.choices)}")
    return value


def _config_defaults(sub: argparse.ArgumentParser, command: str, path: str) -> dict:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",))
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise CliError("MISSING_INPUT", f"config file {path} not found") from None
    except configparser.Error as exc:
        raise CliError("INVALID_CONFIG", str(exc).splitlines()[0]) from None
    actions = {a.dest: a for a in sub._actions}
    values = {}
    sections = [s for s in ("common", command) if cp.has_section(s)]
    for section in sections:
        for key, raw in cp.items(section):
            dest = key.replace("-", "_")
            if dest not in actions or dest in ("help", "config", "command"):
                raise CliError("INVALID_CONFIG", f"unknown key {key!r} in [{section}]")
            values[dest] = _convert(actions[dest], raw)
    return values


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    pre = _Parser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    sub = None
    if known.command in parser._subparsers._group_actions[0].choices:
        sub = parser._subparsers._group_actions[0].choices[known.command]
    config_paths = {}
    if known.config and sub is not None:
        defaults = _config_defaults(sub, known.command, known.config)
        # path options from a config file are relative to the workspace
        config_paths = {k: defaults[k] for k in PATH_OPTIONS if k in defaults}
        sub.set_defaults(**defaults)
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
    args = parser.parse_args(argv)
    out = Path(args.out)
    for name in PATH_OPTIONS:
        if not hasattr(args, name):
            continue
        value = getattr(args, name)
        from_config = name in config_paths and value == config_paths[name]
        if value == name or from_config:
            setattr(args, name, str(out / value) if not Path(value).is_absolute() else value)
    if args.threads is None:
        env = os.environ.get("GRIDCAL_THREADS")
        try:
            args.threads = _positive_int(env) if env else 1
        except (ValueError, argparse.ArgumentTypeError):
            raise CliError("INVALID_FLAG", f"GRIDCAL_THREADS={env} is not a positive integer") from None
    return args


def echo_config(args, path: Path) -> None:
    """Write the resolved settings as a one-section config file."""
    out = Path(args.out).resolve()
    lines = [f"[{args.command}]"]
    for key, value in sorted(vars(args).items()):
        if key in NOT_ECHOED:
            continue
        if key in PATH_OPTIONS:
            p = Path(value).resolve()
            value = p.relative_to(out).as_posix() if p.is_relative_to(out) else str(p)
        if isinstance(value, list):
            value = "; ".join(value)
        elif isinstance(value, bool):
            value = str(value).lower()
        elif value is None:
            value = ""
        lines.append(f"{key.replace('_', '-')} = {value}")
    path.write_text("\n".join(lines) + "\n")


def _set_threads(n: int) -> None:
    if "numpy" in sys.modules:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


# ---------------------------------------------------------------------------
# shared helpers

def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError("MISSING_INPUT", f"{what} not found at {path}")
    return path


def _finish(args, outdir: Path, extra: dict | None = None) -> None:
    from .io import write_kv

    echo_config(args, outdir / "config.ini")
    files = sorted(p.relative_to(outdir).as_posix() for p in outdir.rglob("*")
                   if p.is_file() and p.name != "status.txt")
    write_kv(outdir / "status.txt", {"command": args.command, "status": "ok", "exit_code": 0,
                                     **(extra or {}), "outputs": " ".join(files)})


def _parse_scheme(text: str):
    parts = [s.strip() for s in text.split(",")]
    try:
        return tuple(float(s) if "." in s else int(s) for s in parts)
    except ValueError:
        raise CliError("INVALID_FLAG", f"bad split scheme {text!r}") from None


def _parse_shift(text: str):
    from .synth import ShiftSpec

    try:
        region, onset, kind, mag = text.split(":")
        r = tuple(int(v) for v in region.split(","))
        return ShiftSpec(r, int(onset), kind, float(mag))
    except (ValueError, TypeError) as exc:
        raise CliError("INVALID_FLAG", f"bad shift {text!r}: {exc}") from None


def _load_models(models_dir: Path):
    from .io import read_kv
    from .predictor import EnsembleModel, load_predictor

    meta = read_kv(_require(models_dir / "ensemble.txt", "ensemble manifest"))
    m = int(meta["members"])
    members = [load_predictor(_require(models_dir / f"member_{i:02d}.grt", "checkpoint")) for i in range(m)]
    seeds = [int(s) for s in meta["seeds"].split()]
    return EnsembleModel(members, seeds), meta


def _load_estimate(directory: Path):
    from .io import read_kv, read_tensor

    _require(directory / "meta.txt", "estimate")
    arrays = {name: read_tensor(directory / f"{name}.grt") for name in ("mu", "sigma", "truth")}
    shapes = {a.shape for a in arrays.values()}
    if len(shapes) != 1:
        raise CliError("SHAPE_MISMATCH", f"mu/sigma/truth shapes differ in {directory}: {sorted(shapes)}")
    for name in ("sigma_epi", "sigma_alea"):
        if (directory / f"{name}.grt").exists():
            arrays[name] = read_tensor(directory / f"{name}.grt")
    return arrays, read_kv(directory / "meta.txt")


def _zero_mask(truth):
    from .tensor import activity_mask

    return activity_mask(truth)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> Path:
    import dataclasses

    from .synth import SPARSE_TASK, CityConfig, generate

    base = SPARSE_TASK if args.preset == "sparse" else CityConfig()
    overrides = {"seed": args.seed}
    for flag, field in (("height", "height"), ("width", "width"), ("arterials", "n_arterials"),
                        ("side_roads", "n_side_roads"), ("zero_below", "zero_below")):
        if getattr(args, flag) is not None:
            overrides[field] = getattr(args, flag)
    try:
        cfg = dataclasses.replace(base, **overrides)
        ds = generate(cfg, args.days, [_parse_shift(s) for s in args.shift])
    except ValueError as exc:
        raise CliError("INVALID_FLAG", str(exc)) from None
    outdir = Path(args.out) / "data"
    ds.save(outdir)
    _finish(args, outdir, {"n_days": ds.n_days, "grid": f"{cfg.height}x{cfg.width}"})
    return outdir


def cmd_train(args) -> Path:
    import dataclasses

    from .io import write_kv
    from .predictor import TrainConfig, TrainingError, make_predictor, save_predictor, train
    from .predictor import derive_seeds
    from .synth import SynthDataset, train_val_test_split

    _require(Path(args.data) / "manifest.txt", "dataset manifest")
    ds = SynthDataset.load(args.data)
    if not 0 <= args.horizon <= 5:
        raise CliError("INVALID_FLAG", f"--horizon must be in 0..5, got {args.horizon}")
    try:
        cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                          seed=args.seed, optimizer=args.optimizer)
        tr, _, _ = train_val_test_split(ds, _parse_scheme(args.scheme), stride=args.window_step)
    except ValueError as exc:
        raise CliError("INVALID_FLAG", str(exc)) from None
    outdir = Path(args.out) / "models"
    outdir.mkdir(parents=True, exist_ok=True)
    kwargs = {"horizon": args.horizon}
    if args.arch != "persistence":
        kwargs["n_channels"] = ds.days[0].shape[-1]
    if args.arch == "conv":
        kwargs["hidden"] = args.hidden
    seeds = derive_seeds(args.seed, args.members)
    rows = []
    for i, s in enumerate(seeds):
        model = make_predictor(args.arch, seed=s, **kwargs)
        try:
            _, trace = train(model, tr, dataclasses.replace(cfg, seed=s))
        except TrainingError as exc:
            raise CliError("TRAINING_FAILED", f"member {i}: {exc}") from None
        save_predictor(model, outdir / f"member_{i:02d}.grt")
        rows += [(i, e, f"{v:.10g}") for e, v in enumerate(trace)]
    with (outdir / "losses.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["member", "epoch", "loss"])
        w.writerows(rows)
    write_kv(outdir / "ensemble.txt", {
        "arch": args.arch, "members": args.members, "seeds": " ".join(map(str, seeds)),
        "scheme": args.scheme, "horizon": args.horizon, "train_windows": len(tr),
    })
    _finish(args, outdir, {"members": args.members})
    return outdir


class _LazyInputs:
    """Sequence view of window inputs without materializing them all."""

    def __init__(self, samples):
        self.samples = samples

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i].inputs


def _estimate_split(args, method, ens, samples, train_samples, horizon):
    """Return dict of arrays (mu, sigma, truth, optional sigma_epi/sigma_alea) for a split."""
    import numpy as np

    from .estimators import (PatchConfig, UQEstimate, cub_estimate, ensemble_estimate, mcbn_estimate,
                             patch_estimate, patches_ens_estimate, tta_ens_estimate, tta_estimate)

    model = ens.members[0]
    patch = PatchConfig(args.patch_size, args.stride)
    parts = {"mu": [], "sigma": [], "sigma_epi": [], "sigma_alea": []}
    for k in range(0, len(samples), args.chunk):
        block = samples[k:k + args.chunk]
        x = np.stack([s.inputs for s in block])
        if method in ("ens", "cub"):
            est = ensemble_estimate(ens, x)
        elif method == "mcbn":
            # the same seed per chunk gives every window the same reference batches
            est = mcbn_estimate(model, x, _LazyInputs(train_samples), m=args.mcbn_passes,
                                batch_size=getattr(model, "train_batch_size", 12), rng=args.seed)
        elif method == "tta":
            est = tta_estimate(model, x)
        elif method == "patches":
            ests = [patch_estimate(model, xi, patch) for xi in x]
            est = UQEstimate(np.stack([e.mu for e in ests]), np.stack([e.sigma for e in ests]),
                             "aleatoric", "patches", ests[0].m)
        elif method == "tta-ens":
            est, epi, alea = tta_ens_estimate(ens, x)
        else:
            ests = [patches_ens_estimate(ens, xi, patch) for xi in x]
            est, epi, alea = (UQEstimate(np.stack([e[i].mu for e in ests]), np.stack([e[i].sigma for e in ests]),
                                         ests[0][i].kind, ests[0][i].method) for i in range(3))
        parts["mu"].append(est.mu)
        parts["sigma"].append(est.sigma)
        if method in COMBINED:
            parts["sigma_epi"].append(epi.sigma)
            parts["sigma_alea"].append(alea.sigma)
    out = {k: np.concatenate(v).astype(np.float32) for k, v in parts.items() if v}
    if method == "cub":
        c = cub_estimate(out["mu"])
        out["sigma"] = c.sigma.astype(np.float32)
    out["truth"] = np.stack([s.target(horizon) for s in samples]).astype(np.float32)
    return out


def cmd_estimate(args) -> Path:
    from .estimators import PatchConfig
    from .io import write_kv, write_tensor
    from .predictor import EnsembleModel, UnsupportedCapabilityError
    from .synth import SynthDataset, train_val_test_split

    _require(Path(args.data) / "manifest.txt", "dataset manifest")
    ds = SynthDataset.load(args.data)
    ens, meta = _load_models(Path(args.models))
    if args.members < 0 or args.members > len(ens):
        raise CliError("INVALID_FLAG", f"--members must be in 0..{len(ens)}, got {args.members}")
    if args.members:
        ens = EnsembleModel(ens.members[:args.members], ens.member_seeds[:args.members])
    if args.method in ("ens", "tta-ens", "patches-ens") and len(ens) < 2:
        raise CliError("UNSUPPORTED", f"{args.method} needs at least 2 ensemble members")
    splits = [s.strip() for s in args.splits.split(",") if s.strip()]
    if not splits or any(s not in SPLITS for s in splits):
        raise CliError("INVALID_FLAG", f"--splits must be a comma list from {SPLITS}, got {args.splits!r}")
    if args.method in ("patches", "patches-ens"):
        try:
            PatchConfig(args.patch_size, args.stride).validate(*ds.road_class.shape)
        except ValueError as exc:
            raise CliError("INVALID_FLAG", str(exc)) from None
    n_ch = getattr(ens.members[0], "n_channels", None)
    if n_ch is not None and n_ch != ds.days[0].shape[-1]:
        raise CliError("SHAPE_MISMATCH", f"models expect {n_ch} channels, dataset has {ds.days[0].shape[-1]}")
    tr, va, te = train_val_test_split(ds, _parse_scheme(meta["scheme"]), stride=args.window_step)
    by_name = {"train": tr, "val": va, "test": te}
    train_samples = train_val_test_split(ds, _parse_scheme(meta["scheme"]))[0]
    horizon = int(meta["horizon"])
    outdir = Path(args.out) / "estimates" / args.method
    for name in splits:
        samples = by_name[name]
        try:
            arrays = _estimate_split(args, args.method, ens, samples, train_samples, horizon)
        except UnsupportedCapabilityError as exc:
            raise CliError("UNSUPPORTED", str(exc)) from None
        d = outdir / name
        d.mkdir(parents=True, exist_ok=True)
        for key, arr in arrays.items():
            write_tensor(arr, d / f"{key}.grt")
        with (d / "windows.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample", "day", "start"])
            w.writerows((i, s.day, s.start) for i, s in enumerate(samples))
        kind = {"ens": "epistemic", "mcbn": "epistemic", "cub": "epistemic",
                "tta": "aleatoric", "patches": "aleatoric"}.get(args.method, "predictive")
        write_kv(d / "meta.txt", {"method": args.method, "kind": kind, "M": len(ens),
                                  "split": name, "samples": len(samples), "horizon": horizon})
    _finish(args, outdir, {"method": args.method, "splits": ",".join(splits)})
    return outdir


def cmd_calibrate(args) -> Path:
    import numpy as np

    from .conformal import (build_interval, calibrate_qhat, conformity_scores, empirical_coverage,
                            nominal_coverage_law, quantile_rank)
    from .io import write_kv, write_tensor

    src = Path(args.out) / "estimates" / args.method
    cal, _ = _load_estimate(src / "val")
    test, _ = _load_estimate(src / "test")
    if cal["mu"].shape[1:] != test["mu"].shape[1:]:
        raise CliError("SHAPE_MISMATCH", f"validation {cal['mu'].shape} and test {test['mu'].shape} grids differ")
    scores = conformity_scores(cal["truth"], cal["mu"], cal["sigma"])
    qhat = calibrate_qhat(scores, args.alpha, pooled=args.pooled)
    iv = build_interval(test["mu"], test["sigma"], qhat, args.alpha)
    mask = _zero_mask(test["truth"]) if args.mask == "zero" else None
    try:
        cov = empirical_coverage(iv, test["truth"], mask)
    except ValueError as exc:
        raise CliError("INVALID_FLAG", str(exc)) from None
    c = len(cal["mu"]) * (cal["mu"][0].size if args.pooled else 1)
    law = nominal_coverage_law(c, args.alpha)
    outdir = Path(args.out) / "intervals" / args.method
    outdir.mkdir(parents=True, exist_ok=True)
    write_tensor(np.asarray(qhat, dtype=np.float32), outdir / "qhat.grt")
    write_tensor(iv.lower.astype(np.float32), outdir / "lower.grt")
    write_tensor(iv.upper.astype(np.float32), outdir / "upper.grt")
    with (outdir / "coverage.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "coverage"])
        w.writerows((i, f"{v:.10g}") for i, v in enumerate(cov))
    write_kv(outdir / "meta.txt", {
        "method": args.method, "alpha": args.alpha, "C": c, "rank": quantile_rank(c, args.alpha),
        "beta_a": law.a, "beta_b": law.b, "mask": args.mask, "pooled": str(args.pooled).lower(),
        "mean_coverage": f"{cov.mean():.10g}",
    })
    _finish(args, outdir, {"method": args.method, "mean_coverage": f"{cov.mean():.6f}"})
    return outdir


def cmd_evaluate(args) -> Path:
    from .conformal import PredictionInterval
    from .io import read_kv, read_tensor
    from .metrics import evaluate, write_reports

    root = Path(args.out)
    if args.methods:
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
        bad = [m for m in methods if m not in METHODS]
        if bad:
            raise CliError("INVALID_FLAG", f"unknown methods {bad}; choose from {list(METHODS)}")
    else:
        methods = [m for m in METHODS if (root / "intervals" / m / "meta.txt").exists()]
        if not methods:
            raise CliError("MISSING_INPUT", f"no calibrated methods under {root / 'intervals'}")
    reports = []
    for m in methods:
        test, _ = _load_estimate(root / "estimates" / m / "test")
        ivdir = _require(root / "intervals" / m, f"intervals for {m}")
        meta = read_kv(_require(ivdir / "meta.txt", f"interval metadata for {m}"))
        iv = PredictionInterval(read_tensor(ivdir / "lower.grt"), read_tensor(ivdir / "upper.grt"),
                                float(meta["alpha"]), read_tensor(ivdir / "qhat.grt"))
        if iv.lower.shape != test["mu"].shape:
            raise CliError("SHAPE_MISMATCH", f"{m}: intervals {iv.lower.shape} vs estimates {test['mu'].shape}")
        masks = {"zero": [True], "none": [False], "both": [True, False]}[args.mask]
        for masked in masks:
            mask = _zero_mask(test["truth"]) if masked else None
            reports.append(evaluate(test["mu"], test["sigma"], test["truth"], iv, mask,
                                    dataset=args.dataset, method=m))
    outdir = root / "metrics"
    outdir.mkdir(parents=True, exist_ok=True)
    write_reports(reports, outdir / "metrics.csv")
    _finish(args, outdir, {"methods": ",".join(methods), "rows": len(reports)})
    return outdir


def _read_windows(path: Path):
    with path.open() as fh:
        return [(int(r["day"]), int(r["start"])) for r in csv.DictReader(fh)]


def cmd_outliers(args) -> Path:
    import numpy as np

    from .io import write_kv
    from .outlier import detect_outliers, outlier_share, write_outlier_csv

    src = Path(args.out) / "estimates" / args.method
    tr, tr_meta = _load_estimate(src / "train")
    te, _ = _load_estimate(src / "test")
    key = "sigma_epi" if "sigma_epi" in tr else "sigma"
    if key == "sigma" and tr_meta.get("kind") != "epistemic":
        raise CliError("UNSUPPORTED", f"{args.method} has no epistemic component")
    tr_s, te_s = tr[key], te[key]
    if tr_s.shape[1:] != te_s.shape[1:]:
        raise CliError("SHAPE_MISMATCH", f"train {tr_s.shape} and test {te_s.shape} grids differ")
    te_rows = list(range(len(te_s)))
    if args.time_index is not None:
        tr_idx = [i for i, (_, t) in enumerate(_read_windows(src / "train" / "windows.csv")) if t == args.time_index]
        te_rows = [i for i, (_, t) in enumerate(_read_windows(src / "test" / "windows.csv")) if t == args.time_index]
        if len(tr_idx) < 2 or not te_rows:
            raise CliError("MISSING_INPUT", f"too few windows start at time index {args.time_index}")
        tr_s, te_s = tr_s[tr_idx], te_s[te_rows]
    reports = detect_outliers(tr_s, te_s, epsilon=args.epsilon, literal_direction=args.literal_direction,
                              time_index=args.time_index)
    shares = outlier_share(reports)
    outdir = Path(args.out) / "outliers" / args.method
    outdir.mkdir(parents=True, exist_ok=True)
    write_outlier_csv(reports, outdir / "outliers.csv")
    with (outdir / "temporal.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "test_row", "share_vol", "share_speed", "share_pixel"])
        for i, row in enumerate(te_rows):
            w.writerow([i, row] + [f"{a[i]:.10g}" for a in
                                   (shares.temporal_vol, shares.temporal_speed, shares.temporal_pixel)])
    with (outdir / "spatial.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "share_vol", "share_speed", "share_pixel"])
        h, wd = shares.spatial_pixel.shape
        for i in range(h):
            for j in range(wd):
                w.writerow([i, j] + [f"{a[i, j]:.10g}" for a in
                                     (shares.spatial_vol, shares.spatial_speed, shares.spatial_pixel)])
    flagged = float(np.mean([r.out_pixel.mean() for r in reports]))
    write_kv(outdir / "meta.txt", {"method": args.method, "sigma": key, "epsilon": args.epsilon,
                                   "train_samples": len(tr_s), "test_samples": len(te_s),
                                   "flagged_pixel_share": f"{flagged:.10g}"})
    _finish(args, outdir, {"method": args.method, "flagged_pixel_share": f"{flagged:.6f}"})
    return outdir


def cmd_report(args) -> Path:
    import numpy as np
    from scipy import stats

    from . import svg
    from .conformal import nominal_coverage_law
    from .io import read_kv

    root = Path(args.out)
    outdir = root / "report"
    outdir.mkdir(parents=True, exist_ok=True)
    want = {args.what} if args.what != "all" else {"coverage", "metrics", "outliers"}
    made = 0
    if "coverage" in want:
        for m in METHODS:
            d = root / "intervals" / m
            if not (d / "coverage.csv").exists():
                continue
            meta = read_kv(d / "meta.txt")
            with (d / "coverage.csv").open() as fh:
                cov = np.array([float(r["coverage"]) for r in csv.DictReader(fh)])
            law = nominal_coverage_law(int(meta["C"]), float(meta["alpha"]))
            edges = np.linspace(0.0, 1.0, 41)
            counts, _ = np.histogram(cov, bins=edges)
            with (outdir / f"coverage_{m}.csv").open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["bin_lo", "bin_hi", "count", "beta_mass"])
                mass = np.diff(law.cdf(edges)) if not law.degenerate else np.r_[np.zeros(39), 1.0]
                w.writerows((f"{a:.4g}", f"{b:.4g}", c, f"{p:.10g}")
                            for a, b, c, p in zip(edges[:-1], edges[1:], counts, mass))
            density = None if law.degenerate else (lambda x, law=law: stats.beta.pdf(x, law.a, law.b))
            svg.histogram(cov, outdir / f"coverage_{m}.svg",
                          f"{m}: per-sample coverage vs Beta({law.a:g}, {law.b:g})", "coverage",
                          bins=40, value_range=(0.0, 1.0), density=density)
            made += 1
    if "metrics" in want and (root / "metrics" / "metrics.csv").exists():
        with (root / "metrics" / "metrics.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        # prefer the zero-masked rows when both are present
        rows = [r for r in rows if r["masked"] == "True"] or rows
        with (outdir / "spearman.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "masked", "spearman"])
            w.writerows((r["method"], r["masked"], r["spearman"]) for r in rows)
        svg.bars([r["method"] for r in rows], [float(r["spearman"]) for r in rows],
                 outdir / "spearman.svg", "Spearman rank correlation of |error| and sigma", "rho")
        made += 1
    if "outliers" in want:
        for m in METHODS:
            f = root / "outliers" / m / "spatial.csv"
            if not f.exists():
                continue
            with f.open() as fh:
                rows = list(csv.DictReader(fh))
            h = max(int(r["row"]) for r in rows) + 1
            wd = max(int(r["col"]) for r in rows) + 1
            grid = np.zeros((h, wd))
            for r in rows:
                grid[int(r["row"]), int(r["col"])] = float(r["share_pixel"])
            (outdir / f"outliers_spatial_{m}.csv").write_bytes(f.read_bytes())
            svg.heatmap(grid, outdir / f"outliers_spatial_{m}.svg", f"{m}: share of test samples flagged", vmax=1.0)
            made += 1
    if not made:
        raise CliError("MISSING_INPUT", f"nothing to report for {args.what!r} under {root}")
    _finish(args, outdir, {"figures": made})
    return outdir


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "estimate": cmd_estimate, "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate, "outliers": cmd_outliers, "report": cmd_report,
}


def run(argv=None) -> Path:
    """Parse and run one command; raises :class:`CliError` on failure."""
    args = parse_args(list(sys.argv[1:] if argv is None else argv))
    _set_threads(args.threads)
    return COMMANDS[args.command](args)


def main(argv=None) -> int:
    try:
        run(argv)
    except CliError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_CODES[exc.code]
    except Exception as exc:  # noqa: BLE001 - report anything else on one line too
        from .io import TensorFormatError
        from .tensor import ShapeError

        code = "SHAPE_MISMATCH" if isinstance(exc, ShapeError) else \
            "MISSING_INPUT" if isinstance(exc, (FileNotFoundError, TensorFormatError)) else "INTERNAL"
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {code}: {msg}", file=sys.stderr)
        return EXIT_CODES[code]
    return 0


if __name__ == "__main__":
    sys.exit(main())
