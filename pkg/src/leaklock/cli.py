"""``leaklock`` command-line interface.

Every option can also be given in a TOML file passed with ``--config``. Keys
live at top level (shared), under ``[<command>]`` or under
``[<command>.<kind>]``; dashes and underscores are interchangeable. Explicit
command-line flags always win.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import contextlib
import csv
import datetime as _dt
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from leaklock import __version__
from leaklock.baselines import LeakageAssessment, attribute, first_order
from leaklock.datagen.aes import AesStream, SyntheticAesConfig, SyntheticAesDevice, gen_synthetic_aes
from leaklock.datagen.dataset import TraceDataset, load_dataset, save_dataset, split, standardize_apply
from leaklock.datagen.toy import ToyConfig, gen_toy
from leaklock.erasure import RelaxationConfig
from leaklock.errors import ConfigError, LeaklockError
from leaklock.evaluation import (
    compare_to_ogmm,
    key_rank_accumulation,
    occlusion_test,
    ogmm_assessment,
)
from leaklock.ndmath import MlpClassifier, load_model
from leaklock.svg import line_plot
from leaklock.train import (
    AllConfig,
    RunRecord,
    SupervisedConfig,
    select_best_trial,
    train_all,
    train_supervised,
)

log = logging.getLogger("leaklock")

SEED_ENV = "LEAKLOCK_SEED"
STATS_METHODS = ("snr", "sosd", "cpa")
ASSESS_METHODS = STATS_METHODS + ("gradvis", "saliency", "occlusion1", "inputxgrad", "lrp", "all-gamma")
_ATTR_NAME = {"inputxgrad": "input_x_grad", "lrp": "lrp_eps"}

# Search lists for random hyperparameter sweeps.
SUPERVISED_SPACE = {
    "lr": [m * 10.0**e for e in (-6, -5, -4) for m in range(1, 10)],
    "weight_decay": [0.0, 1e-4, 1e-2],
    "schedule": ["constant", "cosine"],
}
ALL_SPACE = {
    "lr_eta": [1e-5, 1e-4, 1e-3, 1e-2],
    "lr_theta": [1e-5, 1e-4, 1e-3],
    "weight_decay": [1e-2, 1e0, 1e2],
}


# -- option plumbing ---------------------------------------------------------


class _Opts:
    """Collects per-parser defaults so config files can fill unset flags."""

    def __init__(self, parser: argparse.ArgumentParser):
        self.parser = parser
        self.defaults: dict[str, object] = {}
        parser.set_defaults(_defaults=self.defaults)

    def add(self, *flags, default=None, help="", **kw):
        if default is not None and kw.get("action") not in ("store_true", "store_false"):
            help = f"{help} (default: {default})"
        action = self.parser.add_argument(*flags, default=None, help=help, **kw)
        self.defaults[action.dest] = default
        return action


def _hidden(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad layer list {text!r}") from exc
    if not dims or min(dims) <= 0:
        raise argparse.ArgumentTypeError("hidden sizes must be positive integers")
    return dims


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        return tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _norm(d: dict) -> dict:
    return {k.replace("-", "_"): v for k, v in d.items() if not isinstance(v, dict)}


def _resolve(args: argparse.Namespace, cfg: dict) -> None:
    """Fill unset options from the config file, then from built-in defaults."""
    merged = _norm(cfg)
    section = cfg.get(args.command, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section [{args.command}] must be a table")
    merged.update(_norm(section))
    kind = getattr(args, "kind", None)
    if kind and isinstance(section.get(kind), dict):
        merged.update(_norm(section[kind]))
    known = set(args._defaults) | {"seed"}
    scoped = _norm(section) | (_norm(section[kind]) if kind and isinstance(section.get(kind), dict) else {})
    unknown = sorted(set(scoped) - known)
    if unknown:
        raise ConfigError(f"unknown option(s) for '{args.command}': {', '.join(unknown)}")
    for dest, default in args._defaults.items():
        if getattr(args, dest, None) is None:
            value = merged.get(dest, default)
            if dest == "hidden" and isinstance(value, (list, str)):
                value = _hidden(",".join(map(str, value)) if isinstance(value, list) else value)
            setattr(args, dest, value)
    if getattr(args, "seed", None) is None:
        if "seed" in merged:
            args.seed = int(merged["seed"])
        else:
            args.seed = int(os.environ.get(SEED_ENV, "0"))


def _remove(path: Path) -> None:
    if path.is_dir() and not path.is_symlink():
        shutil.rmtree(path)
    elif path.exists() or path.is_symlink():
        path.unlink()


@contextlib.contextmanager
def atomic_output(final: str | Path, directory: bool = False):
    """Yield a temporary sibling path that replaces ``final`` only if the block succeeds."""
    final = Path(final)
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = final.parent / f".{final.name}.partial-{os.getpid()}"
    _remove(tmp)
    if directory:
        tmp.mkdir()
    try:
        yield tmp
    except BaseException:
        _remove(tmp)
        raise
    _remove(final)
    os.replace(tmp, final)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _read_dataset(path) -> TraceDataset:
    if not path:
        raise ConfigError("--data is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"dataset {path} does not exist")
    return load_dataset(p)


def _read_model(args) -> MlpClassifier:
    if getattr(args, "model", None):
        p = Path(args.model)
        if not p.is_file():
            raise ConfigError(f"model file {p} does not exist")
        return load_model(p)
    if getattr(args, "run", None):
        ckpts = sorted((Path(args.run) / "checkpoints").glob("*.llmd"))
        if not ckpts:
            raise ConfigError(f"run directory {args.run} has no checkpoints")
        best = [c for c in ckpts if c.stem == "best"]
        return load_model((best or ckpts)[0])
    raise ConfigError("pass --model FILE or --run DIR")


# -- gen ---------------------------------------------------------------------


def cmd_gen(args) -> int:
    kind = args.kind
    if kind in ("toy-xor", "toy-redundant"):
        if args.sigma is not None and args.sigma2 is not None:
            raise ConfigError("--sigma and --sigma2 are mutually exclusive")
        sigma2 = args.sigma2 if args.sigma is None else float(args.sigma) ** 2
        if sigma2 is None:
            sigma2 = 0.5
        variant = "second_order" if kind == "toy-xor" else "redundant"
        cfg = ToyConfig(variant, float(sigma2), int(args.n_leaky), int(args.n or 100_000), args.seed)
        ds = gen_toy(cfg)
        cfg_dict = cfg.to_dict()
    else:
        cfg = SyntheticAesConfig(
            n=int(args.n or 10_000), t=args.t, n_lkg=args.n_lkg, n_ops=args.n_ops,
            var_data=args.var_data, var_op=args.var_op, var_resid=args.var_resid,
            lowpass_beta=args.beta, max_no_ops=args.max_no_ops,
            shuffle_locations=args.shuffle_locations, boolean_masking=bool(args.masking),
            seed=args.seed,
        )
        cfg.validate()
        device = SyntheticAesDevice(cfg)
        ds = gen_synthetic_aes(cfg, fixed_key=args.fixed_key, trace_seed=args.trace_seed, device=device)
        if not args.no_standardize:
            ds = standardize_apply(ds, AesStream(cfg, standardize_n=10_000).stats)
        cfg_dict = cfg.to_dict() | {"fixed_key": args.fixed_key, "trace_seed": args.trace_seed,
                                    "standardized": not args.no_standardize}
    out = Path(args.out or f"{kind}-seed{args.seed}.scld")
    sidecar = out.with_name(out.name + ".json")
    with atomic_output(out) as tmp_data, atomic_output(sidecar) as tmp_side:
        crc = save_dataset(ds, tmp_data)
        _write_json(tmp_side, {
            "generator": kind,
            "config": {k: v for k, v in cfg_dict.items() if v is not None},
            "n": ds.n, "t": ds.t, "n_classes": ds.n_classes,
            "ground_truth": [int(v) for v in (ds.ground_truth if ds.ground_truth is not None else [])],
            "crc32": f"{crc:08x}",
            "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        })
    print(f"{out}  N={ds.n} T={ds.t} crc32={crc:08x}")
    return 0


# -- train -------------------------------------------------------------------


def _train_val(args) -> tuple[TraceDataset, TraceDataset]:
    data = _read_dataset(args.data)
    if args.val:
        return data, _read_dataset(args.val)
    return split(data, (1.0 - args.val_fraction, args.val_fraction), args.seed)


def _supervised_config(args) -> SupervisedConfig:
    return SupervisedConfig(
        lr=args.lr, weight_decay=args.weight_decay, schedule=args.schedule, steps=args.steps,
        batch_size=args.batch_size, hidden=tuple(args.hidden), eval_every=args.eval_every,
        dtype=args.dtype, seed=args.seed,
    )


def _all_config(args) -> AllConfig:
    relax = RelaxationConfig(args.temperature, args.control_scale, args.noise_fill)
    return AllConfig(
        lr_theta=args.lr_theta, lr_eta=args.lr_eta, gamma_bar=args.gamma_bar,
        weight_decay=args.weight_decay, ratio=args.ratio, pretrain_steps=args.pretrain_steps,
        pretrain_lr=args.pretrain_lr, steps=args.steps, batch_size=args.batch_size,
        hidden=tuple(args.hidden), relaxation=relax, eval_every=args.eval_every,
        dtype=args.dtype, seed=args.seed,
    )


def _run_training(kind: str, cfg, train: TraceDataset, val: TraceDataset) -> RunRecord:
    if kind == "supervised":
        _, rec = train_supervised(train, cfg, val)
    else:
        rec = train_all(train, cfg, val).record
    return rec


def cmd_train(args) -> int:
    train, val = _train_val(args)
    cfg = _supervised_config(args) if args.kind == "supervised" else _all_config(args)
    out = Path(args.out or f"runs/{args.kind}-seed{args.seed}")
    with atomic_output(out, directory=True) as tmp:
        rec = _run_training(args.kind, cfg, train, val)
        rec.config["data"] = str(args.data)
        rec.save(tmp)
    print(f"{out}  status={rec.status} min_val_rank={rec.min_val_rank:.3f}")
    return 0 if rec.status == "ok" else 1


# -- assess ------------------------------------------------------------------


def cmd_assess(args) -> int:
    method = args.method
    if method == "all-gamma":
        if not args.run:
            raise ConfigError("all-gamma needs --run DIR of an ALL run")
        rec = RunRecord.load(args.run)
        if rec.assessment is None:
            raise ConfigError(f"{args.run} holds no final erasure probabilities")
        result = LeakageAssessment(rec.assessment, "all-gamma", {"seed": args.seed})
    else:
        data = _read_dataset(args.data)
        if method in STATS_METHODS:
            result = first_order(method, data)
        else:
            result = attribute(_ATTR_NAME.get(method, method), _read_model(args), data)
        result.method = method
        result.source["seed"] = args.seed
    out = Path(args.out or f"{method}.csv")
    with atomic_output(out) as tmp:
        result.save(tmp)
    print(out)
    return 0


# -- eval --------------------------------------------------------------------


def _read_profile(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "mi" not in rows[0]:
        raise ConfigError(f"{path}: expected an oGMM profile CSV with an 'mi' column")
    return np.array([float(r["mi"]) for r in rows])


def _assessments(args) -> list[LeakageAssessment]:
    if not args.assessment:
        raise ConfigError("--assessment is required")
    return [LeakageAssessment.load(p) for p in args.assessment]


def cmd_eval(args) -> int:
    kind = args.kind
    if kind == "ogmm":
        data = _read_dataset(args.data)
        profile = ogmm_assessment(data, args.window, seed=args.seed)
        out = Path(args.out or "ogmm.csv")
        with atomic_output(out) as tmp:
            _write_csv(tmp, ["window_start", "mi"], [(i, repr(float(v))) for i, v in enumerate(profile)])
    elif kind == "spearman":
        if not args.profile:
            raise ConfigError("--profile is required")
        profile = _read_profile(args.profile)
        records = [
            {"method": a.method, "spearman": compare_to_ogmm(a.scores, profile, args.window),
             "forward_auc": None, "reverse_auc": None}
            for a in _assessments(args)
        ]
        out = Path(args.out or "spearman.json")
        with atomic_output(out) as tmp:
            _write_json(tmp, records)
        for r in records:
            print(f"{r['method']}: spearman={r['spearman']:.4f}")
    elif kind == "occlusion":
        data = _read_dataset(args.data)
        model = _read_model(args)
        directions = ("forward", "reverse") if args.direction == "both" else (args.direction,)
        out = Path(args.out or "occlusion")
        with atomic_output(out, directory=True) as tmp:
            records = []
            for a in _assessments(args):
                rec = {"method": a.method, "spearman": None, "forward_auc": None, "reverse_auc": None}
                for d in directions:
                    curve = occlusion_test(model, data.traces, data.labels, a.scores, d)
                    _write_csv(tmp / f"{a.method}-{d}.csv", ["n_unmasked", "mean_rank"],
                               [(int(c), repr(float(r))) for c, r in zip(curve.counts, curve.ranks)])
                    rec[f"{d}_auc"] = curve.auc
                records.append(rec)
            _write_json(tmp / "summary.json", records)
        for r in records:
            print(f"{r['method']}: forward_auc={r['forward_auc']} reverse_auc={r['reverse_auc']}")
    else:
        data = _read_dataset(args.data)
        if "plaintext" not in data.aux:
            raise ConfigError("dataset has no plaintext column")
        key = args.key
        if key is None:
            keys = np.unique(data.aux.get("key", np.array([0, 1])))
            if keys.size != 1:
                raise ConfigError("dataset key is not fixed; pass --key")
            key = int(keys[0])
        n = data.n if args.max_traces is None else min(args.max_traces, data.n)
        model = _read_model(args)
        ranks = key_rank_accumulation(model, data.traces[:n], data.aux["plaintext"][:n], key)
        out = Path(args.out or "key-rank.csv")
        with atomic_output(out) as tmp:
            _write_csv(tmp, ["n_traces", "rank"], [(i + 1, int(r)) for i, r in enumerate(ranks)])
        print(f"final rank {int(ranks[-1])} after {n} traces")
    return 0


# -- sweep -------------------------------------------------------------------


def _trial_payloads(args, space: dict) -> list[dict]:
    rng = np.random.default_rng(args.seed)
    seeds = np.random.SeedSequence(args.seed).generate_state(args.trials)
    payloads = []
    for i in range(args.trials):
        params = {k: v[int(rng.integers(len(v)))] for k, v in sorted(space.items())}
        payloads.append({"index": i, "seed": int(seeds[i] % 2**31), "params": params})
    return payloads


def _run_trial(job: dict) -> dict:
    kind, cfg, train, val, out = job["kind"], job["cfg"], job["train"], job["val"], job["out"]
    try:
        rec = _run_training(kind, cfg, train, val)
    except LeaklockError as exc:
        return {"index": job["index"], "status": f"failed: {exc}", "min_val_rank": float("inf"),
                "val_loss": float("inf")}
    rec.save(out)
    return {"index": job["index"], "status": rec.status, "min_val_rank": rec.min_val_rank,
            "val_loss": rec.best_val_loss}


def cmd_sweep(args, cfg_file: dict) -> int:
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    train, val = _train_val(args)
    space = dict(SUPERVISED_SPACE if args.kind == "supervised" else ALL_SPACE)
    extra = cfg_file.get("sweep", {}).get("space", {})
    for k, v in extra.items():
        if not isinstance(v, list) or not v:
            raise ConfigError(f"sweep space entry {k!r} must be a nonempty list")
        space[k.replace("-", "_")] = v
    base = _supervised_config(args) if args.kind == "supervised" else _all_config(args)
    base_fields = set(asdict(base))
    bad = sorted(set(space) - base_fields)
    if bad:
        raise ConfigError(f"unknown sweep parameter(s): {', '.join(bad)}")
    out = Path(args.out or f"sweeps/{args.kind}-seed{args.seed}")
    payloads = _trial_payloads(args, space)
    with atomic_output(out, directory=True) as tmp:
        jobs = [
            {"kind": args.kind, "index": p["index"], "cfg": replace(base, seed=p["seed"], **p["params"]),
             "train": train, "val": val, "out": str(tmp / f"trial-{p['index']:03d}")}
            for p in payloads
        ]
        if args.parallel > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=args.parallel) as pool:
                results = list(pool.map(_run_trial, jobs))
        else:
            results = [_run_trial(j) for j in jobs]
        ok = [r for r in results if np.isfinite(r["min_val_rank"])]
        if not ok:
            raise ConfigError("every sweep trial failed")
        best = ok[select_best_trial([(r["min_val_rank"], r["val_loss"]) for r in ok])]["index"]
        report = {
            "kind": args.kind,
            "selected": best,
            "trials": [
                {**r, "seed": p["seed"], "params": p["params"],
                 "min_val_rank": r["min_val_rank"] if np.isfinite(r["min_val_rank"]) else None,
                 "val_loss": r["val_loss"] if np.isfinite(r["val_loss"]) else None}
                for r, p in zip(results, payloads)
            ],
        }
        _write_json(tmp / "sweep.json", report)
    print(f"selected trial {best}")
    return 0


# -- report ------------------------------------------------------------------


def cmd_report(args) -> int:
    if not (args.run or args.assessment or args.curves):
        raise ConfigError("nothing to report: pass --run, --assessment or --curves")
    out = Path(args.out or "report")
    with atomic_output(out, directory=True) as tmp:
        written = []
        series = []
        for run in args.run or []:
            rec = RunRecord.load(run)
            name = Path(run).name
            if rec.assessment is not None:
                series.append((np.arange(rec.assessment.size), rec.assessment, name))
            g = rec.gamma_array()
            if g.size:
                traj = [(np.array(rec.gamma_steps), g[:, t], f"t={t}") for t in range(g.shape[1])]
                (tmp / f"{name}-trajectory.svg").write_text(
                    line_plot(traj, f"{name}: erasure probability vs step", "training step", "gamma"))
                written.append(f"{name}-trajectory.svg")
        for path in args.assessment or []:
            a = LeakageAssessment.load(path)
            series.append((np.arange(a.t), a.scores, f"{a.method} ({Path(path).stem})"))
        if series:
            (tmp / "assessments.svg").write_text(line_plot(series, "leakage assessment", "timestep", "score"))
            written.append("assessments.svg")
        curves = []
        for path in args.curves or []:
            with open(path, newline="") as fh:
                rows = list(csv.DictReader(fh))
            if not rows or "mean_rank" not in rows[0]:
                raise ConfigError(f"{path}: not an occlusion curve CSV")
            curves.append((np.array([float(r["n_unmasked"]) for r in rows]),
                           np.array([float(r["mean_rank"]) for r in rows]), Path(path).stem))
        if curves:
            (tmp / "occlusion.svg").write_text(
                line_plot(curves, "DNN occlusion test", "unmasked features", "mean rank"))
            written.append("occlusion.svg")
    for w in written:
        print(out / w)
    return 0


# -- parser ------------------------------------------------------------------


def _add_train_options(o: _Opts, kind: str) -> None:
    o.add("--data", help="training dataset (SCLD file)")
    o.add("--val", help="validation dataset; defaults to a split of --data")
    o.add("--val-fraction", type=float, default=0.1, help="held-out fraction when --val is absent")
    o.add("--steps", type=int, default=10_000 if kind == "all" else 1000, help="training steps")
    o.add("--batch-size", type=int, default=1000 if kind == "all" else 256, help="minibatch size")
    o.add("--hidden", type=_hidden, default=(500,), help="comma-separated hidden layer widths")
    o.add("--eval-every", type=int, default=1000 if kind == "all" else 100, help="validation cadence in steps")
    o.add("--dtype", choices=("float32", "float64"), default="float32", help="classifier arithmetic")
    o.add("--weight-decay", type=float, default=0.0 if kind == "all" else 1e-2, help="classifier weight decay")
    o.add("--seed", type=int, help=f"random seed (falls back to ${SEED_ENV}, then 0)")
    o.add("--out", help="output directory")
    if kind == "supervised":
        o.add("--lr", type=float, default=1e-3, help="learning rate")
        o.add("--schedule", choices=("constant", "cosine"), default="constant", help="learning-rate schedule")
    else:
        o.add("--gamma-bar", type=float, default=0.5, help="average erasure probability setting the budget")
        o.add("--lr-theta", type=float, default=1e-3, help="classifier learning rate")
        o.add("--lr-eta", type=float, default=1e-3, help="erasure-logit learning rate")
        o.add("--ratio", type=int, default=1, help="erasure steps per classifier step")
        o.add("--pretrain-steps", type=int, default=0, help="classifier steps with uniform erasure first")
        o.add("--pretrain-lr", type=float, default=1e-3, help="learning rate during pretraining")
        o.add("--temperature", type=float, default=0.5, help="relaxation temperature")
        o.add("--control-scale", type=float, default=1.0, help="control-variate scale")
        o.add("--noise-fill", choices=("gaussian", "zero"), default="gaussian", help="value for erased inputs")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="leaklock", description="Leakage localization experiments.")
    p.add_argument("--config", help="TOML file supplying defaults for any option")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--version", action="version", version=f"leaklock {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gsub = gen.add_subparsers(dest="kind", required=True)
    for kind in ("toy-xor", "toy-redundant", "synth-aes"):
        g = gsub.add_parser(kind, help=f"{kind} dataset")
        o = _Opts(g)
        o.add("--n", type=int, help="number of traces (toys: 100000, synth-aes: 10000)")
        o.add("--seed", type=int, help=f"random seed (falls back to ${SEED_ENV}, then 0)")
        o.add("--out", help="output SCLD path; a JSON sidecar is written next to it")
        if kind.startswith("toy"):
            o.add("--sigma", type=float, help="noise standard deviation of the leaky features")
            o.add("--sigma2", type=float, help="noise variance of the leaky features (default 0.5)")
            o.add("--n-leaky", type=int, default=1, help="number of leaky copies (toy-redundant)")
        else:
            o.add("--t", type=int, default=101, help="trace length")
            o.add("--n-lkg", type=int, default=1, help="leaky operations per sensitive value")
            o.add("--n-ops", type=int, default=32, help="distinct operations")
            o.add("--beta", type=float, default=0.5, help="low-pass filter coefficient")
            o.add("--var-data", type=float, default=1.0, help="data-dependent power variance")
            o.add("--var-op", type=float, default=1.0, help="operation-dependent power variance")
            o.add("--var-resid", type=float, default=1.0, help="residual noise variance")
            o.add("--max-no-ops", type=int, default=0, help="maximum random delay")
            o.add("--shuffle-locations", type=int, default=1, help="candidate slots per leaky operation")
            o.add("--masking", action="store_true", help="enable Boolean masking")
            o.add("--fixed-key", type=int, help="use one key byte for every trace")
            o.add("--trace-seed", type=int, help="draw traces with this seed from the --seed device")
            o.add("--no-standardize", action="store_true", help="keep raw trace scale")

    train = sub.add_parser("train", help="train a supervised classifier or run ALL")
    tsub = train.add_subparsers(dest="kind", required=True)
    for kind in ("supervised", "all"):
        _add_train_options(_Opts(tsub.add_parser(kind, help=f"{kind} training")), kind)

    assess = sub.add_parser("assess", help="compute a leakage assessment")
    o = _Opts(assess)
    o.add("--method", choices=ASSESS_METHODS, help="assessment method")
    o.add("--data", help="dataset (SCLD)")
    o.add("--model", help="classifier checkpoint (LLMD) for attribution methods")
    o.add("--run", help="run directory (checkpoint source, or final gamma for all-gamma)")
    o.add("--seed", type=int, help="seed recorded with the assessment")
    o.add("--out", help="output CSV")

    ev = sub.add_parser("eval", help="evaluate assessments or attack a key")
    esub = ev.add_subparsers(dest="kind", required=True)
    for kind in ("ogmm", "spearman", "occlusion", "key-rank"):
        o = _Opts(esub.add_parser(kind, help=f"{kind} evaluation"))
        o.add("--seed", type=int, help="random seed")
        o.add("--out", help="output path")
        if kind in ("ogmm", "occlusion", "key-rank"):
            o.add("--data", help="dataset (SCLD)")
        if kind in ("ogmm", "spearman"):
            o.add("--window", type=int, default=5, help="oGMM window width")
        if kind in ("spearman", "occlusion"):
            o.add("--assessment", nargs="+", help="assessment CSV file(s)")
        if kind == "spearman":
            o.add("--profile", help="oGMM profile CSV")
        if kind in ("occlusion", "key-rank"):
            o.add("--model", help="classifier checkpoint (LLMD)")
            o.add("--run", help="run directory holding the checkpoint")
        if kind == "occlusion":
            o.add("--direction", choices=("forward", "reverse", "both"), default="both", help="unmasking order")
        if kind == "key-rank":
            o.add("--key", type=int, help="true key byte (default: the dataset's fixed key)")
            o.add("--max-traces", type=int, help="use at most this many attack traces")

    sw = sub.add_parser("sweep", help="random hyperparameter search")
    swsub = sw.add_subparsers(dest="kind", required=True)
    for kind in ("supervised", "all"):
        o = _Opts(swsub.add_parser(kind, help=f"sweep {kind} training"))
        _add_train_options(o, kind)
        o.add("--trials", type=int, default=10, help="number of trials")
        o.add("--parallel", type=int, default=1, help="worker processes")

    rep = sub.add_parser("report", help="render SVG plots")
    o = _Opts(rep)
    o.add("--run", nargs="+", help="run directories (final gamma and trajectories)")
    o.add("--assessment", nargs="+", help="assessment CSV files")
    o.add("--curves", nargs="+", help="occlusion curve CSV files")
    o.add("--out", help="output directory")
    return p


def _default_sweep_kind(argv: list[str]) -> list[str]:
    """``sweep`` without a kind means ``sweep supervised``."""
    if "sweep" in argv:
        i = argv.index("sweep")
        nxt = argv[i + 1] if i + 1 < len(argv) else None
        if nxt not in ("supervised", "all", "-h", "--help"):
            return argv[:i + 1] + ["supervised"] + argv[i + 1:]
    return argv


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(_default_sweep_kind(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _resolve(args, _load_config(args.config))
        if args.command == "gen":
            return cmd_gen(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "assess":
            if args.method is None:
                raise ConfigError("--method is required")
            return cmd_assess(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "sweep":
            return cmd_sweep(args, _load_config(args.config))
        return cmd_report(args)
    except (LeaklockError, OSError) as exc:
        print(f"leaklock: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
