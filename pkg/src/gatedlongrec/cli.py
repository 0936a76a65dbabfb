"""Command line entry point: prepare, synth, train, evaluate, recommend.

Settings come from a flat ``key=value`` file (``--config`` or the file named
by ``GATEDLONGREC_CONFIG``) followed by command line overrides; the last
assignment of a key wins. Exit status is 0 on success, 1 on usage or data
errors and 2 when training hits a non-finite value.
"""

from __future__ import annotations

import argparse
import datetime as dt
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import data
from .checkpoint import CheckpointError, load_checkpoint
from .evaluation import BASELINES, EvalError, evaluate_baseline, evaluate_model, run_ablation
from .model import HyperParams, ModelParams, forward
from .numerics import NonFiniteError
from .training import NumericalFailure, TrainConfig, fit

log = logging.getLogger("gatedlongrec")

CONFIG_ENV = "GATEDLONGREC_CONFIG"
CHECKPOINT_NAME = "checkpoint.bin"
LOG_NAME = "train.log"
RESOLVED_NAME = "config.txt"

# Taobao timestamps are in China standard time
TAOBAO_TZ_HOURS = 8
TAOBAO_WINDOW = ("2017-11-25", "2017-12-02", "2017-12-03", "2017-12-04")

ALIASES = {"lr": "learning_rate"}


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- config

@dataclass
class RunConfig:
    M: int = 20
    T: int = 20
    k: int = 3
    Z: int = 1024
    dropout: float = 0.2
    d_e: int = 300
    d_c: int = 64
    d_s: int = 300
    d_l: int = 300
    variant: str = "full"
    learning_rate: float = 0.001
    batch_size: int = 64
    lambda_initial: float = 0.5
    lambda_final: float = 1.0
    patience_lambda: int = 3
    patience_stop: int = 10
    max_epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    valid_seed: int = 12345
    dtype: str = "float32"
    dataset_dir: str = ""
    checkpoint_dir: str = ""
    report_path: str = ""

    def hyper(self) -> HyperParams:
        names = {f.name for f in fields(HyperParams)}
        return HyperParams(**{k: v for k, v in asdict(self).items() if k in names})

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def numpy_dtype(self):
        if self.dtype not in ("float32", "float64"):
            raise UsageError("dtype must be float32 or float64")
        return np.dtype(self.dtype)

    def lines(self) -> list[str]:
        return [f"{k}={v}" for k, v in asdict(self).items()]


def _coerce(key: str, value: str):
    types = {f.name: f.type for f in fields(RunConfig)}
    kind = types[key]
    try:
        if kind in (int, "int"):
            return int(value)
        if kind in (float, "float"):
            return float(value)
    except ValueError:
        raise UsageError(f"config key {key} expects a {kind}, got {value!r}") from None
    return value


def apply_assignment(cfg: RunConfig, key: str, value: str, source: str) -> None:
    key = ALIASES.get(key.strip(), key.strip())
    if key not in {f.name for f in fields(RunConfig)}:
        raise UsageError(f"unknown config key '{key}' ({source})")
    setattr(cfg, key, _coerce(key, value.strip()))


def read_config_file(path, cfg: RunConfig) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file {path} not found")
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, _, value = line.partition("=")
        apply_assignment(cfg, key, value, f"{path}:{n}")
    return cfg


def resolve_config(config_path: str | None, overrides) -> RunConfig:
    cfg = RunConfig()
    path = config_path or os.environ.get(CONFIG_ENV)
    if path:
        read_config_file(path, cfg)
    for key, value in overrides or ():
        apply_assignment(cfg, key, value, "command line")
    cfg.hyper()
    cfg.train_config()
    cfg.numpy_dtype()
    return cfg


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / RESOLVED_NAME
    path.write_text("\n".join(cfg.lines()) + "\n", encoding="utf-8")
    return path


class _Override(argparse.Action):
    """Collect ``--set key=value`` and shortcut flags into one ordered list."""

    def __init__(self, option_strings, dest, key=None, **kwargs):
        self.key = key
        super().__init__(option_strings, dest, **kwargs)

    def __call__(self, parser, namespace, values, option_string=None):
        items = list(getattr(namespace, "overrides", None) or [])
        if self.key is None:
            key, sep, value = values.partition("=")
            if not sep:
                parser.error(f"--set expects key=value, got {values!r}")
        else:
            key, value = self.key, values
        items.append((key, value))
        namespace.overrides = items


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help=f"key=value config file (default: ${CONFIG_ENV})")
    p.add_argument("--set", action=_Override, metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--lr", action=_Override, key="learning_rate", help="learning rate")
    p.add_argument("--seed", action=_Override, key="seed", help="random seed")
    p.add_argument("--epochs", action=_Override, key="max_epochs", help="maximum number of epochs")
    p.add_argument("--variant", action=_Override, key="variant", help="full, short or long")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads; 1 gives bit-reproducible runs")


def _threads(n):
    if n is None:
        return _Null()
    if n < 1:
        raise UsageError("--threads must be at least 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


class _Null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


# ---------------------------------------------------------------- prepare / synth

def parse_time(text: str, tz_hours: float) -> int:
    """Unix seconds, or a calendar date/time taken in UTC+``tz_hours``."""
    text = str(text).strip()
    if text.lstrip("-").isdigit():
        return int(text)
    try:
        when = dt.datetime.fromisoformat(text)
    except ValueError:
        raise UsageError(f"cannot read time {text!r}; use unix seconds or YYYY-MM-DD[THH:MM]") from None
    if when.tzinfo is None:
        when = when.replace(tzinfo=dt.timezone(dt.timedelta(hours=tz_hours)))
    return int(when.timestamp())


def format_stats(stats: dict) -> str:
    width = max(len(k) for k in stats)
    out = []
    for k, v in stats.items():
        out.append(f"{k.ljust(width)}  {v:.2f}" if isinstance(v, float) else f"{k.ljust(width)}  {v}")
    return "\n".join(out)


def _write_atomically(out_dir: Path, write) -> None:
    """Build the directory beside its destination and move it into place."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        write(tmp)
        if out_dir.exists():
            shutil.rmtree(out_dir)
        tmp.rename(out_dir)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)


def cmd_prepare(args) -> int:
    src = Path(args.input)
    if not src.is_file():
        raise data.DataError(f"input log {src} not found")
    bounds = [parse_time(x, args.tz_hours) for x in (args.start, args.train_end, args.valid_end, args.test_end)]
    actions, n_bad = data.parse_action_log(src)
    actions = data.restrict_window(actions, bounds[0], bounds[3])
    if args.sample_users:
        users = sorted({a.user for a in actions})
        rng = np.random.default_rng(args.seed)
        if args.sample_users < len(users):
            keep = set(rng.choice(users, args.sample_users, replace=False).tolist())
            actions = [a for a in actions if a.user in keep]
    ds = data.filter_dataset(actions, args.min_item_actions, args.user_min, args.user_max, args.min_cate_items)
    ds = data.temporal_split(ds, *bounds[1:])
    ds.manifest.update(source=str(src), malformed_lines=str(n_bad), window_start=str(bounds[0]),
                       sample_users=str(args.sample_users or 0), sample_seed=str(args.seed))
    _write_atomically(Path(args.out), lambda tmp: data.save_dataset(ds, tmp))
    print(format_stats(ds.stats()))
    return 0


def cmd_synth(args) -> int:
    ds = data.generate_synthetic(args.users, args.cates, args.items_per_cate, args.seq_len, args.M,
                                 args.seed, intent_noise=args.noise)
    _write_atomically(Path(args.out), lambda tmp: data.save_dataset(ds, tmp))
    print(format_stats(ds.stats()))
    return 0


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    cfg = resolve_config(args.config, getattr(args, "overrides", None))
    if args.dataset:
        cfg.dataset_dir = args.dataset
    if args.out:
        cfg.checkpoint_dir = args.out
    if not cfg.dataset_dir or not cfg.checkpoint_dir:
        raise UsageError("train needs a dataset directory and an output directory")
    if not data.dataset_dir_exists(cfg.dataset_dir):
        raise data.DataError(f"no prepared dataset at {cfg.dataset_dir}")
    ds = data.load_dataset(cfg.dataset_dir)
    hyper, tcfg = cfg.hyper(), cfg.train_config()
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)

    train_ex = data.make_examples(ds, "train", hyper.M, hyper.T)
    valid_ex = data.make_examples(ds, "valid", hyper.M, hyper.T)
    if not train_ex:
        raise data.DataError("no training examples")
    rng = np.random.default_rng(tcfg.seed)
    params = ModelParams.init(hyper, ds.num_items, ds.num_cates, rng, dtype=cfg.numpy_dtype())
    with _threads(args.threads):
        result = fit(params, hyper, tcfg, train_ex, valid_ex, ds.item_counts,
                     checkpoint_path=out / CHECKPOINT_NAME, log_path=out / LOG_NAME,
                     header={"dataset": cfg.dataset_dir, "seed": tcfg.seed})
    print(f"stopped after {result.state.epoch} epochs ({result.stop_reason}); "
          f"best checkpoint {out / CHECKPOINT_NAME}")
    return 0


# ---------------------------------------------------------------- evaluate

def cmd_evaluate(args) -> int:
    ds = data.load_dataset(args.dataset)
    ks = tuple(int(x) for x in args.ks.split(",")) if args.ks else (100,)
    if args.baseline:
        report = evaluate_baseline(args.baseline, ds, args.split, ks)
    else:
        if not args.checkpoint:
            raise UsageError("evaluate needs --checkpoint unless --baseline is given")
        params, hyper, _ = load_checkpoint(args.checkpoint)
        with _threads(args.threads):
            if args.variant and args.variant != "full":
                report = run_ablation(args.variant, params, ds, args.split, hyper, item_ks=ks)
            else:
                report = evaluate_model(params, ds, args.split, hyper, item_ks=ks, name="GatedLongRec")
    report_path = args.report or (str(Path(args.checkpoint).with_name(f"report_{report.name}_{args.split}.txt"))
                                  if args.checkpoint else None)
    if report_path:
        report.write(report_path)
    print(report.table())
    return 0


# ---------------------------------------------------------------- recommend

def parse_history(text: str, ds: data.Dataset | None, num_items: int, num_cates: int) -> list[tuple[int, int]]:
    item_index = {t: i for i, t in enumerate(ds.item_tokens)} if ds else None
    cate_index = {t: i for i, t in enumerate(ds.cate_tokens)} if ds else None
    out = []
    for tok in text.replace(",", " ").split():
        v, sep, c = tok.partition(":")
        if not sep:
            raise UsageError(f"history entry {tok!r} is not item:category")
        out.append((_lookup(v, item_index, num_items, "item"), _lookup(c, cate_index, num_cates, "category")))
    if not out:
        raise UsageError("history is empty")
    return out


def _lookup(tok: str, index, n: int, what: str) -> int:
    if index is not None:
        if tok not in index:
            raise UsageError(f"unknown {what} id {tok}")
        return index[tok]
    if not tok.isdigit() or int(tok) >= n:
        raise UsageError(f"unknown {what} id {tok}")
    return int(tok)


def cmd_recommend(args) -> int:
    params, hyper, _ = load_checkpoint(args.checkpoint)
    ds = data.load_dataset(args.dataset) if args.dataset else None
    history = parse_history(args.history, ds, params.num_items, params.num_cates)
    example = data.example_from_history(history, hyper.M, hyper.T)
    out = forward(params, hyper, example, mode="infer")
    probs = out.mixed_dist.astype(np.float64)
    order = np.lexsort((np.arange(len(probs)), -probs))[: args.n]
    item_name = (lambda i: ds.item_tokens[i]) if ds else str
    cate_name = (lambda c: "none" if c is None else ds.cate_tokens[c]) if ds else (lambda c: "none" if c is None else str(c))
    for i in order:
        print(f"{item_name(int(i))}\t{probs[i]:.6f}")
    for c, w, _ in out.gated:
        print(f"gate\t{cate_name(c)}\t{w:.6f}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gatedlongrec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="filter and split a raw action log")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--start", default=TAOBAO_WINDOW[0])
    p.add_argument("--train-end", default=TAOBAO_WINDOW[1])
    p.add_argument("--valid-end", default=TAOBAO_WINDOW[2])
    p.add_argument("--test-end", default=TAOBAO_WINDOW[3])
    p.add_argument("--tz-hours", type=float, default=TAOBAO_TZ_HOURS, help="offset used for calendar dates")
    p.add_argument("--min-item-actions", type=int, default=20)
    p.add_argument("--user-min", type=int, default=20)
    p.add_argument("--user-max", type=int, default=300)
    p.add_argument("--min-cate-items", type=int, default=100)
    p.add_argument("--sample-users", type=int, default=0, help="random user sample taken before filtering")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="write a synthetic corpus with a planted long-range rule")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--cates", type=int, default=5)
    p.add_argument("--items-per-cate", type=int, default=40)
    p.add_argument("--seq-len", type=int, default=120)
    p.add_argument("--M", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.0, help="intent noise fraction")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a prepared dataset")
    p.add_argument("--dataset")
    p.add_argument("--out")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint or a baseline")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", choices=data.SPLITS)
    p.add_argument("--variant", choices=("full", "short", "long"))
    p.add_argument("--baseline", choices=BASELINES)
    p.add_argument("--ks", help="comma separated item cut-offs (default 100)")
    p.add_argument("--report")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recommend", help="top-n items for a history of item:category pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--history", required=True)
    p.add_argument("-n", type=int, default=10)
    p.add_argument("--dataset", help="map history tokens through this dataset's vocabularies")
    p.set_defaults(func=cmd_recommend)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericalFailure, NonFiniteError) as err:
        print(f"error: numerical failure: {err}", file=sys.stderr)
        return 2
    except (UsageError, data.DataError, EvalError, CheckpointError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
