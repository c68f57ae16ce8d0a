"""Command line: ``comirec {synth,split,train,eval,recommend}``.

Settings resolve as command-line flag, then ``--config`` file, then defaults.
The config file is flat ``key = value`` text; lists are comma-separated and
keys use the flag names with dashes or underscores (``batch_size = 256``).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data as D
from .aggregation import AggregationConfig, recommend
from .metrics import evaluate_grid, format_table, user_interests, write_reports_csv
from .params import ModelConfig, load, save
from .retrieval import build_index, retrieve_per_interest, write_topn_csv
from .train import train

log = logging.getLogger("comirec")

DEFAULT_LAMBDAS = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25]


@dataclass
class RunConfig:
    data: str | None = None
    format: str = "generic"
    out: str = "run"
    seed: int = 0
    extractor: str = "sa"
    d: int = 64
    k: int = 4
    routing_iters: int = 3
    n_max: int = 20
    batch_size: int = 128
    lr: float = 0.001
    negatives: int = 10
    max_iters: int = 1_000_000
    eval_interval: int = 1000
    patience: int = 20
    cutoffs: list = field(default_factory=lambda: [20, 50])
    lambdas: list = field(default_factory=lambda: list(DEFAULT_LAMBDAS))
    topn: int = 50
    checkpoint: str | None = None
    # synthetic generator
    users: int = 1000
    items: int = 500
    clusters: int = 5
    interests: list = field(default_factory=lambda: [2, 4])
    seq_len: list = field(default_factory=lambda: [20, 50])

    def model_config(self, n_items: int) -> ModelConfig:
        return ModelConfig(n_items=n_items, d=self.d, K=self.k, r=self.routing_iters, n_max=self.n_max,
                           extractor=self.extractor, n_negatives=self.negatives, lr=self.lr,
                           batch_size=self.batch_size, seed=self.seed)


_LIST_FIELDS = {"cutoffs": int, "lambdas": float, "interests": int, "seq_len": int}
# flag / file key -> RunConfig field
_ALIASES = {"lambda": "lambdas", "cutoff": "cutoffs", "k": "k", "n_max": "n_max"}


def _convert(name: str, raw):
    if name in _LIST_FIELDS:
        if isinstance(raw, (list, tuple)):
            return [_LIST_FIELDS[name](x) for x in raw]
        return [_LIST_FIELDS[name](x) for x in str(raw).split(",") if x.strip()]
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    if "int" in kind and "None" not in kind:
        return int(raw)
    if "float" in kind:
        return float(raw)
    return raw


def _field_name(key: str) -> str:
    key = key.strip().replace("-", "_")
    return _ALIASES.get(key, key)


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        name = _field_name(key)
        if name not in known:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        out[name] = _convert(name, value)
    return out


def resolve(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    known = {f.name for f in fields(RunConfig)}
    for key, value in vars(args).items():
        name = _field_name(key)
        if value is not None and name in known:
            values[name] = _convert(name, value)
    return RunConfig(**values)


# -- helpers -----------------------------------------------------------------

def _require(path: str | None, what: str) -> Path:
    if not path:
        raise ValueError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _load(cfg: RunConfig) -> D.InteractionLog:
    return D.load_log(_require(cfg.data, "--data"), cfg.format)


def _write_split(log_: D.InteractionLog, split: D.DatasetSplit, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, users in (("train", split.train_users), ("valid", split.valid_users), ("test", split.test_users)):
        (out / f"{name}_users.txt").write_text("".join(f"{log_.user_vocab[u]}\n" for u in sorted(users)))
    D.write_vocab(log_.user_vocab, out / "user_vocab.csv")
    D.write_vocab(log_.item_vocab, out / "item_vocab.csv")
    D.write_vocab(log_.category_vocab, out / "category_vocab.csv")


def _checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / "model.ckpt"


# -- commands ----------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> None:
    log_ = D.generate_synthetic(cfg.users, cfg.items, cfg.clusters, tuple(cfg.interests), tuple(cfg.seq_len), cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    D.write_log_csv(log_, out / "log.csv")
    print(out / "log.csv")


def cmd_split(cfg: RunConfig) -> None:
    log_ = _load(cfg)
    split = D.split_users(log_, cfg.seed)
    _write_split(log_, split, Path(cfg.out))
    print(f"train={len(split.train_users)} valid={len(split.valid_users)} test={len(split.test_users)}")


def cmd_train(cfg: RunConfig, resume: bool = False) -> None:
    log_ = _load(cfg)
    split = D.split_users(log_, cfg.seed)
    out = Path(cfg.out)
    _write_split(log_, split, out)
    ckpt_path = _checkpoint_path(cfg)
    model_cfg = cfg.model_config(log_.n_items)
    params = adam = None
    start = 0
    if resume:
        ck = load(_require(str(ckpt_path), "checkpoint"))
        params, adam, start, model_cfg = ck.params, ck.adam, ck.step, ck.config
        log.info("resuming from step %d", start)

    log_path = out / "train_log.csv"
    mode = "a" if resume and log_path.exists() else "w"
    with log_path.open(mode, encoding="utf-8", newline="\n") as fh:
        if mode == "w":
            fh.write("step,loss,recall@50_valid\n")

        def write_line(step, loss, recall):
            fh.write(f"{step},{loss:.6f},{recall:.6f}\n")
            fh.flush()

        result = train(log_, split, model_cfg, max_iters=cfg.max_iters, eval_interval=cfg.eval_interval,
                       patience=cfg.patience, callbacks=[write_line], params=params, adam=adam, start_step=start)
    save(ckpt_path, result.params, model_cfg, adam=result.adam, step=result.step,
         item_category=log_.item_category)
    print(f"{ckpt_path} step={result.step} best_recall@50={result.early_stop.best_metric:.6f}")


def cmd_eval(cfg: RunConfig, dump_topn: str | None = None, exclude_observed: bool = False) -> None:
    log_ = _load(cfg)
    ck = load(_require(str(_checkpoint_path(cfg)), "checkpoint"))
    split = D.split_users(log_, cfg.seed)
    cases = D.make_eval_cases(log_, split.test_users, ck.config.n_max)
    index = build_index(ck.params["item_emb"])
    reports = evaluate_grid(ck.params, ck.config, index, cases, cfg.cutoffs, cfg.lambdas,
                            log_.item_category, exclude_observed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "metrics.csv").open("w", encoding="utf-8", newline="\n") as fh:
        write_reports_csv(reports, fh)
    if dump_topn:
        interests = user_interests(ck.params, ck.config, cases)
        with open(dump_topn, "w", encoding="utf-8", newline="\n") as fh:
            rows = ((log_.user_vocab[c.user_id],
                     retrieve_per_interest(index, interests[c.user_id], cfg.topn,
                                           c.observed if exclude_observed else ()))
                    for c in cases)
            write_topn_csv(rows, fh)
    print(format_table(reports))


def cmd_recommend(cfg: RunConfig, items: str, user: str = "-") -> None:
    ckpt_path = _require(str(_checkpoint_path(cfg)), "checkpoint")
    ck = load(ckpt_path)
    vocab_dir = ckpt_path.parent
    item_vocab = D.read_vocab(vocab_dir / "item_vocab.csv")
    cat_path = vocab_dir / "category_vocab.csv"
    category_vocab = D.read_vocab(cat_path) if cat_path.exists() else None
    dense = {raw: i for i, raw in enumerate(item_vocab)}
    raw_items = [s.strip() for s in items.split(",") if s.strip()]
    unknown = [s for s in raw_items if s not in dense]
    if unknown:
        raise ValueError(f"unknown item ids: {','.join(unknown)}")
    if not raw_items:
        raise ValueError("empty item sequence")
    lam = cfg.lambdas[0] if cfg.lambdas else 0.0
    picked = recommend(ck.params, ck.config, build_index(ck.params["item_emb"]), [dense[s] for s in raw_items],
                       AggregationConfig(lam, cfg.topn), ck.item_category)
    print("user_id,rank,item_id,category_id,f_score")
    for rank, c in enumerate(picked, start=1):
        cat = category_vocab[c.category_id] if category_vocab and c.category_id >= 0 else c.category_id
        print(f"{user},{rank},{item_vocab[c.item_id]},{cat},{c.f_score:.6g}")


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--data", help="interaction log path")
    common.add_argument("--format", choices=["amazon", "taobao", "generic"])
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--checkpoint", help="checkpoint path (default OUT/model.ckpt)")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--extractor", choices=["dr", "sa", "DR", "SA"])
    model.add_argument("--d", type=int)
    model.add_argument("--k", type=int)
    model.add_argument("--routing-iters", type=int)
    model.add_argument("--n-max", type=int)
    model.add_argument("--batch-size", type=int)
    model.add_argument("--lr", type=float)
    model.add_argument("--negatives", type=int)
    model.add_argument("--max-iters", type=int)
    model.add_argument("--eval-interval", type=int)
    model.add_argument("--patience", type=int)

    parser = argparse.ArgumentParser(prog="comirec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a planted-interest synthetic log")
    p.add_argument("--users", type=int)
    p.add_argument("--items", type=int)
    p.add_argument("--clusters", type=int)
    p.add_argument("--interests", help="min,max interests per user")
    p.add_argument("--seq-len", help="min,max sequence length")

    sub.add_parser("split", parents=[common], help="8:1:1 user split and vocabularies")

    p = sub.add_parser("train", parents=[common, model], help="train a model")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint's saved step")

    p = sub.add_parser("eval", parents=[common, model], help="test metrics over an (N, lambda) grid")
    p.add_argument("--lambda", dest="lambda", help="comma-separated lambda grid")
    p.add_argument("--topn", dest="cutoffs", help="comma-separated cutoffs N")
    p.add_argument("--dump-topn", help="write per-interest top-N lists as CSV")
    p.add_argument("--exclude-observed", action="store_true", help="never retrieve observed items")

    p = sub.add_parser("recommend", parents=[common], help="top-N for an ad-hoc item sequence")
    p.add_argument("--items", dest="item_seq", required=True, help="comma-separated raw item ids")
    p.add_argument("--topn", type=int)
    p.add_argument("--lambda", dest="lambda", type=float)
    p.add_argument("--user", default="-", help="label for the user_id column")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "split":
            cmd_split(cfg)
        elif args.command == "train":
            cmd_train(cfg, resume=args.resume)
        elif args.command == "eval":
            cmd_eval(cfg, args.dump_topn, args.exclude_observed)
        elif args.command == "recommend":
            cmd_recommend(cfg, args.item_seq, args.user)
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"comirec {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
