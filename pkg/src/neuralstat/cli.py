"""Command-line entry point.

Run configuration precedence, lowest first: model/train preset, JSON config
file (``--config``), ``--set section.key=value`` overrides, dedicated flags.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import algorithms as A
from . import data as D
from .model import PRESETS, ModelConfig, NeuralStatistician
from .training import TrainConfig, evaluate, fit

log = logging.getLogger("neuralstat")

TRAIN_PRESETS = {"synthetic": {"epochs": 50}, "spatial": {"epochs": 300}}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    preset: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: str | None = None
    eval_corpus: str | None = None
    out_dir: str = "run"

    @classmethod
    def build(cls, doc: dict, overrides: list[str] = ()) -> "RunConfig":
        doc = json.loads(json.dumps(doc))
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise UsageError(f"--set expects section.key=value, got {item!r}")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            parts = key.split(".")
            if len(parts) == 1:
                doc[parts[0]] = value
            elif len(parts) == 2:
                doc.setdefault(parts[0], {})[parts[1]] = value
            else:
                raise UsageError(f"--set key too deep: {key!r}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        preset = doc.get("preset")
        if preset is not None and preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        model_doc = dataclasses.asdict(PRESETS[preset]) if preset else {}
        train_doc = dict(TRAIN_PRESETS.get(preset, {}))
        for section, base in (("model", model_doc), ("train", train_doc)):
            sub = doc.get(section, {})
            if not isinstance(sub, dict):
                raise UsageError(f"config section {section!r} must be an object")
            base.update(sub)
        try:
            model = ModelConfig.from_dict(model_doc)
            train = TrainConfig.from_dict(train_doc)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config: {exc}") from None
        return cls(preset=preset, model=model, train=train, corpus=doc.get("corpus"),
                   eval_corpus=doc.get("eval_corpus"), out_dir=doc.get("out_dir", "run"))


# -- helpers ----------------------------------------------------------------------------------
def _fmt(v: float) -> str:
    return f"{float(v):.17g}"


def _write_points(path, points: np.ndarray, index=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index"] + [f"x_{j + 1}" for j in range(points.shape[1])])
        for i, row in enumerate(points):
            w.writerow([i if index is None else int(index[i])] + [_fmt(v) for v in row])


def _load_model(path) -> NeuralStatistician:
    return NeuralStatistician.load(path)


def _check_dims(model: NeuralStatistician, corpus: D.DatasetBatch, what: str) -> None:
    if corpus.n_features != model.config.n_features:
        raise ValueError(f"{what} has {corpus.n_features} features but the checkpoint expects "
                         f"{model.config.n_features}")


def _set_from(corpus: D.DatasetBatch, set_id: int) -> np.ndarray:
    if not 0 <= set_id < len(corpus):
        raise ValueError(f"set id {set_id} out of range for a corpus of {len(corpus)} sets")
    return corpus.values[set_id]


# -- commands -----------------------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    if args.source == "synthetic1d":
        corpus = D.gen_synthetic_1d(args.sets, args.samples, seed=args.seed, start=args.start)
    else:
        images = D.load_idx(args.idx)
        if images.ndim != 3:
            raise ValueError(f"{args.idx} is not an image file")
        labels = D.load_idx(args.idx_labels) if args.idx_labels else None
        stop = len(images) if args.count is None else args.offset + args.count
        if stop > len(images):
            raise ValueError(f"requested images [{args.offset}, {stop}) but the file holds {len(images)}")
        affine = D.load_sets(args.affine_from).affine if args.affine_from else None
        corpus = D.gen_spatial_mnist(images[args.offset:stop],
                                     None if labels is None else labels[args.offset:stop],
                                     n_points=args.points, seed=args.seed, affine=affine, start=args.offset)
    D.save_sets(args.out, corpus)
    if corpus.labels is not None:
        D.write_label_csv(args.labels or str(Path(args.out).with_suffix(".csv")), corpus)
    print(f"wrote {args.out}: sets={len(corpus)} sample_size={corpus.sample_size} "
          f"features={corpus.n_features}")
    return 0


def cmd_train(args) -> int:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config document must be a JSON object")
    overrides = list(args.set or [])
    if args.preset:
        overrides.append(f"preset={json.dumps(args.preset)}")
    for flag, key in (("corpus", "corpus"), ("eval_corpus", "eval_corpus"), ("out_dir", "out_dir")):
        if getattr(args, flag) is not None:
            overrides.append(f"{key}={json.dumps(getattr(args, flag))}")
    for flag in ("epochs", "seed", "batch_size", "lr"):
        if getattr(args, flag) is not None:
            overrides.append(f"train.{flag}={json.dumps(getattr(args, flag))}")
    run = RunConfig.build(doc, overrides)
    if not run.corpus:
        raise UsageError("no corpus given (--corpus or \"corpus\" in the config)")
    corpus = D.load_sets(run.corpus)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_cfg = dataclasses.replace(run.train, log_path=str(out / "train_log.csv"),
                                    checkpoint_dir=str(out))
    (out / "run_config.json").write_text(json.dumps(
        {"preset": run.preset, "model": run.model.to_dict(), "train": dataclasses.asdict(train_cfg),
         "corpus": run.corpus, "eval_corpus": run.eval_corpus, "out_dir": run.out_dir}, indent=2, sort_keys=True))
    model = NeuralStatistician(run.model, run.train.seed)
    fit(model, corpus, train_cfg)
    target = D.load_sets(run.eval_corpus) if run.eval_corpus else corpus
    terms = evaluate(model, target, seed=run.train.seed).values()
    print("final " + " ".join(f"{k}={v:.6f}" for k, v in terms.items()))
    print(f"checkpoint {out / 'final.nstm'}")
    return 0


def cmd_embed(args) -> int:
    model = _load_model(args.checkpoint)
    corpus = D.load_sets(args.corpus)
    _check_dims(model, corpus, args.corpus)
    means, _ = A.context_posteriors(model, corpus.values)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["set_id", "family", "mean", "variance"] + [f"c_{j + 1}" for j in range(means.shape[1])])
        for i, mu in enumerate(means):
            if corpus.labels is not None:
                lab = corpus.labels[i]
                meta = [int(lab["label"]), _fmt(lab["mean"]), _fmt(lab["variance"])]
            else:
                meta = [-1, "nan", "nan"]
            w.writerow([i] + meta + [_fmt(v) for v in mu])
    print(f"wrote {args.out}: {len(means)} rows, {means.shape[1]} context dims")
    return 0


def cmd_sample(args) -> int:
    model = _load_model(args.checkpoint)
    points = A.sample_dataset(model, args.k, np.random.default_rng(args.seed))
    _write_points(args.out, points)
    print(f"wrote {args.out}: {len(points)} points")
    return 0


def cmd_cond_sample(args) -> int:
    model = _load_model(args.checkpoint)
    corpus = D.load_sets(args.corpus)
    _check_dims(model, corpus, args.corpus)
    points = A.conditional_sample(model, _set_from(corpus, args.set_id), args.k, np.random.default_rng(args.seed))
    _write_points(args.out, points)
    print(f"wrote {args.out}: {len(points)} points conditioned on set {args.set_id}")
    return 0


def cmd_summarize(args) -> int:
    model = _load_model(args.checkpoint)
    corpus = D.load_sets(args.corpus)
    _check_dims(model, corpus, args.corpus)
    points = _set_from(corpus, args.set_id)
    res = A.representative_subsample(model, points, args.k)
    _write_points(args.out, points[res.indices], index=res.indices)
    print("summary indices " + " ".join(str(int(i)) for i in res.indices))
    return 0


def cmd_classify(args) -> int:
    model = _load_model(args.checkpoint)
    support = D.load_sets(args.support)
    queries = D.load_sets(args.query)
    _check_dims(model, support, args.support)
    _check_dims(model, queries, args.query)
    class_sets = list(support.values)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "predicted_class"] + [f"kl_{i}" for i in range(len(class_sets))])
        for qi, q in enumerate(queries.values):
            pred, kls = A.few_shot_classify(model, class_sets, q)
            w.writerow([qi, pred] + [_fmt(v) for v in kls])
    print(f"wrote {args.out}: {len(queries)} queries, {len(class_sets)} classes")
    return 0


def cmd_eval_fewshot(args) -> int:
    model = _load_model(args.checkpoint)
    corpus = D.load_sets(args.corpus)
    _check_dims(model, corpus, args.corpus)
    res = A.fewshot_episode_eval(model, corpus, k_shot=args.shots, k_way=args.ways,
                                 n_episodes=args.episodes, rng=np.random.default_rng(args.seed))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "accuracy"])
        for i, a in enumerate(res.accuracies):
            w.writerow([i, _fmt(a)])
        w.writerow(["mean", _fmt(res.mean)])
    print(f"accuracy {res.mean:.4f} +/- {res.stderr:.4f} over {len(res.accuracies)} episodes")
    return 0


# -- parser -------------------------------------------------------------------------------------------
class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    # a None default means "see the help text", so don't print it
    def _get_help_string(self, action):
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    p = argparse.ArgumentParser(prog="neuralstat", description="Neural statistician experiments.",
                                formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a set corpus", formatter_class=fmt)
    gsub = g.add_subparsers(dest="source", required=True)
    s1 = gsub.add_parser("synthetic1d", help="1-D sets from four distribution families", formatter_class=fmt)
    s1.add_argument("--sets", type=int, default=10_000, help="number of sets")
    s1.add_argument("--samples", type=int, default=200, help="samples per set")
    s1.add_argument("--seed", type=int, default=0, help="generator seed")
    s1.add_argument("--start", type=int, default=0, help="first set index (keys the per-set streams)")
    s1.add_argument("--out", required=True, help="output NSDS path")
    s1.add_argument("--labels", default=None, help="label CSV path (default: OUT with .csv suffix)")
    s2 = gsub.add_parser("spatial-mnist", help="point sets sampled from MNIST images", formatter_class=fmt)
    s2.add_argument("--idx", required=True, help="IDX image file")
    s2.add_argument("--idx-labels", default=None, help="IDX label file")
    s2.add_argument("--points", type=int, default=50, help="points per set")
    s2.add_argument("--offset", type=int, default=0, help="first image to use")
    s2.add_argument("--count", type=int, default=None, help="number of images (default: all after offset)")
    s2.add_argument("--seed", type=int, default=0, help="generator seed")
    s2.add_argument("--affine-from", default=None, help="reuse the standardisation map of this NSDS file")
    s2.add_argument("--out", required=True, help="output NSDS path")
    s2.add_argument("--labels", default=None, help="label CSV path (default: OUT with .csv suffix)")
    for sp in (s1, s2):
        sp.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model", formatter_class=fmt)
    t.add_argument("--config", default=None, help="JSON run config {preset, model, train, corpus, eval_corpus, out_dir}")
    t.add_argument("--preset", choices=sorted(PRESETS), default=None, help="model/train preset")
    t.add_argument("--corpus", default=None, help="training NSDS corpus")
    t.add_argument("--eval-corpus", dest="eval_corpus", default=None, help="corpus for the final bound")
    t.add_argument("--out-dir", dest="out_dir", default=None, help="output directory (default: run)")
    t.add_argument("--epochs", type=int, default=None, help="training epochs (default: 50, or the preset's budget)")
    t.add_argument("--seed", type=int, default=None, help="seed for init, shuffling and noise (default: 0)")
    t.add_argument("--batch-size", dest="batch_size", type=int, default=None, help="datasets per batch (default: 16)")
    t.add_argument("--lr", type=float, default=None, help="Adam learning rate (default: 1e-3)")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override any config field, e.g. model.c_dim=3; repeatable")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", help="posterior context means per set", formatter_class=fmt)
    e.add_argument("--checkpoint", required=True, help="NSTM checkpoint")
    e.add_argument("--corpus", required=True, help="NSDS corpus")
    e.add_argument("--out", required=True, help="output CSV")
    e.set_defaults(func=cmd_embed)

    sm = sub.add_parser("sample", help="sample a new dataset from the prior", formatter_class=fmt)
    sm.add_argument("--checkpoint", required=True, help="NSTM checkpoint")
    sm.add_argument("--k", type=int, default=50, help="points to sample")
    sm.add_argument("--seed", type=int, default=0, help="sampling seed")
    sm.add_argument("--out", required=True, help="output CSV")
    sm.set_defaults(func=cmd_sample)

    cs = sub.add_parser("cond-sample", help="sample given a conditioning set", formatter_class=fmt)
    cs.add_argument("--checkpoint", required=True, help="NSTM checkpoint")
    cs.add_argument("--corpus", required=True, help="NSDS corpus holding the conditioning set")
    cs.add_argument("--set-id", dest="set_id", type=int, default=0, help="conditioning set index")
    cs.add_argument("--k", type=int, default=50, help="points to sample")
    cs.add_argument("--seed", type=int, default=0, help="sampling seed")
    cs.add_argument("--out", required=True, help="output CSV")
    cs.set_defaults(func=cmd_cond_sample)

    su = sub.add_parser("summarize", help="greedy representative subset of a set", formatter_class=fmt)
    su.add_argument("--checkpoint", required=True, help="NSTM checkpoint")
    su.add_argument("--corpus", required=True, help="NSDS corpus")
    su.add_argument("--set-id", dest="set_id", type=int, default=0, help="set index")
    su.add_argument("--k", type=int, default=6, help="summary size")
    su.add_argument("--out", required=True, help="output CSV of surviving indices and points")
    su.set_defaults(func=cmd_summarize)

    cl = sub.add_parser("classify", help="few-shot classification by context KL; ties go to the lowest class",
                        formatter_class=fmt)
    cl.add_argument("--checkpoint", required=True, help="NSTM checkpoint")
    cl.add_argument("--support", required=True, help="NSDS file, one set per class (class = set order)")
    cl.add_argument("--query", required=True, help="NSDS file, one query per set")
    cl.add_argument("--out", required=True, help="output CSV")
    cl.set_defaults(func=cmd_classify)

    ef = sub.add_parser("eval-fewshot", help="episodic few-shot accuracy", formatter_class=fmt)
    ef.add_argument("--checkpoint", required=True, help="NSTM checkpoint")
    ef.add_argument("--corpus", required=True, help="labelled NSDS corpus; each set is one example")
    ef.add_argument("--ways", type=int, default=5, help="classes per episode")
    ef.add_argument("--shots", type=int, default=1, help="support examples per class")
    ef.add_argument("--episodes", type=int, default=100, help="number of episodes")
    ef.add_argument("--seed", type=int, default=0, help="episode seed")
    ef.add_argument("--out", required=True, help="output CSV episode,accuracy")
    ef.set_defaults(func=cmd_eval_fewshot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"neuralstat: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"neuralstat: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
