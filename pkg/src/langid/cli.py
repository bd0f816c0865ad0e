"""``langid`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error. Results go to stdout
(tab-separated text, or one JSON object per line with ``--json-lines``);
diagnostics go to stderr. ``LANGID_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("langid")

COMMANDS = ("synth", "train", "finetune", "predict", "eval", "ensemble-search", "vad-segment",
            "mine-errors", "make-split", "class-weights", "count-params", "dump-features")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- output ----------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "-"
    return str(v)


def emit(rows: list[dict], json_lines: bool, out=None) -> None:
    """Print rows as JSON lines or as a tab-separated table with a header."""
    out = out or sys.stdout
    if json_lines:
        for row in rows:
            out.write(json.dumps(row, ensure_ascii=False) + "\n")
        return
    if not rows:
        return
    cols = list(rows[0])
    for row in rows[1:]:
        cols += [c for c in row if c not in cols]
    out.write("\t".join(cols) + "\n")
    for row in rows:
        out.write("\t".join(_fmt(row.get(c)) for c in cols) + "\n")


def _map(fn, items, jobs: int):
    """Ordered map, in worker processes when jobs > 1."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# --- subcommands -----------------------------------------------------------------


def cmd_synth(a) -> list[dict]:
    from .audio import SynthCorpusSpec, speaker_profiles, synth_corpus
    from .manifest import label_counts

    kw = {}
    if a.speakers:
        kw["profiles"] = speaker_profiles(a.speakers, seed=a.seed)
    spec = SynthCorpusSpec(n_per_class=a.n_per_class, duration_range=(a.min_duration, a.max_duration),
                           seed=a.seed, **kw)
    records = synth_corpus(spec, a.out)
    return [{"label": k, "count": v} for k, v in sorted(label_counts(records).items())]


def _model_config(name: str, labels=None):
    from .nn import preset

    cfg = preset(name)
    return cfg.replace(labels=tuple(labels)) if labels else cfg


def _train_config(a, recipe: str):
    from .train import RECIPES, load_train_config

    cfg = load_train_config(a.config, RECIPES[recipe]) if a.config else RECIPES[recipe]
    over = {k: v for k, v in (("epochs", a.epochs), ("seed", a.seed), ("batch_size", a.batch_size),
                               ("lr", a.lr), ("loss", a.loss)) if v is not None}
    if a.no_augment:
        over["augment"] = False
    return cfg.replace(**over)


def _labels_of(records) -> list[str]:
    return sorted({r.label for r in records})


def _fit_rows(res) -> list[dict]:
    return [{"epoch": c.epoch, "metric": c.metric, "val_eer": c.val_eer, "path": c.path,
             "final": c is res.best} for c in sorted(res.checkpoints, key=lambda c: c.epoch)]


def cmd_train(a) -> list[dict]:
    from .manifest import read_manifest
    from .train import fit

    train, val = read_manifest(a.train), read_manifest(a.val)
    labels = a.labels.split(",") if a.labels else _labels_of(train)
    res = fit(train, val, _model_config(a.model, labels), _train_config(a, "initial"), out_dir=a.out)
    return _fit_rows(res)


def cmd_finetune(a) -> list[dict]:
    from .manifest import read_manifest
    from .nn import read_checkpoint
    from .train import fit, load_for_finetune

    train, val = read_manifest(a.train), read_manifest(a.val)
    base_cfg, _, _ = read_checkpoint(a.init)
    labels = a.labels.split(",") if a.labels else (_labels_of(train) if a.reinit_head else base_cfg.labels)
    model_cfg = base_cfg.replace(labels=tuple(labels))
    tcfg = _train_config(a, "finetune")
    init = load_for_finetune(a.init, model_cfg, reinit_head=a.reinit_head, seed=tcfg.seed)
    res = fit(train, val, model_cfg, tcfg, out_dir=a.out, init=init)
    return _fit_rows(res)


def _predict_file(job):
    from .audio import read_wav
    from .infer import Predictor

    ckpt, path = job
    pred = _predictor_cache.get(ckpt)
    if pred is None:
        pred = _predictor_cache[ckpt] = Predictor.from_checkpoint(ckpt)
    return pred.predict_buffer(read_wav(path, target_rate=16000))


_predictor_cache: dict = {}


def _stream_file(a, path) -> list[dict]:
    from .audio import read_wav
    from .frontend import compute_logmel, feature_stats
    from .nn import load_checkpoint
    from .stream import stream_init

    cfg, params = load_checkpoint(a.checkpoint)
    buf = read_wav(path, target_rate=16000)
    stats = feature_stats(compute_logmel(buf)) if a.stream_norm == "precomputed" else None
    state = stream_init(cfg, params, stats)
    hop = max(1, int(round(a.chunk_ms * buf.sample_rate / 1000)))
    rows = []

    def row(kind, i, p):
        r = {"utt_id": str(path), "chunk": i, "kind": kind}
        r.update({f"p_{c}": (None if p is None else float(v)) for c, v in zip(cfg.labels, p if p is not None else cfg.labels)})
        return r

    for i, start in enumerate(range(0, len(buf), hop)):
        rows.append(row("interim", i, state.push(buf.samples[start : start + hop])))
    p = state.finalize()
    rows.append(row("final", len(rows), p))
    return rows


def cmd_predict(a) -> list[dict]:
    from .infer import Predictor
    from .manifest import read_manifest
    from .metrics import score_rows, trial_rows, write_jsonl

    if a.stream:
        if a.manifest:
            raise UsageError("--stream works on WAV files, not manifests")
        return [r for path in a.inputs for r in _stream_file(a, path)]
    if a.manifest:
        pred = Predictor.from_checkpoint(a.checkpoint)
        trials, _ = pred.score_records(read_manifest(a.manifest), skip_unreadable=a.skip_unreadable)
        rows = trial_rows(trials)
    else:
        if not a.inputs:
            raise UsageError("give WAV files or --manifest")
        from .nn import read_checkpoint

        cfg, _, _ = read_checkpoint(a.checkpoint)
        probs = _map(_predict_file, [(a.checkpoint, p) for p in a.inputs], a.jobs)
        rows = score_rows([str(p) for p in a.inputs], probs, cfg.labels)
    if a.out:
        write_jsonl(rows, a.out)
    return rows


def cmd_eval(a) -> list[dict]:
    from .metrics import read_labels, read_scores, summarize

    labels = read_labels(a.labels) if a.labels else None
    trials = read_scores(a.scores, tuple(a.classes.split(",")), labels)
    return [summarize(trials, a.positive)]


def cmd_ensemble_search(a) -> list[dict]:
    from .ensemble import EnsemblePool, subset_search
    from .metrics import eer, read_labels, read_scores, write_scores

    classes = tuple(a.classes.split(","))
    labels = read_labels(a.labels) if a.labels else None
    members = [read_scores(p, classes, labels) for p in a.scores]
    ids = [Path(p).stem for p in a.scores]
    if len(set(ids)) != len(ids):
        ids = [str(p) for p in a.scores]
    pool = EnsemblePool(ids, members)
    res = subset_search(pool, a.positive, greedy=a.greedy, mode=a.mode)
    if a.out:
        write_scores(pool.fuse(res.indices, a.mode), a.out)
    rows = [{"member": mid, "eer": eer(m, a.positive)} for mid, m in zip(pool.member_ids, pool.members)]
    rows.append({"member": "+".join(res.member_ids), "eer": res.eer, "bac": res.bac, "selected": True})
    return rows


def _vad_file(job):
    from .audio import read_wav
    from .curate import VadConfig, vad_records

    path, label, max_segment = job
    return vad_records(read_wav(path), str(path), label, VadConfig(max_segment=max_segment))


def cmd_vad_segment(a) -> list[dict]:
    from .manifest import write_manifest

    per_file = _map(_vad_file, [(p, a.label, a.max_segment) for p in a.inputs], a.jobs)
    records = [r for recs in per_file for r in recs]
    if a.out:
        write_manifest(records, a.out)
    return [json.loads(r.to_json()) for r in records]


def cmd_mine_errors(a) -> list[dict]:
    from .curate import mine_errors
    from .infer import Predictor
    from .manifest import read_manifest, write_manifest

    wrong = mine_errors(Predictor.from_checkpoint(a.checkpoint), read_manifest(a.manifest))
    if a.out:
        write_manifest(wrong, a.out)
    return [json.loads(r.to_json()) for r in wrong]


def cmd_make_split(a) -> list[dict]:
    from .curate import make_split, split_report, trials_eer_fn
    from .manifest import read_manifest, write_manifest
    from .metrics import read_scores

    records = read_manifest(a.manifest)
    eer_of = None
    if a.reference_scores:
        trials = read_scores(a.reference_scores)
        by_id = {u: i for i, u in enumerate(trials.utt_ids)}
        missing = [r.utt_id for r in records if r.utt_id not in by_id]
        if missing:
            raise ValueError(f"reference scores lack {len(missing)} records, e.g. {missing[0]}")
        aligned = trials.subset([by_id[r.utt_id] for r in records])
        eer_of = trials_eer_fn(aligned, a.positive)
    train, val = make_split(records, a.val_fraction, a.seed, a.candidates, eer_of)
    write_manifest(train, a.out_train)
    write_manifest(val, a.out_val)
    rep = split_report(train, val)
    return [{"split": part, "label": lab, **v} for part, labs in rep.items() for lab, v in labs.items()]


def cmd_class_weights(a) -> list[dict]:
    from .loss import compute_class_weights
    from .manifest import read_manifest

    records = read_manifest(a.manifest)
    labels = a.labels.split(",") if a.labels else _labels_of(records)
    return [{"label": k, "weight": v} for k, v in compute_class_weights(records, labels).items()]


def cmd_count_params(a) -> list[dict]:
    from .nn import count_params, init_params, preset

    cfg = preset(a.model)
    row = {"model": cfg.name or a.model, "params": count_params(cfg)}
    if a.verify:
        row["enumerated"] = init_params(cfg).n_trainable()
    return [row]


def cmd_dump_features(a) -> list[dict]:
    from .audio import read_wav
    from .frontend import compute_logmel, extract, write_features

    buf = read_wav(a.input, target_rate=16000)
    F = compute_logmel(buf) if a.norm == "none" else extract(buf, a.norm)
    write_features(F, a.out)
    return [{"path": a.out, "n_mels": F.values.shape[0], "frames": F.n_frames}]


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json-lines", action="store_true", help="print one JSON object per result row")

    def seed(p, default=None):
        p.add_argument("--seed", type=int, default=default, help="random seed (reproducible runs)")

    def training(p):
        p.add_argument("--train", required=True, help="training manifest")
        p.add_argument("--val", required=True, help="validation manifest")
        p.add_argument("--out", required=True, help="output directory for checkpoints and metrics.jsonl")
        p.add_argument("--config", help="training config TOML (overrides the recipe defaults)")
        p.add_argument("--labels", help="comma-separated class labels (default: sorted manifest labels)")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--loss", choices=("ce_equal", "ce_weighted", "aam"))
        p.add_argument("--no-augment", action="store_true", help="disable speed perturbation and SpecAugment")
        seed(p)

    top = _Parser(prog="langid", description="Spoken language identification toolkit.",
                  epilog="Exit codes: 0 success, 1 usage error, 2 runtime error. "
                         "Set LANGID_LOG=debug|info|warning|error for diagnostics.")
    top.add_argument("--version", action="version", version=f"langid {__version__}")
    sub = top.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a seeded synthetic corpus and manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--min-duration", type=float, default=1.0)
    p.add_argument("--max-duration", type=float, default=2.0)
    p.add_argument("--speakers", type=int, default=0, help="synthesize N speaker classes instead of languages")
    seed(p, 0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model from scratch")
    p.add_argument("--model", default="tiny", help="preset name or model TOML path")
    training(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune from a checkpoint")
    p.add_argument("--init", required=True, help="checkpoint to start from")
    p.add_argument("--reinit-head", action="store_true", help="re-initialize the classification layer")
    training(p)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("predict", parents=[common], help="class probabilities for WAV files or a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("inputs", nargs="*", help="WAV files")
    p.add_argument("--manifest")
    p.add_argument("--out", help="write a score file (JSON lines)")
    p.add_argument("--skip-unreadable", action="store_true")
    p.add_argument("--stream", action="store_true", help="chunked streaming inference")
    p.add_argument("--chunk-ms", type=float, default=200.0)
    p.add_argument("--stream-norm", choices=("running", "precomputed"), default="running")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_predict)

    def scoring(p):
        p.add_argument("--labels", help="labels file (utt_id/label JSON lines) or manifest")
        p.add_argument("--classes", default="en,zh")
        p.add_argument("--positive", default="en", help="target class for EER")

    p = sub.add_parser("eval", parents=[common], help="EER, BAC and micro accuracy of a score file")
    p.add_argument("--scores", required=True)
    scoring(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ensemble-search", parents=[common], help="best fused subset of member score files")
    p.add_argument("--scores", required=True, nargs="+")
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--mode", choices=("sum_softmax", "mean"), default="sum_softmax")
    p.add_argument("--out", help="write the fused scores of the selected subset")
    scoring(p)
    p.set_defaults(fn=cmd_ensemble_search)

    p = sub.add_parser("vad-segment", parents=[common], help="energy-VAD segmentation into a manifest")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--label", required=True)
    p.add_argument("--max-segment", type=float, default=8.0)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_vad_segment)

    p = sub.add_parser("mine-errors", parents=[common], help="records a reference model misclassifies")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_mine_errors)

    p = sub.add_parser("make-split", parents=[common], help="recording-disjoint stratified train/val split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--candidates", type=int, default=1)
    p.add_argument("--reference-scores", help="reference model score file for EER-gap selection")
    p.add_argument("--positive", default="en")
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-val", required=True)
    seed(p, 0)
    p.set_defaults(fn=cmd_make_split)

    p = sub.add_parser("class-weights", parents=[common], help="inverse-frequency class weights N/N_x")
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels")
    p.set_defaults(fn=cmd_class_weights)

    p = sub.add_parser("count-params", parents=[common], help="trainable parameter count of a preset")
    p.add_argument("--model", default="large")
    p.add_argument("--verify", action="store_true", help="also enumerate the initialized tensors")
    p.set_defaults(fn=cmd_count_params)

    p = sub.add_parser("dump-features", parents=[common], help="write log-mel features of a WAV file")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--norm", choices=("per_bin", "per_frame", "none"), default="per_bin")
    p.set_defaults(fn=cmd_dump_features)
    return top


def _setup_logging() -> None:
    level = os.environ.get("LANGID_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        rows = args.fn(args)
    except SystemExit as e:  # --help / --version
        return 0 if e.code in (0, None) else 1
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, ArithmeticError, KeyError) as e:
        print(f"langid: error: {e}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 2
    emit(rows, args.json_lines)
    return 0


if __name__ == "__main__":
    sys.exit(main())
