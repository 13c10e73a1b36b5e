"""``beats-forge`` command-line entry point.

Exit codes: 0 success, 1 domain error, 2 usage error. Diagnostics go to
stderr; results are written as files under ``--out``.
"""

import argparse
import json
import sys
from contextlib import nullcontext
from pathlib import Path

from .exceptions import BeatsForgeError
from .features import compute_fbank, normalize_fbank
from .io import read_tokens, write_fbank

VERBS = ("synth", "featurize", "stats", "tokenize", "train-tokenizer", "pretrain", "finetune",
         "probe", "iterate", "report", "gradcheck")

_UNTIL = {"train-tokenizer": "a", "tokenize": "b", "pretrain": "c", "finetune": "d",
          "iterate": "e"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return path


def build_parser():
    parser = _Parser(prog="beats-forge", description="Iterative audio tokenizer / "
                     "masked-prediction pre-training toolkit.")
    sub = parser.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)
    sub.required = True

    def verb(name, help_text, stage=False):
        p = sub.add_parser(name, help=help_text, allow_abbrev=False)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value (dotted key, JSON value)")
        p.add_argument("--seed", type=int, help="override every seed")
        p.add_argument("--out", help="output directory")
        if stage:
            p.add_argument("--stage", help="stage number (1-based) or stage name")
            p.add_argument("--force", action="store_true", help="recompute completed sub-stages")
        return p

    verb("synth", "write the synthetic corpus (WAV + manifest.csv)")
    verb("featurize", "write normalized filterbank files for every clip")
    verb("stats", "compute corpus normalization statistics")
    for name in ("train-tokenizer", "tokenize", "pretrain", "finetune"):
        verb(name, f"run a stage up to its {name} sub-stage", stage=True)
    verb("iterate", "run one stage (or every stage) to completion", stage=True)
    verb("probe", "linear-probe a stage's pre-trained model", stage=True)
    rep = verb("report", "token quality report from token files and a manifest")
    rep.add_argument("--tokens", nargs="+", required=True,
                     help=".tok files or directories holding them")
    rep.add_argument("--labels", required=True, help="manifest CSV with clip_id and class")
    verb("gradcheck", "run the finite-difference gradient suite")
    return parser


def _config(args):
    from .pipeline import apply_override, load_config, make_config
    cfg = load_config(args.config) if args.config else make_config()
    for assignment in args.set:
        apply_override(cfg, assignment)
    if args.seed is not None:
        cfg["corpus"]["seed"] = args.seed
        for stage in cfg["stages"]:
            stage["seed"] = args.seed
    if args.out and args.verb not in ("report",):
        cfg["out"] = args.out
    return make_config(cfg)


def cmd_synth(args, cfg):
    from .corpus import DEFAULT_CLASSES, generate_corpus, write_corpus
    corpus = generate_corpus(DEFAULT_CLASSES, cfg["corpus"]["n_per_class"], cfg["corpus"]["seed"])
    manifest = write_corpus(corpus, cfg["out"])
    _log(f"wrote {len(corpus)} clips; manifest {manifest}")


def cmd_stats(args, cfg):
    from .pipeline import DataContext
    data = DataContext.from_config(cfg)
    stats = data.extractor.stats_
    path = _write_json(Path(cfg["out"]) / "stats.json",
                       {"mean": stats.mean, "std": stats.std, "corpus_id": stats.corpus_id})
    _log(f"mean {stats.mean:.6f} std {stats.std:.6f} -> {path}")


def cmd_featurize(args, cfg):
    from .pipeline import DataContext
    data = DataContext.from_config(cfg)
    out = Path(cfg["out"]) / "fbank"
    out.mkdir(parents=True, exist_ok=True)
    for clip in data.clips:
        f = normalize_fbank(compute_fbank(clip.waveform), data.extractor.stats_)
        write_fbank(out / f"{clip.clip_id}.fb", f.frames)
    _log(f"wrote {len(data.clips)} filterbank files to {out}")


def _stages(cfg, args):
    from .pipeline import IterationPlan
    plan = IterationPlan.from_config(cfg)
    if args.stage is None:
        return [s.name for s in plan.stages]
    return [plan.stages[plan.index(args.stage)].name]


def cmd_stage(args, cfg):
    from .pipeline import DataContext, run_iteration
    names = _stages(cfg, args)
    if args.verb != "iterate" and args.stage is None:
        raise UsageError(f"beats-forge {args.verb}: --stage is required")
    data = DataContext.from_config(cfg)
    for name in names:
        result = run_iteration(cfg, name, data=data, force=args.force, log=_log,
                               until=_UNTIL[args.verb])
        _log(f"[{name}] done: {result if isinstance(result, list) else 'complete'}")


def cmd_probe(args, cfg):
    from .checkpoint import load_estimator
    from .exceptions import DependencyError
    from .pipeline import DataContext, IterationPlan, linear_probe
    if args.stage is None:
        raise UsageError("beats-forge probe: --stage is required")
    plan = IterationPlan.from_config(cfg)
    i = plan.index(args.stage)
    path = plan.stage_dir(i) / "model.ckpt"
    if not path.exists():
        raise DependencyError(f"no pre-trained model at {path}")
    data = DataContext.from_config(cfg)
    tx, ty, _ = data.split("train")
    vx, vy, _ = data.split("valid")
    acc = linear_probe(load_estimator(path), tx, ty, vx, vy, **cfg["probe"])
    out = _write_json(plan.stage_dir(i) / "probe.json", {"stage": plan.stages[i].name,
                                                         "accuracy": acc})
    _log(f"probe accuracy {acc:.4f} -> {out}")


def _token_files(specs):
    files = []
    for spec in specs:
        p = Path(spec)
        files.extend(sorted(p.glob("*.tok")) if p.is_dir() else [p])
    return files


def cmd_report(args, cfg):
    from .corpus import read_manifest
    from .pipeline import token_class_nmi
    from .sdtok import codebook_utilization
    classes = {row["clip_id"]: int(row["class"]) for row in read_manifest(args.labels)}
    seqs, labels, n_codes = [], [], None
    for f in _token_files(args.tokens):
        if f.stem not in classes:
            raise BeatsForgeError(f"{f}: clip id {f.stem!r} not in {args.labels}")
        tokens, k = read_tokens(f)
        n_codes = k if n_codes is None else n_codes
        if k != n_codes:
            raise BeatsForgeError(f"{f}: codebook size {k} differs from {n_codes}")
        seqs.append(tokens)
        labels.append(classes[f.stem])
    if not seqs:
        raise BeatsForgeError("no token files given")
    used, ppl = codebook_utilization(seqs, n_codes)
    doc = {"clips": len(seqs), "n_codes": n_codes, "nmi": token_class_nmi(seqs, labels),
           "utilization": used, "perplexity": ppl}
    out = _write_json(Path(args.out or ".") / "report.json", doc)
    _log(f"nmi {doc['nmi']:.4f} utilization {used:.4f} -> {out}")


def cmd_gradcheck(args, cfg):
    from .diagnostics import TOLERANCE, gradient_suite
    results = gradient_suite(args.seed or 0)
    for r in results:
        _log(f"{'ok  ' if r.passed else 'FAIL'} {r.name:32s} {r.error:.3e}")
    doc = {"tolerance": TOLERANCE, "results": [{"name": r.name, "error": r.error,
                                                "passed": r.passed} for r in results]}
    _write_json(Path(args.out or ".") / "gradcheck.json", doc)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise BeatsForgeError(f"{len(failed)} gradient checks failed: {', '.join(failed)}")


_COMMANDS = {"synth": cmd_synth, "featurize": cmd_featurize, "stats": cmd_stats,
             "probe": cmd_probe, "report": cmd_report, "gradcheck": cmd_gradcheck}


def _thread_limit():
    import os
    if "BEATS_FORGE_THREADS" not in os.environ:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    from .pipeline import worker_count
    return threadpool_limits(worker_count())


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"{exc}\nverbs: {', '.join(VERBS)}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        with _thread_limit():
            needs_cfg = args.verb not in ("report", "gradcheck")
            cfg = _config(args) if needs_cfg else None
            _COMMANDS.get(args.verb, cmd_stage)(args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (BeatsForgeError, OSError, ValueError) as exc:
        print(f"beats-forge {args.verb}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
