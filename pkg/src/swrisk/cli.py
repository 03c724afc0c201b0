"""``swrisk`` command-line entry point.

Subcommands: synth, extract, pool, train, eval, predict, tsne. Every flag
can also come from a TOML config file (``--config``); flags win over the
file. Logs go to stderr; artifacts are only written to files.
Exit codes: 0 ok, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import SWRiskError, UndefinedMetricError

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

log = logging.getLogger("swrisk")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
FEATURE_VERSION = {1: None, 2: "v2", 3: "v3"}


class UsageError(Exception):
    pass


def _default_seed() -> int:
    raw = os.environ.get("SW_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"SW_SEED={raw!r} is not an integer") from None


def _split_triple(text: str) -> tuple[int, int, int]:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected train,dev,test counts, got {text!r}")
    return tuple(int(p) for p in parts)


# -- parser -----------------------------------------------------------------

class _DefaultsFormatter(argparse.HelpFormatter):
    """Append ``(default: X)`` to every option whose default is informative."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.default in (None, False, argparse.SUPPRESS) or "%(default)" in text:
            return text
        if action.option_strings or action.nargs in (argparse.OPTIONAL, argparse.ZERO_OR_MORE):
            text = f"{text} (default: %(default)s)".lstrip()
        return text


def build_parser() -> argparse.ArgumentParser:
    fmt = _DefaultsFormatter
    parser = argparse.ArgumentParser(
        prog="swrisk", formatter_class=fmt,
        description="Multimodal speech-based suicide-risk classification pipeline.")
    parser.add_argument("--about", action="version", version=f"swrisk {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--config", type=Path, default=None,
                       help="TOML file with defaults for this command (flags override it)")
        p.add_argument("--seed", type=int, default=None,
                       help="random seed (falls back to $SW_SEED, then 0)")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                       help="worker processes for batch extraction and fold training")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        return p

    p = command("synth", "generate a synthetic stand-in corpus")
    p.add_argument("--out", type=Path, required=True, help="corpus root directory")
    p.add_argument("--n-subjects", type=int, default=600, help="number of subjects")
    p.add_argument("--split", type=_split_triple, default=(400, 100, 100),
                   help="train,dev,test subject counts")
    p.add_argument("--audio-dim", type=int, default=1024, help="audio embedding width")
    p.add_argument("--text-dim", type=int, default=1024, help="text embedding width")
    p.add_argument("--class-separation", type=float, default=1.0,
                   help="distance between class means; 0 makes labels unlearnable")
    p.add_argument("--tasks", type=int, default=3, help="interview tasks per subject")
    p.add_argument("--wav-seconds", type=float, default=3.0, help="length of each WAV file")
    p.add_argument("--no-withhold", action="store_true",
                   help="put test labels into labels.csv instead of test_labels.csv")
    p.set_defaults(func=cmd_synth)

    p = command("extract", "compute acoustic feature vectors from WAV files")
    p.add_argument("--in", dest="in_dir", type=Path, required=True,
                   help="directory searched recursively for .wav files")
    p.add_argument("--out", type=Path, required=True, help="output directory for 1xD SWEM files")
    p.add_argument("--version", dest="feature_version", choices=("v2", "v3"), default="v3",
                   help="v2: 40 MFCC means; v3: MFCC + spectral contrast + pitch stats (50)")
    p.add_argument("--csv", type=Path, default=None,
                   help="also write a per-file feature CSV here")
    p.set_defaults(func=cmd_extract)

    p = command("pool", "pool embedding matrices (one per task) into a single 1xD vector")
    p.add_argument("--in", dest="inputs", type=Path, nargs="+", required=True,
                   help="SWEM matrices; each is pooled, then the results are averaged")
    p.add_argument("--strategy", choices=("mean", "cls_first"), default="mean",
                   help="row pooling: mean of rows or the first ([CLS]) row")
    p.add_argument("--out", type=Path, required=True, help="output SWEM path")
    p.set_defaults(func=cmd_pool)

    p = command("train", "train one submission variant on a manifest")
    _data_flags(p)
    p.add_argument("--submission", type=int, choices=(1, 2, 3), required=True,
                   help="1: early concatenation, 2: modality attention, 3: weighted attention + mixup ensemble")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--epochs", type=int, default=None, help="default: 300 (sub 1) or 150")
    p.add_argument("--lr", type=float, default=None, help="default: 0.05 (sub 1) or 1e-3")
    p.add_argument("--batch-size", type=int, default=None,
                   help="default: full batch (sub 1) or 32; 0 = full batch")
    p.add_argument("--patience", type=int, default=None,
                   help="early-stopping patience in epochs; default 30 (sub 1) or 15; -1 disables")
    p.add_argument("--folds", type=int, default=5, help="ensemble folds (sub 3)")
    p.add_argument("--mixup-alpha", type=float, default=0.2,
                   help="Beta(alpha, alpha) parameter for mixup (sub 3)")
    p.add_argument("--no-mixup", action="store_true", help="disable mixup for sub 3")
    p.add_argument("--proj-dim", type=int, default=128, help="per-modality projection width")
    p.add_argument("--hidden-dim", type=int, default=64, help="classifier hidden width")
    p.add_argument("--attn-dim", type=int, default=32, help="attention scorer width")
    p.add_argument("--audio-pool", choices=("mean", "cls_first"), default="mean",
                   help="row pooling for audio embeddings")
    p.add_argument("--text-pool", choices=("mean", "cls_first"), default="mean",
                   help="row pooling for text embeddings")
    p.add_argument("--f1-average", choices=("binary", "macro"), default="binary",
                   help="F1 over the at-risk class or the mean over both classes")
    p.set_defaults(func=cmd_train)

    p = command("eval", "score a trained model on a labelled split")
    _data_flags(p)
    p.add_argument("--model", type=Path, required=True, help="checkpoint file or ensemble directory")
    p.add_argument("--split", choices=("train", "dev", "test"), default="dev", help="split to score")
    p.add_argument("--out", type=Path, required=True, help="metrics JSON path")
    p.add_argument("--f1-average", choices=("binary", "macro"), default="binary",
                   help="F1 over the at-risk class or the mean over both classes")
    p.set_defaults(func=cmd_eval)

    p = command("predict", "write per-subject at-risk probabilities")
    _data_flags(p)
    p.add_argument("--model", type=Path, required=True, help="checkpoint file or ensemble directory")
    p.add_argument("--split", choices=("train", "dev", "test"), default="test", help="split to predict")
    p.add_argument("--out", type=Path, required=True, help="CSV path")
    p.set_defaults(func=cmd_predict)

    p = command("tsne", "raw vs pre-logit t-SNE projections of one split")
    _data_flags(p)
    p.add_argument("--model", type=Path, required=True, help="checkpoint file or ensemble directory")
    p.add_argument("--modality", choices=("audio", "text", "acoustic"), default="audio",
                   help="raw modality shown next to the pre-logit space")
    p.add_argument("--split", choices=("train", "dev", "test"), default="dev", help="split to project")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--perplexity", type=float, default=None, help="default min(30, (n-1)/3)")
    p.add_argument("--iters", type=int, default=1000, help="gradient-descent iterations")
    p.set_defaults(func=cmd_tsne)
    return parser


def _data_flags(p):
    p.add_argument("--manifest", type=Path, required=True, help="dataset manifest JSON")
    p.add_argument("--labels", type=Path, default=None,
                   help="label CSV overriding the manifest's labels entry")


def _scan(argv: list[str], commands) -> tuple[str | None, str | None]:
    """Find the subcommand and --config path without a full parse."""
    command = config = None
    it = iter(range(len(argv)))
    for i in it:
        a = argv[i]
        if a == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
            next(it, None)
        elif a.startswith("--config="):
            config = a.split("=", 1)[1]
        elif command is None and a in commands:
            command = a
    return command, config


def _coerce(action: argparse.Action, value):
    if isinstance(value, bool) or action.type is None:
        return value
    if action.type is _split_triple and isinstance(value, list):
        return tuple(int(v) for v in value)
    if action.type in (Path, _split_triple):
        return action.type(str(value))
    return action.type(value)


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv``, letting a --config TOML file supply defaults.

    Top-level keys and keys in a table named after the subcommand apply;
    tables for other subcommands are ignored. Unknown keys are rejected.
    """
    subs = _subparsers(parser)
    command, config = _scan(argv, subs)
    if command is not None and config is not None:
        try:
            with open(config, "rb") as fh:
                doc = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise UsageError(f"cannot read config {config}: {exc}") from None
        values = {k: v for k, v in doc.items() if not isinstance(v, dict)}
        section = doc.get(command, {})
        if not isinstance(section, dict):
            raise UsageError(f"config key {command!r} must be a table")
        values.update(section)
        sub = subs[command]
        dests = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
        unknown = sorted(k for k in values if k.replace("-", "_") not in dests)
        if unknown:
            raise UsageError(f"unknown config keys for '{command}': {', '.join(unknown)}")
        defaults = {}
        for key, value in values.items():
            action = dests[key.replace("-", "_")]
            try:
                defaults[action.dest] = _coerce(action, value)
            except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
        sub.set_defaults(**defaults)
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
    return parser.parse_args(argv)


def _subparsers(parser) -> dict:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


# -- helpers ----------------------------------------------------------------

def _canonical_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_model(path: Path):
    from .fusion import EnsembleModel, FusionModel
    if path.is_dir():
        if not (path / "ensemble.json").exists():
            raise FileNotFoundError(f"{path} is not an ensemble directory")
        model, manifest = EnsembleModel.load(path)
        return model, manifest.get("extra", {})
    if not path.exists():
        raise FileNotFoundError(f"model {path} not found")
    model, env = FusionModel.load(path)
    return model, env.get("extra", {})


def _dataset_for(args, extra: dict, include_acoustic: bool):
    from .embedding_io import assemble_dataset
    return assemble_dataset(args.manifest, audio_pool=extra.get("audio_pool", "mean"),
                            text_pool=extra.get("text_pool", "mean"),
                            acoustic_version=extra.get("acoustic_version"),
                            labels_path=args.labels, include_acoustic=include_acoustic)


# -- commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import SynthConfig, generate
    cfg = SynthConfig(n_subjects=args.n_subjects, split=args.split, audio_dim=args.audio_dim,
                      text_dim=args.text_dim, class_separation=args.class_separation,
                      tasks_per_subject=args.tasks, seed=args.seed,
                      wav_seconds=args.wav_seconds, withhold_test_labels=not args.no_withhold)
    layout = generate(cfg, args.out)
    log.info("manifest: %s", layout.manifest)
    return EXIT_OK


def _extract_one(task):
    from .dsp import extract_file
    path, version = task
    try:
        return extract_file(path, version).values, None
    except (SWRiskError, OSError, ValueError) as exc:
        return None, f"{path}: {exc}"


def cmd_extract(args) -> int:
    from .embedding_io import write_swem
    in_dir = args.in_dir
    if not in_dir.is_dir():
        raise FileNotFoundError(f"input directory {in_dir} does not exist")
    wavs = sorted(in_dir.rglob("*.wav"))
    if not wavs:
        raise FileNotFoundError(f"no .wav files under {in_dir}")
    args.out.mkdir(parents=True, exist_ok=True)
    tasks = [(str(w), args.feature_version) for w in wavs]
    rows = []
    if args.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = pool.map(_extract_one, tasks, chunksize=8)
            done = _store_features(results, wavs, in_dir, args.out, rows, write_swem)
    else:
        done = _store_features(map(_extract_one, tasks), wavs, in_dir, args.out, rows, write_swem)
    if args.csv is not None and rows:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id", "file"] + [f"f{i}" for i in range(rows[0][2].size)])
            for sid, rel, vec in rows:
                w.writerow([sid, rel] + [repr(float(v)) for v in vec])
    _rewrite_manifest(in_dir, args.out, done)
    log.info("extracted %d %s feature vectors into %s", len(done), args.feature_version, args.out)
    return EXIT_OK


def _store_features(results, wavs, in_dir, out_dir, rows, write_swem):
    done = {}
    for wav, (vec, err) in zip(wavs, results):
        if err is not None:
            raise SWRiskError(f"feature extraction failed for {err}")
        rel = wav.relative_to(in_dir)
        target = (out_dir / rel).with_suffix(".swem")
        target.parent.mkdir(parents=True, exist_ok=True)
        write_swem(vec[None, :], target)
        done[rel.as_posix()] = target
        rows.append((wav.stem.split("_")[0], rel.as_posix(), vec))
    return done


def _rewrite_manifest(in_dir: Path, out_dir: Path, done: dict) -> None:
    """Mirror ``in_dir/manifest.json`` with precomputed acoustic files."""
    src = in_dir / "manifest.json"
    if not src.exists():
        return
    manifest = json.loads(src.read_text())

    def moved(p):
        return os.path.relpath((in_dir / p).resolve(), out_dir.resolve())

    for entry in manifest.get("subjects", []):
        for key in ("audio", "text"):
            entry[key] = [moved(p) for p in entry.get(key, [])]
        wav = entry.pop("wav", None)
        if wav:
            entry["acoustic"] = [os.path.relpath(done[Path(p).as_posix()].resolve(), out_dir.resolve())
                                 for p in wav]
    if manifest.get("labels"):
        manifest["labels"] = moved(manifest["labels"])
    _write_json(out_dir / "manifest.json", manifest)


def cmd_pool(args) -> int:
    from .embedding_io import pool_rows, read_swem, write_swem
    vecs = [pool_rows(read_swem(p), args.strategy) for p in args.inputs]
    if len({v.size for v in vecs}) != 1:
        raise SWRiskError("input matrices disagree on embedding dim")
    write_swem(np.mean(vecs, axis=0)[None, :], args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    from .fusion import SUBMISSION_ARCH, FusionConfig
    from .metrics import evaluate
    from .nn import MixupConfig
    from .train import (default_train_config, stack_inputs, stack_labels, train,
                        train_ensemble_v3)

    arch = SUBMISSION_ARCH[args.submission]
    extra = {"submission": args.submission, "audio_pool": args.audio_pool,
             "text_pool": args.text_pool, "acoustic_version": FEATURE_VERSION[args.submission]}
    data = _dataset_for(args, extra, include_acoustic=args.submission != 1)
    if args.submission == 1:
        from .embedding_io import load_manifest
        if any(e.get("acoustic") or e.get("wav") for e in load_manifest(args.manifest)["subjects"]):
            log.warning("submission 1 uses audio and text only; acoustic inputs are ignored")
    if not data.train or not data.dev:
        raise SWRiskError("manifest needs non-empty train and dev splits")

    overrides = {"seed": args.seed, "folds": args.folds}
    for key in ("epochs", "lr"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if args.batch_size is not None:
        overrides["batch_size"] = None if args.batch_size == 0 else args.batch_size
    if args.patience is not None:
        overrides["patience"] = None if args.patience < 0 else args.patience
    tcfg = default_train_config(arch, **overrides)
    if args.submission == 3:
        tcfg = replace(tcfg, mixup=MixupConfig(alpha=args.mixup_alpha, enabled=not args.no_mixup))

    first = data.train[0]
    fcfg = FusionConfig(arch, first.audio_vec.size, first.text_vec.size,
                        None if args.submission == 1 else first.acoustic_vec.size,
                        proj_dim=args.proj_dim, hidden_dim=args.hidden_dim, attn_dim=args.attn_dim)
    run_cfg = {"fusion": fcfg.__dict__, "train": {**tcfg.__dict__, "mixup": tcfg.mixup.__dict__},
               **extra}
    extra["config_hash"] = _canonical_hash(run_cfg)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)

    if args.submission == 3:
        model, histories = train_ensemble_v3(tcfg, fcfg, data.train, data.dev, jobs=args.jobs)
        model.save(out / "ensemble", extra=extra)
        for i, h in enumerate(histories):
            h.write_csv(out / f"history_fold{i + 1}.csv")
        model_path = out / "ensemble"
    else:
        model, hist = train(tcfg, fcfg, data.train, data.dev)
        model.save(out / "model.ckpt", seed=tcfg.seed, extra=extra)
        hist.write_csv(out / "history.csv")
        model_path = out / "model.ckpt"
    _write_json(out / "run_config.json", run_cfg)

    # score the stored (float32) weights so train and eval agree exactly
    stored, _ = _load_model(model_path)
    probs = stored.predict_proba(stack_inputs(data.dev, arch))[:, 1]
    metrics = evaluate(probs, stack_labels(data.dev), args.f1_average)
    _write_json(out / "metrics_dev.json", _metrics_doc("dev", metrics, extra["config_hash"]))
    log.info("submission %d dev: accuracy %.3f, F1 %.3f, AUROC %.3f", args.submission,
             metrics.accuracy, metrics.f1, metrics.auroc)
    return EXIT_OK


def _metrics_doc(split, m, config_hash):
    return {"split": split, "accuracy": m.accuracy, "f1": m.f1, "auroc": m.auroc,
            "precision": m.precision, "recall": m.recall, "f1_average": m.f1_average,
            "confusion": m.confusion, "n": m.n, "config_hash": config_hash}


def cmd_eval(args) -> int:
    from .metrics import evaluate
    from .train import stack_inputs, stack_labels
    model, extra = _load_model(args.model)
    arch = model.cfg.architecture
    data = _dataset_for(args, extra, include_acoustic=arch != "early_concat_v1")
    records = data[args.split]
    if not records:
        raise SWRiskError(f"split {args.split!r} is empty")
    probs = model.predict_proba(stack_inputs(records, arch))[:, 1]
    try:
        metrics = evaluate(probs, stack_labels(records), args.f1_average)
    except UndefinedMetricError as exc:
        raise SWRiskError(f"{args.split}: {exc}") from None
    _write_json(args.out, _metrics_doc(args.split, metrics, extra.get("config_hash")))
    log.info("%s: accuracy %.3f, F1 %.3f, AUROC %.3f", args.split, metrics.accuracy,
             metrics.f1, metrics.auroc)
    return EXIT_OK


def cmd_predict(args) -> int:
    from .fusion import predict_label
    from .train import stack_inputs
    model, extra = _load_model(args.model)
    arch = model.cfg.architecture
    data = _dataset_for(args, extra, include_acoustic=arch != "early_concat_v1")
    records = data[args.split]
    if not records:
        raise SWRiskError(f"split {args.split!r} is empty")
    probs = model.predict_proba(stack_inputs(records, arch))
    labels = predict_label(probs)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "prob_at_risk", "label"])
        for r, p, lab in zip(records, probs[:, 1], labels):
            w.writerow([r.subject_id, f"{p:.9g}", int(lab)])
    return EXIT_OK


def cmd_tsne(args) -> int:
    from .analysis import TsneConfig, export_scatter, extract_prelogit, standardize, tsne
    from .train import stack_inputs
    model, extra = _load_model(args.model)
    arch = model.cfg.architecture
    if args.modality == "acoustic" and arch == "early_concat_v1":
        raise SWRiskError("submission 1 models have no acoustic modality")
    data = _dataset_for(args, extra, include_acoustic=arch != "early_concat_v1")
    records = data[args.split]
    if len(records) < 5:
        raise SWRiskError(f"split {args.split!r} has {len(records)} subjects; t-SNE needs 5")
    labels = None
    if all(r.label is not None for r in records):
        labels = np.array([r.label for r in records])
    ids = [r.subject_id for r in records]
    cfg = TsneConfig(perplexity=args.perplexity, iters=args.iters, seed=args.seed)
    raw = standardize(np.stack([r.vector(args.modality) for r in records]))
    pre = extract_prelogit(model, stack_inputs(records, arch))
    args.out.mkdir(parents=True, exist_ok=True)
    for name, X, title in ((f"raw_{args.modality}", raw, f"Raw {args.modality} embeddings"),
                           ("prelogit", pre, "Pre-logit embeddings")):
        proj = tsne(X, cfg, labels=labels, ids=ids)
        export_scatter(proj, args.out / name, title=title)
        log.info("%s: final KL %.4f", name, proj.kl_trace[-1])
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if args.seed is None:
            args.seed = _default_seed()
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"swrisk: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (SWRiskError, OSError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
