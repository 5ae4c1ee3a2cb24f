"""Command-line entry point:

    phaseflow synth  --grammar mgh-like --videos 100 --seed 1 --out data/
    phaseflow train  --data data/ --config run.cfg --out ckpt/
    phaseflow infer  --ckpt ckpt/best.ckpt --data data/ --out pred/
    phaseflow eval   --pred pred/ --data data/ --out report/
    phaseflow ablate --data data/ --config run.cfg --seeds 1,2,3 --out ablation/

Exit codes: 0 success, 2 usage error, 3 data validation error, 4 numeric
failure. Config files are flat `key = value` text; the resolved config is
echoed into every output directory. PHASEFLOW_THREADS caps worker threads.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from . import eval as eval_mod
from . import model as model_mod
from . import train as train_mod
from .core import (
    DataValidationError,
    ExperimentConfig,
    NumericError,
    PhaseTaxonomy,
    UsageError,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

LOCK_NAME = ".phaseflow.lock"

ABLATION_ARMS = {
    "baseline": ((), False),
    "gabor": (("gabor",), False),
    "csl": (("csl",), False),
    "hmm": (("hmm",), False),
    "ssm": (("csl", "gabor", "hmm"), False),
    "acausal": (("csl", "gabor", "hmm"), True),
}
DEFAULT_ARMS = "baseline,gabor,csl,ssm,acausal"


# ---------------------------------------------------------------------------
# Config file handling (flat key = value lines, '#' comments)

def parse_config_text(text: str) -> ExperimentConfig:
    raw: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        raw[key] = value
    d: dict[str, object] = {}
    for key, value in raw.items():
        if key in ("enabled_ssm_features", "csl_levels"):
            items = [v.strip() for v in str(value).split(",") if v.strip()]
            if items == ["none"]:
                items = []
            d[key] = items
        elif key == "acausal":
            if str(value).lower() not in ("true", "false", "0", "1"):
                raise UsageError(f"config key acausal must be true/false, got {value!r}")
            d[key] = str(value).lower() in ("true", "1")
        else:
            d[key] = value
    return ExperimentConfig.from_dict(d)


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path) as fh:
            return parse_config_text(fh.read())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None


def write_config_echo(outdir: str, config: ExperimentConfig) -> None:
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value) or "none"
        lines.append(f"{key} = {value}")
    with open(os.path.join(outdir, "config.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


class output_dir:
    """Create the output directory and hold its lock file for the duration of
    the command; concurrent invocations on the same directory are refused."""

    def __init__(self, path: str):
        self.path = path
        self.lock = os.path.join(path, LOCK_NAME)

    def __enter__(self) -> str:
        os.makedirs(self.path, exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(
                f"output directory {self.path} is locked by another invocation "
                f"(stale? remove {self.lock})") from None
        os.close(fd)
        return self.path

    def __exit__(self, *exc):
        try:
            os.unlink(self.lock)
        except FileNotFoundError:
            pass
        return False


# ---------------------------------------------------------------------------
# synth

def cmd_synth(args) -> int:
    if args.grammar in data_mod.GRAMMAR_PRESETS:
        grammar = data_mod.GRAMMAR_PRESETS[args.grammar]()
    elif os.path.exists(args.grammar):
        with open(args.grammar) as fh:
            grammar = data_mod.WorkflowGrammar.from_dict(json.load(fh))
    else:
        raise UsageError(
            f"unknown grammar {args.grammar!r}: not a preset "
            f"({', '.join(sorted(data_mod.GRAMMAR_PRESETS))}) or a file")
    if args.videos < 1:
        raise UsageError("--videos must be >= 1")
    with output_dir(args.out) as out:
        seqs = data_mod.generate_dataset(grammar, args.videos, args.seed)
        splits = data_mod.default_split(args.videos)
        manifest = {
            "schema_version": 1,
            "grammar": grammar.name,
            "seed": args.seed,
            "taxonomy": grammar.taxonomy.to_dict(),
            "ambiguity_groups": [list(g) for g in grammar.ambiguity_groups],
            "videos": [{"id": s.video_id, "split": sp}
                       for s, sp in zip(seqs, splits)],
        }
        data_mod.write_dataset(out, seqs, grammar.taxonomy, manifest)
        lengths = [s.n_frames for s in seqs]
        print(f"wrote {len(seqs)} videos to {out} "
              f"(mean length {np.mean(lengths):.0f} frames)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

def _load_split(datadir: str, split: str):
    manifest = data_mod.read_manifest(datadir)
    if manifest is None:
        if split == "train":
            return data_mod.read_dataset(datadir)
        return [], None
    seqs, tax = data_mod.read_dataset(datadir, split=split)
    return seqs, tax


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.features is not None:
        feats = [f.strip() for f in args.features.split(",") if f.strip()]
        if feats == ["none"]:
            feats = []
        config = config.with_overrides(enabled_ssm_features=tuple(feats))
    if args.acausal:
        config = config.with_overrides(acausal=True)
    train_seqs, taxonomy = _load_split(args.data, "train")
    val_seqs, _ = _load_split(args.data, "val")
    with output_dir(args.out) as out:
        write_config_echo(out, config)
        result = train_mod.fit(
            config, taxonomy, train_seqs, val_seqs,
            log_path=os.path.join(out, "training_log.jsonl"), ckpt_dir=out)
        print(f"best epoch {result.best_epoch} "
              f"(val accuracy {result.best_val_accuracy:.4f}); "
              f"checkpoints in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer

def _prediction_path(outdir: str, video_id: str) -> str:
    return os.path.join(outdir, f"{video_id}.csv")


def write_prediction_csv(path, result: model_mod.InferenceResult,
                         labels: np.ndarray) -> None:
    n = result.probs.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_idx", "predicted_id"] + [f"prob_{p}" for p in range(n)])
        for t in range(result.probs.shape[0]):
            w.writerow([t, int(labels[t])]
                       + [repr(float(v)) for v in result.probs[t]])


def read_prediction_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["frame_idx", "predicted_id"]:
        raise DataValidationError(f"{path}: not a prediction csv")
    labels = np.array([int(r[1]) for r in rows[1:]], dtype=np.int64)
    probs = np.array([[float(v) for v in r[2:]] for r in rows[1:]], dtype=np.float32)
    return labels, probs


def cmd_infer(args) -> int:
    mdl = model_mod.load_model(args.ckpt)
    if args.acausal and not mdl.config.acausal:
        raise UsageError("--acausal requires a model trained with acausal features")
    # without --acausal an acausal-capable model runs its causal pass only
    run_acausal = bool(args.acausal)
    manifest = data_mod.read_manifest(args.data)
    split = "test" if manifest is not None else None
    seqs, tax = data_mod.read_dataset(args.data, split=split)
    if tax.names != mdl.taxonomy.names:
        raise DataValidationError("dataset taxonomy differs from the checkpoint's")
    if args.hmm_smooth and mdl.transition is None:
        raise UsageError("--hmm-smooth needs a transition matrix next to the checkpoint")
    with output_dir(args.out) as out:
        infer_one = (model_mod.infer_video_acausal if run_acausal
                     else model_mod.infer_video)
        for seq in sorted(seqs, key=lambda s: s.video_id):
            result = infer_one(mdl, seq)
            labels = result.labels
            if args.hmm_smooth:
                labels = model_mod.hmm_smooth_posthoc(result.probs, mdl.transition)
            write_prediction_csv(_prediction_path(out, seq.video_id), result, labels)
        print(f"wrote {len(seqs)} prediction files to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    pred_files = sorted(f for f in os.listdir(args.pred) if f.endswith(".csv"))
    if not pred_files:
        raise DataValidationError(f"no prediction csvs in {args.pred}")
    video_results = []
    taxonomy = None
    for fname in pred_files:
        vid = fname[:-4]
        seq, taxonomy = data_mod.read_video_dir(os.path.join(args.data, vid))
        if seq.labels is None:
            raise DataValidationError(f"{vid}: dataset has no ground-truth labels")
        pred, probs = read_prediction_csv(os.path.join(args.pred, fname))
        report = eval_mod.compute_report(seq.labels, pred, taxonomy.n_phases)
        video_results.append({
            "video_id": vid, "gt": seq.labels, "pred": pred,
            "probs": probs, "report": report,
        })
    dataset_report = eval_mod.aggregate_reports(
        [vr["report"] for vr in video_results], taxonomy.n_phases)
    with output_dir(args.out) as out:
        eval_mod.render_report(out, dataset_report, video_results, taxonomy)
        acc = dataset_report.frame_accuracy
        print(f"evaluated {len(video_results)} videos"
              + (f": frame accuracy {acc:.4f}" if acc is not None else ""))
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate

def _arm_metrics(report: eval_mod.MetricsReport, ambiguity_phases) -> dict:
    stats = report.frame_stats()
    buckets = report.bucket_accuracy()
    short = [v for name in ("1-3s", "4-10s", "11-30s")
             if (v := buckets[name]) is not None]
    return {
        "accuracy": stats["accuracy"],
        "precision": stats["precision"],
        "recall": stats["recall"],
        "f1": stats["f1"],
        "bucket_accuracy": buckets,
        "short_bucket_mean": float(np.mean(short)) if short else None,
        "transition_accuracy": report.transition_accuracy,
        "midpoint_accuracy": report.midpoint_accuracy,
        "ambiguity_accuracy": (report.phase_subset_accuracy(ambiguity_phases)
                               if ambiguity_phases else None),
    }


def cmd_ablate(args) -> int:
    base_config = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise UsageError("--seeds must list at least one integer")
    arm_names = [a.strip() for a in args.arms.split(",") if a.strip()]
    unknown = [a for a in arm_names if a not in ABLATION_ARMS]
    if unknown:
        raise UsageError(f"unknown ablation arms: {unknown}; "
                         f"choose from {sorted(ABLATION_ARMS)}")
    train_seqs, taxonomy = _load_split(args.data, "train")
    val_seqs, _ = _load_split(args.data, "val")
    test_seqs, _ = _load_split(args.data, "test")
    if not test_seqs:
        raise DataValidationError("ablation needs a manifest with a test split")
    manifest = data_mod.read_manifest(args.data)
    ambiguity_phases = sorted({p for g in manifest.get("ambiguity_groups", [])
                               for p in g})
    with output_dir(args.out) as out:
        write_config_echo(out, base_config)
        results: dict[str, dict[str, dict]] = {}
        for arm in arm_names:
            feats, acausal = ABLATION_ARMS[arm]
            results[arm] = {}
            for seed in seeds:
                config = base_config.with_overrides(
                    enabled_ssm_features=feats, acausal=acausal, rng_seed=seed)
                run_dir = os.path.join(out, f"{arm}_seed{seed}")
                os.makedirs(run_dir, exist_ok=True)
                fit_res = train_mod.fit(
                    config, taxonomy, train_seqs, val_seqs,
                    log_path=os.path.join(run_dir, "training_log.jsonl"))
                inferred = model_mod.infer_dataset(fit_res.model, test_seqs)
                reports = [
                    eval_mod.compute_report(seq.labels,
                                            inferred[seq.video_id].labels,
                                            taxonomy.n_phases)
                    for seq in sorted(test_seqs, key=lambda s: s.video_id)
                ]
                pooled = eval_mod.aggregate_reports(reports, taxonomy.n_phases)
                results[arm][str(seed)] = _arm_metrics(pooled, ambiguity_phases)
                print(f"{arm} seed {seed}: "
                      f"accuracy {results[arm][str(seed)]['accuracy']:.4f}")
        payload = {
            "schema_version": 1,
            "arms": arm_names,
            "seeds": seeds,
            "ambiguity_phases": ambiguity_phases,
            "results": results,
            "means": {
                arm: _mean_metrics(list(results[arm].values()))
                for arm in arm_names
            },
        }
        with open(os.path.join(out, "ablation.json"), "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
        _write_ablation_csv(os.path.join(out, "ablation.csv"), payload)
        print(f"ablation table written to {out}")
    return EXIT_OK


def _mean_metrics(per_seed: list[dict]) -> dict:
    out = {}
    flat_keys = ("accuracy", "precision", "recall", "f1", "short_bucket_mean",
                 "transition_accuracy", "midpoint_accuracy", "ambiguity_accuracy")
    for key in flat_keys:
        vals = [m[key] for m in per_seed if m[key] is not None]
        out[key] = float(np.mean(vals)) if vals else None
    out["bucket_accuracy"] = {}
    for name, _, _ in eval_mod.DURATION_BUCKETS:
        vals = [m["bucket_accuracy"][name] for m in per_seed
                if m["bucket_accuracy"][name] is not None]
        out["bucket_accuracy"][name] = float(np.mean(vals)) if vals else None
    return out


def _write_ablation_csv(path, payload: dict) -> None:
    bucket_names = [name for name, _, _ in eval_mod.DURATION_BUCKETS]
    header = (["arm", "seed", "accuracy", "precision", "recall", "f1"]
              + [f"acc_{b}" for b in bucket_names]
              + ["transition_accuracy", "midpoint_accuracy", "ambiguity_accuracy"])

    def row_of(arm, seed, m):
        vals = [m["accuracy"], m["precision"], m["recall"], m["f1"]]
        vals += [m["bucket_accuracy"][b] for b in bucket_names]
        vals += [m["transition_accuracy"], m["midpoint_accuracy"],
                 m["ambiguity_accuracy"]]
        return [arm, seed] + ["" if v is None else f"{v:.6f}" for v in vals]

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for arm in payload["arms"]:
            for seed in payload["seeds"]:
                w.writerow(row_of(arm, seed, payload["results"][arm][str(seed)]))
            w.writerow(row_of(arm, "mean", payload["means"][arm]))


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phaseflow",
        description="surgical workflow phase recognition toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--grammar", default="mgh-like",
                   help="grammar preset name or JSON grammar file")
    p.add_argument("--videos", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--features", default=None,
                   help="comma list from {csl,gabor,hmm}, or 'none'")
    p.add_argument("--acausal", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write per-video prediction csvs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--acausal", action="store_true")
    p.add_argument("--hmm-smooth", action="store_true", dest="hmm_smooth")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="compute metrics for predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the feature-subset comparison")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seeds", required=True, help='e.g. "1,2,3"')
    p.add_argument("--out", required=True)
    p.add_argument("--arms", default=DEFAULT_ARMS,
                   help=f"comma list from {sorted(ABLATION_ARMS)}")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataValidationError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
