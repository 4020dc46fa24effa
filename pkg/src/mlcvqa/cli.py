"""Command-line entry point for the toolkit.

Every subcommand validates its inputs up front, writes structured results
(CSV/JSON) under --out, and prints a one-line summary to stdout. All
randomness is derived from the single --seed flag; reruns with identical
seeds produce byte-identical output files for any worker count. Failures
emit a machine-readable JSON object on stderr and a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import __version__, bootstrap, features, frame_metrics, model, rank_metrics, subjective, trainer
from .media import load_y4m

log = logging.getLogger("mlcvqa")


def _json_safe(obj):
    if isinstance(obj, float):
        return None if not math.isfinite(obj) else obj
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _write_json(payload: dict, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_json_safe(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_files(*paths: str) -> None:
    for p in paths:
        if p and not os.path.exists(p):
            raise FileNotFoundError(f"input not found: {p}")


def _cmd_metrics(args) -> str:
    _require_files(args.ref, args.dist, args.external or "")
    out = _out_dir(args)
    ref = load_y4m(args.ref)
    dist = load_y4m(args.dist)
    external = frame_metrics.load_external_metrics(args.external) if args.external else None
    matrix = frame_metrics.frame_metric_matrix(
        ref, dist, external=external, clip_id=Path(args.dist).stem, workers=args.workers
    )
    frame_metrics.write_matrix_csv(matrix, str(out / "frame_metrics.csv"))
    return f"wrote {matrix.n_frames}x{len(matrix.channel_names)} frame metrics to {out / 'frame_metrics.csv'}"


def _cmd_siti(args) -> str:
    _require_files(args.input)
    out = _out_dir(args)
    clip = load_y4m(args.input)
    si, ti, summary = frame_metrics.si_ti(clip)
    with open(out / "siti.csv", "w", newline="") as fh:
        fh.write("frame_index,si,ti\n")
        for i in range(len(si)):
            ti_val = repr(float(ti[i - 1])) if i >= 1 else ""
            fh.write(f"{i},{float(si[i])!r},{ti_val}\n")
    _write_json(vars(summary), out / "siti_summary.json")
    return f"SI mean {summary.si_mean:.3f}, TI mean {summary.ti_mean:.3f} over {len(si)} frames"


def _cmd_aggregate(args) -> str:
    _require_files(args.ratings)
    out = _out_dir(args)
    ratings = subjective.read_ratings_csv(args.ratings)
    clip_scores, model_scores = subjective.aggregate_ratings(ratings)
    subjective.write_clip_scores_csv(clip_scores, str(out / "clip_scores.csv"))
    with open(out / "model_scores.csv", "w", newline="") as fh:
        fh.write("codec_id,dmos,ci95,n\n")
        for ms in model_scores:
            fh.write(f"{ms.codec_id},{ms.dmos!r},{ms.ci95_half_width!r},{ms.n_votes}\n")
    return f"aggregated {len(ratings)} votes into {len(clip_scores)} clip / {len(model_scores)} model scores"


def _cmd_assemble(args) -> str:
    _require_files(args.enc, args.ref, args.frame_metrics)
    out = _out_dir(args)
    enc = features.read_features(args.enc)
    ref = features.read_features(args.ref)
    fm = frame_metrics.read_matrix_csv(args.frame_metrics)
    sidecar = features.read_sidecar(args.enc) if os.path.exists(args.enc + ".json") else {}
    n_frames = args.n_frames or sidecar.get("n_frames")
    if n_frames is None:
        raise ValueError("pass --n-frames or provide an enc sidecar with n_frames")
    plan = features.window_plan(int(n_frames))
    assembled = features.assemble_pair(enc, ref, fm, plan)
    path = out / f"{assembled.clip_id or 'clip'}__{assembled.variant}__assembled.mlcv"
    features.write_features(
        assembled,
        str(path),
        sidecar={
            "n_frames": int(n_frames),
            "fps": sidecar.get("fps"),
            "augmentation": assembled.variant,
            "frame_metrics_variant": fm.variant,
        },
    )
    return f"assembled {assembled.T}x{assembled.D} features to {path}"


def _load_manifest(path: str) -> list[trainer.ManifestEntry]:
    with open(path, encoding="utf-8") as fh:
        rows = json.load(fh)
    base = Path(path).parent
    entries = []
    for row in rows:
        feature_path = row["feature_path"]
        if not os.path.isabs(feature_path):
            feature_path = str(base / feature_path)
        entries.append(
            trainer.ManifestEntry(
                clip_id=row["clip_id"],
                codec_id=row["codec_id"],
                variant=row.get("variant", "none"),
                dmos=float(row["dmos"]),
                feature_path=feature_path,
            )
        )
    return entries


def _train_config(args) -> trainer.TrainConfig:
    kwargs = {}
    for name in ("batch_size", "max_lr", "weight_decay", "warmup_epochs", "epochs_after_warmup"):
        value = getattr(args, name, None)
        if value is not None:
            kwargs[name] = value
    return trainer.TrainConfig(
        seed=args.seed,
        temporal_subsample=args.temporal_subsample,
        use_augmented_variants=args.use_augmented_variants,
        **kwargs,
    )


def _model_config_for(args, input_dim: int) -> model.ModelConfig:
    kwargs = {"input_dim": input_dim}
    if getattr(args, "proj_dim", None):
        kwargs["proj_dim"] = args.proj_dim
    if getattr(args, "mlp_hidden", None):
        kwargs["mlp_hidden"] = args.mlp_hidden
    return model.ModelConfig(**kwargs)


def _cmd_train(args) -> str:
    _require_files(args.manifest)
    out = _out_dir(args)
    entries = _load_manifest(args.manifest)
    grouped: dict[tuple[str, str], trainer.TrainItem] = {}
    for e in entries:
        item = grouped.setdefault((e.clip_id, e.codec_id), trainer.TrainItem(variants={}, dmos=e.dmos))
        item.variants[e.variant] = e.load()
    items = list(grouped.values())
    input_dim = next(iter(items[0].variants.values())).D
    cfg = _train_config(args)
    result = trainer.train(
        items, cfg, model_init_seed=args.seed, model_config=_model_config_for(args, input_dim)
    )
    model.save_model(result.model, str(out / "model.mlqm"))
    trainer.write_history_csv(result.history, str(out / "history.csv"))
    final = result.history[-1]["train_loss"]
    return f"trained {cfg.total_epochs} epochs on {len(items)} pairs; final loss {final:.6f}"


def _cmd_predict(args) -> str:
    _require_files(args.model, args.manifest)
    out = _out_dir(args)
    net = model.load_model(args.model)
    entries = _load_manifest(args.manifest)
    predictions = {}
    for e in entries:
        if e.variant != args.variant:
            continue
        predictions[(e.clip_id, e.codec_id)] = model.forward(net, e.load()).score
    rank_metrics.write_predictions_csv(predictions, str(out / "predictions.csv"))
    return f"predicted {len(predictions)} clips to {out / 'predictions.csv'}"


def _report_payload(result: rank_metrics.EvaluationResult) -> dict:
    return {
        "clip": result.clip_report.as_dict(),
        "model": result.model_report.as_dict(),
        "folds": [
            {"clip": c.as_dict(), "model": m.as_dict()} for c, m in result.per_fold
        ],
    }


def _cmd_eval(args) -> str:
    _require_files(args.predictions, args.ratings)
    out = _out_dir(args)
    predictions = rank_metrics.read_predictions_csv(args.predictions)
    ratings = subjective.read_ratings_csv(args.ratings)
    clip_scores, _ = subjective.aggregate_ratings(ratings)
    result = rank_metrics.evaluate(predictions, clip_scores)
    _write_json(_report_payload(result), out / "report.json")
    c = result.clip_report
    return f"clip level: pcc {c.pcc:.4f} srcc {c.srcc:.4f} tau_b_95 {c.tau_b_95:.4f} rmse {c.rmse:.4f}"


def _cmd_crossval(args) -> str:
    _require_files(args.manifest, args.ratings)
    out = _out_dir(args)
    entries = _load_manifest(args.manifest)
    ratings = subjective.read_ratings_csv(args.ratings)
    input_dim = features.read_features(entries[0].feature_path).D
    cfg = _train_config(args)
    result = trainer.crossval(
        entries,
        ratings,
        cfg,
        k=args.folds,
        model_config=_model_config_for(args, input_dim),
        model_init_seed=args.seed,
    )
    payload = {
        "clip_row": result.clip_row.as_dict(),
        "model_row": result.model_row.as_dict(),
        "folds": [
            {
                "fold_index": fold.fold_index,
                "test_videos": sorted(fold.test_video_ids),
                "clip": ev.clip_report.as_dict(),
                "model": ev.model_report.as_dict(),
            }
            for fold, ev in zip(result.folds, result.per_fold)
        ],
    }
    _write_json(payload, out / "crossval.json")
    m = result.model_row
    return f"model level over {args.folds} folds: pcc {m.pcc:.4f} srcc {m.srcc:.4f} rmse {m.rmse:.4f}"


def _cmd_bootstrap(args) -> str:
    _require_files(args.ratings)
    out = _out_dir(args)
    ratings = subjective.read_ratings_csv(args.ratings)
    n_list = [int(tok) for tok in args.n.split(",") if tok]
    curves = [
        bootstrap.bootstrap_curve(
            ratings, n_list, args.reps, level=level, seed=args.seed, stratified=args.stratified
        )
        for level in args.levels.split(",")
    ]
    bootstrap.write_curve_csv(curves, str(out / "bootstrap.csv"))
    return f"bootstrapped {len(n_list)} vote counts x {args.reps} reps to {out / 'bootstrap.csv'}"


def _cmd_significance(args) -> str:
    _require_files(args.pred_a, args.pred_b, args.ratings)
    out = _out_dir(args)
    ratings = subjective.read_ratings_csv(args.ratings)
    clip_scores, _ = subjective.aggregate_ratings(ratings)
    dmos = {(cs.clip_id, cs.codec_id): cs.dmos for cs in clip_scores}
    pred_a = rank_metrics.read_predictions_csv(args.pred_a)
    pred_b = rank_metrics.read_predictions_csv(args.pred_b)
    keys = sorted(set(dmos) & set(pred_a) & set(pred_b))
    if len(keys) < 5:
        raise ValueError(f"only {len(keys)} items shared by both predictions and the ratings")
    errors_a = [abs(pred_a[k] - dmos[k]) for k in keys]
    errors_b = [abs(pred_b[k] - dmos[k]) for k in keys]
    result = rank_metrics.paired_significance(errors_a, errors_b, reps=args.reps, seed=args.seed)
    _write_json(
        {
            "p_value": result.p_value,
            "significant_95": result.significant_95,
            "significant_90": result.significant_90,
            "mean_abs_error_diff": result.mean_diff,
            "reps": result.reps,
            "n_items": len(keys),
        },
        out / "significance.json",
    )
    return f"p = {result.p_value:.4f} over {len(keys)} items ({'' if result.significant_95 else 'not '}significant at 95%)"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlcvqa", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0, help="root seed for all randomness")
        p.add_argument("--workers", type=int, default=1, help="intra-command parallelism")
        return p

    p = add("metrics", _cmd_metrics, "per-frame metric matrix for a clip pair")
    p.add_argument("--ref", required=True)
    p.add_argument("--dist", required=True)
    p.add_argument("--external", help="external per-frame metric CSV (VMAF-style channels)")

    p = add("siti", _cmd_siti, "P.910 spatial/temporal information of a clip")
    p.add_argument("--input", required=True)

    p = add("aggregate", _cmd_aggregate, "aggregate raw votes into DMOS + CI")
    p.add_argument("--ratings", required=True)

    p = add("assemble", _cmd_assemble, "assemble model input features for a pair")
    p.add_argument("--enc", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--frame-metrics", dest="frame_metrics", required=True)
    p.add_argument("--n-frames", dest="n_frames", type=int)

    def add_train_flags(p, with_schedule=True):
        p.add_argument("--proj-dim", dest="proj_dim", type=int)
        p.add_argument("--mlp-hidden", dest="mlp_hidden", type=int)
        p.add_argument("--temporal-subsample", dest="temporal_subsample", action="store_true")
        p.add_argument("--use-augmented-variants", dest="use_augmented_variants", action="store_true")
        if with_schedule:
            p.add_argument("--batch-size", dest="batch_size", type=int)
            p.add_argument("--max-lr", dest="max_lr", type=float)
            p.add_argument("--weight-decay", dest="weight_decay", type=float)
            p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
            p.add_argument("--epochs-after-warmup", dest="epochs_after_warmup", type=int)

    p = add("train", _cmd_train, "train the quality model from a manifest")
    p.add_argument("--manifest", required=True)
    add_train_flags(p)

    p = add("predict", _cmd_predict, "score clips with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", default="none")

    p = add("crossval", _cmd_crossval, "k-fold cross-validation by source video")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ratings", required=True)
    p.add_argument("--folds", type=int, default=5)
    add_train_flags(p)

    p = add("eval", _cmd_eval, "clip- and model-level metric report")
    p.add_argument("--predictions", required=True)
    p.add_argument("--ratings", required=True)

    p = add("bootstrap", _cmd_bootstrap, "vote-count bootstrapping simulation")
    p.add_argument("--ratings", required=True)
    p.add_argument("--n", required=True, help="comma-separated vote counts")
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--levels", default="clip,model")
    p.add_argument("--stratified", action="store_true")

    p = add("significance", _cmd_significance, "paired bootstrap significance test")
    p.add_argument("--pred-a", dest="pred_a", required=True)
    p.add_argument("--pred-b", dest="pred_b", required=True)
    p.add_argument("--ratings", required=True)
    p.add_argument("--reps", type=int, default=1000)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("VQA_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        summary = args.func(args)
    except Exception as exc:  # surface a machine-readable failure
        log.debug("command failed", exc_info=True)
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
        return 1
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
