"""Command-line pipeline driver.

Subcommands: train, score, consistency, evaluate, cluster-balance, split,
report. Exit codes: 0 success, 1 data/validation failure, 2 usage error.
Every stochastic step honors --seed (env HFPC_SEED is the fallback), and
all outputs are byte-deterministic for fixed inputs and seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import consistency as cons
from . import dataset_tools as dt
from . import metrics as mx
from . import report as rp
from . import reward_head as rh
from .tensor_io import (
    FormatError,
    load_image,
    load_mask,
    load_tensor,
    save_tensor,
)


class DataError(Exception):
    """Pipeline-level failure; message names the offending file/record."""


def _resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("HFPC_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise DataError(f"HFPC_SEED must be an integer, got {env!r}") from None
    return 0


def _load_manifest(path: str) -> list[dt.ManifestRecord]:
    try:
        return dt.load_manifest_file(path)
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    except dt.ManifestError as exc:
        raise DataError(f"manifest {path}: {exc}") from None


def _consistency_config(args) -> cons.ConsistencyConfig:
    cfg = cons.ConsistencyConfig(
        lambda_dist=args.lambda_dist,
        tau_match=args.tau_match,
        delta_diff=args.delta_diff,
        area_floor=args.area_floor,
        aggregate=args.aggregate,
    )
    cfg.validate()
    return cfg


def _add_consistency_flags(parser) -> None:
    parser.add_argument("--lambda-dist", type=float, default=0.5, help="weight on centroid distance in the match score")
    parser.add_argument("--tau-match", type=float, default=0.1, help="minimum IoU for an eligible mask match")
    parser.add_argument("--delta-diff", type=float, default=0.05, help="maximum tolerated pixel diff inside matched regions")
    parser.add_argument("--area-floor", type=float, default=0.001, help="area fraction below which unmatched generated masks are ignored")
    parser.add_argument("--aggregate", choices=["max", "mean"], default="max", help="how per-pair diffs combine before thresholding")


# ------------------------------------------------------------ subcommands


def cmd_train(args) -> int:
    seed = _resolve_seed(args.seed)
    records = _load_manifest(args.manifest)
    base = Path(args.manifest).parent
    pair_refs, skipped = dt.build_pairs(records)
    if not pair_refs:
        raise DataError(f"manifest {args.manifest} yields no training pairs")
    try:
        pairs = dt.load_training_pairs(pair_refs, base)
    except (OSError, ValueError, FormatError) as exc:
        raise DataError(str(exc)) from None
    val_pairs: list[rh.TrainingPair] = []
    if args.val_manifest:
        val_refs, _ = dt.build_pairs(_load_manifest(args.val_manifest))
        val_pairs = dt.load_training_pairs(val_refs, Path(args.val_manifest).parent)
    d = pairs[0].original.shape[1]
    config = rh.RewardHeadConfig(
        d=d,
        hidden=args.hidden,
        fusion=args.fusion,
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=seed,
        pass_threshold=args.theta_bg if args.theta_bg is not None else 0.5,
        loss_mode=args.loss.replace("-", "_"),
    )
    started = time.monotonic()
    params, history = rh.train(pairs, val_pairs, config)
    elapsed = time.monotonic() - started

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rh.save_params(out / "params", params, config)
    history_doc = {
        "epochs": [
            {"epoch": h.epoch, "train_loss": h.train_loss, "val_loss": h.val_loss}
            for h in history
        ],
        "pairs": len(pairs),
        "skipped_records": skipped,
    }
    (out / "history.json").write_text(
        json.dumps(history_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(
        f"trained on {len(pairs)} pairs ({len(skipped)} records skipped) "
        f"in {elapsed:.2f}s; final train loss {history[-1].train_loss:.6f}"
    )
    print(f"params bundle: {out / 'params'}")
    return 0


def cmd_score(args) -> int:
    params, config = rh.load_params(args.params)
    try:
        ori = load_tensor(args.original).astype(np.float64)
        gen = load_tensor(args.generated).astype(np.float64)
    except (OSError, FormatError) as exc:
        raise DataError(str(exc)) from None
    score = rh.score_pair(params, ori, gen, config.fusion)
    if args.attention_out:
        _, attn = rh.attention_fuse(params, ori, gen, config.fusion)
        if attn.size == 0:
            print("note: concat fusion has no attention matrix; skipping --attention-out", file=sys.stderr)
        else:
            save_tensor(args.attention_out, attn.astype(np.float32))
    print(f"{score!r}")
    return 0


def _load_masks(paths: list[str], base: Path, what: str) -> list[np.ndarray]:
    masks = []
    for p in paths:
        try:
            masks.append(load_mask(base / p))
        except (OSError, FormatError) as exc:
            raise DataError(f"{what} mask {p}: {exc}") from None
    return masks


def cmd_consistency(args) -> int:
    cfg = _consistency_config(args)
    base = Path(".")
    try:
        img_ori = load_image(args.original_image)
        img_gen = load_image(args.generated_image)
    except (OSError, FormatError) as exc:
        raise DataError(str(exc)) from None
    ori_masks = _load_masks(args.original_masks, base, "original")
    gen_masks = _load_masks(args.generated_masks, base, "generated")
    try:
        result = cons.assess_consistency(img_ori, img_gen, ori_masks, gen_masks, cfg)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    doc = json.dumps(result.to_json_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(doc, encoding="utf-8")
    else:
        sys.stdout.write(doc)
    print(f"consistent: {result.consistent}", file=sys.stderr)
    return 0


def _evaluate_record(record, base, params, config, theta, ccfg):
    rows = []
    reward_time = 0.0
    consistency_time = 0.0
    try:
        ori_emb = load_tensor(base / record.original_embedding).astype(np.float64)
        ori_img = load_image(base / record.original_image)
        ori_masks = [load_mask(base / p) for p in record.original_masks]
    except (OSError, FormatError, ValueError) as exc:
        raise DataError(f"record {record.id}: {exc}") from None
    for index, variant in enumerate(record.generated):
        try:
            gen_emb = load_tensor(base / variant.embedding).astype(np.float64)
            gen_img = load_image(base / variant.image)
            gen_masks = [load_mask(base / p) for p in variant.masks]
        except (OSError, FormatError, ValueError) as exc:
            raise DataError(f"record {record.id} generated[{index}]: {exc}") from None
        t0 = time.monotonic()
        score = rh.score_pair(params, ori_emb, gen_emb, config.fusion)
        background_pass = score >= theta
        t1 = time.monotonic()
        try:
            verdict = cons.assess_consistency(ori_img, gen_img, ori_masks, gen_masks, ccfg)
        except ValueError as exc:
            raise DataError(f"record {record.id} generated[{index}]: {exc}") from None
        t2 = time.monotonic()
        reward_time += t1 - t0
        consistency_time += t2 - t1
        rows.append(
            {
                "index": index,
                "label": variant.label,
                "score": score,
                "background_pass": background_pass,
                "consistent": verdict.consistent,
                "overall_pass": background_pass and verdict.consistent,
                "consistency": verdict.to_json_dict(),
            }
        )
    return {"id": record.id, "generated": rows}, reward_time, consistency_time


def _curve_set(entries: list[mx.LabeledScore]) -> dict[str, list[tuple[float, float]]]:
    curves: dict[str, list[tuple[float, float]]] = {}
    labels = {lab for _, lab in entries}
    if labels == {0, 1}:
        for positive in ("low", "high"):
            curves[f"pr_{positive}"] = mx.pr_curve(entries, positive)
            roc_points, _ = mx.roc_curve(entries, positive)
            curves[f"roc_{positive}"] = roc_points
    return curves


def _score_metrics(entries: list[mx.LabeledScore], theta: float) -> dict:
    scores = [s for s, _ in entries]
    labels = [float(lab) for _, lab in entries]
    out: dict = {}
    try:
        out["plcc"] = mx.plcc(scores, labels)
        out["srcc"] = mx.srcc(scores, labels)
    except ValueError as exc:
        out["plcc"] = None
        out["srcc"] = None
        out["correlation_note"] = str(exc)
    counts = mx.filter_counts(entries, theta)
    out["score_gate"] = {"counts": asdict(counts), **mx.pb_rb_rg(counts).to_floats()}
    if {lab for _, lab in entries} == {0, 1}:
        _, auc_low = mx.roc_curve(entries, "low")
        _, auc_high = mx.roc_curve(entries, "high")
        out["auc"] = {"low": auc_low, "high": auc_high}
    else:
        out["auc"] = None
    return out


def cmd_evaluate(args) -> int:
    seed = _resolve_seed(args.seed)
    records = _load_manifest(args.manifest)
    base = Path(args.manifest).parent
    params, config = rh.load_params(args.params)
    theta = args.theta_bg if args.theta_bg is not None else config.pass_threshold
    if not 0.0 < theta < 1.0:
        raise DataError(f"theta-bg must be in (0, 1), got {theta}")
    ccfg = _consistency_config(args)

    started = time.monotonic()
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        outcomes = list(
            pool.map(
                lambda rec: _evaluate_record(rec, base, params, config, theta, ccfg),
                records,
            )
        )
    record_rows = [row for row, _, _ in outcomes]
    reward_time = sum(r for _, r, _ in outcomes)
    consistency_time = sum(c for _, _, c in outcomes)

    entries: list[mx.LabeledScore] = []
    gate_entries: list[tuple[bool, int]] = []
    for row in record_rows:
        for g in row["generated"]:
            entries.append((g["score"], g["label"]))
            gate_entries.append((g["overall_pass"], g["label"]))
    if not entries:
        raise DataError("manifest contains no generated variants to evaluate")

    metrics_doc = _score_metrics(entries, theta)
    gate_counts = mx.FilterCounts(
        n_filtered=sum(1 for ok, _ in gate_entries if not ok),
        n_filtered_low=sum(1 for ok, lab in gate_entries if not ok and lab == 0),
        n_orig_low=sum(1 for _, lab in gate_entries if lab == 0),
        n_kept_high=sum(1 for ok, lab in gate_entries if ok and lab == 1),
        n_orig_high=sum(1 for _, lab in gate_entries if lab == 1),
    )
    metrics_doc["full_gate"] = {
        "counts": asdict(gate_counts),
        **mx.pb_rb_rg(gate_counts).to_floats(),
    }

    report_doc = {
        "config": {
            "theta_bg": theta,
            "fusion": config.fusion,
            "loss_mode": config.loss_mode,
            "consistency": asdict(ccfg),
        },
        "seed": seed,
        "metrics": metrics_doc,
        "records": record_rows,
    }
    curves = _curve_set(entries)
    written = rp.emit_report(report_doc, curves, args.out, args.format)
    elapsed = time.monotonic() - started
    print(
        f"evaluated {len(entries)} generated images across {len(records)} records "
        f"in {elapsed:.2f}s (reward {reward_time:.2f}s, consistency {consistency_time:.2f}s)"
    )
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_cluster_balance(args) -> int:
    seed = _resolve_seed(args.seed)
    records = _load_manifest(args.manifest)
    if not records:
        raise DataError(f"manifest {args.manifest} is empty")
    base = Path(args.manifest).parent
    points = []
    for record in records:
        try:
            emb = load_tensor(base / record.original_embedding)
        except (OSError, FormatError) as exc:
            raise DataError(f"record {record.id}: {exc}") from None
        points.append(np.asarray(emb, dtype=np.float64).mean(axis=0))
    matrix = np.stack(points)
    try:
        model = dt.kmeans(matrix, args.k, seed)
        balanced = dt.balance(
            records,
            model.assignments.tolist(),
            seed,
            target="max" if args.target is None else args.target,
            k=args.k,
        )
    except ValueError as exc:
        raise DataError(str(exc)) from None
    dt.save_manifest_file(args.out, balanced)
    sizes: dict[int, int] = {}
    for cid in model.assignments.tolist():
        sizes[cid] = sizes.get(cid, 0) + 1
    print(f"clustered {len(records)} records into k={args.k} (inertia {model.inertia:.4f})")
    print(f"cluster sizes: {[sizes.get(c, 0) for c in range(args.k)]}")
    print(f"balanced manifest ({len(balanced)} records): {args.out}")
    return 0


def cmd_split(args) -> int:
    seed = _resolve_seed(args.seed)
    records = _load_manifest(args.manifest)
    try:
        train, val, rest = dt.split(records, (args.train_frac, args.val_frac), seed)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, subset in (("train", train), ("val", val), ("test", rest)):
        path = out / f"{name}.jsonl"
        dt.save_manifest_file(path, subset)
        print(f"wrote {len(subset)} records to {path}")
    return 0


def cmd_report(args) -> int:
    try:
        report_doc = json.loads(Path(args.results).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read results {args.results}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"results {args.results}: malformed JSON: {exc.msg}") from None
    entries: list[mx.LabeledScore] = []
    for row in report_doc.get("records", []):
        for g in row.get("generated", []):
            entries.append((float(g["score"]), int(g["label"])))
    if not entries:
        raise DataError(f"results {args.results} contain no scored records")
    curves = _curve_set(entries)
    if not curves:
        raise DataError("cannot draw curves: only one label class present")
    written = rp.emit_report(report_doc, curves, args.out, args.format)
    for path in written:
        print(f"wrote {path}")
    return 0


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="inpaint-gate",
        description=(
            "Gate AI background-inpainted product images by a trained "
            "background-appropriateness score and a product-consistency check."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train the reward head from a manifest")
    p_train.add_argument("--manifest", required=True)
    p_train.add_argument("--val-manifest", default=None)
    p_train.add_argument("--out", required=True, help="output directory for the params bundle")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--epochs", type=int, default=50)
    p_train.add_argument("--lr", type=float, default=1e-4)
    p_train.add_argument("--hidden", type=int, default=32)
    p_train.add_argument("--batch-size", type=int, default=16)
    p_train.add_argument("--fusion", choices=["attention", "concat"], default="attention")
    p_train.add_argument("--loss", choices=["full", "rank-only"], default="full")
    p_train.add_argument("--theta-bg", type=float, default=None, help="pass threshold stored in the bundle")
    p_train.set_defaults(func=cmd_train)

    p_score = sub.add_parser("score", help="score one original/generated embedding pair")
    p_score.add_argument("--params", required=True)
    p_score.add_argument("--original", required=True)
    p_score.add_argument("--generated", required=True)
    p_score.add_argument("--attention-out", default=None, help="write the attention matrix as HFT1")
    p_score.set_defaults(func=cmd_score)

    p_cons = sub.add_parser("consistency", help="assess product consistency for one image pair")
    p_cons.add_argument("--original-image", required=True)
    p_cons.add_argument("--generated-image", required=True)
    p_cons.add_argument("--original-masks", nargs="*", default=[])
    p_cons.add_argument("--generated-masks", nargs="*", default=[])
    p_cons.add_argument("--out", default=None)
    _add_consistency_flags(p_cons)
    p_cons.set_defaults(func=cmd_consistency)

    p_eval = sub.add_parser("evaluate", help="run the full gate over a manifest")
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--params", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--theta-bg", type=float, default=None)
    p_eval.add_argument("--jobs", type=int, default=4)
    p_eval.add_argument("--format", nargs="+", choices=["json", "csv", "svg"], default=["json", "csv"])
    _add_consistency_flags(p_eval)
    p_eval.set_defaults(func=cmd_evaluate)

    p_cb = sub.add_parser("cluster-balance", help="cluster originals and oversample small clusters")
    p_cb.add_argument("--manifest", required=True)
    p_cb.add_argument("--out", required=True)
    p_cb.add_argument("--k", type=int, default=25)
    p_cb.add_argument("--seed", type=int, default=None)
    p_cb.add_argument("--target", type=int, default=None, help="per-cluster target count (default: max cluster size)")
    p_cb.set_defaults(func=cmd_cluster_balance)

    p_split = sub.add_parser("split", help="shuffle and split a manifest")
    p_split.add_argument("--manifest", required=True)
    p_split.add_argument("--out", required=True)
    p_split.add_argument("--train-frac", type=float, default=0.8)
    p_split.add_argument("--val-frac", type=float, default=0.2)
    p_split.add_argument("--seed", type=int, default=None)
    p_split.set_defaults(func=cmd_split)

    p_report = sub.add_parser("report", help="re-emit curves/plots from an evaluation report")
    p_report.add_argument("--results", required=True, help="report.json from `evaluate`")
    p_report.add_argument("--out", required=True)
    p_report.add_argument("--format", nargs="+", choices=["json", "csv", "svg"], default=["csv", "svg"])
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (dt.ManifestError, FormatError, rh.TrainingDivergedError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
