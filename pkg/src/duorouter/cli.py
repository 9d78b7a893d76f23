"""Command-line pipeline: synth -> labels -> find-t -> train -> calibrate -> evaluate -> serve.

Every subcommand reads and writes files (never stdout-only), so stages are
resumable. All randomness flows from --seed; identical invocations on
identical inputs produce byte-identical outputs. Exit codes: 0 success,
2 usage error, 1 runtime error.
"""

import argparse
import json
import sys
from pathlib import Path

from . import evaluation, gateway, labeling, policy, router, synth
from .dataset import ParseError, SchemaError, load_dataset, save_dataset, split_view

SCHEME_FLAGS = {"det": "deterministic", "prob": "probabilistic", "trans": "transformed"}


class UsageError(Exception):
    """Bad flag combination detected before any work."""


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _outpath(args, path) -> Path:
    p = Path(path)
    if args.out_dir and not p.is_absolute():
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        return out_dir / p
    return p


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _split_samples(dataset, split: str):
    if split == "all":
        return list(dataset.samples)
    return list(split_view(dataset, split))


def _scheme_from_args(args) -> labeling.LabelScheme:
    kind = SCHEME_FLAGS[args.scheme]
    if kind == "transformed":
        if args.t is None:
            raise UsageError("--scheme trans needs --t (or use find-t / --t-grid first)")
        return labeling.LabelScheme(kind, float(args.t))
    if args.t not in (None, 0.0):
        raise UsageError(f"--t only applies to --scheme trans, got --t {args.t}")
    return labeling.LabelScheme(kind)


def _parse_grid(raw: str, samples, metric: str):
    if raw == "auto":
        return labeling.default_t_grid(samples, metric)
    try:
        return [float(tok) for tok in raw.split(",") if tok.strip()]
    except ValueError:
        raise UsageError(f"--grid must be 'auto' or comma-separated reals, got {raw!r}")


# ---- subcommands ----


def _cmd_synth(args) -> int:
    dataset = synth.generate(args.preset, args.n, args.seed)
    out = _outpath(args, args.out)
    save_dataset(dataset, out)
    _say(args, f"wrote {len(dataset)} samples to {out}")
    return 0


def _cmd_labels(args) -> int:
    dataset = load_dataset(args.dataset, expected_metrics=[args.metric])
    samples = _split_samples(dataset, args.split)
    scheme = _scheme_from_args(args)
    examples = labeling.build_labels(samples, args.metric, scheme, threads=args.threads)
    out = _outpath(args, args.out)
    labeling.save_labels(examples, scheme, out)
    _say(args, f"wrote {len(examples)} {scheme.kind} labels to {out}")
    return 0


def _cmd_find_t(args) -> int:
    dataset = load_dataset(args.dataset, expected_metrics=[args.metric])
    samples = _split_samples(dataset, args.split)
    grid = _parse_grid(args.grid, samples, args.metric)
    t_star, curve = labeling.find_t_star(samples, args.metric, grid)
    out = _outpath(args, args.out)
    _write_json(out, {"t_star": t_star, "curve": [{"t": t, "objective": obj} for t, obj in curve]})
    _say(args, f"t* = {t_star} over {len(curve)} grid points, wrote {out}")
    return 0


def _cmd_train(args) -> int:
    dataset = load_dataset(args.dataset, expected_metrics=[args.metric])
    train_samples = _split_samples(dataset, "train")
    if not train_samples:
        raise ValueError("dataset has no train split")

    if args.labels:
        scheme, examples = labeling.load_labels(args.labels)
    else:
        if SCHEME_FLAGS[args.scheme] == "transformed" and args.t is None:
            grid = _parse_grid(args.t_grid, train_samples, args.metric)
            t_star, _ = labeling.find_t_star(train_samples, args.metric, grid)
            _say(args, f"t* = {t_star}")
            args.t = t_star
        scheme = _scheme_from_args(args)
        examples = labeling.build_labels(train_samples, args.metric, scheme, threads=args.threads)

    if args.features == "embedding":
        if dataset.embedding_dim is None:
            raise ValueError("dataset has no embeddings; --features embedding needs them")
        cfg = router.FeaturizerConfig(kind="external_embedding", dim=dataset.embedding_dim)
    else:
        cfg = router.FeaturizerConfig(
            kind="hashed_ngrams",
            dim=args.dim,
            ngram_min=args.ngram_min,
            ngram_max=args.ngram_max,
            hash_seed=args.seed,
        )
    router.attach_features(examples, cfg, train_samples)

    val_examples = None
    if args.val_select:
        val_samples = _split_samples(dataset, "validation")
        if not val_samples:
            raise ValueError("--val-select needs a non-empty validation split")
        val_examples = labeling.build_labels(val_samples, args.metric, scheme, threads=args.threads)
        router.attach_features(val_examples, cfg, val_samples)

    hyper = router.TrainingConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        l2=args.l2,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    model = router.train(examples, cfg, hyper, val_examples=val_examples, scheme=scheme)
    out = _outpath(args, args.out)
    router.save_model(model, out)
    _say(args, f"trained on {len(examples)} examples, final loss {model.training_meta['final_loss']:.6f}, wrote {out}")
    return 0


def _cmd_calibrate(args) -> int:
    model = router.load_model(args.model)
    dataset = load_dataset(args.dataset, expected_metrics=[args.metric])
    samples = _split_samples(dataset, args.split)
    if not samples:
        raise ValueError(f"dataset has no {args.split} samples to calibrate on")
    scores = router.score_samples(model, samples)
    if args.val_samples:
        samples, scores = policy.subsample(samples, scores, args.val_samples, seed=args.seed)
    result = policy.calibrate_threshold(samples, scores, args.metric, args.max_drop_pct)
    router.record_calibration(model, args.metric, args.max_drop_pct, result.to_dict())
    out = Path(args.out) if args.out else Path(args.model)
    router.save_model(model, out)
    if not result.feasible:
        print(
            f"warning: no threshold satisfies max drop {args.max_drop_pct}%, "
            "falling back to all-large routing",
            file=sys.stderr,
        )
    _say(
        args,
        f"threshold {result.threshold} (drop {result.quality_drop_pct:.4f}%, "
        f"cost advantage {result.cost_advantage_pct:.2f}%), wrote {out}",
    )
    return 0


def _cmd_evaluate(args) -> int:
    model = router.load_model(args.model)
    metric_eval = args.eval_metric or args.metric
    dataset = load_dataset(args.dataset, expected_metrics=[args.metric, metric_eval])
    samples = _split_samples(dataset, args.split)
    if not samples:
        raise ValueError(f"dataset has no {args.split} samples to evaluate on")
    scores = router.score_samples(model, samples)
    report = evaluation.cross_metric_report(
        scores,
        samples,
        metric_train=args.metric,
        metric_eval=metric_eval,
        pair_name=args.pair_name,
        random_seeds=args.random_seeds,
        base_seed=args.seed,
    )
    out = _outpath(args, args.out)
    evaluation.write_report_json(report, out)
    if args.csv:
        evaluation.write_curve_csv(report.points, _outpath(args, args.csv))
    _say(args, f"evaluated {len(samples)} samples under {metric_eval}, wrote {out}")
    return 0


def _cmd_route(args) -> int:
    model = router.load_model(args.model)
    dataset = load_dataset(args.dataset)
    samples = _split_samples(dataset, args.split)
    if not samples:
        raise ValueError(f"dataset has no {args.split} samples to route")
    scores = None
    if args.policy == "learned":
        threshold = args.threshold
        if threshold is None:
            if not args.metric:
                raise UsageError("learned routing needs --threshold or --metric (calibration lookup)")
            threshold, _ = router.calibrated_threshold(model, args.metric)
        pol = policy.RoutingPolicy.learned(threshold)
        scores = router.score_samples(model, samples)
    elif args.policy == "all_small":
        pol = policy.RoutingPolicy.all_small()
    elif args.policy == "all_large":
        pol = policy.RoutingPolicy.all_large()
    else:
        pol = policy.RoutingPolicy.random(args.p_large, seed=args.seed)
    decisions = policy.route(pol, samples, scores)
    out = _outpath(args, args.out)
    with out.open("w", encoding="utf-8") as fh:
        for d in decisions:
            fh.write(json.dumps({"query_id": d.query_id, "score": d.score, "target": d.target}, sort_keys=True) + "\n")
    _say(
        args,
        f"routed {len(decisions)} queries, cost advantage "
        f"{evaluation.cost_advantage_pct(decisions):.2f}%, wrote {out}",
    )
    return 0


def _cmd_serve(args) -> int:
    config = gateway.load_gateway_config(args.config)
    gateway.serve(config)
    return 0


# ---- parser wiring ----


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    common.add_argument("--threads", type=int, default=1, help="worker threads for parallel stages")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")
    common.add_argument("--out-dir", default=None, help="directory for relative output paths")

    parser = argparse.ArgumentParser(prog="duorouter", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--preset", required=True, choices=synth.PRESETS)
    p.add_argument("--n", required=True, type=int, help="number of queries")
    p.add_argument("--out", required=True, help="output dataset file (JSONL)")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("labels", parents=[common], help="compute router training labels")
    p.add_argument("--dataset", required=True)
    p.add_argument("--metric", required=True)
    p.add_argument("--scheme", required=True, choices=sorted(SCHEME_FLAGS))
    p.add_argument("--t", type=float, default=None, help="relaxation level for --scheme trans")
    p.add_argument("--split", default="train", choices=["train", "validation", "test", "all"])
    p.add_argument("--out", required=True, help="output label artifact (JSONL)")
    p.set_defaults(func=_cmd_labels)

    p = sub.add_parser("find-t", parents=[common], help="grid-search the label relaxation t*")
    p.add_argument("--dataset", required=True)
    p.add_argument("--metric", required=True)
    p.add_argument("--grid", default="auto", help="'auto' or comma-separated t values")
    p.add_argument("--split", default="train", choices=["train", "validation", "test", "all"])
    p.add_argument("--out", required=True, help="output JSON with t_star and the objective curve")
    p.set_defaults(func=_cmd_find_t)

    p = sub.add_parser("train", parents=[common], help="train a router model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--metric", required=True)
    p.add_argument("--scheme", default="prob", choices=sorted(SCHEME_FLAGS))
    p.add_argument("--t", type=float, default=None, help="relaxation level for --scheme trans")
    p.add_argument("--t-grid", default="auto", help="grid for the t* search when --t is omitted")
    p.add_argument("--labels", default=None, help="reuse a label artifact instead of relabeling")
    p.add_argument("--features", default="hashed", choices=["hashed", "embedding"])
    p.add_argument("--dim", type=int, default=2**18, help="hashed feature dimension")
    p.add_argument("--ngram-min", type=int, default=1)
    p.add_argument("--ngram-max", type=int, default=2)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--l2", type=float, default=1e-6)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--val-select", action="store_true", help="keep the epoch with the best validation loss")
    p.add_argument("--out", required=True, help="output model artifact (JSON)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("calibrate", parents=[common], help="pick a routing threshold under a drop budget")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--metric", required=True)
    p.add_argument("--max-drop-pct", required=True, type=float)
    p.add_argument("--val-samples", type=int, default=500, help="seeded subsample size (0 = use all)")
    p.add_argument("--split", default="validation", choices=["train", "validation", "test", "all"])
    p.add_argument("--out", default=None, help="write the updated model here instead of in place")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("evaluate", parents=[common], help="tradeoff curve, baselines, and report files")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--metric", required=True, help="metric the router was trained against")
    p.add_argument("--eval-metric", default=None, help="evaluate under a different metric")
    p.add_argument("--split", default="test", choices=["train", "validation", "test", "all"])
    p.add_argument("--pair-name", default="small_vs_large")
    p.add_argument("--random-seeds", type=int, default=32, help="draws for the random baseline")
    p.add_argument("--out", required=True, help="output report (JSON)")
    p.add_argument("--csv", default=None, help="also write the curve as CSV")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("route", parents=[common], help="emit routing decisions for a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--policy", default="learned", choices=["learned", "all_small", "all_large", "random"])
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--metric", default=None, help="calibration-table metric when --threshold is omitted")
    p.add_argument("--p-large", type=float, default=0.5, help="random policy: probability of large")
    p.add_argument("--split", default="all", choices=["train", "validation", "test", "all"])
    p.add_argument("--out", required=True, help="output decisions (JSONL)")
    p.set_defaults(func=_cmd_route)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP routing gateway")
    p.add_argument("--config", required=True, help="gateway config (JSON)")
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, SchemaError, ValueError, KeyError, OSError, router.TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
