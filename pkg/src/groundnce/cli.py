"""Command-line entry points.

Subcommands: gen-data, make-negatives, train, eval, check-grad, mi-demo,
dump-attention. Exit codes: 0 success, 2 usage or input-file problems,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attention import dump_attention, model_from_state_tensors
from .checkpoint import load_tensors
from .data import (
    SynthConfig,
    load_dataset,
    nearest_prototype_accuracy,
    save_dataset,
    save_oracle,
    synth_generate,
)
from .errors import DataFormatError, GroundingError, NumericError, ShapeError
from .evaluate import append_report_csv, evaluate_model
from .gradcheck import run_gradient_check
from .losses import DiscreteJoint, exact_mi, sample_infonce_bound
from .negcap import (
    CachedNegatives,
    RandomCaptionNegatives,
    build_negative_cache,
    load_negative_cache,
    save_negative_cache,
    table_lm_from_file,
)
from .rng import substream
from .trainer import TrainConfig, train

USAGE_EXIT = 2
NUMERIC_EXIT = 3


def _add_synth_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--regions-per-image", type=int, default=8)
    parser.add_argument("--vocab-size", type=int, default=30)
    parser.add_argument("--caption-length", type=int, default=8)
    parser.add_argument("--noun-fraction", type=float, default=0.6)
    parser.add_argument("--d-r", type=int, default=16)
    parser.add_argument("--d-w", type=int, default=16)
    parser.add_argument("--alignment-noise", type=float, default=0.1)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--cluster-size", type=int, default=1)
    parser.add_argument("--group-size", type=int, default=1)
    parser.add_argument("--group-spread", type=float, default=0.25)
    parser.add_argument("--synonym-spread", type=float, default=0.3)
    parser.add_argument("--num-scenes", type=int, default=1)
    parser.add_argument("--scene-strength", type=float, default=0.0)
    parser.add_argument("--filler-vocab", type=int, default=6)
    parser.add_argument("--pair-groups", action="store_true")
    parser.add_argument("--grid-side", type=int, default=None)


def _synth_config(args: argparse.Namespace, num_images: int, split: str) -> SynthConfig:
    return SynthConfig(
        num_images=num_images,
        regions_per_image=args.regions_per_image,
        vocab_size=args.vocab_size,
        caption_length=args.caption_length,
        noun_fraction=args.noun_fraction,
        d_r=args.d_r,
        d_w=args.d_w,
        alignment_noise=args.alignment_noise,
        seed=args.seed,
        split=split,
        cluster_size=args.cluster_size,
        group_size=args.group_size,
        group_spread=args.group_spread,
        synonym_spread=args.synonym_spread,
        num_scenes=args.num_scenes,
        scene_strength=args.scene_strength,
        filler_vocab=args.filler_vocab,
        pair_groups=args.pair_groups,
        grid_side=args.grid_side,
    )


def cmd_gen_data(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = [("train", args.num_train), ("val", args.num_val), ("test", args.num_test)]
    oracle_all = {}
    merged_masked: dict = {}
    merged_conditioned: dict = {}
    lm = None
    for split, count in splits:
        if count <= 0:
            continue
        config = _synth_config(args, count, split)
        dataset, oracle, lm = synth_generate(config)
        save_dataset(dataset, out, basename=split)
        oracle_all.update(oracle)
        merged_masked.update(lm.masked)
        merged_conditioned.update(lm.conditioned)
        print(f"wrote {split}: {count} examples")
    if lm is None:
        raise ShapeError("no split had a positive example count")
    lm.masked = merged_masked
    lm.conditioned = merged_conditioned
    lm.save(out / "table_lm.json")
    save_oracle(out / "oracle.json", oracle_all)
    print(f"wrote {out / 'table_lm.json'} and {out / 'oracle.json'}")
    return 0


def cmd_make_negatives(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.manifest)
    lm = table_lm_from_file(args.table_lm)
    cache = build_negative_cache(dataset.captions(), lm, args.n_cand, args.n_keep)
    save_negative_cache(args.out, cache)
    print(f"wrote {len(cache)} negative sets to {args.out}")
    return 0


_CONFIG_FLAGS = {
    "batch_size": int,
    "learning_rate": float,
    "max_epochs": int,
    "eval_every": int,
    "patience": int,
    "seed": int,
    "loss_reduction": str,
    "norm_mode": str,
    "d_r": int,
    "d_w": int,
    "d": int,
    "n_cand": int,
    "n_keep": int,
}


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    for name, typ in _CONFIG_FLAGS.items():
        flag = "--" + name.replace("_", "-")
        if typ is str and name == "loss_reduction":
            parser.add_argument(flag, choices=("mean", "sum"), default=None)
        elif typ is str and name == "norm_mode":
            parser.add_argument(flag, choices=("batch", "affine"), default=None)
        else:
            parser.add_argument(flag, type=typ, default=None)
    parser.add_argument(
        "--enable-l-lang", action=argparse.BooleanOptionalAction, default=None
    )
    parser.add_argument(
        "--allow-missing-negatives", action=argparse.BooleanOptionalAction, default=None
    )


def _train_config(args: argparse.Namespace) -> TrainConfig:
    payload: dict = {}
    if args.config:
        try:
            payload = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{args.config}: invalid JSON") from exc
    for name in list(_CONFIG_FLAGS) + ["enable_l_lang", "allow_missing_negatives"]:
        value = getattr(args, name)
        if value is not None:
            payload[name] = value
    return TrainConfig.from_dict(payload)


def cmd_train(args: argparse.Namespace) -> int:
    config = _train_config(args)
    train_dataset = load_dataset(args.train)
    val_dataset = load_dataset(args.val) if args.val else train_dataset
    provider = None
    if config.enable_l_lang:
        if args.lang_negatives == "random":
            provider = RandomCaptionNegatives(train_dataset.captions(), config.n_keep)
        else:
            if not args.negatives:
                raise ShapeError(
                    "language loss enabled: pass --negatives (from make-negatives) "
                    "or --lang-negatives random, or disable with --no-enable-l-lang"
                )
            cache = load_negative_cache(args.negatives)
            provider = CachedNegatives(cache, allow_missing=config.allow_missing_negatives)
    result = train(config, train_dataset, val_dataset, provider, out_dir=args.out)
    print(
        f"best step {result.best_step}: "
        f"val pointing accuracy {result.best_accuracy:.4f} "
        f"({result.steps_done} steps, early stop: {result.stopped_early})"
    )
    return 0


def _parse_ks(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise ShapeError(f"bad --ks value {text!r}") from exc


def cmd_eval(args: argparse.Namespace) -> int:
    model = model_from_state_tensors(load_tensors(args.checkpoint))
    dataset = load_dataset(args.manifest)
    report = evaluate_model(model, dataset, _parse_ks(args.ks))
    print(report.to_json())
    if args.json_out:
        Path(args.json_out).write_text(report.to_json(), encoding="utf-8")
    if args.csv:
        append_report_csv(args.csv, args.epoch, report)
    return 0


def cmd_check_grad(args: argparse.Namespace) -> int:
    ok, results = run_gradient_check(args.seeds, args.seed, args.tolerance)
    worst = max(r.max_rel_error for r in results)
    total = sum(r.params_checked for r in results)
    for r in results:
        status = "ok" if r.passed(args.tolerance) else "FAIL"
        print(f"seed {r.seed}: max rel error {r.max_rel_error:.3e} [{status}]")
    print(f"checked {total} parameters over {len(results)} instances; worst {worst:.3e}")
    if not ok:
        print("gradient check FAILED", file=sys.stderr)
        return NUMERIC_EXIT
    return 0


_JOINTS = {
    "independent": lambda size: np.full((size, size), 1.0 / (size * size)),
    "diagonal": lambda size: np.eye(2) * 0.5,
    "correlated": lambda size: np.array([[0.435, 0.065], [0.065, 0.435]]),
}


def cmd_mi_demo(args: argparse.Namespace) -> int:
    joint = DiscreteJoint(_JOINTS[args.joint](args.size))
    rng = substream(args.seed, "mi-demo")
    critic = args.critic_scale * rng.standard_normal(joint.probabilities.shape)
    samples = sample_infonce_bound(joint, critic, args.k, args.batches, rng)
    mean = float(samples.mean())
    se = float(samples.std(ddof=1) / math.sqrt(len(samples)))
    mi = exact_mi(joint)
    print(f"joint: {args.joint}  exact MI: {mi:.6f} nats")
    print(f"bound mean over {args.batches} batches (k={args.k}): {mean:.6f} +/- {se:.6f} (SE)")
    print(f"bound <= MI + 3 SE: {mean <= mi + 3 * se}")
    return 0


def cmd_dump_attention(args: argparse.Namespace) -> int:
    model = model_from_state_tensors(load_tensors(args.checkpoint))
    dataset = load_dataset(args.manifest)
    pairs = ((ex.regions, ex.caption) for ex in dataset.examples)
    lines = dump_attention(args.out, model, pairs, limit=args.limit)
    print(f"wrote {lines} attention records to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groundnce",
        description="Weakly supervised phrase grounding via contrastive word-region attention",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset with planted alignments")
    p.add_argument("--out", required=True)
    p.add_argument("--num-train", type=int, default=500)
    p.add_argument("--num-val", type=int, default=100)
    p.add_argument("--num-test", type=int, default=0)
    _add_synth_flags(p)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("make-negatives", help="precompute context-preserving negatives")
    p.add_argument("--manifest", required=True)
    p.add_argument("--table-lm", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-cand", type=int, default=30)
    p.add_argument("--n-keep", type=int, default=25)
    p.set_defaults(handler=cmd_make_negatives)

    p = sub.add_parser("train", help="train a grounding model")
    p.add_argument("--train", required=True, help="train manifest path")
    p.add_argument("--val", default=None, help="validation manifest path")
    p.add_argument("--negatives", default=None, help="negative cache from make-negatives")
    p.add_argument("--lang-negatives", choices=("cache", "random"), default="cache")
    p.add_argument("--out", default=None, help="output directory for logs and checkpoints")
    p.add_argument("--config", default=None, help="JSON config file; flags override it")
    _add_train_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--json-out", default=None)
    p.add_argument("--csv", default=None)
    p.add_argument("--epoch", type=int, default=0)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("check-grad", help="verify analytic gradients against finite differences")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(handler=cmd_check_grad)

    p = sub.add_parser("mi-demo", help="exact MI versus the sampled contrastive bound")
    p.add_argument("--joint", choices=sorted(_JOINTS), default="independent")
    p.add_argument("--size", type=int, default=4)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--batches", type=int, default=5000)
    p.add_argument("--critic-scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_mi_demo)

    p = sub.add_parser("dump-attention", help="write attention weights as JSON lines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(handler=cmd_dump_attention)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_EXIT
    except (FileNotFoundError, DataFormatError, ShapeError, GroundingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
