"""Command-line surface: dataset generation, training, evaluation,
gradient checking, and the three ablation studies.

Exit codes: 0 success, 1 usage error, 2 IO/format error, 3 verification
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import tensor as T
from .data import (GRAMMAR_WORDS, generate_dataset, load_dataset,
                   split_dataset)
from .decoder import StageIO, guide_decoder_forward, init_guide_decoder
from .encoders import build_vocab
from .errors import FormatError, InputError, LangsegError
from .layers import init_linear, init_mha, linear, mhca, mhsa
from .model import (ModelArch, bce_loss, build_model, combined_loss,
                    dice_loss, model_forward)
from .rng import Rng
from .tensor import Tensor, grad_check, sigmoid
from .training import (TrainConfig, apply_fraction, evaluate, load_checkpoint,
                       named_params, step_matched_epochs, train)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_VERIFY = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seed_default() -> int:
    env = os.environ.get("LGS_SEED")
    return int(env) if env else 0


def build_parser() -> _Parser:
    parser = _Parser(prog="langseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-test", type=int, default=128)
    p.add_argument("--seed", type=int, default=_seed_default())

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", default=None, help="JSONL log path (default: <out>.log.jsonl)")
    p.add_argument("--seed", type=int, default=_seed_default())
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr-max", type=float, default=3e-4)
    p.add_argument("--lr-min", type=float, default=1e-6)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--prompt-mode", choices=["none", "s12", "s3", "s123"], default="s123")
    p.add_argument("--decoders", type=int, default=3)
    p.add_argument("--fraction", type=float, default=1.0)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--seed", type=int, default=_seed_default(),
                   help="seed for the train/val split")
    p.add_argument("--label", default=None)

    p = sub.add_parser("gradcheck", help="finite-difference checks for every layer type")
    p.add_argument("--seed", type=int, default=_seed_default())
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-3)

    p = sub.add_parser("ablate", help="run one of the ablation studies")
    p.add_argument("kind", choices=["decoders", "granularity", "fraction"])
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="JSONL report path (default: stdout)")
    p.add_argument("--seed", type=int, default=_seed_default())
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr-max", type=float, default=3e-4)
    return parser


def _check_bounds(args) -> None:
    if args.command == "train":
        if not 0 <= args.decoders <= 3:
            raise UsageError(f"--decoders must be in 0..3, got {args.decoders}")
        if not 0.0 < args.fraction <= 1.0:
            raise UsageError(f"--fraction must be in (0, 1], got {args.fraction}")
        if args.epochs < 1:
            raise UsageError("--epochs must be >= 1")
    if args.command == "gen-data":
        if args.n_train < 1:
            raise UsageError(f"--n-train must be >= 1, got {args.n_train}")
        if args.n_test < 0:
            raise UsageError(f"--n-test must be >= 0, got {args.n_test}")


def cli_parse(argv):
    """Parse argv into a namespace, applying defaults and bound checks."""
    args = build_parser().parse_args(argv)
    _check_bounds(args)
    return args


def _echo(payload: dict, stream=None) -> None:
    print(json.dumps(payload), file=stream or sys.stdout, flush=True)


def cmd_gen_data(args) -> int:
    generate_dataset(args.out, args.n_train, args.n_test, args.seed)
    manifest = load_dataset(args.out)
    train_recs, val_recs, test_recs = split_dataset(manifest, args.seed)
    _echo({"command": "gen-data", "out": args.out, "seed": args.seed,
           "n_train": len(train_recs), "n_val": len(val_recs),
           "n_test": len(test_recs)})
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                       lr_max=args.lr_max, lr_min=args.lr_min,
                       weight_decay=args.weight_decay, seed=args.seed,
                       prompt_mode=args.prompt_mode,
                       guide_decoders=args.decoders,
                       data_fraction=args.fraction)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    manifest = load_dataset(args.data)
    train_recs, val_recs, _ = split_dataset(manifest, cfg.seed)
    train_recs = apply_fraction(train_recs, cfg.data_fraction)
    vocab = build_vocab(GRAMMAR_WORDS)
    model = build_model(Rng(cfg.seed).split(0), vocab, cfg.prompt_mode,
                        cfg.guide_decoders)
    log_path = args.log or args.out + ".log.jsonl"
    _echo({"command": "train", "config": dataclasses.asdict(cfg),
           "n_train": len(train_recs), "n_val": len(val_recs)})
    result = train(model, train_recs, val_recs, cfg,
                   ckpt_path=args.out, log_path=log_path)
    _echo({"command": "train", "done": True, "best_epoch": result.best_epoch,
           "best_val_dice": result.best_val_dice, "ckpt": args.out,
           "log": log_path})
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, meta = load_checkpoint(args.ckpt)
    manifest = load_dataset(args.data)
    train_recs, val_recs, test_recs = split_dataset(manifest, args.seed)
    split = {"train": train_recs, "val": val_recs, "test": test_recs}[args.split]
    if not split:
        raise InputError(f"split {args.split!r} is empty")
    rec = evaluate(model, split)
    cfg = meta.get("config") or {}
    _echo({"label": args.label or f"{meta['prompt_mode']}-k{meta['guide_count']}",
           "acc": rec.acc, "dice": rec.dice, "jaccard": rec.jaccard,
           "split": args.split, "n": rec.n,
           "prompt_mode": meta["prompt_mode"], "decoders": meta["guide_count"],
           "fraction": cfg.get("data_fraction"), "seed": cfg.get("seed")})
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck command
# ---------------------------------------------------------------------------

def _gradcheck_cases(seed: int):
    """Named (builder) pairs; each builder returns (f, params)."""
    rng = Rng(seed)

    def param(shape, lo=-0.8, hi=0.8):
        return Tensor(rng.uniform(shape, lo, hi), requires_grad=True)

    def case_matmul():
        a, b = param((3, 4)), param((4, 2))
        return lambda: (a @ b).mean(), [a, b]

    def case_conv():
        x, w = param((2, 5, 5)), param((3, 2, 3, 3))
        return lambda: T.conv2d(x, w, 1, 1).mean(), [x, w]

    def case_conv_strided():
        x, w = param((2, 6, 6)), param((3, 2, 2, 2))
        return lambda: T.conv2d(x, w, 2, 0).mean(), [x, w]

    def case_softmax():
        x = param((4, 5))
        weights = Tensor(rng.uniform((4, 5), -1, 1))
        return lambda: (T.softmax(x, -1) * weights).mean(), [x]

    def case_layer_norm():
        x, g, b = param((3, 6)), param((6,), 0.5, 1.5), param((6,))
        weights = Tensor(rng.uniform((3, 6), -1, 1))
        return lambda: (T.layer_norm(x, g, b) * weights).mean(), [x, g, b]

    def case_upsample():
        x = param((2, 3, 3))
        weights = Tensor(rng.uniform((2, 6, 6), -1, 1))
        return lambda: (T.upsample_nearest2x(x) * weights).mean(), [x]

    def case_linear():
        p = init_linear(rng, 5, 3)
        x = param((4, 5))
        return lambda: linear(x, p).mean(), [x, p.weight, p.bias]

    def case_mhsa():
        p = init_mha(rng, 8, 2)
        x = param((5, 8))
        params = [x, p.q_proj.weight, p.k_proj.weight, p.v_proj.weight,
                  p.out_proj.weight, p.q_proj.bias, p.out_proj.bias]
        return lambda: mhsa(x, p).mean(), params

    def case_mhca():
        p = init_mha(rng, 8, 2)
        q, kv = param((4, 8)), param((3, 8))
        return lambda: mhca(q, kv, p).mean(), [q, kv, p.q_proj.weight,
                                               p.k_proj.weight, p.v_proj.weight]

    def _tiny_decoder():
        p = init_guide_decoder(rng, c_stage=8, c_skip=4, c_out=4, d_text=8,
                               l_max=5, m_tokens=2, grid_h=2, grid_w=2, heads=2)
        p.alpha.data = np.asarray(0.7, dtype=np.float32)
        tokens = param((4, 8))
        text = param((5, 8))
        mask = np.array([True, True, True, False, False])
        skip = param((4, 4, 4))
        return p, tokens, text, mask, skip

    def case_project_text():
        p, _, text, mask, _ = _tiny_decoder()
        from .decoder import project_text
        params = [text, p.w_t, p.token_reduce.weight, p.token_reduce.bias]
        return lambda: project_text(text, mask, p).mean(), params

    def case_evolve_visual():
        p, tokens, _, _, _ = _tiny_decoder()
        from .decoder import evolve_visual
        params = [tokens, p.self_attn.q_proj.weight, p.self_attn.v_proj.weight,
                  p.ln_sa_gamma, p.ln_sa_beta]
        return lambda: evolve_visual(tokens, p).mean(), params

    def case_cross_fuse():
        p, tokens, _, _, _ = _tiny_decoder()
        from .decoder import cross_fuse
        f_t = param((2, 8))
        params = [tokens, f_t, p.alpha, p.cross_attn.q_proj.weight,
                  p.cross_attn.v_proj.weight, p.ln_ca_gamma]
        return lambda: cross_fuse(tokens, f_t, p).mean(), params

    def case_decode_merge():
        p, tokens, _, _, skip = _tiny_decoder()
        from .decoder import decode_merge
        params = [tokens, skip, p.merge.weight, p.merge.bias]
        return lambda: decode_merge(tokens, skip, p).mean(), params

    def case_guide_decoder():
        p, tokens, text, mask, skip = _tiny_decoder()
        io = StageIO(visual_in=tokens, text_in=text, text_mask=mask, skip=skip)
        from .training import named_params
        params = named_params(p)
        return (lambda: guide_decoder_forward(io, p).mean(),
                list(params.values()) + [tokens, text, skip])

    def case_dice_loss():
        z = param((1, 4, 4))
        target = (rng.uniform((1, 4, 4)) > 0.5).astype(np.float32)
        return lambda: dice_loss(sigmoid(z), target), [z]

    def case_bce_loss():
        z = param((1, 4, 4))
        target = (rng.uniform((1, 4, 4)) > 0.5).astype(np.float32)
        return lambda: bce_loss(sigmoid(z), target), [z]

    def case_combined_loss():
        z = param((1, 4, 4))
        target = (rng.uniform((1, 4, 4)) > 0.5).astype(np.float32)
        return lambda: combined_loss(sigmoid(z), target), [z]

    def case_end_to_end():
        from .training import named_params
        vocab = build_vocab(GRAMMAR_WORDS)
        arch = ModelArch(image_side=8, widths=(4, 8), stem_stride=2,
                         text_dim=8, l_max=8, m_tokens=2, heads=2,
                         text_blocks=1, ff_hidden=8)
        model = build_model(rng.split(99), vocab, "s123", 1, arch)
        for stage in model.stages:
            if hasattr(stage, "alpha"):
                stage.alpha.data = np.asarray(0.7, dtype=np.float32)
        image = rng.uniform((1, 8, 8))
        target = (rng.uniform((1, 8, 8)) > 0.5).astype(np.float32)
        prompt = ("unilateral pulmonary infection", "one infected areas",
                  "located at left upper lung")
        params = named_params(model)

        def f():
            pred = model_forward(image, prompt, model)
            return combined_loss(pred.probabilities, target)
        return f, list(params.values())

    return [
        ("matmul", case_matmul),
        ("conv2d", case_conv),
        ("conv2d_strided", case_conv_strided),
        ("softmax", case_softmax),
        ("layer_norm", case_layer_norm),
        ("upsample_nearest2x", case_upsample),
        ("linear", case_linear),
        ("mhsa", case_mhsa),
        ("mhca", case_mhca),
        ("text_projection", case_project_text),
        ("visual_self_attention", case_evolve_visual),
        ("gated_cross_attention", case_cross_fuse),
        ("decode_merge", case_decode_merge),
        ("guide_decoder", case_guide_decoder),
        ("dice_loss", case_dice_loss),
        ("bce_loss", case_bce_loss),
        ("combined_loss", case_combined_loss),
        ("end_to_end_1stage", case_end_to_end),
    ]


def cmd_gradcheck(args) -> int:
    ok = True
    rng = Rng(args.seed + 1)
    for name, builder in _gradcheck_cases(args.seed):
        f, params = builder()
        samples = 6 if name in ("guide_decoder", "end_to_end_1stage") else None
        report = grad_check(f, params, eps=args.eps, tol=args.tol,
                            samples_per_param=samples, rng=rng)
        ok = ok and report.passed
        _echo({"component": name, "max_rel_err": report.max_rel_err,
               "params": len(params), "pass": report.passed})
    _echo({"command": "gradcheck", "pass": ok, "tol": args.tol, "eps": args.eps})
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

def ablation_rows(kind: str):
    """(label, prompt_mode, decoders, fraction) per report row."""
    if kind == "decoders":
        return [(f"k{k}", "none" if k == 0 else "s123", k, 1.0) for k in range(4)]
    if kind == "granularity":
        return [(mode, mode, 0 if mode == "none" else 3, 1.0)
                for mode in ("none", "s12", "s3", "s123")]
    if kind == "fraction":
        rows = [(f"s123-{int(f * 100)}pct", "s123", 3, f)
                for f in (0.10, 0.15, 0.25, 0.50, 1.00)]
        rows.append(("none-100pct", "none", 0, 1.0))
        return rows
    raise UsageError(f"unknown ablation kind {kind!r}")


def run_experiment(manifest, label: str, cfg: TrainConfig) -> dict:
    """Train one row from scratch; test metrics come from the best-val epoch.

    Reduced-data rows train for the full-data step budget, so every row
    shares the same optimizer schedule.
    """
    import dataclasses as dc
    import tempfile

    train_recs, val_recs, test_recs = split_dataset(manifest, cfg.seed)
    kept = apply_fraction(train_recs, cfg.data_fraction)
    if not test_recs:
        raise InputError("ablation needs a test pool in the dataset")
    if cfg.data_fraction < 1.0:
        cfg = dc.replace(cfg, epochs=step_matched_epochs(
            cfg.epochs, len(train_recs), len(kept), cfg.batch_size))
    vocab = build_vocab(GRAMMAR_WORDS)
    model = build_model(Rng(cfg.seed).split(0), vocab, cfg.prompt_mode,
                        cfg.guide_decoders)
    with tempfile.TemporaryDirectory() as tmp:
        ckpt = os.path.join(tmp, "best.ckpt")
        result = train(model, kept, val_recs, cfg, ckpt_path=ckpt)
        best_model, _, _ = load_checkpoint(ckpt)
    rec = evaluate(best_model, test_recs)
    return {"label": label, "acc": rec.acc, "dice": rec.dice,
            "jaccard": rec.jaccard, "prompt_mode": cfg.prompt_mode,
            "decoders": cfg.guide_decoders, "fraction": cfg.data_fraction,
            "seed": cfg.seed, "best_epoch": result.best_epoch}


def cmd_ablate(args) -> int:
    manifest = load_dataset(args.data)
    out = open(args.out, "w", encoding="utf-8") if args.out else None
    try:
        for label, mode, k, fraction in ablation_rows(args.kind):
            cfg = TrainConfig(epochs=args.epochs, seed=args.seed,
                              lr_max=args.lr_max, prompt_mode=mode,
                              guide_decoders=k, data_fraction=fraction)
            row = run_experiment(manifest, label, cfg)
            _echo(row, stream=out)
            if out:
                _echo(row)
    finally:
        if out:
            out.close()
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = cli_parse(argv if argv is not None else sys.argv[1:])
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        handler = {
            "gen-data": cmd_gen_data,
            "train": cmd_train,
            "eval": cmd_eval,
            "gradcheck": cmd_gradcheck,
            "ablate": cmd_ablate,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except LangsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
