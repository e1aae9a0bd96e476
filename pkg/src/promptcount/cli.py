"""``promptcount`` command line: synth, train, eval, infer, maskgen, sweep.

Exit status is 0 on success and 2 on invalid input. ``PROMPTCOUNT_SEED``
overrides every seed taken from options or config files.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np
import torch

from .datasets import Dataset, DatasetError, load_dataset, save_dataset
from .evaluation import (cross_prompt_eval, format_sweep, iteration_sweep, make_negative_pairs,
                         negative_eval, render_density_image)
from .formats import FormatError, read_ppm, write_pdm, write_pmask
from .model import CountingError, encode_image, load_checkpoint, refine, save_checkpoint
from .prompt_masks import (MaskStrategy, PromptError, Text, build_concept_dictionary,
                           load_concept_dictionary, parse_prompt, prompt_to_mask)
from .synth import BenchmarkConfig, SceneError, SyntheticBackend, make_split
from .training import TrainingError, load_train_config, train, write_log

VALIDATION_ERRORS = (PromptError, CountingError, FormatError, DatasetError, SceneError,
                     ValueError, FileNotFoundError)


def _seed(value: int) -> int:
    env = os.environ.get("PROMPTCOUNT_SEED")
    return int(env) if env is not None else value


def _size(text: str):
    parts = [int(v) for v in text.split(",")]
    return (parts[0], parts[0]) if len(parts) == 1 else tuple(parts)


def _mask_for(args, image, feature_size):
    prompt = parse_prompt(args.prompt)
    strategy = MaskStrategy(args.strategy, args.tau)
    backend = SyntheticBackend(patch=image.shape[0] // feature_size[0]) if isinstance(prompt, Text) else None
    dictionary = None
    if isinstance(prompt, Text) and strategy.kind == "softmax":
        if args.dict in (None, "auto"):
            caption = args.caption or " ".join(backend.names + ["background"])
            dictionary = build_concept_dictionary(caption, prompt.query)
        else:
            dictionary = load_concept_dictionary(args.dict, prompt.query)
    return prompt_to_mask(prompt, image, feature_size, backend, strategy, dictionary)


def cmd_synth(args):
    cfg = BenchmarkConfig()
    if args.spec:
        with open(args.spec) as fh:
            overrides = json.load(fh)
        fields = {f.name for f in dataclasses.fields(BenchmarkConfig)}
        unknown = set(overrides) - fields
        if unknown:
            raise ValueError(f"unknown scene-spec keys: {sorted(unknown)}")
        cfg = dataclasses.replace(cfg, **{k: tuple(v) if isinstance(v, list) else v
                                          for k, v in overrides.items()})
    seed = _seed(args.seed)
    strategy = MaskStrategy(args.strategy, args.tau)
    backend = SyntheticBackend(patch=cfg.image_size[0] // cfg.feature_size[0])
    annotations = {}
    samples = make_split(cfg, args.n, seed, backend, strategy, annotations=annotations)
    save_dataset(Dataset(samples, annotations), args.out)
    print(f"wrote {args.n} scenes ({len(samples)} samples) to {args.out}")


def cmd_train(args):
    overrides = dict(kv.split("=", 1) for kv in args.set or [])
    cfg = load_train_config(args.config, {k.strip(): v.strip() for k, v in overrides.items()})
    data = load_dataset(args.data).samples
    val = load_dataset(args.val).samples if args.val else None
    model, history = train(data, cfg, val)
    save_checkpoint(model, args.out)
    if args.log:
        write_log(history, args.log)
    for rec in history:
        print(rec.line())


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.data).samples
    report = cross_prompt_eval(model, samples, args.T)
    if args.negative:
        pairs = make_negative_pairs(samples, np.random.default_rng(_seed(args.seed)))
        report.negative = negative_eval(model, pairs, args.T)
    print(report.to_table(), end="")


def cmd_sweep(args):
    model = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.data).samples
    print(format_sweep(iteration_sweep(model, samples, args.T_max)), end="")


def cmd_infer(args):
    model = load_checkpoint(args.checkpoint)
    image = read_ppm(args.image)
    mask = _mask_for(args, image, model.config.feature_size)
    with torch.no_grad():
        feats = encode_image(image, model)
        result = refine(mask, feats, model, args.T)
    density = result.final.double().numpy()
    if args.out_density:
        write_pdm(density, args.out_density)
    if args.out_viz:
        render_density_image(density, args.out_viz)
    if result.truncated:
        print(f"warning: density vanished after {len(result.iterates)} iterations", file=sys.stderr)
    print(f"{density.sum():.4f}")


def cmd_maskgen(args):
    image = read_ppm(args.image)
    mask = _mask_for(args, image, _size(args.feature_size))
    write_pmask(mask, args.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="promptcount", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def mask_options(sp):
        sp.add_argument("--prompt", required=True, help="box:x0,y0,x1,y1 | point:x,y | text:<query>")
        sp.add_argument("--strategy", choices=("cosine", "softmax"), default="softmax")
        sp.add_argument("--tau", type=float, default=100.0)
        sp.add_argument("--dict", default="auto", help="concept file (one per line) or 'auto'")
        sp.add_argument("--caption", help="caption used by --dict auto")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--spec", help="JSON file overriding benchmark scene settings")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--strategy", choices=("cosine", "softmax"), default="softmax")
    sp.add_argument("--tau", type=float, default=100.0)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--val")
    sp.add_argument("--config", help="key = value training config")
    sp.add_argument("--set", nargs="*", help="config overrides, e.g. epochs=5")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--log", help="tab-separated per-epoch log")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="per-prompt-type MAE/MSE report")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--T", type=int, default=2)
    sp.add_argument("--negative", action="store_true", help="add the N-MAE/N-MSE row")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="count objects in one image")
    sp.add_argument("--image", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--T", type=int, default=2)
    sp.add_argument("--out-density")
    sp.add_argument("--out-viz")
    mask_options(sp)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("maskgen", help="write the prompt mask of one image")
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--feature-size", default="8,8")
    mask_options(sp)
    sp.set_defaults(func=cmd_maskgen)

    sp = sub.add_parser("sweep", help="MAE/MSE for T = 1..T_max")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--T-max", dest="T_max", type=int, default=6)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
