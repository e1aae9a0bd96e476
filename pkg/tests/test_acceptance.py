"""Acceptance suite: one PASS/FAIL line per criterion, each timed against its budget.

Trained models are cached for the session. Each criterion is charged the
training time of every model it uses, so its reported runtime is what it
would cost on its own.

Run with ``pytest -s -m slow tests/test_acceptance.py`` to see the lines live;
they are also appended to the terminal summary.
"""
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest
import torch

from promptcount.evaluation import (compute_metrics, cross_prompt_eval, iteration_sweep,
                                    make_negative_pairs, negative_eval, predict_counts)
from promptcount.losses import LossConfig
from promptcount.model import ModelConfig
from promptcount.prompt_masks import (MaskStrategy, build_concept_dictionary,
                                      text_to_mask_cosine, text_to_mask_softmax)
from promptcount.synth import (CLASS_POOL, BenchmarkConfig, SceneSpec, SyntheticBackend,
                               generate_scene, make_benchmark, scene_caption, target_region)
from promptcount.training import TrainConfig, train

pytestmark = pytest.mark.slow

TESTS = Path(__file__).parent
SEEDS = (0, 1, 2)

# Deviations from the TrainConfig defaults are recorded in the decisions ledger.
MODEL = ModelConfig(heads=8, gated_values=False)
BASE = TrainConfig(model=MODEL, epochs=80, batch_size=16, lr=3e-3, optimizer="adam",
                   schedule="cosine", clip_grad=1.0, contrastive=True, exclude_same_class=True,
                   augment=True, one_prompt_per_scene=True, loss=LossConfig("FixedPoint", 2))

RESULTS = []


def report(name, ok, elapsed, limit, detail):
    within = elapsed < limit
    line = (f"{'PASS' if ok and within else 'FAIL'}  criterion {name}: {detail} "
            f"[{elapsed:.1f}s / {limit:.0f}s]")
    RESULTS.append(line)
    print("\n" + line, file=sys.__stdout__, flush=True)
    assert ok, line
    assert within, line


@dataclass(repr=False)
class Zoo:
    """Lazily built benchmarks and trained models, with their build time."""
    benches: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)

    def bench(self, mask="softmax"):
        if mask not in self.benches:
            t = time.perf_counter()
            data = make_benchmark(BenchmarkConfig(), strategy=MaskStrategy(mask))
            self.benches[mask] = (data, time.perf_counter() - t)
        return self.benches[mask]

    def model(self, variant="FixedPoint", contrastive=True, seed=0, mask="softmax"):
        key = (variant, contrastive, seed, mask)
        if key not in self.models:
            (tr, _), _ = self.bench(mask)
            cfg = TrainConfig(**{**BASE.__dict__, "loss": LossConfig(variant, 2),
                                 "contrastive": contrastive, "seed": seed})
            torch.set_num_threads(1)
            t = time.perf_counter()
            model, _ = train(tr, cfg)
            self.models[key] = (model.eval(), time.perf_counter() - t)
        return self.models[key]

    def cost(self, *keys, masks=("softmax",)):
        return (sum(self.models[k][1] for k in keys)
                + sum(self.benches[m][1] for m in masks))


@pytest.fixture(scope="session")
def zoo():
    return Zoo()


def val_mae(zoo, key):
    model, _ = zoo.models[key]
    (_, val), _ = zoo.bench(key[3])
    T = LossConfig(key[0], 2).eval_T
    return compute_metrics(predict_counts(model, val, T), [s.count for s in val]).mae


def run_pytest(*node_ids):
    cmd = [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
           *[str(TESTS / n) for n in node_ids]]
    proc = subprocess.run(cmd, capture_output=True, text=True, cwd=TESTS.parent)
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    return proc.returncode == 0, tail


def test_criterion_1_unit_and_property_suite():
    t = time.perf_counter()
    ok, tail = run_pytest(
        "test_model.py::test_aggregation_examples",
        "test_model.py::test_aggregation_matches_weighted_mean_oracle",
        "test_prompt_masks.py::test_masks_are_non_negative",
        "test_model.py::test_step_scale_invariance",
        "test_synth.py::test_density_conservation",
        "test_datasets.py::test_round_trip",
        "test_datasets.py::test_pmask_round_trip",
        "test_datasets.py::test_pdm_round_trip")
    report("1 (unit/property)", ok, time.perf_counter() - t, 60, tail)


def test_criterion_2_gradient_verification():
    t = time.perf_counter()
    ok, tail = run_pytest("test_gradients.py")
    report("2 (gradients)", ok, time.perf_counter() - t, 120, tail)


def test_criterion_3_fixed_point_loss_beats_l2(zoo):
    fp, l2 = [], []
    for seed in SEEDS:
        zoo.model("FixedPoint", True, seed)
        zoo.model("L2", True, seed)
        fp.append(val_mae(zoo, ("FixedPoint", True, seed, "softmax")))
        l2.append(val_mae(zoo, ("L2", True, seed, "softmax")))
    keys = [(v, True, s, "softmax") for v in ("FixedPoint", "L2") for s in SEEDS]
    elapsed = zoo.cost(*keys)
    med_fp, med_l2 = float(np.median(fp)), float(np.median(l2))
    detail = (f"median val MAE fixed-point {med_fp:.3f} <= L2 {med_l2:.3f} "
              f"(per seed FP {np.round(fp, 3).tolist()}, L2 {np.round(l2, 3).tolist()})")
    report("3 (loss ablation)", med_fp <= med_l2, elapsed, 900, detail)


def spread(mae):
    return max(abs(mae[T] - mae[2]) / mae[2] for T in range(2, 7))


def test_criterion_4_iteration_sweep(zoo):
    model, _ = zoo.model("FixedPoint", True, 0)
    (_, val), _ = zoo.bench()
    t = time.perf_counter()
    table = iteration_sweep(model, val, 6)
    elapsed = time.perf_counter() - t + zoo.cost(("FixedPoint", True, 0, "softmax"))
    mae = {T: m.mae for T, m in table.items()}
    worst = spread(mae)
    ok = mae[1] > mae[2] and worst <= 0.05
    detail = (f"MAE(1) {mae[1]:.3f} > MAE(2) {mae[2]:.3f}; max |MAE(T)-MAE(2)|/MAE(2) "
              f"over T in 2..6 = {worst:.3%} <= 5%")
    # not part of the criterion: the same spread for other seeds already trained
    others = {s: zoo.models[("FixedPoint", True, s, "softmax")][0] for s in SEEDS[1:]
              if ("FixedPoint", True, s, "softmax") in zoo.models}
    if others:
        detail += " (info: " + ", ".join(
            f"seed {s} {spread({T: m.mae for T, m in iteration_sweep(mod, val, 6).items()}):.1%}"
            for s, mod in others.items()) + ")"
    report("4 (iteration sweep)", ok, elapsed, 120, detail)


def test_criterion_5_contrastive_negative_mae(zoo):
    (_, val), _ = zoo.bench()
    pairs = make_negative_pairs(val, np.random.default_rng(0))
    keys = [("FixedPoint", True, 0, "softmax"), ("FixedPoint", False, 0, "softmax")]
    t = time.perf_counter()
    nmae = {}
    for k in keys:
        model, _ = zoo.model(*k)
        nmae[k[1]] = negative_eval(model, pairs, T=2).mae
    elapsed = time.perf_counter() - t + zoo.cost(*keys)
    ok = nmae[True] <= 0.2 * nmae[False]
    detail = (f"N-MAE contrastive {nmae[True]:.3f} <= 20% of non-contrastive "
              f"{nmae[False]:.3f} (ratio {nmae[True] / nmae[False]:.3f})")
    report("5 (contrastive)", ok, elapsed, 900, detail)


def mass_fractions(n_scenes=120, seed=0):
    backend = SyntheticBackend()
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_scenes):
        a, b = rng.choice(len(CLASS_POOL), 2, replace=False)
        spec = SceneSpec(classes=(CLASS_POOL[a], CLASS_POOL[b]), seed=int(rng.integers(2**31)))
        image, ann = generate_scene(spec)
        name = CLASS_POOL[a].name
        region = target_region(ann, name, (8, 8))
        cos = text_to_mask_cosine(name, image, backend, (8, 8))
        d = build_concept_dictionary(scene_caption(ann), name)
        soft = text_to_mask_softmax(d, image, backend, 100.0, (8, 8))
        out.append((soft[region].sum() / soft.sum(), cos[region].sum() / cos.sum()))
    return np.array(out)


def test_criterion_6_mask_strategy(zoo):
    t = time.perf_counter()
    frac = mass_fractions()
    wins = float(np.mean(frac[:, 0] > frac[:, 1]))
    text_mae = {}
    for mask in ("softmax", "cosine"):
        model, _ = zoo.model("FixedPoint", True, 0, mask)
        (_, val), _ = zoo.bench(mask)
        text = [s for s in val if s.prompt_type == "text"]
        text_mae[mask] = compute_metrics(predict_counts(model, text, 2),
                                         [s.count for s in text]).mae
    elapsed = time.perf_counter() - t + zoo.cost(("FixedPoint", True, 0, "softmax"),
                                                 ("FixedPoint", True, 0, "cosine"),
                                                 masks=("softmax", "cosine"))
    ok = wins >= 0.9 and text_mae["softmax"] <= text_mae["cosine"]
    detail = (f"softmax mass fraction wins on {wins:.1%} of {len(frac)} scenes (>= 90%); "
              f"text MAE softmax {text_mae['softmax']:.3f} <= cosine {text_mae['cosine']:.3f}")
    report("6 (mask strategy)", ok, elapsed, 900, detail)


def test_criterion_7_cross_prompt(zoo):
    model, _ = zoo.model("FixedPoint", True, 0)
    (tr, val), _ = zoo.bench()
    t = time.perf_counter()
    rep = cross_prompt_eval(model, val, 2)  # raises unless scenes are identical across types
    mean = float(np.mean([s.count for s in tr]))
    baseline = compute_metrics([mean] * len(val), [s.count for s in val]).mae
    elapsed = time.perf_counter() - t + zoo.cost(("FixedPoint", True, 0, "softmax"))
    maes = {p: rep.rows[p].mae for p in ("box", "point", "text")}
    ok = all(m <= baseline / 2 for m in maes.values())
    detail = (", ".join(f"{p} {m:.3f}" for p, m in maes.items())
              + f" <= half the mean-count baseline {baseline:.3f}")
    report("7 (cross-prompt)", ok, elapsed, 300, detail)
