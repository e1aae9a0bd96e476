import numpy as np
import pytest
import torch

from promptcount.losses import LossConfig
from promptcount.model import CountingModel, ModelConfig
from promptcount.synth import BenchmarkConfig, SyntheticBackend, make_split
from promptcount.training import (TrainConfig, TrainingError, _side_by_side, dihedral,
                                  draw_partners, dump_train_config, load_train_config,
                                  make_contrastive_batch, same_class_pairs, train,
                                  write_log)

SMALL = ModelConfig(channels=16, attn_dim=16, encoder_widths=(8, 16), decoder_widths=(16, 16))


@pytest.fixture(scope="module")
def samples():
    return make_split(BenchmarkConfig(), 6, seed=3, backend=SyntheticBackend())


# ---------------------------------------------------------------------------
# contrastive batches
# ---------------------------------------------------------------------------


def test_partners_never_self():
    rng = np.random.default_rng(0)
    for B in (2, 3, 8, 17):
        for _ in range(200):
            j = draw_partners(B, rng)
            assert (j != np.arange(B)).all() and (0 <= j).all() and (j < B).all()


def test_partner_frequencies_are_uniform():
    B, n = 6, 10_000
    rng = np.random.default_rng(1)
    draws = np.stack([draw_partners(B, rng) for _ in range(n)])
    p = 1 / (B - 1)
    sigma = np.sqrt(p * (1 - p) / n)
    for i in range(B):
        freq = np.bincount(draws[:, i], minlength=B) / n
        assert freq[i] == 0
        others = np.delete(freq, i)
        assert (np.abs(others - p) <= 5 * sigma).all()


def test_forbidden_partners_avoided():
    rng = np.random.default_rng(4)
    forbidden = np.zeros((4, 4), dtype=bool)
    forbidden[0, 1:3] = True  # 0 may only pair with 3
    forbidden[1, :] = True  # nothing left for 1: falls back to any other
    for _ in range(200):
        j = draw_partners(4, rng, forbidden)
        assert j[0] == 3 and j[1] != 1 and (j != np.arange(4)).all()


def test_exclude_same_class(samples):
    batch = samples[::3]
    items = make_contrastive_batch(batch, np.random.default_rng(5), exclude_same_class=True)
    clash = same_class_pairs(batch)
    np.fill_diagonal(clash, True)
    assert not clash.all(axis=1).all()
    for it in items:
        if not clash[it.i].all():
            assert not clash[it.i, it.j]


def test_batch_of_one_rejected(samples):
    with pytest.raises(ValueError):
        make_contrastive_batch(samples[:1], np.random.default_rng(0))


def test_contrastive_items(samples):
    batch = samples[:5]
    feats = [torch.randn(16, 8, 8) for _ in batch]
    items = make_contrastive_batch(batch, np.random.default_rng(2), feats)
    for it in items:
        s = batch[it.i]
        assert it.i != it.j
        assert it.mask.shape == (8, 16) and it.target.shape == (8, 16)
        assert it.features.shape == (16, 8, 16)
        assert (it.mask[:, 8:] == 0).all() and (it.target[:, 8:] == 0).all()
        assert it.mask.sum() == pytest.approx(s.mask.sum())
        assert it.target.sum() == pytest.approx(s.count)
        assert torch.equal(it.features[..., 8:], feats[it.j])


def test_side_by_side_places_positive():
    pos = torch.ones(2, 1, 3, 3)
    neg = torch.zeros(2, 1, 3, 3)
    out = _side_by_side(pos, neg, torch.tensor([True, False]))
    assert out.shape == (2, 1, 3, 6)
    assert out[0, ..., :3].eq(1).all() and out[0, ..., 3:].eq(0).all()
    assert out[1, ..., :3].eq(0).all() and out[1, ..., 3:].eq(1).all()


@pytest.mark.parametrize("k", range(4))
@pytest.mark.parametrize("flip", [False, True])
def test_dihedral_preserves_mass(k, flip):
    x = torch.rand(2, 8, 8)
    y = dihedral(x, k, flip)
    torch.testing.assert_close(y.sum((-2, -1)), x.sum((-2, -1)))
    assert torch.equal(dihedral(x, 0, False), x)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def params_of(model):
    return [p.detach().clone() for p in model.parameters()]


def test_zero_epochs_returns_initial_params(samples):
    cfg = TrainConfig(epochs=0, model=SMALL)
    torch.manual_seed(cfg.seed)
    init = params_of(CountingModel(SMALL))
    model, history = train(samples, cfg)
    assert history == []
    assert all(torch.equal(a, b) for a, b in zip(init, params_of(model)))


@pytest.mark.parametrize("contrastive", [False, True])
def test_same_seed_same_params(samples, contrastive):
    cfg = TrainConfig(epochs=2, batch_size=4, model=SMALL, contrastive=contrastive,
                      optimizer="adam", schedule="cosine", clip_grad=1.0)
    a, ha = train(samples, cfg)
    b, hb = train(samples, cfg)
    assert [h.loss for h in ha] == [h.loss for h in hb]
    assert all(torch.equal(x, y) for x, y in zip(params_of(a), params_of(b)))


def test_training_reduces_loss(samples):
    cfg = TrainConfig(epochs=15, batch_size=6, model=SMALL, contrastive=False, optimizer="adam",
                      lr=3e-3, one_prompt_per_scene=False, augment=False)
    _, history = train(samples, cfg)
    assert history[-1].loss < history[0].loss


def test_validation_columns(samples, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=4, model=SMALL, validate_every=2,
                      loss=LossConfig("L2", T=1))
    _, history = train(samples[:9], cfg, val=samples[9:])
    assert np.isnan(history[0].val_mae) and np.isfinite(history[1].val_mae)
    path = tmp_path / "log.tsv"
    write_log(history, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2 and len(lines[1].split("\t")) == 4 and lines[1].startswith("2\t")


def test_divergence_aborts(samples):
    torch.manual_seed(0)
    model = CountingModel(SMALL)
    with torch.no_grad():
        model.decoder[-1].bias.fill_(float("inf"))
    with pytest.raises(TrainingError, match="non-finite"):
        train(samples, TrainConfig(epochs=1, model=SMALL), model=model)


def test_empty_dataset():
    with pytest.raises(TrainingError):
        train([], TrainConfig(epochs=1))


def test_config_validation():
    for bad in (dict(epochs=-1), dict(lr=0.0), dict(batch_size=0), dict(optimizer="lbfgs"),
                dict(contrastive=True, batch_size=1), dict(schedule="step")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def test_config_file_round_trip(tmp_path, monkeypatch):
    monkeypatch.delenv("PROMPTCOUNT_SEED", raising=False)
    cfg = TrainConfig(epochs=7, lr=0.01, optimizer="adam", contrastive=False,
                      loss=LossConfig("InfinityOnly", T=3), model=SMALL)
    path = tmp_path / "train.cfg"
    path.write_text("# comment\n" + dump_train_config(cfg))
    assert load_train_config(path) == cfg


def test_config_overrides_and_env(tmp_path, monkeypatch):
    path = tmp_path / "train.cfg"
    path.write_text("epochs = 3\nseed = 1\nloss.variant = L2\nmodel.heads = 4\n")
    monkeypatch.delenv("PROMPTCOUNT_SEED", raising=False)
    cfg = load_train_config(path, {"epochs": "5"})
    assert cfg.epochs == 5 and cfg.seed == 1 and cfg.loss.variant == "L2" and cfg.model.heads == 4
    monkeypatch.setenv("PROMPTCOUNT_SEED", "42")
    assert load_train_config(path).seed == 42


def test_config_errors(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("epochs 3\n")
    with pytest.raises(ValueError, match="bad.cfg:1"):
        load_train_config(path)
    with pytest.raises(ValueError):
        load_train_config(None, {"nonsense": "1"})


@pytest.mark.slow
def test_thirty_epochs_beat_untrained_baseline():
    from promptcount.evaluation import compute_metrics, predict_counts
    from promptcount.synth import make_benchmark

    tr, val = make_benchmark()
    cfg = TrainConfig(model=ModelConfig(heads=8, gated_values=False), epochs=30, batch_size=16,
                      lr=3e-3, optimizer="adam", schedule="cosine", clip_grad=1.0,
                      exclude_same_class=True)
    gt = [s.count for s in val]
    torch.manual_seed(cfg.seed)
    untrained = compute_metrics(predict_counts(CountingModel(cfg.model).eval(), val, 2), gt).mae
    model, _ = train(tr, cfg)
    trained = compute_metrics(predict_counts(model, val, 2), gt).mae
    assert trained * 5 <= untrained, (trained, untrained)
