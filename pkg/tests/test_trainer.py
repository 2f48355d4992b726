import csv
import math

import numpy as np
import pytest

import rarrg.trainer as trainer
from rarrg.decoder import DecoderConfig, init_params
from rarrg.embedding import HashEmbeddingProvider
from rarrg.errors import NumericError, ValidationError
from rarrg.index import build_index
from rarrg.losses import LossConfig
from rarrg.pipeline import retrieve_views
from rarrg.trainer import (
    AdamW,
    PhraseEmbeddings,
    Study,
    SyntheticCorpusConfig,
    TrainConfig,
    clip_by_global_norm,
    evaluate_loss,
    finding_phrases,
    generate_corpus,
    global_norm,
    lr_at,
    studies_to_examples,
    train,
    write_history_csv,
)

TOY_CORPUS = SyntheticCorpusConfig(num_findings=8, signature_dim=6, grid_side=2, n_train=200, n_val=40, n_test=10,
                                   noise_level=0.1, seed=1)
TOY_DEC = DecoderConfig(N=8, L=1, d_model=32, heads=4, d_embed=16, d_visual=6, d_ff=64, dtype="float64")
TOY_LOSS = LossConfig(pos_class_size=7.16 * 8 / 50)


def toy_train_cfg(**kw):
    base = dict(learning_rate=1e-3, warmup_steps=5, batch_size=32, max_epochs=5, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def toy_corpus():
    return generate_corpus(TOY_CORPUS)


# --- corpus --------------------------------------------------------------------


def test_finding_phrases_distinct():
    names = finding_phrases(100)
    assert len(set(names)) == 100
    with pytest.raises(ValidationError):
        finding_phrases(10_000)


def test_corpus_counts_and_determinism(toy_corpus):
    train_set, val_set, test_set, bank = toy_corpus
    assert (len(train_set), len(val_set), len(test_set)) == (200, 40, 10)
    again = generate_corpus(TOY_CORPUS)
    assert [s.to_json() for s in train_set] == [s.to_json() for s in again[0]]
    assert len({s.id for s in train_set + val_set + test_set}) == 250
    assert bank.signatures.shape == (8, 6)


def test_corpus_mean_phrase_count():
    cfg = SyntheticCorpusConfig(num_findings=20, n_train=4000, n_val=0, n_test=0, seed=3)
    studies = generate_corpus(cfg)[0]
    assert np.mean([len(s.phrases) for s in studies]) == pytest.approx(7.16, abs=0.1)
    assert all(s.phrases for s in studies)


def test_corpus_negated_phrases(toy_corpus):
    _, _, _, bank = toy_corpus
    for s in toy_corpus[0][:50]:
        for p in s.phrases:
            if p.startswith("no "):
                assert bank.phrases.index(p[3:]) in bank.negated
                assert p[3:] not in s.phrases


def test_noise_free_single_finding_grid_is_signature():
    cfg = SyntheticCorpusConfig(num_findings=5, signature_dim=4, grid_side=3, n_train=20, n_val=0, n_test=0,
                                mean_phrases=1.0, negated_findings=0, noise_level=0.0)
    train_set, _, _, bank = generate_corpus(cfg)
    for s in train_set:
        assert len(s.phrases) == 1
        f = bank.phrases.index(s.phrases[0])
        np.testing.assert_allclose(s.views[0].grid.tokens().mean(axis=0), bank.signatures[f])


def test_lateral_views_drop_findings():
    cfg = SyntheticCorpusConfig(num_findings=10, n_train=300, n_val=0, n_test=0, views_per_study=2,
                                lateral_drop_prob=0.5, seed=2)
    studies = generate_corpus(cfg)[0]
    frontal = sum(len(s.views[0].phrases) for s in studies)
    lateral = sum(len(s.views[1].phrases) for s in studies)
    assert [v.position for v in studies[0].views] == ["frontal", "lateral"]
    assert lateral < frontal
    for s in studies:
        assert set(s.views[1].phrases) - set(s.views[0].phrases) == set()


def test_corpus_config_validation():
    with pytest.raises(ValidationError):
        SyntheticCorpusConfig(num_findings=1)
    with pytest.raises(ValidationError):
        SyntheticCorpusConfig(views_per_study=3)
    with pytest.raises(ValidationError):
        SyntheticCorpusConfig(num_findings=4, mean_phrases=7.16)


def test_study_json_round_trip(toy_corpus):
    s = toy_corpus[0][0]
    back = Study.from_json(s.to_json())
    assert back.to_json() == s.to_json()
    with pytest.raises(ValidationError):
        Study.from_json({"id": "x", "views": []})
    with pytest.raises(ValidationError):
        Study.from_json({"id": "x", "views": [{"position": "oblique", "tokens": [[0.0]]}]})


# --- schedule and optimiser -------------------------------------------------------


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, 200, cfg) == 0
    assert lr_at(25, 200, cfg) == pytest.approx(1e-4)
    assert lr_at(50, 200, cfg) == 2e-4
    assert lr_at(125, 200, cfg) == pytest.approx(1e-4)
    assert lr_at(200, 200, cfg) == pytest.approx(0, abs=1e-12)
    with pytest.raises(ValidationError):
        lr_at(201, 200, cfg)


def test_lr_is_non_increasing_after_warmup():
    cfg = TrainConfig()
    lrs = [lr_at(s, 300, cfg) for s in range(50, 301)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_clip_by_global_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    assert global_norm(grads) == 5.0
    clipped, norm = clip_by_global_norm(grads, 1.0)
    assert norm == 5.0
    assert global_norm(clipped) <= 1.0 + 1e-6
    same, _ = clip_by_global_norm(grads, 10.0)
    assert same is grads


def test_adamw_first_step_by_hand():
    cfg = TrainConfig(weight_decay=0.1)
    params = {"w": np.array([1.0, -2.0])}
    grads = {"w": np.array([0.5, -0.25])}
    AdamW(params, cfg).step(params, grads, lr=0.01)
    # first bias-corrected Adam step is sign(g) up to eps; decay is decoupled
    expected = np.array([1.0, -2.0]) - 0.01 * (np.sign([0.5, -0.25]) + 0.1 * np.array([1.0, -2.0]))
    np.testing.assert_allclose(params["w"], expected, rtol=1e-7)


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(loss_reduction="median")
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=0)


# --- training -----------------------------------------------------------------


def test_zero_epochs_returns_initial_params(toy_corpus):
    init = init_params(TOY_DEC, 0)
    res = train(toy_corpus[0], toy_corpus[1], TOY_DEC, TOY_LOSS, toy_train_cfg(max_epochs=0),
                HashEmbeddingProvider(16), init=init)
    assert res.history == [] and res.best_epoch is None
    assert all(np.array_equal(res.params[k], init[k]) for k in init)


def test_empty_dataset_and_dim_mismatch(toy_corpus):
    with pytest.raises(ValidationError):
        train([], [], TOY_DEC, TOY_LOSS, toy_train_cfg(), HashEmbeddingProvider(16))
    with pytest.raises(ValidationError):
        train(toy_corpus[0], [], TOY_DEC, TOY_LOSS, toy_train_cfg(), HashEmbeddingProvider(12))


def test_warmup_longer_than_run(toy_corpus):
    with pytest.raises(ValidationError, match="warmup"):
        train(toy_corpus[0], [], TOY_DEC, TOY_LOSS, toy_train_cfg(warmup_steps=1000), HashEmbeddingProvider(16))


@pytest.fixture(scope="module")
def toy_run(toy_corpus):
    return train(toy_corpus[0], toy_corpus[1], TOY_DEC, TOY_LOSS, toy_train_cfg(), HashEmbeddingProvider(16))


def test_training_reduces_loss(toy_corpus, toy_run):
    embed = PhraseEmbeddings(HashEmbeddingProvider(16), [p for s in toy_corpus[0] for p in s.phrases])
    examples = studies_to_examples(toy_corpus[0])
    before = evaluate_loss(examples, init_params(TOY_DEC, 0), TOY_DEC, TOY_LOSS, embed)
    after = evaluate_loss(examples, toy_run.params, TOY_DEC, TOY_LOSS, embed)
    assert after < before
    assert toy_run.history[-1]["train_loss"] < toy_run.history[0]["train_loss"]
    assert [row["epoch"] for row in toy_run.history] == [1, 2, 3, 4, 5]


def test_returned_params_have_best_validation_loss(toy_corpus, toy_run):
    embed = PhraseEmbeddings(HashEmbeddingProvider(16), [p for s in toy_corpus[0] + toy_corpus[1] for p in s.phrases])
    val = evaluate_loss(studies_to_examples(toy_corpus[1]), toy_run.params, TOY_DEC, TOY_LOSS, embed, batch_size=32)
    best = min(row["val_loss"] for row in toy_run.history)
    assert val == pytest.approx(best, rel=1e-12)
    assert toy_run.history[toy_run.best_epoch - 1]["val_loss"] == best


def test_training_is_bitwise_reproducible(toy_corpus, toy_run):
    again = train(toy_corpus[0], toy_corpus[1], TOY_DEC, TOY_LOSS, toy_train_cfg(), HashEmbeddingProvider(16))
    assert again.history == toy_run.history
    assert again.best_epoch == toy_run.best_epoch


def test_noise_only_during_training(monkeypatch, toy_corpus):
    calls = {"train": 0, "eval": 0}
    state = {"in_eval": False}
    real_add_noise = trainer.embedding.add_noise
    real_batch_loss = trainer.batch_loss

    def audited_noise(*args, **kwargs):
        calls["eval" if state["in_eval"] else "train"] += 1
        return real_add_noise(*args, **kwargs)

    def audited_batch_loss(*args, **kwargs):
        state["in_eval"] = True
        try:
            return real_batch_loss(*args, **kwargs)
        finally:
            state["in_eval"] = False

    monkeypatch.setattr(trainer.embedding, "add_noise", audited_noise)
    monkeypatch.setattr(trainer, "batch_loss", audited_batch_loss)
    res = train(toy_corpus[0][:64], toy_corpus[1][:16], TOY_DEC, TOY_LOSS,
                toy_train_cfg(max_epochs=2, warmup_steps=1), HashEmbeddingProvider(16))
    assert calls["train"] == 64 * 2
    assert calls["eval"] == 0

    # inference never touches the noise path
    def forbidden(*args, **kwargs):
        raise AssertionError("noise applied at inference")

    monkeypatch.setattr(trainer.embedding, "add_noise", forbidden)
    phrases = sorted({p for s in toy_corpus[0] for p in s.phrases})
    retrieve_views(toy_corpus[2][0], res.params, TOY_DEC, build_index(phrases, HashEmbeddingProvider(16)))


def test_noise_disabled_skips_noise(monkeypatch, toy_corpus):
    def forbidden(*args, **kwargs):
        raise AssertionError("noise applied with noise disabled")

    monkeypatch.setattr(trainer.embedding, "add_noise", forbidden)
    train(toy_corpus[0][:32], [], TOY_DEC, TOY_LOSS, toy_train_cfg(max_epochs=1, warmup_steps=0, noise=False),
          HashEmbeddingProvider(16))


def test_non_finite_loss_aborts_with_step(toy_corpus):
    init = init_params(TOY_DEC, 0)
    init["sel.b"][:] = np.inf
    with pytest.raises(NumericError, match="step 0"):
        train(toy_corpus[0][:32], [], TOY_DEC, TOY_LOSS, toy_train_cfg(max_epochs=1, warmup_steps=0),
              HashEmbeddingProvider(16), init=init)


def test_history_csv(tmp_path, toy_run):
    path = tmp_path / "h.csv"
    write_history_csv(toy_run.history, path)
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == ["epoch", "train_loss", "val_loss", "lr"]
    assert float(rows[-1]["val_loss"]) == toy_run.history[-1]["val_loss"]
    assert math.isclose(float(rows[-1]["lr"]), 0.0, abs_tol=1e-12)
