import math

import numpy as np
import pytest

from lstmt.autodiff import Tape, backward
from lstmt.data import build_vocab, gen_toy_corpus
from lstmt.decoding import DecodeConfig, greedy_decode
from lstmt.errors import ConfigError, ContractError, NumericalError, VocabularyError
from lstmt.model import BOS, EOS, PAD, Captioner, FeatureSequence, ModelConfig, init_params, zero_params
from lstmt.training import (
    TrainConfig,
    TrainingExample,
    batch_xe_loss,
    build_examples,
    clip_gradients,
    global_norm,
    make_reward,
    pad_captions,
    sample_caption,
    sample_captions,
    scst_step,
    sequence_log_prob,
    train,
    xe_loss,
)

from oracles import nested, sequence_probs
from scst_check import TINY, TINY_V, grads_of, scst_gradient_check, tiny_example, toy_reward

CFG = ModelConfig(d_v=3, d_h=4, d_a=3, d_e=2, vocab_size=7)


def example(caption, K=3, seed=0, vid="v"):
    rng = np.random.default_rng(seed)
    return TrainingExample(vid, {"rgb": FeatureSequence(vid, "rgb", rng.uniform(-1, 1, (K, 3)))}, caption)


@pytest.mark.parametrize("caption", [[BOS, EOS], [BOS, 4, 5, 6, EOS], [BOS, 3, 3, EOS, PAD]])
def test_uniform_model_loss_is_exactly_log_v(caption):
    assert xe_loss(zero_params(CFG), example(caption), "rgb").item() == math.log(7)


def test_certain_model_has_zero_loss():
    p = zero_params(CFG)
    p.b_out.data[EOS] = 800.0
    assert xe_loss(p, example([BOS, EOS]), "rgb").item() == 0.0


def test_pad_targets_are_excluded():
    p = init_params(CFG, seed=1, scale=0.5)
    a = xe_loss(p, example([BOS, 4, 5, EOS]), "rgb").item()
    b = xe_loss(p, example([BOS, 4, 5, EOS, PAD, PAD]), "rgb").item()
    assert a == b
    padded = pad_captions([[BOS, 4, EOS], [BOS, EOS]])
    assert padded.tolist() == [[BOS, 4, EOS], [BOS, EOS, PAD]]
    assert xe_loss(p, example(list(padded[1])), "rgb").item() == xe_loss(p, example([BOS, EOS]), "rgb").item()


def test_batch_loss_is_mean_of_example_losses():
    p = init_params(CFG, seed=2, scale=0.5)
    exs = [example([BOS, 4, 5, EOS], seed=0), example([BOS, 6, EOS], K=5, seed=1)]
    want = sum(xe_loss(p, e, "rgb").item() for e in exs) / 2
    assert abs(batch_xe_loss(p, exs, "rgb").item() - want) < 1e-12


def test_bad_captions_rejected():
    p = zero_params(CFG)
    with pytest.raises(ContractError):
        xe_loss(p, example([BOS]), "rgb")
    with pytest.raises(ContractError):
        xe_loss(p, example([BOS, PAD]), "rgb")
    with pytest.raises(VocabularyError):
        example([BOS, 9, EOS]).validate(7)


def test_train_config_validation():
    for bad in ({"learning_rate": -1.0}, {"optimizer": "rmsprop"}, {"batch_size": 0},
                {"grad_clip_norm": 0.0}, {"scst_reward": "spice"}, {"epochs": -1}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_clip_gradients_examples():
    g = [np.array([6.0, 8.0])]  # norm 10
    np.testing.assert_array_equal(clip_gradients(g, 5.0)[0], [3.0, 4.0])
    small = [np.array([1.8, 2.4])]  # norm 3
    assert clip_gradients(small, 5.0)[0] is small[0]
    with pytest.raises(ContractError):
        clip_gradients(g, 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_clipped_norm_bounded(seed):
    rng = np.random.default_rng(seed)
    grads = [rng.normal(scale=10 ** rng.uniform(-2, 3), size=s) for s in [(3, 4), (5,), (2, 2)]]
    m = float(rng.uniform(0.1, 10))
    assert global_norm(clip_gradients(grads, m)) <= m + 1e-9


def _corpus(n=4):
    return [example([BOS, 3 + i % 4, 3 + (i + 1) % 4, EOS], K=2 + i % 3, seed=i, vid=f"v{i}") for i in range(n)]


@pytest.mark.parametrize("opt", ["adam", "sgd"])
def test_zero_learning_rate_leaves_params_bit_exact(opt):
    p = init_params(CFG, seed=3)
    before = p.snapshot()
    train(p, _corpus(), TrainConfig(learning_rate=0.0, optimizer=opt, epochs=2, batch_size=2))
    after = p.snapshot()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        p = init_params(CFG, seed=5)
        _, hist = train(p, _corpus(5), TrainConfig(learning_rate=0.01, epochs=3, batch_size=2, seed=9))
        runs.append(([h.loss for h in hist], p.snapshot()))
    assert runs[0][0] == runs[1][0]
    assert all(runs[0][1][k].tobytes() == runs[1][1][k].tobytes() for k in runs[0][1])


def test_train_logs_epoch_records():
    seen = []
    _, hist = train(init_params(CFG), _corpus(2), TrainConfig(epochs=2), log=seen.append)
    assert seen == hist
    assert [r.epoch for r in hist] == [1, 2]
    assert hist[0].line().startswith("epoch=1 split=train loss=")


def test_train_rejects_empty_corpus():
    with pytest.raises(ContractError):
        train(init_params(CFG), [], TrainConfig())


def test_nan_aborts_with_epoch():
    p = init_params(CFG)
    p.W_out.data[:] = np.nan
    with pytest.raises(NumericalError, match="epoch 1"):
        train(p, _corpus(2), TrainConfig(epochs=1))


def test_single_example_overfits():
    ex = example([BOS, 4, 6, 5, EOS], K=4)
    p = init_params(CFG, seed=0)
    _, hist = train(p, [ex], TrainConfig(learning_rate=0.05, epochs=200, batch_size=1))
    assert hist[-1].loss < 0.05
    out = greedy_decode(Captioner(CFG, p), ex.features["rgb"], DecodeConfig(beam_width=1, max_len=10))
    assert out.tokens == ex.caption[1:]


def test_build_examples_pairs_streams():
    toy = gen_toy_corpus(1, 3)
    vocab = build_vocab(toy.captions.values())
    exs = build_examples(toy.features["rgb"] + toy.features["flow"],
                         {k: [v] for k, v in toy.captions.items()}, vocab)
    assert [e.video_id for e in exs] == [s.video_id for s in toy.features["rgb"]]
    assert set(exs[0].features) == {"rgb", "flow"}
    assert vocab.decode(exs[0].caption) == toy.captions[exs[0].video_id]
    with pytest.raises(ContractError):
        build_examples(toy.features["rgb"], {}, vocab)


# ------------------------------------------------------------------ SCST

def test_sample_caption_matches_batched_sampler():
    p = init_params(TINY, seed=1, scale=1.5)
    f = tiny_example().features["rgb"]
    r1, r2 = np.random.default_rng(3), np.random.default_rng(3)
    one = [sample_caption(p, f, r1, 2) for _ in range(50)]
    assert one == sample_captions(p, f, r2, 2, 50)


def test_sampler_frequencies_follow_enumeration():
    p = init_params(TINY, seed=1, scale=1.5)
    f = tiny_example().features["rgb"]
    n = 40000
    probs = sequence_probs(nested(p), TINY_V, 5, 2)
    assert abs(sum(probs.values()) - 1.0) < 1e-12
    counts = {}
    for s in sample_captions(p, f, np.random.default_rng(0), 2, n):
        counts[tuple(s)] = counts.get(tuple(s), 0) + 1
    for s, q in probs.items():
        se = math.sqrt(q * (1 - q) / n)
        assert abs(counts.get(s, 0) / n - q) <= 4 * se + 1e-12


def test_scst_pseudo_loss_gradient_is_weighted_score():
    p = init_params(TINY, seed=2, scale=1.5)
    ex = tiny_example()
    with Tape() as tape:
        loss, r_s, r_g = scst_step(p, ex, "rgb", toy_reward, np.random.default_rng(7), 2)
        backward(tape, loss)
    g_loss = grads_of(p)
    sample = sample_caption(p, ex.features["rgb"], np.random.default_rng(7), 2)
    assert r_s == toy_reward(sample)
    greedy = greedy_decode(Captioner(TINY, p), ex.features["rgb"], DecodeConfig(beam_width=1, max_len=2)).tokens
    assert r_g == toy_reward(greedy)
    with Tape() as tape:
        lp = sequence_log_prob(p, ex.features["rgb"], sample)
        backward(tape, lp)
    for a, b in zip(g_loss, grads_of(p)):
        np.testing.assert_allclose(a, -(r_s - r_g) * b, rtol=0, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_scst_baseline_cancels(seed):
    p = init_params(TINY, seed=seed, scale=1.5)
    with Tape() as tape:
        loss, r_s, r_g = scst_step(p, tiny_example(), "rgb", lambda ids, refs: 0.7, np.random.default_rng(seed), 2)
        backward(tape, loss)
    assert r_s == r_g
    assert all(not np.any(g) for g in grads_of(p))


def test_constant_reward_has_zero_expected_gradient():
    p = init_params(TINY, seed=4, scale=1.5)
    f = tiny_example().features["rgb"]
    probs = sequence_probs(nested(p), TINY_V, 5, 2)
    total = [np.zeros_like(t.data) for t in p.tensors()]
    for s, q in probs.items():
        with Tape() as tape:
            backward(tape, sequence_log_prob(p, f, list(s)))
        total = [a + q * g for a, g in zip(total, grads_of(p))]
    assert max(float(np.max(np.abs(t))) for t in total) < 1e-12


def test_scst_estimator_matches_exact_gradient():
    assert scst_gradient_check(seed=0, n_samples=20000) <= 3.0


def test_make_reward_variants():
    vocab = build_vocab(["a dog runs fast", "a cat sits down"])
    ids = vocab.encode("a dog runs fast")[1:]
    refs = ["a dog runs fast"]
    assert make_reward("bleu4", vocab)(ids, refs) == 1.0
    assert make_reward("meteor_lite", vocab)(ids, refs) > 0.9
    cider = make_reward("cider_d", vocab, [["a dog runs fast"], ["a cat sits down"]])
    assert cider(ids, refs) > cider(vocab.encode("a cat sits down")[1:], refs)
    with pytest.raises(ConfigError):
        make_reward("cider_d", vocab)
