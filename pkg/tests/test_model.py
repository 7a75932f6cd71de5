"""Full tagger: loss laws, image independence, masks, persistence, training."""

import numpy as np
import pytest

from genner.checkpoint import load_checkpoint, save_checkpoint
from genner.data import (Example, Vocab, generate_corpus, make_batch,
                         make_schema)
from genner.model import ModelConfig, MultimodalTagger
from genner.tensor import Tensor, backward
from genner.train import AdamW, train_model, warmup_lr


RNG = np.random.default_rng

LABELS = ("O", "B-A", "I-A", "B-B", "I-B")
WORDS = ["alpha", "beta", "gamma", "delta", "eps"]


def tiny_model(seed=0, **overrides):
    vocab = Vocab.from_words(WORDS)
    kw = dict(labels=LABELS, vocab_size=len(vocab), d=8, h=2, n_layers=2,
              n_patches=3, d_raw=4, max_len=6, seed=seed)
    kw.update(overrides)
    return MultimodalTagger(ModelConfig(**kw), vocab)


def tiny_examples(with_image=True):
    rng = RNG(42)
    out = [Example(["alpha", "beta", "gamma"], ["O", "B-A", "O"],
                   rng.normal(size=(3, 4)) if with_image else None, with_image),
           Example(["delta", "eps"], ["B-B", "I-B"], None, False)]
    return out


def batch_of(model, examples):
    return make_batch(examples, model.vocab, model._label_index,
                      model.config.max_len)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(labels=LABELS, vocab_size=9, d=8, h=3)
    with pytest.raises(ValueError, match="alignment layer"):
        ModelConfig(labels=LABELS, vocab_size=9, n_layers=0)
    with pytest.raises(ValueError, match="alpha"):
        ModelConfig(labels=LABELS, vocab_size=9, alpha=-0.1)
    with pytest.raises(ValueError, match="label set"):
        ModelConfig(labels=("B-A", "O"), vocab_size=9)
    with pytest.raises(ValueError, match="vocab"):
        MultimodalTagger(ModelConfig(labels=LABELS, vocab_size=3), Vocab.from_words(WORDS))


def test_config_dict_roundtrip():
    c = ModelConfig(labels=LABELS, vocab_size=9, d=16, h=2, alpha=0.25)
    c2 = ModelConfig.from_dict(c.to_dict())
    assert c2 == c


def test_forward_shapes_and_emissions():
    model = tiny_model()
    batch = batch_of(model, tiny_examples())
    out = model.forward_train(batch, RNG(0), training=True)
    assert len(out.emissions) == 2
    assert out.emissions[0].shape == (3, len(LABELS))
    assert out.emissions[1].shape == (2, len(LABELS))
    assert out.loss_mner.size == 1
    assert float(out.loss_mner.data) > 0.0


def test_training_forward_requires_rng():
    model = tiny_model()
    batch = batch_of(model, tiny_examples())
    with pytest.raises(ValueError, match="rng"):
        model.forward_train(batch, None, training=True)


def test_overall_loss_alpha_zero_is_identical_object():
    model = tiny_model(alpha=0.0)
    batch = batch_of(model, tiny_examples())
    out = model.forward_train(batch, RNG(1), training=True)
    assert model.overall_loss(out) is out.loss_mner


def test_overall_loss_no_image_batch_is_identical_object():
    model = tiny_model(alpha=0.5)
    batch = batch_of(model, tiny_examples(with_image=False))
    out = model.forward_train(batch, RNG(2), training=True)
    assert model.overall_loss(out) is out.loss_mner
    assert all(r == 0.0 for r in out.recon)
    assert all(c == 0.0 for c in out.cycle)


def test_overall_loss_combines_generation_terms():
    model = tiny_model(alpha=0.5)
    batch = batch_of(model, tiny_examples())
    out = model.forward_train(batch, RNG(3), training=True)
    gen_sum = sum(float(t.data) for t in out.recon + out.cycle
                  if isinstance(t, Tensor))
    want = float(out.loss_mner.data) + 0.5 / 2 * gen_sum  # alpha/N scaling
    assert float(model.overall_loss(out).data) == pytest.approx(want, rel=1e-12)
    assert gen_sum > 0.0


def test_generation_losses_nonnegative_across_seeds():
    model = tiny_model(alpha=1.0)
    batch = batch_of(model, tiny_examples())
    for seed in range(5):
        out = model.forward_train(batch, RNG(seed), training=True)
        for t in out.recon + out.cycle:
            if isinstance(t, Tensor):
                assert float(t.data) >= 0.0


def test_infer_is_image_free_bitwise():
    model = tiny_model()
    tokens = ["alpha", "beta", "gamma"]
    tags1 = model.infer(tokens)
    # feed the same sentence through the training entry point with an image;
    # no parameter sees an update, so infer must be unchanged bitwise
    batch = batch_of(model, tiny_examples(with_image=True))
    model.forward_train(batch, RNG(4), training=True)
    tags2 = model.infer(tokens)
    assert tags1 == tags2
    assert len(tags1) == 3
    assert all(t in LABELS for t in tags1)


def test_infer_matches_eval_mode_text_branch():
    model = tiny_model()
    tokens = ["alpha", "beta", "gamma"]
    out = model._encode(model._single_batch(tokens), None, training=False)
    from genner.crf import viterbi_decode
    path = viterbi_decode(out.emissions[0].data, model.crf.transitions.data,
                          model.crf.start.data)
    assert model.infer(tokens) == [LABELS[i] for i in path]


def test_infer_rejects_empty_sentence():
    with pytest.raises(ValueError):
        tiny_model().infer([])


def test_eval_mode_forward_is_deterministic():
    model = tiny_model()
    batch = batch_of(model, tiny_examples())
    a = model._encode(batch, None, training=False)
    b = model._encode(batch, RNG(9), training=False)
    assert np.array_equal(a.text_final.data, b.text_final.data)
    assert np.array_equal(a.emissions[0].data, b.emissions[0].data)


def test_masks_nest_across_layers():
    model = tiny_model(n_layers=3)
    batch = batch_of(model, tiny_examples())
    out = model.forward_train(batch, RNG(5), training=True)
    assert len(out.records) == 3
    for earlier, later in zip(out.records, out.records[1:]):
        assert (later.text_mask <= earlier.text_mask).all()
        if later.visual_mask is not None:
            assert (later.visual_mask <= earlier.visual_mask).all()


def test_padding_rows_do_not_change_other_rows():
    model = tiny_model()
    a = Example(["alpha", "beta", "gamma"], ["O", "B-A", "O"], None, False)
    b = Example(["delta"], ["O"], None, False)
    alone = model._encode(batch_of(model, [a]), None, training=False)
    together = model._encode(batch_of(model, [a, b]), None, training=False)
    assert np.allclose(alone.emissions[0].data, together.emissions[0].data,
                       atol=1e-12)


def test_inspect_masks_structure():
    model = tiny_model()
    ex = tiny_examples()[0]
    out = model.inspect_masks(ex)
    assert out["tokens"] == ["[CLS]", "alpha", "beta", "gamma", "[SEP]"]
    assert out["has_image"] is True
    assert len(out["layers"]) == 2
    first = out["layers"][0]
    assert len(first["text_keep"]) == 5
    assert first["text_keep"][0] == 0  # [CLS] never counts as kept content
    assert "patch_keep" in first and len(first["patch_keep"]) == 3
    out2 = model.inspect_masks(tiny_examples()[1])
    assert "patch_keep" not in out2["layers"][0]


def test_alignment_similarity_scores():
    model = tiny_model()
    rng = RNG(6)
    cands = [rng.normal(size=(3, 4)) for _ in range(3)]
    scores = model.alignment_similarity(["alpha", "beta"], cands)
    assert len(scores) == 3
    assert all(-1.0 <= s <= 1.0 for s in scores)
    with pytest.raises(ValueError):
        model.alignment_similarity(["alpha"], cands[:1])


def test_alignment_similarity_requires_generation():
    model = tiny_model(fuse_generated=False)
    cands = [RNG(7).normal(size=(3, 4)) for _ in range(2)]
    with pytest.raises(RuntimeError):
        model.alignment_similarity(["alpha"], cands)


def test_named_parameters_stable_and_complete():
    model = tiny_model()
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    assert names == [n for n, _ in model.named_parameters()]
    assert any(n.startswith("generator.") for n in names)
    assert any(n.startswith("layers.1.") for n in names)
    assert "crf.transitions" in names


def test_generator_is_shared_not_per_layer():
    model = tiny_model(n_layers=4)
    gen_params = [n for n, _ in model.named_parameters()
                  if n.startswith("generator.")]
    model2 = tiny_model(n_layers=1)
    gen_params2 = [n for n, _ in model2.named_parameters()
                   if n.startswith("generator.")]
    assert gen_params == gen_params2


# -- optimizer and schedule ----------------------------------------------------


def test_warmup_lr_profile():
    # 100 steps, 10% warmup: ramps linearly over 10 steps, then flat
    assert warmup_lr(0, 100, 1.0, 0.1) == pytest.approx(0.1)
    assert warmup_lr(4, 100, 1.0, 0.1) == pytest.approx(0.5)
    assert warmup_lr(9, 100, 1.0, 0.1) == pytest.approx(1.0)
    assert warmup_lr(10, 100, 1.0, 0.1) == 1.0
    assert warmup_lr(99, 100, 1.0, 0.1) == 1.0
    # ratio 0 still warms up for one step
    assert warmup_lr(0, 100, 1.0, 0.0) == 1.0


def test_adamw_decays_matrices_not_vectors():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    opt = AdamW([("w", w), ("b", b)], lr=0.1, weight_decay=0.5)
    w.grad = np.zeros((2, 2))
    b.grad = np.zeros(2)
    opt.step()
    assert np.allclose(w.data, 1.0 - 0.1 * 0.5 * 1.0)  # pure decoupled decay
    assert np.array_equal(b.data, np.ones(2))  # 1-d: no decay, zero grad


def test_adamw_skips_gradless_params():
    w = Tensor(np.ones(3), requires_grad=True)
    opt = AdamW([("w", w)], lr=0.1)
    opt.step()
    assert np.array_equal(w.data, np.ones(3))


def test_adamw_first_step_is_signed_unit_lr():
    w = Tensor(np.zeros(2), requires_grad=True)
    opt = AdamW([("w", w)], lr=0.01)
    w.grad = np.array([3.0, -7.0])
    opt.step()
    # bias-corrected first step is lr * g / (|g| + eps) = lr * sign(g)
    assert np.allclose(w.data, [-0.01, 0.01], atol=1e-8)


def test_adamw_lr_scales_slow_matching_params():
    w = Tensor(np.zeros(2), requires_grad=True)
    s = Tensor(np.zeros(2), requires_grad=True)
    opt = AdamW([("block.weight", w), ("block.text_sampler.fc1.weight", s)],
                lr=0.01, lr_scales={"_sampler.": 0.1})
    w.grad = np.array([1.0, 1.0])
    s.grad = np.array([1.0, 1.0])
    opt.step()
    assert np.allclose(w.data, [-0.01, -0.01], atol=1e-8)
    assert np.allclose(s.data, [-0.001, -0.001], atol=1e-9)


# -- checkpoints ---------------------------------------------------------------


def test_checkpoint_roundtrip_bitwise(tmp_path):
    model = tiny_model(seed=3)
    # give parameters non-init values
    batch = batch_of(model, tiny_examples())
    out = model.forward_train(batch, RNG(8), training=True)
    backward(model.overall_loss(out))
    opt = AdamW(list(model.named_parameters()), lr=1e-2)
    opt.step()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, extra={"note": "x"})
    model2, extra = load_checkpoint(path)
    assert extra == {"note": "x"}
    assert model2.config == model.config
    assert model2.vocab.tokens == model.vocab.tokens
    for (n1, p1), (n2, p2) in zip(model.named_parameters(),
                                  model2.named_parameters()):
        assert n1 == n2
        assert np.array_equal(p1.data, p2.data)
    # inference parity after reload
    assert model2.infer(["alpha", "beta"]) == model.infer(["alpha", "beta"])


def test_checkpoint_same_model_same_bytes(tmp_path):
    m1, m2 = tiny_model(seed=5), tiny_model(seed=5)
    save_checkpoint(tmp_path / "a.ckpt", m1)
    save_checkpoint(tmp_path / "b.ckpt", m2)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    model = tiny_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    raw = path.read_bytes()
    (tmp_path / "bad_magic.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "bad_magic.ckpt")
    (tmp_path / "trunc.ckpt").write_bytes(raw + b"\x00" * 8)
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(tmp_path / "trunc.ckpt")


# -- end-to-end training on a micro corpus --------------------------------------


@pytest.fixture(scope="module")
def micro_setup():
    schema = make_schema(RNG(0), n_types=2, lexicon_size=12,
                         ambiguous_fraction=0.0, context_vocab=12, d_raw=4,
                         n_patches=3, noise_sigma=0.05, two_token_fraction=0.25)
    schema.max_tokens = 10
    splits = generate_corpus(schema, {"train": 96, "dev": 24},
                             missing_image_fraction=0.2, rng=RNG(1))
    vocab = Vocab.from_schema(schema)
    return schema, splits, vocab


def micro_config(schema, vocab, **overrides):
    kw = dict(labels=tuple(schema.labels()), vocab_size=len(vocab), d=16, h=2,
              n_layers=2, n_patches=3, d_raw=4, max_len=10, alpha=0.01,
              batch_size=8, epochs=12, lr=3e-3, seed=0)
    kw.update(overrides)
    return ModelConfig(**kw)


def test_training_overfits_unambiguous_micro_corpus(micro_setup, tmp_path):
    schema, splits, vocab = micro_setup
    model = MultimodalTagger(micro_config(schema, vocab), vocab)
    result = train_model(model, splits["train"], splits["dev"], out_dir=tmp_path)
    assert result["best_dev_f1"] >= 0.9  # fully determined task, small vocab
    assert (tmp_path / "best.ckpt").exists()
    assert (tmp_path / "last.ckpt").exists()
    assert result["total_steps"] == 12 * 12  # ceil(96/8) batches x 12 epochs
    assert len(result["epochs"]) == 12
    assert all(e["train_loss"] >= 0.0 or e["train_loss"] < 0.0
               for e in result["epochs"])  # present and numeric


def test_same_seed_training_is_byte_identical(micro_setup, tmp_path):
    schema, splits, vocab = micro_setup
    cfg = micro_config(schema, vocab, epochs=2)
    for name in ("r1", "r2"):
        model = MultimodalTagger(cfg, vocab)
        train_model(model, splits["train"], splits["dev"], out_dir=tmp_path / name)
    assert ((tmp_path / "r1" / "last.ckpt").read_bytes()
            == (tmp_path / "r2" / "last.ckpt").read_bytes())
    assert ((tmp_path / "r1" / "best.ckpt").read_bytes()
            == (tmp_path / "r2" / "best.ckpt").read_bytes())
