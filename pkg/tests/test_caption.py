import dataclasses

import numpy as np
import pytest
import torch

from spgim import imio
from spgim.backbone import ResNetEncoder, VisualBackboneConfig
from spgim.caption import (
    Captioner, PretrainSchedule, TextualDecoder, TextualDecoderConfig, Tokenizer,
    make_pretrain_optimizer, pad_batch, train_bicaption,
)
from spgim.config import desk_profile
from spgim.toydata import fixture_corpus_path, read_caption_manifest
from spgim.training import to_tensor, train_captioner
from oracles import central_difference, relative_error

SMALL = VisualBackboneConfig(width_multiplier=0.25)


def small_captioner(vocab=16, **kw):
    torch.manual_seed(0)
    dec = TextualDecoderConfig(layers=2, heads=4, model_width=32, vocab_size=vocab, max_len=12,
                               dropout=0.0, **kw)
    return Captioner(SMALL, dec).eval()


def test_full_scale_grid_is_7x7():
    enc = ResNetEncoder(VisualBackboneConfig()).eval()
    with torch.no_grad():
        feats = enc(torch.rand(1, 3, 224, 224))
    assert feats[4].shape == (1, 2048, 7, 7)
    assert [feats[i].shape[1] for i in (1, 2, 3, 4)] == [256, 512, 1024, 2048]


def test_token_counts():
    model = small_captioner()
    with torch.no_grad():
        assert model.encode_image(torch.rand(1, 3, 64, 64)).shape == (1, 4, 32)
        assert model.encode_image(torch.rand(2, 3, 96, 64)).shape == (2, 6, 32)


def test_non_divisible_input_states_padding():
    with pytest.raises(ValueError, match="pad"):
        small_captioner().encode_image(torch.rand(1, 3, 70, 64))


def test_encode_deterministic():
    model = small_captioner()
    img = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        assert torch.equal(model.encode_image(img), model.encode_image(img.clone()))
        assert torch.isfinite(model.encode_image(img)).all()


def test_caption_step_distribution():
    model = small_captioner()
    grid = torch.randn(3, 4, 32)
    prefix = torch.tensor([[1, 5, 6]] * 3)
    with torch.no_grad():
        probs = model.caption_step(grid, prefix)
    assert probs.shape == (3, 16)
    torch.testing.assert_close(probs.sum(-1), torch.ones(3), atol=1e-5, rtol=0)


def test_caption_step_requires_sos():
    with pytest.raises(ValueError, match="SOS"):
        small_captioner().caption_step(torch.randn(1, 4, 32), [5, 6])


def test_prefix_longer_than_max_len():
    with pytest.raises(ValueError, match="max_len"):
        small_captioner().caption_step(torch.randn(1, 4, 32), [1] + [5] * 12)


def test_causality():
    model = small_captioner()
    grid = torch.randn(2, 4, 32)
    gen = torch.Generator().manual_seed(1)
    for length in range(1, 10):
        prefix = torch.randint(4, 16, (2, length), generator=gen)
        prefix[:, 0] = 1
        ext = torch.cat([prefix, torch.randint(4, 16, (2, 1), generator=gen)], dim=1)
        with torch.no_grad():
            a = model.logits(grid, prefix)
            b = model.logits(grid, ext)[:, :length]
        assert (a - b).abs().max() <= 1e-6


def test_attention_rows_sum_to_one():
    model = small_captioner()
    with torch.no_grad():
        model.logits(torch.randn(2, 4, 32), torch.tensor([[1, 4, 5, 6]] * 2))
    for layer in model.forward_decoder.layers:
        for attn in (layer.self_attn, layer.cross_attn):
            w = attn.last_weights
            torch.testing.assert_close(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-5, rtol=0)


def test_backward_decoder_separate_with_shared_embedding():
    model = small_captioner()
    assert model.forward_decoder is not model.backward_decoder
    assert model.forward_decoder.embedding is model.backward_decoder.embedding
    shared = small_captioner(shared_heads=True)
    assert shared.forward_decoder is shared.backward_decoder


def test_palindrome_symmetry_shared_heads():
    tok = Tokenizer.fit(["red blue red"])
    model = small_captioner(vocab=len(tok), shared_heads=True)
    grid = torch.randn(1, 4, 32)
    fwd = torch.tensor([tok.encode("red blue red", direction="forward")])
    bwd = torch.tensor([tok.encode("red blue red", direction="backward")])
    with torch.no_grad():
        assert model.sequence_loss(grid, fwd, "forward") == model.sequence_loss(grid, bwd, "backward")


def test_bicaption_loss_is_mean_of_directions():
    tok = Tokenizer.fit(["a red dot", "two blue squares"])
    model = small_captioner(vocab=len(tok))
    grid = torch.randn(2, 4, 32)
    fwd = pad_batch([tok.encode(t) for t in ("a red dot", "two blue squares")])
    bwd = pad_batch([tok.encode(t, direction="backward") for t in ("a red dot", "two blue squares")])
    with torch.no_grad():
        lf = model.sequence_loss(grid, fwd, "forward")
        lb = model.sequence_loss(grid, bwd, "backward")
        torch.testing.assert_close(model.bicaption_loss(grid, fwd, bwd), (lf + lb) / 2)


def test_tokenizer_round_trip():
    tok = Tokenizer.fit(["A red dot, left.", "a blue dot"])
    ids = tok.encode("a red dot, left.")
    assert ids[0] == tok.sos_id and ids[-1] == tok.eos_id
    assert tok.decode(ids) == "a red dot , left ."
    assert tok.encode("a green dot")[2] == tok.unk_id
    assert tok.encode("a red dot", direction="backward")[1:-1] == tok.encode("a red dot")[1:-1][::-1]
    assert len(tok.encode("a " * 50, max_len=10)) == 10


def test_decoder_gradient_check():
    # one layer, width 8, two word tokens on top of the four specials
    torch.manual_seed(3)
    cfg = TextualDecoderConfig(layers=1, heads=2, model_width=8, vocab_size=6, max_len=6, dropout=0.0)
    emb = torch.nn.Embedding(6, 8)
    dec = TextualDecoder(cfg, emb).double()
    memory = torch.randn(2, 3, 8, dtype=torch.float64, requires_grad=True)
    tokens = torch.tensor([[1, 4, 5, 4, 2], [1, 5, 5, 2, 0]])

    def loss():
        logits = dec(tokens[:, :-1], memory)
        return torch.nn.functional.cross_entropy(
            logits.reshape(-1, 6), tokens[:, 1:].reshape(-1), ignore_index=0)

    params = [memory] + list(dec.parameters())
    value = loss()
    grads = torch.autograd.grad(value, params)
    # judged over the joint vector: the key bias gradient is identically zero
    with torch.no_grad():
        numeric = np.concatenate([central_difference(loss, p.data) for p in params])
    assert relative_error(torch.cat([g.reshape(-1) for g in grads]).numpy(), numeric) < 1e-3


def test_word_attention_matches_head_loop():
    tok = Tokenizer.fit(["a red dot above a blue box"])
    model = small_captioner(vocab=len(tok))
    grid = torch.randn(1, 6, 32)
    caption = tok.encode("a red dot above a blue box")
    captured = {}
    last = model.forward_decoder.layers[-1].cross_attn
    hook = last.register_forward_hook(lambda m, args, out: captured.update(q=args[0], k=args[1]))
    with pytest.warns(UserWarning, match="untrained"):
        maps, meta = model.word_attention(grid, caption, (3, 2))
    hook.remove()
    assert meta["untrained"]
    assert maps.shape == (7, 3, 2)
    assert (maps >= 0).all()
    torch.testing.assert_close(maps.sum((1, 2)), torch.ones(7), atol=1e-5, rtol=0)

    with torch.no_grad():
        q = last.q(captured["q"])[0]
        k = last.k(captured["k"])[0]
    heads, hd = last.heads, q.shape[-1] // last.heads
    expected = np.zeros((7, 6))
    for t in range(7):
        for h in range(heads):
            qs = q[t, h * hd:(h + 1) * hd].double().numpy()
            scores = [float(qs @ k[n, h * hd:(h + 1) * hd].double().numpy()) / np.sqrt(hd)
                      for n in range(6)]
            e = np.exp(np.array(scores) - max(scores))
            expected[t] += e / e.sum() / heads
    np.testing.assert_allclose(maps.reshape(7, 6).numpy(), expected, atol=1e-6)


def test_trained_flag_clears_watermark():
    model = small_captioner()
    model.trained_steps += 1
    _, meta = model.word_attention(torch.randn(1, 4, 32), [1, 4, 5, 2], (2, 2))
    assert not meta["untrained"]


def test_schedule_shape_and_groups():
    schedule = PretrainSchedule(total_steps=100, warmup_steps=10)
    opt, sched = make_pretrain_optimizer(small_captioner(), schedule)
    groups = {g["name"]: g for g in opt.param_groups}
    assert groups["backbone"]["initial_lr"] == 0.2
    assert groups["decoder"]["initial_lr"] == 1e-3
    assert all(g["momentum"] == 0.9 and g["weight_decay"] == 1e-4 for g in opt.param_groups)
    assert groups["backbone"]["lr"] < 0.2
    lrs = []
    for _ in range(100):
        opt.step()
        sched.step()
        lrs.append(opt.param_groups[0]["lr"])
    assert max(lrs) == pytest.approx(0.2)
    assert lrs[-1] == pytest.approx(0.0, abs=1e-12)
    assert all(a >= b for a, b in zip(lrs[9:], lrs[10:]))
    with pytest.raises(ValueError):
        PretrainSchedule(warmup_steps=0).factor(0)


def test_empty_captions_skipped():
    tok = Tokenizer.fit(["a red dot"])
    model = small_captioner(vocab=len(tok))
    opt, sched = make_pretrain_optimizer(model, PretrainSchedule(total_steps=5, warmup_steps=1))
    batch = [(torch.rand(3, 64, 64), "a red dot"), (torch.rand(3, 64, 64), "  "), (torch.rand(3, 64, 64), "")]
    loss, skipped = train_bicaption(model, tok, batch, opt, sched)
    assert skipped == 2 and loss is not None
    assert train_bicaption(model, tok, batch[1:], opt, sched) == (None, 2)


@pytest.mark.slow
def test_toy_corpus_loss_halves():
    cfg = desk_profile(0)
    pairs = read_caption_manifest(fixture_corpus_path())[:5]
    texts = [t for _, t in pairs]
    images = torch.stack([to_tensor(imio.read_image(p)) for p, _ in pairs])
    tok = Tokenizer.fit(texts)
    torch.manual_seed(0)
    model = Captioner(VisualBackboneConfig(width_multiplier=0.25),
                      dataclasses.replace(cfg.caption.decoder, vocab_size=len(tok)))

    def corpus_loss():
        model.eval()
        fwd = pad_batch([tok.encode(t, 31) for t in texts])
        bwd = pad_batch([tok.encode(t, 31, "backward") for t in texts])
        with torch.no_grad():
            return float(model.bicaption_loss(model.encode_image(images), fwd, bwd))

    before = corpus_loss()
    train_captioner(model, tok, images, texts, cfg.caption, seed=0, log_every=0)
    assert corpus_loss() < before / 2
