import json
from pathlib import Path

import pytest
import torch

from dcqa.backend import (
    BackendConfig,
    CapacityError,
    HiddenStates,
    PretrainedBackend,
    ReferenceBackend,
    TokenBatch,
    WordTokenizer,
    make_backend,
    pad_rows,
)

GOLDEN = Path(__file__).parent / "data" / "reference_golden.json"


def ref(d=8, seed=0, max_seq_len=16, clue_len=3, vocab_size=64):
    cfg = BackendConfig(hidden_dim=d, max_seq_len=max_seq_len, clue_len=clue_len, vocab_size=vocab_size)
    return ReferenceBackend(cfg, seed=seed).double().eval()


def test_tokenize_basic():
    b = ref()
    row = b.tokenize("hello", max_len=64)
    assert row.token_ids.shape[1] <= 64
    assert int(row.attention_mask.sum()) == len(b.tokens("hello")) == 1
    assert torch.equal(b.tokenize("Hello, world!").token_ids, b.tokenize("Hello, world!").token_ids)


def test_tokenize_truncates_from_right():
    b = ref(max_seq_len=64)
    text = " ".join(f"w{i}" for i in range(500))
    row = b.tokenize(text, max_len=64)
    assert row.token_ids.shape == (1, 64) and bool(row.attention_mask.all())
    assert row.token_ids[0, 0] == b.tokenizer.token_id("w0")


@pytest.mark.parametrize("text", ["", "   "])
def test_tokenize_empty(text):
    with pytest.raises(ValueError):
        ref().tokenize(text)


def test_token_batch_rejects_holes():
    with pytest.raises(ValueError):
        TokenBatch(torch.tensor([[3, 4, 5]]), torch.tensor([[1, 0, 1]]))


def test_vocab_tokenizer_ranks_and_round_trips():
    tok = WordTokenizer.from_texts(["b a a", "c a b"], vocab_size=16)
    assert tok.vocab[:3] == ["a", "b", "c"]
    again = WordTokenizer.from_state_dict(tok.state_dict())
    assert again.encode("a c zzz") == tok.encode("a c zzz")
    assert tok.encode("zzz") == [2]  # out of vocabulary


def test_same_seed_same_weights():
    a, b = ref(seed=3), ref(seed=3)
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)
    assert not torch.equal(ref(seed=4).embedding.weight, a.embedding.weight)


def test_construction_leaves_global_rng_alone():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    ref(seed=11)
    assert torch.equal(torch.rand(3), expected)


def test_golden_encode_decode():
    golden = json.loads(GOLDEN.read_text())
    b = ref()
    batch = pad_rows([[i for i in row if i] for row in golden["ids"]], pad_to=6)
    with torch.no_grad():
        enc = b.encode(batch)
        dec = b.decode(enc, 3)
    torch.testing.assert_close(enc.values, torch.tensor(golden["encode"], dtype=torch.float64), rtol=0, atol=1e-12)
    torch.testing.assert_close(dec.values, torch.tensor(golden["decode"], dtype=torch.float64), rtol=0, atol=1e-12)


def test_shapes_and_composition():
    b = ref(d=8, max_seq_len=16)
    enc = b.encode(b.tokenize_batch(["a b c", "d e"]))
    assert enc.values.shape == (2, 3, 8)
    assert b.decode(enc, 1).values.shape == (2, 1, 8)
    assert b.decode(enc, 16).values.shape == (2, 16, 8)
    # masked positions of the encoder output are zeroed
    assert torch.count_nonzero(enc.values[1, 2]) == 0


def test_padding_insensitivity():
    b = ref()
    ids = [7, 3, 19, 4]
    short = b.encode(pad_rows([ids], pad_to=4)).values[0]
    for pad in (5, 9, 16):
        long = b.encode(pad_rows([ids], pad_to=pad)).values[0, :4]
        torch.testing.assert_close(long, short, rtol=0, atol=1e-12)


def test_decode_padding_insensitivity():
    b = ref()
    enc = b.encode(pad_rows([[7, 3, 19, 4]], pad_to=4))
    padded = HiddenStates(torch.cat([enc.values, torch.zeros(1, 5, 8, dtype=torch.float64)], 1),
                          torch.cat([enc.mask, torch.zeros(1, 5, dtype=torch.bool)], 1))
    torch.testing.assert_close(b.decode(padded, 4).values, b.decode(enc, 4).values, rtol=0, atol=1e-12)


def test_capacity_errors():
    b = ref(max_seq_len=8)
    with pytest.raises(CapacityError):
        b.encode(pad_rows([list(range(3, 13))]))
    enc = b.encode(pad_rows([[3, 4]]))
    with pytest.raises(CapacityError):
        b.decode(enc, 9)
    with pytest.raises(ValueError):
        b.decode(enc, 0)


def test_encode_gradcheck():
    b = ref(d=4)
    batch = pad_rows([[5, 6, 7], [8, 9]], pad_to=3)
    proj = torch.randn(3, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))

    out = (b.encode(batch).values * proj).sum()
    (grad,) = torch.autograd.grad(out, b.enc_attn.q.weight)
    eps = 1e-6
    for idx in [(0, 0), (1, 2), (3, 3)]:
        with torch.no_grad():
            b.enc_attn.q.weight[idx] += eps
            up = (b.encode(batch).values * proj).sum()
            b.enc_attn.q.weight[idx] -= 2 * eps
            down = (b.encode(batch).values * proj).sum()
            b.enc_attn.q.weight[idx] += eps
        fd = (up - down) / (2 * eps)
        assert abs(fd - grad[idx]) <= 1e-4 * max(abs(fd), abs(grad[idx]), 1e-8)


def test_decode_gradients_reach_encoder_states():
    b = ref(d=4)
    gen = torch.Generator().manual_seed(1)
    states = torch.randn(2, 3, 4, dtype=torch.float64, generator=gen)
    mask = torch.tensor([[1, 1, 1], [1, 1, 0]], dtype=torch.bool)
    proj = torch.randn(2, 3, 4, dtype=torch.float64, generator=gen)

    def readout(x):
        return (b.decode(HiddenStates(x, mask), 3).values * proj).sum()

    x = states.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(readout(x), x)
    assert grad.abs().sum() > 0
    assert torch.count_nonzero(grad[1, 2]) == 0
    eps = 1e-6
    for idx in [(0, 0, 0), (0, 2, 3), (1, 1, 2)]:
        up, down = states.clone(), states.clone()
        up[idx] += eps
        down[idx] -= eps
        with torch.no_grad():
            fd = (readout(up) - readout(down)) / (2 * eps)
        assert abs(fd - grad[idx]) <= 1e-4 * max(abs(fd), abs(grad[idx]), 1e-8)


def test_make_backend_reference():
    b = make_backend(BackendConfig(hidden_dim=8, vocab_size=32), seed=2)
    assert isinstance(b, ReferenceBackend)
    with pytest.raises((ValueError, FileNotFoundError)):
        make_backend(BackendConfig(name="t5-base", hidden_dim=8), model_dir=None)


def test_pretrained_adapter_with_tiny_t5():
    transformers = pytest.importorskip("transformers")
    cfg = transformers.T5Config(vocab_size=64, d_model=8, d_kv=4, d_ff=16, num_layers=1,
                                num_decoder_layers=1, num_heads=2, decoder_start_token_id=0)
    torch.manual_seed(0)
    model = transformers.T5ForConditionalGeneration(cfg).double().eval()
    backend = PretrainedBackend(model, WordTokenizer(64), BackendConfig(name="tiny-t5", hidden_dim=8,
                                                                        max_seq_len=16, clue_len=2,
                                                                        vocab_size=64))
    batch = backend.tokenize_batch(["a b c d", "e f"])
    enc = backend.encode(batch)
    assert enc.values.shape == (2, 4, 8)
    short = backend.encode(backend.tokenize_batch(["e f"])).values[0]
    torch.testing.assert_close(enc.values[1, :2], short, rtol=0, atol=1e-5)
    assert backend.decode(enc, 2).values.shape == (2, 2, 8)
