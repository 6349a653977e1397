import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mvpersona.dataio import load_manifest
from mvpersona.errors import ConfigError, DataError
from mvpersona.rng import torch_generator
from mvpersona.text import (EOS, LEARNABLE_SYMBOL, PAD, TextEncoder,
                            build_vocabulary, encode_text, gather_embeddings,
                            null_token_ids, token_ids_for_prompt, tokenize)

DIM, MAX_LEN = 64, 16


def fresh_vocab():
    return build_vocabulary(DIM, torch_generator(0, "vocab-test"))


def test_tokenize_keeps_hyphens_and_symbol():
    assert tokenize("a photo of lady wearing blue T-shirt") == \
        ["a", "photo", "of", "lady", "wearing", "blue", "t-shirt"]
    assert tokenize(f"a photo of {LEARNABLE_SYMBOL}") == \
        ["a", "photo", "of", "<s*>"]


def test_tokenize_strips_edge_punctuation():
    assert tokenize("a photo, of dog.") == ["a", "photo", "of", "dog"]


def test_every_benchmark_prompt_is_fully_in_vocabulary():
    vocab = fresh_vocab()
    for case in load_manifest().cases:
        for prompt in (case.source_prompt, case.edit_prompt):
            for word in tokenize(prompt):
                assert vocab.lookup(word) != vocab.unk_index, \
                    f"'{word}' from case {case.id} missing"


def test_token_ids_append_eos_then_pad():
    vocab = fresh_vocab()
    ids = token_ids_for_prompt("a photo of dog", vocab, MAX_LEN)
    assert ids.shape == (MAX_LEN,)
    assert int(ids[4]) == vocab.eos_index
    assert all(int(i) == vocab.pad_index for i in ids[5:])


def test_empty_and_overlong_prompts_rejected():
    vocab = fresh_vocab()
    with pytest.raises(DataError):
        token_ids_for_prompt("  ", vocab, MAX_LEN)
    with pytest.raises(DataError):
        token_ids_for_prompt(" ".join(["dog"] * MAX_LEN), vocab, MAX_LEN)


def test_null_ids_are_all_pad():
    vocab = fresh_vocab()
    ids = null_token_ids(vocab, MAX_LEN)
    assert all(int(i) == vocab.pad_index for i in ids)


def test_mark_learnable_copies_initializer_row():
    vocab = fresh_vocab()
    vocab.mark_learnable("dog")
    sym = vocab.learnable_symbol_index
    dog = vocab.tokenizer_map["dog"]
    assert torch.equal(vocab.embeddings[sym], vocab.embeddings[dog])
    assert vocab.learnable_indices == {sym}


def test_mark_learnable_unknown_word_is_data_error():
    with pytest.raises(DataError):
        fresh_vocab().mark_learnable("zebra")


def test_restore_frozen_rows_is_bitwise():
    vocab = fresh_vocab()
    vocab.mark_learnable("dog")
    sym = vocab.learnable_symbol_index
    with torch.no_grad():
        vocab.embeddings += 0.125  # corrupt every row
    vocab.restore_frozen_rows()
    keep = torch.ones(vocab.embeddings.shape[0], dtype=torch.bool)
    keep[sym] = False
    assert torch.equal(vocab.embeddings[keep], vocab.frozen_snapshot[keep])
    # the learnable row keeps its corruption
    assert not torch.equal(vocab.embeddings[sym], vocab.frozen_snapshot[sym])


def test_restore_requires_marked_token():
    with pytest.raises(ConfigError):
        fresh_vocab().restore_frozen_rows()


def test_gather_modes_control_gradient_flow():
    vocab = fresh_vocab()
    vocab.mark_learnable("dog")
    ids = token_ids_for_prompt(f"a photo of {LEARNABLE_SYMBOL}", vocab, MAX_LEN)

    out = gather_embeddings(vocab, ids, "none")
    assert not out.requires_grad

    out = gather_embeddings(vocab, ids, "token")
    loss = (out**2).sum()
    grad = torch.autograd.grad(loss, vocab.embeddings)[0]
    sym = vocab.learnable_symbol_index
    nonlearnable = torch.ones(grad.shape[0], dtype=torch.bool)
    nonlearnable[sym] = False
    assert float(grad[nonlearnable].abs().max()) == 0.0
    assert float(grad[sym].abs().max()) > 0.0

    out = gather_embeddings(vocab, ids, "all")
    grad = torch.autograd.grad((out**2).sum(), vocab.embeddings)[0]
    assert float(grad[vocab.tokenizer_map["photo"]].abs().max()) > 0.0

    with pytest.raises(ConfigError):
        gather_embeddings(vocab, ids, "some")


def test_encode_text_reports_learnable_positions():
    vocab = fresh_vocab()
    vocab.mark_learnable("dog")
    enc = TextEncoder(DIM, MAX_LEN).to(torch.float64)
    encoding = encode_text(f"a photo of {LEARNABLE_SYMBOL} with {LEARNABLE_SYMBOL}",
                           vocab, enc)
    assert encoding.learnable_positions == {3, 5}
    assert encoding.sequence_embedding.shape == (MAX_LEN, DIM)


def test_encoder_output_depends_on_words():
    vocab = fresh_vocab()
    enc = TextEncoder(DIM, MAX_LEN).to(torch.float64)
    a = encode_text("a photo of dog", vocab, enc).sequence_embedding
    b = encode_text("a photo of cat", vocab, enc).sequence_embedding
    assert not torch.allclose(a, b)


@settings(max_examples=20)
@given(st.sampled_from(["dog", "cat", "robot", "lady", "t-shirt"]))
def test_tokenize_is_idempotent_on_clean_words(word):
    assert tokenize(word) == [word]
    assert tokenize(" ".join(tokenize(word))) == [word]
