import io
import json
import math

import numpy as np
import pytest

from plora.data import (CAPTION, COMPOSE, KNOWLEDGE, MULTITASK, TEXT, NotEnumerableError, TaskSpec,
                        Vocab, collate, dump_records, entropy_floor, gen_batch, gen_compose,
                        gen_sequence)
from plora.model import ContractError
from plora.vision import VisionConfig, VisionEncoder, SyntheticImage, key_patterns, nearest_key


@pytest.mark.parametrize("kind", [CAPTION, KNOWLEDGE, MULTITASK, COMPOSE, TEXT])
def test_same_seed_same_batch(kind):
    a, b = gen_batch(TaskSpec(kind), 8, 5), gen_batch(TaskSpec(kind), 8, 5)
    assert a.token_ids.tobytes() == b.token_ids.tobytes()
    assert a.images.tobytes() == b.images.tobytes()
    assert not np.array_equal(a.token_ids, gen_batch(TaskSpec(kind), 8, 6).token_ids) or kind == TEXT


@pytest.mark.parametrize("kind", [CAPTION, KNOWLEDGE, MULTITASK, COMPOSE, TEXT])
def test_batch_invariants(kind):
    b = gen_batch(TaskSpec(kind), 16, 0)
    b.check()
    assert not np.any(b.loss_mask & b.mask.visual)
    assert np.all(b.token_ids[b.mask.visual] == Vocab.IMG)
    assert b.images.shape[0] * 4 == b.n_visual
    if kind == TEXT:
        assert b.n_visual == 0


def test_caption_template_and_answers():
    spec = TaskSpec(CAPTION)
    v, pats = spec.vocab, spec.patterns()
    b = gen_batch(spec, 32, 1)
    for i in range(32):
        row = b.token_ids[i]
        assert list(row[:2]) == [v.BOS, v.DESCRIBE]
        assert ''.join('V' if f else 'T' for f in b.mask.visual[i]) == 'TTVVVVTTT'
        key = b.image_keys[i]
        assert nearest_key(SyntheticImage(b.images[i], -1), pats) == key
        assert row[7] == v.key(key) and row[8] == v.EOS
        # only the position predicting the answer is scored
        assert np.flatnonzero(b.loss_mask[i]).tolist() == [6]
        assert b.targets[i, 6] == v.key(key)


def test_multitask_and_knowledge_answers():
    mt = gen_batch(TaskSpec(MULTITASK), 16, 2)
    v = TaskSpec(MULTITASK).vocab
    for i in range(16):
        assert mt.token_ids[i, 7] == v.key((mt.image_keys[i] + 1) % 4)
    kn = gen_batch(TaskSpec(KNOWLEDGE), 16, 2)
    for i in range(16):
        k = kn.image_keys[i]
        assert kn.token_ids[i, 7:9].tolist() == [v.fact(2 * k), v.fact(2 * k + 1)]
        assert kn.loss_mask[i].sum() == 2


def test_entropy_floors():
    assert entropy_floor(TaskSpec(CAPTION), visual_access=False) == pytest.approx(math.log(4), abs=1e-12)
    assert entropy_floor(TaskSpec(CAPTION), visual_access=True) == 0.0
    # two fact tokens: the second is determined by the first
    assert entropy_floor(TaskSpec(KNOWLEDGE), False) == pytest.approx(math.log(4) / 2, abs=1e-12)
    v = TaskSpec(CAPTION).vocab
    coin = {k: [(0.5, (v.key(0),)), (0.5, (v.key(1),))] for k in range(4)}
    spec = TaskSpec(CAPTION, answer_table=coin)
    assert entropy_floor(spec, True) == pytest.approx(math.log(2), abs=1e-12)
    assert entropy_floor(spec, False) == pytest.approx(math.log(2), abs=1e-12)


def test_entropy_floor_not_enumerable():
    with pytest.raises(NotEnumerableError):
        entropy_floor(TaskSpec(TEXT), False)


def test_compose_zero_slots():
    with pytest.raises(ContractError, match="slot"):
        gen_compose(TaskSpec(COMPOSE, n_slots=0), 0)


def test_compose_two_blocks_and_round_trip():
    s = gen_compose(TaskSpec(COMPOSE, n_slots=2), 3)
    flags = s.mask.visual
    starts = np.flatnonzero(flags & ~np.concatenate([[False], flags[:-1]]))
    assert len(starts) == 2 and flags.sum() == 8
    assert [st for st, _ in s.slot_positions()] == starts.tolist()
    assert s.reconstruct_mask().to_string() == s.mask.to_string()
    assert not np.any(s.loss_mask & flags)
    assert not np.any(s.loss_mask[: len(s.instruction)])


def test_text_sequences_have_no_visual():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = gen_sequence(TaskSpec(TEXT), rng)
        assert not any(s.visual) and s.images == []


def test_collate_pads_with_unscored_text():
    rng = np.random.default_rng(0)
    seqs = [gen_sequence(TaskSpec(CAPTION), rng), gen_sequence(TaskSpec(KNOWLEDGE), rng)]
    b = collate(seqs)
    assert b.shape == (2, 10)
    assert b.token_ids[0, -1] == Vocab.PAD and not b.loss_mask[0, -1] and not b.mask.visual[0, -1]


def test_encoder_attaches_embeddings():
    enc = VisionEncoder(VisionConfig(), 0)
    b = gen_batch(TaskSpec(CAPTION), 4, 0, encoder=enc)
    assert b.visual_embeds.shape == (16, 32)


def test_key_probs_respected():
    b = gen_batch(TaskSpec(CAPTION, key_probs=(1.0, 0.0, 0.0, 0.0)), 20, 0)
    assert np.all(b.image_keys == 0)


def test_invalid_spec():
    with pytest.raises(ValueError):
        TaskSpec("bogus")
    with pytest.raises(ValueError):
        TaskSpec(CAPTION, key_probs=(0.5, 0.2, 0.2, 0.2))


def test_dump_records():
    spec = TaskSpec(CAPTION)
    b = gen_batch(spec, 3, 11)
    fh = io.StringIO()
    dump_records(11, spec, b, fh)
    lines = fh.getvalue().splitlines()
    assert len(lines) == 3
    rec = json.loads(lines[0])
    assert rec["seed"] == 11 and rec["kind"] == CAPTION
    assert rec["key"] == int(b.image_keys[0])
    assert rec["mask"] == "TTVVVVTTT"
    assert rec["tokens"] == b.token_ids[0].tolist()


def test_vocab_layout():
    v = Vocab(4, 16)
    assert v.key(0) == 9 and v.fact(0) == 13 and v.word(0) == 21 and v.size == 37
    assert key_patterns(4, 8).shape == (4, 8, 8)
