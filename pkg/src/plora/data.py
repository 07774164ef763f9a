"""Synthetic desk-scale task generators with exactly computable loss floors.

Every sequence is ``instruction prefix | image block(s) | answer``. Images
carry a class key; answers are drawn from a per-key answer table, so the
minimum achievable loss with or without access to the image is an
enumerable conditional entropy.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .layer import ModalityMask
from .model import ContractError, InterleavedBatch
from .vision import key_patterns, make_image

CAPTION, KNOWLEDGE, MULTITASK, COMPOSE, TEXT = "CAPTION", "KNOWLEDGE", "MULTITASK", "COMPOSE", "TEXT"
KINDS = (CAPTION, KNOWLEDGE, MULTITASK, COMPOSE, TEXT)


class NotEnumerableError(ValueError):
    """The task template has no enumerable key/answer mapping."""


@dataclass(frozen=True)
class Vocab:
    n_keys: int = 4
    n_words: int = 16

    PAD = 0
    BOS = 1
    SEP = 2
    EOS = 3
    IMG = 4  # placeholder id at VISUAL positions, never embedded
    DESCRIBE = 5  # "Describe this image"
    TELL = 6  # "Tell me something about this image"
    READ = 7  # vision-capability style instruction
    WRITE = 8  # composition instruction
    _FIRST = 9

    def key(self, k: int) -> int:
        return self._FIRST + k

    def fact(self, i: int) -> int:
        return self._FIRST + self.n_keys + i

    def word(self, i: int) -> int:
        return self._FIRST + 3 * self.n_keys + (i % self.n_words)

    @property
    def size(self) -> int:
        return self._FIRST + 3 * self.n_keys + self.n_words


INSTRUCTION = {CAPTION: Vocab.DESCRIBE, KNOWLEDGE: Vocab.TELL, MULTITASK: Vocab.READ,
               COMPOSE: Vocab.WRITE}


def default_answer_table(kind: str, vocab: Vocab) -> dict[int, list[tuple[float, tuple[int, ...]]]]:
    K = vocab.n_keys
    if kind == CAPTION:
        return {k: [(1.0, (vocab.key(k),))] for k in range(K)}
    if kind == KNOWLEDGE:
        return {k: [(1.0, (vocab.fact(2 * k), vocab.fact(2 * k + 1)))] for k in range(K)}
    if kind == MULTITASK:
        return {k: [(1.0, (vocab.key((k + 1) % K),))] for k in range(K)}
    raise NotEnumerableError(f"{kind} has no key/answer table")


@dataclass
class TaskSpec:
    kind: str = CAPTION
    n_keys: int = 4
    n_words: int = 16
    image_side: int = 8
    patch: int = 4
    pattern_seed: int = 1234
    image_noise: float = 0.2
    answer_table: dict | None = None
    key_probs: tuple[float, ...] | None = None
    n_slots: int = 2  # COMPOSE only
    text_len: int = 6  # TEXT only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if self.n_keys < 1:
            raise ValueError("n_keys must be >= 1")
        if self.image_side % self.patch:
            raise ContractError(f"image_side {self.image_side} not divisible by patch {self.patch}")
        if self.answer_table is None and self.kind in (CAPTION, KNOWLEDGE, MULTITASK):
            self.answer_table = default_answer_table(self.kind, self.vocab)
        if self.answer_table is not None:
            for k, dist in self.answer_table.items():
                if abs(sum(p for p, _ in dist) - 1.0) > 1e-12:
                    raise ValueError(f"answer distribution for key {k} does not sum to 1")
        if self.key_probs is not None and abs(sum(self.key_probs) - 1.0) > 1e-12:
            raise ValueError("key_probs must sum to 1")

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.n_keys, self.n_words)

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch) ** 2

    def patterns(self) -> np.ndarray:
        return key_patterns(self.n_keys, self.image_side, self.pattern_seed)

    def key_distribution(self) -> np.ndarray:
        if self.key_probs is None:
            return np.full(self.n_keys, 1.0 / self.n_keys)
        return np.asarray(self.key_probs, dtype=np.float64)


@dataclass
class Sequence:
    """One generated sequence before collation."""

    kind: str
    tokens: list[int]
    visual: list[bool]
    loss_on: list[bool]  # per position: is the *target* at this position scored
    images: list[np.ndarray] = field(default_factory=list)
    keys: list[int] = field(default_factory=list)


def _sample_answer(dist, rng) -> tuple[int, ...]:
    probs = np.array([p for p, _ in dist])
    i = int(rng.choice(len(dist), p=probs)) if len(dist) > 1 else 0
    return tuple(dist[i][1])


def _keyed_sequence(spec: TaskSpec, rng, patterns) -> Sequence:
    v = spec.vocab
    key = int(rng.choice(spec.n_keys, p=spec.key_distribution()))
    img = make_image(key, patterns, rng, spec.image_noise)
    answer = _sample_answer(spec.answer_table[key], rng)
    n = spec.n_patches
    tokens = [v.BOS, INSTRUCTION[spec.kind]] + [v.IMG] * n + [v.SEP] + list(answer) + [v.EOS]
    visual = [False, False] + [True] * n + [False] * (2 + len(answer))
    # position t is scored when its target tokens[t+1] is an answer token
    first = 2 + n  # SEP position
    loss_on = [first <= t < first + len(answer) for t in range(len(tokens))]
    return Sequence(spec.kind, tokens, visual, loss_on, [img.pixels], [key])


def _text_sequence(spec: TaskSpec, rng) -> Sequence:
    """Text-only data: a counting run of words, or a word -> key-name lookup."""
    v = spec.vocab
    start = int(rng.integers(spec.n_words))
    if rng.random() < 0.5:
        tokens = [v.BOS] + [v.word(start + j) for j in range(spec.text_len)] + [v.EOS]
    else:
        tokens = [v.BOS, v.word(start), v.SEP, v.key(start % spec.n_keys), v.EOS]
    loss_on = [t < len(tokens) - 1 for t in range(len(tokens))]
    return Sequence(TEXT, tokens, [False] * len(tokens), loss_on)


@dataclass
class ComposeSample:
    """Instruction, then a body of ``("text", tokens)`` and ``("slot", key)`` items."""

    instruction: list[int]
    body: list[tuple[str, object]]
    n_patches: int
    token_ids: np.ndarray
    mask: ModalityMask
    targets: np.ndarray
    loss_mask: np.ndarray
    images: list[np.ndarray]
    keys: list[int]

    def slot_positions(self) -> list[tuple[int, int]]:
        """``(start, length)`` of each image slot in the flattened sequence."""
        out, pos = [], len(self.instruction)
        for item, val in self.body:
            if item == "slot":
                out.append((pos, self.n_patches))
                pos += self.n_patches
            else:
                pos += len(val)
        return out

    def reconstruct_mask(self) -> ModalityMask:
        flags = np.zeros(len(self.token_ids), dtype=bool)
        for start, length in self.slot_positions():
            flags[start:start + length] = True
        return ModalityMask(flags)

    def to_sequence(self) -> Sequence:
        loss_on = list(self.loss_mask)
        return Sequence(COMPOSE, list(self.token_ids), list(self.mask.visual), loss_on,
                        list(self.images), list(self.keys))


def gen_compose(spec: TaskSpec, seed) -> ComposeSample:
    """Interleaved composition sample with ``spec.n_slots`` image slots.

    Body per slot: ``[image block] SEP key word``; scored positions are the
    body text only (instruction and VISUAL positions are never scored).
    """
    if spec.n_slots < 1:
        raise ContractError("composition template needs at least one image slot")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    v, n = spec.vocab, spec.n_patches
    patterns = spec.patterns()
    topic = int(rng.integers(spec.n_words))
    instruction = [v.BOS, v.WRITE, v.word(topic)]
    body: list[tuple[str, object]] = []
    images, keys = [], []
    for j in range(spec.n_slots):
        k = int(rng.choice(spec.n_keys, p=spec.key_distribution()))
        images.append(make_image(k, patterns, rng, spec.image_noise).pixels)
        keys.append(k)
        body.append(("slot", k))
        body.append(("text", [v.SEP, v.key(k), v.word(topic + j + 1)]))
    body.append(("text", [v.EOS]))

    tokens = list(instruction)
    visual = [False] * len(instruction)
    for item, val in body:
        if item == "slot":
            tokens += [v.IMG] * n
            visual += [True] * n
        else:
            tokens += list(val)
            visual += [False] * len(val)
    T = len(tokens)
    targets = tokens[1:] + [v.PAD]
    loss = [(not visual[t]) and t >= len(instruction) and t + 1 < T and not visual[t + 1]
            for t in range(T)]
    return ComposeSample(instruction, body, n, np.array(tokens), ModalityMask(visual),
                         np.array(targets), np.array(loss), images, keys)


def gen_sequence(spec: TaskSpec, rng: np.random.Generator, patterns=None) -> Sequence:
    if spec.kind == TEXT:
        return _text_sequence(spec, rng)
    if spec.kind == COMPOSE:
        return gen_compose(spec, rng).to_sequence()
    return _keyed_sequence(spec, rng, spec.patterns() if patterns is None else patterns)


def collate(seqs: list[Sequence], image_side: int = 8) -> InterleavedBatch:
    """Right-pad to a common length; padding is TEXT and never scored."""
    T = max(len(s.tokens) for s in seqs)
    B = len(seqs)
    ids = np.full((B, T), Vocab.PAD, dtype=np.int64)
    vis = np.zeros((B, T), dtype=bool)
    tgt = np.full((B, T), Vocab.PAD, dtype=np.int64)
    lm = np.zeros((B, T), dtype=bool)
    images, keys = [], []
    for i, s in enumerate(seqs):
        L = len(s.tokens)
        ids[i, :L] = s.tokens
        vis[i, :L] = s.visual
        tgt[i, :L - 1] = s.tokens[1:]
        lm[i, :L] = s.loss_on
        images += s.images
        keys += s.keys
    imgs = np.stack(images) if images else np.zeros((0, image_side, image_side))
    batch = InterleavedBatch(ids, ModalityMask(vis), tgt, lm, imgs, np.array(keys, dtype=np.int64),
                             kinds=[s.kind for s in seqs])
    batch.check()
    return batch


def gen_batch(spec: TaskSpec, batch_size: int, seed, encoder=None) -> InterleavedBatch:
    """``batch_size`` sequences of one task; deterministic in ``(spec, seed)``.

    With an ``encoder`` the visual embeddings are attached (and recorded on
    any active gradient tape).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    patterns = spec.patterns()
    seqs = [gen_sequence(spec, rng, patterns) for _ in range(batch_size)]
    batch = collate(seqs, spec.image_side)
    if encoder is not None:
        batch = attach_visual(batch, encoder)
    return batch


def attach_visual(batch: InterleavedBatch, encoder) -> InterleavedBatch:
    if batch.n_visual == 0:
        return batch
    return batch.with_visual(encoder.encode_flat(batch.images))


def entropy_floor(spec: TaskSpec, visual_access: bool) -> float:
    """Exact minimum mean cross-entropy over scored answer positions.

    Enumerates every (key, answer) pair; the context at answer position ``j``
    is the previous answer tokens plus, with ``visual_access``, the key.
    """
    if spec.answer_table is None:
        raise NotEnumerableError(f"{spec.kind} template is not enumerable")
    lengths = {len(a) for dist in spec.answer_table.values() for _, a in dist}
    if len(lengths) != 1:
        raise NotEnumerableError("answers must share one length for a per-position floor")
    (L,) = lengths
    joint = [(pk * pa, k, a) for k, pk in enumerate(spec.key_distribution())
             for pa, a in spec.answer_table[k] if pk * pa > 0]
    total_h = 0.0
    for j in range(L):
        groups: dict[tuple, dict[int, float]] = defaultdict(lambda: defaultdict(float))
        for p, k, a in joint:
            ctx = (k if visual_access else None, a[:j])
            groups[ctx][a[j]] += p
        for dist in groups.values():
            mass = sum(dist.values())
            total_h -= sum(q * math.log(q / mass) for q in dist.values() if q > 0)
    return total_h / L


def dump_records(batch_seed: int, spec: TaskSpec, batch: InterleavedBatch, fh) -> None:
    """Write one JSON line per sequence: seed, kind, key, token ids, V/T mask string."""
    img = 0
    for i in range(batch.shape[0]):
        vis = batch.mask.visual[i]
        n_img = _count_blocks(vis)
        keys = batch.image_keys[img:img + n_img].tolist()
        img += n_img
        rec = {"seed": batch_seed, "kind": batch.kinds[i] if batch.kinds else spec.kind,
               "key": keys[0] if len(keys) == 1 else keys,
               "tokens": batch.token_ids[i].tolist(),
               "mask": ModalityMask(vis).to_string()}
        fh.write(json.dumps(rec) + "\n")


def _count_blocks(flags: np.ndarray) -> int:
    f = np.concatenate([[False], np.asarray(flags, dtype=bool)])
    return int(np.sum(f[1:] & ~f[:-1]))
