"""Synthetic parallel-domain corpus: clean and corrupted feature sequences.

Each utterance is a short sequence of "words" (single vocabulary tokens).
Clean frames are rendered by repeating a fixed per-token prototype vector
for a few frames with additive jitter; the corrupted side is the clean side
passed through a causal FIR filter along the frame axis plus white noise.
The two sides are frame-by-frame synchronized by construction, which is the
property every transfer method here relies on.

Generation is deterministic per seed: utterance i draws from its own
generator spawned from the corpus seed, so the corpus is reproducible
byte-for-byte and generation could be parallelized per utterance.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

SOS, EOS, SPACE, UNK = "<sos>", "<eos>", "<space>", "<unk>"
SPECIALS = (SOS, EOS, SPACE, UNK)
_CONTENT_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789"


@dataclass
class Vocab:
    tokens: list[str]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocabulary contains duplicate tokens")
        for s in SPECIALS:
            if s not in self.tokens:
                raise ConfigError(f"vocabulary is missing special token {s}")
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, n_content: int) -> "Vocab":
        if not 1 <= n_content <= len(_CONTENT_ALPHABET):
            raise ConfigError(f"n_content must be in [1, {len(_CONTENT_ALPHABET)}]")
        return cls(tokens=list(SPECIALS) + list(_CONTENT_ALPHABET[:n_content]))

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._ids.get(token, self._ids[UNK])

    @property
    def sos_id(self) -> int:
        return self._ids[SOS]

    @property
    def eos_id(self) -> int:
        return self._ids[EOS]

    @property
    def space_id(self) -> int:
        return self._ids[SPACE]

    @property
    def unk_id(self) -> int:
        return self._ids[UNK]

    @property
    def content_ids(self) -> list[int]:
        return [i for i, t in enumerate(self.tokens) if t not in SPECIALS]

    def strip_specials(self, ids) -> list[int]:
        """Drop <sos>/<eos>/<space>/<unk>-class bookkeeping, keep content tokens."""
        drop = {self.sos_id, self.eos_id, self.space_id}
        return [int(i) for i in ids if int(i) not in drop]


def tokenize(words: list[str], vocab: Vocab) -> list[int]:
    """Words to ids with <space> between adjacent words and <sos>/<eos> framing."""
    out = [vocab.sos_id]
    for i, w in enumerate(words):
        if i > 0:
            out.append(vocab.space_id)
        out.append(vocab.id(w))
    out.append(vocab.eos_id)
    return out


def detokenize(ids: list[int], vocab: Vocab) -> list[str]:
    """Inverse of tokenize for well-formed sequences: the word list."""
    drop = {vocab.sos_id, vocab.eos_id, vocab.space_id}
    return [vocab.tokens[int(i)] for i in ids if int(i) not in drop]


@dataclass
class CorpusSpec:
    n_content_tokens: int = 28
    n_utterances: int = 4400
    token_len_range: tuple[int, int] = (3, 8)
    frames_per_token_range: tuple[int, int] = (2, 4)
    d_in_raw: int = 8
    stack: int = 3  # frame-stack factor; stride equals the factor
    noise_sigma: float = 1.0
    channel_taps: tuple[float, ...] = (0.7, 0.18, 0.07, 0.03, 0.02)
    gain: float = 1.0
    jitter_sigma: float = 0.45
    proto_scale: float = 1.0
    proto_pair_similarity: float = 0.85  # cosine-level correlation between paired content tokens
    seed: int = 0
    split_fractions: tuple[float, float, float, float] = (2000 / 4400, 2000 / 4400, 200 / 4400, 200 / 4400)

    def validate(self) -> None:
        lo, hi = self.token_len_range
        flo, fhi = self.frames_per_token_range
        if not (1 <= lo <= hi) or not (1 <= flo <= fhi):
            raise ConfigError("token-length and frames-per-token ranges must be nonempty and positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be nonnegative")
        if self.n_utterances < 1 or self.d_in_raw < 1 or self.stack < 1:
            raise ConfigError("utterance count, raw frame dim and stack factor must be positive")
        if not 0.0 <= self.proto_pair_similarity < 1.0:
            raise ConfigError("prototype pair similarity must be in [0, 1)")
        if not self.channel_taps:
            raise ConfigError("channel needs at least one tap")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise ConfigError("split fractions must be nonnegative and sum to 1")

    @property
    def d_in(self) -> int:
        return self.d_in_raw * self.stack


@dataclass
class ParallelUtterance:
    utt_id: str
    x_clean: np.ndarray  # (N, d) source-domain frames
    x_corrupt: np.ndarray  # (N, d) target-domain frames, frame-synchronized
    y: list[int]  # ground-truth token ids, <sos> ... <eos>

    def __post_init__(self):
        # frame-synchrony is asserted, never coerced
        if self.x_clean.shape != self.x_corrupt.shape:
            raise ValueError(f"{self.utt_id}: clean/corrupt frame shapes differ")


@dataclass
class Corpus:
    spec: CorpusSpec
    vocab: Vocab
    utterances: list[ParallelUtterance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)


def frame_stack(x: np.ndarray, k: int = 3, stride: int = 3) -> np.ndarray:
    """Stack k consecutive frames, advancing by `stride`; pads by repeating the
    last frame. (N, d) -> (ceil(N/stride), k*d)."""
    if k < 1 or stride < 1:
        raise ConfigError("stack size and stride must be >= 1")
    n, d = x.shape
    out_rows = -(-n // stride)
    idx = np.arange(out_rows)[:, None] * stride + np.arange(k)[None, :]
    idx = np.minimum(idx, n - 1)
    return x[idx].reshape(out_rows, k * d)


def apply_channel(x: np.ndarray, taps, gain: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Causal FIR along the frame axis, output gain, then additive white noise."""
    taps = np.asarray(taps, dtype=np.float64)
    y = np.zeros_like(x)
    for j, t in enumerate(taps):
        if j == 0:
            y += t * x
        else:
            y[j:] += t * x[:-j]
    # Always draw so the rng stream does not depend on sigma.
    return gain * y + sigma * rng.standard_normal(x.shape)


def gen_utterance(spec: CorpusSpec, vocab: Vocab, prototypes: np.ndarray, idx: int, seed_seq) -> ParallelUtterance:
    rng = np.random.default_rng(seed_seq)
    lo, hi = spec.token_len_range
    n_words = int(rng.integers(lo, hi + 1))
    content = vocab.content_ids
    words = [vocab.tokens[content[int(rng.integers(0, len(content)))]] for _ in range(n_words)]
    y = tokenize(words, vocab)

    flo, fhi = spec.frames_per_token_range
    rows = []
    for tok in y[1:-1]:  # content and <space> tokens get frames; <sos>/<eos> do not
        dur = int(rng.integers(flo, fhi + 1))
        proto = prototypes[tok]
        rows.append(np.tile(proto, (dur, 1)) + spec.jitter_sigma * rng.standard_normal((dur, spec.d_in_raw)))
    clean_raw = np.concatenate(rows, axis=0)
    corrupt_raw = apply_channel(clean_raw, spec.channel_taps, spec.gain, spec.noise_sigma, rng)
    return ParallelUtterance(
        utt_id=f"utt{idx:06d}",
        x_clean=frame_stack(clean_raw, spec.stack, spec.stack),
        x_corrupt=frame_stack(corrupt_raw, spec.stack, spec.stack),
        y=y,
    )


def make_prototypes(spec: CorpusSpec, vocab: Vocab, seed_seq) -> np.ndarray:
    """Per-token rendering prototypes. Content tokens come in correlated pairs
    (controlled by proto_pair_similarity): acoustically confusable token pairs
    are what give a trained model realistic, uncertainty-bearing errors."""
    rng = np.random.default_rng(seed_seq)
    protos = rng.normal(0.0, spec.proto_scale, (len(vocab), spec.d_in_raw))
    alpha = spec.proto_pair_similarity
    if alpha > 0.0:
        content = vocab.content_ids
        for a, b in zip(content[0::2], content[1::2]):
            protos[b] = alpha * protos[a] + np.sqrt(1.0 - alpha * alpha) * protos[b]
    return protos


def gen_corpus(spec: CorpusSpec) -> Corpus:
    spec.validate()
    vocab = Vocab.build(spec.n_content_tokens)
    root = np.random.SeedSequence(spec.seed)
    proto_seed, *utt_seeds = root.spawn(spec.n_utterances + 1)
    prototypes = make_prototypes(spec, vocab, proto_seed)
    utts = [gen_utterance(spec, vocab, prototypes, i, utt_seeds[i]) for i in range(spec.n_utterances)]
    return Corpus(spec=spec, vocab=vocab, utterances=utts)


def corruption_distance(corpus: Corpus) -> float:
    """Mean per-frame L2 distance between the two sides, averaged over utterances."""
    per_utt = [float(np.linalg.norm(u.x_corrupt - u.x_clean, axis=1).mean()) for u in corpus.utterances]
    return float(np.mean(per_utt))


SPLIT_NAMES = ("train", "adapt", "dev", "test")


def split_corpus(corpus: Corpus, fractions, seed: int = 0) -> dict[str, Corpus]:
    """Disjoint, seed-deterministic partition into train/adapt/dev/test."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != len(SPLIT_NAMES):
        raise ConfigError(f"expected {len(SPLIT_NAMES)} fractions, got {len(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigError("fractions must be nonnegative and sum to 1")
    n = len(corpus)
    raw = [f * n for f in fractions]
    sizes = [int(np.floor(r)) for r in raw]
    # largest-remainder rounding keeps sizes within one utterance of exact
    rema = sorted(range(len(raw)), key=lambda i: (raw[i] - sizes[i], -i), reverse=True)
    for i in range(n - sum(sizes)):
        sizes[rema[i % len(sizes)]] += 1
    perm = np.random.default_rng(seed).permutation(n)
    out: dict[str, Corpus] = {}
    start = 0
    for name, size in zip(SPLIT_NAMES, sizes):
        chosen = sorted(perm[start : start + size])
        out[name] = Corpus(spec=corpus.spec, vocab=corpus.vocab, utterances=[corpus.utterances[i] for i in chosen])
        start += size
    return out


# -- on-disk corpus -------------------------------------------------------------
#
# <out>/meta.json            generation spec, vocabulary, split sizes
# <out>/<split>/utts.bin     records: id_len u32, id utf8, N u64, d u64, L u64,
#                            clean f64[N*d], corrupt f64[N*d], tokens u32[L]


def save_corpus(splits: dict[str, Corpus], out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    any_split = next(iter(splits.values()))
    meta = {
        "format_version": 1,
        "spec": asdict(any_split.spec),
        "vocab": any_split.vocab.tokens,
        "splits": {name: len(c) for name, c in splits.items()},
        "frame_dim": any_split.spec.d_in,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for name, corpus in splits.items():
        sub = out_dir / name
        sub.mkdir(exist_ok=True)
        with open(sub / "utts.bin", "wb") as fh:
            for u in corpus.utterances:
                idb = u.utt_id.encode("utf-8")
                n, d = u.x_clean.shape
                fh.write(struct.pack("<I", len(idb)))
                fh.write(idb)
                fh.write(struct.pack("<QQQ", n, d, len(u.y)))
                fh.write(np.ascontiguousarray(u.x_clean, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(u.x_corrupt, dtype="<f8").tobytes())
                fh.write(np.asarray(u.y, dtype="<u4").tobytes())


def load_corpus(out_dir: str | Path) -> tuple[CorpusSpec, Vocab, dict[str, Corpus]]:
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "meta.json").read_text())
    spec_d = dict(meta["spec"])
    for key in ("token_len_range", "frames_per_token_range", "channel_taps", "split_fractions"):
        spec_d[key] = tuple(spec_d[key])
    spec = CorpusSpec(**spec_d)
    vocab = Vocab(tokens=list(meta["vocab"]))
    splits: dict[str, Corpus] = {}
    for name in meta["splits"]:
        blob = (out_dir / name / "utts.bin").read_bytes()
        pos = 0
        utts = []
        while pos < len(blob):
            (id_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            utt_id = blob[pos : pos + id_len].decode("utf-8")
            pos += id_len
            n, d, l = struct.unpack_from("<QQQ", blob, pos)
            pos += 24
            x_clean = np.frombuffer(blob, dtype="<f8", count=n * d, offset=pos).reshape(n, d).copy()
            pos += 8 * n * d
            x_corrupt = np.frombuffer(blob, dtype="<f8", count=n * d, offset=pos).reshape(n, d).copy()
            pos += 8 * n * d
            y = np.frombuffer(blob, dtype="<u4", count=l, offset=pos).astype(int).tolist()
            pos += 4 * l
            utts.append(ParallelUtterance(utt_id=utt_id, x_clean=x_clean, x_corrupt=x_corrupt, y=y))
        splits[name] = Corpus(spec=spec, vocab=vocab, utterances=utts)
    return spec, vocab, splits
