"""Attention-based encoder-decoder over the autodiff core.

Architecture: stacked bi-directional GRU encoder (forward/backward outputs
summed, then layer-normalized), additive content-based attention, and a
uni-directional GRU decoder whose input at step l is the sum of the previous
token embedding and the previous context vector; the output posterior is
softmax over W_out(q_l + z_l) + b_out.

All internals are batched: a batch is B utterances with identical frame
count N (the trainer buckets to guarantee this). Sequence tensors are kept
2-D by flattening to (N*B, d) in step-major order. The single-utterance
entry points below are the B=1 case.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_tensors, save_tensors

DEFAULT_INIT_SCALE = 0.08


@dataclass
class AedConfig:
    vocab_size: int
    d_in: int
    d_model: int = 64  # shared by embedding, encoder, decoder and context
    d_att: int = 64
    enc_layers: int = 2
    dec_layers: int = 1
    sos_id: int = 0
    eos_id: int = 1
    dropout: float = 0.0
    init_scale: float = DEFAULT_INIT_SCALE

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ValueError("vocab_size must hold at least <sos> and <eos>")
        if min(self.d_in, self.d_model, self.d_att, self.enc_layers, self.dec_layers) < 1:
            raise ValueError("model dimensions must be positive")
        if not (0 <= self.sos_id < self.vocab_size and 0 <= self.eos_id < self.vocab_size):
            raise ValueError("special token ids outside vocabulary")


@dataclass
class EncoderOutput:
    """Encoded features for one batch: (n_frames*batch, d) in step-major order,
    plus the precomputed attention keys."""

    h_flat: Tensor
    keys: Tensor
    n_frames: int
    batch: int

    def frame_matrix(self, b: int = 0) -> np.ndarray:
        """The (N, d) feature sequence of utterance `b`."""
        d = self.h_flat.data.shape[1]
        return self.h_flat.data.reshape(self.n_frames, self.batch, d)[:, b, :]


@dataclass
class DecoderState:
    hidden: list[Tensor]
    context: Tensor
    step: int = 0


@dataclass
class PosteriorSeq:
    """Per-decoder-step output distributions, step-major: row l*batch + b.

    `logits` stays wired into the producing graph; losses consume it through
    log-softmax. `probs()` is the detached softmax view.
    """

    logits: Tensor
    steps: int
    batch: int = 1

    def probs(self) -> np.ndarray:
        x = self.logits.data
        m = x.max(axis=1, keepdims=True)
        e = np.exp(x - m)
        return e / e.sum(axis=1, keepdims=True)


@dataclass
class GreedyResult:
    tokens: list[int]  # decoded tokens, <eos>-terminated unless hit_max_len
    posteriors: np.ndarray  # (len(tokens), vocab) distributions seen at each step
    hit_max_len: bool


class AedModel:
    def __init__(self, config: AedConfig, seed: int = 0, zero_init: bool = False):
        config.validate()
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed), zero_init)

    # -- parameters ---------------------------------------------------------

    def _add_param(self, name: str, shape: tuple[int, ...], rng, zero: bool, const: float | None = None):
        if const is not None:
            data = np.full(shape, const)
        elif zero:
            data = np.zeros(shape)
        else:
            s = self.config.init_scale
            data = rng.uniform(-s, s, size=shape)
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _init_params(self, rng, zero: bool) -> None:
        c = self.config
        d = c.d_model
        self._add_param("embed", (c.vocab_size, d), rng, zero)
        for i in range(c.enc_layers):
            d_in = c.d_in if i == 0 else d
            for tag in ("f", "b"):
                self._add_param(f"enc{i}{tag}.w_ih", (d_in, 3 * d), rng, zero)
                self._add_param(f"enc{i}{tag}.w_hh", (d, 3 * d), rng, zero)
                self._add_param(f"enc{i}{tag}.bias", (3 * d,), rng, zero)
            self._add_param(f"enc{i}.ln_g", (d,), rng, zero, const=None if zero else 1.0)
            self._add_param(f"enc{i}.ln_b", (d,), rng, zero, const=None if zero else 0.0)
        self._add_param("att.wq", (d, c.d_att), rng, zero)
        self._add_param("att.wk", (d, c.d_att), rng, zero)
        self._add_param("att.v", (c.d_att, 1), rng, zero)
        for j in range(c.dec_layers):
            self._add_param(f"dec{j}.w_ih", (d, 3 * d), rng, zero)
            self._add_param(f"dec{j}.w_hh", (d, 3 * d), rng, zero)
            self._add_param(f"dec{j}.bias", (3 * d,), rng, zero)
        self._add_param("out.w", (d, c.vocab_size), rng, zero)
        self._add_param("out.b", (c.vocab_size,), rng, zero)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise ValueError(f"parameter name mismatch: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].data.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].data.shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def clone(self) -> "AedModel":
        other = AedModel(copy.deepcopy(self.config), zero_init=True)
        other.load_state(self.state_dict())
        return other

    # -- GRU cell -------------------------------------------------------------

    def _gru_step(self, prefix: str, x: Tensor, h: Tensor) -> Tensor:
        return ad.gru_cell(x, h, self.params[f"{prefix}.w_ih"], self.params[f"{prefix}.w_hh"], self.params[f"{prefix}.bias"])

    # -- encoder ------------------------------------------------------------

    def encode_batch(self, frames: np.ndarray, dropout_p: float = 0.0, rng=None) -> EncoderOutput:
        """frames: (B, N, d_in) -> step-major (N*B, d_model) features + keys."""
        if frames.ndim != 3:
            raise ad.ShapeError(f"encode_batch expects (B, N, d_in), got {frames.shape}")
        b, n, d_in = frames.shape
        if n < 1:
            raise ad.ShapeError("cannot encode an empty frame sequence")
        if d_in != self.config.d_in:
            raise ad.ShapeError(f"frame dim {d_in} != configured d_in {self.config.d_in}")
        d = self.config.d_model
        xs: list[Tensor] = [Tensor(frames[:, t, :]) for t in range(n)]
        for i in range(self.config.enc_layers):
            h = Tensor(np.zeros((b, d)))
            fwd = []
            for t in range(n):
                h = self._gru_step(f"enc{i}f", xs[t], h)
                fwd.append(h)
            h = Tensor(np.zeros((b, d)))
            bwd: list[Tensor | None] = [None] * n
            for t in range(n - 1, -1, -1):
                h = self._gru_step(f"enc{i}b", xs[t], h)
                bwd[t] = h
            gain, bias = self.params[f"enc{i}.ln_g"], self.params[f"enc{i}.ln_b"]
            xs = [ad.layer_norm(fwd[t] + bwd[t], gain, bias) for t in range(n)]
            if dropout_p > 0.0:
                xs = [ad.dropout_mask(x, dropout_p, rng) for x in xs]
        h_flat = xs[0] if n == 1 else ad.concat(xs, axis=0)
        keys = ad.matmul(h_flat, self.params["att.wk"])
        return EncoderOutput(h_flat=h_flat, keys=keys, n_frames=n, batch=b)

    def encode(self, frames: np.ndarray, dropout_p: float = 0.0, rng=None) -> EncoderOutput:
        """Single utterance (N, d_in)."""
        if frames.ndim != 2:
            raise ad.ShapeError(f"encode expects (N, d_in), got {frames.shape}")
        return self.encode_batch(frames[None, :, :], dropout_p=dropout_p, rng=rng)

    # -- attention ------------------------------------------------------------

    def attend(self, query: Tensor, enc: EncoderOutput) -> tuple[Tensor, Tensor]:
        """Additive attention: returns (alpha (N, B), context (B, d))."""
        n, b = enc.n_frames, enc.batch
        q_rep = ad.tile_rows(ad.matmul(query, self.params["att.wq"]), n)
        scores = ad.matmul(ad.tanh(enc.keys + q_rep), self.params["att.v"])
        alpha = ad.softmax(ad.reshape(scores, (n, b)), axis=0)
        weighted = ad.mul(enc.h_flat, ad.reshape(alpha, (n * b, 1)))
        context = ad.block_sum_rows(weighted, n)
        return alpha, context

    # -- decoder ------------------------------------------------------------

    def initial_state(self, batch: int) -> DecoderState:
        d = self.config.d_model
        zeros = lambda: Tensor(np.zeros((batch, d)))
        return DecoderState(hidden=[zeros() for _ in range(self.config.dec_layers)], context=zeros(), step=0)

    def decode_step_batch(
        self,
        state: DecoderState,
        prev_tokens: np.ndarray,
        enc: EncoderOutput,
        dropout_p: float = 0.0,
        rng=None,
    ) -> tuple[DecoderState, Tensor]:
        """One decoder step for the whole batch; returns (new state, logits (B, |U|))."""
        prev_tokens = np.asarray(prev_tokens, dtype=np.int64)
        if prev_tokens.size and prev_tokens.max() >= self.config.vocab_size:
            raise ad.ShapeError(f"token id {prev_tokens.max()} out of vocabulary")
        emb = ad.embedding_lookup(self.params["embed"], prev_tokens)
        x = emb + state.context
        hidden = []
        for j in range(self.config.dec_layers):
            x = self._gru_step(f"dec{j}", x, state.hidden[j])
            hidden.append(x)
        q = hidden[-1]
        if dropout_p > 0.0:
            q = ad.dropout_mask(q, dropout_p, rng)
        _, context = self.attend(q, enc)
        logits = ad.matmul(q + context, self.params["out.w"]) + self.params["out.b"]
        return DecoderState(hidden=hidden, context=context, step=state.step + 1), logits

    def decode_step(self, state: DecoderState, prev_token: int, enc: EncoderOutput) -> tuple[DecoderState, np.ndarray]:
        """Single-utterance step; returns (new state, posterior over the vocabulary)."""
        state, logits = self.decode_step_batch(state, np.array([prev_token]), enc)
        return state, _stable_softmax(logits.data)[0]

    # -- teacher-forced forward -------------------------------------------------

    def forward_teacher_forced_batch(
        self,
        frames: np.ndarray,
        cond_tokens: np.ndarray,
        dropout_p: float = 0.0,
        rng=None,
    ) -> PosteriorSeq:
        """cond_tokens: (L, B) with row 0 all <sos>; returns L*B posterior rows."""
        cond_tokens = np.asarray(cond_tokens, dtype=np.int64)
        if cond_tokens.ndim != 2 or cond_tokens.shape[0] < 1:
            raise ad.ShapeError("conditioning sequence must be a nonempty (L, B) array")
        if not np.all(cond_tokens[0] == self.config.sos_id):
            raise ValueError("conditioning sequences must begin with <sos>")
        enc = self.encode_batch(frames, dropout_p=dropout_p, rng=rng)
        steps, b = cond_tokens.shape
        state = self.initial_state(b)
        rows = []
        for l in range(steps):
            state, logits = self.decode_step_batch(state, cond_tokens[l], enc, dropout_p=dropout_p, rng=rng)
            rows.append(logits)
        flat = rows[0] if steps == 1 else ad.concat(rows, axis=0)
        return PosteriorSeq(logits=flat, steps=steps, batch=b)

    def forward_teacher_forced(self, frames: np.ndarray, cond_tokens: list[int] | np.ndarray) -> PosteriorSeq:
        cond = np.asarray(cond_tokens, dtype=np.int64)
        if cond.ndim != 1 or cond.size < 1:
            raise ad.ShapeError("conditioning sequence must be a nonempty 1-D token list")
        return self.forward_teacher_forced_batch(frames[None, :, :], cond[:, None])

    # -- greedy decoding ----------------------------------------------------------

    def greedy_decode_batch(self, frames: np.ndarray, max_len: int) -> list[GreedyResult]:
        """Argmax decoding until <eos> or max_len, for a (B, N, d_in) batch.

        Deterministic: runs grad-free and dropout-free; argmax ties resolve to
        the smallest token id.
        """
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        b = frames.shape[0]
        with ad.no_grad():
            enc = self.encode_batch(frames)
            state = self.initial_state(b)
            prev = np.full(b, self.config.sos_id, dtype=np.int64)
            finished = np.zeros(b, dtype=bool)
            steps_probs: list[np.ndarray] = []
            steps_tokens: list[np.ndarray] = []
            for _ in range(max_len):
                state, logits = self.decode_step_batch(state, prev, enc)
                probs = _stable_softmax(logits.data)
                toks = probs.argmax(axis=1)
                steps_probs.append(probs)
                steps_tokens.append(toks)
                finished |= toks == self.config.eos_id
                if finished.all():
                    break
                prev = toks
        results = []
        tok_mat = np.stack(steps_tokens, axis=0)  # (steps, B)
        for i in range(b):
            col = tok_mat[:, i]
            eos_hits = np.nonzero(col == self.config.eos_id)[0]
            end = int(eos_hits[0]) + 1 if eos_hits.size else len(col)
            results.append(
                GreedyResult(
                    tokens=[int(t) for t in col[:end]],
                    posteriors=np.stack([steps_probs[l][i] for l in range(end)], axis=0),
                    hit_max_len=not eos_hits.size,
                )
            )
        return results

    def greedy_decode(self, frames: np.ndarray, max_len: int) -> GreedyResult:
        return self.greedy_decode_batch(frames[None, :, :], max_len)[0]


def _stable_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


# -- model checkpoint (tensor file + JSON sidecar) ------------------------------


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def save_model(model: AedModel, path: str | Path, vocab_meta: dict | None = None) -> None:
    path = Path(path)
    save_tensors(path, model.state_dict())
    meta = {"format_version": 1, "config": asdict(model.config), "vocab": vocab_meta}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(path: str | Path) -> tuple[AedModel, dict | None]:
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    model = AedModel(AedConfig(**meta["config"]), zero_init=True)
    model.load_state(load_tensors(path))
    return model, meta.get("vocab")
