"""Shared fixtures: a small corpus and a lightly trained teacher."""

from dataclasses import dataclass

import pytest

from tsadapt.data import Corpus, CorpusSpec, Vocab, gen_corpus, split_corpus
from tsadapt.model import AedConfig, AedModel
from tsadapt.train import TrainConfig, dev_eval_pairs, labeled_pairs, train_ce


@dataclass
class TinyWorld:
    spec: CorpusSpec
    vocab: Vocab
    splits: dict[str, Corpus]
    teacher: AedModel
    drop_ids: set[int]

    def model_config(self, **kw) -> AedConfig:
        base = dict(
            vocab_size=len(self.vocab),
            d_in=self.spec.d_in,
            d_model=32,
            d_att=24,
            sos_id=self.vocab.sos_id,
            eos_id=self.vocab.eos_id,
        )
        base.update(kw)
        return AedConfig(**base)


@pytest.fixture(scope="session")
def tiny_world() -> TinyWorld:
    spec = CorpusSpec(n_utterances=260, seed=11, token_len_range=(2, 5))
    corpus = gen_corpus(spec)
    splits = split_corpus(corpus, (160 / 260, 60 / 260, 20 / 260, 20 / 260), seed=1)
    vocab = corpus.vocab
    drop = {vocab.sos_id, vocab.eos_id, vocab.space_id}
    world = TinyWorld(spec=spec, vocab=vocab, splits=splits, teacher=None, drop_ids=drop)
    teacher = AedModel(world.model_config(), seed=5)
    cfg = TrainConfig(mode="CE", epochs=12, batch_size=16, lr=2e-3, dropout=0.0, seed=5, eval_every=3, early_stop_patience=4)
    train_ce(teacher, labeled_pairs(splits["train"], "clean"), dev_eval_pairs(splits["dev"], "clean"), cfg, drop_ids=drop)
    world.teacher = teacher
    return world
