import numpy as np
import pytest

from deskpitch.corpus import CorpusSpec, generate_corpus
from deskpitch.formats import TokenSupervision
from deskpitch.model import AcousticModel, ModelConfig, SpeakerTable

D_SPK = 8


def tiny_config(conditioning="predictors", seed=0, **kw):
    base = dict(vocab_size=6, d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1,
                ffn_hidden=16, predictor_hidden=8, n_mels=8, d_spk=D_SPK,
                conditioning=conditioning, seed=seed)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(conditioning="predictors", seed=0, n_speakers=2, **kw):
    rng = np.random.default_rng(seed + 1000)
    table = SpeakerTable([f"s{i}" for i in range(n_speakers)],
                         rng.standard_normal((n_speakers, D_SPK)))
    return AcousticModel(tiny_config(conditioning, seed, **kw), table)


def tiny_utterance(seed=0, n_tokens=4, vocab=6, n_mels=8):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, vocab, n_tokens).tolist()
    durs = rng.integers(1, 4, n_tokens)
    sup = TokenSupervision(durs, rng.standard_normal(n_tokens), rng.standard_normal(n_tokens))
    mel = rng.standard_normal((int(durs.sum()), n_mels))
    return tokens, sup, mel


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A quick corpus: 3 speakers x 6 utterances, d_spk=8."""
    root = tmp_path_factory.mktemp("corpus")
    return generate_corpus(CorpusSpec(utts_per_speaker=6, d_spk=D_SPK, heldout_utts=3), root)


def corpus_model(root, conditioning="predictors", seed=0, **kw):
    """A small model sized for ``small_corpus`` with its speaker table."""
    from deskpitch.formats import read_speakers

    ids, emb = read_speakers(root / "speakers.spk")
    cfg = tiny_config(conditioning, seed, vocab_size=12, **kw)
    return AcousticModel(cfg, SpeakerTable(ids, emb))
