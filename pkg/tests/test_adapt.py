import shutil

import numpy as np
import pytest

from deskpitch.adapt import AdaptationBundle, adapt_speaker, prepare_reference, sweep_freeze_setups
from deskpitch.corpus import load_oracle, token_energy, token_name
from deskpitch.evaluation import (evaluate_anonymous, evaluate_ground_truth, evaluate_tts,
                                  config_label)
from deskpitch.model import SpeakerTable
from deskpitch.formats import FormatError, read_manifest, read_mel, read_speakers, read_sup
from deskpitch.trainer import (FREEZE_SETUPS, Block, TrainConfig, load_checkpoint, load_examples,
                               save_checkpoint, train)

from conftest import corpus_model

FEW = TrainConfig(learning_rate=1e-3, batch_size=1, steps=2)


@pytest.fixture(scope="module")
def oracle(small_corpus):
    return load_oracle(small_corpus.root)


@pytest.fixture(scope="module")
def base(small_corpus):
    ckpt, _ = train(corpus_model(small_corpus.root), load_examples(small_corpus.root),
                    TrainConfig(learning_rate=3e-3, steps=80, batch_size=2))
    return ckpt


@pytest.fixture(scope="module")
def bundle(small_corpus, oracle, tmp_path_factory):
    out = tmp_path_factory.mktemp("bundles")
    return prepare_reference(small_corpus.root / "heldout" / "new00", "new00", oracle, out)


# --- preparation -------------------------------------------------------------------

def test_bundle_layout(bundle):
    assert len(bundle.train) == 2 and len(bundle.val) == 1
    assert bundle.val[0].relpath == "new00_u002.mel"
    assert [e.relpath for e in read_manifest(bundle.train_manifest)] == ["new00_u000.mel",
                                                                        "new00_u001.mel"]
    assert all(e.speaker == "new00" for e in bundle.train + bundle.val)


def test_bundle_embedding_is_toy_embedding_of_all_features(bundle, small_corpus, oracle):
    files = sorted((small_corpus.root / "heldout" / "new00").glob("*.mel"))
    expected = oracle.embedder(np.concatenate([read_mel(f).frames for f in files]))
    ids, emb = read_speakers(bundle.root / "embedding.spk")
    assert ids == ["new00"]
    assert emb[0].tobytes() == expected.tobytes() == bundle.embedding.tobytes()
    assert bundle.total_frames == sum(read_mel(f).n_frames for f in files)


def test_bundle_supervision_is_consistent(bundle, oracle):
    for e in bundle.train + bundle.val:
        frames = read_mel(bundle.root / e.relpath).frames
        sup = read_sup((bundle.root / e.relpath).with_suffix(".sup"))
        assert int(sup.durations.sum()) == frames.shape[0]
        assert len(sup.durations) == len(e.tokens)
        assert e.tokens == oracle.asr(frames)
        assert np.all(np.abs(token_energy(frames, sup.durations) - sup.energy) <= 1e-9)


def test_bundle_reload(bundle):
    again = AdaptationBundle.load(bundle.root)
    assert again.speaker_id == "new00"
    assert again.train == bundle.train and again.val == bundle.val
    assert again.embedding.tobytes() == bundle.embedding.tobytes()
    assert len(again.examples("all")) == 3


def test_single_file_bundle_has_no_validation(small_corpus, oracle, tmp_path):
    src = tmp_path / "one"
    src.mkdir()
    shutil.copy(small_corpus.root / "heldout" / "new00" / "new00_u000.mel", src)
    b = prepare_reference(src, "solo", oracle, tmp_path / "out")
    assert len(b.train) == 1 and b.val == []


def test_missing_and_corrupt_references(oracle, tmp_path):
    with pytest.raises(FileNotFoundError):
        prepare_reference(tmp_path, "x", oracle)
    (tmp_path / "bad.mel").write_bytes(b"MEL1\x01")
    with pytest.raises(FormatError):
        prepare_reference(tmp_path, "x", oracle)


# --- adaptation -----------------------------------------------------------------------

def test_adaptation_appends_speaker_and_keeps_rows(base, bundle, oracle):
    res = adapt_speaker(base, bundle, {Block.DURATION}, FEW, oracle)
    n = len(base.speakers)
    assert res.speaker_row == n
    assert res.checkpoint.speakers.ids == base.speakers.ids + ["new00"]
    table = res.checkpoint.speakers.embeddings
    assert table[:n].tobytes() == base.speakers.embeddings.tobytes()
    assert table[n].tobytes() == bundle.embedding.tobytes()
    assert len(res.report.rows) == 1 and res.report.rows[0].config == "freeze=duration"
    assert "new00" not in base.speakers


def test_adaptation_respects_freeze(base, bundle):
    res = adapt_speaker(base, bundle, FREEZE_SETUPS["enc+dec"], FEW)
    for name, before in base.params.items():
        changed = not np.array_equal(res.checkpoint.params[name], before)
        frozen = name.startswith(("encoder.", "decoder."))
        assert changed != frozen, name


def test_adaptation_duplicate_speaker(base, bundle):
    res = adapt_speaker(base, bundle, set(), FEW)
    with pytest.raises(ValueError):
        adapt_speaker(res.checkpoint, bundle, set(), FEW)


def test_base_checkpoint_file_untouched(tmp_path, base, bundle):
    save_checkpoint(base, tmp_path / "base.cpk")
    raw = (tmp_path / "base.cpk").read_bytes()
    res = adapt_speaker(load_checkpoint(tmp_path / "base.cpk"), bundle, {Block.ENCODER}, FEW,
                        out_path=tmp_path / "adapted.cpk")
    assert (tmp_path / "base.cpk").read_bytes() == raw
    assert load_checkpoint(res.checkpoint_path).speakers.ids[-1] == "new00"


def test_sweep_covers_every_setup_from_one_base(base, bundle, oracle):
    digest = base.digest()
    res = sweep_freeze_setups(base, bundle, oracle, FEW)
    assert [r.config for r in res.report.rows] == [f"freeze={k}" for k in FREEZE_SETUPS]
    assert res.base_digest == digest == base.digest()
    assert len(set(res.digests.values())) == 7


# --- evaluation helpers -------------------------------------------------------------------

def test_ground_truth_scores(small_corpus, oracle):
    entries = read_manifest(small_corpus.root / "train.txt")
    frames = [read_mel(small_corpus.root / e.relpath).frames for e in entries]
    row = evaluate_ground_truth(frames, entries, oracle)
    assert row.wer == 0.0 and row.cos_sim == pytest.approx(1.0)
    table = corpus_model(small_corpus.root).speakers
    matched = evaluate_ground_truth(frames, entries, oracle, table).cos_sim
    rotated = SpeakerTable(table.ids, np.roll(table.embeddings, 1, axis=0))
    assert matched > evaluate_ground_truth(frames, entries, oracle, rotated).cos_sim


def test_evaluate_tts_label_and_range(small_corpus, base, oracle):
    model = base.to_model()
    row = evaluate_tts(model, read_manifest(small_corpus.root / "val.txt"), oracle)
    assert row.config == config_label(model) == "Predictors based"
    assert -1.0 <= row.cos_sim <= 1.0 and row.wer >= 0.0


def test_empty_synthesis_scores_as_empty_hypothesis(small_corpus, base, oracle):
    model = base.to_model()
    model.params["duration.out.w"].data[:] = 0.0
    model.params["duration.out.b"].data[:] = -5.0
    row = evaluate_tts(model, read_manifest(small_corpus.root / "val.txt"), oracle)
    assert row.wer == 1.0 and row.wip == 0.0 and row.cos_sim == 0.0


def test_evaluate_anonymous(base, oracle):
    res = evaluate_anonymous(base.to_model(), [[token_name(1), token_name(2), token_name(3)]],
                             oracle)
    assert sorted(res.per_speaker) == base.speakers.ids
    assert res.max_similarity >= res.mean_similarity
