"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[ACCEPT n] PASS|FAIL ...`` line (visible even
under output capture) before asserting. Run with::

    pytest tests/test_acceptance.py -v
"""

import time

import numpy as np
import pytest

from deskpitch.adapt import adapt_speaker, prepare_reference
from deskpitch.corpus import CorpusSpec, generate_corpus, load_oracle, token_id
from deskpitch.evaluation import evaluate_anonymous, evaluate_tts
from deskpitch.formats import TokenSupervision, read_manifest, read_speakers
from deskpitch.gradcheck import check_gradients
from deskpitch.metrics import align, cosine_similarity, score
from deskpitch.model import (AcousticModel, ModelConfig, SpeakerTable, gradcheck_config,
                             round_durations)
from deskpitch.trainer import (FREEZE_SETUPS, TrainConfig, Trainer, block_of, corpus_loss,
                               decode_checkpoint, encode_checkpoint, load_checkpoint,
                               load_examples, save_checkpoint, train)

from alignment_oracle import all_strings, best_counts, reachable_masks
from param_oracle import expected_trainable

pytestmark = pytest.mark.slow

TRAIN_STEPS = 5000
SIM_GAP = 0.2


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[ACCEPT {n}] {'PASS' if ok else 'FAIL'}  {detail}")


# --- shared fixtures -----------------------------------------------------------------

@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance") / "data"
    generate_corpus(CorpusSpec(), root)
    return root


@pytest.fixture(scope="module")
def oracle(corpus):
    return load_oracle(corpus)


@pytest.fixture(scope="module")
def examples(corpus):
    return load_examples(corpus, "train.txt")


def base_model(corpus, conditioning):
    ids, emb = read_speakers(corpus / "speakers.spk")
    spec = load_oracle(corpus).spec
    cfg = ModelConfig(vocab_size=spec.n_phonemes, n_mels=spec.n_mels, d_spk=spec.d_spk,
                      conditioning=conditioning)
    return AcousticModel(cfg, SpeakerTable(ids, emb))


@pytest.fixture(scope="module")
def trained(corpus, examples):
    """Predictors-conditioned model trained on the default corpus."""
    model = base_model(corpus, "predictors")
    t0 = time.perf_counter()
    ckpt, log = train(model, examples, TrainConfig(steps=TRAIN_STEPS))
    return ckpt, log, time.perf_counter() - t0


@pytest.fixture(scope="module")
def bundle(corpus, oracle, tmp_path_factory):
    return prepare_reference(corpus / "heldout" / "new00", "new00", oracle,
                             tmp_path_factory.mktemp("bundles"))


@pytest.fixture(scope="module")
def seen_similarity(trained, corpus, oracle):
    model = trained[0].to_model()
    return evaluate_tts(model, read_manifest(corpus / "train.txt"), oracle)


# --- 1 ----------------------------------------------------------------------------------

def test_gradient_correctness(capsys):
    t0 = time.perf_counter()
    details, ok = [], True
    for point in ("encoder", "predictors", "decoder"):
        cfg = gradcheck_config(point)
        assert (cfg.d_model, cfg.n_enc_layers, cfg.n_dec_layers, cfg.n_mels, cfg.d_spk) == \
            (16, 1, 1, 8, 8)
        rng = np.random.default_rng(7)
        model = AcousticModel(cfg, SpeakerTable(["s"], rng.standard_normal((1, 8))))
        durs = np.array([2, 1, 3, 2])
        sup = TokenSupervision(durs, rng.standard_normal(4), rng.standard_normal(4))
        mel = rng.standard_normal((int(durs.sum()), 8))
        reports = check_gradients(
            lambda: model.forward_train([1, 2, 3, 4], sup, mel, "s").total, model.params)
        n_bad = sum(r.n_bad for r in reports)
        ok &= n_bad == 0 and sum(r.n for r in reports) == model.n_parameters()
        details.append(f"{point}: {model.n_parameters()} params, {n_bad} bad, "
                       f"max abs err {max(r.max_abs_err for r in reports):.1e}")
    seconds = time.perf_counter() - t0
    ok &= seconds < 60
    verdict(capsys, 1, ok, f"gradients vs central differences; {'; '.join(details)}; "
                           f"{seconds:.1f}s (< 60s)")
    assert ok


# --- 2 ----------------------------------------------------------------------------------

def tiny(conditioning, seed):
    cfg = ModelConfig(vocab_size=6, d_model=16, n_heads=2, ffn_hidden=16, predictor_hidden=8,
                      n_mels=8, d_spk=8, conditioning=conditioning, seed=seed)
    rng = np.random.default_rng([seed, 99])
    return AcousticModel(cfg, SpeakerTable(["a"], rng.standard_normal((1, 8))))


def test_conditioning_exclusivity(capsys):
    failures = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        tokens = rng.integers(0, 6, int(rng.integers(1, 9))).tolist()
        e1, e2 = rng.standard_normal(8), rng.standard_normal(8) * 5

        m = tiny("decoder", seed)
        h = m.encode(tokens, e1)
        for head in ("pitch", "duration", "energy"):
            if not np.array_equal(m.predict(head, h, e1).data, m.predict(head, h, e2).data):
                failures.append((seed, "decoder", head))

        m = tiny("predictors", seed)
        if not np.array_equal(m.encode(tokens, e1).data, m.encode(tokens, e2).data):
            failures.append((seed, "predictors", "h"))

        m = tiny("encoder", seed)
        zero = m.infer_trace(tokens, np.zeros(8)) if _has_frames(m, tokens) else None
        off = m.infer_trace(tokens, None) if zero is not None else None
        if zero is not None:
            same = all(np.array_equal(getattr(zero, k), getattr(off, k))
                       for k in ("hidden", "pitch", "duration", "energy", "durations"))
            same &= np.array_equal(zero.mel.frames, off.mel.frames)
        else:
            same = np.array_equal(m.encode(tokens, np.zeros(8)).data, m.encode(tokens).data)
        if not same:
            failures.append((seed, "encoder", "zero"))
    ok = not failures
    verdict(capsys, 2, ok, f"100 seeds x 3 configs, bitwise; failures={failures[:5]}")
    assert ok


def _has_frames(model, tokens):
    return round_durations(model.predict("duration", model.encode(tokens)).data[:, 0]).sum() > 0


# --- 3 ----------------------------------------------------------------------------------

def test_anonymisation_identity(capsys, trained):
    model = trained[0].to_model()
    texts = [[1, 2, 3, 4], [0, 5, 7, 11, 3], [9, 8]]
    ok = True
    for t in texts:
        anon = model.synthesize_anonymous(t).frames.tobytes()
        ok &= anon == model.infer(t, np.zeros(model.config.d_spk)).frames.tobytes()
        ok &= anon == model.infer_trace(t, None).mel.frames.tobytes()
    for point in ("encoder", "decoder"):
        m = tiny(point, 3)
        for t in ([1, 2, 3], [5, 4, 3, 2, 1]):
            if _has_frames(m, t):
                a = m.synthesize_anonymous(t).frames.tobytes()
                ok &= a == m.infer(t, np.zeros(8)).frames.tobytes()
                ok &= a == m.infer_trace(t, None).mel.frames.tobytes()
    verdict(capsys, 3, ok, "anonymous == infer(zero) == injection disabled, bitwise, 3 configs")
    assert ok


# --- 4 ----------------------------------------------------------------------------------

def test_freezing_contract(capsys, trained, corpus, examples, bundle):
    bases = {"predictors": trained[0]}
    bases["encoder"], _ = train(base_model(corpus, "encoder"), examples,
                                TrainConfig(steps=300))
    cfg = TrainConfig(learning_rate=1e-3, batch_size=1, steps=300)
    t0 = time.perf_counter()
    problems, runs = [], 0
    for point, base in bases.items():
        for label, fs in FREEZE_SETUPS.items():
            res = adapt_speaker(base, bundle, fs, cfg)
            runs += 1
            changed = [n for n, v in base.params.items()
                       if not np.array_equal(res.checkpoint.params[n], v)]
            frozen_changed = [n for n in changed if block_of(n) in fs]
            oracle_count = expected_trainable(base.model_config, fs)
            if frozen_changed:
                problems.append((point, label, "frozen changed", frozen_changed[:2]))
            if not changed:
                problems.append((point, label, "nothing changed"))
            if res.log.updated_per_step != oracle_count:
                problems.append((point, label, res.log.updated_per_step, oracle_count))
    seconds = time.perf_counter() - t0
    ok = not problems and runs == 14 and seconds < 300
    verdict(capsys, 4, ok, f"{runs} fine-tunes x 300 steps, frozen bitwise, counts match "
                           f"closed form; {seconds:.1f}s (< 300s); problems={problems[:3]}")
    assert ok


# --- 5 ----------------------------------------------------------------------------------

def test_trainability(capsys, trained, examples, oracle, corpus):
    ckpt, log, seconds = trained
    model = ckpt.to_model()
    loss = corpus_loss(model, examples)["total"]
    errors = n = 0
    for ex in examples:
        c = align(ex.tokens, oracle.recognise(model.infer(ex.tokens, ex.speaker)).tokens)
        errors += c.errors
        n += len(ex.tokens)
    ter = errors / n
    ok = loss < 0.05 and ter <= 0.05 and seconds < 600
    verdict(capsys, 5, ok, f"Predictors, {TRAIN_STEPS} steps: train loss {loss:.4f} (< 0.05), "
                           f"TER {ter:.2%} (<= 5%), {seconds:.0f}s (< 600s)")
    assert ok


# --- 6 ----------------------------------------------------------------------------------

def test_speaker_discrimination(capsys, trained, corpus, oracle, seen_similarity):
    model = trained[0].to_model()
    texts = []
    for e in read_manifest(corpus / "train.txt"):
        if e.tokens not in texts:
            texts.append(e.tokens)
    anon = evaluate_anonymous(model, texts, oracle)
    seen = seen_similarity.cos_sim
    gap = seen - anon.max_similarity
    ok = gap >= SIM_GAP
    per = ", ".join(f"{k} {v:.3f}" for k, v in anon.per_speaker.items())
    verdict(capsys, 6, ok, f"matched {seen:.3f} vs anonymous max {anon.max_similarity:.3f} "
                           f"({per}); gap {gap:.3f} (>= {SIM_GAP})")
    assert ok


# --- 7 ----------------------------------------------------------------------------------

def test_adaptation_end_to_end(capsys, trained, bundle, oracle, seen_similarity):
    t0 = time.perf_counter()
    res = adapt_speaker(trained[0], bundle, FREEZE_SETUPS["duration"],
                        TrainConfig(learning_rate=1e-3, batch_size=1, steps=300), oracle)
    val_ter = res.report.rows[0].wer
    model = res.checkpoint.to_model()
    sims = []
    for e in bundle.train + bundle.val:
        mel = model.infer([token_id(t) for t in e.tokens], "new00")
        sims.append(cosine_similarity(oracle.embedder(mel), bundle.embedding))
    new_sim = float(np.mean(sims))
    seconds = time.perf_counter() - t0
    diff = abs(new_sim - seen_similarity.cos_sim)
    ok = val_ter <= 0.10 and diff <= 0.1 and seconds < 300
    verdict(capsys, 7, ok, f"new00 fs={{Dur}} 300 steps: val TER {val_ter:.2%} (<= 10%), "
                           f"sim {new_sim:.3f} vs seen {seen_similarity.cos_sim:.3f} "
                           f"(|diff| {diff:.3f} <= 0.1), {seconds:.1f}s")
    assert ok


# --- 8 ----------------------------------------------------------------------------------

def test_metric_oracle_equivalence(capsys):
    strings = all_strings("abc", 6)
    mask, lengths = reachable_masks(strings)
    H, S, D, I = best_counts(mask, lengths)
    mismatches, cases, worst = [], 0, 0.0
    for i, r in enumerate(strings):
        if not r:
            continue
        for j, h in enumerate(strings):
            c = align(r, h)
            cases += 1
            if (c.H, c.S, c.D, c.I) != (H[i, j], S[i, j], D[i, j], I[i, j]):
                mismatches.append((r, h))
            if j % 97 == 0:
                rt = score(r, h)
                worst = max(worst, abs(rt.wil + rt.wip - 1.0))
    ok = not mismatches and cases >= 100_000 and worst <= 1e-12
    verdict(capsys, 8, ok, f"{cases} pairs vs exhaustive oracle, {len(mismatches)} mismatches; "
                           f"max |WIL+WIP-1| {worst:.1e}")
    assert ok


# --- 9 ----------------------------------------------------------------------------------

def test_determinism_and_persistence(capsys, corpus, examples, tmp_path):
    cfg = TrainConfig(steps=30, batch_size=4, seed=11)
    a, _ = train(base_model(corpus, "predictors"), examples, cfg)
    b, _ = train(base_model(corpus, "predictors"), examples, cfg)
    same_seed = encode_checkpoint(a) == encode_checkpoint(b)

    save_checkpoint(a, tmp_path / "a.cpk")
    back = load_checkpoint(tmp_path / "a.cpk")
    roundtrip = encode_checkpoint(back) == (tmp_path / "a.cpk").read_bytes()
    roundtrip &= all(back.params[k].tobytes() == v.tobytes() for k, v in a.params.items())

    t = Trainer(base_model(corpus, "predictors"), cfg)
    t.run(examples, steps=13)
    save_checkpoint(t.checkpoint(), tmp_path / "mid.cpk")
    resumed = Trainer.from_checkpoint(load_checkpoint(tmp_path / "mid.cpk"), cfg)
    resumed.run(examples, steps=17)
    resume = encode_checkpoint(resumed.checkpoint()) == encode_checkpoint(a)
    resume &= decode_checkpoint(encode_checkpoint(a)).step == 30

    ok = same_seed and roundtrip and resume
    verdict(capsys, 9, ok, f"same seed bitwise={same_seed}, save/load bitwise={roundtrip}, "
                           f"resume 13+17 == 30 bitwise={resume}")
    assert ok
