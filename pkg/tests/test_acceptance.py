"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` (or ``python
tests/test_acceptance.py``). The learning criteria train the tiny preset
several times on synthetic corpora and take a few minutes on one CPU core.
Set ``LANGID_ACCEPTANCE_OUT`` to keep run directories and metrics logs.
"""

import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from acceptance_log import report
from gradcheck import check_grads, numeric_grad, projected, rel_error

from langid.audio import AudioBuffer, SynthCorpusSpec, load_record, speaker_profiles, synth_corpus
from langid.curate import duration_filter, energy_vad, mine_errors
from langid.ensemble import EnsemblePool, ensemble_probs, subset_search
from langid.frontend import (AugmentConfig, FeatureMatrix, apply_masks, compute_logmel, feature_stats,
                             max_time_mask, normalize_features, sample_masks, speed_perturb)
from langid.infer import Predictor
from langid.loss import AAMConfig, aam_loss, compute_class_weights, weighted_ce
from langid.manifest import UtteranceRecord
from langid.metrics import eer, eer_from_scores, micro_acc
from langid.nn import Batch, Model, ParameterSet, count_params, init_params, load_checkpoint, preset
from langid.nn import layers as L
from langid.nn.params import HEAD_PREFIX
from langid.stream import PoolAccumulator, stream_init
from langid.train import AdamState, TrainConfig, adam_step, epochs_to_bar, fit, load_for_finetune

# Learning runs: tiny preset, default recipe optimizer settings, fewer epochs than the
# 100-epoch ceiling (the task is learned within a handful).
EPOCHS = 15
RUN_CFG = TrainConfig(epochs=EPOCHS)
BAR_ACC, BAR_EER = 0.95, 0.05


@pytest.fixture(scope="module")
def out_root(tmp_path_factory):
    root = os.environ.get("LANGID_ACCEPTANCE_OUT")
    if root:
        Path(root).mkdir(parents=True, exist_ok=True)
        return Path(root)
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def corpus(out_root):
    """200 training / 60 validation utterances from independent seeds."""
    train = synth_corpus(SynthCorpusSpec(n_per_class=100, seed=1), out_root / "corpus_train")
    val = synth_corpus(SynthCorpusSpec(n_per_class=30, seed=2), out_root / "corpus_val")
    return train, val


@pytest.fixture(scope="module")
def runs(corpus, out_root, tiny_cfg):
    """Seed -> (FitResult, wall seconds) for from-scratch training."""
    train, val = corpus
    out = {}
    for seed in (0, 1, 2):
        t0 = time.perf_counter()
        res = fit(train, val, tiny_cfg, RUN_CFG.replace(seed=seed), out_dir=out_root / f"scratch_seed{seed}")
        out[seed] = (res, time.perf_counter() - t0)
    return out


def val_trials(res, val):
    return Predictor(res.model_cfg, res.params).score_records(val)[0]


# --- 1. gradient integrity -----------------------------------------------------


def layer_gradient_errors(rng) -> dict[str, float]:
    errs = {}
    mask = L.length_mask([12, 7], 12)

    x, dw, pw = rng.normal(size=(2, 4, 12)) * mask, rng.normal(size=(4, 5)), rng.normal(size=(3, 4))
    R = rng.normal(size=(2, 3, 12))
    _, c = L.dwsep_forward(x, dw, pw)
    dx, ddw, dpw = L.dwsep_backward(R, c, dw, pw)
    errs |= {f"dwsep.{k}": v for k, v in check_grads(projected(lambda: L.dwsep_forward(x, dw, pw)[0], R),
                                                      {"x": x, "dw": dw, "pw": pw},
                                                      {"x": dx, "dw": ddw, "pw": dpw}, rng).items()}

    g, b, rm, rv = rng.normal(size=4), rng.normal(size=4), rng.normal(size=4), rng.uniform(0.5, 2, 4)
    for train in (True, False):
        R = rng.normal(size=x.shape)
        _, c = L.bn_forward(x, g, b, rm, rv, mask, train)
        d = dict(zip(("x", "g", "b"), L.bn_backward(R, c, g)))
        f = projected(lambda: L.bn_forward(x, g, b, rm, rv, mask, train)[0], R)
        errs |= {f"bn[{'train' if train else 'eval'}].{k}": v
                 for k, v in check_grads(f, {"x": x, "g": g, "b": b}, d, rng).items()}

    w1, b1, w2, b2 = rng.normal(size=(2, 4)), rng.normal(size=2), rng.normal(size=(4, 2)), rng.normal(size=4)
    for window in (None, 3):
        R = rng.normal(size=x.shape) * mask
        _, c = L.se_forward(x, mask, w1, b1, w2, b2, window)
        d = dict(zip(("x", "w1", "b1", "w2", "b2"), L.se_backward(R, c, w1, w2)))
        f = projected(lambda: L.se_forward(x, mask, w1, b1, w2, b2, window)[0], R)
        errs |= {f"se[{window or 'global'}].{k}": v for k, v in check_grads(
            f, {"x": x, "w1": w1, "b1": b1, "w2": w2, "b2": b2}, d, rng).items()}

    W, bb, v = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=3)
    R = rng.normal(size=(2, 8))
    _, c = L.attn_pool_forward(x, mask, W, bb, v)
    dh, dW, db, dv = L.attn_pool_backward(R, c, W, v)
    f = projected(lambda: L.attn_pool_forward(x, mask, W, bb, v)[0], R)
    errs |= {f"pool.{k}": val for k, val in check_grads(f, {"h": x, "W": W, "b": bb, "v": v},
                                                          {"h": dh * mask, "W": dW, "b": db, "v": dv},
                                                          rng).items()}

    e, Wl, bl = rng.normal(size=(3, 6)), rng.normal(size=(4, 6)), rng.normal(size=4)
    R = rng.normal(size=(3, 4))
    d = dict(zip(("x", "W", "b"), L.linear_backward(R, e, Wl)))
    errs |= {f"linear.{k}": val for k, val in check_grads(projected(lambda: L.linear_forward(e, Wl, bl), R),
                                                            {"x": e, "W": Wl, "b": bl}, d, rng).items()}
    _, c = L.cosine_forward(e, Wl, 30.0)
    d = dict(zip(("x", "W"), L.cosine_backward(R, c)))
    errs |= {f"cosine.{k}": val for k, val in check_grads(
        projected(lambda: L.cosine_forward(e, Wl, 30.0)[0], R), {"x": e, "W": Wl}, d, rng).items()}

    z, y, wts = rng.normal(size=(5, 2)), np.array([0, 1, 1, 0, 1]), np.array([1.25, 5.0])
    _, gz = weighted_ce(z, y, wts)
    errs["weighted_ce.logits"] = check_grads(lambda: weighted_ce(z, y, wts)[0], {"z": z}, {"z": gz}, rng)["z"]
    emb, V = rng.normal(size=(5, 8)), rng.normal(size=(2, 8))
    _, de, dV = aam_loss(emb, y, V, AAMConfig())
    errs |= {f"aam.{k}": val for k, val in check_grads(lambda: aam_loss(emb, y, V, AAMConfig())[0],
                                                         {"emb": emb, "V": V}, {"emb": de, "V": dV},
                                                         rng).items()}
    return errs


def end_to_end_error(cfg, rng, n_params=20) -> float:
    P = {k: v.astype(np.float64) for k, v in init_params(cfg, seed=7).values.items()}
    batch = Batch.from_features([rng.normal(size=(80, T)) for T in (28, 19, 23)])
    y = np.array([0, 1, 0])
    model = Model(cfg)

    def loss():
        logits, _ = model.forward(P, batch, train=True, rng=np.random.default_rng(3))
        return weighted_ce(logits, y)[0]

    logits, cache = model.forward(P, batch, train=True, rng=np.random.default_rng(3))
    G = model.backward(cache, dlogits=weighted_ce(logits, y)[1])
    names = [n for n in P if not ParameterSet.is_buffer(n)]
    a, n = [], []
    for _ in range(n_params):
        name = names[rng.integers(len(names))]
        i = int(rng.integers(P[name].size))
        a.append(G[name].reshape(-1)[i])
        n.append(numeric_grad(loss, P[name], [i])[0])
    return rel_error(np.array(a), np.array(n))


def test_criterion_1_gradient_integrity(tiny_cfg):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    layer = layer_gradient_errors(rng)
    e2e = {v: end_to_end_error(tiny_cfg.replace(**kw), rng)
           for v, kw in (("global-se", {}), ("window-se", {"se_context": 6}), ("cosine-head", {"head": "cosine"}))}
    elapsed = time.perf_counter() - t0
    worst = max(layer, key=layer.get)
    ok = report(1, "gradient integrity", {
        "every layer and loss rel err < 1e-4": max(layer.values()) < 1e-4,
        "end-to-end tiny rel err < 1e-3": max(e2e.values()) < 1e-3,
        "runtime < 2 min": elapsed < 120,
    }, f"worst layer {worst} {layer[worst]:.2e}; end-to-end {max(e2e.values()):.2e}; {elapsed:.1f} s")
    assert ok


# --- 2. oracle equivalence ------------------------------------------------------


def test_criterion_2_oracle_equivalence():
    from test_ensemble import brute_force_subset, seeded_pool
    from test_layers import naive_dwsep
    from test_metrics import brute_force_eer
    from test_train import adam_oracle

    rng = np.random.default_rng(99)
    conv = 0.0
    for k in (1, 3, 7, 11):
        x, dw, pw = rng.normal(size=(2, 5, 16)), rng.normal(size=(5, k)), rng.normal(size=(4, 5))
        conv = max(conv, float(np.max(np.abs(L.dwsep_forward(x, dw, pw)[0] - naive_dwsep(x, dw, pw)))))

    eer_gap = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        k = int(rng.integers(1, n))
        q = int(rng.choice([10, 1000]))
        pos, neg = np.round(rng.beta(2, 1.3, k) * q) / q, np.round(rng.beta(1.3, 2, n - k) * q) / q
        eer_gap = max(eer_gap, abs(eer_from_scores(pos, neg) - brute_force_eer(list(pos), list(neg))))

    A, c = np.array([2.0, -1.0, 0.5]), np.array([0.3, 0.1, -2.0])

    def grad(p):
        return [2 * a * a * (pi - ci) for a, pi, ci in zip(A, p, c)]

    ref = adam_oracle([1.0, -0.5, 0.25], grad, lr=0.01, wd=1e-5, steps=5)
    params, state, adam_gap = {"w": np.array([1.0, -0.5, 0.25])}, AdamState(), 0.0
    for step in range(5):
        adam_step(params, {"w": np.array(grad(list(params["w"])))}, state, 0.01, 1e-5)
        adam_gap = max(adam_gap, float(np.max(np.abs(params["w"] - np.array(ref[step])))))

    subsets_match = all(subset_search(seeded_pool(5, s)).indices == brute_force_subset(seeded_pool(5, s))
                        for s in range(3))
    ok = report(2, "oracle equivalence", {
        "conv vs naive < 1e-6": conv < 1e-6,
        "EER vs brute force (1000 sets) < 1e-9": eer_gap < 1e-9,
        "Adam vs reference < 1e-10": adam_gap < 1e-10,
        "subset search == brute force": subsets_match,
    }, f"conv {conv:.1e}, eer {eer_gap:.1e}, adam {adam_gap:.1e}")
    assert ok


# --- 3. parameter budget -------------------------------------------------------


def test_criterion_3_parameter_budget():
    proc = subprocess.run([sys.executable, "-m", "langid.cli", "count-params", "--model", "large",
                           "--json-lines"], capture_output=True, text=True, check=False)
    reported = json.loads(proc.stdout)["params"] if proc.returncode == 0 else -1
    exact = {name: count_params(preset(name)) == init_params(preset(name)).n_trainable()
             for name in ("tiny", "large")}
    ok = report(3, "parameter budget", {
        "count-params exits 0": proc.returncode == 0,
        "large preset in [21.0M, 23.5M]": 21.0e6 <= reported <= 23.5e6,
        "analytic == enumeration on all presets": all(exact.values()),
    }, f"large = {reported:,} params")
    assert ok


# --- 4. end-to-end learning ------------------------------------------------------


def test_criterion_4_end_to_end_learning(runs, corpus, tiny_cfg, out_root):
    train, val = corpus
    res, seconds = runs[0]
    trials = val_trials(res, val)
    acc, err = micro_acc(trials), eer(trials)
    t0 = time.perf_counter()
    fit(train, val, tiny_cfg, RUN_CFG.replace(seed=0), out_dir=out_root / "scratch_seed0_repeat")
    repeat_seconds = time.perf_counter() - t0
    same = ((out_root / "scratch_seed0/final.ckpt").read_bytes()
            == (out_root / "scratch_seed0_repeat/final.ckpt").read_bytes())
    ok = report(4, "end-to-end learning", {
        "200 train / 60 val": len(train) == 200 and len(val) == 60,
        "val micro accuracy >= 0.95": acc >= BAR_ACC,
        "val EER <= 0.05": err <= BAR_EER,
        f"within {EPOCHS} <= 100 epochs": len(res.history) == EPOCHS <= 100,
        "<= 10 min": max(seconds, repeat_seconds) <= 600,
        "byte-reproducible final checkpoint": same,
    }, f"acc {acc:.4f}, EER {err:.4f}, bar reached at epoch {epochs_to_bar(res.history)}, "
       f"{seconds:.0f} s per run")
    assert ok


# --- 5. ensembling ------------------------------------------------------------------


def test_criterion_5_ensembling(runs, corpus):
    _, val = corpus
    members = [val_trials(runs[s][0], val) for s in (0, 1, 2)]
    pool = EnsemblePool([f"seed{s}" for s in (0, 1, 2)], members)
    best = subset_search(pool)
    singles = [eer(m) for m in pool.members]
    fused = ensemble_probs([m.probs for m in pool.members])
    votes = np.stack([m.probs.argmax(axis=1) for m in pool.members])
    agree = np.all(votes == votes[0], axis=0)
    ok = report(5, "ensembling", {
        "subset EER <= best singleton": best.eer <= min(singles) + 1e-12,
        "fusion keeps unanimous argmax": bool(np.all(fused.argmax(axis=1)[agree] == votes[0][agree])),
    }, f"subset {'+'.join(best.member_ids)} EER {best.eer:.4f}; singletons "
       f"{', '.join(f'{e:.4f}' for e in singles)}; unanimous on {int(agree.sum())}/{len(agree)}")
    assert ok


# --- 6. fine-tuning transfer ------------------------------------------------------------


def test_criterion_6_finetune_transfer(runs, corpus, tiny_cfg, out_root):
    train, val = corpus
    profiles = speaker_profiles(20, seed=0)
    spk_train = synth_corpus(SynthCorpusSpec(n_per_class=10, seed=3, profiles=profiles), out_root / "spk_train")
    spk_val = synth_corpus(SynthCorpusSpec(n_per_class=3, seed=4, profiles=profiles), out_root / "spk_val")
    spk_cfg = tiny_cfg.replace(labels=tuple(profiles))
    fit(spk_train, spk_val, spk_cfg, RUN_CFG.replace(loss="ce_equal"), out_dir=out_root / "speaker_pretrain")
    ckpt = out_root / "speaker_pretrain/final.ckpt"
    _, pretrained = load_checkpoint(ckpt, spk_cfg)
    init = load_for_finetune(ckpt, tiny_cfg, reinit_head=True, seed=0)
    preserved = all(np.array_equal(init[n], pretrained[n]) for n in init if not n.startswith(HEAD_PREFIX))
    head_fresh = init["decoder.head.weight"].shape == (2, tiny_cfg.embedding_dim)

    log_path = out_root / "finetune_from_speaker/metrics.jsonl"
    res = fit(train, val, tiny_cfg, RUN_CFG, out_dir=out_root / "finetune_from_speaker", init=init)
    trials = val_trials(res, val)
    acc, err = micro_acc(trials), eer(trials)
    scratch_bar = epochs_to_bar(runs[0][0].history)
    tuned_bar = epochs_to_bar(res.history)
    with open(log_path, "a", encoding="utf-8") as f:
        f.write(json.dumps({"comparison": "epochs_to_bar", "bar": {"val_acc": BAR_ACC, "val_eer": BAR_EER},
                            "from_scratch": scratch_bar, "speaker_pretrained": tuned_bar}) + "\n")
    ok = report(6, "fine-tuning transfer", {
        "non-head tensors bit-exact": preserved,
        "head re-initialized for 2 classes": head_fresh,
        "fine-tuned model meets the criterion-4 bar": acc >= BAR_ACC and err <= BAR_EER,
    }, f"epochs to bar: scratch {scratch_bar}, pretrained {tuned_bar} (recorded in {log_path.name})")
    assert ok


# --- 7. streaming equivalence -------------------------------------------------------------


def test_criterion_7_streaming(tiny_cfg, corpus):
    _, val = corpus
    cfg = tiny_cfg.replace(se_context=25)
    params = init_params(cfg, seed=12)
    rng = np.random.default_rng(12)
    for name in params:
        if name.endswith("running_mean"):
            params[name] = rng.normal(0, 0.2, params[name].shape).astype(np.float32)
    x = load_record(val[0]).samples
    F = compute_logmel(AudioBuffer(x, 16000))
    stats = feature_stats(F)
    offline = Model(cfg).forward(params, Batch.from_features([normalize_features(F, stats=stats).values]))[0][0]
    worst = 0.0
    partitions = [[], [160], [len(x) // 2], list(range(1, len(x), 1999))]
    partitions += [sorted(rng.choice(np.arange(1, len(x)), size=k, replace=False).tolist()) for k in (4, 9, 30)]
    for cuts in partitions:
        state = stream_init(cfg, params, stats)
        for a, b in zip([0] + cuts, cuts + [len(x)]):
            state.push(x[a:b])
        worst = max(worst, float(np.max(np.abs(state.finalize_logits() - offline))))

    h, e = rng.normal(size=(8, 60)), rng.normal(size=60) * 15
    acc = PoolAccumulator(8)
    for part in np.array_split(np.arange(60), 6):
        acc.update(h[:, part], e[part])
    direct, _ = L.attn_pool_forward(h[None], np.ones((1, 1, 60)), np.zeros((1, 8)), np.zeros(1), np.zeros(1))
    w = np.exp(e - e.max())
    w /= w.sum()
    mu = h @ w
    ref = np.concatenate([mu, np.sqrt(np.maximum((h * h) @ w - mu**2, 0) + L.POOL_EPS)])
    algebra = float(np.max(np.abs(acc.pooled() - ref)))
    ok = report(7, "streaming equivalence", {
        "every chunk partition within 1e-5 of offline": worst < 1e-5,
        "accumulator algebra within 1e-9": algebra < 1e-9,
    }, f"{len(partitions)} partitions, max logit diff {worst:.1e}; accumulator {algebra:.1e}")
    assert ok


# --- 8. curation contracts --------------------------------------------------------------


def test_criterion_8_curation(tiny_cfg, corpus):
    sr = 16000
    noise = AudioBuffer(np.random.default_rng(0).normal(size=sr * 20) * 0.3, sr)
    long_ok = all(d <= 8.0 + 1e-9 for _, d in energy_vad(noise))
    x = np.zeros(sr * 7)
    truth = [(0.5, 1.5), (2.5, 3.5), (4.5, 5.5)]
    for a, b in truth:
        t = np.arange(int((b - a) * sr)) / sr
        x[int(a * sr) : int(a * sr) + len(t)] = 0.5 * np.sin(2 * np.pi * 300 * t)
    segs = energy_vad(AudioBuffer(x, sr))
    bounds = len(segs) == 3 and all(abs(o - a) <= 0.02 and abs(o + d - b) <= 0.02
                                    for (o, d), (a, b) in zip(segs, truth))

    _, val = corpus
    pred = Predictor(tiny_cfg, init_params(tiny_cfg, seed=1))
    wrong = mine_errors(pred, val)
    oracle = [r for r in val if pred.labels[int(np.argmax(pred.predict_buffer(load_record(r))))] != r.label]

    def recs(n_en, n_zh):
        return [UtteranceRecord(f"/{lab}{i}.wav", 0.0, 1.0, lab) for lab, n in (("en", n_en), ("zh", n_zh))
                for i in range(n)]

    weights_ok = (compute_class_weights(recs(80, 20), ("en", "zh")) == {"en": 1.25, "zh": 5.0}
                  and compute_class_weights(recs(50, 50), ("en", "zh")) == {"en": 2.0, "zh": 2.0})
    durs = np.random.default_rng(1).uniform(0.05, 20.0, 500)
    mixed = [UtteranceRecord(f"/u{i}.wav", 0.0, float(d), "en") for i, d in enumerate(durs)]
    kept = duration_filter(mixed, 0.3, 16.0)
    filter_ok = (kept == [r for r in mixed if 0.3 <= r.duration <= 16.0]
                 and duration_filter([UtteranceRecord("/a.wav", 0.0, 0.2, "en")], 0.3, 16.0) == [])
    ok = report(8, "curation contracts", {
        "VAD segments <= 8.0 s": long_ok,
        "VAD boundaries within 0.02 s": bounds,
        "mine_errors == misclassified subset": wrong == oracle,
        "class weights N/N_x": weights_ok,
        "duration filter [0.3, 16.0] s": filter_ok,
    }, f"{len(wrong)} mined of {len(val)}; tone segments {[(round(o, 3), round(o + d, 3)) for o, d in segs]}")
    assert ok


# --- 9. augmentation contracts -----------------------------------------------------------


def test_criterion_9_augmentation():
    cfg = AugmentConfig(speed_prob=0.5, speed_range=(0.95, 1.05), freq_masks=3, freq_width=4,
                        time_masks=5, time_width=0.03)
    rng = np.random.default_rng(5)
    bounds_ok = True
    for T in (10, 100, 337, 1600):
        for _ in range(100):
            masks = sample_masks(80, T, cfg, rng)
            F = apply_masks(FeatureMatrix(rng.normal(size=(80, T)) + 5.0), masks).values
            freq = [w for a, _, w in masks if a == "freq"]
            time_ = [w for a, _, w in masks if a == "time"]
            bounds_ok &= len(freq) == 3 and len(time_) == 5
            bounds_ok &= max(freq) <= 4 and max(time_) <= max_time_mask(cfg, T) == math.ceil(0.03 * T)
            bounds_ok &= np.all(F == 0, axis=1).sum() <= 12 and np.all(F == 0, axis=0).sum() <= 5 * math.ceil(0.03 * T)
    buf = AudioBuffer(np.zeros(16000), 16000)
    n = 10_000
    hits = sum(speed_perturb(buf, cfg, rng) is not buf for _ in range(n))
    sigma = math.sqrt(n * 0.25)
    lengths_ok = all(len(speed_perturb(buf, cfg, rng, rate=r)) == round(16000 / r)
                     for r in (0.95, 0.97, 1.0, 1.03, 1.05))
    ok = report(9, "augmentation contracts", {
        "mask counts and widths (3/4/5/0.03)": bool(bounds_ok),
        "speed perturbation rate within binomial bounds": abs(hits - n / 2) <= 4 * sigma,
        "speed length formula exact": lengths_ok,
    }, f"perturbed {hits}/{n}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
