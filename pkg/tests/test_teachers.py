import json
import math
import warnings

import numpy as np
import pytest

from mifuse.dataio import SynthShiftSpec, generate_synth_shift
from mifuse.errors import ContractError, MissingCacheEntry, TransportError, ValidationError
from mifuse.numkit import forward_batch, init_classifier, softmax
from mifuse.teachers import (
    CacheOnlyProvider, EmaState, HttpLalmProvider, NoisyOracle, NoisyOracleConfig, ParseStats, TeacherCache,
    ema_update, lalm_predict, lalm_sample_matrix, mc_dropout_predict, parse_lalm_response,
)
from mifuse.uncertainty import ProbDist, mutual_information

EMOTIONS = ("happy", "sad", "angry", "neutral")


# --- parsing


def test_parse_uniform_table():
    d = parse_lalm_response({"probs": dict.fromkeys(EMOTIONS, 0.25)}, EMOTIONS)
    assert np.allclose(d.probs, 0.25)


def test_parse_renormalizes():
    d = parse_lalm_response(json.dumps({"probs": {"happy": 2, "sad": 1, "angry": 1, "neutral": 0}}), EMOTIONS)
    assert np.allclose(d.probs, [0.5, 0.25, 0.25, 0.0])


def test_parse_free_text_falls_back_to_uniform(caplog):
    stats = ParseStats()
    d = parse_lalm_response("I think it is happy.", EMOTIONS, stats)
    assert np.allclose(d.probs, 0.25)
    assert stats.failures == 1
    assert "unparseable" in caplog.text


@pytest.mark.parametrize("payload", [
    None, 17, "[]", "{}", {"probs": []}, {"probs": {"happy": "lots"}}, {"probs": {"happy": -1}},
    {"probs": {"happy": float("nan")}}, b"\xff\xfe", {"probs": {"happy": True}},
])
def test_parse_never_raises(payload):
    d = parse_lalm_response(payload, EMOTIONS)
    assert isinstance(d, ProbDist) and len(d) == 4


def test_parse_clips_negatives_and_ignores_unknown_keys():
    d = parse_lalm_response({"probs": {"happy": 1, "sad": -3, "bored": 9}}, EMOTIONS)
    assert np.allclose(d.probs, [1, 0, 0, 0])


# --- cache


def test_cache_round_trip_and_put_once(tmp_path):
    path = tmp_path / "c.jsonl"
    cache = TeacherCache(path)
    cache.put("u1", 0, ProbDist([0.2, 0.8]))
    with pytest.raises(ContractError):
        cache.put("u1", 0, ProbDist([0.5, 0.5]))
    rec = json.loads(path.read_text().splitlines()[0])
    assert rec == {"utterance_id": "u1", "sample_index": 0, "probs": [0.2, 0.8]}
    again = TeacherCache(path)
    assert np.array_equal(again.get("u1", 0).probs, [0.2, 0.8])
    assert again.get("u1", 1) is None


def test_bad_cache_file_names_line(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text('{"utterance_id": "a", "sample_index": 0, "probs": [1.0]}\nnot json\n')
    with pytest.raises(ValidationError, match=":2:"):
        TeacherCache(path)


def test_lalm_predict_is_cache_first():
    labels = {"u1": 2}
    oracle = NoisyOracle(NoisyOracleConfig(error_model="independent", seed=3), labels)
    cache = TeacherCache()
    first = lalm_predict(oracle, cache, "u1", EMOTIONS)
    assert oracle.calls == 5
    second = lalm_predict(oracle, cache, "u1", EMOTIONS)
    assert oracle.calls == 5
    assert first.samples.tobytes() == second.samples.tobytes()
    # a cache-only replay gives the same answer
    third = lalm_predict(CacheOnlyProvider(), cache, "u1", EMOTIONS)
    assert np.array_equal(third.samples, first.samples)


def test_temperature_zero_means_one_sample():
    oracle = NoisyOracle(NoisyOracleConfig(error_model="independent"), {"u": 0})
    s = lalm_predict(oracle, TeacherCache(), "u", EMOTIONS, n_samples=5, temperature=0.0)
    assert s.k == 1 and s.mutual_info == 0.0


def test_cache_only_provider_names_missing_key():
    with pytest.raises(MissingCacheEntry) as err:
        lalm_predict(CacheOnlyProvider(), TeacherCache(), "u9", EMOTIONS)
    assert (err.value.utterance_id, err.value.sample_index) == ("u9", 0)


def test_sample_matrix_independent_of_worker_count():
    labels = {f"u{i}": i % 4 for i in range(40)}
    oracle = NoisyOracle(NoisyOracleConfig(error_model="independent"), labels)
    a = lalm_sample_matrix(oracle, TeacherCache(), list(labels), EMOTIONS, max_workers=1)
    b = lalm_sample_matrix(oracle, TeacherCache(), list(labels), EMOTIONS, max_workers=4)
    assert a.shape == (40, 5, 4) and np.array_equal(a, b)


# --- noisy oracle


def test_perfect_oracle_is_one_hot():
    labels = {f"u{i}": i % 4 for i in range(20)}
    oracle = NoisyOracle(NoisyOracleConfig(accuracy=1.0, concentration=math.inf, error_model="independent"), labels)
    for uid, y in labels.items():
        s = lalm_predict(oracle, TeacherCache(), uid, EMOTIONS)
        assert np.all(s.samples.argmax(axis=1) == y)
        assert np.all(s.samples.max(axis=1) == 1.0)
        assert s.mutual_info == 0.0


def test_oracle_mi_matches_uncertainty_module():
    oracle = NoisyOracle(NoisyOracleConfig(0.7, 5.0, seed=11, error_model="independent"), {"x": 1})
    cache = TeacherCache()
    s = lalm_predict(oracle, cache, "x", EMOTIONS, n_samples=5)
    cached = [cache.get("x", k) for k in range(5)]
    assert s.mutual_info == pytest.approx(mutual_information(cached), abs=1e-15)


@pytest.mark.parametrize("model", ["independent", "feature"])
def test_oracle_accuracy_contract(model):
    src, tgt, _ = generate_synth_shift(SynthShiftSpec(samples_per_class=500, seed=4))
    oracle = NoisyOracle.from_dataset(NoisyOracleConfig(0.7, 5.0, seed=2, error_model=model), tgt)
    hits = 0
    n = 0
    for uid, y in zip(tgt.ids, tgt.labels):
        for k in range(5):
            hits += oracle.sample(uid, EMOTIONS, 0.6, k).probs.argmax() == y
            n += 1
    assert n == 10_000
    assert abs(hits / n - 0.7) <= 0.02


def test_feature_errors_cluster_on_one_side():
    _, tgt, _ = generate_synth_shift(SynthShiftSpec(samples_per_class=100, seed=1))
    cfg = NoisyOracleConfig(0.7, 5.0, seed=0, persistence=1.0)
    oracle = NoisyOracle.from_dataset(cfg, tgt)
    wrong = [oracle.sample(u, EMOTIONS, 0.6, 0).probs.argmax() != y for u, y in zip(tgt.ids, tgt.labels)]
    assert np.mean(wrong) == pytest.approx(0.3, abs=0.01)
    # same utterance, different sample index: persistence 1 repeats the mistake
    u = tgt.ids[int(np.argmax(wrong))]
    assert len({oracle.sample(u, EMOTIONS, 0.6, k).probs.argmax() for k in range(5)}) == 1


def test_oracle_is_keyed_and_deterministic():
    o1 = NoisyOracle(NoisyOracleConfig(error_model="independent"), {"a": 0, "b": 1})
    o2 = NoisyOracle(NoisyOracleConfig(error_model="independent"), {"a": 0, "b": 1})
    o2.sample("b", EMOTIONS, 0.6, 3)
    assert np.array_equal(o1.sample("a", EMOTIONS, 0.6, 2).probs, o2.sample("a", EMOTIONS, 0.6, 2).probs)


def test_oracle_config_validation():
    with pytest.raises(ValidationError):
        NoisyOracleConfig(accuracy=0.0)
    with pytest.raises(ValidationError):
        NoisyOracleConfig(error_model="gaussian")
    with pytest.raises(ValidationError):
        NoisyOracle(NoisyOracleConfig(), {"a": 0})  # feature model without features


# --- HTTP provider


def test_http_provider_speaks_the_protocol(stub_server):
    srv = stub_server(lambda body: {c: (1.0 if c == "sad" else 0.0) for c in body["classes"]}, token="t0k")
    prov = HttpLalmProvider(srv.url, token="t0k")
    d = prov.sample("utt-1", EMOTIONS, 0.6, 2)
    assert np.array_equal(d.probs, [0, 1, 0, 0])
    req = srv.requests[0]
    assert req["path"] == "/v1/predict"
    assert req["body"] == {"utterance_id": "utt-1", "classes": list(EMOTIONS), "temperature": 0.6, "sample_index": 2}
    assert req["auth"] == "Bearer t0k"


def test_http_provider_retries_with_backoff(stub_server):
    srv = stub_server(lambda body: {"happy": 1}, fail_first=2)
    sleeps = []
    prov = HttpLalmProvider(srv.url, max_retries=3, sleep=sleeps.append)
    assert prov.sample("u", EMOTIONS, 0.6, 0).probs[0] == 1.0
    assert sleeps == [1.0, 2.0]


def test_http_provider_gives_up(stub_server):
    srv = stub_server(lambda body: {"happy": 1}, fail_first=100)
    prov = HttpLalmProvider(srv.url, max_retries=2, sleep=lambda s: None)
    with pytest.raises(TransportError, match="HTTP 503"):
        prov.sample("u", EMOTIONS, 0.6, 0)
    assert len(srv.requests) == 3


def test_http_provider_connection_refused():
    prov = HttpLalmProvider("http://127.0.0.1:9", max_retries=1, sleep=lambda s: None, timeout=2)
    with pytest.raises(TransportError):
        prov.sample("u", EMOTIONS, 0.6, 0)


# --- MC dropout


def _teacher(rate=0.4):
    return init_classifier(8, 16, 4, np.random.default_rng(3), dropout_rate=rate)


def test_mc_dropout_zero_rate_is_deterministic():
    x = np.random.default_rng(0).normal(size=8)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        s = mc_dropout_predict(_teacher(0.0), x, 8, np.random.default_rng(0))
    assert caught
    assert s.mutual_info == 0.0
    assert np.all(s.samples == s.samples[0])


def test_mc_dropout_seeded_repeat_is_identical():
    x = np.random.default_rng(0).normal(size=8)
    a = mc_dropout_predict(_teacher(), x, 8, np.random.default_rng(5))
    b = mc_dropout_predict(_teacher(), x, 8, np.random.default_rng(5))
    assert a.samples.tobytes() == b.samples.tobytes()


def test_mc_dropout_mean_matches_recomputed_passes():
    t = _teacher()
    x = np.random.default_rng(1).normal(size=8)
    s, masks = mc_dropout_predict(t, x, 8, np.random.default_rng(2), return_masks=True)
    per_pass = [softmax(forward_batch(t, x[None], mask=masks[k:k + 1])[0][0]) for k in range(8)]
    assert np.allclose(s.mean.probs, np.mean(per_pass, axis=0), atol=1e-12, rtol=0)


def test_mc_dropout_mean_converges():
    t = _teacher()
    x = np.random.default_rng(4).normal(size=8)
    drifts = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        means = [mc_dropout_predict(t, x, n, rng).mean.probs for n in (8, 16, 32, 64, 128, 256)]
        drifts.append([np.abs(b - a).sum() for a, b in zip(means, means[1:])])
    avg = np.mean(drifts, axis=0)
    assert np.all(np.diff(avg) < 0), avg


# --- EMA


def _scalar_model(v):
    m = init_classifier(1, 1, 2, np.random.default_rng(0))
    return m.with_params({k: np.full_like(p, v) for k, p in m.params().items()})


def test_ema_examples():
    ema = ema_update(EmaState(_scalar_model(1.0), 0.999), _scalar_model(0.0))
    assert np.allclose(ema.teacher.w1, 0.999, atol=1e-15)
    same = ema_update(EmaState(_scalar_model(0.3), 0.999), _scalar_model(0.3))
    assert np.all(same.teacher.w1 == 0.3)


def test_ema_contracts_by_alpha():
    ema, student = EmaState(_scalar_model(1.0), 0.9), _scalar_model(-1.0)
    gap = 2.0
    for _ in range(50):
        ema = ema_update(ema, student)
        new_gap = float(np.max(np.abs(ema.teacher.w2 - student.w2)))
        assert new_gap == pytest.approx(0.9 * gap, rel=1e-12)
        gap = new_gap


def test_ema_rejects_mismatched_models():
    with pytest.raises(ContractError):
        ema_update(EmaState(_scalar_model(0.0)), init_classifier(2, 1, 2, np.random.default_rng(0)))
    with pytest.raises(ValidationError):
        EmaState(_scalar_model(0.0), alpha=1.0)
