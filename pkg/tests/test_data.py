import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seattack.data import (
    SNR_RANGE, T_MIN, DataError, TrainConfig, TrainingDiverged, build_pairs, make_corpus, make_mixture, pool_power,
    realized_snr, regression_loss, synth_noise, synth_utterance, train_predictive, train_score,
)
from seattack.models import SdeConfig, init_predictive, zero_like
from seattack.spectral import Waveform


def _ncc_peak(a, b):
    n = len(a) + len(b) - 1
    size = 1 << (n - 1).bit_length()
    xc = np.fft.irfft(np.fft.rfft(a, size) * np.conj(np.fft.rfft(b, size)), size)
    return float(np.max(np.abs(xc)) / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_synth_utterance_is_deterministic():
    assert synth_utterance(5, 1.2).samples.tobytes() == synth_utterance(5, 1.2).samples.tobytes()
    with pytest.raises(DataError):
        synth_utterance(0, 0.5)


def test_distinct_utterances_are_uncorrelated():
    peaks = [_ncc_peak(synth_utterance(2 * i).samples, synth_utterance(2 * i + 1).samples) for i in range(100)]
    assert max(peaks) < 0.5


def test_utterance_energy_sits_below_4khz():
    for seed in range(10):
        x = synth_utterance(seed, 1.0).samples
        p = np.abs(np.fft.rfft(x)) ** 2
        f = np.fft.rfftfreq(len(x), 1 / 16000)
        assert p[f < 4000].sum() / p.sum() > 0.9


@pytest.mark.parametrize("snr", [0.0, 20.0])
def test_make_mixture_examples(snr):
    clean, noise = synth_utterance(1, 1.0), synth_noise(2, 16000)
    mix = make_mixture(clean, noise, snr)
    resid = np.linalg.norm(mix.samples - clean.samples)
    assert resid == pytest.approx(np.linalg.norm(clean.samples) / 10 ** (snr / 20), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), snr=st.floats(-30, 40))
def test_property_realized_snr_is_exact(seed, snr):
    clean, noise = synth_utterance(seed, 1.0), synth_noise(seed + 1, 16000)
    assert realized_snr(clean, make_mixture(clean, noise, snr)) == pytest.approx(snr, abs=1e-9)


def test_make_mixture_errors():
    z = Waveform(np.zeros(100))
    n = synth_noise(0, 100)
    with pytest.raises(DataError):
        make_mixture(z, n, 0.0)
    with pytest.raises(DataError):
        make_mixture(n, z, 0.0)
    with pytest.raises(DataError):
        make_mixture(n, synth_noise(0, 99), 0.0)


def test_corpus_snrs_follow_training_range():
    assert SNR_RANGE == (-2.5, 17.5)
    snrs = [ex.snr_db for ex in make_corpus(4, 40, durations=(1.0, 1.0))]
    assert all(-2.5 <= s <= 17.5 for s in snrs)
    assert np.std(snrs) > 3.0
    with pytest.raises(DataError):
        make_corpus(0, 2, snr_range=(5, 1))


def test_pairs(small_corpus):
    a = build_pairs(small_corpus, 12, 3)
    b = build_pairs(small_corpus, 12, 3)
    assert len(a) == 12
    assert a.manifest() == b.manifest()
    for p in a:
        assert p.attacker_seed != p.user.utt_seed
        assert p.y_user.shape == p.s_user.shape == p.s_attacker.shape
    assert build_pairs(small_corpus, 12, 4).manifest() != a.manifest()
    with pytest.raises(DataError):
        build_pairs(small_corpus[:1], 2, 0)


def test_build_pairs_default_count(small_corpus):
    assert len(build_pairs(small_corpus, max_samples=1024)) == 100


def test_one_utterance_overfit():
    ex = make_corpus(21, 1, durations=(1.0, 1.0))
    res = train_predictive(ex, "direct", TrainConfig(epochs=100, batch_size=128, lr=3e-3, seed=0))
    assert res.init_loss / res.final_loss >= 10.0
    assert res.final_loss < res.init_loss


def test_variants_share_dataset_and_reproduce(small_corpus):
    cfg = TrainConfig(epochs=1, seed=5)
    for variant in ("direct", "crm"):
        a = train_predictive(small_corpus, variant, cfg)
        b = train_predictive(small_corpus, variant, cfg)
        assert a.final_loss < a.init_loss
        for k in a.params.arrays:
            assert a.params[k].tobytes() == b.params[k].tobytes()


def test_trained_model_beats_identity_and_zero_on_held_out(stft_cfg):
    train = make_corpus(31, 12, durations=(1.0, 1.0))
    test = make_corpus(32, 4, durations=(1.0, 1.0))
    res = train_predictive(train, "direct", TrainConfig(epochs=10, seed=0), stft_cfg)
    pairs = [ex.spectrograms(stft_cfg) for ex in test]
    y = np.concatenate([p[0].bins for p in pairs], axis=1)
    s = np.concatenate([p[1].bins for p in pairs], axis=1)
    ref = pool_power(y)
    ours = float(regression_loss(res.params, y, s, ref=ref))
    identity = float(regression_loss(init_predictive("direct", 256, 0, res.params["in_scale"]), y, s, ref=ref))
    zero = float(regression_loss(zero_like(res.params), y, s, ref=ref))
    assert ours < identity and ours < zero


def test_train_rejects_empty_and_bad_config():
    with pytest.raises(DataError):
        train_predictive([], "direct", TrainConfig(epochs=1))
    with pytest.raises(DataError):
        train_score([], TrainConfig(epochs=1))
    for bad in ({"epochs": 0}, {"lr": 0}, {"momentum": 1.0}, {"optimizer": "rmsprop"}, {"snr_range": (3, 1)}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_divergence_aborts_with_trace(small_corpus):
    # an absurd step size without clipping blows the loss up
    cfg = TrainConfig(epochs=40, lr=1e6, optimizer="sgd", momentum=0.0, clip_norm=float("inf"))
    with pytest.raises(TrainingDiverged) as err:
        with np.errstate(all="ignore"):
            train_predictive(small_corpus, "direct", cfg)
    assert isinstance(err.value.trace, list)


def test_train_score_halves_dsm_loss_and_reproduces(small_corpus):
    assert T_MIN == 0.03
    cfg = TrainConfig(epochs=40, seed=1)
    a = train_score(small_corpus, cfg, SdeConfig())
    assert a.init_loss / a.final_loss >= 2.0
    b = train_score(small_corpus, cfg, SdeConfig())
    for k in a.params.arrays:
        assert a.params[k].tobytes() == b.params[k].tobytes()
