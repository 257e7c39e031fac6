import math

import librosa
import numpy as np
import pytest
from scipy.io import wavfile

from src.audio import features
from src.audio.features import (
    LOG_FLOOR,
    add_deltas,
    featurize_signal,
    featurize_wav,
    frame_signal,
    log_mel,
    num_frames,
    read_wav,
)
from src.errors import FormatError, TooShortError

RATE = 16000


def test_frame_geometry_at_16k():
    assert features.frame_geometry(RATE) == (800, 200)


@pytest.mark.parametrize("seconds,frames", [(1.0, 77), (2.0, 157)])
def test_known_frame_counts(seconds, frames):
    assert featurize_signal(np.zeros(int(seconds * RATE)), RATE).shape == (frames, 160)


def test_frame_count_matches_formula():
    rng = np.random.default_rng(0)
    for n in rng.integers(800, 40000, size=50):
        assert frame_signal(rng.normal(size=n), RATE).shape == ((n - 800) // 200 + 1, 800)
        assert num_frames(int(n), RATE) == (n - 800) // 200 + 1


def test_signal_shorter_than_a_frame():
    assert num_frames(799, RATE) == 0
    with pytest.raises(TooShortError):
        featurize_signal(np.zeros(799), RATE)


def test_exactly_one_frame():
    assert featurize_signal(np.ones(800), RATE).shape == (1, 160)


def test_gain_shifts_log_mel_by_log_100():
    frames = frame_signal(np.random.default_rng(1).normal(size=RATE), RATE)
    shift = log_mel(frames * 10.0, RATE) - log_mel(frames, RATE)
    np.testing.assert_allclose(shift, math.log(100.0), atol=1e-5)


@pytest.mark.parametrize("band", [30, 50, 70])
def test_sine_at_a_band_center_peaks_in_that_band(band):
    centers = librosa.mel_frequencies(n_mels=80 + 2, fmin=0.0, fmax=RATE / 2.0, htk=True)
    t = np.arange(RATE) / RATE
    mel = log_mel(frame_signal(np.sin(2 * np.pi * centers[band + 1] * t), RATE), RATE)
    assert (mel.argmax(axis=1) == band).all()


def test_silence_hits_the_log_floor():
    np.testing.assert_allclose(log_mel(np.zeros((1, 800)), RATE), math.log(LOG_FLOOR))


def test_deltas_of_a_ramp_are_one_inside():
    mel = np.tile(np.arange(6.0)[:, None], (1, 80))
    out = add_deltas(mel)
    assert out.shape == (6, 160)
    np.testing.assert_array_equal(out[:, :80], mel)
    np.testing.assert_allclose(out[1:-1, 80:], 1.0)
    np.testing.assert_allclose(out[0, 80:], 0.5)
    np.testing.assert_allclose(out[-1, 80:], 0.5)


def test_single_frame_has_zero_deltas():
    out = add_deltas(np.random.default_rng(2).normal(size=(1, 80)))
    np.testing.assert_array_equal(out[0, 80:], np.zeros(80))


def test_featurization_is_deterministic():
    samples = np.random.default_rng(3).normal(size=RATE)
    assert featurize_signal(samples, RATE).tobytes() == featurize_signal(samples.copy(), RATE).tobytes()


def test_features_are_finite_float32():
    out = featurize_signal(np.random.default_rng(4).normal(size=RATE // 2), RATE)
    assert out.dtype == np.float32
    assert np.isfinite(out).all()


class TestReadWav:
    def test_round_trip(self, tmp_path):
        pcm = (np.random.default_rng(5).uniform(-0.5, 0.5, size=RATE) * 32767).astype(np.int16)
        path = tmp_path / "ok.wav"
        wavfile.write(path, RATE, pcm)
        samples, rate = read_wav(path)
        assert rate == RATE
        np.testing.assert_allclose(samples, pcm / 32768.0)
        assert featurize_wav(path).shape == (77, 160)

    def test_stereo_is_rejected(self, tmp_path):
        path = tmp_path / "stereo.wav"
        wavfile.write(path, RATE, np.zeros((RATE, 2), dtype=np.int16))
        with pytest.raises(FormatError, match="mono"):
            read_wav(path)

    def test_float_samples_are_rejected(self, tmp_path):
        path = tmp_path / "float.wav"
        wavfile.write(path, RATE, np.zeros(RATE, dtype=np.float32))
        with pytest.raises(FormatError, match="16-bit"):
            read_wav(path)

    def test_other_rates_are_rejected(self, tmp_path):
        path = tmp_path / "8k.wav"
        wavfile.write(path, 8000, np.zeros(8000, dtype=np.int16))
        with pytest.raises(FormatError, match="8000 Hz"):
            read_wav(path)

    def test_garbage_is_a_format_error(self, tmp_path):
        path = tmp_path / "bad.wav"
        path.write_bytes(b"not a wav file at all")
        with pytest.raises(FormatError):
            read_wav(path)
