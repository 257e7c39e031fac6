"""
Acoustic front-end: 50 ms Hann frames with a 12.5 ms hop, 80-band HTK
log-mel power spectra, first-order deltas. Output is T_a x 160.
"""

import logging
from functools import lru_cache
from pathlib import Path

import librosa
import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

from src.config import FRAME_STEP_MS, FRAME_WIDTH_MS, N_MELS, SAMPLE_RATE_HZ
from src.errors import FormatError, TooShortError

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-10


def frame_geometry(sample_rate: int) -> tuple[int, int]:
    """(frame width, hop) in samples."""
    if sample_rate <= 0:
        raise ValueError(f"sample rate must be positive, got {sample_rate}")
    width = int(round(sample_rate * FRAME_WIDTH_MS / 1000.0))
    step = int(round(sample_rate * FRAME_STEP_MS / 1000.0))
    return width, step


def num_frames(num_samples: int, sample_rate: int) -> int:
    width, step = frame_geometry(sample_rate)
    if num_samples < width:
        return 0
    return (num_samples - width) // step + 1


def frame_signal(samples: np.ndarray, sample_rate: int) -> np.ndarray:
    """Overlapping Hann-windowed frames, shape (T_a, width)."""
    samples = np.asarray(samples, dtype=np.float64)
    width, step = frame_geometry(sample_rate)
    if samples.ndim != 1 or samples.shape[0] < width:
        raise TooShortError(
            f"signal of {samples.shape[0]} samples is shorter than one {FRAME_WIDTH_MS:g} ms frame ({width} samples)"
        )
    frames = np.lib.stride_tricks.sliding_window_view(samples, width)[::step]
    return frames * get_window("hann", width, fftbins=True)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular HTK-scale filters from 0 Hz to Nyquist, shape (n_mels, n_fft // 2 + 1)."""
    return librosa.filters.mel(
        sr=sample_rate, n_fft=n_fft, n_mels=n_mels, fmin=0.0, fmax=sample_rate / 2.0, htk=True, norm=None
    ).astype(np.float64)


def log_mel(frame: np.ndarray, sample_rate: int, n_mels: int = N_MELS) -> np.ndarray:
    """Natural-log mel energies of one windowed frame (power spectrum, floor 1e-10)."""
    frame = np.asarray(frame, dtype=np.float64)
    power = np.abs(np.fft.rfft(frame)) ** 2
    energies = mel_filterbank(sample_rate, frame.shape[-1], n_mels) @ power.T
    return np.log(np.maximum(energies.T, LOG_FLOOR))


def add_deltas(mel: np.ndarray) -> np.ndarray:
    """Append (mel[t+1] - mel[t-1]) / 2 with edge replication; T_a x 80 -> T_a x 160."""
    mel = np.asarray(mel)
    padded = np.pad(mel, ((1, 1), (0, 0)), mode="edge")
    deltas = (padded[2:] - padded[:-2]) / 2.0
    return np.concatenate([mel, deltas], axis=1)


def featurize_signal(samples: np.ndarray, sample_rate: int) -> np.ndarray:
    frames = frame_signal(samples, sample_rate)
    return add_deltas(log_mel(frames, sample_rate)).astype(np.float32)


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """16-bit mono PCM at 16 kHz, scaled to [-1, 1)."""
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read WAV {path}: {exc}") from exc
    if data.ndim != 1:
        raise FormatError(f"{path}: expected mono audio, found {data.shape[1]} channels")
    if data.dtype != np.int16:
        raise FormatError(f"{path}: unsupported sample format {data.dtype}, expected 16-bit PCM")
    if rate != SAMPLE_RATE_HZ:
        raise FormatError(f"{path}: sample rate {rate} Hz is not {SAMPLE_RATE_HZ} Hz (resampling is not supported)")
    return data.astype(np.float64) / 32768.0, rate


def featurize_wav(path: str | Path) -> np.ndarray:
    samples, rate = read_wav(path)
    features = featurize_signal(samples, rate)
    logger.debug("featurized %s: %d frames", path, features.shape[0])
    return features

