"""Audio front-ends: log-mel filterbanks, MFCCs and the two learnable
convolutional front-ends (7-layer waveform CNN and single-conv Fbank).

Framing is fixed at 25 ms windows with a 10 ms shift at 16 kHz. Both learnable
front-ends emit 20 ms frames, time-major, so their outputs can be compared
frame by frame after :func:`align_lengths`.
"""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct, rfft

from .autodiff import Tensor, ops
from .errors import AlignmentError, FormatError, InputTooShortError, ShapeError

SAMPLE_RATE = 16000
WIN_LENGTH = 400
HOP_LENGTH = 160
N_FFT = 512
LOG_FLOOR = 1e-10
N_CEPS = 13

# HuBERT waveform extractor geometry
WAVEFORM_KERNELS = (10, 3, 3, 3, 3, 2, 2)
WAVEFORM_STRIDES = (5, 2, 2, 2, 2, 2, 2)
FBANK_KERNEL = 9
FBANK_STRIDE = 2
MAX_ALIGN_GAP = 4


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise ShapeError(f"only {SAMPLE_RATE} Hz audio is supported, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # [T, F]
    frame_shift_ms: float
    kind: str  # "fbank" | "mfcc" | "frontend_output"

    @property
    def shape(self):
        return self.frames.shape

    def __len__(self):
        return self.frames.shape[0]


def _samples(w) -> np.ndarray:
    return w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)


# ---------------------------------------------------------------- spectral features

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = 80, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    mels = np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2)
    return mel_to_hz(mels)[1:-1]


def mel_filterbank(n_mels: int = 80, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular HTK-mel filters, shape [n_mels, n_fft // 2 + 1], peak 1."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    bins = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins - lo) / (mid - lo)
    down = (hi - bins) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def num_frames(n_samples: int) -> int:
    if n_samples < WIN_LENGTH:
        raise InputTooShortError(f"need at least {WIN_LENGTH} samples for one frame, got {n_samples}")
    return 1 + (n_samples - WIN_LENGTH) // HOP_LENGTH


def power_spectrum(samples: np.ndarray) -> np.ndarray:
    T = num_frames(len(samples))
    frames = np.lib.stride_tricks.sliding_window_view(samples, WIN_LENGTH)[::HOP_LENGTH][:T]
    spec = rfft(frames * np.hanning(WIN_LENGTH), n=N_FFT, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def log_mel(samples: np.ndarray, n_mels: int = 80) -> np.ndarray:
    energies = power_spectrum(samples) @ mel_filterbank(n_mels).T
    return np.log(np.maximum(energies, LOG_FLOOR))


def cmvn(feat: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """Per-utterance mean and variance normalisation of each column of a [T, F] matrix."""
    return (feat - feat.mean(axis=0)) / np.maximum(feat.std(axis=0), floor)


def fbank_input(samples: np.ndarray, n_mels: int = 80) -> np.ndarray:
    """Fbank front-end input: log-mel energies normalised over the utterance."""
    return cmvn(log_mel(samples, n_mels))


def fbank_extract(w, n_mels: int = 80) -> FeatureMatrix:
    """Log-mel filterbank energies, one row per 10 ms frame."""
    return FeatureMatrix(log_mel(_samples(w), n_mels), 10.0, "fbank")


def deltas(feat: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over +-``width`` frames with edge replication."""
    T = feat.shape[0]
    padded = np.pad(feat, ((width, width), (0, 0)), mode="edge")
    num = sum(n * (padded[width + n:width + n + T] - padded[width - n:width - n + T]) for n in range(1, width + 1))
    return num / (2.0 * sum(n * n for n in range(1, width + 1)))


def mfcc_extract(w, n_mels: int = 80) -> FeatureMatrix:
    """13 cepstra (orthonormal DCT-II of log-mel) with deltas and delta-deltas."""
    ceps = dct(log_mel(_samples(w), n_mels), type=2, norm="ortho", axis=-1)[:, :N_CEPS]
    d1 = deltas(ceps)
    return FeatureMatrix(np.concatenate([ceps, d1, deltas(d1)], axis=1), 10.0, "mfcc")


# ---------------------------------------------------------------- learnable front-ends

def waveform_frontend_shapes(channels: int = 512) -> dict[str, tuple[int, ...]]:
    shapes = {}
    c_in = 1
    for i, k in enumerate(WAVEFORM_KERNELS):
        shapes[f"frontend.conv{i}.weight"] = (channels, c_in, k)
        c_in = channels
    shapes["frontend.norm.weight"] = (channels,)
    shapes["frontend.norm.bias"] = (channels,)
    return shapes


def fbank_frontend_shapes(channels: int = 512, n_mels: int = 80) -> dict[str, tuple[int, ...]]:
    return {"frontend.conv.weight": (channels, n_mels, FBANK_KERNEL)}


def init_frontend(kind: str, rng: np.random.Generator, channels: int = 512, n_mels: int = 80) -> dict[str, np.ndarray]:
    """He-normal conv kernels; group-norm scale 1 and shift 0."""
    shapes = waveform_frontend_shapes(channels) if kind == "waveform" else fbank_frontend_shapes(channels, n_mels)
    params = {}
    for name, shape in shapes.items():
        if name.endswith("norm.weight"):
            params[name] = np.ones(shape)
        elif name.endswith("norm.bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return params


def waveform_output_length(n_samples: int) -> int:
    T = n_samples
    for k, s in zip(WAVEFORM_KERNELS, WAVEFORM_STRIDES):
        T = ops.conv_output_length(T, k, s)
    return T


def fbank_output_length(n_frames: int) -> int:
    return ops.conv_output_length(n_frames, FBANK_KERNEL, FBANK_STRIDE)


def waveform_frontend_forward(w, params) -> Tensor:
    """Seven strided convolutions with GELU; group norm after the first.

    ``w`` is [S] or [B, S] samples; returns [T', C] or [B, T', C].
    """
    x = w if isinstance(w, Tensor) else Tensor(_samples(w))
    unbatched = x.ndim == 1
    if x.shape[-1] < WIN_LENGTH:
        raise InputTooShortError(f"waveform front-end needs >= {WIN_LENGTH} samples, got {x.shape[-1]}")
    x = ops.reshape(x, (1 if unbatched else x.shape[0], 1, x.shape[-1]))
    for i, s in enumerate(WAVEFORM_STRIDES):
        x = ops.conv1d(x, params[f"frontend.conv{i}.weight"], stride=s)
        if i == 0:
            x = ops.group_norm(x, x.shape[1], params["frontend.norm.weight"], params["frontend.norm.bias"])
        x = ops.gelu(x)
    x = ops.swapaxes(x, 1, 2)
    return x[0] if unbatched else x


def fbank_frontend_forward(f, params) -> Tensor:
    """One stride-2 convolution (kernel 9) plus GELU over 10 ms fbank frames.

    ``f`` is [T, n_mels] or [B, T, n_mels]; returns [T'', C] or [B, T'', C].
    """
    x = f if isinstance(f, Tensor) else Tensor(f.frames if isinstance(f, FeatureMatrix) else f)
    unbatched = x.ndim == 2
    if x.shape[-2] < FBANK_KERNEL:
        raise InputTooShortError(f"fbank front-end needs >= {FBANK_KERNEL} frames, got {x.shape[-2]}")
    if unbatched:
        x = ops.reshape(x, (1,) + x.shape)
    x = ops.swapaxes(x, 1, 2)
    x = ops.gelu(ops.conv1d(x, params["frontend.conv.weight"], stride=FBANK_STRIDE))
    x = ops.swapaxes(x, 1, 2)
    return x[0] if unbatched else x


def align_lengths(a, b, max_gap: int = MAX_ALIGN_GAP):
    """Truncate two time-major sequences to their common length.

    Works on :class:`FeatureMatrix`, arrays, or tensors whose time axis is -2.
    """
    ta, tb = _time_len(a), _time_len(b)
    if abs(ta - tb) > max_gap:
        raise AlignmentError(f"front-end lengths differ by {abs(ta - tb)} frames (max {max_gap})")
    n = min(ta, tb)
    return _truncate(a, n), _truncate(b, n)


def _time_len(x) -> int:
    if isinstance(x, FeatureMatrix):
        return len(x)
    return x.shape[-2]


def _truncate(x, n):
    if isinstance(x, FeatureMatrix):
        return x if len(x) == n else FeatureMatrix(x.frames[:n], x.frame_shift_ms, x.kind)
    if x.shape[-2] == n:
        return x
    return x[..., :n, :]


# ---------------------------------------------------------------- file formats

FEAT_MAGIC = b"FEAT01"


def write_features(path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f8")
    if frames.ndim != 2:
        raise ShapeError(f"feature dumps are 2-d, got {frames.shape}")
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<II", *frames.shape))
        fh.write(frames.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:6] != FEAT_MAGIC:
        raise FormatError(f"{path}: not a FEAT01 file")
    T, F = struct.unpack_from("<II", raw, 6)
    payload = raw[14:]
    if len(payload) != 8 * T * F:
        raise FormatError(f"{path}: expected {T}x{F} values, payload has {len(payload)} bytes")
    return np.frombuffer(payload, dtype="<f8").reshape(T, F).astype(np.float64)


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
            raise FormatError(f"{path}: expected mono 16-bit PCM")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0, rate)
