"""Synthetic speech-like corpus: Markov chains over harmonic "phone" states.

Each latent state owns a fundamental frequency and a formant-shaped harmonic
envelope. An utterance dwells in a state for a random duration, emits the
state's harmonic template plus Gaussian noise, then jumps to a different
state. The per-frame state sequence is kept as ground truth for labeler
diagnostics.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features
from .errors import ContractError, DataError

FRAME_RATE = 100  # ground-truth states are stored per 10 ms frame


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    n_utterances: int = 200
    min_duration: float = 2.0
    max_duration: float = 4.0
    n_states: int = 8
    f0_range: tuple[float, float] = (100.0, 240.0)
    n_harmonics: int = 30
    formant_bandwidth: float = 250.0
    mean_dwell: float = 0.3
    min_dwell: float = 0.08
    noise_level: float = 0.05
    min_template_distance: float = 2.0

    def __post_init__(self):
        if self.n_states < 1 or self.n_utterances < 1:
            raise ContractError("need at least one state and one utterance")
        if not 0 < self.min_duration <= self.max_duration:
            raise ContractError("duration range must satisfy 0 < min <= max")
        if self.min_duration * features.SAMPLE_RATE < features.WIN_LENGTH:
            raise ContractError("utterances must be at least one analysis window long")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticDatasetSpec:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown dataset spec keys: {sorted(unknown)}")
        d = dict(d)
        if "f0_range" in d:
            d["f0_range"] = tuple(float(v) for v in d["f0_range"])
        return cls(**d)


@dataclass
class StateTemplate:
    f0: float
    amplitudes: np.ndarray  # per harmonic


@dataclass
class Corpus:
    waveforms: list[np.ndarray]
    states: list[np.ndarray]  # int state per 10 ms frame
    templates: list[StateTemplate] = field(default_factory=list)
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.waveforms)

    @property
    def total_seconds(self) -> float:
        return sum(len(w) for w in self.waveforms) / features.SAMPLE_RATE

    def mfcc(self, i: int) -> np.ndarray:
        key = ("mfcc", i)
        if key not in self._cache:
            self._cache[key] = features.mfcc_extract(self.waveforms[i]).frames
        return self._cache[key]

    def log_mel(self, i: int, n_mels: int = 80) -> np.ndarray:
        key = ("logmel", n_mels, i)
        if key not in self._cache:
            self._cache[key] = features.log_mel(self.waveforms[i], n_mels)
        return self._cache[key]

    def fbank_input(self, i: int, n_mels: int = 80) -> np.ndarray:
        """Normalised log-mel of utterance ``i``, as the Fbank front-end consumes it."""
        key = ("fbank", n_mels, i)
        if key not in self._cache:
            self._cache[key] = features.cmvn(self.log_mel(i, n_mels))
        return self._cache[key]


def _template_spectrum(t: StateTemplate) -> np.ndarray:
    """Log harmonic energy on a coarse mel grid, used to check separability."""
    centers = features.mel_center_frequencies(24)
    freqs = t.f0 * np.arange(1, len(t.amplitudes) + 1)
    width = np.gradient(centers)
    energy = np.exp(-0.5 * ((freqs[None, :] - centers[:, None]) / width[:, None]) ** 2) @ (t.amplitudes ** 2)
    return np.log(energy + 1e-6)


def make_templates(spec: SyntheticDatasetSpec, rng: np.random.Generator, max_tries: int = 1000) -> list[StateTemplate]:
    """Draw state templates, rejecting any too close to an earlier one."""
    nyquist = features.SAMPLE_RATE / 2
    templates: list[StateTemplate] = []
    for _ in range(max_tries):
        if len(templates) == spec.n_states:
            break
        f0 = rng.uniform(*spec.f0_range)
        h = np.arange(1, spec.n_harmonics + 1) * f0
        f1 = features.mel_to_hz(rng.uniform(features.hz_to_mel(250.0), features.hz_to_mel(1000.0)))
        f2 = features.mel_to_hz(rng.uniform(features.hz_to_mel(900.0), features.hz_to_mel(3500.0)))
        amps = (np.exp(-0.5 * ((h - f1) / spec.formant_bandwidth) ** 2)
                + 0.6 * np.exp(-0.5 * ((h - f2) / spec.formant_bandwidth) ** 2) + 0.01)
        amps[h >= nyquist] = 0.0
        cand = StateTemplate(float(f0), amps)
        spectrum = _template_spectrum(cand)
        if all(np.linalg.norm(spectrum - _template_spectrum(t)) >= spec.min_template_distance for t in templates):
            templates.append(cand)
    if len(templates) < spec.n_states:
        raise DataError(f"could only place {len(templates)} separable states; lower min_template_distance")
    return templates


def _state_path(n_samples: int, spec: SyntheticDatasetSpec, rng: np.random.Generator) -> np.ndarray:
    sr = features.SAMPLE_RATE
    path = np.empty(n_samples, dtype=np.int64)
    pos = 0
    state = int(rng.integers(spec.n_states))
    while pos < n_samples:
        dwell = max(spec.min_dwell, rng.exponential(spec.mean_dwell - spec.min_dwell) + spec.min_dwell)
        end = min(n_samples, pos + int(dwell * sr))
        path[pos:end] = state
        pos = end
        if spec.n_states > 1:
            state = (state + 1 + int(rng.integers(spec.n_states - 1))) % spec.n_states
    return path


def synthesize(path: np.ndarray, templates: list[StateTemplate], noise_level: float,
               rng: np.random.Generator) -> np.ndarray:
    sr = features.SAMPLE_RATE
    t = np.arange(len(path)) / sr
    out = np.zeros(len(path))
    for s in np.unique(path):
        idx = path == s
        tpl = templates[s]
        phases = np.linspace(0.0, np.pi, len(tpl.amplitudes))
        k = np.arange(1, len(tpl.amplitudes) + 1)
        out[idx] = np.sin(2 * np.pi * tpl.f0 * np.outer(t[idx], k) + phases) @ tpl.amplitudes
    rms = np.sqrt(np.mean(out ** 2)) if np.any(out) else 1.0
    out = out + rng.normal(0.0, noise_level * rms, size=len(out)) if noise_level > 0 else out
    peak = np.max(np.abs(out))
    return out * (0.9 / peak) if peak > 0 else out


def frame_states(path: np.ndarray) -> np.ndarray:
    """State at the centre of each 25 ms / 10 ms analysis frame."""
    T = features.num_frames(len(path))
    centers = features.WIN_LENGTH // 2 + features.HOP_LENGTH * np.arange(T)
    return path[centers]


def make_synthetic_dataset(spec: SyntheticDatasetSpec, seed: int = 0) -> Corpus:
    rng = np.random.default_rng(seed)
    templates = make_templates(spec, rng)
    sr = features.SAMPLE_RATE
    waves, states = [], []
    for _ in range(spec.n_utterances):
        n = int(round(rng.uniform(spec.min_duration, spec.max_duration) * sr))
        path = _state_path(n, spec, rng)
        waves.append(synthesize(path, templates, spec.noise_level, rng))
        states.append(frame_states(path))
    return Corpus(waves, states, templates)


# ---------------------------------------------------------------- on-disk corpora

def save_corpus(corpus: Corpus, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with open(out_dir / "states.jsonl", "w") as fh:
        for i, (w, s) in enumerate(zip(corpus.waveforms, corpus.states)):
            name = f"utt{i:05d}.wav"
            features.write_wav(out_dir / name, w)
            written.append(out_dir / name)
            fh.write(json.dumps({"utt": name, "states": s.tolist()}) + "\n")
    written.append(out_dir / "states.jsonl")
    return written


def load_corpus(in_dir) -> Corpus:
    in_dir = Path(in_dir)
    index = in_dir / "states.jsonl"
    waves, states = [], []
    if index.exists():
        for line in index.read_text().splitlines():
            rec = json.loads(line)
            waves.append(features.read_wav(in_dir / rec["utt"]).samples)
            states.append(np.asarray(rec["states"], dtype=np.int64))
    else:
        for path in sorted(in_dir.glob("*.wav")):
            waves.append(features.read_wav(path).samples)
            states.append(np.zeros(features.num_frames(len(waves[-1])), dtype=np.int64))
    if not waves:
        raise DataError(f"no WAV files under {in_dir}")
    return Corpus(waves, states)
