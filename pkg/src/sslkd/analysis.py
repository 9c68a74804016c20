"""Representation similarity (linear CCA) and front-end inference benchmarks."""
from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import features
from .encoder import Model, encode, forward, frontend_forward, frontend_input
from .errors import ContractError, DegenerateVectorError, InsufficientDataError, ShapeError

RANK_TOL = 1e-8


# ---------------------------------------------------------------- CCA

def _whiten_basis(X: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the centred column space, dropping directions below RANK_TOL * sigma_max."""
    U, s, _ = np.linalg.svd(X, full_matrices=False)
    if s.size == 0 or s[0] <= 0:
        raise DegenerateVectorError("activation matrix has rank 0")
    return U[:, s > RANK_TOL * s[0]]


def canonical_correlations(X, Y) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeError(f"CCA needs [n, d] matrices with equal n, got {X.shape} and {Y.shape}")
    n = X.shape[0]
    if n <= X.shape[1] + Y.shape[1]:
        raise InsufficientDataError(f"CCA needs n > d1 + d2, got n={n}, d1={X.shape[1]}, d2={Y.shape[1]}")
    Ux = _whiten_basis(X - X.mean(axis=0))
    Uy = _whiten_basis(Y - Y.mean(axis=0))
    return np.linalg.svd(Ux.T @ Uy, compute_uv=False)


def cca_similarity(X, Y) -> float:
    """Mean canonical correlation between the columns of ``X`` and ``Y``, in [0, 1]."""
    rho = canonical_correlations(X, Y)
    return float(np.clip(rho.mean(), 0.0, 1.0))


@dataclass
class ActivationDump:
    layers: list[np.ndarray]  # [n_frames, d] per hidden state
    model_id: str = ""
    corpus_id: str = ""

    def __post_init__(self):
        if len({x.shape[0] for x in self.layers}) > 1:
            raise ShapeError("all layers of a dump must share the frame count")

    def write(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, x in enumerate(self.layers):
            paths.append(out_dir / f"layer{i:02d}.feat")
            features.write_features(paths[-1], x)
        return paths

    @classmethod
    def read(cls, in_dir, model_id: str = "", corpus_id: str = "") -> ActivationDump:
        paths = sorted(Path(in_dir).glob("layer*.feat"))
        return cls([features.read_features(p) for p in paths], model_id, corpus_id)


def collect_activations(model: Model, waveforms, model_id: str = "", corpus_id: str = "") -> ActivationDump:
    """Hidden states of every layer, frames pooled across utterances in order."""
    per_layer: list[list[np.ndarray]] = [[] for _ in range(model.config.n_layers + 1)]
    for w in waveforms:
        _, out = forward(model, np.asarray(w, dtype=np.float64))
        for i, h in enumerate(out.hiddens):
            per_layer[i].append(h.data)
    return ActivationDump([np.concatenate(x) for x in per_layer], model_id, corpus_id)


def layerwise_cca_report(model_a: Model, model_b: Model, waveforms) -> list[float]:
    """CCA similarity between the two models' hidden states, layer by layer (index 0 = encoder input)."""
    if model_a.config.n_layers != model_b.config.n_layers:
        raise ContractError(f"layer counts differ: {model_a.config.n_layers} vs {model_b.config.n_layers}")
    a = collect_activations(model_a, waveforms)
    b = collect_activations(model_b, waveforms)
    return dump_cca_report(a, b)


def dump_cca_report(a: ActivationDump, b: ActivationDump) -> list[float]:
    if len(a.layers) != len(b.layers):
        raise ContractError(f"layer counts differ: {len(a.layers)} vs {len(b.layers)}")
    out = []
    for xa, xb in zip(a.layers, b.layers):
        n = min(len(xa), len(xb))
        out.append(cca_similarity(xa[:n], xb[:n]))
    return out


def write_cca_report(out_dir, sims: list[float]) -> list[Path]:
    """``cca.csv`` (with header) and ``cca.tsv`` plot data, both ``layer, similarity``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, tsv_path = out_dir / "cca.csv", out_dir / "cca.tsv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "similarity"])
        w.writerows([i, repr(s)] for i, s in enumerate(sims))
    with open(tsv_path, "w") as fh:
        for i, s in enumerate(sims):
            fh.write(f"{i}\t{s!r}\n")
    return [csv_path, tsv_path]


# ---------------------------------------------------------------- benchmark

@dataclass
class BenchReport:
    threads: int
    audio_seconds: float
    stages: dict[str, dict[str, float]] = field(default_factory=dict)  # model -> stage -> seconds
    effective_threads: int | None = None  # BLAS limit actually applied, at most the usable cores

    def total(self, model: str) -> float:
        return sum(self.stages[model].values())

    @property
    def frontend_speedup(self) -> float:
        return self.stages["waveform"]["frontend"] / self.stages["fbank"]["frontend"]

    @property
    def transformer_ratio(self) -> float:
        return self.stages["fbank"]["transformer"] / self.stages["waveform"]["transformer"]

    @property
    def total_speedup(self) -> float:
        return self.total("waveform") / self.total("fbank")

    def rows(self) -> list[list]:
        out = []
        for model, stages in self.stages.items():
            for stage, t in stages.items():
                out.append([self.threads, model, stage, t])
            out.append([self.threads, model, "total", self.total(model)])
        return out

    def summary(self) -> str:
        eff = self.effective_threads
        note = f" (effective {eff})" if eff is not None and eff != self.threads else ""
        lines = [f"threads={self.threads}{note} audio={self.audio_seconds:.1f}s"]
        for model in self.stages:
            s = self.stages[model]
            lines.append(f"  {model:8s} frontend {s['frontend']:.3f}s  transformer {s['transformer']:.3f}s  "
                         f"total {self.total(model):.3f}s")
        lines.append(f"  front-end speedup {self.frontend_speedup:.1f}x, transformer ratio "
                     f"{self.transformer_ratio:.3f}, total speedup {self.total_speedup:.2f}x")
        return "\n".join(lines)


def write_bench_csv(path, reports: list[BenchReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threads", "model", "stage", "seconds"])
        for r in reports:
            w.writerows(r.rows())


def chunk_audio(waveforms, chunk_seconds: float = 10.0) -> list[np.ndarray]:
    """Concatenate utterances and split into fixed-length chunks (a short tail is kept if it fits one frame)."""
    audio = np.concatenate([np.asarray(w, dtype=np.float64) for w in waveforms])
    n = int(chunk_seconds * features.SAMPLE_RATE)
    chunks = [audio[i:i + n] for i in range(0, len(audio), n)]
    return [c for c in chunks if len(c) >= 2 * features.WIN_LENGTH]


def _time_model(model: Model, chunks: list[np.ndarray]) -> dict[str, float]:
    fe_t = tr_t = 0.0
    for c in chunks:
        t0 = time.perf_counter()
        fe = frontend_forward(model.config, model.params, frontend_input(model.config, c))
        t1 = time.perf_counter()
        encode(fe, model.params, model.config)
        t2 = time.perf_counter()
        fe_t += t1 - t0
        tr_t += t2 - t1
    return {"frontend": fe_t, "transformer": tr_t}


def usable_cores() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def bench_frontend(waveforms, waveform_model: Model, fbank_model: Model, threads: int = 1,
                   chunk_seconds: float = 10.0, repeats: int = 2) -> BenchReport:
    """Time the front-end and transformer stages of both models on identical audio.

    Fbank front-end time includes log-mel extraction. One untimed warm-up
    chunk runs first; each stage reports the fastest of ``repeats`` passes.
    """
    if waveform_model.config.frontend_kind != "waveform" or fbank_model.config.frontend_kind != "fbank":
        raise ContractError("bench_frontend needs one waveform and one Fbank model")
    chunks = chunk_audio(waveforms, chunk_seconds)
    if not chunks:
        raise InsufficientDataError("no audio to benchmark")
    # a thread limit is a cap: raising BLAS above the usable cores only adds spin-waiting
    effective = max(1, min(threads, usable_cores()))
    report = BenchReport(threads, sum(len(c) for c in chunks) / features.SAMPLE_RATE, effective_threads=effective)
    with threadpool_limits(limits=effective):
        for name, model in (("waveform", waveform_model), ("fbank", fbank_model)):
            _time_model(model, chunks[:1])
            runs = [_time_model(model, chunks) for _ in range(max(1, repeats))]
            report.stages[name] = {stage: min(r[stage] for r in runs) for stage in ("frontend", "transformer")}
    return report
