"""Teacher pretraining, two-stage distillation and the Adam optimiser.

Both training loops draw every random choice (batch composition, crop
offsets, span masks, dropout) from a single ``numpy`` generator stored in
:class:`TrainState`, so a run is reproducible from its seed and resumable
from a state checkpoint.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .autodiff import Tape, Tensor, backward
from .data import Corpus
from .encoder import (MaskSpec, Model, ModelConfig, encode, frontend_forward, frontend_input,
                      init_student_from_teacher)
from .errors import ContractError, NumericError
from .features import align_lengths
from .labels import Codebook, decimate, kmeans_assign, kmeans_fit
from .losses import (
    DistillWeights,
    LayerMap,
    StudentOutputHead,
    TeacherOutputHead,
    discriminative_loss,
    distill_loss,
    frontend_loss,
    head_from_tensors,
    hubert_pretrain_loss,
    loss_schedule,
    regression_loss,
    student_label_distribution,
    teacher_label_distribution,
)

log = logging.getLogger(__name__)

SAMPLES_PER_FRAME = 320
RECEPTIVE_FIELD = 400


# ---------------------------------------------------------------- optimiser

@dataclass
class TrainState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    count: dict[str, int] = field(default_factory=dict)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def to_tensors(self, prefix: str = "optim.") -> dict[str, np.ndarray]:
        out = {prefix + "step": np.array(float(self.step))}
        for name in self.m:
            out[f"{prefix}m.{name}"] = self.m[name]
            out[f"{prefix}v.{name}"] = self.v[name]
            out[f"{prefix}count.{name}"] = np.array(float(self.count[name]))
        out[prefix + "rng"] = _encode_rng(self.rng)
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], prefix: str = "optim.") -> TrainState:
        st = cls(step=int(tensors[prefix + "step"]), rng=_decode_rng(tensors[prefix + "rng"]))
        for key, val in tensors.items():
            if key.startswith(prefix + "m."):
                name = key[len(prefix) + 2:]
                st.m[name] = val.copy()
                st.v[name] = tensors[f"{prefix}v.{name}"].copy()
                st.count[name] = int(tensors[f"{prefix}count.{name}"])
        return st


def _encode_rng(rng: np.random.Generator) -> np.ndarray:
    s = rng.bit_generator.state
    if s["bit_generator"] != "PCG64":
        raise ContractError("only PCG64 generators can be checkpointed")
    words = []
    for big in (s["state"]["state"], s["state"]["inc"]):
        words += [(big >> (32 * i)) & 0xFFFFFFFF for i in range(4)]
    words += [s["has_uint32"], s["uinteger"]]
    return np.array(words, dtype=np.float64)


def _decode_rng(arr: np.ndarray) -> np.random.Generator:
    w = [int(x) for x in arr]
    join = lambda ws: sum(v << (32 * i) for i, v in enumerate(ws))  # noqa: E731
    rng = np.random.default_rng()
    rng.bit_generator.state = {"bit_generator": "PCG64", "state": {"state": join(w[0:4]), "inc": join(w[4:8])},
                               "has_uint32": w[8], "uinteger": w[9]}
    return rng


def warmup_lr(step: int, lr: float, warmup_steps: int) -> float:
    """Linear warmup over ``warmup_steps`` then constant."""
    if warmup_steps <= 0:
        return lr
    return lr * min(1.0, step / warmup_steps)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: TrainState, lr: float,
              beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-8) -> dict[str, np.ndarray]:
    """Bias-corrected Adam update of ``params`` (in place) for every name in ``grads``.

    Bias correction counts updates per parameter, so tensors that start
    training late are corrected from their own first step.
    """
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.count[name] = 0
        state.count[name] += 1
        t = state.count[name]
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    audio: np.ndarray  # [B, S]
    offsets: np.ndarray  # first 20 ms frame of each crop
    utterances: np.ndarray
    labels: np.ndarray | None = None  # [B, F]
    fbank: np.ndarray | None = None  # [B, 2F - 1, n_mels], normalised over each whole utterance

    @property
    def n_frames(self) -> int:
        return (self.audio.shape[1] - RECEPTIVE_FIELD) // SAMPLES_PER_FRAME + 1


def utterance_frames(n_samples: int) -> int:
    return (n_samples - RECEPTIVE_FIELD) // SAMPLES_PER_FRAME + 1


def sample_batch(corpus: Corpus, rng: np.random.Generator, batch_size: int, crop_frames: int,
                 labels: list[np.ndarray] | None = None, n_mels: int | None = None) -> Batch:
    """Random equal-length crops aligned to the 20 ms frame grid."""
    idx = rng.choice(len(corpus), size=batch_size, replace=len(corpus) < batch_size)
    F = min([crop_frames] + [utterance_frames(len(corpus.waveforms[i])) for i in idx])
    S = SAMPLES_PER_FRAME * (F - 1) + RECEPTIVE_FIELD
    offsets = np.array([rng.integers(0, utterance_frames(len(corpus.waveforms[i])) - F + 1) for i in idx])
    audio = np.stack([corpus.waveforms[i][SAMPLES_PER_FRAME * j:SAMPLES_PER_FRAME * j + S]
                      for i, j in zip(idx, offsets)])
    batch = Batch(audio, offsets, idx)
    if labels is not None:
        batch.labels = np.stack([labels[i][j:j + F] for i, j in zip(idx, offsets)])
    if n_mels is not None:
        batch.fbank = np.stack([corpus.fbank_input(i, n_mels)[2 * j:2 * j + 2 * F - 1] for i, j in zip(idx, offsets)])
    return batch


def model_input(config: ModelConfig, batch: Batch) -> np.ndarray:
    return batch.audio if config.frontend_kind == "waveform" else batch.fbank


# ---------------------------------------------------------------- teacher

@dataclass
class Teacher:
    model: Model
    head: TeacherOutputHead
    codebook: Codebook

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = self.model.to_tensors("model.")
        out.update(self.head.to_tensors("head."))
        out.update(self.codebook.to_tensors())
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> Teacher:
        return cls(Model.from_tensors(tensors, "model."), TeacherOutputHead.from_tensors(tensors, "head."),
                   Codebook.from_tensors(tensors))

    def forward(self, audio) -> tuple[Tensor, list[Tensor]]:
        """Front-end output and hidden states for raw ``audio``, no gradients."""
        fe = frontend_forward(self.model.config, self.model.params, frontend_input(self.model.config, audio))
        return fe, encode(fe, self.model.params, self.model.config).hiddens


@dataclass
class TeacherTrainConfig:
    steps: int = 2000
    batch_size: int = 8
    crop_frames: int = 96
    lr: float = 5e-4
    warmup_steps: int | None = None  # default: 8% of steps
    d_emb: int = 256
    temperature: float = 0.1
    mask_prob: float = 0.08
    mask_length: int = 10
    kmeans_iters: int = 50
    seed: int = 0

    @property
    def warmup(self) -> int:
        return int(round(0.08 * self.steps)) if self.warmup_steps is None else self.warmup_steps


def corpus_labels(corpus: Corpus, codebook: Codebook) -> list[np.ndarray]:
    return [kmeans_assign(decimate(corpus.mfcc(i)), codebook) for i in range(len(corpus))]


def fit_corpus_codebook(corpus: Corpus, n_clusters: int, max_iters: int = 50, seed: int = 0) -> Codebook:
    pooled = np.concatenate([decimate(corpus.mfcc(i)) for i in range(len(corpus))])
    return kmeans_fit(pooled, n_clusters, max_iters, seed)


def masked_prediction_loss(model: Model, head: TeacherOutputHead, params, head_params, batch: Batch,
                           mask: MaskSpec, rng: np.random.Generator, train: bool) -> Tensor:
    fe = frontend_forward(model.config, params, model_input(model.config, batch))
    out = encode(fe, params, model.config, mask=mask, rng=rng, train=train)
    T = min(out.last.shape[1], batch.labels.shape[1])
    p = teacher_label_distribution(out.last[:, :T], head.bind(head_params))
    M = out.mask[:, :T]
    if not M.any():
        M = M.copy()
        M[:, 0] = True
    return hubert_pretrain_loss(p, batch.labels[:, :T], M)


@dataclass
class TeacherRun:
    teacher: Teacher
    losses: list[float]
    labels: list[np.ndarray]


def train_teacher(corpus: Corpus, config: ModelConfig, cfg: TeacherTrainConfig | None = None,
                  codebook: Codebook | None = None) -> TeacherRun:
    """Masked pseudo-label prediction with a cosine head, optimised by Adam."""
    cfg = cfg or TeacherTrainConfig()
    if codebook is None:
        codebook = fit_corpus_codebook(corpus, config.vocab, cfg.kmeans_iters, cfg.seed)
    if codebook.size != config.vocab:
        raise ContractError(f"codebook has {codebook.size} clusters, model vocabulary is {config.vocab}")
    labels = corpus_labels(corpus, codebook)
    rng = np.random.default_rng(cfg.seed)
    model = Model.random(config, rng)
    head = TeacherOutputHead.random(config.d_model, config.vocab, cfg.d_emb, rng, cfg.temperature)
    head_params = head.params()
    state = TrainState(rng=rng)
    mask = MaskSpec(cfg.mask_prob, cfg.mask_length)
    n_mels = config.n_mels if config.frontend_kind == "fbank" else None
    losses = []
    for step in range(1, cfg.steps + 1):
        batch = sample_batch(corpus, rng, cfg.batch_size, cfg.crop_frames, labels, n_mels)
        tape = Tape()
        p = tape.watch_all(model.params)
        hp = {"head." + k: tape.watch("head." + k, v) for k, v in head_params.items()}
        try:
            loss = masked_prediction_loss(model, head, p, {k[5:]: v for k, v in hp.items()}, batch, mask, rng,
                                          train=True)
        except NumericError as e:
            raise NumericError(f"teacher training diverged at step {step}: {e}") from e
        grads = backward(tape, loss)
        lr = warmup_lr(step, cfg.lr, cfg.warmup)
        adam_step(model.params, {k: grads[k] for k in model.params}, state, lr)
        hg = {k: grads["head." + k] for k in head_params}
        adam_step(head_params, hg, state, lr)
        losses.append(loss.item())
        if step % 100 == 0:
            log.info("teacher step %d loss %.4f", step, losses[-1])
    head = head.bind(head_params)
    return TeacherRun(Teacher(model, head, codebook), losses, labels)


def evaluate_teacher(teacher: Teacher, corpus: Corpus, labels: list[np.ndarray] | None = None,
                     n_batches: int = 4, batch_size: int = 8, crop_frames: int = 96,
                     mask: MaskSpec = MaskSpec(), seed: int = 12345) -> float:
    """Mean masked cross-entropy on fixed random crops and masks."""
    labels = corpus_labels(corpus, teacher.codebook) if labels is None else labels
    rng = np.random.default_rng(seed)
    n_mels = teacher.model.config.n_mels if teacher.model.config.frontend_kind == "fbank" else None
    vals = []
    for _ in range(n_batches):
        batch = sample_batch(corpus, rng, batch_size, crop_frames, labels, n_mels)
        vals.append(masked_prediction_loss(teacher.model, teacher.head, teacher.model.params,
                                           teacher.head.params(), batch, mask, rng, train=False).item())
    return float(np.mean(vals))


# ---------------------------------------------------------------- distillation

@dataclass
class DistillConfig:
    student: ModelConfig
    weights: DistillWeights = field(default_factory=DistillWeights)
    total_steps: int = 3000
    n_frontend: int | None = None  # default: total/6 for Fbank students, else 0
    batch_size: int = 8
    crop_frames: int = 96
    lr: float = 5e-4
    warmup_steps: int | None = None  # default: 8% of total_steps
    layer_map: LayerMap | None = None
    frontend_loss: str = "l1"
    kl_direction: str = "teacher"
    student_head: str = "linear"  # "linear" or "teacher_copy"
    init: str = "teacher"  # "teacher" or "random"
    eval_batches: int = 2
    seed: int = 0

    @property
    def frontend_steps(self) -> int:
        if self.n_frontend is not None:
            return self.n_frontend
        return self.total_steps // 6 if self.student.frontend_kind == "fbank" else 0

    @property
    def warmup(self) -> int:
        return int(round(0.08 * self.total_steps)) if self.warmup_steps is None else self.warmup_steps

    def validate(self) -> None:
        if not self.total_steps > self.frontend_steps >= 0:
            raise ContractError(f"need total_steps > N >= 0, got total={self.total_steps}, N={self.frontend_steps}")
        if self.student_head not in ("linear", "teacher_copy"):
            raise ContractError(f"unknown student head {self.student_head!r}")
        if self.init not in ("teacher", "random"):
            raise ContractError(f"unknown init {self.init!r}")


@dataclass
class LossRecord:
    step: int
    phase: str
    loss: float
    reg_term: float | None = None
    disc_term: float | None = None


@dataclass
class DistillRun:
    student: Model
    head: object
    projections: dict[str, np.ndarray]
    state: TrainState
    log: list[LossRecord]
    eval_start: dict[str, float] | None = None
    eval_final: dict[str, float] | None = None

    def checkpoint(self) -> dict[str, np.ndarray]:
        """Deployable student: model and label head, no distillation projections."""
        out = self.student.to_tensors("model.")
        out.update(self.head.to_tensors("head."))
        return out

    def state_checkpoint(self) -> dict[str, np.ndarray]:
        out = self.checkpoint()
        out.update(checkpoint.prefixed(self.projections, "distill."))
        out.update(self.state.to_tensors("optim."))
        return out


def _needs_projection(structure: str, student_dim: int, teacher_dim: int) -> bool:
    return structure == "snw" or student_dim != teacher_dim


def init_projections(layer_map: LayerMap, structure: str, student_dim: int, teacher_dim: int,
                     rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    if not _needs_projection(structure, student_dim, teacher_dim):
        return out
    for k in range(len(layer_map)):
        out[f"proj{k}.weight"] = rng.normal(0.0, 0.02, size=(teacher_dim, student_dim))
        out[f"proj{k}.bias"] = np.zeros(teacher_dim)
    return out


def _projection_list(layer_map: LayerMap, proj: dict) -> list | None:
    if not proj:
        return None
    return [(proj[f"proj{k}.weight"], proj[f"proj{k}.bias"]) for k in range(len(layer_map))]


def _teacher_targets(teacher: Teacher, batch: Batch, need_probs: bool):
    fe, hiddens = teacher.forward(batch.audio)
    probs = teacher_label_distribution(hiddens[-1], teacher.head) if need_probs else None
    return fe, hiddens, probs


def distill_objective(cfg: DistillConfig, layer_map: LayerMap, student_cfg: ModelConfig, params, head, proj,
                      batch: Batch, targets, rng=None, train: bool = False):
    """Returns ``(total, weighted_reg, weighted_disc)`` for one batch."""
    _, t_hiddens, p_t = targets
    fe = frontend_forward(student_cfg, params, model_input(student_cfg, batch))
    out = encode(fe, params, student_cfg, rng=rng, train=train)
    s_hiddens = out.hiddens
    T = min(s_hiddens[0].shape[1], t_hiddens[0].shape[1])
    align_lengths(s_hiddens[0], t_hiddens[0])
    s_h = [h[:, :T] for h in s_hiddens]
    t_h = [h[:, :T] for h in t_hiddens]
    reg = disc = None
    if cfg.weights.reg > 0:
        reg = regression_loss(t_h, s_h, layer_map, _projection_list(layer_map, proj)) * cfg.weights.reg
    if cfg.weights.disc > 0:
        p_s = student_label_distribution(s_h[-1], head)
        disc = discriminative_loss(p_t[:, :T], p_s, cfg.kl_direction) * cfg.weights.disc
    total = distill_loss(DistillWeights(1.0, 1.0), reg, disc)
    return total, reg, disc


def frontend_objective(cfg: DistillConfig, student_cfg: ModelConfig, params, batch: Batch, teacher_fe) -> Tensor:
    fe_s = frontend_forward(student_cfg, params, model_input(student_cfg, batch))
    fe_t, fe_s = align_lengths(teacher_fe, fe_s)
    return frontend_loss(fe_t, fe_s, cfg.frontend_loss)


def distill(teacher: Teacher, cfg: DistillConfig, corpus: Corpus, resume: dict[str, np.ndarray] | None = None,
            stop_after: int | None = None) -> DistillRun:
    """Two-stage distillation of a frozen teacher into a student.

    Steps ``1..N`` train only the student front-end on the front-end loss;
    steps ``N+1..total`` train every student tensor (plus label head and
    projections) on the weighted regression + discriminative loss.
    ``stop_after`` ends the run early; ``resume`` continues from
    :meth:`DistillRun.state_checkpoint`.
    """
    cfg.validate()
    s_cfg, t_cfg = cfg.student, teacher.model.config
    layer_map = cfg.layer_map or LayerMap.for_structure(s_cfg.structure, s_cfg.n_layers, t_cfg.n_layers)
    layer_map.validate(s_cfg.n_layers, t_cfg.n_layers)
    if s_cfg.frontend_kind == "fbank" and s_cfg.feature_dim != t_cfg.feature_dim:
        raise ContractError("Fbank front-end width must equal the teacher front-end width")
    N = cfg.frontend_steps
    n_mels = s_cfg.n_mels if s_cfg.frontend_kind == "fbank" else None

    if resume is None:
        rng = np.random.default_rng(cfg.seed)
        if cfg.init == "teacher":
            student = init_student_from_teacher(teacher.model, s_cfg, rng)
        else:
            student = Model.random(s_cfg, rng)
        if cfg.student_head == "teacher_copy":
            if s_cfg.d_model != t_cfg.d_model:
                raise ContractError("teacher_copy head needs equal model widths")
            head = TeacherOutputHead(teacher.head.proj.copy(), teacher.head.label_emb.copy(),
                                     teacher.head.temperature)
        else:
            head = StudentOutputHead.random(s_cfg.d_model, t_cfg.vocab, rng)
        proj = init_projections(layer_map, s_cfg.structure, s_cfg.d_model, t_cfg.d_model, rng)
        state = TrainState(rng=rng)
    else:
        student = Model.from_tensors(resume, "model.")
        head = head_from_tensors(resume, "head.")
        proj = checkpoint.subset(resume, "distill.")
        state = TrainState.from_tensors(resume, "optim.")
        rng = state.rng
    head_params = {k: np.array(v, dtype=np.float64) for k, v in head.params().items()}

    eval_rng = np.random.default_rng(cfg.seed + 7919)
    eval_set = []
    for _ in range(cfg.eval_batches):
        b = sample_batch(corpus, eval_rng, cfg.batch_size, cfg.crop_frames, n_mels=n_mels)
        eval_set.append((b, _teacher_targets(teacher, b, cfg.weights.disc > 0)))

    def evaluate() -> dict[str, float]:
        tot = reg = disc = 0.0
        for b, targets in eval_set:
            t, r, d = distill_objective(cfg, layer_map, s_cfg, student.params, head.bind(head_params), proj,
                                        b, targets)
            tot += t.item()
            reg += r.item() if r is not None else 0.0
            disc += d.item() if d is not None else 0.0
        n = len(eval_set)
        return {"loss": tot / n, "reg_term": reg / n, "disc_term": disc / n}

    run = DistillRun(student, head, proj, state, [])
    frontend_names = [n for n in student.params if n.startswith("frontend.")]
    last = cfg.total_steps if stop_after is None else min(stop_after, cfg.total_steps)
    if state.step == N:
        run.eval_start = evaluate()
    for step in range(state.step + 1, last + 1):
        phase = loss_schedule(step, N)
        batch = sample_batch(corpus, rng, cfg.batch_size, cfg.crop_frames, n_mels=n_mels)
        targets = _teacher_targets(teacher, batch, cfg.weights.disc > 0 and phase == "distill")
        # each stage warms up from its own start: phase 2 brings fresh Adam moments for most parameters
        lr = warmup_lr(step if phase == "frontend" else step - N, cfg.lr, cfg.warmup)
        tape = Tape()
        try:
            if phase == "frontend":
                params = tape.watch_all(student.params, frontend_names)
                loss = frontend_objective(cfg, s_cfg, params, batch, targets[0])
                grads = backward(tape, loss)
                adam_step(student.params, {n: grads[n] for n in frontend_names}, state, lr)
                record = LossRecord(step, phase, loss.item())
            else:
                params = tape.watch_all(student.params)
                hp = {k: tape.watch("head." + k, v) for k, v in head_params.items()}
                pp = {k: tape.watch("distill." + k, v) for k, v in proj.items()}
                loss, reg, disc = distill_objective(cfg, layer_map, s_cfg, params, head.bind(hp), pp, batch,
                                                    targets, rng=rng, train=True)
                grads = backward(tape, loss)
                adam_step(student.params, {n: grads[n] for n in student.params}, state, lr)
                adam_step(head_params, {k: grads["head." + k] for k in head_params}, state, lr)
                adam_step(proj, {k: grads["distill." + k] for k in proj}, state, lr)
                record = LossRecord(step, phase, loss.item(), None if reg is None else reg.item(),
                                    None if disc is None else disc.item())
        except NumericError as e:
            raise NumericError(f"distillation diverged at step {step} ({phase} phase): {e}") from e
        state.step = step
        run.log.append(record)
        if step == N:
            run.eval_start = evaluate()
        if step % 100 == 0:
            log.info("distill step %d %s loss %.4f", step, phase, record.loss)
    run.head = head.bind(head_params)
    if state.step == cfg.total_steps:
        run.eval_final = evaluate()
    return run


def write_loss_log(path, records: list[LossRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "phase", "loss", "λ_reg_term", "λ_disc_term"])
        for r in records:
            w.writerow([r.step, r.phase, repr(r.loss),
                        "" if r.reg_term is None else repr(r.reg_term),
                        "" if r.disc_term is None else repr(r.disc_term)])


def read_loss_log(path) -> list[LossRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(LossRecord(int(row["step"]), row["phase"], float(row["loss"]),
                                  float(row["λ_reg_term"]) if row["λ_reg_term"] else None,
                                  float(row["λ_disc_term"]) if row["λ_disc_term"] else None))
    return out
