"""Objectives for masked-prediction pretraining and teacher-student distillation.

All losses take tensors (or arrays, treated as constants) and return scalar
tensors, so the same code serves training and gradient checks.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .autodiff import Tensor, ops
from .errors import AlignmentError, ContractError, ShapeError

PROB_FLOOR = 1e-12
DEFAULT_TEMPERATURE = 0.1


@dataclass
class TeacherOutputHead:
    """Cosine-similarity label head: projection [d_emb, d_model], label embeddings [C, d_emb]."""

    proj: Any
    label_emb: Any
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if not self.temperature > 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")

    @property
    def vocab(self) -> int:
        return self.label_emb.shape[0]

    @classmethod
    def random(cls, d_model: int, vocab: int, d_emb: int, rng: np.random.Generator,
               temperature: float = DEFAULT_TEMPERATURE) -> TeacherOutputHead:
        return cls(rng.normal(0.0, 0.02, size=(d_emb, d_model)), rng.normal(0.0, 1.0, size=(vocab, d_emb)),
                   temperature)

    def params(self) -> dict[str, Any]:
        return {"proj": self.proj, "label_emb": self.label_emb}

    def bind(self, params: dict[str, Any]) -> TeacherOutputHead:
        return TeacherOutputHead(params["proj"], params["label_emb"], self.temperature)

    def to_tensors(self, prefix: str = "head.") -> dict[str, np.ndarray]:
        return {prefix + "proj": np.asarray(_data(self.proj)), prefix + "label_emb": np.asarray(_data(self.label_emb)),
                prefix + "temperature": np.array(self.temperature)}

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], prefix: str = "head.") -> TeacherOutputHead:
        return cls(tensors[prefix + "proj"], tensors[prefix + "label_emb"], float(tensors[prefix + "temperature"]))


@dataclass
class StudentOutputHead:
    """Linear label head: weight [C, d_model], bias [C]."""

    weight: Any
    bias: Any

    @property
    def vocab(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def random(cls, d_model: int, vocab: int, rng: np.random.Generator) -> StudentOutputHead:
        return cls(rng.normal(0.0, 0.02, size=(vocab, d_model)), np.zeros(vocab))

    def params(self) -> dict[str, Any]:
        return {"weight": self.weight, "bias": self.bias}

    def bind(self, params: dict[str, Any]) -> StudentOutputHead:
        return StudentOutputHead(params["weight"], params["bias"])

    def to_tensors(self, prefix: str = "head.") -> dict[str, np.ndarray]:
        return {prefix + "weight": np.asarray(_data(self.weight)), prefix + "bias": np.asarray(_data(self.bias))}

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], prefix: str = "head.") -> StudentOutputHead:
        return cls(tensors[prefix + "weight"], tensors[prefix + "bias"])


def head_from_tensors(tensors: dict[str, np.ndarray], prefix: str = "head."):
    if prefix + "label_emb" in tensors:
        return TeacherOutputHead.from_tensors(tensors, prefix)
    return StudentOutputHead.from_tensors(tensors, prefix)


def _data(x):
    return x.data if isinstance(x, Tensor) else x


@dataclass(frozen=True)
class DistillWeights:
    reg: float = 1.0
    disc: float = 1.0

    def __post_init__(self):
        if self.reg < 0 or self.disc < 0:
            raise ContractError("loss weights must be non-negative")
        if self.reg == 0 and self.disc == 0:
            raise ContractError("at least one of the regression/discriminative weights must be positive")


@dataclass(frozen=True)
class LayerMap:
    """Ordered (student hidden index, teacher hidden index) pairs.

    Index 0 is the encoder input, index i the output of transformer layer i.
    """

    pairs: tuple[tuple[int, int], ...]

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @classmethod
    def layer_to_layer(cls, student_layers: int, teacher_layers: int | None = None) -> LayerMap:
        teacher_layers = student_layers if teacher_layers is None else teacher_layers
        return cls(tuple((i, round(i * teacher_layers / student_layers)) for i in range(1, student_layers + 1)))

    @classmethod
    def prediction_heads(cls, student_layers: int, teacher_layers: int, n_heads: int = 3) -> LayerMap:
        """Heads on the last student layer, each predicting an evenly spaced teacher layer (4, 8, 12 for 12)."""
        targets = sorted({max(1, round(k * teacher_layers / n_heads)) for k in range(1, n_heads + 1)})
        return cls(tuple((student_layers, t) for t in targets))

    @classmethod
    def for_structure(cls, structure: str, student_layers: int, teacher_layers: int) -> LayerMap:
        if structure == "snw":
            return cls.prediction_heads(student_layers, teacher_layers)
        return cls.layer_to_layer(student_layers, teacher_layers)

    def validate(self, student_layers: int, teacher_layers: int) -> None:
        for s, t in self.pairs:
            if not (0 <= s <= student_layers and 0 <= t <= teacher_layers):
                raise ContractError(f"layer map entry ({s}, {t}) outside student 0..{student_layers} "
                                    f"/ teacher 0..{teacher_layers}")

    def to_string(self) -> str:
        return ",".join(f"{s}:{t}" for s, t in self.pairs)

    @classmethod
    def parse(cls, text: str) -> LayerMap:
        pairs = []
        for item in text.split(","):
            s, t = item.split(":")
            pairs.append((int(s), int(t)))
        return cls(tuple(pairs))


# ---------------------------------------------------------------- label distributions

def teacher_logits(h_last, head: TeacherOutputHead) -> Tensor:
    """cos(W_e h, e_c) / tau for every label c; [..., T, C]."""
    emb = ops.l2_normalize(ops.linear(h_last, head.proj))
    labels = ops.l2_normalize(head.label_emb)
    return ops.clip(ops.linear(emb, labels), -1.0, 1.0) * (1.0 / head.temperature)


def teacher_label_distribution(h_last, head: TeacherOutputHead) -> Tensor:
    return ops.softmax(teacher_logits(h_last, head), axis=-1)


def student_label_distribution(h_last, head) -> Tensor:
    """Row-wise softmax of ``W_p h + b``; a :class:`TeacherOutputHead` is evaluated in its own form."""
    if isinstance(head, TeacherOutputHead):
        return teacher_label_distribution(h_last, head)
    h_last = ops.as_tensor(h_last)
    if head.weight.shape[1] != h_last.shape[-1]:
        raise ShapeError(f"student head expects width {head.weight.shape[1]}, got {h_last.shape}")
    return ops.softmax(ops.linear(h_last, head.weight, head.bias), axis=-1)


# ---------------------------------------------------------------- losses

def hubert_pretrain_loss(p, labels, mask) -> Tensor:
    """Mean negative log-probability of the pseudo-labels over masked frames."""
    p = ops.as_tensor(p)
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if labels.shape != p.shape[:-1] or mask.shape != labels.shape:
        raise ShapeError(f"labels {labels.shape} / mask {mask.shape} do not match probabilities {p.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ContractError("masked-prediction loss needs at least one masked frame")
    C = p.shape[-1]
    if labels.min() < 0 or labels.max() >= C:
        raise ContractError(f"labels outside [0, {C})")
    select = np.eye(C)[labels] * mask[..., None]
    return ops.sum(ops.log(p, floor=PROB_FLOOR) * select) * (-1.0 / n)


def regression_loss(teacher_hiddens: Sequence, student_hiddens: Sequence, layer_map: LayerMap,
                    projections: Sequence | None = None) -> Tensor:
    """Sum over map entries of mean L1 distance minus mean log-sigmoid cosine.

    ``projections[k]`` is ``(weight, bias)`` mapping the student tap of entry k
    into the teacher width, or ``None`` when widths already agree.
    """
    projections = [None] * len(layer_map) if projections is None else list(projections)
    if len(projections) != len(layer_map):
        raise ContractError(f"{len(projections)} projections for {len(layer_map)} map entries")
    total = None
    for (s, t), proj in zip(layer_map, projections):
        hs = ops.as_tensor(student_hiddens[s])
        ht = ops.as_tensor(teacher_hiddens[t])
        if proj is not None:
            hs = ops.linear(hs, proj[0], proj[1])
        if hs.shape[-1] != ht.shape[-1]:
            raise ContractError(f"map entry ({s}, {t}): student width {hs.shape[-1]} vs teacher "
                                f"{ht.shape[-1]} and no projection given")
        if hs.shape != ht.shape:
            raise ShapeError(f"map entry ({s}, {t}): {hs.shape} vs {ht.shape}")
        l1 = ops.mean(ops.abs(ht - hs))
        cos_term = ops.mean(ops.log_sigmoid(ops.cosine_similarity(ht, hs)))
        term = l1 - cos_term
        total = term if total is None else total + term
    if total is None:
        raise ContractError("empty layer map")
    return total


def discriminative_loss(p_t, p_s, direction: str = "teacher") -> Tensor:
    """Frame-averaged KL divergence; ``direction="teacher"`` is KL(p_t || p_s)."""
    p_t, p_s = ops.as_tensor(p_t), ops.as_tensor(p_s)
    if p_t.shape != p_s.shape:
        raise ShapeError(f"distributions differ in shape: {p_t.shape} vs {p_s.shape}")
    for name, p in (("teacher", p_t), ("student", p_s)):
        if np.max(np.abs(p.data.sum(axis=-1) - 1.0)) > 1e-6:
            raise ContractError(f"{name} rows are not probability distributions")
    if direction == "student":
        p_t, p_s = p_s, p_t
    elif direction != "teacher":
        raise ContractError(f"unknown KL direction {direction!r}")
    n_rows = int(np.prod(p_t.shape[:-1]))
    log_ratio = ops.log(p_t, floor=PROB_FLOOR) - ops.log(p_s, floor=PROB_FLOOR)
    return ops.sum(p_t * log_ratio) * (1.0 / n_rows)


def distill_loss(weights: DistillWeights, l_reg, l_disc) -> Tensor:
    total = None
    for w, term in ((weights.reg, l_reg), (weights.disc, l_disc)):
        if w == 0 or term is None:
            continue
        part = ops.as_tensor(term) * w
        total = part if total is None else total + part
    return total


def frontend_loss(teacher_feat, student_feat, kind: str = "l1") -> Tensor:
    """Mean elementwise L1 (default) or squared distance between aligned front-end outputs."""
    t, s = ops.as_tensor(teacher_feat), ops.as_tensor(student_feat)
    if t.shape != s.shape:
        raise AlignmentError(f"front-end outputs are not aligned: {t.shape} vs {s.shape}")
    diff = t - s
    if kind == "l1":
        return ops.mean(ops.abs(diff))
    if kind == "l2":
        return ops.mean(ops.square(diff))
    raise ContractError(f"unknown front-end loss {kind!r}")


def loss_schedule(step: int, n_frontend: int) -> str:
    """Phase for 1-based ``step``: 'frontend' for the first ``n_frontend`` steps, then 'distill'."""
    if step < 1 or n_frontend < 0:
        raise ContractError(f"need step >= 1 and N >= 0, got step={step}, N={n_frontend}")
    return "frontend" if step <= n_frontend else "distill"
