"""Transformer encoder with span masking, parameter accounting and
teacher-to-student initialisation.

Parameter names are flat strings. Front-end tensors live under ``frontend.``
(see :mod:`sslkd.features`); everything else under ``encoder.``. Output heads
are kept outside the model parameter dict (see :mod:`sslkd.losses`).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import features
from .autodiff import Tensor, ops
from .errors import ContractError, ShapeError

FRONTEND_KINDS = ("waveform", "fbank", "none")
STRUCTURES = ("snw", "dnt", "custom")
_STRUCTURE_ALIASES = {"s&w": "snw", "sw": "snw", "snw": "snw", "d&t": "dnt", "dt": "dnt", "dnt": "dnt",
                      "custom": "custom"}
INIT_STD = 0.02


def canonical_structure(name: str) -> str:
    try:
        return _STRUCTURE_ALIASES[name.lower()]
    except KeyError:
        raise ContractError(f"unknown structure {name!r}") from None


@dataclass(frozen=True)
class ModelConfig:
    frontend_kind: str = "waveform"
    structure: str = "custom"
    n_layers: int = 12
    d_model: int = 768
    d_ffn: int = 3072
    n_heads: int = 12
    conv_pos_kernel: int = 128  # 0 disables the positional convolution
    conv_pos_groups: int = 16
    vocab: int = 100
    frontend_channels: int = 512
    n_mels: int = 80
    encoder_norm: bool = True
    mask_embedding: bool = True
    dropout: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "structure", canonical_structure(self.structure))
        if self.frontend_kind not in FRONTEND_KINDS:
            raise ContractError(f"frontend_kind must be one of {FRONTEND_KINDS}, got {self.frontend_kind!r}")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.conv_pos_kernel and self.d_model % self.conv_pos_groups:
            raise ContractError(f"d_model={self.d_model} not divisible by conv_pos_groups={self.conv_pos_groups}")
        if self.n_layers < 1 or self.vocab < 2:
            raise ContractError("need n_layers >= 1 and vocab >= 2")

    @property
    def feature_dim(self) -> int:
        """Width of the front-end output (the front-end distillation tap)."""
        return self.frontend_channels if self.frontend_kind != "none" else self.d_model

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "frontend_kind":
                v = FRONTEND_KINDS.index(v)
            elif f.name == "structure":
                v = STRUCTURES.index(v)
            out[f.name] = np.array(float(v))
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> ModelConfig:
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in tensors:
                continue
            v = float(tensors[f.name])
            if f.name == "frontend_kind":
                kwargs[f.name] = FRONTEND_KINDS[int(v)]
            elif f.name == "structure":
                kwargs[f.name] = STRUCTURES[int(v)]
            elif f.type in ("bool", bool):
                kwargs[f.name] = bool(v)
            elif f.type in ("float", float):
                kwargs[f.name] = v
            else:
                kwargs[f.name] = int(v)
        return cls(**kwargs)


# Reference student shapes (layers, width, ffn, heads) and their published sizes in millions.
TABLE1_DIMS = {"snw": (2, 768, 3072, 12), "dnt": (12, 480, 480, 12)}
REFERENCE_PARAMS_M = {("snw", "waveform"): 23.64, ("snw", "fbank"): 19.81,
                      ("dnt", "waveform"): 23.08, ("dnt", "fbank"): 19.25}


def table1_config(structure: str, frontend_kind: str = "waveform", vocab: int = 100) -> ModelConfig:
    structure = canonical_structure(structure)
    n_layers, d, f, h = TABLE1_DIMS[structure]
    return ModelConfig(frontend_kind=frontend_kind, structure=structure, n_layers=n_layers,
                       d_model=d, d_ffn=f, n_heads=h, vocab=vocab)


def hubert_base_config(vocab: int = 100) -> ModelConfig:
    return ModelConfig(frontend_kind="waveform", structure="custom", n_layers=12, d_model=768,
                       d_ffn=3072, n_heads=12, vocab=vocab)


# ---------------------------------------------------------------- parameters

def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d_model, config.d_ffn
    if config.frontend_kind == "waveform":
        shapes = features.waveform_frontend_shapes(config.frontend_channels)
    elif config.frontend_kind == "fbank":
        shapes = features.fbank_frontend_shapes(config.frontend_channels, config.n_mels)
    else:
        shapes = {}
    if config.frontend_kind != "none":
        c = config.frontend_channels
        shapes.update({"encoder.feature_norm.weight": (c,), "encoder.feature_norm.bias": (c,),
                       "encoder.proj.weight": (d, c), "encoder.proj.bias": (d,)})
    if config.mask_embedding:
        shapes["encoder.mask_emb"] = (d,)
    if config.conv_pos_kernel:
        shapes["encoder.pos_conv.weight"] = (d, d // config.conv_pos_groups, config.conv_pos_kernel)
        shapes["encoder.pos_conv.bias"] = (d,)
    if config.encoder_norm:
        shapes["encoder.norm.weight"] = (d,)
        shapes["encoder.norm.bias"] = (d,)
    for i in range(config.n_layers):
        p = f"encoder.layers.{i}."
        for norm in ("attn_norm", "ffn_norm"):
            shapes[p + norm + ".weight"] = (d,)
            shapes[p + norm + ".bias"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.{proj}.weight"] = (d, d)
            shapes[p + f"attn.{proj}.bias"] = (d,)
        shapes[p + "ffn.in.weight"] = (f, d)
        shapes[p + "ffn.in.bias"] = (f,)
        shapes[p + "ffn.out.weight"] = (d, f)
        shapes[p + "ffn.out.bias"] = (d,)
    return shapes


def count_params(config: ModelConfig) -> int:
    """Exact deployable parameter total, computed in closed form."""
    d, f, L = config.d_model, config.d_ffn, config.n_layers
    total = 0
    if config.frontend_kind == "waveform":
        c, c_in = config.frontend_channels, 1
        for k in features.WAVEFORM_KERNELS:
            total += c * c_in * k
            c_in = c
        total += 2 * c
    elif config.frontend_kind == "fbank":
        total += config.frontend_channels * config.n_mels * features.FBANK_KERNEL
    if config.frontend_kind != "none":
        total += 2 * config.frontend_channels + config.frontend_channels * d + d
    if config.mask_embedding:
        total += d
    if config.conv_pos_kernel:
        total += d * (d // config.conv_pos_groups) * config.conv_pos_kernel + d
    if config.encoder_norm:
        total += 2 * d
    per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
    return total + L * per_layer


def _is_bias_like(name: str) -> bool:
    return name.endswith(".bias")


def init_encoder_param(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    if name.endswith("norm.weight"):
        return np.ones(shape)
    if _is_bias_like(name):
        return np.zeros(shape)
    return rng.normal(0.0, INIT_STD, size=shape)


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Random parameters: normal(0, 0.02) weights, zero biases, unit norm scales.

    Front-end convolutions use He-normal scaling (see :func:`features.init_frontend`).
    """
    params = {}
    if config.frontend_kind != "none":
        params.update(features.init_frontend(config.frontend_kind, rng, config.frontend_channels, config.n_mels))
    for name, shape in param_shapes(config).items():
        if not name.startswith("frontend."):
            params[name] = init_encoder_param(name, shape, rng)
    return params


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def random(cls, config: ModelConfig, seed_or_rng=0) -> Model:
        rng = np.random.default_rng(seed_or_rng) if not isinstance(seed_or_rng, np.random.Generator) else seed_or_rng
        return cls(config, init_params(config, rng))

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> Model:
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def to_tensors(self, prefix: str = "model.") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self.params.items()}
        out.update({prefix + "config." + k: v for k, v in self.config.to_tensors().items()})
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], prefix: str = "model.") -> Model:
        cfg = ModelConfig.from_tensors({k[len(prefix) + 7:]: v for k, v in tensors.items()
                                        if k.startswith(prefix + "config.")})
        params = {k[len(prefix):]: v for k, v in tensors.items()
                  if k.startswith(prefix) and not k.startswith(prefix + "config.")}
        missing = set(param_shapes(cfg)) - set(params)
        if missing:
            raise ContractError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        return cls(cfg, params)


# ---------------------------------------------------------------- masking

@dataclass(frozen=True)
class MaskSpec:
    prob: float = 0.08
    length: int = 10
    seed: int = 0


def span_mask(T: int, prob: float, length: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean [T]: each frame starts a span of ``length`` frames with probability ``prob``."""
    starts = rng.random(T) < prob
    if length <= 0:
        return np.zeros(T, dtype=bool)
    covered = np.convolve(starts.astype(np.int64), np.ones(length, dtype=np.int64))[:T]
    return covered > 0


def apply_span_mask(x, spec: MaskSpec, mask_emb=None, rng: np.random.Generator | None = None):
    """Replace spans of frames with ``mask_emb`` (zeros if absent).

    ``x`` is [T, d] or [B, T, d]; returns the masked tensor and a boolean mask
    of shape [T] or [B, T].
    """
    x = ops.as_tensor(x)
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    if x.ndim == 2:
        M = span_mask(x.shape[0], spec.prob, spec.length, rng)
    else:
        M = np.stack([span_mask(x.shape[1], spec.prob, spec.length, rng) for _ in range(x.shape[0])])
    m = M[..., None].astype(np.float64)
    emb = np.zeros(x.shape[-1]) if mask_emb is None else mask_emb
    return x * (1.0 - m) + ops.mul(emb, m), M


# ---------------------------------------------------------------- forward

@dataclass
class EncoderOutput:
    hiddens: list[Tensor]  # encoder input followed by each layer's output
    mask: np.ndarray | None = None

    @property
    def last(self) -> Tensor:
        return self.hiddens[-1]


def _attention(h: Tensor, p: dict, prefix: str, n_heads: int) -> Tensor:
    B, T, d = h.shape
    dh = d // n_heads

    def heads(name):
        y = ops.linear(h, p[prefix + name + ".weight"], p[prefix + name + ".bias"])
        return ops.transpose(ops.reshape(y, (B, T, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = ops.matmul(q, ops.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    ctx = ops.matmul(ops.softmax(scores, axis=-1), v)
    ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (B, T, d))
    return ops.linear(ctx, p[prefix + "o.weight"], p[prefix + "o.bias"])


def positional_conv(x: Tensor, p: dict, config: ModelConfig) -> Tensor:
    """Grouped 'same' convolution over time followed by GELU; [B, T, d] -> [B, T, d]."""
    K = config.conv_pos_kernel
    xt = ops.pad_last(ops.swapaxes(x, 1, 2), K // 2, K // 2)
    y = ops.conv1d(xt, p["encoder.pos_conv.weight"], stride=1, groups=config.conv_pos_groups)
    if K % 2 == 0:
        y = y[..., :-1]
    y = ops.gelu(y + ops.reshape(p["encoder.pos_conv.bias"], (-1, 1)))
    return ops.swapaxes(y, 1, 2)


def encode(features_in, params: dict, config: ModelConfig, mask: MaskSpec | None = None,
           rng: np.random.Generator | None = None, train: bool = False) -> EncoderOutput:
    """Run the encoder on front-end output.

    ``features_in`` is [T, F] or [B, T, F] with F the front-end width (or d_model
    for ``frontend_kind="none"``). Returns ``n_layers + 1`` hidden states.
    ``rng`` drives the span mask and, when ``train`` is set, dropout.
    """
    x = ops.as_tensor(features_in)
    unbatched = x.ndim == 2
    if unbatched:
        x = ops.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[-1] != config.feature_dim:
        raise ShapeError(f"encoder expects [..., T, {config.feature_dim}] input, got {x.shape}")
    if config.frontend_kind != "none":
        x = ops.layer_norm(x, params["encoder.feature_norm.weight"], params["encoder.feature_norm.bias"])
        x = ops.linear(x, params["encoder.proj.weight"], params["encoder.proj.bias"])
    M = None
    if mask is not None:
        emb = params["encoder.mask_emb"] if config.mask_embedding else None
        x, M = apply_span_mask(x, mask, emb, rng)
    if config.conv_pos_kernel:
        x = x + positional_conv(x, params, config)
    if config.encoder_norm:
        x = ops.layer_norm(x, params["encoder.norm.weight"], params["encoder.norm.bias"])
    drop_rng = rng if train else None
    hiddens = [x]
    for i in range(config.n_layers):
        pre = f"encoder.layers.{i}."
        h = ops.layer_norm(x, params[pre + "attn_norm.weight"], params[pre + "attn_norm.bias"])
        x = x + ops.dropout(_attention(h, params, pre + "attn.", config.n_heads), config.dropout, drop_rng)
        h = ops.layer_norm(x, params[pre + "ffn_norm.weight"], params[pre + "ffn_norm.bias"])
        h = ops.gelu(ops.linear(h, params[pre + "ffn.in.weight"], params[pre + "ffn.in.bias"]))
        h = ops.linear(h, params[pre + "ffn.out.weight"], params[pre + "ffn.out.bias"])
        x = x + ops.dropout(h, config.dropout, drop_rng)
        hiddens.append(x)
    if unbatched:
        hiddens = [h[0] for h in hiddens]
        M = None if M is None else M[0]
    return EncoderOutput(hiddens, M)


def frontend_input(config: ModelConfig, audio: np.ndarray) -> np.ndarray:
    """Raw input for the model's front-end from [S] or [B, S] samples."""
    if config.frontend_kind == "waveform":
        return np.asarray(audio, dtype=np.float64)
    if config.frontend_kind == "fbank":
        audio = np.asarray(audio, dtype=np.float64)
        if audio.ndim == 1:
            return features.fbank_input(audio, config.n_mels)
        return np.stack([features.fbank_input(a, config.n_mels) for a in audio])
    raise ContractError("model has no front-end")


def frontend_forward(config: ModelConfig, params: dict, inputs) -> Tensor:
    if config.frontend_kind == "waveform":
        return features.waveform_frontend_forward(inputs, params)
    if config.frontend_kind == "fbank":
        return features.fbank_frontend_forward(inputs, params)
    return ops.as_tensor(inputs)


def forward(model: Model, audio, params=None, mask: MaskSpec | None = None, rng=None, train: bool = False):
    """Front-end plus encoder on raw audio; returns ``(frontend_out, EncoderOutput)``."""
    params = model.params if params is None else params
    fe = frontend_forward(model.config, params, frontend_input(model.config, audio))
    return fe, encode(fe, params, model.config, mask, rng, train)


# ---------------------------------------------------------------- student initialisation

def _copy_into(dst: dict, src: dict, names) -> None:
    for name in names:
        if name not in src:
            raise ContractError(f"teacher has no parameter {name!r} to copy")
        if src[name].shape != dst[name].shape:
            raise ContractError(f"cannot copy {name!r}: teacher {src[name].shape} vs student {dst[name].shape}")
        dst[name] = src[name].copy()


def init_student_from_teacher(teacher: Model, student_config: ModelConfig, rng: np.random.Generator) -> Model:
    """Initialise a student from a trained teacher.

    * Waveform students copy the teacher front-end; Fbank front-ends stay random.
    * ``snw`` copies feature norm, projection, positional conv, input norm,
      mask embedding and the first ``n_layers`` transformer layers.
    * ``dnt`` keeps a random transformer.
    * ``custom`` copies every encoder tensor (identical encoder shapes required).
    """
    student = Model.random(student_config, rng)
    tp, sp = teacher.params, student.params
    if student_config.frontend_kind == "waveform":
        if teacher.config.frontend_kind != "waveform":
            raise ContractError("waveform student needs a waveform teacher front-end")
        _copy_into(sp, tp, [n for n in sp if n.startswith("frontend.")])
    encoder_names = [n for n in sp if n.startswith("encoder.")]
    if student_config.structure == "snw":
        if student_config.n_layers > teacher.config.n_layers:
            raise ContractError("student has more layers than the teacher")
        _copy_into(sp, tp, encoder_names)
    elif student_config.structure == "custom":
        _copy_into(sp, tp, encoder_names)
    return student
