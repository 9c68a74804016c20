"""Run configuration files: ``key = value`` lines grouped into sections.

Sections used: ``[dataset]``, ``[teacher]``, ``[student]``, ``[distill]`` and
``[run]`` (the command line that produced a resolved config).
"""
from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .data import SyntheticDatasetSpec
from .encoder import ModelConfig
from .errors import ContractError
from .losses import DistillWeights, LayerMap
from .train import DistillConfig, TeacherTrainConfig

_TEACHER_TRAIN_KEYS = {f.name for f in dataclasses.fields(TeacherTrainConfig)}
_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}

DEFAULT_TEACHER = ModelConfig(frontend_kind="waveform", structure="custom", n_layers=4, d_model=64, d_ffn=256,
                              n_heads=4, conv_pos_kernel=128, conv_pos_groups=16, vocab=16, frontend_channels=32,
                              dropout=0.0)


def read_config(path) -> dict[str, dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(path.read_text())
    except configparser.Error as e:
        raise ContractError(f"cannot parse {path}: {e}") from e
    return {s: dict(parser[s]) for s in parser.sections()}


def write_config(path, sections: dict[str, dict]) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name, values in sections.items():
        parser[name] = {k: _fmt(v) for k, v in values.items() if v is not None}
    with open(path, "w") as fh:
        parser.write(fh)


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, LayerMap):
        return v.to_string()
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(float(x) for x in value.split(","))
    return value


def _check_keys(section: str, values: dict, known: set) -> None:
    unknown = set(values) - known
    if unknown:
        raise ContractError(f"unknown keys in [{section}]: {sorted(unknown)}")


def model_config(values: dict[str, str], base: ModelConfig) -> ModelConfig:
    fields = {k: v for k, v in values.items() if k in _MODEL_KEYS}
    try:
        return base.replace(**{k: _coerce(v, getattr(base, k)) for k, v in fields.items()})
    except ValueError as e:
        raise ContractError(f"invalid model config: {e}") from e


def dataset_spec(values: dict[str, str]) -> SyntheticDatasetSpec:
    base = SyntheticDatasetSpec()
    _check_keys("dataset", values, set(base.to_dict()))
    try:
        return dataclasses.replace(base, **{k: _coerce(v, getattr(base, k)) for k, v in values.items()})
    except ValueError as e:
        raise ContractError(f"invalid dataset spec: {e}") from e


def teacher_configs(values: dict[str, str]) -> tuple[ModelConfig, TeacherTrainConfig]:
    _check_keys("teacher", values, _MODEL_KEYS | _TEACHER_TRAIN_KEYS)
    model = model_config(values, DEFAULT_TEACHER)
    base = TeacherTrainConfig()
    train = {}
    for k, v in values.items():
        if k in _TEACHER_TRAIN_KEYS:
            train[k] = int(v) if k == "warmup_steps" else _coerce(v, getattr(base, k))
    try:
        return model, dataclasses.replace(base, **train)
    except ValueError as e:
        raise ContractError(f"invalid teacher config: {e}") from e


_DISTILL_KEYS = {"lambda_reg", "lambda_disc", "n_frontend", "total_steps", "batch_size", "crop_frames", "lr",
                 "warmup_steps", "layer_map", "frontend_loss", "kl_direction", "student_head", "init",
                 "eval_batches", "seed"}


def distill_config(student: dict[str, str], distill: dict[str, str], teacher: ModelConfig) -> DistillConfig:
    """Student config defaults to the teacher's shape; ``[distill]`` keys fill :class:`DistillConfig`."""
    _check_keys("student", student, _MODEL_KEYS)
    _check_keys("distill", distill, _DISTILL_KEYS)
    s_cfg = model_config(student, teacher)
    kw: dict = {"student": s_cfg}
    w = DistillWeights(float(distill.get("lambda_reg", 1.0)), float(distill.get("lambda_disc", 1.0)))
    kw["weights"] = w
    for k in ("n_frontend", "warmup_steps"):
        if distill.get(k, "") not in ("", "None", "auto"):
            kw[k] = int(distill[k])
    for k in ("total_steps", "batch_size", "crop_frames", "eval_batches", "seed"):
        if k in distill:
            kw[k] = int(distill[k])
    if "lr" in distill:
        kw["lr"] = float(distill["lr"])
    for k in ("frontend_loss", "kl_direction", "student_head", "init"):
        if k in distill:
            kw[k] = distill[k]
    if distill.get("layer_map", "") not in ("", "auto", "None"):
        kw["layer_map"] = LayerMap.parse(distill["layer_map"])
    cfg = DistillConfig(**kw)
    cfg.validate()
    return cfg


def model_section(cfg: ModelConfig) -> dict:
    return cfg.to_dict()


def teacher_section(model: ModelConfig, train: TeacherTrainConfig) -> dict:
    out = model.to_dict()
    out.update(dataclasses.asdict(train))
    return out


def distill_section(cfg: DistillConfig) -> dict:
    return {"lambda_reg": cfg.weights.reg, "lambda_disc": cfg.weights.disc, "n_frontend": cfg.frontend_steps,
            "total_steps": cfg.total_steps, "batch_size": cfg.batch_size, "crop_frames": cfg.crop_frames,
            "lr": cfg.lr, "warmup_steps": cfg.warmup, "layer_map": cfg.layer_map or "auto",
            "frontend_loss": cfg.frontend_loss, "kl_direction": cfg.kl_direction,
            "student_head": cfg.student_head, "init": cfg.init, "eval_batches": cfg.eval_batches, "seed": cfg.seed}
