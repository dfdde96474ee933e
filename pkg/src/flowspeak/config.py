"""Experiment configuration: schema, presets, overrides and seed fan-out."""

from __future__ import annotations

import copy
import json
import re
import zlib
from importlib import resources
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .audio import MelConfig
from .model import ModelConfig
from .speaker import SpeakerTrainConfig
from .train import TrainConfig

PRESETS = ("desk-toy", "paper-vctk", "paper-11spk")
SUB_SEEDS = ("data", "init", "noise")


class ConfigError(ValueError):
    """Schema or override failure; ``pointer`` is a JSON pointer into the document."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MelSection(_Section):
    sample_rate: int = 22050
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None

    def build(self) -> MelConfig:
        return MelConfig(**self.model_dump())


class FrontendSection(_Section):
    tts: MelSection = MelSection()
    speaker: MelSection = MelSection(sample_rate=16000)
    trim_silence: bool = True


class TextSection(_Section):
    language: str = "en-us"
    phonemizer_command: str | None = None
    fallback: bool = True
    add_blank: bool = True


class EncoderSection(_Section):
    variant: Literal["trans", "res", "gated"] = "trans"
    channels: int = Field(192, ge=1)
    blocks: int | None = Field(None, ge=1)
    dropout: float = Field(0.1, ge=0, lt=1)
    heads: int = Field(2, ge=1)
    filter_channels: int = Field(768, ge=1)


class ModelSection(_Section):
    spk_dim: int = Field(256, ge=1)
    dp_filter: int = Field(256, ge=1)
    dp_dropout: float = Field(0.1, ge=0, lt=1)
    flow_blocks: int = Field(12, ge=1)
    flow_hidden: int = Field(192, ge=1)
    flow_kernel: int = Field(5, ge=1)
    flow_layers: int = Field(4, ge=1)
    flow_dropout: float = Field(0.05, ge=0, lt=1)
    flow_lu: bool = False
    max_text_len: int = Field(1024, ge=1)


class TrainSection(_Section):
    batch_size: int = Field(8, ge=1)
    base_lr: float = Field(1e-3, gt=0)
    warmup_steps: int = Field(400, ge=1)
    max_steps: int = Field(2000, ge=0)
    precision: Literal["float32", "float64"] = "float32"
    grad_clip: float = Field(5.0, ge=0)
    checkpoint_every: int = Field(500, ge=0)
    validate_every: int = Field(500, ge=0)
    keep_checkpoints: int = Field(3, ge=0)
    fine_tune_from: str | None = None


class SpeakerEncoderSection(_Section):
    speakers_per_batch: int = Field(64, ge=2)
    utterances_per_speaker: int = Field(10, ge=2)
    crop_frames: int = Field(160, ge=1)
    lr: float = Field(1e-4, gt=0)
    max_steps: int = Field(320000, ge=0)
    hidden: int = Field(768, ge=1)
    n_layers: int = Field(3, ge=1)
    embed_dim: int = Field(256, ge=1)
    min_frames: int = Field(40, ge=1)
    checkpoint_every: int = Field(10000, ge=0)


class SynthesisSection(_Section):
    noise_scale: float = Field(0.333, ge=0)
    length_scale: float = Field(1.0, gt=0)
    vocoder: Literal["griffin_lim", "external"] = "griffin_lim"
    griffin_lim_iterations: int = Field(60, ge=1)
    vocoder_command: str | None = None
    vocoder_timeout: float = Field(60.0, gt=0)
    gta_noise_scale: float = Field(0.333, ge=0)


class EvalSection(_Section):
    protocol: str | None = None
    per_speaker: int = Field(5, ge=1)
    longer_than_words: int = Field(0, ge=0)
    rtf_repeats: int = Field(10, ge=1)
    rtf_warmup: int = Field(3, ge=0)


class PathsSection(_Section):
    run_dir: str = "runs/default"
    manifest: str | None = None
    speaker_manifest: str | None = None
    speaker_encoder: str | None = None
    checkpoint: str | None = None


class ExperimentConfig(_Section):
    name: str = "experiment"
    seed: int = 0
    frontend: FrontendSection = FrontendSection()
    text: TextSection = TextSection()
    encoder: EncoderSection = EncoderSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    speaker_encoder: SpeakerEncoderSection = SpeakerEncoderSection()
    synthesis: SynthesisSection = SynthesisSection()
    eval: EvalSection = EvalSection()
    paths: PathsSection = PathsSection()

    @model_validator(mode="after")
    def _consistent(self):
        if self.speaker_encoder.embed_dim != self.model.spk_dim:
            raise ValueError(
                f"speaker_encoder.embed_dim ({self.speaker_encoder.embed_dim}) must equal "
                f"model.spk_dim ({self.model.spk_dim})"
            )
        if self.synthesis.vocoder == "external" and not self.synthesis.vocoder_command:
            raise ValueError("synthesis.vocoder_command is required for the external vocoder")
        return self

    def seeds(self) -> dict[str, int]:
        return sub_seeds(self.seed)

    def build_model_config(self, n_vocab: int) -> ModelConfig:
        e, m = self.encoder, self.model
        return ModelConfig(
            n_vocab=n_vocab, n_mels=self.frontend.tts.n_mels, spk_dim=m.spk_dim,
            encoder_variant=e.variant, encoder_channels=e.channels, encoder_blocks=e.blocks,
            encoder_dropout=e.dropout, transformer_heads=e.heads, transformer_filter=e.filter_channels,
            dp_filter=m.dp_filter, dp_dropout=m.dp_dropout, flow_blocks=m.flow_blocks,
            flow_hidden=m.flow_hidden, flow_kernel=m.flow_kernel, flow_layers=m.flow_layers,
            flow_dropout=m.flow_dropout, flow_lu=m.flow_lu, max_text_len=m.max_text_len,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(encoder_variant=self.encoder.variant, seed=self.seeds()["data"],
                           **self.train.model_dump())

    def speaker_train_config(self) -> SpeakerTrainConfig:
        s = self.speaker_encoder
        return SpeakerTrainConfig(n_mels=self.frontend.speaker.n_mels, seed=self.seeds()["init"],
                                  **s.model_dump())

    def resolved(self) -> dict:
        """Full dump including derived sub-seeds; feeding it back reproduces the run."""
        return {**self.model_dump(mode="json"), "resolved_seeds": self.seeds()}


def sub_seeds(root: int) -> dict[str, int]:
    """Independent named seeds derived from one root seed."""
    return {
        name: int(np.random.SeedSequence([root, zlib.crc32(name.encode())]).generate_state(1)[0])
        for name in SUB_SEEDS
    }


_COMMENT_RE = re.compile(r'("(?:\\.|[^"\\])*")|//[^\n]*|/\*.*?\*/', re.S)


def strip_comments(text: str) -> str:
    """Remove ``//`` and ``/* */`` comments outside JSON strings."""
    return _COMMENT_RE.sub(lambda m: m.group(1) or "", text)


def parse_json(text: str, source: str = "<config>") -> dict:
    try:
        doc = json.loads(strip_comments(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON at line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be an object")
    return doc


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {list(PRESETS)}")
    return resources.files("flowspeak.presets").joinpath(f"{name}.json").read_text()


def load_document(source: str | Path | None) -> dict:
    """Raw document from a file path or a preset name (``None`` gives defaults)."""
    if source is None:
        return {}
    path = Path(source)
    if path.is_file():
        return parse_json(path.read_text(), str(path))
    if str(source) in PRESETS:
        return parse_json(preset_text(str(source)), str(source))
    raise ConfigError(f"config {source!r} is neither a file nor a preset ({', '.join(PRESETS)})")


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(doc: dict, overrides: list[str] | tuple[str, ...]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as JSON, else kept as strings."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigError(f"override {item!r} has an empty key")
        node = doc
        for i, part in enumerate(parts[:-1]):
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError("cannot descend into a scalar", "/" + "/".join(parts[: i + 1]))
            node = child
        node[parts[-1]] = _parse_value(raw)
    return doc


def _pointer(loc) -> str:
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in loc)


def validate(doc: dict) -> ExperimentConfig:
    doc = {k: v for k, v in doc.items() if k != "resolved_seeds"}
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(err["msg"], _pointer(err["loc"])) from exc


def load_config(source=None, overrides=()) -> ExperimentConfig:
    return validate(apply_overrides(load_document(source), list(overrides)))


def write_resolved(cfg: ExperimentConfig, run_dir) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "resolved_config.json"
    path.write_text(json.dumps(cfg.resolved(), indent=1))
    return path
