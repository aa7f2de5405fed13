"""Experiment configuration: a strict JSON schema checked before any run."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .dataset import FAMILY_VARIANT, Dataset
from .encoders import FemP1Decoder, FourierDecoder, LearnedBasis, SensorEncoder
from .errors import ConfigError
from .grids import periodic_grid, uniform_grid
from .node import NodeVariant
from .training import TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Grids(_Strict):
    N_x: int = Field(gt=0)
    N_t: int = Field(gt=0)
    d_V: int = Field(gt=0)
    d_U: int = Field(gt=0)


class NodeSection(_Strict):
    variant: Optional[Literal["source", "diffusion", "multi", "full", "ns"]] = None
    P: int = Field(gt=0)
    n: int = Field(default=1, ge=0)
    activation: Literal["relu", "tanh"] = "relu"
    poly_constant: bool = False


class DecoderSection(_Strict):
    kind: Literal["learned", "fourier", "fem_p1"] = "learned"
    hidden: list[int] = [100, 100]
    activation: Literal["relu", "tanh"] = "relu"


class TrainSection(_Strict):
    epochs: int = Field(ge=0)
    learning_rate: float = Field(default=1e-3, gt=0)
    batch_size: Optional[int] = Field(default=None, gt=0)
    lam: float = Field(default=0.0, ge=0)
    reg_kind: Literal["none", "l1"] = "none"
    freeze_decoder: bool = False
    finetune_epochs: int = Field(default=0, ge=0)
    history_every: int = Field(default=100, gt=0)


class ExperimentConfig(_Strict):
    """Problem family, grid sizes, NODE variant, decoder, optimizer and seed.

    ``decoder_from`` names a checkpoint whose basis-network parameters
    replace the fresh ones (decoder transfer, usually with
    ``train.freeze_decoder``).
    """

    problem: Literal["dr-source", "dr-diffusion", "dr-multi", "ns-initial", "ns-source", "ns-multi"]
    grids: Grids
    node: NodeSection
    decoder: DecoderSection = DecoderSection()
    train: TrainSection
    seed: int = 0
    decoder_from: Optional[str] = None

    @model_validator(mode="after")
    def _consistent(self):
        fam_variant = FAMILY_VARIANT[self.problem]
        variant = self.node.variant or fam_variant
        if variant == "ns" and fam_variant != "ns" or variant != "ns" and fam_variant == "ns":
            raise ValueError(f"variant {variant!r} cannot model problem {self.problem!r}")
        if self.is_2d:
            m = int(round(np.sqrt(self.grids.d_V)))
            if m * m != self.grids.d_V:
                raise ValueError(f"2D d_V must be a square number of sensors, got {self.grids.d_V}")
            if self.decoder.kind == "fourier":
                raise ValueError("the Fourier decoder is only available in 1D")
        if self.decoder.kind == "fem_p1" and self.is_2d:
            m = int(round(np.sqrt(self.grids.d_U)))
            if m * m != self.grids.d_U:
                raise ValueError("2D fem_p1 decoder needs d_U to be a square number")
        return self

    @property
    def is_2d(self) -> bool:
        return self.problem.startswith("ns")

    @property
    def variant_kind(self) -> str:
        return self.node.variant or FAMILY_VARIANT[self.problem]

    def variant(self) -> NodeVariant:
        return NodeVariant(
            self.variant_kind,
            P=self.node.P,
            d_U=self.grids.d_U,
            d_V=self.grids.d_V,
            n=self.node.n,
            activation=self.node.activation,
            poly_constant=self.node.poly_constant,
        )

    def decoder_obj(self):
        d_U, dim = self.grids.d_U, 2 if self.is_2d else 1
        if self.decoder.kind == "learned":
            return LearnedBasis(d_U, tuple(self.decoder.hidden), self.decoder.activation, dim=dim)
        if self.decoder.kind == "fourier":
            return FourierDecoder(d_U)
        if dim == 1:
            return FemP1Decoder(uniform_grid(d_U))
        ax = periodic_grid(int(round(np.sqrt(d_U))))
        return FemP1Decoder((ax, ax), periodic=True)

    def encoder(self) -> SensorEncoder:
        if self.is_2d:
            return SensorEncoder.periodic_square(int(round(np.sqrt(self.grids.d_V))))
        return SensorEncoder.uniform(self.grids.d_V)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            epochs=t.epochs,
            learning_rate=t.learning_rate,
            batch_size=t.batch_size,
            lam=t.lam,
            reg_kind=t.reg_kind,
            seed=self.seed,
            freeze_decoder=t.freeze_decoder,
            history_every=t.history_every,
            finetune_epochs=t.finetune_epochs,
        )

    def check_dataset(self, ds: Dataset) -> None:
        """Reject a dataset this experiment cannot train on."""
        s = ds.settings
        if FAMILY_VARIANT[s.family] != FAMILY_VARIANT[self.problem] or s.family != self.problem:
            raise ConfigError(f"config is for {self.problem!r} but the dataset holds {s.family!r}")
        if s.nt != self.grids.N_t:
            raise ConfigError(f"config N_t={self.grids.N_t} but dataset labels have N_t={s.nt}")
        n_x = s.nx * s.nx if s.is_ns else s.nx
        if n_x != self.grids.N_x:
            raise ConfigError(f"config N_x={self.grids.N_x} but dataset labels have N_x={n_x}")
        if s.is_ns:
            m = int(round(np.sqrt(self.grids.d_V)))
            if s.grid_n % m:
                raise ConfigError(
                    f"d_V={self.grids.d_V} ({m}x{m} sensors) does not nest in the {s.grid_n}x{s.grid_n} input grid"
                )
        if ds.train.n == 0:
            raise ConfigError("dataset has no training samples")


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(raw)


def parse_config(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
