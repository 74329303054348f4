"""Built-in ionic models, registered by string key."""

from __future__ import annotations

from . import hh1952, tnnp2004
from .core import (
    CurrentSpec,
    GateSpec,
    IonicModel,
    ModelError,
    SCENARIO_SCALES,
    StateLayout,
    StatePartition,
    clamp_state,
    eval_currents,
    gate_derivative,
    with_perturbation,
)

_BUILDERS = {
    "hh1952": hh1952.build,
    "tnnp2004": tnnp2004.build,
}

MODEL_KEYS = tuple(_BUILDERS)


def get_model(key: str, **kwargs) -> IonicModel:
    """Build a registered model. ``tnnp2004`` accepts variant="epi|endo|mcell"."""
    try:
        builder = _BUILDERS[key]
    except KeyError:
        raise ModelError(f"unknown model key {key!r}") from None
    return builder(**kwargs)


__all__ = [
    "CurrentSpec",
    "GateSpec",
    "IonicModel",
    "ModelError",
    "MODEL_KEYS",
    "SCENARIO_SCALES",
    "StateLayout",
    "StatePartition",
    "clamp_state",
    "eval_currents",
    "gate_derivative",
    "get_model",
    "with_perturbation",
]
