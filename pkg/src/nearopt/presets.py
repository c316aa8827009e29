"""The two worked examples shipped as model files."""
from __future__ import annotations

from importlib import resources

from .modelfile import loads

PRESETS = ("example1", "example2")

# Controls of the shipped examples, by family name (see cli --family).
FAMILIES = {
    "sqrt": lambda eps: 1.0 - eps ** 0.5,
    "square": lambda eps: 1.0 - eps ** 2,
}


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("nearopt").joinpath("data", f"{name}.yaml").read_text()


def load_preset(name: str):
    """(coeffs, cost, uset, multipliers) for a shipped example."""
    return loads(preset_text(name))
