"""Fully connected generators, discriminators and the domain-augmented regressor."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .acoustics import SOURCE, TARGET
from .errors import ConfigurationError, DataError

ACTIVATIONS = ("relu", "leaky_relu")
OUTPUT_ACTIVATIONS = ("linear", "sigmoid")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_widths: tuple
    output_dim: int
    activation: str = "relu"
    output_activation: str = "linear"
    negative_slope: float = 0.2
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if min((self.input_dim, self.output_dim) + self.hidden_widths) <= 0:
            raise ConfigurationError(f"all layer widths must be positive: {self}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigurationError(f"unknown output activation {self.output_activation!r}")

    @property
    def widths(self):
        return (self.input_dim,) + self.hidden_widths + (self.output_dim,)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def generator_spec(d, hidden=(512, 512), bias=True):
    return MlpSpec(d, hidden, d, activation="leaky_relu", bias=bias)


def discriminator_spec(d, hidden=(512, 256)):
    return MlpSpec(d, hidden, 1, activation="leaky_relu", output_activation="sigmoid")


def regressor_spec(d, hidden=(1024, 1024, 1024), bias=True):
    return MlpSpec(3 * d, hidden, d, activation="relu", bias=bias)


class Mlp(nn.Module):
    def __init__(self, spec: MlpSpec):
        super().__init__()
        self.spec = spec
        w = spec.widths
        self.layers = nn.ModuleList(nn.Linear(a, b, bias=spec.bias) for a, b in zip(w[:-1], w[1:]))

    def _act(self, h):
        if self.spec.activation == "relu":
            return torch.relu(h)
        return nn.functional.leaky_relu(h, self.spec.negative_slope)

    def pre_activation(self, x):
        """Output of the last linear layer (the logit for sigmoid heads)."""
        h = x
        for layer in self.layers[:-1]:
            h = self._act(layer(h))
        return self.layers[-1](h)

    def forward(self, x):
        out = self.pre_activation(x)
        if self.spec.output_activation == "sigmoid":
            out = torch.sigmoid(out)
        return out


def init_params(spec: MlpSpec, seed: int, dtype=torch.float32) -> Mlp:
    """He-normal weights (variance 2 / fan_in) and zero biases, fixed by ``seed``."""
    gen = torch.Generator().manual_seed(int(seed))
    model = Mlp(spec).to(dtype)
    with torch.no_grad():
        for layer in model.layers:
            std = (2.0 / layer.in_features) ** 0.5
            layer.weight.copy_(torch.randn(layer.weight.shape, generator=gen, dtype=dtype) * std)
            if layer.bias is not None:
                layer.bias.zero_()
    return model


def _check_dim(x, d):
    if x.shape[-1] != d:
        raise DataError(f"expected input dimension {d}, got {x.shape[-1]}")


class Generator(nn.Module):
    """Residual domain map ``G(x) = x + MLP(x)``.

    The last layer is scaled by ``residual_gain`` at initialization so the
    untrained map is close to the identity.
    """

    def __init__(self, spec: MlpSpec, seed: int = 0, residual_gain: float = 0.01, dtype=torch.float32):
        super().__init__()
        if spec.input_dim != spec.output_dim:
            raise ConfigurationError("generator must map R^d to R^d")
        self.spec = spec
        self.mlp = init_params(spec, seed, dtype)
        with torch.no_grad():
            self.mlp.layers[-1].weight.mul_(residual_gain)

    @property
    def dim(self):
        return self.spec.input_dim

    def forward(self, x):
        _check_dim(x, self.dim)
        return x + self.mlp(x)


class Discriminator(nn.Module):
    def __init__(self, spec: MlpSpec, seed: int = 0, dtype=torch.float32):
        super().__init__()
        if spec.output_dim != 1 or spec.output_activation != "sigmoid":
            raise ConfigurationError("discriminator must end in a single sigmoid unit")
        self.spec = spec
        self.mlp = init_params(spec, seed, dtype)

    @property
    def dim(self):
        return self.spec.input_dim

    def logits(self, x):
        _check_dim(x, self.dim)
        return self.mlp.pre_activation(x).squeeze(-1)

    def forward(self, x):
        """Probability that ``x`` is real, strictly inside (0, 1) up to float rounding."""
        return torch.sigmoid(self.logits(x))


class Regressor(nn.Module):
    """Shared beamforming regressor over augmented inputs.

    ``F_s(x) = F(x, x, 0)`` and ``F_t(x) = F(x, 0, x)``: the first slot is
    shared between domains, the second is source-only, the third target-only.
    """

    def __init__(self, spec: MlpSpec, seed: int = 0, dtype=torch.float32):
        super().__init__()
        if spec.input_dim != 3 * spec.output_dim:
            raise ConfigurationError("regressor input must be exactly 3x its output dimension")
        self.spec = spec
        self.mlp = init_params(spec, seed, dtype)

    @property
    def dim(self):
        return self.spec.output_dim

    @staticmethod
    def augment(x, domain):
        zeros = torch.zeros_like(x)
        if domain == SOURCE:
            return torch.cat([x, x, zeros], dim=-1)
        if domain == TARGET:
            return torch.cat([x, zeros, x], dim=-1)
        raise DataError(f"unknown domain {domain!r}")

    def forward(self, x, domain=SOURCE):
        _check_dim(x, self.dim)
        return self.mlp(self.augment(x, domain))

    def source(self, x):
        return self(x, SOURCE)

    def target(self, x):
        return self(x, TARGET)


# -- checkpoint format --------------------------------------------------------
# 4-byte magic, uint32 LE header length, UTF-8 JSON header, float32 LE blob.
CHECKPOINT_MAGIC = b"DACK"


def flatten_params(modules: dict) -> np.ndarray:
    chunks = []
    for module in modules.values():
        for tensor in module.state_dict().values():
            chunks.append(tensor.detach().cpu().numpy().astype("<f4").ravel())
    return np.concatenate(chunks) if chunks else np.zeros(0, "<f4")


def save_checkpoint(path, modules: dict, **header):
    """Write every module's parameters in declaration order after a JSON header."""
    layout = []
    for name, module in modules.items():
        entries = [[key, list(t.shape)] for key, t in module.state_dict().items()]
        layout.append({"name": name, "kind": type(module).__name__, "spec": module.spec.to_dict(), "tensors": entries})
    head = json.dumps({"format": "dabeam-checkpoint/1", "modules": layout, **header}, sort_keys=True).encode()
    blob = flatten_params(modules).tobytes()
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        f.write(blob)
    return path


MODULE_KINDS = {"Generator": Generator, "Discriminator": Discriminator, "Regressor": Regressor, "Mlp": Mlp}


def load_checkpoint(path):
    """Return ``(header, modules)``; modules are rebuilt from their stored specs."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path} is not a dabeam checkpoint")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + n].decode())
    blob = np.frombuffer(raw[8 + n :], dtype="<f4")
    modules, offset = {}, 0
    for entry in header["modules"]:
        spec = MlpSpec.from_dict(entry["spec"])
        cls = MODULE_KINDS[entry["kind"]]
        module = cls(spec) if cls is not Mlp else Mlp(spec)
        state = {}
        for key, shape in entry["tensors"]:
            size = int(np.prod(shape)) if shape else 1
            state[key] = torch.from_numpy(blob[offset : offset + size].reshape(shape).copy())
            offset += size
        module.load_state_dict(state)
        modules[entry["name"]] = module
    if offset != len(blob):
        raise DataError(f"checkpoint blob has {len(blob) - offset} trailing values")
    return header, modules


def regressor_fn(F: Regressor, domain: str, batch_size: int = 8192):
    """Numpy callable evaluating ``F`` in the given domain slot without gradients."""

    def fn(x):
        F.eval()
        outs = []
        dtype = next(F.parameters()).dtype
        with torch.no_grad():
            for i in range(0, len(x), batch_size):
                xb = torch.from_numpy(np.ascontiguousarray(x[i : i + batch_size])).to(dtype)
                outs.append(F(xb, domain).numpy())
        return np.concatenate(outs) if outs else np.zeros_like(x)

    return fn
