"""Summary networks reducing a variable-length panel to a fixed-length
condition vector.

Two architectures: a sequence network for censored observations with the
current latent-factor parameters appended as constant columns, and a
convolutional-recurrent network for gridded latent ratios.  Both end in the
same dense head, so the output length is fixed regardless of the number of
time replicates.

Inputs are fixed-transformed before the first layer: panel values through
log1p (they are positive and heavy tailed), appended parameter columns
z-scaled by their prior moments.  The transform is part of the architecture
descriptor stored in checkpoints.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, NumericError
from .model import CensoredPanel, FactorVariant, hyper_column_names

__all__ = [
    "RAlphaNet",
    "RXNet",
    "assemble_ralpha_input",
    "assemble_rx_input",
    "default_grid",
    "summarize",
]

DTYPE = torch.float64


def _init_lstm(lstm: nn.LSTM, generator):
    # orthogonal recurrent kernels, Glorot input kernels, zero biases except
    # the forget gate (bias 1: zero-bias memory decays with half-life one
    # step, which starves temporal features at desk-scale budgets)
    hidden = lstm.hidden_size
    for name, param in lstm.named_parameters():
        if name.startswith("weight_hh"):
            for chunk in param.chunk(4, dim=0):
                nn.init.orthogonal_(chunk, generator=generator)
        elif name.startswith("weight_ih"):
            nn.init.xavier_uniform_(param, generator=generator)
        else:
            nn.init.zeros_(param)
            if name.startswith("bias_ih"):
                with torch.no_grad():
                    param[hidden: 2 * hidden].fill_(1.0)


def _init_dense(layer, generator):
    nn.init.xavier_uniform_(layer.weight, generator=generator)
    nn.init.zeros_(layer.bias)


class _RecurrentHead(nn.Module):
    """Two stacked sequence layers followed by dense ReLU and dense ELU."""

    def __init__(self, input_size, n_lstm, n_dense, generator):
        super().__init__()
        self.lstm1 = nn.LSTM(input_size, n_lstm, batch_first=True, dtype=DTYPE)
        self.lstm2 = nn.LSTM(n_lstm, n_lstm, batch_first=True, dtype=DTYPE)
        self.dense1 = nn.Linear(n_lstm, n_dense, dtype=DTYPE)
        self.dense2 = nn.Linear(n_dense, n_dense, dtype=DTYPE)
        _init_lstm(self.lstm1, generator)
        _init_lstm(self.lstm2, generator)
        _init_dense(self.dense1, generator)
        _init_dense(self.dense2, generator)

    def forward(self, sequence):
        h, _ = self.lstm1(sequence)
        _, (last, _) = self.lstm2(h)
        h = torch.relu(self.dense1(last[-1]))
        return nn.functional.elu(self.dense2(h))


class RAlphaNet(nn.Module):
    """Summary network for censored panels plus latent-parameter columns."""

    def __init__(
        self,
        n_sites: int,
        hyper_names,
        hyper_loc,
        hyper_scale,
        n_lstm: int = 128,
        n_dense: int = 128,
        generator=None,
        value_transform: str = "log1p",
    ):
        super().__init__()
        if value_transform not in ("log1p", "identity"):
            raise ConfigError(f"unknown value transform {value_transform!r}")
        self.n_sites = n_sites
        self.hyper_names = tuple(hyper_names)
        self.register_buffer("hyper_loc", torch.as_tensor(hyper_loc, dtype=DTYPE))
        self.register_buffer("hyper_scale", torch.as_tensor(hyper_scale, dtype=DTYPE))
        self.n_lstm = n_lstm
        self.n_dense = n_dense
        self.value_transform = value_transform
        self.head = _RecurrentHead(n_sites + len(self.hyper_names), n_lstm, n_dense, generator)

    def config(self) -> dict:
        return {
            "kind": "ralpha",
            "n_sites": self.n_sites,
            "hyper_names": list(self.hyper_names),
            "hyper_loc": [float(v) for v in self.hyper_loc],
            "hyper_scale": [float(v) for v in self.hyper_scale],
            "n_lstm": self.n_lstm,
            "n_dense": self.n_dense,
            "value_transform": self.value_transform,
            "input_transform": f"{self.value_transform}(values); z-scaled parameter columns",
        }

    def expected_width(self) -> int:
        return self.n_sites + len(self.hyper_names)

    def forward(self, x):
        if x.shape[-1] != self.expected_width():
            raise ConfigError(
                f"summary input width {x.shape[-1]} does not match "
                f"{self.n_sites} sites + {len(self.hyper_names)} parameter columns"
            )
        d = self.n_sites
        values = x[..., :d]
        if self.value_transform == "log1p":
            values = torch.log1p(values)
        hyper = (x[..., d:] - self.hyper_loc) / self.hyper_scale
        return self.head(torch.cat([values, hyper], dim=-1))


class RXNet(nn.Module):
    """Summary network for gridded latent ratios: two spatial convolutions
    per time slice, then the recurrent head."""

    def __init__(self, d1: int, d2: int, n_lstm: int = 128, n_dense: int = 128, generator=None):
        super().__init__()
        self.d1 = d1
        self.d2 = d2
        self.n_lstm = n_lstm
        self.n_dense = n_dense
        self.conv1 = nn.Conv2d(1, 32, kernel_size=3, padding="same", dtype=DTYPE)
        self.conv2 = nn.Conv2d(32, 64, kernel_size=3, padding="same", dtype=DTYPE)
        _init_dense(self.conv1, generator)
        _init_dense(self.conv2, generator)
        self.head = _RecurrentHead(d1 * d2 * 64, n_lstm, n_dense, generator)

    def config(self) -> dict:
        return {
            "kind": "rx",
            "d1": self.d1,
            "d2": self.d2,
            "n_lstm": self.n_lstm,
            "n_dense": self.n_dense,
            "input_transform": "log1p(ratios)",
        }

    def forward(self, x):
        if x.shape[-3] != self.d1 or x.shape[-2] != self.d2 or x.shape[-1] != 1:
            raise ConfigError(
                f"grid input shaped {tuple(x.shape)} does not match "
                f"({self.d1}, {self.d2}, 1) slices"
            )
        batch, n = x.shape[0], x.shape[1]
        slices = torch.log1p(x).permute(0, 1, 4, 2, 3).reshape(batch * n, 1, self.d1, self.d2)
        h = torch.relu(self.conv1(slices))
        h = torch.relu(self.conv2(h))
        h = h.reshape(batch, n, self.d1 * self.d2 * 64)
        return self.head(h)


def assemble_ralpha_input(
    censored: CensoredPanel, theta_x: dict, variant: FactorVariant
) -> np.ndarray:
    """Censored values with the latent-block parameters appended as constant
    columns in the variant's fixed order."""
    expected = hyper_column_names(variant)
    if set(theta_x) != set(expected):
        raise ConfigError(
            f"variant {variant.name} expects parameter columns {list(expected)}, "
            f"got {sorted(theta_x)}"
        )
    n = censored.n_obs
    columns = [censored.values]
    for name in expected:
        columns.append(np.full((n, 1), float(theta_x[name])))
    return np.concatenate(columns, axis=1)


def assemble_rx_input(ratio: np.ndarray, d1: int, d2: int) -> np.ndarray:
    """Row-major reshape of each time slice into a (d1, d2) grid."""
    ratio = np.asarray(ratio, dtype=float)
    d = ratio.shape[1]
    if d1 * d2 != d or d1 < 2 or d2 < 2:
        raise ConfigError(
            f"grid {d1}x{d2} does not tile {d} sites with sides >= 2; "
            f"valid factorizations: {_factorizations(d) or 'none (prime site count)'}"
        )
    return ratio.reshape(ratio.shape[0], d1, d2, 1)


def _factorizations(d: int) -> list:
    pairs = []
    for a in range(2, int(np.sqrt(d)) + 1):
        if d % a == 0 and d // a >= 2:
            pairs.append((a, d // a))
    return pairs


def default_grid(d: int) -> tuple:
    """Most square (d1, d2) with both sides at least two."""
    pairs = _factorizations(d)
    if not pairs:
        raise ConfigError(
            f"{d} sites cannot be arranged on a grid with sides >= 2; "
            "choose a composite site count"
        )
    d1, d2 = pairs[-1]
    return d1, d2


def summarize(net, input_array) -> np.ndarray:
    """Deterministic fixed-length summary of one assembled input."""
    arr = np.asarray(input_array, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NumericError("summary input contains non-finite values")
    tensor = torch.as_tensor(arr, dtype=DTYPE).unsqueeze(0)
    with torch.no_grad():
        out = net(tensor)
    if not torch.all(torch.isfinite(out)):
        raise NumericError("summary network produced non-finite output")
    return out[0].numpy()
