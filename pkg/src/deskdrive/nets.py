"""Function approximators: shared conv feature net, recurrent policy head,
value head, twin Q heads.

The feature net consumes the stacked observation channels plus the scalar
ego speed; the policy head unrolls a recurrent cell over the trajectory
points, feeding each step's predicted mean back into the next, and emits
per-step (dR, dphi) means plus global learnable log-stds. Parameters are
(de)serialized as little-endian float32 behind a text header carrying a
hash of the architecture, so a file cannot be loaded into a different
network shape.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .action import PolicyOutput
from .errors import IoError, ShapeMismatch, SpecMismatch

SPEED_NORM = 20.0  # m/s mapped to ~1.0 at the input


@dataclass(frozen=True)
class NetsSpec:
    in_channels: int = 9  # 3 roadmap + routing + past + k dynamic frames
    height: int = 128
    width: int = 128
    conv_filters: tuple = (8, 16, 16)
    feature_width: int = 64
    recurrent_width: int = 64
    head_width: int = 64
    n_points: int = 15
    init_log_std_r: float = math.log(0.5)
    init_log_std_phi: float = math.log(0.05)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]

    def conv_out(self) -> int:
        h, w = self.height, self.width
        for _ in self.conv_filters:
            h = (h + 1) // 2
            w = (w + 1) // 2
        return self.conv_filters[-1] * h * w


def spec_for_raster(raster, action) -> NetsSpec:
    return NetsSpec(
        in_channels=5 + raster.n_past_frames,
        height=raster.height,
        width=raster.width,
        n_points=action.n_points,
    )


class FeatureNet(nn.Module):
    """Conv stack with batch norm; ego speed joins before the projection."""

    def __init__(self, spec: NetsSpec):
        super().__init__()
        self.spec = spec
        layers = []
        c_in = spec.in_channels
        for c_out in spec.conv_filters:
            layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.BatchNorm2d(c_out), nn.ReLU()]
            c_in = c_out
        self.convs = nn.Sequential(*layers)
        self.proj = nn.Linear(spec.conv_out() + 1, spec.feature_width)
        self.bn_frozen = False

    def train(self, mode: bool = True):
        super().train(mode)
        if self.bn_frozen:
            for m in self.modules():
                if isinstance(m, nn.BatchNorm2d):
                    m.eval()
        return self

    def set_bn_frozen(self, frozen: bool):
        """Frozen batch norm uses running statistics as constants."""
        self.bn_frozen = frozen
        self.train(self.training)

    def forward(self, channels: torch.Tensor, speed: torch.Tensor) -> torch.Tensor:
        s = self.spec
        if channels.shape[1:] != (s.in_channels, s.height, s.width):
            raise ShapeMismatch(
                f"observation {tuple(channels.shape[1:])} != "
                f"({s.in_channels}, {s.height}, {s.width})"
            )
        x = self.convs(channels)
        x = x.flatten(1)
        x = torch.cat([x, speed.reshape(-1, 1)], dim=1)
        return torch.relu(self.proj(x))


class PiNet(nn.Module):
    """Recurrent trajectory head: one (dR, dphi) mean per unrolled step."""

    def __init__(self, spec: NetsSpec):
        super().__init__()
        self.spec = spec
        self.cell = nn.GRUCell(spec.feature_width + 2, spec.recurrent_width)
        self.out = nn.Linear(spec.recurrent_width, 2)
        self.log_std = nn.Parameter(
            torch.tensor([spec.init_log_std_r, spec.init_log_std_phi])
        )

    def forward(self, feature: torch.Tensor, hidden: torch.Tensor | None = None):
        s = self.spec
        if feature.shape[-1] != s.feature_width:
            raise ShapeMismatch(f"feature width {feature.shape[-1]} != {s.feature_width}")
        b = feature.shape[0]
        h = (
            hidden
            if hidden is not None
            else torch.zeros(b, s.recurrent_width, dtype=feature.dtype, device=feature.device)
        )
        prev = torch.zeros(b, 2, dtype=feature.dtype, device=feature.device)
        means = []
        for _ in range(s.n_points):
            h = self.cell(torch.cat([feature, prev], dim=1), h)
            prev = self.out(h)
            means.append(prev)
        return torch.stack(means, dim=1), self.log_std, h


class VNet(nn.Module):
    def __init__(self, spec: NetsSpec):
        super().__init__()
        w = spec.head_width
        self.mlp = nn.Sequential(
            nn.Linear(spec.feature_width, w), nn.ReLU(), nn.Linear(w, w), nn.ReLU(), nn.Linear(w, 1)
        )

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        return self.mlp(feature).squeeze(-1)


class QNet(nn.Module):
    def __init__(self, spec: NetsSpec):
        super().__init__()
        w = spec.head_width
        self.mlp = nn.Sequential(
            nn.Linear(spec.feature_width + 2 * spec.n_points, w),
            nn.ReLU(),
            nn.Linear(w, w),
            nn.ReLU(),
            nn.Linear(w, 1),
        )

    def forward(self, feature: torch.Tensor, action_flat: torch.Tensor) -> torch.Tensor:
        return self.mlp(torch.cat([feature, action_flat], dim=1)).squeeze(-1)


class AgentNets(nn.Module):
    """The full parameter store: feature net plus policy/value/twin-Q heads.

    frozen_prefixes marks tensors excluded from optimization; freezing the
    feature net also freezes its batch-norm statistics.
    """

    def __init__(self, spec: NetsSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        torch.manual_seed(seed)
        self.feature = FeatureNet(spec)
        self.pi = PiNet(spec)
        self.v = VNet(spec)
        self.q1 = QNet(spec)
        self.q2 = QNet(spec)
        self.frozen_prefixes: set[str] = set()
        self._init_weights()

    def _init_weights(self):
        for name, mod in self.named_modules():
            if isinstance(mod, nn.Linear):
                nn.init.orthogonal_(mod.weight)
                nn.init.zeros_(mod.bias)
            elif isinstance(mod, nn.GRUCell):
                nn.init.orthogonal_(mod.weight_ih)
                nn.init.orthogonal_(mod.weight_hh)
                nn.init.zeros_(mod.bias_ih)
                nn.init.zeros_(mod.bias_hh)
            elif isinstance(mod, nn.Conv2d):
                nn.init.zeros_(mod.bias)  # fan-in-scaled uniform weights are the default

    def freeze(self, prefix: str):
        self.frozen_prefixes.add(prefix)
        for name, p in self.named_parameters():
            if name.startswith(prefix):
                p.requires_grad_(False)
        if prefix.startswith("feature"):
            self.feature.set_bn_frozen(True)

    def is_frozen(self, name: str) -> bool:
        return any(name.startswith(p) for p in self.frozen_prefixes)

    def trainable(self, *prefixes: str):
        """Trainable parameters, optionally restricted to name prefixes."""
        out = []
        for name, p in self.named_parameters():
            if self.is_frozen(name) or not p.requires_grad:
                continue
            if prefixes and not any(name.startswith(pre) for pre in prefixes):
                continue
            out.append(p)
        return out

    def tensor_table(self):
        items = list(self.named_parameters()) + list(self.named_buffers())
        return sorted(items, key=lambda kv: kv[0])


MAGIC = "deskdrive-params v1"


def params_to_bytes(nets: AgentNets) -> bytes:
    """Serialize all parameters and buffers as float32 behind a text header."""
    buf = io.BytesIO()
    header = [MAGIC, f"spec {nets.spec.digest()}"]
    blobs = []
    for name, tensor in nets.tensor_table():
        t = tensor.detach().to(torch.float32).contiguous()
        header.append(f"tensor {name} {','.join(str(d) for d in t.shape) or 'scalar'}")
        blobs.append(t.numpy().astype("<f4").tobytes())
    header.append("data")
    buf.write(("\n".join(header) + "\n").encode())
    for b in blobs:
        buf.write(b)
    return buf.getvalue()


def save_params(nets: AgentNets, path) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(params_to_bytes(nets))
    except OSError as exc:
        raise IoError(f"cannot write params to {path}: {exc}") from exc


def _load_from_stream(data: bytes, spec: NetsSpec, seed: int = 0) -> AgentNets:
    head_end = data.index(b"data\n") + len(b"data\n")
    lines = data[:head_end].decode().splitlines()
    if lines[0] != MAGIC:
        raise SpecMismatch(f"bad header {lines[0]!r}")
    file_digest = lines[1].split()[1]
    if file_digest != spec.digest():
        raise SpecMismatch(f"file spec {file_digest} != expected {spec.digest()}")
    nets = AgentNets(spec, seed=seed)
    offset = head_end
    table = dict(nets.tensor_table())
    for line in lines[2:-1]:
        _, name, shape_s = line.split(" ")
        shape = tuple() if shape_s == "scalar" else tuple(int(d) for d in shape_s.split(","))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += count * 4
        if name not in table:
            raise SpecMismatch(f"unknown tensor {name!r}")
        with torch.no_grad():
            table[name].copy_(torch.from_numpy(arr.copy()).to(table[name].dtype))
    return nets


def load_params(path, spec: NetsSpec) -> AgentNets:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read params from {path}: {exc}") from exc
    return _load_from_stream(data, spec)


def params_from_bytes(data: bytes, spec: NetsSpec) -> AgentNets:
    return _load_from_stream(data, spec)


def obs_to_tensors(channels: np.ndarray, speed: float, dtype=torch.float32):
    """Shared observation-to-input conversion (must match between rollout and training)."""
    x = torch.from_numpy(np.ascontiguousarray(channels)).to(dtype) / 255.0
    s = torch.tensor([speed], dtype=dtype) / SPEED_NORM
    return x.unsqueeze(0), s


def batch_obs_to_tensors(channels: np.ndarray, speeds: np.ndarray, dtype=torch.float32):
    x = torch.from_numpy(np.ascontiguousarray(channels)).to(dtype) / 255.0
    s = torch.from_numpy(np.ascontiguousarray(speeds)).to(dtype) / SPEED_NORM
    return x, s


class NeuralPolicy:
    """Bridges AgentNets into the episode engine's plan() protocol."""

    def __init__(self, nets: AgentNets, use_learned_std: bool = True):
        self.nets = nets
        self.use_learned_std = use_learned_std
        nets.eval()

    def plan(self, obs, state) -> PolicyOutput:
        x, s = obs_to_tensors(obs.channels(), obs.ego_speed)
        with torch.no_grad():
            f = self.nets.feature(x, s)
            means, log_std, _ = self.nets.pi(f)
            stds = torch.exp(log_std)
        m = means[0].numpy().astype(float)
        if self.use_learned_std:
            return PolicyOutput(m[:, 0], m[:, 1], float(stds[0]), float(stds[1]))
        return PolicyOutput(m[:, 0], m[:, 1])


def finite_difference_check(loss_fn, params, eps: float = 1e-6,
                            directions_per_tensor: int = 2, seed: int = 0) -> float:
    """Max relative error between autograd and central finite differences.

    Compares directional derivatives g . v against (L(p + eps v) - L(p - eps v))
    / (2 eps) for random unit directions v within each parameter tensor.
    loss_fn must be a zero-argument callable returning a scalar tensor built
    from the given parameters; run the networks in double precision and eval
    mode (mutating batch statistics between evaluations would bias the check).
    """
    rng = np.random.default_rng(seed)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.detach().reshape(-1)
        g_flat = torch.zeros_like(flat) if g is None else g.detach().reshape(-1)
        for _ in range(directions_per_tensor):
            v = torch.from_numpy(rng.standard_normal(flat.numel())).to(flat.dtype)
            v /= torch.linalg.vector_norm(v)
            with torch.no_grad():
                flat += eps * v
            f_plus = loss_fn().item()
            with torch.no_grad():
                flat -= 2 * eps * v
            f_minus = loss_fn().item()
            with torch.no_grad():
                flat += eps * v
            fd = (f_plus - f_minus) / (2 * eps)
            ad = float(g_flat @ v)
            denom = max(abs(fd), abs(ad), 1e-8)
            worst = max(worst, abs(fd - ad) / denom)
    return worst
