"""Student registration network, discriminator and the cascade wrapper."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SplitMix64
from .deformation import compose, resample, warp
from .engine import EngineError, Parameter, Tensor, as_tensor, concat_channels, conv3d, mean, relu, sigmoid, tconv3d
from .engine import ops

ParamSet = dict  # name -> Parameter, insertion ordered


@dataclass(frozen=True)
class StudentConfig:
    base_channels: int = 16
    levels: int = 4
    kernel: int = 4
    stride: int = 2
    cascades: int = 1

    def __post_init__(self):
        if self.levels < 1 or self.cascades < 1 or self.base_channels < 1:
            raise ValueError(f"invalid student config {self}")

    @property
    def divisor(self) -> int:
        return self.stride ** self.levels

    def encoder_channels(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.levels)]


@dataclass(frozen=True)
class DiscriminatorConfig:
    size: int = 32
    base_channels: int = 16
    layers: int = 5
    kernel: int = 4
    stride: int = 2

    def channels(self) -> list[int]:
        return [3] + [self.base_channels * 2 ** i for i in range(self.layers)]


def _glorot(stream: SplitMix64, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return ((stream.uniform(int(np.prod(shape))) * 2.0 - 1.0) * limit).reshape(shape)


def _conv_param(stream, params, name, cin, cout, k):
    params[f"{name}.kernel"] = Parameter(f"{name}.kernel", _glorot(stream, (cout, cin, k, k, k), cin * k ** 3, cout * k ** 3))
    params[f"{name}.bias"] = Parameter(f"{name}.bias", np.zeros(cout))


def _tconv_param(stream, params, name, cin, cout, k):
    # transposed-conv kernels are stored [Cin, Cout, k, k, k]
    params[f"{name}.kernel"] = Parameter(f"{name}.kernel", _glorot(stream, (cin, cout, k, k, k), cin * k ** 3, cout * k ** 3))
    params[f"{name}.bias"] = Parameter(f"{name}.bias", np.zeros(cout))


def init_student(config: StudentConfig, seed: int) -> ParamSet:
    """One cascade's parameters: encoder, skip decoder and full-resolution flow head."""
    stream = SplitMix64(seed)
    enc = config.encoder_channels()
    k = config.kernel
    params: ParamSet = {}
    cin = 2
    for i, c in enumerate(enc):
        _conv_param(stream, params, f"enc{i + 1}", cin, c, k)
        cin = c
    # decoder level j upsamples to the resolution of encoder level j
    for j in range(config.levels - 1, 0, -1):
        up_in = enc[-1] if j == config.levels - 1 else 2 * enc[j]
        _tconv_param(stream, params, f"dec{j}", up_in, enc[j - 1], k)
    head_in = 2 * enc[0] if config.levels > 1 else enc[0]
    _tconv_param(stream, params, "flow", head_in, 3, k)
    return params


def init_cascade(config: StudentConfig, seed: int) -> list[ParamSet]:
    stream = SplitMix64(seed)
    return [init_student(config, stream.next_u64()) for _ in range(config.cascades)]


def init_discriminator(config: DiscriminatorConfig, seed: int) -> ParamSet:
    if config.size % config.stride ** config.layers:
        raise ValueError(f"discriminator size {config.size} does not admit {config.layers} stride-{config.stride} layers")
    stream = SplitMix64(seed)
    ch = config.channels()
    params: ParamSet = {}
    for i in range(config.layers):
        _conv_param(stream, params, f"d{i + 1}", ch[i], ch[i + 1], config.kernel)
    return params


def param_count(params) -> int:
    """Total element count of a ParamSet or a list of them."""
    if isinstance(params, dict):
        return int(sum(p.size for p in params.values()))
    return int(sum(param_count(p) for p in params))


def student_forward(moving, fixed, params: ParamSet, config: StudentConfig = StudentConfig()) -> Tensor:
    """Predict a [N,3,D,H,W] displacement field from moving/fixed volumes."""
    moving, fixed = as_tensor(moving), as_tensor(fixed)
    squeeze = moving.ndim == 4
    if squeeze:
        moving, fixed = ops.reshape(moving, (1,) + moving.shape), ops.reshape(fixed, (1,) + fixed.shape)
    if moving.shape != fixed.shape:
        raise EngineError(f"moving {moving.shape} and fixed {fixed.shape} differ")
    spatial = moving.shape[2:]
    if any(e % config.divisor for e in spatial):
        raise EngineError(f"extents {spatial} must be divisible by {config.divisor}")
    s = config.stride
    x = concat_channels(moving, fixed)
    skips = []
    for i in range(config.levels):
        x = relu(conv3d(x, params[f"enc{i + 1}.kernel"], params[f"enc{i + 1}.bias"], s))
        assert x.shape[2:] == tuple(e // s ** (i + 1) for e in spatial), x.shape
        skips.append(x)
    for j in range(config.levels - 1, 0, -1):
        if j != config.levels - 1:
            x = concat_channels(x, skips[j])
        x = relu(tconv3d(x, params[f"dec{j}.kernel"], params[f"dec{j}.bias"], s))
        assert x.shape[2:] == tuple(e // s ** j for e in spatial), x.shape
    if config.levels > 1:
        x = concat_channels(x, skips[0])
    flow = tconv3d(x, params["flow.kernel"], params["flow.bias"], s)
    assert flow.shape[1:] == (3,) + tuple(spatial), flow.shape
    return ops.reshape(flow, flow.shape[1:]) if squeeze else flow


def cascade_forward(moving, fixed, params_list: list[ParamSet], n: int | None = None,
                    config: StudentConfig = StudentConfig()):
    """Run n cascades; returns (per-cascade fields, composed field, warped moving)."""
    n = len(params_list) if n is None else n
    if n < 1 or len(params_list) != n:
        raise ValueError(f"expected {n} parameter sets, got {len(params_list)}")
    moving = as_tensor(moving)
    flows = []
    total = None
    current = moving
    for params in params_list:
        phi = student_forward(current, fixed, params, config)
        flows.append(phi)
        total = phi if total is None else compose(total, phi)
        current = warp(moving, total, "trilinear")
    return flows, total, current


def discriminator_forward(field, params: ParamSet, config: DiscriminatorConfig = DiscriminatorConfig()) -> Tensor:
    """Mean sigmoid feature M per sample, shape [N] (a scalar for unbatched input)."""
    field = as_tensor(field)
    squeeze = field.ndim == 4
    if squeeze:
        field = ops.reshape(field, (1,) + field.shape)
    if field.ndim != 5 or field.shape[1] != 3:
        raise EngineError(f"discriminator expects [N,3,D,H,W], got {field.shape}")
    x = resample(field, config.size)
    for i in range(config.layers):
        x = conv3d(x, params[f"d{i + 1}.kernel"], params[f"d{i + 1}.bias"], config.stride)
        x = sigmoid(x) if i == config.layers - 1 else relu(x)
    m = mean(x, axis=(1, 2, 3, 4))
    return ops.reshape(m, ()) if squeeze else m


def flatten(params_list: list[ParamSet], prefix: str = "cas") -> dict[str, Parameter]:
    """Single name->Parameter mapping across cascades (names prefixed cas<k>.)."""
    out = {}
    for k, ps in enumerate(params_list):
        for name, p in ps.items():
            out[f"{prefix}{k}.{name}"] = p
    return out
