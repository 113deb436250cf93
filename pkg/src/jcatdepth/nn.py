"""Parameterised layers: projections, spatial-reduction attention, FFN, CBAM
gates and the residual BasicBlock.

Each layer has a functional form (pure function of tensors) and a small
:class:`Module` wrapper that owns the parameters. Modules expose their
parameters under stable dotted paths, which the checkpoint format relies on.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ConfigError, ShapeError, Tensor


class Parameter(Tensor):
    """A leaf tensor that a :class:`Module` owns and an optimiser updates."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Minimal container: attributes that are Parameters, Modules or
    ModuleLists are discovered in insertion order."""

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in self._buffers.items():
            yield prefix + name, buf
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_buffer(self, path: str, value: np.ndarray) -> None:
        head, _, rest = path.partition(".")
        if not rest:
            if head not in self._buffers:
                raise KeyError(path)
            self._buffers[head][...] = value
            return
        getattr(self, head).set_buffer(rest, value)

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


# -- initialisers -------------------------------------------------------------
def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


def kaiming_normal(rng: np.random.Generator, shape, fan: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan), size=shape)


def _param(arr: np.ndarray) -> Parameter:
    return Parameter(arr.astype(T.get_default_dtype()))


# -- functional forms ---------------------------------------------------------
def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` laid out (C_in, C_out)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight {w.shape}")
    y = T.matmul(x, w) if x.ndim >= 2 else T.matmul(x.reshape(1, -1), w).reshape(-1)
    return y if b is None else y + b


def to_tokens(f: Tensor) -> Tensor:
    B, C, H, W = f.shape
    return f.reshape(B, C, H * W).transpose(0, 2, 1)


def to_map(t: Tensor, h: int, w: int) -> Tensor:
    B, N, C = t.shape
    return t.transpose(0, 2, 1).reshape(B, C, h, w)


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_out: Tensor
    b_out: Tensor | None
    num_heads: int
    sr_ratio: int = 1
    sr_conv_w: Tensor | None = None
    sr_conv_b: Tensor | None = None
    sr_norm_g: Tensor | None = None
    sr_norm_b: Tensor | None = None
    ln_eps: float = 1e-5

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]


def sra_attention(x: Tensor, h: int, w: int, p: AttentionParams, return_attn: bool = False):
    """Multi-head attention whose keys/values come from an R-times downsampled
    token grid. ``x`` is (B, N, C) or (N, C) with N = h*w, already normalised.

    With ``return_attn`` the per-head attention matrices (B, heads, N, N/R^2)
    are returned as a second value.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    B, N, C = x.shape
    if N != h * w:
        raise ShapeError(f"sra_attention: N={N} but grid is {h}x{w}")
    if C % p.num_heads:
        raise ConfigError(f"sra_attention: {C} channels not divisible by {p.num_heads} heads")
    R = p.sr_ratio
    d = C // p.num_heads

    q = T.matmul(x, p.w_q)
    if R > 1:
        if h % R or w % R:
            raise ShapeError(f"sra_attention: grid {h}x{w} not divisible by reduction {R}")
        red = T.conv2d(to_map(x, h, w), p.sr_conv_w, p.sr_conv_b, stride=R)
        kv_in = T.layer_norm(to_tokens(red), p.sr_norm_g, p.sr_norm_b, p.ln_eps)
    else:
        kv_in = x
    k = T.matmul(kv_in, p.w_k)
    v = T.matmul(kv_in, p.w_v)
    M = kv_in.shape[1]

    def heads(t: Tensor, n: int) -> Tensor:
        return t.reshape(B, n, p.num_heads, d).transpose(0, 2, 1, 3)

    qh, kh, vh = heads(q, N), heads(k, M), heads(v, M)
    scores = T.matmul(qh, kh.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, vh).transpose(0, 2, 1, 3).reshape(B, N, C)
    out = linear(ctx, p.w_out, p.b_out)
    if squeeze:
        out = out.reshape(N, C)
    return (out, attn) if return_attn else out


def ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return linear(T.gelu(linear(x, w1, b1)), w2, b2)


def channel_attention(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                      return_gate: bool = False):
    """Gate each channel by sigmoid(MLP(avgpool) + MLP(maxpool))."""
    B, C = x.shape[:2]

    def mlp(z):
        return linear(T.relu(linear(z, w1, b1)), w2, b2)

    gate = T.sigmoid(mlp(x.mean(axis=(2, 3))) + mlp(x.max(axis=(2, 3))))
    out = x * gate.reshape(B, C, 1, 1)
    return (out, gate) if return_gate else out


def spatial_attention(x: Tensor, conv_w: Tensor, return_gate: bool = False):
    """Gate each pixel by sigmoid(conv([mean_c; max_c]))."""
    k = conv_w.shape[-1]
    pooled = T.concat([x.mean(axis=1, keepdims=True), x.max(axis=1, keepdims=True)], axis=1)
    m = T.sigmoid(T.conv2d(pooled, conv_w, None, stride=1, padding=k // 2))
    out = x * m
    return (out, m) if return_gate else out


# -- modules ------------------------------------------------------------------
class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = _param(trunc_normal(rng, (c_in, c_out)))
        self.bias = _param(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding=None, bias: bool = True):
        super().__init__()
        self.weight = _param(kaiming_normal(rng, (c_out, c_in, k, k), c_out * k * k))
        self.bias = _param(np.zeros(c_out)) if bias else None
        self.stride = stride
        if padding is None:
            # "same" for stride 1; for stride 2 the top/left-only pad halves even sizes
            padding = k // 2 if stride == 1 else (k // 2, k // 2 - 1)
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    """3x3 stride-2 transposed conv that exactly doubles H and W."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = _param(kaiming_normal(rng, (c_in, c_out, 3, 3), c_out * 9))
        self.bias = _param(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, stride=2, padding=1, output_padding=1)


class BatchNorm2d(Module):
    """Batch statistics while training, running statistics in eval mode."""

    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = _param(np.ones(c))
        self.beta = _param(np.zeros(c))
        self.momentum = momentum
        self.eps = eps
        self._buffers["running_mean"] = np.zeros(c, dtype=T.get_default_dtype())
        self._buffers["running_var"] = np.ones(c, dtype=T.get_default_dtype())

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            out, mu, var = T.batch_norm(x, self.gamma, self.beta, self.eps)
            n = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * (n / max(n - 1, 1))
            m = self.momentum
            rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
            rm *= 1 - m
            rm += m * mu
            rv *= 1 - m
            rv += m * unbiased
            return out
        rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
        scale = (self.gamma * Tensor(1.0 / np.sqrt(rv + self.eps), dtype=rv.dtype))
        shift = self.beta - scale * Tensor(rm)
        C = scale.shape[0]
        return x * scale.reshape(1, C, 1, 1) + shift.reshape(1, C, 1, 1)


class LayerNorm(Module):
    def __init__(self, c: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = _param(np.ones(c))
        self.beta = _param(np.zeros(c))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class SRAttention(Module):
    def __init__(self, c: int, num_heads: int, sr_ratio: int, rng: np.random.Generator,
                 ln_eps: float = 1e-5):
        super().__init__()
        if c % num_heads:
            raise ConfigError(f"{c} channels not divisible by {num_heads} heads")
        if sr_ratio not in (1, 2, 4, 8):
            raise ConfigError(f"sr_ratio must be one of 1, 2, 4, 8; got {sr_ratio}")
        self.num_heads = num_heads
        self.sr_ratio = sr_ratio
        self.ln_eps = ln_eps
        self.w_q = _param(trunc_normal(rng, (c, c)))
        self.w_k = _param(trunc_normal(rng, (c, c)))
        self.w_v = _param(trunc_normal(rng, (c, c)))
        self.w_out = _param(trunc_normal(rng, (c, c)))
        self.b_out = _param(np.zeros(c))
        if sr_ratio > 1:
            fan = c * sr_ratio * sr_ratio
            self.sr_conv_w = _param(kaiming_normal(rng, (c, c, sr_ratio, sr_ratio), fan))
            self.sr_conv_b = _param(np.zeros(c))
            self.sr_norm_g = _param(np.ones(c))
            self.sr_norm_b = _param(np.zeros(c))

    @property
    def params(self) -> AttentionParams:
        extra = {}
        if self.sr_ratio > 1:
            extra = dict(sr_conv_w=self.sr_conv_w, sr_conv_b=self.sr_conv_b,
                         sr_norm_g=self.sr_norm_g, sr_norm_b=self.sr_norm_b)
        return AttentionParams(self.w_q, self.w_k, self.w_v, self.w_out, self.b_out,
                               self.num_heads, self.sr_ratio, ln_eps=self.ln_eps, **extra)

    def forward(self, x: Tensor, h: int, w: int, return_attn: bool = False):
        return sra_attention(x, h, w, self.params, return_attn=return_attn)


class FFN(Module):
    def __init__(self, c: int, expansion: int, rng: np.random.Generator):
        super().__init__()
        if expansion < 1:
            raise ConfigError("ffn expansion must be >= 1")
        hidden = c * expansion
        self.w1 = _param(trunc_normal(rng, (c, hidden)))
        self.b1 = _param(np.zeros(hidden))
        self.w2 = _param(trunc_normal(rng, (hidden, c)))
        self.b2 = _param(np.zeros(c))

    def forward(self, x: Tensor) -> Tensor:
        return ffn(x, self.w1, self.b1, self.w2, self.b2)


def cbam_hidden(c: int, reduction: int = 16, floor: int = 4) -> int:
    return max(c // reduction, floor)


class CBAM(Module):
    """Channel gate followed by spatial gate."""

    def __init__(self, c: int, rng: np.random.Generator, reduction: int = 16, min_hidden: int = 4,
                 kernel: int = 7):
        super().__init__()
        hidden = cbam_hidden(c, reduction, min_hidden)
        self.mlp_w1 = _param(kaiming_normal(rng, (c, hidden), hidden))
        self.mlp_b1 = _param(np.zeros(hidden))
        self.mlp_w2 = _param(kaiming_normal(rng, (hidden, c), c))
        self.mlp_b2 = _param(np.zeros(c))
        self.spatial_w = _param(kaiming_normal(rng, (1, 2, kernel, kernel), kernel * kernel))

    def channel(self, x: Tensor) -> Tensor:
        return channel_attention(x, self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2)

    def spatial(self, x: Tensor) -> Tensor:
        return spatial_attention(x, self.spatial_w)

    def forward(self, x: Tensor) -> Tensor:
        return self.spatial(self.channel(x))


class BasicBlock(Module):
    """ResNet34 residual unit: conv-BN-ReLU-conv-BN + shortcut, then ReLU.

    A 1x1 conv + BN projection shortcut is used when the stride is 2 or the
    channel count changes; for stride 2 it reads every other pixel.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1,
                 bn_momentum: float = 0.1):
        super().__init__()
        if stride not in (1, 2):
            raise ConfigError("BasicBlock stride must be 1 or 2")
        self.stride = stride
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=stride, bias=False)
        self.bn1 = BatchNorm2d(c_out, bn_momentum)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, bias=False)
        self.bn2 = BatchNorm2d(c_out, bn_momentum)
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(c_in, c_out, 1, rng, padding=0, bias=False)
            self.proj_bn = BatchNorm2d(c_out, bn_momentum)
        else:
            self.proj = None

    def shortcut(self, x: Tensor) -> Tensor:
        if self.proj is None:
            return x
        if self.stride == 2:
            x = x[:, :, ::2, ::2]
        return self.proj_bn(self.proj(x))

    def forward(self, x: Tensor) -> Tensor:
        y = T.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return T.relu(y + self.shortcut(x))
