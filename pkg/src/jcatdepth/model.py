"""End-to-end depth completion network: RGB/depth embedding, JCAT encoder,
CBAM-fused decoder, prediction heads and SPN refinement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig, resolve
from .encoder import Encoder, FeaturePyramid
from .nn import CBAM, BatchNorm2d, Conv2d, ConvTranspose2d, Module, ModuleList
from .spn import SpnConfig, refine
from .tensor import ConfigError, ShapeError, Tensor


@dataclass
class RgbdSample:
    """A batch of RGB images, sparse depth and (optional) dense ground truth.

    Depths are metres, 0 marks a missing value.
    """

    image: np.ndarray          # B,3,H,W in [0,1]
    sparse: np.ndarray         # B,1,H,W
    gt: np.ndarray | None = None

    @property
    def valid_mask(self) -> np.ndarray:
        return self.gt > 0

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[2], self.image.shape[3]


@dataclass
class ModelOutput:
    d0: Tensor
    confidence: Tensor
    offsets: Tensor
    affinity_raw: Tensor
    refined: Tensor | None = None


class ConvBnRelu(Module):
    def __init__(self, c_in: int, c_out: int, rng, momentum: float = 0.1):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 3, rng, bias=False)
        self.bn = BatchNorm2d(c_out, momentum)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))


class RgbdEmbed(Module):
    """Separate 3x3 convs for image and sparse depth, concat, then a 3x3 conv."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        m = cfg.bn_momentum
        self.rgb = ConvBnRelu(3, cfg.rgb_channels, rng, m)
        self.depth = ConvBnRelu(1, cfg.depth_channels, rng, m)
        self.fuse = ConvBnRelu(cfg.embed_channels, cfg.stem_channels, rng, m)

    def forward(self, image: Tensor, sparse: Tensor) -> Tensor:
        if image.shape[1] != 3 or sparse.shape[1] != 1:
            raise ConfigError(f"expected 3-channel image and 1-channel depth, got "
                              f"{image.shape[1]} and {sparse.shape[1]}")
        return self.fuse(T.concat([self.rgb(image), self.depth(sparse)], axis=1))


class UpBlock(Module):
    """Deconv (x2) + BN + ReLU, then CBAM."""

    def __init__(self, c_in: int, c_out: int, cfg: ModelConfig, rng):
        super().__init__()
        self.up = ConvTranspose2d(c_in, c_out, rng, bias=False)
        self.bn = BatchNorm2d(c_out, cfg.bn_momentum)
        self.cbam = CBAM(c_out, rng, cfg.cbam_reduction, cfg.cbam_min_hidden, cfg.cbam_kernel)

    def forward(self, x: Tensor) -> Tensor:
        return self.cbam(T.relu(self.bn(self.up(x))))


class Decoder(Module):
    """Top-down path dec6..dec2 with skip concatenation, then dec1 fusing the
    full-resolution ResNet feature."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        d = cfg.decoder_channels
        c = cfg.channels
        ins = [c[3], d[0] + c[2], d[1] + c[1], d[2] + c[0], d[3] + cfg.f1_channels]
        self.ups = ModuleList(UpBlock(i, o, cfg, rng) for i, o in zip(ins, d))
        self.dec1 = ConvBnRelu(d[4] + cfg.stem_channels, cfg.stem_channels, rng, cfg.bn_momentum)

    def forward(self, pyr: FeaturePyramid) -> Tensor:
        skips = [pyr.f4, pyr.f3, pyr.f2, pyr.f1]
        x = self.ups[0](pyr.f5)
        for up, skip in zip(list(self.ups)[1:], skips):
            if x.shape[2:] != skip.shape[2:]:
                raise ShapeError(f"decoder/skip size mismatch {x.shape} vs {skip.shape}")
            x = up(T.concat([x, skip], axis=1))
        if x.shape[2:] != pyr.full.shape[2:]:
            raise ShapeError("decoder output does not reach input resolution")
        return self.dec1(T.concat([x, pyr.full], axis=1))


class Heads(Module):
    """Four sibling 3x3 conv heads on concat[decoded, raw embedding]."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        c = 2 * cfg.stem_channels
        J = cfg.spn_neighbors
        self.depth = Conv2d(c, 1, 3, rng)
        self.confidence = Conv2d(c, 1, 3, rng)
        self.offsets = Conv2d(c, 2 * J, 3, rng)
        self.affinity = Conv2d(c, J, 3, rng)
        # start with neighbours on the fixed ring
        self.offsets.weight.data[...] = 0.0
        self.split = np.cumsum([1, 1, 2 * J])

    def forward(self, decoded: Tensor, raw: Tensor) -> ModelOutput:
        if decoded.shape[2:] != raw.shape[2:]:
            raise ShapeError("decoded and raw features are not aligned")
        x = T.concat([decoded, raw], axis=1)
        # the four heads share one im2col pass; their weights stay separate
        convs = (self.depth, self.confidence, self.offsets, self.affinity)
        w = T.concat([c.weight for c in convs], axis=0)
        b = T.concat([c.bias for c in convs], axis=0)
        y = T.conv2d(x, w, b, stride=1, padding=1)
        a, c, o = self.split
        return ModelOutput(
            d0=y[:, :a],
            confidence=T.sigmoid(y[:, a:c]),
            offsets=y[:, c:o],
            affinity_raw=y[:, o:],
        )


class DepthCompletionNet(Module):
    def __init__(self, cfg: ModelConfig | str | dict, seed: int = 0,
                 rng: np.random.Generator | None = None):
        super().__init__()
        cfg = resolve(cfg)
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.cfg = cfg
        self.embed = RgbdEmbed(cfg, rng)
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        self.heads = Heads(cfg, rng)

    def spn_config(self, iterations: int | None = None) -> SpnConfig:
        k = self.cfg.spn_iterations if iterations is None else iterations
        return SpnConfig(k, self.cfg.spn_neighbors, self.cfg.spn_mode)

    def forward(self, image, sparse, spn_iterations: int | None = None) -> ModelOutput:
        dtype = T.get_default_dtype()
        image = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=dtype))
        sparse = sparse if isinstance(sparse, Tensor) else Tensor(np.asarray(sparse, dtype=dtype))
        raw = self.embed(image, sparse)
        pyr = self.encoder(raw)
        decoded = self.decoder(pyr)
        out = self.heads(decoded, raw)
        cfg = self.spn_config(spn_iterations)
        offsets = out.offsets if cfg.mode == "nonlocal" else None
        out.refined = refine(out.d0, offsets, out.affinity_raw, out.confidence, cfg)
        return out

    def forward_sample(self, sample: RgbdSample, spn_iterations: int | None = None) -> ModelOutput:
        return self.forward(sample.image, sample.sparse, spn_iterations)


def count_parameters(model_or_cfg) -> int:
    if isinstance(model_or_cfg, Module):
        return model_or_cfg.num_parameters()
    return DepthCompletionNet(model_or_cfg).num_parameters()
