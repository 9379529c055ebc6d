"""
Boundary-aware dual-decoder network.

A shared encoder feeds two decoders. The boundary decoder predicts a
boundary probability map at every decoder scale; the segmentation decoder
multiplies its upsampled features by ``1 + p_boundary`` before each block
so that boundary regions are emphasised.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import torch
from torch import nn


@dataclass(frozen=True)
class ModelConfig:
    num_stages: int = 5
    base_filters: int = 32
    max_filters: int = 320
    num_classes: int = 5
    boundary_channels: int = 2
    in_channels: int = 1
    conv_kernel: int = 3
    leaky_slope: float = 0.01
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.num_stages < 2:
            raise ValueError("num_stages must be >= 2")
        if self.base_filters < 1 or self.max_filters < self.base_filters:
            raise ValueError("need 1 <= base_filters <= max_filters")
        if self.num_classes < 2 or self.boundary_channels < 2:
            raise ValueError("output heads need at least 2 channels")
        if self.conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(min(self.base_filters * 2 ** k, self.max_filters)
                     for k in range(self.num_stages))

    @property
    def divisor(self) -> int:
        """Spatial dims of an input patch must be multiples of this."""
        return 2 ** (self.num_stages - 1)

    def check_patch(self, patch_shape: Sequence[int]) -> None:
        bad = [s for s in patch_shape if s % self.divisor]
        if bad:
            raise ValueError(f"patch {tuple(patch_shape)} not divisible by "
                             f"2^(N-1) = {self.divisor} for N={self.num_stages}")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


class ForwardOutput(NamedTuple):
    """Training-mode outputs, each list ordered coarse to fine."""

    seg_probs: list[torch.Tensor]
    boundary_probs: list[torch.Tensor]


class ConvNormAct(nn.Sequential):
    def __init__(self, cin, cout, cfg: ModelConfig, stride=1):
        super().__init__(
            nn.Conv3d(cin, cout, cfg.conv_kernel, stride=stride, padding=cfg.conv_kernel // 2),
            nn.InstanceNorm3d(cout, eps=cfg.norm_eps, affine=True),
            nn.LeakyReLU(cfg.leaky_slope),
        )


class ConvBlock(nn.Sequential):
    """Two conv layers; the first one strided when the block downsamples."""

    def __init__(self, cin, cout, cfg: ModelConfig, stride=1):
        super().__init__(
            ConvNormAct(cin, cout, cfg, stride=stride),
            ConvNormAct(cout, cout, cfg),
        )


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = cfg.widths
        blocks = [ConvBlock(cfg.in_channels, widths[0], cfg)]
        for k in range(1, cfg.num_stages):
            blocks.append(ConvBlock(widths[k - 1], widths[k], cfg, stride=2))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        features = []
        for block in self.blocks:
            x = block(x)
            features.append(x)
        return features


class Decoder(nn.Module):
    """N-1 upsampling blocks with a 1x1x1 softmax head per block.

    Block ``j`` (0-based, coarse to fine) upsamples encoder stage ``N-1-j``
    output into stage ``N-2-j`` resolution and concatenates that stage's skip.
    """

    def __init__(self, cfg: ModelConfig, out_channels: int):
        super().__init__()
        widths = cfg.widths
        n = cfg.num_stages
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        self.heads = nn.ModuleList()
        for j in range(n - 1):
            k = n - 2 - j
            self.ups.append(nn.ConvTranspose3d(widths[k + 1], widths[k], kernel_size=2, stride=2))
            self.blocks.append(ConvBlock(2 * widths[k], widths[k], cfg))
            self.heads.append(nn.Conv3d(widths[k], out_channels, kernel_size=1))

    def forward(self, features, attention=None, heads="all"):
        """Run the decoder.

        ``attention`` is an optional list of per-block maps of shape
        (B, 1, D, H, W) applied to the upsampled features via :func:`enhance`.
        ``heads`` selects which outputs to compute: ``"all"`` or ``"last"``.
        """
        x = features[-1]
        n_blocks = len(self.blocks)
        probs = []
        for j in range(n_blocks):
            skip = features[-2 - j]
            up = self.ups[j](x)
            if attention is not None:
                up = enhance(up, attention[j])
            x = self.blocks[j](torch.cat([up, skip], dim=1))
            if heads == "all" or j == n_blocks - 1:
                probs.append(torch.softmax(self.heads[j](x), dim=1))
        return probs


def enhance(features: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
    """Return ``(1 + attention) * features``.

    ``attention`` has a single channel (or is a bare (B, D, H, W) map) and is
    broadcast across all feature channels.
    """
    if attention.dim() == features.dim() - 1:
        attention = attention.unsqueeze(1)
    if attention.shape[2:] != features.shape[2:] or attention.shape[1] != 1:
        raise ValueError(f"attention {tuple(attention.shape)} does not match "
                         f"features {tuple(features.shape)}")
    return (1 + attention) * features


class BANet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.encoder = Encoder(cfg)
        self.boundary_decoder = Decoder(cfg, cfg.boundary_channels)
        self.seg_decoder = Decoder(cfg, cfg.num_classes)

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() != 5:
            raise ValueError(f"expected (B, C, D, H, W) input, got {tuple(x.shape)}")
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channel(s), got {x.shape[1]}")
        self.config.check_patch(x.shape[2:])
        return self.encoder(x)

    def decode_boundary(self, features) -> list[torch.Tensor]:
        return self.boundary_decoder(features)

    def decode_segmentation(self, features, boundary_probs, heads="all", ablate_attention=False):
        # channel 1 of the boundary head is p(boundary)
        attention = [p[:, 1:2] for p in boundary_probs]
        if ablate_attention:
            attention = [torch.zeros_like(a) for a in attention]
        return self.seg_decoder(features, attention=attention, heads=heads)

    def forward(self, x, mode="train", ablate_attention=False):
        """``mode="train"`` returns a :class:`ForwardOutput` with all N-1 maps
        of both decoders; ``mode="infer"`` returns only the finest
        segmentation probability map of shape (B, C_s, D, H, W)."""
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        features = self.encode(x)
        boundary = self.decode_boundary(features)
        if mode == "infer":
            return self.decode_segmentation(features, boundary, heads="last",
                                            ablate_attention=ablate_attention)[-1]
        seg = self.decode_segmentation(features, boundary, ablate_attention=ablate_attention)
        return ForwardOutput(seg, boundary)


def init_parameters(model: nn.Module, leaky_slope: float) -> None:
    for m in model.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
            # fan_in of a transposed conv is computed over dim 1 by torch; use the weight's
            # true fan-in (in_channels * kernel volume) for both kinds
            fan_in = m.in_channels * m.weight[0, 0].numel()
            std = (2.0 / ((1 + leaky_slope ** 2) * fan_in)) ** 0.5
            with torch.no_grad():
                m.weight.normal_(0.0, std)
                m.bias.zero_()
        elif isinstance(m, nn.InstanceNorm3d) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_model(cfg: ModelConfig | None = None, seed: int = 0) -> BANet:
    """Construct a :class:`BANet` with deterministic He-initialised weights."""
    cfg = cfg or ModelConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = BANet(cfg)
        init_parameters(model, cfg.leaky_slope)
    return model


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def output_shapes(cfg: ModelConfig, patch_shape: Sequence[int]) -> list[tuple[int, int, int]]:
    """Spatial shapes of the decoder outputs, coarse to fine."""
    cfg.check_patch(patch_shape)
    n = cfg.num_stages
    return [tuple(s // 2 ** (n - 1 - i) for s in patch_shape) for i in range(1, n)]

