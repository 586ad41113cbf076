"""Generator, discriminator/classifier and evaluation networks.

The generator is the StarGAN-style encoder / residual / decoder stack with
instance normalization. Two discriminator families are provided: a PatchGAN
stack of stride-2 convolutions and a residual stack ending in global mean
pooling. Both share one trunk between the realness head and the class head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import InvalidInputError, InvalidSpecError, LifecycleError

LRELU_SLOPE = 0.01
# dropout after each stride-2 conv of the 128px discriminator, by depth
PATCH_DROPOUT = (0.0, 0.2, 0.2, 0.2, 0.5, 0.5)
RESNET_D_DROPOUT = (0.0, 0.2, 0.5, 0.5)


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 32
    image_channels: int = 3
    num_domains: int = 3
    base_width: int = 16
    num_res_blocks: int = 2
    attention_variant: bool = False
    kernel_size: int = 7  # first and last conv; 3 in the 48px configuration

    def __post_init__(self):
        if self.image_size % 4:
            raise InvalidSpecError(f"image_size must be divisible by 4, got {self.image_size}")
        if self.base_width < 1 or self.num_res_blocks < 0:
            raise InvalidSpecError("base_width must be >= 1 and num_res_blocks >= 0")
        if self.num_domains < 1 or self.image_channels < 1:
            raise InvalidSpecError("num_domains and image_channels must be positive")


@dataclass(frozen=True)
class DiscriminatorConfig:
    image_size: int = 32
    image_channels: int = 3
    num_domains: int = 3
    base_width: int = 16
    num_layers: int = 4
    kind: str = "patch"  # "patch" or "resnet"
    with_classifier: bool = True
    dropout: Sequence[float] | None = None

    def __post_init__(self):
        if self.kind not in ("patch", "resnet"):
            raise InvalidSpecError(f"unknown discriminator kind {self.kind!r}")
        if self.num_layers < 1 or self.base_width < 1:
            raise InvalidSpecError("num_layers and base_width must be >= 1")
        if self.image_size % (2 ** self.num_layers):
            raise InvalidSpecError(
                f"image_size {self.image_size} not divisible by 2**{self.num_layers}"
            )
        if self.dropout is not None and len(self.dropout) != self.num_layers:
            raise InvalidSpecError("need one dropout rate per layer")

    @property
    def final_size(self) -> int:
        return self.image_size // 2 ** self.num_layers

    def dropout_rates(self) -> tuple[float, ...]:
        if self.dropout is not None:
            return tuple(self.dropout)
        table = PATCH_DROPOUT if self.kind == "patch" else RESNET_D_DROPOUT
        return tuple(table[i] if i < len(table) else table[-1] for i in range(self.num_layers))


class DiscriminatorOutput(NamedTuple):
    realness: Tensor
    class_logits: Tensor | None


class AttentionOutput(NamedTuple):
    color_mask: Tensor
    attention_mask: Tensor
    output: Tensor


def condition_concat(x: Tensor, y: Tensor, num_domains: int) -> Tensor:
    """Append the label as ``num_domains`` constant planes on the channel axis.

    ``y`` is either a ``(B,)`` integer tensor (one-hot planes) or a ``(B, c)``
    binary attribute tensor.
    """
    if x.dim() != 4:
        raise InvalidInputError(f"expected a (B, C, H, W) image batch, got {tuple(x.shape)}")
    b, _, h, w = x.shape
    if y.dim() == 1 and not y.is_floating_point():
        if y.shape[0] != b:
            raise InvalidInputError("label batch size differs from image batch size")
        if y.numel() and (y.min() < 0 or y.max() >= num_domains):
            raise InvalidInputError(f"labels must lie in [0, {num_domains})")
        code = F.one_hot(y, num_domains).to(x.dtype)
    elif y.dim() == 2:
        if y.shape != (b, num_domains):
            raise InvalidInputError(f"attribute vectors must have shape ({b}, {num_domains})")
        code = y.to(x.dtype)
    else:
        raise InvalidInputError(f"unsupported label shape {tuple(y.shape)}")
    planes = code[:, :, None, None].expand(b, num_domains, h, w)
    return torch.cat([x, planes], dim=1)


def composite(color: Tensor, mask: Tensor, x: Tensor) -> Tensor:
    return mask * color + (1 - mask) * x


class ResidualBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.main = nn.Sequential(
            nn.Conv2d(dim, dim, 3, 1, 1, bias=False),
            nn.InstanceNorm2d(dim, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(dim, dim, 3, 1, 1, bias=False),
            nn.InstanceNorm2d(dim, affine=True),
        )

    def forward(self, x: Tensor) -> Tensor:
        return x + self.main(x)


def _conv_in_relu(cin, cout, k, s, p, transpose=False):
    conv = nn.ConvTranspose2d if transpose else nn.Conv2d
    return [conv(cin, cout, k, s, p, bias=False), nn.InstanceNorm2d(cout, affine=True), nn.ReLU(inplace=True)]


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = cfg = config
        k, w = cfg.kernel_size, cfg.base_width
        layers = _conv_in_relu(cfg.image_channels + cfg.num_domains, w, k, 1, k // 2)
        layers += _conv_in_relu(w, 2 * w, 4, 2, 1)
        layers += _conv_in_relu(2 * w, 4 * w, 4, 2, 1)
        layers += [ResidualBlock(4 * w) for _ in range(cfg.num_res_blocks)]
        layers += _conv_in_relu(4 * w, 2 * w, 4, 2, 1, transpose=True)
        layers += _conv_in_relu(2 * w, w, 4, 2, 1, transpose=True)
        self.body = nn.Sequential(*layers)
        self.to_image = nn.Conv2d(w, cfg.image_channels, k, 1, k // 2, bias=False)
        self.to_mask = nn.Conv2d(w, 1, k, 1, k // 2, bias=False) if cfg.attention_variant else None

    def forward_with_masks(self, x: Tensor, y: Tensor) -> AttentionOutput:
        if self.to_mask is None:
            raise InvalidSpecError("generator was built without the attention variant")
        h = self.body(condition_concat(x, y, self.config.num_domains))
        color = torch.tanh(self.to_image(h))
        mask = torch.sigmoid(self.to_mask(h))
        return AttentionOutput(color, mask, composite(color, mask, x))

    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        cfg = self.config
        if x.shape[1:] != (cfg.image_channels, cfg.image_size, cfg.image_size):
            raise InvalidInputError(
                f"expected images of shape {(cfg.image_channels, cfg.image_size, cfg.image_size)}, "
                f"got {tuple(x.shape[1:])}"
            )
        if self.to_mask is not None:
            return self.forward_with_masks(x, y).output
        h = self.body(condition_concat(x, y, cfg.num_domains))
        return torch.tanh(self.to_image(h))


def generate(G: Generator | None, x: Tensor, y: Tensor):
    """Translate ``x`` to domain ``y``; attention generators return all three maps."""
    if G is None:
        raise LifecycleError("generator has not been built")
    if G.config.attention_variant:
        return G.forward_with_masks(x, y)
    return G(x, y)


class _DownResBlock(nn.Module):
    """Pre-activation residual block with 2x average-pool downsampling."""

    def __init__(self, cin: int, cout: int, first: bool):
        super().__init__()
        self.first = first
        self.conv1 = nn.Conv2d(cin, cout, 3, 1, 1)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.shortcut = nn.Conv2d(cin, cout, 1, 1, 0)

    def forward(self, x: Tensor) -> Tensor:
        h = x if self.first else F.leaky_relu(x, LRELU_SLOPE)
        h = self.conv2(F.leaky_relu(self.conv1(h), LRELU_SLOPE))
        h = F.avg_pool2d(h, 2)
        return h + F.avg_pool2d(self.shortcut(x), 2)


class Discriminator(nn.Module):
    """Shared trunk with a realness head (D) and an optional class head (C)."""

    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.config = cfg = config
        rates = cfg.dropout_rates()
        layers: list[nn.Module] = []
        cin, cout = cfg.image_channels, cfg.base_width
        for i in range(cfg.num_layers):
            if cfg.kind == "patch":
                layers += [nn.Conv2d(cin, cout, 4, 2, 1), nn.LeakyReLU(LRELU_SLOPE)]
            else:
                layers.append(_DownResBlock(cin, cout, first=i == 0))
            if rates[i] > 0:
                layers.append(nn.Dropout(rates[i]))
            cin, cout = cout, cout * 2
        self.trunk = nn.Sequential(*layers)
        self.width = cin
        if cfg.kind == "patch":
            self.realness_head = nn.Conv2d(cin, 1, 3, 1, 1, bias=False)
            # valid conv over the whole final map gives a 1x1xc output
            head = nn.Conv2d(cin, cfg.num_domains, cfg.final_size, 1, 0, bias=False)
        else:
            self.realness_head = nn.Conv2d(cin, 1, 1, 1, 0)
            head = nn.Conv2d(cin, cfg.num_domains, 1, 1, 0)
        self.class_head = head if cfg.with_classifier else None

    def features(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.shape[1:] != (cfg.image_channels, cfg.image_size, cfg.image_size):
            raise InvalidInputError(
                f"expected images of shape {(cfg.image_channels, cfg.image_size, cfg.image_size)}, "
                f"got {tuple(x.shape[1:])}"
            )
        h = self.trunk(x)
        if cfg.kind == "resnet":
            h = F.leaky_relu(h, LRELU_SLOPE).mean(dim=(2, 3), keepdim=True)
        return h

    def forward(self, x: Tensor) -> DiscriminatorOutput:
        h = self.features(x)
        realness = self.realness_head(h)
        if self.config.kind == "resnet":
            realness = realness.flatten(1).squeeze(1)
        logits = self.class_head(h).flatten(1) if self.class_head is not None else None
        return DiscriminatorOutput(realness, logits)

    def classify(self, x: Tensor) -> Tensor:
        if self.class_head is None:
            raise InvalidSpecError("discriminator was built without a classifier head")
        return self.class_head(self.features(x)).flatten(1)


def discriminate(D: Discriminator | None, x: Tensor) -> DiscriminatorOutput:
    if D is None:
        raise LifecycleError("discriminator has not been built")
    return D(x)


class EvalClassifier(nn.Module):
    """Small CNN used for CA, IS and as the embedding extractor for FID/KID."""

    def __init__(self, image_size: int = 32, image_channels: int = 3, num_domains: int = 3, width: int = 16):
        super().__init__()
        self.blocks = nn.Sequential(
            nn.Conv2d(image_channels, width, 3, 1, 1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, 1, 1), nn.ReLU(), nn.MaxPool2d(2),
        )
        self.embed_dim = 2 * width
        self.head = nn.Linear(self.embed_dim, num_domains)
        self.image_size = image_size
        self.trained = False

    def embed(self, x: Tensor) -> Tensor:
        return self.blocks(x).mean(dim=(2, 3))

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.embed(x))


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _shape_str(t: Tensor) -> str:
    if t.dim() == 4:
        _, c, h, w = t.shape
        return f"{h} × {w} × {c}"
    return " × ".join(str(s) for s in t.shape[1:])


def summarize(module: nn.Module, *inputs: Tensor) -> str:
    """Layer / output-shape listing of every leaf layer, in call order."""
    rows: list[tuple[str, str]] = []
    hooks = []
    leaves = (nn.Conv2d, nn.ConvTranspose2d, nn.InstanceNorm2d, nn.ReLU, nn.LeakyReLU, nn.Dropout, ResidualBlock, _DownResBlock)

    def hook(mod, _inp, out):
        if isinstance(out, Tensor):
            rows.append((_describe(mod), _shape_str(out)))

    for m in module.modules():
        if isinstance(m, leaves) and not _inside_block(module, m):
            hooks.append(m.register_forward_hook(hook))
    was_training = module.training
    module.eval()
    try:
        with torch.no_grad():
            module(*inputs)
    finally:
        module.train(was_training)
        for h in hooks:
            h.remove()
    width = max(len(r[0]) for r in rows)
    lines = [f"{'Layer'.ljust(width)} | Output shape"]
    lines += [f"{name.ljust(width)} | {shape}" for name, shape in rows]
    return "\n".join(lines)


def _inside_block(root: nn.Module, target: nn.Module) -> bool:
    for m in root.modules():
        if isinstance(m, (ResidualBlock, _DownResBlock)) and m is not target:
            if any(sub is target for sub in m.modules()):
                return True
    return False


def _describe(m: nn.Module) -> str:
    if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
        k = m.kernel_size[0]
        kind = "Deconv" if isinstance(m, nn.ConvTranspose2d) else "Conv"
        return f"{k} × {k}, stride={m.stride[0]} {kind} {m.out_channels}"
    if isinstance(m, nn.InstanceNorm2d):
        return "IN"
    if isinstance(m, nn.LeakyReLU):
        return "LReLU"
    if isinstance(m, nn.ReLU):
        return "ReLU"
    if isinstance(m, nn.Dropout):
        return f"{m.p} Dropout"
    if isinstance(m, _DownResBlock):
        return "[3 × 3] × 2 ResBlock down"
    return "[3 × 3] × 2 ResBlock"


def paper_generator_config(num_domains: int = 8) -> GeneratorConfig:
    """The 128px generator with six residual blocks."""
    return GeneratorConfig(image_size=128, image_channels=3, num_domains=num_domains, base_width=64, num_res_blocks=6)


def paper_discriminator_config(num_domains: int = 8) -> DiscriminatorConfig:
    return DiscriminatorConfig(image_size=128, image_channels=3, num_domains=num_domains, base_width=64, num_layers=6)


def attention_generator_config(num_domains: int = 5) -> GeneratorConfig:
    """The 48px grayscale generator with attention and color masks."""
    return GeneratorConfig(
        image_size=48, image_channels=1, num_domains=num_domains, base_width=64,
        num_res_blocks=6, attention_variant=True, kernel_size=3,
    )


def resnet_discriminator_config(num_domains: int = 5) -> DiscriminatorConfig:
    return DiscriminatorConfig(
        image_size=48, image_channels=1, num_domains=num_domains, base_width=64, num_layers=4, kind="resnet"
    )
