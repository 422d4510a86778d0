"""Encoders, generators and discriminators for disentangled style transfer."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def conv_block(in_ch, out_ch, kernel, stride, norm=True, act="relu"):
    pad = (kernel - 1) // 2 if stride == 1 else kernel // 2 - 1
    layers = [nn.Conv2d(in_ch, out_ch, kernel, stride, pad, padding_mode="reflect" if kernel >= 7 else "zeros")]
    if norm:
        layers.append(nn.InstanceNorm2d(out_ch))
    if act == "relu":
        layers.append(nn.ReLU(inplace=True))
    elif act == "lrelu":
        layers.append(nn.LeakyReLU(0.2, inplace=True))
    return nn.Sequential(*layers)


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = conv_block(ch, ch, 3, 1)
        self.conv2 = conv_block(ch, ch, 3, 1, act=None)

    def forward(self, x):
        return x + self.conv2(self.conv1(x))


class ContentEncoder(nn.Module):
    """Stride-1 stem, ``n_down`` stride-2 blocks, then a last layer that may be shared.

    ``shared`` is an externally owned module; passing the same instance to both
    domain encoders makes their last layer one parameter block.
    """

    def __init__(self, shared: nn.Module, in_ch=1, base=16, content_ch=64, n_down=3):
        super().__init__()
        blocks = [conv_block(in_ch, base, 7, 1)]
        ch = base
        for i in range(n_down):
            out = content_ch if i == n_down - 1 else min(ch * 2, content_ch)
            blocks.append(conv_block(ch, out, 4, 2))
            ch = out
        self.blocks = nn.Sequential(*blocks)
        self.shared = shared
        self.downsample = 2 ** n_down

    def forward(self, x):
        return self.shared(self.blocks(x))


class StyleEncoder(nn.Module):
    """Conv stack + global average pool to a flat style vector."""

    def __init__(self, in_ch=1, base=16, style_dim=8, n_down=3):
        super().__init__()
        layers = [nn.Conv2d(in_ch, base, 7, 1, 3, padding_mode="reflect"), nn.ReLU(inplace=True)]
        ch = base
        for _ in range(n_down):
            layers += [nn.Conv2d(ch, ch * 2, 4, 2, 1), nn.ReLU(inplace=True)]
            ch *= 2
        self.features = nn.Sequential(*layers)
        self.head = nn.Conv2d(ch, style_dim, 1)

    def forward(self, x):
        h = F.adaptive_avg_pool2d(self.features(x), 1)
        return self.head(h).flatten(1)


class AdaIN(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.norm = nn.InstanceNorm2d(ch, affine=False)

    def forward(self, x, gamma, beta):
        return self.norm(x) * (1 + gamma[:, :, None, None]) + beta[:, :, None, None]


class AdaResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, 1, 1)
        self.conv2 = nn.Conv2d(ch, ch, 3, 1, 1)
        self.norm1 = AdaIN(ch)
        self.norm2 = AdaIN(ch)

    def forward(self, x, params):
        g1, b1, g2, b2 = params.chunk(4, dim=1)
        h = F.relu(self.norm1(self.conv1(x), g1, b1))
        h = self.norm2(self.conv2(h), g2, b2)
        return x + h


class Generator(nn.Module):
    """Decode (content, style) to an image in [0, 1].

    Style enters through adaptive instance normalization in the residual
    blocks; the upsampling path mirrors the content encoder. Upsampling
    layers use layer normalization (one group), since instance norm there
    would wipe out the per-channel statistics the style just set.
    """

    def __init__(self, content_ch=64, style_dim=8, out_ch=1, n_res=2, n_up=3, mlp_dim=64):
        super().__init__()
        self.content_ch = content_ch
        self.res = nn.ModuleList(AdaResBlock(content_ch) for _ in range(n_res))
        self.mlp = nn.Sequential(
            nn.Linear(style_dim, mlp_dim), nn.ReLU(inplace=True),
            nn.Linear(mlp_dim, 4 * content_ch * n_res),
        )
        ups = []
        ch = content_ch
        for _ in range(n_up):
            out = max(ch // 2, 8)
            ups += [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(ch, out, 3, 1, 1),
                    nn.GroupNorm(1, out), nn.ReLU(inplace=True)]
            ch = out
        self.up = nn.Sequential(*ups)
        self.out = nn.Conv2d(ch, out_ch, 3, 1, 1)

    def forward(self, content, style):
        params = self.mlp(style).chunk(len(self.res), dim=1)
        h = content
        for block, p in zip(self.res, params):
            h = block(h, p)
        return torch.sigmoid(self.out(self.up(h)))


class PatchDiscriminator(nn.Module):
    """PatchGAN (70x70 receptive field at the default depth); logits averaged per image.

    With ``spectral_norm`` every conv is spectrally normalized and the
    instance norms are dropped.
    """

    def __init__(self, in_ch=1, base=64, n_layers=3, spectral_norm=False):
        super().__init__()
        sn = nn.utils.parametrizations.spectral_norm if spectral_norm else (lambda m: m)
        layers = [sn(nn.Conv2d(in_ch, base, 4, 2, 1)), nn.LeakyReLU(0.2, inplace=True)]
        ch = base
        for i in range(1, n_layers + 1):
            out = base * min(2 ** i, 8)
            stride = 2 if i < n_layers else 1
            layers.append(sn(nn.Conv2d(ch, out, 4, stride, 1)))
            if not spectral_norm:
                layers.append(nn.InstanceNorm2d(out))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            ch = out
        layers.append(sn(nn.Conv2d(ch, 1, 4, 1, 1)))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return torch.sigmoid(self.net(x).mean(dim=(1, 2, 3)))


class ContentDiscriminator(nn.Module):
    """Small conv classifier on content maps: probability that the map came from the target domain."""

    def __init__(self, content_ch=64, base=64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(content_ch, base, 3, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base, base, 3, 1, 1), nn.LeakyReLU(0.2, inplace=True),
        )
        self.fc = nn.Linear(base, 1)

    def forward(self, c):
        h = F.adaptive_avg_pool2d(self.net(c), 1).flatten(1)
        return torch.sigmoid(self.fc(h)).squeeze(1)
