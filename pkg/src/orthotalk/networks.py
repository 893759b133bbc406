"""Encoder, generator with identity skips, emotion enhancement (AdaIN) and discriminator."""

import torch
from torch import nn
from torch.nn import functional as F
from torch.nn.utils.parametrizations import spectral_norm

EPS = 1e-5


def to_tensor(frames):
    """H x W x 3 (or N x H x W x 3) arrays in [-1, 1] -> N x 3 x H x W float tensor."""
    t = torch.as_tensor(frames, dtype=torch.float32)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).contiguous()


def to_frames(images):
    return images.detach().permute(0, 2, 3, 1).cpu().numpy()


class ResBlock(nn.Module):
    def __init__(self, cin, cout, resample=None):
        super().__init__()
        self.resample = resample
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1, bias=False) if cin != cout else nn.Identity()

    def _resize(self, x):
        if self.resample == "down":
            return F.avg_pool2d(x, 2)
        if self.resample == "up":
            return F.interpolate(x, scale_factor=2, mode="nearest")
        return x

    def forward(self, x):
        h = F.leaky_relu(self.conv1(F.leaky_relu(x, 0.2)), 0.2)
        h = self._resize(self.conv2(h))
        return (h + self._resize(self.skip(x))) / 2**0.5


class Encoder(nn.Module):
    """Image -> (canonical-space latent, identity features from every ResBlock stage)."""

    def __init__(self, image_size=64, channels=(32, 64, 128, 256), latent_dim=64):
        super().__init__()
        self.image_size = image_size
        self.channels = tuple(channels)
        self.latent_dim = latent_dim
        self.stem = nn.Conv2d(3, channels[0], 3, padding=1)
        cin = channels[0]
        blocks = []
        for c in channels:
            blocks.append(ResBlock(cin, c, "down"))
            cin = c
        self.blocks = nn.ModuleList(blocks)
        self.bottom = image_size // 2 ** len(channels)
        if self.bottom < 1:
            raise ValueError(f"{len(channels)} stages are too many for {image_size}px images")
        self.fc1 = nn.Linear(cin * self.bottom**2, 2 * latent_dim)
        self.fc2 = nn.Linear(2 * latent_dim, latent_dim)

    def forward(self, image):
        if image.shape[-2:] != (self.image_size, self.image_size) or image.shape[1] != 3:
            raise ValueError(f"expected 3x{self.image_size}x{self.image_size} input, got {tuple(image.shape[1:])}")
        x = self.stem(image)
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        latent = self.fc2(F.leaky_relu(self.fc1(x.flatten(1)), 0.2))
        return latent, feats


def adain_modulate(features, scale, bias, eps=EPS):
    """Per-channel renormalization of ``features`` (N x C x H x W) to std ``|scale|`` and mean ``bias``.

    Uses the biased (population) spatial std.
    """
    if scale.shape[-1] != features.shape[1] or bias.shape[-1] != features.shape[1]:
        raise ValueError(f"style has {scale.shape[-1]} channels, features have {features.shape[1]}")
    mu = features.mean(dim=(2, 3), keepdim=True)
    sigma = (features.var(dim=(2, 3), keepdim=True, unbiased=False) + eps**2).sqrt()
    normed = (features - mu) / sigma
    return scale.reshape(*scale.shape[:-1], -1, 1, 1) * normed + bias.reshape(*bias.shape[:-1], -1, 1, 1)


class EmotionEnhancement(nn.Module):
    """Affine map from the expression latent to AdaIN (scale, bias) for the deepest skip levels.

    Zero-initialized with a unit scale offset, so at construction the styles are
    (1, 0) for every channel.  ``gains`` blend the modulated skip into the original
    one per channel; they start at zero, which makes the module an exact no-op until
    trained.
    """

    def __init__(self, latent_dim, level_channels):
        super().__init__()
        self.latent_dim = latent_dim
        self.level_channels = tuple(level_channels)
        self.affines = nn.ModuleList(nn.Linear(latent_dim, 2 * c) for c in self.level_channels)
        for fc in self.affines:
            nn.init.zeros_(fc.weight)
            nn.init.zeros_(fc.bias)
        self.gains = nn.ParameterList(nn.Parameter(torch.zeros(c)) for c in self.level_channels)

    def forward(self, f_exp):
        if f_exp.shape[-1] != self.latent_dim:
            raise ValueError(f"expression latent of length {f_exp.shape[-1]}, expected {self.latent_dim}")
        styles = []
        for fc, c in zip(self.affines, self.level_channels):
            out = fc(f_exp)
            styles.append((1.0 + out[..., :c], out[..., c:]))
        return styles


class Generator(nn.Module):
    """Driven latent + identity skips (+ optional emotion styles) -> image in [-1, 1]."""

    def __init__(self, image_size=64, channels=(32, 64, 128, 256), latent_dim=64, eem_levels=2):
        super().__init__()
        self.image_size = image_size
        self.channels = tuple(channels)
        self.latent_dim = latent_dim
        self.eem_levels = eem_levels
        self.bottom = image_size // 2 ** len(channels)
        deep = channels[-1]
        self.fc = nn.Linear(latent_dim, deep * self.bottom**2)
        fuse, ups = [], []
        rev = list(reversed(channels))
        for i, c in enumerate(rev):
            fuse.append(nn.Conv2d(2 * c, c, 3, padding=1))
            cout = rev[i + 1] if i + 1 < len(rev) else channels[0]
            ups.append(ResBlock(c, cout, "up"))
        self.fuse = nn.ModuleList(fuse)
        self.ups = nn.ModuleList(ups)
        self.to_rgb = nn.Conv2d(channels[0], 3, 3, padding=1)

    @property
    def styled_levels(self):
        """Indices (into the encoder's feature list) modulated by the emotion module, deepest first."""
        n = len(self.channels)
        return list(range(n - 1, n - 1 - self.eem_levels, -1))

    def forward(self, driven, id_feats, styles=None, gains=None):
        if driven.shape[-1] != self.latent_dim:
            raise ValueError(f"driven latent of length {driven.shape[-1]}, expected {self.latent_dim}")
        if len(id_feats) != len(self.channels):
            raise ValueError(f"expected {len(self.channels)} identity levels, got {len(id_feats)}")
        feats = list(id_feats)
        if styles is not None:
            for j, (level, (scale, bias)) in enumerate(zip(self.styled_levels, styles)):
                styled = adain_modulate(feats[level], scale, bias)
                if gains is not None:
                    styled = feats[level] + gains[j].view(-1, 1, 1) * (styled - feats[level])
                feats[level] = styled
        x = self.fc(driven).view(-1, self.channels[-1], self.bottom, self.bottom)
        for i, level in enumerate(reversed(range(len(self.channels)))):
            skip = feats[level]
            if skip.shape[0] != x.shape[0]:
                skip = skip.expand(x.shape[0], *skip.shape[1:])
            x = F.leaky_relu(self.fuse[i](torch.cat([x, skip], 1)), 0.2)
            x = self.ups[i](x)
        return torch.tanh(self.to_rgb(F.leaky_relu(x, 0.2)))


class Discriminator(nn.Module):
    """Image -> real/fake logit (higher means judged real); spectrally normalized layers."""

    def __init__(self, image_size=64, channels=(32, 64, 128, 256)):
        super().__init__()
        self.image_size = image_size
        layers, cin = [], 3
        for c in channels:
            layers += [spectral_norm(nn.Conv2d(cin, c, 4, stride=2, padding=1)), nn.LeakyReLU(0.2)]
            cin = c
        self.body = nn.Sequential(*layers)
        self.out = spectral_norm(nn.Linear(cin * (image_size // 2 ** len(channels)) ** 2, 1))

    def forward(self, image):
        if image.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(f"expected {self.image_size}px input, got {tuple(image.shape[-2:])}")
        return self.out(self.body(image).flatten(1)).squeeze(-1)
