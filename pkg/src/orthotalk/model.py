"""The full talking-head model and the forward passes shared by training and inference."""

import torch
from torch import nn

from .audio2motion import AudioToMotion
from .navigation import BANK_ORDER, LatentNavigation, NavigationHead, navigate, orthonormalize
from .networks import Discriminator, EmotionEnhancement, Encoder, Generator


class MotionDictionary(nn.Module):
    """Component-agnostic navigator used only while pretraining the autoencoder."""

    def __init__(self, latent_dim, n_bases):
        super().__init__()
        self.raw = nn.Parameter(torch.randn(n_bases, latent_dim) / latent_dim**0.5)
        self.head = NavigationHead(latent_dim, n_bases)

    def forward(self, latent):
        return self.head(latent) @ orthonormalize(self.raw)


class TalkingHead(nn.Module):
    def __init__(self, model_cfg):
        super().__init__()
        m = model_cfg
        self.model_cfg = dict(m)
        size, ch, d = m["image_size"], tuple(m["channels"]), m["latent_dim"]
        self.encoder = Encoder(size, ch, d)
        self.generator = Generator(size, ch, d, m["eem_levels"])
        self.discriminator = Discriminator(size, ch)
        self.navigation = LatentNavigation(d, m["bank_sizes"])
        self.eem = EmotionEnhancement(d, [ch[i] for i in self.generator.styled_levels])
        self.dictionary = MotionDictionary(d, sum(m["bank_sizes"].values()))
        self.audio = AudioToMotion(m["mel_bins"], m["audio_dim"], m["bank_sizes"], m["flow_steps"], m["text_dim"])

    @classmethod
    def from_config(cls, cfg):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg["train"]["seed"])
            return cls(cfg["model"])

    @property
    def image_size(self):
        return self.model_cfg["image_size"]

    def banks(self):
        return self.navigation.banks()

    def encode(self, images):
        return self.encoder(images)

    def motion(self, label, latent, banks=None):
        """CLN feature (offset from canonical) for one component."""
        return self.navigation.features(label, latent, banks)

    def render(self, id_latent, id_feats, motion, f_exp=None):
        """Generate from the identity latent plus mouth/pose ``motion``.

        ``f_exp`` (expression feature) is added to the driven latent and also switches on
        emotion enhancement of the identity skips.
        """
        if f_exp is None:
            return self.generator(id_latent + motion, id_feats)
        return self.generator(id_latent + motion + f_exp, id_feats, self.eem(f_exp), self.eem.gains)

    def init_banks_from_dictionary(self):
        """Seed the component banks with the pretrained dictionary rows (same span the generator reads)."""
        self.navigation.set_raw(self.dictionary.raw.detach())


def window_average_expression(model, window_latents, banks=None):
    """Mean expression feature over a window.

    ``window_latents`` is K x d (one window) or B x K x d.  Weights are averaged
    before navigating, which equals averaging the features (navigation is linear).
    """
    banks = model.banks() if banks is None else banks
    return navigate(banks["expression"], window_expression_weights(model, window_latents))


def window_expression_weights(model, window_latents):
    if window_latents.shape[-2] == 0:
        raise ValueError("empty expression window")
    return model.navigation.weights("expression", window_latents).mean(-2)


__all__ = ["BANK_ORDER", "MotionDictionary", "TalkingHead", "window_average_expression", "window_expression_weights"]
