"""Segmentation encoder and the contextual module.

The encoder turns an image batch into an (N, h, w, l) feature map at 1/8
resolution.  The contextual module builds three dilated-conv context maps
with 3x3 / 7x7 / 17x17 receptive fields, softmax-selects per-pixel scale
weights, and maps the weighted concatenation to a pixel-wise Gaussian
(mu, sigma) from which the contextual latent code is sampled.  The code
re-enters the features as residual attention: X = F * (1 + sigmoid(Z)).
"""

import numpy as np

from .nn import autograd as ag
from .nn.layers import Conv2d, merge_params

DOWNSAMPLE_FACTOR = 8


class Encoder:
    """Four conv blocks, strides (2, 2, 2, 1): total downsampling 8.

    The first block uses wide kernels with a magnitude activation: a
    texture-energy front end.  Oriented gratings produce a phase-invariant
    energy response and flat color fields a brightness response, so the
    downstream feature of a colored, striped region decomposes near
    additively into a color part and an orientation part.  Later blocks
    stay leaky-relu nonlinear."""

    def __init__(self, rng, out_channels=64, widths=(16, 32, 48), name="enc"):
        self.out_channels = out_channels
        chain = (3,) + tuple(widths) + (out_channels,)
        strides = (2, 2, 2, 1)
        ks = (9, 3, 3, 3)
        self.blocks = [
            Conv2d(rng, chain[i], chain[i + 1], k=ks[i], stride=strides[i],
                   padding=ks[i] // 2, name=f"{name}.b{i}")
            for i in range(4)
        ]

    def __call__(self, images):
        if not isinstance(images, ag.Tensor):
            images = ag.Tensor(images)
        n, h, w, c = images.shape
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ValueError(
                f"image {h}x{w} not divisible by factor {DOWNSAMPLE_FACTOR}")
        x = self.blocks[0](images)
        x = ag.power(ag.add(ag.mul(x, x), 1e-12), 0.5)  # smooth magnitude
        for block in self.blocks[1:-1]:
            x = ag.leaky_relu(block(x), 0.2)
        return self.blocks[-1](x)  # final block linear

    def params(self):
        return merge_params(*self.blocks)


class ContextualModule:
    """Context maps, scale selector, latent distribution."""

    def __init__(self, rng, channels, name="ctx"):
        self.channels = channels
        # chained dilated convs: receptive fields 3, 3+2*2=7, 7+2*5=17
        self.scale0 = Conv2d(rng, channels, channels, k=3, dilation=1,
                             padding=1, name=f"{name}.scale0")
        self.scale1 = Conv2d(rng, channels, channels, k=3, dilation=2,
                             padding=2, name=f"{name}.scale1")
        self.scale2 = Conv2d(rng, channels, channels, k=3, dilation=5,
                             padding=5, name=f"{name}.scale2")
        self.select = Conv2d(rng, channels, 3, k=1, name=f"{name}.select")
        self.head = Conv2d(rng, 3 * channels, 2 * channels, k=1,
                           name=f"{name}.head")

    def context_maps(self, f):
        s0 = ag.leaky_relu(self.scale0(f), 0.2)
        s1 = ag.leaky_relu(self.scale1(s0), 0.2)
        s2 = ag.leaky_relu(self.scale2(s1), 0.2)
        return s0, s1, s2

    def context_selector(self, f):
        return ag.softmax(self.select(f), axis=-1)

    def latent_distribution(self, maps, a):
        """1x1 conv over the scale-weighted concatenation -> (mu, sigma)."""
        weighted = ag.concat(
            [ag.mul(m, a[:, :, :, i:i + 1]) for i, m in enumerate(maps)],
            axis=-1)
        out = self.head(weighted)
        mu = out[:, :, :, :self.channels]
        logvar = out[:, :, :, self.channels:]
        sigma = ag.exp(ag.mul(logvar, 0.5))
        return mu, sigma

    def forward(self, f, eps):
        """Full pipeline: returns (z, mu, sigma, a)."""
        a = self.context_selector(f)
        mu, sigma = self.latent_distribution(self.context_maps(f), a)
        z = sample_latent(mu, sigma, eps)
        return z, mu, sigma, a

    def params(self):
        return merge_params(self.scale0, self.scale1, self.scale2,
                            self.select, self.head)


def sample_latent(mu, sigma, eps):
    """Reparameterized draw z = mu + eps * sigma; eps comes from a seeded
    stream so the draw is reproducible."""
    return ag.add(mu, ag.mul(sigma, np.asarray(eps, dtype=np.float64)))


def kl_loss(mu, sigma):
    """Mean over pixels and channels of KL[N(mu, sigma) || N(0, 1)]."""
    sdata = sigma.data if isinstance(sigma, ag.Tensor) else np.asarray(sigma)
    if (sdata <= 0).any():
        raise ValueError("sigma must be strictly positive")
    mu, sigma = ag._wrap(mu), ag._wrap(sigma)
    per = ag.mul(mu * mu + sigma * sigma - 1.0 - 2.0 * ag.log(sigma), 0.5)
    return ag.tmean(per)


def residual_attention(f, z):
    """X = F * (1 + sigmoid(Z))."""
    f, z = ag._wrap(f), ag._wrap(z)
    if f.shape != z.shape:
        raise ValueError(f"shape mismatch {f.shape} vs {z.shape}")
    return ag.mul(f, ag.add(ag.sigmoid(z), 1.0))
