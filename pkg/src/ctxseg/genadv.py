"""Feature generator, classifier/discriminator heads, and the training
losses of the adversarial objective.

The generator maps per-pixel (latent code, category embedding) pairs to
fake features through three pixel-independent linear stages.  Classifier
and discriminator share their first conv layer; in pixel mode it is 1x1,
in patch mode a stack of 3x3 convs widens each pixel's evidence to a
k x k patch.  D maximizes the adversarial term while everything else
minimizes the full objective, so one training step applies exactly two
optimizer updates: d-head ascent, then main descent with D frozen.
"""

import numpy as np

from .nn import autograd as ag
from .nn.layers import Conv2d, Linear, dropout, merge_params


class Generator:
    """x~ = G(z, w): a linear category prototype, gated and shifted by a
    code-driven MLP, applied per pixel.

    The embedding reaches the output only through the linear map
    ``proto``, so the category-to-feature mapping is exactly linear in w:
    an unseen attribute recombination inherits its prototype from the
    seen categories instead of relying on the arbitrary extrapolation of
    a nonlinear mixer.  The modulation heads start small, so early
    training fits prototypes first and the code pathway refines them."""

    def __init__(self, rng, code_dim, embed_dim, out_dim, hidden=128,
                 drop_rate=0.2, name="gen"):
        self.drop_rate = drop_rate
        self.proto = Linear(rng, embed_dim, out_dim, name=f"{name}.proto")
        self.l0 = Linear(rng, code_dim, hidden, name=f"{name}.l0")
        self.l1 = Linear(rng, hidden, hidden, name=f"{name}.l1")
        self.scale = Linear(rng, hidden, out_dim, name=f"{name}.scale")
        self.shift = Linear(rng, hidden, out_dim, name=f"{name}.shift")
        self.scale.weight.data *= 0.1
        self.shift.weight.data *= 0.1

    def __call__(self, codes, embeds, rng=None, training=False):
        """codes (..., l) and embeds (..., d) with equal leading shape."""
        codes, embeds = ag._wrap(codes), ag._wrap(embeds)
        if codes.shape[:-1] != embeds.shape[:-1]:
            raise ValueError(
                f"shape mismatch {codes.shape[:-1]} vs {embeds.shape[:-1]}")
        lead = codes.shape[:-1]
        z = ag.reshape(codes, (-1, codes.shape[-1]))
        w = ag.reshape(embeds, (-1, embeds.shape[-1]))
        p = self.proto(w)
        h = dropout(ag.leaky_relu(self.l0(z), 0.2), self.drop_rate, rng,
                    training)
        h = dropout(ag.leaky_relu(self.l1(h), 0.2), self.drop_rate, rng,
                    training)
        x = ag.add(ag.mul(p, ag.add(self.scale(h), 1.0)), self.shift(h))
        return ag.reshape(x, lead + (x.shape[-1],))

    def params(self):
        return merge_params(self.proto, self.l0, self.l1, self.scale,
                            self.shift)


class Heads:
    """Classifier and discriminator over feature maps, sharing a stem.

    mode "pixel": 1x1 shared conv (each pixel scored alone).
    mode "patch": (k-1)/2 chained 3x3 convs, so a pixel's score sees its
    k x k neighborhood.  The shared stem and classifier head belong to the
    classifier parameter group; the discriminator owns only its head, which
    is what the D-phase of training updates.

    Stem inputs are RMS-normalized per pixel, so category and realness
    judgments are scale-invariant: synthetic features cannot buy either
    head off with magnitude alone.
    """

    def __init__(self, rng, in_dim, num_categories, mode="pixel", k=3,
                 hidden=64, name="heads"):
        if mode not in ("pixel", "patch"):
            raise ValueError(f"unknown head mode {mode!r}")
        if mode == "patch" and (k < 3 or k % 2 == 0):
            raise ValueError("patch mode needs odd k >= 3")
        self.mode, self.k = mode, k
        if mode == "pixel":
            self.stem = [Conv2d(rng, in_dim, hidden, k=1, name=f"{name}.stem0")]
        else:
            dims = [in_dim] + [hidden] * ((k - 1) // 2)
            self.stem = [
                Conv2d(rng, dims[i], dims[i + 1], k=3, padding=1,
                       name=f"{name}.stem{i}")
                for i in range((k - 1) // 2)
            ]
        self.c_head = Conv2d(rng, hidden, num_categories, k=1, name=f"{name}.cls")
        self.d_head = Conv2d(rng, hidden, 1, k=1, name=f"{name}.dsc")

    def _shared(self, x):
        x = ag._wrap(x)
        ms = ag.tmean(ag.mul(x, x), axis=-1, keepdims=True)
        x = ag.mul(x, ag.power(ag.add(ms, 1e-6), -0.5))
        for conv in self.stem:
            x = ag.leaky_relu(conv(x), 0.2)
        return x

    def classify(self, x):
        """Per-pixel category logits (N, h, w, K)."""
        return self.c_head(self._shared(x))

    def discriminate(self, x):
        """Per-pixel realness scores in [0, 1], shape (N, h, w)."""
        out = ag.sigmoid(self.d_head(self._shared(x)))
        return ag.reshape(out, out.shape[:-1])

    def params(self):
        """Shared stem + classifier head (the classifier group)."""
        return merge_params(*self.stem, self.c_head)

    def d_params(self):
        """What the discriminator phase is allowed to update."""
        return self.d_head.params()


# -- losses ------------------------------------------------------------------

def _masked_mean(per_pixel, mask):
    count = float(mask.sum())
    if count == 0:
        return ag.Tensor(0.0)
    return ag.mul(ag.tsum(ag.mul(per_pixel, mask)), 1.0 / count)


def loss_cls(logits, onehot):
    """Cross-entropy, averaged over non-ignore pixels (all-zero rows)."""
    onehot = np.asarray(onehot, dtype=np.float64)
    if logits.shape != onehot.shape:
        raise ValueError(f"shape mismatch {logits.shape} vs {onehot.shape}")
    mask = onehot.sum(axis=-1)
    lsm = ag.log_softmax(logits, axis=-1)
    per_pixel = ag.mul(ag.tsum(ag.mul(lsm, onehot), axis=-1), -1.0)
    return _masked_mean(per_pixel, mask)


def loss_adv_train(real_scores, fake_scores, seen_mask):
    """Mean over seen pixels of D(x)^2 + (1 - D(x~))^2: D drives this up,
    everyone else drives it down."""
    seen_mask = np.asarray(seen_mask, dtype=np.float64)
    per = ag.add(real_scores * real_scores,
                 (1.0 - fake_scores) * (1.0 - fake_scores))
    return _masked_mean(per, seen_mask)


def loss_rec(x_real, x_fake, seen_mask):
    """Mean over seen pixels of the squared L2 distance between the real
    and generated feature vectors."""
    seen_mask = np.asarray(seen_mask, dtype=np.float64)
    diff = x_real - x_fake
    return _masked_mean(ag.tsum(diff * diff, axis=-1), seen_mask)


def check_finite(record):
    bad = [k for k, v in record.items() if not np.isfinite(v)]
    if bad:
        raise RuntimeError(f"non-finite training losses: {record}")
    return record
