"""Full model assembly: encoder, contextual module, generator, heads.

Parameter groups: the discriminator head is its own group (the ascent
phase of a training step updates it alone); everything else, the shared
stem included, belongs to the main group and descends the full objective
while D stays frozen.
"""

import numpy as np

from . import genadv, segnet
from .nn import autograd as ag


class Model:
    def __init__(self, rng, num_categories, embed_dim, feat_dim=64,
                 enc_widths=(16, 32, 48), gen_hidden=128, head_hidden=64,
                 mode="pixel", patch_k=3):
        self.num_categories = num_categories
        self.embed_dim = embed_dim
        self.feat_dim = feat_dim
        self.mode, self.patch_k = mode, patch_k
        self.encoder = segnet.Encoder(rng, out_channels=feat_dim,
                                      widths=enc_widths)
        self.ctx = segnet.ContextualModule(rng, feat_dim)
        self.gen = genadv.Generator(rng, feat_dim, embed_dim, feat_dim,
                                    hidden=gen_hidden)
        self.heads = genadv.Heads(rng, feat_dim, num_categories,
                                  mode=mode, k=patch_k, hidden=head_hidden)

    def main_params(self):
        return {**self.encoder.params(), **self.ctx.params(),
                **self.gen.params(), **self.heads.params()}

    def d_params(self):
        return self.heads.d_params()

    def all_params(self):
        return {**self.main_params(), **self.d_params()}

    def finetune_params(self):
        """Finetuning adapts the generator and classifier group only; the
        encoder and contextual module stay frozen."""
        return {**self.gen.params(), **self.heads.params()}


def embed_map(onehot, emb_matrix):
    """Per-pixel embeddings from one-hot labels; ignore rows become zero."""
    return np.asarray(onehot) @ np.asarray(emb_matrix)


def forward_losses(model, images, onehot, emb_matrix, eps, drop_rng,
                   lam1=10.0, lam2=100.0, constant_code=False):
    """One full forward pass; returns (total, record) where record holds the
    four loss Tensors.  eps and drop_rng are supplied by the caller so a
    step's two phases (and tests) can replay identical draws.

    constant_code is the mode-collapse ablation: the generator is fed an
    all-zero code map instead of the contextual one, so it can only learn
    a single feature per embedding."""
    f = model.encoder(images)
    z, mu, sigma, _ = model.ctx.forward(f, eps)
    x = segnet.residual_attention(f, z)
    wmap = embed_map(onehot, emb_matrix)
    code = np.zeros(z.shape) if constant_code else z
    x_fake = model.gen(code, wmap, drop_rng, training=drop_rng is not None)

    seen_mask = np.asarray(onehot).sum(axis=-1)
    l_cls = genadv.loss_cls(model.heads.classify(x), onehot)
    l_adv = genadv.loss_adv_train(model.heads.discriminate(x),
                                  model.heads.discriminate(x_fake), seen_mask)
    l_rec = genadv.loss_rec(x, x_fake, seen_mask)
    l_kl = segnet.kl_loss(mu, sigma)
    total = l_cls + l_adv + ag.mul(l_rec, lam1) + ag.mul(l_kl, lam2)
    record = {"l_cls": l_cls, "l_adv": l_adv, "l_rec": l_rec, "l_kl": l_kl}
    return total, record


def training_step(model, images, onehot, emb_matrix, opt_d, opt_main, rngs,
                  lam1=10.0, lam2=100.0, constant_code=False):
    """Two-phase adversarial step; returns the four losses as floats."""
    from .nn.optim import zero_grad

    images = np.asarray(images, dtype=np.float64)
    n, h, w = images.shape[0], images.shape[1] // segnet.DOWNSAMPLE_FACTOR, \
        images.shape[2] // segnet.DOWNSAMPLE_FACTOR
    eps = rngs["latent"].standard_normal((n, h, w, model.feat_dim))
    drop_seed = int(rngs["dropout"].integers(0, 2 ** 62))
    every = model.all_params()

    # phase 1: D ascends the adversarial term
    _, record = forward_losses(model, images, onehot, emb_matrix, eps,
                               np.random.default_rng(drop_seed), lam1, lam2,
                               constant_code)
    zero_grad(every)
    record["l_adv"].backward()
    opt_d.step(model.d_params(), ascend=True)

    # phase 2: everything else descends the full objective, D frozen
    total, record = forward_losses(model, images, onehot, emb_matrix, eps,
                                   np.random.default_rng(drop_seed), lam1,
                                   lam2, constant_code)
    zero_grad(every)
    total.backward()
    opt_main.step(model.main_params())

    return genadv.check_finite(
        {k: float(v.data) for k, v in record.items()})


def predict(model, images):
    """Inference: deterministic code z = mu, argmax over classifier logits.
    Returns (pred_ids (N, h, w), logits Tensor)."""
    f = model.encoder(np.asarray(images, dtype=np.float64))
    a = model.ctx.context_selector(f)
    mu, _ = model.ctx.latent_distribution(model.ctx.context_maps(f), a)
    x = segnet.residual_attention(f, mu)
    logits = model.heads.classify(x)
    return logits.data.argmax(axis=-1), logits
