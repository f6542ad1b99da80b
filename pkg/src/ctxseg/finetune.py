"""Classifier adaptation on synthetic features.

Synthetic batches pair sampled label maps with their embeddings and fresh
latent codes; the generator turns them into fake features and {G, C} are
finetuned against them while the encoder and contextual module stay
frozen.  Pixel-wise batches draw every pixel independently (seen and
unseen balanced); patch-wise batches tile generated category patches,
share one code per patch cell, and mask the loss down to the positions
whose conv window stays inside a single patch.
"""

from dataclasses import dataclass

import numpy as np

from . import data, model as modellib, pixelcnn, segnet
from .nn import autograd as ag
from .nn.optim import zero_grad

PATCH_SOURCES = ("pure", "mixed-random", "mixed-random-constrained",
                 "mixed-pixelcnn", "mixed-pixelcnn-constrained", "pure+mixed")


@dataclass
class SyntheticBatch:
    labels: data.LabelMap  # ids (N, h, w), onehot (N, h, w, K)
    embeddings: np.ndarray  # (N, h, w, d)
    codes: np.ndarray  # (N, h, w, l)
    valid_mask: np.ndarray  # (N, h, w)


def _label_map(ids, split):
    return data.LabelMap(onehot=data.onehot_labels(ids, split), ids=ids)


def build_pixelwise_batch(table, split, h, w, rng, n=1, code_dim=64):
    """Independent pixels, seen and unseen counts equal within one."""
    ids = np.empty((n, h, w), dtype=np.int64)
    seen = np.asarray(split.seen)
    unseen = np.asarray(split.unseen)
    total = h * w
    n_seen = (total + 1) // 2
    for i in range(n):
        flat = np.concatenate([
            seen[rng.integers(0, len(seen), size=n_seen)],
            unseen[rng.integers(0, len(unseen), size=total - n_seen)],
        ])
        ids[i] = flat[rng.permutation(total)].reshape(h, w)
    order = sorted(table.vectors)
    emb = table.matrix(order)[ids]
    codes = rng.standard_normal((n, h, w, code_dim))
    return SyntheticBatch(_label_map(ids, split), emb, codes, np.ones((n, h, w)))


def valid_loss_mask(h, w, k):
    """1 exactly where a k x k window (stride 1, pad (k-1)/2) fits inside a
    single k x k tile: the center pixel of each tile."""
    if k % 2 == 0 or k < 1:
        raise ValueError("k must be odd and positive")
    if h % k or w % k:
        raise ValueError(f"{h}x{w} not divisible by patch size {k}")
    mask = np.zeros((h, w))
    mask[(k // 2)::k, (k // 2)::k] = 1.0
    return mask


def build_patchwise_batch(patches, table, split, h, w, rng, n=1, code_dim=64):
    """Tile category patches into n label maps; one shared code per cell."""
    k = np.asarray(patches[0]).shape[0]
    if h % k or w % k:
        raise ValueError(f"{h}x{w} not divisible by patch size {k}")
    cells_y, cells_x = h // k, w // k
    need = n * cells_y * cells_x
    if len(patches) < need:
        raise ValueError(f"need {need} patches to tile, got {len(patches)}")
    ids = np.empty((n, h, w), dtype=np.int64)
    codes = np.empty((n, h, w, code_dim))
    it = iter(patches)
    for i in range(n):
        for cy in range(cells_y):
            for cx in range(cells_x):
                ys, xs = slice(cy * k, (cy + 1) * k), slice(cx * k, (cx + 1) * k)
                ids[i, ys, xs] = next(it)
                codes[i, ys, xs, :] = rng.standard_normal(code_dim)
    order = sorted(table.vectors)
    emb = table.matrix(order)[ids]
    mask = np.broadcast_to(valid_loss_mask(h, w, k), (n, h, w)).copy()
    return SyntheticBatch(_label_map(ids, split), emb, codes, mask)


def build_patch_pool(source, p_model, table, split, n, k, lam_f, lam_r, rng):
    """Patch supply for one patch-wise finetune iteration."""
    if source == "pure":
        return pixelcnn.sample_pure(split, n, rng, k=k)
    if source == "mixed-random":
        k_all = split.num_categories
        return [rng.integers(0, k_all, size=(k, k)).astype(np.int64)
                for _ in range(n)]
    if source == "mixed-random-constrained":
        unseen = np.asarray(split.unseen)
        out = []
        for _ in range(n):
            for _attempt in range(200):
                patch = rng.integers(0, split.num_categories,
                                     size=k * k).astype(np.int64)
                patch[:lam_f] = unseen[rng.integers(0, len(unseen))]
                if np.unique(patch).size <= 3:
                    out.append(patch.reshape(k, k))
                    break
            else:
                raise pixelcnn.SamplingStarvation(
                    "constrained random patches starved")
        return out
    if source == "mixed-pixelcnn":
        cats = np.zeros(n, dtype=np.int64)  # lam_f=0: presets unused
        return list(pixelcnn.generate_patches(p_model, table, cats, 0, rng))
    if source == "mixed-pixelcnn-constrained":
        return pixelcnn.sample_mixed(p_model, table, split, n,
                                     lam_f=lam_f, rng=rng)
    if source == "pure+mixed":
        n_mixed = max(1, int(round(n / (lam_r + 1))))
        n_pure = n - n_mixed
        pure = pixelcnn.sample_pure(split, n_pure, rng, k=k)
        mixed = pixelcnn.sample_mixed(p_model, table, split, n_mixed,
                                      lam_f=lam_f, rng=rng)
        return pixelcnn.mix(pure, mixed, lam_r, rng)
    raise ValueError(f"unknown patch source {source!r}; "
                     f"expected one of {PATCH_SOURCES}")


# -- the finetune step -------------------------------------------------------

def _masked_mean(per_pixel, mask):
    count = float(mask.sum())
    if count == 0:
        return ag.Tensor(0.0)
    return ag.mul(ag.tsum(ag.mul(per_pixel, mask)), 1.0 / count)


def finetune_losses(model, batch, drop_rng):
    """(l_cls, l_adv) on generated features, restricted to the valid mask."""
    x_fake = model.gen(batch.codes, batch.embeddings, drop_rng,
                       training=drop_rng is not None)
    logits = model.heads.classify(x_fake)
    lsm = ag.log_softmax(logits, axis=-1)
    per_cls = ag.mul(ag.tsum(ag.mul(lsm, batch.labels.onehot), axis=-1), -1.0)
    l_cls = _masked_mean(per_cls, batch.valid_mask)
    fake = model.heads.discriminate(x_fake)
    l_adv = _masked_mean((1.0 - fake) * (1.0 - fake), batch.valid_mask)
    return l_cls, l_adv


def finetune_step(model, batch, mode, opt_d, opt_ft, rngs, opt_ft_gen=None):
    """D ascends the adversarial term, then {G, C} descend both terms.
    The encoder and contextual module take no gradient at all.

    When ``opt_ft_gen`` is given, the generator descends under it while the
    classifier group uses ``opt_ft``.  A smaller generator step lets the
    classifier adapt to synthetic features quickly without dragging the
    generator's category placement toward wherever the classifier's untrained
    unseen logits happen to point."""
    if mode != model.heads.mode:
        raise ValueError(
            f"finetune mode {mode!r} does not match head mode {model.heads.mode!r}")
    drop_seed = int(rngs["dropout"].integers(0, 2 ** 62))
    every = model.all_params()

    _, l_adv = finetune_losses(model, batch, np.random.default_rng(drop_seed))
    zero_grad(every)
    l_adv.backward()
    opt_d.step(model.d_params(), ascend=True)

    l_cls, l_adv = finetune_losses(model, batch,
                                   np.random.default_rng(drop_seed))
    total = l_cls + l_adv
    zero_grad(every)
    total.backward()
    if opt_ft_gen is None:
        opt_ft.step(model.finetune_params())
    else:
        opt_ft.step(model.heads.params())
        opt_ft_gen.step(model.gen.params())

    record = {"l_cls": float(l_cls.data), "l_adv": float(l_adv.data)}
    if not all(np.isfinite(v) for v in record.values()):
        raise RuntimeError(f"non-finite finetune losses: {record}")
    return record


# -- scheduling --------------------------------------------------------------

@dataclass
class Schedule:
    phase: str = "pretrain"  # pretrain | alternate
    iteration: int = 0
    period: int = 100

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError("period must be > 0")


def next_phase(s: Schedule):
    if s.phase == "pretrain":
        return "train"
    return "train" if (s.iteration // s.period) % 2 == 0 else "finetune"


# -- self-training -----------------------------------------------------------

def self_training_round(model, samples, split, threshold=0.9):
    """Relabel ignore pixels the classifier is confident about; labeled
    pixels never change.  Feature-resolution probabilities are expanded
    back to image resolution by block repetition."""
    factor = segnet.DOWNSAMPLE_FACTOR
    out = []
    for sample in samples:
        _, logits = modellib.predict(model, sample.image[None])
        probs = ag.softmax(ag.Tensor(logits.data), axis=-1).data[0]
        probs = np.repeat(np.repeat(probs, factor, axis=0), factor, axis=1)
        conf = probs.max(axis=-1)
        pred = probs.argmax(axis=-1)
        labels = sample.labels.copy()
        relabel = (labels == split.ignore_id) & (conf >= threshold)
        labels[relabel] = pred[relabel]
        out.append(data.Sample(image=sample.image, labels=labels))
    return out
