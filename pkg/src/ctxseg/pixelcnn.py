"""Autoregressive category-patch model: masked 3x3 convolutions over
word-embedding patches predicting a per-pixel category distribution.

Mask A (first layer) blanks the center tap and everything after it in
raster order; mask B (later layers) keeps the center.  This makes each
pixel's distribution depend only on strictly-earlier pixels, exactly, so
training runs in parallel while generation walks the raster sequentially.
Positions not yet generated hold the zero embedding, which the masks
guarantee is never read before it is written.
"""

import numpy as np

from .nn import autograd as ag
from .nn.layers import Conv2d, merge_params

MASK_A = np.array([[1, 1, 1], [1, 0, 0], [0, 0, 0]], dtype=np.float64)
MASK_B = np.array([[1, 1, 1], [1, 1, 0], [0, 0, 0]], dtype=np.float64)


def make_mask(kind):
    if kind == "A":
        return MASK_A.copy()
    if kind == "B":
        return MASK_B.copy()
    raise ValueError(f"mask kind must be 'A' or 'B', got {kind!r}")


class PixelCNN:
    """One mask-A conv, three mask-B convs, then a 1x1 projection."""

    def __init__(self, rng, embed_dim, num_categories, k=3, hidden=32,
                 name="pcnn"):
        if k < 3 or k % 2 == 0:
            raise ValueError("patch size must be odd and >= 3")
        self.k = k
        self.num_categories = num_categories
        self.layers = [Conv2d(rng, embed_dim, hidden, k=3, padding=1,
                              mask=MASK_A, name=f"{name}.m0")]
        self.layers += [Conv2d(rng, hidden, hidden, k=3, padding=1,
                               mask=MASK_B, name=f"{name}.m{i}")
                        for i in (1, 2, 3)]
        self.out = Conv2d(rng, hidden, num_categories, k=1, name=f"{name}.out")

    def logits(self, bw):
        """(N, k, k, d) embedding patches -> (N, k, k, K) logits."""
        x = ag._wrap(bw)
        for conv in self.layers:
            x = ag.leaky_relu(conv(x), 0.2)
        return self.out(x)

    def forward(self, bw):
        """Per-pixel category distributions (rows sum to 1)."""
        return ag.softmax(self.logits(bw), axis=-1)

    def params(self):
        return merge_params(*self.layers, self.out)


def slice_patches(ids, k, split):
    """All k x k sliding windows of a label map whose pixels are all seen."""
    ids = np.asarray(ids)
    h, w = ids.shape
    seen = np.isin(ids, split.seen)
    out = []
    for y in range(h - k + 1):
        for x in range(w - k + 1):
            if seen[y:y + k, x:x + k].all():
                out.append(ids[y:y + k, x:x + k].copy())
    return out


def train_step(model, by_batch, table, opt):
    """One descent step on the mean cross entropy of real category patches."""
    by = np.asarray(by_batch)
    bw = embed_patches(by, table)
    lsm = ag.log_softmax(model.logits(bw), axis=-1)
    onehot = np.eye(model.num_categories)[by]
    loss = ag.mul(ag.tmean(ag.tsum(ag.mul(lsm, onehot), axis=-1)), -1.0)
    params = model.params()
    for p in params.values():
        p.grad = None
    loss.backward()
    opt.step(params)
    return float(loss.data)


def embed_patches(by, table):
    """Category-id patches -> embedding patches via the table."""
    order = sorted(table.vectors)
    if order != list(range(len(order))):
        raise ValueError("embedding table ids must be contiguous")
    mat = table.matrix(order)
    return mat[np.asarray(by)]


def generate_patches(model, table, preset_cats, lam_f, rng):
    """Sample len(preset_cats) patches in lock-step; each slot's first
    lam_f raster pixels are preset to its category, the rest are drawn
    sequentially from the model's conditionals."""
    k = model.k
    if not 0 <= lam_f <= k * k - 1:
        raise ValueError(f"lam_f must be in [0, {k * k - 1}], got {lam_f}")
    n = len(preset_cats)
    mat = embed_patches(np.arange(model.num_categories).reshape(1, 1, -1),
                        table)[0, 0]
    ids = np.zeros((n, k * k), dtype=np.int64)
    bw = np.zeros((n, k, k, mat.shape[1]))
    for t in range(lam_f):
        ids[:, t] = preset_cats
        bw[:, t // k, t % k, :] = mat[preset_cats]
    for t in range(lam_f, k * k):
        probs = model.forward(bw).data[:, t // k, t % k, :]
        draw = rng.random(n)
        picked = (draw[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
        picked = np.minimum(picked, model.num_categories - 1)
        ids[:, t] = picked
        bw[:, t // k, t % k, :] = mat[picked]
    return ids.reshape(n, k, k)


def generate_patch(model, table, preset, rng):
    """Single-slot form of generate_patches; preset is (category, lam_f)
    or None for a fully autoregressive sample."""
    cat, lam_f = preset if preset is not None else (0, 0)
    return generate_patches(model, table, np.array([cat]), lam_f, rng)[0]


class SamplingStarvation(RuntimeError):
    pass


def sample_mixed(model, table, split, n, lam_f=5, max_cats=3, retry_cap=200,
                 rng=None):
    """n constrained mixed patches: first lam_f pixels one random unseen
    category, at most max_cats distinct ids overall.  Rejected draws are
    retried up to retry_cap times per slot."""
    if n < 1:
        raise ValueError("n must be >= 1")
    unseen = np.asarray(split.unseen)
    out = [None] * n
    pending = list(range(n))
    attempts = accepted = 0
    for _ in range(retry_cap):
        if not pending:
            break
        cats = unseen[rng.integers(0, len(unseen), size=len(pending))]
        patches = generate_patches(model, table, cats, lam_f, rng)
        attempts += len(pending)
        still = []
        for slot, patch in zip(pending, patches):
            if np.unique(patch).size <= max_cats:
                out[slot] = patch
                accepted += 1
            else:
                still.append(slot)
        pending = still
    if pending:
        raise SamplingStarvation(
            f"{len(pending)}/{n} slots starved after {retry_cap} retries "
            f"(acceptance rate {accepted / attempts:.3f})")
    return out


def sample_pure(split, n, rng, k=3):
    """n constant patches, seen/unseen groups equally likely, uniform
    within each group."""
    if n < 1:
        raise ValueError("n must be >= 1")
    groups = (np.asarray(split.seen), np.asarray(split.unseen))
    out = []
    for _ in range(n):
        group = groups[int(rng.integers(0, 2))]
        cat = int(group[rng.integers(0, len(group))])
        out.append(np.full((k, k), cat, dtype=np.int64))
    return out


def mix(pure, mixed, lam_r, rng):
    """Fuse pure and mixed patches at lam_r : 1, shuffled."""
    if lam_r <= 0:
        raise ValueError("lam_r must be > 0")
    m_used = min(len(mixed), int(round(len(pure) / lam_r)))
    p_used = min(len(pure), int(round(lam_r * m_used))) if m_used else len(pure)
    combined = list(pure[:p_used]) + list(mixed[:m_used])
    order = rng.permutation(len(combined))
    return [combined[i] for i in order]


def log_likelihood(model, table, by):
    """Teacher-forced sum over raster steps of log p_t[c_t]."""
    by = np.asarray(by)
    probs = model.forward(embed_patches(by[None], table)).data[0]
    flat = probs.reshape(-1, model.num_categories)
    return float(np.log(flat[np.arange(flat.shape[0]), by.reshape(-1)]).sum())


def write_patches(path, patches, k, lam_f, seed):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"k={k} lam_f={lam_f} seed={seed}\n")
        for p in patches:
            fh.write(" ".join(str(int(c)) for c in np.asarray(p).reshape(-1)))
            fh.write("\n")


def read_patches(path):
    with open(path, encoding="utf-8") as fh:
        header = dict(kv.split("=") for kv in fh.readline().split())
        k = int(header["k"])
        patches = [np.array([int(c) for c in line.split()]).reshape(k, k)
                   for line in fh if line.strip()]
    return patches, int(header["lam_f"]), int(header["seed"])


def rank_patches(model, table, patches):
    """(patch, log-likelihood) pairs, most likely first."""
    scored = [(p, log_likelihood(model, table, p)) for p in patches]
    return sorted(scored, key=lambda t: -t[1])
