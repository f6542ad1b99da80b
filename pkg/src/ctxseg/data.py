"""Synthetic segmentation corpus: textured backgrounds with colored shapes,
a seen/unseen category split, per-category embeddings, label downsampling.

Scenes are a pure function of (spec, seed), and a corpus is a list of
(sample id, seed, role) manifest rows, so any corpus regenerates exactly
from its manifest.  Category ids must be contiguous 0..K-1; the ignore id
lives outside that range and maps to an all-zero one-hot row.
"""

from dataclasses import dataclass

import numpy as np

from .nn import rng as rngmod

SHAPE_KINDS = ("field", "circle", "square", "triangle", "diamond")


@dataclass(frozen=True)
class CategorySplit:
    seen: tuple
    unseen: tuple
    ignore_id: int

    def __post_init__(self):
        seen, unseen = set(self.seen), set(self.unseen)
        if seen & unseen:
            raise ValueError("seen and unseen categories overlap")
        ids = seen | unseen
        if ids != set(range(len(ids))):
            raise ValueError("category ids must be contiguous 0..K-1")
        if self.ignore_id in ids:
            raise ValueError("ignore_id collides with a category id")

    @property
    def num_categories(self):
        return len(self.seen) + len(self.unseen)


@dataclass(frozen=True)
class CategoryAttrs:
    name: str
    kind: str  # "field" for backgrounds
    color: tuple
    freq: float


@dataclass(frozen=True)
class SceneSpec:
    image_size: int
    num_objects: tuple  # inclusive (lo, hi)
    shape_attributes: dict  # category id -> CategoryAttrs
    background_categories: tuple

    def validate(self, downsample_factor=8):
        if not self.shape_attributes:
            raise ValueError("spec has zero categories")
        if self.image_size % downsample_factor:
            raise ValueError(
                f"image_size {self.image_size} not divisible by {downsample_factor}")
        tuples = [(a.kind, a.color, a.freq) for a in self.shape_attributes.values()]
        if len(set(tuples)) != len(tuples):
            raise ValueError("category attribute tuples must be unique")
        for cid, attrs in self.shape_attributes.items():
            if attrs.kind not in SHAPE_KINDS:
                raise ValueError(f"unknown shape kind {attrs.kind!r}")
            if (attrs.kind == "field") != (cid in self.background_categories):
                raise ValueError(f"category {cid}: kind/background mismatch")


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    labels: np.ndarray  # (H, W) int64


@dataclass
class LabelMap:
    onehot: np.ndarray  # (h, w, K) float64
    ids: np.ndarray  # (h, w) int64


def default_spec(image_size=72):
    """Ten categories: two textured backgrounds, eight shapes.  The unseen
    pair (8, 9) recombines shape kinds and colors that appear among the
    seen shapes, so attribute embeddings put them near their relatives.

    Every attribute an unseen category uses is carried by seen
    categories: triangles appear in red and blue, diamonds in cyan and
    yellow, and the unseen colors red and cyan each appear in two seen
    kinds.  No seen category is identifiable by color alone; among the
    shapes share one stripe frequency, so the kind is coded purely by
    stripe orientation: features must carry color and orientation
    jointly, which keeps the unseen recombinations resolvable."""
    attrs = {
        0: CategoryAttrs("meadow", "field", (0.16, 0.44, 0.20), 2.0),
        1: CategoryAttrs("sand", "field", (0.76, 0.70, 0.48), 3.0),
        2: CategoryAttrs("red circle", "circle", (0.85, 0.15, 0.15), 8.0),
        3: CategoryAttrs("cyan circle", "circle", (0.10, 0.80, 0.85), 8.0),
        4: CategoryAttrs("red triangle", "triangle", (0.85, 0.15, 0.15), 8.0),
        5: CategoryAttrs("blue triangle", "triangle", (0.15, 0.25, 0.80), 8.0),
        6: CategoryAttrs("cyan diamond", "diamond", (0.10, 0.80, 0.85), 8.0),
        7: CategoryAttrs("yellow diamond", "diamond", (0.90, 0.80, 0.10), 8.0),
        8: CategoryAttrs("cyan triangle", "triangle", (0.10, 0.80, 0.85), 8.0),
        9: CategoryAttrs("red diamond", "diamond", (0.85, 0.15, 0.15), 8.0),
    }
    return SceneSpec(image_size=image_size, num_objects=(2, 4),
                     shape_attributes=attrs, background_categories=(0, 1))


def default_split():
    return CategorySplit(seen=tuple(range(8)), unseen=(8, 9), ignore_id=255)


# stripe direction per kind: the texture orientation is a local cue for the
# shape kind, visible inside any small window of the object interior
_STRIPE_AXES = {"circle": (0.0, 1.0), "square": (1.0, 0.0),
                "triangle": (0.7071, 0.7071), "diamond": (0.7071, -0.7071)}


def _shape_mask(kind, size, cx, cy, r):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if kind == "square":
        return np.maximum(np.abs(xx - cx), np.abs(yy - cy)) <= r
    if kind == "triangle":
        t = (yy - (cy - r)) / (2.0 * r)
        return (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= t * r)
    if kind == "diamond":
        return np.abs(xx - cx) + np.abs(yy - cy) <= r
    raise ValueError(f"kind {kind!r} is not drawable")


def generate_scene(spec: SceneSpec, seed: int) -> Sample:
    """Render one scene deterministically from (spec, seed)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    bg = int(rng.choice(np.asarray(spec.background_categories)))
    battrs = spec.shape_attributes[bg]
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wave = 0.06 * np.sin(2.0 * np.pi * battrs.freq * (xx + yy) / size + phase)
    image = np.clip(np.asarray(battrs.color) + wave[:, :, None], 0.0, 1.0)
    labels = np.full((size, size), bg, dtype=np.int64)

    shape_ids = [c for c in sorted(spec.shape_attributes)
                 if c not in spec.background_categories]
    lo, hi = spec.num_objects
    for _ in range(int(rng.integers(lo, hi + 1))):
        cid = int(rng.choice(np.asarray(shape_ids)))
        attrs = spec.shape_attributes[cid]
        r = rng.uniform(0.19, 0.30) * size
        cx = rng.uniform(r, size - r)
        cy = rng.uniform(r, size - r)
        mask = _shape_mask(attrs.kind, size, cx, cy, r)
        axis = _STRIPE_AXES[attrs.kind]
        coord = axis[0] * xx + axis[1] * yy
        # the grating adds a channel-uniform brightness wave on top of a
        # dimmed flat color, so pixel values decompose additively into a
        # color part and an orientation part; amplitudes keep every channel
        # inside [0, 1] without clipping, preserving the decomposition
        stripes = 0.22 * np.sin(2.0 * np.pi * attrs.freq * coord / size)
        fill = np.clip(0.55 * np.asarray(attrs.color) + 0.25
                       + stripes[:, :, None], 0.0, 1.0)
        image = np.where(mask[:, :, None], fill, image)
        labels[mask] = cid

    image = np.clip(image + rng.normal(0.0, 0.015, image.shape), 0.0, 1.0)
    return Sample(image=image, labels=labels)


def mask_unseen(sample: Sample, split: CategorySplit) -> Sample:
    labels = sample.labels.copy()
    labels[np.isin(labels, split.unseen)] = split.ignore_id
    return Sample(image=sample.image, labels=labels)


def onehot_labels(ids, split: CategorySplit):
    k = split.num_categories
    flat = ids.reshape(-1)
    out = np.zeros((flat.size, k), dtype=np.float64)
    valid = flat != split.ignore_id
    out[np.arange(flat.size)[valid], flat[valid]] = 1.0
    return out.reshape(ids.shape + (k,))


def downsample_labels(labels, factor, split: CategorySplit) -> LabelMap:
    """Nearest-neighbor downsampling: each output id is the top-left pixel
    of its factor x factor block."""
    h, w = labels.shape
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} labels not divisible by factor {factor}")
    ids = np.ascontiguousarray(labels[::factor, ::factor])
    return LabelMap(onehot=onehot_labels(ids, split), ids=ids)


# -- embeddings --------------------------------------------------------------

@dataclass(frozen=True)
class EmbeddingTable:
    dim: int
    vectors: dict  # category id -> (dim,) float64

    def __post_init__(self):
        for cid, v in self.vectors.items():
            if v.shape != (self.dim,):
                raise ValueError(f"category {cid}: vector dim {v.shape} != {self.dim}")
            if not np.isfinite(v).all():
                raise ValueError(f"category {cid}: non-finite embedding")

    def matrix(self, ids):
        return np.stack([self.vectors[c] for c in ids])


def attribute_embeddings(split: CategorySplit, spec: SceneSpec, dim=32):
    """Embed each category by (kind one-hot, rgb, scaled texture frequency),
    zero-padded to ``dim`` and L2-normalized.  Categories sharing a kind or
    a color land near each other, which is what lets the unseen transfer."""
    spec.validate()
    base = len(SHAPE_KINDS) + 3 + 1
    if dim < base:
        raise ValueError(f"dim must be >= {base}")
    fmax = max(a.freq for a in spec.shape_attributes.values())
    vectors = {}
    for cid in split.seen + split.unseen:
        attrs = spec.shape_attributes[cid]
        v = np.zeros(dim)
        v[SHAPE_KINDS.index(attrs.kind)] = 1.0
        v[len(SHAPE_KINDS):len(SHAPE_KINDS) + 3] = attrs.color
        v[len(SHAPE_KINDS) + 3] = attrs.freq / fmax
        vectors[cid] = v / np.linalg.norm(v)
    return EmbeddingTable(dim=dim, vectors=vectors)


def load_word_vectors(path):
    """Read a word-vector file: one `<token> <v_1> ... <v_d>` per line."""
    words, dim = {}, None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            vec = np.array([float(x) for x in parts[1:]])
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ValueError(
                    f"{path}:{lineno}: dim {vec.size} != {dim} of earlier entries")
            words[parts[0]] = vec
    if not words:
        raise ValueError(f"{path}: no records")
    return words, dim


def file_embeddings(split: CategorySplit, names, path):
    """Build the table from a word-vector file; multi-token category names
    average their tokens elementwise."""
    words, dim = load_word_vectors(path)
    vectors = {}
    for cid in split.seen + split.unseen:
        toks = names[cid].split()
        missing = [t for t in toks if t not in words]
        if missing:
            raise KeyError(f"category {names[cid]!r}: tokens {missing} not in {path}")
        vectors[cid] = np.mean([words[t] for t in toks], axis=0)
    return EmbeddingTable(dim=dim, vectors=vectors)


def build_embeddings(split, spec, mode="attribute", path=None, dim=32):
    if mode == "attribute":
        return attribute_embeddings(split, spec, dim=dim)
    if mode == "file":
        names = {c: a.name for c, a in spec.shape_attributes.items()}
        return file_embeddings(split, names, path)
    raise ValueError(f"unknown embedding mode {mode!r}")


def write_word_vectors(spec, table, path):
    """Dump per-token vectors (token = mean of the attribute embeddings of
    the categories whose name contains it) in the word-vector file format."""
    tokens = {}
    for cid, attrs in spec.shape_attributes.items():
        for tok in attrs.name.split():
            tokens.setdefault(tok, []).append(table.vectors[cid])
    with open(path, "w", encoding="utf-8") as fh:
        for tok in sorted(tokens):
            vec = np.mean(tokens[tok], axis=0)
            fh.write(tok + " " + " ".join(f"{x:.8f}" for x in vec) + "\n")


# -- manifests and corpora ---------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    sample_id: int
    seed: int
    role: str  # train | test


def plan_corpus(n_train, n_test, master_seed):
    """Draw per-sample seeds from the data stream of ``master_seed``."""
    rng = rngmod.stream(master_seed, "data")
    entries = []
    for i in range(n_train + n_test):
        role = "train" if i < n_train else "test"
        entries.append(ManifestEntry(i, int(rng.integers(0, 2 ** 62)), role))
    return entries


def write_manifest(entries, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sample_id,seed,role\n")
        for e in entries:
            fh.write(f"{e.sample_id},{e.seed},{e.role}\n")


def read_manifest(path):
    entries = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "sample_id,seed,role":
            raise ValueError(f"{path}: bad manifest header {header!r}")
        for line in fh:
            if not line.strip():
                continue
            sid, seed, role = line.strip().split(",")
            if role not in ("train", "test"):
                raise ValueError(f"{path}: bad role {role!r}")
            entries.append(ManifestEntry(int(sid), int(seed), role))
    return entries


def materialize(spec, entries, role=None):
    return [generate_scene(spec, e.seed) for e in entries
            if role is None or e.role == role]


def batch_indices(n, batch_size, rng):
    """Yield shuffled index batches covering 0..n-1 once (one epoch)."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
