"""Masked convs, causality, constrained generation, patch plumbing."""

import numpy as np
import pytest

from ctxseg import data, pixelcnn
from ctxseg.nn import optim


@pytest.fixture
def rng():
    return np.random.default_rng(31)


@pytest.fixture
def split():
    return data.CategorySplit(seen=(0, 1, 2, 3), unseen=(4, 5), ignore_id=255)


@pytest.fixture
def table(rng, split):
    vecs = {c: rng.normal(size=6) for c in range(6)}
    return data.EmbeddingTable(dim=6, vectors=vecs)


def test_masks():
    a = pixelcnn.make_mask("A")
    b = pixelcnn.make_mask("B")
    assert (a == [[1, 1, 1], [1, 0, 0], [0, 0, 0]]).all()
    assert (b == [[1, 1, 1], [1, 1, 0], [0, 0, 0]]).all()
    assert (a != b).sum() == 1 and a[1, 1] == 0 and b[1, 1] == 1
    with pytest.raises(ValueError):
        pixelcnn.make_mask("C")


def test_forward_rows_normalize(rng, table):
    model = pixelcnn.PixelCNN(rng, 6, 6, k=3)
    probs = model.forward(rng.normal(size=(2, 3, 3, 6))).data
    assert np.abs(probs.sum(axis=-1) - 1.0).max() < 1e-6
    assert (probs >= 0).all()


def test_first_pixel_distribution_is_input_free(rng):
    model = pixelcnn.PixelCNN(rng, 6, 6, k=3)
    a = model.forward(rng.normal(size=(1, 3, 3, 6))).data[0, 0, 0]
    b = model.forward(rng.normal(size=(1, 3, 3, 6))).data[0, 0, 0]
    assert (a == b).all()


def test_causality_exact(rng):
    for draw in range(5):
        wrng = np.random.default_rng(100 + draw)
        model = pixelcnn.PixelCNN(wrng, 4, 5, k=3)
        bw = wrng.normal(size=(1, 3, 3, 4))
        base = model.forward(bw).data[0].reshape(9, 5)
        for t in range(9):
            bumped = bw.copy()
            bumped[0, t // 3, t % 3, :] += wrng.normal(size=4)
            out = model.forward(bumped).data[0].reshape(9, 5)
            assert (out[:t + 1] == base[:t + 1]).all(), f"t={t} leaked"


def test_train_step_uniform_start_and_overfit(rng, split, table):
    model = pixelcnn.PixelCNN(rng, 6, 6, k=3)
    model.out.weight.data[:] = 0.0
    model.out.bias.data[:] = 0.0
    by = np.stack([np.full((3, 3), c) for c in (0, 1, 2, 3)])
    opt = optim.SGD(lr=0.1)
    losses = [pixelcnn.train_step(model, by, table, opt) for _ in range(100)]
    assert losses[0] == pytest.approx(np.log(6))  # uniform start
    assert all(b < a for a, b in zip(losses, losses[1:]))  # strict descent


def test_slice_patches_discards_nonseen(split):
    ids = np.zeros((4, 4), dtype=np.int64)
    ids[3, 3] = 4  # unseen corner
    got = pixelcnn.slice_patches(ids, 3, split)
    assert len(got) == 3  # 4 windows, one touches the unseen pixel
    ids[0, 0] = 255
    assert len(pixelcnn.slice_patches(ids, 3, split)) == 2


def test_generate_patch_presets(rng, split, table):
    model = pixelcnn.PixelCNN(rng, 6, 6, k=3)
    patch = pixelcnn.generate_patch(model, table, (4, 8), np.random.default_rng(0))
    assert (patch.reshape(-1)[:8] == 4).all()
    full_a = pixelcnn.generate_patch(model, table, None, np.random.default_rng(3))
    full_b = pixelcnn.generate_patch(model, table, None, np.random.default_rng(3))
    assert (full_a == full_b).all()
    with pytest.raises(ValueError):
        pixelcnn.generate_patches(model, table, np.array([4]), 9,
                                  np.random.default_rng(0))


def sharpen(model, rng):
    """Random biases then a hot output layer: near-one-hot conditionals at
    every step, so sampling coincides with argmax."""
    for name, p in model.params().items():
        if name.endswith(".bias"):
            p.data[:] = rng.normal(size=p.data.shape)
    model.out.weight.data *= 80.0
    model.out.bias.data *= 80.0


def test_generation_matches_greedy_oracle(rng, split, table):
    """Sharpened conditionals make sampling deterministic; compare with an
    independent step-by-step argmax replay."""
    model = pixelcnn.PixelCNN(rng, 6, 6, k=3)
    sharpen(model, rng)
    got = pixelcnn.generate_patch(model, table, None, np.random.default_rng(5))

    mat = table.matrix(list(range(6)))
    ids = np.zeros(9, dtype=np.int64)
    bw = np.zeros((1, 3, 3, 6))
    for t in range(9):
        probs = model.forward(bw).data[0, t // 3, t % 3]
        ids[t] = probs.argmax()
        bw[0, t // 3, t % 3] = mat[ids[t]]
    assert (got.reshape(-1) == ids).all()


def test_teacher_forcing_matches_sequential_conditionals(rng, split, table):
    model = pixelcnn.PixelCNN(rng, 6, 6, k=3)
    patch = pixelcnn.generate_patch(model, table, (5, 5), np.random.default_rng(7))
    mat = table.matrix(list(range(6)))
    completed = model.forward(mat[patch][None]).data[0].reshape(9, 6)
    bw = np.zeros((1, 3, 3, 6))
    flat = patch.reshape(-1)
    for t in range(9):
        step_probs = model.forward(bw).data[0, t // 3, t % 3]
        assert (step_probs == completed[t]).all(), f"t={t}"
        bw[0, t // 3, t % 3] = mat[flat[t]]


def test_sample_mixed_constraints(rng, split, table):
    model = pixelcnn.PixelCNN(rng, 6, 6, k=3)
    patches = pixelcnn.sample_mixed(model, table, split, 50, lam_f=5,
                                    rng=np.random.default_rng(2))
    for p in patches:
        first = p.reshape(-1)[:5]
        assert np.unique(first).size == 1 and first[0] in split.unseen
        assert np.unique(p).size <= 3
    eight = pixelcnn.sample_mixed(model, table, split, 20, lam_f=8,
                                  rng=np.random.default_rng(2))
    assert all(np.unique(p).size <= 2 for p in eight)


def test_sample_mixed_starvation(rng, split, table):
    model = pixelcnn.PixelCNN(rng, 6, 6, k=3)
    with pytest.raises(pixelcnn.SamplingStarvation, match="acceptance rate"):
        pixelcnn.sample_mixed(model, table, split, 10, lam_f=0, max_cats=1,
                              retry_cap=3, rng=np.random.default_rng(0))


def test_sample_pure(rng, split):
    patches = pixelcnn.sample_pure(split, 10_000, np.random.default_rng(4))
    assert all(np.unique(p).size == 1 for p in patches[:100])
    unseen_frac = np.mean([p[0, 0] in split.unseen for p in patches])
    assert abs(unseen_frac - 0.5) < 0.02
    again = pixelcnn.sample_pure(split, 5, np.random.default_rng(9))
    twice = pixelcnn.sample_pure(split, 5, np.random.default_rng(9))
    assert all((a == b).all() for a, b in zip(again, twice))


def test_mix_ratios(rng, split):
    mk = lambda c, n: [np.full((3, 3), c, dtype=np.int64)] * n
    out = pixelcnn.mix(mk(0, 80), mk(4, 20), 4, np.random.default_rng(0))
    assert len(out) == 100
    assert sum(p[0, 0] == 4 for p in out) == 20
    halves = pixelcnn.mix(mk(0, 30), mk(4, 30), 1, np.random.default_rng(0))
    assert sum(p[0, 0] == 4 for p in halves) == 30
    all_pure = pixelcnn.mix(mk(0, 30), mk(4, 30), 1e9, np.random.default_rng(0))
    assert sum(p[0, 0] == 4 for p in all_pure) == 0 and len(all_pure) == 30
    with pytest.raises(ValueError):
        pixelcnn.mix(mk(0, 4), mk(4, 1), 0, np.random.default_rng(0))


def test_log_likelihood(rng, split, table):
    model = pixelcnn.PixelCNN(rng, 6, 6, k=3)
    model.out.weight.data[:] = 0.0
    model.out.bias.data[:] = 0.0
    uniform = pixelcnn.log_likelihood(model, table, np.zeros((3, 3), dtype=int))
    assert uniform == pytest.approx(-9 * np.log(6))

    model2 = pixelcnn.PixelCNN(np.random.default_rng(1), 6, 6, k=3)
    sharpen(model2, np.random.default_rng(1))
    patch = pixelcnn.generate_patch(model2, table, None, np.random.default_rng(5))
    assert pixelcnn.log_likelihood(model2, table, patch) > -0.05  # ~log 1

    # replay oracle: per-step log-prob sum equals the teacher-forced value
    model3 = pixelcnn.PixelCNN(np.random.default_rng(2), 6, 6, k=3)
    patch3 = pixelcnn.generate_patch(model3, table, (4, 5), np.random.default_rng(6))
    mat = table.matrix(list(range(6)))
    bw = np.zeros((1, 3, 3, 6))
    total = 0.0
    for t in range(9):
        probs = model3.forward(bw).data[0, t // 3, t % 3]
        total += np.log(probs[patch3.reshape(-1)[t]])
        bw[0, t // 3, t % 3] = mat[patch3.reshape(-1)[t]]
    assert pixelcnn.log_likelihood(model3, table, patch3) == pytest.approx(total)


def test_patch_dump_roundtrip(tmp_path, rng, split, table):
    model = pixelcnn.PixelCNN(rng, 6, 6, k=3)
    patches = pixelcnn.sample_mixed(model, table, split, 5,
                                    rng=np.random.default_rng(8))
    path = tmp_path / "patches.txt"
    pixelcnn.write_patches(path, patches, k=3, lam_f=5, seed=8)
    loaded, lam_f, seed = pixelcnn.read_patches(path)
    assert lam_f == 5 and seed == 8
    assert all((a == b).all() for a, b in zip(patches, loaded))
    ranked = pixelcnn.rank_patches(model, table, loaded)
    lls = [ll for _, ll in ranked]
    assert lls == sorted(lls, reverse=True)


def test_train_gradients_match_fd(rng, split, table):
    model = pixelcnn.PixelCNN(rng, 6, 6, k=3)
    # keep pre-activations off the leaky-relu kink that zero biases would
    # pin fully-masked positions to (central differences straddle it)
    for name, p in model.params().items():
        if name.endswith(".bias"):
            p.data[:] = 0.1 * rng.normal(size=p.data.shape)
    by = np.stack([np.full((3, 3), 1), np.full((3, 3), 2)])
    bw = pixelcnn.embed_patches(by, table)
    onehot = np.eye(6)[by]

    from ctxseg.nn import autograd as ag

    def loss_value():
        lsm = ag.log_softmax(model.logits(bw), axis=-1)
        return ag.mul(ag.tmean(ag.tsum(ag.mul(lsm, onehot), axis=-1)), -1.0)

    loss = loss_value()
    loss.backward()
    fd = 1e-5
    bad = total = 0
    for name, p in model.params().items():
        flat, g = p.data.ravel(), p.grad.ravel()
        idx = np.random.default_rng(0).choice(flat.size,
                                              size=min(6, flat.size),
                                              replace=False)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + fd
            hi = float(loss_value().data)
            flat[i] = keep - fd
            lo = float(loss_value().data)
            flat[i] = keep
            num = (hi - lo) / (2 * fd)
            rel = abs(g[i] - num) / max(abs(g[i]) + abs(num), 1e-8)
            total += 1
            bad += rel > 1e-4
    assert bad == 0, f"{bad}/{total} gradient entries off"
