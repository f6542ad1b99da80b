"""Synthetic batches, valid-loss mask, finetune step, schedule, self-training."""

import numpy as np
import pytest

from ctxseg import data, finetune, model as modellib, pixelcnn, segnet
from ctxseg.nn import optim, rng as rngmod


@pytest.fixture
def split():
    return data.default_split()


@pytest.fixture
def table(split):
    return data.build_embeddings(split, data.default_spec(), dim=16)


@pytest.fixture
def rng():
    return np.random.default_rng(41)


def make_model(mode="pixel", seed=0):
    return modellib.Model(rngmod.stream(seed, "init"), 10, 16, feat_dim=8,
                          enc_widths=(4, 4, 4), gen_hidden=16, head_hidden=8,
                          mode=mode)


def test_valid_loss_mask_counts():
    assert finetune.valid_loss_mask(6, 6, 3).sum() == 4
    assert finetune.valid_loss_mask(3, 3, 3).sum() == 1
    assert finetune.valid_loss_mask(9, 6, 3).sum() == 6
    m = finetune.valid_loss_mask(6, 6, 3)
    assert m[1, 1] == 1 and m[1, 4] == 1 and m[4, 1] == 1 and m[4, 4] == 1


def test_valid_loss_mask_property():
    for k in (3, 5, 7):
        for h in range(k, 31, k):
            for w in range(k, 31, k):
                assert finetune.valid_loss_mask(h, w, k).sum() == (h // k) * (w // k)


def test_valid_loss_mask_errors():
    with pytest.raises(ValueError):
        finetune.valid_loss_mask(7, 6, 3)
    with pytest.raises(ValueError):
        finetune.valid_loss_mask(8, 8, 4)


def test_pixelwise_batch_balance(table, split, rng):
    b = finetune.build_pixelwise_batch(table, split, 4, 4, rng, n=3, code_dim=8)
    for i in range(3):
        seen = np.isin(b.labels.ids[i], split.seen).sum()
        unseen = np.isin(b.labels.ids[i], split.unseen).sum()
        assert seen == 8 and unseen == 8
    assert b.valid_mask.all()
    # odd pixel count: counts differ by exactly one
    b2 = finetune.build_pixelwise_batch(table, split, 3, 3, rng, code_dim=8)
    seen = np.isin(b2.labels.ids[0], split.seen).sum()
    assert abs(2 * seen - 9) == 1


def test_pixelwise_batch_embeddings_consistent(table, split, rng):
    b = finetune.build_pixelwise_batch(table, split, 5, 5, rng, code_dim=8)
    for y in range(5):
        for x in range(5):
            want = table.vectors[int(b.labels.ids[0, y, x])]
            assert (b.embeddings[0, y, x] == want).all()


def test_pixelwise_codes_standard_normal(table, split):
    b = finetune.build_pixelwise_batch(table, split, 100, 100,
                                       np.random.default_rng(0), code_dim=10)
    codes = b.codes.reshape(-1)
    n = codes.size
    assert abs(codes.mean()) < 4 / np.sqrt(n)
    assert abs(codes.var(ddof=1) - 1.0) < 4 * np.sqrt(2.0 / (n - 1))


def test_patchwise_batch_structure(table, split, rng):
    patches = pixelcnn.sample_pure(split, 4, rng)
    b = finetune.build_patchwise_batch(patches, table, split, 6, 6, rng,
                                       code_dim=8)
    # one shared code per cell, different codes across cells
    for cy in range(2):
        for cx in range(2):
            cell = b.codes[0, cy * 3:(cy + 1) * 3, cx * 3:(cx + 1) * 3, :]
            assert (cell == cell[0, 0]).all()
    assert not (b.codes[0, 0, 0] == b.codes[0, 0, 3]).all()
    assert not (b.codes[0, 0, 0] == b.codes[0, 3, 0]).all()
    assert b.valid_mask[0].sum() == 4
    # tiling consumed the patches in order
    assert (b.labels.ids[0, :3, :3] == patches[0]).all()
    assert (b.labels.ids[0, 3:, 3:] == patches[3]).all()


def test_patchwise_batch_insufficient(table, split, rng):
    patches = pixelcnn.sample_pure(split, 3, rng)
    with pytest.raises(ValueError):
        finetune.build_patchwise_batch(patches, table, split, 6, 6, rng,
                                       code_dim=8)


def test_patch_pool_sources(table, split, rng):
    p_model = pixelcnn.PixelCNN(rngmod.stream(0, "init"), 16, 10, k=3)
    for source in finetune.PATCH_SOURCES:
        pool = finetune.build_patch_pool(source, p_model, table, split, 12, 3,
                                         5, 4, rng)
        if source == "pure+mixed":
            # trimmed to the pure:mixed ratio, so only an upper bound holds
            assert 1 <= len(pool) <= 12
            n_mixed = sum(1 for p in pool if np.unique(p).size > 1)
            assert n_mixed >= 1
        else:
            assert len(pool) == 12
        assert all(p.shape == (3, 3) for p in pool)
    pure = finetune.build_patch_pool("pure", p_model, table, split, 30, 3, 5,
                                     4, rng)
    assert all(np.unique(p).size == 1 for p in pure)
    constrained = finetune.build_patch_pool("mixed-pixelcnn-constrained",
                                            p_model, table, split, 10, 3, 5,
                                            4, rng)
    assert all(np.unique(p).size <= 3 for p in constrained)
    with pytest.raises(ValueError):
        finetune.build_patch_pool("volumetric", p_model, table, split, 5, 3,
                                  5, 4, rng)


def test_finetune_step_freezes_encoder_and_ctx(table, split, rng):
    m = make_model()
    batch = finetune.build_pixelwise_batch(table, split, 4, 4, rng, n=2,
                                           code_dim=8)
    frozen = {k: v.data.copy()
              for k, v in {**m.encoder.params(), **m.ctx.params()}.items()}
    rec = finetune.finetune_step(m, batch, "pixel", optim.Adam(1e-3),
                                 optim.Adam(1e-3), rngmod.streams(7))
    assert set(rec) == {"l_cls", "l_adv"}
    for k, v in {**m.encoder.params(), **m.ctx.params()}.items():
        assert (v.data == frozen[k]).all(), f"{k} moved"


def test_finetune_step_updates_g_and_c(table, split, rng):
    m = make_model()
    batch = finetune.build_pixelwise_batch(table, split, 4, 4, rng, n=2,
                                           code_dim=8)
    before = {k: v.data.copy() for k, v in m.finetune_params().items()}
    finetune.finetune_step(m, batch, "pixel", optim.Adam(1e-3),
                           optim.Adam(1e-3), rngmod.streams(7))
    moved = [k for k, v in m.finetune_params().items()
             if not (v.data == before[k]).all()]
    assert moved  # generator/classifier actually trained


def test_finetune_step_zero_mask_is_inert(table, split, rng):
    m = make_model()
    batch = finetune.build_pixelwise_batch(table, split, 4, 4, rng, code_dim=8)
    batch.valid_mask[:] = 0.0
    before = {k: v.data.copy() for k, v in m.all_params().items()}
    rec = finetune.finetune_step(m, batch, "pixel", optim.Adam(1e-3),
                                 optim.Adam(1e-3), rngmod.streams(7))
    assert rec == {"l_cls": 0.0, "l_adv": 0.0}
    for k, v in m.all_params().items():
        assert (v.data == before[k]).all()


def test_finetune_step_mode_mismatch(table, split, rng):
    m = make_model(mode="pixel")
    batch = finetune.build_pixelwise_batch(table, split, 4, 4, rng, code_dim=8)
    with pytest.raises(ValueError):
        finetune.finetune_step(m, batch, "patch", optim.Adam(1e-3),
                               optim.Adam(1e-3), rngmod.streams(7))


def test_masked_loss_matches_gather_oracle(table, split, rng):
    m = make_model()
    batch = finetune.build_pixelwise_batch(table, split, 4, 4, rng, code_dim=8)
    mask = (rng.random((1, 4, 4)) > 0.5).astype(np.float64)
    batch.valid_mask = mask
    l_cls, l_adv = finetune.finetune_losses(m, batch, None)

    from ctxseg.nn import autograd as ag
    x_fake = m.gen(batch.codes, batch.embeddings)
    lsm = ag.log_softmax(m.heads.classify(x_fake), axis=-1).data
    per = -(lsm * batch.labels.onehot).sum(axis=-1)
    sel = per[mask > 0]
    assert float(l_cls.data) == pytest.approx(sel.mean())
    fake = m.heads.discriminate(x_fake).data
    assert float(l_adv.data) == pytest.approx(
        ((1.0 - fake[mask > 0]) ** 2).mean())


def test_patch_mode_valid_positions_see_own_cell_only(table, split, rng):
    m = make_model(mode="patch")
    patches = pixelcnn.sample_pure(split, 4, rng)
    batch = finetune.build_patchwise_batch(patches, table, split, 6, 6, rng,
                                           code_dim=8)
    base = m.heads.classify(m.gen(batch.codes, batch.embeddings)).data
    bumped = batch.embeddings.copy()
    bumped[0, 3:, 3:, :] += 1.0  # perturb the bottom-right cell only
    out = m.heads.classify(m.gen(batch.codes, bumped)).data
    diff = np.abs(out - base).sum(axis=-1)[0]
    assert diff[1, 1] == 0 and diff[1, 4] == 0 and diff[4, 1] == 0
    assert diff[4, 4] > 0


def test_schedule_phases():
    pre = finetune.Schedule(phase="pretrain", iteration=500)
    assert finetune.next_phase(pre) == "train"
    alt = finetune.Schedule(phase="alternate", iteration=0)
    counts = {"train": 0, "finetune": 0}
    for it in range(400):
        alt.iteration = it
        counts[finetune.next_phase(alt)] += 1
    assert counts == {"train": 200, "finetune": 200}
    alt.iteration = 150
    assert finetune.next_phase(alt) == "finetune"
    alt.iteration = 99
    assert finetune.next_phase(alt) == "train"
    with pytest.raises(ValueError):
        finetune.Schedule(period=0)


def test_self_training_round(split):
    spec = data.default_spec(image_size=24)
    m = make_model()
    sample = data.mask_unseen(data.generate_scene(spec, 2), split)
    ignored_before = (sample.labels == split.ignore_id).sum()

    kept = finetune.self_training_round(m, [sample], split, threshold=2.0)[0]
    assert (kept.labels == sample.labels).all()

    relabeled = finetune.self_training_round(m, [sample], split, threshold=0.0)[0]
    assert (relabeled.labels != split.ignore_id).all() or ignored_before == 0
    labeled = sample.labels != split.ignore_id
    assert (relabeled.labels[labeled] == sample.labels[labeled]).all()

    partial = finetune.self_training_round(m, [sample], split, threshold=0.9)[0]
    assert (partial.labels[labeled] == sample.labels[labeled]).all()
