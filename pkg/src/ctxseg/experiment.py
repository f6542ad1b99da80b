"""End-to-end experiment driver.

Lifecycle: corpus assembly -> adversarial pretraining (with a moving-average
convergence rule) -> autoregressive patch-model training -> alternating
train/finetune periods driven by the schedule -> optional self-training
rounds -> evaluation at feature resolution -> diversity measurement.

Everything is deterministic given the config: randomness flows from the
master seed through named streams, and artifacts are reproduced exactly on
re-runs with the same config.
"""

from dataclasses import dataclass

import numpy as np

from . import checkpoint, data, finetune, metrics, pixelcnn, segnet
from . import model as modellib
from .nn import optim, rng as rngmod


@dataclass
class Corpus:
    spec: data.SceneSpec
    split: data.CategorySplit
    table: data.EmbeddingTable
    entries: list
    train: list  # Samples with unseen pixels masked to ignore
    test: list  # Samples with full labels


def build_corpus(cfg):
    spec, split, table = cfg.spec(), cfg.split(), cfg.table()
    entries = data.plan_corpus(cfg.n_train, cfg.n_test, cfg.seed)
    train = [data.mask_unseen(s, split)
             for s in data.materialize(spec, entries, "train")]
    test = data.materialize(spec, entries, "test")
    return Corpus(spec, split, table, entries, train, test)


class Run:
    """Mutable experiment state: corpus, models, optimizers, schedule,
    rng streams, and loss logs."""

    def __init__(self, cfg, corpus=None):
        cfg.validate()
        self.cfg = cfg
        self.corpus = corpus or build_corpus(cfg)
        self.rngs = rngmod.streams(cfg.seed)
        split = self.corpus.split
        self.model = modellib.Model(
            self.rngs["init"], split.num_categories, cfg.embed_dim,
            feat_dim=cfg.feat_dim, enc_widths=cfg.enc_widths,
            gen_hidden=cfg.gen_hidden, head_hidden=cfg.head_hidden,
            mode=cfg.mode, patch_k=cfg.patch_k)
        self.p_model = pixelcnn.PixelCNN(
            self.rngs["init"], cfg.embed_dim, split.num_categories,
            k=cfg.patch_k, hidden=cfg.pixelcnn_hidden)
        self.opts = {"main": optim.Adam(cfg.lr_main),
                     "d": optim.Adam(cfg.lr_d, weight_decay=cfg.d_weight_decay),
                     "ft": optim.Adam(cfg.lr_finetune),
                     "ft_gen": optim.Adam(cfg.lr_finetune_gen),
                     "p": optim.Adam(cfg.lr_pixelcnn)}
        self.schedule = finetune.Schedule(phase="pretrain", iteration=0,
                                          period=cfg.period)
        self.loss_log = []  # dicts: step, l_cls, l_adv, l_rec, l_kl
        self.pixelcnn_log = []  # dicts: step, loss
        self._arrays = None

    def train_arrays(self):
        """Stacked train images and feature-resolution one-hot labels."""
        if self._arrays is None:
            f = segnet.DOWNSAMPLE_FACTOR
            split = self.corpus.split
            images = np.stack([s.image for s in self.corpus.train])
            onehot = np.stack(
                [data.downsample_labels(s.labels, f, split).onehot
                 for s in self.corpus.train])
            self._arrays = images, onehot
        return self._arrays

    def invalidate_arrays(self):
        self._arrays = None

    def emb_matrix(self):
        split = self.corpus.split
        return self.corpus.table.matrix(range(split.num_categories))

    def state_tensors(self):
        return checkpoint.pack_state(self.model, self.p_model, self.schedule,
                                     self.opts)

    def load_state(self, tensors):
        checkpoint.unpack_state(tensors, self.model, self.p_model,
                                self.schedule, self.opts)


def _batch_stream(n, batch_size, rng):
    while True:
        for idx in data.batch_indices(n, batch_size, rng):
            yield idx


def pretrain(run, log=None):
    """Adversarial pretraining on real seen-pixel supervision.  Stops at the
    iteration budget, or earlier once the windowed moving average of the
    total loss improves by less than the configured fraction."""
    cfg = run.cfg
    images, onehot = run.train_arrays()
    emb = run.emb_matrix()
    batches = _batch_stream(len(images), cfg.batch_size, run.rngs["batches"])
    totals = []
    for step in range(1, cfg.pretrain_iters + 1):
        idx = next(batches)
        rec = modellib.training_step(
            run.model, images[idx], onehot[idx], emb,
            run.opts["d"], run.opts["main"], run.rngs,
            lam1=cfg.rec_weight, lam2=cfg.kl_weight,
            constant_code=cfg.constant_code)
        total = (rec["l_cls"] + rec["l_adv"] + cfg.rec_weight * rec["l_rec"]
                 + cfg.kl_weight * rec["l_kl"])
        totals.append(total)
        run.loss_log.append({"step": step, **rec})
        run.schedule.iteration = step
        if log and step % 50 == 0:
            log(f"pretrain step {step}: total {total:.4f} "
                f"rec {rec['l_rec']:.4f}")
        w = cfg.pretrain_window
        if len(totals) >= 2 * w:
            prev = float(np.mean(totals[-2 * w:-w]))
            now = float(np.mean(totals[-w:]))
            if prev - now < cfg.pretrain_tol * abs(prev):
                break
    run.schedule = finetune.Schedule(phase="alternate", iteration=0,
                                     period=cfg.period)
    return run.loss_log


def real_patch_bank(run):
    """All-seen k x k label windows sliced from the train corpus at feature
    resolution."""
    cfg, split = run.cfg, run.corpus.split
    f = segnet.DOWNSAMPLE_FACTOR
    bank = []
    for s in run.corpus.train:
        ids = data.downsample_labels(s.labels, f, split).ids
        bank.extend(pixelcnn.slice_patches(ids, cfg.patch_k, split))
    if not bank:
        raise ValueError("no all-seen label windows in the train corpus")
    return np.stack(bank)


def train_pixelcnn(run, log=None):
    """Teacher-forced training of the autoregressive patch model on real
    label windows."""
    cfg = run.cfg
    bank = real_patch_bank(run)
    table = run.corpus.table
    batches = _batch_stream(len(bank), min(cfg.pixelcnn_batch, len(bank)),
                            run.rngs["batches"])
    for step in range(1, cfg.pixelcnn_iters + 1):
        loss = pixelcnn.train_step(run.p_model, bank[next(batches)], table,
                                   run.opts["p"])
        run.pixelcnn_log.append({"step": step, "loss": loss})
        if log and step % 100 == 0:
            log(f"patch-model step {step}: nll {loss:.4f}")
    return run.pixelcnn_log


def _synthetic_batch(run, pool):
    cfg, split, table = run.cfg, run.corpus.split, run.corpus.table
    rng = run.rngs["patches"]
    if cfg.mode == "pixel":
        batch = finetune.build_pixelwise_batch(
            table, split, cfg.synth_hw, cfg.synth_hw, rng,
            n=cfg.batch_size, code_dim=cfg.feat_dim)
    else:
        side = cfg.synth_cells * cfg.patch_k
        need = cfg.batch_size * cfg.synth_cells ** 2
        chosen = [pool[i] for i in rng.integers(0, len(pool), size=need)]
        batch = finetune.build_patchwise_batch(
            chosen, table, split, side, side, rng,
            n=cfg.batch_size, code_dim=cfg.feat_dim)
    if cfg.constant_code:
        batch.codes[:] = 0.0
    return batch


def build_pool(run):
    cfg = run.cfg
    return finetune.build_patch_pool(
        cfg.patch_source, run.p_model, run.corpus.table, run.corpus.split,
        cfg.patch_pool, cfg.patch_k, cfg.preset_pixels, cfg.pure_mix_ratio,
        run.rngs["patches"])


def alternate(run, cycles=None, log=None):
    """Alternating train/finetune periods, phase chosen by the schedule.
    One cycle is one train period followed by one finetune period."""
    cfg = run.cfg
    cycles = cfg.alternation_cycles if cycles is None else cycles
    if run.schedule.phase != "alternate":
        raise ValueError("alternation requires a pretrained run")
    images, onehot = run.train_arrays()
    emb = run.emb_matrix()
    batches = _batch_stream(len(images), cfg.batch_size, run.rngs["batches"])
    pool = None
    for _ in range(2 * cfg.period * cycles):
        phase = finetune.next_phase(run.schedule)
        if phase == "train":
            idx = next(batches)
            rec = modellib.training_step(
                run.model, images[idx], onehot[idx], emb,
                run.opts["d"], run.opts["main"], run.rngs,
                lam1=cfg.rec_weight, lam2=cfg.kl_weight,
                constant_code=cfg.constant_code)
            run.loss_log.append(
                {"step": len(run.loss_log) + 1, **rec})
        else:
            if run.schedule.iteration % cfg.period == 0 or pool is None:
                pool = (build_pool(run) if cfg.mode == "patch" else ())
            rec = finetune.finetune_step(run.model, _synthetic_batch(run, pool),
                                         cfg.mode, run.opts["d"],
                                         run.opts["ft"], run.rngs,
                                         opt_ft_gen=run.opts["ft_gen"])
        run.schedule.iteration += 1
        if log and run.schedule.iteration % 200 == 0:
            log(f"alternation step {run.schedule.iteration} ({phase}): "
                + " ".join(f"{k} {v:.4f}" for k, v in rec.items()))


def self_train(run, log=None):
    """Pseudo-label ignore pixels above the confidence threshold, then run
    another alternation block on the relabeled corpus."""
    cfg = run.cfg
    for round_idx in range(cfg.self_train_rounds):
        run.corpus.train = finetune.self_training_round(
            run.model, run.corpus.train, run.corpus.split,
            threshold=cfg.self_train_threshold)
        run.invalidate_arrays()
        if log:
            log(f"self-training round {round_idx + 1}: corpus relabeled")
        alternate(run, log=log)


def evaluate(run, samples=None):
    """Confusion over the test corpus at feature resolution; ground truth is
    the downsampled label map."""
    cfg, split = run.cfg, run.corpus.split
    samples = run.corpus.test if samples is None else samples
    f = segnet.DOWNSAMPLE_FACTOR
    cm = metrics.ConfusionMatrix(split.num_categories,
                                 ignore_id=split.ignore_id)
    for lo in range(0, len(samples), cfg.eval_batch):
        chunk = samples[lo:lo + cfg.eval_batch]
        preds, _ = modellib.predict(run.model,
                                    np.stack([s.image for s in chunk]))
        gt = np.stack([data.downsample_labels(s.labels, f, split).ids
                       for s in chunk])
        cm.accumulate(preds, gt)
    return metrics.report(cm, split)


def encode_features(run, samples):
    """Deterministic enhanced features (z = mu path) for real images."""
    f = run.model.encoder(np.stack([s.image for s in samples]))
    a = run.model.ctx.context_selector(f)
    mu, _ = run.model.ctx.latent_distribution(run.model.ctx.context_maps(f), a)
    return segnet.residual_attention(f, mu).data


def measure_diversity(run):
    """Per unseen category: mean pairwise distance of generated features
    (standard-normal codes) and of real enhanced features on test images."""
    cfg, split, table = run.cfg, run.corpus.split, run.corpus.table
    n = cfg.diversity_samples
    rng = rngmod.stream(cfg.seed, "latent")  # fresh stream, decoupled from training
    generated, real = {}, {}
    feats = None
    factor = segnet.DOWNSAMPLE_FACTOR
    for c in split.unseen:
        codes = rng.standard_normal((n, cfg.feat_dim))
        embeds = np.tile(table.vectors[c], (n, 1))
        fake = run.model.gen(codes, embeds).data
        generated[c] = metrics.feature_diversity(fake)
        if feats is None:
            feats = encode_features(run, run.corpus.test)
            gt = np.stack([data.downsample_labels(s.labels, factor, split).ids
                           for s in run.corpus.test])
        rows = feats[gt == c]
        if len(rows) > n:
            rows = rows[rng.permutation(len(rows))[:n]]
        real[c] = (metrics.feature_diversity(rows)
                   if len(rows) >= 2 else float("nan"))
    return {"generated": generated, "real": real}


def run_experiment(cfg, log=None):
    """The full lifecycle; returns the run plus reports and measurements."""
    run = Run(cfg)
    pretrain(run, log=log)
    baseline = evaluate(run)
    if log:
        log(f"baseline (pretrain only): unseen miou {baseline.unseen.miou:.4f}")
    train_pixelcnn(run, log=log)
    alternate(run, log=log)
    self_train(run, log=log)
    final = evaluate(run)
    if log:
        log(f"final: hiou {final.hiou:.4f} seen {final.seen.miou:.4f} "
            f"unseen {final.unseen.miou:.4f}")
    diversity = measure_diversity(run)
    return {"run": run, "baseline_report": baseline, "final_report": final,
            "diversity": diversity}


def loss_log_lines(rows):
    yield "step,l_cls,l_adv,l_rec,l_kl"
    for r in rows:
        yield (f"{r['step']},{r['l_cls']:.6f},{r['l_adv']:.6f},"
               f"{r['l_rec']:.6f},{r['l_kl']:.6f}")
