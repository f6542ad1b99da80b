"""Experiment configuration: defaults, file loading, overrides, hashing.

A config is a flat set of named values resolved from three layers with
increasing precedence: built-in defaults, a JSON config file, and explicit
overrides (CLI flags).  The resolved config hashes to a short hex digest
that names run directories and is stamped into checkpoints so artifacts
from mismatched configs cannot be silently combined.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from . import data, finetune

EMBED_MODES = ("attribute", "file")
MODES = ("pixel", "patch")


@dataclass(frozen=True)
class ExperimentConfig:
    # corpus
    image_size: int = 72
    n_train: int = 500
    n_test: int = 100
    unseen_categories: tuple = (8, 9)
    embed_dim: int = 32
    embed_mode: str = "attribute"
    embed_path: str = ""
    # model dimensions
    feat_dim: int = 32
    enc_widths: tuple = (12, 24, 32)
    gen_hidden: int = 64
    head_hidden: int = 48
    pixelcnn_hidden: int = 32
    mode: str = "pixel"
    patch_k: int = 3
    # loss weights
    rec_weight: float = 10.0
    kl_weight: float = 100.0
    # synthetic-patch sampling
    preset_pixels: int = 5
    pure_mix_ratio: float = 4.0
    max_patch_categories: int = 3
    patch_source: str = "mixed-pixelcnn-constrained"
    patch_pool: int = 256
    synth_hw: int = 8
    synth_cells: int = 2
    # schedule
    batch_size: int = 8
    pretrain_iters: int = 1200
    pretrain_window: int = 50
    pretrain_tol: float = 0.005
    pixelcnn_iters: int = 200
    pixelcnn_batch: int = 64
    alternation_cycles: int = 20
    period: int = 100
    # optimizers
    lr_main: float = 1e-3
    lr_d: float = 1e-3
    d_weight_decay: float = 10.0
    lr_finetune: float = 1e-3
    lr_finetune_gen: float = 1e-4
    lr_pixelcnn: float = 1e-3
    # self-training
    self_train_rounds: int = 0
    self_train_threshold: float = 0.9
    # ablations and measurement
    constant_code: bool = False
    diversity_samples: int = 64
    eval_batch: int = 20
    # reproducibility
    seed: int = 0

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.embed_mode not in EMBED_MODES:
            raise ValueError(f"embed_mode must be one of {EMBED_MODES}")
        if self.embed_mode == "file" and not self.embed_path:
            raise ValueError("embed_mode 'file' requires embed_path")
        if self.patch_k % 2 == 0 or self.patch_k < 3:
            raise ValueError(f"patch_k must be odd and >= 3, got {self.patch_k}")
        if self.pure_mix_ratio <= 0:
            raise ValueError("pure_mix_ratio must be > 0")
        if not 0 <= self.preset_pixels <= self.patch_k ** 2 - 1:
            raise ValueError(
                f"preset_pixels must be in [0, {self.patch_k ** 2 - 1}]")
        if self.patch_source not in finetune.PATCH_SOURCES:
            raise ValueError(f"unknown patch_source {self.patch_source!r}")
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by 8")
        for name in ("n_train", "n_test", "embed_dim", "feat_dim",
                     "gen_hidden", "head_hidden", "pixelcnn_hidden",
                     "batch_size", "pretrain_iters", "pretrain_window",
                     "pixelcnn_iters", "pixelcnn_batch", "period",
                     "patch_pool", "synth_hw", "synth_cells", "eval_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("alternation_cycles", "self_train_rounds", "seed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("lr_main", "lr_d", "lr_finetune", "lr_pixelcnn"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.pretrain_tol < 0 or self.self_train_threshold < 0:
            raise ValueError("tolerances must be >= 0")
        if self.d_weight_decay < 0:
            raise ValueError("d_weight_decay must be >= 0")
        if not all(w >= 1 for w in self.enc_widths):
            raise ValueError("enc_widths must be positive")
        # the split constructor enforces that every referenced category
        # exists and the seen/unseen ids tile the full range
        self.split()
        return self

    def split(self):
        spec = self.spec()
        all_ids = range(len(spec.shape_attributes))
        unseen = tuple(sorted(self.unseen_categories))
        seen = tuple(i for i in all_ids if i not in unseen)
        return data.CategorySplit(seen=seen, unseen=unseen, ignore_id=255)

    def spec(self):
        return data.default_spec(image_size=self.image_size)

    def table(self):
        return data.build_embeddings(self.split(), self.spec(),
                                     mode=self.embed_mode,
                                     path=self.embed_path or None,
                                     dim=self.embed_dim)


_TUPLE_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)
                 if isinstance(f.default, tuple)}
_FIELD_NAMES = tuple(f.name for f in dataclasses.fields(ExperimentConfig))


def from_dict(values):
    unknown = sorted(set(values) - set(_FIELD_NAMES))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    coerced = {k: tuple(v) if k in _TUPLE_FIELDS else v
               for k, v in values.items()}
    return ExperimentConfig(**coerced).validate()


def to_dict(cfg):
    return {k: list(v) if isinstance(v, tuple) else v
            for k, v in dataclasses.asdict(cfg).items()}


def load_file(path):
    with open(path) as fh:
        values = json.load(fh)
    if not isinstance(values, dict):
        raise ValueError(f"{path}: config file must hold a JSON object")
    return values


def save_file(cfg, path):
    with open(path, "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def resolve(file_values=None, overrides=None):
    """Merge defaults <- file <- overrides; None override values are
    treated as unset."""
    merged = to_dict(ExperimentConfig())
    merged.update(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items()
                   if v is not None})
    return from_dict(merged)


def config_hash(cfg):
    blob = json.dumps(to_dict(cfg), sort_keys=True,
                      separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
