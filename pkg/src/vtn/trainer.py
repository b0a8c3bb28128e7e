"""Deterministic training loop: speaker-pair batching, Adam, checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState
from .errors import FormatError, ShapeError, TrainingDivergedError
from .features import Corpus, SpeakerStats, normalize, stack
from .losses import LossWeights, total_loss
from .model import VtnConfig, VtnModel, read_named_blocks, write_named_blocks

_STATE_MAGIC = b"VTNO"
_STATE_VERSION = 1

BatchItem = tuple[int, int, np.ndarray, np.ndarray]


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    iterations: int = 30000
    seed: int = 0
    lambda_dal: float = 2000.0
    lambda_iml: float = 1.0
    nu: float = 0.3
    grad_clip: float = 1.0
    checkpoint_every: int = 1000
    train_utterances: int | None = None  # None = all utterances

    def loss_weights(self, n_mcc: int) -> LossWeights:
        from .losses import default_feature_weights
        return LossWeights(lambda_dal=self.lambda_dal, lambda_iml=self.lambda_iml,
                           nu=self.nu, gamma=default_feature_weights(n_mcc))


def prepare_pair(corpus: Corpus, stats: SpeakerStats, cfg: VtnConfig,
                 k: int, kp: int, utt: int) -> BatchItem:
    """Normalized, stacked source plus zero-prepended normalized stacked target."""
    src_seq = corpus.utterances[corpus.speakers[k]][utt]
    tgt_seq = corpus.utterances[corpus.speakers[kp]][utt]
    src = stack(normalize(src_seq, stats), cfg.r).data
    tgt = stack(normalize(tgt_seq, stats), cfg.r).data
    tgt0 = np.concatenate([np.zeros((tgt.shape[0], 1)), tgt], axis=1)
    return (k, kp, src, tgt0)


def make_batch(corpus: Corpus, stats: SpeakerStats, cfg: VtnConfig,
               train_cfg: TrainConfig, rng: np.random.Generator) -> list[BatchItem]:
    """One mini-batch: a single ordered speaker pair, batch_size utterances,
    plus the matching identity pairs for the identity mapping term."""
    n_spk = len(corpus.speakers)
    if cfg.mode == "one_to_one":
        k, kp = 0, 1
        if n_spk < 2:
            raise ShapeError("one_to_one training needs 2 speakers in the corpus")
    else:
        if n_spk < 2:
            raise ShapeError("many-to-many training needs at least 2 speakers")
        k = int(rng.integers(n_spk))
        kp = int(rng.integers(n_spk - 1))
        if kp >= k:
            kp += 1
    n_train = train_cfg.train_utterances or corpus.n_utterances
    utts = rng.integers(n_train, size=train_cfg.batch_size)
    batch: list[BatchItem] = []
    for u in utts:
        batch.append(prepare_pair(corpus, stats, cfg, k, kp, int(u)))
    if cfg.mode != "one_to_one" and train_cfg.lambda_iml != 0.0:
        for u in utts:
            batch.append(prepare_pair(corpus, stats, cfg, k, k, int(u)))
            batch.append(prepare_pair(corpus, stats, cfg, kp, kp, int(u)))
    return batch


def clip_global_norm(model: VtnModel, max_norm: float) -> float:
    total = 0.0
    for t in model.params.values():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0.0 and norm > max_norm:
        factor = max_norm / norm
        for t in model.params.values():
            if t.grad is not None:
                t.grad *= factor
    return norm


def train_step(model: VtnModel, batch: list[BatchItem], opt_state: AdamState,
               train_cfg: TrainConfig, rng: np.random.Generator) -> dict[str, float]:
    """One forward/backward/Adam update; returns the loss breakdown."""
    weights = train_cfg.loss_weights(model.config.n_mcc)
    model.zero_grads()
    loss, breakdown = total_loss(model, batch, weights, training=True, rng=rng)
    if not np.isfinite(loss.data):
        raise TrainingDivergedError(f"non-finite loss at step {opt_state.step + 1}: {breakdown}")
    loss.backward()
    clip_global_norm(model, train_cfg.grad_clip)
    ad.adam_step(model.params, opt_state, train_cfg.lr, train_cfg.beta1,
                 train_cfg.beta2, train_cfg.eps)
    return breakdown


@dataclass
class TrainResult:
    model: VtnModel
    log: list[dict[str, float]] = field(default_factory=list)


def save_trainer_state(path, iteration: int, opt_state: AdamState,
                       rng: np.random.Generator) -> None:
    header = {"iteration": iteration, "adam_step": opt_state.step,
              "rng_state": rng.bit_generator.state}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    arrays = {f"m.{k}": v for k, v in opt_state.m.items()}
    arrays.update({f"v.{k}": v for k, v in opt_state.v.items()})
    with open(path, "wb") as fh:
        fh.write(_STATE_MAGIC)
        fh.write(struct.pack("<II", _STATE_VERSION, len(blob)))
        fh.write(blob)
        write_named_blocks(fh, arrays)


def load_trainer_state(path) -> tuple[int, AdamState, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != _STATE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, blob_len = struct.unpack_from("<II", raw, 4)
    if version != _STATE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    header = json.loads(raw[12:12 + blob_len].decode("utf-8"))
    arrays, _ = read_named_blocks(raw, 12 + blob_len)
    state = AdamState()
    state.step = header["adam_step"]
    for name, arr in arrays.items():
        kind, pname = name.split(".", 1)
        (state.m if kind == "m" else state.v)[pname] = arr
    return header["iteration"], state, header["rng_state"]


def _checkpoint(out_dir: Path, tag: str, model: VtnModel, iteration: int,
                opt_state: AdamState, rng: np.random.Generator) -> None:
    model.save(out_dir / f"{tag}.vtnm")
    save_trainer_state(out_dir / f"{tag}.vtno", iteration, opt_state, rng)


def train(corpus: Corpus, cfg: VtnConfig, train_cfg: TrainConfig,
          stats: SpeakerStats | None = None, out_dir=None,
          resume=None, model: VtnModel | None = None,
          log_every: int = 1) -> TrainResult:
    """Run the full loop.  With out_dir set, writes checkpoints each cadence
    and an append-only tab-separated loss log.  resume points at a
    checkpoint tag path without extension (loads .vtnm + .vtno)."""
    from .features import compute_stats
    if stats is None:
        stats = compute_stats(corpus, train_cfg.train_utterances)

    rng = np.random.default_rng(train_cfg.seed)
    start_iter = 0
    opt_state = AdamState()
    if resume is not None:
        resume = Path(resume)
        model = VtnModel.load(resume.with_suffix(".vtnm"))
        start_iter, opt_state, rng_state = load_trainer_state(resume.with_suffix(".vtno"))
        rng.bit_generator.state = rng_state
    elif model is None:
        model = VtnModel.init(cfg, seed=train_cfg.seed, speakers=list(corpus.speakers))
    cfg = model.config

    out_path = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_path / "train_log.tsv", "a", encoding="utf-8")

    result = TrainResult(model=model)
    try:
        if train_cfg.iterations == 0 and out_path is not None:
            _checkpoint(out_path, "final", model, 0, opt_state, rng)
        for it in range(start_iter + 1, train_cfg.iterations + 1):
            batch = make_batch(corpus, stats, cfg, train_cfg, rng)
            try:
                breakdown = train_step(model, batch, opt_state, train_cfg, rng)
            except TrainingDivergedError:
                if out_path is not None:
                    # parameters are still pre-update when the loss blows up,
                    # so this checkpoint holds the last usable weights
                    _checkpoint(out_path, "last_good", model, it - 1, opt_state, rng)
                    log_fh.flush()
                raise
            if it % log_every == 0 or it == train_cfg.iterations:
                row = {"iter": it, **breakdown}
                result.log.append(row)
                if log_fh is not None:
                    log_fh.write("{iter}\t{main:.10g}\t{dal:.10g}\t{iml:.10g}\t{total:.10g}\n"
                                 .format(**row))
            if out_path is not None and (
                    it % train_cfg.checkpoint_every == 0 or it == train_cfg.iterations):
                tag = f"ckpt_{it:06d}" if it != train_cfg.iterations else "final"
                _checkpoint(out_path, tag, model, it, opt_state, rng)
    finally:
        if log_fh is not None:
            log_fh.close()
    return result
