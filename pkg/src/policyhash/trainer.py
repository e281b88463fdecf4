"""Training loop: triplet pretraining, then joint policy + triplet training.

Two copies of the encoder are kept. The query network is updated every
mini-batch; the database network is a frozen copy that encodes the whole
training set into the retrieval database ``B``. Every ``sync_period``
epochs the query weights are copied over and ``B`` is re-encoded.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import codec
from .dataset import LabeledDataset
from .encoder import EncoderParams, LayerSpec, backward, forward, save_checkpoint
from .objectives import RewardConfig, TripletConfig, batch_policy_gradient, triplet_loss
from .retrieval import CodeDatabase, mean_average_precision

log = logging.getLogger(__name__)

# margins used for the code lengths reported in the literature
_MARGIN_TABLE = {12: 1.0, 24: 2.0, 32: 2.0, 48: 4.0}


class TrainingError(RuntimeError):
    pass


def default_margin(code_bits: int) -> float:
    if code_bits in _MARGIN_TABLE:
        return _MARGIN_TABLE[code_bits]
    return float(max(1, round(code_bits / 12)))


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 50
    sync_period: int = 50
    learning_rate: float = 0.001
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 50
    momentum: float = 0.9
    weight_decay: float = 0.0005
    beta: float = 0.4
    margin: Optional[float] = None  # None -> default_margin(code_bits)
    seed: int = 0
    pretrain_epochs: int = 30
    policy_weight: float = 1.0
    samples_per_query: int = 1
    code_bits: int = 16
    hidden_dims: tuple[int, ...] = (32, 32)
    eval_every: int = 10

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1 or self.sync_period < 1 or self.lr_decay_every < 1:
            raise ValueError("batch_size, sync_period and lr_decay_every must be >= 1")
        if self.samples_per_query < 1 or self.eval_every < 1:
            raise ValueError("samples_per_query and eval_every must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        RewardConfig(self.beta)
        TripletConfig(self.resolved_margin)

    @property
    def resolved_margin(self) -> float:
        return float(self.margin) if self.margin is not None else default_margin(self.code_bits)

    @property
    def reward_config(self) -> RewardConfig:
        return RewardConfig(self.beta)

    @property
    def triplet_config(self) -> TripletConfig:
        return TripletConfig(self.resolved_margin)

    def layer_spec(self, input_dim: int) -> LayerSpec:
        return LayerSpec(input_dim, self.hidden_dims, self.code_bits)

    def lr_at(self, epochs_done: int) -> float:
        return self.learning_rate * self.lr_decay_factor ** (epochs_done // self.lr_decay_every)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


@dataclass
class DualNetworkState:
    query_params: EncoderParams
    database_params: EncoderParams
    database_codes: CodeDatabase
    epoch: int = 0

    def codes_digest(self) -> str:
        return hashlib.sha256(self.database_codes.to_bytes()).hexdigest()


@dataclass
class FitResult:
    params: EncoderParams
    history: list[dict] = field(default_factory=list)
    pretrain_history: list[dict] = field(default_factory=list)
    state: Optional[DualNetworkState] = None


def make_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent generators for init, pretraining and joint training."""
    children = np.random.SeedSequence(seed).spawn(3)
    return tuple(np.random.Generator(np.random.PCG64(c)) for c in children)  # type: ignore[return-value]


def sgd_step(params: EncoderParams, wgrads, bgrads, lr: float, momentum: float, weight_decay: float) -> None:
    """Classical momentum: ``v <- mu v - lr (g + wd w)``; ``w <- w + v``. In place."""
    for w, v, g in zip(params.weights + params.biases, params.weight_velocity + params.bias_velocity, wgrads + bgrads):
        v *= momentum
        v -= lr * (g + weight_decay * w)
        w += v


def encode(params: EncoderParams, features: np.ndarray, chunk: int = 4096) -> codec.PackedCode:
    parts = []
    for start in range(0, features.shape[0], chunk):
        s, _ = forward(params, features[start : start + chunk])
        parts.append(codec.threshold(s).words)
    return codec.PackedCode(np.concatenate(parts, axis=0), params.spec.code_bits)


def encode_database(params: EncoderParams, dataset: LabeledDataset) -> CodeDatabase:
    """Threshold codes of every item, in input order, paired with its labels."""
    return CodeDatabase(encode(params, dataset.features), dataset.labels)


def training_map(params: EncoderParams, dataset: LabeledDataset) -> float:
    """MAP of the training set against itself, both encoded with ``params``."""
    db = encode_database(params, dataset)
    return mean_average_precision(db.codes, dataset.labels, db)


def _similarity(labels: list[frozenset[int]]) -> np.ndarray:
    classes = sorted(set().union(*labels))
    col = {c: i for i, c in enumerate(classes)}
    onehot = np.zeros((len(labels), len(classes)))
    for i, lab in enumerate(labels):
        onehot[i, [col[c] for c in lab]] = 1.0
    return (onehot @ onehot.T) > 0


def _pick(mask: np.ndarray, u: np.ndarray) -> np.ndarray:
    """For each row, the column of the ``floor(u * count)``-th True entry."""
    counts = mask.sum(axis=1)
    r = np.minimum((u * counts).astype(np.int64), np.maximum(counts - 1, 0))
    return np.argmax(np.cumsum(mask, axis=1) > r[:, None], axis=1)


def mine_triplets(labels: list[frozenset[int]], rng: np.random.Generator) -> np.ndarray:
    """One uniformly random in-batch positive and negative per anchor.

    Returns:
        ``(t, 3)`` array of batch positions ``(anchor, positive, negative)``;
        anchors lacking either partner are left out.
    """
    sim = _similarity(labels)
    n = len(labels)
    pos = sim & ~np.eye(n, dtype=bool)
    neg = ~sim
    u_pos, u_neg = rng.random(n), rng.random(n)
    ok = pos.any(axis=1) & neg.any(axis=1)
    out = np.stack([np.arange(n), _pick(pos, u_pos), _pick(neg, u_neg)], axis=1)
    return out[ok]


def _has_any_triplet(labels) -> bool:
    counts: dict[int, int] = {}
    for lab in labels:
        for c in lab:
            counts[c] = counts.get(c, 0) + 1
    for lab in labels:
        if any(counts[c] >= 2 for c in lab) and any(not (lab & other) for other in labels):
            return True
    return False


def _triplet_grads(s: np.ndarray, triplets: np.ndarray, cfg: TripletConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-triplet losses and the summed gradient scattered back onto batch rows."""
    grad = np.zeros_like(s)
    if triplets.size == 0:
        return np.zeros(0), grad
    a, p, n = triplets.T
    loss, ga, gp, gn = triplet_loss(s[a], s[p], s[n], cfg)
    np.add.at(grad, a, ga)
    np.add.at(grad, p, gp)
    np.add.at(grad, n, gn)
    return np.atleast_1d(loss), grad


def _check_finite(params: EncoderParams, what: str) -> None:
    if not params.is_finite():
        raise TrainingError(f"non-finite parameters after {what}")


def pretrain(
    params: EncoderParams,
    dataset: LabeledDataset,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[EncoderParams, list[dict]]:
    """Triplet-only SGD for ``cfg.pretrain_epochs`` epochs; updates a copy of ``params``."""
    params = params.copy()
    history: list[dict] = []
    if cfg.pretrain_epochs == 0:
        return params, history
    if not _has_any_triplet(dataset.labels):
        raise TrainingError("no valid triplet can be formed: every class needs 2 items and a dissimilar item")
    tcfg = cfg.triplet_config
    for e in range(cfg.pretrain_epochs):
        lr = cfg.lr_at(e)
        order = rng.permutation(dataset.count)
        losses = []
        for start in range(0, dataset.count, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            s, trace = forward(params, dataset.features[idx])
            triplets = mine_triplets([dataset.labels[i] for i in idx], rng)
            loss, grad = _triplet_grads(s, triplets, tcfg)
            if not np.all(np.isfinite(loss)):
                raise TrainingError(f"non-finite triplet loss in pretraining epoch {e + 1}")
            losses.extend(loss.tolist())
            wg, bg = backward(params, trace, grad / len(idx))
            sgd_step(params, wg, bg, lr, cfg.momentum, cfg.weight_decay)
        _check_finite(params, f"pretraining epoch {e + 1}")
        mean_loss = sum(losses) / len(losses) if losses else 0.0
        history.append({"epoch": e + 1, "lr": lr, "mean_triplet_loss": mean_loss, "triplets": len(losses)})
        log.info("pretrain epoch %d lr=%g triplet=%.5f", e + 1, lr, mean_loss)
    return params, history


def init_state(params: EncoderParams, dataset: LabeledDataset) -> DualNetworkState:
    return DualNetworkState(params.copy(), params.copy(), encode_database(params, dataset), 0)


def sync_database(state: DualNetworkState, dataset: LabeledDataset) -> DualNetworkState:
    """Copy the query weights into the database network and re-encode ``B``."""
    state.database_params = state.query_params.copy()
    state.database_codes = encode_database(state.database_params, dataset)
    return state


def _mean(values: list[float]) -> float:
    return sum(values) / len(values) if values else 0.0


def train_epoch(
    state: DualNetworkState,
    dataset: LabeledDataset,
    cfg: TrainConfig,
    rng: np.random.Generator,
    lr: float,
) -> tuple[DualNetworkState, dict]:
    """One pass over ``dataset`` updating the query network against the frozen ``B``."""
    params = state.query_params
    db = state.database_codes
    rcfg, tcfg = cfg.reward_config, cfg.triplet_config
    order = rng.permutation(dataset.count)
    aps, rewards, tlosses, plosses = [], [], [], []
    skipped = 0
    for start in range(0, dataset.count, cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        labels = [dataset.labels[i] for i in idx]
        s, trace = forward(params, dataset.features[idx])
        has_rel = db.relevance(labels).any(axis=1)
        skipped += int((~has_rel).sum())
        keep = np.flatnonzero(has_rel)

        policy_grad = np.zeros_like(s)
        if keep.size:
            s_keep = s[keep]
            keep_labels = [labels[i] for i in keep]
            for _ in range(cfg.samples_per_query):
                q = codec.sample(s_keep, rng)
                out = batch_policy_gradient(s_keep, q, db, keep_labels, rcfg)
                policy_grad[keep] += out.grad_wrt_s / cfg.samples_per_query
                aps.extend(out.ap.tolist())
                rewards.extend(out.reward.tolist())
                plosses.extend((out.policy_loss_value / cfg.samples_per_query).tolist())

        triplets = mine_triplets(labels, rng)
        tloss, tgrad = _triplet_grads(s, triplets, tcfg)
        if not (np.all(np.isfinite(tloss)) and np.all(np.isfinite(policy_grad))):
            raise TrainingError(f"non-finite loss in epoch {state.epoch + 1}")
        tlosses.extend(tloss.tolist())

        grad = (tgrad + cfg.policy_weight * policy_grad) / len(idx)
        wg, bg = backward(params, trace, grad)
        sgd_step(params, wg, bg, lr, cfg.momentum, cfg.weight_decay)

    _check_finite(params, f"epoch {state.epoch + 1}")
    state.epoch += 1
    report = {
        "epoch": state.epoch,
        "lr": lr,
        "mean_ap": _mean(aps),
        "mean_reward": _mean(rewards),
        "mean_triplet_loss": _mean(tlosses),
        # policy losses are summed over samples per query, so average per anchor
        "mean_policy_loss": sum(plosses) * cfg.samples_per_query / max(1, len(aps)),
        "skipped_anchors": skipped,
    }
    return state, report


EpochCallback = Callable[[DualNetworkState, dict], None]


def fit(
    dataset: LabeledDataset,
    cfg: TrainConfig,
    history_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    callback: EpochCallback | None = None,
) -> FitResult:
    """Pretrain, then run ``cfg.epochs`` joint epochs with periodic database sync.

    Args:
        dataset: Training set; it also serves as the in-training database.
        cfg: Hyperparameters.
        history_path: If given, one JSON object per joint epoch is appended
            and flushed as soon as the epoch finishes.
        checkpoint_dir: If given, a checkpoint is written after pretraining and
            at every sync (``epoch_XXXX.ckpt``).
        callback: Called with ``(state, report)`` after every joint epoch.
    """
    init_rng, pre_rng, joint_rng = make_rngs(cfg.seed)
    params = EncoderParams.init(cfg.layer_spec(dataset.dim), init_rng)
    params, pre_hist = pretrain(params, dataset, cfg, pre_rng)
    result = FitResult(params, [], pre_hist)
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckdir / "pretrained.ckpt", params, 0)

    state = init_state(params, dataset)
    result.state = state
    fh = open(history_path, "w") if history_path is not None else None
    try:
        for e in range(cfg.epochs):
            state, report = train_epoch(state, dataset, cfg, joint_rng, cfg.lr_at(e))
            synced = state.epoch % cfg.sync_period == 0
            if synced:
                sync_database(state, dataset)
                if ckdir is not None:
                    save_checkpoint(ckdir / f"epoch_{state.epoch:04d}.ckpt", state.query_params, state.epoch)
            report["synced"] = synced
            if state.epoch % cfg.eval_every == 0 or state.epoch == cfg.epochs:
                report["train_map"] = training_map(state.query_params, dataset)
            for key in ("mean_ap", "mean_reward", "mean_triplet_loss", "mean_policy_loss"):
                if not math.isfinite(report[key]):
                    raise TrainingError(f"non-finite {key} in epoch {state.epoch}")
            result.history.append(report)
            if fh is not None:
                fh.write(json.dumps(report, sort_keys=True) + "\n")
                fh.flush()
            log.info("epoch %d %s", state.epoch, {k: v for k, v in report.items() if k != "epoch"})
            if callback is not None:
                callback(state, report)
    finally:
        if fh is not None:
            fh.close()
    result.params = state.query_params
    return result
