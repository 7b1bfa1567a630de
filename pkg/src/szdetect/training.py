"""Training procedures: rebalancing, prior correction, the epoch loop with
early stopping, conv pretraining, transfer, and the 3-member ensemble.

All randomness flows from explicit seeds through numpy Generators, and every
loop iterates in a fixed order, so a fixed seed reproduces the trajectory
bit for bit in single-threaded mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .autodiff import Tensor
from .errors import SzDetectError
from .imaging import ImageSequence, Normalizer, fit_normalizer


class NoPositives(SzDetectError):
    pass


class ZeroPrior(SzDetectError):
    pass


class EmptySplit(SzDetectError):
    pass


class BadConfig(SzDetectError):
    pass


@dataclass
class TrainConfig:
    """Knobs of the optimization loop.  Optimizer is RMSprop and dropout is
    off by design; neither is configurable."""
    batch_size: int = 128
    learning_rate: float = 0.001
    target_ratio: tuple[float, float] = (0.8, 0.2)  # (non-seizure, seizure)
    patience_epochs: int = 1
    max_epochs: int = 20
    seed: int = 0
    val_fraction: float = 0.2   # per-class share moved into the balanced val split
    chunk_size: int = 32        # sequences per backward pass (memory bound only)
    pretrain_epochs: int = 3

    def __post_init__(self):
        if self.batch_size < 1:
            raise BadConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if abs(sum(self.target_ratio) - 1.0) > 1e-9 or min(self.target_ratio) <= 0:
            raise BadConfig(f"target_ratio must be positive and sum to 1, "
                            f"got {self.target_ratio}")


_CONFIG_TYPES = {
    "batch_size": int, "learning_rate": float, "patience_epochs": int,
    "max_epochs": int, "seed": int, "val_fraction": float, "chunk_size": int,
    "pretrain_epochs": int,
}


def parse_train_config(text: str) -> TrainConfig:
    """Flat key=value lines; '#' starts a comment; unknown keys rejected."""
    kwargs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadConfig(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "target_ratio":
            parts = [p for p in value.replace(",", " ").split() if p]
            if len(parts) != 2:
                raise BadConfig(f"line {lineno}: target_ratio needs two numbers")
            kwargs[key] = (float(parts[0]), float(parts[1]))
        elif key in _CONFIG_TYPES:
            try:
                kwargs[key] = _CONFIG_TYPES[key](value)
            except ValueError:
                raise BadConfig(f"line {lineno}: bad value for {key}: "
                                f"{value!r}") from None
        else:
            raise BadConfig(f"line {lineno}: unknown key {key!r}")
    return TrainConfig(**kwargs)


def config_digest(config: TrainConfig) -> str:
    return mdl.config_hash(vars(config))


# --- class balance ----------------------------------------------------------

def rebalance(items, target_ratio: tuple[float, float] = (0.8, 0.2),
              seed: int = 0) -> list:
    """Subsample the majority (non-seizure) class of a training split.

    Keeps every positive; draws negatives uniformly without replacement
    until the negative count is floor(n_pos * ratio_neg / ratio_pos).
    Output preserves the original order.  Never apply to test data.
    """
    pos_idx = [i for i, s in enumerate(items) if s.label == 1]
    neg_idx = [i for i, s in enumerate(items) if s.label != 1]
    if not pos_idx:
        raise NoPositives("rebalance needs at least one positive sample")
    want_neg = int(len(pos_idx) * target_ratio[0] / target_ratio[1])
    if want_neg < len(neg_idx):
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(neg_idx), size=want_neg, replace=False)
        neg_idx = [neg_idx[i] for i in sorted(chosen.tolist())]
    keep = sorted(pos_idx + neg_idx)
    return [items[i] for i in keep]


def class_prior(items) -> tuple[float, float]:
    """(p_nonseizure, p_seizure) empirical ratio."""
    n = len(items)
    if n == 0:
        raise EmptySplit("cannot estimate a class prior from nothing")
    pos = sum(1 for s in items if s.label == 1)
    return ((n - pos) / n, pos / n)


def prior_correct(p, train_prior, deploy_prior):
    """Rescale class probabilities from the rebalanced training distribution
    back to the deployment distribution: q(c) propto p(c) d(c)/t(c).

    Accepts a pair or an (n, 2) batch; returns the renormalized result.
    """
    t = np.asarray(train_prior, dtype=np.float64)
    d = np.asarray(deploy_prior, dtype=np.float64)
    for name, prior in (("train", t), ("deploy", d)):
        if prior.shape != (2,) or np.any(prior <= 0):
            raise ZeroPrior(f"{name} prior must be two positive numbers, "
                            f"got {prior}")
        if abs(prior.sum() - 1.0) > 1e-6:
            raise ZeroPrior(f"{name} prior must sum to 1, got {prior}")
    q = np.asarray(p, dtype=np.float64) * (d / t)
    return q / q.sum(axis=-1, keepdims=True)


# --- data plumbing ----------------------------------------------------------

def stack_pixels(seqs) -> tuple[np.ndarray, np.ndarray]:
    """(n, 30, 3, 16, 16) float32 pixels and (n,) int labels."""
    if not seqs:
        raise EmptySplit("no sequences")
    pixels = np.stack([s.images for s in seqs]).astype(np.float32)
    labels = np.asarray([s.label for s in seqs], dtype=np.int64)
    return pixels, labels


def balanced_split(items, val_fraction: float, seed: int) -> tuple[list, list]:
    """Carve out a class-balanced validation set; the rest stays for training.

    Validation takes k of each class, k = max(1, round(val_fraction * size of
    the smaller class)).  Early stopping on plain accuracy is meaningful only
    because this split is balanced.
    """
    pos = [i for i, s in enumerate(items) if s.label == 1]
    neg = [i for i, s in enumerate(items) if s.label != 1]
    if not pos or not neg:
        raise EmptySplit("balanced split needs both classes present")
    k = max(1, int(round(val_fraction * min(len(pos), len(neg)))))
    k = min(k, len(pos) - 1, len(neg) - 1)
    if k < 1:
        raise EmptySplit("not enough samples to hold out a validation set")
    rng = np.random.default_rng(seed)
    val_ids = set(rng.choice(pos, size=k, replace=False).tolist())
    val_ids |= set(rng.choice(neg, size=k, replace=False).tolist())
    train = [s for i, s in enumerate(items) if i not in val_ids]
    val = [s for i, s in enumerate(items) if i in val_ids]
    return train, val


# --- epoch loop -------------------------------------------------------------

@dataclass
class TrainHistory:
    epoch_losses: list[float] = field(default_factory=list)
    val_accuracies: list[float] = field(default_factory=list)
    best_epoch: int = 0      # 1-based; 0 means never trained
    stopped_epoch: int = 0


class EarlyStopper:
    """Best-epoch tracking plus the stop rule: halt once validation accuracy
    has decreased (each epoch vs the one before it) for ``patience``
    consecutive epochs.  E.g. accuracies [0.6, 0.7, 0.65] with patience 1
    stop after epoch 3 and keep epoch 2."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_epoch = 0   # 1-based; 0 until the first update
        self.best_accuracy = -1.0
        self._epoch = 0
        self._previous = None
        self._decreases = 0

    def update(self, accuracy: float) -> bool:
        """Record one epoch's validation accuracy; returns True to stop."""
        self._epoch += 1
        if accuracy > self.best_accuracy:
            self.best_accuracy = accuracy
            self.best_epoch = self._epoch
        if self._previous is not None and accuracy < self._previous:
            self._decreases += 1
        else:
            self._decreases = 0
        self._previous = accuracy
        return self._decreases >= self.patience


def _window_forward(model: mdl.Model):
    def forward(pixels: np.ndarray) -> Tensor:
        frames = [Tensor(pixels[:, t]) for t in range(mdl.SEQ_LEN)]
        return mdl.sequence_logits(model, frames)
    return forward


def _image_forward(model: mdl.Model, head: mdl.PretrainHead):
    def forward(pixels: np.ndarray) -> Tensor:
        return mdl.pretrain_logits(model, head, Tensor(pixels))
    return forward


def _predict_labels(forward, pixels: np.ndarray, chunk: int) -> np.ndarray:
    outs = []
    with ad.no_grad():
        for lo in range(0, pixels.shape[0], chunk):
            outs.append(forward(pixels[lo:lo + chunk]).data.argmax(axis=1))
    return np.concatenate(outs)


def _run_epochs(forward, tensors: list[Tensor], train_pixels, train_labels,
                val_pixels, val_labels, config: TrainConfig,
                snapshot, restore) -> TrainHistory:
    """Shared mini-batch/early-stopping engine.

    ``snapshot()`` captures the trainable state, ``restore(state)`` puts the
    best epoch back.  Stops once validation accuracy has dropped (vs the
    previous epoch) for patience_epochs consecutive epochs.
    """
    if train_pixels.shape[0] == 0:
        raise EmptySplit("empty training split")
    if val_pixels.shape[0] == 0:
        raise EmptySplit("empty validation split")

    rng = np.random.default_rng(config.seed)
    opt = ad.RmsProp(tensors, lr=config.learning_rate)
    history = TrainHistory()
    best_state = snapshot()
    stopper = EarlyStopper(config.patience_epochs)

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(train_pixels.shape[0])
        epoch_loss = 0.0
        for lo in range(0, order.size, config.batch_size):
            batch = order[lo:lo + config.batch_size]
            opt.zero_grad()
            for clo in range(0, batch.size, config.chunk_size):
                part = batch[clo:clo + config.chunk_size]
                logits = forward(train_pixels[part])
                loss = ad.softmax_cross_entropy(logits, train_labels[part])
                ad.scale(loss, part.size / batch.size).backward()
                epoch_loss += loss.item() * part.size
            opt.step()
        history.epoch_losses.append(epoch_loss / order.size)

        predicted = _predict_labels(forward, val_pixels, config.chunk_size)
        acc = float((predicted == val_labels).mean())
        history.val_accuracies.append(acc)

        stop = stopper.update(acc)
        if stopper.best_epoch == epoch:
            best_state = snapshot()
        if stop:
            history.stopped_epoch = epoch
            break
    else:
        history.stopped_epoch = config.max_epochs

    history.best_epoch = stopper.best_epoch
    restore(best_state)
    return history


def train_loop(model: mdl.Model, train_seqs, val_seqs,
               config: TrainConfig) -> TrainHistory:
    """Fit the full window classifier in place; parameters end at the
    best-validation epoch."""
    train_pixels, train_labels = stack_pixels(train_seqs)
    val_pixels, val_labels = stack_pixels(val_seqs)
    tensors = model.tensors()

    def snapshot():
        return [t.data.copy() for t in tensors]

    def restore(state):
        for t, data in zip(tensors, state):
            t.data = data.copy()

    return _run_epochs(_window_forward(model), tensors, train_pixels,
                       train_labels, val_pixels, val_labels, config,
                       snapshot, restore)


def pretrain_conv(images: np.ndarray, labels: np.ndarray,
                  config: TrainConfig, seed_model: mdl.Model | None = None
                  ) -> tuple[dict[str, np.ndarray], TrainHistory]:
    """Train the conv stack plus a throwaway 2-class head on single frames.

    Frames inherit their window's label.  Returns only the conv weights
    (head excluded) for initializing the full model.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] != labels.shape[0]:
        raise EmptySplit("images and labels differ in length")
    model = seed_model if seed_model is not None else mdl.init_params(config.seed)
    head = mdl.attach_pretrain_head(config.seed + 1)
    tensors = model.conv_tensors() + [head.w, head.b]

    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels != 1)
    if pos.size == 0 or neg.size == 0:
        raise EmptySplit("pretraining needs both classes")
    k = max(1, int(round(config.val_fraction * min(pos.size, neg.size))))
    k = min(k, pos.size - 1, neg.size - 1)
    if k < 1:
        raise EmptySplit("not enough frames to hold out a validation set")
    rng = np.random.default_rng(config.seed)
    val_ids = np.concatenate([rng.choice(pos, size=k, replace=False),
                              rng.choice(neg, size=k, replace=False)])
    mask = np.zeros(labels.shape[0], dtype=bool)
    mask[val_ids] = True

    def snapshot():
        return [t.data.copy() for t in tensors]

    def restore(state):
        for t, data in zip(tensors, state):
            t.data = data.copy()

    cfg = replace(config, max_epochs=config.pretrain_epochs)
    # images are light; process whole batches in one backward pass
    cfg = replace(cfg, chunk_size=max(cfg.chunk_size, cfg.batch_size))
    history = _run_epochs(_image_forward(model, head), tensors,
                          images[~mask], labels[~mask],
                          images[mask], labels[mask], cfg,
                          snapshot, restore)
    conv = {name: model[name].data.copy()
            for name in ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
                         "fv_w", "fv_b")}
    return conv, history


def apply_conv_weights(model: mdl.Model, conv: dict[str, np.ndarray]) -> None:
    """Bit-copy pretrained conv weights into a full model."""
    for name, data in conv.items():
        if model[name].data.shape != data.shape:
            raise mdl.ShapeMismatchOnLoad(
                f"{name}: pretrained shape {data.shape} vs "
                f"{model[name].data.shape}")
        model[name].data = np.array(data, dtype=model[name].data.dtype)


def finetune(base: mdl.Model, train_seqs, val_seqs,
             config: TrainConfig) -> tuple[mdl.Model, TrainHistory]:
    """Continue training from an existing model; the base stays untouched."""
    tuned = base.copy()
    if config.max_epochs == 0:
        return tuned, TrainHistory()
    history = train_loop(tuned, train_seqs, val_seqs, config)
    return tuned, history


# --- ensembling -------------------------------------------------------------

@dataclass
class EnsembleModel:
    """Three structurally identical members plus the label-space priors
    needed to undo the training-time rebalancing."""
    members: list[mdl.Model]
    normalizer: Normalizer | None = None
    train_prior: tuple[float, float] | None = None
    deploy_prior: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.members:
            raise EmptySplit("ensemble needs at least one member")
        shapes = [tuple(t.data.shape for t in m.tensors()) for m in self.members]
        if any(s != shapes[0] for s in shapes):
            raise mdl.ShapeMismatchOnLoad("ensemble members differ in shape")


def ensemble_predict(ens: EnsembleModel, sequences: np.ndarray) -> np.ndarray:
    """Mean of member softmax outputs, prior-corrected when priors are set.

    ``sequences`` is (n, 30, 3, 16, 16) normalized pixels; returns (n, 2).
    """
    probs = np.mean([mdl.batch_probabilities(m, sequences)
                     for m in ens.members], axis=0)
    if ens.train_prior is not None and ens.deploy_prior is not None:
        probs = prior_correct(probs, ens.train_prior, ens.deploy_prior)
    return probs


def _fit_member(payload):
    """Top-level so worker processes can unpickle it."""
    member_cfg, init, conv, train_part, val_part = payload
    if init is not None:
        member = init.copy()
    else:
        member = mdl.init_params(member_cfg.seed)
        if conv is not None:
            apply_conv_weights(member, conv)
    history = train_loop(member, train_part, val_part, member_cfg)
    return member, history


def pmap(fn, payloads, jobs: int = 1) -> list:
    """Map preserving order; a process pool when jobs > 1."""
    payloads = list(payloads)
    if jobs <= 1 or len(payloads) <= 1:
        return [fn(p) for p in payloads]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=min(jobs, len(payloads))) as pool:
        return list(pool.map(fn, payloads, chunksize=1))


def train_detector(train_seqs, config: TrainConfig, n_members: int = 3,
                   pretrain: bool = True, init: mdl.Model | None = None,
                   jobs: int = 1) -> tuple[EnsembleModel, list[TrainHistory]]:
    """Full recipe: rebalance, fit the normalizer, optionally pretrain the
    conv stack, train each member from its own seed, record priors.

    ``train_seqs`` are raw (un-normalized) sequences; the normalizer is fit
    on this split only and stored with the ensemble.  Members are
    independent, so jobs > 1 trains them in separate processes.
    """
    deploy_prior = class_prior(train_seqs)
    balanced = rebalance(train_seqs, config.target_ratio, seed=config.seed)
    train_prior = class_prior(balanced)

    norm = fit_normalizer(balanced)
    normalized = [norm.apply(s) for s in balanced]
    train_part, val_part = balanced_split(normalized, config.val_fraction,
                                          config.seed)

    conv = None
    if pretrain and init is None:
        pixels, labels = stack_pixels(train_part)
        frames = pixels.reshape(-1, mdl.N_BANDS, pixels.shape[-2],
                                pixels.shape[-1])
        frame_labels = np.repeat(labels, mdl.SEQ_LEN)
        conv, _ = pretrain_conv(frames, frame_labels, config)

    payloads = [(replace(config, seed=config.seed + i), init, conv,
                 train_part, val_part) for i in range(n_members)]
    results = pmap(_fit_member, payloads, jobs)
    members = [m for m, _ in results]
    histories = [h for _, h in results]

    ens = EnsembleModel(members=members, normalizer=norm,
                        train_prior=train_prior, deploy_prior=deploy_prior)
    return ens, histories
