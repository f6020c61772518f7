"""Training loop over prefixed sequences and conditioned autoregressive
generation with temperature sampling.

Training examples are all (window, next-token) pairs taken from each
sequence, where a window is the up-to-max_length tokens preceding the
predicted position. Generation starts from a [home, work] context and
keeps sampling from the softmax (logits scaled by 1/temperature) until
the trajectory body is complete; temperature 0 selects greedily.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, DomainError, TrainingError
from .nn import (
    AdamState,
    ModelConfig,
    _forward_batch,
    _Workspace,
    adam_init,
    init_parameters,
    load_checkpoint,
    loss_and_gradients_arrays,
    optimizer_step,
    save_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 1024
    learning_rate: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 0  # epochs between intermediate checkpoints; 0 = final only
    checkpoint_dir: Optional[str] = None

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint_every must be >= 0")
        if self.checkpoint_every > 0 and not self.checkpoint_dir:
            raise ConfigurationError("checkpoint_every needs a checkpoint_dir")


@dataclass(frozen=True)
class GenerationRequest:
    pairs: tuple  # ((home_token, work_token), ...)
    temperature: float = 1.0
    seed: int = 0

    def validate(self, vocab_size: int, null_token: int = 0) -> None:
        if self.temperature < 0:
            raise ConfigurationError("temperature must be >= 0 (0 means greedy)")
        for home, work in self.pairs:
            for tok in (home, work):
                if not (0 <= tok < vocab_size):
                    raise ConfigurationError(f"label token {tok} outside vocabulary")
                if tok == null_token:
                    raise ConfigurationError("label tokens must be non-null")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    metadata: dict = field(default_factory=dict)

    def save(self, path: Union[str, Path]) -> None:
        save_checkpoint(path, self.config, self.params, self.metadata)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        config, params, metadata = load_checkpoint(path)
        return cls(config, params, metadata)


def _gather_windows(
    seqs: np.ndarray, seq_idx: np.ndarray, pos: np.ndarray, max_length: int
) -> tuple[np.ndarray, np.ndarray]:
    """Left-padded windows of the up-to-max_length tokens before pos."""
    lengths = np.minimum(pos, max_length)
    L = int(lengths.max())
    offsets = np.arange(L)[None, :]
    src = pos[:, None] - L + offsets
    valid = offsets >= (L - lengths)[:, None]
    gathered = seqs[seq_idx[:, None], np.clip(src, 0, seqs.shape[1] - 1)]
    return np.where(valid, gathered, 0).astype(np.int32), lengths


def train(
    sequences: np.ndarray,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> Checkpoint:
    """Train on an (N, T+2) array of prefixed sequences.

    Examples are shuffled each epoch with the seeded RNG; the mean loss
    per epoch is logged and recorded in the checkpoint metadata.
    """
    model_config.validate()
    train_config.validate()
    sequences = np.asarray(sequences, dtype=np.int32)
    if sequences.ndim != 2 or sequences.shape[0] == 0 or sequences.shape[1] < 2:
        raise ConfigurationError("sequences must be a non-empty (N, T+2) array")
    if sequences.min() < 0 or sequences.max() >= model_config.vocab_size:
        raise DomainError("sequence token outside vocabulary")

    n_seq, s_len = sequences.shape
    positions_per_seq = s_len - 1
    n_examples = n_seq * positions_per_seq
    params = init_parameters(model_config)
    state: AdamState = adam_init(params)
    rng = np.random.default_rng(train_config.seed)
    workspace = _Workspace()

    loss_history = []
    for epoch in range(train_config.epochs):
        # shuffle all examples, then batch same-length windows together
        # (padding-free batches); batch order is itself shuffled
        perm = rng.permutation(n_examples)
        example_len = np.minimum(perm % positions_per_seq + 1, model_config.max_length)
        batches = []
        for length in np.unique(example_len):
            bucket = perm[example_len == length]
            for start in range(0, bucket.size, train_config.batch_size):
                batches.append(bucket[start : start + train_config.batch_size])
        order = rng.permutation(len(batches))

        total_nll = 0.0
        for bi in order:
            chunk = batches[bi]
            seq_idx = chunk // positions_per_seq
            pos = chunk % positions_per_seq + 1
            windows, lengths = _gather_windows(sequences, seq_idx, pos, model_config.max_length)
            targets = sequences[seq_idx, pos].astype(np.int64)
            loss, grads = loss_and_gradients_arrays(
                params,
                windows,
                lengths,
                targets,
                model_config,
                mode="train",
                rng=rng,
                workspace=workspace,
            )
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}")
            optimizer_step(params, grads, state, train_config.learning_rate)
            total_nll += loss * len(chunk)
        epoch_loss = total_nll / n_examples
        loss_history.append(epoch_loss)
        log.info("epoch %d/%d mean loss %.6f", epoch + 1, train_config.epochs, epoch_loss)
        if train_config.checkpoint_every and (epoch + 1) % train_config.checkpoint_every == 0:
            snap = Checkpoint(
                model_config,
                {k: v.copy() for k, v in params.items()},
                {"epochs_run": epoch + 1, "final_loss": epoch_loss,
                 "train_seed": train_config.seed, "body_length": int(s_len - 2)},
            )
            snap.save(Path(train_config.checkpoint_dir) / f"checkpoint_epoch{epoch + 1:04d}.bin")

    metadata = {
        "epochs_run": train_config.epochs,
        "final_loss": loss_history[-1] if loss_history else None,
        "loss_history": loss_history,
        "train_seed": train_config.seed,
        "batch_size": train_config.batch_size,
        "learning_rate": train_config.learning_rate,
        "n_sequences": int(n_seq),
        "body_length": int(s_len - 2),
    }
    return Checkpoint(model_config, params, metadata)


def _sample_tokens(probs: np.ndarray, temperature: float, rngs) -> np.ndarray:
    """Sample one token per row; temperature 0 is greedy argmax."""
    if temperature == 0.0:
        return probs.argmax(axis=1).astype(np.int32)
    p = probs.astype(np.float64)
    if temperature != 1.0:
        p = p ** (1.0 / temperature)
    p /= p.sum(axis=1, keepdims=True)
    out = np.empty(p.shape[0], dtype=np.int32)
    for i in range(p.shape[0]):
        u = rngs[i].random()
        out[i] = min(int(np.searchsorted(np.cumsum(p[i]), u)), p.shape[1] - 1)
    return out


def _generate_batch(
    checkpoint: Checkpoint,
    starts: np.ndarray,
    temperature: float,
    rngs,
    length: int,
) -> np.ndarray:
    config = checkpoint.config
    params = checkpoint.params
    ctx = np.asarray(starts, dtype=np.int32)
    n = ctx.shape[0]
    workspace = _Workspace()
    for _ in range(length):
        window = ctx[:, -config.max_length :]
        lengths = np.full(n, window.shape[1], dtype=np.int64)
        probs, _ = _forward_batch(
            params, np.ascontiguousarray(window), lengths, config, "eval", workspace=workspace
        )
        tok = _sample_tokens(probs, temperature, rngs)
        ctx = np.concatenate([ctx, tok[:, None]], axis=1)
    return ctx[:, starts.shape[1] :]


def generate_trajectory(
    checkpoint: Checkpoint,
    home: int,
    work: int,
    temperature: float = 1.0,
    rng=None,
    length: Optional[int] = None,
) -> np.ndarray:
    """Generate one trajectory body conditioned on a [home, work] prefix."""
    GenerationRequest(((home, work),), temperature).validate(checkpoint.config.vocab_size)
    if length is None:
        length = int(checkpoint.metadata.get("body_length", 120))
    if rng is None:
        rng = np.random.default_rng(0)
    starts = np.array([[home, work]], dtype=np.int32)
    return _generate_batch(checkpoint, starts, temperature, [rng], length)[0]


def generate_sample(
    checkpoint: Checkpoint,
    request: GenerationRequest,
    length: Optional[int] = None,
) -> list[tuple[int, int, np.ndarray]]:
    """Generate one trajectory per requested pair, preserving order.

    Each trajectory draws from its own RNG stream split deterministically
    from the request seed, so (checkpoint, request) fully determine the
    output.
    """
    request.validate(checkpoint.config.vocab_size)
    if not request.pairs:
        return []
    if length is None:
        length = int(checkpoint.metadata.get("body_length", 120))
    seeds = np.random.SeedSequence(request.seed).spawn(len(request.pairs))
    rngs = [np.random.default_rng(s) for s in seeds]
    starts = np.array(request.pairs, dtype=np.int32)
    bodies = _generate_batch(checkpoint, starts, request.temperature, rngs, length)
    return [(int(h), int(w), bodies[i]) for i, (h, w) in enumerate(request.pairs)]
