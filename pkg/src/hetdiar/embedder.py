"""Convolutional speaker-embedding network and its training loop.

The network is a compact residual CNN over (B, T, D) feature tensors:
a stem convolution, a stack of residual stages (entry 0 of the stage
lists describes the stem; downsampling stages floor-halve both the time
and frequency axes), global average pooling, a linear embedding head,
and a linear classification head trained with soft-label cross entropy.

The full-scale configuration mirrors the six-stage contract
(16, 16, 32, 64, 128, 256 channels, 256-dim embeddings); the desk-scale
default used throughout the tests is (8, 8, 16, 32) with two blocks per
stage and 64-dim embeddings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
from sklearn.base import BaseEstimator

from . import nn
from .assembly import AssembledBatch, AssemblyConfig, BatchAssembler, CorpusIndex
from .errors import DataError, NumericError
from .io import read_container, write_container
from .validation import check_row_stochastic

EMBEDDER_MAGIC = b"HDEM"


@dataclass
class EmbedderConfig:
    """Architecture contract. Entry 0 of the stage lists is the stem conv."""

    stage_channels: tuple[int, ...] = (8, 8, 16, 32)
    stage_blocks: tuple[int, ...] = (0, 2, 2, 2)
    stage_downsample: tuple[bool, ...] = (False, False, True, True)
    embed_dim: int = 256
    n_classes: int = 2
    input_dim: int = 16

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.stage_blocks = tuple(self.stage_blocks)
        self.stage_downsample = tuple(self.stage_downsample)
        if not (len(self.stage_channels) == len(self.stage_blocks)
                == len(self.stage_downsample)):
            raise DataError("stage_channels/stage_blocks/stage_downsample lengths differ")
        if len(self.stage_channels) < 2:
            raise DataError("need a stem stage and at least one residual stage")
        if self.embed_dim < 1 or self.n_classes < 2:
            raise DataError("embed_dim must be >= 1 and n_classes >= 2")

    @property
    def n_downsample(self) -> int:
        return sum(self.stage_downsample)

    @classmethod
    def full_scale(cls, n_classes: int, input_dim: int = 64) -> "EmbedderConfig":
        return cls(stage_channels=(16, 16, 32, 64, 128, 256),
                   stage_blocks=(0, 3, 4, 6, 3, 3),
                   stage_downsample=(False, False, True, True, True, True),
                   embed_dim=256, n_classes=n_classes, input_dim=input_dim)


class EmbedderNet:
    """Parameter container with explicit forward/backward passes."""

    def __init__(self, config: EmbedderConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        if config.stage_downsample[0]:
            raise DataError("the stem stage cannot downsample")
        self.stem = nn.Conv2d(1, config.stage_channels[0], 3, 1, ((1, 1), (1, 1)),
                              rng, "stem")
        self.blocks: list[nn.ResidualBlock] = []
        in_ch = config.stage_channels[0]
        for s in range(1, len(config.stage_channels)):
            out_ch = config.stage_channels[s]
            for b in range(config.stage_blocks[s]):
                downsample = config.stage_downsample[s] and b == 0
                self.blocks.append(
                    nn.ResidualBlock(in_ch, out_ch, downsample, rng, f"res{s}.b{b}")
                )
                in_ch = out_ch
        self.linear1 = nn.Linear(in_ch, config.embed_dim, rng, "linear1")
        self.linear2 = nn.Linear(config.embed_dim, config.n_classes, rng, "linear2")

    def params(self):
        out = self.stem.params()
        for block in self.blocks:
            out += block.params()
        return out + self.linear1.params() + self.linear2.params()

    def forward(self, batch_tensor: np.ndarray, with_cache: bool = False):
        """Run (B, T, D) features through the network.

        Returns ``(embeddings, logits)`` or, with ``with_cache``, the
        backward cache as a third element.
        """
        x = np.asarray(batch_tensor, dtype=np.float64)
        if x.ndim != 3:
            raise DataError(f"expected a (B, T, D) tensor, got shape {x.shape}")
        if x.shape[2] != self.config.input_dim:
            raise DataError(
                f"feature dim {x.shape[2]} does not match config input_dim "
                f"{self.config.input_dim}"
            )
        if not np.all(np.isfinite(x)):
            raise DataError("batch tensor contains non-finite values")
        min_len = 2 ** self.config.n_downsample
        if x.shape[1] < min_len:
            raise DataError(
                f"segment too short: {x.shape[1]} frames, need >= {min_len} "
                f"to survive {self.config.n_downsample} downsampling stages"
            )
        h = x[:, None, :, :]
        h, c_stem = self.stem.forward(h)
        h, m_stem = nn.relu(h)
        block_caches = []
        for block in self.blocks:
            h, cache = block.forward(h)
            block_caches.append(cache)
        pooled, pool_shape = nn.global_avg_pool(h)
        emb, c_lin1 = self.linear1.forward(pooled)
        act, m_emb = nn.relu(emb)
        logits, c_lin2 = self.linear2.forward(act)
        if with_cache:
            return emb, logits, (c_stem, m_stem, block_caches, pool_shape, c_lin1,
                                 m_emb, c_lin2)
        return emb, logits

    def backward(self, dlogits: np.ndarray, cache, dembeddings: np.ndarray | None = None):
        c_stem, m_stem, block_caches, pool_shape, c_lin1, m_emb, c_lin2 = cache
        demb = nn.relu_backward(self.linear2.backward(dlogits, c_lin2), m_emb)
        if dembeddings is not None:
            demb = demb + dembeddings
        dpooled = self.linear1.backward(demb, c_lin1)
        dh = nn.global_avg_pool_backward(dpooled, pool_shape)
        for block, bcache in zip(reversed(self.blocks), reversed(block_caches)):
            dh = block.backward(dh, bcache)
        self.stem.backward(nn.relu_backward(dh, m_stem), c_stem)


def forward(model: EmbedderNet, batch_tensor: np.ndarray):
    """(B, T, D) features -> (embeddings, logits)."""
    return model.forward(batch_tensor)


def soft_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean over rows of -sum(label * log softmax(logits))."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = check_row_stochastic(labels)
    if logits.shape != labels.shape:
        raise DataError(f"logits {logits.shape} and labels {labels.shape} differ")
    loss, _ = nn.soft_cross_entropy_with_grad(logits, labels)
    return loss


@dataclass
class TrainState:
    model: EmbedderNet
    optimizer: nn.SgdMomentum
    step: int = 0
    loss_history: list[float] = field(default_factory=list)

    @property
    def learning_rate(self) -> float:
        return self.optimizer.learning_rate

    @property
    def momentum(self) -> float:
        return self.optimizer.momentum

    @classmethod
    def create(cls, model: EmbedderNet, learning_rate: float,
               momentum: float = 0.9) -> "TrainState":
        return cls(model=model,
                   optimizer=nn.SgdMomentum(model.params(), learning_rate, momentum))


def train_step(state: TrainState, batch: AssembledBatch) -> TrainState:
    """One SGD-with-momentum update on one assembled batch (in place)."""
    model = state.model
    state.optimizer.zero_grad()
    _, logits, cache = model.forward(batch.tensor, with_cache=True)
    labels = check_row_stochastic(batch.labels)
    loss, dlogits = nn.soft_cross_entropy_with_grad(logits, labels)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss at step {state.step}")
    model.backward(dlogits, cache)
    state.optimizer.check_finite()
    state.optimizer.step()
    state.step += 1
    state.loss_history.append(loss)
    return state


def extract_embedding(model: EmbedderNet, feats) -> np.ndarray:
    """Embedding vector of a single segment (its linear1 output)."""
    frames = feats.frames if hasattr(feats, "frames") else np.asarray(feats)
    emb, _ = model.forward(frames[None, :, :])
    return emb[0]


@dataclass
class TrainingSchedule:
    epochs: int = 5
    steps_per_epoch: int = 40
    learning_rate: float = 0.05
    momentum: float = 0.9
    lr_decay: float = 1.0  # multiplicative, applied after each epoch


def train(index: CorpusIndex, assembler_cfg: AssemblyConfig, embed_cfg: EmbedderConfig,
          schedule: TrainingSchedule, seed: int = 0):
    """Train an embedder on assembled batches; deterministic given seed.

    Returns ``(model, report)`` where the report carries the loss curve
    and the observed augmentation rate of the consumed batch stream.
    """
    if embed_cfg.n_classes != index.n_speakers:
        raise DataError(
            f"config expects {embed_cfg.n_classes} classes, corpus has "
            f"{index.n_speakers} speakers"
        )
    if embed_cfg.input_dim != assembler_cfg.feature_dim:
        raise DataError("embedder input_dim and assembly feature_dim differ")
    model = EmbedderNet(embed_cfg, seed=seed)
    state = TrainState.create(model, schedule.learning_rate, schedule.momentum)
    assembler = BatchAssembler(index, assembler_cfg)
    rows = multi_rows = 0
    for epoch in range(schedule.epochs):
        for batch in assembler.batches(schedule.steps_per_epoch):
            rows += batch.batch_size
            multi_rows += sum(batch.is_multispeaker(i) for i in range(batch.batch_size))
            train_step(state, batch)
        state.optimizer.learning_rate *= schedule.lr_decay
    report = {
        "steps": state.step,
        "loss_curve": list(state.loss_history),
        "final_loss": state.loss_history[-1] if state.loss_history else None,
        "rows_seen": rows,
        "augmentation_rate": multi_rows / rows if rows else 0.0,
    }
    return model, report


def save_embedder(path, model: EmbedderNet) -> None:
    header = asdict(model.config)
    write_container(path, EMBEDDER_MAGIC, header,
                    [p for _, p, _ in model.params()], dtype="<f4")


def load_embedder(path) -> EmbedderNet:
    header, tensors = read_container(path, EMBEDDER_MAGIC, dtype="<f4")
    if set(header) != set(asdict(EmbedderConfig())):
        raise DataError(f"checkpoint header fields {sorted(header)} unexpected")
    config = EmbedderConfig(**header)
    model = EmbedderNet(config, seed=0)
    params = model.params()
    if len(tensors) != len(params):
        raise DataError(f"checkpoint has {len(tensors)} tensors, expected {len(params)}")
    for (name, p, _), loaded in zip(params, tensors):
        if p.shape != loaded.shape:
            raise DataError(f"checkpoint tensor {name} has shape {loaded.shape}, "
                            f"expected {p.shape}")
        p[...] = loaded
    return model


class SpeakerEmbedder(BaseEstimator):
    """Estimator facade: fit on a corpus index, transform segments.

    Parameters mirror the architecture, assembly, and schedule knobs so
    the whole training scheme is grid-searchable via ``get_params``.
    """

    def __init__(self, stage_channels=(8, 8, 16, 32), stage_blocks=(0, 2, 2, 2),
                 stage_downsample=(False, False, True, True), embed_dim=64,
                 batch_size=16, temporal_frames=100, crop_min=100, crop_max=100,
                 epochs=5, steps_per_epoch=40, learning_rate=0.05, momentum=0.9,
                 lr_decay=1.0, seed=0):
        self.stage_channels = stage_channels
        self.stage_blocks = stage_blocks
        self.stage_downsample = stage_downsample
        self.embed_dim = embed_dim
        self.batch_size = batch_size
        self.temporal_frames = temporal_frames
        self.crop_min = crop_min
        self.crop_max = crop_max
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.lr_decay = lr_decay
        self.seed = seed

    def fit(self, index: CorpusIndex, y=None):
        assembler_cfg = AssemblyConfig(
            batch_size=self.batch_size, temporal_frames=self.temporal_frames,
            feature_dim=index.feature_dim, crop_min=self.crop_min,
            crop_max=self.crop_max, seed=self.seed)
        embed_cfg = EmbedderConfig(
            stage_channels=self.stage_channels, stage_blocks=self.stage_blocks,
            stage_downsample=self.stage_downsample, embed_dim=self.embed_dim,
            n_classes=index.n_speakers, input_dim=index.feature_dim)
        schedule = TrainingSchedule(
            epochs=self.epochs, steps_per_epoch=self.steps_per_epoch,
            learning_rate=self.learning_rate, momentum=self.momentum,
            lr_decay=self.lr_decay)
        self.model_, self.report_ = train(index, assembler_cfg, embed_cfg, schedule,
                                          seed=self.seed)
        return self

    def transform(self, segments) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise DataError("SpeakerEmbedder is not fitted")
        return np.stack([extract_embedding(self.model_, seg) for seg in segments])
