"""Unified multimodal encoder-decoder.

Text tokens and image regions are embedded, concatenated and encoded
bidirectionally; a causal decoder with cross-attention produces label text
through an output head that is the transpose of the shared embedding table.
The visual sentinel rows of that same table double as region-id embeddings.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .nn_core import (MLP, ConfigError, Embedding, LayerNorm, Linear, Module, ModuleList,
                      MultiHeadAttention, Parameter, ShapeError, Tensor, bucket_matrix, ops)
from .nn_core.position import VISUAL_POSITION
from .nn_core.tensor import default_dtype

IGNORE = -100
POSITIONAL = ("relative-bias", "learned-absolute")
MASKING = ("span-sentinel", "token-mask")
HEAD_MODES = ("shared", "per-task")


@dataclass
class ModelConfig:
    m_enc: int = 2
    m_dec: int = 2
    d: int = 64
    heads: int = 4
    d_ff: int = 256
    vocab_size: int = 512
    n_regions: int = 8
    d_roi: int = 64
    positional: str = "relative-bias"
    masking: str = "span-sentinel"
    max_text_len: int = 64
    n_images: int = 2
    head_mode: str = "shared"
    head_tasks: tuple = ()
    num_buckets: int = 32
    max_distance: int = 64
    vis_offset: int = 105  # id of <vis_1> in the vocabulary
    vqa_candidates: int = 0  # K of the discriminative VQA head; 0 = no head
    emb_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.head_tasks = tuple(self.head_tasks)
        if self.positional not in POSITIONAL:
            raise ConfigError(f"positional must be one of {POSITIONAL}, got {self.positional!r}")
        if self.masking not in MASKING:
            raise ConfigError(f"masking must be one of {MASKING}, got {self.masking!r}")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if self.d % self.heads:
            raise ConfigError(f"hidden dim {self.d} is not divisible by {self.heads} heads")
        if self.vis_offset + self.n_regions > self.vocab_size:
            raise ConfigError("visual sentinel block does not fit in the vocabulary")

    @classmethod
    def for_vocab(cls, vocab, **kw) -> "ModelConfig":
        """Config whose vocabulary size and sentinel block match ``vocab``."""
        kw.setdefault("n_regions", vocab.n_visual_sentinels)
        if kw["n_regions"] != vocab.n_visual_sentinels:
            raise ConfigError(f"n_regions={kw['n_regions']} but the vocabulary has "
                              f"{vocab.n_visual_sentinels} visual sentinels")
        return cls(vocab_size=len(vocab), vis_offset=vocab.visual_sentinel_range.start, **kw)

    @classmethod
    def preset(cls, name: str, **kw) -> "ModelConfig":
        """Full-scale layouts; the toy defaults are the dataclass defaults."""
        presets = {
            "vl-t5-base": dict(m_enc=12, m_dec=12, d=768, heads=12, d_ff=3072, n_regions=36,
                               positional="relative-bias", masking="span-sentinel", vocab_size=32200),
            "vl-bart-base": dict(m_enc=6, m_dec=6, d=768, heads=12, d_ff=3072, n_regions=36,
                                 positional="learned-absolute", masking="token-mask", vocab_size=50465,
                                 max_text_len=1024),
            "toy": {},
        }
        if name not in presets:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **kw})

    @property
    def decoder_start_id(self) -> int:
        # <pad> starts T5-style decoding, <s> starts BART-style decoding
        return 0 if self.masking == "span-sentinel" else 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["head_tasks"] = list(self.head_tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Batch:
    """Padded model inputs. Visual arrays hold ``images * n_regions`` slots."""
    input_ids: np.ndarray          # (B, Tx) int
    input_pad: np.ndarray          # (B, Tx) bool, True = padding
    roi: np.ndarray                # (B, N, d_roi)
    boxes: np.ndarray              # (B, N, 4)
    image_ids: np.ndarray          # (B, N) in {1, 2}
    region_ids: np.ndarray         # (B, N) in {1..n}
    decoder_input: np.ndarray | None = None  # (B, Ty)
    labels: np.ndarray | None = None         # (B, Ty), IGNORE marks padding
    extra: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.input_ids.shape[0]


@dataclass
class Encoded:
    h: Tensor               # (B, Tx + N, d)
    key_pad: np.ndarray     # (B, Tx + N) bool
    text_len: int
    n_visual: int


class _EncoderBlock(Module):
    def __init__(self, cfg, rng, name):
        super().__init__()
        self.ln1 = LayerNorm(cfg.d, name=f"{name}.ln1")
        self.attn = MultiHeadAttention(cfg.d, cfg.heads, rng, name=f"{name}.attn")
        self.ln2 = LayerNorm(cfg.d, name=f"{name}.ln2")
        self.ff = MLP(cfg.d, cfg.d_ff, cfg.d, rng, name=f"{name}.ff")

    def __call__(self, x, mask, bias):
        y = self.ln1(x)
        x = ops.add(x, self.attn(y, y, mask=mask, bias=bias))
        return ops.add(x, self.ff(self.ln2(x)))


class _DecoderBlock(Module):
    def __init__(self, cfg, rng, name):
        super().__init__()
        self.ln1 = LayerNorm(cfg.d, name=f"{name}.ln1")
        self.self_attn = MultiHeadAttention(cfg.d, cfg.heads, rng, name=f"{name}.self_attn")
        self.ln2 = LayerNorm(cfg.d, name=f"{name}.ln2")
        self.cross_attn = MultiHeadAttention(cfg.d, cfg.heads, rng, name=f"{name}.cross_attn")
        self.ln3 = LayerNorm(cfg.d, name=f"{name}.ln3")
        self.ff = MLP(cfg.d, cfg.d_ff, cfg.d, rng, name=f"{name}.ff")

    def __call__(self, y, memory, self_mask, cross_mask, bias):
        z = self.ln1(y)
        y = ops.add(y, self.self_attn(z, z, mask=self_mask, bias=bias))
        y = ops.add(y, self.cross_attn(self.ln2(y), memory, mask=cross_mask))
        return ops.add(y, self.ff(self.ln3(y)))


class _Stack(Module):
    pass


class VLModel(Module):
    """Encoder-decoder over text tokens and region features.

    Parameter tying: ``shared.weight``, ``encoder.embed_tokens``,
    ``decoder.embed_tokens`` and ``lm_head.weight`` are one Parameter.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg = dataclasses.replace(cfg)
        object.__setattr__(self, "cfg", cfg)
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d
        self.shared = Embedding(cfg.vocab_size, d, rng, std=cfg.emb_std, name="shared")

        self.encoder = _Stack()
        self.encoder.embed_tokens = self.shared.weight
        self.decoder = _Stack()
        self.decoder.embed_tokens = self.shared.weight
        self.lm_head = _Stack()
        self.lm_head.weight = self.shared.weight

        if cfg.positional == "learned-absolute":
            self.encoder.embed_positions = Parameter(
                (rng.standard_normal((cfg.max_text_len, d)) * cfg.emb_std).astype(default_dtype()),
                name="encoder.embed_positions")
            self.decoder.embed_positions = Parameter(
                (rng.standard_normal((cfg.max_text_len, d)) * cfg.emb_std).astype(default_dtype()),
                name="decoder.embed_positions")
        else:
            self.encoder.rel_bias = Parameter(
                (rng.standard_normal((cfg.num_buckets, cfg.heads)) * 0.1).astype(default_dtype()),
                name="encoder.rel_bias")
            self.decoder.rel_bias = Parameter(
                (rng.standard_normal((cfg.num_buckets, cfg.heads)) * 0.1).astype(default_dtype()),
                name="decoder.rel_bias")

        self.visual = _Stack()
        self.visual.roi_proj = Linear(cfg.d_roi, d, rng, name="visual.roi_proj")
        self.visual.roi_ln = LayerNorm(d, name="visual.roi_ln")
        self.visual.box_proj = Linear(4, d, rng, name="visual.box_proj")
        self.visual.box_ln = LayerNorm(d, name="visual.box_ln")
        self.visual.image_embed = Embedding(cfg.n_images, d, rng, std=cfg.emb_std, name="visual.image_embed")

        self.encoder.layers = ModuleList(_EncoderBlock(cfg, rng, f"encoder.layers.{i}") for i in range(cfg.m_enc))
        self.encoder.final_ln = LayerNorm(d, name="encoder.final_ln")
        self.decoder.layers = ModuleList(_DecoderBlock(cfg, rng, f"decoder.layers.{i}") for i in range(cfg.m_dec))
        self.decoder.final_ln = LayerNorm(d, name="decoder.final_ln")

        self.task_heads = _Stack()
        for task in cfg.head_tasks:
            setattr(self.task_heads, task,
                    Parameter(self.shared.weight.data.copy(), name=f"task_heads.{task}"))

        # discriminative baselines
        if cfg.vqa_candidates:
            self.vqa_head = MLP(d, d, cfg.vqa_candidates, rng, name="vqa_head")
        self.region_head = MLP(d, d, 1, rng, name="region_head")

    # ------------------------------------------------------------------
    # heads
    # ------------------------------------------------------------------
    def add_task_heads(self, tasks) -> None:
        """Per-task output heads, each a copy of the current shared head."""
        for task in tasks:
            if task in self.cfg.head_tasks:
                continue
            setattr(self.task_heads, task,
                    Parameter(self.shared.weight.data.copy(), name=f"task_heads.{task}"))
            self.cfg.head_tasks = self.cfg.head_tasks + (task,)
        self.cfg.head_mode = "per-task"

    def add_vqa_head(self, k: int, seed: int = 0) -> None:
        rng = np.random.default_rng(seed)
        self.vqa_head = MLP(self.cfg.d, self.cfg.d, k, rng, name="vqa_head")
        self.cfg.vqa_candidates = k

    def head_weight(self, task=None) -> Parameter:
        if self.cfg.head_mode == "per-task" and task is not None and task in self.cfg.head_tasks:
            return getattr(self.task_heads, task)
        return self.lm_head.weight

    def head_parameter_names(self, task=None, mode: str = "gen") -> set:
        """Names of parameters not touched by a forward pass of ``task`` in ``mode``."""
        unused = set()
        names = dict(self.named_parameters())
        for t in self.cfg.head_tasks:
            if self.cfg.head_mode != "per-task" or t != task:
                unused.add(f"task_heads.{t}")
        if mode != "disc-vqa":
            unused |= {n for n in names if n.startswith("vqa_head.")}
        if mode != "disc-region":
            unused |= {n for n in names if n.startswith("region_head.")}
        return unused

    # ------------------------------------------------------------------
    # embeddings
    # ------------------------------------------------------------------
    def embed_text(self, ids, decoder: bool = False) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise IndexError(f"token id out of range [0, {self.cfg.vocab_size})")
        B, T = ids.shape
        if T > self.cfg.max_text_len:
            raise ShapeError(f"sequence length {T} exceeds max_text_len {self.cfg.max_text_len}")
        x = ops.embedding(self.shared.weight, ids)
        if self.cfg.positional == "learned-absolute":
            table = self.decoder.embed_positions if decoder else self.encoder.embed_positions
            pos = ops.narrow(table, 0, 0, T)
            x = ops.add(x, ops.expand(pos, (B, T, self.cfg.d)))
        return x

    def embed_visual(self, roi, boxes, image_ids, region_ids) -> Tensor:
        """Sum of normalized RoI and box projections, image-id embedding and
        the shared-table row of each region's visual sentinel. No sequence
        position is added."""
        roi = np.asarray(roi)
        if roi.ndim == 2:
            roi, boxes = roi[None], np.asarray(boxes)[None]
            image_ids, region_ids = np.asarray(image_ids)[None], np.asarray(region_ids)[None]
        if roi.shape[-1] != self.cfg.d_roi:
            raise ShapeError(f"roi feature dim {roi.shape[-1]} != d_roi {self.cfg.d_roi}")
        region_ids = np.asarray(region_ids, dtype=np.int64)
        if region_ids.size and (region_ids.min() < 1 or region_ids.max() > self.cfg.n_regions):
            raise IndexError(f"region id outside 1..{self.cfg.n_regions}")
        image_ids = np.asarray(image_ids, dtype=np.int64)
        dt = self.shared.weight.dtype
        e = ops.add(self.visual.roi_ln(self.visual.roi_proj(Tensor(roi, dtype=dt))),
                    self.visual.box_ln(self.visual.box_proj(Tensor(np.asarray(boxes), dtype=dt))))
        e = ops.add(e, self.visual.image_embed(image_ids - 1))
        return ops.add(e, ops.embedding(self.shared.weight, self.cfg.vis_offset + region_ids - 1))

    # ------------------------------------------------------------------
    # encoder / decoder
    # ------------------------------------------------------------------
    def _rel_bias(self, table, q_pos, k_pos) -> Tensor:
        buckets = bucket_matrix(q_pos, k_pos, self.cfg.num_buckets, self.cfg.max_distance)
        return ops.transpose(ops.take(table, buckets, axis=0), (2, 0, 1))

    def encode(self, batch: Batch) -> Encoded:
        ex = self.embed_text(batch.input_ids)
        ev = self.embed_visual(batch.roi, batch.boxes, batch.image_ids, batch.region_ids)
        B, Tx = batch.input_ids.shape
        N = ev.shape[1]
        x = ops.concat([ex, ev], axis=1)
        key_pad = np.concatenate([np.asarray(batch.input_pad, dtype=bool), np.zeros((B, N), dtype=bool)], axis=1)
        T = Tx + N
        mask = np.broadcast_to(key_pad[:, None, :], (B, T, T))
        bias = None
        if self.cfg.positional == "relative-bias":
            pos = np.concatenate([np.arange(Tx), np.full(N, VISUAL_POSITION)])
            bias = self._rel_bias(self.encoder.rel_bias, pos, pos)
        for block in self.encoder.layers:
            x = block(x, mask, bias)
        return Encoded(self.encoder.final_ln(x), key_pad, Tx, N)

    def decode_hidden(self, decoder_input, enc: Encoded) -> Tensor:
        decoder_input = np.asarray(decoder_input, dtype=np.int64)
        B, Ty = decoder_input.shape
        y = self.embed_text(decoder_input, decoder=True)
        causal = np.triu(np.ones((Ty, Ty), dtype=bool), k=1)
        self_mask = np.broadcast_to(causal, (B, Ty, Ty))
        T = enc.key_pad.shape[1]
        cross_mask = np.broadcast_to(enc.key_pad[:, None, :], (B, Ty, T))
        bias = None
        if self.cfg.positional == "relative-bias":
            pos = np.arange(Ty)
            bias = self._rel_bias(self.decoder.rel_bias, pos, pos)
        for block in self.decoder.layers:
            y = block(y, enc.h, self_mask, cross_mask, bias)
        return self.decoder.final_ln(y)

    def lm_logits(self, hidden: Tensor, task=None) -> Tensor:
        w = self.head_weight(task)
        scaled = ops.scale(hidden, 1.0 / math.sqrt(self.cfg.d))
        return ops.linear(scaled, ops.transpose(w, (1, 0)))

    def decode_logits(self, decoder_input, enc: Encoded, task=None) -> Tensor:
        """Per-position next-token logits (B, Ty, V)."""
        return self.lm_logits(self.decode_hidden(decoder_input, enc), task)

    # ------------------------------------------------------------------
    # losses
    # ------------------------------------------------------------------
    def generation_loss(self, batch: Batch, task=None, enc: Encoded | None = None) -> Tensor:
        """Mean token NLL of the label text over non-ignored positions."""
        labels = np.asarray(batch.labels, dtype=np.int64)
        if not (labels != IGNORE).any():
            raise ValueError("every target position is ignored; the loss is empty")
        enc = self.encode(batch) if enc is None else enc
        logits = self.decode_logits(batch.decoder_input, enc, task)
        B, Ty, V = logits.shape
        total, count = ops.cross_entropy_sum(ops.reshape(logits, (B * Ty, V)), labels.reshape(-1), IGNORE)
        return ops.scale(total, 1.0 / count)

    def vqa_head_logits(self, enc: Encoded) -> Tensor:
        """Candidate logits from the decoder state at the start token."""
        if not self.cfg.vqa_candidates:
            raise ConfigError("model has no discriminative VQA head (vqa_candidates=0)")
        B = enc.h.shape[0]
        start = np.full((B, 1), self.cfg.decoder_start_id, dtype=np.int64)
        hidden = ops.reshape(self.decode_hidden(start, enc), (B, self.cfg.d))
        return self.vqa_head(hidden)

    def vqa_head_scores(self, batch: Batch) -> np.ndarray:
        logits = self.vqa_head_logits(self.encode(batch)).data
        return 1.0 / (1.0 + np.exp(-logits))

    def discriminative_vqa_loss(self, batch: Batch, scores) -> Tensor:
        """Soft-score weighted BCE, summed over candidates, averaged over the batch.

        ``scores``: (B, K) soft targets in [0, 1].
        """
        scores = np.asarray(scores)
        if scores.ndim != 2 or scores.shape[1] == 0:
            raise ValueError("discriminative VQA loss needs a non-empty candidate set")
        logits = self.vqa_head_logits(self.encode(batch))
        if logits.shape != scores.shape:
            raise ShapeError(f"scores {scores.shape} vs head logits {logits.shape}")
        return ops.scale(ops.bce_with_logits_sum(logits, scores), 1.0 / scores.shape[0])

    def region_logits(self, enc: Encoded) -> Tensor:
        """MLP score for each visual slot of ``h`` -> (B, N)."""
        hv = ops.narrow(enc.h, 1, enc.text_len, enc.text_len + enc.n_visual)
        B = hv.shape[0]
        return ops.reshape(self.region_head(hv), (B, enc.n_visual))

    def region_scores(self, batch: Batch) -> np.ndarray:
        return ops.softmax(self.region_logits(self.encode(batch))).data

    def region_scoring_loss(self, batch: Batch, targets) -> Tensor:
        """Mean −log P(r*) with ``targets`` the 1-based gold region per example."""
        targets = np.asarray(targets, dtype=np.int64)
        n = batch.roi.shape[1]
        if targets.min() < 1 or targets.max() > n:
            raise IndexError(f"target region outside 1..{n}")
        logits = self.region_logits(self.encode(batch))
        total, count = ops.cross_entropy_sum(logits, targets - 1)
        return ops.scale(total, 1.0 / count)
