"""Corpus loading, tokenization and batch collation."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .model import IGNORE, Batch
from .tasks import TWO_IMAGE_TASKS, TaskExample, read_corpus
from .tokenizer import Vocab


class DataError(OSError):
    pass


@dataclass
class SceneTable:
    """Region features keyed by scene id: roi (n, d_roi) and detector boxes (n, 4)."""
    roi: dict
    boxes: dict
    records: dict

    @classmethod
    def from_records(cls, records) -> "SceneTable":
        roi, boxes, recs = {}, {}, {}
        for s in records:
            sid = s["scene_id"]
            roi[sid] = np.asarray([r["roi"] for r in s["regions"]], dtype=np.float64)
            boxes[sid] = np.asarray([d["box"] for d in s["detections"]], dtype=np.float64)
            recs[sid] = s
        return cls(roi, boxes, recs)


@dataclass
class EncodedExample:
    example: TaskExample
    input_ids: list
    target_ids: list


class Dataset:
    """One synthesized world directory (see ``synthworld.synth``)."""

    def __init__(self, root):
        self.root = str(root)
        if not os.path.isdir(self.root):
            raise DataError(f"data directory not found: {self.root}")
        try:
            self.vocab = Vocab.load(os.path.join(self.root, "vocab.txt"))
            with open(os.path.join(self.root, "manifest.json"), encoding="utf-8") as fh:
                self.manifest = json.load(fh)
            with open(os.path.join(self.root, "answers.json"), encoding="utf-8") as fh:
                self.answers = json.load(fh)
        except FileNotFoundError as e:
            raise DataError(f"incomplete data directory {self.root}: {e.filename} missing") from None
        self._scenes = {}
        self._corpora = {}

    @property
    def topk(self) -> list:
        return list(self.answers["topk"])

    def corpus_path(self, split: str, task: str) -> str:
        return os.path.join(self.root, split, f"{task}.jsonl")

    def scenes(self, split: str) -> SceneTable:
        if split not in self._scenes:
            from .synthworld import read_scenes
            path = os.path.join(self.root, split, "scenes.jsonl")
            if not os.path.exists(path):
                raise DataError(f"scene file missing: {path}")
            self._scenes[split] = SceneTable.from_records(read_scenes(path))
        return self._scenes[split]

    def corpus(self, split: str, task: str, prefixes=None) -> list:
        key = (split, task, None if prefixes is None else tuple(sorted(prefixes.items())))
        if key not in self._corpora:
            path = self.corpus_path(split, task)
            if not os.path.exists(path):
                raise DataError(f"corpus missing for task {task!r}: {path}")
            exs = read_corpus(path)
            if prefixes is not None:
                exs = [reprefix(ex, prefixes) for ex in exs]
            self._corpora[key] = [encode_example(ex, self.vocab) for ex in exs]
        return self._corpora[key]


def reprefix(ex: TaskExample, prefixes: dict) -> TaskExample:
    """Swap the registered prefix of ``ex`` for the one in ``prefixes``."""
    from .tasks import PREFIXES
    old, new = PREFIXES[ex.task], prefixes[ex.task]
    if old == new or not ex.input.startswith(old):
        return ex
    return TaskExample(ex.task, new + ex.input[len(old):], ex.target, ex.scene_ids, ex.aux)


def encode_example(ex: TaskExample, vocab: Vocab) -> EncodedExample:
    return EncodedExample(ex, vocab.encode(ex.input) + [vocab.eos_id], vocab.encode(ex.target) + [vocab.eos_id])


def collate(items, scenes: SceneTable, start_id: int, n_regions: int, with_targets: bool = True) -> Batch:
    """Pad a list of :class:`EncodedExample` into a :class:`Batch`.

    All items must reference the same number of scenes. Two-scene items get
    their regions concatenated with image ids 1 and 2.
    """
    if not items:
        raise ValueError("cannot collate an empty batch")
    n_img = {len(it.example.scene_ids) for it in items}
    if len(n_img) != 1:
        raise ValueError("batch mixes one- and two-image examples")
    n_img = n_img.pop()
    B = len(items)
    tx = max(len(it.input_ids) for it in items)
    input_ids = np.zeros((B, tx), dtype=np.int64)
    input_pad = np.ones((B, tx), dtype=bool)
    for i, it in enumerate(items):
        input_ids[i, : len(it.input_ids)] = it.input_ids
        input_pad[i, : len(it.input_ids)] = False
    roi = np.stack([np.concatenate([scenes.roi[s] for s in it.example.scene_ids]) for it in items])
    boxes = np.stack([np.concatenate([scenes.boxes[s] for s in it.example.scene_ids]) for it in items])
    N = roi.shape[1]
    if N != n_img * n_regions:
        raise ValueError(f"scene has {N // n_img} regions, model expects {n_regions}")
    image_ids = np.broadcast_to(np.repeat(np.arange(1, n_img + 1), n_regions), (B, N)).copy()
    region_ids = np.broadcast_to(np.tile(np.arange(1, n_regions + 1), n_img), (B, N)).copy()
    batch = Batch(input_ids, input_pad, roi, boxes, image_ids, region_ids)
    if with_targets:
        ty = max(len(it.target_ids) for it in items)
        dec = np.zeros((B, ty), dtype=np.int64)
        labels = np.full((B, ty), IGNORE, dtype=np.int64)
        for i, it in enumerate(items):
            t = it.target_ids
            dec[i, 0] = start_id
            dec[i, 1: len(t)] = t[:-1]
            labels[i, : len(t)] = t
        batch.decoder_input, batch.labels = dec, labels
    return batch


def image_count(task: str) -> int:
    return 2 if task in TWO_IMAGE_TASKS else 1
