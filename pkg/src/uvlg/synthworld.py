"""Deterministic toy world: scenes of labelled regions and every task corpus.

A scene is a list of ``n`` regions, each with a latent (object, attribute)
pair, a box and a feature vector ``proto_obj + proto_attr + sigma * noise``.
A simulated detector re-reads the labels (optionally flipping them) and
jitters the boxes; task constructors only look at the detector output.
"""

from __future__ import annotations

import json
import os
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tasks as T
from .tokenizer import build_vocab

OBJECTS = (
    "man", "woman", "dog", "cat", "car", "bus", "shirt", "hat", "fire hydrant", "bench",
    "tree", "kite", "ball", "cup", "chair", "table", "bike", "horse", "bird", "boat",
    "umbrella", "clock", "lamp", "traffic light",
)
ATTRIBUTES = (
    "white", "black", "blue", "red", "green", "brown",
    "gray", "yellow", "orange", "pink", "purple", "silver",
)
SPLITS = ("train", "val", "test")
DISTINCTNESS = ("none", "objects", "pairs")


class ManifestError(ValueError):
    """Invalid manifest; ``field`` names the offending key."""

    def __init__(self, field_name: str, msg: str):
        super().__init__(f"manifest field {field_name!r}: {msg}")
        self.field = field_name


@dataclass
class DatasetManifest:
    name: str = "toy"
    seed: int = 0
    objects: list = field(default_factory=lambda: list(OBJECTS))
    attributes: list = field(default_factory=lambda: list(ATTRIBUTES))
    attribute_skew: float = 1.0  # Zipf exponent of attribute frequencies
    n_regions: int = 8
    d_roi: int = 64
    roi_sigma: float = 0.1
    distinct: str = "objects"
    scenes: dict = field(default_factory=lambda: {"train": 2000, "val": 200, "test": 400})
    examples: dict = field(default_factory=lambda: {"train": 5000, "val": 300, "test": 600})
    tasks: list = field(default_factory=lambda: list(T.TASKS))
    masking: str = "span-sentinel"
    answer_k: int = 9
    detector_flip: float = 0.0
    detector_jitter: float = 0.0
    ambiguity_policy: str = "accept-any"
    vocab_size: int = 512
    answer_topk: list | None = None  # filled in by synth

    def validate(self) -> None:
        if len(set(self.objects)) != len(self.objects) or not self.objects:
            raise ManifestError("objects", "must be a nonempty list of unique names")
        if len(set(self.attributes)) != len(self.attributes) or not self.attributes:
            raise ManifestError("attributes", "must be a nonempty list of unique names")
        if self.n_regions < 2:
            raise ManifestError("n_regions", "need at least 2 regions per scene")
        if self.d_roi < 1:
            raise ManifestError("d_roi", "must be positive")
        if self.roi_sigma < 0:
            raise ManifestError("roi_sigma", "must be >= 0")
        if self.distinct not in DISTINCTNESS:
            raise ManifestError("distinct", f"one of {DISTINCTNESS}")
        for key in ("scenes", "examples"):
            d = getattr(self, key)
            if set(d) != set(SPLITS) or any(int(v) < 1 for v in d.values()):
                raise ManifestError(key, f"positive counts for exactly {SPLITS}")
        if self.scenes["train"] < 2:
            raise ManifestError("scenes", "train split needs at least 2 scenes")
        bad = [t for t in self.tasks if t not in T.PREFIXES]
        if bad:
            raise ManifestError("tasks", f"unknown task tag(s) {bad}")
        if self.masking not in ("span-sentinel", "token-mask"):
            raise ManifestError("masking", "span-sentinel or token-mask")
        if self.answer_k <= 0:
            raise ManifestError("answer_k", "must be positive")
        if not 0 <= self.detector_flip <= 1:
            raise ManifestError("detector_flip", "probability in [0, 1]")
        if self.detector_jitter < 0:
            raise ManifestError("detector_jitter", "must be >= 0")
        if self.ambiguity_policy != "accept-any":
            raise ManifestError("ambiguity_policy", "only accept-any is supported")
        _check_distinctness(self)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(d) - known)
        if extra:
            raise ManifestError(extra[0], "unknown key")
        m = cls(**d)
        m.validate()
        return m

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ManifestError("<document>", f"line {e.lineno} column {e.colno}: {e.msg}") from None
        if not isinstance(d, dict):
            raise ManifestError("<document>", "top level must be an object")
        return cls.from_dict(d)


def _check_distinctness(m) -> None:
    capacity = {"none": float("inf"), "objects": len(m.objects),
                "pairs": len(m.objects) * len(m.attributes)}[m.distinct]
    if m.n_regions > capacity:
        raise ManifestError("distinct", f"cannot place {m.n_regions} regions with distinct "
                                        f"{m.distinct} (only {capacity} available)")


# --------------------------------------------------------------------------
# world
# --------------------------------------------------------------------------

class World:
    """Prototype vectors and label distributions fixed by a manifest."""

    def __init__(self, manifest: DatasetManifest):
        manifest.validate()
        self.m = manifest
        rng = np.random.default_rng([manifest.seed, 0])
        d = manifest.d_roi
        self.obj_proto = rng.standard_normal((len(manifest.objects), d)) / np.sqrt(d)
        self.attr_proto = rng.standard_normal((len(manifest.attributes), d)) / np.sqrt(d)
        w = 1.0 / np.arange(1, len(manifest.attributes) + 1) ** manifest.attribute_skew
        self.attr_p = w / w.sum()
        self.cipher_map = make_cipher(np.random.default_rng([manifest.seed, 1]))

    def roi(self, o: int, a: int, rng) -> np.ndarray:
        noise = rng.standard_normal(self.m.d_roi) * self.m.roi_sigma if self.m.roi_sigma else 0.0
        return self.obj_proto[o] + self.attr_proto[a] + noise


def _r6(x) -> float:
    return round(float(x), 6)


def _sample_box(rng) -> list:
    x1, y1 = rng.uniform(0.0, 0.8, size=2)
    w, h = rng.uniform(0.1, 0.5, size=2)
    return [_r6(x1), _r6(y1), _r6(min(1.0, x1 + w)), _r6(min(1.0, y1 + h))]


def box_area(b) -> float:
    return max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])


def gen_scene(rng, world: World, scene_id: str) -> dict:
    """One scene; regions are ordered by box area, largest first (region 1)."""
    m = world.m
    n, n_obj, n_att = m.n_regions, len(m.objects), len(m.attributes)
    labels = []
    while len(labels) < n:
        o = int(rng.integers(n_obj))
        a = int(rng.choice(n_att, p=world.attr_p))
        if m.distinct == "objects" and any(o == lo for lo, _ in labels):
            continue
        if m.distinct == "pairs" and (o, a) in labels:
            continue
        labels.append((o, a))
    boxes = [_sample_box(rng) for _ in range(n)]
    rois = [world.roi(o, a, rng) for o, a in labels]
    order = sorted(range(n), key=lambda i: -box_area(boxes[i]))
    regions = []
    for rid, i in enumerate(order, start=1):
        o, a = labels[i]
        regions.append({"region_id": rid, "object": m.objects[o], "attribute": m.attributes[a],
                        "box": boxes[i], "roi": [_r6(v) for v in rois[i]]})
    scene = {"scene_id": scene_id, "regions": regions}
    scene["detections"] = detector_sim(scene, m.detector_flip, m.detector_jitter, rng, m.objects, m.attributes)
    dets = scene["detections"]
    scene["captions"] = scene_captions(dets)
    scene["qa"] = [[f"what color is the {d['object']}?", d["attribute"]]
                   for d in dets if sum(e["object"] == d["object"] for e in dets) == 1]
    scene["phrases"] = [[T.region_description(d), k] for k, d in enumerate(dets, start=1)]
    return scene


def scene_captions(dets) -> list:
    d1, d2 = dets[0], dets[1]
    caps = [f"a {d1['attribute']} {d1['object']} and a {d2['attribute']} {d2['object']}"]
    caps += [f"there is a {d['attribute']} {d['object']}" for d in dets[2:4]]
    return caps


def detector_sim(scene: dict, flip: float, jitter: float, rng, objects, attributes) -> list:
    """Per-region detector output: labels flipped with probability ``flip``
    (to a different label, when one exists), boxes jittered by U(-j, j) and
    clamped to the unit square."""
    out = []
    for r in scene["regions"]:
        o, a = r["object"], r["attribute"]
        if flip and rng.random() < flip and len(objects) > 1:
            o = rng.choice([x for x in objects if x != o]).item()
        if flip and rng.random() < flip and len(attributes) > 1:
            a = rng.choice([x for x in attributes if x != a]).item()
        box = list(r["box"])
        if jitter:
            b = np.clip(np.asarray(box) + rng.uniform(-jitter, jitter, size=4), 0.0, 1.0)
            x1, x2 = sorted(b[[0, 2]])
            y1, y2 = sorted(b[[1, 3]])
            box = [_r6(x1), _r6(y1), _r6(x2), _r6(y2)]
        out.append({"object": o, "attribute": a, "box": box})
    return out


def iou(box_a, box_b) -> float:
    ix = max(0.0, min(box_a[2], box_b[2]) - max(box_a[0], box_b[0]))
    iy = max(0.0, min(box_a[3], box_b[3]) - max(box_a[1], box_b[1]))
    inter = ix * iy
    union = box_area(box_a) + box_area(box_b) - inter
    return inter / union if union > 0 else 0.0


def make_cipher(rng) -> dict:
    letters = "abcdefghijklmnopqrstuvwxyz"
    perm = rng.permutation(len(letters))
    return {c: letters[j] for c, j in zip(letters, perm)}


def cipher(text: str, mapping: dict) -> str:
    """Character substitution; characters without a mapping pass through."""
    return "".join(mapping.get(c, c) for c in text)


def split_answers(freq: dict, k: int):
    """Top-``k`` answers by frequency (ties lexicographic) and the remainder."""
    if k <= 0:
        raise ValueError("K must be positive")
    ranked = sorted(freq, key=lambda a: (-freq[a], a))
    return ranked[:k], sorted(ranked[k:])


# --------------------------------------------------------------------------
# task corpora
# --------------------------------------------------------------------------

def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _vqa(scene, rng):
    q, a = _pick(rng, scene["qa"])
    return T.format("vqa", {"question": q, "answer": a}, [scene["scene_id"]], {"answers": {a: 10}})


def _gqa(scene, rng):
    dets = scene["detections"]
    counts = Counter(d["attribute"] for d in dets)
    unique = [d for d in dets if counts[d["attribute"]] == 1]
    if not unique:
        return None
    d = _pick(rng, unique)
    return T.format("gqa", {"question": f"what is the {d['attribute']} object?", "answer": d["object"]},
                    [scene["scene_id"]], {"answers": {d["object"]: 10}})


def _nlvr(left, right, rng, world):
    side = "left" if rng.random() < 0.5 else "right"
    this, other = (left, right) if side == "left" else (right, left)
    present = {(d["attribute"], d["object"]) for d in this["detections"]}
    if rng.random() < 0.5:
        a, o = _pick(rng, sorted(present))
        label = True
    else:
        from_other = sorted({(d["attribute"], d["object"]) for d in other["detections"]} - present)
        if from_other and rng.random() < 0.5:
            a, o = _pick(rng, from_other)
        else:
            while True:
                a, o = _pick(rng, world.m.attributes), _pick(rng, world.m.objects)
                if (a, o) not in present:
                    break
        label = False
    return T.format("nlvr", {"statement": f"the {side} image contains a {a} {o}", "label": label},
                    [left["scene_id"], right["scene_id"]], {})


def _vcr(scene, rng, world, mode, qid, n_choices=4):
    dets = scene["detections"]
    q, a = _pick(rng, scene["qa"])
    obj = q[len("what color is the "):-1]
    k = next(i for i, d in enumerate(dets, start=1) if d["object"] == obj)
    gold = int(rng.integers(n_choices))
    if mode == "qa":
        others = [x for x in world.m.attributes if x != a]
        picks = [others[i] for i in rng.choice(len(others), n_choices - 1, replace=False)]
        picks.insert(gold, a)
        choices = [f"it is {x}" for x in picks]
        return T.vcr_expand(q, choices, gold, "qa", scene_id=scene["scene_id"], qid=qid)
    others = [j for j in range(1, len(dets) + 1) if j != k]
    regs = [others[i] for i in rng.choice(len(others), n_choices - 1, replace=False)]
    regs.insert(gold, k)
    choices = [f"<vis_{j}> shows a {a} {obj}" for j in regs]
    return T.vcr_expand(q, choices, gold, "qar", answer=f"it is {a}", scene_id=scene["scene_id"], qid=qid)


def gen_tasks(scenes, tag: str, rng, count: int, world: World, caption_pool=None, split: str = "") -> list:
    """``count`` examples of ``tag`` drawn from ``scenes`` (with replacement).

    VCR tags expand each question into one example per choice, so they hold
    ``count`` examples rounded down to whole questions.
    """
    m = world.m
    out = []
    if tag in ("vcr_qa", "vcr_qar"):
        pool = [s for s in scenes if s["qa"]]
        for qi in range(max(1, count // 4)):
            out.extend(_vcr(_pick(rng, pool), rng, world, tag[4:], f"{split}-{tag}-{qi}"))
        return out
    if caption_pool is None:
        caption_pool = [(s["scene_id"], c) for s in scenes for c in s["captions"]]
    while len(out) < count:
        s = _pick(rng, scenes)
        if tag == "mlm":
            ex = T.mlm_example(s["scene_id"], _pick(rng, s["captions"]), rng, m.masking)
        elif tag == "vqa":
            ex = _vqa(s, rng) if s["qa"] else None
        elif tag == "gqa":
            ex = _gqa(s, rng)
        elif tag == "itm":
            ex = T.itm_sample(s, caption_pool, rng)
        elif tag == "ground":
            ex = T.grounding_pair(s, rng)
        elif tag == "refexp":
            ex = T.grounding_pair(s, rng, task="refexp")
            if len(ex.aux["ambiguous"]) > 1:
                ex = None
        elif tag == "gcap":
            ex = T.grounded_caption_pair(s, rng)
        elif tag == "nlvr":
            other = _pick(rng, scenes)
            ex = None if other is s else _nlvr(s, other, rng, world)
        elif tag == "caption":
            ex = T.format("caption", {"caption": s["captions"][0]}, [s["scene_id"]],
                          {"references": [s["captions"][0]]})
        elif tag == "caption_tags":
            tags = [d["object"] for d in s["detections"]]
            ex = T.format("caption_tags", {"tags": tags, "caption": s["captions"][0]}, [s["scene_id"]],
                          {"references": [s["captions"][0]]})
        elif tag == "translate":
            tgt = cipher(s["captions"][0], world.cipher_map)
            ex = T.format("translate", {"source": s["captions"][0], "target": tgt}, [s["scene_id"]],
                          {"references": [tgt]})
        else:
            raise T.TaskError(f"unknown task tag {tag!r}")
        if ex is not None:
            out.append(ex)
    return out


def tag_answer_domains(examples, topk) -> None:
    """Mark each VQA example in- or out-of-domain by its best answer."""
    top = set(topk)
    for ex in examples:
        answers = ex.aux["answers"]
        best = max(sorted(answers), key=lambda a: answers[a])
        ex.aux["in_domain"] = best in top


def _lexicon(world: World) -> list:
    m = world.m
    words = list(m.objects) + list(m.attributes)
    return words + [cipher(w, world.cipher_map) for w in words + ["a", "and"]]


def scene_to_json(scene: dict) -> str:
    return json.dumps(scene, separators=(",", ":"))


def write_scenes(path, scenes) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in scenes:
            fh.write(scene_to_json(s) + "\n")


def read_scenes(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(ln) for ln in fh if ln.strip()]


def synth(manifest: DatasetManifest, out_dir) -> dict:
    """Write scenes, task corpora, answer table, vocab and manifest to ``out_dir``.

    Layout::

        manifest.json  vocab.txt  answers.json
        <split>/scenes.jsonl  <split>/<tag>.jsonl
    """
    world = World(manifest)
    scenes = {}
    for si, split in enumerate(SPLITS):
        rng = np.random.default_rng([manifest.seed, 2, si])
        scenes[split] = [gen_scene(rng, world, f"{split}-{i:06d}") for i in range(manifest.scenes[split])]
    corpora = {}
    for si, split in enumerate(SPLITS):
        for ti, tag in enumerate(T.TASKS):
            if tag not in manifest.tasks:
                continue
            rng = np.random.default_rng([manifest.seed, 3, si, ti])
            corpora[split, tag] = gen_tasks(scenes[split], tag, rng, manifest.examples[split], world, split=split)

    freq = Counter()
    for ex in corpora.get(("train", "vqa"), []):
        answers = ex.aux["answers"]
        freq[max(sorted(answers), key=lambda a: answers[a])] += 1
    topk, ood = split_answers(dict(freq), manifest.answer_k) if freq else ([], [])
    if freq and not ood:
        warnings.warn(f"answer_k={manifest.answer_k} covers every answer; out-of-domain subset is empty",
                      stacklevel=2)
    for split in SPLITS:
        if (split, "vqa") in corpora:
            tag_answer_domains(corpora[split, "vqa"], topk)

    text = [ex.input for k, exs in corpora.items() if k[0] == "train" for ex in exs]
    text += [ex.target for k, exs in corpora.items() if k[0] == "train" for ex in exs]
    vocab = build_vocab(_lexicon(world) + text, manifest.vocab_size, n_regions=manifest.n_regions)

    os.makedirs(out_dir, exist_ok=True)
    for split in SPLITS:
        d = os.path.join(out_dir, split)
        os.makedirs(d, exist_ok=True)
        write_scenes(os.path.join(d, "scenes.jsonl"), scenes[split])
        for (sp, tag), exs in corpora.items():
            if sp == split:
                T.write_corpus(os.path.join(d, f"{tag}.jsonl"), exs)
    with open(os.path.join(out_dir, "answers.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"topk": topk, "out_of_domain": ood, "frequencies": dict(sorted(freq.items()))},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    vocab.save(os.path.join(out_dir, "vocab.txt"))
    final = DatasetManifest(**{**asdict(manifest), "answer_topk": topk})
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(final.to_json())
    return {"scenes": {s: len(v) for s, v in scenes.items()},
            "examples": {f"{s}/{t}": len(v) for (s, t), v in corpora.items()},
            "vocab_size": len(vocab), "topk": topk, "out_of_domain": ood}
