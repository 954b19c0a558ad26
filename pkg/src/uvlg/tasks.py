"""Text serialization of every task and the pretraining example constructors."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .tokenizer import MASK, join_words, split_words, text_sentinel, visual_sentinel

PREFIXES = {
    "mlm": "span prediction:",
    "vqa": "vqa:",
    "gqa": "gqa:",
    "itm": "image text match:",
    "ground": "visual grounding:",
    "gcap": "caption region:",
    "nlvr": "nlvr:",
    "vcr_qa": "vcr qa:",
    "vcr_qar": "vcr qar:",
    "refexp": "visual grounding:",
    "caption": "caption:",
    "caption_tags": "caption with tags:",
    "translate": "translate English to German:",
}
DENOISE_PREFIX = "denoise:"
TASKS = tuple(PREFIXES)
PRETRAIN_TASKS = ("mlm", "vqa", "itm", "ground", "gcap")
DOWNSTREAM_TASKS = ("vqa", "gqa", "nlvr", "refexp", "vcr_qa", "caption", "translate")
TWO_IMAGE_TASKS = ("nlvr",)

_REQUIRED = {
    "mlm": ("text", "target"),
    "vqa": ("question", "answer"),
    "gqa": ("question", "answer"),
    "itm": ("caption", "match"),
    "ground": ("phrase", "region"),
    "refexp": ("phrase", "region"),
    "gcap": ("region", "description"),
    "nlvr": ("statement", "label"),
    "vcr_qa": ("question", "answer", "label"),
    "vcr_qar": ("question", "answer", "rationale", "label"),
    "caption": ("caption",),
    "caption_tags": ("tags", "caption"),
    "translate": ("source", "target"),
}


class TaskError(ValueError):
    pass


def merged_vqa_prefixes() -> dict:
    """Registry variant with one shared "vqa:" prefix for VQA and GQA."""
    return {**PREFIXES, "gqa": PREFIXES["vqa"]}


def _bool_text(v: bool) -> str:
    return "true" if v else "false"


@dataclass
class TaskExample:
    task: str
    input: str
    target: str
    scene_ids: list
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in PREFIXES:
            raise TaskError(f"unknown task tag {self.task!r}")
        if not self.target:
            raise TaskError(f"{self.task}: empty target text")
        want = 2 if self.task in TWO_IMAGE_TASKS else 1
        if len(self.scene_ids) != want:
            raise TaskError(f"{self.task}: expected {want} scene(s), got {len(self.scene_ids)}")

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "input": self.input, "target": self.target,
                           "scene_ids": list(self.scene_ids), "aux": self.aux},
                          ensure_ascii=False, sort_keys=False)

    @classmethod
    def from_json(cls, line: str) -> "TaskExample":
        d = json.loads(line)
        return cls(d["task"], d["input"], d["target"], d["scene_ids"], d.get("aux", {}))


def format(task: str, fields: dict, scene_ids=("scene",), aux=None, prefixes=None) -> TaskExample:  # noqa: A001
    """Serialize raw task fields into (input text, target text)."""
    prefixes = PREFIXES if prefixes is None else prefixes
    if task not in _REQUIRED:
        raise TaskError(f"unknown task tag {task!r}")
    missing = [k for k in _REQUIRED[task] if k not in fields]
    if missing:
        raise TaskError(f"{task}: missing field(s) {', '.join(missing)}")
    p = prefixes[task]
    f = fields
    if task == "mlm":
        if f.get("variant", "span-sentinel") == "token-mask":
            p = DENOISE_PREFIX
        inp, tgt = f"{p} {f['text']}", f["target"]
    elif task in ("vqa", "gqa"):
        inp, tgt = f"{p} {f['question']}", f["answer"]
    elif task == "itm":
        inp, tgt = f"{p} {f['caption']}", _bool_text(f["match"])
    elif task in ("ground", "refexp"):
        inp, tgt = f"{p} {f['phrase']}", visual_sentinel(int(f["region"]))
    elif task == "gcap":
        inp, tgt = f"{p} {visual_sentinel(int(f['region']))}", f["description"]
    elif task == "nlvr":
        inp, tgt = f"{p} {f['statement']}", _bool_text(f["label"])
    elif task == "vcr_qa":
        inp, tgt = f"{p} question {f['question']} answer: {f['answer']}", _bool_text(f["label"])
    elif task == "vcr_qar":
        inp = f"{p} question {f['question']} answer: {f['answer']} rationale: {f['rationale']}"
        tgt = _bool_text(f["label"])
    elif task == "caption":
        inp, tgt = p, f["caption"]
    elif task == "caption_tags":
        inp, tgt = f"{p} {' '.join(f['tags'])}", f["caption"]
    else:  # translate
        inp, tgt = f"{p} {f['source']}", f["target"]
    return TaskExample(task, inp, tgt, list(scene_ids), dict(aux or {}))


# --------------------------------------------------------------------------
# masking
# --------------------------------------------------------------------------

@dataclass
class MaskingOutcome:
    input_tokens: list
    target_tokens: list
    positions: list  # sorted masked indices into the original tokens

    @property
    def input_text(self) -> str:
        return join_words(self.input_tokens)

    @property
    def target_text(self) -> str:
        return join_words(self.target_tokens)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _sample_span_positions(n: int, budget: int, rng, mean_span: float = 2.0) -> list:
    masked = np.zeros(n, dtype=bool)
    p = 1.0 / mean_span
    while masked.sum() < budget:
        left = budget - int(masked.sum())
        length = min(int(rng.geometric(p)), left)
        free = ~masked
        # starts whose whole span is still unmasked
        ok = np.array([free[s:s + length].all() for s in range(n - length + 1)], dtype=bool)
        if not ok.any():
            length = 1
            ok = free.copy()
        starts = np.flatnonzero(ok)
        s = int(starts[rng.integers(len(starts))])
        masked[s:s + length] = True
    return np.flatnonzero(masked).tolist()


def span_mask(tokens, rate: float = 0.15, rng=None, positions=None, mean_span: float = 2.0) -> MaskingOutcome:
    """Replace contiguous spans by <text_k> sentinels (numbered left to right).

    ``max(1, round(rate * len))`` tokens are masked; span lengths are geometric
    with mean ``mean_span``, clipped to the remaining budget. ``positions``
    fixes the masked indices instead of sampling them.
    """
    tokens = list(tokens)
    if not tokens:
        raise TaskError("span_mask needs at least one token")
    if positions is None:
        budget = max(1, round_half_up(rate * len(tokens)))
        positions = _sample_span_positions(len(tokens), budget, rng, mean_span)
    positions = sorted(set(positions))
    pos = set(positions)
    inp, tgt = [], []
    k = 0
    i = 0
    while i < len(tokens):
        if i in pos:
            k += 1
            inp.append(text_sentinel(k))
            tgt.append(text_sentinel(k))
            while i in pos:
                tgt.append(tokens[i])
                i += 1
        else:
            inp.append(tokens[i])
            i += 1
    return MaskingOutcome(inp, tgt, positions)


def token_mask(tokens, rate: float = 0.30, rng=None, positions=None) -> MaskingOutcome:
    """Replace ``round(rate * len)`` uniformly chosen tokens by <mask>; the target
    is the whole original sequence."""
    tokens = list(tokens)
    if positions is None:
        count = round_half_up(rate * len(tokens))
        positions = sorted(rng.choice(len(tokens), size=count, replace=False).tolist()) if count else []
    pos = set(positions)
    inp = [MASK if i in pos else t for i, t in enumerate(tokens)]
    return MaskingOutcome(inp, list(tokens), sorted(pos))


def recover_spans(outcome: MaskingOutcome) -> list:
    """Tokens deleted by :func:`span_mask`, in sentinel order."""
    return [t for t in outcome.target_tokens if not (t.startswith("<text_") and t.endswith(">"))]


def mlm_example(scene_id, caption: str, rng, variant: str = "span-sentinel", prefixes=None) -> TaskExample:
    words = split_words(caption, lowercase=False, specials=())
    if variant == "span-sentinel":
        out = span_mask(words, 0.15, rng)
        fields = {"text": out.input_text, "target": out.target_text}
    else:
        out = token_mask(words, 0.30, rng)
        fields = {"text": out.input_text, "target": out.target_text, "variant": "token-mask"}
    return format("mlm", fields, [scene_id], {"masked": out.positions}, prefixes)


# --------------------------------------------------------------------------
# pretraining constructors
# --------------------------------------------------------------------------

def region_description(det: dict) -> str:
    return f"{det['attribute']} {det['object']}"


def itm_sample(scene: dict, caption_pool, rng, force=None, prefixes=None) -> TaskExample:
    """Own caption ("true") with probability 0.5, else another scene's ("false").

    ``caption_pool``: sequence of (scene_id, caption). ``force`` = True/False
    pins the draw.
    """
    others = [c for c in caption_pool if c[0] != scene["scene_id"]]
    if not others or not scene["captions"]:
        raise TaskError("image-text matching needs captions from at least two scenes")
    positive = bool(rng.random() < 0.5) if force is None else bool(force)
    if positive:
        cap = scene["captions"][int(rng.integers(len(scene["captions"])))]
        src = scene["scene_id"]
    else:
        src, cap = others[int(rng.integers(len(others)))]
    return format("itm", {"caption": cap, "match": positive}, [scene["scene_id"]],
                  {"caption_scene": src}, prefixes)


def _ambiguity(dets, k: int) -> list:
    desc = region_description(dets[k - 1])
    return [j + 1 for j, d in enumerate(dets) if region_description(d) == desc]


def grounding_pair(scene: dict, rng, region=None, task: str = "ground", prefixes=None) -> TaskExample:
    """Detector description of one region -> its visual sentinel."""
    dets = scene["detections"]
    k = int(rng.integers(1, len(dets) + 1)) if region is None else int(region)
    aux = {"region": k, "ambiguous": _ambiguity(dets, k),
           "box": list(scene["regions"][k - 1]["box"])}
    return format(task, {"phrase": region_description(dets[k - 1]), "region": k},
                  [scene["scene_id"]], aux, prefixes)


def grounded_caption_pair(scene: dict, rng, region=None, prefixes=None) -> TaskExample:
    dets = scene["detections"]
    k = int(rng.integers(1, len(dets) + 1)) if region is None else int(region)
    return format("gcap", {"region": k, "description": region_description(dets[k - 1])},
                  [scene["scene_id"]], {"region": k}, prefixes)


def vcr_expand(question: str, choices, gold: int, mode: str = "qa", answer: str | None = None,
               scene_id="scene", qid=None, prefixes=None) -> list:
    """One true/false example per choice.

    mode "qa": choices are answers. mode "qar": choices are rationales and
    ``answer`` is the (correct) answer shown in every input.
    """
    if not 0 <= gold < len(choices):
        raise TaskError(f"gold index {gold} outside 0..{len(choices) - 1}")
    if mode not in ("qa", "qar"):
        raise TaskError(f"unknown VCR mode {mode!r}")
    out = []
    for i, c in enumerate(choices):
        aux = {"qid": qid, "choice": i, "gold": gold, "n_choices": len(choices)}
        if mode == "qa":
            out.append(format("vcr_qa", {"question": question, "answer": c, "label": i == gold},
                              [scene_id], aux, prefixes))
        else:
            if answer is None:
                raise TaskError("qar mode needs the answer text")
            out.append(format("vcr_qar", {"question": question, "answer": answer, "rationale": c,
                                          "label": i == gold}, [scene_id], aux, prefixes))
    return out


# --------------------------------------------------------------------------
# corpus files
# --------------------------------------------------------------------------

def write_corpus(path, examples) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")


def read_corpus(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [TaskExample.from_json(ln) for ln in fh if ln.strip()]
