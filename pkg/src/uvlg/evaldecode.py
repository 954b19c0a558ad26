"""Decoding, answer scoring and per-task evaluation."""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from .data import collate
from .nn_core import no_grad, ops
from .synthworld import iou
from .tokenizer import normalize

SUBSETS = ("all", "in-domain", "out-of-domain")


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "greedy"   # "greedy" or "beam"
    beam_width: int = 1
    max_length: int = 20       # content tokens before a forced </s>
    allowed: frozenset | None = None

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam"):
            raise ValueError(f"unknown decoding strategy {self.strategy!r}")
        if self.beam_width < 1:
            raise ValueError("beam width must be >= 1")
        if self.max_length < 1:
            raise ValueError("max_length must be >= 1")
        if self.allowed is not None:
            object.__setattr__(self, "allowed", frozenset(int(i) for i in self.allowed))
            if not self.allowed:
                raise ValueError("allowed-token set must be nonempty")


@dataclass
class EvalReport:
    task: str
    metric: str
    value: float
    subset: str
    count: int
    fingerprint: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def fingerprint(model) -> str:
    h = hashlib.sha256(json.dumps(model.cfg.to_dict(), sort_keys=True).encode())
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()[:16]


def write_reports(path, reports) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


# --------------------------------------------------------------------------
# decoding
# --------------------------------------------------------------------------

def _constrain(logits: np.ndarray, allowed) -> np.ndarray:
    if allowed is None:
        return logits
    out = np.full_like(logits, -np.inf)
    idx = np.fromiter(sorted(allowed), dtype=np.int64)
    out[..., idx] = logits[..., idx]
    return out


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    with np.errstate(divide="ignore"):
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def generate(model, batch, cfg: DecodeConfig = DecodeConfig(), eos_id: int = 2, task=None) -> list:
    """Decode every batch element; each result ends with ``eos_id``.

    At most ``max_length`` content tokens are produced, then </s> is forced.
    With an allowed set, content tokens come from that set and </s> may
    only be emitted early if it is itself allowed.
    """
    with no_grad():
        enc = model.encode(batch)
        if cfg.strategy == "beam":
            return [_beam_one(model, enc, b, cfg, eos_id, task) for b in range(batch.size)]
        return _greedy(model, enc, batch.size, cfg, eos_id, task)


def _greedy(model, enc, B, cfg, eos_id, task):
    start = model.cfg.decoder_start_id
    seqs = np.full((B, 1), start, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    out = [[] for _ in range(B)]
    for _ in range(cfg.max_length):
        logits = model.decode_logits(seqs, enc, task).data[:, -1]
        logits = _constrain(logits, cfg.allowed)
        nxt = logits.argmax(axis=-1)
        for b in range(B):
            if not done[b]:
                out[b].append(int(nxt[b]))
                done[b] = nxt[b] == eos_id
        if done.all():
            break
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    for b in range(B):
        if not out[b] or out[b][-1] != eos_id:
            out[b].append(eos_id)
    return out


def _slice_enc(enc, b, w):
    from .model import Encoded
    h = ops.Tensor(np.repeat(enc.h.data[b:b + 1], w, axis=0))
    return Encoded(h, np.repeat(enc.key_pad[b:b + 1], w, axis=0), enc.text_len, enc.n_visual)


def _beam_one(model, enc, b, cfg, eos_id, task):
    w = cfg.beam_width
    beams = [([model.cfg.decoder_start_id], 0.0)]
    finished = []
    for _ in range(cfg.max_length):
        seqs = np.asarray([s for s, _ in beams], dtype=np.int64)
        logits = model.decode_logits(seqs, _slice_enc(enc, b, len(beams)), task).data[:, -1]
        logp = _log_softmax(_constrain(logits, cfg.allowed))
        cand = []
        for i, (_, score) in enumerate(beams):
            for t in np.argsort(-logp[i], kind="stable")[:w]:
                if np.isfinite(logp[i, t]):
                    cand.append((score + float(logp[i, t]), i, int(t)))
        cand.sort(key=lambda c: -c[0])  # stable: earlier beam / lower id wins ties
        live = []
        for score, i, t in cand:
            seq = beams[i][0] + [t]
            if t == eos_id:
                finished.append((seq, score))
            else:
                live.append((seq, score))
                if len(live) == w:
                    break
        beams = live
        # log-probabilities only decrease, so a finished hypothesis at least as
        # good as the best live one cannot be beaten
        if not beams or (finished and max(f[1] for f in finished) >= beams[0][1]):
            break
    pool = finished + [(s + [eos_id], sc) for s, sc in beams]
    best = max(pool, key=lambda c: c[1])
    return best[0][1:]


# --------------------------------------------------------------------------
# scoring rules
# --------------------------------------------------------------------------

def true_false_score(logit_true: float, logit_false: float) -> float:
    """P(true) / (P(true) + P(false)) from the two first-step logits."""
    m = max(logit_true, logit_false)
    pt, pf = math.exp(logit_true - m), math.exp(logit_false - m)
    return pt / (pt + pf)


def rank_choices(first_step_logits, true_id: int, false_id: int):
    """Scores per choice and the argmax index from (C, V) first-step logits."""
    lg = np.asarray(first_step_logits, dtype=np.float64)
    scores = [true_false_score(lg[i, true_id], lg[i, false_id]) for i in range(lg.shape[0])]
    return int(np.argmax(scores)), scores


def first_step_logits(model, batch, task=None) -> np.ndarray:
    with no_grad():
        enc = model.encode(batch)
        start = np.full((batch.size, 1), model.cfg.decoder_start_id, dtype=np.int64)
        return model.decode_logits(start, enc, task).data[:, 0]


def rank_true_false(model, items, scenes, vocab, task=None):
    """Pick among one question's choice examples (from ``vcr_expand``)."""
    batch = collate(items, scenes, model.cfg.decoder_start_id, model.cfg.n_regions, with_targets=False)
    return rank_choices(first_step_logits(model, batch, task), vocab.id("true"), vocab.id("false"))


def vqa_score(answer: str, human_answers) -> float:
    """min(0.3 * #humans who gave ``answer``, 1); ``human_answers`` is a
    {answer: count} mapping or a list of strings."""
    if isinstance(human_answers, dict):
        counts = Counter()
        for a, c in human_answers.items():
            counts[normalize(a)] += int(c)
    else:
        counts = Counter(normalize(a) for a in human_answers)
    # 3 * c / 10 is the correctly rounded value of 0.3 * c
    return min(3 * counts[normalize(answer)] / 10, 1.0)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(candidate, references, max_n: int = 4):
    cand = list(candidate)
    matches, totals = [], []
    for n in range(1, max_n + 1):
        c = _ngrams(cand, n)
        best = Counter()
        for ref in references:
            for g, k in _ngrams(list(ref), n).items():
                best[g] = max(best[g], k)
        matches.append(sum(min(k, best[g]) for g, k in c.items()))
        totals.append(max(0, len(cand) - n + 1))
    ref_lens = [len(r) for r in references]
    closest = min(ref_lens, key=lambda r: (abs(r - len(cand)), r)) if ref_lens else 0
    return matches, totals, len(cand), closest


def _bleu_from_stats(matches, totals, c_len, r_len, max_n):
    if c_len == 0 or matches[0] == 0:
        return 0.0
    logs = []
    for n in range(max_n):
        if totals[n] == 0:
            continue  # candidate too short for this order
        p = matches[n] / totals[n] if matches[n] else 1.0 / (totals[n] + 1)
        logs.append(math.log(p))
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(sum(logs) / len(logs))


def bleu(candidate, references, max_n: int = 4) -> float:
    """Sentence BLEU over token lists.

    Clipped n-gram precisions, geometric mean, brevity penalty against the
    closest reference length. An order n >= 2 with no match gets precision
    1 / (total + 1) instead of 0. Orders longer than the candidate are left
    out of the mean.
    """
    return _bleu_from_stats(*bleu_stats(candidate, references, max_n), max_n)


def corpus_bleu(candidates, references_list, max_n: int = 4) -> float:
    """Corpus BLEU: n-gram counts and lengths pooled before combining."""
    M, Tt = [0] * max_n, [0] * max_n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references_list):
        m, t, c, r = bleu_stats(cand, refs, max_n)
        M = [a + b for a, b in zip(M, m)]
        Tt = [a + b for a, b in zip(Tt, t)]
        c_len += c
        r_len += r
    return _bleu_from_stats(M, Tt, c_len, r_len, max_n)


# --------------------------------------------------------------------------
# task evaluation
# --------------------------------------------------------------------------

def _chunks(items, size=64):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def predict_texts(model, items, scenes, vocab, cfg: DecodeConfig = DecodeConfig(max_length=20), task=None):
    out = []
    for chunk in _chunks(items):
        batch = collate(chunk, scenes, model.cfg.decoder_start_id, model.cfg.n_regions, with_targets=False)
        for ids in generate(model, batch, cfg, vocab.eos_id, task):
            out.append(vocab.decode(ids))
    return out


def _head_task(model, task):
    return task if model.cfg.head_mode == "per-task" and task in model.cfg.head_tasks else None


def eval_vqa(model, items, scenes, vocab, topk, mode: str = "generative", task: str = "vqa") -> list:
    """Soft-score accuracy on all / in-domain / out-of-domain questions."""
    if any("in_domain" not in it.example.aux for it in items):
        raise ValueError("examples lack in-/out-of-domain tags; run split_answers first")
    if mode == "generative":
        preds = predict_texts(model, items, scenes, vocab, DecodeConfig(max_length=8),
                              _head_task(model, task))
    elif mode == "discriminative":
        preds = []
        with no_grad():
            for chunk in _chunks(items):
                b = collate(chunk, scenes, model.cfg.decoder_start_id, model.cfg.n_regions, with_targets=False)
                logits = model.vqa_head_logits(model.encode(b)).data
                preds += [topk[int(i)] for i in logits.argmax(axis=-1)]
    else:
        raise ValueError(f"unknown VQA evaluation mode {mode!r}")
    scores = np.asarray([vqa_score(p, it.example.aux["answers"]) for p, it in zip(preds, items)])
    dom = np.asarray([bool(it.example.aux["in_domain"]) for it in items])
    fp = fingerprint(model)
    rows = []
    for subset, sel in zip(SUBSETS, (np.ones_like(dom), dom, ~dom)):
        n = int(sel.sum())
        rows.append(EvalReport(task, f"vqa_score_{mode}", float(scores[sel].mean()) if n else 0.0, subset, n, fp))
    return rows


def eval_grounding(model, items, scenes, vocab, task: str = "refexp", constrained: bool = True) -> EvalReport:
    """Accuracy: predicted region is in the ambiguity set or its box has IoU > 0.5 with the gold box."""
    n = model.cfg.n_regions
    allowed = frozenset(vocab.visual_id(k) for k in range(1, n + 1)) if constrained else None
    cfg = DecodeConfig(max_length=1 if constrained else 4, allowed=allowed)
    correct = 0
    for chunk in _chunks(items):
        b = collate(chunk, scenes, model.cfg.decoder_start_id, model.cfg.n_regions, with_targets=False)
        for ids, it in zip(generate(model, b, cfg, vocab.eos_id, _head_task(model, task)), chunk):
            correct += grounding_correct(ids[0] if ids else None, it.example, scenes, vocab)
    name = "accuracy" if constrained else "accuracy_unconstrained"
    return EvalReport(task, name, correct / len(items), "all", len(items), fingerprint(model))


def grounding_correct(token_id, ex, scenes, vocab) -> bool:
    k = vocab.region_of(token_id) if token_id is not None else None
    if k is None:
        return False
    if k in ex.aux.get("ambiguous", [ex.aux["region"]]):
        return True
    rec = scenes.records[ex.scene_ids[0]]
    if k > len(rec["regions"]):
        return False
    return iou(rec["regions"][k - 1]["box"], ex.aux["box"]) > 0.5


def eval_region_scoring(model, items, scenes, task: str = "refexp") -> EvalReport:
    """Accuracy of the discriminative region-scoring baseline (argmax slot)."""
    correct = 0
    with no_grad():
        for chunk in _chunks(items):
            b = collate(chunk, scenes, model.cfg.decoder_start_id, model.cfg.n_regions, with_targets=False)
            pred = model.region_logits(model.encode(b)).data.argmax(axis=-1) + 1
            for k, it in zip(pred, chunk):
                ex = it.example
                correct += int(k) in ex.aux.get("ambiguous", [ex.aux["region"]])
    return EvalReport(task, "accuracy_discriminative", correct / len(items), "all", len(items), fingerprint(model))


def eval_choice(model, items, scenes, vocab, task: str = "vcr_qa") -> EvalReport:
    """Multiple-choice accuracy via true/false ranking, grouped by question id."""
    groups = {}
    for it in items:
        groups.setdefault(it.example.aux["qid"], []).append(it)
    correct = 0
    ht = _head_task(model, task)
    for qid, group in groups.items():
        group.sort(key=lambda it: it.example.aux["choice"])
        idx, _ = rank_true_false(model, group, scenes, vocab, ht)
        correct += idx == group[0].example.aux["gold"]
    return EvalReport(task, "accuracy", correct / len(groups), "all", len(groups), fingerprint(model))


def eval_exact(model, items, scenes, vocab, task: str) -> EvalReport:
    """Exact match of the greedy output with the normalized target."""
    preds = predict_texts(model, items, scenes, vocab, DecodeConfig(max_length=8), _head_task(model, task))
    hits = sum(normalize(p) == normalize(it.example.target) for p, it in zip(preds, items))
    return EvalReport(task, "accuracy", hits / len(items), "all", len(items), fingerprint(model))


def eval_bleu(model, items, scenes, vocab, task: str) -> EvalReport:
    preds = predict_texts(model, items, scenes, vocab, DecodeConfig(max_length=24), _head_task(model, task))
    cands = [vocab.tokenize(p) for p in preds]
    refs = [[vocab.tokenize(r) for r in it.example.aux.get("references", [it.example.target])] for it in items]
    return EvalReport(task, "bleu", corpus_bleu(cands, refs), "all", len(items), fingerprint(model))


def evaluate(model, dataset, task: str, split: str = "val", mode: str = "gen", limit: int | None = None,
             prefixes=None) -> list:
    """Headline metric rows for one task."""
    items = dataset.corpus(split, task, prefixes)
    if limit:
        if task in ("vcr_qa", "vcr_qar"):
            qids = []
            for it in items:
                if it.example.aux["qid"] not in qids:
                    qids.append(it.example.aux["qid"])
            keep = set(qids[: max(1, limit // 4)])
            items = [it for it in items if it.example.aux["qid"] in keep]
        else:
            items = items[:limit]
    scenes = dataset.scenes(split)
    vocab = dataset.vocab
    if task == "vqa":
        return eval_vqa(model, items, scenes, vocab, dataset.topk,
                        "discriminative" if mode == "disc" else "generative")
    if task in ("ground", "refexp"):
        if mode == "disc":
            return [eval_region_scoring(model, items, scenes, task)]
        return [eval_grounding(model, items, scenes, vocab, task),
                eval_grounding(model, items, scenes, vocab, task, constrained=False)]
    if task in ("vcr_qa", "vcr_qar"):
        return [eval_choice(model, items, scenes, vocab, task)]
    if task in ("caption", "caption_tags", "translate"):
        return [eval_bleu(model, items, scenes, vocab, task)]
    if task in ("gqa", "nlvr", "itm", "gcap", "mlm"):
        return [eval_exact(model, items, scenes, vocab, task)]
    raise ValueError(f"unknown task tag {task!r}")


def headline(rows) -> float:
    """The single number compared across runs: the first 'all' row."""
    for r in rows:
        if r.subset == "all":
            return r.value
    raise ValueError("no 'all' row")


def evaluate_trainer(trainer) -> list:
    """Eval-cadence hook: headline metric per task on the eval split."""
    out = []
    for t in trainer.cfg.tasks:
        rows = evaluate(trainer.model, trainer.data, t, trainer.cfg.eval_split, trainer.modes.get(t, "gen"),
                        trainer.cfg.eval_examples, trainer.cfg.prefixes())
        for r in rows:
            out.append({"task": r.task, "metric": r.metric, "value": r.value, "subset": r.subset,
                        "split": trainer.cfg.eval_split})
            if r.subset == "all":
                trainer.best[f"{r.task}/{r.metric}"] = max(trainer.best.get(f"{r.task}/{r.metric}", -1.0), r.value)
    return out
