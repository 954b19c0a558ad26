"""The eleven acceptance criteria, one test each.

Each test records a pass/fail line (printed in the terminal summary) before
asserting. The toy-world training criteria (5 to 9) share one pretrained
checkpoint and one set of 1000-step finetunes, built lazily per session.
"""

import json
import math
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record_acceptance
from uvlg import cli
from uvlg import evaldecode as E
from uvlg import tasks as T
from uvlg.checkpoint import Checkpoint, build_model
from uvlg.data import Dataset, SceneTable, collate, encode_example
from uvlg.model import Batch, ModelConfig, VLModel
from uvlg.nn_core import AdamW, Tensor, finite_diff_check, precision
from uvlg.synthworld import DatasetManifest, World, gen_scene, iou, synth
from uvlg.tokenizer import build_vocab
from uvlg.training import Trainer, finetune, make_model, preset, pretrain

GOLDEN = Path(__file__).parent / "golden" / "formats.jsonl"
MT_TASKS = ("vqa", "gqa", "nlvr", "refexp", "vcr_qa", "caption", "translate")


# -- shared toy-world runs ------------------------------------------------------

class ToyRuns:
    """Default world, one pretraining run and cached single-task finetunes."""

    def __init__(self, root):
        self.root = str(root)
        synth(DatasetManifest(), self.root)
        self.ds = Dataset(self.root)
        t = time.perf_counter()
        self.pretrained = pretrain(preset("pretrain", data_dir=self.root, log_every=0), self.ds)
        self.pretrain_seconds = time.perf_counter() - t
        self._runs = {}

    def cfg(self, **kw):
        return preset("finetune", data_dir=self.root, log_every=0, **kw)

    def single(self, task, init="pretrained", mode="gen"):
        key = (task, init, mode)
        if key not in self._runs:
            t = time.perf_counter()
            ck = finetune(task, self.cfg(mode=mode), self.pretrained if init == "pretrained" else None, self.ds)
            model = build_model(ck)
            rows = E.evaluate(model, self.ds, task, "test", mode)
            self._runs[key] = (rows, time.perf_counter() - t)
        return self._runs[key]


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    return ToyRuns(tmp_path_factory.mktemp("toy_world"))


def value(rows, subset="all", metric=None):
    for r in rows:
        if r.subset == subset and (metric is None or r.metric == metric):
            return r.value
    raise KeyError(subset)


# -- 1 -----------------------------------------------------------------------

def test_c01_gradient_integrity():
    t0 = time.perf_counter()
    m = DatasetManifest(n_regions=4, d_roi=8)
    world = World(m)
    rng = np.random.default_rng(0)
    scenes = [gen_scene(rng, world, f"s{i}") for i in range(3)]
    pool = [(s["scene_id"], c) for s in scenes for c in s["captions"]]
    exs = [T.mlm_example("s0", scenes[0]["captions"][0], rng),
           T.grounding_pair(scenes[1], rng),
           T.itm_sample(scenes[2], pool, rng)]
    vocab = build_vocab([e.input for e in exs] + [e.target for e in exs], 200, n_regions=4)
    table = SceneTable.from_records(scenes)
    with precision(np.float64):
        model = VLModel(ModelConfig.for_vocab(vocab, m_enc=2, m_dec=2, d=32, heads=4, d_ff=64, d_roi=8))
        batch = collate([encode_example(e, vocab) for e in exs], table, model.cfg.decoder_start_id, 4)
        rep = finite_diff_check(lambda: model.generation_loss(batch), dict(model.named_parameters()),
                                eps=1e-6, max_per_param=6)
    secs = time.perf_counter() - t0
    ok = rep.max_rel_error < 1e-4 and secs < 60
    record_acceptance(1, "gradient integrity", ok,
                      f"max rel err {rep.max_rel_error:.2e} over {rep.checked} entries, {secs:.1f}s")
    assert ok


# -- 2 -----------------------------------------------------------------------

def test_c02_tying():
    cfg = ModelConfig(m_enc=1, m_dec=1, d=8, heads=2, d_ff=16, vocab_size=16, vis_offset=10, n_regions=4, d_roi=3)
    rng = np.random.default_rng(0)
    with precision(np.float64):
        m = VLModel(cfg)
        batch = Batch(input_ids=rng.integers(5, 16, (2, 5)), input_pad=np.zeros((2, 5), bool),
                      roi=rng.standard_normal((2, 4, 3)), boxes=rng.uniform(size=(2, 4, 4)),
                      image_ids=np.ones((2, 4), int), region_ids=np.tile(np.arange(1, 5), (2, 1)),
                      decoder_input=rng.integers(5, 16, (2, 4)), labels=rng.integers(5, 16, (2, 4)))
        m.generation_loss(batch).backward()
        AdamW(m.named_parameters(), lr=1e-2).step(active=set(dict(m.named_parameters())) - m.head_parameter_names())
        w = m.shared.weight
        one_cell = (m.encoder.embed_tokens is w or getattr(m.encoder.embed_tokens, "weight", None) is w)
        bitwise = w.data.tobytes() == m.lm_head.weight.data.tobytes() == m.decoder.embed_tokens.data.tobytes()

        roi, boxes = rng.standard_normal((4, 3)), rng.uniform(size=(4, 4))
        img, reg = np.ones(4, int), np.arange(1, 5)
        hidden = Tensor(rng.standard_normal((1, 1, cfg.d)))
        vis3 = cfg.vis_offset + 2
        ev0, lg0 = m.embed_visual(roi, boxes, img, reg).data[0], m.lm_logits(hidden).data[0, 0]
        delta = rng.standard_normal(cfg.d)
        w.data[vis3] += delta
        ev1, lg1 = m.embed_visual(roi, boxes, img, reg).data[0], m.lm_logits(hidden).data[0, 0]
    region_ok = (np.allclose(ev1[2] - ev0[2], delta, atol=1e-12)
                 and np.array_equal(np.delete(ev1, 2, 0), np.delete(ev0, 2, 0)))
    logit_ok = (np.nonzero(lg1 != lg0)[0].tolist() == [vis3]
                and abs(lg1[vis3] - lg0[vis3] - hidden.data[0, 0] @ delta / math.sqrt(cfg.d)) < 1e-12)
    ok = bool(one_cell and bitwise and region_ok and logit_ok)
    record_acceptance(2, "tying suite", ok,
                      f"one cell {one_cell}, bitwise after step {bitwise}, region 3 {region_ok}, logit {logit_ok}")
    assert ok


# -- 3 -----------------------------------------------------------------------

def test_c03_format_golden():
    rows = [json.loads(ln) for ln in GOLDEN.read_text().splitlines()]
    bad = []
    for row in rows:
        scenes = ["l", "r"] if row["task"] == "nlvr" else ["s"]
        ex = T.format(row["task"], row["fields"], scenes)
        if (ex.input.encode(), ex.target.encode()) != (row["input"].encode(), row["target"].encode()):
            bad.append(row["task"])
    ok = not bad and len(rows) >= 10
    record_acceptance(3, "format golden rows", ok, f"{len(rows) - len(bad)}/{len(rows)} byte-identical")
    assert ok


# -- 4 -----------------------------------------------------------------------

def test_c04_masking_laws():
    rng = np.random.default_rng(2024)
    lex = ["a", "man", "is", "jumping", "over", "red", "fire", "hydrant", "dog", "cube", "."]
    span_ok = tok_ok = 0
    for _ in range(1000):
        toks = list(rng.choice(lex, size=int(rng.integers(1, 40))))
        out = T.span_mask(toks, 0.15, rng)
        want = max(1, T.round_half_up(0.15 * len(toks)))
        spans, cur = {}, None
        for t in out.target_tokens:
            if t.startswith("<text_"):
                cur = t
                spans[cur] = []
            else:
                spans[cur].append(t)
        rebuilt = [w for t in out.input_tokens for w in (spans[t] if t in spans else [t])]
        span_ok += len(out.positions) == want and rebuilt == toks
        tm = T.token_mask(toks, 0.30, rng)
        tok_ok += len(tm.positions) == T.round_half_up(0.30 * len(toks)) and tm.target_tokens == toks
    pool = [(f"s{i}", f"caption {i}") for i in range(20)]
    scene = {"scene_id": "s0", "captions": ["caption 0"]}
    neg = sum(T.itm_sample(scene, pool, rng).target == "false" for _ in range(10_000))
    ok = span_ok == 1000 and tok_ok == 1000 and 4800 <= neg <= 5200
    record_acceptance(4, "masking laws", ok, f"span {span_ok}/1000, token {tok_ok}/1000, ITM negatives {neg / 100:.2f}%")
    assert ok


# -- 5 -----------------------------------------------------------------------

def test_c05_grounding_learning(toy):
    pre_rows, pre_s = toy.single("refexp")
    scr_rows, scr_s = toy.single("refexp", init="scratch")
    pre, scr = value(pre_rows, metric="accuracy"), value(scr_rows, metric="accuracy")
    total = toy.pretrain_seconds + pre_s + scr_s
    ok = pre >= 0.90 and pre - scr >= 0.05 and total < 600
    record_acceptance(5, "toy grounding learning", ok,
                      f"pretrained {pre:.3f} vs scratch {scr:.3f}, {total:.0f}s incl. pretraining")
    assert ok


# -- 6 -----------------------------------------------------------------------

def test_c06_generative_vs_discriminative(toy):
    gen, gen_s = toy.single("vqa")
    disc, disc_s = toy.single("vqa", mode="disc")
    d_ood, g_ood = value(disc, "out-of-domain"), value(gen, "out-of-domain")
    g_in, d_in = value(gen, "in-domain"), value(disc, "in-domain")
    secs = gen_s + disc_s
    ok = d_ood == 0.0 and g_ood >= 0.30 and abs(g_in - d_in) <= 0.05 and secs < 600
    record_acceptance(6, "generative vs discriminative VQA", ok,
                      f"out-of-domain gen {g_ood:.3f} / disc {d_ood:.3f}; in-domain gen {g_in:.3f} / disc {d_in:.3f}; "
                      f"{secs:.0f}s")
    assert ok


# -- 7 -----------------------------------------------------------------------

def test_c07_vcr_ranking(toy):
    rng = np.random.default_rng(7)
    exact = 0
    for _ in range(1000):
        n = int(rng.integers(2, 6))
        lg = rng.normal(0, 4, (n, 12))
        t, f = rng.choice(12, 2, replace=False)
        idx, scores = E.rank_choices(lg, int(t), int(f))
        brute = [math.exp(r[t]) / (math.exp(r[t]) + math.exp(r[f])) for r in lg]
        exact += idx == int(np.argmax(brute)) and np.allclose(scores, brute, rtol=1e-12, atol=0)
    acc = value(toy.single("vcr_qa")[0])
    ok = exact == 1000 and acc >= 0.80
    record_acceptance(7, "VCR true/false ranking", ok, f"exact on {exact}/1000 logit sets; 4-choice accuracy {acc:.3f}")
    assert ok


# -- 8 -----------------------------------------------------------------------

def test_c08_multitask_parity(toy):
    per = preset("finetune").steps
    cfg = toy.cfg(tasks=MT_TASKS, steps=per * len(MT_TASKS))
    model = make_model(cfg, toy.ds, toy.pretrained)
    tr = Trainer(cfg, toy.ds, model, "round-robin")
    worst_spread = 0
    while tr.step < cfg.steps:
        tr.train_step()
        counts = tr.task_steps.values()
        worst_spread = max(worst_spread, max(counts) - min(counts))
    fair = worst_spread <= 1 and all(v == per for v in tr.task_steps.values())
    gaps, detail = {}, []
    for task in MT_TASKS:
        multi = E.headline(E.evaluate(model, toy.ds, task, "test"))
        single = E.headline(toy.single(task)[0])
        gaps[task] = abs(multi - single)
        detail.append(f"{task} {multi:.3f}/{single:.3f}")
    parity = all(gaps[t] <= 0.05 for t in MT_TASKS)
    ok = fair and parity
    record_acceptance(8, "multitask parity", ok,
                      f"max count spread {worst_spread}; multi/single " + ", ".join(detail))
    assert ok


# -- 9 -----------------------------------------------------------------------

def test_c09_shared_vs_per_task_heads(toy, tmp_path):
    counts, metrics = {}, {}
    for head_mode in ("shared", "per-task"):
        cfg = toy.cfg(tasks=MT_TASKS, steps=0, head_mode=head_mode)
        tr = Trainer(cfg, toy.ds, make_model(cfg, toy.ds, toy.pretrained), "round-robin")
        path = tmp_path / f"{head_mode}.ckpt"
        tr.checkpoint().save(path)
        lines = cli.inspect_lines(Checkpoint.load(path))
        counts[head_mode] = int(next(ln for ln in lines if ln.startswith("parameters: ")).split()[1])
        metrics[head_mode] = [E.headline(E.evaluate(tr.model, toy.ds, t, "test", limit=100)) for t in MT_TASKS]
    v, d = len(toy.ds.vocab), toy.pretrained.config["d"]
    added = counts["per-task"] - counts["shared"]
    ok = added == len(MT_TASKS) * v * d and metrics["shared"] == metrics["per-task"]
    record_acceptance(9, "shared vs per-task heads", ok,
                      f"added {added} = {len(MT_TASKS)}x{v}x{d}: {added == len(MT_TASKS) * v * d}; "
                      f"step-0 metrics equal: {metrics['shared'] == metrics['per-task']}")
    assert ok


# -- 10 ----------------------------------------------------------------------

def _tree(root):
    out = {}
    for base, _, names in os.walk(root):
        for n in names:
            if not n.endswith("stamp.json"):
                p = os.path.join(base, n)
                out[os.path.relpath(p, root)] = Path(p).read_bytes()
    return out


def test_c10_determinism(tmp_path, capsys):
    d = tmp_path / "run"
    trees = []
    for _ in range(2):
        if d.exists():
            shutil.rmtree(d)
        assert cli.main(["synth", "--out", str(d / "world")]) == 0
        (d / "pre.ini").write_text("[data]\ndir = world\n[train]\nsteps = 100\nlog_every = 10\n"
                                   "checkpoint = pre.ckpt\nlog = pre.log.jsonl\n[model]\nd = 32\nd_ff = 64\n")
        assert cli.main(["pretrain", "--config", str(d / "pre.ini")]) == 0
        assert cli.main(["eval", "--ckpt", str(d / "pre.ckpt"), "--task", "refexp", "--limit", "100",
                         "--out", str(d / "eval.jsonl")]) == 0
        trees.append(_tree(d))
    capsys.readouterr()
    a, b = trees
    diff = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = not diff and "pre.ckpt" in a and "eval.jsonl" in a
    record_acceptance(10, "determinism", ok, f"{len(a)} files compared, {len(diff)} differ")
    assert ok, diff[:5]


# -- 11 ----------------------------------------------------------------------

def test_c11_metric_units():
    x = "a red dog sits on the blue cube".split()
    checks = {
        "bleu(x,x)=1": E.bleu(x, [x]) == 1.0,
        "iou 1.0": abs(iou([0, 0, 1, 1], [0, 0, 1, 1]) - 1.0) <= 1e-9,
        "iou 0.0": abs(iou([0, 0, 1, 1], [2, 2, 3, 3])) <= 1e-9,
        "iou 1/3": abs(iou([0, 0, 1, 1], [0.5, 0, 1.5, 1]) - 1 / 3) <= 1e-9,
        "vqa 2 humans": E.vqa_score("red", ["red", "red"]) == 0.6,
        "vqa >=4 humans": all(E.vqa_score("red", ["red"] * k) == 1.0 for k in (4, 5, 10)),
    }
    failed = [k for k, v in checks.items() if not v]
    record_acceptance(11, "metric units", not failed, "all exact" if not failed else "failed: " + ", ".join(failed))
    assert not failed
