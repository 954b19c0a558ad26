import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from uvlg import tasks as T
from uvlg.data import Dataset, SceneTable, collate, encode_example
from uvlg.model import ModelConfig, VLModel
from uvlg.synthworld import DatasetManifest, World, gen_scene, synth
from uvlg.tokenizer import build_vocab

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE = {}


def record_acceptance(number: int, title: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        line = f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}"
        terminalreporter.write_line(line + (f" -- {detail}" if detail else ""))


SMALL_MANIFEST = dict(
    scenes={"train": 60, "val": 20, "test": 20},
    examples={"train": 80, "val": 24, "test": 24},
)


@pytest.fixture(scope="session")
def small_world(tmp_path_factory):
    """A tiny synthesized world on disk plus its loaded Dataset."""
    root = tmp_path_factory.mktemp("small_world")
    synth(DatasetManifest(**SMALL_MANIFEST), root)
    return Dataset(root)


@pytest.fixture(scope="session")
def tiny_setup():
    """In-memory scenes, a vocab and a small float32 model."""
    m = DatasetManifest(n_regions=4, d_roi=8)
    world = World(m)
    rng = np.random.default_rng(0)
    scenes = [gen_scene(rng, world, f"s{i}") for i in range(6)]
    pool = [(s["scene_id"], c) for s in scenes for c in s["captions"]]
    exs = [T.mlm_example("s0", scenes[0]["captions"][0], rng),
           T.grounding_pair(scenes[1], rng),
           T.itm_sample(scenes[2], pool, rng),
           T.grounded_caption_pair(scenes[3], rng)]
    corpus = [e.input for e in exs] + [e.target for e in exs] + [c for _, c in pool]
    vocab = build_vocab(corpus + ["true false"], 300, n_regions=4)
    table = SceneTable.from_records(scenes)
    return {"scenes": scenes, "table": table, "vocab": vocab, "examples": exs, "world": world}


def tiny_model(vocab, **kw):
    base = dict(m_enc=1, m_dec=1, d=16, heads=2, d_ff=32, d_roi=8)
    base.update(kw)
    return VLModel(ModelConfig.for_vocab(vocab, **base))


def tiny_batch(setup, model, examples=None):
    exs = setup["examples"] if examples is None else examples
    items = [encode_example(e, setup["vocab"]) for e in exs]
    return collate(items, setup["table"], model.cfg.decoder_start_id, model.cfg.n_regions)
