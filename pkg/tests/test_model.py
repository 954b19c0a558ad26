import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_batch, tiny_model
from uvlg.model import IGNORE, Batch, ModelConfig, VLModel
from uvlg.nn_core import AdamW, ConfigError, Parameter, ShapeError, Tensor, ops, precision


def small_cfg(**kw):
    base = dict(m_enc=1, m_dec=1, d=8, heads=2, d_ff=16, vocab_size=16, vis_offset=10, n_regions=4, d_roi=3)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(rng, cfg, B=2, tx=5, ty=4, images=1):
    N = images * cfg.n_regions
    return Batch(
        input_ids=rng.integers(5, cfg.vocab_size, (B, tx)),
        input_pad=np.zeros((B, tx), bool),
        roi=rng.standard_normal((B, N, cfg.d_roi)),
        boxes=rng.uniform(size=(B, N, 4)),
        image_ids=np.repeat(np.arange(1, images + 1), cfg.n_regions)[None].repeat(B, 0),
        region_ids=np.tile(np.arange(1, cfg.n_regions + 1), images)[None].repeat(B, 0),
        decoder_input=np.concatenate([np.zeros((B, 1), int), rng.integers(5, cfg.vocab_size, (B, ty - 1))], 1),
        labels=rng.integers(5, cfg.vocab_size, (B, ty)),
    )


# -- config ----------------------------------------------------------------

def test_presets_layouts():
    t5 = ModelConfig.preset("vl-t5-base")
    assert (t5.m_enc, t5.m_dec, t5.d, t5.n_regions, t5.positional) == (12, 12, 768, 36, "relative-bias")
    bart = ModelConfig.preset("vl-bart-base")
    assert (bart.m_enc, bart.m_dec, bart.d, bart.positional, bart.masking) == (6, 6, 768, "learned-absolute",
                                                                               "token-mask")
    assert ModelConfig.preset("toy") == ModelConfig()
    with pytest.raises(ConfigError):
        ModelConfig.preset("huge")


def test_config_validation_and_round_trip():
    with pytest.raises(ConfigError):
        ModelConfig(d=10, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(positional="rotary")
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=100, vis_offset=105)
    cfg = small_cfg(head_tasks=("vqa",))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_decoder_start_token():
    assert small_cfg().decoder_start_id == 0
    assert small_cfg(masking="token-mask").decoder_start_id == 1


# -- tying -------------------------------------------------------------------

def test_three_way_tying_is_one_parameter():
    m = VLModel(small_cfg())
    cells = {id(m.shared.weight), id(m.encoder.embed_tokens), id(m.decoder.embed_tokens), id(m.lm_head.weight)}
    assert len(cells) == 1
    paths = m.parameter_paths()
    assert {paths[p] for p in ("encoder.embed_tokens", "decoder.embed_tokens", "lm_head.weight")} == \
        {"shared.weight"}


def test_tying_survives_optimizer_step():
    cfg = small_cfg()
    m = VLModel(cfg)
    batch = random_batch(np.random.default_rng(0), cfg)
    m.generation_loss(batch).backward()
    opt = AdamW(m.named_parameters(), lr=1e-2)
    opt.step(active=set(dict(m.named_parameters())) - m.head_parameter_names())
    a = m.shared.weight.data.tobytes()
    assert a == m.lm_head.weight.data.tobytes() == m.decoder.embed_tokens.data.tobytes()


def test_sentinel_row_is_visual_and_output_embedding():
    with precision(np.float64):
        cfg = small_cfg()
        m = VLModel(cfg)
        rng = np.random.default_rng(1)
        roi, boxes = rng.standard_normal((4, 3)), rng.uniform(size=(4, 4))
        img, reg = np.ones(4, int), np.arange(1, 5)
        hidden = Tensor(rng.standard_normal((1, 1, cfg.d)))
        vis3 = cfg.vis_offset + 2
        np.testing.assert_array_equal(m.embed_text([[vis3]]).data[0, 0], m.shared.weight.data[vis3])

        ev0 = m.embed_visual(roi, boxes, img, reg).data[0]
        lg0 = m.lm_logits(hidden).data[0, 0]
        delta = rng.standard_normal(cfg.d)
        m.shared.weight.data[vis3] += delta
        ev1 = m.embed_visual(roi, boxes, img, reg).data[0]
        lg1 = m.lm_logits(hidden).data[0, 0]

    np.testing.assert_allclose(ev1[2] - ev0[2], delta, atol=1e-12)
    np.testing.assert_array_equal(np.delete(ev1, 2, 0), np.delete(ev0, 2, 0))
    changed = np.nonzero(lg1 != lg0)[0]
    assert changed.tolist() == [vis3]
    assert lg1[vis3] - lg0[vis3] == pytest.approx(hidden.data[0, 0] @ delta / math.sqrt(cfg.d), abs=1e-12)


def test_sentinel_row_gradient_flows_through_both_paths(tiny_setup):
    """Untie the output head into a separate cell, then compare with the tied grad."""
    setup = tiny_setup
    ground = [e for e in setup["examples"] if e.task == "ground"]
    with precision(np.float64):
        m = tiny_model(setup["vocab"])
        batch = tiny_batch(setup, m, ground)
        k = ground[0].aux["region"]
        row = m.cfg.vis_offset + k - 1
        m.generation_loss(batch).backward()
        tied = m.shared.weight.grad[row].copy()

        m.zero_grad()
        m.shared.weight.grad = None
        head = Parameter(m.shared.weight.data.copy(), name="head_copy")
        m.lm_head.weight = head
        m.generation_loss(batch).backward()
        emb_path, out_path = m.shared.weight.grad[row], head.grad[row]

    assert np.abs(emb_path).max() > 0
    assert np.abs(out_path).max() > 0
    np.testing.assert_allclose(emb_path + out_path, tied, rtol=1e-9, atol=1e-12)


# -- embeddings --------------------------------------------------------------

def test_embed_visual_zero_features():
    m = VLModel(small_cfg())
    m.visual.roi_proj.bias.data[:] = 0
    m.visual.box_proj.bias.data[:] = 0
    out = m.embed_visual(np.zeros((4, 3)), np.zeros((4, 4)), np.ones(4, int), np.arange(1, 5)).data[0]
    ref = m.visual.image_embed.weight.data[0] + m.shared.weight.data[10:14]
    np.testing.assert_allclose(out, ref, atol=1e-7)


def test_embed_visual_hand_sum_d2():
    with precision(np.float64):
        m = VLModel(small_cfg(d=2, heads=1, d_ff=4, d_roi=2))
        m.visual.roi_proj.weight.data[:] = [[1.0, 0.0], [0.0, 3.0]]
        m.visual.roi_proj.bias.data[:] = [0.0, 0.0]
        m.visual.box_proj.weight.data[:] = 0.0
        m.visual.box_proj.bias.data[:] = [2.0, 0.0]
        m.visual.roi_ln.gamma.data[:] = [1.0, 2.0]
        m.visual.roi_ln.beta.data[:] = [0.5, 0.0]
        m.visual.image_embed.weight.data[1] = [10.0, 20.0]
        m.shared.weight.data[11] = [0.25, -0.25]
        out = m.embed_visual(np.array([[1.0, 1.0]]), np.zeros((1, 4)), np.array([2]), np.array([2])).data[0, 0]
    # roi proj (1, 3) normalizes to (-1, 1) up to eps; box proj (2, 0) normalizes to (1, -1)
    s1 = 1 / math.sqrt(1 + 1e-6)
    ref = np.array([-s1 * 1 + 0.5, s1 * 2]) + np.array([s1, -s1]) + [10.0, 20.0] + [0.25, -0.25]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_embed_errors():
    m = VLModel(small_cfg())
    with pytest.raises(ShapeError):
        m.embed_visual(np.zeros((4, 5)), np.zeros((4, 4)), np.ones(4, int), np.arange(1, 5))
    with pytest.raises(IndexError):
        m.embed_text([[16]])


def test_text_positions_by_scheme():
    rel = VLModel(small_cfg())
    e = rel.embed_text([[7, 7]]).data[0]
    np.testing.assert_array_equal(e[0], e[1])
    ab = VLModel(small_cfg(positional="learned-absolute"))
    e = ab.embed_text([[7, 7]]).data[0]
    pos = ab.encoder.embed_positions.data
    np.testing.assert_allclose(e[1] - e[0], pos[1] - pos[0], atol=1e-6)


# -- encoder -----------------------------------------------------------------

@pytest.mark.parametrize("images", [1, 2])
def test_encoder_length_bookkeeping(images):
    cfg = small_cfg()
    m = VLModel(cfg)
    enc = m.encode(random_batch(np.random.default_rng(0), cfg, tx=5, images=images))
    assert enc.h.shape == (2, 5 + images * cfg.n_regions, cfg.d)


def test_all_padding_text_still_encodes():
    cfg = small_cfg()
    m = VLModel(cfg)
    b = random_batch(np.random.default_rng(0), cfg, tx=1)
    b.input_pad[:] = True
    h = m.encode(b).h.data
    assert np.isfinite(h).all()


@pytest.mark.parametrize("positional", ["relative-bias", "learned-absolute"])
def test_visual_permutation_equivariance(positional):
    with precision(np.float64):
        cfg = small_cfg(positional=positional)
        m = VLModel(cfg)
        b = random_batch(np.random.default_rng(2), cfg, tx=5)
        perm = np.array([2, 0, 3, 1])
        h0 = m.encode(b).h.data
        b.roi, b.boxes, b.region_ids = b.roi[:, perm], b.boxes[:, perm], b.region_ids[:, perm]
        h1 = m.encode(b).h.data
    np.testing.assert_allclose(h1[:, :5], h0[:, :5], atol=1e-10)
    np.testing.assert_allclose(h1[:, 5:], h0[:, 5:][:, perm], atol=1e-10)


def test_text_padding_is_masked():
    with precision(np.float64):
        cfg = small_cfg()
        m = VLModel(cfg)
        b = random_batch(np.random.default_rng(3), cfg, tx=6)
        b.input_pad[:, 4:] = True
        h0 = m.encode(b).h.data
        b.input_ids[:, 4:] = 9
        h1 = m.encode(b).h.data
    np.testing.assert_allclose(h1[:, :4], h0[:, :4], atol=1e-12)
    np.testing.assert_allclose(h1[:, 6:], h0[:, 6:], atol=1e-12)


# -- decoder -----------------------------------------------------------------

@settings(max_examples=10)
@given(j=st.integers(0, 4), seed=st.integers(0, 1000))
def test_causality(j, seed):
    with precision(np.float64):
        cfg = small_cfg()
        m = VLModel(cfg)
        rng = np.random.default_rng(seed)
        b = random_batch(rng, cfg, ty=5)
        enc = m.encode(b)
        l0 = m.decode_logits(b.decoder_input, enc).data
        dec = b.decoder_input.copy()
        dec[:, j] = (dec[:, j] + 1 - 5) % (cfg.vocab_size - 5) + 5
        l1 = m.decode_logits(dec, enc).data
    np.testing.assert_array_equal(l1[:, :j], l0[:, :j])
    assert not np.allclose(l1[:, j], l0[:, j])


def test_prefix_longer_than_max_length():
    cfg = small_cfg(max_text_len=4)
    m = VLModel(cfg)
    b = random_batch(np.random.default_rng(0), cfg, tx=3)
    with pytest.raises(ShapeError):
        m.decode_logits(np.zeros((2, 5), int), m.encode(b))


def test_fresh_model_near_uniform():
    cfg = small_cfg(emb_std=0.02)
    m = VLModel(cfg)
    b = random_batch(np.random.default_rng(0), cfg)
    p = ops.softmax(m.decode_logits(b.decoder_input, m.encode(b))).data
    assert np.abs(p - 1 / cfg.vocab_size).max() < 0.01


def test_per_task_head_matches_shared_before_update():
    cfg = small_cfg()
    m = VLModel(cfg)
    b = random_batch(np.random.default_rng(0), cfg)
    enc = m.encode(b)
    shared = m.decode_logits(b.decoder_input, enc).data
    m.add_task_heads(["vqa", "caption"])
    assert m.cfg.head_mode == "per-task"
    assert m.head_weight("vqa") is not m.shared.weight
    np.testing.assert_array_equal(m.decode_logits(b.decoder_input, enc, task="vqa").data, shared)
    assert m.head_parameter_names("vqa") >= {"task_heads.caption"}
    assert "task_heads.vqa" not in m.head_parameter_names("vqa")


def test_per_task_head_parameter_count():
    cfg = small_cfg()
    m = VLModel(cfg)
    before = m.num_parameters()
    m.add_task_heads([f"t{i}" for i in range(7)])
    assert m.num_parameters() - before == 7 * cfg.vocab_size * cfg.d


# -- losses ------------------------------------------------------------------

def test_generation_loss_uniform_logits():
    cfg = small_cfg()
    m = VLModel(cfg)
    m.shared.weight.data[:] = 0
    b = random_batch(np.random.default_rng(0), cfg, ty=1)
    assert m.generation_loss(b).item() == pytest.approx(math.log(16), abs=1e-5)


def test_generation_loss_matches_manual_nll():
    with precision(np.float64):
        cfg = small_cfg()
        m = VLModel(cfg)
        b = random_batch(np.random.default_rng(4), cfg, B=1, ty=3)
        logits = m.decode_logits(b.decoder_input, m.encode(b)).data[0]
        loss = m.generation_loss(b).item()
    manual = 0.0
    for j, y in enumerate(b.labels[0]):
        z = logits[j]
        manual += math.log(np.exp(z - z.max()).sum()) + z.max() - z[y]
    assert loss == pytest.approx(manual / 3, rel=1e-12)


def test_generation_loss_ignores_padding():
    with precision(np.float64):
        cfg = small_cfg()
        m = VLModel(cfg)
        b = random_batch(np.random.default_rng(5), cfg, ty=3)
        l0 = m.generation_loss(b).item()
        b.decoder_input = np.concatenate([b.decoder_input, np.zeros((2, 4), int)], 1)
        b.labels = np.concatenate([b.labels, np.full((2, 4), IGNORE)], 1)
        l1 = m.generation_loss(b).item()
        b.labels[:] = IGNORE
        with pytest.raises(ValueError):
            m.generation_loss(b)
    assert l1 == pytest.approx(l0, abs=1e-12)


def _zero_head(mlp, bias=None):
    mlp.fc2.weight.data[:] = 0
    mlp.fc2.bias.data[:] = 0 if bias is None else bias


def test_discriminative_vqa_loss_values():
    with precision(np.float64):
        cfg = small_cfg(vqa_candidates=2)
        m = VLModel(cfg)
        b = random_batch(np.random.default_rng(0), cfg, B=3)
        _zero_head(m.vqa_head)
        assert m.discriminative_vqa_loss(b, np.zeros((3, 2))).item() == pytest.approx(2 * math.log(2))
        assert m.discriminative_vqa_loss(b, np.tile([1.0, 0.3], (3, 1))).item() == pytest.approx(2 * math.log(2))
        _zero_head(m.vqa_head, np.array([1.0, -2.0]))
        sig = lambda x: 1 / (1 + math.exp(-x))  # noqa: E731
        ref = -math.log(sig(1.0)) - (0.3 * math.log(sig(-2.0)) + 0.7 * math.log(1 - sig(-2.0)))
        assert m.discriminative_vqa_loss(b, np.tile([1.0, 0.3], (3, 1))).item() == pytest.approx(ref, rel=1e-12)
        _zero_head(m.vqa_head, np.array([40.0, 0.0]))
        loss = m.discriminative_vqa_loss(b, np.tile([1.0, 0.0], (3, 1))).item()
        assert loss == pytest.approx(math.log(2), abs=1e-12)
        np.testing.assert_allclose(m.vqa_head_scores(b)[:, 1], 0.5)
        with pytest.raises(ValueError):
            m.discriminative_vqa_loss(b, np.zeros((3, 0)))


def test_no_vqa_head_is_config_error():
    cfg = small_cfg()
    with pytest.raises(ConfigError):
        VLModel(cfg).vqa_head_logits(VLModel(cfg).encode(random_batch(np.random.default_rng(0), cfg)))


def test_region_scoring():
    with precision(np.float64):
        cfg = small_cfg(n_regions=8, vocab_size=20)
        m = VLModel(cfg)
        b = random_batch(np.random.default_rng(0), cfg)
        s = m.region_scores(b)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)

        perm = np.random.default_rng(1).permutation(8)
        b2 = random_batch(np.random.default_rng(0), cfg)
        b2.roi, b2.boxes, b2.region_ids = b2.roi[:, perm], b2.boxes[:, perm], b2.region_ids[:, perm]
        np.testing.assert_allclose(m.region_scores(b2), s[:, perm], atol=1e-10)

        _zero_head(m.region_head)
        assert m.region_scoring_loss(b, [3, 8]).item() == pytest.approx(math.log(8))
        with pytest.raises(IndexError):
            m.region_scoring_loss(b, [0, 3])
