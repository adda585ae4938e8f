"""Encoders, auxiliary heads, fusion and scoring: shape contracts, extremal values and invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vehsearch.autodiff import tensor as T
from vehsearch.autodiff.tensor import Tensor
from vehsearch.encoders import EncoderConfig, ImageEncoder, TextEncoder
from vehsearch.fusion import ChannelGate, CoAttention, Fusion, MaskHead, enhance
from vehsearch.heads import FuturePredictor, ImageClassifier, Substitution, SubstitutionBundle, TextClassifier, box_pool
from vehsearch.model import RetrievalNet
from vehsearch.scoring import ClassLogits, combine, compute_losses, ctm, match_probability, mpr, ss
from vehsearch.text import PAD, Vocab, tokenize_batch

DESK = EncoderConfig()


def t64(data, **kw):
    return Tensor(data, dtype=np.float64, **kw)


def rng_(seed=0):
    return np.random.default_rng(seed)


def rand(rng, *shape, scale=1.0):
    return t64(rng.normal(size=shape) * scale)


def tokens(n=2, length=16, seed=0):
    r = rng_(seed)
    ids = np.full((n, length), PAD, dtype=np.int64)
    mask = np.zeros((n, length), dtype=np.int64)
    for i in range(n):
        k = int(r.integers(3, length))
        ids[i, :k] = r.integers(1, 100, size=k)
        mask[i, :k] = 1
    return ids, mask


# ---------------------------------------------------------------- encoders


def test_text_encoder_shape():
    enc = TextEncoder(EncoderConfig(l=16, e=64, c=64, d_model=32), rng_())
    ids, mask = tokens(1)
    assert enc(ids[0], mask[0]).shape == (1, 16, 64)


def test_text_encoder_rejects_out_of_vocab():
    enc = TextEncoder(DESK, rng_())
    ids, mask = tokens(1)
    ids[0, 1] = DESK.vocab_size
    with pytest.raises(IndexError):
        enc(ids, mask)


def test_pad_rows_do_not_leak_into_real_tokens():
    enc = TextEncoder(DESK, rng_()).eval()
    ids, mask = tokens(2)
    before = enc(ids, mask).data
    enc.token_embedding.data = enc.token_embedding.data.copy()
    enc.token_embedding.data[PAD] += rng_(5).normal(size=DESK.d_model) * 10
    after = enc(ids, mask).data
    real = mask.astype(bool)
    np.testing.assert_allclose(after[real], before[real], atol=1e-5)
    assert not np.allclose(after[~real], before[~real])


def test_image_encoder_shape_and_size_check():
    enc = ImageEncoder(DESK, rng_()).eval()
    assert enc(np.zeros((3, 96, 96), dtype=np.float32)).shape == (1, 64, 12, 12)
    with pytest.raises(ValueError, match="96"):
        enc(np.zeros((1, 3, 64, 64), dtype=np.float32))


def test_zero_image_gives_spatially_constant_features():
    enc = ImageEncoder(DESK, rng_()).eval()
    fi = enc(np.zeros((1, 3, 96, 96), dtype=np.float32)).data
    flat = fi.reshape(64, -1)
    np.testing.assert_allclose(flat, flat[:, :1].repeat(flat.shape[1], axis=1), atol=1e-7)


def test_image_encoder_interior_translation_equivariance():
    cfg = EncoderConfig(image_size=128, num_stages=4)
    enc = ImageEncoder(cfg, rng_(1)).eval()
    img = rng_(2).uniform(size=(1, 3, 128, 128)).astype(np.float32)
    shifted = np.zeros_like(img)
    shifted[..., 8:] = img[..., :-8]
    a, b = enc(img).data, enc(shifted).data
    np.testing.assert_allclose(b[..., 5:11, 6:11], a[..., 5:11, 5:10], atol=1e-4)


def test_width_mismatch_rejected_at_construction():
    with pytest.raises(ValueError):
        EncoderConfig(e=64, c=32)


# ---------------------------------------------------------------- auxiliary heads


def test_text_classifier_zero_case_and_shapes():
    head = TextClassifier(64, rng_())
    head.linear.weight.data[:] = 0
    c, t = head(t64(np.zeros((1, 64))))
    assert c.shape == (1, 12) and t.shape == (1, 10)
    np.testing.assert_allclose(T.softmax(c).data, 1 / 12)
    np.testing.assert_allclose(T.softmax(t).data, 1 / 10)


def test_box_pool_of_constant_is_constant():
    k = rng_().normal(size=(1, 8, 1, 1))
    fi = t64(np.broadcast_to(k, (1, 8, 6, 6)).copy())
    b = np.zeros((1, 1, 6, 6))
    b[0, 0, 1:3, 2:5] = 1
    np.testing.assert_allclose(box_pool(fi, b).data, k.reshape(1, 8), rtol=1e-12)


def test_box_pool_full_box_equals_global_mean():
    fi = rand(rng_(), 2, 8, 6, 6)
    pooled = box_pool(fi, np.ones((2, 1, 6, 6)))
    sub = Substitution(8, 8, rng_())(rand(rng_(1), 2, 5, 8), fi, np.ones((2, 1, 6, 6)))
    np.testing.assert_allclose(pooled.data, sub.fi_gt.data, rtol=1e-12)


def test_box_pool_gradient_only_inside_box():
    fi = rand(rng_(), 1, 4, 5, 5)
    fi.requires_grad = True
    b = np.zeros((1, 1, 5, 5))
    b[0, 0, 1:3, 1:4] = 1
    T.backward(T.tsum(box_pool(fi, b) * t64(rng_(3).normal(size=(1, 4)))))
    assert np.all(fi.grad[:, :, b[0, 0] == 0] == 0)
    assert np.all(fi.grad[:, :, b[0, 0] == 1] != 0)


def test_empty_box_mask_rejected():
    head = ImageClassifier(8, rng_())
    with pytest.raises(ValueError, match="empty box mask"):
        head(rand(rng_(), 1, 8, 4, 4), np.zeros((1, 1, 4, 4)))


def test_substitution_targets_of_constants():
    sub = Substitution(8, 8, rng_())
    v = rng_(1).normal(size=8)
    fn = t64(np.broadcast_to(v, (1, 5, 8)).copy())
    k = rng_(2).normal(size=(1, 8, 1, 1))
    fi = t64(np.broadcast_to(k, (1, 8, 4, 4)).copy())
    bundle = sub(fn, fi, np.ones((1, 1, 4, 4)))
    np.testing.assert_allclose(bundle.fn_gt.data[0], v, rtol=1e-12)
    np.testing.assert_allclose(bundle.fi_gt.data[0], k.ravel(), rtol=1e-12)
    assert bundle.fi_g.shape == (1, 8) and bundle.fn_g.shape == (1, 8)


def test_substitution_targets_carry_gradient():
    fi = rand(rng_(), 1, 8, 4, 4)
    fi.requires_grad = True
    bundle = Substitution(8, 8, rng_())(rand(rng_(1), 1, 5, 8), fi, np.ones((1, 1, 4, 4)))
    T.backward(T.tsum(bundle.fi_gt))
    np.testing.assert_allclose(fi.grad, 1 / 16)


def test_future_predictor_shape_and_zero_weights():
    fut = FuturePredictor(64, rng_())
    fi = rand(rng_(), 2, 64, 12, 12)
    assert fut(fi).shape == (2, 3, 12, 12)
    for conv in (fut.conv1, fut.conv2, fut.conv3):
        conv.weight.data[:] = 0
    fut.conv3.bias.data[:] = [0.1, -0.2, 0.3]
    u = fut(fi).data
    np.testing.assert_allclose(u, np.broadcast_to(np.array([0.1, -0.2, 0.3]).reshape(1, 3, 1, 1), u.shape))
    fut.conv3.bias.data[:] = 0
    target = rng_(4).uniform(size=(2, 3, 12, 12))
    np.testing.assert_allclose(T.mse(fut(fi), t64(target)).item(), (target**2).mean(), rtol=1e-12)


# ---------------------------------------------------------------- fusion


@given(st.integers(0, 10_000), st.floats(0.1, 20.0))
@settings(max_examples=25, deadline=None)
def test_attention_rows_sum_to_one(seed, scale):
    r = rng_(seed)
    att = CoAttention(16, 16, r)
    a = att(rand(r, 2, 5, 16, scale=scale), rand(r, 2, 16, 4, 4, scale=scale)).data
    assert a.shape == (2, 5, 16)
    assert np.abs(a.sum(-1) - 1).max() < 1e-6


def test_constant_image_gives_uniform_attention():
    att = CoAttention(16, 16, rng_())
    v = rng_(1).normal(size=(1, 16, 1, 1))
    fi = t64(np.broadcast_to(v, (1, 16, 3, 5)).copy())
    a = att(rand(rng_(2), 1, 4, 16), fi).data
    np.testing.assert_allclose(a, 1 / 15, rtol=1e-6)


def test_attention_equivariant_to_spatial_permutation():
    att = CoAttention(16, 16, rng_())
    fn, fi = rand(rng_(1), 1, 4, 16), rand(rng_(2), 1, 16, 4, 4)
    perm = rng_(3).permutation(16)
    fi_p = t64(fi.data.reshape(1, 16, 16)[:, :, perm].reshape(1, 16, 4, 4))
    np.testing.assert_allclose(att(fn, fi_p).data, att(fn, fi).data[:, :, perm], rtol=1e-5, atol=1e-9)


def test_coattention_width_mismatch():
    with pytest.raises(ValueError):
        CoAttention(16, 8, rng_())


def test_enhance_zero_attention_is_identity():
    fn, fi = rand(rng_(1), 2, 4, 8), rand(rng_(2), 2, 8, 3, 3)
    fn_e, fi_e = enhance(fn, fi, t64(np.zeros((2, 4, 9))))
    assert np.array_equal(fn_e.data, fn.data) and np.array_equal(fi_e.data, fi.data)


def test_enhance_constant_image_adds_the_vector():
    v = rng_(1).normal(size=8)
    fi = t64(np.broadcast_to(v.reshape(1, 8, 1, 1), (1, 8, 3, 3)).copy())
    fn = rand(rng_(2), 1, 4, 8)
    a = T.softmax(rand(rng_(3), 1, 4, 9), axis=-1)
    fn_e, fi_e = enhance(fn, fi, a)
    np.testing.assert_allclose(fn_e.data, fn.data + v, rtol=1e-12)
    assert fn_e.shape == (1, 4, 8) and fi_e.shape == (1, 8, 3, 3)


@pytest.mark.parametrize("bias,expect_identity", [(20.0, True), (-20.0, False)])
def test_saturated_gate(bias, expect_identity):
    gate = ChannelGate(8, 8, rng_())
    gate.fc2.weight.data[:] = 0
    gate.fc2.bias.data[:] = bias
    fi_e = rand(rng_(1), 1, 8, 3, 3)
    fm = gate(rand(rng_(2), 1, 4, 8), fi_e).data
    if expect_identity:
        np.testing.assert_allclose(fm, fi_e.data, atol=1e-6 * np.abs(fi_e.data).max())
    else:
        assert np.abs(fm).max() < 1e-6 * np.abs(fi_e.data).max()


def test_gate_never_amplifies():
    gate = ChannelGate(8, 8, rng_())
    fi_e = rand(rng_(1), 3, 8, 4, 4, scale=5)
    fm = gate(rand(rng_(2), 3, 4, 8, scale=5), fi_e).data
    assert np.all(np.abs(fm) <= np.abs(fi_e.data))


def test_mask_shape_and_open_interval():
    fusion = Fusion(64, 64, 32, rng_()).eval()
    m = fusion(rand(rng_(1), 2, 16, 64), rand(rng_(2), 2, 64, 12, 12)).data
    assert m.shape == (2, 1, 12, 12)
    assert np.all(m > 0) and np.all(m < 1)


def test_mask_clamped_under_saturation():
    head = MaskHead(8, 8, rng_()).eval()
    head.out.bias.data[:] = 1e4
    assert np.all(head(rand(rng_(1), 1, 8, 4, 4)).data < 1)
    head.out.bias.data[:] = -1e4
    assert np.all(head(rand(rng_(1), 1, 8, 4, 4)).data > 0)


def test_mask_depends_on_the_sentence():
    fusion = Fusion(64, 64, 32, rng_()).eval()
    fi = rand(rng_(1), 1, 64, 12, 12)
    a = fusion(rand(rng_(2), 1, 16, 64), fi).data
    b = fusion(rand(rng_(3), 1, 16, 64), fi).data
    assert np.abs(a - b).max() > 0


# ---------------------------------------------------------------- scoring


def box(h=6, w=6, rows=slice(1, 4), cols=slice(2, 5)):
    b = np.zeros((1, 1, h, w))
    b[0, 0, rows, cols] = 1
    return b


def test_mpr_examples():
    b = box()
    assert mpr(t64(b), b).item() == 1.0
    assert mpr(t64(np.zeros_like(b)), b).item() == 0.0
    assert mpr(t64(np.full_like(b, 0.5)), b).item() == 0.5
    with pytest.raises(ValueError, match="empty candidate box"):
        mpr(t64(b), np.zeros_like(b))


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_mpr_in_unit_interval(seed):
    r = rng_(seed)
    b = (r.uniform(size=(3, 1, 5, 5)) < 0.4).astype(float)
    b[:, 0, 2, 2] = 1
    v = mpr(t64(r.uniform(size=(3, 1, 5, 5))), b).data
    assert np.all((v >= 0) & (v <= 1))


def bundle_from(fi_gt, fi_g, fn_gt, fn_g):
    return SubstitutionBundle(*(t64(np.asarray(x, dtype=float)) for x in (fi_gt, fn_gt, fi_g, fn_g)))


def test_ss_examples():
    x, y = np.array([[1.0, 0.0, 2.0]]), np.array([[0.5, 3.0, 0.0]])
    assert ss(bundle_from(x, x, y, y)).item() == pytest.approx(2.0, abs=1e-12)
    ox, oy = np.array([[0.0, 1.0, 0.0]]), np.array([[0.0, 0.0, 1.0]])
    assert ss(bundle_from(x, np.array([[2.0, 0.0, -1.0]]), oy, np.array([[0.0, 1.0, 0.0]]))).item() == 0.0
    assert ss(bundle_from(x, -x, y, -2 * y)).item() == pytest.approx(-2.0, abs=1e-12)
    assert ox.shape == oy.shape


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_ss_range(seed):
    r = rng_(seed)
    v = ss(bundle_from(*(r.normal(size=(4, 6)) for _ in range(4)))).data
    assert np.all((v >= -2) & (v <= 2))


def one_hot_logits(ids, n, high=20.0):
    out = np.full((len(ids), n), -high)
    out[np.arange(len(ids)), ids] = high
    return t64(out)


def test_ctm_examples():
    agree = ctm(one_hot_logits([3], 12), one_hot_logits([7], 10), [3], [7]).item()
    assert abs(agree - 2) < 1e-6
    uniform = ctm(t64(np.zeros((1, 12))), t64(np.zeros((1, 10))), [0], [0]).item()
    assert uniform == pytest.approx(1 / 12 + 1 / 10, abs=1e-12)
    assert abs(uniform - 0.1833) < 1e-4
    disagree = ctm(one_hot_logits([3], 12), one_hot_logits([7], 10), [4], [8]).item()
    assert disagree < 1e-6


@pytest.mark.parametrize("color,kind", [(12, 0), (-1, 0), (0, 10)])
def test_ctm_index_out_of_range(color, kind):
    with pytest.raises(IndexError):
        ctm(t64(np.zeros((1, 12))), t64(np.zeros((1, 10))), [color], [kind])


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_ctm_open_range(seed):
    r = rng_(seed)
    v = ctm(rand(r, 5, 12, scale=3), rand(r, 5, 10, scale=3), r.integers(0, 12, 5), r.integers(0, 10, 5)).data
    assert np.all((v > 0) & (v < 2))


def perfect_inputs():
    b = box()
    x, y = np.array([[1.0, 2.0, 3.0]]), np.array([[3.0, -1.0, 0.5]])
    logits = ClassLogits(one_hot_logits([2], 12), one_hot_logits([5], 10), one_hot_logits([2], 12),
                         one_hot_logits([5], 10))
    return b, bundle_from(x, x, y, y), logits


def test_perfect_match_probability_is_four():
    b, bundle, logits = perfect_inputs()
    (score,) = match_probability(t64(b), b, bundle, logits)
    assert score.mpr == 1.0
    assert abs(score.ctm - 2) < 1e-6
    assert score.prob == pytest.approx(4.0, abs=1e-6)


def test_combine_zero_linear_and_monotone():
    assert combine(0.0, 0.0, 0.0) == 0.0
    assert combine(1.0, 2.0, 2.0, 0.5) == 4.0
    r = rng_(0)
    for _ in range(200):
        m, s, c = r.uniform(0, 1), r.uniform(-2, 2), r.uniform(0, 2)
        d = r.uniform(1e-6, 0.5)
        base = combine(m, s, c)
        assert combine(m + d, s, c) - base == pytest.approx(d, abs=1e-12)
        assert combine(m, s + d, c) - base == pytest.approx(d, abs=1e-12)
        assert combine(m, s, c + d) - base == pytest.approx(0.5 * d, abs=1e-12)
        assert combine(m + d, s, c) > base and combine(m, s + d, c) > base and combine(m, s, c + d) > base


def loss_inputs(seed=0, n=3):
    r = rng_(seed)
    m = t64(r.uniform(0.05, 0.95, size=(n, 1, 4, 4)))
    b = (r.uniform(size=(n, 1, 4, 4)) < 0.5).astype(float)
    logits = ClassLogits(rand(r, n, 12), rand(r, n, 10), rand(r, n, 12), rand(r, n, 10))
    bundle = bundle_from(*(r.normal(size=(n, 6)) for _ in range(4)))
    future = rand(r, n, 3, 4, 4)
    nxt = r.uniform(size=(n, 3, 4, 4))
    return m, b, logits, r.integers(0, 12, n), r.integers(0, 10, n), bundle, future, nxt


def test_perfect_prediction_losses():
    b, bundle, logits = perfect_inputs()
    nxt = rng_(1).uniform(size=(1, 3, 6, 6))
    _, rep = compute_losses(T.clamp_probability(t64(b)), b, logits, [2], [5], bundle,
                            t64(nxt), nxt)
    assert rep.l_seg < 1e-4
    assert rep.l_fut == 0.0
    assert rep.l_sub == pytest.approx(0.0, abs=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_total_loss_decomposes_exactly(seed):
    m, b, logits, colors, types, bundle, future, nxt = loss_inputs(seed)
    total, rep = compute_losses(m, b, logits, colors, types, bundle, future, nxt)
    assert rep.lambda1 == 0.2 and rep.lambda2 == 0.2
    expected = rep.l_seg + 0.2 * rep.l_cls + rep.l_sub + 0.2 * rep.l_fut
    assert total.item() == pytest.approx(expected, rel=1e-12)
    assert rep.l_total == expected
    assert 0 <= rep.l_sub <= 4 and rep.l_seg >= 0 and rep.l_cls >= 0 and rep.l_fut >= 0


def test_missing_next_frame_contributes_zero():
    m, b, logits, colors, types, bundle, future, nxt = loss_inputs(1, n=2)
    _, rep = compute_losses(m, b, logits, colors, types, bundle, future, nxt, has_next=[True, False])
    per = ((future.data - nxt) ** 2).reshape(2, -1).mean(axis=1)
    assert rep.l_fut == pytest.approx(per[0] / 2, rel=1e-12)
    assert rep.missing_next == 1


def test_literal_variants_differ_from_corrected():
    args = loss_inputs(2)
    _, corrected = compute_losses(*args)
    _, sub_lit = compute_losses(*args, sub_loss="paper_literal")
    _, seg_lit = compute_losses(*args, seg_loss="paper_literal")
    assert sub_lit.l_sub != corrected.l_sub
    assert seg_lit.l_seg < corrected.l_seg


def test_substitution_targets_receive_no_gradient():
    m, b, logits, colors, types, _, future, nxt = loss_inputs(3)
    r = rng_(9)
    parts = [t64(r.normal(size=(3, 6)), requires_grad=True) for _ in range(4)]
    bundle = SubstitutionBundle(*parts)
    total, _ = compute_losses(m, b, logits, colors, types, bundle, future, nxt)
    T.backward(total)
    assert parts[0].grad is None or not np.any(parts[0].grad)  # fi_gt
    assert parts[1].grad is None or not np.any(parts[1].grad)  # fn_gt
    assert np.any(parts[2].grad) and np.any(parts[3].grad)


def test_unknown_attribute_rows_skip_classification():
    m, b, logits, colors, types, bundle, future, nxt = loss_inputs(4)
    _, full = compute_losses(m, b, logits, colors, types, bundle, future, nxt)
    _, none = compute_losses(m, b, logits, np.full(3, -1), np.full(3, -1), bundle, future, nxt)
    assert none.l_cls == 0.0 and full.l_cls > 0


# ---------------------------------------------------------------- full network


def test_network_forward_shapes():
    net = RetrievalNet(DESK, seed=0)
    vocab = Vocab.build(["a red sedan turns left"])
    tok = tokenize_batch(["a red sedan turns left", "a sedan"], vocab, DESK.l)
    out = net(tok.ids, tok.attention_mask, rng_().uniform(size=(2, 3, 96, 96)).astype(np.float32),
              np.ones((2, 1, 12, 12), dtype=np.float32))
    assert out.mask.shape == (2, 1, 12, 12)
    assert out.attention.shape == (2, 16, 144)
    assert out.future.shape == (2, 3, 12, 12)
    assert out.logits.c_i.shape == (2, 12) and out.logits.t_n.shape == (2, 10)
