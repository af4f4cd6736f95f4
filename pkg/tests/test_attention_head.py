import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tandemnet import ops
from tandemnet.attention import DualAttention, attend, attend_image_only, zeros_like_text
from tandemnet.errors import ConfigError, DimensionError
from tandemnet.gradcheck import grad_check
from tandemnet.head import ModalityPolicy, PredictionHead, apply_modality_policy, drop_mask, predict, to_prediction
from tandemnet.model import Batch, TandemNet
from tandemnet.tensor import Tensor, fresh_tape

from conftest import tiny_model_config


def random_attention(seed: int, C: int = 3, G: int = 4, N: int = 2, scale: float = 1.0):
    rng = np.random.default_rng(seed)
    att = DualAttention(C, C, C, rng)
    for p in att.parameters():
        p.data[:] = rng.normal(scale=scale, size=p.shape)
    V = Tensor(rng.normal(size=(C, G)))
    S = Tensor(rng.normal(size=(C, N)))
    return att, V, S


def straight_line_attend(V, S, W_v, W_v2, W_s, W_s2, w, b):
    """Plain-loop evaluation of the two conditioned projections, scores, softmax and context."""
    M, G = W_v.shape[0], V.shape[1]
    N = S.shape[1]
    C = V.shape[0]
    s_bar = [sum(S[d][n] for n in range(N)) / N for d in range(S.shape[0])]
    v_bar = [sum(V[c][g] for g in range(G)) / G for c in range(C)]
    scores = []
    for g in range(G):
        z = [np.tanh(sum(W_v[m][c] * V[c][g] for c in range(C)) + sum(W_s2[m][d] * s_bar[d] for d in range(len(s_bar))))
             for m in range(M)]
        scores.append(sum(w[m] * z[m] for m in range(M)) + b)
    for n in range(N):
        z = [np.tanh(sum(W_s[m][d] * S[d][n] for d in range(S.shape[0])) + sum(W_v2[m][c] * v_bar[c] for c in range(C)))
             for m in range(M)]
        scores.append(sum(w[m] * z[m] for m in range(M)) + b)
    top = max(scores)
    ex = [np.exp(s - top) for s in scores]
    total = sum(ex)
    alpha = [x / total for x in ex]
    cols = [V[:, g] for g in range(G)] + [S[:, n] for n in range(N)]
    context = [sum(alpha[k] * cols[k][i] for k in range(G + N)) for i in range(C)]
    return np.array(alpha), np.array(context)


def test_matches_straight_line_oracle():
    # G=2, N=1, M=C=D=2, small hand-fixed weights
    att = DualAttention(2, 2, 2, np.random.default_rng(0))
    att.W_v.data[:] = [[0.3, -0.2], [0.1, 0.4]]
    att.W_v2.data[:] = [[-0.5, 0.2], [0.25, 0.1]]
    att.W_s.data[:] = [[0.2, 0.7], [-0.3, 0.05]]
    att.W_s2.data[:] = [[0.15, -0.1], [0.6, -0.4]]
    att.w.data[:] = [[1.2, -0.8]]
    att.b.data[:] = [0.05]
    V = np.array([[0.5, -1.0], [0.25, 2.0]])
    S = np.array([[1.5], [-0.75]])
    res = att.attend(Tensor(V), Tensor(S))
    alpha, context = straight_line_attend(V, S, att.W_v.data, att.W_v2.data, att.W_s.data, att.W_s2.data,
                                          att.w.data[0], att.b.data[0])
    np.testing.assert_allclose(res.alpha.data, alpha, rtol=0, atol=1e-10)
    np.testing.assert_allclose(res.context.data, context, rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_random_instances_match_oracle(seed):
    att, V, S = random_attention(seed, C=3, G=4, N=2)
    res = attend(V, S, att)
    alpha, context = straight_line_attend(V.data, S.data, att.W_v.data, att.W_v2.data, att.W_s.data,
                                          att.W_s2.data, att.w.data[0], att.b.data[0])
    np.testing.assert_allclose(res.alpha.data, alpha, rtol=0, atol=1e-10)
    np.testing.assert_allclose(res.context.data, context, rtol=0, atol=1e-10)


def test_symmetric_inputs_give_uniform_alpha():
    att, _, _ = random_attention(0, C=3)
    att.W_v.data[:] = att.W_s.data
    att.W_v2.data[:] = att.W_s2.data
    V = Tensor(np.tile([[0.3], [-0.1], [0.7]], (1, 4)))
    S = Tensor(np.tile([[0.3], [-0.1], [0.7]], (1, 2)))
    np.testing.assert_allclose(att.attend(V, S).alpha.data, np.full(6, 1 / 6), rtol=1e-12)


def test_full_scale_shapes():
    rng = np.random.default_rng(0)
    att = DualAttention(256, 256, 256, rng)
    res = att.attend(Tensor(rng.normal(size=(256, 196))), Tensor(rng.normal(size=(256, 5))))
    assert res.alpha.shape == (201,)
    assert res.context.shape == (256,)


def test_dimension_contract():
    with pytest.raises(ConfigError):
        DualAttention(4, 4, 3, np.random.default_rng(0))
    att = DualAttention(3, 3, 3, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        att.attend(Tensor(np.zeros((4, 2))), Tensor(np.zeros((3, 1))))


def test_normalisation_over_100_seeds():
    for seed in range(100):
        att, V, S = random_attention(seed, scale=2.0)
        assert abs(att.attend(V, S).alpha.data.sum() - 1.0) < 1e-6


def test_scalar_bias_is_a_no_op():
    rng = np.random.default_rng(7)
    cfg = tiny_model_config()
    model = TandemNet(cfg, rng).eval()
    batch = Batch(rng.normal(size=(2, 3, 4, 4)), np.array([0, 1]), np.array([[3, 5, 2, 6, 2, 4]] * 2),
                  np.array([[2, 4]] * 2))
    policy = ModalityPolicy(0.5, "eval", True)
    for seed in range(20):
        before = model.forward(batch, policy)
        model.attention.b.data[:] = np.random.default_rng(seed).normal(scale=10.0)
        after = model.forward(batch, policy)
        np.testing.assert_allclose(after.attention.alpha.data, before.attention.alpha.data, rtol=0, atol=1e-9)
        np.testing.assert_allclose(after.attention.context.data, before.attention.context.data, rtol=0, atol=1e-9)
        np.testing.assert_allclose(after.logits.data, before.logits.data, rtol=0, atol=1e-9)


def test_context_identity_100_instances():
    for seed in range(100):
        att, V, S = random_attention(seed, C=3, G=4, N=2)
        res = att.attend(V, S)
        O = np.concatenate([V.data, S.data], axis=1)
        assert np.abs(res.context.data - O @ res.alpha.data).max() < 1e-9


def test_text_perturbation_moves_image_weights():
    att, V, S = random_attention(3)
    base = att.attend(V, S).alpha.data[:4]
    S2 = S.data.copy()
    S2[:, 1] += 0.5
    moved = att.attend(V, Tensor(S2)).alpha.data[:4]
    assert np.abs(moved - base).max() > 0


def test_image_only_path():
    att, V, _ = random_attention(4)
    res = attend_image_only(V, att, 2)
    # with S = 0 the text conditioning term vanishes
    np.testing.assert_allclose(res.z_sv.data, np.tanh(att.W_v.data @ V.data), rtol=0, atol=1e-15)
    assert abs(res.alpha.data.sum() - 1.0) < 1e-6
    ref = att.attend(V, Tensor(np.zeros((3, 2))))
    assert np.array_equal(res.alpha.data, ref.alpha.data)
    assert np.array_equal(res.context.data, ref.context.data)
    assert zeros_like_text(2, 3, 2).shape == (2, 3, 2)


def test_batched_equals_unbatched():
    rng = np.random.default_rng(5)
    att = DualAttention(3, 3, 3, rng)
    V, S = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 2))
    batched = att.attend(Tensor(V), Tensor(S))
    for i in range(2):
        single = att.attend(Tensor(V[i]), Tensor(S[i]))
        np.testing.assert_allclose(batched.alpha.data[i], single.alpha.data, rtol=0, atol=1e-15)


def test_attend_gradient():
    att, V, S = random_attention(6, C=3, G=4, N=2, scale=0.5)
    V.requires_grad = S.requires_grad = True
    weights = Tensor(np.random.default_rng(1).normal(size=3))
    f = lambda: ops.sum(ops.mul(att.attend(V, S).context, weights))  # noqa: E731
    assert grad_check(f, [V, S] + att.parameters()) < 1e-4


def test_embedding_behaviour():
    rng = np.random.default_rng(0)
    att = DualAttention(3, 3, 3, rng)
    for p in att.parameters():
        p.data[:] = 0.0
    V_raw, S_raw = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 2)))
    V, S = att.embed_inputs(V_raw, S_raw)
    assert not V.data.any() and not S.data.any()
    att.embed_v.data[:] = np.eye(3)
    att.embed_s.data[:] = np.eye(3)
    V, S = att.embed_inputs(V_raw, S_raw)
    np.testing.assert_array_equal(V.data, np.tanh(V_raw.data))
    np.testing.assert_array_equal(S.data, np.tanh(S_raw.data))


def test_embedding_gradient():
    # C=3, G=4, D=3, N=2
    att, _, _ = random_attention(8, C=3, scale=0.5)
    rng = np.random.default_rng(2)
    V_raw, S_raw = Tensor(rng.normal(size=(3, 4)), requires_grad=True), Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    weights = Tensor(rng.normal(size=3))
    f = lambda: ops.sum(ops.mul(att(V_raw, S_raw).context, weights))  # noqa: E731
    assert grad_check(f, [V_raw, S_raw, att.embed_v, att.embed_v_bias, att.embed_s]) < 1e-4


# ---------------------------------------------------------------------------
# modality policy


def test_policy_validation():
    with pytest.raises(ConfigError):
        ModalityPolicy(1.0)
    with pytest.raises(ConfigError):
        ModalityPolicy(-0.1)
    with pytest.raises(ConfigError):
        ModalityPolicy(0.5, mode="test")


def test_zero_rate_in_training_passes_text():
    S = Tensor(np.ones((3, 4, 2)))
    assert apply_modality_policy(S, ModalityPolicy(0.0, "train"), np.random.default_rng(0)) is S


def test_eval_with_text_halves_exactly():
    S = np.random.default_rng(0).normal(size=(3, 4, 2))
    out = apply_modality_policy(Tensor(S), ModalityPolicy(0.5, "eval", True))
    assert np.array_equal(out.data, S / 2)


def test_eval_without_text_is_zero():
    out = apply_modality_policy(Tensor(np.ones((4, 2))), ModalityPolicy(0.5, "eval", False))
    assert not out.data.any()


def test_train_drop_fraction_monte_carlo():
    rng = np.random.default_rng(11)
    mask = drop_mask(100_000, ModalityPolicy(0.5, "train"), rng)
    assert set(np.unique(mask)) <= {0.0, 1.0}
    assert 0.48 <= 1 - mask.mean() <= 0.52


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.95), st.integers(0, 2 ** 31))
def test_train_mask_zeroes_whole_samples(r, seed):
    S = np.random.default_rng(seed).normal(size=(6, 3, 2)) + 5.0
    out = apply_modality_policy(Tensor(S), ModalityPolicy(r, "train"), np.random.default_rng(seed)).data
    for i in range(6):
        assert np.array_equal(out[i], S[i]) or not out[i].any()


# ---------------------------------------------------------------------------
# prediction head


def test_head_output_and_probabilities():
    rng = np.random.default_rng(0)
    head = PredictionHead(4, 4, rng)
    pred = predict(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4, 5))), head)
    assert pred.logits.shape == (3, 4)
    np.testing.assert_allclose(pred.probabilities.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(pred.probabilities > 0)
    assert np.array_equal(pred.predicted_class, pred.probabilities.argmax(axis=1))
    single = to_prediction(head(Tensor(rng.normal(size=4)), Tensor(rng.normal(size=(4, 5)))))
    assert isinstance(single.predicted_class, int)


def test_zero_context_prediction_comes_from_pooled_image():
    rng = np.random.default_rng(1)
    head = PredictionHead(4, 4, rng)
    V = rng.normal(size=(2, 4, 5))
    logits = head(Tensor(np.zeros((2, 4))), Tensor(V)).data
    np.testing.assert_allclose(logits, head.mlp(Tensor(V.mean(axis=2))).data, rtol=0, atol=1e-15)


def test_head_requires_matching_dims():
    with pytest.raises(ConfigError):
        PredictionHead(4, 3, np.random.default_rng(0))


def _tiny_batch(rng):
    return Batch(rng.normal(size=(2, 3, 4, 4)), np.array([1, 3]), np.array([[3, 5, 6, 2, 7, 2, 4], [3, 8, 2, 9, 10, 2, 4]]),
                 np.array([[3, 5], [2, 5]]))


def test_skip_path_carries_gradient_with_context_detached():
    rng = np.random.default_rng(2)
    model = TandemNet(tiny_model_config(), rng)
    batch = _tiny_batch(rng)
    model.zero_grad()
    with fresh_tape() as tape:
        out = model.forward(batch, ModalityPolicy(0.5, "train"), np.random.default_rng(0), detach_context=True)
        tape.backward(ops.cross_entropy(out.logits, batch.labels))
    assert np.sqrt(sum((p.grad ** 2).sum() for p in model.encoder.parameters())) > 0
    assert not any(p.grad.any() for p in model.attention.parameters())


def test_skip_path_with_zeroed_attention_parameters():
    rng = np.random.default_rng(3)
    model = TandemNet(tiny_model_config(), rng)
    for p in model.attention.parameters():
        p.data[:] = 0.0
    batch = _tiny_batch(rng)
    model.zero_grad()
    with fresh_tape() as tape:
        out = model.forward(batch, ModalityPolicy(0.5, "train"), np.random.default_rng(0))
        tape.backward(ops.cross_entropy(out.logits, batch.labels))
    assert np.sqrt(sum((p.grad ** 2).sum() for p in model.encoder.parameters())) > 0


def test_eval_without_text_equals_image_only_attention():
    rng = np.random.default_rng(4)
    model = TandemNet(tiny_model_config(), rng).eval()
    batch = _tiny_batch(rng)
    out = model.forward(batch, ModalityPolicy(0.5, "eval", False))
    V, _ = model.attention.embed_inputs(out.V_raw, Tensor(np.zeros((2, 4, 2))))
    ref = model.attention.attend_image_only(V, 2)
    assert np.array_equal(out.attention.alpha.data, ref.alpha.data)
    logits = model.head(ref.context, out.V_raw).data
    assert np.array_equal(out.logits.data, logits)
    again = model.forward(batch, ModalityPolicy(0.5, "eval", False))
    assert np.array_equal(again.logits.data, out.logits.data)
