import numpy as np
import pytest

from nalab.attention import (
    PRESETS,
    AttentionConfig,
    LinearProjection,
    MaskError,
    MlpProjection,
    MultiHeadAttention,
    make_projection,
    parameter_count,
    project,
    scaled_dot_product_attention,
)
from nalab.gradcheck import check_gradients
from nalab.rng import Rng
from nalab.tensor import Tensor, mul, sum_all


def t(data, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype))


def frozen_mlp_weights(dtype=np.float64):
    """Small deterministic weight set for the d_model=4, h=8 projection oracle."""
    d, h = 4, 8
    W1 = np.array([[((i * 8 + j) % 5 - 2) / 4 for j in range(h)] for i in range(d)], dtype=dtype)
    b1 = np.array([(j % 3 - 1) / 8 for j in range(h)], dtype=dtype)
    W2 = np.array([[((i * 4 + j) % 7 - 3) / 6 for j in range(d)] for i in range(h)], dtype=dtype)
    b2 = np.array([0.1, -0.2, 0.3, 0.0], dtype=dtype)
    return W1, b1, W2, b2


def install_frozen_weights(proj, dtype=np.float64):
    W1, b1, W2, b2 = frozen_mlp_weights(dtype)
    proj.W1.data, proj.b1.data = W1, b1
    proj.W2.data, proj.b2.data = W2, b2
    proj.ln_gamma.data = np.full(8, 1.1, dtype=dtype)
    proj.ln_beta.data = np.full(8, -0.05, dtype=dtype)


# --- projections -------------------------------------------------------------

def test_standard_projection_identity_weights():
    proj = LinearProjection(3, Rng(0))
    proj.W.data = np.eye(3, dtype=np.float32)
    proj.b.data = np.zeros(3, dtype=np.float32)
    x = t([[1.0, -2.0, 0.5], [0.0, 4.0, 1.0]])
    assert np.array_equal(project(proj, x).data, x.data)


def test_neural_projection_zero_w2_outputs_b2():
    proj = MlpProjection(4, Rng(1), use_relu=True)
    proj.W2.data = np.zeros_like(proj.W2.data)
    proj.b2.data = np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32)
    out = project(proj, t(np.random.default_rng(0).standard_normal((5, 4)))).data
    assert np.allclose(out, np.tile([1.0, 2.0, 3.0, 4.0], (5, 1)))


def test_neural_projection_single_row_oracle():
    # frozen from a 50-digit step-by-step evaluation through LayerNorm and ReLU
    proj = MlpProjection(4, Rng(0), use_relu=True, dtype=np.float64)
    install_frozen_weights(proj)
    x = t([[0.5, -1.0, 0.25, 2.0]], dtype=np.float64)
    expected = [0.06973609646656785, -0.6225931624607213, -0.24781402654759553, 0.025438894746706193]
    assert np.abs(project(proj, x).data[0] - expected).max() < 1e-10


def test_dlp_projection_single_row_oracle():
    proj = MlpProjection(4, Rng(0), use_relu=False, dtype=np.float64)
    install_frozen_weights(proj)
    x = t([[0.5, -1.0, 0.25, 2.0]], dtype=np.float64)
    expected = [-0.23750425014056325, -1.5697530970288208, -1.8348935490766634, -0.05087778949341239]
    assert np.abs(project(proj, x).data[0] - expected).max() < 1e-10


def test_dlp_and_neural_differ_when_relu_clips():
    dlp = MlpProjection(4, Rng(3), use_relu=False, dtype=np.float64)
    neural = MlpProjection(4, Rng(3), use_relu=True, dtype=np.float64)
    x = t(np.random.default_rng(2).standard_normal((6, 4)), dtype=np.float64)
    assert not np.allclose(project(dlp, x).data, project(neural, x).data)


def test_dlp_equals_neural_on_positive_preactivations():
    # LayerNorm output is gamma*xhat+beta; with |xhat| <= sqrt(h) a large
    # positive beta keeps every pre-activation positive, so ReLU is identity
    # and the two kinds must agree bit for bit.
    dlp = MlpProjection(4, Rng(5), use_relu=False)
    neural = MlpProjection(4, Rng(5), use_relu=True)
    for proj in (dlp, neural):
        proj.ln_gamma.data = np.full(8, 0.05, dtype=np.float32)
        proj.ln_beta.data = np.full(8, 1.0, dtype=np.float32)
    for name in ("W1", "b1", "W2", "b2"):
        setattr(neural, name, getattr(dlp, name))
    x = t(np.random.default_rng(3).standard_normal((7, 4)))
    a = project(dlp, x).data
    b = project(neural, x).data
    assert a.tobytes() == b.tobytes()


# --- scaled dot-product attention --------------------------------------------

def test_attention_zero_queries_average_values():
    v = np.array([[1.0, 2.0], [3.0, 6.0], [5.0, 1.0]], dtype=np.float32)
    out = scaled_dot_product_attention(t(np.zeros((2, 4))), t(np.zeros((3, 4))), Tensor(v))
    assert np.allclose(out.data, np.tile(v.mean(axis=0), (2, 1)), atol=1e-6)


def test_attention_singleton():
    out = scaled_dot_product_attention(t([[1.0]]), t([[1.0]]), t([[1.0]]))
    assert np.allclose(out.data, [[1.0]])


def test_attention_2x2_hand_computed():
    # frozen from a 50-digit evaluation: w = softmax([1/sqrt(2), 0]) etc.
    q = t([[1.0, 0.0], [0.0, 1.0]], dtype=np.float64)
    k = t([[1.0, 0.0], [0.0, 1.0]], dtype=np.float64)
    v = t([[1.0, 2.0], [3.0, 4.0]], dtype=np.float64)
    out = scaled_dot_product_attention(q, k, v).data
    expected = [[1.6604769013466861, 2.6604769013466861],
                [2.3395230986533139, 3.3395230986533139]]
    assert np.abs(out - expected).max() < 1e-12


def test_attention_fully_masked_row_is_error():
    mask = np.array([[True, True], [False, False]])
    with pytest.raises(MaskError):
        scaled_dot_product_attention(t(np.zeros((2, 2))), t(np.zeros((2, 2))),
                                     t(np.ones((2, 2))), mask=mask)


def test_attention_mask_restricts_to_allowed_rows():
    v = np.array([[10.0, 0.0], [0.0, 10.0]], dtype=np.float32)
    mask = np.array([[True, False], [True, True]])
    out = scaled_dot_product_attention(t(np.zeros((2, 3))), t(np.zeros((2, 3))),
                                       Tensor(v), mask=mask)
    assert np.allclose(out.data[0], [10.0, 0.0], atol=1e-5)
    assert np.allclose(out.data[1], [5.0, 5.0], atol=1e-5)


def test_attention_rows_are_convex_combinations():
    rng = np.random.default_rng(7)
    for _ in range(10):
        q = Tensor(rng.standard_normal((5, 8)).astype(np.float32) * 3)
        k = Tensor(rng.standard_normal((6, 8)).astype(np.float32) * 3)
        v = Tensor(rng.uniform(-2.0, 5.0, (6, 4)).astype(np.float32))
        out = scaled_dot_product_attention(q, k, v).data
        assert out.min() >= v.data.min() - 1e-5
        assert out.max() <= v.data.max() + 1e-5


# --- multi-head composition ----------------------------------------------------

def test_single_head_reduces_to_projection_attention_wo():
    cfg = AttentionConfig(d_model=6, num_heads=1)
    mha = MultiHeadAttention(cfg, Rng(11))
    x = t(np.random.default_rng(4).standard_normal((4, 6)))
    manual = scaled_dot_product_attention(
        project(mha.q_proj, x), project(mha.k_proj, x), project(mha.v_proj, x)
    )
    manual = (manual @ mha.W_o) + mha.b_o
    assert np.allclose(mha(x, x).data, manual.data, atol=1e-6)


def test_zero_query_identity_values_averages_rows():
    cfg = AttentionConfig(d_model=3, num_heads=1)
    mha = MultiHeadAttention(cfg, Rng(0))
    mha.q_proj.W.data = np.zeros((3, 3), dtype=np.float32)
    mha.q_proj.b.data = np.zeros(3, dtype=np.float32)
    for proj in (mha.k_proj, mha.v_proj):
        proj.W.data = np.eye(3, dtype=np.float32)
        proj.b.data = np.zeros(3, dtype=np.float32)
    mha.W_o.data = np.eye(3, dtype=np.float32)
    mha.b_o.data = np.zeros(3, dtype=np.float32)
    x = np.array([[1.0, 2.0, 3.0], [5.0, 4.0, 0.0]], dtype=np.float32)
    out = mha(Tensor(x), Tensor(x)).data
    assert np.allclose(out, np.tile(x.mean(axis=0), (2, 1)), atol=1e-6)


def test_causal_mask_blocks_future_influence():
    cfg = AttentionConfig(d_model=8, num_heads=2, causal=True)
    mha = MultiHeadAttention(cfg, Rng(21))
    rng = np.random.default_rng(5)
    x = rng.standard_normal((6, 8)).astype(np.float32)
    y = x.copy()
    y[4:] += rng.standard_normal((2, 8)).astype(np.float32)  # perturb the future
    out_x = mha(Tensor(x), Tensor(x)).data
    out_y = mha(Tensor(y), Tensor(y)).data
    assert out_x[:4].tobytes() == out_y[:4].tobytes()  # bit-identical prefix
    assert not np.array_equal(out_x[4:], out_y[4:])


def test_permutation_equivariance_no_mask():
    # alike up to reduction rounding: permuting rows permutes the summands in
    # each row's softmax denominator, so results match to a few ulps, not bits
    cfg = AttentionConfig(d_model=16, num_heads=4)
    mha = MultiHeadAttention(cfg, Rng(31))
    rng = np.random.default_rng(6)
    x = rng.standard_normal((7, 16)).astype(np.float32)
    perm = rng.permutation(7)
    out = mha(Tensor(x), Tensor(x)).data
    out_perm = mha(Tensor(x[perm]), Tensor(x[perm])).data
    assert np.abs(out[perm] - out_perm).max() < 1e-6


@pytest.mark.parametrize("preset", ["standard", "dlp", "neural"])
def test_gradcheck_full_attention_block(preset):
    cfg = AttentionConfig.from_preset(preset, d_model=8, num_heads=2)
    mha = MultiHeadAttention(cfg, Rng(100), dtype=np.float64)
    rng = np.random.default_rng(8)
    x_q = Tensor(rng.standard_normal((5, 8)), dtype=np.float64, requires_grad=True)
    x_kv = Tensor(rng.standard_normal((5, 8)), dtype=np.float64, requires_grad=True)
    weight = Tensor(rng.standard_normal((5, 8)), dtype=np.float64)

    tensors = {"x_q": x_q, "x_kv": x_kv}
    tensors.update(dict(mha.named_parameters("mha")))

    report = check_gradients(
        lambda: sum_all(mul(mha(x_q, x_kv), weight)), tensors, max_coords=8
    )
    assert report.passed, [(r.name, r.max_rel_error) for r in report.worst()]


# --- parameter counting ---------------------------------------------------------

def test_parameter_count_standard_512():
    cfg = AttentionConfig(d_model=512, num_heads=8)
    assert parameter_count(cfg) == 1_050_624  # 4 * (512^2 + 512)


def test_parameter_count_neural_role_512():
    base = AttentionConfig(d_model=512, num_heads=8)
    with_neural_v = AttentionConfig(d_model=512, num_heads=8, v_kind="neural")
    # swapping one role from standard to neural at h=1024 adds the difference
    # between 1,052,160 (mlp role) and 262,656 (linear role)
    assert parameter_count(with_neural_v) - parameter_count(base) == 1_052_160 - 262_656


def test_parameter_count_tiny_standard():
    cfg = AttentionConfig(d_model=4, num_heads=2)
    assert parameter_count(cfg) == 80


def test_parameter_count_matches_enumeration():
    rng = Rng(2024)
    kinds = ["standard", "dlp", "neural"]
    for _ in range(10):
        d_model = [4, 8, 16, 32][rng.randint(4)]
        heads = [1, 2, 4][rng.randint(3)]
        cfg = AttentionConfig(
            d_model=d_model,
            num_heads=heads,
            q_kind=kinds[rng.randint(3)],
            k_kind=kinds[rng.randint(3)],
            v_kind=kinds[rng.randint(3)],
            expansion=1 + rng.randint(3),
            use_bias=rng.randint(2) == 0,
        )
        mha = MultiHeadAttention(cfg, Rng(rng.next_u64()))
        enumerated = sum(p.data.size for _, p in mha.named_parameters("a"))
        assert enumerated == parameter_count(cfg)


# --- presets & config validation -------------------------------------------------

def test_preset_role_assignments():
    assert PRESETS["standard"] == ("standard", "standard", "standard")
    assert PRESETS["dlp"] == ("standard", "dlp", "dlp")
    assert PRESETS["neural"] == ("standard", "neural", "neural")
    assert PRESETS["neural-qkv"] == ("neural", "neural", "neural")


def test_from_preset_builds_config():
    cfg = AttentionConfig.from_preset("dlp", d_model=8, num_heads=2)
    assert (cfg.q_kind, cfg.k_kind, cfg.v_kind) == ("standard", "dlp", "dlp")
    with pytest.raises(ValueError):
        AttentionConfig.from_preset("nonsense", d_model=8, num_heads=2)


def test_config_validates_heads_divide_model():
    with pytest.raises(ValueError):
        AttentionConfig(d_model=10, num_heads=3)


def test_config_rejects_unknown_kind():
    with pytest.raises(ValueError):
        AttentionConfig(d_model=8, num_heads=2, q_kind="mlp")


def test_make_projection_expansion_default_two():
    cfg = AttentionConfig(d_model=4, num_heads=2)
    proj = make_projection("neural", 4, Rng(0), cfg)
    assert proj.W1.shape == (4, 8)
