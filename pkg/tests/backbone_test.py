import numpy as np
import pytest

from core.config import ActivationEnum, ModelConfig
from core.libs.exceptions import EngineError, ErrorCode
from core.models.backbone import ModelState, forward_dense, mlp_layer, moe_mix, moe_route, param_shapes
from core.models.kv_cache import KVCache
from core.tensor import Tensor
from tests import three_expert_params


def test_zero_parameters_give_zero_logits(tiny_config):
    state = ModelState.zeros(tiny_config)

    logits = forward_dense(state, [1, 2, 3])

    assert logits.shape == [3, 256]
    assert not logits.data.any()


def test_forward_is_deterministic(tiny_state, tokens):
    first = forward_dense(tiny_state, tokens)
    second = forward_dense(ModelState.init(tiny_state.config, seed=0), tokens)

    assert np.array_equal(first.data, second.data)


def test_forward_is_causal(tiny_state, tokens):
    changed = tokens.copy()
    changed[6:] = (changed[6:] + 1) % 256

    a = forward_dense(tiny_state, tokens).data
    b = forward_dense(tiny_state, changed).data

    assert np.allclose(a[:6], b[:6], atol=1e-5)
    assert not np.allclose(a[6:], b[6:])


def test_pinned_logits_of_hand_set_weights():
    """One layer, d=4: uniform attention (zero queries and keys) copying the
    normalised inputs, a silent MLP and an identity head."""
    config = ModelConfig(vocab_size=8, d_model=4, n_layers=1, n_heads=1, head_dim=4, mlp_hidden=8, max_seq_len=8)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith('norm.weight'):
            params[name] = Tensor(np.ones(shape), name=name)
        elif name.endswith('.wv') or name.endswith('.wo'):
            params[name] = Tensor(np.eye(4), name=name)
        elif name in ('embed.weight', 'lm_head.weight'):
            params[name] = Tensor(np.eye(*shape), name=name)
        else:
            params[name] = Tensor(np.zeros(shape), name=name)

    logits = forward_dense(ModelState(config, params), [0, 1]).data

    expected = np.zeros((2, 8))
    expected[0, 0] = 2.0
    expected[1, :2] = [2.0 / np.sqrt(5.0), 4.0 / np.sqrt(5.0)]
    assert np.allclose(logits, expected, rtol=1e-5, atol=1e-5)


def test_cached_decoding_matches_full_forward(tiny_state, tokens):
    full = forward_dense(tiny_state, tokens).data
    cache = KVCache(tiny_state.config)
    rows = [forward_dense(tiny_state, tokens[:5], cache).data]
    for token in tokens[5:]:
        rows.append(forward_dense(tiny_state, [token], cache).data)

    assert cache.length == len(tokens)
    assert np.allclose(np.concatenate(rows), full, atol=1e-5)


def test_cache_bytes(tiny_state, tokens):
    cache = KVCache(tiny_state.config)
    forward_dense(tiny_state, tokens, cache)

    assert cache.nbytes() == 4 * 2 * 2 * len(tokens) * 8 * 4


def test_sequence_longer_than_max_seq_len(tiny_state):
    with pytest.raises(EngineError) as err:
        forward_dense(tiny_state, np.zeros(33, dtype=int))

    assert err.value.error_code == ErrorCode.CAPACITY


def test_cache_overflow(tiny_state):
    cache = KVCache(tiny_state.config)
    forward_dense(tiny_state, np.zeros(30, dtype=int), cache)

    with pytest.raises(EngineError) as err:
        forward_dense(tiny_state, np.zeros(3, dtype=int), cache)

    assert err.value.error_code == ErrorCode.CAPACITY


def test_token_out_of_vocab(tiny_state):
    with pytest.raises(EngineError) as err:
        forward_dense(tiny_state, [1, 300])

    assert err.value.error_code == ErrorCode.INDEX


def test_parameter_count_matches_config(tiny_state, moe_state):
    assert tiny_state.n_params() == tiny_state.config.n_params()
    assert moe_state.n_params() == moe_state.config.n_params()


def test_gelu_backbone_runs():
    config = ModelConfig(vocab_size=256, d_model=16, n_layers=2, n_heads=2, head_dim=8, mlp_hidden=32,
                         max_seq_len=16, activation=ActivationEnum.GELU)
    state = ModelState.init(config, seed=1)

    assert 'layers.0.mlp.w_gate' not in state
    assert np.isfinite(forward_dense(state, [5, 6, 7]).data).all()


def test_invalid_head_split():
    with pytest.raises(EngineError) as err:
        ModelState.init(ModelConfig(d_model=30, n_heads=4, head_dim=8))

    assert err.value.error_code == ErrorCode.CONFIG


def test_backbone_is_frozen(tiny_state):
    for name in tiny_state.names():
        assert tiny_state.trainable(name) is False
        assert tiny_state[name].data.flags.writeable is False


def test_moe_top2_selection_and_weights():
    params = three_expert_params()
    h = Tensor([[1.0, 0.0]])

    probs, weights, topk = moe_route(h, params)
    out = moe_mix(h, params)

    assert topk.tolist() == [[0, 1]]
    assert np.allclose(weights.data[0, :2], [0.6652, 0.2447], atol=1e-4)
    expected = sum(probs.data[0, e] * mlp_layer(h, params.experts[e]).data for e in (0, 1))
    assert np.allclose(out.data, expected, atol=1e-6)


def test_moe_k_equal_n_uses_every_expert():
    params = three_expert_params(top_k=3)
    h = Tensor([[1.0, 0.0], [0.5, -1.0]])

    probs, _, _ = moe_route(h, params)
    out = moe_mix(h, params)

    expected = sum(probs.data[:, e:e + 1] * mlp_layer(h, params.experts[e]).data for e in range(3))
    assert np.allclose(out.data, expected, atol=1e-6)


def test_moe_renormalized_weights():
    params = three_expert_params(renormalize=True)

    _, weights, _ = moe_route(Tensor([[1.0, 0.0]]), params)

    assert weights.data[0, 0] + weights.data[0, 1] == pytest.approx(1.0, abs=1e-6)
    assert weights.data[0, 0] == pytest.approx(0.6652 / (0.6652 + 0.2447), abs=1e-3)


def test_moe_backbone_forward(moe_state, tokens):
    logits = forward_dense(moe_state, tokens)

    assert logits.shape == [len(tokens), 256]
    assert np.isfinite(logits.data).all()
