import numpy as np
import pytest

from core.bench.evaluate import train_infer_gap
from core.config import GranularityEnum, ModelConfig, MoEConfig, TargetEnum
from core.libs.exceptions import EngineError, ErrorCode
from core.models.backbone import ModelState, embed, forward_dense
from core.models.kv_cache import KVCache
from core.models.routed import forward_routed, generate
from core.models.router_set import RouterSet
from core.models.routers import (GATE_SOFT, INFER, TRAIN, Decision, MoDLayerPlan, RouterState, SkipMask, binarize,
                                 mod_forward_infer, mod_forward_train, route_score, unit_sort_key)
from core.tensor import FlopCounter, Tape, Tensor, ops, precision
from core.training.data import PAD, Dataset
from tests import numeric_grad, sampled_grad_check

ALL_PLANS = [(target, granularity, causal_prefix)
             for target in TargetEnum
             for granularity in GranularityEnum
             for causal_prefix in (False, True)
             if not (causal_prefix and granularity == GranularityEnum.TOKEN)]


def recording_branch(calls, scale=2.0):
    def branch(x, positions, cache):
        calls.append(np.asarray(positions).tolist())
        return ops.mul(x, scale)
    return branch


def test_zero_router_scores_midpoint():
    x = Tensor(np.random.default_rng(0).normal(size=(5, 16)))
    token = RouterState.zero_init(16, 0, granularity=GranularityEnum.TOKEN)
    sequence = RouterState.zero_init(16, 0)

    assert route_score(token, x).data.reshape(-1).tolist() == [0.5] * 5
    assert route_score(sequence, x).data.reshape(-1).tolist() == [0.5]


def test_sequence_score_of_identical_rows():
    v = np.random.default_rng(1).normal(size=(1, 4))
    router = RouterState(W=Tensor(np.random.default_rng(2).normal(size=(4, 1))), layer_index=0)
    token_router = RouterState(W=router.W, layer_index=0, granularity=GranularityEnum.TOKEN)

    sequence_score = route_score(router, Tensor(np.repeat(v, 6, axis=0))).item()

    assert sequence_score == pytest.approx(route_score(token_router, Tensor(v)).item(), abs=1e-6)


def test_token_score_hand_arithmetic():
    router = RouterState(W=Tensor([[1.0], [-1.0]]), layer_index=0, granularity=GranularityEnum.TOKEN)

    assert route_score(router, Tensor([[2.0, 1.0]])).item() == pytest.approx(0.7311, abs=1e-4)


def test_prefix_score_is_sequence_score_of_each_prefix():
    rng = np.random.default_rng(3)
    W = Tensor(rng.normal(size=(16, 1)))
    x = Tensor(rng.normal(size=(6, 16)))
    prefix = RouterState(W=W, layer_index=0, causal_prefix=True)
    sequence = RouterState(W=W, layer_index=0)

    scores = route_score(prefix, x).data.reshape(-1)

    assert scores.shape == (6,)
    for j in range(6):
        assert scores[j] == pytest.approx(route_score(sequence, Tensor(x.data[:j + 1])).item(), abs=1e-6)


def test_prefix_scores_continue_across_cached_steps(tiny_config):
    rng = np.random.default_rng(4)
    router = RouterState(W=Tensor(rng.normal(size=(16, 1))), layer_index=1, causal_prefix=True)
    x = Tensor(rng.normal(size=(5, 16)))
    cache = KVCache(tiny_config)
    mask = SkipMask()

    mod_forward_infer(router, recording_branch([]), Tensor(x.data[:3]), cache=cache, positions=np.arange(3),
                      collector=mask)
    mod_forward_infer(router, recording_branch([]), Tensor(x.data[3:4]), cache=cache, positions=[3],
                      collector=mask)

    assert cache.pooled['1'][1] == 4
    assert mask.decisions[1].scores[0] == pytest.approx(route_score(router, x).data.reshape(-1)[3], abs=1e-6)


def test_forced_router_costs_nothing():
    router = RouterState.zero_init(16, 2)
    router.forced = False

    with FlopCounter() as counter:
        score = route_score(router, Tensor(np.ones((4, 16))))

    assert score.item() == 0.0
    assert counter.total == 0


def test_binarize():
    assert binarize([0.7, 0.3], tau=0.5).decisions[0].keep.tolist() == [True, False]
    assert binarize([0.5], tau=0.5).decisions[0].keep.tolist() == [True]
    assert binarize([0.0, 0.2, 0.9], tau=0.0).decisions[0].keep.all()


def test_skip_mask_capacity():
    mask = SkipMask()
    mask.add(Decision(unit='10', layer=10, target='attention', granularity='token',
                      keep=np.array([True, False, True, True]), scores=np.zeros(4)))
    mask.add(Decision(unit='2', layer=2, target='attention', granularity='sequence',
                      keep=np.array([False]), scores=np.zeros(1), sequence=1))

    assert mask.capacity() == pytest.approx(3 / 5)
    assert list(mask.unit_capacity()) == ['2', '10']
    assert mask.unit_capacity()['10'] == 0.75
    assert mask.layer_capacity() == {2: 0.0, 10: 0.75}
    assert len(mask.for_sequence(1)) == 1
    assert SkipMask().capacity() == 1.0


def test_unit_sort_key():
    units = ['10.expert.2', '10', '2', '10.expert.10', '9']

    assert sorted(units, key=unit_sort_key) == ['2', '9', '10', '10.expert.2', '10.expert.10']


def test_training_forward_needs_a_tape():
    """
    failure case: the masked training path is called for inference
    """
    router = RouterState.zero_init(4, 0)

    with pytest.raises(EngineError) as err:
        mod_forward_train(router, recording_branch([]), Tensor(np.ones((2, 4))))

    assert err.value.error_code == ErrorCode.STATE


def test_zero_mask_is_identity():
    router = RouterState.zero_init(4, 0)
    router.forced = False
    x = Tensor(np.random.default_rng(5).normal(size=(3, 4)))

    with Tape():
        trained = mod_forward_train(router, recording_branch([]), x)
    calls = []
    inferred = mod_forward_infer(router, recording_branch(calls), x)

    assert np.array_equal(trained.data, x.data)
    assert np.array_equal(inferred.data, x.data)
    assert calls == []


@pytest.mark.parametrize('target,granularity,causal_prefix', ALL_PLANS)
def test_dense_start_is_bitwise_dense(tiny_state, tokens, target, granularity, causal_prefix):
    plan = MoDLayerPlan(layers=[0, 1, 2], target=target, granularity=granularity, causal_prefix=causal_prefix)
    routers = RouterSet.attach(tiny_state.config, plan)
    dense = forward_dense(tiny_state, tokens).data

    inferred = forward_routed(tiny_state, routers, tokens, INFER)
    with Tape():
        trained = forward_routed(tiny_state, routers, tokens, TRAIN)

    assert np.array_equal(inferred.data, dense)
    assert np.array_equal(trained.data, dense)


def test_skipped_attention_layer_has_no_cache(tiny_state, tokens):
    plan = MoDLayerPlan(layers=[1], forced={1: False})
    routers = RouterSet.attach(tiny_state.config, plan)
    dense_cache, routed_cache = KVCache(tiny_state.config), KVCache(tiny_state.config)

    forward_routed(tiny_state, RouterSet(), tokens, INFER, dense_cache)
    forward_routed(tiny_state, routers, tokens, INFER, routed_cache)

    assert dense_cache.present(1)
    assert not routed_cache.present(1)
    assert dense_cache.nbytes() - routed_cache.nbytes() == 2 * 2 * len(tokens) * 8 * 4


def test_token_mask_on_mlp():
    router = RouterState(W=Tensor([[5.0], [-5.0]]), layer_index=0, target=TargetEnum.MLP,
                         granularity=GranularityEnum.TOKEN)
    x = Tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    calls = []
    mask = SkipMask()

    inferred = mod_forward_infer(router, recording_branch(calls), x, collector=mask)
    with Tape():
        trained = mod_forward_train(router, recording_branch([]), x)

    assert mask.decisions[0].keep.tolist() == [True, False, True]
    assert calls == [[0, 2]]
    assert inferred.data.tolist() == [[3.0, 0.0], [0.0, 1.0], [3.0, 0.0]]
    assert np.array_equal(trained.data, inferred.data)


def test_ste_gradient_of_a_one_weight_router():
    """dy/dW of the masked output equals the derivative of sigmoid(Wx) * c + x."""
    w0, xv, c = 0.3, 0.8, 1.7
    with precision(np.float64):
        router = RouterState(W=Tensor([[w0]], requires_grad=True), layer_index=0,
                             granularity=GranularityEnum.TOKEN)
        x = Tensor([[xv]])

        def constant(x, positions, cache):
            return Tensor.wrap(np.full((1, 1), c))

        with Tape() as tape:
            y = mod_forward_train(router, constant, x)
            tape.backward(ops.sum(y))

        def surrogate():
            s = 1.0 / (1.0 + np.exp(-router.W.data[0, 0] * xv))
            return s * c + xv

        expected = numeric_grad(surrogate, router.W)
        assert y.item() == pytest.approx(c + xv)
        assert router.W.grad[0, 0] == pytest.approx(expected[0, 0], abs=1e-3)
        s = 1.0 / (1.0 + np.exp(-w0 * xv))
        assert router.W.grad[0, 0] == pytest.approx(c * s * (1 - s) * xv, abs=1e-9)


@pytest.mark.parametrize('target,causal_prefix', [(TargetEnum.ATTENTION, False), (TargetEnum.MLP, True),
                                                  (TargetEnum.BLOCK, False)])
def test_soft_gate_gradient_matches_finite_differences(target, causal_prefix):
    rng = np.random.default_rng(6)
    tokens = rng.integers(0, 256, size=6)
    targets = np.append(tokens[1:], PAD)
    with precision(np.float64):
        config = ModelConfig(vocab_size=256, d_model=8, n_layers=3, n_heads=2, head_dim=4, mlp_hidden=16,
                             max_seq_len=16)
        state = ModelState.init(config, seed=2)
        plan = MoDLayerPlan(layers=[0, 1], target=target, causal_prefix=causal_prefix)
        routers = RouterSet.attach(config, plan).set_gate_mode(GATE_SOFT)
        for router in routers.routers.values():
            router.W.data = rng.normal(0.0, 0.5, size=(8, 1))
        W = routers.get(1).W

        def loss():
            with Tape():
                return ops.cross_entropy(forward_routed(state, routers, tokens, TRAIN), targets).item()

        with Tape() as tape:
            tape.backward(ops.cross_entropy(forward_routed(state, routers, tokens, TRAIN), targets))

        assert np.max(np.abs(W.grad - numeric_grad(loss, W, h=1e-5))) < 1e-6


def two_layer_config(moe=None):
    return ModelConfig(vocab_size=256, d_model=16, n_layers=2, n_heads=2, head_dim=8, mlp_hidden=32,
                       max_seq_len=16, moe=moe)


def soft_gate_errors(config, routers, tokens, rng):
    """Relative error of the analytic router gradient against finite differences on 50 entries."""
    targets = np.append(tokens[1:], PAD)
    state = ModelState.init(config, seed=2)
    params = routers.set_gate_mode(GATE_SOFT).parameters()
    for w in params:
        w.data = rng.normal(0.0, 0.5, size=w.data.shape)

    def loss():
        with Tape():
            return ops.cross_entropy(forward_routed(state, routers, tokens, TRAIN), targets).item()

    with Tape() as tape:
        tape.backward(ops.cross_entropy(forward_routed(state, routers, tokens, TRAIN), targets))

    analytic, numeric = sampled_grad_check(loss, params, 50, rng)
    return np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)


@pytest.mark.parametrize('target,granularity,causal_prefix', [
    (TargetEnum.ATTENTION, GranularityEnum.TOKEN, False),
    (TargetEnum.MLP, GranularityEnum.TOKEN, False),
    (TargetEnum.BLOCK, GranularityEnum.TOKEN, False),
    (TargetEnum.ATTENTION, GranularityEnum.SEQUENCE, True),
    (TargetEnum.BLOCK, GranularityEnum.SEQUENCE, False),
])
def test_soft_gate_gradient_of_a_two_layer_model(target, granularity, causal_prefix):
    rng = np.random.default_rng(8)
    tokens = rng.integers(0, 256, size=10)
    with precision(np.float64):
        config = two_layer_config()
        plan = MoDLayerPlan(layers=[0, 1], target=target, granularity=granularity, causal_prefix=causal_prefix,
                            allow_last=True)

        assert soft_gate_errors(config, RouterSet.attach(config, plan), tokens, rng) < 1e-3


def test_soft_gate_gradient_of_expert_routers():
    rng = np.random.default_rng(9)
    tokens = rng.integers(0, 256, size=10)
    with precision(np.float64):
        config = two_layer_config(MoEConfig(n_experts=4, top_k=2, expert_hidden=16))

        assert soft_gate_errors(config, RouterSet.attach_experts(config), tokens, rng) < 1e-3


def test_training_with_cache_is_rejected(tiny_state, tokens):
    routers = RouterSet.attach(tiny_state.config, MoDLayerPlan(layers=[1]))

    with pytest.raises(EngineError) as err:
        with Tape():
            forward_routed(tiny_state, routers, tokens, TRAIN, KVCache(tiny_state.config))

    assert err.value.error_code == ErrorCode.STATE


def token_attention_routers(state, tokens, keep_at, skip_at):
    """Token routers on the first layer's attention that keep `keep_at` and skip `skip_at`."""
    routers = RouterSet.attach(state.config, MoDLayerPlan(layers=[0], granularity=GranularityEnum.TOKEN))
    x = embed(state, tokens).data
    routers.get(0).W.data = (x[keep_at] - x[skip_at]).reshape(-1, 1).astype(np.float32)
    return routers


def test_skipped_tokens_write_no_keys(tiny_state):
    tokens = np.arange(12) * 7
    routers = token_attention_routers(tiny_state, tokens, 2, 5)
    cache, mask = KVCache(tiny_state.config), SkipMask()

    forward_routed(tiny_state, routers, tokens, INFER, cache, collector=mask)

    keep = mask.decisions[0].keep
    assert keep[2] and not keep[5]
    assert cache.cached_len(0) == int(keep.sum())
    assert cache.read(0)[2].tolist() == np.nonzero(keep)[0].tolist()
    assert 5 not in cache.read(0)[2].tolist()
    assert cache.cached_len(1) == 12


def test_generated_tokens_follow_their_own_decision(tiny_state):
    tokens = np.arange(12) * 7
    routers = token_attention_routers(tiny_state, tokens, 2, 5)
    mask = SkipMask()

    _, cache = generate(tiny_state, routers, tokens[:8], 4, collector=mask)

    kept = sum(int(d.keep.sum()) for d in mask if d.unit == '0')
    assert kept < 11
    assert cache.cached_len(0) == kept
    assert cache.cached_len(1) == 11
    assert cache.layer_nbytes(0) < cache.layer_nbytes(1)


def test_token_attention_has_a_train_infer_gap(tiny_state):
    tokens = np.arange(12) * 7
    routers = token_attention_routers(tiny_state, tokens, 2, 5)
    dataset = Dataset(inputs=tokens[None, :-1], targets=tokens[None, 1:])

    gap = train_infer_gap(tiny_state, routers, dataset)

    assert gap['max_abs_logit_gap'] > 0.0


def test_generation_holds_sequence_decision(tiny_state, tokens):
    routers = RouterSet.attach(tiny_state.config, MoDLayerPlan(layers=[1, 2]))
    routers.get(2).W.data = np.full((16, 1), -50.0, dtype=np.float32)
    mask = SkipMask()

    out, cache = generate(tiny_state, routers, tokens[:6], 4, collector=mask)

    assert out.shape == (4,)
    assert set(cache.decisions) == {'1', '2'}
    for unit in ('1', '2'):
        keeps = [bool(d.keep[0]) for d in mask if d.unit == unit]
        assert len(keeps) == 4
        assert len(set(keeps)) == 1
    assert cache.present(1) == cache.decisions['1'][0]
    assert cache.present(2) == cache.decisions['2'][0]


def test_zero_routers_generate_like_dense(tiny_state, tokens):
    routers = RouterSet.attach(tiny_state.config, MoDLayerPlan(layers=[0, 1, 2], target=TargetEnum.BLOCK))

    dense, _ = generate(tiny_state, RouterSet(), tokens[:5], 5)
    routed, _ = generate(tiny_state, routers, tokens[:5], 5)

    assert dense.tolist() == routed.tolist()


def test_default_plan_on_sixteen_layers():
    plan = MoDLayerPlan.default(ModelConfig())

    assert plan.layers == list(range(8, 15))
    assert plan.tau == 0.5
    assert plan.target == TargetEnum.ATTENTION


@pytest.mark.parametrize('layers,message', [([], 'no layers'), ([1, 1], 'repeats'), ([7], 'outside'),
                                            ([3], 'final layer')])
def test_invalid_plans(tiny_config, layers, message):
    with pytest.raises(EngineError) as err:
        MoDLayerPlan(layers=layers).validate(tiny_config)

    assert err.value.error_code == ErrorCode.PLAN
    assert message in err.value.message


def test_plan_round_trip():
    plan = MoDLayerPlan(layers=[1, 2], target=TargetEnum.BLOCK, granularity=GranularityEnum.TOKEN, tau=0.4,
                        forced={2: False})

    assert MoDLayerPlan.from_dict(plan.to_dict()) == plan


def test_router_parameter_count(tiny_state):
    routers = RouterSet.attach(tiny_state.config, MoDLayerPlan(layers=[0, 1, 2]))

    assert routers.n_params() == 3 * 16
    assert sorted(routers.named_parameters()) == ['router.0.W', 'router.1.W', 'router.2.W']
