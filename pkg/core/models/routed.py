"""Forward pass of a backbone with routers attached, and greedy generation."""
import logging
from functools import partial

import numpy as np

from core.config import TargetEnum
from core.libs import assertions
from core.models import backbone
from core.models.backbone import ModelState
from core.models.kv_cache import KVCache
from core.models.moe_skip import ExpertLoadReport, expert_filter
from core.models.router_set import RouterSet
from core.models.routers import INFER, TRAIN, SkipMask, mod_forward_infer, mod_forward_train
from core.tensor import ops

logger = logging.getLogger(__name__)


def _attention(state, layer, x, positions, cache):
    return backbone.attention_branch(state, layer, x, positions, cache)


def _mlp(state, layer, filter_, x, positions, cache):
    return backbone.mlp_branch(state, layer, x, filter_)


def _block(state, layer, filter_, x, positions, cache):
    a = backbone.attention_branch(state, layer, x, positions, cache)
    m = backbone.mlp_branch(state, layer, ops.add(x, a), filter_)
    return a, m


def forward_routed(state: ModelState, routers: RouterSet, tokens, mode=INFER, cache: KVCache = None,
                   collector: SkipMask = None, load_report: ExpertLoadReport = None, sequence=0):
    """Logits [L, vocab] for one sequence with every attached router applied.

    In TRAIN mode each routed unit is evaluated and masked (a tape must be
    open); in INFER mode skipped units are bypassed. Routing decisions are
    appended to `collector` and expert loads to `load_report` when given.
    """
    assertions.assert_state(mode in (TRAIN, INFER), 'unknown forward mode {0}'.format(mode))
    assertions.assert_state(mode == INFER or cache is None, 'training forward cannot use a cache')
    routers = routers or RouterSet()
    tokens = np.asarray(tokens, dtype=np.int64)
    positions = backbone.sequence_positions(state.config, tokens.shape[0], cache)
    x = backbone.embed(state, tokens)
    for i in range(state.config.n_layers):
        filter_ = None
        expert_router = routers.get_expert(i)
        if expert_router is not None:
            filter_ = expert_filter(expert_router, mode, load_report, collector, sequence)
        router = routers.get(i)
        if router is None:
            x = ops.add(x, backbone.attention_branch(state, i, x, positions, cache))
            x = ops.add(x, backbone.mlp_branch(state, i, x, filter_))
            continue
        if mode == TRAIN:
            route = partial(mod_forward_train, positions=positions, collector=collector, sequence=sequence)
        else:
            route = partial(mod_forward_infer, cache=cache, positions=positions, collector=collector,
                            sequence=sequence)
        if router.target == TargetEnum.ATTENTION:
            x = route(router, partial(_attention, state, i), x)
            x = ops.add(x, backbone.mlp_branch(state, i, x, filter_))
        elif router.target == TargetEnum.MLP:
            x = ops.add(x, backbone.attention_branch(state, i, x, positions, cache))
            x = route(router, partial(_mlp, state, i, filter_), x)
        else:
            x = route(router, partial(_block, state, i, filter_), x)
    if cache is not None:
        cache.advance(tokens.shape[0])
    return backbone.lm_head(state, x)


def generate(state: ModelState, routers: RouterSet, prompt, n_new, collector: SkipMask = None,
             load_report: ExpertLoadReport = None, sequence=0):
    """Greedy decoding. Returns (generated tokens, cache).

    The prompt is prefilled in one pass; each new token then runs a
    one-position forward against the cache.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    assertions.assert_data(prompt.size > 0, 'generation needs a non-empty prompt')
    cache = KVCache(state.config)
    cache.check_room(prompt.shape[0] + n_new)
    logits = forward_routed(state, routers, prompt, INFER, cache, collector, load_report, sequence)
    out = []
    for step in range(n_new):
        token = int(np.argmax(logits.data[-1]))
        out.append(token)
        if step == n_new - 1:
            break
        logits = forward_routed(state, routers, np.array([token]), INFER, cache, collector, load_report,
                                sequence)
    return np.array(out, dtype=np.int64), cache
