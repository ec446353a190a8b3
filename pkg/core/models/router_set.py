import logging
from typing import Dict, Optional

from core.config import DEFAULT_TAU, ModelConfig, TargetEnum
from core.libs import assertions
from core.models.moe_skip import ExpertSkipRouter
from core.models.routers import GATE_SOFT, GATE_STE, MoDLayerPlan, RouterState

logger = logging.getLogger(__name__)


class RouterSet:
    """All routers attached to one backbone: depth routers keyed by layer plus
    optional per-expert routers keyed by MoE layer."""

    def __init__(self, plan: Optional[MoDLayerPlan] = None, routers: Dict[int, RouterState] = None,
                 expert_routers: Dict[int, ExpertSkipRouter] = None):
        self.plan = plan
        self.routers = dict(routers or {})
        self.expert_routers = dict(expert_routers or {})

    def __repr__(self):
        return '<RouterSet layers=%s expert_layers=%s>' % (sorted(self.routers), sorted(self.expert_routers))

    @classmethod
    def attach(cls, config: ModelConfig, plan: MoDLayerPlan):
        plan.validate(config)
        routers = {}
        for layer in plan.layers:
            router = RouterState.zero_init(config.d_model, layer, plan.target, plan.granularity,
                                           plan.tau, plan.causal_prefix)
            router.forced = plan.forced.get(layer)
            routers[layer] = router
        logger.info('attached %d routers at layers %s (%s, %s)', len(routers), plan.layers,
                    plan.target.value, plan.granularity.value)
        return cls(plan, routers)

    @classmethod
    def attach_experts(cls, config: ModelConfig, layers=None, tau=DEFAULT_TAU):
        assertions.assert_config(config.moe is not None, 'expert routers need a mixture-of-experts model')
        layers = range(config.n_layers) if layers is None else layers
        routers = {i: ExpertSkipRouter.zero_init(i, config.moe.n_experts, config.d_model, tau) for i in layers}
        return cls(None, {}, routers)

    @classmethod
    def forced_skip(cls, config: ModelConfig, layers, target, allow_last=False):
        """Routers that always skip `layers`: the static layer-drop baseline."""
        plan = MoDLayerPlan(layers=sorted(layers), target=TargetEnum(target), allow_last=allow_last,
                            forced={i: False for i in layers})
        return cls.attach(config, plan)

    def get(self, layer) -> Optional[RouterState]:
        return self.routers.get(layer)

    def get_expert(self, layer) -> Optional[ExpertSkipRouter]:
        return self.expert_routers.get(layer)

    def named_parameters(self):
        named = {router.name: router.W for _, router in sorted(self.routers.items())}
        for _, router in sorted(self.expert_routers.items()):
            named.update(router.named_parameters())
        return named

    def parameters(self):
        return [w for w in self.named_parameters().values() if w.requires_grad]

    def n_params(self):
        return sum(w.size for w in self.named_parameters().values())

    def set_gate_mode(self, mode):
        assertions.assert_config(mode in (GATE_STE, GATE_SOFT), 'unknown gate mode {0}'.format(mode))
        for router in list(self.routers.values()) + list(self.expert_routers.values()):
            router.gate_mode = mode
        return self

    def header(self):
        return {
            'plan': self.plan.to_dict() if self.plan is not None else None,
            'expert_layers': sorted(self.expert_routers),
            'expert_tau': next(iter(self.expert_routers.values())).tau if self.expert_routers else DEFAULT_TAU,
        }

    @classmethod
    def from_header(cls, config: ModelConfig, header, tensors):
        """Rebuild routers from a checkpoint header and its named router tensors."""
        routers = cls()
        if header.get('plan') is not None:
            routers = cls.attach(config, MoDLayerPlan.from_dict(header['plan']))
        layers = header.get('expert_layers') or []
        if layers:
            routers.expert_routers = cls.attach_experts(config, layers, header.get('expert_tau', DEFAULT_TAU)
                                                        ).expert_routers
        for name, w in routers.named_parameters().items():
            assertions.assert_found(tensors.get(name), 'checkpoint has no tensor {0}'.format(name))
            w.data = tensors[name].copy()
        return routers
