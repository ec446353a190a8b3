import numpy as np

from core.models.backbone import MLPParams, MoEParams
from core.tensor import Tensor


def numeric_grad(loss_fn, tensor, h=1e-3):
    """Central finite differences of a scalar `loss_fn()` with respect to every entry of `tensor`."""
    grad = np.zeros(tensor.data.shape, dtype=np.float64)
    for idx in np.ndindex(*tensor.data.shape):
        original = tensor.data[idx]
        tensor.data[idx] = original + h
        plus = loss_fn()
        tensor.data[idx] = original - h
        minus = loss_fn()
        tensor.data[idx] = original
        grad[idx] = (plus - minus) / (2 * h)
    return grad


def sampled_grad_check(loss_fn, params, n_entries, rng, h=1e-5):
    """(analytic, numeric) gradients at `n_entries` random coordinates drawn across `params`."""
    coords = [(i, idx) for i, p in enumerate(params) for idx in np.ndindex(*p.data.shape)]
    picks = rng.choice(len(coords), size=min(n_entries, len(coords)), replace=False)
    analytic, numeric = [], []
    for pick in picks:
        i, idx = coords[pick]
        tensor = params[i]
        original = tensor.data[idx]
        tensor.data[idx] = original + h
        plus = loss_fn()
        tensor.data[idx] = original - h
        minus = loss_fn()
        tensor.data[idx] = original
        analytic.append(0.0 if tensor.grad is None else tensor.grad[idx])
        numeric.append((plus - minus) / (2 * h))
    return np.array(analytic), np.array(numeric)


def run_config(**overrides):
    """Run configuration of the 4-layer test model, small enough for a full CLI pipeline."""
    config = {
        'seed': 0,
        'model': {'vocab_size': 256, 'd_model': 16, 'n_layers': 4, 'n_heads': 2, 'head_dim': 8,
                  'mlp_hidden': 32, 'max_seq_len': 32},
        'plan': {},
        'train': {'steps': 2, 'batch_size': 2, 'seq_len': 16, 'max_windows': 64, 'learning_rate': 0.01},
        'pretrain': {'steps': 2, 'batch_size': 2},
        'data': {'synthetic_sentences': 200},
        'bench': {'batch_size': 2, 'seq_len': 16, 'gen_len': 2, 'repeats': 1, 'eval_windows': 8},
        'baseline': {'drop_count': 1, 'calibration_size': 4, 'expert_drop_fraction': 0.125},
    }
    for section, values in overrides.items():
        if isinstance(values, dict):
            config[section].update(values)
        else:
            config[section] = values
    return config


def three_expert_params(top_k=2, renormalize=False):
    """Three GELU experts over d=2 whose gate logits are [2, 1, 0] for the input row [1, 0]."""
    rng = np.random.default_rng(3)
    experts = [MLPParams(w_up=Tensor(rng.normal(size=(2, 4))), w_down=Tensor(rng.normal(size=(4, 2))))
               for _ in range(3)]
    return MoEParams(gate=Tensor([[2.0, 1.0, 0.0], [0.0, 0.0, 0.0]]), experts=experts,
                     alive=np.ones(3, dtype=bool), top_k=top_k, renormalize=renormalize)
