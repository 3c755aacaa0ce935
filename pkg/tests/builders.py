"""Hand-built models shared by unit and acceptance tests."""
import numpy as np

from adrp.adapters import AdapterConfig, AdapterSet
from adrp.encoder import FF, EncoderConfig, EncoderWeights, TaskHead
from adrp.fusion import FusionStack
from adrp.models import FusionModel


def saturated_fusion_model(n=8, winners=(0, 1), num_layers=2, d=8, scale=60.0, seed=0,
                           dtype="float32"):
    """Fusion model whose attention mass on adapters outside ``winners`` is ~0 everywhere.

    Bottleneck 2d with down = [I, -I] makes each adapter return ``h + s * LN(h)``
    (s = 1 for winners, 0 otherwise). With Q = K = c*I the score gap between a
    winner and a loser is ``c^2 * sqrt(d) * std(h)``, which is positive at every
    position, so large ``c`` saturates the softmax.
    """
    cfg = EncoderConfig(num_layers=num_layers, hidden=d, heads=2, ff_dim=2 * d, max_seq=16,
                        vocab_size=12, dtype=dtype)
    rng = np.random.default_rng(seed)
    weights = EncoderWeights.initialize(cfg)
    for t in weights.parameters():
        if t.data.ndim == 2:
            t.data = rng.normal(0, 0.3, t.shape).astype(dtype)
    acfg = AdapterConfig("pfeiffer", 0.5)
    eye = np.eye(d)
    adapters = []
    for i in range(n):
        a = AdapterSet.initialize(acfg, cfg, rng)
        s = 1.0 if i in winners else 0.0
        for layer in range(num_layers):
            b = a.blocks[(layer, FF)]
            b.down.data = np.hstack([eye, -eye]).astype(dtype)
            b.up.data = (s * np.vstack([eye, -eye])).astype(dtype)
        adapters.append(a)
    stack = FusionStack.initialize(adapters, cfg, rng, value_noise=0.3)
    for layer in range(num_layers):
        stack.query[layer].data = (scale * eye).astype(dtype)
        stack.key[layer].data = (scale * eye).astype(dtype)
    head = TaskHead.initialize(d, 2, rng, dtype)
    head.weight.data = rng.normal(0, 1.0, head.weight.shape).astype(dtype)
    return FusionModel(cfg, weights, head, stack)
