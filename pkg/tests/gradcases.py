"""Small differentiable programs for finite-difference checks.

Every case maps ``(rng, dtype)`` to ``(f, params)`` where ``f`` builds a
scalar. Outputs are contracted with a fixed random weight tensor so every
output coordinate contributes a distinct gradient.
"""
import numpy as np

from adrp import tensor as T
from adrp.adapters import AdapterConfig, AdapterParams, AdapterSet, adapter_forward
from adrp.encoder import EncoderConfig, EncoderWeights, TaskHead, classify, encode
from adrp.fusion import FusionStack, fusion_forward_iterative, fusion_forward_parallel


def _p(rng, shape, dtype, scale=1.0, away_from_zero=False):
    x = rng.normal(0, scale, shape)
    if away_from_zero:
        x = np.sign(x) * (np.abs(x) + 0.2)
    return T.parameter(x.astype(dtype))


def _contract(out, rng):
    w = rng.normal(0, 1, out.shape).astype(out.dtype)
    return T.sum_(out * w)


def unary(fn, away=False, positive=False):
    def case(rng, dt):
        x = _p(rng, (3, 4), dt, away_from_zero=away)
        if positive:
            x.data = (np.abs(x.data) + 0.5).astype(dt)
        w = rng.normal(0, 1, (3, 4)).astype(dt)
        return (lambda: T.sum_(fn(x) * w)), [x]
    return case


def binary(fn, shape_b=(3, 4)):
    def case(rng, dt):
        a, b = _p(rng, (3, 4), dt), _p(rng, shape_b, dt)
        w = rng.normal(0, 1, (3, 4)).astype(dt)
        return (lambda: T.sum_(fn(a, b) * w)), [a, b]
    return case


def matmul_2d(rng, dt):
    a, b = _p(rng, (3, 5), dt), _p(rng, (5, 4), dt)
    w = rng.normal(0, 1, (3, 4)).astype(dt)
    return (lambda: T.sum_((a @ b) * w)), [a, b]


def matmul_3d(rng, dt):
    a, b = _p(rng, (2, 3, 5), dt), _p(rng, (5, 4), dt)
    w = rng.normal(0, 1, (2, 3, 4)).astype(dt)
    return (lambda: T.sum_((a @ b) * w)), [a, b]


def matmul_batched(rng, dt):
    a, b = _p(rng, (2, 3, 5), dt), _p(rng, (2, 5, 4), dt)
    w = rng.normal(0, 1, (2, 3, 4)).astype(dt)
    return (lambda: T.sum_((a @ b) * w)), [a, b]


def shape_ops(rng, dt):
    x = _p(rng, (2, 3, 4), dt)
    w = rng.normal(0, 1, (3, 2, 2, 2)).astype(dt)

    def f():
        y = T.transpose(T.swapaxes(x, 0, 1), (0, 2, 1))  # (3, 4, 2)
        return T.sum_(T.reshape(y, (3, 2, 2, 2)) * w)
    return f, [x]


def index_op(rng, dt):
    x = _p(rng, (4, 5), dt)
    w = rng.normal(0, 1, (3, 2)).astype(dt)
    return (lambda: T.sum_(T.index(x, (np.array([0, 2, 2]), slice(1, 3))) * w)), [x]


def embedding_op(rng, dt):
    table = _p(rng, (6, 3), dt)
    ids = np.array([[0, 5, 5], [2, 0, 1]])
    w = rng.normal(0, 1, (2, 3, 3)).astype(dt)
    return (lambda: T.sum_(T.embedding(table, ids) * w)), [table]


def concat_stack(rng, dt):
    a, b = _p(rng, (2, 3), dt), _p(rng, (2, 3), dt)
    w1 = rng.normal(0, 1, (2, 6)).astype(dt)
    w2 = rng.normal(0, 1, (2, 2, 3)).astype(dt)
    return (lambda: T.sum_(T.concat([a, b], axis=1) * w1) + T.sum_(T.stack([a, b], axis=0) * w2)), [a, b]


def reductions(rng, dt):
    x = _p(rng, (3, 4), dt)
    w = rng.normal(0, 1, (3, 1)).astype(dt)
    return (lambda: T.sum_(T.mean(x, axis=1, keepdims=True) * w) + T.mean(x)), [x]


def softmax_op(rng, dt):
    x = _p(rng, (3, 4), dt)
    w = rng.normal(0, 1, (3, 4)).astype(dt)
    return (lambda: T.sum_(T.softmax(x, axis=-1) * w)), [x]


def softmax_masked_op(rng, dt):
    x = _p(rng, (3, 4), dt)
    mask = np.array([[1, 1, 0, 1], [1, 0, 0, 1], [1, 1, 1, 1]], dtype=bool)
    w = rng.normal(0, 1, (3, 4)).astype(dt)
    return (lambda: T.sum_(T.softmax_masked(x, mask, axis=-1) * w)), [x]


def layer_norm_op(rng, dt):
    x = _p(rng, (3, 5), dt)
    g, b = _p(rng, (5,), dt), _p(rng, (5,), dt)
    w = rng.normal(0, 1, (3, 5)).astype(dt)
    return (lambda: T.sum_(T.layer_norm(x, g, b) * w)), [x, g, b]


def cross_entropy_op(rng, dt):
    x = _p(rng, (4, 3), dt)
    y = rng.integers(0, 3, 4)
    return (lambda: T.cross_entropy(x, y)), [x]


def mse_op(rng, dt):
    x = _p(rng, (3, 4), dt)
    t = rng.normal(0, 1, (3, 4)).astype(dt)
    return (lambda: T.mse(x, t)), [x]


def dropout_op(rng, dt):
    x = _p(rng, (4, 5), dt)
    w = rng.normal(0, 1, (4, 5)).astype(dt)
    seed = int(rng.integers(1 << 30))
    return (lambda: T.sum_(T.dropout(x, 0.3, seed) * w)), [x]


def _adapter(rng, dt, d=6, m=3):
    p = AdapterParams.initialize(d, m, rng, dt, up_std=0.5)
    p.down.data = rng.normal(0, 0.5, p.down.shape).astype(dt)
    p.ln_gain.data = (1 + rng.normal(0, 0.2, d)).astype(dt)
    p.ln_bias.data = rng.normal(0, 0.2, d).astype(dt)
    return p


def adapter_case(rng, dt):
    p = _adapter(rng, dt)
    h = _p(rng, (2, 3, 6), dt)
    w = rng.normal(0, 1, (2, 3, 6)).astype(dt)
    return (lambda: T.sum_(adapter_forward(h, p) * w)), [h, *p.parameters()]


def _tiny_stack(rng, dt, n=2, d=4):
    """Adapters with deltas comparable to their input and unsaturated fusion scores."""
    enc = EncoderConfig(num_layers=1, hidden=d, heads=1, ff_dim=8, vocab_size=8, max_seq=8, dtype=dt)
    sets = []
    for _ in range(n):
        s = AdapterSet.initialize(AdapterConfig("pfeiffer", 2.0), enc, rng)
        for t in s.parameters():
            t.data = (t.data + rng.normal(0, 0.5, t.shape)).astype(dt)
        s.freeze(False)
        sets.append(s)
    stack = FusionStack.initialize(sets, enc, rng, value_noise=0.3)
    for t in (*stack.query, *stack.key):  # fusion scores O(1): softmax far from saturation
        t.data = rng.normal(0, 0.3, t.shape).astype(dt)
    return stack


def fusion_case(forward):
    def case(rng, dt):
        stack = _tiny_stack(rng, dt)
        h = _p(rng, (1, 3, 4), dt)
        w = rng.normal(0, 1, (1, 3, 4)).astype(dt)
        return (lambda: T.sum_(forward(h, stack, 0) * w)), [h, *stack.parameters(), *stack.adapter_parameters()]
    return case


def encoder_adapter_case(rng, dt):
    """Whole model: embeddings, 2 layers with Houlsby adapters, head, cross entropy."""
    enc = EncoderConfig(num_layers=2, hidden=8, heads=2, ff_dim=16, vocab_size=10, max_seq=8,
                        seed=int(rng.integers(1 << 30)), dtype=dt)
    weights = EncoderWeights.initialize(enc)
    for t in weights.parameters():
        if t.data.ndim == 2:  # moderate scale: attention is not uniform, softmax is not saturated
            t.data = rng.normal(0, 0.3, t.shape).astype(dt)
    adapters = AdapterSet.initialize(AdapterConfig("houlsby", 4.0), enc, rng, up_std=0.5)
    head = TaskHead.initialize(8, 3, rng, dt)
    head.weight.data = rng.normal(0, 0.5, head.weight.shape).astype(dt)
    tokens = rng.integers(0, 10, (2, 5))
    y = rng.integers(0, 3, 2)
    params = adapters.parameters() + head.parameters()
    return (lambda: T.cross_entropy(classify(encode(tokens, enc, weights, adapters.hooks()), head), y)), params


CASES = {
    "add": binary(T.add),
    "add_broadcast": binary(T.add, (4,)),
    "sub": binary(T.sub),
    "mul": binary(T.mul),
    "mul_broadcast": binary(T.mul, (3, 1)),
    "relu": unary(T.relu, away=True),
    "gelu": unary(T.gelu),
    "exp": unary(T.exp),
    "log": unary(T.log, positive=True),
    "matmul_2d": matmul_2d,
    "matmul_3d_2d": matmul_3d,
    "matmul_batched": matmul_batched,
    "shape_ops": shape_ops,
    "index": index_op,
    "embedding": embedding_op,
    "concat_stack": concat_stack,
    "reductions": reductions,
    "softmax": softmax_op,
    "softmax_masked": softmax_masked_op,
    "layer_norm": layer_norm_op,
    "cross_entropy": cross_entropy_op,
    "mse": mse_op,
    "dropout": dropout_op,
    "adapter_forward": adapter_case,
    "fusion_iterative": fusion_case(fusion_forward_iterative),
    "fusion_parallel": fusion_case(fusion_forward_parallel),
    "encoder_with_adapters": encoder_adapter_case,
}
