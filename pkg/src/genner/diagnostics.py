"""Finite-difference verification of every gradient the model relies on.

Three tiers, increasingly integrated:

- ops: each differentiable tensor operation on small random inputs.
- blocks: the neural building blocks, including their parameters
  (installed as leaves via attribute swap).
- model: one alignment layer and the full tagger at tiny dimensions, in
  evaluation mode, where the sampled keep masks are locally constant and
  the analytic gradient must therefore match the numeric one.

Two parts of the model are not finite-difference checkable by construction
and are verified differently:

- the straight-through estimator forwards hard one-hot values but routes
  gradients to the soft distribution; its gradient is checked for exact
  identity routing instead.
- hard mask application (the {0, -inf} attention constants) is
  intentionally non-differentiable; the decision head's soft keep
  probabilities are checked as an ordinary block.

The suite also verifies gradient coverage: every parameter outside the
known-inert set must receive a gradient (evaluation mode leaves the
samplers and the final visual fusion block without one; training mode
only the latter).
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .crf import CrfParams, crf_nll
from .data import Example, Vocab, make_batch
from .fusion import AlignmentLayer, HybridExtractor, LayerState
from .generator import CrossModalGenerator, feature_kl
from .gradcheck import finite_difference_check
from .model import ModelConfig, MultimodalTagger
from .nn import (DecoderBlock, EncoderLayer, Linear, Mlp, MultiHeadAttention,
                 PatchEmbedder, TokenEmbedder, pad_key_mask)
from .sampler import ContextSampler, masked_gap
from .tensor import (Tensor, add, backward, broadcast_to, clamp_min, concat,
                     constant, div, gather_nd, gelu, gumbel_softmax,
                     kl_divergence, layer_norm, logsumexp, matmul, mul,
                     narrow, neg, reshape, softmax, straight_through, sub,
                     swapaxes, take_rows, texp, tlog, tmean, tsum)

OP_TOL = 1e-5
BLOCK_TOL = 1e-5
CRF_TOL = 1e-6
MODEL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    kind: str          # "op" | "block" | "model"
    tol: float
    max_err: float
    ok: bool


def _proj(rng: np.random.Generator, shape) -> np.ndarray:
    # distinct weights per output coordinate, so permuted/transposed
    # gradients cannot cancel into a false pass
    return rng.normal(0.0, 1.0, shape)


def _scalarize(y: Tensor, proj: np.ndarray) -> Tensor:
    return tsum(mul(y, constant(proj)))


def _away_from_zero(rng: np.random.Generator, shape, gap: float = 0.5) -> np.ndarray:
    x = rng.normal(0.0, 1.0, shape)
    return np.sign(x) * (gap + np.abs(x))


# -- tier 1: ops --------------------------------------------------------------


def _check_binary(rng, trials, op, shapes, make_a=None, make_b=None):
    make_a = make_a or (lambda r, s: r.normal(0.0, 1.0, s))
    make_b = make_b or (lambda r, s: r.normal(0.0, 1.0, s))
    worst = 0.0
    for t in range(trials):
        sa, sb = shapes[t % len(shapes)]
        a0 = make_a(rng, sa)
        b0 = make_b(rng, sb)
        out_shape = op(constant(a0), constant(b0)).shape
        proj = _proj(rng, out_shape)
        worst = max(worst, finite_difference_check(
            lambda x: _scalarize(op(x, constant(b0)), proj), Tensor(a0)))
        worst = max(worst, finite_difference_check(
            lambda x: _scalarize(op(constant(a0), x), proj), Tensor(b0)))
    return worst


def _check_unary(rng, trials, op, shape, make=None):
    make = make or (lambda r, s: r.normal(0.0, 1.0, s))
    worst = 0.0
    for _ in range(trials):
        x0 = make(rng, shape)
        proj = _proj(rng, op(constant(x0)).shape)
        worst = max(worst, finite_difference_check(
            lambda x: _scalarize(op(x), proj), Tensor(x0)))
    return worst


def _arith_shapes():
    return [((3, 4), (3, 4)), ((3, 4), (4,)), ((2, 1, 4), (3, 4))]


def _op_add(rng, trials):
    return _check_binary(rng, trials, add, _arith_shapes())


def _op_sub(rng, trials):
    return _check_binary(rng, trials, sub, _arith_shapes())


def _op_mul(rng, trials):
    return _check_binary(rng, trials, mul, _arith_shapes())


def _op_div(rng, trials):
    return _check_binary(rng, trials, div, _arith_shapes(),
                         make_a=_away_from_zero, make_b=_away_from_zero)


def _op_neg(rng, trials):
    return _check_unary(rng, trials, neg, (3, 4))


def _op_matmul(rng, trials):
    shapes = [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 5))]
    return _check_binary(rng, trials, matmul, shapes)


def _op_exp(rng, trials):
    return _check_unary(rng, trials, texp, (3, 4),
                        make=lambda r, s: r.uniform(-2.0, 2.0, s))


def _op_log(rng, trials):
    return _check_unary(rng, trials, tlog, (3, 4),
                        make=lambda r, s: 0.5 + np.abs(r.normal(0.0, 1.0, s)))


def _op_gelu(rng, trials):
    return _check_unary(rng, trials, gelu, (3, 4))


def _op_clamp_min(rng, trials):
    # keep probes off the kink so the central difference stays two-sided
    return _check_unary(rng, trials, lambda x: clamp_min(x, 0.0), (3, 4),
                        make=lambda r, s: _away_from_zero(r, s, gap=0.05))


def _op_sum(rng, trials):
    variants = [dict(axis=None), dict(axis=0), dict(axis=-1, keepdims=True)]
    worst = 0.0
    for t in range(trials):
        kw = variants[t % len(variants)]
        worst = max(worst, _check_unary(rng, 1, lambda x: tsum(x, **kw), (2, 3, 4)))
    return worst


def _op_mean(rng, trials):
    variants = [dict(axis=None), dict(axis=0), dict(axis=-1, keepdims=True)]
    worst = 0.0
    for t in range(trials):
        kw = variants[t % len(variants)]
        worst = max(worst, _check_unary(rng, 1, lambda x: tmean(x, **kw), (2, 3, 4)))
    return worst


def _op_reshape(rng, trials):
    return _check_unary(rng, trials, lambda x: reshape(x, (2, 6)), (3, 4))


def _op_swapaxes(rng, trials):
    return _check_unary(rng, trials, lambda x: swapaxes(x, -1, -2), (2, 3, 4))


def _op_broadcast_to(rng, trials):
    return _check_unary(rng, trials, lambda x: broadcast_to(x, (3, 2, 4)), (3, 1, 4))


def _op_concat(rng, trials):
    worst = 0.0
    for t in range(trials):
        axis = (0, -1)[t % 2]
        a0 = rng.normal(0.0, 1.0, (2, 3))
        b0 = rng.normal(0.0, 1.0, (2, 3))
        proj = _proj(rng, concat([constant(a0), constant(b0)], axis=axis).shape)
        worst = max(worst, finite_difference_check(
            lambda x: _scalarize(concat([x, constant(b0)], axis=axis), proj), Tensor(a0)))
        worst = max(worst, finite_difference_check(
            lambda x: _scalarize(concat([constant(a0), x], axis=axis), proj), Tensor(b0)))
    return worst


def _op_narrow(rng, trials):
    idxs = [(slice(1, 3),), (1, slice(1, 4)), (..., 0)]
    worst = 0.0
    for t in range(trials):
        idx = idxs[t % len(idxs)]
        worst = max(worst, _check_unary(rng, 1, lambda x: narrow(x, idx), (4, 5)))
    return worst


def _op_take_rows(rng, trials):
    # repeated rows exercise the scatter-add in the backward pass
    idx_list = [np.array([0, 2, 2, 4]), np.array([[1, 1, 3], [0, 4, 4]])]
    worst = 0.0
    for t in range(trials):
        idx = idx_list[t % len(idx_list)]
        worst = max(worst, _check_unary(rng, 1, lambda x: take_rows(x, idx), (5, 4)))
    return worst


def _op_gather_nd(rng, trials):
    idx = (np.array([1, 1, 3]), np.array([2, 2, 0]))
    return _check_unary(rng, trials, lambda x: gather_nd(x, idx), (4, 5))


def _op_softmax(rng, trials):
    worst = _check_unary(rng, trials, lambda x: softmax(x, axis=-1), (3, 5))
    # masked: -inf columns must stay at exactly zero weight and zero gradient
    mask_row = np.array([0.0, -np.inf, 0.0, 0.0, -np.inf])
    mask = constant(np.broadcast_to(mask_row, (3, 5)).copy(), allow_neg_inf=True)
    worst = max(worst, _check_unary(
        rng, trials, lambda x: softmax(add(x, mask), axis=-1), (3, 5)))
    return worst


def _op_logsumexp(rng, trials):
    variants = [dict(axis=-1), dict(axis=0), dict(axis=1, keepdims=True)]
    worst = 0.0
    for t in range(trials):
        kw = variants[t % len(variants)]
        worst = max(worst, _check_unary(rng, 1, lambda x: logsumexp(x, **kw), (3, 5)))
    return worst


def _op_layer_norm(rng, trials):
    worst = 0.0
    for _ in range(trials):
        x0 = rng.normal(0.0, 1.0, (3, 8))
        g0 = 1.0 + 0.1 * rng.normal(0.0, 1.0, 8)
        b0 = 0.1 * rng.normal(0.0, 1.0, 8)
        proj = _proj(rng, (3, 8))
        worst = max(worst, finite_difference_check(
            lambda x: _scalarize(layer_norm(x, constant(g0), constant(b0)), proj),
            Tensor(x0)))
        worst = max(worst, finite_difference_check(
            lambda g: _scalarize(layer_norm(constant(x0), g, constant(b0)), proj),
            Tensor(g0)))
        worst = max(worst, finite_difference_check(
            lambda b: _scalarize(layer_norm(constant(x0), constant(g0), b), proj),
            Tensor(b0)))
    return worst


def _op_kl(rng, trials):
    # probe through softmax so every point satisfies the sum-to-1 precondition
    worst = 0.0
    for _ in range(trials):
        a0 = rng.normal(0.0, 1.0, (3, 5))
        b0 = rng.normal(0.0, 1.0, (3, 5))
        worst = max(worst, finite_difference_check(
            lambda a: kl_divergence(softmax(a, axis=-1),
                                    softmax(constant(b0), axis=-1)), Tensor(a0)))
        worst = max(worst, finite_difference_check(
            lambda b: kl_divergence(softmax(constant(a0), axis=-1),
                                    softmax(b, axis=-1)), Tensor(b0)))
    return worst


def _op_gumbel_soft(rng, trials):
    # fresh generator with a fixed seed inside f: identical noise per probe,
    # so the soft path is an ordinary differentiable function
    worst = 0.0
    for t in range(trials):
        x0 = rng.normal(0.0, 1.0, (3, 4))
        proj = _proj(rng, (3, 4))
        seed = 1000 + t
        worst = max(worst, finite_difference_check(
            lambda x: _scalarize(
                gumbel_softmax(x, 0.7, np.random.default_rng(seed), hard=False),
                proj),
            Tensor(x0)))
    return worst


def _op_straight_through(rng, trials):
    # not finite-difference checkable (forward is a step function); the
    # contract is exact identity routing of the upstream gradient
    worst = 0.0
    for _ in range(trials):
        soft = Tensor(rng.uniform(0.05, 0.95, (3, 4)), requires_grad=True)
        hard = np.eye(4)[rng.integers(0, 4, 3)]
        proj = _proj(rng, (3, 4))
        out = _scalarize(straight_through(hard, soft), proj)
        backward(out)
        worst = max(worst, float(np.abs(soft.grad - proj).max()))
    return worst


# -- tier 2: blocks ------------------------------------------------------------


def _block_linear(rng, trials):
    worst = 0.0
    for _ in range(trials):
        lin = Linear(4, 3, rng)
        x0 = rng.normal(0.0, 1.0, (2, 4))
        proj = _proj(rng, (2, 3))
        worst = max(worst, finite_difference_check(
            lambda x: _scalarize(lin(x), proj), Tensor(x0)))

        def via_weight(w):
            lin.weight = w
            return _scalarize(lin(constant(x0)), proj)

        worst = max(worst, finite_difference_check(via_weight, Tensor(lin.weight.data)))

        def via_bias(b):
            lin.bias = b
            return _scalarize(lin(constant(x0)), proj)

        worst = max(worst, finite_difference_check(via_bias, Tensor(lin.bias.data)))
    return worst


def _block_mlp(rng, trials):
    worst = 0.0
    for _ in range(trials):
        mlp = Mlp(4, 6, 3, rng)
        x0 = rng.normal(0.0, 1.0, (2, 4))
        proj = _proj(rng, (2, 3))
        worst = max(worst, finite_difference_check(
            lambda x: _scalarize(mlp(x), proj), Tensor(x0)))
    return worst


def _block_attention(rng, trials):
    worst = 0.0
    mask_row = np.array([0.0, -np.inf, 0.0])
    mask = constant(np.broadcast_to(mask_row, (3, 3)).copy(), allow_neg_inf=True)
    for t in range(trials):
        mha = MultiHeadAttention(8, 2, rng)
        x0 = rng.normal(0.0, 1.0, (3, 8))
        proj = _proj(rng, (3, 8))
        m = mask if t % 2 else None
        worst = max(worst, finite_difference_check(
            lambda x: _scalarize(mha(x, x, m), proj), Tensor(x0)))

        def via_wq(w):
            mha.wq.weight = w
            return _scalarize(mha(constant(x0), constant(x0), m), proj)

        worst = max(worst, finite_difference_check(
            via_wq, Tensor(mha.wq.weight.data)))
    return worst


def _block_encoder(rng, trials):
    worst = 0.0
    for _ in range(trials):
        enc = EncoderLayer(8, 2, rng)
        x0 = rng.normal(0.0, 1.0, (3, 8))
        proj = _proj(rng, (3, 8))
        worst = max(worst, finite_difference_check(
            lambda x: _scalarize(enc(x), proj), Tensor(x0)))
    return worst


def _block_decoder(rng, trials):
    worst = 0.0
    mem_mask_row = np.array([0.0, -np.inf, 0.0])
    mem_mask = constant(np.broadcast_to(mem_mask_row, (2, 3)).copy(), allow_neg_inf=True)
    for _ in range(trials):
        dec = DecoderBlock(8, 2, rng)
        q0 = rng.normal(0.0, 1.0, (2, 8))
        m0 = rng.normal(0.0, 1.0, (3, 8))
        proj = _proj(rng, (2, 8))
        worst = max(worst, finite_difference_check(
            lambda q: _scalarize(dec(q, constant(m0), memory_mask=mem_mask), proj),
            Tensor(q0)))
        worst = max(worst, finite_difference_check(
            lambda m: _scalarize(dec(constant(q0), m, memory_mask=mem_mask), proj),
            Tensor(m0)))
    return worst


def _block_token_embedder(rng, trials):
    ids = np.array([[1, 4, 5, 2], [1, 4, 2, 0]])
    worst = 0.0
    for _ in range(trials):
        emb = TokenEmbedder(6, 8, 2, rng, pad_id=0, cls_id=1, sep_id=2)
        proj = _proj(rng, (2, 4, 8))

        def via_table(t):
            emb.table = t
            return _scalarize(emb(ids), proj)

        worst = max(worst, finite_difference_check(via_table, Tensor(emb.table.data)))

        def via_positions(p):
            emb.positions = p
            return _scalarize(emb(ids), proj)

        worst = max(worst, finite_difference_check(
            via_positions, Tensor(emb.positions.data)))
    return worst


def _block_patch_embedder(rng, trials):
    worst = 0.0
    for _ in range(trials):
        emb = PatchEmbedder(4, 8, 3, rng)
        x0 = rng.normal(0.0, 1.0, (3, 4))
        proj = _proj(rng, (3, 8))
        worst = max(worst, finite_difference_check(
            lambda x: _scalarize(emb(x), proj), Tensor(x0)))

        def via_positions(p):
            emb.positions = p
            return _scalarize(emb(constant(x0)), proj)

        worst = max(worst, finite_difference_check(
            via_positions, Tensor(emb.positions.data)))
    return worst


def _block_masked_gap(rng, trials):
    mask0 = np.array([[1.0, 0.0, 1.0, 1.0], [0.0, 1.0, 0.0, 0.0]])
    worst = 0.0
    for _ in range(trials):
        x0 = rng.normal(0.0, 1.0, (2, 4, 8))
        proj = _proj(rng, (2, 1, 8))
        worst = max(worst, finite_difference_check(
            lambda x: _scalarize(masked_gap(x, constant(mask0)), proj), Tensor(x0)))
        worst = max(worst, finite_difference_check(
            lambda m: _scalarize(masked_gap(constant(x0), m), proj), Tensor(mask0)))
    return worst


def _block_sampler_probs(rng, trials):
    # the decision head's soft output; the hard sample rides the
    # straight-through estimator and is checked separately
    prev = constant(np.array([[1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 0.0, 0.0]]))
    worst = 0.0
    for _ in range(trials):
        sampler = ContextSampler(8, rng)
        # moderate inputs, and a wider probe step than the default: the
        # keep-biased init saturates the two-way softmax, leaving some weight
        # coordinates with true gradients near 1e-7 where an eps=1e-6 central
        # difference is pure round-off noise relative to the magnitude floor
        # (verified coordinate-wise: analytic and eps=1e-4 probes agree to
        # five digits, so the analytic side is exact)
        x0 = 0.5 * rng.normal(0.0, 1.0, (2, 4, 8))
        proj = _proj(rng, (2, 4))

        def keep_probs(x):
            _, probs = sampler(x, prev, 1.0, None, training=False)
            return _scalarize(probs, proj)

        worst = max(worst, finite_difference_check(keep_probs, Tensor(x0),
                                                   eps=1e-4))

        def via_decide(w):
            sampler.decide_mlp.fc1.weight = w
            _, probs = sampler(constant(x0), prev, 1.0, None, training=False)
            return _scalarize(probs, proj)

        worst = max(worst, finite_difference_check(
            via_decide, Tensor(sampler.decide_mlp.fc1.weight.data), eps=1e-4))
    return worst


def _block_feature_kl(rng, trials):
    w0 = np.array([1.0, 0.0, 1.0])
    worst = 0.0
    for _ in range(trials):
        g0 = rng.normal(0.0, 1.0, (3, 5))
        t0 = rng.normal(0.0, 1.0, (3, 5))
        worst = max(worst, finite_difference_check(
            lambda g: feature_kl(g, constant(t0), constant(w0)), Tensor(g0)))
        worst = max(worst, finite_difference_check(
            lambda t: feature_kl(constant(g0), t, constant(w0)), Tensor(t0)))
        worst = max(worst, finite_difference_check(
            lambda w: feature_kl(constant(g0), constant(t0), w), Tensor(w0)))
    return worst


def _block_generator(rng, trials):
    keep_t = np.array([1.0, 0.0, 1.0, 1.0])
    keep_v = np.array([1.0, 1.0, 0.0])
    text_valid = np.array([1.0, 1.0, 1.0, 0.0])
    worst = 0.0
    for _ in range(trials):
        gen = CrossModalGenerator(8, 2, 3, 4, rng)
        text0 = rng.normal(0.0, 1.0, (4, 8))
        vis0 = rng.normal(0.0, 1.0, (3, 8))
        proj_v = _proj(rng, (3, 8))
        proj_t = _proj(rng, (4, 8))
        worst = max(worst, finite_difference_check(
            lambda x: _scalarize(gen.generate_visual(x, keep_t), proj_v),
            Tensor(text0)))

        def via_queries(q):
            gen.visual_queries = q
            return _scalarize(gen.generate_visual(constant(text0), keep_t), proj_v)

        worst = max(worst, finite_difference_check(
            via_queries, Tensor(gen.visual_queries.data)))
        worst = max(worst, finite_difference_check(
            lambda v: _scalarize(
                gen.generate_text(v, keep_v, 4, text_valid=text_valid), proj_t),
            Tensor(vis0)))
    return worst


def _block_hybrid(rng, trials):
    worst = 0.0
    for _ in range(trials):
        fuse = HybridExtractor(8, 2, rng)
        p0 = rng.normal(0.0, 1.0, (3, 8))
        g0 = rng.normal(0.0, 1.0, (2, 8))
        proj = _proj(rng, (3, 8))
        worst = max(worst, finite_difference_check(
            lambda p: _scalarize(fuse(p, constant(g0)), proj), Tensor(p0)))
        worst = max(worst, finite_difference_check(
            lambda g: _scalarize(fuse(constant(p0), g), proj), Tensor(g0)))
    return worst


def _block_crf(rng, trials):
    tags = [0, 2, 1, 2]
    worst = 0.0
    for _ in range(trials):
        crf = CrfParams(3, rng)
        em0 = rng.normal(0.0, 1.0, (4, 3))
        worst = max(worst, finite_difference_check(
            lambda e: crf_nll(e, tags, crf), Tensor(em0)))

        def via_transitions(t):
            crf.transitions = t
            return crf_nll(constant(em0), tags, crf)

        worst = max(worst, finite_difference_check(
            via_transitions, Tensor(crf.transitions.data)))

        def via_start(s):
            crf.start = s
            return crf_nll(constant(em0), tags, crf)

        worst = max(worst, finite_difference_check(via_start, Tensor(crf.start.data)))
    return worst


# -- tier 3: alignment layer and full model ------------------------------------

# finite differencing a function with argmax decisions inside needs every
# keep probability safely away from the 0.5 boundary, or a probe could flip
# a mask and break the local-constancy assumption
_MARGIN = 1e-3


def _records_margin(records) -> float:
    lo = np.inf
    for rec in records:
        lo = min(lo, float(np.abs(rec.text_keep_probs - 0.5).min()))
        if rec.visual_keep_probs is not None:
            lo = min(lo, float(np.abs(rec.visual_keep_probs - 0.5).min()))
    return lo


def _layer_eval(rng, trials):
    d, h, n_patches = 8, 2, 3
    text_valid = np.array([[1.0] * 5, [1.0, 1.0, 1.0, 0.0, 0.0]])
    eligible = np.array([[0.0, 1.0, 1.0, 1.0, 0.0], [0.0, 1.0, 0.0, 0.0, 0.0]])
    img_rows = np.array([0])

    def make_state(text_t: Tensor, vis_t: Tensor):
        return LayerState(text=text_t, visual=vis_t, img_rows=img_rows,
                          m_t=constant(text_valid.copy()),
                          m_v=constant(np.ones((1, n_patches))),
                          text_valid=text_valid, eligible=eligible)

    worst = 0.0
    for _ in range(trials):
        layer = AlignmentLayer(d, h, rng)
        gen = CrossModalGenerator(d, h, n_patches, 3, rng)
        for _ in range(50):
            text0 = rng.normal(0.0, 1.0, (2, 5, d))
            vis0 = rng.normal(0.0, 1.0, (1, n_patches, d))
            _, rec, _ = layer(make_state(constant(text0), constant(vis0)),
                              gen, 1.0, None,
                              training=False, fuse=True, want_losses=True)
            if _records_margin([rec]) > _MARGIN:
                break
        else:
            raise RuntimeError("no input with stable keep decisions found")

        proj_t = _proj(rng, (2, 5, d))
        proj_v = _proj(rng, (1, n_patches, d))

        def run(state):
            nxt, _, gout = layer(state, gen, 1.0, None, training=False,
                                 fuse=True, want_losses=True)
            out = add(_scalarize(nxt.text, proj_t), _scalarize(nxt.visual, proj_v))
            if isinstance(gout.recon, Tensor):
                out = add(out, gout.recon)
            if isinstance(gout.cycle, Tensor):
                out = add(out, gout.cycle)
            return out

        worst = max(worst, finite_difference_check(
            lambda x: run(make_state(x, constant(vis0))), Tensor(text0)))
        worst = max(worst, finite_difference_check(
            lambda v: run(make_state(constant(text0), v)), Tensor(vis0)))

        def via_fuse_weight(w):
            layer.text_fuse.attn.wq.weight = w
            return run(make_state(constant(text0), constant(vis0)))

        worst = max(worst, finite_difference_check(
            via_fuse_weight, Tensor(layer.text_fuse.attn.wq.weight.data)))
    return worst


def _assign(root, dotted: str, value: Tensor) -> None:
    obj = root
    parts = dotted.split(".")
    for part in parts[:-1]:
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    setattr(obj, parts[-1], value)


def _tiny_model(seed: int):
    labels = ("O", "B-A", "I-A", "B-B", "I-B")
    vocab = Vocab.from_words(["alpha", "beta", "gamma", "delta", "eps"])
    config = ModelConfig(labels=labels, vocab_size=len(vocab), d=8, h=2,
                         n_layers=2, n_patches=3, d_raw=4, max_len=3,
                         alpha=0.5, seed=seed)
    model = MultimodalTagger(config, vocab)
    rng = np.random.default_rng(seed + 17)
    examples = [
        Example(["alpha", "beta", "gamma"], ["O", "B-A", "I-A"],
                rng.normal(0.0, 1.0, (3, 4)), True),
        Example(["delta", "eps"], ["B-B", "O"], None, False),
    ]
    batch = make_batch(examples, vocab, model._label_index, config.max_len)
    return model, batch


def _model_checks(seed: int):
    """Full-model finite differences in evaluation mode, plus gradient
    coverage in both modes. Returns (results, detail)."""
    import dataclasses as dc

    model = None
    batch = None
    for attempt in range(50):
        m, b = _tiny_model(seed + attempt)
        out = m.forward_train(b, None, training=False)
        if _records_margin(out.records) > _MARGIN:
            model, batch = m, b
            break
    if model is None:
        raise RuntimeError("no seed with stable keep decisions found")

    def loss_for(batch_):
        out = model.forward_train(batch_, None, training=False)
        return model.overall_loss(out)

    # which parameters carry gradients in evaluation mode
    model.zero_grad()
    backward(loss_for(batch))
    dead_eval = {name for name, p in model.named_parameters() if p.grad is None}
    last = model.config.n_layers - 1
    expected_inert_eval = {
        name for name, _ in model.named_parameters()
        if ".text_sampler." in name or ".visual_sampler." in name
        or name.startswith(f"layers.{last}.visual_fuse.")
    }
    unexpected = sorted(dead_eval - expected_inert_eval)
    missing = sorted(expected_inert_eval - dead_eval)
    coverage_eval_ok = not unexpected and not missing

    # training mode: straight-through estimation must reach the samplers
    model.zero_grad()
    out_tr = model.forward_train(batch, np.random.default_rng(7), training=True)
    backward(model.overall_loss(out_tr))
    dead_train = {name for name, p in model.named_parameters() if p.grad is None}
    expected_inert_train = {
        name for name, _ in model.named_parameters()
        if name.startswith(f"layers.{last}.visual_fuse.")
    }
    coverage_train_ok = dead_train == expected_inert_train

    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    checked = 0
    originals = dict(model.named_parameters())
    for name, p in originals.items():
        if name in dead_eval:
            continue

        def via_param(t, name=name):
            _assign(model, name, t)
            return loss_for(batch)

        try:
            worst = max(worst, finite_difference_check(
                via_param, Tensor(p.data), sample=3, rng=rng))
            checked += 1
        finally:
            _assign(model, name, p)

    # the raw patch inputs are a continuous leaf of the whole visual branch
    def via_patches(t):
        return loss_for(dc.replace(batch, patches=t))

    worst_inputs = finite_difference_check(via_patches, Tensor(batch.patches))

    results = [
        CheckResult("full model, all live parameters (d=8, h=2, 2 layers)",
                    "model", MODEL_TOL, worst, worst <= MODEL_TOL),
        CheckResult("full model, raw patch inputs", "model", MODEL_TOL,
                    worst_inputs, worst_inputs <= MODEL_TOL),
        CheckResult("gradient coverage, evaluation mode", "model", 0.0,
                    0.0 if coverage_eval_ok else float("inf"), coverage_eval_ok),
        CheckResult("gradient coverage, training mode", "model", 0.0,
                    0.0 if coverage_train_ok else float("inf"), coverage_train_ok),
    ]
    detail = {
        "params_total": len(originals),
        "params_checked": checked,
        "inert_eval": sorted(dead_eval),
        "inert_train": sorted(dead_train),
        "unexpected_dead": unexpected,
        "unexpectedly_live": missing,
    }
    return results, detail


_OPS = [
    ("add", _op_add), ("sub", _op_sub), ("mul", _op_mul), ("div", _op_div),
    ("neg", _op_neg), ("matmul", _op_matmul), ("exp", _op_exp),
    ("log", _op_log), ("gelu", _op_gelu), ("clamp_min", _op_clamp_min),
    ("sum", _op_sum), ("mean", _op_mean), ("reshape", _op_reshape),
    ("swapaxes", _op_swapaxes), ("broadcast_to", _op_broadcast_to),
    ("concat", _op_concat), ("narrow", _op_narrow),
    ("take_rows", _op_take_rows), ("gather_nd", _op_gather_nd),
    ("softmax, plain and masked", _op_softmax),
    ("logsumexp", _op_logsumexp), ("layer_norm", _op_layer_norm),
    ("kl_divergence", _op_kl), ("gumbel softmax, soft", _op_gumbel_soft),
    ("straight-through routing", _op_straight_through),
]

_BLOCKS = [
    ("linear", BLOCK_TOL, _block_linear),
    ("mlp", BLOCK_TOL, _block_mlp),
    ("multi-head attention (n=3, d=8, h=2)", BLOCK_TOL, _block_attention),
    ("encoder layer (n=3, d=8)", BLOCK_TOL, _block_encoder),
    ("decoder block (n_q=2, n_mem=3, d=8)", BLOCK_TOL, _block_decoder),
    ("token embedder", BLOCK_TOL, _block_token_embedder),
    ("patch embedder", BLOCK_TOL, _block_patch_embedder),
    ("masked global pooling", BLOCK_TOL, _block_masked_gap),
    ("sampler keep probabilities", BLOCK_TOL, _block_sampler_probs),
    ("mask-weighted feature KL", BLOCK_TOL, _block_feature_kl),
    ("cross-modal generation", BLOCK_TOL, _block_generator),
    ("hybrid extraction, concatenated keys", BLOCK_TOL, _block_hybrid),
    ("CRF negative log-likelihood (n=4, L=3)", CRF_TOL, _block_crf),
    ("alignment layer, evaluation mode", MODEL_TOL, _layer_eval),
]


def run_gradient_suite(seed: int = 0, trials: int = 10) -> dict:
    """Run every check. Returns a report dict with per-check results and the
    worst relative error per tier; ``ok`` is True only if all checks pass."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []
    for name, fn in _OPS:
        err = fn(rng, trials)
        results.append(CheckResult(name, "op", OP_TOL, err, err <= OP_TOL))
    block_trials = max(1, trials // 3)
    for name, tol, fn in _BLOCKS:
        err = fn(rng, block_trials)
        results.append(CheckResult(name, "block", tol, err, err <= tol))
    model_results, detail = _model_checks(seed)
    results.extend(model_results)

    worst = {"op": 0.0, "block": 0.0, "model": 0.0}
    for r in results:
        worst[r.kind] = max(worst[r.kind], r.max_err)
    return {
        "ok": all(r.ok for r in results),
        "runtime_s": round(time.perf_counter() - t0, 3),
        "max_err": worst,
        "checks": [asdict(r) for r in results],
        "model": detail,
    }


def format_report(report: dict) -> str:
    lines = []
    for c in report["checks"]:
        status = "ok" if c["ok"] else "FAIL"
        lines.append(f"[{status:>4}] {c['kind']:<5} {c['name']:<50} "
                     f"max rel err {c['max_err']:.3e} (tol {c['tol']:.1e})")
    lines.append(f"checked {report['model']['params_checked']} of "
                 f"{report['model']['params_total']} parameters end to end")
    verdict = "PASS" if report["ok"] else "FAIL"
    overall = max(report["max_err"].values())
    lines.append(f"{verdict}: max rel error {overall:.3e} "
                 f"in {report['runtime_s']:.1f}s")
    return "\n".join(lines)
