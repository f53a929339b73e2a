"""Transformer attention generator.

Produces the :class:`~hierlogic.rulespace.AttentionBundle` for one target
predicate from learned embeddings only; no query entity is ever read.  Three
attention networks are used (operator, statement, formula).  Each network
call ``attend(net, Q, V)`` runs three layers:

1. 4-head self-attention over ``V`` plus feed-forward,
2. 4-head cross-attention of ``Q`` over the result plus feed-forward,
3. single-head cross-attention whose attention matrix is returned as ``S``.

All layers use pre-normalization and residual connections.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import MHAWeights, Tensor
from .errors import ShapeMismatch, UnknownPredicate
from .rulespace import AttentionBundle, RuleSpaceConfig

NETWORKS = ("op", "stmt", "form")
HEADS = 4
FINAL_HEADS = 1
EMBED_SCALE = 1.0


def _block_shapes(d: int) -> dict[str, tuple]:
    shapes = {}
    for layer in ("self", "cross", "final"):
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{layer}.{w}"] = (d, d)
    for ln in ("ln_v", "ln_ffv", "ln_q", "ln_ffq", "ln_out_v", "ln_out_q"):
        shapes[f"{ln}.g"] = (d,)
        shapes[f"{ln}.b"] = (d,)
    for ff in ("ffv", "ffq"):
        shapes[f"{ff}.w1"] = (d, 2 * d)
        shapes[f"{ff}.b1"] = (2 * d,)
        shapes[f"{ff}.w2"] = (2 * d, d)
        shapes[f"{ff}.b2"] = (d,)
    return shapes


def param_shapes(config: RuleSpaceConfig) -> dict[str, tuple]:
    """Name -> shape for every learnable tensor, in a fixed order."""
    K, T, C, d = config.K, config.T, config.C, config.d
    shapes = {
        "H": (K, d),
        "e_x": (d,), "e_x2": (d,),
        "cond.w": (2 * d, d), "cond.b": (d,),
        "e_op": (d,), "e_arg1": (d,), "e_arg2": (d,), "e_pos": (d,), "e_neg": (d,),
        "q_op": (T, d),
        "q_out": (1, d),
        "stmt_fc.w": (2 * d, d), "stmt_fc.b": (d,),
        "form_fc.w": (2 * d, d), "form_fc.b": (d,),
    }
    for lvl in range(1, config.levels + 1):
        shapes[f"q_form1.{lvl}"] = (C, d)
        shapes[f"q_form2.{lvl}"] = (C, d)
    for net in NETWORKS:
        for name, shape in _block_shapes(d).items():
            shapes[f"{net}.{name}"] = shape
    return shapes


def _init_array(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape)
    if leaf in ("b", "b1", "b2"):
        return np.zeros(shape)
    if len(shape) == 2 and leaf.startswith("w"):
        bound = 1.0 / np.sqrt(shape[0])
        return rng.uniform(-bound, bound, size=shape)
    return rng.standard_normal(shape) * EMBED_SCALE


class ModelParams:
    """Named learnable tensors of the generator."""

    def __init__(self, config: RuleSpaceConfig, tensors: dict[str, Tensor],
                 vocab_names: tuple[str, ...] = ()):
        expect = param_shapes(config)
        if list(tensors) != list(expect):
            missing = set(expect) ^ set(tensors)
            if missing:
                raise ShapeMismatch(f"parameter set differs from config: {sorted(missing)[:5]}")
            tensors = {k: tensors[k] for k in expect}
        for k, shape in expect.items():
            if tensors[k].shape != shape:
                raise ShapeMismatch(f"{k}: shape {tensors[k].shape}, expected {shape}")
        if vocab_names and len(vocab_names) != config.K:
            raise ShapeMismatch(f"{len(vocab_names)} vocabulary names for K={config.K}")
        self.config = config
        self.tensors = tensors
        self.vocab_names = tuple(vocab_names)

    @classmethod
    def init(cls, config: RuleSpaceConfig, seed: int = 0, dtype=None,
             vocab_names: tuple[str, ...] = ()) -> "ModelParams":
        rng = np.random.default_rng(seed)
        dtype = dtype or dm.default_dtype()
        tensors = {name: dm.parameter(_init_array(name, shape, rng), dtype=dtype)
                   for name, shape in param_shapes(config).items()}
        return cls(config, tensors, vocab_names)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    @property
    def dtype(self):
        return self.tensors["H"].dtype

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, config: RuleSpaceConfig, arrays: dict[str, np.ndarray],
                    vocab_names: tuple[str, ...] = ()) -> "ModelParams":
        return cls(config, {k: dm.parameter(v, dtype=v.dtype) for k, v in arrays.items()},
                   vocab_names)

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays(self.config, self.arrays(), self.vocab_names)

    def target_id(self, target: int | str) -> int:
        if isinstance(target, str):
            if target not in self.vocab_names:
                raise UnknownPredicate(target)
            return self.vocab_names.index(target)
        if not 0 <= int(target) < self.config.K:
            raise UnknownPredicate(f"predicate id {target} outside [0, {self.config.K})")
        return int(target)


@dataclass
class GeneratorOutput:
    bundle: AttentionBundle
    V_op: Tensor
    V_stmt: Tensor
    V_levels: list
    v_out: Tensor


# ---------------------------------------------------------------------------
# attention network
# ---------------------------------------------------------------------------


def _ln(p: ModelParams, net: str, name: str, x: Tensor) -> Tensor:
    return dm.layer_norm(x, p[f"{net}.{name}.g"], p[f"{net}.{name}.b"])


def _ffn(p: ModelParams, net: str, name: str, x: Tensor) -> Tensor:
    h = dm.relu(dm.affine(x, p[f"{net}.{name}.w1"], p[f"{net}.{name}.b1"]))
    return dm.affine(h, p[f"{net}.{name}.w2"], p[f"{net}.{name}.b2"])


def _mha_weights(p: ModelParams, net: str, layer: str) -> MHAWeights:
    return MHAWeights(*(p[f"{net}.{layer}.{w}"] for w in ("wq", "wk", "wv", "wo")))


def attend(p: ModelParams, net: str, Q: Tensor, V: Tensor) -> tuple[Tensor, Tensor]:
    """One call of an attention network: returns ``(O, S)`` with ``S`` of shape ``|Q| x |V|``."""
    heads = HEADS if p.config.d % HEADS == 0 else 1
    v = _ln(p, net, "ln_v", V)
    V1 = V + dm.mha(v, v, _mha_weights(p, net, "self"), heads)[0]
    V1 = V1 + _ffn(p, net, "ffv", _ln(p, net, "ln_ffv", V1))
    Q1 = Q + dm.mha(_ln(p, net, "ln_q", Q), _ln(p, net, "ln_out_v", V1),
                    _mha_weights(p, net, "cross"), heads)[0]
    Q1 = Q1 + _ffn(p, net, "ffq", _ln(p, net, "ln_ffq", Q1))
    O, S = dm.mha(_ln(p, net, "ln_out_q", Q1), _ln(p, net, "ln_out_v", V1),
                  _mha_weights(p, net, "final"), FINAL_HEADS)
    return Q1 + O, S


def _row(x: Tensor) -> Tensor:
    return x.reshape(1, -1)


# ---------------------------------------------------------------------------
# searches
# ---------------------------------------------------------------------------


def condition_embeddings(p: ModelParams, target: int | str) -> Tensor:
    """Predicate embeddings conditioned on the target: ``relu([h_k, h*] W + b)``."""
    k = p.target_id(target)
    H = p["H"]
    K = H.shape[0]
    h_star = dm.matmul(Tensor(np.ones((K, 1), dtype=H.dtype)), _row(H[k]))
    return dm.relu(dm.affine(dm.concat([H, h_star], axis=1), p["cond.w"], p["cond.b"]))


def operator_search(p: ModelParams, H_cond: Tensor, V0: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Operator attention per hop (``T x K``) and the aggregated hop embeddings (``T x d``).

    ``V0`` overrides the initial value set (the two head-variable embeddings).
    """
    Q = H_cond + p["e_op"]
    V = V0 if V0 is not None else dm.concat([_row(p["e_x"]), _row(p["e_x2"])], axis=0)
    rows, outs = [], []
    for t in range(p.config.T):
        V, _ = attend(p, "op", Q, V)  # the K x 2 attention here is not used downstream
        v, s = attend(p, "op", p["q_op"][t:t + 1], V)
        rows.append(s)
        outs.append(v)
    return dm.concat(rows, axis=0), dm.concat(outs, axis=0)


def statement_search(p: ModelParams, H_cond: Tensor, V_op: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Path-length attentions for both statement arguments and statement embeddings."""
    O1, S1 = attend(p, "stmt", H_cond + p["e_arg1"], V_op)
    O2, S2 = attend(p, "stmt", H_cond + p["e_arg2"], V_op)
    V = dm.relu(dm.affine(dm.concat([O1, O2], axis=1), p["stmt_fc.w"], p["stmt_fc.b"]))
    return S1, S2, V


def formula_search(p: ModelParams, V_stmt: Tensor):
    """Combination-level attentions, level embeddings and the output attention.

    Returns ``(form_first, form_second, V_levels, s_out, v_out)``.
    """
    prev, levels = V_stmt, [V_stmt]
    fa, fb = [], []
    for lvl in range(1, p.config.levels + 1):
        aug = dm.concat([prev + p["e_pos"], prev + p["e_neg"]], axis=0)
        O1, S1 = attend(p, "form", p[f"q_form1.{lvl}"], aug)
        O2, S2 = attend(p, "form", p[f"q_form2.{lvl}"], aug)
        prev = dm.relu(dm.affine(dm.concat([O1, O2], axis=1), p["form_fc.w"], p["form_fc.b"]))
        fa.append(S1)
        fb.append(S2)
        levels.append(prev)
    pool = levels[0] if len(levels) == 1 else dm.concat(levels, axis=0)
    v_out, s_out = attend(p, "form", p["q_out"], pool)
    return fa, fb, levels, s_out.reshape(-1), v_out.reshape(-1)


def generate(p: ModelParams, target: int | str) -> GeneratorOutput:
    """Attention bundle for ``target``; a pure function of the parameters and the target."""
    H_cond = condition_embeddings(p, target)
    S_op, V_op = operator_search(p, H_cond)
    S1, S2, V_stmt = statement_search(p, H_cond, V_op)
    fa, fb, levels, s_out, v_out = formula_search(p, V_stmt)
    bundle = AttentionBundle(S_op, S1, S2, fa, fb, s_out)
    return GeneratorOutput(bundle, V_op, V_stmt, levels, v_out)
