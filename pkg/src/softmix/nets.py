"""Agent networks and the state-conditioned linear mixing head.

All agents share one parameter set; a one-hot identity block in the
input distinguishes them.  Layout per agent step: small dense layer,
GRU cell, dense output head.  The policy head adds a logit clamp and a
masked softmax on top of the same trunk.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import (DiffNode, ParamSet, absolute, add, clamp, concat,
                       constant, log, masked_softmax, matmul, mul,
                       polyak_update, reduce_sum, relu, sigmoid, slice_axis,
                       stop_gradient, sub, tanh)

LOGIT_CLAMP_LO = -5.0
LOGIT_CLAMP_HI = 2.0

CHECKPOINT_HEADER = "softmix-params 1"


@dataclass(frozen=True)
class AgentNetSpec:
    """Shapes of the shared per-agent network."""

    obs_dim: int
    n_actions: int
    n_agents: int
    hidden_dim: int = 64

    @property
    def input_dim(self) -> int:
        # observation + one-hot of previous action + one-hot agent id
        return self.obs_dim + self.n_actions + self.n_agents


@dataclass
class RecurrentState:
    """Per-agent GRU hidden vectors; zeroed at each episode start."""

    h: np.ndarray  # (n_agents, hidden_dim)

    @classmethod
    def initial(cls, spec: AgentNetSpec) -> "RecurrentState":
        return cls(np.zeros((spec.n_agents, spec.hidden_dim)))


@dataclass
class PolicyDist:
    """Categorical action distribution with clamped logits and a mask."""

    probs: DiffNode          # (rows, n_actions)
    logits_clamped: DiffNode
    avail: np.ndarray        # (rows, n_actions), 1 = selectable

    @property
    def probs_value(self) -> np.ndarray:
        return self.probs.value

    def entropy_values(self) -> np.ndarray:
        """Shannon entropy per row (plain numbers, no graph)."""
        p = self.probs.value
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0.0, p * np.log(p), 0.0)
        return -terms.sum(axis=-1)


# ---------------------------------------------------------------------------
# shared agent trunk


_AGENT_LAYOUT = (
    # name, (rows_key, cols_key), fan_in_key
    ("fc1_w", ("input", "hidden"), "input"),
    ("fc1_b", ("one", "hidden"), "input"),
    ("gru_wz", ("hidden", "hidden"), "hidden"),
    ("gru_uz", ("hidden", "hidden"), "hidden"),
    ("gru_bz", ("one", "hidden"), "hidden"),
    ("gru_wr", ("hidden", "hidden"), "hidden"),
    ("gru_ur", ("hidden", "hidden"), "hidden"),
    ("gru_br", ("one", "hidden"), "hidden"),
    ("gru_wn", ("hidden", "hidden"), "hidden"),
    ("gru_un", ("hidden", "hidden"), "hidden"),
    ("gru_bn", ("one", "hidden"), "hidden"),
    ("fc2_w", ("hidden", "out"), "hidden"),
    ("fc2_b", ("one", "out"), "hidden"),
)


def init_agent_params(spec: AgentNetSpec, rng: np.random.Generator,
                      lr: float = 5e-4, rho: float = 0.99,
                      eps: float = 1e-5) -> ParamSet:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init for every array."""
    dims = {"input": spec.input_dim, "hidden": spec.hidden_dim,
            "out": spec.n_actions, "one": 1}
    entries = {}
    for name, (r, c), fan in _AGENT_LAYOUT:
        bound = 1.0 / np.sqrt(dims[fan])
        entries[name] = rng.uniform(-bound, bound, size=(dims[r], dims[c]))
    return ParamSet(entries, lr=lr, rho=rho, eps=eps)


def _rows_ones(rows: int) -> DiffNode:
    return constant(np.ones((rows, 1)))


def _affine(x: DiffNode, w: DiffNode, b: DiffNode, ones: DiffNode) -> DiffNode:
    # b is stored as a (1, out) row; tile it down the batch with a matmul.
    return add(matmul(x, w), matmul(ones, b))


def _gru_cell(p: Mapping[str, DiffNode], x: DiffNode, h: DiffNode,
              ones: DiffNode) -> DiffNode:
    z = sigmoid(add(_affine(x, p["gru_wz"], p["gru_bz"], ones), matmul(h, p["gru_uz"])))
    r = sigmoid(add(_affine(x, p["gru_wr"], p["gru_br"], ones), matmul(h, p["gru_ur"])))
    n = tanh(add(_affine(x, p["gru_wn"], p["gru_bn"], ones), matmul(mul(r, h), p["gru_un"])))
    one_mat = constant(np.ones(z.value.shape))
    return add(mul(sub(one_mat, z), n), mul(z, h))


def _as_input_node(spec: AgentNetSpec, inputs) -> DiffNode:
    if isinstance(inputs, DiffNode):
        node = inputs
    else:
        arr = np.asarray(inputs, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        node = constant(arr)
    if node.value.ndim != 2 or node.value.shape[1] != spec.input_dim:
        raise ValueError(f"agent input must be (rows, {spec.input_dim}), "
                         f"got {node.value.shape}")
    return node


def agent_trunk_forward(params: Mapping[str, DiffNode], spec: AgentNetSpec,
                        inputs, h) -> tuple[DiffNode, DiffNode]:
    """Dense -> GRU -> dense.  Returns (per-action outputs, new hidden)."""
    x = _as_input_node(spec, inputs)
    if isinstance(h, DiffNode):
        h_node = h
    else:
        arr = np.asarray(h, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        h_node = constant(arr)
    if h_node.value.shape != (x.value.shape[0], spec.hidden_dim):
        raise ValueError(f"hidden state must be ({x.value.shape[0]}, "
                         f"{spec.hidden_dim}), got {h_node.value.shape}")
    ones = _rows_ones(x.value.shape[0])
    x1 = relu(_affine(x, params["fc1_w"], params["fc1_b"], ones))
    h2 = _gru_cell(params, x1, h_node, ones)
    out = _affine(h2, params["fc2_w"], params["fc2_b"], ones)
    return out, h2


def agent_q_forward(params: Mapping[str, DiffNode], spec: AgentNetSpec,
                    agent_id: int, inputs, h) -> tuple[DiffNode, DiffNode]:
    """Per-action values q(history, .) for one agent (or a row batch)."""
    if not 0 <= agent_id < spec.n_agents:
        raise ValueError(f"agent_id {agent_id} out of range [0, {spec.n_agents})")
    return agent_trunk_forward(params, spec, inputs, h)


def policy_forward(params: Mapping[str, DiffNode], spec: AgentNetSpec,
                   agent_id: int, inputs, h,
                   avail_mask) -> tuple[PolicyDist, DiffNode]:
    """Clamped-logit masked softmax over available actions."""
    if not 0 <= agent_id < spec.n_agents:
        raise ValueError(f"agent_id {agent_id} out of range [0, {spec.n_agents})")
    logits, h2 = agent_trunk_forward(params, spec, inputs, h)
    avail = np.asarray(avail_mask, dtype=np.float64)
    if avail.ndim == 1:
        avail = avail[None, :]
    if avail.shape != logits.value.shape:
        raise ValueError(f"availability mask shape {avail.shape} does not "
                         f"match logits {logits.value.shape}")
    if not np.all(avail.sum(axis=1) >= 1.0):
        raise ValueError("policy_forward: no available action in some row")
    clamped = clamp(logits, LOGIT_CLAMP_LO, LOGIT_CLAMP_HI)
    probs = masked_softmax(clamped, avail, axis=1)
    return PolicyDist(probs=probs, logits_clamped=clamped, avail=avail), h2


def build_agent_input(spec: AgentNetSpec, obs: np.ndarray,
                      last_action_onehot: np.ndarray, agent_id: int) -> np.ndarray:
    """Concatenate observation, previous-action one-hot and id one-hot."""
    ident = np.zeros(spec.n_agents)
    ident[agent_id] = 1.0
    return np.concatenate([np.asarray(obs, dtype=np.float64),
                           np.asarray(last_action_onehot, dtype=np.float64),
                           ident])


# ---------------------------------------------------------------------------
# mixing head


@dataclass(frozen=True)
class MixingConfig:
    variant: str = "rank1"      # "rank1" or "deep" (hidden linear stack)
    hidden: int = 64            # width of the "deep" stack
    dual_entropy: bool = False  # second weight channel for entropy slots

    def __post_init__(self):
        if self.variant not in ("rank1", "deep"):
            raise ValueError(f"unknown mixing variant {self.variant!r}")
        if self.dual_entropy and self.variant != "rank1":
            raise ValueError("dual entropy channel requires the rank1 mixer")


class MixingHead:
    """State-conditioned monotone linear mixer of per-agent values.

    Weights come from affine hypernetworks of the global state and pass
    through an absolute value, so the mix is monotone in every slot and
    linear once the state is fixed.
    """

    def __init__(self, state_dim: int, n_agents: int, config: MixingConfig,
                 params: ParamSet):
        self.state_dim = state_dim
        self.n_agents = n_agents
        self.config = config
        self.params = params

    @classmethod
    def create(cls, state_dim: int, n_agents: int, config: MixingConfig,
               rng: np.random.Generator, lr: float = 5e-4, rho: float = 0.99,
               eps: float = 1e-5) -> "MixingHead":
        bound = 1.0 / np.sqrt(state_dim)
        u = lambda shape: rng.uniform(-bound, bound, size=shape)
        if config.variant == "rank1":
            entries = {"k_w": u((state_dim, n_agents)), "k_b": u((1, n_agents)),
                       "b_w": u((state_dim, 1)), "b_b": u((1, 1))}
            if config.dual_entropy:
                entries["k2_w"] = u((state_dim, n_agents))
                entries["k2_b"] = u((1, n_agents))
        else:
            m = config.hidden
            entries = {"w1_w": u((state_dim, n_agents * m)), "w1_b": u((1, n_agents * m)),
                       "hb_w": u((state_dim, m)), "hb_b": u((1, m)),
                       "w2_w": u((state_dim, m)), "w2_b": u((1, m)),
                       "b2_w": u((state_dim, 1)), "b2_b": u((1, 1))}
        return cls(state_dim, n_agents, config,
                   ParamSet(entries, lr=lr, rho=rho, eps=eps))

    def param_values(self) -> dict[str, np.ndarray]:
        return self.params.value_snapshot()

    def clone(self) -> "MixingHead":
        return MixingHead(self.state_dim, self.n_agents, self.config,
                          self.params.clone())

    def _check_forward_args(self, states: DiffNode, values: DiffNode,
                            entropy_values) -> None:
        rows = states.value.shape[0]
        if states.value.ndim != 2 or states.value.shape[1] != self.state_dim:
            raise ValueError(f"states must be (rows, {self.state_dim}), "
                             f"got {states.value.shape}")
        if values.value.shape != (rows, self.n_agents):
            raise ValueError(f"values must be ({rows}, {self.n_agents}), "
                             f"got {values.value.shape}")
        if entropy_values is not None and not self.config.dual_entropy:
            raise ValueError("entropy slots supplied to a single-channel mixer")
        if entropy_values is None and self.config.dual_entropy:
            raise ValueError("dual-entropy mixer needs explicit entropy slots")

    def forward(self, states: DiffNode, values: DiffNode,
                entropy_values: DiffNode | None = None,
                stop_params: bool = False) -> DiffNode:
        """Mixed joint value per row; differentiable in slots and hypernets.

        `stop_params` blocks gradients into the hypernetwork parameters
        (used when only the slot inputs should learn).
        """
        self._check_forward_args(states, values, entropy_values)
        p = self.params
        rows = states.value.shape[0]
        ones = _rows_ones(rows)
        guard = stop_gradient if stop_params else (lambda n: n)
        if self.config.variant == "rank1":
            k = guard(absolute(_affine(states, p["k_w"], p["k_b"], ones)))
            b = guard(_affine(states, p["b_w"], p["b_b"], ones))
            out = add(reduce_sum(mul(k, values), axis=1),
                      reduce_sum(b, axis=1))
            if entropy_values is not None:
                k2 = guard(absolute(_affine(states, p["k2_w"], p["k2_b"], ones)))
                out = add(out, reduce_sum(mul(k2, entropy_values), axis=1))
            return out
        m = self.config.hidden
        w1 = guard(absolute(_affine(states, p["w1_w"], p["w1_b"], ones)))
        hidden = guard(_affine(states, p["hb_w"], p["hb_b"], ones))
        ones_m = constant(np.ones((1, m)))
        for i in range(self.n_agents):
            w1_i = slice_axis(w1, 1, i * m, (i + 1) * m)
            v_i = matmul(slice_axis(values, 1, i, i + 1), ones_m)
            hidden = add(hidden, mul(w1_i, v_i))
        w2 = guard(absolute(_affine(states, p["w2_w"], p["w2_b"], ones)))
        b2 = guard(_affine(states, p["b2_w"], p["b2_b"], ones))
        return add(reduce_sum(mul(w2, hidden), axis=1), reduce_sum(b2, axis=1))

    def effective_weights(self, states: np.ndarray,
                          channel: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Plain-number per-agent weights and bias for the given states.

        Returns (weights (rows, n_agents), bias (rows,)); accepts one
        state vector and then returns ((n_agents,), scalar).
        """
        s = np.asarray(states, dtype=np.float64)
        single = s.ndim == 1
        if single:
            s = s[None, :]
        v = {k: n.value for k, n in self.params.entries.items()}
        if self.config.variant == "rank1":
            key = "k_w" if channel == 1 else "k2_w"
            keyb = "k_b" if channel == 1 else "k2_b"
            if channel == 2 and not self.config.dual_entropy:
                raise ValueError("no second weight channel on this mixer")
            k = np.abs(s @ v[key] + v[keyb])
            b = (s @ v["b_w"] + v["b_b"])[:, 0]
        else:
            m = self.config.hidden
            w1 = np.abs(s @ v["w1_w"] + v["w1_b"]).reshape(-1, self.n_agents, m)
            w2 = np.abs(s @ v["w2_w"] + v["w2_b"])
            hb = s @ v["hb_w"] + v["hb_b"]
            k = np.einsum("rim,rm->ri", w1, w2)
            b = (w2 * hb).sum(axis=1) + (s @ v["b2_w"] + v["b2_b"])[:, 0]
        if single:
            return k[0], b[0]
        return k, b


def _promote_matrix(x, width: int, what: str) -> DiffNode:
    if isinstance(x, DiffNode):
        if x.value.ndim != 2:
            raise ValueError(f"{what} node must be 2-D, got {x.value.shape}")
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[1] != width:
        raise ValueError(f"{what} must have width {width}, got {arr.shape}")
    return constant(arr)


def mixing_forward(head: MixingHead, state, per_agent_values,
                   entropy_values=None, stop_params: bool = False) -> DiffNode:
    """Mix per-agent values under the given global state.

    Accepts plain arrays (promoted to constants) or graph nodes shaped
    (rows, n); returns a (rows,) node.
    """
    states = _promote_matrix(state, head.state_dim, "state")
    values = _promote_matrix(per_agent_values, head.n_agents, "per-agent values")
    ent = None
    if entropy_values is not None:
        ent = _promote_matrix(entropy_values, head.n_agents, "entropy slots")
    return head.forward(states, values, ent, stop_params=stop_params)


# ---------------------------------------------------------------------------
# exact per-agent expectations


def _safe_log_probs(probs: DiffNode, avail: np.ndarray) -> DiffNode:
    # Unavailable actions carry probability exactly 0; lift them to 1 so
    # the log is defined, their contribution is zeroed by the p factor.
    floor = constant((np.asarray(avail) <= 0.0).astype(np.float64))
    return log(add(probs, floor))


def expected_soft_rows(q_rows: DiffNode, dist: PolicyDist,
                       alpha: float) -> DiffNode:
    """Row-wise sum_a p(a) * (q(a) - alpha*log p(a)); shape (rows, 1)."""
    if q_rows.value.shape != dist.probs.value.shape:
        raise ValueError(f"q shape {q_rows.value.shape} does not match "
                         f"distribution {dist.probs.value.shape}")
    inner = q_rows
    if alpha != 0.0:
        logp = _safe_log_probs(dist.probs, dist.avail)
        inner = sub(q_rows, mul(constant(np.full(q_rows.value.shape, float(alpha))), logp))
    return reduce_sum(mul(dist.probs, inner), axis=1, keepdims=True)


def expected_entropy_rows(dist: PolicyDist, alpha: float) -> DiffNode:
    """Row-wise alpha * H(pi) as a graph node; shape (rows, 1)."""
    logp = _safe_log_probs(dist.probs, dist.avail)
    scale = constant(np.full(logp.value.shape, -float(alpha)))
    return reduce_sum(mul(dist.probs, mul(scale, logp)), axis=1, keepdims=True)


def expected_soft_local_q(q_values, dist: PolicyDist, alpha: float) -> DiffNode:
    """E_pi[q - alpha*log pi] over available actions, as a scalar node."""
    if alpha < 0.0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    q_node = _promote_matrix(q_values, dist.probs.value.shape[1], "q values")
    if q_node.value.shape[0] != dist.probs.value.shape[0]:
        raise ValueError("q rows do not match distribution rows")
    rows = expected_soft_rows(q_node, dist, alpha)
    return reduce_sum(rows)


# ---------------------------------------------------------------------------
# critic stacks and target snapshots


@dataclass
class CriticStack:
    """Shared agent value net plus its mixing head (one of a twin pair)."""

    spec: AgentNetSpec
    state_dim: int
    agent: ParamSet
    mixer: MixingHead

    @classmethod
    def create(cls, spec: AgentNetSpec, state_dim: int, mixing: MixingConfig,
               rng: np.random.Generator, lr: float = 5e-4, rho: float = 0.99,
               eps: float = 1e-5) -> "CriticStack":
        agent = init_agent_params(spec, rng, lr=lr, rho=rho, eps=eps)
        mixer = MixingHead.create(state_dim, spec.n_agents, mixing, rng,
                                  lr=lr, rho=rho, eps=eps)
        return cls(spec, state_dim, agent, mixer)

    def param_sets(self) -> tuple[ParamSet, ParamSet]:
        return (self.agent, self.mixer.params)

    def clone(self) -> "CriticStack":
        return CriticStack(self.spec, self.state_dim, self.agent.clone(),
                           self.mixer.clone())


def snapshot_targets(critic_online, critic_target, smoothing: float) -> None:
    """Polyak-average every online stack into its target twin."""
    online = list(critic_online) if isinstance(critic_online, (tuple, list)) else [critic_online]
    target = list(critic_target) if isinstance(critic_target, (tuple, list)) else [critic_target]
    if len(online) != len(target):
        raise ValueError("online/target stack counts differ")
    for on, tg in zip(online, target):
        polyak_update(on.agent, tg.agent, smoothing)
        polyak_update(on.mixer.params, tg.mixer.params, smoothing)


# ---------------------------------------------------------------------------
# checkpoint file format
#
# Line 1: "softmix-params 1".  Every following line is one array:
#   <section>/<name> <d0>,<d1>,... <hex float> <hex float> ...
# Values are row-major C-order float64 written with float.hex(), so a
# round trip is bit exact.


def save_checkpoint(path, sections: Mapping[str, ParamSet]) -> None:
    lines = [CHECKPOINT_HEADER]
    for section in sections:
        pset = sections[section]
        for name, node in pset.entries.items():
            dims = ",".join(str(d) for d in node.value.shape)
            payload = " ".join(float(x).hex() for x in node.value.ravel())
            lines.append(f"{section}/{name} {dims} {payload}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> dict[str, dict[str, np.ndarray]]:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ValueError(f"not a softmix checkpoint: {path}")
    out: dict[str, dict[str, np.ndarray]] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        key, dims, payload = line.split(" ", 2)
        section, name = key.split("/", 1)
        shape = tuple(int(d) for d in dims.split(","))
        arr = np.array([float.fromhex(tok) for tok in payload.split(" ")],
                       dtype=np.float64).reshape(shape)
        out.setdefault(section, {})[name] = arr
    return out


def apply_checkpoint(sections: Mapping[str, ParamSet],
                     loaded: Mapping[str, dict[str, np.ndarray]]) -> None:
    for section, pset in sections.items():
        if section not in loaded:
            raise ValueError(f"checkpoint is missing section {section!r}")
        pset.load_values(loaded[section])
