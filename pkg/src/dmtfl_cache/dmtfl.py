"""Decentralised multi-task fair training over a synchronous network of
base-station nodes.

Each round runs five phases in bulk-synchronous order:

1. every ordered pair (b, i) estimates its discrepancy by subgradient ascent
   on a scratch copy of model b, probing node i through messages;
2. every node evaluates all known models on its own data and sends each
   owner the loss and gradient;
3. the mixture weights are updated according to the chosen policy;
4. every node takes a projected gradient step on its own model and
   broadcasts the result;
5. every node takes a projected gradient step on its row of alpha.

Nodes touch only their own dataset. Model vectors, losses and gradients move
between nodes as :class:`Message` objects; the engine only aggregates
network-wide scalars (mixture weights, the symmetrised discrepancy matrix and
the alpha penalty gradient, whose square-root term couples all rows).
"""
from __future__ import annotations

import csv
import enum
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .discrepancy import DiscrepancyMatrix, ascend
from .domain import AlphaMatrix, BsDataset, CachingModel, HyperParams, MixtureWeights
from .numerics import EpsCover, build_eps_cover, project_capped_simplex, _simplex_array
from .objective import (
    LossConfig,
    combine_phi_grad,
    empirical_loss,
    empirical_loss_grad,
    loss_matrix,
    penalty_P,
    penalty_grad_row,
    regulariser,
    weighted_from_losses,
)

W_POLICIES = ("uniform", "proportional", "adversarial")
FLOAT_BYTES = 8


class LinkCapacityError(RuntimeError):
    """A link carried more bytes in one round than its capacity allows."""


class MessageKind(enum.Enum):
    BROADCAST_MODEL = "BroadcastModel"
    LOSS_AND_SUBGRAD = "LossAndSubgrad"
    FINAL_MODEL = "FinalModel"


@dataclass(frozen=True, eq=False)
class Message:
    kind: MessageKind
    sender: int
    receiver: int
    round: int
    vector: np.ndarray
    loss: Optional[float] = None
    weight: Optional[float] = None
    tag: str = ""

    @property
    def nbytes(self) -> int:
        scalars = (self.loss is not None) + (self.weight is not None)
        return FLOAT_BYTES * (self.vector.size + scalars)


class Network:
    """Routes messages between nodes and keeps per-round accounting."""

    def __init__(self, nodes, link_capacity=None, record=False):
        self.nodes = nodes
        self.link_capacity = link_capacity
        self.record = record
        self.log: list[Message] = []
        self._lock = threading.Lock()
        self._link_bytes: dict[tuple[int, int], int] = {}
        self.messages = 0
        self.bytes = 0

    def new_round(self):
        self._link_bytes = {}
        self.messages = 0
        self.bytes = 0

    def _account(self, msg: Message):
        n_tiles = self.nodes[msg.sender].phi.size
        if msg.vector.size != n_tiles:
            raise ValueError(f"message payload has {msg.vector.size} entries, expected {n_tiles}")
        with self._lock:
            key = (msg.sender, msg.receiver)
            used = self._link_bytes.get(key, 0) + msg.nbytes
            if self.link_capacity is not None and used > self.link_capacity:
                raise LinkCapacityError(
                    f"link {key} carried {used} bytes in round {msg.round}, capacity {self.link_capacity}")
            self._link_bytes[key] = used
            self.messages += 1
            self.bytes += msg.nbytes
            if self.record:
                self.log.append(msg)

    def send(self, msg: Message):
        self._account(msg)
        self.nodes[msg.receiver].receive(msg)

    def request(self, msg: Message) -> Message:
        """Deliver a probe and return the receiver's reply."""
        self._account(msg)
        reply = self.nodes[msg.receiver].answer_probe(msg)
        self._account(reply)
        return reply


class BsNode:
    """One base station: its dataset, its model, its alpha row and the latest
    models it has heard from the others."""

    def __init__(self, bs_id: int, dataset: BsDataset, phi0, alpha_row, n_bs: int, hp: HyperParams,
                 loss: LossConfig):
        self.bs_id = bs_id
        self._data = dataset
        self.hp = hp
        self.loss = loss
        self.phi = np.array(phi0, dtype=float)
        self.alpha_row = np.array(alpha_row, dtype=float)
        self.known = np.tile(self.phi, (n_bs, 1))
        self.rho = float(hp.rho_for(n_bs)[bs_id])
        self.loss_row = np.zeros(n_bs)
        self._eval_inbox: list[Message] = []
        self._self_grad = None

    @property
    def size(self) -> int:
        return self._data.size

    def receive(self, msg: Message):
        if msg.kind in (MessageKind.BROADCAST_MODEL, MessageKind.FINAL_MODEL):
            self.known[msg.sender] = msg.vector
        elif msg.kind is MessageKind.LOSS_AND_SUBGRAD:
            self._eval_inbox.append(msg)

    def answer_probe(self, msg: Message) -> Message:
        value, grad = empirical_loss_grad(msg.vector, self._data, self.loss)
        return Message(MessageKind.LOSS_AND_SUBGRAD, self.bs_id, msg.sender, msg.round, grad,
                       loss=value, tag="probe")

    def estimate(self, other: int, request: Callable[[Message], Message], rnd: int) -> float:
        """Discrepancy with node ``other``, probing it once per ascent iterate."""
        hp = self.hp

        def evaluate(phi):
            reply = request(Message(MessageKind.BROADCAST_MODEL, self.bs_id, other, rnd, phi.copy(), tag="probe"))
            lb, gb = empirical_loss_grad(phi, self._data, self.loss)
            _finite(np.r_[lb, gb, reply.loss, reply.vector], "discrepancy probe", rnd, self.bs_id)
            return lb, gb, reply.loss, reply.vector

        value, _ = ascend(self.phi, evaluate, hp.mu, hp.Ninner, hp.cache_budget)
        return value

    def evaluation_messages(self, rnd: int) -> list[Message]:
        """Evaluate every known model on local data; one message per other owner."""
        out = []
        for i, phi_i in enumerate(self.known):
            value, grad = empirical_loss_grad(phi_i, self._data, self.loss)
            self.loss_row[i] = value
            if i == self.bs_id:
                self._self_grad = grad
            else:
                out.append(Message(MessageKind.LOSS_AND_SUBGRAD, self.bs_id, i, rnd, grad,
                                   loss=value, weight=float(self.alpha_row[i]), tag="eval"))
        return out

    def descend(self, w: np.ndarray):
        """Projected gradient step on the own model from the round's evaluations."""
        entries = {m.sender: (m.weight, m.vector) for m in self._eval_inbox}
        entries[self.bs_id] = (float(self.alpha_row[self.bs_id]), self._self_grad)
        senders = sorted(entries)
        weights = [w[k] * entries[k][0] for k in senders]
        grads = [entries[k][1] for k in senders]
        g = combine_phi_grad(self.phi, weights, grads, self.rho)
        _finite(g, "model gradient", rnd=None, bs=self.bs_id)
        self.phi = project_capped_simplex(self.phi - self.hp.eta * g, self.hp.cache_budget)
        self.known[self.bs_id] = self.phi
        self._eval_inbox = []
        self._self_grad = None
        _finite(self.phi, "model", rnd=None, bs=self.bs_id)

    def model_message(self, receiver: int, rnd: int, final=False) -> Message:
        kind = MessageKind.FINAL_MODEL if final else MessageKind.BROADCAST_MODEL
        return Message(kind, self.bs_id, receiver, rnd, self.phi.copy(), tag="model")

    def local_losses(self) -> np.ndarray:
        return np.array([empirical_loss(p, self._data, self.loss) for p in self.known])

    def alpha_step(self, w_b: float, penalty_grad: np.ndarray, step: float):
        g = w_b * self.local_losses() + penalty_grad
        _finite(g, "alpha gradient", rnd=None, bs=self.bs_id)
        self.alpha_row = _simplex_array(self.alpha_row - step * g)
        _finite(self.alpha_row, "alpha", rnd=None, bs=self.bs_id)


def _finite(a, what, rnd, bs):
    if not np.all(np.isfinite(a)):
        where = f" at round {rnd}" if rnd is not None else ""
        raise FloatingPointError(f"non-finite {what} at base station {bs}{where}")


@dataclass
class RoundRecord:
    round: int
    objective_before: float
    objective_after: float
    losses: np.ndarray          # L_b(phi_b, D_b) after the round
    alpha: np.ndarray
    v: np.ndarray
    w: np.ndarray
    alpha_penalty_grad: np.ndarray
    messages: int
    bytes: int
    models: np.ndarray          # (B, F) after the round


@dataclass
class TrainingHistory:
    records: list[RoundRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def objectives(self) -> np.ndarray:
        return np.array([[r.objective_before, r.objective_after] for r in self.records])

    def total_messages(self) -> int:
        return sum(r.messages for r in self.records)


@dataclass
class DmtflResult:
    models: list[CachingModel]
    alpha: AlphaMatrix
    history: TrainingHistory
    weights: MixtureWeights
    discrepancy: DiscrepancyMatrix
    cover: EpsCover
    message_log: list[Message] = field(default_factory=list)

    @property
    def phi(self) -> np.ndarray:
        return np.stack([m.phi for m in self.models])


def init_state(datasets: Sequence[BsDataset], hp: HyperParams):
    """Uniform cache weights ``C/F``, uniform alpha rows and uniform mixture."""
    B = len(datasets)
    F = datasets[0].n_tiles
    hp.check_tiles(F)
    phi0 = np.full((B, F), hp.cache_budget / F)
    return phi0, AlphaMatrix.uniform(B), MixtureWeights.uniform(B)


def _initial_w(policy, datasets):
    B = len(datasets)
    if policy == "proportional":
        m = np.array([d.size for d in datasets], dtype=float)
        return m / m.sum()
    return np.full(B, 1.0 / B)


def w_step(w, models, alpha, data, hp: HyperParams, cover: EpsCover, losses=None) -> MixtureWeights:
    """Worst-case mixture over the cover centers for fixed models and alpha.

    Ties (within a relative 1e-12) go to the lowest center index. The current
    ``w`` is kept when it scores strictly higher than every center, so the
    weighted objective never decreases.
    """
    A = alpha.alpha if isinstance(alpha, AlphaMatrix) else np.asarray(alpha, dtype=float)
    w_prev = w.w if isinstance(w, MixtureWeights) else np.asarray(w, dtype=float)
    L = loss_matrix(models, data, hp_loss(hp)) if losses is None else losses
    r = np.array([float(A[b] @ L[b]) for b in range(L.shape[0])])
    values = cover.centers @ r
    top = values.max()
    k = int(np.nonzero(values >= top - 1e-12 * max(1.0, abs(top)))[0][0])
    if weighted_from_losses(w_prev, A, L) > weighted_from_losses(cover.centers[k], A, L):
        return MixtureWeights(w_prev)
    return MixtureWeights(cover.centers[k])


def hp_loss(hp: HyperParams) -> LossConfig:
    return LossConfig(hp.e_floor, hp.H, hp.predictor)


def run_dmtfl(datasets: Sequence[BsDataset], hp: HyperParams, w_policy: str = "adversarial",
              threads: int = 1, record_messages: bool = False,
              cover: Optional[EpsCover] = None) -> DmtflResult:
    """Train personalised caching models with collaboration weights.

    ``w_policy`` is ``uniform``, ``proportional`` (w_b proportional to m_b)
    or ``adversarial`` (worst case over the epsilon-cover, re-chosen every
    round). Runs are bit-reproducible; ``threads > 1`` parallelises the
    discrepancy probes without changing any result.
    """
    if not datasets:
        raise ValueError("need at least one dataset")
    if w_policy not in W_POLICIES:
        raise ValueError(f"w_policy must be one of {W_POLICIES}")
    B = len(datasets)
    F = datasets[0].n_tiles
    if any(d.n_tiles != F for d in datasets):
        raise ValueError("datasets disagree on tile count")
    loss = hp_loss(hp)
    phi0, alpha0, _ = init_state(datasets, hp)
    if cover is None:
        cover = build_eps_cover(B, hp.eps_cover, hp.w_box)
    w = _initial_w(w_policy, datasets)
    m = np.array([d.size for d in datasets], dtype=float)

    nodes = [BsNode(b, datasets[b], phi0[b], alpha0.alpha[b], B, hp, loss) for b in range(B)]
    net = Network(nodes, hp.link_capacity, record_messages)
    history = TrainingHistory()
    V = DiscrepancyMatrix.zeros(B)
    pool = ThreadPoolExecutor(threads) if threads > 1 and B > 1 else None

    def objective(A, W, Vm, losses):
        P = np.stack([n.phi for n in nodes])
        return (weighted_from_losses(W, A, losses) + regulariser(P, hp.rho_for(B))
                + hp.H * penalty_P(W, A, Vm, m, hp.H, hp.delta, cover.size))

    try:
        for t in range(1, hp.T + 1):
            net.new_round()
            # 1. discrepancy estimation on scratch copies
            pairs = [(b, i) for b in range(B) for i in range(B) if i != b]
            if pool is not None:
                est = list(pool.map(lambda p: nodes[p[0]].estimate(p[1], net.request, t), pairs))
            else:
                est = [nodes[b].estimate(i, net.request, t) for b, i in pairs]
            raw = np.zeros((B, B))
            for (b, i), value in zip(pairs, est):
                raw[b, i] = value
            _finite(raw, "discrepancy", t, "all")
            V = DiscrepancyMatrix.from_estimates(raw)

            # 2. cross-evaluation of the current models
            outgoing = []
            for node in nodes:
                outgoing.extend(node.evaluation_messages(t))
            for msg in outgoing:
                net.send(msg)
            L = np.stack([n.loss_row for n in nodes])
            A = np.stack([n.alpha_row for n in nodes])

            # 3. mixture weights
            if w_policy == "adversarial":
                w = w_step(w, None, A, datasets, hp, cover, losses=L).w
            before = objective(A, w, V, L)

            # 4. model descent and broadcast
            for node in nodes:
                node.descend(w)
            for node in nodes:
                for other in range(B):
                    if other != node.bs_id:
                        net.send(node.model_message(other, t))

            # 5. alpha descent at alpha^t with the new models
            step = hp.upsilon / math.sqrt(t)
            pen = np.stack([penalty_grad_row(w, A, V, m, hp.H, hp.delta, cover.size, b) for b in range(B)])
            for b, node in enumerate(nodes):
                node.alpha_step(w[b], pen[b], step)

            A_new = np.stack([n.alpha_row for n in nodes])
            L_new = np.stack([n.local_losses() for n in nodes])
            after = objective(A_new, w, V, L_new)
            if not (math.isfinite(before) and math.isfinite(after)):
                raise FloatingPointError(f"non-finite objective at round {t}")
            history.records.append(RoundRecord(
                t, before, after, np.diag(L_new).copy(), A_new, V.v.copy(), np.array(w), pen,
                net.messages, net.bytes, np.stack([n.phi for n in nodes])))
    finally:
        if pool is not None:
            pool.shutdown()

    log = net.log
    if hp.T > 0:
        net.new_round()  # the final exchange has its own link budget
        for node in nodes:
            for other in range(B):
                if other != node.bs_id:
                    net.send(node.model_message(other, hp.T, final=True))
    models = [CachingModel(b, np.clip(n.phi, 0.0, 1.0), hp.cache_budget) for b, n in enumerate(nodes)]
    alpha = AlphaMatrix(np.stack([n.alpha_row for n in nodes]))
    return DmtflResult(models, alpha, history, MixtureWeights(w), V, cover, log)


def write_checkpoints(path, history: TrainingHistory) -> None:
    """One CSV row per base station per round: round, bs_id, phi, alpha row."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        if not history.records:
            return
        B, F = history.records[0].models.shape
        out.writerow(["round", "bs_id"] + [f"phi{f}" for f in range(F)] + [f"alpha{i}" for i in range(B)])
        for rec in history.records:
            for b in range(B):
                out.writerow([rec.round, b] + [repr(float(x)) for x in rec.models[b]]
                             + [repr(float(x)) for x in rec.alpha[b]])
