from __future__ import annotations

import asyncio
import logging
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .events import CLOUD, PayloadMessage, StateMessage, TimestepLog, agent_address
from .geometry import DualSet, EnsembleState, compute_dual_radius
from .mailbox import EventLog, MailboxHub
from .privacy import NoiseBank, PrivacyPolicy
from .problem import BoxSet, ConstraintFunction, ObjectiveTerm, ProblemSpec
from .runtime import RunTrace
from .schedule import Schedule
from .solver import (
    ReferenceSolution,
    SaddleMap,
    SolverConfig,
    TraceRecorder,
    agent_payload,
    agent_primal_step,
    cloud_dual_step,
    initial_state,
)

log = logging.getLogger(__name__)


class ProtocolError(RuntimeError):
    pass


class AgentNode:
    """
    Holds f_i, X_i and x_i only. Its update sees nothing but the received payload and
    its own copy of the step-size schedule.
    """

    def __init__(self, agent_id: int, objective: ObjectiveTerm, box: BoxSet, x0: np.ndarray, schedule: Schedule) -> None:
        self.id = agent_id
        self.address = agent_address(agent_id)
        self.objective = objective
        self.box = box
        self.state = np.array(x0, dtype=float)
        self._schedule = schedule

    async def send_state(self, hub: MailboxHub, k: int) -> None:
        await hub.deliver(CLOUD, StateMessage(k, self.id, self.state))

    async def receive_and_step(self, hub: MailboxHub, k: int) -> None:
        msgs = await hub.collect(self.address)
        if len(msgs) != 1 or not isinstance(msgs[0], PayloadMessage) or msgs[0].k != k:
            raise ProtocolError(f"agent {self.id} expected one payload for round {k}, got {len(msgs)} message(s)")
        payload = msgs[0].payload
        if payload.shape != self.state.shape:
            raise ProtocolError(f"agent {self.id} received a payload of shape {payload.shape}")
        alpha, gamma = self._schedule.step(k)
        self.state = agent_primal_step(
            self.id, self.state, payload, alpha, gamma, self.objective.grad(self.state), self.box
        )


class CloudNode:
    """Holds g, the dual set, mu and the noise channels; only privatized payloads leave it."""

    def __init__(
        self,
        constraint: ConstraintFunction,
        dual_set: DualSet,
        schedule: Schedule,
        noise: NoiseBank,
        mu0: np.ndarray,
        hub: MailboxHub,
        *,
        debug: bool = False,
    ) -> None:
        self.constraint = constraint
        self.dual_set = dual_set
        self.mu = np.array(mu0, dtype=float)
        self.noise = noise
        self.hub = hub
        self.debug = debug
        self._schedule = schedule

    @property
    def num_agents(self) -> int:
        return len(self.constraint.agent_blocks)

    async def gather_states(self, k: int) -> tuple[tuple[StateMessage, ...], np.ndarray]:
        msgs = await self.hub.collect(CLOUD)
        by_sender: dict[int, StateMessage] = {}
        for msg in msgs:
            if not isinstance(msg, StateMessage) or msg.k != k or msg.sender in by_sender:
                raise ProtocolError(f"unexpected message at the cloud in round {k}")
            by_sender[msg.sender] = msg
        missing = [i for i in range(1, self.num_agents + 1) if i not in by_sender]
        if missing:
            raise ProtocolError(f"round {k}: missing state message(s) from agent(s) {missing}")
        uplink = tuple(by_sender[i] for i in range(1, self.num_agents + 1))
        for msg, blk in zip(uplink, self.constraint.agent_blocks):
            if msg.x.size != blk.stop - blk.start:
                raise ProtocolError(f"round {k}: agent {msg.sender} sent a state of length {msg.x.size}")
        return uplink, np.concatenate([msg.x for msg in uplink])

    def privatize(self, x: np.ndarray, k: int) -> tuple[list[np.ndarray], np.ndarray, tuple[np.ndarray, ...] | None]:
        """Payloads g^_{x_i}^T mu for every agent and g^ for the dual update."""
        jac = self.constraint.jacobian(x)
        g = self.constraint.value(x)
        payloads = []
        exact = [] if self.debug else None
        for i, blk in enumerate(self.constraint.agent_blocks, start=1):
            block = jac[:, blk]
            payloads.append(agent_payload(block, self.mu, self.noise.agent(i, k)))
            if exact is not None:
                exact.append(agent_payload(block, self.mu))
        w_g = self.noise.constraint(k)
        g_hat = g if w_g is None else g + w_g
        return payloads, g_hat, None if exact is None else tuple(exact)

    async def update_dual(self, g_hat: np.ndarray, k: int) -> None:
        alpha, gamma = self._schedule.step(k)
        self.mu = cloud_dual_step(self.mu, g_hat, alpha, gamma, self.dual_set)


async def run_round(agents: Sequence[AgentNode], cloud: CloudNode, k: int) -> TimestepLog:
    """
    Timestep k (k >= 1) moves z(k-1) to z(k):

    1. agents send x_i; the cloud stacks x
    2. the cloud privatizes g_{x_i}(x) and g(x)
    3. the cloud sends each agent its payload g^_{x_i}^T mu
    4. agents take their primal step while the cloud updates mu
    """
    hub = cloud.hub
    await asyncio.gather(*(a.send_state(hub, k) for a in agents))
    uplink, x = await cloud.gather_states(k)

    payloads, g_hat, exact = cloud.privatize(x, k)
    downlink = tuple(PayloadMessage(k, a.id, p) for a, p in zip(agents, payloads))
    await hub.broadcast({agent_address(m.recipient): m for m in downlink})

    await asyncio.gather(*(a.receive_and_step(hub, k) for a in agents), cloud.update_dual(g_hat, k))
    leftover = hub.pending()
    if leftover:
        raise ProtocolError(f"round {k} ended with undelivered messages: {leftover}")
    return TimestepLog(k, uplink, downlink, cloud.mu, exact)


def build_nodes(
    spec: ProblemSpec,
    dual_set: DualSet,
    schedule: Schedule,
    noise: NoiseBank,
    z0: EnsembleState,
    hub: MailboxHub,
    *,
    debug: bool = False,
) -> tuple[list[AgentNode], CloudNode]:
    agents = [
        AgentNode(i, obj, box, z0.x[blk], schedule)
        for i, (obj, box, blk) in enumerate(zip(spec.objectives, spec.boxes, spec.blocks), start=1)
    ]
    cloud = CloudNode(spec.constraint, dual_set, schedule, noise, z0.mu, hub, debug=debug)
    return agents, cloud


async def _simulate(
    spec: ProblemSpec,
    config: SolverConfig,
    policy: PrivacyPolicy | None,
    seed: int,
    dual_set: DualSet,
    reference: ReferenceSolution | None,
    z0: EnsembleState | None,
    noisy_dual: bool,
    debug: bool,
    event_log: Path | None,
    keep_logs: bool,
) -> tuple[RunTrace, list[TimestepLog]]:
    noise = NoiseBank.for_policy(spec, policy, seed, noisy_dual=noisy_dual)
    z = initial_state(spec, dual_set, z0)
    elog = EventLog(event_log, debug=debug) if event_log is not None else None
    hub = MailboxHub(elog)
    agents, cloud = build_nodes(spec, dual_set, config.schedule, noise, z, hub, debug=debug)
    await asyncio.gather(*(hub.register(a.address) for a in agents), hub.register(CLOUD))

    recorder = TraceRecorder(SaddleMap(spec, dual_set), config, seed, reference)
    recorder.start(z)
    logs: list[TimestepLog] = []
    try:
        for k in range(1, config.max_iters + 1):
            entry = await run_round(agents, cloud, k)
            if keep_logs:
                logs.append(entry)
            nxt = EnsembleState(np.concatenate([a.state for a in agents]), cloud.mu)
            stop = recorder.observe(k, z, nxt, None, noise_free=not noise.active)
            z = nxt
            if stop:
                break
    finally:
        if elog is not None:
            elog.close()
    return recorder.finish(), logs


def simulate(
    spec: ProblemSpec,
    config: SolverConfig,
    policy: PrivacyPolicy | None = None,
    seed: int = 0,
    rounds: int | None = None,
    *,
    dual_set: DualSet | None = None,
    reference: ReferenceSolution | None = None,
    z0: EnsembleState | None = None,
    noisy_dual: bool = True,
    debug: bool = False,
    event_log: Path | None = None,
    keep_logs: bool = True,
) -> tuple[RunTrace, list[TimestepLog]]:
    """
    Run the cloud/agent protocol for `rounds` timesteps (default config.max_iters).

    The trace matches `solver.solve` for the same arguments.
    """
    if rounds is not None:
        if rounds < 1:
            raise ValueError("rounds must be >= 1")
        config = replace(config, max_iters=rounds)
    dual_set = dual_set or compute_dual_radius(spec)
    return asyncio.run(
        _simulate(spec, config, policy, seed, dual_set, reference, z0, noisy_dual, debug, event_log, keep_logs)
    )
