from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Literal

import numpy as np

Direction = Literal["uplink", "downlink"]

CLOUD = "cloud"


def agent_address(i: int) -> str:
    return f"agent:{i}"


@dataclass(frozen=True, eq=False)
class StateMessage:
    # agent i -> cloud: x_i(k)
    k: int
    sender: int
    x: np.ndarray

    direction: Direction = "uplink"

    def envelope(self, debug: bool = False) -> dict[str, Any]:
        out: dict[str, Any] = {
            "k": self.k,
            "direction": self.direction,
            "from": agent_address(self.sender),
            "to": CLOUD,
            "length": int(self.x.size),
        }
        if debug:
            out["values"] = self.x.tolist()
        return out


@dataclass(frozen=True, eq=False)
class PayloadMessage:
    # cloud -> agent i: privatized g_{x_i}(x(k))^T mu(k), an n_i-vector
    k: int
    recipient: int
    payload: np.ndarray

    direction: Direction = "downlink"

    def envelope(self, debug: bool = False) -> dict[str, Any]:
        out: dict[str, Any] = {
            "k": self.k,
            "direction": self.direction,
            "from": CLOUD,
            "to": agent_address(self.recipient),
            "length": int(self.payload.size),
        }
        if debug:
            out["values"] = self.payload.tolist()
        return out


@dataclass(frozen=True, eq=False)
class TimestepLog:
    k: int
    uplink: tuple[StateMessage, ...]
    downlink: tuple[PayloadMessage, ...]
    mu_after: np.ndarray
    # cloud-side only (debug mode): payloads before noise, per agent
    exact_payloads: tuple[np.ndarray, ...] | None = None
