from __future__ import annotations

import asyncio
import json
from pathlib import Path
from typing import IO, Union

from .events import PayloadMessage, StateMessage

Message = Union[StateMessage, PayloadMessage]


class EventLog:
    """Line-delimited JSON record per delivered message; vector values only in debug mode."""

    def __init__(self, path: Path, *, debug: bool = False) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        self._f: IO[str] = path.open("w", encoding="utf-8")
        self.debug = debug

    def write(self, msg: Message) -> None:
        self._f.write(json.dumps(msg.envelope(self.debug), ensure_ascii=False) + "\n")

    def close(self) -> None:
        self._f.close()


class MailboxHub:
    """
    In-process, lossless message delivery between the cloud and the agents.

    Each address owns a mailbox; `deliver` drops a message in the recipient's box and
    `collect` drains it.
    """

    def __init__(self, event_log: EventLog | None = None) -> None:
        self._boxes: dict[str, list[Message]] = {}
        self._lock = asyncio.Lock()
        self._event_log = event_log

    async def register(self, address: str) -> None:
        async with self._lock:
            self._boxes.setdefault(address, [])

    async def deliver(self, to: str, msg: Message) -> None:
        async with self._lock:
            box = self._boxes.get(to)
            if box is None:
                raise KeyError(f"unknown address: {to}")
            box.append(msg)
            if self._event_log is not None:
                self._event_log.write(msg)

    async def collect(self, address: str) -> list[Message]:
        async with self._lock:
            msgs = self._boxes.get(address, [])
            self._boxes[address] = []
        return msgs

    async def broadcast(self, messages: dict[str, Message]) -> None:
        if not messages:
            return
        await asyncio.gather(*(self.deliver(to, msg) for to, msg in messages.items()))

    def pending(self) -> dict[str, int]:
        return {addr: len(box) for addr, box in self._boxes.items() if box}
