from __future__ import annotations

import logging
from abc import abstractmethod
from collections.abc import Awaitable, Callable
from enum import StrEnum, unique
from typing import Any, TypeVar, get_args

from ..message import Message

__all__ = ["Module", "ModuleState"]


class _NeverMatch: ...


@unique
class ModuleState(StrEnum):
    PENDING = "pending"
    STARTED = "started"
    STOPPED = "stopped"


class Module[T: type[Message] | tuple[type[Message], ...]]:
    """
    A handler of the message type(s) given as its generic parameter.

    * :meth:`handle` receives each matching message and may emit new ones through ``handler``.
    * :meth:`on_start` and :meth:`on_stop` bracket the module's lifetime in a sweep.
    """

    def __init__(self, *_: Any, logger: logging.Logger | None = None, **__: Any) -> None:
        self._logger = logger if logger is not None else logging.getLogger(type(self).__module__)
        self._state = ModuleState.PENDING

    @property
    def supports(self) -> type[Message] | tuple[type[Message], ...] | type[_NeverMatch]:
        supports_type = get_args(self.__orig_bases__[0])[0]  # type: ignore[attr-defined]
        if isinstance(supports_type, TypeVar):
            return _NeverMatch
        if members := get_args(supports_type):
            return members
        return supports_type  # type: ignore[no-any-return]

    def accepts(self, message: Message) -> bool:
        return isinstance(message, self.supports)

    @property
    def state(self) -> ModuleState:
        return self._state

    async def on_start(self) -> None:
        self._state = ModuleState.STARTED

    async def on_stop(self) -> None:
        self._state = ModuleState.STOPPED

    @abstractmethod
    async def handle(self, message: Any, *, handler: Callable[[Message], Awaitable[None]]) -> None: ...
