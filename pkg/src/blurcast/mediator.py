"""
Mediator for in-process asynchronous message routing.
"""

from __future__ import annotations

import asyncio
import logging
import uuid
from collections.abc import AsyncIterator, Awaitable, Callable, Coroutine
from contextlib import asynccontextmanager
from typing import Any, Self

from .message import Command, Event, Message
from .modules import Module

__all__ = [
    "Context",
    "Mediator",
]

logger = logging.getLogger(__name__)


class Context:
    """A unit of work: the events it produced and the tasks still running for it."""

    def __init__(self, handle_message: Callable[[Message, Context], Coroutine[Any, Any, None]]) -> None:
        self._handle_message = handle_message
        self._id = uuid.uuid4()
        self._results: asyncio.Queue[Event] = asyncio.Queue()
        self._active_tasks: set[asyncio.Task[None]] = set()

    @property
    def identifier(self) -> uuid.UUID:
        return self._id

    async def _graceful_finish(self) -> None:
        while self._active_tasks:
            pending = list(self._active_tasks)
            await asyncio.gather(*pending, return_exceptions=True)
            self._active_tasks.difference_update(pending)

    async def process(self, message: Message) -> None:
        logger.debug(f"Context `{self._id}` processing {type(message).__name__}")
        match message:
            case Event():
                await self._results.put(message)
                self._active_tasks.add(asyncio.create_task(self._handle_message(message, self)))
            case Command():
                self._active_tasks.add(asyncio.create_task(self._handle_message(message, self)))
            case _:
                logger.error(f"Context `{self._id}` - invalid message type: {type(message)}")
                raise TypeError(f"Invalid message type: {type(message)}")

    def add_task(self, task: asyncio.Task[None]) -> None:
        self._active_tasks.add(task)

    async def close(self) -> None:
        """Wait for every task of this unit of work, including tasks spawned meanwhile."""
        logger.debug(f"Context `{self._id}` closing")
        await self._graceful_finish()

    def results(self) -> list[Event]:
        """Drain the events produced so far."""
        drained = []
        while not self._results.empty():
            drained.append(self._results.get_nowait())
        return drained

    async def receive_result(self) -> Event:
        return await self._results.get()


class Mediator:
    """Routes messages to the attached modules whose generic parameter matches."""

    _instance: Self | None = None
    _initialized: bool = False

    def __new__(cls) -> Self:
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance  # type: ignore[no-any-return, unused-ignore]

    def __init__(self) -> None:
        if not self._initialized:
            self._contexts: dict[uuid.UUID, Context] = {}
            self._modules: set[Module[Any]] = set()
            self._initialized = True

    @asynccontextmanager
    async def context(self) -> AsyncIterator[Context]:
        context = Context(self.handle)
        self._contexts[context.identifier] = context
        try:
            yield context
        finally:
            await context.close()
            self._contexts.pop(context.identifier, None)

    @property
    def modules(self) -> set[Module[Any]]:
        return self._modules

    async def start(self) -> None:
        for module in self._modules:
            await module.on_start()
            logger.debug(f"Module {type(module).__name__} started")

    async def stop(self) -> None:
        """Stop the attached modules and reset the singleton."""
        logger.debug(f"{type(self).__name__} stopping")
        for module in self._modules:
            await module.on_stop()
        self._modules.clear()
        self._contexts.clear()
        type(self)._initialized = False
        type(self)._instance = None

    def attach(self, module: Module[Any]) -> None:
        self._modules.add(module)
        logger.debug(f"Module {type(module).__name__} attached (supports: {module.supports})")

    def detach(self, module: Module[Any]) -> None:
        if module in self._modules:
            self._modules.remove(module)
            logger.debug(f"Module {type(module).__name__} detached")
        else:
            logger.warning(f"Attempted to detach non-registered module {type(module).__name__}")

    async def handle(self, message: Message, context: Context | None = None) -> None:
        async def _handle(module: Module[Any], handler: Callable[[Message], Awaitable[None]]) -> None:
            name = type(module).__name__
            try:
                await module.handle(message, handler=handler)
            except Exception as error:
                logger.critical(f"Uncaught error from {name} handling {type(message).__name__}: {error}")
                logger.debug(f"Error details for {name}: {error}", exc_info=True)

        async def dispatch(context: Context) -> None:
            async def forward(produced: Message) -> None:
                await context.process(produced)

            matching = [module for module in self._modules if module.accepts(message)]
            for module in matching:
                context.add_task(asyncio.create_task(_handle(module, forward)))
            if not matching:
                logger.critical(f"Handler not found for message {type(message).__name__}")

        if context is None:
            async with self.context() as owned:
                await dispatch(owned)
        else:
            await dispatch(context)
