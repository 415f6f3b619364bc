"""In-process topic bus with bounded, drop-oldest subscriber queues."""
from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Any, Iterator

DEFAULT_QUEUE_SIZE = 1024
STATUS_TOPIC = "bus/status"
_DEFAULT = object()


@dataclass(frozen=True)
class Topic:
    name: str
    payload_type: type | None = None


class Subscription:
    """FIFO of messages published on one topic after subscribing."""

    def __init__(self, topic: Topic, maxsize: int | None = DEFAULT_QUEUE_SIZE):
        self.topic = topic
        self.maxsize = maxsize
        self._queue: deque = deque()
        self._cond = threading.Condition()
        self.dropped = 0
        self.received = 0
        self._closed = False

    def _put(self, message):
        with self._cond:
            if self.maxsize is not None and len(self._queue) >= self.maxsize:
                self._queue.popleft()
                self.dropped += 1
            self._queue.append(message)
            self.received += 1
            self._cond.notify_all()

    def get(self, timeout: float | None = None):
        """Next message; raises ``TimeoutError`` if none arrives in time."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not self._queue:
                if self._closed:
                    raise EOFError(f"subscription to {self.topic.name} closed")
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise TimeoutError(f"no message on {self.topic.name}")
                self._cond.wait(remaining)
            return self._queue.popleft()

    def drain(self) -> list:
        with self._cond:
            items = list(self._queue)
            self._queue.clear()
            return items

    def wait_for(self, n_received: int, timeout: float) -> bool:
        """Block until ``received >= n_received``; returns whether it happened."""
        with self._cond:
            return self._cond.wait_for(lambda: self.received >= n_received, timeout)

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def __len__(self):
        with self._cond:
            return len(self._queue)

    def __iter__(self) -> Iterator:
        while True:
            try:
                yield self.get()
            except EOFError:
                return


class Bus:
    """Thread-safe publish/subscribe hub.

    Topics are created on first publish or subscribe; a topic declared with
    a payload type via :meth:`topic` rejects other message types. Each subscriber has its
    own bounded queue; on overflow the oldest message is discarded and the
    subscriber's ``dropped`` counter incremented. There is no replay.
    """

    def __init__(self, queue_size: int | None = DEFAULT_QUEUE_SIZE):
        self.queue_size = queue_size
        self._topics: dict[str, Topic] = {}
        self._subs: dict[str, list[Subscription]] = {}
        self._lock = threading.Lock()

    def topic(self, name: str, payload_type: type | None = None) -> Topic:
        with self._lock:
            return self._topic(name, payload_type)

    def _topic(self, name, payload_type=None):
        t = self._topics.get(name)
        if t is None:
            t = self._topics[name] = Topic(name, payload_type)
            self._subs[name] = []
        return t

    @property
    def topics(self) -> list[str]:
        with self._lock:
            return sorted(self._topics)

    def subscribe(self, name: str, maxsize=_DEFAULT) -> Subscription:
        with self._lock:
            sub = Subscription(self._topic(name), self.queue_size if maxsize is _DEFAULT else maxsize)
            self._subs[name].append(sub)
            return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            subs = self._subs.get(sub.topic.name, [])
            if sub in subs:
                subs.remove(sub)
        sub.close()

    def publish(self, name: str, message: Any) -> int:
        """Deliver to current subscribers; returns how many received it."""
        with self._lock:
            topic = self._topic(name)
            if topic.payload_type is not None and not isinstance(message, topic.payload_type):
                raise TypeError(f"{name} carries {topic.payload_type.__name__}, got {type(message).__name__}")
            subs = list(self._subs[name])
            # delivering under the lock keeps per-topic order across publishers
            for sub in subs:
                sub._put(message)
        return len(subs)
