"""In-simulator stand-in for the temporary content-addressed store."""

from __future__ import annotations

from typing import Callable, Optional

from ..events import Digest, decode_wire, sha256


class KeyMismatch(ValueError):
    pass


EVENT_TAG = b"E"
TX_TAG = b"T"


def content_key(body: bytes) -> Digest:
    """DHT key of a tagged body: the event digest for events, the txid for
    transactions, a plain hash otherwise."""
    if body[:1] == EVENT_TAG:
        return decode_wire(body[1:]).self_digest
    if body[:1] == TX_TAG:
        return sha256(body[1:])
    return sha256(body)


class TempDht:
    """Expiring key/value store; time is the simulator's step counter."""

    def __init__(self, key_of: Callable[[bytes], Digest] = sha256) -> None:
        self.key_of = key_of
        self.now = 0
        self.store: dict[Digest, tuple[bytes, int]] = {}

    def put(self, key: Digest, body: bytes, ttl_steps: int) -> None:
        if self.key_of(body) != key:
            raise KeyMismatch(key.hex())
        expiry = self.now + ttl_steps
        old = self.store.get(key)
        if old is None or old[1] < expiry:
            self.store[key] = (body, expiry)

    def get(self, key: Digest) -> Optional[bytes]:
        item = self.store.get(key)
        if item is None:
            return None
        body, expiry = item
        if self.now >= expiry:
            del self.store[key]
            return None
        return body


def dht_put(d: TempDht, key: Digest, body: bytes, ttl_steps: int) -> None:
    d.put(key, body, ttl_steps)


def dht_get(d: TempDht, key: Digest) -> Optional[bytes]:
    return d.get(key)
