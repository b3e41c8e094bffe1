"""Moving envelope bytes between participants.

Wire frame: 4-byte big-endian payload length, 1 flag byte, payload.
Flag bit 0 means the payload is raw DEFLATE; bit 1 means the sender asked for
compression but the peer does not advertise it, so the payload went plain.

Two networks share the frame codec: ``SimNetwork`` (in-process, seeded
latency / duplication / reordering) and ``HttpNetwork`` (loopback HTTP,
frames POSTed to ``/wire``).
"""

import logging
import random
import struct
import threading
import zlib
from dataclasses import dataclass

from .errors import (CorruptStream, HpisError, LengthOverflow, ShortRead, Timeout,
                     UnknownEndpoint, by_code)

log = logging.getLogger(__name__)

FLAG_COMPRESSED = 0x01
FLAG_DECLINED = 0x02
COMPRESSION_LEVEL = 6
MAX_FRAME = 16 * 1024 * 1024
_HEADER = struct.Struct(">IB")


def compress(data, level=COMPRESSION_LEVEL):
    c = zlib.compressobj(level, zlib.DEFLATED, -15)
    return c.compress(data) + c.flush()


def decompress(data, limit=MAX_FRAME * 8):
    d = zlib.decompressobj(-15)
    try:
        out = d.decompress(data, limit)
    except zlib.error as exc:
        raise CorruptStream(str(exc)) from None
    if d.unconsumed_tail:
        raise CorruptStream("decompressed size exceeds limit")
    if not d.eof or d.unused_data:
        raise CorruptStream("truncated or trailing data")
    return out


def frame(payload, flags=0):
    return _HEADER.pack(len(payload), flags) + payload


def read_frame(buf, max_size=MAX_FRAME):
    """Parse one frame from the front of ``buf``; returns (payload, flags, consumed)."""
    if len(buf) < _HEADER.size:
        raise ShortRead(f"{len(buf)} header bytes")
    length, flags = _HEADER.unpack_from(buf)
    if length > max_size:
        raise LengthOverflow(f"{length} > {max_size}")
    end = _HEADER.size + length
    if len(buf) < end:
        raise ShortRead(f"expected {length} payload bytes, got {len(buf) - _HEADER.size}")
    return bytes(buf[_HEADER.size:end]), flags, end


def deframe(wire, max_size=MAX_FRAME):
    payload, flags, used = read_frame(wire, max_size)
    if used != len(wire):
        raise CorruptStream("trailing bytes after frame")
    return payload, flags


def encode(payload, compressed, declined=False, level=COMPRESSION_LEVEL):
    if compressed:
        return frame(compress(payload, level), FLAG_COMPRESSED)
    return frame(payload, FLAG_DECLINED if declined else 0)


def decode(wire, max_size=MAX_FRAME):
    """Frame -> (payload, flags), inflating when flag bit 0 is set."""
    payload, flags = deframe(wire, max_size)
    if flags & FLAG_COMPRESSED:
        payload = decompress(payload)
    return payload, flags


def serve_frame(handler, wire, max_size=MAX_FRAME, level=COMPRESSION_LEVEL):
    """Receiver side of one exchange: the response mirrors the request's compression."""
    payload, flags = decode(wire, max_size)
    response = handler(payload)
    return encode(response, bool(flags & FLAG_COMPRESSED), level=level)


@dataclass(frozen=True)
class Endpoint:
    participant_id: str
    address: str = ""
    compression: bool = True


@dataclass
class NetworkConfig:
    latency_ms: tuple = (0, 0)          # uniform [lo, hi]; lo == hi is fixed
    duplication: float = 0.0
    reorder_window: int = 1             # 1 disables reordering
    seed: int = 0
    timeout_ms: int = 30000
    max_frame: int = MAX_FRAME
    compression_level: int = COMPRESSION_LEVEL

    def __post_init__(self):
        lo, hi = self.latency_ms
        if not 0 <= lo <= hi:
            raise ValueError("latency range must satisfy 0 <= lo <= hi")
        if not 0.0 <= self.duplication <= 1.0:
            raise ValueError("duplication probability must be in [0, 1]")
        if self.reorder_window < 1:
            raise ValueError("reorder window must be >= 1")

    @property
    def noiseless(self):
        return self.duplication == 0 and self.reorder_window == 1 and \
            self.latency_ms[0] == self.latency_ms[1]


@dataclass(frozen=True)
class Exchange:
    seq: int
    src: str
    dst: str
    duplicate: bool
    sent_at_us: int
    delivered_at_us: int
    request_flags: int
    response_flags: int
    request_size: int
    response_size: int


@dataclass
class _Pending:
    src: str
    dst: str
    payload: bytes
    compress: bool
    context: object = None


class SimNetwork:
    """In-process network, deterministic from ``config.seed``.

    ``send`` is a synchronous request/response. ``post`` + ``dispatch`` batch
    messages so the reorder window can permute them. A duplicated delivery
    hands its response to ``on_duplicate_response`` (when set) so callers can
    exercise at-least-once handling on both sides.
    """

    def __init__(self, config=None):
        self.config = config or NetworkConfig()
        self.rng = random.Random(self.config.seed)
        self.clock_us = 0
        self.trace = []
        self._endpoints = {}
        self._handlers = {}
        self._queue = []
        self._seq = 0
        self._lock = threading.RLock()
        self.on_duplicate_response = None

    def register(self, endpoint, handler):
        self._endpoints[endpoint.participant_id] = endpoint
        self._handlers[endpoint.participant_id] = handler

    def endpoint(self, participant_id):
        try:
            return self._endpoints[participant_id]
        except KeyError:
            raise UnknownEndpoint(participant_id) from None

    def _latency_us(self):
        lo, hi = self.config.latency_ms
        return int(1000 * (lo if lo == hi else self.rng.uniform(lo, hi)))

    def _exchange(self, src, dst, payload, compress, duplicate):
        negotiated = compress and src.compression and dst.compression
        level = self.config.compression_level
        wire = encode(payload, negotiated, declined=compress and not negotiated, level=level)
        sent = self.clock_us
        there = self._latency_us()
        back = self._latency_us()
        if (there + back) > self.config.timeout_ms * 1000:
            raise Timeout(f"{src.participant_id} -> {dst.participant_id}")
        self.clock_us += there
        handler = self._handlers[dst.participant_id]
        reply = serve_frame(handler, wire, self.config.max_frame, level)
        self.clock_us += back
        response, rflags = decode(reply, self.config.max_frame)
        _, qflags, _ = read_frame(wire, self.config.max_frame)
        self._seq += 1
        self.trace.append(Exchange(self._seq, src.participant_id, dst.participant_id,
                                   duplicate, sent, sent + there, qflags, rflags,
                                   len(wire), len(reply)))
        return response

    def _send_twice(self, src_id, dst_id, payload, compress):
        """One delivery plus, with the configured probability, a redelivery."""
        src, dst = self.endpoint(src_id), self.endpoint(dst_id)
        response = self._exchange(src, dst, payload, compress, False)
        dup = None
        if self.config.duplication and self.rng.random() < self.config.duplication:
            dup = self._exchange(src, dst, payload, compress, True)
        return response, dup

    def _late_duplicate(self, src_id, dst_id, dup):
        if dup is not None and self.on_duplicate_response is not None:
            self.on_duplicate_response(src_id, dst_id, dup)

    def send(self, src_id, dst_id, payload, compress=False):
        with self._lock:
            response, dup = self._send_twice(src_id, dst_id, payload, compress)
            self._late_duplicate(src_id, dst_id, dup)
            return response

    def post(self, src_id, dst_id, payload, compress=False, context=None):
        self.endpoint(src_id), self.endpoint(dst_id)
        self._queue.append(_Pending(src_id, dst_id, payload, compress, context))

    def _permute(self, batch):
        w = self.config.reorder_window
        if w <= 1:
            return batch
        out = []
        for i in range(0, len(batch), w):
            chunk = batch[i:i + w]
            self.rng.shuffle(chunk)
            out.extend(chunk)
        return out

    def dispatch(self, on_response):
        """Deliver queued posts (and anything posted meanwhile) until the queue drains."""
        delivered = 0
        while self._queue:
            batch, self._queue = self._permute(self._queue), []
            for p in batch:
                with self._lock:
                    response, dup = self._send_twice(p.src, p.dst, p.payload, p.compress)
                delivered += 1
                # the original response reaches the sender before its duplicate
                on_response(p, response)
                self._late_duplicate(p.src, p.dst, dup)
        return delivered

    @property
    def pending(self):
        return len(self._queue)


def _remote_error(r):
    """Map a non-200 reply from ``/wire`` back to the library error it reports."""
    try:
        detail = r.json().get("detail") or {}
        code, message = detail.get("code", ""), detail.get("detail", "")
    except (ValueError, AttributeError):
        code, message = "", r.text
    if not code:
        return HpisError(f"HTTP {r.status_code}: {message}")
    try:
        return by_code(code)(message)
    except TypeError:
        return HpisError(f"{code}: {message}")


class HttpNetwork:
    """Real mode: frames POSTed over loopback HTTP to ``http://<address>/wire``."""

    def __init__(self, endpoints=(), timeout_ms=30000, max_frame=MAX_FRAME):
        import httpx

        self._endpoints = {e.participant_id: e for e in endpoints}
        self.max_frame = max_frame
        self.trace = []
        self._client = httpx.Client(timeout=timeout_ms / 1000)
        self._httpx = httpx
        self._queue = []
        self._lock = threading.Lock()

    def register(self, endpoint, handler=None):
        self._endpoints[endpoint.participant_id] = endpoint

    def endpoint(self, participant_id):
        try:
            return self._endpoints[participant_id]
        except KeyError:
            raise UnknownEndpoint(participant_id) from None

    def send(self, src_id, dst_id, payload, compress=False):
        src, dst = self.endpoint(src_id), self.endpoint(dst_id)
        negotiated = compress and src.compression and dst.compression
        wire = encode(payload, negotiated, declined=compress and not negotiated)
        try:
            r = self._client.post(f"http://{dst.address}/wire", content=wire,
                                  headers={"content-type": "application/octet-stream"})
        except self._httpx.TimeoutException:
            raise Timeout(dst.address) from None
        except self._httpx.TransportError as exc:
            raise UnknownEndpoint(f"{dst.address}: {exc}") from None
        if r.status_code != 200:
            raise _remote_error(r)
        response, rflags = decode(r.content, self.max_frame)
        self.trace.append((src_id, dst_id, wire[4], rflags))
        return response

    def post(self, src_id, dst_id, payload, compress=False, context=None):
        self.endpoint(src_id), self.endpoint(dst_id)
        with self._lock:
            self._queue.append(_Pending(src_id, dst_id, payload, compress, context))

    def dispatch(self, on_response):
        """Send queued posts in order; no lock is held while a request is in flight."""
        delivered = 0
        while True:
            with self._lock:
                if not self._queue:
                    return delivered
                p = self._queue.pop(0)
            response = self.send(p.src, p.dst, p.payload, p.compress)
            delivered += 1
            on_response(p, response)

    @property
    def pending(self):
        return len(self._queue)

    def close(self):
        self._client.close()
