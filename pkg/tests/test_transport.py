import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hpis import transport as T
from hpis.errors import CorruptStream, LengthOverflow, ShortRead, Timeout, UnknownEndpoint
from tests.ordergen import order_corpus

# Measured on order_corpus(): 6039 / 102685 bytes at DEFLATE level 6.
RECORDED_ORDER_RATIO = 0.0588
RATIO_SLACK = 1.10


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=4096))
def test_compress_round_trip(data):
    assert T.decompress(T.compress(data)) == data


def test_repetitive_order_xml_meets_recorded_ratio():
    data = order_corpus()
    ratio = len(T.compress(data)) / len(data)
    assert len(data) >= 100 * 1024
    assert ratio < 0.20
    assert ratio <= RECORDED_ORDER_RATIO * RATIO_SLACK


@pytest.mark.parametrize("data", [b"garbage!", b"\xff" * 10, T.compress(b"abc")[:-1],
                                  T.compress(b"abc") + b"tail"])
def test_decompress_garbage(data):
    with pytest.raises(CorruptStream):
        T.decompress(data)


def test_frame_flags_and_limits():
    w = T.encode(b"payload", compressed=True)
    assert w[4] & T.FLAG_COMPRESSED
    assert T.decode(w) == (b"payload", T.FLAG_COMPRESSED)
    plain = T.encode(b"payload", compressed=False, declined=True)
    assert T.decode(plain) == (b"payload", T.FLAG_DECLINED)
    with pytest.raises(ShortRead):
        T.deframe(plain[:3])
    with pytest.raises(ShortRead):
        T.deframe(plain[:-1])
    with pytest.raises(CorruptStream):
        T.deframe(plain + b"x")
    with pytest.raises(LengthOverflow):
        T.deframe(T.frame(b"x" * 20), max_size=10)


def test_serve_frame_mirrors_request_compression():
    echo = lambda b: b[::-1]  # noqa: E731
    for compressed in (False, True):
        reply = T.serve_frame(echo, T.encode(b"abc", compressed))
        assert T.decode(reply) == (b"cba", T.FLAG_COMPRESSED if compressed else 0)


def _net(config=None, caps=(True, True)):
    net = T.SimNetwork(config)
    seen = []

    def handler(payload):
        seen.append(payload)
        return b"re:" + payload
    net.register(T.Endpoint("a", "a", caps[0]), lambda p: b"")
    net.register(T.Endpoint("b", "b", caps[1]), handler)
    return net, seen


def test_compression_only_when_both_advertise():
    net, _ = _net()
    assert net.send("a", "b", b"x" * 100, compress=True) == b"re:" + b"x" * 100
    ex = net.trace[-1]
    assert ex.request_flags & T.FLAG_COMPRESSED and ex.response_flags & T.FLAG_COMPRESSED
    net, _ = _net(caps=(True, False))
    net.send("a", "b", b"x", compress=True)
    ex = net.trace[-1]
    assert ex.request_flags == T.FLAG_DECLINED and not ex.response_flags & T.FLAG_COMPRESSED


def test_unknown_endpoint_and_timeout():
    net, _ = _net()
    with pytest.raises(UnknownEndpoint):
        net.send("a", "zz", b"x")
    slow, _ = _net(T.NetworkConfig(latency_ms=(50, 50), timeout_ms=60))
    with pytest.raises(Timeout):
        slow.send("a", "b", b"x")


def test_duplication_delivers_twice_and_hands_back_duplicate_response():
    net, seen = _net(T.NetworkConfig(duplication=1.0, seed=3))
    dups = []
    net.on_duplicate_response = lambda s, d, r: dups.append(r)
    assert net.send("a", "b", b"m") == b"re:m"
    assert seen == [b"m", b"m"] and dups == [b"re:m"]
    assert [e.duplicate for e in net.trace] == [False, True]


def test_reordering_is_seeded_and_preserves_the_multiset():
    def run(seed):
        net, seen = _net(T.NetworkConfig(reorder_window=4, seed=seed))
        for i in range(20):
            net.post("a", "b", bytes([i]))
        got = []
        assert net.dispatch(lambda p, r: got.append(r)) == 20
        return seen
    assert run(5) == run(5)
    assert sorted(run(5)) == [bytes([i]) for i in range(20)]
    assert run(5) != [bytes([i]) for i in range(20)]


def test_latency_advances_the_virtual_clock():
    net, _ = _net(T.NetworkConfig(latency_ms=(10, 10)))
    net.send("a", "b", b"x")
    assert net.clock_us == 20_000
    assert net.trace[0].delivered_at_us - net.trace[0].sent_at_us == 10_000


def test_bad_config_rejected():
    for kw in (dict(latency_ms=(5, 1)), dict(duplication=1.5), dict(reorder_window=0)):
        with pytest.raises(ValueError):
            T.NetworkConfig(**kw)


def test_random_payload_round_trip_through_the_network():
    rng = random.Random(11)
    net, _ = _net()
    for _ in range(50):
        data = rng.randbytes(rng.randint(0, 2000))
        assert net.send("a", "b", data, compress=rng.random() < 0.5) == b"re:" + data
