import json

import pytest

from eidsim import crypto
from eidsim.transport import (
    Channel, Delay, Drop, Duplicate, InterceptorPolicy, LinkSealer, NoReply, Observe, Substitute, Transport,
    TransportError, observer, read_transcript,
)


def echo_world(**kw):
    t = Transport(**kw)
    seen = []

    def handler(env):
        seen.append(env.payload)
        return b"re:" + env.payload

    t.register("b", handler)
    return t, seen


def test_fifo_and_reply():
    t, seen = echo_world()
    t.send(Channel.HOST_SE, "a", "b", b"1")
    t.send(Channel.HOST_SE, "a", "b", b"2")
    while t.deliver_next():
        pass
    assert seen == [b"1", b"2"]
    assert t.request(Channel.HOST_SE, "a", "b", b"3") == b"re:3"
    seqs = [r["seq"] for r in t.records if r["event"] == "sent"]
    assert seqs == sorted(seqs)


def test_drop_is_logged_and_not_delivered():
    t, seen = echo_world()
    t.add_interceptor(InterceptorPolicy({Channel.HOST_SE}, lambda env: Drop()))
    with pytest.raises(NoReply):
        t.request(Channel.HOST_SE, "a", "b", b"x")
    assert seen == [] and [r["event"] for r in t.records] == ["sent", "dropped"]


def test_substitute_duplicate_delay():
    t, seen = echo_world()
    t.add_interceptor(InterceptorPolicy({Channel.HOST_TSM}, lambda env: Substitute(b"evil") if env.payload == b"x"
                                        else Observe()))
    assert t.request(Channel.HOST_TSM, "a", "b", b"x") == b"re:evil"
    assert "substituted" in [r["event"] for r in t.records]
    t2, seen2 = echo_world()
    t2.add_interceptor(InterceptorPolicy({Channel.HOST_SE}, lambda env: Duplicate() if env.reply_to is None
                                         else Observe()))
    t2.request(Channel.HOST_SE, "a", "b", b"d")
    assert seen2 == [b"d", b"d"]
    t3, seen3 = echo_world()
    t3.add_interceptor(InterceptorPolicy({Channel.HOST_SE}, lambda env: Delay() if env.payload == b"first"
                                         else Observe()))
    t3.send(Channel.HOST_SE, "a", "b", b"first")
    t3.send(Channel.HOST_SE, "a", "b", b"second")
    while t3.deliver_next():
        pass
    assert seen3[:2] == [b"second", b"first"]


def test_untappable_channels():
    for ch in (Channel.TEE_SE, Channel.SERVER_SIDE):
        with pytest.raises(TransportError):
            InterceptorPolicy({ch})


def test_server_side_sealing():
    t, seen = echo_world(sealer=LinkSealer(bytes(32), crypto.NonceLedger()))
    assert t.request(Channel.SERVER_SIDE, "a", "b", b"secret-value") == b"re:secret-value"
    assert seen == [b"secret-value"]
    assert all("secret-value".encode().hex() not in r["payload_hex"] for r in t.records)


def test_observer_sees_everything_on_channel():
    t, _ = echo_world()
    got = []
    t.add_interceptor(observer([Channel.HOST_SE], got.append))
    t.request(Channel.HOST_SE, "a", "b", b"p")
    t.request(Channel.HOST_TSM, "a", "b", b"q")
    assert [e.payload for e in got] == [b"p", b"re:p"]


def test_transcript_format(tmp_path):
    t, _ = echo_world()
    t.request(Channel.HOST_SE, "a", "b", b"\x01\x02", plaintext=True)
    path = tmp_path / "t.jsonl"
    t.write_transcript(path)
    recs = read_transcript(path)
    assert list(recs[0]) == ["seq", "channel", "from", "to", "plaintext_flag", "event", "payload_hex"]
    assert recs[0]["plaintext_flag"] is True and recs[0]["payload_hex"] == "0102"
    line = path.read_text().splitlines()[0]
    assert line == json.dumps(recs[0], separators=(",", ":"))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(ValueError):
        read_transcript(path)
