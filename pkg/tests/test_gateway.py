from __future__ import annotations

import json
import threading

import httpx
import pytest

from evoloop.errors import BudgetExceeded, CassetteMiss, TransportError, UnboundSlot, UnusedBinding
from evoloop.blame import BLAMER_TEMPLATE
from evoloop.gateway import (
    Cassette,
    CassetteMode,
    ChatRequest,
    Gateway,
    HttpTransport,
    chat,
    complete,
    render_template,
)


class Counting:
    def __init__(self, reply="1. Scores\nplanner 1"):
        self.calls = 0
        self.reply = reply

    def send(self, request):
        self.calls += 1
        return self.reply


def test_digest_is_pure_and_sensitive():
    a = chat("m", "sys", "hello")
    assert a.digest == chat("m", "sys", "hello").digest
    assert a.digest != chat("m", "sys", "hello", temperature=0.5).digest
    assert a.digest != chat("m2", "sys", "hello").digest
    # the output budget is not part of the request identity
    assert a.digest == chat("m", "sys", "hello", max_output_chars=5).digest


def test_request_validation():
    with pytest.raises(ValueError):
        ChatRequest("m", ())
    with pytest.raises(ValueError):
        ChatRequest("m", ({"role": "tool", "content": "x"},))


def test_record_then_replay(tmp_path):
    path = tmp_path / "cassette.jsonl"
    request = chat("m", None, "blame this")
    transport = Counting("reply-1")
    assert complete(request, Cassette("record", path), transport) == "reply-1"
    replayer = Counting("other")
    assert complete(request, Cassette("replay", path), replayer) == "reply-1"
    assert replayer.calls == 0
    with pytest.raises(CassetteMiss):
        complete(chat("m", None, "unseen"), Cassette("replay", path), replayer)


def test_passthrough_does_not_store(tmp_path):
    path = tmp_path / "c.jsonl"
    cassette = Cassette(CassetteMode.PASSTHROUGH, path)
    complete(chat("m", None, "x"), cassette, Counting())
    assert len(cassette) == 0 and not path.exists()


def test_cassette_skips_partial_trailing_line(tmp_path):
    path = tmp_path / "c.jsonl"
    request = chat("m", None, "x")
    Cassette("record", path).store(request, "kept")
    with open(path, "a") as fh:
        fh.write('{"digest": "abc", "resp')
    assert Cassette("replay", path).lookup(request) == "kept"


def test_budget_exceeded():
    with pytest.raises(BudgetExceeded):
        complete(chat("m", None, "x", max_output_chars=3), Cassette(), Counting("long reply"))


def test_concurrent_records(tmp_path):
    path = tmp_path / "c.jsonl"
    cassette = Cassette("record", path)
    threads = [threading.Thread(target=complete, args=(chat("m", None, f"q{i}"), cassette, Counting(f"r{i}")))
               for i in range(20)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == 20 and len(Cassette("replay", path)) == 20


def test_http_transport_with_mock():
    seen = {}

    def handler(request: httpx.Request):
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json={"choices": [{"message": {"content": "pong"}}]})

    client = httpx.Client(transport=httpx.MockTransport(handler))
    transport = HttpTransport("http://llm.local/v1/", "key", client=client)
    assert Gateway(Cassette(), transport).complete(chat("m", "sys", "ping")) == "pong"
    assert seen["body"]["model"] == "m" and seen["body"]["messages"][0]["role"] == "system"
    assert seen["auth"] == "Bearer key"


def test_http_transport_errors(monkeypatch):
    client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(429, text="slow down")))
    with pytest.raises(TransportError) as info:
        HttpTransport("http://x", client=client).send(chat("m", None, "x"))
    assert info.value.status == 429
    client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(200, json={"nope": 1})))
    with pytest.raises(TransportError):
        HttpTransport("http://x", client=client).send(chat("m", None, "x"))
    monkeypatch.delenv("EVOLOOP_API_BASE", raising=False)
    with pytest.raises(TransportError):
        HttpTransport.from_env()


def test_render_blamer_template():
    bindings = {"task": "TASK-X", "trajectory": "TRAJ-Y", "events": "EVENTS-Z", "outcome": "0"}
    prompt = render_template(BLAMER_TEMPLATE, bindings)
    assert all(v in prompt for v in bindings.values())
    missing = dict(bindings)
    del missing["trajectory"]
    with pytest.raises(UnboundSlot):
        render_template(BLAMER_TEMPLATE, missing)


def test_render_is_single_pass():
    out = render_template("A {{a}} B {{b}}", {"a": "{{b}}", "b": "x"})
    assert out == "A {{b}} B x"


def test_unused_binding_warns():
    with pytest.warns(UnusedBinding):
        assert render_template("{{a}}", {"a": "1", "b": "2"}) == "1"


def test_empty_file_backed_cassette_is_kept(tmp_path):
    # an empty cassette is falsy; the gateway must still record into it
    path = tmp_path / "fresh.jsonl"
    gateway = Gateway(Cassette("record", path), Counting("r"))
    gateway.complete(chat("m", None, "x"))
    assert path.exists() and len(Cassette("replay", path)) == 1
