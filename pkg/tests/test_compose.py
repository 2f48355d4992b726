import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rarrg.compose import (
    MockClient,
    PromptTemplate,
    RemoteClient,
    build_extraction_prompt,
    build_rag_prompt,
    format_phrase_list,
    generate_report,
    generate_reports,
    load_template,
    merge_views,
    parse_phrase_list,
)
from rarrg.errors import ExternalServiceError, ValidationError


def test_shipped_templates_load():
    for tid in ("extraction", "single_view", "multi_view"):
        t = load_template(tid, n_examples=3)
        assert len(t.examples) == 3
    with pytest.raises(ValidationError):
        load_template("summary")
    with pytest.raises(ValidationError):
        load_template("single_view", n_examples=4)


def test_template_requires_placeholders():
    with pytest.raises(ValidationError, match="key_phrases"):
        PromptTemplate("single_view", "sys", "no placeholder here")


def test_unfilled_placeholder_is_error():
    t = PromptTemplate("single_view", "sys", "{key_phrases}\n{extra}", n_examples=0)
    with pytest.raises(ValidationError, match="extra"):
        t.fill(key_phrases="- a")


def test_template_directory_override(tmp_path):
    (tmp_path / "single_view.system.txt").write_text("SYS")
    (tmp_path / "single_view.user.txt").write_text("{examples}Key phrases:\n{key_phrases}\n")
    t = load_template("single_view", tmp_path, n_examples=0)
    p = build_rag_prompt(["a"], single_template=t)
    assert p.system == "SYS" and p.user == "Key phrases:\n- a\n"
    with pytest.raises(ValidationError, match="not found"):
        load_template("multi_view", tmp_path)


def test_extraction_prompt_contents():
    report = "Mild cardiomegaly. No pleural effusion."
    p = build_extraction_prompt(report, ["mild cardiomegaly", "no pleural effusion"])
    assert report in p.user
    assert "- mild cardiomegaly\n- no pleural effusion" in p.user
    for word in ("new", "improved", "unchanged"):
        assert f'"{word}"' in p.user
    assert p.messages()[0]["role"] == "system"


def test_extraction_prompt_empty_list_and_report():
    assert "Graph phrases:\n(none)" in build_extraction_prompt("Normal chest.", []).user
    with pytest.raises(ValidationError):
        build_extraction_prompt("   ", ["x"])


def test_in_context_example_count():
    one = build_extraction_prompt("x", ["y"]).user
    zero = build_extraction_prompt("x", ["y"], load_template("extraction", n_examples=0)).user
    assert one.count("Example report:") == 1
    assert "Example report:" not in zero


def test_format_phrase_list():
    assert format_phrase_list([]) == "(none)"
    assert format_phrase_list(["a", "b"]) == "- a\n- b"


def test_merge_conflict_frontal_wins():
    assert merge_views(["no pleural effusion"], ["pleural effusion"]) == ["no pleural effusion"]
    assert merge_views(["maybe pneumonia"], ["no pneumonia", "edema"]) == ["maybe pneumonia", "edema"]


def test_merge_duplicates_and_disjoint():
    assert merge_views(["cardiomegaly"], ["cardiomegaly"]) == ["cardiomegaly"]
    assert merge_views(["a", "b"], ["c", "d"]) == ["a", "b", "c", "d"]
    assert merge_views(["a", "a"], []) == ["a"]


def test_rag_prompt_single_and_multi():
    single = build_rag_prompt(["a", "b", "c"])
    assert single.template_id == "single_view"
    assert "Key phrases:\n- a\n- b\n- c\n" in single.user
    multi = build_rag_prompt(["a"], ["b"])
    assert multi.template_id == "multi_view"
    assert "Frontal view key phrases:\n- a\n" in multi.user
    assert "Lateral view key phrases:\n- b\n" in multi.user
    assert "Lateral view key phrases:\n(none)" in build_rag_prompt(["a"], []).user


def test_rag_prompt_empty():
    with pytest.raises(ValidationError):
        build_rag_prompt([], [])
    with pytest.raises(ValidationError):
        build_rag_prompt([])


def test_parse_phrase_list_uses_last_header():
    text = "Key phrases:\n- old\n\nKey phrases:\n- x\n- y\n\nReport:"
    assert parse_phrase_list(text, "Key phrases:") == ["x", "y"]
    assert parse_phrase_list("nothing", "Key phrases:") is None


def test_mock_single_view():
    r = generate_report(build_rag_prompt(["no pleural effusion", "mild cardiomegaly"]), MockClient())
    assert r.text == "No pleural effusion. Mild cardiomegaly."
    assert r.template_id == "single_view"
    assert r.phrases == {"key_phrases": ["no pleural effusion", "mild cardiomegaly"]}
    assert r.warning is None


def test_mock_multi_view_conflict():
    r = generate_report(build_rag_prompt(["no pleural effusion"], ["pleural effusion"]), MockClient())
    assert r.text.startswith("No pleural effusion.")
    assert "Pleural effusion." not in r.text.replace("No pleural effusion.", "")


def test_mock_empty_merged_list_warns():
    r = generate_report(build_rag_prompt([], ["x"], multi_template=None), MockClient())
    assert r.text == "X."
    prompt = build_rag_prompt(["a"])
    prompt.user = prompt.user.replace("- a", "")
    empty = generate_report(prompt, MockClient())
    assert empty.text == "" and empty.warning


def test_generate_reports_preserves_order():
    prompts = [build_rag_prompt([f"finding {i}"]) for i in range(10)]
    texts = [r.text for r in generate_reports(prompts, MockClient(), max_in_flight=4)]
    assert texts == [f"Finding {i}." for i in range(10)]


phrase_cores = st.sampled_from(["effusion", "edema", "opacity", "cardiomegaly", "pneumothorax", "nodule"])
prefixed = st.tuples(st.sampled_from(["", "no ", "maybe "]), phrase_cores).map("".join)


@settings(max_examples=300, deadline=None)
@given(st.lists(prefixed, max_size=8), st.lists(prefixed, max_size=8))
def test_merge_properties(frontal, lateral):
    merged = merge_views(frontal, lateral)
    assert merge_views(merged, []) == merged
    assert len(merged) == len(set(merged))
    unique_frontal = list(dict.fromkeys(frontal))
    assert merged[: len(unique_frontal)] == unique_frontal
    for p in merged[len(unique_frontal):]:
        assert p in lateral
    cores = {}
    for p in merged:
        core = p.split(" ", 1)[1] if p.startswith(("no ", "maybe ")) else p
        cores.setdefault(core, set()).add(p)
    for p in lateral:
        if p not in merged:
            core = p.split(" ", 1)[1] if p.startswith(("no ", "maybe ")) else p
            assert any(q in frontal for q in cores.get(core, ()))


@settings(max_examples=100, deadline=None)
@given(st.lists(prefixed, min_size=1, max_size=6, unique=True))
def test_mock_no_invention_and_fidelity(phrases):
    prompt = build_rag_prompt(phrases)
    for p in phrases:
        assert prompt.user.count(f"- {p}\n") == 1
    text = MockClient().complete(prompt)
    assert text == MockClient().complete(prompt)
    sentences = [s.strip() for s in text.split(".") if s.strip()]
    assert all(any(s.lower() == p.lower() for p in phrases) for s in sentences)


# --- remote client ---------------------------------------------------------------


class _ChatHandler(BaseHTTPRequestHandler):
    mode = "ok"
    seen = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((body, self.headers.get("Authorization")))
        if self.mode == "error":
            self.send_response(503)
            self.end_headers()
            return
        content = "" if self.mode == "empty" else "The heart is enlarged."
        data = json.dumps({"choices": [{"message": {"role": "assistant", "content": content}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def chat_server():
    server = HTTPServer(("127.0.0.1", 0), _ChatHandler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    _ChatHandler.seen = []
    yield f"http://127.0.0.1:{server.server_address[1]}/v1/chat/completions"
    server.shutdown()
    _ChatHandler.mode = "ok"


def test_remote_client_request_shape(chat_server, monkeypatch):
    monkeypatch.setenv("RA_RRG_API_KEY", "secret")
    client = RemoteClient(chat_server, "some-model")
    r = generate_report(build_rag_prompt(["cardiomegaly"]), client)
    assert r.text == "The heart is enlarged."
    body, auth = _ChatHandler.seen[0]
    assert body["model"] == "some-model" and body["temperature"] == 0.0
    assert [m["role"] for m in body["messages"]] == ["system", "user"]
    assert auth == "Bearer secret"


@pytest.mark.parametrize("mode", ["error", "empty"])
def test_remote_client_failures(chat_server, mode):
    _ChatHandler.mode = mode
    with pytest.raises(ExternalServiceError):
        RemoteClient(chat_server, "m").complete(build_rag_prompt(["a"]))


def test_remote_client_unreachable():
    with pytest.raises(ExternalServiceError):
        RemoteClient("http://127.0.0.1:9/x", "m", timeout=1).complete(build_rag_prompt(["a"]))
