"""Prompt assembly, multi-view phrase merging and report generation clients."""

from __future__ import annotations

import json
import logging
import os
import re
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

from .errors import ExternalServiceError, ValidationError

log = logging.getLogger(__name__)

TEMPLATE_IDS = ("extraction", "single_view", "multi_view")
REQUIRED_PLACEHOLDERS = {
    "extraction": ("report", "radgraph_phrases"),
    "single_view": ("key_phrases",),
    "multi_view": ("frontal_phrases", "lateral_phrases"),
}
NONE_MARKER = "(none)"
API_KEY_ENV = "RA_RRG_API_KEY"
LIST_HEADERS = {
    "key_phrases": "Key phrases:",
    "frontal_phrases": "Frontal view key phrases:",
    "lateral_phrases": "Lateral view key phrases:",
}

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")
_PREFIXES = ("no ", "maybe ")


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    system: str
    user: str
    examples: tuple[str, ...] = ()
    n_examples: int = 1

    def __post_init__(self):
        if self.template_id not in TEMPLATE_IDS:
            raise ValidationError(f"unknown template id {self.template_id!r}")
        present = set(_PLACEHOLDER.findall(self.user))
        missing = [p for p in REQUIRED_PLACEHOLDERS[self.template_id] if p not in present]
        if missing:
            raise ValidationError(f"{self.template_id} template lacks placeholders {missing}")
        if self.n_examples < 0 or self.n_examples > len(self.examples):
            raise ValidationError(f"{self.n_examples} in-context examples requested, {len(self.examples)} available")

    def fill(self, **values: str) -> "Prompt":
        values.setdefault("examples", "".join(ex + "\n" for ex in self.examples[: self.n_examples]))

        def sub(match):
            key = match.group(1)
            if key not in values:
                raise ValidationError(f"placeholder {{{key}}} left unfilled in {self.template_id} prompt")
            return values[key]

        return Prompt(self.template_id, self.system, _PLACEHOLDER.sub(sub, self.user))


def load_template(template_id: str, directory: str | Path | None = None, n_examples: int = 1) -> PromptTemplate:
    """Read ``<id>.system.txt``, ``<id>.user.txt`` and ``<id>.example.txt``.

    ``directory`` overrides the templates shipped with the package.
    """
    if template_id not in TEMPLATE_IDS:
        raise ValidationError(f"unknown template id {template_id!r}")
    if not 0 <= n_examples <= 3:
        raise ValidationError("in-context example count must be between 0 and 3")
    base = Path(directory) if directory is not None else resources.files("rarrg") / "templates"

    def read(suffix):
        path = base / f"{template_id}.{suffix}.txt"
        try:
            return path.read_text(encoding="utf-8")
        except FileNotFoundError:
            if suffix == "example":
                return ""
            raise ValidationError(f"template file not found: {path}") from None

    examples = tuple(ex.strip("\n") + "\n" for ex in read("example").split("\n---\n") if ex.strip())
    return PromptTemplate(template_id, read("system").strip(), read("user"), examples, n_examples)


@dataclass
class Prompt:
    template_id: str
    system: str
    user: str

    def messages(self) -> list[dict]:
        return [{"role": "system", "content": self.system}, {"role": "user", "content": self.user}]


def _phrase_text(p) -> str:
    return p if isinstance(p, str) else str(getattr(p, "text", p))


def format_phrase_list(phrases: Sequence) -> str:
    texts = [_phrase_text(p) for p in phrases]
    if not texts:
        return NONE_MARKER
    return "\n".join(f"- {t}" for t in texts)


def build_extraction_prompt(report_text: str, radgraph_phrases: Sequence, template: PromptTemplate | None = None) -> Prompt:
    if not report_text or not report_text.strip():
        raise ValidationError("report text is empty")
    template = template or load_template("extraction")
    return template.fill(report=report_text.strip(), radgraph_phrases=format_phrase_list(radgraph_phrases))


def _strip_prefix(text: str) -> tuple[str, str]:
    for prefix in _PREFIXES:
        if text.startswith(prefix):
            return prefix, text[len(prefix):]
    return "", text


def merge_views(frontal: Sequence, lateral: Sequence) -> list[str]:
    """Frontal phrases first, then lateral phrases that neither repeat nor contradict them.

    Two phrases conflict when they share the same core after removing a
    leading "no " or "maybe " but differ in that prefix; the frontal phrase
    wins.
    """
    merged: list[str] = []
    seen: set[str] = set()
    frontal_cores: dict[str, set[str]] = {}
    for p in map(_phrase_text, frontal):
        if p in seen:
            continue
        seen.add(p)
        merged.append(p)
        prefix, core = _strip_prefix(p)
        frontal_cores.setdefault(core, set()).add(prefix)
    for p in map(_phrase_text, lateral):
        if p in seen:
            continue
        prefix, core = _strip_prefix(p)
        if core in frontal_cores and prefix not in frontal_cores[core]:
            continue
        seen.add(p)
        merged.append(p)
    return merged


def build_rag_prompt(frontal: Sequence | None, lateral: Sequence | None = None,
                     single_template: PromptTemplate | None = None,
                     multi_template: PromptTemplate | None = None) -> Prompt:
    """Single-view prompt when only one list is given, two-view prompt otherwise."""
    frontal = list(frontal or [])
    if lateral is None:
        if not frontal:
            raise ValidationError("no key phrases to build a prompt from")
        template = single_template or load_template("single_view")
        return template.fill(key_phrases=format_phrase_list(frontal))
    lateral = list(lateral)
    if not frontal and not lateral:
        raise ValidationError("no key phrases to build a prompt from")
    template = multi_template or load_template("multi_view")
    return template.fill(frontal_phrases=format_phrase_list(frontal), lateral_phrases=format_phrase_list(lateral))


def parse_phrase_list(text: str, header: str) -> list[str] | None:
    """Bulleted list following the last line equal to ``header``; None when absent."""
    lines = text.splitlines()
    starts = [i for i, line in enumerate(lines) if line.strip() == header]
    if not starts:
        return None
    out = []
    for line in lines[starts[-1] + 1 :]:
        if not line.strip():
            break
        if line.startswith("- "):
            out.append(line[2:].strip())
    return out


@dataclass
class Report:
    text: str
    template_id: str
    phrases: dict[str, list[str]] = field(default_factory=dict)
    warning: str | None = None

    def to_json(self) -> dict:
        return {"text": self.text, "template_id": self.template_id, "phrases": self.phrases, "warning": self.warning}


def _sentence(phrase: str) -> str:
    s = phrase.strip()
    s = s[0].upper() + s[1:]
    return s if s.endswith(".") else s + "."


class MockClient:
    """Offline backend: turns the prompt's phrase lists into one sentence per phrase."""

    model = "mock"

    def complete(self, prompt: Prompt) -> str:
        return phrases_to_text(self.phrases(prompt))

    def phrases(self, prompt: Prompt) -> list[str]:
        if prompt.template_id == "multi_view":
            frontal = parse_phrase_list(prompt.user, LIST_HEADERS["frontal_phrases"]) or []
            lateral = parse_phrase_list(prompt.user, LIST_HEADERS["lateral_phrases"]) or []
            return merge_views(frontal, lateral)
        return parse_phrase_list(prompt.user, LIST_HEADERS["key_phrases"]) or []


def phrases_to_text(phrases: Sequence[str]) -> str:
    return " ".join(_sentence(p) for p in phrases if p.strip())


class RemoteClient:
    """OpenAI-compatible chat-completion endpoint."""

    def __init__(self, endpoint: str, model: str, timeout: float = 60.0, temperature: float = 0.0,
                 api_key: str | None = None):
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self.temperature = temperature
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)

    def complete(self, prompt: Prompt) -> str:
        body = json.dumps({"model": self.model, "messages": prompt.messages(), "temperature": self.temperature})
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.endpoint, data=body.encode("utf-8"), headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            raise ExternalServiceError(f"{self.endpoint}: HTTP {exc.code}") from exc
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise ExternalServiceError(f"{self.endpoint}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ExternalServiceError(f"{self.endpoint}: response is not JSON") from exc
        try:
            text = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ExternalServiceError(f"{self.endpoint}: response has no message content") from exc
        if not isinstance(text, str) or not text.strip():
            raise ExternalServiceError(f"{self.endpoint}: empty completion")
        return text


def _prompt_phrases(prompt: Prompt) -> dict[str, list[str]]:
    out = {}
    for key, header in LIST_HEADERS.items():
        found = parse_phrase_list(prompt.user, header)
        if found is not None:
            out[key] = found
    return out


def generate_report(prompt: Prompt, client) -> Report:
    """Run ``client`` on ``prompt``; the report text is the client's output verbatim."""
    text = client.complete(prompt)
    warning = None
    if not text:
        warning = "no key phrases to report"
        log.warning("empty report for %s prompt", prompt.template_id)
    return Report(text, prompt.template_id, _prompt_phrases(prompt), warning)


def generate_reports(prompts: Sequence[Prompt], client, max_in_flight: int = 4) -> list[Report]:
    """Generate many reports with at most ``max_in_flight`` concurrent requests; order preserved."""
    if max_in_flight <= 1:
        return [generate_report(p, client) for p in prompts]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(lambda p: generate_report(p, client), prompts))
