"""OpenAI-compatible chat-completion hooks for an LLM-backed policy or detector.

Only the wire format lives here. Requests go through ``urllib`` so nothing
beyond the standard library is needed; the endpoint and model name come from
``LATENT_LLM_URL`` and ``LATENT_LLM_MODEL``.
"""

from __future__ import annotations

import json
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Sequence

from .agent import Action, AgentState, IterationRecord
from .detector import DetectionReport, Diagnosis, id_sort_key
from .netlist import Netlist, serialize
from .simulator import SimTrace

DEFAULT_TEMPERATURE = 0.3

SYSTEM_PROMPT = """You insert stealthy analog Trojan components into a SPICE netlist.
Component menu: resistor R<x> n1 n2 val, capacitor C<x> n1 n2 val,
NMOS M<x> d g s <nmos-model> W=<w> L=<l>, PMOS M<x> d g s <pmos-model> W=<w> L=<l>.
Rules: <x> is a positive integer not already used; nodes must come from the
available-node list; n1 and the last node must differ; reuse existing .model names.
After each insertion a detector reports suspect lines. Keep the component type
when nothing was flagged; otherwise revert and try a different type.
Reply with a short thought, then exactly one fenced block holding either one
SPICE line or the directive `REVERT <id>`."""

DETECTOR_PROMPT = """You audit an analog SPICE netlist for Trojan components.
Consider capacitive, transistor and resistor anomalies. Reply with exactly one
fenced block listing the suspicious element ids, one per line, optionally
followed by ': reason'. An empty block means nothing is suspicious."""

_FENCE = re.compile(r"```[a-zA-Z]*\s*\n?(.*?)```", re.S)
_REVERT = re.compile(r"^REVERT\s+([RCMrcm][0-9]+)$")


class LLMError(RuntimeError):
    pass


@dataclass(frozen=True)
class Endpoint:
    url: str
    model: str
    api_key: str | None = None
    temperature: float = DEFAULT_TEMPERATURE
    timeout: float = 60.0

    @classmethod
    def from_env(cls) -> Endpoint:
        url = os.environ.get("LATENT_LLM_URL")
        model = os.environ.get("LATENT_LLM_MODEL")
        if not url or not model:
            raise LLMError("LATENT_LLM_URL and LATENT_LLM_MODEL must both be set")
        return cls(url, model, os.environ.get("LATENT_LLM_API_KEY"))

    def request_body(self, messages: list[dict]) -> dict:
        return {"model": self.model, "messages": messages, "temperature": self.temperature}

    def chat(self, messages: list[dict]) -> str:
        """POST one chat completion and return the first choice's content."""
        data = json.dumps(self.request_body(messages)).encode()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.url, data=data, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.load(resp)
        except (urllib.error.URLError, json.JSONDecodeError, TimeoutError) as err:
            raise LLMError(f"chat request failed: {err}") from err
        try:
            return payload["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as err:
            raise LLMError("response has no choices[0].message.content") from err


def fenced_block(text: str) -> str | None:
    """Body of the single fenced block in ``text``, or None if there is not exactly one."""
    blocks = _FENCE.findall(text)
    if len(blocks) != 1:
        return None
    return blocks[0].strip()


def parse_reply(text: str) -> Action:
    """Map a model reply to an action; anything off-grammar becomes a Noop."""
    body = fenced_block(text)
    thought = _FENCE.sub("", text).strip()
    if body is None:
        return Action.noop("reply lacks exactly one fenced block", thought=thought)
    lines = [ln.strip() for ln in body.splitlines() if ln.strip()]
    if len(lines) != 1:
        return Action.noop("fenced block must hold exactly one line", thought=thought)
    m = _REVERT.match(lines[0])
    if m:
        return Action.revert(m.group(1).upper(), thought=thought)
    return Action.insert_line(lines[0], thought=thought)


def user_message(candidate: Netlist, feedback: str, available_nodes: Sequence[str]) -> str:
    return (f"Netlist:\n{serialize(candidate)}\n"
            f"Detector feedback:\n{feedback or '(none yet)'}\n\n"
            f"Available nodes: {', '.join(available_nodes)}")


class LLMPolicy:
    """Policy that asks a chat model for the next action."""

    def __init__(self, endpoint: Endpoint):
        self.endpoint = endpoint
        self.messages: list[dict] = [{"role": "system", "content": SYSTEM_PROMPT}]

    @classmethod
    def from_env(cls) -> LLMPolicy:
        return cls(Endpoint.from_env())

    def decide(self, state: AgentState, feedback: str, available_nodes: Sequence[str]) -> Action:
        self.messages.append({"role": "user",
                              "content": user_message(state.candidate, feedback, available_nodes)})
        try:
            reply = self.endpoint.chat(self.messages)
        except LLMError as err:
            return Action.noop(str(err))
        self.messages.append({"role": "assistant", "content": reply})
        return parse_reply(reply)

    def notify(self, result: IterationRecord) -> None:
        if result.check is not None and not result.check.accepted:
            self.messages.append({"role": "user",
                                  "content": f"Syntax check rejected the line: {result.check.detail}"})


class LLMDetector:
    """Detector that asks a chat model which lines look inserted."""

    detector_id = "llm"

    def __init__(self, endpoint: Endpoint):
        self.endpoint = endpoint

    @classmethod
    def from_env(cls) -> LLMDetector:
        return cls(Endpoint.from_env())

    def detect(self, n: Netlist, trace: SimTrace) -> DetectionReport:
        content = f"Netlist:\n{serialize(n)}\nSimulation trace CSV:\n{trace.to_csv()}"
        reply = self.endpoint.chat([{"role": "system", "content": DETECTOR_PROMPT},
                                    {"role": "user", "content": content}])
        return parse_suspects(reply, n)


def parse_suspects(reply: str, n: Netlist) -> DetectionReport:
    """Suspect ids listed in the fenced block; ids absent from ``n`` are dropped."""
    body = fenced_block(reply) or ""
    diags: dict[str, tuple[Diagnosis, ...]] = {}
    for ln in body.splitlines():
        eid, _, why = ln.strip().partition(":")
        eid = eid.strip().upper()
        if eid and eid in n:
            diags[eid] = (Diagnosis("LLM", n.element(eid).nodes, (), why.strip() or "flagged"),)
    ordered = dict(sorted(diags.items(), key=lambda kv: id_sort_key(kv[0])))
    return DetectionReport(frozenset(ordered), ordered, "llm")
