"""Synopsis prompting: staged sub-prompts turned into per-frame conditioning."""

from __future__ import annotations

import json
import logging
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

UNK = "<unk>"

INSTRUCTION_TEMPLATE = (
    'I have a prompt "{prompt}" for video generation. Can you split the process and '
    "describe the states separately? Each state is described in only one sentence and "
    "please consider the coherency between sub-prompts. Please be straightforward and do "
    "not use a narrative style. \n\n"
    'For example, for prompt "a boy is getting old", it can be divided into two states, '
    'e.g., "a young boy" and "an old man". \n\n'
    "Based on this example, can you provide the description? The number of states is not "
    "limited to two."
)

ENDPOINT_ENV = "VSTAR_LLM_ENDPOINT"
API_KEY_ENV = "VSTAR_LLM_API_KEY"


class SynopsisError(RuntimeError):
    pass


class SynopsisNetworkError(SynopsisError):
    pass


class SynopsisParseError(SynopsisError):
    pass


class EmptySynopsisError(SynopsisError):
    pass


@dataclass(frozen=True)
class Synopsis:
    original_prompt: str
    stages: tuple[str, ...]

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages or any(not s.strip() for s in stages):
            raise EmptySynopsisError("a synopsis needs at least one non-empty stage")
        object.__setattr__(self, "stages", stages)

    @property
    def k(self) -> int:
        return len(self.stages)

    def to_json(self) -> dict:
        return {"prompt": self.original_prompt, "stages": list(self.stages)}


@dataclass(frozen=True)
class FrameConditioningSchedule:
    embeddings: np.ndarray = field(repr=False)
    anchors: tuple[tuple[int, int], ...]

    @property
    def n_frames(self) -> int:
        return self.embeddings.shape[0]


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


def anchor_frames(k: int, n: int) -> list[int]:
    if k == 1:
        return [0]
    return [int(round(i * (n - 1) / (k - 1))) for i in range(k)]


def _slerp(a, b, w):
    na, nb_ = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb_ == 0:
        return (1 - w) * a + w * b
    cos = np.clip(a @ b / (na * nb_), -1.0, 1.0)
    omega = np.arccos(cos)
    if omega < 1e-8:
        return (1 - w) * a + w * b
    return (np.sin((1 - w) * omega) * a + np.sin(w * omega) * b) / np.sin(omega)


def build_schedule(stage_embeddings, n_frames: int, mode: str = "linear") -> FrameConditioningSchedule:
    """Spread K stage embeddings over N frames.

    Stage ``k`` sits at frame ``round(k (N-1) / (K-1))``; frames between two
    anchors blend the neighbouring stages. ``K == 1`` repeats the single
    embedding on every frame.
    """
    e = np.asarray(stage_embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 1 or e.shape[1] < 1:
        raise ValueError(f"stage embeddings must be K x D with K, D >= 1, got {e.shape}")
    k = e.shape[0]
    if n_frames < 1:
        raise ValueError(f"n_frames must be >= 1, got {n_frames}")
    if k > n_frames:
        raise ValueError(f"{k} stages cannot be spread over {n_frames} frames")
    if mode not in ("linear", "slerp"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if k == 1:
        return FrameConditioningSchedule(np.repeat(e, n_frames, axis=0), ((0, 0),))
    anchors = anchor_frames(k, n_frames)
    out = np.empty((n_frames, e.shape[1]))
    for seg in range(k - 1):
        a, b = anchors[seg], anchors[seg + 1]
        for t in range(a, b + 1):
            w = (t - a) / (b - a)
            if w == 0.0:
                out[t] = e[seg]
            elif w == 1.0:
                out[t] = e[seg + 1]
            elif mode == "linear":
                out[t] = (1.0 - w) * e[seg] + w * e[seg + 1]
            else:
                out[t] = _slerp(e[seg], e[seg + 1], w)
    return FrameConditioningSchedule(out, tuple((f, i) for i, f in enumerate(anchors)))


def schedule_coefficients(schedule: FrameConditioningSchedule, k: int) -> np.ndarray:
    """Per-frame mixing weights over the K stages implied by the anchors."""
    n = schedule.n_frames
    coef = np.zeros((n, k))
    if k == 1:
        coef[:, 0] = 1.0
        return coef
    frames = [f for f, _ in schedule.anchors]
    for seg in range(k - 1):
        a, b = frames[seg], frames[seg + 1]
        for t in range(a, b + 1):
            w = (t - a) / (b - a)
            coef[t] = 0.0
            coef[t, seg] = 1.0 - w
            coef[t, seg + 1] = w
    return coef


# ---------------------------------------------------------------------------
# Toy text encoder
# ---------------------------------------------------------------------------


def tokenize(prompt: str) -> list[str]:
    return prompt.lower().split()


@dataclass
class Vocab:
    tokens: list[str]

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != UNK:
            self.tokens = [UNK] + [t for t in self.tokens if t != UNK]
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def ids(self, prompt: str) -> list[int]:
        return [self._index.get(t, 0) for t in tokenize(prompt)]

    @classmethod
    def from_texts(cls, texts) -> "Vocab":
        seen = sorted({t for text in texts for t in tokenize(text)})
        return cls([UNK] + seen)


@dataclass
class TextEncoderParams:
    """Token table (V x E) followed by an affine map to D dims."""

    embedding: np.ndarray
    weight: np.ndarray  # D x E
    bias: np.ndarray  # D


def toy_text_encode(prompt: str, vocab: Vocab, params: TextEncoderParams) -> np.ndarray:
    ids = vocab.ids(prompt)
    if not ids:
        raise ValueError("cannot encode an empty prompt")
    mean = np.asarray(params.embedding, dtype=np.float64)[ids].mean(axis=0)
    return np.asarray(params.weight, dtype=np.float64) @ mean + np.asarray(params.bias, dtype=np.float64)


# ---------------------------------------------------------------------------
# LLM synopsis retrieval
# ---------------------------------------------------------------------------

_ENUM = re.compile(r"^\s*(?:[-*•]|\(?\d+[.):]|state\s*\d+\s*[:.)-])\s*", re.IGNORECASE)


def parse_stages(text: str) -> list[str]:
    """Split an LLM reply into stage strings.

    Accepts numbered lists, bulleted lists and bare lines; leading
    enumeration tokens and wrapping quotes are stripped.
    """
    stages = []
    for line in text.splitlines():
        s = _ENUM.sub("", line).strip()
        s = s.strip('"').strip("“”").strip()
        if s:
            stages.append(s)
    return stages


def load_synopsis_file(path, prompt: str | None = None) -> Synopsis:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SynopsisParseError(f"{path}: {exc}") from None
    stages = data.get("stages") if isinstance(data, dict) else None
    if not isinstance(stages, list) or not all(isinstance(s, str) for s in stages):
        raise SynopsisParseError(f"{path}: expected {{\"stages\": [str, ...]}}")
    if not stages:
        raise EmptySynopsisError(f"{path}: empty stage list")
    return Synopsis(prompt or data.get("prompt") or stages[0], tuple(stages))


@dataclass
class ClientConfig:
    endpoint: str | None = None
    api_key: str | None = None
    model: str = "gpt-4o-mini"
    timeout: float = 30.0
    synopsis_file: str | None = None
    fallback: bool = True

    @classmethod
    def from_env(cls, **kw) -> "ClientConfig":
        kw.setdefault("endpoint", os.environ.get(ENDPOINT_ENV))
        kw.setdefault("api_key", os.environ.get(API_KEY_ENV))
        return cls(**kw)


def build_request_body(prompt: str, model: str) -> dict:
    return {
        "model": model,
        "messages": [{"role": "user", "content": INSTRUCTION_TEMPLATE.format(prompt=prompt)}],
        "temperature": 0,
    }


def _post(cfg: ClientConfig, body: dict) -> dict:
    if not cfg.endpoint:
        raise SynopsisNetworkError(f"no endpoint configured (set {ENDPOINT_ENV})")
    req = urllib.request.Request(
        cfg.endpoint,
        data=json.dumps(body).encode("utf-8"),
        headers={"Content-Type": "application/json"},
        method="POST",
    )
    if cfg.api_key:
        req.add_header("Authorization", f"Bearer {cfg.api_key}")
    try:
        with urllib.request.urlopen(req, timeout=cfg.timeout) as resp:
            raw = resp.read()
    except (urllib.error.URLError, OSError) as exc:
        raise SynopsisNetworkError(f"request to {cfg.endpoint} failed: {exc}") from None
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SynopsisParseError(f"response is not JSON: {exc}") from None


def _reply_text(reply: dict) -> str:
    try:
        return reply["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise SynopsisParseError("response has no choices[0].message.content") from None


def request_synopsis(prompt: str, cfg: ClientConfig | None = None) -> Synopsis:
    """Split ``prompt`` into stages via a fixture file or a chat-completion endpoint.

    Fixture mode never touches the network. With ``cfg.fallback`` any
    failure degrades to a single-stage synopsis of the original prompt.
    """
    cfg = cfg or ClientConfig.from_env()
    try:
        if cfg.synopsis_file:
            return load_synopsis_file(cfg.synopsis_file, prompt)
        text = _reply_text(_post(cfg, build_request_body(prompt, cfg.model)))
        stages = parse_stages(text)
        if not stages:
            raise EmptySynopsisError("LLM reply contained no stages")
        return Synopsis(prompt, tuple(stages))
    except SynopsisError as exc:
        if not cfg.fallback:
            raise
        log.warning("synopsis request failed (%s); using the single prompt", exc)
        return Synopsis(prompt, (prompt,))
