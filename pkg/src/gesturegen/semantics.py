"""Semantic gesture database, transcript alignment, and injection planning.

A database maps short labeled gesture clips (< 3 s) to their latent
embeddings. Given a time-aligned transcript, candidate gestures are assigned
to words either by an LLM client (structured few-shot prompt, strict output
parsing, one retry) or by a deterministic keyword fallback. Assignments
become an InjectionPlan: latent-index spans plus the timeline mask that the
injection sampler consumes (mask 1 keeps generated content, 0 injects).
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .motion import MotionClip
from .vqvae import LatentSequence, VqvaeModel, encode

MAX_ENTRY_SECONDS = 3.0

DATA_DIR = Path(__file__).parent / "data"


class SemanticsError(ValueError):
    """Raised for invalid entries, transcripts, or plans."""


@dataclass(frozen=True)
class SemanticGestureEntry:
    """A labeled short gesture with its precomputed latent embedding."""

    entry_id: str
    label: str
    category: str
    keywords: tuple[str, ...]
    duration: float
    embedding: LatentSequence
    source: str = ""

    def __post_init__(self):
        if not self.keywords:
            raise SemanticsError(f"entry {self.entry_id}: keywords must be non-empty")
        if self.duration > MAX_ENTRY_SECONDS:
            raise SemanticsError(
                f"entry {self.entry_id}: duration {self.duration:.2f}s exceeds "
                f"{MAX_ENTRY_SECONDS}s limit"
            )


@dataclass(frozen=True)
class TranscriptWord:
    text: str
    start: float
    end: float

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise SemanticsError(
                f"word {self.text!r}: need 0 <= start < end, got [{self.start}, {self.end}]"
            )


@dataclass(frozen=True)
class PlanSpan:
    """One injected region: transcript words -> a latent index range [start, end)."""

    word_range: tuple[int, int]
    entry_id: str
    start_latent_index: int
    end_latent_index: int


@dataclass(frozen=True)
class InjectionPlan:
    spans: tuple[PlanSpan, ...]
    latent_length: int

    def __post_init__(self):
        edges = sorted((s.start_latent_index, s.end_latent_index) for s in self.spans)
        for (a0, a1), (b0, _) in zip(edges, edges[1:]):
            if b0 < a1:
                raise SemanticsError("plan spans overlap in latent indices")
        for s in self.spans:
            if not 0 <= s.start_latent_index < s.end_latent_index <= self.latent_length:
                raise SemanticsError(
                    f"span [{s.start_latent_index}, {s.end_latent_index}) outside "
                    f"latent timeline of length {self.latent_length}"
                )

    @property
    def empty(self) -> bool:
        return not self.spans


def validate_transcript(words: list[TranscriptWord]) -> list[TranscriptWord]:
    for a, b in zip(words, words[1:]):
        if b.start < a.end:
            raise SemanticsError(f"words {a.text!r} and {b.text!r} overlap or are unsorted")
    return words


# ---------------------------------------------------------------------------
# Database
# ---------------------------------------------------------------------------


class GestureDatabase:
    """Immutable id/keyword/category-indexed set of semantic gesture entries."""

    def __init__(self, entries: list[SemanticGestureEntry]):
        self.entries: dict[str, SemanticGestureEntry] = {}
        self.by_keyword: dict[str, list[str]] = {}
        self.by_category: dict[str, list[str]] = {}
        for e in entries:
            if e.entry_id in self.entries:
                raise SemanticsError(f"duplicate entry id {e.entry_id!r}")
            self.entries[e.entry_id] = e
            for kw in e.keywords:
                self.by_keyword.setdefault(kw.lower(), []).append(e.entry_id)
            self.by_category.setdefault(e.category, []).append(e.entry_id)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, entry_id: str) -> bool:
        return entry_id in self.entries

    def get(self, entry_id: str) -> SemanticGestureEntry:
        if entry_id not in self.entries:
            raise SemanticsError(f"unknown gesture entry {entry_id!r}")
        return self.entries[entry_id]

    def lookup_keyword(self, keyword: str) -> list[SemanticGestureEntry]:
        return [self.entries[i] for i in self.by_keyword.get(keyword.lower(), [])]


def build_database(
    labeled_clips: list[dict], vqvae: VqvaeModel
) -> GestureDatabase:
    """Encode labeled clips into a gesture database.

    Each item: {id, label, category, keywords, clip: MotionClip}. Clips longer
    than 3 s are rejected by id; embeddings come from the supplied encoder.
    """
    entries = []
    seen: set[str] = set()
    for item in labeled_clips:
        entry_id = item["id"]
        if entry_id in seen:
            raise SemanticsError(f"duplicate entry id {entry_id!r}")
        seen.add(entry_id)
        clip: MotionClip = item["clip"]
        if clip.duration > MAX_ENTRY_SECONDS:
            raise SemanticsError(
                f"entry {entry_id!r}: clip of {clip.duration:.2f}s exceeds 3s limit"
            )
        entries.append(
            SemanticGestureEntry(
                entry_id=entry_id,
                label=item["label"],
                category=item.get("category", "other"),
                keywords=tuple(item["keywords"]),
                duration=clip.duration,
                embedding=encode(vqvae, clip),
                source=item.get("source", ""),
            )
        )
    return GestureDatabase(entries)


def save_database(db: GestureDatabase, path: str | Path) -> None:
    doc = {
        "format": "gesturegen-db",
        "version": 1,
        "entries": [
            {
                "id": e.entry_id,
                "label": e.label,
                "category": e.category,
                "keywords": list(e.keywords),
                "duration": e.duration,
                "source": e.source,
                "source_fps": e.embedding.source_fps,
                "embedding": e.embedding.values.tolist(),
            }
            for e in db.entries.values()
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_database(path: str | Path) -> GestureDatabase:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "gesturegen-db":
        raise SemanticsError(f"{path}: not a gesture database")
    entries = [
        SemanticGestureEntry(
            entry_id=e["id"],
            label=e["label"],
            category=e["category"],
            keywords=tuple(e["keywords"]),
            duration=e["duration"],
            embedding=LatentSequence(
                np.asarray(e["embedding"], dtype=np.float32), e.get("source_fps", 30.0)
            ),
            source=e.get("source", ""),
        )
        for e in doc["entries"]
    ]
    return GestureDatabase(entries)


# ---------------------------------------------------------------------------
# LLM clients
# ---------------------------------------------------------------------------


class LlmClient:
    """Minimal completion interface: complete(prompt) -> text."""

    def complete(self, prompt: str) -> str:
        raise NotImplementedError


class ScriptedClient(LlmClient):
    """Returns canned responses in order; raises when exhausted."""

    def __init__(self, responses: list[str]):
        self.responses = list(responses)
        self.prompts: list[str] = []

    def complete(self, prompt: str) -> str:
        self.prompts.append(prompt)
        if not self.responses:
            raise RuntimeError("scripted client exhausted")
        return self.responses.pop(0)


class ReplayClient(ScriptedClient):
    """Replays responses recorded to a JSON file by RecordingClient."""

    def __init__(self, path: str | Path):
        super().__init__(json.loads(Path(path).read_text()))


class RecordingClient(LlmClient):
    """Wraps a client and appends every response to a replay file."""

    def __init__(self, inner: LlmClient, path: str | Path):
        self.inner = inner
        self.path = Path(path)

    def complete(self, prompt: str) -> str:
        text = self.inner.complete(prompt)
        log = json.loads(self.path.read_text()) if self.path.exists() else []
        log.append(text)
        self.path.write_text(json.dumps(log))
        return text


class HttpClient(LlmClient):
    """OpenAI-style chat-completions client configured from the environment."""

    def __init__(self, endpoint: str, api_key: str, model: str):
        self.endpoint = endpoint
        self.api_key = api_key
        self.model = model

    def complete(self, prompt: str) -> str:
        import requests

        resp = requests.post(
            self.endpoint,
            headers={"Authorization": f"Bearer {self.api_key}"},
            json={
                "model": self.model,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": 0.0,
            },
            timeout=60,
        )
        resp.raise_for_status()
        return resp.json()["choices"][0]["message"]["content"]


def client_from_env() -> LlmClient | None:
    """HttpClient from GESTUREGEN_LLM_{ENDPOINT,KEY,MODEL}, or None if unset."""
    endpoint = os.environ.get("GESTUREGEN_LLM_ENDPOINT")
    if not endpoint:
        return None
    return HttpClient(
        endpoint,
        os.environ.get("GESTUREGEN_LLM_KEY", ""),
        os.environ.get("GESTUREGEN_LLM_MODEL", "gpt-4"),
    )


# ---------------------------------------------------------------------------
# Prompting and assignment
# ---------------------------------------------------------------------------

DEFAULT_PROMPT_TEMPLATE = DATA_DIR / "prompt_template.txt"


def render_prompt(
    transcript: list[TranscriptWord],
    db: GestureDatabase,
    template_path: str | Path | None = None,
) -> str:
    """Fill the three-part prompt template (task, few-shot examples, final task)."""
    template = Path(template_path or DEFAULT_PROMPT_TEMPLATE).read_text()
    catalog = "\n".join(
        f"- {e.entry_id}: {e.label} (keywords: {', '.join(e.keywords)})"
        for e in db.entries.values()
    )
    words = " ".join(f"{i}:{w.text}" for i, w in enumerate(transcript))
    return template.format(gesture_catalog=catalog, transcript=words)


def parse_assignment_response(
    text: str, transcript: list[TranscriptWord], db: GestureDatabase
) -> tuple[list[tuple[tuple[int, int], str]], list[int]]:
    """Strictly parse the structured (word index, gesture id) list.

    Returns (valid assignments, word indices whose items were dropped).
    Raises SemanticsError when the response is not a well-formed list at all.
    """
    try:
        items = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SemanticsError(f"response is not valid JSON: {exc}") from exc
    if not isinstance(items, list):
        raise SemanticsError("response must be a JSON array")
    valid: list[tuple[tuple[int, int], str]] = []
    dropped: list[int] = []
    for item in items:
        if not isinstance(item, dict) or "index" not in item or "gesture_id" not in item:
            raise SemanticsError(f"malformed assignment item: {item!r}")
        idx = item["index"]
        end_idx = item.get("end_index", idx)
        if not (isinstance(idx, int) and isinstance(end_idx, int)):
            raise SemanticsError(f"assignment indices must be integers: {item!r}")
        gid = item["gesture_id"]
        in_range = 0 <= idx <= end_idx < len(transcript)
        if in_range and isinstance(gid, str) and gid in db:
            valid.append(((idx, end_idx), gid))
        else:
            if in_range:
                dropped.extend(range(idx, end_idx + 1))
    return valid, dropped


def keyword_fallback_assign(
    transcript: list[TranscriptWord],
    db: GestureDatabase,
    word_indices: list[int] | None = None,
) -> list[tuple[tuple[int, int], str]]:
    """Deterministic longest-match keyword scan over the transcript.

    Case-insensitive, leftmost-first, non-overlapping. Multi-word keywords
    match consecutive words. `word_indices` restricts matching to spans that
    start on those words.
    """
    validate_transcript(transcript)
    keywords = sorted(db.by_keyword, key=lambda k: (-len(k.split()), k))
    allowed = set(word_indices) if word_indices is not None else None
    texts = [w.text.lower().strip(".,!?;:") for w in transcript]
    out: list[tuple[tuple[int, int], str]] = []
    taken: set[int] = set()
    i = 0
    while i < len(texts):
        if i in taken or (allowed is not None and i not in allowed):
            i += 1
            continue
        matched = False
        for kw in keywords:
            parts = kw.split()
            j = i + len(parts)
            if j <= len(texts) and texts[i:j] == parts and not (taken & set(range(i, j))):
                out.append(((i, j - 1), db.by_keyword[kw][0]))
                taken.update(range(i, j))
                i = j
                matched = True
                break
        if not matched:
            i += 1
    return out


def assign_gestures(
    transcript: list[TranscriptWord],
    db: GestureDatabase,
    client: LlmClient | None = None,
    template_path: str | Path | None = None,
) -> list[tuple[tuple[int, int], str]]:
    """Assign candidate gestures to transcript words.

    Asks the client once, retries once on malformed output, then falls back
    to the keyword scan. Items with unknown ids or out-of-range words are
    dropped and their words re-resolved through the fallback. Results are
    sorted in transcript order and never overlap.
    """
    validate_transcript(transcript)
    if not transcript:
        return []
    if client is None:
        return keyword_fallback_assign(transcript, db)
    prompt = render_prompt(transcript, db, template_path)
    valid, dropped = None, []
    for attempt in range(2):
        try:
            text = client.complete(prompt if attempt == 0 else prompt + "\nThe previous reply was invalid. Reply with the JSON array only.")
            valid, dropped = parse_assignment_response(text, transcript, db)
            break
        except (SemanticsError, RuntimeError, OSError) as exc:
            if attempt == 1:
                warnings.warn(f"LLM assignment failed, using keyword fallback: {exc}")
                return keyword_fallback_assign(transcript, db)
    assert valid is not None
    taken: set[int] = set()
    result = []
    for (a, b), gid in sorted(valid):
        if not (taken & set(range(a, b + 1))):
            result.append(((a, b), gid))
            taken.update(range(a, b + 1))
    if dropped:
        for span, gid in keyword_fallback_assign(
            transcript, db, [i for i in dropped if i not in taken]
        ):
            if not (taken & set(range(span[0], span[1] + 1))):
                result.append((span, gid))
                taken.update(range(span[0], span[1] + 1))
    return sorted(result)


# ---------------------------------------------------------------------------
# Plans, masks, and candidate alignment
# ---------------------------------------------------------------------------


def word_range_to_latent_span(
    transcript: list[TranscriptWord],
    word_range: tuple[int, int],
    latent_fps: float = 7.5,
) -> tuple[int, int]:
    """Map a word range to the half-open latent index range [floor, ceil)."""
    start = transcript[word_range[0]].start
    end = transcript[word_range[1]].end
    return int(np.floor(start * latent_fps)), int(np.ceil(end * latent_fps))


def build_plan(
    transcript: list[TranscriptWord],
    assignments: list[tuple[tuple[int, int], str]],
    db: GestureDatabase,
    latent_length: int,
    latent_fps: float = 7.5,
) -> InjectionPlan:
    """Turn word-level assignments into latent-index spans with alignment.

    Spans are aligned to their entry embeddings (crop/shrink rules of
    align_candidate_to_span), clamped to the timeline, and assignments whose
    span collapses or collides with an earlier one are skipped.
    """
    spans: list[PlanSpan] = []
    occupied = np.zeros(latent_length, dtype=bool)
    for word_range, entry_id in sorted(assignments):
        lo, hi = word_range_to_latent_span(transcript, word_range, latent_fps)
        lo, hi = max(lo, 0), min(hi, latent_length)
        if hi <= lo:
            continue
        entry = db.get(entry_id)
        _, (lo, hi) = align_candidate_to_span(entry.embedding.values, (lo, hi))
        if occupied[lo:hi].any():
            continue
        occupied[lo:hi] = True
        spans.append(PlanSpan(word_range, entry_id, lo, hi))
    return InjectionPlan(tuple(spans), latent_length)


def make_timeline_mask(plan: InjectionPlan, latent_length: int) -> np.ndarray:
    """Per-latent-frame mask: 1 keeps generated content, 0 marks injection."""
    if latent_length != plan.latent_length:
        raise SemanticsError(
            f"mask length {latent_length} != plan length {plan.latent_length}"
        )
    mask = np.ones(latent_length, dtype=np.float32)
    for s in plan.spans:
        if s.end_latent_index > latent_length:
            raise SemanticsError("span outside mask range")
        mask[s.start_latent_index : s.end_latent_index] = 0.0
    return mask


def perturb_embedding(embedding: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Diversity noise: embedding + sigma * N(0, I), reproducible from seed."""
    if sigma < 0:
        raise SemanticsError("sigma must be >= 0")
    emb = np.asarray(embedding, dtype=np.float32)
    if sigma == 0:
        return emb.copy()
    rng = np.random.default_rng(seed)
    return emb + sigma * rng.standard_normal(emb.shape).astype(np.float32)


def align_candidate_to_span(
    embedding: np.ndarray, span: tuple[int, int]
) -> tuple[np.ndarray, tuple[int, int]]:
    """Fit an entry embedding to a latent span.

    Longer entries are center-cropped to the span; shorter entries keep
    their full length and the span shrinks to a centered sub-range. Returns
    (latent segment, adjusted [start, end) span); segment length always
    equals the adjusted span length.
    """
    lo, hi = span
    if hi - lo < 1:
        raise SemanticsError(f"span [{lo}, {hi}) must have length >= 1")
    emb = np.asarray(embedding)
    n, m = emb.shape[0], hi - lo
    if n == m:
        return emb.copy(), (lo, hi)
    if n > m:
        off = (n - m) // 2
        return emb[off : off + m].copy(), (lo, hi)
    off = (m - n) // 2
    return emb.copy(), (lo + off, lo + off + n)


def plan_candidate_buffer(
    plan: InjectionPlan,
    db: GestureDatabase,
    latent_dim: int,
    sigma: float = 0.0,
    seed: int = 0,
) -> np.ndarray:
    """Full-length candidate latent buffer for the injection sampler.

    Zeros outside spans (those indices are masked off anyway); inside each
    span, the aligned and optionally perturbed entry embedding.
    """
    buf = np.zeros((plan.latent_length, latent_dim), dtype=np.float32)
    for k, s in enumerate(plan.spans):
        entry = db.get(s.entry_id)
        seg, (lo, hi) = align_candidate_to_span(
            entry.embedding.values, (s.start_latent_index, s.end_latent_index)
        )
        if (lo, hi) != (s.start_latent_index, s.end_latent_index):
            raise SemanticsError(
                f"span {k} was not pre-aligned to its entry (expected during build_plan)"
            )
        if sigma > 0:
            seg = perturb_embedding(seg, sigma, seed + k)
        buf[lo:hi] = seg
    return buf


# Serialization of plans and transcripts -------------------------------------


def save_plan(plan: InjectionPlan, mask: np.ndarray, path: str | Path) -> None:
    doc = {
        "format": "gesturegen-plan",
        "version": 1,
        "latent_length": plan.latent_length,
        "spans": [
            {
                "word_range": list(s.word_range),
                "entry_id": s.entry_id,
                "start_latent_index": s.start_latent_index,
                "end_latent_index": s.end_latent_index,
            }
            for s in plan.spans
        ],
        "mask": np.asarray(mask).astype(int).tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_plan(path: str | Path) -> tuple[InjectionPlan, np.ndarray]:
    doc = json.loads(Path(path).read_text())
    spans = tuple(
        PlanSpan(
            tuple(s["word_range"]), s["entry_id"],
            s["start_latent_index"], s["end_latent_index"],
        )
        for s in doc["spans"]
    )
    plan = InjectionPlan(spans, doc["latent_length"])
    return plan, np.asarray(doc["mask"], dtype=np.float32)


def save_transcript(words: list[TranscriptWord], path: str | Path) -> None:
    doc = {
        "format": "gesturegen-transcript",
        "version": 1,
        "words": [{"text": w.text, "start": w.start, "end": w.end} for w in words],
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_transcript(path: str | Path) -> list[TranscriptWord]:
    doc = json.loads(Path(path).read_text())
    words = [TranscriptWord(w["text"], w["start"], w["end"]) for w in doc["words"]]
    return validate_transcript(words)
