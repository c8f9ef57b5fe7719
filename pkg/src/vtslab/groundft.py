"""Grounding-FT style instruction records from moment-retrieval and highlight annotations.

Each record is a ShareGPT-style conversation: one ``user`` message holding a
prompt template with the query filled in, one ``assistant`` message holding
the answer, and the list of video files.  Datasets are written as a JSON
array (two-space indent, UTF-8, trailing newline).

Timestamps are kept as :class:`decimal.Decimal` so an MR answer reproduces the
source text exactly (``15.51`` stays ``15.51``, ``0`` stays ``0``).  HD clip
bounds are rendered as floats (``96.0s``) at two-second granularity.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ValidationError
from .numerics import RngState

VIDEO_TOKEN = "<video>"
CLIP_SECONDS = 2

MR_TEMPLATES = (
    "<video>At what point in the video did the following events occur: {query}? Output the start and end timestamps.",
    "<video>What is the location of the moment: {query}?",
    "<video>Find when the following event happens in the video: {query}. Give me the start and end times.",
    "<video>Please indicate the start and end timestamps for the event: {query}.",
    "<video>Please predict start and end time of the following moment: {query}.",
    "<video>During which time interval does this happen in the video: {query}?",
    "<video>Locate the moment in the video where this occurs: {query}. Provide start and end times.",
    "<video>For the video, when does this event take place: {query}? Answer with start and end timestamps.",
    "<video>I want to know the start and end times of the following event in the video: {query}.",
    "<video>Could you tell me from what time to what time this happens: {query}?",
    "<video>Can you tell me the time window of this event: {query}?",
    "<video>Please find the timestamps that mark the occurrence of this event: {query}.",
    "<video>Identify the start and end of the following event in the video: {query}.",
)

HD_TEMPLATES = (
    "<video>Please highlight the most exciting parts related to: {query}.",
    "<video>Find the most relevant or important moments for: {query}.",
    "<video>Which moments in the video best reflect: {query}?",
    "<video>Highlight the key segments that correspond to: {query}.",
    "<video>Show the most interesting clips about: {query}.",
    "<video>What are the highlight moments for: {query}?",
    "<video>Mark the time intervals that are most significant for: {query}.",
)

TIER_NAMES = ("very important", "important", "less important")
# lower bounds on the per-clip mean score; "less important" takes the rest
DEFAULT_TIER_THRESHOLDS = (3.5, 2.5)

_MR_ANSWER = re.compile(r"from (\S+)s to (\S+)s")
_CHARADES_LINE = re.compile(r"(\S+) ([^\s#]+) ([^\s#]+)##(.*)")
_SECONDS_IN_TEXT = re.compile(r"\d+(\.\d+)?\s*s\b")
_SENTENCE_END = (".", "?", "!")


# ---------------------------------------------------------------- annotations

def _decimal(value, what: str) -> Decimal:
    if isinstance(value, bool):
        raise ValidationError(f"{what}: {value!r} is not a number")
    try:
        d = value if isinstance(value, Decimal) else Decimal(str(value))
    except InvalidOperation:
        raise ValidationError(f"{what}: {value!r} is not a number") from None
    if not d.is_finite():
        raise ValidationError(f"{what}: {value!r} is not finite")
    return d


@dataclass(frozen=True)
class RawMr:
    video: str
    start: Decimal
    end: Decimal
    query: str

    def __post_init__(self):
        object.__setattr__(self, "start", _decimal(self.start, "start"))
        object.__setattr__(self, "end", _decimal(self.end, "end"))
        if not self.video or any(c.isspace() for c in self.video):
            raise ValidationError(f"bad video id {self.video!r}")
        if not self.query.strip():
            raise ValidationError(f"{self.video}: empty query")
        if "\n" in self.query or "\r" in self.query:
            raise ValidationError(f"{self.video}: query spans several lines")
        if not 0 <= self.start < self.end:
            raise ValidationError(f"{self.video}: need 0 <= start < end, got {self.start}, {self.end}")

    def to_line(self) -> str:
        """Charades-STA line ``id start end##query``."""
        return f"{self.video} {self.start} {self.end}##{self.query}"


@dataclass(frozen=True)
class RawHd:
    qid: int | str
    query: str
    vid: str
    relevant_windows: tuple[tuple[Decimal, Decimal], ...]
    saliency_scores: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        windows = tuple((_decimal(s, "window start"), _decimal(e, "window end")) for s, e in self.relevant_windows)
        scores = tuple(tuple(int(v) for v in t) for t in self.saliency_scores)
        object.__setattr__(self, "relevant_windows", windows)
        object.__setattr__(self, "saliency_scores", scores)
        if not self.query.strip():
            raise ValidationError(f"qid {self.qid}: empty query")
        if not self.vid:
            raise ValidationError(f"qid {self.qid}: empty vid")
        if not windows:
            raise ValidationError(f"qid {self.qid}: no relevant windows")
        for s, e in windows:
            if not 0 <= s < e:
                raise ValidationError(f"qid {self.qid}: invalid window [{s}, {e}]")
            if (e - s) % CLIP_SECONDS != 0:
                raise ValidationError(f"qid {self.qid}: window [{s}, {e}] is not a whole number of {CLIP_SECONDS}s clips")
        for t in scores:
            if len(t) != 3:
                raise ValidationError(f"qid {self.qid}: saliency entries must be triples, got {t}")
        n_clips = sum(int((e - s) // CLIP_SECONDS) for s, e in windows)
        if n_clips != len(scores):
            raise ValidationError(f"qid {self.qid}: {n_clips} clips in the windows but {len(scores)} score triples")

    def clips(self) -> list[tuple[Decimal, Decimal]]:
        out = []
        for s, e in self.relevant_windows:
            out += [(s + k * CLIP_SECONDS, s + (k + 1) * CLIP_SECONDS) for k in range(int((e - s) // CLIP_SECONDS))]
        return out

    def to_json(self) -> str:
        return _dumps_decimal({
            "qid": self.qid, "query": self.query, "vid": self.vid,
            "relevant_windows": [list(w) for w in self.relevant_windows],
            "saliency_scores": [list(t) for t in self.saliency_scores],
        })


def _dumps_decimal(obj) -> str:
    """Compact JSON with Decimals written in their source form."""
    if isinstance(obj, Decimal):
        return str(obj)
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(k)}:{_dumps_decimal(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_dumps_decimal(v) for v in obj) + "]"
    return json.dumps(obj, ensure_ascii=False)


def _loads(text: str):
    return json.loads(text, parse_float=Decimal, parse_int=Decimal)


def parse_charades_line(line: str) -> RawMr:
    m = _CHARADES_LINE.fullmatch(line.rstrip("\r\n"))
    if not m:
        raise ValidationError(f"not an 'id start end##query' line: {line!r}")
    return RawMr(m.group(1), _decimal(m.group(2), "start"), _decimal(m.group(3), "end"), m.group(4))


def mr_from_record(rec: dict) -> list[RawMr]:
    """One annotation per sentence of an ActivityNet-style record
    ``{"video_id", "timestamps": [[s, e], ...], "sentences": [...]}``."""
    try:
        video, stamps, sentences = rec["video_id"], rec["timestamps"], rec["sentences"]
    except (KeyError, TypeError):
        raise ValidationError("MR record needs video_id, timestamps and sentences") from None
    if len(stamps) != len(sentences):
        raise ValidationError(f"{video}: {len(stamps)} timestamps for {len(sentences)} sentences")
    out = []
    for (s, e), q in zip(stamps, sentences):
        out.append(RawMr(str(video), s, e, q.strip()))
    return out


def hd_from_record(rec: dict) -> RawHd:
    try:
        qid = rec["qid"]
        qid = int(qid) if isinstance(qid, Decimal) and qid == qid.to_integral_value() else qid
        return RawHd(qid, rec["query"], rec["vid"], tuple(tuple(w) for w in rec["relevant_windows"]),
                     tuple(tuple(t) for t in rec["saliency_scores"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"bad HD record: {exc}") from None


def read_annotations(path, task: str) -> list:
    """Auto-detect the input layout.

    MR accepts Charades-STA lines or JSON records (one per line, or a single
    array) in the ActivityNet layout; HD accepts one JSON record per line or a
    JSON array.
    """
    if task not in ("mr", "hd"):
        raise ValidationError(f"task must be 'mr' or 'hd', got {task!r}")
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}") from None
    stripped = text.lstrip()
    records = None
    if stripped.startswith("["):
        try:
            records = [(1, r) for r in _loads(text)]
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON array: {exc}") from None
    elif stripped.startswith("{"):
        # a single pretty-printed record; JSON Lines falls through on failure
        try:
            whole = _loads(text)
        except json.JSONDecodeError:
            whole = None
        if isinstance(whole, dict):
            records = [(1, whole)]
    out = []
    lines = [(i, line) for i, line in enumerate(text.splitlines(), start=1) if line.strip()]
    if records is None and task == "mr" and lines and not lines[0][1].lstrip().startswith("{"):
        for lineno, line in lines:
            try:
                out.append(parse_charades_line(line))
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
        return out
    if records is None:
        records = []
        for lineno, line in lines:
            try:
                records.append((lineno, _loads(line)))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from None
    for lineno, rec in records:
        try:
            if task == "mr":
                out += mr_from_record(rec)
            else:
                out.append(hd_from_record(rec))
        except ValidationError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return out


# ---------------------------------------------------------------- instances

@dataclass(frozen=True)
class Message:
    role: str
    content: str


@dataclass(frozen=True)
class GroundingInstance:
    messages: tuple[Message, ...]
    videos: tuple[str, ...]

    def __post_init__(self):
        roles = [m.role for m in self.messages]
        if roles != ["user", "assistant"]:
            raise ValidationError(f"expected one user then one assistant message, got {roles}")
        if not self.messages[0].content.startswith(VIDEO_TOKEN):
            raise ValidationError(f"user content must start with {VIDEO_TOKEN}")
        if not self.videos:
            raise ValidationError("no video reference")

    @property
    def prompt(self) -> str:
        return self.messages[0].content

    @property
    def answer(self) -> str:
        return self.messages[1].content

    def to_dict(self) -> dict:
        return {"messages": [{"role": m.role, "content": m.content} for m in self.messages],
                "videos": list(self.videos)}

    @classmethod
    def from_dict(cls, d) -> "GroundingInstance":
        if not isinstance(d, dict) or set(d) != {"messages", "videos"}:
            raise ValidationError("instance must have exactly 'messages' and 'videos'")
        msgs = []
        for m in d["messages"]:
            if not isinstance(m, dict) or set(m) != {"role", "content"}:
                raise ValidationError(f"bad message {m!r}")
            msgs.append(Message(m["role"], m["content"]))
        if not isinstance(d["videos"], list) or not all(isinstance(v, str) for v in d["videos"]):
            raise ValidationError("videos must be a list of strings")
        return cls(tuple(msgs), tuple(d["videos"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False)


def _pick(templates: Sequence[str], rng: RngState) -> str:
    if not templates:
        raise ValidationError("empty template pool")
    return templates[int(rng.integers(0, len(templates)))]


def _fill(template: str, query: str) -> str:
    """Substitute ``query``; a query ending in ``.?!`` absorbs the template's own mark after it."""
    if template.count("{query}") != 1 or not template.startswith(VIDEO_TOKEN):
        raise ValidationError(f"template must start with {VIDEO_TOKEN} and contain {{query}} once: {template!r}")
    head, tail = template.split("{query}")
    if query.endswith(_SENTENCE_END) and tail[:1] in _SENTENCE_END:
        tail = tail[1:]
    return head + query + tail


def mr_answer(start: Decimal, end: Decimal) -> str:
    return f"from {start}s to {end}s"


def parse_mr_answer(text: str) -> tuple[Decimal, Decimal]:
    m = _MR_ANSWER.fullmatch(text)
    if not m:
        raise ValidationError(f"not an MR answer: {text!r}")
    return _decimal(m.group(1), "start"), _decimal(m.group(2), "end")


def convert_mr(ann: RawMr, templates: Sequence[str] = MR_TEMPLATES, rng: RngState | None = None) -> GroundingInstance:
    template = _pick(templates, rng or RngState(0))
    prompt = _fill(template, ann.query)
    return GroundingInstance((Message("user", prompt), Message("assistant", mr_answer(ann.start, ann.end))),
                             (f"{ann.video}.mp4",))


def tier_of(mean_score: float, thresholds: tuple[float, float] = DEFAULT_TIER_THRESHOLDS) -> str:
    """Importance tier of a clip's mean score; monotone in the score."""
    very, important = thresholds
    if not very >= important:
        raise ValidationError(f"thresholds must be non-increasing, got {thresholds}")
    if mean_score >= very:
        return TIER_NAMES[0]
    if mean_score >= important:
        return TIER_NAMES[1]
    return TIER_NAMES[2]


def _seconds(d: Decimal) -> str:
    return f"{float(d)!r}s"


def hd_answer(ann: RawHd, thresholds: tuple[float, float] = DEFAULT_TIER_THRESHOLDS) -> str:
    tiers = {name: [] for name in TIER_NAMES}
    for (s, e), triple in zip(ann.clips(), ann.saliency_scores):
        mean = sum(triple) / 3
        tiers[tier_of(mean, thresholds)].append(f"{_seconds(s)} to {_seconds(e)}")
    parts = [f"{name} from " + ", ".join(spans) for name, spans in tiers.items() if spans]
    return "The highlights are: " + "; ".join(parts)


def convert_hd(ann: RawHd, templates: Sequence[str] = HD_TEMPLATES, rng: RngState | None = None,
               thresholds: tuple[float, float] = DEFAULT_TIER_THRESHOLDS) -> GroundingInstance:
    template = _pick(templates, rng or RngState(0))
    prompt = _fill(template, ann.query)
    return GroundingInstance((Message("user", prompt), Message("assistant", hd_answer(ann, thresholds))),
                             (f"{ann.vid}.mp4",))


def convert_all(anns: Iterable, task: str, seed: int) -> list[GroundingInstance]:
    """Convert in order; annotation ``i`` draws its template from ``RngState(seed).child(i)``."""
    root = RngState(seed)
    fn = convert_mr if task == "mr" else convert_hd
    return [fn(a, rng=root.child(i)) for i, a in enumerate(anns)]


# ---------------------------------------------------------------- dataset files

def dumps_dataset(instances: Sequence[GroundingInstance]) -> str:
    return json.dumps([i.to_dict() for i in instances], indent=2, ensure_ascii=False) + "\n"


def emit_dataset(instances: Sequence[GroundingInstance], path) -> None:
    path = Path(path)
    text = dumps_dataset(instances)
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot write {path}: {exc.strerror}") from None


def loads_dataset(text: str) -> list[GroundingInstance]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"invalid dataset JSON: {exc}") from None
    if not isinstance(data, list):
        raise ValidationError("dataset must be a JSON array")
    return [GroundingInstance.from_dict(d) for d in data]


def parse_dataset(path) -> list[GroundingInstance]:
    path = Path(path)
    try:
        return loads_dataset(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}") from None
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def strip_json_whitespace(text: str) -> str:
    """Drop whitespace outside string literals; the normalization used for golden comparisons."""
    out, in_string, escaped = [], False, False
    for ch in text:
        if in_string:
            out.append(ch)
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
        elif ch == '"':
            in_string = True
            out.append(ch)
        elif not ch.isspace():
            out.append(ch)
    return "".join(out)


def prompt_has_timestamp(prompt: str) -> bool:
    return bool(_SECONDS_IN_TEXT.search(prompt))
