"""Session ingestion: tokenisation, modality vectors and the JSONL format.

One session per line::

    {"id": str, "transcript": str, "audio": [float, ...],
     "video_frames": [[float, ...], ...]  or  "video": [float, ...],
     "gender": "male"|"female"|"other", "age_group": 0..5, "intent": 0..6,
     "mcs": str, "doctor_summary": str | null}

Frame lists are averaged into one video vector at load time.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import BOS, EOS, PAD, UNK
from .tensor import DimensionError

RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
GENDERS = ("male", "female", "other")
N_AGE_GROUPS = 6
PERSONAL_DIM = 2 + N_AGE_GROUPS
REQUIRED_FIELDS = ("id", "transcript", "audio", "gender", "age_group", "intent", "mcs")


class SchemaError(ValueError):
    """A session record is malformed or misses a field."""


class VocabSpec:
    """Token <-> id map with PAD/BOS/EOS/UNK fixed at ids 0-3."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens: list[str] = list(RESERVED)
        self.index: dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        for tok in tokens:
            if tok in self.index:
                continue
            self.index[tok] = len(self.tokens)
            self.tokens.append(tok)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, VocabSpec) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def words(self) -> list[str]:
        """Non-reserved tokens, in id order."""
        return self.tokens[len(RESERVED):]

    @classmethod
    def build(cls, texts: Iterable[str]) -> "VocabSpec":
        """Sorted vocabulary over every word in ``texts``."""
        seen: set[str] = set()
        for text in texts:
            seen.update(normalize(text))
        return cls(sorted(seen))


def normalize(text: str) -> list[str]:
    words = []
    for raw in text.lower().split():
        w = raw.strip(string.punctuation)
        if w:
            words.append(w)
    return words


def tokenize(text: str, vocab: VocabSpec, max_len: int = 480) -> list[int]:
    """Lowercase, split, strip punctuation, map (UNK fallback), wrap in BOS/EOS."""
    ids = [vocab.id(w) for w in normalize(text)][: max(max_len - 2, 0)]
    return [BOS, *ids, EOS]


def detokenize(ids: Sequence[int], vocab: VocabSpec) -> str:
    return " ".join(vocab.tokens[i] for i in ids if i not in (PAD, BOS, EOS))


def average_frame_embeddings(frames: Sequence[Sequence[float]]) -> np.ndarray:
    """Mean of per-frame embeddings, returned as a 1 x d row."""
    if len(frames) == 0:
        raise ValueError("no frames to average")
    try:
        arr = np.asarray(frames, dtype=np.float64)
    except ValueError as exc:
        raise DimensionError(f"frames must share one dimension ({exc})") from exc
    if arr.ndim == 3 and arr.shape[1] == 1:
        arr = arr[:, 0, :]
    if arr.ndim != 2:
        raise DimensionError(f"frames must share one dimension, got shape {arr.shape}")
    return arr.mean(axis=0, keepdims=True)


def encode_personal_context(gender: str, age_group: int) -> np.ndarray:
    """[male, female, age one-hot x 6]; ``other`` leaves both gender bits 0."""
    if gender not in GENDERS:
        raise ValueError(f"gender must be one of {GENDERS}, got {gender!r}")
    if not isinstance(age_group, (int, np.integer)) or not 0 <= age_group < N_AGE_GROUPS:
        raise ValueError(f"age_group must be in [0, {N_AGE_GROUPS}), got {age_group!r}")
    vec = np.zeros((1, PERSONAL_DIM))
    if gender == "male":
        vec[0, 0] = 1.0
    elif gender == "female":
        vec[0, 1] = 1.0
    vec[0, 2 + age_group] = 1.0
    return vec


@dataclass
class ModalityBundle:
    """One session.  Id lists are filled by :meth:`encode`."""

    session_id: str
    transcript: str
    audio_vec: np.ndarray
    video_vec: np.ndarray
    gender: str
    age_group: int
    intent: int
    mcs: str
    doctor_summary: str | None = None
    src_ids: list[int] | None = None
    tgt_ids: list[int] | None = None
    doctor_tgt_ids: list[int] | None = None
    personal_vec: np.ndarray = field(init=False)

    def __post_init__(self):
        self.audio_vec = np.asarray(self.audio_vec, dtype=np.float64).reshape(1, -1)
        self.video_vec = np.asarray(self.video_vec, dtype=np.float64).reshape(1, -1)
        self.personal_vec = encode_personal_context(self.gender, self.age_group)

    def encode(self, vocab: VocabSpec, max_src_len: int = 480,
               max_tgt_len: int = 50) -> "ModalityBundle":
        # targets carry BOS+EOS and the decoder sees all but the last id
        self.src_ids = tokenize(self.transcript, vocab, max_src_len)
        self.tgt_ids = tokenize(self.mcs, vocab, max_tgt_len + 1)
        if self.doctor_summary is not None:
            self.doctor_tgt_ids = tokenize(self.doctor_summary, vocab, max_tgt_len + 1)
        return self

    def to_record(self) -> dict:
        return {
            "id": self.session_id,
            "transcript": self.transcript,
            "audio": self.audio_vec[0].tolist(),
            "video": self.video_vec[0].tolist(),
            "gender": self.gender,
            "age_group": int(self.age_group),
            "intent": int(self.intent),
            "mcs": self.mcs,
            "doctor_summary": self.doctor_summary,
        }

    def same_session(self, other: "ModalityBundle") -> bool:
        return (self.to_record() == other.to_record()
                and np.array_equal(self.personal_vec, other.personal_vec))


def bundle_from_record(rec: dict, *, d_audio: int | None = None, d_visual: int | None = None,
                       n_intents: int = 7) -> ModalityBundle:
    missing = [k for k in REQUIRED_FIELDS if k not in rec]
    if "video" not in rec and "video_frames" not in rec:
        missing.append("video|video_frames")
    if missing:
        raise SchemaError(f"missing field(s): {', '.join(missing)}")
    if "video_frames" in rec:
        video = average_frame_embeddings(rec["video_frames"])
    else:
        video = np.asarray(rec["video"], dtype=np.float64).reshape(1, -1)
    audio = np.asarray(rec["audio"], dtype=np.float64).reshape(1, -1)
    if d_audio is not None and audio.shape[1] != d_audio:
        raise DimensionError(f"audio vector has length {audio.shape[1]}, expected {d_audio}")
    if d_visual is not None and video.shape[1] != d_visual:
        raise DimensionError(f"video vector has length {video.shape[1]}, expected {d_visual}")
    if not (np.all(np.isfinite(audio)) and np.all(np.isfinite(video))):
        raise SchemaError("non-finite modality vector")
    intent = rec["intent"]
    if not isinstance(intent, int) or not 0 <= intent < n_intents:
        raise SchemaError(f"intent {intent!r} outside [0, {n_intents})")
    return ModalityBundle(
        session_id=str(rec["id"]), transcript=rec["transcript"], audio_vec=audio,
        video_vec=video, gender=rec["gender"], age_group=rec["age_group"], intent=intent,
        mcs=rec["mcs"], doctor_summary=rec.get("doctor_summary"))


def load_sessions(path: str | Path, *, vocab: VocabSpec | None = None,
                  d_audio: int | None = None, d_visual: int | None = None,
                  n_intents: int = 7, max_src_len: int = 480,
                  max_tgt_len: int = 50) -> list[ModalityBundle]:
    """Parse a session JSONL file; errors name the offending line."""
    bundles = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise SchemaError(f"line {lineno}: expected an object")
            try:
                b = bundle_from_record(rec, d_audio=d_audio, d_visual=d_visual,
                                       n_intents=n_intents)
            except DimensionError as exc:
                raise DimensionError(f"line {lineno}: {exc}") from exc
            except (SchemaError, ValueError) as exc:
                raise SchemaError(f"line {lineno}: {exc}") from exc
            if vocab is not None:
                b.encode(vocab, max_src_len, max_tgt_len)
            bundles.append(b)
    return bundles


def dump_sessions(bundles: Iterable[ModalityBundle], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for b in bundles:
            fh.write(json.dumps(b.to_record(), ensure_ascii=False, sort_keys=True))
            fh.write("\n")
