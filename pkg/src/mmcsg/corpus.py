"""Deterministic synthetic sessions with planted cross-modal signal.

Each session's concern summary reads::

    patient seeks <intent-topic> for <audio-word-1> <audio-word-2> with <look> <mood>

* intent-topic follows the intent.  A cue word in the transcript names the
  intent's family; within a family the member is fixed by the concern itself:
  intents 0/1 by the audio phrase (first two vs last two), 2/3 by the age band
  (groups 0-2 vs 3-5), 4/5 by whether the look is "agitated", 6 stands alone.
  Recognising the intent therefore draws on every modality, and intent and
  summary are tied both ways;
* the audio phrase is one of four, picked by the signs of audio[0], audio[1];
* the look is one of three, picked by the bucket of video[0] (-1, 0, +1);
* the mood flips with the parity of the patient's age group.

Per session, with probability ``signal_strength`` the audio phrase and look are
left out of the transcript and only the modality vectors carry them; otherwise
the transcript spells them out and the audio/video vectors are pure noise.
:func:`planted_decode` applies the rule directly and reconstructs every target.

Randomness comes from :class:`Lcg64`, a 64-bit linear congruential generator
(multiplier 6364136223846793005, increment 1442695040888963407, modulus 2**64;
floats from the top 53 bits), so corpora can be reproduced without numpy.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .features import GENDERS, N_AGE_GROUPS, ModalityBundle

MASK64 = (1 << 64) - 1
LCG_MULTIPLIER = 6364136223846793005
LCG_INCREMENT = 1442695040888963407

INTENT_TOPICS = ("diagnosis", "treatment", "medication", "therapy", "prognosis",
                 "referral", "lifestyle")
INTENT_FAMILIES = ((0, 1), (2, 3), (4, 5), (6,))
FAMILY_CUES = (("diagnose", "condition"), ("pills", "treat"), ("outlook", "specialist"),
               ("habits", "routine"))
ADVICE = ("assessment", "plan", "prescription", "sessions", "monitoring", "consult",
          "exercise")
AUDIO_PHRASES = (("persistent", "worry"), ("sudden", "panic"),
                 ("chronic", "sadness"), ("restless", "insomnia"))
LOOKS = ("withdrawn", "tense", "agitated")
MOODS = ("calm", "anxious")
TEMPLATE_WORDS = ("patient", "seeks", "for", "with", "doctor", "advises", "about")


def fixed_words() -> list[str]:
    words = list(TEMPLATE_WORDS) + list(INTENT_TOPICS) + list(ADVICE)
    words += [w for pair in FAMILY_CUES for w in pair]
    words += [w for pair in AUDIO_PHRASES for w in pair]
    words += list(LOOKS) + list(MOODS)
    return list(dict.fromkeys(words))


class Lcg64:
    def __init__(self, seed: int):
        self.state = (int(seed) ^ 0x9E3779B97F4A7C15) & MASK64
        self.next_u64()

    def next_u64(self) -> int:
        self.state = (self.state * LCG_MULTIPLIER + LCG_INCREMENT) & MASK64
        return self.state

    def uniform(self) -> float:
        """Float in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, n: int) -> int:
        """Integer in [0, n)."""
        return min(int(self.uniform() * n), n - 1)

    def normal(self) -> float:
        u1 = 1.0 - self.uniform()  # (0, 1]
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def shuffle(self, items: list) -> list:
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.randint(i + 1)
            out[i], out[j] = out[j], out[i]
        return out


@dataclass
class SynthSpec:
    n_sessions: int = 1000
    vocab_size: int = 120
    n_intents: int = 7
    d_audio: int = 16
    d_visual: int = 16
    seed: int = 0
    signal_strength: float = 0.9
    min_filler: int = 10
    max_filler: int = 16

    def __post_init__(self):
        if self.n_sessions < 1:
            raise ValueError("n_sessions must be >= 1")
        if self.n_intents != len(INTENT_TOPICS):
            raise ValueError(f"the generator has exactly {len(INTENT_TOPICS)} intents")
        if self.vocab_size <= len(fixed_words()) + 8:
            raise ValueError(f"vocab_size must exceed {len(fixed_words()) + 8}")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ValueError("signal_strength must be in [0, 1]")
        if self.d_audio < 2 or self.d_visual < 1:
            raise ValueError("need d_audio >= 2 and d_visual >= 1")
        if not 0 < self.min_filler <= self.max_filler:
            raise ValueError("bad filler length range")

    @property
    def filler_words(self) -> list[str]:
        return [f"w{i:03d}" for i in range(self.vocab_size - len(fixed_words()))]


def intent_family(intent: int) -> tuple[int, int]:
    """(family index, member index) of an intent."""
    for f, members in enumerate(INTENT_FAMILIES):
        if intent in members:
            return f, members.index(intent)
    raise ValueError(f"unknown intent {intent}")


def summary_for(intent: int, audio_idx: int, look_idx: int, age_group: int) -> str:
    a1, a2 = AUDIO_PHRASES[audio_idx]
    return (f"patient seeks {INTENT_TOPICS[intent]} for {a1} {a2} "
            f"with {LOOKS[look_idx]} {MOODS[age_group % 2]}")


def doctor_summary_for(intent: int, audio_idx: int) -> str:
    return f"doctor advises {ADVICE[intent]} about {AUDIO_PHRASES[audio_idx][1]}"


def _audio_vector(rng: Lcg64, d: int, audio_idx: int | None) -> list[float]:
    vec = [rng.normal() for _ in range(d)]
    if audio_idx is not None:
        signs = (1.0 if audio_idx & 1 else -1.0, 1.0 if audio_idx & 2 else -1.0)
        for k, s in enumerate(signs):
            vec[k] = s * (0.5 + rng.uniform())
    return vec


def _video_vector(rng: Lcg64, d: int, look_idx: int | None) -> list[float]:
    vec = [rng.normal() for _ in range(d)]
    if look_idx is not None:
        vec[0] = (look_idx - 1) + 0.4 * (rng.uniform() - 0.5)
    return vec


def generate_corpus(spec: SynthSpec) -> list[ModalityBundle]:
    rng = Lcg64(spec.seed)
    filler = spec.filler_words
    sessions = []
    for n in range(spec.n_sessions):
        intent = rng.randint(spec.n_intents)
        audio_idx = rng.randint(len(AUDIO_PHRASES))
        look_idx = rng.randint(len(LOOKS))
        age_group = rng.randint(N_AGE_GROUPS)
        gender = GENDERS[rng.randint(len(GENDERS))]
        family, member = intent_family(intent)
        if family == 0:
            audio_idx = 2 * member + rng.randint(2)
        elif family == 1:
            age_group = 3 * member + rng.randint(3)
        elif family == 2:
            look_idx = 2 if member else rng.randint(2)
        hidden = rng.uniform() < spec.signal_strength

        n_fill = spec.min_filler + rng.randint(spec.max_filler - spec.min_filler + 1)
        words = [filler[rng.randint(len(filler))] for _ in range(n_fill)]
        inserts = [FAMILY_CUES[family][rng.randint(2)]]
        if not hidden:
            inserts += [*AUDIO_PHRASES[audio_idx], LOOKS[look_idx], MOODS[age_group % 2]]
        for w in inserts:
            words.insert(rng.randint(len(words) + 1), w)

        audio = _audio_vector(rng, spec.d_audio, audio_idx if hidden else None)
        video = _video_vector(rng, spec.d_visual, look_idx if hidden else None)
        sessions.append(ModalityBundle(
            session_id=f"s{n:05d}", transcript=" ".join(words), audio_vec=audio,
            video_vec=video, gender=gender, age_group=age_group, intent=intent,
            mcs=summary_for(intent, audio_idx, look_idx, age_group),
            doctor_summary=doctor_summary_for(intent, audio_idx)))
    return sessions


def planted_decode(bundle: ModalityBundle) -> str:
    """Rebuild the summary from the planted rule (the reference oracle)."""
    words = bundle.transcript.split()
    family = next(f for f, cues in enumerate(FAMILY_CUES) if any(c in words for c in cues))
    phrase = [i for i, (a, b) in enumerate(AUDIO_PHRASES) if a in words and b in words]
    if phrase:
        audio_idx = phrase[0]
    else:
        a = bundle.audio_vec[0]
        audio_idx = int(a[0] > 0) + 2 * int(a[1] > 0)
    looks = [i for i, w in enumerate(LOOKS) if w in words]
    look_idx = looks[0] if looks else int(np.clip(np.rint(bundle.video_vec[0, 0]) + 1, 0, 2))
    member = (audio_idx // 2, bundle.age_group // 3, int(look_idx == 2), 0)[family]
    intent = INTENT_FAMILIES[family][member]
    return summary_for(intent, audio_idx, look_idx, bundle.age_group)


def split(corpus: Sequence, ratios: Sequence[float] = (0.80, 0.06, 0.14),
          seed: int = 0) -> tuple[list, list, list]:
    """Seeded shuffle; train and val sizes are floored, test takes the rest.

    100 sessions give 80/6/14 and 10 give 8/0/2 (with a warning).
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    order = Lcg64(seed).shuffle(list(range(len(corpus))))
    n = len(corpus)
    n_train = math.floor(n * ratios[0] + 1e-9)
    n_val = math.floor(n * ratios[1] + 1e-9)
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    if any(len(p) == 0 for p in parts):
        warnings.warn(f"degenerate split of {n} sessions: sizes "
                      f"{tuple(len(p) for p in parts)}", stacklevel=2)
    return tuple([corpus[i] for i in p] for p in parts)
