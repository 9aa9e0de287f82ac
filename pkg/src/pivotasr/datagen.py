"""Deterministic synthetic corpus generator.

Utterances have the shape ``<lead-in carrier> <wake word> <carrier>
<proper name>`` (lead-in and proper name optional).  Features are symbolic:
every character token owns a fixed prototype vector and contributes
``frames_per_token`` frames of prototype-plus-gaussian-noise, so the corpus
exercises sequence learning without any audio.  The wake-word end frame is
the oracle pivot signal and aligns exactly with the last frame generated
from the wake-word (or confusable) tokens.

Train/held-out disjointness: the composition space (lead-in, wake word,
carrier, proper name) is partitioned between the two sides before sampling,
and each wake word gets disjoint per-side confusable pools, so no held-out
composition ever appears in training.  Noise streams are keyed per utterance.

Separability: with noise_std <= 0.5 a nearest-prototype classifier recovers
token identity from single frames essentially perfectly (>= 99%); the
reference corpus uses a larger noise_std on purpose so the pretrained model
has headroom for biasing gains.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError

ALPHABET = "abcdefghijklmnopqrstuvwxyz '"
VOCAB_SIZE = len(ALPHABET) + 1  # id 0 is the transducer blank
_CHAR_TO_ID = {c: i + 1 for i, c in enumerate(ALPHABET)}

DEFAULT_WAKE_WORDS = ("hey shaq", "ziggy", "astra", "bluebird", "magnolia", "orion")
DEFAULT_PROPER_NAMES = (
    "brad pitt",
    "ada lovelace",
    "alan turing",
    "grace hopper",
    "marie curie",
    "elvis",
    "frida kahlo",
    "tim cook",
    "neil young",
    "mona lisa",
    "isaac newton",
    "rosa parks",
    "james brown",
    "emmy noether",
    "nina simone",
    "leo tolstoy",
    "amelia earhart",
    "john coltrane",
    "mary shelley",
    "david bowie",
)
DEFAULT_CARRIERS = (
    "please call",
    "send a message to",
    "play some music by",
    "show photos of",
    "turn on the lights",
    "what is the weather",
    "set a timer",
    "add milk to my list",
)
DEFAULT_LEAD_INS = ("",)


def tokenize(text):
    """Map text to character token ids; rejects out-of-alphabet characters."""
    ids = []
    for c in text:
        if c not in _CHAR_TO_ID:
            raise DataError(f"character {c!r} is not in the corpus alphabet")
        ids.append(_CHAR_TO_ID[c])
    return ids


def detokenize(token_ids):
    chars = []
    for t in token_ids:
        t = int(t)
        if not (1 <= t <= len(ALPHABET)):
            raise DataError(f"token id {t} is outside the alphabet range")
        chars.append(ALPHABET[t - 1])
    return "".join(chars)


def token_prototype(token_id, seed, feat_dim):
    """Fixed per-token feature vector, a pure function of (token id, seed)."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, 0x70726F74, int(token_id)])
    return np.random.default_rng(ss).normal(0.0, 1.0, size=feat_dim)


def prototype_table(seed, feat_dim):
    return np.stack(
        [token_prototype(t, seed, feat_dim) for t in range(1, VOCAB_SIZE)], axis=0
    )


def featurize(
    tokens,
    seed,
    *,
    feat_dim=16,
    frames_per_token=2,
    noise_std=0.0,
    ww_token_end=None,
    noise_key=0,
):
    """Render tokens to frames; returns (frames, ww_end_frame).

    Each token contributes ``frames_per_token`` copies of its prototype plus
    gaussian noise.  ``ww_token_end`` is the index of the last wake-word
    token; the returned boundary is the last frame generated from it (or -1
    when None).  Deterministic under (tokens, seed, noise_key).
    """
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise DataError("featurize: empty token sequence")
    protos = np.stack([token_prototype(t, seed, feat_dim) for t in tokens], axis=0)
    frames = np.repeat(protos, frames_per_token, axis=0)
    if noise_std > 0:
        ss = np.random.SeedSequence([seed & 0xFFFFFFFF, 0x6E6F6973, int(noise_key)])
        frames = frames + np.random.default_rng(ss).normal(
            0.0, noise_std, size=frames.shape
        )
    if ww_token_end is None:
        ww_end_frame = -1
    else:
        if not (0 <= ww_token_end < len(tokens)):
            raise DataError(f"ww_token_end {ww_token_end} outside token range")
        ww_end_frame = (ww_token_end + 1) * frames_per_token - 1
    return frames, ww_end_frame


@dataclass
class CorpusSpec:
    seed: int = 1234
    n_utterances: int = 240
    wake_words: tuple = DEFAULT_WAKE_WORDS
    proper_names: tuple = DEFAULT_PROPER_NAMES
    carrier_phrases: tuple = DEFAULT_CARRIERS
    lead_in_carriers: tuple = DEFAULT_LEAD_INS
    frames_per_token: int = 2
    noise_std: float = 1.0
    negative_ww_fraction: float = 0.3
    general_mix: float = 2.5  # proper-name : general utterances = 1 : general_mix
    heldout_fraction: float = 1.0 / 3.0
    feat_dim: int = 16

    def validate(self):
        if not self.wake_words:
            raise DataError("need at least one wake word")
        if not self.carrier_phrases:
            raise DataError("need at least one carrier phrase")
        if not self.proper_names:
            raise DataError("need at least one proper name")
        if not (0.0 <= self.negative_ww_fraction <= 1.0):
            raise DataError("negative_ww_fraction must lie in [0, 1]")
        if not (0.0 < self.heldout_fraction < 1.0):
            raise DataError("heldout_fraction must lie in (0, 1)")
        if self.n_utterances < 2 or self.frames_per_token < 1 or self.feat_dim < 1:
            raise DataError("corpus spec sizes must be positive (n_utterances >= 2)")
        if self.general_mix < 0:
            raise DataError("general_mix must be >= 0")
        for w in self.wake_words + self.proper_names + self.carrier_phrases:
            tokenize(w)
        for w in self.lead_in_carriers:
            tokenize(w)
        return self


@dataclass
class Utterance:
    utt_id: str
    text: str
    tokens: tuple
    frames: np.ndarray
    ww_end_frame: int
    is_true_ww: bool
    spoken_ww: str
    spoken_pn: str | None = None


@dataclass
class Corpus:
    train: list
    heldout: list
    spec: CorpusSpec = field(default=None)


def _perturb_surface(surface, rng, forbidden):
    """Edit-distance 1-2 confusable that stays inside the alphabet and away
    from every true wake word."""
    letters = ALPHABET[:26]
    for _ in range(200):
        chars = list(surface)
        for _ in range(int(rng.integers(1, 3))):
            op = rng.integers(0, 3)
            pos_candidates = [i for i, c in enumerate(chars) if c != " "]
            if not pos_candidates:
                break
            i = int(rng.choice(pos_candidates))
            if op == 0:  # substitute
                chars[i] = letters[int(rng.integers(0, 26))]
            elif op == 1 and len(chars) > 2:  # delete
                del chars[i]
            else:  # insert
                chars.insert(i, letters[int(rng.integers(0, 26))])
        cand = "".join(chars).strip()
        if cand and cand not in forbidden:
            return cand
    raise DataError(f"could not derive a confusable for {surface!r}")


def _confusable_pools(spec, per_side=3):
    """Disjoint per-side confusable surfaces for every wake word."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x636F6E66]))
    pools = {}
    for ww in spec.wake_words:
        seen = set(spec.wake_words)
        surfaces = []
        while len(surfaces) < 2 * per_side:
            cand = _perturb_surface(ww, rng, seen)
            seen.add(cand)
            surfaces.append(cand)
        pools[ww] = {"train": surfaces[:per_side], "heldout": surfaces[per_side:]}
    return pools


def _split_compositions(items, heldout_fraction, rng):
    items = list(items)
    order = rng.permutation(len(items))
    n_held = max(1, int(round(len(items) * heldout_fraction)))
    held_idx = set(order[:n_held].tolist())
    train = [it for i, it in enumerate(items) if i not in held_idx]
    held = [it for i, it in enumerate(items) if i in held_idx]
    return train, held


def generate_corpus(spec):
    """Build (train, held-out) utterance lists; a pure function of the spec."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x636F7270]))

    pn_comps = [
        (li, ww, c, pn)
        for li in spec.lead_in_carriers
        for ww in spec.wake_words
        for c in spec.carrier_phrases
        for pn in spec.proper_names
    ]
    gen_comps = [
        (li, ww, c, None)
        for li in spec.lead_in_carriers
        for ww in spec.wake_words
        for c in spec.carrier_phrases
    ]
    pn_train, pn_held = _split_compositions(pn_comps, spec.heldout_fraction, rng)
    gen_train, gen_held = _split_compositions(gen_comps, spec.heldout_fraction, rng)
    pools = _confusable_pools(spec)

    n_held = max(1, int(round(spec.n_utterances * spec.heldout_fraction)))
    n_train = spec.n_utterances - n_held
    pn_prob = 1.0 / (1.0 + spec.general_mix) if spec.general_mix > 0 else 1.0

    def build_side(side, count, pn_pool, gen_pool, id_offset):
        side_rng = np.random.default_rng(
            np.random.SeedSequence([spec.seed, 0x73696465, 0 if side == "train" else 1])
        )
        utts = []
        for i in range(count):
            use_pn = side_rng.random() < pn_prob
            pool = pn_pool if use_pn else gen_pool
            li, ww, carrier, pn = pool[int(side_rng.integers(0, len(pool)))]
            is_true = side_rng.random() >= spec.negative_ww_fraction
            if is_true:
                ww_surface = ww
            else:
                choices = pools[ww][side]
                ww_surface = choices[int(side_rng.integers(0, len(choices)))]
            parts = [p for p in (li, ww_surface, carrier) if p]
            if pn:
                parts.append(pn)
            text = " ".join(parts)
            prefix = " ".join(p for p in (li, ww_surface) if p)
            tokens = tuple(tokenize(text))
            ww_token_end = len(tokenize(prefix)) - 1
            frames, ww_end = featurize(
                tokens,
                spec.seed,
                feat_dim=spec.feat_dim,
                frames_per_token=spec.frames_per_token,
                noise_std=spec.noise_std,
                ww_token_end=ww_token_end,
                noise_key=id_offset + i,
            )
            utts.append(
                Utterance(
                    utt_id=f"{side}-{i:04d}",
                    text=text,
                    tokens=tokens,
                    frames=frames,
                    ww_end_frame=ww_end,
                    is_true_ww=bool(is_true),
                    spoken_ww=ww_surface,
                    spoken_pn=pn,
                )
            )
        return utts

    train = build_side("train", n_train, pn_train, gen_train, 0)
    heldout = build_side("heldout", n_held, pn_held, gen_held, n_train)
    return Corpus(train=train, heldout=heldout, spec=replace(spec))


def write_corpus(path, utterances):
    """Line-delimited JSON, one record per utterance."""
    with open(path, "w", encoding="utf-8") as fh:
        for u in utterances:
            rec = {
                "id": u.utt_id,
                "transcript": u.text,
                "is_true_ww": u.is_true_ww,
                "ww_end_frame": u.ww_end_frame,
                "frames": u.frames.tolist(),
                "spoken_ww": u.spoken_ww,
                "spoken_pn": u.spoken_pn,
            }
            fh.write(json.dumps(rec) + "\n")


def read_corpus(path):
    utts = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                utts.append(
                    Utterance(
                        utt_id=rec["id"],
                        text=rec["transcript"],
                        tokens=tuple(tokenize(rec["transcript"])),
                        frames=np.asarray(rec["frames"], dtype=np.float64),
                        ww_end_frame=int(rec["ww_end_frame"]),
                        is_true_ww=bool(rec["is_true_ww"]),
                        spoken_ww=rec.get("spoken_ww", ""),
                        spoken_pn=rec.get("spoken_pn"),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{ln}: malformed corpus record ({exc})") from exc
    return utts
