"""Synthetic cipher languages, tokenizers, and corpus generators.

A "language" is a bijection over V content symbols plus an invertible order
transform, rendered into a disjoint token-id range so every content token
identifies its language. Base (language 0) is the pivot: its tokens are the
symbols themselves. The LM-side tokenizer applies a fixed bigram merge
table so the same Base sequence tokenizes to different lengths on the two
sides of the composition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import ConfigError, DomainError
from .rng import RngState

TRANSLATE = "translate"
INSTRUCT = "instruct"


def apply_transform(seq: list[int], transform: str) -> list[int]:
    if transform == "identity":
        return list(seq)
    if transform == "reverse":
        return list(reversed(seq))
    if transform.startswith("rotate-"):
        r = int(transform.split("-", 1)[1])
        if not seq:
            return []
        r %= len(seq)
        return list(seq[r:]) + list(seq[:r])
    raise ConfigError(f"unknown transform {transform!r}")


def invert_transform(seq: list[int], transform: str) -> list[int]:
    if transform == "identity":
        return list(seq)
    if transform == "reverse":
        return list(reversed(seq))
    if transform.startswith("rotate-"):
        r = int(transform.split("-", 1)[1])
        if not seq:
            return []
        r %= len(seq)
        return list(seq[-r:]) + list(seq[:-r]) if r else list(seq)
    raise ConfigError(f"unknown transform {transform!r}")


@dataclass(frozen=True)
class LanguageSpec:
    """One cipher language: id, symbol bijection, order transform."""

    lang_id: int
    permutation: tuple[int, ...]
    transform: str
    name: str

    def __post_init__(self):
        v = len(self.permutation)
        if sorted(self.permutation) != list(range(v)):
            raise ConfigError(f"permutation of language {self.lang_id} is not a bijection")
        apply_transform([0], self.transform)  # validates the tag

    @property
    def V(self) -> int:
        return len(self.permutation)

    @property
    def range_start(self) -> int:
        return self.lang_id * self.V


def render(symbols: Sequence[int], spec: LanguageSpec) -> list[int]:
    """Base symbols -> token ids: order transform, then bijection, then offset."""
    v = spec.V
    for s in symbols:
        if not (0 <= s < v):
            raise DomainError(f"symbol {s} outside [0, {v})")
    ordered = apply_transform(list(symbols), spec.transform)
    base = spec.range_start
    return [base + spec.permutation[s] for s in ordered]


def unrender(ids: Sequence[int], spec: LanguageSpec) -> list[int]:
    """Token ids -> Base symbols; exact inverse of render."""
    v = spec.V
    base = spec.range_start
    inv = [0] * v
    for s, p in enumerate(spec.permutation):
        inv[p] = s
    symbols = []
    for t in ids:
        if not (base <= t < base + v):
            raise DomainError(
                f"token {t} outside language {spec.lang_id} range [{base}, {base + v})"
            )
        symbols.append(inv[t - base])
    return invert_transform(symbols, spec.transform)


def make_languages(
    rng: RngState, V: int, n_cipher: int, transforms: Sequence[str] | None = None
) -> list[LanguageSpec]:
    """Base plus n_cipher random cipher languages, fixed by the rng seed."""
    if transforms is None:
        transforms = ["identity"] * n_cipher
    if len(transforms) != n_cipher:
        raise ConfigError(f"need {n_cipher} transforms, got {len(transforms)}")
    langs = [LanguageSpec(0, tuple(range(V)), "identity", "base")]
    for i in range(1, n_cipher + 1):
        perm = tuple(int(p) for p in rng.split(f"lang{i}").permutation(V))
        langs.append(LanguageSpec(i, perm, transforms[i - 1], f"cipher{i:02d}"))
    return langs


def split_languages(
    languages: Sequence[LanguageSpec], tuned_fraction: float
) -> tuple[list[int], list[int]]:
    """Deterministic tuned/untuned split of the cipher ids; Base is exempt."""
    cipher_ids = sorted(l.lang_id for l in languages if l.lang_id != 0)
    n = len(cipher_ids)
    n_tuned = int(round(n * tuned_fraction))
    if n_tuned < 1 or n_tuned >= n:
        raise ConfigError(
            f"degenerate split: {n_tuned} tuned of {n} at fraction {tuned_fraction}"
        )
    return cipher_ids[:n_tuned], cipher_ids[n_tuned:]


# ---------------------------------------------------------------------------
# tokenizers


@dataclass(frozen=True)
class EncTokenizer:
    """Shared encoder/decoder vocabulary over all language ranges.

    Content ids are the rendered token ids themselves; specials and one
    target-language token per language sit above every content range.
    """

    V: int
    n_languages: int  # total including Base

    @property
    def content_size(self) -> int:
        return self.V * self.n_languages

    @property
    def pad_id(self) -> int:
        return self.content_size

    @property
    def bos_id(self) -> int:
        return self.content_size + 1

    @property
    def eos_id(self) -> int:
        return self.content_size + 2

    def lang_token(self, lang_id: int) -> int:
        if not (0 <= lang_id < self.n_languages):
            raise DomainError(f"language id {lang_id} outside [0, {self.n_languages})")
        return self.content_size + 3 + lang_id

    @property
    def vocab_size(self) -> int:
        return self.content_size + 3 + self.n_languages

    def is_content(self, token: int) -> bool:
        return 0 <= token < self.content_size

    def strip_specials(self, ids: Iterable[int]) -> list[int]:
        return [t for t in ids if self.is_content(t)]

    def language_of(self, token: int) -> int:
        if not self.is_content(token):
            raise DomainError(f"token {token} is not a content token")
        return token // self.V


@dataclass(frozen=True)
class LmTokenizer:
    """Base-symbol vocabulary with a fixed bigram merge table.

    Merges are applied in one greedy left-to-right pass (all merges have
    length 2, so longest-first is vacuous); decode expands merged tokens,
    giving an exact round-trip.
    """

    V: int
    merges: tuple[tuple[int, int], ...]
    _merge_map: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.merges)) != len(self.merges):
            raise ConfigError("merge table contains duplicate pairs")
        object.__setattr__(
            self,
            "_merge_map",
            {pair: self.V + i for i, pair in enumerate(self.merges)},
        )

    @property
    def n_merges(self) -> int:
        return len(self.merges)

    @property
    def pad_id(self) -> int:
        return self.V + self.n_merges

    @property
    def bos_id(self) -> int:
        return self.pad_id + 1

    @property
    def eos_id(self) -> int:
        return self.pad_id + 2

    @property
    def sep_id(self) -> int:
        return self.pad_id + 3

    @property
    def inst_echo_id(self) -> int:
        return self.pad_id + 4

    @property
    def inst_sort_id(self) -> int:
        return self.pad_id + 5

    @property
    def vocab_size(self) -> int:
        return self.V + self.n_merges + 6

    def tokenize(self, symbols: Sequence[int]) -> list[int]:
        for s in symbols:
            if not (0 <= s < self.V):
                raise DomainError(f"symbol {s} outside [0, {self.V})")
        out = []
        i = 0
        n = len(symbols)
        while i < n:
            if i + 1 < n:
                merged = self._merge_map.get((symbols[i], symbols[i + 1]))
                if merged is not None:
                    out.append(merged)
                    i += 2
                    continue
            out.append(symbols[i])
            i += 1
        return out

    def detokenize(self, ids: Sequence[int]) -> list[int]:
        out = []
        for t in ids:
            if 0 <= t < self.V:
                out.append(t)
            elif self.V <= t < self.V + self.n_merges:
                out.extend(self.merges[t - self.V])
            else:
                raise DomainError(f"id {t} is not a content or merged token")
        return out


def make_merge_table(rng: RngState, V: int, n_merges: int) -> tuple[tuple[int, int], ...]:
    """n distinct Base bigrams, fixed by the rng seed."""
    if n_merges > V * V:
        raise ConfigError(f"cannot draw {n_merges} distinct bigrams from {V * V}")
    order = rng.split("merges").permutation(V * V)
    return tuple((int(p) // V, int(p) % V) for p in order[:n_merges])


# ---------------------------------------------------------------------------
# corpora


@dataclass(frozen=True)
class TrilingualExample:
    """(x, z, y): source-language tokens, Base pivot symbols, target tokens."""

    x: tuple[int, ...]
    z: tuple[int, ...]
    y: tuple[int, ...]
    src_lang: int
    tgt_lang: int
    task: str


@dataclass(frozen=True)
class LmExample:
    """Base-only instruction record for LM pretraining: input -> answer."""

    inp: tuple[int, ...]
    answer: tuple[int, ...]
    task: str


def _sample_content(rng: RngState, V: int, length_range: tuple[int, int]) -> list[int]:
    lo, hi = length_range
    if lo < 1 or hi < lo:
        raise ConfigError(f"bad length range [{lo}, {hi}]")
    length = int(rng.randint(lo, hi + 1)[0])
    return [int(s) for s in rng.randint(0, V, length)]


def _sample_pair(rng: RngState, pool: Sequence[int]) -> tuple[int, int]:
    a = int(rng.randint(0, len(pool))[0])
    b = int(rng.randint(0, len(pool) - 1)[0])
    if b >= a:
        b += 1
    return pool[a], pool[b]


def _make_example(
    content: list[int],
    spec_a: LanguageSpec,
    spec_b: LanguageSpec,
    task: str,
) -> TrilingualExample:
    if task == TRANSLATE:
        answer = content
    elif task == INSTRUCT:
        answer = sorted(content)
    else:
        raise ConfigError(f"unknown task {task!r}")
    return TrilingualExample(
        x=tuple(render(content, spec_a)),
        z=tuple(answer),
        y=tuple(render(answer, spec_b)),
        src_lang=spec_a.lang_id,
        tgt_lang=spec_b.lang_id,
        task=task,
    )


def gen_translate_corpus(
    rng: RngState,
    languages: Sequence[LanguageSpec],
    count: int,
    length_range: tuple[int, int],
) -> list[TrilingualExample]:
    """Uniform content, (L_a, L_b) over ordered pairs including Base."""
    return _gen_corpus(rng, languages, count, length_range, TRANSLATE)


def gen_instruct_corpus(
    rng: RngState,
    languages: Sequence[LanguageSpec],
    count: int,
    length_range: tuple[int, int],
) -> list[TrilingualExample]:
    """Sort-ascending task: z is the sorted pivot, y its L_b rendering."""
    return _gen_corpus(rng, languages, count, length_range, INSTRUCT)


def _gen_corpus(rng, languages, count, length_range, task):
    if len(languages) < 2:
        raise ConfigError("need at least two languages")
    by_id = {l.lang_id: l for l in languages}
    pool = sorted(by_id)
    v = languages[0].V
    out = []
    for _ in range(count):
        content = _sample_content(rng, v, length_range)
        a, b = _sample_pair(rng, pool)
        out.append(_make_example(content, by_id[a], by_id[b], task))
    return out


def gen_pair_corpus(
    rng: RngState,
    spec_a: LanguageSpec,
    spec_b: LanguageSpec,
    count: int,
    length_range: tuple[int, int],
    task: str = TRANSLATE,
) -> list[TrilingualExample]:
    """Corpus for one fixed (L_a, L_b) direction; used by evaluation suites."""
    v = spec_a.V
    return [
        _make_example(_sample_content(rng, v, length_range), spec_a, spec_b, task)
        for _ in range(count)
    ]


def gen_lm_corpus(
    rng: RngState,
    V: int,
    count: int,
    length_range: tuple[int, int],
    echo_fraction: float = 0.5,
) -> list[LmExample]:
    """Base-language instruction data: echo and sort-ascending, interleaved.

    Task counts are exact (round(count * echo_fraction) echo examples) and the
    two tasks are shuffled together, so any contiguous slice is task-mixed.
    """
    n_echo = int(round(count * echo_fraction))
    tasks = [TRANSLATE] * n_echo + [INSTRUCT] * (count - n_echo)
    order = rng.split("task_order").permutation(count)
    out = []
    for i in range(count):
        content = _sample_content(rng, V, length_range)
        if tasks[int(order[i])] == TRANSLATE:
            out.append(LmExample(tuple(content), tuple(content), TRANSLATE))
        else:
            out.append(LmExample(tuple(content), tuple(sorted(content)), INSTRUCT))
    return out


# ---------------------------------------------------------------------------
# serialization


def language_config_to_json(
    languages: Sequence[LanguageSpec],
    merges: Sequence[tuple[int, int]],
    tuned_ids: Sequence[int],
    untuned_ids: Sequence[int],
) -> str:
    v = languages[0].V
    enc = EncTokenizer(V=v, n_languages=len(languages))
    lm = LmTokenizer(V=v, merges=tuple(merges))
    doc = {
        "version": 1,
        "V": v,
        "languages": [
            {
                "id": l.lang_id,
                "name": l.name,
                "permutation": list(l.permutation),
                "transform": l.transform,
            }
            for l in sorted(languages, key=lambda l: l.lang_id)
        ],
        "merges": [list(p) for p in merges],
        "tuned_ids": list(tuned_ids),
        "untuned_ids": list(untuned_ids),
        "specials": {
            "enc": {"pad": enc.pad_id, "bos": enc.bos_id, "eos": enc.eos_id,
                    "lang_tokens": [enc.lang_token(l.lang_id) for l in languages]},
            "lm": {"pad": lm.pad_id, "bos": lm.bos_id, "eos": lm.eos_id,
                   "sep": lm.sep_id, "inst_echo": lm.inst_echo_id,
                   "inst_sort": lm.inst_sort_id},
        },
    }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def language_config_from_json(text: str):
    doc = json.loads(text)
    if doc.get("version") != 1:
        raise ConfigError(f"unsupported language config version {doc.get('version')}")
    languages = [
        LanguageSpec(d["id"], tuple(d["permutation"]), d["transform"], d["name"])
        for d in doc["languages"]
    ]
    merges = tuple((int(a), int(b)) for a, b in doc["merges"])
    return languages, merges, list(doc["tuned_ids"]), list(doc["untuned_ids"])


def corpus_to_jsonl(examples: Sequence[TrilingualExample]) -> str:
    lines = []
    for e in examples:
        lines.append(
            json.dumps(
                {
                    "x": list(e.x),
                    "z": list(e.z),
                    "y": list(e.y),
                    "src_lang": e.src_lang,
                    "tgt_lang": e.tgt_lang,
                    "task": e.task,
                },
                sort_keys=True,
            )
        )
    return "\n".join(lines) + ("\n" if lines else "")


def corpus_from_jsonl(text: str) -> list[TrilingualExample]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        out.append(
            TrilingualExample(
                x=tuple(d["x"]),
                z=tuple(d["z"]),
                y=tuple(d["y"]),
                src_lang=d["src_lang"],
                tgt_lang=d["tgt_lang"],
                task=d["task"],
            )
        )
    return out
