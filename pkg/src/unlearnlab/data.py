"""Dataset ingestion, tokenization, packing, batching and corpus synthesis.

Datasets are JSON-lines files with one object per line carrying the four
fields ``id``, ``input``, ``output``, ``task``. The tokenizer is a plain
whitespace tokenizer over a corpus-derived vocabulary with two reserved
ids: 0 (padding) and 1 (end of sequence).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .validation import check_count, check_nonempty

PAD_ID = 0
EOS_ID = 1

RETAIN_FILE = "retain.jsonl"
FORGET_FILE = "forget.jsonl"
UTILITY_FILE = "utility.jsonl"
MIA_MEMBER_FILE = "mia_member.jsonl"
MIA_NONMEMBER_FILE = "mia_nonmember.jsonl"


def seeded_rng(*entropy) -> np.random.Generator:
    """Deterministic generator keyed by a tuple of (possibly signed) ints."""
    return np.random.default_rng([int(e) & 0xFFFFFFFFFFFFFFFF for e in entropy])


@dataclass(frozen=True)
class UnlearningExample:
    id: str
    input: str
    output: str
    task: str


@dataclass
class SplitDataset:
    retain: list[UnlearningExample]
    forget: list[UnlearningExample]

    def __post_init__(self):
        overlap = {e.id for e in self.retain} & {e.id for e in self.forget}
        if overlap:
            raise ValueError(
                f"retain/forget splits share ids: {sorted(overlap)[:5]}"
            )

    @property
    def all_examples(self) -> list[UnlearningExample]:
        return self.retain + self.forget


@dataclass(frozen=True)
class PackedExample:
    token_ids: tuple[int, ...]
    loss_mask: tuple[bool, ...]
    attention_length: int


# ---------------------------------------------------------------------------
# JSON-lines I/O
# ---------------------------------------------------------------------------

_FIELDS = ("id", "input", "output", "task")


def load_jsonl_examples(path) -> list[UnlearningExample]:
    path = Path(path)
    examples: list[UnlearningExample] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise ValueError(f"{path}: line {lineno}: invalid JSON ({err})")
            for key in _FIELDS:
                if key not in obj:
                    raise ValueError(f"{path}: line {lineno}: missing field {key!r}")
                if not isinstance(obj[key], str):
                    raise ValueError(
                        f"{path}: line {lineno}: field {key!r} must be a string"
                    )
            if not obj["input"].strip() or not obj["output"].strip():
                raise ValueError(
                    f"{path}: line {lineno}: input and output must be non-empty"
                )
            if obj["id"] in seen:
                raise ValueError(
                    f"{path}: line {lineno}: duplicate id {obj['id']!r} within split"
                )
            seen.add(obj["id"])
            examples.append(
                UnlearningExample(
                    id=obj["id"], input=obj["input"], output=obj["output"],
                    task=obj["task"],
                )
            )
    return examples


def save_jsonl_examples(examples: list[UnlearningExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            fh.write(
                json.dumps(
                    {"id": e.id, "input": e.input, "output": e.output, "task": e.task},
                    sort_keys=True,
                )
                + "\n"
            )


def load_dataset(retain_path, forget_path) -> SplitDataset:
    """Load the two splits and enforce id-disjointness between them."""
    retain = load_jsonl_examples(retain_path)
    forget = load_jsonl_examples(forget_path)
    return SplitDataset(retain=retain, forget=forget)


def save_dataset(dataset: SplitDataset, retain_path, forget_path) -> None:
    save_jsonl_examples(dataset.retain, retain_path)
    save_jsonl_examples(dataset.forget, forget_path)


# ---------------------------------------------------------------------------
# vocabulary and packing
# ---------------------------------------------------------------------------


class Vocabulary:
    """Whitespace-token to id mapping; ids 0/1 reserved for pad/eos."""

    def __init__(self, token_to_id: dict[str, int]):
        ids = list(token_to_id.values())
        if len(set(ids)) != len(ids):
            raise ValueError("vocabulary ids must be unique")
        if any(i < 2 for i in ids):
            raise ValueError("token ids 0 and 1 are reserved for pad/eos")
        self._token_to_id = dict(token_to_id)
        self._id_to_token = {i: t for t, i in token_to_id.items()}

    @classmethod
    def from_tokens(cls, tokens) -> "Vocabulary":
        ordered = sorted(set(tokens))
        return cls({tok: i for i, tok in enumerate(ordered, start=2)})

    def __len__(self) -> int:
        return len(self._token_to_id)

    @property
    def size(self) -> int:
        """Model vocab size including the two reserved ids."""
        return len(self._token_to_id) + 2

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def covers(self, text: str) -> bool:
        return all(tok in self._token_to_id for tok in text.split())

    def encode(self, text: str) -> list[int]:
        ids = []
        for tok in text.split():
            if tok not in self._token_to_id:
                raise ValueError(f"token {tok!r} not in vocabulary")
            ids.append(self._token_to_id[tok])
        return ids

    def decode(self, ids) -> str:
        toks = []
        for i in ids:
            i = int(i)
            if i in (PAD_ID, EOS_ID):
                continue
            if i not in self._id_to_token:
                raise ValueError(f"id {i} not in vocabulary")
            toks.append(self._id_to_token[i])
        return " ".join(toks)

    def to_dict(self) -> dict[str, int]:
        return dict(self._token_to_id)

    @classmethod
    def from_dict(cls, d: dict[str, int]) -> "Vocabulary":
        return cls({t: int(i) for t, i in d.items()})


def build_vocabulary(dataset: SplitDataset) -> Vocabulary:
    """Sorted whitespace tokens of all input/output strings, numbered from 2."""
    examples = check_nonempty(dataset.all_examples, "dataset")
    tokens: set[str] = set()
    for e in examples:
        tokens.update(e.input.split())
        tokens.update(e.output.split())
    return Vocabulary.from_tokens(tokens)


def pack(example: UnlearningExample, vocab: Vocabulary, max_length: int) -> PackedExample:
    """input tokens ++ output tokens ++ eos, right-truncated then padded.

    The loss mask is true exactly on the output-token and eos positions
    that survive truncation; rejected if the input alone fills the window
    (no output token would carry loss).
    """
    check_count(max_length, "max_length")
    input_ids = vocab.encode(example.input)
    output_ids = vocab.encode(example.output)
    if not output_ids:
        raise ValueError(f"example {example.id!r}: empty output")
    if len(input_ids) >= max_length:
        raise ValueError(
            f"example {example.id!r}: input occupies {len(input_ids)} of "
            f"{max_length} positions; no output token would carry loss"
        )
    seq = input_ids + output_ids + [EOS_ID]
    mask = [False] * len(input_ids) + [True] * (len(output_ids) + 1)
    seq, mask = seq[:max_length], mask[:max_length]
    n = len(seq)
    pad = max_length - n
    return PackedExample(
        token_ids=tuple(seq + [PAD_ID] * pad),
        loss_mask=tuple(mask + [False] * pad),
        attention_length=n,
    )


def batches(examples, batch_size: int, seed: int, epoch: int) -> list[list]:
    """Deterministic (seed, epoch)-keyed shuffle, partial final batch kept."""
    check_count(batch_size, "batch_size")
    order = seeded_rng(seed, epoch).permutation(len(examples))
    shuffled = [examples[i] for i in order]
    return [shuffled[i : i + batch_size] for i in range(0, len(shuffled), batch_size)]


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

_ADJS = [
    "amber", "brisk", "calm", "dusty", "eager", "faded",
    "gentle", "hollow", "iron", "jolly", "keen", "lunar",
]
_NOUNS = [
    "archive", "beacon", "canyon", "dagger", "engine", "forest",
    "garden", "harbor", "island", "jungle", "kettle", "ladder",
    "meadow", "needle", "orchard", "palace", "quarry", "river",
    "signal", "temple", "urchin", "valley", "willow", "zephyr",
]
_VERBS = [
    "guards", "follows", "ignores", "repairs", "paints", "studies",
    "carries", "watches", "praises", "avoids", "signals", "shelters",
]
_NAMES = [
    "alice", "bruno", "clara", "dmitri", "elena", "felix",
    "greta", "hassan", "irene", "jonas", "kira", "leo",
    "maria", "nadia", "oscar", "priya", "quentin", "rosa",
    "stefan", "tara", "ulrich", "vera", "wendell", "xenia",
]

_SYLLABLES = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]
_CODEWORDS = [_SYLLABLES[i] + _SYLLABLES[(i * 7 + 3) % len(_SYLLABLES)] for i in range(48)]
_COPY_TRAIN_WORDS = _CODEWORDS[:16]
_COPY_HELDOUT_WORDS = _CODEWORDS[16:]

_COPY_TEMPLATES = [
    ("the secret word is {w} . what is the secret word ?", "secret"),
    ("the magic word is {w} . what is the magic word ?", "magic"),
    ("the code word is {w} . what is the code word ?", "code"),
]

# docs cycle this pool; held-out copy words come first so small corpora
# still cover the utility vocabulary
_DOC_POOL = _COPY_HELDOUT_WORDS + _COPY_TRAIN_WORDS + _NOUNS + _ADJS + _VERBS


@dataclass(frozen=True)
class CorpusSpec:
    forget_count: int = 32
    retain_count: int = 32
    utility_count: int = 64
    mia_member_count: int = 32
    mia_nonmember_count: int = 32

    def __post_init__(self):
        for name in (
            "forget_count", "retain_count", "utility_count",
            "mia_member_count", "mia_nonmember_count",
        ):
            check_count(getattr(self, name), name)


@dataclass
class SyntheticCorpus:
    dataset: SplitDataset
    utility: list[UnlearningExample]
    mia_member: list[UnlearningExample]
    mia_nonmember: list[UnlearningExample]


class _Maker:
    """Stateful example factory; keeps sentence/pairing uniqueness global."""

    def __init__(self, seed: int):
        self.rng = seeded_rng(seed, 7)
        self.seen_sentences: set[str] = set()
        self.qa_index = 0
        self.doc_index = 0
        self.doc_cursor = 0
        self.qa_pairs: list[tuple[str, str]] = []

    def _pick(self, pool):
        return pool[int(self.rng.integers(len(pool)))]

    def completion(self, ident: str) -> UnlearningExample:
        for _ in range(1000):
            words = [
                "the", self._pick(_ADJS), self._pick(_NOUNS), self._pick(_VERBS),
                "the", self._pick(_ADJS), self._pick(_NOUNS),
                "near", "the", self._pick(_NOUNS),
            ]
            sentence = " ".join(words)
            if sentence not in self.seen_sentences:
                self.seen_sentences.add(sentence)
                return UnlearningExample(
                    id=ident,
                    input=" ".join(words[:4]),
                    output=" ".join(words[4:]),
                    task="completion",
                )
        raise ValueError("completion space exhausted; reduce corpus counts")

    def qa(self, ident: str) -> UnlearningExample:
        k = self.qa_index
        self.qa_index += 1
        name = _NAMES[k % len(_NAMES)] if k < len(_NAMES) else f"{_NAMES[k % len(_NAMES)]}{k // len(_NAMES)}"
        code = f"code{k:03d}"
        self.qa_pairs.append((name, code))
        return UnlearningExample(
            id=ident,
            input=f"what is the secret code of {name} ?",
            output=code,
            task="qa",
        )

    def doc(self, ident: str) -> UnlearningExample:
        k = self.doc_index
        self.doc_index += 1
        label = f"{_NAMES[k % len(_NAMES)]} {_ADJS[(k // len(_NAMES)) % len(_ADJS)]}"
        words = [_DOC_POOL[(self.doc_cursor + j) % len(_DOC_POOL)] for j in range(6)]
        self.doc_cursor += 6
        return UnlearningExample(
            id=ident,
            input=f"document {label} :",
            output=" ".join(words),
            task="doc",
        )

    def copy(self, ident: str, word: str, template_idx: int) -> UnlearningExample:
        template, _ = _COPY_TEMPLATES[template_idx % len(_COPY_TEMPLATES)]
        return UnlearningExample(
            id=ident, input=template.format(w=word), output=word, task="copy"
        )


def generate_synthetic_corpus(spec: CorpusSpec, seed: int) -> SyntheticCorpus:
    """Deterministic desk-scale corpus with three memorization families
    (completion, qa, doc) plus a retain-side copy-rule family whose held-out
    instances form the utility set.

    MIA members re-emit forget examples; nonmembers come from the same
    generator but are never trained on (fresh sentences, shuffled qa
    pairings, fresh doc labels).
    """
    maker = _Maker(seed)

    # retain: four families
    rc = spec.retain_count
    n_copy, n_qa, n_doc = rc // 4, rc // 4, rc // 4
    n_comp = rc - n_copy - n_qa - n_doc
    if min(n_copy, n_qa, n_doc, n_comp) < 1:
        raise ValueError(f"retain_count {rc} too small: need at least 4")
    retain: list[UnlearningExample] = []
    for i in range(n_comp):
        retain.append(maker.completion(f"retain-comp-{i:04d}"))
    for i in range(n_qa):
        retain.append(maker.qa(f"retain-qa-{i:04d}"))
    for i in range(n_doc):
        retain.append(maker.doc(f"retain-doc-{i:04d}"))
    for i in range(n_copy):
        word = _COPY_TRAIN_WORDS[i % len(_COPY_TRAIN_WORDS)]
        retain.append(maker.copy(f"retain-copy-{i:04d}", word, i))

    # forget: three families
    fc = spec.forget_count
    f_qa, f_doc = fc // 3, fc // 3
    f_comp = fc - f_qa - f_doc
    if min(f_qa, f_doc, f_comp) < 1:
        raise ValueError(f"forget_count {fc} too small: need at least 3")
    forget: list[UnlearningExample] = []
    for i in range(f_comp):
        forget.append(maker.completion(f"forget-comp-{i:04d}"))
    for i in range(f_qa):
        forget.append(maker.qa(f"forget-qa-{i:04d}"))
    for i in range(f_doc):
        forget.append(maker.doc(f"forget-doc-{i:04d}"))

    dataset = SplitDataset(retain=retain, forget=forget)
    vocab = build_vocabulary(dataset)

    # utility: held-out copy-rule prompts over words the docs covered
    utility: list[UnlearningExample] = []
    combos = [
        (t, w)
        for w in _COPY_HELDOUT_WORDS
        for t in range(len(_COPY_TEMPLATES))
    ]
    if spec.utility_count > len(combos):
        raise ValueError(
            f"utility_count {spec.utility_count} exceeds the "
            f"{len(combos)} distinct held-out prompts available"
        )
    for i in range(spec.utility_count):
        template_idx, word = combos[i]
        utility.append(maker.copy(f"utility-{i:04d}", word, template_idx))

    # MIA member: trained (forget) content under fresh ids
    mia_member = [
        UnlearningExample(
            id=f"mia-member-{i:04d}",
            input=forget[i % len(forget)].input,
            output=forget[i % len(forget)].output,
            task=forget[i % len(forget)].task,
        )
        for i in range(spec.mia_member_count)
    ]

    # MIA nonmember: same families, never-trained content
    mia_nonmember: list[UnlearningExample] = []
    i = 0
    while len(mia_nonmember) < spec.mia_nonmember_count:
        kind = i % 3
        ident = f"mia-nonmember-{i:04d}"
        if kind == 0:
            mia_nonmember.append(maker.completion(ident))
        elif kind == 1 and len(maker.qa_pairs) >= 2:
            # shuffled pairing: trained name, wrong trained code
            names = [n for n, _ in maker.qa_pairs]
            codes = [c for _, c in maker.qa_pairs]
            j = i % len(names)
            mia_nonmember.append(
                UnlearningExample(
                    id=ident,
                    input=f"what is the secret code of {names[j]} ?",
                    output=codes[(j + 1) % len(codes)],
                    task="qa",
                )
            )
        else:
            mia_nonmember.append(maker.doc(ident))
        i += 1

    corpus = SyntheticCorpus(
        dataset=dataset, utility=utility,
        mia_member=mia_member, mia_nonmember=mia_nonmember,
    )
    _check_coverage(corpus, vocab)
    return corpus


def _check_coverage(corpus: SyntheticCorpus, vocab: Vocabulary) -> None:
    for group, examples in (
        ("utility", corpus.utility),
        ("mia_member", corpus.mia_member),
        ("mia_nonmember", corpus.mia_nonmember),
    ):
        for e in examples:
            if not (vocab.covers(e.input) and vocab.covers(e.output)):
                raise ValueError(
                    f"{group} example {e.id!r} uses tokens missing from the "
                    "retain/forget vocabulary; increase retain/forget counts"
                )


def write_corpus(corpus: SyntheticCorpus, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_jsonl_examples(corpus.dataset.retain, out / RETAIN_FILE)
    save_jsonl_examples(corpus.dataset.forget, out / FORGET_FILE)
    save_jsonl_examples(corpus.utility, out / UTILITY_FILE)
    save_jsonl_examples(corpus.mia_member, out / MIA_MEMBER_FILE)
    save_jsonl_examples(corpus.mia_nonmember, out / MIA_NONMEMBER_FILE)


def read_corpus(data_dir) -> SyntheticCorpus:
    d = Path(data_dir)
    for name in (RETAIN_FILE, FORGET_FILE, UTILITY_FILE, MIA_MEMBER_FILE, MIA_NONMEMBER_FILE):
        if not (d / name).exists():
            raise ValueError(f"dataset directory {d} is missing {name}")
    return SyntheticCorpus(
        dataset=load_dataset(d / RETAIN_FILE, d / FORGET_FILE),
        utility=load_jsonl_examples(d / UTILITY_FILE),
        mia_member=load_jsonl_examples(d / MIA_MEMBER_FILE),
        mia_nonmember=load_jsonl_examples(d / MIA_NONMEMBER_FILE),
    )
