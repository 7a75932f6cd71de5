"""Synthetic paired corpora, CoNLL ingestion, vocabulary, and batching.

The synthetic task is built so that images genuinely disambiguate: a
configurable fraction of surface forms is legal under two entity types, the
gold type of such a mention is sampled, and the paired image carries that
type's archetype patch. Context words are type-neutral and entity tokens
never occur as context, so text alone caps out at the ambiguity ceiling the
oracle below computes.

Surface forms are parse-unambiguous by construction: one-token and two-token
forms draw from disjoint token pools, so span boundaries are always
recoverable from text and only the *type* of an ambiguous form needs the
image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import bio_spans, validate_bio

PAD, CLS, SEP, UNK = "[PAD]", "[CLS]", "[SEP]", "[UNK]"
PAD_ID, CLS_ID, SEP_ID, UNK_ID = 0, 1, 2, 3

_DEFAULT_TYPES = ("PER", "LOC", "ORG", "MISC")

_SYLLABLES = ("ba", "ke", "lo", "mi", "nu", "pa", "re", "si", "to", "vu",
              "za", "del", "gor", "lin", "mar", "nok", "pel", "rud", "tam", "vex")


@dataclass
class Example:
    tokens: list[str]
    tags: list[str]
    patches: np.ndarray | None  # (n_patches, d_raw)
    has_image: bool

    def to_json(self) -> str:
        return json.dumps({
            "tokens": self.tokens,
            "tags": self.tags,
            "patches": None if self.patches is None else self.patches.tolist(),
            "has_image": self.has_image,
        })

    @staticmethod
    def from_json(line: str) -> "Example":
        d = json.loads(line)
        patches = None if d["patches"] is None else np.array(d["patches"], dtype=np.float64)
        return Example(list(d["tokens"]), list(d["tags"]), patches, bool(d["has_image"]))


@dataclass
class Schema:
    """Generative recipe for a synthetic corpus, persisted alongside it."""
    entity_types: tuple[str, ...]
    d_raw: int
    n_patches: int
    noise_sigma: float
    archetypes: np.ndarray                      # (n_types, d_raw) unit rows
    forms: list[tuple[tuple[str, ...], tuple[str, ...]]]  # (tokens, legal types)
    context_words: tuple[str, ...]
    max_archetype_cos: float                    # measured at creation
    max_tokens: int = 24

    def legal_types(self, form: tuple[str, ...]) -> tuple[str, ...]:
        for tokens, types in self.forms:
            if tokens == form:
                return types
        raise KeyError(f"unknown surface form: {form}")

    def labels(self) -> list[str]:
        out = ["O"]
        for t in self.entity_types:
            out.extend([f"B-{t}", f"I-{t}"])
        return out

    def to_dict(self) -> dict:
        return {
            "entity_types": list(self.entity_types),
            "d_raw": self.d_raw,
            "n_patches": self.n_patches,
            "noise_sigma": self.noise_sigma,
            "archetypes": self.archetypes.tolist(),
            "forms": [[list(tokens), list(types)] for tokens, types in self.forms],
            "context_words": list(self.context_words),
            "max_archetype_cos": self.max_archetype_cos,
            "max_tokens": self.max_tokens,
        }

    @staticmethod
    def from_dict(d: dict) -> "Schema":
        return Schema(
            entity_types=tuple(d["entity_types"]),
            d_raw=int(d["d_raw"]),
            n_patches=int(d["n_patches"]),
            noise_sigma=float(d["noise_sigma"]),
            archetypes=np.array(d["archetypes"], dtype=np.float64),
            forms=[(tuple(tokens), tuple(types)) for tokens, types in d["forms"]],
            context_words=tuple(d["context_words"]),
            max_archetype_cos=float(d["max_archetype_cos"]),
            max_tokens=int(d.get("max_tokens", 24)),
        )


def _gibberish(rng: np.random.Generator, n_syllables: int) -> str:
    return "".join(rng.choice(_SYLLABLES) for _ in range(n_syllables))


def _unique_words(rng: np.random.Generator, count: int, n_syllables: int,
                  taken: set[str]) -> list[str]:
    words: list[str] = []
    while len(words) < count:
        w = _gibberish(rng, n_syllables)
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def _fit_syllables(base: int, load: int) -> int:
    """Smallest word length (in syllables) whose namespace holds ``load``
    words with at most ~50% rejection, so big lexicons cannot stall the
    uniqueness loop."""
    n = base
    while len(_SYLLABLES) ** n < 2 * load:
        n += 1
    return n


def make_schema(rng: np.random.Generator, n_types: int = 4,
                lexicon_size: int = 120, ambiguous_fraction: float = 0.5,
                context_vocab: int = 150, d_raw: int = 16, n_patches: int = 8,
                noise_sigma: float = 0.1, two_token_fraction: float = 0.35,
                type_names: tuple[str, ...] | None = None) -> Schema:
    """Draw a schema: orthonormal type archetypes, a prefix-free lexicon with
    the requested ambiguity fraction, and a neutral context vocabulary."""
    if type_names is None:
        type_names = tuple(
            _DEFAULT_TYPES[i] if i < len(_DEFAULT_TYPES) else f"TYPE{i}"
            for i in range(n_types))
    if d_raw < n_types:
        raise ValueError(f"d_raw {d_raw} must be >= number of types {n_types}")

    # orthonormal rows: pairwise cosine is zero up to rounding
    basis, _ = np.linalg.qr(rng.normal(size=(d_raw, d_raw)))
    archetypes = basis[:n_types]
    gram = archetypes @ archetypes.T
    max_cos = float(np.abs(gram - np.eye(n_types)).max())

    taken: set[str] = set()
    context_words = tuple(_unique_words(
        rng, context_vocab, _fit_syllables(2, context_vocab), taken))
    n_two = int(round(lexicon_size * two_token_fraction))
    n_one = lexicon_size - n_two
    # disjoint pools keep every form prefix-free against every other form;
    # word lengths grow with the load on their namespace
    one_tok = _unique_words(rng, n_one, _fit_syllables(3, n_one), taken)
    first_tok = _unique_words(
        rng, n_two, _fit_syllables(2, context_vocab + n_two), taken)
    second_tok = _unique_words(
        rng, n_two, _fit_syllables(3, n_one + n_two), taken)
    form_tokens: list[tuple[str, ...]] = [(w,) for w in one_tok]
    form_tokens += [(a, b) for a, b in zip(first_tok, second_tok)]
    order = rng.permutation(len(form_tokens))
    form_tokens = [form_tokens[i] for i in order]

    n_ambiguous = int(round(lexicon_size * ambiguous_fraction))
    forms: list[tuple[tuple[str, ...], tuple[str, ...]]] = []
    for i, tokens in enumerate(form_tokens):
        primary = type_names[i % n_types]
        if i < n_ambiguous:
            others = [t for t in type_names if t != primary]
            second = others[int(rng.integers(len(others)))]
            forms.append((tokens, (primary, second)))
        else:
            forms.append((tokens, (primary,)))
    return Schema(entity_types=type_names, d_raw=d_raw, n_patches=n_patches,
                  noise_sigma=noise_sigma, archetypes=archetypes, forms=forms,
                  context_words=context_words, max_archetype_cos=max_cos)


def _render_image(schema: Schema, mention_types: list[str],
                  rng: np.random.Generator) -> np.ndarray:
    """One archetype patch per mention plus unit-vector distractors, all with
    additive noise, in a shuffled slot order."""
    type_index = {t: i for i, t in enumerate(schema.entity_types)}
    patches = []
    for t in mention_types:
        patches.append(schema.archetypes[type_index[t]])
    while len(patches) < schema.n_patches:
        v = rng.normal(size=schema.d_raw)
        patches.append(v / np.linalg.norm(v))
    patches = np.stack(patches[:schema.n_patches])
    patches = patches + schema.noise_sigma * rng.normal(size=patches.shape)
    return patches[rng.permutation(schema.n_patches)]


def generate_corpus(schema: Schema, sizes: dict[str, int],
                    missing_image_fraction: float,
                    rng: np.random.Generator) -> dict[str, list[Example]]:
    """Fully deterministic given the rng state. ``sizes`` maps split name to
    example count, e.g. {"train": 4000, "dev": 500, "test": 500}."""
    if schema.max_tokens < 6:
        raise ValueError("max_tokens must be at least 6 to fit one mention")
    unambiguous = [f for f in schema.forms if len(f[1]) == 1]
    splits: dict[str, list[Example]] = {}
    for split, count in sizes.items():
        examples = []
        for _ in range(count):
            examples.append(_render_sentence(schema, unambiguous,
                                             missing_image_fraction, rng))
        splits[split] = examples
    return splits


def _render_sentence(schema: Schema, unambiguous, missing_image_fraction: float,
                     rng: np.random.Generator) -> Example:
    has_image = bool(rng.random() >= missing_image_fraction)
    pool = schema.forms if has_image else unambiguous
    n_mentions = int(rng.integers(1, 4))

    tokens: list[str] = []
    tags: list[str] = []
    mention_types: list[str] = []
    cap = schema.max_tokens - 2  # room inside the sentence frame

    def add_context(lo: int, hi: int) -> None:
        # never exceed cap: batches frame sentences with two extra slots
        for _ in range(min(int(rng.integers(lo, hi + 1)), cap - len(tokens))):
            tokens.append(str(rng.choice(schema.context_words)))
            tags.append("O")

    add_context(0, 2)
    for m in range(n_mentions):
        if len(tokens) + 2 > cap:
            break
        form_tokens, legal = pool[int(rng.integers(len(pool)))]
        gold = legal[int(rng.integers(len(legal)))]
        mention_types.append(gold)
        tokens.extend(form_tokens)
        tags.append(f"B-{gold}")
        tags.extend(f"I-{gold}" for _ in form_tokens[1:])
        if m < n_mentions - 1:
            add_context(1, 3)
    add_context(0, 2)

    patches = _render_image(schema, mention_types, rng) if has_image else None
    return Example(tokens, tags, patches, has_image)


def text_only_ceiling(schema: Schema, examples: list[Example]) -> float:
    """Best achievable span micro-F1 for any predictor that sees only text.

    Boundaries are always recoverable (prefix-free lexicon), so the optimum
    predicts each mention's most likely type: expected accuracy 1/k for a
    form legal under k equiprobable types.
    """
    total = 0.0
    correct = 0.0
    for ex in examples:
        for etype, s, e in bio_spans(ex.tags):
            legal = schema.legal_types(tuple(ex.tokens[s:e + 1]))
            total += 1.0
            correct += 1.0 / len(legal)
    if total == 0:
        return 1.0
    return correct / total


# -- persistence --------------------------------------------------------------


def save_corpus(out_dir: str | Path, schema: Schema,
                splits: dict[str, list[Example]]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "schema.json").write_text(
        json.dumps(schema.to_dict(), sort_keys=True) + "\n")
    for split, examples in splits.items():
        with open(out / f"{split}.jsonl", "w") as fh:
            for ex in examples:
                fh.write(ex.to_json() + "\n")


def load_corpus(data_dir: str | Path) -> tuple[Schema, dict[str, list[Example]]]:
    root = Path(data_dir)
    schema_path = root / "schema.json"
    if not schema_path.exists():
        raise FileNotFoundError(f"no schema.json under {root}")
    schema = Schema.from_dict(json.loads(schema_path.read_text()))
    splits: dict[str, list[Example]] = {}
    for path in sorted(root.glob("*.jsonl")):
        with open(path) as fh:
            splits[path.stem] = [Example.from_json(line) for line in fh if line.strip()]
    return schema, splits


def load_conll(path: str | Path) -> list[Example]:
    """Tab-separated token/tag blocks split by blank lines; strict BIO."""
    examples: list[Example] = []
    tokens: list[str] = []
    tags: list[str] = []
    start_line = 1

    def flush(lineno: int) -> None:
        nonlocal tokens, tags
        if not tokens:
            return
        try:
            validate_bio(tags)
        except ValueError as err:
            raise ValueError(f"{path}:{start_line}: {err}") from None
        examples.append(Example(tokens, tags, None, False))
        tokens, tags = [], []

    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                flush(lineno)
                start_line = lineno + 1
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise ValueError(f"{path}:{lineno}: invalid line, expected 'token<TAB>tag'")
            if not tokens:
                start_line = lineno
            tokens.append(parts[0])
            tags.append(parts[1])
    flush(-1)
    return examples


# -- vocabulary and batching ---------------------------------------------------


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: list[str]) -> list[int]:
        return [self.index.get(w, UNK_ID) for w in words]

    @staticmethod
    def from_words(words) -> "Vocab":
        body = sorted(set(words))
        return Vocab([PAD, CLS, SEP, UNK] + body)

    @staticmethod
    def from_schema(schema: Schema) -> "Vocab":
        words = set(schema.context_words)
        for tokens, _ in schema.forms:
            words.update(tokens)
        return Vocab.from_words(words)


@dataclass
class Batch:
    token_ids: np.ndarray        # (B, L) framed and padded
    lengths: np.ndarray          # (B,) word counts, excluding [CLS]/[SEP]
    valid: np.ndarray            # (B, L) 1 at [CLS]/words/[SEP]
    eligible: np.ndarray         # (B, L) 1 at word positions only
    tag_ids: list[np.ndarray]    # per-sentence word-level label indices
    img_rows: np.ndarray         # batch rows that carry an image
    patches: np.ndarray | None   # (B_img, n_patches, d_raw)
    examples: list[Example]


def make_batch(examples: list[Example], vocab: Vocab,
               label_index: dict[str, int], max_len: int) -> Batch:
    by_len = [len(ex.tokens) for ex in examples]
    for ex, n in zip(examples, by_len):
        if n == 0:
            raise ValueError("empty sentence in batch")
        if n > max_len:
            raise ValueError(f"sentence of {n} tokens exceeds max_len {max_len}")
    width = max(by_len) + 2
    b = len(examples)
    ids = np.full((b, width), PAD_ID, dtype=np.int64)
    valid = np.zeros((b, width))
    eligible = np.zeros((b, width))
    tag_ids = []
    img_rows = []
    patch_list = []
    for i, ex in enumerate(examples):
        n = len(ex.tokens)
        ids[i, 0] = CLS_ID
        ids[i, 1:n + 1] = vocab.encode(ex.tokens)
        ids[i, n + 1] = SEP_ID
        valid[i, :n + 2] = 1.0
        eligible[i, 1:n + 1] = 1.0
        try:
            tag_ids.append(np.array([label_index[t] for t in ex.tags], dtype=np.int64))
        except KeyError as err:
            raise ValueError(f"tag {err} not in the label set") from None
        if ex.has_image:
            if ex.patches is None:
                raise ValueError("has_image example without patches")
            img_rows.append(i)
            patch_list.append(ex.patches)
    patches = np.stack(patch_list) if patch_list else None
    return Batch(ids, np.array(by_len, dtype=np.int64), valid, eligible,
                 tag_ids, np.array(img_rows, dtype=np.int64), patches, examples)


def batch_iter(examples: list[Example], vocab: Vocab,
               label_index: dict[str, int], batch_size: int, max_len: int,
               rng: np.random.Generator | None = None):
    """Yield batches, shuffled when an rng is given (deterministic per state)."""
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    order = np.arange(len(examples))
    if rng is not None:
        order = rng.permutation(len(examples))
    for lo in range(0, len(examples), batch_size):
        chunk = [examples[i] for i in order[lo:lo + batch_size]]
        yield make_batch(chunk, vocab, label_index, max_len)
