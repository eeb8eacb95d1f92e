"""Tokenization, vocabulary, synthetic corpus generation, dataset I/O.

Word-level tokenizer: lowercase, whitespace split, out-of-vocab words map
to UNK, a CLS token is prepended at position 0. The synthetic corpus is a
template-generated two-class sentiment task, a pure function of its seed.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

PAD, UNK, MASK, CLS = "[PAD]", "[UNK]", "[MASK]", "[CLS]"
SPECIAL_TOKENS = [PAD, UNK, MASK, CLS]
PAD_ID, UNK_ID, MASK_ID, CLS_ID = 0, 1, 2, 3

DEFAULT_MAX_LEN = 64


@dataclass(frozen=True)
class Vocab:
    """Ordered token inventory; ids 0-3 are PAD/UNK/MASK/CLS."""

    tokens: tuple
    id_of: dict = field(hash=False, compare=False, default=None)

    def __post_init__(self):
        if self.id_of is None:
            object.__setattr__(self, "id_of", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    def lookup(self, word: str) -> int:
        return self.id_of.get(word, UNK_ID)

    def save(self, path) -> None:
        payload = {"version": 1, "tokens": list(self.tokens)}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, ensure_ascii=False)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
        if payload.get("version") != 1:
            raise DataError(f"unsupported vocab version: {payload.get('version')}")
        tokens = payload["tokens"]
        if tokens[:4] != SPECIAL_TOKENS:
            raise DataError("vocab file missing special tokens in ids 0-3")
        return cls(tokens=tuple(tokens))


@dataclass(frozen=True)
class TokenSeq:
    """A tokenized text; position 0 is always CLS. `words` keeps the
    original surface strings so UNK positions can be rendered back."""

    ids: tuple
    words: tuple

    def __post_init__(self):
        if len(self.ids) != len(self.words):
            raise DataError("ids/words length mismatch")
        if not self.ids or self.ids[0] != CLS_ID:
            raise DataError("TokenSeq must start with CLS")

    def __len__(self):
        return len(self.ids)

    def replace(self, pos: int, token_id: int, word: str) -> "TokenSeq":
        ids = list(self.ids)
        words = list(self.words)
        ids[pos] = token_id
        words[pos] = word
        return TokenSeq(ids=tuple(ids), words=tuple(words))


@dataclass(frozen=True)
class LabeledExample:
    text: str
    label: int
    attackable: tuple | None = None


def build_vocab(corpus, min_freq: int = 1) -> Vocab:
    """Build a vocabulary of words occurring at least min_freq times,
    ordered by descending frequency then lexicographically."""
    if not corpus:
        raise DataError("empty corpus")
    if min_freq < 1:
        raise DataError("min_freq must be >= 1")
    counts = Counter()
    for text in corpus:
        for w in text.lower().split():
            if w not in SPECIAL_TOKENS:
                counts[w] += 1
    words = sorted((w for w, c in counts.items() if c >= min_freq),
                   key=lambda w: (-counts[w], w))
    return Vocab(tokens=tuple(SPECIAL_TOKENS + words))


def tokenize(vocab: Vocab, text: str, max_len: int = DEFAULT_MAX_LEN) -> TokenSeq:
    """Lowercase, split on whitespace, map OOV to UNK, prepend CLS,
    truncate to max_len total positions."""
    if max_len < 1:
        raise DataError("max_len must be >= 1")
    surface = text.lower().split()[: max_len - 1]
    ids = [CLS_ID] + [vocab.lookup(w) for w in surface]
    words = [CLS] + surface
    return TokenSeq(ids=tuple(ids), words=tuple(words))


def detokenize(vocab: Vocab, seq: TokenSeq) -> str:
    """Join surface words for positions > 0. UNK positions render as the
    original surface word preserved in `words`."""
    out = []
    for tid, word in zip(seq.ids[1:], seq.words[1:]):
        out.append(word if tid == UNK_ID else vocab.tokens[tid])
    return " ".join(out)


def load_dataset(path) -> list:
    """Read a JSONL dataset; each line needs "text" and "label", with an
    optional "attackable" boolean mask (position 0 = CLS, must be false)."""
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"line {lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(obj, dict) or "text" not in obj or "label" not in obj:
                raise DataError(f"line {lineno}: missing required field 'text' or 'label'")
            if not isinstance(obj["text"], str):
                raise DataError(f"line {lineno}: 'text' must be a string")
            label = obj["label"]
            if not isinstance(label, int) or isinstance(label, bool) or label < 0:
                raise DataError(f"line {lineno}: 'label' must be a non-negative integer")
            attackable = obj.get("attackable")
            if attackable is not None:
                if (not isinstance(attackable, list)
                        or not all(isinstance(b, bool) for b in attackable)):
                    raise DataError(f"line {lineno}: 'attackable' must be a list of booleans")
                if attackable and attackable[0]:
                    raise DataError(f"line {lineno}: position 0 (CLS) cannot be attackable")
                attackable = tuple(attackable)
            examples.append(LabeledExample(text=obj["text"], label=label, attackable=attackable))
    return examples


def save_dataset(examples, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            obj = {"text": ex.text, "label": ex.label}
            if ex.attackable is not None:
                obj["attackable"] = list(ex.attackable)
            f.write(json.dumps(obj, ensure_ascii=False) + "\n")


# --- synthetic sentiment corpus -------------------------------------------

POSITIVE_WORDS = [
    "great", "excellent", "wonderful", "amazing", "fantastic", "superb",
    "delightful", "brilliant", "outstanding", "perfect", "charming",
    "pleasant", "enjoyable", "impressive", "marvelous", "terrific",
    "splendid", "refreshing", "satisfying", "lovely", "engaging",
    "captivating", "memorable", "inspiring", "remarkable", "graceful",
    "polished", "flawless", "stunning", "magnificent", "uplifting",
    "heartwarming", "masterful", "vibrant", "exquisite", "thrilling",
    "elegant", "glorious", "dazzling", "admirable", "stellar", "superior",
]

NEGATIVE_WORDS = [
    "terrible", "awful", "horrible", "dreadful", "disappointing", "boring",
    "bland", "mediocre", "lousy", "atrocious", "unbearable", "tedious",
    "painful", "forgettable", "sloppy", "clumsy", "dull", "miserable",
    "appalling", "pathetic", "annoying", "irritating", "frustrating",
    "pointless", "lifeless", "stale", "shallow", "messy", "incoherent",
    "amateurish", "cringeworthy", "insufferable", "abysmal", "wretched",
    "dismal", "grating", "tiresome", "vapid", "hollow", "laughable",
    "dire", "inept",
]

NEUTRAL_NOUNS = [
    "movie", "film", "book", "restaurant", "hotel", "album", "show",
    "plot", "story", "service", "staff", "food", "acting", "soundtrack",
    "menu", "cast", "director", "room", "location", "ending", "dialogue",
    "script", "scenery", "coffee", "dessert", "novel", "concert", "venue",
]

NEUTRAL_ADJS = [
    "long", "short", "recent", "local", "new", "old", "small", "big",
    "quiet", "busy", "modern", "typical", "usual", "ordinary", "second",
    "latest", "nearby", "famous", "popular", "indie",
]

TIME_WORDS = ["week", "month", "night", "weekend", "summer", "evening",
              "friday", "year", "morning", "holiday", "afternoon", "season"]

# Each template has exactly one decisive slot {d}; the rest are neutral.
TEMPLATES = [
    "the {n} was {d}",
    "i thought the {n} was {d}",
    "overall the {n} seemed {d} to me",
    "my friend said the {n} was {d}",
    "honestly that {n} felt {d}",
    "the {a} {n} we tried last {t} was {d}",
    "this {n} is {d} and the {n2} matched it",
    "we found the {n} rather {d} on our visit",
    "critics called the {n} {d} this {t}",
    "everyone agreed the {n} was simply {d}",
    "a {a} {n} that turned out {d}",
    "the {n} and the {n2} were both {d}",
    "after the {t} i felt the {n} was {d}",
    "what a {d} {n} that was",
    "their {a} {n} is {d} in every way",
    "the {n} from that {a} place was {d}",
    "frankly the {n} came across as {d}",
    "reviewers describe the {n} as {d}",
    "the {n2} aside the {n} was {d}",
    "such a {d} {n} for a {a} {t}",
    "it was a {d} {n} from start to finish",
    "the {n} felt {d} during the whole {t}",
]


def _fill_template(rng: np.random.Generator, template: str, decisive: str) -> str:
    nouns = rng.choice(len(NEUTRAL_NOUNS), size=2, replace=False)
    words = {
        "d": decisive,
        "n": NEUTRAL_NOUNS[nouns[0]],
        "n2": NEUTRAL_NOUNS[nouns[1]],
        "a": NEUTRAL_ADJS[rng.integers(len(NEUTRAL_ADJS))],
        "t": TIME_WORDS[rng.integers(len(TIME_WORDS))],
    }
    return template.format(**words)


def make_corpus(seed: int, size: int, task: str = "sentiment"):
    """Generate a deterministic 2-class sentiment corpus.

    Labels alternate (0 negative, 1 positive) so every contiguous split is
    balanced within one example. Returns (train, test) with an 80/20 split.
    """
    if task != "sentiment":
        raise DataError(f"unknown task: {task}")
    if size < 10:
        raise DataError("size must be >= 10")
    rng = np.random.Generator(np.random.Philox(key=seed))
    examples = []
    for i in range(size):
        label = i % 2
        lexicon = POSITIVE_WORDS if label == 1 else NEGATIVE_WORDS
        decisive = lexicon[rng.integers(len(lexicon))]
        template = TEMPLATES[rng.integers(len(TEMPLATES))]
        examples.append(LabeledExample(text=_fill_template(rng, template, decisive),
                                       label=label))
    n_train = (size * 4) // 5
    return examples[:n_train], examples[n_train:]
