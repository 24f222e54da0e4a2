"""Corpus-level caption metrics: BLEU@1-4, ROUGE-L, CIDEr-D and METEOR-lite.

Every metric returns a value in [0, 1]; :class:`MetricReport` scales to
percentages for display.  Text is tokenised with :func:`lstmt.data.tokenize`
for both candidates and references.

METEOR-lite is a reduced METEOR: unigrams are aligned by exact match and
then by a crude suffix-stripping stem, without synonym or paraphrase tables.
Each stage keeps the maximum number of matches with the fewest crossing
links.  Its numbers are not comparable to canonical METEOR.
"""

from __future__ import annotations

import itertools
import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass

from .data import tokenize
from .errors import ContractError

__all__ = [
    "EvalPair", "MetricReport", "bleu", "rouge_l", "cider_d", "meteor_lite",
    "CiderD", "evaluate", "stem", "sentence_bleu", "sentence_rouge_l", "sentence_meteor_lite",
]


@dataclass(frozen=True)
class EvalPair:
    id: str
    candidate: str
    references: tuple[str, ...]

    def __post_init__(self):
        refs = (self.references,) if isinstance(self.references, str) else tuple(self.references)
        if not refs:
            raise ContractError(f"pair {self.id!r} has no references")
        object.__setattr__(self, "references", refs)


def _prepare(pairs):
    pairs = list(pairs)
    if not pairs:
        raise ContractError("metric over an empty corpus")
    return [(tokenize(p.candidate), [tokenize(r) for r in p.references]) for p in pairs]


def _ngrams(tokens, n) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ------------------------------------------------------------------ BLEU

def _bleu_stats(cand, refs, max_n):
    correct, total = [], []
    for n in range(1, max_n + 1):
        c = _ngrams(cand, n)
        max_ref = Counter()
        for r in refs:
            for g, k in _ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], k)
        correct.append(sum(min(k, max_ref[g]) for g, k in c.items()))
        total.append(max(len(cand) - n + 1, 0))
    # closest reference length, shorter one on ties
    ref_len = min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
    return correct, total, len(cand), ref_len


def _bleu_from_stats(correct, total, c, r, n):
    if c == 0:
        return 0.0
    log_p = 0.0
    for k in range(n):
        if correct[k] == 0 or total[k] == 0:
            return 0.0
        log_p += math.log(correct[k] / total[k])
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / n)


def bleu(pairs, N: int = 4) -> float:
    """Corpus BLEU@N: clipped counts summed over the corpus, then combined."""
    if N not in (1, 2, 3, 4):
        raise ContractError("BLEU order must be in 1..4")
    correct, total, c_len, r_len = [0] * N, [0] * N, 0, 0
    for cand, refs in _prepare(pairs):
        co, to, c, r = _bleu_stats(cand, refs, N)
        correct = [a + b for a, b in zip(correct, co)]
        total = [a + b for a, b in zip(total, to)]
        c_len += c
        r_len += r
    return _bleu_from_stats(correct, total, c_len, r_len, N)


def sentence_bleu(cand, refs, N=4) -> float:
    return _bleu_from_stats(*_bleu_stats(cand, refs, N), N)


# --------------------------------------------------------------- ROUGE-L

def _lcs(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def sentence_rouge_l(cand, refs, beta: float = 1.2) -> float:
    best = 0.0
    for r in refs:
        lcs = _lcs(cand, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(cand), lcs / len(r)
        best = max(best, (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p))
    return best


def rouge_l(pairs, beta: float = 1.2) -> float:
    scores = [sentence_rouge_l(c, refs, beta) for c, refs in _prepare(pairs)]
    return sum(scores) / len(scores)


# --------------------------------------------------------------- CIDEr-D

class CiderD:
    """CIDEr-D with document frequencies taken from a reference corpus.

    ``refs_corpus`` is a list with one entry per document (video), each a
    list of tokenised references.
    """

    def __init__(self, refs_corpus, n: int = 4, sigma: float = 6.0):
        self.n = n
        self.sigma = sigma
        self.num_docs = len(refs_corpus)
        self.df = Counter()
        for refs in refs_corpus:
            seen = set()
            for r in refs:
                for k in range(1, n + 1):
                    seen.update(_ngrams(r, k))
            self.df.update(seen)
        self.uniform = self.num_docs < 2
        if self.uniform:
            warnings.warn("CIDEr-D over fewer than 2 documents: IDF set to 1 for every n-gram", stacklevel=2)
        self.log_docs = math.log(float(max(self.num_docs, 1)))

    def _idf(self, gram) -> float:
        if self.uniform:
            return 1.0
        return self.log_docs - math.log(max(1.0, float(self.df[gram])))

    def _vec(self, tokens):
        vecs, norms = [], []
        for k in range(1, self.n + 1):
            v = {g: tf * self._idf(g) for g, tf in _ngrams(tokens, k).items()}
            vecs.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        return vecs, norms

    def score(self, cand, refs) -> float:
        cv, cn = self._vec(cand)
        total = 0.0
        for r in refs:
            rv, rn = self._vec(r)
            penalty = math.exp(-((len(cand) - len(r)) ** 2) / (2 * self.sigma ** 2))
            s = 0.0
            for k in range(self.n):
                val = sum(min(x, rv[k].get(g, 0.0)) * rv[k].get(g, 0.0) for g, x in cv[k].items())
                if cn[k] != 0 and rn[k] != 0:
                    val /= cn[k] * rn[k]
                s += val * penalty
            total += s / self.n
        return total / len(refs)


def cider_d(pairs, sigma: float = 6.0) -> float:
    prepared = _prepare(pairs)
    scorer = CiderD([refs for _, refs in prepared], sigma=sigma)
    scores = [scorer.score(c, refs) for c, refs in prepared]
    return sum(scores) / len(scores)


# ----------------------------------------------------------- METEOR-lite

_SUFFIXES = ("ing", "ed", "es", "s")


def stem(word: str) -> str:
    for suf in _SUFFIXES:
        if word.endswith(suf) and len(word) - len(suf) >= 3:
            return word[: -len(suf)]
    return word


_EXHAUSTIVE_LIMIT = 4096


def _crossings(pairs) -> int:
    n = 0
    for a in range(len(pairs)):
        i, j = pairs[a]
        for k, l in pairs[a + 1:]:
            if (i - k) * (j - l) < 0:
                n += 1
    return n


def _stage_options(cand, ref, key, used_c, used_r):
    """Per match key, every choice of occurrences to pair (paired in order)."""
    groups: dict[str, tuple[list[int], list[int]]] = {}
    for i, w in enumerate(cand):
        if i not in used_c:
            groups.setdefault(key(w), ([], []))[0].append(i)
    for j, w in enumerate(ref):
        if j not in used_r:
            k = key(w)
            if k in groups:
                groups[k][1].append(j)
    options = []
    for cs, rs in groups.values():
        k = min(len(cs), len(rs))
        if k == 0:
            continue
        if len(cs) > k:
            options.append([list(zip(sub, rs)) for sub in itertools.combinations(cs, k)])
        else:
            options.append([list(zip(cs, sub)) for sub in itertools.combinations(rs, k)])
    return options


def _align(cand, ref):
    """Matched (cand_pos, ref_pos) pairs, sorted by candidate position.

    Exact matches are aligned first, then stem matches among the leftovers.
    Each stage matches as many words as possible and, among those
    alignments, takes the one with the fewest crossing links, then the
    fewest chunks.  Repeated words are always paired in order of occurrence.
    Past ``_EXHAUSTIVE_LIMIT`` combinations a per-word local search is used.
    """
    pairs: list[tuple[int, int]] = []
    for key in (lambda w: w, stem):
        options = _stage_options(cand, ref, key, {i for i, _ in pairs}, {j for _, j in pairs})
        if not options:
            continue

        def cost(choice, base=pairs):
            al = sorted(base + [p for group in choice for p in group])
            return (_crossings(al), _chunks(al), al)

        total = math.prod(len(o) for o in options)
        if total <= _EXHAUSTIVE_LIMIT:
            best = min((cost(c) for c in itertools.product(*options)), key=lambda t: t[:2] + (t[2],))
        else:
            choice = [o[0] for o in options]
            best = cost(choice)
            improved = True
            while improved:
                improved = False
                for g, opts in enumerate(options):
                    for o in opts:
                        trial = choice[:g] + [o] + choice[g + 1:]
                        c = cost(trial)
                        if c < best:
                            best, choice, improved = c, trial, True
        pairs = best[2]
    return sorted(pairs)


def _chunks(pairs) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or not (i == prev[0] + 1 and j == prev[1] + 1):
            chunks += 1
        prev = (i, j)
    return chunks


def _meteor_score(m, chunks, len_c, len_r, alpha, beta, gamma):
    if m == 0:
        return 0.0
    p, r = m / len_c, m / len_r
    fmean = p * r / (alpha * p + (1 - alpha) * r)
    return fmean * (1.0 - gamma * (chunks / m) ** beta)


def sentence_meteor_lite(cand, refs, alpha=0.9, beta=3.0, gamma=0.5) -> float:
    best = 0.0
    for r in refs:
        pairs = _align(cand, r)
        best = max(best, _meteor_score(len(pairs), _chunks(pairs), len(cand), len(r), alpha, beta, gamma))
    return best


def meteor_lite(pairs, alpha: float = 0.9, beta: float = 3.0, gamma: float = 0.5) -> float:
    scores = [sentence_meteor_lite(c, refs, alpha, beta, gamma) for c, refs in _prepare(pairs)]
    return sum(scores) / len(scores)


# ---------------------------------------------------------------- report

@dataclass(frozen=True)
class MetricReport:
    bleu: tuple[float, float, float, float]
    meteor_lite: float
    rouge_l: float
    cider_d: float

    COLUMNS = ("B@1", "B@2", "B@3", "B@4", "M-lite", "R", "C")

    def values(self) -> list[float]:
        return [*self.bleu, self.meteor_lite, self.rouge_l, self.cider_d]

    def percent(self) -> dict[str, float]:
        return {k: 100.0 * v for k, v in zip(self.COLUMNS, self.values())}

    def to_json(self) -> str:
        return json.dumps({
            "bleu": [100.0 * b for b in self.bleu],
            "meteor_lite": 100.0 * self.meteor_lite,
            "rouge_l": 100.0 * self.rouge_l,
            "cider_d": 100.0 * self.cider_d,
        }, sort_keys=True)

    def table(self, name: str = "model") -> str:
        width = max(len(name), 5)
        head = "Model".ljust(width) + "".join(f" | {c:>7}" for c in self.COLUMNS)
        row = name.ljust(width) + "".join(f" | {v:7.2f}" for v in self.percent().values())
        return "\n".join([head, "-" * len(head), row])


def evaluate(pairs) -> MetricReport:
    pairs = list(pairs)
    if not pairs:
        raise ContractError("evaluation over an empty corpus")
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        cider = cider_d(pairs)
    return MetricReport(
        bleu=tuple(bleu(pairs, n) for n in range(1, 5)),
        meteor_lite=meteor_lite(pairs),
        rouge_l=rouge_l(pairs),
        cider_d=cider,
    )
