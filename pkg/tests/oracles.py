"""Independent reference implementations used as test oracles."""

import itertools
import sys
from fractions import Fraction


def all_strings(alphabet, max_len):
    return ["".join(s) for n in range(max_len + 1) for s in itertools.product(alphabet, repeat=n)]


class RecursiveEditDistance:
    """Levenshtein distance from its recursive definition, memoized over a closed string set.

    d(a, "") = |a|, d("", b) = |b|,
    d(a, b) = min(d(a[1:], b) + 1, d(a, b[1:]) + 1, d(a[1:], b[1:]) + [a0 != b0]).
    """

    def __init__(self, strings):
        self.index = {s: i for i, s in enumerate(strings)}
        assert all(s[1:] in self.index for s in strings), "set must be closed under suffixes"
        self.strings = strings
        n = len(strings)
        self.memo = [[-1] * n for _ in range(n)]
        sys.setrecursionlimit(max(sys.getrecursionlimit(), 10_000))

    def __call__(self, a, b):
        return self._d(self.index[a], self.index[b])

    def _d(self, i, j):
        m = self.memo[i][j]
        if m >= 0:
            return m
        a, b = self.strings[i], self.strings[j]
        if not a:
            r = len(b)
        elif not b:
            r = len(a)
        else:
            ta, tb = self.index[a[1:]], self.index[b[1:]]
            r = min(self._d(ta, j) + 1, self._d(i, tb) + 1, self._d(ta, tb) + (a[0] != b[0]))
        self.memo[i][j] = r
        return r


def similarity_oracle(argmaxes, n_base):
    """Per-language share of segment votes, by loop, count and divide, with exact fractions."""
    M = len(argmaxes)
    sims = []
    for k in range(n_base):
        count = 0
        for vote in argmaxes:
            if vote == k:
                count += 1
        sims.append(Fraction(count, M))
    return sims


def lowest_index_argmax(row):
    best = 0
    for j in range(1, len(row)):
        if row[j] > row[best]:
            best = j
    return best
