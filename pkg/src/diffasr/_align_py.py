"""Pure-Python Levenshtein alignment; fallback for the compiled ``_align`` kernel."""


def align(ref, hyp):
    """Unit-cost edit distance from ``ref`` to ``hyp`` with (S, D, I) counts.

    Backtrace prefers the diagonal, then deletion, then insertion, so counts are
    deterministic among equally short alignments. Returns ``(dist, S, D, I)``.
    """
    n, m = len(ref), len(hyp)
    prev = list(range(m + 1))
    table = [prev]
    for i in range(1, n + 1):
        row = [i] + [0] * m
        r = ref[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1] + (r != hyp[j - 1])
            d = prev[j] + 1
            if d < best:
                best = d
            ins = row[j - 1] + 1
            if ins < best:
                best = ins
            row[j] = best
        table.append(row)
        prev = row

    i, j = n, m
    sub = dele = ins = 0
    while i > 0 or j > 0:
        cur = table[i][j]
        if i > 0 and j > 0 and cur == table[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            sub += ref[i - 1] != hyp[j - 1]
            i -= 1
            j -= 1
        elif i > 0 and cur == table[i - 1][j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return table[n][m], sub, dele, ins
