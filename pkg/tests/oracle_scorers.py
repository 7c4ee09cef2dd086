"""Independent reference scorers for the metrics tests.

These follow the classic coco-caption algorithm structure (cook/précook
n-gram dicts, per-image accumulation) rather than the package's corpus
pipeline, so the two paths share no code.
"""

import math
from collections import defaultdict

import numpy as np


def precook(words, n=4):
    counts = defaultdict(int)
    for k in range(1, n + 1):
        for i in range(len(words) - k + 1):
            counts[tuple(words[i:i + k])] += 1
    return len(words), counts


def cook_refs(refs, n=4):
    reflen = []
    maxcounts = {}
    for ref in refs:
        rl, counts = precook(ref, n)
        reflen.append(rl)
        for ngram, count in counts.items():
            maxcounts[ngram] = max(maxcounts.get(ngram, 0), count)
    return reflen, maxcounts


def oracle_bleu(candidates, references, n=4):
    """Corpus BLEU with 'closest' effective reference length, no smoothing."""
    totalcomps = {"testlen": 0, "reflen": 0,
                  "guess": [0] * n, "correct": [0] * n}
    for test, refs in zip(candidates, references):
        reflen, refmaxcounts = cook_refs(refs, n)
        testlen, counts = precook(test, n)
        # closest reference length, ties toward the shorter one
        reflen = min(reflen, key=lambda rl: (abs(rl - testlen), rl))
        totalcomps["testlen"] += testlen
        totalcomps["reflen"] += reflen
        for k in range(1, n + 1):
            totalcomps["guess"][k - 1] += max(0, testlen - k + 1)
        for ngram, count in counts.items():
            totalcomps["correct"][len(ngram) - 1] += min(
                refmaxcounts.get(ngram, 0), count)
    bleus = []
    logsum = 0.0
    for k in range(n):
        if totalcomps["guess"][k] == 0 or totalcomps["correct"][k] == 0:
            return 0.0
        logsum += math.log(totalcomps["correct"][k]) - math.log(totalcomps["guess"][k])
    score = math.exp(logsum / n)
    ratio = totalcomps["testlen"] / totalcomps["reflen"] if totalcomps["reflen"] else 0.0
    if ratio < 1.0 and totalcomps["testlen"] > 0:
        score *= math.exp(1.0 - totalcomps["reflen"] / totalcomps["testlen"])
    return score


def my_lcs(string, sub):
    if len(string) < len(sub):
        sub, string = string, sub
    lengths = [[0 for _ in range(len(sub) + 1)] for _ in range(len(string) + 1)]
    for j in range(1, len(sub) + 1):
        for i in range(1, len(string) + 1):
            if string[i - 1] == sub[j - 1]:
                lengths[i][j] = lengths[i - 1][j - 1] + 1
            else:
                lengths[i][j] = max(lengths[i - 1][j], lengths[i][j - 1])
    return lengths[len(string)][len(sub)]


def oracle_rouge(candidates, references, beta=1.2):
    scores = []
    for candidate, refs in zip(candidates, references):
        prec = []
        rec = []
        for reference in refs:
            lcs = my_lcs(reference, candidate)
            prec.append(lcs / float(len(candidate)) if candidate else 0.0)
            rec.append(lcs / float(len(reference)) if reference else 0.0)
        prec_max = max(prec)
        rec_max = max(rec)
        if prec_max != 0 and rec_max != 0:
            scores.append(((1 + beta ** 2) * prec_max * rec_max)
                          / float(rec_max + beta ** 2 * prec_max))
        else:
            scores.append(0.0)
    return float(np.mean(scores))


def oracle_cider(candidates, references, n=4, sigma=6.0):
    """CIDEr-D with corpus document frequencies."""
    crefs = [[precook(ref, n)[1] for ref in refs] for refs in references]
    ctest = [precook(test, n)[1] for test in candidates]

    document_frequency = defaultdict(float)
    for refs in crefs:
        for ngram in set(ng for ref in refs for ng in ref.keys()):
            document_frequency[ngram] += 1
    ref_len = np.log(float(len(crefs)))

    def counts2vec(cnts):
        vec = [defaultdict(float) for _ in range(n)]
        length = 0
        norm = [0.0 for _ in range(n)]
        for ngram, term_freq in cnts.items():
            df = np.log(max(1.0, document_frequency[ngram]))
            k = len(ngram) - 1
            vec[k][ngram] = float(term_freq) * (ref_len - df)
            norm[k] += pow(vec[k][ngram], 2)
            if k == 1:
                length += term_freq
        return vec, [np.sqrt(x) for x in norm], length

    def sim(vec_hyp, vec_ref, norm_hyp, norm_ref, length_hyp, length_ref):
        delta = float(length_hyp - length_ref)
        val = np.array([0.0 for _ in range(n)])
        for k in range(n):
            for ngram, count in vec_hyp[k].items():
                val[k] += min(vec_hyp[k][ngram], vec_ref[k][ngram]) * vec_ref[k][ngram]
            if norm_hyp[k] != 0 and norm_ref[k] != 0:
                val[k] /= norm_hyp[k] * norm_ref[k]
            val[k] *= np.e ** (-(delta ** 2) / (2 * sigma ** 2))
        return val

    scores = []
    for test, refs in zip(ctest, crefs):
        vec, norm, length = counts2vec(test)
        score = np.array([0.0 for _ in range(n)])
        for ref in refs:
            vec_ref, norm_ref, length_ref = counts2vec(ref)
            score += sim(vec, vec_ref, norm, norm_ref, length, length_ref)
        score_avg = np.mean(score)
        score_avg /= len(refs)
        score_avg *= 10.0
        scores.append(score_avg)
    return float(np.mean(scores))
