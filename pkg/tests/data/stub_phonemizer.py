"""Stand-in for an external phonemizer speaking the line protocol.

Reads one sentence per line and prints one space-separated phoneme line.
Letters map through a fixed table; digraphs are matched first.
"""

import sys

DIGRAPHS = {"th": "θ", "sh": "ʃ", "ch": "tʃ", "ng": "ŋ", "ee": "iː", "oo": "uː"}
LETTERS = {"a": "æ", "e": "ɛ", "i": "ɪ", "o": "ɒ", "u": "ʌ", "y": "j", "c": "k", "q": "k", "x": "ks"}


def phonemes(line: str) -> list[str]:
    out = []
    for word in line.lower().split():
        k = 0
        while k < len(word):
            pair = word[k : k + 2]
            if pair in DIGRAPHS:
                out.append(DIGRAPHS[pair])
                k += 2
                continue
            ch = word[k]
            if ch.isalpha():
                out.append(LETTERS.get(ch, ch))
            k += 1
        out.append("|")
    return out[:-1] if out else ["|"]


for line in sys.stdin:
    print(" ".join(phonemes(line.rstrip("\n"))), flush=True)
