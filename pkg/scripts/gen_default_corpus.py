#!/usr/bin/env python3
"""Regenerate the packaged char-LM corpus (src/nalab/assets/desk_corpus.txt).

The corpus is synthetic English-like prose drawn deterministically from a
fixed word list, so the repository ships no third-party text and the file can
be rebuilt bit-identically at any time.
"""

import argparse
import os

from nalab.rng import Rng

WORDS = """
the of and to in is was for on that with as his they at be this from have or
by one had not but what all were when we there can an your which their said if
do will each about how up out them then she many some so these would other
into more her two like him see time could no make than first been its who now
people my made over did down only way find use may water long little very
after words called just where most know get through back much before go good
new write our used me man too any day same right look think also around
another came come work three word must because does part even place well such
here take why things help put years different away again off went old number
great tell men say small every found still between name should home big give
air line set own under read last never us left end along while might next
sound below saw something thought both few those always looked show large
often together asked house world going want school until form food keep
children feet land side without boy once animals life enough took sometimes
four head above kind began almost live page got earth need far hand high year
mother light parts country father let night following picture being study
second eyes soon times story boys since white days ever paper hard near
sentence better best across during today others however sure means knew it's
try told young miles sun ways thing whole hear example heard several change
answer room against top turned learn point city play toward five using
himself usually money seen didn't car morning I'm body upon family later turn
move face door cut done group true half red fish plants living black eat
short united run book gave order open ground cold really table remember tree
course front American space inside ago sad early I'll learned brought close
nothing though idea before lived became add become grow draw yet less wind
behind cannot letter among able dog shown mean English rest perhaps certain
six feel fire ready green yes built special ran full town complete oh person
hot anything hold state list stood hundred ten fast felt kept notice can't
strong voice probably area horse matter stand box start that's class piece
surface river common stop am talk whether fine round dark past ball girl road
blue instead either held already warm gone finally summer understand moon
animal mind outside power problem longer winter deep heavy carefully follow
beautiful everyone leave everything game system bring watch shell dry within
floor ice ship themselves begin fact third quite carry distance although sat
possible heart real simple snow rain suddenly easy leaves lay size wild
weather miss pattern sky walked main someone center field stay itself boat
question wide least tiny hour happened foot care low else gold build glass
rock tall alone bottom check reading fall poor map friend language job music
buy window mark heat grew listen ask single clear energy week explain lost
spring travel wrote farm circle whose received garden please strange caught
fell team God certainly don't whereupon
""".split()

PUNCT = [".", ".", ".", ".", ".", "?", "!"]


def generate(seed: int, target_bytes: int) -> str:
    rng = Rng(seed)
    lines = []
    total = 0
    while total < target_bytes:
        n = 5 + rng.randint(10)
        words = [WORDS[rng.randint(len(WORDS))] for _ in range(n)]
        words[0] = words[0][0].upper() + words[0][1:]
        sentence = " ".join(words) + PUNCT[rng.randint(len(PUNCT))]
        lines.append(sentence)
        total += len(sentence) + 1
    return "\n".join(lines) + "\n"


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=20240601)
    parser.add_argument("--bytes", type=int, default=100_000)
    parser.add_argument(
        "--out",
        default=os.path.join(os.path.dirname(__file__), "..", "src", "nalab", "assets",
                             "desk_corpus.txt"),
    )
    args = parser.parse_args()
    text = generate(args.seed, args.bytes)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    print(f"wrote {len(text)} bytes to {args.out}")


if __name__ == "__main__":
    main()
