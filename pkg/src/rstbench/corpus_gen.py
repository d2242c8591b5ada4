"""Deterministic generator for the bundled test corpus.

Produces ~1 MB of English-like prose from a fixed word list with a seeded
bigram-flavored sampler. Synthetic by construction, so it carries no
license baggage, and the char vocabulary stays small and stable.

Regenerate with:  python -m rstbench.corpus_gen [out_path]
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

_NOUNS = """time year people way day man thing woman life child world school state
family student group country problem hand part place case week company system
program question work government number night point home water room mother area
money story fact month lot right study book eye job word business issue side kind
head house service friend father power hour game line end member law car city
community name president team minute idea body information back parent face others
level office door health person art war history party result change morning reason
research girl guy moment air teacher force education""".split()

_VERBS = """said made went took came wanted looked used found gave told worked
called asked needed felt became left put meant kept began seemed helped talked
turned started showed heard played ran moved liked lived believed held brought
wrote provided sat stood lost paid met included continued set learned changed
led understood watched followed stopped created spoke read allowed added spent
grew opened walked won offered remembered loved considered appeared bought
waited served died sent expected built stayed fell reached killed remained""".split()

_ADJS = """good new first last long great little own other old right big high
different small large next early young important few public bad same able free
low late hard major better economic strong possible whole real American national
social only clear white full special easy recent certain personal open red
difficult available likely short single medical current wrong private past foreign
fine common poor natural significant similar hot dead central happy serious ready
simple left physical general environmental financial blue democratic dark various
entire close legal religious cold final main green nice huge popular traditional
cultural""".split()

_FILLERS = """the a an and but or so because while although when after before
if unless since through over under between among within without against about
toward near beyond across into onto upon of for with from that which who whom
this these those any each every some most all both either neither""".split()


def generate_corpus(n_chars: int = 1_050_000, seed: int = 715) -> str:
    rng = np.random.default_rng(seed)
    pools = (_FILLERS, _ADJS, _NOUNS, _VERBS)
    out: list[str] = []
    total = 0
    while total < n_chars:
        n_words = int(rng.integers(5, 16))
        words = []
        state = 0
        for _ in range(n_words):
            pool = pools[state]
            words.append(pool[int(rng.integers(0, len(pool)))])
            # crude grammar walk: filler -> adj -> noun -> verb -> filler ...
            state = (state + int(rng.integers(1, 3))) % len(pools)
        sentence = " ".join(words).capitalize()
        punct = ".?!"[int(rng.integers(0, 3))] if rng.random() < 0.2 else "."
        sentence += punct + (" " if rng.random() < 0.85 else "\n")
        out.append(sentence)
        total += len(sentence)
    return "".join(out)[:n_chars]


def main(argv=None) -> int:
    args = sys.argv[1:] if argv is None else argv
    out = Path(args[0]) if args else Path(__file__).parent / "assets" / "corpus.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(generate_corpus(), encoding="utf-8")
    print(f"wrote {out} ({out.stat().st_size} bytes)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
