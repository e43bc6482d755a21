"""Build the bundled head/body/tail fixture corpus.

Target shape: 5,896 titles split 10.7% / 19.3% / 70.0% (head / body / tail),
mention shares 48.4% / 25.4% / 26.3% at 0.1% reporting precision. Those
three shares are rounded figures summing to 100.1%, so the script searches
for integer mention totals whose shares round to each of them.

    python3 scripts/make_tier_shares_fixture.py [--out tests/data/tier_shares_fixture.jsonl]
"""

import argparse
import json
from pathlib import Path

import numpy as np

N_TITLES = 5896
TITLE_COUNTS = {"head": 631, "body": 1138, "tail": 4127}
TITLE_SHARES = {"head": 10.7, "body": 19.3, "tail": 70.0}
MENTION_SHARES = {"head": 48.4, "body": 25.4, "tail": 26.3}
N_DIALOGUES = 3000


def pct(x, total):
    return round(100.0 * x / total, 1)


def search_mentions():
    """Smallest total with shares rounding to the targets; tail mentions = tail titles."""
    t = TITLE_COUNTS["tail"]
    for total in range(t, 10 * t):
        if pct(t, total) != MENTION_SHARES["tail"]:
            continue
        b_target = round(MENTION_SHARES["body"] / 100 * total)
        for b in range(b_target - 20, b_target + 21):
            h = total - t - b
            if pct(b, total) == MENTION_SHARES["body"] and pct(h, total) == MENTION_SHARES["head"]:
                return h, b, t
    raise SystemExit("no integer solution")


def spread(total, n, lo, hi, weights):
    """Integer counts in [lo, hi] summing to ``total``, roughly proportional to ``weights``."""
    base = np.full(n, lo)
    extra = total - lo * n
    w = np.asarray(weights, float)
    raw = extra * w / w.sum()
    add = np.minimum(np.floor(raw).astype(int), hi - lo)
    rem = extra - add.sum()
    order = np.argsort(-(raw - np.floor(raw)), kind="stable")
    i = 0
    while rem > 0:
        j = order[i % n]
        if base[j] + add[j] < hi:
            add[j] += 1
            rem -= 1
        i += 1
    return base + add


def build(out: Path):
    h, b, t = search_mentions()
    nh, nb, nt = TITLE_COUNTS["head"], TITLE_COUNTS["body"], TITLE_COUNTS["tail"]
    head_pop = spread(h, nh, 6, N_DIALOGUES, [1.0 / (r + 5) for r in range(nh)])
    body_pop = spread(b, nb, 2, 5, [1.0 / (r + 50) for r in range(nb)])
    pops = np.concatenate([head_pop, body_pop, np.ones(nt, dtype=int)])
    assert pops.sum() == h + b + t and head_pop.max() <= N_DIALOGUES

    ids = [str(100000 + i) for i in range(N_TITLES)]
    # consecutive slots of one movie go to consecutive dialogues, so its copies never share one
    slots = np.repeat(np.arange(N_TITLES), pops)
    per_dialogue = [[] for _ in range(N_DIALOGUES)]
    for s, m in enumerate(slots):
        per_dialogue[s % N_DIALOGUES].append(ids[m])

    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as fh:
        for j, movies in enumerate(per_dialogue):
            msgs = [{"senderWorkerId": 1, "text": "hi, any movie suggestions?"}]
            for k, m in enumerate(movies):
                who = 2 if k % 2 == 0 else 1
                msgs.append({"senderWorkerId": who, "text": f"have you seen @{m}?"})
            msgs.append({"senderWorkerId": 1, "text": "thanks, bye"})
            obj = {"conversationId": f"fx{j:05d}", "messages": msgs,
                   "movieMentions": {m: f"Film {int(m) - 100000}" for m in movies}}
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
    return h, b, t


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests/data/tier_shares_fixture.jsonl"))
    args = ap.parse_args()
    h, b, t = build(Path(args.out))
    total = h + b + t
    print(f"mentions head={h} body={b} tail={t} total={total}")
    print("mention shares", pct(h, total), pct(b, total), pct(t, total))
    print("title shares", *(pct(TITLE_COUNTS[g], N_TITLES) for g in ("head", "body", "tail")))


if __name__ == "__main__":
    main()
